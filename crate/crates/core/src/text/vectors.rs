use std::fs;
use std::path::Path;

use rand::Rng;

use super::{Vocabulary, PAD, UNK};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Word embedding matrix aligned with a [`Vocabulary`].
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub matrix: Tensor,
    pub trainable: bool,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    /// Uniform(−range, range) rows with a zero padding row.
    pub fn random(rows: usize, dim: usize, range: f64, rng: &mut impl Rng) -> Self {
        let mut data: Vec<f64> = (0..rows * dim).map(|_| rng.gen_range(-range..range)).collect();
        data[PAD * dim..(PAD + 1) * dim].fill(0.0);
        EmbeddingTable {
            matrix: Tensor::matrix(rows, dim, data).expect("rows and dim are positive"),
            trainable: true,
        }
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Loads a text vector file: a `<count> <dim>` header, then one
/// `token v1 … vdim` line per word.
///
/// Row 0 is the zero padding vector, row 1 (UNK) the mean of all loaded
/// vectors, and loaded words follow in file order.
pub fn load_word_vectors(path: &Path, dim: usize) -> Result<(EmbeddingTable, Vocabulary)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());

    let mut vocab = Vocabulary::default();
    let mut rows: Vec<f64> = vec![0.0; 2 * dim];

    match lines.next() {
        None => {
            log::warn!("{}: empty vector file; only PAD and UNK rows", path.display());
        }
        Some((lineno, header)) => {
            let fields: Vec<&str> = header.split_whitespace().collect();
            let [count, file_dim] = fields[..] else {
                return Err(parse_err(path, lineno + 1, "header must be `<count> <dim>`"));
            };
            let count: usize = count
                .parse()
                .map_err(|_| parse_err(path, lineno + 1, "bad count in header"))?;
            let file_dim: usize = file_dim
                .parse()
                .map_err(|_| parse_err(path, lineno + 1, "bad dim in header"))?;
            if file_dim != dim {
                return Err(Error::config(
                    "word_dim",
                    format!("vector file has dim {file_dim}, config expects {dim}"),
                ));
            }
            let mut loaded = 0usize;
            for (lineno, line) in lines {
                let mut parts = line.split_whitespace();
                let token = parts.next().expect("non-empty line");
                let values: Vec<f64> = parts
                    .map(|p| {
                        p.parse::<f64>()
                            .map_err(|_| parse_err(path, lineno + 1, format!("bad number {p:?}")))
                    })
                    .collect::<Result<_>>()?;
                if values.len() != dim {
                    return Err(parse_err(
                        path,
                        lineno + 1,
                        format!("expected {dim} values, found {}", values.len()),
                    ));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(parse_err(path, lineno + 1, "non-finite value"));
                }
                if vocab.get(token).is_some() {
                    log::warn!("{}:{}: duplicate token {token:?} ignored", path.display(), lineno + 1);
                    continue;
                }
                vocab.push(token.to_string());
                rows.extend_from_slice(&values);
                loaded += 1;
            }
            if loaded != count {
                log::warn!(
                    "{}: header announces {count} vectors, loaded {loaded}",
                    path.display()
                );
            }
            if loaded > 0 {
                let (head, body) = rows.split_at_mut(2 * dim);
                let unk = &mut head[UNK * dim..(UNK + 1) * dim];
                for row in body.chunks_exact(dim) {
                    for (u, v) in unk.iter_mut().zip(row) {
                        *u += v;
                    }
                }
                for u in unk.iter_mut() {
                    *u /= loaded as f64;
                }
            }
        }
    }

    let n = vocab.len();
    let matrix = Tensor::matrix(n, dim, rows)?;
    Ok((
        EmbeddingTable {
            matrix,
            trainable: true,
        },
        vocab,
    ))
}
