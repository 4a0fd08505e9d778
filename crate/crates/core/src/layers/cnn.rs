use rand::Rng;

use super::{uniform, Graph};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tensor, Var};
use crate::text::{ContextSequence, PAD};

/// Trainable `(2l+1)×p` table, one row per relative offset `−l..=l`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PositionEmbedding {
    pub table: ParamId,
    pub half_width: usize,
}

impl PositionEmbedding {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        half_width: usize,
        dim: usize,
        range: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(PositionEmbedding {
            table: store.insert(name, uniform(&[2 * half_width + 1, dim], range, rng))?,
            half_width,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBranch {
    pub width: usize,
    pub filters: ParamId,
    pub bias: ParamId,
}

/// Filter banks of several widths over a shared input sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvBank {
    pub branches: Vec<ConvBranch>,
    pub out_dim: usize,
}

impl ConvBank {
    /// `filters` lists `(width, count)` pairs in branch order.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        filters: &[(usize, usize)],
        in_dim: usize,
        range: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut branches = Vec::with_capacity(filters.len());
        for &(width, count) in filters {
            branches.push(ConvBranch {
                width,
                filters: store.insert(
                    format!("{prefix}.w{width}.filters"),
                    uniform(&[count, width, in_dim], range, rng),
                )?,
                bias: store.insert(format!("{prefix}.w{width}.bias"), Tensor::zeros(&[count]))?,
            });
        }
        Ok(ConvBank {
            out_dim: filters.iter().map(|f| f.1).sum(),
            branches,
        })
    }

    pub fn max_width(&self) -> usize {
        self.branches.iter().map(|b| b.width).max().unwrap_or(1)
    }

    /// Feature sequence `C` of every branch.
    pub fn features(&self, g: &mut Graph<'_>, seq: Var) -> Result<Vec<Var>> {
        self.branches
            .iter()
            .map(|b| {
                let f = g.param(b.filters);
                let bias = g.param(b.bias);
                g.tape.conv1d(seq, f, bias)
            })
            .collect()
    }

    /// Max-pooled branch outputs, concatenated.
    pub fn max_pooled(&self, g: &mut Graph<'_>, seq: Var) -> Result<Var> {
        let pooled = self
            .features(g, seq)?
            .into_iter()
            .map(|c| g.tape.max_pool_time(c))
            .collect::<Result<Vec<_>>>()?;
        g.tape.concat(&pooled)
    }
}

/// Layer-1 word encoder: each token's context window of word ⊕ position
/// embeddings runs through the shared filter banks and is max-pooled,
/// giving one row `h_i` per token.
pub fn cnn_encode(
    g: &mut Graph<'_>,
    ctx: &ContextSequence,
    word_emb: ParamId,
    pos: &PositionEmbedding,
    bank: &ConvBank,
) -> Result<Var> {
    if ctx.half_width != pos.half_width {
        return Err(Error::config(
            "window",
            format!(
                "context half-width {} but position table built for {}",
                ctx.half_width, pos.half_width
            ),
        ));
    }
    if ctx.is_empty() {
        return Err(Error::shape("cnn_encode of an empty sequence"));
    }
    let positions = g.param(pos.table);
    let mut rows = Vec::with_capacity(ctx.len());
    for window in &ctx.windows {
        let words = g.gather(word_emb, window, Some(PAD))?;
        let x = g.tape.concat(&[words, positions])?;
        rows.push(bank.max_pooled(g, x)?);
    }
    g.tape.stack_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::build_context_sequences;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(range: f64) -> (ParamStore, ParamId, PositionEmbedding, ConvBank) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let emb = store.insert("emb", uniform(&[10, 4], range, &mut rng)).unwrap();
        let pos = PositionEmbedding::init(&mut store, "pos", 2, 3, range, &mut rng).unwrap();
        let bank =
            ConvBank::init(&mut store, "enc", &[(1, 2), (2, 2), (3, 2), (4, 2)], 7, 0.3, &mut rng)
                .unwrap();
        (store, emb, pos, bank)
    }

    #[test]
    fn one_row_per_token_of_total_filter_count() {
        let (store, emb, pos, bank) = setup(0.5);
        let ctx = build_context_sequences(&[2, 3, 4, 5, 6], 2).unwrap();
        let mut g = Graph::new(&store);
        let h = cnn_encode(&mut g, &ctx, emb, &pos, &bank).unwrap();
        assert_eq!(g.tape.shape(h), &[5, 8]);
    }

    #[test]
    fn identical_windows_give_identical_rows() {
        let (store, emb, pos, bank) = setup(0.5);
        let ctx = build_context_sequences(&[3, 3, 3, 3, 3, 3, 3], 2).unwrap();
        let mut g = Graph::new(&store);
        let h = cnn_encode(&mut g, &ctx, emb, &pos, &bank).unwrap();
        let v = g.tape.value(h);
        assert_eq!(v.row(2), v.row(3));
        assert_eq!(v.row(3), v.row(4));
    }

    #[test]
    fn zero_embeddings_give_pooled_bias() {
        let (mut store, emb, pos, bank) = setup(0.0);
        for (i, b) in bank.branches.iter().enumerate() {
            store.get_mut(b.bias).data_mut()[0] = 0.1 * (i + 1) as f64;
            store.get_mut(b.bias).data_mut()[1] = -0.2;
        }
        let ctx = build_context_sequences(&[2, 5, 9], 2).unwrap();
        let mut g = Graph::new(&store);
        let h = cnn_encode(&mut g, &ctx, emb, &pos, &bank).unwrap();
        let expect: Vec<f64> = (1..=4).flat_map(|i| [0.1 * i as f64, -0.2]).collect();
        for r in 0..3 {
            assert_eq!(g.tape.value(h).row(r), &expect);
        }
    }

    #[test]
    fn half_width_mismatch_is_config_error() {
        let (store, emb, pos, bank) = setup(0.5);
        let ctx = build_context_sequences(&[2, 3], 3).unwrap();
        let mut g = Graph::new(&store);
        assert!(matches!(
            cnn_encode(&mut g, &ctx, emb, &pos, &bank),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn leading_padding_shifts_interior_rows() {
        let (store, emb, pos, bank) = setup(0.5);
        let ids = [2, 3, 4, 5, 6, 7, 8, 9];
        let mut shifted = vec![PAD, PAD, PAD];
        shifted.extend_from_slice(&ids);
        let mut g = Graph::new(&store);
        let a = build_context_sequences(&ids, 2).unwrap();
        let b = build_context_sequences(&shifted, 2).unwrap();
        let ha = cnn_encode(&mut g, &a, emb, &pos, &bank).unwrap();
        let hb = cnn_encode(&mut g, &b, emb, &pos, &bank).unwrap();
        // Tokens whose windows stay inside the original text.
        for i in 2..ids.len() - 2 {
            assert_eq!(g.tape.value(ha).row(i), g.tape.value(hb).row(i + 3));
        }
    }
}
