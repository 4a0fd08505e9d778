//! Model variants assembled from the layers: forward pass, losses,
//! predictions, attention inspection and checkpoints.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use config::{EncoderKind, ModelConfig, Variant};

use std::fmt::Write as _;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{
    attention_loss, attention_pool, bilstm_encode, cnn_encode, supervised_target, uniform,
    AttentionPool, BiLstmEncoder, ConvBank, Dense, Graph, PositionEmbedding,
};
use crate::schema::{ElementTag, Task};
use crate::tensor::{grad_check_params, GradCheckReport, Gradients, ParamId, ParamStore, Tape, Var};
use crate::text::{build_context_sequences, EmbeddingTable, Story, Vocabulary, PAD};

/// Whether dropout is active. Training draws inverted-dropout masks from
/// the given generator in a fixed order.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut dyn RngCore),
}

impl Mode<'_> {
    fn dropout(&mut self, g: &mut Graph<'_>, x: Var, rate: f64) -> Result<Var> {
        let Mode::Train(rng) = self else {
            return Ok(x);
        };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask = (0..g.tape.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        g.tape.dropout(x, mask)
    }
}

enum Encoder {
    /// Layer-1 CNN over context windows of word and position embeddings.
    Window { pos: PositionEmbedding, bank: ConvBank },
    /// Raw word embeddings (single-layer CNN classification baseline).
    Embedding,
    BiLstm(BiLstmEncoder),
}

enum Pooling {
    Max(ConvBank),
    Attentive { bank: ConvBank, pools: Vec<AttentionPool> },
    /// BiLSTM final states.
    Final,
    Attend(AttentionPool),
}

struct Head {
    task: Task,
    pooling: Pooling,
    out: Dense,
}

struct Layout {
    word: ParamId,
    encoder: Encoder,
    element: Option<Dense>,
    heads: Vec<Head>,
}

impl Layout {
    fn build(config: &ModelConfig, store: &mut ParamStore, word: ParamId, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = config;
        let r = c.init_range;
        let filters = c.filter_list();
        let v = c.variant;
        let encoder = match v.encoder() {
            EncoderKind::Cnn if c.extraction() || v.is_joint() => {
                let pos = PositionEmbedding::init(store, "embed.position", c.window, c.position_dim, r, rng)?;
                let bank = ConvBank::init(store, "encoder", &filters, c.word_dim + c.position_dim, r, rng)?;
                Encoder::Window { pos, bank }
            }
            EncoderKind::Cnn => Encoder::Embedding,
            EncoderKind::Lstm => Encoder::BiLstm(BiLstmEncoder::init(
                store,
                "encoder",
                c.word_dim,
                c.hidden,
                c.lstm_layers,
                r,
                c.forget_bias,
                rng,
            )?),
        };
        let seq_dim = match &encoder {
            Encoder::Window { bank, .. } => bank.out_dim,
            Encoder::Embedding => c.word_dim,
            Encoder::BiLstm(enc) => enc.out_dim(),
        };
        let element = if c.extraction() {
            Some(Dense::init(store, "element", seq_dim, ElementTag::COUNT, r, rng)?)
        } else {
            None
        };
        let mut heads = Vec::with_capacity(c.classify.len());
        for &task in &c.classify {
            let prefix = format!("task.{}", task.key());
            let (pooling, pooled_dim) = match v.encoder() {
                EncoderKind::Cnn => {
                    let bank = ConvBank::init(store, &format!("{prefix}.conv"), &filters, seq_dim, r, rng)?;
                    let dim = bank.out_dim;
                    if v.is_attentive() {
                        let pools = bank
                            .branches
                            .iter()
                            .zip(&filters)
                            .map(|(b, (_, count))| {
                                AttentionPool::init(
                                    store,
                                    &format!("{prefix}.attention.w{}", b.width),
                                    *count,
                                    c.attention_size,
                                    r,
                                    rng,
                                )
                            })
                            .collect::<Result<Vec<_>>>()?;
                        (Pooling::Attentive { bank, pools }, dim)
                    } else {
                        (Pooling::Max(bank), dim)
                    }
                }
                EncoderKind::Lstm if v.is_attentive() => (
                    Pooling::Attend(AttentionPool::init(
                        store,
                        &format!("{prefix}.attention"),
                        seq_dim,
                        c.attention_size,
                        r,
                        rng,
                    )?),
                    seq_dim,
                ),
                EncoderKind::Lstm => (Pooling::Final, seq_dim),
            };
            let out = Dense::init(store, &format!("{prefix}.out"), pooled_dim, task.class_count(), r, rng)?;
            heads.push(Head { task, pooling, out });
        }
        Ok(Layout {
            word,
            encoder,
            element,
            heads,
        })
    }
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct JointOutput {
    pub variant: Variant,
    /// Tokens actually encoded (stories are cut at `max_len`).
    pub tokens: usize,
    /// `[n×5]` element logits; present iff extraction is enabled.
    pub element_logits: Option<Var>,
    pub heads: Vec<HeadOutput>,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub task: Task,
    pub logits: Var,
    /// Attention weights over windows of `window` tokens.
    pub attention: Option<Var>,
    pub window: usize,
}

impl JointOutput {
    pub fn head(&self, task: Task) -> Option<&HeadOutput> {
        self.heads.iter().find(|h| h.task == task)
    }
}

/// Loss terms of one story. `total` already includes every weight.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub extraction: Option<Var>,
    pub classification: Vec<(Task, Var)>,
    pub attention: Vec<(Task, Var)>,
}

/// Argmax decisions of every head. Ties go to the lowest class index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub tags: Option<Vec<ElementTag>>,
    pub classes: Vec<(Task, usize)>,
}

impl Prediction {
    pub fn class(&self, task: Task) -> Option<usize> {
        self.classes.iter().find(|(t, _)| *t == task).map(|(_, c)| *c)
    }

    pub fn dims(&self) -> [Option<usize>; 5] {
        let mut out = [None; 5];
        for (t, c) in &self.classes {
            if let Some(d) = t.dimension() {
                out[d.index()] = Some(*c);
            }
        }
        out
    }

    pub fn forms(&self) -> [Option<bool>; 3] {
        let mut out = [None; 3];
        for (t, c) in &self.classes {
            if let Some(f) = t.form() {
                out[f.index()] = Some(*c == 1);
            }
        }
        out
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn predict(tape: &Tape<'_>, out: &JointOutput) -> Prediction {
    let tags = out.element_logits.map(|v| {
        let logits = tape.value(v);
        (0..logits.rows())
            .map(|i| ElementTag::from_index(argmax(logits.row(i))).expect("five element classes"))
            .collect()
    });
    let classes = out
        .heads
        .iter()
        .map(|h| (h.task, argmax(tape.value(h.logits).data())))
        .collect();
    Prediction { tags, classes }
}

/// Per-token attention for every attentive head. A window weight is shared
/// equally by the tokens it covers; mass on padding rows is dropped and the
/// rest renormalised.
pub fn token_attention(tape: &Tape<'_>, out: &JointOutput) -> Result<Vec<(Task, Vec<f64>)>> {
    if !out.variant.is_attentive() {
        return Err(Error::Unsupported(format!("{} has no attention layer", out.variant)));
    }
    let n = out.tokens;
    let mut all = Vec::new();
    for h in &out.heads {
        let Some(a) = h.attention else { continue };
        let alpha = tape.value(a).data();
        let w = h.window;
        let mut tok = vec![0.0; n];
        if w == 1 && alpha.len() == n {
            tok.copy_from_slice(alpha);
        } else {
            for (s, a) in alpha.iter().enumerate() {
                for t in s..(s + w).min(n) {
                    tok[t] += a / w as f64;
                }
            }
            let z: f64 = tok.iter().sum();
            if z > 0.0 {
                tok.iter_mut().for_each(|x| *x /= z);
            }
        }
        all.push((h.task, tok));
    }
    Ok(all)
}

/// Tab-separated table with one row per token and one weight column per
/// attentive head.
pub fn attention_dump(tape: &Tape<'_>, out: &JointOutput, story: &Story) -> Result<String> {
    let weights = token_attention(tape, out)?;
    Ok(format_attention(&weights, &story.tokens[..out.tokens]))
}

/// The [`attention_dump`] layout for weights already computed.
pub fn format_attention(weights: &[(Task, Vec<f64>)], tokens: &[String]) -> String {
    let mut s = String::from("token");
    for (t, _) in weights {
        write!(s, "\t{t}").unwrap();
    }
    s.push('\n');
    for (i, token) in tokens.iter().enumerate() {
        s.push_str(token);
        for (_, w) in weights {
            write!(s, "\t{:.4}", w[i]).unwrap();
        }
        s.push('\n');
    }
    s
}

/// Result of [`Model::infer`].
#[derive(Clone, Debug)]
pub struct Inference {
    pub prediction: Prediction,
    pub attention: Option<Vec<(Task, Vec<f64>)>>,
}

/// A configured model: vocabulary, parameters and their layout.
pub struct Model {
    config: ModelConfig,
    vocab: Vocabulary,
    params: ParamStore,
    layout: Layout,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        // The layout only holds parameter ids, so rebuilding it against a
        // throwaway store gives the same ids.
        let mut m = Model::new(self.config.clone(), self.vocab.clone(), None, 0).expect("config already valid");
        m.params = self.params.clone();
        m
    }
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("variant", &self.config.variant)
            .field("vocab", &self.vocab.len())
            .field("parameters", &self.params.numel())
            .finish()
    }
}

impl Model {
    /// Initialises every parameter from `seed`. `vectors`, if given, replace
    /// the random word embeddings and must match the vocabulary.
    pub fn new(config: ModelConfig, vocab: Vocabulary, vectors: Option<&EmbeddingTable>, seed: u64) -> Result<Self> {
        let config = config.validated()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let table = match vectors {
            Some(t) => {
                if t.rows() != vocab.len() || t.dim() != config.word_dim {
                    return Err(Error::config(
                        "word_dim",
                        format!(
                            "vectors are {}×{} but vocabulary has {} entries and word_dim is {}",
                            t.rows(),
                            t.dim(),
                            vocab.len(),
                            config.word_dim
                        ),
                    ));
                }
                t.matrix.clone()
            }
            None => {
                let mut m = uniform(&[vocab.len(), config.word_dim], config.init_range, &mut rng);
                m.data_mut()[PAD * config.word_dim..(PAD + 1) * config.word_dim].fill(0.0);
                m
            }
        };
        let word = store.insert("embed.word", table)?;
        store.freeze_row(word, PAD);
        let layout = Layout::build(&config, &mut store, word, &mut rng)?;
        Ok(Model {
            config,
            vocab,
            params: store,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Parameter ids the optimiser updates.
    pub fn trainable(&self) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|id| self.config.train_embeddings || *id != self.layout.word)
            .collect()
    }

    fn used_len(&self, story: &Story) -> usize {
        story.len().min(self.config.max_len)
    }

    pub fn forward(&self, g: &mut Graph<'_>, story: &Story, mode: &mut Mode<'_>) -> Result<JointOutput> {
        let n = self.used_len(story);
        if n == 0 {
            return Err(Error::Data(format!("story {} has no tokens", story.id)));
        }
        let ids = self.vocab.encode(&story.tokens[..n]);
        let word = self.layout.word;
        let rate = self.config.dropout();
        let seq = match &self.layout.encoder {
            Encoder::Window { pos, bank } => {
                let ctx = build_context_sequences(&ids, self.config.window)?;
                cnn_encode(g, &ctx, word, pos, bank)?
            }
            Encoder::Embedding => g.gather(word, &ids, Some(PAD))?,
            Encoder::BiLstm(enc) => {
                let x = g.gather(word, &ids, Some(PAD))?;
                bilstm_encode(g, x, enc)?.0
            }
        };
        let seq = mode.dropout(g, seq, rate)?;
        let element_logits = match &self.layout.element {
            Some(d) => Some(d.forward(g, seq)?),
            None => None,
        };

        let mut heads = Vec::with_capacity(self.layout.heads.len());
        for head in &self.layout.heads {
            let mut window = 1;
            let (pooled, attention) = match &head.pooling {
                Pooling::Max(bank) => {
                    let x = g.tape.pad_rows(seq, bank.max_width())?;
                    (bank.max_pooled(g, x)?, None)
                }
                Pooling::Attentive { bank, pools } => {
                    let x = g.tape.pad_rows(seq, bank.max_width())?;
                    let feats = bank.features(g, x)?;
                    let mut pooled = Vec::with_capacity(pools.len());
                    let mut attention = None;
                    for ((c, pool), branch) in feats.into_iter().zip(pools).zip(&bank.branches) {
                        let (v, a) = attention_pool(g, c, pool)?;
                        pooled.push(v);
                        if branch.width == self.config.supervised_width {
                            attention = Some(a);
                            window = branch.width;
                        }
                    }
                    (g.tape.concat(&pooled)?, attention)
                }
                Pooling::Final => {
                    let h = self.config.hidden;
                    let last = g.tape.row(seq, n - 1)?;
                    let first = g.tape.row(seq, 0)?;
                    let fwd = g.tape.slice(last, 0, h)?;
                    let bwd = g.tape.slice(first, h, h)?;
                    (g.tape.concat(&[fwd, bwd])?, None)
                }
                Pooling::Attend(pool) => {
                    let (v, a) = attention_pool(g, seq, pool)?;
                    (v, Some(a))
                }
            };
            let pooled = mode.dropout(g, pooled, rate)?;
            let logits = head.out.forward(g, pooled)?;
            heads.push(HeadOutput {
                task: head.task,
                logits,
                attention,
                window,
            });
        }
        Ok(JointOutput {
            variant: self.config.variant,
            tokens: n,
            element_logits,
            heads,
        })
    }

    pub fn total_loss(&self, g: &mut Graph<'_>, out: &JointOutput, story: &Story) -> Result<LossTerms> {
        let c = &self.config;
        let n = out.tokens;
        let tags = if story.element_tags.len() == story.tokens.len() {
            Some(&story.element_tags[..n])
        } else {
            None
        };
        let mut terms = Vec::new();

        let extraction = match out.element_logits {
            Some(logits) if c.extraction() => {
                let tags = tags.ok_or_else(|| Error::Data(format!("story {} has no element tags", story.id)))?;
                let labels: Vec<usize> = tags.iter().map(|t| t.index()).collect();
                let ce = g.tape.cross_entropy_rows(logits, &labels)?;
                let ce = g.tape.scale(ce, c.extraction_weight);
                terms.push(ce);
                Some(ce)
            }
            _ => None,
        };

        let mut classification = Vec::with_capacity(out.heads.len());
        for h in &out.heads {
            let gold = story
                .gold(h.task)
                .ok_or_else(|| Error::Data(format!("story {} has no gold {} label", story.id, h.task)))?;
            let ce = g.tape.cross_entropy(h.logits, gold)?;
            terms.push(ce);
            classification.push((h.task, ce));
        }

        let mut attention = Vec::new();
        if c.variant.is_supervised() {
            for h in &out.heads {
                let (Some(alpha), Some(elem)) = (h.attention, c.supervision_for(h.task)) else {
                    continue;
                };
                let tags = tags.ok_or_else(|| Error::Data(format!("story {} has no element tags", story.id)))?;
                let mut e: Vec<bool> = tags.iter().map(|t| *t == elem).collect();
                let q = g.tape.value(alpha).len();
                e.resize(q + h.window - 1, false);
                let target = supervised_target(&e, h.window)?;
                let l = attention_loss(g, alpha, &target)?;
                let l = g.tape.scale(l, c.attention_weight);
                terms.push(l);
                attention.push((h.task, l));
            }
        }

        let total = g.tape.add_all(&terms)?;
        Ok(LossTerms {
            total,
            extraction,
            classification,
            attention,
        })
    }

    /// Loss value and parameter gradients of one story. `dropout` enables
    /// training mode with masks drawn from it.
    pub fn loss_and_gradients(&self, story: &Story, dropout: Option<&mut dyn RngCore>) -> Result<(f64, Gradients)> {
        let mut g = Graph::new(&self.params);
        let mut mode = match dropout {
            Some(rng) => Mode::Train(rng),
            None => Mode::Eval,
        };
        let out = self.forward(&mut g, story, &mut mode)?;
        let loss = self.total_loss(&mut g, &out, story)?;
        let value = g.tape.scalar(loss.total).expect("scalar loss");
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss {value} on story {}", story.id)));
        }
        Ok((value, g.tape.backward(loss.total)?))
    }

    /// Eval-mode loss of one story.
    pub fn loss(&self, story: &Story) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let out = self.forward(&mut g, story, &mut Mode::Eval)?;
        let loss = self.total_loss(&mut g, &out, story)?;
        Ok(g.tape.scalar(loss.total).expect("scalar loss"))
    }

    /// Finite-difference check of the total loss on `story`, with dropout
    /// masks drawn from `mask_seed` on every evaluation.
    pub fn check_gradients(&self, story: &Story, mask_seed: u64, eps: f64) -> Result<GradCheckReport> {
        grad_check_params(&self.params, eps, |tape, store| {
            let mut g = Graph::with_tape(std::mem::take(tape), store);
            let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
            rng.set_stream(1);
            let out = self.forward(&mut g, story, &mut Mode::Train(&mut rng))?;
            let l = self.total_loss(&mut g, &out, story)?;
            *tape = g.into_tape();
            Ok(l.total)
        })
    }

    /// Distance of the training-mode forward pass on `story` from the
    /// nearest max-pooling tie, under the masks drawn from `mask_seed`.
    pub fn pool_margin(&self, story: &Story, mask_seed: u64) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
        rng.set_stream(1);
        self.forward(&mut g, story, &mut Mode::Train(&mut rng))?;
        Ok(g.tape.min_pool_margin())
    }

    /// Eval-mode predictions, plus per-token attention for attentive variants.
    pub fn infer(&self, story: &Story) -> Result<Inference> {
        let mut g = Graph::new(&self.params);
        let out = self.forward(&mut g, story, &mut Mode::Eval)?;
        let attention = if self.config.variant.is_attentive() {
            Some(token_attention(&g.tape, &out)?)
        } else {
            None
        };
        Ok(Inference {
            prediction: predict(&g.tape, &out),
            attention,
        })
    }
}

#[cfg(test)]
mod tests;
