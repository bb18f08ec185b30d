//! The dual-head conditional transformer denoiser.
//!
//! Input sequence: `[condition tokens] ++ [START] ++ [caption tokens]`. Every
//! token gets a (word or condition) embedding, a sinusoidal position encoding
//! and a segment embedding; the caption segment (including `[START]`) also
//! receives the time-step embedding. After a pre-norm encoder stack, two
//! linear heads read the `[START]` row and every caption row: the edit head
//! (4 ops) and the language head (K words).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::ScriptPredictor;
use crate::edit::{CaptionState, EditOp, EditScript, Slot};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::vocab::{TokenId, Vocabulary, START};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_t: usize,
    pub vocab_size: usize,
    pub cond_vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults for the given vocabulary sizes.
    pub fn small(vocab_size: usize, cond_vocab_size: usize) -> Self {
        Self {
            embed_dim: 64,
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 128,
            max_t: 10,
            vocab_size,
            cond_vocab_size,
            max_seq_len: 64,
            dropout: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if [self.embed_dim, self.num_layers, self.num_heads, self.ffn_dim, self.max_t, self.max_seq_len]
            .contains(&0)
        {
            return bad("model dimensions must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!("embed_dim {} not divisible by num_heads {}", self.embed_dim, self.num_heads));
        }
        if self.vocab_size < 3 || self.cond_vocab_size < 1 {
            return bad("vocabulary sizes too small".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

#[derive(Debug, Clone)]
struct Head {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: ParamId,
}

#[derive(Debug, Clone)]
struct Block {
    ln1: (ParamId, ParamId),
    heads: Vec<Head>,
    attn_bias: ParamId,
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
pub struct DenoiserModel {
    config: ModelConfig,
    store: ParamStore,
    word_emb: ParamId,
    cond_emb: ParamId,
    segment_emb: ParamId,
    time_proj: ParamId,
    blocks: Vec<Block>,
    final_ln: (ParamId, ParamId),
    edit_head: (ParamId, ParamId),
    lang_head: (ParamId, ParamId),
}

/// Sinusoidal encoding of an integer position (or time step) into `dim` values.
pub fn sinusoid(pos: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * freq;
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Output of one forward pass, still on the tape.
#[derive(Debug, Clone, Copy)]
pub struct Logits {
    /// `(l + 1) x 4`, row 0 restricted to KEEP/INSERT.
    pub ops: Var,
    /// `(l + 1) x K`.
    pub words: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub edit: Var,
    pub language: Var,
}

impl DenoiserModel {
    /// Freshly initialized parameters, deterministic in `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.embed_dim;
        let dh = config.head_dim();
        let f = config.ffn_dim;
        let glorot = |rows: usize, cols: usize| (6.0 / (rows + cols) as f64).sqrt();

        let ln = |store: &mut ParamStore, name: &str| {
            (
                store.add(format!("{name}.gain"), Tensor::new(1, d, vec![1.0; d]).unwrap()),
                store.add(format!("{name}.bias"), Tensor::zeros(1, d)),
            )
        };

        let word_emb = store.add("embed.word", Tensor::uniform(config.vocab_size, d, 0.5, &mut rng));
        let cond_emb = store.add("embed.cond", Tensor::uniform(config.cond_vocab_size, d, 0.5, &mut rng));
        let segment_emb = store.add("embed.segment", Tensor::uniform(2, d, 0.5, &mut rng));
        let time_proj = store.add("embed.time", Tensor::uniform(d, d, glorot(d, d), &mut rng));

        let mut blocks = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let ln1 = ln(&mut store, &format!("layer{l}.ln1"));
            let heads = (0..config.num_heads)
                .map(|h| {
                    let p = format!("layer{l}.head{h}");
                    Head {
                        q: store.add(format!("{p}.q"), Tensor::uniform(d, dh, glorot(d, dh), &mut rng)),
                        k: store.add(format!("{p}.k"), Tensor::uniform(d, dh, glorot(d, dh), &mut rng)),
                        v: store.add(format!("{p}.v"), Tensor::uniform(d, dh, glorot(d, dh), &mut rng)),
                        o: store.add(format!("{p}.o"), Tensor::uniform(dh, d, glorot(d, d), &mut rng)),
                    }
                })
                .collect();
            let attn_bias = store.add(format!("layer{l}.attn.bias"), Tensor::zeros(1, d));
            let ln2 = ln(&mut store, &format!("layer{l}.ln2"));
            let ff1 = (
                store.add(format!("layer{l}.ff1.weight"), Tensor::uniform(d, f, glorot(d, f), &mut rng)),
                store.add(format!("layer{l}.ff1.bias"), Tensor::zeros(1, f)),
            );
            let ff2 = (
                store.add(format!("layer{l}.ff2.weight"), Tensor::uniform(f, d, glorot(f, d), &mut rng)),
                store.add(format!("layer{l}.ff2.bias"), Tensor::zeros(1, d)),
            );
            blocks.push(Block { ln1, heads, attn_bias, ln2, ff1, ff2 });
        }
        let final_ln = ln(&mut store, "final_ln");
        let edit_head = (
            store.add("head.edit.weight", Tensor::uniform(d, EditOp::COUNT, glorot(d, EditOp::COUNT), &mut rng)),
            store.add("head.edit.bias", Tensor::zeros(1, EditOp::COUNT)),
        );
        let lang_head = (
            store.add("head.lang.weight", Tensor::uniform(d, config.vocab_size, glorot(d, config.vocab_size), &mut rng)),
            store.add("head.lang.bias", Tensor::zeros(1, config.vocab_size)),
        );
        Ok(Self {
            config,
            store,
            word_emb,
            cond_emb,
            segment_emb,
            time_proj,
            blocks,
            final_ln,
            edit_head,
            lang_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Checks that a condition and caption fit this model.
    pub fn check_inputs(&self, condition: &[TokenId], caption: &CaptionState, t: usize) -> Result<()> {
        if t < 1 || t > self.config.max_t {
            return Err(Error::StepOutOfRange { got: t, max: self.config.max_t });
        }
        let total = condition.len() + 1 + caption.len();
        if total > self.config.max_seq_len {
            return Err(Error::Overlong { got: total, max: self.config.max_seq_len });
        }
        if let Some(&c) = condition.iter().find(|&&c| c as usize >= self.config.cond_vocab_size) {
            return Err(Error::Mismatch(format!(
                "condition id {c} outside condition vocabulary of {}",
                self.config.cond_vocab_size
            )));
        }
        if let Some(tok) = caption.tokens.iter().find(|tk| tk.id as usize >= self.config.vocab_size) {
            return Err(Error::Mismatch(format!(
                "token id {} outside vocabulary of {}",
                tok.id, self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`. `dropout_rng` enables dropout.
    pub fn forward(
        &self,
        tape: &mut Tape,
        condition: &[TokenId],
        caption: &CaptionState,
        t: usize,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Logits> {
        self.forward_with(&self.store, tape, condition, caption, t, dropout_rng)
    }

    /// Same as [`forward`](Self::forward) but reads parameter values from
    /// `store`, which must share this model's layout.
    pub fn forward_with(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        condition: &[TokenId],
        caption: &CaptionState,
        t: usize,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Logits> {
        self.check_inputs(condition, caption, t)?;
        if store.len() != self.store.len() {
            return Err(Error::Mismatch("parameter store layout differs from the model".into()));
        }
        let d = self.config.embed_dim;
        let n_cond = condition.len();
        let n_cap = caption.len() + 1;
        let s = store;

        let segments = tape.param(s, self.segment_emb);
        let seg_cond = tape.slice_rows(segments, 0, 1)?;
        let seg_cap = tape.slice_rows(segments, 1, 2)?;

        let mut parts = Vec::with_capacity(2);
        if n_cond > 0 {
            let table = tape.param(s, self.cond_emb);
            let ids: Vec<usize> = condition.iter().map(|&c| c as usize).collect();
            let e = tape.gather(table, &ids)?;
            let pos = tape.constant(positions(0, n_cond, d));
            let e = tape.add(e, pos)?;
            parts.push(tape.add_row(e, seg_cond)?);
        }
        let table = tape.param(s, self.word_emb);
        let ids: Vec<usize> =
            std::iter::once(START as usize).chain(caption.tokens.iter().map(|tk| tk.id as usize)).collect();
        let e = tape.gather(table, &ids)?;
        let pos = tape.constant(positions(0, n_cap, d));
        let e = tape.add(e, pos)?;
        let e = tape.add_row(e, seg_cap)?;
        let time = tape.constant(Tensor::new(1, d, sinusoid(t, d))?);
        let wt = tape.param(s, self.time_proj);
        let time = tape.matmul(time, wt)?;
        parts.push(tape.add_row(e, time)?);

        let mut h = tape.concat_rows(&parts)?;
        let p = self.config.dropout;
        let scale = 1.0 / (self.config.head_dim() as f64).sqrt();
        for block in &self.blocks {
            let (g, b) = (tape.param(s, block.ln1.0), tape.param(s, block.ln1.1));
            let x = tape.layer_norm(h, g, b)?;
            let mut attn: Option<Var> = None;
            for head in &block.heads {
                let wq = tape.param(s, head.q);
                let wk = tape.param(s, head.k);
                let wv = tape.param(s, head.v);
                let wo = tape.param(s, head.o);
                let q = tape.matmul(x, wq)?;
                let k = tape.matmul(x, wk)?;
                let v = tape.matmul(x, wv)?;
                let kt = tape.transpose(k);
                let scores = tape.matmul(q, kt)?;
                let scores = tape.scale(scores, scale);
                let weights = tape.softmax(scores);
                let mixed = tape.matmul(weights, v)?;
                let out = tape.matmul(mixed, wo)?;
                attn = Some(match attn {
                    Some(acc) => tape.add(acc, out)?,
                    None => out,
                });
            }
            let bias = tape.param(s, block.attn_bias);
            let mut a = tape.add_row(attn.expect("at least one head"), bias)?;
            if let Some(rng) = dropout_rng.as_deref_mut() {
                a = tape.dropout(a, p, rng);
            }
            h = tape.add(h, a)?;

            let (g, b) = (tape.param(s, block.ln2.0), tape.param(s, block.ln2.1));
            let x = tape.layer_norm(h, g, b)?;
            let (w1, b1) = (tape.param(s, block.ff1.0), tape.param(s, block.ff1.1));
            let (w2, b2) = (tape.param(s, block.ff2.0), tape.param(s, block.ff2.1));
            let f = tape.matmul(x, w1)?;
            let f = tape.add_row(f, b1)?;
            let f = tape.relu(f);
            let f = tape.matmul(f, w2)?;
            let mut f = tape.add_row(f, b2)?;
            if let Some(rng) = dropout_rng.as_deref_mut() {
                f = tape.dropout(f, p, rng);
            }
            h = tape.add(h, f)?;
        }
        let (g, b) = (tape.param(s, self.final_ln.0), tape.param(s, self.final_ln.1));
        let h = tape.layer_norm(h, g, b)?;
        let h = tape.slice_rows(h, n_cond, n_cond + n_cap)?;

        let (we, be) = (tape.param(s, self.edit_head.0), tape.param(s, self.edit_head.1));
        let ops = tape.matmul(h, we)?;
        let ops = tape.add_row(ops, be)?;
        let mut mask = Tensor::zeros(n_cap, EditOp::COUNT);
        mask.data_mut()[EditOp::Replace.index()] = f64::NEG_INFINITY;
        mask.data_mut()[EditOp::Delete.index()] = f64::NEG_INFINITY;
        let mask = tape.constant(mask);
        let ops = tape.add(ops, mask)?;

        let (wl, bl) = (tape.param(s, self.lang_head.0), tape.param(s, self.lang_head.1));
        let words = tape.matmul(h, wl)?;
        let words = tape.add_row(words, bl)?;
        Ok(Logits { ops, words })
    }

    /// Forward pass returning plain logits tensors.
    pub fn logits(&self, condition: &[TokenId], caption: &CaptionState, t: usize) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, condition, caption, t, None)?;
        Ok((tape.value(out.ops).clone(), tape.value(out.words).clone()))
    }

    /// Greedy decoding of both heads.
    pub fn predict(&self, condition: &[TokenId], caption: &CaptionState, t: usize) -> Result<EditScript> {
        let (ops, words) = self.logits(condition, caption, t)?;
        Ok(script_from_logits(&ops, &words))
    }
}

fn positions(start: usize, n: usize, d: usize) -> Tensor {
    let data = (start..start + n).flat_map(|p| sinusoid(p, d)).collect();
    Tensor::new(n, d, data).expect("consistent shape")
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(values: &[f64], skip: usize) -> usize {
    let mut best = skip;
    for (i, &v) in values.iter().enumerate().skip(skip) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Builds a script from logits: argmax op per row, and the argmax non-special
/// word attached only to INSERT and REPLACE rows.
pub fn script_from_logits(ops: &Tensor, words: &Tensor) -> EditScript {
    let first_word = 2; // skip [START] and [PAD]
    let slots = (0..ops.rows())
        .map(|r| {
            let mut op = EditOp::from_index(argmax(ops.row(r), 0)).expect("four op columns");
            if r == 0 && !matches!(op, EditOp::Keep | EditOp::Insert) {
                op = EditOp::Keep;
            }
            let content = op.takes_content().then(|| argmax(words.row(r), first_word) as TokenId);
            Slot { op, content }
        })
        .collect();
    EditScript::new(slots)
}

/// `L = L_edit + L_language`. The edit term averages over every row; the
/// language term averages over rows whose target op is INSERT or REPLACE and
/// is zero when there are none.
pub fn loss_terms(tape: &mut Tape, logits: Logits, gt: &EditScript) -> Result<LossTerms> {
    let rows = tape.value(logits.ops).rows();
    if gt.len() != rows {
        return Err(Error::ScriptLength { got: gt.len(), len: rows.saturating_sub(1) });
    }
    let op_targets: Vec<usize> = gt.ops().map(EditOp::index).collect();
    let edit = tape.cross_entropy(logits.ops, &op_targets, &vec![true; rows])?;
    let word_targets: Vec<usize> = gt.slots.iter().map(|s| s.content.map_or(0, |w| w as usize)).collect();
    let word_mask: Vec<bool> = gt.slots.iter().map(|s| s.op.takes_content()).collect();
    let language = tape.cross_entropy(logits.words, &word_targets, &word_mask)?;
    let total = tape.add(edit, language)?;
    Ok(LossTerms { total, edit, language })
}

impl ScriptPredictor for DenoiserModel {
    fn predict_script(&self, condition: &[TokenId], caption: &CaptionState, t: usize) -> Result<EditScript> {
        self.predict(condition, caption, t)
    }
}

/// Checks that `vocab` matches the vocabulary size the model was built for.
pub fn check_vocab(model: &DenoiserModel, vocab: &Vocabulary) -> Result<()> {
    if model.config().vocab_size != vocab.len() {
        return Err(Error::Mismatch(format!(
            "model expects {} words, vocabulary has {}",
            model.config().vocab_size,
            vocab.len()
        )));
    }
    Ok(())
}
