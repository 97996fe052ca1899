//! Bidirectional pre-LN Transformer text encoder pooled at the EOS position.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{BOS, EOS, PAD};
use crate::error::{Result, ZptError};
use crate::params::{normal, uniform_fan_in, Bound, ParamSet};
use crate::tensor::{Mat, SeqLayout, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextEncoderConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub max_seq_len: usize,
    pub output_dim: usize,
    /// Hidden width of each feed-forward block.
    pub ffn_dim: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            width: 64,
            heads: 4,
            max_seq_len: 32,
            output_dim: super::EMBED_DIM,
            ffn_dim: 128,
        }
    }
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(ZptError::config("text_encoder.layers", "must be at least 1"));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(ZptError::config(
                "text_encoder.heads",
                format!("width {} is not divisible by {} heads", self.width, self.heads),
            ));
        }
        if self.max_seq_len < 3 {
            return Err(ZptError::config("text_encoder.max_seq_len", "must be at least 3"));
        }
        if self.output_dim != super::EMBED_DIM {
            return Err(ZptError::config(
                "text_encoder.output_dim",
                format!("must equal the shared embedding dim {}", super::EMBED_DIM),
            ));
        }
        if self.ffn_dim == 0 {
            return Err(ZptError::config("text_encoder.ffn_dim", "must be at least 1"));
        }
        Ok(())
    }
}

/// One position of an input sequence: a vocabulary token or a learnable
/// context vector (row of the context matrix).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Token(usize),
    Context(usize),
}

impl From<usize> for Slot {
    fn from(id: usize) -> Self {
        Slot::Token(id)
    }
}

fn p(name: &str) -> String {
    format!("text.{name}")
}

fn lp(layer: usize, name: &str) -> String {
    format!("text.l{layer}.{name}")
}

pub(crate) fn init_params<R: Rng>(
    cfg: &TextEncoderConfig,
    vocab_size: usize,
    rng: &mut R,
    params: &mut ParamSet,
) {
    let w = cfg.width;
    params.insert(p("tok_emb"), normal(rng, vocab_size, w, 0.3));
    params.insert(p("pos_emb"), normal(rng, cfg.max_seq_len, w, 0.02));
    for l in 0..cfg.layers {
        params.insert(lp(l, "ln1.g"), Mat::ones((1, w)));
        params.insert(lp(l, "ln1.b"), Mat::zeros((1, w)));
        for m in ["q", "k", "v", "o"] {
            params.insert(lp(l, &format!("w{m}")), uniform_fan_in(rng, w, w));
            params.insert(lp(l, &format!("b{m}")), Mat::zeros((1, w)));
        }
        params.insert(lp(l, "ln2.g"), Mat::ones((1, w)));
        params.insert(lp(l, "ln2.b"), Mat::zeros((1, w)));
        params.insert(lp(l, "w1"), uniform_fan_in(rng, w, cfg.ffn_dim));
        params.insert(lp(l, "b1"), Mat::zeros((1, cfg.ffn_dim)));
        params.insert(lp(l, "w2"), uniform_fan_in(rng, cfg.ffn_dim, w));
        params.insert(lp(l, "b2"), Mat::zeros((1, w)));
    }
    params.insert(p("lnf.g"), Mat::ones((1, w)));
    params.insert(p("lnf.b"), Mat::zeros((1, w)));
    params.insert(p("proj"), uniform_fan_in(rng, w, cfg.output_dim));
}

fn linear(tape: &mut Tape, b: &Bound, x: Var, w: &str, bias: &str) -> Var {
    let y = tape.matmul(x, b.var(w));
    tape.add_row(y, b.var(bias))
}

/// Runs the encoder over equal-length slot sequences and returns the
/// `batch × output_dim` pooled projections.
///
/// Context slots index rows of `context` (`M × width`), which is required
/// when any context slot is present. Trailing all-padding columns are
/// dropped before the forward pass; padding keys are masked, so this does
/// not change the result.
pub fn forward(
    cfg: &TextEncoderConfig,
    tape: &mut Tape,
    bound: &Bound,
    vocab_size: usize,
    context: Option<Var>,
    seqs: &[Vec<Slot>],
) -> Result<Var> {
    if seqs.is_empty() {
        return Err(ZptError::Contract("empty text batch".into()));
    }
    let full_len = seqs[0].len();
    if seqs.iter().any(|s| s.len() != full_len) {
        return Err(ZptError::Contract("sequences in a batch must share a length".into()));
    }
    if full_len > cfg.max_seq_len {
        return Err(ZptError::Contract(format!(
            "sequence length {full_len} exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    let len = seqs
        .iter()
        .map(|s| s.iter().rposition(|&x| x != Slot::Token(PAD)).map_or(0, |i| i + 1))
        .max()
        .unwrap_or(0)
        .max(1);
    let n_ctx = context.map_or(0, |c| tape.value(c).nrows());

    let mut rows = Vec::with_capacity(seqs.len() * len);
    let mut positions = Vec::with_capacity(seqs.len() * len);
    let mut key_valid = Vec::with_capacity(seqs.len() * len);
    let mut eos_rows = Vec::with_capacity(seqs.len());
    for (b, seq) in seqs.iter().enumerate() {
        let mut eos = None;
        for (j, &slot) in seq[..len].iter().enumerate() {
            let row = match slot {
                Slot::Token(id) => {
                    if id >= vocab_size {
                        return Err(ZptError::Contract(format!("token id {id} outside vocabulary")));
                    }
                    if id == EOS && eos.is_none() {
                        eos = Some(b * len + j);
                    }
                    id
                }
                Slot::Context(i) => {
                    if i >= n_ctx {
                        return Err(ZptError::Contract(format!(
                            "context slot {i} but only {n_ctx} context vectors"
                        )));
                    }
                    vocab_size + i
                }
            };
            rows.push(row);
            positions.push(j);
            key_valid.push(slot != Slot::Token(PAD));
        }
        match eos {
            Some(r) => eos_rows.push(r),
            None => {
                return Err(ZptError::Contract(format!("sequence {b} has no EOS token")));
            }
        }
        if seq[0] != Slot::Token(BOS) {
            return Err(ZptError::Contract(format!("sequence {b} does not start with BOS")));
        }
    }

    let table = match context {
        Some(c) => tape.concat_rows(&[bound.var(&p("tok_emb")), c]),
        None => bound.var(&p("tok_emb")),
    };
    let tok = tape.gather_rows(table, Rc::new(rows));
    let pos = tape.gather_rows(bound.var(&p("pos_emb")), Rc::new(positions));
    let mut h = tape.add(tok, pos);
    let layout = Rc::new(SeqLayout {
        batch: seqs.len(),
        seq_len: len,
        key_valid,
    });

    for l in 0..cfg.layers {
        let a = tape.layer_norm(h, bound.var(&lp(l, "ln1.g")), bound.var(&lp(l, "ln1.b")));
        let q = linear(tape, bound, a, &lp(l, "wq"), &lp(l, "bq"));
        let k = linear(tape, bound, a, &lp(l, "wk"), &lp(l, "bk"));
        let v = linear(tape, bound, a, &lp(l, "wv"), &lp(l, "bv"));
        let att = tape.attention(q, k, v, cfg.heads, layout.clone());
        let o = linear(tape, bound, att, &lp(l, "wo"), &lp(l, "bo"));
        h = tape.add(h, o);
        let m = tape.layer_norm(h, bound.var(&lp(l, "ln2.g")), bound.var(&lp(l, "ln2.b")));
        let f = linear(tape, bound, m, &lp(l, "w1"), &lp(l, "b1"));
        let f = tape.gelu(f);
        let f = linear(tape, bound, f, &lp(l, "w2"), &lp(l, "b2"));
        h = tape.add(h, f);
    }
    let h = tape.layer_norm(h, bound.var(&p("lnf.g")), bound.var(&p("lnf.b")));
    let pooled = tape.gather_rows(h, Rc::new(eos_rows));
    Ok(tape.matmul(pooled, bound.var(&p("proj"))))
}
