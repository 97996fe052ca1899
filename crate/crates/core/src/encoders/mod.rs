//! Text and graph encoders sharing one aligned embedding space.

pub mod graph;
pub mod similarity;
pub mod text;
pub mod vocab;

pub use graph::{GraphEncoderConfig, Propagation};
pub use similarity::{cosine, cosine_similarity_matrix, l2_normalize};
pub use text::{Slot, TextEncoderConfig};
pub use vocab::{tokenize, Vocabulary};

use ndarray::{concatenate, Axis};

use crate::error::{Result, ZptError};
use crate::params::ParamSet;
use crate::par;
use crate::rng;
use crate::tagcore::TextAttributedGraph;
use crate::tensor::{Mat, Tape};

/// Width of the aligned node/text embedding space.
pub const EMBED_DIM: usize = 128;

/// Sequences per forward pass when encoding large text batches.
const TEXT_CHUNK: usize = 64;

/// Jointly trained graph encoder, text encoder and log-temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainedModel {
    pub vocab: Vocabulary,
    pub text_config: TextEncoderConfig,
    pub graph_config: GraphEncoderConfig,
    pub feature_dim: usize,
    pub params: ParamSet,
}

impl PretrainedModel {
    /// Randomly initialized model with `τ = tau_init`.
    pub fn init(
        vocab: Vocabulary,
        text_config: TextEncoderConfig,
        graph_config: GraphEncoderConfig,
        feature_dim: usize,
        tau_init: f64,
        seed: u64,
    ) -> Result<Self> {
        text_config.validate()?;
        graph_config.validate()?;
        if !tau_init.is_finite() {
            return Err(ZptError::config("pretrain.tau_init", "must be finite"));
        }
        let mut params = ParamSet::new();
        let mut r = rng::stream(seed, "init-text", 0);
        text::init_params(&text_config, vocab.len(), &mut r, &mut params);
        let mut r = rng::stream(seed, "init-graph", 0);
        graph::init_params(&graph_config, feature_dim, &mut r, &mut params);
        params.insert("tau", Mat::from_elem((1, 1), tau_init));
        Ok(Self {
            vocab,
            text_config,
            graph_config,
            feature_dim,
            params,
        })
    }

    /// Current log-temperature τ.
    pub fn tau(&self) -> f64 {
        self.params.get("tau").map(|m| m[[0, 0]]).unwrap_or(f64::NAN)
    }

    /// Token ids padded to the encoder's maximum length.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        tokenize(text, &self.vocab, self.text_config.max_seq_len)
    }

    /// Encodes slot sequences (tokens and optional context rows).
    pub fn encode_slots(&self, context: Option<&Mat>, seqs: &[Vec<Slot>]) -> Result<Mat> {
        if seqs.is_empty() {
            return Ok(Mat::zeros((0, EMBED_DIM)));
        }
        let chunks: Vec<&[Vec<Slot>]> = seqs.chunks(TEXT_CHUNK).collect();
        let parts = par::map_slice(&chunks, |chunk| {
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape, false);
            let ctx = context.map(|c| tape.constant(c.clone()));
            let out = text::forward(
                &self.text_config,
                &mut tape,
                &bound,
                self.vocab.len(),
                ctx,
                chunk,
            )?;
            Ok(tape.value(out).clone())
        });
        let parts: Vec<Mat> = parts.into_iter().collect::<Result<_>>()?;
        let views: Vec<_> = parts.iter().map(|m| m.view()).collect();
        Ok(concatenate(Axis(0), &views).expect("equal widths"))
    }

    /// Encodes already tokenized sequences of equal length.
    pub fn encode_tokens(&self, seqs: &[Vec<usize>]) -> Result<Mat> {
        let slots: Vec<Vec<Slot>> = seqs
            .iter()
            .map(|s| s.iter().copied().map(Slot::Token).collect())
            .collect();
        self.encode_slots(None, &slots)
    }

    /// Tokenizes and encodes raw strings.
    pub fn encode_text<S: AsRef<str>>(&self, texts: &[S]) -> Result<Mat> {
        let seqs: Vec<Vec<usize>> = texts.iter().map(|t| self.tokenize(t.as_ref())).collect();
        self.encode_tokens(&seqs)
    }

    /// Node embeddings for every node of `graph`, in row order.
    pub fn encode_nodes(&self, graph: &TextAttributedGraph) -> Result<Mat> {
        if graph.feature_dim() != self.feature_dim {
            return Err(ZptError::Contract(format!(
                "graph has {}-dim features, encoder expects {}",
                graph.feature_dim(),
                self.feature_dim
            )));
        }
        let prop = Propagation::new(graph);
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(graph.features().clone());
        let out = graph::forward(&self.graph_config, &mut tape, &bound, &prop, x);
        Ok(tape.value(out).clone())
    }
}
