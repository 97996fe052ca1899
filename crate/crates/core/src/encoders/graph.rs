//! GCN graph encoder with symmetric-normalized propagation.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ZptError};
use crate::params::{glorot, Bound, ParamSet};
use crate::tagcore::TextAttributedGraph;
use crate::tensor::{Csr, Mat, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphEncoderConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub leaky_slope: f64,
}

impl Default for GraphEncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden_dim: 128,
            leaky_slope: 0.01,
        }
    }
}

impl GraphEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(ZptError::config("graph_encoder.layers", "must be at least 1"));
        }
        if self.hidden_dim == 0 {
            return Err(ZptError::config("graph_encoder.hidden_dim", "must be at least 1"));
        }
        if !self.leaky_slope.is_finite() {
            return Err(ZptError::config("graph_encoder.leaky_slope", "must be finite"));
        }
        Ok(())
    }

    /// `(in, out)` widths of each layer; the last layer emits the shared
    /// embedding width.
    pub fn layer_dims(&self, input_dim: usize) -> Vec<(usize, usize)> {
        (0..self.layers)
            .map(|l| {
                let i = if l == 0 { input_dim } else { self.hidden_dim };
                let o = if l + 1 == self.layers {
                    super::EMBED_DIM
                } else {
                    self.hidden_dim
                };
                (i, o)
            })
            .collect()
    }
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` and its transpose.
#[derive(Clone, Debug)]
pub struct Propagation {
    pub matrix: Csr,
    pub transpose: Rc<Csr>,
}

impl Propagation {
    pub fn new(graph: &TextAttributedGraph) -> Self {
        let n = graph.num_nodes();
        let adj = graph.adjacency_lists();
        let deg: Vec<f64> = adj.iter().map(|a| (a.len() + 1) as f64).collect();
        let mut trips = Vec::with_capacity(n + 2 * graph.num_edges());
        for (i, nbrs) in adj.iter().enumerate() {
            trips.push((i, i, 1.0 / deg[i]));
            for &j in nbrs {
                trips.push((i, j, 1.0 / (deg[i] * deg[j]).sqrt()));
            }
        }
        let matrix = Csr::from_triplets(n, n, trips);
        let transpose = Rc::new(matrix.transpose());
        Self { matrix, transpose }
    }
}

pub(crate) fn init_params<R: Rng>(
    cfg: &GraphEncoderConfig,
    input_dim: usize,
    rng: &mut R,
    params: &mut ParamSet,
) {
    for (l, (i, o)) in cfg.layer_dims(input_dim).into_iter().enumerate() {
        params.insert(format!("graph.w{l}"), glorot(rng, i, o));
        params.insert(format!("graph.b{l}"), Mat::zeros((1, o)));
    }
}

/// `Â·H·W + b` per layer with LeakyReLU between layers.
pub fn forward(
    cfg: &GraphEncoderConfig,
    tape: &mut Tape,
    bound: &Bound,
    prop: &Propagation,
    features: Var,
) -> Var {
    let mut h = features;
    for l in 0..cfg.layers {
        let agg = tape.spmm(&prop.matrix, prop.transpose.clone(), h);
        let lin = tape.matmul(agg, bound.var(&format!("graph.w{l}")));
        h = tape.add_row(lin, bound.var(&format!("graph.b{l}")));
        if l + 1 < cfg.layers {
            h = tape.leaky_relu(h, cfg.leaky_slope);
        }
    }
    h
}
