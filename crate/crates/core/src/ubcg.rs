//! Bimodal conditional generator: one conditional VAE (encoder `E`,
//! decoder `D`) trained both to model node embeddings given their text
//! embeddings and text embeddings given their node embeddings.
//!
//! At generation time the decoder is conditioned on a class-name embedding
//! to produce synthetic node embeddings `v̂ = D(z, c)`, and then on each `v̂`
//! with the same latent draw to produce the paired text embedding
//! `t̂ = D(z, v̂)`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoders::EMBED_DIM;
use crate::error::{Result, ZptError};
use crate::optim::Adam;
use crate::params::{uniform_fan_in, Bound, ParamSet};
use crate::rng;
use crate::tensor::{Mat, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UbcgConfig {
    pub input_dim: usize,
    pub cond_dim: usize,
    pub enc_hidden: Vec<usize>,
    pub dec_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Also train the text-given-node direction. Off only for the
    /// node-only ablation.
    pub bimodal: bool,
}

impl Default for UbcgConfig {
    fn default() -> Self {
        Self {
            input_dim: EMBED_DIM,
            cond_dim: EMBED_DIM,
            enc_hidden: vec![128, 128],
            dec_hidden: vec![64],
            latent_dim: 8,
            learning_rate: 1e-3,
            epochs: 60,
            batch_size: 64,
            seed: 0,
            bimodal: true,
        }
    }
}

impl UbcgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.cond_dim == 0 {
            return Err(ZptError::config("ubcg.input_dim", "dimensions must be positive"));
        }
        if self.input_dim != self.cond_dim {
            return Err(ZptError::config(
                "ubcg.cond_dim",
                "input and condition share one embedding space and must match",
            ));
        }
        if self.enc_hidden.is_empty() || self.enc_hidden.contains(&0) {
            return Err(ZptError::config("ubcg.enc_hidden", "needs at least one non-empty layer"));
        }
        if self.dec_hidden.is_empty() || self.dec_hidden.contains(&0) {
            return Err(ZptError::config("ubcg.dec_hidden", "needs at least one non-empty layer"));
        }
        if self.latent_dim == 0 {
            return Err(ZptError::config("ubcg.latent_dim", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ZptError::config("ubcg.learning_rate", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(ZptError::config("ubcg.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(ZptError::config("ubcg.batch_size", "must be at least 1"));
        }
        Ok(())
    }

    fn enc_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim + self.cond_dim];
        widths.extend(&self.enc_hidden);
        widths.push(2 * self.latent_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    fn dec_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.latent_dim + self.cond_dim];
        widths.extend(&self.dec_hidden);
        widths.push(self.input_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Diagonal Gaussian over the latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGaussian {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UbcgModel {
    pub config: UbcgConfig,
    pub params: ParamSet,
    trained: bool,
}

impl UbcgModel {
    /// Randomly initialized, untrained model.
    pub fn new(config: UbcgConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(config.seed, "init-ubcg", 0);
        let mut params = ParamSet::new();
        for (prefix, dims) in [("enc", config.enc_dims()), ("dec", config.dec_dims())] {
            for (l, (i, o)) in dims.into_iter().enumerate() {
                params.insert(format!("{prefix}.w{l}"), uniform_fan_in(&mut r, i, o));
                params.insert(
                    format!("{prefix}.b{l}"),
                    Mat::from_shape_simple_fn((1, o), || {
                        r.gen_range(-1.0..=1.0) / (i as f64).sqrt()
                    }),
                );
            }
        }
        Ok(Self {
            config,
            params,
            trained: false,
        })
    }

    /// Model with given parameters, marked trained (checkpoint loading).
    pub fn from_params(config: UbcgConfig, params: ParamSet) -> Result<Self> {
        let fresh = Self::new(config.clone())?;
        for (name, value) in fresh.params.iter() {
            let got = params.get(name)?;
            if got.dim() != value.dim() {
                return Err(ZptError::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, config implies {:?}",
                    got.dim(),
                    value.dim()
                )));
            }
        }
        if params.len() != fresh.params.len() {
            return Err(ZptError::Checkpoint("unexpected extra UBCG parameters".into()));
        }
        Ok(Self {
            config,
            params,
            trained: true,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    /// Scalar parameters in both networks, biases included.
    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn check_dim(&self, what: &str, got: usize, want: usize) -> Result<()> {
        if got != want {
            return Err(ZptError::Contract(format!("{what} has {got} entries, expected {want}")));
        }
        Ok(())
    }
}

fn mlp(tape: &mut Tape, bound: &Bound, prefix: &str, layers: usize, mut h: Var) -> Var {
    for l in 0..layers {
        let y = tape.matmul(h, bound.var(&format!("{prefix}.w{l}")));
        h = tape.add_row(y, bound.var(&format!("{prefix}.b{l}")));
        if l + 1 < layers {
            h = tape.relu(h);
        }
    }
    h
}

/// Encoder pass on `tape`: returns `(mu, logvar)` rows.
pub fn encode_on_tape(model: &UbcgModel, tape: &mut Tape, bound: &Bound, x: Var, c: Var) -> (Var, Var) {
    let input = tape.concat_cols(x, c);
    let out = mlp(tape, bound, "enc", model.config.enc_hidden.len() + 1, input);
    let l = model.config.latent_dim;
    let mu = tape.slice_cols(out, 0, l);
    let logvar = tape.slice_cols(out, l, 2 * l);
    (mu, logvar)
}

/// Decoder pass on `tape`.
pub fn decode_on_tape(model: &UbcgModel, tape: &mut Tape, bound: &Bound, z: Var, c: Var) -> Var {
    let input = tape.concat_cols(z, c);
    mlp(tape, bound, "dec", model.config.dec_hidden.len() + 1, input)
}

/// `mu + exp(logvar / 2) ⊙ eps` on `tape`.
pub fn reparameterize_on_tape(tape: &mut Tape, mu: Var, logvar: Var, eps: Var) -> Var {
    let half = tape.scale(logvar, 0.5);
    let std = tape.exp(half);
    let noise = tape.mul(std, eps);
    tape.add(mu, noise)
}

fn row(v: &[f64]) -> Mat {
    Mat::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape")
}

/// Posterior `q(z | x, c)`.
pub fn cvae_encode(x: &[f64], c: &[f64], model: &UbcgModel) -> Result<LatentGaussian> {
    model.check_dim("input", x.len(), model.config.input_dim)?;
    model.check_dim("condition", c.len(), model.config.cond_dim)?;
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, false);
    let (xv, cv) = (tape.constant(row(x)), tape.constant(row(c)));
    let (mu, logvar) = encode_on_tape(model, &mut tape, &bound, xv, cv);
    Ok(LatentGaussian {
        mu: tape.value(mu).iter().copied().collect(),
        logvar: tape.value(logvar).iter().copied().collect(),
    })
}

/// Decoder mean `D(z, c)`.
pub fn cvae_decode(z: &[f64], c: &[f64], model: &UbcgModel) -> Result<Vec<f64>> {
    model.check_dim("latent", z.len(), model.config.latent_dim)?;
    model.check_dim("condition", c.len(), model.config.cond_dim)?;
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, false);
    let (zv, cv) = (tape.constant(row(z)), tape.constant(row(c)));
    let out = decode_on_tape(model, &mut tape, &bound, zv, cv);
    Ok(tape.value(out).iter().copied().collect())
}

pub fn reparameterize(g: &LatentGaussian, eps: &[f64]) -> Vec<f64> {
    assert_eq!(eps.len(), g.mu.len(), "noise must match the latent dimension");
    g.mu.iter()
        .zip(&g.logvar)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect()
}

/// `KL(N(mu, diag(exp(logvar))) ‖ N(0, I))` in closed form.
pub fn kl_standard_normal(g: &LatentGaussian) -> f64 {
    g.mu.iter()
        .zip(&g.logvar)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

/// Per-direction terms of the generator loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UbcgLoss {
    pub node_recon: f64,
    pub node_kl: f64,
    pub text_recon: f64,
    pub text_kl: f64,
}

impl UbcgLoss {
    pub fn node(&self) -> f64 {
        self.node_recon + self.node_kl
    }

    pub fn text(&self) -> f64 {
        self.text_recon + self.text_kl
    }

    pub fn total(&self) -> f64 {
        self.node() + self.text()
    }
}

/// Tape handles of the generator loss over a batch (means over rows).
#[derive(Clone, Copy, Debug)]
pub struct UbcgTerms {
    pub node_recon: Var,
    pub node_kl: Var,
    pub text_recon: Option<Var>,
    pub text_kl: Option<Var>,
    pub total: Var,
}

impl UbcgTerms {
    /// Number of loss components that receive gradient.
    pub fn component_count(&self) -> usize {
        2 + usize::from(self.text_recon.is_some()) + usize::from(self.text_kl.is_some())
    }
}

fn direction(
    model: &UbcgModel,
    tape: &mut Tape,
    bound: &Bound,
    x: Var,
    c: Var,
    eps: Var,
) -> (Var, Var) {
    let (mu, logvar) = encode_on_tape(model, tape, bound, x, c);
    let z = reparameterize_on_tape(tape, mu, logvar, eps);
    let recon = decode_on_tape(model, tape, bound, z, c);
    let diff = tape.sub(x, recon);
    let sq = tape.sum_squares(diff);
    let kl = tape.kl_std_normal(mu, logvar);
    (sq, kl)
}

/// Builds the batch-mean generator loss. `eps_t` is ignored when the model
/// is node-only.
pub fn loss_on_tape(
    model: &UbcgModel,
    tape: &mut Tape,
    bound: &Bound,
    v: Var,
    t: Var,
    eps_v: Var,
    eps_t: Var,
) -> UbcgTerms {
    let n = tape.value(v).nrows() as f64;
    let (nr, nk) = direction(model, tape, bound, v, t, eps_v);
    let node_recon = tape.scale(nr, 1.0 / n);
    let node_kl = tape.scale(nk, 1.0 / n);
    let mut total = tape.add(node_recon, node_kl);
    let (mut text_recon, mut text_kl) = (None, None);
    if model.config.bimodal {
        let (tr, tk) = direction(model, tape, bound, t, v, eps_t);
        let tr = tape.scale(tr, 1.0 / n);
        let tk = tape.scale(tk, 1.0 / n);
        total = tape.add(total, tr);
        total = tape.add(total, tk);
        text_recon = Some(tr);
        text_kl = Some(tk);
    }
    UbcgTerms {
        node_recon,
        node_kl,
        text_recon,
        text_kl,
        total,
    }
}

/// Generator loss of one `(v, t)` pair with explicit latent noise.
pub fn ubcg_loss(
    v: &[f64],
    t: &[f64],
    model: &UbcgModel,
    eps_v: &[f64],
    eps_t: &[f64],
) -> Result<UbcgLoss> {
    ubcg_loss_with_grads(v, t, model, eps_v, eps_t).map(|(l, _)| l)
}

/// [`ubcg_loss`] plus the gradient of its total with respect to every
/// parameter, in parameter order.
pub fn ubcg_loss_with_grads(
    v: &[f64],
    t: &[f64],
    model: &UbcgModel,
    eps_v: &[f64],
    eps_t: &[f64],
) -> Result<(UbcgLoss, Vec<Mat>)> {
    let cfg = &model.config;
    model.check_dim("v", v.len(), cfg.input_dim)?;
    model.check_dim("t", t.len(), cfg.cond_dim)?;
    model.check_dim("eps_v", eps_v.len(), cfg.latent_dim)?;
    model.check_dim("eps_t", eps_t.len(), cfg.latent_dim)?;
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, true);
    let vv = tape.constant(row(v));
    let tv = tape.constant(row(t));
    let ev = tape.constant(row(eps_v));
    let et = tape.constant(row(eps_t));
    let terms = loss_on_tape(model, &mut tape, &bound, vv, tv, ev, et);
    let total = tape.scalar(terms.total);
    if !total.is_finite() {
        return Err(ZptError::Training {
            epoch: 0,
            step: 0,
            message: format!("generator loss is {total}"),
        });
    }
    let loss = UbcgLoss {
        node_recon: tape.scalar(terms.node_recon),
        node_kl: tape.scalar(terms.node_kl),
        text_recon: terms.text_recon.map_or(0.0, |x| tape.scalar(x)),
        text_kl: terms.text_kl.map_or(0.0, |x| tape.scalar(x)),
    };
    let grads = tape.backward(terms.total);
    Ok((loss, bound.grads(&model.params, &grads)))
}

/// Trained generator and its mean loss per epoch.
#[derive(Clone, Debug)]
pub struct UbcgOutcome {
    pub model: UbcgModel,
    pub epoch_losses: Vec<f64>,
}

/// Trains on row-aligned node and text embeddings from frozen encoders.
pub fn train_ubcg(nodes: &Mat, texts: &Mat, config: &UbcgConfig) -> Result<UbcgOutcome> {
    config.validate()?;
    if nodes.dim() != texts.dim() {
        return Err(ZptError::Contract("node and text embeddings must be row-aligned".into()));
    }
    if nodes.ncols() != config.input_dim {
        return Err(ZptError::Contract(format!(
            "embeddings are {}-dim, generator expects {}",
            nodes.ncols(),
            config.input_dim
        )));
    }
    if nodes.nrows() == 0 {
        return Err(ZptError::Contract("no training pairs".into()));
    }
    let mut model = UbcgModel::new(config.clone())?;
    let mut opt = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..nodes.nrows()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let l = config.latent_dim;
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let mut r = rng::stream(config.seed, "ubcg-batches", epoch as u64);
        order.shuffle(&mut r);
        let (mut sum, mut count) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let mut noise = rng::stream(config.seed, "ubcg-noise", step as u64);
            let b = batch.len();
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape, true);
            let v = tape.constant(nodes.select(ndarray::Axis(0), batch));
            let t = tape.constant(texts.select(ndarray::Axis(0), batch));
            let ev = tape.constant(Mat::from_shape_simple_fn((b, l), || noise.sample_std()));
            let et = tape.constant(Mat::from_shape_simple_fn((b, l), || noise.sample_std()));
            let terms = loss_on_tape(&model, &mut tape, &bound, v, t, ev, et);
            let loss = tape.scalar(terms.total);
            if !loss.is_finite() {
                return Err(ZptError::Training {
                    epoch,
                    step,
                    message: format!("generator loss is {loss}"),
                });
            }
            let grads = tape.backward(terms.total);
            let g = bound.grads(&model.params, &grads);
            opt.step(&mut model.params, &g);
            sum += loss * b as f64;
            count += b;
            step += 1;
        }
        epoch_losses.push(sum / count as f64);
    }
    model.trained = true;
    Ok(UbcgOutcome {
        model,
        epoch_losses,
    })
}

trait SampleStd {
    fn sample_std(&mut self) -> f64;
}

impl<R: Rng> SampleStd for R {
    fn sample_std(&mut self) -> f64 {
        self.sample(StandardNormal)
    }
}

/// Synthetic `(v̂, t̂)` rows for one class: `count × input_dim` each.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSamples {
    pub nodes: Mat,
    pub texts: Mat,
}

impl SyntheticSamples {
    pub fn len(&self) -> usize {
        self.nodes.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.nrows() == 0
    }
}

/// Draws `count` latents `z ~ N(0, I)`; `v̂ = D(z, condition)` and
/// `t̂ = D(z, v̂)` reuse the same `z`.
pub fn generate_class_samples(
    condition: &[f64],
    count: usize,
    model: &UbcgModel,
    seed: u64,
) -> Result<SyntheticSamples> {
    if !model.trained {
        return Err(ZptError::State("generator has not been trained".into()));
    }
    if count == 0 {
        return Err(ZptError::Contract("sample count must be at least 1".into()));
    }
    model.check_dim("condition", condition.len(), model.config.cond_dim)?;
    let mut r = rng::stream(seed, "ubcg-generate", 0);
    let z = Mat::from_shape_simple_fn((count, model.config.latent_dim), || r.sample_std());
    let cond = Mat::from_shape_fn((count, condition.len()), |(_, j)| condition[j]);
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, false);
    let zv = tape.constant(z);
    let cv = tape.constant(cond);
    let v_hat = decode_on_tape(model, &mut tape, &bound, zv, cv);
    let t_hat = decode_on_tape(model, &mut tape, &bound, zv, v_hat);
    Ok(SyntheticSamples {
        nodes: tape.value(v_hat).clone(),
        texts: tape.value(t_hat).clone(),
    })
}

/// Latent draws used by [`generate_class_samples`] for `seed`.
pub fn generation_latents(model: &UbcgModel, count: usize, seed: u64) -> Mat {
    let mut r = rng::stream(seed, "ubcg-generate", 0);
    Mat::from_shape_simple_fn((count, model.config.latent_dim), || r.sample_std())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_config() -> UbcgConfig {
        UbcgConfig::default()
    }

    #[test]
    fn parameter_count_at_reference_dims() {
        let m = UbcgModel::new(paper_config()).unwrap();
        assert_eq!(m.parameter_count(), 32_896 + 16_512 + 2_064 + 8_768 + 8_320);
        assert_eq!(m.parameter_count(), 68_560);
    }

    #[test]
    fn parameter_count_grows_with_latent_dim() {
        let m = UbcgModel::new(UbcgConfig {
            latent_dim: 16,
            ..paper_config()
        })
        .unwrap();
        assert_eq!(m.parameter_count(), 68_560 + 128 * 16 + 16 + 64 * 8);
        assert_eq!(m.parameter_count(), 71_136);
    }

    #[test]
    fn degenerate_configs_are_rejected() {
        for cfg in [
            UbcgConfig { enc_hidden: vec![], ..paper_config() },
            UbcgConfig { dec_hidden: vec![], ..paper_config() },
            UbcgConfig { latent_dim: 0, ..paper_config() },
            UbcgConfig { enc_hidden: vec![128, 0], ..paper_config() },
        ] {
            assert!(matches!(UbcgModel::new(cfg), Err(ZptError::Config { .. })));
        }
    }

    #[test]
    fn encoder_and_decoder_shapes_and_determinism() {
        let m = UbcgModel::new(paper_config()).unwrap();
        let x: Vec<f64> = (0..128).map(|i| (i as f64).sin()).collect();
        let c: Vec<f64> = (0..128).map(|i| (i as f64).cos()).collect();
        let g1 = cvae_encode(&x, &c, &m).unwrap();
        let g2 = cvae_encode(&x, &c, &m).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(g1.mu.len(), 8);
        assert_eq!(g1.logvar.len(), 8);
        let out = cvae_decode(&g1.mu, &c, &m).unwrap();
        assert_eq!(out.len(), 128);
        assert_eq!(out, cvae_decode(&g1.mu, &c, &m).unwrap());
        assert!(matches!(cvae_encode(&x[..5], &c, &m), Err(ZptError::Contract(_))));
    }

    #[test]
    fn zero_weights_give_standard_posterior_and_zero_output() {
        let mut m = UbcgModel::new(paper_config()).unwrap();
        let names: Vec<String> = m.params.names().map(str::to_owned).collect();
        for n in names {
            m.params.get_mut(&n).unwrap().fill(0.0);
        }
        let x = vec![0.7; 128];
        let g = cvae_encode(&x, &x, &m).unwrap();
        assert!(g.mu.iter().chain(&g.logvar).all(|&v| v == 0.0));
        assert!(cvae_decode(&[1.0; 8], &x, &m).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reparameterize_examples() {
        let g = LatentGaussian {
            mu: vec![1.0, -2.0],
            logvar: vec![0.0, 0.0],
        };
        assert_eq!(reparameterize(&g, &[0.0, 0.0]), g.mu);
        assert_eq!(reparameterize(&g, &[1.0, 0.0]), vec![2.0, -2.0]);
    }

    #[test]
    fn kl_examples() {
        let zero = LatentGaussian { mu: vec![0.0; 3], logvar: vec![0.0; 3] };
        assert_eq!(kl_standard_normal(&zero), 0.0);
        let one = LatentGaussian { mu: vec![1.0], logvar: vec![0.0] };
        assert!((kl_standard_normal(&one) - 0.5).abs() < 1e-15);
        let wide = LatentGaussian { mu: vec![0.0], logvar: vec![1.0] };
        assert!((kl_standard_normal(&wide) - 0.5 * (1f64.exp() - 2.0)).abs() < 1e-15);
        assert!((kl_standard_normal(&wide) - 0.359_140_9).abs() < 1e-7);
    }

    #[test]
    fn swapping_roles_swaps_direction_losses() {
        let m = UbcgModel::new(paper_config()).unwrap();
        let v: Vec<f64> = (0..128).map(|i| (i as f64 * 0.3).sin()).collect();
        let t: Vec<f64> = (0..128).map(|i| (i as f64 * 0.7).cos()).collect();
        let ev = vec![0.3; 8];
        let et = vec![-0.5; 8];
        let a = ubcg_loss(&v, &t, &m, &ev, &et).unwrap();
        let b = ubcg_loss(&t, &v, &m, &et, &ev).unwrap();
        assert_eq!(a.node(), b.text());
        assert_eq!(a.text(), b.node());
        assert!(a.node_kl >= 0.0 && a.text_kl >= 0.0);
    }

    #[test]
    fn node_only_model_has_two_components() {
        let m = UbcgModel::new(UbcgConfig { bimodal: false, ..paper_config() }).unwrap();
        let mut tape = Tape::new();
        let bound = m.params.bind(&mut tape, true);
        let v = tape.constant(Mat::ones((1, 128)));
        let e = tape.constant(Mat::zeros((1, 8)));
        let terms = loss_on_tape(&m, &mut tape, &bound, v, v, e, e);
        assert_eq!(terms.component_count(), 2);
        let m = UbcgModel::new(paper_config()).unwrap();
        let mut tape = Tape::new();
        let bound = m.params.bind(&mut tape, true);
        let v = tape.constant(Mat::ones((1, 128)));
        let e = tape.constant(Mat::zeros((1, 8)));
        assert_eq!(loss_on_tape(&m, &mut tape, &bound, v, v, e, e).component_count(), 4);
    }

    #[test]
    fn untrained_model_cannot_generate() {
        let m = UbcgModel::new(paper_config()).unwrap();
        assert!(matches!(
            generate_class_samples(&[0.0; 128], 3, &m, 1),
            Err(ZptError::State(_))
        ));
    }
}
