//! VAE assembly: encoder, reparameterized sampler and decoder composed into
//! the negative ELBO, with configurable scale parameterizations for the
//! encoded and decoded distributions and manual reverse-mode gradients.
//!
//! The float mode applies to the distribution layer (scale values, the KL
//! and the reconstruction density are formed from mode-rounded inputs); the
//! MLP matmuls stay f64. Gradients are the analytic f64 chain evaluated at
//! the rounded forward values, so a scale that rounds to zero or infinity
//! poisons the optimizer exactly the way a reduced-precision framework
//! would. Non-finite losses and gradients never halt a run; they are
//! recorded, and divergence is data.

use crate::data::ImageDataset;
use crate::gaussian::LN_2PI;
use crate::nn::{Activation, AdamState, Matrix, Mlp, NnError};
use crate::precision::FloatMode;
use crate::rng::{derive_seed, CounterRng};
use crate::scaleparam::ScaleParam;
use crate::stability::{InstabilityTracker, RunSummary};

const INIT_STREAM: u64 = 0x11;
const NOISE_STREAM: u64 = 0x22;
const BATCH_STREAM: u64 = 0x33;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VaeError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// How the decoded distribution's scale is produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodedMode {
    /// One learnable scalar pre-scale shared by all pixels and inputs.
    GlobalScalar(ScaleParam),
    /// A per-pixel pre-scale emitted by the decoder.
    PerPixel(ScaleParam),
    /// Scale frozen to a constant.
    FixedConstant(f64),
}

impl std::fmt::Display for DecodedMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DecodedMode::GlobalScalar(p) => write!(f, "global:{p}"),
            DecodedMode::PerPixel(p) => write!(f, "perpixel:{p}"),
            DecodedMode::FixedConstant(c) => write!(f, "fixed:{c}"),
        }
    }
}

impl std::str::FromStr for DecodedMode {
    type Err = String;

    /// `global:<param>`, `perpixel:<param>` or `fixed:<sigma>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (head, rest) = s
            .trim()
            .split_once(':')
            .ok_or_else(|| format!("expected global:<param>, perpixel:<param> or fixed:<sigma>, got `{s}`"))?;
        match head.trim().to_ascii_lowercase().as_str() {
            "global" => Ok(DecodedMode::GlobalScalar(rest.parse().map_err(|e| format!("{e}"))?)),
            "perpixel" => Ok(DecodedMode::PerPixel(rest.parse().map_err(|e| format!("{e}"))?)),
            "fixed" => {
                let c: f64 = rest.trim().parse().map_err(|e| format!("bad fixed scale: {e}"))?;
                Ok(DecodedMode::FixedConstant(c))
            }
            other => Err(format!("unknown decoded mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeanActivation {
    Identity,
    Sigmoid,
}

impl std::fmt::Display for MeanActivation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MeanActivation::Identity => write!(f, "identity"),
            MeanActivation::Sigmoid => write!(f, "sigmoid"),
        }
    }
}

impl std::str::FromStr for MeanActivation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "identity" => Ok(MeanActivation::Identity),
            "sigmoid" => Ok(MeanActivation::Sigmoid),
            other => Err(format!("unknown mean activation `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeConfig {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub encoded_param: ScaleParam,
    pub decoded_mode: DecodedMode,
    pub decoded_mean_activation: MeanActivation,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub mode: FloatMode,
}

impl VaeConfig {
    /// The fully connected 28x28 preset: encoder 784 -> 128 -> 256 (mean and
    /// pre-scale split 128 + 128), decoder 128 -> 128 -> 1568 (per-pixel
    /// mean and pre-scale).
    pub fn basic_mnist() -> Self {
        VaeConfig {
            input_dim: 784,
            latent_dim: 128,
            encoder_hidden: vec![128],
            decoder_hidden: vec![128],
            encoded_param: ScaleParam::up_bounded(1.0).unwrap(),
            decoded_mode: DecodedMode::PerPixel(
                ScaleParam::bounded(crate::scaleparam::alpha_for_unit_pixels(), 1.0).unwrap(),
            ),
            decoded_mean_activation: MeanActivation::Sigmoid,
            lr: 1e-4,
            batch_size: 128,
            steps: 1000,
            seed: 0,
            mode: FloatMode::F32,
        }
    }

    pub fn validate(&self) -> Result<(), VaeError> {
        let fail = |msg: String| Err(VaeError::Config(msg));
        if self.latent_dim == 0 || self.input_dim == 0 {
            return fail("input_dim and latent_dim must be positive".into());
        }
        if self.latent_dim >= self.input_dim {
            return fail(format!(
                "latent_dim {} must be smaller than input_dim {}",
                self.latent_dim, self.input_dim
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be finite and nonnegative, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if let DecodedMode::FixedConstant(c) = self.decoded_mode {
            if !(c > 0.0 && c.is_finite()) {
                return fail(format!("fixed decoded scale must be positive, got {c}"));
            }
        }
        Ok(())
    }

    fn encoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend_from_slice(&self.encoder_hidden);
        w.push(2 * self.latent_dim);
        w
    }

    fn decoder_widths(&self) -> Vec<usize> {
        let out = match self.decoded_mode {
            DecodedMode::PerPixel(_) => 2 * self.input_dim,
            DecodedMode::GlobalScalar(_) | DecodedMode::FixedConstant(_) => self.input_dim,
        };
        let mut w = vec![self.latent_dim];
        w.extend_from_slice(&self.decoder_hidden);
        w.push(out);
        w
    }
}

/// Batch of encoded diagonal Gaussians: `[batch, latent]` means and
/// pre-scales under one parameterization.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    pub mu: Matrix,
    pub p: Matrix,
    pub param: ScaleParam,
}

/// Batch of decoded pixel distributions.
#[derive(Debug, Clone)]
pub struct DecodedBatch {
    pub mu: Matrix,
    pub scale: DecodedScale,
}

#[derive(Debug, Clone)]
pub enum DecodedScale {
    Param { param: ScaleParam, p: Matrix },
    Global { param: ScaleParam, p: f64, shape: (usize, usize) },
    Fixed { sigma: f64, shape: (usize, usize) },
}

impl DecodedBatch {
    pub fn sigma(&self, b: usize, i: usize, mode: FloatMode) -> f64 {
        match &self.scale {
            DecodedScale::Param { param, p } => param.sigma(p.at(b, i), mode),
            DecodedScale::Global { param, p, .. } => param.sigma(*p, mode),
            DecodedScale::Fixed { sigma, .. } => mode.round(*sigma),
        }
    }

    pub fn log_sigma(&self, b: usize, i: usize, mode: FloatMode) -> f64 {
        match &self.scale {
            DecodedScale::Param { param, p } => param.log_sigma(p.at(b, i), mode),
            DecodedScale::Global { param, p, .. } => param.log_sigma(*p, mode),
            DecodedScale::Fixed { sigma, .. } => mode.log(*sigma),
        }
    }

    pub fn min_sigma(&self, mode: FloatMode) -> f64 {
        let (rows, cols) = match &self.scale {
            DecodedScale::Param { p, .. } => (p.rows, p.cols),
            DecodedScale::Global { shape, .. } | DecodedScale::Fixed { shape, .. } => *shape,
        };
        let mut min = f64::INFINITY;
        for b in 0..rows {
            for i in 0..cols {
                let s = self.sigma(b, i, mode);
                if s < min || s.is_nan() {
                    min = s;
                }
            }
        }
        min
    }
}

/// Per-step training diagnostics; `nonfinite` is set iff the loss or any
/// gradient is NaN or infinite.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub step: usize,
    pub loss: f64,
    pub recon_term: f64,
    pub kl_term: f64,
    pub min_decoded_sigma: f64,
    pub max_encoded_sigma: f64,
    pub max_abs_grad: f64,
    pub nonfinite: bool,
}

impl StepDiagnostics {
    pub const CSV_HEADER: &'static str =
        "step,loss,recon,kl,min_decoded_sigma,max_encoded_sigma,max_abs_grad,nonfinite";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.loss,
            self.recon_term,
            self.kl_term,
            self.min_decoded_sigma,
            self.max_encoded_sigma,
            self.max_abs_grad,
            self.nonfinite as u8
        )
    }
}

struct LossBreakdown {
    loss: f64,
    recon: f64,
    kl: f64,
    min_decoded_sigma: f64,
    max_encoded_sigma: f64,
}

pub struct VaeModel {
    cfg: VaeConfig,
    encoder: Mlp,
    decoder: Mlp,
    p_gamma: f64,
    adam: AdamState,
    noise: CounterRng,
    step: usize,
}

impl VaeModel {
    pub fn new(cfg: VaeConfig) -> Result<Self, VaeError> {
        cfg.validate()?;
        let mut init_rng = CounterRng::new(derive_seed(cfg.seed, INIT_STREAM));
        let encoder = Mlp::new(
            &cfg.encoder_widths(),
            Activation::ReLU,
            Activation::Identity,
            &mut init_rng,
        );
        let decoder = Mlp::new(
            &cfg.decoder_widths(),
            Activation::ReLU,
            Activation::Identity,
            &mut init_rng,
        );
        let n_params = encoder.num_params()
            + decoder.num_params()
            + matches!(cfg.decoded_mode, DecodedMode::GlobalScalar(_)) as usize;
        let adam = AdamState::new(n_params, cfg.lr);
        let noise = CounterRng::new(derive_seed(cfg.seed, NOISE_STREAM));
        Ok(VaeModel { cfg, encoder, decoder, p_gamma: 0.0, adam, noise, step: 0 })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    /// The global decoded scale at the current pre-scale (GlobalScalar only).
    pub fn global_gamma(&self) -> Option<f64> {
        match self.cfg.decoded_mode {
            DecodedMode::GlobalScalar(param) => Some(param.sigma(self.p_gamma, FloatMode::F64)),
            _ => None,
        }
    }

    pub fn num_params(&self) -> usize {
        self.adam.m.len()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        self.encoder.flatten_params(&mut flat);
        self.decoder.flatten_params(&mut flat);
        if matches!(self.cfg.decoded_mode, DecodedMode::GlobalScalar(_)) {
            flat.push(self.p_gamma);
        }
        flat
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        let ne = self.encoder.num_params();
        let nd = self.decoder.num_params();
        self.encoder.set_params(&flat[..ne]);
        self.decoder.set_params(&flat[ne..ne + nd]);
        if matches!(self.cfg.decoded_mode, DecodedMode::GlobalScalar(_)) {
            self.p_gamma = flat[ne + nd];
        }
    }

    /// Encoder pass: the final layer emits `2 * latent_dim` values per row,
    /// split into means and pre-scales.
    pub fn encode(&self, x: &Matrix) -> Result<EncodedBatch, VaeError> {
        let (out, _) = self.encoder.forward(x)?;
        Ok(self.split_encoded(&out))
    }

    fn split_encoded(&self, enc_out: &Matrix) -> EncodedBatch {
        let l = self.cfg.latent_dim;
        let batch = enc_out.rows;
        let mut mu = Matrix::zeros(batch, l);
        let mut p = Matrix::zeros(batch, l);
        for b in 0..batch {
            for j in 0..l {
                *mu.at_mut(b, j) = enc_out.at(b, j);
                *p.at_mut(b, j) = enc_out.at(b, l + j);
            }
        }
        EncodedBatch { mu, p, param: self.cfg.encoded_param }
    }

    /// Decoder pass over latent rows.
    pub fn decode(&self, z: &Matrix) -> Result<DecodedBatch, VaeError> {
        let (out, _) = self.decoder.forward(z)?;
        Ok(self.split_decoded(&out))
    }

    fn split_decoded(&self, dec_out: &Matrix) -> DecodedBatch {
        let d = self.cfg.input_dim;
        let batch = dec_out.rows;
        let mut mu = Matrix::zeros(batch, d);
        for b in 0..batch {
            for i in 0..d {
                let a = dec_out.at(b, i);
                *mu.at_mut(b, i) = match self.cfg.decoded_mean_activation {
                    MeanActivation::Identity => a,
                    MeanActivation::Sigmoid => Activation::Sigmoid.apply(a),
                };
            }
        }
        let scale = match self.cfg.decoded_mode {
            DecodedMode::PerPixel(param) => {
                let mut p = Matrix::zeros(batch, d);
                for b in 0..batch {
                    for i in 0..d {
                        *p.at_mut(b, i) = dec_out.at(b, d + i);
                    }
                }
                DecodedScale::Param { param, p }
            }
            DecodedMode::GlobalScalar(param) => {
                DecodedScale::Global { param, p: self.p_gamma, shape: (batch, d) }
            }
            DecodedMode::FixedConstant(sigma) => DecodedScale::Fixed { sigma, shape: (batch, d) },
        };
        DecodedBatch { mu, scale }
    }

    /// Single-sample negative ELBO estimate over a batch, with the
    /// reconstruction and KL terms (all averaged over the batch).
    pub fn elbo(&self, x: &Matrix, eps: &Matrix) -> Result<(f64, f64, f64), VaeError> {
        let (breakdown, _) = self.forward_backward(x, eps, false)?;
        Ok((breakdown.loss, breakdown.recon, breakdown.kl))
    }

    /// Loss plus flat gradients over all parameters, without mutating the
    /// model. Basis of the gradient checks.
    pub fn loss_and_grads(&self, x: &Matrix, eps: &Matrix) -> Result<(f64, Vec<f64>), VaeError> {
        let (breakdown, grads) = self.forward_backward(x, eps, true)?;
        Ok((breakdown.loss, grads.expect("gradients requested")))
    }

    fn forward_backward(
        &self,
        x: &Matrix,
        eps: &Matrix,
        want_grads: bool,
    ) -> Result<(LossBreakdown, Option<Vec<f64>>), VaeError> {
        let mode = self.cfg.mode;
        let l = self.cfg.latent_dim;
        let d = self.cfg.input_dim;
        let batch = x.rows;
        if eps.rows != batch || eps.cols != l {
            return Err(VaeError::Nn(NnError::Shape {
                expected: format!("[{batch}, {l}]"),
                got: format!("[{}, {}]", eps.rows, eps.cols),
                context: "noise batch",
            }));
        }
        let inv_b = 1.0 / batch as f64;

        let (enc_out, enc_cache) = self.encoder.forward(x)?;
        let encoded = self.split_encoded(&enc_out);
        let enc_param = encoded.param;

        // Distribution-layer values, rounded onto the mode's value set.
        let mut sigma_e = Matrix::zeros(batch, l);
        let mut logsig_e = Matrix::zeros(batch, l);
        let mut z = Matrix::zeros(batch, l);
        let mut max_encoded_sigma = f64::NEG_INFINITY;
        for b in 0..batch {
            for j in 0..l {
                let p = encoded.p.at(b, j);
                let s = enc_param.sigma(p, mode);
                *sigma_e.at_mut(b, j) = s;
                *logsig_e.at_mut(b, j) = enc_param.log_sigma(p, mode);
                *z.at_mut(b, j) = encoded.mu.at(b, j) + s * eps.at(b, j);
                if s > max_encoded_sigma || s.is_nan() {
                    max_encoded_sigma = s;
                }
            }
        }

        let (dec_out, dec_cache) = self.decoder.forward(&z)?;
        let decoded = self.split_decoded(&dec_out);

        let mut recon = 0.0;
        let mut kl = 0.0;
        for b in 0..batch {
            for i in 0..d {
                let s = decoded.sigma(b, i, mode);
                let ls = decoded.log_sigma(b, i, mode);
                let r = mode.round(x.at(b, i)) - mode.round(decoded.mu.at(b, i));
                recon += ls + 0.5 * LN_2PI + r * r / (2.0 * s * s);
            }
            for j in 0..l {
                let s = sigma_e.at(b, j);
                let mu = mode.round(encoded.mu.at(b, j));
                kl += -logsig_e.at(b, j) + (s * s + mu * mu) / 2.0 - 0.5;
            }
        }
        recon *= inv_b;
        kl *= inv_b;
        let breakdown = LossBreakdown {
            loss: recon + kl,
            recon,
            kl,
            min_decoded_sigma: decoded.min_sigma(mode),
            max_encoded_sigma,
        };
        if !want_grads {
            return Ok((breakdown, None));
        }

        // Backward. Upstream gradients carry the 1/batch factor from the start.
        let per_pixel = matches!(self.cfg.decoded_mode, DecodedMode::PerPixel(_));
        let mut d_dec_out = Matrix::zeros(batch, dec_out.cols);
        let mut d_p_gamma = 0.0;
        for b in 0..batch {
            for i in 0..d {
                let s = decoded.sigma(b, i, mode);
                let r = mode.round(x.at(b, i)) - mode.round(decoded.mu.at(b, i));
                // d recon / d mu_d, through the mean activation.
                let d_mu = -r / (s * s) * inv_b;
                let act_grad = match self.cfg.decoded_mean_activation {
                    MeanActivation::Identity => 1.0,
                    MeanActivation::Sigmoid => {
                        let m = decoded.mu.at(b, i);
                        m * (1.0 - m)
                    }
                };
                *d_dec_out.at_mut(b, i) = d_mu * act_grad;
                // d recon / d p_d.
                match &decoded.scale {
                    DecodedScale::Param { param, p } => {
                        let pv = p.at(b, i);
                        let g = (param.dlog_sigma_dp(pv)
                            - r * r / (s * s * s) * param.dsigma_dp(pv))
                            * inv_b;
                        if per_pixel {
                            *d_dec_out.at_mut(b, d + i) = g;
                        }
                    }
                    DecodedScale::Global { param, p, .. } => {
                        d_p_gamma += (param.dlog_sigma_dp(*p)
                            - r * r / (s * s * s) * param.dsigma_dp(*p))
                            * inv_b;
                    }
                    DecodedScale::Fixed { .. } => {}
                }
            }
        }
        let (dec_grads, d_z) = self.decoder.backward(&dec_cache, &d_dec_out)?;

        // Through the sampler and the KL into the encoder head.
        let mut d_enc_out = Matrix::zeros(batch, 2 * l);
        for b in 0..batch {
            for j in 0..l {
                let pv = encoded.p.at(b, j);
                let s = sigma_e.at(b, j);
                let mu = mode.round(encoded.mu.at(b, j));
                let dz = d_z.at(b, j);
                *d_enc_out.at_mut(b, j) = dz + mu * inv_b;
                *d_enc_out.at_mut(b, l + j) = dz * eps.at(b, j) * enc_param.dsigma_dp(pv)
                    + (-enc_param.dlog_sigma_dp(pv) + s * enc_param.dsigma_dp(pv)) * inv_b;
            }
        }
        let (enc_grads, _) = self.encoder.backward(&enc_cache, &d_enc_out)?;

        let mut flat = Vec::with_capacity(self.num_params());
        Mlp::flatten_grads(&enc_grads, &mut flat);
        Mlp::flatten_grads(&dec_grads, &mut flat);
        if matches!(self.cfg.decoded_mode, DecodedMode::GlobalScalar(_)) {
            flat.push(d_p_gamma);
        }
        Ok((breakdown, Some(flat)))
    }

    /// One optimization step on a batch: single-sample ELBO, full manual
    /// backprop, one Adam update. No gradient clipping and no update
    /// skipping; a non-finite loss or gradient is recorded and training
    /// continues.
    pub fn train_step(&mut self, x: &Matrix) -> Result<StepDiagnostics, VaeError> {
        let mut eps = Matrix::zeros(x.rows, self.cfg.latent_dim);
        self.noise.fill_normal(&mut eps.data);
        let (breakdown, grads) = self.forward_backward(x, &eps, true)?;
        let grads = grads.expect("gradients requested");
        let mut max_abs_grad: f64 = 0.0;
        let mut grads_finite = true;
        for &g in &grads {
            if !g.is_finite() {
                grads_finite = false;
            }
            let a = g.abs();
            if a > max_abs_grad || a.is_nan() {
                max_abs_grad = a;
            }
        }
        let mut params = self.params_flat();
        self.adam.step(&mut params, &grads);
        self.set_params_flat(&params);
        self.step += 1;
        Ok(StepDiagnostics {
            step: self.step,
            loss: breakdown.loss,
            recon_term: breakdown.recon,
            kl_term: breakdown.kl,
            min_decoded_sigma: breakdown.min_decoded_sigma,
            max_encoded_sigma: breakdown.max_encoded_sigma,
            max_abs_grad,
            nonfinite: !breakdown.loss.is_finite() || !grads_finite,
        })
    }

    /// Negative-ELBO bound in nats per image on dequantized data, averaged
    /// over `n_samples` fresh noise draws. Dequantization noise is added
    /// here only; training never sees it.
    pub fn nll_eval(&self, x: &Matrix, noise_seed: u64, n_samples: usize) -> Result<f64, VaeError> {
        assert!(n_samples >= 1);
        let mut total = 0.0;
        for k in 0..n_samples {
            let mut rng = CounterRng::new(derive_seed(noise_seed, k as u64));
            let mut noisy = x.clone();
            for v in noisy.data.iter_mut() {
                *v += rng.uniform() / 256.0;
            }
            let mut eps = Matrix::zeros(x.rows, self.cfg.latent_dim);
            rng.fill_normal(&mut eps.data);
            let (neg_elbo, _, _) = self.elbo(&noisy, &eps)?;
            total += neg_elbo;
        }
        Ok(total / n_samples as f64)
    }
}

/// A full training run with streaming instability tracking.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub diagnostics: Vec<StepDiagnostics>,
    pub summary: RunSummary,
}

/// Train a fresh model from `cfg` on `data` for `cfg.steps` steps.
///
/// Batches of exactly `n` rows are the whole set; smaller batches are
/// sampled without replacement per step from a seeded stream; larger
/// batches cycle the set so each image appears `batch_size / n` times with
/// its own fresh reparameterization noise (overfit batches larger than the
/// dataset, as in training on a handful of images with big batches).
pub fn run_training(
    cfg: &VaeConfig,
    data: &ImageDataset,
    convergence_threshold: f64,
) -> Result<TrainOutcome, VaeError> {
    let mut model = VaeModel::new(cfg.clone())?;
    let mut batch_rng = CounterRng::new(derive_seed(cfg.seed, BATCH_STREAM));
    let n = data.len();
    let d = data.pixel_dim();
    let mut tracker = InstabilityTracker::new();
    let mut diagnostics = Vec::with_capacity(cfg.steps);
    let fixed_batch: Option<Matrix> = if cfg.batch_size >= n {
        let rows = cfg.batch_size;
        let mut m = Matrix::zeros(rows, d);
        for row in 0..rows {
            m.data[row * d..(row + 1) * d].copy_from_slice(data.image(row % n));
        }
        Some(m)
    } else {
        None
    };
    for _ in 0..cfg.steps {
        let batch = match &fixed_batch {
            Some(m) => m.clone(),
            None => {
                let picks = batch_rng.sample_without_replacement(n, cfg.batch_size);
                let mut m = Matrix::zeros(cfg.batch_size, d);
                for (row, &i) in picks.iter().enumerate() {
                    m.data[row * d..(row + 1) * d].copy_from_slice(data.image(i));
                }
                m
            }
        };
        let diag = model.train_step(&batch)?;
        tracker.update(diag.loss);
        diagnostics.push(diag);
    }
    Ok(TrainOutcome { diagnostics, summary: tracker.summarize(convergence_threshold) })
}
