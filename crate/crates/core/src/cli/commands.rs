//! Experiment commands behind the `stable-gauss` CLI: the precision-sweep
//! table, KL finiteness scans, single training runs, multi-run stability
//! sweeps and the gradient-check gateway. Commands are deterministic given
//! (config, seed); sweep runs execute share-nothing in parallel and results
//! are emitted in a fixed order.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::cli::config::{ConfigError, ConfigMap};
use crate::data::{self, ImageDataset, SynthKind};
use crate::gaussian::{self, DiagGaussian};
use crate::nn::{Activation, Matrix, Mlp};
use crate::precision::{min_finite_log_quotient, FloatMode, QuotientVariant};
use crate::rng::{derive_seed, CounterRng};
use crate::scaleparam::ScaleParam;
use crate::stability::RunSummary;
use crate::vae::{run_training, DecodedMode, MeanActivation, VaeConfig, VaeError};

#[derive(Debug, thiserror::Error)]
pub enum CommandError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
}

// ---------------------------------------------------------------------------
// table1

/// Reference cells: (mode, variant, min log-scale, min scale).
pub const TABLE1_REFERENCE: [(FloatMode, QuotientVariant, i64, f64); 4] = [
    (FloatMode::F32, QuotientVariant::Direct, -103, 1.85e-45),
    (FloatMode::F32, QuotientVariant::SquaredQuotient, -51, 7.10e-23),
    (FloatMode::F16, QuotientVariant::Direct, -17, 4.14e-8),
    (FloatMode::F16, QuotientVariant::SquaredQuotient, -8, 3.35e-4),
];

#[derive(Debug, Clone)]
pub struct Table1Cell {
    pub mode: FloatMode,
    pub variant: QuotientVariant,
    pub min_p_hat: Option<i64>,
    pub min_sigma: Option<f64>,
    pub reference: Option<(i64, f64)>,
    pub matches: bool,
}

#[derive(Debug, Clone)]
pub struct Table1Report {
    pub cells: Vec<Table1Cell>,
    pub all_match: bool,
}

fn three_sig_figs(x: f64) -> String {
    format!("{x:.2e}")
}

/// Minimal finite pre-scales for the emulated log-quotient, per float mode
/// and quotient arrangement. With no mode filter the four reference cells
/// are computed and checked against the known values.
pub fn cmd_table1(mode_filter: Option<FloatMode>) -> Table1Report {
    let selected: Vec<(FloatMode, QuotientVariant)> = match mode_filter {
        Some(m) => vec![(m, QuotientVariant::Direct), (m, QuotientVariant::SquaredQuotient)],
        None => TABLE1_REFERENCE.iter().map(|&(m, v, _, _)| (m, v)).collect(),
    };
    let cells: Vec<Table1Cell> = selected
        .into_iter()
        .map(|(mode, variant)| {
            let result = min_finite_log_quotient(mode, variant);
            let reference = TABLE1_REFERENCE
                .iter()
                .find(|&&(m, v, _, _)| m == mode && v == variant)
                .map(|&(_, _, p, s)| (p, s));
            let matches = match (result, reference) {
                (Some((p, s)), Some((rp, rs))) => {
                    p == rp && three_sig_figs(s) == three_sig_figs(rs)
                }
                (None, None) => true,
                // No reference row for this mode (e.g. f64): nothing to contradict.
                (_, None) => true,
                (None, Some(_)) => false,
            };
            Table1Cell {
                mode,
                variant,
                min_p_hat: result.map(|(p, _)| p),
                min_sigma: result.map(|(_, s)| s),
                reference,
                matches,
            }
        })
        .collect();
    let all_match = cells.iter().all(|c| c.matches);
    Table1Report { cells, all_match }
}

impl Table1Report {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<8} {:<18} {:>12} {:>14} {:>8}",
            "mode", "quotient", "min sigma_hat", "min sigma", "ok"
        );
        for c in &self.cells {
            let p = c.min_p_hat.map_or("none".to_string(), |p| p.to_string());
            let s = c.min_sigma.map_or("-".to_string(), three_sig_figs);
            let _ = writeln!(
                out,
                "{:<8} {:<18} {:>12} {:>14} {:>8}",
                c.mode.to_string(),
                c.variant.to_string(),
                p,
                s,
                if c.matches { "ok" } else { "DIFF" }
            );
            if !c.matches {
                if let Some((rp, rs)) = c.reference {
                    let _ = writeln!(out, "    expected min sigma_hat {} / min sigma {}", rp, three_sig_figs(rs));
                }
            }
        }
        if self.cells.iter().all(|c| c.min_p_hat.is_none()) {
            let _ = writeln!(out, "no finite minimum within sweep range");
        }
        out
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("mode,quotient,min_p_hat,min_sigma,matches\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                c.mode,
                c.variant,
                c.min_p_hat.map_or(String::new(), |p| p.to_string()),
                c.min_sigma.map_or(String::new(), |s| s.to_string()),
                c.matches as u8
            );
        }
        out
    }
}

// ---------------------------------------------------------------------------
// klprobe

#[derive(Debug, Clone, Copy)]
pub struct GridSpec {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl GridSpec {
    pub fn values(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut k = 0u64;
        loop {
            let v = self.min + self.step * k as f64;
            if v > self.max + 1e-12 {
                break;
            }
            out.push(v);
            k += 1;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct KlProbeSpec {
    pub left: ScaleParam,
    pub right: ScaleParam,
    pub p1: GridSpec,
    pub p2: GridSpec,
    pub mu1: f64,
    pub mu2: f64,
    pub mode: FloatMode,
    /// When set, probe the naive log-quotient variant instead of the stable path.
    pub naive: Option<QuotientVariant>,
    pub grad_threshold: f64,
}

impl KlProbeSpec {
    pub fn from_config(cfg: &ConfigMap) -> Result<Self, CommandError> {
        let left: ScaleParam = cfg
            .raw("left_param")
            .unwrap_or("exp")
            .parse()
            .map_err(|e| CommandError::Invalid(format!("left_param: {e}")))?;
        let right: ScaleParam = cfg
            .raw("right_param")
            .unwrap_or("exp")
            .parse()
            .map_err(|e| CommandError::Invalid(format!("right_param: {e}")))?;
        let naive = match cfg.raw("naive").unwrap_or("none") {
            "none" => None,
            "direct" => Some(QuotientVariant::Direct),
            "squared" => Some(QuotientVariant::SquaredQuotient),
            other => return Err(CommandError::Invalid(format!("naive: unknown variant `{other}`"))),
        };
        let step = cfg.get_or("step", 0.5)?;
        Ok(KlProbeSpec {
            left,
            right,
            p1: GridSpec {
                min: cfg.get_or("p1_min", -5.0)?,
                max: cfg.get_or("p1_max", 5.0)?,
                step,
            },
            p2: GridSpec {
                min: cfg.get_or("p2_min", -5.0)?,
                max: cfg.get_or("p2_max", 5.0)?,
                step,
            },
            mu1: cfg.get_or("mu1", 0.0)?,
            mu2: cfg.get_or("mu2", 0.0)?,
            mode: cfg.raw("mode").unwrap_or("f32").parse().map_err(CommandError::Invalid)?,
            naive,
            grad_threshold: cfg.get_or("grad_threshold", 1e6)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct KlProbeRow {
    pub p1: f64,
    pub p2: f64,
    pub kl: f64,
    pub finite: bool,
    pub max_abs_grad: f64,
}

pub const KLPROBE_CSV_HEADER: &str = "p1,p2,kl,finite,max_abs_grad";

/// Dense scan of the KL over the (p1, p2) grid.
pub fn cmd_klprobe(spec: &KlProbeSpec) -> Result<Vec<KlProbeRow>, CommandError> {
    let p1s = spec.p1.values();
    let p2s = spec.p2.values();
    let mut rows = Vec::with_capacity(p1s.len() * p2s.len());
    for &p1 in &p1s {
        for &p2 in &p2s {
            let q1 = DiagGaussian::new(vec![spec.mu1], vec![p1], spec.left)
                .map_err(|e| CommandError::Invalid(e.to_string()))?;
            let q2 = DiagGaussian::new(vec![spec.mu2], vec![p2], spec.right)
                .map_err(|e| CommandError::Invalid(e.to_string()))?;
            let kl = match spec.naive {
                None => gaussian::kl(&q1, &q2, spec.mode)
                    .map_err(|e| CommandError::Invalid(e.to_string()))?
                    .total,
                Some(variant) => gaussian::kl_naive_quotient(&q1, &q2, spec.mode, variant)
                    .map_err(|e| CommandError::Invalid(e.to_string()))?,
            };
            let grad = gaussian::kl_grad(&q1, &q2).map_err(|e| CommandError::Invalid(e.to_string()))?;
            let max_abs_grad = grad
                .d_mu1
                .iter()
                .chain(&grad.d_p1)
                .chain(&grad.d_mu2)
                .chain(&grad.d_p2)
                .fold(0.0f64, |acc, &g| acc.max(g.abs()));
            rows.push(KlProbeRow { p1, p2, kl, finite: kl.is_finite(), max_abs_grad });
        }
    }
    Ok(rows)
}

pub fn klprobe_csv(rows: &[KlProbeRow]) -> String {
    let mut out = String::from(KLPROBE_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.p1, r.p2, r.kl, r.finite as u8, r.max_abs_grad);
    }
    out
}

// ---------------------------------------------------------------------------
// train / sweep

#[derive(Debug, Clone)]
pub enum DataSpec {
    Synth { kind: SynthKind, n: usize, height: usize, width: usize, seed: u64 },
    Idx { path: String, subset: Option<usize>, subset_seed: u64 },
}

impl DataSpec {
    pub fn load(&self) -> Result<ImageDataset, CommandError> {
        match self {
            DataSpec::Synth { kind, n, height, width, seed } => {
                Ok(data::synth_set(*kind, *n, *height, *width, *seed))
            }
            DataSpec::Idx { path, subset, subset_seed } => {
                let bytes = std::fs::read(path)?;
                let ds = data::parse_idx(&bytes)?;
                match subset {
                    Some(k) => Ok(data::overfit_subset(&ds, *k, *subset_seed)?),
                    None => Ok(ds),
                }
            }
        }
    }
}

/// `auto` picks the threshold from the sweep itself: half the median of the
/// minimal smoothed losses over finite runs when that median is negative,
/// twice it otherwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdSpec {
    Absolute(f64),
    Auto,
}

impl ThresholdSpec {
    fn from_config(cfg: &ConfigMap) -> Result<Self, CommandError> {
        match cfg.raw("convergence_threshold") {
            None | Some("auto") => Ok(ThresholdSpec::Auto),
            Some(raw) => raw
                .parse::<f64>()
                .map(ThresholdSpec::Absolute)
                .map_err(|e| CommandError::Invalid(format!("convergence_threshold: {e}"))),
        }
    }

    pub fn resolve(&self, finite_run_min_losses: &[f64]) -> f64 {
        match *self {
            ThresholdSpec::Absolute(t) => t,
            ThresholdSpec::Auto => {
                let mut mins: Vec<f64> = finite_run_min_losses.to_vec();
                if mins.is_empty() {
                    return f64::NEG_INFINITY;
                }
                mins.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let median = mins[mins.len() / 2];
                if median < 0.0 {
                    0.5 * median
                } else {
                    2.0 * median
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainSpec {
    pub vae: VaeConfig,
    pub data: DataSpec,
    pub threshold: ThresholdSpec,
}

fn parse_data_spec(cfg: &ConfigMap) -> Result<DataSpec, CommandError> {
    match cfg.raw("dataset").unwrap_or("synth") {
        "synth" => {
            let kind: SynthKind = cfg
                .raw("synth_kind")
                .unwrap_or("random-patches")
                .parse()
                .map_err(CommandError::Invalid)?;
            Ok(DataSpec::Synth {
                kind,
                n: cfg.get_or("synth_n", 16usize)?,
                height: cfg.get_or("height", 8usize)?,
                width: cfg.get_or("width", 8usize)?,
                seed: cfg.get_or("data_seed", 0u64)?,
            })
        }
        "idx" => {
            let path = cfg
                .raw("idx_path")
                .ok_or_else(|| CommandError::Invalid("idx_path required for dataset = idx".into()))?;
            let subset = cfg.get::<usize>("subset")?.filter(|&k| k > 0);
            Ok(DataSpec::Idx {
                path: path.to_string(),
                subset,
                subset_seed: cfg.get_or("data_seed", 0u64)?,
            })
        }
        other => Err(CommandError::Invalid(format!("unknown dataset kind `{other}`"))),
    }
}

impl TrainSpec {
    pub fn from_config(cfg: &ConfigMap) -> Result<Self, CommandError> {
        let data = parse_data_spec(cfg)?;
        let (height, width) = match &data {
            DataSpec::Synth { height, width, .. } => (*height, *width),
            // IDX dims are known only after load; input_dim is validated then.
            DataSpec::Idx { .. } => (28, 28),
        };
        let input_dim = cfg.get_or("input_dim", height * width)?;
        let encoded_param: ScaleParam = cfg
            .raw("encoded_param")
            .unwrap_or("upbounded:1")
            .parse()
            .map_err(|e| CommandError::Invalid(format!("encoded_param: {e}")))?;
        let decoded_mode: DecodedMode = cfg
            .raw("decoded_mode")
            .unwrap_or("global:naive-exp")
            .parse()
            .map_err(|e| CommandError::Invalid(format!("decoded_mode: {e}")))?;
        let mean_activation: MeanActivation = cfg
            .raw("mean_activation")
            .unwrap_or("sigmoid")
            .parse()
            .map_err(CommandError::Invalid)?;
        let vae = VaeConfig {
            input_dim,
            latent_dim: cfg.get_or("latent_dim", 8usize)?,
            encoder_hidden: cfg.get_list("encoder_hidden", vec![32usize])?,
            decoder_hidden: cfg.get_list("decoder_hidden", vec![32usize])?,
            encoded_param,
            decoded_mode,
            decoded_mean_activation: mean_activation,
            lr: cfg.get_or("lr", 1e-3)?,
            batch_size: cfg.get_or("batch_size", 16usize)?,
            steps: cfg.get_or("steps", 500usize)?,
            seed: cfg.get_or("seed", 0u64)?,
            mode: cfg.raw("mode").unwrap_or("f64").parse().map_err(CommandError::Invalid)?,
        };
        Ok(TrainSpec { vae, data, threshold: ThresholdSpec::from_config(cfg)? })
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub csv: String,
    pub summary: RunSummary,
    pub threshold: f64,
}

/// Execute one training run, producing the per-step diagnostics stream and
/// the run-level summary. An `auto` threshold is resolved against this
/// single run's minimal smoothed loss.
pub fn cmd_train(spec: &TrainSpec) -> Result<TrainReport, CommandError> {
    let dataset = spec.data.load()?;
    if dataset.pixel_dim() != spec.vae.input_dim {
        return Err(CommandError::Invalid(format!(
            "dataset pixel dim {} does not match input_dim {}",
            dataset.pixel_dim(),
            spec.vae.input_dim
        )));
    }
    let outcome = run_training(&spec.vae, &dataset, f64::INFINITY)?;
    let threshold = match spec.threshold {
        ThresholdSpec::Absolute(t) => t,
        ThresholdSpec::Auto => spec
            .threshold
            .resolve(&[outcome.summary.min_smoothed_loss].into_iter().filter(|v| v.is_finite()).collect::<Vec<_>>()),
    };
    let mut tracker = crate::stability::InstabilityTracker::new();
    for d in &outcome.diagnostics {
        tracker.update(d.loss);
    }
    let summary = tracker.summarize(threshold);
    let mut csv = String::from(crate::vae::StepDiagnostics::CSV_HEADER);
    csv.push('\n');
    for d in &outcome.diagnostics {
        csv.push_str(&d.csv_row());
        csv.push('\n');
    }
    Ok(TrainReport { csv, summary, threshold })
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub train: TrainSpec,
    pub lrs: Vec<f64>,
    pub encoder_params: Vec<ScaleParam>,
    pub decoder_modes: Vec<DecodedMode>,
    pub n_seeds: u64,
    pub seed_base: u64,
}

impl SweepSpec {
    pub fn from_config(cfg: &ConfigMap) -> Result<Self, CommandError> {
        let train = TrainSpec::from_config(cfg)?;
        let lrs = cfg.get_list("lrs", vec![train.vae.lr])?;
        let encoder_params_raw =
            cfg.get_list::<String>("encoder_params", vec![train.vae.encoded_param.to_string()])?;
        let encoder_params = encoder_params_raw
            .iter()
            .map(|s| s.parse::<ScaleParam>().map_err(|e| CommandError::Invalid(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        let decoder_modes_raw =
            cfg.get_list::<String>("decoder_modes", vec![train.vae.decoded_mode.to_string()])?;
        let decoder_modes = decoder_modes_raw
            .iter()
            .map(|s| s.parse::<DecodedMode>().map_err(CommandError::Invalid))
            .collect::<Result<Vec<_>, _>>()?;
        if lrs.is_empty() || encoder_params.is_empty() || decoder_modes.is_empty() {
            return Err(CommandError::Invalid("sweep axes must be non-empty".into()));
        }
        Ok(SweepSpec {
            train,
            lrs,
            encoder_params,
            decoder_modes,
            n_seeds: cfg.get_or("seeds", 10u64)?,
            seed_base: cfg.get_or("seed_base", 0u64)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub run_id: usize,
    pub seed: u64,
    pub lr: f64,
    pub encoder_param: ScaleParam,
    pub decoder_mode: DecodedMode,
    pub min_smoothed_loss: f64,
    pub instability_fraction: f64,
    pub mean_excess_z: f64,
    pub nonfinite_steps: usize,
    pub diverged: bool,
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub lr: f64,
    pub encoder_param: ScaleParam,
    pub decoder_mode: DecodedMode,
    pub diverged: usize,
    pub n: usize,
    pub min_loss_mean: Option<f64>,
    pub min_loss_std: Option<f64>,
    pub instability_mean: f64,
    pub instability_std: f64,
    pub excess_z_mean: f64,
    pub excess_z_std: f64,
}

impl SweepCell {
    /// The appendix presentation for divergence counts.
    pub fn diverged_cell(&self) -> String {
        format!("{} / {}", self.diverged, self.n)
    }
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub runs: Vec<RunRecord>,
    pub cells: Vec<SweepCell>,
    pub threshold: f64,
}

pub const SWEEP_CSV_HEADER: &str = "run_id,seed,lr,encoder_param,decoder_param,diverged,min_smoothed_loss,instability_fraction,mean_excess_z";

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Run every (lr, encoder, decoder, seed) combination in parallel and
/// aggregate per cell. With an `auto` threshold the convergence cut is
/// resolved from the pooled finite runs before divergence is decided.
pub fn cmd_sweep(spec: &SweepSpec) -> Result<SweepReport, CommandError> {
    let dataset = spec.train.data.load()?;
    if dataset.pixel_dim() != spec.train.vae.input_dim {
        return Err(CommandError::Invalid(format!(
            "dataset pixel dim {} does not match input_dim {}",
            dataset.pixel_dim(),
            spec.train.vae.input_dim
        )));
    }
    let mut jobs = Vec::new();
    for &lr in &spec.lrs {
        for &encoder_param in &spec.encoder_params {
            for &decoder_mode in &spec.decoder_modes {
                for s in 0..spec.n_seeds {
                    let run_id = jobs.len();
                    jobs.push((run_id, lr, encoder_param, decoder_mode, s));
                }
            }
        }
    }
    let raw: Result<Vec<(usize, u64, f64, ScaleParam, DecodedMode, RunSummary)>, VaeError> = jobs
        .par_iter()
        .map(|&(run_id, lr, encoder_param, decoder_mode, _s)| {
            let seed = derive_seed(spec.seed_base, run_id as u64);
            let cfg = VaeConfig {
                lr,
                encoded_param: encoder_param,
                decoded_mode: decoder_mode,
                seed,
                ..spec.train.vae.clone()
            };
            let outcome = run_training(&cfg, &dataset, f64::INFINITY)?;
            Ok((run_id, seed, lr, encoder_param, decoder_mode, outcome.summary))
        })
        .collect();
    let mut raw = raw?;
    raw.sort_by_key(|r| r.0);

    let finite_mins: Vec<f64> = raw
        .iter()
        .filter(|r| r.5.nonfinite_steps == 0 && r.5.min_smoothed_loss.is_finite())
        .map(|r| r.5.min_smoothed_loss)
        .collect();
    let threshold = match spec.train.threshold {
        ThresholdSpec::Absolute(t) => t,
        ThresholdSpec::Auto => ThresholdSpec::Auto.resolve(&finite_mins),
    };

    let runs: Vec<RunRecord> = raw
        .into_iter()
        .map(|(run_id, seed, lr, encoder_param, decoder_mode, s)| RunRecord {
            run_id,
            seed,
            lr,
            encoder_param,
            decoder_mode,
            min_smoothed_loss: s.min_smoothed_loss,
            instability_fraction: s.instability_fraction,
            mean_excess_z: s.mean_excess_z,
            nonfinite_steps: s.nonfinite_steps,
            diverged: s.nonfinite_steps > 0 || !(s.min_smoothed_loss < threshold),
        })
        .collect();

    let mut cells = Vec::new();
    for &lr in &spec.lrs {
        for &encoder_param in &spec.encoder_params {
            for &decoder_mode in &spec.decoder_modes {
                let cell_runs: Vec<&RunRecord> = runs
                    .iter()
                    .filter(|r| {
                        r.lr == lr
                            && r.encoder_param == encoder_param
                            && r.decoder_mode == decoder_mode
                    })
                    .collect();
                let diverged = cell_runs.iter().filter(|r| r.diverged).count();
                let converged_mins: Vec<f64> = cell_runs
                    .iter()
                    .filter(|r| !r.diverged)
                    .map(|r| r.min_smoothed_loss)
                    .collect();
                let (lm, ls) = mean_std(&converged_mins);
                let instab: Vec<f64> = cell_runs.iter().map(|r| r.instability_fraction).collect();
                let excess: Vec<f64> = cell_runs.iter().map(|r| r.mean_excess_z).collect();
                let (im, is) = mean_std(&instab);
                let (em, es) = mean_std(&excess);
                let have_converged = !converged_mins.is_empty();
                cells.push(SweepCell {
                    lr,
                    encoder_param,
                    decoder_mode,
                    diverged,
                    n: cell_runs.len(),
                    min_loss_mean: have_converged.then_some(lm),
                    min_loss_std: have_converged.then_some(ls),
                    instability_mean: im,
                    instability_std: is,
                    excess_z_mean: em,
                    excess_z_std: es,
                });
            }
        }
    }
    Ok(SweepReport { runs, cells, threshold })
}

impl SweepReport {
    pub fn runs_csv(&self) -> String {
        let mut out = String::from(SWEEP_CSV_HEADER);
        out.push('\n');
        for r in &self.runs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.run_id,
                r.seed,
                r.lr,
                r.encoder_param,
                r.decoder_mode,
                r.diverged as u8,
                r.min_smoothed_loss,
                r.instability_fraction,
                r.mean_excess_z
            );
        }
        out
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "convergence threshold: {}", self.threshold);
        let _ = writeln!(
            out,
            "{:<8} {:<16} {:<24} {:>8} {:>22} {:>18} {:>18}",
            "lr", "encoder", "decoder", "diverged", "min smoothed loss", "instability", "excess z"
        );
        for c in &self.cells {
            let loss = match (c.min_loss_mean, c.min_loss_std) {
                (Some(m), Some(s)) => format!("{m:.1} +- {s:.1}"),
                _ => "-".to_string(),
            };
            let _ = writeln!(
                out,
                "{:<8} {:<16} {:<24} {:>8} {:>22} {:>18} {:>18}",
                c.lr,
                c.encoder_param.to_string(),
                c.decoder_mode.to_string(),
                c.diverged_cell(),
                loss,
                format!("{:.3} +- {:.3}", c.instability_mean, c.instability_std),
                format!("{:.3} +- {:.3}", c.excess_z_mean, c.excess_z_std)
            );
        }
        out
    }
}

// ---------------------------------------------------------------------------
// gradcheck

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checks: Vec<CheckResult>,
    pub all_pass: bool,
}

impl GradCheckReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(out, "[{}] {} {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail);
        }
        let _ = writeln!(out, "{}", if self.all_pass { "all gradient checks passed" } else { "GRADIENT CHECK FAILURES" });
        out
    }
}

/// Compare an analytic derivative against central finite differences at the
/// given points. Exposed so a deliberately wrong derivative can be shown to
/// fail by name.
pub fn fd_scalar_check(
    name: &str,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64) -> f64,
    points: &[f64],
    rel_tol: f64,
) -> CheckResult {
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut worst_at = f64::NAN;
    for &p in points {
        let numeric = if p == 0.0 {
            (f(p) - f(p - h)) / h
        } else {
            (f(p + h) - f(p - h)) / (2.0 * h)
        };
        let analytic = df(p);
        let scale = analytic.abs().max(numeric.abs()).max(1e-9);
        let rel = (analytic - numeric).abs() / scale;
        if rel > worst {
            worst = rel;
            worst_at = p;
        }
    }
    CheckResult {
        name: name.to_string(),
        passed: worst < rel_tol,
        detail: format!("worst rel err {worst:.2e} at p={worst_at}"),
    }
}

fn vec_check(name: &str, analytic: &[f64], numeric: &[f64], rel_tol: f64) -> CheckResult {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        let scale = a.abs().max(n.abs()).max(1e-7);
        worst = worst.max((a - n).abs() / scale);
    }
    CheckResult {
        name: name.to_string(),
        passed: worst < rel_tol,
        detail: format!("worst rel err {worst:.2e} over {} components", analytic.len()),
    }
}

/// Run every finite-difference suite: parameterization derivatives, KL and
/// log-density gradients, MLP backward, and the full ELBO on a tiny model.
pub fn cmd_gradcheck() -> GradCheckReport {
    let mut checks = Vec::new();
    let points = [-10.0, -1.0, -1e-3, 0.0, 1e-3, 1.0, 10.0];
    let f64m = FloatMode::F64;
    let families: Vec<(String, ScaleParam)> = [
        ScaleParam::Exp,
        ScaleParam::ExpLin,
        ScaleParam::up_bounded(1.0).unwrap(),
        ScaleParam::down_bounded(1e-2).unwrap(),
        ScaleParam::bounded(1e-2, 2.0).unwrap(),
    ]
    .into_iter()
    .map(|p| (p.to_string(), p))
    .collect();
    for (name, param) in &families {
        let p = *param;
        checks.push(fd_scalar_check(
            &format!("scaleparam {name} dsigma_dp"),
            move |x| p.sigma(x, f64m),
            move |x| p.dsigma_dp(x),
            &points,
            1e-4,
        ));
        checks.push(fd_scalar_check(
            &format!("scaleparam {name} dlog_sigma_dp"),
            move |x| p.log_sigma(x, f64m),
            move |x| p.dlog_sigma_dp(x),
            &points,
            1e-4,
        ));
    }

    // KL gradient on random pairs across families.
    let mut rng = CounterRng::new(71);
    for (name, param) in &families {
        let mu1 = vec![rng.uniform_range(-2.0, 2.0), rng.uniform_range(-2.0, 2.0)];
        let p1 = vec![rng.uniform_range(-1.5, 1.5), rng.uniform_range(-1.5, 1.5)];
        let mu2 = vec![rng.uniform_range(-2.0, 2.0), rng.uniform_range(-2.0, 2.0)];
        let p2 = vec![rng.uniform_range(-1.5, 1.5), rng.uniform_range(-1.5, 1.5)];
        let q1 = DiagGaussian::new(mu1.clone(), p1.clone(), *param).unwrap();
        let q2 = DiagGaussian::new(mu2.clone(), p2.clone(), *param).unwrap();
        let grad = gaussian::kl_grad(&q1, &q2).unwrap();
        let analytic: Vec<f64> = grad
            .d_mu1
            .iter()
            .chain(&grad.d_p1)
            .chain(&grad.d_mu2)
            .chain(&grad.d_p2)
            .copied()
            .collect();
        let h = 1e-6;
        let eval = |mu1: &[f64], p1: &[f64], mu2: &[f64], p2: &[f64]| {
            let q1 = DiagGaussian::new(mu1.to_vec(), p1.to_vec(), *param).unwrap();
            let q2 = DiagGaussian::new(mu2.to_vec(), p2.to_vec(), *param).unwrap();
            gaussian::kl(&q1, &q2, f64m).unwrap().total
        };
        let mut numeric = Vec::new();
        for block in 0..4 {
            for i in 0..2 {
                let bump = |delta: f64| {
                    let (mut a, mut b, mut c, mut d) =
                        (mu1.clone(), p1.clone(), mu2.clone(), p2.clone());
                    match block {
                        0 => a[i] += delta,
                        1 => b[i] += delta,
                        2 => c[i] += delta,
                        _ => d[i] += delta,
                    }
                    eval(&a, &b, &c, &d)
                };
                numeric.push((bump(h) - bump(-h)) / (2.0 * h));
            }
        }
        checks.push(vec_check(&format!("gaussian kl_grad [{name}]"), &analytic, &numeric, 1e-4));
    }

    // log_prob gradient.
    {
        let param = ScaleParam::bounded(1e-2, 2.0).unwrap();
        let x = vec![0.3, -0.8, 1.4];
        let mu = vec![0.1, 0.2, -0.5];
        let p = vec![0.4, -0.6, 0.0];
        let g = DiagGaussian::new(mu.clone(), p.clone(), param).unwrap();
        let (d_mu, d_p) = gaussian::log_prob_grad(&x, &g).unwrap();
        let analytic: Vec<f64> = d_mu.iter().chain(&d_p).copied().collect();
        let h = 1e-6;
        let mut numeric = Vec::new();
        for block in 0..2 {
            for i in 0..3 {
                let bump = |delta: f64| {
                    let (mut m, mut q) = (mu.clone(), p.clone());
                    if block == 0 {
                        m[i] += delta;
                    } else {
                        q[i] += delta;
                    }
                    let g = DiagGaussian::new(m, q, param).unwrap();
                    gaussian::log_prob(&x, &g, f64m).unwrap()
                };
                numeric.push((bump(h) - bump(-h)) / (2.0 * h));
            }
        }
        checks.push(vec_check("gaussian log_prob grad", &analytic, &numeric, 1e-4));
    }

    // MLP backward on a quadratic loss.
    {
        let mut rng = CounterRng::new(12);
        let mut net = Mlp::new(&[5, 7, 3], Activation::ReLU, Activation::Sigmoid, &mut rng);
        let x = Matrix::from_rows(vec![
            (0..5).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
            (0..5).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
        ]);
        let loss_grads = |net: &Mlp| {
            let (y, cache) = net.forward(&x).unwrap();
            let loss = 0.5 * y.data.iter().map(|v| v * v).sum::<f64>();
            let (grads, _) = net.backward(&cache, &y).unwrap();
            let mut flat = Vec::new();
            Mlp::flatten_grads(&grads, &mut flat);
            (loss, flat)
        };
        let (_, analytic) = loss_grads(&net);
        let mut flat = Vec::new();
        net.flatten_params(&mut flat);
        let h = 1e-5;
        let mut numeric = vec![0.0; flat.len()];
        for i in 0..flat.len() {
            let orig = flat[i];
            flat[i] = orig + h;
            net.set_params(&flat);
            let (lp, _) = loss_grads(&net);
            flat[i] = orig - h;
            net.set_params(&flat);
            let (lm, _) = loss_grads(&net);
            flat[i] = orig;
            net.set_params(&flat);
            numeric[i] = (lp - lm) / (2.0 * h);
        }
        checks.push(vec_check("nn backward", &analytic, &numeric, 1e-4));
    }

    // Full ELBO gradient on a d=8, L=2 model.
    {
        let cfg = VaeConfig {
            input_dim: 8,
            latent_dim: 2,
            encoder_hidden: vec![6],
            decoder_hidden: vec![6],
            encoded_param: ScaleParam::up_bounded(1.0).unwrap(),
            decoded_mode: DecodedMode::PerPixel(ScaleParam::bounded(1e-2, 2.0).unwrap()),
            decoded_mean_activation: MeanActivation::Sigmoid,
            lr: 1e-3,
            batch_size: 2,
            steps: 1,
            seed: 5,
            mode: FloatMode::F64,
        };
        let mut model = crate::vae::VaeModel::new(cfg.clone()).unwrap();
        let mut rng = CounterRng::new(88);
        let mut x = Matrix::zeros(2, 8);
        for v in x.data.iter_mut() {
            *v = rng.uniform();
        }
        let mut eps = Matrix::zeros(2, 2);
        rng.fill_normal(&mut eps.data);
        let (_, analytic) = model.loss_and_grads(&x, &eps).unwrap();
        let mut flat = model.params_flat();
        let h = 1e-5;
        let mut numeric = vec![0.0; flat.len()];
        for i in 0..flat.len() {
            let orig = flat[i];
            flat[i] = orig + h;
            model.set_params_flat(&flat);
            let (lp, _, _) = model.elbo(&x, &eps).unwrap();
            flat[i] = orig - h;
            model.set_params_flat(&flat);
            let (lm, _, _) = model.elbo(&x, &eps).unwrap();
            flat[i] = orig;
            model.set_params_flat(&flat);
            numeric[i] = (lp - lm) / (2.0 * h);
        }
        checks.push(vec_check("vae elbo grad (d=8, L=2)", &analytic, &numeric, 1e-4));
    }

    let all_pass = checks.iter().all(|c| c.passed);
    GradCheckReport { checks, all_pass }
}
