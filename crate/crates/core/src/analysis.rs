//! Variance and alignment experiments, and the statistics used to judge them.
//!
//! Everything here runs untrained cells: the estimators are compared with the
//! exact gradient of the same trajectory, never with each other's outputs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::cells::{forward, jacobians, one_hot, output_logits, Arch, CellInit, CellParams, StructuredJacobians};
use crate::error::{invalid, Error, Result};
use crate::estimators::{Estimator, EstimatorKind, KronState, Rtrl, TbpttState};
use crate::linalg::{axpy, dot, frob_norm, norm, spectral_norm, Matrix, RngHandle, SPECTRAL_MAX_ITERS, SPECTRAL_TOL};
use crate::tasks::{BatchSource, CorpusStream};
use crate::training::xent_loss_and_grad;

/// Cosine of the angle between an estimate and the exact gradient.
///
/// A zero estimate gives 0; a zero reference is an error.
pub fn cosine(g_est: &[f64], g_exact: &[f64]) -> Result<f64> {
    if g_est.len() != g_exact.len() {
        return invalid(format!("cosine of vectors with lengths {} and {}", g_est.len(), g_exact.len()));
    }
    let ne = dot(g_exact, g_exact);
    if ne == 0.0 {
        return Err(Error::UndefinedReference("exact gradient is zero".into()));
    }
    let na = dot(g_est, g_est);
    if na == 0.0 {
        return Ok(0.0);
    }
    Ok(dot(g_est, g_exact) / (na * ne).sqrt())
}

// ---------------------------------------------------------------- statistics

/// Running mean and variance (Welford).
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub count: u64,
    pub mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    pub fn new(len: usize) -> Self {
        Moments { count: 0, mean: vec![0.0; len], m2: vec![0.0; len] }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let k = self.count as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / k;
            *s += d * (v - *m);
        }
    }

    /// Unbiased per-entry sample variance.
    pub fn variance(&self) -> Vec<f64> {
        let denom = (self.count.max(2) - 1) as f64;
        self.m2.iter().map(|s| s / denom).collect()
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Standard error of the mean of `xs`.
pub fn standard_error(xs: &[f64]) -> f64 {
    (sample_variance(xs) / xs.len() as f64).sqrt()
}

/// Standard error of the overall mean from `batches` contiguous batch means.
pub fn batch_means_se(xs: &[f64], batches: usize) -> Result<f64> {
    if batches < 2 || xs.len() < batches {
        return invalid("batch means need at least two non-empty batches");
    }
    let size = xs.len() / batches;
    let means: Vec<f64> = (0..batches).map(|b| mean(&xs[b * size..(b + 1) * size])).collect();
    Ok(standard_error(&means))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope.
    pub slope_se: f64,
}

/// Ordinary least squares of `y` on `x`.
pub fn linear_regression(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() || x.len() < 2 {
        return invalid("regression needs at least two paired points");
    }
    let mx = mean(x);
    let my = mean(y);
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return invalid("regression on a constant predictor");
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_se = if x.len() > 2 {
        let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
        (rss / (x.len() as f64 - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(LinearFit { slope, intercept, slope_se })
}

/// Slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return invalid("log-log fit needs positive values");
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    linear_regression(&lx, &ly)
}

pub fn normal_cdf(z: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").cdf(z)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannKendall {
    pub s: i64,
    pub z: f64,
    /// One-sided p-value for a decreasing trend.
    pub p_decreasing: f64,
    /// One-sided p-value for an increasing trend.
    pub p_increasing: f64,
}

/// Mann-Kendall trend test with the normal approximation and continuity
/// correction (no tie adjustment).
pub fn mann_kendall(series: &[f64]) -> Result<MannKendall> {
    let n = series.len();
    if n < 3 {
        return invalid("trend test needs at least three points");
    }
    let mut s = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            s += match series[j].partial_cmp(&series[i]) {
                Some(std::cmp::Ordering::Greater) => 1,
                Some(std::cmp::Ordering::Less) => -1,
                _ => 0,
            };
        }
    }
    let nf = n as f64;
    let var = nf * (nf - 1.0) * (2.0 * nf + 5.0) / 18.0;
    let z = match s {
        0 => 0.0,
        s if s > 0 => (s as f64 - 1.0) / var.sqrt(),
        s => (s as f64 + 1.0) / var.sqrt(),
    };
    Ok(MannKendall { s, z, p_decreasing: normal_cdf(z), p_increasing: 1.0 - normal_cdf(z) })
}

/// One-sided Welch test that `mean(a) > mean(b)`; returns the p-value.
pub fn one_sided_greater(a: &[f64], b: &[f64]) -> f64 {
    let se = (sample_variance(a) / a.len() as f64 + sample_variance(b) / b.len() as f64).sqrt();
    let diff = mean(a) - mean(b);
    if se == 0.0 {
        return if diff > 0.0 { 0.0 } else { 1.0 };
    }
    1.0 - normal_cdf(diff / se)
}

// ------------------------------------------------------------ probe setup

/// An untrained cell plus the inputs it is driven with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub arch: Arch,
    pub n: usize,
    pub m: usize,
    #[serde(default)]
    pub init: CellInit,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn new(arch: Arch, n: usize, m: usize, seed: u64) -> Self {
        ProbeConfig { arch, n, m, init: CellInit::default(), seed }
    }

    /// Parameters and a sequence of dense inputs in `[-1, 1]^m`.
    pub fn build(&self, steps: usize) -> Result<(CellParams, Vec<Vec<f64>>)> {
        let mut rng = RngHandle::new(self.seed);
        let params = CellParams::init(self.arch, self.n, self.m, 1, self.init, &mut rng)?;
        let inputs = (0..steps).map(|_| (0..self.m).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect();
        Ok((params, inputs))
    }
}

/// Runs the cell from the zero state and returns every step's Jacobians and `hhat`.
pub fn trajectory(params: &CellParams, inputs: &[Vec<f64>]) -> Result<Vec<(Vec<f64>, StructuredJacobians)>> {
    let mut state = params.zero_state();
    inputs
        .iter()
        .map(|x| {
            let trace = forward(params, &state, x)?;
            let jac = jacobians(params, &trace);
            state.clone_from(&trace.state_next);
            Ok((trace.hhat, jac))
        })
        .collect()
}

/// Exact influence matrix after the whole trajectory.
pub fn exact_influence(params: &CellParams, traj: &[(Vec<f64>, StructuredJacobians)]) -> Result<Matrix> {
    let mut rtrl = Rtrl::new(params);
    let mut rng = RngHandle::new(0);
    for (hhat, jac) in traj {
        rtrl.step(jac, hhat, &mut rng)?;
    }
    Ok(rtrl.state.g)
}

// -------------------------------------------------------------- unbiasedness

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnbiasednessReport {
    /// `(mean - exact) / standard error` per entry of the influence matrix.
    pub z: Vec<f64>,
    /// Fraction of entries with `|z| <= z_limit`.
    pub fraction_within: f64,
    pub z_limit: f64,
    pub samples: usize,
}

impl UnbiasednessReport {
    pub fn max_abs_z(&self) -> f64 {
        self.z.iter().fold(0.0, |a, z| a.max(z.abs()))
    }

    pub fn passes(&self, required_fraction: f64) -> bool {
        self.fraction_within >= required_fraction
    }
}

/// Monte Carlo check that an estimator's influence matrix is unbiased.
///
/// `factory` builds a fresh estimator; sample `i` runs it over the whole
/// trajectory with random stream `seed.child(i)`. An entry whose estimate
/// never varies gets `z = 0` if it equals the exact value and `inf` otherwise.
pub fn unbiasedness_report<F>(
    factory: F,
    params: &CellParams,
    inputs: &[Vec<f64>],
    samples: usize,
    seed: u64,
) -> Result<UnbiasednessReport>
where
    F: Fn(&CellParams) -> Box<dyn Estimator> + Sync,
{
    const Z_LIMIT: f64 = 4.0;
    if samples < 100 {
        return invalid(format!("unbiasedness needs at least 100 samples, got {samples}"));
    }
    if inputs.is_empty() {
        return invalid("unbiasedness needs at least one step");
    }
    let traj = trajectory(params, inputs)?;
    let exact = exact_influence(params, &traj)?;
    let base = RngHandle::new(seed);

    // Fixed chunking keeps the reduction order independent of the thread count.
    let chunk = 256;
    let partials: Vec<Moments> = (0..samples.div_ceil(chunk))
        .into_par_iter()
        .map(|c| {
            let mut mom = Moments::new(exact.data().len());
            for i in c * chunk..((c + 1) * chunk).min(samples) {
                let mut est = factory(params);
                let mut rng = base.child(i as u64);
                for (hhat, jac) in &traj {
                    est.step(jac, hhat, &mut rng)?;
                }
                let g = est
                    .influence()
                    .ok_or_else(|| Error::InvalidArgument(format!("{} has no influence matrix", est.name())))?;
                mom.push(g.data());
            }
            Ok(mom)
        })
        .collect::<Result<_>>()?;
    let total = merge_moments(&partials);

    let var = total.variance();
    let nf = samples as f64;
    let z: Vec<f64> = total
        .mean
        .iter()
        .zip(&var)
        .zip(exact.data())
        .map(|((m, v), e)| {
            let diff = m - e;
            let se = (v / nf).sqrt();
            if se > 0.0 {
                diff / se
            } else if diff.abs() <= 1e-12 * e.abs().max(1.0) {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let within = z.iter().filter(|z| z.abs() <= Z_LIMIT).count();
    Ok(UnbiasednessReport { fraction_within: within as f64 / z.len() as f64, z, z_limit: Z_LIMIT, samples })
}

/// Chan et al. pairwise merge of Welford accumulators, in slice order.
fn merge_moments(parts: &[Moments]) -> Moments {
    let len = parts.first().map_or(0, |p| p.mean.len());
    let mut out = Moments::new(len);
    for p in parts {
        if p.count == 0 {
            continue;
        }
        let (na, nb) = (out.count as f64, p.count as f64);
        let n = na + nb;
        for i in 0..len {
            let d = p.mean[i] - out.mean[i];
            out.mean[i] += d * nb / n;
            out.m2[i] += p.m2[i] + d * d * na * nb / n;
        }
        out.count += p.count;
    }
    out
}

// --------------------------------------------------------- variance scaling

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub n: usize,
    pub estimator: String,
    /// Mean over all entries of the per-entry sample variance of `G'_t`.
    pub mean_variance: f64,
    /// Batch-means standard error of `mean_variance`.
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceScaling {
    pub rows: Vec<VarianceRow>,
    /// Log-log slope of the KF-RTRL mean variance against `n`.
    pub kf_slope: LinearFit,
    /// Log-log slope of `Var[UORO] / Var[KF]` against `n`.
    pub ratio_slope: LinearFit,
}

/// Mean per-entry variance of one estimator's influence matrix.
pub fn mean_entry_variance<F>(
    factory: F,
    params: &CellParams,
    inputs: &[Vec<f64>],
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)>
where
    F: Fn(&CellParams) -> Box<dyn Estimator> + Sync,
{
    const BATCHES: usize = 10;
    if samples < 2 * BATCHES {
        return invalid(format!("variance estimate needs at least {} samples", 2 * BATCHES));
    }
    let traj = trajectory(params, inputs)?;
    let base = RngHandle::new(seed);
    let size = samples / BATCHES;
    let per_batch: Vec<f64> = (0..BATCHES)
        .into_par_iter()
        .map(|b| {
            let mut mom: Option<Moments> = None;
            for i in b * size..(b + 1) * size {
                let mut est = factory(params);
                let mut rng = base.child(i as u64);
                for (hhat, jac) in &traj {
                    est.step(jac, hhat, &mut rng)?;
                }
                let g = est
                    .influence()
                    .ok_or_else(|| Error::InvalidArgument(format!("{} has no influence matrix", est.name())))?;
                mom.get_or_insert_with(|| Moments::new(g.data().len())).push(g.data());
            }
            let v = mom.expect("non-empty batch").variance();
            Ok(mean(&v))
        })
        .collect::<Result<_>>()?;
    Ok((mean(&per_batch), standard_error(&per_batch)))
}

/// Per-entry variance of KF-RTRL and UORO at each `n`, with fitted slopes.
///
/// `m: None` sets the input width to `n`, which keeps `||hhat||^2`
/// proportional to its length as `n` grows. With a fixed width the
/// pre-activations shrink like `n^{-1/2}` and the KF slope steepens.
pub fn variance_scaling_report(
    arch: Arch,
    ns: &[usize],
    m: Option<usize>,
    t: usize,
    samples: usize,
    seed: u64,
) -> Result<VarianceScaling> {
    if ns.len() < 2 {
        return invalid("variance scaling needs at least two sizes");
    }
    let mut rows = Vec::new();
    let mut kf = Vec::new();
    let mut ratio = Vec::new();
    for (idx, &n) in ns.iter().enumerate() {
        let probe = ProbeConfig::new(arch, n, m.unwrap_or(n), seed.wrapping_add(idx as u64));
        let (params, inputs) = probe.build(t)?;
        let mut vals = Vec::new();
        for kind in [EstimatorKind::KfRtrl, EstimatorKind::Uoro] {
            let (v, se) = mean_entry_variance(
                |p| kind.build(p).expect("estimator builds for valid params"),
                &params,
                &inputs,
                samples,
                seed ^ 0x5eed,
            )?;
            rows.push(VarianceRow { n, estimator: kind.label(), mean_variance: v, se });
            vals.push(v);
        }
        kf.push(vals[0]);
        ratio.push(vals[1] / vals[0]);
    }
    let nsf: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    Ok(VarianceScaling { rows, kf_slope: log_log_slope(&nsf, &kf)?, ratio_slope: log_log_slope(&nsf, &ratio)? })
}

/// Monte Carlo total variance of the rank-one estimate `nu nu^T F` of `F`.
///
/// Returns `(total variance, standard error)`; the exact value is
/// `(s - 1) ||F||^2` for an `s`-row `F`.
pub fn rank_one_total_variance(f: &Matrix, samples: usize, rng: &mut RngHandle) -> Result<(f64, f64)> {
    if samples < 100 {
        return invalid("rank-one variance needs at least 100 samples");
    }
    let (s, p) = f.shape();
    let mut sq = Vec::with_capacity(samples);
    let mut nu = vec![0.0; s];
    for _ in 0..samples {
        nu.iter_mut().for_each(|x| *x = rng.sign());
        let nf = f.left_mul(&nu)?;
        // ||nu nu^T F - F||^2 summed over entries.
        let mut dev = 0.0;
        for j in 0..s {
            let row = f.row(j);
            for c in 0..p {
                let e = nu[j] * nf[c] - row[c];
                dev += e * e;
            }
        }
        sq.push(dev);
    }
    Ok((mean(&sq), standard_error(&sq)))
}

// ---------------------------------------------------------------- alignment

/// Where the exact gradient comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Reference {
    /// Forward-mode exact RTRL at every step.
    Rtrl,
    /// Backpropagation through the full stored history at each checkpoint.
    #[default]
    Bptt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSample {
    pub t: usize,
    pub n: usize,
    pub estimator: String,
    pub cosine: f64,
    pub seed: u64,
    /// The estimate was exactly zero.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub arch: Arch,
    pub n: usize,
    #[serde(default)]
    pub init: CellInit,
    pub steps: usize,
    pub repeats: usize,
    /// Steps at which cosines are recorded.
    pub checkpoints: Vec<usize>,
    #[serde(default)]
    pub reference: Reference,
    pub seed: u64,
}

impl AlignmentConfig {
    /// Checkpoints `start, start + every, ...` up to `steps`.
    pub fn every(arch: Arch, n: usize, steps: usize, start: usize, every: usize, repeats: usize, seed: u64) -> Self {
        let checkpoints = (start.max(1)..=steps).step_by(every.max(1)).collect();
        AlignmentConfig { arch, n, init: CellInit::default(), steps, repeats, checkpoints, reference: Reference::Bptt, seed }
    }
}

enum Tracked {
    Forward(Box<dyn Estimator>),
    Window(TbpttState),
}

/// Exact `dL_t/d theta` for a loss at the newest step, by backpropagation
/// through every stored step.
fn backprop_latest(history: &[(Vec<f64>, StructuredJacobians)], dldh: &[f64], block: usize) -> Result<Vec<f64>> {
    let width = history.first().map_or(0, |h| h.0.len());
    let mut grad = vec![0.0; width * block];
    let mut delta = dldh.to_vec();
    for (pos, (hhat, jac)) in history.iter().enumerate().rev() {
        let through_d = jac.d.left_mul(&delta)?;
        for (i, &hi) in hhat.iter().enumerate() {
            if hi != 0.0 {
                axpy(hi, &through_d, &mut grad[i * block..(i + 1) * block]);
            }
        }
        if pos > 0 {
            delta = jac.h.left_mul(&delta)?;
        }
    }
    Ok(grad)
}

fn alignment_repeat(
    cfg: &AlignmentConfig,
    text: &str,
    kinds: &[EstimatorKind],
    repeat: usize,
) -> Result<Vec<AlignmentSample>> {
    let base = RngHandle::new(cfg.seed).child(repeat as u64);
    let mut setup = base.child(0);
    let mut stream = CorpusStream::new(text, 1, &mut setup)?;
    let vocab = stream.vocab.len();
    let params = CellParams::init(cfg.arch, cfg.n, vocab, vocab, cfg.init, &mut setup)?;
    let block = params.maps() * params.n;
    let run_seed = cfg.seed.wrapping_add(repeat as u64);

    let mut tracked: Vec<(String, Tracked, RngHandle)> = kinds
        .iter()
        .enumerate()
        .map(|(i, k)| {
            let t = match *k {
                EstimatorKind::Tbptt { horizon } => {
                    Tracked::Window(TbpttState::new(horizon, params.state_size(), params.input_width(), block)?)
                }
                _ => Tracked::Forward(k.build(&params)?),
            };
            Ok((k.label(), t, base.child(i as u64 + 1)))
        })
        .collect::<Result<_>>()?;
    let mut exact_rtrl = (cfg.reference == Reference::Rtrl).then(|| Rtrl::new(&params));
    let mut history: Vec<(Vec<f64>, StructuredJacobians)> = Vec::new();
    let mut rng0 = RngHandle::new(0);

    let mut checkpoints = cfg.checkpoints.clone();
    checkpoints.sort_unstable();
    let mut next_cp = checkpoints.iter().peekable();
    let mut state = params.zero_state();
    let mut out = Vec::new();
    for t in 1..=cfg.steps {
        let Some(batch) = stream.next_batch() else { break };
        let (x, y) = batch[0];
        let trace = forward(&params, &state, &one_hot(x, vocab))?;
        let jac = jacobians(&params, &trace);
        for (_, est, rng) in tracked.iter_mut() {
            match est {
                Tracked::Forward(e) => e.step(&jac, &trace.hhat, rng)?,
                Tracked::Window(w) => w.push(&jac, &trace.hhat)?,
            }
        }
        if let Some(r) = exact_rtrl.as_mut() {
            r.step(&jac, &trace.hhat, &mut rng0)?;
        } else {
            history.push((trace.hhat.clone(), jac));
        }
        state.clone_from(&trace.state_next);

        while next_cp.peek().is_some_and(|&&c| c < t) {
            next_cp.next();
        }
        if next_cp.peek() != Some(&&t) {
            continue;
        }
        next_cp.next();

        let logits = output_logits(&params, trace.h_next())?;
        let (_, dlogits) = xent_loss_and_grad(&logits, y)?;
        let dh = params.w_out.mul_vec(&dlogits)?;
        let mut dldh = vec![0.0; params.state_size()];
        let off = params.arch.hidden_offset(params.n);
        dldh[off..off + params.n].copy_from_slice(&dh);

        let exact = match exact_rtrl.as_mut() {
            Some(r) => r.gradient(&dldh)?.expect("rtrl always answers"),
            None => backprop_latest(&history, &dldh, block)?,
        };
        for (label, est, _) in tracked.iter_mut() {
            let g = match est {
                Tracked::Forward(e) => match e.gradient(&dldh)? {
                    Some(g) => g,
                    None => continue,
                },
                Tracked::Window(w) => {
                    w.record_loss(&dldh)?;
                    let g = w.grad()?;
                    w.record_loss(&vec![0.0; dldh.len()])?;
                    g
                }
            };
            let c = match cosine(&g, &exact) {
                Ok(c) => c,
                Err(Error::UndefinedReference(_)) => continue,
                Err(e) => return Err(e),
            };
            out.push(AlignmentSample {
                t,
                n: cfg.n,
                estimator: label.clone(),
                cosine: c,
                seed: run_seed,
                degenerate: g.iter().all(|&v| v == 0.0),
            });
        }
    }
    Ok(out)
}

/// Cosine between each estimator's `dL_t/d theta` and the exact one, at the
/// configured checkpoints, over independent repeats.
///
/// Each repeat draws its own untrained cell and its own starting offset in
/// `text`; the loss is next-character cross-entropy through the readout.
pub fn run_alignment_over_time(cfg: &AlignmentConfig, text: &str, kinds: &[EstimatorKind]) -> Result<Vec<AlignmentSample>> {
    if cfg.steps == 0 || cfg.repeats == 0 {
        return Ok(Vec::new());
    }
    let per_repeat: Vec<Vec<AlignmentSample>> = (0..cfg.repeats)
        .into_par_iter()
        .map(|r| alignment_repeat(cfg, text, kinds, r))
        .collect::<Result<_>>()?;
    Ok(per_repeat.into_iter().flatten().collect())
}

/// Cosines after `steps` steps for each size in `ns`.
///
/// `UoroAvg { k: 0 }` in `kinds` stands for averaging `k = n` samples.
pub fn run_alignment_over_units(
    arch: Arch,
    ns: &[usize],
    steps: usize,
    repeats: usize,
    kinds: &[EstimatorKind],
    text: &str,
    seed: u64,
) -> Result<Vec<AlignmentSample>> {
    let mut out = Vec::new();
    for &n in ns {
        let resolved: Vec<EstimatorKind> = kinds
            .iter()
            .map(|k| match *k {
                EstimatorKind::UoroAvg { k: 0 } => EstimatorKind::UoroAvg { k: n },
                other => other,
            })
            .collect();
        let mut cfg = AlignmentConfig::every(arch, n, steps, steps, 1, repeats, seed.wrapping_add(n as u64));
        cfg.checkpoints = vec![steps];
        out.extend(run_alignment_over_time(&cfg, text, &resolved)?);
    }
    Ok(out)
}

/// Mean cosine per `(n, estimator, t)` group, in first-seen order.
pub fn mean_cosines(samples: &[AlignmentSample]) -> Vec<(usize, String, usize, f64, f64)> {
    let mut keys: Vec<(usize, String, usize)> = Vec::new();
    let mut groups: Vec<Vec<f64>> = Vec::new();
    for s in samples {
        let key = (s.n, s.estimator.clone(), s.t);
        match keys.iter().position(|k| *k == key) {
            Some(i) => groups[i].push(s.cosine),
            None => {
                keys.push(key);
                groups.push(vec![s.cosine]);
            }
        }
    }
    keys.into_iter()
        .zip(groups)
        .map(|((n, e, t), g)| {
            let se = if g.len() > 1 { standard_error(&g) } else { 0.0 };
            (n, e, t, mean(&g), se)
        })
        .collect()
}

// ---------------------------------------------------------------- spectral

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralDiagnostics {
    pub t: usize,
    /// `sigma(H_t)` by power iteration.
    pub sigma: f64,
    /// `1 - max sigma` so far.
    pub slack: f64,
    /// Running max of `||hhat||`.
    pub c1: f64,
    /// Running max of `||D||`.
    pub c2: f64,
    /// `16 C1^2 C2^2 / (slack^3 (2 - slack))`, when the slack is positive.
    pub variance_bound: Option<f64>,
    /// `4 C1 C2 / slack^2`, when the slack is positive.
    pub product_bound: Option<f64>,
    /// `||u_t|| ||A_t||` of a KF-RTRL run on the same trajectory.
    pub product: f64,
}

impl SpectralDiagnostics {
    pub fn product_within_bound(&self) -> Option<bool> {
        self.product_bound.map(|b| self.product <= b)
    }
}

/// Per-step spectral norm, running constants and the KF factor product.
pub fn spectral_trace(params: &CellParams, inputs: &[Vec<f64>], rng: &mut RngHandle) -> Result<Vec<SpectralDiagnostics>> {
    let mut kf = KronState::for_cell(params);
    let mut state = params.zero_state();
    let (mut max_sigma, mut c1, mut c2) = (0.0f64, 0.0f64, 0.0f64);
    let mut power_rng = rng.child(1);
    let mut out = Vec::with_capacity(inputs.len());
    for (t, x) in inputs.iter().enumerate() {
        let trace = forward(params, &state, x)?;
        let jac = jacobians(params, &trace);
        let sigma = spectral_norm(&jac.h, SPECTRAL_TOL, SPECTRAL_MAX_ITERS, &mut power_rng)?.value;
        max_sigma = max_sigma.max(sigma);
        c1 = c1.max(norm(&trace.hhat));
        c2 = c2.max(frob_norm(&jac.d));
        kf.step(&jac, &trace.hhat, rng)?;
        let slack = 1.0 - max_sigma;
        let (variance_bound, product_bound) = if slack > 0.0 {
            (
                Some(16.0 * c1 * c1 * c2 * c2 / (slack.powi(3) * (2.0 - slack))),
                Some(4.0 * c1 * c2 / (slack * slack)),
            )
        } else {
            (None, None)
        };
        out.push(SpectralDiagnostics {
            t: t + 1,
            sigma,
            slack,
            c1,
            c2,
            variance_bound,
            product_bound,
            product: norm(&kf.u) * frob_norm(&kf.a),
        });
        state = trace.state_next;
    }
    Ok(out)
}

/// Convenience constructor for an untrained cell with custom init.
pub fn untrained_cell(arch: Arch, n: usize, m: usize, init: CellInit, seed: u64) -> Result<CellParams> {
    CellParams::init(arch, n, m, 1, init, &mut RngHandle::new(seed))
}
