//! The `check` command: numerical and statistical self-tests at configured sizes.

use kfrtrl::analysis::{
    rank_one_total_variance, spectral_trace, unbiasedness_report, untrained_cell, variance_scaling_report,
    ProbeConfig,
};
use kfrtrl::cells::{forward, init_params, jacobians, Arch, CellInit, CellParams};
use kfrtrl::estimators::{Estimator, KfRtrl, Rtrl, SignMode, Tbptt};
use kfrtrl::linalg::{axpy, combine_kron_terms, frob_norm, kron, kron_sum_weights, KronTerm, Matrix, RngHandle};

use crate::config::CheckSection;
use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Outcome = Result<(bool, String), CliError>;

fn lib<T>(r: kfrtrl::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| CliError::Run(e.to_string()))
}

pub fn run_checks(cfg: &CheckSection, seed: u64) -> Result<Vec<CheckResult>, CliError> {
    let checks: [(&'static str, fn(&CheckSection, u64) -> Outcome); 7] = [
        ("rtrl-equals-backprop", exactness),
        ("factorization", factorization),
        ("kron-sum", kron_sum),
        ("kf-unbiased", unbiasedness),
        ("variance-scaling", scaling),
        ("uoro-first-step", uoro_identity),
        ("claim-bound", claim_bound),
    ];
    checks
        .iter()
        .map(|(name, f)| {
            let (passed, detail) = f(cfg, seed)?;
            Ok(CheckResult { name, passed, detail })
        })
        .collect()
}

pub fn format_table(results: &[CheckResult]) -> String {
    let mut s = String::new();
    for r in results {
        s += &format!("{:<22} {}  {}\n", r.name, if r.passed { "PASS" } else { "FAIL" }, r.detail);
    }
    s
}

fn random_inputs(rng: &mut RngHandle, steps: usize, width: usize) -> Vec<Vec<f64>> {
    (0..steps).map(|_| (0..width).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-300);
    num / den
}

fn summed(est: &mut dyn Estimator, params: &CellParams, inputs: &[Vec<f64>], dirs: &[Vec<f64>]) -> Result<Vec<f64>, CliError> {
    let mut state = params.zero_state();
    let mut total = vec![0.0; params.recurrent_len()];
    let mut rng = RngHandle::new(0);
    for (x, dl) in inputs.iter().zip(dirs) {
        let tr = lib(forward(params, &state, x))?;
        lib(est.step(&jacobians(params, &tr), &tr.hhat, &mut rng))?;
        if let Some(g) = lib(est.gradient(dl))? {
            axpy(1.0, &g, &mut total);
        }
        state = tr.state_next;
    }
    if let Some(g) = lib(est.flush())? {
        axpy(1.0, &g, &mut total);
    }
    Ok(total)
}

/// Forward-mode RTRL against a backward pass over the whole sequence.
fn exactness(cfg: &CheckSection, seed: u64) -> Outcome {
    let tol = cfg.exact_tol * cfg.tolerance;
    let mut worst = 0.0f64;
    for i in 0..cfg.exact_configs {
        let mut rng = RngHandle::new(seed).child(100 + i as u64);
        let (n, m, len) = (rng.int_in(1, 8), rng.int_in(1, 4), rng.int_in(2, 12));
        let params = lib(init_params(Arch::ALL[i % 3], n, m, 1, 1.5, &mut rng))?;
        let inputs = random_inputs(&mut rng, len, m);
        let dirs = random_inputs(&mut rng, len, params.state_size());
        let fwd = summed(&mut Rtrl::new(&params), &params, &inputs, &dirs)?;
        let bwd = summed(&mut lib(Tbptt::new(&params, len))?, &params, &inputs, &dirs)?;
        worst = worst.max(rel_err(&fwd, &bwd));
    }
    Ok((worst <= tol, format!("{} configs, max relative error {worst:.3e} (tol {tol:.1e})", cfg.exact_configs)))
}

/// `kron(hhat, D)` and `H` against central differences of the forward map.
fn factorization(cfg: &CheckSection, seed: u64) -> Outcome {
    const EPS: f64 = 1e-5;
    let tol = cfg.fd_tol * cfg.tolerance;
    let mut worst = 0.0f64;
    let mut ok = true;
    let mut check = |fd: f64, an: f64| {
        let scale = an.abs().max(1e-3);
        worst = worst.max((fd - an).abs() / scale);
        ok &= (fd - an).abs() <= tol * scale;
    };
    for i in 0..cfg.fd_configs {
        let mut rng = RngHandle::new(seed).child(200 + i as u64);
        let (n, m) = (rng.int_in(1, 8), rng.int_in(1, 4));
        let params = lib(init_params(Arch::ALL[i % 3], n, m, 1, 1.5, &mut rng))?;
        let mut prev = params.zero_state();
        for x in random_inputs(&mut rng, 3, m) {
            prev = lib(forward(&params, &prev, &x))?.state_next;
        }
        let x = random_inputs(&mut rng, 1, m).remove(0);
        let trace = lib(forward(&params, &prev, &x))?;
        let jac = jacobians(&params, &trace);
        let f = lib(kron(&trace.hhat, &jac.d))?;
        for k in 0..params.w.data().len() {
            let (mut plus, mut minus) = (params.clone(), params.clone());
            plus.w.data_mut()[k] += EPS;
            minus.w.data_mut()[k] -= EPS;
            let sp = lib(forward(&plus, &prev, &x))?.state_next;
            let sm = lib(forward(&minus, &prev, &x))?.state_next;
            for row in 0..sp.len() {
                check((sp[row] - sm[row]) / (2.0 * EPS), f.get(row, k));
            }
        }
        for col in 0..prev.len() {
            let (mut p, mut q) = (prev.clone(), prev.clone());
            p[col] += EPS;
            q[col] -= EPS;
            let sp = lib(forward(&params, &p, &x))?.state_next;
            let sm = lib(forward(&params, &q, &x))?.state_next;
            for row in 0..sp.len() {
                check((sp[row] - sm[row]) / (2.0 * EPS), jac.h.get(row, col));
            }
        }
    }
    Ok((ok, format!("{} configs, max relative error {worst:.3e} (tol {tol:.1e})", cfg.fd_configs)))
}

fn exact_sum(terms: &[KronTerm]) -> Result<Vec<f64>, CliError> {
    let mut total = lib(kron(&terms[0].a, &terms[0].b))?.data().to_vec();
    for t in &terms[1..] {
        axpy(1.0, lib(kron(&t.a, &t.b))?.data(), &mut total);
    }
    Ok(total)
}

/// Mean and total variance of the reduction over every sign pattern.
fn enumerate_signs(terms: &[KronTerm], weights: &[f64]) -> Result<(Vec<f64>, f64), CliError> {
    let exact = exact_sum(terms)?;
    let count = 1usize << terms.len();
    let mut mean = vec![0.0; exact.len()];
    let mut var = 0.0;
    for bits in 0..count {
        let signs: Vec<f64> = (0..terms.len()).map(|i| if bits >> i & 1 == 1 { 1.0 } else { -1.0 }).collect();
        let (a, b) = lib(combine_kron_terms(terms, weights, &signs))?;
        let k = lib(kron(&a, &b))?;
        for ((mu, x), e) in mean.iter_mut().zip(k.data()).zip(&exact) {
            *mu += x / count as f64;
            var += (x - e).powi(2) / count as f64;
        }
    }
    Ok((mean, var))
}

fn random_terms(rng: &mut RngHandle, m: usize) -> Vec<KronTerm> {
    (0..m)
        .map(|_| {
            let s = rng.uniform(0.1, 3.0);
            let a = (0..3).map(|_| rng.uniform(-1.0, 1.0) * s).collect();
            let b = Matrix::from_vec(2, 4, (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect()).expect("2x4");
            KronTerm::new(a, b)
        })
        .collect()
}

/// Exhaustive sign enumeration of the Kronecker-sum reduction.
fn kron_sum(cfg: &CheckSection, seed: u64) -> Outcome {
    let tol = cfg.kron_tol * cfg.tolerance;
    let mut rng = RngHandle::new(seed).child(300);
    let mut worst = 0.0f64;
    for m in 1..=4 {
        for _ in 0..cfg.kron_trials {
            let terms = random_terms(&mut rng, m);
            let (mean, _) = enumerate_signs(&terms, &kron_sum_weights(&terms))?;
            for (x, e) in mean.iter().zip(exact_sum(&terms)?) {
                worst = worst.max((x - e).abs() / e.abs().max(1.0));
            }
        }
    }
    let mut beaten = 0;
    for _ in 0..cfg.kron_trials {
        let terms = random_terms(&mut rng, 2);
        let opt = kron_sum_weights(&terms);
        let (_, best) = enumerate_signs(&terms, &opt)?;
        for _ in 0..20 {
            let w: Vec<f64> = opt.iter().map(|p| p * rng.uniform(-0.5, 0.5).exp()).collect();
            if enumerate_signs(&terms, &w)?.1 < best * (1.0 - 1e-12) {
                beaten += 1;
            }
        }
    }
    Ok((
        worst <= tol && beaten == 0,
        format!("mean error {worst:.3e} (tol {tol:.1e}); balanced weights beaten {beaten} times"),
    ))
}

/// Monte Carlo mean of KF-RTRL against exact RTRL, plus a biased control.
fn unbiasedness(cfg: &CheckSection, seed: u64) -> Outcome {
    let limit = cfg.z_limit * cfg.tolerance;
    let (params, inputs) = lib(ProbeConfig::new(Arch::Rhn, 4, 2, seed).build(5))?;
    let within = |z: &[f64]| z.iter().filter(|z| z.abs() <= limit).count() as f64 / z.len() as f64;
    let honest = lib(unbiasedness_report(|p| Box::new(KfRtrl::new(p)), &params, &inputs, cfg.unbiased_samples, seed))?;
    let control = lib(unbiasedness_report(
        |p| Box::new(KfRtrl::with_signs(p, SignMode::Fixed)),
        &params,
        &inputs,
        cfg.unbiased_samples,
        seed,
    ))?;
    let (h, c) = (within(&honest.z), within(&control.z));
    Ok((
        h >= cfg.min_fraction && c < cfg.min_fraction,
        format!("|z|<={limit}: kf-rtrl {h:.4}, fixed-sign control {c:.4} (need >= {} and below it)", cfg.min_fraction),
    ))
}

/// Log-log slope of KF-RTRL per-entry variance in `n`.
fn scaling(cfg: &CheckSection, seed: u64) -> Outcome {
    let rep = lib(variance_scaling_report(Arch::Rhn, &[8, 16, 32, 64], None, 10, cfg.scaling_samples, seed))?;
    let mid = 0.5 * (cfg.slope_min + cfg.slope_max);
    let half = 0.5 * (cfg.slope_max - cfg.slope_min) * cfg.tolerance;
    let s = rep.kf_slope.slope;
    Ok((
        (s - mid).abs() <= half && rep.ratio_slope.slope > 0.0,
        format!("kf slope {s:.3} (band {:.2}..{:.2}), uoro/kf ratio slope {:.3}", mid - half, mid + half, rep.ratio_slope.slope),
    ))
}

/// Total variance of the first UORO step against `(s - 1) ||F||^2`.
fn uoro_identity(cfg: &CheckSection, seed: u64) -> Outcome {
    let (params, inputs) = lib(ProbeConfig::new(Arch::TanhRnn, 6, 3, seed).build(2))?;
    let first = lib(forward(&params, &params.zero_state(), &inputs[0]))?;
    let trace = lib(forward(&params, &first.state_next, &inputs[1]))?;
    let f = lib(kron(&trace.hhat, &jacobians(&params, &trace).d))?;
    let expected = (f.rows() as f64 - 1.0) * frob_norm(&f).powi(2);
    let (var, se) = lib(rank_one_total_variance(&f, cfg.identity_draws, &mut RngHandle::new(seed).child(400)))?;
    let tol = cfg.tolerance * (cfg.z_limit * se).max(1e-10 * expected);
    Ok(((var - expected).abs() <= tol, format!("{var:.6} vs {expected:.6} (se {se:.2e})")))
}

/// `||u|| ||A|| <= 4 C1 C2 / eps^2` along contracting runs.
fn claim_bound(cfg: &CheckSection, seed: u64) -> Outcome {
    let mut violations = 0;
    let mut min_slack = f64::INFINITY;
    for run in 0..cfg.claim_runs as u64 {
        let init = CellInit { scale: 1.0, gate_bias: -2.0 };
        let params = lib(untrained_cell(Arch::TanhRnn, 8, 3, init, seed.wrapping_add(run)))?;
        let mut rng = RngHandle::new(seed).child(500 + run);
        let inputs = random_inputs(&mut rng, cfg.claim_steps, 3);
        let diag = lib(spectral_trace(&params, &inputs, &mut rng))?;
        if let Some(last) = diag.last() {
            min_slack = min_slack.min(last.slack);
        }
        violations += diag.iter().filter(|d| d.product_within_bound() != Some(true)).count();
    }
    Ok((
        violations == 0 && min_slack >= 0.1,
        format!("{} runs, min slack {min_slack:.3}, {violations} steps over the bound", cfg.claim_runs),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CheckSection {
        CheckSection {
            exact_configs: 4,
            fd_configs: 4,
            kron_trials: 2,
            unbiased_samples: 5000,
            identity_draws: 2000,
            scaling_samples: 100,
            claim_runs: 2,
            ..CheckSection::default()
        }
    }

    #[test]
    fn deterministic_checks_pass_at_default_tolerances() {
        let cfg = small();
        for f in [exactness, factorization, kron_sum, uoro_identity, claim_bound] {
            let (ok, detail) = f(&cfg, 0).unwrap();
            assert!(ok, "{detail}");
        }
    }

    #[test]
    fn zero_tolerance_fails() {
        let cfg = CheckSection { tolerance: 0.0, ..small() };
        for f in [exactness, factorization, uoro_identity] {
            assert!(!f(&cfg, 0).unwrap().0);
        }
    }

    #[test]
    fn table_has_one_line_per_check() {
        let rows = vec![
            CheckResult { name: "a", passed: true, detail: "x".into() },
            CheckResult { name: "b", passed: false, detail: "y".into() },
        ];
        let t = format_table(&rows);
        assert_eq!(t.lines().count(), 2);
        assert!(t.contains("FAIL"));
    }
}
