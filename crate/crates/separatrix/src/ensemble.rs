//! Monte Carlo capture experiments.
//!
//! Initial conditions are drawn uniformly from the action-angle box
//!
//!   U^delta = { |z - z0| < delta, |I - I0| < delta, |phi - phi0| < delta }
//!
//! around a base point in G3, mapped back to (p, q) through the action-angle
//! inverse. Each sample runs the full perturbed system to capture; fractions
//! are compared against P_nu(z_*) of the base-point averaged solution, with
//! the budget shape delta + eps |ln eps| / delta. Sampling is keyed by
//! (seed, sample index) through independent ChaCha streams, so results do
//! not depend on the worker count.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::averaged::{integrate_averaged, AveragedSolution};
use crate::error::{Error, Result};
use crate::sim::{
    classify_capture, compare_to_averaged, integrate_full, PseudoPrediction, SimOptions,
};
use crate::theta::SepCtx;

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleSpec {
    /// base point M0 = (p, q, z)
    pub base: (f64, f64, Vec<f64>),
    /// action-angle box half-width
    pub delta: f64,
    /// one or more eps values
    pub eps: Vec<f64>,
    pub n: usize,
    pub seed: u64,
    /// fast-time budget per trajectory
    pub t_span: f64,
    /// optional slow-time horizon: trajectories run to min(t_span, tau_max/eps)
    pub tau_max: Option<f64>,
    /// also compute per-sample deviation metrics against per-sample averaged
    /// solutions (much more expensive)
    pub with_error_metrics: bool,
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("N must be positive".into()));
        }
        if self.delta <= 0.0 {
            return Err(Error::Config("delta must be positive".into()));
        }
        if self.eps.is_empty() {
            return Err(Error::Config("need at least one eps".into()));
        }
        for &e in &self.eps {
            if e <= 0.0 {
                return Err(Error::Config(format!("eps = {e} must be positive")));
            }
            // the standing smallness relation of the estimates
            if e >= self.delta * self.delta {
                return Err(Error::Config(format!(
                    "eps = {e} violates eps < delta^2 = {}",
                    self.delta * self.delta
                )));
            }
        }
        if self.t_span <= 0.0 {
            return Err(Error::Config("t_span must be positive".into()));
        }
        Ok(())
    }
}

/// Per-trajectory summary row.
#[derive(Debug, Clone, Serialize)]
pub struct SampleRecord {
    pub id: usize,
    /// drawn box coordinates (z, I, phi)
    pub z_drawn: Vec<f64>,
    pub action_drawn: f64,
    pub phi_drawn: f64,
    pub initial: (f64, f64, Vec<f64>),
    pub destination: Option<u8>,
    pub t_minus: Option<f64>,
    pub t_plus: Option<f64>,
    pub h_prime: Option<f64>,
    pub predicted: Option<PseudoPrediction>,
    pub agreement: Option<bool>,
    pub margin: Option<f64>,
    pub pre_err: Option<f64>,
    pub post_err: Option<f64>,
    pub incomplete_reason: Option<String>,
    /// z at the last section event (internal, for margin scales)
    #[serde(skip)]
    z_prime_store: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PredictorStats {
    pub checked: usize,
    pub agree: usize,
    /// samples with h' within the eps^(3/2) margins of an interval endpoint
    pub excluded: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpsReport {
    pub eps: f64,
    pub n: usize,
    pub n1: usize,
    pub n2: usize,
    pub incomplete: usize,
    pub frac1: f64,
    pub frac2: f64,
    /// binomial standard error of frac1
    pub binom_se: f64,
    /// theory budget shape delta + eps |ln eps| / delta
    pub budget_shape: f64,
    /// |frac1 - P1(z_*)| divided by the budget shape
    pub k4_fit: f64,
    pub predictor: PredictorStats,
    /// medians over complete samples, when metrics were requested
    pub median_pre_err: Option<f64>,
    pub median_post_err: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleReport {
    pub base: (f64, f64, Vec<f64>),
    pub h0: f64,
    pub delta: f64,
    pub n: usize,
    pub seed: u64,
    /// base-point averaged crossing
    pub tau_star: f64,
    pub z_star: Vec<f64>,
    pub p1: f64,
    pub p2: f64,
    pub per_eps: Vec<EpsReport>,
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index.wrapping_add(1));
    r
}

/// Draw N initial conditions uniformly from the action-angle delta box.
/// Returns (z, I, phi, p, q) per sample; deterministic in (seed, index).
pub fn sample_initials(
    ctx: &SepCtx,
    base: (f64, f64, &[f64]),
    delta: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<(Vec<f64>, f64, f64, f64, f64)>> {
    let (p0, q0, z0) = base;
    let env0 = ctx.orbit_env(z0)?;
    let (nu0, i0, phi0) = env0.to_action_angle(p0, q0)?;
    if nu0 != 3 {
        return Err(Error::Precondition(format!(
            "base point lies in G{nu0}, ensembles start in G3"
        )));
    }
    let dimz = ctx.system.dim_z();
    let rows: Vec<Result<(Vec<f64>, f64, f64, f64, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(seed, i as u64);
            let mut z = Vec::with_capacity(dimz);
            for k in 0..dimz {
                z.push(z0[k] + rng.gen_range(-delta..delta));
            }
            let act = i0 + rng.gen_range(-delta..delta);
            let phi = phi0 + rng.gen_range(-delta..delta);
            let env = ctx.orbit_env(&z)?;
            let (p, q) = env.from_action_angle(3, act, phi)?;
            if !ctx.system.in_domain(p, q, &z) {
                return Err(Error::OutsideDomain { p, q, z });
            }
            if ctx.system.energy(p, q, &z) <= 0.0 {
                return Err(Error::Precondition(format!(
                    "sample box leaves G3 at z={z:?}, I={act}, phi={phi}"
                )));
            }
            Ok((z, act, phi, p, q))
        })
        .collect();
    rows.into_iter().collect()
}

fn median(values: &mut Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Run the capture ensemble. Returns the aggregate report and the
/// per-trajectory rows (in sample order, independent of thread count).
pub fn run_capture_experiment(
    ctx: &SepCtx,
    spec: &EnsembleSpec,
) -> Result<(EnsembleReport, Vec<SampleRecord>)> {
    spec.validate()?;
    let (p0, q0, z0) = (&spec.base.0, &spec.base.1, spec.base.2.clone());
    let h0 = ctx.system.energy(*p0, *q0, &z0);
    if h0 <= 0.0 {
        return Err(Error::Precondition(format!(
            "base point has h0 = {h0} <= 0, not in G3"
        )));
    }
    // slow-time horizon generous enough for the base crossing
    let tau_max_avg = spec
        .tau_max
        .unwrap_or_else(|| spec.eps.iter().cloned().fold(f64::MAX, f64::min) * spec.t_span);
    let avg = integrate_averaged(ctx, h0, &z0, (0.0, tau_max_avg), None)?;
    let crossing = avg.crossing.clone().ok_or_else(|| {
        Error::Precondition(format!(
            "base averaged solution does not cross within tau = {tau_max_avg}; \
             extend t_span / tau_max"
        ))
    })?;

    let samples = sample_initials(ctx, (*p0, *q0, &z0), spec.delta, spec.n, spec.seed)?;

    let mut per_eps = Vec::new();
    let mut all_rows = Vec::new();
    for &eps in &spec.eps {
        let t_end = spec
            .tau_max
            .map(|tm| (tm / eps).min(spec.t_span))
            .unwrap_or(spec.t_span);
        let rows: Vec<SampleRecord> = samples
            .par_iter()
            .enumerate()
            .map(|(id, (z, act, phi, p, q))| {
                run_one(ctx, spec, eps, t_end, id, z, *act, *phi, *p, *q)
            })
            .collect();

        let mut n1 = 0;
        let mut n2 = 0;
        let mut incomplete = 0;
        let mut checked = 0;
        let mut agree = 0;
        let mut excluded = 0;
        let mut pre_errs = Vec::new();
        let mut post_errs = Vec::new();
        for r in &rows {
            match r.destination {
                Some(1) => n1 += 1,
                Some(2) => n2 += 1,
                _ => incomplete += 1,
            }
            if r.destination.is_some() {
                if let (Some(m), Some(a), Some(hp), Some(zp)) =
                    (r.margin, r.agreement, r.h_prime, r.z_drawn.first().copied().or(Some(0.0)))
                {
                    let _ = (hp, zp);
                    let (.., t3) = ctx
                        .theta_at(r.z_prime_or(&z0))
                        .unwrap_or((1.0, 1.0, 2.0));
                    let floor = ctx.params.predictor_margin_factor * eps.powf(1.5) * t3;
                    if m < floor {
                        excluded += 1;
                    } else {
                        checked += 1;
                        if a {
                            agree += 1;
                        }
                    }
                }
            }
            if let Some(v) = r.pre_err {
                pre_errs.push(v);
            }
            if let Some(v) = r.post_err {
                post_errs.push(v);
            }
        }
        let frac1 = n1 as f64 / spec.n as f64;
        let frac2 = n2 as f64 / spec.n as f64;
        let se = (frac1 * (1.0 - frac1) / spec.n as f64).sqrt();
        let shape = spec.delta + eps * eps.ln().abs() / spec.delta;
        per_eps.push(EpsReport {
            eps,
            n: spec.n,
            n1,
            n2,
            incomplete,
            frac1,
            frac2,
            binom_se: se,
            budget_shape: shape,
            k4_fit: (frac1 - crossing.p1).abs() / shape,
            predictor: PredictorStats {
                checked,
                agree,
                excluded,
            },
            median_pre_err: median(&mut pre_errs),
            median_post_err: median(&mut post_errs),
        });
        all_rows.extend(rows);
    }

    Ok((
        EnsembleReport {
            base: spec.base.clone(),
            h0,
            delta: spec.delta,
            n: spec.n,
            seed: spec.seed,
            tau_star: crossing.tau_star,
            z_star: crossing.z_star.clone(),
            p1: crossing.p1,
            p2: crossing.p2,
            per_eps,
        },
        all_rows,
    ))
}

impl SampleRecord {
    fn z_prime_or<'a>(&'a self, fallback: &'a [f64]) -> &'a [f64] {
        if self.z_prime_store.is_empty() {
            fallback
        } else {
            &self.z_prime_store
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_one(
    ctx: &SepCtx,
    spec: &EnsembleSpec,
    eps: f64,
    t_end: f64,
    id: usize,
    z: &[f64],
    act: f64,
    phi: f64,
    p: f64,
    q: f64,
) -> SampleRecord {
    let mut rec = SampleRecord {
        id,
        z_drawn: z.to_vec(),
        action_drawn: act,
        phi_drawn: phi,
        initial: (p, q, z.to_vec()),
        destination: None,
        t_minus: None,
        t_plus: None,
        h_prime: None,
        predicted: None,
        agreement: None,
        margin: None,
        pre_err: None,
        post_err: None,
        incomplete_reason: None,
        z_prime_store: Vec::new(),
    };
    let opts = SimOptions {
        t_span: (0.0, t_end),
        sample_stride: if spec.with_error_metrics { 4 } else { 0 },
        stop_at_capture: !spec.with_error_metrics,
        track_energy_integral: false,
    };
    let traj = match integrate_full(ctx, p, q, z, eps, &opts) {
        Ok(t) => t,
        Err(e) => {
            rec.incomplete_reason = Some(format!("integration failed: {e}"));
            return rec;
        }
    };
    match classify_capture(ctx, &traj) {
        Ok(c) if c.complete => {
            rec.destination = c.destination;
            rec.t_minus = c.t_minus;
            rec.t_plus = c.t_plus;
            rec.h_prime = c.h_prime;
            rec.predicted = c.predicted;
            rec.agreement = c.agreement;
            rec.margin = c.margin;
            if let Some(zp) = c.z_prime {
                rec.z_prime_store = zp;
            }
        }
        Ok(_) => {
            rec.incomplete_reason = Some(match traj.outcome {
                crate::sim::SimOutcome::Escaped { t } => format!("escaped the domain at t = {t}"),
                _ => "no crossing within t_span".to_string(),
            });
            return rec;
        }
        Err(e) => {
            rec.incomplete_reason = Some(format!("classification failed: {e}"));
            return rec;
        }
    }
    if spec.with_error_metrics {
        let h_i = ctx.system.energy(p, q, z);
        let tau_hi = eps * t_end;
        match integrate_averaged(ctx, h_i, z, (0.0, tau_hi), None) {
            Ok(avg_i) => {
                if let Some(nu) = rec.destination {
                    match compare_to_averaged(ctx, &traj, &avg_i, nu) {
                        Ok(m) => {
                            rec.pre_err = Some(m.pre_sup);
                            rec.post_err = Some(m.post_sup_weighted);
                        }
                        Err(e) => {
                            rec.incomplete_reason = Some(format!("metrics failed: {e}"));
                        }
                    }
                }
            }
            Err(e) => {
                rec.incomplete_reason = Some(format!("per-sample averaged failed: {e}"));
            }
        }
    }
    rec
}

// ---------------------------------------------------------------------------
// scaling sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ScalingRow {
    pub eps: f64,
    pub n_used: usize,
    pub median_pre: f64,
    pub median_post: f64,
    /// median_post / (eps |ln eps|)
    pub post_normalised: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    /// log-log slope of median_pre against eps
    pub pre_slope: f64,
    pub pre_slope_residual: f64,
    /// spread of the normalised post error across the ladder
    pub post_ratio_max_min: f64,
    /// least-squares constants pre ~ C eps and post ~ C eps |ln eps|
    pub c_pre: f64,
    pub c_post: f64,
    pub ensemble: EnsembleReport,
}

/// Accuracy-scaling sweep over an eps ladder: per-trajectory sup deviations
/// from per-sample averaged solutions, medians per eps, and the fitted
/// scaling exponents.
pub fn error_scaling_sweep(
    ctx: &SepCtx,
    spec: &EnsembleSpec,
) -> Result<(ScalingReport, Vec<SampleRecord>)> {
    if spec.eps.len() < 4 {
        return Err(Error::Config("scaling sweep needs an eps ladder of >= 4".into()));
    }
    if spec.n < 20 {
        return Err(Error::Config("scaling sweep needs >= 20 trajectories per eps".into()));
    }
    let mut spec = spec.clone();
    spec.with_error_metrics = true;
    let (report, rows) = run_capture_experiment(ctx, &spec)?;

    let mut srows = Vec::new();
    for er in &report.per_eps {
        let (pre, post) = (er.median_pre_err, er.median_post_err);
        let (pre, post) = match (pre, post) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Geometry(format!(
                    "no usable error metrics at eps = {}",
                    er.eps
                )))
            }
        };
        srows.push(ScalingRow {
            eps: er.eps,
            n_used: er.n - er.incomplete,
            median_pre: pre,
            median_post: post,
            post_normalised: post / (er.eps * er.eps.ln().abs()),
        });
    }
    // log-log fit of the pre-crossing error
    let n = srows.len() as f64;
    let mx = srows.iter().map(|r| r.eps.ln()).sum::<f64>() / n;
    let my = srows.iter().map(|r| r.median_pre.ln()).sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for r in &srows {
        num += (r.eps.ln() - mx) * (r.median_pre.ln() - my);
        den += (r.eps.ln() - mx) * (r.eps.ln() - mx);
    }
    let slope = num / den;
    let icept = my - slope * mx;
    let mut resid = 0.0;
    for r in &srows {
        let e = r.median_pre.ln() - (slope * r.eps.ln() + icept);
        resid += e * e;
    }
    resid = (resid / n).sqrt();
    let post_max = srows.iter().map(|r| r.post_normalised).fold(0.0f64, f64::max);
    let post_min = srows
        .iter()
        .map(|r| r.post_normalised)
        .fold(f64::INFINITY, f64::min);
    let c_pre = srows.iter().map(|r| r.median_pre / r.eps).sum::<f64>() / n;
    let c_post = srows.iter().map(|r| r.post_normalised).sum::<f64>() / n;

    Ok((
        ScalingReport {
            rows: srows,
            pre_slope: slope,
            pre_slope_residual: resid,
            post_ratio_max_min: post_max / post_min,
            c_pre,
            c_post,
            ensemble: report,
        },
        rows,
    ))
}

// ---------------------------------------------------------------------------
// the eps-sweep probability diagnostic
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct AnosovReport {
    pub eps0: f64,
    pub m: usize,
    pub n1: usize,
    pub n2: usize,
    pub incomplete: usize,
    pub frac1: f64,
    pub frac2: f64,
    /// P1 at the base-point crossing (the averaged system is eps-free)
    pub p1_pred: f64,
    pub binom_se: f64,
}

/// Sweep eps over (eps0/2, eps0] at a fixed initial point and record the
/// capture fractions. Diagnostic: the capture probability read off a sweep
/// in the perturbation strength rather than in initial conditions.
pub fn anosov_sweep(
    ctx: &SepCtx,
    base: (f64, f64, &[f64]),
    eps0: f64,
    m: usize,
    seed: u64,
    t_span: f64,
) -> Result<AnosovReport> {
    if m == 0 {
        return Err(Error::Config("anosov sweep needs M > 0 samples".into()));
    }
    if eps0 <= 0.0 {
        return Err(Error::Config("eps0 must be positive".into()));
    }
    let (p0, q0, z0) = base;
    let h0 = ctx.system.energy(p0, q0, z0);
    if h0 <= 0.0 {
        return Err(Error::Precondition("base point not in G3".into()));
    }
    let avg = integrate_averaged(ctx, h0, z0, (0.0, eps0 * t_span), None)?;
    let crossing = avg
        .crossing
        .ok_or_else(|| Error::Precondition("base solution does not cross in t_span".into()))?;

    let outcomes: Vec<Option<u8>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(seed ^ 0xA905_EC17, i as u64);
            let eps = eps0 * rng.gen_range(0.5..1.0f64);
            let opts = SimOptions {
                t_span: (0.0, (eps0 / eps) * t_span),
                sample_stride: 0,
                stop_at_capture: true,
                track_energy_integral: false,
            };
            match integrate_full(ctx, p0, q0, z0, eps, &opts) {
                Ok(traj) => traj.destination,
                Err(_) => None,
            }
        })
        .collect();

    let n1 = outcomes.iter().filter(|d| **d == Some(1)).count();
    let n2 = outcomes.iter().filter(|d| **d == Some(2)).count();
    let incomplete = m - n1 - n2;
    let frac1 = n1 as f64 / m as f64;
    Ok(AnosovReport {
        eps0,
        m,
        n1,
        n2,
        incomplete,
        frac1,
        frac2: n2 as f64 / m as f64,
        p1_pred: crossing.p1,
        binom_se: (frac1 * (1.0 - frac1) / m as f64).sqrt(),
    })
}

// base-point averaged solution reuse for tests
pub fn base_averaged(ctx: &SepCtx, base: (f64, f64, &[f64]), tau_hi: f64) -> Result<AveragedSolution> {
    let h0 = ctx.system.energy(base.0, base.1, base.2);
    integrate_averaged(ctx, h0, base.2, (0.0, tau_hi), None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelPreset;
    use crate::params::NumericParams;
    use std::sync::OnceLock;

    fn ctx_slow() -> &'static SepCtx {
        static CTX: OnceLock<SepCtx> = OnceLock::new();
        CTX.get_or_init(|| {
            let sys = ModelPreset::new("dw-slow").with("gamma", 0.2).instantiate().unwrap();
            SepCtx::new(&sys, &NumericParams::default()).unwrap()
        })
    }

    fn base() -> (f64, f64, Vec<f64>) {
        (0.6f64.sqrt(), 0.0, vec![1.0])
    }

    #[test]
    fn samples_inside_box_and_converge_with_delta() {
        let ctx = ctx_slow();
        let (p0, q0, z0) = base();
        let env = ctx.orbit_env(&z0).unwrap();
        let (_, i0, phi0) = env.to_action_angle(p0, q0).unwrap();
        let delta = 0.05;
        let rows = sample_initials(ctx, (p0, q0, &z0), delta, 200, 42).unwrap();
        for (z, act, phi, p, q) in &rows {
            assert!((z[0] - z0[0]).abs() < delta);
            assert!((act - i0).abs() < delta);
            assert!((phi - phi0).abs() < delta);
            // mapped point reproduces the drawn coordinates
            let envz = ctx.orbit_env(z).unwrap();
            let (nu, i_back, phi_back) = envz.to_action_angle(*p, *q).unwrap();
            assert_eq!(nu, 3);
            assert!((i_back - act).abs() < 1e-7);
            let dphi = (phi_back - phi).abs();
            assert!(dphi.min(std::f64::consts::TAU - dphi) < 1e-6);
        }
        // delta -> 0 collapses onto the base point
        let tiny = sample_initials(ctx, (p0, q0, &z0), 1e-9, 20, 42).unwrap();
        for (_, _, _, p, q) in &tiny {
            assert!(((p - p0).powi(2) + (q - q0).powi(2)).sqrt() < 1e-6);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_uniform() {
        let ctx = ctx_slow();
        let (p0, q0, z0) = base();
        let a = sample_initials(ctx, (p0, q0, &z0), 0.05, 500, 7).unwrap();
        let b = sample_initials(ctx, (p0, q0, &z0), 0.05, 500, 7).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.1.to_bits(), y.1.to_bits());
            assert_eq!(x.3.to_bits(), y.3.to_bits());
        }
        // chi-square uniformity over 4^3 sub-boxes at the 1% level
        let env = ctx.orbit_env(&z0).unwrap();
        let (_, i0, phi0) = env.to_action_angle(p0, q0).unwrap();
        let delta = 0.05;
        let n = 10_000;
        let rows = sample_initials(ctx, (p0, q0, &z0), delta, n, 11).unwrap();
        let mut bins = vec![0usize; 64];
        let cell = |v: f64, c: f64| -> usize {
            (((v - (c - delta)) / (2.0 * delta) * 4.0) as usize).min(3)
        };
        for (z, act, phi, _, _) in &rows {
            let idx = cell(z[0], z0[0]) * 16 + cell(*act, i0) * 4 + cell(*phi, phi0);
            bins[idx] += 1;
        }
        let exp = n as f64 / 64.0;
        let chi2: f64 = bins.iter().map(|&o| (o as f64 - exp).powi(2) / exp).sum();
        // chi-square 99th percentile with 63 dof
        assert!(chi2 < 92.01, "chi2 = {chi2}");
    }

    #[test]
    fn spec_validation() {
        let mut spec = EnsembleSpec {
            base: base(),
            delta: 0.05,
            eps: vec![1e-3],
            n: 10,
            seed: 1,
            t_span: 100.0,
            tau_max: None,
            with_error_metrics: false,
        };
        assert!(spec.validate().is_ok());
        spec.eps = vec![0.01]; // violates eps < delta^2
        assert!(spec.validate().is_err());
        spec.eps = vec![1e-3];
        spec.n = 0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn small_symmetric_ensemble_splits_evenly() {
        let ctx = ctx_slow();
        let spec = EnsembleSpec {
            base: base(),
            delta: 0.05,
            eps: vec![2e-3],
            n: 120,
            seed: 20260810,
            t_span: 500.0,
            tau_max: Some(0.9),
            with_error_metrics: false,
        };
        let (report, rows) = run_capture_experiment(ctx, &spec).unwrap();
        assert_eq!(rows.len(), 120);
        let er = &report.per_eps[0];
        assert_eq!(er.n1 + er.n2 + er.incomplete, 120);
        assert!(er.incomplete <= 2, "incomplete = {}", er.incomplete);
        // symmetric model: P = 1/2; 120 samples give se ~ 0.046
        assert!((report.p1 - 0.5).abs() < 1e-6);
        assert!(
            (er.frac1 - 0.5).abs() < 0.15,
            "frac1 = {} (se {})",
            er.frac1,
            er.binom_se
        );
        // sub-box consistency: octant counts reproduce the totals exactly
        let env = ctx.orbit_env(&spec.base.2).unwrap();
        let (_, i0, phi0) = env.to_action_angle(spec.base.0, spec.base.1).unwrap();
        let mut oct = [[0usize; 2]; 8];
        for r in &rows {
            let b = |v: f64, c: f64| usize::from(v >= c);
            let o = b(r.z_drawn[0], 1.0) * 4 + b(r.action_drawn, i0) * 2 + b(r.phi_drawn, phi0);
            match r.destination {
                Some(1) => oct[o][0] += 1,
                Some(2) => oct[o][1] += 1,
                _ => {}
            }
        }
        let s1: usize = oct.iter().map(|c| c[0]).sum();
        let s2: usize = oct.iter().map(|c| c[1]).sum();
        assert_eq!(s1, er.n1);
        assert_eq!(s2, er.n2);
    }

    #[test]
    fn report_is_bit_reproducible() {
        let ctx = ctx_slow();
        let spec = EnsembleSpec {
            base: base(),
            delta: 0.05,
            eps: vec![2e-3],
            n: 40,
            seed: 99,
            t_span: 500.0,
            tau_max: Some(0.9),
            with_error_metrics: false,
        };
        let (r1, rows1) = run_capture_experiment(ctx, &spec).unwrap();
        let (r2, rows2) = run_capture_experiment(ctx, &spec).unwrap();
        let j1 = serde_json::to_string(&r1).unwrap();
        let j2 = serde_json::to_string(&r2).unwrap();
        assert_eq!(j1, j2);
        assert_eq!(
            serde_json::to_string(&rows1).unwrap(),
            serde_json::to_string(&rows2).unwrap()
        );
    }

    #[test]
    fn anosov_sweep_symmetric() {
        let ctx = ctx_slow();
        let (p0, q0, z0) = base();
        let rep = anosov_sweep(ctx, (p0, q0, &z0), 2e-3, 60, 5, 500.0).unwrap();
        assert_eq!(rep.n1 + rep.n2 + rep.incomplete, 60);
        assert!(rep.incomplete <= 2);
        assert!((rep.p1_pred - 0.5).abs() < 1e-6);
        assert!((rep.frac1 - 0.5).abs() < 0.22, "frac1 = {}", rep.frac1);
        assert!(anosov_sweep(ctx, (p0, q0, &z0), 2e-3, 0, 5, 500.0).is_err());
    }
}
