//! Full perturbed simulation: adaptive integration of
//!
//!   q' = dE/dp + eps f1,  p' = -dE/dq + eps f2,  z' = eps f3,
//!
//! with arc-length step caps through the saddle neighbourhood, section
//! events on the ray C-eta, capture-band thresholds t_-, t_+ and region
//! classification, the pseudo-crossing interval predictor, and deviation
//! metrics against a glued averaged solution.

use serde::Serialize;

use crate::averaged::AveragedSolution;
use crate::error::{Error, Result};
use crate::geometry::Region;
use crate::model::ZVec;
use crate::ode::{refine_root, Dopri5, OdeSystem, StepControl};
use crate::theta::SepCtx;

#[derive(Debug, Clone)]
pub struct TrajSample {
    pub t: f64,
    pub p: f64,
    pub q: f64,
    pub z: ZVec,
    pub h: f64,
}

#[derive(Debug, Clone)]
pub struct EtaEvent {
    pub t: f64,
    pub h: f64,
    pub z: ZVec,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum SimOutcome {
    /// integrated the whole requested span
    SpanEnd,
    /// stopped at the capture threshold t_+
    CapturedStop,
    /// left the domain box
    Escaped { t: f64 },
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub eps: f64,
    pub t_span: (f64, f64),
    /// stored samples (stride-thinned accepted steps); empty when not stored
    pub samples: Vec<TrajSample>,
    /// section crossings of the eta ray inside the saddle neighbourhood
    pub eta_events: Vec<EtaEvent>,
    /// first time h <= kappa_plus * eps
    pub t_minus: Option<f64>,
    /// first time h <= -kappa_minus * eps
    pub t_plus: Option<f64>,
    /// region at t_plus
    pub destination: Option<u8>,
    pub outcome: SimOutcome,
    /// final state
    pub end: TrajSample,
    /// accumulated integral of dE/dt / eps along the path (energy bookkeeping),
    /// sampled with `samples`; present when requested
    pub energy_integral: Option<Vec<f64>>,
}

impl Trajectory {
    /// Last section event at or before t_plus: the pre-crossing energy h'.
    pub fn last_eta_before_capture(&self) -> Option<&EtaEvent> {
        let t_plus = self.t_plus?;
        self.eta_events.iter().rev().find(|e| e.t <= t_plus)
    }

    /// Action series I(h, z) at the stored samples where defined (|h| above
    /// the floor and outside the switch band); None entries inside the band.
    pub fn action_series(&self, ctx: &SepCtx) -> Vec<Option<f64>> {
        self.samples
            .iter()
            .map(|s| {
                let nu = match ctx.detect_region(s.p, s.q, &s.z) {
                    Region::G(v) => v,
                    Region::Boundary => return None,
                };
                let hs = ctx.h_switch_at(&s.z).ok()?;
                if s.h.abs() < hs.max(ctx.params.h_min) {
                    return None;
                }
                let env = ctx.orbit_env(&s.z).ok()?;
                env.orbit_core(s.h, nu, &[], None)
                    .ok()
                    .map(|c| c.area / std::f64::consts::TAU)
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SimOptions {
    pub t_span: (f64, f64),
    /// store every k-th accepted step (0 = store nothing)
    pub sample_stride: usize,
    /// stop as soon as t_plus is located
    pub stop_at_capture: bool,
    /// carry the energy-bookkeeping integral
    pub track_energy_integral: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            t_span: (0.0, 100.0),
            sample_stride: 1,
            stop_at_capture: false,
            track_energy_integral: false,
        }
    }
}

struct PerturbedSys<'a> {
    ctx: &'a SepCtx,
    eps: f64,
    track_energy: bool,
}

impl OdeSystem for PerturbedSys<'_> {
    fn dim(&self) -> usize {
        2 + self.ctx.system.dim_z() + usize::from(self.track_energy)
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
        let (p, q) = (y[0], y[1]);
        let dimz = self.ctx.system.dim_z();
        let z = &y[2..2 + dimz];
        let sys = &self.ctx.system;
        let g = sys.grad(p, q, z);
        let f = sys.perturbation(p, q, z, self.eps);
        dy[0] = -g.de_dq + self.eps * f.f2;
        dy[1] = g.de_dp + self.eps * f.f1;
        for i in 0..dimz {
            dy[2 + i] = self.eps * f.f3[i];
        }
        if self.track_energy {
            let mut v = g.de_dq * f.f1 + g.de_dp * f.f2;
            for (a, b) in g.de_dz.iter().zip(f.f3.iter()) {
                v += a * b;
            }
            dy[2 + dimz] = v;
        }
    }

    fn max_step(&self, _t: f64, y: &[f64]) -> f64 {
        // arc-length cap through the saddle neighbourhood: the velocity
        // vanishes at C and uniform-time steps would jump the passage
        let dimz = self.ctx.system.dim_z();
        let z = &y[2..2 + dimz];
        let frame = match self.ctx.frame_at(z) {
            Ok(f) => f,
            Err(_) => return f64::INFINITY,
        };
        let d = frame.dist(y[0], y[1]);
        let radius = self.ctx.section_radius_at(z);
        if d >= radius {
            return f64::INFINITY;
        }
        let g = self.ctx.system.grad(y[0], y[1], z);
        let f = self.ctx.system.perturbation(y[0], y[1], z, self.eps);
        let vp = -g.de_dq + self.eps * f.f2;
        let vq = g.de_dp + self.eps * f.f1;
        let speed = (vp * vp + vq * vq).sqrt().max(1e-300);
        (0.25 * d / speed).max(1e-12)
    }
}

/// Integrate the perturbed system, resolving section events and the capture
/// thresholds. eps = 0 is allowed (unperturbed runs for diagnostics).
pub fn integrate_full(
    ctx: &SepCtx,
    p0: f64,
    q0: f64,
    z0: &[f64],
    eps: f64,
    opts: &SimOptions,
) -> Result<Trajectory> {
    if eps < 0.0 {
        return Err(Error::Precondition("eps must be >= 0".into()));
    }
    if !ctx.system.in_domain(p0, q0, z0) {
        return Err(Error::OutsideDomain {
            p: p0,
            q: q0,
            z: z0.to_vec(),
        });
    }
    let dimz = ctx.system.dim_z();
    let sys = PerturbedSys {
        ctx,
        eps,
        track_energy: opts.track_energy_integral,
    };
    let solver = Dopri5 {
        rtol: ctx.params.sim_rtol,
        atol: ctx.params.sim_atol,
        ..Default::default()
    };
    let mut y0 = vec![p0, q0];
    y0.extend_from_slice(z0);
    if opts.track_energy_integral {
        y0.push(0.0);
    }

    let kp = ctx.params.kappa_plus * eps;
    let km = ctx.params.kappa_minus * eps;
    let h0 = ctx.system.energy(p0, q0, z0);
    let sample_of = |t: f64, y: &[f64]| -> TrajSample {
        let z: ZVec = y[2..2 + dimz].iter().copied().collect();
        TrajSample {
            t,
            p: y[0],
            q: y[1],
            z,
            h: ctx.system.energy(y[0], y[1], &y[2..2 + dimz]),
        }
    };

    let mut traj = Trajectory {
        eps,
        t_span: opts.t_span,
        samples: Vec::new(),
        eta_events: Vec::new(),
        t_minus: if eps > 0.0 && h0 <= kp { Some(opts.t_span.0) } else { None },
        t_plus: None,
        destination: None,
        outcome: SimOutcome::SpanEnd,
        end: sample_of(opts.t_span.0, &y0),
        energy_integral: if opts.track_energy_integral {
            Some(Vec::new())
        } else {
            None
        },
    };
    if opts.sample_stride > 0 {
        traj.samples.push(sample_of(opts.t_span.0, &y0));
        if let Some(acc) = traj.energy_integral.as_mut() {
            acc.push(0.0);
        }
    }

    let mut h_prev = h0;
    let mut xi_prev: Option<f64> = None;
    let mut step_count = 0usize;
    let mut stop_reason: Option<SimOutcome> = None;

    let energy_at = |dense: &crate::ode::DenseStep, t: f64| -> f64 {
        let st = dense.eval(t);
        ctx.system.energy(st[0], st[1], &st[2..2 + dimz])
    };

    let out = solver.solve(&sys, opts.t_span.0, &y0, opts.t_span.1, |dense, ynew| {
        step_count += 1;
        let z_new = &ynew[2..2 + dimz];
        if !ctx.system.in_domain(ynew[0], ynew[1], z_new) {
            stop_reason = Some(SimOutcome::Escaped { t: dense.t1 });
            return StepControl::Stop(dense.t1);
        }
        let h_new = ctx.system.energy(ynew[0], ynew[1], z_new);

        // section events: xi crosses + -> - with eta > 0 near the saddle
        if let Ok(frame) = ctx.frame_at(z_new) {
            let radius = ctx.section_radius_at(z_new);
            let near = frame.dist(ynew[0], ynew[1]) < radius;
            let xi_new = frame.xi_of(ynew[0], ynew[1]);
            if let Some(xp) = xi_prev {
                if near && xp > 0.0 && xi_new <= 0.0 {
                    let root = refine_root(
                        |t| {
                            let st = dense.eval(t);
                            frame.xi_of(st[0], st[1])
                        },
                        dense.t0,
                        dense.t1,
                        xp,
                        xi_new,
                        1e-12 * (1.0 + dense.t1.abs()),
                    );
                    let st = dense.eval(root);
                    if frame.eta_of(st[0], st[1]) > 0.0
                        && frame.dist(st[0], st[1]) < radius
                    {
                        let z: ZVec = st[2..2 + dimz].iter().copied().collect();
                        traj.eta_events.push(EtaEvent {
                            t: root,
                            h: ctx.system.energy(st[0], st[1], &st[2..2 + dimz]),
                            z,
                        });
                    }
                }
            }
            xi_prev = Some(xi_new);
        }

        // capture-band thresholds (perturbed runs only)
        if eps > 0.0 {
            if traj.t_minus.is_none() && h_prev > kp && h_new <= kp {
                let root = refine_root(
                    |t| energy_at(dense, t) - kp,
                    dense.t0,
                    dense.t1,
                    h_prev - kp,
                    h_new - kp,
                    1e-12 * (1.0 + dense.t1.abs()),
                );
                traj.t_minus = Some(root);
            }
            if traj.t_plus.is_none() && h_prev > -km && h_new <= -km {
                let root = refine_root(
                    |t| energy_at(dense, t) + km,
                    dense.t0,
                    dense.t1,
                    h_prev + km,
                    h_new + km,
                    1e-12 * (1.0 + dense.t1.abs()),
                );
                let st = dense.eval(root);
                traj.t_plus = Some(root);
                traj.destination = Some(ctx.system.loop_side(st[0], st[1], &st[2..2 + dimz]));
                if opts.stop_at_capture {
                    stop_reason = Some(SimOutcome::CapturedStop);
                    return StepControl::Stop(root);
                }
            }
        }
        h_prev = h_new;

        if opts.sample_stride > 0 && step_count % opts.sample_stride == 0 {
            traj.samples.push(sample_of(dense.t1, ynew));
            if let Some(acc) = traj.energy_integral.as_mut() {
                acc.push(ynew[2 + dimz]);
            }
        }
        StepControl::Continue
    })?;

    traj.end = sample_of(out.t, &out.y);
    if opts.sample_stride > 0 {
        if traj.samples.last().map(|s| s.t) != Some(out.t) {
            traj.samples.push(traj.end.clone());
            if let Some(acc) = traj.energy_integral.as_mut() {
                acc.push(out.y[2 + dimz]);
            }
        }
    }
    if let Some(r) = stop_reason {
        traj.outcome = r;
    }
    Ok(traj)
}

// ---------------------------------------------------------------------------
// capture classification and the pseudo-crossing predictor
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PseudoPrediction {
    /// h' in (0, eps Theta2) -> G2, or (eps Theta2, eps Theta3) -> G1
    Capture(u8),
    /// h' > eps Theta3: one more round, back to the section
    Continue,
}

/// Interval rule on the pre-crossing section energy h'.
pub fn predict_capture_pseudo(
    ctx: &SepCtx,
    h_prime: f64,
    z_prime: &[f64],
    eps: f64,
) -> Result<PseudoPrediction> {
    if h_prime <= 0.0 {
        return Err(Error::Precondition(format!(
            "h' = {h_prime} is already below the separatrix"
        )));
    }
    let (t1, t2, t3) = ctx.theta_at(z_prime)?;
    let _ = t1;
    Ok(if h_prime < eps * t2 {
        PseudoPrediction::Capture(2)
    } else if h_prime < eps * t3 {
        PseudoPrediction::Capture(1)
    } else {
        PseudoPrediction::Continue
    })
}

/// Distance of h' to the nearest interval endpoint {0, eps Theta2, eps Theta3},
/// used to exclude borderline samples (the eps^(3/2)-scale margins).
pub fn pseudo_margin(ctx: &SepCtx, h_prime: f64, z_prime: &[f64], eps: f64) -> Result<f64> {
    let (_t1, t2, t3) = ctx.theta_at(z_prime)?;
    Ok((h_prime)
        .abs()
        .min((h_prime - eps * t2).abs())
        .min((h_prime - eps * t3).abs()))
}

#[derive(Debug, Clone, Serialize)]
pub struct CaptureRecord {
    pub complete: bool,
    pub destination: Option<u8>,
    pub t_minus: Option<f64>,
    pub t_plus: Option<f64>,
    /// energy at the last section event before t_plus
    pub h_prime: Option<f64>,
    pub z_prime: Option<Vec<f64>>,
    pub predicted: Option<PseudoPrediction>,
    /// predictor prediction == actual destination
    pub agreement: Option<bool>,
    /// |h' - nearest interval endpoint|, for margin exclusion
    pub margin: Option<f64>,
}

/// Assemble the capture record of a finished trajectory: thresholds,
/// destination, pre-crossing section energy and predictor agreement.
pub fn classify_capture(ctx: &SepCtx, traj: &Trajectory) -> Result<CaptureRecord> {
    let complete = traj.t_plus.is_some();
    let mut rec = CaptureRecord {
        complete,
        destination: traj.destination,
        t_minus: traj.t_minus,
        t_plus: traj.t_plus,
        h_prime: None,
        z_prime: None,
        predicted: None,
        agreement: None,
        margin: None,
    };
    if !complete {
        return Ok(rec);
    }
    if let (Some(tm), Some(tp)) = (traj.t_minus, traj.t_plus) {
        if tm >= tp {
            return Err(Error::Geometry(format!(
                "threshold times out of order: t_- = {tm}, t_+ = {tp}"
            )));
        }
    }
    if let Some(ev) = traj.last_eta_before_capture() {
        if ev.h > 0.0 {
            rec.h_prime = Some(ev.h);
            rec.z_prime = Some(ev.z.to_vec());
            let pred = predict_capture_pseudo(ctx, ev.h, &ev.z, traj.eps)?;
            rec.margin = Some(pseudo_margin(ctx, ev.h, &ev.z, traj.eps)?);
            rec.agreement = Some(match pred {
                PseudoPrediction::Capture(nu) => Some(nu) == traj.destination,
                PseudoPrediction::Continue => false,
            });
            rec.predicted = Some(pred);
        }
    }
    Ok(rec)
}

// ---------------------------------------------------------------------------
// deviation from the averaged solution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct VsAveragedMetrics {
    /// sup over eps t <= tau_* of |h - H| + |z - Z|
    pub pre_sup: f64,
    /// sup over eps t > tau_* of (|h - H_nu| + |z - Z_nu|)(1 + |ln |H_nu||)
    pub post_sup_weighted: f64,
    pub n_pre: usize,
    pub n_post: usize,
}

/// Deviation of a stored trajectory from the glued averaged solution with
/// post-crossing branch nu (must match the trajectory's destination).
pub fn compare_to_averaged(
    ctx: &SepCtx,
    traj: &Trajectory,
    avg: &AveragedSolution,
    nu: u8,
) -> Result<VsAveragedMetrics> {
    if traj.samples.is_empty() {
        return Err(Error::Precondition(
            "trajectory was run without stored samples".into(),
        ));
    }
    if traj.eps > 0.0 {
        if let Some(dest) = traj.destination {
            if dest != nu {
                return Err(Error::Precondition(format!(
                    "destination mismatch: trajectory entered G{dest}, compared against G{nu}"
                )));
            }
        }
    }
    let tau_star = avg.crossing.as_ref().map(|c| c.tau_star);
    let mut pre: f64 = 0.0;
    let mut post: f64 = 0.0;
    let mut n_pre = 0;
    let mut n_post = 0;
    for s in &traj.samples {
        let tau = traj.eps * s.t;
        let Some((hh, zz)) = avg.eval_glued(tau, nu) else {
            continue;
        };
        let mut dev = (s.h - hh).abs();
        for i in 0..zz.len() {
            dev += (s.z[i] - zz[i]).abs();
        }
        match tau_star {
            Some(ts) if tau > ts => {
                let hs = ctx.h_switch_at(&s.z).unwrap_or(0.0);
                if hh.abs() <= hs {
                    continue; // inside the switch band the weight is singular
                }
                let w = 1.0 + hh.abs().ln().abs();
                post = post.max(dev * w);
                n_post += 1;
            }
            _ => {
                pre = pre.max(dev);
                n_pre += 1;
            }
        }
    }
    Ok(VsAveragedMetrics {
        pre_sup: pre,
        post_sup_weighted: post,
        n_pre,
        n_post,
    })
}
