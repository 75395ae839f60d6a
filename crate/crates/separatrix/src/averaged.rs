//! The averaged system in slow time tau = eps t,
//!
//!   dh/dtau = (1/T) loop_int(E_q f1 + E_p f2 + E_z . f3) dt,
//!   dz/dtau = (1/T) loop_int(f3) dt,
//!
//! extended by continuity to the separatrix (dh = 0, dz = f3 at C on h = 0)
//! and glued across it: the sheet Sigma_3 meets Sigma_1 and Sigma_2 along
//! h = 0, a crossing solution leaves Sigma_3 at (tau_*, z_*) and continues
//! into either loop sheet.
//!
//! Away from the separatrix the rates come from level-orbit quadrature.
//! Inside a thin band |h| <= h_switch the integrator switches to the regular
//! variable u = 2 pi I - S_nu(z), whose rate tends to -Theta_nu(z); the band
//! is thin enough (1e-6 S3 by default) that the dropped O(h ln h) corrections
//! sit below the integration tolerance. Crossing location is a root of u.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ZVec;
use crate::ode::{refine_root, Dopri5, OdeSystem, StepControl};
use crate::params::NumericParams;
use crate::theta::SepCtx;

#[derive(Debug, Clone)]
pub struct AveragedState {
    pub nu: u8,
    pub h: f64,
    pub z: Vec<f64>,
    pub tau: f64,
}

#[derive(Debug, Clone)]
struct Sample {
    tau: f64,
    h: f64,
    dh: f64,
    z: ZVec,
    dz: ZVec,
}

/// One averaged branch (fixed region), dense in tau via cubic Hermite.
#[derive(Debug, Clone)]
pub struct Branch {
    pub nu: u8,
    samples: Vec<Sample>,
    /// set when the branch stopped before the requested tau end
    pub truncated: Option<String>,
}

impl Branch {
    pub fn tau_range(&self) -> (f64, f64) {
        (
            self.samples.first().map(|s| s.tau).unwrap_or(0.0),
            self.samples.last().map(|s| s.tau).unwrap_or(0.0),
        )
    }

    pub fn is_empty(&self) -> bool {
        self.samples.len() < 2
    }

    /// (h, z) at tau, or None outside the branch range.
    pub fn eval(&self, tau: f64) -> Option<(f64, ZVec)> {
        let n = self.samples.len();
        if n < 2 {
            return None;
        }
        let (lo, hi) = self.tau_range();
        if tau < lo - 1e-12 || tau > hi + 1e-12 {
            return None;
        }
        let tau = tau.clamp(lo, hi);
        let mut a = 0usize;
        let mut b = n - 1;
        while b - a > 1 {
            let m = (a + b) / 2;
            if self.samples[m].tau <= tau {
                a = m;
            } else {
                b = m;
            }
        }
        let s0 = &self.samples[a];
        let s1 = &self.samples[b];
        if s1.tau == s0.tau {
            let mut z = ZVec::new();
            for v in s0.z.iter() {
                z.push(*v);
            }
            return Some((s0.h, z));
        }
        let h = crate::interp::hermite(s0.tau, s0.h, s0.dh, s1.tau, s1.h, s1.dh, tau);
        let mut z = ZVec::new();
        for i in 0..s0.z.len() {
            z.push(crate::interp::hermite(
                s0.tau, s0.z[i], s0.dz[i], s1.tau, s1.z[i], s1.dz[i], tau,
            ));
        }
        Some((h, z))
    }

    /// Raw (tau, h, z) samples, for CSV emission.
    pub fn rows(&self) -> impl Iterator<Item = (f64, f64, &[f64])> {
        self.samples.iter().map(|s| (s.tau, s.h, s.z.as_slice()))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CrossingRecord {
    pub tau_star: f64,
    pub z_star: Vec<f64>,
    pub p1: f64,
    pub p2: f64,
    /// estimate of the tau_* localisation error
    pub tau_star_error: f64,
}

/// A glued averaged solution: the branch of the initial region, the crossing
/// record, and (for solutions that cross) both post-crossing branches —
/// which one applies is the consumer's choice.
#[derive(Debug, Clone)]
pub struct AveragedSolution {
    pub initial: Branch,
    pub crossing: Option<CrossingRecord>,
    pub post: Option<[Branch; 2]>,
    pub tau_span: (f64, f64),
}

impl AveragedSolution {
    /// H_nu(tau), Z_nu(tau): the initial branch before the crossing, the
    /// region-nu branch after it.
    pub fn eval_glued(&self, tau: f64, nu: u8) -> Option<(f64, ZVec)> {
        match (&self.crossing, &self.post) {
            (Some(c), Some(post)) if tau > c.tau_star => post[(nu - 1) as usize].eval(tau),
            _ => self.initial.eval(tau),
        }
    }

    /// Full state snapshot at tau on the glued solution with post branch nu.
    pub fn state_at(&self, tau: f64, nu: u8) -> Option<AveragedState> {
        let (h, z) = self.eval_glued(tau, nu)?;
        let on_post = matches!(&self.crossing, Some(c) if tau > c.tau_star);
        Some(AveragedState {
            nu: if on_post { nu } else { self.initial.nu },
            h,
            z: z.to_vec(),
            tau,
        })
    }

    /// Action J(tau) on the given branch: orbit quadrature outside the band,
    /// the u-form (S_nu(z) + u)/2pi inside.
    pub fn action_at(&self, ctx: &SepCtx, tau: f64, nu: u8) -> Result<f64> {
        let (h, z) = self
            .eval_glued(tau, nu)
            .ok_or_else(|| Error::Precondition(format!("tau {tau} outside solution range")))?;
        let branch_nu = match &self.crossing {
            Some(c) if tau > c.tau_star => nu,
            _ => self.initial.nu,
        };
        action_of(ctx, h, &z, branch_nu)
    }

    /// The post-crossing action anchor: J extrapolated to tau_*+ along the
    /// region-nu branch (from the first point outside the switch band, using
    /// du/dtau = -Theta_nu), paired with S_nu(z_*) / 2 pi.
    pub fn post_action_anchor(&self, ctx: &SepCtx, nu: u8) -> Result<(f64, f64)> {
        let c = self
            .crossing
            .as_ref()
            .ok_or_else(|| Error::Precondition("solution has no crossing".into()))?;
        let post = self
            .post
            .as_ref()
            .ok_or_else(|| Error::Precondition("solution has no post branches".into()))?;
        let branch = &post[(nu - 1) as usize];
        let mut probe = None;
        for (tau, h, z) in branch.rows() {
            let hs = ctx.h_switch_at(z)?;
            if h.abs() >= hs {
                probe = Some((tau, h, z.to_vec()));
                break;
            }
        }
        let (tau_e, h_e, z_e) =
            probe.ok_or_else(|| Error::Geometry("post branch never left the band".into()))?;
        let j_e = action_of(ctx, h_e, &z_e, nu)?;
        let (t1, t2, t3) = ctx.theta_at(&z_e)?;
        let th = match nu {
            1 => t1,
            2 => t2,
            _ => t3,
        };
        // u = 2 pi J - S_nu(z) has rate -Theta_nu; extrapolate u back to tau_*
        let two_pi = std::f64::consts::TAU;
        let u_e = two_pi * j_e - ctx.area_at(&z_e, nu)?;
        let s_star = ctx.area_at(&c.z_star, nu)? / two_pi;
        let j_star = s_star + (u_e + th * (tau_e - c.tau_star)) / two_pi;
        Ok((j_star, s_star))
    }
}

/// I(h, z) in region nu via orbit quadrature, or the asymptotic u-form
/// inside the switch band (where level orbits are refused).
pub fn action_of(ctx: &SepCtx, h: f64, z: &[f64], nu: u8) -> Result<f64> {
    let two_pi = std::f64::consts::TAU;
    let hs = ctx.h_switch_at(z)?;
    if h.abs() >= hs {
        let env = ctx.orbit_env(z)?;
        Ok(env.orbit_core(h, nu, &[], None)?.area / two_pi)
    } else {
        let s = ctx.area_at(z, nu)?;
        Ok((s + u_of_h(ctx, z, nu, h)?) / two_pi)
    }
}

// ---------------------------------------------------------------------------
// the right-hand sides
// ---------------------------------------------------------------------------

/// Slow-time averaged rates (dh/dtau, dz/dtau) in region nu; quadrature
/// outside the switch band, the Theta/T asymptotic form inside, and the
/// continuity values (0, f3 at C) exactly on h = 0.
pub fn averaged_rhs(ctx: &SepCtx, nu: u8, h: f64, z: &[f64]) -> Result<(f64, ZVec)> {
    if h == 0.0 {
        return Ok((0.0, ctx.f3c_at(z)?));
    }
    match nu {
        3 if h < 0.0 => {
            return Err(Error::RegionMismatch {
                h,
                nu,
                msg: "averaged sheet Sigma_3 requires h >= 0".into(),
            })
        }
        1 | 2 if h > 0.0 => {
            return Err(Error::RegionMismatch {
                h,
                nu,
                msg: "averaged sheets Sigma_1,2 require h <= 0".into(),
            })
        }
        _ => {}
    }
    let hs = ctx.h_switch_at(z)?;
    if h.abs() < hs {
        return band_rhs(ctx, nu, h, z);
    }
    quad_rhs(ctx, nu, h, z)
}

fn quad_rhs(ctx: &SepCtx, nu: u8, h: f64, z: &[f64]) -> Result<(f64, ZVec)> {
    let env = ctx.orbit_env(z)?;
    // guard for stage evaluations that dip below the well energy
    if nu != 3 {
        let hw = env.h_well[(nu - 1) as usize];
        if h <= hw + 8.0 * ctx.params.h_min {
            return Ok((0.0, ctx.f3c_at(z)?));
        }
    }
    let sysc = ctx.system.clone();
    let g_e = move |p: f64, q: f64, zz: &[f64]| sysc.energy_rate_integrand(p, q, zz);
    let dimz = ctx.system.dim_z();
    let mut fns: Vec<Box<dyn Fn(f64, f64, &[f64]) -> f64 + Sync>> = Vec::new();
    for i in 0..dimz {
        let sysc = ctx.system.clone();
        fns.push(Box::new(move |p: f64, q: f64, zz: &[f64]| {
            sysc.perturbation(p, q, zz, 0.0).f3[i]
        }));
    }
    let mut extras: Vec<crate::geometry::TimeIntegrand> = Vec::with_capacity(1 + dimz);
    extras.push(&g_e);
    for f in &fns {
        extras.push(f.as_ref());
    }
    let core = env.orbit_core(h, nu, &extras, None)?;
    let t = core.period;
    let dh = core.extras[0] / t;
    let mut dz = ZVec::new();
    for i in 0..dimz {
        dz.push(core.extras[1 + i] / t);
    }
    Ok((dh, dz))
}

fn band_rhs(ctx: &SepCtx, nu: u8, h: f64, z: &[f64]) -> Result<(f64, ZVec)> {
    let (t1, t2, t3) = ctx.theta_at(z)?;
    let th = match nu {
        1 => t1,
        2 => t2,
        _ => t3,
    };
    let t = t_fit(ctx, z, nu, h)?;
    Ok((-th / t, ctx.f3c_at(z)?))
}

/// Asymptotic period: T = -(2a) ln h + b3 outside, -(a) ln|h| + b_nu in a loop.
fn t_fit(ctx: &SepCtx, z: &[f64], nu: u8, h: f64) -> Result<f64> {
    let a = 1.0 / ctx.omega0_at(z)?;
    let b = ctx.b_at(z, nu)?;
    let slope = if nu == 3 { 2.0 * a } else { a };
    Ok((-slope * h.abs().ln() + b).max(1e-6))
}

/// u = 2 pi I - S_nu(z) in the asymptotic band: the integral of T from 0 to h.
pub fn u_of_h(ctx: &SepCtx, z: &[f64], nu: u8, h: f64) -> Result<f64> {
    if h == 0.0 {
        return Ok(0.0);
    }
    let a = 1.0 / ctx.omega0_at(z)?;
    let b = ctx.b_at(z, nu)?;
    let m = h.abs();
    Ok(if nu == 3 {
        h * (-2.0 * a * m.ln() + 2.0 * a + b)
    } else {
        -m * (a * (1.0 - m.ln()) + b)
    })
}

/// Inverse of `u_of_h` (monotone in h), used to report H(tau) in the band.
pub fn h_of_u(ctx: &SepCtx, z: &[f64], nu: u8, u: f64) -> Result<f64> {
    if u == 0.0 {
        return Ok(0.0);
    }
    if nu == 3 && u < 0.0 || nu != 3 && u > 0.0 {
        return Err(Error::Precondition(format!(
            "u = {u} has the wrong sign for region {nu}"
        )));
    }
    let hs = ctx.h_switch_at(z)?;
    let sign = if nu == 3 { 1.0 } else { -1.0 };
    let (mut lo, mut hi) = (0.0f64, 2.0 * hs);
    let mut guard = 0;
    while u_of_h(ctx, z, nu, sign * hi)?.abs() < u.abs() {
        hi *= 2.0;
        guard += 1;
        if guard > 60 {
            return Err(Error::Geometry("h_of_u bracket expansion failed".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if hi - lo < 1e-18 + 1e-14 * hs {
            break;
        }
        if u_of_h(ctx, z, nu, sign * mid)?.abs() < u.abs() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(sign * 0.5 * (lo + hi))
}

// ODE adapters ---------------------------------------------------------------

struct QuadSys<'a> {
    ctx: &'a SepCtx,
    nu: u8,
}

impl OdeSystem for QuadSys<'_> {
    fn dim(&self) -> usize {
        1 + self.ctx.system.dim_z()
    }
    fn rhs(&self, _tau: f64, y: &[f64], dy: &mut [f64]) {
        let (h, z) = (y[0], &y[1..]);
        let sign = if self.nu == 3 { 1.0 } else { -1.0 };
        let h_eff = if h * sign <= 0.0 {
            sign * self.ctx.params.h_min
        } else {
            h
        };
        match averaged_rhs(self.ctx, self.nu, h_eff, z) {
            Ok((dh, dz)) => {
                dy[0] = dh;
                for i in 0..dz.len() {
                    dy[1 + i] = dz[i];
                }
            }
            Err(_) => {
                // stage evaluation outside the valid sheet; freeze h, keep z moving
                dy[0] = 0.0;
                if let Ok(f3) = self.ctx.f3c_at(z) {
                    for i in 0..f3.len() {
                        dy[1 + i] = f3[i];
                    }
                } else {
                    for v in dy.iter_mut().skip(1) {
                        *v = 0.0;
                    }
                }
            }
        }
    }
}

struct BandSys<'a> {
    ctx: &'a SepCtx,
    nu: u8,
}

impl OdeSystem for BandSys<'_> {
    fn dim(&self) -> usize {
        1 + self.ctx.system.dim_z()
    }
    fn rhs(&self, _tau: f64, y: &[f64], dy: &mut [f64]) {
        let z = &y[1..];
        let th = match self.ctx.theta_at(z) {
            Ok((t1, t2, t3)) => match self.nu {
                1 => t1,
                2 => t2,
                _ => t3,
            },
            Err(_) => 0.0,
        };
        dy[0] = -th;
        match self.ctx.f3c_at(z) {
            Ok(f3) => {
                for i in 0..f3.len() {
                    dy[1 + i] = f3[i];
                }
            }
            Err(_) => {
                for v in dy.iter_mut().skip(1) {
                    *v = 0.0;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// the glued integration
// ---------------------------------------------------------------------------

fn solver_for(params: &NumericParams) -> Dopri5 {
    Dopri5 {
        rtol: params.avg_rtol,
        atol: params.avg_atol,
        ..Default::default()
    }
}

fn push_sample(ctx: &SepCtx, br: &mut Branch, tau: f64, h: f64, z: &[f64]) {
    let (dh, dz) = averaged_rhs(ctx, br.nu, h, z).unwrap_or_else(|_| {
        let mut zv = ZVec::new();
        for _ in z {
            zv.push(0.0);
        }
        (0.0, zv)
    });
    let mut zv = ZVec::new();
    for &v in z {
        zv.push(v);
    }
    br.samples.push(Sample { tau, h, dh, z: zv, dz });
}

/// Integrate the averaged system from (h0, z0) over `tau_span`.
///
/// For h0 > 0 the solution lives on Sigma_3; if it reaches the separatrix
/// the crossing (tau_*, z_*) is located in the regular variable u and both
/// post-crossing branches are produced. For h0 < 0 pass `nu0` (1 or 2); the
/// solution then stays on that sheet (it moves away from the separatrix).
pub fn integrate_averaged(
    ctx: &SepCtx,
    h0: f64,
    z0: &[f64],
    tau_span: (f64, f64),
    nu0: Option<u8>,
) -> Result<AveragedSolution> {
    integrate_averaged_with(ctx, h0, z0, tau_span, nu0, &ctx.params)
}

/// Same as [`integrate_averaged`] with explicit numeric parameters (used to
/// probe tolerance robustness).
pub fn integrate_averaged_with(
    ctx: &SepCtx,
    h0: f64,
    z0: &[f64],
    tau_span: (f64, f64),
    nu0: Option<u8>,
    params: &NumericParams,
) -> Result<AveragedSolution> {
    let (tau0, tau_end) = tau_span;
    if !(tau_end > tau0) {
        return Err(Error::Precondition("tau span must be increasing".into()));
    }
    {
        let b = ctx.system.domain_box();
        if !z0.iter().zip(&b.z).all(|(&v, &(lo, hi))| v >= lo && v <= hi) {
            return Err(Error::OutsideDomain {
                p: f64::NAN,
                q: f64::NAN,
                z: z0.to_vec(),
            });
        }
    }

    if h0 < 0.0 {
        let nu = nu0.ok_or_else(|| {
            Error::Precondition("h0 < 0 needs an explicit starting region nu0".into())
        })?;
        if nu != 1 && nu != 2 {
            return Err(Error::Precondition(format!("nu0 = {nu} not in {{1, 2}}")));
        }
        let hs = ctx.h_switch_at(z0)?;
        if h0.abs() < hs {
            return Err(Error::Precondition(format!(
                "|h0| = {:e} inside the switch band {hs:e}; start outside it",
                h0.abs()
            )));
        }
        let mut br = Branch {
            nu,
            samples: Vec::new(),
            truncated: None,
        };
        integrate_quad_phase(ctx, params, &mut br, h0, z0, tau0, tau_end, None)?;
        return Ok(AveragedSolution {
            initial: br,
            crossing: None,
            post: None,
            tau_span,
        });
    }
    if h0 == 0.0 {
        return Err(Error::Precondition(
            "h0 = 0 is the crossing itself; start from a post-crossing branch".into(),
        ));
    }

    // --- Sigma_3 phase ---
    let mut pre = Branch {
        nu: 3,
        samples: Vec::new(),
        truncated: None,
    };
    let hs0 = ctx.h_switch_at(z0)?;
    let band_state: (f64, f64, Vec<f64>);
    if h0 > hs0 {
        let hit = integrate_quad_phase(
            ctx,
            params,
            &mut pre,
            h0,
            z0,
            tau0,
            tau_end,
            Some(SwitchEvent::EnterBand),
        )?;
        match hit {
            PhaseEnd::Event { tau, h, z } => {
                band_state = (tau, u_of_h(ctx, &z, 3, h)?, z);
            }
            PhaseEnd::TauEnd | PhaseEnd::Truncated => {
                return Ok(AveragedSolution {
                    initial: pre,
                    crossing: None,
                    post: None,
                    tau_span,
                });
            }
        }
    } else {
        band_state = (tau0, u_of_h(ctx, z0, 3, h0)?, z0.to_vec());
        let h_entry = h_of_u(ctx, z0, 3, band_state.1)?;
        push_sample(ctx, &mut pre, tau0, h_entry, z0);
    }

    // --- band descent in u; crossing at the root of u ---
    let (tau_b, u_b, z_b) = band_state;
    let sys = BandSys { ctx, nu: 3 };
    let solver = solver_for(params);
    let mut y0 = vec![u_b];
    y0.extend_from_slice(&z_b);
    let mut crossing: Option<(f64, Vec<f64>)> = None;
    let out = solver.solve(&sys, tau_b, &y0, tau_end, |dense, ynew| {
        if ynew[0] <= 0.0 {
            let u0 = dense.component(dense.t0, 0);
            let root = refine_root(
                |t| dense.component(t, 0),
                dense.t0,
                dense.t1,
                u0,
                ynew[0],
                1e-14 * (1.0 + dense.t1.abs()),
            );
            let st = dense.eval(root);
            crossing = Some((root, st[1..].to_vec()));
            return StepControl::Stop(root);
        }
        StepControl::Continue
    })?;
    let (tau_star, z_star) = match crossing {
        Some(c) => c,
        None => {
            let z_f = out.y[1..].to_vec();
            let h_f = h_of_u(ctx, &z_f, 3, out.y[0])?;
            push_sample(ctx, &mut pre, out.t, h_f, &z_f);
            pre.truncated = Some("tau span ended inside the switch band".into());
            return Ok(AveragedSolution {
                initial: pre,
                crossing: None,
                post: None,
                tau_span,
            });
        }
    };
    push_sample(ctx, &mut pre, tau_star, 0.0, &z_star);

    let (p1, p2) = ctx.probabilities_at(&z_star)?;
    let hs_star = ctx.h_switch_at(&z_star)?;
    let (_, _, t3_star) = ctx.theta_at(&z_star)?;
    let tau_star_error = 20.0 * params.avg_rtol * (1.0 + (tau_star - tau0).abs())
        + 2.0 * (u_b.abs() / t3_star) * hs_star * hs_star.ln().abs();
    let record = CrossingRecord {
        tau_star,
        z_star: z_star.clone(),
        p1,
        p2,
        tau_star_error,
    };

    let post1 = post_branch_from(ctx, params, tau_star, &z_star, 1, tau_end)?;
    let post2 = post_branch_from(ctx, params, tau_star, &z_star, 2, tau_end)?;

    Ok(AveragedSolution {
        initial: pre,
        crossing: Some(record),
        post: Some([post1, post2]),
        tau_span,
    })
}

/// The unique averaged solution leaving the separatrix at (tau_*, z_*) into
/// region nu, integrated to tau_end.
pub fn post_branch_from(
    ctx: &SepCtx,
    params: &NumericParams,
    tau_star: f64,
    z_star: &[f64],
    nu: u8,
    tau_end: f64,
) -> Result<Branch> {
    let mut br = Branch {
        nu,
        samples: Vec::new(),
        truncated: None,
    };
    push_sample(ctx, &mut br, tau_star, 0.0, z_star);
    if tau_end <= tau_star {
        return Ok(br);
    }

    // in-band descent of u from 0 until |h| = h_switch
    let sys = BandSys { ctx, nu };
    let solver = solver_for(params);
    let mut y0 = vec![0.0];
    y0.extend_from_slice(z_star);
    let mut exit: Option<(f64, Vec<f64>)> = None;
    let event = |y: &[f64]| -> Result<f64> {
        let z = &y[1..];
        let hs = ctx.h_switch_at(z)?;
        Ok(y[0] - u_of_h(ctx, z, nu, -hs)?)
    };
    let out = solver.solve(&sys, tau_star, &y0, tau_end, |dense, ynew| {
        let f1 = match event(ynew) {
            Ok(v) => v,
            Err(_) => return StepControl::Stop(dense.t1),
        };
        if f1 <= 0.0 {
            let f = |t: f64| event(&dense.eval(t)).unwrap_or(0.0);
            let f0 = f(dense.t0);
            let root = refine_root(f, dense.t0, dense.t1, f0, f1, 1e-14 * (1.0 + dense.t1.abs()));
            let st = dense.eval(root);
            exit = Some((root, st[1..].to_vec()));
            return StepControl::Stop(root);
        }
        StepControl::Continue
    })?;
    let (tau_x, z_x) = match exit {
        Some(e) => e,
        None => {
            let z_f = out.y[1..].to_vec();
            let h_f = h_of_u(ctx, &z_f, nu, out.y[0])?;
            push_sample(ctx, &mut br, out.t, h_f, &z_f);
            br.truncated = Some("tau span ended inside the switch band".into());
            return Ok(br);
        }
    };
    let hs_x = ctx.h_switch_at(&z_x)?;
    let h_x = -hs_x;
    if tau_x >= tau_end {
        push_sample(ctx, &mut br, tau_x, h_x, &z_x);
        return Ok(br);
    }
    integrate_quad_phase(ctx, params, &mut br, h_x, &z_x, tau_x, tau_end, None)?;
    Ok(br)
}

enum SwitchEvent {
    EnterBand,
}

enum PhaseEnd {
    Event { tau: f64, h: f64, z: Vec<f64> },
    TauEnd,
    Truncated,
}

#[allow(clippy::too_many_arguments)]
fn integrate_quad_phase(
    ctx: &SepCtx,
    params: &NumericParams,
    br: &mut Branch,
    h0: f64,
    z0: &[f64],
    tau0: f64,
    tau_end: f64,
    switch: Option<SwitchEvent>,
) -> Result<PhaseEnd> {
    let nu = br.nu;
    let sys = QuadSys { ctx, nu };
    let solver = solver_for(params);
    let mut y0 = vec![h0];
    y0.extend_from_slice(z0);
    push_sample(ctx, br, tau0, h0, z0);

    let mut result = PhaseEnd::TauEnd;
    let zbox = ctx.system.domain_box().z;
    let out = solver.solve(&sys, tau0, &y0, tau_end, |dense, ynew| {
        let (h, z) = (ynew[0], &ynew[1..]);
        if !z.iter().zip(&zbox).all(|(&v, &(lo, hi))| v >= lo && v <= hi) {
            result = PhaseEnd::Truncated;
            return StepControl::Stop(dense.t1);
        }
        if let Some(SwitchEvent::EnterBand) = switch {
            let ev = |t: f64| -> f64 {
                let st = dense.eval(t);
                let hs = ctx.h_switch_at(&st[1..]).unwrap_or(f64::INFINITY);
                st[0] - hs
            };
            let f1 = ev(dense.t1);
            if f1 <= 0.0 {
                let f0 = ev(dense.t0);
                let root =
                    refine_root(ev, dense.t0, dense.t1, f0, f1, 1e-14 * (1.0 + dense.t1.abs()));
                let st = dense.eval(root);
                result = PhaseEnd::Event {
                    tau: root,
                    h: st[0],
                    z: st[1..].to_vec(),
                };
                return StepControl::Stop(root);
            }
        } else if nu != 3 {
            // stop gracefully when the branch approaches the well bottom
            if let Ok(env) = ctx.orbit_env(z) {
                let hw = env.h_well[(nu - 1) as usize];
                if h <= hw + 1e-6 * env.energy_scale {
                    result = PhaseEnd::Truncated;
                    return StepControl::Stop(dense.t1);
                }
            }
        }
        push_sample(ctx, br, dense.t1, h, z);
        StepControl::Continue
    })?;
    match &result {
        PhaseEnd::Event { tau, h, z } => {
            push_sample(ctx, br, *tau, *h, z);
        }
        PhaseEnd::TauEnd => {
            let z = out.y[1..].to_vec();
            push_sample(ctx, br, out.t, out.y[0], &z);
        }
        PhaseEnd::Truncated => {
            let z = out.y[1..].to_vec();
            push_sample(ctx, br, out.t, out.y[0], &z);
            br.truncated = Some("left the admissible region".into());
        }
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// action rate and the distance check
// ---------------------------------------------------------------------------

/// dI/dt along the averaged flow (fast time): the two-term expression
/// combining the energy decrement and the slow-drift contribution.
pub fn action_rate(ctx: &SepCtx, h: f64, z: &[f64], nu: u8, eps: f64) -> Result<f64> {
    let env = ctx.orbit_env(z)?;
    let dimz = ctx.system.dim_z();
    let sysc = ctx.system.clone();
    let g_e = move |p: f64, q: f64, zz: &[f64]| sysc.energy_rate_integrand(p, q, zz);
    let mut fns: Vec<Box<dyn Fn(f64, f64, &[f64]) -> f64 + Sync>> = Vec::new();
    for i in 0..dimz {
        let sysc = ctx.system.clone();
        fns.push(Box::new(move |p: f64, q: f64, zz: &[f64]| {
            sysc.grad(p, q, zz).de_dz[i]
        }));
        let sysc = ctx.system.clone();
        fns.push(Box::new(move |p: f64, q: f64, zz: &[f64]| {
            sysc.perturbation(p, q, zz, 0.0).f3[i]
        }));
    }
    let mut extras: Vec<crate::geometry::TimeIntegrand> = Vec::with_capacity(1 + 2 * dimz);
    extras.push(&g_e);
    for f in &fns {
        extras.push(f.as_ref());
    }
    let core = env.orbit_core(h, nu, &extras, None)?;
    let mut cross = 0.0;
    for i in 0..dimz {
        cross += core.extras[1 + 2 * i] * core.extras[2 + 2 * i];
    }
    Ok(eps * (core.extras[0] - cross / core.period) / std::f64::consts::TAU)
}

#[derive(Debug, Clone, Serialize)]
pub struct DistanceReport {
    pub tau0: f64,
    pub gap0: f64,
    pub delta: f64,
    /// fitted constant: max over tau of separation / bound shape
    pub c_fit: f64,
    pub samples: usize,
}

/// Check that two same-region averaged branches separate no faster than the
/// shape delta + delta |ln delta| / (1 + |ln |H||). Diagnostic, not a proof.
pub fn averaged_distance_check(
    a: &Branch,
    b: &Branch,
    delta: f64,
    params: &NumericParams,
) -> Result<DistanceReport> {
    if a.nu != b.nu {
        return Err(Error::Precondition(
            "branches live in different regions".into(),
        ));
    }
    if delta <= 0.0 || delta > params.delta_max {
        return Err(Error::HypothesisNotMet(format!(
            "delta = {delta} outside (0, {}]",
            params.delta_max
        )));
    }
    let (lo_a, hi_a) = a.tau_range();
    let (lo_b, hi_b) = b.tau_range();
    let lo = lo_a.max(lo_b);
    let hi = hi_a.min(hi_b);
    if !(hi > lo) {
        return Err(Error::HypothesisNotMet(
            "branches do not overlap in tau".into(),
        ));
    }
    let n = 400;
    let gap_at = |tau: f64| -> Option<(f64, f64, f64)> {
        let (ha, za) = a.eval(tau)?;
        let (hb, zb) = b.eval(tau)?;
        let mut dz = 0.0;
        for i in 0..za.len() {
            dz += (za[i] - zb[i]).abs();
        }
        Some((ha, hb, dz))
    };
    // hypothesis: some tau0 with |H| + |H'| + |Z - Z'| < delta
    let mut found = None;
    for i in 0..=n {
        let tau = lo + (hi - lo) * i as f64 / n as f64;
        if let Some((ha, hb, dz)) = gap_at(tau) {
            let gap = ha.abs() + hb.abs() + dz;
            if gap < delta {
                found = Some((tau, gap));
                break;
            }
        }
    }
    let (tau0, gap0) = found.ok_or_else(|| {
        Error::HypothesisNotMet(format!("no tau with |H|+|H'|+|Z-Z'| < delta = {delta}"))
    })?;

    let lnd = delta.ln().abs();
    let mut c_fit: f64 = 0.0;
    let mut count = 0;
    for i in 0..=n {
        let tau = tau0 + (hi - tau0) * i as f64 / n as f64;
        if let Some((ha, hb, dz)) = gap_at(tau) {
            let sep = (ha - hb).abs() + dz;
            let shape = delta + delta * lnd / (1.0 + ha.abs().max(1e-300).ln().abs());
            c_fit = c_fit.max(sep / shape);
            count += 1;
        }
    }
    Ok(DistanceReport {
        tau0,
        gap0,
        delta,
        c_fit,
        samples: count,
    })
}
