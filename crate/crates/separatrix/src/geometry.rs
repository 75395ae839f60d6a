//! Unperturbed geometry: the saddle frame, separatrix loops, level orbits,
//! periods, actions, action-angle coordinates and the logarithmic period
//! asymptotics T = -(1/w0) ln|h| + b per loop (twice the slope outside).
//!
//! Curve integrals are accumulated *during* the trace as extra ODE
//! components, so their accuracy is set by the integrator tolerance and not
//! by the polyline resolution. Separatrix integrals use arc length as the
//! independent variable; the integrand of a time integral over a loop is
//! then g/|grad E|, which extends continuously to the saddle because the
//! normalisation makes g vanish there.

use crate::error::{Error, Result};
use crate::model::{System, ZVec};
use crate::ode::{refine_root, Dopri5, OdeSystem, StepControl};
use crate::params::NumericParams;

pub type TimeIntegrand<'a> = &'a (dyn Fn(f64, f64, &[f64]) -> f64 + Sync);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    G(u8),
    Boundary,
}

/// Principal-axes frame of the saddle point C(z).
///
/// `eta_axis` spans the E > 0 directions, `xi_axis` the E < 0 directions
/// (Hessian eigenvectors). Orientation convention: `xi_axis` points into the
/// side of loop 1, and the ray C + s*eta_axis (s > 0) is the section from
/// which the unperturbed flow rounds loop 2 first — the order assumed by the
/// pseudo-crossing probability rule.
#[derive(Debug, Clone)]
pub struct SaddleFrame {
    pub z: ZVec,
    pub c: (f64, f64),
    pub omega0: f64,
    pub xi_axis: (f64, f64),
    pub eta_axis: (f64, f64),
    pub unstable: (f64, f64),
    pub stable: (f64, f64),
    pub hess: [[f64; 2]; 2],
}

impl SaddleFrame {
    pub fn xi_of(&self, p: f64, q: f64) -> f64 {
        (p - self.c.0) * self.xi_axis.0 + (q - self.c.1) * self.xi_axis.1
    }
    pub fn eta_of(&self, p: f64, q: f64) -> f64 {
        (p - self.c.0) * self.eta_axis.0 + (q - self.c.1) * self.eta_axis.1
    }
    pub fn dist(&self, p: f64, q: f64) -> f64 {
        let dp = p - self.c.0;
        let dq = q - self.c.1;
        (dp * dp + dq * dq).sqrt()
    }
}

fn sym_eig(h: [[f64; 2]; 2]) -> ((f64, (f64, f64)), (f64, (f64, f64))) {
    let (a, b, c) = (h[0][0], h[0][1], h[1][1]);
    let m = 0.5 * (a + c);
    let r = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let (lp, lm) = (m + r, m - r);
    let vec_for = |l: f64| -> (f64, f64) {
        let v1 = (b, l - a);
        let v2 = (l - c, b);
        let n1 = (v1.0 * v1.0 + v1.1 * v1.1).sqrt();
        let n2 = (v2.0 * v2.0 + v2.1 * v2.1).sqrt();
        let v = if n1 >= n2 {
            (v1.0 / n1, v1.1 / n1)
        } else {
            (v2.0 / n2, v2.1 / n2)
        };
        v
    };
    ((lp, vec_for(lp)), ((lm), vec_for(lm)))
}

/// Newton-refine the saddle at z and build its oriented principal frame.
pub fn locate_saddle(system: &System, z: &[f64], guess: (f64, f64)) -> Result<SaddleFrame> {
    let ((p, q), hess) = crate::model::critical_point_newton(system, z, guess, 1e-13)?;
    let det = hess[0][0] * hess[1][1] - hess[0][1] * hess[1][0];
    if det >= 0.0 {
        return Err(Error::NotASaddle(format!(
            "critical point ({p}, {q}) at z={z:?}: det(Hess) = {det:e} >= 0"
        )));
    }
    let omega0 = (-det).sqrt();
    let ((lp, mut eta), (lm, mut xi)) = sym_eig(hess);
    debug_assert!(lp > 0.0 && lm < 0.0);

    // orientation probes
    let diam = system.domain_box().pq_diameter();
    let r = 1e-4 * diam;
    // xi points into the loop-1 side (E < 0 there)
    let probe = (p + r * xi.0, q + r * xi.1);
    if system.energy(probe.0, probe.1, z) >= 0.0 {
        return Err(Error::Geometry(format!(
            "xi probe at distance {r:e} has E >= 0; saddle frame ill-conditioned"
        )));
    }
    if system.loop_side(probe.0, probe.1, z) != 1 {
        xi = (-xi.0, -xi.1);
    }
    // from the eta ray the flow must move towards -xi (so it rounds loop 2 first)
    let pe = (p + r * eta.0, q + r * eta.1);
    let g = system.grad(pe.0, pe.1, z);
    let vel = (-g.de_dq, g.de_dp);
    if vel.0 * xi.0 + vel.1 * xi.1 > 0.0 {
        eta = (-eta.0, -eta.1);
    }

    // eigenvectors of the linearised flow J = [[-Epq, -Eqq], [Epp, Epq]]
    let a11 = -hess[0][1];
    let a12 = -hess[1][1];
    let a21 = hess[0][0];
    let a22 = hess[0][1];
    let eigvec = |l: f64| -> (f64, f64) {
        let v1 = (a12, l - a11);
        let v2 = (l - a22, a21);
        let n1 = (v1.0 * v1.0 + v1.1 * v1.1).sqrt();
        let n2 = (v2.0 * v2.0 + v2.1 * v2.1).sqrt();
        if n1 >= n2 {
            (v1.0 / n1, v1.1 / n1)
        } else {
            (v2.0 / n2, v2.1 / n2)
        }
    };
    let unstable = eigvec(omega0);
    let stable = eigvec(-omega0);

    let mut zv = ZVec::new();
    for &v in z {
        zv.push(v);
    }
    Ok(SaddleFrame {
        z: zv,
        c: (p, q),
        omega0,
        xi_axis: xi,
        eta_axis: eta,
        unstable,
        stable,
        hess,
    })
}

// ---------------------------------------------------------------------------
// arc-length separatrix tracer
// ---------------------------------------------------------------------------

struct ArcTracer<'a> {
    system: &'a System,
    z: &'a [f64],
    c: (f64, f64),
    /// gain of the transverse E = 0 stabilisation (exactly orthogonal to the
    /// flow, so it does not perturb the accumulated time integrals)
    kappa: f64,
    ball: f64,
    offset: f64,
    len: f64,
    integrands: &'a [TimeIntegrand<'a>],
}

impl OdeSystem for ArcTracer<'_> {
    fn dim(&self) -> usize {
        2 + self.integrands.len()
    }

    fn rhs(&self, _s: f64, y: &[f64], dy: &mut [f64]) {
        let (p, q) = (y[0], y[1]);
        let g = self.system.grad(p, q, self.z);
        let (vp, vq) = (-g.de_dq, g.de_dp);
        let speed2 = vp * vp + vq * vq;
        let speed = speed2.sqrt().max(1e-300);
        let e = self.system.energy(p, q, self.z);
        // level-set damping with a local gain ~ 1/dist(C): the return to the
        // saddle amplifies any energy residual by dist_entry/dist, so the
        // residual must be pinned hard on the way in. The step cap keeps
        // kappa * ds ~ 3, so this is not stiff.
        let dp = p - self.c.0;
        let dq = q - self.c.1;
        let d = (dp * dp + dq * dq).sqrt();
        let kappa = self.kappa.max(10.0 / d.max(20.0 * self.offset));
        let corr = -kappa * e / speed2;
        dy[0] = vp / speed + corr * g.de_dp;
        dy[1] = vq / speed + corr * g.de_dq;
        for (i, f) in self.integrands.iter().enumerate() {
            dy[2 + i] = f(p, q, self.z) / speed;
        }
    }

    fn max_step(&self, _s: f64, y: &[f64]) -> f64 {
        let dp = y[0] - self.c.0;
        let dq = y[1] - self.c.1;
        let d = (dp * dp + dq * dq).sqrt();
        if d < self.ball {
            (d / 3.0).max(0.5 * self.offset)
        } else {
            (self.len / 50.0).min(0.3 * d)
        }
    }
}

/// One traced separatrix loop, anchored at C on both ends.
#[derive(Debug, Clone)]
pub struct LoopPolyline {
    pub nu: u8,
    /// (arc length from C, p, q)
    pub points: Vec<(f64, f64, f64)>,
    pub arc_length: f64,
    pub diameter: f64,
    pub area: f64,
    /// accumulated time integrals requested by the caller
    pub integrals: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SeparatrixGeometry {
    pub z: ZVec,
    /// loops[0] is l1, loops[1] is l2
    pub loops: [LoopPolyline; 2],
    /// S1, S2, S3 = S1 + S2
    pub areas: [f64; 3],
    pub arc_lengths: [f64; 2],
    /// dS_nu/dz = -loop integral of dE/dz dt, per loop and z component
    pub dsdz: [ZVec; 2],
}

fn trace_branch(
    system: &System,
    frame: &SaddleFrame,
    branch: f64,
    params: &NumericParams,
    extras: &[TimeIntegrand],
) -> Result<LoopPolyline> {
    let z: Vec<f64> = frame.z.to_vec();
    let diam = system.domain_box().pq_diameter();
    let offset = params.sep_offset_frac * diam;
    let capture = params.capture_radius_frac * diam;
    let ball = 0.05 * diam;

    // time-integrands: area first, then dE/dz components, then caller extras
    let dimz = system.dim_z();
    let area_f = move |p: f64, q: f64, zz: &[f64]| -> f64 {
        let g = system.grad(p, q, zz);
        p * g.de_dp
    };
    let mut ints: Vec<TimeIntegrand> = Vec::with_capacity(1 + dimz + extras.len());
    ints.push(&area_f);
    let ez_fns: Vec<Box<dyn Fn(f64, f64, &[f64]) -> f64 + Sync>> = (0..dimz)
        .map(|i| {
            let sysc = system.clone();
            Box::new(move |p: f64, q: f64, zz: &[f64]| sysc.grad(p, q, zz).de_dz[i])
                as Box<dyn Fn(f64, f64, &[f64]) -> f64 + Sync>
        })
        .collect();
    for f in &ez_fns {
        ints.push(f.as_ref());
    }
    for f in extras {
        ints.push(*f);
    }

    let tracer = ArcTracer {
        system,
        z: &z,
        c: frame.c,
        kappa: 10.0 / diam,
        ball,
        offset,
        len: diam,
        integrands: &ints,
    };
    let solver = Dopri5 {
        rtol: params.tracer_rtol,
        atol: params.tracer_atol,
        h_init: Some(offset),
        ..Default::default()
    };

    let start = (
        frame.c.0 + branch * offset * frame.unstable.0,
        frame.c.1 + branch * offset * frame.unstable.1,
    );
    let n_acc = ints.len();
    let mut y0 = vec![start.0, start.1];
    y0.extend(std::iter::repeat(0.0).take(n_acc));

    let mut pts: Vec<(f64, f64, f64)> = vec![(0.0, frame.c.0, frame.c.1)];
    let mut exited = false;
    // capture arms once the trace has genuinely left the saddle, on a scale
    // tied to the capture radius so that small loops work too
    let arm_radius = 100.0 * capture;
    let mut fail: Option<Error> = None;
    let s_max = 60.0 * diam;
    let out = solver.solve(&tracer, 0.0, &y0, s_max, |dense, ynew| {
        let (p, q) = (ynew[0], ynew[1]);
        if !system.in_domain(p, q, &z) {
            fail = Some(Error::Geometry(format!(
                "separatrix trace left the domain at ({p}, {q})"
            )));
            return StepControl::Stop(dense.t1);
        }
        pts.push((dense.t1 + offset, p, q));
        let d = frame.dist(p, q);
        if !exited && d > arm_radius {
            exited = true;
        }
        if exited && d < capture {
            return StepControl::Stop(dense.t1);
        }
        StepControl::Continue
    })?;
    if let Some(e) = fail {
        return Err(e);
    }
    if !out.stopped_by_observer {
        return Err(Error::Geometry(format!(
            "separatrix branch did not return to the saddle within arc length {s_max:.1}"
        )));
    }

    let last = (out.y[0], out.y[1]);
    let d_end = frame.dist(last.0, last.1);
    let s_total = out.t + offset + d_end;
    pts.push((s_total, frame.c.0, frame.c.1));

    // endpoint corrections: the skipped [0, offset] and [s-d_end, s] pieces,
    // rectangle rule with the limit value approximated at the nearest traced
    // point (the integrand of each time integral is g/|v|, continuous at C).
    let val_at = |p: f64, q: f64, f: TimeIntegrand| -> f64 {
        let g = system.grad(p, q, &z);
        let sp = (g.de_dp * g.de_dp + g.de_dq * g.de_dq).sqrt();
        f(p, q, &z) / sp
    };
    let mut integrals = Vec::with_capacity(n_acc);
    for (i, f) in ints.iter().enumerate() {
        let v = out.y[2 + i] + offset * val_at(start.0, start.1, *f)
            + d_end * val_at(last.0, last.1, *f);
        integrals.push(v);
    }

    let area = integrals[0].abs();
    let mut dsdz = ZVec::new();
    for i in 0..dimz {
        dsdz.push(-integrals[1 + i]);
    }
    let extra_vals = integrals[1 + dimz..].to_vec();

    // identify which loop this branch bounds: probe just inside at the
    // point farthest from C
    let far = pts
        .iter()
        .copied()
        .max_by(|a, b| {
            frame
                .dist(a.1, a.2)
                .partial_cmp(&frame.dist(b.1, b.2))
                .unwrap()
        })
        .unwrap();
    let g = system.grad(far.1, far.2, &z);
    let gn = (g.de_dp * g.de_dp + g.de_dq * g.de_dq).sqrt();
    let mut nu = 0u8;
    for k in 1..=6 {
        let step = 1e-4 * k as f64 * diam;
        let probe = (far.1 - step * g.de_dp / gn, far.2 - step * g.de_dq / gn);
        if system.energy(probe.0, probe.1, &z) < 0.0 {
            nu = system.loop_side(probe.0, probe.1, &z);
            break;
        }
    }
    if nu == 0 {
        return Err(Error::Geometry("could not identify the loop interior".into()));
    }

    let mut diameter: f64 = 0.0;
    for w in pts.iter() {
        diameter = diameter.max(2.0 * frame.dist(w.1, w.2));
    }
    // diameter as the max pairwise extent along the axes
    let (mut pmin, mut pmax, mut qmin, mut qmax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for w in pts.iter() {
        pmin = pmin.min(w.1);
        pmax = pmax.max(w.1);
        qmin = qmin.min(w.2);
        qmax = qmax.max(w.2);
    }
    diameter = ((pmax - pmin).powi(2) + (qmax - qmin).powi(2)).sqrt();

    let mut dz_store = ZVec::new();
    for v in dsdz.iter() {
        dz_store.push(*v);
    }

    Ok(LoopPolyline {
        nu,
        points: pts,
        arc_length: s_total,
        diameter,
        area,
        integrals: {
            let mut all = vec![area];
            all.extend(dz_store.iter().copied());
            all.extend(extra_vals);
            all
        },
    })
}

/// Trace both separatrix loops and assemble the loop geometry at z.
pub fn trace_separatrices(
    system: &System,
    frame: &SaddleFrame,
    params: &NumericParams,
) -> Result<SeparatrixGeometry> {
    let a = trace_branch(system, frame, 1.0, params, &[])?;
    let b = trace_branch(system, frame, -1.0, params, &[])?;
    if a.nu == b.nu {
        return Err(Error::Geometry(format!(
            "both branches traced loop {}; phase portrait is not a figure eight",
            a.nu
        )));
    }
    let dimz = system.dim_z();
    let dsdz_of = |l: &LoopPolyline| -> ZVec {
        l.integrals[1..1 + dimz].iter().copied().collect()
    };
    let (l1, l2) = if a.nu == 1 { (a, b) } else { (b, a) };
    let areas = [l1.area, l2.area, l1.area + l2.area];
    let arc_lengths = [l1.arc_length, l2.arc_length];
    let dsdz = [dsdz_of(&l1), dsdz_of(&l2)];
    Ok(SeparatrixGeometry {
        z: frame.z.clone(),
        loops: [l1, l2],
        areas,
        arc_lengths,
        dsdz,
    })
}

/// Trace the separatrix loop bounding region nu.
pub fn trace_separatrix(
    system: &System,
    frame: &SaddleFrame,
    nu: u8,
    params: &NumericParams,
) -> Result<LoopPolyline> {
    let a = trace_branch(system, frame, 1.0, params, &[])?;
    if a.nu == nu {
        return Ok(a);
    }
    let b = trace_branch(system, frame, -1.0, params, &[])?;
    if b.nu == nu {
        return Ok(b);
    }
    Err(Error::Geometry(format!("no branch bounds loop {nu}")))
}

/// Separatrix-loop time integrals of caller integrands (the improper
/// integral in arc-length regularisation): returns one value per integrand.
pub fn separatrix_time_integrals(
    system: &System,
    frame: &SaddleFrame,
    nu: u8,
    params: &NumericParams,
    extras: &[TimeIntegrand],
) -> Result<Vec<f64>> {
    let dimz = system.dim_z();
    for branch in [1.0, -1.0] {
        let l = trace_branch(system, frame, branch, params, extras)?;
        if l.nu == nu {
            return Ok(l.integrals[1 + dimz..].to_vec());
        }
    }
    Err(Error::Geometry(format!("no branch bounds loop {nu}")))
}

/// Trace both loops once, carrying caller integrands; result ordered [l1, l2].
pub(crate) fn trace_loops_with(
    system: &System,
    frame: &SaddleFrame,
    params: &NumericParams,
    extras: &[TimeIntegrand],
) -> Result<[LoopPolyline; 2]> {
    let a = trace_branch(system, frame, 1.0, params, extras)?;
    let b = trace_branch(system, frame, -1.0, params, extras)?;
    if a.nu == b.nu {
        return Err(Error::Geometry(format!(
            "both branches traced loop {}; phase portrait is not a figure eight",
            a.nu
        )));
    }
    Ok(if a.nu == 1 { [a, b] } else { [b, a] })
}

// ---------------------------------------------------------------------------
// unperturbed flow and level orbits
// ---------------------------------------------------------------------------

pub(crate) struct UnperturbedFlow<'a> {
    pub system: &'a System,
    pub z: &'a [f64],
    pub c: (f64, f64),
    pub ball: f64,
    /// energy of the level line; drift towards it is damped per unit arc
    /// length by a correction orthogonal to the flow (the period near the
    /// separatrix is log-sensitive to energy drift, so this matters)
    pub h_target: f64,
    /// damping per unit arc length, ~10/length scale
    pub kappa_s: f64,
    pub integrands: &'a [TimeIntegrand<'a>],
}

impl OdeSystem for UnperturbedFlow<'_> {
    fn dim(&self) -> usize {
        2 + self.integrands.len()
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
        let (p, q) = (y[0], y[1]);
        let g = self.system.grad(p, q, self.z);
        let gn2 = g.de_dp * g.de_dp + g.de_dq * g.de_dq;
        let e = self.system.energy(p, q, self.z);
        let corr = -self.kappa_s * (gn2.sqrt() / gn2.max(1e-300)) * (e - self.h_target);
        dy[0] = -g.de_dq + corr * g.de_dp;
        dy[1] = g.de_dp + corr * g.de_dq;
        for (i, f) in self.integrands.iter().enumerate() {
            dy[2 + i] = f(p, q, self.z);
        }
    }

    fn max_step(&self, _t: f64, y: &[f64]) -> f64 {
        // cap by arc length inside the saddle neighbourhood: the phase
        // velocity vanishes at C, uniform-time steps would jump the passage
        let dp = y[0] - self.c.0;
        let dq = y[1] - self.c.1;
        let d = (dp * dp + dq * dq).sqrt();
        if d < self.ball {
            let g = self.system.grad(y[0], y[1], self.z);
            let sp = (g.de_dp * g.de_dp + g.de_dq * g.de_dq).sqrt().max(1e-300);
            (0.25 * d / sp).max(1e-12)
        } else {
            f64::INFINITY
        }
    }
}

/// A closed unperturbed orbit E = h in region nu, parametrised by time.
#[derive(Debug, Clone)]
pub struct LevelOrbit {
    pub h: f64,
    pub z: ZVec,
    pub nu: u8,
    /// (t, p, q) samples over one period, first and last point on the section
    pub polyline: Vec<(f64, f64, f64)>,
    pub period: f64,
    pub area: f64,
    /// caller-requested loop time integrals
    pub extras: Vec<f64>,
}

impl LevelOrbit {
    pub fn action(&self) -> f64 {
        self.area / (2.0 * std::f64::consts::TAU / 2.0)
    }
}

pub(crate) struct OrbitCore {
    pub period: f64,
    pub area: f64,
    pub extras: Vec<f64>,
    pub start: (f64, f64),
}

/// Everything orbit computations need at a fixed z: saddle frame, loop
/// centers and the scales. Cheap to assemble (no polylines), so interpolated
/// contexts can produce one per right-hand-side evaluation.
#[derive(Clone)]
pub struct OrbitEnv {
    pub system: System,
    pub z: Vec<f64>,
    pub frame: SaddleFrame,
    /// elliptic centers of loops 1 and 2
    pub centers: [(f64, f64); 2],
    /// well energies E(center) < 0
    pub h_well: [f64; 2],
    pub energy_scale: f64,
    pub len_scale: f64,
    /// saddle neighbourhood radius used for section events
    pub section_radius: f64,
    pub params: NumericParams,
}

/// Per-z geometry bundle: the orbit environment plus traced separatrix loops.
pub struct ZGeometry {
    pub env: OrbitEnv,
    pub seps: SeparatrixGeometry,
}

impl std::ops::Deref for ZGeometry {
    type Target = OrbitEnv;
    fn deref(&self) -> &OrbitEnv {
        &self.env
    }
}

impl ZGeometry {
    pub fn new(system: &System, z: &[f64], params: &NumericParams) -> Result<Self> {
        let frame = locate_saddle(system, z, system.saddle_guess(z))?;
        let seps = trace_separatrices(system, &frame, params)?;

        let mut centers = [(0.0, 0.0); 2];
        let mut h_well = [0.0; 2];
        for i in 0..2 {
            let l = &seps.loops[i];
            // Newton guess: the minimum of E along the ray from C to the
            // farthest loop vertex, which is well inside the lobe (the
            // polyline centroid is biased towards the saddle, where Newton
            // can wander into the wrong basin)
            let far = l
                .points
                .iter()
                .copied()
                .max_by(|a, b| {
                    frame
                        .dist(a.1, a.2)
                        .partial_cmp(&frame.dist(b.1, b.2))
                        .unwrap()
                })
                .unwrap();
            let mut guess = (far.1, far.2);
            let mut e_min = f64::INFINITY;
            for k in 1..64 {
                let t = k as f64 / 64.0;
                let x = (
                    frame.c.0 + t * (far.1 - frame.c.0),
                    frame.c.1 + t * (far.2 - frame.c.1),
                );
                let e = system.energy(x.0, x.1, z);
                if e < e_min {
                    e_min = e;
                    guess = x;
                }
            }
            let ((p, q), hess) = crate::model::critical_point_newton(system, z, guess, 1e-13)
                .map_err(|e| Error::Geometry(format!("center of loop {}: {e}", i + 1)))?;
            let det = hess[0][0] * hess[1][1] - hess[0][1] * hess[1][0];
            if det <= 0.0 || hess[0][0] + hess[1][1] <= 0.0 {
                return Err(Error::Geometry(format!(
                    "loop {} interior critical point is not elliptic",
                    i + 1
                )));
            }
            h_well[i] = system.energy(p, q, z);
            if h_well[i] >= 0.0 || system.loop_side(p, q, z) != l.nu {
                return Err(Error::Geometry(format!(
                    "center ({p}, {q}) does not lie inside loop {}",
                    l.nu
                )));
            }
            centers[i] = (p, q);
        }

        let energy_scale = h_well[0].abs().max(h_well[1].abs());
        let len_scale = seps.loops[0].diameter.max(seps.loops[1].diameter);
        let section_radius =
            params.section_radius_frac * seps.loops[0].diameter.min(seps.loops[1].diameter);

        Ok(ZGeometry {
            env: OrbitEnv {
                system: system.clone(),
                z: z.to_vec(),
                frame,
                centers,
                h_well,
                energy_scale,
                len_scale,
                section_radius,
                params: params.clone(),
            },
            seps,
        })
    }
}

impl OrbitEnv {
    pub fn detect_region(&self, p: f64, q: f64) -> Region {
        let band = self.params.boundary_band_frac * self.energy_scale;
        let e = self.system.energy(p, q, &self.z);
        if e > band {
            Region::G(3)
        } else if e < -band {
            Region::G(self.system.loop_side(p, q, &self.z))
        } else {
            Region::Boundary
        }
    }

    fn check_region_energy(&self, h: f64, nu: u8) -> Result<()> {
        match nu {
            3 => {
                if h <= 0.0 {
                    return Err(Error::RegionMismatch {
                        h,
                        nu,
                        msg: "E > 0 in G3".into(),
                    });
                }
            }
            1 | 2 => {
                if h >= 0.0 {
                    return Err(Error::RegionMismatch {
                        h,
                        nu,
                        msg: "E < 0 in G1 and G2".into(),
                    });
                }
                if h <= self.h_well[(nu - 1) as usize] {
                    return Err(Error::RegionMismatch {
                        h,
                        nu,
                        msg: format!("below the well energy {}", self.h_well[(nu - 1) as usize]),
                    });
                }
            }
            _ => {
                return Err(Error::Precondition(format!("region {nu} not in {{1,2,3}}")));
            }
        }
        if h.abs() < self.params.h_min {
            return Err(Error::NearSeparatrix {
                h,
                floor: self.params.h_min,
            });
        }
        Ok(())
    }

    /// Point on the reference section of region nu with energy h.
    /// nu = 3: on the eta ray; nu = 1, 2: on the line q = q_center with
    /// E_p > 0 (the "upward" crossing).
    pub fn section_start(&self, h: f64, nu: u8) -> Result<(f64, f64)> {
        self.check_region_energy(h, nu)?;
        let z = &self.z;
        if nu == 3 {
            let at = |s: f64| {
                let p = self.frame.c.0 + s * self.frame.eta_axis.0;
                let q = self.frame.c.1 + s * self.frame.eta_axis.1;
                (p, q)
            };
            let f = |s: f64| {
                let (p, q) = at(s);
                self.system.energy(p, q, z) - h
            };
            let mut s_hi = 1e-3 * self.len_scale;
            let mut guard = 0;
            while f(s_hi) < 0.0 {
                s_hi *= 2.0;
                guard += 1;
                let (p, q) = at(s_hi);
                if guard > 60 || !self.system.in_domain(p, q, z) {
                    return Err(Error::RegionMismatch {
                        h,
                        nu,
                        msg: "no section point with this energy inside the domain".into(),
                    });
                }
            }
            let s_lo = 0.0;
            let s = refine_root(f, s_lo, s_hi, f(s_lo), f(s_hi), 1e-15 * self.len_scale);
            Ok(at(s))
        } else {
            let qc = self.centers[(nu - 1) as usize].1;
            let pc = self.centers[(nu - 1) as usize].0;
            let f = |p: f64| self.system.energy(p, qc, z) - h;
            let mut dp = 1e-3 * self.len_scale;
            let mut guard = 0;
            while f(pc + dp) < 0.0 {
                dp *= 2.0;
                guard += 1;
                if guard > 60 || !self.system.in_domain(pc + dp, qc, z) {
                    return Err(Error::RegionMismatch {
                        h,
                        nu,
                        msg: "no section point with this energy inside the domain".into(),
                    });
                }
            }
            let p = refine_root(f, pc, pc + dp, f(pc), f(pc + dp), 1e-15 * self.len_scale);
            let g = self.system.grad(p, qc, z);
            if g.de_dp <= 0.0 {
                return Err(Error::Geometry(
                    "section crossing direction is degenerate (E_p <= 0)".into(),
                ));
            }
            Ok((p, qc))
        }
    }

    /// Section-crossing value used for period detection: for nu = 3 the xi
    /// coordinate (crossing the eta ray from xi > 0), for loops q - q_center
    /// (crossing upward).
    fn section_value(&self, nu: u8, p: f64, q: f64) -> f64 {
        if nu == 3 {
            self.frame.xi_of(p, q)
        } else {
            q - self.centers[(nu - 1) as usize].1
        }
    }

    fn section_gate(&self, nu: u8, p: f64, q: f64) -> bool {
        if nu == 3 {
            self.frame.eta_of(p, q) > 0.0
        } else {
            let g = self.system.grad(p, q, &self.z);
            g.de_dp > 0.0
        }
    }

    /// The direction of the section crossing that closes one period:
    /// +1 means the value crosses from negative to positive.
    fn section_direction(&self, nu: u8) -> f64 {
        if nu == 3 {
            -1.0
        } else {
            1.0
        }
    }

    pub(crate) fn orbit_core(
        &self,
        h: f64,
        nu: u8,
        extras: &[TimeIntegrand],
        mut polyline: Option<&mut Vec<(f64, f64, f64)>>,
    ) -> Result<OrbitCore> {
        let start = self.section_start(h, nu)?;
        let sysc = &self.system;
        let area_f = move |p: f64, q: f64, zz: &[f64]| {
            let g = sysc.grad(p, q, zz);
            p * g.de_dp
        };
        let mut ints: Vec<TimeIntegrand> = Vec::with_capacity(1 + extras.len());
        ints.push(&area_f);
        for f in extras {
            ints.push(*f);
        }

        let flow = UnperturbedFlow {
            system: &self.system,
            z: &self.z,
            c: self.frame.c,
            ball: self.section_radius,
            h_target: h,
            kappa_s: 10.0 / self.len_scale,
            integrands: &ints,
        };
        let solver = Dopri5 {
            rtol: self.params.orbit_rtol,
            atol: self.params.orbit_atol,
            ..Default::default()
        };
        let mut y0 = vec![start.0, start.1];
        y0.extend(std::iter::repeat(0.0).take(ints.len()));

        if let Some(pl) = polyline.as_deref_mut() {
            pl.clear();
            pl.push((0.0, start.0, start.1));
        }

        // generous horizon: a few logarithmic periods
        let t_cap = 1e4 / self.frame.omega0 + 100.0 * self.len_scale;
        let dir = self.section_direction(nu);
        let mut prev = 0.0;
        let mut armed = false;
        let mut fail: Option<Error> = None;
        let out = solver.solve(&flow, 0.0, &y0, t_cap, |dense, ynew| {
            let (p, q) = (ynew[0], ynew[1]);
            if !self.system.in_domain(p, q, &self.z) {
                fail = Some(Error::Geometry(format!(
                    "level orbit escaped the domain at ({p}, {q}), h = {h}"
                )));
                return StepControl::Stop(dense.t1);
            }
            if let Some(pl) = polyline.as_deref_mut() {
                pl.push((dense.t1, p, q));
            }
            let v = self.section_value(nu, p, q);
            if armed && (prev * dir < 0.0) && (v * dir >= 0.0) {
                let root = refine_root(
                    |t| {
                        let mut buf = [0.0; crate::ode::MAX_DIM];
                        dense.eval_into(t, &mut buf);
                        self.section_value(nu, buf[0], buf[1]) * dir
                    },
                    dense.t0,
                    dense.t1,
                    prev * dir,
                    v * dir,
                    1e-12 * (1.0 + dense.t1.abs()),
                );
                let mut buf = [0.0; crate::ode::MAX_DIM];
                dense.eval_into(root, &mut buf);
                if self.section_gate(nu, buf[0], buf[1]) {
                    return StepControl::Stop(root);
                }
            }
            if !armed && v * dir < 0.0 {
                armed = true;
            }
            prev = v;
            StepControl::Continue
        })?;
        if let Some(e) = fail {
            return Err(e);
        }
        if !out.stopped_by_observer {
            return Err(Error::Geometry(format!(
                "level orbit did not close within t = {t_cap:.1} (h = {h}, nu = {nu})"
            )));
        }

        let period = out.t;
        if let Some(pl) = polyline.as_deref_mut() {
            pl.push((period, out.y[0], out.y[1]));
        }
        Ok(OrbitCore {
            period,
            area: out.y[2].abs(),
            extras: out.y[3..].to_vec(),
            start,
        })
    }

    /// Closed level orbit with time parametrisation and polyline.
    pub fn level_orbit(&self, h: f64, nu: u8) -> Result<LevelOrbit> {
        let mut pl = Vec::new();
        let core = self.orbit_core(h, nu, &[], Some(&mut pl))?;
        let mut zv = ZVec::new();
        for &v in &self.z {
            zv.push(v);
        }
        Ok(LevelOrbit {
            h,
            z: zv,
            nu,
            polyline: pl,
            period: core.period,
            area: core.area,
            extras: core.extras,
        })
    }

    pub fn period(&self, h: f64, nu: u8) -> Result<f64> {
        Ok(self.orbit_core(h, nu, &[], None)?.period)
    }

    /// Action I(h) = enclosed area / 2 pi.
    pub fn action(&self, h: f64, nu: u8) -> Result<f64> {
        Ok(self.orbit_core(h, nu, &[], None)?.area / std::f64::consts::TAU)
    }

    /// Loop time integral of g along the level line E = h in region nu.
    pub fn loop_time_integral(&self, g: TimeIntegrand, h: f64, nu: u8) -> Result<f64> {
        Ok(self.orbit_core(h, nu, &[g], None)?.extras[0])
    }

    /// Fit T(h) = -(slope) ln|h| + b over a geometric energy ladder.
    /// The returned `a` is per-loop (1/omega0); region 3 halves the slope.
    pub fn period_asymptotics(&self, nu: u8) -> Result<AsymptoticFit> {
        let sign = if nu == 3 { 1.0 } else { -1.0 };
        let h_top = self.params.asym_h_top_frac * self.energy_scale;
        let n = self.params.asym_ladder;
        let mut xs = Vec::with_capacity(n);
        let mut ts = Vec::with_capacity(n);
        let mut ws = Vec::with_capacity(n);
        for k in 0..n {
            let h = sign * h_top * 0.5f64.powi(k as i32);
            if h.abs() < self.params.h_min * 2.0 {
                break;
            }
            let t = self.period(h, nu)?;
            xs.push(h.abs().ln());
            ts.push(t);
            ws.push(1.0);
        }
        let m = xs.len();
        if m < 5 {
            return Err(Error::Geometry("period ladder too short".into()));
        }
        // down-weight the three smallest |h| (quadrature noise dominates there)
        for w in ws.iter_mut().skip(m - 3) {
            *w = 0.25;
        }
        let sw: f64 = ws.iter().sum();
        let mx = xs.iter().zip(&ws).map(|(x, w)| x * w).sum::<f64>() / sw;
        let mt = ts.iter().zip(&ws).map(|(t, w)| t * w).sum::<f64>() / sw;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..m {
            num += ws[i] * (xs[i] - mx) * (ts[i] - mt);
            den += ws[i] * (xs[i] - mx) * (xs[i] - mx);
        }
        let slope = num / den;
        let intercept = mt - slope * mx;
        let mut resid = 0.0;
        for i in 0..m {
            let r = ts[i] - (slope * xs[i] + intercept);
            resid += ws[i] * r * r;
        }
        resid = (resid / sw).sqrt();
        let a_fit = if nu == 3 { -slope / 2.0 } else { -slope };
        Ok(AsymptoticFit {
            a: a_fit,
            b: intercept,
            residual: resid,
            expected_a: 1.0 / self.frame.omega0,
            residual_ok: resid < 1e-2 * (1.0 + intercept.abs()),
        })
    }

    /// Map (p, q) to (region, action, angle); the angle is 2 pi * (time along
    /// the orbit from the reference section crossing) / T, in [0, 2 pi).
    pub fn to_action_angle(&self, p: f64, q: f64) -> Result<(u8, f64, f64)> {
        let h = self.system.energy(p, q, &self.z);
        if h.abs() < self.params.h_min {
            return Err(Error::NearSeparatrix {
                h,
                floor: self.params.h_min,
            });
        }
        let nu = match self.detect_region(p, q) {
            Region::G(v) => v,
            Region::Boundary => {
                return Err(Error::NearSeparatrix {
                    h,
                    floor: self.params.h_min,
                })
            }
        };
        let core = self.orbit_core(h, nu, &[], None)?;
        let t_hit = self.time_to_section(p, q, nu, core.period)?;
        let mut phi = std::f64::consts::TAU * (1.0 - t_hit / core.period);
        if phi >= std::f64::consts::TAU {
            phi -= std::f64::consts::TAU;
        }
        if phi < 0.0 {
            phi += std::f64::consts::TAU;
        }
        Ok((nu, core.area / std::f64::consts::TAU, phi))
    }

    /// Inverse of `to_action_angle`: the point with given region, action and
    /// angle. Root-finds h from I (monotone) and advances the flow by
    /// phi T / 2 pi from the section.
    pub fn from_action_angle(&self, nu: u8, action: f64, phi: f64) -> Result<(f64, f64)> {
        let h = self.energy_of_action(nu, action)?;
        let core = self.orbit_core(h, nu, &[], None)?;
        let mut phi = phi.rem_euclid(std::f64::consts::TAU);
        if phi < 0.0 {
            phi += std::f64::consts::TAU;
        }
        let dt = phi / std::f64::consts::TAU * core.period;
        if dt == 0.0 {
            return Ok(core.start);
        }
        self.advance_unperturbed(core.start.0, core.start.1, dt)
    }

    /// Solve I(h, nu) = action for h.
    pub fn energy_of_action(&self, nu: u8, action: f64) -> Result<f64> {
        let floor = self.params.h_min;
        let (mut lo, mut hi) = if nu == 3 {
            (floor * 2.0, self.energy_scale)
        } else {
            let hw = self.h_well[(nu - 1) as usize];
            (hw + 1e-7 * hw.abs(), -2.0 * floor)
        };
        let f = |h: f64| -> Result<f64> {
            Ok(self.orbit_core(h, nu, &[], None)?.area / std::f64::consts::TAU - action)
        };
        let flo = f(lo)?;
        if flo > 0.0 {
            return Err(Error::Geometry(format!(
                "action {action} below the reachable range in region {nu}"
            )));
        }
        let mut fhi = f(hi)?;
        if nu == 3 {
            let mut guard = 0;
            while fhi < 0.0 {
                hi *= 2.0;
                guard += 1;
                if guard > 12 {
                    return Err(Error::Geometry(format!(
                        "action {action} above the reachable range in region 3"
                    )));
                }
                fhi = f(hi)?;
            }
        } else if fhi < 0.0 {
            return Err(Error::NearSeparatrix {
                h: hi,
                floor: self.params.h_min,
            });
        }
        // Newton in h (dI/dh = T / 2 pi comes free from the same orbit trace),
        // bracket-guarded; converges in a handful of traces
        let mut h = 0.5 * (lo + hi);
        for _ in 0..60 {
            let core = self.orbit_core(h, nu, &[], None)?;
            let fv = core.area / std::f64::consts::TAU - action;
            if fv < 0.0 {
                lo = h;
            } else {
                hi = h;
            }
            let step = -fv * std::f64::consts::TAU / core.period;
            if fv.abs() < 1e-12 * action.abs().max(1e-6) || (hi - lo).abs() < 1e-14 * self.energy_scale
            {
                return Ok(h);
            }
            let mut h_new = h + step;
            if !(h_new > lo && h_new < hi) {
                h_new = 0.5 * (lo + hi);
            }
            h = h_new;
        }
        Ok(h)
    }

    /// Advance the unperturbed flow from (p, q) by time dt.
    pub fn advance_unperturbed(&self, p: f64, q: f64, dt: f64) -> Result<(f64, f64)> {
        let flow = UnperturbedFlow {
            system: &self.system,
            z: &self.z,
            c: self.frame.c,
            ball: self.section_radius,
            h_target: self.system.energy(p, q, &self.z),
            kappa_s: 10.0 / self.len_scale,
            integrands: &[],
        };
        let solver = Dopri5 {
            rtol: self.params.orbit_rtol,
            atol: self.params.orbit_atol,
            ..Default::default()
        };
        let out = solver.solve(&flow, 0.0, &[p, q], dt, |_, _| StepControl::Continue)?;
        Ok((out.y[0], out.y[1]))
    }

    /// Time for the unperturbed flow from (p, q) to its next crossing of the
    /// region's reference section (at most ~one period, `t_max` horizon).
    fn time_to_section(&self, p: f64, q: f64, nu: u8, t_max: f64) -> Result<f64> {
        let flow = UnperturbedFlow {
            system: &self.system,
            z: &self.z,
            c: self.frame.c,
            ball: self.section_radius,
            h_target: self.system.energy(p, q, &self.z),
            kappa_s: 10.0 / self.len_scale,
            integrands: &[],
        };
        let solver = Dopri5 {
            rtol: self.params.orbit_rtol,
            atol: self.params.orbit_atol,
            ..Default::default()
        };
        let dir = self.section_direction(nu);
        let mut prev = self.section_value(nu, p, q) * dir;
        let mut armed = prev < 0.0;
        let horizon = 1.5 * t_max + 1.0;
        let out = solver.solve(&flow, 0.0, &[p, q], horizon, |dense, ynew| {
            let v = self.section_value(nu, ynew[0], ynew[1]) * dir;
            if armed && prev < 0.0 && v >= 0.0 {
                let root = refine_root(
                    |t| {
                        let mut buf = [0.0; crate::ode::MAX_DIM];
                        dense.eval_into(t, &mut buf[..2]);
                        self.section_value(nu, buf[0], buf[1]) * dir
                    },
                    dense.t0,
                    dense.t1,
                    prev,
                    v,
                    1e-12 * (1.0 + dense.t1.abs()),
                );
                let mut buf = [0.0; crate::ode::MAX_DIM];
                dense.eval_into(root, &mut buf[..2]);
                if self.section_gate(nu, buf[0], buf[1]) {
                    return StepControl::Stop(root);
                }
            }
            if v < 0.0 {
                armed = true;
            }
            prev = v;
            StepControl::Continue
        })?;
        if !out.stopped_by_observer {
            return Err(Error::Geometry(
                "no section crossing within 1.5 periods".into(),
            ));
        }
        Ok(out.t)
    }
}

#[derive(Debug, Clone)]
pub struct AsymptoticFit {
    /// per-loop slope coefficient, expected 1/omega0
    pub a: f64,
    pub b: f64,
    pub residual: f64,
    pub expected_a: f64,
    pub residual_ok: bool,
}
