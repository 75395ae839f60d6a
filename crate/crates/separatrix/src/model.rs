//! Slow-fast Hamiltonian systems
//!
//!   q' = dE/dp + eps f1,   p' = -dE/dq + eps f2,   z' = eps f3,
//!
//! with E = E(p, q, z), z in R^k (k may be 0). The unperturbed (eps = 0)
//! phase portrait is a figure eight: a non-degenerate saddle C with two
//! separatrix loops l1, l2 bounding regions G1, G2 and an outer region G3.
//! E is normalised so that E = 0 at C, hence E > 0 in G3 and E < 0 in the
//! loops.
//!
//! Built-in presets are double-well models with the saddle at the origin:
//!
//! * `dw-dissip`: E = p^2/2 + q^4/4 - q^2/2, friction f2 = -gamma p, no z.
//! * `dw-slow`  : E = p^2/2 + q^4/4 - z q^2/2, f3 = 1 (deepening wells),
//!   optional friction.
//! * `dw-asym`  : adds alpha q^3/3, which makes the two loops (and the
//!   fluxes Theta_1, Theta_2) different.

use std::collections::BTreeMap;
use std::sync::Arc;

use arrayvec::ArrayVec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::CubicSpline;

pub const MAX_Z: usize = 8;
pub type ZVec = ArrayVec<f64, MAX_Z>;

pub fn zvec(slice: &[f64]) -> ZVec {
    slice.iter().copied().collect()
}

/// Gradient of E at one point.
#[derive(Debug, Clone)]
pub struct Grad {
    pub de_dp: f64,
    pub de_dq: f64,
    pub de_dz: ZVec,
}

/// Perturbation values (f1, f2, f3) at one point.
#[derive(Debug, Clone)]
pub struct Perturbation {
    pub f1: f64,
    pub f2: f64,
    pub f3: ZVec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainBox {
    pub p: (f64, f64),
    pub q: (f64, f64),
    pub z: Vec<(f64, f64)>,
}

impl DomainBox {
    pub fn contains(&self, p: f64, q: f64, z: &[f64]) -> bool {
        p >= self.p.0
            && p <= self.p.1
            && q >= self.q.0
            && q <= self.q.1
            && z.iter()
                .zip(&self.z)
                .all(|(&zi, &(lo, hi))| zi >= lo && zi <= hi)
    }

    pub fn pq_diameter(&self) -> f64 {
        let dp = self.p.1 - self.p.0;
        let dq = self.q.1 - self.q.0;
        (dp * dp + dq * dq).sqrt()
    }
}

/// Model trait: the raw (possibly un-normalised) system definition.
pub trait SlowFastModel: Send + Sync {
    fn dim_z(&self) -> usize;
    fn energy(&self, p: f64, q: f64, z: &[f64]) -> f64;
    fn grad(&self, p: f64, q: f64, z: &[f64]) -> Grad;
    fn perturbation(&self, p: f64, q: f64, z: &[f64], eps: f64) -> Perturbation;
    /// Which loop region a point with E < 0 belongs to (1 or 2).
    fn loop_side(&self, p: f64, q: f64, z: &[f64]) -> u8;
    fn domain_box(&self) -> DomainBox;
    fn saddle_guess(&self, _z: &[f64]) -> (f64, f64) {
        (0.0, 0.0)
    }
}

#[derive(Clone)]
enum EnergyShift {
    None,
    Constant(f64),
    Spline(Arc<CubicSpline>),
}

/// A slow-fast system handle: a model plus its energy normalisation.
/// Cheap to clone and safe to share across threads; all evaluators are pure.
#[derive(Clone)]
pub struct System {
    model: Arc<dyn SlowFastModel>,
    shift: EnergyShift,
}

impl System {
    pub fn new(model: Arc<dyn SlowFastModel>) -> Self {
        System {
            model,
            shift: EnergyShift::None,
        }
    }

    pub fn dim_z(&self) -> usize {
        self.model.dim_z()
    }

    pub fn energy_shift(&self, z: &[f64]) -> f64 {
        match &self.shift {
            EnergyShift::None => 0.0,
            EnergyShift::Constant(c) => *c,
            EnergyShift::Spline(s) => s.eval(z[0]),
        }
    }

    fn shift_dz(&self, z: &[f64]) -> f64 {
        match &self.shift {
            EnergyShift::None | EnergyShift::Constant(_) => 0.0,
            EnergyShift::Spline(s) => s.derivative(z[0]),
        }
    }

    pub fn energy(&self, p: f64, q: f64, z: &[f64]) -> f64 {
        self.model.energy(p, q, z) + self.energy_shift(z)
    }

    pub fn grad(&self, p: f64, q: f64, z: &[f64]) -> Grad {
        let mut g = self.model.grad(p, q, z);
        let ds = self.shift_dz(z);
        if ds != 0.0 {
            g.de_dz[0] += ds;
        }
        g
    }

    pub fn perturbation(&self, p: f64, q: f64, z: &[f64], eps: f64) -> Perturbation {
        self.model.perturbation(p, q, z, eps)
    }

    pub fn loop_side(&self, p: f64, q: f64, z: &[f64]) -> u8 {
        self.model.loop_side(p, q, z)
    }

    pub fn domain_box(&self) -> DomainBox {
        self.model.domain_box()
    }

    pub fn saddle_guess(&self, z: &[f64]) -> (f64, f64) {
        self.model.saddle_guess(z)
    }

    pub fn in_domain(&self, p: f64, q: f64, z: &[f64]) -> bool {
        self.domain_box().contains(p, q, z)
    }

    /// The energy decrement integrand g = E_q f1 + E_p f2 + E_z . f3 at
    /// eps = 0; along the perturbed flow dE/dt = eps * g.
    pub fn energy_rate_integrand(&self, p: f64, q: f64, z: &[f64]) -> f64 {
        let g = self.grad(p, q, z);
        let f = self.perturbation(p, q, z, 0.0);
        let mut v = g.de_dq * f.f1 + g.de_dp * f.f2;
        for (a, b) in g.de_dz.iter().zip(f.f3.iter()) {
            v += a * b;
        }
        v
    }
}

/// Full perturbed vector field of the system.
#[derive(Debug, Clone)]
pub struct VectorField {
    /// dp/dt = -dE/dq + eps f2
    pub dp: f64,
    /// dq/dt = dE/dp + eps f1
    pub dq: f64,
    /// dz/dt = eps f3
    pub dz: ZVec,
}

pub fn vector_field(system: &System, p: f64, q: f64, z: &[f64], eps: f64) -> Result<VectorField> {
    if !system.in_domain(p, q, z) {
        return Err(Error::OutsideDomain {
            p,
            q,
            z: z.to_vec(),
        });
    }
    if eps < 0.0 {
        return Err(Error::Precondition("eps must be >= 0".into()));
    }
    let g = system.grad(p, q, z);
    let f = system.perturbation(p, q, z, eps);
    let dz = f.f3.iter().map(|&v| eps * v).collect();
    Ok(VectorField {
        dp: -g.de_dq + eps * f.f2,
        dq: g.de_dp + eps * f.f1,
        dz,
    })
}

/// Hessian of E in (p, q) by central differences of the analytic gradient.
pub fn hess_pq(system: &System, p: f64, q: f64, z: &[f64]) -> [[f64; 2]; 2] {
    let dp = 6e-6 * (1.0 + p.abs());
    let dq = 6e-6 * (1.0 + q.abs());
    let gp1 = system.grad(p + dp, q, z);
    let gp0 = system.grad(p - dp, q, z);
    let gq1 = system.grad(p, q + dq, z);
    let gq0 = system.grad(p, q - dq, z);
    let epp = (gp1.de_dp - gp0.de_dp) / (2.0 * dp);
    let eqq = (gq1.de_dq - gq0.de_dq) / (2.0 * dq);
    // symmetrise the mixed derivative
    let epq = 0.5 * ((gq1.de_dp - gq0.de_dp) / (2.0 * dq) + (gp1.de_dq - gp0.de_dq) / (2.0 * dp));
    [[epp, epq], [epq, eqq]]
}

/// Newton refinement of a (p, q) critical point of E at fixed z.
/// Returns the point and its Hessian.
pub(crate) fn critical_point_newton(
    system: &System,
    z: &[f64],
    guess: (f64, f64),
    tol: f64,
) -> Result<((f64, f64), [[f64; 2]; 2])> {
    let (mut p, mut q) = guess;
    for _ in 0..60 {
        let g = system.grad(p, q, z);
        let r = (g.de_dp * g.de_dp + g.de_dq * g.de_dq).sqrt();
        let h = hess_pq(system, p, q, z);
        if r <= tol {
            return Ok(((p, q), h));
        }
        let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
        if det.abs() < 1e-300 {
            return Err(Error::NewtonDiverged(format!(
                "singular Hessian at ({p}, {q})"
            )));
        }
        let sp = (h[1][1] * g.de_dp - h[0][1] * g.de_dq) / det;
        let sq = (-h[1][0] * g.de_dp + h[0][0] * g.de_dq) / det;
        p -= sp;
        q -= sq;
        if !p.is_finite() || !q.is_finite() {
            return Err(Error::NewtonDiverged(format!("diverged from {guess:?}")));
        }
    }
    let g = system.grad(p, q, z);
    let r = (g.de_dp * g.de_dp + g.de_dq * g.de_dq).sqrt();
    if r <= 10.0 * tol {
        return Ok(((p, q), hess_pq(system, p, q, z)));
    }
    Err(Error::NewtonDiverged(format!(
        "residual {r:e} after 60 iterations from {guess:?}"
    )))
}

/// Shift the energy so that E = 0 at the saddle C(z), interpolating the
/// shift smoothly between the z samples (a single constant when dim_z = 0).
pub fn normalize_energy(system: &System, z_samples: &[Vec<f64>]) -> Result<System> {
    let dim = system.dim_z();
    let newton_tol = 1e-13;
    let residual_at = |z: &[f64]| -> Result<f64> {
        let ((p, q), h) = critical_point_newton(system, z, system.saddle_guess(z), newton_tol)?;
        let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
        if det >= 0.0 {
            return Err(Error::NotASaddle(format!(
                "critical point ({p}, {q}) at z={z:?} has det(Hess) = {det}"
            )));
        }
        Ok(system.energy(p, q, z))
    };

    match dim {
        0 => {
            let r = residual_at(&[])?;
            let total = system.energy_shift(&[]) - r;
            Ok(System {
                model: system.model.clone(),
                shift: EnergyShift::Constant(total),
            })
        }
        1 => {
            if z_samples.len() < 2 {
                return Err(Error::Config(
                    "normalize_energy needs at least 2 z samples for dim_z = 1".into(),
                ));
            }
            let mut xs: Vec<f64> = z_samples.iter().map(|z| z[0]).collect();
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut ys = Vec::with_capacity(xs.len());
            for &x in &xs {
                let z = [x];
                let r = residual_at(&z)?;
                ys.push(system.energy_shift(&z) - r);
            }
            Ok(System {
                model: system.model.clone(),
                shift: EnergyShift::Spline(Arc::new(CubicSpline::new(xs, ys))),
            })
        }
        _ => {
            // multi-dimensional z: only accept systems that are already normalised
            for z in z_samples {
                let r = residual_at(z)?;
                if r.abs() > 1e-10 {
                    return Err(Error::Config(
                        "normalize_energy sampling supports dim_z <= 1; \
                         multi-dimensional z systems must be pre-normalised"
                            .into(),
                    ));
                }
            }
            Ok(system.clone())
        }
    }
}

/// Wraps a system with all perturbations multiplied by a constant; the
/// fluxes Theta scale linearly while the capture probabilities stay put.
pub struct ScaledPerturbation {
    pub inner: System,
    pub lambda: f64,
}

impl SlowFastModel for ScaledPerturbation {
    fn dim_z(&self) -> usize {
        self.inner.dim_z()
    }
    fn energy(&self, p: f64, q: f64, z: &[f64]) -> f64 {
        self.inner.energy(p, q, z)
    }
    fn grad(&self, p: f64, q: f64, z: &[f64]) -> Grad {
        self.inner.grad(p, q, z)
    }
    fn perturbation(&self, p: f64, q: f64, z: &[f64], eps: f64) -> Perturbation {
        let mut f = self.inner.perturbation(p, q, z, eps);
        f.f1 *= self.lambda;
        f.f2 *= self.lambda;
        for v in f.f3.iter_mut() {
            *v *= self.lambda;
        }
        f
    }
    fn loop_side(&self, p: f64, q: f64, z: &[f64]) -> u8 {
        self.inner.loop_side(p, q, z)
    }
    fn domain_box(&self) -> DomainBox {
        self.inner.domain_box()
    }
    fn saddle_guess(&self, z: &[f64]) -> (f64, f64) {
        self.inner.saddle_guess(z)
    }
}

// ---------------------------------------------------------------------------
// Built-in double-well presets
// ---------------------------------------------------------------------------

struct DoubleWell {
    /// cubic asymmetry coefficient
    alpha: f64,
    /// friction strength in f2 = -gamma p
    gamma: f64,
    /// true: scalar slow variable z (f3 = 1); false: frozen z = 1, no f3
    slow: bool,
}

impl DoubleWell {
    fn zeff(&self, z: &[f64]) -> f64 {
        if self.slow {
            z[0]
        } else {
            1.0
        }
    }
}

impl SlowFastModel for DoubleWell {
    fn dim_z(&self) -> usize {
        if self.slow {
            1
        } else {
            0
        }
    }

    fn energy(&self, p: f64, q: f64, z: &[f64]) -> f64 {
        let ze = self.zeff(z);
        0.5 * p * p + 0.25 * q.powi(4) + self.alpha * q.powi(3) / 3.0 - 0.5 * ze * q * q
    }

    fn grad(&self, p: f64, q: f64, z: &[f64]) -> Grad {
        let ze = self.zeff(z);
        let mut de_dz = ZVec::new();
        if self.slow {
            de_dz.push(-0.5 * q * q);
        }
        Grad {
            de_dp: p,
            de_dq: q.powi(3) + self.alpha * q * q - ze * q,
            de_dz,
        }
    }

    fn perturbation(&self, p: f64, _q: f64, _z: &[f64], _eps: f64) -> Perturbation {
        let mut f3 = ZVec::new();
        if self.slow {
            f3.push(1.0);
        }
        Perturbation {
            f1: 0.0,
            f2: -self.gamma * p,
            f3,
        }
    }

    fn loop_side(&self, _p: f64, q: f64, _z: &[f64]) -> u8 {
        if q > 0.0 {
            1
        } else {
            2
        }
    }

    fn domain_box(&self) -> DomainBox {
        DomainBox {
            p: (-6.0, 6.0),
            q: (-4.0, 4.0),
            z: if self.slow {
                vec![(0.35, 3.5)]
            } else {
                vec![]
            },
        }
    }
}

/// A named preset with parameter overrides, addressable from CLI configs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelPreset {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl ModelPreset {
    pub fn new(name: &str) -> Self {
        ModelPreset {
            name: name.to_string(),
            params: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    fn take(&self, allowed: &[&str]) -> Result<BTreeMap<String, f64>> {
        for k in self.params.keys() {
            if !allowed.contains(&k.as_str()) {
                return Err(Error::Config(format!(
                    "unknown parameter `{k}` for preset `{}` (allowed: {allowed:?})",
                    self.name
                )));
            }
        }
        Ok(self.params.clone())
    }

    pub fn instantiate(&self) -> Result<System> {
        let sys = match self.name.as_str() {
            "dw-dissip" => {
                let p = self.take(&["gamma"])?;
                let gamma = p.get("gamma").copied().unwrap_or(0.2);
                System::new(Arc::new(DoubleWell {
                    alpha: 0.0,
                    gamma,
                    slow: false,
                }))
            }
            "dw-slow" => {
                let p = self.take(&["gamma"])?;
                let gamma = p.get("gamma").copied().unwrap_or(0.0);
                System::new(Arc::new(DoubleWell {
                    alpha: 0.0,
                    gamma,
                    slow: true,
                }))
            }
            "dw-asym" => {
                let p = self.take(&["alpha", "gamma"])?;
                let alpha = p.get("alpha").copied().unwrap_or(0.3);
                let gamma = p.get("gamma").copied().unwrap_or(0.0);
                if !(0.0..=1.0).contains(&alpha) {
                    return Err(Error::Config(format!("alpha = {alpha} out of range [0, 1]")));
                }
                System::new(Arc::new(DoubleWell {
                    alpha,
                    gamma,
                    slow: true,
                }))
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown preset `{other}` (available: dw-dissip, dw-slow, dw-asym)"
                )))
            }
        };
        Ok(sys)
    }
}

#[cfg(test)]
pub(crate) mod test_models {
    use super::*;

    /// E = p^2/2 - z cos q with the saddle at q = pi; used to exercise the
    /// z-dependent energy normalisation (raw E(C) = z, so the shift is -z).
    pub struct PendulumForm;

    impl SlowFastModel for PendulumForm {
        fn dim_z(&self) -> usize {
            1
        }
        fn energy(&self, p: f64, q: f64, z: &[f64]) -> f64 {
            0.5 * p * p - z[0] * q.cos()
        }
        fn grad(&self, p: f64, q: f64, z: &[f64]) -> Grad {
            let mut de_dz = ZVec::new();
            de_dz.push(-q.cos());
            Grad {
                de_dp: p,
                de_dq: z[0] * q.sin(),
                de_dz,
            }
        }
        fn perturbation(&self, _p: f64, _q: f64, _z: &[f64], _eps: f64) -> Perturbation {
            let mut f3 = ZVec::new();
            f3.push(1.0);
            Perturbation {
                f1: 0.0,
                f2: 0.0,
                f3,
            }
        }
        fn loop_side(&self, _p: f64, q: f64, _z: &[f64]) -> u8 {
            if q > 0.0 {
                1
            } else {
                2
            }
        }
        fn domain_box(&self) -> DomainBox {
            DomainBox {
                p: (-6.0, 6.0),
                q: (0.0, 7.0),
                z: vec![(0.5, 3.0)],
            }
        }
        fn saddle_guess(&self, _z: &[f64]) -> (f64, f64) {
            (0.0, std::f64::consts::PI)
        }
    }

    /// dw-slow with a constant offset added to E (raw saddle energy 5).
    pub struct OffsetWell(pub f64);

    impl SlowFastModel for OffsetWell {
        fn dim_z(&self) -> usize {
            1
        }
        fn energy(&self, p: f64, q: f64, z: &[f64]) -> f64 {
            0.5 * p * p + 0.25 * q.powi(4) - 0.5 * z[0] * q * q + self.0
        }
        fn grad(&self, p: f64, q: f64, z: &[f64]) -> Grad {
            let mut de_dz = ZVec::new();
            de_dz.push(-0.5 * q * q);
            Grad {
                de_dp: p,
                de_dq: q.powi(3) - z[0] * q,
                de_dz,
            }
        }
        fn perturbation(&self, _p: f64, _q: f64, _z: &[f64], _eps: f64) -> Perturbation {
            let mut f3 = ZVec::new();
            f3.push(1.0);
            Perturbation {
                f1: 0.0,
                f2: 0.0,
                f3,
            }
        }
        fn loop_side(&self, _p: f64, q: f64, _z: &[f64]) -> u8 {
            if q > 0.0 {
                1
            } else {
                2
            }
        }
        fn domain_box(&self) -> DomainBox {
            DomainBox {
                p: (-6.0, 6.0),
                q: (-4.0, 4.0),
                z: vec![(0.35, 3.5)],
            }
        }
    }
}
