//! Separatrix fluxes and capture probabilities.
//!
//! The flux of loop nu is the improper time integral along the separatrix
//!
//!   Theta_nu(z) = - loop integral of (E_q f1 + E_p f2 + E_z . f3) dt,
//!
//! convergent after normalisation because the integrand vanishes at the
//! saddle; it is evaluated in arc length (integrand / |grad E|). The capture
//! probability at the separatrix is P_nu = Theta_nu / Theta_3,
//! Theta_3 = Theta_1 + Theta_2.
//!
//! [`SepCtx`] packages everything the averaged flow and the simulations need
//! per z — saddle frame, loop areas, fluxes and the period-asymptotics
//! intercepts — evaluated on a z grid and interpolated with cubic splines
//! (dim_z = 1), held as a single cache (dim_z = 0), or recomputed per call
//! (dim_z >= 2).

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{locate_saddle, trace_loops_with, OrbitEnv, Region, SaddleFrame, ZGeometry};
use crate::interp::CubicSpline;
use crate::model::{System, ZVec};
use crate::params::NumericParams;

#[derive(Debug, Clone, Serialize)]
pub struct ThetaValues {
    pub z: Vec<f64>,
    pub theta1: f64,
    pub theta2: f64,
    pub theta3: f64,
    pub estimated_quadrature_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CaptureProbabilities {
    pub z: Vec<f64>,
    pub p1: f64,
    pub p2: f64,
}

/// Flux integrals over both separatrix loops, in arc-length regularisation.
pub fn compute_theta(geo: &ZGeometry) -> Result<ThetaValues> {
    let system = &geo.system;
    let z = &geo.z;
    // the integrals only converge for a normalised system (Lemma-2.1 setup)
    let c = geo.frame.c;
    let e_c = system.energy(c.0, c.1, z);
    if e_c.abs() > 1e-8 * geo.energy_scale {
        return Err(Error::Precondition(format!(
            "system not normalised: E(C) = {e_c:e}"
        )));
    }
    let g_c = system.grad(c.0, c.1, z);
    for (i, &gz) in g_c.de_dz.iter().enumerate() {
        if gz.abs() > 1e-6 * geo.energy_scale {
            return Err(Error::Precondition(format!(
                "system not normalised: dE/dz[{i}](C) = {gz:e}"
            )));
        }
    }

    let sysc = system.clone();
    let g_e = move |p: f64, q: f64, zz: &[f64]| sysc.energy_rate_integrand(p, q, zz);
    let loops = trace_loops_with(system, &geo.frame, &geo.params, &[&g_e])?;
    let dimz = system.dim_z();
    let th = [
        -loops[0].integrals[1 + dimz],
        -loops[1].integrals[1 + dimz],
    ];

    // error budget: integrator tolerance over the trace plus the rectangle
    // endpoint pieces of length ~offset near C
    let offset = geo.params.sep_offset_frac * system.domain_box().pq_diameter();
    let mut endpoint = 0.0f64;
    for l in &loops {
        for &(_, p, q) in [&l.points[1], &l.points[l.points.len() - 2]] {
            let g = system.grad(p, q, z);
            let sp = (g.de_dp * g.de_dp + g.de_dq * g.de_dq).sqrt().max(1e-300);
            endpoint = endpoint.max((g_e(p, q, z) / sp).abs());
        }
    }
    let scale = th[0].abs().max(th[1].abs()).max(1e-6);
    let est = 50.0 * geo.params.tracer_rtol * scale
        + geo.params.tracer_atol * (loops[0].arc_length + loops[1].arc_length)
        + 0.5 * offset * endpoint;

    Ok(ThetaValues {
        z: z.clone(),
        theta1: th[0],
        theta2: th[1],
        theta3: th[0] + th[1],
        estimated_quadrature_error: est,
    })
}

pub fn capture_probability(theta: &ThetaValues) -> Result<CaptureProbabilities> {
    if theta.theta3 <= 0.0 {
        return Err(Error::ConditionC {
            z: theta.z.clone(),
            theta3: theta.theta3,
        });
    }
    Ok(CaptureProbabilities {
        z: theta.z.clone(),
        p1: theta.theta1 / theta.theta3,
        p2: theta.theta2 / theta.theta3,
    })
}

// ---------------------------------------------------------------------------
// hypothesis validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ConditionCheck {
    pub passed: bool,
    /// worst-case margin over the sampled z values; positive means pass
    pub worst_margin: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct HypothesisReport {
    /// condition B: non-degenerate saddle, real eigenvalues +-omega0
    pub saddle: ConditionCheck,
    /// condition C: all Theta_nu positive over the sampled z
    pub theta_positive: ConditionCheck,
    /// the first derivatives of E vanish at C
    pub gradient_at_saddle: ConditionCheck,
}

impl HypothesisReport {
    pub fn all_passed(&self) -> bool {
        self.saddle.passed && self.theta_positive.passed && self.gradient_at_saddle.passed
    }
}

fn z_samples_for(system: &System, z_box: &[(f64, f64)], n: usize) -> Vec<Vec<f64>> {
    match system.dim_z() {
        0 => vec![vec![]],
        1 => {
            let (lo, hi) = z_box[0];
            (0..n)
                .map(|i| vec![lo + (hi - lo) * i as f64 / (n - 1) as f64])
                .collect()
        }
        d => {
            // corners plus center; exhaustive sampling is not meaningful here
            let mut out = Vec::new();
            for mask in 0..(1usize << d) {
                out.push(
                    (0..d)
                        .map(|i| if mask >> i & 1 == 1 { z_box[i].1 } else { z_box[i].0 })
                        .collect(),
                );
            }
            out.push(z_box.iter().map(|&(lo, hi)| 0.5 * (lo + hi)).collect());
            out
        }
    }
}

/// Check Hypotheses A-C over a z box. Failures are reported, not thrown.
pub fn validate_hypotheses(
    system: &System,
    z_box: &[(f64, f64)],
    params: &NumericParams,
) -> HypothesisReport {
    let samples = z_samples_for(system, z_box, 9);
    let grad_tol = 1e-8;

    let mut saddle_margin = f64::INFINITY;
    let mut saddle_fail: Option<String> = None;
    let mut grad_worst: f64 = 0.0;
    let mut theta_min = f64::INFINITY;
    let mut theta_fail: Option<String> = None;

    for z in &samples {
        match locate_saddle(system, z, system.saddle_guess(z)) {
            Ok(frame) => {
                saddle_margin = saddle_margin.min(frame.omega0 * frame.omega0);
                let g = system.grad(frame.c.0, frame.c.1, z);
                grad_worst = grad_worst.max(g.de_dp.abs()).max(g.de_dq.abs());
                for &gz in g.de_dz.iter() {
                    grad_worst = grad_worst.max(gz.abs());
                }
                match ZGeometry::new(system, z, params).and_then(|geo| compute_theta(&geo)) {
                    Ok(tv) => {
                        theta_min = theta_min.min(tv.theta1).min(tv.theta2);
                    }
                    Err(e) => {
                        theta_fail = Some(format!("z={z:?}: {e}"));
                    }
                }
            }
            Err(e) => {
                saddle_fail = Some(format!("z={z:?}: {e}"));
            }
        }
    }

    let saddle = match saddle_fail {
        Some(msg) => ConditionCheck {
            passed: false,
            worst_margin: f64::NEG_INFINITY,
            detail: msg,
        },
        None => ConditionCheck {
            passed: saddle_margin > 0.0,
            worst_margin: saddle_margin,
            detail: format!(
                "min omega0^2 = {saddle_margin:e} over {} samples",
                samples.len()
            ),
        },
    };
    let gradient_at_saddle = ConditionCheck {
        passed: grad_worst <= grad_tol,
        worst_margin: grad_tol - grad_worst,
        detail: format!("max |grad E(C)| component = {grad_worst:e} (tol {grad_tol:e})"),
    };
    let theta_positive = match theta_fail {
        Some(msg) => ConditionCheck {
            passed: false,
            worst_margin: f64::NEG_INFINITY,
            detail: msg,
        },
        None => ConditionCheck {
            passed: theta_min > 0.0,
            worst_margin: theta_min,
            detail: format!("min Theta_nu = {theta_min:e}"),
        },
    };
    HypothesisReport {
        saddle,
        theta_positive,
        gradient_at_saddle,
    }
}

// ---------------------------------------------------------------------------
// interpolated per-z context
// ---------------------------------------------------------------------------

struct SliceCache {
    frame: SaddleFrame,
    centers: [(f64, f64); 2],
    s: [f64; 2],
    theta: [f64; 2],
    /// period-asymptotics intercepts b1, b2, b3
    b: [f64; 3],
    h_well: [f64; 2],
    energy_scale: f64,
    len_scale: f64,
    section_radius: f64,
    quad_error: f64,
}

fn build_slice(system: &System, z: &[f64], params: &NumericParams) -> Result<SliceCache> {
    let geo = ZGeometry::new(system, z, params)?;
    let tv = compute_theta(&geo)?;
    let b1 = geo.period_asymptotics(1)?.b;
    let b2 = geo.period_asymptotics(2)?.b;
    let b3 = geo.period_asymptotics(3)?.b;
    Ok(SliceCache {
        frame: geo.frame.clone(),
        centers: geo.centers,
        s: [geo.seps.areas[0], geo.seps.areas[1]],
        theta: [tv.theta1, tv.theta2],
        b: [b1, b2, b3],
        h_well: geo.h_well,
        energy_scale: geo.energy_scale,
        len_scale: geo.len_scale,
        section_radius: geo.section_radius,
        quad_error: tv.estimated_quadrature_error,
    })
}

struct GridData {
    zs: Vec<f64>,
    c_p: CubicSpline,
    c_q: CubicSpline,
    omega0: CubicSpline,
    xi: (CubicSpline, CubicSpline),
    eta: (CubicSpline, CubicSpline),
    c1: (CubicSpline, CubicSpline),
    c2: (CubicSpline, CubicSpline),
    s1: CubicSpline,
    s2: CubicSpline,
    theta1: CubicSpline,
    theta2: CubicSpline,
    b: [CubicSpline; 3],
    h_well1: CubicSpline,
    h_well2: CubicSpline,
    energy_scale: CubicSpline,
    len_scale: CubicSpline,
    section_radius: CubicSpline,
    quad_error: f64,
}

enum CtxInner {
    Fixed(Box<SliceCache>),
    Grid(Box<GridData>),
    /// dim_z >= 2: no interpolation, every query recomputes (slow path)
    Direct,
}

/// Shared read-only context: fluxes, areas, frame and asymptotics by z.
pub struct SepCtx {
    pub system: System,
    pub params: NumericParams,
    inner: CtxInner,
}

impl SepCtx {
    pub fn new(system: &System, params: &NumericParams) -> Result<Self> {
        let inner = match system.dim_z() {
            0 => CtxInner::Fixed(Box::new(build_slice(system, &[], params)?)),
            1 => {
                let (lo, hi) = system.domain_box().z[0];
                let n = params.grid_n.max(5);
                let zs: Vec<f64> = (0..n)
                    .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
                    .collect();
                let slices: Vec<Result<SliceCache>> = zs
                    .par_iter()
                    .map(|&zv| build_slice(system, &[zv], params))
                    .collect();
                let mut cache = Vec::with_capacity(n);
                for s in slices {
                    cache.push(s?);
                }
                let col = |f: &dyn Fn(&SliceCache) -> f64| -> CubicSpline {
                    CubicSpline::new(zs.clone(), cache.iter().map(f).collect())
                };
                let quad_error = cache.iter().map(|s| s.quad_error).fold(0.0f64, f64::max);
                CtxInner::Grid(Box::new(GridData {
                    zs: zs.clone(),
                    c_p: col(&|s| s.frame.c.0),
                    c_q: col(&|s| s.frame.c.1),
                    omega0: col(&|s| s.frame.omega0),
                    xi: (col(&|s| s.frame.xi_axis.0), col(&|s| s.frame.xi_axis.1)),
                    eta: (col(&|s| s.frame.eta_axis.0), col(&|s| s.frame.eta_axis.1)),
                    c1: (col(&|s| s.centers[0].0), col(&|s| s.centers[0].1)),
                    c2: (col(&|s| s.centers[1].0), col(&|s| s.centers[1].1)),
                    s1: col(&|s| s.s[0]),
                    s2: col(&|s| s.s[1]),
                    theta1: col(&|s| s.theta[0]),
                    theta2: col(&|s| s.theta[1]),
                    b: [col(&|s| s.b[0]), col(&|s| s.b[1]), col(&|s| s.b[2])],
                    h_well1: col(&|s| s.h_well[0]),
                    h_well2: col(&|s| s.h_well[1]),
                    energy_scale: col(&|s| s.energy_scale),
                    len_scale: col(&|s| s.len_scale),
                    section_radius: col(&|s| s.section_radius),
                    quad_error,
                }))
            }
            _ => CtxInner::Direct,
        };
        Ok(SepCtx {
            system: system.clone(),
            params: params.clone(),
            inner,
        })
    }

    /// Full geometry (with polylines) at z; always freshly computed.
    pub fn slice(&self, z: &[f64]) -> Result<ZGeometry> {
        ZGeometry::new(&self.system, z, &self.params)
    }

    pub fn frame_at(&self, z: &[f64]) -> Result<SaddleFrame> {
        match &self.inner {
            CtxInner::Fixed(s) => Ok(s.frame.clone()),
            CtxInner::Grid(g) => {
                let x = z[0];
                let norm = |v: (f64, f64)| {
                    let n = (v.0 * v.0 + v.1 * v.1).sqrt();
                    (v.0 / n, v.1 / n)
                };
                let mut f = SaddleFrame {
                    z: ZVec::new(),
                    c: (g.c_p.eval(x), g.c_q.eval(x)),
                    omega0: g.omega0.eval(x),
                    xi_axis: norm((g.xi.0.eval(x), g.xi.1.eval(x))),
                    eta_axis: norm((g.eta.0.eval(x), g.eta.1.eval(x))),
                    unstable: (0.0, 0.0),
                    stable: (0.0, 0.0),
                    hess: [[0.0; 2]; 2],
                };
                f.z.push(x);
                Ok(f)
            }
            CtxInner::Direct => locate_saddle(&self.system, z, self.system.saddle_guess(z)),
        }
    }

    /// (Theta1, Theta2, Theta3) at z; errors if condition C fails there.
    pub fn theta_at(&self, z: &[f64]) -> Result<(f64, f64, f64)> {
        let (t1, t2) = match &self.inner {
            CtxInner::Fixed(s) => (s.theta[0], s.theta[1]),
            CtxInner::Grid(g) => (g.theta1.eval(z[0]), g.theta2.eval(z[0])),
            CtxInner::Direct => {
                let geo = self.slice(z)?;
                let tv = compute_theta(&geo)?;
                (tv.theta1, tv.theta2)
            }
        };
        if t1 <= 0.0 || t2 <= 0.0 {
            return Err(Error::ConditionC {
                z: z.to_vec(),
                theta3: t1 + t2,
            });
        }
        Ok((t1, t2, t1 + t2))
    }

    pub fn probabilities_at(&self, z: &[f64]) -> Result<(f64, f64)> {
        let (t1, _t2, t3) = self.theta_at(z)?;
        Ok((t1 / t3, 1.0 - t1 / t3))
    }

    /// Loop area S_nu(z), nu in {1, 2, 3}.
    pub fn area_at(&self, z: &[f64], nu: u8) -> Result<f64> {
        let (s1, s2) = match &self.inner {
            CtxInner::Fixed(s) => (s.s[0], s.s[1]),
            CtxInner::Grid(g) => (g.s1.eval(z[0]), g.s2.eval(z[0])),
            CtxInner::Direct => {
                let geo = self.slice(z)?;
                (geo.seps.areas[0], geo.seps.areas[1])
            }
        };
        Ok(match nu {
            1 => s1,
            2 => s2,
            _ => s1 + s2,
        })
    }

    /// Period-asymptotics intercept b_nu(z).
    pub fn b_at(&self, z: &[f64], nu: u8) -> Result<f64> {
        match &self.inner {
            CtxInner::Fixed(s) => Ok(s.b[(nu - 1) as usize]),
            CtxInner::Grid(g) => Ok(g.b[(nu - 1) as usize].eval(z[0])),
            CtxInner::Direct => Ok(self.slice(z)?.period_asymptotics(nu)?.b),
        }
    }

    pub fn omega0_at(&self, z: &[f64]) -> Result<f64> {
        match &self.inner {
            CtxInner::Fixed(s) => Ok(s.frame.omega0),
            CtxInner::Grid(g) => Ok(g.omega0.eval(z[0])),
            CtxInner::Direct => Ok(self.frame_at(z)?.omega0),
        }
    }

    pub fn energy_scale_at(&self, z: &[f64]) -> f64 {
        match &self.inner {
            CtxInner::Fixed(s) => s.energy_scale,
            CtxInner::Grid(g) => g.energy_scale.eval(z[0]),
            CtxInner::Direct => self.slice(z).map(|s| s.energy_scale).unwrap_or(1.0),
        }
    }

    pub fn len_scale_at(&self, z: &[f64]) -> f64 {
        match &self.inner {
            CtxInner::Fixed(s) => s.len_scale,
            CtxInner::Grid(g) => g.len_scale.eval(z[0]),
            CtxInner::Direct => self.slice(z).map(|s| s.len_scale).unwrap_or(1.0),
        }
    }

    pub fn section_radius_at(&self, z: &[f64]) -> f64 {
        match &self.inner {
            CtxInner::Fixed(s) => s.section_radius,
            CtxInner::Grid(g) => g.section_radius.eval(z[0]),
            CtxInner::Direct => self.slice(z).map(|s| s.section_radius).unwrap_or(0.1),
        }
    }

    pub fn h_well_at(&self, z: &[f64], nu: u8) -> Result<f64> {
        match &self.inner {
            CtxInner::Fixed(s) => Ok(s.h_well[(nu - 1) as usize]),
            CtxInner::Grid(g) => Ok(if nu == 1 {
                g.h_well1.eval(z[0])
            } else {
                g.h_well2.eval(z[0])
            }),
            CtxInner::Direct => Ok(self.slice(z)?.h_well[(nu - 1) as usize]),
        }
    }

    /// f3 evaluated at the saddle point (the averaged z-rate on h = 0).
    pub fn f3c_at(&self, z: &[f64]) -> Result<ZVec> {
        let f = self.frame_at(z)?;
        Ok(self.system.perturbation(f.c.0, f.c.1, z, 0.0).f3)
    }

    /// Switch-band half width for the averaged flow at z.
    pub fn h_switch_at(&self, z: &[f64]) -> Result<f64> {
        Ok(self.params.h_switch_frac * self.area_at(z, 3)?)
    }

    /// Assemble the light orbit environment at z (no separatrix tracing).
    pub fn orbit_env(&self, z: &[f64]) -> Result<OrbitEnv> {
        match &self.inner {
            CtxInner::Fixed(s) => Ok(OrbitEnv {
                system: self.system.clone(),
                z: z.to_vec(),
                frame: s.frame.clone(),
                centers: s.centers,
                h_well: s.h_well,
                energy_scale: s.energy_scale,
                len_scale: s.len_scale,
                section_radius: s.section_radius,
                params: self.params.clone(),
            }),
            CtxInner::Grid(g) => {
                let x = z[0];
                Ok(OrbitEnv {
                    system: self.system.clone(),
                    z: z.to_vec(),
                    frame: self.frame_at(z)?,
                    centers: [
                        (g.c1.0.eval(x), g.c1.1.eval(x)),
                        (g.c2.0.eval(x), g.c2.1.eval(x)),
                    ],
                    h_well: [g.h_well1.eval(x), g.h_well2.eval(x)],
                    energy_scale: g.energy_scale.eval(x),
                    len_scale: g.len_scale.eval(x),
                    section_radius: g.section_radius.eval(x),
                    params: self.params.clone(),
                })
            }
            CtxInner::Direct => Ok(self.slice(z)?.env.clone()),
        }
    }

    pub fn quad_error(&self) -> f64 {
        match &self.inner {
            CtxInner::Fixed(s) => s.quad_error,
            CtxInner::Grid(g) => g.quad_error,
            CtxInner::Direct => f64::NAN,
        }
    }

    pub fn grid_z(&self) -> Option<&[f64]> {
        match &self.inner {
            CtxInner::Grid(g) => Some(&g.zs),
            _ => None,
        }
    }

    pub fn detect_region(&self, p: f64, q: f64, z: &[f64]) -> Region {
        let band = self.params.boundary_band_frac * self.energy_scale_at(z);
        let e = self.system.energy(p, q, z);
        if e > band {
            Region::G(3)
        } else if e < -band {
            Region::G(self.system.loop_side(p, q, z))
        } else {
            Region::Boundary
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelPreset, ScaledPerturbation};
    use std::sync::Arc;

    fn geo_for(preset: &ModelPreset, z: &[f64]) -> ZGeometry {
        let sys = preset.instantiate().unwrap();
        ZGeometry::new(&sys, z, &NumericParams::default()).unwrap()
    }

    #[test]
    fn theta_closed_form_dw_slow() {
        for z in [0.5, 1.0, 2.0] {
            let geo = geo_for(&ModelPreset::new("dw-slow"), &[z]);
            let tv = compute_theta(&geo).unwrap();
            let exact = 2.0 * z.sqrt();
            assert!(
                (tv.theta1 - exact).abs() < 1e-6,
                "Theta1({z}) = {} vs {exact}",
                tv.theta1
            );
            assert!((tv.theta2 - exact).abs() < 1e-6);
            assert_eq!(tv.theta3, tv.theta1 + tv.theta2);
        }
        // with friction gamma the loop area enters: Theta = 2 sqrt(z) + gamma S
        for z in [0.5, 1.0, 2.0] {
            let geo = geo_for(&ModelPreset::new("dw-slow").with("gamma", 0.2), &[z]);
            let tv = compute_theta(&geo).unwrap();
            let exact = 2.0 * z.sqrt() + 0.2 * 4.0 / 3.0 * z.powf(1.5);
            assert!(
                (tv.theta1 - exact).abs() < 1e-6,
                "Theta1({z}) = {} vs {exact}",
                tv.theta1
            );
        }
    }

    #[test]
    fn theta_dissip_and_zero_perturbation() {
        let geo = geo_for(&ModelPreset::new("dw-dissip").with("gamma", 0.2), &[]);
        let tv = compute_theta(&geo).unwrap();
        let exact = 0.2 * 4.0 / 3.0;
        assert!((tv.theta1 - exact).abs() < 1e-6);
        assert!((tv.theta2 - exact).abs() < 1e-6);

        let geo = geo_for(&ModelPreset::new("dw-dissip").with("gamma", 0.0), &[]);
        let tv = compute_theta(&geo).unwrap();
        assert!(tv.theta1.abs() < 1e-9 && tv.theta2.abs() < 1e-9);
    }

    #[test]
    fn theta_asym_matches_quadrature_oracle() {
        let geo = geo_for(
            &ModelPreset::new("dw-asym").with("alpha", 0.3).with("gamma", 0.2),
            &[1.0],
        );
        let tv = compute_theta(&geo).unwrap();
        // frozen from the independent factored-quadrature oracle
        assert!((tv.theta1 - 1.787586292848133).abs() < 1e-6, "{}", tv.theta1);
        assert!((tv.theta2 - 2.857432504356671).abs() < 1e-6, "{}", tv.theta2);
        let p = capture_probability(&tv).unwrap();
        assert!((p.p1 - 0.3848394098908351).abs() < 1e-6, "{}", p.p1);
        assert!((p.p1 + p.p2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn refinement_consistency_under_offset_halving() {
        let sys = ModelPreset::new("dw-asym")
            .with("alpha", 0.3)
            .with("gamma", 0.2)
            .instantiate()
            .unwrap();
        let params = NumericParams::default();
        let geo = ZGeometry::new(&sys, &[1.0], &params).unwrap();
        let tv = compute_theta(&geo).unwrap();
        let mut half = params.clone();
        half.sep_offset_frac *= 0.5;
        half.capture_radius_frac *= 0.5;
        let geo_h = ZGeometry::new(&sys, &[1.0], &half).unwrap();
        let tv_h = compute_theta(&geo_h).unwrap();
        let d1 = (tv.theta1 - tv_h.theta1).abs();
        let d2 = (tv.theta2 - tv_h.theta2).abs();
        assert!(
            d1 <= 2.0 * tv.estimated_quadrature_error
                && d2 <= 2.0 * tv.estimated_quadrature_error,
            "refinement moved Theta by ({d1:e}, {d2:e}), est {:e}",
            tv.estimated_quadrature_error
        );
    }

    #[test]
    fn scaling_covariance() {
        let base = ModelPreset::new("dw-slow").with("gamma", 0.2).instantiate().unwrap();
        let geo = ZGeometry::new(&base, &[1.0], &NumericParams::default()).unwrap();
        let tv = compute_theta(&geo).unwrap();
        let p = capture_probability(&tv).unwrap();
        let lam = 3.7;
        let scaled = System::new(Arc::new(ScaledPerturbation {
            inner: base,
            lambda: lam,
        }));
        let geo_s = ZGeometry::new(&scaled, &[1.0], &NumericParams::default()).unwrap();
        let tv_s = compute_theta(&geo_s).unwrap();
        assert!((tv_s.theta1 - lam * tv.theta1).abs() < 1e-8 * lam);
        assert!((tv_s.theta3 - lam * tv.theta3).abs() < 1e-8 * lam);
        let p_s = capture_probability(&tv_s).unwrap();
        assert!((p_s.p1 - p.p1).abs() < 1e-12);
    }

    #[test]
    fn zero_flux_is_condition_c_violation() {
        let geo = geo_for(&ModelPreset::new("dw-slow"), &[1.0]);
        let mut tv = compute_theta(&geo).unwrap();
        tv.theta3 = 0.0;
        assert!(matches!(
            capture_probability(&tv).unwrap_err(),
            Error::ConditionC { .. }
        ));
    }

    #[test]
    fn hypotheses_pass_and_fail() {
        let params = NumericParams::default();
        let sys = ModelPreset::new("dw-slow").instantiate().unwrap();
        let rep = validate_hypotheses(&sys, &[(0.5, 2.0)], &params);
        assert!(rep.all_passed(), "{rep:?}");
        assert!(rep.theta_positive.worst_margin > 1.0); // Theta = 2 sqrt(z) >= 2 sqrt(0.5)

        // f1 = f2 = f3 = 0: condition C fails (zero flux)
        let sys0 = ModelPreset::new("dw-dissip").with("gamma", 0.0).instantiate().unwrap();
        let rep0 = validate_hypotheses(&sys0, &[], &params);
        assert!(!rep0.theta_positive.passed);
        assert!(rep0.saddle.passed && rep0.gradient_at_saddle.passed);

        let sysd = ModelPreset::new("dw-dissip").with("gamma", 0.2).instantiate().unwrap();
        let repd = validate_hypotheses(&sysd, &[], &params);
        assert!(repd.all_passed());
        assert!((repd.theta_positive.worst_margin - 0.2 * 4.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn ctx_interpolation_matches_direct_evaluation() {
        let sys = ModelPreset::new("dw-slow").with("gamma", 0.2).instantiate().unwrap();
        let params = NumericParams::default();
        let ctx = SepCtx::new(&sys, &params).unwrap();
        for z in [0.8, 1.37, 2.6] {
            let (t1, t2, t3) = ctx.theta_at(&[z]).unwrap();
            let exact = 2.0 * z.sqrt() + 0.2 * 4.0 / 3.0 * z.powf(1.5);
            assert!((t1 - exact).abs() < 5e-7, "t1({z}) = {t1} vs {exact}");
            assert!((t2 - exact).abs() < 5e-7);
            assert!((t3 - 2.0 * exact).abs() < 1e-6);
            let s1 = ctx.area_at(&[z], 1).unwrap();
            assert!((s1 - 4.0 / 3.0 * z.powf(1.5)).abs() < 5e-7);
            let w = ctx.omega0_at(&[z]).unwrap();
            assert!((w - z.sqrt()).abs() < 1e-8);
            let f3 = ctx.f3c_at(&[z]).unwrap();
            assert!((f3[0] - 1.0).abs() < 1e-14);
        }
        // frame axes survive interpolation
        let f = ctx.frame_at(&[1.21]).unwrap();
        assert!((f.eta_axis.0 + 1.0).abs() < 1e-9);
        assert!((f.xi_axis.1 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ctx_dim0_and_detect_region() {
        let sys = ModelPreset::new("dw-dissip").with("gamma", 0.2).instantiate().unwrap();
        let ctx = SepCtx::new(&sys, &NumericParams::default()).unwrap();
        assert_eq!(ctx.detect_region(0.0, 1.0, &[]), Region::G(1));
        assert_eq!(ctx.detect_region(0.0, -1.0, &[]), Region::G(2));
        assert_eq!(ctx.detect_region(1.0, 0.0, &[]), Region::G(3));
        assert_eq!(ctx.detect_region(0.0, 0.0, &[]), Region::Boundary);
        let (p1, p2) = ctx.probabilities_at(&[]).unwrap();
        assert!((p1 - 0.5).abs() < 1e-9 && (p2 - 0.5).abs() < 1e-9);
    }
}
