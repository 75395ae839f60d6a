//! Adaptive Dormand–Prince 5(4) integrator with dense output.
//!
//! The observer sees every accepted step together with its dense interpolant,
//! which is how the rest of the crate implements section crossings, threshold
//! events and sample recording. Systems may cap the next step size through
//! [`OdeSystem::max_step`]; the near-saddle code uses this to bound steps by
//! arc length where the phase velocity vanishes.

use crate::error::{Error, Result};

pub const MAX_DIM: usize = 12;

pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]);
    /// Upper bound on |dt| for the next step, given the current state.
    fn max_step(&self, _t: f64, _y: &[f64]) -> f64 {
        f64::INFINITY
    }
}

/// Dense interpolant of one accepted step, valid on `[t0, t1]`.
pub struct DenseStep<'a> {
    pub t0: f64,
    pub t1: f64,
    dim: usize,
    rcont: &'a [[f64; MAX_DIM]; 5],
}

impl DenseStep<'_> {
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        let h = self.t1 - self.t0;
        let s = (t - self.t0) / h;
        let s1 = 1.0 - s;
        let r = self.rcont;
        for i in 0..self.dim {
            out[i] = r[0][i] + s * (r[1][i] + s1 * (r[2][i] + s * (r[3][i] + s1 * r[4][i])));
        }
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(t, &mut out);
        out
    }

    pub fn component(&self, t: f64, i: usize) -> f64 {
        let h = self.t1 - self.t0;
        let s = (t - self.t0) / h;
        let s1 = 1.0 - s;
        let r = self.rcont;
        r[0][i] + s * (r[1][i] + s1 * (r[2][i] + s * (r[3][i] + s1 * r[4][i])))
    }
}

pub enum StepControl {
    Continue,
    /// Finish the run at the given time inside this step (event location).
    Stop(f64),
}

pub struct OdeOutcome {
    pub t: f64,
    pub y: Vec<f64>,
    pub accepted: usize,
    pub rejected: usize,
    /// true when an observer requested the stop
    pub stopped_by_observer: bool,
}

#[derive(Debug, Clone)]
pub struct Dopri5 {
    pub rtol: f64,
    pub atol: f64,
    pub h_init: Option<f64>,
    pub h_max: f64,
    pub max_steps: usize,
}

impl Default for Dopri5 {
    fn default() -> Self {
        Dopri5 {
            rtol: 1e-9,
            atol: 1e-12,
            h_init: None,
            h_max: f64::INFINITY,
            max_steps: 50_000_000,
        }
    }
}

// Dormand–Prince coefficients
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
// difference between the 5th and the embedded 4th order weights
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
// dense output weights (Hairer & Wanner)
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

impl Dopri5 {
    /// Integrate from `(t0, y0)` towards `t_end`, calling `observe` after each
    /// accepted step. Works in either time direction.
    pub fn solve<S, F>(
        &self,
        sys: &S,
        t0: f64,
        y0: &[f64],
        t_end: f64,
        mut observe: F,
    ) -> Result<OdeOutcome>
    where
        S: OdeSystem + ?Sized,
        F: FnMut(&DenseStep, &[f64]) -> StepControl,
    {
        let n = sys.dim();
        assert!(n <= MAX_DIM && y0.len() == n);
        let dir = if t_end >= t0 { 1.0 } else { -1.0 };

        let mut y = [0.0; MAX_DIM];
        y[..n].copy_from_slice(y0);
        let mut t = t0;

        let mut k = [[0.0; MAX_DIM]; 7];
        let mut ytmp = [0.0; MAX_DIM];
        let mut ynew = [0.0; MAX_DIM];
        let mut rcont = [[0.0; MAX_DIM]; 5];

        sys.rhs(t, &y[..n], &mut k[0][..n]);
        let mut h = dir
            * self
                .h_init
                .unwrap_or_else(|| self.guess_h0(sys, t, &y[..n], &k[0][..n]))
                .abs();

        let safety = 0.9;
        let beta = 0.04;
        let expo1 = 0.2 - beta * 0.75;
        let mut facold: f64 = 1e-4;
        let mut accepted = 0usize;
        let mut rejected = 0usize;
        let mut last_rejected = false;

        loop {
            if accepted + rejected > self.max_steps {
                return Err(Error::Integration {
                    t,
                    msg: format!("step limit {} exceeded", self.max_steps),
                });
            }
            let remaining = t_end - t;
            if remaining * dir <= 0.0 {
                break;
            }
            let cap = sys.max_step(t, &y[..n]).min(self.h_max);
            if h.abs() > cap {
                h = dir * cap;
            }
            let mut final_step = false;
            if h.abs() >= remaining.abs() {
                h = remaining;
                final_step = true;
            }
            if h.abs() < 1e-14 * t.abs().max(1.0) && !final_step {
                return Err(Error::Integration {
                    t,
                    msg: format!("step size underflow (h={h:e}, y={:?})", &y[..n]),
                });
            }

            // stages 2..7 (k1 is fresh from FSAL or the initial evaluation)
            for s in 1..7 {
                for i in 0..n {
                    let mut acc = 0.0;
                    for j in 0..s {
                        acc += A[s][j] * k[j][i];
                    }
                    ytmp[i] = y[i] + h * acc;
                }
                sys.rhs(t + C[s] * h, &ytmp[..n], &mut k[s][..n]);
            }
            // 7th stage row of A is the 5th order solution; ytmp currently holds it
            ynew[..n].copy_from_slice(&ytmp[..n]);

            let mut err: f64 = 0.0;
            for i in 0..n {
                let mut e = 0.0;
                for s in 0..7 {
                    e += E[s] * k[s][i];
                }
                e *= h;
                let sc = self.atol + self.rtol * y[i].abs().max(ynew[i].abs());
                err += (e / sc) * (e / sc);
            }
            err = (err / n as f64).sqrt();
            if !err.is_finite() {
                return Err(Error::Integration {
                    t,
                    msg: "non-finite error estimate".into(),
                });
            }

            if err <= 1.0 {
                // accept
                let fac11 = err.powf(expo1);
                let fac = (fac11 / facold.powf(beta) / safety).clamp(0.1, 5.0);
                let mut hnew = h / fac;
                if last_rejected {
                    hnew = if hnew.abs() < h.abs() { hnew } else { h };
                }
                facold = err.max(1e-4);

                for i in 0..n {
                    let ydiff = ynew[i] - y[i];
                    let bspl = h * k[0][i] - ydiff;
                    rcont[0][i] = y[i];
                    rcont[1][i] = ydiff;
                    rcont[2][i] = bspl;
                    rcont[3][i] = ydiff - h * k[6][i] - bspl;
                    let mut dd = 0.0;
                    for s in 0..7 {
                        dd += D[s] * k[s][i];
                    }
                    rcont[4][i] = h * dd;
                }

                let t_new = t + h;
                let dense = DenseStep {
                    t0: t,
                    t1: t_new,
                    dim: n,
                    rcont: &rcont,
                };
                accepted += 1;
                match observe(&dense, &ynew[..n]) {
                    StepControl::Continue => {}
                    StepControl::Stop(t_stop) => {
                        let mut yf = vec![0.0; n];
                        dense.eval_into(t_stop, &mut yf);
                        return Ok(OdeOutcome {
                            t: t_stop,
                            y: yf,
                            accepted,
                            rejected,
                            stopped_by_observer: true,
                        });
                    }
                }

                t = t_new;
                y[..n].copy_from_slice(&ynew[..n]);
                k[0] = k[6]; // FSAL
                h = hnew;
                last_rejected = false;
            } else {
                let fac11 = err.powf(expo1);
                h /= (fac11 / safety).min(5.0);
                rejected += 1;
                last_rejected = true;
            }
        }

        Ok(OdeOutcome {
            t,
            y: y[..n].to_vec(),
            accepted,
            rejected,
            stopped_by_observer: false,
        })
    }

    fn guess_h0<S: OdeSystem + ?Sized>(&self, sys: &S, t: f64, y: &[f64], f0: &[f64]) -> f64 {
        let n = y.len();
        let sc = |yi: f64| self.atol + self.rtol * yi.abs();
        let d0 = (y.iter().map(|&v| (v / sc(v)).powi(2)).sum::<f64>() / n as f64).sqrt();
        let d1 = (y
            .iter()
            .zip(f0)
            .map(|(&yi, &fi)| (fi / sc(yi)).powi(2))
            .sum::<f64>()
            / n as f64)
            .sqrt();
        let h0 = if d0 < 1e-5 || d1 < 1e-5 {
            1e-6
        } else {
            0.01 * d0 / d1
        };
        let mut y1 = [0.0; MAX_DIM];
        let mut f1 = [0.0; MAX_DIM];
        for i in 0..n {
            y1[i] = y[i] + h0 * f0[i];
        }
        sys.rhs(t + h0, &y1[..n], &mut f1[..n]);
        let d2 = (y
            .iter()
            .zip(f0.iter().zip(&f1[..n]))
            .map(|(&yi, (&a, &b))| (((b - a) / h0) / sc(yi)).powi(2))
            .sum::<f64>()
            / n as f64)
            .sqrt();
        let dm = d1.max(d2);
        let h1 = if dm <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / dm).powf(0.2)
        };
        (100.0 * h0).min(h1).min(self.h_max)
    }
}

/// Locate a root of `f` on `[a, b]` given `f(a) = fa`, `f(b) = fb` with
/// opposite signs. Secant acceleration with bisection fallback.
pub fn refine_root<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, fa: f64, fb: f64, tol: f64) -> f64 {
    debug_assert!(fa == 0.0 || fb == 0.0 || (fa < 0.0) != (fb < 0.0));
    if fa == 0.0 {
        return a;
    }
    if fb == 0.0 {
        return b;
    }
    let (mut lo, mut hi, mut flo, mut fhi) = (a, b, fa, fb);
    for _ in 0..200 {
        if (hi - lo).abs() <= tol {
            break;
        }
        // secant candidate, guarded to the interior
        let mut m = lo - flo * (hi - lo) / (fhi - flo);
        let mid = 0.5 * (lo + hi);
        if !m.is_finite() || (m - lo).abs() < 0.01 * (hi - lo).abs() || (hi - m).abs() < 0.01 * (hi - lo).abs() {
            m = mid;
        }
        let fm = f(m);
        if fm == 0.0 {
            return m;
        }
        if (fm < 0.0) == (flo < 0.0) {
            lo = m;
            flo = fm;
        } else {
            hi = m;
            fhi = fm;
        }
    }
    0.5 * (lo + hi)
}
