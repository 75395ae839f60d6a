//! The single table of numeric defaults. Every threshold the algorithms use
//! is a named field here and can be overridden from CLI configs.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NumericParams {
    /// separatrix tracer start offset along the unstable eigenvector,
    /// as a fraction of the (p,q) length scale
    pub sep_offset_frac: f64,
    /// tracer return-capture radius, fraction of the length scale
    pub capture_radius_frac: f64,
    /// energy floor: level orbits with |h| below this are refused
    pub h_min: f64,
    /// averaged-flow switch band |h| <= h_switch_frac * S3
    pub h_switch_frac: f64,
    /// capture band multipliers: t_- at h = kappa_plus*eps, t_+ at h = -kappa_minus*eps
    pub kappa_plus: f64,
    pub kappa_minus: f64,
    /// saddle neighbourhood radius for section events, fraction of the
    /// smaller loop diameter
    pub section_radius_frac: f64,
    /// tolerances: unperturbed orbit quadrature, separatrix tracer,
    /// full perturbed simulation, averaged flow
    pub orbit_rtol: f64,
    pub orbit_atol: f64,
    pub tracer_rtol: f64,
    pub tracer_atol: f64,
    pub sim_rtol: f64,
    pub sim_atol: f64,
    pub avg_rtol: f64,
    pub avg_atol: f64,
    /// z-grid resolution for interpolated contexts (dim_z = 1)
    pub grid_n: usize,
    /// period-asymptotics ladder: top energy as a fraction of the energy
    /// scale, and the number of halvings
    pub asym_h_top_frac: f64,
    pub asym_ladder: usize,
    /// pseudo-crossing predictor: samples with h' within
    /// margin_factor * eps^(3/2) * Theta3 of an interval endpoint are flagged
    pub predictor_margin_factor: f64,
    /// region-boundary band, fraction of the energy scale
    pub boundary_band_frac: f64,
    /// largest delta accepted by the averaged-distance check hypothesis
    pub delta_max: f64,
}

impl Default for NumericParams {
    fn default() -> Self {
        NumericParams {
            sep_offset_frac: 1e-7,
            capture_radius_frac: 1e-6,
            h_min: 1e-10,
            h_switch_frac: 1e-6,
            kappa_plus: 20.0,
            kappa_minus: 20.0,
            section_radius_frac: 0.5,
            orbit_rtol: 1e-11,
            orbit_atol: 1e-13,
            tracer_rtol: 1e-11,
            tracer_atol: 1e-13,
            sim_rtol: 1e-10,
            sim_atol: 1e-12,
            avg_rtol: 1e-9,
            avg_atol: 1e-12,
            grid_n: 65,
            asym_h_top_frac: 2e-5,
            asym_ladder: 12,
            predictor_margin_factor: 5.0,
            boundary_band_frac: 1e-12,
            delta_max: 0.1,
        }
    }
}
