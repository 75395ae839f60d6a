//! Monte Carlo capture fractions against the probability P_nu(z_*).
//!
//! A small desk run (N = 600); the acceptance suite runs N = 4000.
//! Run with: cargo run --release --example capture_ensemble

use separatrix::ensemble::{run_capture_experiment, EnsembleSpec};
use separatrix::model::ModelPreset;
use separatrix::params::NumericParams;
use separatrix::theta::SepCtx;

fn main() -> separatrix::Result<()> {
    for (name, preset, seed) in [
        ("symmetric dw-slow", ModelPreset::new("dw-slow").with("gamma", 0.2), 11u64),
        (
            "asymmetric dw-asym",
            ModelPreset::new("dw-asym").with("alpha", 0.3).with("gamma", 0.2),
            12,
        ),
    ] {
        let sys = preset.instantiate()?;
        let ctx = SepCtx::new(&sys, &NumericParams::default())?;
        let spec = EnsembleSpec {
            base: (0.6f64.sqrt(), 0.0, vec![1.0]),
            delta: 0.05,
            eps: vec![2e-3],
            n: 600,
            seed,
            t_span: 600.0,
            tau_max: Some(0.85),
            with_error_metrics: false,
        };
        let (report, _rows) = run_capture_experiment(&ctx, &spec)?;
        let er = &report.per_eps[0];
        println!("== {name} ==");
        println!(
            "base crossing: tau_* = {:.6}, z_* = {:.6}, P1(z_*) = {:.6}",
            report.tau_star, report.z_star[0], report.p1
        );
        println!(
            "N = {}: n1 = {}, n2 = {}, incomplete = {}",
            er.n, er.n1, er.n2, er.incomplete
        );
        println!(
            "fraction n1/N = {:.4} vs P1 = {:.4}  (binomial se {:.4})",
            er.frac1, report.p1, er.binom_se
        );
        println!(
            "predictor: {}/{} agree, {} excluded near interval endpoints\n",
            er.predictor.agree, er.predictor.checked, er.predictor.excluded
        );
    }
    Ok(())
}
