//! Capture probability read off a sweep in eps at one fixed initial point,
//! instead of a sweep over initial conditions. Diagnostic companion to the
//! ensemble experiment.
//!
//! Run with: cargo run --release --example anosov_probe

use separatrix::ensemble::anosov_sweep;
use separatrix::model::ModelPreset;
use separatrix::params::NumericParams;
use separatrix::theta::SepCtx;

fn main() -> separatrix::Result<()> {
    let sys = ModelPreset::new("dw-asym")
        .with("alpha", 0.3)
        .with("gamma", 0.2)
        .instantiate()?;
    let ctx = SepCtx::new(&sys, &NumericParams::default())?;
    let base = (0.6f64.sqrt(), 0.0, vec![1.0]);
    for eps0 in [4e-3, 2e-3] {
        let rep = anosov_sweep(&ctx, (base.0, base.1, &base.2), eps0, 400, 7, 1200.0 * (1e-3 / eps0).max(1.0))?;
        println!(
            "eps0 = {eps0:.0e}: frac1 = {:.4} vs P1(z_*) = {:.4}  (se {:.4}, incomplete {})",
            rep.frac1, rep.p1_pred, rep.binom_se, rep.incomplete
        );
    }
    println!("(the fractions approach P1 as eps0 shrinks; equality is proved only for special perturbations)");
    Ok(())
}
