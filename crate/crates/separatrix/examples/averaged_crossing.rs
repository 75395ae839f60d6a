//! The glued averaged flow: integrate (H, Z) down to the separatrix, locate
//! the crossing (tau_*, z_*), and continue into both loop sheets.
//!
//! Run with: cargo run --release --example averaged_crossing

use separatrix::averaged::integrate_averaged;
use separatrix::model::ModelPreset;
use separatrix::params::NumericParams;
use separatrix::theta::SepCtx;

fn main() -> separatrix::Result<()> {
    let sys = ModelPreset::new("dw-slow").with("gamma", 0.2).instantiate()?;
    let ctx = SepCtx::new(&sys, &NumericParams::default())?;

    let sol = integrate_averaged(&ctx, 0.3, &[1.0], (0.0, 0.9), None)?;
    let c = sol.crossing.as_ref().expect("the solution crosses");
    println!("crossing: tau_* = {:.9}, z_* = {:.9}", c.tau_star, c.z_star[0]);
    println!("capture probabilities at z_*: P1 = {:.4}, P2 = {:.4}", c.p1, c.p2);
    println!("tau_* localisation error estimate: {:.1e}", c.tau_star_error);

    println!("\n  tau      H (sheet 3)     Z");
    for k in 0..=6 {
        let tau = c.tau_star * k as f64 / 6.0;
        let (h, z) = sol.initial.eval(tau).unwrap();
        println!("  {tau:.3}  {h:+.9}  {:.6}", z[0]);
    }

    println!("\npost-crossing branches (both are produced; the consumer picks):");
    for nu in [1u8, 2] {
        let post = &sol.post.as_ref().unwrap()[(nu - 1) as usize];
        let (h, z) = post.eval(c.tau_star + 0.1).unwrap();
        let (j_star, s_star) = sol.post_action_anchor(&ctx, nu)?;
        println!(
            "  region {nu}: H(tau_*+0.1) = {h:+.6}, Z = {:.6}; J(tau_*+) = {j_star:.9} vs S_nu(z_*)/2pi = {s_star:.9}",
            z[0]
        );
    }

    // the dissipative preset has no slow variable: the crossing is the
    // energy-decay time
    let sys = ModelPreset::new("dw-dissip").with("gamma", 0.2).instantiate()?;
    let ctx = SepCtx::new(&sys, &NumericParams::default())?;
    let sol = integrate_averaged(&ctx, 0.3, &[], (0.0, 6.0), None)?;
    let c = sol.crossing.as_ref().unwrap();
    println!("\ndw-dissip from h0 = 0.3: tau_* = {:.9} (pure energy decay)", c.tau_star);
    Ok(())
}
