//! Separatrix fluxes Theta_nu(z) and the capture probabilities P_nu(z).
//!
//! Run with: cargo run --release --example separatrix_flux

use separatrix::geometry::ZGeometry;
use separatrix::model::ModelPreset;
use separatrix::params::NumericParams;
use separatrix::theta::{capture_probability, compute_theta};

fn main() -> separatrix::Result<()> {
    let params = NumericParams::default();

    println!("== dw-slow (gamma = 0.2): Theta = 2 sqrt(z) + gamma (4/3) z^(3/2) ==");
    let sys = ModelPreset::new("dw-slow").with("gamma", 0.2).instantiate()?;
    println!("    z      Theta1 (computed)   (closed form)      P1");
    for z in [0.5, 1.0, 1.5, 2.0] {
        let geo = ZGeometry::new(&sys, &[z], &params)?;
        let tv = compute_theta(&geo)?;
        let p = capture_probability(&tv)?;
        let exact = 2.0 * z.sqrt() + 0.2 * 4.0 / 3.0 * z.powf(1.5);
        println!("  {z:.2}   {:.12}   {exact:.12}   {:.3}", tv.theta1, p.p1);
    }

    println!("\n== dw-asym (alpha = 0.3, gamma = 0.2): asymmetric fluxes ==");
    let sys = ModelPreset::new("dw-asym")
        .with("alpha", 0.3)
        .with("gamma", 0.2)
        .instantiate()?;
    println!("    z      Theta1        Theta2        P1       quad err");
    for z in [0.8, 1.0, 1.3, 1.6] {
        let geo = ZGeometry::new(&sys, &[z], &params)?;
        let tv = compute_theta(&geo)?;
        let p = capture_probability(&tv)?;
        println!(
            "  {z:.2}   {:.9}   {:.9}   {:.6}  {:.1e}",
            tv.theta1, tv.theta2, p.p1, tv.estimated_quadrature_error
        );
    }

    println!("\n== dw-dissip: Theta_nu = gamma S_nu = gamma 4/3 ==");
    let sys = ModelPreset::new("dw-dissip").with("gamma", 0.2).instantiate()?;
    let geo = ZGeometry::new(&sys, &[], &params)?;
    let tv = compute_theta(&geo)?;
    println!(
        "Theta1 = {:.12} (exact {:.12}), Theta3 = {:.12}",
        tv.theta1,
        0.2 * 4.0 / 3.0,
        tv.theta3
    );
    Ok(())
}
