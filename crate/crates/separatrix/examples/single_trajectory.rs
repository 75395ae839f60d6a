//! One full perturbed trajectory: section events, the capture band, the
//! destination region and the pseudo-crossing prediction, compared against
//! the glued averaged solution.
//!
//! Run with: cargo run --release --example single_trajectory

use separatrix::averaged::integrate_averaged;
use separatrix::model::ModelPreset;
use separatrix::params::NumericParams;
use separatrix::sim::{classify_capture, compare_to_averaged, integrate_full, SimOptions};
use separatrix::theta::SepCtx;

fn main() -> separatrix::Result<()> {
    let sys = ModelPreset::new("dw-slow").with("gamma", 0.2).instantiate()?;
    let ctx = SepCtx::new(&sys, &NumericParams::default())?;
    let eps = 1e-3;

    // start on the G3 reference section at h = 0.3
    let geo = ctx.slice(&[1.0])?;
    let (p0, q0) = geo.section_start(0.3, 3)?;
    println!("initial point ({p0:.6}, {q0:.6}), h0 = 0.3, eps = {eps}");

    let opts = SimOptions {
        t_span: (0.0, 850.0),
        sample_stride: 4,
        ..Default::default()
    };
    let traj = integrate_full(&ctx, p0, q0, &[1.0], eps, &opts)?;
    let rec = classify_capture(&ctx, &traj)?;
    println!("\ncapture record:");
    println!("  destination G{}", rec.destination.unwrap());
    println!("  t_- = {:.3}, t_+ = {:.3}", rec.t_minus.unwrap(), rec.t_plus.unwrap());
    println!("  h' at the last section crossing = {:.6e}", rec.h_prime.unwrap());
    println!("  predictor: {:?}, agreement = {:?}", rec.predicted.unwrap(), rec.agreement.unwrap());
    println!("  {} section events recorded", traj.eta_events.len());

    // near-separatrix rounds lose close to eps*Theta3 per round
    let (.., t3) = ctx.theta_at(&[1.5])?;
    println!("\nlast rounds before capture (decrement vs eps Theta3 = {:.3e}):", eps * t3);
    let evs = &traj.eta_events;
    for w in evs.windows(2).rev().take(4).collect::<Vec<_>>().iter().rev() {
        println!(
            "  h' {:.6e} -> {:.6e}   drop {:.3e}",
            w[0].h,
            w[1].h,
            w[0].h - w[1].h
        );
    }

    // deviation from the averaged description
    let avg = integrate_averaged(&ctx, 0.3, &[1.0], (0.0, 0.85), None)?;
    let m = compare_to_averaged(&ctx, &traj, &avg, rec.destination.unwrap())?;
    println!("\nvs averaged: sup pre-crossing |h-H|+|z-Z| = {:.3e} (~K eps)", m.pre_sup);
    println!(
        "            weighted post-crossing sup = {:.3e} (~K eps |ln eps| = {:.1e})",
        m.post_sup_weighted,
        eps * eps.ln().abs()
    );
    Ok(())
}
