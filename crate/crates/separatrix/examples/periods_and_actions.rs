//! Level orbits: periods, actions, the logarithmic period divergence near
//! the separatrix, and the action-angle round trip.
//!
//! Run with: cargo run --release --example periods_and_actions

use separatrix::geometry::ZGeometry;
use separatrix::model::ModelPreset;
use separatrix::params::NumericParams;

fn main() -> separatrix::Result<()> {
    let sys = ModelPreset::new("dw-slow").instantiate()?;
    let geo = ZGeometry::new(&sys, &[1.0], &NumericParams::default())?;

    println!("h            T(h, nu=1)     I(h, nu=1)     T(h, nu=3)     I(h, nu=3)");
    for k in 1..=6 {
        let h = 0.25 * 0.25f64.powi(k - 1) / 4.0;
        let (t1, i1) = {
            let o = geo.level_orbit(-h, 1)?;
            (o.period, o.area / std::f64::consts::TAU)
        };
        let (t3, i3) = {
            let o = geo.level_orbit(h, 3)?;
            (o.period, o.area / std::f64::consts::TAU)
        };
        println!("{h:11.4e}  {t1:13.8}  {i1:13.9}  {t3:13.8}  {i3:13.9}");
    }

    println!("\nharmonic limit at the well bottom: T -> 2 pi / sqrt(2) = {:.6}", std::f64::consts::TAU / 2f64.sqrt());
    println!("T(h_well + 1e-6) = {:.6}", geo.period(-0.25 + 1e-6, 1)?);

    println!("\nperiod asymptotics T = -(slope) ln|h| + b:");
    for nu in [1u8, 2, 3] {
        let f = geo.period_asymptotics(nu)?;
        println!(
            "region {nu}: a = {:.6} (expected {:.6}), b = {:.6}, residual {:.1e}",
            f.a, f.expected_a, f.b, f.residual
        );
    }
    let (b1, b2, b3) = (
        geo.period_asymptotics(1)?.b,
        geo.period_asymptotics(2)?.b,
        geo.period_asymptotics(3)?.b,
    );
    println!("b3 - b1 - b2 = {:+.2e}  (ln 16 = {:.6})", b3 - b1 - b2, 16f64.ln());

    println!("\naction-angle round trip:");
    for (p, q) in [(0.3, 1.1), (0.0, 0.5), (0.9, 0.0), (-0.4, -1.2)] {
        let (nu, action, phi) = geo.to_action_angle(p, q)?;
        let (p2, q2) = geo.from_action_angle(nu, action, phi)?;
        println!(
            "({p:+.2}, {q:+.2}) -> region {nu}, I = {action:.6}, phi = {phi:.4} -> back ({p2:+.6}, {q2:+.6})"
        );
    }
    Ok(())
}
