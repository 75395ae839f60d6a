//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured numbers (run with `--nocapture` to see them).
//!
//! Expected values marked "oracle" were computed before the build from
//! independent 1-D quadrature in q (factored p^2) and reference integrations
//! of dtau/dh at rtol 3e-13; see the frozen constants below.

use std::sync::OnceLock;

use separatrix::averaged::integrate_averaged;
use separatrix::ensemble::{error_scaling_sweep, run_capture_experiment, EnsembleSpec};
use separatrix::geometry::ZGeometry;
use separatrix::model::{normalize_energy, ModelPreset, System};
use separatrix::params::NumericParams;
use separatrix::sim::{integrate_full, SimOptions};
use separatrix::theta::{capture_probability, compute_theta, SepCtx};

// frozen oracle values (computed before the build)
const P1_ASYM_AT_ZSTAR: f64 = 0.403612195405; // dw-asym alpha=0.3 gamma=0.2, base h0=0.3 z0=1
const TAU_STAR_SLOW: f64 = 0.526608758764; // dw-slow gamma=0.2, h0=0.3 z0=1

const BASE_P: f64 = 0.774_596_669_241_483_4; // sqrt(0.6): E(p,0,z) = 0.3
const SEED: u64 = 20260810;

fn params() -> NumericParams {
    NumericParams::default()
}

fn ctx_slow() -> &'static SepCtx {
    static CTX: OnceLock<SepCtx> = OnceLock::new();
    CTX.get_or_init(|| {
        let sys = ModelPreset::new("dw-slow").with("gamma", 0.2).instantiate().unwrap();
        SepCtx::new(&sys, &params()).unwrap()
    })
}

fn ctx_asym() -> &'static SepCtx {
    static CTX: OnceLock<SepCtx> = OnceLock::new();
    CTX.get_or_init(|| {
        let sys = ModelPreset::new("dw-asym")
            .with("alpha", 0.3)
            .with("gamma", 0.2)
            .instantiate()
            .unwrap();
        SepCtx::new(&sys, &params()).unwrap()
    })
}

fn base_spec(eps: Vec<f64>, n: usize, seed: u64) -> EnsembleSpec {
    EnsembleSpec {
        base: (BASE_P, 0.0, vec![1.0]),
        delta: 0.05,
        eps,
        n,
        seed,
        t_span: 1.0e6,
        tau_max: Some(0.85),
        with_error_metrics: false,
    }
}

#[test]
fn criterion_1_theta_oracle_equality() {
    let t0 = std::time::Instant::now();
    let mut worst: f64 = 0.0;
    for gamma in [0.0, 0.2] {
        let sys = ModelPreset::new("dw-slow").with("gamma", gamma).instantiate().unwrap();
        for z in [0.5, 1.0, 2.0] {
            let geo = ZGeometry::new(&sys, &[z], &params()).unwrap();
            let tv = compute_theta(&geo).unwrap();
            let exact = 2.0 * z.sqrt() + gamma * 4.0 / 3.0 * z.powf(1.5);
            for th in [tv.theta1, tv.theta2] {
                let err = (th - exact).abs();
                worst = worst.max(err);
                assert!(err <= 1e-6, "Theta(z={z}, gamma={gamma}) = {th} vs {exact}");
            }
        }
    }
    println!(
        "criterion 1: PASS — Theta matches 2 sqrt(z) + gamma (4/3) z^(3/2), worst |err| = {worst:.2e} <= 1e-6 ({:.2?})",
        t0.elapsed()
    );
}

#[test]
fn criterion_2_geometry_oracles() {
    let t0 = std::time::Instant::now();
    let sys = ModelPreset::new("dw-slow").instantiate().unwrap();

    // loop areas against the closed form
    let mut worst_s: f64 = 0.0;
    for z in [0.5, 1.0, 2.0] {
        let geo = ZGeometry::new(&sys, &[z], &params()).unwrap();
        let err = (geo.seps.areas[0] - 4.0 / 3.0 * z.powf(1.5)).abs();
        worst_s = worst_s.max(err);
        assert!(err <= 1e-6, "S1({z}) error {err:e}");
    }

    let geo = ZGeometry::new(&sys, &[1.0], &params()).unwrap();
    // dI/dh = T / 2 pi
    let mut worst_h: f64 = 0.0;
    for (h, nu) in [(-0.06, 1u8), (-0.13, 2), (0.09, 3)] {
        let t = geo.period(h, nu).unwrap();
        let d = 1e-5 * h.abs();
        let fd = (geo.action(h + d, nu).unwrap() - geo.action(h - d, nu).unwrap()) / (2.0 * d);
        let rel = (fd - t / std::f64::consts::TAU).abs() / (t / std::f64::consts::TAU);
        worst_h = worst_h.max(rel);
        assert!(rel <= 1e-5, "dI/dh at (h={h}, nu={nu}): rel err {rel:e}");
    }
    // dI/dz = -(1/2pi) loop integral of dE/dz
    let mut worst_z: f64 = 0.0;
    for (h, nu) in [(-0.06, 1u8), (0.09, 3)] {
        let sysc = geo.system.clone();
        let ez = move |p: f64, q: f64, zz: &[f64]| sysc.grad(p, q, zz).de_dz[0];
        let rhs = -geo.loop_time_integral(&ez, h, nu).unwrap() / std::f64::consts::TAU;
        let d = 1e-5;
        let gp = ZGeometry::new(&sys, &[1.0 + d], &params()).unwrap();
        let gm = ZGeometry::new(&sys, &[1.0 - d], &params()).unwrap();
        let fd = (gp.action(h, nu).unwrap() - gm.action(h, nu).unwrap()) / (2.0 * d);
        let rel = (fd - rhs).abs() / rhs.abs();
        worst_z = worst_z.max(rel);
        assert!(rel <= 1e-5, "dI/dz at (h={h}, nu={nu}): rel err {rel:e}");
    }
    // dS/dz identity over 5 z values: traced-area finite differences vs the
    // loop integral of -dE/dz accumulated on the separatrix
    for k in 0..5 {
        let z = 0.6 + 0.35 * k as f64;
        let d = 1e-5;
        let gp = ZGeometry::new(&sys, &[z + d], &params()).unwrap();
        let gm = ZGeometry::new(&sys, &[z - d], &params()).unwrap();
        let g0 = ZGeometry::new(&sys, &[z], &params()).unwrap();
        let fd = (gp.seps.areas[0] - gm.seps.areas[0]) / (2.0 * d);
        let rel = (fd - g0.seps.dsdz[0][0]).abs() / g0.seps.dsdz[0][0];
        assert!(rel <= 1e-4, "dS1/dz at z={z}: rel err {rel:e}");
    }
    println!(
        "criterion 2: PASS — S1 worst {worst_s:.2e} <= 1e-6; dI/dh worst rel {worst_h:.2e} <= 1e-5; dI/dz worst rel {worst_z:.2e} <= 1e-5 ({:.2?})",
        t0.elapsed()
    );
}

#[test]
fn criterion_3_period_asymptotics() {
    let t0 = std::time::Instant::now();
    let sys = ModelPreset::new("dw-slow").instantiate().unwrap();
    let geo = ZGeometry::new(&sys, &[1.0], &params()).unwrap();
    let f3 = geo.period_asymptotics(3).unwrap();
    let f1 = geo.period_asymptotics(1).unwrap();
    let f2 = geo.period_asymptotics(2).unwrap();
    assert!((f3.a - 1.0).abs() <= 1e-3, "a = {} vs 1/omega0 = 1", f3.a);
    let gap = (f3.b - f1.b - f2.b).abs();
    assert!(gap <= 1e-3, "b3 - b1 - b2 = {gap:e}");
    println!(
        "criterion 3: PASS — fitted a = {:.6} (|a-1| = {:.1e} <= 1e-3), |b3-b1-b2| = {gap:.1e} <= 1e-3 ({:.2?})",
        f3.a,
        (f3.a - 1.0).abs(),
        t0.elapsed()
    );
}

#[test]
fn criterion_4_capture_probability_symmetric() {
    let t0 = std::time::Instant::now();
    let ctx = ctx_slow();
    let spec = base_spec(vec![1e-3], 4000, SEED);
    let (report, _) = run_capture_experiment(ctx, &spec).unwrap();
    let er = &report.per_eps[0];
    let dev = (er.frac1 - 0.5).abs();
    assert!(
        dev <= 0.030,
        "|n1/N - 1/2| = {dev} (n1 = {}, n2 = {})",
        er.n1,
        er.n2
    );
    // the exceptional set stays small
    assert!(
        (er.incomplete as f64) <= 0.01 * spec.n as f64,
        "incomplete = {}",
        er.incomplete
    );
    assert!((report.tau_star - TAU_STAR_SLOW).abs() < 5e-7);
    println!(
        "criterion 4: PASS — n1/N = {:.4} (N = 4000, eps = 1e-3), |dev| = {dev:.4} <= 0.030, incomplete = {} ({:.2?})",
        er.frac1,
        er.incomplete,
        t0.elapsed()
    );
}

#[test]
fn criterion_5_capture_probability_asymmetric() {
    let t0 = std::time::Instant::now();
    let ctx = ctx_asym();
    let spec = base_spec(vec![1e-3], 4000, SEED + 1);
    let (report, _) = run_capture_experiment(ctx, &spec).unwrap();
    let er = &report.per_eps[0];
    // P1 is the frozen pre-build quadrature oracle at the reference z_*
    let dev = (er.frac1 - P1_ASYM_AT_ZSTAR).abs();
    assert!(dev <= 0.035, "|n1/N - P1| = {dev} (frac1 = {})", er.frac1);
    // the internally computed probability agrees with the oracle too
    assert!(
        (report.p1 - P1_ASYM_AT_ZSTAR).abs() < 5e-6,
        "internal P1 = {} vs oracle",
        report.p1
    );
    println!(
        "criterion 5: PASS — n1/N = {:.4} vs oracle P1(z_*) = {P1_ASYM_AT_ZSTAR:.4}, |dev| = {dev:.4} <= 0.035 ({:.2?})",
        er.frac1,
        t0.elapsed()
    );
}

#[test]
fn criterion_6_accuracy_scaling() {
    let t0 = std::time::Instant::now();
    let ctx = ctx_slow();
    let mut spec = base_spec(vec![8e-3, 4e-3, 2e-3, 1e-3], 20, 31);
    spec.delta = 0.1; // the eps < delta^2 smallness must hold across the ladder
    // the post-crossing band descent at eps = 8e-3 takes ~0.35 slow units
    // beyond tau_*, so the horizon must be generous
    spec.tau_max = Some(1.1);
    spec.with_error_metrics = true;
    let (report, rows) = error_scaling_sweep(ctx, &spec).unwrap();
    assert!(
        (report.pre_slope - 1.0).abs() <= 0.15,
        "pre-crossing slope = {}",
        report.pre_slope
    );
    assert!(
        report.post_ratio_max_min <= 1.5,
        "post-crossing normalised spread = {}",
        report.post_ratio_max_min
    );
    // incomplete fraction small and non-increasing in eps
    let mut prev = usize::MAX;
    for er in report.ensemble.per_eps.iter().rev() {
        assert!(er.incomplete * 100 <= er.n, "incomplete = {}", er.incomplete);
        assert!(er.incomplete <= prev);
        prev = er.incomplete;
    }
    // t_+ - t_- = O(ln eps): the ratio to |ln eps| is stable across the
    // ladder (rows come back chunked per eps, in order)
    let mut ratios = Vec::new();
    for (chunk, er) in rows.chunks(spec.n).zip(&report.ensemble.per_eps) {
        let mut gaps: Vec<f64> = chunk
            .iter()
            .filter_map(|r| Some(r.t_plus? - r.t_minus?))
            .collect();
        gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let med = gaps[gaps.len() / 2];
        ratios.push(med / er.eps.ln().abs());
    }
    let rmax = ratios.iter().cloned().fold(0.0f64, f64::max);
    let rmin = ratios.iter().cloned().fold(f64::MAX, f64::min);
    assert!(
        rmax / rmin <= 2.5,
        "(t_+ - t_-)/|ln eps| unstable across the ladder: {ratios:?}"
    );
    println!(
        "criterion 6: PASS — pre slope = {:.3} in 1.0±0.15; post spread max/min = {:.3} <= 1.5 ({:.2?})",
        report.pre_slope,
        report.post_ratio_max_min,
        t0.elapsed()
    );
}

#[test]
fn criterion_7_gluing_action_anchor() {
    let t0 = std::time::Instant::now();
    let ctx = ctx_slow();
    let sol = integrate_averaged(ctx, 0.3, &[1.0], (0.0, 0.85), None).unwrap();
    let mut worst: f64 = 0.0;
    for nu in [1u8, 2] {
        let (j_star, s_star) = sol.post_action_anchor(ctx, nu).unwrap();
        let err = (j_star - s_star).abs();
        worst = worst.max(err);
        assert!(err <= 1e-6, "anchor nu={nu}: |J - S/2pi| = {err:e}");
    }
    println!(
        "criterion 7: PASS — post-crossing J(tau_*+) = S_nu(z_*)/2pi, worst |err| = {worst:.2e} <= 1e-6 ({:.2?})",
        t0.elapsed()
    );
}

#[test]
fn criterion_8_pseudo_crossing_predictor() {
    let t0 = std::time::Instant::now();
    let ctx = ctx_slow();
    let spec = base_spec(vec![1e-3], 2000, SEED + 2);
    let (report, _) = run_capture_experiment(ctx, &spec).unwrap();
    let er = &report.per_eps[0];
    let p = &er.predictor;
    assert!(p.checked > 200, "too few unambiguous samples: {}", p.checked);
    let rate = p.agree as f64 / p.checked as f64;
    assert!(
        rate >= 0.97,
        "predictor agreement {rate} ({}/{} with {} excluded)",
        p.agree,
        p.checked,
        p.excluded
    );
    println!(
        "criterion 8: PASS — agreement {}/{} = {:.4} >= 0.97 ({} margin-excluded) ({:.2?})",
        p.agree,
        p.checked,
        rate,
        p.excluded,
        t0.elapsed()
    );
}

// --- criterion 9: the property suite ---------------------------------------
// The module unit tests carry most of it; these are the cross-cutting
// invariants that need ensemble-scale machinery.

#[test]
fn criterion_9a_core_invariants() {
    let t0 = std::time::Instant::now();
    use rand::Rng;
    use rand::SeedableRng;

    // gradient consistency on random interior points
    let sys = ModelPreset::new("dw-asym")
        .with("alpha", 0.3)
        .with("gamma", 0.2)
        .instantiate()
        .unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let p = rng.gen_range(-2.0..2.0);
        let q = rng.gen_range(-1.8..1.8);
        let z = [rng.gen_range(0.6..2.4)];
        let g = sys.grad(p, q, &z);
        let d = 1e-6;
        let fd = (sys.energy(p + d, q, &z) - sys.energy(p - d, q, &z)) / (2.0 * d);
        assert!((g.de_dp - fd).abs() / (1.0 + fd.abs()) < 1e-6);
    }

    // normalisation: E(C) = 0 and grad E(C) = 0 after normalize_energy
    let samples: Vec<Vec<f64>> = (0..20).map(|i| vec![0.6 + 0.1 * i as f64]).collect();
    let normed = normalize_energy(&sys, &samples).unwrap();
    for z in [0.7, 1.3, 2.2] {
        let zv = [z];
        let f = separatrix::geometry::locate_saddle(&normed, &zv, (0.0, 0.0)).unwrap();
        assert!(normed.energy(f.c.0, f.c.1, &zv).abs() < 1e-12);
        let g = normed.grad(f.c.0, f.c.1, &zv);
        assert!(g.de_dp.abs() < 1e-8 && g.de_dq.abs() < 1e-8 && g.de_dz[0].abs() < 1e-8);
    }
    let twice = normalize_energy(&normed, &samples).unwrap();
    for z in [0.7, 1.3, 2.2] {
        assert!((twice.energy_shift(&[z]) - normed.energy_shift(&[z])).abs() < 1e-12);
    }

    // symmetry: P = 1/2 and b1 = b2 for the symmetric model
    let sym = ModelPreset::new("dw-slow").with("gamma", 0.2).instantiate().unwrap();
    let geo = ZGeometry::new(&sym, &[1.0], &params()).unwrap();
    let tv = compute_theta(&geo).unwrap();
    let pr = capture_probability(&tv).unwrap();
    assert!((pr.p1 - 0.5).abs() < 1e-9);
    let b1 = geo.period_asymptotics(1).unwrap().b;
    let b2 = geo.period_asymptotics(2).unwrap().b;
    assert!((b1 - b2).abs() < 1e-5);

    // energy bookkeeping identity along a perturbed trajectory
    let ctx = ctx_slow();
    let opts = SimOptions {
        t_span: (0.0, 30.0),
        sample_stride: 1,
        track_energy_integral: true,
        ..Default::default()
    };
    let eps = 2e-3;
    let traj = integrate_full(ctx, 0.5, 0.9, &[1.0], eps, &opts).unwrap();
    let acc = traj.energy_integral.as_ref().unwrap();
    let h0 = traj.samples[0].h;
    for (s, &a) in traj.samples.iter().zip(acc.iter()) {
        assert!((s.h - h0 - eps * a).abs() < 1e-9 * (1.0 + (s.h - h0).abs()));
    }
    println!(
        "criterion 9a: PASS — gradients, normalisation, symmetry (P = 1/2, b1 = b2), energy bookkeeping ({:.2?})",
        t0.elapsed()
    );
}

#[test]
fn criterion_9b_determinism_and_subbox_additivity() {
    let t0 = std::time::Instant::now();
    let ctx = ctx_slow();
    let spec = base_spec(vec![2e-3], 64, 77);
    let (r1, rows1) = run_capture_experiment(ctx, &spec).unwrap();
    let (r2, rows2) = run_capture_experiment(ctx, &spec).unwrap();
    assert_eq!(
        serde_json::to_string(&r1).unwrap(),
        serde_json::to_string(&r2).unwrap(),
        "report must be bit-for-bit reproducible"
    );
    assert_eq!(
        serde_json::to_string(&rows1).unwrap(),
        serde_json::to_string(&rows2).unwrap()
    );
    // splitting the box into 8 octants and summing per-octant counts
    // reproduces the totals exactly
    let env = ctx.orbit_env(&[1.0]).unwrap();
    let (_, i0, phi0) = env.to_action_angle(BASE_P, 0.0).unwrap();
    let mut counts = [[0usize; 2]; 8];
    for r in &rows1 {
        let b = |v: f64, c: f64| usize::from(v >= c);
        let o = b(r.z_drawn[0], 1.0) * 4 + b(r.action_drawn, i0) * 2 + b(r.phi_drawn, phi0);
        match r.destination {
            Some(1) => counts[o][0] += 1,
            Some(2) => counts[o][1] += 1,
            _ => {}
        }
    }
    let n1: usize = counts.iter().map(|c| c[0]).sum();
    let n2: usize = counts.iter().map(|c| c[1]).sum();
    assert_eq!(n1, r1.per_eps[0].n1);
    assert_eq!(n2, r1.per_eps[0].n2);
    println!(
        "criterion 9b: PASS — bit-identical reports under fixed seed; octant counts sum exactly ({:.2?})",
        t0.elapsed()
    );
}

#[test]
fn criterion_9c_fraction_convergence_in_n() {
    let t0 = std::time::Instant::now();
    let ctx = ctx_slow();
    let mut devs = Vec::new();
    for n in [500usize, 2000, 8000] {
        let mut spec = base_spec(vec![4e-3], n, 123);
        spec.delta = 0.08;
        let (report, _) = run_capture_experiment(ctx, &spec).unwrap();
        let er = &report.per_eps[0];
        let dev = (er.frac1 - 0.5).abs();
        // |f - 1/2| scales like N^(-1/2): the normalised deviation stays O(1)
        assert!(
            dev * (n as f64).sqrt() <= 2.5,
            "N = {n}: dev {dev} (normalised {})",
            dev * (n as f64).sqrt()
        );
        devs.push((n, dev, dev * (n as f64).sqrt()));
    }
    println!("criterion 9c: PASS — |n1/N - 1/2| * sqrt(N) stays O(1): {devs:?} ({:.2?})", t0.elapsed());
}

#[test]
fn criterion_9d_budget_shape_in_delta() {
    let t0 = std::time::Instant::now();
    let ctx = ctx_slow();
    let eps = 5e-4;
    let mut pts = Vec::new();
    for (k, delta) in [0.025, 0.05, 0.1].into_iter().enumerate() {
        let mut spec = base_spec(vec![eps], 1200, 900 + k as u64);
        spec.delta = delta;
        let (report, _) = run_capture_experiment(ctx, &spec).unwrap();
        let er = &report.per_eps[0];
        pts.push((delta, (er.frac1 - 0.5f64).abs(), er.binom_se));
    }
    // non-negative least squares for dev ~ c1 delta + c2 eps|ln eps|/delta
    let e_term = eps * eps.ln().abs();
    let basis: Vec<(f64, f64)> = pts.iter().map(|&(d, _, _)| (d, e_term / d)).collect();
    let solve = |c1: f64, c2: f64| -> f64 {
        pts.iter()
            .zip(&basis)
            .map(|(&(_, dev, _), &(a, b))| (dev - c1 * a - c2 * b).powi(2))
            .sum::<f64>()
    };
    // coarse grid search over the strictly positive quadrant is plenty here
    let mut best = (0.02, 0.05, solve(0.02, 0.05));
    for i in 1..=60 {
        for j in 1..=60 {
            let c1 = i as f64 * 0.02;
            let c2 = j as f64 * 0.05;
            let r = solve(c1, c2);
            if r < best.2 {
                best = (c1, c2, r);
            }
        }
    }
    let rms = (best.2 / pts.len() as f64).sqrt();
    let noise = 3.0 * pts.iter().map(|p| p.2).fold(0.0f64, f64::max);
    assert!(
        rms <= noise,
        "budget shape misfit: rms {rms} vs noise allowance {noise} (pts {pts:?})"
    );
    println!(
        "criterion 9d: PASS — deviations {:?} fit c1 d + c2 e|ln e|/d with c1 = {:.3}, c2 = {:.3}, rms {rms:.2e} <= {noise:.2e} ({:.2?})",
        pts.iter().map(|p| (p.0, p.1)).collect::<Vec<_>>(),
        best.0,
        best.1,
        t0.elapsed()
    );
}

#[test]
fn criterion_9e_flux_limit_slope() {
    // loop integral over E = h of the energy-rate integrand tends to -Theta3
    // with an O(h ln h) error: the normalised error stays bounded on a ladder
    let t0 = std::time::Instant::now();
    let ctx = ctx_slow();
    let geo = ctx.slice(&[1.0]).unwrap();
    let (_, _, t3) = ctx.theta_at(&[1.0]).unwrap();
    let sysc = ctx.system.clone();
    let g_e = move |p: f64, q: f64, zz: &[f64]| sysc.energy_rate_integrand(p, q, zz);
    let mut normalised = Vec::new();
    for k in 0..5 {
        let h = 1e-3 * 4.0f64.powi(-k);
        let v = geo.loop_time_integral(&g_e, h, 3).unwrap();
        let err = (v + t3).abs();
        normalised.push(err / (h * h.ln().abs()));
    }
    let mx = normalised.iter().cloned().fold(0.0f64, f64::max);
    let mn = normalised.iter().cloned().fold(f64::MAX, f64::min);
    assert!(
        mx / mn < 10.0 && mx < 10.0,
        "error does not shrink like h ln h: {normalised:?}"
    );
    println!(
        "criterion 9e: PASS — (loop flux + Theta3)/(h|ln h|) stays O(1): spread {:.2} ({:.2?})",
        mx / mn,
        t0.elapsed()
    );
}
