//! Acceptance harness: one PASS/FAIL line per primary criterion.
//!
//! Runs without the libtest harness (`cargo test --test acceptance`) and exits
//! nonzero when any criterion fails.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use vsalient_core::controller::{
    broyden_update, function_tracker, init_jacobian, score_task, ConstraintSpec, ControllerConfig, EpisodeStatus,
    FeatureTracker, FunctionSession, Servo, StepOutcome,
};
use vsalient_core::fusionmath::{
    attention_weights, build_mask, focal_loss, masked_attention, total_loss, total_loss_gradient, LossParams,
    LossWeights, Outputs,
};
use vsalient_core::geometry::{e_ll, e_par, e_pl, e_pp, line_from_points};
use vsalient_core::metrics::{ciou, iou, mae, max_f_measure, miou, EvalPair};
use vsalient_core::saliency::{default_static_point, pca_extract, weighted_moments, PcaConfig};
use vsalient_core::simulator::{library_names, library_scenario, Scenario, SimSession};
use vsalient_core::task::run_task;
use vsalient_core::trace::{to_jsonl, RunSummary};
use vsalient_core::{ConstraintKind, HomoLine, HomoPoint, SaliencyMap};

const GEOMETRY_FIXTURES: usize = 1000;
const GEOMETRY_TOL: f64 = 1e-9;
const GEOMETRY_BUDGET: Duration = Duration::from_secs(5);

const SECANT_TOL: f64 = 1e-9;
const FD_RECOVERY_TOL: f64 = 1e-9;
const BROYDEN_MAPS: usize = 100;
const BROYDEN_MAX_COND: f64 = 50.0;
const BROYDEN_TARGET: f64 = 1e-6;
const BROYDEN_MAX_STEPS: usize = 50;

const REACH_EPISODES: usize = 100;
const REACH_REQUIRED: usize = 95;
const ALIGN_EPISODES: usize = 50;
const ALIGN_REQUIRED_RATE: f64 = 0.90;
const MAX_OFFSET_PX: f64 = 150.0;
const PIXEL_GOAL: f64 = 2.0;
const CLOSED_LOOP_ITERS: usize = 200;
const CLOSED_LOOP_BUDGET: Duration = Duration::from_secs(120);

const PCA_ANGLE_DEG: f64 = 1.0;
const PCA_CENTROID_PX: f64 = 0.5;
const MOMENTS_TOL: f64 = 1e-9;

const ATTENTION_INSTANCES: usize = 200;
const ATTENTION_TOL: f64 = 1e-6;
const GRADIENT_REL_TOL: f64 = 1e-4;
const FOCAL_IDENTITY_TOL: f64 = 1e-9;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

// ---------------------------------------------------------------- geometry

fn geometry() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6e0);
    let mut failures = Vec::new();
    let coord = |rng: &mut ChaCha8Rng| rng.random_range(-2000.0..2000.0);
    for i in 0..GEOMETRY_FIXTURES {
        let w = if rng.random::<bool>() { rng.random_range(0.05..20.0) } else { rng.random_range(-20.0..-0.05) };
        let (x, y) = (coord(&mut rng), coord(&mut rng));
        let f = HomoPoint::new(x * w, y * w, w);
        let f2 = HomoPoint::new(coord(&mut rng), coord(&mut rng), 1.0);
        let t = rng.random_range(0.0..std::f64::consts::TAU);
        let l1 = HomoLine::new(t.cos(), t.sin(), coord(&mut rng)).unwrap();
        let t2 = rng.random_range(0.0..std::f64::consts::TAU);
        let l2 = HomoLine::new(t2.cos(), t2.sin(), coord(&mut rng)).unwrap();
        let s = rng.random_range(1e-3..1e3) * if rng.random::<bool>() { 1.0 } else { -1.0 };

        if e_pp(f, f).unwrap() != [0.0, 0.0] {
            failures.push(format!("#{i} e_pp(f,f) != 0"));
        }
        let a = e_pl(f, l1).unwrap();
        let b = e_pl(f.scaled(s), l1).unwrap();
        if (a - b).abs() > GEOMETRY_TOL * (1.0 + a.abs()) {
            failures.push(format!("#{i} e_pl scale: {a} vs {b}"));
        }
        if e_ll(f, f2, l1).unwrap() != e_pl(f, l1).unwrap() + e_pl(f2, l1).unwrap() {
            failures.push(format!("#{i} e_ll linearity"));
        }
        if e_par(l1, l2) != -e_par(l2, l1) || e_par(l1, l1) != 0.0 || e_par(l1, l2).abs() > 1.0 + 1e-12 {
            failures.push(format!("#{i} e_par antisymmetry/bound"));
        }
        let (dx, dy) = l1.direction();
        let along = rng.random_range(-1000.0..1000.0);
        let on = HomoPoint::new((-l1.a * l1.c + along * dx) * w, (-l1.b * l1.c + along * dy) * w, w);
        if e_pl(on, l1).unwrap().abs() > GEOMETRY_TOL * (1.0 + l1.c.abs() + along.abs()) {
            failures.push(format!("#{i} e_pl on line"));
        }
        if let Ok(joined) = line_from_points(f, f2) {
            let scale = 1.0 + x.abs().max(y.abs()).max(f2.x.abs()).max(f2.y.abs());
            if e_pl(f, joined).unwrap().abs() > GEOMETRY_TOL * scale || e_pl(f2, joined).unwrap().abs() > GEOMETRY_TOL * scale {
                failures.push(format!("#{i} joining line"));
            }
        }
    }
    let elapsed = started.elapsed();
    verdict(
        failures.is_empty() && elapsed < GEOMETRY_BUDGET,
        format!("{GEOMETRY_FIXTURES} fixtures, {} violations, {:.2?}{}", failures.len(), elapsed, first(&failures)),
    )
}

fn first(failures: &[String]) -> String {
    failures.first().map(|f| format!(", first: {f}")).unwrap_or_default()
}

// ---------------------------------------------------------------- broyden

fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    m.qr().q()
}

/// `U diag(σ) Vᵀ` with singular values spanning exactly `[1, cond]`.
fn conditioned(rng: &mut ChaCha8Rng, n: usize, cond: f64) -> DMatrix<f64> {
    let mut sv: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..cond)).collect();
    sv[0] = 1.0;
    if n > 1 {
        sv[1] = cond;
    }
    let u = random_orthogonal(rng, n);
    let v = random_orthogonal(rng, n);
    u * DMatrix::from_diagonal(&DVector::from_vec(sv)) * v.transpose()
}

fn broyden() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0xb20);
    let cfg = ControllerConfig {
        gain: 0.5,
        max_step: 1e6,
        converge_eps: BROYDEN_TARGET,
        max_iters: BROYDEN_MAX_STEPS,
        ..ControllerConfig::default()
    };
    let (mut secant_worst, mut fd_worst, mut most_steps, mut converged, mut updates) = (0.0f64, 0.0f64, 0usize, 0usize, 0usize);
    let mut worst_cond = 0.0f64;
    for _ in 0..BROYDEN_MAPS {
        let n = rng.random_range(2..=6);
        let a = conditioned(&mut rng, n, BROYDEN_MAX_COND);
        let sv = a.clone().svd(false, false).singular_values;
        worst_cond = worst_cond.max(sv.max() / sv.min());
        let q0: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let map = |q: &[f64]| (&a * DVector::from_column_slice(q)).as_slice().to_vec();

        let j = init_jacobian(|q| Ok(map(q)), &q0, &cfg).unwrap();
        fd_worst = fd_worst.max((&j.0 - &a).amax() / a.amax());

        // Broyden on random probes from a perturbed estimate.
        let mut est = vsalient_core::JacobianEstimate(&a + DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.5..0.5)));
        for _ in 0..10 {
            let dq: Vec<f64> = (0..n).map(|_| rng.random_range(-0.1..0.1)).collect();
            let de = map(&dq);
            est = broyden_update(&est, &dq, &de, &cfg);
            let r = DVector::from_vec(est.apply(&dq)) - DVector::from_column_slice(&de);
            secant_worst = secant_worst.max(r.norm() / (1.0 + DVector::from_column_slice(&de).norm()));
            updates += 1;
        }

        // Closed loop on the linear map, checking the secant condition at every accepted update.
        let mut session = FunctionSession::new(q0, map);
        let mut servo = Servo::new(cfg, function_tracker(n), 0, 0);
        let mut previous: Option<(Vec<f64>, Vec<f64>)> = None;
        loop {
            let outcome = servo.step(&mut session).unwrap();
            let last = servo.trace().steps.last().unwrap().clone();
            if let (Some((q_prev, e_prev)), Some(jac)) = (&previous, servo.jacobian()) {
                let dq: Vec<f64> = last.q.iter().zip(q_prev).map(|(a, b)| a - b).collect();
                if DVector::from_column_slice(&dq).norm() >= cfg.min_dq_norm {
                    let de = DVector::from_iterator(n, last.error.0.iter().zip(e_prev).map(|(a, b)| a - b));
                    let r = DVector::from_vec(jac.apply(&dq)) - &de;
                    secant_worst = secant_worst.max(r.norm() / (1.0 + de.norm()));
                    updates += 1;
                }
            }
            previous = Some((last.q.clone(), last.error.0.clone()));
            if let StepOutcome::Finished(status, _) = outcome {
                let steps = servo.trace().steps.len() - 1;
                if status == EpisodeStatus::Converged && last.error_norm < BROYDEN_TARGET {
                    converged += 1;
                    most_steps = most_steps.max(steps);
                }
                break;
            }
        }
    }
    let pass = secant_worst <= SECANT_TOL
        && fd_worst <= FD_RECOVERY_TOL
        && converged == BROYDEN_MAPS
        && most_steps <= BROYDEN_MAX_STEPS
        && worst_cond <= BROYDEN_MAX_COND * (1.0 + 1e-9);
    verdict(
        pass,
        format!(
            "secant residual {secant_worst:.1e} over {updates} updates, FD init error {fd_worst:.1e}, \
             {converged}/{BROYDEN_MAPS} maps (cond <= {worst_cond:.1}) reached |e| < {BROYDEN_TARGET:e}, slowest {most_steps} steps"
        ),
    )
}

// ---------------------------------------------------------------- closed loop

/// Draws a start pose whose projected target lies within `MAX_OFFSET_PX` of
/// the static point while staying inside the image.
fn sample_start(scenario: &Scenario, rng: &mut ChaCha8Rng, yaw_spread: f64) -> SimSession {
    let goal = default_static_point(scenario.camera.width, scenario.camera.height);
    let margin = 30.0;
    loop {
        let q = vec![
            rng.random_range(-0.15..0.15),
            rng.random_range(-0.15..0.15),
            rng.random_range(-0.08..0.08),
            rng.random_range(-yaw_spread..=yaw_spread),
        ];
        let mut sim = SimSession::new(scenario.camera, scenario.rig.clone(), scenario.objects.clone(), q).unwrap();
        sim.set_active_prompts(vec!["can".into()]);
        let Some(c) = sim.frame(false).projected_centers.get("can").copied() else { continue };
        let inside = c.x > margin && c.y > margin && c.x < scenario.camera.width as f64 - margin && c.y < scenario.camera.height as f64 - margin;
        if inside && (c.x - goal.x).hypot(c.y - goal.y) <= MAX_OFFSET_PX {
            return sim;
        }
    }
}

fn episode(scenario: &Scenario, seed: u64, kinds: &[ConstraintKind], yaw_spread: f64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sim = sample_start(scenario, &mut rng, yaw_spread);
    let stage = &scenario.stages[0];
    let specs = kinds.iter().map(|&k| ConstraintSpec::salient(k)).collect();
    let tracker = FeatureTracker::new(stage.policy(&scenario.camera), specs, PcaConfig::default());
    let cfg = ControllerConfig { max_iters: CLOSED_LOOP_ITERS, ..ControllerConfig::default() };
    let Ok((status, trace)) = vsalient_core::controller::run_attempt(&mut sim, tracker, &cfg, 0, 0) else { return false };
    let Some(last) = trace.steps.last() else { return false };
    let offset = kinds.iter().take_while(|k| **k == ConstraintKind::ParallelLines).count();
    let pixel = last.error.0[offset..].iter().map(|v| v * v).sum::<f64>().sqrt();
    status == EpisodeStatus::Converged && pixel < PIXEL_GOAL && last.step <= CLOSED_LOOP_ITERS
}

fn closed_loop() -> (Verdict, Verdict) {
    let scenario = library_scenario("reach_can_topdown").unwrap();
    let started = Instant::now();
    let reach = (0..REACH_EPISODES as u64)
        .into_par_iter()
        .filter(|&i| episode(&scenario, 1000 + i, &[ConstraintKind::PointToPoint], 0.6))
        .count();
    let align = (0..ALIGN_EPISODES as u64)
        .into_par_iter()
        .filter(|&i| episode(&scenario, 5000 + i, &[ConstraintKind::ParallelLines, ConstraintKind::PointToPoint], 0.35))
        .count();
    let elapsed = started.elapsed();
    let in_time = elapsed < CLOSED_LOOP_BUDGET;
    let align_rate = align as f64 / ALIGN_EPISODES as f64;
    (
        verdict(reach >= REACH_REQUIRED && in_time, format!("{reach}/{REACH_EPISODES} p2p episodes under {PIXEL_GOAL} px (need {REACH_REQUIRED}), {elapsed:.1?} for both suites")),
        verdict(
            align_rate >= ALIGN_REQUIRED_RATE && in_time,
            format!("{align}/{ALIGN_EPISODES} par+p2p episodes converged ({:.0}%, need {:.0}%)", 100.0 * align_rate, 100.0 * ALIGN_REQUIRED_RATE),
        ),
    )
}

// ---------------------------------------------------------------- scenarios

fn scenarios() -> Verdict {
    let golden = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden");
    let mut problems = Vec::new();
    let names = library_names();
    for name in &names {
        let scenario = library_scenario(name).unwrap();
        let cfg = scenario.controller_config();
        let run = run_task(&scenario, &cfg).unwrap();
        let rerun = run_task(&scenario, &cfg).unwrap();
        let summary = RunSummary::from_run(&run);
        if summary.success_rate != 100.0 {
            problems.push(format!("{name}: {}%", summary.success_rate));
        }
        let trace = to_jsonl(&run);
        if trace != to_jsonl(&rerun) {
            problems.push(format!("{name}: rerun differs"));
        }
        match std::fs::read_to_string(golden.join(format!("{name}.trace.jsonl"))) {
            Ok(g) if g == trace => {}
            Ok(_) => problems.push(format!("{name}: golden trace differs")),
            Err(e) => problems.push(format!("{name}: golden trace unreadable ({e})")),
        }
    }
    verdict(problems.is_empty(), format!("{} scenarios at 100%, golden traces identical{}", names.len() - problems.len(), first(&problems)))
}

// ---------------------------------------------------------------- pca

fn rectangle(cx: f64, cy: f64, len: f64, wid: f64, angle: f64) -> SaliencyMap {
    let (c, s) = (angle.cos(), angle.sin());
    SaliencyMap::from_fn(128, 104, |x, y| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        f64::from(u8::from((dx * c + dy * s).abs() <= len / 2.0 && (-dx * s + dy * c).abs() <= wid / 2.0))
    })
}

fn pca() -> Verdict {
    let (cx, cy) = (64.3, 51.7);
    let (mut angle_worst, mut centroid_worst) = (0.0f64, 0.0f64);
    for k in 0..36 {
        let angle = (k as f64 * 5.0).to_radians();
        let f = pca_extract(&rectangle(cx, cy, 70.0, 14.0, angle)).unwrap();
        let d = (f.axis_angle() - angle).to_degrees().rem_euclid(180.0);
        angle_worst = angle_worst.max(d.min(180.0 - d));
        centroid_worst = centroid_worst.max((f.centroid.x - cx).hypot(f.centroid.y - cy));
    }
    let disks_isotropic = [6.0, 11.5, 20.0].iter().all(|&r| {
        let disk = SaliencyMap::from_fn(64, 64, |x, y| f64::from(u8::from((x as f64 - 31.5).hypot(y as f64 - 31.5) <= r)));
        pca_extract(&disk).map(|f| f.isotropic).unwrap_or(false)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(0x9ca);
    let mut moments_worst = 0.0f64;
    for _ in 0..100 {
        let (w, h) = (rng.random_range(4..60), rng.random_range(4..60));
        let m = SaliencyMap::from_fn(w, h, |_, _| if rng.random::<f64>() < 0.3 { 0.0 } else { rng.random() });
        let fast = weighted_moments(&m);
        let (mut s0, mut sx, mut sy, mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let (v, xf, yf) = (m.get(x, y), x as f64, y as f64);
                s0 += v;
                sx += v * xf;
                sy += v * yf;
                sxx += v * xf * xf;
                sxy += v * xf * yf;
                syy += v * yf * yf;
            }
        }
        let (mx, my) = (sx / s0, sy / s0);
        let scale = (w.max(h) as f64).powi(2);
        let diffs = [
            (fast.mass - s0).abs() / s0,
            (fast.mean_x - mx).abs() / w as f64,
            (fast.mean_y - my).abs() / h as f64,
            (fast.cov_xx - (sxx / s0 - mx * mx)).abs() / scale,
            (fast.cov_xy - (sxy / s0 - mx * my)).abs() / scale,
            (fast.cov_yy - (syy / s0 - my * my)).abs() / scale,
        ];
        moments_worst = diffs.iter().fold(moments_worst, |a, &b| a.max(b));
    }
    verdict(
        angle_worst < PCA_ANGLE_DEG && centroid_worst < PCA_CENTROID_PX && disks_isotropic && moments_worst <= MOMENTS_TOL,
        format!(
            "36 orientations: worst angle {angle_worst:.3} deg, worst centroid {centroid_worst:.3} px; \
             disks isotropic: {disks_isotropic}; moments vs brute force {moments_worst:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- fusion

fn outputs(m: &[SaliencyMap]) -> Outputs<'_> {
    Outputs { fuse: &m[0], side: [&m[1], &m[2], &m[3], &m[4]] }
}

fn fusion() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0xf05);
    let (mut oracle_worst, mut masked_worst) = (0.0f64, 0.0f64);
    for _ in 0..ATTENTION_INSTANCES {
        let (l, d) = (rng.random_range(1..=16), rng.random_range(1..=32));
        let n = l + 1;
        let mut m = || DMatrix::from_fn(n, d, |_, _| rng.random_range(-3.0..3.0));
        let (q, k, v) = (m(), m(), m());
        let mask = build_mask(l).unwrap();
        let dense = mask.to_dense();
        let logits = (&q * k.transpose() + &dense) / (d as f64).sqrt();
        let mut w = logits.clone();
        for mut row in w.row_iter_mut() {
            let max = row.max();
            row.apply(|x| *x = (*x - max).exp());
            let z = row.sum();
            row /= z;
        }
        let fast = masked_attention(&q, &k, &v, &mask, d as f64).unwrap();
        oracle_worst = oracle_worst.max((fast - w * &v).amax());
        let weights = attention_weights(&q, &k, &mask, d as f64).unwrap();
        for i in 0..n {
            for j in 0..n {
                if !mask.allows(i, j) {
                    masked_worst = masked_worst.max(weights[(i, j)].abs());
                }
            }
        }
    }

    let params = LossParams::default();
    let gt = SaliencyMap::from_fn(8, 8, |x, y| f64::from(u8::from((x * 3 + y * 5) % 7 < 3)));
    let mut grad_worst = 0.0f64;
    let mut focal_worst = 0.0f64;
    for _ in 0..20 {
        let maps: Vec<SaliencyMap> = (0..5).map(|_| SaliencyMap::from_fn(8, 8, |_, _| rng.random_range(0.02..0.98))).collect();
        let weights = LossWeights { fuse: 1.0, side: [0.5, 0.75, 1.25, 2.0] };
        let grad = total_loss_gradient(&outputs(&maps), &gt, &weights, &params).unwrap();
        let h = 1e-6;
        for o in 0..5 {
            for idx in 0..64 {
                let bump = |delta: f64| {
                    let mut m = maps.clone();
                    let (x, y) = (idx % 8, idx / 8);
                    let v = m[o].get(x, y);
                    m[o].set(x, y, v + delta);
                    total_loss(&outputs(&m), &gt, &weights, &params).unwrap()
                };
                let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                let rel = (numeric - grad[o][idx]).abs() / numeric.abs().max(grad[o][idx].abs()).max(1e-6);
                grad_worst = grad_worst.max(rel);
            }
        }
        let pred = &maps[0];
        let bce = pred.values().iter().zip(gt.values()).map(|(p, g)| -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())).sum::<f64>() / 64.0;
        focal_worst = focal_worst.max((focal_loss(pred, &gt, 0.0, 0.5).unwrap() - 0.5 * bce).abs());
    }
    verdict(
        oracle_worst <= ATTENTION_TOL && masked_worst == 0.0 && grad_worst <= GRADIENT_REL_TOL && focal_worst <= FOCAL_IDENTITY_TOL,
        format!(
            "attention vs dense oracle {oracle_worst:.1e} on {ATTENTION_INSTANCES} instances, masked weight max {masked_worst:e}, \
             gradient rel error {grad_worst:.1e}, focal/BCE identity {focal_worst:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- metrics

fn metrics() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3e7);
    let mut mismatches = 0usize;
    let mut pairs = Vec::new();
    let (mut total_i, mut total_u, mut iou_sum) = (0u64, 0u64, 0.0);
    for _ in 0..40 {
        let (w, h) = (rng.random_range(1..30), rng.random_range(1..30));
        let pred = SaliencyMap::from_fn(w, h, |_, _| f64::from(rng.random_range(0u8..=255)) / 255.0);
        let gt = SaliencyMap::from_fn(w, h, |_, _| f64::from(u8::from(rng.random::<f64>() < 0.4)));
        let (mut tp, mut fp, mut fneg, mut abs) = (0u64, 0u64, 0u64, 0.0);
        for (p, g) in pred.values().iter().zip(gt.values()) {
            let (a, b) = (*p >= 0.5, *g >= 0.5);
            tp += u64::from(a && b);
            fp += u64::from(a && !b);
            fneg += u64::from(!a && b);
            abs += (p - g).abs();
        }
        let union = tp + fp + fneg;
        let expected_iou = if union == 0 { 1.0 } else { tp as f64 / union as f64 };
        total_i += tp;
        total_u += union;
        iou_sum += expected_iou;
        let mut best_f = 0.0f64;
        for k in 0..256 {
            let t = k as f64 / 255.0;
            let (mut tp, mut sel, mut pos) = (0u64, 0u64, 0u64);
            for (p, g) in pred.values().iter().zip(gt.values()) {
                sel += u64::from(*p > t);
                pos += u64::from(*g >= 0.5);
                tp += u64::from(*p > t && *g >= 0.5);
            }
            if tp > 0 {
                let (pr, re) = (tp as f64 / sel as f64, tp as f64 / pos as f64);
                best_f = best_f.max(1.3 * pr * re / (0.3 * pr + re));
            }
        }
        mismatches += usize::from(iou(&pred, &gt, 0.5).unwrap() != expected_iou);
        mismatches += usize::from(mae(&pred, &gt).unwrap() != abs / (w * h) as f64);
        mismatches += usize::from(max_f_measure(&pred, &gt, 0.3, 256).unwrap() != best_f);
        pairs.push(EvalPair::new(pred, gt).unwrap());
    }
    mismatches += usize::from(miou(&pairs, 0.5).unwrap() != iou_sum / pairs.len() as f64);
    mismatches += usize::from(ciou(&pairs, 0.5).unwrap() != total_i as f64 / total_u as f64);

    // Level sets spaced wider than one threshold step before and after x -> x^2.
    let levels = [0.3, 0.45, 0.6, 0.8, 0.95];
    let mut invariance_worst = 0.0f64;
    for _ in 0..50 {
        let idx: Vec<usize> = (0..200).map(|_| rng.random_range(0..levels.len())).collect();
        let gt = SaliencyMap::from_fn(200, 1, |x, _| f64::from(u8::from(idx[x] >= 2 || rng.random::<f64>() < 0.2)));
        let a = SaliencyMap::from_fn(200, 1, |x, _| levels[idx[x]]);
        let b = a.map_values(|v| v * v);
        let diff = (max_f_measure(&a, &gt, 0.3, 256).unwrap() - max_f_measure(&b, &gt, 0.3, 256).unwrap()).abs();
        invariance_worst = invariance_worst.max(diff);
    }
    verdict(
        mismatches == 0 && invariance_worst == 0.0,
        format!("40 fixtures: {mismatches} mismatches vs pixel counting; max-F rescaling difference {invariance_worst:e}"),
    )
}

// ---------------------------------------------------------------- scoring

fn scoring() -> Verdict {
    use EpisodeStatus::*;
    let cases: [(&[EpisodeStatus], f64); 3] =
        [(&[Converged], 100.0), (&[IterBudget, Converged], 50.0), (&[Diverged, FeatureLost], 0.0)];
    let ok = cases.iter().all(|(s, expected)| score_task(s) == *expected);
    verdict(ok, "[success] -> 100, [fail, success] -> 50, [fail, fail] -> 0")
}

fn main() -> ExitCode {
    let started = Instant::now();
    let (reach, align) = closed_loop();
    let results = [
        ("geometry suite", geometry()),
        ("broyden suite", broyden()),
        ("closed-loop reach (p2p)", reach),
        ("closed-loop alignment (par+p2p)", align),
        ("scenario fixtures", scenarios()),
        ("pca extraction", pca()),
        ("fusion kernels", fusion()),
        ("metrics", metrics()),
        ("score_task arithmetic", scoring()),
    ];
    let mut failed = 0;
    for (name, v) in &results {
        println!("{} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.pass);
    }
    println!("acceptance: {} passed, {failed} failed in {:.1?}", results.len() - failed, started.elapsed());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
