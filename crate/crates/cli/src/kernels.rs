//! Seeded spot checks of the fusion kernels against closed forms and a dense
//! attention reference.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use vsalient_core::fusionmath::{
    attention_weights, build_mask, dice_loss, focal_loss, masked_attention, segmentation_loss,
    segmentation_loss_gradient, total_loss, LossParams, LossWeights, Outputs,
};
use vsalient_core::SaliencyMap;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub value: f64,
    pub expected: f64,
    pub tolerance: f64,
    pub pass: bool,
}

fn check(name: &'static str, value: f64, expected: f64, tolerance: f64) -> Check {
    Check { name, value, expected, tolerance, pass: (value - expected).abs() <= tolerance }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn random_map(rng: &mut ChaCha8Rng, w: usize, h: usize, lo: f64, hi: f64) -> SaliencyMap {
    SaliencyMap::from_fn(w, h, |_, _| rng.random_range(lo..hi))
}

/// Plain attention with the mask materialized as `-inf` logits.
fn dense_attention(q: &DMatrix<f64>, k: &DMatrix<f64>, v: &DMatrix<f64>, m: &DMatrix<f64>, d: f64) -> DMatrix<f64> {
    let logits = (q * k.transpose() + m) / d.sqrt();
    let mut w = logits.clone();
    for mut row in w.row_iter_mut() {
        let max = row.max();
        row.apply(|x| *x = (*x - max).exp());
        let z = row.sum();
        row /= z;
    }
    w * v
}

pub fn spot_checks(seed: u64, tokens: usize, dim: usize) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mask = build_mask(tokens).expect("at least one image token");
    let n = mask.size();

    let (q, k, v) = (random_matrix(&mut rng, n, dim), random_matrix(&mut rng, n, dim), random_matrix(&mut rng, n, dim));
    let fast = masked_attention(&q, &k, &v, &mask, dim as f64).expect("shapes agree");
    let dense = dense_attention(&q, &k, &v, &mask.to_dense(), dim as f64);
    out.push(check("attention_vs_dense_max_abs", (fast - dense).amax(), 0.0, 1e-6));

    let w = attention_weights(&q, &k, &mask, dim as f64).expect("shapes agree");
    let masked_max = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| !mask.allows(i, j))
        .map(|(i, j)| w[(i, j)].abs())
        .fold(0.0, f64::max);
    out.push(check("attention_masked_weight_max", masked_max, 0.0, 0.0));
    let row_sum_dev = w.row_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max);
    out.push(check("attention_row_sum_deviation", row_sum_dev, 0.0, 1e-12));

    let zeros = DMatrix::zeros(n, dim);
    let blended = masked_attention(&zeros, &zeros, &v, &mask, dim as f64).expect("shapes agree");
    let mut dev: f64 = (blended.row(0) - v.row(0)).amax();
    for i in 1..n {
        dev = dev.max((blended.row(i) - (v.row(0) + v.row(i)) * 0.5).amax());
    }
    out.push(check("attention_zero_logits_halves", dev, 0.0, 1e-12));

    let empty = SaliencyMap::zeros(10, 10);
    let full = SaliencyMap::from_fn(10, 10, |_, _| 1.0);
    out.push(check("dice_empty_vs_full", dice_loss(&empty, &full).unwrap(), 1.0 - 1.0 / 101.0, 1e-12));
    out.push(check("dice_both_empty", dice_loss(&empty, &empty).unwrap(), 0.0, 1e-12));

    let half = SaliencyMap::from_fn(1, 1, |_, _| 0.5);
    let one = SaliencyMap::from_fn(1, 1, |_, _| 1.0);
    out.push(check("focal_single_pixel", focal_loss(&half, &one, 2.0, 0.25).unwrap(), 0.0625 * 2f64.ln(), 1e-12));

    let pred = random_map(&mut rng, 8, 8, 0.05, 0.95);
    let gt = SaliencyMap::from_fn(8, 8, |x, y| f64::from(u8::from((x + y) % 3 == 0)));
    let bce = pred
        .values()
        .iter()
        .zip(gt.values())
        .map(|(p, g)| -(g * p.ln() + (1.0 - g) * (1.0 - p).ln()))
        .sum::<f64>()
        / 64.0;
    out.push(check("focal_gamma0_half_bce", focal_loss(&pred, &gt, 0.0, 0.5).unwrap(), 0.5 * bce, 1e-9));

    let params = LossParams::default();
    let single = segmentation_loss(&pred, &gt, &params).unwrap();
    let outputs = Outputs { fuse: &pred, side: [&pred; 4] };
    out.push(check(
        "total_loss_five_equal_outputs",
        total_loss(&outputs, &gt, &LossWeights::default(), &params).unwrap(),
        5.0 * single,
        1e-12,
    ));

    let grad = segmentation_loss_gradient(&pred, &gt, &params).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for idx in 0..64 {
        let bump = |delta: f64| {
            let m = SaliencyMap::from_fn(8, 8, |x, y| pred.get(x, y) + if y * 8 + x == idx { delta } else { 0.0 });
            segmentation_loss(&m, &gt, &params).unwrap()
        };
        let numeric = (bump(h) - bump(-h)) / (2.0 * h);
        worst = worst.max((numeric - grad[idx]).abs() / numeric.abs().max(grad[idx].abs()).max(1e-8));
    }
    out.push(check("loss_gradient_fd_relative", worst, 0.0, 1e-4));
    out
}
