use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use vsalient_core::fusionmath::{
    attention_weights, build_mask, dice_loss, focal_loss, fuse_tokens, masked_attention, total_loss,
    total_loss_gradient, LossParams, LossWeights, Outputs,
};
use vsalient_core::SaliencyMap;

/// Attention with the mask written out as `-inf` entries and a full softmax.
fn dense_oracle(q: &DMatrix<f64>, k: &DMatrix<f64>, v: &DMatrix<f64>, d: f64) -> DMatrix<f64> {
    let n = q.nrows();
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| {
                let m = if j == 0 || i == j { 0.0 } else { f64::NEG_INFINITY };
                (q.row(i).dot(&k.row(j)) + m) / d.sqrt()
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        for j in 0..n {
            w[(i, j)] = (logits[j] - max).exp() / z;
        }
    }
    w * v
}

fn qkv() -> impl Strategy<Value = (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    (1usize..=16, 1usize..=32).prop_flat_map(|(l, d)| {
        let m = move || proptest::collection::vec(-3.0..3.0f64, (l + 1) * d).prop_map(move |v| DMatrix::from_row_slice(l + 1, d, &v));
        (m(), m(), m())
    })
}

fn map_pair() -> impl Strategy<Value = (SaliencyMap, SaliencyMap)> {
    (proptest::collection::vec(0.02..0.98f64, 64), proptest::collection::vec(any::<bool>(), 64)).prop_map(|(p, g)| {
        (
            SaliencyMap::new(8, 8, p).unwrap(),
            SaliencyMap::new(8, 8, g.into_iter().map(|b| f64::from(u8::from(b))).collect()).unwrap(),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn attention_matches_dense_oracle((q, k, v) in qkv()) {
        let mask = build_mask(q.nrows() - 1).unwrap();
        let d = q.ncols() as f64;
        let fast = masked_attention(&q, &k, &v, &mask, d).unwrap();
        prop_assert!((fast - dense_oracle(&q, &k, &v, d)).amax() < 1e-6);
    }

    #[test]
    fn masked_weights_are_zero_and_rows_sum_to_one((q, k, _) in qkv()) {
        let n = q.nrows();
        let mask = build_mask(n - 1).unwrap();
        let w = attention_weights(&q, &k, &mask, q.ncols() as f64).unwrap();
        for i in 0..n {
            for j in 0..n {
                if !mask.allows(i, j) {
                    prop_assert_eq!(w[(i, j)], 0.0);
                }
            }
            prop_assert!((w.row(i).sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn image_token_permutation_commutes((q, k, v) in qkv(), seed in any::<u64>()) {
        let n = q.nrows();
        let mut perm: Vec<usize> = (1..n).collect();
        let mut s = seed;
        for i in (1..perm.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let full: Vec<usize> = std::iter::once(0).chain(perm).collect();
        let permute = |m: &DMatrix<f64>| DMatrix::from_fn(n, m.ncols(), |i, j| m[(full[i], j)]);
        let mask = build_mask(n - 1).unwrap();
        let d = q.ncols() as f64;
        let out = masked_attention(&q, &k, &v, &mask, d).unwrap();
        let permuted = masked_attention(&permute(&q), &permute(&k), &permute(&v), &mask, d).unwrap();
        prop_assert!((permute(&out) - permuted).amax() < 1e-12);
    }

    #[test]
    fn fused_tokens_put_text_first(l in 1usize..6, dl in 1usize..5, dv in 1usize..5, d in 1usize..5, seed in any::<u32>()) {
        let mut s = f64::from(seed) * 1e-9;
        let mut next = || { s = (s * 997.0 + 0.123).fract(); s - 0.5 };
        let text = DVector::from_fn(dl, |_, _| next());
        let image = DMatrix::from_fn(l, dv, |_, _| next());
        let pt = DMatrix::from_fn(dl, d, |_, _| next());
        let pv = DMatrix::from_fn(dv, d, |_, _| next());
        let fused = fuse_tokens(&text, &image, &pt, &pv).unwrap();
        prop_assert_eq!(fused.shape(), (l + 1, d));
        prop_assert!((fused.row(0) - text.transpose() * &pt).amax() < 1e-12);
        prop_assert!((fused.rows(1, l) - &image * &pv).amax() < 1e-12);
    }

    #[test]
    fn losses_are_bounded_and_shrink_toward_the_truth((pred, gt) in map_pair()) {
        let mut last = (f64::INFINITY, f64::INFINITY);
        for k in 0..=10 {
            let t = k as f64 / 10.0;
            let p = SaliencyMap::from_fn(8, 8, |x, y| pred.get(x, y) + t * (gt.get(x, y) - pred.get(x, y)));
            let (d, f) = (dice_loss(&p, &gt).unwrap(), focal_loss(&p, &gt, 2.0, 0.25).unwrap());
            prop_assert!((0.0..1.0).contains(&d));
            prop_assert!(f >= 0.0);
            prop_assert!(d <= last.0 + 1e-12 && f <= last.1 + 1e-12, "step {k}: {d} {f} after {last:?}");
            last = (d, f);
        }
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences(
        (pred, gt) in map_pair(),
        sides in proptest::collection::vec(proptest::collection::vec(0.02..0.98f64, 64), 4),
        weights in proptest::collection::vec(0.0..2.0f64, 5),
    ) {
        let sides: Vec<SaliencyMap> = sides.into_iter().map(|v| SaliencyMap::new(8, 8, v).unwrap()).collect();
        let w = LossWeights { fuse: weights[0] + 0.1, side: [weights[1], weights[2], weights[3], weights[4]] };
        let params = LossParams::default();
        let maps: Vec<&SaliencyMap> = std::iter::once(&pred).chain(sides.iter()).collect();
        let outputs = |m: &[SaliencyMap]| total_loss(
            &Outputs { fuse: &m[0], side: [&m[1], &m[2], &m[3], &m[4]] }, &gt, &w, &params,
        ).unwrap();
        let owned: Vec<SaliencyMap> = maps.iter().map(|m| (*m).clone()).collect();
        let grad = total_loss_gradient(&Outputs { fuse: maps[0], side: [maps[1], maps[2], maps[3], maps[4]] }, &gt, &w, &params).unwrap();
        let h = 1e-6;
        for (o, g) in grad.iter().enumerate() {
            for idx in (0..64).step_by(7) {
                let bump = |delta: f64| {
                    let mut m = owned.clone();
                    let (x, y) = (idx % 8, idx / 8);
                    let v = m[o].get(x, y);
                    m[o].set(x, y, v + delta);
                    outputs(&m)
                };
                let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                let scale = numeric.abs().max(g[idx].abs());
                prop_assert!((numeric - g[idx]).abs() <= 1e-4 * scale.max(1e-6), "output {o} pixel {idx}: {numeric} vs {}", g[idx]);
            }
        }
    }

    #[test]
    fn focal_with_flat_weighting_is_half_cross_entropy((pred, gt) in map_pair()) {
        let bce: f64 = pred.values().iter().zip(gt.values()).map(|(p, g)| -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())).sum::<f64>() / 64.0;
        prop_assert!((focal_loss(&pred, &gt, 0.0, 0.5).unwrap() - 0.5 * bce).abs() < 1e-9);
    }
}

#[test]
fn perfect_outputs_cost_almost_nothing() {
    let gt = SaliencyMap::from_fn(40, 40, |x, y| f64::from(u8::from((10..30).contains(&x) && (5..35).contains(&y))));
    let outputs = Outputs { fuse: &gt, side: [&gt; 4] };
    let total = total_loss(&outputs, &gt, &LossWeights::default(), &LossParams::default()).unwrap();
    assert!(total < 5e-3, "{total}");
    assert!(dice_loss(&gt, &gt).unwrap() < 1e-3);
    assert!(focal_loss(&gt, &gt, 2.0, 0.25).unwrap() < 1e-5);
}
