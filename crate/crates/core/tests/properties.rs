use convkernels::{
    compute_pair, hflip, krr_fit, krr_predict, lap_weights, patch_trace, readout_lap, trace4, translate, CrossKernel,
    Family, Image, KernelConfig, KernelMatrix, KernelTensor4, PaddingScheme, Readout,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(p: usize, q: usize, c: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(p, q, c, |_, _, _| rng.random_range(-1.0..1.0))
}

fn tensor(p: usize, q: usize, seed: u64) -> KernelTensor4 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    KernelTensor4::from_fn(p, q, |_, _, _, _| rng.random_range(-1.0..1.0))
}

fn family(cntk: bool) -> Family {
    if cntk {
        Family::Cntk
    } else {
        Family::CnnGp
    }
}

fn padding(circular: bool) -> PaddingScheme {
    if circular {
        PaddingScheme::Circular
    } else {
        PaddingScheme::Zero
    }
}

fn max_scale(t: &KernelTensor4) -> f64 {
    t.values().iter().fold(1.0, |m, v| m.max(v.abs()))
}

/// Literal box-window sum, written against the index definition only.
fn lap_oracle(t: &KernelTensor4, c: usize, scheme: PaddingScheme) -> f64 {
    let (p, q, c) = (t.p() as i64, t.q() as i64, c as i64);
    let wrap = |i: i64, n: i64| match scheme {
        PaddingScheme::Circular => Some(i.rem_euclid(n) as usize),
        PaddingScheme::Zero => (0..n).contains(&i).then_some(i as usize),
    };
    let window: Vec<i64> = (-c..=c).collect();
    let mut acc = 0.0;
    for &a in &window {
        for &b in &window {
            for &a2 in &window {
                for &b2 in &window {
                    for i in 0..p {
                        for j in 0..q {
                            if let (Some(r), Some(s), Some(r2), Some(s2)) =
                                (wrap(i + a, p), wrap(j + b, q), wrap(i + a2, p), wrap(j + b2, q))
                            {
                                acc += t.get(r, s, r2, s2);
                            }
                        }
                    }
                }
            }
        }
    }
    acc / (window.len() as f64).powi(4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dp_is_translation_equivariant_entrywise(
        seed in any::<u64>(), a in 0i64..4, b in 0i64..4, depth in 1usize..4, cntk in any::<bool>()
    ) {
        let (x, y) = (image(4, 4, 2, seed), image(4, 4, 2, seed ^ 0x55));
        let cfg = KernelConfig::new(depth, family(cntk)).with_padding(PaddingScheme::Circular);
        let base = compute_pair(&x, &y, &cfg).unwrap();
        let shifted = compute_pair(
            &translate(&x, a, b, PaddingScheme::Circular),
            &translate(&y, a, b, PaddingScheme::Circular),
            &cfg,
        )
        .unwrap();
        let s = max_scale(&base);
        let w = |i: usize, d: i64| (i as i64 + d).rem_euclid(4) as usize;
        for i in 0..4 { for j in 0..4 { for i2 in 0..4 { for j2 in 0..4 {
            let want = base.get(w(i, a), w(j, b), w(i2, a), w(j2, b));
            prop_assert!((shifted.get(i, j, i2, j2) - want).abs() <= 1e-12 * s);
        }}}}
    }

    #[test]
    fn dp_is_flip_equivariant_entrywise(
        seed in any::<u64>(), depth in 1usize..4, cntk in any::<bool>(), circular in any::<bool>()
    ) {
        let (x, y) = (image(4, 3, 2, seed), image(4, 3, 2, seed ^ 0xaa));
        let cfg = KernelConfig::new(depth, family(cntk)).with_padding(padding(circular));
        let base = compute_pair(&x, &y, &cfg).unwrap();
        let flipped = compute_pair(&hflip(&x), &hflip(&y), &cfg).unwrap();
        let s = max_scale(&base);
        for i in 0..4 { for j in 0..3 { for i2 in 0..4 { for j2 in 0..3 {
            let want = base.get(3 - i, j, 3 - i2, j2);
            prop_assert!((flipped.get(i, j, i2, j2) - want).abs() <= 1e-12 * s);
        }}}}
    }

    #[test]
    fn readouts_are_symmetric_and_self_values_nonnegative(
        seed in any::<u64>(), depth in 1usize..4, cntk in any::<bool>(), circular in any::<bool>(), c in 0usize..4
    ) {
        let (x, y) = (image(4, 4, 1, seed), image(4, 4, 1, seed ^ 0x33));
        let pad = padding(circular);
        let cfg = KernelConfig::new(depth, family(cntk)).with_padding(pad);
        let (xy, yx, xx) = (
            compute_pair(&x, &y, &cfg).unwrap(),
            compute_pair(&y, &x, &cfg).unwrap(),
            compute_pair(&x, &x, &cfg).unwrap(),
        );
        for r in [Readout::Fc, Readout::Gap, Readout::lap(c, pad)] {
            let (a, b) = (r.apply(&xy), r.apply(&yx));
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{r}: {a} vs {b}");
            prop_assert!(r.apply(&xx) >= 0.0, "{r}");
        }
    }

    #[test]
    fn lap_matches_literal_window_sum(seed in any::<u64>(), c in 0usize..5, circular in any::<bool>()) {
        let t = tensor(4, 4, seed);
        let pad = padding(circular);
        let got = readout_lap(&t, &lap_weights(4, 4, c, pad)).unwrap();
        prop_assert!((got - lap_oracle(&t, c, pad)).abs() <= 1e-12);
    }

    #[test]
    fn trace4_is_the_naive_diagonal_sum(seed in any::<u64>(), p in 1usize..5, q in 1usize..5) {
        let t = tensor(p, q, seed);
        let mut naive = 0.0;
        for i in 0..p { for j in 0..q { naive += t.get(i, j, i, j); } }
        prop_assert!((trace4(&t) - naive).abs() <= 1e-12);
    }

    #[test]
    fn zero_padded_trace_is_bounded_by_circular_on_nonnegative(seed in any::<u64>(), q in prop::sample::select(vec![1usize, 3])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = KernelTensor4::from_fn(4, 4, |_, _, _, _| rng.random_range(0.0..1.0));
        for i in 1..=4 { for j in 1..=4 { for i2 in 1..=4 { for j2 in 1..=4 {
            let z = patch_trace(&t, [i, j, i2, j2], q, PaddingScheme::Zero).unwrap();
            let c = patch_trace(&t, [i, j, i2, j2], q, PaddingScheme::Circular).unwrap();
            prop_assert!(z <= c + 1e-12);
        }}}}
    }

    #[test]
    fn gram_matrices_are_positive_semidefinite(seed in any::<u64>(), m in 2usize..8, cntk in any::<bool>()) {
        let cfg = KernelConfig::new(2, family(cntk));
        let xs: Vec<Image> = (0..m as u64).map(|k| image(3, 3, 1, seed.wrapping_add(k))).collect();
        let mut raw = vec![0.0; m * m];
        for a in 0..m {
            for b in 0..m {
                raw[a * m + b] = trace4(&compute_pair(&xs[a], &xs[b], &cfg).unwrap());
            }
        }
        let diag = (0..m).map(|a| raw[a * m + a]).fold(0.0, f64::max);
        let k = KernelMatrix::from_raw_with_self(m, raw, vec![1.0; m], vec![0; m], 1).unwrap();
        prop_assert!(k.min_eigenvalue() >= -1e-8 * diag);
    }

    #[test]
    fn predicted_labels_are_invariant_to_kernel_scale(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 6;
        let feats: Vec<[f64; 3]> = (0..n + 3).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let dot = |a: &[f64; 3], b: &[f64; 3]| 1.0 + a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let build = |s: f64| {
            let raw: Vec<f64> = (0..n * n).map(|k| s * dot(&feats[k / n], &feats[k % n])).collect();
            let cross: Vec<f64> = (0..3 * n).map(|k| s * dot(&feats[n + k / n], &feats[k % n])).collect();
            (
                KernelMatrix::from_raw_with_self(n, raw, vec![1.0; n], labels.clone(), 3).unwrap(),
                CrossKernel::from_raw(cross, &[1.0; 3], &[1.0; 6], vec![0; 3]).unwrap(),
            )
        };
        let (k1, c1) = build(1.0);
        let (ks, cs) = build(scale);
        let p1 = krr_predict(&krr_fit(&k1, 0.1).unwrap(), &c1).unwrap();
        let ps = krr_predict(&krr_fit(&ks, 0.1 * scale).unwrap(), &cs).unwrap();
        prop_assert_eq!(p1.labels, ps.labels);
    }
}
