//! Randomised invariants across modules.

use colorproxy::analysis::{feature_correlation, pearson, top_activations};
use colorproxy::colorspace::{hue_chroma, lab_to_srgb, srgb_to_lab, HueChromaImage};
use colorproxy::labelspace::{label_noise, random_buckets, subsample_per_class};
use colorproxy::losses::{kl_histogram_loss, lab_regression_loss};
use colorproxy::model::{Network, NetworkSpec};
use colorproxy::pretrain::TrainingSchedule;
use colorproxy::targets::{build_histogram_target, HistogramTarget, TargetOptions, HUE_BINS, WINDOW};
use colorproxy::tensor::{PaddingMode, Tape, Tensor};
use colorproxy::transfer::{EarlyStopState, StopEvent};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (rows, cols).prop_flat_map(|(r, c)| (Just(r), Just(c), prop::collection::vec(-5.0..5.0f64, r * c)))
}

fn histogram(bins: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..1.0f64, bins).prop_filter_map("empty", |v| {
        let s: f64 = v.iter().sum();
        (s > 1e-3).then(|| v.iter().map(|x| x / s).collect())
    })
}

fn histogram_target() -> impl Strategy<Value = HistogramTarget> {
    (histogram(32), histogram(32)).prop_map(|(h, c)| HistogramTarget {
        hue: h.try_into().unwrap(),
        chroma: c.try_into().unwrap(),
    })
}

/// Schedule read off a score sequence by counting stalls since the last
/// reset; the first score is the baseline.
fn reference_schedule(scores: &[f64], epochs: &[f64], patience: usize, tol: f64) -> (Vec<f64>, Option<f64>, usize) {
    let mut best = scores[0];
    let mut stalls = 0;
    let mut plateaus = Vec::new();
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > best + tol {
            best = s;
            stalls = 0;
        } else {
            stalls += 1;
        }
        if stalls == patience {
            plateaus.push(i);
            stalls = 0;
            if plateaus.len() == 3 {
                break;
            }
        }
    }
    let drops = plateaus.iter().take(2).map(|&i| epochs[i]).collect();
    let stop = plateaus.get(2).map(|&i| epochs[i]);
    let consumed = plateaus.get(2).map_or(scores.len(), |&i| i + 1);
    (drops, stop, consumed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts((r, c, data) in matrix(1..6, 1..8), shift in -20.0..20.0f64) {
        let tape = Tape::<f64>::new();
        let x = Tensor::from_f64(vec![r, c], &data).unwrap();
        let p = tape.constant(x.clone()).softmax(1).unwrap().value();
        let q = tape.constant(x.map(|v| v + shift)).softmax(1).unwrap().value();
        for row in 0..r {
            let s: f64 = p.data()[row * c..(row + 1) * c].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
        prop_assert!(p.max_abs_diff(&q) < 1e-6);
    }

    #[test]
    fn batchnorm_train_output_has_zero_channel_mean(
        n in 2usize..4, c in 1usize..4, hw in 1usize..4, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = colorproxy::tensor::xavier_init::<f64, _>(&[n, c, hw, hw], 1, &mut rng).map(|v| 3.0 * v + 1.0);
        let tape = Tape::<f64>::new();
        let (y, _) = tape.constant(x).batchnorm_train(1e-5).unwrap();
        let y = y.value();
        let plane = hw * hw;
        for ch in 0..c {
            let mean: f64 = (0..n).flat_map(|i| y.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane].to_vec()).sum::<f64>()
                / (n * plane) as f64;
            prop_assert!(mean.abs() < 1e-6, "channel {ch} mean {mean}");
        }
    }

    #[test]
    fn lab_round_trip(r in 0.0..=1.0f64, g in 0.0..=1.0f64, b in 0.0..=1.0f64) {
        let back = lab_to_srgb(srgb_to_lab([r, g, b]));
        for (x, y) in back.iter().zip([r, g, b]) {
            prop_assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn hue_is_scale_invariant(r in 0.0..=1.0f64, g in 0.0..=1.0f64, b in 0.0..=1.0f64, k in 0.05..1.0f64) {
        let (h0, c0) = hue_chroma([r, g, b]);
        let (h1, _) = hue_chroma([k * r, k * g, k * b]);
        if c0 > 1e-9 {
            let d = (h0.unwrap() - h1.unwrap()).rem_euclid(360.0);
            prop_assert!(d.min(360.0 - d) < 1e-6);
        }
    }

    #[test]
    fn achromatic_chroma_is_exactly_zero(g in 0.0..=1.0f64) {
        prop_assert_eq!(hue_chroma([g, g, g]), (None, 0.0));
    }

    #[test]
    fn histogram_targets_are_normalised_and_hue_shift_rotates(
        hues in prop::collection::vec(prop::option::weighted(0.8, 0.0..360.0f64), WINDOW * WINDOW),
        chroma in prop::collection::vec(0.0..1.0f64, WINDOW * WINDOW),
        weighted in any::<bool>(),
    ) {
        let w = WINDOW;
        let opts = TargetOptions { chroma_weighted_hue: weighted, ..Default::default() };
        let img = HueChromaImage::new(w, w, hues.clone(), chroma.clone()).unwrap();
        let t = build_histogram_target(&img, w / 2, w / 2, &opts).unwrap();
        prop_assert!(t.is_normalized(1e-9));

        // Whole-bin shift only commutes with binning when no hue is undefined.
        let defined: Vec<Option<f64>> = hues.iter().map(|h| Some(h.unwrap_or(45.0))).collect();
        let base = build_histogram_target(&HueChromaImage::new(w, w, defined.clone(), chroma.clone()).unwrap(), w / 2, w / 2, &opts).unwrap();
        let width = 360.0 / HUE_BINS as f64;
        let shifted: Vec<Option<f64>> = defined.iter().map(|h| h.map(|v| {
            // Snap to the bin centre so the shift cannot cross an edge by rounding.
            let centre = ((v / width).floor() + 0.5) * width;
            (centre + width).rem_euclid(360.0)
        })).collect();
        let snapped: Vec<Option<f64>> = defined.iter().map(|h| h.map(|v| ((v / width).floor() + 0.5) * width)).collect();
        let a = build_histogram_target(&HueChromaImage::new(w, w, snapped, chroma.clone()).unwrap(), w / 2, w / 2, &opts).unwrap();
        let s = build_histogram_target(&HueChromaImage::new(w, w, shifted, chroma).unwrap(), w / 2, w / 2, &opts).unwrap();
        prop_assert_eq!(a.hue, base.hue);
        for i in 0..HUE_BINS {
            prop_assert_eq!(s.hue[(i + 1) % HUE_BINS], a.hue[i]);
        }
    }

    #[test]
    fn losses_are_non_negative_and_permutation_invariant(
        targets in prop::collection::vec(histogram_target(), 1..5),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let k = targets.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lh = colorproxy::tensor::xavier_init::<f64, _>(&[k, 32], 1, &mut rng);
        let lc = colorproxy::tensor::xavier_init::<f64, _>(&[k, 32], 1, &mut rng);
        let ab = colorproxy::tensor::xavier_init::<f64, _>(&[k, 2], 1, &mut rng);
        let ab_t: Vec<(f64, f64)> = (0..k).map(|i| (i as f64 * 10.0 - 20.0, 5.0 - i as f64)).collect();
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng);
        let rows = |t: &Tensor<f64>, w: usize| {
            let d: Vec<f64> = perm.iter().flat_map(|&i| t.data()[i * w..(i + 1) * w].to_vec()).collect();
            Tensor::from_f64(vec![k, w], &d).unwrap()
        };
        let tape = Tape::<f64>::new();
        let kl = kl_histogram_loss(tape.constant(lh.clone()), tape.constant(lc.clone()), &targets).unwrap().value();
        let pt: Vec<HistogramTarget> = perm.iter().map(|&i| targets[i].clone()).collect();
        let kl_p = kl_histogram_loss(tape.constant(rows(&lh, 32)), tape.constant(rows(&lc, 32)), &pt).unwrap().value();
        prop_assert!(kl >= 0.0);
        prop_assert!((kl - kl_p).abs() < 1e-12);
        let reg = lab_regression_loss(tape.constant(ab.clone()), &ab_t).unwrap().value();
        let pab: Vec<(f64, f64)> = perm.iter().map(|&i| ab_t[i]).collect();
        let reg_p = lab_regression_loss(tape.constant(rows(&ab, 2)), &pab).unwrap().value();
        prop_assert!(reg >= 0.0);
        prop_assert!((reg - reg_p).abs() < 1e-12);
    }

    #[test]
    fn kl_vanishes_exactly_at_the_target(t in histogram_target().prop_filter("full support", |t| t.hue.iter().chain(&t.chroma).all(|&p| p > 1e-6))) {
        let logits = |h: &[f64]| Tensor::from_f64(vec![1, 32], &h.iter().map(|p| p.ln()).collect::<Vec<_>>()).unwrap();
        let tape = Tape::<f64>::new();
        let v = kl_histogram_loss(tape.constant(logits(&t.hue)), tape.constant(logits(&t.chroma)), std::slice::from_ref(&t)).unwrap().value();
        prop_assert!(v.abs() < 1e-9, "{v}");
        let flat = Tensor::from_f64(vec![1, 32], &[0.0; 32]).unwrap();
        let u = kl_histogram_loss(tape.constant(flat.clone()), tape.constant(flat), std::slice::from_ref(&t)).unwrap().value();
        let uniform = t.hue.iter().chain(&t.chroma).all(|&p| (p - 1.0 / 32.0).abs() < 1e-9);
        prop_assert!(uniform || u > 0.0);
    }

    #[test]
    fn learning_rate_is_piecewise_constant(
        epochs in 1usize..5, steps in 1usize..50, a in 0.05..0.95f64, b in 0.05..0.95f64, lr in 1e-4..1.0f64,
    ) {
        let (a, b) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(b - a > 1e-3);
        let e = epochs as f64;
        let sched = TrainingSchedule { epochs: e, base_lr: lr, drops: vec![a * e, b * e], drop_factor: 0.1 };
        let total = sched.total_steps(steps);
        let drops = sched.drop_steps(steps);
        for s in 0..total {
            let n = drops.iter().filter(|&&d| s >= d).count() as i32;
            prop_assert_eq!(sched.lr_at_step(s, steps), lr * 0.1f64.powi(n));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn early_stopping_matches_reference(
        scores in prop::collection::vec(prop::sample::select(vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]), 1..60),
        patience in 1usize..5,
        tol in prop::sample::select(vec![0.0, 0.05, 0.15]),
    ) {
        let epochs: Vec<f64> = (0..scores.len()).map(|i| i as f64 * 0.25).collect();
        let mut state = EarlyStopState::new(patience, tol);
        let mut consumed = 0;
        for (&s, &e) in scores.iter().zip(&epochs) {
            consumed += 1;
            if state.observe(s, e) == StopEvent::Stop {
                break;
            }
        }
        let (drops, stop, want_consumed) = reference_schedule(&scores, &epochs, patience, tol);
        prop_assert_eq!(&state.drop_epochs, &drops);
        prop_assert_eq!(state.stop_epoch, stop);
        prop_assert_eq!(consumed, want_consumed);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn buckets_partition_the_classes(classes in 1usize..40, pick in 0.0..1.0f64, seed in any::<u64>()) {
        let n = 1 + ((classes - 1) as f64 * pick) as usize;
        let m = random_buckets(classes, n, seed).unwrap();
        prop_assert_eq!(m.mapping.len(), classes);
        let mut used = vec![false; n];
        for &g in &m.mapping {
            prop_assert!(g < n);
            used[g] = true;
        }
        prop_assert!(used.iter().all(|&u| u), "empty bucket");
        prop_assert_eq!(&m, &random_buckets(classes, n, seed).unwrap());
    }

    #[test]
    fn noise_redraws_exactly_floor_fraction(
        labels in prop::collection::vec(0usize..10, 0..300), frac in 0.0..=1.0f64, seed in any::<u64>(),
    ) {
        let (out, chosen) = label_noise(&labels, 10, frac, seed).unwrap();
        prop_assert_eq!(chosen.len(), (frac * labels.len() as f64).floor() as usize);
        prop_assert_eq!(out.len(), labels.len());
        for i in 0..labels.len() {
            if chosen.binary_search(&i).is_err() {
                prop_assert_eq!(out[i], labels[i]);
            }
        }
        prop_assert_eq!((out, chosen), label_noise(&labels, 10, frac, seed).unwrap());
    }

    #[test]
    fn subsample_is_flat(per_class in prop::collection::vec(1usize..20, 2..8), k in 1usize..5, seed in any::<u64>()) {
        let labels: Vec<usize> = per_class.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n + k)).collect();
        let keep = subsample_per_class(&labels, per_class.len(), k, seed).unwrap();
        prop_assert_eq!(keep.len(), k * per_class.len());
        let mut hist = vec![0; per_class.len()];
        keep.iter().for_each(|&i| hist[labels[i]] += 1);
        prop_assert!(hist.iter().all(|&h| h == k));
        prop_assert!(keep.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(keep, subsample_per_class(&labels, per_class.len(), k, seed).unwrap());
    }

    #[test]
    fn pearson_is_symmetric_bounded_and_affine_invariant(
        a in prop::collection::vec(-5.0..5.0f64, 3..50), seed in any::<u64>(), s in 0.01..100.0f64, t in -100.0..100.0f64,
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<f64> = a.iter().map(|x| x * rng.random_range(-1.0..1.0) + rng.random_range(-1.0..1.0)).collect();
        let scaled: Vec<f64> = b.iter().map(|x| s * x + t).collect();
        match (pearson(&a, &b), pearson(&b, &a), pearson(&a, &scaled)) {
            (Some(r), Some(r2), Some(r3)) => {
                prop_assert_eq!(r, r2);
                prop_assert!((-1.0..=1.0).contains(&r));
                prop_assert!((r - r3).abs() < 1e-6);
            }
            (None, None, _) => {}
            other => prop_assert!(false, "{:?}", other),
        }
    }
}

fn tiny_net(seed: u64) -> Network<f64> {
    let spec = NetworkSpec::mini_alex(1, 16, PaddingMode::Zero).without_batchnorm();
    Network::build(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn probe(seed: u64, n: usize) -> Tensor<f64> {
    colorproxy::tensor::xavier_init::<f64, _>(&[n, 1, 16, 16], 1, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn network_correlation_is_symmetric(sa in any::<u64>(), sb in any::<u64>()) {
        let (a, b) = (tiny_net(sa), tiny_net(sb));
        let x = probe(sa ^ sb, 4);
        let ab = feature_correlation(&a, &b, &x).unwrap();
        let ba = feature_correlation(&b, &a, &x).unwrap();
        for (la, lb) in ab.layers.iter().zip(&ba.layers) {
            prop_assert_eq!(&la.correlations, &lb.correlations);
            for r in la.correlations.iter().flatten() {
                prop_assert!((-1.0..=1.0).contains(r));
            }
            if let (Some(m), Some(lo), Some(hi)) = (
                la.median,
                la.correlations.iter().flatten().copied().reduce(f64::min),
                la.correlations.iter().flatten().copied().reduce(f64::max),
            ) {
                prop_assert!(lo <= m && m <= hi);
            }
        }
    }

    #[test]
    fn top_activations_match_exhaustive_enumeration(seed in any::<u64>(), m in 1usize..6) {
        let net = tiny_net(seed);
        let x = probe(seed.wrapping_add(1), 3);
        let layer = "conv2_relu";
        let idx = net.spec.layer_index(layer).unwrap();
        let act = net.infer(&x).unwrap().swap_remove(idx);
        let got = top_activations(&net, layer, &x, m).unwrap();
        let s = act.shape().to_vec();
        for c in 0..s[1] {
            let mut all = Vec::new();
            for i in 0..s[0] {
                for y in 0..s[2] {
                    for xx in 0..s[3] {
                        all.push((act.data()[((i * s[1] + c) * s[2] + y) * s[3] + xx], i, y, xx));
                    }
                }
            }
            all.sort_by(|a, b| b.0.total_cmp(&a.0));
            let want: Vec<(usize, usize, usize)> = all.iter().take(m).map(|&(_, i, y, x)| (i, y, x)).collect();
            let have: Vec<(usize, usize, usize)> = got.features[c].iter().map(|r| (r.image, r.y, r.x)).collect();
            // Equal values may legitimately swap places; compare values and positions of distinct maxima.
            let vals: Vec<f64> = got.features[c].iter().map(|r| r.value).collect();
            let want_vals: Vec<f64> = all.iter().take(m).map(|t| t.0).collect();
            prop_assert_eq!(vals, want_vals);
            if all.windows(2).take(m).all(|w| w[0].0 > w[1].0) {
                prop_assert_eq!(have, want);
            }
        }
    }
}
