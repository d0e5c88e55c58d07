use std::sync::Arc;

use proptest::prelude::*;
use pyrapool::dataio::{add_mean, decode_netpbm, encode_netpbm, subtract_mean, Image};
use pyrapool::detection::{
    combine_models, evaluate_map, iou, nms, nms_grouped, region_feature, Detection, FeatureCache, GroundTruth, RegionConfig,
};
use pyrapool::geometry::{map_window, project_left, project_right, receptive_center, select_scale, FeatureRect};
use pyrapool::inference::{predict_views, View, ViewSet};
use pyrapool::netgraph::{shared, trunk_forward, ParameterStore};
use pyrapool::ops::conv::{conv_forward, ConvSpec};
use pyrapool::ops::dense::softmax;
use pyrapool::ops::pool::{maxpool_backward, maxpool_forward, PoolSpec};
use pyrapool::spp::{bin_range, spp_forward, spp_forward_sliding, PyramidSpec};
use pyrapool::training::sgd_step;
use pyrapool::{Mode, NetworkInstance, NetworkSpec, Shape, Tensor, WindowRect};

fn tensor(shape: Shape, seed: u64) -> Tensor<f32> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let data = (0..shape.numel())
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f32 / (1u64 << 31) as f32) * 2.0 - 1.0
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn image(w: usize, h: usize, seed: u64) -> Image {
    let t = tensor(Shape::new(1, 1, h, w), seed);
    Image::new(w, h, 1, t.data().iter().map(|v| ((v + 1.0) * 127.5).round()).collect()).unwrap()
}

/// Toy network with small-integer weights (every conv sum is exact in f32) and
/// left-right symmetric kernels, so mirroring commutes with each conv layer.
fn mirror_symmetric_toy(seed: u64) -> (Arc<NetworkSpec>, pyrapool::SharedParams) {
    let spec = Arc::new(NetworkSpec::toy(5));
    let mut store = ParameterStore::<f32>::init(&spec, 1.0, seed);
    for slot in store.slots_mut() {
        for v in slot.value.data_mut() {
            *v = v.round().clamp(-2.0, 2.0);
        }
        let sh = slot.value.shape();
        if slot.conv && sh.width > 1 {
            let k = sh.width;
            let data = slot.value.data_mut();
            for row in data.chunks_mut(k) {
                for x in 0..k / 2 {
                    row[k - 1 - x] = row[x];
                }
            }
        }
    }
    (spec, shared(store))
}

fn window() -> impl Strategy<Value = WindowRect> {
    (0i64..200, 0i64..200, 1i64..200, 1i64..200).prop_map(|(x, y, w, h)| WindowRect::new(x, y, x + w, y + h))
}

fn detections(max: usize) -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec((0i64..60, 0i64..60, 1i64..40, 1i64..40, -5.0f64..5.0), 0..max).prop_map(|v| {
        v.into_iter()
            .map(|(x, y, w, h, score)| Detection {
                image_id: 0,
                class_id: 0,
                score,
                rect: WindowRect::new(x, y, x + w, y + h),
            })
            .collect()
    })
}

// tensor_core

proptest! {
    #[test]
    fn softmax_is_a_distribution(n in 1usize..4, c in 1usize..12, scale in 0.1f32..80.0, seed in any::<u64>()) {
        let logits = tensor(Shape::new(n, c, 1, 1), seed);
        let scaled = Tensor::from_vec(logits.shape(), logits.data().iter().map(|v| v * scale).collect()).unwrap();
        let p = softmax(&scaled);
        for i in 0..n {
            let row = p.item(i);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            let total: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((total - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn maxpool_grad_mass_is_conserved_without_overlap(k in 1usize..4, c in 1usize..3, hm in 1usize..5, wm in 1usize..5, seed in any::<u64>()) {
        let x = tensor(Shape::new(1, c, hm * k, wm * k), seed);
        let spec = PoolSpec::new((k, k), (k, k));
        let (out, arg) = maxpool_forward(&x, &spec).unwrap();
        let g = tensor(out.shape(), seed ^ 0x55);
        let gx = maxpool_backward(&g, &arg, x.shape()).unwrap();
        let a: f64 = gx.data().iter().map(|&v| v as f64).sum();
        let b: f64 = g.data().iter().map(|&v| v as f64).sum();
        prop_assert!((a - b).abs() < 1e-5);
    }

    #[test]
    fn conv_output_shape_formula(k in 1usize..6, s in 1usize..4, p in 0usize..4, h in 1usize..14, w in 1usize..14, oc in 1usize..3) {
        let spec = ConvSpec::new(oc, k, s, p);
        let x = tensor(Shape::new(1, 2, h, w), 3);
        let wt = tensor(Shape::new(oc, 2, k, k), 4);
        let out = conv_forward(&x, &wt, &vec![0.0; oc], &spec);
        if h + 2 * p >= k && w + 2 * p >= k {
            let sh = out.unwrap().shape();
            prop_assert_eq!((sh.height, sh.width), ((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1));
            prop_assert_eq!(sh.channels, oc);
        } else {
            prop_assert!(out.is_err());
        }
    }
}

// netgraph

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fixed_length_across_input_sizes(h1 in 4usize..48, w1 in 4usize..48, h2 in 4usize..48, w2 in 4usize..48) {
        let spec = Arc::new(NetworkSpec::toy(5));
        let params = shared(ParameterStore::init(&spec, 0.05, 2));
        let a = NetworkInstance::new(spec.clone(), (h1, w1), params.clone()).unwrap();
        let b = NetworkInstance::new(spec.clone(), (h2, w2), params.clone()).unwrap();
        prop_assert_eq!(a.fc_input_len(), b.fc_input_len());
        let fa = a.feature_at(&tensor(Shape::new(1, 1, h1, w1), 1), "spp").unwrap();
        let fb = b.feature_at(&tensor(Shape::new(1, 1, h2, w2), 2), "spp").unwrap();
        prop_assert_eq!(fa.len(), 336);
        prop_assert_eq!(fb.len(), 336);
    }

    #[test]
    fn seeded_runs_are_identical(seed in any::<u64>(), h in 8usize..30, w in 8usize..30) {
        let spec = Arc::new(NetworkSpec::toy(5));
        let run = || {
            let params = shared(ParameterStore::init(&spec, 0.05, seed));
            let inst = NetworkInstance::new(spec.clone(), (h, w), params).unwrap();
            let x = tensor(Shape::new(2, 1, h, w), seed);
            let (eval, _) = inst.forward(&x, Mode::Eval).unwrap();
            let (train, _) = inst.forward(&x, Mode::Train { seed }).unwrap();
            (eval.into_data(), train.into_data())
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(a.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn update_through_one_instance_is_seen_by_another() {
    let spec = Arc::new(NetworkSpec::toy(5));
    let params = shared(ParameterStore::init(&spec, 0.05, 9));
    let small = NetworkInstance::new(spec.clone(), (24, 24), params.clone()).unwrap();
    let large = NetworkInstance::new(spec.clone(), (32, 32), params.clone()).unwrap();
    let probe = tensor(Shape::new(1, 1, 32, 32), 5);
    let before = large.forward(&probe, Mode::Eval).unwrap().0;

    let x = tensor(Shape::new(2, 1, 24, 24), 6);
    let (logits, trace) = small.forward(&x, Mode::Train { seed: 1 }).unwrap();
    let (_, g) = pyrapool::ops::dense::softmax_cross_entropy(&logits, &[1, 3]).unwrap();
    small.backward(&trace, &g).unwrap();
    sgd_step(&mut params.write().unwrap(), 0.1, 0.9).unwrap();

    assert!(small.shares_parameters_with(&large));
    let after = large.forward(&probe, Mode::Eval).unwrap().0;
    assert_ne!(before.data(), after.data());
    let via_small: Vec<u32> = small.params().read().unwrap().slots().iter().flat_map(|s| s.value.data().iter().map(|v| v.to_bits())).collect();
    let via_large: Vec<u32> = large.params().read().unwrap().slots().iter().flat_map(|s| s.value.data().iter().map(|v| v.to_bits())).collect();
    assert_eq!(via_small, via_large);
}

// spp

#[test]
fn bins_cover_without_gaps() {
    for n in 1..=8 {
        for w in 1..=64 {
            let mut covered = vec![false; w];
            let mut prev_end = 0;
            for i in 1..=n {
                let b = bin_range(i, 1, n, w, 1).unwrap();
                assert!(b.c0 < b.c1, "empty bin {i} of {n} over {w}");
                assert!(b.c0 <= prev_end, "gap before bin {i} of {n} over {w}");
                for c in &mut covered[b.c0..b.c1] {
                    *c = true;
                }
                prev_end = b.c1;
            }
            assert_eq!(prev_end, w);
            assert!(covered.iter().all(|&c| c));
        }
    }
}

#[test]
fn output_length_ignores_map_size() {
    let pyr = PyramidSpec::new(vec![4, 2, 1]).unwrap();
    for h in 1..=40 {
        for w in 1..=40 {
            let (out, _) = spp_forward(&tensor(Shape::new(1, 3, h, w), (h * 41 + w) as u64), &pyr).unwrap();
            assert_eq!(out.len(), 63);
        }
    }
}

proptest! {
    #[test]
    fn sliding_agrees_when_n_divides(n in 1usize..7, m in 1usize..6, c in 1usize..4, seed in any::<u64>()) {
        let pyr = PyramidSpec::new(vec![n]).unwrap();
        let x = tensor(Shape::new(1, c, n * m, n * m), seed);
        let a = spp_forward(&x, &pyr).unwrap().0;
        let b = spp_forward_sliding(&x, &pyr).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }

    #[test]
    fn single_bin_is_global_max(c in 1usize..5, h in 1usize..20, w in 1usize..20, seed in any::<u64>()) {
        let x = tensor(Shape::new(1, c, h, w), seed);
        let (out, _) = spp_forward(&x, &PyramidSpec::new(vec![1]).unwrap()).unwrap();
        for ch in 0..c {
            let m = x.data()[ch * h * w..(ch + 1) * h * w].iter().copied().fold(f32::NEG_INFINITY, f32::max);
            prop_assert_eq!(out.data()[ch], m);
        }
    }

    #[test]
    fn channel_permutation_is_equivariant(c in 2usize..6, h in 1usize..15, w in 1usize..15, seed in any::<u64>(), rot in 1usize..5) {
        let pyr = PyramidSpec::new(vec![3, 2, 1]).unwrap();
        let x = tensor(Shape::new(1, c, h, w), seed);
        let perm: Vec<usize> = (0..c).map(|i| (i + rot) % c).collect();
        let mut px = Vec::with_capacity(x.len());
        for &src in &perm {
            px.extend_from_slice(&x.data()[src * h * w..(src + 1) * h * w]);
        }
        let px = Tensor::from_vec(x.shape(), px).unwrap();
        let a = spp_forward(&x, &pyr).unwrap().0;
        let b = spp_forward(&px, &pyr).unwrap().0;
        for bin in 0..pyr.bins() {
            for (dst, &src) in perm.iter().enumerate() {
                prop_assert_eq!(b.data()[bin * c + dst], a.data()[bin * c + src]);
            }
        }
    }
}

// geometry

#[test]
fn receptive_centre_window_contains_its_cell() {
    for s in [4usize, 8, 12, 16] {
        for c in 0..=20usize {
            let centre = receptive_center(c, s) as i64;
            let win = WindowRect::new(centre - s as i64, centre - s as i64, centre + s as i64, centre + s as i64);
            let r = map_window(&win, s, 21, 21).unwrap();
            assert!(r.contains(c, c), "S={s} cell {c} -> {r:?}");
        }
    }
}

#[test]
fn sub_cell_window_has_no_monotone_collapse() {
    let rect = |x0, x1| map_window(&WindowRect::new(x0, 0, x1, 64), 16, 13, 13).unwrap();
    assert_eq!((rect(20, 30).fx0, rect(20, 30).fx1), (2, 2));
    assert_eq!((rect(10, 30).fx0, rect(10, 30).fx1), (1, 1));
    assert_eq!((rect(20, 40).fx0, rect(20, 40).fx1), (2, 2));
}

fn encloses(outer: &FeatureRect, inner: &FeatureRect) -> bool {
    outer.fx0 <= inner.fx0 && outer.fy0 <= inner.fy0 && outer.fx1 >= inner.fx1 && outer.fy1 >= inner.fy1
}

proptest! {
    #[test]
    fn enlarging_never_shrinks(
        s in prop::sample::select(vec![4usize, 8, 12, 16]),
        win in window(),
        grow in (0i64..40, 0i64..40, 0i64..40, 0i64..40),
    ) {
        prop_assume!(project_right(win.x1, s) >= project_left(win.x0, s));
        prop_assume!(project_right(win.y1, s) >= project_left(win.y0, s));
        let (mw, mh) = (15, 15);
        prop_assume!(win.x0 < (mw * s) as i64 && win.y0 < (mh * s) as i64);
        let big = WindowRect::new(win.x0 - grow.0, win.y0 - grow.1, win.x1 + grow.2, win.y1 + grow.3);
        let a = map_window(&win, s, mw, mh).unwrap();
        let b = map_window(&big, s, mw, mh).unwrap();
        prop_assert!(encloses(&b, &a), "{:?} -> {:?}, {:?} -> {:?}", win, a, big, b);
    }

    #[test]
    fn select_scale_matches_brute_force(win in window(), iw in 50usize..500, ih in 50usize..500, target in 16usize..300) {
        let scales = [480usize, 576, 688, 864, 1200];
        let got = select_scale(&win, (iw, ih), &scales, target).unwrap();
        let min = iw.min(ih) as f64;
        let cost = |s: usize| {
            let f = s as f64 / min;
            ((f * win.width() as f64) * (f * win.height() as f64) - (target * target) as f64).abs()
        };
        let best = scales.iter().map(|&s| cost(s)).fold(f64::INFINITY, f64::min);
        prop_assert_eq!(cost(got), best);
        prop_assert!(scales.iter().filter(|&&s| s < got).all(|&s| cost(s) > best));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Pooling a mapped window from the full-image map equals pooling the cropped map.
    #[test]
    fn crop_map_equivalence(w in 20usize..60, h in 20usize..60, seed in any::<u64>(), fx in (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0)) {
        let spec = NetworkSpec::toy(5);
        let params = shared(ParameterStore::init(&spec, 0.1, seed));
        let img = image(w, h, seed);
        let map = trunk_forward(&spec, &params, &subtract_mean(&img, 128.0)).unwrap();
        let x0 = (fx.0 * (w - 1) as f64) as i64;
        let y0 = (fx.1 * (h - 1) as f64) as i64;
        let x1 = x0 + 1 + (fx.2 * (w as i64 - x0 - 1) as f64) as i64;
        let y1 = y0 + 1 + (fx.3 * (h as i64 - y0 - 1) as f64) as i64;
        let sh = map.shape();
        let r = map_window(&WindowRect::new(x0, y0, x1, y1), 4, sh.width, sh.height).unwrap();
        let pyr = spec.pyramid().unwrap();
        let (region, _) = pyrapool::spp::spp_forward_region(&map, 0, r.rows(), r.cols(), pyr).unwrap();
        let crop = map.crop(r.fy0, r.fy1 + 1, r.fx0, r.fx1 + 1).unwrap();
        let (direct, _) = spp_forward(&crop, pyr).unwrap();
        prop_assert_eq!(region, direct.into_data());
    }

    #[test]
    fn region_feature_is_spp_of_cropped_map(seed in any::<u64>(), wins in prop::collection::vec((0i64..70, 0i64..50, 4i64..40, 4i64..40), 1..6)) {
        let spec = NetworkSpec::toy(5);
        let params = shared(ParameterStore::init(&spec, 0.1, seed));
        let img = image(80, 60, seed);
        let mut cfg = RegionConfig::new(vec![40, 60, 90], 32);
        cfg.l2_normalize = false;
        let cache = FeatureCache::new(&spec, &params, &img, &cfg).unwrap();
        prop_assert_eq!(cache.conv_passes(), 3);
        for (x, y, w, h) in wins {
            let win = WindowRect::new(x, y, (x + w).min(80), (y + h).min(60));
            let (scale, r) = cache.locate(&win, 32).unwrap();
            let crop = cache.map(scale).unwrap().crop(r.fy0, r.fy1 + 1, r.fx0, r.fx1 + 1).unwrap();
            let (direct, _) = spp_forward(&crop, spec.pyramid().unwrap()).unwrap();
            prop_assert_eq!(region_feature(&cache, &spec, &win, &cfg).unwrap(), direct.into_data());
        }
    }
}

// inference

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// With symmetric padding, mirror-symmetric kernels and widths of the form
    /// 4m+1 the conv stack commutes with mirroring, so both routes pool identical cells.
    #[test]
    fn flipped_image_map_equals_flipped_map(m in 5usize..12, h in 20usize..44, seed in any::<u64>(), x0 in 0i64..16, y0 in 0i64..16, ww in 4i64..20, wh in 4i64..20) {
        let w = 4 * m + 1;
        let (spec, params) = mirror_symmetric_toy(seed);
        let img = image(w, h, seed);
        let plain = trunk_forward(&spec, &params, &subtract_mean(&img, 128.0)).unwrap();
        let flipped = trunk_forward(&spec, &params, &subtract_mean(&img.flip_horizontal(), 128.0)).unwrap();
        let mirrored = plain.flip_horizontal();
        prop_assert_eq!(flipped.data(), mirrored.data());
        let win = WindowRect::new(x0, y0, (x0 + ww).min(w as i64), (y0 + wh).min(h as i64)).flip_horizontal(w);
        let sh = flipped.shape();
        let r = map_window(&win, 4, sh.width, sh.height).unwrap();
        let pyr = spec.pyramid().unwrap();
        let a = pyrapool::spp::spp_forward_region(&flipped, 0, r.rows(), r.cols(), pyr).unwrap().0;
        let b = pyrapool::spp::spp_forward_region(&mirrored, 0, r.rows(), r.cols(), pyr).unwrap().0;
        prop_assert_eq!(a, b);
    }

    #[test]
    fn views_pool_from_one_pass_per_scale_and_flip(seed in any::<u64>(), order in any::<u64>(), n in 1usize..12) {
        let spec = Arc::new(NetworkSpec::toy(5));
        let params = shared(ParameterStore::init(&spec, 0.08, seed));
        let img = image(45, 36, seed);
        let mut views = Vec::new();
        for i in 0..n {
            let scale = [32usize, 40][i % 2];
            let x = (i * 3 % 8) as i64;
            views.push(View { scale, rect: WindowRect::new(x, 0, x + 32, 32), flip: i % 3 == 0 });
        }
        let set = ViewSet { views: views.clone() };
        let p = predict_views(&spec, &params, &img, &set, 128.0).unwrap();
        prop_assert_eq!(p.conv_passes, set.passes().len());
        let mut shuffled = views;
        let k = (order as usize) % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let q = predict_views(&spec, &params, &img, &ViewSet { views: shuffled }, 128.0).unwrap();
        for (a, b) in p.probs.iter().zip(&q.probs) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

// detection

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn nms_is_an_idempotent_antichain(dets in detections(20), t in 0.0f64..1.0) {
        let kept = nms(&dets, t);
        for (i, a) in kept.iter().enumerate() {
            prop_assert!(dets.contains(a));
            for b in &kept[i + 1..] {
                prop_assert!(iou(&a.rect, &b.rect) <= t);
            }
        }
        prop_assert_eq!(nms(&kept, t), kept);
    }
}

proptest! {
    #[test]
    fn combining_one_model_is_nms(dets in detections(20), t in 0.0f64..1.0) {
        prop_assert_eq!(combine_models(std::slice::from_ref(&dets), t), nms_grouped(&dets, t));
        prop_assert_eq!(combine_models(&[dets.clone(), dets.clone()], t), nms_grouped(&dets, t));
    }

    #[test]
    fn map_matches_brute_force(
        gts in prop::collection::vec((0usize..2, 0usize..2, 0i64..30, 0i64..30), 1..4),
        ds in prop::collection::vec((0usize..2, 0usize..2, 0i64..30, 0i64..30), 0..4),
    ) {
        let gt: Vec<GroundTruth> = gts.iter().map(|&(im, c, x, y)| GroundTruth { image_id: im, class_id: c, rect: WindowRect::new(x, y, x + 12, y + 12) }).collect();
        let dets: Vec<Detection> = ds.iter().enumerate().map(|(i, &(im, c, x, y))| Detection {
            image_id: im, class_id: c, score: 1.0 - i as f64 * 0.1, rect: WindowRect::new(x, y, x + 12, y + 12),
        }).collect();
        let report = evaluate_map(&dets, &gt, 0.5);
        let classes: std::collections::BTreeSet<usize> = gt.iter().map(|g| g.class_id).collect();
        let mut aps = Vec::new();
        for c in classes {
            aps.push((c, brute_force_ap(&dets, &gt, c)));
        }
        prop_assert_eq!(report.per_class.len(), aps.len());
        for ((c1, a), (c2, b)) in report.per_class.iter().zip(&aps) {
            prop_assert_eq!(c1, c2);
            prop_assert!((a - b).abs() < 1e-12, "class {}: {} vs {}", c1, a, b);
        }
    }
}

/// Area under the interpolated PR curve, enumerating every score cutoff.
fn brute_force_ap(dets: &[Detection], gt: &[GroundTruth], class: usize) -> f64 {
    let mut ranked: Vec<&Detection> = dets.iter().filter(|d| d.class_id == class).collect();
    ranked.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let gts: Vec<&GroundTruth> = gt.iter().filter(|g| g.class_id == class).collect();
    let npos = gts.len() as f64;
    let mut points = Vec::new();
    for k in 1..=ranked.len() {
        let mut claimed = vec![false; gts.len()];
        let mut tp = 0;
        for d in &ranked[..k] {
            let mut best: Option<(usize, f64)> = None;
            for (i, g) in gts.iter().enumerate() {
                if g.image_id != d.image_id {
                    continue;
                }
                let v = iou(&g.rect, &d.rect);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((i, v));
                }
            }
            if let Some((i, v)) = best {
                if v >= 0.5 && !claimed[i] {
                    claimed[i] = true;
                    tp += 1;
                }
            }
        }
        points.push((tp as f64 / npos, tp as f64 / k as f64));
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (i, &(r, _)) in points.iter().enumerate() {
        let p_interp = points[i..].iter().map(|&(_, p)| p).fold(0.0, f64::max);
        ap += (r - prev_r) * p_interp;
        prev_r = r;
    }
    ap
}

// dataio

proptest! {
    #[test]
    fn netpbm_round_trip(w in 1usize..20, h in 1usize..20, c in prop::sample::select(vec![1usize, 3]), seed in any::<u64>()) {
        let t = tensor(Shape::new(1, c, h, w), seed);
        let img = Image::new(w, h, c, t.data().iter().map(|v| ((v + 1.0) * 127.5).round()).collect()).unwrap();
        let back = decode_netpbm(&encode_netpbm(&img)).unwrap();
        prop_assert_eq!(back, img);
    }

    #[test]
    fn mean_subtraction_round_trip(w in 1usize..20, h in 1usize..20, mean in 0.0f32..255.0, seed in any::<u64>()) {
        let img = image(w, h, seed);
        prop_assert_eq!(add_mean(&subtract_mean(&img, mean.round()), mean.round()).unwrap(), img);
    }
}
