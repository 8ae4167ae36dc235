use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use piza::evaluation::{
    accuracy_from_ious, enumerate_windows, mean_accuracy_from_ious, thresholds, tile_grid, window_count, WindowConfig,
};
use piza::geometry::{clamp_shift, giou, iou, to_global, to_local, BBox, ImageSize, NormBox, RgbImage};
use piza::inference::{zoom_infer, InferConfig, ScriptedController};
use piza::localizer::{OracleLocalizer, Prediction};
use piza::piza::low_level_features;
use piza::prior::{fit_kde, Bandwidth};
use piza::search::{build_process, exp_weights, select_steps, zoom_schedule, ExponentMode, GenConfig};
use piza::synth::region_score;

fn arb_box(w: f64, h: f64) -> impl Strategy<Value = BBox> {
    (0.0..w - 2.0, 0.0..h - 2.0, 1.0..w, 1.0..h).prop_map(move |(x, y, bw, bh)| {
        let x1 = (x + bw).min(w).max(x + 1.0);
        let y1 = (y + bh).min(h).max(y + 1.0);
        BBox::new(x, y, x1, y1).unwrap()
    })
}

fn arb_size() -> impl Strategy<Value = ImageSize> {
    (64u32..2048, 64u32..2048).prop_map(|(w, h)| ImageSize::new(w, h).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn local_global_round_trip(
        c in arb_box(1000.0, 800.0), u in 0.0..0.9f64, v in 0.0..0.9f64, fw in 0.05..1.0f64, fh in 0.05..1.0f64
    ) {
        let x0 = c.x0 + u * c.width();
        let y0 = c.y0 + v * c.height();
        let b = BBox::new(x0, y0, x0 + fw * (c.x1 - x0), y0 + fh * (c.y1 - y0)).unwrap();
        let n = to_local(&b, &c).unwrap();
        let back = to_global(&n, &c);
        for (u, v) in back.to_array().iter().zip(b.to_array()) {
            prop_assert!((u - v).abs() < 1e-9 * 1000.0);
        }
    }

    #[test]
    fn clamp_shift_fits_and_keeps_size(
        cx in -200.0..1200.0f64, cy in -200.0..1000.0f64, w in 1.0..900.0f64, h in 1.0..700.0f64
    ) {
        let img = ImageSize::new(1000, 800).unwrap();
        let b = BBox::from_center(cx, cy, w, h).unwrap();
        let c = clamp_shift(&b, img);
        prop_assert!(BBox::full(img).contains(&c, 1e-9));
        prop_assert!((c.width() - w).abs() < 1e-9 && (c.height() - h).abs() < 1e-9);
        if b.is_inside(img) {
            prop_assert_eq!(c, b);
        }
    }

    #[test]
    fn overlap_measures(a in arb_box(500.0, 500.0), b in arb_box(500.0, 500.0)) {
        let i = iou(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&i));
        prop_assert_eq!(i, iou(&b, &a).unwrap());
        let g = giou(&a, &b).unwrap();
        prop_assert!(g <= i + 1e-12 && g >= -1.0);
        prop_assert!((iou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn accuracy_is_monotone(ious in prop::collection::vec(0.0..=1.0f64, 1..200)) {
        let t = thresholds();
        let accs: Vec<f64> = t.iter().map(|tau| accuracy_from_ious(&ious, *tau).unwrap()).collect();
        prop_assert!(accs.windows(2).all(|w| w[1] <= w[0]));
        let hits: usize = (10..20)
            .map(|k| ious.iter().filter(|v| **v >= k as f64 / 20.0).count())
            .sum();
        let brute = hits as f64 / (10 * ious.len()) as f64;
        prop_assert_eq!(mean_accuracy_from_ious(&ious).unwrap(), brute);
        prop_assert!(accs[5] <= accs[0]);
    }

    #[test]
    fn windows_cover_without_duplicates(img in arb_size(), size in 32u32..1200, frac in 0.1..=1.0f64) {
        let stride = ((size as f64 * frac) as u32).max(1);
        let cfg = WindowConfig::new(size, stride).unwrap();
        let ws = enumerate_windows(img, cfg);
        prop_assert_eq!(ws.len(), window_count(img, cfg));
        let full = BBox::full(img);
        for (k, w) in ws.iter().enumerate() {
            prop_assert!(full.contains(w, 1e-9));
            prop_assert!(ws[..k].iter().all(|o| o != w));
        }
        // every corner pixel lies in some window
        for (x, y) in [(0.5, 0.5), (img.width as f64 - 0.5, img.height as f64 - 0.5)] {
            prop_assert!(ws.iter().any(|w| w.x0 <= x && x <= w.x1 && w.y0 <= y && y <= w.y1));
        }
    }

    #[test]
    fn tiles_partition_the_image(img in arb_size(), n in 1usize..6) {
        let tiles = tile_grid(img, n).unwrap();
        prop_assert_eq!(tiles.len(), n * n);
        let total: f64 = tiles.iter().map(|t| t.area()).sum();
        prop_assert!((total - img.area()).abs() < 1e-6 * img.area());
        for (i, a) in tiles.iter().enumerate() {
            for b in &tiles[i + 1..] {
                let ix = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
                let iy = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
                prop_assert!(ix * iy < 1e-9);
            }
        }
    }

    #[test]
    fn selected_steps_minimize_gap(r_star in 1e-4..0.5f64, r_seq in prop::collection::vec(0.01..0.9f64, 1..9)) {
        let t = select_steps(r_star, &r_seq).unwrap();
        let gap = |t: usize| ((1.0 / r_star) * r_seq[..t].iter().product::<f64>() - 1.0).abs();
        prop_assert!((1..=r_seq.len()).all(|k| gap(t) <= gap(k)));
    }

    #[test]
    fn schedule_sizes_shrink(
        r_star in 1e-4..2e-3f64,
        r_seq in prop::collection::vec(0.01..0.2f64, 8),
        lambda2 in 0.1..3.0f64,
        printed in any::<bool>(),
    ) {
        let t = select_steps(r_star, &r_seq).unwrap();
        let w = exp_weights(1.0, lambda2, t);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mode = if printed { ExponentMode::AsPrinted } else { ExponentMode::Uniform };
        let s = zoom_schedule(r_star, &r_seq, t, &w, mode, 100.0).unwrap();
        prop_assert_eq!(s.sizes.len(), t + 1);
        prop_assert_eq!(s.sizes[t], 100.0);
        prop_assert!(s.sizes.windows(2).all(|p| p[1] < p[0]));
    }

    #[test]
    fn generated_processes_are_valid(
        cx in 0.05..0.95f64, cy in 0.05..0.95f64, ratio in 5e-4..2e-3f64, aspect in 0.5..2.0f64, seed in any::<u64>()
    ) {
        let img = ImageSize::new(1024, 1024).unwrap();
        let area = ratio * img.area();
        let (w, h) = ((area * aspect).sqrt(), (area / aspect).sqrt());
        let gt = clamp_shift(&BBox::from_center(cx * 1024.0, cy * 1024.0, w, h).unwrap(), img);
        let prior = fit_kde(&[0.02, 0.03, 0.05, 0.08, 0.04, 0.06], Bandwidth::Auto).unwrap();
        let g = build_process(&gt, img, &prior, &GenConfig::default(), seed).unwrap();
        prop_assert!(g.process.validate(img, &gt).is_ok());
        prop_assert_eq!(g.process.boxes[0], BBox::full(img));
        prop_assert_eq!(*g.process.boxes.last().unwrap(), gt);
        let feats = low_level_features(&g.process.boxes, img).unwrap();
        prop_assert_eq!(feats[0].s, 1.0);
        prop_assert!(feats.iter().all(|f| f.s > 0.0 && f.s <= 1.0 && f.r > 0.0 && f.r <= 1.0));
    }

    #[test]
    fn kde_samples_are_valid_ratios(seed in any::<u64>(), h in 1e-3..0.05f64) {
        let prior = fit_kde(&[0.01, 0.02, 0.05, 0.2], Bandwidth::Fixed(h)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..50 {
            let r = prior.sample(&mut rng).unwrap();
            prop_assert!(r > 0.0 && r <= 1.0);
        }
        let m = prior.mass_between(0.0, 1.0);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&m));
    }

    #[test]
    fn region_score_orders(s in 1.0..1e4f64, a in 0.1..10.0f64, p in 0.01..=1.0f64) {
        let base = region_score(s, a, p).unwrap();
        prop_assert!(region_score(s * 1.5, a, p).unwrap() > base);
        prop_assert!(region_score(s, a, (p * 0.5).max(0.0)).unwrap() < base);
        prop_assert!(region_score(s, 1.0, p).unwrap() >= base);
    }

    #[test]
    fn inference_nests_and_counts_calls(
        preds in prop::collection::vec((0.0..0.7f64, 0.0..0.7f64, 0.05..0.9f64, 0.05..0.9f64, 0.0..1.0f64), 8),
        eos in prop::collection::vec(0.0..1.0f64, 8),
        max_steps in 1usize..8,
    ) {
        let answers = preds
            .iter()
            .map(|(u, v, w, h, c)| Prediction {
                bbox: NormBox::new(*u, *v, (u + w).min(1.0), (v + h).min(1.0)).unwrap(),
                confidence: *c,
            })
            .collect();
        let loc = OracleLocalizer::new(answers).with_cond_dim(2);
        let ctl = ScriptedController { dim: 2, eos_probs: eos.clone() };
        let image = RgbImage::filled(ImageSize::new(300, 200).unwrap(), [90, 90, 90]);
        let cfg = InferConfig { max_steps, eos_threshold: 0.5 };
        let r = zoom_infer(&loc, &ctl, &image, "the red circle", cfg).unwrap();
        prop_assert!(r.steps >= 1 && r.steps <= max_steps);
        prop_assert_eq!(r.localizer_calls, r.steps);
        prop_assert_eq!(loc.calls(), r.steps);
        prop_assert_eq!(r.boxes.len(), r.steps + 1);
        for w in r.boxes.windows(2) {
            prop_assert!(w[0].contains(&w[1], 1e-9) && w[1].area() < w[0].area());
        }
        let first_stop = eos.iter().position(|p| *p >= 0.5).map(|i| i + 1);
        let planned = first_stop.unwrap_or(max_steps).min(max_steps);
        let last = r.boxes.last().unwrap();
        if r.steps < planned {
            prop_assert!(last.width() < 1.0 || last.height() < 1.0);
        } else {
            prop_assert_eq!(r.steps, planned);
        }
    }
}
