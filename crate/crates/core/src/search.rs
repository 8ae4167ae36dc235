//! Ground-truth search processes: nested box sequences from the full image
//! down to the target, with per-step stop and progress labels.
//!
//! Per-step area ratios are drawn from the zoom prior, the number of steps is
//! picked so the cumulative ratio best matches the target's area ratio, and
//! the intermediate box sizes follow a geometric zoom schedule. Boxes are
//! centered on the target and shifted into the image.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{area_ratio, clamp_shift, BBox, ImageSize};
use crate::prior::RatioDistribution;

/// Smallest admissible zoom factor; keeps box areas strictly decreasing.
pub const MIN_ZOOM: f64 = 1.0 + 1e-3;

/// Stop label attached to every step of a search process.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StepLabel {
    #[serde(rename = "CONT")]
    Cont,
    #[serde(rename = "EOS")]
    Eos,
}

impl StepLabel {
    pub fn as_target(self) -> f64 {
        match self {
            StepLabel::Cont => 0.0,
            StepLabel::Eos => 1.0,
        }
    }
}

/// Exponent applied to each sampled ratio in the zoom schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExponentMode {
    /// `r_k^(1/w_k)` with exponentially decaying weights `w_k`.
    AsPrinted,
    /// `r_k^1`; the product of zoom factors then equals `1 / r*` exactly.
    Uniform,
}

impl std::fmt::Display for ExponentMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ExponentMode::AsPrinted => "as-printed",
            ExponentMode::Uniform => "uniform",
        })
    }
}

impl std::str::FromStr for ExponentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as-printed" => Ok(ExponentMode::AsPrinted),
            "uniform" => Ok(ExponentMode::Uniform),
            other => Err(Error::Config(format!("unknown exponent mode `{other}`"))),
        }
    }
}

/// Nested boxes `b_0 ⊇ b_1 ⊇ … ⊇ b_T` with labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchProcess {
    pub boxes: Vec<BBox>,
    pub eos: Vec<StepLabel>,
    pub progress: Vec<f64>,
}

impl SearchProcess {
    /// Builds a process from boxes, attaching the standard labels.
    pub fn from_boxes(boxes: Vec<BBox>) -> Result<Self> {
        if boxes.len() < 2 {
            return Err(Error::invalid("a search process needs at least two boxes"));
        }
        let (eos, progress) = attach_labels(boxes.len() - 1)?;
        Ok(SearchProcess {
            boxes,
            eos,
            progress,
        })
    }

    /// Number of zoom steps `T`.
    pub fn steps(&self) -> usize {
        self.boxes.len() - 1
    }

    pub fn penultimate(&self) -> &BBox {
        &self.boxes[self.boxes.len() - 2]
    }

    /// Checks every structural invariant against the image and target box.
    pub fn validate(&self, img: ImageSize, gt: &BBox) -> Result<()> {
        let n = self.boxes.len();
        if n < 2 || self.eos.len() != n || self.progress.len() != n {
            return Err(Error::invalid("process lengths are inconsistent"));
        }
        if self.boxes[0] != BBox::full(img) {
            return Err(Error::invalid("first box is not the full image"));
        }
        if self.boxes[n - 1] != *gt {
            return Err(Error::invalid("last box differs from the target"));
        }
        for (j, pair) in self.boxes.windows(2).enumerate() {
            let (outer, inner) = (&pair[0], &pair[1]);
            inner.validate()?;
            if !inner.is_inside(img) {
                return Err(Error::invalid(format!("box {} leaves the image", j + 1)));
            }
            if !outer.contains(inner, 1e-9) {
                return Err(Error::invalid(format!("box {} is not nested in box {j}", j + 1)));
            }
            if inner.area() >= outer.area() {
                return Err(Error::invalid(format!("box {} does not shrink", j + 1)));
            }
        }
        let t = n - 1;
        for (j, (label, z)) in self.eos.iter().zip(&self.progress).enumerate() {
            let want = if j == t { StepLabel::Eos } else { StepLabel::Cont };
            if *label != want || *z != j as f64 / t as f64 {
                return Err(Error::invalid(format!("labels at step {j} are wrong")));
            }
        }
        Ok(())
    }
}

/// Generator parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda2_growth: f64,
    /// Required minimum edge (pixels) of the second-to-last box.
    pub min_edge: f64,
    pub t_max: usize,
    pub exponent_mode: ExponentMode,
    pub max_retries: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda2_growth: 1.1,
            min_edge: 160.0,
            t_max: 8,
            exponent_mode: ExponentMode::Uniform,
            max_retries: 100,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda2_growth > 1.0) {
            return Err(Error::Config("lambda2 growth must exceed 1".into()));
        }
        if !(self.min_edge > 0.0) {
            return Err(Error::Config("min_edge must be positive".into()));
        }
        if self.t_max < 1 || self.max_retries < 1 {
            return Err(Error::Config("t_max and max_retries must be at least 1".into()));
        }
        if !(self.lambda1 > 0.0) {
            return Err(Error::Config("lambda1 must be positive".into()));
        }
        Ok(())
    }
}

/// Number of steps whose cumulative ratio is closest to the target ratio.
/// Ties resolve to the smaller step count.
pub fn select_steps(r_star: f64, r_seq: &[f64]) -> Result<usize> {
    if r_seq.is_empty() {
        return Err(Error::Empty("ratio sequence"));
    }
    if !(r_star > 0.0 && r_star <= 1.0) {
        return Err(Error::invalid(format!("target ratio {r_star} outside (0, 1]")));
    }
    if let Some(r) = r_seq.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(Error::invalid(format!("step ratio {r} outside (0, 1]")));
    }
    let mut best = (1, f64::INFINITY);
    let mut cumulative = 1.0 / r_star;
    for (t, r) in r_seq.iter().enumerate() {
        cumulative *= r;
        let gap = (cumulative - 1.0).abs();
        if gap < best.1 {
            best = (t + 1, gap);
        }
    }
    Ok(best.0)
}

/// Normalized exponential weights `λ1·exp(-λ2·k) / Σ`, `k = 1..=T`.
pub fn exp_weights(lambda1: f64, lambda2: f64, t_star: usize) -> Vec<f64> {
    let raw: Vec<f64> = (1..=t_star)
        .map(|k| lambda1 * (-lambda2 * k as f64).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Zoom factors `z_0..z_{T-1}` and box areas `S_0..S_T`.
#[derive(Clone, Debug, PartialEq)]
pub struct ZoomSchedule {
    pub zoom: Vec<f64>,
    pub sizes: Vec<f64>,
}

/// Computes the zoom schedule for a target of area `target_area` and area
/// ratio `r_star`.
///
/// `z_j = C / r_{j+1}` with `C = ((1/r*) Π_k r_k^{e_k})^{1/T}`; every factor
/// is floored at [`MIN_ZOOM`] and `S_j = |b*| Π_{m=j}^{T-1} z_m`.
pub fn zoom_schedule(
    r_star: f64,
    r_seq: &[f64],
    t_star: usize,
    weights: &[f64],
    mode: ExponentMode,
    target_area: f64,
) -> Result<ZoomSchedule> {
    if t_star == 0 || t_star > r_seq.len() || weights.len() != t_star {
        return Err(Error::invalid(format!(
            "inconsistent schedule inputs: T*={t_star}, {} ratios, {} weights",
            r_seq.len(),
            weights.len()
        )));
    }
    if !(r_star > 0.0) || r_seq[..t_star].iter().any(|r| !(*r > 0.0)) {
        return Err(Error::invalid("ratios must be positive"));
    }
    if !(target_area > 0.0) {
        return Err(Error::invalid("target area must be positive"));
    }
    let log_c = (r_seq[..t_star]
        .iter()
        .zip(weights)
        .map(|(r, w)| {
            let e = match mode {
                ExponentMode::AsPrinted => 1.0 / w,
                ExponentMode::Uniform => 1.0,
            };
            e * r.ln()
        })
        .sum::<f64>()
        - r_star.ln())
        / t_star as f64;
    let c = log_c.exp();
    let zoom: Vec<f64> = r_seq[..t_star]
        .iter()
        .map(|r| (c / r).max(MIN_ZOOM))
        .collect();
    let mut sizes = vec![target_area; t_star + 1];
    for j in (0..t_star).rev() {
        sizes[j] = sizes[j + 1] * zoom[j];
    }
    Ok(ZoomSchedule { zoom, sizes })
}

/// Aspect ratio (width over height) interpolated linearly in area between
/// the image aspect at `S = WH` and a square at `S = s_penult`.
pub fn aspect_interp(img: ImageSize, s_j: f64, s_penult: f64) -> Result<f64> {
    let wh = img.area();
    if !(s_penult > 0.0 && s_penult < wh) {
        return Err(Error::invalid(format!(
            "penultimate area {s_penult} must lie in (0, {wh})"
        )));
    }
    if !(s_j > 0.0 && s_j <= wh) {
        return Err(Error::invalid(format!("area {s_j} must lie in (0, {wh}]")));
    }
    let aspect = img.aspect();
    Ok(aspect - (aspect - 1.0) * (wh - s_j) / (wh - s_penult))
}

/// Stop labels and progress labels for a process of `t_star` steps.
pub fn attach_labels(t_star: usize) -> Result<(Vec<StepLabel>, Vec<f64>)> {
    if t_star < 1 {
        return Err(Error::invalid("a process needs at least one step"));
    }
    let eos = (0..=t_star)
        .map(|j| {
            if j == t_star {
                StepLabel::Eos
            } else {
                StepLabel::Cont
            }
        })
        .collect();
    let progress = (0..=t_star).map(|j| j as f64 / t_star as f64).collect();
    Ok((eos, progress))
}

/// A generated process together with generation diagnostics.
#[derive(Clone, Debug)]
pub struct Generated {
    pub process: SearchProcess,
    /// Number of samplings performed (1 when the first one was accepted).
    pub attempts: usize,
    pub lambda2: f64,
    /// Whether the penultimate box meets the minimum edge requirement.
    pub meets_min_edge: bool,
}

/// Generates a ground-truth search process for target `gt`.
///
/// Samplings are repeated with `λ2` growing geometrically while the
/// second-to-last box is thinner than `cfg.min_edge`; after
/// `cfg.max_retries` samplings the widest candidate is returned.
pub fn build_process(
    gt: &BBox,
    img: ImageSize,
    dist: &RatioDistribution,
    cfg: &GenConfig,
    seed: u64,
) -> Result<Generated> {
    cfg.validate()?;
    let r_star = area_ratio(gt, img)?;
    if r_star >= 1.0 {
        return Err(Error::invalid("target covers the whole image"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lambda2 = cfg.lambda2;
    let mut best: Option<Generated> = None;
    for attempt in 0..cfg.max_retries {
        rng.set_stream(attempt as u64);
        rng.set_word_pos(0);
        let r_seq = (0..cfg.t_max)
            .map(|_| dist.sample(&mut rng))
            .collect::<Result<Vec<_>>>()?;
        let candidate = sample_process(gt, img, r_star, &r_seq, cfg, lambda2)
            .ok()
            .filter(|p| p.validate(img, gt).is_ok());
        if let Some(process) = candidate {
            let edge = process.penultimate().min_edge();
            let meets = edge >= cfg.min_edge;
            let generated = Generated {
                process,
                attempts: attempt + 1,
                lambda2,
                meets_min_edge: meets,
            };
            if meets {
                return Ok(generated);
            }
            let better = best
                .as_ref()
                .map_or(true, |b| edge > b.process.penultimate().min_edge());
            if better {
                best = Some(generated);
            }
        }
        lambda2 *= cfg.lambda2_growth;
    }
    match best {
        Some(mut b) => {
            b.attempts = cfg.max_retries;
            Ok(b)
        }
        None => Err(Error::SamplingExhausted(cfg.max_retries)),
    }
}

/// One sampling of the procedure for a fixed ratio sequence.
pub fn sample_process(
    gt: &BBox,
    img: ImageSize,
    r_star: f64,
    r_seq: &[f64],
    cfg: &GenConfig,
    lambda2: f64,
) -> Result<SearchProcess> {
    let t_star = select_steps(r_star, r_seq)?;
    let weights = exp_weights(cfg.lambda1, lambda2, t_star);
    let schedule = zoom_schedule(
        r_star,
        r_seq,
        t_star,
        &weights,
        cfg.exponent_mode,
        gt.area(),
    )?;
    let wh = img.area();
    let (cx, cy) = gt.center();
    let mut boxes = vec![*gt; t_star + 1];
    let (mut inner_w, mut inner_h) = (gt.width(), gt.height());
    if t_star > 1 {
        let s_penult = schedule.sizes[t_star - 1].min(wh * (1.0 - 1e-9));
        for j in (1..t_star).rev() {
            let s_j = schedule.sizes[j].min(wh);
            let a = aspect_interp(img, s_j, s_penult)?;
            let mut w = (a * s_j.sqrt()).max(inner_w);
            let mut h = (s_j.sqrt() / a).max(inner_h);
            let floor = MIN_ZOOM * inner_w * inner_h;
            if w * h < floor {
                let grow = (floor / (w * h)).sqrt();
                w *= grow;
                h *= grow;
            }
            w = w.min(img.width as f64);
            h = h.min(img.height as f64);
            let b = clamp_shift(&BBox::from_center(cx, cy, w, h)?, img);
            boxes[j] = b;
            inner_w = b.width();
            inner_h = b.height();
        }
    }
    boxes[0] = BBox::full(img);
    SearchProcess::from_boxes(boxes)
}

/// Extended-dataset record: the base sample plus its search process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtendedSample {
    pub id: String,
    pub image: String,
    pub expression: String,
    pub gt: BBox,
    pub image_size: ImageSize,
    #[serde(flatten)]
    pub process: SearchProcess,
    pub seed: u64,
}

impl ExtendedSample {
    pub fn validate(&self) -> Result<()> {
        self.process.validate(self.image_size, &self.gt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::{fit_kde, Bandwidth};

    fn img(w: u32, h: u32) -> ImageSize {
        ImageSize::new(w, h).unwrap()
    }

    #[test]
    fn select_steps_examples() {
        assert_eq!(select_steps(0.01, &[0.1, 0.1, 0.1]).unwrap(), 2);
        assert_eq!(select_steps(0.3, &[0.3, 0.5]).unwrap(), 1);
        assert_eq!(select_steps(0.5, &[0.1, 0.2]).unwrap(), 1);
        assert!(select_steps(0.5, &[]).is_err());
    }

    #[test]
    fn select_steps_prefers_fewer_steps_on_ties() {
        // T=1: |2 - 1| = 1; T=2: |2e-300 - 1| rounds to exactly 1 in f64
        let r_star = 0.25;
        let r_seq = [0.5, 1e-300];
        assert_eq!(select_steps(r_star, &r_seq).unwrap(), 1);
    }

    #[test]
    fn exp_weight_examples() {
        assert_eq!(exp_weights(1.0, 1.0, 1), vec![1.0]);
        assert_eq!(exp_weights(3.0, 0.0, 4), vec![0.25; 4]);
        let w = exp_weights(1.0, std::f64::consts::LN_2, 2);
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15 && (w[1] - 1.0 / 3.0).abs() < 1e-15);
        let scaled = exp_weights(7.5, 0.3, 5);
        let base = exp_weights(1.0, 0.3, 5);
        for (a, b) in scaled.iter().zip(&base) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn single_step_uniform_schedule() {
        let (w, h) = (200.0, 100.0);
        let area = 50.0;
        let r_star = area / (w * h);
        let s = zoom_schedule(r_star, &[0.3, 0.2], 1, &[1.0], ExponentMode::Uniform, area).unwrap();
        assert!((s.zoom[0] - 1.0 / r_star).abs() / (1.0 / r_star) < 1e-12);
        assert!((s.sizes[0] - w * h).abs() / (w * h) < 1e-12);
        assert_eq!(s.sizes[1], area);
    }

    #[test]
    fn uniform_schedule_product_identity() {
        let r_star = 8e-4;
        let r_seq = [0.05, 0.03, 0.08, 0.02];
        let t = select_steps(r_star, &r_seq).unwrap();
        let w = exp_weights(1.0, 1.0, t);
        let area = r_star * 1024.0 * 1024.0;
        let s = zoom_schedule(r_star, &r_seq, t, &w, ExponentMode::Uniform, area).unwrap();
        let prod: f64 = s.zoom.iter().product();
        assert!((prod - 1.0 / r_star).abs() * r_star < 1e-9);
        assert!((s.sizes[0] - 1024.0 * 1024.0).abs() / (1024.0 * 1024.0) < 1e-9);
        assert_eq!(*s.sizes.last().unwrap(), area);
    }

    #[test]
    fn as_printed_schedule_keeps_target_area_and_monotonicity() {
        let r_seq = [0.05, 0.03, 0.08];
        let w = exp_weights(1.0, 1.0, 3);
        let s = zoom_schedule(1e-3, &r_seq, 3, &w, ExponentMode::AsPrinted, 42.0).unwrap();
        assert_eq!(s.sizes[3], 42.0);
        assert!(s.zoom.iter().all(|z| *z >= MIN_ZOOM));
        assert!(s.sizes.windows(2).all(|p| p[0] > p[1]));
    }

    #[test]
    fn schedule_rejects_non_positive_ratios() {
        assert!(zoom_schedule(1e-3, &[0.0, 0.1], 2, &[0.5, 0.5], ExponentMode::Uniform, 1.0).is_err());
        assert!(zoom_schedule(0.0, &[0.1], 1, &[1.0], ExponentMode::Uniform, 1.0).is_err());
    }

    #[test]
    fn aspect_examples() {
        let im = img(2000, 1000);
        let wh = im.area();
        let s_pen = 50_000.0;
        assert!((aspect_interp(im, wh, s_pen).unwrap() - 2.0).abs() < 1e-15);
        assert!((aspect_interp(im, s_pen, s_pen).unwrap() - 1.0).abs() < 1e-15);
        let mid = (wh + s_pen) / 2.0;
        assert!((aspect_interp(im, mid, s_pen).unwrap() - 1.5).abs() < 1e-12);
        assert!(aspect_interp(im, mid, wh).is_err());
    }

    #[test]
    fn label_examples() {
        let (y, z) = attach_labels(1).unwrap();
        assert_eq!(y, vec![StepLabel::Cont, StepLabel::Eos]);
        assert_eq!(z, vec![0.0, 1.0]);
        assert_eq!(attach_labels(2).unwrap().1, vec![0.0, 0.5, 1.0]);
        let (y4, _) = attach_labels(4).unwrap();
        assert_eq!(y4.iter().filter(|l| **l == StepLabel::Eos).count(), 1);
        assert_eq!(y4[4], StepLabel::Eos);
        assert!(attach_labels(0).is_err());
    }

    #[test]
    fn large_target_gives_minimal_process() {
        let im = img(100, 100);
        let gt = BBox::new(10.0, 10.0, 90.0, 90.0).unwrap();
        // prior concentrated far below the target ratio: one step is closest
        let dist = fit_kde(&[0.01], Bandwidth::Fixed(1e-6)).unwrap();
        let g = build_process(&gt, im, &dist, &GenConfig { min_edge: 10.0, ..Default::default() }, 1).unwrap();
        assert_eq!(g.process.boxes, vec![BBox::full(im), gt]);
        assert_eq!(g.process.eos, vec![StepLabel::Cont, StepLabel::Eos]);
        assert_eq!(g.process.progress, vec![0.0, 1.0]);
    }

    #[test]
    fn thin_target_still_nests() {
        let im = img(1024, 1024);
        let gt = BBox::new(500.0, 10.0, 560.0, 22.0).unwrap();
        let dist = fit_kde(&[0.03, 0.05, 0.1], Bandwidth::Fixed(0.01)).unwrap();
        for seed in 0..50 {
            let cfg = GenConfig::default();
            let g = build_process(&gt, im, &dist, &cfg, seed).unwrap();
            g.process.validate(im, &gt).unwrap();
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let im = img(1024, 768);
        let gt = BBox::new(700.0, 600.0, 730.0, 625.0).unwrap();
        let dist = fit_kde(&[0.02, 0.04, 0.07, 0.1], Bandwidth::Auto).unwrap();
        let cfg = GenConfig::default();
        let a = build_process(&gt, im, &dist, &cfg, 77).unwrap();
        let b = build_process(&gt, im, &dist, &cfg, 77).unwrap();
        assert_eq!(a.process, b.process);
    }

    #[test]
    fn extended_sample_json_layout() {
        let im = img(100, 100);
        let gt = BBox::new(10.0, 10.0, 20.0, 20.0).unwrap();
        let process = SearchProcess::from_boxes(vec![BBox::full(im), gt]).unwrap();
        let s = ExtendedSample {
            id: "s0".into(),
            image: "images/s0.png".into(),
            expression: "the red circle".into(),
            gt,
            image_size: im,
            process,
            seed: 5,
        };
        let line = serde_json::to_string(&s).unwrap();
        assert_eq!(
            line,
            r#"{"id":"s0","image":"images/s0.png","expression":"the red circle","gt":[10.0,10.0,20.0,20.0],"image_size":[100,100],"boxes":[[0.0,0.0,100.0,100.0],[10.0,10.0,20.0,20.0]],"eos":["CONT","EOS"],"progress":[0.0,1.0],"seed":5}"#
        );
        let back: ExtendedSample = serde_json::from_str(&line).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn validate_catches_broken_processes() {
        let im = img(100, 100);
        let gt = BBox::new(10.0, 10.0, 20.0, 20.0).unwrap();
        let mid = BBox::new(0.0, 0.0, 50.0, 50.0).unwrap();
        let ok = SearchProcess::from_boxes(vec![BBox::full(im), mid, gt]).unwrap();
        ok.validate(im, &gt).unwrap();

        let not_nested = BBox::new(30.0, 30.0, 80.0, 80.0).unwrap();
        let bad = SearchProcess::from_boxes(vec![BBox::full(im), not_nested, gt]).unwrap();
        assert!(bad.validate(im, &gt).is_err());

        let mut labels = ok.clone();
        labels.eos[1] = StepLabel::Eos;
        assert!(labels.validate(im, &gt).is_err());
    }
}
