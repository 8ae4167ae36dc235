//! Autoregressive zoom inference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{crop_resample, to_global, BBox, ImageSize, PixelSource};
use crate::localizer::{Localizer, ToyModel};
use crate::nn::ParamStore;
use crate::piza::{Piza, PizaOutput};

/// Produces the zoom-step embedding and stop decision for a box prefix.
pub trait ZoomController {
    fn dim(&self) -> usize;

    fn embed(&self, boxes: &[BBox], img: ImageSize) -> Result<PizaOutput>;
}

/// A PIZA module together with the store holding its weights.
#[derive(Clone, Copy, Debug)]
pub struct PizaController<'a> {
    pub piza: &'a Piza,
    pub store: &'a ParamStore,
}

impl ZoomController for PizaController<'_> {
    fn dim(&self) -> usize {
        self.piza.d()
    }

    fn embed(&self, boxes: &[BBox], img: ImageSize) -> Result<PizaOutput> {
        self.piza.forward(self.store, boxes, img)
    }
}

impl ZoomController for ToyModel {
    fn dim(&self) -> usize {
        self.piza().map_or(0, |p| p.d())
    }

    fn embed(&self, boxes: &[BBox], img: ImageSize) -> Result<PizaOutput> {
        let piza = self
            .piza()
            .ok_or_else(|| Error::invalid("model has no PIZA module"))?;
        piza.forward(&self.store, boxes, img)
    }
}

/// Replays scripted EOS probabilities; `h` is all zeros.
#[derive(Clone, Debug)]
pub struct ScriptedController {
    pub dim: usize,
    pub eos_probs: Vec<f64>,
}

impl ZoomController for ScriptedController {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, boxes: &[BBox], _img: ImageSize) -> Result<PizaOutput> {
        let i = boxes.len() - 1;
        let p = *self.eos_probs.get(i).unwrap_or(&0.0);
        Ok(PizaOutput {
            h: vec![0.0; self.dim],
            eos_prob: p,
            eos_logit: (p / (1.0 - p)).ln(),
            progress: 0.0,
        })
    }
}

/// Loop settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferConfig {
    pub max_steps: usize,
    pub eos_threshold: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            max_steps: 8,
            eos_threshold: 0.5,
        }
    }
}

/// Outcome of one zoom search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    /// Predicted boxes `b_0 ⊇ b_1 ⊇ …`; the last one is the answer.
    pub boxes: Vec<BBox>,
    pub steps: usize,
    pub eos_emitted: bool,
    pub eos_probs: Vec<f64>,
    pub progress: Vec<f64>,
    pub confidences: Vec<f64>,
    /// Steps whose prediction had to be shrunk or was degenerate.
    pub degenerate_steps: Vec<usize>,
    pub localizer_calls: usize,
}

impl InferenceResult {
    pub fn answer(&self) -> &BBox {
        self.boxes.last().expect("at least one box")
    }
}

/// Fraction by which a prediction that fills its whole crop is shrunk so the
/// next box is strictly smaller.
const SHRINK: f64 = 0.02;

/// Puts a predicted box inside `crop` and keeps it strictly smaller.
fn nest(pred: &BBox, crop: &BBox) -> (BBox, bool) {
    let mut b = BBox {
        x0: pred.x0.clamp(crop.x0, crop.x1),
        y0: pred.y0.clamp(crop.y0, crop.y1),
        x1: pred.x1.clamp(crop.x0, crop.x1),
        y1: pred.y1.clamp(crop.y0, crop.y1),
    };
    let mut flagged = b != *pred;
    // at least one pixel, so the next crop can be resampled
    let min_w = (crop.width() * 1e-3).max(1.0).min(crop.width());
    let min_h = (crop.height() * 1e-3).max(1.0).min(crop.height());
    if b.width() < min_w || b.height() < min_h {
        let (cx, cy) = b.center();
        let (w, h) = (b.width().max(min_w), b.height().max(min_h));
        b = crate::geometry::clamp_shift_into(
            &BBox {
                x0: cx - w / 2.0,
                y0: cy - h / 2.0,
                x1: cx + w / 2.0,
                y1: cy + h / 2.0,
            },
            crop,
        );
        flagged = true;
    }
    if b.area() >= crop.area() * (1.0 - 1e-9) {
        let (dw, dh) = (crop.width() * SHRINK / 2.0, crop.height() * SHRINK / 2.0);
        b = BBox {
            x0: crop.x0 + dw,
            y0: crop.y0 + dh,
            x1: crop.x1 - dw,
            y1: crop.y1 - dh,
        };
        flagged = true;
    }
    (b, flagged)
}

fn run<L, C, S>(
    model: &L,
    controller: Option<&C>,
    image: &S,
    expression: &str,
    max_steps: usize,
    eos_threshold: Option<f64>,
) -> Result<InferenceResult>
where
    L: Localizer + ?Sized,
    C: ZoomController + ?Sized,
    S: PixelSource + ?Sized,
{
    if max_steps == 0 {
        return Err(Error::invalid("max_steps must be at least 1"));
    }
    if expression.trim().is_empty() {
        return Err(Error::Empty("expression"));
    }
    if let (Some(d), Some(c)) = (model.cond_dim(), controller) {
        if d != c.dim() {
            return Err(Error::DimMismatch {
                expected: d,
                found: c.dim(),
            });
        }
    }
    let img = image.size();
    let mut r = InferenceResult {
        boxes: vec![BBox::full(img)],
        steps: 0,
        eos_emitted: false,
        eos_probs: Vec::new(),
        progress: Vec::new(),
        confidences: Vec::new(),
        degenerate_steps: Vec::new(),
        localizer_calls: 0,
    };
    loop {
        let crop_box = *r.boxes.last().expect("non-empty");
        let cond = controller.map(|c| c.embed(&r.boxes, img)).transpose()?;
        let crop = crop_resample(image, &crop_box, model.input_size())?;
        let pred = model.predict(&crop, expression, cond.as_ref())?;
        r.localizer_calls += 1;
        let (b, flagged) = nest(&to_global(&pred.bbox, &crop_box), &crop_box);
        r.boxes.push(b);
        r.steps += 1;
        r.confidences.push(pred.confidence);
        if flagged {
            r.degenerate_steps.push(r.steps);
        }
        let eos = cond.as_ref().map_or(1.0, |c| c.eos_prob);
        r.eos_probs.push(eos);
        r.progress.push(cond.as_ref().map_or(1.0, |c| c.progress));
        if eos_threshold.is_some_and(|t| eos >= t) {
            r.eos_emitted = true;
            break;
        }
        if r.steps == max_steps {
            break;
        }
        if b.width() < 1.0 || b.height() < 1.0 {
            // nothing left to crop
            break;
        }
    }
    Ok(r)
}

/// Zooms until the controller predicts EOS or `cfg.max_steps` is reached.
pub fn zoom_infer<L, C, S>(model: &L, controller: &C, image: &S, expression: &str, cfg: InferConfig) -> Result<InferenceResult>
where
    L: Localizer + ?Sized,
    C: ZoomController + ?Sized,
    S: PixelSource + ?Sized,
{
    run(model, Some(controller), image, expression, cfg.max_steps, Some(cfg.eos_threshold))
}

/// Runs exactly `steps` zoom steps, ignoring EOS.
pub fn zoom_infer_fixed<L, C, S>(model: &L, controller: &C, image: &S, expression: &str, steps: usize) -> Result<InferenceResult>
where
    L: Localizer + ?Sized,
    C: ZoomController + ?Sized,
    S: PixelSource + ?Sized,
{
    run(model, Some(controller), image, expression, steps, None)
}

/// One prediction on the full image, without a controller.
pub fn single_shot<L, S>(model: &L, image: &S, expression: &str) -> Result<InferenceResult>
where
    L: Localizer + ?Sized,
    S: PixelSource + ?Sized,
{
    run::<L, ScriptedController, S>(model, None, image, expression, 1, None)
}
