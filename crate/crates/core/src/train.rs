//! Training loops for the toy localizer: generic pre-training on ordinary
//! sized objects and joint fine-tuning on zoom processes.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{crop_resample, to_local, BBox, FloatImage, ImageSize, NormBox, PixelSource};
use crate::localizer::{box_loss_tape, CondVars, ToyModel};
use crate::nn::{AdamW, AdamWConfig, ParamGroup, ParamStore, StepSchedule, Tape, Var};
use crate::piza::{low_level_features, piza_loss_tape, LossWeights, LowLevelFeature};
use crate::search::{ExtendedSample, StepLabel};
use crate::synth::{ImageSource, SynthSample};

/// Joint fine-tuning settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// One-based epoch from which the rate is multiplied by `decay_factor`.
    pub decay_epoch: usize,
    pub decay_factor: f64,
    /// Relative jitter applied to intermediate crops.
    pub jitter: f64,
    pub weights: LossWeights,
    /// Train full image to target only, without the zoom-step embedding.
    pub single_shot: bool,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            epochs: 5,
            batch_size: 16,
            lr: 2e-4,
            decay_epoch: 3,
            decay_factor: 0.5,
            jitter: 0.15,
            weights: LossWeights::default(),
            single_shot: false,
            seed: 0,
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::Config("lr must be non-negative and jitter in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Pre-training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of crops that exclude the target; these train only the
    /// confidence head.
    pub negative_rate: f64,
    /// Smallest crop side as a fraction of the image side.
    pub min_scale: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 3000,
            batch_size: 16,
            lr: 2e-3,
            negative_rate: 0.25,
            min_scale: 0.35,
            seed: 0,
        }
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub box_loss: f64,
    pub eos_loss: f64,
    pub progress_loss: f64,
    pub lr: f64,
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// A fully prepared training example.
#[derive(Clone, Debug)]
pub struct StepInput {
    pub crop: FloatImage,
    pub tokens: Vec<usize>,
    /// Box prefix `b_0..b_i` and the labels of step `i + 1`.
    pub prefix: Option<(Vec<LowLevelFeature>, StepLabel, f64)>,
    /// Regression target in crop coordinates; absent for negative crops.
    pub target: Option<NormBox>,
    /// Confidence target; absent when the confidence head is not trained.
    pub conf_target: Option<f64>,
}

/// Batch-mean losses of one optimizer step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub box_loss: f64,
    pub eos: f64,
    pub progress: f64,
    pub conf: f64,
}

/// Records the batch loss on a fresh tape.
pub fn batch_loss(model: &ToyModel, tape: &mut Tape, inputs: &[StepInput], weights: LossWeights) -> Result<(Var, StepLosses)> {
    batch_loss_with(model, &model.store, tape, inputs, weights)
}

/// [`batch_loss`] with weights read from `store`.
pub fn batch_loss_with(
    model: &ToyModel,
    store: &ParamStore,
    tape: &mut Tape,
    inputs: &[StepInput],
    weights: LossWeights,
) -> Result<(Var, StepLosses)> {
    if inputs.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let n = inputs.len() as f64;
    let with_prefix: Vec<usize> = (0..inputs.len()).filter(|i| inputs[*i].prefix.is_some()).collect();
    let mut h_rows = vec![None; inputs.len()];
    let mut terms: Vec<Var> = Vec::new();
    let mut losses = StepLosses::default();
    if !with_prefix.is_empty() {
        let piza = model
            .piza()
            .ok_or_else(|| Error::invalid("zoom training needs a model with a PIZA module"))?;
        let seqs: Vec<Vec<LowLevelFeature>> = with_prefix
            .iter()
            .map(|i| inputs[*i].prefix.as_ref().expect("prefix").0.clone())
            .collect();
        let labels: Vec<(StepLabel, f64)> = with_prefix
            .iter()
            .map(|i| {
                let p = inputs[*i].prefix.as_ref().expect("prefix");
                (p.1, p.2)
            })
            .collect();
        let vars = piza.forward_tape(tape, store, &seqs)?;
        let pl = piza_loss_tape(tape, &vars, &labels, weights)?;
        // piza_loss_tape averages over prefixed samples; rescale to the batch
        let share = with_prefix.len() as f64 / n;
        terms.push(tape.scale(pl.total, share));
        losses.eos = tape.scalar(pl.eos);
        losses.progress = tape.scalar(pl.progress);
        for (row, i) in with_prefix.iter().enumerate() {
            let h = tape.slice_rows(vars.h, row, row + 1);
            let p = tape.value(vars.progress)[[row, 0]];
            h_rows[*i] = Some(CondVars { h, progress: p });
        }
    }
    let mut n_box = 0usize;
    let mut n_conf = 0usize;
    for (i, input) in inputs.iter().enumerate() {
        let pred = model.forward_tape_with(tape, store, &input.crop, &input.tokens, h_rows[i])?;
        if let Some(t) = &input.target {
            let bl = box_loss_tape(tape, pred.bbox, t);
            losses.box_loss += tape.scalar(bl.total);
            terms.push(tape.scale(bl.total, 1.0 / n));
            n_box += 1;
        }
        if let Some(y) = input.conf_target {
            let sp = tape.softplus(pred.conf_logit);
            let yl = tape.scale(pred.conf_logit, y);
            let bce = tape.sub(sp, yl);
            losses.conf += tape.scalar(bce);
            terms.push(tape.scale(bce, 1.0 / n));
            n_conf += 1;
        }
    }
    if terms.is_empty() {
        return Err(Error::invalid("batch has no loss terms"));
    }
    losses.box_loss /= n_box.max(1) as f64;
    losses.conf /= n_conf.max(1) as f64;
    let mut total = terms[0];
    for t in &terms[1..] {
        total = tape.add(total, *t);
    }
    losses.total = tape.scalar(total);
    if !losses.total.is_finite() {
        return Err(Error::NonFinite(format!("training loss {losses:?}")));
    }
    Ok((total, losses))
}

/// One optimizer update on a prepared batch.
pub fn train_step(
    model: &mut ToyModel,
    opt: &mut AdamW,
    inputs: &[StepInput],
    lr: f64,
    weights: LossWeights,
) -> Result<StepLosses> {
    let mut tape = Tape::new();
    let (total, losses) = batch_loss(model, &mut tape, inputs, weights)?;
    let grads = tape.backward(total);
    opt.step(&mut model.store, &grads, lr);
    Ok(losses)
}

/// Perturbs an intermediate box while keeping the target inside it and the
/// box inside its parent.
pub fn jitter_box<R: Rng>(b: &BBox, parent: &BBox, target: &BBox, amount: f64, rng: &mut R) -> Result<BBox> {
    if amount == 0.0 {
        return Ok(*b);
    }
    let s = rng.gen_range(-amount..=amount).exp();
    let (cx, cy) = b.center();
    let dx = rng.gen_range(-amount..=amount) * b.width();
    let dy = rng.gen_range(-amount..=amount) * b.height();
    let j = BBox::from_center(cx + dx, cy + dy, b.width() * s, b.height() * s)?;
    let grown = BBox {
        x0: j.x0.min(target.x0),
        y0: j.y0.min(target.y0),
        x1: j.x1.max(target.x1),
        y1: j.y1.max(target.y1),
    };
    Ok(crate::geometry::clamp_shift_into(&grown, parent))
}

fn clip_into(b: &BBox, region: &BBox) -> Result<BBox> {
    BBox::new(
        b.x0.max(region.x0),
        b.y0.max(region.y0),
        b.x1.min(region.x1),
        b.y1.min(region.y1),
    )
}

/// Builds the input for step `i` of a zoom process: the crop at `b_i`
/// (jittered for `i >= 1`), the prefix features and the next box as target.
pub fn zoom_input<S: PixelSource + ?Sized, R: Rng>(
    model: &ToyModel,
    sample: &ExtendedSample,
    image: &S,
    i: usize,
    jitter: f64,
    rng: &mut R,
) -> Result<StepInput> {
    let p = &sample.process;
    if i >= p.steps() {
        return Err(Error::invalid(format!("step {i} out of range for {} steps", p.steps())));
    }
    let mut boxes: Vec<BBox> = p.boxes[..=i].to_vec();
    if i >= 1 {
        boxes[i] = jitter_box(&p.boxes[i], &p.boxes[i - 1], &sample.gt, jitter, rng)?;
    }
    let crop_box = boxes[i];
    let feats = low_level_features(&boxes, sample.image_size)?;
    let target = to_local(&clip_into(&p.boxes[i + 1], &crop_box)?, &crop_box)?;
    Ok(StepInput {
        crop: crop_resample(image, &crop_box, model.config().crop)?,
        tokens: model.tokenize(&sample.expression)?,
        prefix: Some((feats, p.eos[i + 1], p.progress[i + 1])),
        target: Some(target),
        conf_target: None,
    })
}

/// Full image in, target box out.
pub fn single_shot_input<S: PixelSource + ?Sized>(model: &ToyModel, expression: &str, gt: &BBox, image: &S) -> Result<StepInput> {
    let full = BBox::full(image.size());
    Ok(StepInput {
        crop: crop_resample(image, &full, model.config().crop)?,
        tokens: model.tokenize(expression)?,
        prefix: None,
        target: Some(to_local(gt, &full)?),
        conf_target: None,
    })
}

/// Joint fine-tuning of conditioning, normalization and PIZA weights on an
/// extended dataset; the backbone stays frozen.
pub fn fine_tune(
    model: &mut ToyModel,
    samples: &[ExtendedSample],
    images: &ImageSource,
    cfg: &FineTuneConfig,
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("training samples"));
    }
    if !cfg.single_shot && model.piza().is_none() {
        return Err(Error::invalid("zoom training needs a model with a PIZA module"));
    }
    model.set_peft_trainable();
    let mut opt = AdamW::new(AdamWConfig::default());
    let schedule = StepSchedule {
        base_lr: cfg.lr,
        milestones: vec![cfg.decay_epoch],
        factor: cfg.decay_factor,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::new();
    for epoch in 1..=cfg.epochs {
        let lr = schedule.lr_at(epoch);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut inputs = Vec::with_capacity(chunk.len());
            for &k in chunk {
                let s = &samples[k];
                let img = images.load(&s.id, &s.image)?;
                inputs.push(if cfg.single_shot {
                    single_shot_input(model, &s.expression, &s.gt, &img)?
                } else {
                    let i = rng.gen_range(0..s.process.steps());
                    zoom_input(model, s, &img, i, cfg.jitter, &mut rng)?
                });
            }
            let l = train_step(model, &mut opt, &inputs, lr, cfg.weights)?;
            log.push(LogRow {
                step: log.len() + 1,
                box_loss: l.box_loss,
                eos_loss: l.eos,
                progress_loss: l.progress,
                lr,
            });
        }
    }
    Ok(log)
}

/// Square crop containing `gt` (or, for negatives, disjoint from it).
fn pretrain_crop<R: Rng>(size: ImageSize, gt: &BBox, min_scale: f64, negative: bool, rng: &mut R) -> Option<BBox> {
    let side_max = size.width.min(size.height) as f64;
    let need = gt.width().max(gt.height());
    for _ in 0..20 {
        let side = side_max * rng.gen_range(min_scale..=1.0);
        let (w, h) = (size.width as f64, size.height as f64);
        let (x0, y0) = if negative {
            (rng.gen_range(0.0..=w - side), rng.gen_range(0.0..=h - side))
        } else {
            if side < need {
                continue;
            }
            let lo_x = (gt.x1 - side).max(0.0);
            let hi_x = gt.x0.min(w - side);
            let lo_y = (gt.y1 - side).max(0.0);
            let hi_y = gt.y0.min(h - side);
            if lo_x > hi_x || lo_y > hi_y {
                continue;
            }
            (rng.gen_range(lo_x..=hi_x), rng.gen_range(lo_y..=hi_y))
        };
        let b = BBox::new(x0, y0, x0 + side, y0 + side).ok()?;
        let overlaps = b.x0 < gt.x1 && gt.x0 < b.x1 && b.y0 < gt.y1 && gt.y0 < b.y1;
        if negative != overlaps {
            return Some(b);
        }
    }
    None
}

/// Pre-trains every localizer weight on scenes with ordinarily sized
/// objects, with random crops and target-free negatives.
pub fn pretrain(model: &mut ToyModel, scenes: &[SynthSample], cfg: &PretrainConfig) -> Result<Vec<LogRow>> {
    if scenes.is_empty() {
        return Err(Error::Empty("pre-training scenes"));
    }
    if cfg.batch_size == 0 || !(0.0 < cfg.min_scale && cfg.min_scale <= 1.0) {
        return Err(Error::Config("invalid pre-training settings".into()));
    }
    model.store.set_trainable_groups(&[ParamGroup::Backbone, ParamGroup::Norm]);
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let lr = cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos()));
        let mut inputs = Vec::with_capacity(cfg.batch_size);
        while inputs.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let s = &scenes[order[cursor]];
            cursor += 1;
            let img = s.renderer();
            let negative = rng.gen_bool(cfg.negative_rate);
            let Some(crop_box) = pretrain_crop(s.image_size, &s.gt, cfg.min_scale, negative, &mut rng) else {
                continue;
            };
            let target = if negative { None } else { Some(to_local(&s.gt, &crop_box)?) };
            inputs.push(StepInput {
                crop: crop_resample(&img, &crop_box, model.config().crop)?,
                tokens: model.tokenize(&s.expression)?,
                prefix: None,
                target,
                conf_target: Some(if negative { 0.0 } else { 1.0 }),
            });
        }
        let l = train_step(model, &mut opt, &inputs, lr, LossWeights::default())?;
        log.push(LogRow {
            step: step + 1,
            box_loss: l.box_loss,
            eos_loss: 0.0,
            progress_loss: 0.0,
            lr,
        });
    }
    Ok(log)
}

/// Mean box loss of `model` on prepared inputs, without updating it.
pub fn mean_box_loss(model: &ToyModel, inputs: &[StepInput]) -> Result<f64> {
    let mut tape = Tape::new();
    let (_, l) = batch_loss(model, &mut tape, inputs, LossWeights::default())?;
    Ok(l.box_loss)
}
