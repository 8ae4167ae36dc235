//! The zoom-step embedding module: low-level box features, learnable Fourier
//! embeddings, a small transformer encoder with average pooling, and the EOS
//! and progress heads trained on top of the pooled embedding `h`.
//!
//! `forward` on the prefix `b_0..b_i` predicts the labels of the *next* step,
//! `y_{i+1}` and `z_{i+1}`.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, ImageSize};
use crate::nn::layers::{block_diagonal_mask, segment_mean_matrix};
use crate::nn::{
    AdamW, AdamWConfig, EncoderBlock, LayerNorm, Linear, Matrix, ParamGroup, ParamKey, ParamStore, Tape, Var,
};
use crate::search::{SearchProcess, StepLabel};

/// Per-step features of a box sequence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowLevelFeature {
    /// `|b_j| / |b_0|`
    pub s: f64,
    /// `|b_j| / |b_{j-1}|`, 1 for the first box.
    pub r: f64,
    pub w: f64,
    pub h: f64,
    pub cx: f64,
    pub cy: f64,
}

impl LowLevelFeature {
    pub fn to_array(self) -> [f64; 6] {
        [self.s, self.r, self.w, self.h, self.cx, self.cy]
    }
}

/// Features of `boxes`; the first box must cover the whole image and each box
/// must lie inside its predecessor.
pub fn low_level_features(boxes: &[BBox], img: ImageSize) -> Result<Vec<LowLevelFeature>> {
    let Some(first) = boxes.first() else {
        return Err(Error::Empty("box sequence"));
    };
    if *first != BBox::full(img) {
        return Err(Error::invalid("first box must cover the full image"));
    }
    let (wf, hf) = (img.width as f64, img.height as f64);
    let full = first.area();
    let mut out = Vec::with_capacity(boxes.len());
    for (j, b) in boxes.iter().enumerate() {
        b.validate()?;
        let r = if j == 0 {
            1.0
        } else {
            let prev = &boxes[j - 1];
            if !prev.contains(b, 1e-6) {
                return Err(Error::invalid(format!("box {j} is not nested in box {}", j - 1)));
            }
            b.area() / prev.area()
        };
        out.push(LowLevelFeature {
            s: b.area() / full,
            r,
            w: b.width() / wf,
            h: b.height() / hf,
            cx: (b.x0 + b.x1) / (2.0 * wf),
            cy: (b.y0 + b.y1) / (2.0 * hf),
        });
    }
    Ok(out)
}

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PizaConfig {
    /// Embedding dimension of `h`.
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ffn: usize,
    /// Number of learnable Fourier frequencies.
    pub fourier_freqs: usize,
    /// Standard deviation of the initial frequencies.
    pub fourier_scale: f64,
    /// Longest accepted sequence is `t_max + 1` boxes.
    pub t_max: usize,
    pub seed: u64,
}

impl Default for PizaConfig {
    fn default() -> Self {
        PizaConfig {
            d: 16,
            layers: 2,
            heads: 2,
            width: 32,
            ffn: 64,
            fourier_freqs: 16,
            fourier_scale: 1.0,
            t_max: 8,
            seed: 0,
        }
    }
}

impl PizaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.width == 0 || self.ffn == 0 || self.fourier_freqs == 0 {
            return Err(Error::Config("PIZA dimensions must be positive".into()));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "PIZA width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.t_max == 0 {
            return Err(Error::Config("t_max must be at least 1".into()));
        }
        if !(self.fourier_scale.is_finite() && self.fourier_scale >= 0.0) {
            return Err(Error::Config("fourier_scale must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Result of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct PizaOutput {
    pub h: Vec<f64>,
    pub eos_prob: f64,
    pub eos_logit: f64,
    pub progress: f64,
}

/// Tape nodes of a (batched) forward pass; one row per sequence.
#[derive(Clone, Copy, Debug)]
pub struct PizaVars {
    pub h: Var,
    pub eos_logit: Var,
    pub progress: Var,
}

/// Relative weights of the two head losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub eos: f64,
    pub progress: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { eos: 1.0, progress: 1.0 }
    }
}

/// Parameter handles of the module. The weights live in a [`ParamStore`] that
/// may be shared with a localizer.
#[derive(Clone, Debug)]
pub struct Piza {
    cfg: PizaConfig,
    freq: ParamKey,
    fourier_proj: Linear,
    in_proj: Linear,
    blocks: Vec<EncoderBlock>,
    final_ln: LayerNorm,
    out_proj: Linear,
    eos_head: Linear,
    progress_head: Linear,
}

impl Piza {
    /// Registers freshly initialized parameters (group `Piza`) in `store`.
    pub fn new(cfg: PizaConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let g = ParamGroup::Piza;
        let freq = store.add_normal("piza.fourier.freq", g, (6, cfg.fourier_freqs), cfg.fourier_scale, &mut rng);
        let fourier_proj = Linear::new(store, "piza.fourier.proj", g, 2 * cfg.fourier_freqs, cfg.d, &mut rng);
        let in_proj = Linear::new(store, "piza.in_proj", g, cfg.d, cfg.width, &mut rng);
        let blocks = (0..cfg.layers)
            .map(|l| EncoderBlock::new(store, &format!("piza.block{l}"), g, cfg.width, cfg.heads, cfg.ffn, &mut rng))
            .collect();
        let final_ln = LayerNorm::new(store, "piza.final_ln", cfg.width);
        let out_proj = Linear::new(store, "piza.out_proj", g, cfg.width, cfg.d, &mut rng);
        let eos_head = Linear::new(store, "piza.eos_head", g, cfg.d, 1, &mut rng);
        let progress_head = Linear::new(store, "piza.progress_head", g, cfg.d, 1, &mut rng);
        Ok(Piza {
            cfg,
            freq,
            fourier_proj,
            in_proj,
            blocks,
            final_ln,
            out_proj,
            eos_head,
            progress_head,
        })
    }

    pub fn config(&self) -> &PizaConfig {
        &self.cfg
    }

    pub fn d(&self) -> usize {
        self.cfg.d
    }

    /// Key of the learnable frequency matrix `F` (6 x m).
    pub fn frequency_key(&self) -> ParamKey {
        self.freq
    }

    /// Number of scalars belonging to this module.
    pub fn param_count(&self, store: &ParamStore) -> usize {
        store
            .keys()
            .filter(|k| store.name(*k).starts_with("piza."))
            .map(|k| store.value(k).len())
            .sum()
    }

    /// `[cos(2πFv), sin(2πFv)]` projected to width `d`, one row per feature.
    pub fn fourier_embed_tape(&self, tape: &mut Tape, store: &ParamStore, feats: Var) -> Var {
        let f = tape.param(store, self.freq);
        let phase = tape.matmul(feats, f);
        let phase = tape.scale(phase, 2.0 * PI);
        let c = tape.cos(phase);
        let s = tape.sin(phase);
        let cs = tape.concat_cols(&[c, s]);
        self.fourier_proj.forward(tape, store, cs)
    }

    /// Embedding of a single feature vector.
    pub fn fourier_embed(&self, store: &ParamStore, f: &LowLevelFeature) -> Vec<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(feature_matrix(std::slice::from_ref(f)));
        let e = self.fourier_embed_tape(&mut tape, store, x);
        tape.value(e).iter().copied().collect()
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::Empty("box sequence"));
        }
        if n > self.cfg.t_max + 1 {
            return Err(Error::SequenceTooLong {
                len: n,
                max: self.cfg.t_max + 1,
            });
        }
        Ok(())
    }

    /// Encoder output per token before pooling (rows follow the input).
    fn encode(&self, tape: &mut Tape, store: &ParamStore, feats: Var, mask: Option<&Matrix>) -> Var {
        let e = self.fourier_embed_tape(tape, store, feats);
        let mut x = self.in_proj.forward(tape, store, e);
        for block in &self.blocks {
            x = block.forward(tape, store, x, mask);
        }
        self.final_ln.forward(tape, store, x)
    }

    /// Batched forward over several feature sequences; sequences attend only
    /// within themselves.
    pub fn forward_tape(&self, tape: &mut Tape, store: &ParamStore, seqs: &[Vec<LowLevelFeature>]) -> Result<PizaVars> {
        if seqs.is_empty() {
            return Err(Error::Empty("batch"));
        }
        for s in seqs {
            self.check_len(s.len())?;
        }
        let lengths: Vec<usize> = seqs.iter().map(Vec::len).collect();
        let flat: Vec<LowLevelFeature> = seqs.iter().flatten().copied().collect();
        let feats = tape.constant(feature_matrix(&flat));
        let mask = (seqs.len() > 1).then(|| block_diagonal_mask(&lengths));
        let tokens = self.encode(tape, store, feats, mask.as_ref());
        let pooled = if seqs.len() == 1 {
            tape.mean_rows(tokens)
        } else {
            let pool = tape.constant(segment_mean_matrix(&lengths));
            tape.matmul(pool, tokens)
        };
        let h = self.out_proj.forward(tape, store, pooled);
        let eos_logit = self.eos_head.forward(tape, store, h);
        let p = self.progress_head.forward(tape, store, h);
        let progress = tape.sigmoid(p);
        Ok(PizaVars { h, eos_logit, progress })
    }

    /// Forward pass on the box prefix `b_0..b_i`.
    pub fn forward(&self, store: &ParamStore, boxes: &[BBox], img: ImageSize) -> Result<PizaOutput> {
        self.check_len(boxes.len())?;
        let feats = low_level_features(boxes, img)?;
        self.forward_features(store, &feats)
    }

    pub fn forward_features(&self, store: &ParamStore, feats: &[LowLevelFeature]) -> Result<PizaOutput> {
        let mut tape = Tape::new();
        let vars = self.forward_tape(&mut tape, store, &[feats.to_vec()])?;
        let eos_logit = tape.scalar(vars.eos_logit);
        let out = PizaOutput {
            h: tape.value(vars.h).iter().copied().collect(),
            eos_prob: crate::nn::sigmoid(eos_logit),
            eos_logit,
            progress: tape.scalar(vars.progress),
        };
        if !(out.h.iter().all(|v| v.is_finite()) && eos_logit.is_finite() && out.progress.is_finite()) {
            return Err(Error::NonFinite("PIZA output".into()));
        }
        Ok(out)
    }

    /// Per-token encoder outputs for one sequence (diagnostics and tests).
    pub fn token_encodings(&self, store: &ParamStore, feats: &[LowLevelFeature]) -> Result<Matrix> {
        self.check_len(feats.len())?;
        let mut tape = Tape::new();
        let x = tape.constant(feature_matrix(feats));
        let t = self.encode(&mut tape, store, x, None);
        Ok(tape.value(t).clone())
    }
}

/// Stacks features into an `n x 6` matrix.
pub fn feature_matrix(feats: &[LowLevelFeature]) -> Matrix {
    Array2::from_shape_fn((feats.len(), 6), |(i, j)| feats[i].to_array()[j])
}

fn check_labels(z: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&z) {
        return Err(Error::invalid(format!("progress label {z} is outside [0, 1]")));
    }
    Ok(())
}

/// `BCE(eos_prob, y) + MSE(progress, z)` with unit weights.
pub fn piza_loss(out: &PizaOutput, y: StepLabel, z: f64) -> Result<f64> {
    piza_loss_weighted(out, y, z, LossWeights::default())
}

pub fn piza_loss_weighted(out: &PizaOutput, y: StepLabel, z: f64, w: LossWeights) -> Result<f64> {
    check_labels(z)?;
    let (bce, mse) = loss_terms(out.eos_prob, out.progress, y, z);
    Ok(w.eos * bce + w.progress * mse)
}

/// Separate `(BCE, squared error)` terms evaluated from probabilities.
pub fn loss_terms(eos_prob: f64, progress: f64, y: StepLabel, z: f64) -> (f64, f64) {
    let p = eos_prob.clamp(1e-15, 1.0 - 1e-15);
    let t = y.as_target();
    let bce = -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
    (bce, (progress - z).powi(2))
}

/// Tape nodes of the batch-mean head losses.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub eos: Var,
    pub progress: Var,
}

/// Mean head losses over the rows of `vars` against labels `(y, z)`.
pub fn piza_loss_tape(tape: &mut Tape, vars: &PizaVars, labels: &[(StepLabel, f64)], w: LossWeights) -> Result<LossVars> {
    let n = tape.shape(vars.eos_logit).0;
    if labels.len() != n {
        return Err(Error::DimMismatch {
            expected: n,
            found: labels.len(),
        });
    }
    for (_, z) in labels {
        check_labels(*z)?;
    }
    let y = tape.constant(Array2::from_shape_fn((n, 1), |(i, _)| labels[i].0.as_target()));
    let z = tape.constant(Array2::from_shape_fn((n, 1), |(i, _)| labels[i].1));
    // BCE with logits: softplus(l) - y * l
    let sp = tape.softplus(vars.eos_logit);
    let yl = tape.mul(y, vars.eos_logit);
    let bce = tape.sub(sp, yl);
    let eos = tape.mean(bce);
    let diff = tape.sub(vars.progress, z);
    let sq = tape.mul(diff, diff);
    let progress = tape.mean(sq);
    let a = tape.scale(eos, w.eos);
    let b = tape.scale(progress, w.progress);
    let total = tape.add(a, b);
    Ok(LossVars { total, eos, progress })
}

/// One supervised example: features of `b_0..b_i` with labels of step `i+1`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixExample {
    pub feats: Vec<LowLevelFeature>,
    pub eos: StepLabel,
    pub progress: f64,
}

/// All prefixes `b_0..b_i`, `i < T`, of a process with their next-step labels.
pub fn prefix_examples(process: &SearchProcess, img: ImageSize) -> Result<Vec<PrefixExample>> {
    let feats = low_level_features(&process.boxes, img)?;
    Ok((0..process.steps())
        .map(|i| PrefixExample {
            feats: feats[..=i].to_vec(),
            eos: process.eos[i + 1],
            progress: process.progress[i + 1],
        })
        .collect())
}

/// Settings for training the module on its own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandaloneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for StandaloneConfig {
    fn default() -> Self {
        StandaloneConfig {
            epochs: 4,
            batch_size: 32,
            lr: 3e-3,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

/// Held-out quality of the heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadMetrics {
    pub eos_accuracy: f64,
    pub progress_mae: f64,
    pub n: usize,
}

/// Mean loss per epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainHistory {
    pub epoch_loss: Vec<f64>,
}

/// Trains only the module's parameters on prefix examples.
pub fn train_standalone(
    piza: &Piza,
    store: &mut ParamStore,
    examples: &[PrefixExample],
    cfg: &StandaloneConfig,
) -> Result<TrainHistory> {
    if examples.is_empty() {
        return Err(Error::Empty("training examples"));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("epochs and batch_size must be positive".into()));
    }
    store.set_trainable_groups(&[ParamGroup::Piza, ParamGroup::Norm]);
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let total_steps = cfg.epochs * examples.len().div_ceil(cfg.batch_size);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let seqs: Vec<Vec<LowLevelFeature>> = chunk.iter().map(|i| examples[*i].feats.clone()).collect();
            let labels: Vec<(StepLabel, f64)> = chunk.iter().map(|i| (examples[*i].eos, examples[*i].progress)).collect();
            let mut tape = Tape::new();
            let vars = piza.forward_tape(&mut tape, store, &seqs)?;
            let loss = piza_loss_tape(&mut tape, &vars, &labels, cfg.weights)?;
            let value = tape.scalar(loss.total);
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("PIZA loss at step {step}")));
            }
            let grads = tape.backward(loss.total);
            // cosine decay to 10% of the base rate
            let frac = step as f64 / total_steps as f64;
            let lr = cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + (PI * frac).cos()));
            opt.step(store, &grads, lr);
            sum += value;
            batches += 1;
            step += 1;
        }
        history.push(sum / batches as f64);
    }
    Ok(TrainHistory { epoch_loss: history })
}

/// EOS accuracy at threshold 0.5 and progress mean absolute error.
pub fn evaluate_heads(piza: &Piza, store: &ParamStore, examples: &[PrefixExample]) -> Result<HeadMetrics> {
    if examples.is_empty() {
        return Err(Error::Empty("evaluation examples"));
    }
    let mut correct = 0usize;
    let mut abs_err = 0.0;
    for chunk in examples.chunks(256) {
        let seqs: Vec<Vec<LowLevelFeature>> = chunk.iter().map(|e| e.feats.clone()).collect();
        let mut tape = Tape::new();
        let vars = piza.forward_tape(&mut tape, store, &seqs)?;
        let logits = tape.value(vars.eos_logit);
        let progress = tape.value(vars.progress);
        for (i, e) in chunk.iter().enumerate() {
            let pred = if logits[[i, 0]] >= 0.0 { StepLabel::Eos } else { StepLabel::Cont };
            correct += (pred == e.eos) as usize;
            abs_err += (progress[[i, 0]] - e.progress).abs();
        }
    }
    Ok(HeadMetrics {
        eos_accuracy: correct as f64 / examples.len() as f64,
        progress_mae: abs_err / examples.len() as f64,
        n: examples.len(),
    })
}

/// JSON sidecar stored next to a parameter blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PizaMeta {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub param_count: usize,
    pub seed: u64,
    pub ffn: usize,
    pub fourier_freqs: usize,
    pub t_max: usize,
}

impl PizaMeta {
    pub fn new(piza: &Piza, store: &ParamStore) -> Self {
        let c = &piza.cfg;
        PizaMeta {
            d: c.d,
            layers: c.layers,
            heads: c.heads,
            width: c.width,
            param_count: piza.param_count(store),
            seed: c.seed,
            ffn: c.ffn,
            fourier_freqs: c.fourier_freqs,
            t_max: c.t_max,
        }
    }

    pub fn config(&self) -> PizaConfig {
        PizaConfig {
            d: self.d,
            layers: self.layers,
            heads: self.heads,
            width: self.width,
            ffn: self.ffn,
            fourier_freqs: self.fourier_freqs,
            t_max: self.t_max,
            seed: self.seed,
            ..PizaConfig::default()
        }
    }
}

/// Path of the JSON sidecar belonging to a blob path.
pub fn sidecar_path(blob: &Path) -> std::path::PathBuf {
    let mut name = blob.as_os_str().to_owned();
    name.push(".json");
    name.into()
}

/// Writes the parameter blob at `path` and the metadata next to it.
pub fn save_checkpoint<M: Serialize>(path: &Path, store: &ParamStore, meta: &M) -> Result<()> {
    std::fs::write(path, store.to_bytes()).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(meta)?;
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))?;
    Ok(())
}

/// Reads a blob and its sidecar.
pub fn load_checkpoint<M: for<'de> Deserialize<'de>>(path: &Path) -> Result<(ParamStore, M)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let store = ParamStore::from_bytes(&bytes)?;
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    Ok((store, serde_json::from_str(&text)?))
}

/// Rebuilds a module whose parameters are taken from `loaded`.
pub fn restore(meta: &PizaMeta, loaded: &ParamStore) -> Result<(Piza, ParamStore)> {
    let mut store = ParamStore::new();
    let piza = Piza::new(meta.config(), &mut store)?;
    let copied = store.load_matching(loaded);
    if copied != store.keys().count() {
        return Err(Error::invalid("checkpoint does not match the PIZA architecture"));
    }
    Ok((piza, store))
}
