//! Localizer interface and a small trainable vision-language model that can
//! be conditioned on the zoom-step embedding.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Mutex;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FloatImage, NormBox};
use crate::nn::{sigmoid, EncoderBlock, LayerNorm, Linear, Matrix, Mlp, ParamGroup, ParamKey, ParamStore, Tape, Var};
use crate::piza::{load_checkpoint, save_checkpoint, Piza, PizaConfig, PizaOutput};
use crate::synth::Vocabulary;

/// One predicted box in crop-local normalized coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub bbox: NormBox,
    pub confidence: f64,
}

/// A model `F(x, t)` optionally conditioned on the zoom-step embedding.
pub trait Localizer {
    /// Side length of the square crops the model consumes.
    fn input_size(&self) -> usize;

    /// Dimension of the zoom-step embedding the model consumes, if any.
    fn cond_dim(&self) -> Option<usize>;

    fn predict(&self, crop: &FloatImage, expression: &str, cond: Option<&PizaOutput>) -> Result<Prediction>;
}

/// Test double that replays scripted predictions in call order.
#[derive(Debug)]
pub struct OracleLocalizer {
    answers: Vec<Prediction>,
    next: Mutex<usize>,
    input_size: usize,
    cond_dim: Option<usize>,
}

impl OracleLocalizer {
    pub fn new(answers: Vec<Prediction>) -> Self {
        OracleLocalizer {
            answers,
            next: Mutex::new(0),
            input_size: 32,
            cond_dim: None,
        }
    }

    pub fn with_cond_dim(mut self, d: usize) -> Self {
        self.cond_dim = Some(d);
        self
    }

    pub fn calls(&self) -> usize {
        *self.next.lock().expect("poisoned")
    }
}

impl Localizer for OracleLocalizer {
    fn input_size(&self) -> usize {
        self.input_size
    }

    fn cond_dim(&self) -> Option<usize> {
        self.cond_dim
    }

    fn predict(&self, _crop: &FloatImage, expression: &str, _cond: Option<&PizaOutput>) -> Result<Prediction> {
        if expression.trim().is_empty() {
            return Err(Error::Empty("expression"));
        }
        let mut next = self.next.lock().expect("poisoned");
        let p = *self
            .answers
            .get(*next)
            .ok_or_else(|| Error::invalid("oracle localizer ran out of scripted answers"))?;
        *next += 1;
        Ok(p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdapterType {
    /// Conditioning from the progress value through a time embedding.
    A,
    /// Conditioning from `h` directly.
    B,
}

/// Where and how the zoom-step embedding enters the localizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum ConditioningMode {
    None,
    /// Learnable tokens `e` and `H(h)` prepended to the text tokens.
    Prompt { len: usize },
    /// `Wx + BAx + BCh` on the attention queries and the first MLP layer.
    LowRank { rank: usize },
    /// Bottleneck adapter after each block's MLP; `H(h)` is added after the
    /// channel-wise scaling.
    Adapter { bottleneck: usize, kind: AdapterType },
    /// Learnable tokens and `H(h)` prepended to the visual tokens.
    VisualPrompt { len: usize },
}

impl ConditioningMode {
    pub fn name(&self) -> &'static str {
        match self {
            ConditioningMode::None => "none",
            ConditioningMode::Prompt { .. } => "prompt",
            ConditioningMode::LowRank { .. } => "lowrank",
            ConditioningMode::Adapter { .. } => "adapter",
            ConditioningMode::VisualPrompt { .. } => "visual-prompt",
        }
    }

    /// Builds a mode from its name and the per-mode sizes.
    pub fn from_parts(name: &str, prompt_len: usize, rank: usize, bottleneck: usize, kind: AdapterType) -> Result<Self> {
        let mode = match name {
            "none" => ConditioningMode::None,
            "prompt" => ConditioningMode::Prompt { len: prompt_len },
            "lowrank" => ConditioningMode::LowRank { rank },
            "adapter" => ConditioningMode::Adapter { bottleneck, kind },
            "visual-prompt" => ConditioningMode::VisualPrompt { len: prompt_len },
            other => return Err(Error::Config(format!("unknown conditioning mode {other:?}"))),
        };
        mode.validate()?;
        Ok(mode)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ConditioningMode::None => true,
            ConditioningMode::Prompt { len } | ConditioningMode::VisualPrompt { len } => len > 0,
            ConditioningMode::LowRank { rank } => rank > 0,
            ConditioningMode::Adapter { bottleneck, .. } => bottleneck > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("{} dimensions must be positive", self.name())))
        }
    }
}

impl FromStr for AdapterType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(AdapterType::A),
            "B" | "b" => Ok(AdapterType::B),
            _ => Err(Error::Config(format!("unknown adapter type {s:?}"))),
        }
    }
}

impl fmt::Display for ConditioningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture of the toy localizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub crop: usize,
    pub patch: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Longer expressions are truncated.
    pub max_tokens: usize,
    pub conditioning: ConditioningMode,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        ToyModelConfig {
            crop: 128,
            patch: 16,
            width: 32,
            depth: 2,
            heads: 2,
            ffn: 64,
            max_tokens: 16,
            conditioning: ConditioningMode::None,
            seed: 0,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.crop == 0 || self.crop % self.patch != 0 {
            return Err(Error::Config(format!(
                "crop {} is not divisible by patch {}",
                self.crop, self.patch
            )));
        }
        if self.width == 0 || self.depth == 0 || self.ffn == 0 || self.max_tokens == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config("width must be divisible by heads".into()));
        }
        self.conditioning.validate()
    }

    pub fn grid(&self) -> usize {
        self.crop / self.patch
    }
}

#[derive(Clone, Debug)]
struct LowRankSite {
    a_q: ParamKey,
    c_q: ParamKey,
    b_q: ParamKey,
    a_m: ParamKey,
    c_m: ParamKey,
    b_m: ParamKey,
}

#[derive(Clone, Debug)]
struct AdapterSite {
    down: Linear,
    up: Linear,
    scale: ParamKey,
    cond: Linear,
}

#[derive(Clone, Debug)]
struct Block {
    enc: EncoderBlock,
    lowrank: Option<LowRankSite>,
    adapter: Option<AdapterSite>,
}

#[derive(Clone, Debug)]
struct PromptSite {
    tokens: ParamKey,
    cond: Linear,
}

/// Time embedding used by Type A adapters.
#[derive(Clone, Debug)]
struct ProgressEmbed {
    mlp: Mlp,
}

const PROGRESS_FREQS: usize = 8;

#[derive(Clone, Debug)]
struct Net {
    patch_embed: Linear,
    pos_visual: ParamKey,
    pos_text: ParamKey,
    type_visual: ParamKey,
    type_text: ParamKey,
    tokens: ParamKey,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    score: Linear,
    offset: Linear,
    size: Linear,
    conf: Linear,
    prompt: Option<PromptSite>,
    visual_prompt: Option<PromptSite>,
    progress_embed: Option<ProgressEmbed>,
}

/// Conditioning inputs on a tape.
#[derive(Clone, Copy, Debug)]
pub struct CondVars {
    /// `1 x d` zoom-step embedding.
    pub h: Var,
    /// Progress value read from the progress head.
    pub progress: f64,
}

/// Tape nodes of one prediction.
#[derive(Clone, Copy, Debug)]
pub struct PredVars {
    /// `1 x 4` box `(u0, v0, u1, v1)` in crop-local normalized coordinates.
    pub bbox: Var,
    pub conf_logit: Var,
}

/// The toy vision-language localizer, optionally carrying a PIZA module in
/// the same parameter store.
#[derive(Debug)]
pub struct ToyModel {
    cfg: ToyModelConfig,
    pub store: ParamStore,
    net: Net,
    piza: Option<Piza>,
    vocab: Vocabulary,
}

impl Clone for ToyModel {
    fn clone(&self) -> Self {
        ToyModel {
            cfg: self.cfg.clone(),
            store: self.store.duplicate(),
            net: self.net.clone(),
            piza: self.piza.clone(),
            vocab: self.vocab.clone(),
        }
    }
}

impl ToyModel {
    pub fn new(cfg: ToyModelConfig, piza: Option<PizaConfig>) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let piza = piza.map(|p| Piza::new(p, &mut store)).transpose()?;
        let d = piza.as_ref().map(|p| p.d());
        let vocab = Vocabulary::default();
        let net = Net::new(&cfg, &mut store, vocab.len(), d);
        Ok(ToyModel {
            cfg,
            store,
            net,
            piza,
            vocab,
        })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.cfg
    }

    pub fn piza(&self) -> Option<&Piza> {
        self.piza.as_ref()
    }

    /// Copies backbone, normalization and head weights from a pre-trained
    /// model of the same architecture.
    pub fn load_backbone(&mut self, pretrained: &ToyModel) -> usize {
        let mut copied = 0;
        let keys: Vec<ParamKey> = self.store.keys().collect();
        for k in keys {
            let name = self.store.name(k).to_string();
            if !name.starts_with("loc.") || self.store.group(k) == ParamGroup::Conditioning {
                continue;
            }
            if let Some(src) = pretrained.store.key_of(&name) {
                if pretrained.store.value(src).dim() == self.store.value(k).dim() {
                    let v = pretrained.store.value(src).clone();
                    self.store.value_mut(k).assign(&v);
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Freezes everything except conditioning, normalization and PIZA weights.
    pub fn set_peft_trainable(&mut self) {
        self.store
            .set_trainable_groups(&[ParamGroup::Conditioning, ParamGroup::Norm, ParamGroup::Piza]);
    }

    pub fn tokenize(&self, expression: &str) -> Result<Vec<usize>> {
        let mut ids = self.vocab.tokenize(expression)?;
        ids.truncate(self.cfg.max_tokens);
        Ok(ids)
    }

    /// Whether the model consumes a zoom-step embedding.
    pub fn is_conditioned(&self) -> bool {
        self.piza.is_some() && self.cfg.conditioning != ConditioningMode::None
    }

    /// Vector that the conditioning injects: `MLP(Fourier(p))` for Type A
    /// adapters, `h` itself otherwise.
    pub fn conditioning_vector(&self, h: &[f64], progress: f64) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let hv = self.h_var(&mut tape, h)?;
        let v = self.net.cond_source(&mut tape, &self.store, &self.cfg, CondVars { h: hv, progress });
        Ok(tape.value(v).iter().copied().collect())
    }

    fn h_var(&self, tape: &mut Tape, h: &[f64]) -> Result<Var> {
        let d = self.piza.as_ref().map_or(h.len(), |p| p.d());
        if h.len() != d {
            return Err(Error::DimMismatch {
                expected: d,
                found: h.len(),
            });
        }
        Ok(tape.constant(Array2::from_shape_vec((1, d), h.to_vec()).expect("shape")))
    }

    /// Applies the conditioning of the first block to activations `x`:
    /// identity for `none`; prepended rows for the prompt modes; the query
    /// projection `Wx + BAx + BCh` for `lowrank`; the post-MLP adapter for
    /// `adapter`.
    pub fn apply_conditioning(&self, x: &Matrix, h: Option<&[f64]>, progress: f64) -> Result<Matrix> {
        if x.ncols() != self.cfg.width {
            return Err(Error::DimMismatch {
                expected: self.cfg.width,
                found: x.ncols(),
            });
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let cond = match h {
            Some(h) => Some(CondVars {
                h: self.h_var(&mut tape, h)?,
                progress,
            }),
            None => None,
        };
        let out = match self.cfg.conditioning {
            ConditioningMode::None => xv,
            ConditioningMode::Prompt { .. } => {
                let site = self.net.prompt.as_ref().expect("prompt site");
                let p = self.net.prompt_rows(&mut tape, &self.store, site, cond);
                tape.concat_rows(&[p, xv])
            }
            ConditioningMode::VisualPrompt { .. } => {
                let site = self.net.visual_prompt.as_ref().expect("visual prompt site");
                let p = self.net.prompt_rows(&mut tape, &self.store, site, cond);
                tape.concat_rows(&[p, xv])
            }
            ConditioningMode::LowRank { .. } => {
                let block = &self.net.blocks[0];
                let q = block.enc.attn.q.forward(&mut tape, &self.store, xv);
                match &block.lowrank {
                    Some(site) => {
                        let delta = lowrank_delta(&mut tape, &self.store, xv, cond.map(|c| c.h), site.a_q, site.c_q, site.b_q);
                        tape.add(q, delta)
                    }
                    None => q,
                }
            }
            ConditioningMode::Adapter { .. } => {
                let src = cond.map(|c| self.net.cond_source(&mut tape, &self.store, &self.cfg, c));
                let site = self.net.blocks[0].adapter.as_ref().expect("adapter site");
                adapter_forward(&mut tape, &self.store, site, xv, src)
            }
        };
        Ok(tape.value(out).clone())
    }

    /// Records a prediction on `tape`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        crop: &FloatImage,
        tokens: &[usize],
        cond: Option<CondVars>,
    ) -> Result<PredVars> {
        self.forward_tape_with(tape, &self.store, crop, tokens, cond)
    }

    /// As [`ToyModel::forward_tape`] with weights read from `store`, which
    /// must share this model's keys (e.g. a perturbed copy).
    pub fn forward_tape_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        crop: &FloatImage,
        tokens: &[usize],
        cond: Option<CondVars>,
    ) -> Result<PredVars> {
        if crop.width != self.cfg.crop || crop.height != self.cfg.crop {
            return Err(Error::DimMismatch {
                expected: self.cfg.crop,
                found: crop.width,
            });
        }
        if tokens.is_empty() {
            return Err(Error::Empty("expression"));
        }
        let cond = if self.is_conditioned() { cond } else { None };
        Ok(self.net.forward(tape, store, &self.cfg, crop, tokens, cond))
    }

    /// Prediction from explicit conditioning values.
    pub fn predict_with(&self, crop: &FloatImage, expression: &str, cond: Option<&PizaOutput>) -> Result<Prediction> {
        let tokens = self.tokenize(expression)?;
        let mut tape = Tape::new();
        let cv = match cond {
            Some(c) if self.is_conditioned() => Some(CondVars {
                h: self.h_var(&mut tape, &c.h)?,
                progress: c.progress,
            }),
            _ => None,
        };
        let vars = self.forward_tape(&mut tape, crop, &tokens, cv)?;
        prediction_from(&tape, vars)
    }
}

/// Sidecar metadata of a saved [`ToyModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyMeta {
    pub model: ToyModelConfig,
    pub piza: Option<PizaConfig>,
    pub param_count: usize,
}

impl ToyModel {
    pub fn meta(&self) -> ToyMeta {
        ToyMeta {
            model: self.cfg.clone(),
            piza: self.piza.as_ref().map(|p| p.config().clone()),
            param_count: self.store.param_count(),
        }
    }

    /// Writes the weights to `path` and the metadata to `path.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        save_checkpoint(path, &self.store, &self.meta())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (loaded, meta): (ParamStore, ToyMeta) = load_checkpoint(path)?;
        let mut model = ToyModel::new(meta.model, meta.piza)?;
        let copied = model.store.load_matching(&loaded);
        if copied != model.store.keys().count() || loaded.param_count() != meta.param_count {
            return Err(Error::invalid(format!(
                "{} does not match its architecture metadata",
                path.display()
            )));
        }
        Ok(model)
    }
}

impl Localizer for ToyModel {
    fn input_size(&self) -> usize {
        self.cfg.crop
    }

    fn cond_dim(&self) -> Option<usize> {
        if self.is_conditioned() {
            self.piza.as_ref().map(|p| p.d())
        } else {
            None
        }
    }

    fn predict(&self, crop: &FloatImage, expression: &str, cond: Option<&PizaOutput>) -> Result<Prediction> {
        self.predict_with(crop, expression, cond)
    }
}

/// Smallest normalized extent of a returned box.
const MIN_EXTENT: f64 = 1e-4;

/// Reads a prediction off the tape, clamping the box into the unit square.
pub fn prediction_from(tape: &Tape, vars: PredVars) -> Result<Prediction> {
    let b = tape.value(vars.bbox);
    let logit = tape.scalar(vars.conf_logit);
    if !(b.iter().all(|v| v.is_finite()) && logit.is_finite()) {
        return Err(Error::NonFinite("localizer output".into()));
    }
    let axis = |lo: f64, hi: f64| {
        let (mut lo, mut hi) = (lo.clamp(0.0, 1.0), hi.clamp(0.0, 1.0));
        if hi - lo < MIN_EXTENT {
            let c = (0.5 * (lo + hi)).clamp(MIN_EXTENT / 2.0, 1.0 - MIN_EXTENT / 2.0);
            lo = c - MIN_EXTENT / 2.0;
            hi = c + MIN_EXTENT / 2.0;
        }
        (lo, hi)
    };
    let (u0, u1) = axis(b[[0, 0]], b[[0, 2]]);
    let (v0, v1) = axis(b[[0, 1]], b[[0, 3]]);
    Ok(Prediction {
        bbox: NormBox::new(u0, v0, u1, v1)?,
        confidence: sigmoid(logit),
    })
}

fn lowrank_delta(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    h: Option<Var>,
    a: ParamKey,
    c: ParamKey,
    b: ParamKey,
) -> Var {
    let a = tape.param(store, a);
    let b = tape.param(store, b);
    let mut inner = tape.matmul(x, a);
    if let Some(h) = h {
        let c = tape.param(store, c);
        let ch = tape.matmul(h, c);
        inner = tape.add_row(inner, ch);
    }
    tape.matmul(inner, b)
}

fn adapter_forward(tape: &mut Tape, store: &ParamStore, site: &AdapterSite, x: Var, cond: Option<Var>) -> Var {
    let d = site.down.forward(tape, store, x);
    let d = tape.gelu(d);
    let u = site.up.forward(tape, store, d);
    let s = tape.param(store, site.scale);
    let mut delta = tape.mul_row(u, s);
    if let Some(c) = cond {
        let hc = site.cond.forward(tape, store, c);
        delta = tape.add_row(delta, hc);
    }
    tape.add(x, delta)
}

impl Net {
    fn new(cfg: &ToyModelConfig, store: &mut ParamStore, vocab: usize, d: Option<usize>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let bb = ParamGroup::Backbone;
        let cg = ParamGroup::Conditioning;
        let w = cfg.width;
        let n_patches = cfg.grid() * cfg.grid();
        let patch_dim = cfg.patch * cfg.patch * 3;
        let patch_embed = Linear::new(store, "loc.patch_embed", bb, patch_dim, w, &mut rng);
        let pos_visual = store.add_normal("loc.pos_visual", bb, (n_patches, w), 0.1, &mut rng);
        let pos_text = store.add_normal("loc.pos_text", bb, (cfg.max_tokens, w), 0.1, &mut rng);
        let type_visual = store.add_normal("loc.type_visual", bb, (1, w), 0.1, &mut rng);
        let type_text = store.add_normal("loc.type_text", bb, (1, w), 0.1, &mut rng);
        let tokens = store.add_normal("loc.tokens", bb, (vocab, w), 0.5, &mut rng);
        let cond_dim = d.unwrap_or(0);
        let blocks = (0..cfg.depth)
            .map(|l| {
                let name = format!("loc.block{l}");
                let enc = EncoderBlock::new(store, &name, bb, w, cfg.heads, cfg.ffn, &mut rng);
                let lowrank = match cfg.conditioning {
                    ConditioningMode::LowRank { rank } => {
                        let sa = 1.0 / (w as f64).sqrt();
                        let sc = 1.0 / (cond_dim.max(1) as f64).sqrt();
                        Some(LowRankSite {
                            a_q: store.add_normal(format!("{name}.lora_q.a"), cg, (w, rank), sa, &mut rng),
                            c_q: store.add_normal(format!("{name}.lora_q.c"), cg, (cond_dim, rank), sc, &mut rng),
                            b_q: store.add_zeros(format!("{name}.lora_q.b"), cg, (rank, w)),
                            a_m: store.add_normal(format!("{name}.lora_mlp.a"), cg, (w, rank), sa, &mut rng),
                            c_m: store.add_normal(format!("{name}.lora_mlp.c"), cg, (cond_dim, rank), sc, &mut rng),
                            b_m: store.add_zeros(format!("{name}.lora_mlp.b"), cg, (rank, cfg.ffn)),
                        })
                    }
                    _ => None,
                };
                let adapter = match cfg.conditioning {
                    ConditioningMode::Adapter { bottleneck, kind } => {
                        let src = match kind {
                            AdapterType::A => w,
                            AdapterType::B => cond_dim,
                        };
                        Some(AdapterSite {
                            down: Linear::new(store, &format!("{name}.adapter.down"), cg, w, bottleneck, &mut rng),
                            up: Linear::zeros(store, &format!("{name}.adapter.up"), cg, bottleneck, w),
                            scale: store.add_filled(format!("{name}.adapter.scale"), cg, (1, w), 1.0),
                            cond: Linear::zeros(store, &format!("{name}.adapter.cond"), cg, src, w),
                        })
                    }
                    _ => None,
                };
                Block { enc, lowrank, adapter }
            })
            .collect();
        let final_ln = LayerNorm::new(store, "loc.final_ln", w);
        let score = Linear::new(store, "loc.head.score", bb, w, 1, &mut rng);
        let offset = Linear::new(store, "loc.head.offset", bb, w, 2, &mut rng);
        let size = Linear::new(store, "loc.head.size", bb, w, 2, &mut rng);
        let conf = Linear::new(store, "loc.head.conf", bb, w, 1, &mut rng);
        let mut prompt_site = |name: &str, len: usize, rng: &mut ChaCha8Rng| PromptSite {
            tokens: store.add_normal(format!("loc.{name}.tokens"), cg, (len, w), 0.1, rng),
            cond: Linear::new(store, &format!("loc.{name}.cond"), cg, cond_dim.max(1), w, rng),
        };
        let prompt = match cfg.conditioning {
            ConditioningMode::Prompt { len } => Some(prompt_site("prompt", len, &mut rng)),
            _ => None,
        };
        let visual_prompt = match cfg.conditioning {
            ConditioningMode::VisualPrompt { len } => Some(prompt_site("visual_prompt", len, &mut rng)),
            _ => None,
        };
        let progress_embed = match cfg.conditioning {
            ConditioningMode::Adapter {
                kind: AdapterType::A, ..
            } => Some(ProgressEmbed {
                mlp: Mlp::new(store, "loc.progress_embed", cg, (2 * PROGRESS_FREQS, w, w), &mut rng),
            }),
            _ => None,
        };
        Net {
            patch_embed,
            pos_visual,
            pos_text,
            type_visual,
            type_text,
            tokens,
            blocks,
            final_ln,
            score,
            offset,
            size,
            conf,
            prompt,
            visual_prompt,
            progress_embed,
        }
    }

    /// The vector that adapters inject: `h`, or a time embedding of the
    /// progress value for Type A.
    fn cond_source(&self, tape: &mut Tape, store: &ParamStore, cfg: &ToyModelConfig, c: CondVars) -> Var {
        match (&self.progress_embed, cfg.conditioning) {
            (
                Some(pe),
                ConditioningMode::Adapter {
                    kind: AdapterType::A, ..
                },
            ) => {
                let f = Array2::from_shape_fn((1, 2 * PROGRESS_FREQS), |(_, j)| {
                    let w = PI * (1u32 << (j % PROGRESS_FREQS)) as f64;
                    if j < PROGRESS_FREQS {
                        (w * c.progress).sin()
                    } else {
                        (w * c.progress).cos()
                    }
                });
                let f = tape.constant(f);
                pe.mlp.forward(tape, store, f, None)
            }
            _ => c.h,
        }
    }

    fn prompt_rows(&self, tape: &mut Tape, store: &ParamStore, site: &PromptSite, cond: Option<CondVars>) -> Var {
        let e = tape.param(store, site.tokens);
        match cond {
            Some(c) => {
                let hh = site.cond.forward(tape, store, c.h);
                tape.concat_rows(&[e, hh])
            }
            None => e,
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        cfg: &ToyModelConfig,
        crop: &FloatImage,
        tokens: &[usize],
        cond: Option<CondVars>,
    ) -> PredVars {
        let g = cfg.grid();
        let n_patches = g * g;
        let patches = tape.constant(patchify(crop, cfg.patch));
        let v = self.patch_embed.forward(tape, store, patches);
        let pv = tape.param(store, self.pos_visual);
        let v = tape.add(v, pv);
        let tv = tape.param(store, self.type_visual);
        let mut v = tape.add_row(v, tv);

        let emb = tape.param(store, self.tokens);
        let t = tape.gather(emb, tokens);
        let pt = tape.param(store, self.pos_text);
        let pt = tape.slice_rows(pt, 0, tokens.len());
        let t = tape.add(t, pt);
        let tt = tape.param(store, self.type_text);
        let mut t = tape.add_row(t, tt);

        let mut visual_prefix = 0;
        if let Some(site) = &self.visual_prompt {
            let p = self.prompt_rows(tape, store, site, cond);
            visual_prefix = tape.shape(p).0;
            let p = tape.add_row(p, tv);
            v = tape.concat_rows(&[p, v]);
        }
        if let Some(site) = &self.prompt {
            let p = self.prompt_rows(tape, store, site, cond);
            let p = tape.add_row(p, tt);
            t = tape.concat_rows(&[p, t]);
        }
        let adapter_src = match cfg.conditioning {
            ConditioningMode::Adapter { .. } => cond.map(|c| self.cond_source(tape, store, cfg, c)),
            _ => None,
        };

        let mut x = tape.concat_rows(&[v, t]);
        for block in &self.blocks {
            let enc = &block.enc;
            let n = enc.ln1.forward(tape, store, x);
            let q_extra = block
                .lowrank
                .as_ref()
                .map(|s| lowrank_delta(tape, store, n, cond.map(|c| c.h), s.a_q, s.c_q, s.b_q));
            let a = enc.attn.forward(tape, store, n, n, q_extra, None);
            x = tape.add(x, a);
            let n = enc.ln2.forward(tape, store, x);
            let m_extra = block
                .lowrank
                .as_ref()
                .map(|s| lowrank_delta(tape, store, n, cond.map(|c| c.h), s.a_m, s.c_m, s.b_m));
            let m = enc.mlp.forward(tape, store, n, m_extra);
            x = tape.add(x, m);
            if let Some(site) = &block.adapter {
                x = adapter_forward(tape, store, site, x, adapter_src);
            }
        }
        let x = self.final_ln.forward(tape, store, x);
        let vis = tape.slice_rows(x, visual_prefix, visual_prefix + n_patches);

        let s = self.score.forward(tape, store, vis);
        let s = tape.transpose(s);
        let att = tape.softmax_rows(s);
        let pooled = tape.matmul(att, vis);
        let off = self.offset.forward(tape, store, vis);
        let off = tape.tanh(off);
        let off = tape.scale(off, 1.0 / g as f64);
        let centers = tape.constant(patch_centers(g));
        let pts = tape.add(centers, off);
        let center = tape.matmul(att, pts);
        let size = self.size.forward(tape, store, pooled);
        let size = tape.sigmoid(size);
        let half = tape.scale(size, 0.5);
        let lo = tape.sub(center, half);
        let hi = tape.add(center, half);
        let bbox = tape.concat_cols(&[lo, hi]);
        let conf_logit = self.conf.forward(tape, store, pooled);
        PredVars { bbox, conf_logit }
    }
}

/// Flattens non-overlapping `patch x patch` tiles row by row; values are
/// centred around zero.
pub fn patchify(img: &FloatImage, patch: usize) -> Matrix {
    let g = img.width / patch;
    let mut m = Matrix::zeros((g * (img.height / patch), patch * patch * 3));
    for gy in 0..img.height / patch {
        for gx in 0..g {
            let row = gy * g + gx;
            let mut col = 0;
            for y in 0..patch {
                for x in 0..patch {
                    for c in 0..3 {
                        m[[row, col]] = img.get(gx * patch + x, gy * patch + y, c) as f64 - 0.5;
                        col += 1;
                    }
                }
            }
        }
    }
    m
}

fn patch_centers(g: usize) -> Matrix {
    Array2::from_shape_fn((g * g, 2), |(i, j)| {
        let (r, c) = (i / g, i % g);
        let v = if j == 0 { c } else { r };
        (v as f64 + 0.5) / g as f64
    })
}

/// Tape nodes of the box loss terms.
#[derive(Clone, Copy, Debug)]
pub struct BoxLossVars {
    pub total: Var,
    pub l1: Var,
    pub giou: Var,
}

/// `Σ|pred − gt| + (1 − GIoU)` for a `1 x 4` predicted box.
pub fn box_loss_tape(tape: &mut Tape, pred: Var, gt: &NormBox) -> BoxLossVars {
    let g = gt.to_array();
    let gv = tape.constant(Array2::from_shape_vec((1, 4), g.to_vec()).expect("shape"));
    let diff = tape.sub(pred, gv);
    let abs = tape.abs(diff);
    let l1 = tape.sum(abs);
    let p: Vec<Var> = (0..4).map(|i| tape.slice_cols(pred, i, i + 1)).collect();
    let c: Vec<Var> = g.iter().map(|v| tape.constant_scalar(*v)).collect();
    let pw = tape.sub(p[2], p[0]);
    let ph = tape.sub(p[3], p[1]);
    let area_p = tape.mul(pw, ph);
    let area_g = (g[2] - g[0]) * (g[3] - g[1]);
    let ix0 = tape.maximum(p[0], c[0]);
    let iy0 = tape.maximum(p[1], c[1]);
    let ix1 = tape.minimum(p[2], c[2]);
    let iy1 = tape.minimum(p[3], c[3]);
    let iw = tape.sub(ix1, ix0);
    let iw = tape.relu(iw);
    let ih = tape.sub(iy1, iy0);
    let ih = tape.relu(ih);
    let inter = tape.mul(iw, ih);
    let union = tape.add_scalar(area_p, area_g);
    let union = tape.sub(union, inter);
    let iou = tape.div(inter, union);
    let ex0 = tape.minimum(p[0], c[0]);
    let ey0 = tape.minimum(p[1], c[1]);
    let ex1 = tape.maximum(p[2], c[2]);
    let ey1 = tape.maximum(p[3], c[3]);
    let ew = tape.sub(ex1, ex0);
    let eh = tape.sub(ey1, ey0);
    let enclose = tape.mul(ew, eh);
    let gap = tape.sub(enclose, union);
    let frac = tape.div(gap, enclose);
    let giou = tape.sub(iou, frac);
    let one_minus = tape.affine(giou, -1.0, 1.0);
    let total = tape.add(l1, one_minus);
    BoxLossVars { total, l1, giou }
}

/// Box loss between two normalized boxes.
pub fn box_loss(pred: &Prediction, gt: &NormBox) -> f64 {
    let mut tape = Tape::new();
    let p = tape.constant(Array2::from_shape_vec((1, 4), pred.bbox.to_array().to_vec()).expect("shape"));
    let l = box_loss_tape(&mut tape, p, gt);
    tape.scalar(l.total)
}

/// Uniformly random crop-sized image, for tests and smoke runs.
pub fn random_crop<R: Rng>(size: usize, rng: &mut R) -> FloatImage {
    FloatImage {
        width: size,
        height: size,
        data: (0..size * size * 3).map(|_| rng.gen::<f32>()).collect(),
    }
}
