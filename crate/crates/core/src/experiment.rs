//! Pipeline stages and the end-to-end toy experiment.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluation::{
    sliding_window_localize, tile_grid_localize, write_report, EvalReport, SampleRecord, WindowConfig,
};
use crate::geometry::BBox;
use crate::inference::{single_shot, zoom_infer, zoom_infer_fixed, InferConfig};
use crate::io::write_jsonl;
use crate::localizer::{ConditioningMode, ToyModel};
use crate::prior::{fit_kde, ratios_from_dataset, RatioDistribution};
use crate::search::{build_process, ExtendedSample, GenConfig};
use crate::synth::{generate_dataset, generate_proxy_dataset, sample_seed, ImageSource, SynthSample};
use crate::train::{fine_tune, pretrain, write_log_csv, LogRow};

/// Dataset split; each draws from its own seed stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    Proxy,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Proxy => "proxy",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
            Split::Proxy => 3,
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "proxy" => Ok(Split::Proxy),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

pub fn split_seed(seed: u64, split: Split) -> u64 {
    sample_seed(seed, u64::MAX - split.stream())
}

pub fn synth_split(cfg: &RunConfig, split: Split) -> Result<Vec<SynthSample>> {
    let seed = split_seed(cfg.seed, split);
    match split {
        Split::Proxy => generate_proxy_dataset(&cfg.proxy()?, seed, cfg.proxy_count),
        Split::Train | Split::Test => {
            let n = if split == Split::Train { cfg.n_train } else { cfg.n_test };
            let synth = crate::synth::SynthConfig { seed, ..cfg.synth()? };
            generate_dataset(&synth, split.name(), n)
        }
    }
}

pub fn fit_prior(cfg: &RunConfig, proxy: &[SynthSample]) -> Result<RatioDistribution> {
    let ratios = ratios_from_dataset(proxy.iter().map(|s| (&s.gt, s.image_size)))?;
    fit_kde(&ratios, cfg.bandwidth()?)
}

/// Attaches a ground-truth search process to every sample.
pub fn extend(samples: &[SynthSample], dist: &RatioDistribution, gen: &GenConfig) -> Result<Vec<ExtendedSample>> {
    samples
        .iter()
        .map(|s| {
            let g = build_process(&s.gt, s.image_size, dist, gen, s.seed)?;
            Ok(ExtendedSample {
                id: s.id.clone(),
                image: s.image.clone(),
                expression: s.expression.clone(),
                gt: s.gt,
                image_size: s.image_size,
                process: g.process,
                seed: s.seed,
            })
        })
        .collect()
}

/// Trains the localizer backbone on proxy scenes.
pub fn pretrain_backbone(cfg: &RunConfig, proxy: &[SynthSample]) -> Result<(ToyModel, Vec<LogRow>)> {
    let model_cfg = crate::localizer::ToyModelConfig {
        conditioning: ConditioningMode::None,
        ..cfg.model()?
    };
    let mut model = ToyModel::new(model_cfg, None)?;
    let log = pretrain(&mut model, proxy, &cfg.pretrain())?;
    Ok((model, log))
}

/// Fine-tunes a copy of `backbone`, either single-shot or with the zoom module.
pub fn train_localizer(
    cfg: &RunConfig,
    backbone: &ToyModel,
    samples: &[ExtendedSample],
    images: &ImageSource,
    zoom: bool,
) -> Result<(ToyModel, Vec<LogRow>)> {
    let piza = if zoom { Some(cfg.piza()?) } else { None };
    let mut model = ToyModel::new(cfg.model()?, piza)?;
    model.load_backbone(backbone);
    let ft = crate::train::FineTuneConfig {
        single_shot: !zoom,
        ..cfg.fine_tune()
    };
    let log = fine_tune(&mut model, samples, images, &ft)?;
    Ok((model, log))
}

/// Inference strategy evaluated on the test split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Method {
    SingleShot,
    Piza,
    Fixed(usize),
    SlidingWindow(WindowConfig),
    TileGrid(usize),
}

impl Method {
    /// Whether the method needs a model with the zoom module.
    pub fn zooms(self) -> bool {
        matches!(self, Method::Piza | Method::Fixed(_))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::SingleShot => f.write_str("single-shot"),
            Method::Piza => f.write_str("piza"),
            Method::Fixed(t) => write!(f, "piza-fixed-{t}"),
            Method::SlidingWindow(w) => write!(f, "sliding-window-{}-{}", w.size, w.stride),
            Method::TileGrid(n) => write!(f, "tile-grid-{n}"),
        }
    }
}

/// One line of an inference results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub id: String,
    pub method: String,
    pub pred: BBox,
    /// Zoom path ending in `pred`; just the image and `pred` for one-shot
    /// methods.
    pub boxes: Vec<BBox>,
    pub steps: usize,
    pub calls: usize,
    pub eos_probs: Vec<f64>,
}

pub fn run_method(
    model: &ToyModel,
    method: Method,
    samples: &[SynthSample],
    images: &ImageSource,
    infer: InferConfig,
) -> Result<Vec<ResultRecord>> {
    if method.zooms() && model.piza().is_none() {
        return Err(Error::Config(format!("{method} needs a model trained with the zoom module")));
    }
    let name = method.to_string();
    samples
        .iter()
        .map(|s| {
            let image = images.load(&s.id, &s.image)?;
            let zoom = match method {
                Method::SingleShot => Some(single_shot(model, &image, &s.expression)?),
                Method::Piza => Some(zoom_infer(model, model, &image, &s.expression, infer)?),
                Method::Fixed(t) => Some(zoom_infer_fixed(model, model, &image, &s.expression, t)?),
                Method::SlidingWindow(_) | Method::TileGrid(_) => None,
            };
            if let Some(r) = zoom {
                return Ok(ResultRecord {
                    id: s.id.clone(),
                    method: name.clone(),
                    pred: *r.answer(),
                    boxes: r.boxes.clone(),
                    steps: r.steps,
                    calls: r.localizer_calls,
                    eos_probs: r.eos_probs,
                });
            }
            let (pred, calls) = match method {
                Method::SlidingWindow(w) => sliding_window_localize(model, &image, &s.expression, w)?,
                Method::TileGrid(n) => tile_grid_localize(model, &image, &s.expression, n)?,
                _ => unreachable!(),
            };
            Ok(ResultRecord {
                id: s.id.clone(),
                method: name.clone(),
                pred,
                boxes: vec![BBox::full(s.image_size), pred],
                steps: 1,
                calls,
                eos_probs: Vec::new(),
            })
        })
        .collect()
}

/// Scores `results` against the ground truth of `gts`, in `gts` order.
pub fn evaluate(method: &str, results: &[ResultRecord], gts: &[SynthSample]) -> Result<EvalReport> {
    let by_id: std::collections::HashMap<&str, &ResultRecord> = results.iter().map(|r| (r.id.as_str(), r)).collect();
    if by_id.len() != results.len() {
        return Err(Error::invalid("duplicate sample ids in results"));
    }
    if results.len() != gts.len() {
        return Err(Error::invalid(format!(
            "{} results for {} ground-truth samples",
            results.len(),
            gts.len()
        )));
    }
    let records = gts
        .iter()
        .map(|g| {
            let r = by_id
                .get(g.id.as_str())
                .ok_or_else(|| Error::invalid(format!("no result for sample {}", g.id)))?;
            SampleRecord::new(&g.id, r.pred, g.gt, r.steps, r.calls)
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::new(method, records)
}

/// Methods compared in the experiment, in report order.
pub fn methods(cfg: &RunConfig) -> Result<Vec<Method>> {
    let mut m = vec![Method::SingleShot, Method::Piza];
    m.extend(cfg.fixed_steps.iter().map(|&t| Method::Fixed(t)));
    m.push(Method::SlidingWindow(cfg.window()?));
    m.push(Method::TileGrid(cfg.tile_grid));
    Ok(m)
}

/// Everything the experiment produces.
#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub prior: RatioDistribution,
    pub extended: Vec<ExtendedSample>,
    pub reports: Vec<EvalReport>,
    pub pretrain_log: Vec<LogRow>,
    pub single_shot_log: Vec<LogRow>,
    pub piza_log: Vec<LogRow>,
    /// Wall-clock seconds per stage.
    pub timings: Vec<(String, f64)>,
}

impl ExperimentOutput {
    pub fn report(&self, method: &str) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.method == method)
    }

    pub fn mean_steps_gt(&self) -> f64 {
        self.extended.iter().map(|e| e.process.steps() as f64).sum::<f64>() / self.extended.len() as f64
    }
}

/// Proxy scenes → prior → extended train set → pretraining → fine-tuning →
/// evaluation of every method. Artifacts go to `out` when given.
pub fn run_experiment(cfg: &RunConfig, out: Option<&Path>, log: &mut dyn FnMut(&str)) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut Vec<(String, f64)>, log: &mut dyn FnMut(&str)| {
        let s = clock.elapsed().as_secs_f64();
        log(&format!("{name}: {s:.1}s"));
        timings.push((name.to_string(), s));
        clock = Instant::now();
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.toml");
        std::fs::write(&path, cfg.to_text()).map_err(|e| Error::io(&path, e))?;
    }

    let proxy = synth_split(cfg, Split::Proxy)?;
    let prior = fit_prior(cfg, &proxy)?;
    let train = synth_split(cfg, Split::Train)?;
    let test = synth_split(cfg, Split::Test)?;
    let extended = extend(&train, &prior, &cfg.gen()?)?;
    if let Some(dir) = out {
        prior.save(&dir.join("prior.json"))?;
        write_jsonl(&dir.join("extended.jsonl"), &extended)?;
    }
    lap("data", &mut timings, log);

    let (backbone, pretrain_log) = pretrain_backbone(cfg, &proxy)?;
    lap("pretrain", &mut timings, log);
    let images = ImageSource::render(&train);
    let (ss, single_shot_log) = train_localizer(cfg, &backbone, &extended, &images, false)?;
    lap("fine-tune single-shot", &mut timings, log);
    let (pz, piza_log) = train_localizer(cfg, &backbone, &extended, &images, true)?;
    lap("fine-tune piza", &mut timings, log);
    if let Some(dir) = out {
        write_log_csv(&dir.join("pretrain_log.csv"), &pretrain_log)?;
        write_log_csv(&dir.join("single_shot_log.csv"), &single_shot_log)?;
        write_log_csv(&dir.join("piza_log.csv"), &piza_log)?;
        ss.save(&dir.join("single_shot.bin"))?;
        pz.save(&dir.join("piza.bin"))?;
    }

    let test_images = ImageSource::render(&test);
    let mut reports = Vec::new();
    for method in methods(cfg)? {
        let model = if method.zooms() { &pz } else { &ss };
        let results = run_method(model, method, &test, &test_images, cfg.infer())?;
        let name = method.to_string();
        if let Some(dir) = out {
            write_jsonl(&dir.join(format!("results_{name}.jsonl")), &results)?;
        }
        let report = evaluate(&name, &results, &test)?;
        log(&format!(
            "{name}: mAcc {:.3} Acc50 {:.3} Acc75 {:.3} steps {:.2} calls {:.2}",
            report.m_acc, report.acc50, report.acc75, report.mean_steps, report.mean_calls
        ));
        reports.push(report);
    }
    lap("evaluate", &mut timings, log);
    if let Some(dir) = out {
        write_report(dir, &reports)?;
    }
    Ok(ExperimentOutput {
        prior,
        extended,
        reports,
        pretrain_log,
        single_shot_log,
        piza_log,
        timings,
    })
}
