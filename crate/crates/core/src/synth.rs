//! Synthetic small-object scenes with templated referring expressions.
//!
//! A scene is fully described by its metadata (objects, seed); pixels are
//! produced on demand by [`SceneRenderer`], so large images never need to be
//! held in memory.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, ImageSize, PixelSource, RgbImage};
use crate::io::{read_jsonl, write_jsonl};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether the point `(u, v)` in box-relative `[0,1]²` coordinates is
    /// covered by the shape.
    fn covers(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Square => true,
            Shape::Circle => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            // apex at the top centre, base along the bottom edge
            Shape::Triangle => (u - 0.5).abs() <= 0.5 * v,
        }
    }
}

impl FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Shape::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown shape {s:?}")))
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Palette of saturated colours available to objects.
pub const COLORS: [(&str, [u8; 3]); 8] = [
    ("red", [225, 35, 35]),
    ("green", [35, 185, 55]),
    ("blue", [40, 75, 235]),
    ("yellow", [245, 225, 30]),
    ("purple", [135, 45, 205]),
    ("orange", [250, 135, 15]),
    ("cyan", [25, 205, 225]),
    ("magenta", [230, 40, 175]),
];

pub fn color_rgb(name: &str) -> Option<[u8; 3]> {
    COLORS.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
}

/// Words used between the object and its relation clause.
pub const VERBS: [&str; 3] = ["positioned", "situated", "located"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    pub fn phrase(self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    /// Relation of `a` with respect to `b` along the dominant axis.
    pub fn between(a: &BBox, b: &BBox) -> Relation {
        let (ax, ay) = a.center();
        let (bx, by) = b.center();
        let (dx, dy) = (ax - bx, ay - by);
        if dx.abs() >= dy.abs() {
            if dx < 0.0 {
                Relation::LeftOf
            } else {
                Relation::RightOf
            }
        } else if dy < 0.0 {
            Relation::Above
        } else {
            Relation::Below
        }
    }
}

/// Image corner used as a landmark when a scene has no distractors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Corner {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Corner {
    pub fn phrase(self) -> &'static str {
        match self {
            Corner::TopLeft => "top left",
            Corner::TopRight => "top right",
            Corner::BottomLeft => "bottom left",
            Corner::BottomRight => "bottom right",
        }
    }

    pub fn of(b: &BBox, img: ImageSize) -> Corner {
        let (cx, cy) = b.center();
        let left = cx < img.width as f64 / 2.0;
        let top = cy < img.height as f64 / 2.0;
        match (top, left) {
            (true, true) => Corner::TopLeft,
            (true, false) => Corner::TopRight,
            (false, true) => Corner::BottomLeft,
            (false, false) => Corner::BottomRight,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: String,
    pub bbox: BBox,
}

/// Scene generation parameters for small-object datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub image_size: ImageSize,
    /// Target area ratio range (box area over image area).
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub distractors_min: usize,
    pub distractors_max: usize,
    /// Largest width/height ratio of an object box.
    pub max_aspect: f64,
    pub shapes: Vec<Shape>,
    pub colors: Vec<String>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: ImageSize {
                width: 1024,
                height: 1024,
            },
            ratio_min: 5e-4,
            ratio_max: 2e-3,
            distractors_min: 2,
            distractors_max: 5,
            max_aspect: 1.25,
            shapes: Shape::ALL.to_vec(),
            colors: COLORS.iter().map(|(n, _)| n.to_string()).collect(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio_min > 0.0 && self.ratio_min <= self.ratio_max && self.ratio_max <= 0.01) {
            return Err(Error::Config(format!(
                "target ratio range [{}, {}] must lie in (0, 0.01]",
                self.ratio_min, self.ratio_max
            )));
        }
        self.layout().validate()
    }

    fn layout(&self) -> LayoutParams {
        LayoutParams {
            image_size: self.image_size,
            ratio_min: self.ratio_min,
            ratio_max: self.ratio_max,
            distractors_min: self.distractors_min,
            distractors_max: self.distractors_max,
            max_aspect: self.max_aspect,
            shapes: self.shapes.clone(),
            colors: self.colors.clone(),
        }
    }
}

/// Scenes with ordinary-sized objects, standing in for a pre-training corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyConfig {
    pub image_size: ImageSize,
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub distractors_min: usize,
    pub distractors_max: usize,
    pub max_aspect: f64,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig {
            image_size: ImageSize {
                width: 256,
                height: 256,
            },
            ratio_min: 0.012,
            ratio_max: 0.1,
            distractors_min: 2,
            distractors_max: 5,
            max_aspect: 1.25,
        }
    }
}

impl ProxyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio_min > 0.0 && self.ratio_min <= self.ratio_max && self.ratio_max < 1.0) {
            return Err(Error::Config("proxy ratio range must lie in (0, 1)".into()));
        }
        self.layout().validate()
    }

    fn layout(&self) -> LayoutParams {
        LayoutParams {
            image_size: self.image_size,
            ratio_min: self.ratio_min,
            ratio_max: self.ratio_max,
            distractors_min: self.distractors_min,
            distractors_max: self.distractors_max,
            max_aspect: self.max_aspect,
            shapes: Shape::ALL.to_vec(),
            colors: COLORS.iter().map(|(n, _)| n.to_string()).collect(),
        }
    }
}

struct LayoutParams {
    image_size: ImageSize,
    ratio_min: f64,
    ratio_max: f64,
    distractors_min: usize,
    distractors_max: usize,
    max_aspect: f64,
    shapes: Vec<Shape>,
    colors: Vec<String>,
}

impl LayoutParams {
    fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() || self.colors.is_empty() {
            return Err(Error::Config("shape and colour sets must be non-empty".into()));
        }
        for c in &self.colors {
            if color_rgb(c).is_none() {
                return Err(Error::Config(format!("unknown colour {c:?}")));
            }
        }
        if self.shapes.len() * self.colors.len() < 2 && self.distractors_max > 0 {
            return Err(Error::Config("distractors need a second shape/colour combination".into()));
        }
        if self.distractors_min > self.distractors_max {
            return Err(Error::Config("distractors_min exceeds distractors_max".into()));
        }
        if !(self.max_aspect >= 1.0 && self.max_aspect.is_finite()) {
            return Err(Error::Config("max_aspect must be at least 1".into()));
        }
        Ok(())
    }
}

/// One generated referring-expression sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSample {
    pub id: String,
    /// Image path relative to the dataset directory.
    pub image: String,
    pub expression: String,
    pub gt: BBox,
    pub image_size: ImageSize,
    pub seed: u64,
    pub target: SceneObject,
    pub distractors: Vec<SceneObject>,
}

impl SynthSample {
    pub fn objects(&self) -> impl Iterator<Item = &SceneObject> {
        std::iter::once(&self.target).chain(&self.distractors)
    }

    /// Pixel source for this scene.
    pub fn renderer(&self) -> SceneRenderer {
        SceneRenderer::new(self.image_size, self.seed, self.objects().cloned().collect())
    }
}

/// Per-sample seed derived from a dataset seed and the sample index.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    splitmix(seed ^ splitmix(index.wrapping_add(0x5EED)))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates the scene with the given per-sample seed.
pub fn generate_scene(cfg: &SynthConfig, id: &str, seed: u64) -> Result<SynthSample> {
    cfg.validate()?;
    generate_with(&cfg.layout(), id, seed)
}

pub fn generate_proxy_scene(cfg: &ProxyConfig, id: &str, seed: u64) -> Result<SynthSample> {
    cfg.validate()?;
    generate_with(&cfg.layout(), id, seed)
}

/// `n` samples with ids `{prefix}{index:06}` and seeds from [`sample_seed`].
pub fn generate_dataset(cfg: &SynthConfig, prefix: &str, n: usize) -> Result<Vec<SynthSample>> {
    (0..n)
        .map(|i| generate_scene(cfg, &format!("{prefix}{i:06}"), sample_seed(cfg.seed, i as u64)))
        .collect()
}

pub fn generate_proxy_dataset(cfg: &ProxyConfig, seed: u64, n: usize) -> Result<Vec<SynthSample>> {
    (0..n)
        .map(|i| generate_proxy_scene(cfg, &format!("proxy{i:06}"), sample_seed(seed, i as u64)))
        .collect()
}

const PLACEMENT_RETRIES: usize = 100;

fn sample_box<R: Rng>(p: &LayoutParams, rng: &mut R) -> Option<BBox> {
    let img = p.image_size;
    let ratio = (rng.gen_range(p.ratio_min.ln()..=p.ratio_max.ln())).exp();
    let aspect = rng.gen_range(-p.max_aspect.ln()..=p.max_aspect.ln()).exp();
    let area = ratio * img.area();
    let (w, h) = ((area * aspect).sqrt(), (area / aspect).sqrt());
    let (wf, hf) = (img.width as f64, img.height as f64);
    if w >= wf || h >= hf {
        return None;
    }
    let x0 = rng.gen_range(0.0..=wf - w);
    let y0 = rng.gen_range(0.0..=hf - h);
    BBox::new(x0, y0, x0 + w, y0 + h).ok()
}

fn separated(a: &BBox, b: &BBox) -> bool {
    let gap = 0.5 * a.min_edge().max(b.min_edge());
    a.x1 + gap <= b.x0 || b.x1 + gap <= a.x0 || a.y1 + gap <= b.y0 || b.y1 + gap <= a.y0
}

fn generate_with(p: &LayoutParams, id: &str, seed: u64) -> Result<SynthSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target_shape = *p.shapes.choose(&mut rng).expect("non-empty");
    let target_color = p.colors.choose(&mut rng).expect("non-empty").clone();
    let n_distractors = rng.gen_range(p.distractors_min..=p.distractors_max);
    let others: Vec<(Shape, &String)> = p
        .shapes
        .iter()
        .flat_map(|s| p.colors.iter().map(move |c| (*s, c)))
        .filter(|(s, c)| !(*s == target_shape && **c == target_color))
        .collect();
    for _ in 0..PLACEMENT_RETRIES {
        let mut boxes: Vec<BBox> = Vec::with_capacity(n_distractors + 1);
        let mut ok = true;
        for _ in 0..=n_distractors {
            let mut placed = false;
            for _ in 0..PLACEMENT_RETRIES {
                if let Some(b) = sample_box(p, &mut rng) {
                    if boxes.iter().all(|o| separated(o, &b)) {
                        boxes.push(b);
                        placed = true;
                        break;
                    }
                }
            }
            if !placed {
                ok = false;
                break;
            }
        }
        if !ok {
            continue;
        }
        let target = SceneObject {
            shape: target_shape,
            color: target_color.clone(),
            bbox: boxes[0],
        };
        let distractors: Vec<SceneObject> = boxes[1..]
            .iter()
            .map(|b| {
                let (s, c) = others.choose(&mut rng).expect("checked in validate");
                SceneObject {
                    shape: *s,
                    color: (*c).clone(),
                    bbox: *b,
                }
            })
            .collect();
        let verb = *VERBS.choose(&mut rng).expect("non-empty");
        let expression = describe(&target, &distractors, verb, p.image_size);
        let sample = SynthSample {
            id: id.to_string(),
            image: format!("images/{id}.png"),
            expression,
            gt: target.bbox,
            image_size: p.image_size,
            seed,
            target,
            distractors,
        };
        if resolve(&parse_expression(&sample.expression)?, &sample)? == vec![0] {
            return Ok(sample);
        }
    }
    Err(Error::SamplingExhausted(PLACEMENT_RETRIES))
}

fn nearest<'a>(of: &BBox, among: impl Iterator<Item = &'a SceneObject>) -> Option<&'a SceneObject> {
    let (x, y) = of.center();
    among
        .map(|o| {
            let (ox, oy) = o.bbox.center();
            ((ox - x).powi(2) + (oy - y).powi(2), o)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, o)| o)
}

fn describe(target: &SceneObject, distractors: &[SceneObject], verb: &str, img: ImageSize) -> String {
    match nearest(&target.bbox, distractors.iter()) {
        Some(n) => format!(
            "the {} {} {verb} {} the {} {}",
            target.color,
            target.shape,
            Relation::between(&target.bbox, &n.bbox).phrase(),
            n.color,
            n.shape
        ),
        None => format!(
            "the {} {} {verb} near the {} corner of the image",
            target.color,
            target.shape,
            Corner::of(&target.bbox, img).phrase()
        ),
    }
}

/// Structured content of a templated expression.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedExpression {
    pub color: String,
    pub shape: Shape,
    pub anchor: Anchor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Anchor {
    Object {
        relation: Relation,
        color: String,
        shape: Shape,
    },
    Corner(Corner),
}

/// Parses an expression produced by the template grammar.
pub fn parse_expression(text: &str) -> Result<ParsedExpression> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let bad = || Error::invalid(format!("expression does not follow the template: {text:?}"));
    if words.len() < 5 || words[0] != "the" || !VERBS.contains(&words[3]) {
        return Err(bad());
    }
    let color = words[1].to_string();
    color_rgb(&color).ok_or_else(bad)?;
    let shape: Shape = words[2].parse()?;
    let rest = &words[4..];
    let anchor = match rest {
        ["near", "the", v, h, "corner", "of", "the", "image"] => {
            let corner = [Corner::TopLeft, Corner::TopRight, Corner::BottomLeft, Corner::BottomRight]
                .into_iter()
                .find(|c| c.phrase() == format!("{v} {h}"))
                .ok_or_else(bad)?;
            Anchor::Corner(corner)
        }
        _ => {
            let (relation, tail) = match rest {
                ["left", "of", tail @ ..] => (Relation::LeftOf, tail),
                ["right", "of", tail @ ..] => (Relation::RightOf, tail),
                ["above", tail @ ..] => (Relation::Above, tail),
                ["below", tail @ ..] => (Relation::Below, tail),
                _ => return Err(bad()),
            };
            let ["the", c, s] = tail else { return Err(bad()) };
            color_rgb(c).ok_or_else(bad)?;
            Anchor::Object {
                relation,
                color: c.to_string(),
                shape: s.parse()?,
            }
        }
    };
    Ok(ParsedExpression { color, shape, anchor })
}

/// Indices (0 = target, then distractors) of every object the parsed
/// expression describes, found by scanning all objects.
pub fn resolve(expr: &ParsedExpression, sample: &SynthSample) -> Result<Vec<usize>> {
    let objects: Vec<&SceneObject> = sample.objects().collect();
    let mut hits = Vec::new();
    for (i, o) in objects.iter().enumerate() {
        if o.shape != expr.shape || o.color != expr.color {
            continue;
        }
        let matches = match &expr.anchor {
            Anchor::Corner(c) => objects.len() == 1 && Corner::of(&o.bbox, sample.image_size) == *c,
            Anchor::Object { relation, color, shape } => {
                let others = objects.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, x)| *x);
                match nearest(&o.bbox, others) {
                    Some(n) => {
                        n.shape == *shape && n.color == *color && Relation::between(&o.bbox, &n.bbox) == *relation
                    }
                    None => false,
                }
            }
        };
        if matches {
            hits.push(i);
        }
    }
    Ok(hits)
}

/// Region ranking score `S · exp(−|a − 1|) · p`.
pub fn region_score(area: f64, aspect: f64, stability: f64) -> Result<f64> {
    if !(area > 0.0 && area.is_finite()) {
        return Err(Error::invalid(format!("area must be positive, got {area}")));
    }
    if !(aspect > 0.0 && aspect.is_finite()) {
        return Err(Error::invalid(format!("aspect ratio must be positive, got {aspect}")));
    }
    if !(0.0..=1.0).contains(&stability) {
        return Err(Error::invalid(format!("stability must lie in [0, 1], got {stability}")));
    }
    Ok(area * (-(aspect - 1.0).abs()).exp() * stability)
}

/// Procedural rasterizer for a scene: tinted multi-octave value noise, a few
/// faint lines, and flat-coloured objects.
#[derive(Clone, Debug)]
pub struct SceneRenderer {
    size: ImageSize,
    noise_seed: u64,
    /// Lattice values per octave, row-major with `cols` columns.
    lattices: Vec<(usize, Vec<f64>)>,
    tint: [f64; 3],
    lines: Vec<(f64, f64, f64, f64, f64)>,
    objects: Vec<([u8; 3], Shape, BBox)>,
}

fn lattice(seed: u64, ix: i64, iy: i64, octave: u64) -> f64 {
    let h = splitmix(seed ^ splitmix((ix as u64) ^ splitmix((iy as u64) ^ (octave << 56))));
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

const OCTAVES: [(f64, f64); 3] = [(0.0078125, 34.0), (0.03125, 18.0), (0.125, 10.0)];

impl SceneRenderer {
    pub fn new(size: ImageSize, seed: u64, objects: Vec<SceneObject>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let base = rng.gen_range(95.0..165.0);
        let tint = [
            base + rng.gen_range(-12.0..12.0),
            base + rng.gen_range(-12.0..12.0),
            base + rng.gen_range(-12.0..12.0),
        ];
        let (w, h) = (size.width as f64, size.height as f64);
        let lines = (0..rng.gen_range(2..6))
            .map(|_| {
                let shade = rng.gen_range(-28.0..28.0);
                (rng.gen_range(0.0..w), rng.gen_range(0.0..h), rng.gen_range(0.0..w), rng.gen_range(0.0..h), shade)
            })
            .collect();
        let objects = objects
            .into_iter()
            .map(|o| (color_rgb(&o.color).unwrap_or([255, 255, 255]), o.shape, o.bbox))
            .collect();
        let noise_seed: u64 = rng.gen();
        let lattices = OCTAVES
            .iter()
            .enumerate()
            .map(|(o, (freq, _))| {
                let cols = (w * freq).floor() as usize + 2;
                let rows = (h * freq).floor() as usize + 2;
                let values = (0..rows * cols)
                    .map(|k| lattice(noise_seed, (k % cols) as i64, (k / cols) as i64, o as u64))
                    .collect();
                (cols, values)
            })
            .collect();
        SceneRenderer {
            size,
            noise_seed,
            lattices,
            tint,
            lines,
            objects,
        }
    }

    fn lattice(&self, ix: i64, iy: i64, octave: usize) -> f64 {
        let (cols, values) = &self.lattices[octave];
        match values.get(iy as usize * cols + ix as usize) {
            Some(v) if (ix as usize) < *cols => *v,
            _ => lattice(self.noise_seed, ix, iy, octave as u64),
        }
    }

    fn noise(&self, x: f64, y: f64) -> f64 {
        let mut v = 0.0;
        for (o, (freq, amp)) in OCTAVES.iter().enumerate() {
            // coordinates are non-negative, so truncation is floor
            let (fx, fy) = (x * freq, y * freq);
            let (ix, iy) = (fx as i64, fy as i64);
            let (tx, ty) = (fx - ix as f64, fy - iy as f64);
            let (sx, sy) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
            let a = self.lattice(ix, iy, o);
            let b = self.lattice(ix + 1, iy, o);
            let c = self.lattice(ix, iy + 1, o);
            let d = self.lattice(ix + 1, iy + 1, o);
            let top = a + (b - a) * sx;
            let bottom = c + (d - c) * sx;
            v += amp * (top + (bottom - top) * sy);
        }
        v
    }
}

impl PixelSource for SceneRenderer {
    fn size(&self) -> ImageSize {
        self.size
    }

    fn rgb(&self, x: u32, y: u32) -> [u8; 3] {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        for (rgb, shape, b) in self.objects.iter().rev() {
            if px >= b.x0 && px < b.x1 && py >= b.y0 && py < b.y1 {
                let u = (px - b.x0) / b.width();
                let v = (py - b.y0) / b.height();
                if shape.covers(u, v) {
                    return *rgb;
                }
            }
        }
        let mut shade = self.noise(px, py);
        for (x0, y0, x1, y1, s) in &self.lines {
            let (dx, dy) = (x1 - x0, y1 - y0);
            let len2 = dx * dx + dy * dy;
            if len2 == 0.0 {
                continue;
            }
            let t = (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0);
            let d2 = (x0 + t * dx - px).powi(2) + (y0 + t * dy - py).powi(2);
            if d2 <= 1.0 {
                shade += s;
            }
        }
        let c = |k: usize| (self.tint[k] + shade + 0.5).clamp(0.0, 255.0) as u8;
        [c(0), c(1), c(2)]
    }
}

/// Fixed vocabulary of the expression templates.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    words: Vec<String>,
}

pub const PAD: usize = 0;
pub const OOV: usize = 1;

impl Default for Vocabulary {
    fn default() -> Self {
        let mut words: Vec<String> = vec!["<pad>".into(), "<oov>".into()];
        let fixed = [
            "the", "of", "near", "corner", "image", "left", "right", "above", "below", "top", "bottom",
        ];
        words.extend(fixed.iter().map(|w| w.to_string()));
        words.extend(VERBS.iter().map(|w| w.to_string()));
        words.extend(Shape::ALL.iter().map(|s| s.name().to_string()));
        words.extend(COLORS.iter().map(|(n, _)| n.to_string()));
        Vocabulary { words }
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Lower-cased whitespace tokens; unknown words map to [`OOV`].
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let ids: Vec<usize> = text
            .split_whitespace()
            .map(|w| {
                let w = w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
                self.words.iter().position(|x| *x == w).unwrap_or(OOV)
            })
            .collect();
        if ids.is_empty() {
            return Err(Error::Empty("expression"));
        }
        Ok(ids)
    }
}

/// Writes `samples` as `index.jsonl` under `dir`, rendering each image to
/// `dir/<sample.image>` when `render_images` is set.
pub fn write_dataset(dir: &Path, samples: &[SynthSample], render_images: bool) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if render_images {
        for s in samples {
            let path = dir.join(&s.image);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            RgbImage::render(&s.renderer()).write_png(&path)?;
        }
    }
    let index = dir.join("index.jsonl");
    write_jsonl(&index, samples)?;
    Ok(index)
}

/// Reads an `index.jsonl` file (or the one inside a directory).
pub fn read_dataset(path: &Path) -> Result<Vec<SynthSample>> {
    let index = if path.is_dir() { path.join("index.jsonl") } else { path.to_path_buf() };
    read_jsonl(&index)
}

/// Pixels of one scene, either rendered procedurally or decoded from disk.
#[derive(Clone, Debug)]
pub enum SceneImage {
    Rendered(SceneRenderer),
    Raster(RgbImage),
}

impl PixelSource for SceneImage {
    fn size(&self) -> ImageSize {
        match self {
            SceneImage::Rendered(r) => r.size(),
            SceneImage::Raster(r) => r.size(),
        }
    }

    fn rgb(&self, x: u32, y: u32) -> [u8; 3] {
        match self {
            SceneImage::Rendered(r) => r.rgb(x, y),
            SceneImage::Raster(r) => r.rgb(x, y),
        }
    }
}

/// Resolves sample ids and image paths to pixels.
#[derive(Clone, Debug)]
pub enum ImageSource {
    /// Render from scene metadata keyed by sample id.
    Render(HashMap<String, SynthSample>),
    /// Decode PNGs relative to a dataset directory.
    Directory(PathBuf),
}

impl ImageSource {
    pub fn render(samples: &[SynthSample]) -> Self {
        ImageSource::Render(samples.iter().map(|s| (s.id.clone(), s.clone())).collect())
    }

    /// Renders the scenes listed in a dataset index; the output is identical
    /// to the PNGs written next to it.
    pub fn for_dataset(dir: &Path) -> Result<Self> {
        let index = if dir.is_dir() { dir.join("index.jsonl") } else { dir.to_path_buf() };
        let samples = read_dataset(&index)?;
        Ok(ImageSource::render(&samples))
    }

    pub fn load(&self, id: &str, image: &str) -> Result<SceneImage> {
        match self {
            ImageSource::Render(map) => map
                .get(id)
                .map(|s| SceneImage::Rendered(s.renderer()))
                .ok_or_else(|| Error::invalid(format!("no scene metadata for sample {id}"))),
            ImageSource::Directory(root) => Ok(SceneImage::Raster(RgbImage::read_png(&root.join(image))?)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            image_size: ImageSize::new(256, 256).unwrap(),
            ratio_min: 0.002,
            ratio_max: 0.008,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn region_score_examples() {
        assert_eq!(region_score(100.0, 1.0, 1.0).unwrap(), 100.0);
        let v = region_score(400.0, 2.0, 0.9).unwrap();
        assert!((v - 400.0 * (-1.0f64).exp() * 0.9).abs() < 1e-12);
        assert!((v - 132.44).abs() < 0.01);
        assert_eq!(region_score(5.0, 3.0, 0.0).unwrap(), 0.0);
        assert!(region_score(0.0, 1.0, 1.0).is_err());
        assert!(region_score(1.0, -1.0, 1.0).is_err());
        assert!(region_score(1.0, 1.0, 1.5).is_err());
    }

    #[test]
    fn scenes_are_deterministic() {
        let cfg = small_cfg();
        let a = generate_scene(&cfg, "s", 42).unwrap();
        let b = generate_scene(&cfg, "s", 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(RgbImage::render(&a.renderer()), RgbImage::render(&b.renderer()));
    }

    #[test]
    fn expressions_resolve_to_the_target() {
        let cfg = small_cfg();
        for s in generate_dataset(&cfg, "t", 200).unwrap() {
            let parsed = parse_expression(&s.expression).unwrap();
            assert_eq!(resolve(&parsed, &s).unwrap(), vec![0], "{}", s.expression);
            let r = s.gt.area() / cfg.image_size.area();
            assert!(r >= cfg.ratio_min * (1.0 - 1e-9) && r <= cfg.ratio_max * (1.0 + 1e-9));
            assert!(s.gt.is_inside(cfg.image_size));
        }
    }

    #[test]
    fn empty_scene_uses_corner_landmark() {
        let cfg = SynthConfig {
            distractors_min: 0,
            distractors_max: 0,
            ..small_cfg()
        };
        let s = generate_scene(&cfg, "e", 3).unwrap();
        assert!(s.distractors.is_empty());
        assert!(s.expression.ends_with("corner of the image"), "{}", s.expression);
        let p = parse_expression(&s.expression).unwrap();
        assert!(matches!(p.anchor, Anchor::Corner(_)));
        assert_eq!(resolve(&p, &s).unwrap(), vec![0]);
    }

    #[test]
    fn ratio_range_is_bounded() {
        let cfg = SynthConfig {
            ratio_max: 0.02,
            ..SynthConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = SynthConfig {
            colors: vec!["mauve".into()],
            ..SynthConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn target_pixels_carry_its_colour() {
        let s = generate_scene(&small_cfg(), "c", 9).unwrap();
        let r = s.renderer();
        let (cx, cy) = s.gt.center();
        let px = r.rgb(cx as u32, (s.gt.y0 + 0.75 * s.gt.height()) as u32);
        assert_eq!(px, color_rgb(&s.target.color).unwrap(), "{cx} {cy}");
    }

    #[test]
    fn parser_rejects_non_template_text() {
        assert!(parse_expression("a red circle").is_err());
        assert!(parse_expression("the red blob located above the blue square").is_err());
        assert!(parse_expression("the red circle located beside the blue square").is_err());
    }

    #[test]
    fn tokenizer_maps_unknown_words_to_oov() {
        let v = Vocabulary::default();
        let ids = v.tokenize("The red zebra, located").unwrap();
        assert_eq!(v.word(ids[0]), Some("the"));
        assert_eq!(ids[2], OOV);
        assert!(v.tokenize("   ").is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            image_size: ImageSize::new(64, 64).unwrap(),
            ratio_min: 0.005,
            ratio_max: 0.01,
            distractors_max: 2,
            ..SynthConfig::default()
        };
        let samples = generate_dataset(&cfg, "d", 3).unwrap();
        let index = write_dataset(dir.path(), &samples, true).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), samples);
        assert!(dir.path().join(&samples[0].image).exists());
        let empty = dir.path().join("empty.jsonl");
        write_jsonl::<SynthSample>(&empty, &[]).unwrap();
        assert_eq!(std::fs::read(&empty).unwrap().len(), 0);
        assert!(read_dataset(&empty).unwrap().is_empty());
        let text = std::fs::read_to_string(&index).unwrap();
        let cut = &text[..text.len() - 20];
        std::fs::write(&index, cut).unwrap();
        match read_dataset(&index) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
