//! Synthetic flow experiments: render a frame pair with known motion and
//! optional textureless patches, decode flow from raw or aggregated cost
//! volumes by argmax, and score endpoint error.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{LocalRegion, ProjectionParams};
use crate::cost_volume::{build_cost_volume, CostVolume4D, FeatureMap};
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::lsa::{lsa_aggregate_features, LsaConfig};
use crate::parallel;
use crate::slsa::{slsa_aggregate, SlsaConfig};
use crate::tensor::{Real, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        i >= self.top && i < self.top + self.height && j >= self.left && j < self.left + self.width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    /// `±1` squares of side `period`, channel `c` scaled by `(c + 1) / C`.
    Checker { period: usize },
    /// Independent uniform values in `[-amplitude, amplitude]` per channel.
    Noise { seed: u64, amplitude: f64 },
    /// Oriented linear ramps, one orientation per channel.
    Gradient,
    /// Unit-norm Gaussian vectors per pixel: every pixel is its own best match.
    Distinct { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowSpec {
    Constant { u: f64, v: f64 },
    /// `u = u[0] + u[1]·x + u[2]·y`, likewise `v`, with `x` the column, `y` the row.
    Affine { u: [f64; 3], v: [f64; 3] },
}

impl FlowSpec {
    pub fn at(&self, y: f64, x: f64) -> (f64, f64) {
        match self {
            FlowSpec::Constant { u, v } => (*u, *v),
            FlowSpec::Affine { u, v } => (u[0] + u[1] * x + u[2] * y, v[0] + v[1] * x + v[2] * y),
        }
    }

    fn is_integer(&self) -> bool {
        matches!(self, FlowSpec::Constant { u, v } if u.fract() == 0.0 && v.fract() == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub rect: Rect,
    pub value: f64,
}

/// Scene description, loadable from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub texture: Texture,
    pub flow: FlowSpec,
    #[serde(default)]
    pub textureless_patches: Vec<Patch>,
}

impl SceneSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SceneSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Spec(format!("empty frame {}x{}", self.height, self.width)));
        }
        for p in &self.textureless_patches {
            let r = p.rect;
            if r.height == 0 || r.width == 0 || r.top + r.height > self.height || r.left + r.width > self.width {
                return Err(Error::Spec(format!("patch {r:?} is outside the {}x{} frame", self.height, self.width)));
            }
            if !p.value.is_finite() {
                return Err(Error::Spec("patch value is not finite".into()));
            }
        }
        match self.texture {
            Texture::Checker { period: 0 } => return Err(Error::Spec("checker period must be positive".into())),
            Texture::Noise { amplitude, .. } if !(amplitude.is_finite() && amplitude >= 0.0) => {
                return Err(Error::Spec(format!("invalid noise amplitude {amplitude}")))
            }
            _ => {}
        }
        for i in 0..self.height {
            for j in 0..self.width {
                let (u, v) = self.flow.at(i as f64, j as f64);
                if !(u.is_finite() && v.is_finite()) {
                    return Err(Error::Spec(format!("flow at ({i}, {j}) is not finite")));
                }
            }
        }
        Ok(())
    }

    /// Frame-1 mask of pixels inside any textureless patch.
    pub fn textureless_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.height * self.width];
        for i in 0..self.height {
            for j in 0..self.width {
                mask[i * self.width + j] = self.textureless_patches.iter().any(|p| p.rect.contains(i, j));
            }
        }
        mask
    }
}

/// Rendered frame pair with its ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub f1: FeatureMap<f32>,
    pub f2: FeatureMap<f32>,
    /// Context features: 3×3 local mean and local variance of the per-pixel
    /// channel mean of `f1`.
    pub fc: FeatureMap<f32>,
    pub gt: FlowField,
    pub textureless: Vec<bool>,
}

/// Texture sampled on a padded lattice so frame 2 can read content that was
/// outside frame 1. Patches are not part of the world.
struct World {
    pad: usize,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl World {
    fn render(spec: &SceneSpec, channels: usize, rng: &mut Rng) -> Self {
        let mut max_flow = 0.0f64;
        for &(y, x) in &[(0.0, 0.0), (0.0, spec.width as f64), (spec.height as f64, 0.0), (spec.height as f64, spec.width as f64)] {
            let (u, v) = spec.flow.at(y, x);
            max_flow = max_flow.max(u.abs()).max(v.abs());
        }
        let pad = max_flow.ceil() as usize + 1;
        let (height, width) = (spec.height + 2 * pad, spec.width + 2 * pad);
        let mut data = vec![0.0; height * width * channels];
        let mut tex_rng = match spec.texture {
            Texture::Noise { seed, .. } | Texture::Distinct { seed } => Rng::new(seed ^ rng.next_u64()),
            _ => Rng::new(rng.next_u64()),
        };
        let scale = spec.height.max(spec.width) as f64;
        for y in 0..height {
            for x in 0..width {
                let px = &mut data[(y * width + x) * channels..(y * width + x + 1) * channels];
                let (fy, fx) = (y as isize - pad as isize, x as isize - pad as isize);
                match spec.texture {
                    Texture::Checker { period } => {
                        let p = period as isize;
                        let s = if (fy.div_euclid(p) + fx.div_euclid(p)).rem_euclid(2) == 0 { 1.0 } else { -1.0 };
                        for (c, v) in px.iter_mut().enumerate() {
                            *v = s * (c + 1) as f64 / channels as f64;
                        }
                    }
                    Texture::Noise { amplitude, .. } => {
                        for v in px.iter_mut() {
                            *v = tex_rng.uniform(-amplitude, amplitude);
                        }
                    }
                    Texture::Gradient => {
                        for (c, v) in px.iter_mut().enumerate() {
                            let t = std::f64::consts::PI * c as f64 / channels as f64;
                            *v = (fx as f64 * t.cos() + fy as f64 * t.sin()) / scale;
                        }
                    }
                    Texture::Distinct { .. } => {
                        let mut norm = 0.0;
                        for v in px.iter_mut() {
                            *v = tex_rng.normal();
                            norm += *v * *v;
                        }
                        let norm = norm.sqrt().max(1e-12);
                        px.iter_mut().for_each(|v| *v /= norm);
                    }
                }
            }
        }
        Self {
            pad,
            height,
            width,
            channels,
            data,
        }
    }

    fn at(&self, y: isize, x: isize) -> &[f64] {
        let y = (y + self.pad as isize).clamp(0, self.height as isize - 1) as usize;
        let x = (x + self.pad as isize).clamp(0, self.width as isize - 1) as usize;
        &self.data[(y * self.width + x) * self.channels..(y * self.width + x + 1) * self.channels]
    }

    fn sample(&self, y: f64, x: f64, out: &mut [f32]) {
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let (a, b, c, d) = (self.at(y0, x0), self.at(y0, x0 + 1), self.at(y0 + 1, x0), self.at(y0 + 1, x0 + 1));
        for ch in 0..self.channels {
            let top = (1.0 - fx) * a[ch] + fx * b[ch];
            let bot = (1.0 - fx) * c[ch] + fx * d[ch];
            out[ch] = ((1.0 - fy) * top + fy * bot) as f32;
        }
    }
}

pub const CONTEXT_CHANNELS: usize = 2;

/// 3×3 (clipped) local mean and variance of the per-pixel channel mean.
pub fn context_features(f1: &FeatureMap<f32>) -> Result<FeatureMap<f32>> {
    let (h, w) = (f1.height(), f1.width());
    let intensity: Vec<f64> = (0..h * w)
        .map(|p| {
            let px = f1.pixel(p / w, p % w);
            px.iter().map(|&v| v as f64).sum::<f64>() / px.len() as f64
        })
        .collect();
    FeatureMap::from_fn(h, w, CONTEXT_CHANNELS, |i, j, out| {
        let (mut s, mut s2, mut n) = (0.0, 0.0, 0.0);
        for y in i.saturating_sub(1)..(i + 2).min(h) {
            for x in j.saturating_sub(1)..(j + 2).min(w) {
                let g = intensity[y * w + x];
                s += g;
                s2 += g * g;
                n += 1.0;
            }
        }
        let mean = s / n;
        out[0] = mean as f32;
        out[1] = (s2 / n - mean * mean).max(0.0) as f32;
    })
}

/// Renders `f1` from the texture, warps it backward by the flow to get `f2`
/// (`f2(x) = f1(x - flow(x))`), then paints every patch into both frames at
/// the same place. Ground truth still follows the flow everywhere and is
/// invalid where the match leaves frame 2.
pub fn synthesize_pair(spec: &SceneSpec, feature_channels: usize, rng: &mut Rng) -> Result<SyntheticPair> {
    spec.validate()?;
    if feature_channels == 0 {
        return Err(Error::Spec("feature_channels must be positive".into()));
    }
    let (h, w, c) = (spec.height, spec.width, feature_channels);
    let world = World::render(spec, c, rng);
    let patch_at = |i: usize, j: usize| spec.textureless_patches.iter().rev().find(|p| p.rect.contains(i, j));
    let f1 = FeatureMap::from_fn(h, w, c, |i, j, px| {
        if let Some(p) = patch_at(i, j) {
            px.fill(p.value as f32);
            return;
        }
        for (o, &v) in px.iter_mut().zip(world.at(i as isize, j as isize)) {
            *o = v as f32;
        }
    })?;
    let exact = spec.flow.is_integer();
    let f2 = FeatureMap::from_fn(h, w, c, |i, j, px| {
        if let Some(p) = patch_at(i, j) {
            px.fill(p.value as f32);
            return;
        }
        let (u, v) = spec.flow.at(i as f64, j as f64);
        if exact {
            let src = world.at(i as isize - v as isize, j as isize - u as isize);
            for (o, &s) in px.iter_mut().zip(src) {
                *o = s as f32;
            }
        } else {
            world.sample(i as f64 - v, j as f64 - u, px);
        }
    })?;
    let mut gt = FlowField::from_fn(h, w, |i, j| {
        let (u, v) = spec.flow.at(i as f64, j as f64);
        (u as f32, v as f32)
    })?;
    for i in 0..h {
        for j in 0..w {
            let (u, v) = spec.flow.at(i as f64, j as f64);
            let (y, x) = (i as f64 + v, j as f64 + u);
            gt.set_valid(i, j, y >= 0.0 && x >= 0.0 && y <= (h - 1) as f64 && x <= (w - 1) as f64);
        }
    }
    let fc = context_features(&f1)?;
    Ok(SyntheticPair {
        f1,
        f2,
        fc,
        gt,
        textureless: spec.textureless_mask(),
    })
}

/// Displacement maximizing each cost map. Exact ties go to the smaller
/// displacement, then to the earlier position in row-major order.
pub fn argmax_flow<T: Real>(cv: &CostVolume4D<T>) -> Result<FlowField> {
    let [h1, w1, h2, w2] = cv.dims();
    if (h1, w1) != (h2, w2) {
        return Err(Error::shape(format!("argmax needs matching frames, got {:?}", cv.dims())));
    }
    let best = parallel::map_range(h1 * w1, |p| {
        let (i, j) = (p / w1, p % w1);
        let map = cv.cost_map(i, j);
        let mut arg = (0usize, 0usize);
        let mut best = map.get(0, 0);
        let dist = |m: usize, n: usize| {
            let dm = m as isize - i as isize;
            let dn = n as isize - j as isize;
            dm * dm + dn * dn
        };
        let mut best_d = dist(0, 0);
        for m in 0..h2 {
            for n in 0..w2 {
                let v = map.get(m, n);
                let d = dist(m, n);
                if v > best || (v == best && d < best_d) {
                    best = v;
                    best_d = d;
                    arg = (m, n);
                }
            }
        }
        ((arg.1 as f32 - j as f32), (arg.0 as f32 - i as f32))
    });
    FlowField::from_fn(h1, w1, |i, j| best[i * w1 + j])
}

/// S40+ threshold scaled from a 436-pixel-high frame to the given size.
pub fn scaled_speed_threshold(height: usize, width: usize) -> f64 {
    40.0 * height.min(width) as f64 / 436.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Mean endpoint error over valid pixels.
    pub epe: f64,
    /// Mean endpoint error where ground-truth speed exceeds the threshold.
    pub s40plus: Option<f64>,
    pub epe_textured: Option<f64>,
    pub epe_textureless: Option<f64>,
    pub speed_threshold: f64,
    pub valid_pixels: usize,
}

/// Endpoint error of `pred` against `gt` over pixels valid in both. `regions`
/// optionally marks textureless pixels for the textured/textureless split.
pub fn endpoint_error(pred: &FlowField, gt: &FlowField, speed_threshold: Option<f64>, regions: Option<&[bool]>) -> Result<EvalReport> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    if let Some(r) = regions {
        if r.len() != gt.height() * gt.width() {
            return Err(Error::shape("region mask does not match the flow grid".to_string()));
        }
    }
    let threshold = speed_threshold.unwrap_or(40.0);
    #[derive(Default)]
    struct Acc {
        sum: f64,
        n: usize,
    }
    impl Acc {
        fn add(&mut self, e: f64) {
            self.sum += e;
            self.n += 1;
        }
        fn mean(&self) -> Option<f64> {
            (self.n > 0).then(|| self.sum / self.n as f64)
        }
    }
    let (mut all, mut fast, mut textured, mut flat) = (Acc::default(), Acc::default(), Acc::default(), Acc::default());
    for i in 0..gt.height() {
        for j in 0..gt.width() {
            if !(gt.is_valid(i, j) && pred.is_valid(i, j)) {
                continue;
            }
            let (pu, pv) = pred.get(i, j);
            let (gu, gv) = gt.get(i, j);
            let e = (pu as f64 - gu as f64).hypot(pv as f64 - gv as f64);
            all.add(e);
            if (gu as f64).hypot(gv as f64) > threshold {
                fast.add(e);
            }
            if let Some(r) = regions {
                if r[i * gt.width() + j] {
                    flat.add(e);
                } else {
                    textured.add(e);
                }
            }
        }
    }
    let epe = all
        .mean()
        .ok_or_else(|| Error::Contract("no valid pixels to evaluate".into()))?;
    Ok(EvalReport {
        epe,
        s40plus: fast.mean(),
        epe_textured: regions.and(textured.mean()),
        epe_textureless: regions.and(flat.mean()),
        speed_threshold: threshold,
        valid_pixels: all.n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pipeline {
    Raw,
    Lsa,
    Slsa,
    LsaSlsa,
}

impl Pipeline {
    pub const ALL: [Pipeline; 4] = [Pipeline::Raw, Pipeline::Lsa, Pipeline::Slsa, Pipeline::LsaSlsa];
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pipeline::Raw => "raw",
            Pipeline::Lsa => "lsa",
            Pipeline::Slsa => "slsa",
            Pipeline::LsaSlsa => "lsa+slsa",
        })
    }
}

impl FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "raw" => Ok(Pipeline::Raw),
            "lsa" => Ok(Pipeline::Lsa),
            "slsa" => Ok(Pipeline::Slsa),
            "lsa+slsa" | "both" => Ok(Pipeline::LsaSlsa),
            other => Err(Error::Spec(format!("unknown pipeline {other:?}"))),
        }
    }
}

/// Operator configuration shared by every run of an experiment.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub lsa: LsaConfig<f32>,
    pub slsa: SlsaConfig<f32>,
    pub feature_channels: usize,
    /// `None` scales the S40+ threshold with the frame size.
    pub speed_threshold: Option<f64>,
}

impl ExperimentConfig {
    /// `θ = φ = ρ = I` and `α = 1` for both blocks, so weights follow raw
    /// context similarity.
    pub fn designed(k: usize, feature_channels: usize) -> Result<Self> {
        let region = LocalRegion::new(k)?;
        let params = ProjectionParams::identity(feature_channels, CONTEXT_CHANNELS);
        Ok(Self {
            lsa: LsaConfig::new(region, params.clone()),
            slsa: SlsaConfig::new(region, params),
            feature_channels,
            speed_threshold: None,
        })
    }

    pub fn window(&self) -> usize {
        self.lsa.region.size()
    }
}

/// Cost volume a pipeline hands to the decoder.
pub fn pipeline_volume(pair: &SyntheticPair, pipeline: Pipeline, cfg: &ExperimentConfig) -> Result<CostVolume4D<f32>> {
    match pipeline {
        Pipeline::Raw => build_cost_volume(&pair.f1, &pair.f2, None),
        Pipeline::Lsa => build_cost_volume(&pair.f1, &lsa_aggregate_features(&pair.f2, &pair.fc, &cfg.lsa)?, None),
        Pipeline::Slsa => slsa_aggregate(&pair.f1, &pair.f2, &pair.fc, &cfg.slsa),
        Pipeline::LsaSlsa => {
            let f2a = lsa_aggregate_features(&pair.f2, &pair.fc, &cfg.lsa)?;
            slsa_aggregate(&pair.f1, &f2a, &pair.fc, &cfg.slsa)
        }
    }
}

/// One CSV row: `pipeline,seed,H,W,k,epe,s40plus,epe_textured,epe_textureless`.
#[derive(Debug, Clone)]
pub struct ExperimentRow {
    pub pipeline: Pipeline,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub report: EvalReport,
    pub prediction: FlowField,
}

pub const EXPERIMENT_CSV_HEADER: &str = "pipeline,seed,H,W,k,epe,s40plus,epe_textured,epe_textureless";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ExperimentRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.pipeline,
            self.seed,
            self.height,
            self.width,
            self.k,
            self.report.epe,
            opt(self.report.s40plus),
            opt(self.report.epe_textured),
            opt(self.report.epe_textureless)
        )
    }
}

/// Header plus rows, LF line endings.
pub fn experiment_csv(rows: &[ExperimentRow]) -> String {
    let mut out = String::from(EXPERIMENT_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

fn evaluate(pair: &SyntheticPair, spec: &SceneSpec, pipeline: Pipeline, cfg: &ExperimentConfig, seed: u64) -> Result<ExperimentRow> {
    let cv = pipeline_volume(pair, pipeline, cfg)?;
    let prediction = argmax_flow(&cv)?;
    let threshold = cfg
        .speed_threshold
        .unwrap_or_else(|| scaled_speed_threshold(spec.height, spec.width));
    let regions = (!spec.textureless_patches.is_empty()).then_some(pair.textureless.as_slice());
    let report = endpoint_error(&prediction, &pair.gt, Some(threshold), regions)?;
    Ok(ExperimentRow {
        pipeline,
        seed,
        height: spec.height,
        width: spec.width,
        k: cfg.window(),
        report,
        prediction,
    })
}

/// Renders the scene for `seed` and scores one pipeline.
pub fn run_experiment(spec: &SceneSpec, pipeline: Pipeline, cfg: &ExperimentConfig, seed: u64) -> Result<ExperimentRow> {
    let pair = synthesize_pair(spec, cfg.feature_channels, &mut Rng::new(seed))?;
    evaluate(&pair, spec, pipeline, cfg, seed)
}

/// Runs every pipeline on seeds `0..seeds`, in parallel over seeds. Rows are
/// ordered pipeline-major, then by seed.
pub fn run_experiments(spec: &SceneSpec, pipelines: &[Pipeline], cfg: &ExperimentConfig, seeds: u64) -> Result<Vec<ExperimentRow>> {
    spec.validate()?;
    let per_seed = parallel::map_range(seeds as usize, |s| -> Result<Vec<ExperimentRow>> {
        let seed = s as u64;
        let pair = synthesize_pair(spec, cfg.feature_channels, &mut Rng::new(seed))?;
        pipelines.iter().map(|&p| evaluate(&pair, spec, p, cfg, seed)).collect()
    });
    let per_seed: Vec<Vec<ExperimentRow>> = per_seed.into_iter().collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(pipelines.len() * per_seed.len());
    for p in 0..pipelines.len() {
        for seed_rows in &per_seed {
            rows.push(seed_rows[p].clone());
        }
    }
    Ok(rows)
}
