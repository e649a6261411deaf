//! Synthetic multi-scale detection: blob scenes, per-level centre heatmaps,
//! a small detector over the pyramid, training, recall, and context traces.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{self, ConvGeom};
use crate::math;
use crate::params::{Bound, ParamStore, Sgd};
use crate::pyramid::{self, level_stride, streams, BackboneSpec, ConvParams, FusionSpec, PyramidModel, PyramidOutput, Refinement};
use crate::rng::SeededRng;
use crate::tcc::{Stage, TccConfig};
use crate::tensor::Tensor;

/// RGB colour of each object class.
pub const CLASS_COLORS: [[f64; 3]; 3] = [[0.9, 0.25, 0.2], [0.2, 0.85, 0.3], [0.25, 0.35, 0.95]];

/// Half-open size interval `[min, max)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeBand {
    pub min: f64,
    pub max: f64,
}

impl SizeBand {
    pub fn contains(&self, size: f64) -> bool {
        size >= self.min && size < self.max
    }

    fn overlaps(&self, other: &SizeBand) -> bool {
        self.min < other.max && other.min < self.max
    }
}

/// A scene-generation band and its sampling weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedBand {
    pub band: SizeBand,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Small, medium and large by default.
    pub bands: Vec<WeightedBand>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        let band = |min, max, weight| WeightedBand {
            band: SizeBand { min, max },
            weight,
        };
        Self {
            height: 64,
            width: 64,
            min_objects: 1,
            max_objects: 3,
            bands: vec![band(6.0, 20.0, 0.5), band(20.0, 28.0, 0.3), band(28.0, 40.0, 0.2)],
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_objects > self.max_objects {
            return Err(Error::invalid("scene_spec", "min_objects > max_objects"));
        }
        if self.max_objects > 0 && self.bands.is_empty() {
            return Err(Error::invalid("scene_spec", "objects requested but no size bands"));
        }
        for (i, a) in self.bands.iter().enumerate() {
            if !(a.band.min > 0.0 && a.band.min < a.band.max && a.weight > 0.0) {
                return Err(Error::invalid("scene_spec", "bands need 0 < min < max and a positive weight"));
            }
            if a.band.max > self.height.min(self.width) as f64 {
                return Err(Error::invalid("scene_spec", "band larger than the image"));
            }
            if self.bands[i + 1..].iter().any(|b| a.band.overlaps(&b.band)) {
                return Err(Error::invalid("scene_spec", "size bands overlap"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthObject {
    pub cx: f64,
    pub cy: f64,
    /// Diameter in pixels.
    pub size: f64,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    /// `[1, 3, H, W]`.
    pub image: Tensor,
    pub objects: Vec<SynthObject>,
    pub seed: u64,
}

/// Renders a scene of soft-edged class-coloured disks over a noisy,
/// gently shaded background. Deterministic in `seed`.
pub fn gen_scene(seed: u64, spec: &SceneSpec) -> Result<SynthScene> {
    spec.validate()?;
    let mut rng = SeededRng::new(seed);
    let count = rng.int_inclusive(spec.min_objects, spec.max_objects);
    let total_weight: f64 = spec.bands.iter().map(|b| b.weight).sum();
    let (h, w) = (spec.height, spec.width);
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let mut pick = rng.uniform() * total_weight;
        let mut band = spec.bands[spec.bands.len() - 1].band;
        for b in &spec.bands {
            if pick < b.weight {
                band = b.band;
                break;
            }
            pick -= b.weight;
        }
        let size = rng.uniform_range(band.min, band.max);
        let r = size / 2.0;
        objects.push(SynthObject {
            cx: rng.uniform_range(r, w as f64 - r),
            cy: rng.uniform_range(r, h as f64 - r),
            size,
            class_id: rng.int_inclusive(0, CLASS_COLORS.len() - 1),
        });
    }

    let phase = rng.uniform_range(0.0, core::f64::consts::TAU);
    let mut image = Tensor::zeros(&[1, 3, h, w]);
    let data = image.data_mut();
    for y in 0..h {
        for x in 0..w {
            let shade = 0.08 * math::sin(0.2 * x as f64 + 0.13 * y as f64 + phase);
            for c in 0..3 {
                data[(c * h + y) * w + x] = 0.3 + shade + rng.uniform_range(-0.1, 0.1);
            }
        }
    }
    for o in &objects {
        let color = CLASS_COLORS[o.class_id];
        let r = o.size / 2.0;
        let y0 = math::floor(o.cy - r - 1.0).max(0.0) as usize;
        let x0 = math::floor(o.cx - r - 1.0).max(0.0) as usize;
        let y1 = ((o.cy + r + 1.0) as usize).min(h - 1);
        let x1 = ((o.cx + r + 1.0) as usize).min(w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 + 0.5 - o.cx, y as f64 + 0.5 - o.cy);
                let alpha = (r - math::sqrt(dx * dx + dy * dy) + 0.5).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    for (c, &col) in color.iter().enumerate() {
                        let v = &mut data[(c * h + y) * w + x];
                        *v = (1.0 - alpha) * *v + alpha * col;
                    }
                }
            }
        }
    }
    Ok(SynthScene { image, objects, seed })
}

/// Maps object sizes to pyramid levels: `bands[i]` is level `i`'s band.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelBands {
    pub bands: Vec<SizeBand>,
}

impl Default for LevelBands {
    fn default() -> Self {
        let b = |min, max| SizeBand { min, max };
        Self {
            bands: vec![b(4.0, 12.0), b(12.0, 20.0), b(20.0, 28.0), b(28.0, 40.0)],
        }
    }
}

impl LevelBands {
    pub fn level_of(&self, size: f64) -> Result<usize> {
        self.bands
            .iter()
            .position(|b| b.contains(size))
            .ok_or(Error::SizeOutOfBands(size))
    }
}

/// An object's level and target cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assignment {
    pub level: usize,
    pub x: usize,
    pub y: usize,
}

/// Level from the size band, peak cell `round(centre / stride)` clamped into
/// the map.
pub fn assign_objects(scene: &SynthScene, bands: &LevelBands) -> Result<Vec<Assignment>> {
    let (h, w) = (scene.image.shape()[2], scene.image.shape()[3]);
    scene
        .objects
        .iter()
        .map(|o| {
            let level = bands.level_of(o.size)?;
            let s = level_stride(level);
            let cell = |c: f64, extent: usize| (math::round(c / s as f64) as usize).min(extent / s - 1);
            Ok(Assignment {
                level,
                x: cell(o.cx, w),
                y: cell(o.cy, h),
            })
        })
        .collect()
}

/// One `[1, 1, H_i, W_i]` map per level with a unit-peak Gaussian
/// (sigma = size / 8 pixels) at every assigned centre; overlaps take the max.
pub fn make_targets(scene: &SynthScene, bands: &LevelBands, levels: usize) -> Result<Vec<Tensor>> {
    let (h, w) = (scene.image.shape()[2], scene.image.shape()[3]);
    let mut maps: Vec<Tensor> = (0..levels)
        .map(|i| Tensor::zeros(&[1, 1, h / level_stride(i), w / level_stride(i)]))
        .collect();
    for (o, a) in scene.objects.iter().zip(assign_objects(scene, bands)?) {
        if a.level >= levels {
            return Err(Error::SizeOutOfBands(o.size));
        }
        let s = level_stride(a.level) as f64;
        let sigma = o.size / 8.0 / s;
        let denom = 2.0 * sigma * sigma;
        let map = &mut maps[a.level];
        let mw = map.shape()[3];
        for (idx, v) in map.data_mut().iter_mut().enumerate() {
            let dx = (idx % mw) as f64 - a.x as f64;
            let dy = (idx / mw) as f64 - a.y as f64;
            let g = math::exp(-(dx * dx + dy * dy) / denom);
            if g > *v {
                *v = g;
            }
        }
    }
    Ok(maps)
}

/// Shared head: 3x3 conv, ReLU, 1x1 conv to one logit channel.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub hidden: ConvParams,
    pub out: ConvParams,
}

pub const HEAD_HIDDEN: usize = 16;

impl HeadParams {
    pub fn init(store: &mut ParamStore, width: usize, seed: u64) -> Self {
        let mut rng = SeededRng::derived(seed, streams::HEAD);
        Self {
            hidden: ConvParams::init(store, "head.hidden", width, HEAD_HIDDEN, 3, core::f64::consts::SQRT_2, &mut rng),
            out: ConvParams::init(store, "head.out", HEAD_HIDDEN, 1, 1, 1.0, &mut rng),
        }
    }

    /// Per-level logits `[N, 1, H_i, W_i]`.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        let h = self.hidden.apply(g, bound, x, ConvGeom::new(1, 1, 1))?;
        let h = g.relu(h)?;
        self.out.apply(g, bound, h, ConvGeom::new(1, 0, 1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub backbone: BackboneSpec,
    pub refinement: Refinement,
    pub tcc: TccConfig,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneSpec::default(),
            refinement: Refinement::Tcc,
            tcc: TccConfig::default(),
            seed: 0,
        }
    }
}

/// Pyramid plus head, with all parameters in one store.
#[derive(Debug, Clone)]
pub struct Detector {
    pub store: ParamStore,
    pub pyramid: PyramidModel,
    pub head: HeadParams,
}

pub struct DetectorOutput {
    pub pyramid: PyramidOutput,
    pub logits: Vec<Var>,
}

impl Detector {
    pub fn new(cfg: &DetectorConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let fusion = FusionSpec::fpn(cfg.backbone.levels(), cfg.refinement);
        let pyramid = PyramidModel::init(&mut store, cfg.backbone.clone(), fusion, &cfg.tcc, cfg.seed)?;
        let head = HeadParams::init(&mut store, cfg.backbone.width, cfg.seed);
        Ok(Self { store, pyramid, head })
    }

    pub fn levels(&self) -> usize {
        self.pyramid.levels()
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, images: Var) -> Result<DetectorOutput> {
        let pyramid = pyramid::pyramid_forward(g, bound, &self.pyramid, images)?;
        let logits = pyramid
            .refined
            .iter()
            .map(|l| self.head.forward(g, bound, l.features))
            .collect::<Result<_>>()?;
        Ok(DetectorOutput { pyramid, logits })
    }

    /// Sigmoid score maps for one image, one `[1, 1, H_i, W_i]` per level.
    pub fn score_maps(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g, false)?;
        let x = g.constant(image.clone())?;
        let out = self.forward(&mut g, &bound, x)?;
        Ok(out.logits.iter().map(|&l| kernels::sigmoid(g.value(l))).collect())
    }
}

/// Per-cell BCE from logits, averaged over levels.
pub fn detection_loss(g: &mut Graph, logits: &[Var], targets: &[Tensor]) -> Result<Var> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(Error::invalid("detection_loss", "one target per level required"));
    }
    let mut total = None;
    for (&l, t) in logits.iter().zip(targets) {
        let term = g.bce_with_logits(l, t)?;
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    g.scale(total.expect("non-empty"), 1.0 / logits.len() as f64)
}

/// Scenes with their precomputed targets and assignments.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub scenes: Vec<SynthScene>,
    pub targets: Vec<Vec<Tensor>>,
    pub assignments: Vec<Vec<Assignment>>,
}

impl Dataset {
    pub fn generate(seeds: core::ops::Range<u64>, spec: &SceneSpec, bands: &LevelBands, levels: usize) -> Result<Self> {
        let scenes = seeds.map(|s| gen_scene(s, spec)).collect::<Result<Vec<_>>>()?;
        Self::from_scenes(scenes, bands, levels)
    }

    pub fn from_scenes(scenes: Vec<SynthScene>, bands: &LevelBands, levels: usize) -> Result<Self> {
        let targets = scenes.iter().map(|s| make_targets(s, bands, levels)).collect::<Result<_>>()?;
        let assignments = scenes.iter().map(|s| assign_objects(s, bands)).collect::<Result<_>>()?;
        Ok(Self {
            scenes,
            targets,
            assignments,
        })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// Stacks the given scenes along the batch axis.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<Tensor>)> {
        let images: Vec<&Tensor> = indices.iter().map(|&i| &self.scenes[i].image).collect();
        let images = kernels::concat(&images, 0)?;
        let levels = self.targets.first().map_or(0, Vec::len);
        let targets = (0..levels)
            .map(|l| {
                let parts: Vec<&Tensor> = indices.iter().map(|&i| &self.targets[i][l]).collect();
                kernels::concat(&parts, 0)
            })
            .collect::<Result<_>>()?;
        Ok((images, targets))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 4,
            learning_rate: 0.05,
            momentum: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("train_config", "batch_size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("train_config", "learning_rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("train_config", "momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Forward, loss, backward and one optimizer update. Returns the loss before
/// the update. A non-finite value anywhere aborts with an error and leaves
/// the parameters untouched.
pub fn train_step(det: &mut Detector, opt: &mut Sgd, images: &Tensor, targets: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let bound = det.store.bind(&mut g, true)?;
    let x = g.constant(images.clone())?;
    let out = det.forward(&mut g, &bound, x)?;
    let loss = detection_loss(&mut g, &out.logits, targets)?;
    let value = g.value(loss).data()[0];
    g.backward(loss)?;
    let grads = bound.grads(&g);
    for grad in &grads {
        if let Some(index) = grad.first_non_finite() {
            return Err(Error::NonFinite { op: "gradient", index });
        }
    }
    opt.step(&mut det.store, &grads);
    Ok(value)
}

/// Cycles through the dataset in order, `batch_size` scenes per step.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    opt: Sgd,
    step: usize,
}

impl Trainer {
    pub fn new(det: &Detector, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            opt: Sgd::new(&det.store, config.learning_rate, config.momentum),
            config,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn batch_indices(&self, step: usize, dataset_len: usize) -> Vec<usize> {
        (0..self.config.batch_size)
            .map(|k| (step * self.config.batch_size + k) % dataset_len)
            .collect()
    }

    pub fn step(&mut self, det: &mut Detector, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::invalid("train", "empty dataset"));
        }
        let (images, targets) = data.batch(&self.batch_indices(self.step, data.len()))?;
        let loss = train_step(det, &mut self.opt, &images, &targets)?;
        self.step += 1;
        Ok(loss)
    }

    /// Runs the remaining configured steps, returning every loss.
    pub fn run(&mut self, det: &mut Detector, data: &Dataset) -> Result<Vec<f64>> {
        let mut losses = Vec::with_capacity(self.config.steps.saturating_sub(self.step));
        while self.step < self.config.steps {
            losses.push(self.step(det, data)?);
        }
        Ok(losses)
    }
}

/// Cells strictly above `threshold` that are `>=` all 8 neighbours.
pub fn local_maxima(map: &Tensor, threshold: f64) -> Vec<(usize, usize)> {
    let s = map.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let d = map.data();
    let mut peaks = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = d[y * w + x];
            if v <= threshold {
                continue;
            }
            let mut is_peak = true;
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    if d[ny * w + nx] > v {
                        is_peak = false;
                    }
                }
            }
            if is_peak {
                peaks.push((x, y));
            }
        }
    }
    peaks
}

/// Fraction of objects with a peak within Chebyshev distance `radius` of
/// their target cell on their assigned level. `maps[scene][level]` holds
/// single-image score maps. No objects at all counts as full recall.
pub fn recall_from_maps(assignments: &[Vec<Assignment>], maps: &[Vec<Tensor>], threshold: f64, radius: usize) -> f64 {
    let mut total = 0usize;
    let mut hit = 0usize;
    for (objs, levels) in assignments.iter().zip(maps) {
        let peaks: Vec<Vec<(usize, usize)>> = levels.iter().map(|m| local_maxima(m, threshold)).collect();
        for a in objs {
            total += 1;
            if peaks[a.level].iter().any(|&(x, y)| x.abs_diff(a.x) <= radius && y.abs_diff(a.y) <= radius) {
                hit += 1;
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    }
}

pub fn eval_recall(det: &Detector, data: &Dataset, threshold: f64, radius: usize) -> Result<f64> {
    let maps = data.scenes.iter().map(|s| det.score_maps(&s.image)).collect::<Result<Vec<_>>>()?;
    Ok(recall_from_maps(&data.assignments, &maps, threshold, radius))
}

/// One attention entry of a trace; entry 0 is the local token, entry
/// `k + 1` the k-th global key.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceAttention {
    pub entry: usize,
    pub weight: f64,
    /// 1 for the largest weight.
    pub rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceKey {
    /// Cell on the level map.
    pub cell: (usize, usize),
    /// Cell centre in image pixels.
    pub pixel: (usize, usize),
    pub score: f64,
    pub gate: f64,
}

/// Condensed context and attention of one query, for one level, placement,
/// stacked round and batch item.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub level: usize,
    pub stride: usize,
    pub stage: Stage,
    pub round: usize,
    pub item: usize,
    pub query_cell: (usize, usize),
    pub query_pixel: (usize, usize),
    pub keys: Vec<TraceKey>,
    /// Sorted by descending weight, ties by entry index.
    pub attention: Vec<TraceAttention>,
}

/// The query traced on an `h x w` map: its centre cell.
pub fn trace_query_cell(h: usize, w: usize) -> (usize, usize) {
    (w / 2, h / 2)
}

/// Weights sorted descending with ranks `1..=len`.
pub fn rank_attention(weights: &[f64]) -> Vec<TraceAttention> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .enumerate()
        .map(|(r, entry)| TraceAttention {
            entry,
            weight: weights[entry],
            rank: r + 1,
        })
        .collect()
}

/// Runs `images` through the detector's pyramid and records, for the centre
/// query of every level, each TCC application's keys and attention.
pub fn export_context_trace(det: &Detector, images: &Tensor) -> Result<Vec<TraceRecord>> {
    if det.pyramid.tcc.is_none() {
        return Err(Error::NoTcc);
    }
    let mut g = Graph::new();
    let bound = det.store.bind(&mut g, false)?;
    let x = g.constant(images.clone())?;
    let out = pyramid::pyramid_forward(&mut g, &bound, &det.pyramid, x)?;
    let mut records = Vec::new();
    for app in &out.tcc {
        for (round, trace) in app.result.rounds.iter().enumerate() {
            let ctx = &trace.context;
            let shape = g.shape(ctx.local_rep);
            let (n, h, w) = (shape[0], shape[2], shape[3]);
            let (qx, qy) = trace_query_cell(h, w);
            let q = qy * w + qx;
            let weights = g.value(trace.weights);
            let tokens = weights.shape()[2];
            let gates = ctx.gates();
            let to_pixel = |(x, y): (usize, usize)| (x * app.stride + app.stride / 2, y * app.stride + app.stride / 2);
            for item in 0..n {
                let row = &weights.data()[(item * h * w + q) * tokens..][..tokens];
                let keys = ctx.key_locations[item]
                    .iter()
                    .zip(&ctx.key_scores[item])
                    .zip(&gates[item])
                    .map(|((&cell, &score), &gate)| TraceKey {
                        cell,
                        pixel: to_pixel(cell),
                        score,
                        gate,
                    })
                    .collect();
                records.push(TraceRecord {
                    level: app.level,
                    stride: app.stride,
                    stage: app.stage,
                    round,
                    item,
                    query_cell: (qx, qy),
                    query_pixel: to_pixel((qx, qy)),
                    keys,
                    attention: rank_attention(row),
                });
            }
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bits() {
        let spec = SceneSpec::default();
        assert_eq!(gen_scene(7, &spec).unwrap(), gen_scene(7, &spec).unwrap());
        assert_ne!(gen_scene(7, &spec).unwrap().image, gen_scene(8, &spec).unwrap().image);
    }

    #[test]
    fn zero_objects_is_background_only() {
        let spec = SceneSpec {
            min_objects: 0,
            max_objects: 0,
            ..SceneSpec::default()
        };
        let s = gen_scene(3, &spec).unwrap();
        assert!(s.objects.is_empty());
        assert!(s.image.data().iter().all(|&v| (0.1..=0.5).contains(&v)));
    }

    #[test]
    fn overlapping_bands_rejected() {
        let mut spec = SceneSpec::default();
        spec.bands[1].band.min = 18.0;
        assert!(gen_scene(0, &spec).is_err());
    }

    #[test]
    fn twelve_px_object_lands_on_level_zero() {
        let scene = SynthScene {
            image: Tensor::zeros(&[1, 3, 64, 64]),
            objects: vec![SynthObject {
                cx: 30.0,
                cy: 30.0,
                size: 12.0,
                class_id: 0,
            }],
            seed: 0,
        };
        let bands = LevelBands {
            bands: vec![SizeBand { min: 0.0, max: 16.0 }, SizeBand { min: 16.0, max: 64.0 }],
        };
        let maps = make_targets(&scene, &bands, 4).unwrap();
        let peaks: Vec<usize> = maps.iter().map(|m| m.data().iter().filter(|&&v| v == 1.0).count()).collect();
        assert_eq!(peaks, vec![1, 0, 0, 0]);
    }

    #[test]
    fn centre_object_peak_cell() {
        let scene = SynthScene {
            image: Tensor::zeros(&[1, 3, 64, 96]),
            objects: vec![SynthObject {
                cx: 48.0,
                cy: 32.0,
                size: 8.0,
                class_id: 1,
            }],
            seed: 0,
        };
        let a = assign_objects(&scene, &LevelBands::default()).unwrap();
        assert_eq!(a, vec![Assignment { level: 0, x: 96 / 8, y: 64 / 8 }]);
    }

    #[test]
    fn size_outside_bands_errors() {
        let scene = SynthScene {
            image: Tensor::zeros(&[1, 3, 64, 64]),
            objects: vec![SynthObject {
                cx: 30.0,
                cy: 30.0,
                size: 50.0,
                class_id: 0,
            }],
            seed: 0,
        };
        assert_eq!(make_targets(&scene, &LevelBands::default(), 4), Err(Error::SizeOutOfBands(50.0)));
    }

    #[test]
    fn recall_edge_cases() {
        let data = Dataset::generate(0..6, &SceneSpec::default(), &LevelBands::default(), 4).unwrap();
        assert_eq!(recall_from_maps(&data.assignments, &data.targets, 0.5, 0), 1.0);
        let zeros: Vec<Vec<Tensor>> = data
            .targets
            .iter()
            .map(|ts| ts.iter().map(|t| Tensor::zeros(t.shape())).collect())
            .collect();
        assert_eq!(recall_from_maps(&data.assignments, &zeros, 0.5, 1), 0.0);
        assert_eq!(recall_from_maps(&[vec![]], &[vec![]], 0.5, 1), 1.0);
    }

    #[test]
    fn ranks_sorted_descending_with_stable_ties() {
        let r = rank_attention(&[0.2, 0.4, 0.2, 0.2]);
        let entries: Vec<usize> = r.iter().map(|a| a.entry).collect();
        assert_eq!(entries, vec![1, 0, 2, 3]);
        assert_eq!(r.iter().map(|a| a.rank).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    }

    #[test]
    fn trace_requires_tcc() {
        let det = Detector::new(&DetectorConfig {
            refinement: Refinement::Conv3x3,
            ..DetectorConfig::default()
        })
        .unwrap();
        assert_eq!(export_context_trace(&det, &Tensor::zeros(&[1, 3, 64, 64])).unwrap_err(), Error::NoTcc);
    }
}
