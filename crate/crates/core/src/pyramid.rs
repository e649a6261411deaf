//! Toy backbone and FPN-style fusion with a pluggable refinement.
//!
//! Level `i` has stride `4 * 2^i`. Fusion is the parameter-free sum
//! `f~_i = f_i + sum_{j in N(i)} resample_{j->i}(f_j)`, followed by the
//! selected refinement `f^_i = g_r(f~_i)`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::ConvGeom;
use crate::math;
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tcc::{self, Stage, TccConfig, TccOutput, TccParams};
use crate::tensor::Tensor;

/// Stride of level 0 in input pixels.
pub const BASE_STRIDE: usize = 4;

pub fn level_stride(level: usize) -> usize {
    BASE_STRIDE << level
}

/// Seed streams, so each component's initialisation is independent of
/// which other components exist.
pub(crate) mod streams {
    pub const BACKBONE: u64 = 1;
    pub const REFINE: u64 = 2;
    pub const TCC: u64 = 3;
    pub const HEAD: u64 = 4;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneSpec {
    /// Output channels of the stride-2 stem.
    pub stem_channels: usize,
    /// One stride-2 stage per pyramid level.
    pub stage_channels: Vec<usize>,
    /// Pyramid width `C` produced by the lateral 1x1 projections.
    pub width: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            stem_channels: 16,
            stage_channels: alloc::vec![16, 24, 32, 48],
            width: 64,
        }
    }
}

impl BackboneSpec {
    pub fn levels(&self) -> usize {
        self.stage_channels.len()
    }

    /// Input extents must be multiples of the deepest stride.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let top = level_stride(self.levels().saturating_sub(1));
        if h == 0 || w == 0 || h % top != 0 || w % top != 0 {
            return Err(Error::invalid(
                "backbone_forward",
                format!("input {h}x{w} not divisible by {top}"),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvParams {
    pub fn init(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, gain: f64, rng: &mut SeededRng) -> Self {
        let std = gain / math::sqrt((cin * k * k) as f64);
        Self {
            weight: store.add(format!("{name}.weight"), rng.normal_tensor(&[cout, cin, k, k], std)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
        }
    }

    pub fn apply(&self, g: &mut Graph, bound: &Bound, x: Var, geom: ConvGeom) -> Result<Var> {
        g.conv2d(x, bound.var(self.weight), Some(bound.var(self.bias)), geom)
    }
}

#[derive(Debug, Clone)]
pub struct BackboneParams {
    pub stem: ConvParams,
    pub stages: Vec<ConvParams>,
    pub laterals: Vec<ConvParams>,
}

impl BackboneParams {
    pub fn init(store: &mut ParamStore, spec: &BackboneSpec, seed: u64) -> Self {
        let mut rng = SeededRng::derived(seed, streams::BACKBONE);
        let relu_gain = core::f64::consts::SQRT_2;
        let stem = ConvParams::init(store, "backbone.stem", 3, spec.stem_channels, 3, relu_gain, &mut rng);
        let mut stages = Vec::new();
        let mut cin = spec.stem_channels;
        for (i, &c) in spec.stage_channels.iter().enumerate() {
            stages.push(ConvParams::init(store, &format!("backbone.stage{i}"), cin, c, 3, relu_gain, &mut rng));
            cin = c;
        }
        let laterals = spec
            .stage_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| ConvParams::init(store, &format!("backbone.lateral{i}"), c, spec.width, 1, 1.0, &mut rng))
            .collect();
        Self { stem, stages, laterals }
    }
}

/// One pyramid level's feature map.
#[derive(Debug, Clone, Copy)]
pub struct PyramidLevel {
    pub level: usize,
    pub stride: usize,
    pub features: Var,
}

/// Stem, then one stride-2 conv+ReLU stage per level, each tapped by a 1x1
/// lateral projection to the pyramid width.
pub fn backbone_forward(g: &mut Graph, bound: &Bound, params: &BackboneParams, spec: &BackboneSpec, image: Var) -> Result<Vec<PyramidLevel>> {
    let shape = g.shape(image).to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::shape("backbone_forward", format!("expected [N, 3, H, W], got {shape:?}")));
    }
    spec.check_input(shape[2], shape[3])?;
    let down = ConvGeom::new(2, 1, 1);
    let stem = params.stem.apply(g, bound, image, down)?;
    let mut x = g.relu(stem)?;
    let mut levels = Vec::with_capacity(spec.levels());
    for (i, (stage, lateral)) in params.stages.iter().zip(&params.laterals).enumerate() {
        let y = stage.apply(g, bound, x, down)?;
        x = g.relu(y)?;
        let features = lateral.apply(g, bound, x, ConvGeom::new(1, 0, 1))?;
        levels.push(PyramidLevel {
            level: i,
            stride: level_stride(i),
            features,
        });
    }
    Ok(levels)
}

/// Brings level `src` to the resolution of level `target`: nearest
/// upsampling from deeper levels, block averaging from shallower ones.
pub fn resample_to_level(g: &mut Graph, src: &PyramidLevel, target: usize) -> Result<Var> {
    use core::cmp::Ordering;
    match src.level.cmp(&target) {
        Ordering::Equal => Ok(src.features),
        Ordering::Greater => g.upsample_nearest(src.features, 1 << (src.level - target)),
        Ordering::Less => g.avgpool_down(src.features, 1 << (target - src.level)),
    }
}

/// `f_i + sum resample(f_j)`; an empty neighbour list returns `f_i` itself.
pub fn fuse_level(g: &mut Graph, f: &PyramidLevel, neighbors: &[PyramidLevel]) -> Result<Var> {
    let mut acc = f.features;
    for nb in neighbors {
        let r = resample_to_level(g, nb, f.level)?;
        if g.shape(r) != g.shape(f.features) {
            return Err(Error::shape(
                "fuse_level",
                format!(
                    "level {} resampled to {:?}, level {} is {:?}",
                    nb.level,
                    g.shape(r),
                    f.level,
                    g.shape(f.features)
                ),
            ));
        }
        acc = g.add(acc, r)?;
    }
    Ok(acc)
}

/// Baseline refinement: pad-1 3x3 convolution, shape preserving.
pub fn refine_conv3x3(g: &mut Graph, bound: &Bound, p: &ConvParams, x: Var) -> Result<Var> {
    p.apply(g, bound, x, ConvGeom::new(1, 1, 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Refinement {
    None,
    Conv3x3,
    Tcc,
}

impl Refinement {
    pub fn name(self) -> &'static str {
        match self {
            Refinement::None => "none",
            Refinement::Conv3x3 => "conv3x3",
            Refinement::Tcc => "tcc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionSpec {
    /// `N(i)` for every level.
    pub neighbors: Vec<Vec<usize>>,
    pub refinement: Refinement,
}

impl FusionSpec {
    /// Top-down FPN wiring: `N(i) = {i + 1}`, empty at the top.
    pub fn fpn(levels: usize, refinement: Refinement) -> Self {
        Self {
            neighbors: (0..levels)
                .map(|i| if i + 1 < levels { alloc::vec![i + 1] } else { Vec::new() })
                .collect(),
            refinement,
        }
    }
}

/// TCC blocks per level and stage.
#[derive(Debug, Clone)]
pub struct TccBlocks {
    pub config: TccConfig,
    pub before: Vec<TccParams>,
    pub after: Vec<TccParams>,
}

/// Backbone, fusion, and refinement parameters.
#[derive(Debug, Clone)]
pub struct PyramidModel {
    pub backbone_spec: BackboneSpec,
    pub fusion: FusionSpec,
    pub backbone: BackboneParams,
    pub refine_convs: Vec<ConvParams>,
    pub tcc: Option<TccBlocks>,
}

impl PyramidModel {
    pub fn init(store: &mut ParamStore, backbone_spec: BackboneSpec, fusion: FusionSpec, tcc_cfg: &TccConfig, seed: u64) -> Result<Self> {
        let levels = backbone_spec.levels();
        if fusion.neighbors.len() != levels {
            return Err(Error::invalid(
                "fusion_spec",
                format!("{} neighbour sets for {levels} levels", fusion.neighbors.len()),
            ));
        }
        if fusion.neighbors.iter().flatten().any(|&j| j >= levels) {
            return Err(Error::invalid("fusion_spec", "neighbour level out of range"));
        }
        let width = backbone_spec.width;
        let backbone = BackboneParams::init(store, &backbone_spec, seed);
        let mut refine_convs = Vec::new();
        let mut tcc = None;
        match fusion.refinement {
            Refinement::None => {}
            Refinement::Conv3x3 => {
                let mut rng = SeededRng::derived(seed, streams::REFINE);
                for i in 0..levels {
                    refine_convs.push(ConvParams::init(store, &format!("refine{i}"), width, width, 3, 1.0, &mut rng));
                }
            }
            Refinement::Tcc => {
                tcc_cfg.validate(width, levels)?;
                let mut rng = SeededRng::derived(seed, streams::TCC);
                let mut before = Vec::new();
                let mut after = Vec::new();
                for i in 0..levels {
                    if tcc_cfg.placement.before_fusion {
                        before.push(TccParams::init(store, &format!("tcc{i}.before"), i, width, tcc_cfg, &mut rng)?);
                    }
                    if tcc_cfg.placement.after_fusion {
                        after.push(TccParams::init(store, &format!("tcc{i}.after"), i, width, tcc_cfg, &mut rng)?);
                    }
                }
                tcc = Some(TccBlocks {
                    config: *tcc_cfg,
                    before,
                    after,
                });
            }
        }
        Ok(Self {
            backbone_spec,
            fusion,
            backbone,
            refine_convs,
            tcc,
        })
    }

    pub fn levels(&self) -> usize {
        self.backbone_spec.levels()
    }
}

/// One TCC block application recorded during a forward pass.
#[derive(Debug, Clone)]
pub struct TccApplication {
    pub level: usize,
    pub stride: usize,
    pub stage: Stage,
    pub result: TccOutput,
}

#[derive(Debug, Clone)]
pub struct PyramidOutput {
    /// Raw backbone features `f_i`.
    pub backbone: Vec<PyramidLevel>,
    /// Fusion results `f~_i`.
    pub fused: Vec<Var>,
    /// Refined outputs `f^_i`.
    pub refined: Vec<PyramidLevel>,
    pub tcc: Vec<TccApplication>,
}

/// Backbone, optional before-fusion TCC on every `f_i`, additive fusion
/// (computed from the deepest level down), then the selected refinement.
pub fn pyramid_forward(g: &mut Graph, bound: &Bound, model: &PyramidModel, image: Var) -> Result<PyramidOutput> {
    let backbone = backbone_forward(g, bound, &model.backbone, &model.backbone_spec, image)?;
    let levels = backbone.len();
    let mut tcc_apps = Vec::new();

    let mut sources = backbone.clone();
    if let Some(blocks) = &model.tcc {
        for (lvl, p) in sources.iter_mut().zip(&blocks.before) {
            let result = tcc::tcc_refine(g, bound, p, &blocks.config, lvl.features)?;
            lvl.features = result.output;
            tcc_apps.push(TccApplication {
                level: lvl.level,
                stride: lvl.stride,
                stage: Stage::BeforeFusion,
                result,
            });
        }
    }

    let mut fused = alloc::vec![None; levels];
    for i in (0..levels).rev() {
        let nbs: Vec<PyramidLevel> = model.fusion.neighbors[i].iter().map(|&j| sources[j]).collect();
        fused[i] = Some(fuse_level(g, &sources[i], &nbs)?);
    }
    let fused: Vec<Var> = fused.into_iter().map(|f| f.expect("every level fused")).collect();

    let mut refined = Vec::with_capacity(levels);
    for (i, &f) in fused.iter().enumerate() {
        let out = match model.fusion.refinement {
            Refinement::None => f,
            Refinement::Conv3x3 => refine_conv3x3(g, bound, &model.refine_convs[i], f)?,
            Refinement::Tcc => match model.tcc.as_ref().and_then(|b| b.after.get(i).map(|p| (b, p))) {
                Some((blocks, p)) => {
                    let result = tcc::tcc_refine(g, bound, p, &blocks.config, f)?;
                    let out = result.output;
                    tcc_apps.push(TccApplication {
                        level: i,
                        stride: level_stride(i),
                        stage: Stage::AfterFusion,
                        result,
                    });
                    out
                }
                None => f,
            },
        };
        refined.push(PyramidLevel {
            level: i,
            stride: level_stride(i),
            features: out,
        });
    }
    Ok(PyramidOutput {
        backbone,
        fused,
        refined,
        tcc: tcc_apps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn build(refinement: Refinement) -> (ParamStore, PyramidModel) {
        let mut store = ParamStore::new();
        let spec = BackboneSpec::default();
        let fusion = FusionSpec::fpn(spec.levels(), refinement);
        let model = PyramidModel::init(&mut store, spec, fusion, &TccConfig::default(), 3).unwrap();
        (store, model)
    }

    #[test]
    fn level_shapes_for_64px_input() {
        let (store, model) = build(Refinement::None);
        let mut g = Graph::new();
        let b = store.bind(&mut g, false).unwrap();
        let img = g.constant(SeededRng::new(1).uniform_tensor(&[1, 3, 64, 64], 0.0, 1.0)).unwrap();
        let levels = backbone_forward(&mut g, &b, &model.backbone, &model.backbone_spec, img).unwrap();
        let dims: Vec<(usize, usize, usize)> = levels.iter().map(|l| (l.stride, g.shape(l.features)[2], g.shape(l.features)[3])).collect();
        assert_eq!(dims, vec![(4, 16, 16), (8, 8, 8), (16, 4, 4), (32, 2, 2)]);
        assert!(levels.iter().all(|l| g.shape(l.features)[1] == 64));
    }

    #[test]
    fn indivisible_input_rejected() {
        let (store, model) = build(Refinement::None);
        let mut g = Graph::new();
        let b = store.bind(&mut g, false).unwrap();
        let img = g.constant(Tensor::zeros(&[1, 3, 48, 64])).unwrap();
        assert!(backbone_forward(&mut g, &b, &model.backbone, &model.backbone_spec, img).is_err());
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_features() {
        let (store, model) = build(Refinement::None);
        let mut g = Graph::new();
        let b = store.bind(&mut g, false).unwrap();
        let img = g.constant(Tensor::zeros(&[1, 3, 64, 64])).unwrap();
        let levels = backbone_forward(&mut g, &b, &model.backbone, &model.backbone_spec, img).unwrap();
        for l in levels {
            assert!(g.value(l.features).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn fpn_neighbour_sets() {
        let f = FusionSpec::fpn(4, Refinement::None);
        assert_eq!(f.neighbors, vec![vec![1], vec![2], vec![3], vec![]]);
    }

    #[test]
    fn tcc_applied_before_and_after_each_level() {
        let (store, model) = build(Refinement::Tcc);
        let mut g = Graph::new();
        let b = store.bind(&mut g, false).unwrap();
        let img = g.constant(SeededRng::new(1).uniform_tensor(&[1, 3, 64, 64], 0.0, 1.0)).unwrap();
        let out = pyramid_forward(&mut g, &b, &model, img).unwrap();
        assert_eq!(out.tcc.len(), 8);
        for lvl in 0..4 {
            let stages: Vec<Stage> = out.tcc.iter().filter(|a| a.level == lvl).map(|a| a.stage).collect();
            assert_eq!(stages, vec![Stage::BeforeFusion, Stage::AfterFusion]);
            assert_eq!(stages.len(), 2);
        }
        assert!(out.tcc.iter().all(|a| a.result.rounds.len() == 2));
    }
}
