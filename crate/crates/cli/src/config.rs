//! Run configuration, read from TOML. Unknown keys are rejected and every
//! field has a default, so an empty file is a valid configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use tcc_core::flops::PyramidArch;
use tcc_core::pyramid::{BackboneSpec, FusionSpec, Refinement};
use tcc_core::synth::{DetectorConfig, LevelBands, SceneSpec, TrainConfig};
use tcc_core::tcc::{TccConfig, TccPlacement};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub backbone: BackboneSection,
    pub fusion: FusionSection,
    pub tcc: TccSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub flops: FlopsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            backbone: BackboneSection::default(),
            fusion: FusionSection::default(),
            tcc: TccSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            flops: FlopsSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub width: usize,
}

impl Default for BackboneSection {
    fn default() -> Self {
        let b = BackboneSpec::default();
        Self {
            stem_channels: b.stem_channels,
            stage_channels: b.stage_channels,
            width: b.width,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefinementKind {
    None,
    Conv3x3,
    Tcc,
}

impl From<RefinementKind> for Refinement {
    fn from(r: RefinementKind) -> Self {
        match r {
            RefinementKind::None => Refinement::None,
            RefinementKind::Conv3x3 => Refinement::Conv3x3,
            RefinementKind::Tcc => Refinement::Tcc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub refinement: RefinementKind,
}

impl Default for FusionSection {
    fn default() -> Self {
        Self {
            refinement: RefinementKind::Tcc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TccSection {
    pub n_keys: usize,
    pub dilation: usize,
    pub channel_base: usize,
    pub stack_depth: usize,
    pub before_fusion: bool,
    pub after_fusion: bool,
}

impl Default for TccSection {
    fn default() -> Self {
        let t = TccConfig::default();
        Self {
            n_keys: t.n_keys,
            dilation: t.dilation,
            channel_base: t.channel_base,
            stack_depth: t.stack_depth,
            before_fusion: t.placement.before_fusion,
            after_fusion: t.placement.after_fusion,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Steps between metric rows.
    pub eval_interval: usize,
    /// Benchmark scenes are generated from seeds `0..scenes`.
    pub scenes: u64,
    pub image_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            eval_interval: 100,
            scenes: 32,
            image_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub score_threshold: f64,
    pub radius_cells: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            score_threshold: 0.3,
            radius_cells: 1,
        }
    }
}

/// Architecture scale for the analytical FLOPs report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlopsSection {
    pub width: usize,
    pub image_height: usize,
    pub image_width: usize,
}

impl Default for FlopsSection {
    fn default() -> Self {
        Self {
            width: 256,
            image_height: 800,
            image_width: 1216,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| anyhow::anyhow!("invalid config: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let t = &self.train;
        if t.eval_interval == 0 {
            bail!("train.eval_interval: must be positive");
        }
        if t.scenes == 0 {
            bail!("train.scenes: must be positive");
        }
        if t.batch_size == 0 {
            bail!("train.batch_size: must be positive");
        }
        if !(t.learning_rate.is_finite() && t.learning_rate >= 0.0) {
            bail!("train.learning_rate: must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&t.momentum) {
            bail!("train.momentum: must lie in [0, 1)");
        }
        if self.backbone.stage_channels.is_empty() {
            bail!("backbone.stage_channels: at least one level required");
        }
        if !(0.0..1.0).contains(&self.eval.score_threshold) {
            bail!("eval.score_threshold: must lie in [0, 1)");
        }
        self.backbone_spec()
            .check_input(t.image_size, t.image_size)
            .map_err(|e| anyhow::anyhow!("train.image_size: {e}"))?;
        self.scene_spec().validate().map_err(|e| anyhow::anyhow!("train.image_size: {e}"))?;
        if self.fusion.refinement == RefinementKind::Tcc {
            self.tcc_config()
                .validate(self.backbone.width, self.backbone.stage_channels.len())
                .map_err(|e| anyhow::anyhow!("tcc: {e}"))?;
        }
        Ok(())
    }

    pub fn backbone_spec(&self) -> BackboneSpec {
        BackboneSpec {
            stem_channels: self.backbone.stem_channels,
            stage_channels: self.backbone.stage_channels.clone(),
            width: self.backbone.width,
        }
    }

    pub fn tcc_config(&self) -> TccConfig {
        let t = &self.tcc;
        TccConfig {
            n_keys: t.n_keys,
            dilation: t.dilation,
            channel_base: t.channel_base,
            stack_depth: t.stack_depth,
            placement: TccPlacement {
                before_fusion: t.before_fusion,
                after_fusion: t.after_fusion,
            },
        }
    }

    pub fn detector_config(&self) -> DetectorConfig {
        DetectorConfig {
            backbone: self.backbone_spec(),
            refinement: self.fusion.refinement.into(),
            tcc: self.tcc_config(),
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train.steps,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            momentum: self.train.momentum,
        }
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            height: self.train.image_size,
            width: self.train.image_size,
            ..SceneSpec::default()
        }
    }

    pub fn level_bands(&self) -> LevelBands {
        LevelBands::default()
    }

    /// Architecture for the FLOPs report: the configured backbone and TCC at
    /// the `[flops]` width and input size.
    pub fn flops_arch(&self) -> PyramidArch {
        let backbone = BackboneSpec {
            width: self.flops.width,
            ..self.backbone_spec()
        };
        PyramidArch {
            fusion: FusionSpec::fpn(backbone.levels(), Refinement::Tcc),
            backbone,
            tcc: self.tcc_config(),
            image_height: self.flops.image_height,
            image_width: self.flops.image_width,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_method_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let t = cfg.tcc_config();
        assert_eq!((t.n_keys, t.dilation, t.channel_base, t.stack_depth), (4, 2, 8, 2));
        assert!(t.placement.before_fusion && t.placement.after_fusion);
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let err = RunConfig::parse("[tcc]\nn_keys = 4\nheads = 8\n").unwrap_err().to_string();
        assert!(err.contains("heads"), "{err}");
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn field_level_validation() {
        let err = RunConfig::parse("[train]\neval_interval = 0\n").unwrap_err().to_string();
        assert!(err.contains("train.eval_interval"), "{err}");
        let err = RunConfig::parse("[backbone]\nwidth = 32\n").unwrap_err().to_string();
        assert!(err.starts_with("tcc:"), "{err}");
    }

    #[test]
    fn toml_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.fusion.refinement = RefinementKind::Conv3x3;
        cfg.train.steps = 7;
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }
}
