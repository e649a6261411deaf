//! Analytical FLOPs and parameter accounting.
//!
//! Conventions: one multiply-add is 2 FLOPs, a bias add or an elementwise
//! add/ReLU is 1 FLOP per element, a sigmoid is [`SIGMOID_FLOPS`] and a
//! softmax [`SOFTMAX_FLOPS`] per element. Data movement (resampling by
//! replication, splitting, argmax, gathering indices) is free. The live
//! [`Graph`](crate::graph::Graph) tallies the same conventions while it
//! executes, so the two can be compared exactly.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::pyramid::{level_stride, BackboneSpec, FusionSpec, Refinement};
use crate::tcc::TccConfig;

pub const SIGMOID_FLOPS: u64 = 4;
pub const SOFTMAX_FLOPS: u64 = 5;

/// `2 kh kw Cin Cout Ho Wo`, plus `Ho Wo Cout` with a bias. Zero if any
/// extent is zero.
pub fn flops_conv(cin: usize, cout: usize, kh: usize, kw: usize, hout: usize, wout: usize, bias: bool) -> u64 {
    if [cin, cout, kh, kw, hout, wout].contains(&0) {
        return 0;
    }
    let outputs = (hout * wout * cout) as u64;
    2 * (kh * kw * cin) as u64 * outputs + if bias { outputs } else { 0 }
}

pub fn params_conv(cin: usize, cout: usize, kh: usize, kw: usize, bias: bool) -> u64 {
    (kh * kw * cin * cout) as u64 + if bias { cout as u64 } else { 0 }
}

/// FLOPs of one TCC block at an `h x w` level with input width `c`,
/// reduced width `cr`, `n` global keys and `depth` stacked rounds.
pub fn flops_tcc_level(h: usize, w: usize, c: usize, cr: usize, n: usize, depth: usize) -> u64 {
    let hw = (h * w) as u64;
    let (c64, cr64, n64) = (c as u64, cr as u64, n as u64);
    let tokens = n64 + 1;
    let round = flops_conv(cr, cr, 3, 3, h, w, true)
        + flops_conv(cr, n, 1, 1, h, w, true)
        + (2 * n64 * cr64 + SIGMOID_FLOPS * n64)
        + 2 * hw * tokens * cr64
        + SOFTMAX_FLOPS * hw * tokens
        + 2 * hw * tokens * cr64
        + flops_conv(cr, cr, 1, 1, h, w, false);
    flops_conv(c, cr, 1, 1, h, w, true) + depth as u64 * round + flops_conv(cr, c, 1, 1, h, w, true) + hw * c64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        cin: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        hout: usize,
        wout: usize,
        bias: bool,
    },
    /// Elementwise op over `elements` values (add, ReLU, ...).
    Elementwise { elements: usize, flops_per_element: u64 },
    /// Replication or slicing; no arithmetic.
    Resample { elements: usize },
    /// Gather `keys` tokens of `channels` and scale each by a sigmoid gate.
    GatherGated { keys: usize, channels: usize },
    /// Scaled dot products of `positions` queries with `tokens` tokens.
    ContextLogits { positions: usize, tokens: usize, channels: usize },
    Softmax { elements: usize },
    /// Attention-weighted sum of `tokens` tokens added onto each query.
    ContextAttend { positions: usize, tokens: usize, channels: usize },
}

impl LayerKind {
    pub fn flops(&self) -> u64 {
        match *self {
            LayerKind::Conv {
                cin,
                cout,
                kh,
                kw,
                hout,
                wout,
                bias,
            } => flops_conv(cin, cout, kh, kw, hout, wout, bias),
            LayerKind::Elementwise {
                elements,
                flops_per_element,
            } => elements as u64 * flops_per_element,
            LayerKind::Resample { .. } => 0,
            LayerKind::GatherGated { keys, channels } => (2 * keys * channels) as u64 + SIGMOID_FLOPS * keys as u64,
            LayerKind::ContextLogits {
                positions,
                tokens,
                channels,
            }
            | LayerKind::ContextAttend {
                positions,
                tokens,
                channels,
            } => 2 * (positions * tokens * channels) as u64,
            LayerKind::Softmax { elements } => SOFTMAX_FLOPS * elements as u64,
        }
    }

    pub fn params(&self) -> u64 {
        match *self {
            LayerKind::Conv {
                cin, cout, kh, kw, bias, ..
            } => params_conv(cin, cout, kh, kw, bias),
            _ => 0,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::Elementwise { .. } => "eltwise",
            LayerKind::Resample { .. } => "resample",
            LayerKind::GatherGated { .. } => "gather",
            LayerKind::ContextLogits { .. } => "logits",
            LayerKind::Softmax { .. } => "softmax",
            LayerKind::ContextAttend { .. } => "attend",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerDesc {
    pub name: String,
    pub group: String,
    pub kind: LayerKind,
    pub output_shape: Vec<usize>,
}

/// Ordered, declarative description of a model's layers.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ModelDesc {
    pub layers: Vec<LayerDesc>,
}

impl ModelDesc {
    pub fn push(&mut self, name: impl Into<String>, group: &str, kind: LayerKind, output_shape: &[usize]) {
        self.layers.push(LayerDesc {
            name: name.into(),
            group: group.to_string(),
            kind,
            output_shape: output_shape.to_vec(),
        });
    }

    pub fn extend(&mut self, other: ModelDesc) {
        self.layers.extend(other.layers);
    }

    /// Serialises to one line per layer: `kind name group key=value ...`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for l in &self.layers {
            let fields = match &l.kind {
                LayerKind::Conv {
                    cin,
                    cout,
                    kh,
                    kw,
                    hout,
                    wout,
                    bias,
                } => format!("cin={cin} cout={cout} kh={kh} kw={kw} hout={hout} wout={wout} bias={bias}"),
                LayerKind::Elementwise {
                    elements,
                    flops_per_element,
                } => format!("elements={elements} flops_per_element={flops_per_element}"),
                LayerKind::Resample { elements } | LayerKind::Softmax { elements } => format!("elements={elements}"),
                LayerKind::GatherGated { keys, channels } => format!("keys={keys} channels={channels}"),
                LayerKind::ContextLogits {
                    positions,
                    tokens,
                    channels,
                }
                | LayerKind::ContextAttend {
                    positions,
                    tokens,
                    channels,
                } => format!("positions={positions} tokens={tokens} channels={channels}"),
            };
            let shape: Vec<String> = l.output_shape.iter().map(|d| d.to_string()).collect();
            out.push_str(&format!("{} {} {} {} shape={}\n", l.kind.tag(), l.name, l.group, fields, shape.join("x")));
        }
        out
    }

    /// Parses the [`ModelDesc::to_text`] format. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut desc = ModelDesc::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |detail: String| Error::invalid("model_desc", format!("line {}: {detail}", lineno + 1));
            let mut parts = line.split_whitespace();
            let (Some(tag), Some(name), Some(group)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(bad("expected `kind name group key=value...`".into()));
            };
            let mut kv = BTreeMap::new();
            for p in parts {
                let (k, v) = p.split_once('=').ok_or_else(|| bad(format!("malformed field `{p}`")))?;
                kv.insert(k, v);
            }
            let num = |k: &str| -> Result<usize> {
                kv.get(k)
                    .ok_or_else(|| bad(format!("missing `{k}`")))?
                    .parse()
                    .map_err(|_| bad(format!("`{k}` is not an integer")))
            };
            let kind = match tag {
                "conv" => LayerKind::Conv {
                    cin: num("cin")?,
                    cout: num("cout")?,
                    kh: num("kh")?,
                    kw: num("kw")?,
                    hout: num("hout")?,
                    wout: num("wout")?,
                    bias: match kv.get("bias").copied() {
                        Some("true") => true,
                        Some("false") | None => false,
                        Some(other) => return Err(bad(format!("bias must be true/false, got `{other}`"))),
                    },
                },
                "eltwise" => LayerKind::Elementwise {
                    elements: num("elements")?,
                    flops_per_element: num("flops_per_element")? as u64,
                },
                "resample" => LayerKind::Resample {
                    elements: num("elements")?,
                },
                "gather" => LayerKind::GatherGated {
                    keys: num("keys")?,
                    channels: num("channels")?,
                },
                "logits" => LayerKind::ContextLogits {
                    positions: num("positions")?,
                    tokens: num("tokens")?,
                    channels: num("channels")?,
                },
                "softmax" => LayerKind::Softmax {
                    elements: num("elements")?,
                },
                "attend" => LayerKind::ContextAttend {
                    positions: num("positions")?,
                    tokens: num("tokens")?,
                    channels: num("channels")?,
                },
                other => return Err(Error::UnknownLayerKind(other.to_string())),
            };
            let output_shape = match kv.get("shape") {
                Some(s) if !s.is_empty() => s
                    .split('x')
                    .map(|d| d.parse().map_err(|_| bad(format!("bad shape `{s}`"))))
                    .collect::<Result<_>>()?,
                _ => Vec::new(),
            };
            desc.layers.push(LayerDesc {
                name: name.to_string(),
                group: group.to_string(),
                kind,
                output_shape,
            });
        }
        Ok(desc)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub group: String,
    pub flops: u64,
    pub params: u64,
    pub output_shape: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlopsReport {
    pub layers: Vec<LayerCost>,
    pub total_flops: u64,
    pub total_params: u64,
}

impl FlopsReport {
    /// `(group, flops, params)` in first-appearance order.
    pub fn groups(&self) -> Vec<(String, u64, u64)> {
        let mut out: Vec<(String, u64, u64)> = Vec::new();
        for l in &self.layers {
            match out.iter_mut().find(|(g, _, _)| *g == l.group) {
                Some(entry) => {
                    entry.1 += l.flops;
                    entry.2 += l.params;
                }
                None => out.push((l.group.clone(), l.flops, l.params)),
            }
        }
        out
    }

    pub fn group_flops(&self, group: &str) -> u64 {
        self.layers.iter().filter(|l| l.group == group).map(|l| l.flops).sum()
    }

    /// FLOPs outside the backbone group.
    pub fn refinement_path_flops(&self) -> u64 {
        self.layers.iter().filter(|l| l.group != BACKBONE_GROUP).map(|l| l.flops).sum()
    }
}

/// Per-layer walk of a description. Totals are exact integer sums.
pub fn model_report(desc: &ModelDesc) -> FlopsReport {
    let layers: Vec<LayerCost> = desc
        .layers
        .iter()
        .map(|l| LayerCost {
            name: l.name.clone(),
            group: l.group.clone(),
            flops: l.kind.flops(),
            params: l.kind.params(),
            output_shape: l.output_shape.clone(),
        })
        .collect();
    FlopsReport {
        total_flops: layers.iter().map(|l| l.flops).sum(),
        total_params: layers.iter().map(|l| l.params).sum(),
        layers,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupDelta {
    pub group: String,
    pub base_flops: u64,
    pub variant_flops: u64,
    pub delta_flops: i128,
    /// `delta / base`, or 0 when the base group is empty.
    pub relative: f64,
    pub delta_params: i128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub groups: Vec<GroupDelta>,
    /// Delta over everything except the backbone group.
    pub refinement_delta_flops: i128,
    pub refinement_delta_params: i128,
    pub total_delta_flops: i128,
}

pub fn compare(base: &FlopsReport, variant: &FlopsReport) -> Comparison {
    let bg = base.groups();
    let vg = variant.groups();
    let mut names: Vec<String> = bg.iter().map(|g| g.0.clone()).collect();
    for g in &vg {
        if !names.contains(&g.0) {
            names.push(g.0.clone());
        }
    }
    let lookup = |gs: &[(String, u64, u64)], name: &str| gs.iter().find(|g| g.0 == name).map_or((0, 0), |g| (g.1, g.2));
    let groups: Vec<GroupDelta> = names
        .into_iter()
        .map(|name| {
            let (bf, bp) = lookup(&bg, &name);
            let (vf, vp) = lookup(&vg, &name);
            let delta = vf as i128 - bf as i128;
            GroupDelta {
                relative: if bf == 0 { 0.0 } else { delta as f64 / bf as f64 },
                group: name,
                base_flops: bf,
                variant_flops: vf,
                delta_flops: delta,
                delta_params: vp as i128 - bp as i128,
            }
        })
        .collect();
    let refinement = |f: fn(&GroupDelta) -> i128| groups.iter().filter(|g| g.group != BACKBONE_GROUP).map(f).sum();
    Comparison {
        refinement_delta_flops: refinement(|g| g.delta_flops),
        refinement_delta_params: refinement(|g| g.delta_params),
        total_delta_flops: variant.total_flops as i128 - base.total_flops as i128,
        groups,
    }
}

pub const BACKBONE_GROUP: &str = "backbone";
pub const FUSION_GROUP: &str = "fusion";

pub fn refine_group(level: usize) -> String {
    format!("refine.l{level}")
}

/// Layers of one TCC block, in execution order.
pub fn tcc_layers(prefix: &str, group: &str, h: usize, w: usize, c: usize, cr: usize, n: usize, depth: usize) -> ModelDesc {
    let mut d = ModelDesc::default();
    let hw = h * w;
    let conv = |cin, cout, k, bias| LayerKind::Conv {
        cin,
        cout,
        kh: k,
        kw: k,
        hout: h,
        wout: w,
        bias,
    };
    d.push(format!("{prefix}.reduce"), group, conv(c, cr, 1, true), &[1, cr, h, w]);
    for s in 0..depth {
        let p = format!("{prefix}.stack{s}");
        d.push(format!("{p}.local"), group, conv(cr, cr, 3, true), &[1, cr, h, w]);
        d.push(format!("{p}.score"), group, conv(cr, n, 1, true), &[1, n, h, w]);
        d.push(format!("{p}.gather"), group, LayerKind::GatherGated { keys: n, channels: cr }, &[1, n, cr]);
        let (positions, tokens, channels) = (hw, n + 1, cr);
        d.push(
            format!("{p}.logits"),
            group,
            LayerKind::ContextLogits {
                positions,
                tokens,
                channels,
            },
            &[1, hw, n + 1],
        );
        d.push(format!("{p}.softmax"), group, LayerKind::Softmax { elements: hw * (n + 1) }, &[1, hw, n + 1]);
        d.push(
            format!("{p}.attend"),
            group,
            LayerKind::ContextAttend {
                positions,
                tokens,
                channels,
            },
            &[1, cr, h, w],
        );
        d.push(format!("{p}.proj"), group, conv(cr, cr, 1, false), &[1, cr, h, w]);
    }
    d.push(format!("{prefix}.restore"), group, conv(cr, c, 1, true), &[1, c, h, w]);
    d.push(
        format!("{prefix}.residual"),
        group,
        LayerKind::Elementwise {
            elements: hw * c,
            flops_per_element: 1,
        },
        &[1, c, h, w],
    );
    d
}

/// Architecture needed to describe a pyramid without building it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PyramidArch {
    pub backbone: BackboneSpec,
    pub fusion: FusionSpec,
    pub tcc: TccConfig,
    pub image_height: usize,
    pub image_width: usize,
}

impl PyramidArch {
    pub fn with_refinement(&self, refinement: Refinement) -> Self {
        let mut a = self.clone();
        a.fusion.refinement = refinement;
        a
    }
}

/// Describes backbone, fusion and refinement of a single-image forward pass.
pub fn describe_pyramid(arch: &PyramidArch) -> Result<ModelDesc> {
    let spec = &arch.backbone;
    let levels = spec.levels();
    spec.check_input(arch.image_height, arch.image_width)?;
    if arch.fusion.refinement == Refinement::Tcc {
        arch.tcc.validate(spec.width, levels)?;
    }
    let c = spec.width;
    let half = |v: usize| v.div_ceil(2);
    let mut d = ModelDesc::default();
    let (mut h, mut w) = (half(arch.image_height), half(arch.image_width));
    let bb = BACKBONE_GROUP;
    let eltwise = |elements| LayerKind::Elementwise {
        elements,
        flops_per_element: 1,
    };
    d.push("backbone.stem", bb, conv_k(3, spec.stem_channels, 3, h, w, true), &[1, spec.stem_channels, h, w]);
    d.push("backbone.stem.relu", bb, eltwise(spec.stem_channels * h * w), &[1, spec.stem_channels, h, w]);
    let mut cin = spec.stem_channels;
    let mut dims = Vec::with_capacity(levels);
    for (i, &ch) in spec.stage_channels.iter().enumerate() {
        h = half(h);
        w = half(w);
        d.push(format!("backbone.stage{i}"), bb, conv_k(cin, ch, 3, h, w, true), &[1, ch, h, w]);
        d.push(format!("backbone.stage{i}.relu"), bb, eltwise(ch * h * w), &[1, ch, h, w]);
        d.push(format!("backbone.lateral{i}"), bb, conv_k(ch, c, 1, h, w, true), &[1, c, h, w]);
        dims.push((h, w));
        cin = ch;
    }

    let tcc = &arch.tcc;
    let use_tcc = arch.fusion.refinement == Refinement::Tcc;
    if use_tcc && tcc.placement.before_fusion {
        for (i, &(h, w)) in dims.iter().enumerate() {
            d.extend(tcc_layers(
                &format!("tcc{i}.before"),
                &refine_group(i),
                h,
                w,
                c,
                tcc.reduced_channels(i),
                tcc.n_keys,
                tcc.stack_depth,
            ));
        }
    }
    for i in (0..levels).rev() {
        let (h, w) = dims[i];
        for &j in &arch.fusion.neighbors[i] {
            let (sh, sw) = dims[j];
            if j > i {
                d.push(format!("fuse{i}.up{j}"), FUSION_GROUP, LayerKind::Resample { elements: c * h * w }, &[1, c, h, w]);
            } else if j < i {
                // block mean reads every source element once
                let kind = LayerKind::Elementwise {
                    elements: c * sh * sw,
                    flops_per_element: 1,
                };
                d.push(format!("fuse{i}.down{j}"), FUSION_GROUP, kind, &[1, c, h, w]);
            }
            d.push(format!("fuse{i}.add{j}"), FUSION_GROUP, eltwise(c * h * w), &[1, c, h, w]);
        }
    }
    for (i, &(h, w)) in dims.iter().enumerate() {
        match arch.fusion.refinement {
            Refinement::None => {}
            Refinement::Conv3x3 => d.push(format!("refine{i}"), &refine_group(i), conv_k(c, c, 3, h, w, true), &[1, c, h, w]),
            Refinement::Tcc => {
                if tcc.placement.after_fusion {
                    d.extend(tcc_layers(
                        &format!("tcc{i}.after"),
                        &refine_group(i),
                        h,
                        w,
                        c,
                        tcc.reduced_channels(i),
                        tcc.n_keys,
                        tcc.stack_depth,
                    ));
                }
            }
        }
    }
    Ok(d)
}

fn conv_k(cin: usize, cout: usize, k: usize, hout: usize, wout: usize, bias: bool) -> LayerKind {
    LayerKind::Conv {
        cin,
        cout,
        kh: k,
        kw: k,
        hout,
        wout,
        bias,
    }
}

/// Per-level extents `(H_i, W_i)` for an input of `h x w`.
pub fn level_extents(h: usize, w: usize, levels: usize) -> Vec<(usize, usize)> {
    (0..levels).map(|i| (h.div_ceil(level_stride(i)), w.div_ceil(level_stride(i)))).collect()
}

/// Refinement-only FLOPs of the three variants and the delta ratio
/// `(tcc - none) / (conv3x3 - none)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementSummary {
    pub none: FlopsReport,
    pub conv3x3: FlopsReport,
    pub tcc: FlopsReport,
    pub conv_delta: i128,
    pub tcc_delta: i128,
    pub ratio: f64,
}

pub fn refinement_summary(arch: &PyramidArch) -> Result<RefinementSummary> {
    let none = model_report(&describe_pyramid(&arch.with_refinement(Refinement::None))?);
    let conv3x3 = model_report(&describe_pyramid(&arch.with_refinement(Refinement::Conv3x3))?);
    let tcc = model_report(&describe_pyramid(&arch.with_refinement(Refinement::Tcc))?);
    let conv_delta = compare(&none, &conv3x3).refinement_delta_flops;
    let tcc_delta = compare(&none, &tcc).refinement_delta_flops;
    Ok(RefinementSummary {
        ratio: if conv_delta == 0 { f64::NAN } else { tcc_delta as f64 / conv_delta as f64 },
        none,
        conv3x3,
        tcc,
        conv_delta,
        tcc_delta,
    })
}

/// Full-scale architecture: width 256 over an 800x1216 input.
pub fn paper_scale_arch() -> PyramidArch {
    let backbone = BackboneSpec {
        width: 256,
        ..BackboneSpec::default()
    };
    PyramidArch {
        fusion: FusionSpec::fpn(backbone.levels(), Refinement::Tcc),
        backbone,
        tcc: TccConfig::default(),
        image_height: 800,
        image_width: 1216,
    }
}
