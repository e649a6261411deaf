//! Transformer-based context condensation.
//!
//! One refinement block works in a reduced channel space `Cr(i) = 8 * 2^i`:
//!
//! 1. a 1x1 projection reduces the fused feature from `C` to `Cr` channels;
//! 2. `stack_depth` times: collect the condensed context of the current
//!    feature (a dilated-conv local token per position plus `n` global
//!    tokens gathered at the argmax of learned importance maps and gated by
//!    the sigmoid of their max score), then decode every position as a
//!    query against its `n + 1` context tokens with single-head attention
//!    and a bias-free projection `W_A`;
//! 3. a zero-initialised 1x1 projection restores `C` channels and the result
//!    is added to the block input.
//!
//! Keys and values are the same tensors and there are no positional
//! embeddings. Because the restoration projection starts at zero, a freshly
//! built block is exactly the identity.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{self, ConvGeom};
use crate::math;
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Where TCC blocks are inserted relative to the additive fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TccPlacement {
    pub before_fusion: bool,
    pub after_fusion: bool,
}

impl Default for TccPlacement {
    fn default() -> Self {
        Self {
            before_fusion: true,
            after_fusion: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    BeforeFusion,
    AfterFusion,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::BeforeFusion => "before",
            Stage::AfterFusion => "after",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TccConfig {
    /// Global key locations per block.
    pub n_keys: usize,
    /// Dilation of the 3x3 local-context convolution.
    pub dilation: usize,
    /// `Cr(i) = channel_base * 2^i`.
    pub channel_base: usize,
    /// Condense/decode rounds per block.
    pub stack_depth: usize,
    pub placement: TccPlacement,
}

impl Default for TccConfig {
    fn default() -> Self {
        Self {
            n_keys: 4,
            dilation: 2,
            channel_base: 8,
            stack_depth: 2,
            placement: TccPlacement::default(),
        }
    }
}

impl TccConfig {
    pub fn reduced_channels(&self, level: usize) -> usize {
        self.channel_base << level
    }

    /// Checks the configuration against a pyramid of `levels` levels and
    /// `width` channels.
    pub fn validate(&self, width: usize, levels: usize) -> Result<()> {
        if self.n_keys == 0 || self.stack_depth == 0 || self.dilation == 0 || self.channel_base == 0 {
            return Err(Error::invalid(
                "tcc_config",
                "n_keys, stack_depth, dilation and channel_base must be >= 1",
            ));
        }
        for level in 0..levels {
            let cr = self.reduced_channels(level);
            if cr > width {
                return Err(Error::invalid(
                    "channel_reduce",
                    format!("level {level}: reduced width {cr} exceeds pyramid width {width}"),
                ));
            }
        }
        Ok(())
    }
}

/// Parameters of one condense/decode round.
#[derive(Debug, Clone)]
pub struct StackParams {
    pub local_weight: ParamId,
    pub local_bias: ParamId,
    pub score_weight: ParamId,
    pub score_bias: ParamId,
    /// `W_A`, stored as a bias-free `[Cr, Cr, 1, 1]` kernel.
    pub projection: ParamId,
}

/// Parameters of one TCC block (reduce, stacked rounds, restore).
#[derive(Debug, Clone)]
pub struct TccParams {
    pub level: usize,
    pub width: usize,
    pub reduced: usize,
    pub reduce_weight: ParamId,
    pub reduce_bias: ParamId,
    pub stacks: Vec<StackParams>,
    pub restore_weight: ParamId,
    pub restore_bias: ParamId,
}

impl TccParams {
    /// Registers a freshly initialised block under `prefix`.
    ///
    /// `W_A` starts as the identity and the restoration projection at zero.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        level: usize,
        width: usize,
        cfg: &TccConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let cr = cfg.reduced_channels(level);
        if cr > width {
            return Err(Error::invalid(
                "channel_reduce",
                format!("reduced width {cr} exceeds input width {width}"),
            ));
        }
        let fan = |c: usize, k: usize| 1.0 / math::sqrt((c * k * k) as f64);
        let reduce_weight = store.add(format!("{prefix}.reduce.weight"), rng.normal_tensor(&[cr, width, 1, 1], fan(width, 1)));
        let reduce_bias = store.add(format!("{prefix}.reduce.bias"), Tensor::zeros(&[cr]));
        let mut stacks = Vec::with_capacity(cfg.stack_depth);
        for s in 0..cfg.stack_depth {
            let p = format!("{prefix}.stack{s}");
            stacks.push(StackParams {
                local_weight: store.add(format!("{p}.local.weight"), rng.normal_tensor(&[cr, cr, 3, 3], fan(cr, 3))),
                local_bias: store.add(format!("{p}.local.bias"), Tensor::zeros(&[cr])),
                score_weight: store.add(
                    format!("{p}.score.weight"),
                    rng.normal_tensor(&[cfg.n_keys, cr, 1, 1], fan(cr, 1)),
                ),
                score_bias: store.add(format!("{p}.score.bias"), Tensor::zeros(&[cfg.n_keys])),
                projection: store.add(format!("{p}.proj.weight"), identity_kernel(cr)),
            });
        }
        let restore_weight = store.add(format!("{prefix}.restore.weight"), Tensor::zeros(&[width, cr, 1, 1]));
        let restore_bias = store.add(format!("{prefix}.restore.bias"), Tensor::zeros(&[width]));
        Ok(Self {
            level,
            width,
            reduced: cr,
            reduce_weight,
            reduce_bias,
            stacks,
            restore_weight,
            restore_bias,
        })
    }
}

/// `[c, c, 1, 1]` kernel with ones on the channel diagonal.
pub fn identity_kernel(c: usize) -> Tensor {
    Tensor::from_fn(&[c, c, 1, 1], |i| if i / c == i % c { 1.0 } else { 0.0 })
}

/// Condensed context of one feature map.
#[derive(Debug, Clone)]
pub struct CondensedContext {
    /// Dilated-conv local representation `[N, Cr, H, W]`; the token at a
    /// position is that position's local key/value.
    pub local_rep: Var,
    /// `(x, y)` cell of every global key, per batch item.
    pub key_locations: Vec<Vec<(usize, usize)>>,
    /// Max importance score of every global key, per batch item.
    pub key_scores: Vec<Vec<f64>>,
    /// Gated global tokens `[N, n, Cr]`.
    pub global_feats: Var,
}

impl CondensedContext {
    pub fn n_keys(&self) -> usize {
        self.key_locations.first().map_or(0, Vec::len)
    }

    /// Sigmoid gate applied to each global key, per batch item.
    pub fn gates(&self) -> Vec<Vec<f64>> {
        self.key_scores
            .iter()
            .map(|row| row.iter().map(|&s| math::sigmoid(s)).collect())
            .collect()
    }
}

/// Result of [`select_key_locations`].
#[derive(Debug, Clone)]
pub struct KeySelection {
    /// Max scores `[N, n]` on the tape.
    pub scores: Var,
    /// Flat `y * W + x` index for every `(item, key)`.
    pub flat: Vec<usize>,
    pub locations: Vec<Vec<(usize, usize)>>,
    pub values: Vec<Vec<f64>>,
}

/// 1x1 projection from `C` to `Cr` channels.
pub fn channel_reduce(g: &mut Graph, bound: &Bound, p: &TccParams, x: Var) -> Result<Var> {
    let c = g.shape(x)[1];
    if c < p.reduced {
        return Err(Error::invalid(
            "channel_reduce",
            format!("reduced width {} exceeds input width {c}", p.reduced),
        ));
    }
    g.conv2d(x, bound.var(p.reduce_weight), Some(bound.var(p.reduce_bias)), ConvGeom::new(1, 0, 1))
}

/// 3x3 dilated convolution with `padding = dilation`, preserving shape.
pub fn local_context(g: &mut Graph, weight: Var, bias: Var, x: Var, dilation: usize) -> Result<Var> {
    g.conv2d(x, weight, Some(bias), ConvGeom::same(3, dilation))
}

/// 1x1 conv to `n` channels, split into `n` single-channel score maps.
pub fn importance_scores(g: &mut Graph, weight: Var, bias: Var, x: Var, n: usize) -> Result<Vec<Var>> {
    if n == 0 {
        return Err(Error::invalid("importance_scores", "n must be >= 1"));
    }
    let scores = g.conv2d(x, weight, Some(bias), ConvGeom::new(1, 0, 1))?;
    g.split_channels(scores, n)
}

/// Global max of every score map: the key location and its score.
/// Ties go to the lowest row-major index; different maps may pick the same
/// cell.
pub fn select_key_locations(g: &mut Graph, maps: &[Var]) -> Result<KeySelection> {
    if maps.is_empty() {
        return Err(Error::invalid("select_key_locations", "no score maps"));
    }
    let stacked = if maps.len() == 1 { maps[0] } else { g.concat(maps, 1)? };
    let shape = g.shape(stacked).to_vec();
    let (n, k, w) = (shape[0], shape[1], shape[3]);
    let scores = g.plane_max(stacked)?;
    let flat = g.argmax_locations(scores).expect("plane_max node").to_vec();
    let values = g.value(scores).data().chunks(k.max(1)).map(<[f64]>::to_vec).collect();
    let locations = (0..n)
        .map(|b| flat[b * k..(b + 1) * k].iter().map(|&i| (i % w, i / w)).collect())
        .collect();
    Ok(KeySelection {
        scores,
        flat,
        locations,
        values,
    })
}

/// Features at the selected cells scaled by `sigmoid(score)`: `[N, n, Cr]`.
pub fn gather_gated(g: &mut Graph, features: Var, sel: &KeySelection) -> Result<Var> {
    g.gather_gated(features, sel.scores, &sel.flat)
}

/// Builds the condensed context of `x` with one round's parameters.
pub fn collect_condensed(g: &mut Graph, bound: &Bound, sp: &StackParams, x: Var, cfg: &TccConfig) -> Result<CondensedContext> {
    let local_rep = local_context(g, bound.var(sp.local_weight), bound.var(sp.local_bias), x, cfg.dilation)?;
    let maps = importance_scores(g, bound.var(sp.score_weight), bound.var(sp.score_bias), x, cfg.n_keys)?;
    let sel = select_key_locations(g, &maps)?;
    let global_feats = gather_gated(g, x, &sel)?;
    Ok(CondensedContext {
        local_rep,
        key_locations: sel.locations,
        key_scores: sel.values,
        global_feats,
    })
}

/// `softmax(q . k_j / sqrt(d))` for one query against `keys`.
pub fn attention_weights(query: &[f64], keys: &[&[f64]]) -> Result<Vec<f64>> {
    if keys.is_empty() {
        return Err(Error::invalid("attention_weights", "no keys"));
    }
    let d = query.len();
    let scale = 1.0 / math::sqrt(d as f64);
    let logits = keys
        .iter()
        .map(|k| {
            if k.len() != d {
                return Err(Error::shape(
                    "attention_weights",
                    format!("query has {d} dims, key has {}", k.len()),
                ));
            }
            Ok(query.iter().zip(k.iter()).map(|(a, b)| a * b).sum::<f64>() * scale)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(kernels::softmax(&logits))
}

/// Decoder output and the attention it used.
#[derive(Debug, Clone, Copy)]
pub struct Decoded {
    /// `[N, Cr, H, W]`.
    pub output: Var,
    /// `[N, H*W, n + 1]`; entry 0 is the local token.
    pub weights: Var,
}

/// `W_A (q + sum_j a_j v_j)` at every query position, values equal to keys.
pub fn decode(g: &mut Graph, projection: Var, query: Var, ctx: &CondensedContext) -> Result<Decoded> {
    let c = g.shape(query)[1];
    let scale = 1.0 / math::sqrt(c as f64);
    let logits = g.context_logits(query, ctx.local_rep, ctx.global_feats, scale)?;
    let weights = g.softmax(logits)?;
    let attended = g.context_attend(query, weights, ctx.local_rep, ctx.global_feats)?;
    let output = g.conv2d(attended, projection, None, ConvGeom::new(1, 0, 1))?;
    Ok(Decoded { output, weights })
}

/// One condense/decode round as recorded on the tape.
#[derive(Debug, Clone)]
pub struct RoundTrace {
    pub context: CondensedContext,
    pub weights: Var,
}

#[derive(Debug, Clone)]
pub struct TccOutput {
    pub output: Var,
    pub rounds: Vec<RoundTrace>,
}

/// Full block: reduce, `stack_depth` condense/decode rounds, restore, and
/// the residual add. Output shape equals input shape.
pub fn tcc_refine(g: &mut Graph, bound: &Bound, p: &TccParams, cfg: &TccConfig, input: Var) -> Result<TccOutput> {
    let mut x = channel_reduce(g, bound, p, input)?;
    let mut rounds = Vec::with_capacity(p.stacks.len());
    for sp in &p.stacks {
        let context = collect_condensed(g, bound, sp, x, cfg)?;
        let dec = decode(g, bound.var(sp.projection), x, &context)?;
        rounds.push(RoundTrace {
            context,
            weights: dec.weights,
        });
        x = dec.output;
    }
    let restored = g.conv2d(x, bound.var(p.restore_weight), Some(bound.var(p.restore_bias)), ConvGeom::new(1, 0, 1))?;
    let output = g.add(input, restored)?;
    Ok(TccOutput { output, rounds })
}
