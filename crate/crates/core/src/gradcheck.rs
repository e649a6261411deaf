//! Central finite-difference check of tape gradients.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::ConvGeom;
use crate::math;
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::tcc::{self, TccConfig, TccParams};
use crate::tensor::Tensor;

/// Floor on the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

/// Compares the tape gradient of `build(input)` with central differences
/// `(f(x + eps) - f(x - eps)) / 2 eps`, coordinate by coordinate.
///
/// `build` records a scalar function of its second argument on the given
/// graph and must be deterministic. Returns the maximum over coordinates of
/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check<F>(input: &Tensor, eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.param(input.clone())?;
    let loss = build(&mut g, x)?;
    g.backward(loss)?;
    let analytic = match g.grad(x) {
        Some(t) => t.clone(),
        None => Tensor::zeros(input.shape()),
    };

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(t)?;
        let y = build(&mut g, x)?;
        g.value(y)
            .item()
            .ok_or_else(|| Error::NonScalarLoss(g.value(y).shape().into()))
    };

    let mut worst = 0.0f64;
    let mut probe = input.clone();
    for i in 0..input.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(probe.clone())?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(probe.clone())?;
        probe.data_mut()[i] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Maximum relative error of one operand over several random shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub name: String,
    /// Shape of the checked operand in each trial.
    pub shapes: Vec<Vec<usize>>,
    pub max_rel_error: f64,
}

/// Default step for [`standard_suite`].
pub const SUITE_EPS: f64 = 1e-5;
/// Trials per row of [`standard_suite`].
pub const SUITE_TRIALS: usize = 3;

/// `sum(y * r)` with a fixed, shape-derived `r`, so that every output element
/// carries a distinct weight.
pub fn weighted_sum(g: &mut Graph, y: Var) -> Result<Var> {
    let r = Tensor::from_fn(g.shape(y), |i| math::cos(1.37 * i as f64 + 0.4));
    let r = g.constant(r)?;
    let m = g.mul(y, r)?;
    g.sum(m)
}

type Build = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;

/// One trial: the operand to perturb and the scalar function of it.
struct Trial {
    input: Tensor,
    build: Build,
}

fn constant(g: &mut Graph, t: &Tensor) -> Result<Var> {
    g.constant(t.clone())
}

fn dims(rng: &mut SeededRng, rank: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.int_inclusive(lo, hi)).collect()
}

fn random_tensor(rng: &mut SeededRng, rank: usize, lo: usize, hi: usize, std: f64) -> Tensor {
    let shape = dims(rng, rank, lo, hi);
    rng.normal_tensor(&shape, std)
}

/// Finite-difference checks of every differentiable graph operation (each
/// operand separately) and of a full TCC block, `SUITE_TRIALS` random shapes
/// per row.
pub fn standard_suite(seed: u64) -> Result<Vec<GradcheckRow>> {
    let mut rng = SeededRng::new(seed);
    let mut rows = Vec::new();
    let names: &[&str] = &[
        "conv2d.input",
        "conv2d.weight",
        "conv2d.bias",
        "upsample_nearest",
        "avgpool_down",
        "add.lhs",
        "add.rhs",
        "sub.lhs",
        "sub.rhs",
        "mul.lhs",
        "mul.rhs",
        "scale",
        "relu",
        "sigmoid",
        "matmul.lhs",
        "matmul.rhs",
        "softmax",
        "concat",
        "narrow",
        "split_channels",
        "reshape",
        "plane_max",
        "gather_gated.features",
        "gather_gated.scores",
        "context_logits.query",
        "context_logits.local",
        "context_logits.global",
        "context_attend.query",
        "context_attend.weights",
        "context_attend.local",
        "context_attend.global",
        "sum",
        "mean",
        "bce_with_logits",
        "tcc_refine.input",
        "tcc_refine.reduce",
        "tcc_refine.local",
        "tcc_refine.score",
        "tcc_refine.projection",
        "tcc_refine.restore",
    ];
    for &name in names {
        let mut shapes = Vec::with_capacity(SUITE_TRIALS);
        let mut worst = 0.0f64;
        for _ in 0..SUITE_TRIALS {
            let trial = make_trial(name, &mut rng)?;
            shapes.push(trial.input.shape().to_vec());
            let build = trial.build;
            worst = worst.max(finite_diff_check(&trial.input, SUITE_EPS, |g, x| {
                let y = build(g, x)?;
                if g.value(y).numel() == 1 {
                    Ok(y)
                } else {
                    weighted_sum(g, y)
                }
            })?);
        }
        rows.push(GradcheckRow {
            name: name.into(),
            shapes,
            max_rel_error: worst,
        });
    }
    Ok(rows)
}

fn make_trial(name: &str, rng: &mut SeededRng) -> Result<Trial> {
    let op = name.split('.').next().unwrap_or(name);
    let operand = name.split('.').nth(1).unwrap_or("");
    let trial = match op {
        "conv2d" => {
            let (n, cin, cout, k) = (rng.int_inclusive(1, 2), rng.int_inclusive(1, 3), rng.int_inclusive(1, 3), rng.int_inclusive(1, 3));
            let geom = ConvGeom::new(rng.int_inclusive(1, 2), rng.int_inclusive(0, 2), rng.int_inclusive(1, 2));
            let span = geom.dilation * (k - 1) + 1;
            let (h, w) = (rng.int_inclusive(span, span + 4), rng.int_inclusive(span, span + 4));
            let x = rng.normal_tensor(&[n, cin, h, w], 1.0);
            let wt = rng.normal_tensor(&[cout, cin, k, k], 0.5);
            let b = rng.normal_tensor(&[cout], 0.5);
            match operand {
                "input" => Trial {
                    input: x,
                    build: Box::new(move |g, x| {
                        let (wv, bv) = (constant(g, &wt)?, constant(g, &b)?);
                        g.conv2d(x, wv, Some(bv), geom)
                    }),
                },
                "weight" => Trial {
                    input: wt,
                    build: Box::new(move |g, wv| {
                        let (xv, bv) = (constant(g, &x)?, constant(g, &b)?);
                        g.conv2d(xv, wv, Some(bv), geom)
                    }),
                },
                _ => Trial {
                    input: b,
                    build: Box::new(move |g, bv| {
                        let (xv, wv) = (constant(g, &x)?, constant(g, &wt)?);
                        g.conv2d(xv, wv, Some(bv), geom)
                    }),
                },
            }
        }
        "upsample_nearest" => {
            let f = rng.int_inclusive(2, 3);
            Trial {
                input: random_tensor(rng, 4, 1, 3, 1.0),
                build: Box::new(move |g, x| g.upsample_nearest(x, f)),
            }
        }
        "avgpool_down" => {
            let f = rng.int_inclusive(2, 3);
            let (n, c) = (rng.int_inclusive(1, 2), rng.int_inclusive(1, 3));
            let (h, w) = (f * rng.int_inclusive(1, 3), f * rng.int_inclusive(1, 3));
            Trial {
                input: rng.normal_tensor(&[n, c, h, w], 1.0),
                build: Box::new(move |g, x| g.avgpool_down(x, f)),
            }
        }
        "add" | "sub" | "mul" => {
            let rank = rng.int_inclusive(1, 4);
            let shape = dims(rng, rank, 1, 4);
            let other = rng.normal_tensor(&shape, 1.0);
            let input = rng.normal_tensor(&shape, 1.0);
            let lhs = operand == "lhs";
            let op = String::from(op);
            Trial {
                input,
                build: Box::new(move |g, x| {
                    let o = constant(g, &other)?;
                    let (a, b) = if lhs { (x, o) } else { (o, x) };
                    match op.as_str() {
                        "add" => g.add(a, b),
                        "sub" => g.sub(a, b),
                        _ => g.mul(a, b),
                    }
                }),
            }
        }
        "scale" => {
            let f = rng.uniform_range(-2.0, 2.0);
            Trial {
                input: random_tensor(rng, 3, 1, 4, 1.0),
                build: Box::new(move |g, x| g.scale(x, f)),
            }
        }
        "relu" => Trial {
            input: random_tensor(rng, 4, 1, 4, 1.0),
            build: Box::new(|g, x| g.relu(x)),
        },
        "sigmoid" => Trial {
            input: random_tensor(rng, 2, 1, 5, 2.0),
            build: Box::new(|g, x| g.sigmoid(x)),
        },
        "matmul" => {
            let (m, k, n) = (rng.int_inclusive(1, 5), rng.int_inclusive(1, 5), rng.int_inclusive(1, 5));
            let a = rng.normal_tensor(&[m, k], 1.0);
            let b = rng.normal_tensor(&[k, n], 1.0);
            if operand == "lhs" {
                Trial {
                    input: a,
                    build: Box::new(move |g, a| {
                        let b = constant(g, &b)?;
                        g.matmul(a, b)
                    }),
                }
            } else {
                Trial {
                    input: b,
                    build: Box::new(move |g, b| {
                        let a = constant(g, &a)?;
                        g.matmul(a, b)
                    }),
                }
            }
        }
        "softmax" => Trial {
            input: random_tensor(rng, 3, 1, 5, 1.5),
            build: Box::new(|g, x| g.softmax(x)),
        },
        "concat" => {
            let rank = rng.int_inclusive(1, 4);
            let axis = rng.int_inclusive(0, rank - 1);
            let shape = dims(rng, rank, 1, 3);
            let mut other_shape = shape.clone();
            other_shape[axis] = rng.int_inclusive(1, 3);
            let other = rng.normal_tensor(&other_shape, 1.0);
            Trial {
                input: rng.normal_tensor(&shape, 1.0),
                build: Box::new(move |g, x| {
                    let o = constant(g, &other)?;
                    g.concat(&[o, x], axis)
                }),
            }
        }
        "narrow" => {
            let shape = dims(rng, 3, 2, 5);
            let axis = rng.int_inclusive(0, 2);
            let start = rng.int_inclusive(0, shape[axis] - 1);
            let len = rng.int_inclusive(1, shape[axis] - start);
            Trial {
                input: rng.normal_tensor(&shape, 1.0),
                build: Box::new(move |g, x| g.narrow(x, axis, start, len)),
            }
        }
        "split_channels" => {
            let parts = rng.int_inclusive(2, 3);
            let (n, h, w) = (rng.int_inclusive(1, 2), rng.int_inclusive(1, 3), rng.int_inclusive(1, 3));
            let c = parts * rng.int_inclusive(1, 2);
            Trial {
                input: rng.normal_tensor(&[n, c, h, w], 1.0),
                build: Box::new(move |g, x| {
                    let pieces = g.split_channels(x, parts)?;
                    let a = weighted_sum(g, pieces[parts - 1])?;
                    let b = g.sum(pieces[0])?;
                    let b = g.scale(b, 0.5)?;
                    g.add(a, b)
                }),
            }
        }
        "reshape" => {
            let (a, b) = (rng.int_inclusive(1, 4), rng.int_inclusive(1, 4));
            Trial {
                input: rng.normal_tensor(&[a, b, 2], 1.0),
                build: Box::new(move |g, x| g.reshape(x, &[2 * b, a])),
            }
        }
        "plane_max" => Trial {
            input: random_tensor(rng, 4, 1, 4, 1.0),
            build: Box::new(|g, x| g.plane_max(x)),
        },
        "gather_gated" => {
            let (n, c, h, w, k) = (
                rng.int_inclusive(1, 2),
                rng.int_inclusive(1, 4),
                rng.int_inclusive(1, 4),
                rng.int_inclusive(1, 4),
                rng.int_inclusive(1, 4),
            );
            let features = rng.normal_tensor(&[n, c, h, w], 1.0);
            let scores = rng.normal_tensor(&[n, k], 1.5);
            let locations: Vec<usize> = (0..n * k).map(|_| rng.int_inclusive(0, h * w - 1)).collect();
            if operand == "features" {
                Trial {
                    input: features,
                    build: Box::new(move |g, f| {
                        let s = constant(g, &scores)?;
                        g.gather_gated(f, s, &locations)
                    }),
                }
            } else {
                Trial {
                    input: scores,
                    build: Box::new(move |g, s| {
                        let f = constant(g, &features)?;
                        g.gather_gated(f, s, &locations)
                    }),
                }
            }
        }
        "context_logits" | "context_attend" => {
            let (n, c, h, w, k) = (
                rng.int_inclusive(1, 2),
                rng.int_inclusive(1, 4),
                rng.int_inclusive(1, 3),
                rng.int_inclusive(1, 3),
                rng.int_inclusive(0, 4),
            );
            let mut ops = alloc::vec![
                rng.normal_tensor(&[n, c, h, w], 1.0),
                rng.normal_tensor(&[n, c, h, w], 1.0),
                rng.normal_tensor(&[n, k, c], 1.0),
            ];
            let attend = op == "context_attend";
            if attend {
                let raw = rng.normal_tensor(&[n, h * w, k + 1], 1.0);
                ops.insert(1, crate::kernels::softmax_last(&raw)?);
            }
            let slot = match (attend, operand) {
                (_, "query") => 0,
                (false, "local") => 1,
                (false, _) => 2,
                (true, "weights") => 1,
                (true, "local") => 2,
                (true, _) => 3,
            };
            let scale = 1.0 / math::sqrt(c as f64);
            let input = ops[slot].clone();
            Trial {
                input,
                build: Box::new(move |g, x| {
                    let mut vars = Vec::with_capacity(ops.len());
                    for (i, t) in ops.iter().enumerate() {
                        vars.push(if i == slot { x } else { constant(g, t)? });
                    }
                    if attend {
                        g.context_attend(vars[0], vars[1], vars[2], vars[3])
                    } else {
                        g.context_logits(vars[0], vars[1], vars[2], scale)
                    }
                }),
            }
        }
        "sum" => Trial {
            input: random_tensor(rng, 3, 1, 4, 1.0),
            build: Box::new(|g, x| {
                let y = g.mul(x, x)?;
                g.sum(y)
            }),
        },
        "mean" => Trial {
            input: random_tensor(rng, 3, 1, 4, 1.0),
            build: Box::new(|g, x| {
                let y = g.mul(x, x)?;
                g.mean(y)
            }),
        },
        "bce_with_logits" => {
            let shape = dims(rng, 4, 1, 3);
            let targets = rng.uniform_tensor(&shape, 0.0, 1.0);
            Trial {
                input: rng.normal_tensor(&shape, 2.0),
                build: Box::new(move |g, x| g.bce_with_logits(x, &targets)),
            }
        }
        "tcc_refine" => tcc_trial(operand, rng)?,
        _ => return Err(Error::invalid("gradcheck", format!("unknown row `{name}`"))),
    };
    Ok(trial)
}

fn tcc_trial(operand: &str, rng: &mut SeededRng) -> Result<Trial> {
    let cfg = TccConfig {
        n_keys: rng.int_inclusive(1, 3),
        channel_base: rng.int_inclusive(2, 3),
        ..TccConfig::default()
    };
    let width = rng.int_inclusive(cfg.channel_base, cfg.channel_base + 2);
    let (n, h, w) = (rng.int_inclusive(1, 2), rng.int_inclusive(3, 5), rng.int_inclusive(3, 5));
    let mut store = ParamStore::new();
    let p = TccParams::init(&mut store, "tcc", 0, width, &cfg, rng)?;
    // move the restoration off zero so every path carries gradient
    for id in [p.restore_weight, p.restore_bias] {
        let t = store.get(id).clone();
        *store.get_mut(id) = rng.normal_tensor(t.shape(), 0.5);
    }
    let x = rng.normal_tensor(&[n, width, h, w], 1.0);
    let target = match operand {
        "input" => None,
        "reduce" => Some(p.reduce_weight),
        "local" => Some(p.stacks[0].local_weight),
        "score" => Some(p.stacks[0].score_weight),
        "projection" => Some(p.stacks[cfg.stack_depth - 1].projection),
        _ => Some(p.restore_weight),
    };
    let input = match target {
        None => x.clone(),
        Some(id) => store.get(id).clone(),
    };
    Ok(Trial {
        input,
        build: Box::new(move |g, v| {
            let mut bound = store.bind(g, false)?;
            let xv = match target {
                None => v,
                Some(id) => {
                    bound.replace(id, v);
                    g.constant(x.clone())?
                }
            };
            Ok(tcc::tcc_refine(g, &bound, &p, &cfg, xv)?.output)
        }),
    })
}
