//! Naive reference implementations used as test oracles. Written as plain
//! loops over the textbook definitions, independent of the kernels.
#![allow(dead_code)]

use tcc_core::graph::Graph;
use tcc_core::kernels::{self, ConvGeom};
use tcc_core::params::ParamStore;
use tcc_core::tcc::{self, CondensedContext, TccConfig, TccParams, TccPlacement};
use tcc_core::rng::SeededRng;
use tcc_core::Tensor;

pub fn idx4(s: &[usize], n: usize, c: usize, y: usize, x: usize) -> usize {
    ((n * s[1] + c) * s[2] + y) * s[3] + x
}

pub fn conv2d_naive(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize, dil: usize) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    let oh = (h + 2 * pad - dil * (kh - 1) - 1) / stride + 1;
    let ow = (wd + 2 * pad - dil * (kw - 1) - 1) / stride + 1;
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    let os = out.shape().to_vec();
    for bn in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky * dil) as isize - pad as isize;
                                let ix = (ox * stride + kx * dil) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[idx4(xs, bn, ci, iy as usize, ix as usize)] * w.data()[idx4(ws, co, ci, ky, kx)];
                            }
                        }
                    }
                    if let Some(b) = b {
                        acc += b.data()[co];
                    }
                    out.data_mut()[idx4(&os, bn, co, oy, ox)] = acc;
                }
            }
        }
    }
    out
}

pub fn matmul_naive(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.data()[i * k + p] * b.data()[p * n + j];
            }
            out.data_mut()[i * n + j] = acc;
        }
    }
    out
}

pub fn softmax_naive(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn attention_naive(q: &[f64], keys: &[Vec<f64>]) -> Vec<f64> {
    let d = q.len() as f64;
    let logits: Vec<f64> = keys
        .iter()
        .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
        .collect();
    softmax_naive(&logits)
}

/// Per-position decode: keys/values are the local token at the query
/// position followed by the global tokens; output `W (q + sum a_j v_j)`.
/// Returns the output `[N, C, H, W]` and weights `[N, H*W, K+1]`.
pub fn decode_naive(proj: &Tensor, q: &Tensor, local: &Tensor, global: &Tensor) -> (Tensor, Tensor) {
    let s = q.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let k = global.shape()[1];
    let mut out = Tensor::zeros(s);
    let mut weights = Tensor::zeros(&[n, h * w, k + 1]);
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let query: Vec<f64> = (0..c).map(|ch| q.data()[idx4(s, b, ch, y, x)]).collect();
                let mut tokens = vec![(0..c).map(|ch| local.data()[idx4(s, b, ch, y, x)]).collect::<Vec<f64>>()];
                for key in 0..k {
                    tokens.push((0..c).map(|ch| global.data()[(b * k + key) * c + ch]).collect());
                }
                let a = attention_naive(&query, &tokens);
                let p = y * w + x;
                for (j, &aj) in a.iter().enumerate() {
                    weights.data_mut()[(b * h * w + p) * (k + 1) + j] = aj;
                }
                let mixed: Vec<f64> = (0..c)
                    .map(|ch| query[ch] + a.iter().zip(&tokens).map(|(aj, t)| aj * t[ch]).sum::<f64>())
                    .collect();
                for co in 0..c {
                    let v: f64 = (0..c).map(|ci| proj.data()[co * c + ci] * mixed[ci]).sum();
                    out.data_mut()[idx4(s, b, co, y, x)] = v;
                }
            }
        }
    }
    (out, weights)
}

pub fn random(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    rng.normal_tensor(shape, 1.0)
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Max absolute deviation of each optimized routine from its oracle on
/// random desk-scale inputs.
pub fn oracle_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = SeededRng::new(seed);
    let mut conv = 0.0f64;
    let mut conv_dil = 0.0f64;
    for &(stride, pad, dil, k) in &[(1, 1, 1, 3), (2, 1, 1, 3), (1, 0, 1, 1), (1, 2, 2, 3), (2, 3, 2, 3), (1, 0, 2, 2)] {
        let x = random(&mut rng, &[2, 5, 13, 11]);
        let w = random(&mut rng, &[7, 5, k, k]);
        let b = random(&mut rng, &[7]);
        let fast = kernels::conv2d(&x, &w, Some(&b), ConvGeom::new(stride, pad, dil)).unwrap();
        let slow = conv2d_naive(&x, &w, Some(&b), stride, pad, dil);
        assert_eq!(fast.shape(), slow.shape());
        let e = max_abs(fast.data(), slow.data());
        if dil == 2 {
            conv_dil = conv_dil.max(e);
        } else {
            conv = conv.max(e);
        }
    }

    let a = random(&mut rng, &[17, 23]);
    let b = random(&mut rng, &[23, 9]);
    let matmul = max_abs(kernels::matmul(&a, &b).unwrap().data(), matmul_naive(&a, &b).data());

    let mut softmax = 0.0f64;
    for len in [1, 2, 5, 33] {
        let v: Vec<f64> = (0..len).map(|_| rng.normal() * 4.0).collect();
        softmax = softmax.max(max_abs(&kernels::softmax(&v), &softmax_naive(&v)));
    }

    let mut attention = 0.0f64;
    for keys in [1, 5, 9] {
        let q: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
        let ks: Vec<Vec<f64>> = (0..keys).map(|_| (0..16).map(|_| rng.normal()).collect()).collect();
        let refs: Vec<&[f64]> = ks.iter().map(Vec::as_slice).collect();
        attention = attention.max(max_abs(&tcc::attention_weights(&q, &refs).unwrap(), &attention_naive(&q, &ks)));
    }

    let mut decode = 0.0f64;
    for &(n, c, h, w, k) in &[(1, 8, 6, 5, 4), (2, 16, 4, 4, 1), (1, 4, 3, 7, 8)] {
        let q = random(&mut rng, &[n, c, h, w]);
        let local = random(&mut rng, &[n, c, h, w]);
        let global = random(&mut rng, &[n, k, c]);
        let proj = rng.normal_tensor(&[c, c, 1, 1], 0.3);
        let (out, weights) = run_decode(&proj, &q, &local, &global);
        let (o_ref, w_ref) = decode_naive(&proj, &q, &local, &global);
        decode = decode.max(max_abs(out.data(), o_ref.data())).max(max_abs(weights.data(), w_ref.data()));
    }
    vec![
        ("conv2d", conv),
        ("conv2d_dilated", conv_dil),
        ("matmul", matmul),
        ("softmax", softmax),
        ("attention_weights", attention),
        ("decode", decode),
    ]
}

/// `tcc::decode` on constant inputs; returns output and weights.
pub fn run_decode(proj: &Tensor, q: &Tensor, local: &Tensor, global: &Tensor) -> (Tensor, Tensor) {
    let mut g = Graph::new();
    let (pv, qv) = (g.constant(proj.clone()).unwrap(), g.constant(q.clone()).unwrap());
    let ctx = CondensedContext {
        local_rep: g.constant(local.clone()).unwrap(),
        key_locations: vec![],
        key_scores: vec![],
        global_feats: g.constant(global.clone()).unwrap(),
    };
    let d = tcc::decode(&mut g, pv, qv, &ctx).unwrap();
    (g.value(d.output).clone(), g.value(d.weights).clone())
}

/// Every attention row is a probability vector summing to 1 within 1e-9.
pub fn prop_attention_normalized(seed: u64) -> Result<(), String> {
    let mut rng = SeededRng::new(seed);
    let (n, c, h, w, k) = (rng.int_inclusive(1, 2), rng.int_inclusive(1, 16), rng.int_inclusive(1, 6), rng.int_inclusive(1, 6), rng.int_inclusive(0, 8));
    let spread = rng.uniform_range(0.1, 20.0);
    let q = rng.normal_tensor(&[n, c, h, w], spread);
    let local = rng.normal_tensor(&[n, c, h, w], spread);
    let global = rng.normal_tensor(&[n, k, c], spread);
    let (_, weights) = run_decode(&tcc::identity_kernel(c), &q, &local, &global);
    for row in weights.data().chunks(k + 1) {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 || row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(format!("row {row:?} sums to {s}"));
        }
    }
    Ok(())
}

/// Key locations are unchanged when every score map is scaled by a > 0 and
/// shifted by b.
pub fn prop_argmax_shift_scale(seed: u64) -> Result<(), String> {
    let mut rng = SeededRng::new(seed);
    let (n, k, h, w) = (rng.int_inclusive(1, 3), rng.int_inclusive(1, 6), rng.int_inclusive(1, 9), rng.int_inclusive(1, 9));
    // a coarse grid produces exact ties, which must resolve identically
    let maps = Tensor::from_fn(&[n, k, h, w], |_| (rng.normal() * 4.0).round());
    let a = rng.uniform_range(0.01, 100.0);
    let b = rng.uniform_range(-50.0, 50.0);
    let moved = Tensor::from_fn(maps.shape(), |i| a * maps.data()[i] + b);
    let (_, loc) = kernels::plane_max_argmax(&maps).map_err(|e| e.to_string())?;
    let (_, loc2) = kernels::plane_max_argmax(&moved).map_err(|e| e.to_string())?;
    if loc != loc2 {
        return Err(format!("locations {loc:?} became {loc2:?} under {a}x + {b}"));
    }
    // and they are first maxima in row-major order
    for (plane, &l) in maps.data().chunks(h * w).zip(&loc) {
        let best = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if plane.iter().position(|&v| v == best) != Some(l) {
            return Err(format!("location {l} is not the first maximum"));
        }
    }
    Ok(())
}

/// A freshly initialised block returns its input bit-exactly.
pub fn prop_identity_at_init(seed: u64) -> Result<(), String> {
    let mut rng = SeededRng::new(seed);
    let level = rng.int_inclusive(0, 2);
    let cfg = TccConfig {
        n_keys: rng.int_inclusive(1, 8),
        dilation: rng.int_inclusive(1, 3),
        channel_base: rng.int_inclusive(1, 4),
        stack_depth: rng.int_inclusive(1, 3),
        placement: TccPlacement::default(),
    };
    let width = cfg.reduced_channels(level) + rng.int_inclusive(0, 8);
    let shape = [rng.int_inclusive(1, 2), width, rng.int_inclusive(1, 7), rng.int_inclusive(1, 7)];
    let x = rng.normal_tensor(&shape, 3.0);
    let mut store = ParamStore::new();
    let p = TccParams::init(&mut store, "t", level, width, &cfg, &mut rng).map_err(|e| e.to_string())?;
    let mut g = Graph::new();
    let bound = store.bind(&mut g, false).map_err(|e| e.to_string())?;
    let xv = g.constant(x.clone()).map_err(|e| e.to_string())?;
    let out = tcc::tcc_refine(&mut g, &bound, &p, &cfg, xv).map_err(|e| e.to_string())?;
    let y = g.value(out.output);
    if y.data().iter().zip(x.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err(format!("max deviation {}", y.max_abs_diff(&x)));
    }
    Ok(())
}

/// Permuting the global tokens permutes their attention weights the same
/// way and leaves the decoded output unchanged (up to summation order).
pub fn prop_decode_permutation(seed: u64) -> Result<(), String> {
    let mut rng = SeededRng::new(seed);
    let (n, c, h, w, k) = (rng.int_inclusive(1, 2), rng.int_inclusive(1, 8), rng.int_inclusive(1, 4), rng.int_inclusive(1, 4), rng.int_inclusive(1, 6));
    let q = random(&mut rng, &[n, c, h, w]);
    let local = random(&mut rng, &[n, c, h, w]);
    let global = random(&mut rng, &[n, k, c]);
    let proj = rng.normal_tensor(&[c, c, 1, 1], 0.5);
    let mut perm: Vec<usize> = (0..k).collect();
    for i in (1..k).rev() {
        perm.swap(i, rng.int_inclusive(0, i));
    }
    let permuted = Tensor::from_fn(&[n, k, c], |i| {
        let (b, key, ch) = (i / (k * c), (i / c) % k, i % c);
        global.data()[(b * k + perm[key]) * c + ch]
    });
    let (o1, w1) = run_decode(&proj, &q, &local, &global);
    let (o2, w2) = run_decode(&proj, &q, &local, &permuted);
    let err = o1.max_abs_diff(&o2);
    if err > 1e-12 {
        return Err(format!("output moved by {err}"));
    }
    for (r1, r2) in w1.data().chunks(k + 1).zip(w2.data().chunks(k + 1)) {
        if (r1[0] - r2[0]).abs() > 1e-15 {
            return Err("local weight changed".into());
        }
        for j in 0..k {
            if (r2[1 + j] - r1[1 + perm[j]]).abs() > 1e-15 {
                return Err(format!("weight of key {j} does not follow the permutation"));
            }
        }
    }
    Ok(())
}

/// FLOPs tallied by the tape during a single-image pyramid forward pass.
pub fn instrumented_flops(arch: &tcc_core::flops::PyramidArch, seed: u64) -> u64 {
    use tcc_core::pyramid::{pyramid_forward, PyramidModel};
    let mut store = ParamStore::new();
    let model = PyramidModel::init(&mut store, arch.backbone.clone(), arch.fusion.clone(), &arch.tcc, seed).unwrap();
    let mut g = Graph::new();
    let bound = store.bind(&mut g, false).unwrap();
    let image = SeededRng::new(seed).uniform_tensor(&[1, 3, arch.image_height, arch.image_width], 0.0, 1.0);
    let x = g.constant(image).unwrap();
    g.reset_flops();
    pyramid_forward(&mut g, &bound, &model, x).unwrap();
    g.flops()
}

/// Three small architectures covering every refinement and placement.
pub fn desk_archs() -> Vec<tcc_core::flops::PyramidArch> {
    use tcc_core::flops::PyramidArch;
    use tcc_core::pyramid::{BackboneSpec, FusionSpec, Refinement};
    let mk = |backbone: BackboneSpec, tcc: TccConfig, h, w| PyramidArch {
        fusion: FusionSpec::fpn(backbone.levels(), Refinement::Tcc),
        backbone,
        tcc,
        image_height: h,
        image_width: w,
    };
    vec![
        mk(BackboneSpec::default(), TccConfig::default(), 64, 64),
        mk(
            BackboneSpec {
                stem_channels: 8,
                stage_channels: vec![8, 12, 16],
                width: 32,
            },
            TccConfig {
                n_keys: 2,
                channel_base: 4,
                stack_depth: 1,
                placement: TccPlacement {
                    before_fusion: false,
                    after_fusion: true,
                },
                ..TccConfig::default()
            },
            32,
            96,
        ),
        mk(
            BackboneSpec {
                width: 128,
                ..BackboneSpec::default()
            },
            TccConfig {
                n_keys: 8,
                stack_depth: 3,
                dilation: 1,
                placement: TccPlacement {
                    before_fusion: true,
                    after_fusion: false,
                },
                ..TccConfig::default()
            },
            64,
            128,
        ),
    ]
}
