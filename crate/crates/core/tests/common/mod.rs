//! Oracles shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use pdr_core::classifier::{cross_entropy, default_architecture, LayerSpec, Model};
use pdr_core::pdr::{l_total_on_tape, MisKind, MisObjective, PdrConfig};
use pdr_core::perceptual::{ssim_on_tape, SsimConfig};
use pdr_core::rng::{self, Rng};
use pdr_core::tensor::{finite_diff_check, Conv2dParams};
use pdr_core::{Result, Tape, Tensor, Var};
use rand::Rng as _;

pub const H: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-6;

type Objective = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

pub fn uniform(r: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

/// Values with `lo <= |v| < hi` and a random sign.
fn signed(r: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(lo..hi) * if r.gen_bool(0.5) { 1.0 } else { -1.0 }).collect())
        .unwrap()
}

fn away_from(r: &mut Rng, shape: &[usize], bounds: [f64; 2], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let v: f64 = r.gen_range(-1.0..1.0);
        if bounds.iter().all(|b| (v - b).abs() > gap) {
            out.push(v);
        }
    }
    Tensor::new(shape, out).unwrap()
}

/// Reduce a tensor output to a scalar with fixed random weights.
fn project(weights: Tensor) -> impl Fn(&mut Tape, Var) -> Result<Var> {
    move |t, v| {
        let w = t.constant(weights.clone());
        t.dot(v, w)
    }
}

fn unary(f: fn(&mut Tape, Var) -> Result<Var>, out_shape: Vec<usize>, r: &mut Rng) -> Objective {
    let p = project(uniform(r, &out_shape, -1.0, 1.0));
    Box::new(move |t, v| {
        let y = f(t, v)?;
        p(t, y)
    })
}

/// Check `op(x, other)` in its left argument, or in its right when `swap`.
fn binary(
    f: fn(&mut Tape, Var, Var) -> Result<Var>,
    other: Tensor,
    swap: bool,
    out_shape: Vec<usize>,
    r: &mut Rng,
) -> Objective {
    let p = project(uniform(r, &out_shape, -1.0, 1.0));
    Box::new(move |t, v| {
        let o = t.constant(other.clone());
        let y = if swap { f(t, o, v)? } else { f(t, v, o)? };
        p(t, y)
    })
}

/// One random instance of a named check: the objective and the point.
fn instance(name: &str, r: &mut Rng) -> (Objective, Tensor) {
    let s = vec![2, 3, 4];
    match name {
        "add" => {
            (binary(Tape::add, uniform(r, &s, -1.0, 1.0), r.gen_bool(0.5), s.clone(), r), uniform(r, &s, -1.0, 1.0))
        }
        "sub" => {
            (binary(Tape::sub, uniform(r, &s, -1.0, 1.0), r.gen_bool(0.5), s.clone(), r), uniform(r, &s, -1.0, 1.0))
        }
        "mul" => {
            (binary(Tape::mul, uniform(r, &s, -2.0, 2.0), r.gen_bool(0.5), s.clone(), r), uniform(r, &s, -2.0, 2.0))
        }
        "mul-scalar-broadcast" => {
            let x = uniform(r, &s, -2.0, 2.0);
            (binary(Tape::mul, x, true, s.clone(), r), uniform(r, &[], -2.0, 2.0))
        }
        "div" => {
            if r.gen_bool(0.5) {
                (binary(Tape::div, signed(r, &s, 0.5, 2.0), false, s.clone(), r), uniform(r, &s, -2.0, 2.0))
            } else {
                (binary(Tape::div, uniform(r, &s, -2.0, 2.0), true, s.clone(), r), signed(r, &s, 0.5, 2.0))
            }
        }
        "square" => (unary(Tape::square, s.clone(), r), uniform(r, &s, -2.0, 2.0)),
        "add_scalar" => {
            let c = r.gen_range(-3.0..3.0);
            let p = project(uniform(r, &s, -1.0, 1.0));
            (
                Box::new(move |t, v| {
                    let y = t.add_scalar(v, c)?;
                    p(t, y)
                }),
                uniform(r, &s, -1.0, 1.0),
            )
        }
        "mul_scalar" => {
            let c = r.gen_range(-3.0..3.0);
            let p = project(uniform(r, &s, -1.0, 1.0));
            (
                Box::new(move |t, v| {
                    let y = t.mul_scalar(v, c)?;
                    p(t, y)
                }),
                uniform(r, &s, -1.0, 1.0),
            )
        }
        "neg" => (unary(Tape::neg, s.clone(), r), uniform(r, &s, -1.0, 1.0)),
        "matmul" => {
            let (m, k, n) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
            if r.gen_bool(0.5) {
                (
                    binary(Tape::matmul, uniform(r, &[k, n], -1.0, 1.0), false, vec![m, n], r),
                    uniform(r, &[m, k], -1.0, 1.0),
                )
            } else {
                (
                    binary(Tape::matmul, uniform(r, &[m, k], -1.0, 1.0), true, vec![m, n], r),
                    uniform(r, &[k, n], -1.0, 1.0),
                )
            }
        }
        "conv2d" => {
            let groups = if r.gen_bool(0.5) { 1 } else { 2 };
            let params = Conv2dParams { stride: r.gen_range(1..=2), pad: r.gen_range(0..=1), groups };
            let (cin, cout) = (2, if groups == 1 { 3 } else { 4 });
            let x = uniform(r, &[cin, 6, 6], -1.0, 1.0);
            let w = uniform(r, &[cout, cin / groups, 3, 3], -1.0, 1.0);
            let out = (6 + 2 * params.pad - 3) / params.stride + 1;
            let p = project(uniform(r, &[cout, out, out], -1.0, 1.0));
            if r.gen_bool(0.5) {
                (
                    Box::new(move |t, v| {
                        let wv = t.constant(w.clone());
                        let y = t.conv2d(v, wv, params)?;
                        p(t, y)
                    }),
                    x,
                )
            } else {
                (
                    Box::new(move |t, v| {
                        let xv = t.constant(x.clone());
                        let y = t.conv2d(xv, v, params)?;
                        p(t, y)
                    }),
                    w,
                )
            }
        }
        "channel_bias" => {
            let shape = vec![3, 4, 4];
            if r.gen_bool(0.5) {
                (
                    binary(Tape::channel_bias, uniform(r, &[3], -1.0, 1.0), false, shape.clone(), r),
                    uniform(r, &shape, -1.0, 1.0),
                )
            } else {
                (binary(Tape::channel_bias, uniform(r, &shape, -1.0, 1.0), true, shape, r), uniform(r, &[3], -1.0, 1.0))
            }
        }
        "relu" => (unary(Tape::relu, s.clone(), r), signed(r, &s, 0.1, 1.0)),
        "avg_pool" => {
            let p = project(uniform(r, &[2, 2, 3], -1.0, 1.0));
            (
                Box::new(move |t, v| {
                    let y = t.avg_pool(v, 2)?;
                    p(t, y)
                }),
                uniform(r, &[2, 4, 6], -1.0, 1.0),
            )
        }
        "softmax" => (unary(Tape::softmax, vec![6], r), uniform(r, &[6], -3.0, 3.0)),
        "log_softmax" => (unary(Tape::log_softmax, vec![6], r), uniform(r, &[6], -3.0, 3.0)),
        "log" => (unary(Tape::log, s.clone(), r), uniform(r, &s, 0.5, 2.0)),
        "exp" => (unary(Tape::exp, s.clone(), r), uniform(r, &s, -1.0, 1.0)),
        "sqrt" => (unary(Tape::sqrt, s.clone(), r), uniform(r, &s, 0.5, 2.0)),
        "sum" => (Box::new(Tape::sum), uniform(r, &s, -1.0, 1.0)),
        "mean" => (Box::new(Tape::mean), uniform(r, &s, -1.0, 1.0)),
        "clamp" => {
            let p = project(uniform(r, &s, -1.0, 1.0));
            (
                Box::new(move |t, v| {
                    let y = t.clamp(v, -0.5, 0.5)?;
                    p(t, y)
                }),
                away_from(r, &s, [-0.5, 0.5], 0.05),
            )
        }
        "l1_norm" => (Box::new(Tape::l1_norm), signed(r, &s, 0.1, 1.0)),
        "l2_norm" => (Box::new(Tape::l2_norm), uniform(r, &s, -1.0, 1.0)),
        "dot" => {
            let other = uniform(r, &s, -1.0, 1.0);
            (
                Box::new(move |t, v| {
                    let o = t.constant(other.clone());
                    t.dot(v, o)
                }),
                uniform(r, &s, -1.0, 1.0),
            )
        }
        "resize_bilinear" => {
            let (oh, ow) = (r.gen_range(2..9), r.gen_range(2..9));
            let p = project(uniform(r, &[2, oh, ow], -1.0, 1.0));
            (
                Box::new(move |t, v| {
                    let y = t.resize_bilinear(v, oh, ow)?;
                    p(t, y)
                }),
                uniform(r, &[2, 5, 5], -1.0, 1.0),
            )
        }
        "zero_pad" => {
            let (top, left) = (r.gen_range(0..3), r.gen_range(0..3));
            let p = project(uniform(r, &[2, 6, 7], -1.0, 1.0));
            (
                Box::new(move |t, v| {
                    let y = t.zero_pad(v, 6, 7, top, left)?;
                    p(t, y)
                }),
                uniform(r, &[2, 3, 4], -1.0, 1.0),
            )
        }
        "reshape" => {
            let p = project(uniform(r, &[6, 4], -1.0, 1.0));
            (
                Box::new(move |t, v| {
                    let y = t.reshape(v, &[6, 4])?;
                    p(t, y)
                }),
                uniform(r, &s, -1.0, 1.0),
            )
        }
        "select" => {
            let i = r.gen_range(0..24);
            (Box::new(move |t, v| t.select(v, i)), uniform(r, &s, -1.0, 1.0))
        }
        "cross_entropy" => {
            let y = r.gen_range(0..5);
            (Box::new(move |t, v| cross_entropy(t, v, y)), uniform(r, &[5], -4.0, 4.0))
        }
        "ssim" => {
            let other = uniform(r, &[3, 12, 12], 0.0, 1.0);
            let swap = r.gen_bool(0.5);
            (
                Box::new(move |t, v| {
                    let o = t.constant(other.clone());
                    let (s, _) = if swap {
                        ssim_on_tape(t, o, v, &SsimConfig::default())?
                    } else {
                        ssim_on_tape(t, v, o, &SsimConfig::default())?
                    };
                    Ok(s)
                }),
                uniform(r, &[3, 12, 12], 0.0, 1.0),
            )
        }
        other => panic!("no gradient check named {other}"),
    }
}

pub const PRIMITIVES: [&str; 30] = [
    "add",
    "sub",
    "mul",
    "mul-scalar-broadcast",
    "div",
    "square",
    "add_scalar",
    "mul_scalar",
    "neg",
    "matmul",
    "conv2d",
    "channel_bias",
    "relu",
    "avg_pool",
    "softmax",
    "log_softmax",
    "log",
    "exp",
    "sqrt",
    "sum",
    "mean",
    "clamp",
    "l1_norm",
    "l2_norm",
    "dot",
    "resize_bilinear",
    "zero_pad",
    "reshape",
    "select",
    "cross_entropy",
];

/// Worst finite-difference error of `name` over `instances` random draws.
pub fn worst_error(name: &str, instances: usize, seed: u64) -> f64 {
    let tag = name.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
    (0..instances)
        .map(|i| {
            let mut r = rng::stream(seed, &[tag, i as u64]);
            let (f, x) = instance(name, &mut r);
            finite_diff_check(f, &x, H).unwrap()
        })
        .fold(0.0, f64::max)
}

pub const SHAPE: [usize; 3] = [3, 12, 12];

/// The default stack without ReLUs, so central differences never cross a kink.
pub fn smooth_model(seed: u64) -> Model {
    let layers = default_architecture(SHAPE, 3).into_iter().filter(|(_, l)| *l != LayerSpec::Relu).collect();
    Model::init(SHAPE, layers, seed).unwrap()
}

/// `l_total` for every `L_mis` kind, `per_kind` random points each.
pub fn l_total_errors(per_kind: usize, seed: u64) -> Vec<(MisKind, f64)> {
    let models = [smooth_model(seed), smooth_model(seed + 1)];
    let mut r = rng::stream(seed, &[0x1a]);
    let x = uniform(&mut r, &SHAPE, 0.1, 0.9);
    MisKind::ALL
        .iter()
        .map(|&kind| {
            let cfg = PdrConfig { mis: kind, reference_iters: 3, layer: "conv2".into(), ..PdrConfig::default() };
            let mis = MisObjective::new(&models, &x, 1, &cfg).unwrap();
            let worst = (0..per_kind)
                .map(|_| {
                    let noise = uniform(&mut r, &SHAPE, -0.05, 0.05);
                    let adv = x.zip_map(&noise, "noise", |a, b| (a + b).clamp(0.0, 1.0)).unwrap();
                    let lambda = r.gen_range(0.5..20.0);
                    let threshold = r.gen_range(0.9..1.0);
                    finite_diff_check(
                        |t, v| {
                            let mut stream = rng::stream(seed, &[0xd1]);
                            l_total_on_tape(t, &mis, v, &x, lambda, threshold, &cfg.ssim, Some(&mut stream))
                        },
                        &adv,
                        H,
                    )
                    .unwrap()
                })
                .fold(0.0, f64::max);
            (kind, worst)
        })
        .collect()
}
