//! Per-op gradient scenarios: each case builds the op on a tape, projects
//! the output to a scalar with fixed random weights, and compares the tape's
//! leaf gradients against f64 central differences through an independent
//! reference forward.

#![allow(dead_code)]

use kpdyn_core::autodiff::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{assert_grads_close, central_diff, ref_conv2d_same, ref_matmul, ref_softmax_rows, FD_EPS};

/// One differentiable-op scenario.
pub struct OpCase {
    pub name: &'static str,
    /// Input shapes.
    pub shapes: Vec<Vec<usize>>,
    /// Sample inputs away from any non-differentiable kink.
    pub sample: fn(&mut ChaCha8Rng, &[Vec<usize>]) -> Vec<Vec<f64>>,
    /// Build the op on the tape.
    pub build: fn(&mut Tape, &[Var]) -> Var,
    /// Reference forward in f64.
    pub reference: fn(&[Vec<f64>], &[Vec<usize>]) -> Vec<f64>,
}

fn sample_smooth(rng: &mut ChaCha8Rng, shapes: &[Vec<usize>]) -> Vec<Vec<f64>> {
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
        })
        .collect()
}

/// Uniform in `[-1, 1]` but at least `margin` away from zero.
fn sample_off_zero(rng: &mut ChaCha8Rng, shapes: &[Vec<usize>], margin: f64) -> Vec<Vec<f64>> {
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            (0..n)
                .map(|_| {
                    let mag = rng.random_range(margin..1.0);
                    if rng.random_bool(0.5) {
                        mag
                    } else {
                        -mag
                    }
                })
                .collect()
        })
        .collect()
}

fn sample_positive(rng: &mut ChaCha8Rng, shapes: &[Vec<usize>]) -> Vec<Vec<f64>> {
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            (0..n).map(|_| rng.random_range(0.2..2.0)).collect()
        })
        .collect()
}

/// Away from the clamp boundaries at +-0.5.
fn sample_off_clamp(rng: &mut ChaCha8Rng, shapes: &[Vec<usize>]) -> Vec<Vec<f64>> {
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            (0..n)
                .map(|_| loop {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    if (v.abs() - 0.5).abs() > 0.05 {
                        break v;
                    }
                })
                .collect()
        })
        .collect()
}

/// Pairs separated enough that `max(a, b)` never flips under the FD step.
fn sample_separated_pair(rng: &mut ChaCha8Rng, shapes: &[Vec<usize>]) -> Vec<Vec<f64>> {
    let n: usize = shapes[0].iter().product();
    let a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = a
        .iter()
        .map(|&v| {
            let gap = rng.random_range(0.05..0.5);
            if rng.random_bool(0.5) {
                v + gap
            } else {
                v - gap
            }
        })
        .collect();
    vec![a, b]
}

/// Per-channel entries separated so the spatial argmax is FD-stable.
fn sample_unique_max(rng: &mut ChaCha8Rng, shapes: &[Vec<usize>]) -> Vec<Vec<f64>> {
    let s = &shapes[0];
    let (c, hw) = (s[0], s[1] * s[2]);
    let mut data = vec![0.0; c * hw];
    for ch in 0..c {
        loop {
            for v in &mut data[ch * hw..(ch + 1) * hw] {
                *v = rng.random_range(-1.0..1.0);
            }
            let row = &data[ch * hw..(ch + 1) * hw];
            let mut sorted: Vec<f64> = row.to_vec();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if sorted[0] - sorted[1] > 0.05 {
                break;
            }
        }
    }
    vec![data]
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            shapes: vec![vec![3, 4], vec![4, 2]],
            sample: |r, s| sample_smooth(r, s),
            build: |t, v| t.matmul(v[0], v[1]).unwrap(),
            reference: |x, _| ref_matmul(&x[0], &x[1], 3, 4, 2),
        },
        OpCase {
            name: "transpose",
            shapes: vec![vec![3, 4]],
            sample: |r, s| sample_smooth(r, s),
            build: |t, v| t.transpose(v[0]).unwrap(),
            reference: |x, _| {
                let mut out = vec![0.0; 12];
                for i in 0..3 {
                    for j in 0..4 {
                        out[j * 3 + i] = x[0][i * 4 + j];
                    }
                }
                out
            },
        },
        OpCase {
            name: "add",
            shapes: vec![vec![2, 3], vec![2, 3]],
            sample: |r, s| sample_smooth(r, s),
            build: |t, v| t.add(v[0], v[1]).unwrap(),
            reference: |x, _| x[0].iter().zip(&x[1]).map(|(a, b)| a + b).collect(),
        },
        OpCase {
            name: "sub",
            shapes: vec![vec![2, 3], vec![2, 3]],
            sample: |r, s| sample_smooth(r, s),
            build: |t, v| t.sub(v[0], v[1]).unwrap(),
            reference: |x, _| x[0].iter().zip(&x[1]).map(|(a, b)| a - b).collect(),
        },
        OpCase {
            name: "mul",
            shapes: vec![vec![2, 3], vec![2, 3]],
            sample: |r, s| sample_smooth(r, s),
            build: |t, v| t.mul(v[0], v[1]).unwrap(),
            reference: |x, _| x[0].iter().zip(&x[1]).map(|(a, b)| a * b).collect(),
        },
        OpCase {
            name: "scale",
            shapes: vec![vec![5]],
            sample: |r, s| sample_smooth(r, s),
            build: |t, v| t.scale(v[0], -1.7),
            reference: |x, _| x[0].iter().map(|a| a * -1.7).collect(),
        },
        OpCase {
            name: "add_scalar",
            shapes: vec![vec![5]],
            sample: |r, s| sample_smooth(r, s),
            build: |t, v| t.add_scalar(v[0], 0.3),
            reference: |x, _| x[0].iter().map(|a| a + 0.3).collect(),
        },
        OpCase {
            name: "concat",
            shapes: vec![vec![2, 2], vec![2, 3]],
            sample: |r, s| sample_smooth(r, s),
            build: |t, v| t.concat(&[v[0], v[1]], 1).unwrap(),
            reference: |x, _| {
                let mut out = Vec::new();
                for row in 0..2 {
                    out.extend_from_slice(&x[0][row * 2..row * 2 + 2]);
                    out.extend_from_slice(&x[1][row * 3..row * 3 + 3]);
                }
                out
            },
        },
        OpCase {
            name: "slice",
            shapes: vec![vec![3, 4]],
            sample: |r, s| sample_smooth(r, s),
            build: |t, v| t.slice(v[0], 1, 1, 2).unwrap(),
            reference: |x, _| {
                let mut out = Vec::new();
                for row in 0..3 {
                    out.extend_from_slice(&x[0][row * 4 + 1..row * 4 + 3]);
                }
                out
            },
        },
        OpCase {
            name: "reshape",
            shapes: vec![vec![2, 6]],
            sample: |r, s| sample_smooth(r, s),
            build: |t, v| t.reshape(v[0], vec![3, 4]).unwrap(),
            reference: |x, _| x[0].clone(),
        },
        OpCase {
            name: "softmax",
            shapes: vec![vec![3, 4]],
            sample: |r, s| sample_smooth(r, s),
            build: |t, v| t.softmax(v[0]).unwrap(),
            reference: |x, _| ref_softmax_rows(&x[0], 4),
        },
        OpCase {
            name: "relu",
            shapes: vec![vec![6]],
            sample: |r, s| sample_off_zero(r, s, 0.05),
            build: |t, v| t.relu(v[0]),
            reference: |x, _| x[0].iter().map(|&a| a.max(0.0)).collect(),
        },
        OpCase {
            name: "abs",
            shapes: vec![vec![6]],
            sample: |r, s| sample_off_zero(r, s, 0.05),
            build: |t, v| t.abs(v[0]),
            reference: |x, _| x[0].iter().map(|&a| a.abs()).collect(),
        },
        OpCase {
            name: "tanh",
            shapes: vec![vec![6]],
            sample: |r, s| sample_smooth(r, s),
            build: |t, v| t.tanh(v[0]),
            reference: |x, _| x[0].iter().map(|&a| a.tanh()).collect(),
        },
        OpCase {
            name: "sigmoid",
            shapes: vec![vec![6]],
            sample: |r, s| sample_smooth(r, s),
            build: |t, v| t.sigmoid(v[0]),
            reference: |x, _| x[0].iter().map(|&a| 1.0 / (1.0 + (-a).exp())).collect(),
        },
        OpCase {
            name: "exp",
            shapes: vec![vec![6]],
            sample: |r, s| sample_smooth(r, s),
            build: |t, v| t.exp(v[0]),
            reference: |x, _| x[0].iter().map(|&a| a.exp()).collect(),
        },
        OpCase {
            name: "ln",
            shapes: vec![vec![6]],
            sample: |r, s| sample_positive(r, s),
            build: |t, v| t.ln(v[0]),
            reference: |x, _| x[0].iter().map(|&a| a.ln()).collect(),
        },
        OpCase {
            name: "sqrt",
            shapes: vec![vec![6]],
            sample: |r, s| sample_positive(r, s),
            build: |t, v| t.sqrt(v[0]),
            reference: |x, _| x[0].iter().map(|&a| a.sqrt()).collect(),
        },
        OpCase {
            name: "clamp",
            shapes: vec![vec![8]],
            sample: |r, s| sample_off_clamp(r, s),
            build: |t, v| t.clamp(v[0], -0.5, 0.5),
            reference: |x, _| x[0].iter().map(|&a| a.clamp(-0.5, 0.5)).collect(),
        },
        OpCase {
            name: "maximum",
            shapes: vec![vec![6], vec![6]],
            sample: |r, s| sample_separated_pair(r, s),
            build: |t, v| t.maximum(v[0], v[1]).unwrap(),
            reference: |x, _| x[0].iter().zip(&x[1]).map(|(&a, &b)| a.max(b)).collect(),
        },
        OpCase {
            name: "mean",
            shapes: vec![vec![7]],
            sample: |r, s| sample_smooth(r, s),
            build: |t, v| t.mean(v[0]),
            reference: |x, _| vec![x[0].iter().sum::<f64>() / x[0].len() as f64],
        },
        OpCase {
            name: "sum",
            shapes: vec![vec![7]],
            sample: |r, s| sample_smooth(r, s),
            build: |t, v| t.sum(v[0]),
            reference: |x, _| vec![x[0].iter().sum()],
        },
        OpCase {
            name: "l2_norm",
            shapes: vec![vec![5]],
            sample: |r, s| sample_off_zero(r, s, 0.2),
            build: |t, v| t.l2_norm(v[0]),
            reference: |x, _| vec![x[0].iter().map(|a| a * a).sum::<f64>().sqrt()],
        },
        OpCase {
            name: "conv2d",
            shapes: vec![vec![2, 5, 6], vec![3, 2, 3, 3], vec![3]],
            sample: |r, s| sample_smooth(r, s),
            build: |t, v| t.conv2d(v[0], v[1], Some(v[2])).unwrap(),
            reference: |x, _| ref_conv2d_same(&x[0], &x[1], Some(&x[2]), 2, 3, 5, 6, 3, 3),
        },
        OpCase {
            name: "avg_pool2",
            shapes: vec![vec![2, 4, 6]],
            sample: |r, s| sample_smooth(r, s),
            build: |t, v| t.avg_pool2(v[0]).unwrap(),
            reference: |x, _| {
                let (c, h, w) = (2, 4, 6);
                let (oh, ow) = (h / 2, w / 2);
                let mut out = vec![0.0; c * oh * ow];
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let base = ch * h * w + 2 * y * w + 2 * xx;
                            out[ch * oh * ow + y * ow + xx] = 0.25
                                * (x[0][base] + x[0][base + 1] + x[0][base + w] + x[0][base + w + 1]);
                        }
                    }
                }
                out
            },
        },
        OpCase {
            name: "upsample2",
            shapes: vec![vec![2, 2, 3]],
            sample: |r, s| sample_smooth(r, s),
            build: |t, v| t.upsample2(v[0]).unwrap(),
            reference: |x, _| {
                let (c, h, w) = (2, 2, 3);
                let (oh, ow) = (2 * h, 2 * w);
                let mut out = vec![0.0; c * oh * ow];
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            let v = x[0][ch * h * w + y * w + xx];
                            let base = ch * oh * ow + 2 * y * ow + 2 * xx;
                            out[base] = v;
                            out[base + 1] = v;
                            out[base + ow] = v;
                            out[base + ow + 1] = v;
                        }
                    }
                }
                out
            },
        },
        OpCase {
            name: "max_spatial",
            shapes: vec![vec![3, 2, 4]],
            sample: |r, s| sample_unique_max(r, s),
            build: |t, v| t.max_spatial(v[0]).unwrap(),
            reference: |x, _| {
                (0..3)
                    .map(|c| {
                        x[0][c * 8..(c + 1) * 8]
                            .iter()
                            .copied()
                            .fold(f64::NEG_INFINITY, f64::max)
                    })
                    .collect()
            },
        },
        OpCase {
            name: "mul_channel",
            shapes: vec![vec![3, 2, 4], vec![2, 4]],
            sample: |r, s| sample_smooth(r, s),
            build: |t, v| t.mul_channel(v[0], v[1]).unwrap(),
            reference: |x, _| {
                let mut out = vec![0.0; 24];
                for c in 0..3 {
                    for p in 0..8 {
                        out[c * 8 + p] = x[0][c * 8 + p] * x[1][p];
                    }
                }
                out
            },
        },
    ]
}

/// Run one case at one seed: forward values agree with the reference, and
/// every input leaf's gradient matches f64 central differences.
pub fn check_case(case: &OpCase, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = (case.sample)(&mut rng, &case.shapes);

    // Fixed projection weights make the scalar loss sensitive to every
    // output element.
    let ref_out = (case.reference)(&inputs, &case.shapes);
    let proj: Vec<f64> = (0..ref_out.len())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(&case.shapes)
        .map(|(data, shape)| {
            tape.leaf(Tensor::new(
                shape.clone(),
                data.iter().map(|&v| v as f32).collect(),
            ))
        })
        .collect();
    let out = (case.build)(&mut tape, &vars);
    let proj_const = tape.constant(Tensor::new(
        tape.value(out).shape().to_vec(),
        proj.iter().map(|&v| v as f32).collect(),
    ));
    let weighted = tape.mul(out, proj_const).unwrap();
    let loss = tape.sum(weighted);

    // Forward agreement.
    let got_forward = tape.value(out).data();
    for (i, (&g, &w)) in got_forward.iter().zip(&ref_out).enumerate() {
        assert!(
            ((g as f64) - w).abs() <= 1e-4 + 1e-4 * w.abs(),
            "{}[{i}] forward: tape {g} vs reference {w}",
            case.name
        );
    }

    let grads = tape.backward(loss).unwrap();

    // Finite differences through the flattened reference.
    let lens: Vec<usize> = inputs.iter().map(Vec::len).collect();
    let flat: Vec<f64> = inputs.concat();
    let shapes = case.shapes.clone();
    let reference = case.reference;
    let f = move |x: &[f64]| -> f64 {
        let mut parts = Vec::with_capacity(lens.len());
        let mut off = 0;
        for &l in &lens {
            parts.push(x[off..off + l].to_vec());
            off += l;
        }
        let out = reference(&parts, &shapes);
        out.iter().zip(&proj).map(|(a, b)| a * b).sum()
    };
    let fd = central_diff(&f, &flat, FD_EPS);

    let mut off = 0;
    for (var, input) in vars.iter().zip(&inputs) {
        let got = grads
            .wrt(*var)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.len()]);
        assert_grads_close(&got, &fd[off..off + input.len()], case.name);
        off += input.len();
    }
}
