//! Shared test oracles: independent f64 reference implementations and a
//! central-finite-difference gradient checker.
//!
//! Everything here is straight-line code kept deliberately separate from the
//! library's tape so the two can disagree. Reference forwards run in f64;
//! gradients from the f32 tape are compared against f64 central differences.

#![allow(dead_code)]

use rand::Rng;

pub const FD_EPS: f64 = 1e-4;
pub const FD_RTOL: f64 = 1e-3;
pub const FD_ATOL: f64 = 1e-5;

/// Central finite differences of `f` at `x`, one coordinate at a time.
pub fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let hi = f(&probe);
        probe[i] = x[i] - eps;
        let lo = f(&probe);
        probe[i] = x[i];
        grad[i] = (hi - lo) / (2.0 * eps);
    }
    grad
}

/// Assert `got` (from the f32 tape) matches `want` (f64 finite differences)
/// to the gradient-suite tolerances.
pub fn assert_grads_close(got: &[f32], want: &[f64], context: &str) {
    assert_eq!(got.len(), want.len(), "{context}: gradient length");
    for (i, (&g, &w)) in got.iter().zip(want).enumerate() {
        let g = g as f64;
        let tol = FD_ATOL + FD_RTOL * w.abs().max(g.abs());
        assert!(
            (g - w).abs() <= tol,
            "{context}[{i}]: autodiff {g} vs finite-diff {w} (tol {tol})"
        );
    }
}

pub fn uniform_vec(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

// ---------------------------------------------------------------------------
// f64 reference ops
// ---------------------------------------------------------------------------

pub fn ref_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for kk in 0..k {
                acc += a[i * k + kk] * b[kk * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

pub fn ref_softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row_in, row_out) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row_in.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in row_out.iter_mut().zip(row_in) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in row_out.iter_mut() {
            *o /= sum;
        }
    }
    out
}

pub fn ref_conv2d_same(
    input: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) -> Vec<f64> {
    let (ph, pw) = (kh as isize / 2, kw as isize / 2);
    let mut out = vec![0.0; co * h * w];
    for c_out in 0..co {
        for y in 0..h {
            for x in 0..w {
                let mut acc = bias.map_or(0.0, |b| b[c_out]);
                for c_in in 0..ci {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = y as isize + ky as isize - ph;
                            let ix = x as isize + kx as isize - pw;
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                acc += input[(c_in * h + iy as usize) * w + ix as usize]
                                    * kernel[((c_out * ci + c_in) * kh + ky) * kw + kx];
                            }
                        }
                    }
                }
                out[(c_out * h + y) * w + x] = acc;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// f64 reference model pieces (attention, pooling, recurrence, losses)
// ---------------------------------------------------------------------------

/// Parameters of the reference attention block, flattened per head.
pub struct RefAttention {
    pub heads: usize,
    pub d_in: usize,
    pub d_k: usize,
    pub d_out: usize,
    /// Per head: wq, wk, wv, each `d_in x d_k`.
    pub wq: Vec<Vec<f64>>,
    pub wk: Vec<Vec<f64>>,
    pub wv: Vec<Vec<f64>>,
    /// `heads * d_k x d_out`.
    pub wo: Vec<f64>,
    pub bo: Vec<f64>,
    /// Residual embedding `d_in x d_out` plus bias.
    pub we: Vec<f64>,
    pub be: Vec<f64>,
}

/// Multi-head scaled dot-product attention over a fully connected node set
/// with a linear-embedding residual; returns node outputs and the
/// head-averaged attention matrix.
pub fn ref_attention(att: &RefAttention, u: &[f64], k_nodes: usize) -> (Vec<f64>, Vec<f64>) {
    let mut head_outs: Vec<Vec<f64>> = Vec::new();
    let mut attn_avg = vec![0.0; k_nodes * k_nodes];
    for h in 0..att.heads {
        let q = ref_matmul(u, &att.wq[h], k_nodes, att.d_in, att.d_k);
        let kk = ref_matmul(u, &att.wk[h], k_nodes, att.d_in, att.d_k);
        let v = ref_matmul(u, &att.wv[h], k_nodes, att.d_in, att.d_k);
        let mut logits = vec![0.0; k_nodes * k_nodes];
        for i in 0..k_nodes {
            for j in 0..k_nodes {
                let mut acc = 0.0;
                for d in 0..att.d_k {
                    acc += q[i * att.d_k + d] * kk[j * att.d_k + d];
                }
                logits[i * k_nodes + j] = acc / (att.d_k as f64).sqrt();
            }
        }
        let weights = ref_softmax_rows(&logits, k_nodes);
        for (a, &w) in attn_avg.iter_mut().zip(&weights) {
            *a += w / att.heads as f64;
        }
        head_outs.push(ref_matmul(&weights, &v, k_nodes, k_nodes, att.d_k));
    }
    // Concat heads, project, add the residual embedding of the input.
    let mut concat = vec![0.0; k_nodes * att.heads * att.d_k];
    for i in 0..k_nodes {
        for h in 0..att.heads {
            for d in 0..att.d_k {
                concat[i * att.heads * att.d_k + h * att.d_k + d] = head_outs[h][i * att.d_k + d];
            }
        }
    }
    let proj = ref_matmul(&concat, &att.wo, k_nodes, att.heads * att.d_k, att.d_out);
    let emb = ref_matmul(u, &att.we, k_nodes, att.d_in, att.d_out);
    let mut out = vec![0.0; k_nodes * att.d_out];
    for i in 0..k_nodes {
        for d in 0..att.d_out {
            out[i * att.d_out + d] =
                proj[i * att.d_out + d] + att.bo[d] + emb[i * att.d_out + d] + att.be[d];
        }
    }
    (out, attn_avg)
}

/// MGF pooling: `[mean(nodes), sum_i exp(clamp(theta_c . node_i, -10, 10))]`.
pub fn ref_mgf_pool(nodes: &[f64], k: usize, dim: usize, theta: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim + m];
    for i in 0..k {
        for d in 0..dim {
            out[d] += nodes[i * dim + d] / k as f64;
        }
    }
    for c in 0..m {
        let mut acc = 0.0;
        for i in 0..k {
            let mut dot = 0.0;
            for d in 0..dim {
                dot += theta[d * m + c] * nodes[i * dim + d];
            }
            acc += dot.clamp(-10.0, 10.0).exp();
        }
        out[dim + c] = acc;
    }
    out
}

/// Elementwise max over nodes (the MaxPool ablation's pooling).
pub fn ref_max_pool(nodes: &[f64], k: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![f64::NEG_INFINITY; dim];
    for i in 0..k {
        for d in 0..dim {
            out[d] = out[d].max(nodes[i * dim + d]);
        }
    }
    out
}

/// GRU parameters: gates are `sigmoid(x W + h U + b)`, candidate is
/// `tanh(x Wc + (r*h) Uc + bc)`, and `h' = (1-z) h + z c`.
pub struct RefGru {
    pub d_in: usize,
    pub d_h: usize,
    pub wz: Vec<f64>,
    pub uz: Vec<f64>,
    pub bz: Vec<f64>,
    pub wr: Vec<f64>,
    pub ur: Vec<f64>,
    pub br: Vec<f64>,
    pub wc: Vec<f64>,
    pub uc: Vec<f64>,
    pub bc: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn ref_gru_step(gru: &RefGru, h: &[f64], x: &[f64]) -> Vec<f64> {
    let xz = ref_matmul(x, &gru.wz, 1, gru.d_in, gru.d_h);
    let hz = ref_matmul(h, &gru.uz, 1, gru.d_h, gru.d_h);
    let xr = ref_matmul(x, &gru.wr, 1, gru.d_in, gru.d_h);
    let hr = ref_matmul(h, &gru.ur, 1, gru.d_h, gru.d_h);
    let z: Vec<f64> = (0..gru.d_h)
        .map(|i| sigmoid(xz[i] + hz[i] + gru.bz[i]))
        .collect();
    let r: Vec<f64> = (0..gru.d_h)
        .map(|i| sigmoid(xr[i] + hr[i] + gru.br[i]))
        .collect();
    let rh: Vec<f64> = (0..gru.d_h).map(|i| r[i] * h[i]).collect();
    let xc = ref_matmul(x, &gru.wc, 1, gru.d_in, gru.d_h);
    let hc = ref_matmul(&rh, &gru.uc, 1, gru.d_h, gru.d_h);
    (0..gru.d_h)
        .map(|i| {
            let c = (xc[i] + hc[i] + gru.bc[i]).tanh();
            (1.0 - z[i]) * h[i] + z[i] * c
        })
        .collect()
}

pub fn ref_l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Hinge contrastive dynamics loss over an unroll.
pub fn ref_hinge_loss(
    preds: &[Vec<f64>],
    targets: &[Vec<f64>],
    negatives: &[Vec<f64>],
    gamma: f64,
) -> f64 {
    let mut total = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        total += ref_l2(p, t);
        for n in negatives {
            total += (gamma - ref_l2(p, n)).max(0.0);
        }
    }
    total
}

/// InfoNCE with L2-distance logits over the positive and the negatives.
pub fn ref_infonce_loss(preds: &[Vec<f64>], targets: &[Vec<f64>], negatives: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        let d_pos = ref_l2(p, t);
        let mut logits = vec![-d_pos];
        for n in negatives {
            logits.push(-ref_l2(p, n));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
        total += -(-d_pos - lse);
    }
    total
}

pub fn ref_reward_loss(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter()
        .zip(truth)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum()
}

/// Transport operation on plain arrays.
pub fn ref_transport(
    phi_src: &[f64],
    phi_tgt: &[f64],
    heat_src: &[f64],
    heat_tgt: &[f64],
    channels: usize,
    k: usize,
    hw: usize,
) -> Vec<f64> {
    let mask = |heat: &[f64]| {
        let mut m = vec![0.0f64; hw];
        for i in 0..k {
            let ch = &heat[i * hw..(i + 1) * hw];
            let peak = ch.iter().copied().fold(0.0, f64::max);
            if peak <= 0.0 {
                continue;
            }
            for (mv, &v) in m.iter_mut().zip(ch) {
                *mv += v / peak;
            }
        }
        for mv in &mut m {
            *mv = mv.clamp(0.0, 1.0);
        }
        m
    };
    let m_src = mask(heat_src);
    let m_tgt = mask(heat_tgt);
    let mut out = vec![0.0; channels * hw];
    for c in 0..channels {
        for p in 0..hw {
            out[c * hw + p] = (1.0 - m_src[p]) * (1.0 - m_tgt[p]) * phi_src[c * hw + p]
                + m_tgt[p] * phi_tgt[c * hw + p];
        }
    }
    out
}

/// Heatmap-weighted mean pooling of features (the keypoint extraction) as a
/// nested loop.
pub fn ref_extract_features(
    phi: &[f64],
    heat: &[f64],
    channels: usize,
    k: usize,
    hw: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; k * channels];
    for i in 0..k {
        for c in 0..channels {
            let mut acc = 0.0;
            for p in 0..hw {
                acc += heat[i * hw + p] * phi[c * hw + p];
            }
            out[i * channels + c] = acc / hw as f64;
        }
    }
    out
}
pub mod gradcheck;
pub mod suites;
