//! Parametrized oracle suites shared by the fast oracle tests and the
//! acceptance gate: each runner compares a library operation against the
//! independent f64 references in `common` over many random instances.

#![allow(dead_code)]

use kpdyn_core::autodiff::{Tape, Tensor, Var};
use kpdyn_core::dynamics::{goal_reward, AblationFlags, DynamicsParams, ModelConfig};
use kpdyn_core::keypoint::{extract_keypoints, transport, FeatureMap, Heatmap};
use kpdyn_core::trainer::{dynamics_loss, reward_loss};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    ref_attention, ref_extract_features, ref_gru_step, ref_hinge_loss, ref_infonce_loss,
    ref_max_pool, ref_mgf_pool, ref_reward_loss, ref_transport, RefAttention, RefGru,
};

fn assert_close(got: f64, want: f64, rtol: f64, atol: f64, context: &str) {
    let tol = atol + rtol * want.abs().max(got.abs());
    assert!(
        (got - want).abs() <= tol,
        "{context}: got {got}, want {want} (tol {tol})"
    );
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn store_f64(params: &DynamicsParams, path: &str) -> Vec<f64> {
    params
        .store
        .get(path)
        .unwrap_or_else(|| panic!("param {path}"))
        .data()
        .iter()
        .map(|&v| v as f64)
        .collect()
}

/// `extract_keypoints` vs a nested-loop oracle (atol 1e-6 per the contract).
pub fn run_extract_suite(instances: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..instances {
        let (c, k) = (rng.random_range(1..4usize), rng.random_range(1..4usize));
        let (h, w) = (rng.random_range(2..5usize), rng.random_range(2..5usize));
        let phi_data = rand_vec(&mut rng, c * h * w);
        // Random normalized heatmaps.
        let mut heat_data = vec![0.0f64; k * h * w];
        for ch in heat_data.chunks_mut(h * w) {
            let mut total = 0.0;
            for v in ch.iter_mut() {
                *v = rng.random_range(0.0..1.0);
                total += *v;
            }
            for v in ch.iter_mut() {
                *v /= total;
            }
        }
        let phi = FeatureMap {
            channels: c,
            height: h,
            width: w,
            data: to_f32(&phi_data),
        };
        let heat = Heatmap {
            k,
            height: h,
            width: w,
            data: to_f32(&heat_data),
        };
        let graph = extract_keypoints(&phi, &heat).expect("aligned shapes");
        let want = ref_extract_features(&phi_data, &heat_data, c, k, h * w);
        for (j, (&g, &wv)) in graph.features.iter().zip(&want).enumerate() {
            assert_close(g as f64, wv, 0.0, 1e-6, &format!("extract[{i}].feat[{j}]"));
        }
    }
}

/// `transport` vs the pixelwise formula oracle.
pub fn run_transport_suite(instances: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..instances {
        let (c, k) = (rng.random_range(1..4usize), rng.random_range(1..4usize));
        let (h, w) = (rng.random_range(2..5usize), rng.random_range(2..5usize));
        let hw = h * w;
        let phi_src = rand_vec(&mut rng, c * hw);
        let phi_tgt = rand_vec(&mut rng, c * hw);
        let heat = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..k * hw)
                .map(|_| {
                    if rng.random_bool(0.2) {
                        0.0
                    } else {
                        rng.random_range(0.0..0.5)
                    }
                })
                .collect()
        };
        let h_src = heat(&mut rng);
        let h_tgt = heat(&mut rng);
        let mk_phi = |d: &[f64]| FeatureMap {
            channels: c,
            height: h,
            width: w,
            data: to_f32(d),
        };
        let mk_heat = |d: &[f64]| Heatmap {
            k,
            height: h,
            width: w,
            data: to_f32(d),
        };
        let got = transport(
            &mk_phi(&phi_src),
            &mk_phi(&phi_tgt),
            &mk_heat(&h_src),
            &mk_heat(&h_tgt),
        )
        .expect("matched shapes");
        let want = ref_transport(&phi_src, &phi_tgt, &h_src, &h_tgt, c, k, hw);
        for (j, (&g, &wv)) in got.data.iter().zip(&want).enumerate() {
            assert_close(g as f64, wv, 1e-5, 1e-6, &format!("transport[{i}][{j}]"));
        }
    }
}

fn tiny_cfg(rng: &mut ChaCha8Rng) -> ModelConfig {
    ModelConfig {
        keypoints: rng.random_range(1..5),
        feat_dim: rng.random_range(2..4),
        node_dim: rng.random_range(2..5),
        belief_dim: rng.random_range(2..5),
        heads: rng.random_range(1..3),
        head_dim: rng.random_range(2..4),
        mgf_dim: rng.random_range(1..4),
        ablation: AblationFlags::default(),
    }
}

fn ref_attention_from(params: &DynamicsParams) -> RefAttention {
    let cfg = params.cfg;
    RefAttention {
        heads: cfg.heads,
        d_in: cfg.node_input_dim(),
        d_k: cfg.head_dim,
        d_out: cfg.node_dim,
        wq: (0..cfg.heads)
            .map(|h| store_f64(params, &format!("dynamics/attn/h{h}/wq")))
            .collect(),
        wk: (0..cfg.heads)
            .map(|h| store_f64(params, &format!("dynamics/attn/h{h}/wk")))
            .collect(),
        wv: (0..cfg.heads)
            .map(|h| store_f64(params, &format!("dynamics/attn/h{h}/wv")))
            .collect(),
        wo: store_f64(params, "dynamics/attn/out/w"),
        bo: store_f64(params, "dynamics/attn/out/b"),
        we: store_f64(params, "dynamics/attn/embed/w"),
        be: store_f64(params, "dynamics/attn/embed/b"),
    }
}

/// `tgconv` vs the straight-line attention oracle (atol 1e-5).
pub fn run_tgconv_suite(instances: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..instances {
        let cfg = tiny_cfg(&mut rng);
        let params = DynamicsParams::init(cfg, rng.random());
        let k = cfg.keypoints;
        let u_data = rand_vec(&mut rng, k * cfg.node_input_dim());
        let mut tape = Tape::new();
        let model = params.bind(&mut tape, false);
        let u = tape.constant(Tensor::new(
            vec![k, cfg.node_input_dim()],
            to_f32(&u_data),
        ));
        let (out, edges) = model.tgconv(&mut tape, u).expect("valid dims");
        let (want_out, want_edges) = ref_attention(&ref_attention_from(&params), &u_data, k);
        for (j, (&g, &wv)) in tape.value(out).data().iter().zip(&want_out).enumerate() {
            assert_close(g as f64, wv, 0.0, 1e-5, &format!("tgconv[{i}].out[{j}]"));
        }
        let edge_vals = tape.value(edges).data();
        for (j, (&g, &wv)) in edge_vals.iter().zip(&want_edges).enumerate() {
            assert_close(g as f64, wv, 0.0, 1e-5, &format!("tgconv[{i}].edge[{j}]"));
        }
        // Soft edges are row-stochastic.
        for row in edge_vals.chunks(k) {
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-5, "tgconv[{i}]: row sum {sum}");
        }
    }
}

/// `mgf_pool` (and the MaxPool ablation) vs direct summation.
pub fn run_pool_suite(instances: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..instances {
        let max_pool = i % 4 == 3;
        let mut cfg = tiny_cfg(&mut rng);
        cfg.ablation.max_pool = max_pool;
        let params = DynamicsParams::init(cfg, rng.random());
        let k = cfg.keypoints;
        let nodes_data = rand_vec(&mut rng, k * cfg.node_dim);
        let mut tape = Tape::new();
        let model = params.bind(&mut tape, false);
        let nodes = tape.constant(Tensor::new(vec![k, cfg.node_dim], to_f32(&nodes_data)));
        let pooled = model.pool(&mut tape, nodes).expect("valid dims");
        let want = if max_pool {
            ref_max_pool(&nodes_data, k, cfg.node_dim)
        } else {
            let theta = store_f64(&params, "dynamics/mgf/theta");
            ref_mgf_pool(&nodes_data, k, cfg.node_dim, &theta, cfg.mgf_dim)
        };
        for (j, (&g, &wv)) in tape.value(pooled).data().iter().zip(&want).enumerate() {
            assert_close(g as f64, wv, 1e-6, 1e-6, &format!("pool[{i}][{j}]"));
        }
    }
}

fn ref_gru_from(params: &DynamicsParams) -> RefGru {
    RefGru {
        d_in: params.cfg.pooled_dim(),
        d_h: params.cfg.belief_dim,
        wz: store_f64(params, "dynamics/gru/wz"),
        uz: store_f64(params, "dynamics/gru/uz"),
        bz: store_f64(params, "dynamics/gru/bz"),
        wr: store_f64(params, "dynamics/gru/wr"),
        ur: store_f64(params, "dynamics/gru/ur"),
        br: store_f64(params, "dynamics/gru/br"),
        wc: store_f64(params, "dynamics/gru/wc"),
        uc: store_f64(params, "dynamics/gru/uc"),
        bc: store_f64(params, "dynamics/gru/bc"),
    }
}

/// `belief_update` vs the step-by-step gate oracle (atol 1e-6).
pub fn run_gru_suite(instances: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..instances {
        let cfg = tiny_cfg(&mut rng);
        let params = DynamicsParams::init(cfg, rng.random());
        let h_data = rand_vec(&mut rng, cfg.belief_dim);
        let p_data = rand_vec(&mut rng, cfg.pooled_dim());
        let mut tape = Tape::new();
        let model = params.bind(&mut tape, false);
        let h = tape.constant(Tensor::new(vec![1, cfg.belief_dim], to_f32(&h_data)));
        let p = tape.constant(Tensor::new(vec![1, cfg.pooled_dim()], to_f32(&p_data)));
        let next = model.belief_update(&mut tape, h, p).expect("valid dims");
        let want = ref_gru_step(&ref_gru_from(&params), &h_data, &p_data);
        for (j, (&g, &wv)) in tape.value(next).data().iter().zip(&want).enumerate() {
            assert_close(g as f64, wv, 0.0, 1e-6, &format!("gru[{i}][{j}]"));
        }
    }
}

/// `dynamics_loss` (hinge and InfoNCE) vs the formula oracles (rtol 1e-6).
pub fn run_dynamics_loss_suite(instances: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..instances {
        let dim = rng.random_range(2..6usize);
        let steps = rng.random_range(1..4usize);
        let n_neg = rng.random_range(1..5usize);
        let gamma = rng.random_range(0.2..2.0);
        let preds: Vec<Vec<f64>> = (0..steps).map(|_| rand_vec(&mut rng, dim)).collect();
        let targets: Vec<Vec<f64>> = (0..steps).map(|_| rand_vec(&mut rng, dim)).collect();
        let negatives: Vec<Vec<f64>> = (0..n_neg).map(|_| rand_vec(&mut rng, dim)).collect();
        for info_nce in [false, true] {
            let flags = AblationFlags {
                info_nce,
                ..Default::default()
            };
            let mut tape = Tape::new();
            let mk = |tape: &mut Tape, rows: &[Vec<f64>]| -> Vec<Var> {
                rows.iter()
                    .map(|r| tape.constant(Tensor::new(vec![1, dim], to_f32(r))))
                    .collect()
            };
            let p = mk(&mut tape, &preds);
            let t = mk(&mut tape, &targets);
            let n = mk(&mut tape, &negatives);
            let loss =
                dynamics_loss(&mut tape, &p, &t, &n, gamma as f32, flags).expect("valid inputs");
            let want = if info_nce {
                ref_infonce_loss(&preds, &targets, &negatives)
            } else {
                ref_hinge_loss(&preds, &targets, &negatives, gamma)
            };
            assert_close(
                tape.value(loss).item() as f64,
                want,
                1e-5,
                1e-6,
                &format!("dynamics_loss[{i}] info_nce={info_nce}"),
            );
        }
    }
}

/// `reward_loss` vs the direct sum (f32-exact agreement is checked a grade
/// looser to allow the oracle's f64 accumulation).
pub fn run_reward_loss_suite(instances: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..instances {
        let steps = rng.random_range(1..8usize);
        let preds = rand_vec(&mut rng, steps);
        let truths = rand_vec(&mut rng, steps);
        let mut tape = Tape::new();
        let pred_vars: Vec<Var> = preds
            .iter()
            .map(|&v| tape.constant(Tensor::new(vec![1, 1], vec![v as f32])))
            .collect();
        let loss = reward_loss(&mut tape, &pred_vars, &to_f32(&truths)).expect("equal lengths");
        let want = ref_reward_loss(&preds, &truths);
        assert_close(
            tape.value(loss).item() as f64,
            want,
            1e-6,
            1e-7,
            &format!("reward_loss[{i}]"),
        );
    }
}

/// `goal_reward` vs `-sqrt(sum of squares)` (rtol 1e-7).
pub fn run_goal_reward_suite(instances: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..instances {
        let dim = rng.random_range(1..12usize);
        let a = rand_vec(&mut rng, dim);
        let b = rand_vec(&mut rng, dim);
        let got = goal_reward(&to_f32(&a), &to_f32(&b)).expect("equal dims") as f64;
        let af: Vec<f64> = to_f32(&a).iter().map(|&v| v as f64).collect();
        let bf: Vec<f64> = to_f32(&b).iter().map(|&v| v as f64).collect();
        let want = -af
            .iter()
            .zip(&bf)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        assert_close(got, want, 1e-7, 1e-9, &format!("goal_reward[{i}]"));
    }
}

/// Permutation suite: pooling, belief, and reward are invariant under every
/// node permutation for K <= `k_max`; tgconv outputs permute with the input.
pub fn run_permutation_suite(k_max: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 1..=k_max {
        let cfg = ModelConfig {
            keypoints: k,
            feat_dim: 3,
            node_dim: 4,
            belief_dim: 4,
            heads: 2,
            head_dim: 3,
            mgf_dim: 2,
            ablation: AblationFlags::default(),
        };
        let params = DynamicsParams::init(cfg, 1000 + k as u64);
        let feats: Vec<f64> = rand_vec(&mut rng, k * cfg.feat_dim);
        let h_data: Vec<f64> = rand_vec(&mut rng, cfg.belief_dim);
        let action: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();

        let run = |perm: &[usize]| -> (Vec<f32>, Vec<f32>, f32, Vec<f32>) {
            let mut permuted = vec![0.0f32; k * cfg.feat_dim];
            for (dst, &src) in perm.iter().enumerate() {
                for d in 0..cfg.feat_dim {
                    permuted[dst * cfg.feat_dim + d] = feats[src * cfg.feat_dim + d] as f32;
                }
            }
            let mut tape = Tape::new();
            let model = params.bind(&mut tape, false);
            let h = tape.constant(Tensor::new(vec![1, cfg.belief_dim], to_f32(&h_data)));
            let x = tape.constant(Tensor::new(vec![k, cfg.feat_dim], permuted));
            let nodes = model.embed_nodes(&mut tape, x).unwrap();
            let a = tape.constant(Tensor::new(vec![1, 4], to_f32(&action)));
            let out = model.step(&mut tape, h, nodes, a).unwrap();
            let reward = model.predict_reward(&mut tape, out.pooled).unwrap();
            (
                tape.value(out.pooled).data().to_vec(),
                tape.value(out.belief).data().to_vec(),
                tape.value(reward).item(),
                tape.value(out.nodes_pred).data().to_vec(),
            )
        };

        let identity: Vec<usize> = (0..k).collect();
        let (pooled0, belief0, reward0, nodes0) = run(&identity);
        for perm in permutations(k) {
            let (pooled, belief, reward, nodes) = run(&perm);
            for (a, b) in pooled.iter().zip(&pooled0) {
                assert!((a - b).abs() < 1e-5, "pooled varies under {perm:?}");
            }
            for (a, b) in belief.iter().zip(&belief0) {
                assert!((a - b).abs() < 1e-5, "belief varies under {perm:?}");
            }
            assert!(
                (reward - reward0).abs() < 1e-5,
                "reward varies under {perm:?}"
            );
            // Equivariance: output row `dst` matches identity row `perm[dst]`.
            for (dst, &src) in perm.iter().enumerate() {
                for d in 0..cfg.node_dim {
                    let a = nodes[dst * cfg.node_dim + d];
                    let b = nodes0[src * cfg.node_dim + d];
                    assert!((a - b).abs() < 1e-5, "tgconv not equivariant under {perm:?}");
                }
            }
        }
    }
}

/// All permutations of `0..k` (k <= 5 keeps this tiny).
pub fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k <= 1 {
        return vec![(0..k).collect()];
    }
    let mut out = Vec::new();
    for smaller in permutations(k - 1) {
        for pos in 0..k {
            let mut perm = smaller.clone();
            perm.insert(pos, k - 1);
            out.push(perm);
        }
    }
    out
}
