//! Recurrent graph dynamics over keypoint features.
//!
//! One dynamics step takes the current belief `h`, the `K` node features in
//! latent node space, and the action; it runs attention graph convolution
//! with soft edges over the fully connected node set, pools the node outputs
//! into a single vector (mean plus moment-generating-function features), and
//! updates the belief with a gated recurrent unit. The pooled vector feeds
//! the reward heads and the contrastive training losses; the node outputs
//! are the predicted next-step node features, so open-loop unrolls feed them
//! straight back in.
//!
//! Keypoint features enter node space through a learned linear embedding, so
//! encoded observations and open-loop predictions live in the same space and
//! the training loss can compare them directly.
//!
//! Ablations (configuration flags, not separate models): `NoGraph` swaps the
//! attention block for a shared per-node MLP, `NoRNN` drops the belief and
//! conditions nodes on `[v, a]` only, `MaxPool` replaces the MGF pooling
//! with an elementwise max over nodes.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ParamStore, Tape, TapeError, Tensor, Var};

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("graph has {got} keypoints but the model is configured for {expected}")]
    KeypointMismatch { expected: usize, got: usize },
    #[error("feature dimension {got} does not match the configured {expected}")]
    FeatureDimMismatch { expected: usize, got: usize },
    #[error("pooled-state dimensions differ: {0} vs {1}")]
    PooledDimMismatch(usize, usize),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Ablation flags, named after the variants they reproduce.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub no_graph: bool,
    pub no_rnn: bool,
    pub no_contrastive: bool,
    pub info_nce: bool,
    pub max_pool: bool,
}

impl AblationFlags {
    pub fn parse_list(names: &str) -> Result<Self, String> {
        let mut flags = Self::default();
        for name in names.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match name {
                "NoGraph" => flags.no_graph = true,
                "NoRNN" => flags.no_rnn = true,
                "NoContrastive" => flags.no_contrastive = true,
                "InfoNCE" => flags.info_nce = true,
                "MaxPool" => flags.max_pool = true,
                other => return Err(format!("unknown ablation flag {other:?}")),
            }
        }
        Ok(flags)
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.no_graph {
            out.push("NoGraph");
        }
        if self.no_rnn {
            out.push("NoRNN");
        }
        if self.no_contrastive {
            out.push("NoContrastive");
        }
        if self.info_nce {
            out.push("InfoNCE");
        }
        if self.max_pool {
            out.push("MaxPool");
        }
        out
    }
}

/// Model dimensions plus ablation flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub keypoints: usize,
    /// Keypoint feature dimension produced by the detector.
    pub feat_dim: usize,
    /// Latent node dimension shared by encoded and predicted nodes.
    pub node_dim: usize,
    pub belief_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Number of learnable MGF directions.
    pub mgf_dim: usize,
    pub ablation: AblationFlags,
}

impl ModelConfig {
    pub fn new(keypoints: usize, feat_dim: usize) -> Self {
        Self {
            keypoints,
            feat_dim,
            node_dim: 32,
            belief_dim: 64,
            heads: 2,
            head_dim: 16,
            mgf_dim: 8,
            ablation: AblationFlags::default(),
        }
    }

    pub fn with_ablation(mut self, ablation: AblationFlags) -> Self {
        self.ablation = ablation;
        self
    }

    /// Node-input width: `[v_i, h, a]`, or `[v_i, a]` under `NoRNN`.
    pub fn node_input_dim(&self) -> usize {
        let belief = if self.ablation.no_rnn {
            0
        } else {
            self.belief_dim
        };
        self.node_dim + belief + 4
    }

    pub fn pooled_dim(&self) -> usize {
        if self.ablation.max_pool {
            self.node_dim
        } else {
            self.node_dim + self.mgf_dim
        }
    }
}

/// MGF exponents are clamped to this symmetric range at train and test time.
pub const MGF_CLAMP: f32 = 10.0;

/// Learnable parameters of the dynamics model.
pub struct DynamicsParams {
    pub store: ParamStore,
    pub cfg: ModelConfig,
}

impl DynamicsParams {
    pub fn init(cfg: ModelConfig, seed: u64) -> Self {
        fn mat(store: &mut ParamStore, rng: &mut ChaCha8Rng, path: &str, rows: usize, cols: usize) {
            store
                .insert(path, Tensor::glorot(rows, cols, rng))
                .expect("fresh path");
        }
        fn zero_row(store: &mut ParamStore, path: &str, cols: usize) {
            store
                .insert(path, Tensor::zeros(vec![1, cols]))
                .expect("fresh path");
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d_in = cfg.node_input_dim();
        // Feature normalizer: fixed (never trained), fitted from data by the
        // trainer. Identity until then. Keypoint features are tiny (heatmap
        // pooling divides by the grid size); without standardization every
        // encoded state starts within a hair of every other and contrastive
        // training opens inside the collapsed optimum and stays there.
        store
            .insert("dynamics/feat_norm/scale", Tensor::filled(vec![1, cfg.feat_dim], 1.0))
            .expect("fresh path");
        zero_row(&mut store, "dynamics/feat_norm/shift", cfg.feat_dim);
        mat(&mut store, &mut rng, "dynamics/node_embed/w", cfg.feat_dim, cfg.node_dim);
        zero_row(&mut store, "dynamics/node_embed/b", cfg.node_dim);

        if cfg.ablation.no_graph {
            mat(&mut store, &mut rng, "dynamics/mlp/w1", d_in, cfg.node_dim);
            zero_row(&mut store, "dynamics/mlp/b1", cfg.node_dim);
            mat(&mut store, &mut rng, "dynamics/mlp/w2", cfg.node_dim, cfg.node_dim);
            zero_row(&mut store, "dynamics/mlp/b2", cfg.node_dim);
        } else {
            for h in 0..cfg.heads {
                mat(&mut store, &mut rng, &format!("dynamics/attn/h{h}/wq"), d_in, cfg.head_dim);
                mat(&mut store, &mut rng, &format!("dynamics/attn/h{h}/wk"), d_in, cfg.head_dim);
                mat(&mut store, &mut rng, &format!("dynamics/attn/h{h}/wv"), d_in, cfg.head_dim);
            }
            mat(
                &mut store,
                &mut rng,
                "dynamics/attn/out/w",
                cfg.heads * cfg.head_dim,
                cfg.node_dim,
            );
            zero_row(&mut store, "dynamics/attn/out/b", cfg.node_dim);
            mat(&mut store, &mut rng, "dynamics/attn/embed/w", d_in, cfg.node_dim);
            zero_row(&mut store, "dynamics/attn/embed/b", cfg.node_dim);
        }

        if !cfg.ablation.no_rnn {
            let p = cfg.pooled_dim();
            for gate in ["z", "r", "c"] {
                mat(&mut store, &mut rng, &format!("dynamics/gru/w{gate}"), p, cfg.belief_dim);
                mat(
                    &mut store,
                    &mut rng,
                    &format!("dynamics/gru/u{gate}"),
                    cfg.belief_dim,
                    cfg.belief_dim,
                );
                zero_row(&mut store, &format!("dynamics/gru/b{gate}"), cfg.belief_dim);
            }
        }

        if !cfg.ablation.max_pool {
            store
                .insert(
                    "dynamics/mgf/theta",
                    Tensor::uniform(vec![cfg.node_dim, cfg.mgf_dim], 0.1, &mut rng),
                )
                .expect("fresh path");
        }

        mat(&mut store, &mut rng, "dynamics/reward/w", cfg.pooled_dim(), 1);
        zero_row(&mut store, "dynamics/reward/b", 1);

        Self { store, cfg }
    }

    /// Bind every parameter onto a tape. One bind per tape.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundDynamics {
        let get = |tape: &mut Tape, path: &str| {
            self.store
                .bind(tape, path, trainable)
                .expect("one bind per tape")
        };
        let cfg = self.cfg;
        let attn = if cfg.ablation.no_graph {
            None
        } else {
            Some(AttnVars {
                heads: (0..cfg.heads)
                    .map(|h| HeadVars {
                        wq: get(tape, &format!("dynamics/attn/h{h}/wq")),
                        wk: get(tape, &format!("dynamics/attn/h{h}/wk")),
                        wv: get(tape, &format!("dynamics/attn/h{h}/wv")),
                    })
                    .collect(),
                out_w: get(tape, "dynamics/attn/out/w"),
                out_b: get(tape, "dynamics/attn/out/b"),
                embed_w: get(tape, "dynamics/attn/embed/w"),
                embed_b: get(tape, "dynamics/attn/embed/b"),
            })
        };
        let mlp = if cfg.ablation.no_graph {
            Some(MlpVars {
                w1: get(tape, "dynamics/mlp/w1"),
                b1: get(tape, "dynamics/mlp/b1"),
                w2: get(tape, "dynamics/mlp/w2"),
                b2: get(tape, "dynamics/mlp/b2"),
            })
        } else {
            None
        };
        let gru = if cfg.ablation.no_rnn {
            None
        } else {
            Some(GruVars {
                wz: get(tape, "dynamics/gru/wz"),
                uz: get(tape, "dynamics/gru/uz"),
                bz: get(tape, "dynamics/gru/bz"),
                wr: get(tape, "dynamics/gru/wr"),
                ur: get(tape, "dynamics/gru/ur"),
                br: get(tape, "dynamics/gru/br"),
                wc: get(tape, "dynamics/gru/wc"),
                uc: get(tape, "dynamics/gru/uc"),
                bc: get(tape, "dynamics/gru/bc"),
            })
        };
        BoundDynamics {
            cfg,
            feat_scale: self
                .store
                .bind(tape, "dynamics/feat_norm/scale", false)
                .expect("one bind per tape"),
            feat_shift: self
                .store
                .bind(tape, "dynamics/feat_norm/shift", false)
                .expect("one bind per tape"),
            node_embed_w: get(tape, "dynamics/node_embed/w"),
            node_embed_b: get(tape, "dynamics/node_embed/b"),
            attn,
            mlp,
            gru,
            theta: if cfg.ablation.max_pool {
                None
            } else {
                Some(get(tape, "dynamics/mgf/theta"))
            },
            reward_w: get(tape, "dynamics/reward/w"),
            reward_b: get(tape, "dynamics/reward/b"),
        }
    }

    pub fn zero_belief(&self) -> Tensor {
        Tensor::zeros(vec![1, self.cfg.belief_dim])
    }

    /// Fit the fixed feature normalizer so inputs are standardized per
    /// dimension: `x = (v - mean) / std`.
    pub fn set_feature_normalizer(&mut self, means: &[f32], stds: &[f32]) {
        assert_eq!(means.len(), self.cfg.feat_dim);
        assert_eq!(stds.len(), self.cfg.feat_dim);
        let scale: Vec<f32> = stds.iter().map(|&s| 1.0 / s.max(1e-9)).collect();
        let shift: Vec<f32> = means
            .iter()
            .zip(&scale)
            .map(|(&m, &s)| -m * s)
            .collect();
        self.store
            .set(
                "dynamics/feat_norm/scale",
                Tensor::new(vec![1, self.cfg.feat_dim], scale),
            )
            .expect("path exists");
        self.store
            .set(
                "dynamics/feat_norm/shift",
                Tensor::new(vec![1, self.cfg.feat_dim], shift),
            )
            .expect("path exists");
    }
}

struct HeadVars {
    wq: Var,
    wk: Var,
    wv: Var,
}

struct AttnVars {
    heads: Vec<HeadVars>,
    out_w: Var,
    out_b: Var,
    embed_w: Var,
    embed_b: Var,
}

struct MlpVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

struct GruVars {
    wz: Var,
    uz: Var,
    bz: Var,
    wr: Var,
    ur: Var,
    br: Var,
    wc: Var,
    uc: Var,
    bc: Var,
}

/// Dynamics parameters bound onto one tape.
pub struct BoundDynamics {
    pub cfg: ModelConfig,
    feat_scale: Var,
    feat_shift: Var,
    node_embed_w: Var,
    node_embed_b: Var,
    attn: Option<AttnVars>,
    mlp: Option<MlpVars>,
    gru: Option<GruVars>,
    theta: Option<Var>,
    reward_w: Var,
    reward_b: Var,
}

/// Outputs of one dynamics step.
pub struct StepOutput {
    /// Next belief (`NoRNN`: the zero vector).
    pub belief: Var,
    /// Pooled prediction of the next state, `[1, pooled_dim]`.
    pub pooled: Var,
    /// Predicted next-step node features, `[K, node_dim]`.
    pub nodes_pred: Var,
    /// Head-averaged soft edges, `[K, K]`; absent under `NoGraph`.
    pub edges: Option<Var>,
}

/// Stack `k` copies of a `[1, d]` row.
fn tile_rows(tape: &mut Tape, row: Var, k: usize) -> Result<Var, TapeError> {
    if k == 1 {
        return Ok(row);
    }
    tape.concat(&vec![row; k], 0)
}

fn ones_row(tape: &mut Tape, k: usize) -> Var {
    tape.constant(Tensor::filled(vec![1, k], 1.0))
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var, rows: usize) -> Result<Var, TapeError> {
    let y = tape.matmul(x, w)?;
    let bias = tile_rows(tape, b, rows)?;
    tape.add(y, bias)
}

impl BoundDynamics {
    /// Map raw keypoint features `[K, feat_dim]` into node space:
    /// standardize with the fixed normalizer, then project.
    pub fn embed_nodes(&self, tape: &mut Tape, feats: Var) -> Result<Var, DynamicsError> {
        let shape = tape.value(feats).shape().to_vec();
        if shape[1] != self.cfg.feat_dim {
            return Err(DynamicsError::FeatureDimMismatch {
                expected: self.cfg.feat_dim,
                got: shape[1],
            });
        }
        let k = shape[0];
        let scale = tile_rows(tape, self.feat_scale, k)?;
        let shift = tile_rows(tape, self.feat_shift, k)?;
        let scaled = tape.mul(feats, scale)?;
        let standardized = tape.add(scaled, shift)?;
        Ok(affine(
            tape,
            standardized,
            self.node_embed_w,
            self.node_embed_b,
            k,
        )?)
    }

    /// Attention graph convolution over the fully connected node set.
    ///
    /// Per head, `w = softmax(Q K^T / sqrt(d_k))`; node outputs are the
    /// output-projected concatenation of per-head attention sums plus a
    /// linear embedding of the input as residual. Returns the node outputs
    /// and the head-averaged soft-edge matrix.
    pub fn tgconv(&self, tape: &mut Tape, u: Var) -> Result<(Var, Var), DynamicsError> {
        let attn = self.attn.as_ref().expect("tgconv requires graph mode");
        let k = tape.value(u).shape()[0];
        let scale = 1.0 / (self.cfg.head_dim as f32).sqrt();
        let mut head_outs = Vec::with_capacity(attn.heads.len());
        let mut edge_sum: Option<Var> = None;
        for head in &attn.heads {
            let q = tape.matmul(u, head.wq)?;
            let key = tape.matmul(u, head.wk)?;
            let val = tape.matmul(u, head.wv)?;
            let key_t = tape.transpose(key)?;
            let raw = tape.matmul(q, key_t)?;
            let logits = tape.scale(raw, scale);
            let weights = tape.softmax(logits)?;
            head_outs.push(tape.matmul(weights, val)?);
            edge_sum = Some(match edge_sum {
                Some(acc) => tape.add(acc, weights)?,
                None => weights,
            });
        }
        let concat = tape.concat(&head_outs, 1)?;
        let proj = affine(tape, concat, attn.out_w, attn.out_b, k)?;
        let res = affine(tape, u, attn.embed_w, attn.embed_b, k)?;
        let out = tape.add(proj, res)?;
        let edges = tape.scale(edge_sum.expect("at least one head"), 1.0 / attn.heads.len() as f32);
        Ok((out, edges))
    }

    fn per_node_mlp(&self, tape: &mut Tape, u: Var) -> Result<Var, DynamicsError> {
        let mlp = self.mlp.as_ref().expect("mlp requires NoGraph mode");
        let k = tape.value(u).shape()[0];
        let hidden = affine(tape, u, mlp.w1, mlp.b1, k)?;
        let act = tape.relu(hidden);
        Ok(affine(tape, act, mlp.w2, mlp.b2, k)?)
    }

    /// Pool node outputs `[K, node_dim]` to `[1, pooled_dim]`: the mean
    /// concatenated with `sum_i exp(clamp(theta_c . v_i))` per MGF column.
    /// Under `MaxPool`, the elementwise max over nodes instead.
    pub fn pool(&self, tape: &mut Tape, nodes: Var) -> Result<Var, DynamicsError> {
        let k = tape.value(nodes).shape()[0];
        if self.cfg.ablation.max_pool {
            let mut acc = tape.slice(nodes, 0, 0, 1)?;
            for i in 1..k {
                let row = tape.slice(nodes, 0, i, 1)?;
                acc = tape.maximum(acc, row)?;
            }
            return Ok(acc);
        }
        let ones = ones_row(tape, k);
        let sum = tape.matmul(ones, nodes)?;
        let mean = tape.scale(sum, 1.0 / k as f32);
        let theta = self.theta.expect("MGF pooling has theta");
        let dots = tape.matmul(nodes, theta)?;
        let clamped = tape.clamp(dots, -MGF_CLAMP, MGF_CLAMP);
        let exps = tape.exp(clamped);
        let mgf = tape.matmul(ones, exps)?;
        Ok(tape.concat(&[mean, mgf], 1)?)
    }

    /// Gated recurrent belief update conditioned on the pooled features.
    pub fn belief_update(&self, tape: &mut Tape, h: Var, pooled: Var) -> Result<Var, DynamicsError> {
        let gru = self.gru.as_ref().expect("belief_update requires RNN mode");
        let pz = tape.matmul(pooled, gru.wz)?;
        let hz = tape.matmul(h, gru.uz)?;
        let z_lin = tape.add(pz, hz)?;
        let z_aff = tape.add(z_lin, gru.bz)?;
        let z = tape.sigmoid(z_aff);
        let pr = tape.matmul(pooled, gru.wr)?;
        let hr = tape.matmul(h, gru.ur)?;
        let r_lin = tape.add(pr, hr)?;
        let r_aff = tape.add(r_lin, gru.br)?;
        let r = tape.sigmoid(r_aff);
        let rh = tape.mul(r, h)?;
        let pc = tape.matmul(pooled, gru.wc)?;
        let hc = tape.matmul(rh, gru.uc)?;
        let c_lin = tape.add(pc, hc)?;
        let c_aff = tape.add(c_lin, gru.bc)?;
        let cand = tape.tanh(c_aff);
        let neg_z = tape.scale(z, -1.0);
        let keep = tape.add_scalar(neg_z, 1.0);
        let kept = tape.mul(keep, h)?;
        let new = tape.mul(z, cand)?;
        Ok(tape.add(kept, new)?)
    }

    /// Scalar affine reward head on the pooled features.
    pub fn predict_reward(&self, tape: &mut Tape, pooled: Var) -> Result<Var, DynamicsError> {
        Ok(affine(tape, pooled, self.reward_w, self.reward_b, 1)?)
    }

    /// One dynamics step from node features in node space.
    pub fn step(
        &self,
        tape: &mut Tape,
        h: Var,
        nodes: Var,
        action: Var,
    ) -> Result<StepOutput, DynamicsError> {
        let shape = tape.value(nodes).shape().to_vec();
        if shape[0] != self.cfg.keypoints {
            return Err(DynamicsError::KeypointMismatch {
                expected: self.cfg.keypoints,
                got: shape[0],
            });
        }
        let k = shape[0];
        let action_rows = tile_rows(tape, action, k)?;
        let u = if self.cfg.ablation.no_rnn {
            tape.concat(&[nodes, action_rows], 1)?
        } else {
            let h_rows = tile_rows(tape, h, k)?;
            tape.concat(&[nodes, h_rows, action_rows], 1)?
        };
        let (nodes_pred, edges) = if self.cfg.ablation.no_graph {
            (self.per_node_mlp(tape, u)?, None)
        } else {
            let (v, e) = self.tgconv(tape, u)?;
            (v, Some(e))
        };
        let pooled = self.pool(tape, nodes_pred)?;
        let belief = if self.cfg.ablation.no_rnn {
            tape.constant(Tensor::zeros(vec![1, self.cfg.belief_dim]))
        } else {
            self.belief_update(tape, h, pooled)?
        };
        Ok(StepOutput {
            belief,
            pooled,
            nodes_pred,
            edges,
        })
    }

    /// Embed raw keypoint features and pool them: the encoded state that
    /// predictions are trained to match.
    pub fn encode(&self, tape: &mut Tape, feats: Var) -> Result<(Var, Var), DynamicsError> {
        let nodes = self.embed_nodes(tape, feats)?;
        let pooled = self.pool(tape, nodes)?;
        Ok((nodes, pooled))
    }
}

/// Goal-oriented reward: negative Euclidean distance between pooled states.
pub fn goal_reward(pooled: &[f32], goal: &[f32]) -> Result<f32, DynamicsError> {
    if pooled.len() != goal.len() {
        return Err(DynamicsError::PooledDimMismatch(pooled.len(), goal.len()));
    }
    let mut acc = 0.0f64;
    for (&a, &b) in pooled.iter().zip(goal) {
        let d = a as f64 - b as f64;
        acc += d * d;
    }
    Ok(-(acc.sqrt()) as f32)
}
