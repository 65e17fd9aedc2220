//! Transformer that maps in-image pedestrian motion plus the previous
//! on-ground estimates to the observer's ego-motion and the pedestrians'
//! positions and velocities.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{load_checkpoint, save_checkpoint, ParamStore, Tape, Tensor, Var};
use crate::egoview::{build_attention_mask, AttentionMask, QueryRow};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub mlp_hidden: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_hidden: usize,
    pub use_layer_norm: bool,
    pub use_relative_transform: bool,
    /// Motion-only variant: no image encoder, no cross-attention, no ego
    /// head; queries and outputs in world coordinates.
    pub motion_only: bool,
    pub layer_norm_eps: f64,
    /// Metres per unit for positions fed to and read from the network.
    pub position_scale: f64,
    /// Metres per frame per unit for on-ground velocities and translations.
    pub velocity_scale: f64,
    /// Radians per unit for heading increments.
    pub angle_scale: f64,
    /// Normalized image units per unit for in-image displacements.
    pub image_velocity_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            mlp_hidden: 16,
            heads: 8,
            encoder_layers: 1,
            decoder_layers: 1,
            ffn_hidden: 64,
            use_layer_norm: true,
            use_relative_transform: true,
            motion_only: false,
            layer_norm_eps: 1e-5,
            position_scale: 5.0,
            velocity_scale: 0.5,
            angle_scale: 0.1,
            image_velocity_scale: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn motion_only() -> Self {
        Self {
            motion_only: true,
            use_relative_transform: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.mlp_hidden == 0 || self.ffn_hidden == 0 {
            return Err(Error::InvalidArgument("hidden sizes must be positive".into()));
        }
        let scales = [
            self.position_scale,
            self.velocity_scale,
            self.angle_scale,
            self.image_velocity_scale,
            self.layer_norm_eps,
        ];
        if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument("scales must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Whether pedestrian queries and outputs live in the previous camera
    /// frame rather than in world coordinates.
    pub fn relative_frame(&self) -> bool {
        self.use_relative_transform && !self.motion_only
    }
}

/// Network weights plus the configuration that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Tensor { rows, cols, data }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (d, h, f) = (config.d_model, config.mlp_hidden, config.ffn_hidden);
        let mlp = |p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dims: [usize; 3]| {
            p.insert(&format!("{name}.w1"), glorot(rng, dims[0], dims[1]));
            p.insert(&format!("{name}.b1"), Tensor::zeros(1, dims[1]));
            p.insert(&format!("{name}.w2"), glorot(rng, dims[1], dims[2]));
            p.insert(&format!("{name}.b2"), Tensor::zeros(1, dims[2]));
        };
        let attn = |p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str| {
            for w in ["wq", "wk", "wv", "wo"] {
                p.insert(&format!("{name}.{w}"), glorot(rng, d, d));
            }
        };
        let norm = |p: &mut ParamStore, name: &str| {
            p.insert(&format!("{name}.g"), Tensor::filled(1, d, 1.0));
            p.insert(&format!("{name}.b"), Tensor::zeros(1, d));
        };
        mlp(&mut p, &mut rng, "embed_ped", [4, h, d]);
        if !config.motion_only {
            mlp(&mut p, &mut rng, "embed_state", [4, h, d]);
            mlp(&mut p, &mut rng, "embed_ego", [3, h, d]);
            for l in 0..config.encoder_layers {
                attn(&mut p, &mut rng, &format!("enc{l}.attn"));
                norm(&mut p, &format!("enc{l}.ln1"));
                mlp(&mut p, &mut rng, &format!("enc{l}.ffn"), [d, f, d]);
                norm(&mut p, &format!("enc{l}.ln2"));
            }
        }
        for l in 0..config.decoder_layers {
            attn(&mut p, &mut rng, &format!("dec{l}.self"));
            norm(&mut p, &format!("dec{l}.ln1"));
            if !config.motion_only {
                attn(&mut p, &mut rng, &format!("dec{l}.cross"));
                norm(&mut p, &format!("dec{l}.ln2"));
            }
            mlp(&mut p, &mut rng, &format!("dec{l}.ffn"), [d, f, d]);
            norm(&mut p, &format!("dec{l}.ln3"));
        }
        if !config.motion_only {
            p.insert("head_ego.w", glorot(&mut rng, d, 3));
            p.insert("head_ego.b", Tensor::zeros(1, 3));
        }
        mlp(&mut p, &mut rng, "head_traj", [d, h, 4]);
        Ok(Self { config, params: p })
    }

    /// Registers the weights on `tape` for one forward pass (or a window of
    /// them).
    pub fn bind(&self, tape: &mut Tape) -> Net<'_> {
        Net {
            model: self,
            vars: self.params.register(tape),
        }
    }

    /// Binds with caller-registered weight handles, one per parameter in
    /// store order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<Net<'_>> {
        if vars.len() != self.params.len() {
            return Err(Error::LengthMismatch(self.params.len(), vars.len()));
        }
        Ok(Net { model: self, vars })
    }

    pub fn to_checkpoint(&self) -> Result<String> {
        save_checkpoint(&self.params, serde_json::to_value(&self.config)?)
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let (params, cfg) = load_checkpoint(text)?;
        let config: ModelConfig =
            serde_json::from_value(cfg).map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
        let reference = Model::new(config.clone(), 0)?;
        for name in reference.params.names() {
            let want = reference.params.get(name).map(Tensor::shape);
            if params.get(name).map(Tensor::shape) != want {
                return Err(Error::Checkpoint(format!("parameter {name} missing or misshapen")));
            }
        }
        // Re-insert in construction order so the binding layout is stable.
        let mut ordered = ParamStore::new();
        for name in reference.params.names() {
            ordered.insert(name, params.get(name).cloned().expect("checked above"));
        }
        Ok(Self {
            config,
            params: ordered,
        })
    }

    /// Forward pass without keeping the tape.
    pub fn predict(&self, inputs: &FrameInputs) -> Result<FramePrediction> {
        let mut tape = Tape::new();
        let net = self.bind(&mut tape);
        let out = net.forward(&mut tape, inputs)?;
        Ok(FramePrediction {
            ego: out.ego.map(|v| {
                let t = tape.value(v);
                [t.data[0], t.data[1], t.data[2]]
            }),
            traj: tape.value(out.traj).clone(),
            low_confidence: out.low_confidence,
        })
    }
}

/// Inputs for one frame, in physical units.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameInputs {
    /// `N x 4` in-image states `(p_x, p_y, dp_x, dp_y)`; ignored by the
    /// motion-only variant.
    pub states: Tensor,
    /// Previous ego-motion estimate `(d_cx, d_cy, d_theta)`.
    pub ego_query: [f64; 3],
    /// `N x 4` previous positions and velocities, row-aligned with `states`.
    pub ped_queries: Tensor,
    /// Per-row visibility; `None` means every row is visible.
    pub visible: Option<Vec<bool>>,
}

/// Tape handles of one forward pass, in physical units.
#[derive(Clone, Copy, Debug)]
pub struct FrameOutputs {
    /// `1 x 3` ego-motion `(d_cx, d_cy, d_theta)`; absent for the
    /// motion-only variant.
    pub ego: Option<Var>,
    /// `N x 4` positions and velocities.
    pub traj: Var,
    /// No visible pedestrian informed the ego estimate.
    pub low_confidence: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FramePrediction {
    pub ego: Option<[f64; 3]>,
    pub traj: Tensor,
    pub low_confidence: bool,
}

/// Attention masks of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMasks {
    pub encoder: AttentionMask,
    pub decoder_self: AttentionMask,
    pub cross: AttentionMask,
}

impl FrameMasks {
    /// Builds the masks for `n` pedestrian rows; the ego query is the first
    /// decoder row when `with_ego`.
    pub fn from_visibility(visible: &[bool], with_ego: bool) -> Self {
        let ids: Vec<u64> = (0..visible.len() as u64).collect();
        let vis: BTreeSet<u64> = ids.iter().copied().filter(|&i| visible[i as usize]).collect();
        let ped_rows: Vec<QueryRow> = ids.iter().map(|&i| QueryRow::Pedestrian(i)).collect();
        let mut dec_rows = Vec::with_capacity(ids.len() + 1);
        if with_ego {
            dec_rows.push(QueryRow::Camera);
        }
        dec_rows.extend(ped_rows.iter().copied());
        let encoder = build_attention_mask(&vis, &ped_rows, &ids);
        let cross = build_attention_mask(&vis, &dec_rows, &ids);
        // The ego query is a key as well as a query in decoder self-attention.
        let dec_vis = |r: &QueryRow| match r {
            QueryRow::Camera => true,
            QueryRow::Pedestrian(i) => vis.contains(i),
        };
        let decoder_self =
            AttentionMask::from_fn(dec_rows.len(), dec_rows.len(), |i, j| dec_vis(&dec_rows[i]) && dec_vis(&dec_rows[j]));
        Self {
            encoder,
            decoder_self,
            cross,
        }
    }
}

fn mask_tensor(m: &AttentionMask) -> Option<Tensor> {
    if m.is_all_visible() {
        None
    } else {
        Some(Tensor {
            rows: m.rows,
            cols: m.cols,
            data: m.as_f64(),
        })
    }
}

/// A model bound to a tape.
pub struct Net<'m> {
    model: &'m Model,
    vars: Vec<Var>,
}

impl Net<'_> {
    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    pub fn param(&self, name: &str) -> Var {
        let i = self
            .model
            .params
            .position(name)
            .unwrap_or_else(|| panic!("parameter {name} not present"));
        self.vars[i]
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    fn linear(&self, tape: &mut Tape, x: Var, w: &str, b: &str) -> Result<Var> {
        let y = tape.matmul(x, self.param(w))?;
        tape.add(y, self.param(b))
    }

    /// Two-layer perceptron with a ReLU between the layers.
    pub fn mlp(&self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let h = self.linear(tape, x, &format!("{name}.w1"), &format!("{name}.b1"))?;
        let h = tape.relu(h);
        self.linear(tape, h, &format!("{name}.w2"), &format!("{name}.b2"))
    }

    fn scale_cols(&self, tape: &mut Tape, x: Var, factors: &[f64]) -> Result<Var> {
        let f = tape.leaf(Tensor::row(factors));
        tape.mul(x, f)
    }

    /// Rowwise embedding of the in-image states, `N x d`.
    pub fn embed_states(&self, tape: &mut Tape, states: &Tensor) -> Result<Var> {
        let c = self.config();
        let s = tape.leaf(states.clone());
        let iv = 1.0 / c.image_velocity_scale;
        let s = self.scale_cols(tape, s, &[1.0, 1.0, iv, iv])?;
        self.mlp(tape, s, "embed_state")
    }

    /// Query matrix: the ego query first (unless motion-only), then one row
    /// per pedestrian.
    pub fn build_queries(&self, tape: &mut Tape, ego: [f64; 3], peds: &Tensor) -> Result<Var> {
        let c = self.config();
        let (ip, iv) = (1.0 / c.position_scale, 1.0 / c.velocity_scale);
        let p = tape.leaf(peds.clone());
        let p = self.scale_cols(tape, p, &[ip, ip, iv, iv])?;
        let q_ped = self.mlp(tape, p, "embed_ped")?;
        if c.motion_only {
            return Ok(q_ped);
        }
        let e = tape.leaf(Tensor::row(&ego));
        let e = self.scale_cols(tape, e, &[iv, iv, 1.0 / c.angle_scale])?;
        let q_ego = self.mlp(tape, e, "embed_ego")?;
        if peds.rows == 0 {
            return Ok(q_ego);
        }
        tape.concat_rows(&[q_ego, q_ped])
    }

    /// Multi-head scaled dot-product attention from `target` rows to
    /// `source` rows. Masked weights are zeroed and the surviving ones
    /// re-normalized.
    pub fn multi_head_attention(
        &self,
        tape: &mut Tape,
        name: &str,
        target: Var,
        source: Var,
        mask: Option<&Tensor>,
    ) -> Result<Var> {
        let (nt, ns) = (tape.shape(target).0, tape.shape(source).0);
        if let Some(m) = mask {
            if m.shape() != (nt, ns) {
                return Err(Error::ShapeMismatch {
                    op: "attention mask",
                    lhs: m.shape(),
                    rhs: (nt, ns),
                });
            }
        }
        let c = self.config();
        let dk = c.head_dim();
        let q = tape.matmul(target, self.param(&format!("{name}.wq")))?;
        let k = tape.matmul(source, self.param(&format!("{name}.wk")))?;
        let v = tape.matmul(source, self.param(&format!("{name}.wv")))?;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(c.heads);
        for h in 0..c.heads {
            let qh = tape.slice_cols(q, h * dk, dk)?;
            let kh = tape.slice_cols(k, h * dk, dk)?;
            let vh = tape.slice_cols(v, h * dk, dk)?;
            let kt = tape.transpose(kh);
            let logits = tape.matmul(qh, kt)?;
            let logits = tape.scale(logits, scale);
            let mut a = tape.softmax_rows(logits);
            if let Some(m) = mask {
                a = tape.masked_hadamard(a, m)?;
                a = tape.renormalize_masked_rows(a, m)?;
            }
            heads.push(tape.matmul(a, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        tape.matmul(cat, self.param(&format!("{name}.wo")))
    }

    fn residual_norm(&self, tape: &mut Tape, x: Var, update: Var, name: &str) -> Result<Var> {
        let y = tape.add(x, update)?;
        if !self.config().use_layer_norm {
            return Ok(y);
        }
        let n = tape.layer_norm_rows(y, self.config().layer_norm_eps);
        let n = tape.mul(n, self.param(&format!("{name}.g")))?;
        tape.add(n, self.param(&format!("{name}.b")))
    }

    /// Self-attention plus feed-forward over the in-image features.
    pub fn encode(&self, tape: &mut Tape, feats: Var, mask: &AttentionMask) -> Result<Var> {
        if tape.shape(feats).0 == 0 {
            return Ok(feats);
        }
        let m = mask_tensor(mask);
        let mut h = feats;
        for l in 0..self.config().encoder_layers {
            let a = self.multi_head_attention(tape, &format!("enc{l}.attn"), h, h, m.as_ref())?;
            h = self.residual_norm(tape, h, a, &format!("enc{l}.ln1"))?;
            let f = self.mlp(tape, h, &format!("enc{l}.ffn"))?;
            h = self.residual_norm(tape, h, f, &format!("enc{l}.ln2"))?;
        }
        Ok(h)
    }

    /// Decoder self-attention over the queries, cross-attention into the
    /// encoded features (skipped for the motion-only variant or when no
    /// pedestrian is present), then feed-forward.
    pub fn decode(&self, tape: &mut Tape, queries: Var, memory: Option<Var>, masks: &FrameMasks) -> Result<Var> {
        let self_mask = mask_tensor(&masks.decoder_self);
        let cross_mask = mask_tensor(&masks.cross);
        let mut x = queries;
        for l in 0..self.config().decoder_layers {
            let a = self.multi_head_attention(tape, &format!("dec{l}.self"), x, x, self_mask.as_ref())?;
            x = self.residual_norm(tape, x, a, &format!("dec{l}.ln1"))?;
            if !self.config().motion_only {
                let cross = match memory {
                    Some(h) if tape.shape(h).0 > 0 => {
                        self.multi_head_attention(tape, &format!("dec{l}.cross"), x, h, cross_mask.as_ref())?
                    }
                    _ => {
                        let (r, c) = tape.shape(x);
                        tape.leaf(Tensor::zeros(r, c))
                    }
                };
                x = self.residual_norm(tape, x, cross, &format!("dec{l}.ln2"))?;
            }
            let f = self.mlp(tape, x, &format!("dec{l}.ffn"))?;
            x = self.residual_norm(tape, x, f, &format!("dec{l}.ln3"))?;
        }
        Ok(x)
    }

    /// Task heads on the decoded rows: `(ego 1 x 3, trajectories N x 4)` in
    /// physical units.
    pub fn heads(&self, tape: &mut Tape, decoded: Var) -> Result<(Option<Var>, Var)> {
        let c = self.config();
        let (rows, _) = tape.shape(decoded);
        let (ego, ped_rows) = if c.motion_only {
            (None, decoded)
        } else {
            let e = tape.slice_rows(decoded, 0, 1)?;
            let e = self.linear(tape, e, "head_ego.w", "head_ego.b")?;
            let e = self.scale_cols(tape, e, &[c.velocity_scale, c.velocity_scale, c.angle_scale])?;
            (Some(e), tape.slice_rows(decoded, 1, rows - 1)?)
        };
        let t = self.mlp(tape, ped_rows, "head_traj")?;
        let (p, v) = (c.position_scale, c.velocity_scale);
        let t = self.scale_cols(tape, t, &[p, p, v, v])?;
        Ok((ego, t))
    }

    pub fn forward(&self, tape: &mut Tape, inputs: &FrameInputs) -> Result<FrameOutputs> {
        let c = self.config();
        let n = inputs.ped_queries.rows;
        if inputs.ped_queries.cols != 4 {
            return Err(Error::ShapeMismatch {
                op: "pedestrian queries",
                lhs: inputs.ped_queries.shape(),
                rhs: (n, 4),
            });
        }
        if !c.motion_only && inputs.states.shape() != (n, 4) {
            return Err(Error::ShapeMismatch {
                op: "in-image states",
                lhs: inputs.states.shape(),
                rhs: (n, 4),
            });
        }
        let visible = inputs.visible.clone().unwrap_or_else(|| vec![true; n]);
        if visible.len() != n {
            return Err(Error::LengthMismatch(visible.len(), n));
        }
        let masks = FrameMasks::from_visibility(&visible, !c.motion_only);
        let memory = if c.motion_only || n == 0 {
            None
        } else {
            let f = self.embed_states(tape, &inputs.states)?;
            Some(self.encode(tape, f, &masks.encoder)?)
        };
        let q = self.build_queries(tape, inputs.ego_query, &inputs.ped_queries)?;
        let decoded = self.decode(tape, q, memory, &masks)?;
        let (ego, traj) = if n == 0 && c.motion_only {
            (None, tape.leaf(Tensor::zeros(0, 4)))
        } else {
            self.heads(tape, decoded)?
        };
        let low_confidence = !c.motion_only && !visible.iter().any(|&v| v);
        Ok(FrameOutputs {
            ego,
            traj,
            low_confidence,
        })
    }
}
