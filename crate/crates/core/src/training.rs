//! Multi-task losses, curriculum schedule and the training loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, clip_grad_norm, AdamState, Tape, Tensor, Var};
use crate::crowdsim::Scene;
use crate::egoview::{synthesize_observations, ObservationSequence};
use crate::error::{Error, Result};
use crate::geometry::{compose_pose, normalize_angle, CameraIntrinsics, Pose, PoseDelta, Vec2};
use crate::inference::{apply_entry_history, decode_row, prepare_frame, RolloutState, TrackEstimate};
use crate::model::{Model, ModelConfig, Net};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    IntraScene,
    CrossScene,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Epochs during which the reprojection term is switched off.
    pub curriculum_epochs: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub teacher_forcing: bool,
    /// With teacher forcing on, switch to the model's own rollout from this
    /// epoch on.
    pub rollout_after: Option<usize>,
    /// Frames per optimizer step.
    pub window: usize,
    pub split: SplitMode,
    /// Depth below which the reprojection term is clamped and penalized (m).
    pub min_depth: f64,
    pub depth_penalty: f64,
    /// Joint gradient norm cap per step; zero disables clipping.
    pub grad_clip: f64,
    /// Learning rate at the last epoch as a fraction of `lr`, reached by
    /// cosine decay. One keeps the rate constant.
    pub lr_final_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.3,
            curriculum_epochs: 200,
            lr: crate::autodiff::DEFAULT_LEARNING_RATE,
            epochs: 400,
            seed: 0,
            teacher_forcing: true,
            rollout_after: None,
            window: 8,
            split: SplitMode::IntraScene,
            min_depth: 0.1,
            depth_penalty: 100.0,
            grad_clip: 10.0,
            lr_final_fraction: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::InvalidArgument("loss weights must be non-negative".into()));
        }
        if self.curriculum_epochs > self.epochs {
            return Err(Error::InvalidArgument(format!(
                "curriculum of {} epochs exceeds the {} training epochs",
                self.curriculum_epochs, self.epochs
            )));
        }
        if self.window == 0 || !(self.lr > 0.0) || !(self.min_depth > 0.0) {
            return Err(Error::InvalidArgument("window, learning rate and minimum depth must be positive".into()));
        }
        if !(self.grad_clip >= 0.0) || !(self.lr_final_fraction > 0.0 && self.lr_final_fraction <= 1.0) {
            return Err(Error::InvalidArgument("gradient clip must be non-negative and the final rate fraction in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.lr;
        }
        let progress = epoch as f64 / (self.epochs - 1) as f64;
        let floor = self.lr * self.lr_final_fraction;
        floor + 0.5 * (self.lr - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    pub fn teacher_forcing_at(&self, epoch: usize) -> bool {
        self.teacher_forcing && self.rollout_after.is_none_or(|n| epoch < n)
    }

    /// Reprojection weight in effect during `epoch`.
    pub fn lambda2_at(&self, epoch: usize) -> f64 {
        if epoch < self.curriculum_epochs {
            0.0
        } else {
            self.lambda2
        }
    }
}

/// One observer sequence with the ground truth needed for supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub seq: ObservationSequence,
    /// True position and last displacement of every candidate pedestrian,
    /// per sequence frame.
    pub truth: Vec<BTreeMap<u64, TrackEstimate>>,
}

impl Episode {
    pub fn from_scene(scene: &Scene, observer_id: u64, intr: &CameraIntrinsics<f64>, noise: f64, seed: u64) -> Result<Self> {
        let seq = synthesize_observations(scene, observer_id, intr, noise, seed)?;
        Ok(Self::with_sequence(scene, seq))
    }

    pub fn with_sequence(scene: &Scene, seq: ObservationSequence) -> Self {
        let truth = seq
            .frames
            .iter()
            .map(|f| {
                f.candidates
                    .iter()
                    .filter_map(|&id| {
                        let t = scene.track(id)?;
                        Some((
                            id,
                            TrackEstimate {
                                position: t.position_at(f.frame)?,
                                velocity: t.velocity_at(f.frame)?,
                            },
                        ))
                    })
                    .collect()
            })
            .collect();
        Self { seq, truth }
    }

    /// Every observer of a scene that is tracked for at least two frames.
    pub fn all_observers(scene: &Scene, intr: &CameraIntrinsics<f64>, noise: f64, seed: u64) -> Result<Vec<Self>> {
        scene
            .tracks
            .iter()
            .filter(|t| t.len() >= 2)
            .map(|t| Self::from_scene(scene, t.ped_id, intr, noise, seed.wrapping_add(t.ped_id)))
            .collect()
    }

    pub fn true_delta(&self, k: usize) -> PoseDelta<f64> {
        PoseDelta::between(&self.seq.observer_truth[k - 1], &self.seq.observer_truth[k])
    }

    /// Ground-truth query state for frame `k`: the true previous pose and
    /// ego-motion, and the pedestrians visible at `k - 1`. Velocities and
    /// ego-motion are zero at the first frame, as at inference.
    pub fn teacher_state(&self, k: usize) -> RolloutState {
        let prev = k - 1;
        let tracks = self.seq.frames[prev]
            .visible_ids()
            .into_iter()
            .filter_map(|id| {
                let mut t = *self.truth[prev].get(&id)?;
                if prev == 0 {
                    t.velocity = Vec2::zero();
                }
                Some((id, t))
            })
            .collect();
        RolloutState {
            pose: self.seq.observer_truth[prev],
            delta: if prev == 0 { PoseDelta::zero() } else { self.true_delta(prev) },
            tracks,
        }
    }
}

/// Squared error of a `1 x 3` ego-motion prediction, heading difference
/// wrapped to `(-pi, pi]`.
pub fn loss_ego(tape: &mut Tape, pred: Var, truth: &PoseDelta<f64>) -> Result<Var> {
    let p = tape.value(pred);
    let diff = p.data[2] - truth.d_theta;
    // Shifting the target by a multiple of 2 pi is constant for the tape.
    let target_theta = truth.d_theta + (diff - normalize_angle(diff));
    let target = tape.leaf(Tensor::row(&[truth.d_cx, truth.d_cy, target_theta]));
    let d = tape.sub(pred, target)?;
    let sq = tape.square(d);
    Ok(tape.sum_all(sq))
}

fn rotation_tensor(pose: &Pose<f64>) -> Tensor {
    let r = pose.rotation().m;
    Tensor::from_vec(2, 2, vec![r[0][0], r[0][1], r[1][0], r[1][1]]).expect("2x2")
}

/// World positions `(N x 2)` and velocities of a trajectory-head output.
/// Relative outputs are mapped back with `R^T (x~ - t)` and `R^T dx~` at
/// the previous pose; row vectors multiply `R` on the right.
fn world_rows(tape: &mut Tape, pred: Var, prev: &Pose<f64>, relative: bool) -> Result<(Var, Var)> {
    let n = tape.shape(pred).0;
    let x = tape.slice_cols(pred, 0, 2)?;
    let v = tape.slice_cols(pred, 2, 2)?;
    if !relative || n == 0 {
        return Ok((x, v));
    }
    let r = tape.leaf(rotation_tensor(prev));
    let t = prev.translation();
    let t = tape.leaf(Tensor::row(&[t.x, t.y]));
    let shifted = tape.sub(x, t)?;
    Ok((tape.matmul(shifted, r)?, tape.matmul(v, r)?))
}

/// Squared position plus velocity error in world coordinates of an
/// `N x 4` trajectory output against `N x 4` world truth.
pub fn loss_traj(tape: &mut Tape, pred: Var, truth: &Tensor, prev: &Pose<f64>, relative: bool) -> Result<Var> {
    if tape.shape(pred) != truth.shape() {
        return Err(Error::ShapeMismatch {
            op: "loss_traj",
            lhs: tape.shape(pred),
            rhs: truth.shape(),
        });
    }
    let (x, v) = world_rows(tape, pred, prev, relative)?;
    let w = tape.concat_cols(&[x, v])?;
    let t = tape.leaf(truth.clone());
    let d = tape.sub(w, t)?;
    let sq = tape.square(d);
    Ok(tape.sum_all(sq))
}

/// Observed centres and pedestrian heights of the rows of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ReprojTarget {
    /// `N x 2` observed box centres.
    pub observed: Tensor,
    pub heights: Vec<f64>,
}

/// Squared image distance between observed centres and the projections of
/// the predicted mid-height points at the predicted pose. Depths below
/// `min_depth` are clamped and charged `penalty * (min_depth - depth)^2`.
#[allow(clippy::too_many_arguments)]
pub fn loss_reproj(
    tape: &mut Tape,
    pred: Var,
    ego: Var,
    target: &ReprojTarget,
    prev: &Pose<f64>,
    relative: bool,
    intr: &CameraIntrinsics<f64>,
    min_depth: f64,
    penalty: f64,
) -> Result<Var> {
    let n = tape.shape(pred).0;
    if n == 0 {
        return Ok(tape.leaf(Tensor::scalar(0.0)));
    }
    let x = tape.slice_cols(pred, 0, 2)?;
    // Points in the previous camera frame.
    let rel = if relative {
        x
    } else {
        let rt = tape.leaf(rotation_tensor(prev).transpose());
        let t = prev.translation();
        let t = tape.leaf(Tensor::row(&[t.x, t.y]));
        let rx = tape.matmul(x, rt)?;
        tape.add(rx, t)?
    };
    let theta = tape.slice_cols(ego, 2, 1)?;
    let (c, s) = (tape.cos(theta), tape.sin(theta));
    let dtx = tape.slice_cols(ego, 0, 1)?;
    let dty = tape.slice_cols(ego, 1, 1)?;
    let x0 = tape.slice_cols(rel, 0, 1)?;
    let x1 = tape.slice_cols(rel, 1, 1)?;
    let (cx0, sx1) = (tape.mul(x0, c)?, tape.mul(x1, s)?);
    let (sx0, cx1) = (tape.mul(x0, s)?, tape.mul(x1, c)?);
    let lateral = tape.sub(cx0, sx1)?;
    let lateral = tape.add(lateral, dtx)?;
    let depth = tape.add(sx0, cx1)?;
    let depth = tape.add(depth, dty)?;
    let clamped = tape.clamp_min(depth, min_depth);
    let neg = tape.scale(depth, -1.0);
    let short = tape.add_scalar(neg, min_depth);
    let short = tape.relu(short);
    let short = tape.square(short);
    let hinge = tape.sum_all(short);
    let hinge = tape.scale(hinge, penalty);

    let a = &intr.matrix_a;
    let yc: Vec<f64> = target.heights.iter().map(|h| intr.height_cz - h / 2.0).collect();
    let yc = tape.leaf(Tensor::from_vec(n, 1, yc)?);
    let x_over_z = tape.div(lateral, clamped)?;
    let y_over_z = tape.div(yc, clamped)?;
    let px = tape.scale(x_over_z, a[0][0]);
    let px_skew = tape.scale(y_over_z, a[0][1]);
    let px = tape.add(px, px_skew)?;
    let px = tape.add_scalar(px, a[0][2]);
    let py = tape.scale(y_over_z, a[1][1]);
    let py = tape.add_scalar(py, a[1][2]);
    let proj = tape.concat_cols(&[px, py])?;
    let obs = tape.leaf(target.observed.clone());
    let d = tape.sub(proj, obs)?;
    let sq = tape.square(d);
    let fit = tape.sum_all(sq);
    tape.add(fit, hinge)
}

/// Scalar loss components of one or more frames.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l_traj: f64,
    pub l_ego: f64,
    pub l_proj: f64,
}

/// `L_traj + lambda1 L_ego + lambda2(epoch) L_proj` on the tape.
pub fn total_loss(tape: &mut Tape, traj: Var, ego: Var, proj: Var, epoch: usize, cfg: &TrainConfig) -> Result<Var> {
    let e = tape.scale(ego, cfg.lambda1);
    let p = tape.scale(proj, cfg.lambda2_at(epoch));
    let s = tape.add(traj, e)?;
    tape.add(s, p)
}

/// Tape handles of the loss terms of one frame.
#[derive(Clone, Copy, Debug)]
pub struct FrameLoss {
    pub traj: Var,
    pub ego: Var,
    pub proj: Var,
}

/// Forward pass for frame `k` from `state` and its loss terms. Returns the
/// rollout state the frame's own estimates imply, for use as the next
/// frame's queries when not teacher forcing.
pub fn frame_loss(
    net: &Net<'_>,
    tape: &mut Tape,
    episode: &Episode,
    k: usize,
    state: &RolloutState,
    cfg: &TrainConfig,
) -> Result<(FrameLoss, RolloutState)> {
    let mcfg = net.config().clone();
    let seq = &episode.seq;
    let frame = &seq.frames[k];
    let prepared = prepare_frame(&mcfg, seq, frame, state);
    let out = net.forward(tape, &prepared.inputs)?;
    let n = prepared.ids.len();
    let relative = mcfg.relative_frame();

    let truth_rows: Vec<[f64; 4]> = prepared
        .ids
        .iter()
        .map(|id| {
            let t = episode.truth[k].get(id).ok_or(Error::UnknownPedestrian(*id))?;
            Ok([t.position.x, t.position.y, t.velocity.x, t.velocity.y])
        })
        .collect::<Result<_>>()?;
    let zero = tape.leaf(Tensor::scalar(0.0));
    let traj = if n == 0 {
        zero
    } else {
        loss_traj(tape, out.traj, &Tensor::from_rows(&truth_rows, 4)?, &state.pose, relative)?
    };
    let (ego, proj) = match out.ego {
        Some(e) => {
            let le = loss_ego(tape, e, &episode.true_delta(k))?;
            let observed: Vec<[f64; 2]> = prepared
                .ids
                .iter()
                .map(|id| {
                    let c = frame.states[id].center();
                    [c.x, c.y]
                })
                .collect();
            let target = ReprojTarget {
                observed: Tensor::from_rows(&observed, 2)?,
                heights: prepared.ids.iter().map(|&id| seq.height(id)).collect(),
            };
            let lp = loss_reproj(
                tape,
                out.traj,
                e,
                &target,
                &state.pose,
                relative,
                &seq.intrinsics,
                cfg.min_depth,
                cfg.depth_penalty,
            )?;
            (le, lp)
        }
        None => (zero, zero),
    };

    // Detached estimates for an autoregressive continuation.
    let delta = match out.ego {
        Some(e) => {
            let v = tape.value(e);
            PoseDelta::new(v.data[0], v.data[1], v.data[2])
        }
        None => PoseDelta::zero(),
    };
    let mut tracks = BTreeMap::new();
    for (r, &id) in prepared.ids.iter().enumerate() {
        let (est, _) = decode_row(&mcfg, tape.value(out.traj).row_slice(r), &state.pose)?;
        tracks.insert(id, est);
    }
    let next = RolloutState {
        pose: compose_pose(&state.pose, &delta),
        delta,
        tracks,
    };
    Ok((FrameLoss { traj, ego, proj }, next))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub l_traj: f64,
    pub l_ego: f64,
    pub l_proj: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Final model, or the last finite one if training diverged.
    pub model: Model,
    pub curve: Vec<EpochLosses>,
    pub diverged_at: Option<usize>,
}

/// CSV with header `epoch,L_traj,L_ego,L_proj,total`.
pub fn loss_curve_csv(curve: &[EpochLosses]) -> String {
    let mut s = String::from("epoch,L_traj,L_ego,L_proj,total\n");
    for e in curve {
        let _ = writeln!(s, "{},{},{},{},{}", e.epoch, e.l_traj, e.l_ego, e.l_proj, e.total);
    }
    s
}

pub fn train(episodes: &[Episode], model_cfg: ModelConfig, cfg: &TrainConfig) -> Result<TrainReport> {
    let model = Model::new(model_cfg, cfg.seed)?;
    train_model(model, episodes, cfg, |_, _| {})
}

/// Trains `model` in place of a fresh one. `on_epoch` sees every finished
/// epoch, e.g. to write periodic checkpoints.
pub fn train_model(
    mut model: Model,
    episodes: &[Episode],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLosses, &Model),
) -> Result<TrainReport> {
    cfg.validate()?;
    let usable: Vec<&Episode> = episodes.iter().filter(|e| e.seq.len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::InvalidArgument("training split has no sequence of two or more frames".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut adam = AdamState::new(model.params.values(), cfg.lr);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    for epoch in 0..cfg.epochs {
        let snapshot = model.params.clone();
        adam.lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut parts = LossParts::default();
        let mut total = 0.0;
        let mut finite = true;
        let forcing = cfg.teacher_forcing_at(epoch);
        'episodes: for &ei in &order {
            let ep = usable[ei];
            let mut state = RolloutState::from_gauge(&ep.seq)?;
            let frames: Vec<usize> = (1..ep.seq.len()).collect();
            for window in frames.chunks(cfg.window) {
                let mut tape = Tape::new();
                let net = model.bind(&mut tape);
                let mut terms = Vec::with_capacity(window.len());
                for &k in window {
                    let from = if forcing { ep.teacher_state(k) } else { state.clone() };
                    let (fl, mut next) = frame_loss(&net, &mut tape, ep, k, &from, cfg)?;
                    if model.config.motion_only {
                        // Mirror the baseline's rollout: carry every track
                        // and restart entering pedestrians from their history.
                        let mut carried = from.tracks.clone();
                        carried.extend(next.tracks);
                        next.tracks = carried;
                        apply_entry_history(&ep.seq, ep.seq.frames[k].frame, &mut next.tracks);
                    }
                    state = next;
                    terms.push(fl);
                }
                let sum = |tape: &mut Tape, pick: fn(&FrameLoss) -> Var| -> Result<Var> {
                    let mut acc = pick(&terms[0]);
                    for t in &terms[1..] {
                        acc = tape.add(acc, pick(t))?;
                    }
                    Ok(acc)
                };
                let lt = sum(&mut tape, |f| f.traj)?;
                let le = sum(&mut tape, |f| f.ego)?;
                let lp = sum(&mut tape, |f| f.proj)?;
                let loss = total_loss(&mut tape, lt, le, lp, epoch, cfg)?;
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    finite = false;
                    break 'episodes;
                }
                parts.l_traj += tape.value(lt).item();
                parts.l_ego += tape.value(le).item();
                parts.l_proj += tape.value(lp).item();
                total += value;
                tape.backward(loss)?;
                let mut grads: Vec<Tensor> = net.param_vars().iter().map(|v| tape.grad(*v)).collect();
                if cfg.grad_clip > 0.0 {
                    clip_grad_norm(&mut grads, cfg.grad_clip);
                }
                adam_step(model.params.values_mut(), &grads, &mut adam)?;
            }
        }
        if !finite || !model.params.is_finite() {
            log::error!("training diverged at epoch {epoch}; keeping the last finite parameters");
            model.params = snapshot;
            return Ok(TrainReport {
                model,
                curve,
                diverged_at: Some(epoch),
            });
        }
        let rec = EpochLosses {
            epoch,
            l_traj: parts.l_traj,
            l_ego: parts.l_ego,
            l_proj: parts.l_proj,
            total,
        };
        log::debug!("epoch {epoch}: {rec:?}");
        on_epoch(&rec, &model);
        curve.push(rec);
    }
    Ok(TrainReport {
        model,
        curve,
        diverged_at: None,
    })
}
