//! Autoregressive birdification, test-time pose refinement against the
//! image observations, and the two baselines (motion-only extrapolation and
//! a grid-search geometric solver).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::crowdsim::{step_constant_velocity, step_social_force, SocialForceParams};
use crate::egoview::{ObservationFrame, ObservationSequence};
use crate::error::{Error, Result};
use crate::geometry::{
    back_project, compose_pose, inverse_relative_transform, normalize_angle, CameraIntrinsics, Pose, PoseDelta, Rot2,
    Vec2,
};
use crate::model::{FrameInputs, FramePrediction, Model, ModelConfig};

/// On-ground estimate of one pedestrian at one frame (world frame).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackEstimate {
    pub position: Vec2<f64>,
    /// Displacement since the previous frame.
    pub velocity: Vec2<f64>,
}

/// Everything the next frame's queries are built from.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutState {
    pub pose: Pose<f64>,
    pub delta: PoseDelta<f64>,
    pub tracks: BTreeMap<u64, TrackEstimate>,
}

impl RolloutState {
    /// Gauge at the first frame: the true observer pose and the true
    /// positions of the pedestrians visible there, with zero velocity.
    pub fn from_gauge(seq: &ObservationSequence) -> Result<Self> {
        let first = seq.frames.first().ok_or(Error::EmptyScene)?;
        let pose = seq.observer_truth[0];
        let mut tracks = BTreeMap::new();
        for id in first.visible_ids() {
            let position = match seq.initial_positions.get(&id) {
                Some(p) => *p,
                None => back_project(first.states[&id].center(), seq.height(id), &pose, &seq.intrinsics)?,
            };
            tracks.insert(
                id,
                TrackEstimate {
                    position,
                    velocity: Vec2::zero(),
                },
            );
        }
        Ok(Self {
            pose,
            delta: PoseDelta::zero(),
            tracks,
        })
    }

    /// Gauge over the first two frames: true poses, and true positions and
    /// velocities of the pedestrians visible at the second frame. Solvers
    /// driven purely by a motion prior need the initial velocities, which a
    /// single frame cannot provide.
    pub fn from_two_frame_gauge(seq: &ObservationSequence) -> Result<Self> {
        if seq.len() < 2 {
            return Err(Error::ShortObserverTrack(seq.observer_id));
        }
        let (f0, f1) = (&seq.frames[0], &seq.frames[1]);
        let pose = seq.observer_truth[1];
        let mut tracks = BTreeMap::new();
        for id in f1.visible_ids() {
            let entries = seq.entry_positions.get(&id).map(Vec::as_slice).unwrap_or(&[]);
            let at = |frame: usize| entries.iter().find(|e| e.0 == frame).map(|e| e.1);
            let est = match (at(f0.frame), at(f1.frame)) {
                (Some(a), Some(b)) => TrackEstimate {
                    position: b,
                    velocity: b - a,
                },
                (None, Some(b)) => TrackEstimate {
                    position: b,
                    velocity: Vec2::zero(),
                },
                _ => bootstrap_track(f1, id, seq.height(id), &pose, &seq.intrinsics),
            };
            tracks.insert(id, est);
        }
        Ok(Self {
            pose,
            delta: PoseDelta::between(&seq.observer_truth[0], &pose),
            tracks,
        })
    }
}

/// Network inputs for one frame together with their row identities.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedFrame {
    pub ids: Vec<u64>,
    pub inputs: FrameInputs,
    /// Rows whose query came from back-projecting the current observation
    /// because no previous estimate existed.
    pub bootstrapped: Vec<bool>,
}

/// Starting estimate for a pedestrian without a previous one: its current
/// observation back-projected from the previous camera pose, at rest.
pub fn bootstrap_track(
    frame: &ObservationFrame,
    id: u64,
    height: f64,
    pose: &Pose<f64>,
    intr: &CameraIntrinsics<f64>,
) -> TrackEstimate {
    let position = frame
        .states
        .get(&id)
        .and_then(|s| back_project(s.center(), height, pose, intr).ok())
        .unwrap_or_else(|| pose.to_world(Vec2::new(0.0, 5.0)));
    TrackEstimate {
        position,
        velocity: Vec2::zero(),
    }
}

/// Position and velocity of a world-frame estimate in the camera frame of
/// `pose`.
pub fn to_camera_frame(est: &TrackEstimate, pose: &Pose<f64>) -> [f64; 4] {
    let r = pose.rotation();
    let x = r.apply(est.position) + pose.translation();
    let v = r.apply(est.velocity);
    [x.x, x.y, v.x, v.y]
}

/// Expresses a world-frame estimate in the frame the model's queries use.
pub fn query_row(cfg: &ModelConfig, est: &TrackEstimate, pose: &Pose<f64>) -> [f64; 4] {
    if cfg.relative_frame() {
        to_camera_frame(est, pose)
    } else {
        [est.position.x, est.position.y, est.velocity.x, est.velocity.y]
    }
}

/// Builds the inputs for `frame` from the estimates of the previous frame.
/// Rows are the visible pedestrians in id order.
pub fn prepare_frame(cfg: &ModelConfig, seq: &ObservationSequence, frame: &ObservationFrame, state: &RolloutState) -> PreparedFrame {
    let ids = frame.visible_ids();
    let mut states = Vec::with_capacity(ids.len());
    let mut queries = Vec::with_capacity(ids.len());
    let mut bootstrapped = Vec::with_capacity(ids.len());
    for &id in &ids {
        states.push(frame.states[&id].as_array());
        let est = match state.tracks.get(&id) {
            Some(e) => {
                bootstrapped.push(false);
                *e
            }
            None => {
                bootstrapped.push(true);
                bootstrap_track(frame, id, seq.height(id), &state.pose, &seq.intrinsics)
            }
        };
        queries.push(query_row(cfg, &est, &state.pose));
    }
    PreparedFrame {
        inputs: FrameInputs {
            states: Tensor::from_rows(&states, 4).expect("rows have four entries"),
            ego_query: state.delta.as_array(),
            ped_queries: Tensor::from_rows(&queries, 4).expect("rows have four entries"),
            visible: None,
        },
        ids,
        bootstrapped,
    }
}

/// Converts one trajectory-head row to a world estimate and the
/// previous-camera-frame relative estimate `(x~, dx~)`.
pub fn decode_row(cfg: &ModelConfig, row: &[f64], prev_pose: &Pose<f64>) -> Result<(TrackEstimate, [f64; 4])> {
    if cfg.relative_frame() {
        let (x, v) = inverse_relative_transform(Vec2::new(row[0], row[1]), Vec2::new(row[2], row[3]), prev_pose)?;
        Ok((
            TrackEstimate {
                position: x,
                velocity: v,
            },
            [row[0], row[1], row[2], row[3]],
        ))
    } else {
        let est = TrackEstimate {
            position: Vec2::new(row[0], row[1]),
            velocity: Vec2::new(row[2], row[3]),
        };
        Ok((est, to_camera_frame(&est, prev_pose)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameFlag {
    /// No visible pedestrian informed the ego-motion estimate.
    LowConfidence,
    /// Every observed in-image displacement is below 1e-4; the relative
    /// motion cannot separate ego-motion from pedestrian motion.
    Ambiguous,
    /// Refinement was requested but skipped.
    RefineSkipped,
    /// A predicted point fell behind the camera.
    BehindCamera,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PedestrianEstimate {
    pub id: u64,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    /// Position in the camera frame of this frame's estimated pose.
    pub rel: [f64; 2],
    /// Position and velocity in the previous estimated camera frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rel_prev: Option<[f64; 4]>,
}

impl PedestrianEstimate {
    pub fn position(&self) -> Vec2<f64> {
        Vec2::new(self.x, self.y)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame: usize,
    /// Estimated observer pose; absent for the motion-only baseline.
    pub pose: Option<Pose<f64>>,
    pub delta: Option<PoseDelta<f64>>,
    pub peds: Vec<PedestrianEstimate>,
    pub residual_initial: Option<f64>,
    pub residual: Option<f64>,
    pub flags: Vec<FrameFlag>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BirdifiedResult {
    pub method: String,
    pub observer_id: u64,
    pub frames: Vec<FrameResult>,
}

#[derive(Serialize, Deserialize)]
struct ResultHeader {
    method: String,
    observer_id: u64,
}

impl BirdifiedResult {
    /// Header line followed by one line per frame.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&ResultHeader {
            method: self.method.clone(),
            observer_id: self.observer_id,
        })?;
        out.push('\n');
        for f in &self.frames {
            out.push_str(&serde_json::to_string(f)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let parse_err = |line: usize, e: serde_json::Error| Error::Parse {
            line: line + 1,
            msg: e.to_string(),
        };
        let (i, head) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "empty result file".into(),
        })?;
        let header: ResultHeader = serde_json::from_str(head).map_err(|e| parse_err(i, e))?;
        let frames = lines
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| parse_err(i, e)))
            .collect::<Result<Vec<FrameResult>>>()?;
        Ok(Self {
            method: header.method,
            observer_id: header.observer_id,
            frames,
        })
    }

    /// Largest distance between a world estimate and the inverse relative
    /// transform of its camera-frame estimate at the estimated pose.
    pub fn consistency_error(&self) -> Result<f64> {
        let mut worst = 0.0_f64;
        for f in &self.frames {
            let Some(pose) = f.pose else { continue };
            for p in &f.peds {
                let (x, _) = inverse_relative_transform(Vec2::new(p.rel[0], p.rel[1]), Vec2::zero(), &pose)?;
                worst = worst.max((x - p.position()).norm());
            }
        }
        Ok(worst)
    }
}

const AMBIGUOUS_IMAGE_MOTION: f64 = 1e-4;

fn is_ambiguous(frame: &ObservationFrame) -> bool {
    let mut moving = frame.states.values().filter(|s| !s.velocity_filled).peekable();
    moving.peek().is_some() && moving.all(|s| s.velocity().norm() < AMBIGUOUS_IMAGE_MOTION)
}

fn camera_point(x_prev: Vec2<f64>, delta: &PoseDelta<f64>) -> Vec2<f64> {
    Rot2::new(delta.d_theta).apply(x_prev) + delta.translation()
}

const MIN_DEPTH: f64 = 1e-9;

/// Image residual vector `(p_hat - p_obs)` of one point, or `None` behind
/// the camera.
fn point_residual(x_cam: Vec2<f64>, height: f64, obs: Vec2<f64>, intr: &CameraIntrinsics<f64>) -> Option<[f64; 2]> {
    if x_cam.y < MIN_DEPTH {
        return None;
    }
    let a = &intr.matrix_a;
    let yc = intr.height_cz - height / 2.0;
    let px = (a[0][0] * x_cam.x + a[0][1] * yc) / x_cam.y + a[0][2];
    let py = a[1][1] * yc / x_cam.y + a[1][2];
    Some([px - obs.x, py - obs.y])
}

/// Sum of squared image distances between the observed centres and the
/// projections of points given in the previous camera frame, moved by
/// `delta`. Infinite if any point ends up behind the camera.
pub fn reprojection_residual(
    rel_prev: &[Vec2<f64>],
    observed: &[Vec2<f64>],
    heights: &[f64],
    delta: &PoseDelta<f64>,
    intr: &CameraIntrinsics<f64>,
) -> f64 {
    let mut total = 0.0;
    for ((x, o), h) in rel_prev.iter().zip(observed).zip(heights) {
        match point_residual(camera_point(*x, delta), *h, *o, intr) {
            Some([u, v]) => total += u * u + v * v,
            None => return f64::INFINITY,
        }
    }
    total
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineSkip {
    TooFewPedestrians,
    BehindCamera,
    Singular,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineOutcome {
    pub delta: PoseDelta<f64>,
    pub initial_residual: f64,
    pub residual: f64,
    /// Residual after every accepted or rejected iteration.
    pub history: Vec<f64>,
    pub skipped: Option<RefineSkip>,
}

const LM_INITIAL_DAMPING: f64 = 1e-3;
const LM_MAX_DAMPING: f64 = 1e10;
const LM_MAX_ITERATIONS: usize = 10;

fn solve3(m: [[f64; 3]; 3], b: [f64; 3]) -> Option<[f64; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if !det.is_finite() || det.abs() < 1e-300 {
        return None;
    }
    let col = |k: usize| {
        let mut c = m;
        for r in 0..3 {
            c[r][k] = b[r];
        }
        c
    };
    let d = |c: [[f64; 3]; 3]| {
        c[0][0] * (c[1][1] * c[2][2] - c[1][2] * c[2][1]) - c[0][1] * (c[1][0] * c[2][2] - c[1][2] * c[2][0])
            + c[0][2] * (c[1][0] * c[2][1] - c[1][1] * c[2][0])
    };
    let x = [d(col(0)) / det, d(col(1)) / det, d(col(2)) / det];
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Damped Gauss-Newton over the three pose-delta parameters, minimizing the
/// reprojection residual with the relative positions held fixed. Only
/// decreasing steps are accepted, so the residual never grows.
pub fn refine_pose(
    rel_prev: &[Vec2<f64>],
    observed: &[Vec2<f64>],
    heights: &[f64],
    intr: &CameraIntrinsics<f64>,
    init: PoseDelta<f64>,
) -> RefineOutcome {
    let cost = |d: &PoseDelta<f64>| reprojection_residual(rel_prev, observed, heights, d, intr);
    let initial = cost(&init);
    let mut out = RefineOutcome {
        delta: init,
        initial_residual: initial,
        residual: initial,
        history: vec![initial],
        skipped: None,
    };
    if rel_prev.len() < 2 {
        out.skipped = Some(RefineSkip::TooFewPedestrians);
        return out;
    }
    if !initial.is_finite() {
        out.skipped = Some(RefineSkip::BehindCamera);
        return out;
    }
    let a = &intr.matrix_a;
    let mut lambda = LM_INITIAL_DAMPING;
    let mut current = init;
    let mut current_cost = initial;
    for _ in 0..LM_MAX_ITERATIONS {
        if current_cost == 0.0 {
            break;
        }
        let (s, c) = current.d_theta.sin_cos();
        let mut jtj = [[0.0; 3]; 3];
        let mut jtr = [0.0; 3];
        for ((x, o), h) in rel_prev.iter().zip(observed).zip(heights) {
            let cam = camera_point(*x, &current);
            let Some(r) = point_residual(cam, *h, *o, intr) else { continue };
            let yc = intr.height_cz - h / 2.0;
            let z = cam.y;
            // d(cam)/d(d_theta) for cam = R(dθ) x + Δt.
            let dcam_dth = Vec2::new(-s * x.x - c * x.y, c * x.x - s * x.y);
            let dpx_dx = a[0][0] / z;
            let dpx_dz = -(a[0][0] * cam.x + a[0][1] * yc) / (z * z);
            let dpy_dz = -a[1][1] * yc / (z * z);
            let jx = [dpx_dx, dpx_dz, dpx_dx * dcam_dth.x + dpx_dz * dcam_dth.y];
            let jy = [0.0, dpy_dz, dpy_dz * dcam_dth.y];
            for i in 0..3 {
                jtr[i] += jx[i] * r[0] + jy[i] * r[1];
                for k in 0..3 {
                    jtj[i][k] += jx[i] * jx[k] + jy[i] * jy[k];
                }
            }
        }
        let mut improved = false;
        while lambda <= LM_MAX_DAMPING {
            let mut m = jtj;
            for (i, row) in m.iter_mut().enumerate() {
                row[i] += lambda;
            }
            let Some(step) = solve3(m, [-jtr[0], -jtr[1], -jtr[2]]) else {
                lambda *= 10.0;
                continue;
            };
            let cand = PoseDelta::new(
                current.d_cx + step[0],
                current.d_cy + step[1],
                current.d_theta + step[2],
            );
            let cand_cost = cost(&cand);
            out.history.push(cand_cost.min(current_cost));
            if cand_cost < current_cost {
                current = cand;
                current_cost = cand_cost;
                lambda = (lambda / 10.0).max(1e-12);
                improved = true;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            if lambda > LM_MAX_DAMPING && current_cost == initial {
                out.skipped = Some(RefineSkip::Singular);
            }
            break;
        }
    }
    out.delta = current;
    out.residual = current_cost;
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BirdifyOptions {
    pub refine: bool,
}

fn method_name(cfg: &ModelConfig, refine: bool) -> String {
    let base = if cfg.motion_only {
        "transmotion"
    } else if cfg.use_relative_transform {
        "vbf"
    } else {
        "vbf-noreltransform"
    };
    if refine && !cfg.motion_only {
        format!("{base}+refine")
    } else {
        base.to_string()
    }
}

fn gauge_frame(seq: &ObservationSequence, state: &RolloutState) -> FrameResult {
    FrameResult {
        frame: seq.frames[0].frame,
        pose: Some(state.pose),
        delta: Some(PoseDelta::zero()),
        peds: state
            .tracks
            .iter()
            .map(|(&id, t)| {
                let rel = state.pose.to_camera(t.position);
                PedestrianEstimate {
                    id,
                    x: t.position.x,
                    y: t.position.y,
                    vx: t.velocity.x,
                    vy: t.velocity.y,
                    rel: [rel.x, rel.y],
                    rel_prev: None,
                }
            })
            .collect(),
        residual_initial: None,
        residual: None,
        flags: Vec::new(),
    }
}

/// Runs the model over a sequence, one forward pass per frame, feeding each
/// frame's estimates back as the next frame's queries.
pub fn birdify_sequence(seq: &ObservationSequence, model: &Model, opts: BirdifyOptions) -> Result<BirdifiedResult> {
    if model.config.motion_only {
        return transmotion_sequence(seq, model);
    }
    let cfg = &model.config;
    let mut state = RolloutState::from_gauge(seq)?;
    let mut frames = vec![gauge_frame(seq, &state)];
    for frame in &seq.frames[1..] {
        let prepared = prepare_frame(cfg, seq, frame, &state);
        let pred = model.predict(&prepared.inputs)?;
        let (result, next) = finish_frame(seq, frame, &state, &prepared, &pred, cfg, opts)?;
        frames.push(result);
        state = next;
    }
    Ok(BirdifiedResult {
        method: method_name(cfg, opts.refine),
        observer_id: seq.observer_id,
        frames,
    })
}

fn finish_frame(
    seq: &ObservationSequence,
    frame: &ObservationFrame,
    state: &RolloutState,
    prepared: &PreparedFrame,
    pred: &FramePrediction,
    cfg: &ModelConfig,
    opts: BirdifyOptions,
) -> Result<(FrameResult, RolloutState)> {
    let ego = pred.ego.ok_or_else(|| Error::InvalidArgument("model has no ego head".into()))?;
    let mut delta = PoseDelta::new(ego[0], ego[1], ego[2]);
    let mut flags = Vec::new();
    if pred.low_confidence {
        flags.push(FrameFlag::LowConfidence);
    }
    if is_ambiguous(frame) {
        flags.push(FrameFlag::Ambiguous);
    }
    let mut decoded = Vec::with_capacity(prepared.ids.len());
    for (k, &id) in prepared.ids.iter().enumerate() {
        let (est, rel_prev) = decode_row(cfg, pred.traj.row_slice(k), &state.pose)?;
        decoded.push((id, est, rel_prev));
    }
    let rel: Vec<Vec2<f64>> = decoded.iter().map(|d| Vec2::new(d.2[0], d.2[1])).collect();
    let observed: Vec<Vec2<f64>> = prepared.ids.iter().map(|id| frame.states[id].center()).collect();
    let heights: Vec<f64> = prepared.ids.iter().map(|&id| seq.height(id)).collect();
    let residual_initial = reprojection_residual(&rel, &observed, &heights, &delta, &seq.intrinsics);
    let mut residual = residual_initial;
    if !residual_initial.is_finite() {
        flags.push(FrameFlag::BehindCamera);
    }
    if opts.refine {
        let out = refine_pose(&rel, &observed, &heights, &seq.intrinsics, delta);
        if out.skipped.is_some() {
            flags.push(FrameFlag::RefineSkipped);
        }
        delta = out.delta;
        residual = out.residual;
    }
    delta.d_theta = normalize_angle(delta.d_theta);
    let pose = compose_pose(&state.pose, &delta);
    let mut tracks = BTreeMap::new();
    let peds = decoded
        .into_iter()
        .map(|(id, est, rel_prev)| {
            tracks.insert(id, est);
            let cam = camera_point(Vec2::new(rel_prev[0], rel_prev[1]), &delta);
            PedestrianEstimate {
                id,
                x: est.position.x,
                y: est.position.y,
                vx: est.velocity.x,
                vy: est.velocity.y,
                rel: [cam.x, cam.y],
                rel_prev: Some(rel_prev),
            }
        })
        .collect();
    flags.sort();
    flags.dedup();
    let finite = |v: f64| v.is_finite().then_some(v);
    Ok((
        FrameResult {
            frame: frame.frame,
            pose: Some(pose),
            delta: Some(delta),
            peds,
            residual_initial: finite(residual_initial),
            residual: finite(residual),
            flags,
        },
        RolloutState { pose, delta, tracks },
    ))
}

/// One extrapolation step of the motion-only model: world positions and
/// velocities at the next frame for every given track, in input order.
pub fn transmotion_predict(model: &Model, tracks: &[TrackEstimate]) -> Result<Vec<TrackEstimate>> {
    if !model.config.motion_only {
        return Err(Error::InvalidArgument("model is not a motion-only model".into()));
    }
    let rows: Vec<[f64; 4]> = tracks
        .iter()
        .map(|t| [t.position.x, t.position.y, t.velocity.x, t.velocity.y])
        .collect();
    let inputs = FrameInputs {
        states: Tensor::zeros(0, 4),
        ego_query: [0.0; 3],
        ped_queries: Tensor::from_rows(&rows, 4)?,
        visible: None,
    };
    let pred = model.predict(&inputs)?;
    Ok((0..tracks.len())
        .map(|k| {
            let r = pred.traj.row_slice(k);
            TrackEstimate {
                position: Vec2::new(r[0], r[1]),
                velocity: Vec2::new(r[2], r[3]),
            }
        })
        .collect())
}

/// Motion-only rollout. Each pedestrian starts from its observed entry
/// history and is extrapolated from then on; no image evidence is used.
/// Pedestrians still inside their entry history at `frame` take the
/// observed position instead of a prediction.
pub fn apply_entry_history(seq: &ObservationSequence, frame: usize, tracks: &mut BTreeMap<u64, TrackEstimate>) {
    for (&id, entries) in &seq.entry_positions {
        let Some(pos) = entries.iter().position(|e| e.0 == frame) else { continue };
        let position = entries[pos].1;
        let velocity = if pos > 0 { position - entries[pos - 1].1 } else { Vec2::zero() };
        tracks.insert(id, TrackEstimate { position, velocity });
    }
}

pub fn transmotion_sequence(seq: &ObservationSequence, model: &Model) -> Result<BirdifiedResult> {
    let mut tracks: BTreeMap<u64, TrackEstimate> = BTreeMap::new();
    let mut frames = Vec::with_capacity(seq.len());
    for (k, frame) in seq.frames.iter().enumerate() {
        let ids: Vec<u64> = tracks.keys().copied().collect();
        let current: Vec<TrackEstimate> = ids.iter().map(|id| tracks[id]).collect();
        let mut next: BTreeMap<u64, TrackEstimate> = if k == 0 || current.is_empty() {
            BTreeMap::new()
        } else {
            ids.into_iter().zip(transmotion_predict(model, &current)?).collect()
        };
        apply_entry_history(seq, frame.frame, &mut next);
        let peds = frame
            .visible_ids()
            .into_iter()
            .filter_map(|id| next.get(&id).map(|t| (id, *t)))
            .map(|(id, t)| PedestrianEstimate {
                id,
                x: t.position.x,
                y: t.position.y,
                vx: t.velocity.x,
                vy: t.velocity.y,
                // Camera-frame positions are undefined without a pose.
                rel: [0.0; 2],
                rel_prev: None,
            })
            .collect();
        frames.push(FrameResult {
            frame: frame.frame,
            pose: None,
            delta: None,
            peds,
            residual_initial: None,
            residual: None,
            flags: Vec::new(),
        });
        tracks = next;
    }
    Ok(BirdifiedResult {
        method: "transmotion".into(),
        observer_id: seq.observer_id,
        frames,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorModel {
    ConstantVelocity,
    SocialForce,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoVbConfig {
    /// Samples per pose dimension.
    pub samples: usize,
    pub iterations: usize,
    /// Half-width of the initial translation search window (m).
    pub radius_translation: f64,
    /// Half-width of the initial heading search window (rad).
    pub radius_rotation: f64,
    /// Weight of the motion-model prediction against the back-projected
    /// observation when re-estimating positions.
    pub prior_weight: f64,
    pub frame_interval: f64,
}

impl Default for GeoVbConfig {
    fn default() -> Self {
        Self {
            samples: 10,
            iterations: 5,
            radius_translation: 0.3,
            radius_rotation: 0.1,
            prior_weight: 0.1,
            frame_interval: crate::crowdsim::DEFAULT_FRAME_INTERVAL,
        }
    }
}

impl GeoVbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 || self.iterations < 1 {
            return Err(Error::InvalidArgument("need at least 2 samples and 1 iteration".into()));
        }
        if !(self.radius_translation >= 0.0 && self.radius_rotation >= 0.0 && self.prior_weight >= 0.0) {
            return Err(Error::InvalidArgument("radii and prior weight must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeoVbStep {
    pub delta: PoseDelta<f64>,
    pub pose: Pose<f64>,
    pub tracks: BTreeMap<u64, TrackEstimate>,
    pub residual: f64,
}

/// Motion-model prediction of the next world positions of the tracked
/// pedestrians among `ids`.
pub fn predict_prior(
    prior: PriorModel,
    state: &RolloutState,
    ids: &[u64],
    frame_interval: f64,
) -> Result<BTreeMap<u64, Vec2<f64>>> {
    let tracked: Vec<u64> = ids.iter().copied().filter(|id| state.tracks.contains_key(id)).collect();
    let pos: Vec<Vec2<f64>> = tracked.iter().map(|id| state.tracks[id].position).collect();
    let vel: Vec<Vec2<f64>> = tracked.iter().map(|id| state.tracks[id].velocity).collect();
    let next = match prior {
        PriorModel::ConstantVelocity => step_constant_velocity(&pos, &vel)?,
        PriorModel::SocialForce => {
            let goals: Vec<Vec2<f64>> = pos.iter().zip(&vel).map(|(x, v)| *x + v.scale(10.0)).collect();
            let params = SocialForceParams::default();
            step_social_force(&pos, &vel, &goals, &params, frame_interval)?.positions
        }
    };
    Ok(tracked.into_iter().zip(next).collect())
}

/// Grid-search geometric solver: alternates between scoring a grid of
/// pose-delta samples by the reprojection residual of the current position
/// estimates and re-estimating positions by back-projection blended with
/// the motion-model prior.
pub fn geovb_solve(
    seq: &ObservationSequence,
    frame: &ObservationFrame,
    state: &RolloutState,
    prior: PriorModel,
    cfg: &GeoVbConfig,
) -> Result<GeoVbStep> {
    cfg.validate()?;
    let ids = frame.visible_ids();
    if ids.is_empty() {
        return Err(Error::NoVisiblePedestrians(frame.frame));
    }
    let intr = &seq.intrinsics;
    let predicted = predict_prior(prior, state, &ids, cfg.frame_interval)?;
    let to_rel = |x: Vec2<f64>| state.pose.to_camera(x);
    let observed: BTreeMap<u64, Vec2<f64>> = ids.iter().map(|&id| (id, frame.states[&id].center())).collect();
    // Scored pedestrians: those with a motion prior.
    let scored: Vec<u64> = ids.iter().copied().filter(|id| predicted.contains_key(id)).collect();
    let obs_s: Vec<Vec2<f64>> = scored.iter().map(|id| observed[id]).collect();
    let h_s: Vec<f64> = scored.iter().map(|&id| seq.height(id)).collect();
    let mut est: BTreeMap<u64, Vec2<f64>> = predicted.clone();

    let reestimate = |delta: &PoseDelta<f64>, est: &mut BTreeMap<u64, Vec2<f64>>| {
        let pose = compose_pose(&state.pose, delta);
        for &id in &ids {
            let bp = back_project(observed[&id], seq.height(id), &pose, intr).ok();
            let value = match (bp, predicted.get(&id)) {
                (Some(b), Some(p)) => (b + p.scale(cfg.prior_weight)).scale(1.0 / (1.0 + cfg.prior_weight)),
                (Some(b), None) => b,
                (None, Some(p)) => *p,
                (None, None) => bootstrap_track(frame, id, seq.height(id), &pose, intr).position,
            };
            est.insert(id, value);
        }
    };

    let mut center = state.delta;
    let (mut rt, mut rr) = (cfg.radius_translation, cfg.radius_rotation);
    let s = cfg.samples;
    let grid = |c: f64, r: f64, i: usize| c + r * (2.0 * i as f64 / (s - 1) as f64 - 1.0);
    if !scored.is_empty() {
        // Pose samples are scored against the motion-model prediction; the
        // re-estimated positions feed the next frame's prior.
        let rel: Vec<Vec2<f64>> = scored.iter().map(|id| to_rel(predicted[id])).collect();
        for _ in 0..cfg.iterations {
            let mut best = (f64::INFINITY, center);
            for it in 0..s {
                let th = grid(center.d_theta, rr, it);
                for ix in 0..s {
                    let dx = grid(center.d_cx, rt, ix);
                    for iy in 0..s {
                        let cand = PoseDelta::new(dx, grid(center.d_cy, rt, iy), th);
                        let r = reprojection_residual(&rel, &obs_s, &h_s, &cand, intr);
                        if r < best.0 {
                            best = (r, cand);
                        }
                    }
                }
            }
            center = best.1;
            reestimate(&center, &mut est);
            rt *= 0.5;
            rr *= 0.5;
        }
        center = refine_pose(&rel, &obs_s, &h_s, intr, center).delta;
    }
    reestimate(&center, &mut est);
    let pose = compose_pose(&state.pose, &center);
    let rel: Vec<Vec2<f64>> = scored.iter().map(|id| to_rel(est[id])).collect();
    let residual = reprojection_residual(&rel, &obs_s, &h_s, &center, intr);
    let tracks = ids
        .iter()
        .map(|&id| {
            let position = est[&id];
            let velocity = state.tracks.get(&id).map_or(Vec2::zero(), |t| position - t.position);
            (id, TrackEstimate { position, velocity })
        })
        .collect();
    Ok(GeoVbStep {
        delta: center,
        pose,
        tracks,
        residual,
    })
}

pub fn geovb_sequence(seq: &ObservationSequence, prior: PriorModel, cfg: &GeoVbConfig) -> Result<BirdifiedResult> {
    let first = RolloutState::from_gauge(seq)?;
    let mut frames = vec![gauge_frame(seq, &first)];
    let mut state = RolloutState::from_two_frame_gauge(seq)?;
    let mut second = gauge_frame(seq, &state);
    second.frame = seq.frames[1].frame;
    second.delta = Some(state.delta);
    frames.push(second);
    for frame in &seq.frames[2..] {
        if frame.states.is_empty() {
            // Nothing to solve against: coast on the previous ego-motion.
            let pose = compose_pose(&state.pose, &state.delta);
            frames.push(FrameResult {
                frame: frame.frame,
                pose: Some(pose),
                delta: Some(state.delta),
                peds: Vec::new(),
                residual_initial: None,
                residual: None,
                flags: vec![FrameFlag::LowConfidence],
            });
            state = RolloutState {
                pose,
                delta: state.delta,
                tracks: BTreeMap::new(),
            };
            continue;
        }
        let step = geovb_solve(seq, frame, &state, prior, cfg)?;
        let mut flags = Vec::new();
        if is_ambiguous(frame) {
            flags.push(FrameFlag::Ambiguous);
        }
        let peds = step
            .tracks
            .iter()
            .map(|(&id, t)| {
                let prev = state.pose.to_camera(t.position);
                let pv = state.pose.rotation().apply(t.velocity);
                let rel = step.pose.to_camera(t.position);
                PedestrianEstimate {
                    id,
                    x: t.position.x,
                    y: t.position.y,
                    vx: t.velocity.x,
                    vy: t.velocity.y,
                    rel: [rel.x, rel.y],
                    rel_prev: Some([prev.x, prev.y, pv.x, pv.y]),
                }
            })
            .collect();
        let finite = step.residual.is_finite().then_some(step.residual);
        frames.push(FrameResult {
            frame: frame.frame,
            pose: Some(step.pose),
            delta: Some(step.delta),
            peds,
            residual_initial: finite,
            residual: finite,
            flags,
        });
        state = RolloutState {
            pose: step.pose,
            delta: step.delta,
            tracks: step.tracks,
        };
    }
    let name = match prior {
        PriorModel::ConstantVelocity => "geovb-cv",
        PriorModel::SocialForce => "geovb-sf",
    };
    Ok(BirdifiedResult {
        method: name.into(),
        observer_id: seq.observer_id,
        frames,
    })
}
