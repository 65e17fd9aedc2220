//! Virtual ego-centric camera: mounts a pinhole camera on one pedestrian of
//! a scene and produces the in-image observations the network consumes.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::crowdsim::Scene;
use crate::error::{Error, Result};
use crate::geometry::{project_camera_point, CameraIntrinsics, Pose, Vec2};

/// In-image state of one pedestrian: bounding-box centre and its
/// frame-to-frame displacement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PedestrianState {
    pub p_x: f64,
    pub p_y: f64,
    pub dp_x: f64,
    pub dp_y: f64,
    /// Set when the pedestrian was not visible in the previous frame and
    /// the displacement is a zero fill.
    pub velocity_filled: bool,
}

impl PedestrianState {
    pub fn center(&self) -> Vec2<f64> {
        Vec2::new(self.p_x, self.p_y)
    }

    pub fn velocity(&self) -> Vec2<f64> {
        Vec2::new(self.dp_x, self.dp_y)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.p_x, self.p_y, self.dp_x, self.dp_y]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationFrame {
    /// Absolute scene frame index.
    pub frame: usize,
    /// Pedestrians present in the scene at this frame (observer excluded).
    pub candidates: Vec<u64>,
    /// States of the visible subset of `candidates`.
    pub states: BTreeMap<u64, PedestrianState>,
}

impl ObservationFrame {
    pub fn is_visible(&self, id: u64) -> bool {
        self.states.contains_key(&id)
    }

    pub fn visible_ids(&self) -> Vec<u64> {
        self.states.keys().copied().collect()
    }
}

/// Observations of one observer over its tracked frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationSequence {
    pub observer_id: u64,
    pub frames: Vec<ObservationFrame>,
    /// Ground-truth observer poses, aligned with `frames`.
    pub observer_truth: Vec<Pose<f64>>,
    pub intrinsics: CameraIntrinsics<f64>,
    /// Pedestrian heights, assumed recoverable from the images.
    pub heights: BTreeMap<u64, f64>,
    /// Ground-truth positions at the first frame, used to fix the gauge.
    pub initial_positions: BTreeMap<u64, Vec2<f64>>,
    /// Ground-truth positions at each pedestrian's first visible frame and
    /// the frame after it. Only the motion-only baseline consumes these,
    /// as the observed history it extrapolates from.
    pub entry_positions: BTreeMap<u64, Vec<(usize, Vec2<f64>)>>,
}

impl ObservationSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self, id: u64) -> f64 {
        self.heights.get(&id).copied().unwrap_or(1.7)
    }
}

/// Per-frame boolean mask over (row, column) query/key pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub rows: usize,
    pub cols: usize,
    data: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..rows * cols).map(|k| f(k / cols.max(1), k % cols.max(1))).collect();
        Self { rows, cols, data }
    }

    pub fn all(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| true)
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    pub fn is_all_visible(&self) -> bool {
        self.data.iter().all(|&b| b)
    }

    pub fn row_has_any(&self, r: usize) -> bool {
        (0..self.cols).any(|c| self.get(r, c))
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// Row identity of an attention query: the camera (ego-motion) query or a
/// pedestrian.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryRow {
    Camera,
    Pedestrian(u64),
}

/// Builds the attention mask for one frame: an entry is open iff both the
/// row and the column pedestrian are visible. The camera row is always
/// considered present.
pub fn build_attention_mask(visible: &BTreeSet<u64>, rows: &[QueryRow], cols: &[u64]) -> AttentionMask {
    let row_ok: Vec<bool> = rows
        .iter()
        .map(|r| match r {
            QueryRow::Camera => true,
            QueryRow::Pedestrian(id) => visible.contains(id),
        })
        .collect();
    let col_ok: Vec<bool> = cols.iter().map(|id| visible.contains(id)).collect();
    AttentionMask::from_fn(rows.len(), cols.len(), |r, c| row_ok[r] && col_ok[c])
}

/// Heading that aligns the camera's forward (local +y) axis with `v`.
pub fn heading_from_velocity(v: Vec2<f64>) -> f64 {
    v.x.atan2(v.y)
}

/// Ground-truth camera poses of an observer, one per tracked frame. The
/// heading follows the walking direction and is held while stationary.
pub fn observer_poses(scene: &Scene, observer_id: u64) -> Result<(usize, Vec<Pose<f64>>)> {
    let track = scene.track(observer_id).ok_or(Error::UnknownPedestrian(observer_id))?;
    if track.len() < 2 {
        return Err(Error::ShortObserverTrack(observer_id));
    }
    const STATIONARY: f64 = 1e-12;
    let first_moving = track.velocities.iter().skip(1).find(|v| v.norm() > STATIONARY);
    let mut heading = first_moving.map_or(0.0, |v| heading_from_velocity(*v));
    let poses = track
        .positions
        .iter()
        .zip(&track.velocities)
        .map(|(p, v)| {
            if v.norm() > STATIONARY {
                heading = heading_from_velocity(*v);
            }
            Pose::new(p.x, p.y, heading)
        })
        .collect();
    Ok((track.first_frame, poses))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MountOptions {
    /// Hide pedestrians behind a closer one. Off by default.
    pub occlusion: bool,
}

/// Half-width of a pedestrian's body used by the optional occlusion test (m).
const BODY_HALF_WIDTH: f64 = 0.25;

pub fn mount_camera(scene: &Scene, observer_id: u64, intr: &CameraIntrinsics<f64>) -> Result<ObservationSequence> {
    mount_camera_with(scene, observer_id, intr, MountOptions::default())
}

pub fn mount_camera_with(
    scene: &Scene,
    observer_id: u64,
    intr: &CameraIntrinsics<f64>,
    opts: MountOptions,
) -> Result<ObservationSequence> {
    intr.validate()?;
    let (first, poses) = observer_poses(scene, observer_id)?;
    let others: Vec<_> = scene.tracks.iter().filter(|t| t.ped_id != observer_id).collect();
    let mut frames = Vec::with_capacity(poses.len());
    let mut prev_centers: BTreeMap<u64, Vec2<f64>> = BTreeMap::new();
    for (k, pose) in poses.iter().enumerate() {
        let frame = first + k;
        let mut candidates = Vec::new();
        let mut in_view = Vec::new();
        for t in &others {
            let Some(x) = t.position_at(frame) else { continue };
            candidates.push(t.ped_id);
            let x_cam = pose.to_camera(x);
            if !intr.in_frustum(x_cam) {
                continue;
            }
            if let Ok(p) = project_camera_point(x_cam, t.height_h, intr) {
                in_view.push((t.ped_id, x_cam, Vec2::new(p[0], p[1])));
            }
        }
        if opts.occlusion {
            let snapshot = in_view.clone();
            in_view.retain(|(id, x, _)| {
                let ray = x.x / x.y;
                !snapshot.iter().any(|(oid, o, _)| {
                    oid != id && o.y < x.y && (o.x / o.y - ray).abs() < BODY_HALF_WIDTH / o.y
                })
            });
        }
        let mut states = BTreeMap::new();
        let mut centers = BTreeMap::new();
        for (id, _, p) in in_view {
            let (dp, filled) = match prev_centers.get(&id) {
                Some(prev) => (p - *prev, false),
                None => (Vec2::zero(), true),
            };
            states.insert(
                id,
                PedestrianState {
                    p_x: p.x,
                    p_y: p.y,
                    dp_x: dp.x,
                    dp_y: dp.y,
                    velocity_filled: filled,
                },
            );
            centers.insert(id, p);
        }
        prev_centers = centers;
        frames.push(ObservationFrame {
            frame,
            candidates,
            states,
        });
    }
    let heights = others.iter().map(|t| (t.ped_id, t.height_h)).collect();
    let initial_positions = others
        .iter()
        .filter_map(|t| t.position_at(first).map(|p| (t.ped_id, p)))
        .collect();
    let mut entry_positions = BTreeMap::new();
    for t in &others {
        let Some(k0) = frames.iter().position(|f| f.is_visible(t.ped_id)) else { continue };
        let entries: Vec<_> = frames[k0..]
            .iter()
            .take(2)
            .filter_map(|f| t.position_at(f.frame).map(|p| (f.frame, p)))
            .collect();
        entry_positions.insert(t.ped_id, entries);
    }
    Ok(ObservationSequence {
        observer_id,
        frames,
        observer_truth: poses,
        intrinsics: *intr,
        heights,
        initial_positions,
        entry_positions,
    })
}

/// Mounted observations with isotropic Gaussian noise on the box centres.
/// Velocities are recomputed from the noisy centres.
pub fn synthesize_observations(
    scene: &Scene,
    observer_id: u64,
    intr: &CameraIntrinsics<f64>,
    noise_sigma: f64,
    seed: u64,
) -> Result<ObservationSequence> {
    if !(noise_sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise sigma must be non-negative, got {noise_sigma}")));
    }
    let mut seq = mount_camera(scene, observer_id, intr)?;
    if noise_sigma > 0.0 {
        add_center_noise(&mut seq, noise_sigma, seed)?;
    }
    Ok(seq)
}

/// Perturbs every visible centre with `N(0, sigma^2)` per axis and rebuilds
/// the displacements.
pub fn add_center_noise(seq: &mut ObservationSequence, sigma: f64, seed: u64) -> Result<()> {
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prev: BTreeMap<u64, Vec2<f64>> = BTreeMap::new();
    for frame in &mut seq.frames {
        let mut centers = BTreeMap::new();
        for (id, s) in frame.states.iter_mut() {
            s.p_x += normal.sample(&mut rng);
            s.p_y += normal.sample(&mut rng);
            let dp = prev.get(id).map_or(Vec2::zero(), |p| s.center() - *p);
            s.dp_x = dp.x;
            s.dp_y = dp.y;
            centers.insert(*id, s.center());
        }
        prev = centers;
    }
    Ok(())
}

/// JSONL record of one (frame, candidate) observation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub frame: usize,
    pub id: u64,
    pub px: f64,
    pub py: f64,
    pub dpx: f64,
    pub dpy: f64,
    pub visible: bool,
    #[serde(default)]
    pub vel_filled: bool,
}

/// Sidecar record stream carrying ground truth and camera parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SidecarRecord {
    Camera {
        observer_id: u64,
        intrinsics: CameraIntrinsics<f64>,
    },
    Height {
        id: u64,
        h: f64,
    },
    Pose {
        frame: usize,
        c_x: f64,
        c_y: f64,
        theta_z: f64,
    },
    Init {
        id: u64,
        x: f64,
        y: f64,
    },
    Entry {
        id: u64,
        frame: usize,
        x: f64,
        y: f64,
    },
}

impl ObservationSequence {
    /// Serializes to `(observations, sidecar)` JSONL texts.
    pub fn to_jsonl(&self) -> (String, String) {
        let mut obs = String::new();
        for f in &self.frames {
            for &id in &f.candidates {
                let rec = match f.states.get(&id) {
                    Some(s) => ObservationRecord {
                        frame: f.frame,
                        id,
                        px: s.p_x,
                        py: s.p_y,
                        dpx: s.dp_x,
                        dpy: s.dp_y,
                        visible: true,
                        vel_filled: s.velocity_filled,
                    },
                    None => ObservationRecord {
                        frame: f.frame,
                        id,
                        px: 0.0,
                        py: 0.0,
                        dpx: 0.0,
                        dpy: 0.0,
                        visible: false,
                        vel_filled: false,
                    },
                };
                obs.push_str(&serde_json::to_string(&rec).expect("record serializes"));
                obs.push('\n');
            }
        }
        let mut side = Vec::new();
        side.push(SidecarRecord::Camera {
            observer_id: self.observer_id,
            intrinsics: self.intrinsics,
        });
        side.extend(self.heights.iter().map(|(&id, &h)| SidecarRecord::Height { id, h }));
        side.extend(self.frames.iter().zip(&self.observer_truth).map(|(f, p)| SidecarRecord::Pose {
            frame: f.frame,
            c_x: p.c_x,
            c_y: p.c_y,
            theta_z: p.theta_z,
        }));
        side.extend(
            self.initial_positions
                .iter()
                .map(|(&id, p)| SidecarRecord::Init { id, x: p.x, y: p.y }),
        );
        for (&id, entries) in &self.entry_positions {
            side.extend(entries.iter().map(|&(frame, p)| SidecarRecord::Entry {
                id,
                frame,
                x: p.x,
                y: p.y,
            }));
        }
        let mut sidecar = String::new();
        for r in &side {
            sidecar.push_str(&serde_json::to_string(r).expect("record serializes"));
            sidecar.push('\n');
        }
        (obs, sidecar)
    }

    pub fn from_jsonl(obs: &str, sidecar: &str) -> Result<Self> {
        let mut observer_id = None;
        let mut intrinsics = None;
        let mut heights = BTreeMap::new();
        let mut poses = BTreeMap::new();
        let mut initial_positions = BTreeMap::new();
        let mut entry_positions: BTreeMap<u64, Vec<(usize, Vec2<f64>)>> = BTreeMap::new();
        for (i, line) in sidecar.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: SidecarRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            match rec {
                SidecarRecord::Camera {
                    observer_id: o,
                    intrinsics: a,
                } => {
                    observer_id = Some(o);
                    intrinsics = Some(a);
                }
                SidecarRecord::Height { id, h } => {
                    heights.insert(id, h);
                }
                SidecarRecord::Pose {
                    frame,
                    c_x,
                    c_y,
                    theta_z,
                } => {
                    poses.insert(frame, Pose::new(c_x, c_y, theta_z));
                }
                SidecarRecord::Init { id, x, y } => {
                    initial_positions.insert(id, Vec2::new(x, y));
                }
                SidecarRecord::Entry { id, frame, x, y } => {
                    entry_positions.entry(id).or_default().push((frame, Vec2::new(x, y)));
                }
            }
        }
        let (Some(observer_id), Some(intrinsics)) = (observer_id, intrinsics) else {
            return Err(Error::Parse {
                line: 0,
                msg: "sidecar has no camera record".into(),
            });
        };
        let mut by_frame: BTreeMap<usize, ObservationFrame> = poses
            .keys()
            .map(|&frame| {
                (
                    frame,
                    ObservationFrame {
                        frame,
                        candidates: Vec::new(),
                        states: BTreeMap::new(),
                    },
                )
            })
            .collect();
        for (i, line) in obs.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: ObservationRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            let f = by_frame.get_mut(&rec.frame).ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("frame {} has no observer pose", rec.frame),
            })?;
            f.candidates.push(rec.id);
            if rec.visible {
                f.states.insert(
                    rec.id,
                    PedestrianState {
                        p_x: rec.px,
                        p_y: rec.py,
                        dp_x: rec.dpx,
                        dp_y: rec.dpy,
                        velocity_filled: rec.vel_filled,
                    },
                );
            }
        }
        Ok(Self {
            observer_id,
            observer_truth: poses.into_values().collect(),
            frames: by_frame.into_values().collect(),
            intrinsics,
            heights,
            initial_positions,
            entry_positions,
        })
    }
}
