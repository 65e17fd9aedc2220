//! Ground-truth crowd trajectories: analytic motion models, scene
//! generation and trajectory file ingestion.

mod io;
mod motion;

pub use io::{load_trajectory_file, parse_eth_ucy, parse_jsonl, write_jsonl, LoadOptions, SceneRecord, TrajectoryFormat};
pub use motion::{
    generate_scene, step_constant_velocity, step_social_force, HeightSpec, MotionModel, SimConfig, SocialForceParams,
    SocialForceStep,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec2;

/// Default frame interval in seconds.
pub const DEFAULT_FRAME_INTERVAL: f64 = 0.4;

/// On-ground trajectory of one pedestrian over a contiguous frame range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTrack {
    pub ped_id: u64,
    pub first_frame: usize,
    pub positions: Vec<Vec2<f64>>,
    /// Per-frame displacement in metres/frame. The entry for the first
    /// frame is zero.
    pub velocities: Vec<Vec2<f64>>,
    pub height_h: f64,
}

impl GroundTrack {
    pub fn from_positions(ped_id: u64, first_frame: usize, positions: Vec<Vec2<f64>>, height_h: f64) -> Self {
        let mut track = Self {
            ped_id,
            first_frame,
            velocities: Vec::new(),
            positions,
            height_h,
        };
        track.recompute_velocities();
        track
    }

    pub fn recompute_velocities(&mut self) {
        self.velocities = std::iter::once(Vec2::zero())
            .chain(self.positions.windows(2).map(|w| w[1] - w[0]))
            .take(self.positions.len())
            .collect();
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Last frame index covered by the track (inclusive).
    pub fn last_frame(&self) -> usize {
        self.first_frame + self.positions.len().saturating_sub(1)
    }

    pub fn contains(&self, frame: usize) -> bool {
        !self.is_empty() && frame >= self.first_frame && frame <= self.last_frame()
    }

    pub fn position_at(&self, frame: usize) -> Option<Vec2<f64>> {
        self.contains(frame).then(|| self.positions[frame - self.first_frame])
    }

    pub fn velocity_at(&self, frame: usize) -> Option<Vec2<f64>> {
        self.contains(frame).then(|| self.velocities[frame - self.first_frame])
    }
}

/// A set of pedestrian tracks sharing one frame index space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub tracks: Vec<GroundTrack>,
    pub frame_count: usize,
    /// Seconds between consecutive frames.
    pub frame_interval: f64,
}

impl Scene {
    pub fn new(mut tracks: Vec<GroundTrack>, frame_interval: f64) -> Self {
        tracks.sort_by_key(|t| t.ped_id);
        let frame_count = tracks.iter().filter(|t| !t.is_empty()).map(|t| t.last_frame() + 1).max().unwrap_or(0);
        Self {
            tracks,
            frame_count,
            frame_interval,
        }
    }

    pub fn empty(frame_interval: f64) -> Self {
        Self::new(Vec::new(), frame_interval)
    }

    pub fn track(&self, id: u64) -> Option<&GroundTrack> {
        self.tracks.iter().find(|t| t.ped_id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.tracks.iter().map(|t| t.ped_id)
    }

    pub fn position_count(&self) -> usize {
        self.tracks.iter().map(GroundTrack::len).sum()
    }

    /// Mean of every stored position.
    pub fn mean_position(&self) -> Option<Vec2<f64>> {
        let n = self.position_count();
        if n == 0 {
            return None;
        }
        let sum = self
            .tracks
            .iter()
            .flat_map(|t| t.positions.iter())
            .fold(Vec2::zero(), |acc, p| acc + *p);
        Some(sum.scale(1.0 / n as f64))
    }
}

/// Shifts a scene so that the mean of all positions over all frames is the
/// origin.
pub fn center_scene(scene: &Scene) -> Result<Scene> {
    let mean = scene.mean_position().ok_or(Error::EmptyScene)?;
    let mut out = scene.clone();
    for track in &mut out.tracks {
        for p in &mut track.positions {
            *p = *p - mean;
        }
        track.recompute_velocities();
    }
    Ok(out)
}

/// The scene expressed in another world frame: every position becomes
/// `R(rotation) p + translation`.
pub fn transform_scene(scene: &Scene, rotation: f64, translation: Vec2<f64>) -> Scene {
    let r = crate::geometry::Rot2::new(rotation);
    let mut out = scene.clone();
    for track in &mut out.tracks {
        for p in &mut track.positions {
            *p = r.apply(*p) + translation;
        }
        track.recompute_velocities();
    }
    out
}
