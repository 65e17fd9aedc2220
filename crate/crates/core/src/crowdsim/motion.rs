use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GroundTrack, Scene, DEFAULT_FRAME_INTERVAL};
use crate::error::{Error, Result};
use crate::geometry::Vec2;

/// Constant-velocity step: `x' = x + v` for every pedestrian.
pub fn step_constant_velocity(positions: &[Vec2<f64>], velocities: &[Vec2<f64>]) -> Result<Vec<Vec2<f64>>> {
    if positions.len() != velocities.len() {
        return Err(Error::LengthMismatch(positions.len(), velocities.len()));
    }
    Ok(positions.iter().zip(velocities).map(|(x, v)| *x + *v).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SocialForceParams {
    /// m/s
    pub desired_speed: f64,
    /// s
    pub relaxation_time: f64,
    /// m/s^2
    pub repulsion_strength: f64,
    /// m
    pub repulsion_range: f64,
}

impl Default for SocialForceParams {
    fn default() -> Self {
        Self {
            desired_speed: 1.34,
            relaxation_time: 0.5,
            repulsion_strength: 2.1,
            repulsion_range: 0.3,
        }
    }
}

/// Upper bound on speed as a multiple of the desired speed.
const MAX_SPEED_FACTOR: f64 = 1.3;
const COINCIDENT_DISTANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct SocialForceStep {
    pub positions: Vec<Vec2<f64>>,
    /// m/frame, exactly `positions - previous positions`.
    pub velocities: Vec<Vec2<f64>>,
}

/// One symplectic-Euler step of the social-force model.
///
/// Velocities are given and returned in metres per frame; `dt` is the frame
/// interval in seconds.
pub fn step_social_force(
    positions: &[Vec2<f64>],
    velocities: &[Vec2<f64>],
    goals: &[Vec2<f64>],
    params: &SocialForceParams,
    dt: f64,
) -> Result<SocialForceStep> {
    let n = positions.len();
    if velocities.len() != n {
        return Err(Error::LengthMismatch(n, velocities.len()));
    }
    if goals.len() != n {
        return Err(Error::LengthMismatch(n, goals.len()));
    }
    if !(params.relaxation_time > 0.0 && params.repulsion_range > 0.0 && dt > 0.0) {
        return Err(Error::InvalidArgument(
            "relaxation time, repulsion range and dt must be positive".into(),
        ));
    }
    let v0 = params.desired_speed;
    let max_speed = MAX_SPEED_FACTOR * v0;
    let mut next_pos = Vec::with_capacity(n);
    let mut next_vel = Vec::with_capacity(n);
    for i in 0..n {
        let x = positions[i];
        let v = velocities[i].scale(1.0 / dt);
        let to_goal = goals[i] - x;
        let dist = to_goal.norm();
        let e = if dist > 1e-9 { to_goal.scale(1.0 / dist) } else { Vec2::zero() };
        let mut force = (e.scale(v0) - v).scale(1.0 / params.relaxation_time);
        if params.repulsion_strength != 0.0 {
            for j in (0..n).filter(|&j| j != i) {
                let d = x - positions[j];
                let r = d.norm();
                let dir = if r < COINCIDENT_DISTANCE {
                    log::warn!("pedestrians {i} and {j} coincide; using fixed repulsion direction");
                    if i < j {
                        Vec2::new(1.0, 0.0)
                    } else {
                        Vec2::new(-1.0, 0.0)
                    }
                } else {
                    d.scale(1.0 / r)
                };
                force = force + dir.scale(params.repulsion_strength * (-r / params.repulsion_range).exp());
            }
        }
        let mut v_new = v + force.scale(dt);
        let speed = v_new.norm();
        if speed > max_speed {
            v_new = if max_speed > 0.0 { v_new.scale(max_speed / speed) } else { Vec2::zero() };
        }
        let x_new = x + v_new.scale(dt);
        next_vel.push(x_new - x);
        next_pos.push(x_new);
    }
    Ok(SocialForceStep {
        positions: next_pos,
        velocities: next_vel,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionModel {
    ConstantVelocity,
    SocialForce,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeightSpec {
    Uniform { min: f64, max: f64 },
    Constant(f64),
}

impl Default for HeightSpec {
    fn default() -> Self {
        HeightSpec::Uniform { min: 1.6, max: 1.8 }
    }
}

/// Synthetic scene recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub model: MotionModel,
    pub pedestrians: usize,
    pub frames: usize,
    pub seed: u64,
    pub frame_interval: f64,
    /// Start positions are drawn from `[-e, e]^2`.
    pub area_half_extent: f64,
    /// Walking speed range in m/s.
    pub speed_range: (f64, f64),
    /// Headings are drawn within `+-heading_spread` of a common random
    /// direction; `pi` gives isotropic headings.
    pub heading_spread: f64,
    pub height: HeightSpec,
    pub social_force: SocialForceParams,
    /// Minimum distance between any two walkers. Constant-velocity walkers
    /// are redrawn until it holds over the whole scene, social-force ones
    /// only at the start. Zero disables the check.
    #[serde(default)]
    pub min_separation: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            model: MotionModel::ConstantVelocity,
            pedestrians: 10,
            frames: 20,
            seed: 0,
            frame_interval: DEFAULT_FRAME_INTERVAL,
            area_half_extent: 5.0,
            speed_range: (0.8, 1.4),
            heading_spread: std::f64::consts::PI,
            height: HeightSpec::default(),
            social_force: SocialForceParams::default(),
            min_separation: 0.0,
        }
    }
}

const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

/// Closest approach of two constant-velocity walkers over frames `0..frames`.
fn closest_approach(p: Vec2<f64>, v: Vec2<f64>, q: Vec2<f64>, w: Vec2<f64>, frames: usize) -> f64 {
    let a = p - q;
    let b = v - w;
    let bb = b.norm_squared();
    let last = frames.saturating_sub(1) as f64;
    let t = if bb > 0.0 { (-a.dot(b) / bb).clamp(0.0, last) } else { 0.0 };
    (a + b.scale(t)).norm()
}

/// Generates a deterministic synthetic scene from a recipe.
pub fn generate_scene(cfg: &SimConfig) -> Result<Scene> {
    if cfg.frames == 0 || !(cfg.frame_interval > 0.0) {
        return Err(Error::InvalidArgument("need at least one frame and a positive frame interval".into()));
    }
    if cfg.speed_range.0 > cfg.speed_range.1 || cfg.speed_range.0 < 0.0 {
        return Err(Error::InvalidArgument("invalid speed range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dt = cfg.frame_interval;
    let base_heading = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let mut pos = Vec::with_capacity(cfg.pedestrians);
    let mut vel = Vec::with_capacity(cfg.pedestrians);
    let mut heights = Vec::with_capacity(cfg.pedestrians);
    let horizon = match cfg.model {
        MotionModel::ConstantVelocity => cfg.frames,
        MotionModel::SocialForce => 1,
    };
    for i in 0..cfg.pedestrians {
        let e = cfg.area_half_extent;
        let mut attempts = 0;
        let (p, v) = loop {
            let p = Vec2::new(rng.random_range(-e..=e), rng.random_range(-e..=e));
            let heading = base_heading + cfg.heading_spread * rng.random_range(-1.0..=1.0);
            let speed = rng.random_range(cfg.speed_range.0..=cfg.speed_range.1);
            let v = Vec2::new(heading.cos(), heading.sin()).scale(speed * dt);
            let clear = cfg.min_separation <= 0.0
                || pos.iter().zip(&vel).all(|(q, w)| closest_approach(p, v, *q, *w, horizon) >= cfg.min_separation);
            if clear {
                break (p, v);
            }
            attempts += 1;
            if attempts == MAX_PLACEMENT_ATTEMPTS {
                return Err(Error::InvalidArgument(format!(
                    "could not place walker {i} at least {} m from the others",
                    cfg.min_separation
                )));
            }
        };
        pos.push(p);
        vel.push(v);
        heights.push(match cfg.height {
            HeightSpec::Uniform { min, max } => rng.random_range(min..=max),
            HeightSpec::Constant(h) => h,
        });
    }
    let goals: Vec<_> = pos
        .iter()
        .zip(&vel)
        .map(|(x, v)| {
            let n = v.norm();
            if n > 0.0 {
                *x + v.scale(4.0 * cfg.area_half_extent / n)
            } else {
                *x
            }
        })
        .collect();
    let mut history = vec![pos.clone()];
    for _ in 1..cfg.frames {
        match cfg.model {
            MotionModel::ConstantVelocity => {
                pos = step_constant_velocity(&pos, &vel)?;
            }
            MotionModel::SocialForce => {
                let step = step_social_force(&pos, &vel, &goals, &cfg.social_force, dt)?;
                pos = step.positions;
                vel = step.velocities;
            }
        }
        history.push(pos.clone());
    }
    let tracks = (0..cfg.pedestrians)
        .map(|i| {
            let positions = history.iter().map(|frame| frame[i]).collect();
            GroundTrack::from_positions(i as u64 + 1, 0, positions, heights[i])
        })
        .collect();
    Ok(Scene::new(tracks, dt))
}
