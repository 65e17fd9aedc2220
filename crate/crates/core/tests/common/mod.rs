#![allow(dead_code)]

use birdview::crowdsim::{generate_scene, GroundTrack, HeightSpec, MotionModel, Scene, SimConfig};
use birdview::geometry::{CameraIntrinsics, Vec2};
use birdview::training::{Episode, TrainConfig};

/// Five constant-velocity walkers heading roughly the same way, kept at
/// least a metre apart.
pub fn small_crowd(seed: u64) -> Scene {
    generate_scene(&SimConfig {
        model: MotionModel::ConstantVelocity,
        pedestrians: 5,
        frames: 20,
        seed,
        heading_spread: 0.1,
        area_half_extent: 3.0,
        height: HeightSpec::Constant(1.7),
        min_separation: 1.0,
        ..SimConfig::default()
    })
    .unwrap()
}

/// The ego-view of the walker that sees the most others.
pub fn best_episode(scene: &Scene) -> Episode {
    let intr = CameraIntrinsics::default();
    Episode::all_observers(scene, &intr, 0.0, 0)
        .unwrap()
        .into_iter()
        .max_by_key(|e| (e.seq.frames.iter().map(|f| f.states.len()).sum::<usize>(), std::cmp::Reverse(e.seq.observer_id)))
        .unwrap()
}

/// Trainer settings used to fit a single small-crowd sequence.
pub fn overfit_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2000,
        seed,
        window: 2,
        rollout_after: Some(500),
        lr_final_fraction: 0.05,
        ..TrainConfig::default()
    }
}

/// Observer walking up the y axis with 20 pedestrians ahead of it, all in
/// view for `frames` frames.
pub fn dense_front_crowd(frames: usize) -> Scene {
    let mut tracks = vec![GroundTrack::from_positions(
        0,
        0,
        (0..frames).map(|k| Vec2::new(0.0, 0.5 * k as f64)).collect(),
        1.7,
    )];
    for i in 0..20u64 {
        let f = i as f64;
        let (x, y, v) = (-2.0 + 0.2 * f, 3.0 + 0.35 * f, 0.4 + 0.01 * f);
        tracks.push(GroundTrack::from_positions(
            i + 1,
            0,
            (0..frames).map(|k| Vec2::new(x, y + v * k as f64)).collect(),
            1.7,
        ));
    }
    Scene::new(tracks, 0.4)
}
