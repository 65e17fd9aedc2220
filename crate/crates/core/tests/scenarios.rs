mod common;

use std::time::Instant;

use birdview::autodiff::Tensor;
use birdview::crowdsim::{generate_scene, GroundTrack, HeightSpec, Scene, SimConfig};
use birdview::egoview::synthesize_observations;
use birdview::geometry::{CameraIntrinsics, Vec2};
use birdview::inference::{
    birdify_sequence, geovb_solve, transmotion_predict, BirdifyOptions, GeoVbConfig, PriorModel, RolloutState, TrackEstimate,
};
use birdview::model::{FrameInputs, Model, ModelConfig};
use birdview::training::{train, Episode, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fastest of several timed runs, in milliseconds.
fn best_ms(reps: usize, mut f: impl FnMut()) -> f64 {
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64() * 1e3
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn static_crowd_gives_near_zero_ego_motion() {
    // Everybody stands still; the observer faces +y.
    let stand = |id, x, y| GroundTrack::from_positions(id, 0, vec![Vec2::new(x, y); 8], 1.7);
    let scene = Scene::new(
        vec![stand(0, 0.0, 0.0), stand(1, -1.0, 3.0), stand(2, 0.5, 4.0), stand(3, 1.5, 6.0), stand(4, -2.0, 7.5)],
        0.4,
    );
    let ep = Episode::from_scene(&scene, 0, &CameraIntrinsics::default(), 0.0, 0).unwrap();
    assert_eq!(ep.seq.frames[0].states.len(), 4);
    let cfg = TrainConfig {
        epochs: 600,
        curriculum_epochs: 100,
        rollout_after: Some(200),
        ..common::overfit_config(0)
    };
    let report = train(std::slice::from_ref(&ep), ModelConfig::default(), &cfg).unwrap();
    let result = birdify_sequence(&ep.seq, &report.model, BirdifyOptions::default()).unwrap();
    for f in &result.frames[1..] {
        let d = f.delta.unwrap();
        assert!(d.translation().norm() < 1e-3 && d.d_theta.abs() < 1e-3, "frame {}: {d:?}", f.frame);
        for p in &f.peds {
            let truth = scene.track(p.id).unwrap().positions[0];
            assert!((p.position() - truth).norm() < 0.03, "pedestrian {} at frame {}", p.id, f.frame);
        }
    }
}

fn cv_episodes(scenes: u64) -> Vec<Episode> {
    let intr = CameraIntrinsics::default();
    let mut episodes = Vec::new();
    for seed in 0..scenes {
        let scene = generate_scene(&SimConfig {
            pedestrians: 8,
            frames: 12,
            seed,
            height: HeightSpec::Constant(1.7),
            ..SimConfig::default()
        })
        .unwrap();
        episodes.extend(Episode::all_observers(&scene, &intr, 0.0, 0).unwrap());
    }
    episodes
}

/// Mean and worst distance between one extrapolation step and the exact
/// constant-velocity step, over fresh walkers inside the training area.
fn cv_deviation(model: &Model) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (mut sum, mut worst, mut n) = (0.0, 0.0_f64, 0);
    for _ in 0..20 {
        let tracks: Vec<TrackEstimate> = (0..rng.random_range(1..8))
            .map(|_| {
                let heading: f64 = rng.random_range(-3.1..3.1);
                let speed = rng.random_range(0.8..1.4) * 0.4;
                TrackEstimate {
                    position: Vec2::new(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)),
                    velocity: Vec2::new(heading.cos() * speed, heading.sin() * speed),
                }
            })
            .collect();
        let next = transmotion_predict(model, &tracks).unwrap();
        for (t, p) in tracks.iter().zip(&next) {
            let e = (p.position - (t.position + t.velocity)).norm();
            sum += e;
            worst = worst.max(e);
            n += 1;
        }
    }
    (sum / n as f64, worst)
}

#[test]
fn motion_only_training_approaches_constant_velocity() {
    let cfg = TrainConfig {
        epochs: 150,
        curriculum_epochs: 0,
        window: 4,
        ..TrainConfig::default()
    };
    let fresh = Model::new(ModelConfig::motion_only(), cfg.seed).unwrap();
    let report = train(&cv_episodes(3), ModelConfig::motion_only(), &cfg).unwrap();
    assert!(report.diverged_at.is_none());
    let (before, _) = cv_deviation(&fresh);
    let (after, _) = cv_deviation(&report.model);
    assert!(after < 0.5 * before, "mean deviation {before:.3} m -> {after:.3} m");
}

#[test]
#[ignore = "the motion-only network plateaus around 0.2 m mean deviation; see README"]
fn motion_only_model_matches_constant_velocity() {
    let cfg = TrainConfig {
        epochs: 600,
        curriculum_epochs: 0,
        window: 4,
        lr_final_fraction: 0.1,
        ..TrainConfig::default()
    };
    let report = train(&cv_episodes(12), ModelConfig::motion_only(), &cfg).unwrap();
    let (mean, worst) = cv_deviation(&report.model);
    assert!(worst < 0.02, "deviation from constant velocity: mean {mean:.3} m, worst {worst:.3} m");
}

#[test]
fn geovb_cost_grows_with_the_cube_of_the_samples() {
    let seq = synthesize_observations(&common::dense_front_crowd(4), 0, &CameraIntrinsics::default(), 0.0, 0).unwrap();
    let gauge = RolloutState::from_two_frame_gauge(&seq).unwrap();
    let time = |samples| {
        let cfg = GeoVbConfig {
            samples,
            iterations: 3,
            ..GeoVbConfig::default()
        };
        best_ms(5, || {
            std::hint::black_box(geovb_solve(&seq, &seq.frames[2], &gauge, PriorModel::ConstantVelocity, &cfg).unwrap());
        })
    };
    let (small, large) = (time(8), time(16));
    let exponent = (large / small).log2();
    assert!((exponent - 3.0).abs() <= 0.3, "exponent {exponent:.2} ({small:.3} ms -> {large:.3} ms)");
}

#[test]
fn forward_cost_is_at_most_quadratic_in_crowd_size() {
    let model = Model::new(ModelConfig::default(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut inputs = |n: usize| {
        let mut rand = |scale: f64| {
            let data = (0..n * 4).map(|_| rng.random_range(-scale..scale)).collect();
            Tensor::from_vec(n, 4, data).unwrap()
        };
        FrameInputs {
            states: rand(1.0),
            ego_query: [0.0, 0.4, 0.01],
            ped_queries: rand(5.0),
            visible: None,
        }
    };
    let (a, b) = (inputs(20), inputs(40));
    let t20 = best_ms(20, || {
        std::hint::black_box(model.predict(&a).unwrap());
    });
    let t40 = best_ms(20, || {
        std::hint::black_box(model.predict(&b).unwrap());
    });
    assert!(t40 / t20 < 5.0, "N=20 {t20:.3} ms, N=40 {t40:.3} ms");
}
