use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use birdview::crowdsim::{
    generate_scene, load_trajectory_file, write_jsonl, HeightSpec, LoadOptions, MotionModel, Scene, SimConfig, TrajectoryFormat,
};
use birdview::egoview::{synthesize_observations, ObservationSequence};
use birdview::eval::{
    aggregate, frame_errors, run_benchmark, trajectory_svg, BenchmarkOptions, Method, MetricsReport, SequenceTruth, Split, SplitSpec,
};
use birdview::geometry::CameraIntrinsics;
use birdview::inference::{birdify_sequence, BirdifiedResult, BirdifyOptions, GeoVbConfig, PriorModel};
use birdview::model::{Model, ModelConfig};
use birdview::training::{loss_curve_csv, train_model, Episode, TrainConfig};

use crate::{BirdifyArgs, CameraArgs, CompareArgs, EvaluateArgs, MotionArg, PlotArgs, ProjectArgs, SimulateArgs, SplitArg, TrainArgs};

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn intrinsics(c: &CameraArgs) -> Result<CameraIntrinsics<f64>> {
    CameraIntrinsics::generic(c.fov, c.focal, c.camera_height).context("invalid camera")
}

/// `dir/name.ext` -> `dir/name<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn load_scene(path: &Path) -> Result<Scene> {
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") => TrajectoryFormat::InternalJsonl,
        Some("txt") | Some("csv") => TrajectoryFormat::EthUcyText,
        _ => bail!("{}: unknown scene format (expected .jsonl or .txt)", path.display()),
    };
    load_trajectory_file(path, format, &LoadOptions::default()).with_context(|| format!("cannot load scene {}", path.display()))
}

fn scene_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Every scene file of a directory, sorted by name.
fn load_dataset(dir: &Path) -> Result<Vec<(String, Scene)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("cannot list {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("jsonl" | "txt")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("{} contains no scene files", dir.display());
    }
    paths.iter().map(|p| Ok((scene_name(p), load_scene(p)?))).collect()
}

fn split_spec(split: SplitArg, test_scene: Option<&str>, scenes: &[(String, Scene)], seed: u64) -> Result<SplitSpec> {
    Ok(match split {
        SplitArg::Intra => SplitSpec::intra_scene(scenes, seed),
        SplitArg::Cross => {
            let test = test_scene.ok_or_else(|| anyhow!("--split cross needs --test-scene"))?;
            SplitSpec::cross_scene(scenes, test)?
        }
    })
}

pub fn simulate(a: SimulateArgs) -> Result<()> {
    let cfg = SimConfig {
        model: match a.model {
            MotionArg::Cv => MotionModel::ConstantVelocity,
            MotionArg::Sf => MotionModel::SocialForce,
        },
        pedestrians: a.n,
        frames: a.frames,
        seed: a.seed,
        heading_spread: a.heading_spread,
        area_half_extent: a.area,
        min_separation: a.min_separation,
        height: HeightSpec::default(),
        ..SimConfig::default()
    };
    let scene = generate_scene(&cfg)?;
    write(&a.out, &write_jsonl(&scene))
}

fn sidecar_path(obs: &Path, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| sibling(obs, ".sidecar.jsonl"))
}

pub fn project(a: ProjectArgs) -> Result<()> {
    let scene = load_scene(&a.scene)?;
    let intr = intrinsics(&a.camera)?;
    let seq = synthesize_observations(&scene, a.observer, &intr, a.noise, a.seed)?;
    let (obs, sidecar) = seq.to_jsonl();
    write(&a.out, &obs)?;
    write(&sidecar_path(&a.out, a.sidecar), &sidecar)
}

fn episodes(scenes: &[(String, Scene)], keys: &[(String, u64)], intr: &CameraIntrinsics<f64>, noise: f64, seed: u64) -> Result<Vec<Episode>> {
    let by_name: BTreeMap<&str, &Scene> = scenes.iter().map(|(n, s)| (n.as_str(), s)).collect();
    keys.iter()
        .map(|(name, id)| {
            let scene = by_name[name.as_str()];
            Episode::from_scene(scene, *id, intr, noise, seed.wrapping_add(*id)).with_context(|| format!("observer {id} of {name}"))
        })
        .collect()
}

pub fn train(a: TrainArgs) -> Result<()> {
    let scenes = load_dataset(&a.data)?;
    let spec = split_spec(a.split, a.test_scene.as_deref(), &scenes, a.seed)?;
    let intr = intrinsics(&a.camera)?;
    let keys = spec.sequences(Split::Train);
    if keys.is_empty() {
        bail!("the training split is empty");
    }
    let eps = episodes(&scenes, &keys, &intr, a.noise, a.seed)?;
    let model_cfg = if a.motion_only {
        ModelConfig::motion_only()
    } else {
        ModelConfig {
            use_relative_transform: !a.no_reltransform,
            ..ModelConfig::default()
        }
    };
    let cfg = TrainConfig {
        epochs: a.epochs,
        seed: a.seed,
        curriculum_epochs: a.curriculum_epochs.min(a.epochs),
        lr: a.lr,
        window: a.window,
        teacher_forcing: !a.no_teacher_forcing,
        rollout_after: a.rollout_after,
        lr_final_fraction: a.lr_final_fraction,
        split: match a.split {
            SplitArg::Intra => birdview::training::SplitMode::IntraScene,
            SplitArg::Cross => birdview::training::SplitMode::CrossScene,
        },
        ..TrainConfig::default()
    };
    log::info!("training on {} sequences for {} epochs", eps.len(), cfg.epochs);
    let model = Model::new(model_cfg, a.seed)?;
    let mut save_error = None;
    let report = train_model(model, &eps, &cfg, |rec, m| {
        if a.checkpoint_every > 0 && (rec.epoch + 1) % a.checkpoint_every == 0 {
            if let Err(e) = m.to_checkpoint().map_err(anyhow::Error::from).and_then(|t| write(&a.out, &t)) {
                save_error.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = save_error {
        return Err(e.context("periodic checkpoint failed"));
    }
    write(&a.out, &report.model.to_checkpoint()?)?;
    write(&a.loss_csv.unwrap_or_else(|| sibling(&a.out, ".loss.csv")), &loss_curve_csv(&report.curve))?;
    if let Some(epoch) = report.diverged_at {
        bail!("training diverged at epoch {epoch}; the last finite model was saved to {}", a.out.display());
    }
    if let Some(last) = report.curve.last() {
        println!("epoch {} total loss {:.6}", last.epoch, last.total);
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<Model> {
    Model::from_checkpoint(&read(path)?).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

pub fn birdify(a: BirdifyArgs) -> Result<()> {
    let seq = ObservationSequence::from_jsonl(&read(&a.obs)?, &read(&sidecar_path(&a.obs, a.sidecar))?)?;
    let model = load_model(&a.ckpt)?;
    if a.no_reltransform && model.config.use_relative_transform {
        bail!("--no-reltransform needs a checkpoint trained with `train --no-reltransform`");
    }
    if !a.no_reltransform && !model.config.use_relative_transform && !model.config.motion_only {
        bail!("checkpoint was trained without the relative transform; pass --no-reltransform");
    }
    let result = birdify_sequence(&seq, &model, BirdifyOptions { refine: a.refine })?;
    write(&a.out, &result.to_jsonl()?)
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let result = BirdifiedResult::from_jsonl(&read(&a.result)?)?;
    let scene = load_scene(&a.truth)?;
    let truth = SequenceTruth::from_scene(&scene, result.observer_id)?;
    let metrics = aggregate(&frame_errors(&result, &truth)?);
    let mut report = MetricsReport::default();
    report.0.entry(result.method.clone()).or_default().insert(scene_name(&a.truth), metrics.clone());
    write(&a.out, &report.to_json()?)?;
    let show = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    println!(
        "{}: dx {} dx_rel {} dt {} dr {}",
        result.method,
        show(metrics.dx),
        show(metrics.dx_rel),
        show(metrics.dt),
        show(metrics.dr)
    );
    Ok(())
}

pub fn compare(a: CompareArgs) -> Result<()> {
    let scenes = load_dataset(&a.data)?;
    let spec = split_spec(a.split, a.test_scene.as_deref(), &scenes, a.seed)?;
    let need = |p: &Option<PathBuf>, flag: &str, method: &str| -> Result<Model> {
        let path = p.as_ref().ok_or_else(|| anyhow!("method {method} needs {flag}"))?;
        load_model(path)
    };
    let mut models: BTreeMap<String, Model> = BTreeMap::new();
    for m in &a.methods {
        match m.as_str() {
            "vbf" | "vbf+refine" => {
                if !models.contains_key("vbf") {
                    models.insert("vbf".into(), need(&a.ckpt, "--ckpt", m)?);
                }
            }
            "transmotion" => {
                models.insert(m.clone(), need(&a.transmotion_ckpt, "--transmotion-ckpt", m)?);
            }
            "vbf-noreltransform" => {
                models.insert(m.clone(), need(&a.noreltransform_ckpt, "--noreltransform-ckpt", m)?);
            }
            "geovb-cv" | "geovb-sf" => {}
            other => bail!("unknown method {other}"),
        }
    }
    let geovb = GeoVbConfig {
        samples: a.geovb_samples,
        iterations: a.geovb_iterations,
        ..GeoVbConfig::default()
    };
    geovb.validate()?;
    let methods: Vec<(String, Method<'_>)> = a
        .methods
        .iter()
        .map(|m| {
            let method = match m.as_str() {
                "vbf" => Method::Network {
                    model: &models["vbf"],
                    refine: false,
                },
                "vbf+refine" => Method::Network {
                    model: &models["vbf"],
                    refine: true,
                },
                "geovb-cv" => Method::GeoVb {
                    prior: PriorModel::ConstantVelocity,
                    config: geovb,
                },
                "geovb-sf" => Method::GeoVb {
                    prior: PriorModel::SocialForce,
                    config: geovb,
                },
                other => Method::Network {
                    model: &models[other],
                    refine: false,
                },
            };
            (m.clone(), method)
        })
        .collect();
    let opts = BenchmarkOptions {
        intrinsics: intrinsics(&a.camera)?,
        noise: a.noise,
        seed: a.seed,
        timing: !a.no_timing,
    };
    let (report, dump) = run_benchmark(&spec, &methods, &scenes, &opts)?;
    write(&a.out, &report.to_csv())?;
    write(&a.out.with_extension("json"), &report.to_json()?)?;
    if let Some(path) = a.dump {
        let lines: Vec<String> = dump.iter().map(serde_json::to_string).collect::<std::result::Result<_, _>>()?;
        write(&path, &(lines.join("\n") + "\n"))?;
    }
    print!("{}", report.to_csv());
    Ok(())
}

pub fn plot(a: PlotArgs) -> Result<()> {
    let result = BirdifiedResult::from_jsonl(&read(&a.result)?)?;
    let truth = match &a.truth {
        Some(p) => Some(SequenceTruth::from_scene(&load_scene(p)?, result.observer_id)?),
        None => None,
    };
    write(&a.out, &trajectory_svg(&result, truth.as_ref()))
}
