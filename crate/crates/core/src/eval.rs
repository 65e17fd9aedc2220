//! Reconstruction and ego-motion metrics, benchmark splits and reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crowdsim::Scene;
use crate::egoview::{observer_poses, synthesize_observations};
use crate::error::{Error, Result};
use crate::geometry::{rotation_error, CameraIntrinsics, Pose, PoseDelta, Vec2};
use crate::inference::{birdify_sequence, geovb_sequence, BirdifiedResult, BirdifyOptions, GeoVbConfig, PriorModel};
use crate::model::Model;
use crate::scalar::Scalar;

/// Positions of the pedestrians present in one frame, by id.
pub type FrameTracks<T> = BTreeMap<u64, Vec2<T>>;

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch(a, b));
    }
    if a == 0 {
        return Err(Error::EmptyIntersection);
    }
    Ok(())
}

fn mean<T: Scalar>(sum: T, n: usize) -> T {
    sum / T::from_usize(n).expect("count representable")
}

/// Mean Euclidean distance between estimated and true observer positions.
pub fn metric_delta_t<T: Scalar>(est: &[Vec2<T>], truth: &[Vec2<T>]) -> Result<T> {
    check_len(est.len(), truth.len())?;
    let sum = est.iter().zip(truth).fold(T::zero(), |acc, (a, b)| acc + (*a - *b).norm());
    Ok(mean(sum, est.len()))
}

/// Mean geodesic angle between estimated and true heading changes.
pub fn metric_delta_r<T: Scalar>(est: &[T], truth: &[T]) -> Result<T> {
    check_len(est.len(), truth.len())?;
    let sum = est.iter().zip(truth).fold(T::zero(), |acc, (e, t)| acc + rotation_error(*t, *e));
    Ok(mean(sum, est.len()))
}

/// Sum and count of distances over the (frame, id) pairs present in both.
fn paired_sum<T: Scalar>(
    est: &[FrameTracks<T>],
    truth: &[FrameTracks<T>],
    map_truth: impl Fn(usize, Vec2<T>) -> Vec2<T>,
) -> Result<(T, usize)> {
    if est.len() != truth.len() {
        return Err(Error::LengthMismatch(est.len(), truth.len()));
    }
    let mut sum = T::zero();
    let mut n = 0;
    for (k, (e, t)) in est.iter().zip(truth).enumerate() {
        for (id, x) in e {
            if let Some(tx) = t.get(id) {
                sum = sum + (*x - map_truth(k, *tx)).norm();
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyIntersection);
    }
    Ok((sum, n))
}

/// Mean world-frame pedestrian position error over matched pairs.
pub fn metric_delta_x<T: Scalar>(est: &[FrameTracks<T>], truth: &[FrameTracks<T>]) -> Result<T> {
    let (sum, n) = paired_sum(est, truth, |_, x| x)?;
    Ok(mean(sum, n))
}

/// Mean camera-relative position error. `est_rel[k]` is expressed in the
/// camera frame of `poses[k]`, and the truth is mapped into that same frame.
pub fn metric_delta_x_rel<T: Scalar>(est_rel: &[FrameTracks<T>], truth: &[FrameTracks<T>], poses: &[Pose<T>]) -> Result<T> {
    if poses.len() != est_rel.len() {
        return Err(Error::LengthMismatch(est_rel.len(), poses.len()));
    }
    let (sum, n) = paired_sum(est_rel, truth, |k, x| poses[k].to_camera(x))?;
    Ok(mean(sum, n))
}

/// Ground truth of one observer sequence, indexed by scene frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceTruth {
    pub first_frame: usize,
    pub poses: Vec<Pose<f64>>,
    pub tracks: Vec<FrameTracks<f64>>,
}

impl SequenceTruth {
    pub fn from_scene(scene: &Scene, observer_id: u64) -> Result<Self> {
        let (first_frame, poses) = observer_poses(scene, observer_id)?;
        let tracks = (first_frame..first_frame + poses.len())
            .map(|f| {
                scene
                    .tracks
                    .iter()
                    .filter(|t| t.ped_id != observer_id)
                    .filter_map(|t| Some((t.ped_id, t.position_at(f)?)))
                    .collect()
            })
            .collect();
        Ok(Self {
            first_frame,
            poses,
            tracks,
        })
    }

    fn index(&self, frame: usize) -> Option<usize> {
        frame.checked_sub(self.first_frame).filter(|&k| k < self.poses.len())
    }
}

/// Errors of one estimated frame, kept unaveraged so reports can be
/// rebuilt from them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameErrors {
    pub frame: usize,
    pub dt: Option<f64>,
    pub dr: Option<f64>,
    /// Per matched pedestrian, in id order.
    pub dx: Vec<f64>,
    pub dx_rel: Vec<f64>,
}

/// Per-frame errors of a birdified sequence. The first frame holds the
/// gauge and is not scored.
pub fn frame_errors(result: &BirdifiedResult, truth: &SequenceTruth) -> Result<Vec<FrameErrors>> {
    let mut out = Vec::new();
    let mut prev_pose: Option<Pose<f64>> = None;
    for f in &result.frames {
        let k = truth.index(f.frame).ok_or(Error::EmptyIntersection)?;
        let scored = k > 0;
        if scored {
            let true_pose = truth.poses[k];
            let true_delta = PoseDelta::between(&truth.poses[k - 1], &true_pose);
            let dt = f.pose.map(|p| (p.center() - true_pose.center()).norm());
            let dr = f.delta.map(|d| rotation_error(true_delta.d_theta, d.d_theta));
            let mut dx = Vec::new();
            let mut dx_rel = Vec::new();
            for p in &f.peds {
                let Some(tx) = truth.tracks[k].get(&p.id) else { continue };
                dx.push((p.position() - *tx).norm());
                if let Some(prev) = prev_pose {
                    let rel = match p.rel_prev {
                        Some(r) => Vec2::new(r[0], r[1]),
                        None => prev.to_camera(p.position()),
                    };
                    dx_rel.push((rel - prev.to_camera(*tx)).norm());
                }
            }
            out.push(FrameErrors {
                frame: f.frame,
                dt,
                dr,
                dx,
                dx_rel,
            });
        }
        prev_pose = f.pose;
    }
    Ok(out)
}

/// Averaged metrics; `None` where a method produces no such estimate.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub dx: Option<f64>,
    pub dx_rel: Option<f64>,
    pub dt: Option<f64>,
    pub dr: Option<f64>,
    pub ms_per_frame: Option<f64>,
    pub failures: usize,
}

/// Pooled averages over every scored frame and matched pair.
pub fn aggregate<'a>(frames: impl IntoIterator<Item = &'a FrameErrors>) -> SceneMetrics {
    let mut acc = [(0.0, 0usize); 4];
    let mut add = |slot: usize, v: f64| {
        acc[slot].0 += v;
        acc[slot].1 += 1;
    };
    for f in frames {
        f.dx.iter().for_each(|v| add(0, *v));
        f.dx_rel.iter().for_each(|v| add(1, *v));
        if let Some(v) = f.dt {
            add(2, v);
        }
        if let Some(v) = f.dr {
            add(3, v);
        }
    }
    let avg = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
    SceneMetrics {
        dx: avg(acc[0]),
        dx_rel: avg(acc[1]),
        dt: avg(acc[2]),
        dr: avg(acc[3]),
        ms_per_frame: None,
        failures: 0,
    }
}

/// `method -> scene -> metrics`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MetricsReport(pub BTreeMap<String, BTreeMap<String, SceneMetrics>>);

pub const REPORT_CSV_HEADER: &str = "method,scene,dx_rel,dx,dr,dt,ms_per_frame,failures";

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        let mut s = format!("{REPORT_CSV_HEADER}\n");
        for (method, scenes) in &self.0 {
            for (scene, m) in scenes {
                let _ = writeln!(
                    s,
                    "{method},{scene},{},{},{},{},{},{}",
                    opt(m.dx_rel),
                    opt(m.dx),
                    opt(m.dr),
                    opt(m.dt),
                    opt(m.ms_per_frame),
                    m.failures
                );
            }
        }
        s
    }

    pub fn get(&self, method: &str, scene: &str) -> Option<&SceneMetrics> {
        self.0.get(method)?.get(scene)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Key of one observer sequence: scene name and observer id.
pub type SequenceKey = (String, u64);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: crate::training::SplitMode,
    pub assignments: BTreeMap<String, BTreeMap<u64, Split>>,
}

/// Train, validation and test fractions of the intra-scene split.
pub const INTRA_FRACTIONS: (f64, f64) = (0.7, 0.1);

fn observers(scene: &Scene) -> Vec<u64> {
    scene.tracks.iter().filter(|t| t.len() >= 2).map(|t| t.ped_id).collect()
}

impl SplitSpec {
    /// Shuffles the observer sequences of every scene and cuts them 70/10/20.
    pub fn intra_scene(scenes: &[(String, Scene)], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let assignments = scenes
            .iter()
            .map(|(name, scene)| {
                let mut ids = observers(scene);
                ids.shuffle(&mut rng);
                let n = ids.len() as f64;
                let n_train = (n * INTRA_FRACTIONS.0).round() as usize;
                let n_val = (n * INTRA_FRACTIONS.1).round() as usize;
                let map = ids
                    .iter()
                    .enumerate()
                    .map(|(i, &id)| {
                        let s = if i < n_train {
                            Split::Train
                        } else if i < n_train + n_val {
                            Split::Val
                        } else {
                            Split::Test
                        };
                        (id, s)
                    })
                    .collect();
                (name.clone(), map)
            })
            .collect();
        Self {
            mode: crate::training::SplitMode::IntraScene,
            assignments,
        }
    }

    /// All sequences of `test_scene` are test data; one in ten of the
    /// remaining scenes' sequences is held out for validation.
    pub fn cross_scene(scenes: &[(String, Scene)], test_scene: &str) -> Result<Self> {
        if !scenes.iter().any(|(n, _)| n == test_scene) {
            return Err(Error::InvalidArgument(format!("unknown test scene {test_scene}")));
        }
        let assignments = scenes
            .iter()
            .map(|(name, scene)| {
                let map = observers(scene)
                    .into_iter()
                    .enumerate()
                    .map(|(i, id)| {
                        let s = if name == test_scene {
                            Split::Test
                        } else if i % 10 == 9 {
                            Split::Val
                        } else {
                            Split::Train
                        };
                        (id, s)
                    })
                    .collect();
                (name.clone(), map)
            })
            .collect();
        Ok(Self {
            mode: crate::training::SplitMode::CrossScene,
            assignments,
        })
    }

    /// Every sequence of every scene in one split.
    pub fn all(scenes: &[(String, Scene)], split: Split) -> Self {
        let assignments = scenes
            .iter()
            .map(|(name, scene)| (name.clone(), observers(scene).into_iter().map(|id| (id, split)).collect()))
            .collect();
        Self {
            mode: crate::training::SplitMode::IntraScene,
            assignments,
        }
    }

    pub fn sequences(&self, split: Split) -> Vec<SequenceKey> {
        self.assignments
            .iter()
            .flat_map(|(scene, m)| m.iter().filter(|(_, s)| **s == split).map(move |(id, _)| (scene.clone(), *id)))
            .collect()
    }
}

/// A reconstruction method under benchmark.
#[derive(Clone, Copy, Debug)]
pub enum Method<'a> {
    /// A trained network; motion-only models run as the extrapolation
    /// baseline.
    Network { model: &'a Model, refine: bool },
    GeoVb { prior: PriorModel, config: GeoVbConfig },
}

impl Method<'_> {
    pub fn run(&self, seq: &crate::egoview::ObservationSequence) -> Result<BirdifiedResult> {
        match self {
            Method::Network { model, refine } => birdify_sequence(seq, model, BirdifyOptions { refine: *refine }),
            Method::GeoVb { prior, config } => geovb_sequence(seq, *prior, config),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkOptions {
    pub intrinsics: CameraIntrinsics<f64>,
    pub noise: f64,
    pub seed: u64,
    /// Wall-clock timing makes reports differ between runs.
    pub timing: bool,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics::default(),
            noise: 0.0,
            seed: 0,
            timing: false,
        }
    }
}

/// Per-frame errors of one (method, sequence) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpRecord {
    pub method: String,
    pub scene: String,
    pub observer_id: u64,
    /// `None` when the method failed on the sequence.
    pub frames: Option<Vec<FrameErrors>>,
    pub elapsed_ms: Option<f64>,
    pub frame_count: usize,
}

/// Averages every method and scene of a dump.
pub fn report_from_dump(dump: &[DumpRecord]) -> MetricsReport {
    let mut groups: BTreeMap<(&str, &str), Vec<&DumpRecord>> = BTreeMap::new();
    for r in dump {
        groups.entry((&r.method, &r.scene)).or_default().push(r);
    }
    let mut report = MetricsReport::default();
    for ((method, scene), recs) in groups {
        let mut m = aggregate(recs.iter().filter_map(|r| r.frames.as_ref()).flatten());
        m.failures = recs.iter().filter(|r| r.frames.is_none()).count();
        let timed: Vec<_> = recs.iter().filter(|r| r.frames.is_some()).filter_map(|r| Some((r.elapsed_ms?, r.frame_count))).collect();
        let frames: usize = timed.iter().map(|t| t.1).sum();
        if frames > 0 {
            m.ms_per_frame = Some(timed.iter().map(|t| t.0).sum::<f64>() / frames as f64);
        }
        report.0.entry(method.to_string()).or_default().insert(scene.to_string(), m);
    }
    report
}

/// Runs `f` and returns its result with the elapsed wall-clock time in ms.
pub fn timed<R>(f: impl FnOnce() -> R) -> (R, f64) {
    let start = Instant::now();
    let r = f();
    (r, start.elapsed().as_secs_f64() * 1e3)
}

/// Evaluates every method on every test sequence of `spec`. A failing
/// method is recorded and the run continues.
pub fn run_benchmark(
    spec: &SplitSpec,
    methods: &[(String, Method<'_>)],
    scenes: &[(String, Scene)],
    opts: &BenchmarkOptions,
) -> Result<(MetricsReport, Vec<DumpRecord>)> {
    let mut dump = Vec::new();
    for (scene_name, observer_id) in spec.sequences(Split::Test) {
        let scene = &scenes
            .iter()
            .find(|(n, _)| *n == scene_name)
            .ok_or_else(|| Error::InvalidArgument(format!("split names unknown scene {scene_name}")))?
            .1;
        let seq = synthesize_observations(scene, observer_id, &opts.intrinsics, opts.noise, opts.seed.wrapping_add(observer_id))?;
        let truth = SequenceTruth::from_scene(scene, observer_id)?;
        for (name, method) in methods {
            let (outcome, ms) = timed(|| method.run(&seq));
            let frames = outcome.and_then(|r| frame_errors(&r, &truth));
            if let Err(e) = &frames {
                log::warn!("{name} failed on {scene_name}/{observer_id}: {e}");
            }
            dump.push(DumpRecord {
                method: name.clone(),
                scene: scene_name.clone(),
                observer_id,
                frames: frames.ok(),
                elapsed_ms: opts.timing.then_some(ms),
                frame_count: seq.len(),
            });
        }
    }
    Ok((report_from_dump(&dump), dump))
}

/// Trajectory overlay: estimated tracks solid, ground truth dashed, the
/// observer in black.
pub fn trajectory_svg(result: &BirdifiedResult, truth: Option<&SequenceTruth>) -> String {
    let mut est: BTreeMap<u64, Vec<Vec2<f64>>> = BTreeMap::new();
    let mut cam = Vec::new();
    for f in &result.frames {
        if let Some(p) = f.pose {
            cam.push(p.center());
        }
        for p in &f.peds {
            est.entry(p.id).or_default().push(p.position());
        }
    }
    let mut gt: BTreeMap<u64, Vec<Vec2<f64>>> = BTreeMap::new();
    let mut gt_cam = Vec::new();
    if let Some(t) = truth {
        gt_cam = t.poses.iter().map(|p| p.center()).collect();
        for f in &t.tracks {
            for (id, x) in f {
                if est.contains_key(id) {
                    gt.entry(*id).or_default().push(*x);
                }
            }
        }
    }
    let all = est.values().chain(gt.values()).flatten().chain(&cam).chain(&gt_cam);
    let (mut lo, mut hi) = (Vec2::new(f64::MAX, f64::MAX), Vec2::new(f64::MIN, f64::MIN));
    for p in all.filter(|p| p.is_finite()) {
        lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
        hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
    }
    if lo.x > hi.x {
        lo = Vec2::zero();
        hi = Vec2::new(1.0, 1.0);
    }
    let size = 600.0;
    let span = (hi.x - lo.x).max(hi.y - lo.y).max(1e-6);
    let map = |p: &Vec2<f64>| (20.0 + (p.x - lo.x) / span * (size - 40.0), size - 20.0 - (p.y - lo.y) / span * (size - 40.0));
    let polyline = |pts: &[Vec2<f64>], color: &str, dash: bool| {
        let coords: Vec<String> = pts
            .iter()
            .filter(|p| p.is_finite())
            .map(|p| {
                let (x, y) = map(p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let dash = if dash { " stroke-dasharray=\"4 3\"" } else { "" };
        format!("<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"{dash}/>\n", coords.join(" "))
    };
    const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\">\n");
    let _ = writeln!(s, "<title>{} observer {}</title>", result.method, result.observer_id);
    for (i, (id, pts)) in est.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if let Some(g) = gt.get(id) {
            s.push_str(&polyline(g, color, true));
        }
        s.push_str(&polyline(pts, color, false));
    }
    if !gt_cam.is_empty() {
        s.push_str(&polyline(&gt_cam, "black", true));
    }
    s.push_str(&polyline(&cam, "black", false));
    s.push_str("</svg>\n");
    s
}
