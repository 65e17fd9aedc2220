use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GroundTrack, Scene, DEFAULT_FRAME_INTERVAL};
use crate::error::{Error, Result};
use crate::geometry::Vec2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrajectoryFormat {
    /// Whitespace separated `frame ped_id x y`, one sample per line.
    EthUcyText,
    /// One [`SceneRecord`] JSON object per line.
    InternalJsonl,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoadOptions {
    pub frame_interval: f64,
    /// Height assigned to pedestrians when the file carries none.
    pub default_height: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            frame_interval: DEFAULT_FRAME_INTERVAL,
            default_height: 1.7,
        }
    }
}

/// One `(frame, pedestrian)` sample of the JSONL scene format.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub frame: usize,
    pub id: u64,
    pub x: f64,
    pub y: f64,
    pub h: f64,
}

pub fn load_trajectory_file(path: impl AsRef<Path>, format: TrajectoryFormat, opts: &LoadOptions) -> Result<Scene> {
    let text = std::fs::read_to_string(path)?;
    match format {
        TrajectoryFormat::EthUcyText => parse_eth_ucy(&text, opts),
        TrajectoryFormat::InternalJsonl => parse_jsonl(&text, opts),
    }
}

struct Sample {
    frame: i64,
    pos: Vec2<f64>,
    height: f64,
}

/// Per-id samples in file order; rejects non-increasing frames per id.
#[derive(Default)]
struct Collector {
    by_id: BTreeMap<u64, Vec<Sample>>,
}

impl Collector {
    fn push(&mut self, line: usize, id: u64, sample: Sample) -> Result<()> {
        let samples = self.by_id.entry(id).or_default();
        if let Some(last) = samples.last() {
            if sample.frame <= last.frame {
                return Err(Error::NonMonotoneFrames { id, line });
            }
        }
        samples.push(sample);
        Ok(())
    }

    /// Builds tracks, mapping raw frame numbers to `(frame - origin) / step`
    /// and linearly interpolating over gaps.
    fn into_scene(self, origin: i64, step: i64, frame_interval: f64) -> Scene {
        let tracks = self
            .by_id
            .into_iter()
            .map(|(id, samples)| {
                let index = |f: i64| ((f - origin) / step) as usize;
                let first = index(samples[0].frame);
                let mut positions = vec![samples[0].pos];
                for w in samples.windows(2) {
                    let (a, b) = (index(w[0].frame), index(w[1].frame));
                    let span = (b - a) as f64;
                    for k in 1..=(b - a) {
                        let s = k as f64 / span;
                        positions.push(if k == b - a { w[1].pos } else { w[0].pos + (w[1].pos - w[0].pos).scale(s) });
                    }
                }
                GroundTrack::from_positions(id, first, positions, samples[0].height)
            })
            .collect();
        Scene::new(tracks, frame_interval)
    }
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

fn parse_integral(tok: &str, line: usize, what: &str) -> Result<i64> {
    let v: f64 = tok.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("invalid {what} {tok:?}"),
    })?;
    if v.fract() != 0.0 || !v.is_finite() {
        return Err(Error::Parse {
            line,
            msg: format!("{what} {tok:?} is not an integer"),
        });
    }
    Ok(v as i64)
}

fn parse_real(tok: &str, line: usize, what: &str) -> Result<f64> {
    match tok.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::Parse {
            line,
            msg: format!("invalid {what} {tok:?}"),
        }),
    }
}

/// Parses the `frame ped_id x y` text layout. Frame numbers are rebased so
/// that the earliest frame is 0 and the common frame stride becomes 1.
pub fn parse_eth_ucy(text: &str, opts: &LoadOptions) -> Result<Scene> {
    let mut collector = Collector::default();
    let mut frames = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.trim();
        if content.is_empty() || content.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = content.split_whitespace().collect();
        if toks.len() != 4 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 4 columns `frame id x y`, found {}", toks.len()),
            });
        }
        let frame = parse_integral(toks[0], line, "frame")?;
        let id = parse_integral(toks[1], line, "pedestrian id")?;
        if id < 0 {
            return Err(Error::Parse {
                line,
                msg: "negative pedestrian id".into(),
            });
        }
        let pos = Vec2::new(parse_real(toks[2], line, "x")?, parse_real(toks[3], line, "y")?);
        frames.push(frame);
        collector.push(
            line,
            id as u64,
            Sample {
                frame,
                pos,
                height: opts.default_height,
            },
        )?;
    }
    let Some(&origin) = frames.iter().min() else {
        return Ok(Scene::empty(opts.frame_interval));
    };
    let step = frames.iter().fold(0, |g, &f| gcd(g, f - origin)).max(1);
    Ok(collector.into_scene(origin, step, opts.frame_interval))
}

/// Parses the JSONL scene format. Frame numbers are used as indices as-is.
pub fn parse_jsonl(text: &str, opts: &LoadOptions) -> Result<Scene> {
    let mut collector = Collector::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: SceneRecord = serde_json::from_str(raw).map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        if !(rec.x.is_finite() && rec.y.is_finite() && rec.h > 0.0) {
            return Err(Error::Parse {
                line,
                msg: "non-finite position or non-positive height".into(),
            });
        }
        collector.push(
            line,
            rec.id,
            Sample {
                frame: rec.frame as i64,
                pos: Vec2::new(rec.x, rec.y),
                height: rec.h,
            },
        )?;
    }
    Ok(collector.into_scene(0, 1, opts.frame_interval))
}

/// Serializes a scene as JSONL, ordered by frame then id.
pub fn write_jsonl(scene: &Scene) -> String {
    let mut records: Vec<SceneRecord> = scene
        .tracks
        .iter()
        .flat_map(|t| {
            t.positions.iter().enumerate().map(move |(k, p)| SceneRecord {
                frame: t.first_frame + k,
                id: t.ped_id,
                x: p.x,
                y: p.y,
                h: t.height_h,
            })
        })
        .collect();
    records.sort_by_key(|r| (r.frame, r.id));
    let mut out = String::new();
    for r in &records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}
