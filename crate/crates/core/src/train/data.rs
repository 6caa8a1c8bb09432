//! Procedural toy-shapes dataset and its on-disk layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/classes.txt
//! <root>/sequences/<id>/events.evt
//! <root>/sequences/<id>/frames/<n>.png
//! <root>/sequences/<id>/timestamps.txt
//! <root>/sequences/<id>/labels.png      labels of the last frame
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::LabeledStream;
use crate::events::{read_events, simulate_events, write_events, EventStream, FrameSequence, DEFAULT_LOG_EPS};
use crate::gray::{load_label_png, save_label_png, GrayImage};

pub const TOY_CLASSES: [&str; 4] = ["background", "circle", "square", "triangle"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Training sequences.
    pub sequences: usize,
    /// Held-out sequences, generated from an independent stream.
    pub test_sequences: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// Seconds between frames.
    pub frame_interval: f64,
    pub contrast_threshold: f64,
    pub max_shapes: usize,
    /// Upper bound of the pan displacement over the sequence, in pixels.
    pub max_pan: f64,
    /// Open each sequence on a frame of plain background, so the shapes
    /// appear within the event window and the integrated events carry
    /// their absolute contrast rather than only the pan edges.
    pub opening_blank: bool,
    /// Rectangles per sequence in which every event is lost, a stand-in for
    /// regions the reconstructor cannot recover.
    pub dropout_regions: usize,
    /// Upper bound of a dropout rectangle's side as a fraction of the
    /// image side; the lower bound is half of it.
    pub dropout_extent: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            sequences: 64,
            test_sequences: 16,
            frames: 8,
            width: 64,
            height: 64,
            frame_interval: 0.01,
            contrast_threshold: 0.15,
            max_shapes: 3,
            max_pan: 10.0,
            opening_blank: true,
            dropout_regions: 0,
            dropout_extent: 0.4,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sequences == 0 {
            return Err(Error::config("dataset.sequences must be at least 1"));
        }
        let min_frames = if self.opening_blank { 3 } else { 2 };
        if self.frames < min_frames {
            return Err(Error::config(format!("dataset.frames must be at least {min_frames}")));
        }
        if self.width < 8 || self.height < 8 {
            return Err(Error::config("dataset images must be at least 8x8"));
        }
        if self.max_shapes == 0 {
            return Err(Error::config("dataset.max_shapes must be at least 1"));
        }
        if !(self.dropout_extent > 0.0 && self.dropout_extent <= 1.0) {
            return Err(Error::config("dataset.dropout_extent must lie in (0, 1]"));
        }
        if !(self.frame_interval > 0.0) || !(self.contrast_threshold > 0.0) || !(self.max_pan >= 0.0) {
            return Err(Error::config(
                "dataset.frame_interval and contrast_threshold must be positive, max_pan non-negative",
            ));
        }
        Ok(())
    }
}

/// One training or test example: the events of a sequence, its last frame
/// and the labels of that frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub stream: EventStream,
    pub image: GrayImage,
    pub labels: Vec<usize>,
}

impl Sample {
    pub fn labeled_stream(&self) -> LabeledStream {
        LabeledStream {
            id: self.id.clone(),
            stream: self.stream.clone(),
            labels: self.labels.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    class: usize,
    cx: f64,
    cy: f64,
    r: f64,
    intensity: f64,
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.class {
            1 => dx * dx + dy * dy <= self.r * self.r,
            2 => dx.abs() <= self.r * 0.85 && dy.abs() <= self.r * 0.85,
            _ => {
                // Upward equilateral triangle with circumradius r.
                let h = 1.5 * self.r;
                let top = -self.r;
                let t = (dy - top) / h;
                (0.0..=1.0).contains(&t) && dx.abs() <= t * self.r * 3f64.sqrt() / 2.0
            }
        }
    }
}

/// Class-dependent brightness band, jittered per shape.
fn class_intensity(class: usize, rng: &mut ChaCha8Rng) -> f64 {
    let base = [0.0, 0.9, 0.65, 0.42][class];
    base + rng.gen_range(-0.05..0.05)
}

struct Scene {
    background: f64,
    shapes: Vec<Shape>,
    pan: (f64, f64),
}

impl Scene {
    fn random(cfg: &DatasetConfig, rng: &mut ChaCha8Rng) -> Self {
        let n = rng.gen_range(1..=cfg.max_shapes);
        let scale = cfg.width.min(cfg.height) as f64;
        let shapes = (0..n)
            .map(|_| {
                let class = rng.gen_range(1..TOY_CLASSES.len());
                let r = rng.gen_range(0.12..0.22) * scale;
                Shape {
                    class,
                    cx: rng.gen_range(r..cfg.width as f64 - r),
                    cy: rng.gen_range(r..cfg.height as f64 - r),
                    r,
                    intensity: class_intensity(class, rng),
                }
            })
            .collect();
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let mag = rng.gen_range(0.5..=1.0) * cfg.max_pan;
        Self {
            background: rng.gen_range(0.08..0.2),
            shapes,
            pan: (mag * angle.cos(), mag * angle.sin()),
        }
    }

    /// Topmost shape class at a point, later shapes occluding earlier ones.
    fn class_at(&self, x: f64, y: f64, shift: (f64, f64)) -> usize {
        let (px, py) = (x - shift.0, y - shift.1);
        self.shapes.iter().rev().find(|s| s.contains(px, py)).map_or(0, |s| s.class)
    }

    fn intensity_at(&self, x: f64, y: f64, shift: (f64, f64)) -> f64 {
        let (px, py) = (x - shift.0, y - shift.1);
        self.shapes
            .iter()
            .rev()
            .find(|s| s.contains(px, py))
            .map_or(self.background, |s| s.intensity)
    }

    /// 4x4 supersampled frame, quantised to 16 bits so that PNG storage is
    /// lossless.
    fn render(&self, w: usize, h: usize, shift: (f64, f64)) -> Vec<f64> {
        const SS: usize = 4;
        let mut out = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for sy in 0..SS {
                    for sx in 0..SS {
                        let fx = x as f64 + (sx as f64 + 0.5) / SS as f64;
                        let fy = y as f64 + (sy as f64 + 0.5) / SS as f64;
                        acc += self.intensity_at(fx, fy, shift);
                    }
                }
                let v = acc / (SS * SS) as f64;
                out.push((v * 65535.0).round() / 65535.0);
            }
        }
        out
    }

    fn labels(&self, w: usize, h: usize, shift: (f64, f64)) -> Vec<usize> {
        let mut out = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                out.push(self.class_at(x as f64 + 0.5, y as f64 + 0.5, shift));
            }
        }
        out
    }
}

/// Random half-open interval of `[0, n)` whose length is between half and
/// all of `extent * n`.
fn random_span(n: usize, extent: f64, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let max = ((extent * n as f64).round() as usize).clamp(1, n);
    let len = rng.gen_range(max.div_ceil(2)..=max);
    let start = rng.gen_range(0..=n - len);
    (start, start + len)
}

/// Frames, events and last-frame labels of one random pan sequence.
fn generate_sequence(cfg: &DatasetConfig, id: String, rng: &mut ChaCha8Rng) -> Result<(Sample, FrameSequence)> {
    let scene = Scene::random(cfg, rng);
    let (w, h) = (cfg.width, cfg.height);
    let first = usize::from(cfg.opening_blank);
    let last = (cfg.frames - 1 - first) as f64;
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut timestamps = Vec::with_capacity(cfg.frames);
    if cfg.opening_blank {
        let bg = (scene.background * 65535.0).round() / 65535.0;
        frames.push(vec![bg; w * h]);
        timestamps.push(0.0);
    }
    for k in first..cfg.frames {
        let f = (k - first) as f64 / last;
        // Centre the pan so the scene stays roughly in view.
        let shift = (scene.pan.0 * (f - 0.5), scene.pan.1 * (f - 0.5));
        frames.push(scene.render(w, h, shift));
        timestamps.push(k as f64 * cfg.frame_interval);
    }
    let end_shift = (scene.pan.0 * 0.5, scene.pan.1 * 0.5);
    let seq = FrameSequence::new(w, h, frames, timestamps)?;
    let mut stream = simulate_events(&seq, cfg.contrast_threshold, DEFAULT_LOG_EPS)?;
    for _ in 0..cfg.dropout_regions {
        let (x0, x1) = random_span(w, cfg.dropout_extent, rng);
        let (y0, y1) = random_span(h, cfg.dropout_extent, rng);
        stream
            .events
            .retain(|e| !((x0..x1).contains(&(e.x as usize)) && (y0..y1).contains(&(e.y as usize))));
    }
    let image = GrayImage::new(w, h, seq.frames.last().unwrap().clone())?;
    let sample = Sample {
        id,
        stream,
        image,
        labels: scene.labels(w, h, end_shift),
    };
    Ok((sample, seq))
}

/// Deterministic in-memory generation. Train and test scenes come from
/// independent generator streams of the same seed.
pub fn generate_toy(cfg: &DatasetConfig, seed: u64) -> Result<Dataset> {
    Ok(generate_with_frames(cfg, seed)?.0)
}

type Generated = (Dataset, Vec<FrameSequence>, Vec<FrameSequence>);

fn generate_with_frames(cfg: &DatasetConfig, seed: u64) -> Result<Generated> {
    cfg.validate()?;
    let mut train_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_rng = ChaCha8Rng::seed_from_u64(seed);
    test_rng.set_stream(1);
    let mut train = Vec::new();
    let mut train_frames = Vec::new();
    for i in 0..cfg.sequences {
        let (s, f) = generate_sequence(cfg, format!("train-{i:04}"), &mut train_rng)?;
        train.push(s);
        train_frames.push(f);
    }
    let mut test = Vec::new();
    let mut test_frames = Vec::new();
    for i in 0..cfg.test_sequences {
        let (s, f) = generate_sequence(cfg, format!("test-{i:04}"), &mut test_rng)?;
        test.push(s);
        test_frames.push(f);
    }
    let ds = Dataset {
        classes: TOY_CLASSES.iter().map(|s| s.to_string()).collect(),
        train,
        test,
    };
    Ok((ds, train_frames, test_frames))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub sequences: usize,
    pub test_sequences: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub classes: Vec<String>,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Generates the toy dataset and writes it to `root`.
pub fn synthesize(cfg: &DatasetConfig, seed: u64, root: &Path) -> Result<Manifest> {
    let (ds, train_frames, test_frames) = generate_with_frames(cfg, seed)?;
    let seq_root = root.join("sequences");
    create_dir(&seq_root)?;
    let all = ds.train.iter().zip(&train_frames).chain(ds.test.iter().zip(&test_frames));
    for (sample, frames) in all {
        let dir = seq_root.join(&sample.id);
        create_dir(&dir.join("frames"))?;
        write_events(&sample.stream, &dir.join("events.evt"))?;
        for (n, f) in frames.frames.iter().enumerate() {
            GrayImage::new(frames.width, frames.height, f.clone())?.save_png(&dir.join("frames").join(format!("{n}.png")))?;
        }
        let ts: String = frames.timestamps.iter().map(|t| format!("{t:?}\n")).collect();
        write_text(&dir.join("timestamps.txt"), &ts)?;
        save_label_png(&sample.labels, cfg.width, cfg.height, &dir.join("labels.png"))?;
    }
    let manifest = Manifest {
        seed,
        sequences: cfg.sequences,
        test_sequences: cfg.test_sequences,
        frames: cfg.frames,
        width: cfg.width,
        height: cfg.height,
        classes: ds.classes.clone(),
        train: ds.train.iter().map(|s| s.id.clone()).collect(),
        test: ds.test.iter().map(|s| s.id.clone()).collect(),
    };
    write_text(&root.join("classes.txt"), &(ds.classes.join("\n") + "\n"))?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    write_text(&root.join("manifest.json"), &(json + "\n"))?;
    Ok(manifest)
}

fn load_sample(dir: &Path, id: &str) -> Result<Sample> {
    let stream = read_events(&dir.join("events.evt"))?;
    let frames_dir = dir.join("frames");
    let mut names: Vec<(usize, PathBuf)> = fs::read_dir(&frames_dir)
        .map_err(|e| Error::io(&frames_dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            let n = p.file_stem()?.to_str()?.parse().ok()?;
            Some((n, p))
        })
        .collect();
    names.sort();
    let last = names
        .last()
        .ok_or_else(|| Error::InsufficientInput(format!("no frames in {}", frames_dir.display())))?;
    let image = GrayImage::load_png(&last.1)?;
    let (labels, w, h) = load_label_png(&dir.join("labels.png"))?;
    if (w, h) != (image.width, image.height) || (w, h) != (stream.width, stream.height) {
        return Err(Error::InvalidInput(format!("sequence {id} has inconsistent geometry")));
    }
    Ok(Sample {
        id: id.to_string(),
        stream,
        image,
        labels,
    })
}

/// Reads a dataset directory written by [`synthesize`].
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let mpath = root.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", mpath.display())))?;
    let seq_root = root.join("sequences");
    let load = |ids: &[String]| -> Result<Vec<Sample>> { ids.iter().map(|id| load_sample(&seq_root.join(id), id)).collect() };
    Ok(Dataset {
        classes: manifest.classes.clone(),
        train: load(&manifest.train)?,
        test: load(&manifest.test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            sequences: 3,
            test_sequences: 2,
            frames: 4,
            width: 24,
            height: 20,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic_and_labelled() {
        let a = generate_toy(&small(), 5).unwrap();
        let b = generate_toy(&small(), 5).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.test.len()), (3, 2));
        for s in a.train.iter().chain(&a.test) {
            assert!(!s.stream.is_empty());
            assert!(s.labels.iter().any(|&l| l > 0));
            assert!(s.labels.iter().all(|&l| l < TOY_CLASSES.len()));
        }
        assert_ne!(a.train[0].image, a.test[0].image);
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = synthesize(&small(), 9, dir.path()).unwrap();
        assert_eq!(m.sequences, 3);
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded, generate_toy(&small(), 9).unwrap());
    }

    #[test]
    fn zero_sequences_rejected() {
        let cfg = DatasetConfig {
            sequences: 0,
            ..small()
        };
        assert!(matches!(generate_toy(&cfg, 1), Err(Error::Config(_))));
    }
}
