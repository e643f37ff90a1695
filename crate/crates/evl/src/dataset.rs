//! Video clips, the synthetic sprite benchmark, and dataset files.
//!
//! The synthetic task has two appearance classes (a static square or circle;
//! the shape alone identifies the class from any single frame) and four
//! motion classes (a diamond drifting up, down, left or right). Motion clips
//! share one sprite shape with randomized size, brightness and start
//! position, so a single frame narrows them down to "some motion class" at
//! best: direction only exists in the frame order. Static diamond decoys
//! appear in every clip to keep "which diamond moved" from being readable
//! off a single token statistic.
//!
//! On disk a dataset is one EVLT archive per clip (entry "frames" of shape
//! (L, S, S, 3)) plus a tab-separated `index.tsv` with header
//! `path\tlabel\tframe_count`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::checkpoint::CheckpointArchive;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Decoded frame sequence with its class id.
#[derive(Debug, Clone)]
pub struct VideoClip {
    /// Frames of shape (S, S, 3), values in [0, 1].
    pub frames: Vec<Tensor>,
    pub label: usize,
    /// Source frame count (equals frames.len()).
    pub source_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthClass {
    AppearanceSquare,
    AppearanceCircle,
    MotionUp,
    MotionDown,
    MotionLeft,
    MotionRight,
}

impl SynthClass {
    pub fn all() -> [SynthClass; 6] {
        [
            SynthClass::AppearanceSquare,
            SynthClass::AppearanceCircle,
            SynthClass::MotionUp,
            SynthClass::MotionDown,
            SynthClass::MotionLeft,
            SynthClass::MotionRight,
        ]
    }

    pub fn label(&self) -> usize {
        match self {
            SynthClass::AppearanceSquare => 0,
            SynthClass::AppearanceCircle => 1,
            SynthClass::MotionUp => 2,
            SynthClass::MotionDown => 3,
            SynthClass::MotionLeft => 4,
            SynthClass::MotionRight => 5,
        }
    }

    pub fn is_motion(&self) -> bool {
        self.label() >= 2
    }

    /// (dx, dy) drift per frame in pixels; appearance classes are static.
    fn velocity(&self, speed: i64) -> (i64, i64) {
        match self {
            SynthClass::AppearanceSquare | SynthClass::AppearanceCircle => (0, 0),
            SynthClass::MotionUp => (0, -speed),
            SynthClass::MotionDown => (0, speed),
            SynthClass::MotionLeft => (-speed, 0),
            SynthClass::MotionRight => (speed, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Square,
    Circle,
    Diamond,
    Cross,
}

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub image_size: usize,
    pub frames: usize,
    /// Drift in pixels per frame for motion classes.
    pub speed: usize,
    /// Static diamond decoys rendered into every clip.
    pub decoys: usize,
    /// Whether every clip carries a cross-shaped sprite drifting in a
    /// random direction. Pooled features then see two superposed motion
    /// traces, so class direction requires binding shape to trajectory.
    pub runner: bool,
    /// Brightness band of the runner; kept apart from the sprite band so
    /// tokens can tell the two apart.
    pub runner_intensity: (f32, f32),
    /// Inclusive sprite-radius range for motion sprites and decoys.
    pub motion_radius: (usize, usize),
    /// Inclusive sprite-radius range for appearance sprites.
    pub appearance_radius: (usize, usize),
    /// Sprite brightness range.
    pub intensity: (f32, f32),
    pub classes: Vec<SynthClass>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            image_size: 32,
            frames: 8,
            speed: 3,
            decoys: 2,
            runner: true,
            runner_intensity: (0.35, 0.55),
            motion_radius: (3, 4),
            appearance_radius: (7, 8),
            intensity: (0.75, 1.0),
            classes: SynthClass::all().to_vec(),
        }
    }
}

struct Sprite {
    shape: Shape,
    radius: i64,
    intensity: f32,
    /// Center position per frame.
    path: Vec<(i64, i64)>,
}

fn covered(shape: Shape, r: i64, dx: i64, dy: i64) -> bool {
    match shape {
        Shape::Square => dx.abs() <= r && dy.abs() <= r,
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Diamond => dx.abs() + dy.abs() <= r,
        Shape::Cross => {
            (dx.abs() <= r && dy.abs() <= 1) || (dy.abs() <= r && dx.abs() <= 1)
        }
    }
}

fn render(size: usize, frames: usize, sprites: &[Sprite]) -> Vec<Tensor> {
    (0..frames)
        .map(|t| {
            let mut data = vec![0.0f32; size * size * 3];
            for sprite in sprites {
                let (cx, cy) = sprite.path[t.min(sprite.path.len() - 1)];
                let r = sprite.radius;
                for y in (cy - r).max(0)..=(cy + r).min(size as i64 - 1) {
                    for x in (cx - r).max(0)..=(cx + r).min(size as i64 - 1) {
                        if covered(sprite.shape, r, x - cx, y - cy) {
                            let base = (y as usize * size + x as usize) * 3;
                            for ch in 0..3 {
                                data[base + ch] = data[base + ch].max(sprite.intensity);
                            }
                        }
                    }
                }
            }
            Tensor::new(vec![size, size, 3], data).expect("frame shape")
        })
        .collect()
}

fn synth_clip(class: SynthClass, spec: &SynthSpec, rng: &mut Rng) -> VideoClip {
    let s = spec.image_size as i64;
    let t = spec.frames as i64;
    // Appearance sprites default to a larger radius range so the
    // square/circle contrast survives the frozen random features; motion
    // sprites stay small so direction lives in the frame order rather than
    // in gross pixel statistics.
    let (r_lo, r_hi) = if class.is_motion() {
        spec.motion_radius
    } else {
        spec.appearance_radius
    };
    let radius = r_lo as i64 + rng.next_below(r_hi - r_lo + 1) as i64;
    let intensity = rng.uniform(spec.intensity.0 as f64, spec.intensity.1 as f64) as f32;
    let (vx, vy) = class.velocity(spec.speed as i64);

    // Start so the whole trajectory stays in bounds.
    let span = |v: i64| v.abs() * (t - 1);
    let start_range = |v: i64| -> (i64, i64) {
        let travel = span(v);
        if v >= 0 {
            (radius, s - 1 - radius - travel)
        } else {
            (radius + travel, s - 1 - radius)
        }
    };
    let (x_lo, x_hi) = start_range(vx);
    let (y_lo, y_hi) = start_range(vy);
    assert!(x_hi >= x_lo && y_hi >= y_lo, "sprite cannot fit trajectory");
    let mut x0 = x_lo + rng.next_below((x_hi - x_lo + 1) as usize) as i64;
    let mut y0 = y_lo + rng.next_below((y_hi - y_lo + 1) as usize) as i64;
    if !class.is_motion() {
        // Appearance sprites snap to a coarse grid: shape identity should be
        // learnable from a small sample, not a sub-pixel lookup problem.
        x0 = (x0 / 8 * 8).clamp(x_lo, x_hi);
        y0 = (y0 / 8 * 8).clamp(y_lo, y_hi);
    }
    let path: Vec<(i64, i64)> = (0..t).map(|i| (x0 + vx * i, y0 + vy * i)).collect();

    let shape = match class {
        SynthClass::AppearanceSquare => Shape::Square,
        SynthClass::AppearanceCircle => Shape::Circle,
        _ => Shape::Diamond,
    };
    let mut sprites = vec![Sprite {
        shape,
        radius,
        intensity,
        path: path.clone(),
    }];

    // A cross-shaped runner drifting in a direction that carries no class
    // information.
    if spec.runner {
        let rr = spec.motion_radius.0 as i64
            + rng.next_below(spec.motion_radius.1 - spec.motion_radius.0 + 1) as i64;
        let ri = rng.uniform(spec.runner_intensity.0 as f64, spec.runner_intensity.1 as f64) as f32;
        let dirs = [
            SynthClass::MotionUp,
            SynthClass::MotionDown,
            SynthClass::MotionLeft,
            SynthClass::MotionRight,
        ];
        let (rvx, rvy) = dirs[rng.next_below(4)].velocity(spec.speed as i64);
        let (rx_lo, rx_hi) = {
            let travel = rvx.abs() * (t - 1);
            if rvx >= 0 { (rr, s - 1 - rr - travel) } else { (rr + travel, s - 1 - rr) }
        };
        let (ry_lo, ry_hi) = {
            let travel = rvy.abs() * (t - 1);
            if rvy >= 0 { (rr, s - 1 - rr - travel) } else { (rr + travel, s - 1 - rr) }
        };
        let rx = rx_lo + rng.next_below((rx_hi - rx_lo + 1) as usize) as i64;
        let ry = ry_lo + rng.next_below((ry_hi - ry_lo + 1) as usize) as i64;
        sprites.push(Sprite {
            shape: Shape::Cross,
            radius: rr,
            intensity: ri,
            path: (0..t).map(|i| (rx + rvx * i, ry + rvy * i)).collect(),
        });
    }

    // Static decoys, placed away from the subject where possible.
    for _ in 0..spec.decoys {
        let (dr_lo, dr_hi) = spec.motion_radius;
        let dr = dr_lo as i64 + rng.next_below(dr_hi - dr_lo + 1) as i64;
        let di = rng.uniform(spec.intensity.0 as f64, spec.intensity.1 as f64) as f32;
        let mut pos = (dr, dr);
        for _attempt in 0..60 {
            let px = dr + rng.next_below((s - 2 * dr) as usize) as i64;
            let py = dr + rng.next_below((s - 2 * dr) as usize) as i64;
            pos = (px, py);
            let min_dist = path
                .iter()
                .map(|&(x, y)| (x - px).abs().max((y - py).abs()))
                .min()
                .unwrap();
            if min_dist >= radius + dr - 1 {
                break;
            }
        }
        sprites.push(Sprite {
            shape: Shape::Diamond,
            radius: dr,
            intensity: di,
            path: vec![pos],
        });
    }

    VideoClip {
        frames: render(spec.image_size, spec.frames, &sprites),
        label: class.label(),
        source_len: spec.frames,
    }
}

/// Deterministic synthetic dataset: `size` clips cycling through
/// `spec.classes` so labels stay balanced.
pub fn synth_dataset(seed: u64, size: usize, spec: &SynthSpec) -> Vec<VideoClip> {
    let mut master = Rng::new(seed);
    (0..size)
        .map(|i| {
            let mut child = master.split();
            let class = spec.classes[i % spec.classes.len()];
            synth_clip(class, spec, &mut child)
        })
        .collect()
}

// ── Dataset files ───────────────────────────────────────────────────────────

/// Write one archive per clip plus `index.tsv`.
pub fn save_dataset(clips: &[VideoClip], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let index_path = dir.join("index.tsv");
    let mut index = fs::File::create(&index_path).map_err(|e| Error::io(&index_path, e))?;
    writeln!(index, "path\tlabel\tframe_count").map_err(|e| Error::io(&index_path, e))?;
    for (i, clip) in clips.iter().enumerate() {
        let name = format!("clip_{i:05}.evlt");
        let mut archive = CheckpointArchive::new();
        archive.push("frames", stack_frames(&clip.frames)?)?;
        archive.save(dir.join(&name))?;
        writeln!(index, "{name}\t{}\t{}", clip.label, clip.source_len)
            .map_err(|e| Error::io(&index_path, e))?;
    }
    Ok(())
}

fn stack_frames(frames: &[Tensor]) -> Result<Tensor> {
    let shape = frames[0].shape();
    let (s, _) = (shape[0], shape[2]);
    let mut data = Vec::with_capacity(frames.len() * frames[0].numel());
    for f in frames {
        data.extend_from_slice(f.data());
    }
    Tensor::new(vec![frames.len(), s, s, 3], data)
}

/// Load a clip archive written by [`save_dataset`].
pub fn load_clip(path: &Path, label: usize) -> Result<VideoClip> {
    let archive = CheckpointArchive::load(path)?;
    let stacked = archive
        .get("frames")
        .ok_or_else(|| Error::Format(format!("{} has no 'frames' entry", path.display())))?;
    if stacked.rank() != 4 || stacked.shape()[3] != 3 {
        return Err(Error::Format(format!(
            "frames entry must be (L, S, S, 3), got {:?}",
            stacked.shape()
        )));
    }
    let (l, s) = (stacked.shape()[0], stacked.shape()[1]);
    let per = s * stacked.shape()[2] * 3;
    let frames = (0..l)
        .map(|t| Tensor::new(vec![s, stacked.shape()[2], 3], stacked.data()[t * per..(t + 1) * per].to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok(VideoClip {
        frames,
        label,
        source_len: l,
    })
}

/// Read `index.tsv` and all referenced clips.
pub fn load_dataset(dir: &Path) -> Result<Vec<VideoClip>> {
    let index_path = dir.join("index.tsv");
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut clips = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if line != "path\tlabel\tframe_count" {
                return Err(Error::Format(format!(
                    "index.tsv: unexpected header {line:?}"
                )));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Format(format!(
                "index.tsv line {}: expected 3 tab-separated fields",
                lineno + 1
            )));
        }
        let label: usize = fields[1]
            .parse()
            .map_err(|_| Error::Format(format!("index.tsv line {}: bad label", lineno + 1)))?;
        let count: usize = fields[2]
            .parse()
            .map_err(|_| Error::Format(format!("index.tsv line {}: bad frame count", lineno + 1)))?;
        let clip = load_clip(&dir.join(fields[0]), label)?;
        if clip.source_len != count {
            return Err(Error::Format(format!(
                "{}: index declares {count} frames, archive has {}",
                fields[0], clip.source_len
            )));
        }
        clips.push(clip);
    }
    Ok(clips)
}

// ── Spatial augmentation ────────────────────────────────────────────────────

/// Random resized crop: a square sub-region with area fraction in
/// [scale_lo, 1] is cropped and bilinearly resized back to the input size.
pub fn random_resized_crop(frame: &Tensor, scale_lo: f64, rng: &mut Rng) -> Result<Tensor> {
    let s = frame.shape()[0];
    if frame.rank() != 3 || frame.shape()[1] != s {
        return Err(Error::Shape(format!(
            "expected square (S, S, 3) frame, got {:?}",
            frame.shape()
        )));
    }
    let frac = rng.uniform(scale_lo, 1.0).sqrt();
    let side = ((s as f64 * frac).round() as usize).clamp(1, s);
    let x0 = rng.next_below(s - side + 1);
    let y0 = rng.next_below(s - side + 1);
    let mut out = vec![0.0f32; s * s * 3];
    for y in 0..s {
        for x in 0..s {
            // Map output pixel to crop coordinates.
            let sy = y0 as f64 + (y as f64 + 0.5) * side as f64 / s as f64 - 0.5;
            let sx = x0 as f64 + (x as f64 + 0.5) * side as f64 / s as f64 - 0.5;
            let (iy, ix) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - iy, sx - ix);
            let sample = |yy: f64, xx: f64, ch: usize| -> f64 {
                let yy = (yy.max(0.0) as usize).min(s - 1);
                let xx = (xx.max(0.0) as usize).min(s - 1);
                frame.at(&[yy, xx, ch]) as f64
            };
            for ch in 0..3 {
                let v = sample(iy, ix, ch) * (1.0 - fy) * (1.0 - fx)
                    + sample(iy, ix + 1.0, ch) * (1.0 - fy) * fx
                    + sample(iy + 1.0, ix, ch) * fy * (1.0 - fx)
                    + sample(iy + 1.0, ix + 1.0, ch) * fy * fx;
                out[(y * s + x) * 3 + ch] = v as f32;
            }
        }
    }
    Tensor::new(vec![s, s, 3], out)
}

/// Mirror a frame left-right. Unsuitable for direction-labeled data: it
/// swaps the meaning of left and right drift.
pub fn horizontal_flip(frame: &Tensor) -> Tensor {
    let (h, w) = (frame.shape()[0], frame.shape()[1]);
    let mut out = vec![0.0f32; frame.numel()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                out[(y * w + x) * 3 + ch] = frame.at(&[y, w - 1 - x, ch]);
            }
        }
    }
    Tensor::new(frame.shape().to_vec(), out).expect("shape preserved")
}
