//! Synthetic moving-shape sequences, degradations for restoration, and
//! loading of user frame folders.
//!
//! Pixel coordinates have `y` pointing down, so an increasing screen angle
//! turns clockwise.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::condition::{parse_labels, Condition, Label};
use crate::error::{Error, Result};
use crate::io::{list_images, load_image};
use crate::layout::{pack, Frame, GridTensor, LayoutSpec};

/// Label sidecar file name inside a frame folder.
pub const LABEL_FILE: &str = "labels.txt";

/// Sub-samples per pixel side used for anti-aliasing.
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceKind {
    Translate,
    RotateRing,
    Bounce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn label(self) -> Label {
        match self {
            Shape::Circle => Label::ShapeCircle,
            Shape::Square => Label::ShapeSquare,
            Shape::Triangle => Label::ShapeTriangle,
        }
    }

    /// Whether `(u, v)`, in the shape's own frame, lies inside a shape of
    /// circumradius-like `size`.
    fn contains(self, u: f64, v: f64, size: f64) -> bool {
        match self {
            Shape::Circle => u * u + v * v <= size * size,
            Shape::Square => {
                let half = size * 0.8;
                u.abs() <= half && v.abs() <= half
            }
            Shape::Triangle => {
                // apex up (negative v); inradius is half the circumradius
                let r = size * 0.5;
                let s3 = 3f64.sqrt() / 2.0;
                v <= r && (s3 * u - 0.5 * v) <= r && (-s3 * u - 0.5 * v) <= r
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceSpec {
    pub kind: SequenceKind,
    pub frames: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    #[serde(default = "one")]
    pub channels: usize,
    #[serde(default = "default_shape")]
    pub shape: Shape,
    /// Shape radius in pixels; defaults to a fifth of the smaller frame side.
    #[serde(default)]
    pub size: Option<f64>,
    /// Centre of the shape in frame 0 (x, y); defaults to the frame centre.
    #[serde(default)]
    pub start: Option<[f64; 2]>,
    /// Pixels per frame (x, y) for `translate` and `bounce`.
    #[serde(default)]
    pub velocity: [f64; 2],
    /// Degrees per frame for `rotate_ring`.
    #[serde(default = "default_angular_step")]
    pub angular_step: f64,
    /// Viewing distance for `rotate_ring`, in normalized units.
    #[serde(default = "default_ring_radius")]
    pub ring_radius: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}
fn default_shape() -> Shape {
    Shape::Circle
}
fn default_angular_step() -> f64 {
    15.0
}
fn default_ring_radius() -> f64 {
    2.0
}

impl SequenceSpec {
    pub fn new(kind: SequenceKind, frames: usize, frame_h: usize, frame_w: usize) -> Self {
        SequenceSpec {
            kind,
            frames,
            frame_h,
            frame_w,
            channels: 1,
            shape: Shape::Circle,
            size: None,
            start: None,
            velocity: [0.0, 0.0],
            angular_step: default_angular_step(),
            ring_radius: default_ring_radius(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.frames == 0 || self.frame_h == 0 || self.frame_w == 0 {
            return bad("frames and frame size must be positive".into());
        }
        if self.channels != 1 && self.channels != 3 {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.size.is_some_and(|s| !(s > 0.0)) {
            return bad("shape size must be positive".into());
        }
        if !(self.ring_radius > 0.0) {
            return bad("ring radius must be positive".into());
        }
        if !self.velocity.iter().all(|v| v.is_finite()) || !self.angular_step.is_finite() {
            return bad("motion parameters must be finite".into());
        }
        Ok(())
    }

    fn size(&self) -> f64 {
        self.size
            .unwrap_or(self.frame_h.min(self.frame_w) as f64 / 5.0)
    }

    fn start(&self) -> [f64; 2] {
        self.start
            .unwrap_or([self.frame_w as f64 / 2.0, self.frame_h as f64 / 2.0])
    }

    /// Labels describing the motion this spec renders.
    pub fn labels(&self) -> Vec<Label> {
        let motion = match self.kind {
            SequenceKind::Translate => {
                let [vx, vy] = self.velocity;
                if vx == 0.0 && vy == 0.0 {
                    Label::Static
                } else if vx.abs() >= vy.abs() {
                    if vx > 0.0 {
                        Label::TranslateRight
                    } else {
                        Label::TranslateLeft
                    }
                } else if vy > 0.0 {
                    Label::TranslateDown
                } else {
                    Label::TranslateUp
                }
            }
            SequenceKind::RotateRing => {
                if self.angular_step > 0.0 {
                    Label::RotateCw
                } else if self.angular_step < 0.0 {
                    Label::RotateCcw
                } else {
                    Label::Static
                }
            }
            SequenceKind::Bounce => Label::Bounce,
        };
        vec![motion, self.shape.label()]
    }
}

/// A rendered sequence with its fine-grained labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub frames: Vec<Frame>,
    pub labels: Vec<Label>,
}

impl Sequence {
    pub fn to_grid(&self, layout: &LayoutSpec) -> Result<(GridTensor, Condition)> {
        Ok((pack(&self.frames, layout)?, Condition::new(layout, self.labels.clone())?))
    }
}

/// Reduces detailed labels to the coarse annotation (motion vs. static).
pub fn coarse_labels(labels: &[Label]) -> Vec<Label> {
    if labels.contains(&Label::Static) {
        vec![Label::Static]
    } else {
        vec![Label::Motion]
    }
}

struct Placement {
    center: [f64; 2],
    angle_deg: f64,
    size: f64,
    marker: bool,
}

fn placement(spec: &SequenceSpec, k: usize) -> Placement {
    let size = spec.size();
    let [sx, sy] = spec.start();
    match spec.kind {
        SequenceKind::Translate => Placement {
            center: [sx + k as f64 * spec.velocity[0], sy + k as f64 * spec.velocity[1]],
            angle_deg: 0.0,
            size,
            marker: false,
        },
        SequenceKind::Bounce => {
            let bounce = |p0: f64, v: f64, extent: f64| {
                let lo = size.min(extent / 2.0);
                let span = (extent - 2.0 * lo).max(0.0);
                if span == 0.0 {
                    return extent / 2.0;
                }
                let u = (p0 - lo + k as f64 * v).rem_euclid(2.0 * span);
                lo + if u <= span { u } else { 2.0 * span - u }
            };
            Placement {
                center: [
                    bounce(sx, spec.velocity[0], spec.frame_w as f64),
                    bounce(sy, spec.velocity[1], spec.frame_h as f64),
                ],
                angle_deg: 0.0,
                size,
                marker: false,
            }
        }
        SequenceKind::RotateRing => Placement {
            center: [sx, sy],
            // reduce first so a full turn lands exactly on frame 0's pose
            angle_deg: (k as f64 * spec.angular_step).rem_euclid(360.0),
            size: size * default_ring_radius() / spec.ring_radius,
            marker: true,
        },
    }
}

fn render(spec: &SequenceSpec, pl: &Placement) -> Frame {
    let (h, w) = (spec.frame_h, spec.frame_w);
    let theta = pl.angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let marker_r = pl.size * 0.35;
    let marker_d = pl.size * 1.3;
    let marker = [pl.center[0] + marker_d * sin, pl.center[1] - marker_d * cos];
    let mut cover = Array2::<f64>::zeros((h, w));
    let n = SUPERSAMPLE;
    let inv = 1.0 / (n * n) as f64;
    for y in 0..h {
        for x in 0..w {
            let mut hits = 0usize;
            for sy in 0..n {
                for sx in 0..n {
                    let px = x as f64 + (sx as f64 + 0.5) / n as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / n as f64;
                    let (dx, dy) = (px - pl.center[0], py - pl.center[1]);
                    // rotate into the shape frame
                    let u = cos * dx + sin * dy;
                    let v = -sin * dx + cos * dy;
                    let mut inside = spec.shape.contains(u, v, pl.size);
                    if pl.marker && !inside {
                        let (mx, my) = (px - marker[0], py - marker[1]);
                        inside = mx * mx + my * my <= marker_r * marker_r;
                    }
                    hits += inside as usize;
                }
            }
            cover[[y, x]] = hits as f64 * inv;
        }
    }
    Array3::from_shape_fn((h, w, spec.channels), |(y, x, _)| cover[[y, x]])
}

/// Renders frame `k` of a sequence; `k` may run past `spec.frames`.
pub fn render_frame(spec: &SequenceSpec, k: usize) -> Result<Frame> {
    spec.validate()?;
    Ok(render(spec, &placement(spec, k)))
}

pub fn gen_sequence(spec: &SequenceSpec) -> Result<Sequence> {
    spec.validate()?;
    let frames = (0..spec.frames)
        .map(|k| render(spec, &placement(spec, k)))
        .collect();
    Ok(Sequence {
        frames,
        labels: spec.labels(),
    })
}

/// Random axis-aligned translation whose path stays inside the frame.
pub fn random_translation(
    frames: usize,
    frame_h: usize,
    frame_w: usize,
    rng: &mut impl Rng,
) -> SequenceSpec {
    let side = frame_h.min(frame_w) as f64;
    let shape = *Shape::ALL.choose(rng).unwrap();
    let size = rng.gen_range(0.17..0.25) * side;
    let steps = frames.saturating_sub(1).max(1) as f64;
    let room = side - 2.0 * size - 2.0;
    let speed = rng.gen_range(0.5..1.0) * room / steps;
    let dir = rng.gen_range(0..4);
    let (vx, vy) = [(speed, 0.0), (-speed, 0.0), (0.0, speed), (0.0, -speed)][dir];
    let travel = speed * steps;
    let along = |v: f64, extent: f64, rng: &mut dyn rand::RngCore| {
        let lo = size + 1.0;
        let hi = extent - size - 1.0;
        if v > 0.0 {
            rng.gen_range(lo..=(hi - travel).max(lo))
        } else if v < 0.0 {
            rng.gen_range((lo + travel).min(hi)..=hi)
        } else {
            rng.gen_range(lo..=hi)
        }
    };
    let sx = along(vx, frame_w as f64, rng);
    let sy = along(vy, frame_h as f64, rng);
    SequenceSpec {
        shape,
        size: Some(size),
        start: Some([sx, sy]),
        velocity: [vx, vy],
        seed: rng.gen(),
        ..SequenceSpec::new(SequenceKind::Translate, frames, frame_h, frame_w)
    }
}

/// Random ring rotation (clockwise or counter-clockwise, 15 degree steps).
pub fn random_rotation(
    frames: usize,
    frame_h: usize,
    frame_w: usize,
    rng: &mut impl Rng,
) -> SequenceSpec {
    let shape = if rng.gen_bool(0.5) {
        Shape::Square
    } else {
        Shape::Triangle
    };
    let step = if rng.gen_bool(0.5) { 15.0 } else { -15.0 };
    SequenceSpec {
        shape,
        angular_step: step,
        start: Some([
            frame_w as f64 / 2.0 + rng.gen_range(-1.0..1.0),
            frame_h as f64 / 2.0 + rng.gen_range(-1.0..1.0),
        ]),
        size: Some(frame_h.min(frame_w) as f64 * rng.gen_range(0.17..0.22)),
        seed: rng.gen(),
        ..SequenceSpec::new(SequenceKind::RotateRing, frames, frame_h, frame_w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Translate,
    RotateRing,
    Bounce,
}

/// `count` random sequences laid out on `layout`, reproducible from `seed`.
pub fn synth_dataset(
    kind: DatasetKind,
    count: usize,
    layout: &LayoutSpec,
    seed: u64,
) -> Result<Vec<(GridTensor, Condition)>> {
    if layout.channels != 1 && layout.channels != 3 {
        return Err(Error::InvalidSpec("channels must be 1 or 3".into()));
    }
    let f = layout.frame_count();
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut spec = match kind {
                DatasetKind::Translate => {
                    random_translation(f, layout.frame_h, layout.frame_w, &mut rng)
                }
                DatasetKind::RotateRing => {
                    random_rotation(f, layout.frame_h, layout.frame_w, &mut rng)
                }
                DatasetKind::Bounce => {
                    let mut s = random_translation(f, layout.frame_h, layout.frame_w, &mut rng);
                    s.kind = SequenceKind::Bounce;
                    s.velocity = [s.velocity[0] * 2.5, s.velocity[1] * 2.5 + 0.3];
                    s
                }
            };
            spec.channels = layout.channels;
            gen_sequence(&spec)?.to_grid(layout)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradeSpec {
    #[serde(default)]
    pub gaussian_blur_sigma: f64,
    #[serde(default)]
    pub block_mask_ratio: f64,
    #[serde(default = "default_block")]
    pub block_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_block() -> usize {
    8
}

impl DegradeSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_blur_sigma >= 0.0) || !self.gaussian_blur_sigma.is_finite() {
            return Err(Error::InvalidSpec("blur sigma must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.block_mask_ratio) {
            return Err(Error::InvalidSpec("block mask ratio must be in [0, 1)".into()));
        }
        if self.block_size == 0 {
            return Err(Error::InvalidSpec("block size must be positive".into()));
        }
        Ok(())
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub fn gaussian_blur(frame: &Frame, sigma: f64) -> Frame {
    if sigma == 0.0 {
        return frame.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w, c) = frame.dim();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = Array3::<f64>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                tmp[[y, x, ch]] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * frame[[y, clamp(x as isize + i as isize - r, w), ch]])
                    .sum();
            }
        }
    }
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[[y, x, ch]] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * tmp[[clamp(y as isize + i as isize - r, h), x, ch]])
                    .sum();
            }
        }
    }
    out
}

/// Blocks zeroed by [`degrade`] for a frame of the given size, as
/// `(block_row, block_col)` pairs. The same blocks are used for every frame.
pub fn masked_blocks(spec: &DegradeSpec, h: usize, w: usize) -> Vec<(usize, usize)> {
    let (bh, bw) = (h.div_ceil(spec.block_size), w.div_ceil(spec.block_size));
    let total = bh * bw;
    let count = (spec.block_mask_ratio * total as f64).round() as usize;
    let mut all: Vec<(usize, usize)> = (0..total).map(|i| (i / bw, i % bw)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    all.shuffle(&mut rng);
    all.truncate(count);
    all.sort_unstable();
    all
}

pub fn degrade(frames: &[Frame], spec: &DegradeSpec) -> Result<Vec<Frame>> {
    spec.validate()?;
    Ok(frames
        .iter()
        .map(|f| {
            let mut out = gaussian_blur(f, spec.gaussian_blur_sigma);
            let (h, w, _) = out.dim();
            let b = spec.block_size;
            for (br, bc) in masked_blocks(spec, h, w) {
                out.slice_mut(ndarray::s![br * b..((br + 1) * b).min(h), bc * b..((bc + 1) * b).min(w), ..])
                    .fill(0.0);
            }
            out
        })
        .collect())
}

/// Converts a loaded image to `channels` (gray to RGB by replication, RGB to
/// gray by channel mean).
pub fn conform_channels(img: Frame, channels: usize, path: &Path) -> Result<Frame> {
    let (h, w, c) = img.dim();
    Ok(match (c, channels) {
        (a, b) if a == b => img,
        (3, 1) => img
            .map_axis(ndarray::Axis(2), |p| p.mean().unwrap())
            .insert_axis(ndarray::Axis(2)),
        (1, 3) => Array3::from_shape_fn((h, w, 3), |(y, x, _)| img[[y, x, 0]]),
        (a, b) => {
            return Err(Error::UnreadableImage {
                path: path.to_path_buf(),
                reason: format!("{a} channels cannot be converted to {b}"),
            })
        }
    })
}

/// Loads one image with the given channel count.
pub fn load_frame(path: &Path, channels: usize) -> Result<Frame> {
    conform_channels(load_image(path)?, channels, path)
}

/// Loads one sequence: the images of `dir` in lexicographic order plus an
/// optional label sidecar.
pub fn load_folder(dir: &Path, layout: &LayoutSpec) -> Result<(GridTensor, Condition)> {
    let files = list_images(dir)?;
    if files.len() != layout.frame_count() {
        return Err(Error::CountMismatch {
            dir: dir.to_path_buf(),
            expected: layout.frame_count(),
            found: files.len(),
        });
    }
    let mut frames = Vec::with_capacity(files.len());
    for f in &files {
        let img = load_image(f)?;
        let (h, w, _) = img.dim();
        if h != layout.frame_h || w != layout.frame_w {
            return Err(Error::SizeMismatch {
                path: f.clone(),
                want_w: layout.frame_w,
                want_h: layout.frame_h,
                got_w: w,
                got_h: h,
            });
        }
        frames.push(conform_channels(img, layout.channels, f)?);
    }
    let labels = match fs::read_to_string(dir.join(LABEL_FILE)) {
        Ok(text) => parse_labels(&text)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(Error::io(dir.join(LABEL_FILE), e)),
    };
    Ok((pack(&frames, layout)?, Condition::new(layout, labels)?))
}

/// Loads a dataset directory: either a single frame folder, or a directory
/// whose subdirectories (sorted by name) are frame folders.
pub fn load_dataset_dir(dir: &Path, layout: &LayoutSpec) -> Result<Vec<(GridTensor, Condition)>> {
    if !list_images(dir)?.is_empty() {
        return Ok(vec![load_folder(dir, layout)?]);
    }
    let mut subdirs: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    subdirs.iter().map(|d| load_folder(d, layout)).collect()
}

/// Intensity-weighted centroid `(x, y)` of a single-channel frame, in pixel
/// centre coordinates.
pub fn centroid(frame: &Frame) -> Option<(f64, f64)> {
    let (mut m, mut mx, mut my) = (0.0, 0.0, 0.0);
    for ((y, x, _), &v) in frame.indexed_iter() {
        m += v;
        mx += v * (x as f64 + 0.5);
        my += v * (y as f64 + 0.5);
    }
    (m > 0.0).then(|| (mx / m, my / m))
}
