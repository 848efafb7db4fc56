//! Omni inference: grid initialization, noise injection at level `T`, and
//! masked Euler integration of the learned velocity field from `t = T` down
//! to `t = 0`, with optional classifier-free guidance.

use ndarray::Zip;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Model;
use crate::condition::Condition;
use crate::error::{Error, Result};
use crate::flow::standard_normal_like;
use crate::layout::{pack, Frame, GridTensor, LayoutSpec};

/// Default noise level, inside the recommended `[0.8, 1.0]` band.
pub const DEFAULT_NOISE_LEVEL: f64 = 0.9;
pub const DEFAULT_STEPS: usize = 20;
pub const DEFAULT_GUIDANCE: f64 = 3.5;

/// Per-cell mask: `false` (0) marks a reference cell, `true` (1) a generated one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskGrid {
    rows: usize,
    cols: usize,
    cells: Vec<bool>,
}

impl MaskGrid {
    pub fn ones(layout: &LayoutSpec) -> Self {
        MaskGrid {
            rows: layout.rows,
            cols: layout.cols,
            cells: vec![true; layout.frame_count()],
        }
    }

    pub fn zeros(layout: &LayoutSpec) -> Self {
        MaskGrid {
            rows: layout.rows,
            cols: layout.cols,
            cells: vec![false; layout.frame_count()],
        }
    }

    /// Row-major cells, `true` meaning generated.
    pub fn from_cells(rows: usize, cols: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} mask cells for a {rows}x{cols} layout",
                cells.len()
            )));
        }
        Ok(MaskGrid { rows, cols, cells })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_generated(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, generated: bool) {
        self.cells[row * self.cols + col] = generated;
    }

    pub fn reference_cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &g)| !g)
            .map(|(k, _)| (k / self.cols, k % self.cols))
    }

    /// All cells are references: sampling returns the reference.
    pub fn is_pass_through(&self) -> bool {
        self.cells.iter().all(|&g| !g)
    }

    pub fn matches(&self, layout: &LayoutSpec) -> bool {
        self.rows == layout.rows && self.cols == layout.cols
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Reference cells are reset to the clean reference after every step.
    PaperLiteral,
    /// Reference cells follow the forward path `(1 - t) * ref + t * eps`
    /// with a fixed `eps`, reaching the clean reference at `t = 0`.
    TrajectoryConsistent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub noise_level: f64,
    pub steps: usize,
    pub guidance_scale: f64,
    pub mask_mode: MaskMode,
    pub seed: u64,
    /// Permits `noise_level = 0` for diagnostics.
    #[serde(default)]
    pub allow_degenerate: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            noise_level: DEFAULT_NOISE_LEVEL,
            steps: DEFAULT_STEPS,
            guidance_scale: DEFAULT_GUIDANCE,
            mask_mode: MaskMode::PaperLiteral,
            seed: 0,
            allow_degenerate: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        self.level()?;
        if self.steps == 0 {
            return Err(Error::Config("sampling needs at least one step".into()));
        }
        if !(self.guidance_scale >= 0.0) || !self.guidance_scale.is_finite() {
            return Err(Error::Config(format!(
                "guidance scale must be >= 0, got {}",
                self.guidance_scale
            )));
        }
        Ok(())
    }

    pub fn level(&self) -> Result<NoiseLevel> {
        if self.noise_level == 0.0 && !self.allow_degenerate {
            return Err(Error::Config(
                "noise level T = 0 adds no noise and returns the initialization unchanged; \
                 it is only accepted with allow_degenerate (--allow-degenerate)"
                    .into(),
            ));
        }
        if self.allow_degenerate {
            NoiseLevel::diagnostic(self.noise_level)
        } else {
            NoiseLevel::new(self.noise_level)
        }
    }
}

/// Noise level `T` in `(0, 1]`, or `[0, 1]` when built for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevel(f64);

impl NoiseLevel {
    pub fn new(t: f64) -> Result<Self> {
        if t > 0.0 && t <= 1.0 {
            Ok(NoiseLevel(t))
        } else {
            Err(Error::TOutOfRange(t))
        }
    }

    /// Also accepts `T = 0`, which reproduces the initialization unchanged.
    pub fn diagnostic(t: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&t) {
            Ok(NoiseLevel(t))
        } else {
            Err(Error::TOutOfRange(t))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// One reference frame copied into every cell; cell (0, 0) is pinned.
    Expansion,
    /// Key frames at the start of each row, blended linearly along the row.
    Interpolation,
    /// Standard normal initialization, nothing pinned.
    Free,
    /// A full degraded sequence as the initialization, nothing pinned.
    Restoration,
}

/// Builds the initial grid and mask for a task.
///
/// Interpolation takes `rows` key frames (one per row start) or `rows + 1`,
/// where the extra key is the frame that would follow the last cell. Cell
/// `(i, j)` is `(1 - j/n) * key_i + (j/n) * key_{i+1}`; without the extra key
/// the last row holds its own key.
pub fn init_grid(
    mode: InitMode,
    refs: &[Frame],
    layout: &LayoutSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(GridTensor, MaskGrid)> {
    layout.validate()?;
    let check_shape = |f: &Frame| -> Result<()> {
        if f.shape() != layout.frame_shape() {
            return Err(Error::GeometryMismatch(format!(
                "reference frame {:?} does not match layout frames {:?}",
                f.shape(),
                layout.frame_shape()
            )));
        }
        Ok(())
    };
    match mode {
        InitMode::Free => {
            if !refs.is_empty() {
                return Err(Error::Config("free generation takes no references".into()));
            }
            Ok((
                standard_normal_like(&GridTensor::zeros(*layout), rng),
                MaskGrid::ones(layout),
            ))
        }
        InitMode::Expansion => {
            let [reference] = refs else {
                return Err(Error::MissingReference(format!(
                    "expansion needs exactly one reference frame, got {}",
                    refs.len()
                )));
            };
            check_shape(reference)?;
            if layout.frame_count() < 2 {
                return Err(Error::LayoutTooSmall(
                    "expansion needs at least two cells".into(),
                ));
            }
            let frames = vec![reference.clone(); layout.frame_count()];
            let mut mask = MaskGrid::ones(layout);
            mask.set(0, 0, false);
            Ok((pack(&frames, layout)?, mask))
        }
        InitMode::Interpolation => {
            let m = layout.rows;
            if refs.len() != m && refs.len() != m + 1 {
                return Err(Error::MissingReference(format!(
                    "interpolation on {} rows needs {} or {} key frames, got {}",
                    m,
                    m,
                    m + 1,
                    refs.len()
                )));
            }
            if layout.cols < 2 {
                return Err(Error::LayoutTooSmall(
                    "interpolation needs at least two columns".into(),
                ));
            }
            refs.iter().try_for_each(check_shape)?;
            let n = layout.cols as f64;
            let mut grid = GridTensor::zeros(*layout);
            let mut mask = MaskGrid::ones(layout);
            for i in 0..m {
                let start = &refs[i];
                let end = refs.get(i + 1).unwrap_or(start);
                for j in 0..layout.cols {
                    let w = j as f64 / n;
                    let mut cell = grid.cell_mut(i, j);
                    Zip::from(&mut cell)
                        .and(start)
                        .and(end)
                        .for_each(|c, &a, &b| *c = (1.0 - w) * a + w * b);
                }
                mask.set(i, 0, false);
            }
            Ok((grid, mask))
        }
        InitMode::Restoration => {
            if refs.len() != layout.frame_count() {
                return Err(Error::MissingReference(format!(
                    "restoration needs {} degraded frames, got {}",
                    layout.frame_count(),
                    refs.len()
                )));
            }
            Ok((pack(refs, layout)?, MaskGrid::ones(layout)))
        }
    }
}

/// `(1 - T) * init + T * noise`.
pub fn inject_noise(init: &GridTensor, level: NoiseLevel, noise: &GridTensor) -> Result<GridTensor> {
    let t = level.get();
    init.lerp_with(1.0 - t, noise, t)
}

/// What reference cells are reset to during sampling.
#[derive(Debug, Clone, Copy)]
pub enum Anchor<'a> {
    Clean,
    /// Forward-path position of the reference with this fixed noise.
    Noised(&'a GridTensor),
}

pub fn apply_mask(
    current: &GridTensor,
    reference: &GridTensor,
    mask: &MaskGrid,
    t: f64,
    anchor: Anchor<'_>,
) -> Result<GridTensor> {
    current.ensure_same_shape(reference)?;
    if !mask.matches(current.layout()) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} mask for a {}x{} layout",
            mask.rows(),
            mask.cols(),
            current.layout().rows,
            current.layout().cols
        )));
    }
    let mut out = current.clone();
    for (i, j) in mask.reference_cells() {
        let mut cell = out.cell_mut(i, j);
        match anchor {
            Anchor::Noised(noise) if t > 0.0 => {
                noise.ensure_same_shape(reference)?;
                Zip::from(&mut cell)
                    .and(&reference.cell(i, j))
                    .and(&noise.cell(i, j))
                    .for_each(|c, &r, &e| *c = (1.0 - t) * r + t * e);
            }
            _ => cell.assign(&reference.cell(i, j)),
        }
    }
    Ok(out)
}

/// A conditional velocity field `v(x, t, cond)`.
pub trait VelocityField {
    fn velocity(&self, x: &GridTensor, t: f64, cond: &Condition) -> Result<GridTensor>;

    /// Whether the field understands the null condition (needed for guidance).
    fn supports_null(&self) -> bool {
        true
    }

    fn accepts(&self, _layout: &LayoutSpec) -> bool {
        true
    }
}

impl VelocityField for Model {
    fn velocity(&self, x: &GridTensor, t: f64, cond: &Condition) -> Result<GridTensor> {
        self.predict_velocity(x, t, cond)
    }

    fn accepts(&self, layout: &LayoutSpec) -> bool {
        self.config().accepts(layout)
    }
}

/// Guided velocity `v_null + s * (v_cond - v_null)`, or `v_cond` when
/// guidance is off or unavailable.
pub fn guided_velocity(
    field: &impl VelocityField,
    x: &GridTensor,
    t: f64,
    cond: &Condition,
    scale: f64,
) -> Result<GridTensor> {
    let v_cond = field.velocity(x, t, cond)?;
    if scale > 0.0 && field.supports_null() && !cond.null_flag {
        let v_null = field.velocity(x, t, &cond.to_null())?;
        v_null.lerp_with(1.0 - scale, &v_cond, scale)
    } else {
        Ok(v_cond)
    }
}

/// Integrates from `t = T` to `t = 0` with uniform explicit Euler steps,
/// re-imposing reference cells after injection and after every step.
pub fn sample(
    field: &impl VelocityField,
    init: &GridTensor,
    mask: &MaskGrid,
    reference: &GridTensor,
    cond: &Condition,
    cfg: &SamplerConfig,
) -> Result<GridTensor> {
    cfg.validate()?;
    let layout = init.layout();
    if !field.accepts(layout) {
        return Err(Error::GeometryMismatch(format!(
            "model cannot run on {}x{}x{} frames",
            layout.frame_h, layout.frame_w, layout.channels
        )));
    }
    if init.layout() != reference.layout() || !mask.matches(layout) {
        return Err(Error::GeometryMismatch(
            "init, reference and mask must share one layout".into(),
        ));
    }
    let level = cfg.level()?;
    let big_t = level.get();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = standard_normal_like(init, &mut rng);
    let anchor = match cfg.mask_mode {
        MaskMode::PaperLiteral => Anchor::Clean,
        MaskMode::TrajectoryConsistent => Anchor::Noised(&noise),
    };

    let mut x = inject_noise(init, level, &noise)?;
    x = apply_mask(&x, reference, mask, big_t, anchor)?;
    let steps = cfg.steps;
    let dt = big_t / steps as f64;
    for k in 0..steps {
        let t = big_t * (1.0 - k as f64 / steps as f64);
        let t_next = big_t * (1.0 - (k + 1) as f64 / steps as f64);
        let v = guided_velocity(field, &x, t, cond, cfg.guidance_scale)?;
        Zip::from(x.data_mut())
            .and(v.data())
            .for_each(|xi, &vi| *xi -= dt * vi);
        x = apply_mask(&x, reference, mask, t_next, anchor)?;
        if !x.is_finite() {
            return Err(Error::NonFiniteState(t_next));
        }
    }
    Ok(x)
}
