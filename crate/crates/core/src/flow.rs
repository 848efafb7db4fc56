//! Flow-matching math over packed grids.
//!
//! The forward path is the straight line `x_t = (1 - t) * clean + t * noise`,
//! whose constant derivative `noise - clean` is the velocity the network
//! regresses. Both losses compare predicted and target velocities: the base
//! loss elementwise, the flow loss on the chain of differences between
//! consecutive cells in row-major order (which crosses from the last cell of
//! one row to the first cell of the next).

use ndarray::{Array3, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::GridTensor;

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) || t.is_nan() {
        return Err(Error::TOutOfRange(t));
    }
    Ok(())
}

pub fn forward_interpolate(clean: &GridTensor, t: f64, noise: &GridTensor) -> Result<GridTensor> {
    check_t(t)?;
    clean.lerp_with(1.0 - t, noise, t)
}

pub fn velocity_target(clean: &GridTensor, noise: &GridTensor) -> Result<GridTensor> {
    noise.lerp_with(1.0, clean, -1.0)
}

/// One training example on the interpolation path.
#[derive(Debug, Clone)]
pub struct NoisySample {
    pub x_t: GridTensor,
    pub t: f64,
    pub noise: GridTensor,
    pub target_velocity: GridTensor,
}

impl NoisySample {
    pub fn new(clean: &GridTensor, t: f64, noise: GridTensor) -> Result<Self> {
        let x_t = forward_interpolate(clean, t, &noise)?;
        let target_velocity = velocity_target(clean, &noise)?;
        Ok(NoisySample {
            x_t,
            t,
            noise,
            target_velocity,
        })
    }

    /// Draws `t ~ U(0,1)` and `noise ~ N(0, I)`.
    pub fn draw(clean: &GridTensor, rng: &mut impl Rng) -> Result<Self> {
        let t: f64 = rng.gen();
        let noise = standard_normal_like(clean, rng);
        Self::new(clean, t, noise)
    }
}

pub fn standard_normal_like(like: &GridTensor, rng: &mut impl Rng) -> GridTensor {
    GridTensor::from_fn(*like.layout(), || rng.sample(StandardNormal))
}

pub fn base_loss(pred: &GridTensor, target: &GridTensor) -> Result<f64> {
    pred.ensure_same_shape(target)?;
    let n = pred.len() as f64;
    let sum = Zip::from(pred.data())
        .and(target.data())
        .fold(0.0, |acc, &p, &q| acc + (p - q) * (p - q));
    Ok(sum / n)
}

/// Gradient of [`base_loss`] with respect to `pred`.
pub fn base_loss_grad(pred: &GridTensor, target: &GridTensor) -> Result<Array3<f64>> {
    pred.ensure_same_shape(target)?;
    let scale = 2.0 / pred.len() as f64;
    Ok(Zip::from(pred.data())
        .and(target.data())
        .map_collect(|&p, &q| scale * (p - q)))
}

/// Differences `cell(k) - cell(k-1)` for `k = 1..F`, row-major.
pub fn directional_diff(x: &GridTensor) -> Result<Vec<Array3<f64>>> {
    let f = x.layout().frame_count();
    if f < 2 {
        return Err(Error::SingleCellLayout);
    }
    Ok((1..f).map(|k| &x.cell_at(k) - &x.cell_at(k - 1)).collect())
}

/// Per-cell residual `e_k = (pred_k - pred_{k-1}) - (target_k - target_{k-1})`,
/// i.e. the chain difference of `pred - target`.
fn chain_residuals(pred: &GridTensor, target: &GridTensor) -> Result<Vec<Array3<f64>>> {
    pred.ensure_same_shape(target)?;
    let f = pred.layout().frame_count();
    if f < 2 {
        return Err(Error::SingleCellLayout);
    }
    let delta = pred.lerp_with(1.0, target, -1.0)?;
    directional_diff(&delta)
}

fn flow_normalizer(pred: &GridTensor) -> f64 {
    let l = pred.layout();
    ((l.frame_count() - 1) * l.frame_h * l.frame_w * l.channels) as f64
}

pub fn flow_loss(pred: &GridTensor, target: &GridTensor) -> Result<f64> {
    let residuals = chain_residuals(pred, target)?;
    let sum: f64 = residuals
        .iter()
        .map(|e| e.iter().map(|v| v * v).sum::<f64>())
        .sum();
    Ok(sum / flow_normalizer(pred))
}

/// Gradient of [`flow_loss`] with respect to `pred`.
///
/// Cell `k` appears in residuals `e_k` (with +1) and `e_{k+1}` (with -1).
pub fn flow_loss_grad(pred: &GridTensor, target: &GridTensor) -> Result<Array3<f64>> {
    let residuals = chain_residuals(pred, target)?;
    let scale = 2.0 / flow_normalizer(pred);
    let f = pred.layout().frame_count();
    let mut grad = GridTensor::zeros(*pred.layout());
    for k in 0..f {
        let mut cell = grad.cell_at_mut(k);
        if k >= 1 {
            cell.scaled_add(scale, &residuals[k - 1]);
        }
        if k + 1 < f {
            cell.scaled_add(-scale, &residuals[k]);
        }
    }
    Ok(grad.into_data())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub base: f64,
    pub flow: f64,
    pub alpha: f64,
    pub total: f64,
}

pub fn total_loss(base: f64, flow: f64, alpha: f64) -> Result<LossBreakdown> {
    if alpha < 0.0 || alpha.is_nan() {
        return Err(Error::NegativeAlpha(alpha));
    }
    Ok(LossBreakdown {
        base,
        flow,
        alpha,
        total: base + alpha * flow,
    })
}
