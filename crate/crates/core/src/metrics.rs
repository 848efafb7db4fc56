//! Evaluation metrics: PSNR, SSIM, temporal consistency, reference fidelity,
//! and the intra/cross/condition attention-mass split.

use ndarray::{s, Array2, Zip};
use serde::{Deserialize, Serialize, Serializer};

use crate::backbone::{AttentionRecord, TokenKind};
use crate::error::{Error, Result};
use crate::flow::directional_diff;
use crate::layout::{Frame, GridTensor};
use crate::sampler::MaskGrid;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_frames(a: &[Frame], b: &[Frame]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} frames vs {} frames",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::ShapeMismatch("no frames to compare".into()));
    }
    for (k, (x, y)) in a.iter().zip(b).enumerate() {
        if x.shape() != y.shape() {
            return Err(Error::ShapeMismatch(format!(
                "frame {k}: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
    }
    Ok(())
}

pub fn mse(a: &[Frame], b: &[Frame]) -> Result<f64> {
    check_frames(a, b)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (x, y) in a.iter().zip(b) {
        sum += Zip::from(x).and(y).fold(0.0, |acc, &p, &q| acc + (p - q) * (p - q));
        n += x.len();
    }
    Ok(sum / n as f64)
}

/// Peak signal-to-noise ratio for data in `[0, 1]`; `f64::INFINITY` for
/// identical inputs.
pub fn psnr(a: &[Frame], b: &[Frame]) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / m).log10()
    })
}

fn gaussian_window(size: usize) -> Array2<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let mut w = Array2::from_shape_fn((size, size), |(i, j)| g[i] * g[j]);
    let total = w.sum();
    w /= total;
    w
}

/// Mean SSIM over valid window positions of one single-channel plane.
fn ssim_plane(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let (h, w) = a.dim();
    let size = SSIM_WINDOW.min(h).min(w);
    let win = gaussian_window(size);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=h - size {
        for x in 0..=w - size {
            let pa = a.slice(s![y..y + size, x..x + size]);
            let pb = b.slice(s![y..y + size, x..x + size]);
            let (mut ma, mut mb) = (0.0, 0.0);
            Zip::from(&win).and(&pa).and(&pb).for_each(|&g, &u, &v| {
                ma += g * u;
                mb += g * v;
            });
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            Zip::from(&win).and(&pa).and(&pb).for_each(|&g, &u, &v| {
                va += g * (u - ma) * (u - ma);
                vb += g * (v - mb) * (v - mb);
                cov += g * (u - ma) * (v - mb);
            });
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// Mean structural similarity (Gaussian 11-tap window, sigma 1.5, K1 = 0.01,
/// K2 = 0.03, data range 1). Frames smaller than the window use a window the
/// size of the smaller side.
pub fn ssim(a: &[Frame], b: &[Frame]) -> Result<f64> {
    check_frames(a, b)?;
    let mut total = 0.0;
    let mut planes = 0usize;
    for (x, y) in a.iter().zip(b) {
        for c in 0..x.shape()[2] {
            let pa = x.slice(s![.., .., c]).to_owned();
            let pb = y.slice(s![.., .., c]).to_owned();
            total += ssim_plane(&pa, &pb);
            planes += 1;
        }
    }
    Ok(total / planes as f64)
}

/// Mean squared magnitude of consecutive-frame differences.
pub fn temporal_consistency_frames(frames: &[Frame]) -> Result<f64> {
    if frames.len() < 2 {
        return Err(Error::SingleCellLayout);
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for w in frames.windows(2) {
        if w[0].shape() != w[1].shape() {
            return Err(Error::ShapeMismatch("frames differ in shape".into()));
        }
        sum += Zip::from(&w[1]).and(&w[0]).fold(0.0, |acc, &p, &q| acc + (p - q) * (p - q));
        n += w[0].len();
    }
    Ok(sum / n as f64)
}

/// Mean squared magnitude of the row-major directional differences of a grid.
pub fn temporal_consistency(grid: &GridTensor) -> Result<f64> {
    let diffs = directional_diff(grid)?;
    let n: usize = diffs.iter().map(|d| d.len()).sum();
    let sum: f64 = diffs.iter().flat_map(|d| d.iter()).map(|v| v * v).sum();
    Ok(sum / n as f64)
}

/// Largest absolute deviation from the reference over cells masked 0.
pub fn reference_fidelity(output: &GridTensor, reference: &GridTensor, mask: &MaskGrid) -> Result<f64> {
    output.ensure_same_shape(reference)?;
    let l = output.layout();
    if mask.rows() != l.rows || mask.cols() != l.cols {
        return Err(Error::ShapeMismatch("mask does not match the layout".into()));
    }
    let mut worst = 0.0f64;
    for (i, j) in mask.reference_cells() {
        let d = Zip::from(&output.cell(i, j))
            .and(&reference.cell(i, j))
            .fold(0.0f64, |m, &a, &b| m.max((a - b).abs()));
        worst = worst.max(d);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionMass {
    pub intra: f64,
    pub cross: f64,
    pub cond: f64,
}

impl AttentionMass {
    pub fn sum(&self) -> f64 {
        self.intra + self.cross + self.cond
    }
}

/// Splits each image-query row's attention mass by key class (same cell,
/// other cell, condition token) and averages over layers, heads and queries.
pub fn attention_report(record: &AttentionRecord) -> Result<AttentionMass> {
    let tokens = &record.tokens;
    let mut acc = AttentionMass {
        intra: 0.0,
        cross: 0.0,
        cond: 0.0,
    };
    let mut rows = 0usize;
    for head in record.layers.iter().flatten() {
        if head.nrows() != tokens.len() || head.ncols() != tokens.len() {
            return Err(Error::ShapeMismatch(
                "attention matrix does not match the token map".into(),
            ));
        }
        for (q, row) in head.rows().into_iter().enumerate() {
            let TokenKind::Image { row: qi, col: qj } = tokens[q] else {
                continue;
            };
            let (mut intra, mut cross, mut cond) = (0.0, 0.0, 0.0);
            for (k, &w) in row.iter().enumerate() {
                match tokens[k] {
                    TokenKind::Image { row, col } if row == qi && col == qj => intra += w,
                    TokenKind::Image { .. } => cross += w,
                    TokenKind::Condition => cond += w,
                }
            }
            let sum = intra + cross + cond;
            if (sum - 1.0).abs() > 1e-5 || row.iter().any(|&w| w < 0.0) {
                return Err(Error::UnnormalizedRecord { sum });
            }
            acc.intra += intra;
            acc.cross += cross;
            acc.cond += cond;
            rows += 1;
        }
    }
    if rows == 0 {
        return Err(Error::ShapeMismatch("record has no image queries".into()));
    }
    let n = rows as f64;
    Ok(AttentionMass {
        intra: acc.intra / n,
        cross: acc.cross / n,
        cond: acc.cond / n,
    })
}

fn psnr_json<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("INF")
    } else {
        s.serialize_f64(*v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    #[serde(serialize_with = "psnr_json")]
    pub psnr: f64,
    pub ssim: f64,
    pub temporal_consistency: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_fidelity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attention: Option<AttentionMass>,
}

/// Compares a predicted sequence against a reference sequence.
pub fn evaluate(pred: &[Frame], reference: &[Frame]) -> Result<MetricReport> {
    Ok(MetricReport {
        psnr: psnr(pred, reference)?,
        ssim: ssim(pred, reference)?,
        temporal_consistency: temporal_consistency_frames(pred)?,
        reference_fidelity: None,
        attention: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{pack, LayoutSpec};
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_frames(n: usize, seed: u64) -> Vec<Frame> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Array3::from_shape_simple_fn((12, 13, 1), || rng.gen::<f64>()))
            .collect()
    }

    #[test]
    fn psnr_examples() {
        let a = rand_frames(3, 1);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let z = vec![Array3::zeros((4, 4, 1))];
        let p = vec![Array3::from_elem((4, 4, 1), 0.1)];
        assert!((psnr(&z, &p).unwrap() - 20.0).abs() < 1e-9);

        let b = rand_frames(3, 2);
        let mut sum = 0.0;
        let mut n = 0.0;
        for (x, y) in a.iter().zip(&b) {
            for (p, q) in x.iter().zip(y.iter()) {
                sum += (p - q) * (p - q);
                n += 1.0;
            }
        }
        let oracle = 10.0 * (1.0 / (sum / n)).log10();
        assert!((psnr(&a, &b).unwrap() - oracle).abs() < 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &rand_frames(2, 3)).is_err());
    }

    #[test]
    fn ssim_examples() {
        let a = rand_frames(2, 4);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let inv: Vec<Frame> = a.iter().map(|f| f.mapv(|v| 1.0 - v)).collect();
        assert!(ssim(&a, &inv).unwrap() < 1.0);
        let c = vec![Array3::from_elem((16, 16, 1), 0.5)];
        assert!((ssim(&c, &c).unwrap() - 1.0).abs() < 1e-12);
        let b = rand_frames(2, 5);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn temporal_consistency_examples() {
        let l = LayoutSpec::new(2, 3, 2, 2, 1).unwrap();
        assert_eq!(temporal_consistency(&GridTensor::full(l, 0.4)).unwrap(), 0.0);
        assert!(matches!(
            temporal_consistency(&GridTensor::zeros(l.with_grid(1, 1).unwrap())),
            Err(Error::SingleCellLayout)
        ));

        // alternating black/white is the maximum over binary sequences
        let l4 = LayoutSpec::new(1, 4, 1, 1, 1).unwrap();
        let mut best = (0.0, 0u32);
        for bits in 0u32..16 {
            let frames: Vec<Frame> = (0..4)
                .map(|k| Array3::from_elem((1, 1, 1), ((bits >> k) & 1) as f64))
                .collect();
            let tc = temporal_consistency(&pack(&frames, &l4).unwrap()).unwrap();
            if tc > best.0 {
                best = (tc, bits);
            }
        }
        assert!(best.1 == 0b0101 || best.1 == 0b1010);
        assert_eq!(best.0, 1.0);
    }

    #[test]
    fn temporal_consistency_equals_flow_loss_against_zero() {
        let l = LayoutSpec::new(2, 2, 3, 3, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = GridTensor::from_fn(l, || rng.gen());
        let tc = temporal_consistency(&g).unwrap();
        let fl = crate::flow::flow_loss(&g, &GridTensor::zeros(l)).unwrap();
        assert!((tc - fl).abs() < 1e-12);
        let frames = crate::layout::unpack(&g).unwrap();
        assert!((temporal_consistency_frames(&frames).unwrap() - tc).abs() < 1e-12);
    }

    #[test]
    fn attention_report_counting() {
        // 2 cells x 2 tokens each, 1 condition token, uniform weights
        let tokens = vec![
            TokenKind::Image { row: 0, col: 0 },
            TokenKind::Image { row: 0, col: 0 },
            TokenKind::Image { row: 0, col: 1 },
            TokenKind::Image { row: 0, col: 1 },
            TokenKind::Condition,
        ];
        let uniform = Array2::from_elem((5, 5), 0.2);
        let rec = AttentionRecord {
            layers: vec![vec![uniform.clone(), uniform]],
            tokens,
        };
        let m = attention_report(&rec).unwrap();
        assert!((m.intra - 0.4).abs() < 1e-12);
        assert!((m.cross - 0.4).abs() < 1e-12);
        assert!((m.cond - 0.2).abs() < 1e-12);

        let mut bad = rec.clone();
        bad.layers[0][0][[0, 0]] = 0.5;
        assert!(matches!(
            attention_report(&bad),
            Err(Error::UnnormalizedRecord { .. })
        ));
    }

    #[test]
    fn report_serializes_infinite_psnr() {
        let a = rand_frames(2, 9);
        let r = evaluate(&a, &a).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"psnr\":\"INF\""));
        assert!(json.contains("\"ssim\":1"));
    }
}
