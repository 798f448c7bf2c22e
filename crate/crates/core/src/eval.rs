//! Monocular depth evaluation: standard error metrics plus the median
//! scaling that resolves the global scale ambiguity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthesis::DepthMap;

/// The four depth error metrics, all nonnegative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
}

impl DepthMetrics {
    /// Display names for each metric key, in reporting order.
    pub const COLUMN_NAMES: [(&'static str, &'static str); 4] = [
        ("abs_rel", "Abs Rel"),
        ("sq_rel", "Sq Rel"),
        ("rmse", "RMSE"),
        ("rmse_log", "RMSE log"),
    ];
}

/// Median with the even-count convention pinned: the mean of the two
/// middle order statistics.
fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

fn check_pair(pred: &DepthMap, gt: &DepthMap, mask: &[bool]) -> Result<usize> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(Error::ShapeMismatch(format!(
            "pred {}x{} vs gt {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    if mask.len() != pred.width() * pred.height() {
        return Err(Error::ShapeMismatch("mask length".into()));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    for (i, &m) in mask.iter().enumerate() {
        if m && gt.data()[i] <= 0.0 {
            return Err(Error::Domain(format!(
                "ground-truth depth {} at masked pixel {i}",
                gt.data()[i]
            )));
        }
    }
    Ok(n)
}

/// Rescales `pred` by `median(gt) / median(pred)` over the mask.
pub fn median_scale(pred: &DepthMap, gt: &DepthMap, mask: &[bool]) -> Result<(DepthMap, f64)> {
    check_pair(pred, gt, mask)?;
    let mut pv: Vec<f64> = Vec::new();
    let mut gv: Vec<f64> = Vec::new();
    for (i, &m) in mask.iter().enumerate() {
        if m {
            pv.push(pred.data()[i]);
            gv.push(gt.data()[i]);
        }
    }
    let scale = median(&mut gv) / median(&mut pv);
    let scaled = DepthMap::from_data(
        pred.width(),
        pred.height(),
        pred.data().iter().map(|&d| d * scale).collect(),
    )?;
    Ok((scaled, scale))
}

/// Depth error metrics over the masked pixels, after optional median
/// scaling and clamping of the prediction to `[clamp.0, clamp.1]`:
///
/// - `abs_rel = mean(|p - g| / g)`
/// - `sq_rel  = mean((p - g)^2 / g)`
/// - `rmse    = sqrt(mean((p - g)^2))`
/// - `rmse_log = sqrt(mean((ln p - ln g)^2))`
pub fn depth_metrics(
    pred: &DepthMap,
    gt: &DepthMap,
    mask: &[bool],
    clamp: (f64, f64),
    apply_median_scaling: bool,
) -> Result<DepthMetrics> {
    let n = check_pair(pred, gt, mask)?;
    if !(clamp.0 > 0.0 && clamp.1 > clamp.0) {
        return Err(Error::Domain(format!(
            "need 0 < clamp min < max, got [{}, {}]",
            clamp.0, clamp.1
        )));
    }
    let scaled;
    let pred = if apply_median_scaling {
        scaled = median_scale(pred, gt, mask)?.0;
        &scaled
    } else {
        pred
    };
    let inv_n = 1.0 / n as f64;
    let (mut abs_rel, mut sq_rel, mut mse, mut mse_log) = (0.0, 0.0, 0.0, 0.0);
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        let p = pred.data()[i].clamp(clamp.0, clamp.1);
        let g = gt.data()[i];
        let d = p - g;
        abs_rel += d.abs() / g * inv_n;
        sq_rel += d * d / g * inv_n;
        mse += d * d * inv_n;
        let dl = p.ln() - g.ln();
        mse_log += dl * dl * inv_n;
    }
    Ok(DepthMetrics {
        abs_rel,
        sq_rel,
        rmse: mse.sqrt(),
        rmse_log: mse_log.sqrt(),
    })
}
