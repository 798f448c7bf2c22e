//! The photometric reconstruction objective and its exact gradient.
//!
//! The loss per snippet and pyramid level combines an SSIM term and an L1
//! term over the valid warp mask, plus an edge-aware smoothness
//! regularizer on the realized disparity. The gradient chains loss
//! derivatives through bilinear sampling, the warp-field Jacobians, and
//! the depth-grid realization; a central-difference oracle over the same
//! objective verifies it.
//!
//! Window statistics inside [`photometric_loss`] use valid samples only
//! (renormalized weights), so masked-out pixels can never influence the
//! value or the gradient.

use std::ops::Range;

use crate::camera::{realize_intrinsics, IntrinsicParams};
use crate::engine::{realize_depth, CalibProblem, InvDepthGrid};
use crate::error::{Error, Result};
use crate::geometry::{exp_se3, Twist};
use crate::image::Image;
use crate::synthesis::{synthesize_view, warp_coordinates, SynthView, WarpField};

/// Photometric loss composition. `alpha` mixes SSIM against L1 as
/// `alpha/2 (1 - SSIM) + (1 - alpha) L1`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PhotometricConfig {
    pub alpha: f64,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
    pub smoothness_weight: f64,
    /// Per-pixel minimum over context frames instead of the mean.
    pub use_min_reprojection: bool,
}

impl Default for PhotometricConfig {
    fn default() -> Self {
        PhotometricConfig {
            alpha: 0.85,
            ssim_c1: 0.01 * 0.01,
            ssim_c2: 0.03 * 0.03,
            smoothness_weight: 1e-3,
            use_min_reprojection: false,
        }
    }
}

impl PhotometricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Domain(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.ssim_c1 <= 0.0 || self.ssim_c2 <= 0.0 {
            return Err(Error::Domain("SSIM constants must be positive".into()));
        }
        if self.smoothness_weight < 0.0 {
            return Err(Error::Domain("smoothness weight must be >= 0".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parameter packing
// ---------------------------------------------------------------------------

/// Describes how `[intrinsics | twists | grids]` pack into one flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub n_pairs: usize,
    pub n_targets: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

/// Coarse parameter grouping, used for per-group learning-rate scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Intrinsics,
    Twists,
    Grids,
}

impl ParamLayout {
    pub fn grid_size(&self) -> usize {
        self.grid_h * self.grid_w
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        IntrinsicParams::COUNT + 6 * self.n_pairs + self.grid_size() * self.n_targets
    }

    pub fn intrinsics_range(&self) -> Range<usize> {
        0..IntrinsicParams::COUNT
    }

    pub fn twist_range(&self, pair: usize) -> Range<usize> {
        assert!(pair < self.n_pairs);
        let start = IntrinsicParams::COUNT + 6 * pair;
        start..start + 6
    }

    pub fn grid_range(&self, target: usize) -> Range<usize> {
        assert!(target < self.n_targets);
        let start = IntrinsicParams::COUNT + 6 * self.n_pairs + self.grid_size() * target;
        start..start + self.grid_size()
    }

    pub fn group_of(&self, index: usize) -> ParamGroup {
        if index < IntrinsicParams::COUNT {
            ParamGroup::Intrinsics
        } else if index < IntrinsicParams::COUNT + 6 * self.n_pairs {
            ParamGroup::Twists
        } else {
            debug_assert!(index < self.len());
            ParamGroup::Grids
        }
    }
}

/// Flat trainable state: `[4 raw intrinsics | 6 per pair | gh*gw per target]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    layout: ParamLayout,
    data: Vec<f64>,
}

/// Same shape as [`ParamVector`]; holds the objective gradient.
pub type ParamGradient = ParamVector;

impl ParamVector {
    pub fn zeros(layout: ParamLayout) -> Self {
        ParamVector {
            data: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn from_data(layout: ParamLayout, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.len() {
            return Err(Error::LayoutMismatch(format!(
                "vector length {} != layout length {}",
                data.len(),
                layout.len()
            )));
        }
        Ok(ParamVector { layout, data })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn intrinsics(&self) -> IntrinsicParams {
        IntrinsicParams::from_raw([self.data[0], self.data[1], self.data[2], self.data[3]])
    }

    pub fn set_intrinsics(&mut self, p: &IntrinsicParams) {
        self.data[..4].copy_from_slice(&p.raw());
    }

    pub fn twist(&self, pair: usize) -> Twist {
        Twist::from_slice(&self.data[self.layout.twist_range(pair)])
    }

    pub fn set_twist(&mut self, pair: usize, xi: &Twist) {
        let r = self.layout.twist_range(pair);
        self.data[r].copy_from_slice(&xi.to_array());
    }

    pub fn grid_slice(&self, target: usize) -> &[f64] {
        &self.data[self.layout.grid_range(target)]
    }

    pub fn set_grid(&mut self, target: usize, raw: &[f64]) {
        let r = self.layout.grid_range(target);
        self.data[r].copy_from_slice(raw);
    }

    pub fn grid(&self, target: usize) -> InvDepthGrid {
        InvDepthGrid::from_raw(
            self.layout.grid_h,
            self.layout.grid_w,
            self.grid_slice(target).to_vec(),
        )
    }
}

// ---------------------------------------------------------------------------
// L1
// ---------------------------------------------------------------------------

fn check_same_shape(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    Ok(())
}

/// Mean absolute difference over valid pixels and channels, with the
/// per-pixel subgradient w.r.t. `b` (0 where `a = b`).
pub fn l1_loss(a: &Image, b: &Image, mask: &[bool]) -> Result<(f64, Vec<f64>)> {
    check_same_shape(a, b)?;
    let c = a.channels();
    let n_valid = mask.iter().filter(|&&m| m).count();
    if n_valid == 0 {
        return Err(Error::EmptyMask);
    }
    let norm = 1.0 / (n_valid * c) as f64;
    let mut value = 0.0;
    let mut d_b = vec![0.0; a.data().len()];
    for i in 0..mask.len() {
        if !mask[i] {
            continue;
        }
        for ch in 0..c {
            let diff = b.data()[i * c + ch] - a.data()[i * c + ch];
            value += diff.abs() * norm;
            if diff != 0.0 {
                d_b[i * c + ch] = diff.signum() * norm;
            }
        }
    }
    Ok((value, d_b))
}

// ---------------------------------------------------------------------------
// SSIM over 3x3 edge-replicated windows
// ---------------------------------------------------------------------------

struct WindowStats {
    mu_a: f64,
    mu_b: f64,
    va: f64,
    vb: f64,
    cab: f64,
    inv_k: f64,
}

#[inline]
fn window_stats(
    a: &Image,
    b: &Image,
    mask: Option<&[bool]>,
    x: usize,
    y: usize,
    ch: usize,
) -> WindowStats {
    let (w, h) = (a.width(), a.height());
    let mut k = 0.0f64;
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for dy in -1i64..=1 {
        let qy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
        for dx in -1i64..=1 {
            let qx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
            if let Some(m) = mask {
                if !m[qy * w + qx] {
                    continue;
                }
            }
            let av = a.at(qx, qy, ch);
            let bv = b.at(qx, qy, ch);
            k += 1.0;
            sa += av;
            sb += bv;
            saa += av * av;
            sbb += bv * bv;
            sab += av * bv;
        }
    }
    debug_assert!(k > 0.0);
    let inv_k = 1.0 / k;
    let mu_a = sa * inv_k;
    let mu_b = sb * inv_k;
    WindowStats {
        mu_a,
        mu_b,
        va: saa * inv_k - mu_a * mu_a,
        vb: sbb * inv_k - mu_b * mu_b,
        cab: sab * inv_k - mu_a * mu_b,
        inv_k,
    }
}

#[inline]
fn ssim_from_stats(s: &WindowStats, c1: f64, c2: f64) -> f64 {
    let n1 = 2.0 * s.mu_a * s.mu_b + c1;
    let n2 = 2.0 * s.cab + c2;
    let d1 = s.mu_a * s.mu_a + s.mu_b * s.mu_b + c1;
    let d2 = s.va + s.vb + c2;
    (n1 * n2) / (d1 * d2)
}

fn check_ssim_shape(a: &Image, b: &Image) -> Result<()> {
    check_same_shape(a, b)?;
    if a.width() < 3 || a.height() < 3 {
        return Err(Error::ShapeMismatch(format!(
            "SSIM needs at least 3x3 images, got {}x{}",
            a.width(),
            a.height()
        )));
    }
    Ok(())
}

/// Per-pixel, per-channel SSIM over 3x3 mean/variance/covariance windows
/// (edge-replicated). Values lie in `[-1, 1]`.
pub fn ssim_map(a: &Image, b: &Image, c1: f64, c2: f64) -> Result<Vec<f64>> {
    check_ssim_shape(a, b)?;
    let c = a.channels();
    let mut out = vec![0.0; a.data().len()];
    for y in 0..a.height() {
        for x in 0..a.width() {
            for ch in 0..c {
                let s = window_stats(a, b, None, x, y, ch);
                out[(y * a.width() + x) * c + ch] = ssim_from_stats(&s, c1, c2);
            }
        }
    }
    Ok(out)
}

/// Scatters the exact derivative of `sum_p upstream[p] * ssim[p]` with
/// respect to `b` into a dense buffer. `upstream` and the result are
/// per-pixel, per-channel.
pub fn ssim_backward(a: &Image, b: &Image, c1: f64, c2: f64, upstream: &[f64]) -> Result<Vec<f64>> {
    check_ssim_shape(a, b)?;
    if upstream.len() != a.data().len() {
        return Err(Error::ShapeMismatch("upstream length".into()));
    }
    let mut grad = vec![0.0; a.data().len()];
    let c = a.channels();
    for y in 0..a.height() {
        for x in 0..a.width() {
            for ch in 0..c {
                let lambda = upstream[(y * a.width() + x) * c + ch];
                if lambda == 0.0 {
                    continue;
                }
                scatter_ssim_pixel(a, b, None, x, y, ch, c1, c2, lambda, &mut grad);
            }
        }
    }
    Ok(grad)
}

/// Adds `lambda * d ssim(x, y, ch)/d b` into `grad` (per-pixel-channel).
#[allow(clippy::too_many_arguments)]
fn scatter_ssim_pixel(
    a: &Image,
    b: &Image,
    mask: Option<&[bool]>,
    x: usize,
    y: usize,
    ch: usize,
    c1: f64,
    c2: f64,
    lambda: f64,
    grad: &mut [f64],
) {
    let (w, h) = (a.width(), a.height());
    let c = a.channels();
    let s = window_stats(a, b, mask, x, y, ch);
    let n1 = 2.0 * s.mu_a * s.mu_b + c1;
    let n2 = 2.0 * s.cab + c2;
    let d1 = s.mu_a * s.mu_a + s.mu_b * s.mu_b + c1;
    let d2 = s.va + s.vb + c2;
    let inv_d = 1.0 / (d1 * d2);
    let ds_dn1 = n2 * inv_d;
    let ds_dn2 = n1 * inv_d;
    let ds_dd1 = -n1 * n2 * inv_d / d1;
    let ds_dd2 = -n1 * n2 * inv_d / d2;
    // chain through mu_b, E[b^2], E[ab]
    let a_mu = ds_dn1 * 2.0 * s.mu_a + ds_dd1 * 2.0 * s.mu_b
        + ds_dn2 * (-2.0 * s.mu_a)
        + ds_dd2 * (-2.0 * s.mu_b);
    let a_v = ds_dd2;
    let a_c = ds_dn2 * 2.0;
    for dy in -1i64..=1 {
        let qy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
        for dx in -1i64..=1 {
            let qx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
            let qi = qy * w + qx;
            if let Some(m) = mask {
                if !m[qi] {
                    continue;
                }
            }
            let bq = b.at(qx, qy, ch);
            let aq = a.at(qx, qy, ch);
            grad[qi * c + ch] += lambda * s.inv_k * (a_mu + 2.0 * bq * a_v + aq * a_c);
        }
    }
}

// ---------------------------------------------------------------------------
// Combined photometric loss
// ---------------------------------------------------------------------------

/// Per-pixel channel-mean photometric residual at valid pixels (0
/// elsewhere): `alpha/2 (1 - SSIM) + (1 - alpha) |t - s|`. SSIM windows
/// are restricted to valid samples.
fn photo_pixel_losses(
    target: &Image,
    synth: &Image,
    mask: &[bool],
    cfg: &PhotometricConfig,
) -> Result<Vec<f64>> {
    check_same_shape(target, synth)?;
    cfg.validate()?;
    if cfg.alpha > 0.0 {
        check_ssim_shape(target, synth)?;
    }
    if mask.len() != target.width() * target.height() {
        return Err(Error::ShapeMismatch("mask length".into()));
    }
    let c = target.channels();
    let inv_c = 1.0 / c as f64;
    let mut out = vec![0.0; mask.len()];
    for y in 0..target.height() {
        for x in 0..target.width() {
            let i = y * target.width() + x;
            if !mask[i] {
                continue;
            }
            let mut acc = 0.0;
            for ch in 0..c {
                let l1 = (target.at(x, y, ch) - synth.at(x, y, ch)).abs();
                acc += (1.0 - cfg.alpha) * l1;
                if cfg.alpha > 0.0 {
                    let s = window_stats(target, synth, Some(mask), x, y, ch);
                    acc += cfg.alpha / 2.0 * (1.0 - ssim_from_stats(&s, cfg.ssim_c1, cfg.ssim_c2));
                }
            }
            out[i] = acc * inv_c;
        }
    }
    Ok(out)
}

/// Adds `sum_p pixel_weight[p] * d pixel_loss[p] / d synth` into `d_synth`
/// (per-pixel-channel buffer).
fn photo_backward(
    target: &Image,
    synth: &Image,
    mask: &[bool],
    cfg: &PhotometricConfig,
    pixel_weight: &[f64],
    d_synth: &mut [f64],
) {
    let c = target.channels();
    let inv_c = 1.0 / c as f64;
    for y in 0..target.height() {
        for x in 0..target.width() {
            let i = y * target.width() + x;
            if !mask[i] || pixel_weight[i] == 0.0 {
                continue;
            }
            let pw = pixel_weight[i] * inv_c;
            for ch in 0..c {
                let diff = synth.at(x, y, ch) - target.at(x, y, ch);
                if diff != 0.0 {
                    d_synth[i * c + ch] += pw * (1.0 - cfg.alpha) * diff.signum();
                }
                if cfg.alpha > 0.0 {
                    scatter_ssim_pixel(
                        target,
                        synth,
                        Some(mask),
                        x,
                        y,
                        ch,
                        cfg.ssim_c1,
                        cfg.ssim_c2,
                        -pw * cfg.alpha / 2.0,
                        d_synth,
                    );
                }
            }
        }
    }
}

/// Mean over valid pixels of the combined photometric residual, plus the
/// per-pixel-channel derivative w.r.t. `synth`.
pub fn photometric_loss(
    target: &Image,
    synth: &Image,
    mask: &[bool],
    cfg: &PhotometricConfig,
) -> Result<(f64, Vec<f64>)> {
    let pixel = photo_pixel_losses(target, synth, mask, cfg)?;
    let n_valid = mask.iter().filter(|&&m| m).count();
    if n_valid == 0 {
        return Err(Error::EmptyMask);
    }
    let norm = 1.0 / n_valid as f64;
    let value = pixel.iter().sum::<f64>() * norm;
    let weights: Vec<f64> = mask.iter().map(|&m| if m { norm } else { 0.0 }).collect();
    let mut d_synth = vec![0.0; target.data().len()];
    photo_backward(target, synth, mask, cfg, &weights, &mut d_synth);
    Ok((value, d_synth))
}

// ---------------------------------------------------------------------------
// Edge-aware smoothness
// ---------------------------------------------------------------------------

/// Edge-aware first-order smoothness of mean-normalized disparity:
/// forward differences weighted by `exp(-|image gradient|)` (channel-mean),
/// each direction averaged over the positions where the difference exists.
/// Returns the value and its derivative w.r.t. every disparity entry
/// (including the coupling through the normalizing mean).
pub fn smoothness_loss(
    disparity: &[f64],
    width: usize,
    height: usize,
    guide: &Image,
) -> Result<(f64, Vec<f64>)> {
    if disparity.len() != width * height || guide.width() != width || guide.height() != height {
        return Err(Error::ShapeMismatch("smoothness inputs".into()));
    }
    let n = disparity.len() as f64;
    let mean = disparity.iter().sum::<f64>() / n;
    if !(mean.is_finite() && mean > 0.0) {
        return Err(Error::Domain(format!("disparity mean {mean} not positive")));
    }
    let inv_mu = 1.0 / mean;
    let c = guide.channels();
    let inv_c = 1.0 / c as f64;
    let mut value = 0.0;
    let mut d_disp = vec![0.0; disparity.len()];
    let mx = ((width - 1) * height).max(1) as f64;
    let my = (width * (height - 1)).max(1) as f64;
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if x + 1 < width {
                let gx: f64 = (0..c)
                    .map(|ch| (guide.at(x + 1, y, ch) - guide.at(x, y, ch)).abs())
                    .sum::<f64>()
                    * inv_c;
                let wgt = (-gx).exp() / mx;
                let diff = disparity[i + 1] - disparity[i];
                value += diff.abs() * inv_mu * wgt;
                if diff != 0.0 {
                    let s = diff.signum() * inv_mu * wgt;
                    d_disp[i + 1] += s;
                    d_disp[i] -= s;
                }
            }
            if y + 1 < height {
                let gy: f64 = (0..c)
                    .map(|ch| (guide.at(x, y + 1, ch) - guide.at(x, y, ch)).abs())
                    .sum::<f64>()
                    * inv_c;
                let wgt = (-gy).exp() / my;
                let diff = disparity[i + width] - disparity[i];
                value += diff.abs() * inv_mu * wgt;
                if diff != 0.0 {
                    let s = diff.signum() * inv_mu * wgt;
                    d_disp[i + width] += s;
                    d_disp[i] -= s;
                }
            }
        }
    }
    // the normalizing mean couples every entry: d(value)/d(mu) = -value/mu
    let mu_term = -value * inv_mu / n;
    for g in d_disp.iter_mut() {
        *g += mu_term;
    }
    Ok((value, d_disp))
}

// ---------------------------------------------------------------------------
// Full objective over a calibration problem
// ---------------------------------------------------------------------------

/// Per-snippet gradient pieces; twists and grids are exclusive to their
/// snippet, intrinsics are summed across snippets in canonical order.
struct SnippetGrad {
    intr: [f64; 4],
    twists: [[f64; 6]; 2],
    grid: Vec<f64>,
}

struct ContextEval {
    field: WarpField,
    synth: SynthView,
    pixel_loss: Vec<f64>,
    n_valid: usize,
}

fn check_layout(problem: &CalibProblem, params: &ParamVector) -> Result<()> {
    problem.validate()?;
    if *params.layout() != problem.layout() {
        return Err(Error::LayoutMismatch(format!(
            "params have layout {:?}, problem needs {:?}",
            params.layout(),
            problem.layout()
        )));
    }
    Ok(())
}

/// Evaluates one snippet across all pyramid levels; optionally fills the
/// snippet's gradient block. Value arithmetic is identical in both modes.
fn eval_snippet(
    problem: &CalibProblem,
    params: &ParamVector,
    s_idx: usize,
    want_grad: bool,
) -> Result<(f64, Option<SnippetGrad>)> {
    let snippet = &problem.snippets[s_idx];
    let cfg = &problem.photo;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| SnippetGrad {
        intr: [0.0; 4],
        twists: [[0.0; 6]; 2],
        grid: vec![0.0; problem.layout().grid_size()],
    });
    let grid = params.grid(s_idx);
    let intr_params = params.intrinsics();

    for level in 0..problem.levels() {
        let level_weight = 0.5f64.powi(level as i32);
        let timg = &problem.pyramids[snippet.target].levels[level];
        let (w, h) = (timg.width(), timg.height());
        let n = w * h;
        let realized = realize_depth(&grid, w, h, problem.disp_min, problem.disp_max)?;
        let intr = realize_intrinsics(&intr_params, w, h);

        let mut ctxs = Vec::with_capacity(2);
        for (j, &ctx_frame) in snippet.contexts.iter().enumerate() {
            let xi = params.twist(problem.pair_index(s_idx, j));
            let pose = exp_se3(&xi)?;
            let field = warp_coordinates(&realized.depth, &intr, &pose);
            let simg = &problem.pyramids[ctx_frame].levels[level];
            let synth = synthesize_view(simg, &field)?;
            let pixel_loss = photo_pixel_losses(timg, &synth.image, &synth.mask, cfg)?;
            let n_valid = synth.mask.iter().filter(|&&m| m).count();
            if n_valid == 0 {
                return Err(Error::EmptyMask);
            }
            ctxs.push(ContextEval { field, synth, pixel_loss, n_valid });
            let _ = j;
        }

        // combine contexts into the photometric term and per-pixel
        // upstream weights for the backward pass
        let n_ctx = ctxs.len() as f64;
        let mut photo = 0.0;
        let mut weights: Vec<Vec<f64>> = ctxs.iter().map(|_| vec![0.0; n]).collect();
        if cfg.use_min_reprojection {
            let union: Vec<bool> = (0..n).map(|i| ctxs.iter().any(|c| c.synth.mask[i])).collect();
            let n_union = union.iter().filter(|&&m| m).count();
            let inv = 1.0 / n_union as f64;
            for i in 0..n {
                if !union[i] {
                    continue;
                }
                let mut best = usize::MAX;
                let mut best_v = f64::INFINITY;
                for (j, c) in ctxs.iter().enumerate() {
                    if c.synth.mask[i] && c.pixel_loss[i] < best_v {
                        best = j;
                        best_v = c.pixel_loss[i];
                    }
                }
                photo += best_v * inv;
                weights[best][i] = level_weight * inv;
            }
        } else {
            for (j, c) in ctxs.iter().enumerate() {
                let inv = 1.0 / c.n_valid as f64;
                photo += c.pixel_loss.iter().sum::<f64>() * inv / n_ctx;
                for i in 0..n {
                    if c.synth.mask[i] {
                        weights[j][i] = level_weight * inv / n_ctx;
                    }
                }
            }
        }

        let (smooth, d_smooth) = smoothness_loss(&realized.disparity, w, h, timg)?;
        total += level_weight * (photo + cfg.smoothness_weight * smooth);

        let Some(g) = grad.as_mut() else { continue };

        for (j, c) in ctxs.iter().enumerate() {
            let ch_count = c.synth.image.channels();
            let mut d_synth = vec![0.0; n * ch_count];
            photo_backward(timg, &c.synth.image, &c.synth.mask, cfg, &weights[j], &mut d_synth);
            for i in 0..n {
                if !c.synth.mask[i] {
                    continue;
                }
                let mut gu = 0.0;
                let mut gv = 0.0;
                for ch in 0..ch_count {
                    let ds = d_synth[i * ch_count + ch];
                    gu += ds * c.synth.d_du[i * ch_count + ch];
                    gv += ds * c.synth.d_dv[i * ch_count + ch];
                }
                if gu == 0.0 && gv == 0.0 {
                    continue;
                }
                for p in 0..4 {
                    g.intr[p] += gu * c.field.j_intr[i][p] + gv * c.field.j_intr[i][4 + p];
                }
                for p in 0..6 {
                    g.twists[j][p] += gu * c.field.j_twist[i][p] + gv * c.field.j_twist[i][6 + p];
                }
                let gd = (gu * c.field.j_depth[i][0] + gv * c.field.j_depth[i][1])
                    * realized.d_depth_scale[i];
                for k in 0..4 {
                    g.grid[realized.node_idx[i][k] as usize] += gd * realized.node_w[i][k];
                }
            }
        }

        let sw = level_weight * cfg.smoothness_weight;
        if sw > 0.0 {
            for i in 0..n {
                let gd = sw * d_smooth[i] * realized.d_disp_scale[i];
                if gd == 0.0 {
                    continue;
                }
                for k in 0..4 {
                    g.grid[realized.node_idx[i][k] as usize] += gd * realized.node_w[i][k];
                }
            }
        }
    }
    Ok((total, grad))
}

/// Canonical snippet evaluation order: sorted by target frame, so the
/// objective is invariant under reordering of the snippet list.
fn canonical_order(problem: &CalibProblem) -> Vec<usize> {
    let mut order: Vec<usize> = (0..problem.snippets.len()).collect();
    order.sort_by_key(|&i| (problem.snippets[i].target, problem.snippets[i].contexts));
    order
}

/// Full forward pass: params -> K, poses, depths -> warp -> synthesis ->
/// loss, summed over snippets and pyramid levels (level `l` weighted
/// `2^-l`). Deterministic: identical inputs give bit-identical values.
pub fn total_objective(problem: &CalibProblem, params: &ParamVector) -> Result<f64> {
    check_layout(problem, params)?;
    let mut values = vec![0.0; problem.snippets.len()];
    for (i, v) in values.iter_mut().enumerate() {
        *v = eval_snippet(problem, params, i, false)?.0;
    }
    Ok(canonical_order(problem).into_iter().map(|i| values[i]).sum())
}

/// Objective value and exact analytic gradient in one pass, accumulated
/// in a fixed order (pixels row-major, then contexts, then levels, then
/// snippets in canonical order). The value is bit-identical to
/// [`total_objective`].
pub fn value_and_gradient(
    problem: &CalibProblem,
    params: &ParamVector,
) -> Result<(f64, ParamGradient)> {
    check_layout(problem, params)?;
    let layout = problem.layout();
    let mut parts = Vec::with_capacity(problem.snippets.len());
    for i in 0..problem.snippets.len() {
        let (v, g) = eval_snippet(problem, params, i, true)?;
        parts.push((v, g.unwrap()));
    }
    let mut out = ParamVector::zeros(layout);
    let mut value = 0.0;
    for &i in &canonical_order(problem) {
        let (v, part) = &parts[i];
        value += v;
        for p in 0..4 {
            out.data[p] += part.intr[p];
        }
        for j in 0..2 {
            let r = layout.twist_range(problem.pair_index(i, j));
            for (dst, src) in out.data[r].iter_mut().zip(&part.twists[j]) {
                *dst += src;
            }
        }
        let r = layout.grid_range(i);
        for (dst, src) in out.data[r].iter_mut().zip(&part.grid) {
            *dst += src;
        }
    }
    Ok((value, out))
}

/// Exact analytic gradient of [`total_objective`].
pub fn gradient(problem: &CalibProblem, params: &ParamVector) -> Result<ParamGradient> {
    Ok(value_and_gradient(problem, params)?.1)
}

/// Central differences of a scalar function; the oracle backing
/// [`finite_difference_gradient`].
pub fn central_difference<F>(f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("finite-difference step {eps} must be > 0")));
    }
    let mut probe = x.to_vec();
    let mut out = vec![0.0; x.len()];
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let hi = f(&probe)?;
        probe[i] = x[i] - eps;
        let lo = f(&probe)?;
        probe[i] = x[i];
        out[i] = (hi - lo) / (2.0 * eps);
    }
    Ok(out)
}

/// Central-difference gradient of [`total_objective`]; the independent
/// check for [`gradient`].
pub fn finite_difference_gradient(
    problem: &CalibProblem,
    params: &ParamVector,
    eps: f64,
) -> Result<ParamGradient> {
    check_layout(problem, params)?;
    let layout = *params.layout();
    let data = central_difference(
        |x| total_objective(problem, &ParamVector::from_data(layout, x.to_vec())?),
        params.data(),
        eps,
    )?;
    ParamVector::from_data(layout, data)
}
