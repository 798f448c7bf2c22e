//! Calibration problem assembly, the trainable inverse-depth grid that
//! stands in for a depth network, and the coarse-to-fine joint optimization
//! of intrinsics, poses, and depth.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::camera::{realize_intrinsics, IntrinsicMatrix, IntrinsicParams};
use crate::error::{Error, Result};
use crate::geometry::{compose, exp_se3, inverse, Pose, Twist};
use crate::image::{build_pyramid, Image, Pyramid};
use crate::objective::{ParamLayout, ParamVector, PhotometricConfig};
use crate::optimizer::{run_optimization, AdamConfig, StopReason};
use crate::scene::GroundTruth;
use crate::synthesis::DepthMap;

/// Coarse trainable inverse-depth field. `raw` is row-major `gh x gw`,
/// unconstrained; realization maps it through a bounded sigmoid disparity.
#[derive(Debug, Clone, PartialEq)]
pub struct InvDepthGrid {
    pub gh: usize,
    pub gw: usize,
    pub raw: Vec<f64>,
}

impl InvDepthGrid {
    pub fn zeros(gh: usize, gw: usize) -> Self {
        assert!(gh >= 2 && gw >= 2, "grid must be at least 2x2");
        InvDepthGrid {
            gh,
            gw,
            raw: vec![0.0; gh * gw],
        }
    }

    pub fn from_raw(gh: usize, gw: usize, raw: Vec<f64>) -> Self {
        assert_eq!(raw.len(), gh * gw);
        InvDepthGrid { gh, gw, raw }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// A depth map realized from a grid, with everything needed to chain
/// gradients back into the raw grid values. Each pixel depends on at most
/// four grid cells.
#[derive(Debug, Clone)]
pub struct RealizedDepth {
    pub depth: DepthMap,
    /// Per-pixel disparity (1/depth), the quantity regularized by the
    /// smoothness term.
    pub disparity: Vec<f64>,
    /// Indices of the four contributing grid cells per pixel.
    pub node_idx: Vec<[u32; 4]>,
    /// Bilinear weights of those cells (sum to 1).
    pub node_w: Vec<[f64; 4]>,
    /// d(depth)/d(raw upsampled) per pixel; multiply by a node weight to
    /// get d(depth)/d(raw node).
    pub d_depth_scale: Vec<f64>,
    /// d(disparity)/d(raw upsampled) per pixel.
    pub d_disp_scale: Vec<f64>,
}

/// Bilinearly upsamples the raw grid to `width x height` (grid corners
/// pinned to image corners), then maps each value through
/// `disparity = disp_min + (disp_max - disp_min) * sigmoid(raw)` and
/// `depth = 1/disparity`. Depth is therefore confined to
/// `[1/disp_max, 1/disp_min]` by construction.
pub fn realize_depth(
    grid: &InvDepthGrid,
    width: usize,
    height: usize,
    disp_min: f64,
    disp_max: f64,
) -> Result<RealizedDepth> {
    if !(disp_min > 0.0 && disp_max > disp_min) {
        return Err(Error::Domain(format!(
            "need 0 < disp_min < disp_max, got [{disp_min}, {disp_max}]"
        )));
    }
    if width < 2 || height < 2 {
        return Err(Error::DegenerateSize(format!(
            "cannot realize depth at {width}x{height}"
        )));
    }
    if grid.raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("grid contains non-finite raw values".into()));
    }
    let n = width * height;
    let span = disp_max - disp_min;
    let sx = (grid.gw - 1) as f64 / (width - 1) as f64;
    let sy = (grid.gh - 1) as f64 / (height - 1) as f64;
    let mut out = RealizedDepth {
        depth: DepthMap::from_data_unchecked(width, height, vec![0.0; n]),
        disparity: vec![0.0; n],
        node_idx: vec![[0; 4]; n],
        node_w: vec![[0.0; 4]; n],
        d_depth_scale: vec![0.0; n],
        d_disp_scale: vec![0.0; n],
    };
    let mut depth_data = vec![0.0; n];
    for y in 0..height {
        let gy = y as f64 * sy;
        let y0 = (gy.floor() as usize).min(grid.gh - 2);
        let fy = gy - y0 as f64;
        for x in 0..width {
            let gx = x as f64 * sx;
            let x0 = (gx.floor() as usize).min(grid.gw - 2);
            let fx = gx - x0 as f64;
            let i = y * width + x;
            let idx = [
                (y0 * grid.gw + x0) as u32,
                (y0 * grid.gw + x0 + 1) as u32,
                ((y0 + 1) * grid.gw + x0) as u32,
                ((y0 + 1) * grid.gw + x0 + 1) as u32,
            ];
            let w = [
                (1.0 - fx) * (1.0 - fy),
                fx * (1.0 - fy),
                (1.0 - fx) * fy,
                fx * fy,
            ];
            let raw_up: f64 = (0..4).map(|k| w[k] * grid.raw[idx[k] as usize]).sum();
            let sig = sigmoid(raw_up);
            let disp = disp_min + span * sig;
            let depth = 1.0 / disp;
            let d_disp = span * sig * (1.0 - sig);
            out.node_idx[i] = idx;
            out.node_w[i] = w;
            out.disparity[i] = disp;
            out.d_disp_scale[i] = d_disp;
            out.d_depth_scale[i] = -d_disp / (disp * disp);
            depth_data[i] = depth;
        }
    }
    out.depth = DepthMap::from_data_unchecked(width, height, depth_data);
    Ok(out)
}

/// Least-squares fit of grid raw values to a dense depth map: the target
/// field is the logit of the normalized disparity, and the bilinear
/// upsampling operator is inverted through its normal equations. Used to
/// inject known depth into a problem (the grid is the closest
/// representation the parameterization admits).
pub fn fit_grid_to_inverse_depth(
    depth: &DepthMap,
    gh: usize,
    gw: usize,
    disp_min: f64,
    disp_max: f64,
) -> Result<InvDepthGrid> {
    if !(disp_min > 0.0 && disp_max > disp_min) {
        return Err(Error::Domain("bad disparity bounds".into()));
    }
    let (w, h) = (depth.width(), depth.height());
    let probe = realize_depth(&InvDepthGrid::zeros(gh, gw), w, h, disp_min, disp_max)?;
    let g = gh * gw;
    let span = disp_max - disp_min;
    let mut ata = DMatrix::<f64>::zeros(g, g);
    let mut aty = DVector::<f64>::zeros(g);
    for i in 0..w * h {
        let frac = ((1.0 / depth.data()[i] - disp_min) / span).clamp(1e-6, 1.0 - 1e-6);
        let target = (frac / (1.0 - frac)).ln();
        let idx = probe.node_idx[i];
        let wts = probe.node_w[i];
        for a in 0..4 {
            aty[idx[a] as usize] += wts[a] * target;
            for b in 0..4 {
                ata[(idx[a] as usize, idx[b] as usize)] += wts[a] * wts[b];
            }
        }
    }
    for d in 0..g {
        ata[(d, d)] += 1e-9;
    }
    let sol = ata
        .cholesky()
        .ok_or_else(|| Error::Domain("grid fit normal equations not SPD".into()))?
        .solve(&aty);
    Ok(InvDepthGrid::from_raw(gh, gw, sol.as_slice().to_vec()))
}

/// One reconstruction unit: a target frame with its two context frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snippet {
    pub target: usize,
    pub contexts: [usize; 2],
}

/// Packed description of a calibration problem: per-frame pyramids, the
/// snippet structure, loss configuration, and the depth parameterization.
#[derive(Debug, Clone)]
pub struct CalibProblem {
    pub pyramids: Vec<Pyramid>,
    pub snippets: Vec<Snippet>,
    pub photo: PhotometricConfig,
    pub grid_h: usize,
    pub grid_w: usize,
    pub disp_min: f64,
    pub disp_max: f64,
}

impl CalibProblem {
    pub fn levels(&self) -> usize {
        self.pyramids.first().map_or(0, |p| p.levels.len())
    }

    pub fn frame_count(&self) -> usize {
        self.pyramids.len()
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout {
            n_pairs: 2 * self.snippets.len(),
            n_targets: self.snippets.len(),
            grid_h: self.grid_h,
            grid_w: self.grid_w,
        }
    }

    /// Twist-block index of context `ctx` (0 or 1) of snippet `s`.
    pub fn pair_index(&self, snippet: usize, ctx: usize) -> usize {
        2 * snippet + ctx
    }

    /// `(target frame, context frame)` for every pair, in pair order.
    pub fn pair_frames(&self) -> Vec<(usize, usize)> {
        self.snippets
            .iter()
            .flat_map(|s| s.contexts.iter().map(move |&c| (s.target, c)))
            .collect()
    }

    /// Sub-problem containing a single pyramid level at full weight.
    pub fn restrict_to_level(&self, level: usize) -> CalibProblem {
        assert!(level < self.levels());
        CalibProblem {
            pyramids: self
                .pyramids
                .iter()
                .map(|p| Pyramid {
                    levels: vec![p.levels[level].clone()],
                })
                .collect(),
            snippets: self.snippets.clone(),
            photo: self.photo.clone(),
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            disp_min: self.disp_min,
            disp_max: self.disp_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.snippets.is_empty() {
            return Err(Error::ProblemConstruction("no snippets".into()));
        }
        let nf = self.pyramids.len();
        for s in &self.snippets {
            if s.target >= nf || s.contexts.iter().any(|&c| c >= nf) {
                return Err(Error::ProblemConstruction(format!(
                    "snippet {s:?} references a frame outside 0..{nf}"
                )));
            }
            if s.contexts.contains(&s.target) {
                return Err(Error::ProblemConstruction(format!(
                    "snippet {s:?} uses its target as context"
                )));
            }
        }
        Ok(())
    }
}

/// Tunables for problem construction and optimization.
#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub pyramid_levels: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    pub disp_min: f64,
    pub disp_max: f64,
    pub photometric: PhotometricConfig,
    /// Override for the intrinsic starting point; defaults to
    /// [`IntrinsicParams::default_init`].
    pub intrinsic_init: Option<IntrinsicParams>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            pyramid_levels: 4,
            grid_w: 16,
            grid_h: 12,
            disp_min: 0.01,
            disp_max: 10.0,
            photometric: PhotometricConfig::default(),
            intrinsic_init: None,
        }
    }
}

/// Builds the problem and its initial parameter vector from a frame
/// sequence: snippets `(t; t-1, t+1)` for every interior frame, default
/// intrinsics, zero twists, zero grids.
pub fn init_problem(frames: &[Image], cfg: &EngineConfig) -> Result<(CalibProblem, ParamVector)> {
    if frames.len() < 3 {
        return Err(Error::ProblemConstruction(format!(
            "need at least 3 frames, got {}",
            frames.len()
        )));
    }
    let first = &frames[0];
    if frames.iter().any(|f| !f.same_shape(first)) {
        return Err(Error::ProblemConstruction("frames have mixed dimensions".into()));
    }
    let pyramids = frames
        .iter()
        .map(|f| build_pyramid(f, cfg.pyramid_levels))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::ProblemConstruction(format!("pyramid: {e}")))?;
    let snippets = (1..frames.len() - 1)
        .map(|t| Snippet {
            target: t,
            contexts: [t - 1, t + 1],
        })
        .collect();
    let problem = CalibProblem {
        pyramids,
        snippets,
        photo: cfg.photometric.clone(),
        grid_h: cfg.grid_h,
        grid_w: cfg.grid_w,
        disp_min: cfg.disp_min,
        disp_max: cfg.disp_max,
    };
    problem.validate()?;
    let mut params = ParamVector::zeros(problem.layout());
    params.set_intrinsics(&cfg.intrinsic_init.unwrap_or_else(IntrinsicParams::default_init));
    Ok((problem, params))
}

// ---------------------------------------------------------------------------
// Calibration driver and report
// ---------------------------------------------------------------------------

/// Serializable pose (rotation rows + translation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportPose {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl ReportPose {
    pub fn from_pose(p: &Pose) -> Self {
        let mut rotation = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                rotation[r][c] = p.r[(r, c)];
            }
        }
        ReportPose {
            rotation,
            translation: [p.t.x, p.t.y, p.t.z],
        }
    }

    pub fn to_pose(&self) -> Pose {
        Pose {
            r: nalgebra::Matrix3::from_fn(|r, c| self.rotation[r][c]),
            t: nalgebra::Vector3::new(
                self.translation[0],
                self.translation[1],
                self.translation[2],
            ),
        }
    }
}

/// Recovered intrinsics in both raw (normalized) and realized (pixel) form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportIntrinsics {
    pub raw: IntrinsicParams,
    pub realized: IntrinsicMatrix,
    pub width: usize,
    pub height: usize,
}

/// Per-level optimization record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub level: usize,
    pub width: usize,
    pub height: usize,
    pub initial_objective: f64,
    pub best_objective: f64,
    pub iterations: usize,
    pub history: Vec<f64>,
    pub stop_reason: StopReason,
}

/// One estimated target-to-context transformation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportPair {
    pub target: usize,
    pub context: usize,
    pub twist: [f64; 6],
    pub pose: ReportPose,
}

/// Full calibration result. Everything except `wall_clock_seconds` is a
/// deterministic function of the inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibReport {
    pub intrinsics: ReportIntrinsics,
    pub pairs: Vec<ReportPair>,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub levels: Vec<LevelReport>,
    /// Set when any level stopped on non-finite values; calibration then
    /// kept the best iterate seen before the failure.
    pub divergence: Option<DivergenceInfo>,
    pub wall_clock_seconds: f64,
    /// Recovered grid raw values per target, so depth can be re-realized
    /// for evaluation.
    pub grids: Vec<Vec<f64>>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub disp_min: f64,
    pub disp_max: f64,
    pub comparison: Option<TruthComparison>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceInfo {
    pub level: usize,
    pub iteration: usize,
}

impl CalibReport {
    /// Realizes the recovered depth of target `t` (snippet order) at the
    /// given resolution.
    pub fn realize_target_depth(&self, t: usize, width: usize, height: usize) -> Result<DepthMap> {
        let grid = InvDepthGrid::from_raw(self.grid_h, self.grid_w, self.grids[t].clone());
        Ok(realize_depth(&grid, width, height, self.disp_min, self.disp_max)?.depth)
    }
}

/// Coarse-to-fine calibration: optimizes the deepest pyramid level first
/// and carries parameters unchanged to each finer level (the normalized
/// intrinsic parameterization is resolution-independent; grids re-realize
/// at the finer resolution). Divergence is recorded in the report rather
/// than aborting, so partial histories survive.
pub fn calibrate(
    problem: &CalibProblem,
    init: &ParamVector,
    schedule: &[AdamConfig],
) -> Result<CalibReport> {
    let start = std::time::Instant::now();
    problem.validate()?;
    if schedule.is_empty() {
        return Err(Error::ProblemConstruction("empty per-level schedule".into()));
    }
    if schedule.len() != problem.levels() {
        return Err(Error::ProblemConstruction(format!(
            "schedule length {} != pyramid level count {}",
            schedule.len(),
            problem.levels()
        )));
    }
    if *init.layout() != problem.layout() {
        return Err(Error::LayoutMismatch(format!(
            "init length {} vs problem layout {}",
            init.data().len(),
            problem.layout().len()
        )));
    }

    let full = &problem.pyramids[0].levels[0];
    // The carried intrinsics must realize to exactly scaled matrices
    // across levels; cheap invariant, asserted once per run.
    {
        let p = init.intrinsics();
        let a = realize_intrinsics(&p, 2 * full.width(), 2 * full.height()).k;
        let b = realize_intrinsics(&p, full.width(), full.height()).k;
        assert!(a.fx == 2.0 * b.fx && a.fy == 2.0 * b.fy && a.cx == 2.0 * b.cx && a.cy == 2.0 * b.cy);
    }

    let mut params = init.clone();
    let mut levels = Vec::new();
    let mut divergence = None;
    let mut initial_objective = None;
    let mut final_objective = f64::NAN;
    for level in (0..problem.levels()).rev() {
        let sub = problem.restrict_to_level(level);
        let cfg = &schedule[level];
        let outcome = run_optimization(&sub, &params, cfg)?;
        let lw = sub.pyramids[0].levels[0].width();
        let lh = sub.pyramids[0].levels[0].height();
        levels.push(LevelReport {
            level,
            width: lw,
            height: lh,
            initial_objective: outcome.history.first().copied().unwrap_or(f64::NAN),
            best_objective: outcome.best_objective,
            iterations: outcome.history.len(),
            history: outcome.history.clone(),
            stop_reason: outcome.stop_reason,
        });
        if level == problem.levels() - 1 {
            initial_objective = outcome.history.first().copied();
        }
        final_objective = outcome.best_objective;
        params = outcome.best_params;
        if let StopReason::Diverged { iteration } = outcome.stop_reason {
            divergence = Some(DivergenceInfo { level, iteration });
            break;
        }
    }

    let layout = problem.layout();
    let intr = params.intrinsics();
    let realized = realize_intrinsics(&intr, full.width(), full.height()).k;
    let mut pairs = Vec::new();
    for (pair, (target, context)) in problem.pair_frames().into_iter().enumerate() {
        let twist = params.twist(pair);
        let pose = exp_se3(&twist)?.pose;
        pairs.push(ReportPair {
            target,
            context,
            twist: twist.to_array(),
            pose: ReportPose::from_pose(&pose),
        });
    }
    let grids = (0..layout.n_targets)
        .map(|t| params.grid_slice(t).to_vec())
        .collect();
    Ok(CalibReport {
        intrinsics: ReportIntrinsics {
            raw: intr,
            realized,
            width: full.width(),
            height: full.height(),
        },
        pairs,
        initial_objective: initial_objective.unwrap_or(f64::NAN),
        final_objective,
        levels,
        divergence,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        grids,
        grid_h: problem.grid_h,
        grid_w: problem.grid_w,
        disp_min: problem.disp_min,
        disp_max: problem.disp_max,
        comparison: None,
    })
}

/// Errors of a report against synthetic ground truth. Focal errors are
/// relative; principal-point errors are in normalized units; pose errors
/// are the rotation geodesic angle and the angle between translation
/// directions (magnitude excluded: monocular scale is unobservable).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthComparison {
    pub fx_rel_err: f64,
    pub fy_rel_err: f64,
    pub cx_err_n: f64,
    pub cy_err_n: f64,
    pub pairs: Vec<PairErrors>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairErrors {
    pub target: usize,
    pub context: usize,
    pub rotation_angle_rad: f64,
    pub translation_direction_rad: f64,
}

fn rotation_geodesic(a: &Pose, b: &Pose) -> f64 {
    let rel = a.r.transpose() * b.r;
    let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos()
}

fn direction_angle(a: &nalgebra::Vector3<f64>, b: &nalgebra::Vector3<f64>) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na < 1e-12 && nb < 1e-12 {
        return 0.0;
    }
    if na < 1e-12 || nb < 1e-12 {
        return std::f64::consts::FRAC_PI_2;
    }
    (a.dot(b) / (na * nb)).clamp(-1.0, 1.0).acos()
}

/// Compares recovered intrinsics and per-pair poses against ground truth.
pub fn compare_to_truth(report: &CalibReport, truth: &GroundTruth) -> Result<TruthComparison> {
    let (w, h) = (report.intrinsics.width, report.intrinsics.height);
    if let Some(d) = truth.depths.first() {
        if d.width() != w || d.height() != h {
            return Err(Error::ShapeMismatch(format!(
                "report at {w}x{h}, truth at {}x{}",
                d.width(),
                d.height()
            )));
        }
    }
    let gt_k = realize_intrinsics(&truth.intrinsics, w, h).k;
    let est = &report.intrinsics;
    let pairs = report
        .pairs
        .iter()
        .map(|p| {
            let gt_pose = compose(&truth.poses[p.context], &inverse(&truth.poses[p.target]));
            let est_pose = p.pose.to_pose();
            PairErrors {
                target: p.target,
                context: p.context,
                rotation_angle_rad: rotation_geodesic(&est_pose, &gt_pose),
                translation_direction_rad: direction_angle(&est_pose.t, &gt_pose.t),
            }
        })
        .collect();
    Ok(TruthComparison {
        fx_rel_err: (est.realized.fx - gt_k.fx).abs() / gt_k.fx,
        fy_rel_err: (est.realized.fy - gt_k.fy).abs() / gt_k.fy,
        cx_err_n: (est.raw.cx_n - truth.intrinsics.cx_n).abs(),
        cy_err_n: (est.raw.cy_n - truth.intrinsics.cy_n).abs(),
        pairs,
    })
}

/// Ground-truth pair twists for a generated trajectory: the pair
/// `(t -> t+1)` is exactly `trajectory[t]`, and `(t -> t-1)` is the
/// negation of `trajectory[t-1]` (the exponential of a negated twist is
/// the inverse pose).
pub fn gt_pair_twists(trajectory: &[Twist], snippets: &[Snippet]) -> Vec<Twist> {
    let mut out = Vec::new();
    for s in snippets {
        for &c in &s.contexts {
            if c + 1 == s.target {
                out.push(-trajectory[c]);
            } else if c == s.target + 1 {
                out.push(trajectory[s.target]);
            } else {
                unreachable!("non-adjacent context {c} for target {}", s.target);
            }
        }
    }
    out
}
