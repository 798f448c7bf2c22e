//! Differentiable view synthesis: warp a source (context) frame into the
//! target frame given per-pixel depth, shared intrinsics, and the relative
//! pose.
//!
//! Convention pinned here: `pose_t_to_s` maps target-frame points into the
//! source frame, so synthesis *pulls* source pixels onto the target grid
//! (inverse warping). Target and source share one intrinsic matrix.

use nalgebra::{SMatrix, Vector3};

use crate::camera::{self, RealizedIntrinsics};
use crate::error::{Error, Result};
use crate::geometry::TwistPose;
use crate::image::{sample_bilinear, Image};

/// Dense per-pixel depth in scene units; every value positive and finite.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "depth buffer length {} != {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::BadDepthValue { index: i, value: data[i] });
        }
        Ok(DepthMap { width, height, data })
    }

    /// Skips validation; for constructing deliberately bad maps in tests
    /// and for internal paths whose positivity is already guaranteed.
    pub(crate) fn from_data_unchecked(width: usize, height: usize, data: Vec<f64>) -> Self {
        DepthMap { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Continuous source coordinates for every target pixel, with validity and
/// the chain-rule blocks of `(u_s, v_s)` w.r.t. the four raw intrinsics,
/// the six twist components, and the pixel's own depth.
#[derive(Debug, Clone)]
pub struct WarpField {
    pub width: usize,
    pub height: usize,
    pub us: Vec<f64>,
    pub vs: Vec<f64>,
    pub valid: Vec<bool>,
    /// `[du/dtheta_0..4 | dv/dtheta_0..4]` per pixel.
    pub j_intr: Vec<[f64; 8]>,
    /// `[du/dxi_0..6 | dv/dxi_0..6]` per pixel, twist packed `[omega, vel]`.
    pub j_twist: Vec<[f64; 12]>,
    /// `[du/dD | dv/dD]` per pixel.
    pub j_depth: Vec<[f64; 2]>,
}

#[inline]
pub(crate) fn in_bounds(u: f64, v: f64, width: usize, height: usize) -> bool {
    u >= 0.0 && u <= (width - 1) as f64 && v >= 0.0 && v <= (height - 1) as f64
}

impl WarpField {
    /// Wraps raw coordinate grids (zero Jacobians); validity follows the
    /// usual bounds-plus-nothing rule. Intended for synthetic fields in
    /// tests and tooling.
    pub fn from_coordinates(width: usize, height: usize, us: Vec<f64>, vs: Vec<f64>) -> Self {
        assert_eq!(us.len(), width * height);
        assert_eq!(vs.len(), width * height);
        let valid = us
            .iter()
            .zip(&vs)
            .map(|(&u, &v)| in_bounds(u, v, width, height))
            .collect();
        let n = width * height;
        WarpField {
            width,
            height,
            us,
            vs,
            valid,
            j_intr: vec![[0.0; 8]; n],
            j_twist: vec![[0.0; 12]; n],
            j_depth: vec![[0.0; 2]; n],
        }
    }
}

/// Computes the warp field for one (target, source) pair.
///
/// Per target pixel `p`: back-project at `depth(p)`, transform by
/// `pose_t_to_s`, re-project with the shared `K`. Pixels whose transformed
/// point falls behind the camera or outside `[0, W-1] x [0, H-1]` are
/// flagged invalid (never an error). All Jacobian blocks follow the chain
/// rule through the camera and geometry derivatives; the intrinsic blocks
/// account for `K` appearing on both sides of the warp.
pub fn warp_coordinates(
    depth: &DepthMap,
    intr: &RealizedIntrinsics,
    pose_t_to_s: &TwistPose,
) -> WarpField {
    let (w, h) = (depth.width, depth.height);
    let n = w * h;
    let k = &intr.k;
    let mut field = WarpField {
        width: w,
        height: h,
        us: vec![0.0; n],
        vs: vec![0.0; n],
        valid: vec![false; n],
        j_intr: vec![[0.0; 8]; n],
        j_twist: vec![[0.0; 12]; n],
        j_depth: vec![[0.0; 2]; n],
    };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let d = depth.at(x, y);
            // depth is positive by DepthMap invariant, unproject cannot fail
            let p = camera::unproject(x as f64, y as f64, d, k).expect("positive depth");
            let (ps, rot, d_twist) = pose_t_to_s.transform_point(&p);
            let Some(proj) = camera::project(&ps, k) else {
                continue; // behind the source camera
            };
            field.us[i] = proj.u;
            field.vs[i] = proj.v;
            field.valid[i] = in_bounds(proj.u, proj.v, w, h);
            if !field.valid[i] {
                field.us[i] = 0.0;
                field.vs[i] = 0.0;
                continue;
            }

            // d(u,v)/dP' . R: sensitivity to the target-frame point
            let duv_dp = proj.d_point * rot;

            // unprojected point w.r.t. (fx, fy, cx, cy); raw chain via intr.jac
            let mut dp_dk = SMatrix::<f64, 3, 4>::zeros();
            dp_dk[(0, 0)] = -p.x / k.fx;
            dp_dk[(0, 2)] = -d / k.fx;
            dp_dk[(1, 1)] = -p.y / k.fy;
            dp_dk[(1, 3)] = -d / k.fy;
            let duv_draw = (proj.d_k + duv_dp * dp_dk) * intr.jac;
            for j in 0..4 {
                field.j_intr[i][j] = duv_draw[(0, j)];
                field.j_intr[i][4 + j] = duv_draw[(1, j)];
            }

            let duv_dxi = proj.d_point * d_twist;
            for j in 0..6 {
                field.j_twist[i][j] = duv_dxi[(0, j)];
                field.j_twist[i][6 + j] = duv_dxi[(1, j)];
            }

            let dp_dd = Vector3::new(p.x / d, p.y / d, 1.0);
            let duv_dd = duv_dp * dp_dd;
            field.j_depth[i] = [duv_dd[0], duv_dd[1]];
        }
    }
    field
}

/// A synthesized view with its validity mask and the bilinear sampling
/// derivatives, kept for the objective's chain rule.
#[derive(Debug, Clone)]
pub struct SynthView {
    pub image: Image,
    pub mask: Vec<bool>,
    /// d color / d u_s, per pixel per channel.
    pub d_du: Vec<f64>,
    /// d color / d v_s, per pixel per channel.
    pub d_dv: Vec<f64>,
}

/// Samples the source image at the warp coordinates. Invalid pixels come
/// out as zero with `mask = false`.
pub fn synthesize_view(source: &Image, field: &WarpField) -> Result<SynthView> {
    if source.width() != field.width || source.height() != field.height {
        return Err(Error::ShapeMismatch(format!(
            "source {}x{} vs field {}x{}",
            source.width(),
            source.height(),
            field.width,
            field.height
        )));
    }
    let c = source.channels();
    let n = field.width * field.height;
    let mut image = Image::new(field.width, field.height, c);
    let mut d_du = vec![0.0; n * c];
    let mut d_dv = vec![0.0; n * c];
    let mut mask = vec![false; n];
    for y in 0..field.height {
        for x in 0..field.width {
            let i = y * field.width + x;
            if !field.valid[i] {
                continue;
            }
            let s = sample_bilinear(source, field.us[i], field.vs[i]);
            debug_assert!(s.valid, "field validity must imply sampler validity");
            mask[i] = true;
            for ch in 0..c {
                image.set(x, y, ch, s.color[ch].clamp(0.0, 1.0));
                d_du[i * c + ch] = s.d_du[ch];
                d_dv[i * c + ch] = s.d_dv[ch];
            }
        }
    }
    Ok(SynthView { image, mask, d_du, d_dv })
}
