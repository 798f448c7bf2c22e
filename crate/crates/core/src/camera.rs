//! Pinhole camera model: a 4-vector of trainable raw parameters realized as
//! a traditional 3x3 intrinsic matrix, plus projection/unprojection with
//! exact derivatives.
//!
//! The raw parameterization is normalized and log-scaled: focals are stored
//! as `log(f / dim)` and the principal point as a fraction of the image
//! size. That keeps the four values resolution-independent (the same vector
//! realizes consistently at every pyramid level) and makes realized focals
//! positive by construction.

use nalgebra::{Matrix3, Matrix4, SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Camera model tag. Only the pinhole model is implemented; the tag exists
/// as the extension point for other models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraModel {
    #[default]
    Pinhole,
}

/// The four trainable intrinsic values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicParams {
    /// log(fx / width)
    pub log_fx_n: f64,
    /// log(fy / height)
    pub log_fy_n: f64,
    /// cx / width
    pub cx_n: f64,
    /// cy / height
    pub cy_n: f64,
    #[serde(default)]
    pub model: CameraModel,
}

impl IntrinsicParams {
    /// Number of raw parameters for the pinhole model.
    pub const COUNT: usize = 4;

    pub fn new(log_fx_n: f64, log_fy_n: f64, cx_n: f64, cy_n: f64) -> Self {
        IntrinsicParams {
            log_fx_n,
            log_fy_n,
            cx_n,
            cy_n,
            model: CameraModel::Pinhole,
        }
    }

    /// Default optimization start: centered principal point, mid-range
    /// field of view (focal = 0.8 x dimension).
    pub fn default_init() -> Self {
        IntrinsicParams::new(0.8f64.ln(), 0.8f64.ln(), 0.5, 0.5)
    }

    /// Builds the normalized parameters that realize to the given pixel
    /// quantities at `width x height`.
    pub fn from_pixels(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        let (w, h) = (width as f64, height as f64);
        IntrinsicParams::new((fx / w).ln(), (fy / h).ln(), cx / w, cy / h)
    }

    pub fn raw(&self) -> [f64; 4] {
        [self.log_fx_n, self.log_fy_n, self.cx_n, self.cy_n]
    }

    pub fn from_raw(raw: [f64; 4]) -> Self {
        IntrinsicParams::new(raw[0], raw[1], raw[2], raw[3])
    }
}

/// Realized pinhole intrinsics in pixels. As a 3x3 matrix:
/// `[[fx, 0, cx], [0, fy, cy], [0, 0, 1]]` (zero skew).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicMatrix {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl IntrinsicMatrix {
    pub fn as_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

/// Intrinsics realized at a concrete resolution, with the Jacobian of
/// `(fx, fy, cx, cy)` w.r.t. the four raw parameters (diagonal:
/// `d fx/d log_fx_n = fx`, `d cx/d cx_n = width`, ...).
#[derive(Debug, Clone, Copy)]
pub struct RealizedIntrinsics {
    pub k: IntrinsicMatrix,
    pub jac: Matrix4<f64>,
}

/// Realizes raw parameters at `width x height` pixels:
/// `fx = exp(log_fx_n) * width`, `cx = cx_n * width`, and the y analogues.
pub fn realize_intrinsics(p: &IntrinsicParams, width: usize, height: usize) -> RealizedIntrinsics {
    debug_assert!(width >= 2 && height >= 2);
    let (w, h) = (width as f64, height as f64);
    let fx = p.log_fx_n.exp() * w;
    let fy = p.log_fy_n.exp() * h;
    let k = IntrinsicMatrix {
        fx,
        fy,
        cx: p.cx_n * w,
        cy: p.cy_n * h,
    };
    let jac = Matrix4::from_diagonal(&nalgebra::Vector4::new(fx, fy, w, h));
    RealizedIntrinsics { k, jac }
}

/// A projected pixel coordinate with its exact partial derivatives.
#[derive(Debug, Clone, Copy)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    /// d(u, v) / d(x, y, z)
    pub d_point: SMatrix<f64, 2, 3>,
    /// d(u, v) / d(fx, fy, cx, cy)
    pub d_k: SMatrix<f64, 2, 4>,
}

/// Perspective projection `u = fx x/z + cx`, `v = fy y/z + cy`.
///
/// Returns `None` when `z <= 0` (behind-camera signal; the caller masks the
/// pixel rather than aborting).
pub fn project(p: &Vector3<f64>, k: &IntrinsicMatrix) -> Option<Projection> {
    if p.z <= 0.0 {
        return None;
    }
    let inv_z = 1.0 / p.z;
    let xn = p.x * inv_z;
    let yn = p.y * inv_z;
    let u = k.fx * xn + k.cx;
    let v = k.fy * yn + k.cy;
    let d_point = SMatrix::<f64, 2, 3>::new(
        k.fx * inv_z,
        0.0,
        -k.fx * xn * inv_z,
        0.0,
        k.fy * inv_z,
        -k.fy * yn * inv_z,
    );
    let d_k = SMatrix::<f64, 2, 4>::new(xn, 0.0, 1.0, 0.0, 0.0, yn, 0.0, 1.0);
    Some(Projection { u, v, d_point, d_k })
}

/// Back-projects pixel `(u, v)` to the camera-frame point at the given
/// depth: `((u-cx)/fx * d, (v-cy)/fy * d, d)`. Exact inverse of
/// [`project`] at the same `K`.
pub fn unproject(u: f64, v: f64, depth: f64, k: &IntrinsicMatrix) -> Result<Vector3<f64>> {
    if depth <= 0.0 || !depth.is_finite() {
        return Err(Error::Domain(format!("unproject needs depth > 0, got {depth}")));
    }
    if k.fx <= 0.0 || k.fy <= 0.0 {
        return Err(Error::Domain("unproject needs positive focals".into()));
    }
    Ok(Vector3::new(
        (u - k.cx) / k.fx * depth,
        (v - k.cy) / k.fy * depth,
        depth,
    ))
}
