//! SE(3) rigid transformations and the 6-parameter twist chart.
//!
//! Frame-to-frame motion is parameterized as a twist (axis-angle rotation
//! plus a translation component) mapped through the exponential. The chart
//! is restricted to rotation magnitudes below pi, which is all that
//! small-increment pose optimization ever needs. [`exp_se3`] additionally
//! retains the matrices required to differentiate a transformed point
//! exactly with respect to all six twist components.

use nalgebra::{Matrix3, SMatrix, Vector3};

use crate::error::{Error, Result};

/// Tangent-space parameterization of a rigid transformation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    /// Axis-angle rotation, radians.
    pub omega: Vector3<f64>,
    /// Translation component (premultiplied by the left Jacobian in `exp`).
    pub vel: Vector3<f64>,
}

impl Twist {
    pub fn new(omega: Vector3<f64>, vel: Vector3<f64>) -> Self {
        Twist { omega, vel }
    }

    pub fn zero() -> Self {
        Twist {
            omega: Vector3::zeros(),
            vel: Vector3::zeros(),
        }
    }

    /// Packs as `[omega, vel]`, the layout used by parameter vectors.
    pub fn to_array(&self) -> [f64; 6] {
        [
            self.omega.x, self.omega.y, self.omega.z,
            self.vel.x, self.vel.y, self.vel.z,
        ]
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Twist {
            omega: Vector3::new(s[0], s[1], s[2]),
            vel: Vector3::new(s[3], s[4], s[5]),
        }
    }
}

impl std::ops::Neg for Twist {
    type Output = Twist;
    fn neg(self) -> Twist {
        Twist {
            omega: -self.omega,
            vel: -self.vel,
        }
    }
}

/// Rigid transformation `P' = R P + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            r: Matrix3::identity(),
            t: Vector3::zeros(),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.r * p + self.t
    }

    /// Max-norm departure of `R^T R` from the identity.
    pub fn orthonormality_residual(&self) -> f64 {
        (self.r.transpose() * self.r - Matrix3::identity())
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn is_valid(&self) -> bool {
        self.orthonormality_residual() <= 1e-9 && (self.r.determinant() - 1.0).abs() <= 1e-9
    }
}

/// Composition as maps, `compose(a, b)(P) = a(b(P))`:
/// `R = Ra Rb`, `t = Ra tb + ta`.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    Pose {
        r: a.r * b.r,
        t: a.r * b.t + a.t,
    }
}

pub fn inverse(p: &Pose) -> Pose {
    let rt = p.r.transpose();
    Pose {
        r: rt,
        t: -(rt * p.t),
    }
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Below this rotation magnitude the closed trigonometric forms are fully
/// dominated by rounding; switch to the second-order Taylor expansions.
const TAYLOR_CUTOFF: f64 = 1e-8;

pub(crate) fn rodrigues(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let w = skew(omega);
    if theta < TAYLOR_CUTOFF {
        Matrix3::identity() + w + 0.5 * w * w
    } else {
        let s = theta.sin() / theta;
        // 1 - cos(t) = 2 sin^2(t/2), stable near zero
        let half = (theta / 2.0).sin();
        let c = 2.0 * half * half / (theta * theta);
        Matrix3::identity() + s * w + c * w * w
    }
}

/// SO(3) left Jacobian `V`, the map taking the twist's translation
/// component to the pose translation.
pub(crate) fn left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let w = skew(omega);
    if theta < TAYLOR_CUTOFF {
        Matrix3::identity() + 0.5 * w + (w * w) / 6.0
    } else {
        let half = (theta / 2.0).sin();
        let a = 2.0 * half * half / (theta * theta);
        let b = (theta - theta.sin()) / (theta * theta * theta);
        Matrix3::identity() + a * w + b * w * w
    }
}

/// Coupling block of the SE(3) left Jacobian: the derivative of the pose
/// translation `V(omega) vel` with respect to `omega`.
fn q_block(vel: &Vector3<f64>, omega: &Vector3<f64>) -> Matrix3<f64> {
    let rx = skew(vel);
    let wx = skew(omega);
    let t2 = omega.norm_squared();
    let (b, c, d);
    if t2 < 1e-8 {
        // series in theta^2; error O(theta^4)
        b = 1.0 / 6.0 - t2 / 120.0;
        c = -1.0 / 24.0 + t2 / 720.0;
        d = -1.0 / 60.0 + t2 / 1260.0;
    } else {
        let t = t2.sqrt();
        let (st, ct) = (t.sin(), t.cos());
        let t3 = t2 * t;
        b = (t - st) / t3;
        c = (1.0 - t2 / 2.0 - ct) / (t2 * t2);
        d = c - 3.0 * (t - st - t3 / 6.0) / (t3 * t2);
    }
    let wr = wx * rx;
    let rw = rx * wx;
    let wrw = wr * wx;
    let m2 = wr + rw + wrw;
    let m3 = wx * wr + rw * wx - 3.0 * wrw;
    let m4 = wrw * wx + wx * wrw;
    0.5 * rx + b * m2 - c * m3 - 0.5 * d * m4
}

/// A pose produced by the exponential map, carrying what is needed to
/// differentiate transformed points with respect to the twist.
#[derive(Debug, Clone, Copy)]
pub struct TwistPose {
    pub pose: Pose,
    jl: Matrix3<f64>,
    q: Matrix3<f64>,
}

impl TwistPose {
    /// Wraps an arbitrary pose; the twist Jacobians then describe a
    /// left-multiplied increment `exp(delta) * pose` at `delta = 0`
    /// (identity left Jacobian, no coupling). Useful when the pose did
    /// not come from a twist but differentiable warping is still wanted.
    pub fn from_pose(pose: Pose) -> Self {
        TwistPose {
            pose,
            jl: Matrix3::identity(),
            q: Matrix3::zeros(),
        }
    }

    /// Transforms a point and returns the exact Jacobians: `d_point = R`,
    /// and the 3x6 `d_twist` with columns ordered `[omega | vel]`.
    ///
    /// At the identity the omega block reduces to `-[P']_x`, the familiar
    /// small-increment form; at finite twists the left-Jacobian coupling
    /// makes the derivative exact.
    pub fn transform_point(&self, p: &Vector3<f64>) -> (Vector3<f64>, Matrix3<f64>, SMatrix<f64, 3, 6>) {
        let out = self.pose.transform_point(p);
        let mut d_twist = SMatrix::<f64, 3, 6>::zeros();
        let d_omega = self.q - skew(&out) * self.jl;
        d_twist.fixed_view_mut::<3, 3>(0, 0).copy_from(&d_omega);
        d_twist.fixed_view_mut::<3, 3>(0, 3).copy_from(&self.jl);
        (out, self.pose.r, d_twist)
    }
}

/// Exponential map: `R = Rodrigues(omega)`, `t = V(omega) vel`.
///
/// Rejects `|omega| >= pi` (outside the injective chart).
pub fn exp_se3(xi: &Twist) -> Result<TwistPose> {
    let angle = xi.omega.norm();
    if angle >= std::f64::consts::PI {
        return Err(Error::OutOfChart { angle });
    }
    let jl = left_jacobian(&xi.omega);
    Ok(TwistPose {
        pose: Pose {
            r: rodrigues(&xi.omega),
            t: jl * xi.vel,
        },
        jl,
        q: q_block(&xi.vel, &xi.omega),
    })
}
