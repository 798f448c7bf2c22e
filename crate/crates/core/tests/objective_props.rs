//! Whole-objective properties on synthetic problems: stationarity at a
//! constructed optimum, invariance to snippet order, linearity in the
//! smoothness weight, and context-combination modes.

use nalgebra::Vector3;
use photocal_core::camera::IntrinsicParams;
use photocal_core::engine::{gt_pair_twists, init_problem, CalibProblem, EngineConfig};
use photocal_core::error::Error;
use photocal_core::geometry::Twist;
use photocal_core::objective::{total_objective, value_and_gradient, ParamVector, PhotometricConfig};
use photocal_core::scene::{generate_sequence, PlaneSpec, SceneSpec};

/// A problem whose ground truth is exactly representable: dyadic focals
/// and depth, pure lateral dyadic translations (integer pixel flow), and
/// a constant grid sitting exactly mid-sigmoid. At the truth the warp
/// lands on the lattice and reconstruction is essentially exact.
fn dyadic_problem() -> (CalibProblem, ParamVector) {
    let (w, h) = (160usize, 80usize); // fx = 128, fy = 64 at log(0.8)
    let scene = SceneSpec {
        planes: vec![PlaneSpec {
            normal: Vector3::z(),
            distance: 4.0,
            texture_seed: 99,
            texture_scale: 3.5,
        }],
        width: w,
        height: h,
        background: None,
    };
    let gt_intr = IntrinsicParams::new(0.8f64.ln(), 0.8f64.ln(), 0.5, 0.5);
    // flow per frame: u by 128 * (1/16) / 4 = 2 px, v by 64 * (1/8) / 4 = 2 px
    let xi1 = Twist::new(Vector3::zeros(), Vector3::new(1.0 / 16.0, 1.0 / 8.0, 0.0));
    let xi2 = Twist::new(Vector3::zeros(), Vector3::new(-1.0 / 16.0, 1.0 / 8.0, 0.0));
    let trajectory = vec![xi1, xi2];
    let (frames, _gt) = generate_sequence(&scene, &gt_intr, &trajectory, 3).unwrap();
    let cfg = EngineConfig {
        pyramid_levels: 2,
        grid_w: 4,
        grid_h: 3,
        // sigmoid midpoint lands exactly on disparity 1/4
        disp_min: 0.1,
        disp_max: 0.4,
        photometric: PhotometricConfig::default(),
        intrinsic_init: Some(gt_intr),
    };
    let (problem, mut params) = init_problem(&frames, &cfg).unwrap();
    for (pair, xi) in gt_pair_twists(&trajectory, &problem.snippets).iter().enumerate() {
        params.set_twist(pair, xi);
    }
    (problem, params)
}

#[test]
fn objective_vanishes_at_the_constructed_truth() {
    let (problem, params) = dyadic_problem();
    let v = total_objective(&problem, &params).unwrap();
    assert!(v <= 1e-6, "objective at truth: {v}");
}

#[test]
fn gradient_is_stationary_at_the_constructed_truth() {
    let (problem, params) = dyadic_problem();
    let (_, g) = value_and_gradient(&problem, &params).unwrap();
    let gmax = g.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(gmax <= 1e-5, "gradient max-norm at truth: {gmax}");
}

#[test]
fn perturbing_focal_strictly_increases_the_objective() {
    let (problem, params) = dyadic_problem();
    let v0 = total_objective(&problem, &params).unwrap();
    let mut bumped = params.clone();
    let intr = params.intrinsics();
    bumped.set_intrinsics(&IntrinsicParams::new(
        (intr.log_fx_n.exp() * 1.1).ln(),
        intr.log_fy_n,
        intr.cx_n,
        intr.cy_n,
    ));
    let v1 = total_objective(&problem, &bumped).unwrap();
    assert!(v1 > v0, "{v1} not above {v0}");
}

#[test]
fn objective_is_deterministic() {
    let (problem, params) = photocal_core::gradcheck::random_problem(3, 48, 36).unwrap();
    let a = total_objective(&problem, &params).unwrap();
    let b = total_objective(&problem, &params).unwrap();
    assert_eq!(a, b);
    let (va, ga) = value_and_gradient(&problem, &params).unwrap();
    assert_eq!(va, a);
    let (_, gb) = value_and_gradient(&problem, &params).unwrap();
    assert_eq!(ga.data(), gb.data());
}

#[test]
fn snippet_order_does_not_change_the_objective() {
    // five frames -> three snippets; reverse the snippet list and permute
    // the parameter blocks to match
    let (w, h) = (64usize, 48usize);
    let scene = photocal_core::scene::default_scene(w, h, 5);
    let trajectory = photocal_core::scene::default_trajectory(5, 5);
    let gt = photocal_core::scene::default_gt_intrinsics();
    let (frames, _) = generate_sequence(&scene, &gt, &trajectory, 5).unwrap();
    let cfg = EngineConfig {
        pyramid_levels: 2,
        grid_w: 4,
        grid_h: 3,
        ..EngineConfig::default()
    };
    let (problem, mut params) = init_problem(&frames, &cfg).unwrap();
    for (pair, xi) in gt_pair_twists(&trajectory, &problem.snippets).iter().enumerate() {
        params.set_twist(pair, xi);
    }
    let v1 = total_objective(&problem, &params).unwrap();

    let order = [2usize, 0, 1];
    let mut reordered = problem.clone();
    reordered.snippets = order.iter().map(|&i| problem.snippets[i]).collect();
    let mut p2 = ParamVector::zeros(reordered.layout());
    p2.set_intrinsics(&params.intrinsics());
    for (new_s, &old_s) in order.iter().enumerate() {
        for j in 0..2 {
            p2.set_twist(
                reordered.pair_index(new_s, j),
                &params.twist(problem.pair_index(old_s, j)),
            );
        }
        p2.set_grid(new_s, params.grid_slice(old_s));
    }
    let v2 = total_objective(&reordered, &p2).unwrap();
    assert_eq!(v1, v2);
}

#[test]
fn objective_is_linear_in_the_smoothness_weight() {
    let (problem, params) = photocal_core::gradcheck::random_problem(9, 48, 36).unwrap();
    let with_weight = |sw: f64| {
        let mut p = problem.clone();
        p.photo.smoothness_weight = sw;
        total_objective(&p, &params).unwrap()
    };
    let v0 = with_weight(0.0);
    let v1 = with_weight(0.1);
    let v2 = with_weight(0.2);
    let d1 = v1 - v0;
    let d2 = v2 - v1;
    assert!((d1 - d2).abs() <= 1e-14 * v1.abs().max(1.0), "{d1} vs {d2}");
    assert!(d1 > 0.0);
}

#[test]
fn min_reprojection_never_exceeds_the_mean() {
    let (problem, params) = photocal_core::gradcheck::random_problem(11, 48, 36).unwrap();
    let vmean = total_objective(&problem, &params).unwrap();
    let mut pmin = problem.clone();
    pmin.photo.use_min_reprojection = true;
    // strip the smoothness term so only the photometric part is compared
    let mut pmean = problem.clone();
    pmean.photo.smoothness_weight = 0.0;
    pmin.photo.smoothness_weight = 0.0;
    let vmean_photo = total_objective(&pmean, &params).unwrap();
    let vmin = total_objective(&pmin, &params).unwrap();
    assert!(vmin <= vmean_photo + 1e-12, "{vmin} vs {vmean_photo}");
    assert!(vmean >= vmean_photo);
}

#[test]
fn min_reprojection_selects_the_static_context() {
    // context 0 is bitwise identical to the target (static camera), so
    // with a zero twist its reconstruction error is at the numeric floor
    // and the per-pixel minimum selects it everywhere
    let (w, h) = (48usize, 36usize);
    let scene = photocal_core::scene::default_scene(w, h, 8);
    let gt = photocal_core::scene::default_gt_intrinsics();
    let xi = Twist::new(
        Vector3::new(0.002, -0.003, 0.001),
        Vector3::new(0.08, -0.04, 0.05),
    );
    let (frames, _) = generate_sequence(&scene, &gt, &[Twist::zero(), xi], 3).unwrap();
    let cfg = EngineConfig {
        pyramid_levels: 1,
        grid_w: 4,
        grid_h: 3,
        photometric: PhotometricConfig {
            use_min_reprojection: true,
            smoothness_weight: 0.0,
            ..PhotometricConfig::default()
        },
        intrinsic_init: Some(gt),
        ..EngineConfig::default()
    };
    let (problem, params) = init_problem(&frames, &cfg).unwrap();
    // zero twists everywhere: context 0 reconstructs exactly, context 1
    // is misaligned by the sequence motion
    let v = total_objective(&problem, &params).unwrap();
    assert!(v <= 1e-9, "min-reprojection floor {v}");
}

#[test]
fn layout_mismatch_and_empty_problems_error() {
    let (problem, params) = photocal_core::gradcheck::random_problem(2, 48, 36).unwrap();
    let mut empty = problem.clone();
    empty.snippets.clear();
    assert!(matches!(
        total_objective(&empty, &params),
        Err(Error::ProblemConstruction(_))
    ));
    let bad_layout = photocal_core::objective::ParamLayout {
        n_pairs: 1,
        n_targets: 1,
        grid_h: 3,
        grid_w: 4,
    };
    let bad = ParamVector::zeros(bad_layout);
    assert!(matches!(
        total_objective(&problem, &bad),
        Err(Error::LayoutMismatch(_))
    ));
}
