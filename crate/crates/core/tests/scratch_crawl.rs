use std::time::Instant;

use photocal_core::camera::IntrinsicParams;
use photocal_core::engine::{init_problem, EngineConfig};
use photocal_core::optimizer::{run_optimization, AdamConfig, GroupLrScale};
use photocal_core::scene::{default_gt_intrinsics, default_scene, default_trajectory, generate_sequence};

#[test]
#[ignore]
fn crawl_probe() {
    let start = Instant::now();
    let (w, h) = (160usize, 120usize);
    let scene = default_scene(w, h, 7);
    let trajectory = default_trajectory(5, 7);
    let gt_intr = default_gt_intrinsics();
    let (frames, _gt) = generate_sequence(&scene, &gt_intr, &trajectory, 5).unwrap();

    let cfg = EngineConfig {
        pyramid_levels: 3,
        grid_w: 8,
        grid_h: 6,
        intrinsic_init: Some(IntrinsicParams::new(
            (gt_intr.log_fx_n.exp() * 1.10).ln(),
            (gt_intr.log_fy_n.exp() * 0.90).ln(),
            gt_intr.cx_n + 0.03,
            gt_intr.cy_n - 0.03,
        )),
        ..EngineConfig::default()
    };
    let (problem, mut params) = init_problem(&frames, &cfg).unwrap();

    let scale = GroupLrScale { intrinsics: 1.0, twists: 1.0, grids: 5.0 };
    // coarse-to-fine warmup
    for (level, (iters, lr)) in [(800usize, 3e-3), (600, 2e-3)].iter().enumerate() {
        let lvl = 2 - level;
        let sub = problem.restrict_to_level(lvl);
        let out = run_optimization(
            &sub,
            &params,
            &AdamConfig { lr: *lr, max_iters: *iters, grad_tol: 0.0, group_scale: scale, ..AdamConfig::default() },
        )
        .unwrap();
        params = out.best_params;
        let fx = params.intrinsics().log_fx_n.exp() / gt_intr.log_fx_n.exp();
        eprintln!(
            "level {lvl}: obj {:.3e}, fx ratio {:.4} ({:.0}s)",
            out.best_objective,
            fx,
            start.elapsed().as_secs_f64()
        );
    }
    // long fine-level crawl, watching fx
    let sub = problem.restrict_to_level(0);
    for chunk in 0..10 {
        let out = run_optimization(
            &sub,
            &params,
            &AdamConfig { lr: 1e-3, max_iters: 300, grad_tol: 0.0, group_scale: scale, ..AdamConfig::default() },
        )
        .unwrap();
        params = out.best_params;
        let p = params.intrinsics();
        eprintln!(
            "chunk {chunk}: obj {:.4e}, fx ratio {:.4}, fy ratio {:.4}, cx err {:.4}, cy err {:.4} ({:.0}s)",
            out.best_objective,
            p.log_fx_n.exp() / gt_intr.log_fx_n.exp(),
            p.log_fy_n.exp() / gt_intr.log_fy_n.exp(),
            p.cx_n - gt_intr.cx_n,
            p.cy_n - gt_intr.cy_n,
            start.elapsed().as_secs_f64()
        );
    }
}
