use photocal_core::gradcheck;
use photocal_core::objective::{finite_difference_gradient, gradient};

#[test]
#[ignore]
fn diag_eps_scaling() {
    for seed in [1u64, 2, 3] {
        for eps in [1e-4, 3e-5, 1e-5] {
            let r = gradcheck::run(seed, eps, 48, 36).unwrap();
            eprintln!(
                "seed {seed} eps {eps:.0e}: intr {:.2e} twist {:.2e} grid {:.2e} (skipped {})",
                r.groups.intrinsics, r.groups.twists, r.groups.grids, r.skipped
            );
        }
    }
}

#[test]
#[ignore]
fn diag_worst_components() {
    let eps = 1e-4;
    let (problem, params) = gradcheck::random_problem_for_eps(1, 48, 36, eps).unwrap();
    let a = gradient(&problem, &params).unwrap();
    let n = finite_difference_gradient(&problem, &params, eps).unwrap();
    let mut rows: Vec<(f64, usize, f64, f64)> = (0..a.data().len())
        .map(|i| {
            let (av, nv) = (a.data()[i], n.data()[i]);
            let rel = if av.abs().max(nv.abs()) < 1e-8 {
                0.0
            } else {
                (av - nv).abs() / av.abs().max(nv.abs())
            };
            (rel, i, av, nv)
        })
        .collect();
    rows.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
    for (rel, i, av, nv) in rows.iter().take(12) {
        eprintln!("idx {i:3}  rel {rel:.3e}  analytic {av:+.9e}  numeric {nv:+.9e}");
    }
}
