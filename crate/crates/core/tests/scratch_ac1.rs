use std::time::Instant;
use photocal_core::gradcheck;

#[test]
#[ignore]
fn ac1_dry_run() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 1..=20u64 {
        let t = Instant::now();
        let r = gradcheck::run(seed, 1e-4, 64, 48).unwrap();
        worst = worst.max(r.groups.worst());
        eprintln!(
            "seed {seed:2}: intr {:.2e} twist {:.2e} grid {:.2e}  ({:.2}s)",
            r.groups.intrinsics, r.groups.twists, r.groups.grids, t.elapsed().as_secs_f64()
        );
    }
    eprintln!("worst over 20 seeds: {worst:.3e}  total {:.1}s", start.elapsed().as_secs_f64());
    assert!(worst <= 1e-4);
}
