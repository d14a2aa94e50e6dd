//! Two-region disagreement along the boundary that cuts the whole domain.

use patchwork_core::partition::TreeNode;
use patchwork_core::simulate::sample_gp_dataset;
use patchwork_core::{Domain, HyperParams, KernelSpec, PatchworkModel, SimSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Endpoints of the segment where the line `direction . p = threshold` crosses the box.
fn clip_line(direction: &[f64], threshold: f64, lo: f64, hi: f64) -> ([f64; 2], [f64; 2]) {
    let base = [threshold * direction[0], threshold * direction[1]];
    let along = [-direction[1], direction[0]];
    let (mut s_min, mut s_max) = (f64::NEG_INFINITY, f64::INFINITY);
    for j in 0..2 {
        if along[j].abs() < 1e-14 {
            continue;
        }
        let (a, b) = ((lo - base[j]) / along[j], (hi - base[j]) / along[j]);
        s_min = s_min.max(a.min(b));
        s_max = s_max.min(a.max(b));
    }
    let at = |s: f64| [base[0] + s * along[0], base[1] + s * along[1]];
    (at(s_min), at(s_max))
}

#[test]
fn pseudo_points_shrink_mismatch_along_the_root_boundary() {
    let kernel = KernelSpec::exponential(10.0, 1.0, 1.0).unwrap();
    let sim = SimSpec {
        n: 8000,
        kernel,
        domain: Domain::cube(2, 0.0, 6.0),
        seed: 2024,
    };
    let data = sample_gp_dataset(&sim).unwrap();
    let hyper = HyperParams::Shared(kernel);

    let bs = [0, 1, 3, 5, 10, 20];
    let mut max_gap = Vec::new();
    let mut rms_gap = Vec::new();
    for b in bs {
        let model = PatchworkModel::fit(&data.x, &data.y, 128, b, &hyper, 7).unwrap();
        assert_eq!(model.partitioned().n_regions(), 128);
        let TreeNode::Split { direction, threshold, .. } = model.tree().node(0) else {
            panic!("root must split");
        };
        let (p0, p1) = clip_line(direction, *threshold, 0.0, 6.0);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut worst = 0.0f64;
        let mut sum_sq = 0.0;
        for _ in 0..201 {
            let t: f64 = rng.random_range(0.0..1.0);
            let p = [p0[0] + t * (p1[0] - p0[0]), p0[1] + t * (p1[1] - p0[1])];
            let pred = model.predict_on_boundary(&p).unwrap();
            assert_eq!(pred.node, 0);
            assert_eq!(pred.chosen().region, pred.side_k.region.min(pred.side_l.region));
            let gap = (pred.side_k.mean - pred.side_l.mean).abs();
            worst = worst.max(gap);
            sum_sq += gap * gap;
        }
        max_gap.push(worst);
        rms_gap.push((sum_sq / 201.0).sqrt());
    }
    let report = format!("B = {bs:?}: rms {rms_gap:?}, max {max_gap:?}");
    assert!(rms_gap.windows(2).all(|w| w[1] < w[0]), "{report}");
    assert!(rms_gap[5] * 10.0 <= rms_gap[0], "{report}");
    assert!(max_gap[5] * 10.0 <= max_gap[0], "{report}");
}
