mod common;

use common::*;
use ftfoot::planner::*;
use ftfoot::Error;
use proptest::prelude::*;

fn quiet() -> RolloutParams {
    RolloutParams {
        heading_noise: 0.0,
        ..Default::default()
    }
}

#[test]
fn path_rejects_degenerate_input() {
    assert!(Path::new(vec![[0.0, 0.0]]).is_err());
    assert!(Path::new(vec![[0.0, 0.0], [0.0, 0.0]]).is_err());
    assert!(serde_json::from_str::<Path>("[[0,0]]").is_err());
    let p: Path = serde_json::from_str("[[0,0],[3,4]]").unwrap();
    assert_eq!(p.length(), 5.0);
    assert_eq!(serde_json::to_string(&p).unwrap(), "[[0.0,0.0],[3.0,4.0]]");
}

#[test]
fn resample_spacing_and_endpoints() {
    let p = Path::new(vec![[0.0, 0.0], [1.0, 0.0], [1.0, 0.55]]).unwrap();
    let r = p.resample(0.25);
    assert_eq!(r[0], [0.0, 0.0]);
    assert_eq!(*r.last().unwrap(), [1.0, 0.55]);
    for w in r.windows(2) {
        assert!(((w[0][0] - w[1][0]).hypot(w[0][1] - w[1][1])) <= 0.25 + 1e-12);
    }
    assert_eq!(r.len(), 8);
}

#[test]
fn zero_cost_map_gives_near_straight_paths() {
    let map = uniform_map(0.0);
    let straight = (GOAL[0] - START[0]).hypot(GOAL[1] - START[1]);
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let plan = rrt_star_plan(&map, START, GOAL, &PlannerParams { seed, ..Default::default() }).unwrap();
        assert_eq!(plan.path.start(), START);
        assert_eq!(plan.path.end(), GOAL);
        worst = worst.max(plan.path.length() / straight - 1.0);
    }
    assert!(worst <= 0.05, "worst excess length {:.3}", worst);
}

#[test]
fn bisecting_wall_has_no_path() {
    let r = rrt_star_plan(&wall_map(false), START, GOAL, &PlannerParams { max_iters: 1500, ..Default::default() });
    assert!(matches!(r, Err(Error::NoPath(1500))), "{r:?}");
}

#[test]
fn paths_pass_through_the_gap() {
    let map = wall_map(true);
    for seed in 0..20 {
        let plan = rrt_star_plan(&map, START, GOAL, &PlannerParams { seed, ..Default::default() }).unwrap();
        let pts = plan.path.resample(RES / 4.0);
        assert!(crosses_through_gap(&pts, &map), "seed {seed}");
        assert!(plan.path.max_cost(&map).unwrap() < 0.5, "seed {seed}");
    }
}

#[test]
fn endpoints_outside_the_map_are_rejected() {
    assert!(rrt_star_plan(&uniform_map(0.0), [-1.0, 2.0], GOAL, &PlannerParams::default()).is_err());
}

#[test]
fn plan_cost_non_increasing_in_iterations() {
    let map = wall_map(true);
    for seed in 0..3 {
        let mut prev = f64::INFINITY;
        for iters in [800, 1200, 2000, 3000] {
            if let Ok(p) = rrt_star_plan(&map, START, GOAL, &PlannerParams { seed, max_iters: iters, ..Default::default() }) {
                assert!(p.cost <= prev + 1e-12, "seed {seed} iters {iters}: {} > {prev}", p.cost);
                prev = p.cost;
            } else {
                assert!(prev.is_infinite());
            }
        }
        assert!(prev.is_finite());
    }
}

#[test]
fn planning_is_reproducible() {
    let map = wall_map(true);
    let p = PlannerParams { seed: 9, ..Default::default() };
    let a = rrt_star_plan(&map, START, GOAL, &p).unwrap();
    let b = rrt_star_plan(&map, START, GOAL, &p).unwrap();
    assert_eq!(serde_json::to_string(&a.path).unwrap(), serde_json::to_string(&b.path).unwrap());
    assert_eq!(a.cost.to_bits(), b.cost.to_bits());
}

#[test]
fn straight_rollout_tracks_the_line() {
    let map = uniform_map(0.0);
    let path = Path::new(vec![[1.0, 5.0], [19.0, 5.0]]).unwrap();
    let r = rollout(&path, &map, &quiet());
    assert!(r.success);
    let dev = r.trace.iter().map(|p| (p[1] - 5.0).abs()).fold(0.0, f64::max);
    assert!(dev < RES / 2.0, "{dev}");
}

#[test]
fn rollout_fails_at_an_obstacle_cell() {
    let mut costs = vec![0.0; W * H];
    costs[25 * W + 50] = 1.0;
    let map = ftfoot::costmap::GlobalCostMap::from_costs(RES, [0.0, 0.0], W, H, &costs).unwrap();
    let path = Path::new(vec![[1.0, 5.1], [19.0, 5.1]]).unwrap();
    let r = rollout(&path, &map, &quiet());
    assert!(!r.success);
    let last = r.trace.last().unwrap();
    assert_eq!(map.world_to_cell(last[0], last[1]), Some((50, 25)));
    assert_eq!(success_rate(&path, &map, &RolloutParams::default(), 30).unwrap(), 0.0);
}

#[test]
fn rollout_leaving_the_map_fails() {
    let map = uniform_map(0.0);
    let path = Path::new(vec![[1.0, 5.0], [21.0, 5.0]]).unwrap();
    assert!(!rollout(&path, &map, &quiet()).success);
}

#[test]
fn corner_is_cut_by_less_than_lookahead() {
    let map = uniform_map(0.0);
    let corner = [10.0, 2.0];
    let path = Path::new(vec![[2.0, 2.0], corner, [10.0, 9.0]]).unwrap();
    let params = quiet();
    let r = rollout(&path, &map, &params);
    assert!(r.success);
    // Inward deviation near the corner, measured as distance to the path.
    let cut = r.trace.iter().map(|p| distance_to_path([p[0], p[1]], &path)).fold(0.0, f64::max);
    let closest = r.trace.iter().map(|p| (p[0] - corner[0]).hypot(p[1] - corner[1])).fold(f64::INFINITY, f64::min);
    assert!(closest < params.lookahead, "closest approach {closest}");
    assert!(cut > 0.0 && cut < params.lookahead, "cut {cut}");
}

#[test]
fn cross_track_error_examples() {
    let path = Path::new(vec![[0.0, 0.0], [10.0, 0.0]]).unwrap();
    let on: Vec<[f64; 3]> = (0..=10).map(|k| [k as f64, 0.0, 0.0]).collect();
    assert_eq!(cross_track_error(&on, &path), 0.0);
    let off: Vec<[f64; 3]> = (0..=10).map(|k| [k as f64, 0.1, 0.0]).collect();
    assert!((cross_track_error(&off, &path) - 0.1).abs() < 1e-15);
}

fn brute_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    // Dense parameter sweep refined by ternary search on the convex distance.
    let f = |t: f64| (a[0] + t * (b[0] - a[0]) - p[0]).hypot(a[1] + t * (b[1] - a[1]) - p[1]);
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let (m1, m2) = (lo + (hi - lo) / 3.0, hi - (hi - lo) / 3.0);
        if f(m1) <= f(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    f(0.5 * (lo + hi)).min(f(0.0)).min(f(1.0))
}

proptest! {
    #[test]
    fn cross_track_matches_brute_force(
        wp in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..6),
        tr in prop::collection::vec((-6.0f64..6.0, -6.0f64..6.0), 1..20),
    ) {
        let wp: Vec<[f64; 2]> = wp.into_iter().map(|(x, y)| [x, y]).collect();
        prop_assume!(wp.windows(2).all(|w| w[0] != w[1]));
        let path = Path::new(wp.clone()).unwrap();
        let trace: Vec<[f64; 3]> = tr.iter().map(|&(x, y)| [x, y, 0.0]).collect();
        let oracle = trace
            .iter()
            .map(|p| wp.windows(2).map(|w| brute_segment_distance([p[0], p[1]], w[0], w[1])).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / trace.len() as f64;
        prop_assert!((cross_track_error(&trace, &path) - oracle).abs() <= 1e-12);
    }

    #[test]
    fn hausdorff_is_a_pseudometric(
        a in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..5),
        b in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..5),
        c in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..5),
    ) {
        let mk = |v: Vec<(f64, f64)>| Path::new(v.into_iter().map(|(x, y)| [x, y]).collect());
        let (Ok(a), Ok(b), Ok(c)) = (mk(a), mk(b), mk(c)) else { return Ok(()) };
        let (ra, rb, rc) = (a.resample(0.2), b.resample(0.2), c.resample(0.2));
        let ab = hausdorff_points(&ra, &rb);
        prop_assert_eq!(ab, hausdorff_points(&rb, &ra));
        prop_assert_eq!(hausdorff_points(&ra, &ra), 0.0);
        prop_assert!(ab <= hausdorff_points(&ra, &rc) + hausdorff_points(&rc, &rb) + 1e-9);
        prop_assert_eq!(hausdorff(&a, &b, 0.2), ab);
    }
}

#[test]
fn hausdorff_of_parallel_unit_segments() {
    let a = Path::new(vec![[0.0, 0.0], [1.0, 0.0]]).unwrap();
    let b = Path::new(vec![[0.0, 1.0], [1.0, 1.0]]).unwrap();
    // Exhaustive pairwise oracle on the resampled points.
    let (ra, rb) = (a.resample(0.2), b.resample(0.2));
    let mut oracle: f64 = 0.0;
    for p in &ra {
        oracle = oracle.max(rb.iter().map(|q| (p[0] - q[0]).hypot(p[1] - q[1])).fold(f64::INFINITY, f64::min));
    }
    assert!((hausdorff(&a, &b, 0.2) - 1.0).abs() < 1e-12);
    assert!((oracle - 1.0).abs() < 1e-12);
    assert_eq!(hausdorff(&a, &b, 0.2), hausdorff(&b, &a, 0.2));
    assert_eq!(hausdorff(&a, &a, 0.2), 0.0);
}

#[test]
fn success_rate_examples() {
    let map = uniform_map(0.0);
    let path = Path::new(vec![[1.0, 5.0], [19.0, 5.0]]).unwrap();
    for trials in [1, 7, 30] {
        assert_eq!(success_rate(&path, &map, &quiet(), trials).unwrap(), 1.0);
    }
    assert!(success_rate(&path, &map, &quiet(), 0).is_err());
    let noisy = RolloutParams { heading_noise: 0.6, seed: 3, ..Default::default() };
    let a = success_rate(&path, &map, &noisy, 30).unwrap();
    assert_eq!(a.to_bits(), success_rate(&path, &map, &noisy, 30).unwrap().to_bits());
}

#[test]
fn noisy_rollouts_differ_between_trials() {
    let map = uniform_map(0.0);
    let path = Path::new(vec![[1.0, 5.0], [19.0, 5.0]]).unwrap();
    let p = |s| RolloutParams { seed: trial_seed(1, s), ..Default::default() };
    assert_ne!(rollout(&path, &map, &p(0)).trace, rollout(&path, &map, &p(1)).trace);
    assert_eq!(rollout(&path, &map, &p(0)).trace, rollout(&path, &map, &p(0)).trace);
}

fn enumerate_metrics(pred: &[bool], gt: &[bool]) -> (f64, f64, f64, f64, f64) {
    let (mut tp, mut fp, mut fneg, mut tn) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fneg += 1.0,
            (false, false) => tn += 1.0,
        }
    }
    let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let (pr, rc) = (div(tp, tp + fp), div(tp, tp + fneg));
    (div(tp + tn, tp + fp + fneg + tn), pr, rc, div(2.0 * pr * rc, pr + rc), div(tp, tp + fp + fneg))
}

#[test]
fn freespace_metrics_match_enumeration() {
    use diffcore::Tensor;
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for (h, w) in [(2, 2), (2, 3), (3, 3), (3, 4), (4, 4)] {
        let n = h * w;
        // Every pair for 2×2; random pairs above (4×4 has 2^32 pairs).
        let pairs: Vec<(u32, u32)> = if n <= 4 {
            (0..1u32 << n).flat_map(|a| (0..1u32 << n).map(move |b| (a, b))).collect()
        } else {
            (0..2000).map(|_| (rng.gen::<u32>() & ((1u64 << n) - 1) as u32, rng.gen::<u32>() & ((1u64 << n) - 1) as u32)).collect()
        };
        for (a, b) in pairs {
            let pb: Vec<bool> = (0..n).map(|k| a >> k & 1 == 1).collect();
            let gb: Vec<bool> = (0..n).map(|k| b >> k & 1 == 1).collect();
            let t = |v: &[bool]| Tensor::new(&[h, w], v.iter().map(|&x| x as u8 as f64).collect()).unwrap();
            let m = freespace_metrics(&t(&pb), &t(&gb)).unwrap();
            let (acc, pr, rc, f, iou) = enumerate_metrics(&pb, &gb);
            assert_eq!((m.accuracy, m.precision, m.recall, m.iou), (acc, pr, rc, iou));
            assert!((m.f_score - f).abs() < 1e-15);
        }
    }
}

#[test]
fn freespace_metric_examples() {
    use diffcore::Tensor;
    let pred = Tensor::new(&[2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
    let gt = Tensor::new(&[2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
    let m = freespace_metrics(&pred, &gt).unwrap();
    assert_eq!((m.precision, m.recall, m.accuracy), (0.5, 0.5, 0.5));
    assert!((m.iou - 1.0 / 3.0).abs() < 1e-15);
    let same = freespace_metrics(&gt, &gt).unwrap();
    assert_eq!((same.accuracy, same.precision, same.recall, same.f_score, same.iou), (1.0, 1.0, 1.0, 1.0, 1.0));
    let none = freespace_metrics(&Tensor::zeros(&[2, 2]), &gt).unwrap();
    assert_eq!(none.recall, 0.0);
    assert_eq!(none.precision, 0.0);
    assert!(none.degenerate.contains(&"precision".to_string()));
    assert!(freespace_metrics(&Tensor::zeros(&[2, 3]), &gt).is_err());
}
