use geoalign_core::mgsf::{
    self, adaptive_gate, align_depth, cluster_dominant, compute_normals, dominant_normal, geo_consistency, macro_gradient, modulate,
    partition_edges, rectify_edges, DepthMap, GateParams, Geometry, MgsfConfig,
};
use geoalign_core::scene::{self, CityProfile, Label, SceneSpec};
use geoalign_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type V3 = [f64; 3];

fn raster(h: usize, w: usize, v: Vec<f64>) -> Tensor {
    Tensor::from_raster(h, w, v).unwrap()
}

fn norm(v: V3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn unit(v: V3) -> V3 {
    let n = norm(v);
    [v[0] / n, v[1] / n, v[2] / n]
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn ramp_gradients_are_exact_for_all_dilations() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (a, b) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let c = rng.random_range(-10.0..10.0);
        let d = DepthMap::from_fn(21, 23, |y, x| a * x as f64 + b * y as f64 + c).unwrap();
        for r in [1, 2, 4] {
            let (gx, gy) = macro_gradient(&d, r).unwrap();
            for y in r..21 - r {
                for x in r..23 - r {
                    assert!((gx.at4(0, 0, y, x) - a).abs() < 1e-12, "r={r} gx");
                    assert!((gy.at4(0, 0, y, x) - b).abs() < 1e-12, "r={r} gy");
                }
            }
        }
    }
}

#[test]
fn gradient_examples() {
    let d = DepthMap::from_fn(9, 9, |y, x| (x + y) as f64).unwrap();
    for r in 1..=4 {
        let (gx, gy) = macro_gradient(&d, r).unwrap();
        assert_eq!((gx.at4(0, 0, 4, 4), gy.at4(0, 0, 4, 4)), (1.0, 1.0));
    }
    let d = DepthMap::from_fn(9, 9, |_, x| 3.0 * x as f64).unwrap();
    let (gx, gy) = macro_gradient(&d, 2).unwrap();
    assert_eq!((gx.at4(0, 0, 4, 4), gy.at4(0, 0, 4, 4)), (3.0, 0.0));
    let small = DepthMap::from_fn(4, 9, |_, x| x as f64).unwrap();
    assert!(macro_gradient(&small, 2).is_err());
}

#[test]
fn checkerboard_pools_to_half() {
    let d = DepthMap::from_fn(8, 8, |y, x| ((x + y) % 2) as f64).unwrap();
    let p = align_depth(&d, 4, 4).unwrap();
    assert!(p.values().iter().all(|&v| v == 0.5));
    assert!(align_depth(&d, 9, 4).is_err());
}

#[test]
fn normal_hand_cases() {
    let gx = raster(1, 3, vec![0.0, 1.0, 3.0]);
    let gy = raster(1, 3, vec![0.0, 0.0, 4.0]);
    let nf = compute_normals(&gx, &gy).unwrap();
    let s2 = 2f64.sqrt();
    let s26 = 26f64.sqrt();
    let expected = [[0.0, 0.0, 1.0], [-1.0 / s2, 0.0, 1.0 / s2], [-3.0 / s26, -4.0 / s26, 1.0 / s26]];
    for (n, e) in nf.normals().iter().zip(expected) {
        for k in 0..3 {
            assert!((n[k] - e[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn normals_unit_on_random_rasters() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..100 {
        let (h, w) = (rng.random_range(5..24), rng.random_range(5..24));
        let amp = 10f64.powf(rng.random_range(-2.0..3.0));
        let d = DepthMap::from_fn(h, w, |_, _| amp * rng.random_range(-1.0..1.0)).unwrap();
        let r = 1 + i % 2;
        let (gx, gy) = macro_gradient(&d, r).unwrap();
        let nf = compute_normals(&gx, &gy).unwrap();
        for n in nf.normals() {
            assert!((norm(*n) - 1.0).abs() < 1e-9);
            assert!(n[2] > 0.0);
        }
    }
}

#[test]
fn partition_examples() {
    let mut m = vec![0.0; 100];
    m[37] = 100.0;
    let cfg = MgsfConfig {
        tau_grad_quantile: 0.9,
        ..MgsfConfig::default()
    };
    let p = partition_edges(&raster(10, 10, m), &Tensor::zeros(vec![1, 1, 10, 10]).unwrap(), &cfg).unwrap();
    assert_eq!(p.edges().collect::<Vec<_>>(), vec![37]);

    let half: Vec<f64> = (0..64).map(|i| if i < 32 { 0.0 } else { 10.0 }).collect();
    let cfg = MgsfConfig {
        tau_grad_quantile: 0.5,
        ..MgsfConfig::default()
    };
    let p = partition_edges(&raster(8, 8, half), &Tensor::zeros(vec![1, 1, 8, 8]).unwrap(), &cfg).unwrap();
    assert_eq!(p.edges().collect::<Vec<_>>(), (32..64).collect::<Vec<_>>());
}

#[test]
fn dominant_normal_examples() {
    let flat = [0.0, 0.0, 1.0];
    let tilted = unit([-1.0, 0.0, 1.0]);
    let cfg = MgsfConfig {
        kmeans_k: 2,
        ..MgsfConfig::default()
    };
    let mut pts = vec![flat; 9];
    pts.extend([tilted; 3]);
    assert_eq!(cluster_dominant(&pts, &cfg), flat);

    let steep = unit([0.0, -2.0, 1.0]);
    let mut tie = vec![steep; 6];
    tie.extend([tilted; 6]);
    // tilted has the larger z-component
    let got = cluster_dominant(&tie, &cfg);
    for k in 0..3 {
        assert!((got[k] - tilted[k]).abs() < 1e-12);
    }
}

#[test]
fn dominant_normal_falls_back_to_mean() {
    // only two flat pixels for k = 3
    let gx = raster(1, 4, vec![0.0, 1.0, 50.0, 60.0]);
    let gy = Tensor::zeros(vec![1, 1, 1, 4]).unwrap();
    let cfg = MgsfConfig {
        tau_grad_quantile: 0.5,
        ..MgsfConfig::default()
    };
    let nf = compute_normals(&gx, &gy).unwrap();
    let part = partition_edges(&gx, &gy, &cfg).unwrap();
    assert_eq!(part.flat_count(), 2);
    let n = dominant_normal(&nf, &part, &cfg).unwrap();
    let a = nf.get(0, 0);
    let b = nf.get(0, 1);
    let e = unit([a[0] + b[0], a[1] + b[1], a[2] + b[2]]);
    for k in 0..3 {
        assert!((n[k] - e[k]).abs() < 1e-12);
    }
}

fn sse(points: &[V3], assign: &[usize], k: usize) -> Option<(f64, Vec<V3>, Vec<usize>)> {
    let mut sums = vec![[0.0; 3]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assign) {
        for d in 0..3 {
            sums[a][d] += p[d];
        }
        counts[a] += 1;
    }
    if counts.contains(&0) {
        return None;
    }
    let cents: Vec<V3> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| [s[0] / c as f64, s[1] / c as f64, s[2] / c as f64])
        .collect();
    let cost = points
        .iter()
        .zip(assign)
        .map(|(p, &a)| (0..3).map(|d| (p[d] - cents[a][d]).powi(2)).sum::<f64>())
        .sum();
    Some((cost, cents, counts))
}

/// Dominant normal of the SSE-optimal k-partition, by enumeration.
fn brute_force_dominant(points: &[V3], k: usize) -> V3 {
    let n = points.len();
    let mut assign = vec![0usize; n];
    let mut best: Option<(f64, Vec<V3>, Vec<usize>)> = None;
    loop {
        if let Some(cand) = sse(points, &assign, k) {
            if best.as_ref().map_or(true, |b| cand.0 < b.0 - 1e-12) {
                best = Some(cand);
            }
        }
        let mut i = 0;
        while i < n {
            assign[i] += 1;
            if assign[i] < k {
                break;
            }
            assign[i] = 0;
            i += 1;
        }
        if i == n {
            break;
        }
    }
    let (_, cents, counts) = best.unwrap();
    let mut pick = 0;
    for c in 1..k {
        if counts[c] > counts[pick] || (counts[c] == counts[pick] && cents[c][2] > cents[pick][2]) {
            pick = c;
        }
    }
    unit(cents[pick])
}

#[test]
fn kmeans_matches_brute_force_partitioning() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let directions = [
        [0.0, 0.0, 1.0],
        unit([-1.0, 0.0, 1.0]),
        unit([0.0, 1.0, 0.6]),
        unit([1.2, -0.8, 1.0]),
    ];
    for instance in 0..50 {
        let k = 2 + instance % 2;
        let n = rng.random_range(2 * k + 1..=12);
        // distinct cluster sizes summing to n
        let mut sizes = vec![1usize; k];
        for _ in k..n {
            let c = rng.random_range(0..k);
            sizes[c] += 1;
        }
        let start = rng.random_range(0..directions.len());
        let mut pts = Vec::new();
        for (c, &s) in sizes.iter().enumerate() {
            let base = directions[(start + c) % directions.len()];
            for _ in 0..s {
                let jitter = [
                    rng.random_range(-0.03..0.03),
                    rng.random_range(-0.03..0.03),
                    rng.random_range(-0.03..0.03),
                ];
                pts.push(unit([base[0] + jitter[0], base[1] + jitter[1], base[2] + jitter[2]]));
            }
        }
        let cfg = MgsfConfig {
            kmeans_k: k,
            kmeans_seed: instance as u64,
            ..MgsfConfig::default()
        };
        let got = cluster_dominant(&pts, &cfg);
        let want = brute_force_dominant(&pts, k);
        for d in 0..3 {
            assert!((got[d] - want[d]).abs() < 1e-12, "instance {instance}: {got:?} vs {want:?}");
        }
    }
}

#[test]
fn consistency_and_gate_examples() {
    let s2 = 2f64.sqrt();
    let s26 = 26f64.sqrt();
    let gx = raster(1, 3, vec![0.0, 1.0, 3.0]);
    let gy = raster(1, 3, vec![0.0, 0.0, 4.0]);
    let nf = compute_normals(&gx, &gy).unwrap();
    let c = geo_consistency(&nf, [0.0, 0.0, 1.0]).unwrap();
    let want = [1.0, 1.0 / s2, 1.0 / s26];
    for (a, b) in c.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
    let m = adaptive_gate(&c, GateParams::default());
    assert!((m.data()[0] - sigmoid(2.5)).abs() < 1e-15);
    assert!((m.data()[0] - 0.9241).abs() < 1e-4);
    assert!((m.data()[2] - 0.1795).abs() < 1e-4);
    let zero = adaptive_gate(&c, GateParams { alpha: 0.0, beta: 0.0 });
    assert!(zero.data().iter().all(|&v| v == 0.5));

    // roof and facade values from above, no edges
    let part = partition_edges(
        &Tensor::zeros(vec![1, 1, 1, 3]).unwrap(),
        &Tensor::zeros(vec![1, 1, 1, 3]).unwrap(),
        &MgsfConfig::default(),
    )
    .unwrap();
    let mask = rectify_edges(&m, &part).unwrap();
    let out = modulate(&Tensor::full(vec![1, 1, 1, 3], 1.0).unwrap(), &mask).unwrap();
    assert!((out.data()[0] - 1.9241).abs() < 1e-4);
    assert!((out.data()[2] - 1.1795).abs() < 1e-4);
}

#[test]
fn rectify_single_edge() {
    let m = Tensor::full(vec![1, 1, 3, 3], 0.9).unwrap();
    let mut g = vec![0.0; 9];
    g[4] = 5.0;
    let cfg = MgsfConfig {
        tau_grad_quantile: 0.5,
        ..MgsfConfig::default()
    };
    let part = partition_edges(&raster(3, 3, g), &Tensor::zeros(vec![1, 1, 3, 3]).unwrap(), &cfg).unwrap();
    let mask = rectify_edges(&m, &part).unwrap();
    for (i, &v) in mask.values().iter().enumerate() {
        assert_eq!(v, if i == 4 { 0.5 } else { 0.9 });
    }
}

fn depth_strategy() -> impl Strategy<Value = DepthMap> {
    (6usize..20, 6usize..20, 0.0f64..3.0, -1.0f64..1.0, -1.0f64..1.0, any::<u64>()).prop_map(|(h, w, noise, a, b, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bx = rng.random_range(0..w / 2);
        let by = rng.random_range(0..h / 2);
        DepthMap::from_fn(h, w, |y, x| {
            let step = if x >= bx && x < bx + w / 2 && y >= by && y < by + h / 2 {
                -4.0
            } else {
                0.0
            };
            20.0 + a * x as f64 + b * y as f64 + step + noise * rng.random_range(-1.0..1.0)
        })
        .unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mask_bounds_edges_and_modulation(
        d in depth_strategy(),
        alpha in 0.0f64..20.0,
        beta in -10.0f64..10.0,
        q in 0.0f64..0.99,
        r in 1usize..3,
        fseed in any::<u64>(),
    ) {
        let (h, w) = (d.height().min(8), d.width().min(8));
        let cfg = MgsfConfig { dilation: r.min((h.min(w) - 1) / 2), tau_grad_quantile: q, ..MgsfConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(fseed);
        let f = Tensor::from_fn(vec![2, 3, h, w], |_| rng.random_range(-4.0..4.0)).unwrap();
        let (out, mask) = mgsf::mgsf_forward(&f, &d, GateParams { alpha, beta }, &cfg).unwrap();
        for (i, &m) in mask.values().iter().enumerate() {
            prop_assert!(m > 0.0 && m < 1.0);
            if mask.edge_set()[i] {
                prop_assert_eq!(m, 0.5);
            }
        }
        for (o, x) in out.data().iter().zip(f.data()) {
            prop_assert!(o.abs() >= x.abs() && o.abs() <= 2.0 * x.abs());
            prop_assert!(o.signum() == x.signum() || *x == 0.0);
        }
    }

    #[test]
    fn mask_monotone_in_consistency(d in depth_strategy(), alpha in 0.01f64..20.0, beta in -10.0f64..10.0) {
        let g = Geometry::analyze(&d, d.height().min(8), d.width().min(8), &MgsfConfig { dilation: 1, ..MgsfConfig::default() }).unwrap();
        let mask = g.mask(GateParams { alpha, beta }).unwrap();
        let c = g.c_geo.data();
        let off: Vec<usize> = (0..c.len()).filter(|&i| !mask.edge_set()[i]).collect();
        for &i in &off {
            for &j in &off {
                if c[i] > c[j] {
                    prop_assert!(mask.values()[i] >= mask.values()[j]);
                }
            }
        }
    }

    #[test]
    fn partition_covers_and_respects_threshold(d in depth_strategy(), q in 0.0f64..0.99) {
        let (gx, gy) = macro_gradient(&d, 1).unwrap();
        let p = partition_edges(&gx, &gy, &MgsfConfig { tau_grad_quantile: q, ..MgsfConfig::default() }).unwrap();
        prop_assert_eq!(p.edge_count() + p.flat_count(), d.height() * d.width());
        for (i, &m) in p.magnitude().iter().enumerate() {
            prop_assert_eq!(p.is_edge()[i], m > p.tau_grad());
        }
    }

    #[test]
    fn dominant_normal_is_deterministic_unit(d in depth_strategy(), seed in any::<u64>()) {
        let cfg = MgsfConfig { kmeans_seed: seed, dilation: 1, ..MgsfConfig::default() };
        let a = Geometry::analyze(&d, 6, 6, &cfg).unwrap().n_dom;
        let b = Geometry::analyze(&d, 6, 6, &cfg).unwrap().n_dom;
        prop_assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
        prop_assert!((norm(a) - 1.0).abs() < 1e-12);
        prop_assert!(a[2] > 0.0);
    }
}

fn single_box() -> SceneSpec {
    SceneSpec {
        boxes: vec![scene::BoxSpec {
            x: 20,
            y: 20,
            w: 16,
            h: 16,
            height: 4.0,
        }],
        oblique_slope: (0.15, 0.1),
        ..SceneSpec::default()
    }
}

#[test]
fn single_box_roof_brighter_than_facade() {
    let (d, labels) = scene::render_oblique(&single_box()).unwrap();
    let g = Geometry::analyze(&d, 16, 16, &MgsfConfig::default()).unwrap();
    let q = scene::mask_quality(&g.mask(GateParams::default()).unwrap(), &labels).unwrap();
    assert!(q.mean_roof > q.mean_facade, "{q:?}");
}

#[test]
fn mask_ordering_survives_depth_scaling() {
    let profile = CityProfile::standard();
    for seed in 0..10 {
        let (d, labels) = scene::render_oblique(&scene::box_city(seed, &profile)).unwrap();
        for c in [0.5, 1.0, 2.0] {
            let g = Geometry::analyze(&d.scaled(c).unwrap(), 16, 16, &MgsfConfig::default()).unwrap();
            let q = scene::mask_quality(&g.mask(GateParams::default()).unwrap(), &labels).unwrap();
            assert!(q.mean_roof > q.mean_facade, "seed {seed} scale {c}: {q:?}");
        }
    }
}

#[test]
fn flat_plane_stats() {
    let d = DepthMap::from_fn(32, 32, |_, _| 7.5).unwrap();
    let g = Geometry::analyze(&d, 16, 16, &MgsfConfig::default()).unwrap();
    assert_eq!(g.n_dom, [0.0, 0.0, 1.0]);
    assert_eq!(g.partition.edge_count(), 0);
    let labels = scene::render_ortho(&SceneSpec::default()).unwrap().1;
    assert_eq!(labels.count(Label::Ground), 64 * 64);
}
