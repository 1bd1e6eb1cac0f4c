//! One pass/fail line per acceptance criterion. Runs without the libtest
//! harness so the lines always reach the output.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use geoalign::specfile;
use geoalign_core::gradcheck::{self, GradCheckConfig};
use geoalign_core::losses::{activation_map, aggregate, gacd_from_features_var, gacd_loss, partition_values};
use geoalign_core::mgsf::{cluster_dominant, compute_normals, macro_gradient, mgsf_forward, DepthMap, GateParams, Geometry, MgsfConfig};
use geoalign_core::scene::{box_city, mask_quality, render_oblique, CityProfile};
use geoalign_core::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-4;
const GRAD_SEEDS: u64 = 20;
const GRAD_BUDGET_S: f64 = 10.0;
const SOBEL_TOL: f64 = 1e-12;
const NORMAL_TOL: f64 = 1e-12;
const UNIT_TOL: f64 = 1e-9;
const KMEANS_TOL: f64 = 1e-12;
const MASK_ACCURACY: f64 = 0.90;
const MASK_BUDGET_S: f64 = 5.0;
const BENCH_SCENES: usize = 50;
const BENCH_SEED: u64 = 0;
const BENCH_BUDGET_S: f64 = 60.0;

type V3 = [f64; 3];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn unit(v: V3) -> V3 {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn gradient_check() -> Verdict {
    let start = Instant::now();
    let report = gradcheck::run_seeds(0..GRAD_SEEDS, &GradCheckConfig::default()).expect("gradcheck runs");
    let secs = start.elapsed().as_secs_f64();
    let mut missing = Vec::new();
    for loss in ["gacd", "triplet", "total"] {
        for param in [
            "encoder.w1",
            "encoder.w2",
            "phi.mid",
            "phi.far",
            "psi.weights",
            "psi.bias",
            "alpha",
            "beta",
        ] {
            if !report.rows.iter().any(|r| r.loss == loss && r.param == param) {
                missing.push(format!("{loss}/{param}"));
            }
        }
    }
    let err = report.max_error();
    verdict(
        report.passes(GRAD_TOL) && missing.is_empty() && secs < GRAD_BUDGET_S,
        format!(
            "max rel err {err:.2e} over {} rows x {GRAD_SEEDS} seeds (tol {GRAD_TOL:e}, eps {:e}), missing {missing:?}, {secs:.2} s (limit {GRAD_BUDGET_S} s)",
            report.rows.len(),
            gradcheck::DEFAULT_EPS
        ),
    )
}

fn sobel_exactness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (a, b, c) = (
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-10.0..10.0),
        );
        let d = DepthMap::from_fn(21, 23, |y, x| a * x as f64 + b * y as f64 + c).unwrap();
        for r in [1, 2, 4] {
            let (gx, gy) = macro_gradient(&d, r).unwrap();
            for y in r..21 - r {
                for x in r..23 - r {
                    worst = worst.max((gx.at4(0, 0, y, x) - a).abs()).max((gy.at4(0, 0, y, x) - b).abs());
                }
            }
        }
    }
    verdict(
        worst < SOBEL_TOL,
        format!("worst interior error {worst:.2e} over 20 ramps, r in {{1,2,4}} (tol {SOBEL_TOL:e})"),
    )
}

fn normal_field() -> Verdict {
    let gx = Tensor::from_raster(1, 3, vec![0.0, 1.0, 3.0]).unwrap();
    let gy = Tensor::from_raster(1, 3, vec![0.0, 0.0, 4.0]).unwrap();
    let nf = compute_normals(&gx, &gy).unwrap();
    let (s2, s26) = (2f64.sqrt(), 26f64.sqrt());
    let expected = [[0.0, 0.0, 1.0], [-1.0 / s2, 0.0, 1.0 / s2], [-3.0 / s26, -4.0 / s26, 1.0 / s26]];
    let hand = nf
        .normals()
        .iter()
        .zip(expected)
        .flat_map(|(n, e)| (0..3).map(move |k| (n[k] - e[k]).abs()))
        .fold(0.0f64, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut unit_err = 0.0f64;
    for i in 0..100 {
        let (h, w) = (rng.random_range(5..24), rng.random_range(5..24));
        let amp = 10f64.powf(rng.random_range(-2.0..3.0));
        let d = DepthMap::from_fn(h, w, |_, _| amp * rng.random_range(-1.0..1.0)).unwrap();
        let (gx, gy) = macro_gradient(&d, 1 + i % 2).unwrap();
        for n in compute_normals(&gx, &gy).unwrap().normals() {
            unit_err = unit_err.max(((n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt() - 1.0).abs());
        }
    }
    verdict(
        hand < NORMAL_TOL && unit_err < UNIT_TOL,
        format!("hand cases err {hand:.2e} (tol {NORMAL_TOL:e}); unit-length err {unit_err:.2e} on 100 rasters (tol {UNIT_TOL:e})"),
    )
}

/// Dominant normal of the SSE-optimal k-partition, by enumeration of all
/// assignments. Largest cluster wins; ties go to larger z.
fn brute_force_dominant(points: &[V3], k: usize) -> V3 {
    let n = points.len();
    let mut best: Option<(f64, Vec<V3>, Vec<usize>)> = None;
    for code in 0..k.pow(n as u32) {
        let assign: Vec<usize> = (0..n).map(|i| code / k.pow(i as u32) % k).collect();
        let mut sums = vec![[0.0; 3]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            (0..3).for_each(|d| sums[a][d] += p[d]);
            counts[a] += 1;
        }
        if counts.contains(&0) {
            continue;
        }
        let cents: Vec<V3> = sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| [s[0] / c as f64, s[1] / c as f64, s[2] / c as f64])
            .collect();
        let cost: f64 = points
            .iter()
            .zip(&assign)
            .map(|(p, &a)| (0..3).map(|d| (p[d] - cents[a][d]).powi(2)).sum::<f64>())
            .sum();
        if best.as_ref().map_or(true, |b| cost < b.0 - 1e-12) {
            best = Some((cost, cents, counts));
        }
    }
    let (_, cents, counts) = best.unwrap();
    let pick = (0..k)
        .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(cents[a][2].total_cmp(&cents[b][2])).then(b.cmp(&a)))
        .unwrap();
    unit(cents[pick])
}

fn kmeans_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let directions = [
        [0.0, 0.0, 1.0],
        unit([-1.0, 0.0, 1.0]),
        unit([0.0, 1.0, 0.6]),
        unit([1.2, -0.8, 1.0]),
    ];
    let mut mismatches = 0;
    let mut worst = 0.0f64;
    for instance in 0..50 {
        let k = 2 + instance % 2;
        let n = rng.random_range(2 * k + 1..=12);
        let mut sizes = vec![1usize; k];
        for _ in k..n {
            sizes[rng.random_range(0..k)] += 1;
        }
        let start = rng.random_range(0..directions.len());
        let mut pts = Vec::new();
        for (c, &s) in sizes.iter().enumerate() {
            let base = directions[(start + c) % directions.len()];
            for _ in 0..s {
                let j: V3 = [
                    rng.random_range(-0.03..0.03),
                    rng.random_range(-0.03..0.03),
                    rng.random_range(-0.03..0.03),
                ];
                pts.push(unit([base[0] + j[0], base[1] + j[1], base[2] + j[2]]));
            }
        }
        let cfg = MgsfConfig {
            kmeans_k: k,
            kmeans_seed: instance as u64,
            ..MgsfConfig::default()
        };
        let got = cluster_dominant(&pts, &cfg);
        let want = brute_force_dominant(&pts, k);
        let err = (0..3).map(|d| (got[d] - want[d]).abs()).fold(0.0, f64::max);
        worst = worst.max(err);
        if err >= KMEANS_TOL {
            mismatches += 1;
        }
    }
    verdict(
        mismatches == 0,
        format!("{mismatches}/50 instances differ from brute force, worst {worst:.2e} (tol {KMEANS_TOL:e})"),
    )
}

fn mask_semantics() -> Verdict {
    let start = Instant::now();
    let profile = CityProfile::standard();
    let mut total = 0.0;
    let mut worst = (f64::INFINITY, 0);
    let mut ordered = 0;
    for seed in 0..20 {
        let spec = box_city(seed, &profile);
        let (d, labels) = render_oblique(&spec).unwrap();
        let g = Geometry::analyze(&d, 16, 16, &MgsfConfig::default()).unwrap();
        let q = mask_quality(&g.mask(GateParams::default()).unwrap(), &labels).unwrap();
        total += q.balanced_accuracy;
        if q.balanced_accuracy < worst.0 {
            worst = (q.balanced_accuracy, seed);
        }
        if q.mean_roof > q.mean_facade {
            ordered += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let mean = total / 20.0;
    verdict(
        mean >= MASK_ACCURACY && ordered == 20 && secs < MASK_BUDGET_S,
        format!(
            "mean balanced accuracy {mean:.4} over 20 scenes (threshold {MASK_ACCURACY}, noise sigma {}; worst scene {:.4} at seed {}), roof > facade in {ordered}/20, {secs:.2} s (limit {MASK_BUDGET_S} s)",
            profile.noise_sigma, worst.0, worst.1
        ),
    )
}

fn edge_neutrality() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut masks = 0;
    let mut violations = 0;
    let mut check = |mask: &geoalign_core::mgsf::GeoMask, f: &Tensor, out: &Tensor| {
        masks += 1;
        for (i, &m) in mask.values().iter().enumerate() {
            if !(m > 0.0 && m < 1.0) || (mask.edge_set()[i] && m != 0.5) {
                violations += 1;
            }
        }
        for (o, x) in out.data().iter().zip(f.data()) {
            if !(o.abs() >= x.abs() && o.abs() <= 2.0 * x.abs()) {
                violations += 1;
            }
        }
    };
    for seed in 0..20 {
        let (d, _) = render_oblique(&box_city(seed, &CityProfile::facade_heavy())).unwrap();
        let f = Tensor::from_fn(vec![1, 4, 16, 16], |_| rng.random_range(-3.0..3.0)).unwrap();
        let (out, mask) = mgsf_forward(&f, &d, GateParams::default(), &MgsfConfig::default()).unwrap();
        check(&mask, &f, &out);
    }
    for _ in 0..200 {
        let (h, w) = (rng.random_range(6..20), rng.random_range(6..20));
        let (a, b, noise) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..3.0));
        let vals: Vec<f64> = (0..h * w)
            .map(|i| 20.0 + a * (i % w) as f64 + b * (i / w) as f64 + noise * rng.random_range(-1.0..1.0))
            .collect();
        let d = DepthMap::new(h, w, vals).unwrap();
        let gate = GateParams {
            alpha: rng.random_range(0.0..20.0),
            beta: rng.random_range(-10.0..10.0),
        };
        let cfg = MgsfConfig {
            dilation: rng.random_range(1..3),
            tau_grad_quantile: rng.random_range(0.0..0.99),
            ..MgsfConfig::default()
        };
        let f = Tensor::from_fn(vec![2, 3, 5, 5], |_| rng.random_range(-4.0..4.0)).unwrap();
        let (out, mask) = mgsf_forward(&f, &d, gate, &cfg).unwrap();
        check(&mask, &f, &out);
    }
    verdict(
        violations == 0,
        format!("{violations} violations over {masks} masks (bounds, edge value, modulation range)"),
    )
}

fn gacd_dynamics() -> Verdict {
    let hand = gacd_loss(0.9, 0.2, 0.5) == 0.0 && (gacd_loss(0.5, 0.4, 0.5) - 0.4).abs() < 1e-15;
    let (h, w, c) = (6, 6, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mask: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
    let part = partition_values(&mask, 0.7, 0.3).unwrap();
    let mut f: Vec<f64> = (0..c * h * w)
        .map(|i| if part.n_set[i % (h * w)] { 1.0 } else { 0.6 } + rng.random_range(0.0..0.2))
        .collect();
    let xi = 0.5;
    let mut gaps = Vec::new();
    let mut steps = None;
    for step in 0..100 {
        let t = Tensor::new(vec![1, c, h, w], f.clone()).unwrap();
        let (vr, vw) = aggregate(&activation_map(&t).unwrap(), &part).unwrap();
        gaps.push(vw - vr);
        let tape = Tape::new();
        let fv = tape.leaf(t);
        let loss = gacd_from_features_var(fv, &part, xi).unwrap();
        if loss.value().item().unwrap() == 0.0 {
            steps = Some(step);
            break;
        }
        let g = tape.backward(loss).unwrap();
        for (x, d) in f.iter_mut().zip(g.get(fv).unwrap().data()) {
            *x -= 0.05 * d * (c * h * w) as f64;
        }
    }
    let monotone = gaps.windows(2).all(|p| p[1] < p[0]);
    verdict(
        hand && monotone && steps.is_some(),
        format!(
            "hand cases {}, gap {:.3} -> {:.3} monotone {monotone}, hinge inactive after {} steps (limit 100)",
            if hand { "exact" } else { "WRONG" },
            gaps[0],
            gaps.last().unwrap(),
            steps.map_or("never".to_string(), |s| s.to_string())
        ),
    )
}

fn quantile_counts() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut lines = Vec::new();
    let mut pass = true;
    for n in [16usize, 100, 256] {
        // integer forms of N - ceil(0.7N) and floor(0.3(N - 1))
        let want = (n - (7 * n).div_ceil(10), 3 * (n - 1) / 10);
        for _ in 0..20 {
            let mut values: Vec<f64> = (0..n).map(|i| (i as f64 + rng.random_range(0.01..0.99)) / n as f64).collect();
            values.shuffle(&mut rng);
            let p = partition_values(&values, 0.7, 0.3).unwrap();
            pass &= (p.p_count(), p.n_count()) == want;
        }
        lines.push(format!("N={n}: |P|={} |N|={}", want.0, want.1));
    }
    verdict(pass, format!("{} (20 shuffles each, exact)", lines.join(", ")))
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_geoalign"))
}

fn bench_direction(dir: &Path) -> Verdict {
    let out = dir.join("bench.csv");
    let start = Instant::now();
    let status = bin()
        .args([
            "bench",
            "--scenes",
            &BENCH_SCENES.to_string(),
            "--seed",
            &BENCH_SEED.to_string(),
            "--profile",
            "facade-heavy",
            "--out",
        ])
        .arg(&out)
        .output()
        .expect("spawn bench");
    let secs = start.elapsed().as_secs_f64();
    if !status.status.success() {
        return verdict(false, format!("bench failed: {}", String::from_utf8_lossy(&status.stderr)));
    }
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let arms: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    let get = |arm: &str, name: &str| -> f64 { rows.iter().find(|r| r[0] == arm).unwrap()[col(name)].parse().unwrap() };
    let (r1_full, r1_base, ap_full, ap_base) = (get("full", "r_at_1"), get("base", "r_at_1"), get("full", "ap"), get("base", "ap"));
    verdict(
        arms == ["base", "mgsa", "mgsf", "full"] && r1_full >= r1_base && ap_full >= ap_base && secs < BENCH_BUDGET_S,
        format!(
            "one invocation, arms {arms:?}; R@1 full {r1_full:.3} vs base {r1_base:.3}, AP full {ap_full:.4} vs base {ap_base:.4} ({BENCH_SCENES} facade-heavy scenes, seed {BENCH_SEED}), {secs:.2} s (limit {BENCH_BUDGET_S} s)"
        ),
    )
}

/// Runs `args` twice, substituting `{}` with two different run directories,
/// and compares stdout and every file produced.
fn run_twice(root: &Path, name: &str, args: &[&str]) -> Result<(), String> {
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let dir = root.join(name).join(run);
        fs::create_dir_all(&dir).unwrap();
        let dir_s = dir.to_str().unwrap();
        let argv: Vec<String> = args.iter().map(|a| a.replace("{}", dir_s)).collect();
        let out = bin().args(&argv).output().map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{name}: {}", String::from_utf8_lossy(&out.stderr)));
        }
        let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(&dir)
            .unwrap()
            .map(|e| e.unwrap())
            .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
            .collect();
        files.sort();
        let stdout = String::from_utf8_lossy(&out.stdout).replace(dir_s, "{}");
        outputs.push((stdout, files));
    }
    if outputs[0].1.is_empty() {
        return Err(format!("{name}: no files written"));
    }
    if outputs[0] != outputs[1] {
        return Err(format!("{name}: outputs differ"));
    }
    Ok(())
}

fn determinism(root: &Path) -> Verdict {
    let spec = root.join("city.spec");
    fs::write(&spec, specfile::to_text(&box_city(5, &CityProfile::facade_heavy()))).unwrap();
    let spec_s = spec.to_str().unwrap().to_string();
    let inputs = root.join("inputs");
    let setup = bin().args(["synth", &spec_s]).arg(&inputs).output().unwrap();
    assert!(setup.status.success());
    let setup = bin()
        .args(["mask"])
        .arg(inputs.join("oblique.depth.geod"))
        .arg(inputs.join("m"))
        .output()
        .unwrap();
    assert!(setup.status.success());
    let depth = inputs.join("oblique.depth.geod").to_string_lossy().into_owned();
    let mask = inputs.join("m.mask.geod").to_string_lossy().into_owned();
    let labels = inputs.join("oblique.labels.geol").to_string_lossy().into_owned();
    let cases: Vec<(&str, Vec<&str>)> = vec![
        ("synth-oblique", vec!["synth", &spec_s, "{}", "--view", "oblique"]),
        ("synth-ortho", vec!["synth", &spec_s, "{}", "--view", "ortho"]),
        (
            "mask",
            vec!["mask", &depth, "{}/p", "--alpha", "4", "--beta", "-2", "--k", "3", "--seed", "9"],
        ),
        ("eval", vec!["eval", &mask, &labels, "--out", "{}/eval.csv"]),
        (
            "gradcheck",
            vec!["gradcheck", "--seed", "3", "--seeds", "2", "--out", "{}/grad.csv"],
        ),
        ("bench", vec!["bench", "--scenes", "8", "--seed", "2", "--out", "{}/bench.csv"]),
    ];
    let mut failures = Vec::new();
    for (name, args) in &cases {
        if let Err(e) = run_twice(root, name, args) {
            failures.push(e);
        }
    }
    verdict(
        failures.is_empty(),
        format!(
            "{} commands run twice, byte-identical files and stdout; failures: {failures:?}",
            cases.len()
        ),
    )
}

fn main() {
    // cargo passes libtest flags; only listing needs an answer
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let tmp = tempfile::TempDir::new().unwrap();
    let criteria: Vec<(&str, Box<dyn Fn() -> Verdict + '_>)> = vec![
        ("gradient check suite", Box::new(gradient_check)),
        ("dilated Sobel exactness", Box::new(sobel_exactness)),
        ("normal field correctness", Box::new(normal_field)),
        ("dominant normal vs brute force", Box::new(kmeans_oracle)),
        ("mask semantics on box cities", Box::new(mask_semantics)),
        ("edge neutrality and bounds", Box::new(edge_neutrality)),
        ("GACD arithmetic and dynamics", Box::new(gacd_dynamics)),
        ("quantile partition counts", Box::new(quantile_counts)),
        ("ablation direction", Box::new(|| bench_direction(tmp.path()))),
        ("CLI determinism", Box::new(|| determinism(tmp.path()))),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let v = run();
        failed += usize::from(!v.pass);
        println!(
            "criterion {:>2} {}: {} ({})",
            i + 1,
            if v.pass { "PASS" } else { "FAIL" },
            name,
            v.detail
        );
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
