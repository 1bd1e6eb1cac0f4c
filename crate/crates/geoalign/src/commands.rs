//! Command implementations. Each returns the text meant for stdout; `main`
//! maps errors to exit codes.

use std::path::{Path, PathBuf};

use geoalign_core::gradcheck::{self, GradCheckConfig, GradCheckReport};
use geoalign_core::mgsf::{GateParams, GeoMask, Geometry, MgsfConfig};
use geoalign_core::retrieval::{self, recall_at_k, Ablation, Pipeline, RetrievalReport};
use geoalign_core::scene::{self, mask_quality, CityProfile, MaskQuality};

use crate::error::CliError;
use crate::formats;
use crate::fsio::{read, write_atomic};
use crate::specfile;

/// What a command prints, plus a failed check if there was one.
#[derive(Debug, Default)]
pub struct Output {
    pub stdout: String,
    pub failure: Option<CliError>,
}

impl From<String> for Output {
    fn from(stdout: String) -> Self {
        Self { stdout, failure: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    Ortho,
    Oblique,
}

impl View {
    pub fn name(self) -> &'static str {
        match self {
            View::Ortho => "ortho",
            View::Oblique => "oblique",
        }
    }
}

fn csv_text(header: &[&str], rows: &[Vec<String>]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| CliError::Format(format!("csv: {e}"));
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Format(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv of ASCII fields"))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Output files of `synth`, in write order.
pub fn synth_paths(out_dir: &Path, view: View) -> [PathBuf; 3] {
    [
        out_dir.join(format!("{}.depth.geod", view.name())),
        out_dir.join(format!("{}.labels.geol", view.name())),
        out_dir.join("scene.spec"),
    ]
}

pub fn synth(spec_path: &Path, out_dir: &Path, view: View) -> Result<Output, CliError> {
    let raw = read(spec_path)?;
    let text = String::from_utf8(raw.clone()).map_err(|_| CliError::Format(format!("{}: not UTF-8", spec_path.display())))?;
    let spec = specfile::parse(&text, spec_path)?;
    let (depth, labels) = match view {
        View::Ortho => scene::render_ortho(&spec)?,
        View::Oblique => scene::render_oblique(&spec)?,
    };
    ensure_dir(out_dir)?;
    let [d, l, s] = synth_paths(out_dir, view);
    write_atomic(&d, &formats::encode_depth(&depth))?;
    write_atomic(&l, &formats::encode_labels(&labels))?;
    write_atomic(&s, &raw)?;
    Ok(format!("{}\n{}\n{}\n", d.display(), l.display(), s.display()).into())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskOptions {
    pub gate: GateParams,
    pub config: MgsfConfig,
    /// Side of the square grid the depth is pooled to; `None` keeps the
    /// raster resolution.
    pub size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskStats {
    pub n_dom: [f64; 3],
    pub tau_grad: f64,
    pub edge_count: usize,
    pub flat_count: usize,
    pub mask_mean: f64,
    pub mask_min: f64,
    pub mask_max: f64,
}

pub const STATS_HEADER: [&str; 9] = [
    "n_dom_x",
    "n_dom_y",
    "n_dom_z",
    "tau_grad",
    "edge_count",
    "flat_count",
    "mask_mean",
    "mask_min",
    "mask_max",
];

impl MaskStats {
    fn row(&self) -> Vec<String> {
        let mut r: Vec<String> = self.n_dom.iter().map(|v| v.to_string()).collect();
        r.push(self.tau_grad.to_string());
        r.push(self.edge_count.to_string());
        r.push(self.flat_count.to_string());
        for v in [self.mask_mean, self.mask_min, self.mask_max] {
            r.push(v.to_string());
        }
        r
    }
}

pub fn mask_paths(prefix: &Path) -> [PathBuf; 3] {
    let with = |suffix: &str| {
        let mut s = prefix.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    [with(".mask.geod"), with(".mask.pgm"), with(".stats.csv")]
}

pub fn compute_mask(depth_path: &Path, opts: &MaskOptions) -> Result<(GeoMask, MaskStats), CliError> {
    let depth = formats::decode_depth(&read(depth_path)?).map_err(|e| CliError::Format(format!("{}: {e}", depth_path.display())))?;
    let (h, w) = match opts.size {
        Some(s) => (s, s),
        None => (depth.height(), depth.width()),
    };
    let g = Geometry::analyze(&depth, h, w, &opts.config)?;
    let mask = g.mask(opts.gate)?;
    let v = mask.values();
    let stats = MaskStats {
        n_dom: g.n_dom,
        tau_grad: g.partition.tau_grad(),
        edge_count: g.partition.edge_count(),
        flat_count: g.partition.flat_count(),
        mask_mean: v.iter().sum::<f64>() / v.len() as f64,
        mask_min: v.iter().copied().fold(f64::INFINITY, f64::min),
        mask_max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    Ok((mask, stats))
}

pub fn mask(depth_path: &Path, prefix: &Path, opts: &MaskOptions) -> Result<Output, CliError> {
    let (mask, stats) = compute_mask(depth_path, opts)?;
    if let Some(dir) = prefix.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    let csv = csv_text(&STATS_HEADER, &[stats.row()])?;
    let [m, p, s] = mask_paths(prefix);
    write_atomic(&m, &formats::encode_raster(mask.height(), mask.width(), mask.values()))?;
    write_atomic(&p, &formats::encode_mask_pgm(&mask))?;
    write_atomic(&s, csv.as_bytes())?;
    Ok(csv.into())
}

pub const EVAL_HEADER: [&str; 7] = [
    "balanced_accuracy",
    "horizontal_recall",
    "facade_recall",
    "mean_ground",
    "mean_roof",
    "mean_facade",
    "evaluated",
];

pub fn evaluate_files(mask_path: &Path, label_path: &Path) -> Result<MaskQuality, CliError> {
    let (h, w, values) =
        formats::decode_raster(&read(mask_path)?).map_err(|e| CliError::Format(format!("{}: {e}", mask_path.display())))?;
    let mask = GeoMask::from_values(h, w, values).map_err(|e| CliError::Format(format!("{}: {e}", mask_path.display())))?;
    let labels = formats::decode_labels(&read(label_path)?).map_err(|e| CliError::Format(format!("{}: {e}", label_path.display())))?;
    Ok(mask_quality(&mask, &labels)?)
}

/// Scores a mask file; accuracy below `min_accuracy` is a failed check.
pub fn eval(mask_path: &Path, label_path: &Path, min_accuracy: Option<f64>, out: Option<&Path>) -> Result<Output, CliError> {
    let q = evaluate_files(mask_path, label_path)?;
    let row = [
        q.balanced_accuracy,
        q.horizontal_recall,
        q.facade_recall,
        q.mean_ground,
        q.mean_roof,
        q.mean_facade,
    ]
    .iter()
    .map(|v| v.to_string())
    .chain([q.evaluated.to_string()])
    .collect();
    let csv = csv_text(&EVAL_HEADER, &[row])?;
    if let Some(path) = out {
        write_atomic(path, csv.as_bytes())?;
    }
    let failure = match min_accuracy {
        Some(t) if !(q.balanced_accuracy >= t) => Some(CliError::CheckFailed(format!(
            "balanced accuracy {} is below {t}",
            q.balanced_accuracy
        ))),
        _ => None,
    };
    Ok(Output { stdout: csv, failure })
}

pub fn gradcheck_table(report: &GradCheckReport, tol: f64) -> Result<String, CliError> {
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            let ok = r.max_rel_err < tol;
            vec![
                r.loss.clone(),
                r.param.clone(),
                r.coords.to_string(),
                format!("{:.3e}", r.max_rel_err),
                if ok { "pass" } else { "FAIL" }.to_string(),
            ]
        })
        .collect();
    csv_text(&["loss", "param", "coords", "max_rel_err", "status"], &rows)
}

/// Runs the finite-difference suite for `seeds` consecutive seeds.
pub fn gradcheck(seed: u64, seeds: u64, eps: f64, tol: f64, out: Option<&Path>) -> Result<Output, CliError> {
    if !(eps > 0.0 && eps.is_finite()) || !(tol > 0.0) || seeds == 0 {
        return Err(CliError::Usage("--eps and --tol must be positive and --seeds at least 1".into()));
    }
    let cfg = GradCheckConfig {
        eps,
        ..GradCheckConfig::default()
    };
    let report = gradcheck::run_seeds(seed..seed + seeds, &cfg)?;
    let table = gradcheck_table(&report, tol)?;
    if let Some(path) = out {
        write_atomic(path, table.as_bytes())?;
    }
    let offenders = report.offenders(tol);
    let failure = (!offenders.is_empty()).then(|| {
        let list: Vec<String> = offenders
            .iter()
            .map(|r| format!("{}/{} ({:.3e})", r.loss, r.param, r.max_rel_err))
            .collect();
        CliError::CheckFailed(format!("{} check(s) above tol {tol}: {}", list.len(), list.join(", ")))
    });
    Ok(Output { stdout: table, failure })
}

pub const BENCH_HEADER: [&str; 8] = ["arm", "scenes", "seed", "r_at_1", "r_at_5", "r_at_10", "ap", "mean_rank"];

fn bench_row(n: usize, seed: u64, r: &RetrievalReport) -> Result<Vec<String>, CliError> {
    let mut row = vec![r.ablation.name().to_string(), n.to_string(), seed.to_string()];
    for k in [1, 5, 10] {
        // with fewer scenes than K every query is trivially within the top K
        row.push(recall_at_k(&r.per_query_ranks, k.min(n))?.to_string());
    }
    row.push(r.ap.to_string());
    let mean_rank = r.per_query_ranks.iter().sum::<usize>() as f64 / n as f64;
    row.push(mean_rank.to_string());
    Ok(row)
}

/// Reports for the chosen arms (all four when `arms` is empty), sharing
/// one set of scenes and one seeded pipeline.
pub fn bench_reports(scenes: usize, seed: u64, arms: &[Ablation], profile: &CityProfile) -> Result<Vec<RetrievalReport>, CliError> {
    if scenes < 2 {
        return Err(CliError::Usage(format!("--scenes must be at least 2, got {scenes}")));
    }
    let pairs = retrieval::scene_pairs(scenes, seed, profile)?;
    let pipeline = Pipeline::seeded(seed)?;
    let all: Vec<Ablation> = Ablation::ALL.iter().map(|(_, a)| *a).collect();
    let arms = if arms.is_empty() { &all[..] } else { arms };
    arms.iter().map(|&a| Ok(retrieval::evaluate(&pipeline, &pairs, a)?)).collect()
}

pub fn bench(scenes: usize, seed: u64, arms: &[Ablation], profile: &CityProfile, out: Option<&Path>) -> Result<Output, CliError> {
    let reports = bench_reports(scenes, seed, arms, profile)?;
    let rows = reports.iter().map(|r| bench_row(scenes, seed, r)).collect::<Result<Vec<_>, _>>()?;
    let csv = csv_text(&BENCH_HEADER, &rows)?;
    if let Some(path) = out {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            ensure_dir(dir)?;
        }
        write_atomic(path, csv.as_bytes())?;
    }
    Ok(csv.into())
}
