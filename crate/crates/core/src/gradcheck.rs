//! Central-difference verification of taped gradients.
//!
//! Every check builds one or more scalar losses from a list of parameter
//! tensors, back-propagates them on a tape and compares the result against
//! `(L(p + ε e_i) − L(p − ε e_i)) / 2ε` on sampled coordinates `i`. The error
//! of a (loss, parameter) pair is
//!
//! ```text
//! max_i |a_i − n_i| / max(max_i |a_i|, max_i |n_i|, GRAD_FLOOR)
//! ```
//!
//! so a parameter group is judged against its own gradient scale.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::losses::{self, LossWeights};
use crate::mgsa::{self, MgsaParams, MgsaVars};
use crate::mgsf::{self, GateParams, Geometry, MgsfConfig};
use crate::retrieval::{self, ToyEncoder};
use crate::scene::{self, CityProfile};
use crate::tape::{Tape, Var};
use crate::tensor::{Grouping, Kernel2D, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
/// Gradient magnitudes below this are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Coordinates sampled per parameter tensor; smaller tensors are checked
    /// in full.
    pub samples: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            samples: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    /// Loss or operation the gradient was taken of.
    pub loss: String,
    pub param: String,
    pub max_rel_err: f64,
    pub coords: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub rows: Vec<CheckRow>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn offenders(&self, tol: f64) -> Vec<&CheckRow> {
        // NaN counts as a failure
        self.rows.iter().filter(|r| !(r.max_rel_err < tol)).collect()
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.offenders(tol).is_empty()
    }

    /// Keeps the worst error per (loss, param) across reports.
    pub fn merge(&mut self, other: GradCheckReport) {
        for row in other.rows {
            match self.rows.iter_mut().find(|r| r.loss == row.loss && r.param == row.param) {
                Some(r) => {
                    r.max_rel_err = worst(r.max_rel_err, row.max_rel_err);
                    r.coords += row.coords;
                }
                None => self.rows.push(row),
            }
        }
    }
}

fn worst(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}

/// Checks `build`, which maps parameter leaves to named scalar losses.
pub fn check<F>(params: &[(&str, Tensor)], build: F, cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Vec<(String, Var<'t>)>>,
{
    if !(cfg.eps > 0.0) || cfg.samples == 0 {
        return Err(Error::invalid("gradcheck", "eps and samples must be positive"));
    }
    let values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();

    let tape = Tape::new();
    let leaves: Vec<Var<'_>> = values.iter().map(|t| tape.leaf(t.clone())).collect();
    let losses = build(&tape, &leaves)?;
    let mut analytic = Vec::with_capacity(losses.len());
    for (_, loss) in &losses {
        let grads = tape.backward(*loss)?;
        let per_param: Vec<Tensor> = leaves
            .iter()
            .map(|&l| {
                grads
                    .get(l)
                    .cloned()
                    .ok_or_else(|| Error::invalid("gradcheck", "leaf without gradient"))
            })
            .collect::<Result<_>>()?;
        analytic.push(per_param);
    }

    let evaluate = |vals: &[Tensor]| -> Result<Vec<f64>> {
        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        build(&tape, &leaves)?
            .iter()
            .map(|(_, l)| l.value().item().ok_or_else(|| Error::invalid("gradcheck", "loss is not a scalar")))
            .collect()
    };

    let mut rows = Vec::new();
    for (p, (pname, tensor)) in params.iter().enumerate() {
        let n = tensor.len();
        let coords: Vec<usize> = if n <= cfg.samples {
            (0..n).collect()
        } else {
            index::sample(rng, n, cfg.samples).into_vec()
        };
        // numeric[loss][coord]
        let mut numeric = vec![Vec::with_capacity(coords.len()); losses.len()];
        for &i in &coords {
            let mut vals = values.clone();
            let x0 = tensor.data()[i];
            vals[p].data_mut()[i] = x0 + cfg.eps;
            let up = evaluate(&vals)?;
            vals[p].data_mut()[i] = x0 - cfg.eps;
            let down = evaluate(&vals)?;
            for (l, (u, d)) in up.iter().zip(&down).enumerate() {
                numeric[l].push((u - d) / (2.0 * cfg.eps));
            }
        }
        for (l, (lname, _)) in losses.iter().enumerate() {
            let a: Vec<f64> = coords.iter().map(|&i| analytic[l][p].data()[i]).collect();
            rows.push(CheckRow {
                loss: lname.clone(),
                param: String::from(*pname),
                max_rel_err: relative_error(&a, &numeric[l]),
                coords: coords.len(),
            });
        }
    }
    Ok(GradCheckReport { rows })
}

/// Group-normalised error between analytic and numeric gradients.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic.iter().zip(numeric).fold(0.0f64, |m, (a, n)| {
        let d = (a - n).abs();
        if d.is_nan() {
            f64::NAN
        } else {
            m.max(d)
        }
    });
    diff / inf(analytic).max(inf(numeric)).max(GRAD_FLOOR)
}

fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Result<Tensor> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

/// Random values bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Result<Tensor> {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.random_range(0.2..1.5);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// `Σ w ⊙ y` with fixed random `w`, turning an op output into a scalar.
fn project<'t>(y: Var<'t>, rng_w: &Tensor) -> Result<Var<'t>> {
    Ok(y.mul(y.tape().constant(rng_w.clone()))?.sum())
}

/// Weights for [`project`] matching the output shape of `probe`.
fn weights_like(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Tensor> {
    randn(rng, shape.to_vec(), 1.0)
}

type OpCase = (&'static str, Vec<(&'static str, Tensor)>, Vec<usize>);

/// One check per differentiable operation of the tape.
pub fn op_suite(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    let x4 = |rng: &mut ChaCha8Rng| randn(rng, vec![2, 3, 6, 5], 1.0);

    let cases: Vec<OpCase> = vec![
        (
            "conv2d dense r=1",
            vec![("input", x4(&mut rng)?), ("kernel", randn(&mut rng, vec![4, 3, 3, 3], 0.5)?)],
            vec![2, 4, 6, 5],
        ),
        (
            "conv2d dense r=2",
            vec![("input", x4(&mut rng)?), ("kernel", randn(&mut rng, vec![2, 3, 3, 3], 0.5)?)],
            vec![2, 2, 6, 5],
        ),
        (
            "conv2d depthwise r=4",
            vec![("input", x4(&mut rng)?), ("kernel", randn(&mut rng, vec![3, 1, 3, 3], 0.5)?)],
            vec![2, 3, 6, 5],
        ),
        ("adaptive_avg_pool", vec![("input", x4(&mut rng)?)], vec![2, 3, 4, 3]),
        ("softmax", vec![("input", x4(&mut rng)?)], vec![2, 3, 6, 5]),
        ("sigmoid", vec![("input", x4(&mut rng)?)], vec![2, 3, 6, 5]),
        (
            "add/mul broadcast",
            vec![("a", x4(&mut rng)?), ("b", randn(&mut rng, vec![1, 1, 6, 5], 1.0)?)],
            vec![2, 3, 6, 5],
        ),
        ("masked_mean", vec![("input", x4(&mut rng)?)], vec![]),
        (
            "relu",
            vec![("input", away_from_zero(&mut rng, vec![2, 3, 6, 5])?)],
            vec![2, 3, 6, 5],
        ),
        (
            "abs",
            vec![("input", away_from_zero(&mut rng, vec![2, 3, 6, 5])?)],
            vec![2, 3, 6, 5],
        ),
        ("softplus", vec![("input", x4(&mut rng)?)], vec![2, 3, 6, 5]),
        ("mean_axis/select", vec![("input", x4(&mut rng)?)], vec![2, 1, 1, 5]),
        ("l2_normalize", vec![("input", x4(&mut rng)?)], vec![2, 3, 6, 5]),
    ];
    let mask: Vec<bool> = (0..2 * 3 * 6 * 5).map(|_| rng.random::<f64>() < 0.4).collect();

    for (name, params, out_shape) in cases {
        let w = if out_shape.is_empty() {
            Tensor::scalar(1.0)
        } else {
            weights_like(&mut rng, &out_shape)?
        };
        report.merge(check(&params, |_, v| op_loss(name, v, &mask, &w), cfg, &mut rng)?);
    }
    Ok(report)
}

fn op_loss<'t>(name: &'static str, v: &[Var<'t>], mask: &[bool], w: &Tensor) -> Result<Vec<(String, Var<'t>)>> {
    let y = match name {
        "conv2d dense r=1" => v[0].conv2d(v[1], 1, Grouping::Dense)?,
        "conv2d dense r=2" => v[0].conv2d(v[1], 2, Grouping::Dense)?,
        "conv2d depthwise r=4" => v[0].conv2d(v[1], 4, Grouping::Depthwise)?,
        "adaptive_avg_pool" => v[0].adaptive_avg_pool(4, 3)?,
        "softmax" => v[0].softmax(1)?,
        "sigmoid" => v[0].sigmoid(),
        "add/mul broadcast" => v[0].mul(v[1])?.add(v[1].scale(0.5))?.sub(v[0].add_scalar(0.3))?,
        "masked_mean" => v[0].masked_mean(mask)?,
        "relu" => v[0].relu(),
        "abs" => v[0].abs(),
        "softplus" => v[0].softplus(),
        "mean_axis/select" => v[0].mean_axis(1)?.add(v[0].select(1, 2)?)?.mean_axis(2)?,
        "l2_normalize" => v[0].l2_normalize(1)?,
        _ => return Err(Error::invalid("gradcheck", format!("unknown op case {name}"))),
    };
    Ok(vec![(String::from(name), project(y, w)?)])
}

/// Small end-to-end instance: encoder, scale fusion, gated mask and both
/// losses on an (oblique, ortho, other ortho) triplet of synthetic scenes.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub encoder: ToyEncoder,
    pub mgsa: MgsaParams,
    pub gate: GateParams,
    pub inputs: [Tensor; 3],
    pub depth_features: [Tensor; 3],
    pub geometry: [Geometry; 3],
    pub partition: losses::ActivationPartition,
    pub weights: LossWeights,
}

pub const SCENARIO_SIZE: usize = 12;

impl Scenario {
    pub fn new(seed: u64) -> Result<Self> {
        let size = SCENARIO_SIZE;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x67ad_c4ec);
        let profile = CityProfile::standard();
        let spec_a = scene::box_city(seed.wrapping_mul(2), &profile);
        let spec_b = scene::box_city(seed.wrapping_mul(2) + 1, &profile);
        let depths = [
            scene::render_oblique(&spec_a)?.0,
            scene::render_ortho(&spec_a)?.0,
            scene::render_ortho(&spec_b)?.0,
        ];
        let cfg = MgsfConfig::default();
        let inputs = [0, 1, 2].map(|i| retrieval::encoder_input(&depths[i], size));
        let depth_features = [0, 1, 2].map(|i| mgsf::depth_features(&depths[i], size, size, cfg.dilation));
        let geometry = [0, 1, 2].map(|i| Geometry::analyze(&depths[i], size, size, &cfg));
        let [i0, i1, i2] = inputs;
        let [f0, f1, f2] = depth_features;
        let [g0, g1, g2] = geometry;

        let inputs = [i0?, i1?, i2?];
        let mut encoder = ToyEncoder::new(rng.random(), retrieval::INPUT_CHANNELS, 4, 6)?;
        let mut draws = 1;
        while !clear_of_kinks(&encoder, &inputs, DEFAULT_EPS)? {
            if draws == MAX_ENCODER_DRAWS {
                return Err(Error::invalid("gradcheck", "no kink-free encoder draw for this seed"));
            }
            encoder = ToyEncoder::new(rng.random(), retrieval::INPUT_CHANNELS, 4, 6)?;
            draws += 1;
        }
        let channels = encoder.dim();
        let kernel = |rng: &mut ChaCha8Rng, r| Kernel2D::new(randn(rng, vec![channels, 1, 3, 3], 0.4)?, r, Grouping::Depthwise);
        let mid = kernel(&mut rng, mgsa::MID_DILATION)?;
        let far = kernel(&mut rng, mgsa::FAR_DILATION)?;
        let psi = randn(&mut rng, vec![mgsa::SCALES, 3, 1, 1], 0.5)?;
        let normal = Normal::new(0.0, 0.3).expect("positive std");
        let bias = [0; 3].map(|_| normal.sample(&mut rng));
        let mgsa = MgsaParams::new(mid, far, psi, bias)?;
        let gate = GateParams {
            alpha: 5.0 + normal.sample(&mut rng),
            beta: -2.5 + normal.sample(&mut rng),
        };
        let g0 = g0?;
        let partition = losses::partition_by_quantile(&g0.mask(gate)?, losses::DEFAULT_Q_HIGH, losses::DEFAULT_Q_LOW)?;
        let mut scenario = Self {
            encoder,
            mgsa,
            gate,
            inputs,
            depth_features: [f0?, f1?, f2?],
            geometry: [g0, g1?, g2?],
            partition,
            weights: LossWeights::default(),
        };
        // pick the margin so the hinge is active at the base point
        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = scenario.params().into_iter().map(|(_, t)| tape.leaf(t)).collect();
        let f = scenario.modulated(&tape, &leaves, 0)?;
        if !scenario.partition.is_degenerate() {
            let (v_roof, v_wall) = losses::aggregate_var(losses::activation_map_var(f)?, &scenario.partition)?;
            let gap = v_roof.value().item().unwrap_or(0.0) - v_wall.value().item().unwrap_or(0.0);
            scenario.weights.xi = scenario.weights.xi.max(gap + 0.5);
        }
        Ok(scenario)
    }

    /// Learnable parameters in the order [`Scenario::losses`] expects.
    pub fn params(&self) -> Vec<(&'static str, Tensor)> {
        let [w1, w2] = self.encoder.weights();
        vec![
            ("encoder.w1", w1.clone()),
            ("encoder.w2", w2.clone()),
            ("phi.mid", self.mgsa.mid().weights().clone()),
            ("phi.far", self.mgsa.far().weights().clone()),
            ("psi.weights", self.mgsa.psi_weights().clone()),
            ("psi.bias", self.mgsa.psi_bias().clone()),
            ("alpha", Tensor::new(vec![1, 1, 1, 1], vec![self.gate.alpha]).expect("one element")),
            ("beta", Tensor::new(vec![1, 1, 1, 1], vec![self.gate.beta]).expect("one element")),
        ]
    }

    fn modulated<'t>(&self, tape: &'t Tape, v: &[Var<'t>], i: usize) -> Result<Var<'t>> {
        let encoder = retrieval::EncoderVars { w1: v[0], w2: v[1] };
        let fusion = MgsaVars {
            mid: v[2],
            far: v[3],
            psi_weights: v[4],
            psi_bias: v[5],
        };
        let f = encoder.features(tape.constant(self.inputs[i].clone()))?;
        let f = fusion.forward(f, &self.depth_features[i])?;
        let mask = self.geometry[i].mask_var(v[6], v[7])?;
        mgsf::modulate_var(f, mask)
    }

    /// `[GACD, triplet, total]`.
    pub fn losses<'t>(&self, tape: &'t Tape, v: &[Var<'t>]) -> Result<Vec<(String, Var<'t>)>> {
        let feats = [0, 1, 2].map(|i| self.modulated(tape, v, i));
        let [fa, fp, fn_] = feats;
        let fa = fa?;
        let embed = |f: Var<'t>| -> Result<Var<'t>> { f.mean_axis(3)?.mean_axis(2)?.l2_normalize(1) };
        let gacd = losses::gacd_from_features_var(fa, &self.partition, self.weights.xi)?;
        let triplet = losses::soft_margin_triplet_var(embed(fa)?, embed(fp?)?, embed(fn_?)?, self.weights.triplet_gamma)?;
        let total = losses::total_loss_var(triplet, gacd, &self.weights)?;
        Ok(vec![
            (String::from("gacd"), gacd),
            (String::from("triplet"), triplet),
            (String::from("total"), total),
        ])
    }
}

/// Encoder redraws allowed while looking for a kink-free base point.
const MAX_ENCODER_DRAWS: usize = 64;

/// Whether every output ReLU pre-activation stays on one side of zero under
/// any single-weight perturbation of size `eps`. Central differences across
/// the kink measure neither one-sided derivative.
fn clear_of_kinks(encoder: &ToyEncoder, inputs: &[Tensor], eps: f64) -> Result<bool> {
    let [w1, w2] = encoder.weights();
    let (dim, hidden) = (w2.shape()[0], w2.shape()[1]);
    let w2_max: Vec<f64> = (0..dim)
        .map(|o| w2.data()[o * hidden..(o + 1) * hidden].iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .collect();
    for x in inputs {
        let [_, c, h, w] = x.dims4("gradcheck")?;
        let hid = crate::ops::conv2d_raw(x, w1, 1, Grouping::Dense)?.map(|v| 2.0 * crate::math::sigmoid(2.0 * v) - 1.0);
        let pre = crate::ops::conv2d_raw(&hid, w2, 1, Grouping::Dense)?;
        for y in 0..h {
            for xx in 0..w {
                // largest input the 3×3 window of this pixel sees
                let mut local = 0.0f64;
                for ci in 0..c {
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let yy = (y + dy).saturating_sub(1).min(h - 1);
                            let xs = (xx + dx).saturating_sub(1).min(w - 1);
                            local = local.max(x.at4(0, ci, yy, xs).abs());
                        }
                    }
                }
                for o in 0..dim {
                    let v = pre.at4(0, o, y, xx);
                    // a w2 step moves v by at most eps (|tanh| ≤ 1), a w1 step
                    // by at most eps·|w2[o, j]|·local
                    let margin = eps * 1.0f64.max(w2_max[o] * local);
                    if v != 0.0 && v.abs() <= margin {
                        return Ok(false);
                    }
                }
            }
        }
    }
    Ok(true)
}

pub fn scenario_suite(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let scenario = Scenario::new(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    check(&scenario.params(), |tape, v| scenario.losses(tape, v), cfg, &mut rng)
}

/// Op suite plus end-to-end scenario for one seed.
pub fn run(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut report = op_suite(seed, cfg)?;
    report.merge(scenario_suite(seed, cfg)?);
    Ok(report)
}

/// Worst error per row over `seeds`.
pub fn run_seeds(seeds: impl IntoIterator<Item = u64>, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::default();
    for seed in seeds {
        report.merge(run(seed, cfg).map_err(|e| Error::invalid("gradcheck", format!("seed {seed}: {e}")))?);
    }
    Ok(report)
}
