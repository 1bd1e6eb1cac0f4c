//! Geometric ranking hinge and the retrieval triplet loss.
//!
//! The geometric mask splits pixels into a confident set (mask above its
//! upper quantile) and an occlusion set (below the lower quantile). The
//! hinge asks the mean feature activation on the first to exceed the mean on
//! the second by a margin. It is combined with a soft-margin triplet loss on
//! unit embeddings.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::mgsf::GeoMask;
use crate::quantile;
use crate::tape::Var;
use crate::tensor::Tensor;

pub const DEFAULT_Q_HIGH: f64 = 0.7;
pub const DEFAULT_Q_LOW: f64 = 0.3;

/// Tolerance on `‖e‖ = 1` for triplet inputs.
pub const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationPartition {
    /// Pixels with mask strictly above `tau_high`.
    pub p_set: Vec<bool>,
    /// Pixels with mask strictly below `tau_low`.
    pub n_set: Vec<bool>,
    pub tau_high: f64,
    pub tau_low: f64,
}

impl ActivationPartition {
    pub fn p_count(&self) -> usize {
        self.p_set.iter().filter(|&&b| b).count()
    }

    pub fn n_count(&self) -> usize {
        self.n_set.iter().filter(|&&b| b).count()
    }

    pub fn is_degenerate(&self) -> bool {
        self.p_count() == 0 || self.n_count() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GacdReport {
    pub v_roof: f64,
    pub v_wall: f64,
    pub loss: f64,
    pub xi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_geo: f64,
    pub xi: f64,
    pub triplet_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_geo: 1.0,
            xi: 0.5,
            triplet_gamma: 10.0,
        }
    }
}

/// Splits mask pixels by the `q_high` and `q_low` quantiles of its values.
pub fn partition_by_quantile(mask: &GeoMask, q_high: f64, q_low: f64) -> Result<ActivationPartition> {
    partition_values(mask.values(), q_high, q_low)
}

/// [`partition_by_quantile`] on a bare slice.
pub fn partition_values(values: &[f64], q_high: f64, q_low: f64) -> Result<ActivationPartition> {
    if !(0.0 < q_low && q_low <= q_high && q_high < 1.0) {
        return Err(Error::invalid(
            "partition_by_quantile",
            format!("need 0 < q_low ≤ q_high < 1, got q_low={q_low}, q_high={q_high}"),
        ));
    }
    let tau_high = quantile::quantile(values, q_high);
    let tau_low = quantile::quantile(values, q_low);
    Ok(ActivationPartition {
        p_set: values.iter().map(|&v| v > tau_high).collect(),
        n_set: values.iter().map(|&v| v < tau_low).collect(),
        tau_high,
        tau_low,
    })
}

/// Channel mean of `|F|`, `B×1×H×W`.
pub fn activation_map(f: &Tensor) -> Result<Tensor> {
    f.dims4("activation_map")?;
    crate::ops::mean_axis(&f.map(f64::abs), 1)
}

pub fn activation_map_var(f: Var<'_>) -> Result<Var<'_>> {
    f.abs().mean_axis(1)
}

/// Repeats a per-pixel mask over the batch of `a_sem` (`B×1×H×W`).
fn batch_mask(a_sem: &Tensor, mask: &[bool], op: &'static str) -> Result<Vec<bool>> {
    let n = a_sem.len();
    if mask.is_empty() || n % mask.len() != 0 {
        return Err(Error::ShapeMismatch {
            op,
            left: a_sem.shape().to_vec(),
            right: alloc::vec![mask.len()],
        });
    }
    Ok(mask.iter().copied().cycle().take(n).collect())
}

/// `(mean over 𝒫, mean over 𝒩)`; either set empty is an error.
pub fn aggregate(a_sem: &Tensor, part: &ActivationPartition) -> Result<(f64, f64)> {
    let mean = |set: &[bool]| -> Result<f64> {
        let m = batch_mask(a_sem, set, "aggregate")?;
        let (sum, count) = a_sem
            .data()
            .iter()
            .zip(&m)
            .filter(|(_, &b)| b)
            .fold((0.0, 0usize), |(s, c), (v, _)| (s + v, c + 1));
        if count == 0 {
            return Err(Error::EmptyPartition { op: "aggregate" });
        }
        Ok(sum / count as f64)
    };
    Ok((mean(&part.p_set)?, mean(&part.n_set)?))
}

pub fn aggregate_var<'t>(a_sem: Var<'t>, part: &ActivationPartition) -> Result<(Var<'t>, Var<'t>)> {
    let value = a_sem.value();
    let p = batch_mask(&value, &part.p_set, "aggregate")?;
    let n = batch_mask(&value, &part.n_set, "aggregate")?;
    Ok((a_sem.masked_mean(&p)?, a_sem.masked_mean(&n)?))
}

/// `max(0, ξ + v_wall − v_roof)`.
pub fn gacd_loss(v_roof: f64, v_wall: f64, xi: f64) -> f64 {
    (xi + v_wall - v_roof).max(0.0)
}

pub fn gacd_report(v_roof: f64, v_wall: f64, xi: f64) -> GacdReport {
    GacdReport {
        v_roof,
        v_wall,
        loss: gacd_loss(v_roof, v_wall, xi),
        xi,
    }
}

pub fn gacd_var<'t>(v_roof: Var<'t>, v_wall: Var<'t>, xi: f64) -> Result<Var<'t>> {
    Ok(v_wall.sub(v_roof)?.add_scalar(xi).relu())
}

/// Full hinge from features and mask; `None` when the partition is
/// degenerate and the sample carries no geometric evidence.
pub fn gacd_from_features(f: &Tensor, mask: &GeoMask, xi: f64) -> Result<Option<GacdReport>> {
    let part = partition_by_quantile(mask, DEFAULT_Q_HIGH, DEFAULT_Q_LOW)?;
    if part.is_degenerate() {
        return Ok(None);
    }
    let (v_roof, v_wall) = aggregate(&activation_map(f)?, &part)?;
    Ok(Some(gacd_report(v_roof, v_wall, xi)))
}

/// Taped hinge; a degenerate partition yields a constant zero.
pub fn gacd_from_features_var<'t>(f: Var<'t>, part: &ActivationPartition, xi: f64) -> Result<Var<'t>> {
    if part.is_degenerate() {
        return Ok(f.tape().constant(Tensor::scalar(0.0)));
    }
    let (v_roof, v_wall) = aggregate_var(activation_map_var(f)?, part)?;
    gacd_var(v_roof, v_wall, xi)
}

fn check_unit(e: &[f64], name: &str) -> Result<()> {
    let n = math::sqrt(e.iter().map(|v| v * v).sum());
    if (n - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::invalid(
            "soft_margin_triplet",
            format!("{name} embedding must be unit length, got norm {n}"),
        ));
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `ln(1 + exp(γ·(‖a − p‖² − ‖a − n‖²)))` on unit embeddings.
pub fn soft_margin_triplet(anchor: &[f64], positive: &[f64], negative: &[f64], gamma: f64) -> Result<f64> {
    if anchor.len() != positive.len() || anchor.len() != negative.len() {
        return Err(Error::ShapeMismatch {
            op: "soft_margin_triplet",
            left: alloc::vec![anchor.len()],
            right: alloc::vec![positive.len(), negative.len()],
        });
    }
    if !(gamma > 0.0) {
        return Err(Error::invalid("soft_margin_triplet", "gamma must be positive"));
    }
    check_unit(anchor, "anchor")?;
    check_unit(positive, "positive")?;
    check_unit(negative, "negative")?;
    Ok(math::softplus(gamma * (sq_dist(anchor, positive) - sq_dist(anchor, negative))))
}

/// Taped triplet on already-normalised embeddings of equal shape.
pub fn soft_margin_triplet_var<'t>(anchor: Var<'t>, positive: Var<'t>, negative: Var<'t>, gamma: f64) -> Result<Var<'t>> {
    let dp = anchor.sub(positive)?;
    let dn = anchor.sub(negative)?;
    let d_pos = dp.mul(dp)?.sum();
    let d_neg = dn.mul(dn)?.sum();
    Ok(d_pos.sub(d_neg)?.scale(gamma).softplus())
}

/// `triplet + λ·gacd`; with `λ = 0` the triplet value is returned untouched.
pub fn total_loss(triplet: f64, gacd: f64, w: &LossWeights) -> f64 {
    if w.lambda_geo == 0.0 {
        triplet
    } else {
        triplet + w.lambda_geo * gacd
    }
}

pub fn total_loss_var<'t>(triplet: Var<'t>, gacd: Var<'t>, w: &LossWeights) -> Result<Var<'t>> {
    if w.lambda_geo == 0.0 {
        Ok(triplet)
    } else {
        triplet.add(gacd.scale(w.lambda_geo))
    }
}
