//! Macro-geometric structure filtering.
//!
//! A depth map is pooled to feature resolution, differentiated with a
//! dilated Sobel pair, and turned into unit surface normals. Pixels with a
//! large gradient are set aside as ambiguous edges; the remaining normals are
//! clustered and the centroid of the biggest cluster becomes the dominant
//! plane direction. Cosine similarity to that direction, squashed by a
//! learnable sigmoid gate, yields an attention mask that is pinned to 0.5 on
//! edges and applied to the features as `F ⊙ (1 + M)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::ops;
use crate::quantile;
use crate::tape::Var;
use crate::tensor::{Kernel2D, Tensor};

mod kmeans;

pub use kmeans::Vec3;

/// Neutral mask value assigned to ambiguous edge pixels.
pub const EDGE_VALUE: f64 = 0.5;

const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// Row-major depth raster. Values are relative and scale-free.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl DepthMap {
    /// Requires `height, width ≥ 3` and finite values.
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height < 3 || width < 3 {
            return Err(Error::invalid(
                "depth map",
                format!("raster must be at least 3×3, got {height}×{width}"),
            ));
        }
        if values.len() != height * width {
            return Err(Error::DataLength {
                shape: vec![height, width],
                expected: height * width,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "depth map" });
        }
        Ok(Self { height, width, values })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(f(y, x));
            }
        }
        Self::new(height, width, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.height, self.width, self.values.iter().map(|v| v * factor).collect())
    }

    /// `1×1×H×W` view.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_raster(self.height, self.width, self.values.clone()).expect("dimensions checked at construction")
    }
}

/// Per-pixel unit surface normals with positive `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalField {
    height: usize,
    width: usize,
    normals: Vec<Vec3>,
}

impl NormalField {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn normals(&self) -> &[Vec3] {
        &self.normals
    }

    pub fn get(&self, y: usize, x: usize) -> Vec3 {
        self.normals[y * self.width + x]
    }
}

/// Split of the raster into ambiguous edges and flat candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgePartition {
    height: usize,
    width: usize,
    is_edge: Vec<bool>,
    tau_grad: f64,
    magnitude: Vec<f64>,
}

impl EdgePartition {
    /// Row-major edge flags.
    pub fn is_edge(&self) -> &[bool] {
        &self.is_edge
    }

    /// Gradient threshold; `-∞` when every pixel counts as an edge.
    pub fn tau_grad(&self) -> f64 {
        self.tau_grad
    }

    pub fn magnitude(&self) -> &[f64] {
        &self.magnitude
    }

    pub fn edges(&self) -> impl Iterator<Item = usize> + '_ {
        self.is_edge.iter().enumerate().filter(|(_, &e)| e).map(|(i, _)| i)
    }

    pub fn flat(&self) -> impl Iterator<Item = usize> + '_ {
        self.is_edge.iter().enumerate().filter(|(_, &e)| !e).map(|(i, _)| i)
    }

    pub fn edge_count(&self) -> usize {
        self.is_edge.iter().filter(|&&e| e).count()
    }

    pub fn flat_count(&self) -> usize {
        self.is_edge.len() - self.edge_count()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// Geometric attention mask in `(0, 1)`, exactly 0.5 on edges.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoMask {
    height: usize,
    width: usize,
    values: Vec<f64>,
    edges: Vec<bool>,
}

impl GeoMask {
    /// Mask from stored values, e.g. one read back from disk. Values must
    /// lie in `[0, 1]`; pixels at exactly 0.5 are taken as the edge set.
    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::DataLength {
                shape: vec![height, width],
                expected: height * width,
                actual: values.len(),
            });
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid("mask", format!("value {v} outside [0, 1]")));
        }
        let edges = values.iter().map(|&v| v == EDGE_VALUE).collect();
        Ok(Self {
            height,
            width,
            values,
            edges,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn edge_set(&self) -> &[bool] {
        &self.edges
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_raster(self.height, self.width, self.values.clone()).expect("dimensions checked at construction")
    }
}

/// Scale and bias of the sigmoid gate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateParams {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for GateParams {
    /// Maps a consistency of 0.5 to a mask value of 0.5.
    fn default() -> Self {
        Self { alpha: 5.0, beta: -2.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MgsfConfig {
    pub dilation: usize,
    /// Quantile of the gradient magnitude above which pixels are edges.
    pub tau_grad_quantile: f64,
    pub kmeans_k: usize,
    pub kmeans_seed: u64,
    pub kmeans_iters: usize,
}

impl Default for MgsfConfig {
    fn default() -> Self {
        Self {
            dilation: 2,
            tau_grad_quantile: 0.85,
            kmeans_k: 3,
            kmeans_seed: 0,
            kmeans_iters: 50,
        }
    }
}

impl MgsfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dilation == 0 {
            return Err(Error::invalid("mgsf config", "dilation must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.tau_grad_quantile) {
            return Err(Error::invalid(
                "mgsf config",
                format!("tau_grad_quantile must lie in [0, 1), got {}", self.tau_grad_quantile),
            ));
        }
        if self.kmeans_k < 2 {
            return Err(Error::invalid("mgsf config", "kmeans_k must be at least 2"));
        }
        if self.kmeans_iters == 0 {
            return Err(Error::invalid("mgsf config", "kmeans_iters must be at least 1"));
        }
        Ok(())
    }
}

/// Average-pools the depth map down to `h×w`.
pub fn align_depth(d: &DepthMap, h: usize, w: usize) -> Result<DepthMap> {
    let pooled = ops::adaptive_avg_pool(&d.to_tensor(), h, w)?;
    DepthMap::new(h, w, pooled.into_data())
}

/// Dilated Sobel gradients normalised by `8r`, so a ramp of slope `a`
/// reads `a` away from the border. Both outputs are `1×1×H×W`.
pub fn macro_gradient(d: &DepthMap, r: usize) -> Result<(Tensor, Tensor)> {
    if r == 0 {
        return Err(Error::invalid("macro_gradient", "dilation must be at least 1"));
    }
    let need = 2 * r + 1;
    if d.height < need || d.width < need {
        return Err(Error::invalid(
            "macro_gradient",
            format!("raster {}×{} is smaller than the {need}×{need} dilated kernel", d.height, d.width),
        ));
    }
    // Sobel as [1 2 1] smoothing of centred differences; differencing first
    // keeps constant regions exactly zero.
    let (h, w) = (d.height as isize, d.width as isize);
    let r = r as isize;
    let at = |y: isize, x: isize| d.get(y.clamp(0, h - 1) as usize, x.clamp(0, w - 1) as usize);
    let norm = 1.0 / (8 * r) as f64;
    let mut gx = Vec::with_capacity(d.values.len());
    let mut gy = Vec::with_capacity(d.values.len());
    for y in 0..h {
        for x in 0..w {
            let dx = |yy: isize| at(yy, x + r) - at(yy, x - r);
            let dy = |xx: isize| at(y + r, xx) - at(y - r, xx);
            gx.push((dx(y - r) + 2.0 * dx(y) + dx(y + r)) * norm);
            gy.push((dy(x - r) + 2.0 * dy(x) + dy(x + r)) * norm);
        }
    }
    Ok((
        Tensor::from_raster(d.height, d.width, gx)?,
        Tensor::from_raster(d.height, d.width, gy)?,
    ))
}

/// The two Sobel kernels at dilation `r`, unnormalised.
pub fn sobel_kernels(r: usize) -> Result<(Kernel2D, Kernel2D)> {
    Ok((Kernel2D::shared(3, SOBEL_X.to_vec(), r)?, Kernel2D::shared(3, SOBEL_Y.to_vec(), r)?))
}

fn raster_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        &[1, 1, h, w] | &[h, w] => Ok((h, w)),
        s => Err(Error::invalid(op, format!("expected a single-channel raster, got shape {s:?}"))),
    }
}

fn same_raster(a: &Tensor, b: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let da = raster_dims(a, op)?;
    if da != raster_dims(b, op)? {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(da)
}

/// `n = (−g_x, −g_y, 1) / ‖·‖`.
pub fn compute_normals(gx: &Tensor, gy: &Tensor) -> Result<NormalField> {
    let (height, width) = same_raster(gx, gy, "compute_normals")?;
    let normals = gx
        .data()
        .iter()
        .zip(gy.data())
        .map(|(&a, &b)| {
            let n = math::sqrt(a * a + b * b + 1.0);
            [-a / n, -b / n, 1.0 / n]
        })
        .collect();
    Ok(NormalField { height, width, normals })
}

/// Pixels whose gradient magnitude strictly exceeds the configured quantile
/// are edges.
pub fn partition_edges(gx: &Tensor, gy: &Tensor, cfg: &MgsfConfig) -> Result<EdgePartition> {
    let (height, width) = same_raster(gx, gy, "partition_edges")?;
    let magnitude: Vec<f64> = gx.data().iter().zip(gy.data()).map(|(&a, &b)| math::sqrt(a * a + b * b)).collect();
    let tau_grad = quantile::quantile(&magnitude, cfg.tau_grad_quantile);
    let is_edge = magnitude.iter().map(|&m| m > tau_grad).collect();
    Ok(EdgePartition {
        height,
        width,
        is_edge,
        tau_grad,
        magnitude,
    })
}

fn normalize3(v: Vec3) -> Vec3 {
    let n = math::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    if n == 0.0 {
        [0.0, 0.0, 1.0]
    } else {
        [v[0] / n, v[1] / n, v[2] / n]
    }
}

/// Dominant plane normal among the flat pixels.
///
/// Fewer flat pixels than clusters falls back to their mean normal, and an
/// empty flat set to the horizontal `(0, 0, 1)`.
pub fn dominant_normal(nf: &NormalField, part: &EdgePartition, cfg: &MgsfConfig) -> Result<Vec3> {
    if (nf.height, nf.width) != part.dims() {
        return Err(Error::ShapeMismatch {
            op: "dominant_normal",
            left: vec![nf.height, nf.width],
            right: vec![part.height, part.width],
        });
    }
    let points: Vec<Vec3> = part.flat().map(|i| nf.normals[i]).collect();
    Ok(cluster_dominant(&points, cfg))
}

/// Dominant direction of an arbitrary set of unit normals.
pub fn cluster_dominant(points: &[Vec3], cfg: &MgsfConfig) -> Vec3 {
    if points.len() < cfg.kmeans_k {
        let mut sum = [0.0; 3];
        for p in points {
            for d in 0..3 {
                sum[d] += p[d];
            }
        }
        return normalize3(sum);
    }
    let c = kmeans::kmeans(points, cfg.kmeans_k, cfg.kmeans_seed, cfg.kmeans_iters);
    normalize3(c.centroids[kmeans::largest_cluster(&c.counts, &c.centroids)])
}

/// Per-pixel cosine similarity to `n_dom`, as a `1×1×H×W` tensor.
pub fn geo_consistency(nf: &NormalField, n_dom: Vec3) -> Result<Tensor> {
    let len = math::sqrt(n_dom.iter().map(|v| v * v).sum());
    if (len - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(
            "geo_consistency",
            format!("n_dom must be unit length, got norm {len}"),
        ));
    }
    let data = nf
        .normals
        .iter()
        .map(|n| n[0] * n_dom[0] + n[1] * n_dom[1] + n[2] * n_dom[2])
        .collect();
    Tensor::from_raster(nf.height, nf.width, data)
}

/// `σ(α·C + β)` elementwise.
pub fn adaptive_gate(c_geo: &Tensor, gp: GateParams) -> Tensor {
    c_geo.map(|c| math::sigmoid(gp.alpha * c + gp.beta))
}

/// Taped gate; `alpha` and `beta` are rank-4 `1×1×1×1` variables.
pub fn adaptive_gate_var<'t>(c_geo: Var<'t>, alpha: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
    Ok(c_geo.mul(alpha)?.add(beta)?.sigmoid())
}

/// Replaces mask values on edge pixels with 0.5.
pub fn rectify_edges(m_raw: &Tensor, part: &EdgePartition) -> Result<GeoMask> {
    let (height, width) = raster_dims(m_raw, "rectify_edges")?;
    if (height, width) != part.dims() {
        return Err(Error::ShapeMismatch {
            op: "rectify_edges",
            left: m_raw.shape().to_vec(),
            right: vec![part.height, part.width],
        });
    }
    let values = m_raw
        .data()
        .iter()
        .zip(&part.is_edge)
        .map(|(&m, &e)| if e { EDGE_VALUE } else { m })
        .collect();
    Ok(GeoMask {
        height,
        width,
        values,
        edges: part.is_edge.clone(),
    })
}

/// Taped edge reset: `m ⊙ keep + 0.5 ⊙ edge` with constant indicator rasters.
pub fn rectify_edges_var<'t>(m_raw: Var<'t>, part: &EdgePartition) -> Result<Var<'t>> {
    let tape = m_raw.tape();
    let (h, w) = part.dims();
    let keep = Tensor::from_raster(h, w, part.is_edge.iter().map(|&e| if e { 0.0 } else { 1.0 }).collect())?;
    let fill = Tensor::from_raster(h, w, part.is_edge.iter().map(|&e| if e { EDGE_VALUE } else { 0.0 }).collect())?;
    m_raw.mul(tape.constant(keep))?.add(tape.constant(fill))
}

fn check_feature_dims(f: &Tensor, h: usize, w: usize, op: &'static str) -> Result<()> {
    let [_, _, fh, fw] = f.dims4(op)?;
    if (fh, fw) != (h, w) {
        return Err(Error::ShapeMismatch {
            op,
            left: f.shape().to_vec(),
            right: vec![h, w],
        });
    }
    Ok(())
}

/// `F ⊙ (1 + M)` with the mask broadcast over batch and channels.
pub fn modulate(f_u: &Tensor, mask: &GeoMask) -> Result<Tensor> {
    check_feature_dims(f_u, mask.height, mask.width, "modulate")?;
    let plane = mask.height * mask.width;
    let mut out = f_u.clone();
    for chunk in out.data_mut().chunks_mut(plane) {
        for (v, m) in chunk.iter_mut().zip(&mask.values) {
            *v *= 1.0 + m;
        }
    }
    Ok(out)
}

/// Taped modulation; `mask` is a `1×1×H×W` variable.
pub fn modulate_var<'t>(f_u: Var<'t>, mask: Var<'t>) -> Result<Var<'t>> {
    f_u.mul(mask.add_scalar(1.0))
}

/// Everything derived from depth before the gate.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub depth: DepthMap,
    pub gx: Tensor,
    pub gy: Tensor,
    pub normals: NormalField,
    pub partition: EdgePartition,
    pub n_dom: Vec3,
    pub c_geo: Tensor,
}

impl Geometry {
    /// Aligns `d_raw` to `h×w` and runs gradient, normal, partition,
    /// clustering and consistency stages.
    pub fn analyze(d_raw: &DepthMap, h: usize, w: usize, cfg: &MgsfConfig) -> Result<Self> {
        cfg.validate()?;
        let depth = align_depth(d_raw, h, w)?;
        let (gx, gy) = macro_gradient(&depth, cfg.dilation)?;
        let normals = compute_normals(&gx, &gy)?;
        let partition = partition_edges(&gx, &gy, cfg)?;
        let n_dom = dominant_normal(&normals, &partition, cfg)?;
        let c_geo = geo_consistency(&normals, n_dom)?;
        Ok(Self {
            depth,
            gx,
            gy,
            normals,
            partition,
            n_dom,
            c_geo,
        })
    }

    pub fn mask(&self, gp: GateParams) -> Result<GeoMask> {
        rectify_edges(&adaptive_gate(&self.c_geo, gp), &self.partition)
    }

    /// Taped mask with learnable `alpha` and `beta` (`1×1×1×1`). Depth
    /// geometry enters as a constant.
    pub fn mask_var<'t>(&self, alpha: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
        let c = alpha.tape().constant(self.c_geo.clone());
        rectify_edges_var(adaptive_gate_var(c, alpha, beta)?, &self.partition)
    }
}

/// Full filter: depth is aligned to the spatial size of `f_u` (`B×C×H×W`).
pub fn mgsf_forward(f_u: &Tensor, d_raw: &DepthMap, gp: GateParams, cfg: &MgsfConfig) -> Result<(Tensor, GeoMask)> {
    let [_, _, h, w] = f_u.dims4("mgsf_forward")?;
    let geometry = Geometry::analyze(d_raw, h, w, cfg)?;
    let mask = geometry.mask(gp)?;
    Ok((modulate(f_u, &mask)?, mask))
}

/// Depth feature stack at `h×w`: pooled depth, gradient magnitude at
/// dilation `r`, and the raw depth sampled at bin centres. Shape `1×3×h×w`.
pub fn depth_features(d_raw: &DepthMap, h: usize, w: usize, r: usize) -> Result<Tensor> {
    let pooled = align_depth(d_raw, h, w)?;
    let (gx, gy) = macro_gradient(&pooled, r)?;
    let mut data = Vec::with_capacity(3 * h * w);
    data.extend_from_slice(pooled.values());
    data.extend(gx.data().iter().zip(gy.data()).map(|(&a, &b)| math::sqrt(a * a + b * b)));
    for y in 0..h {
        let (y0, y1) = ops::pool_bin(y, h, d_raw.height);
        for x in 0..w {
            let (x0, x1) = ops::pool_bin(x, w, d_raw.width);
            data.push(d_raw.get((y0 + y1 - 1) / 2, (x0 + x1 - 1) / 2));
        }
    }
    Tensor::new(vec![1, 3, h, w], data)
}
