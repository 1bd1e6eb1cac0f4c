//! Miniature cross-view retrieval.
//!
//! Oblique renders act as queries and orthographic renders of the same
//! scenes as the gallery. A frozen, randomly initialised two-layer
//! convolutional encoder maps depth-derived channels to per-pixel features,
//! which optionally pass through scale fusion and structure filtering before
//! global average pooling and L2 normalisation. Queries are ranked against
//! the gallery by cosine similarity.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::math;
use crate::mgsa::{self, MgsaParams};
use crate::mgsf::{self, DepthMap, GateParams, Geometry, MgsfConfig};
use crate::ops;
use crate::quantile;
use crate::scene::{self, CityProfile, SceneSpec};
use crate::tape::Var;
use crate::tensor::{Grouping, Kernel2D, Tensor};

/// Feature resolution of the encoder.
pub const FEATURE_SIZE: usize = 16;
/// Channels produced by [`encoder_input`].
pub const INPUT_CHANNELS: usize = 3;

/// Frozen two-layer encoder without biases: 3×3 conv, tanh, 1×1 conv, ReLU.
///
/// With no bias terms bare ground (zero height) maps to zero features, so the
/// pooled embedding summarises the structures standing on it.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    w1: Tensor,
    w2: Tensor,
}

impl ToyEncoder {
    pub const DEFAULT_HIDDEN: usize = 32;
    pub const DEFAULT_DIM: usize = 64;

    pub fn new(seed: u64, in_channels: usize, hidden: usize, dim: usize) -> Result<Self> {
        if in_channels == 0 || hidden == 0 || dim == 0 {
            return Err(Error::invalid("toy encoder", "channel counts must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |shape: Vec<usize>, fan_in: usize| {
            let dist = Normal::new(0.0, 1.0 / math::sqrt(fan_in as f64)).expect("positive std");
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| dist.sample(&mut rng)).collect())
        };
        Ok(Self {
            w1: draw(vec![hidden, in_channels, 3, 3], in_channels * 9)?,
            w2: draw(vec![dim, hidden, 1, 1], hidden)?,
        })
    }

    pub fn with_defaults(seed: u64) -> Result<Self> {
        Self::new(seed, INPUT_CHANNELS, Self::DEFAULT_HIDDEN, Self::DEFAULT_DIM)
    }

    pub fn in_channels(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.w2.shape()[0]
    }

    pub fn weights(&self) -> [&Tensor; 2] {
        [&self.w1, &self.w2]
    }

    /// Per-pixel features `B×dim×H×W`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let h = ops::conv2d_raw(x, &self.w1, 1, Grouping::Dense)?.map(tanh);
        Ok(ops::conv2d_raw(&h, &self.w2, 1, Grouping::Dense)?.map(|v| v.max(0.0)))
    }

    /// Registers the weights as taped leaves.
    pub fn leaves<'t>(&self, tape: &'t crate::Tape) -> EncoderVars<'t> {
        EncoderVars {
            w1: tape.leaf(self.w1.clone()),
            w2: tape.leaf(self.w2.clone()),
        }
    }
}

fn tanh(x: f64) -> f64 {
    // 2σ(2x) − 1, the same expression the taped path uses
    2.0 * math::sigmoid(2.0 * x) - 1.0
}

/// Taped encoder weights.
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars<'t> {
    pub w1: Var<'t>,
    pub w2: Var<'t>,
}

impl<'t> EncoderVars<'t> {
    /// Taped [`ToyEncoder::features`].
    pub fn features(&self, x: Var<'t>) -> Result<Var<'t>> {
        let pre = x.conv2d(self.w1, 1, Grouping::Dense)?;
        let h = pre.scale(2.0).sigmoid().scale(2.0).add_scalar(-1.0);
        Ok(h.conv2d(self.w2, 1, Grouping::Dense)?.relu())
    }
}

/// Removes the least-squares plane `a·x + b·y + c` from a raster.
pub fn detrend(d: &DepthMap) -> Result<DepthMap> {
    let (h, w) = (d.height(), d.width());
    // centred coordinates make the normal equations diagonal
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (mut sxx, mut syy, mut sxz, mut syz, mut sz) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let (u, v, z) = (x as f64 - cx, y as f64 - cy, d.get(y, x));
            sxx += u * u;
            syy += v * v;
            sxz += u * z;
            syz += v * z;
            sz += z;
        }
    }
    let (a, b, c) = (sxz / sxx, syz / syy, sz / (h * w) as f64);
    DepthMap::from_fn(h, w, |y, x| d.get(y, x) - a * (x as f64 - cx) - b * (y as f64 - cy) - c)
}

/// Height above ground at `size×size`: the pooled depth is detrended and
/// measured up from its median, which sits on the ground whenever buildings
/// cover less than half of the scene.
pub fn height_above_ground(d: &DepthMap, size: usize) -> Result<DepthMap> {
    let z = detrend(&mgsf::align_depth(d, size, size)?)?;
    let ground = quantile::quantile(z.values(), 0.5);
    DepthMap::new(size, size, z.values().iter().map(|v| ground - v).collect())
}

/// Encoder input `1×3×s×s`: height above ground `h`, and `h·x`, `h·y` with
/// pixel coordinates scaled to `[−1, 1]`.
pub fn encoder_input(d: &DepthMap, size: usize) -> Result<Tensor> {
    let h = height_above_ground(d, size)?;
    let coord = |i: usize| 2.0 * i as f64 / (size - 1) as f64 - 1.0;
    let plane = size * size;
    let hv = h.values();
    let mut data = Vec::with_capacity(INPUT_CHANNELS * plane);
    data.extend_from_slice(hv);
    data.extend((0..plane).map(|i| hv[i] * coord(i % size)));
    data.extend((0..plane).map(|i| hv[i] * coord(i / size)));
    Tensor::new(vec![1, INPUT_CHANNELS, size, size], data)
}

/// Which optional modules sit between encoder and pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Ablation {
    pub use_mgsa: bool,
    pub use_mgsf: bool,
}

impl Ablation {
    pub const BASE: Self = Self {
        use_mgsa: false,
        use_mgsf: false,
    };
    pub const MGSA: Self = Self {
        use_mgsa: true,
        use_mgsf: false,
    };
    pub const MGSF: Self = Self {
        use_mgsa: false,
        use_mgsf: true,
    };
    pub const FULL: Self = Self {
        use_mgsa: true,
        use_mgsf: true,
    };
    pub const ALL: [(&'static str, Self); 4] = [
        ("base", Self::BASE),
        ("mgsa", Self::MGSA),
        ("mgsf", Self::MGSF),
        ("full", Self::FULL),
    ];

    pub fn name(self) -> &'static str {
        Self::ALL.iter().find(|(_, a)| *a == self).map(|(n, _)| *n).unwrap_or("?")
    }
}

/// Everything an embedding depends on besides the depth map.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub encoder: ToyEncoder,
    pub mgsa: MgsaParams,
    pub gate: GateParams,
    pub mgsf: MgsfConfig,
    pub size: usize,
}

impl Pipeline {
    /// Seeded encoder and scale-fusion parameters with default gate and
    /// filter settings.
    pub fn seeded(seed: u64) -> Result<Self> {
        let encoder = ToyEncoder::with_defaults(seed)?;
        let mgsa = seeded_mgsa(seed, encoder.dim())?;
        Ok(Self {
            encoder,
            mgsa,
            gate: GateParams::default(),
            mgsf: MgsfConfig::default(),
            size: FEATURE_SIZE,
        })
    }

    /// Unit-norm embedding of a depth map.
    pub fn embed(&self, depth: &DepthMap, ablation: Ablation) -> Result<Vec<f64>> {
        let x = encoder_input(depth, self.size)?;
        let mut f = self.encoder.features(&x)?;
        if ablation.use_mgsa {
            let f_d = mgsf::depth_features(depth, self.size, self.size, self.mgsf.dilation)?;
            f = mgsa::mgsa_forward(&f, &f_d, &self.mgsa)?;
        }
        if ablation.use_mgsf {
            let geometry = Geometry::analyze(depth, self.size, self.size, &self.mgsf)?;
            f = mgsf::modulate(&f, &geometry.mask(self.gate)?)?;
        }
        let pooled = ops::mean_axis(&ops::mean_axis(&f, 3)?, 2)?.into_data();
        Ok(unit(pooled))
    }
}

/// L2-normalised copy; an all-zero vector (nothing above ground) maps to the
/// uniform unit vector.
pub fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = math::sqrt(v.iter().map(|x| x * x).sum());
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    } else {
        let u = 1.0 / math::sqrt(v.len() as f64);
        v.iter_mut().for_each(|x| *x = u);
    }
    v
}

/// Standard deviation of the seeded depth-head weights.
pub const PSI_INIT_STD: f64 = 0.1;

/// Scale-fusion parameters for the frozen experiment: mean-filter branch
/// kernels at both dilations and a small seeded random depth head.
pub fn seeded_mgsa(seed: u64, channels: usize) -> Result<MgsaParams> {
    let mean_filter = |dilation| Kernel2D::new(Tensor::full(vec![channels, 1, 3, 3], 1.0 / 9.0)?, dilation, Grouping::Depthwise);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ca1_ab1e);
    let normal = Normal::new(0.0, PSI_INIT_STD).expect("positive std");
    let depth_channels = 3;
    let psi = Tensor::new(
        vec![mgsa::SCALES, depth_channels, 1, 1],
        (0..mgsa::SCALES * depth_channels).map(|_| normal.sample(&mut rng)).collect(),
    )?;
    MgsaParams::new(mean_filter(mgsa::MID_DILATION)?, mean_filter(mgsa::FAR_DILATION)?, psi, [0.0; 3])
}

/// Gallery order by descending cosine similarity; ties keep index order.
pub fn rank(query: &[f64], gallery: &[Vec<f64>]) -> Result<Vec<usize>> {
    if gallery.is_empty() {
        return Err(Error::invalid("rank", "gallery is empty"));
    }
    let sims: Vec<f64> = gallery
        .iter()
        .map(|g| {
            if g.len() != query.len() {
                return Err(Error::ShapeMismatch {
                    op: "rank",
                    left: vec![query.len()],
                    right: vec![g.len()],
                });
            }
            Ok(g.iter().zip(query).map(|(a, b)| a * b).sum())
        })
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    // stable sort keeps ascending indices among equal similarities
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]));
    Ok(order)
}

/// Fraction of queries whose match is within the top `k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("recall_at_k", "k must be at least 1"));
    }
    if ranks.is_empty() {
        return Err(Error::invalid("recall_at_k", "no queries"));
    }
    check_ranks(ranks)?;
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// Mean of `1/rank` (single relevant item per query).
pub fn average_precision(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::invalid("average_precision", "no queries"));
    }
    check_ranks(ranks)?;
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

fn check_ranks(ranks: &[usize]) -> Result<()> {
    if ranks.contains(&0) {
        return Err(Error::invalid("retrieval metrics", "ranks are 1-based"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub ablation: Ablation,
    /// `(K, R@K)` for K in 1, 5, 10 and the gallery size, ascending.
    pub recall_at: Vec<(usize, f64)>,
    pub ap: f64,
    /// 1-based rank of every query's match.
    pub per_query_ranks: Vec<usize>,
}

impl RetrievalReport {
    pub fn from_ranks(ablation: Ablation, ranks: Vec<usize>) -> Result<Self> {
        let n = ranks.len();
        let mut ks: Vec<usize> = [1, 5, 10, n].into_iter().filter(|&k| k <= n).collect();
        ks.dedup();
        let recall_at = ks.iter().map(|&k| Ok((k, recall_at_k(&ranks, k)?))).collect::<Result<_>>()?;
        Ok(Self {
            ablation,
            recall_at,
            ap: average_precision(&ranks)?,
            per_query_ranks: ranks,
        })
    }

    pub fn recall(&self, k: usize) -> f64 {
        recall_at_k(&self.per_query_ranks, k).unwrap_or(0.0)
    }
}

/// Scene pairs used by the experiment: oblique query and orthographic
/// reference of the same city, rendered with independent noise.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub spec: SceneSpec,
    pub query: DepthMap,
    pub reference: DepthMap,
}

pub fn scene_pairs(n_scenes: usize, seed: u64, profile: &CityProfile) -> Result<Vec<ScenePair>> {
    (0..n_scenes as u64)
        .map(|i| {
            let spec = scene::box_city(seed.wrapping_mul(1_000_003).wrapping_add(i), profile);
            let (query, _) = scene::render_oblique(&spec)?;
            let ortho_spec = SceneSpec {
                rng_seed: spec.rng_seed ^ 0x9e37_79b9_7f4a_7c15,
                ..spec.clone()
            };
            let (reference, _) = scene::render_ortho(&ortho_spec)?;
            Ok(ScenePair { spec, query, reference })
        })
        .collect()
}

/// Embeds, ranks and scores one ablation arm over prepared scene pairs.
pub fn evaluate(pipeline: &Pipeline, pairs: &[ScenePair], ablation: Ablation) -> Result<RetrievalReport> {
    if pairs.len() < 2 {
        return Err(Error::invalid(
            "run_experiment",
            format!("need at least 2 scenes, got {}", pairs.len()),
        ));
    }
    let gallery = pairs
        .iter()
        .map(|p| pipeline.embed(&p.reference, ablation))
        .collect::<Result<Vec<_>>>()?;
    let mut ranks = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let q = pipeline.embed(&p.query, ablation)?;
        let order = rank(&q, &gallery)?;
        ranks.push(order.iter().position(|&j| j == i).expect("index present") + 1);
    }
    RetrievalReport::from_ranks(ablation, ranks)
}

/// Full seeded experiment for one ablation arm.
pub fn run_experiment(n_scenes: usize, seed: u64, ablation: Ablation, profile: &CityProfile) -> Result<RetrievalReport> {
    let pairs = scene_pairs(n_scenes, seed, profile)?;
    evaluate(&Pipeline::seeded(seed)?, &pairs, ablation)
}
