//! Micro-geometric scale adaptation.
//!
//! Three scale branches are built from the appearance features: the features
//! themselves (near) and two depthwise 3×3 convolutions at dilations 2 (mid)
//! and 4 (far). A 1×1 head over mean-centred depth features predicts one
//! logit per branch, a softmax over branches turns these into per-pixel
//! weights, and the weighted sum is added back onto the input.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ops;
use crate::tape::Var;
use crate::tensor::{Grouping, Kernel2D, Padding, Tensor};

pub const MID_DILATION: usize = 2;
pub const FAR_DILATION: usize = 4;
pub const SCALES: usize = 3;

/// The three branch feature maps, all `B×C×H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleBranchSet {
    pub near: Tensor,
    pub mid: Tensor,
    pub far: Tensor,
}

impl ScaleBranchSet {
    pub fn get(&self, s: usize) -> &Tensor {
        [&self.near, &self.mid, &self.far][s]
    }
}

/// Per-pixel branch weights, stored `B×3×H×W`; they sum to one over axis 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleWeights(pub Tensor);

impl ScaleWeights {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// Weights of branch `s` as `B×1×H×W`.
    pub fn branch(&self, s: usize) -> Result<Tensor> {
        ops::select(&self.0, 1, s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MgsaParams {
    mid: Kernel2D,
    far: Kernel2D,
    psi_weights: Tensor,
    psi_bias: Tensor,
}

impl MgsaParams {
    /// `psi_weights` is `3×C_d×1×1` and `psi_bias` has 3 entries.
    pub fn new(mid: Kernel2D, far: Kernel2D, psi_weights: Tensor, psi_bias: [f64; 3]) -> Result<Self> {
        if mid.dilation() != MID_DILATION || far.dilation() != FAR_DILATION {
            return Err(Error::invalid(
                "mgsa params",
                format!(
                    "branch dilations must be {MID_DILATION} and {FAR_DILATION}, got {} and {}",
                    mid.dilation(),
                    far.dilation()
                ),
            ));
        }
        for k in [&mid, &far] {
            if k.grouping() != Grouping::Depthwise || k.size() != 3 {
                return Err(Error::invalid("mgsa params", "branch kernels must be 3×3 depthwise"));
            }
        }
        if mid.weights().shape() != far.weights().shape() {
            return Err(Error::ShapeMismatch {
                op: "mgsa params",
                left: mid.weights().shape().to_vec(),
                right: far.weights().shape().to_vec(),
            });
        }
        match psi_weights.shape() {
            &[SCALES, _, 1, 1] => {}
            s => return Err(Error::invalid("mgsa params", format!("psi weights must be 3×C_d×1×1, got {s:?}"))),
        }
        let psi_bias = Tensor::new(vec![1, SCALES, 1, 1], psi_bias.to_vec())?;
        Ok(Self {
            mid,
            far,
            psi_weights,
            psi_bias,
        })
    }

    /// Delta branch kernels and a zero head: uniform weights and an output
    /// of exactly `2·F_r`.
    pub fn identity(channels: usize, depth_channels: usize) -> Result<Self> {
        Self::new(
            Kernel2D::delta_depthwise(channels, 3, MID_DILATION)?,
            Kernel2D::delta_depthwise(channels, 3, FAR_DILATION)?,
            Tensor::zeros(vec![SCALES, depth_channels, 1, 1])?,
            [0.0; 3],
        )
    }

    pub fn mid(&self) -> &Kernel2D {
        &self.mid
    }

    pub fn far(&self) -> &Kernel2D {
        &self.far
    }

    pub fn psi_weights(&self) -> &Tensor {
        &self.psi_weights
    }

    /// `1×3×1×1`.
    pub fn psi_bias(&self) -> &Tensor {
        &self.psi_bias
    }

    pub fn channels(&self) -> usize {
        self.mid.weights().shape()[0]
    }

    pub fn depth_channels(&self) -> usize {
        self.psi_weights.shape()[1]
    }
}

/// Near is `f_r` itself; mid and far are the dilated depthwise branches.
pub fn build_branches(f_r: &Tensor, params: &MgsaParams) -> Result<ScaleBranchSet> {
    Ok(ScaleBranchSet {
        near: f_r.clone(),
        mid: ops::conv2d(f_r, &params.mid, Padding::Replicate)?,
        far: ops::conv2d(f_r, &params.far, Padding::Replicate)?,
    })
}

/// Subtracts each channel's spatial mean.
pub fn center_depth_features(f_d: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = f_d.dims4("center_depth_features")?;
    let plane = h * w;
    let mut out = f_d.clone();
    for chunk in out.data_mut().chunks_mut(plane).take(b * c) {
        let mean = chunk.iter().sum::<f64>() / plane as f64;
        for v in chunk {
            *v -= mean;
        }
    }
    Ok(out)
}

fn check_depth_channels(f_d: &Tensor, params: &MgsaParams) -> Result<()> {
    let [_, c, _, _] = f_d.dims4("predict_weights")?;
    if c != params.depth_channels() {
        return Err(Error::ShapeMismatch {
            op: "predict_weights",
            left: f_d.shape().to_vec(),
            right: params.psi_weights.shape().to_vec(),
        });
    }
    Ok(())
}

/// Softmax over branches of `ψ(F_d − mean(F_d))`.
pub fn predict_weights(f_d: &Tensor, params: &MgsaParams) -> Result<ScaleWeights> {
    check_depth_channels(f_d, params)?;
    let centered = center_depth_features(f_d)?;
    let logits = ops::conv2d_raw(&centered, &params.psi_weights, 1, Grouping::Dense)?;
    let logits = ops::broadcast_zip(&logits, &params.psi_bias, "predict_weights", |a, b| a + b)?;
    Ok(ScaleWeights(ops::softmax_over_axis(&logits, 1)?))
}

/// `F_r + Σ_s W_s ⊙ F_s`.
pub fn fuse(f_r: &Tensor, branches: &ScaleBranchSet, w: &ScaleWeights) -> Result<Tensor> {
    let [b, c, h, wd] = f_r.dims4("fuse")?;
    let ws = w.tensor().dims4("fuse")?;
    if ws != [b, SCALES, h, wd] {
        return Err(Error::ShapeMismatch {
            op: "fuse",
            left: f_r.shape().to_vec(),
            right: w.tensor().shape().to_vec(),
        });
    }
    for s in 0..SCALES {
        if branches.get(s).shape() != f_r.shape() {
            return Err(Error::ShapeMismatch {
                op: "fuse",
                left: f_r.shape().to_vec(),
                right: branches.get(s).shape().to_vec(),
            });
        }
    }
    let plane = h * wd;
    let mut out = f_r.clone();
    let data = out.data_mut();
    let wt = w.tensor().data();
    for bi in 0..b {
        for ci in 0..c {
            for p in 0..plane {
                let i = (bi * c + ci) * plane + p;
                let mut acc = 0.0;
                for s in 0..SCALES {
                    acc += wt[(bi * SCALES + s) * plane + p] * branches.get(s).data()[i];
                }
                data[i] += acc;
            }
        }
    }
    Ok(out)
}

/// Whole module on plain tensors.
pub fn mgsa_forward(f_r: &Tensor, f_d: &Tensor, params: &MgsaParams) -> Result<Tensor> {
    let branches = build_branches(f_r, params)?;
    let w = predict_weights(f_d, params)?;
    fuse(f_r, &branches, &w)
}

/// Taped parameters of the module.
#[derive(Debug, Clone, Copy)]
pub struct MgsaVars<'t> {
    /// `C×1×3×3`.
    pub mid: Var<'t>,
    pub far: Var<'t>,
    /// `3×C_d×1×1`.
    pub psi_weights: Var<'t>,
    /// `1×3×1×1`.
    pub psi_bias: Var<'t>,
}

impl<'t> MgsaVars<'t> {
    /// Registers every parameter of `params` as a leaf of `tape`.
    pub fn leaves(tape: &'t crate::Tape, params: &MgsaParams) -> Self {
        Self {
            mid: tape.leaf(params.mid.weights().clone()),
            far: tape.leaf(params.far.weights().clone()),
            psi_weights: tape.leaf(params.psi_weights.clone()),
            psi_bias: tape.leaf(params.psi_bias.clone()),
        }
    }

    /// Taped equivalent of [`mgsa_forward`]. Depth features are centred and
    /// enter as constants.
    pub fn forward(&self, f_r: Var<'t>, f_d: &Tensor) -> Result<Var<'t>> {
        let tape = f_r.tape();
        let centered = tape.constant(center_depth_features(f_d)?);
        let logits = centered.conv2d(self.psi_weights, 1, Grouping::Dense)?.add(self.psi_bias)?;
        let w = logits.softmax(1)?;
        let mid = f_r.conv2d(self.mid, MID_DILATION, Grouping::Depthwise)?;
        let far = f_r.conv2d(self.far, FAR_DILATION, Grouping::Depthwise)?;
        let mut out = f_r;
        for (s, branch) in [f_r, mid, far].into_iter().enumerate() {
            out = out.add(branch.mul(w.select(1, s)?)?)?;
        }
        Ok(out)
    }
}

/// Stacks per-pixel depth features along the channel axis.
pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat_channels", "nothing to concatenate"))?;
    let [b, _, h, w] = first.dims4("concat_channels")?;
    let mut channels = 0;
    for p in parts {
        let [pb, pc, ph, pw] = p.dims4("concat_channels")?;
        if (pb, ph, pw) != (b, h, w) {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                left: first.shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
        channels += pc;
    }
    let mut data: Vec<f64> = Vec::with_capacity(b * channels * h * w);
    for bi in 0..b {
        for p in parts {
            let pc = p.shape()[1];
            let stride = pc * h * w;
            data.extend_from_slice(&p.data()[bi * stride..(bi + 1) * stride]);
        }
    }
    Tensor::new(vec![b, channels, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features() -> Tensor {
        Tensor::from_fn(vec![2, 3, 6, 5], |i| ((i * 37) % 11) as f64 - 4.5).unwrap()
    }

    #[test]
    fn identity_params_double_input() {
        let f = features();
        let p = MgsaParams::identity(3, 2).unwrap();
        let d = Tensor::from_fn(vec![2, 2, 6, 5], |i| (i as f64).sqrt()).unwrap();
        let b = build_branches(&f, &p).unwrap();
        assert_eq!(b.near, f);
        assert_eq!(b.mid, f);
        assert_eq!(b.far, f);
        let w = predict_weights(&d, &p).unwrap();
        assert!(w.tensor().data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let out = mgsa_forward(&f, &d, &p).unwrap();
        for (o, i) in out.data().iter().zip(f.data()) {
            assert!((o - 2.0 * i).abs() < 1e-12);
        }
    }

    #[test]
    fn bias_only_weights() {
        let p = MgsaParams::new(
            Kernel2D::delta_depthwise(1, 3, 2).unwrap(),
            Kernel2D::delta_depthwise(1, 3, 4).unwrap(),
            Tensor::zeros(vec![3, 1, 1, 1]).unwrap(),
            [10.0, 0.0, -10.0],
        )
        .unwrap();
        let d = Tensor::zeros(vec![1, 1, 4, 4]).unwrap();
        let w = predict_weights(&d, &p).unwrap();
        let z = 1.0 + (-10f64).exp() + (-20f64).exp();
        let expect = [1.0 / z, (-10f64).exp() / z, (-20f64).exp() / z];
        for s in 0..3 {
            for v in w.branch(s).unwrap().data() {
                assert!((v - expect[s]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rejects_wrong_dilation() {
        let k = Kernel2D::delta_depthwise(1, 3, 3).unwrap();
        let far = Kernel2D::delta_depthwise(1, 3, 4).unwrap();
        assert!(MgsaParams::new(k, far, Tensor::zeros(vec![3, 1, 1, 1]).unwrap(), [0.0; 3]).is_err());
    }

    #[test]
    fn fuse_with_zero_branches_is_residual() {
        let f = features();
        let z = f.map(|_| 0.0);
        let branches = ScaleBranchSet {
            near: z.clone(),
            mid: z.clone(),
            far: z,
        };
        let w = ScaleWeights(Tensor::full(vec![2, 3, 6, 5], 1.0 / 3.0).unwrap());
        assert_eq!(fuse(&f, &branches, &w).unwrap(), f);
    }

    #[test]
    fn concat() {
        let a = Tensor::full(vec![1, 1, 2, 2], 1.0).unwrap();
        let b = Tensor::full(vec![1, 2, 2, 2], 2.0).unwrap();
        let c = concat_channels(&[a, b]).unwrap();
        assert_eq!(c.shape(), &[1, 3, 2, 2]);
        assert_eq!(&c.data()[..5], &[1.0, 1.0, 1.0, 1.0, 2.0]);
    }
}
