//! Cascaded decoder: deep-to-shallow refinement and per-level mask heads.
//!
//! Each level computes
//!
//! ```text
//! S  = SE(DWConv(F_shal))
//! F  = DWConv(Up(Proj(F_deep)) + S) + F_shal      (deep term absent at k = 4)
//! F' = FFN(LN(F)) + F
//! ```
//!
//! where `DWConv` is a 7x7 depth-wise convolution, a norm and ReLU.

use crate::error::{Error, Result};
use crate::nn::{join, Conv2d, ConvMlp, Init, LayerNorm, Module, Norm2d, NormKind, ParamSet, SqueezeExcite};
use crate::tensor::{Scalar, Tensor};

pub const DW_KERNEL: usize = 7;

/// Depth-wise 7x7 convolution, norm, ReLU.
pub struct DwConv<S: Scalar> {
    pub conv: Conv2d<S>,
    pub norm: Norm2d<S>,
}

impl<S: Scalar> DwConv<S> {
    pub fn new(init: &mut Init, channels: usize, norm: NormKind) -> Self {
        Self {
            conv: Conv2d::same(init, channels, channels, DW_KERNEL, channels),
            norm: Norm2d::new(init, norm, channels),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.norm.forward(&self.conv.forward(x)?)?.relu())
    }
}

impl<S: Scalar> Module<S> for DwConv<S> {
    fn collect(&self, prefix: &str, set: &mut ParamSet<S>) {
        self.conv.collect(&join(prefix, "conv"), set);
        self.norm.collect(&join(prefix, "norm"), set);
    }
}

pub struct DecoderLevel<S: Scalar> {
    pub channels: usize,
    pub shallow: DwConv<S>,
    pub se: SqueezeExcite<S>,
    /// Aligns the deeper level's width to this level's; absent at k = 4.
    pub proj: Option<Conv2d<S>>,
    pub fuse: DwConv<S>,
    pub norm: LayerNorm<S>,
    pub ffn: ConvMlp<S>,
}

impl<S: Scalar> DecoderLevel<S> {
    pub fn new(init: &mut Init, channels: usize, deep_channels: Option<usize>, norm: NormKind, mlp_ratio: usize) -> Self {
        Self {
            channels,
            shallow: DwConv::new(init, channels, norm),
            se: SqueezeExcite::new(init, channels),
            proj: deep_channels.map(|d| Conv2d::pointwise(init, d, channels, false)),
            fuse: DwConv::new(init, channels, norm),
            norm: LayerNorm::new(init, channels, 1),
            ffn: ConvMlp::new(init, channels, mlp_ratio),
        }
    }

    pub fn forward(&self, shal: &Tensor<S>, deep: Option<&Tensor<S>>) -> Result<Tensor<S>> {
        let s = shal.shape();
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::Shape(format!("decoder level expects [T, {}, H, W], got {s:?}", self.channels)));
        }
        let refined = self.se.forward(&self.shallow.forward(shal)?)?;
        let mixed = match (deep, &self.proj) {
            (Some(d), Some(p)) => {
                let ds = d.shape();
                if ds.len() != 4 || ds[0] != s[0] || 2 * ds[2] != s[2] || 2 * ds[3] != s[3] {
                    return Err(Error::Shape(format!(
                        "deep feature {ds:?} must be half the extent of shallow feature {s:?}"
                    )));
                }
                p.forward(d)?.upsample_bilinear(2)?.add(&refined)?
            }
            (None, _) => refined,
            (Some(_), None) => return Err(Error::Shape("deepest level takes no deeper input".into())),
        };
        let f = self.fuse.forward(&mixed)?.add(shal)?;
        self.ffn.forward(&self.norm.forward(&f)?)?.add(&f)
    }

    pub fn set_training(&self, on: bool) {
        self.shallow.norm.set_training(on);
        self.fuse.norm.set_training(on);
    }
}

impl<S: Scalar> Module<S> for DecoderLevel<S> {
    fn collect(&self, prefix: &str, set: &mut ParamSet<S>) {
        self.shallow.collect(&join(prefix, "shallow"), set);
        self.se.collect(&join(prefix, "se"), set);
        if let Some(p) = &self.proj {
            p.collect(&join(prefix, "proj"), set);
        }
        self.fuse.collect(&join(prefix, "fuse"), set);
        self.norm.collect(&join(prefix, "norm"), set);
        self.ffn.collect(&join(prefix, "ffn"), set);
    }
}

pub struct Ctd<S: Scalar = f32> {
    pub levels: Vec<DecoderLevel<S>>,
    pub heads: Vec<Conv2d<S>>,
}

impl<S: Scalar> Ctd<S> {
    pub fn new(init: &mut Init, widths: [usize; 4], norm: NormKind, mlp_ratio: usize) -> Self {
        let levels = (0..4)
            .map(|k| DecoderLevel::new(init, widths[k], (k < 3).then(|| widths[k + 1]), norm, mlp_ratio))
            .collect();
        let heads = (0..4).map(|k| Conv2d::pointwise(init, widths[k], 1, true)).collect();
        Self { levels, heads }
    }

    /// `F_1..F_4` to `F'_1..F'_4`, processing level 4 first.
    pub fn decode_pyramid(&self, feats: &[Tensor<S>]) -> Result<Vec<Tensor<S>>> {
        if feats.len() != 4 {
            return Err(Error::Shape(format!("decoder needs 4 levels, got {}", feats.len())));
        }
        let mut out: Vec<Option<Tensor<S>>> = vec![None, None, None, None];
        let mut deeper: Option<Tensor<S>> = None;
        for k in (0..4).rev() {
            let y = self.levels[k].forward(&feats[k], deeper.as_ref())?;
            deeper = Some(y.clone());
            out[k] = Some(y);
        }
        Ok(out.into_iter().map(|t| t.expect("filled")).collect())
    }

    /// Per-level 1-channel logits bilinearly upsampled to `out_h x out_w`.
    pub fn predict_masks(&self, decoded: &[Tensor<S>], out_h: usize, out_w: usize) -> Result<Vec<Tensor<S>>> {
        decoded
            .iter()
            .zip(&self.heads)
            .map(|(f, head)| {
                let s = f.shape();
                let (h, w) = (s[2], s[3]);
                if out_h < h || out_h % h != 0 || out_w % w != 0 || out_h / h != out_w / w {
                    return Err(Error::Shape(format!(
                        "cannot upsample {h}x{w} logits to {out_h}x{out_w} by one integer factor"
                    )));
                }
                head.forward(f)?.upsample_bilinear(out_h / h)
            })
            .collect()
    }

    pub fn set_training(&self, on: bool) {
        for l in &self.levels {
            l.set_training(on);
        }
    }
}

impl<S: Scalar> Module<S> for Ctd<S> {
    fn collect(&self, prefix: &str, set: &mut ParamSet<S>) {
        for (k, l) in self.levels.iter().enumerate() {
            l.collect(&join(prefix, &format!("level{}", k + 1)), set);
        }
        for (k, h) in self.heads.iter().enumerate() {
            h.collect(&join(prefix, &format!("head{}", k + 1)), set);
        }
    }
}

/// Foreground where `p > 0.5`; `p == 0.5` goes to background.
pub fn binarize(probs: &[f32]) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p > 0.5)).collect()
}
