//! Four-stage convolutional encoder producing a stride 4/8/16/32 pyramid.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{join, Conv2d, Init, LayerNorm, Module, ParamSet};
use crate::tensor::{Conv2dSpec, Scalar, Tensor};

/// Per-stage `[T, C_k, H/s_k, W/s_k]` features.
pub struct FeaturePyramid<S: Scalar = f32> {
    pub stages: Vec<Tensor<S>>,
}

impl<S: Scalar> FeaturePyramid<S> {
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.stages.iter().map(|t| t.shape().to_vec()).collect()
    }
}

/// Depth-wise 7x7, channel LN, pointwise expand, GELU, pointwise project,
/// plus the identity shortcut.
pub struct ConvBlock<S: Scalar> {
    pub dw: Conv2d<S>,
    pub norm: LayerNorm<S>,
    pub pw1: Conv2d<S>,
    pub pw2: Conv2d<S>,
}

impl<S: Scalar> ConvBlock<S> {
    pub fn new(init: &mut Init, dim: usize, mlp_ratio: usize) -> Self {
        Self {
            dw: Conv2d::same(init, dim, dim, 7, dim),
            norm: LayerNorm::new(init, dim, 1),
            pw1: Conv2d::pointwise(init, dim, dim * mlp_ratio, true),
            pw2: Conv2d::pointwise(init, dim * mlp_ratio, dim, true),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let y = self.norm.forward(&self.dw.forward(x)?)?;
        let y = self.pw2.forward(&self.pw1.forward(&y)?.gelu())?;
        y.add(x)
    }
}

impl<S: Scalar> Module<S> for ConvBlock<S> {
    fn collect(&self, prefix: &str, set: &mut ParamSet<S>) {
        self.dw.collect(&join(prefix, "dw"), set);
        self.norm.collect(&join(prefix, "norm"), set);
        self.pw1.collect(&join(prefix, "pw1"), set);
        self.pw2.collect(&join(prefix, "pw2"), set);
    }
}

pub struct Stage<S: Scalar> {
    /// Stage 1: 4x4 patchify then LN. Later stages: LN then 2x2 stride-2 conv.
    pub norm: LayerNorm<S>,
    pub down: Conv2d<S>,
    pub blocks: Vec<ConvBlock<S>>,
    first: bool,
}

impl<S: Scalar> Stage<S> {
    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut y = if self.first {
            self.norm.forward(&self.down.forward(x)?)?
        } else {
            self.down.forward(&self.norm.forward(x)?)?
        };
        for b in &self.blocks {
            y = b.forward(&y)?;
        }
        Ok(y)
    }
}

impl<S: Scalar> Module<S> for Stage<S> {
    fn collect(&self, prefix: &str, set: &mut ParamSet<S>) {
        self.norm.collect(&join(prefix, "norm"), set);
        self.down.collect(&join(prefix, "down"), set);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&join(prefix, &format!("block{i}")), set);
        }
    }
}

/// One encoder stream.
pub struct Encoder<S: Scalar> {
    pub stages: Vec<Stage<S>>,
}

impl<S: Scalar> Encoder<S> {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Self {
        let widths = cfg.stage_channels;
        let stages = (0..4)
            .map(|k| {
                let (cin, first) = if k == 0 { (3, true) } else { (widths[k - 1], false) };
                let (kernel, norm_dim) = if first { (4, widths[0]) } else { (2, cin) };
                Stage {
                    norm: LayerNorm::new(init, norm_dim, 1),
                    down: Conv2d::new(init, cin, widths[k], kernel, Conv2dSpec::new(kernel, 0, 1), true),
                    blocks: (0..cfg.encoder_blocks)
                        .map(|_| ConvBlock::new(init, widths[k], cfg.mlp_ratio))
                        .collect(),
                    first,
                }
            })
            .collect();
        Self { stages }
    }

    /// `frames`: `[T, 3, H, W]` with H and W multiples of 32.
    pub fn encode(&self, frames: &Tensor<S>) -> Result<FeaturePyramid<S>> {
        check_input(frames)?;
        let mut x = frames.clone();
        let mut stages = Vec::with_capacity(4);
        for s in &self.stages {
            x = s.forward(&x)?;
            stages.push(x.clone());
        }
        Ok(FeaturePyramid { stages })
    }
}

impl<S: Scalar> Module<S> for Encoder<S> {
    fn collect(&self, prefix: &str, set: &mut ParamSet<S>) {
        for (k, s) in self.stages.iter().enumerate() {
            s.collect(&join(prefix, &format!("stage{}", k + 1)), set);
        }
    }
}

fn check_input<S: Scalar>(x: &Tensor<S>) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1] != 3 || s[0] == 0 || s[2] == 0 || s[3] == 0 || s[2] % 32 != 0 || s[3] % 32 != 0 {
        return Err(Error::Shape(format!(
            "encoder input must be [T, 3, H, W] with H, W positive multiples of 32, got {s:?}"
        )));
    }
    Ok(())
}

/// Appearance and motion encoders; the motion stream reuses the appearance
/// weights unless `shared_encoder` is off.
pub struct Backbone<S: Scalar> {
    pub appearance: Encoder<S>,
    pub motion: Option<Encoder<S>>,
}

impl<S: Scalar> Backbone<S> {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Self {
        let appearance = Encoder::new(init, cfg);
        let motion = (!cfg.shared_encoder).then(|| Encoder::new(init, cfg));
        Self { appearance, motion }
    }

    pub fn encode(&self, frames: &Tensor<S>) -> Result<FeaturePyramid<S>> {
        self.appearance.encode(frames)
    }

    pub fn encode_pair(&self, frames: &Tensor<S>, flows: &Tensor<S>) -> Result<(FeaturePyramid<S>, FeaturePyramid<S>)> {
        if frames.shape() != flows.shape() {
            return Err(Error::Shape(format!(
                "frame clip {:?} and flow clip {:?} differ",
                frames.shape(),
                flows.shape()
            )));
        }
        let a = self.appearance.encode(frames)?;
        let m = self.motion.as_ref().unwrap_or(&self.appearance).encode(flows)?;
        Ok((a, m))
    }
}

impl<S: Scalar> Module<S> for Backbone<S> {
    fn collect(&self, prefix: &str, set: &mut ParamSet<S>) {
        self.appearance.collect(&join(prefix, "encoder"), set);
        if let Some(m) = &self.motion {
            m.collect(&join(prefix, "encoder_motion"), set);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (ModelConfig, Backbone<f32>) {
        let cfg = ModelConfig::toy();
        let bb = Backbone::new(&mut Init::new(7), &cfg);
        (cfg, bb)
    }

    fn clip(seed: u64) -> Tensor<f32> {
        Init::new(seed).uniform::<f32>(&[3, 3, 64, 64], 1.0).detach()
    }

    #[test]
    fn pyramid_shapes() {
        let (_, bb) = toy();
        let p = bb.encode(&clip(1)).unwrap();
        assert_eq!(
            p.shapes(),
            vec![vec![3, 16, 16, 16], vec![3, 32, 8, 8], vec![3, 64, 4, 4], vec![3, 128, 2, 2]]
        );
    }

    #[test]
    fn rejects_bad_extent() {
        let (_, bb) = toy();
        assert!(bb.encode(&Tensor::zeros(&[1, 3, 48, 64])).is_err());
        assert!(bb.encode(&Tensor::zeros(&[1, 1, 64, 64])).is_err());
        assert!(bb.encode_pair(&Tensor::zeros(&[2, 3, 64, 64]), &Tensor::zeros(&[1, 3, 64, 64])).is_err());
    }

    #[test]
    fn zero_input_is_finite() {
        let (_, bb) = toy();
        let p = bb.encode(&Tensor::zeros(&[2, 3, 64, 64])).unwrap();
        assert!(p.stages.iter().all(|s| s.all_finite()));
    }

    #[test]
    fn shared_weights_across_streams() {
        let (_, bb) = toy();
        let x = clip(2);
        let (a, m) = bb.encode_pair(&x, &x).unwrap();
        for (sa, sm) in a.stages.iter().zip(&m.stages) {
            assert_eq!(sa.to_vec(), sm.to_vec());
        }
        let (a2, m2) = bb.encode_pair(&x, &clip(3)).unwrap();
        assert_eq!(a2.stages[3].to_vec(), a.stages[3].to_vec());
        assert_ne!(m2.stages[3].to_vec(), m.stages[3].to_vec());

        // every parameter name lives under the one shared encoder
        let set = bb.param_set();
        assert!(set.params.iter().all(|(n, _)| n.starts_with("encoder.")));

        // nudging one weight moves both streams
        let w = &bb.appearance.stages[0].down.weight;
        w.update_data(|d| d[0] += 0.5);
        let (a3, m3) = bb.encode_pair(&x, &x).unwrap();
        assert_ne!(a3.stages[0].to_vec(), a.stages[0].to_vec());
        assert_ne!(m3.stages[0].to_vec(), m.stages[0].to_vec());
    }

    #[test]
    fn parameter_count_matches_one_stream() {
        let (cfg, bb) = toy();
        let single: usize = bb.appearance.param_set().count();
        assert_eq!(bb.param_set().count(), single);

        // independent count from the layer recipe
        let w = cfg.stage_channels;
        let r = cfg.mlp_ratio;
        let block = |c: usize| (c * 49 + c) + 2 * c + (c * c * r + c * r) + (c * r * c + c);
        let mut expect = 0;
        for k in 0..4 {
            let (cin, kernel, norm) = if k == 0 { (3, 4, w[0]) } else { (w[k - 1], 2, w[k - 1]) };
            expect += 2 * norm + w[k] * cin * kernel * kernel + w[k] + cfg.encoder_blocks * block(w[k]);
        }
        assert_eq!(single, expect);

        let separate = ModelConfig {
            shared_encoder: false,
            ..cfg
        };
        let bb2 = Backbone::<f32>::new(&mut Init::new(7), &separate);
        assert_eq!(bb2.param_set().count(), 2 * single);
    }
}
