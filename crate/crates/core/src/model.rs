//! The complete segmentation network and its checkpoint form.

use std::path::Path;

use crate::backbone::Backbone;
use crate::bfm::Bfm;
use crate::config::ModelConfig;
use crate::ctd::Ctd;
use crate::error::{Error, Result};
use crate::mtt::Mtt;
use crate::nn::{join, Init, Module, ParamSet};
use crate::tensor::checkpoint::{self, NamedTensor};
use crate::tensor::{no_grad, Scalar, Tensor};

pub struct Model<S: Scalar = f32> {
    pub config: ModelConfig,
    pub backbone: Backbone<S>,
    pub fusion: Vec<Bfm<S>>,
    /// Stages 3 and 4; empty when temporal attention is disabled.
    pub temporal: Vec<Mtt<S>>,
    pub decoder: Ctd<S>,
}

impl<S: Scalar> Model<S> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(config.seed);
        let w = config.stage_channels;
        let backbone = Backbone::new(&mut init, config);
        let fusion = (0..4).map(|k| Bfm::new(&mut init, w[k])).collect();
        let temporal = if config.temporal_attention {
            (0..2)
                .map(|i| {
                    Mtt::new(
                        &mut init,
                        w[2 + i],
                        config.heads,
                        config.window,
                        config.sr_ratios[i],
                        config.mlp_ratio,
                        config.mtt_depth,
                        config.positional_encoding,
                    )
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let decoder = Ctd::new(&mut init, w, config.decoder_norm, config.mlp_ratio);
        Ok(Self {
            config: config.clone(),
            backbone,
            fusion,
            temporal,
            decoder,
        })
    }

    /// Training mode uses per-clip batch statistics in the decoder norms;
    /// evaluation mode uses the running averages.
    pub fn set_training(&self, on: bool) {
        self.decoder.set_training(on);
    }

    /// Fused, temporally mixed features `F_1..F_4`.
    pub fn features(&self, frames: &Tensor<S>, flows: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        let side = self.config.input_side;
        let s = frames.shape();
        if s.len() != 4 || s[2] != side || s[3] != side {
            return Err(Error::Shape(format!(
                "model expects [T, 3, {side}, {side}] clips, got {s:?}"
            )));
        }
        let (app, mot) = self.backbone.encode_pair(frames, flows)?;
        let mut feats = Vec::with_capacity(4);
        for k in 0..4 {
            let b = self.fusion[k].fuse(&app.stages[k], &mot.stages[k])?;
            let mixer = k.checked_sub(2).and_then(|i| self.temporal.get(i));
            feats.push(match mixer {
                Some(mtt) => mtt.forward(&b)?,
                None => b,
            });
        }
        Ok(feats)
    }

    /// Mask logits `P_1..P_4`, each `[T, 1, side, side]`.
    pub fn forward(&self, frames: &Tensor<S>, flows: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        let feats = self.features(frames, flows)?;
        let decoded = self.decoder.decode_pyramid(&feats)?;
        let side = self.config.input_side;
        self.decoder.predict_masks(&decoded, side, side)
    }

    /// Foreground probabilities of the final prediction, `[T, side, side]`
    /// row-major, computed in evaluation mode without recording a graph.
    pub fn predict(&self, frames: &Tensor<S>, flows: &Tensor<S>) -> Result<Vec<f32>> {
        self.set_training(false);
        let out = no_grad(|| self.forward(frames, flows));
        let p = out?[0].sigmoid();
        let probs = p.data().iter().map(|v| v.as_f64() as f32).collect();
        Ok(probs)
    }

    /// Parameters and buffers by name, then the configuration.
    pub fn to_entries(&self) -> Vec<NamedTensor> {
        let set = self.param_set();
        let mut out: Vec<NamedTensor> = set
            .params
            .iter()
            .chain(&set.buffers)
            .map(|(name, t)| NamedTensor {
                name: name.clone(),
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect();
        out.extend(self.config.to_entries());
        out
    }

    pub fn from_entries(entries: &[NamedTensor]) -> Result<Self> {
        let mut config = ModelConfig::from_entries(entries)?;
        config.seed = 0;
        let model = Self::new(&config)?;
        let set = model.param_set();
        for (name, t) in set.params.iter().chain(&set.buffers) {
            let e = entries
                .iter()
                .find(|e| &e.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks tensor {name}")))?;
            if e.shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?} in the checkpoint but {:?} in the model",
                    e.shape,
                    t.shape()
                )));
            }
            let vals: Vec<S> = e.data.iter().map(|&v| S::lit(v as f64)).collect();
            t.set_data(&vals)?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_entries())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_entries(&checkpoint::load(path)?)
    }
}

impl<S: Scalar> Module<S> for Model<S> {
    fn collect(&self, prefix: &str, set: &mut ParamSet<S>) {
        self.backbone.collect(prefix, set);
        for (k, b) in self.fusion.iter().enumerate() {
            b.collect(&join(prefix, &format!("bfm{}", k + 1)), set);
        }
        for (i, m) in self.temporal.iter().enumerate() {
            m.collect(&join(prefix, &format!("mtt{}", i + 3)), set);
        }
        self.decoder.collect(&join(prefix, "ctd"), set);
    }
}
