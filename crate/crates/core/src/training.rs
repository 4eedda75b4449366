//! Multi-level loss, AdamW and the synthetic-data training loop.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{Config, SyntheticClipSpec, TrainConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Module;
use crate::synthetic::{make_clip_with, SyntheticClip};
use crate::tensor::{sigmoid, Scalar, Tensor};

/// Probability clamp of the cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Mean binary cross-entropy of `sigmoid(logits)` against `{0, 1}` targets,
/// with probabilities clamped to `[eps, 1 - eps]`. The gradient is
/// `(p - G) / N` where the clamp is inactive and zero where it bites.
pub fn bce_with_logits<S: Scalar>(logits: &Tensor<S>, target: &Tensor<S>) -> Result<Tensor<S>> {
    if logits.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "logits {:?} and target {:?} differ",
            logits.shape(),
            target.shape()
        )));
    }
    let g = target.to_vec();
    if g.iter().any(|&v| v != S::zero() && v != S::one()) {
        return Err(Error::Data("targets must be binary".into()));
    }
    let eps = S::lit(BCE_EPS);
    let hi = S::one() - eps;
    let probs: Vec<S> = logits.data().iter().map(|&z| sigmoid(z)).collect();
    let n = S::lit(probs.len().max(1) as f64);
    let mut total = S::zero();
    for (&p, &t) in probs.iter().zip(&g) {
        let pc = p.max(eps).min(hi);
        total = total - (t * pc.ln() + (S::one() - t) * (S::one() - pc).ln());
    }
    Ok(Tensor::from_op(vec![], vec![total / n], vec![logits.clone()], move |up| {
        let scale = up[0] / n;
        let grad = probs
            .iter()
            .zip(&g)
            .map(|(&p, &t)| if p < eps || p > hi { S::zero() } else { (p - t) * scale })
            .collect();
        vec![Some(grad)]
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossReport {
    pub step: usize,
    pub total: f64,
    pub main: f64,
    /// Levels 2, 3, 4.
    pub aux: [f64; 3],
    pub lambda: f64,
}

/// `main + lambda * (aux2 + aux3 + aux4)` over the four logit maps.
pub fn bce_multilevel<S: Scalar>(logits: &[Tensor<S>], target: &Tensor<S>, lambda: f64) -> Result<(Tensor<S>, LossReport)> {
    if logits.len() != 4 {
        return Err(Error::Shape(format!("expected 4 prediction levels, got {}", logits.len())));
    }
    let terms = logits.iter().map(|l| bce_with_logits(l, target)).collect::<Result<Vec<_>>>()?;
    let aux = terms[1].add(&terms[2])?.add(&terms[3])?;
    let total = terms[0].add(&aux.scale(S::lit(lambda)))?;
    let report = LossReport {
        step: 0,
        total: total.item().as_f64(),
        main: terms[0].item().as_f64(),
        aux: [terms[1].item().as_f64(), terms[2].item().as_f64(), terms[3].item().as_f64()],
        lambda,
    };
    Ok((total, report))
}

/// Adam with decoupled weight decay.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Updates every parameter holding a gradient. Parameters without one are
    /// skipped; a step with no gradients at all is an error.
    pub fn step<S: Scalar>(&mut self, params: &[Tensor<S>]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Autograd("parameter list changed between optimizer steps".into()));
        }
        if params.iter().all(|p| p.grad().is_none()) {
            return Err(Error::Autograd("optimizer step before backward".into()));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter().enumerate() {
            let Some(g) = p.grad() else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let (lr, b1, b2, wd, eps) = (self.lr, self.beta1, self.beta2, self.weight_decay, self.eps);
            p.update_data(|d| {
                for j in 0..d.len() {
                    let gj = g[j].as_f64();
                    let mut x = d[j].as_f64();
                    x -= lr * wd * x;
                    m[j] = b1 * m[j] + (1.0 - b1) * gj;
                    v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                    x -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                    d[j] = S::lit(x);
                }
            });
        }
        Ok(())
    }
}

/// Clip spec for training step `step`, and whether to play it reversed.
pub fn training_clip_spec(cfg: &Config, step: usize) -> (SyntheticClipSpec, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.model.seed);
    rng.set_stream(step as u64 + 1);
    let spec = SyntheticClipSpec {
        seed: rng.gen(),
        canvas: cfg.model.input_side,
        ..cfg.data.clone()
    };
    (spec, rng.gen_bool(cfg.train.reverse_prob.clamp(0.0, 1.0)))
}

/// Clip drawn from the training distribution but from a seed stream the
/// training loop never uses.
pub fn heldout_clip(cfg: &Config, index: usize, frames: usize) -> Result<SyntheticClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.model.seed ^ 0x05ee_d0f4_e1d0_u64);
    rng.set_stream(index as u64);
    let spec = SyntheticClipSpec {
        seed: rng.gen(),
        canvas: cfg.model.input_side,
        ..cfg.data.clone()
    };
    make_clip_with(&spec, frames, false)
}

/// Trains a fresh model for `steps` optimizer steps on synthetic clips.
/// `observe` sees every step's loss.
pub fn train(cfg: &Config, steps: usize, mut observe: impl FnMut(&LossReport)) -> Result<(Model, Vec<LossReport>)> {
    let model = Model::<f32>::new(&cfg.model)?;
    let params = model.parameters();
    let mut opt = AdamW::new(&cfg.train);
    let mut log = Vec::with_capacity(steps);
    model.set_training(true);
    for step in 0..steps {
        opt.lr = cfg.train.lr_at(step, steps);
        let (spec, reversed) = training_clip_spec(cfg, step);
        let clip = make_clip_with(&spec, cfg.model.train_clip_len, reversed)?;
        for p in &params {
            p.zero_grad();
        }
        let logits = model.forward(&clip.frames_tensor()?, &clip.flows_tensor()?)?;
        let (loss, mut report) = bce_multilevel(&logits, &clip.masks_tensor()?, cfg.model.lambda)?;
        report.step = step;
        if !report.total.is_finite() {
            return Err(Error::Diverged(format!(
                "loss is {} at step {step} (main {}, aux {:?})",
                report.total, report.main, report.aux
            )));
        }
        loss.backward()?;
        opt.step(&params)?;
        observe(&report);
        log.push(report);
    }
    model.set_training(false);
    Ok((model, log))
}

pub fn write_loss_csv(path: &Path, log: &[LossReport]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,total,main,aux2,aux3,aux4")?;
    for r in log {
        writeln!(f, "{},{},{},{},{},{}", r.step, r.total, r.main, r.aux[0], r.aux[1], r.aux[2])?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::tensor::gradcheck::GradCheck;

    fn target(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new((0..n).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect(), shape).unwrap()
    }

    #[test]
    fn perfect_prediction_costs_almost_nothing() {
        let g = target(1, &[2, 1, 4, 4]);
        let logits: Vec<_> = (0..4)
            .map(|_| Tensor::new(g.to_vec().iter().map(|&v| if v == 1.0 { 40.0 } else { -40.0 }).collect(), g.shape()).unwrap())
            .collect();
        let (_, r) = bce_multilevel(&logits, &g, 0.5).unwrap();
        let bound = 4.0 * (1.0 + 0.5 * 3.0) * -(1.0 - BCE_EPS).ln();
        assert!(r.total <= bound && r.total >= 0.0, "{r:?}");
    }

    #[test]
    fn even_odds_cost_ln2_per_level() {
        let g = target(2, &[3, 1, 5, 5]);
        let z = Tensor::<f64>::zeros(g.shape());
        let (_, r) = bce_multilevel(&[z.clone(), z.clone(), z.clone(), z], &g, 0.5).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((r.main - ln2).abs() < 1e-12);
        assert!(r.aux.iter().all(|a| (a - ln2).abs() < 1e-12));
    }

    #[test]
    fn lambda_weights_auxiliary_terms() {
        let g = target(3, &[2, 1, 4, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits: Vec<_> = (0..4)
            .map(|_| Tensor::<f64>::new((0..32).map(|_| rng.gen_range(-3.0..3.0)).collect(), &[2, 1, 4, 4]).unwrap())
            .collect();
        let (_, r) = bce_multilevel(&logits, &g, 0.5).unwrap();
        assert!((r.total - (r.main + 0.5 * r.aux.iter().sum::<f64>())).abs() < 1e-6);
        assert!(r.main >= 0.0 && r.aux.iter().all(|&a| a >= 0.0));
    }

    #[test]
    fn rejects_bad_targets() {
        let z = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        assert!(bce_with_logits(&z, &Tensor::full(&[1, 1, 2, 2], 0.5)).is_err());
        assert!(bce_with_logits(&z, &Tensor::zeros(&[1, 1, 2, 3])).is_err());
    }

    #[test]
    fn gradient_is_p_minus_g_over_n() {
        let g = target(4, &[2, 1, 3, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = Tensor::<f64>::param((0..18).map(|_| rng.gen_range(-4.0..4.0)).collect(), &[2, 1, 3, 3]).unwrap();
        bce_with_logits(&z, &g).unwrap().backward().unwrap();
        let grad = z.grad().unwrap();
        for ((&zi, &gi), &d) in z.to_vec().iter().zip(&g.to_vec()).zip(&grad) {
            let p = 1.0 / (1.0 + (-zi).exp());
            assert!((d - (p - gi) / 18.0).abs() < 1e-12);
        }
        // and the multi-level total against finite differences
        let leaves: Vec<_> = (0..4)
            .map(|_| Tensor::<f64>::param((0..18).map(|_| rng.gen_range(-4.0..4.0)).collect(), &[2, 1, 3, 3]).unwrap())
            .collect();
        let r = GradCheck::with_seed(4)
            .run(&leaves, || Ok(bce_multilevel(&leaves, &g, 0.5)?.0.reshape(&[1])?))
            .unwrap();
        assert!(r.max_rel_err <= 1e-3, "{r:?}");
    }

    #[test]
    fn clamped_pixels_get_no_gradient() {
        let z = Tensor::<f64>::param(vec![40.0, -40.0, 0.0], &[3]).unwrap();
        let g = Tensor::new(vec![0.0, 1.0, 1.0], &[3]).unwrap();
        bce_with_logits(&z, &g).unwrap().backward().unwrap();
        assert_eq!(z.grad().unwrap(), vec![0.0, 0.0, -0.5 / 3.0]);
    }

    #[test]
    fn adamw_basics() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let p = Tensor::<f64>::param(vec![1.0, -2.0], &[2]).unwrap();
        let mut opt = AdamW::new(&cfg);
        assert!(opt.step(&[p.clone()]).is_err());
        p.mul(&Tensor::zeros(&[2])).unwrap().sum_all().backward().unwrap();
        opt.step(&[p.clone()]).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, -2.0]);

        let x = Tensor::<f64>::param(vec![1.0], &[1]).unwrap();
        let mut opt = AdamW::new(&TrainConfig::default());
        x.square().sum_all().backward().unwrap();
        opt.step(&[x.clone()]).unwrap();
        assert!(x.item() < 1.0 && x.item() > 0.0);
    }

    #[test]
    fn adamw_matches_scalar_reimplementation() {
        // f(a, b) = 3a^2 + ab + 2b^2 - a
        let cfg = TrainConfig {
            lr: 0.05,
            weight_decay: 0.1,
            ..TrainConfig::default()
        };
        let p = Tensor::<f64>::param(vec![0.7, -1.3], &[2]).unwrap();
        let mut opt = AdamW::new(&cfg);
        let (mut a, mut b) = (0.7f64, -1.3f64);
        let (mut m, mut v) = ([0.0f64; 2], [0.0f64; 2]);
        for t in 1..=10 {
            p.zero_grad();
            let pa = p.narrow(0, 0, 1).unwrap();
            let pb = p.narrow(0, 1, 1).unwrap();
            let f = pa
                .square()
                .scale(3.0)
                .add(&pa.mul(&pb).unwrap())
                .unwrap()
                .add(&pb.square().scale(2.0))
                .unwrap()
                .sub(&pa)
                .unwrap()
                .sum_all();
            f.backward().unwrap();
            opt.step(&[p.clone()]).unwrap();

            let g = [6.0 * a + b - 1.0, a + 4.0 * b];
            let mut x = [a, b];
            for i in 0..2 {
                x[i] *= 1.0 - 0.05 * 0.1;
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                x[i] -= 0.05 * mh / (vh.sqrt() + 1e-8);
            }
            (a, b) = (x[0], x[1]);
            let got = p.to_vec();
            assert!((got[0] - a).abs() < 1e-6 && (got[1] - b).abs() < 1e-6, "step {t}");
        }
    }

    fn tiny() -> Config {
        Config {
            model: ModelConfig {
                stage_channels: [8, 8, 16, 16],
                input_side: 32,
                window: 2,
                sr_ratios: [1, 1],
                mlp_ratio: 1,
                encoder_blocks: 1,
                ..ModelConfig::toy()
            },
            data: SyntheticClipSpec {
                object_size: 10,
                ..SyntheticClipSpec::default()
            },
            ..Config::toy()
        }
    }

    #[test]
    fn zero_steps_return_the_initialisation() {
        let cfg = tiny();
        let (m, log) = train(&cfg, 0, |_| {}).unwrap();
        assert!(log.is_empty());
        assert_eq!(m.to_entries(), Model::<f32>::new(&cfg.model).unwrap().to_entries());
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny();
        let (a, la) = train(&cfg, 3, |_| {}).unwrap();
        let (b, lb) = train(&cfg, 3, |_| {}).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.to_entries(), b.to_entries());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        write_loss_csv(&p, &la).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("step,total,main,aux2,aux3,aux4\n0,"));
        assert_eq!(text.lines().count(), 4);
    }
}
