//! Per-stage gated fusion of appearance and motion features.
//!
//! Each modality is shrunk to C/2 channels by a 1x1 convolution, the two are
//! concatenated and a 1x1 convolution produces 2C channels whose halves give
//! the per-modality gates `g = GAP(sigmoid(F))`. The gated features are then
//! blended with a co-attention map `R = sigmoid(C_attn + S_attn)`:
//! `B = R * A_hat + (1 - R) * M_hat`.

use crate::error::{Error, Result};
use crate::nn::{join, Conv2d, Init, Module, ParamSet};
use crate::tensor::{PoolKind, Scalar, Tensor};

/// Kernel of the co-spatial attention convolution.
pub const SPATIAL_KERNEL: usize = 7;

pub struct Bfm<S: Scalar = f32> {
    pub channels: usize,
    pub shrink_a: Conv2d<S>,
    pub shrink_m: Conv2d<S>,
    pub fuse: Conv2d<S>,
    pub fc1: Conv2d<S>,
    pub fc2: Conv2d<S>,
    pub spatial: Conv2d<S>,
}

/// Intermediate values of one fusion pass.
pub struct BfmTrace<S: Scalar> {
    pub gate_a: Tensor<S>,
    pub gate_m: Tensor<S>,
    pub a_hat: Tensor<S>,
    pub m_hat: Tensor<S>,
    /// Blend weights for the appearance branch, `[T, C, H, W]`.
    pub r_hat: Tensor<S>,
    pub out: Tensor<S>,
}

impl<S: Scalar> Bfm<S> {
    pub fn new(init: &mut Init, channels: usize) -> Self {
        let c = channels;
        let half = (c / 2).max(1);
        let hidden = (2 * c / 4).max(1);
        Self {
            channels: c,
            shrink_a: Conv2d::pointwise(init, c, half, true),
            shrink_m: Conv2d::pointwise(init, c, half, true),
            fuse: Conv2d::pointwise(init, 2 * half, 2 * c, true),
            fc1: Conv2d::pointwise(init, 2 * c, hidden, true),
            fc2: Conv2d::pointwise(init, hidden, 2 * c, true),
            spatial: Conv2d::new(
                init,
                2,
                1,
                SPATIAL_KERNEL,
                crate::tensor::Conv2dSpec::default(),
                true,
            ),
        }
    }

    fn check(&self, a: &Tensor<S>, m: &Tensor<S>) -> Result<()> {
        if a.shape() != m.shape() || a.rank() != 4 || a.shape()[1] != self.channels {
            return Err(Error::Shape(format!(
                "fusion expects two [T, {}, H, W] maps, got {:?} and {:?}",
                self.channels,
                a.shape(),
                m.shape()
            )));
        }
        Ok(())
    }

    /// Gate vectors `(g_A, g_M)`, each `[T, C, 1, 1]` in [0, 1].
    pub fn gates(&self, a: &Tensor<S>, m: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        self.check(a, m)?;
        let f = Tensor::concat(&[self.shrink_a.forward(a)?, self.shrink_m.forward(m)?], 1)?;
        let f = self.fuse.forward(&f)?;
        let halves = f.split(1, &[self.channels, self.channels])?;
        Ok((
            halves[0].sigmoid().global_pool(PoolKind::Avg)?,
            halves[1].sigmoid().global_pool(PoolKind::Avg)?,
        ))
    }

    /// `(A_hat, M_hat) = (g_A * A, g_M * M)`.
    pub fn gate_unit(&self, a: &Tensor<S>, m: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let (ga, gm) = self.gates(a, m)?;
        Ok((a.mul(&ga)?, m.mul(&gm)?))
    }

    /// Shared bottleneck on average- and max-pooled descriptors, summed:
    /// `[T, 2C, 1, 1]`.
    pub fn co_channel_attention(&self, r: &Tensor<S>) -> Result<Tensor<S>> {
        let path = |d: Tensor<S>| -> Result<Tensor<S>> { self.fc2.forward(&self.fc1.forward(&d)?.relu()) };
        path(r.global_pool(PoolKind::Avg)?)?.add(&path(r.global_pool(PoolKind::Max)?)?)
    }

    /// Convolution over the channel-wise mean and max maps: `[T, 1, H, W]`.
    /// Borders are edge-replicated so a constant map yields a constant output.
    pub fn co_spatial_attention(&self, r: &Tensor<S>) -> Result<Tensor<S>> {
        let d = Tensor::concat(&[r.mean_axis(1)?, r.max_axis(1)?], 1)?;
        let p = SPATIAL_KERNEL / 2;
        self.spatial.forward(&replicate_pad(&replicate_pad(&d, 2, p)?, 3, p)?)
    }

    /// Appearance blend weights: the first C channels of
    /// `sigmoid(C_attn + S_attn)` broadcast to `[T, 2C, H, W]`.
    pub fn co_attention(&self, a_hat: &Tensor<S>, m_hat: &Tensor<S>) -> Result<Tensor<S>> {
        let r = Tensor::concat(&[a_hat.clone(), m_hat.clone()], 1)?;
        let ca = self.co_channel_attention(&r)?.narrow(1, 0, self.channels)?;
        let sa = self.co_spatial_attention(&r)?;
        Ok(ca.add(&sa)?.sigmoid())
    }

    pub fn fuse_traced(&self, a: &Tensor<S>, m: &Tensor<S>) -> Result<BfmTrace<S>> {
        let (gate_a, gate_m) = self.gates(a, m)?;
        let a_hat = a.mul(&gate_a)?;
        let m_hat = m.mul(&gate_m)?;
        let r_hat = self.co_attention(&a_hat, &m_hat)?;
        let out = blend(&r_hat, &a_hat, &m_hat)?;
        Ok(BfmTrace {
            gate_a,
            gate_m,
            a_hat,
            m_hat,
            r_hat,
            out,
        })
    }

    pub fn fuse(&self, a: &Tensor<S>, m: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.fuse_traced(a, m)?.out)
    }
}

/// `R * A + (1 - R) * M`, evaluated as `M + R * (A - M)` so that equal
/// inputs pass through exactly.
pub fn blend<S: Scalar>(r: &Tensor<S>, a: &Tensor<S>, m: &Tensor<S>) -> Result<Tensor<S>> {
    m.add(&r.mul(&a.sub(m)?)?)
}

/// Pads `axis` by repeating its first and last slices `p` times.
pub fn replicate_pad<S: Scalar>(x: &Tensor<S>, axis: usize, p: usize) -> Result<Tensor<S>> {
    if p == 0 {
        return Ok(x.clone());
    }
    let n = x.shape()[axis];
    let first = x.narrow(axis, 0, 1)?;
    let last = x.narrow(axis, n - 1, 1)?;
    let mut parts = vec![first; p];
    parts.push(x.clone());
    parts.extend(std::iter::repeat(last).take(p));
    Tensor::concat(&parts, axis)
}

impl<S: Scalar> Module<S> for Bfm<S> {
    fn collect(&self, prefix: &str, set: &mut ParamSet<S>) {
        self.shrink_a.collect(&join(prefix, "shrink_a"), set);
        self.shrink_m.collect(&join(prefix, "shrink_m"), set);
        self.fuse.collect(&join(prefix, "fuse"), set);
        self.fc1.collect(&join(prefix, "fc1"), set);
        self.fc2.collect(&join(prefix, "fc2"), set);
        self.spatial.collect(&join(prefix, "spatial"), set);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zero_out;
    use crate::tensor::gradcheck::GradCheck;

    fn sig(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    fn pair(init: &mut Init, shape: &[usize]) -> (Tensor<f64>, Tensor<f64>) {
        (init.uniform::<f64>(shape, 1.0).detach(), init.uniform::<f64>(shape, 1.0).detach())
    }

    #[test]
    fn neutral_gates_halve_input() {
        let mut init = Init::new(1);
        let bfm = Bfm::<f64>::new(&mut init, 4);
        zero_out(&bfm.fuse.weight);
        zero_out(bfm.fuse.bias.as_ref().unwrap());
        let (a, m) = pair(&mut init, &[2, 4, 5, 5]);
        let (ga, gm) = bfm.gates(&a, &m).unwrap();
        assert!(ga.to_vec().iter().chain(gm.to_vec().iter()).all(|&g| g == 0.5));
        let (ah, _) = bfm.gate_unit(&a, &m).unwrap();
        let half: Vec<f64> = a.to_vec().iter().map(|v| v / 2.0).collect();
        assert_eq!(ah.to_vec(), half);
    }

    #[test]
    fn zero_appearance_stays_zero() {
        let mut init = Init::new(2);
        let bfm = Bfm::<f64>::new(&mut init, 4);
        let m = init.uniform::<f64>(&[2, 4, 4, 4], 1.0);
        let (ah, _) = bfm.gate_unit(&Tensor::zeros(&[2, 4, 4, 4]), &m).unwrap();
        assert!(ah.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gate_matches_scalar_recomputation() {
        let mut init = Init::new(3);
        let bfm = Bfm::<f64>::new(&mut init, 4);
        let (a, m) = pair(&mut init, &[2, 4, 3, 5]);
        let f = bfm
            .fuse
            .forward(&Tensor::concat(&[bfm.shrink_a.forward(&a).unwrap(), bfm.shrink_m.forward(&m).unwrap()], 1).unwrap())
            .unwrap()
            .to_vec();
        let (ah, mh) = bfm.gate_unit(&a, &m).unwrap();
        let (ah, mh) = (ah.to_vec(), mh.to_vec());
        let (av, mv) = (a.to_vec(), m.to_vec());
        let hw = 15;
        for t in 0..2 {
            for c in 0..4 {
                let ga: f64 = (0..hw).map(|i| sig(f[(t * 8 + c) * hw + i])).sum::<f64>() / hw as f64;
                let gm: f64 = (0..hw).map(|i| sig(f[(t * 8 + 4 + c) * hw + i])).sum::<f64>() / hw as f64;
                for i in 0..hw {
                    let idx = (t * 4 + c) * hw + i;
                    assert!((ah[idx] - ga * av[idx]).abs() < 1e-12);
                    assert!((mh[idx] - gm * mv[idx]).abs() < 1e-12);
                }
            }
        }
    }

    /// `Fc2(relu(Fc1(v)))` with plain loops over the 1x1 weights.
    fn bottleneck(bfm: &Bfm<f64>, v: &[f64]) -> Vec<f64> {
        let (w1, b1) = (bfm.fc1.weight.to_vec(), bfm.fc1.bias.as_ref().unwrap().to_vec());
        let (w2, b2) = (bfm.fc2.weight.to_vec(), bfm.fc2.bias.as_ref().unwrap().to_vec());
        let (hid, cin) = (b1.len(), v.len());
        let h: Vec<f64> = (0..hid)
            .map(|j| (b1[j] + (0..cin).map(|i| w1[j * cin + i] * v[i]).sum::<f64>()).max(0.0))
            .collect();
        (0..cin).map(|o| b2[o] + (0..hid).map(|j| w2[o * hid + j] * h[j]).sum::<f64>()).collect()
    }

    #[test]
    fn channel_attention_constant_map() {
        let mut init = Init::new(4);
        let bfm = Bfm::<f64>::new(&mut init, 4);
        let vals = [0.3, -0.2, 0.7, 0.1, 0.0, 0.5, -0.4, 0.9];
        let mut data = Vec::new();
        for v in vals {
            data.extend(std::iter::repeat(v).take(9));
        }
        let r = Tensor::new(data, &[1, 8, 3, 3]).unwrap();
        let got = bfm.co_channel_attention(&r).unwrap().to_vec();
        let want: Vec<f64> = bottleneck(&bfm, &vals).iter().map(|v| 2.0 * v).collect();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_attention_zero() {
        let mut init = Init::new(5);
        let bfm = Bfm::<f64>::new(&mut init, 4);
        zero_out(bfm.fc1.bias.as_ref().unwrap());
        zero_out(bfm.fc2.bias.as_ref().unwrap());
        let out = bfm.co_channel_attention(&Tensor::zeros(&[2, 8, 3, 3])).unwrap();
        assert_eq!(out.shape(), &[2, 8, 1, 1]);
        assert!(out.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_attention_two_path_oracle() {
        let mut init = Init::new(6);
        let bfm = Bfm::<f64>::new(&mut init, 4);
        let r = init.uniform::<f64>(&[2, 8, 3, 4], 1.0);
        let rv = r.to_vec();
        let got = bfm.co_channel_attention(&r).unwrap().to_vec();
        for t in 0..2 {
            let plane = |c: usize| &rv[(t * 8 + c) * 12..(t * 8 + c + 1) * 12];
            let avg: Vec<f64> = (0..8).map(|c| plane(c).iter().sum::<f64>() / 12.0).collect();
            let max: Vec<f64> = (0..8).map(|c| plane(c).iter().cloned().fold(f64::MIN, f64::max)).collect();
            let (pa, pm) = (bottleneck(&bfm, &avg), bottleneck(&bfm, &max));
            for c in 0..8 {
                assert!((got[t * 8 + c] - (pa[c] + pm[c])).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn spatial_attention_properties() {
        let mut init = Init::new(7);
        let bfm = Bfm::<f64>::new(&mut init, 4);
        // single channel: mean and max descriptors coincide
        let x = init.uniform::<f64>(&[1, 1, 6, 6], 1.0);
        assert_eq!(x.mean_axis(1).unwrap().to_vec(), x.max_axis(1).unwrap().to_vec());

        let c = Tensor::<f64>::full(&[2, 8, 6, 6], 0.37);
        let out = bfm.co_spatial_attention(&c).unwrap().to_vec();
        assert!(out.iter().all(|&v| (v - out[0]).abs() < 1e-12));
    }

    #[test]
    fn spatial_attention_direct_oracle() {
        let mut init = Init::new(8);
        let bfm = Bfm::<f64>::new(&mut init, 2);
        let (h, w, ch) = (5usize, 6usize, 4usize);
        let r = init.uniform::<f64>(&[1, ch, h, w], 1.0);
        let rv = r.to_vec();
        let wt = bfm.spatial.weight.to_vec();
        let b = bfm.spatial.bias.as_ref().unwrap().to_vec()[0];
        let got = bfm.co_spatial_attention(&r).unwrap().to_vec();
        let k = SPATIAL_KERNEL as isize;
        let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        for y in 0..h {
            for x in 0..w {
                let mut acc = b;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = clamp(y as isize + ky - k / 2, h);
                        let ix = clamp(x as isize + kx - k / 2, w);
                        let vals: Vec<f64> = (0..ch).map(|c| rv[(c * h + iy) * w + ix]).collect();
                        let mean = vals.iter().sum::<f64>() / ch as f64;
                        let max = vals.iter().cloned().fold(f64::MIN, f64::max);
                        let wi = (ky * k + kx) as usize;
                        acc += wt[wi] * mean + wt[(k * k) as usize + wi] * max;
                    }
                }
                assert!((got[y * w + x] - acc).abs() < 1e-12, "({y},{x})");
            }
        }
    }

    #[test]
    fn equal_inputs_pass_through() {
        let mut init = Init::new(9);
        let bfm = Bfm::<f32>::new(&mut init, 4);
        // mirror the gate rows so both halves of the fusion output agree
        let w = bfm.fuse.weight.to_vec();
        let b = bfm.fuse.bias.as_ref().unwrap().to_vec();
        let per = w.len() / 8;
        bfm.fuse.weight.update_data(|d| d[4 * per..].copy_from_slice(&w[..4 * per]));
        bfm.fuse.bias.as_ref().unwrap().update_data(|d| d[4..].copy_from_slice(&b[..4]));
        let wa = bfm.shrink_a.weight.to_vec();
        let ba = bfm.shrink_a.bias.as_ref().unwrap().to_vec();
        bfm.shrink_m.weight.set_data(&wa).unwrap();
        bfm.shrink_m.bias.as_ref().unwrap().set_data(&ba).unwrap();
        let a = init.uniform::<f32>(&[2, 4, 4, 4], 1.0).detach();
        let tr = bfm.fuse_traced(&a, &a).unwrap();
        assert_eq!(tr.a_hat.to_vec(), tr.m_hat.to_vec());
        assert_eq!(tr.out.to_vec(), tr.a_hat.to_vec());
    }

    #[test]
    fn saturated_gate_selects_appearance() {
        let mut init = Init::new(10);
        let bfm = Bfm::<f32>::new(&mut init, 4);
        bfm.fc2.bias.as_ref().unwrap().update_data(|d| d.iter_mut().for_each(|v| *v = 60.0));
        let (a, m) = (
            init.uniform::<f32>(&[2, 4, 4, 4], 1.0).detach(),
            init.uniform::<f32>(&[2, 4, 4, 4], 1.0).detach(),
        );
        let tr = bfm.fuse_traced(&a, &m).unwrap();
        for (b, ah) in tr.out.to_vec().iter().zip(tr.a_hat.to_vec()) {
            assert!((b - ah).abs() <= 1e-6);
        }
    }

    #[test]
    fn output_is_convex_blend() {
        let mut init = Init::new(11);
        for trial in 0..100 {
            let bfm = Bfm::<f32>::new(&mut init, 4);
            let scale = 1.0 + (trial % 5) as f64;
            let a = init.uniform::<f32>(&[2, 4, 4, 4], scale).detach();
            let m = init.uniform::<f32>(&[2, 4, 4, 4], scale).detach();
            let tr = bfm.fuse_traced(&a, &m).unwrap();
            assert!(tr.r_hat.to_vec().iter().all(|&r| (0.0..=1.0).contains(&r)));
            let (ah, mh, b) = (tr.a_hat.to_vec(), tr.m_hat.to_vec(), tr.out.to_vec());
            for i in 0..b.len() {
                assert!(b[i] >= ah[i].min(mh[i]) - 1e-6 && b[i] <= ah[i].max(mh[i]) + 1e-6);
            }
        }
    }

    #[test]
    fn frames_are_independent() {
        let mut init = Init::new(12);
        let bfm = Bfm::<f32>::new(&mut init, 4);
        let (a, m) = (
            init.uniform::<f32>(&[3, 4, 4, 4], 1.0).detach(),
            init.uniform::<f32>(&[3, 4, 4, 4], 1.0).detach(),
        );
        let perm = [2usize, 0, 1];
        let reorder = |x: &Tensor<f32>| {
            let parts: Vec<_> = perm.iter().map(|&p| x.narrow(0, p, 1).unwrap()).collect();
            Tensor::concat(&parts, 0).unwrap()
        };
        let out = bfm.fuse(&a, &m).unwrap();
        let out_p = bfm.fuse(&reorder(&a), &reorder(&m)).unwrap();
        assert_eq!(out_p.to_vec(), reorder(&out).to_vec());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let bfm = Bfm::<f32>::new(&mut Init::new(0), 4);
        assert!(bfm.fuse(&Tensor::zeros(&[1, 4, 4, 4]), &Tensor::zeros(&[1, 4, 2, 2])).is_err());
        assert!(bfm.fuse(&Tensor::zeros(&[1, 2, 4, 4]), &Tensor::zeros(&[1, 2, 4, 4])).is_err());
    }

    #[test]
    fn gradients() {
        let mut init = Init::new(13);
        let bfm = Bfm::<f64>::new(&mut init, 4);
        let a = init.uniform::<f64>(&[2, 4, 4, 4], 1.0);
        let m = init.uniform::<f64>(&[2, 4, 4, 4], 1.0);
        let mut leaves = vec![a.clone(), m.clone()];
        leaves.extend(bfm.parameters());
        let r = GradCheck::with_seed(13).run(&leaves, || bfm.fuse(&a, &m)).unwrap();
        assert!(r.coordinates >= 20);
        assert!(r.max_rel_err <= 1e-3, "{r:?}");
    }
}
