use std::cell::Cell;

use crate::error::{Error, Result};
use crate::tensor::{numel, strides, Scalar, Tensor};

thread_local! {
    static MATMUL_MULTS: Cell<u64> = const { Cell::new(0) };
}

/// Scalar multiplications performed by forward matmuls on this thread since
/// the last reset.
pub fn matmul_mults() -> u64 {
    MATMUL_MULTS.with(|c| c.get())
}

pub fn reset_matmul_mults() {
    MATMUL_MULTS.with(|c| c.set(0));
}

/// out[m,n] (+)= a[m,k] * b[k,n], accumulating over k in ascending order.
fn gemm<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// Transpose of the trailing two axes of a contiguous batch.
fn transpose_last2<S: Scalar>(x: &[S], batch: usize, r: usize, c: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for bi in 0..batch {
        let src = &x[bi * r * c..(bi + 1) * r * c];
        let dst = &mut out[bi * r * c..(bi + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

impl<S: Scalar> Tensor<S> {
    /// Batched matrix product `[.., m, k] x [.., k, n]`. Batch axes must match
    /// exactly, or the right operand may be a plain `[k, n]` matrix shared by
    /// every batch entry.
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::Shape(format!("matmul needs rank >= 2, got {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let shared_b = batch_b.is_empty() && !batch_a.is_empty();
        if k != k2 || !(shared_b || batch_a == batch_b) {
            return Err(Error::Shape(format!("matmul mismatch {sa:?} x {sb:?}")));
        }
        let batch = numel(batch_a);
        let mut out_shape = batch_a.to_vec();
        out_shape.extend([m, n]);
        let mut data = vec![S::zero(); batch * m * n];
        {
            let ad = self.data();
            let bd = other.data();
            for bi in 0..batch {
                let boff = if shared_b { 0 } else { bi * k * n };
                gemm(
                    &ad[bi * m * k..(bi + 1) * m * k],
                    &bd[boff..boff + k * n],
                    &mut data[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        MATMUL_MULTS.with(|c| c.set(c.get() + (batch * m * k * n) as u64));

        let (ac, bc) = (self.clone(), other.clone());
        Ok(Tensor::from_op(out_shape, data, vec![self.clone(), other.clone()], move |g| {
            let ad = ac.data();
            let bd = bc.data();
            let ga = ac.requires_grad().then(|| {
                // dA = dC · Bᵀ
                let bt = if shared_b {
                    transpose_last2(&bd, 1, k, n)
                } else {
                    transpose_last2(&bd, batch, k, n)
                };
                let mut ga = vec![S::zero(); batch * m * k];
                for bi in 0..batch {
                    let boff = if shared_b { 0 } else { bi * n * k };
                    gemm(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &bt[boff..boff + n * k],
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                ga
            });
            let gb = bc.requires_grad().then(|| {
                // dB = Aᵀ · dC (summed over batch when B is shared)
                let at = transpose_last2(&ad, batch, m, k);
                let mut gb = vec![S::zero(); if shared_b { k * n } else { batch * k * n }];
                for bi in 0..batch {
                    let boff = if shared_b { 0 } else { bi * k * n };
                    gemm(
                        &at[bi * k * m..(bi + 1) * k * m],
                        &g[bi * m * n..(bi + 1) * m * n],
                        &mut gb[boff..boff + k * n],
                        k,
                        m,
                        n,
                    );
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    /// Axis permutation; `axes[i]` names the input axis placed at output
    /// position `i`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<S>> {
        let shape = self.shape();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Shape(format!("invalid permutation {axes:?} for {shape:?}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let in_strides = strides(shape);
        // stride in the input for each output axis
        let gather: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let n = self.numel();
        let mut index = Vec::with_capacity(n);
        let mut counter = vec![0usize; rank];
        let mut pos = 0usize;
        for _ in 0..n {
            index.push(pos);
            for ax in (0..rank).rev() {
                counter[ax] += 1;
                pos += gather[ax];
                if counter[ax] < out_shape[ax] {
                    break;
                }
                pos -= gather[ax] * counter[ax];
                counter[ax] = 0;
            }
        }
        let data: Vec<S> = {
            let d = self.data();
            index.iter().map(|&i| d[i]).collect()
        };
        Ok(Tensor::from_op(out_shape, data, vec![self.clone()], move |g| {
            let mut gi = vec![S::zero(); n];
            for (k, &i) in index.iter().enumerate() {
                gi[i] = g[k];
            }
            vec![Some(gi)]
        }))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor<S>> {
        let mut axes: Vec<usize> = (0..self.rank()).collect();
        if a >= axes.len() || b >= axes.len() {
            return Err(Error::Shape(format!("transpose axes {a},{b} out of range for {:?}", self.shape())));
        }
        axes.swap(a, b);
        self.permute(&axes)
    }

    /// `x · w + b` over the last axis, with `w: [in, out]` and `b: [out]`.
    pub fn linear(&self, w: &Tensor<S>, b: Option<&Tensor<S>>) -> Result<Tensor<S>> {
        let shape = self.shape().to_vec();
        let din = *shape.last().ok_or_else(|| Error::Shape("linear on a scalar".into()))?;
        let rows = self.numel() / din.max(1);
        let y = self.reshape(&[rows, din])?.matmul(w)?;
        let y = match b {
            Some(b) => y.add(b)?,
            None => y,
        };
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = w.shape()[1];
        y.reshape(&out_shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_and_small_products() {
        let eye = Tensor::<f32>::new(vec![1., 0., 0., 0., 1., 0., 0., 0., 1.], &[3, 3]).unwrap();
        let x = Tensor::<f32>::new(vec![1., 2., 3., 4., 5., 6.], &[3, 2]).unwrap();
        assert_eq!(eye.matmul(&x).unwrap().to_vec(), x.to_vec());
        let a = Tensor::<f32>::new(vec![1., 2., 3., 4.], &[2, 2]).unwrap();
        let i2 = Tensor::<f32>::new(vec![1., 0., 0., 1.], &[2, 2]).unwrap();
        assert_eq!(a.matmul(&i2).unwrap().to_vec(), vec![1., 2., 3., 4.]);
    }

    #[test]
    fn random_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = Tensor::<f64>::new(a.clone(), &[4, 5])
            .unwrap()
            .matmul(&Tensor::new(b.clone(), &[5, 3]).unwrap())
            .unwrap()
            .to_vec();
        for i in 0..4 {
            for j in 0..3 {
                let mut s = 0.0;
                for p in 0..5 {
                    s += a[i * 5 + p] * b[p * 3 + j];
                }
                assert!((got[i * 3 + j] - s).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn mismatch_is_error() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn mult_counter_counts_mkn() {
        reset_matmul_mults();
        let a = Tensor::<f32>::zeros(&[2, 4, 5]);
        let b = Tensor::<f32>::zeros(&[2, 5, 3]);
        a.matmul(&b).unwrap();
        assert_eq!(matmul_mults(), 2 * 4 * 5 * 3);
    }

    #[test]
    fn permute_roundtrip() {
        let x = Tensor::<f32>::new((0..24).map(|v| v as f32).collect(), &[2, 3, 4]).unwrap();
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        let z = y.permute(&[1, 2, 0]).unwrap();
        assert_eq!(z.to_vec(), x.to_vec());
        assert!(x.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn gradients() {
        let r = check_gradients(&[vec![2, 3, 4], vec![2, 4, 5], vec![4, 5]], 3, |x| {
            let y = x[0].matmul(&x[1])?;
            let z = x[0].matmul(&x[2])?.permute(&[2, 0, 1])?;
            Ok(y.add(&z.permute(&[1, 2, 0])?)?.transpose(1, 2)?)
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-3, "{r:?}");
        let r = check_gradients(&[vec![3, 2, 4], vec![4, 6], vec![6]], 5, |x| {
            x[0].linear(&x[1], Some(&x[2]))
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-3, "{r:?}");
    }
}
