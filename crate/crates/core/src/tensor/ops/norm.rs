use crate::error::{Error, Result};
use crate::tensor::{numel, Scalar, Tensor};

/// Group id of every element when the axes in `reduce` are collapsed.
fn group_ids(shape: &[usize], reduce: &[usize]) -> (Vec<usize>, usize) {
    let kept: Vec<usize> = (0..shape.len()).filter(|a| !reduce.contains(a)).collect();
    let groups = kept.iter().map(|&a| shape[a]).product::<usize>();
    let n = numel(shape);
    let mut ids = Vec::with_capacity(n);
    let mut counter = vec![0usize; shape.len()];
    for _ in 0..n {
        let mut g = 0;
        for &a in &kept {
            g = g * shape[a] + counter[a];
        }
        ids.push(g);
        for ax in (0..shape.len()).rev() {
            counter[ax] += 1;
            if counter[ax] < shape[ax] {
                break;
            }
            counter[ax] = 0;
        }
    }
    (ids, groups)
}

/// Per-group mean and biased variance of `x` over the reduced axes.
pub(crate) fn moments<S: Scalar>(data: &[S], shape: &[usize], reduce: &[usize]) -> (Vec<S>, Vec<S>) {
    let (ids, groups) = group_ids(shape, reduce);
    let count = S::lit((data.len() / groups.max(1)) as f64);
    let mut mean = vec![S::zero(); groups];
    for (&v, &g) in data.iter().zip(&ids) {
        mean[g] = mean[g] + v;
    }
    mean.iter_mut().for_each(|m| *m = *m / count);
    let mut var = vec![S::zero(); groups];
    for (&v, &g) in data.iter().zip(&ids) {
        let d = v - mean[g];
        var[g] = var[g] + d * d;
    }
    var.iter_mut().for_each(|v| *v = *v / count);
    (mean, var)
}

impl<S: Scalar> Tensor<S> {
    /// `(x - mean) / sqrt(var + eps)` with statistics taken over `axes`
    /// (biased variance). Layer norm reduces the feature axis, batch norm
    /// the batch and spatial axes.
    pub fn standardize(&self, axes: &[usize], eps: f64) -> Result<Tensor<S>> {
        if axes.is_empty() || axes.iter().any(|&a| a >= self.rank()) {
            return Err(Error::Shape(format!("invalid normalisation axes {axes:?} for {:?}", self.shape())));
        }
        let eps = S::lit(eps);
        let (ids, groups) = group_ids(self.shape(), axes);
        let (mean, var) = moments(&self.data(), self.shape(), axes);
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let xhat: Vec<S> = self
            .data()
            .iter()
            .zip(&ids)
            .map(|(&v, &g)| (v - mean[g]) * inv_std[g])
            .collect();
        let y = xhat.clone();
        let count = S::lit((self.numel() / groups.max(1)) as f64);
        Ok(Tensor::from_op(self.shape().to_vec(), xhat, vec![self.clone()], move |g| {
            let mut mg = vec![S::zero(); groups];
            let mut mgx = vec![S::zero(); groups];
            for ((&gv, &yv), &gi) in g.iter().zip(&y).zip(&ids) {
                mg[gi] = mg[gi] + gv;
                mgx[gi] = mgx[gi] + gv * yv;
            }
            let gi: Vec<S> = g
                .iter()
                .zip(&y)
                .zip(&ids)
                .map(|((&gv, &yv), &k)| inv_std[k] * (gv - mg[k] / count - yv * mgx[k] / count))
                .collect();
            vec![Some(gi)]
        }))
    }

    /// Layer norm over `axis` with per-feature affine `gamma`, `beta` of
    /// extent `shape[axis]`.
    pub fn layer_norm(&self, axis: usize, gamma: &Tensor<S>, beta: &Tensor<S>, eps: f64) -> Result<Tensor<S>> {
        let xhat = self.standardize(&[axis], eps)?;
        let mut bshape = vec![1; self.rank()];
        bshape[axis] = self.shape()[axis];
        xhat.mul(&gamma.reshape(&bshape)?)?.add(&beta.reshape(&bshape)?)
    }
}
