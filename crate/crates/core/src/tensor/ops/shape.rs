use crate::error::{Error, Result};
use crate::tensor::{numel, Scalar, Tensor};

/// (outer, axis extent, inner) decomposition of a shape around `axis`.
pub(crate) fn split_around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Shape(format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

impl<S: Scalar> Tensor<S> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>> {
        if numel(shape) != self.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape(),
                shape
            )));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            |g| vec![Some(g.to_vec())],
        ))
    }

    pub fn concat(parts: &[Tensor<S>], axis: usize) -> Result<Tensor<S>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        check_axis(first.shape(), axis)?;
        for p in parts {
            let same_rank = p.rank() == first.rank();
            let others_match = same_rank
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !others_match {
                return Err(Error::Shape(format!(
                    "concat along {axis}: {:?} vs {:?}",
                    p.shape(),
                    first.shape()
                )));
            }
        }
        let (outer, _, inner) = split_around(first.shape(), axis);
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let mut data = Vec::with_capacity(numel(&shape));
        {
            let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
            for o in 0..outer {
                for (d, &e) in datas.iter().zip(&extents) {
                    data.extend_from_slice(&d[o * e * inner..(o + 1) * e * inner]);
                }
            }
        }
        let reqs: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
        Ok(Tensor::from_op(shape, data, parts.to_vec(), move |g| {
            let mut grads: Vec<Vec<S>> = extents
                .iter()
                .map(|&e| Vec::with_capacity(outer * e * inner))
                .collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (gi, &e) in grads.iter_mut().zip(&extents) {
                    gi.extend_from_slice(&g[pos..pos + e * inner]);
                    pos += e * inner;
                }
            }
            grads
                .into_iter()
                .zip(&reqs)
                .map(|(g, &r)| r.then_some(g))
                .collect()
        }))
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<S>> {
        check_axis(self.shape(), axis)?;
        if start + len > self.shape()[axis] {
            return Err(Error::Shape(format!(
                "narrow [{start}, {}) exceeds extent {} of axis {axis}",
                start + len,
                self.shape()[axis]
            )));
        }
        let (outer, extent, inner) = split_around(self.shape(), axis);
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        {
            let d = self.data();
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                data.extend_from_slice(&d[base..base + len * inner]);
            }
        }
        let n = self.numel();
        Ok(Tensor::from_op(shape, data, vec![self.clone()], move |g| {
            let mut gi = vec![S::zero(); n];
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                gi[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gi)]
        }))
    }

    /// Splits along `axis` into consecutive pieces of the given extents.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor<S>>> {
        check_axis(self.shape(), axis)?;
        if sizes.iter().sum::<usize>() != self.shape()[axis] {
            return Err(Error::Shape(format!(
                "split sizes {sizes:?} do not sum to extent {}",
                self.shape()[axis]
            )));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let t = self.narrow(axis, start, len);
                start += len;
                t
            })
            .collect()
    }

    /// Zero padding along `axis`.
    pub fn pad(&self, axis: usize, before: usize, after: usize) -> Result<Tensor<S>> {
        check_axis(self.shape(), axis)?;
        if before == 0 && after == 0 {
            return Ok(self.clone());
        }
        let (outer, extent, inner) = split_around(self.shape(), axis);
        let new_extent = extent + before + after;
        let mut shape = self.shape().to_vec();
        shape[axis] = new_extent;
        let mut data = vec![S::zero(); outer * new_extent * inner];
        {
            let d = self.data();
            for o in 0..outer {
                let dst = (o * new_extent + before) * inner;
                data[dst..dst + extent * inner]
                    .copy_from_slice(&d[o * extent * inner..(o + 1) * extent * inner]);
            }
        }
        Ok(Tensor::from_op(shape, data, vec![self.clone()], move |g| {
            let mut gi = Vec::with_capacity(outer * extent * inner);
            for o in 0..outer {
                let src = (o * new_extent + before) * inner;
                gi.extend_from_slice(&g[src..src + extent * inner]);
            }
            vec![Some(gi)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_gradients;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn concat_split_roundtrip(a in 1usize..4, b in 1usize..4, c in 1usize..4, axis in 0usize..3) {
            let shape_x = [2, 3, 2];
            let mut sx = shape_x.to_vec(); sx[axis] = a;
            let mut sy = shape_x.to_vec(); sy[axis] = b;
            let mut sz = shape_x.to_vec(); sz[axis] = c;
            let mk = |s: &[usize], off: f32| Tensor::<f32>::new(
                (0..numel(s)).map(|i| i as f32 * 0.37 + off).collect(), s).unwrap();
            let (x, y, z) = (mk(&sx, 0.0), mk(&sy, 100.0), mk(&sz, -50.0));
            let cat = Tensor::concat(&[x.clone(), y.clone(), z.clone()], axis).unwrap();
            let parts = cat.split(axis, &[a, b, c]).unwrap();
            prop_assert_eq!(parts[0].to_vec(), x.to_vec());
            prop_assert_eq!(parts[1].to_vec(), y.to_vec());
            prop_assert_eq!(parts[2].to_vec(), z.to_vec());
        }
    }

    #[test]
    fn pad_then_narrow_is_identity() {
        let x = Tensor::<f32>::new((0..12).map(|v| v as f32).collect(), &[1, 3, 4]).unwrap();
        let p = x.pad(2, 1, 3).unwrap();
        assert_eq!(p.shape(), &[1, 3, 8]);
        assert_eq!(p.narrow(2, 1, 4).unwrap().to_vec(), x.to_vec());
        assert!(x.narrow(1, 2, 2).is_err());
    }

    #[test]
    fn gradients() {
        let r = check_gradients(&[vec![2, 3, 2], vec![2, 1, 2]], 8, |x| {
            let c = Tensor::concat(&[x[0].clone(), x[1].clone()], 1)?;
            let parts = c.split(1, &[1, 3])?;
            let p = parts[1].pad(2, 1, 2)?.narrow(2, 0, 3)?;
            Ok(p.reshape(&[2, 9])?.mul(&parts[0].reshape(&[2, 2])?.narrow(1, 0, 1)?)?)
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-3, "{r:?}");
    }
}
