use super::shape::split_around;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

impl<S: Scalar> Tensor<S> {
    pub fn sum_all(&self) -> Tensor<S> {
        let s = self.data().iter().fold(S::zero(), |a, &b| a + b);
        let n = self.numel();
        Tensor::from_op(vec![], vec![s], vec![self.clone()], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean_all(&self) -> Tensor<S> {
        let n = S::lit(self.numel() as f64);
        self.sum_all().scale(S::one() / n)
    }

    fn reduce_axis(&self, axis: usize, kind: PoolKind) -> Result<Tensor<S>> {
        if axis >= self.rank() {
            return Err(Error::Shape(format!("reduce axis {axis} out of range for {:?}", self.shape())));
        }
        let (outer, extent, inner) = split_around(self.shape(), axis);
        if extent == 0 {
            return Err(Error::Shape("reduction over an empty axis".into()));
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = 1;
        let mut data = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::new();
        {
            let d = self.data();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |e: usize| d[(o * extent + e) * inner + i];
                    match kind {
                        PoolKind::Avg => {
                            let s = (0..extent).fold(S::zero(), |a, e| a + at(e));
                            data.push(s / S::lit(extent as f64));
                        }
                        PoolKind::Max => {
                            let mut best = 0;
                            for e in 1..extent {
                                if at(e) > at(best) {
                                    best = e;
                                }
                            }
                            argmax.push(best);
                            data.push(at(best));
                        }
                    }
                }
            }
        }
        let n = self.numel();
        Ok(Tensor::from_op(shape, data, vec![self.clone()], move |g| {
            let mut gi = vec![S::zero(); n];
            for o in 0..outer {
                for i in 0..inner {
                    let gv = g[o * inner + i];
                    match kind {
                        PoolKind::Avg => {
                            let share = gv / S::lit(extent as f64);
                            for e in 0..extent {
                                gi[(o * extent + e) * inner + i] = share;
                            }
                        }
                        PoolKind::Max => {
                            let e = argmax[o * inner + i];
                            gi[(o * extent + e) * inner + i] = gv;
                        }
                    }
                }
            }
            vec![Some(gi)]
        }))
    }

    /// Mean over `axis`, keeping it with extent 1.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<S>> {
        self.reduce_axis(axis, PoolKind::Avg)
    }

    /// Max over `axis`, keeping it with extent 1. Ties go to the first index.
    pub fn max_axis(&self, axis: usize) -> Result<Tensor<S>> {
        self.reduce_axis(axis, PoolKind::Max)
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<S>> {
        if axis >= self.rank() {
            return Err(Error::Shape(format!("softmax axis {axis} out of range for {:?}", self.shape())));
        }
        let (outer, extent, inner) = split_around(self.shape(), axis);
        let mut data = vec![S::zero(); self.numel()];
        {
            let d = self.data();
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |e: usize| (o * extent + e) * inner + i;
                    let m = (0..extent).fold(S::neg_infinity(), |m, e| m.max(d[idx(e)]));
                    let mut total = S::zero();
                    for e in 0..extent {
                        let v = (d[idx(e)] - m).exp();
                        data[idx(e)] = v;
                        total = total + v;
                    }
                    for e in 0..extent {
                        data[idx(e)] = data[idx(e)] / total;
                    }
                }
            }
        }
        let y = data.clone();
        Ok(Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |g| {
            let mut gi = vec![S::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |e: usize| (o * extent + e) * inner + i;
                    let dot = (0..extent).fold(S::zero(), |a, e| a + g[idx(e)] * y[idx(e)]);
                    for e in 0..extent {
                        gi[idx(e)] = y[idx(e)] * (g[idx(e)] - dot);
                    }
                }
            }
            vec![Some(gi)]
        }))
    }

    /// Global pooling over the two trailing (spatial) axes of `[T, C, H, W]`,
    /// giving `[T, C, 1, 1]`.
    pub fn global_pool(&self, kind: PoolKind) -> Result<Tensor<S>> {
        let s = self.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("global_pool expects rank 4, got {s:?}")));
        }
        let flat = self.reshape(&[s[0], s[1], s[2] * s[3]])?;
        let r = match kind {
            PoolKind::Avg => flat.mean_axis(2)?,
            PoolKind::Max => flat.max_axis(2)?,
        };
        r.reshape(&[s[0], s[1], 1, 1])
    }

    /// Non-overlapping `window x window` pooling (stride = window).
    pub fn pool2d(&self, kind: PoolKind, window: usize) -> Result<Tensor<S>> {
        let s = self.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("pool2d expects rank 4, got {s:?}")));
        }
        let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
        if window == 0 || window > h || window > w {
            return Err(Error::Shape(format!("pool window {window} larger than input {h}x{w}")));
        }
        let (oh, ow) = (h / window, w / window);
        let mut data = Vec::with_capacity(t * c * oh * ow);
        let mut src = Vec::with_capacity(t * c * oh * ow);
        {
            let d = self.data();
            for tc in 0..t * c {
                let plane = &d[tc * h * w..(tc + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = S::zero();
                        let mut best = (oy * window) * w + ox * window;
                        for ky in 0..window {
                            for kx in 0..window {
                                let p = (oy * window + ky) * w + ox * window + kx;
                                acc = acc + plane[p];
                                if plane[p] > plane[best] {
                                    best = p;
                                }
                            }
                        }
                        match kind {
                            PoolKind::Avg => data.push(acc / S::lit((window * window) as f64)),
                            PoolKind::Max => data.push(plane[best]),
                        }
                        src.push(tc * h * w + best);
                    }
                }
            }
        }
        let n = self.numel();
        Ok(Tensor::from_op(vec![t, c, oh, ow], data, vec![self.clone()], move |g| {
            let mut gi = vec![S::zero(); n];
            let area = S::lit((window * window) as f64);
            for tc in 0..t * c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let k = (tc * oh + oy) * ow + ox;
                        match kind {
                            PoolKind::Max => gi[src[k]] = gi[src[k]] + g[k],
                            PoolKind::Avg => {
                                for ky in 0..window {
                                    for kx in 0..window {
                                        let p = tc * h * w + (oy * window + ky) * w + ox * window + kx;
                                        gi[p] = gi[p] + g[k] / area;
                                    }
                                }
                            }
                        }
                    }
                }
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

    #[test]
    fn softmax_values() {
        let x = Tensor::<f32>::new(vec![0.0, 0.0, 0.0], &[3]).unwrap();
        for v in x.softmax(0).unwrap().to_vec() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let x = Tensor::<f32>::new(vec![1000.0, 1000.0], &[2]).unwrap();
        assert_eq!(x.softmax(0).unwrap().to_vec(), vec![0.5, 0.5]);
        let x = Tensor::<f32>::new(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let got = x.softmax(0).unwrap().to_vec();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, g) in got.iter().enumerate() {
            assert!((*g as f64 - ((i + 1) as f64).exp() / z).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(v in proptest::collection::vec(-1000.0f32..1000.0, 12)) {
            let x = Tensor::<f32>::new(v, &[3, 4]).unwrap();
            for axis in 0..2 {
                let y = x.softmax(axis).unwrap();
                let s = y.sum_all().item() / if axis == 0 { 4.0 } else { 3.0 };
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
            let y = x.softmax(1).unwrap().to_vec();
            for r in 0..3 {
                let s: f32 = y[r * 4..r * 4 + 4].iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pooling_values() {
        let c = Tensor::<f32>::full(&[2, 3, 4, 5], 1.75);
        assert!(c.global_pool(PoolKind::Avg).unwrap().to_vec().iter().all(|&v| v == 1.75));
        assert_eq!(c.global_pool(PoolKind::Avg).unwrap().shape(), &[2, 3, 1, 1]);
        let x = Tensor::<f32>::new(vec![1., 2., 3., 4.], &[1, 1, 2, 2]).unwrap();
        assert_eq!(x.pool2d(PoolKind::Max, 2).unwrap().to_vec(), vec![4.0]);
        assert_eq!(x.pool2d(PoolKind::Avg, 2).unwrap().to_vec(), vec![2.5]);
        assert!(x.pool2d(PoolKind::Max, 3).is_err());
    }

    #[test]
    fn channel_mean_matches_pairwise_average() {
        let v: Vec<f32> = (0..2 * 2 * 3 * 3).map(|i| (i as f32 * 0.7).sin()).collect();
        let x = Tensor::<f32>::new(v.clone(), &[2, 2, 3, 3]).unwrap();
        let m = x.mean_axis(1).unwrap().to_vec();
        for t in 0..2 {
            for p in 0..9 {
                let c0 = v[(t * 2) * 9 + p];
                let c1 = v[(t * 2 + 1) * 9 + p];
                assert_eq!(m[t * 9 + p], (c0 + c1) / 2.0);
            }
        }
    }

    #[test]
    fn gradients() {
        let r = check_gradients(&[vec![2, 3, 4, 4]], 21, |x| {
            let a = x[0].softmax(1)?;
            let b = x[0].global_pool(PoolKind::Avg)?;
            let c = x[0].global_pool(PoolKind::Max)?;
            let d = x[0].pool2d(PoolKind::Max, 2)?.pool2d(PoolKind::Avg, 2)?;
            let e = x[0].mean_axis(1)?.mul(&x[0].max_axis(1)?)?;
            a.mul(&b)?.add(&c)?.add(&d)?.add(&e)
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-3, "{r:?}");
    }
}
