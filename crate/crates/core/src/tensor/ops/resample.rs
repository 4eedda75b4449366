use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Source taps of a half-pixel-centred linear resize along one axis:
/// `(i0, i1, frac)` for every output index.
pub fn linear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            // coincident taps at the border carry no fraction, so edges copy exactly
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear resize of a single `h x w` plane (align-corners = false).
pub fn resize_plane(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut out = Vec::with_capacity(oh * ow);
    for &(y0, y1, fy) in &ty {
        let fy = fy as f32;
        for &(x0, x1, fx) in &tx {
            let fx = fx as f32;
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

impl<S: Scalar> Tensor<S> {
    /// Bilinear upsampling of `[T, C, H, W]` by an integer factor using
    /// half-pixel centres (align-corners = false).
    pub fn upsample_bilinear(&self, scale: usize) -> Result<Tensor<S>> {
        let s = self.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("upsample expects rank 4, got {s:?}")));
        }
        if scale < 1 {
            return Err(Error::Shape("upsample scale must be >= 1".into()));
        }
        if scale == 1 {
            return Ok(self.clone());
        }
        let (n, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h * scale, w * scale);
        let ty: Vec<(usize, usize, S)> = linear_taps(h, oh).into_iter().map(|(a, b, f)| (a, b, S::lit(f))).collect();
        let tx: Vec<(usize, usize, S)> = linear_taps(w, ow).into_iter().map(|(a, b, f)| (a, b, S::lit(f))).collect();
        let one = S::one();
        let mut out = Vec::with_capacity(n * oh * ow);
        {
            let d = self.data();
            for p in 0..n {
                let src = &d[p * h * w..(p + 1) * h * w];
                for &(y0, y1, fy) in &ty {
                    for &(x0, x1, fx) in &tx {
                        let top = src[y0 * w + x0] * (one - fx) + src[y0 * w + x1] * fx;
                        let bot = src[y1 * w + x0] * (one - fx) + src[y1 * w + x1] * fx;
                        out.push(top * (one - fy) + bot * fy);
                    }
                }
            }
        }
        Ok(Tensor::from_op(vec![s[0], s[1], oh, ow], out, vec![self.clone()], move |g| {
            let mut gi = vec![S::zero(); n * h * w];
            for p in 0..n {
                let dst = &mut gi[p * h * w..(p + 1) * h * w];
                let mut k = p * oh * ow;
                for &(y0, y1, fy) in &ty {
                    for &(x0, x1, fx) in &tx {
                        let gv = g[k];
                        k += 1;
                        dst[y0 * w + x0] = dst[y0 * w + x0] + gv * (one - fy) * (one - fx);
                        dst[y0 * w + x1] = dst[y0 * w + x1] + gv * (one - fy) * fx;
                        dst[y1 * w + x0] = dst[y1 * w + x0] + gv * fy * (one - fx);
                        dst[y1 * w + x1] = dst[y1 * w + x1] + gv * fy * fx;
                    }
                }
            }
            vec![Some(gi)]
        }))
    }
}
