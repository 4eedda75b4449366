use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Geometry of a square-kernel 2-d convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            pad: 0,
            groups: 1,
        }
    }
}

impl Conv2dSpec {
    pub fn new(stride: usize, pad: usize, groups: usize) -> Self {
        Self { stride, pad, groups }
    }

    pub fn output_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        let padded = input + 2 * self.pad;
        if self.stride == 0 || kernel > padded || (padded - kernel) % self.stride != 0 {
            return Err(Error::Shape(format!(
                "kernel {kernel} with stride {} and pad {} does not tile input extent {input}",
                self.stride, self.pad
            )));
        }
        Ok((padded - kernel) / self.stride + 1)
    }
}

struct Geometry {
    t: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    oh: usize,
    ow: usize,
    cin_g: usize,
    cout_g: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    /// Visits every (output index, input index, weight index) triple of the
    /// contraction in a fixed order.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let g = self;
        for t in 0..g.t {
            for oc in 0..g.cout {
                let group = oc / g.cout_g;
                for icg in 0..g.cin_g {
                    let ic = group * g.cin_g + icg;
                    let in_base = (t * g.cin + ic) * g.h * g.w;
                    let w_base = (oc * g.cin_g + icg) * g.k * g.k;
                    for ky in 0..g.k {
                        for oy in 0..g.oh {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let out_row = ((t * g.cout + oc) * g.oh + oy) * g.ow;
                            let in_row = in_base + iy as usize * g.w;
                            for kx in 0..g.k {
                                let wi = w_base + ky * g.k + kx;
                                for ox in 0..g.ow {
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if ix < 0 || ix >= g.w as isize {
                                        continue;
                                    }
                                    f(out_row + ox, in_row + ix as usize, wi);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<S: Scalar> Tensor<S> {
    /// 2-d convolution of `[T, Cin, H, W]` with weights `[Cout, Cin/groups, k, k]`.
    pub fn conv2d(&self, weight: &Tensor<S>, bias: Option<&Tensor<S>>, spec: Conv2dSpec) -> Result<Tensor<S>> {
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::Shape(format!("conv2d expects [T,C,H,W] and square [O,I,k,k], got {xs:?}, {ws:?}")));
        }
        let (t, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, cin_g, k) = (ws[0], ws[1], ws[2]);
        let groups = spec.groups;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(Error::Shape(format!(
                "conv2d groups {groups} incompatible with Cin {cin}, Cout {cout}, weight {ws:?}"
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::Shape(format!("conv2d bias {:?} != [{cout}]", b.shape())));
            }
        }
        let oh = spec.output_extent(h, k)?;
        let ow = spec.output_extent(w, k)?;
        let geo = Geometry {
            t,
            cin,
            h,
            w,
            cout,
            k,
            oh,
            ow,
            cin_g,
            cout_g: cout / groups,
            stride: spec.stride,
            pad: spec.pad,
        };
        let mut out = vec![S::zero(); t * cout * oh * ow];
        {
            let xd = self.data();
            let wd = weight.data();
            if let Some(b) = bias {
                let bd = b.data();
                for (i, o) in out.iter_mut().enumerate() {
                    *o = bd[(i / (oh * ow)) % cout];
                }
            }
            geo.for_each(|o, i, wi| out[o] = out[o] + xd[i] * wd[wi]);
        }
        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        let (xc, wc, has_bias) = (self.clone(), weight.clone(), bias.is_some());
        let bias_req = bias.is_some_and(|b| b.requires_grad());
        Ok(Tensor::from_op(vec![t, cout, oh, ow], out, inputs, move |g| {
            let xd = xc.data();
            let wd = wc.data();
            let mut gx = xc.requires_grad().then(|| vec![S::zero(); xd.len()]);
            let mut gw = wc.requires_grad().then(|| vec![S::zero(); wd.len()]);
            match (&mut gx, &mut gw) {
                (Some(gx), Some(gw)) => geo.for_each(|o, i, wi| {
                    gx[i] = gx[i] + g[o] * wd[wi];
                    gw[wi] = gw[wi] + g[o] * xd[i];
                }),
                (Some(gx), None) => geo.for_each(|o, i, wi| gx[i] = gx[i] + g[o] * wd[wi]),
                (None, Some(gw)) => geo.for_each(|o, i, wi| gw[wi] = gw[wi] + g[o] * xd[i]),
                (None, None) => {}
            }
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(bias_req.then(|| {
                    let mut gb = vec![S::zero(); geo.cout];
                    for (i, &gv) in g.iter().enumerate() {
                        let c = (i / (geo.oh * geo.ow)) % geo.cout;
                        gb[c] = gb[c] + gv;
                    }
                    gb
                }));
            }
            grads
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Six-loop reference convolution.
    #[allow(clippy::too_many_arguments)]
    fn conv_oracle(
        x: &[f64],
        (t, cin, h, w): (usize, usize, usize, usize),
        wt: &[f64],
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Vec<f64> {
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let cin_g = cin / groups;
        let cout_g = cout / groups;
        let mut out = vec![0.0; t * cout * oh * ow];
        for n in 0..t {
            for oc in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for icg in 0..cin_g {
                            let ic = (oc / cout_g) * cin_g + icg;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        s += x[((n * cin + ic) * h + iy as usize) * w + ix as usize]
                                            * wt[((oc * cin_g + icg) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        out[((n * cout + oc) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        out
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn identity_pointwise() {
        let x = Tensor::<f32>::new((0..2 * 3 * 4 * 4).map(|v| v as f32).collect(), &[2, 3, 4, 4]).unwrap();
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = Tensor::new(eye, &[3, 3, 1, 1]).unwrap();
        assert_eq!(x.conv2d(&w, None, Conv2dSpec::default()).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let x = Tensor::<f32>::ones(&[1, 1, 5, 5]);
        let w = Tensor::<f32>::ones(&[1, 1, 3, 3]);
        let y = x.conv2d(&w, None, Conv2dSpec::new(1, 1, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 5, 5]);
        assert_eq!(y.to_vec()[12], 9.0);
        assert_eq!(y.to_vec()[0], 4.0);
    }

    #[test]
    fn non_integral_extent_is_error() {
        let x = Tensor::<f32>::ones(&[1, 1, 5, 5]);
        let w = Tensor::<f32>::ones(&[1, 1, 2, 2]);
        assert!(x.conv2d(&w, None, Conv2dSpec::new(2, 0, 1)).is_err());
    }

    #[test]
    fn matches_six_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for &(cin, cout, k, stride, pad, groups) in
            &[(3, 4, 3, 1, 1, 1), (4, 6, 2, 2, 0, 2), (3, 5, 1, 1, 0, 1), (4, 4, 4, 4, 0, 1)]
        {
            let dims = (2, cin, 8, 8);
            let x = rand_vec(&mut rng, 2 * cin * 64);
            let w = rand_vec(&mut rng, cout * (cin / groups) * k * k);
            let want = conv_oracle(&x, dims, &w, cout, k, stride, pad, groups);
            let got = Tensor::<f64>::new(x, &[2, cin, 8, 8])
                .unwrap()
                .conv2d(&Tensor::new(w, &[cout, cin / groups, k, k]).unwrap(), None, Conv2dSpec::new(stride, pad, groups))
                .unwrap()
                .to_vec();
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn depthwise_equals_per_channel_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (c, h) = (3, 9);
        let x = rand_vec(&mut rng, 2 * c * h * h);
        let w = rand_vec(&mut rng, c * 49);
        let dw = Tensor::<f64>::new(x.clone(), &[2, c, h, h])
            .unwrap()
            .conv2d(&Tensor::new(w.clone(), &[c, 1, 7, 7]).unwrap(), None, Conv2dSpec::new(1, 3, c))
            .unwrap()
            .to_vec();
        for ch in 0..c {
            for n in 0..2 {
                let plane: Vec<f64> = x[(n * c + ch) * h * h..(n * c + ch + 1) * h * h].to_vec();
                let single = conv_oracle(&plane, (1, 1, h, h), &w[ch * 49..(ch + 1) * 49], 1, 7, 1, 3, 1);
                let got = &dw[(n * c + ch) * h * h..(n * c + ch + 1) * h * h];
                for (a, b) in got.iter().zip(&single) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn gradients() {
        let r = check_gradients(&[vec![2, 4, 7, 7], vec![4, 2, 3, 3], vec![4]], 9, |x| {
            x[0].conv2d(&x[1], Some(&x[2]), Conv2dSpec::new(2, 1, 2))
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-3, "{r:?}");
        let r = check_gradients(&[vec![1, 3, 7, 7], vec![3, 1, 7, 7]], 10, |x| {
            x[0].conv2d(&x[1], None, Conv2dSpec::new(1, 3, 3))
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-3, "{r:?}");
    }
}
