use crate::error::{Error, Result};
use crate::tensor::{numel, strides, Scalar, Tensor};

/// Numpy-style broadcast of two shapes (aligned on trailing axes).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every element of `out_shape`, the flat index into an operand of
/// `shape` broadcast against it.
fn broadcast_index(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let src_strides = strides(shape);
    let mut eff = vec![0; rank];
    for i in 0..shape.len() {
        if shape[i] != 1 {
            eff[i + offset] = src_strides[i];
        }
    }
    let n = numel(out_shape);
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..n {
        idx.push(pos);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            pos += eff[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            pos -= eff[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    idx
}

#[derive(Clone, Copy, Debug)]
enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    #[inline]
    fn apply<S: Scalar>(self, a: S, b: S) -> S {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }
}

fn binary<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, op: BinaryOp) -> Result<Tensor<S>> {
    let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
        Error::Shape(format!(
            "cannot broadcast {:?} with {:?} in {:?}",
            a.shape(),
            b.shape(),
            op
        ))
    })?;
    let same = a.shape() == b.shape();
    let (ia, ib) = if same {
        (None, None)
    } else {
        (
            Some(broadcast_index(a.shape(), &out_shape)),
            Some(broadcast_index(b.shape(), &out_shape)),
        )
    };
    let data = {
        let ad = a.data();
        let bd = b.data();
        match (&ia, &ib) {
            (Some(ia), Some(ib)) => ia
                .iter()
                .zip(ib)
                .map(|(&i, &j)| op.apply(ad[i], bd[j]))
                .collect(),
            _ => ad.iter().zip(bd.iter()).map(|(&x, &y)| op.apply(x, y)).collect(),
        }
    };
    let (ac, bc) = (a.clone(), b.clone());
    let (na, nb) = (a.numel(), b.numel());
    Ok(Tensor::from_op(
        out_shape,
        data,
        vec![a.clone(), b.clone()],
        move |g| {
            let ad = ac.data();
            let bd = bc.data();
            let mut ga = vec![S::zero(); na];
            let mut gb = vec![S::zero(); nb];
            for k in 0..g.len() {
                let i = ia.as_ref().map_or(k, |v| v[k]);
                let j = ib.as_ref().map_or(k, |v| v[k]);
                let (da, db) = match op {
                    BinaryOp::Add => (g[k], g[k]),
                    BinaryOp::Sub => (g[k], -g[k]),
                    BinaryOp::Mul => (g[k] * bd[j], g[k] * ad[i]),
                    BinaryOp::Div => (g[k] / bd[j], -g[k] * ad[i] / (bd[j] * bd[j])),
                };
                ga[i] = ga[i] + da;
                gb[j] = gb[j] + db;
            }
            vec![
                ac.requires_grad().then_some(ga),
                bc.requires_grad().then_some(gb),
            ]
        },
    ))
}

/// Unary map with derivative expressed through input and output.
fn unary<S: Scalar>(
    x: &Tensor<S>,
    f: impl Fn(S) -> S,
    df: impl Fn(S, S) -> S + 'static,
) -> Tensor<S> {
    let data: Vec<S> = x.data().iter().map(|&v| f(v)).collect();
    let out = data.clone();
    let xc = x.clone();
    Tensor::from_op(x.shape().to_vec(), data, vec![x.clone()], move |g| {
        let xd = xc.data();
        let gi = g
            .iter()
            .zip(xd.iter().zip(&out))
            .map(|(&g, (&x, &y))| g * df(x, y))
            .collect();
        vec![Some(gi)]
    })
}

#[inline]
fn sigmoid_scalar<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        binary(self, other, BinaryOp::Add)
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        binary(self, other, BinaryOp::Sub)
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        binary(self, other, BinaryOp::Mul)
    }

    pub fn div(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        binary(self, other, BinaryOp::Div)
    }

    pub fn scale(&self, c: S) -> Tensor<S> {
        unary(self, move |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: S) -> Tensor<S> {
        unary(self, move |v| v + c, |_, _| S::one())
    }

    pub fn neg(&self) -> Tensor<S> {
        self.scale(-S::one())
    }

    /// `1 - x`
    pub fn one_minus(&self) -> Tensor<S> {
        unary(self, |v| S::one() - v, |_, _| -S::one())
    }

    pub fn sigmoid(&self) -> Tensor<S> {
        unary(self, sigmoid_scalar, |_, y| y * (S::one() - y))
    }

    pub fn relu(&self) -> Tensor<S> {
        unary(
            self,
            |v| if v > S::zero() { v } else { S::zero() },
            |x, _| if x > S::zero() { S::one() } else { S::zero() },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor<S> {
        let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
        let k = S::lit(0.044715);
        let half = S::lit(0.5);
        unary(
            self,
            move |x| half * x * (S::one() + (c * (x + k * x * x * x)).tanh()),
            move |x, _| {
                let u = c * (x + k * x * x * x);
                let th = u.tanh();
                let du = c * (S::one() + S::lit(3.0) * k * x * x);
                half * (S::one() + th) + half * x * (S::one() - th * th) * du
            },
        )
    }

    pub fn exp(&self) -> Tensor<S> {
        unary(self, |v| v.exp(), |_, y| y)
    }

    pub fn square(&self) -> Tensor<S> {
        unary(self, |v| v * v, |x, _| S::lit(2.0) * x)
    }
}

/// Scalar logistic function shared with non-differentiable code paths.
pub fn sigmoid<S: Scalar>(v: S) -> S {
    sigmoid_scalar(v)
}
