//! Mixed temporal transformer for the two deepest stages.
//!
//! A block applies a local layer (multi-head attention inside M x M spatial
//! windows spanning every frame of the clip) and then a global layer
//! (attention from all tokens to spatially reduced keys and values), each
//! followed by a feed-forward network, with pre-norm residual wiring:
//!
//! ```text
//! L  = LTTL(LN(B))  + B
//! L' = FFN(LN(L))   + L
//! G  = GTTL(LN(L')) + L'
//! G' = FFN(LN(G))   + G
//! ```

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::nn::{join, zero_out, Conv2d, Init, LayerNorm, Linear, Mlp, Module, ParamSet};
use crate::tensor::{matmul_mults, Conv2dSpec, Scalar, Tensor};

/// Additive score for padded keys; large enough that `exp` underflows to 0.
pub const MASKED: f64 = -1e9;

thread_local! {
    static ATTENTION_MULTS: Cell<u64> = const { Cell::new(0) };
}

/// Multiplications spent in `QK^T` and `attn V` since the last reset, read
/// from the matmul instrumentation.
pub fn attention_mults() -> u64 {
    ATTENTION_MULTS.with(|c| c.get())
}

pub fn reset_attention_mults() {
    ATTENTION_MULTS.with(|c| c.set(0));
}

/// Padded window layout of an `H x W` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGrid {
    pub side: usize,
    pub h: usize,
    pub w: usize,
    pub h_pad: usize,
    pub w_pad: usize,
}

impl WindowGrid {
    pub fn new(h: usize, w: usize, side: usize) -> Result<Self> {
        if side == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("window {side} over {h}x{w} map")));
        }
        Ok(Self {
            side,
            h,
            w,
            h_pad: h.div_ceil(side) * side,
            w_pad: w.div_ceil(side) * side,
        })
    }

    pub fn rows(&self) -> usize {
        self.h_pad / self.side
    }

    pub fn cols(&self) -> usize {
        self.w_pad / self.side
    }

    pub fn count(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn tokens_per_window(&self, t: usize) -> usize {
        t * self.side * self.side
    }

    /// `[T, H, W, d]` tokens to `[windows, T*M*M, d]`, zero-padding the map.
    pub fn partition<S: Scalar>(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let s = x.shape();
        let (t, d) = (s[0], s[3]);
        let x = x.pad(1, 0, self.h_pad - self.h)?.pad(2, 0, self.w_pad - self.w)?;
        let m = self.side;
        x.reshape(&[t, self.rows(), m, self.cols(), m, d])?
            .permute(&[1, 3, 0, 2, 4, 5])?
            .reshape(&[self.count(), t * m * m, d])
    }

    /// Inverse of [`partition`](Self::partition), cropping the padding.
    pub fn unpartition<S: Scalar>(&self, x: &Tensor<S>, t: usize) -> Result<Tensor<S>> {
        let d = x.shape()[2];
        let m = self.side;
        let y = x
            .reshape(&[self.rows(), self.cols(), t, m, m, d])?
            .permute(&[2, 0, 3, 1, 4, 5])?
            .reshape(&[t, self.h_pad, self.w_pad, d])?;
        y.narrow(1, 0, self.h)?.narrow(2, 0, self.w)
    }

    /// Additive key mask `[windows, 1, 1, T*M*M]`, or `None` without padding.
    pub fn key_mask<S: Scalar>(&self, t: usize) -> Option<Tensor<S>> {
        if self.h_pad == self.h && self.w_pad == self.w {
            return None;
        }
        let m = self.side;
        let n = self.tokens_per_window(t);
        let mut data = Vec::with_capacity(self.count() * n);
        for wr in 0..self.rows() {
            for wc in 0..self.cols() {
                for _ in 0..t {
                    for i in 0..m {
                        for j in 0..m {
                            let inside = wr * m + i < self.h && wc * m + j < self.w;
                            data.push(if inside { S::zero() } else { S::lit(MASKED) });
                        }
                    }
                }
            }
        }
        Some(Tensor::new(data, &[self.count(), 1, 1, n]).expect("mask shape"))
    }
}

/// Multi-head scaled dot-product attention with separate Q/K/V/output
/// projections on the last axis.
pub struct Attention<S: Scalar> {
    pub heads: usize,
    pub q: Linear<S>,
    pub k: Linear<S>,
    pub v: Linear<S>,
    pub out: Linear<S>,
}

impl<S: Scalar> Attention<S> {
    pub fn new(init: &mut Init, dim: usize, heads: usize) -> Self {
        Self {
            heads,
            q: Linear::new(init, dim, dim),
            k: Linear::new(init, dim, dim),
            v: Linear::new(init, dim, dim),
            out: Linear::new(init, dim, dim),
        }
    }

    fn split_heads(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let s = x.shape();
        let (b, n, d) = (s[0], s[1], s[2]);
        x.reshape(&[b, n, self.heads, d / self.heads])?.permute(&[0, 2, 1, 3])
    }

    /// `queries: [B, N, d]`, `context: [B, M, d]`, `mask` broadcastable to
    /// `[B, heads, N, M]`. Returns the projected output and the attention
    /// weights.
    pub fn forward(
        &self,
        queries: &Tensor<S>,
        context: &Tensor<S>,
        mask: Option<&Tensor<S>>,
    ) -> Result<(Tensor<S>, Tensor<S>)> {
        let qs = queries.shape().to_vec();
        let d = qs[2];
        let dh = d / self.heads;
        let q = self.split_heads(&self.q.forward(queries)?)?.scale(S::lit(1.0 / (dh as f64).sqrt()));
        let k = self.split_heads(&self.k.forward(context)?)?;
        let v = self.split_heads(&self.v.forward(context)?)?;
        let before = matmul_mults();
        let mut scores = q.matmul(&k.transpose(2, 3)?)?;
        if let Some(m) = mask {
            scores = scores.add(m)?;
        }
        let weights = scores.softmax(3)?;
        let heads = weights.matmul(&v)?;
        ATTENTION_MULTS.with(|c| c.set(c.get() + matmul_mults() - before));
        let merged = heads.permute(&[0, 2, 1, 3])?.reshape(&[qs[0], qs[1], d])?;
        Ok((self.out.forward(&merged)?, weights))
    }
}

impl<S: Scalar> Module<S> for Attention<S> {
    fn collect(&self, prefix: &str, set: &mut ParamSet<S>) {
        self.q.collect(&join(prefix, "q"), set);
        self.k.collect(&join(prefix, "k"), set);
        self.v.collect(&join(prefix, "v"), set);
        self.out.collect(&join(prefix, "out"), set);
    }
}

fn to_tokens<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    x.permute(&[0, 2, 3, 1])
}

fn from_tokens<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    x.permute(&[0, 3, 1, 2])
}

fn check_map<S: Scalar>(x: &Tensor<S>, dim: usize) -> Result<()> {
    if x.rank() != 4 || x.shape()[1] != dim {
        return Err(Error::Shape(format!("expected [T, {dim}, H, W], got {:?}", x.shape())));
    }
    Ok(())
}

/// Pre-norm attention plus pre-norm FFN, both residual.
pub struct LocalLayer<S: Scalar> {
    pub dim: usize,
    pub window: usize,
    pub norm1: LayerNorm<S>,
    pub attn: Attention<S>,
    pub norm2: LayerNorm<S>,
    pub ffn: Mlp<S>,
}

impl<S: Scalar> LocalLayer<S> {
    pub fn new(init: &mut Init, dim: usize, heads: usize, window: usize, mlp_ratio: usize) -> Self {
        Self {
            dim,
            window,
            norm1: LayerNorm::last(init, dim),
            attn: Attention::new(init, dim, heads),
            norm2: LayerNorm::last(init, dim),
            ffn: Mlp::new(init, dim, mlp_ratio),
        }
    }

    /// Windowed attention on `[T, H, W, d]` tokens; returns tokens and the
    /// per-window weights `[windows, heads, N, N]`.
    pub fn attend_tokens(&self, tokens: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let s = tokens.shape();
        let t = s[0];
        let grid = WindowGrid::new(s[1], s[2], self.window)?;
        let windows = grid.partition(tokens)?;
        let mask = grid.key_mask::<S>(t);
        let (out, weights) = self.attn.forward(&windows, &windows, mask.as_ref())?;
        Ok((grid.unpartition(&out, t)?, weights))
    }

    /// The bare windowed attention on a `[T, d, H, W]` map (no norm, no
    /// residual).
    pub fn attend(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        check_map(x, self.dim)?;
        from_tokens(&self.attend_tokens(&to_tokens(x)?)?.0)
    }

    pub fn forward_tokens(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let l = self.attend_tokens(&self.norm1.forward(x)?)?.0.add(x)?;
        self.ffn.forward(&self.norm2.forward(&l)?)?.add(&l)
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        check_map(x, self.dim)?;
        from_tokens(&self.forward_tokens(&to_tokens(x)?)?)
    }
}

impl<S: Scalar> Module<S> for LocalLayer<S> {
    fn collect(&self, prefix: &str, set: &mut ParamSet<S>) {
        self.norm1.collect(&join(prefix, "norm1"), set);
        self.attn.collect(&join(prefix, "attn"), set);
        self.norm2.collect(&join(prefix, "norm2"), set);
        self.ffn.collect(&join(prefix, "ffn"), set);
    }
}

/// Spatial reduction: per-frame strided conv (kernel = stride = r) then LN.
pub struct SpatialReduction<S: Scalar> {
    pub ratio: usize,
    pub conv: Conv2d<S>,
    pub norm: LayerNorm<S>,
}

/// Pre-norm spatial-reduction attention over the whole clip plus FFN.
pub struct GlobalLayer<S: Scalar> {
    pub dim: usize,
    pub norm1: LayerNorm<S>,
    /// Absent when the ratio is 1 (keys and values use every token).
    pub sr: Option<SpatialReduction<S>>,
    pub attn: Attention<S>,
    pub norm2: LayerNorm<S>,
    pub ffn: Mlp<S>,
}

impl<S: Scalar> GlobalLayer<S> {
    pub fn new(init: &mut Init, dim: usize, heads: usize, ratio: usize, mlp_ratio: usize) -> Self {
        let norm1 = LayerNorm::last(init, dim);
        let sr = (ratio > 1).then(|| SpatialReduction {
            ratio,
            conv: Conv2d::new(init, dim, dim, ratio, Conv2dSpec::new(ratio, 0, 1), true),
            norm: LayerNorm::last(init, dim),
        });
        Self {
            dim,
            norm1,
            sr,
            attn: Attention::new(init, dim, heads),
            norm2: LayerNorm::last(init, dim),
            ffn: Mlp::new(init, dim, mlp_ratio),
        }
    }

    pub fn ratio(&self) -> usize {
        self.sr.as_ref().map_or(1, |s| s.ratio)
    }

    /// Reduced key/value source `[1, T*(H/r)*(W/r), d]` from `[T, H, W, d]`.
    pub fn reduced_context(&self, tokens: &Tensor<S>) -> Result<Tensor<S>> {
        let s = tokens.shape().to_vec();
        let r = self.ratio();
        if s[1] % r != 0 || s[2] % r != 0 {
            return Err(Error::Shape(format!("reduction ratio {r} does not divide {}x{}", s[1], s[2])));
        }
        let ctx = match &self.sr {
            None => tokens.clone(),
            Some(sr) => sr.norm.forward(&to_tokens(&sr.conv.forward(&from_tokens(tokens)?)?)?)?,
        };
        let n = ctx.numel() / s[3];
        ctx.reshape(&[1, n, s[3]])
    }

    /// Attention of every token against the reduced clip; returns tokens and
    /// weights `[1, heads, T*H*W, T*H*W/r^2]`.
    pub fn attend_tokens(&self, tokens: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let s = tokens.shape().to_vec();
        let ctx = self.reduced_context(tokens)?;
        let q = tokens.reshape(&[1, s[0] * s[1] * s[2], s[3]])?;
        let (out, weights) = self.attn.forward(&q, &ctx, None)?;
        Ok((out.reshape(&s)?, weights))
    }

    pub fn attend(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        check_map(x, self.dim)?;
        from_tokens(&self.attend_tokens(&to_tokens(x)?)?.0)
    }

    pub fn forward_tokens(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let g = self.attend_tokens(&self.norm1.forward(x)?)?.0.add(x)?;
        self.ffn.forward(&self.norm2.forward(&g)?)?.add(&g)
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        check_map(x, self.dim)?;
        from_tokens(&self.forward_tokens(&to_tokens(x)?)?)
    }
}

impl<S: Scalar> Module<S> for GlobalLayer<S> {
    fn collect(&self, prefix: &str, set: &mut ParamSet<S>) {
        self.norm1.collect(&join(prefix, "norm1"), set);
        if let Some(sr) = &self.sr {
            sr.conv.collect(&join(prefix, "sr.conv"), set);
            sr.norm.collect(&join(prefix, "sr.norm"), set);
        }
        self.attn.collect(&join(prefix, "attn"), set);
        self.norm2.collect(&join(prefix, "norm2"), set);
        self.ffn.collect(&join(prefix, "ffn"), set);
    }
}

/// Sinusoidal code for frame index `t`, `[d]`.
pub fn temporal_encoding(t: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|c| {
            let freq = 1.0 / 10000f64.powf((2 * (c / 2)) as f64 / dim as f64);
            let a = t as f64 * freq;
            if c % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

/// One local layer followed by one global layer.
pub struct MixedBlock<S: Scalar> {
    pub local: LocalLayer<S>,
    pub global: GlobalLayer<S>,
}

impl<S: Scalar> MixedBlock<S> {
    pub fn forward_tokens(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.global.forward_tokens(&self.local.forward_tokens(x)?)
    }

    /// Zeroes the last projection of every residual branch, turning the
    /// block into the identity map.
    pub fn zero_residual_branches(&self) {
        for l in [&self.local.attn.out, &self.global.attn.out, &self.local.ffn.fc2, &self.global.ffn.fc2] {
            zero_out(&l.weight);
            zero_out(&l.bias);
        }
    }
}

impl<S: Scalar> Module<S> for MixedBlock<S> {
    fn collect(&self, prefix: &str, set: &mut ParamSet<S>) {
        self.local.collect(&join(prefix, "local"), set);
        self.global.collect(&join(prefix, "global"), set);
    }
}

/// Stack of mixed blocks for one stage, with an optional temporal code added
/// at the input.
pub struct Mtt<S: Scalar = f32> {
    pub dim: usize,
    pub blocks: Vec<MixedBlock<S>>,
    pub positional_encoding: bool,
}

impl<S: Scalar> Mtt<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init,
        dim: usize,
        heads: usize,
        window: usize,
        ratio: usize,
        mlp_ratio: usize,
        depth: usize,
        positional_encoding: bool,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("heads {heads} must divide dim {dim}")));
        }
        let blocks = (0..depth)
            .map(|_| MixedBlock {
                local: LocalLayer::new(init, dim, heads, window, mlp_ratio),
                global: GlobalLayer::new(init, dim, heads, ratio, mlp_ratio),
            })
            .collect();
        Ok(Self {
            dim,
            blocks,
            positional_encoding,
        })
    }

    /// `[T, d, H, W]` to `[T, d, H, W]`.
    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        check_map(x, self.dim)?;
        let mut tokens = to_tokens(x)?;
        if self.positional_encoding {
            let t = x.shape()[0];
            let pe: Vec<f64> = (0..t).flat_map(|i| temporal_encoding(i, self.dim)).collect();
            tokens = tokens.add(&Tensor::from_f64(&pe, &[t, 1, 1, self.dim])?)?;
        }
        for b in &self.blocks {
            tokens = b.forward_tokens(&tokens)?;
        }
        from_tokens(&tokens)
    }
}

impl<S: Scalar> Module<S> for Mtt<S> {
    fn collect(&self, prefix: &str, set: &mut ParamSet<S>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&join(prefix, &format!("block{i}")), set);
        }
    }
}

/// Multiplication counts of the two attention matmuls (`QK^T` and
/// `attn V`) for a `[T, d, H, W]` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionCost {
    /// Windowed layer with side `M`: `2 T^2 H_pad W_pad M^2 d`.
    pub lttl: u64,
    /// Spatial reduction `r`: `2 T^2 H^2 W^2 d / r^2`.
    pub gttl: u64,
    /// Unrestricted attention over all `T H W` tokens: `2 T^2 H^2 W^2 d`.
    pub dense: u64,
}

pub fn count_attention_flops(t: usize, h: usize, w: usize, d: usize, m: usize, r: usize) -> Result<AttentionCost> {
    if t == 0 || h == 0 || w == 0 || d == 0 || m == 0 || r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::Shape(format!(
            "invalid attention geometry T={t} H={h} W={w} d={d} M={m} r={r}"
        )));
    }
    let grid = WindowGrid::new(h, w, m)?;
    let n = (t * h * w) as u64;
    let per_window = grid.tokens_per_window(t) as u64;
    let d = d as u64;
    Ok(AttentionCost {
        lttl: 2 * grid.count() as u64 * per_window * per_window * d,
        gttl: 2 * n * (n / (r * r) as u64) * d,
        dense: 2 * n * n * d,
    })
}
