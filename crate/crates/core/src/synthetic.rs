//! Synthetic moving-object clips with exact masks and ground-truth flow.
//!
//! A textured static background carries optional static distractors; one
//! object (square or disc) moves along a linear or sinusoidal path. Flow at
//! frame `t` is the displacement to frame `t + 1` on object pixels and zero
//! elsewhere; the last frame repeats its predecessor's flow.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{ObjectShape, SyntheticClipSpec, Trajectory};
use crate::error::{Error, Result};
use crate::flow::encode_flow;
use crate::imageio::{clip_tensor, Gray8, Rgb8};
use crate::tensor::Tensor;

pub struct SyntheticClip {
    pub frames: Vec<Rgb8>,
    pub flows: Vec<Rgb8>,
    /// `{0, 1}` masks.
    pub masks: Vec<Gray8>,
    /// Top-left corner (square) or centre (disc) of the object per frame.
    pub positions: Vec<(f64, f64)>,
}

impl SyntheticClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames_tensor(&self) -> Result<Tensor<f32>> {
        clip_tensor(&self.frames)
    }

    pub fn flows_tensor(&self) -> Result<Tensor<f32>> {
        clip_tensor(&self.flows)
    }

    /// `[T, 1, H, W]` in `{0, 1}`.
    pub fn masks_tensor(&self) -> Result<Tensor<f32>> {
        let m = &self.masks[0];
        let data = self.masks.iter().flat_map(|g| g.data.iter().map(|&v| v as f32)).collect();
        Tensor::new(data, &[self.masks.len(), 1, m.height, m.width])
    }
}

fn covers(shape: ObjectShape, size: usize, (px, py): (f64, f64), x: usize, y: usize) -> bool {
    let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
    match shape {
        ObjectShape::Square => cx >= px && cx < px + size as f64 && cy >= py && cy < py + size as f64,
        ObjectShape::Disc => {
            let r = size as f64 / 2.0;
            (cx - px).powi(2) + (cy - py).powi(2) <= r * r
        }
    }
}

/// Axis-aligned extent `(min_x, min_y, max_x, max_y)` of the object.
fn extent(shape: ObjectShape, size: usize, (px, py): (f64, f64)) -> (f64, f64, f64, f64) {
    let s = size as f64;
    match shape {
        ObjectShape::Square => (px, py, px + s, py + s),
        ObjectShape::Disc => (px - s / 2.0, py - s / 2.0, px + s / 2.0, py + s / 2.0),
    }
}

/// Offset of frame `t` from the start along the trajectory.
fn offset(spec: &SyntheticClipSpec, heading: f64, t: usize) -> (f64, f64) {
    let along = spec.velocity * t as f64;
    let (dx, dy) = (heading.cos(), heading.sin());
    match spec.trajectory {
        Trajectory::Linear => (along * dx, along * dy),
        Trajectory::Sinusoidal => {
            let side = spec.object_size as f64 / 4.0 * (0.6 * t as f64).sin();
            (along * dx - side * dy, along * dy + side * dx)
        }
    }
}

fn trajectory(spec: &SyntheticClipSpec, rng: &mut ChaCha8Rng, t: usize) -> Result<Vec<(f64, f64)>> {
    let canvas = spec.canvas as f64;
    let heading = if spec.randomize { rng.gen_range(0.0..std::f64::consts::TAU) } else { 0.0 };
    let offsets: Vec<(f64, f64)> = (0..t).map(|i| offset(spec, heading, i)).collect();
    // bounding box of the object over the clip relative to a start at 0
    let (mut lo_x, mut lo_y, mut hi_x, mut hi_y) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for &o in &offsets {
        let (a, b, c, d) = extent(spec.shape, spec.object_size, o);
        lo_x = lo_x.min(a);
        lo_y = lo_y.min(b);
        hi_x = hi_x.max(c);
        hi_y = hi_y.max(d);
    }
    let (min_sx, max_sx) = (-lo_x, canvas - hi_x);
    let (min_sy, max_sy) = (-lo_y, canvas - hi_y);
    let start = if spec.randomize {
        // integer start positions keep square edges on the pixel grid
        let (lx, hx) = (min_sx.ceil(), max_sx.floor());
        let (ly, hy) = (min_sy.ceil(), max_sy.floor());
        if lx > hx || ly > hy {
            return Err(Error::Data(format!(
                "object of size {} moving {} px/frame for {t} frames cannot stay inside a {} canvas",
                spec.object_size, spec.velocity, spec.canvas
            )));
        }
        (rng.gen_range(lx..=hx), rng.gen_range(ly..=hy))
    } else {
        let c = match spec.shape {
            ObjectShape::Square => ((canvas - spec.object_size as f64) / 2.0).floor(),
            ObjectShape::Disc => canvas / 2.0,
        };
        (c, c)
    };
    if start.0 < min_sx - 1e-9 || start.0 > max_sx + 1e-9 || start.1 < min_sy - 1e-9 || start.1 > max_sy + 1e-9 {
        return Err(Error::Data(format!(
            "trajectory leaves the {} px canvas within {t} frames",
            spec.canvas
        )));
    }
    Ok(offsets.iter().map(|&(x, y)| (start.0 + x, start.1 + y)).collect())
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]
}

/// A colour differing from `base` by at least 0.35 in some channel.
fn contrasting(rng: &mut ChaCha8Rng, base: [f64; 3]) -> [f64; 3] {
    loop {
        let c = random_color(rng);
        if c.iter().zip(&base).any(|(a, b)| (a - b).abs() >= 0.35) {
            return c;
        }
    }
}

/// Generates a `t`-frame clip; `reversed` plays the same trajectory
/// backwards (flows are recomputed for the reversed motion).
pub fn make_clip_with(spec: &SyntheticClipSpec, t: usize, reversed: bool) -> Result<SyntheticClip> {
    if t == 0 || spec.canvas == 0 || spec.object_size == 0 || spec.object_size > spec.canvas {
        return Err(Error::Data(format!(
            "invalid clip request: {t} frames, canvas {}, object {}",
            spec.canvas, spec.object_size
        )));
    }
    if !(spec.velocity.is_finite() && spec.noise.is_finite() && spec.noise >= 0.0) {
        return Err(Error::Data("velocity and noise must be finite, noise >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.canvas;
    let mut positions = trajectory(spec, &mut rng, t)?;
    if reversed {
        positions.reverse();
    }

    // static background texture
    let base = random_color(&mut rng);
    let (fx, fy) = (rng.gen_range(0.05..0.3), rng.gen_range(0.05..0.3));
    let phase: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    let mut background = vec![0.0f64; n * n * 3];
    for y in 0..n {
        for x in 0..n {
            for c in 0..3 {
                let tex = 0.12 * (fx * x as f64 + phase[c]).sin() * (fy * y as f64 + phase[3 + c]).cos();
                background[(y * n + x) * 3 + c] = base[c] + tex;
            }
        }
    }
    for _ in 0..spec.distractors {
        let color = random_color(&mut rng);
        let size = rng.gen_range(spec.object_size / 3..=spec.object_size.max(2)).max(2);
        let shape = if rng.gen_bool(0.5) { ObjectShape::Square } else { ObjectShape::Disc };
        let pos = (rng.gen_range(0.0..n as f64), rng.gen_range(0.0..n as f64));
        for y in 0..n {
            for x in 0..n {
                if covers(shape, size, pos, x, y) {
                    background[(y * n + x) * 3..(y * n + x) * 3 + 3].copy_from_slice(&color);
                }
            }
        }
    }
    let object_color = contrasting(&mut rng, base);
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("valid sigma");

    let mut frames = Vec::with_capacity(t);
    let mut masks = Vec::with_capacity(t);
    for &pos in &positions {
        let mut mask = vec![0u8; n * n];
        let mut data = vec![0u8; n * n * 3];
        for y in 0..n {
            for x in 0..n {
                let inside = covers(spec.shape, spec.object_size, pos, x, y);
                mask[y * n + x] = u8::from(inside);
                for c in 0..3 {
                    let clean = if inside { object_color[c] } else { background[(y * n + x) * 3 + c] };
                    let v = if spec.noise > 0.0 { clean + noise.sample(&mut rng) } else { clean };
                    data[(y * n + x) * 3 + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
        frames.push(Rgb8 {
            width: n,
            height: n,
            data,
        });
        masks.push(Gray8 {
            width: n,
            height: n,
            data: mask,
        });
    }

    let mut flows = Vec::with_capacity(t);
    for i in 0..t {
        let (u, v) = if t == 1 {
            (vec![0.0; n * n], vec![0.0; n * n])
        } else {
            let j = i.min(t - 2);
            let d = (positions[j + 1].0 - positions[j].0, positions[j + 1].1 - positions[j].1);
            let on = |k: usize| masks[i].data[k] == 1;
            (
                (0..n * n).map(|k| if on(k) { d.0 } else { 0.0 }).collect(),
                (0..n * n).map(|k| if on(k) { d.1 } else { 0.0 }).collect(),
            )
        };
        flows.push(Rgb8 {
            width: n,
            height: n,
            data: encode_flow(&u, &v),
        });
    }
    Ok(SyntheticClip {
        frames,
        flows,
        masks,
        positions,
    })
}

pub fn make_clip(spec: &SyntheticClipSpec, t: usize) -> Result<SyntheticClip> {
    make_clip_with(spec, t, false)
}
