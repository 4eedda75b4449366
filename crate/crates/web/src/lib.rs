//! WebAssembly bindings for the browser demo.
//!
//! The plain Rust functions in [`demo`] do the work; the `#[wasm_bindgen]`
//! wrappers only convert errors into JavaScript exceptions.

use wasm_bindgen::prelude::*;

pub mod demo {
    use motionseg::config::{ObjectShape, SyntheticClipSpec, Trajectory};
    use motionseg::flow::encode_flow;
    use motionseg::imageio::{Gray8, Rgb8};
    use motionseg::mtt::count_attention_flops;
    use motionseg::synthetic::make_clip;
    use motionseg::Result;

    fn rgba(rgb: &[u8]) -> Vec<u8> {
        rgb.chunks(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
    }

    /// A `size x size` flow field pointing away from the centre, coloured.
    /// Shows the hue for every direction and saturation growing outward.
    pub fn flow_wheel(size: usize) -> Vec<u8> {
        let c = (size as f64 - 1.0) / 2.0;
        let r = c.max(1.0);
        let (mut u, mut v) = (Vec::with_capacity(size * size), Vec::with_capacity(size * size));
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = ((x as f64 - c) / r, (y as f64 - c) / r);
                let inside = dx * dx + dy * dy <= 1.0;
                u.push(if inside { dx } else { 0.0 });
                v.push(if inside { dy } else { 0.0 });
            }
        }
        rgba(&encode_flow(&u, &v))
    }

    /// One rendered synthetic video as RGBA buffers.
    pub struct Clip {
        pub canvas: usize,
        pub frames: Vec<Vec<u8>>,
        pub flows: Vec<Vec<u8>>,
        pub masks: Vec<Vec<u8>>,
    }

    #[allow(clippy::too_many_arguments)]
    pub fn synthetic_clip(
        seed: u64,
        frames: usize,
        canvas: usize,
        object_size: usize,
        velocity: f64,
        disc: bool,
        sinusoidal: bool,
        distractors: usize,
        noise: f64,
    ) -> Result<Clip> {
        let spec = SyntheticClipSpec {
            seed,
            canvas,
            shape: if disc { ObjectShape::Disc } else { ObjectShape::Square },
            object_size,
            trajectory: if sinusoidal { Trajectory::Sinusoidal } else { Trajectory::Linear },
            velocity,
            distractors,
            noise,
            randomize: true,
        };
        let clip = make_clip(&spec, frames)?;
        let conv = |v: &[Rgb8]| v.iter().map(|i| rgba(&i.data)).collect();
        let mask = |g: &Gray8| g.data.iter().flat_map(|&m| if m > 0 { [255, 64, 64, 160] } else { [0, 0, 0, 0] }).collect();
        Ok(Clip {
            canvas,
            frames: conv(&clip.frames),
            flows: conv(&clip.flows),
            masks: clip.masks.iter().map(mask).collect(),
        })
    }

    /// Multiplies in `QK^T` and `attn V` for the windowed layer, the
    /// reduced-key layer and dense attention.
    pub fn attention_cost(t: usize, h: usize, w: usize, d: usize, m: usize, r: usize) -> Result<[f64; 3]> {
        let c = count_attention_flops(t, h, w, d, m, r)?;
        Ok([c.lttl as f64, c.gttl as f64, c.dense as f64])
    }
}

fn js_err(e: motionseg::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// RGBA pixels of the flow colour reference.
#[wasm_bindgen(js_name = flowWheel)]
pub fn flow_wheel(size: usize) -> Vec<u8> {
    demo::flow_wheel(size)
}

#[wasm_bindgen]
pub struct Clip(demo::Clip);

#[wasm_bindgen]
impl Clip {
    #[wasm_bindgen(getter)]
    pub fn canvas(&self) -> usize {
        self.0.canvas
    }

    #[wasm_bindgen(getter)]
    pub fn length(&self) -> usize {
        self.0.frames.len()
    }

    pub fn frame(&self, i: usize) -> Vec<u8> {
        self.0.frames.get(i).cloned().unwrap_or_default()
    }

    pub fn flow(&self, i: usize) -> Vec<u8> {
        self.0.flows.get(i).cloned().unwrap_or_default()
    }

    /// Translucent overlay marking the object.
    pub fn mask(&self, i: usize) -> Vec<u8> {
        self.0.masks.get(i).cloned().unwrap_or_default()
    }
}

#[wasm_bindgen(js_name = syntheticClip)]
#[allow(clippy::too_many_arguments)]
pub fn synthetic_clip(
    seed: u32,
    frames: usize,
    canvas: usize,
    object_size: usize,
    velocity: f64,
    disc: bool,
    sinusoidal: bool,
    distractors: usize,
    noise: f64,
) -> Result<Clip, JsError> {
    demo::synthetic_clip(seed as u64, frames, canvas, object_size, velocity, disc, sinusoidal, distractors, noise)
        .map(Clip)
        .map_err(js_err)
}

/// `[windowed, reduced, dense]` multiply counts.
#[wasm_bindgen(js_name = attentionCost)]
pub fn attention_cost(t: usize, h: usize, w: usize, d: usize, m: usize, r: usize) -> Result<Vec<f64>, JsError> {
    demo::attention_cost(t, h, w, d, m, r).map(|c| c.to_vec()).map_err(js_err)
}
