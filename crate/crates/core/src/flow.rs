//! Optical flow to RGB via the Middlebury colour wheel.
//!
//! Hue encodes direction, saturation the magnitude relative to the largest
//! displacement in the field, and value is 1; zero motion is white.

/// Segment lengths of the wheel: red-yellow, yellow-green, green-cyan,
/// cyan-blue, blue-magenta, magenta-red.
const SEGMENTS: [usize; 6] = [15, 6, 4, 11, 13, 6];

/// The 55 wheel colours, channel values in 0..=255.
pub fn color_wheel() -> Vec<[f64; 3]> {
    let [ry, yg, gc, cb, bm, mr] = SEGMENTS;
    let mut wheel = Vec::with_capacity(SEGMENTS.iter().sum());
    let ramp = |i: usize, n: usize| (255 * i / n) as f64;
    for i in 0..ry {
        wheel.push([255.0, ramp(i, ry), 0.0]);
    }
    for i in 0..yg {
        wheel.push([255.0 - ramp(i, yg), 255.0, 0.0]);
    }
    for i in 0..gc {
        wheel.push([0.0, 255.0, ramp(i, gc)]);
    }
    for i in 0..cb {
        wheel.push([0.0, 255.0 - ramp(i, cb), 255.0]);
    }
    for i in 0..bm {
        wheel.push([ramp(i, bm), 0.0, 255.0]);
    }
    for i in 0..mr {
        wheel.push([255.0, 0.0, 255.0 - ramp(i, mr)]);
    }
    wheel
}

/// Fractional wheel index of direction `(u, v)`, in `[0, ncols - 1]`.
pub fn wheel_position(u: f64, v: f64, ncols: usize) -> f64 {
    let a = (-v).atan2(-u) / std::f64::consts::PI;
    (a + 1.0) / 2.0 * (ncols - 1) as f64
}

/// Colour of one displacement with magnitude already normalised to `[0, 1]`.
fn pixel(wheel: &[[f64; 3]], u: f64, v: f64) -> [u8; 3] {
    let ncols = wheel.len();
    let rad = (u * u + v * v).sqrt();
    let fk = wheel_position(u, v, ncols);
    let k0 = fk.floor() as usize % ncols;
    let k1 = (k0 + 1) % ncols;
    let f = fk - fk.floor();
    let mut out = [0u8; 3];
    for c in 0..3 {
        let col = ((1.0 - f) * wheel[k0][c] + f * wheel[k1][c]) / 255.0;
        let col = if rad <= 1.0 { 1.0 - rad * (1.0 - col) } else { col * 0.75 };
        out[c] = (255.0 * col).floor().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Encodes a `h x w` flow field (row-major `u`, `v`) as interleaved RGB
/// bytes, normalising by the largest magnitude in the field.
pub fn encode_flow(u: &[f64], v: &[f64]) -> Vec<u8> {
    assert_eq!(u.len(), v.len(), "flow components differ in length");
    let max_rad = u
        .iter()
        .zip(v)
        .map(|(a, b)| (a * a + b * b).sqrt())
        .filter(|r| r.is_finite())
        .fold(0.0f64, f64::max);
    let norm = if max_rad > f64::EPSILON { max_rad } else { 1.0 };
    let wheel = color_wheel();
    u.iter()
        .zip(v)
        .flat_map(|(&a, &b)| {
            if a == 0.0 && b == 0.0 {
                [255, 255, 255]
            } else {
                pixel(&wheel, a / norm, b / norm)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_flow_is_white() {
        let z = vec![0.0; 12];
        assert!(encode_flow(&z, &z).iter().all(|&c| c == 255));
    }

    #[test]
    fn wheel_layout() {
        let w = color_wheel();
        assert_eq!(w.len(), 55);
        assert_eq!(w[0], [255.0, 0.0, 0.0]);
        assert_eq!(w[15], [255.0, 255.0, 0.0]);
        assert_eq!(w[21], [0.0, 255.0, 0.0]);
        assert_eq!(w[25], [0.0, 255.0, 255.0]);
        assert_eq!(w[36], [0.0, 0.0, 255.0]);
        assert_eq!(w[49], [255.0, 0.0, 255.0]);
    }

    #[test]
    fn largest_vector_is_fully_saturated() {
        let u = [3.0, 1.0, 0.0];
        let v = [4.0, 0.0, 0.0];
        let rgb = encode_flow(&u, &v);
        // at full saturation some channel of the interpolated hue reaches 0
        // or the colour equals the wheel colour exactly
        let wheel = color_wheel();
        let fk = wheel_position(0.6, 0.8, 55);
        let (k0, f) = (fk.floor() as usize, fk - fk.floor());
        for c in 0..3 {
            let want = ((1.0 - f) * wheel[k0][c] + f * wheel[(k0 + 1) % 55][c]).floor();
            assert!((rgb[c] as f64 - want).abs() <= 1.0);
        }
        assert_eq!(&rgb[6..9], &[255, 255, 255]);
    }

    proptest! {
        #[test]
        fn half_turn_moves_half_way_round(angle in 0.0f64..std::f64::consts::TAU, mag in 0.1f64..1.0) {
            let (u, v) = (mag * angle.cos(), mag * angle.sin());
            let a = wheel_position(u, v, 55);
            let b = wheel_position(-u, -v, 55);
            // 54 / 2 wheel steps apart, modulo the seam at index 0 / 54
            let d = (a - b).abs();
            prop_assert!((d - 27.0).abs() < 1e-9 || (d - 27.0).abs() > 26.0);
            let enc = encode_flow(&[u, -u, 1.0], &[v, -v, 0.0]);
            let wheel = color_wheel();
            for (px, pos, uu, vv) in [(0usize, a, u, v), (1, b, -u, -v)] {
                let rad = (uu * uu + vv * vv).sqrt();
                let k0 = pos.floor() as usize % 55;
                let f = pos - pos.floor();
                for c in 0..3 {
                    let col = ((1.0 - f) * wheel[k0][c] + f * wheel[(k0 + 1) % 55][c]) / 255.0;
                    let want = (255.0 * (1.0 - rad * (1.0 - col))).floor();
                    prop_assert_eq!(enc[px * 3 + c] as f64, want);
                }
            }
        }
    }
}
