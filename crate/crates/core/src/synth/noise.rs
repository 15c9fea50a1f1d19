//! Seeded multi-octave value noise.

/// Hash a lattice point to `[0, 1)`.
#[inline]
fn lattice(ix: i64, iy: i64, seed: u32) -> f64 {
    let mut h = (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (seed as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
    // splitmix64 finalizer
    h ^= h >> 30;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^= h >> 31;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

#[inline]
fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise(x: f64, y: f64, seed: u32) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let (tx, ty) = (smooth(x - fx), smooth(y - fy));
    let a = lattice(ix, iy, seed);
    let b = lattice(ix + 1, iy, seed);
    let c = lattice(ix, iy + 1, seed);
    let d = lattice(ix + 1, iy + 1, seed);
    let top = a + (b - a) * tx;
    let bot = c + (d - c) * tx;
    top + (bot - top) * ty
}

/// Fractal value noise in `[0, 1]`: `octaves` layers, the first with lattice
/// spacing `base_cell` pixels, each next one at half the spacing and half the
/// amplitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Noise {
    pub seed: u32,
    pub octaves: u32,
    pub base_cell: f64,
}

impl Noise {
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let (mut sum, mut norm) = (0.0, 0.0);
        let (mut amp, mut cell) = (1.0, self.base_cell);
        for o in 0..self.octaves {
            sum += amp
                * value_noise(
                    x / cell,
                    y / cell,
                    self.seed.wrapping_add(o.wrapping_mul(0x68E3_1DA4)),
                );
            norm += amp;
            amp *= 0.5;
            cell *= 0.5;
        }
        if norm > 0.0 {
            sum / norm
        } else {
            0.5
        }
    }
}
