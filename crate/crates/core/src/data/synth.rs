//! Deterministic synthetic radar / low-res optical / high-res optical triplets.
//!
//! The scene is a sum of oriented sinusoids whose orientation and frequency
//! band depend on the class. Low-res optical sees the scene under large-scale
//! shading with a random direction; the high-res image is a bicubic upsample
//! of it plus detail above the low-res Nyquist limit. Radar is a nonlinear
//! function of the unshaded scene with multiplicative speckle, packed to
//! 8 bits and rescaled to `[0, 1]`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};

use super::raster::{pack_radar, Band, Raster};
use super::tiles::TileId;
use crate::error::{Error, Result};

pub const RADAR_CHANNELS: usize = 2;
pub const OPTICAL_CHANNELS: usize = 3;

/// One co-located sample: radar and low-res optical at `S×S`, high-res optical at `2S×2S`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedTriplet {
    pub tile: TileId,
    pub class_id: u32,
    pub radar: Raster,
    pub lores: Raster,
    pub hires: Raster,
}

impl AlignedTriplet {
    /// Low-res side length `S`.
    pub fn size(&self) -> usize {
        self.lores.height
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.size();
        if self.lores.shape() != [OPTICAL_CHANNELS, s, s] || self.lores.width != s {
            return Err(Error::Shape(format!(
                "lores raster {:?} is not 3xSxS",
                self.lores.shape()
            )));
        }
        if self.radar.shape() != [RADAR_CHANNELS, s, s] {
            return Err(Error::Shape(format!(
                "radar raster {:?} does not match lores {s}x{s}",
                self.radar.shape()
            )));
        }
        if self.hires.shape() != [OPTICAL_CHANNELS, 2 * s, 2 * s] {
            return Err(Error::Shape(format!(
                "hires raster {:?} is not double the lores size {s}",
                self.hires.shape()
            )));
        }
        let finite = [&self.radar, &self.lores, &self.hires]
            .iter()
            .all(|r| r.data.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Range("triplet contains non-finite values".into()));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer, used to derive stream seeds from structured keys.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5CA1_EA11_B1A5_0001, |acc, &p| mix64(acc ^ p))
}

struct Wave {
    fx: f64,
    fy: f64,
    amp: f64,
    phase: f64,
}

fn class_texture(class_id: u32) -> (f64, (f64, f64)) {
    let k = f64::from(class_id % 4);
    let octave = class_id / 4;
    let theta = k * PI / 4.0 + f64::from(octave) * PI / 8.0;
    let lo = 2.5 + 2.5 * f64::from(octave % 3);
    (theta, (lo, lo + 1.5))
}

fn waves(rng: &mut ChaCha8Rng, class_id: u32) -> Vec<Wave> {
    let (theta, (f_lo, f_hi)) = class_texture(class_id);
    let jitter = Normal::new(0.0, 0.12).expect("valid normal");
    let mut out = Vec::new();
    for _ in 0..6 {
        let t = theta + jitter.sample(rng);
        let f = rng.gen_range(f_lo..f_hi);
        out.push(Wave {
            fx: f * t.cos(),
            fy: f * t.sin(),
            amp: rng.gen_range(0.6..1.0),
            phase: rng.gen_range(0.0..2.0 * PI),
        });
    }
    for _ in 0..2 {
        let t: f64 = rng.gen_range(0.0..PI);
        let f = rng.gen_range(0.5..1.5);
        out.push(Wave {
            fx: f * t.cos(),
            fy: f * t.sin(),
            amp: rng.gen_range(0.2..0.5),
            phase: rng.gen_range(0.0..2.0 * PI),
        });
    }
    out
}

/// Strength of optical shading relative to the unit-energy scene field.
const SHADING_GAIN: f64 = 1.5;

/// Optical-only shading: large-scale oriented waves with a random direction,
/// absent from the radar return.
fn illumination(rng: &mut ChaCha8Rng) -> Vec<Wave> {
    let theta: f64 = rng.gen_range(0.0..PI);
    (0..4)
        .map(|_| {
            let t = theta + rng.gen_range(-0.15..0.15);
            let f = rng.gen_range(0.5..1.5);
            Wave {
                fx: f * t.cos(),
                fy: f * t.sin(),
                amp: rng.gen_range(0.6..1.0),
                phase: rng.gen_range(0.0..2.0 * PI),
            }
        })
        .collect()
}

/// Evaluates a wave sum on an `n×n` grid spanning the unit square.
fn render(waves: &[Wave], n: usize) -> Vec<f64> {
    let energy = (waves.iter().map(|w| w.amp * w.amp).sum::<f64>() / 2.0).sqrt();
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        let v = (y as f64 + 0.5) / n as f64;
        for x in 0..n {
            let u = (x as f64 + 0.5) / n as f64;
            let s: f64 = waves
                .iter()
                .map(|w| w.amp * (2.0 * PI * (w.fx * u + w.fy * v) + w.phase).cos())
                .sum();
            out.push(s / energy);
        }
    }
    out
}

fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t * t * t - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

/// Separable Keys bicubic ×2 upsampling with edge clamping, pixel-center aligned.
pub fn upsample2_bicubic(src: &[f64], n: usize) -> Vec<f64> {
    let m = 2 * n;
    let taps: Vec<[(usize, f64); 4]> = (0..m)
        .map(|o| {
            let s = (o as f64 + 0.5) / 2.0 - 0.5;
            let base = s.floor();
            let mut t = [(0usize, 0.0f64); 4];
            for (k, slot) in t.iter_mut().enumerate() {
                let i = base + k as f64 - 1.0;
                let idx = i.clamp(0.0, (n - 1) as f64) as usize;
                *slot = (idx, cubic_weight(s - i));
            }
            t
        })
        .collect();
    let mut rows = vec![0.0; n * m];
    for y in 0..n {
        for (x, tap) in taps.iter().enumerate() {
            rows[y * m + x] = tap.iter().map(|(i, w)| w * src[y * n + i]).sum();
        }
    }
    let mut out = vec![0.0; m * m];
    for (y, tap) in taps.iter().enumerate() {
        for x in 0..m {
            out[y * m + x] = tap.iter().map(|(i, w)| w * rows[i * m + x]).sum();
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Builds the sample for `(tile, class_id, seed)` at low-res size `size`.
pub fn synth_triplet(
    tile: TileId,
    class_id: u32,
    seed: u64,
    size: usize,
) -> Result<AlignedTriplet> {
    TileId::new(tile.z, tile.x, tile.y)?;
    if size < 2 {
        return Err(Error::contract(format!(
            "sample size must be at least 2, got {size}"
        )));
    }
    let key = derive_seed(&[
        seed,
        u64::from(tile.z),
        u64::from(tile.x),
        u64::from(tile.y),
        u64::from(class_id),
    ]);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let n = size;

    let field = render(&waves(&mut rng, class_id), n);
    let offset: f64 = rng.gen_range(-0.4..0.4);
    let gain: f64 = rng.gen_range(1.0..1.6);
    let scene: Vec<f64> = field.iter().map(|f| sigmoid(gain * f + offset)).collect();
    let shading = render(&illumination(&mut rng), n);
    let lum: Vec<f64> = field
        .iter()
        .zip(&shading)
        .map(|(f, s)| sigmoid(gain * (f + SHADING_GAIN * s) + offset))
        .collect();

    let gammas: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.8..1.25));
    let mut lores = Vec::with_capacity(3 * n * n);
    for g in gammas {
        lores.extend(lum.iter().map(|l| (0.05 + 0.9 * l.powf(g)) as f32));
    }

    let detail_theta: f64 = rng.gen_range(0.0..PI);
    let detail = render(
        &(0..3)
            .map(|_| {
                let t = detail_theta + rng.gen_range(-0.5..0.5);
                let f = rng.gen_range(0.55..0.85) * n as f64;
                Wave {
                    fx: f * t.cos(),
                    fy: f * t.sin(),
                    amp: 1.0,
                    phase: rng.gen_range(0.0..2.0 * PI),
                }
            })
            .collect::<Vec<_>>(),
        2 * n,
    );
    let mut hires = Vec::with_capacity(12 * n * n);
    for c in 0..OPTICAL_CHANNELS {
        let chan: Vec<f64> = lores[c * n * n..(c + 1) * n * n]
            .iter()
            .map(|&v| f64::from(v))
            .collect();
        let up = upsample2_bicubic(&chan, n);
        hires.extend(
            up.iter()
                .zip(&detail)
                .map(|(u, d)| (u + 0.05 * d).clamp(0.0, 1.0) as f32),
        );
    }

    let speckle = Gamma::new(4.0, 0.25).expect("valid gamma");
    let vv: Vec<f64> = scene
        .iter()
        .map(|l| 1000.0 * (0.05 + 0.85 * l.powf(1.5)) * speckle.sample(&mut rng))
        .collect();
    let vh: Vec<f64> = scene
        .iter()
        .map(|l| 1000.0 * (0.03 + 0.6 * l * l) * speckle.sample(&mut rng))
        .collect();
    let packed = pack_radar(
        &Band {
            height: n,
            width: n,
            data: vv,
        },
        &Band {
            height: n,
            width: n,
            data: vh,
        },
    )?;
    let radar: Vec<f32> = packed.data[n * n..]
        .iter()
        .map(|&b| f32::from(b) / 255.0)
        .collect();

    let t = AlignedTriplet {
        tile,
        class_id,
        radar: Raster::new(RADAR_CHANNELS, n, n, radar)?,
        lores: Raster::new(OPTICAL_CHANNELS, n, n, lores)?,
        hires: Raster::new(OPTICAL_CHANNELS, 2 * n, 2 * n, hires)?,
    };
    t.validate()?;
    Ok(t)
}

/// Pearson correlation of two equal-length sequences.
pub fn pearson(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let mb = b.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (f64::from(x) - ma, f64::from(y) - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    sab / (saa * sbb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tile() -> TileId {
        TileId::new(15, 5241, 12663).unwrap()
    }

    #[test]
    fn deterministic() {
        let a = synth_triplet(tile(), 2, 7, 16).unwrap();
        let b = synth_triplet(tile(), 2, 7, 16).unwrap();
        assert_eq!(a, b);
        let c = synth_triplet(tile(), 2, 8, 16).unwrap();
        assert_ne!(a.lores, c.lores);
    }

    #[test]
    fn shapes_and_ranges() {
        let t = synth_triplet(tile(), 0, 1, 32).unwrap();
        assert_eq!(t.radar.shape(), [2, 32, 32]);
        assert_eq!(t.lores.shape(), [3, 32, 32]);
        assert_eq!(t.hires.shape(), [3, 64, 64]);
        for r in [&t.radar, &t.lores, &t.hires] {
            assert!(r.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn bicubic_preserves_constants_and_ramps() {
        let c = upsample2_bicubic(&[0.3; 16], 4);
        assert!(c.iter().all(|v| (v - 0.3).abs() < 1e-12));
        // interior of a linear ramp is reproduced exactly
        let ramp: Vec<f64> = (0..64).map(|i| (i % 8) as f64).collect();
        let up = upsample2_bicubic(&ramp, 8);
        let row = &up[5 * 16..6 * 16];
        for (x, v) in row.iter().enumerate().take(12).skip(4) {
            let expect = (x as f64 + 0.5) / 2.0 - 0.5;
            assert!((v - expect).abs() < 1e-12, "{x}: {v}");
        }
    }

    #[test]
    fn invalid_tile_rejected() {
        let bad = TileId { z: 1, x: 5, y: 0 };
        assert!(synth_triplet(bad, 0, 0, 8).is_err());
    }
}
