//! Channel-first rasters and SAR band packing.

use crate::error::{Error, Result};

/// Channel-first `C×H×W` f32 raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Dimension {
                op: "raster",
                lhs: vec![channels, height, width],
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    /// Averages non-overlapping `factor×factor` blocks.
    pub fn downsample(&self, factor: usize) -> Result<Raster> {
        if factor == 0 || !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor)
        {
            return Err(Error::Shape(format!(
                "{}x{} raster cannot be downsampled by {factor}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let norm = (factor * factor) as f64;
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            let src = self.channel(c);
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0f64;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += f64::from(src[(y * factor + dy) * self.width + x * factor + dx]);
                        }
                    }
                    data.push((acc / norm) as f32);
                }
            }
        }
        Raster::new(self.channels, h, w, data)
    }
}

/// Single band of physical values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// 8-bit RGB image, channel-first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb8 {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Rgb8 {
    pub fn channel(&self, c: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

pub const RADAR_SCALE: f64 = 256.0 / 1000.0;

fn quantize(v: f64) -> u8 {
    (v * RADAR_SCALE).round().clamp(0.0, 255.0) as u8
}

/// Packs VV/VH backscatter into an 8-bit RGB image: red empty, VV green, VH blue.
///
/// Values are scaled by 256/1000, rounded half-up, and clamped to `0..=255`.
pub fn pack_radar(vv: &Band, vh: &Band) -> Result<Rgb8> {
    if vv.height != vh.height || vv.width != vh.width || vv.data.len() != vh.data.len() {
        return Err(Error::Shape(format!(
            "VV is {}x{} but VH is {}x{}",
            vv.height, vv.width, vh.height, vh.width
        )));
    }
    if let Some(bad) = vv
        .data
        .iter()
        .chain(&vh.data)
        .find(|v| v.is_nan() || **v < 0.0)
    {
        return Err(Error::Range(format!(
            "backscatter must be non-negative, got {bad}"
        )));
    }
    let n = vv.data.len();
    let mut data = vec![0u8; 3 * n];
    for (dst, v) in data[n..2 * n].iter_mut().zip(&vv.data) {
        *dst = quantize(*v);
    }
    for (dst, v) in data[2 * n..].iter_mut().zip(&vh.data) {
        *dst = quantize(*v);
    }
    Ok(Rgb8 {
        height: vv.height,
        width: vv.width,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn band(v: f64) -> Band {
        Band {
            height: 1,
            width: 1,
            data: vec![v],
        }
    }

    #[test]
    fn pinned_examples() {
        let z = pack_radar(&band(0.0), &band(0.0)).unwrap();
        assert_eq!(z.data, vec![0, 0, 0]);
        let p = pack_radar(&band(500.0), &band(0.0)).unwrap();
        assert_eq!(p.channel(1), &[128]);
        let p = pack_radar(&band(4000.0), &band(10.0)).unwrap();
        assert_eq!(p.channel(0), &[0]);
        assert_eq!(p.channel(1), &[255]);
        assert_eq!(p.channel(2), &[3]);
    }

    #[test]
    fn mismatched_or_negative_rejected() {
        let two = Band {
            height: 1,
            width: 2,
            data: vec![0.0, 0.0],
        };
        assert!(matches!(pack_radar(&band(1.0), &two), Err(Error::Shape(_))));
        assert!(pack_radar(&band(-1.0), &band(0.0)).is_err());
    }

    #[test]
    fn downsample_averages_blocks() {
        let r = Raster::new(1, 2, 2, vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        assert_eq!(r.downsample(2).unwrap().data, vec![3.0]);
        assert!(r.downsample(3).is_err());
    }
}
