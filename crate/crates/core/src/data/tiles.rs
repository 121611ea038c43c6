//! Web-Mercator XYZ ("slippy map") tile addressing.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Latitude bound of the square Web-Mercator projection.
pub const MAX_LATITUDE: f64 = 85.051_128_779_806_59;
pub const MAX_ZOOM: u32 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileId {
    pub z: u32,
    pub x: u32,
    pub y: u32,
}

/// Geographic bounds in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub west: f64,
    pub south: f64,
    pub east: f64,
    pub north: f64,
}

impl BBox {
    pub fn center(&self) -> (f64, f64) {
        (
            (self.west + self.east) / 2.0,
            (self.south + self.north) / 2.0,
        )
    }
}

impl TileId {
    pub fn new(z: u32, x: u32, y: u32) -> Result<Self> {
        if z > MAX_ZOOM {
            return Err(Error::Range(format!("zoom {z} exceeds {MAX_ZOOM}")));
        }
        let n = 1u64 << z;
        if u64::from(x) >= n || u64::from(y) >= n {
            return Err(Error::Range(format!(
                "tile ({x}, {y}) outside 0..{n} at zoom {z}"
            )));
        }
        Ok(Self { z, x, y })
    }

    /// The four tiles one zoom level down, in (x, y) row-major order.
    pub fn children(&self) -> Result<[TileId; 4]> {
        if self.z >= MAX_ZOOM {
            return Err(Error::Range(format!(
                "tile at zoom {} has no children within zoom {MAX_ZOOM}",
                self.z
            )));
        }
        let (z, x, y) = (self.z + 1, self.x * 2, self.y * 2);
        Ok([
            TileId { z, x, y },
            TileId { z, x: x + 1, y },
            TileId { z, x, y: y + 1 },
            TileId {
                z,
                x: x + 1,
                y: y + 1,
            },
        ])
    }

    pub fn parent(&self) -> Option<TileId> {
        (self.z > 0).then(|| TileId {
            z: self.z - 1,
            x: self.x / 2,
            y: self.y / 2,
        })
    }

    pub fn bbox(&self) -> BBox {
        let n = f64::from(2u32).powi(self.z as i32);
        let lon = |x: f64| x / n * 360.0 - 180.0;
        let lat = |y: f64| (PI * (1.0 - 2.0 * y / n)).sinh().atan().to_degrees();
        BBox {
            west: lon(f64::from(self.x)),
            east: lon(f64::from(self.x) + 1.0),
            north: lat(f64::from(self.y)),
            south: lat(f64::from(self.y) + 1.0),
        }
    }
}

/// Tile containing a longitude/latitude at zoom `z`.
pub fn lonlat_to_tile(lon: f64, lat: f64, z: u32) -> Result<TileId> {
    if z > MAX_ZOOM {
        return Err(Error::Range(format!("zoom {z} exceeds {MAX_ZOOM}")));
    }
    if !(-180.0..180.0).contains(&lon) {
        return Err(Error::Range(format!("longitude {lon} outside [-180, 180)")));
    }
    if lat.is_nan() || lat.abs() > MAX_LATITUDE {
        return Err(Error::Range(format!(
            "latitude {lat} beyond the Web-Mercator limit {MAX_LATITUDE}"
        )));
    }
    let n = 2f64.powi(z as i32);
    let max_index = n - 1.0;
    let phi = lat.to_radians();
    let x = ((lon + 180.0) / 360.0 * n).floor().clamp(0.0, max_index);
    let y = ((1.0 - (phi.tan() + 1.0 / phi.cos()).ln() / PI) / 2.0 * n)
        .floor()
        .clamp(0.0, max_index);
    Ok(TileId {
        z,
        x: x as u32,
        y: y as u32,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zoom_zero_is_one_tile() {
        for (lon, lat) in [(-180.0, 85.0), (0.0, 0.0), (179.99, -85.05)] {
            assert_eq!(
                lonlat_to_tile(lon, lat, 0).unwrap(),
                TileId { z: 0, x: 0, y: 0 }
            );
        }
    }

    #[test]
    fn hand_computed_tiles() {
        assert_eq!(
            lonlat_to_tile(0.0, 0.0, 1).unwrap(),
            TileId { z: 1, x: 1, y: 1 }
        );
        assert_eq!(
            lonlat_to_tile(-179.9, 0.0, 2).unwrap(),
            TileId { z: 2, x: 0, y: 2 }
        );
    }

    #[test]
    fn out_of_range_inputs() {
        assert!(matches!(lonlat_to_tile(0.0, 86.0, 3), Err(Error::Range(_))));
        assert!(lonlat_to_tile(180.0, 0.0, 3).is_err());
        assert!(TileId::new(2, 4, 0).is_err());
    }

    #[test]
    fn children_and_parent() {
        let root = TileId::new(0, 0, 0).unwrap();
        let kids = root.children().unwrap();
        assert_eq!(
            kids,
            [
                TileId { z: 1, x: 0, y: 0 },
                TileId { z: 1, x: 1, y: 0 },
                TileId { z: 1, x: 0, y: 1 },
                TileId { z: 1, x: 1, y: 1 },
            ]
        );
        let mut grand: Vec<TileId> = kids.iter().flat_map(|k| k.children().unwrap()).collect();
        grand.sort_by_key(|t| (t.x, t.y));
        grand.dedup();
        assert_eq!(grand.len(), 16);
        for k in kids {
            assert_eq!(k.parent(), Some(root));
        }
        assert!(TileId { z: 30, x: 0, y: 0 }.children().is_err());
    }

    #[test]
    fn bbox_of_root() {
        let b = TileId::new(0, 0, 0).unwrap().bbox();
        assert_eq!((b.west, b.east), (-180.0, 180.0));
        assert!((b.north - MAX_LATITUDE).abs() < 1e-9);
    }
}
