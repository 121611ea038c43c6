//! Tile math, SAR packing, synthetic triplets, and the dataset container.

pub mod container;
pub mod raster;
pub mod synth;
pub mod tiles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use container::{write_dataset, Dataset, DatasetInfo, DatasetManifest};
pub use raster::{pack_radar, Band, Raster, Rgb8};
pub use synth::{synth_triplet, AlignedTriplet};
pub use tiles::{lonlat_to_tile, TileId};

use crate::error::Result;

/// Zoom level used for generated sample tiles.
pub const SAMPLE_ZOOM: u32 = 15;

/// Continental-US bounding box (west, south, east, north) used to place sample tiles.
const REGION: (f64, f64, f64, f64) = (-124.0, 25.0, -67.0, 49.0);

/// Generates `count` samples with labels cycling through `classes`.
///
/// Sample `i` sits on a seeded tile and draws its content from a per-sample
/// seed, so the whole set is a pure function of the arguments.
pub fn generate(count: usize, classes: u32, size: usize, seed: u64) -> Result<Vec<AlignedTriplet>> {
    let classes = classes.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(synth::derive_seed(&[seed, 0x711E]));
    (0..count)
        .map(|i| {
            let lon = rng.gen_range(REGION.0..REGION.2);
            let lat = rng.gen_range(REGION.1..REGION.3);
            let tile = lonlat_to_tile(lon, lat, SAMPLE_ZOOM)?;
            let class_id = (i as u32) % classes;
            let sample_seed = synth::derive_seed(&[seed, i as u64]);
            synth_triplet(tile, class_id, sample_seed, size)
        })
        .collect()
}
