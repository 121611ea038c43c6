use std::fs;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scale_alibi::data::container::{record_size, MANIFEST_FILE, SAMPLES_FILE};
use scale_alibi::data::synth::pearson;
use scale_alibi::data::{
    generate, lonlat_to_tile, pack_radar, synth_triplet, write_dataset, Band, Dataset, DatasetInfo,
    TileId,
};
use scale_alibi::Error;

fn tile(z: u32, x: u32, y: u32) -> TileId {
    TileId::new(z, x, y).unwrap()
}

#[test]
fn hand_computed_tiles() {
    for (lon, lat) in [(-180.0, 85.05), (0.0, 0.0), (179.999, -85.05), (12.5, 41.9)] {
        assert_eq!(lonlat_to_tile(lon, lat, 0).unwrap(), tile(0, 0, 0));
    }
    assert_eq!(lonlat_to_tile(0.0, 0.0, 1).unwrap(), tile(1, 1, 1));
    assert_eq!(lonlat_to_tile(-179.9, 0.0, 2).unwrap(), tile(2, 0, 2));
}

#[test]
fn out_of_range_coordinates_are_rejected() {
    for (lon, lat) in [
        (0.0, 86.0),
        (0.0, -85.06),
        (180.0, 0.0),
        (-180.1, 0.0),
        (0.0, f64::NAN),
    ] {
        assert!(
            matches!(lonlat_to_tile(lon, lat, 3), Err(Error::Range(_))),
            "({lon}, {lat})"
        );
    }
    assert!(TileId::new(2, 4, 0).is_err());
    assert!(TileId::new(31, 0, 0).is_err());
}

#[test]
fn children_and_parents() {
    let root = tile(0, 0, 0);
    let kids = root.children().unwrap();
    assert_eq!(
        kids,
        [tile(1, 0, 0), tile(1, 1, 0), tile(1, 0, 1), tile(1, 1, 1)]
    );
    let mut grandkids: Vec<TileId> = kids.iter().flat_map(|k| k.children().unwrap()).collect();
    for g in &grandkids {
        assert_eq!(g.parent().unwrap().parent().unwrap(), root);
    }
    grandkids.sort_by_key(|t| (t.x, t.y));
    grandkids.dedup();
    assert_eq!(grandkids.len(), 16);
    assert!(root.parent().is_none());
    assert!(tile(30, 0, 0).children().is_err());
}

#[test]
fn tile_centers_map_back_to_their_tile() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for z in [5u32, 10, 15, 17] {
        for _ in 0..1000 {
            let n = 1u32 << z;
            let t = tile(z, rng.gen_range(0..n), rng.gen_range(0..n));
            let (lon, lat) = t.bbox().center();
            assert_eq!(lonlat_to_tile(lon, lat, z).unwrap(), t);
        }
    }
}

fn band(data: Vec<f64>) -> Band {
    Band {
        height: 1,
        width: data.len(),
        data,
    }
}

#[test]
fn radar_packing_examples() {
    let zero = pack_radar(&band(vec![0.0; 4]), &band(vec![0.0; 4])).unwrap();
    assert!(zero.data.iter().all(|&v| v == 0));
    let img = pack_radar(&band(vec![500.0, 4000.0]), &band(vec![0.0, 1000.0])).unwrap();
    assert_eq!(img.channel(0), [0, 0]);
    assert_eq!(img.channel(1), [128, 255]);
    assert_eq!(img.channel(2), [0, 255]);
}

#[test]
fn radar_packing_rejects_mismatched_bands() {
    let err = pack_radar(&band(vec![1.0; 4]), &band(vec![1.0; 3])).unwrap_err();
    assert!(matches!(err, Error::Shape(_)), "{err}");
    assert!(pack_radar(&band(vec![-1.0]), &band(vec![0.0])).is_err());
}

proptest! {
    #[test]
    fn radar_packing_is_monotone(pairs in prop::collection::vec((0.0f64..1200.0, 0.0f64..300.0), 1..64)) {
        let lo = band(pairs.iter().map(|p| p.0).collect());
        let hi = band(pairs.iter().map(|p| p.0 + p.1).collect());
        let vh = band(vec![0.0; pairs.len()]);
        let (a, b) = (pack_radar(&lo, &vh).unwrap(), pack_radar(&hi, &vh).unwrap());
        for (x, y) in a.channel(1).iter().zip(b.channel(1)) {
            prop_assert!(x <= y);
        }
    }

    #[test]
    fn quantization_error_is_bounded(vv in prop::collection::vec(0.0f64..(255.0 * 1000.0 / 256.0), 1..64)) {
        let img = pack_radar(&band(vv.clone()), &band(vec![0.0; vv.len()])).unwrap();
        let step = 1000.0 / 256.0;
        for (g, v) in img.channel(1).iter().zip(&vv) {
            prop_assert!((f64::from(*g) * step - v).abs() <= 1000.0 / 512.0 + 0.5 * step);
        }
    }
}

#[test]
fn generator_is_deterministic() {
    let t = tile(15, 5241, 12663);
    assert_eq!(
        synth_triplet(t, 2, 7, 16).unwrap(),
        synth_triplet(t, 2, 7, 16).unwrap()
    );
    assert_eq!(
        generate(5, 3, 8, 42).unwrap(),
        generate(5, 3, 8, 42).unwrap()
    );
    assert_ne!(
        generate(5, 3, 8, 42).unwrap(),
        generate(5, 3, 8, 43).unwrap()
    );
}

#[test]
fn triplets_satisfy_their_invariants() {
    for s in generate(8, 4, 16, 3).unwrap() {
        s.validate().unwrap();
        assert_eq!(s.hires.shape(), [3, 32, 32]);
        for r in [&s.radar, &s.lores, &s.hires] {
            assert!(r.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn downsampled_hires_tracks_lores() {
    let t = tile(15, 5241, 12663);
    let mut worst = f64::INFINITY;
    for seed in 0..50 {
        let s = synth_triplet(t, (seed % 4) as u32, seed, 32).unwrap();
        let down = s.hires.downsample(2).unwrap();
        for c in 0..3 {
            worst = worst.min(pearson(down.channel(c), s.lores.channel(c)));
        }
        assert_ne!(down, s.lores, "hires must add detail beyond lores");
    }
    assert!(worst > 0.8, "worst r = {worst}");
}

#[test]
fn different_seeds_are_weakly_correlated() {
    let t = tile(15, 5241, 12663);
    let n = 200;
    let mean: f64 = (0..n)
        .map(|seed| {
            let a = synth_triplet(t, (seed % 4) as u32, seed, 32).unwrap();
            let b = synth_triplet(t, (seed % 4) as u32, seed + 1000, 32).unwrap();
            pearson(&a.lores.data, &b.lores.data).abs()
        })
        .sum::<f64>()
        / n as f64;
    assert!(mean < 0.3, "mean |r| = {mean}");
}

#[test]
fn empty_dataset_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let man = write_dataset(&[], 16, &DatasetInfo::default(), dir.path()).unwrap();
    assert_eq!(man.count, 0);
    let ds = Dataset::open(dir.path()).unwrap();
    assert!(ds.is_empty());
    assert!(ds.read_all().unwrap().is_empty());
}

#[test]
fn samples_round_trip_bitwise() {
    let samples = generate(10, 3, 8, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let info = DatasetInfo {
        seed: Some(5),
        classes: Some(3),
        subset: Some("micro".into()),
    };
    write_dataset(&samples, 8, &info, dir.path()).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    assert_eq!(ds.manifest.seed, Some(5));
    let back = ds.read_all().unwrap();
    assert_eq!(back.len(), 10);
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!((a.tile, a.class_id), (b.tile, b.class_id));
        for (x, y) in [
            (&a.radar, &b.radar),
            (&a.lores, &b.lores),
            (&a.hires, &b.hires),
        ] {
            let bits = |r: &scale_alibi::data::Raster| {
                r.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            };
            assert_eq!(bits(x), bits(y));
        }
    }
    let len = fs::metadata(dir.path().join(SAMPLES_FILE)).unwrap().len();
    assert_eq!(len, 10 * record_size(8));
    assert!(ds
        .manifest
        .records
        .windows(2)
        .all(|w| w[0].offset < w[1].offset));
}

#[test]
fn mixed_sizes_are_rejected() {
    let mut samples = generate(2, 1, 8, 1).unwrap();
    samples.extend(generate(1, 1, 16, 1).unwrap());
    let dir = tempfile::tempdir().unwrap();
    assert!(write_dataset(&samples, 8, &DatasetInfo::default(), dir.path()).is_err());
}

fn written(count: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(
        &generate(count, 2, 4, 9).unwrap(),
        4,
        &DatasetInfo::default(),
        dir.path(),
    )
    .unwrap();
    dir
}

fn edit_manifest(dir: &std::path::Path, f: impl FnOnce(&mut serde_json::Value)) {
    let path = dir.join(MANIFEST_FILE);
    let mut v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    f(&mut v);
    fs::write(path, v.to_string()).unwrap();
}

fn format_message(dir: &std::path::Path) -> String {
    match Dataset::open(dir).and_then(|d| d.read_all()) {
        Err(e @ Error::Format { .. }) => e.to_string(),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn wrong_manifest_count_is_reported() {
    let dir = written(3);
    edit_manifest(dir.path(), |v| v["count"] = 4.into());
    assert!(format_message(dir.path()).contains("count mismatch"));
}

#[test]
fn corrupt_magic_and_version_are_format_errors() {
    let dir = written(2);
    edit_manifest(dir.path(), |v| v["magic"] = "NOPE".into());
    assert!(format_message(dir.path()).contains("magic"));
    let dir = written(2);
    edit_manifest(dir.path(), |v| v["version"] = 99.into());
    assert!(format_message(dir.path()).contains("version"));
}

#[test]
fn truncation_names_the_record() {
    let dir = written(3);
    let bin = dir.path().join(SAMPLES_FILE);
    let bytes = fs::read(&bin).unwrap();
    fs::write(&bin, &bytes[..bytes.len() - 10]).unwrap();
    assert!(format_message(dir.path()).contains("record 2"));
}
