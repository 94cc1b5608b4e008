use std::fs;

use r2u3d_core::data::{
    depth_index_map, ellipsoid_phantom, normalize, phantom_set, preprocess_pair, read_internal, read_metaimage,
    resample_depth, write_internal, write_metaimage, MetaElementType, PhantomConfig, Volume,
};
use r2u3d_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FIXTURE_HEADER: &str = "ObjectType = Image\nNDims = 3\nDimSize = 4 3 2\nElementSpacing = 0.5 0.7 2.5\n\
                              ElementType = MET_UCHAR\nElementDataFile = fixture.raw\n";

fn write_fixture(dir: &std::path::Path, payload_len: usize) -> std::path::PathBuf {
    let header = dir.join("fixture.mhd");
    fs::write(&header, FIXTURE_HEADER).unwrap();
    fs::write(dir.join("fixture.raw"), (0..payload_len as u8).collect::<Vec<_>>()).unwrap();
    header
}

#[test]
fn metaimage_fixture_layout() {
    let dir = tempfile::tempdir().unwrap();
    let v = read_metaimage(write_fixture(dir.path(), 24)).unwrap();
    assert_eq!(v.dims, [2, 3, 4]);
    assert_eq!(v.spacing, [2.5, 0.7, 0.5]);
    assert_eq!(v.at(0, 0, 0), 0.0);
    assert_eq!(v.at(1, 2, 3), 23.0);
    assert_eq!(v.at(0, 1, 2), 6.0);
    // Same bytes in, same voxels out.
    assert_eq!(read_metaimage(dir.path().join("fixture.mhd")).unwrap(), v);
}

#[test]
fn metaimage_short_payload_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let err = read_metaimage(write_fixture(dir.path(), 23)).unwrap_err();
    assert!(matches!(err, Error::Format { .. }), "{err}");
    assert!(err.to_string().contains("23 bytes"));
}

#[test]
fn metaimage_rejects_unsupported_headers() {
    let dir = tempfile::tempdir().unwrap();
    let header = write_fixture(dir.path(), 24);
    let cases = [
        ("ElementType = MET_UCHAR", "ElementType = MET_DOUBLE"),
        ("ElementDataFile = fixture.raw", "ElementDataFile = LOCAL"),
        ("NDims = 3", "NDims = 3\nCompressedData = True"),
        ("NDims = 3", "NDims = 3\nBinaryDataByteOrderMSB = True"),
        ("DimSize = 4 3 2\n", ""),
    ];
    for (from, to) in cases {
        fs::write(&header, FIXTURE_HEADER.replace(from, to)).unwrap();
        assert!(read_metaimage(&header).is_err(), "accepted header with `{to}`");
    }
    assert!(matches!(read_metaimage(dir.path().join("missing.mhd")), Err(Error::Io { .. })));
}

#[test]
fn metaimage_writer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let vox: Vec<f32> = (0..60).map(|_| rng.gen_range(-1000..1000) as f32).collect();
    let v = Volume::new([3, 4, 5], [2.0, 0.8, 0.8], vox).unwrap();
    for ty in [MetaElementType::Short, MetaElementType::Float] {
        let h = dir.path().join(format!("{ty:?}.mhd"));
        write_metaimage(&h, &v, ty).unwrap();
        assert_eq!(read_metaimage(&h).unwrap(), v);
    }
}

#[test]
fn internal_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut vox: Vec<f32> = (0..2 * 3 * 7).map(|_| rng.gen::<f32>() * 1e-3 - 0.3).collect();
    vox[0] = f32::MIN_POSITIVE;
    vox[1] = -0.0;
    let v = Volume::new([2, 3, 7], [1.25, 0.1, 1.0 / 3.0], vox).unwrap();
    let path = dir.path().join("scan.vhdr");
    write_internal(&path, &v).unwrap();
    let back = read_internal(&path).unwrap();
    assert_eq!(back.dims, v.dims);
    assert_eq!(back.spacing, v.spacing);
    let bits = |x: &Volume| x.voxels.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&v));
}

#[test]
fn internal_rejects_truncated_payload() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scan.vhdr");
    write_internal(&path, &Volume::zeros([2, 2, 2])).unwrap();
    fs::write(dir.path().join("scan.raw"), [0u8; 31]).unwrap();
    assert!(read_internal(&path).is_err());
}

/// Brute-force evaluation of the half-offset nearest map with real numbers.
fn index_oracle(d: usize, t: usize) -> Vec<usize> {
    (0..t).map(|i| (((i as f64 + 0.5) * d as f64 / t as f64).floor() as usize).min(d - 1)).collect()
}

#[test]
fn index_map_examples() {
    assert_eq!(depth_index_map(3, 6), vec![0, 0, 1, 1, 2, 2]);
    assert_eq!(depth_index_map(512, 256), (0..256).map(|i| 2 * i + 1).collect::<Vec<_>>());
    assert_eq!(depth_index_map(7, 7), (0..7).collect::<Vec<_>>());
    for d in 1..40 {
        for t in 1..40 {
            let m = depth_index_map(d, t);
            assert_eq!(m, index_oracle(d, t), "d={d} t={t}");
            assert!(m.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}

fn ramp(d: usize) -> Volume {
    let vox = (0..d * 2 * 3).map(|i| (i / 6) as f32 * 10.0 + (i % 6) as f32).collect();
    Volume::new([d, 2, 3], [1.0; 3], vox).unwrap()
}

#[test]
fn resample_copies_whole_slices() {
    let v = ramp(9);
    for t in [1, 4, 9, 20] {
        let r = resample_depth(&v, t).unwrap();
        assert_eq!(r.dims, [t, 2, 3]);
        for (i, &src) in depth_index_map(9, t).iter().enumerate() {
            assert_eq!(r.slice(i), v.slice(src));
        }
        assert_eq!(resample_depth(&r, t).unwrap(), r);
    }
    assert_eq!(resample_depth(&v, 9).unwrap().voxels, v.voxels);
    assert!(resample_depth(&v, 0).is_err());
}

#[test]
fn normalize_laws() {
    let v = Volume::new([1, 1, 3], [1.0; 3], vec![-1000.0, 0.0, 1000.0]).unwrap();
    assert_eq!(normalize(&v).voxels, vec![0.0, 0.5, 1.0]);
    let c = Volume::new([1, 2, 2], [1.0; 3], vec![7.0; 4]).unwrap();
    assert_eq!(normalize(&c).voxels, vec![0.0; 4]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let vox: Vec<f32> = (0..48).map(|_| rng.gen_range(-2000.0..3000.0)).collect();
        let n = normalize(&Volume::new([3, 4, 4], [1.0; 3], vox).unwrap());
        let lo = n.voxels.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = n.voxels.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!((lo, hi), (0.0, 1.0));
        assert_eq!(normalize(&n), n);
    }
}

#[test]
fn preprocess_keeps_slices_aligned() {
    // Slice z of the image carries value z; the mask is 1 on odd slices only.
    let d = 5;
    let image = Volume::new([d, 2, 2], [1.0; 3], (0..d * 4).map(|i| (i / 4) as f32).collect()).unwrap();
    let mask = Volume::new([d, 2, 2], [1.0; 3], (0..d * 4).map(|i| ((i / 4) % 2) as f32).collect()).unwrap();
    let pair = preprocess_pair("s", &image, &mask, Some(12)).unwrap();
    assert!(pair.mask.is_binary());
    for (k, &src) in depth_index_map(d, 12).iter().enumerate() {
        assert_eq!(pair.image.slice(k)[0], src as f32 / (d - 1) as f32);
        assert_eq!(pair.mask.slice(k)[0], (src % 2) as f32);
    }
    let same = preprocess_pair("s", &image, &mask, None).unwrap();
    assert_eq!(same.mask, mask);

    let soft = Volume::new([d, 2, 2], [1.0; 3], vec![0.6; d * 4]).unwrap();
    assert!(preprocess_pair("s", &image, &soft, Some(3)).unwrap().mask.voxels.iter().all(|&v| v == 1.0));
    assert!(preprocess_pair("s", &image, &Volume::zeros([d, 2, 3]), None).is_err());
}

#[test]
fn phantoms_are_seeded_and_plausible() {
    let cfg = PhantomConfig::default();
    let a = ellipsoid_phantom("a", &cfg, 7);
    assert_eq!(a, ellipsoid_phantom("a", &cfg, 7));
    assert_ne!(a.mask, ellipsoid_phantom("a", &cfg, 8).mask);
    assert_eq!(a.image.dims, [16, 32, 32]);
    let fg = a.mask.voxels.iter().filter(|&&v| v == 1.0).count() as f64 / a.mask.voxels.len() as f64;
    assert!((0.01..0.5).contains(&fg), "foreground fraction {fg}");
    let resid: Vec<f64> = a.image.voxels.iter().zip(&a.mask.voxels).map(|(i, m)| (i - m) as f64).collect();
    let sd = (resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64).sqrt();
    assert!((sd - 0.1).abs() < 0.01, "{sd}");
    let set = phantom_set(5, &cfg, 0);
    assert_eq!(set.len(), 5);
    assert_eq!(set[3].id, "phantom-003");
}
