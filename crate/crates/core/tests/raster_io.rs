use proptest::prelude::*;

use s2fuse_core::raster::{
    compose, compute_index, read_raster, render_visual, write_raster, BandId, BandStack, CompositeKind, IndexKind,
    RasterError, RgbComposite, VisualParams, COARSE_BANDS, FINE_BANDS,
};

fn random_stack(bands: &[BandId], h: usize, w: usize, seed: u64) -> BandStack {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let data = (0..bands.len() * h * w)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 40) as f32 / (1u64 << 24) as f32
        })
        .collect();
    BandStack::new(bands.to_vec(), h, w, 200, data).unwrap()
}

#[test]
fn file_round_trip_is_byte_exact() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.s2sr");
    let q = dir.path().join("y.s2sr");
    let s = random_stack(&COARSE_BANDS, 120, 120, 5);
    write_raster(&s, &p).unwrap();
    assert_eq!(std::fs::metadata(&p).unwrap().len(), 345_630);
    let back = read_raster(&p).unwrap();
    assert_eq!(back, s);
    write_raster(&back, &q).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
}

#[test]
fn missing_file_is_an_io_error() {
    assert!(matches!(read_raster("/nonexistent/a.s2sr"), Err(RasterError::Io(_))));
}

#[test]
fn trailing_bytes_rejected() {
    let mut bytes = random_stack(&FINE_BANDS, 2, 2, 1).to_bytes();
    bytes.push(0);
    assert!(matches!(BandStack::from_bytes(&bytes), Err(RasterError::TrailingData(1))));
}

#[test]
fn constructor_enforces_invariants() {
    assert!(matches!(
        BandStack::new(vec![BandId::B2], 2, 2, 100, vec![0.0; 3]),
        Err(RasterError::Shape(_))
    ));
    assert!(matches!(
        BandStack::new(vec![BandId::B2], 1, 1, 100, vec![f32::INFINITY]),
        Err(RasterError::NonFinite)
    ));
    assert!(matches!(
        BandStack::new(vec![BandId::B2, BandId::B2], 1, 1, 100, vec![0.0; 2]),
        Err(RasterError::DuplicateBand(BandId::B2))
    ));
}

#[test]
fn ndwi_on_mixed_resolution_needs_resampling() {
    let fine = random_stack(&FINE_BANDS, 4, 4, 2);
    let fine = BandStack::new(fine.bands().to_vec(), 4, 4, 100, fine.data().to_vec()).unwrap();
    let coarse = random_stack(&COARSE_BANDS, 2, 2, 3);
    let err = s2fuse_core::raster::compute_index_multi(&[&fine, &coarse], IndexKind::Ndwi).unwrap_err();
    assert!(matches!(err, RasterError::MixedGsd));
}

proptest! {
    #[test]
    fn bytes_round_trip(h in 1usize..6, w in 1usize..6, seed in any::<u64>(), nb in 1usize..=10) {
        let bands = &BandId::ALL[..nb];
        let s = random_stack(bands, h, w, seed);
        let bytes = s.to_bytes();
        let back = BandStack::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back, s);
    }

    #[test]
    fn indices_stay_in_unit_range(vals in prop::collection::vec((0.0f32..1.0, 0.0f32..1.0, 0.0f32..1.0), 1..40)) {
        let n = vals.len();
        let mut data = Vec::new();
        data.extend(vals.iter().map(|v| v.0));
        data.extend(vals.iter().map(|v| v.1));
        data.extend(vals.iter().map(|v| v.2));
        let s = BandStack::new(vec![BandId::B3, BandId::B8a, BandId::B11], 1, n, 200, data).unwrap();
        for kind in [IndexKind::Ndwi, IndexKind::Ndmi] {
            for v in compute_index(&s, kind).unwrap() {
                prop_assert!((-1.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn compose_copies_bands(seed in any::<u64>()) {
        let s = random_stack(&BandId::ALL, 3, 4, seed);
        let before = s.clone();
        for kind in [CompositeKind::TrueColor, CompositeKind::UrbanFalseColor, CompositeKind::SwirComposite] {
            let rgb = compose(&s, kind).unwrap();
            for (c, band) in kind.channels().iter().enumerate() {
                prop_assert_eq!(rgb.channel(c), s.band(*band).unwrap().to_vec());
            }
        }
        prop_assert_eq!(s, before);
    }

    #[test]
    fn rendering_is_monotone(mut vals in prop::collection::vec(0.0f32..1.0, 2..60), gamma in 0.3f64..4.0) {
        let n = vals.len();
        let pixels = vals.iter().flat_map(|&v| [v, v, v]).collect();
        let rgb = RgbComposite { kind: CompositeKind::TrueColor, height: 1, width: n, pixels };
        let img = render_visual(&rgb, VisualParams { gamma, ..VisualParams::default() }).unwrap();
        let mut pairs: Vec<(f32, u8)> = vals.drain(..).zip(img.data.chunks(3).map(|p| p[0])).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in pairs.windows(2) {
            prop_assert!(w[0].1 <= w[1].1);
        }
    }
}
