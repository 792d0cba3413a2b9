use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use s2fuse_core::dataset::{
    build_manifest, degrade_wald, extract_crops, load_sample, make_sample, materialize_sample, save_crop,
    DatasetError, Landscape, Manifest, SceneCrop, Split, SplitSpec, WALD_SIGMA,
};
use s2fuse_core::raster::{BandId, BandStack, COARSE_BANDS, FINE_BANDS};
use s2fuse_core::synth::generate_scene;

fn random_band(h: usize, w: usize, seed: u64) -> BandStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..h * w).map(|_| rng.gen::<f32>()).collect();
    BandStack::new(vec![BandId::B5], h, w, 200, data).unwrap()
}

fn mean(s: &BandStack) -> f64 {
    s.data().iter().map(|&v| v as f64).sum::<f64>() / s.data().len() as f64
}

#[test]
fn degrade_commutes_with_shifts() {
    let s = random_band(32, 32, 1);
    let shifted = BandStack::new(s.bands().to_vec(), 32, 32, 200, s.data().iter().map(|v| v + 0.25).collect()).unwrap();
    let a = degrade_wald(&s, WALD_SIGMA).unwrap();
    let b = degrade_wald(&shifted, WALD_SIGMA).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((y - x - 0.25).abs() < 1e-6);
    }
}

#[test]
fn degrade_preserves_the_mean_of_random_images() {
    for seed in 0..5 {
        let s = random_band(64, 64, seed);
        let d = degrade_wald(&s, WALD_SIGMA).unwrap();
        let gap = (mean(&d) - mean(&s)).abs();
        assert!(gap < 1e-3, "seed {seed}: {gap}");
    }
}

#[test]
fn sigma_is_configurable() {
    let s = random_band(16, 16, 3);
    let a = degrade_wald(&s, 1.0).unwrap();
    let b = degrade_wald(&s, 2.0).unwrap();
    assert_ne!(a, b);
    assert!(degrade_wald(&s, 0.0).is_err());
}

#[test]
fn full_scene_gives_one_hundred_crops() {
    let hr = BandStack::new(FINE_BANDS.to_vec(), 2400, 2400, 100, vec![0.1; 4 * 2400 * 2400]).unwrap();
    let lr = BandStack::new(COARSE_BANDS.to_vec(), 1200, 1200, 200, vec![0.2; 6 * 1200 * 1200]).unwrap();
    let crops = extract_crops(&hr, &lr, 240, Landscape::Rural).unwrap();
    assert_eq!(crops.len(), 100);
    assert_eq!(crops[99].id, "9_9");
    assert!(crops.iter().all(|c| c.hr10.height() == 240 && c.lr20.height() == 120));
}

#[test]
fn tiling_is_a_partition() {
    let (hr, lr) = generate_scene(Landscape::Urban, 96, 4);
    let crops = extract_crops(&hr, &lr, 48, Landscape::Urban).unwrap();
    // reassemble the 10m grid from the crops
    let mut seen = vec![0u8; 96 * 96];
    let mut rebuilt = vec![0.0f32; 96 * 96];
    for c in &crops {
        let (r, col) = c.id.split_once('_').unwrap();
        let (r, col): (usize, usize) = (r.parse().unwrap(), col.parse().unwrap());
        for y in 0..48 {
            for x in 0..48 {
                let p = (r * 48 + y) * 96 + col * 48 + x;
                seen[p] += 1;
                rebuilt[p] = c.hr10.data()[y * 48 + x];
            }
        }
    }
    assert!(seen.iter().all(|&n| n == 1));
    assert_eq!(&rebuilt[..], &hr.data()[..96 * 96]);
}

#[test]
fn constant_crop_degrades_to_the_same_constant() {
    let hr = BandStack::new(FINE_BANDS.to_vec(), 240, 240, 100, vec![0.3; 4 * 240 * 240]).unwrap();
    let lr = BandStack::new(COARSE_BANDS.to_vec(), 120, 120, 200, vec![0.2; 6 * 120 * 120]).unwrap();
    let crop = SceneCrop::new("0_0".into(), Landscape::Mixed, hr, lr).unwrap();
    let s = make_sample(&crop, WALD_SIGMA).unwrap();
    assert_eq!((s.input_f.height(), s.input_f.width(), s.input_f.gsd_dm()), (60, 60, 400));
    assert!(s.input_f.data().iter().all(|&v| v == 0.2));
    assert!(s.reference.data().iter().all(|&v| v == 0.2));
}

#[test]
fn crop_pair_is_validated() {
    let (hr, lr) = generate_scene(Landscape::Rural, 16, 0);
    let swapped = lr.select(&COARSE_BANDS[..5]).unwrap();
    assert!(matches!(
        SceneCrop::new("x".into(), Landscape::Rural, hr.clone(), swapped),
        Err(DatasetError::BadCrop(_))
    ));
    let small = hr.select(&FINE_BANDS).unwrap();
    let (_, lr_other) = generate_scene(Landscape::Rural, 8, 0);
    assert!(SceneCrop::new("x".into(), Landscape::Rural, small, lr_other).is_err());
}

fn write_crops(dir: &std::path::Path, n: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        let l = Landscape::ALL[i % 4];
        let (hr, lr) = generate_scene(l, 16, i as u64);
        let crop = SceneCrop::new(format!("{i}"), l, hr, lr).unwrap();
        save_crop(&crop, dir, &format!("{}_{i:03}", l.as_str())).unwrap();
    }
}

#[test]
fn manifest_is_deterministic_and_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let crops = tmp.path().join("crops");
    write_crops(&crops, 10);
    let spec: SplitSpec = "8,2".parse().unwrap();
    let a = build_manifest(&[crops.clone()], spec, 7).unwrap();
    let b = build_manifest(&[crops.clone()], spec, 7).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.count(Split::Train), a.count(Split::Val), a.count(Split::Test)), (8, 2, 0));
    let c = build_manifest(&[crops.clone()], spec, 8).unwrap();
    assert_ne!(a.entries, c.entries);

    let path = tmp.path().join("manifest.json");
    a.save(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(json["version"], 1);
    assert_eq!(json["seed"], 7);
    let first = &json["entries"][0];
    assert!(first["path"].as_str().unwrap().starts_with("crops/"));
    assert!(["train", "val"].contains(&first["split"].as_str().unwrap()));
    let loaded = Manifest::load(&path).unwrap();
    assert_eq!(loaded, a);
    for e in &loaded.entries {
        let name = e.path.file_name().unwrap().to_string_lossy().into_owned();
        assert_eq!(e.landscape, Landscape::from_name(&name));
    }
}

#[test]
fn manifest_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let crops = tmp.path().join("crops");
    write_crops(&crops, 3);
    assert!(matches!(
        build_manifest(&[crops.clone(), crops.clone()], "6,0".parse().unwrap(), 1),
        Err(DatasetError::DuplicatePath(_))
    ));
    assert!(matches!(
        build_manifest(&[tmp.path().join("nope")], "1,0".parse().unwrap(), 1),
        Err(DatasetError::MissingDirectory(_))
    ));
    assert!(matches!(
        build_manifest(&[crops.clone()], "2,2".parse().unwrap(), 1),
        Err(DatasetError::SplitMismatch { requested: 4, available: 3 })
    ));
    let m = build_manifest(&[crops.clone()], "2,1".parse().unwrap(), 1).unwrap();
    let path = tmp.path().join("m.json");
    m.save(&path).unwrap();
    let stem = m.entries[0].path.clone();
    std::fs::remove_file(PathBuf::from(format!("{}.hr10.s2sr", stem.display()))).unwrap();
    assert!(matches!(Manifest::load(&path), Err(DatasetError::MissingCrop(_))));
}

#[test]
fn five_hundred_and_one_hundred_split() {
    let tmp = tempfile::tempdir().unwrap();
    let crops = tmp.path().join("crops");
    std::fs::create_dir_all(&crops).unwrap();
    let (hr, lr) = generate_scene(Landscape::Rural, 4, 0);
    let crop = SceneCrop::new("c".into(), Landscape::Rural, hr, lr).unwrap();
    for i in 0..600 {
        save_crop(&crop, &crops, &format!("rural_{i:04}")).unwrap();
    }
    let m = build_manifest(&[crops], "500,100".parse().unwrap(), 3).unwrap();
    assert_eq!((m.count(Split::Train), m.count(Split::Val)), (500, 100));
}

#[test]
fn materialized_samples_match_lazy_ones() {
    let tmp = tempfile::tempdir().unwrap();
    let (hr, lr) = generate_scene(Landscape::Coastal, 32, 2);
    let crop = SceneCrop::new("c".into(), Landscape::Coastal, hr, lr).unwrap();
    let stem = save_crop(&crop, tmp.path(), "coastal_0").unwrap();
    let lazy = load_sample(&stem, Landscape::Coastal, WALD_SIGMA).unwrap();
    materialize_sample(&stem, &lazy).unwrap();
    let eager = load_sample(&stem, Landscape::Coastal, WALD_SIGMA).unwrap();
    assert_eq!(lazy, eager);
    assert_eq!(eager.reference, crop.lr20);
}
