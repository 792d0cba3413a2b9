//! Crops, Wald-protocol degradation and train/val/test manifests.
//!
//! A crop is stored as two rasters next to each other, `<stem>.hr10.s2sr`
//! (the four 10m bands) and `<stem>.lr20.s2sr` (the six 20m bands). Training
//! samples degrade both by a factor of two, so the original 20m bands become
//! the reference. With `--materialize` the degraded pair is also written as
//! `<stem>.in40.s2sr` / `<stem>.guide20.s2sr`; otherwise it is recomputed on
//! load.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{read_raster, write_raster, BandStack, RasterError, COARSE_BANDS, FINE_BANDS};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{what} dimensions {height}x{width} must be even")]
    OddDimensions {
        what: &'static str,
        height: usize,
        width: usize,
    },
    #[error("scene of {height}x{width} pixels is not divisible into {crop}x{crop} crops")]
    NonDivisible { height: usize, width: usize, crop: usize },
    #[error("bad crop pair: {0}")]
    BadCrop(String),
    #[error("directory {0} does not exist")]
    MissingDirectory(PathBuf),
    #[error("crop {0} is listed more than once")]
    DuplicatePath(PathBuf),
    #[error("crop {0} is missing")]
    MissingCrop(PathBuf),
    #[error("split sizes add up to {requested} but {available} crops were found")]
    SplitMismatch { requested: usize, available: usize },
    #[error("unsupported manifest version {0}")]
    UnsupportedVersion(u32),
    #[error("{path}: {source}")]
    RasterFile {
        path: PathBuf,
        #[source]
        source: RasterError,
    },
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_at(path: &Path) -> Result<BandStack> {
    read_raster(path).map_err(|source| DatasetError::RasterFile {
        path: path.to_path_buf(),
        source,
    })
}

/// Default Gaussian width of the degradation filter, in pixels.
pub const WALD_SIGMA: f64 = 1.0;
const WALD_RADIUS: usize = 3;

/// Normalized 7-tap Gaussian.
pub fn gaussian_taps(sigma: f64) -> [f64; 2 * WALD_RADIUS + 1] {
    let mut k = [0.0; 2 * WALD_RADIUS + 1];
    for (i, t) in k.iter_mut().enumerate() {
        let d = i as f64 - WALD_RADIUS as f64;
        *t = (-d * d / (2.0 * sigma * sigma)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|t| *t /= s);
    k
}

/// Separable Gaussian blur (7x7, reflect borders) followed by keeping every
/// other pixel starting at (0, 0). Halves the grid and doubles the gsd.
pub fn degrade_wald(stack: &BandStack, sigma: f64) -> Result<BandStack> {
    let (h, w) = (stack.height(), stack.width());
    if h % 2 != 0 || w % 2 != 0 {
        return Err(DatasetError::OddDimensions {
            what: "raster",
            height: h,
            width: w,
        });
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(DatasetError::InvalidArgument(format!("sigma {sigma}")));
    }
    let k = gaussian_taps(sigma);
    let r = WALD_RADIUS as isize;
    let (oh, ow) = (h / 2, w / 2);
    let plane = h * w;
    let mut out = Vec::with_capacity(stack.bands().len() * oh * ow);
    let mut rows = vec![0.0f64; oh * w];
    for b in 0..stack.bands().len() {
        let src = &stack.data()[b * plane..(b + 1) * plane];
        // vertical pass, only on the rows that survive decimation
        for oy in 0..oh {
            let y = 2 * oy as isize;
            for x in 0..w {
                rows[oy * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(t, &kt)| kt * src[reflect(y + t as isize - r, h) * w + x] as f64)
                    .sum();
            }
        }
        for oy in 0..oh {
            let row = &rows[oy * w..(oy + 1) * w];
            for ox in 0..ow {
                let x = 2 * ox as isize;
                let v: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(t, &kt)| kt * row[reflect(x + t as isize - r, w)])
                    .sum();
                out.push(v as f32);
            }
        }
    }
    Ok(BandStack::new(stack.bands().to_vec(), oh, ow, stack.gsd_dm() * 2, out)?)
}

fn reflect(i: isize, n: usize) -> usize {
    s2fuse_autograd::kernels::reflect_index(i, n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Landscape {
    Urban,
    Rural,
    Coastal,
    Mixed,
}

impl Landscape {
    pub const ALL: [Landscape; 4] = [Landscape::Urban, Landscape::Rural, Landscape::Coastal, Landscape::Mixed];

    pub fn as_str(self) -> &'static str {
        match self {
            Landscape::Urban => "urban",
            Landscape::Rural => "rural",
            Landscape::Coastal => "coastal",
            Landscape::Mixed => "mixed",
        }
    }

    /// Landscape encoded as the file-name prefix (`coastal_03...`); anything
    /// else counts as mixed.
    pub fn from_name(name: &str) -> Self {
        let prefix = name.split('_').next().unwrap_or_default();
        prefix.parse().unwrap_or(Landscape::Mixed)
    }
}

impl fmt::Display for Landscape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Landscape {
    type Err = DatasetError;
    fn from_str(s: &str) -> Result<Self> {
        Landscape::ALL
            .into_iter()
            .find(|l| l.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| DatasetError::InvalidArgument(format!("unknown landscape {s:?}")))
    }
}

/// Co-registered 10m / 20m tile.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneCrop {
    pub id: String,
    pub landscape: Landscape,
    pub hr10: BandStack,
    pub lr20: BandStack,
}

impl SceneCrop {
    pub fn new(id: String, landscape: Landscape, hr10: BandStack, lr20: BandStack) -> Result<Self> {
        check_pair(&hr10, &lr20)?;
        Ok(Self {
            id,
            landscape,
            hr10,
            lr20,
        })
    }
}

fn check_pair(hr10: &BandStack, lr20: &BandStack) -> Result<()> {
    if hr10.bands() != FINE_BANDS {
        return Err(DatasetError::BadCrop(format!("10m bands are {:?}", hr10.bands())));
    }
    if lr20.bands() != COARSE_BANDS {
        return Err(DatasetError::BadCrop(format!("20m bands are {:?}", lr20.bands())));
    }
    if hr10.height() != 2 * lr20.height() || hr10.width() != 2 * lr20.width() {
        return Err(DatasetError::BadCrop(format!(
            "10m grid {}x{} is not twice the 20m grid {}x{}",
            hr10.height(),
            hr10.width(),
            lr20.height(),
            lr20.width()
        )));
    }
    if hr10.gsd_dm() * 2 != lr20.gsd_dm() {
        return Err(DatasetError::BadCrop(format!(
            "gsd {}dm vs {}dm",
            hr10.gsd_dm(),
            lr20.gsd_dm()
        )));
    }
    Ok(())
}

fn window(stack: &BandStack, y0: usize, x0: usize, size: usize) -> BandStack {
    let (h, w) = (stack.height(), stack.width());
    let mut data = Vec::with_capacity(stack.bands().len() * size * size);
    for b in 0..stack.bands().len() {
        for y in y0..y0 + size {
            let row = b * h * w + y * w;
            data.extend_from_slice(&stack.data()[row + x0..row + x0 + size]);
        }
    }
    BandStack::new(stack.bands().to_vec(), size, size, stack.gsd_dm(), data).expect("window of a valid stack")
}

/// Cuts a scene into non-overlapping `crop_px x crop_px` tiles (on the 10m
/// grid), row-major, with ids `"row_col"`.
pub fn extract_crops(hr10: &BandStack, lr20: &BandStack, crop_px: usize, landscape: Landscape) -> Result<Vec<SceneCrop>> {
    check_pair(hr10, lr20)?;
    if crop_px == 0 || crop_px % 2 != 0 {
        return Err(DatasetError::InvalidArgument(format!("crop size {crop_px} must be even and positive")));
    }
    let (h, w) = (hr10.height(), hr10.width());
    if h % crop_px != 0 || w % crop_px != 0 {
        return Err(DatasetError::NonDivisible {
            height: h,
            width: w,
            crop: crop_px,
        });
    }
    let mut crops = Vec::with_capacity((h / crop_px) * (w / crop_px));
    for r in 0..h / crop_px {
        for c in 0..w / crop_px {
            crops.push(SceneCrop {
                id: format!("{r}_{c}"),
                landscape,
                hr10: window(hr10, r * crop_px, c * crop_px, crop_px),
                lr20: window(lr20, r * crop_px / 2, c * crop_px / 2, crop_px / 2),
            });
        }
    }
    Ok(crops)
}

/// Training unit: degraded 20m bands, degraded 10m bands (the guide source)
/// and the original 20m bands as reference.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTriple {
    pub id: String,
    pub landscape: Landscape,
    pub input_f: BandStack,
    pub guide_src: BandStack,
    pub reference: BandStack,
}

pub fn make_sample(crop: &SceneCrop, sigma: f64) -> Result<SampleTriple> {
    Ok(SampleTriple {
        id: crop.id.clone(),
        landscape: crop.landscape,
        input_f: degrade_wald(&crop.lr20, sigma)?,
        guide_src: degrade_wald(&crop.hr10, sigma)?,
        reference: crop.lr20.clone(),
    })
}

pub const HR10_SUFFIX: &str = ".hr10.s2sr";
pub const LR20_SUFFIX: &str = ".lr20.s2sr";
pub const INPUT40_SUFFIX: &str = ".in40.s2sr";
pub const GUIDE20_SUFFIX: &str = ".guide20.s2sr";

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes the crop as `<dir>/<name>.hr10.s2sr` and `.lr20.s2sr`; returns the stem.
pub fn save_crop(crop: &SceneCrop, dir: &Path, name: &str) -> Result<PathBuf> {
    let stem = dir.join(name);
    for (stack, suffix) in [(&crop.hr10, HR10_SUFFIX), (&crop.lr20, LR20_SUFFIX)] {
        let p = with_suffix(&stem, suffix);
        write_raster(stack, &p).map_err(|source| DatasetError::RasterFile { path: p, source })?;
    }
    Ok(stem)
}

/// Additionally stores the degraded pair so loading skips the filtering.
pub fn materialize_sample(stem: &Path, sample: &SampleTriple) -> Result<()> {
    for (stack, suffix) in [(&sample.input_f, INPUT40_SUFFIX), (&sample.guide_src, GUIDE20_SUFFIX)] {
        let p = with_suffix(stem, suffix);
        write_raster(stack, &p).map_err(|source| DatasetError::RasterFile { path: p, source })?;
    }
    Ok(())
}

pub fn load_crop(stem: &Path, landscape: Landscape) -> Result<SceneCrop> {
    let hr10 = read_at(&with_suffix(stem, HR10_SUFFIX))?;
    let lr20 = read_at(&with_suffix(stem, LR20_SUFFIX))?;
    let id = stem
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    SceneCrop::new(id, landscape, hr10, lr20)
}

/// Loads a crop and turns it into a sample, reusing materialized files when
/// both exist.
pub fn load_sample(stem: &Path, landscape: Landscape, sigma: f64) -> Result<SampleTriple> {
    let crop = load_crop(stem, landscape)?;
    let (inp, gd) = (with_suffix(stem, INPUT40_SUFFIX), with_suffix(stem, GUIDE20_SUFFIX));
    if inp.is_file() && gd.is_file() {
        let input_f = read_at(&inp)?;
        let guide_src = read_at(&gd)?;
        if input_f.height() * 2 != crop.lr20.height() || guide_src.height() != crop.lr20.height() {
            return Err(DatasetError::BadCrop(format!("{}: materialized files do not match", stem.display())));
        }
        return Ok(SampleTriple {
            id: crop.id,
            landscape,
            input_f,
            guide_src,
            reference: crop.lr20,
        });
    }
    make_sample(&crop, sigma)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = DatasetError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(DatasetError::InvalidArgument(format!("unknown split {s:?}"))),
        }
    }
}

/// Crop counts per split, assigned in train, val, test order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSpec {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

impl FromStr for SplitSpec {
    type Err = DatasetError;
    /// `"500,100"` or `"500,100,300"`.
    fn from_str(s: &str) -> Result<Self> {
        let parts = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| DatasetError::InvalidArgument(format!("bad split spec {s:?}")))?;
        match parts[..] {
            [train, val] => Ok(Self { train, val, test: 0 }),
            [train, val, test] => Ok(Self { train, val, test }),
            _ => Err(DatasetError::InvalidArgument(format!("bad split spec {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Crop stem (without the `.hr10.s2sr` suffix).
    pub path: PathBuf,
    pub split: Split,
    pub landscape: Landscape,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

const MANIFEST_VERSION: u32 = 1;

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Pretty JSON with entry paths made relative to `base` where possible.
    pub fn to_json(&self, base: &Path) -> Result<String> {
        let mut m = self.clone();
        for e in &mut m.entries {
            if let Ok(rel) = e.path.strip_prefix(base) {
                e.path = rel.to_path_buf();
            }
        }
        Ok(serde_json::to_string_pretty(&m)? + "\n")
    }

    /// Writes the manifest; crop paths are stored relative to its directory.
    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        fs::write(path, self.to_json(base)?).map_err(io_err(path))
    }

    /// Reads a manifest, resolves crop paths against its directory and checks
    /// that every crop exists and is listed once.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut m: Manifest = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(DatasetError::UnsupportedVersion(m.version));
        }
        let base = path.parent().unwrap_or(Path::new(""));
        for e in &mut m.entries {
            if e.path.is_relative() {
                e.path = base.join(&e.path);
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(&e.path) {
                return Err(DatasetError::DuplicatePath(e.path.clone()));
            }
            if !with_suffix(&e.path, HR10_SUFFIX).is_file() || !with_suffix(&e.path, LR20_SUFFIX).is_file() {
                return Err(DatasetError::MissingCrop(e.path.clone()));
            }
        }
        Ok(())
    }
}

/// Crop stems found in `dir`, sorted.
pub fn list_crops(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(DatasetError::MissingDirectory(dir.to_path_buf()));
    }
    let mut stems = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let p = entry.map_err(io_err(dir))?.path();
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if let Some(stem) = name.strip_suffix(HR10_SUFFIX) {
            stems.push(dir.join(stem));
        }
    }
    stems.sort();
    Ok(stems)
}

/// Lists every crop in `crop_dirs`, shuffles them with `seed` and deals them
/// into train/val/test according to `spec`. Landscapes come from the crop
/// name prefix.
pub fn build_manifest(crop_dirs: &[PathBuf], spec: SplitSpec, seed: u64) -> Result<Manifest> {
    let mut stems = Vec::new();
    for d in crop_dirs {
        stems.extend(list_crops(d)?);
    }
    let mut seen = BTreeSet::new();
    for s in &stems {
        if !seen.insert(s.clone()) {
            return Err(DatasetError::DuplicatePath(s.clone()));
        }
    }
    if spec.total() != stems.len() {
        return Err(DatasetError::SplitMismatch {
            requested: spec.total(),
            available: stems.len(),
        });
    }
    stems.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let splits = std::iter::repeat(Split::Train)
        .take(spec.train)
        .chain(std::iter::repeat(Split::Val).take(spec.val))
        .chain(std::iter::repeat(Split::Test).take(spec.test));
    let entries = stems
        .into_iter()
        .zip(splits)
        .map(|(path, split)| {
            let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            ManifestEntry {
                landscape: Landscape::from_name(&name),
                path,
                split,
            }
        })
        .collect();
    Ok(Manifest {
        version: MANIFEST_VERSION,
        seed,
        entries,
    })
}

/// Loads every sample of one split, in manifest order.
pub fn load_split(manifest: &Manifest, split: Split, sigma: f64) -> Result<Vec<SampleTriple>> {
    manifest
        .split(split)
        .map(|e| load_sample(&e.path, e.landscape, sigma))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::BandId;

    fn stack(bands: &[BandId], h: usize, w: usize, gsd: u32, f: impl Fn(usize, usize, usize) -> f32) -> BandStack {
        let mut data = Vec::new();
        for b in 0..bands.len() {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(b, y, x));
                }
            }
        }
        BandStack::new(bands.to_vec(), h, w, gsd, data).unwrap()
    }

    #[test]
    fn taps_are_normalized_and_symmetric() {
        let k = gaussian_taps(1.0);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..3 {
            assert_eq!(k[i], k[6 - i]);
        }
        assert!((k[3] / k[4] - 0.5f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn constant_survives_and_shape_halves() {
        let s = stack(&COARSE_BANDS, 120, 120, 200, |b, _, _| 0.1 + b as f32 * 0.05);
        let d = degrade_wald(&s, WALD_SIGMA).unwrap();
        assert_eq!((d.height(), d.width(), d.gsd_dm()), (60, 60, 400));
        for (b, &band) in COARSE_BANDS.iter().enumerate() {
            let c = 0.1 + b as f32 * 0.05;
            assert!(d.band(band).unwrap().iter().all(|&v| v == c));
        }
    }

    #[test]
    fn impulse_matches_direct_convolution() {
        let s = stack(&[BandId::B5], 8, 8, 200, |_, y, x| if (y, x) == (4, 4) { 1.0 } else { 0.0 });
        let d = degrade_wald(&s, 1.0).unwrap();
        let k = gaussian_taps(1.0);
        // direct 2-D correlation on the full grid, then decimation
        for oy in 0..4 {
            for ox in 0..4 {
                let (y, x) = (2 * oy as isize, 2 * ox as isize);
                let mut acc = 0.0;
                for a in -3..=3isize {
                    for b in -3..=3isize {
                        let yy = reflect(y + a, 8);
                        let xx = reflect(x + b, 8);
                        if (yy, xx) == (4, 4) {
                            acc += k[(a + 3) as usize] * k[(b + 3) as usize];
                        }
                    }
                }
                assert!((d.data()[oy * 4 + ox] as f64 - acc).abs() < 1e-7);
            }
        }
        // far from the border: output mass is the product of even-offset tap sums
        let even: f64 = [k[1], k[3], k[5]].iter().sum();
        let total: f64 = d.data().iter().map(|&v| v as f64).sum();
        assert!((total - even * even).abs() < 1e-6, "{total} vs {}", even * even);
    }

    #[test]
    fn odd_dimensions_rejected() {
        let s = stack(&[BandId::B5], 7, 8, 200, |_, _, _| 0.0);
        assert!(matches!(degrade_wald(&s, 1.0), Err(DatasetError::OddDimensions { .. })));
    }

    fn scene(h: usize) -> (BandStack, BandStack) {
        let hr = stack(&FINE_BANDS, h, h, 100, |b, y, x| (b * 1000 + y * 7 + x) as f32 * 1e-4);
        let lr = stack(&COARSE_BANDS, h / 2, h / 2, 200, |b, y, x| (b * 1000 + y * 3 + x) as f32 * 1e-4);
        (hr, lr)
    }

    #[test]
    fn crops_tile_the_scene() {
        let (hr, lr) = scene(480);
        let crops = extract_crops(&hr, &lr, 240, Landscape::Urban).unwrap();
        let ids: Vec<_> = crops.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids, ["0_0", "0_1", "1_0", "1_1"]);
        let c = &crops[3];
        assert_eq!((c.hr10.height(), c.lr20.height()), (240, 120));
        assert_eq!(c.hr10.data()[0], hr.data()[240 * 480 + 240]);
        assert_eq!(c.lr20.data()[0], lr.data()[120 * 240 + 120]);
        let (hr, lr) = scene(240);
        let one = extract_crops(&hr, &lr, 240, Landscape::Rural).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].id, "0_0");
        assert_eq!(one[0].hr10, hr);
    }

    #[test]
    fn non_divisible_scene_rejected() {
        let hr = stack(&FINE_BANDS, 250, 240, 100, |_, _, _| 0.0);
        let lr = stack(&COARSE_BANDS, 125, 120, 200, |_, _, _| 0.0);
        assert!(matches!(
            extract_crops(&hr, &lr, 240, Landscape::Mixed),
            Err(DatasetError::NonDivisible { .. })
        ));
    }

    #[test]
    fn sample_keeps_reference_bits() {
        let (hr, lr) = scene(240);
        let crop = SceneCrop::new("0_0".into(), Landscape::Coastal, hr, lr.clone()).unwrap();
        let s = make_sample(&crop, WALD_SIGMA).unwrap();
        assert_eq!(s.reference, lr);
        assert_eq!(crop.lr20, lr);
        assert_eq!((s.input_f.height(), s.guide_src.height()), (60, 120));
    }

    #[test]
    fn split_spec_parsing() {
        assert_eq!("500,100".parse::<SplitSpec>().unwrap().total(), 600);
        assert_eq!("1,2,3".parse::<SplitSpec>().unwrap().test, 3);
        assert!("a,b".parse::<SplitSpec>().is_err());
        assert!("1".parse::<SplitSpec>().is_err());
    }

    #[test]
    fn landscape_from_prefix() {
        assert_eq!(Landscape::from_name("urban_3_0_1"), Landscape::Urban);
        assert_eq!(Landscape::from_name("Coastal_x"), Landscape::Coastal);
        assert_eq!(Landscape::from_name("whatever"), Landscape::Mixed);
    }
}
