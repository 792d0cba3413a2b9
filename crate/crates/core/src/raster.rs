//! Band stacks, the `S2SR` raster container, spectral composites and indices,
//! and 8-bit visualisation.
//!
//! Reflectances are stored already divided by 10000, so values live in
//! roughly `[0, 1]`.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use s2fuse_autograd::Tensor;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("not an S2SR raster (bad magic)")]
    BadMagic,
    #[error("unsupported S2SR version {0}")]
    UnsupportedVersion(u32),
    #[error("raster payload truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("raster has {0} unexpected trailing bytes")]
    TrailingData(usize),
    #[error("unknown band code {0}")]
    UnknownBand(u8),
    #[error("raster contains a non-finite value")]
    NonFinite,
    #[error("band {0} is missing")]
    MissingBand(BandId),
    #[error("band {0} is listed twice")]
    DuplicateBand(BandId),
    #[error("bands come from stacks with different ground sample distances")]
    MixedGsd,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty image")]
    EmptyImage,
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = RasterError> = std::result::Result<T, E>;

/// Sentinel-2 bands handled by the fusion pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BandId {
    B2,
    B3,
    B4,
    B5,
    B6,
    B7,
    B8,
    B8a,
    B11,
    B12,
}

/// The four 10m bands, in canonical order.
pub const FINE_BANDS: [BandId; 4] = [BandId::B2, BandId::B3, BandId::B4, BandId::B8];
/// The six 20m bands, in canonical order.
pub const COARSE_BANDS: [BandId; 6] = [
    BandId::B5,
    BandId::B6,
    BandId::B7,
    BandId::B8a,
    BandId::B11,
    BandId::B12,
];

impl BandId {
    pub const ALL: [BandId; 10] = [
        BandId::B2,
        BandId::B3,
        BandId::B4,
        BandId::B5,
        BandId::B6,
        BandId::B7,
        BandId::B8,
        BandId::B8a,
        BandId::B11,
        BandId::B12,
    ];

    /// On-disk code.
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or(RasterError::UnknownBand(code))
    }

    /// Native resolution in meters.
    pub fn native_gsd_m(self) -> u32 {
        if FINE_BANDS.contains(&self) {
            10
        } else {
            20
        }
    }
}

impl fmt::Display for BandId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BandId::B2 => "B2",
            BandId::B3 => "B3",
            BandId::B4 => "B4",
            BandId::B5 => "B5",
            BandId::B6 => "B6",
            BandId::B7 => "B7",
            BandId::B8 => "B8",
            BandId::B8a => "B8a",
            BandId::B11 => "B11",
            BandId::B12 => "B12",
        };
        f.write_str(s)
    }
}

/// Planar multi-band raster sharing one ground sample distance.
#[derive(Clone, Debug, PartialEq)]
pub struct BandStack {
    bands: Vec<BandId>,
    height: usize,
    width: usize,
    gsd_dm: u32,
    data: Vec<f32>,
}

impl BandStack {
    /// `data` is band-major, row-major. `gsd_dm` is in decimeters.
    pub fn new(bands: Vec<BandId>, height: usize, width: usize, gsd_dm: u32, data: Vec<f32>) -> Result<Self> {
        if data.len() != bands.len() * height * width {
            return Err(RasterError::Shape(format!(
                "{} bands of {height}x{width} need {} values, got {}",
                bands.len(),
                bands.len() * height * width,
                data.len()
            )));
        }
        for (i, b) in bands.iter().enumerate() {
            if bands[..i].contains(b) {
                return Err(RasterError::DuplicateBand(*b));
            }
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(RasterError::NonFinite);
        }
        Ok(Self {
            bands,
            height,
            width,
            gsd_dm,
            data,
        })
    }

    pub fn from_tensor(bands: Vec<BandId>, gsd_dm: u32, t: &Tensor<f32>) -> Result<Self> {
        let (c, h, w) = t
            .dims3()
            .map_err(|e| RasterError::Shape(e.to_string()))?;
        if c != bands.len() {
            return Err(RasterError::Shape(format!("{c} channels for {} bands", bands.len())));
        }
        Self::new(bands, h, w, gsd_dm, t.data().to_vec())
    }

    pub fn bands(&self) -> &[BandId] {
        &self.bands
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn gsd_dm(&self) -> u32 {
        self.gsd_dm
    }

    pub fn gsd_m(&self) -> f64 {
        self.gsd_dm as f64 / 10.0
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn band_index(&self, id: BandId) -> Option<usize> {
        self.bands.iter().position(|&b| b == id)
    }

    pub fn band(&self, id: BandId) -> Option<&[f32]> {
        self.band_index(id)
            .map(|i| &self.data[i * self.plane()..(i + 1) * self.plane()])
    }

    /// Copy of the listed bands, in the listed order.
    pub fn select(&self, ids: &[BandId]) -> Result<Self> {
        let mut data = Vec::with_capacity(ids.len() * self.plane());
        for &id in ids {
            data.extend_from_slice(self.band(id).ok_or(RasterError::MissingBand(id))?);
        }
        Self::new(ids.to_vec(), self.height, self.width, self.gsd_dm, data)
    }

    /// `[bands, height, width]` tensor in stack order.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[self.bands.len(), self.height, self.width], self.data.clone())
            .expect("stack invariants guarantee the shape")
    }

    /// Size in bytes of the serialized form.
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.bands.len() + 4 * self.data.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            self.bands.len() as u32,
            self.height as u32,
            self.width as u32,
            self.gsd_dm,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(self.bands.iter().map(|b| b.code()));
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(RasterError::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(RasterError::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != VERSION {
            return Err(RasterError::UnsupportedVersion(version));
        }
        let (count, height, width, gsd_dm) = (word(1) as usize, word(2) as usize, word(3) as usize, word(4));
        let expected = HEADER_LEN + count + 4 * count * height * width;
        if bytes.len() < expected {
            return Err(RasterError::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(RasterError::TrailingData(bytes.len() - expected));
        }
        let bands = bytes[HEADER_LEN..HEADER_LEN + count]
            .iter()
            .map(|&c| BandId::from_code(c))
            .collect::<Result<Vec<_>>>()?;
        let data = bytes[HEADER_LEN + count..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(bands, height, width, gsd_dm, data)
    }
}

const MAGIC: &[u8; 4] = b"S2SR";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

pub fn write_raster(stack: &BandStack, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, stack.to_bytes())?;
    Ok(())
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<BandStack> {
    BandStack::from_bytes(&fs::read(path)?)
}

/// Finds `id` in one of `stacks`; all bands used together must share a gsd.
fn lookup<'a>(stacks: &[&'a BandStack], ids: &[BandId]) -> Result<(Vec<&'a [f32]>, usize, usize)> {
    let mut found = Vec::with_capacity(ids.len());
    let mut grid: Option<(u32, usize, usize)> = None;
    for &id in ids {
        let s = stacks
            .iter()
            .find(|s| s.band_index(id).is_some())
            .ok_or(RasterError::MissingBand(id))?;
        match grid {
            None => grid = Some((s.gsd_dm, s.height, s.width)),
            Some((g, _, _)) if g != s.gsd_dm => return Err(RasterError::MixedGsd),
            Some((_, h, w)) if (h, w) != (s.height, s.width) => {
                return Err(RasterError::Shape(format!(
                    "{}x{} vs {h}x{w}",
                    s.height, s.width
                )))
            }
            _ => {}
        }
        found.push(s.band(id).unwrap());
    }
    let (_, h, w) = grid.ok_or_else(|| RasterError::InvalidArgument("no bands requested".into()))?;
    Ok((found, h, w))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum IndexKind {
    /// Water index from B3 and B8a.
    Ndwi,
    /// Moisture index from B8a and B11.
    Ndmi,
}

impl IndexKind {
    pub fn bands(self) -> [BandId; 2] {
        match self {
            IndexKind::Ndwi => [BandId::B3, BandId::B8a],
            IndexKind::Ndmi => [BandId::B8a, BandId::B11],
        }
    }
}

/// Normalized difference `(a - b) / (a + b)` per pixel, 0 where `a + b = 0`.
pub fn compute_index(stack: &BandStack, kind: IndexKind) -> Result<Vec<f32>> {
    compute_index_multi(&[stack], kind)
}

/// Like [`compute_index`] with bands looked up across several stacks, which
/// must share one gsd.
pub fn compute_index_multi(stacks: &[&BandStack], kind: IndexKind) -> Result<Vec<f32>> {
    let (bands, _, _) = lookup(stacks, &kind.bands())?;
    Ok(bands[0]
        .iter()
        .zip(bands[1])
        .map(|(&a, &b)| {
            let den = a + b;
            if den == 0.0 {
                0.0
            } else {
                (a - b) / den
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CompositeKind {
    TrueColor,
    UrbanFalseColor,
    SwirComposite,
}

impl CompositeKind {
    /// Source bands for the red, green and blue channels.
    pub fn channels(self) -> [BandId; 3] {
        match self {
            CompositeKind::TrueColor => [BandId::B4, BandId::B3, BandId::B2],
            CompositeKind::UrbanFalseColor => [BandId::B12, BandId::B11, BandId::B4],
            CompositeKind::SwirComposite => [BandId::B12, BandId::B8a, BandId::B4],
        }
    }
}

/// Three-channel image, pixel-interleaved (`[h][w][3]`).
#[derive(Clone, Debug, PartialEq)]
pub struct RgbComposite {
    pub kind: CompositeKind,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl RgbComposite {
    pub fn channel(&self, c: usize) -> Vec<f32> {
        self.pixels.iter().skip(c).step_by(3).copied().collect()
    }
}

pub fn compose(stack: &BandStack, kind: CompositeKind) -> Result<RgbComposite> {
    compose_multi(&[stack], kind)
}

pub fn compose_multi(stacks: &[&BandStack], kind: CompositeKind) -> Result<RgbComposite> {
    let (bands, height, width) = lookup(stacks, &kind.channels())?;
    let mut pixels = Vec::with_capacity(height * width * 3);
    for i in 0..height * width {
        pixels.extend(bands.iter().map(|b| b[i]));
    }
    Ok(RgbComposite {
        kind,
        height,
        width,
        pixels,
    })
}

/// 8-bit RGB raster, pixel-interleaved, ready to be written as PNG/PPM.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb8 {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

/// Display parameters for [`render_visual`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VisualParams {
    pub low_pct: f64,
    pub high_pct: f64,
    pub gamma: f64,
}

impl Default for VisualParams {
    fn default() -> Self {
        Self {
            low_pct: 1.0,
            high_pct: 99.0,
            gamma: 2.2,
        }
    }
}

/// Linear-interpolated percentile of an unsorted sample.
pub fn percentile(values: &[f32], pct: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
    v.sort_by(f64::total_cmp);
    let pos = pct / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Maps one value through clip, rescale and gamma to 8 bits.
pub fn tone_map(v: f64, lo: f64, hi: f64, gamma: f64) -> u8 {
    let x = if hi > lo {
        ((v.clamp(lo, hi) - lo) / (hi - lo)).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (x.powf(1.0 / gamma) * 255.0).round() as u8
}

/// Per-channel white balance (percentile clipping) and gamma correction.
pub fn render_visual(rgb: &RgbComposite, p: VisualParams) -> Result<Rgb8> {
    if !(0.0..100.0).contains(&p.low_pct) || p.high_pct > 100.0 || p.low_pct >= p.high_pct {
        return Err(RasterError::InvalidArgument(format!(
            "percentiles {} / {}",
            p.low_pct, p.high_pct
        )));
    }
    if p.gamma <= 0.0 || !p.gamma.is_finite() {
        return Err(RasterError::InvalidArgument(format!("gamma {}", p.gamma)));
    }
    if rgb.pixels.is_empty() {
        return Err(RasterError::EmptyImage);
    }
    let mut data = vec![0u8; rgb.pixels.len()];
    for c in 0..3 {
        let ch = rgb.channel(c);
        let lo = percentile(&ch, p.low_pct);
        let hi = percentile(&ch, p.high_pct);
        for (i, &v) in ch.iter().enumerate() {
            data[i * 3 + c] = tone_map(v as f64, lo, hi, p.gamma);
        }
    }
    Ok(Rgb8 {
        height: rgb.height,
        width: rgb.width,
        data,
    })
}

/// Index map in `[-1, 1]` to a gray image (`-1 -> 0`, `1 -> 255`).
pub fn render_index(values: &[f32], height: usize, width: usize) -> Result<Rgb8> {
    if values.is_empty() {
        return Err(RasterError::EmptyImage);
    }
    if values.len() != height * width {
        return Err(RasterError::Shape("index map size".into()));
    }
    let data = values
        .iter()
        .flat_map(|&v| {
            let g = (((v as f64).clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0).round() as u8;
            [g, g, g]
        })
        .collect();
    Ok(Rgb8 {
        height,
        width,
        data,
    })
}

/// Channel-mean absolute error per pixel, saturated at `clip` and scaled to `[0, 1]`.
pub fn error_map(pred: &BandStack, reference: &BandStack, clip: f32) -> Result<Vec<f32>> {
    if pred.bands != reference.bands || pred.height != reference.height || pred.width != reference.width {
        return Err(RasterError::Shape(format!(
            "{:?} {}x{} vs {:?} {}x{}",
            pred.bands, pred.height, pred.width, reference.bands, reference.height, reference.width
        )));
    }
    if clip <= 0.0 || !clip.is_finite() {
        return Err(RasterError::InvalidArgument(format!("clip {clip}")));
    }
    let plane = pred.plane();
    let nb = pred.bands.len() as f64;
    Ok((0..plane)
        .map(|i| {
            let s: f64 = (0..pred.bands.len())
                .map(|b| (pred.data[b * plane + i] as f64 - reference.data[b * plane + i] as f64).abs())
                .sum();
            ((s / nb).min(clip as f64) / clip as f64) as f32
        })
        .collect())
}

/// Gray image from a `[0, 1]` map (error maps).
pub fn render_unit_map(values: &[f32], height: usize, width: usize) -> Result<Rgb8> {
    render_index(&values.iter().map(|v| 2.0 * v - 1.0).collect::<Vec<_>>(), height, width)
}
