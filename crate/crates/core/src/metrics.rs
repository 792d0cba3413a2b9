//! Full-reference quality metrics and split-level reports.
//!
//! All metrics take `[bands, h, w]` tensors and accumulate in `f64`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use s2fuse_autograd::kernels::bicubic_up2;
use s2fuse_autograd::{par, Tensor};

use crate::dataset::{self, Landscape, Manifest, Split};
use crate::network::UnfoldedModel;
use crate::raster::{COARSE_BANDS, FINE_BANDS};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("image of {0}x{1} pixels is smaller than the 11x11 SSIM window")]
    TooSmall(usize, usize),
    #[error("every reference band has zero mean")]
    ZeroMeanReference,
    #[error("nothing to evaluate in the {0} split")]
    EmptySplit(Split),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

/// Reported when prediction and reference are identical.
pub const PSNR_CAP: f64 = 99.0;

fn dims(pred: &Tensor<f32>, reference: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    if pred.shape() != reference.shape() || pred.rank() != 3 {
        return Err(MetricError::Shape(pred.shape().to_vec(), reference.shape().to_vec()));
    }
    let s = pred.shape();
    Ok((s[0], s[1], s[2]))
}

fn psnr_from_mse(mse: f64, range: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (range * range / mse).log10()).min(PSNR_CAP)
    }
}

fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len().max(1) as f64
}

/// PSNR over all bands jointly, in dB, capped at [`PSNR_CAP`].
pub fn psnr(pred: &Tensor<f32>, reference: &Tensor<f32>, data_range: f64) -> Result<f64> {
    dims(pred, reference)?;
    if data_range <= 0.0 {
        return Err(MetricError::InvalidArgument(format!("data range {data_range}")));
    }
    Ok(psnr_from_mse(mse(pred.data(), reference.data()), data_range))
}

/// Mean of the per-band PSNRs.
pub fn psnr_per_band(pred: &Tensor<f32>, reference: &Tensor<f32>, data_range: f64) -> Result<f64> {
    let (c, _, _) = dims(pred, reference)?;
    if data_range <= 0.0 {
        return Err(MetricError::InvalidArgument(format!("data range {data_range}")));
    }
    Ok((0..c)
        .map(|b| psnr_from_mse(mse(pred.channel(b), reference.channel(b)), data_range))
        .sum::<f64>()
        / c.max(1) as f64)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// Normalized 11-tap Gaussian (sigma 1.5); the 2-D window is its outer product.
pub fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, t) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|t| t / s)
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = (0..n).map(|t| k[t] * x[y * w + ox + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..n).map(|t| k[t] * rows[(oy + t) * ow + ox]).sum();
        }
    }
    out
}

/// Single-scale SSIM averaged over bands; windows are evaluated only where
/// they fit entirely inside the image.
pub fn ssim(pred: &Tensor<f32>, reference: &Tensor<f32>, data_range: f64) -> Result<f64> {
    let (c, h, w) = dims(pred, reference)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricError::TooSmall(h, w));
    }
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let k = ssim_taps();
    let per_band = par::map_indices(c, |b| {
        let x: Vec<f64> = pred.channel(b).iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = reference.channel(b).iter().map(|&v| v as f64).collect();
        let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let sxx = filter_valid(&prod(&x, &x), h, w, &k);
        let syy = filter_valid(&prod(&y, &y), h, w, &k);
        let sxy = filter_valid(&prod(&x, &y), h, w, &k);
        let total: f64 = (0..mx.len())
            .map(|i| {
                let (ux, uy) = (mx[i], my[i]);
                let vx = sxx[i] - ux * ux;
                let vy = syy[i] - uy * uy;
                let cxy = sxy[i] - ux * uy;
                ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
            })
            .sum();
        total / mx.len() as f64
    });
    Ok(per_band.iter().sum::<f64>() / c as f64)
}

/// Mean spectral angle in degrees. Pixels where either spectrum is zero count
/// as 0.
pub fn sam(pred: &Tensor<f32>, reference: &Tensor<f32>) -> Result<f64> {
    let (c, h, w) = dims(pred, reference)?;
    let plane = h * w;
    if plane == 0 {
        return Ok(0.0);
    }
    let (p, r) = (pred.data(), reference.data());
    // 2 atan2(|a - b|, |a + b|) on the unit spectra: exact zero for equal
    // directions and accurate at small angles, unlike acos of the cosine
    let total: f64 = (0..plane)
        .map(|i| {
            let spectrum = |t: &[f32]| (0..c).map(|b| t[b * plane + i] as f64).collect::<Vec<_>>();
            let (a, q) = (spectrum(p), spectrum(r));
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nq = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na == 0.0 || nq == 0.0 {
                return 0.0;
            }
            let (mut diff, mut sum) = (0.0, 0.0);
            for (x, y) in a.iter().zip(&q) {
                let (u, v) = (x / na, y / nq);
                diff += (u - v) * (u - v);
                sum += (u + v) * (u + v);
            }
            (2.0 * diff.sqrt().atan2(sum.sqrt())).to_degrees()
        })
        .sum();
    Ok(total / plane as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ergas {
    pub value: f64,
    /// Bands left out because their reference mean is zero.
    pub excluded: Vec<usize>,
}

/// `100 / ratio * sqrt(mean_c (RMSE_c / mu_c)^2)` with `mu_c` the reference
/// band mean; `ratio` is the resolution ratio (2 for 40m to 20m).
pub fn ergas(pred: &Tensor<f32>, reference: &Tensor<f32>, ratio: f64) -> Result<Ergas> {
    let (c, _, _) = dims(pred, reference)?;
    if ratio <= 0.0 {
        return Err(MetricError::InvalidArgument(format!("ratio {ratio}")));
    }
    let mut acc = 0.0;
    let mut used = 0;
    let mut excluded = Vec::new();
    for b in 0..c {
        let r = reference.channel(b);
        let mu = r.iter().map(|&v| v as f64).sum::<f64>() / r.len().max(1) as f64;
        if mu == 0.0 {
            excluded.push(b);
            continue;
        }
        acc += mse(pred.channel(b), r) / (mu * mu);
        used += 1;
    }
    if used == 0 {
        return Err(MetricError::ZeroMeanReference);
    }
    Ok(Ergas {
        value: 100.0 / ratio * (acc / used as f64).sqrt(),
        excluded,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PsnrMode {
    #[default]
    Joint,
    PerBand,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Scores {
    pub ergas: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub sam: f64,
}

impl Scores {
    fn mean<'a>(items: impl Iterator<Item = &'a Scores>) -> Scores {
        let mut n = 0.0;
        let mut s = Scores::default();
        for x in items {
            s.ergas += x.ergas;
            s.psnr += x.psnr;
            s.ssim += x.ssim;
            s.sam += x.sam;
            n += 1.0;
        }
        if n > 0.0 {
            s.ergas /= n;
            s.psnr /= n;
            s.ssim /= n;
            s.sam /= n;
        }
        s
    }
}

/// All four metrics for one prediction.
pub fn score(pred: &Tensor<f32>, reference: &Tensor<f32>, mode: PsnrMode) -> Result<Scores> {
    Ok(Scores {
        ergas: ergas(pred, reference, 2.0)?.value,
        psnr: match mode {
            PsnrMode::Joint => psnr(pred, reference, 1.0)?,
            PsnrMode::PerBand => psnr_per_band(pred, reference, 1.0)?,
        },
        ssim: ssim(pred, reference, 1.0)?,
        sam: sam(pred, reference)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CropScores {
    pub crop_id: String,
    pub landscape: Landscape,
    pub scores: Scores,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub crops: Vec<CropScores>,
    pub mean: Scores,
    pub by_landscape: BTreeMap<Landscape, Scores>,
}

impl MetricReport {
    pub fn from_crops(crops: Vec<CropScores>) -> Self {
        let mean = Scores::mean(crops.iter().map(|c| &c.scores));
        let mut by_landscape = BTreeMap::new();
        for l in Landscape::ALL {
            if crops.iter().any(|c| c.landscape == l) {
                by_landscape.insert(l, Scores::mean(crops.iter().filter(|c| c.landscape == l).map(|c| &c.scores)));
            }
        }
        Self {
            crops,
            mean,
            by_landscape,
        }
    }

    /// Per-crop rows, a blank line, then the summary block.
    pub fn to_csv(&self) -> String {
        let fields = |x: &Scores| format!("{:.6},{:.6},{:.6},{:.6}", x.ergas, x.psnr, x.ssim, x.sam);
        let mut s = String::from("crop_id,landscape,ergas,psnr,ssim,sam\n");
        for c in &self.crops {
            writeln!(s, "{},{},{}", c.crop_id, c.landscape, fields(&c.scores)).unwrap();
        }
        s.push_str("\n# summary\nscope,count,ergas,psnr,ssim,sam\n");
        for (l, x) in &self.by_landscape {
            let n = self.crops.iter().filter(|c| c.landscape == *l).count();
            writeln!(s, "{l},{n},{}", fields(x)).unwrap();
        }
        writeln!(s, "all,{},{}", self.crops.len(), fields(&self.mean)).unwrap();
        s
    }
}

/// What produces the predictions in [`evaluate_split`].
#[derive(Clone, Copy, Debug)]
pub enum Predictor<'a> {
    Model(&'a UnfoldedModel),
    /// Plain bicubic upsampling of the degraded 20m bands.
    Bicubic,
}

/// Scores every crop of `split` in manifest order.
pub fn evaluate_split(
    predictor: Predictor<'_>,
    manifest: &Manifest,
    split: Split,
    wald_sigma: f64,
    mode: PsnrMode,
) -> crate::Result<MetricReport> {
    let samples = dataset::load_split(manifest, split, wald_sigma)?;
    if samples.is_empty() {
        return Err(MetricError::EmptySplit(split).into());
    }
    let rows = par::map_indices(samples.len(), |i| -> crate::Result<CropScores> {
        let s = &samples[i];
        let f = s.input_f.select(&COARSE_BANDS)?.to_tensor();
        let reference = s.reference.select(&COARSE_BANDS)?.to_tensor();
        let pred = match predictor {
            Predictor::Model(m) => m.infer(&f, &s.guide_src.select(&FINE_BANDS)?.to_tensor())?,
            Predictor::Bicubic => {
                let (c, h, w) = f.dims3()?;
                Tensor::new(&[c, 2 * h, 2 * w], bicubic_up2(f.data(), c, h, w))?
            }
        };
        let name = manifest
            .split(split)
            .nth(i)
            .and_then(|e| e.path.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| s.id.clone());
        Ok(CropScores {
            crop_id: name,
            landscape: s.landscape,
            scores: score(&pred, &reference, mode)?,
        })
    });
    Ok(MetricReport::from_crops(rows.into_iter().collect::<crate::Result<Vec<_>>>()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(c: usize, h: usize, w: usize, f: impl Fn(usize) -> f32) -> Tensor<f32> {
        Tensor::from_fn(&[c, h, w], f)
    }

    #[test]
    fn psnr_closed_forms() {
        let r = t(6, 4, 4, |_| 0.5);
        let p = t(6, 4, 4, |_| 0.51);
        assert!((psnr(&p, &r, 1.0).unwrap() - 40.0).abs() < 1e-4);
        assert_eq!(psnr(&r, &r, 1.0).unwrap(), PSNR_CAP);
        let p2 = t(6, 4, 4, |i| if i % 2 == 0 { 0.5 + 0.01 * 2f32.sqrt() } else { 0.5 - 0.01 * 2f32.sqrt() });
        let drop = psnr(&p, &r, 1.0).unwrap() - psnr(&p2, &r, 1.0).unwrap();
        assert!((drop - 10.0 * 2f64.log10()).abs() < 1e-4);
    }

    #[test]
    fn ergas_single_band() {
        // mean 0.2, RMSE 0.01 via alternating +-0.01 errors
        let r = t(1, 4, 4, |_| 0.2);
        let p = t(1, 4, 4, |i| if i % 2 == 0 { 0.21 } else { 0.19 });
        let e = ergas(&p, &r, 2.0).unwrap();
        assert!((e.value - 2.5).abs() < 1e-5, "{}", e.value);
        assert!(e.excluded.is_empty());
    }

    #[test]
    fn ergas_skips_zero_mean_bands() {
        let r = t(2, 2, 2, |i| if i < 4 { 0.0 } else { 0.2 });
        let e = ergas(&r, &r, 2.0).unwrap();
        assert_eq!((e.value, e.excluded), (0.0, vec![0]));
        let z = t(1, 2, 2, |_| 0.0);
        assert!(matches!(ergas(&z, &z, 2.0), Err(MetricError::ZeroMeanReference)));
    }

    #[test]
    fn sam_special_cases() {
        let r = t(2, 1, 1, |i| [1.0, 0.0][i]);
        let p = t(2, 1, 1, |i| [0.0, 1.0][i]);
        assert!((sam(&p, &r).unwrap() - 90.0).abs() < 1e-9);
        let z = t(2, 1, 1, |_| 0.0);
        assert_eq!(sam(&z, &r).unwrap(), 0.0);
    }

    #[test]
    fn ssim_needs_room_for_the_window() {
        let a = t(1, 10, 12, |_| 0.1);
        assert!(matches!(ssim(&a, &a, 1.0), Err(MetricError::TooSmall(10, 12))));
    }

    #[test]
    fn report_means_and_csv() {
        let mk = |id: &str, l, psnr| CropScores {
            crop_id: id.into(),
            landscape: l,
            scores: Scores {
                ergas: 1.0,
                psnr,
                ssim: 0.9,
                sam: 2.0,
            },
        };
        let r = MetricReport::from_crops(vec![
            mk("a", Landscape::Urban, 30.0),
            mk("b", Landscape::Urban, 40.0),
            mk("c", Landscape::Rural, 20.0),
        ]);
        assert!((r.mean.psnr - 30.0).abs() < 1e-12);
        assert!((r.by_landscape[&Landscape::Urban].psnr - 35.0).abs() < 1e-12);
        let csv = r.to_csv();
        assert!(csv.starts_with("crop_id,landscape,ergas,psnr,ssim,sam\na,urban,1.000000,30.000000"));
        assert!(csv.contains("urban,2,1.000000,35.000000,0.900000,2.000000\n"));
        assert!(csv.trim_end().ends_with("all,3,1.000000,30.000000,0.900000,2.000000"));
    }
}
