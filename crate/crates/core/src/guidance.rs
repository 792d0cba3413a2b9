//! The 6-channel guiding image that carries 10m geometry to the 20m bands.
//!
//! Two strategies:
//! * similarity: each 20m band borrows the spectrally closest 10m band
//!   (B8 for B8a/B11/B12, the mean of B4 and B8 for the red-edge bands);
//! * cluster: a small conv net softly assigns every pixel to one of `L`
//!   clusters and a per-cluster MLP maps its four 10m values to six 20m-like
//!   values. Training mixes the MLP outputs by cluster probability so the
//!   assignment net gets gradients; inference routes each pixel through the
//!   MLP of its argmax cluster only.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use s2fuse_autograd::{Graph, GraphError, ParamId, ParamStore, ParamVars, Real, Tensor, Var};

use crate::layers::{Conv, Fill};
use crate::raster::{BandId, BandStack, COARSE_BANDS, FINE_BANDS};

#[derive(Debug, Error)]
pub enum GuideError {
    #[error("band {0} is missing")]
    MissingBand(BandId),
    #[error("label {label} at pixel {pixel} is outside 0..{clusters}")]
    LabelOutOfRange { label: u8, pixel: usize, clusters: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T, E = GuideError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuideMode {
    Similarity,
    Cluster,
}

/// Guide channels in the 20m band order, on the 10m-band grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GuideImage {
    pub mode: GuideMode,
    pub data: Tensor<f32>,
}

impl GuideImage {
    pub fn channel(&self, band: BandId) -> Option<&[f32]> {
        COARSE_BANDS.iter().position(|&b| b == band).map(|c| self.data.channel(c))
    }

    pub fn to_stack(&self, gsd_dm: u32) -> crate::raster::Result<BandStack> {
        BandStack::from_tensor(COARSE_BANDS.to_vec(), gsd_dm, &self.data)
    }
}

/// Similarity guide from a `[4, h, w]` tensor in `B2, B3, B4, B8` order.
pub fn similarity_guide<T: Real>(hr4: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = hr4.dims3()?;
    if c != 4 {
        return Err(GuideError::Shape(format!("expected 4 fine bands, got {c}")));
    }
    let (b4, b8) = (hr4.channel(2), hr4.channel(3));
    let half = T::of(0.5);
    let mean: Vec<T> = b4.iter().zip(b8).map(|(&a, &b)| (a + b) * half).collect();
    let mut data = Vec::with_capacity(6 * h * w);
    for band in COARSE_BANDS {
        match band {
            BandId::B5 | BandId::B6 | BandId::B7 => data.extend_from_slice(&mean),
            _ => data.extend_from_slice(b8),
        }
    }
    Ok(Tensor::new(&[6, h, w], data)?)
}

pub fn build_guide_similarity(hr4: &BandStack) -> Result<GuideImage> {
    for b in FINE_BANDS {
        hr4.band_index(b).ok_or(GuideError::MissingBand(b))?;
    }
    let ordered = hr4.select(&FINE_BANDS).expect("bands checked above");
    Ok(GuideImage {
        mode: GuideMode::Similarity,
        data: similarity_guide(&ordered.to_tensor())?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    /// Number of clusters `L`.
    pub clusters: usize,
    /// Hidden widths of the 3x3 assignment convolutions.
    pub conv_widths: Vec<usize>,
    pub mlp_hidden: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            clusters: 5,
            conv_widths: vec![48, 48],
            mlp_hidden: 64,
        }
    }
}

/// Where the cluster block's weights live inside a [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct ClusterParams {
    convs: Vec<Conv>,
    mlps: Vec<[Conv; 2]>,
}

/// How pixels reach the per-cluster MLPs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Routing {
    /// Probability-weighted mix of every MLP (differentiable in the assignment).
    Soft,
    /// Each pixel through its argmax cluster only.
    Hard,
    /// Hard routing in value; the assignment convs still get a gradient
    /// through the winning probability `p`, via the term `(p - sg(p)) * out`
    /// which is exactly zero in the forward pass.
    Gated,
}

impl ClusterParams {
    pub(crate) fn new<R: Rng>(store: &mut ParamStore<f32>, prefix: &str, cfg: &ClusterConfig, rng: &mut R) -> Self {
        let mut convs = Vec::new();
        let mut cin = 4;
        for (i, &w) in cfg.conv_widths.iter().chain(std::iter::once(&cfg.clusters)).enumerate() {
            convs.push(Conv::new(store, &format!("{prefix}.conv{i}"), cin, w, 3, true, Fill::FanIn, rng));
            cin = w;
        }
        let mlps = (0..cfg.clusters)
            .map(|l| {
                [
                    Conv::new(store, &format!("{prefix}.mlp{l}.fc0"), 4, cfg.mlp_hidden, 1, true, Fill::FanIn, rng),
                    Conv::new(store, &format!("{prefix}.mlp{l}.fc1"), cfg.mlp_hidden, 6, 1, true, Fill::FanIn, rng),
                ]
            })
            .collect();
        Self { convs, mlps }
    }

    pub fn clusters(&self) -> usize {
        self.mlps.len()
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.convs
            .iter()
            .chain(self.mlps.iter().flatten())
            .flat_map(Conv::ids)
            .collect()
    }

    /// Exact number of weights and biases.
    pub fn param_count<T: Real>(&self, store: &ParamStore<T>) -> u64 {
        self.ids().into_iter().map(|id| store.get(id).len() as u64).sum()
    }

    /// Per-pixel cluster logits `[L, h, w]`.
    pub fn logits<T: Real>(&self, g: &mut Graph<T>, vars: &ParamVars, hr4: Var) -> Result<Var> {
        let mut x = hr4;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.apply(g, vars, x)?;
            if i + 1 < self.convs.len() {
                x = g.relu(x)?;
            }
        }
        Ok(x)
    }

    fn mlp<T: Real>(&self, g: &mut Graph<T>, vars: &ParamVars, l: usize, x: Var) -> Result<Var> {
        let [fc0, fc1] = &self.mlps[l];
        let hdn = fc0.apply(g, vars, x)?;
        let hdn = g.relu(hdn)?;
        Ok(fc1.apply(g, vars, hdn)?)
    }

    /// Guide image `[6, h, w]` on the graph.
    pub fn guide<T: Real>(&self, g: &mut Graph<T>, vars: &ParamVars, hr4: Var, routing: Routing) -> Result<Var> {
        let logits = self.logits(g, vars, hr4)?;
        let probs = g.softmax_channels(logits)?;
        match routing {
            Routing::Soft => {
                let mut acc = None;
                for l in 0..self.clusters() {
                    let out = self.mlp(g, vars, l, hr4)?;
                    let p = g.slice_channels(probs, l, 1)?;
                    let weighted = g.mul_channel(p, out)?;
                    acc = Some(match acc {
                        None => weighted,
                        Some(a) => g.add(a, weighted)?,
                    });
                }
                acc.ok_or_else(|| GuideError::Shape("cluster block without clusters".into()))
            }
            Routing::Hard => {
                let labels = argmax_labels(g.value(probs))?;
                self.dispatch(g, vars, hr4, &labels)
            }
            Routing::Gated => {
                let labels = argmax_labels(g.value(probs))?;
                let hard = self.dispatch(g, vars, hr4, &labels)?;
                let (_, h, w) = g.value(hr4).dims3()?;
                let mut winner = None;
                for l in 0..self.clusters() {
                    let mask = Tensor::new(&[1, h, w], labels.iter().map(|&k| T::of((k as usize == l) as u8 as f64)).collect())?;
                    let mask = g.constant(mask);
                    let p = g.slice_channels(probs, l, 1)?;
                    let picked = g.mul(p, mask)?;
                    winner = Some(match winner {
                        None => picked,
                        Some(a) => g.add(a, picked)?,
                    });
                }
                let winner = winner.ok_or_else(|| GuideError::Shape("cluster block without clusters".into()))?;
                let frozen = g.constant(g.value(winner).clone());
                let zero = g.sub(winner, frozen)?;
                let gate = g.mul_channel(zero, hard)?;
                Ok(g.add(hard, gate)?)
            }
        }
    }

    /// Cluster split, per-cluster MLP, cluster reconstruction.
    fn dispatch<T: Real>(&self, g: &mut Graph<T>, vars: &ParamVars, hr4: Var, labels: &[u8]) -> Result<Var> {
        let (_, h, w) = g.value(hr4).dims3()?;
        if labels.len() != h * w {
            return Err(GuideError::Shape(format!("{} labels for {h}x{w} pixels", labels.len())));
        }
        let mut members = vec![Vec::new(); self.clusters()];
        for (pixel, &label) in labels.iter().enumerate() {
            members
                .get_mut(label as usize)
                .ok_or(GuideError::LabelOutOfRange {
                    label,
                    pixel,
                    clusters: self.clusters(),
                })?
                .push(pixel);
        }
        let mut parts = Vec::new();
        for (l, px) in members.into_iter().enumerate() {
            if px.is_empty() {
                continue;
            }
            let strip = g.gather_pixels(hr4, &px)?;
            parts.push((self.mlp(g, vars, l, strip)?, px));
        }
        Ok(g.scatter_pixels(&parts, h, w)?)
    }
}

/// Argmax over channels of `[L, h, w]`; ties go to the lowest index.
pub fn argmax_labels<T: Real>(probs: &Tensor<T>) -> Result<Vec<u8>> {
    let (l, h, w) = probs.dims3()?;
    if l == 0 || l > u8::MAX as usize + 1 {
        return Err(GuideError::Shape(format!("{l} clusters")));
    }
    let plane = h * w;
    Ok((0..plane)
        .map(|p| {
            let mut best = 0;
            for c in 1..l {
                if probs.data()[c * plane + p] > probs.data()[best * plane + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect())
}

/// Cluster labels and per-pixel probabilities for `hr4[4, h, w]`.
pub fn cluster_assign(hr4: &Tensor<f32>, params: &ClusterParams, store: &ParamStore<f32>) -> Result<(Vec<u8>, Tensor<f32>)> {
    let mut g = Graph::new();
    let vars = store.bind(&mut g, false);
    let x = g.constant(hr4.clone());
    let logits = params.logits(&mut g, &vars, x)?;
    let probs = g.softmax_channels(logits)?;
    let probs = g.value(probs).clone();
    Ok((argmax_labels(&probs)?, probs))
}

/// Routes every pixel of `hr4` through the MLP of its label.
pub fn spec_up(hr4: &Tensor<f32>, labels: &[u8], params: &ClusterParams, store: &ParamStore<f32>) -> Result<GuideImage> {
    let mut g = Graph::new();
    let vars = store.bind(&mut g, false);
    let x = g.constant(hr4.clone());
    let out = params.dispatch(&mut g, &vars, x, labels)?;
    Ok(GuideImage {
        mode: GuideMode::Cluster,
        data: g.value(out).clone(),
    })
}

/// Standalone cluster block with its own parameters.
#[derive(Clone, Debug)]
pub struct ClusterGuide {
    pub layout: ClusterParams,
    pub store: ParamStore<f32>,
}

impl ClusterGuide {
    pub fn new<R: Rng>(cfg: &ClusterConfig, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let layout = ClusterParams::new(&mut store, "guide", cfg, rng);
        Self { layout, store }
    }

    pub fn param_count(&self) -> u64 {
        self.layout.param_count(&self.store)
    }

    pub fn build(&self, hr4: &Tensor<f32>) -> Result<GuideImage> {
        let (labels, _) = cluster_assign(hr4, &self.layout, &self.store)?;
        spec_up(hr4, &labels, &self.layout, &self.store)
    }
}

/// Parameter count of a cluster block stored in `store`.
pub fn guide_param_count(params: &ClusterParams, store: &ParamStore<f32>) -> u64 {
    params.param_count(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn default_guide_budget() {
        let guide = ClusterGuide::new(&ClusterConfig::default(), &mut rng());
        let n = guide.param_count();
        // 4->48->48->5 (3x3) plus five 4->64->6 MLPs
        let convs = (4 * 9 * 48 + 48) + (48 * 9 * 48 + 48) + (48 * 9 * 5 + 5);
        let mlps = 5 * ((4 * 64 + 64) + (64 * 6 + 6));
        assert_eq!(n, (convs + mlps) as u64);
        assert_eq!(n, 28_275);
        assert!((20_000..=40_000).contains(&n));
        assert_eq!(n, guide.store.count());
    }

    #[test]
    fn empty_stub_counts_zero() {
        assert_eq!(guide_param_count(&ClusterParams::default(), &ParamStore::new()), 0);
    }

    #[test]
    fn argmax_ties_go_low() {
        let p = Tensor::new(&[3, 1, 3], vec![0.2, 0.5, 0.3, 0.5, 0.5, 0.3, 0.3, 0.0, 0.4]).unwrap();
        assert_eq!(argmax_labels(&p).unwrap(), vec![1, 0, 2]);
        let flat = Tensor::full(&[5, 2, 2], 0.2f32);
        assert_eq!(argmax_labels(&flat).unwrap(), vec![0; 4]);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let guide = ClusterGuide::new(&ClusterConfig::default(), &mut rng());
        let hr4 = Tensor::full(&[4, 2, 2], 0.1f32);
        let err = spec_up(&hr4, &[0, 1, 5, 0], &guide.layout, &guide.store).unwrap_err();
        assert!(matches!(err, GuideError::LabelOutOfRange { label: 5, pixel: 2, .. }));
    }
}
