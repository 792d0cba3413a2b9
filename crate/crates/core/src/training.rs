//! Losses, the training loop and the `BPCK` checkpoint container.

use std::fmt;
use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use s2fuse_autograd::{par, AdamConfig, AdamState, Graph, GraphError, ParamStore, Real, Tensor, Var};

use crate::dataset::{self, DatasetError, Manifest, SampleTriple, Split, WALD_SIGMA};
use crate::guidance::Routing;
use crate::metrics::{psnr, MetricError};
use crate::network::{ForwardVars, InitScheme, ModelConfig, ModelError, UnfoldedModel};
use crate::raster::{COARSE_BANDS, FINE_BANDS};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("the {0} split is empty")]
    EmptySplit(Split),
    #[error("non-finite value at epoch {epoch}: {detail}")]
    NonFinite { epoch: usize, detail: String },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("checkpoint config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl TrainError {
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::NonFinite { .. } | TrainError::Model(ModelError::Graph(GraphError::NonFinite { .. }))
        )
    }
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Training objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum LossKind {
    L1,
    Mse,
    /// `mean|r - u_K|^order + alpha * sum_k mean(r - u_k)^2` over the
    /// intermediate stages.
    Alpha { order: u8, alpha: f64 },
}

impl LossKind {
    pub fn needs_intermediates(self) -> bool {
        matches!(self, LossKind::Alpha { alpha, .. } if alpha != 0.0)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::L1 => f.write_str("l1"),
            LossKind::Mse => f.write_str("mse"),
            LossKind::Alpha { order, alpha } => write!(f, "alpha:{order}:{alpha}"),
        }
    }
}

impl FromStr for LossKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "l1" => Ok(LossKind::L1),
            "mse" => Ok(LossKind::Mse),
            _ => {
                let bad = || format!("unknown loss {s:?} (expected l1, mse or alpha:I:A)");
                let rest = s.strip_prefix("alpha:").ok_or_else(bad)?;
                let (i, a) = rest.split_once(':').ok_or_else(bad)?;
                let order: u8 = i.parse().map_err(|_| bad())?;
                let alpha: f64 = a.parse().map_err(|_| bad())?;
                if !(order == 1 || order == 2) || !(alpha >= 0.0 && alpha.is_finite()) {
                    return Err(format!("loss {s:?}: order must be 1 or 2 and alpha >= 0"));
                }
                Ok(LossKind::Alpha { order, alpha })
            }
        }
    }
}

impl From<LossKind> for String {
    fn from(l: LossKind) -> String {
        l.to_string()
    }
}

impl TryFrom<String> for LossKind {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

/// Mean absolute difference.
pub fn loss_l1<T: Real>(g: &mut Graph<T>, u: Var, reference: Var) -> Result<Var, GraphError> {
    let d = g.sub(u, reference)?;
    let a = g.abs(d)?;
    g.mean(a)
}

/// Mean squared difference.
pub fn loss_mse<T: Real>(g: &mut Graph<T>, u: Var, reference: Var) -> Result<Var, GraphError> {
    let d = g.sub(u, reference)?;
    let s = g.square(d)?;
    g.mean(s)
}

/// Final-stage L1 or MSE plus `alpha` times the MSE of every intermediate
/// stage. With `alpha = 0` this is exactly the plain final-stage loss.
pub fn loss_alpha<T: Real>(
    g: &mut Graph<T>,
    u_final: Var,
    intermediates: &[Var],
    reference: Var,
    order: u8,
    alpha: f64,
) -> Result<Var, GraphError> {
    let head = match order {
        1 => loss_l1(g, u_final, reference)?,
        2 => loss_mse(g, u_final, reference)?,
        _ => {
            return Err(GraphError::InvalidArgument {
                op: "loss_alpha",
                detail: format!("order {order}"),
            })
        }
    };
    if alpha == 0.0 || intermediates.is_empty() {
        return Ok(head);
    }
    let mut acc: Option<Var> = None;
    for &u in intermediates {
        let m = loss_mse(g, u, reference)?;
        acc = Some(match acc {
            None => m,
            Some(a) => g.add(a, m)?,
        });
    }
    let tail = g.scale(acc.expect("nonempty"), T::of(alpha))?;
    g.add(head, tail)
}

pub fn loss_graph<T: Real>(g: &mut Graph<T>, kind: LossKind, fwd: &ForwardVars, reference: Var) -> Result<Var, GraphError> {
    match kind {
        LossKind::L1 => loss_l1(g, fwd.output, reference),
        LossKind::Mse => loss_mse(g, fwd.output, reference),
        LossKind::Alpha { order, alpha } => loss_alpha(g, fwd.output, &fwd.intermediates, reference, order, alpha),
    }
}

/// Everything that determines a training run (output locations excluded, so
/// the echo stored in checkpoints does not depend on where they are written).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// Gaussian width used when degrading crops into samples.
    pub wald_sigma: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1500,
            lr: 1e-4,
            batch_size: 4,
            seed: 0,
            loss: LossKind::L1,
            wald_sigma: WALD_SIGMA,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be at least 1".into()));
        }
        if let LossKind::Alpha { alpha, .. } = self.loss {
            if alpha < 0.0 {
                return Err(TrainError::Config(format!("alpha {alpha}")));
            }
        }
        self.model.validate()?;
        Ok(())
    }
}

/// Model snapshot plus the run that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ParamStore<f32>,
    pub best_val_psnr: f64,
    pub epoch: u32,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    best_val_psnr: f64,
    epoch: u32,
}

const CKPT_MAGIC: &[u8; 4] = b"BPCK";
const CKPT_VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| TrainError::BadCheckpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn model(&self) -> Result<UnfoldedModel> {
        let mut m = UnfoldedModel::new(self.config.model.clone(), self.config.seed, InitScheme::BackProjection)?;
        m.load_params(&self.params)?;
        Ok(m)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            best_val_psnr: self.best_val_psnr,
            epoch: self.epoch,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.params.count() as usize);
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok() != Some(CKPT_MAGIC.as_slice()) {
            return Err(TrainError::BadCheckpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(TrainError::BadCheckpoint(format!("unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let n = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| TrainError::BadCheckpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data: Vec<f32> = r
                .take(len.checked_mul(4).ok_or_else(|| TrainError::BadCheckpoint("tensor too large".into()))?)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::BadCheckpoint(format!("{name} has non-finite values")));
            }
            if params.find(&name).is_some() {
                return Err(TrainError::BadCheckpoint(format!("{name} appears twice")));
            }
            let t = Tensor::new(&shape, data).map_err(|e| TrainError::BadCheckpoint(e.to_string()))?;
            params.add(name, t);
        }
        if r.pos != bytes.len() {
            return Err(TrainError::BadCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config: header.config,
            params,
            best_val_psnr: header.best_val_psnr,
            epoch: header.epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(io_err(path))?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_psnr: f64,
    pub improved: bool,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_psnr,improved";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9},{:.6},{}",
            self.epoch, self.train_loss, self.val_psnr, self.improved as u8
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation PSNR.
    pub best: Checkpoint,
    pub history: Vec<EpochRecord>,
    /// Parameters after the last epoch.
    pub last: UnfoldedModel,
}

/// Sample tensors in model layout.
struct Prepared {
    f: Tensor<f32>,
    hr4: Tensor<f32>,
    reference: Tensor<f32>,
}

fn prepare(s: &SampleTriple) -> Result<Prepared> {
    let sel = |st: &crate::raster::BandStack, bands: &[crate::raster::BandId]| {
        st.select(bands)
            .map(|x| x.to_tensor())
            .map_err(|e| TrainError::Dataset(DatasetError::Raster(e)))
    };
    Ok(Prepared {
        f: sel(&s.input_f, &COARSE_BANDS)?,
        hr4: sel(&s.guide_src, &FINE_BANDS)?,
        reference: sel(&s.reference, &COARSE_BANDS)?,
    })
}

fn sample_gradient(model: &UnfoldedModel, loss: LossKind, s: &Prepared) -> Result<(f64, Vec<Vec<f32>>), ModelError> {
    let mut g = Graph::new();
    let vars = model.params().bind(&mut g, true);
    let f = g.constant(s.f.clone());
    let hr4 = g.constant(s.hr4.clone());
    let r = g.constant(s.reference.clone());
    let fwd = model.forward_graph(&mut g, &vars, f, hr4, Routing::Gated, loss.needs_intermediates())?;
    let l = loss_graph(&mut g, loss, &fwd, r)?;
    let value = g.value(l).data()[0] as f64;
    g.backward(l)?;
    Ok((value, model.params().grads(&g, &vars)))
}

/// Mean joint PSNR of hard-routed predictions over `samples`.
pub fn mean_psnr(model: &UnfoldedModel, samples: &[SampleTriple]) -> crate::Result<f64> {
    let prepared = samples.iter().map(prepare).collect::<Result<Vec<_>>>()?;
    let vals = par::map_indices(prepared.len(), |i| -> crate::Result<f64> {
        let out = model.infer(&prepared[i].f, &prepared[i].hr4)?;
        Ok(psnr(&out, &prepared[i].reference, 1.0)?)
    });
    let vals = vals.into_iter().collect::<crate::Result<Vec<_>>>()?;
    Ok(vals.iter().sum::<f64>() / vals.len().max(1) as f64)
}

/// Output locations of a run.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    /// Directory for `best.bpck` and `train_log.csv`; nothing is written when unset.
    pub dir: Option<PathBuf>,
}

pub const BEST_CHECKPOINT: &str = "best.bpck";
pub const TRAIN_LOG: &str = "train_log.csv";

/// Runs the training loop. `on_epoch` sees every record as it is produced.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[SampleTriple],
    val_set: &[SampleTriple],
    outputs: &TrainOutputs,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> crate::Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit(Split::Train).into());
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySplit(Split::Val).into());
    }
    let prepared = train_set.iter().map(prepare).collect::<Result<Vec<_>>>()?;
    let mut model = UnfoldedModel::new(cfg.model.clone(), cfg.seed, InitScheme::BackProjection)?;
    let mut adam = AdamState::new(model.params());
    let adam_cfg = AdamConfig::with_lr(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));

    let mut log = match &outputs.dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let p = dir.join(TRAIN_LOG);
            let mut f = File::create(&p).map_err(io_err(&p))?;
            writeln!(f, "{}", EpochRecord::CSV_HEADER).map_err(io_err(&p))?;
            Some((f, p))
        }
        None => None,
    };

    let mut best: Option<Checkpoint> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results = par::map_indices(batch.len(), |i| sample_gradient(&model, cfg.loss, &prepared[batch[i]]));
            let mut total: Option<Vec<Vec<f32>>> = None;
            for r in results {
                let (loss, grads) = r.map_err(|e| match e {
                    ModelError::Graph(GraphError::NonFinite { op }) => TrainError::NonFinite {
                        epoch,
                        detail: format!("{op} produced NaN/Inf"),
                    },
                    other => TrainError::Model(other),
                })?;
                if !loss.is_finite() {
                    return Err(TrainError::NonFinite {
                        epoch,
                        detail: format!("loss {loss}"),
                    }
                    .into());
                }
                loss_sum += loss;
                match &mut total {
                    None => total = Some(grads),
                    Some(t) => {
                        for (a, b) in t.iter_mut().zip(&grads) {
                            a.iter_mut().zip(b).for_each(|(x, y)| *x += *y);
                        }
                    }
                }
            }
            let mut grads = total.expect("nonempty batch");
            let scale = 1.0 / batch.len() as f32;
            grads.iter_mut().flatten().for_each(|x| *x *= scale);
            adam.step(model.params_mut(), &grads, &adam_cfg).map_err(ModelError::from)?;
            if model.params().tensors().iter().any(|t| !t.is_finite()) {
                return Err(TrainError::NonFinite {
                    epoch,
                    detail: "parameters diverged".into(),
                }
                .into());
            }
        }
        let val_psnr = mean_psnr(&model, val_set)?;
        if !val_psnr.is_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                detail: format!("validation PSNR {val_psnr}"),
            }
            .into());
        }
        let improved = best.as_ref().is_none_or(|b| val_psnr > b.best_val_psnr);
        if improved {
            let ck = Checkpoint {
                config: cfg.clone(),
                params: model.params().clone(),
                best_val_psnr: val_psnr,
                epoch: epoch as u32,
            };
            if let Some(dir) = &outputs.dir {
                ck.save(&dir.join(BEST_CHECKPOINT))?;
            }
            best = Some(ck);
        }
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / prepared.len() as f64,
            val_psnr,
            improved,
        };
        if let Some((f, p)) = &mut log {
            writeln!(f, "{}", rec.csv_row()).map_err(io_err(p))?;
        }
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(TrainOutcome {
        best: best.expect("at least one epoch"),
        history,
        last: model,
    })
}

/// [`train`] on the train/val splits of a manifest.
pub fn train_manifest(
    cfg: &TrainConfig,
    manifest: &Manifest,
    outputs: &TrainOutputs,
    on_epoch: impl FnMut(&EpochRecord),
) -> crate::Result<TrainOutcome> {
    let tr = dataset::load_split(manifest, Split::Train, cfg.wald_sigma)?;
    let va = dataset::load_split(manifest, Split::Val, cfg.wald_sigma)?;
    train(cfg, &tr, &va, outputs, on_epoch)
}
