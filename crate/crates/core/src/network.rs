//! The unfolded back-projection network.
//!
//! Starting from `u0 = bicubic(f)`, every stage computes the low-resolution
//! residual `DB(u) - f`, brings it back to the fine grid with a learned
//! transposed convolution and adds a correction predicted from that error map
//! and the guide image:
//!
//! ```text
//! e_k     = up(DB(u_k) - f)
//! u_{k+1} = u_k + ResNL(e_k, G)
//! ```
//!
//! `DB` is a depthwise 3x3 blur followed by 2x2 average pooling and `up` a
//! depthwise stride-2 transposed 3x3 convolution (54 weights each for six
//! bands). `ResNL` mixes three windowed-attention heads (queries/keys from the
//! error map, the guide and their concatenation; values always from the error
//! map) into a residual conv trunk. Stages never share weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use s2fuse_autograd::kernels::bicubic_up2;
use s2fuse_autograd::{Graph, GraphError, ParamId, ParamStore, ParamVars, Real, Tensor, Var};

use crate::guidance::{similarity_guide, ClusterConfig, ClusterParams, GuideError, GuideMode, Routing};
use crate::layers::{Conv, Fill};
use crate::raster::{BandStack, COARSE_BANDS, FINE_BANDS};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("grid mismatch: {0}")]
    Grid(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("parameter {name}: {detail}")]
    Parameter { name: String, detail: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

impl From<GuideError> for ModelError {
    fn from(e: GuideError) -> Self {
        match e {
            GuideError::Graph(g) => ModelError::Graph(g),
            other => ModelError::Grid(other.to_string()),
        }
    }
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

const BANDS: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Side of the square attention tiles.
    pub window: usize,
    pub patch_error: usize,
    pub patch_guide: usize,
    pub patch_concat: usize,
    /// Channels of the query/key/value projections.
    pub feat_dim: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            window: 5,
            patch_error: 3,
            patch_guide: 3,
            patch_concat: 1,
            feat_dim: 32,
        }
    }
}

/// Correction-network variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    /// Attention heads plus residual trunk.
    Mha,
    /// Residual trunk on the error map and the guide, no attention.
    Resnet,
    /// Residual trunk on the error map only; the 10m bands are ignored.
    ResnetSr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub guide: GuideMode,
    pub arch: Arch,
    pub stages: usize,
    /// Channels of the residual trunk.
    pub width: usize,
    /// Channels produced by fusing the attention heads.
    pub fused: usize,
    pub resblocks: usize,
    pub attention: AttentionConfig,
    pub cluster: ClusterConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            guide: GuideMode::Cluster,
            arch: Arch::Mha,
            stages: 6,
            width: 128,
            fused: 64,
            resblocks: 3,
            attention: AttentionConfig::default(),
            cluster: ClusterConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.attention;
        let bad = |m: String| Err(ModelError::Config(m));
        if self.width == 0 || (self.arch == Arch::Mha && (self.fused == 0 || a.feat_dim == 0)) {
            return bad("widths must be positive".into());
        }
        if a.window == 0 {
            return bad("window must be positive".into());
        }
        for p in [a.patch_error, a.patch_guide, a.patch_concat] {
            if p % 2 == 0 {
                return bad(format!("patch size {p} must be odd"));
            }
        }
        if self.guide == GuideMode::Cluster && self.uses_guide() && self.cluster.clusters == 0 {
            return bad("cluster guide needs at least one cluster".into());
        }
        Ok(())
    }

    pub fn uses_guide(&self) -> bool {
        self.arch != Arch::ResnetSr
    }
}

/// Weight initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    /// `DB` starts as plain average pooling, `up` as bilinear interpolation
    /// and the last conv of every correction as zero, so an untrained model
    /// returns the bicubic upsampling. Everything else is fan-in uniform.
    BackProjection,
    /// Every tensor fan-in uniform; used to exercise all gradient paths.
    FanIn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum HeadRef {
    Error,
    Guide,
    Concat,
}

#[derive(Clone, Debug)]
struct Head {
    reference: HeadRef,
    patch: usize,
    theta: Conv,
    phi: Conv,
    value: Conv,
    out: Conv,
}

/// Parameter layout of one stage.
#[derive(Clone, Debug)]
pub struct StageParams {
    db: ParamId,
    up: ParamId,
    heads: Vec<Head>,
    fuse: Option<Conv>,
    head_in: Conv,
    blocks: Vec<[Conv; 2]>,
    tail: Conv,
}

impl StageParams {
    pub fn db(&self) -> ParamId {
        self.db
    }

    pub fn up(&self) -> ParamId {
        self.up
    }

    /// Every tensor of the correction network (everything but `DB` and `up`).
    pub fn correction_ids(&self) -> Vec<ParamId> {
        self.heads
            .iter()
            .flat_map(|h| [&h.theta, &h.phi, &h.value, &h.out])
            .chain(self.fuse.iter())
            .chain(std::iter::once(&self.head_in))
            .chain(self.blocks.iter().flatten())
            .chain(std::iter::once(&self.tail))
            .flat_map(Conv::ids)
            .collect()
    }

    /// Output projection of attention head `i`.
    pub fn head_output(&self, i: usize) -> Option<(ParamId, Option<ParamId>)> {
        self.heads.get(i).map(|h| (h.out.w, h.out.b))
    }
}

/// Exact parameter counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub guide: u64,
    pub stages: Vec<StageCounts>,
    pub total: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct StageCounts {
    pub db: u64,
    pub up: u64,
    pub resnl: u64,
}

/// Graph handles produced by [`UnfoldedModel::forward_graph`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub output: Var,
    /// `u_1 .. u_{K-1}` when requested.
    pub intermediates: Vec<Var>,
    pub guide: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct UnfoldedModel {
    config: ModelConfig,
    params: ParamStore<f32>,
    guide: Option<ClusterParams>,
    stages: Vec<StageParams>,
}

fn bilinear_kernel() -> [f32; 9] {
    let t = [0.5, 1.0, 0.5];
    std::array::from_fn(|i| t[i / 3] * t[i % 3])
}

fn identity_kernel() -> [f32; 9] {
    std::array::from_fn(|i| if i == 4 { 1.0 } else { 0.0 })
}

impl UnfoldedModel {
    pub fn new(config: ModelConfig, seed: u64, init: InitScheme) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let guide = (config.guide == GuideMode::Cluster && config.uses_guide())
            .then(|| ClusterParams::new(&mut store, "guide", &config.cluster, &mut rng));
        let a = &config.attention;
        let d = a.feat_dim;
        let random = init == InitScheme::FanIn;
        let mut stages = Vec::with_capacity(config.stages);
        for k in 0..config.stages {
            let p = format!("stage{k}");
            let depthwise = |kernel: [f32; 9], rng: &mut ChaCha8Rng| {
                if random {
                    Tensor::uniform(&[BANDS, 3, 3], 1.0 / 3.0, rng)
                } else {
                    Tensor::from_fn(&[BANDS, 3, 3], |i| kernel[i % 9])
                }
            };
            let db = store.add(format!("{p}.db"), depthwise(identity_kernel(), &mut rng));
            let up = store.add(format!("{p}.up"), depthwise(bilinear_kernel(), &mut rng));
            let mut heads = Vec::new();
            let mut fuse = None;
            if config.arch == Arch::Mha {
                for (i, (reference, patch, cin)) in [
                    (HeadRef::Error, a.patch_error, BANDS),
                    (HeadRef::Guide, a.patch_guide, BANDS),
                    (HeadRef::Concat, a.patch_concat, 2 * BANDS),
                ]
                .into_iter()
                .enumerate()
                {
                    let h = format!("{p}.head{i}");
                    let mut conv = |name: &str, cin, cout| {
                        Conv::new(&mut store, &format!("{h}.{name}"), cin, cout, 1, true, Fill::FanIn, &mut rng)
                    };
                    heads.push(Head {
                        reference,
                        patch,
                        theta: conv("theta", cin, d),
                        phi: conv("phi", cin, d),
                        value: conv("value", BANDS, d),
                        out: conv("out", d, d),
                    });
                }
                fuse = Some(Conv::new(&mut store, &format!("{p}.fuse"), 3 * d, config.fused, 1, true, Fill::FanIn, &mut rng));
            }
            let trunk_in = BANDS
                + match config.arch {
                    Arch::Mha => config.fused,
                    Arch::Resnet => BANDS,
                    Arch::ResnetSr => 0,
                };
            let wd = config.width;
            let head_in = Conv::new(&mut store, &format!("{p}.head_in"), trunk_in, wd, 3, true, Fill::FanIn, &mut rng);
            let blocks = (0..config.resblocks)
                .map(|b| {
                    [0, 1].map(|c| Conv::new(&mut store, &format!("{p}.res{b}.conv{c}"), wd, wd, 3, true, Fill::FanIn, &mut rng))
                })
                .collect();
            let tail_fill = if random { Fill::FanIn } else { Fill::Zero };
            let tail = Conv::new(&mut store, &format!("{p}.tail"), wd, BANDS, 3, true, tail_fill, &mut rng);
            stages.push(StageParams {
                db,
                up,
                heads,
                fuse,
                head_in,
                blocks,
                tail,
            });
        }
        Ok(Self {
            config,
            params: store,
            guide,
            stages,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    pub fn stages(&self) -> &[StageParams] {
        &self.stages
    }

    pub fn cluster_params(&self) -> Option<&ClusterParams> {
        self.guide.as_ref()
    }

    /// Replaces every tensor with the same-named tensor from `other`; shapes
    /// and names must match exactly.
    pub fn load_params(&mut self, other: &ParamStore<f32>) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(ModelError::Parameter {
                name: "*".into(),
                detail: format!("{} tensors, expected {}", other.len(), self.params.len()),
            });
        }
        for id in self.params.ids().collect::<Vec<_>>() {
            let name = self.params.name(id).to_string();
            let src = other.find(&name).map(|i| other.get(i)).ok_or_else(|| ModelError::Parameter {
                name: name.clone(),
                detail: "missing".into(),
            })?;
            if src.shape() != self.params.get(id).shape() {
                return Err(ModelError::Parameter {
                    name,
                    detail: format!("shape {:?}, expected {:?}", src.shape(), self.params.get(id).shape()),
                });
            }
            *self.params.get_mut(id) = src.clone();
        }
        Ok(())
    }

    /// Zeroes every correction network, leaving `DB`, `up` and the guide.
    pub fn zero_correction(&mut self) {
        for s in &self.stages {
            for id in s.correction_ids() {
                self.params.get_mut(id).data_mut().fill(0.0);
            }
        }
    }

    pub fn count_params(&self) -> ParamCounts {
        let len = |id: ParamId| self.params.get(id).len() as u64;
        let guide = self.guide.as_ref().map_or(0, |g| g.param_count(&self.params));
        let stages: Vec<StageCounts> = self
            .stages
            .iter()
            .map(|s| StageCounts {
                db: len(s.db),
                up: len(s.up),
                resnl: s.correction_ids().into_iter().map(len).sum(),
            })
            .collect();
        let total = guide + stages.iter().map(|s| s.db + s.up + s.resnl).sum::<u64>();
        debug_assert_eq!(total, self.params.count());
        ParamCounts { guide, stages, total }
    }

    /// Builds the guide image on the graph (`None` for the guide-free variant).
    pub fn guide_graph<T: Real>(&self, g: &mut Graph<T>, vars: &ParamVars, hr4: Var, routing: Routing) -> Result<Option<Var>> {
        if !self.config.uses_guide() {
            return Ok(None);
        }
        Ok(Some(match (&self.guide, self.config.guide) {
            (Some(c), GuideMode::Cluster) => c.guide(g, vars, hr4, routing)?,
            _ => {
                let t = similarity_guide(g.value(hr4))?;
                g.constant(t)
            }
        }))
    }

    /// Records the full forward pass. `vars` must come from binding a cast of
    /// [`UnfoldedModel::params`] to the same graph.
    pub fn forward_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        vars: &ParamVars,
        f: Var,
        hr4: Var,
        routing: Routing,
        keep_intermediates: bool,
    ) -> Result<ForwardVars> {
        let (c, h, w) = g.value(f).dims3()?;
        let (hc, hh, hw) = g.value(hr4).dims3()?;
        if c != BANDS || hc != 4 {
            return Err(ModelError::Grid(format!("{c} coarse and {hc} fine channels, expected 6 and 4")));
        }
        if (hh, hw) != (2 * h, 2 * w) {
            return Err(ModelError::Grid(format!("fine grid {hh}x{hw} is not twice {h}x{w}")));
        }
        if h < 2 || w < 2 {
            return Err(ModelError::Grid(format!("input {h}x{w} is too small")));
        }
        let guide = self.guide_graph(g, vars, hr4, routing)?;
        let u0 = Tensor::new(&[c, 2 * h, 2 * w], bicubic_up2(g.value(f).data(), c, h, w))?;
        let mut u = g.constant(u0);
        let mut intermediates = Vec::new();
        for (k, s) in self.stages.iter().enumerate() {
            let corr = self.stage_correction(g, vars, s, u, f, guide)?;
            u = g.add(u, corr)?;
            if keep_intermediates && k + 1 < self.stages.len() {
                intermediates.push(u);
            }
        }
        Ok(ForwardVars {
            output: u,
            intermediates,
            guide,
        })
    }

    /// `ResNL(up(DB(u) - f), G)` for one stage.
    pub fn stage_correction<T: Real>(
        &self,
        g: &mut Graph<T>,
        vars: &ParamVars,
        s: &StageParams,
        u: Var,
        f: Var,
        guide: Option<Var>,
    ) -> Result<Var> {
        let blurred = db_operator(g, vars, s, u)?;
        let e_lr = g.sub(blurred, f)?;
        let e = upsample_error(g, vars, s, e_lr)?;
        res_nl(g, vars, s, &self.config, e, guide)
    }

    /// Hard-routed inference in `f32` without gradient bookkeeping.
    pub fn infer(&self, f: &Tensor<f32>, hr4: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let fv = g.constant(f.clone());
        let hv = g.constant(hr4.clone());
        let out = self.forward_graph(&mut g, &vars, fv, hv, Routing::Hard, false)?;
        Ok(g.value(out.output).clone())
    }

    /// [`UnfoldedModel::infer`] on band stacks; returns the six bands on the
    /// fine grid.
    pub fn infer_stack(&self, f: &BandStack, hr: &BandStack) -> crate::Result<BandStack> {
        let f6 = f.select(&COARSE_BANDS)?;
        let h4 = hr.select(&FINE_BANDS)?;
        if h4.gsd_dm() * 2 != f6.gsd_dm() {
            return Err(ModelError::Grid(format!("gsd {}dm vs {}dm", h4.gsd_dm(), f6.gsd_dm())).into());
        }
        let out = self.infer(&f6.to_tensor(), &h4.to_tensor())?;
        Ok(BandStack::from_tensor(COARSE_BANDS.to_vec(), h4.gsd_dm(), &out)?)
    }
}

/// Depthwise 3x3 blur then 2x2 average pooling.
pub fn db_operator<T: Real>(g: &mut Graph<T>, vars: &ParamVars, s: &StageParams, u: Var) -> Result<Var> {
    let blurred = g.depthwise_conv2d(u, vars[s.db], 1)?;
    Ok(g.avg_pool2(blurred)?)
}

/// Depthwise stride-2 transposed convolution to the fine grid.
pub fn upsample_error<T: Real>(g: &mut Graph<T>, vars: &ParamVars, s: &StageParams, e_lr: Var) -> Result<Var> {
    Ok(g.transposed_conv2d_s2(e_lr, vars[s.up])?)
}

fn head_forward<T: Real>(g: &mut Graph<T>, vars: &ParamVars, head: &Head, e: Var, reference: Var, window: usize) -> Result<Var> {
    let (_, eh, ew) = g.value(e).dims3()?;
    let (_, rh, rw) = g.value(reference).dims3()?;
    if (eh, ew) != (rh, rw) {
        return Err(ModelError::Grid(format!("error map {eh}x{ew} vs reference {rh}x{rw}")));
    }
    let q = head.theta.apply(g, vars, reference)?;
    let q = g.unfold(q, head.patch)?;
    let k = head.phi.apply(g, vars, reference)?;
    let k = g.unfold(k, head.patch)?;
    let v = head.value.apply(g, vars, e)?;
    let filtered = g.window_attention(q, k, v, window)?;
    Ok(head.out.apply(g, vars, filtered)?)
}

/// One attention head of stage `s`: `i = 0` attends with the error map,
/// `1` with the guide, `2` with both.
pub fn attention_head<T: Real>(
    g: &mut Graph<T>,
    vars: &ParamVars,
    s: &StageParams,
    i: usize,
    e: Var,
    guide: Var,
    window: usize,
) -> Result<Var> {
    let head = s
        .heads
        .get(i)
        .ok_or_else(|| ModelError::Config(format!("stage has no attention head {i}")))?;
    let reference = match head.reference {
        HeadRef::Error => e,
        HeadRef::Guide => guide,
        HeadRef::Concat => g.concat(&[e, guide])?,
    };
    head_forward(g, vars, head, e, reference, window)
}

/// All heads, concatenated and fused by a 1x1 conv.
pub fn mha<T: Real>(g: &mut Graph<T>, vars: &ParamVars, s: &StageParams, cfg: &ModelConfig, e: Var, guide: Var) -> Result<Var> {
    let fuse = s
        .fuse
        .as_ref()
        .ok_or_else(|| ModelError::Config("stage has no attention block".into()))?;
    let outs = (0..s.heads.len())
        .map(|i| attention_head(g, vars, s, i, e, guide, cfg.attention.window))
        .collect::<Result<Vec<_>>>()?;
    let cat = g.concat(&outs)?;
    Ok(fuse.apply(g, vars, cat)?)
}

/// Residual correction network.
pub fn res_nl<T: Real>(
    g: &mut Graph<T>,
    vars: &ParamVars,
    s: &StageParams,
    cfg: &ModelConfig,
    e: Var,
    guide: Option<Var>,
) -> Result<Var> {
    let need_guide = || guide.ok_or_else(|| ModelError::Config("this architecture needs a guide image".into()));
    let trunk_in = match cfg.arch {
        Arch::Mha => {
            let m = mha(g, vars, s, cfg, e, need_guide()?)?;
            g.concat(&[e, m])?
        }
        Arch::Resnet => g.concat(&[e, need_guide()?])?,
        Arch::ResnetSr => e,
    };
    let mut x = s.head_in.apply(g, vars, trunk_in)?;
    for [c0, c1] in &s.blocks {
        let y = c0.apply(g, vars, x)?;
        let y = g.relu(y)?;
        let y = c1.apply(g, vars, y)?;
        x = g.add(x, y)?;
    }
    Ok(s.tail.apply(g, vars, x)?)
}
