mod commands;
mod settings;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use s2fuse_core::ErrorClass;

/// Process-level failure with its exit status.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub const USAGE: u8 = 2;
    pub const DATA: u8 = 3;
    pub const NUMERIC: u8 = 4;

    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: Self::USAGE,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: Self::DATA,
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self {
            code: Self::NUMERIC,
            message: message.into(),
        }
    }
}

impl From<s2fuse_core::Error> for Failure {
    fn from(e: s2fuse_core::Error) -> Self {
        match e.class() {
            ErrorClass::Data => Failure::data(e.to_string()),
            ErrorClass::Numeric => Failure::numeric(e.to_string()),
        }
    }
}

macro_rules! core_failure {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                s2fuse_core::Error::from(e).into()
            }
        }
    )*};
}

core_failure!(
    s2fuse_core::raster::RasterError,
    s2fuse_core::dataset::DatasetError,
    s2fuse_core::network::ModelError,
    s2fuse_core::training::TrainError,
    s2fuse_core::metrics::MetricError
);

#[derive(Parser, Debug)]
#[command(name = "s2fuse", version, about = "Geometry-guided super-resolution of Sentinel-2 20m bands")]
struct Cli {
    /// TOML file of `key = value` settings (flag names without dashes);
    /// command-line flags win over it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Disable data-parallel execution.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write procedural 10m/20m scene pairs for offline experiments.
    Synth(SynthArgs),
    /// Cut scenes into crops and write a split manifest.
    DatasetPrep(PrepArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Score a checkpoint (or bicubic) on one split.
    Eval(EvalArgs),
    /// Super-resolve one image pair with a checkpoint.
    Infer(InferArgs),
    /// Render a band stack as a PNG (composite, index or error map).
    Render(RenderArgs),
    /// Train and score every configuration of an ablation grid.
    Ablate(AblateArgs),
    /// Gradient, adjoint, metric and format self-checks.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of scenes; landscapes cycle urban, rural, coastal, mixed.
    #[arg(long)]
    count: Option<usize>,
    /// Side of each scene on the 10m grid (even).
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct PrepArgs {
    /// Directory of `<name>.hr10.s2sr` / `<name>.lr20.s2sr` scene pairs.
    #[arg(long)]
    scenes: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Crop side on the 10m grid.
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Crop counts per split: `train,val` or `train,val,test`.
    #[arg(long)]
    splits: Option<String>,
    /// Also write the degraded inputs next to each crop.
    #[arg(long)]
    materialize: bool,
    #[arg(long)]
    sigma: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct ModelFlags {
    /// `ginet` (spectral-similarity guide) or `ginet+` (learned cluster guide).
    #[arg(long)]
    mode: Option<Mode>,
    /// Correction network: `mha`, `resnet` or `resnet-sr`.
    #[arg(long)]
    arch: Option<ArchName>,
    #[arg(long)]
    stages: Option<usize>,
    /// Residual trunk width.
    #[arg(long)]
    width: Option<usize>,
    /// Channels after fusing the attention heads.
    #[arg(long)]
    fused: Option<usize>,
    /// Query/key/value channels per head.
    #[arg(long)]
    feat_dim: Option<usize>,
    #[arg(long)]
    resblocks: Option<usize>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    /// Patch sizes of the error, guide and concatenated heads.
    #[arg(long)]
    patch: Option<Patches>,
    /// `l1`, `mse` or `alpha:ORDER:ALPHA`.
    #[arg(long)]
    loss: Option<s2fuse_core::training::LossKind>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Gaussian sigma of the Wald degradation.
    #[arg(long)]
    sigma: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Score plain bicubic upsampling instead of a checkpoint.
    #[arg(long)]
    bicubic: bool,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    /// Write the per-crop CSV report here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// `joint` or `per-band` PSNR.
    #[arg(long)]
    psnr: Option<String>,
    #[arg(long)]
    sigma: Option<f64>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Six 20m-grid bands to upsample (B5, B6, B7, B8a, B11, B12).
    #[arg(long)]
    input: Option<PathBuf>,
    /// The 10m bands B2, B3, B4, B8 on the output grid.
    #[arg(long)]
    hr: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    /// Band stacks to draw bands from; repeat to combine stacks on one grid.
    #[arg(long, required = true)]
    input: Vec<PathBuf>,
    /// `true`, `urban`, `swir`, `ndwi`, `ndmi` or `error`.
    #[arg(long)]
    kind: Option<String>,
    /// Reference stack for `--kind error`.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Absolute error mapped to white in error maps.
    #[arg(long)]
    clip: Option<f32>,
    #[arg(long)]
    low_pct: Option<f64>,
    #[arg(long)]
    high_pct: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Grid overrides such as `stages=3,6,9 patch=3,5 loss=l1,mse`; keys are
    /// groups, stages, patch, window, loss, arch.
    #[arg(long, num_args = 1..)]
    grid: Vec<String>,
    /// Split the trained models are scored on.
    #[arg(long)]
    split: Option<String>,
    /// Also write the rows to this CSV file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    /// Print the check names and exit.
    #[arg(long)]
    list: bool,
    /// Sabotage the named check (exercises the failure path).
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Ginet,
    GinetPlus,
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ginet" => Ok(Mode::Ginet),
            "ginet+" => Ok(Mode::GinetPlus),
            _ => Err(format!("unknown mode {s:?} (ginet, ginet+)")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Ginet => "ginet",
            Mode::GinetPlus => "ginet+",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchName(pub s2fuse_core::network::Arch);

impl FromStr for ArchName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        use s2fuse_core::network::Arch;
        match s {
            "mha" => Ok(ArchName(Arch::Mha)),
            "resnet" => Ok(ArchName(Arch::Resnet)),
            "resnet-sr" => Ok(ArchName(Arch::ResnetSr)),
            _ => Err(format!("unknown architecture {s:?} (mha, resnet, resnet-sr)")),
        }
    }
}

impl fmt::Display for ArchName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use s2fuse_core::network::Arch;
        f.write_str(match self.0 {
            Arch::Mha => "mha",
            Arch::Resnet => "resnet",
            Arch::ResnetSr => "resnet-sr",
        })
    }
}

/// `error,guide,concat` patch sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Patches(pub [usize; 3]);

impl FromStr for Patches {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let v: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse().map_err(|_| format!("bad patch size {p:?}")))
            .collect::<Result<_, _>>()?;
        match v[..] {
            [p] => Ok(Patches([p, p, 1])),
            [a, b, c] => Ok(Patches([a, b, c])),
            _ => Err(format!("expected 3 patch sizes, got {s:?}")),
        }
    }
}

impl fmt::Display for Patches {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c] = self.0;
        write!(f, "{a},{b},{c}")
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if cli.sequential {
        s2fuse_core::autograd::par::set_enabled(false);
    }
    let mut settings = settings::Settings::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => commands::synth(&mut settings, a),
        Command::DatasetPrep(a) => commands::dataset_prep(&mut settings, a),
        Command::Train(a) => commands::train(&mut settings, a),
        Command::Eval(a) => commands::eval(&mut settings, a),
        Command::Infer(a) => commands::infer(&mut settings, a),
        Command::Render(a) => commands::render(&mut settings, a),
        Command::Ablate(a) => commands::ablate(&mut settings, a),
        Command::Selftest(a) => commands::selftest(&mut settings, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { Failure::USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
