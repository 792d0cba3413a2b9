//! Ablation grids: stage count, patch/window size, loss family and
//! architecture variants, each trained from the same base configuration and
//! scored on one split.

use std::fmt;

use serde::Serialize;

use crate::dataset::{self, Manifest, Split};
use crate::guidance::GuideMode;
use crate::metrics::{self, PsnrMode, Predictor, Scores};
use crate::network::Arch;
use crate::training::{self, LossKind, TrainConfig, TrainOutputs};

/// Model variant compared in the architecture group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Variant {
    /// Cluster guide with attention.
    GinetPlus,
    /// Similarity guide with attention.
    Ginet,
    /// Cluster guide, residual trunk only.
    Resnet,
    /// No guide, residual trunk only.
    ResnetSr,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::GinetPlus, Variant::Ginet, Variant::Resnet, Variant::ResnetSr];

    pub fn apply(self, cfg: &mut TrainConfig) {
        let (guide, arch) = match self {
            Variant::GinetPlus => (GuideMode::Cluster, Arch::Mha),
            Variant::Ginet => (GuideMode::Similarity, Arch::Mha),
            Variant::Resnet => (GuideMode::Cluster, Arch::Resnet),
            Variant::ResnetSr => (GuideMode::Cluster, Arch::ResnetSr),
        };
        cfg.model.guide = guide;
        cfg.model.arch = arch;
    }

    pub fn of(cfg: &TrainConfig) -> Option<Self> {
        Self::ALL.into_iter().find(|v| {
            let mut c = cfg.clone();
            v.apply(&mut c);
            c.model.arch == cfg.model.arch && (c.model.guide == cfg.model.guide || cfg.model.arch == Arch::ResnetSr)
        })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::GinetPlus => "ginet+",
            Variant::Ginet => "ginet",
            Variant::Resnet => "resnet",
            Variant::ResnetSr => "resnet-sr",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| format!("unknown architecture {s:?} (ginet+, ginet, resnet, resnet-sr)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Stages,
    PatchWindow,
    Loss,
    Arch,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Stages, Group::PatchWindow, Group::Loss, Group::Arch];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Stages => "stages",
            Group::PatchWindow => "patch_window",
            Group::Loss => "loss",
            Group::Arch => "arch",
        }
    }
}

impl std::str::FromStr for Group {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| format!("unknown ablation group {s:?}"))
    }
}

/// Values swept by each group. Groups vary one factor (or the patch x window
/// pair) around the base configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationGrid {
    pub groups: Vec<Group>,
    pub stages: Vec<usize>,
    pub patches: Vec<usize>,
    pub windows: Vec<usize>,
    pub losses: Vec<LossKind>,
    pub variants: Vec<Variant>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            groups: Group::ALL.to_vec(),
            stages: vec![3, 6, 9],
            patches: vec![3, 5, 7],
            windows: vec![3, 5, 7],
            losses: vec![
                LossKind::L1,
                LossKind::Mse,
                LossKind::Alpha { order: 1, alpha: 0.1 },
                LossKind::Alpha { order: 1, alpha: 0.5 },
            ],
            variants: Variant::ALL.to_vec(),
        }
    }
}

fn list<T: std::str::FromStr>(key: &str, values: &str) -> Result<Vec<T>, String> {
    values
        .split(',')
        .map(|v| v.trim().parse::<T>().map_err(|_| format!("{key}: bad value {v:?}")))
        .collect()
}

impl AblationGrid {
    /// Overrides one axis from a `key=v1,v2,...` item.
    pub fn set(&mut self, item: &str) -> Result<(), String> {
        let (key, values) = item
            .split_once('=')
            .ok_or_else(|| format!("grid item {item:?} is not key=values"))?;
        match key {
            "groups" => self.groups = list(key, values)?,
            "stages" => self.stages = list(key, values)?,
            "patch" => self.patches = list(key, values)?,
            "window" => self.windows = list(key, values)?,
            "loss" => self.losses = list(key, values)?,
            "arch" => self.variants = list(key, values)?,
            _ => return Err(format!("unknown grid key {key:?} (groups, stages, patch, window, loss, arch)")),
        }
        Ok(())
    }

    /// Every configuration of the grid, in output order.
    pub fn expand(&self, base: &TrainConfig) -> Vec<AblationRun> {
        let mut runs = Vec::new();
        let mut push = |group, cfg: TrainConfig| runs.push(AblationRun { group, config: cfg });
        for &group in &self.groups {
            match group {
                Group::Stages => {
                    for &s in &self.stages {
                        let mut c = base.clone();
                        c.model.stages = s;
                        push(group, c);
                    }
                }
                Group::PatchWindow => {
                    for &p in &self.patches {
                        for &w in &self.windows {
                            let mut c = base.clone();
                            c.model.attention.patch_error = p;
                            c.model.attention.patch_guide = p;
                            c.model.attention.window = w;
                            push(group, c);
                        }
                    }
                }
                Group::Loss => {
                    for &l in &self.losses {
                        let mut c = base.clone();
                        c.loss = l;
                        push(group, c);
                    }
                }
                Group::Arch => {
                    for &v in &self.variants {
                        let mut c = base.clone();
                        v.apply(&mut c);
                        push(group, c);
                    }
                }
            }
        }
        runs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub group: Group,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub run: AblationRun,
    pub scores: Scores,
}

pub const CSV_HEADER: &str = "group,stages,patch,window,loss,arch,ergas,psnr,ssim,sam";

impl AblationRow {
    pub fn csv_row(&self) -> String {
        let c = &self.run.config;
        let arch = Variant::of(c).map(|v| v.to_string()).unwrap_or_else(|| "custom".into());
        format!(
            "{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            self.run.group.as_str(),
            c.model.stages,
            c.model.attention.patch_error,
            c.model.attention.window,
            c.loss,
            arch,
            self.scores.ergas,
            self.scores.psnr,
            self.scores.ssim,
            self.scores.sam
        )
    }
}

/// Trains every configuration on the manifest's train/val splits and scores
/// it on `eval_split`. Rows are reported as they finish.
pub fn run_ablation(
    grid: &AblationGrid,
    base: &TrainConfig,
    manifest: &Manifest,
    eval_split: Split,
    mut on_row: impl FnMut(&AblationRow),
) -> crate::Result<Vec<AblationRow>> {
    let train_set = dataset::load_split(manifest, Split::Train, base.wald_sigma)?;
    let val_set = dataset::load_split(manifest, Split::Val, base.wald_sigma)?;
    let mut rows = Vec::new();
    for run in grid.expand(base) {
        let outcome = training::train(&run.config, &train_set, &val_set, &TrainOutputs::default(), |_| {})?;
        let model = outcome.best.model()?;
        let report = metrics::evaluate_split(
            Predictor::Model(&model),
            manifest,
            eval_split,
            run.config.wald_sigma,
            PsnrMode::Joint,
        )?;
        let row = AblationRow {
            run,
            scores: report.mean,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_size() {
        let runs = AblationGrid::default().expand(&TrainConfig::default());
        assert_eq!(runs.len(), 3 + 9 + 4 + 4);
        let pw: Vec<_> = runs
            .iter()
            .filter(|r| r.group == Group::PatchWindow)
            .map(|r| (r.config.model.attention.patch_error, r.config.model.attention.window))
            .collect();
        assert_eq!(pw.len(), 9);
        assert!(pw.contains(&(7, 3)) && pw.contains(&(3, 7)));
    }

    #[test]
    fn grid_overrides() {
        let mut g = AblationGrid::default();
        g.set("stages=1,2").unwrap();
        g.set("groups=stages,loss").unwrap();
        g.set("loss=l1,alpha:2:0.1").unwrap();
        assert_eq!(g.expand(&TrainConfig::default()).len(), 4);
        assert!(g.set("depth=3").is_err());
        assert!(g.set("stages=x").is_err());
    }

    #[test]
    fn variants_round_trip() {
        for v in Variant::ALL {
            let mut c = TrainConfig::default();
            v.apply(&mut c);
            assert_eq!(Variant::of(&c), Some(v));
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
    }
}
