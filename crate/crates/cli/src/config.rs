//! The `plvm train` / `plvm sweep` TOML file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use plvm::recipe::{PretrainConfig, ToyWorldConfig};
use plvm::training::{LossConfig, LrSchedule, OptimizerConfig, SamplerConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    /// `tiny`, or the stem of a backbone archive in `$PLVM_WEIGHTS_DIR`.
    pub name: String,
    /// Explicit backbone archive; relative to the config file.
    #[serde(default)]
    pub weights: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum DataSource {
    /// The built-in procedural identities.
    Toy,
    /// A `plvm synth` manifest.
    Manifest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    pub identities: usize,
    pub per_ref: usize,
    pub heldout_queries: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        let w = ToyWorldConfig::default();
        Self {
            source: DataSource::Toy,
            manifest: None,
            identities: w.identities,
            per_ref: w.per_ref,
            heldout_queries: w.heldout_queries,
            seed: w.seed,
        }
    }
}

impl DataSection {
    pub fn world(&self) -> ToyWorldConfig {
        ToyWorldConfig {
            identities: self.identities,
            per_ref: self.per_ref,
            heldout_queries: self.heldout_queries,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub encoder: String,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub w: f64,
    pub p: f64,
    pub k: usize,
    pub seed: u64,
    /// Linear warmup steps before cosine decay; 0 keeps the rate constant.
    pub warmup: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            encoder: "toy-small".into(),
            steps: 12_000,
            lr: 3e-3,
            batch_size: 4,
            w: 20.0,
            p: 0.6,
            k: 16,
            seed: 11,
            warmup: 600,
            checkpoint_every: 100,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, dump_dir: Option<PathBuf>) -> TrainConfig {
        TrainConfig {
            optimizer: OptimizerConfig {
                lr: self.lr,
                batch_size: self.batch_size,
                weight_decay: 0.0,
                ..Default::default()
            },
            steps: self.steps,
            loss: LossConfig {
                w: self.w,
                ..Default::default()
            },
            sampler: SamplerConfig {
                p: self.p,
                seed: self.seed,
                ..Default::default()
            },
            schedule: if self.warmup == 0 {
                LrSchedule::Constant
            } else {
                LrSchedule::WarmupCosine {
                    warmup: self.warmup,
                    floor: 0.05,
                }
            },
            checkpoint_every: self.checkpoint_every,
            dump_dir,
        }
    }
}

/// Used only when the tiny backbone has no weights yet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let d = PretrainConfig::default();
        Self {
            steps: d.steps,
            lr: d.lr,
            seed: d.seed,
        }
    }
}

impl PretrainSection {
    pub fn config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.steps,
            lr: self.lr,
            seed: self.seed,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub w: Vec<f64>,
    pub k: Vec<usize>,
    pub p: Vec<f64>,
    pub encoders: Vec<String>,
}

impl Default for SweepSection {
    fn default() -> Self {
        let g = plvm::training::sweep::SweepGrid::standard("toy-small");
        Self {
            w: g.w,
            k: g.k,
            p: g.p,
            encoders: g.encoders,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "runs/latest".into() }
    }
}

/// Command-line overrides, applied after the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub w: Option<f64>,
    pub k: Option<usize>,
    pub p: Option<f64>,
    pub encoder: Option<String>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
}

impl RunConfig {
    /// Parses the file; relative paths in it resolve against its directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut c: Self = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = c.backbone.weights.as_mut() {
            rebase(p);
        }
        if let Some(p) = c.data.manifest.as_mut() {
            rebase(p);
        }
        rebase(&mut c.output.dir);
        c.validate()?;
        Ok(c)
    }

    pub fn apply(&mut self, o: &Overrides) -> anyhow::Result<()> {
        let t = &mut self.train;
        if let Some(v) = o.w {
            t.w = v;
        }
        if let Some(v) = o.k {
            t.k = v;
        }
        if let Some(v) = o.p {
            t.p = v;
        }
        if let Some(v) = &o.encoder {
            t.encoder = v.clone();
        }
        if let Some(v) = o.steps {
            t.steps = v;
        }
        if let Some(v) = o.seed {
            t.seed = v;
        }
        self.validate()
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.data.source == DataSource::Manifest && self.data.manifest.is_none() {
            bail!("data.source = \"manifest\" needs data.manifest");
        }
        if self.train.k == 0 || self.train.steps == 0 {
            bail!("train.k and train.steps must be positive");
        }
        self.train.train_config(None).validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_takes_defaults_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[backbone]\nname = \"tiny\"\n[train]\nencoder = \"toy-small\"\nsteps = 10\nlr = 0.001\nbatch_size = 2\nw = 20.0\np = 0.6\nk = 16\nseed = 1\nwarmup = 0\ncheckpoint_every = 5\n").unwrap();
        let mut c = RunConfig::load(&path).unwrap();
        assert_eq!(c.backbone.name, "tiny");
        assert_eq!(c.data.source, DataSource::Toy);
        assert_eq!(c.output.dir, dir.path().join("runs/latest"));
        c.apply(&Overrides {
            w: Some(1.0),
            k: Some(8),
            ..Default::default()
        })
        .unwrap();
        assert_eq!((c.train.w, c.train.k, c.train.steps), (1.0, 8, 10));
        assert!(c
            .apply(&Overrides {
                p: Some(1.5),
                ..Default::default()
            })
            .is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "[backbone]\nname = \"tiny\"\nflavour = \"x\"\n").unwrap();
        assert!(RunConfig::load(&path).is_err());
    }
}
