//! Run configuration: one TOML file describes a whole experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::data::{Dataset, SyntheticConfig};
use crate::model::{RmglConfig, TrainSchedule};
use crate::{Error, Result};

/// Component switches of the ablation table rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Original path, uniform stripes, no shifting augmentation.
    Baseline,
    /// Adds the receptive-partition path.
    #[serde(rename = "+rp")]
    Rp,
    /// Receptive-partition path alone.
    OnlyRp,
    #[serde(rename = "+rsa")]
    Rsa,
    #[serde(rename = "+abp")]
    Abp,
    /// Both paths, shifting augmentation and balanced pooling.
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Baseline,
        Ablation::Rp,
        Ablation::OnlyRp,
        Ablation::Rsa,
        Ablation::Abp,
        Ablation::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::Rp => "+rp",
            Ablation::OnlyRp => "only-rp",
            Ablation::Rsa => "+rsa",
            Ablation::Abp => "+abp",
            Ablation::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    /// `(original_path, rp_path, rsa, abp_eval)`.
    pub fn toggles(self) -> (bool, bool, bool, bool) {
        match self {
            Ablation::Baseline => (true, false, false, false),
            Ablation::Rp => (true, true, false, false),
            Ablation::OnlyRp => (false, true, false, false),
            Ablation::Rsa => (true, false, true, false),
            Ablation::Abp => (true, false, false, true),
            Ablation::Full => (true, true, true, true),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Output directory for checkpoints, logs and reports.
    pub out: PathBuf,
    /// Dataset manifest; the synthetic generator is used when absent.
    pub manifest: Option<PathBuf>,
    /// Overrides the component switches below when set.
    pub ablation: Option<Ablation>,
    pub model: RmglConfig,
    pub schedule: TrainSchedule,
    pub augment: AugmentConfig,
    pub synthetic: SyntheticConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            manifest: None,
            ablation: None,
            model: RmglConfig::default(),
            schedule: TrainSchedule::default(),
            augment: AugmentConfig::default(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

/// Settings tuned for the bundled toy backbone and the synthetic dataset.
pub const TOY_CONFIG: &str = include_str!("../configs/toy.toml");

impl ExperimentConfig {
    pub fn toy() -> Self {
        Self::parse(TOY_CONFIG, "toy.toml").expect("bundled toy config parses")
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("{source}: {e}")))?;
        cfg.apply_ablation();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// The effective configuration with every default spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = Some(ablation);
        self.apply_ablation();
        self
    }

    fn apply_ablation(&mut self) {
        if let Some(a) = self.ablation {
            let (orig, rp, rsa, abp) = a.toggles();
            self.model.original_path = orig;
            self.model.rp_path = rp;
            self.augment.rsa = rsa;
            self.model.abp_eval = abp;
        }
    }

    /// Reports every problem found before any compute starts.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let arch = self.model.arch();
        match &arch {
            Ok(arch) => {
                if let Err(e) = self.model.validate_with(arch) {
                    problems.push(format!("model: {e}"));
                }
            }
            Err(e) => problems.push(format!("model.backbone: {e}")),
        }
        for (section, r) in [
            ("schedule", self.schedule.validate()),
            ("augment", self.augment.rsa_params.validate()),
        ] {
            if let Err(e) = r {
                problems.push(format!("{section}: {e}"));
            }
        }
        if !(0.0..=1.0).contains(&self.augment.flip_p) {
            problems.push(format!("augment: flip_p {} is not a probability", self.augment.flip_p));
        }
        if self.manifest.is_none() {
            if let Err(e) = self.synthetic.validate() {
                problems.push(format!("synthetic: {e}"));
            }
            if let Ok(arch) = &arch {
                let want = arch.input();
                if (self.synthetic.height, self.synthetic.width) != (want.h, want.w) {
                    problems.push(format!(
                        "synthetic: images are {}x{} but the backbone expects {}x{}",
                        self.synthetic.height, self.synthetic.width, want.h, want.w
                    ));
                }
            }
            if self.synthetic.identities > self.model.classes {
                problems.push(format!(
                    "model: {} classes cannot cover {} synthetic identities",
                    self.model.classes, self.synthetic.identities
                ));
            }
        } else if let Some(m) = &self.manifest {
            if !m.is_file() {
                problems.push(format!("manifest {} does not exist", m.display()));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn dataset(&self) -> Result<Dataset> {
        match &self.manifest {
            Some(m) => Dataset::load(m),
            None => crate::data::synthetic(&self.synthetic, self.seed),
        }
    }
}
