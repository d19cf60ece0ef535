use std::path::Path;

use serde::{Deserialize, Serialize};

use super::loss::{Margin, Reduction};
use crate::partition::StripePool;
use crate::receptive::{ArchKind, ArchSpec, PartitionPlan};
use crate::{Error, Result};

/// Network layout and objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RmglConfig {
    /// `"toy"`, `"resnet50-last-stride1"`, or a path to an `.arch` file.
    pub backbone: String,
    /// Output channels of each conv layer of the backbone, in order.
    pub channels: Vec<usize>,
    /// Map index where the branches leave the shared stem.
    pub branch_split: usize,
    /// Stripe count per branch.
    pub stripes: Vec<usize>,
    /// Map index of the receptive partition per branch; empty means
    /// `branch_split` for every branch.
    pub rp_split: Vec<usize>,
    pub feature_dim: usize,
    pub classes: usize,
    pub original_path: bool,
    pub rp_path: bool,
    /// Balanced stripe boundaries on the original path at inference.
    pub abp_eval: bool,
    pub abp_pool: StripePool,
    /// Pooling for stripe heads elsewhere.
    pub stripe_pool: StripePool,
    pub margin: Margin,
    pub reduction: Reduction,
    pub cls_weight: f64,
    pub triplet_weight: f64,
}

impl Default for RmglConfig {
    fn default() -> Self {
        Self {
            backbone: "toy".into(),
            channels: vec![8, 16, 16, 24, 32, 32],
            branch_split: 3,
            stripes: vec![2, 3],
            rp_split: Vec::new(),
            feature_dim: 32,
            classes: 16,
            original_path: true,
            rp_path: true,
            abp_eval: true,
            abp_pool: StripePool::Avg,
            stripe_pool: StripePool::Max,
            margin: Margin::Hard(0.6),
            reduction: Reduction::Sum,
            cls_weight: 1.0,
            triplet_weight: 1.0,
        }
    }
}

impl RmglConfig {
    pub fn arch(&self) -> Result<ArchSpec> {
        match self.backbone.as_str() {
            "toy" => Ok(ArchSpec::toy_backbone()),
            "resnet50-last-stride1" => Ok(ArchSpec::resnet50_last_stride1()),
            path => ArchSpec::from_file(Path::new(path)),
        }
    }

    pub fn rp_split_of(&self, branch: usize) -> usize {
        self.rp_split.get(branch).copied().unwrap_or(self.branch_split)
    }

    /// Heads per path of one branch: the global head plus one per stripe.
    pub fn heads_per_path(&self, branch: usize) -> usize {
        1 + self.stripes[branch]
    }

    pub fn paths(&self) -> Vec<FeaturePath> {
        let mut p = Vec::new();
        if self.original_path {
            p.push(FeaturePath::Original);
        }
        if self.rp_path {
            p.push(FeaturePath::Rp);
        }
        p
    }

    pub fn head_count(&self) -> usize {
        let paths = self.paths().len();
        (0..self.stripes.len()).map(|b| paths * self.heads_per_path(b)).sum()
    }

    /// Checks every field against `arch`, collecting all problems.
    pub fn validate_with(&self, arch: &ArchSpec) -> Result<Vec<PartitionPlan>> {
        let mut problems = Vec::new();
        let convs = arch.layers().iter().filter(|l| l.kind == ArchKind::Conv).count();
        if self.channels.len() != convs {
            problems.push(format!(
                "channels has {} entries but the backbone has {convs} conv layers",
                self.channels.len()
            ));
        }
        if self.channels.contains(&0) {
            problems.push("channel counts must be >= 1".into());
        }
        if let Some(l) = arch
            .layers()
            .iter()
            .find(|l| matches!(l.kind, ArchKind::BatchNorm | ArchKind::Relu))
        {
            problems.push(format!(
                "layer {}: model backbones list conv and pool layers only; each conv carries its own batchnorm and relu",
                l.name
            ));
        }
        if self.branch_split > arch.depth() {
            problems.push(format!("branch_split {} exceeds depth {}", self.branch_split, arch.depth()));
        }
        if self.stripes.is_empty() {
            problems.push("at least one branch is required".into());
        }
        if self.stripes.contains(&0) {
            problems.push("stripe counts must be >= 1".into());
        }
        if !self.rp_split.is_empty() && self.rp_split.len() != self.stripes.len() {
            problems.push(format!(
                "rp_split has {} entries for {} branches",
                self.rp_split.len(),
                self.stripes.len()
            ));
        }
        if self.feature_dim == 0 {
            problems.push("feature_dim must be >= 1".into());
        }
        if self.classes == 0 {
            problems.push("classes must be >= 1".into());
        }
        if !self.original_path && !self.rp_path {
            problems.push("at least one of original_path and rp_path must be enabled".into());
        }
        if let Margin::Hard(m) = self.margin {
            if !(m >= 0.0 && m.is_finite()) {
                problems.push(format!("margin {m} must be non-negative"));
            }
        }
        for (name, w) in [("cls_weight", self.cls_weight), ("triplet_weight", self.triplet_weight)] {
            if !(w >= 0.0 && w.is_finite()) {
                problems.push(format!("{name} {w} must be non-negative"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }

        let mut plans = Vec::new();
        for (b, &k) in self.stripes.iter().enumerate() {
            let j = self.rp_split_of(b);
            if j < self.branch_split || j > arch.depth() {
                return Err(Error::Config(format!(
                    "branch {b}: rp_split {j} must lie in [{}, {}]",
                    self.branch_split,
                    arch.depth()
                )));
            }
            let plan = arch.restricted_region(j, k)?;
            // Original-path final maps are cut into the same stripes; the
            // merged partition map always divides.
            if self.original_path {
                arch.restricted_region(arch.depth(), k)?;
            }
            if self.rp_path && k > 1 && !plan.effective {
                return Err(Error::IneffectivePartition {
                    layer: j,
                    stripes: k,
                    subsequent_rf: plan.subsequent_rf,
                    stripe_height: plan.stripe_height,
                });
            }
            plans.push(plan);
        }
        Ok(plans)
    }
}

/// The two feature paths of a branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeaturePath {
    Original,
    Rp,
}

impl FeaturePath {
    pub fn as_str(self) -> &'static str {
        match self {
            FeaturePath::Original => "original",
            FeaturePath::Rp => "rp",
        }
    }
}
