//! Tunables shared by every subcommand. Defaults come from the library; a
//! TOML file may override them and command-line flags override the file.

use std::fmt;
use std::path::Path;

use docspot::eval::{DEFAULT_TOP_N, PS_IOU};
use docspot::features::ExtractorProfile;
use docspot::proposals::{FilterParams, ProposalParams};
use docspot::search::{Mode, PostProcessParams};
use docspot::segmentation::SegmentationParams;
use docspot::synth::SynthSpec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexConfig {
    /// `baseline`, a known external profile name, or `external:<dims>`.
    pub profile: String,
    pub normalize: bool,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self { profile: "baseline".into(), normalize: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub mode: Mode,
    /// Result list length for `query`, and the cut-offs for `eval`.
    pub top_n: Vec<usize>,
    /// Apply the union post-processing before truncating.
    pub pp: bool,
    /// IoU needed for a pattern-spotting hit.
    pub ps_iou: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { mode: Mode::Hamming, top_n: DEFAULT_TOP_N.to_vec(), pp: false, ps_iou: PS_IOU }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub segmentation: SegmentationParams,
    pub filter: FilterParams,
    pub index: IndexConfig,
    pub search: SearchConfig,
    pub postprocess: PostProcessParams,
    pub synth: SynthSpec,
}

/// A rejected setting, named by its dotted key.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid value for `{}`: {}", self.key, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn check(ok: bool, key: &str, message: impl FnOnce() -> String) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError { key: key.into(), message: message() })
    }
}

impl Config {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        Self::from_toml(&text).map_err(|e| anyhow::anyhow!("config {}: {e}", path.display()))
    }

    pub fn proposals(&self) -> ProposalParams {
        ProposalParams { segmentation: self.segmentation, filter: self.filter }
    }

    /// Checks every setting, reporting the first bad one by key.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let s = &self.segmentation;
        check(s.k > 0.0 && s.k.is_finite(), "segmentation.k", || format!("must be > 0, got {}", s.k))?;
        check(s.min_size >= 1, "segmentation.min_size", || "must be >= 1".into())?;
        check(s.sigma >= 0.0 && s.sigma.is_finite(), "segmentation.sigma", || {
            format!("must be >= 0, got {}", s.sigma)
        })?;

        let f = &self.filter;
        check(f.alpha > 0.0 && f.alpha < 1.0, "filter.alpha", || format!("must lie in (0, 1), got {}", f.alpha))?;
        check(f.sector_count == 8, "filter.sector_count", || format!("must be 8, got {}", f.sector_count))?;
        check(f.min_side >= 1, "filter.min_side", || "must be >= 1".into())?;
        check(f.max_side_frac > 0.0 && f.max_side_frac <= 1.0, "filter.max_side_frac", || {
            format!("must lie in (0, 1], got {}", f.max_side_frac)
        })?;
        let e = &f.edges;
        check(e.sigma >= 0.0 && e.sigma.is_finite(), "filter.edges.sigma", || {
            format!("must be >= 0, got {}", e.sigma)
        })?;
        check((0.0..=1.0).contains(&e.low), "filter.edges.low", || format!("must lie in [0, 1], got {}", e.low))?;
        check((0.0..=1.0).contains(&e.high) && e.high >= e.low, "filter.edges.high", || {
            format!("must lie in [low, 1], got {} with low {}", e.high, e.low)
        })?;

        ExtractorProfile::by_name(&self.index.profile)
            .map_err(|e| ConfigError { key: "index.profile".into(), message: e.to_string() })?;

        let q = &self.search;
        check(!q.top_n.is_empty() && !q.top_n.contains(&0), "search.top_n", || {
            "needs at least one cut-off, each >= 1".into()
        })?;
        check((0.0..=1.0).contains(&q.ps_iou), "search.ps_iou", || format!("must lie in [0, 1], got {}", q.ps_iou))?;

        let p = &self.postprocess;
        check(p.union_iou > 0.0 && p.union_iou < 1.0, "postprocess.union_iou", || {
            format!("must lie in (0, 1), got {}", p.union_iou)
        })?;
        let largest = q.top_n.iter().copied().max().unwrap_or(1);
        check(p.pool_size >= largest, "postprocess.pool_size", || {
            format!("must be >= the largest top-n cut-off {largest}, got {}", p.pool_size)
        })?;

        self.synth.validate().map_err(|e| ConfigError { key: "synth".into(), message: e.to_string() })
    }
}
