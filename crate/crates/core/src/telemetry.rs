//! Expert-utilization statistics: per-layer assignment counts and the
//! fraction, entropy and concentration summaries derived from them.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::RoutingDecision;
use crate::scalar::Scalar;

/// `-Σ f_i ln f_i` with `0 · ln 0 = 0`.
pub fn entropy(f: &[f64]) -> f64 {
    0.0 - f.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// Entropy divided by `ln N`; 1 is perfectly uniform usage. Defined as 1
/// for a single expert.
pub fn normalized_entropy(f: &[f64], num_experts: usize) -> f64 {
    if num_experts <= 1 {
        return 1.0;
    }
    entropy(f) / (num_experts as f64).ln()
}

pub fn max_expert_fraction(f: &[f64]) -> f64 {
    f.iter().copied().fold(0.0, f64::max)
}

/// Assignment counts for one MoE layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerUsage {
    /// Index of the transformer block holding this layer.
    pub block: usize,
    pub counts: Vec<u64>,
    pub total_assignments: u64,
}

impl LayerUsage {
    pub fn fractions(&self) -> Vec<f64> {
        if self.total_assignments == 0 {
            return vec![0.0; self.counts.len()];
        }
        let t = self.total_assignments as f64;
        self.counts.iter().map(|&c| c as f64 / t).collect()
    }

    pub fn normalized_entropy(&self) -> f64 {
        normalized_entropy(&self.fractions(), self.counts.len())
    }

    pub fn max_fraction(&self) -> f64 {
        max_expert_fraction(&self.fractions())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertUsageStats {
    pub num_experts: usize,
    pub layers: Vec<LayerUsage>,
}

/// One line of the summary export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: String,
    pub normalized_entropy: f64,
    pub max_fraction: f64,
    pub assignments: u64,
}

/// Averaging rule recorded in the aggregate summary line.
pub const LAYER_AVERAGING: &str = "unweighted_layer_mean";

impl ExpertUsageStats {
    /// Empty accumulator for MoE layers living in `blocks`.
    pub fn new(num_experts: usize, blocks: &[usize]) -> Self {
        ExpertUsageStats {
            num_experts,
            layers: blocks
                .iter()
                .map(|&block| LayerUsage {
                    block,
                    counts: vec![0; num_experts],
                    total_assignments: 0,
                })
                .collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(|l| l.total_assignments == 0)
    }

    /// Adds one count per (token, selected expert) pair, layer by layer.
    pub fn accumulate<S: Scalar, D: AsRef<[RoutingDecision<S>]>>(&mut self, per_layer: &[D]) -> Result<()> {
        if per_layer.len() != self.layers.len() {
            return Err(Error::Contract(format!(
                "decisions for {} layers, stats track {}",
                per_layer.len(),
                self.layers.len()
            )));
        }
        for (layer, decisions) in self.layers.iter_mut().zip(per_layer) {
            for d in decisions.as_ref() {
                for &e in &d.selected {
                    let c = layer.counts.get_mut(e).ok_or(Error::Index {
                        op: "accumulate",
                        index: e,
                        bound: self.num_experts,
                    })?;
                    *c += 1;
                    layer.total_assignments += 1;
                }
            }
        }
        Ok(())
    }

    /// Elementwise sum of counts; associative and commutative.
    pub fn merge(&self, other: &ExpertUsageStats) -> Result<ExpertUsageStats> {
        let same_layout = self.num_experts == other.num_experts
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.block == b.block);
        if !same_layout {
            return Err(Error::Contract("merging usage stats with different layouts".into()));
        }
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| LayerUsage {
                block: a.block,
                counts: a.counts.iter().zip(&b.counts).map(|(x, y)| x + y).collect(),
                total_assignments: a.total_assignments + b.total_assignments,
            })
            .collect();
        Ok(ExpertUsageStats {
            num_experts: self.num_experts,
            layers,
        })
    }

    pub fn mean_normalized_entropy(&self) -> f64 {
        mean(self.layers.iter().map(LayerUsage::normalized_entropy))
    }

    pub fn mean_max_fraction(&self) -> f64 {
        mean(self.layers.iter().map(LayerUsage::max_fraction))
    }

    fn check_exportable(&self) -> Result<()> {
        if self.layers.is_empty() || self.layers.iter().any(|l| l.total_assignments == 0) {
            return Err(Error::Data("no routed assignments to export".into()));
        }
        Ok(())
    }

    /// Layer-by-expert fraction table: `layer,expert_0,..,expert_{N-1}`.
    pub fn heatmap_csv(&self) -> Result<String> {
        self.check_exportable()?;
        let mut s = String::from("layer");
        for e in 0..self.num_experts {
            let _ = write!(s, ",expert_{e}");
        }
        s.push('\n');
        for l in &self.layers {
            let _ = write!(s, "{}", l.block);
            for f in l.fractions() {
                let _ = write!(s, ",{f:.6}");
            }
            s.push('\n');
        }
        Ok(s)
    }

    /// Per-layer summaries followed by the unweighted cross-layer mean.
    pub fn summary(&self) -> Result<Vec<LayerSummary>> {
        self.check_exportable()?;
        let mut out: Vec<LayerSummary> = self
            .layers
            .iter()
            .map(|l| LayerSummary {
                layer: l.block.to_string(),
                normalized_entropy: l.normalized_entropy(),
                max_fraction: l.max_fraction(),
                assignments: l.total_assignments,
            })
            .collect();
        out.push(LayerSummary {
            layer: LAYER_AVERAGING.to_string(),
            normalized_entropy: self.mean_normalized_entropy(),
            max_fraction: self.mean_max_fraction(),
            assignments: self.layers.iter().map(|l| l.total_assignments).sum(),
        });
        Ok(out)
    }

    pub fn summary_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for rec in self.summary()? {
            s.push_str(&serde_json::to_string(&rec).expect("summary serializes"));
            s.push('\n');
        }
        Ok(s)
    }

    /// Writes `heatmap.csv` and `summary.jsonl` into `dir`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        let csv = self.heatmap_csv()?;
        let summary = self.summary_jsonl()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let heat = dir.join(HEATMAP_FILE);
        fs::write(&heat, csv).map_err(|e| Error::io(&heat, e))?;
        let sum = dir.join(SUMMARY_FILE);
        fs::write(&sum, summary).map_err(|e| Error::io(&sum, e))?;
        Ok(())
    }
}

pub const HEATMAP_FILE: &str = "heatmap.csv";
pub const SUMMARY_FILE: &str = "summary.jsonl";

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}
