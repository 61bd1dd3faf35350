use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{FinetuneConfig, Variant};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub index: usize,
    pub dataset: String,
    pub seed: u64,
    pub accuracy: f64,
    /// Embedding forwards spent on fine-tuning.
    pub finetune_forwards: u64,
    /// All embedding forwards, fine-tuning plus final classification.
    pub forwards: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub episodes: usize,
    pub mean_accuracy: f64,
    /// Half-width of the 95% interval, `1.96·σ/√n`.
    pub ci95: f64,
}

fn summarize(acc: &[f64]) -> DatasetSummary {
    let n = acc.len();
    let mean = acc.iter().sum::<f64>() / n.max(1) as f64;
    let ci95 = if n > 1 {
        let var = acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        1.96 * var.sqrt() / (n as f64).sqrt()
    } else {
        0.0
    };
    DatasetSummary {
        episodes: n,
        mean_accuracy: mean,
        ci95,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub finetune: FinetuneConfig,
    pub episodes: usize,
    pub per_dataset: BTreeMap<String, DatasetSummary>,
    /// Unweighted mean of the per-dataset means.
    pub overall_mean: f64,
    /// Interval over all episodes pooled.
    pub overall_ci95: f64,
    pub forward_passes: u64,
    pub finetune_forward_passes: u64,
    pub episode_results: Vec<EpisodeResult>,
    /// Summed fine-tuning time; kept out of the serialised report so that
    /// identical runs produce identical bytes.
    #[serde(skip)]
    pub finetune_wall_time_s: f64,
}

impl EvalReport {
    /// Aggregates per-episode results, which must be ordered by index.
    pub fn from_episodes(ft: &FinetuneConfig, results: Vec<EpisodeResult>) -> Self {
        let mut by_ds: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in &results {
            by_ds.entry(r.dataset.clone()).or_default().push(r.accuracy);
        }
        let per_dataset: BTreeMap<String, DatasetSummary> =
            by_ds.iter().map(|(d, a)| (d.clone(), summarize(a))).collect();
        let overall_mean = if per_dataset.is_empty() {
            0.0
        } else {
            per_dataset.values().map(|s| s.mean_accuracy).sum::<f64>() / per_dataset.len() as f64
        };
        let all: Vec<f64> = results.iter().map(|r| r.accuracy).collect();
        Self {
            finetune: ft.clone(),
            episodes: results.len(),
            per_dataset,
            overall_mean,
            overall_ci95: summarize(&all).ci95,
            forward_passes: results.iter().map(|r| r.forwards).sum(),
            finetune_forward_passes: results.iter().map(|r| r.finetune_forwards).sum(),
            episode_results: results,
            finetune_wall_time_s: 0.0,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// Aligned plain-text table of a report.
pub fn render_report(r: &EvalReport) -> String {
    let mut out = String::new();
    let ft = &r.finetune;
    let _ = writeln!(
        out,
        "fine-tuning: variant {} | steps {} | lr {:e} | support size {}",
        ft.variant, ft.steps, ft.lr, ft.support_size
    );
    let width = r
        .per_dataset
        .keys()
        .map(String::len)
        .chain(std::iter::once("overall".len()))
        .max()
        .unwrap_or(7);
    let _ = writeln!(out, "{:<width$}  {:>8}  {:>10}  {:>8}", "dataset", "episodes", "accuracy %", "± 95%");
    for (d, s) in &r.per_dataset {
        let _ = writeln!(
            out,
            "{d:<width$}  {:>8}  {:>10.2}  {:>8.2}",
            s.episodes,
            100.0 * s.mean_accuracy,
            100.0 * s.ci95
        );
    }
    let _ = writeln!(
        out,
        "{:<width$}  {:>8}  {:>10.2}  {:>8.2}",
        "overall",
        r.episodes,
        100.0 * r.overall_mean,
        100.0 * r.overall_ci95
    );
    let _ = writeln!(
        out,
        "embedding forwards: {} total, {} fine-tuning; fine-tune time {:.2}s",
        r.forward_passes, r.finetune_forward_passes, r.finetune_wall_time_s
    );
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub variants: Vec<Variant>,
    pub steps: Vec<usize>,
    pub lrs: Vec<f64>,
    pub support_sizes: Vec<usize>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            variants: vec![Variant::A, Variant::B],
            steps: vec![0, 1, 3, 5, 10, 15, 20, 25],
            lrs: vec![1e-3, 1e-4, 1e-5, 1e-6],
            support_sizes: vec![1, 2, 3, 4],
        }
    }
}

impl SweepGrid {
    /// Expands the grid. A zero entry in `steps` yields one shared baseline
    /// cell; support sizes not below `k_shot` are dropped.
    pub fn cells(&self, base: &FinetuneConfig, k_shot: usize) -> Result<Vec<FinetuneConfig>> {
        if self.steps.is_empty() || self.variants.is_empty() {
            return Err(Error::Config("sweep grid needs at least one variant and one step count".into()));
        }
        let mut out = Vec::new();
        if self.steps.contains(&0) {
            out.push(FinetuneConfig {
                variant: Variant::None,
                steps: 0,
                ..base.clone()
            });
        }
        let active: Vec<usize> = self.steps.iter().copied().filter(|&s| s > 0).collect();
        for &variant in &self.variants {
            if variant == Variant::None || active.is_empty() {
                continue;
            }
            if self.lrs.is_empty() {
                return Err(Error::Config("sweep grid has no learning rates".into()));
            }
            let sizes: Vec<usize> = match variant {
                Variant::B => {
                    let s: Vec<usize> = self
                        .support_sizes
                        .iter()
                        .copied()
                        .filter(|&s| s >= 1 && s < k_shot)
                        .collect();
                    if s.is_empty() {
                        return Err(Error::Config(format!(
                            "no support size in {:?} satisfies 1 <= s < k_shot = {k_shot}",
                            self.support_sizes
                        )));
                    }
                    s
                }
                _ => vec![base.support_size],
            };
            for &steps in &active {
                for &lr in &self.lrs {
                    for &support_size in &sizes {
                        out.push(FinetuneConfig {
                            variant,
                            steps,
                            lr,
                            support_size,
                            ..base.clone()
                        });
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub variant: Variant,
    pub steps: usize,
    pub lr: f64,
    pub support_size: usize,
    pub overall_mean: f64,
    pub overall_ci95: f64,
    pub per_dataset: BTreeMap<String, f64>,
    pub finetune_forward_passes: u64,
    pub episode_accuracies: Vec<f64>,
}

impl SweepCell {
    pub fn from_report(ft: &FinetuneConfig, r: &EvalReport) -> Self {
        Self {
            variant: ft.variant,
            steps: ft.steps,
            lr: ft.lr,
            support_size: ft.support_size,
            overall_mean: r.overall_mean,
            overall_ci95: r.overall_ci95,
            per_dataset: r
                .per_dataset
                .iter()
                .map(|(d, s)| (d.clone(), s.mean_accuracy))
                .collect(),
            finetune_forward_passes: r.finetune_forward_passes,
            episode_accuracies: r.episode_results.iter().map(|e| e.accuracy).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
    /// Index of the cell with the highest overall mean (first on ties).
    pub best: Option<usize>,
}

impl SweepReport {
    pub fn new(cells: Vec<SweepCell>) -> Self {
        let mut best: Option<usize> = None;
        for (i, c) in cells.iter().enumerate() {
            if best.is_none_or(|b| c.overall_mean > cells[b].overall_mean) {
                best = Some(i);
            }
        }
        Self { cells, best }
    }

    /// Cells ordered by overall mean, best first; ties keep grid order.
    pub fn ranked(&self) -> Vec<&SweepCell> {
        let mut v: Vec<&SweepCell> = self.cells.iter().collect();
        v.sort_by(|a, b| b.overall_mean.total_cmp(&a.overall_mean));
        v
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sweep serialises")
    }
}

fn cell_value(c: &SweepCell, dataset: Option<&str>) -> Option<f64> {
    match dataset {
        None => Some(c.overall_mean),
        Some(d) => c.per_dataset.get(d).copied(),
    }
}

fn fmt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{:.2}", 100.0 * v))
}

fn dedup_sorted<T: PartialOrd + Copy>(mut v: Vec<T>, desc: bool) -> Vec<T> {
    v.sort_by(|a, b| {
        let o = a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal);
        if desc {
            o.reverse()
        } else {
            o
        }
    });
    v.dedup_by(|a, b| a == b);
    v
}

/// Step-by-learning-rate tables for variant A and step-by-support-size
/// tables (one per learning rate) for variant B, per dataset and overall.
pub fn render_sweep(r: &SweepReport) -> String {
    let mut out = String::new();
    let mut datasets: Vec<Option<String>> = r
        .cells
        .first()
        .map(|c| c.per_dataset.keys().cloned().map(Some).collect())
        .unwrap_or_default();
    datasets.push(None);
    let baseline = r.cells.iter().find(|c| c.steps == 0);
    let steps = dedup_sorted(r.cells.iter().map(|c| c.steps).collect(), false);
    for ds in &datasets {
        let title = ds.as_deref().unwrap_or("overall (mean of datasets)");
        for variant in [Variant::A, Variant::B] {
            let cells: Vec<&SweepCell> = r.cells.iter().filter(|c| c.variant == variant).collect();
            if cells.is_empty() {
                continue;
            }
            let lrs = dedup_sorted(cells.iter().map(|c| c.lr).collect(), true);
            let groups: Vec<(Option<f64>, Vec<String>, Vec<(f64, usize)>)> = match variant {
                Variant::A => vec![(
                    None,
                    lrs.iter().map(|l| format!("lr {l:e}")).collect(),
                    lrs.iter().map(|&l| (l, 0)).collect(),
                )],
                _ => {
                    let sizes = dedup_sorted(cells.iter().map(|c| c.support_size).collect(), false);
                    lrs.iter()
                        .map(|&l| {
                            (
                                Some(l),
                                sizes.iter().map(|s| format!("s={s}")).collect(),
                                sizes.iter().map(|&s| (l, s)).collect(),
                            )
                        })
                        .collect()
                }
            };
            for (lr, headers, keys) in groups {
                let _ = write!(out, "\n[{title}] variant {variant}");
                if let Some(l) = lr {
                    let _ = write!(out, ", lr {l:e}");
                }
                let _ = writeln!(out);
                let _ = write!(out, "{:>6}", "steps");
                for h in &headers {
                    let _ = write!(out, "  {h:>10}");
                }
                let _ = writeln!(out);
                for &st in &steps {
                    let _ = write!(out, "{st:>6}");
                    for &(l, s) in &keys {
                        let v = if st == 0 {
                            baseline.and_then(|b| cell_value(b, ds.as_deref()))
                        } else {
                            cells
                                .iter()
                                .find(|c| {
                                    c.steps == st && c.lr == l && (variant == Variant::A || c.support_size == s)
                                })
                                .and_then(|c| cell_value(c, ds.as_deref()))
                        };
                        let _ = write!(out, "  {:>10}", fmt_pct(v));
                    }
                    let _ = writeln!(out);
                }
            }
        }
    }
    if let Some(b) = r.best.map(|i| &r.cells[i]) {
        let _ = writeln!(
            out,
            "\nbest: variant {} steps {} lr {:e} support size {} -> {:.2}%",
            b.variant,
            b.steps,
            b.lr,
            b.support_size,
            100.0 * b.overall_mean
        );
    }
    out
}
