//! The `run` command: one TEAM analysis per marker subset.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

use team_core::ingest::{self, MarkerMatrix, Schema};
use team_core::partition::{
    build_partition, default_bins_per_dim, target_leaf_size, LeafBinning, LeafStatus, LeafTable,
    PartitionSpec, Scheme,
};
use team_core::team::{default_max_layers, run_team, StopReason, StopRule, TeamResult};

use crate::config::{config_error, Resolution, RunConfig};

#[derive(Clone, Debug, Serialize)]
pub struct LayerReport {
    pub layer: usize,
    pub nodes: usize,
    pub c_hat: f64,
    pub a_floor: f64,
    pub attained: bool,
    pub rejected_nodes: usize,
    pub rejected_leaves: usize,
    /// Leaves of the unpaired node left out from this layer on.
    pub leftover_leaves: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct SubsetReport {
    pub label: String,
    pub markers: Vec<String>,
    /// Markers in the order the partition split them.
    pub split_order: Vec<String>,
    pub leaf_table: String,
    pub scheme: String,
    /// Bins per dimension (sequential) or split levels (adaptive).
    pub resolution: usize,
    pub m: usize,
    pub n1: u64,
    pub n2: u64,
    pub theta0: f64,
    pub stop_rule: StopRule,
    pub stop_layer: usize,
    pub stop_reason: StopReason,
    pub layers: Vec<LayerReport>,
    pub rejected_leaves: usize,
    pub rejected_events_cohort1: u64,
    pub rejected_events_cohort2: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub input: Vec<PathBuf>,
    pub alpha: f64,
    pub flip_cohorts: bool,
    pub seed: u64,
    pub subsets: Vec<SubsetReport>,
}

/// File-name-safe label: marker names joined by `_`, other characters
/// replaced by `-`.
pub fn subset_label(markers: &[String]) -> String {
    markers
        .iter()
        .map(|m| {
            m.chars()
                .map(|c| {
                    if c.is_ascii_alphanumeric() || c == '.' {
                        c
                    } else {
                        '-'
                    }
                })
                .collect::<String>()
        })
        .collect::<Vec<_>>()
        .join("_")
}

pub fn load_data(config: &RunConfig) -> anyhow::Result<MarkerMatrix<f64>> {
    let d = &config.data;
    let schema = Schema {
        delimiter: d.delimiter,
        cohort_column: Some(d.cohort_column.clone()),
        sample_column: d.sample_column.clone(),
        markers: None,
    };
    let matrix = match &d.input2 {
        Some(second) => ingest::read_matrix_pair(&d.input, second, &schema)?,
        None => ingest::read_matrix(&d.input, &schema)?,
    };
    if !d.quantile_normalize {
        return Ok(matrix);
    }
    // constant (sample, channel) pairs are logged by the normalizer
    Ok(ingest::quantile_normalize(&matrix)?.matrix)
}

fn partition_spec(config: &RunConfig, total: usize, dims: usize) -> PartitionSpec {
    match config.scheme {
        Scheme::Sequential => {
            let bins = match config.resolution {
                Resolution::BinsPerDim(b) => b,
                Resolution::TargetCount(t) => default_bins_per_dim(total, dims, Some(t)),
                Resolution::Auto => default_bins_per_dim(total, dims, None),
            };
            PartitionSpec::sequential(bins)
        }
        Scheme::Adaptive => {
            let leaves = match config.resolution {
                Resolution::BinsPerDim(b) => (b as f64).powi(dims as i32),
                Resolution::TargetCount(t) => total as f64 / t,
                Resolution::Auto => total as f64 / target_leaf_size(total),
            };
            let levels = leaves.log2().round().max(1.0) as usize;
            PartitionSpec::adaptive(levels)
        }
    }
}

fn effective_rule(requested: &StopRule, m: usize) -> StopRule {
    if *requested == StopRule::default() {
        StopRule::layers(default_max_layers(m))
    } else {
        requested.clone()
    }
}

/// Per-leaf status columns for the leaf table.
pub fn leaf_status(result: &TeamResult<f64>) -> Vec<LeafStatus> {
    result
        .leaf_layer
        .iter()
        .zip(&result.leaf_pvalue)
        .map(|(&layer, &p)| LeafStatus {
            p_first_tested: p,
            rejected: layer > 0,
            rejection_layer: (layer > 0).then_some(layer),
        })
        .collect()
}

/// Runs one subset and writes its leaf table into `out`.
pub fn analyse_subset(
    matrix: &MarkerMatrix<f64>,
    markers: &[String],
    config: &RunConfig,
    out: &Path,
) -> anyhow::Result<SubsetReport> {
    let dims = markers
        .iter()
        .map(|name| {
            matrix
                .marker_index(name)
                .ok_or_else(|| anyhow::anyhow!("marker {name:?} is not a column of the input"))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut sub = matrix.select_dims(&dims)?;
    if config.flip_cohorts {
        sub = sub.flip_cohorts();
    }
    let spec = partition_spec(config, sub.rows(), sub.dims());
    let binning: LeafBinning<f64> = build_partition(&sub, &spec)?;
    drop(sub);
    let rule = effective_rule(&config.stop, binning.m());
    let result = run_team(&binning, config.alpha, &rule)?;

    let label = subset_label(markers);
    let table_name = format!("{label}.leaves.csv");
    let table = LeafTable::from_binning(&binning).with_status(leaf_status(&result))?;
    let path = out.join(&table_name);
    let file = File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
    table.write(BufWriter::new(file))?;

    let rejected = result.rejected_leaves();
    let (_, n1, n2) = binning.totals();
    Ok(SubsetReport {
        label,
        markers: markers.to_vec(),
        split_order: binning
            .dim_order()
            .iter()
            .map(|&d| markers[d].clone())
            .collect(),
        leaf_table: table_name,
        scheme: match spec.scheme {
            Scheme::Sequential => "sequential".into(),
            Scheme::Adaptive => "adaptive".into(),
        },
        resolution: spec.resolution,
        m: binning.m(),
        n1,
        n2,
        theta0: result.theta0,
        stop_rule: rule,
        stop_layer: result.stop_layer,
        stop_reason: result.stop_reason,
        layers: result
            .layers
            .iter()
            .map(|l| LayerReport {
                layer: l.layer,
                nodes: l.nodes,
                c_hat: l.c_hat,
                a_floor: l.a_floor,
                attained: l.attained,
                rejected_nodes: l.rejected_nodes.len(),
                rejected_leaves: l.rejected_leaves.len(),
                leftover_leaves: l.leftover.as_ref().map_or(0, Vec::len),
            })
            .collect(),
        rejected_leaves: rejected.len(),
        rejected_events_cohort1: rejected.iter().map(|&i| binning.x_tilde()[i]).sum(),
        rejected_events_cohort2: rejected.iter().map(|&i| binning.x()[i]).sum(),
    })
}

/// Reads the data once, analyses every subset, and writes the leaf tables
/// plus `summary.json` and `summary.txt` into the output directory.
pub fn cmd_run(config: &RunConfig) -> anyhow::Result<RunReport> {
    let matrix = load_data(config)?;
    let subsets = if config.subsets.is_empty() {
        vec![matrix.marker_names().to_vec()]
    } else {
        config.subsets.clone()
    };
    let mut labels: Vec<String> = subsets.iter().map(|s| subset_label(s)).collect();
    labels.sort();
    if labels.windows(2).any(|w| w[0] == w[1]) {
        return Err(config_error("two dimension subsets share an output label"));
    }
    fs::create_dir_all(&config.out)
        .with_context(|| format!("cannot create {}", config.out.display()))?;

    let mut reports = Vec::with_capacity(subsets.len());
    for markers in &subsets {
        log::info!("analysing {}", markers.join(","));
        let report = analyse_subset(&matrix, markers, config, &config.out)
            .with_context(|| format!("subset {}", markers.join(",")))?;
        reports.push(report);
    }
    let report = RunReport {
        input: std::iter::once(config.data.input.clone())
            .chain(config.data.input2.clone())
            .collect(),
        alpha: config.alpha,
        flip_cohorts: config.flip_cohorts,
        seed: config.seed,
        subsets: reports,
    };
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(config.out.join("summary.json"), json + "\n")?;
    fs::write(config.out.join("summary.txt"), render_text(&report))?;
    Ok(report)
}

pub fn render_text(report: &RunReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "alpha {}  flip_cohorts {}",
        report.alpha, report.flip_cohorts
    );
    for sub in &report.subsets {
        let _ = writeln!(s);
        let _ = writeln!(s, "[{}]", sub.markers.join(", "));
        let _ = writeln!(
            s,
            "N1 {}  N2 {}  theta0 {:.6}  m {}  ({} {})",
            sub.n1, sub.n2, sub.theta0, sub.m, sub.scheme, sub.resolution
        );
        let _ = writeln!(
            s,
            "{:>5} {:>8} {:>12} {:>9} {:>9}",
            "layer", "nodes", "c_hat", "rej_nodes", "rej_leaves"
        );
        for l in &sub.layers {
            let _ = writeln!(
                s,
                "{:>5} {:>8} {:>12.4e} {:>9} {:>9}",
                l.layer, l.nodes, l.c_hat, l.rejected_nodes, l.rejected_leaves
            );
        }
        let _ = writeln!(
            s,
            "stopped after layer {} ({:?}); {} leaves rejected holding {} + {} events",
            sub.stop_layer,
            sub.stop_reason,
            sub.rejected_leaves,
            sub.rejected_events_cohort1,
            sub.rejected_events_cohort2
        );
    }
    s
}
