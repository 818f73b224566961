//! The `simulate` command.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::Context;

use team_core::sim::{
    run_replications, summarize, LayerSummary, PipelineConfig, RepMetrics, SimSetting,
};

use crate::config::config_error;

#[derive(Clone, Debug)]
pub struct SimulateConfig {
    /// Built-in setting name (S1..S4), ignored when `spec` is set.
    pub setting: Option<String>,
    /// JSON file describing a custom setting.
    pub spec: Option<PathBuf>,
    pub reps: usize,
    pub seed: u64,
    pub pipeline: PipelineConfig,
    pub out: PathBuf,
    /// Write zero timings so reruns are byte-identical.
    pub omit_timing: bool,
}

pub fn load_setting(config: &SimulateConfig) -> anyhow::Result<SimSetting> {
    let setting = match (&config.spec, &config.setting) {
        (Some(path), _) => {
            let text = fs::read_to_string(path)
                .map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str::<SimSetting>(&text)
                .map_err(|e| config_error(format!("bad setting file {}: {e}", path.display())))?
        }
        (None, Some(name)) => SimSetting::by_name(name).map_err(|e| config_error(e.to_string()))?,
        (None, None) => return Err(config_error("name a setting (S1..S4) or pass --spec")),
    };
    setting
        .validate()
        .map_err(|e| config_error(e.to_string()))?;
    Ok(setting)
}

pub fn validate(config: &SimulateConfig) -> anyhow::Result<()> {
    if config.reps == 0 {
        return Err(config_error("reps must be at least 1"));
    }
    let a = config.pipeline.alpha;
    if !(a > 0.0 && a < 1.0) {
        return Err(config_error(format!("alpha must lie in (0, 1), got {a}")));
    }
    if matches!(config.pipeline.bins_per_dim, Some(b) if b < 2) {
        return Err(config_error("bins-per-dim must be at least 2"));
    }
    if config.pipeline.max_layers == Some(0) {
        return Err(config_error("max-layers must be at least 1"));
    }
    Ok(())
}

fn write_reps(path: &Path, reps: &[RepMetrics], omit_timing: bool) -> anyhow::Result<()> {
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record([
        "rep",
        "seed",
        "alternatives",
        "layer",
        "fdp",
        "false_negatives",
        "discoveries",
        "true_positives",
        "wall_ms",
        "analysis_ms",
    ])?;
    for r in reps {
        let (wall, analysis) = if omit_timing {
            (0.0, 0.0)
        } else {
            (r.wall_ms, r.analysis_ms)
        };
        for m in &r.layers {
            w.write_record(&[
                r.rep.to_string(),
                r.seed.to_string(),
                r.alternatives.to_string(),
                m.layer.to_string(),
                m.fdp.to_string(),
                m.false_negatives.to_string(),
                m.discoveries.to_string(),
                m.true_positives.to_string(),
                format!("{wall:.1}"),
                format!("{analysis:.1}"),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_summary(path: &Path, rows: &[LayerSummary]) -> anyhow::Result<()> {
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the replications and writes `<name>.reps.csv` and
/// `<name>.summary.csv`.
pub fn cmd_simulate(config: &SimulateConfig) -> anyhow::Result<Vec<LayerSummary>> {
    validate(config)?;
    let setting = load_setting(config)?;
    let (bins, layers) = config.pipeline.resolve(&setting);
    log::info!(
        "{}: {} reps, {bins} bins per dimension, {layers} layers",
        setting.name,
        config.reps
    );
    let reps = run_replications(&setting, config.reps, &config.pipeline, config.seed)?;
    let summary = summarize(&reps);
    fs::create_dir_all(&config.out)
        .with_context(|| format!("cannot create {}", config.out.display()))?;
    write_reps(
        &config.out.join(format!("{}.reps.csv", setting.name)),
        &reps,
        config.omit_timing,
    )?;
    write_summary(
        &config.out.join(format!("{}.summary.csv", setting.name)),
        &summary,
    )?;
    Ok(summary)
}
