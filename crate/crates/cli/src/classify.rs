//! The `classify` command: how many sub-analyses flag each event.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Serialize;

use team_core::ingest::{self, Cohort, MarkerMatrix, Schema};
use team_core::partition::{Geometry, LeafTable};

use crate::config::config_error;

/// Number of pairwise analyses the functional bands are defined for.
pub const BANDED_ANALYSES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FunctionalClass {
    Nonfunctional,
    Monofunctional,
    Bifunctional,
    Polyfunctional,
    Unclassified,
}

impl FunctionalClass {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Nonfunctional => "nonfunctional",
            Self::Monofunctional => "monofunctional",
            Self::Bifunctional => "bifunctional",
            Self::Polyfunctional => "polyfunctional",
            Self::Unclassified => "unclassified",
        }
    }
}

/// Class for an event found in `count` of `analyses` rejected regions, and
/// whether the assignment is a conservative fill-in (count 2 has no band of
/// its own and is reported as nonfunctional).
pub fn classify_count(count: usize, analyses: usize) -> (FunctionalClass, bool) {
    if analyses != BANDED_ANALYSES {
        return (FunctionalClass::Unclassified, false);
    }
    match count {
        0 | 1 => (FunctionalClass::Nonfunctional, false),
        2 => (FunctionalClass::Nonfunctional, true),
        3 | 4 => (FunctionalClass::Monofunctional, false),
        5 => (FunctionalClass::Bifunctional, false),
        _ => (FunctionalClass::Polyfunctional, false),
    }
}

/// A leaf table prepared for lookups.
pub struct RejectedRegion {
    pub name: String,
    pub markers: Vec<String>,
    geometry: Geometry<f64>,
    rejected: Vec<bool>,
}

impl RejectedRegion {
    pub fn from_table(name: String, table: &LeafTable<f64>) -> anyhow::Result<Self> {
        let status = table
            .status
            .as_ref()
            .ok_or_else(|| anyhow::anyhow!("leaf table {name} has no rejection columns"))?;
        Ok(Self {
            geometry: table.geometry()?,
            rejected: status.iter().map(|s| s.rejected).collect(),
            markers: table.marker_names.clone(),
            name,
        })
    }

    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
        let table =
            LeafTable::<f64>::read(file).with_context(|| format!("reading {}", path.display()))?;
        Self::from_table(path.display().to_string(), &table)
    }

    /// Whether `point` (in this table's marker order) lies in a rejected leaf.
    /// Points outside the table's bounding box are not.
    pub fn contains(&self, point: &[f64]) -> bool {
        self.geometry
            .locate(point)
            .is_some_and(|leaf| self.rejected[leaf])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EventClass {
    pub count: usize,
    pub class: FunctionalClass,
    pub flagged: bool,
}

/// Counts, per event, the regions containing it.
pub fn classify_events(
    events: &MarkerMatrix<f64>,
    regions: &[RejectedRegion],
) -> anyhow::Result<Vec<EventClass>> {
    let columns = regions
        .iter()
        .map(|r| {
            r.markers
                .iter()
                .map(|m| {
                    events.marker_index(m).ok_or_else(|| {
                        anyhow::anyhow!("events lack marker {m:?} used by {}", r.name)
                    })
                })
                .collect::<anyhow::Result<Vec<_>>>()
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut point = Vec::new();
    Ok((0..events.rows())
        .map(|row| {
            let values = events.row(row);
            let count = regions
                .iter()
                .zip(&columns)
                .filter(|(region, cols)| {
                    point.clear();
                    point.extend(cols.iter().map(|&c| values[c]));
                    region.contains(&point)
                })
                .count();
            let (class, flagged) = classify_count(count, regions.len());
            EventClass {
                count,
                class,
                flagged,
            }
        })
        .collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct ClassShare {
    pub class: FunctionalClass,
    pub events: usize,
    pub percent: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ClassifyReport {
    pub tables: Vec<String>,
    pub events: usize,
    pub flagged: usize,
    /// Events per count 0..=k.
    pub by_count: Vec<usize>,
    pub by_class: Vec<ClassShare>,
}

pub fn summarize_classes(classes: &[EventClass], tables: Vec<String>) -> ClassifyReport {
    let k = tables.len();
    let mut by_count = vec![0usize; k + 1];
    for c in classes {
        by_count[c.count] += 1;
    }
    let mut kinds: Vec<FunctionalClass> = classes.iter().map(|c| c.class).collect();
    kinds.sort();
    kinds.dedup();
    let total = classes.len();
    let by_class = kinds
        .into_iter()
        .map(|class| {
            let events = classes.iter().filter(|c| c.class == class).count();
            ClassShare {
                class,
                events,
                percent: if total == 0 {
                    0.0
                } else {
                    100.0 * events as f64 / total as f64
                },
            }
        })
        .collect();
    ClassifyReport {
        tables,
        events: total,
        flagged: classes.iter().filter(|c| c.flagged).count(),
        by_count,
        by_class,
    }
}

#[derive(Clone, Debug)]
pub struct ClassifyConfig {
    pub tables: Vec<PathBuf>,
    pub events: PathBuf,
    pub delimiter: u8,
    pub out: PathBuf,
}

/// Writes `classes.csv` (one row per event) and `classes.json`.
pub fn cmd_classify(config: &ClassifyConfig) -> anyhow::Result<ClassifyReport> {
    if config.tables.is_empty() {
        return Err(config_error("at least one --table is required"));
    }
    let regions = config
        .tables
        .iter()
        .map(|p| RejectedRegion::read(p))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let schema = Schema {
        delimiter: config.delimiter,
        cohort_column: None,
        sample_column: None,
        markers: None,
    };
    let file = File::open(&config.events)
        .with_context(|| format!("cannot open {}", config.events.display()))?;
    let events: MarkerMatrix<f64> = ingest::read_from(file, &schema, Some(Cohort::One))?;
    if events.rows() == 0 {
        bail!("no events in {}", config.events.display());
    }
    let classes = classify_events(&events, &regions)?;

    fs::create_dir_all(&config.out)
        .with_context(|| format!("cannot create {}", config.out.display()))?;
    let path = config.out.join("classes.csv");
    let file = File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(["event", "count", "class", "flagged"])?;
    for (i, c) in classes.iter().enumerate() {
        w.write_record(&[
            (i + 1).to_string(),
            c.count.to_string(),
            c.class.as_str().to_string(),
            u8::from(c.flagged).to_string(),
        ])?;
    }
    w.flush()?;

    let report = summarize_classes(&classes, regions.into_iter().map(|r| r.name).collect());
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(config.out.join("classes.json"), json + "\n")?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bands_for_six_analyses() {
        let expect = [
            (0, FunctionalClass::Nonfunctional, false),
            (1, FunctionalClass::Nonfunctional, false),
            (2, FunctionalClass::Nonfunctional, true),
            (3, FunctionalClass::Monofunctional, false),
            (4, FunctionalClass::Monofunctional, false),
            (5, FunctionalClass::Bifunctional, false),
            (6, FunctionalClass::Polyfunctional, false),
        ];
        for (count, class, flagged) in expect {
            assert_eq!(classify_count(count, 6), (class, flagged), "count {count}");
        }
    }

    #[test]
    fn other_analysis_counts_unclassified() {
        for k in [1, 2, 5, 7] {
            for count in 0..=k {
                assert_eq!(classify_count(count, k).0, FunctionalClass::Unclassified);
            }
        }
    }

    #[test]
    fn summary_tallies() {
        let classes: Vec<EventClass> = [0, 2, 2, 6]
            .iter()
            .map(|&count| {
                let (class, flagged) = classify_count(count, 6);
                EventClass {
                    count,
                    class,
                    flagged,
                }
            })
            .collect();
        let r = summarize_classes(&classes, (0..6).map(|i| i.to_string()).collect());
        assert_eq!(r.by_count, [1, 0, 2, 0, 0, 0, 1]);
        assert_eq!(r.flagged, 2);
        assert_eq!(r.by_class[0].class, FunctionalClass::Nonfunctional);
        assert_eq!(r.by_class[0].percent, 75.0);
    }
}
