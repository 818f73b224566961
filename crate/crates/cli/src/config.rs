//! Flat `key = value` configuration files and their merge with flags.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use team_core::partition::Scheme;
use team_core::team::StopRule;

/// A problem with the requested settings rather than with the data.
/// The binary maps it to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// Keys a run config file may set; the same names as the long flags.
pub const RUN_KEYS: &[&str] = &[
    "input",
    "input2",
    "delimiter",
    "cohort-column",
    "sample-column",
    "quantile-normalize",
    "alpha",
    "scheme",
    "bins-per-dim",
    "target-bin-count",
    "max-layers",
    "min-rejections",
    "rejection-ratio",
    "dims",
    "flip-cohorts",
    "seed",
    "out",
];

/// Parsed config file. `dims` may repeat; every other key may not.
#[derive(Clone, Debug, Default)]
pub struct FileValues {
    values: BTreeMap<String, Vec<String>>,
}

impl FileValues {
    pub fn parse(text: &str, allowed: &[&str]) -> anyhow::Result<Self> {
        let mut values: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                config_error(format!("config line {}: expected key = value", i + 1))
            })?;
            let key = key.trim().to_owned();
            if !allowed.contains(&key.as_str()) {
                return Err(config_error(format!(
                    "config line {}: unknown key {key:?}",
                    i + 1
                )));
            }
            let slot = values.entry(key.clone()).or_default();
            if !slot.is_empty() && key != "dims" {
                return Err(config_error(format!(
                    "config line {}: {key:?} set twice",
                    i + 1
                )));
            }
            slot.push(value.trim().to_owned());
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path, allowed: &[&str]) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, allowed)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> anyhow::Result<Option<T>> {
        match self.values.get(key).and_then(|v| v.first()) {
            None => Ok(None),
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|_| config_error(format!("config key {key:?}: cannot parse {s:?}"))),
        }
    }

    pub fn all(&self, key: &str) -> &[String] {
        self.values.get(key).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Flag value if given, else the file's.
pub fn pick<T: FromStr>(
    flag: Option<T>,
    file: &FileValues,
    key: &str,
) -> anyhow::Result<Option<T>> {
    match flag {
        Some(v) => Ok(Some(v)),
        None => file.get(key),
    }
}

pub fn parse_scheme(s: &str) -> anyhow::Result<Scheme> {
    match s.to_ascii_lowercase().as_str() {
        "sequential" => Ok(Scheme::Sequential),
        "adaptive" => Ok(Scheme::Adaptive),
        other => Err(config_error(format!(
            "unknown scheme {other:?}; expected sequential or adaptive"
        ))),
    }
}

/// Comma-separated marker names, whitespace trimmed.
pub fn parse_dims(s: &str) -> anyhow::Result<Vec<String>> {
    let names: Vec<String> = s
        .split(',')
        .map(|n| n.trim().to_owned())
        .filter(|n| !n.is_empty())
        .collect();
    if names.is_empty() {
        return Err(config_error(format!("empty dimension list {s:?}")));
    }
    let mut sorted = names.clone();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != names.len() {
        return Err(config_error(format!(
            "dimension list {s:?} repeats a marker"
        )));
    }
    Ok(names)
}

fn parse_delimiter(s: &str) -> anyhow::Result<u8> {
    match s {
        "tab" | "\\t" | "\t" => Ok(b'\t'),
        "comma" => Ok(b','),
        "semicolon" => Ok(b';'),
        _ if s.len() == 1 && s.is_ascii() => Ok(s.as_bytes()[0]),
        _ => Err(config_error(format!(
            "delimiter must be one ASCII character, got {s:?}"
        ))),
    }
}

/// How finely to bin each sub-analysis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Resolution {
    /// Sizing rule n ≈ (2N)^(1/3) points per leaf.
    Auto,
    /// Sequential: bins per dimension. Adaptive: leaves ≈ this^p.
    BinsPerDim(usize),
    /// Target pooled count per leaf.
    TargetCount(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputSpec {
    pub input: PathBuf,
    /// Two-file mode: `input` is cohort 1 and this is cohort 2.
    pub input2: Option<PathBuf>,
    pub delimiter: u8,
    pub cohort_column: String,
    pub sample_column: Option<String>,
    pub quantile_normalize: bool,
}

/// Everything `run` needs, after merging the config file with flags.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: InputSpec,
    pub alpha: f64,
    pub scheme: Scheme,
    pub resolution: Resolution,
    /// Rules requested explicitly; an empty rule means "default layer cap".
    pub stop: StopRule,
    /// Empty means one analysis over every marker.
    pub subsets: Vec<Vec<String>>,
    pub flip_cohorts: bool,
    pub seed: u64,
    pub out: PathBuf,
}

/// Flag values as clap hands them over; all optional so the file can fill gaps.
#[derive(Clone, Debug, Default)]
pub struct RunFlags {
    pub config: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub input2: Option<PathBuf>,
    pub delimiter: Option<String>,
    pub cohort_column: Option<String>,
    pub sample_column: Option<String>,
    pub quantile_normalize: bool,
    pub alpha: Option<f64>,
    pub scheme: Option<String>,
    pub bins_per_dim: Option<usize>,
    pub target_bin_count: Option<f64>,
    pub max_layers: Option<usize>,
    pub min_rejections: Option<usize>,
    pub rejection_ratio: Option<f64>,
    pub dims: Vec<String>,
    pub flip_cohorts: bool,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl RunFlags {
    pub fn resolve(self) -> anyhow::Result<RunConfig> {
        let file = match &self.config {
            Some(path) => FileValues::load(path, RUN_KEYS)?,
            None => FileValues::default(),
        };

        let input: PathBuf = pick(self.input, &file, "input")?
            .ok_or_else(|| config_error("no input file given (--input or `input =`)"))?;
        let delimiter = match pick(self.delimiter, &file, "delimiter")? {
            Some(d) => parse_delimiter(&d)?,
            None => b',',
        };
        let data = InputSpec {
            input,
            input2: pick(self.input2, &file, "input2")?,
            delimiter,
            cohort_column: pick(self.cohort_column, &file, "cohort-column")?
                .unwrap_or_else(|| "cohort".into()),
            sample_column: pick(self.sample_column, &file, "sample-column")?,
            quantile_normalize: self.quantile_normalize
                || file.get::<bool>("quantile-normalize")?.unwrap_or(false),
        };
        if data.quantile_normalize && data.sample_column.is_none() {
            return Err(config_error("quantile normalization needs --sample-column"));
        }

        let alpha = pick(self.alpha, &file, "alpha")?.unwrap_or(0.05);
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(config_error(format!(
                "alpha must lie in (0, 1), got {alpha}"
            )));
        }
        let scheme = match pick(self.scheme, &file, "scheme")? {
            Some(s) => parse_scheme(&s)?,
            None => Scheme::Sequential,
        };

        let bins = pick(self.bins_per_dim, &file, "bins-per-dim")?;
        let target = pick(self.target_bin_count, &file, "target-bin-count")?;
        let resolution = match (bins, target) {
            (Some(_), Some(_)) => {
                return Err(config_error(
                    "give bins-per-dim or target-bin-count, not both",
                ))
            }
            (Some(b), None) if b < 2 => {
                return Err(config_error(format!(
                    "bins-per-dim must be at least 2, got {b}"
                )))
            }
            (Some(b), None) => Resolution::BinsPerDim(b),
            (None, Some(t)) if !(t >= 1.0 && t.is_finite()) => {
                return Err(config_error(format!(
                    "target-bin-count must be at least 1, got {t}"
                )))
            }
            (None, Some(t)) => Resolution::TargetCount(t),
            (None, None) => Resolution::Auto,
        };

        let stop = StopRule {
            max_layers: pick(self.max_layers, &file, "max-layers")?,
            min_rejections: pick(self.min_rejections, &file, "min-rejections")?,
            rejection_ratio: pick(self.rejection_ratio, &file, "rejection-ratio")?,
        };
        if stop.max_layers == Some(0) {
            return Err(config_error("max-layers must be at least 1"));
        }
        if let Some(r) = stop.rejection_ratio {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(config_error(format!(
                    "rejection-ratio must be non-negative, got {r}"
                )));
            }
        }

        let raw_dims: Vec<String> = if self.dims.is_empty() {
            file.all("dims").to_vec()
        } else {
            self.dims
        };
        let subsets = raw_dims
            .iter()
            .map(|s| parse_dims(s))
            .collect::<anyhow::Result<Vec<_>>>()?;

        Ok(RunConfig {
            data,
            alpha,
            scheme,
            resolution,
            stop,
            subsets,
            flip_cohorts: self.flip_cohorts || file.get::<bool>("flip-cohorts")?.unwrap_or(false),
            seed: pick(self.seed, &file, "seed")?.unwrap_or(0),
            out: pick(self.out, &file, "out")?.unwrap_or_else(|| PathBuf::from("team-out")),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(input: &str) -> RunFlags {
        RunFlags {
            input: Some(input.into()),
            ..RunFlags::default()
        }
    }

    #[test]
    fn comments_blank_lines_and_repeats() {
        let text = "# header\nalpha = 0.1\n\ndims = A,B  # first\ndims=A, C\n";
        let f = FileValues::parse(text, RUN_KEYS).unwrap();
        assert_eq!(f.get::<f64>("alpha").unwrap(), Some(0.1));
        assert_eq!(f.all("dims"), ["A,B", "A, C"]);
    }

    #[test]
    fn unknown_and_duplicate_keys_rejected() {
        assert!(FileValues::parse("alpah = 0.1", RUN_KEYS).is_err());
        assert!(FileValues::parse("alpha = 0.1\nalpha = 0.2", RUN_KEYS).is_err());
        assert!(FileValues::parse("alpha 0.1", RUN_KEYS).is_err());
    }

    #[test]
    fn defaults() {
        let c = flags("x.csv").resolve().unwrap();
        assert_eq!(c.alpha, 0.05);
        assert_eq!(c.scheme, Scheme::Sequential);
        assert_eq!(c.resolution, Resolution::Auto);
        assert_eq!(c.stop, StopRule::default());
        assert!(c.subsets.is_empty());
        assert!(!c.flip_cohorts);
    }

    #[test]
    fn alpha_bounds() {
        for bad in [0.0, 1.0, 1.5, -0.1, f64::NAN] {
            let mut f = flags("x.csv");
            f.alpha = Some(bad);
            let err = f.resolve().unwrap_err();
            assert!(err.downcast_ref::<ConfigError>().is_some());
        }
    }

    #[test]
    fn resolution_conflicts() {
        let mut f = flags("x.csv");
        f.bins_per_dim = Some(10);
        f.target_bin_count = Some(50.0);
        assert!(f.resolve().is_err());
        let mut f = flags("x.csv");
        f.bins_per_dim = Some(1);
        assert!(f.resolve().is_err());
    }

    #[test]
    fn dims_parsing() {
        assert_eq!(parse_dims(" A , B ").unwrap(), ["A", "B"]);
        assert!(parse_dims(" , ").is_err());
        assert!(parse_dims("A,A").is_err());
    }

    #[test]
    fn delimiters() {
        assert_eq!(parse_delimiter("tab").unwrap(), b'\t');
        assert_eq!(parse_delimiter(";").unwrap(), b';');
        assert!(parse_delimiter("ab").is_err());
    }
}
