//! The run configuration file. Command-line flags are applied on top of it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use streamseg::eval::SegMetrics;
use streamseg::io::DEFAULT_PORT;
use streamseg::SegParams;

use crate::Usage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Stream,
    Batch,
    Bench,
    Eval,
    Synth,
}

/// Where packets or scenes come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Input {
    /// Scene spec file or bundled scene name.
    Scene(String),
    Pcap(PathBuf),
    Raw(PathBuf),
    /// Local address to bind, e.g. `0.0.0.0:2368`.
    Udp(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Ndjson,
    Ply,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Nothing is written when unset.
    pub dir: Option<PathBuf>,
    pub formats: Vec<Format>,
    /// Include point coordinates in cluster records.
    pub points: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: None, formats: vec![Format::Ndjson], points: false }
    }
}

/// Evaluation thresholds. Every ratio must lie in [0, 1].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Gates {
    pub min_precision: Option<f64>,
    pub min_recall: Option<f64>,
    pub min_tpr: Option<f64>,
    pub min_osr: Option<f64>,
    pub min_usr: Option<f64>,
    pub max_fnr: Option<f64>,
}

/// Result of checking gates against metrics.
#[derive(Debug, Default, PartialEq)]
pub struct GateReport {
    pub failed: Vec<String>,
    /// Gates whose metric is undefined for the corpus.
    pub skipped: Vec<String>,
}

impl Gates {
    fn entries(&self) -> [(&'static str, &'static str, Option<f64>); 6] {
        [
            ("min_precision", "precision", self.min_precision),
            ("min_recall", "recall", self.min_recall),
            ("min_tpr", "tpr", self.min_tpr),
            ("min_osr", "osr", self.min_osr),
            ("min_usr", "usr", self.min_usr),
            ("max_fnr", "fnr", self.max_fnr),
        ]
    }

    pub fn validate(&self) -> Result<(), Usage> {
        for (name, _, value) in self.entries() {
            if let Some(v) = value {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Usage(format!("gate {name} must lie in [0, 1], got {v}")));
                }
            }
        }
        Ok(())
    }

    pub fn check(&self, metrics: &SegMetrics) -> GateReport {
        let mut report = GateReport::default();
        for (name, metric, bound) in self.entries() {
            let Some(bound) = bound else { continue };
            match metrics.get(metric) {
                None => report.skipped.push(format!("{name}: {metric} is n/a")),
                Some(v) => {
                    let ok = if name.starts_with("max") { v <= bound } else { v >= bound };
                    if !ok {
                        report.failed.push(format!("{name}: {metric} {v:.4} vs {bound}"));
                    }
                }
            }
        }
        report
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    /// Beam calibration file for packet inputs; the built-in table when unset.
    pub calibration: Option<PathBuf>,
    /// UDP destination port kept when reading captures.
    pub port: u16,
    pub input: Option<Input>,
    pub output: OutputConfig,
    pub params: SegParams,
    pub gates: Gates,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::default(),
            calibration: None,
            port: DEFAULT_PORT,
            input: None,
            output: OutputConfig::default(),
            params: SegParams::default(),
            gates: Gates::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, Usage> {
        let config: Self = toml::from_str(text).map_err(|e| Usage(format!("bad config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
        let mut config = Self::parse(&text).map_err(|e| Usage(format!("{}: {}", path.display(), e.0)))?;
        let dir = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        match &mut config.input {
            Some(Input::Pcap(p) | Input::Raw(p)) => rebase(p),
            Some(Input::Scene(s)) if dir.join(&*s).exists() => *s = dir.join(&*s).to_string_lossy().into_owned(),
            _ => {}
        }
        if let Some(p) = &mut config.calibration {
            rebase(p);
        }
        if let Some(p) = &mut config.output.dir {
            rebase(p);
        }
        Ok(config)
    }

    pub fn render(&self) -> String {
        toml::to_string(self).expect("configs always serialize")
    }

    pub fn validate(&self) -> Result<(), Usage> {
        self.params.validate().map_err(|e| Usage(e.to_string()))?;
        self.gates.validate()
    }

    /// Applies a `name=value` override to the segmentation parameters. The
    /// value uses config-file syntax.
    pub fn set_param(&mut self, assignment: &str) -> Result<(), Usage> {
        let (name, value) = assignment
            .split_once('=')
            .ok_or_else(|| Usage(format!("expected NAME=VALUE, got `{assignment}`")))?;
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {}", value.trim()))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .ok_or_else(|| Usage(format!("cannot parse value of `{}`", name.trim())))?;
        let mut table = toml::Table::try_from(&self.params).expect("parameters always serialize");
        table.insert(name.trim().to_owned(), value);
        self.params = table.try_into().map_err(|e| Usage(format!("parameter `{}`: {e}", name.trim())))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_round_trip() {
        let config = RunConfig::default();
        assert_eq!(RunConfig::parse(&config.render()).unwrap(), config);
        assert_eq!(RunConfig::parse("").unwrap(), config);
    }

    #[test]
    fn input_table() {
        let config = RunConfig::parse("mode = \"batch\"\n[input]\npcap = \"a.pcap\"\n").unwrap();
        assert_eq!(config.mode, Mode::Batch);
        assert_eq!(config.input, Some(Input::Pcap("a.pcap".into())));
        assert!(RunConfig::parse("[input]\npcap = \"a\"\nraw = \"b\"\n").is_err());
        assert!(RunConfig::parse("unknown = 1").is_err());
    }

    #[test]
    fn set_param_overrides() {
        let mut config = RunConfig::default();
        config.set_param("t_merge=0.9").unwrap();
        config.set_param("refinement = false").unwrap();
        assert_eq!(config.params.t_merge, 0.9);
        assert!(!config.params.refinement);
        assert!(config.set_param("t_merge").is_err());
        assert!(config.set_param("no_such=1").is_err());
        assert!(config.set_param("t_merge=\"x\"").is_err());
    }

    #[test]
    fn gates() {
        assert!(RunConfig::parse("[gates]\nmin_osr = 1.1\n").is_err());
        let gates = Gates { min_osr: Some(0.9), max_fnr: Some(0.1), min_usr: Some(0.5), ..Gates::default() };
        let metrics = SegMetrics { osr: Some(0.8), fnr: Some(0.05), usr: None, ..SegMetrics::default() };
        let report = gates.check(&metrics);
        assert_eq!(report.failed.len(), 1);
        assert!(report.failed[0].starts_with("min_osr"));
        assert_eq!(report.skipped.len(), 1);
    }

    fn input() -> impl Strategy<Value = Option<Input>> {
        prop_oneof![
            Just(None),
            "[a-z_]{1,12}".prop_map(|s| Some(Input::Scene(s))),
            "[a-z/]{1,12}\\.pcap".prop_map(|s| Some(Input::Pcap(s.into()))),
            "[a-z/]{1,12}\\.raw".prop_map(|s| Some(Input::Raw(s.into()))),
            (0u16..u16::MAX).prop_map(|p| Some(Input::Udp(format!("0.0.0.0:{p}")))),
        ]
    }

    fn unit() -> impl Strategy<Value = Option<f64>> {
        proptest::option::of(0.0f64..=1.0)
    }

    proptest! {
        #[test]
        fn render_parse_round_trip(
            mode in prop_oneof![Just(Mode::Stream), Just(Mode::Batch), Just(Mode::Bench), Just(Mode::Eval), Just(Mode::Synth)],
            input in input(),
            port in any::<u16>(),
            dir in proptest::option::of("[a-z]{1,8}"),
            formats in proptest::sample::subsequence(vec![Format::Ndjson, Format::Ply, Format::Csv], 0..=3),
            points in any::<bool>(),
            t_merge in 0.1f64..5.0,
            t_p2line in 0.01f64..1.0,
            block in 2usize..64,
            refinement in any::<bool>(),
            intercept in proptest::option::of((-5.0f64..-1.0, 0.1f64..2.0)),
            gates in (unit(), unit(), unit(), unit(), unit(), unit()),
        ) {
            let config = RunConfig {
                mode,
                calibration: dir.as_ref().map(|d| PathBuf::from(format!("{d}.cal"))),
                port,
                input,
                output: OutputConfig { dir: dir.map(PathBuf::from), formats, points },
                params: SegParams {
                    t_merge,
                    t_p2line,
                    block_size_b: block,
                    refinement,
                    line_intercept_range: intercept.map(|(lo, w)| [lo, lo + w]),
                    ..SegParams::default()
                },
                gates: Gates {
                    min_precision: gates.0,
                    min_recall: gates.1,
                    min_tpr: gates.2,
                    min_osr: gates.3,
                    min_usr: gates.4,
                    max_fnr: gates.5,
                },
            };
            prop_assert_eq!(RunConfig::parse(&config.render()).unwrap(), config);
        }
    }
}
