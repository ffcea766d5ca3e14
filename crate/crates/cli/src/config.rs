//! Run configuration: a flat map of dotted keys filled from defaults, the
//! `GRAMMAR_URL` environment variable, an optional JSON file, and flags, in
//! that order of increasing precedence.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::LevelFilter;
use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

use scalebound::dataio::MANIFEST_FILE;
use scalebound::interventions::ScaleTag;
use scalebound::signals::{DetectConfig, FusionConfig, ProbeConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Detect,
    Score,
    Synth,
    Report,
    All,
}

impl Command {
    pub const ALL: [Command; 5] = [Command::Detect, Command::Score, Command::Synth, Command::Report, Command::All];

    pub fn name(self) -> &'static str {
        match self {
            Command::Detect => "detect",
            Command::Score => "score",
            Command::Synth => "synth",
            Command::Report => "report",
            Command::All => "all",
        }
    }

    pub fn about(self) -> &'static str {
        match self {
            Command::Detect => "Detect scale boundaries in one or more activation dumps",
            Command::Score => "Score generation corpora against a baseline",
            Command::Synth => "Write a synthetic dump with planted boundaries",
            Command::Report => "Aggregate model records into report.json, tables.csv and curves",
            Command::All => "Detect (on a synthetic dump if none is given), score if corpora are set, then report",
        }
    }
}

impl FromStr for Command {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown command `{s}`"))
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("`{key}`: expected {expected}, found {found}")]
    TypeError {
        key: String,
        expected: String,
        found: String,
    },
    #[error("config file {path}: {message}")]
    File { path: String, message: String },
    #[error("missing manifest: {}", .0.display())]
    MissingManifest(PathBuf),
    #[error("`{key}`: no such file {}", .path.display())]
    MissingInput { key: String, path: PathBuf },
    #[error("`{command}` needs {what}")]
    Incomplete { command: &'static str, what: String },
}

impl ConfigError {
    /// Stable name used in diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            ConfigError::UnknownKey(_) => "UnknownKey",
            ConfigError::TypeError { .. } => "TypeError",
            ConfigError::File { .. } => "ConfigFile",
            ConfigError::MissingManifest(_) => "MissingManifest",
            ConfigError::MissingInput { .. } => "MissingInput",
            ConfigError::Incomplete { .. } => "Incomplete",
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Range {
    NonNegative,
    Positive,
    OpenUnit,
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    Uint { min: u64 },
    Float(Range),
    Bool,
    Str,
    Path,
    PathList,
    Weights,
    StrMap,
    Level,
}

/// One configuration key.
#[derive(Debug)]
pub struct Key {
    pub name: &'static str,
    /// Short flag spelling accepted next to the derived `--kebab-case` one.
    pub alias: Option<&'static str>,
    kind: Kind,
    /// Default as JSON text; `null` marks an optional key.
    default: &'static str,
    pub help: &'static str,
}

impl Key {
    /// `fusion.prominence_threshold` becomes `fusion-prominence-threshold`.
    pub fn flag(&self) -> String {
        self.name.replace(['.', '_'], "-")
    }

    pub fn repeatable(&self) -> bool {
        matches!(self.kind, Kind::PathList | Kind::StrMap)
    }

    pub fn is_switch(&self) -> bool {
        matches!(self.kind, Kind::Bool)
    }

    fn default_value(&self) -> Value {
        serde_json::from_str(self.default).expect("registry defaults are valid JSON")
    }

    fn optional(&self) -> bool {
        self.default == "null"
    }
}

const fn key(name: &'static str, alias: Option<&'static str>, kind: Kind, default: &'static str, help: &'static str) -> Key {
    Key {
        name,
        alias,
        kind,
        default,
        help,
    }
}

pub const KEYS: &[Key] = &[
    key("seed", None, Kind::Uint { min: 0 }, "0", "Seed for bootstrap, probes, reference sampling and synthetic data"),
    key("threads", None, Kind::Uint { min: 1 }, "null", "Worker threads (default: available cores)"),
    key("output.dir", Some("out"), Kind::Path, "\"out\"", "Directory receiving every output file"),
    key("log.level", Some("verbosity"), Kind::Level, "\"info\"", "off, error, warn, info, debug or trace"),
    key("log.json", Some("json-logs"), Kind::Bool, "false", "Also write machine-readable events to events.jsonl"),
    key("dump.paths", Some("dump"), Kind::PathList, "[]", "Activation dump directory (repeatable)"),
    key("fusion.weights", Some("weights"), Kind::Weights, "[1.0, 0.8, 0.6]", "Signal weights as w1,w2,w3"),
    key("fusion.prominence_threshold", Some("prominence"), Kind::Float(Range::NonNegative), "0.3", "Minimum peak prominence on the normalized curve"),
    key("fusion.bootstrap_iterations", Some("bootstrap"), Kind::Uint { min: 1 }, "1000", "Bootstrap iterations"),
    key("fusion.ci_level", Some("ci-level"), Kind::Float(Range::OpenUnit), "0.95", "Confidence level of the boundary intervals"),
    key("fusion.max_ci_width", Some("max-ci-width"), Kind::Float(Range::Positive), "5.0", "A boundary is accepted when its interval is narrower than this many layers"),
    key("probe.hidden_units", None, Kind::Uint { min: 1 }, "128", "Hidden units of each probe"),
    key("probe.epochs", None, Kind::Uint { min: 1 }, "20", "Probe training epochs"),
    key("probe.batch_size", None, Kind::Uint { min: 1 }, "256", "Probe minibatch size"),
    key("probe.learning_rate", None, Kind::Float(Range::Positive), "0.001", "Probe learning rate"),
    key("probe.held_out_fraction", None, Kind::Float(Range::OpenUnit), "0.2", "Fraction of sentences held out for probe scoring"),
    key("signals.subsample", None, Kind::Uint { min: 1 }, "8192", "Token budget for the representation-change subsample"),
    key("interventions.baseline", Some("baseline"), Kind::Path, "null", "Baseline corpus (JSON Lines)"),
    key("interventions.local", Some("local"), Kind::Path, "null", "Corpus generated with local-scale noise"),
    key("interventions.intermediate", Some("intermediate"), Kind::Path, "null", "Corpus generated with intermediate-scale noise"),
    key("interventions.global", Some("global"), Kind::Path, "null", "Corpus generated with global-scale noise"),
    key("interventions.sigma", Some("sigma"), Kind::Float(Range::Positive), "0.1", "Relative noise level used for the perturbed corpora"),
    key("interventions.grammar_url", Some("grammar-url"), Kind::Str, "null", "Base URL of a LanguageTool-compatible service"),
    key("interventions.grammar_fixture", Some("grammar-fixture"), Kind::Path, "null", "Replay grammar responses from this fixture instead of a service"),
    key("interventions.max_in_flight", None, Kind::Uint { min: 1 }, "4", "Concurrent grammar requests"),
    key("interventions.retries", None, Kind::Uint { min: 0 }, "2", "Retries per grammar request"),
    key("report.records", Some("records"), Kind::Path, "null", "JSON list of model records to include in the report"),
    key("report.families", Some("family"), Kind::StrMap, "{}", "Family of a model, as MODEL=FAMILY (repeatable)"),
    key("report.oracle", None, Kind::Bool, "true", "Evaluate the mutual-information check on the synthetic channel"),
    key("synth.spec", None, Kind::Path, "null", "Synthetic model spec (synth.json); defaults are used otherwise"),
];

pub fn lookup(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

/// Everything `validate_config` reads.
#[derive(Debug, Default, Clone)]
pub struct Sources {
    /// Parsed config file.
    pub file: Option<Value>,
    /// `(key, raw value)` pairs from the command line, in order.
    pub flags: Vec<(String, String)>,
    pub grammar_url_env: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterventionInputs {
    pub baseline: Option<PathBuf>,
    pub treated: Vec<(ScaleTag, PathBuf)>,
    pub sigma: f64,
    pub grammar_url: Option<String>,
    pub grammar_fixture: Option<PathBuf>,
    pub max_in_flight: usize,
    pub retries: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub threads: Option<usize>,
    pub log_level: LevelFilter,
    pub json_logs: bool,
    pub dumps: Vec<PathBuf>,
    pub detect: DetectConfig,
    pub interventions: InterventionInputs,
    pub records: Option<PathBuf>,
    pub families: BTreeMap<String, String>,
    pub oracle: bool,
    pub synth_spec: Option<PathBuf>,
    /// Effective value of every key, for `run_meta.json`.
    pub echo: BTreeMap<String, Value>,
}

pub fn load_config_file(path: &Path) -> Result<Value, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::File {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| ConfigError::File {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn type_error(key: &str, expected: &str, found: impl std::fmt::Display) -> ConfigError {
    ConfigError::TypeError {
        key: key.to_string(),
        expected: expected.to_string(),
        found: found.to_string(),
    }
}

fn flag_value(k: &Key, raws: &[&str]) -> Result<Value, ConfigError> {
    let last = *raws.last().expect("flag seen at least once");
    let quoted = |s: &str| format!("{s:?}");
    Ok(match k.kind {
        Kind::Uint { .. } => Value::from(last.parse::<u64>().map_err(|_| type_error(k.name, "an unsigned integer", quoted(last)))?),
        Kind::Float(_) => Value::from(last.parse::<f64>().map_err(|_| type_error(k.name, "a number", quoted(last)))?),
        Kind::Bool => Value::from(last.parse::<bool>().map_err(|_| type_error(k.name, "true or false", quoted(last)))?),
        Kind::Str | Kind::Path | Kind::Level => Value::from(last),
        Kind::PathList => Value::from(raws.to_vec()),
        Kind::Weights => {
            let parts: Result<Vec<f64>, _> = last.split(',').map(|p| p.trim().parse::<f64>()).collect();
            Value::from(parts.map_err(|_| type_error(k.name, "three comma-separated numbers", quoted(last)))?)
        }
        Kind::StrMap => {
            let mut m = Map::new();
            for raw in raws {
                let (model, family) = raw
                    .split_once('=')
                    .ok_or_else(|| type_error(k.name, "MODEL=FAMILY", quoted(raw)))?;
                m.insert(model.to_string(), Value::from(family));
            }
            Value::Object(m)
        }
    })
}

fn check(k: &Key, v: &Value) -> Result<(), ConfigError> {
    if v.is_null() {
        return if k.optional() { Ok(()) } else { Err(type_error(k.name, "a value", "null")) };
    }
    let ok = match k.kind {
        Kind::Uint { min } => {
            let n = v.as_u64().ok_or_else(|| type_error(k.name, "an unsigned integer", v))?;
            if n < min {
                return Err(type_error(k.name, &format!("an integer >= {min}"), v));
            }
            true
        }
        Kind::Float(range) => {
            let x = v.as_f64().filter(|x| x.is_finite()).ok_or_else(|| type_error(k.name, "a finite number", v))?;
            let (ok, expected) = match range {
                Range::NonNegative => (x >= 0.0, "a number >= 0"),
                Range::Positive => (x > 0.0, "a number > 0"),
                Range::OpenUnit => (x > 0.0 && x < 1.0, "a number strictly between 0 and 1"),
            };
            if !ok {
                return Err(type_error(k.name, expected, v));
            }
            true
        }
        Kind::Bool => v.is_boolean(),
        Kind::Str | Kind::Path => v.as_str().is_some_and(|s| !s.is_empty()),
        Kind::Level => {
            let s = v.as_str().ok_or_else(|| type_error(k.name, "a log level", v))?;
            LevelFilter::from_str(s).is_ok()
        }
        Kind::PathList => v.as_array().is_some_and(|a| a.iter().all(|p| p.as_str().is_some_and(|s| !s.is_empty()))),
        Kind::Weights => {
            let ws: Option<Vec<f64>> = v.as_array().filter(|a| a.len() == 3).map(|a| a.iter().filter_map(Value::as_f64).collect());
            match ws {
                Some(ws) if ws.len() == 3 => {
                    if ws.iter().any(|w| !w.is_finite() || *w < 0.0) || ws.iter().all(|&w| w == 0.0) {
                        return Err(type_error(k.name, "three non-negative weights, at least one positive", v));
                    }
                    true
                }
                _ => false,
            }
        }
        Kind::StrMap => v.as_object().is_some_and(|m| m.values().all(Value::is_string)),
    };
    if ok {
        Ok(())
    } else {
        let expected = match k.kind {
            Kind::Bool => "true or false",
            Kind::Str | Kind::Path => "a non-empty string",
            Kind::Level => "one of off, error, warn, info, debug, trace",
            Kind::PathList => "a list of paths",
            Kind::Weights => "a list of three numbers",
            Kind::StrMap => "an object of strings",
            Kind::Uint { .. } | Kind::Float(_) => unreachable!("numeric kinds return early"),
        };
        Err(type_error(k.name, expected, v))
    }
}

/// Merged, type-checked key map.
fn merge(sources: &Sources) -> Result<BTreeMap<String, Value>, ConfigError> {
    let mut map: BTreeMap<String, Value> = KEYS.iter().map(|k| (k.name.to_string(), k.default_value())).collect();
    if let Some(url) = &sources.grammar_url_env {
        if !url.is_empty() {
            map.insert("interventions.grammar_url".into(), Value::from(url.as_str()));
        }
    }
    match &sources.file {
        None => {}
        Some(Value::Object(obj)) => {
            for (name, v) in obj {
                lookup(name).ok_or_else(|| ConfigError::UnknownKey(name.clone()))?;
                map.insert(name.clone(), v.clone());
            }
        }
        Some(other) => {
            return Err(ConfigError::File {
                path: "<config>".into(),
                message: format!("top level must be an object of dotted keys, found {other}"),
            })
        }
    }
    let mut grouped: Vec<(&Key, Vec<&str>)> = Vec::new();
    for (name, raw) in &sources.flags {
        let k = lookup(name).ok_or_else(|| ConfigError::UnknownKey(name.clone()))?;
        match grouped.iter_mut().find(|(g, _)| g.name == k.name) {
            Some((_, v)) => v.push(raw),
            None => grouped.push((k, vec![raw])),
        }
    }
    for (k, raws) in grouped {
        let v = flag_value(k, &raws)?;
        // map-valued flags add entries; everything else replaces
        let merged = match (&v, map.get(k.name)) {
            (Value::Object(new), Some(Value::Object(old))) => {
                let mut m = old.clone();
                m.extend(new.clone());
                Value::Object(m)
            }
            _ => v,
        };
        map.insert(k.name.to_string(), merged);
    }
    for k in KEYS {
        check(k, &map[k.name])?;
    }
    Ok(map)
}

fn path_of(map: &BTreeMap<String, Value>, name: &str) -> Option<PathBuf> {
    map[name].as_str().map(PathBuf::from)
}

fn uint(map: &BTreeMap<String, Value>, name: &str) -> u64 {
    map[name].as_u64().expect("checked")
}

fn float(map: &BTreeMap<String, Value>, name: &str) -> f64 {
    map[name].as_f64().expect("checked")
}

fn existing_file(map: &BTreeMap<String, Value>, name: &str) -> Result<Option<PathBuf>, ConfigError> {
    match path_of(map, name) {
        Some(p) if !p.is_file() => Err(ConfigError::MissingInput {
            key: name.to_string(),
            path: p,
        }),
        other => Ok(other),
    }
}

/// Merges every source, checks types and ranges, and confirms that referenced inputs exist.
pub fn validate_config(command: Command, sources: &Sources) -> Result<RunConfig, ConfigError> {
    let map = merge(sources)?;
    let seed = uint(&map, "seed");

    let weights: Vec<f64> = map["fusion.weights"].as_array().expect("checked").iter().map(|w| w.as_f64().expect("checked")).collect();
    let fusion = FusionConfig {
        weights: [weights[0], weights[1], weights[2]],
        prominence_threshold: float(&map, "fusion.prominence_threshold"),
        bootstrap_iterations: uint(&map, "fusion.bootstrap_iterations") as usize,
        ci_level: float(&map, "fusion.ci_level"),
        max_ci_width: float(&map, "fusion.max_ci_width"),
        rng_seed: seed,
    };
    let probe = ProbeConfig {
        hidden_units: uint(&map, "probe.hidden_units") as usize,
        learning_rate: float(&map, "probe.learning_rate") as f32,
        batch_size: uint(&map, "probe.batch_size") as usize,
        epochs: uint(&map, "probe.epochs") as usize,
        held_out_fraction: float(&map, "probe.held_out_fraction"),
        rng_seed: seed,
    };
    let detect = DetectConfig {
        fusion,
        probe,
        subsample: uint(&map, "signals.subsample") as usize,
    };

    let dumps: Vec<PathBuf> = map["dump.paths"].as_array().expect("checked").iter().map(|p| PathBuf::from(p.as_str().expect("checked"))).collect();
    for d in &dumps {
        let manifest = d.join(MANIFEST_FILE);
        if !manifest.is_file() {
            return Err(ConfigError::MissingManifest(manifest));
        }
    }

    let mut treated = Vec::new();
    for (name, tag) in [
        ("interventions.local", ScaleTag::Local),
        ("interventions.intermediate", ScaleTag::Intermediate),
        ("interventions.global", ScaleTag::Global),
    ] {
        if let Some(p) = existing_file(&map, name)? {
            treated.push((tag, p));
        }
    }
    let interventions = InterventionInputs {
        baseline: existing_file(&map, "interventions.baseline")?,
        treated,
        sigma: float(&map, "interventions.sigma"),
        grammar_url: map["interventions.grammar_url"].as_str().map(str::to_string),
        grammar_fixture: existing_file(&map, "interventions.grammar_fixture")?,
        max_in_flight: uint(&map, "interventions.max_in_flight") as usize,
        retries: uint(&map, "interventions.retries").min(u32::MAX as u64) as u32,
    };

    match command {
        Command::Detect if dumps.is_empty() => {
            return Err(ConfigError::Incomplete {
                command: command.name(),
                what: "at least one `dump.paths` entry (--dump DIR)".into(),
            })
        }
        Command::Score if interventions.baseline.is_none() || interventions.treated.is_empty() => {
            return Err(ConfigError::Incomplete {
                command: command.name(),
                what: "`interventions.baseline` and at least one perturbed corpus".into(),
            })
        }
        Command::All if interventions.baseline.is_some() && interventions.treated.is_empty() => {
            return Err(ConfigError::Incomplete {
                command: command.name(),
                what: "at least one perturbed corpus next to `interventions.baseline`".into(),
            })
        }
        _ => {}
    }

    Ok(RunConfig {
        command,
        output_dir: path_of(&map, "output.dir").expect("has default"),
        seed,
        threads: map["threads"].as_u64().map(|n| n as usize),
        log_level: LevelFilter::from_str(map["log.level"].as_str().expect("checked")).expect("checked"),
        json_logs: map["log.json"].as_bool().expect("checked"),
        dumps,
        detect,
        interventions,
        records: existing_file(&map, "report.records")?,
        families: map["report.families"]
            .as_object()
            .expect("checked")
            .iter()
            .map(|(k, v)| (k.clone(), v.as_str().expect("checked").to_string()))
            .collect(),
        oracle: map["report.oracle"].as_bool().expect("checked"),
        synth_spec: existing_file(&map, "synth.spec")?,
        echo: map,
    })
}
