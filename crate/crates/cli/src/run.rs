use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use scalebound::dataio::{read_dump, DataError};
use scalebound::interventions::{
    intervention_report, GenerationCorpus, GrammarService, HttpGrammarService, InterventionError, InterventionReport,
    ReplayService, ScaleTag,
};
use scalebound::report::{emit_report, CurvePlot, ModelRecord, Report, ReportError};
use scalebound::signals::{detect, signals_csv, BoundaryResult, SignalError};
use scalebound::synth::{exact_mi_curve, generate_dump, SynthError, SyntheticModelSpec};

use crate::config::{Command, RunConfig};
use crate::logging;

/// Directory, under the output directory, that receives a generated dump.
pub const SYNTH_DUMP_DIR: &str = "synth_dump";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Intervention(#[from] InterventionError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("no two qualifying peaks in: {}", .0.join(", "))]
    InsufficientPeaks(Vec<String>),
}

impl RunError {
    pub fn kind(&self) -> &'static str {
        match self {
            RunError::Data(DataError::MissingManifest(_)) => "MissingManifest",
            RunError::Signal(e) if e.is_insufficient_peaks() => "InsufficientPeaks",
            RunError::InsufficientPeaks(_) => "InsufficientPeaks",
            RunError::Data(_) => "DataError",
            RunError::Signal(_) => "SignalError",
            RunError::Synth(_) => "SynthError",
            RunError::Intervention(_) => "InterventionError",
            RunError::Report(_) => "ReportError",
            RunError::Io { .. } => "IoError",
        }
    }

    /// 2 for a detection that found too few peaks, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "InsufficientPeaks" => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, RunError>;

struct Outputs {
    root: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn write(&mut self, path: PathBuf, contents: &str) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|source| RunError::Io {
                path: parent.display().to_string(),
                source,
            })?;
        }
        std::fs::write(&path, contents).map_err(|source| RunError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.note(&path);
        Ok(())
    }

    fn note(&mut self, path: &Path) {
        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        self.written.push(rel.display().to_string());
    }
}

/// Family used when none is configured: the leading letters of the model name.
pub fn infer_family(model_name: &str) -> String {
    let lead: String = model_name.chars().take_while(|c| c.is_ascii_alphabetic()).collect();
    if lead.is_empty() {
        model_name.to_string()
    } else {
        lead
    }
}

fn safe_name(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

fn synth_spec(cfg: &RunConfig) -> Result<SyntheticModelSpec> {
    Ok(match &cfg.synth_spec {
        Some(p) => SyntheticModelSpec::load(p)?,
        None => SyntheticModelSpec {
            rng_seed: cfg.seed,
            ..SyntheticModelSpec::default()
        },
    })
}

fn synth_step(cfg: &RunConfig, out: &mut Outputs) -> Result<PathBuf> {
    let spec = synth_spec(cfg)?;
    let dir = cfg.output_dir.join(SYNTH_DUMP_DIR);
    let manifest = generate_dump(&spec, &dir)?;
    out.note(&dir);
    logging::event(
        "synth.done",
        json!({"dir": dir.display().to_string(), "layers": manifest.num_layers, "sentences": manifest.num_sentences,
               "planted_li": spec.planted_li, "planted_ig": spec.planted_ig}),
    );
    Ok(dir)
}

#[derive(Serialize)]
struct BoundariesFile<'a> {
    model_name: &'a str,
    seed: u64,
    #[serde(flatten)]
    result: &'a BoundaryResult,
}

#[derive(Default)]
struct Detected {
    records: Vec<ModelRecord>,
    curves: Vec<CurvePlot>,
    failed: Vec<String>,
}

fn detect_step(cfg: &RunConfig, dumps: &[PathBuf], out: &mut Outputs) -> Result<Detected> {
    let mut detected = Detected::default();
    let mut used_dirs: Vec<String> = Vec::new();
    for (i, path) in dumps.iter().enumerate() {
        let dump = read_dump(path)?;
        let name = dump.manifest().model_name.clone();
        let dir = if dumps.len() == 1 {
            cfg.output_dir.clone()
        } else {
            let mut d = safe_name(&name);
            if used_dirs.contains(&d) {
                d = format!("{d}_{i}");
            }
            used_dirs.push(d.clone());
            cfg.output_dir.join(d)
        };
        let det = detect(&dump, &cfg.detect)?;
        out.write(dir.join("signals.csv"), &signals_csv(&det.s1, &det.s2, &det.s3, &det.curve))?;
        let mut plot = CurvePlot {
            model_name: name.clone(),
            evidence: det.curve.values.clone(),
            boundaries: None,
        };
        match det.result {
            Ok(b) => {
                let file = BoundariesFile {
                    model_name: &name,
                    seed: cfg.seed,
                    result: &b,
                };
                out.write(dir.join("boundaries.json"), &serde_json::to_string_pretty(&file).expect("serializes"))?;
                logging::event(
                    "detect.done",
                    json!({"model": name, "li_layer": b.li_layer, "ig_layer": b.ig_layer, "li_ci": b.li_ci,
                           "ig_ci": b.ig_ci, "accepted": b.accepted, "failed_iterations": b.failed_iterations}),
                );
                plot.boundaries = Some((b.li_layer, b.ig_layer));
                let family = cfg.families.get(&name).cloned().unwrap_or_else(|| infer_family(&name));
                detected.records.push(ModelRecord::new(name.clone(), family, b, None)?);
            }
            Err(e) if e.is_insufficient_peaks() => {
                log::error!("{name}: {e}");
                detected.failed.push(name.clone());
            }
            Err(e) => return Err(e.into()),
        }
        detected.curves.push(plot);
    }
    Ok(detected)
}

fn score_step(cfg: &RunConfig, out: &mut Outputs) -> Result<InterventionReport> {
    let inputs = &cfg.interventions;
    let baseline = GenerationCorpus::load(inputs.baseline.as_ref().expect("validated"), ScaleTag::Baseline, 0.0)?;
    let treated = inputs
        .treated
        .iter()
        .map(|(tag, p)| GenerationCorpus::load(p, *tag, inputs.sigma))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let service: Option<Box<dyn GrammarService>> = match (&inputs.grammar_fixture, &inputs.grammar_url) {
        (Some(f), _) => Some(Box::new(ReplayService::load(f)?)),
        (None, Some(url)) => Some(Box::new(
            HttpGrammarService::new(url)
                .with_retries(inputs.retries, std::time::Duration::from_millis(250))
                .with_max_in_flight(inputs.max_in_flight),
        )),
        (None, None) => None,
    };
    let report = intervention_report(&baseline, &treated, service.as_deref(), cfg.seed)?;
    for n in &report.notes {
        log::warn!("{n}");
    }
    out.write(cfg.output_dir.join("intervention_report.json"), &report.to_json())?;
    logging::event(
        "score.done",
        json!({"scales": report.metrics.keys().map(|t| t.as_str()).collect::<Vec<_>>(), "gamma_local": report.gamma_local}),
    );
    Ok(report)
}

fn report_step(cfg: &RunConfig, mut records: Vec<ModelRecord>, curves: &[CurvePlot], out: &mut Outputs) -> Result<()> {
    if let Some(p) = &cfg.records {
        records.extend(ModelRecord::load_all(p)?);
    }
    let mi = if cfg.oracle { vec![exact_mi_curve(&synth_spec(cfg)?)?] } else { Vec::new() };
    let mut report = Report::build(records, &mi)?;
    report.seed = Some(cfg.seed);
    for p in emit_report(&cfg.output_dir, &report, curves)? {
        out.note(&p);
    }
    for v in report.predictions.iter().chain(&report.oracle) {
        logging::event("report.verdict", serde_json::to_value(v).expect("serializes"));
    }
    Ok(())
}

fn dispatch(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    match cfg.command {
        Command::Synth => synth_step(cfg, out).map(|_| ()),
        Command::Score => score_step(cfg, out).map(|_| ()),
        Command::Report => report_step(cfg, Vec::new(), &[], out),
        Command::Detect => {
            let d = detect_step(cfg, &cfg.dumps, out)?;
            if d.failed.is_empty() {
                Ok(())
            } else {
                Err(RunError::InsufficientPeaks(d.failed))
            }
        }
        Command::All => {
            let dumps = if cfg.dumps.is_empty() { vec![synth_step(cfg, out)?] } else { cfg.dumps.clone() };
            let mut d = detect_step(cfg, &dumps, out)?;
            if cfg.interventions.baseline.is_some() {
                let rep = score_step(cfg, out)?;
                match d.records.as_mut_slice() {
                    [only] => only.intervention = Some(rep),
                    _ => log::warn!("intervention report not attached: {} detected models", d.records.len()),
                }
            }
            report_step(cfg, d.records, &d.curves, out)?;
            if d.failed.is_empty() {
                Ok(())
            } else {
                Err(RunError::InsufficientPeaks(d.failed))
            }
        }
    }
}

#[derive(Serialize)]
struct RunMeta<'a> {
    command: Command,
    version: &'static str,
    seed: u64,
    config: &'a std::collections::BTreeMap<String, Value>,
    wall_time_seconds: f64,
    exit_code: i32,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<Value>,
    outputs: &'a [String],
}

/// Runs a validated configuration and returns the process exit code.
///
/// Every file goes under `cfg.output_dir`, ending with `run_meta.json`.
pub fn run(cfg: &RunConfig) -> i32 {
    let started = Instant::now();
    if let Err(e) = std::fs::create_dir_all(&cfg.output_dir) {
        eprintln!("error[IoError]: {}: {e}", cfg.output_dir.display());
        return 1;
    }
    let events = cfg.json_logs.then(|| cfg.output_dir.join("events.jsonl"));
    if let Err(e) = logging::start(cfg.log_level, events.as_deref()) {
        eprintln!("error[IoError]: events.jsonl: {e}");
        return 1;
    }
    let mut out = Outputs {
        root: cfg.output_dir.clone(),
        written: Vec::new(),
    };
    if let Some(p) = &events {
        out.note(p);
    }
    let result = match cfg.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(cfg, &mut out)),
            Err(e) => Err(RunError::Io {
                path: "thread pool".into(),
                source: std::io::Error::other(e),
            }),
        },
        None => dispatch(cfg, &mut out),
    };
    let (code, error) = match &result {
        Ok(()) => (0, None),
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            logging::machine_event("run.error", json!({"kind": e.kind(), "message": e.to_string()}));
            (e.exit_code(), Some(json!({"kind": e.kind(), "message": e.to_string()})))
        }
    };
    out.written.push("run_meta.json".into());
    let meta = RunMeta {
        command: cfg.command,
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        config: &cfg.echo,
        wall_time_seconds: started.elapsed().as_secs_f64(),
        exit_code: code,
        error,
        outputs: &out.written,
    };
    let meta_path = cfg.output_dir.join("run_meta.json");
    let code = match std::fs::write(&meta_path, serde_json::to_string_pretty(&meta).expect("serializes")) {
        Ok(()) => code,
        Err(e) => {
            eprintln!("error[IoError]: {}: {e}", meta_path.display());
            if code == 0 {
                1
            } else {
                code
            }
        }
    };
    logging::finish();
    code
}
