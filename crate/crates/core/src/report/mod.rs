//! Cross-model aggregation, prediction verdicts and output artifacts.

mod svg;

pub use svg::curve_svg;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interventions::{InterventionReport, ScaleTag, TIER3_BRITTLENESS_RATIO};
use crate::signals::BoundaryResult;
use crate::synth::MiCurve;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("layer {layer} outside 0..={num_layers}")]
    OutOfRange { layer: usize, num_layers: usize },
    #[error("coefficient of variation undefined for zero mean")]
    ZeroMean,
    #[error("need at least {min} values, got {actual}")]
    TooFew { min: usize, actual: usize },
    #[error("invalid record {model}: {reason}")]
    InvalidRecord { model: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, ReportError>;

/// Relative depth `layer / num_layers` as a fraction.
pub fn relative_position(layer: usize, num_layers: usize) -> Result<f64> {
    if num_layers == 0 || layer > num_layers {
        return Err(ReportError::OutOfRange { layer, num_layers });
    }
    Ok(layer as f64 / num_layers as f64)
}

/// Relative depth in percent, rounded half-up to one decimal.
///
/// The rounding is done in integer arithmetic, so `2 / 32 = 6.25 %` becomes
/// `6.3` regardless of binary representation.
pub fn relative_percent(layer: usize, num_layers: usize) -> Result<f64> {
    relative_position(layer, num_layers)?;
    let (l, n) = (layer as u128, num_layers as u128);
    let tenths = (2 * 1000 * l + n) / (2 * n);
    Ok(tenths as f64 / 10.0)
}

/// Rounds half away from zero to `decimals` places.
pub fn round_to(x: f64, decimals: i32) -> f64 {
    let m = 10f64.powi(decimals);
    (x * m).round() / m
}

/// Population standard deviation divided by the mean.
pub fn coefficient_of_variation(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(ReportError::TooFew {
            min: 2,
            actual: values.len(),
        });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return Err(ReportError::ZeroMean);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt() / mean.abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub model_name: String,
    pub family: String,
    pub num_layers: usize,
    pub boundary: BoundaryResult,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intervention: Option<InterventionReport>,
}

impl ModelRecord {
    pub fn new(
        model_name: impl Into<String>,
        family: impl Into<String>,
        boundary: BoundaryResult,
        intervention: Option<InterventionReport>,
    ) -> Result<Self> {
        let r = ModelRecord {
            model_name: model_name.into(),
            family: family.into(),
            num_layers: boundary.num_layers,
            boundary,
            intervention,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| {
            Err(ReportError::InvalidRecord {
                model: self.model_name.clone(),
                reason,
            })
        };
        if self.family.trim().is_empty() {
            return bad("family is empty".into());
        }
        if self.boundary.num_layers != self.num_layers {
            return bad(format!(
                "boundary computed for {} layers, record says {}",
                self.boundary.num_layers, self.num_layers
            ));
        }
        if self.boundary.li_layer >= self.num_layers || self.boundary.ig_layer >= self.num_layers {
            return bad(format!(
                "boundaries ({}, {}) not below {} layers",
                self.boundary.li_layer, self.boundary.ig_layer, self.num_layers
            ));
        }
        Ok(())
    }

    pub fn li_percent(&self) -> f64 {
        relative_percent(self.boundary.li_layer, self.num_layers).expect("validated record")
    }

    pub fn ig_percent(&self) -> f64 {
        relative_percent(self.boundary.ig_layer, self.num_layers).expect("validated record")
    }

    pub fn load_all(path: impl AsRef<Path>) -> Result<Vec<ModelRecord>> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ReportError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut records: Vec<ModelRecord> = serde_json::from_str(&text).map_err(|source| ReportError::Json {
            path: path.display().to_string(),
            source,
        })?;
        for r in &mut records {
            r.validate()?;
            if let Some(rep) = r.intervention.as_mut() {
                // derived fields are never trusted from disk
                rep.derive_summaries().map_err(|e| ReportError::InvalidRecord {
                    model: r.model_name.clone(),
                    reason: e.to_string(),
                })?;
            }
        }
        Ok(records)
    }
}

/// Per-family summary of relative boundary positions, in percent.
///
/// Means and CVs are taken over the one-decimal percentages that appear in
/// the per-model table, so the summary row is reproducible from the table
/// itself. The CVs from unrounded positions are kept alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyStats {
    pub family: String,
    pub models: usize,
    pub mean_li_rel: f64,
    pub mean_ig_rel: f64,
    /// Absent for a single-model family.
    pub cv_li: Option<f64>,
    pub cv_ig: Option<f64>,
    pub cv_li_unrounded: Option<f64>,
    pub cv_ig_unrounded: Option<f64>,
}

fn group_by_family(records: &[ModelRecord]) -> BTreeMap<&str, Vec<&ModelRecord>> {
    let mut m: BTreeMap<&str, Vec<&ModelRecord>> = BTreeMap::new();
    for r in records {
        m.entry(r.family.as_str()).or_default().push(r);
    }
    for v in m.values_mut() {
        v.sort_by(|a, b| a.model_name.cmp(&b.model_name));
    }
    m
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn family_stats(records: &[ModelRecord]) -> Vec<FamilyStats> {
    group_by_family(records)
        .into_iter()
        .map(|(family, rs)| {
            let li: Vec<f64> = rs.iter().map(|r| r.li_percent()).collect();
            let ig: Vec<f64> = rs.iter().map(|r| r.ig_percent()).collect();
            let li_raw: Vec<f64> = rs.iter().map(|r| r.boundary.li_layer as f64 / r.num_layers as f64).collect();
            let ig_raw: Vec<f64> = rs.iter().map(|r| r.boundary.ig_layer as f64 / r.num_layers as f64).collect();
            FamilyStats {
                family: family.to_string(),
                models: rs.len(),
                mean_li_rel: mean(&li),
                mean_ig_rel: mean(&ig),
                cv_li: coefficient_of_variation(&li).ok(),
                cv_ig: coefficient_of_variation(&ig).ok(),
                cv_li_unrounded: coefficient_of_variation(&li_raw).ok(),
                cv_ig_unrounded: coefficient_of_variation(&ig_raw).ok(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PredictionId {
    #[serde(rename = "P1.1")]
    P1_1,
    #[serde(rename = "P1.2")]
    P1_2,
    #[serde(rename = "P2.1")]
    P2_1,
    #[serde(rename = "P3.1")]
    P3_1,
    #[serde(rename = "P3.2")]
    P3_2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Supported,
    Violated,
    NotEvaluable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionVerdict {
    pub prediction_id: PredictionId,
    /// Family, model, or `all`, depending on the prediction.
    pub scope: String,
    pub threshold: f64,
    pub observed: Option<f64>,
    pub verdict: Verdict,
    pub detail: String,
}

/// Relative L-I boundary CV below this counts as architecture-stable.
pub const CV_STABILITY_THRESHOLD: f64 = 0.2;
/// Intra-family I-G drift above this many percentage points counts as plastic.
pub const IG_DRIFT_THRESHOLD_PP: f64 = 30.0;
/// Slope gap over within-scale variation required at every planted boundary.
pub const MI_KINK_RATIO: f64 = 5.0;

fn verdict(id: PredictionId, scope: &str, threshold: f64, observed: Option<f64>, v: Verdict, detail: String) -> PredictionVerdict {
    PredictionVerdict {
        prediction_id: id,
        scope: scope.to_string(),
        threshold,
        observed,
        verdict: v,
        detail,
    }
}

fn supported_if(ok: bool) -> Verdict {
    if ok {
        Verdict::Supported
    } else {
        Verdict::Violated
    }
}

/// Evaluates the tiered predictions on real-model records.
///
/// The output depends only on the set of records, not their order. The MI
/// prediction needs an exact information curve and is always
/// `not_evaluable` here; see [`evaluate_mi_kinks`].
pub fn evaluate_predictions(records: &[ModelRecord]) -> Vec<PredictionVerdict> {
    let families = group_by_family(records);
    let mut out = Vec::new();

    // P1.1: per-family CV of the L-I relative position
    for (family, rs) in &families {
        let li: Vec<f64> = rs.iter().map(|r| r.li_percent()).collect();
        out.push(match coefficient_of_variation(&li) {
            Ok(cv) => verdict(
                PredictionId::P1_1,
                family,
                CV_STABILITY_THRESHOLD,
                Some(cv),
                supported_if(cv < CV_STABILITY_THRESHOLD),
                format!("CV of L-I position over {} models", rs.len()),
            ),
            Err(e) => verdict(PredictionId::P1_1, family, CV_STABILITY_THRESHOLD, None, Verdict::NotEvaluable, e.to_string()),
        });
    }

    out.push(verdict(
        PredictionId::P1_2,
        "all",
        MI_KINK_RATIO,
        None,
        Verdict::NotEvaluable,
        "mutual information is not estimable on real dumps; see the oracle section".into(),
    ));

    // P2.1: the intermediate scale carries the largest structure delta
    let mut with_deltas: Vec<(&ModelRecord, [f64; 3])> = records
        .iter()
        .filter_map(|r| {
            let rep = r.intervention.as_ref()?;
            let d = |s| rep.structure_delta(s);
            Some((r, [d(ScaleTag::Local)?, d(ScaleTag::Intermediate)?, d(ScaleTag::Global)?]))
        })
        .collect();
    with_deltas.sort_by(|a, b| a.0.model_name.cmp(&b.0.model_name));
    if with_deltas.is_empty() {
        out.push(verdict(
            PredictionId::P2_1,
            "all",
            0.0,
            None,
            Verdict::NotEvaluable,
            "no record has structure deltas for all three scales".into(),
        ));
    }
    for (r, [l, i, g]) in with_deltas {
        let margin = i - l.max(g);
        out.push(verdict(
            PredictionId::P2_1,
            &r.model_name,
            0.0,
            Some(margin),
            supported_if(margin > 0.0),
            format!("structure delta I {i:+.2} % vs L {l:+.2} %, G {g:+.2} %"),
        ));
    }

    // P3.1: local brittleness differs across families by more than the factor
    let gammas: Vec<(&str, f64)> = families
        .iter()
        .filter_map(|(family, rs)| {
            let g: Vec<f64> = rs.iter().filter_map(|r| r.intervention.as_ref()?.gamma_local).collect();
            (!g.is_empty()).then(|| (*family, mean(&g)))
        })
        .collect();
    out.push(if gammas.len() < 2 {
        verdict(
            PredictionId::P3_1,
            "all",
            TIER3_BRITTLENESS_RATIO,
            None,
            Verdict::NotEvaluable,
            format!("local brittleness available for {} famil(ies), need 2", gammas.len()),
        )
    } else {
        let (hi_f, hi) = gammas.iter().copied().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        let (lo_f, lo) = gammas.iter().copied().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        if lo == 0.0 {
            verdict(
                PredictionId::P3_1,
                "all",
                TIER3_BRITTLENESS_RATIO,
                None,
                supported_if(hi > 0.0),
                format!("{lo_f} has zero local brittleness, {hi_f} has {hi:.3}"),
            )
        } else {
            let ratio = hi / lo;
            verdict(
                PredictionId::P3_1,
                "all",
                TIER3_BRITTLENESS_RATIO,
                Some(ratio),
                supported_if(ratio > TIER3_BRITTLENESS_RATIO),
                format!("{hi_f} {hi:.3} over {lo_f} {lo:.3}"),
            )
        }
    });

    // P3.2: some family's I-G position drifts by more than the threshold
    let drifts: Vec<(&str, f64)> = families
        .iter()
        .filter(|(_, rs)| rs.len() >= 2)
        .map(|(family, rs)| {
            let ig: Vec<f64> = rs.iter().map(|r| r.ig_percent()).collect();
            let spread = ig.iter().cloned().fold(f64::MIN, f64::max) - ig.iter().cloned().fold(f64::MAX, f64::min);
            (*family, round_to(spread, 1))
        })
        .collect();
    out.push(match drifts.iter().copied().max_by(|a, b| a.1.total_cmp(&b.1)) {
        None => verdict(
            PredictionId::P3_2,
            "all",
            IG_DRIFT_THRESHOLD_PP,
            None,
            Verdict::NotEvaluable,
            "no family has two or more models".into(),
        ),
        Some((family, spread)) => verdict(
            PredictionId::P3_2,
            "all",
            IG_DRIFT_THRESHOLD_PP,
            Some(spread),
            supported_if(spread > IG_DRIFT_THRESHOLD_PP),
            format!("largest I-G spread {spread:.1} pp in {family}"),
        ),
    });
    out
}

/// The MI prediction on an exact synthetic information curve.
///
/// Observed value is the smallest ratio of slope gap to within-scale
/// variation over the curve's boundaries. A curve that increases anywhere
/// violates the processing inequality and is reported as violated.
pub fn evaluate_mi_kinks(curve: &MiCurve) -> PredictionVerdict {
    let increases = curve.slopes.iter().any(|s| *s > 1e-12);
    let var = curve.within_scale_variation();
    let usable: Vec<usize> = curve.boundaries.iter().copied().filter(|&b| b >= 2 && b < curve.values.len()).collect();
    if usable.is_empty() {
        return verdict(
            PredictionId::P1_2,
            "synthetic",
            MI_KINK_RATIO,
            None,
            Verdict::NotEvaluable,
            "no boundary has a slope on both sides".into(),
        );
    }
    let min_gap = usable.iter().map(|&b| curve.slope_gap(b)).fold(f64::INFINITY, f64::min);
    let (observed, ok) = if var > 0.0 {
        let r = min_gap / var;
        (Some(r), r > MI_KINK_RATIO)
    } else {
        (None, min_gap > 0.0)
    };
    verdict(
        PredictionId::P1_2,
        "synthetic",
        MI_KINK_RATIO,
        observed,
        supported_if(ok && !increases),
        format!(
            "smallest slope gap {min_gap:.3e} nats at boundaries {usable:?}, within-scale variation {var:.3e}{}",
            if increases { "; curve increases somewhere" } else { "" }
        ),
    )
}

/// One evidence curve to be drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePlot {
    pub model_name: String,
    /// `E` per gap; gap `k` sits between layers `k` and `k + 1`.
    pub evidence: Vec<f64>,
    pub boundaries: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: String,
    /// Seed of the run that produced the records, when there was one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub records: Vec<ModelRecord>,
    pub families: Vec<FamilyStats>,
    pub predictions: Vec<PredictionVerdict>,
    /// Verdicts that rest on synthetic ground truth rather than model dumps.
    pub oracle: Vec<PredictionVerdict>,
}

impl Report {
    pub fn build(records: Vec<ModelRecord>, mi_curves: &[MiCurve]) -> Result<Self> {
        records.iter().try_for_each(ModelRecord::validate)?;
        let mut records = records;
        records.sort_by(|a, b| (&a.family, &a.model_name).cmp(&(&b.family, &b.model_name)));
        Ok(Report {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: None,
            families: family_stats(&records),
            predictions: evaluate_predictions(&records),
            oracle: mi_curves.iter().map(evaluate_mi_kinks).collect(),
            records,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Per-model rows followed by one `mean` row per family.
    pub fn tables_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let cv_of: BTreeMap<&str, &FamilyStats> = self.families.iter().map(|f| (f.family.as_str(), f)).collect();
        let fmt_cv = |c: Option<f64>| c.map(|v| format!("{v:.2}")).unwrap_or_default();
        w.write_record(["model", "family", "layers", "li_abs", "ig_abs", "li_rel_pct", "ig_rel_pct", "cv_li", "cv_ig"])
            .expect("in-memory write");
        for r in &self.records {
            let f = cv_of[r.family.as_str()];
            w.write_record([
                r.model_name.clone(),
                r.family.clone(),
                r.num_layers.to_string(),
                r.boundary.li_layer.to_string(),
                r.boundary.ig_layer.to_string(),
                format!("{:.1}", r.li_percent()),
                format!("{:.1}", r.ig_percent()),
                fmt_cv(f.cv_li),
                fmt_cv(f.cv_ig),
            ])
            .expect("in-memory write");
        }
        for f in &self.families {
            w.write_record([
                "mean".to_string(),
                f.family.clone(),
                String::new(),
                String::new(),
                String::new(),
                format!("{:.1}", round_to(f.mean_li_rel, 1)),
                format!("{:.1}", round_to(f.mean_ig_rel, 1)),
                fmt_cv(f.cv_li),
                fmt_cv(f.cv_ig),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }
}

fn write(path: PathBuf, contents: &str) -> Result<PathBuf> {
    std::fs::write(&path, contents).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(path)
}

/// File name used for a model's curve, keeping only filename-safe characters.
pub fn curve_file_name(model_name: &str) -> String {
    let safe: String = model_name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect();
    format!("curve_{safe}.svg")
}

/// Writes `report.json`, `tables.csv` and one SVG per curve into `out_dir`.
pub fn emit_report(out_dir: impl AsRef<Path>, report: &Report, curves: &[CurvePlot]) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|source| ReportError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut written = vec![
        write(dir.join("report.json"), &report.to_json())?,
        write(dir.join("tables.csv"), &report.tables_csv())?,
    ];
    for c in curves {
        written.push(write(dir.join(curve_file_name(&c.model_name)), &curve_svg(c))?);
    }
    Ok(written)
}
