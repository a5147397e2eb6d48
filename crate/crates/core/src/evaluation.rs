//! Drag-prediction metrics, baseline deltas, direction accuracy, trend
//! reports and their CSV exports.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One drag count in drag-coefficient units.
pub const DRAG_COUNT: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("non-finite value for sample {0}")]
    NonFinite(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error on {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub sample_id: String,
    pub project: String,
    pub baseline_group: String,
    pub cd_true: f64,
    pub cd_pred: f64,
}

impl EvalPair {
    pub fn abs_error(&self) -> f64 {
        (self.cd_true - self.cd_pred).abs()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRef {
    pub baseline_group: String,
    pub cd_baseline_true: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Quadrant {
    Q1,
    Q2,
    Q3,
    Q4,
    Axis,
}

impl Quadrant {
    pub fn of(delta_true: f64, delta_pred: f64) -> Quadrant {
        match (sign(delta_true), sign(delta_pred)) {
            (1, 1) => Quadrant::Q1,
            (-1, 1) => Quadrant::Q2,
            (-1, -1) => Quadrant::Q3,
            (1, -1) => Quadrant::Q4,
            _ => Quadrant::Axis,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Quadrant::Q1 => "1",
            Quadrant::Q2 => "2",
            Quadrant::Q3 => "3",
            Quadrant::Q4 => "4",
            Quadrant::Axis => "axis",
        }
    }
}

/// -1, 0 or +1; exact zero only.
pub fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRecord {
    pub sample_id: String,
    pub project: String,
    pub baseline_group: String,
    pub delta_true: f64,
    pub delta_pred: f64,
    pub direction_correct: bool,
    pub quadrant: Quadrant,
}

fn check_finite(pairs: &[EvalPair]) -> Result<()> {
    match pairs.iter().find(|p| !(p.cd_true.is_finite() && p.cd_pred.is_finite())) {
        Some(p) => Err(EvalError::NonFinite(p.sample_id.clone())),
        None => Ok(()),
    }
}

pub fn mae(pairs: &[EvalPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(EvalError::Empty("mae needs at least one pair"));
    }
    check_finite(pairs)?;
    Ok(pairs.iter().map(EvalPair::abs_error).sum::<f64>() / pairs.len() as f64)
}

pub fn maxae(pairs: &[EvalPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(EvalError::Empty("maxae needs at least one pair"));
    }
    check_finite(pairs)?;
    Ok(pairs.iter().map(EvalPair::abs_error).fold(0.0, f64::max))
}

/// Deltas against the true baseline value. Pairs whose group has no
/// baseline are skipped; their ids come back in the second vector.
pub fn compute_deltas(pairs: &[EvalPair], baselines: &[BaselineRef]) -> (Vec<DeltaRecord>, Vec<String>) {
    let base: HashMap<&str, f64> = baselines
        .iter()
        .map(|b| (b.baseline_group.as_str(), b.cd_baseline_true))
        .collect();
    let mut records = Vec::with_capacity(pairs.len());
    let mut excluded = Vec::new();
    for p in pairs {
        match base.get(p.baseline_group.as_str()) {
            Some(&b) => {
                let (dt, dp) = (p.cd_true - b, p.cd_pred - b);
                records.push(DeltaRecord {
                    sample_id: p.sample_id.clone(),
                    project: p.project.clone(),
                    baseline_group: p.baseline_group.clone(),
                    delta_true: dt,
                    delta_pred: dp,
                    direction_correct: sign(dt) == sign(dp),
                    quadrant: Quadrant::of(dt, dp),
                });
            }
            None => {
                log::warn!(
                    "sample {} excluded from direction accuracy: group {} has no baseline",
                    p.sample_id,
                    p.baseline_group
                );
                excluded.push(p.sample_id.clone());
            }
        }
    }
    (records, excluded)
}

/// Percentage of records whose predicted delta has the true delta's sign.
pub fn dpa(records: &[DeltaRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(EvalError::Empty("dpa needs at least one delta record"));
    }
    let hits = records.iter().filter(|r| r.direction_correct).count();
    Ok(100.0 * hits as f64 / records.len() as f64)
}

/// DPA over records with `|delta_true| >= min_abs_delta`.
pub fn dpa_above(records: &[DeltaRecord], min_abs_delta: f64) -> Result<f64> {
    let kept: Vec<DeltaRecord> = records
        .iter()
        .filter(|r| r.delta_true.abs() >= min_abs_delta)
        .cloned()
        .collect();
    dpa(&kept)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub label: String,
    pub n: usize,
    pub mae: f64,
    pub maxae: f64,
    /// `None` when no sample of the row has a baseline.
    pub dpa: Option<f64>,
    pub n_dpa: usize,
}

fn metric_row(label: &str, pairs: &[EvalPair], records: &[DeltaRecord]) -> Result<MetricRow> {
    Ok(MetricRow {
        label: label.to_string(),
        n: pairs.len(),
        mae: mae(pairs)?,
        maxae: maxae(pairs)?,
        dpa: dpa(records).ok(),
        n_dpa: records.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendPoint {
    pub sample_id: String,
    pub cd_true: f64,
    pub cd_pred: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupTrend {
    pub project: String,
    pub baseline_group: String,
    pub cd_baseline_true: Option<f64>,
    /// Ordered by true drag.
    pub samples: Vec<TrendPoint>,
    pub pred_range: f64,
    /// Prediction range below one drag count.
    pub near_constant: bool,
}

/// Per-group samples for groups with at least `min_group_size` pairs.
pub fn group_trend_report(pairs: &[EvalPair], baselines: &[BaselineRef], min_group_size: usize) -> Vec<GroupTrend> {
    let base: HashMap<&str, f64> = baselines
        .iter()
        .map(|b| (b.baseline_group.as_str(), b.cd_baseline_true))
        .collect();
    let mut groups: BTreeMap<(&str, &str), Vec<&EvalPair>> = BTreeMap::new();
    for p in pairs {
        groups.entry((p.project.as_str(), p.baseline_group.as_str())).or_default().push(p);
    }
    groups
        .into_iter()
        .filter(|(_, v)| v.len() >= min_group_size.max(1))
        .map(|((project, group), members)| {
            let mut samples: Vec<TrendPoint> = members
                .iter()
                .map(|p| TrendPoint {
                    sample_id: p.sample_id.clone(),
                    cd_true: p.cd_true,
                    cd_pred: p.cd_pred,
                })
                .collect();
            samples.sort_by(|a, b| a.cd_true.total_cmp(&b.cd_true).then_with(|| a.sample_id.cmp(&b.sample_id)));
            let lo = samples.iter().map(|s| s.cd_pred).fold(f64::INFINITY, f64::min);
            let hi = samples.iter().map(|s| s.cd_pred).fold(f64::NEG_INFINITY, f64::max);
            let range = hi - lo;
            GroupTrend {
                project: project.to_string(),
                baseline_group: group.to_string(),
                cd_baseline_true: base.get(group).copied(),
                samples,
                pred_range: range,
                near_constant: range < DRAG_COUNT,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: MetricRow,
    /// Sorted by project name.
    pub projects: Vec<MetricRow>,
    pub pairs: Vec<EvalPair>,
    pub deltas: Vec<DeltaRecord>,
    /// Samples left out of direction accuracy for lack of a baseline.
    pub excluded: Vec<String>,
    pub trends: Vec<GroupTrend>,
}

pub fn build_report(pairs: &[EvalPair], baselines: &[BaselineRef], min_group_size: usize) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(EvalError::Empty("evaluation set is empty"));
    }
    check_finite(pairs)?;
    let (deltas, excluded) = compute_deltas(pairs, baselines);
    let overall = metric_row("overall", pairs, &deltas)?;
    let mut names: Vec<&str> = pairs.iter().map(|p| p.project.as_str()).collect();
    names.sort();
    names.dedup();
    let projects = names
        .into_iter()
        .map(|name| {
            let ps: Vec<EvalPair> = pairs.iter().filter(|p| p.project == name).cloned().collect();
            let ds: Vec<DeltaRecord> = deltas.iter().filter(|d| d.project == name).cloned().collect();
            metric_row(name, &ps, &ds)
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        overall,
        projects,
        pairs: pairs.to_vec(),
        deltas,
        excluded,
        trends: group_trend_report(pairs, baselines, min_group_size),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Counts,
    Raw,
}

impl std::str::FromStr for Unit {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "counts" => Ok(Unit::Counts),
            "raw" => Ok(Unit::Raw),
            other => Err(format!("unknown unit `{other}` (expected counts or raw)")),
        }
    }
}

fn fmt_value(v: f64, unit: Unit) -> String {
    match unit {
        Unit::Counts => format!("{:.1}", v / DRAG_COUNT),
        Unit::Raw => format!("{v:.6}"),
    }
}

/// Plain-text metric table: one row per project, then the overall row.
pub fn format_report(report: &EvalReport, unit: Unit) -> String {
    let unit_name = match unit {
        Unit::Counts => "drag counts",
        Unit::Raw => "raw c_d",
    };
    let mut s = String::new();
    let _ = writeln!(s, "MAE and MaxAE in {unit_name}; DPA in percent");
    let _ = writeln!(s, "{:<12} {:>5} {:>10} {:>10} {:>8}", "project", "n", "MAE", "MaxAE", "DPA");
    let row = |s: &mut String, r: &MetricRow| {
        let dpa = r.dpa.map_or("-".to_string(), |d| format!("{d:.1}"));
        let _ = writeln!(
            s,
            "{:<12} {:>5} {:>10} {:>10} {:>8}",
            r.label,
            r.n,
            fmt_value(r.mae, unit),
            fmt_value(r.maxae, unit),
            dpa
        );
    };
    for r in &report.projects {
        row(&mut s, r);
    }
    row(&mut s, &report.overall);
    if !report.excluded.is_empty() {
        let _ = writeln!(s, "excluded from DPA (no baseline): {}", report.excluded.join(", "));
    }
    let flagged: Vec<&str> = report
        .trends
        .iter()
        .filter(|t| t.near_constant)
        .map(|t| t.baseline_group.as_str())
        .collect();
    let _ = writeln!(
        s,
        "trend groups: {} ({} with near-constant predictions{})",
        report.trends.len(),
        flagged.len(),
        if flagged.is_empty() { String::new() } else { format!(": {}", flagged.join(", ")) }
    );
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub report: PathBuf,
    pub correlation: PathBuf,
    pub deltas: PathBuf,
    pub trends: PathBuf,
}

impl ReportFiles {
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let d = dir.as_ref();
        Self {
            report: d.join("report.txt"),
            correlation: d.join("correlation.csv"),
            deltas: d.join("deltas.csv"),
            trends: d.join("trends.csv"),
        }
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|source| EvalError::Csv {
        path: path.display().to_string(),
        source,
    })
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> EvalError + '_ {
    move |source| EvalError::Csv {
        path: path.display().to_string(),
        source,
    }
}

/// Writes the text table and the three CSV exports.
pub fn render_report(report: &EvalReport, unit: Unit, files: &ReportFiles) -> Result<String> {
    if report.pairs.is_empty() {
        return Err(EvalError::Empty("refusing to render an empty report"));
    }
    let text = format_report(report, unit);
    fs::write(&files.report, &text).map_err(|source| EvalError::Io {
        path: files.report.display().to_string(),
        source,
    })?;

    let p = &files.correlation;
    let mut w = csv_writer(p)?;
    w.write_record(["sample_id", "project", "cd_true", "cd_pred"]).map_err(csv_err(p))?;
    for r in &report.pairs {
        w.write_record([r.sample_id.clone(), r.project.clone(), r.cd_true.to_string(), r.cd_pred.to_string()])
            .map_err(csv_err(p))?;
    }
    w.flush().map_err(|e| csv_err(p)(e.into()))?;

    let p = &files.deltas;
    let mut w = csv_writer(p)?;
    w.write_record(["sample_id", "group", "delta_true", "delta_pred", "quadrant", "direction_correct"])
        .map_err(csv_err(p))?;
    for d in &report.deltas {
        w.write_record([
            d.sample_id.clone(),
            d.baseline_group.clone(),
            d.delta_true.to_string(),
            d.delta_pred.to_string(),
            d.quadrant.label().to_string(),
            d.direction_correct.to_string(),
        ])
        .map_err(csv_err(p))?;
    }
    w.flush().map_err(|e| csv_err(p)(e.into()))?;

    let p = &files.trends;
    let mut w = csv_writer(p)?;
    w.write_record(["project", "group", "sample_id", "cd_true", "cd_pred"]).map_err(csv_err(p))?;
    for t in &report.trends {
        for s in &t.samples {
            w.write_record([
                t.project.clone(),
                t.baseline_group.clone(),
                s.sample_id.clone(),
                s.cd_true.to_string(),
                s.cd_pred.to_string(),
            ])
            .map_err(csv_err(p))?;
        }
    }
    w.flush().map_err(|e| csv_err(p)(e.into()))?;
    Ok(text)
}

#[derive(Debug, Deserialize)]
struct CorrelationRow {
    sample_id: String,
    project: String,
    cd_true: f64,
    cd_pred: f64,
}

/// Reads `correlation.csv` back as pairs. The group column is not part of
/// that file, so `baseline_group` is left empty.
pub fn read_correlation_csv(path: impl AsRef<Path>) -> Result<Vec<EvalPair>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize::<CorrelationRow>()
        .map(|row| {
            let row = row.map_err(csv_err(path))?;
            Ok(EvalPair {
                sample_id: row.sample_id,
                project: row.project,
                baseline_group: String::new(),
                cd_true: row.cd_true,
                cd_pred: row.cd_pred,
            })
        })
        .collect()
}

#[derive(Debug, Deserialize)]
struct DeltaRow {
    sample_id: String,
    group: String,
    delta_true: f64,
    delta_pred: f64,
    #[allow(dead_code)]
    quadrant: String,
    direction_correct: bool,
}

/// Reads `deltas.csv` back; the project column is not part of that file.
pub fn read_deltas_csv(path: impl AsRef<Path>) -> Result<Vec<DeltaRecord>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize::<DeltaRow>()
        .map(|row| {
            let row = row.map_err(csv_err(path))?;
            Ok(DeltaRecord {
                sample_id: row.sample_id,
                project: String::new(),
                baseline_group: row.group,
                quadrant: Quadrant::of(row.delta_true, row.delta_pred),
                delta_true: row.delta_true,
                delta_pred: row.delta_pred,
                direction_correct: row.direction_correct,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(id: &str, project: &str, group: &str, t: f64, p: f64) -> EvalPair {
        EvalPair {
            sample_id: id.into(),
            project: project.into(),
            baseline_group: group.into(),
            cd_true: t,
            cd_pred: p,
        }
    }

    fn base(group: &str, v: f64) -> BaselineRef {
        BaselineRef {
            baseline_group: group.into(),
            cd_baseline_true: v,
        }
    }

    #[test]
    fn mae_example() {
        let ps = [pair("a", "P", "G", 0.250, 0.252), pair("b", "P", "G", 0.260, 0.257)];
        let m = mae(&ps).unwrap();
        assert!((m - 0.0025).abs() < 1e-15);
        assert!((m / DRAG_COUNT - 2.5).abs() < 1e-12);
        let same = [pair("a", "P", "G", 0.3, 0.3)];
        assert_eq!(mae(&same).unwrap(), 0.0);
        assert!(mae(&[]).is_err());
    }

    #[test]
    fn maxae_example() {
        let ps = [
            pair("a", "P", "G", 0.0, 0.001),
            pair("b", "P", "G", 0.0, -0.004),
            pair("c", "P", "G", 0.0, 0.002),
        ];
        assert_eq!(maxae(&ps).unwrap(), 0.004);
        assert!(maxae(&[]).is_err());
    }

    #[test]
    fn quadrants() {
        assert_eq!(Quadrant::of(0.002, 0.001), Quadrant::Q1);
        assert_eq!(Quadrant::of(-0.003, 0.002), Quadrant::Q2);
        assert_eq!(Quadrant::of(-0.003, -0.002), Quadrant::Q3);
        assert_eq!(Quadrant::of(0.003, -0.002), Quadrant::Q4);
        assert_eq!(Quadrant::of(0.0, 0.002), Quadrant::Axis);
    }

    #[test]
    fn deltas_use_true_baseline() {
        let ps = [
            pair("a", "P", "G", 0.25, 0.26),
            pair("b", "P", "H", 0.25, 0.26),
            pair("c", "P", "G", 0.24, 0.2401),
        ];
        let (ds, ex) = compute_deltas(&ps, &[base("G", 0.24)]);
        assert_eq!(ex, vec!["b".to_string()]);
        assert_eq!(ds.len(), 2);
        assert_eq!(ds[1].quadrant, Quadrant::Axis);
        assert!(!ds[1].direction_correct);
        assert!(ds[0].direction_correct);
    }

    #[test]
    fn dpa_example() {
        let b = 0.25;
        let ps = [
            pair("a", "P", "G", b + 0.002, b + 0.001),
            pair("b", "P", "G", b - 0.001, b + 0.002),
            pair("c", "P", "G", b + 0.0005, b + 0.0001),
        ];
        let (ds, _) = compute_deltas(&ps, &[base("G", b)]);
        assert!((dpa(&ds).unwrap() - 200.0 / 3.0).abs() < 1e-9);
        let zero = [pair("z", "P", "G", b, b)];
        let (ds, _) = compute_deltas(&zero, &[base("G", b)]);
        assert_eq!(dpa(&ds).unwrap(), 100.0);
        assert!(dpa(&[]).is_err());
    }

    #[test]
    fn trends_filter_and_flag() {
        let ps = [
            pair("a", "P", "G1", 0.25, 0.26),
            pair("b", "P", "G2", 0.25, 0.2600),
            pair("c", "P", "G2", 0.27, 0.2600),
            pair("d", "P", "G3", 0.25, 0.250),
            pair("e", "P", "G3", 0.26, 0.255),
        ];
        let t = group_trend_report(&ps, &[], 2);
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].baseline_group, "G2");
        assert!(t[0].near_constant);
        assert!(!t[1].near_constant);
        assert!((t[1].pred_range - 0.005).abs() < 1e-12);
    }

    #[test]
    fn overall_is_weighted_project_mean() {
        let ps = [
            pair("a", "P1", "G", 0.25, 0.251),
            pair("b", "P1", "G", 0.25, 0.254),
            pair("c", "P2", "H", 0.30, 0.290),
        ];
        let r = build_report(&ps, &[], 2).unwrap();
        let weighted: f64 = r.projects.iter().map(|p| p.mae * p.n as f64).sum::<f64>() / r.overall.n as f64;
        assert!((weighted - r.overall.mae).abs() < 1e-15);
        assert_eq!(r.projects.iter().map(|p| p.n).sum::<usize>(), 3);
        assert!(r.overall.dpa.is_none());
        assert!(build_report(&[], &[], 2).is_err());
    }
}
