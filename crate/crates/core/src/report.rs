//! Turns run records into analytic artifacts: summary tables, reliability
//! diagrams with per-bin density, accuracy/calibration correlations, and
//! cross-strategy aggregation.
//!
//! Output files are UTF-8 with LF line endings and a deterministic field
//! order, so repeat runs over the same records are byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::metrics::{
    build_reliability, ece, mce, outcome_summary, pearson_r, ConfidenceScore, EvalOutcome,
    MetricsError, ReliabilityBin, ReliabilityDiagram,
};
use crate::pipeline::{read_records, CompletionStatus, PipelineError, RunRecord, StageKind};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const SUMMARY_AGGREGATED_FILE: &str = "summary_aggregated.csv";
pub const CORRELATION_FILE: &str = "correlation.csv";

pub const RELIABILITY_CSV_HEADER: &str =
    "bin_lower,bin_upper,count,density,mean_confidence,accuracy";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("selection has no completed records")]
    EmptySelection,
    #[error("invalid aggregation: {0}")]
    InvalidAggregation(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad reliability csv: {0}")]
    BadCsv(String),
}

fn io_error(context: String) -> impl FnOnce(std::io::Error) -> ReportError {
    move |source| ReportError::Io { context, source }
}

/// Record-key dimensions that summaries can group by.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupDim {
    Model,
    Dataset,
    Strategy,
    Effort,
    Stage,
    IuqLevel,
}

impl GroupDim {
    pub const ALL: [GroupDim; 6] = [
        GroupDim::Model,
        GroupDim::Dataset,
        GroupDim::Strategy,
        GroupDim::Effort,
        GroupDim::Stage,
        GroupDim::IuqLevel,
    ];

    pub fn key(&self) -> &'static str {
        match self {
            GroupDim::Model => "model",
            GroupDim::Dataset => "dataset",
            GroupDim::Strategy => "strategy",
            GroupDim::Effort => "effort",
            GroupDim::Stage => "stage",
            GroupDim::IuqLevel => "iuq_level",
        }
    }

    pub fn parse(name: &str) -> Option<GroupDim> {
        Self::ALL.iter().copied().find(|d| d.key() == name)
    }
}

/// Group identity of a summary row; dimensions not grouped by (or collapsed
/// by aggregation) are absent.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GroupKey {
    pub model: Option<String>,
    pub dataset: Option<String>,
    pub strategy: Option<String>,
    pub effort: Option<String>,
    pub stage: Option<String>,
    pub iuq_level: Option<String>,
}

impl GroupKey {
    fn from_record(record: &RunRecord, dims: &[GroupDim]) -> GroupKey {
        let mut key = GroupKey::default();
        for dim in dims {
            match dim {
                GroupDim::Model => key.model = Some(record.key.model.clone()),
                GroupDim::Dataset => key.dataset = Some(record.key.dataset.clone()),
                GroupDim::Strategy => key.strategy = Some(record.key.strategy.clone()),
                GroupDim::Effort => key.effort = Some(record.key.effort.clone()),
                GroupDim::Stage => key.stage = Some(record.key.stage.key().to_string()),
                GroupDim::IuqLevel => key.iuq_level = record.key.iuq_level.clone(),
            }
        }
        key
    }

    fn cleared(&self, dim: GroupDim) -> GroupKey {
        let mut key = self.clone();
        match dim {
            GroupDim::Model => key.model = None,
            GroupDim::Dataset => key.dataset = None,
            GroupDim::Strategy => key.strategy = None,
            GroupDim::Effort => key.effort = None,
            GroupDim::Stage => key.stage = None,
            GroupDim::IuqLevel => key.iuq_level = None,
        }
        key
    }
}

/// ECE/MCE/accuracy/completion for one group of records.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub key: GroupKey,
    pub n: usize,
    pub completion: f64,
    pub accuracy: Option<f64>,
    pub ece: Option<f64>,
    pub mce: Option<f64>,
}

/// Map records to metric outcomes: completed records carry their parsed
/// confidence and (for introspection, inherited) correctness, everything
/// else is incomplete.
pub fn outcomes_of(records: &[&RunRecord]) -> Vec<EvalOutcome> {
    records
        .iter()
        .map(|record| match record.status {
            CompletionStatus::Completed => match (record.confidence_percent, record.correct) {
                (Some(percent), Some(correct)) => ConfidenceScore::from_percent(percent)
                    .map(|c| EvalOutcome::completed(c, correct))
                    .unwrap_or(EvalOutcome::Incomplete),
                _ => EvalOutcome::Incomplete,
            },
            _ => EvalOutcome::Incomplete,
        })
        .collect()
}

/// One summary row per distinct combination of the grouped dimensions.
/// Rows come out in deterministic key order.
pub fn summarize(
    records: &[RunRecord],
    dims: &[GroupDim],
    num_bins: usize,
) -> Result<Vec<SummaryRow>, ReportError> {
    let mut groups: BTreeMap<GroupKey, Vec<&RunRecord>> = BTreeMap::new();
    for record in records {
        groups
            .entry(GroupKey::from_record(record, dims))
            .or_default()
            .push(record);
    }
    let mut rows = Vec::with_capacity(groups.len());
    for (key, group) in groups {
        let outcomes = outcomes_of(&group);
        let summary = outcome_summary(&outcomes);
        let diagram = build_reliability(&outcomes, num_bins)?;
        let (ece_value, mce_value) = if diagram.total > 0 {
            (Some(ece(&diagram)?), Some(mce(&diagram)?))
        } else {
            (None, None)
        };
        rows.push(SummaryRow {
            key,
            n: summary.n_total,
            completion: summary.completion_rate,
            accuracy: summary.accuracy,
            ece: ece_value,
            mce: mce_value,
        });
    }
    Ok(rows)
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// Collapse one dimension by unweighted arithmetic mean of each metric.
/// All rows must agree on every other dimension.
pub fn aggregate_over(rows: &[SummaryRow], dim: GroupDim) -> Result<SummaryRow, ReportError> {
    let first = rows
        .first()
        .ok_or_else(|| ReportError::InvalidAggregation("no rows to aggregate".into()))?;
    let collapsed = first.key.cleared(dim);
    for row in rows {
        if row.key.cleared(dim) != collapsed {
            return Err(ReportError::InvalidAggregation(format!(
                "rows differ outside the collapsed dimension {}",
                dim.key()
            )));
        }
    }
    Ok(SummaryRow {
        key: collapsed,
        n: rows.iter().map(|r| r.n).sum(),
        completion: rows.iter().map(|r| r.completion).sum::<f64>() / rows.len() as f64,
        accuracy: mean_of(rows.iter().map(|r| r.accuracy)),
        ece: mean_of(rows.iter().map(|r| r.ece)),
        mce: mean_of(rows.iter().map(|r| r.mce)),
    })
}

/// Partition rows by every dimension except `dim`, then aggregate each
/// partition. The convenience driver behind `--aggregate`.
pub fn aggregate_partitioned(
    rows: &[SummaryRow],
    dim: GroupDim,
) -> Result<Vec<SummaryRow>, ReportError> {
    let mut partitions: BTreeMap<GroupKey, Vec<SummaryRow>> = BTreeMap::new();
    for row in rows {
        partitions
            .entry(row.key.cleared(dim))
            .or_default()
            .push(row.clone());
    }
    partitions
        .values()
        .map(|partition| aggregate_over(partition, dim))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CalibMetric {
    Ece,
    Mce,
}

impl CalibMetric {
    pub fn key(&self) -> &'static str {
        match self {
            CalibMetric::Ece => "ece",
            CalibMetric::Mce => "mce",
        }
    }
}

/// Pearson r between accuracy and a calibration metric for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationRow {
    pub model: String,
    pub metric: CalibMetric,
    pub r: f64,
    pub n_points: usize,
    /// Two points force |r| = 1; flagged so readers discount it.
    pub low_sample: bool,
    pub points: Vec<(f64, f64)>,
}

/// Per-model correlation between accuracy and ECE/MCE over per-dataset
/// aggregated rows (one point per dataset). Degenerate models are omitted
/// with a warning.
pub fn correlation_report(rows: &[SummaryRow]) -> (Vec<CorrelationRow>, Vec<String>) {
    let mut by_model: BTreeMap<String, Vec<&SummaryRow>> = BTreeMap::new();
    for row in rows {
        if let Some(model) = &row.key.model {
            by_model.entry(model.clone()).or_default().push(row);
        }
    }
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    for (model, model_rows) in by_model {
        for metric in [CalibMetric::Ece, CalibMetric::Mce] {
            let points: Vec<(f64, f64)> = model_rows
                .iter()
                .filter_map(|row| {
                    let value = match metric {
                        CalibMetric::Ece => row.ece,
                        CalibMetric::Mce => row.mce,
                    };
                    Some((row.accuracy?, value?))
                })
                .collect();
            match pearson_r(&points) {
                Ok(r) => out.push(CorrelationRow {
                    model: model.clone(),
                    metric,
                    r,
                    n_points: points.len(),
                    low_sample: points.len() == 2,
                    points,
                }),
                Err(e) => warnings.push(format!(
                    "correlation omitted for {model}/{}: {e}",
                    metric.key()
                )),
            }
        }
    }
    (out, warnings)
}

/// Fraction formatting for CSV cells: shortest round-trip form, with a
/// trailing .0 kept on integral values.
fn fmt_fraction(value: f64) -> String {
    if value.fract() == 0.0 && value.abs() < 1e15 {
        format!("{value:.1}")
    } else {
        format!("{value}")
    }
}

fn fmt_opt(value: Option<f64>) -> String {
    value.map(fmt_fraction).unwrap_or_default()
}

fn csv_field(value: &str) -> String {
    if value.contains(',') || value.contains('"') || value.contains('\n') {
        format!("\"{}\"", value.replace('"', "\"\""))
    } else {
        value.to_string()
    }
}

pub const SUMMARY_HEADER: &str =
    "model,dataset,strategy,effort,stage,iuq_level,n,completion,accuracy,ece,mce";

pub fn summary_csv_string(rows: &[SummaryRow]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for row in rows {
        let key = &row.key;
        let fields = [
            csv_field(key.model.as_deref().unwrap_or("")),
            csv_field(key.dataset.as_deref().unwrap_or("")),
            csv_field(key.strategy.as_deref().unwrap_or("")),
            csv_field(key.effort.as_deref().unwrap_or("")),
            csv_field(key.stage.as_deref().unwrap_or("")),
            csv_field(key.iuq_level.as_deref().unwrap_or("")),
            row.n.to_string(),
            fmt_fraction(row.completion),
            fmt_opt(row.accuracy),
            fmt_opt(row.ece),
            fmt_opt(row.mce),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn reliability_csv_string(diagram: &ReliabilityDiagram) -> String {
    let mut out = String::from(RELIABILITY_CSV_HEADER);
    out.push('\n');
    let densities = diagram.densities();
    for bin in &diagram.bins {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            fmt_fraction(bin.lower),
            fmt_fraction(bin.upper),
            bin.count,
            fmt_fraction(densities[bin.index]),
            fmt_opt(bin.mean_confidence),
            fmt_opt(bin.accuracy),
        ));
    }
    out
}

/// Parse a reliability CSV back into a diagram (the inverse of
/// [`reliability_csv_string`]).
pub fn parse_reliability_csv(text: &str) -> Result<ReliabilityDiagram, ReportError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| ReportError::BadCsv("empty file".into()))?;
    if header != RELIABILITY_CSV_HEADER {
        return Err(ReportError::BadCsv(format!("unexpected header {header:?}")));
    }
    let mut bins = Vec::new();
    let mut total = 0usize;
    for (index, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(ReportError::BadCsv(format!("row {index}: wrong arity")));
        }
        let parse_f64 = |s: &str, what: &str| -> Result<f64, ReportError> {
            s.parse()
                .map_err(|_| ReportError::BadCsv(format!("row {index}: bad {what} {s:?}")))
        };
        let opt = |s: &str, what: &str| -> Result<Option<f64>, ReportError> {
            if s.is_empty() {
                Ok(None)
            } else {
                parse_f64(s, what).map(Some)
            }
        };
        let count: usize = fields[2]
            .parse()
            .map_err(|_| ReportError::BadCsv(format!("row {index}: bad count")))?;
        total += count;
        bins.push(ReliabilityBin {
            index,
            lower: parse_f64(fields[0], "bin_lower")?,
            upper: parse_f64(fields[1], "bin_upper")?,
            count,
            mean_confidence: opt(fields[4], "mean_confidence")?,
            accuracy: opt(fields[5], "accuracy")?,
        });
    }
    Ok(ReliabilityDiagram { num_bins: bins.len(), bins, total })
}

fn xml_escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Reliability diagram as a standalone SVG: per-bin accuracy bars, the
/// identity diagonal, and a density cross per non-empty bin.
pub fn reliability_svg_string(diagram: &ReliabilityDiagram, title: &str) -> String {
    const WIDTH: f64 = 480.0;
    const HEIGHT: f64 = 360.0;
    const LEFT: f64 = 52.0;
    const TOP: f64 = 34.0;
    const PLOT_W: f64 = 400.0;
    const PLOT_H: f64 = 280.0;

    let x = |fraction: f64| LEFT + fraction * PLOT_W;
    let y = |fraction: f64| TOP + PLOT_H - fraction * PLOT_H;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str(&format!(
        "  <title>{}</title>\n  <text x=\"{:.1}\" y=\"20\" text-anchor=\"middle\" \
         font-family=\"sans-serif\" font-size=\"13\">{}</text>\n",
        xml_escape(title),
        LEFT + PLOT_W / 2.0,
        xml_escape(title)
    ));
    svg.push_str(&format!(
        "  <rect x=\"{LEFT}\" y=\"{TOP}\" width=\"{PLOT_W}\" height=\"{PLOT_H}\" \
         fill=\"none\" stroke=\"#333333\"/>\n"
    ));

    // Accuracy bars.
    let densities = diagram.densities();
    for bin in &diagram.bins {
        if let Some(accuracy) = bin.accuracy {
            let x0 = x(bin.lower);
            let x1 = x(bin.upper);
            let y0 = y(accuracy);
            svg.push_str(&format!(
                "  <rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" \
                 fill=\"#5b84b1\" fill-opacity=\"0.8\" stroke=\"#2f4b6e\" stroke-width=\"0.5\"/>\n",
                x0,
                y0,
                x1 - x0,
                y(0.0) - y0
            ));
        }
    }

    // Identity diagonal: perfect calibration.
    svg.push_str(&format!(
        "  <line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" \
         stroke=\"#555555\" stroke-dasharray=\"5,4\"/>\n",
        x(0.0),
        y(0.0),
        x(1.0),
        y(1.0)
    ));

    // Density crosses at bin centers.
    for bin in &diagram.bins {
        if bin.count == 0 {
            continue;
        }
        let cx = x((bin.lower + bin.upper) / 2.0);
        let cy = y(densities[bin.index]);
        svg.push_str(&format!(
            "  <path d=\"M {x0:.2} {y0:.2} L {x1:.2} {y1:.2} M {x0:.2} {y1:.2} L {x1:.2} {y0:.2}\" \
             stroke=\"#c0392b\" stroke-width=\"1.5\"/>\n",
            x0 = cx - 4.0,
            y0 = cy - 4.0,
            x1 = cx + 4.0,
            y1 = cy + 4.0,
        ));
    }

    // Axis ticks and captions.
    for tick in [0.0, 0.5, 1.0] {
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
             font-size=\"10\">{:.1}</text>\n",
            x(tick),
            TOP + PLOT_H + 14.0,
            tick
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" \
             font-size=\"10\">{:.1}</text>\n",
            LEFT - 6.0,
            y(tick) + 3.0,
            tick
        ));
    }
    svg.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"11\">confidence</text>\n",
        LEFT + PLOT_W / 2.0,
        TOP + PLOT_H + 30.0
    ));
    svg.push_str(&format!(
        "  <text x=\"14\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"11\" transform=\"rotate(-90 14 {:.1})\">accuracy / density</text>\n",
        TOP + PLOT_H / 2.0,
        TOP + PLOT_H / 2.0
    ));
    svg.push_str("</svg>\n");
    svg
}

/// Write `reliability_<label>.csv` and `.svg` for a record selection.
/// Incomplete records are excluded; an all-incomplete selection is refused.
pub fn emit_reliability(
    records: &[&RunRecord],
    num_bins: usize,
    out_dir: &Path,
    label: &str,
) -> Result<(PathBuf, PathBuf), ReportError> {
    let outcomes = outcomes_of(records);
    let diagram = build_reliability(&outcomes, num_bins)?;
    if diagram.total == 0 {
        return Err(ReportError::EmptySelection);
    }
    fs::create_dir_all(out_dir).map_err(io_error(format!("create {}", out_dir.display())))?;
    let slug = sanitize_label(label);
    let csv_path = out_dir.join(format!("reliability_{slug}.csv"));
    let svg_path = out_dir.join(format!("reliability_{slug}.svg"));
    fs::write(&csv_path, reliability_csv_string(&diagram))
        .map_err(io_error(format!("write {}", csv_path.display())))?;
    fs::write(&svg_path, reliability_svg_string(&diagram, label))
        .map_err(io_error(format!("write {}", svg_path.display())))?;
    Ok((csv_path, svg_path))
}

fn sanitize_label(label: &str) -> String {
    let mut slug: String = label
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { '-' })
        .collect();
    while slug.contains("--") {
        slug = slug.replace("--", "-");
    }
    slug.trim_matches('-').to_string()
}

pub fn correlation_csv_string(rows: &[CorrelationRow]) -> String {
    // Accuracy here is computed over completed records only; completion
    // failures are tracked by the separate completion-rate column.
    let mut out = String::from(
        "# accuracy excludes completion failures; points are per-dataset aggregates\n",
    );
    out.push_str("model,metric,n_points,low_sample,r\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            csv_field(&row.model),
            row.metric.key(),
            row.n_points,
            row.low_sample,
            fmt_fraction(row.r),
        ));
    }
    out
}

/// Everything the `report` command produces.
#[derive(Debug, Clone)]
pub struct ReportPaths {
    pub summary: PathBuf,
    pub summary_aggregated: Option<PathBuf>,
    pub correlation: PathBuf,
    pub reliability: Vec<(PathBuf, PathBuf)>,
    pub warnings: Vec<String>,
}

/// Produce the full report for a run directory: grouped summary, optional
/// aggregation, per-(model, dataset) reliability diagrams (strategies and
/// efforts pooled, introspection stages separate), and per-model
/// accuracy-vs-calibration correlations over strategy-averaged per-dataset
/// points.
pub fn run_report(
    run_dir: &Path,
    out_dir: &Path,
    num_bins: usize,
    group_dims: &[GroupDim],
    aggregate: Option<GroupDim>,
) -> Result<ReportPaths, ReportError> {
    let records = read_records(run_dir)?;
    fs::create_dir_all(out_dir).map_err(io_error(format!("create {}", out_dir.display())))?;
    let mut warnings = Vec::new();

    let rows = summarize(&records, group_dims, num_bins)?;
    let summary = out_dir.join(SUMMARY_FILE);
    fs::write(&summary, summary_csv_string(&rows))
        .map_err(io_error(format!("write {}", summary.display())))?;

    let summary_aggregated = match aggregate {
        Some(dim) => {
            let aggregated = aggregate_partitioned(&rows, dim)?;
            let path = out_dir.join(SUMMARY_AGGREGATED_FILE);
            fs::write(&path, summary_csv_string(&aggregated))
                .map_err(io_error(format!("write {}", path.display())))?;
            Some(path)
        }
        None => None,
    };

    // Reliability per model x dataset: stage-1 records pooled over
    // strategies and efforts; each introspection level separately.
    let mut selections: BTreeMap<String, Vec<&RunRecord>> = BTreeMap::new();
    for record in &records {
        let label = match (&record.key.stage, &record.key.iuq_level) {
            (StageKind::Answer, _) => {
                format!("{} {}", record.key.model, record.key.dataset)
            }
            (StageKind::Introspect, level) => format!(
                "{} {} iuq {}",
                record.key.model,
                record.key.dataset,
                level.as_deref().unwrap_or("unknown")
            ),
        };
        selections.entry(label).or_default().push(record);
    }
    let mut reliability = Vec::new();
    for (label, selection) in &selections {
        match emit_reliability(selection, num_bins, out_dir, label) {
            Ok(paths) => reliability.push(paths),
            Err(ReportError::EmptySelection) => {
                warnings.push(format!(
                    "reliability skipped for {label}: no completed records"
                ));
            }
            Err(e) => return Err(e),
        }
    }

    // Correlation over stage-1 rows: per (model, dataset), strategy-averaged.
    let answer_records: Vec<RunRecord> = records
        .iter()
        .filter(|r| r.key.stage == StageKind::Answer)
        .cloned()
        .collect();
    let per_strategy = summarize(
        &answer_records,
        &[GroupDim::Model, GroupDim::Dataset, GroupDim::Strategy],
        num_bins,
    )?;
    let per_dataset = aggregate_partitioned(&per_strategy, GroupDim::Strategy)?;
    let (correlations, mut correlation_warnings) = correlation_report(&per_dataset);
    warnings.append(&mut correlation_warnings);
    let correlation = out_dir.join(CORRELATION_FILE);
    fs::write(&correlation, correlation_csv_string(&correlations))
        .map_err(io_error(format!("write {}", correlation.display())))?;

    Ok(ReportPaths {
        summary,
        summary_aggregated,
        correlation,
        reliability,
        warnings,
    })
}
