//! Rendering of run results: branch-level MPR heatmaps, node-level MI
//! heatmaps, ranked cell listings and the plain-text summary.
//!
//! Tabular output is comma-separated with a header row and a label column.
//! Branch-level cells hold exact MPR values as reduced fractions (`82/15`,
//! or a bare integer); missing cells are empty. Images are standalone SVG:
//! one `<rect class="cell">` per value, colored by severity tier, with the
//! value and tier repeated as `data-*` attributes.
//!
//! No timestamps or other run-time state go into rendered files, so the same
//! run directory always renders to the same bytes.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use num_rational::Ratio;
use thiserror::Error;

use crate::engine::RunResult;
use crate::metrics::{
    self, classify, format_2dp, inflection_point, GridSummary, RankedCell, SeverityTier, TierBoundary,
    DEFAULT_PERSISTENCE,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReportError {
    #[error("nothing to render: the grid has no completed cells")]
    EmptySummary,
    #[error("selected cell {0}/b{1} is not a completed branch of this run")]
    UnknownSelection(String, u32),
    #[error("node-level heatmap needs at least one selected cell")]
    EmptySelection,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapKind {
    BranchLevel,
    NodeLevel,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeatmapSpec {
    pub kind: HeatmapKind,
    /// Append the row-mean column and column-mean row (branch level).
    pub include_means: bool,
    /// Print labels divided by `m`; colors always use the raw value.
    pub normalize_by: Option<u64>,
}

impl HeatmapSpec {
    pub fn branch_level() -> Self {
        Self {
            kind: HeatmapKind::BranchLevel,
            include_means: true,
            normalize_by: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub csv: String,
    pub svg: String,
}

pub fn format_ratio(r: Ratio<u64>) -> String {
    if *r.denom() == 1 {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

pub fn parse_ratio(s: &str) -> Option<Ratio<u64>> {
    match s.split_once('/') {
        Some((n, d)) => {
            let d: u64 = d.trim().parse().ok()?;
            (d != 0).then_some(())?;
            Some(Ratio::new(n.trim().parse().ok()?, d))
        }
        None => Some(Ratio::from_integer(s.trim().parse().ok()?)),
    }
}

fn to_csv(rows: &[Vec<String>]) -> String {
    let mut w = csv::WriterBuilder::new().flexible(false).from_writer(Vec::new());
    for r in rows {
        w.write_record(r).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("utf-8 fields")
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn slug(tier: SeverityTier) -> &'static str {
    match tier {
        SeverityTier::FactualError => "factual-error",
        SeverityTier::Lie => "lie",
        SeverityTier::Propaganda => "propaganda",
    }
}

const CELL_W: usize = 56;
const CELL_H: usize = 22;
const LABEL_W: usize = 300;
const HEADER_H: usize = 30;

struct SvgGrid {
    body: String,
    width: usize,
    height: usize,
}

impl SvgGrid {
    fn new(cols: &[String], rows: usize, title: &str) -> Self {
        let width = LABEL_W + CELL_W * cols.len() + 10;
        let height = HEADER_H * 2 + CELL_H * rows + 10;
        let mut body = String::new();
        let _ = writeln!(
            body,
            "<text x=\"5\" y=\"18\" font-size=\"14\" font-weight=\"bold\">{}</text>",
            xml_escape(title)
        );
        for (c, col) in cols.iter().enumerate() {
            let _ = writeln!(
                body,
                "<text class=\"col-label\" x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
                LABEL_W + c * CELL_W + CELL_W / 2,
                HEADER_H * 2 - 8,
                xml_escape(col)
            );
        }
        Self { body, width, height }
    }

    fn row_label(&mut self, r: usize, label: &str) {
        let _ = writeln!(
            self.body,
            "<text class=\"row-label\" x=\"5\" y=\"{}\">{}</text>",
            HEADER_H * 2 + r * CELL_H + CELL_H / 2 + 4,
            xml_escape(label)
        );
    }

    fn cell(&mut self, r: usize, c: usize, row_key: &str, col_key: &str, value: Option<(Ratio<u64>, String)>) {
        let x = LABEL_W + c * CELL_W;
        let y = HEADER_H * 2 + r * CELL_H;
        match value {
            Some((v, text)) => {
                let tier = classify(v);
                let _ = writeln!(
                    self.body,
                    "<rect class=\"cell\" x=\"{x}\" y=\"{y}\" width=\"{CELL_W}\" height=\"{CELL_H}\" fill=\"{}\" stroke=\"white\" data-row=\"{}\" data-col=\"{}\" data-value=\"{}\" data-tier=\"{}\"/>",
                    tier.color(),
                    xml_escape(row_key),
                    xml_escape(col_key),
                    format_ratio(v),
                    slug(tier)
                );
                let _ = writeln!(
                    self.body,
                    "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"black\">{}</text>",
                    x + CELL_W / 2,
                    y + CELL_H / 2 + 4,
                    xml_escape(&text)
                );
            }
            None => {
                let _ = writeln!(
                    self.body,
                    "<rect class=\"missing\" x=\"{x}\" y=\"{y}\" width=\"{CELL_W}\" height=\"{CELL_H}\" fill=\"lightgray\" stroke=\"white\" data-row=\"{}\" data-col=\"{}\"/>",
                    xml_escape(row_key),
                    xml_escape(col_key)
                );
            }
        }
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height
        )
    }
}

fn label_value(v: Ratio<u64>, normalize_by: Option<u64>) -> String {
    match normalize_by {
        Some(m) if m > 0 => format_2dp(v / m),
        _ => format_2dp(v),
    }
}

/// Branch-by-domain MPR heatmap, optionally with mean row and column.
pub fn render_branch_heatmap(summary: &GridSummary, spec: &HeatmapSpec) -> Result<Rendered, ReportError> {
    if summary.cell_count() == 0 {
        return Err(ReportError::EmptySummary);
    }
    let opt = |v: Option<Ratio<u64>>| v.map(format_ratio).unwrap_or_default();
    let mut header = vec!["branch".to_string()];
    header.extend(summary.cols.iter().cloned());
    if spec.include_means {
        header.push("mean".into());
    }
    let mut table = vec![header];
    for (r, row) in summary.rows.iter().enumerate() {
        let mut line = vec![row.label.clone()];
        line.extend(summary.mpr_cells[r].iter().map(|c| opt(c.map(|m| m.ratio()))));
        if spec.include_means {
            line.push(opt(summary.row_means[r]));
        }
        table.push(line);
    }
    if spec.include_means {
        let mut line = vec!["mean".to_string()];
        line.extend(summary.col_means.iter().map(|m| opt(*m)));
        line.push(opt(summary.overall_mean));
        table.push(line);
    }
    let csv = to_csv(&table);

    let mut cols = summary.cols.clone();
    if spec.include_means {
        cols.push("mean".into());
    }
    let n_rows = summary.rows.len() + usize::from(spec.include_means);
    let mut svg = SvgGrid::new(&cols, n_rows, "Misinformation propagation rate (MPR)");
    let cell = |v: Option<Ratio<u64>>| v.map(|v| (v, label_value(v, spec.normalize_by)));
    for (r, row) in summary.rows.iter().enumerate() {
        svg.row_label(r, &row.label);
        let key = row.id.to_string();
        for (c, col) in summary.cols.iter().enumerate() {
            svg.cell(r, c, &key, col, cell(summary.mpr_cells[r][c].map(|m| m.ratio())));
        }
        if spec.include_means {
            svg.cell(r, summary.cols.len(), &key, "mean", cell(summary.row_means[r]));
        }
    }
    if spec.include_means {
        let r = summary.rows.len();
        svg.row_label(r, "mean");
        for (c, col) in summary.cols.iter().enumerate() {
            svg.cell(r, c, "mean", col, cell(summary.col_means[c]));
        }
        svg.cell(r, summary.cols.len(), "mean", "mean", cell(summary.overall_mean));
    }
    Ok(Rendered {
        csv,
        svg: svg.finish(),
    })
}

/// Parsed form of a branch-level heatmap CSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchTable {
    pub cols: Vec<String>,
    pub row_labels: Vec<String>,
    pub cells: Vec<Vec<Option<Ratio<u64>>>>,
    pub row_means: Option<Vec<Option<Ratio<u64>>>>,
    pub col_means: Option<Vec<Option<Ratio<u64>>>>,
}

pub fn read_branch_csv(text: &str) -> Result<BranchTable, ReportError> {
    let parse_err = |line: usize, message: String| ReportError::Parse { line, message };
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
    let mut rows = reader.records();
    let header = match rows.next() {
        Some(h) => h.map_err(|e| parse_err(1, e.to_string()))?,
        None => return Err(parse_err(1, "empty file".into())),
    };
    let mut cols: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let has_means = cols.last().map(String::as_str) == Some("mean");
    if has_means {
        cols.pop();
    }
    let n = cols.len();
    let mut table = BranchTable {
        cols,
        row_labels: Vec::new(),
        cells: Vec::new(),
        row_means: has_means.then(Vec::new),
        col_means: None,
    };
    for (i, rec) in rows.enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        let label = rec.get(0).unwrap_or_default().to_string();
        let values = rec
            .iter()
            .skip(1)
            .map(|f| {
                if f.is_empty() {
                    Ok(None)
                } else {
                    parse_ratio(f)
                        .map(Some)
                        .ok_or_else(|| parse_err(line, format!("bad value {f:?}")))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        let (cells, mean) = if has_means {
            (values[..n].to_vec(), Some(values[n]))
        } else {
            (values, None)
        };
        if has_means && label == "mean" {
            table.col_means = Some(cells);
            continue;
        }
        table.row_labels.push(label);
        table.cells.push(cells);
        if let (Some(rm), Some(m)) = (table.row_means.as_mut(), mean) {
            rm.push(m);
        }
    }
    Ok(table)
}

/// One row per selected `(branch, domain)` with that branch's MI at nodes
/// `1..=K`. Colors apply the MPR tier thresholds to MI values.
pub fn render_node_heatmap(run: &RunResult, selection: &[(u32, String)], title: &str) -> Result<Rendered, ReportError> {
    if selection.is_empty() {
        return Err(ReportError::EmptySelection);
    }
    let branches = selection
        .iter()
        .map(|(b, d)| {
            run.branch(d, *b)
                .ok_or_else(|| ReportError::UnknownSelection(d.clone(), *b))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let depth = run.manifest.config.depth as usize;
    let mut header: Vec<String> = vec!["branch".into(), "label".into(), "domain".into()];
    header.extend((1..=depth).map(|k| k.to_string()));
    let mut table = vec![header];
    let cols: Vec<String> = (1..=depth).map(|k| k.to_string()).collect();
    let mut svg = SvgGrid::new(&cols, branches.len(), title);
    for (r, br) in branches.iter().enumerate() {
        let label = run.manifest.row_label(br.branch_index, &run.corpus);
        let mut line = vec![br.branch_index.to_string(), label.clone(), br.domain_id.clone()];
        svg.row_label(r, &format!("{label} / {}", br.domain_id));
        let key = format!("{}:{}", br.branch_index, br.domain_id);
        for rec in &br.node_records[1..] {
            line.push(rec.mi.to_string());
            let v = Ratio::from_integer(u64::from(rec.mi));
            svg.cell(r, rec.node_index as usize - 1, &key, &rec.node_index.to_string(), Some((v, rec.mi.to_string())));
        }
        table.push(line);
    }
    Ok(Rendered {
        csv: to_csv(&table),
        svg: svg.finish(),
    })
}

pub fn selection_of(cells: &[RankedCell]) -> Vec<(u32, String)> {
    cells.iter().map(|c| (c.row_id, c.domain_id.clone())).collect()
}

pub fn render_rank(top: &[RankedCell], bottom: &[RankedCell]) -> String {
    let mut s = String::new();
    for (title, cells) in [("top", top), ("bottom", bottom)] {
        let _ = writeln!(s, "{title} {}", cells.len());
        for (i, c) in cells.iter().enumerate() {
            let _ = writeln!(
                s,
                "{:>3}. {} / {}  MPR {} ({})",
                i + 1,
                c.row_label,
                c.domain_id,
                c.mpr,
                c.mpr.tier()
            );
        }
    }
    s
}

fn pct(n: usize, total: usize) -> String {
    if total == 0 {
        return "-".into();
    }
    // one decimal, half-up, in integer arithmetic
    let tenths = (2000 * n + total) / (2 * total);
    format!("{}.{}%", tenths / 10, tenths % 10)
}

/// Plain-text report: tier counts, means, inflection points of the top cells
/// and aborted branches.
pub fn render_summary(run: &RunResult) -> String {
    let summary = metrics::summarize_grid(run);
    let cfg = &run.manifest.config;
    let mut s = String::new();
    let mode = serde_json::to_value(cfg.mode)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default();
    let _ = writeln!(
        s,
        "run {} ({mode}, {} branches x {} domains, depth {})",
        run.manifest.run_id,
        cfg.branch_count,
        cfg.domain_ids.len(),
        cfg.depth
    );
    let t = summary.tier_counts;
    let total = t.total();
    let _ = writeln!(s, "cells: {total} classified, {} aborted", run.aborted.len());
    let _ = writeln!(s, "(error, lie, propaganda) = ({}, {}, {})", t.error, t.lie, t.propaganda);
    for tier in SeverityTier::ALL {
        let n = t.get(tier);
        let _ = writeln!(s, "{}: {n} cases ({})", tier.label(), pct(n, total));
    }

    let width = summary.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(6);
    let _ = writeln!(s, "\nrow means");
    for (row, mean) in summary.rows.iter().zip(&summary.row_means) {
        let _ = match mean {
            Some(m) => writeln!(s, "  {:<width$}  {:>6}  {}", row.label, format_2dp(*m), classify(*m)),
            None => writeln!(s, "  {:<width$}  {:>6}", row.label, "-"),
        };
    }
    let _ = writeln!(s, "\ncolumn means");
    let cw = summary.cols.iter().map(String::len).max().unwrap_or(0).max(6);
    for (col, mean) in summary.cols.iter().zip(&summary.col_means) {
        let _ = match mean {
            Some(m) => writeln!(s, "  {:<cw$}  {:>6}  {}", col, format_2dp(*m), classify(*m)),
            None => writeln!(s, "  {:<cw$}  {:>6}", col, "-"),
        };
    }
    if let Some(m) = summary.overall_mean {
        let _ = writeln!(s, "\noverall mean MPR {}", format_2dp(m));
    }

    let top_n = total.min(10);
    if let Ok((top, _)) = metrics::rank_cells(&summary, top_n, 0, &BTreeSet::new()) {
        let _ = writeln!(
            s,
            "\ninflection points (MI > {}, persistence {}), top {top_n} cells",
            TierBoundary::Propaganda.value(),
            DEFAULT_PERSISTENCE
        );
        for c in &top {
            let traj = run.branch(&c.domain_id, c.row_id).map(|b| b.mi_trajectory()).unwrap_or_default();
            let at = inflection_point(&traj, TierBoundary::Propaganda, DEFAULT_PERSISTENCE)
                .map(|k| format!("node {k}"))
                .unwrap_or_else(|| "none".into());
            let _ = writeln!(s, "  {} / {}  MPR {}  {at}", c.row_label, c.domain_id, c.mpr);
        }
    }

    let _ = writeln!(s, "\naborted branches");
    if run.aborted.is_empty() {
        let _ = writeln!(s, "  none");
    }
    for a in &run.aborted {
        let _ = writeln!(s, "  {}/b{} at node {}: {}", a.domain_id, a.branch_index, a.node_index, a.reason);
    }
    s
}
