//! Drift measurements: answer-vector distance, misinformation index (MI),
//! misinformation propagation rate (MPR), severity tiers, grid summaries and
//! node-level trajectory analysis.
//!
//! MPR values are kept exact as `sum / depth` so that grid means and tier
//! boundaries never depend on floating point rounding. Decimal rendering is
//! fixed at two places, rounding half up.

use std::collections::BTreeSet;
use std::fmt;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auditor::AnswerVector;
use crate::engine::RunResult;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("answer vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("answer vectors belong to different domains ({0} vs {1})")]
    DomainMismatch(String, String),
    #[error("reference vector must be all ones")]
    ReferenceNotAllOnes,
    #[error("MI sequence needs at least one node after the source")]
    ZeroDepth,
    #[error("MI of the source node must be 0, got {0}")]
    NonZeroSource(u32),
    #[error("MPR must be non-negative, got {0}")]
    Negative(f64),
    #[error("grid has no cells")]
    EmptyGrid,
    #[error("requested top {top} + bottom {bottom} exceeds {available} cells")]
    NotEnoughCells {
        top: usize,
        bottom: usize,
        available: usize,
    },
}

/// Number of positions where two answer vectors disagree.
pub fn distance(a: &AnswerVector, b: &AnswerVector) -> Result<u32, MetricsError> {
    if a.m() != b.m() {
        return Err(MetricsError::LengthMismatch(a.m(), b.m()));
    }
    if a.domain_id() != b.domain_id() {
        return Err(MetricsError::DomainMismatch(
            a.domain_id().to_string(),
            b.domain_id().to_string(),
        ));
    }
    Ok(a.bits().iter().zip(b.bits()).filter(|(x, y)| x != y).count() as u32)
}

/// Distance from the all-ones reference, i.e. the number of facts lost.
pub fn misinformation_index(reference: &AnswerVector, observed: &AnswerVector) -> Result<u32, MetricsError> {
    if !reference.is_all_ones() {
        return Err(MetricsError::ReferenceNotAllOnes);
    }
    distance(reference, observed)
}

/// Branch-level rate: `(1/E) * sum_{k=0..E} MI_k` with `MI_0 = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mpr {
    pub sum: u64,
    pub depth: u32,
}

impl Mpr {
    pub fn ratio(&self) -> Ratio<u64> {
        Ratio::new(self.sum, u64::from(self.depth))
    }

    pub fn to_f64(&self) -> f64 {
        self.sum as f64 / f64::from(self.depth)
    }

    pub fn tier(&self) -> SeverityTier {
        classify(self.ratio())
    }
}

impl fmt::Display for Mpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_2dp(self.ratio()))
    }
}

pub fn mpr(mi_sequence: &[u32]) -> Result<Mpr, MetricsError> {
    let (&first, rest) = mi_sequence.split_first().ok_or(MetricsError::ZeroDepth)?;
    if rest.is_empty() {
        return Err(MetricsError::ZeroDepth);
    }
    if first != 0 {
        return Err(MetricsError::NonZeroSource(first));
    }
    Ok(Mpr {
        sum: mi_sequence.iter().map(|&v| u64::from(v)).sum(),
        depth: rest.len() as u32,
    })
}

/// Two-decimal rendering, half-up.
pub fn format_2dp(r: Ratio<u64>) -> String {
    let hundredths = (200 * *r.numer() + *r.denom()) / (2 * *r.denom());
    format!("{}.{:02}", hundredths / 100, hundredths % 100)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SeverityTier {
    FactualError,
    Lie,
    Propaganda,
}

impl SeverityTier {
    pub const ALL: [SeverityTier; 3] = [SeverityTier::FactualError, SeverityTier::Lie, SeverityTier::Propaganda];

    pub fn label(&self) -> &'static str {
        match self {
            SeverityTier::FactualError => "factual error",
            SeverityTier::Lie => "lie",
            SeverityTier::Propaganda => "propaganda",
        }
    }

    pub fn color(&self) -> &'static str {
        match self {
            SeverityTier::FactualError => "green",
            SeverityTier::Lie => "orange",
            SeverityTier::Propaganda => "red",
        }
    }
}

impl fmt::Display for SeverityTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// `<= 1` factual error, `(1, 3]` lie, `> 3` propaganda.
pub fn classify(value: Ratio<u64>) -> SeverityTier {
    if value <= Ratio::from_integer(1) {
        SeverityTier::FactualError
    } else if value <= Ratio::from_integer(3) {
        SeverityTier::Lie
    } else {
        SeverityTier::Propaganda
    }
}

pub fn classify_value(value: f64) -> Result<SeverityTier, MetricsError> {
    if value.is_nan() || value < 0.0 {
        return Err(MetricsError::Negative(value));
    }
    Ok(if value <= 1.0 {
        SeverityTier::FactualError
    } else if value <= 3.0 {
        SeverityTier::Lie
    } else {
        SeverityTier::Propaganda
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierCounts {
    pub error: usize,
    pub lie: usize,
    pub propaganda: usize,
}

impl TierCounts {
    pub fn add(&mut self, tier: SeverityTier) {
        match tier {
            SeverityTier::FactualError => self.error += 1,
            SeverityTier::Lie => self.lie += 1,
            SeverityTier::Propaganda => self.propaganda += 1,
        }
    }

    pub fn get(&self, tier: SeverityTier) -> usize {
        match tier {
            SeverityTier::FactualError => self.error,
            SeverityTier::Lie => self.lie,
            SeverityTier::Propaganda => self.propaganda,
        }
    }

    pub fn total(&self) -> usize {
        self.error + self.lie + self.propaganda
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowLabel {
    /// Branch index (1-based).
    pub id: u32,
    pub label: String,
}

/// Branch-by-domain MPR matrix. Missing cells (aborted or unfinished
/// branches) are `None` and take no part in means or tier counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridSummary {
    pub rows: Vec<RowLabel>,
    pub cols: Vec<String>,
    pub mpr_cells: Vec<Vec<Option<Mpr>>>,
    pub row_means: Vec<Option<Ratio<u64>>>,
    pub col_means: Vec<Option<Ratio<u64>>>,
    pub overall_mean: Option<Ratio<u64>>,
    pub tier_counts: TierCounts,
    /// `(row id, domain)` of cells left out.
    pub excluded: Vec<(u32, String)>,
}

fn mean<'a>(values: impl Iterator<Item = &'a Mpr>) -> Option<Ratio<u64>> {
    let mut n = 0u64;
    let mut acc = Ratio::from_integer(0u64);
    for v in values {
        acc += v.ratio();
        n += 1;
    }
    (n > 0).then(|| acc / n)
}

impl GridSummary {
    pub fn from_cells(rows: Vec<RowLabel>, cols: Vec<String>, mpr_cells: Vec<Vec<Option<Mpr>>>) -> Self {
        let row_means = mpr_cells.iter().map(|r| mean(r.iter().flatten())).collect();
        let col_means = (0..cols.len())
            .map(|c| mean(mpr_cells.iter().filter_map(|r| r[c].as_ref())))
            .collect();
        let overall_mean = mean(mpr_cells.iter().flatten().flatten());
        let mut tier_counts = TierCounts::default();
        let mut excluded = Vec::new();
        for (r, row) in mpr_cells.iter().enumerate() {
            for (c, cell) in row.iter().enumerate() {
                match cell {
                    Some(v) => tier_counts.add(v.tier()),
                    None => excluded.push((rows[r].id, cols[c].clone())),
                }
            }
        }
        Self {
            rows,
            cols,
            mpr_cells,
            row_means,
            col_means,
            overall_mean,
            tier_counts,
            excluded,
        }
    }

    pub fn cell_count(&self) -> usize {
        self.tier_counts.total()
    }

    pub fn cell(&self, row_id: u32, col: &str) -> Option<Mpr> {
        let r = self.rows.iter().position(|l| l.id == row_id)?;
        let c = self.cols.iter().position(|d| d == col)?;
        self.mpr_cells[r][c]
    }
}

/// Branch-by-domain grid of a run. Aborted branches become empty cells and
/// are listed in `excluded`.
pub fn summarize_grid(run: &RunResult) -> GridSummary {
    let config = &run.manifest.config;
    let rows: Vec<RowLabel> = (1..=config.branch_count)
        .map(|b| RowLabel {
            id: b,
            label: run.manifest.row_label(b, &run.corpus),
        })
        .collect();
    let cols = config.domain_ids.clone();
    let cells = rows
        .iter()
        .map(|r| cols.iter().map(|d| run.branch(d, r.id).map(|b| b.mpr)).collect())
        .collect();
    GridSummary::from_cells(rows, cols, cells)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedCell {
    pub row_id: u32,
    pub row_label: String,
    pub domain_id: String,
    pub mpr: Mpr,
}

/// Highest-MPR and lowest-MPR cells. Ties break on `(row id, domain id)`
/// ascending in both lists.
pub fn rank_cells(
    summary: &GridSummary,
    top: usize,
    bottom: usize,
    exclude_domains: &BTreeSet<String>,
) -> Result<(Vec<RankedCell>, Vec<RankedCell>), MetricsError> {
    let mut cells: Vec<RankedCell> = Vec::new();
    for (r, row) in summary.rows.iter().enumerate() {
        for (c, col) in summary.cols.iter().enumerate() {
            if exclude_domains.contains(col) {
                continue;
            }
            if let Some(mpr) = summary.mpr_cells[r][c] {
                cells.push(RankedCell {
                    row_id: row.id,
                    row_label: row.label.clone(),
                    domain_id: col.clone(),
                    mpr,
                });
            }
        }
    }
    if cells.is_empty() {
        return Err(MetricsError::EmptyGrid);
    }
    if top + bottom > cells.len() {
        return Err(MetricsError::NotEnoughCells {
            top,
            bottom,
            available: cells.len(),
        });
    }
    let key = |c: &RankedCell| (c.row_id, c.domain_id.clone());
    let mut desc = cells.clone();
    desc.sort_by(|a, b| b.mpr.ratio().cmp(&a.mpr.ratio()).then_with(|| key(a).cmp(&key(b))));
    desc.truncate(top);
    cells.sort_by(|a, b| a.mpr.ratio().cmp(&b.mpr.ratio()).then_with(|| key(a).cmp(&key(b))));
    cells.truncate(bottom);
    Ok((desc, cells))
}

/// Tier boundary used when scanning a trajectory for an inflection point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TierBoundary {
    /// MI above 1 (lie or worse).
    Lie,
    /// MI above 3 (propaganda).
    Propaganda,
}

impl TierBoundary {
    pub fn value(&self) -> u32 {
        match self {
            TierBoundary::Lie => 1,
            TierBoundary::Propaganda => 3,
        }
    }
}

pub const DEFAULT_PERSISTENCE: f64 = 0.8;

/// Smallest node `k` with `MI_k > boundary` such that at least
/// `persistence` of `MI_k..=MI_K` also exceed the boundary.
pub fn inflection_point(trajectory: &[u32], boundary: TierBoundary, persistence: f64) -> Option<usize> {
    assert!(
        persistence > 0.0 && persistence <= 1.0,
        "persistence fraction must lie in (0, 1]"
    );
    let t = boundary.value();
    let n = trajectory.len();
    // above[k] = count of MI_i > t for i in k..n
    let mut above = vec![0usize; n + 1];
    for k in (0..n).rev() {
        above[k] = above[k + 1] + usize::from(trajectory[k] > t);
    }
    (0..n).find(|&k| trajectory[k] > t && above[k] as f64 >= persistence * (n - k) as f64 - 1e-9)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(bits: &str) -> AnswerVector {
        AnswerVector::from_bit_string("d", bits).unwrap()
    }

    #[test]
    fn distance_basics() {
        assert_eq!(distance(&v("1111111111"), &v("1111111111")), Ok(0));
        assert_eq!(distance(&v("1111111111"), &v("0000000000")), Ok(10));
        assert_eq!(distance(&v("11"), &v("111")), Err(MetricsError::LengthMismatch(2, 3)));
        let other = AnswerVector::from_bit_string("e", "11").unwrap();
        assert!(matches!(distance(&v("11"), &other), Err(MetricsError::DomainMismatch(..))));
    }

    #[test]
    fn mi_counts_zero_bits() {
        let r = v("1111111111");
        assert_eq!(misinformation_index(&r, &r), Ok(0));
        assert_eq!(misinformation_index(&r, &v("1011011011")), Ok(3));
        assert_eq!(
            misinformation_index(&v("1111111110"), &r),
            Err(MetricsError::ReferenceNotAllOnes)
        );
    }

    #[test]
    fn mpr_examples() {
        assert_eq!(mpr(&[0; 31]).unwrap().ratio(), Ratio::from_integer(0));
        let mut sat = vec![0u32];
        sat.extend([10; 30]);
        assert_eq!(mpr(&sat).unwrap().ratio(), Ratio::from_integer(10));
        assert_eq!(mpr(&[0, 1, 2, 3]).unwrap().ratio(), Ratio::from_integer(2));
        assert_eq!(mpr(&[0]), Err(MetricsError::ZeroDepth));
        assert_eq!(mpr(&[]), Err(MetricsError::ZeroDepth));
        assert_eq!(mpr(&[2, 1]), Err(MetricsError::NonZeroSource(2)));
    }

    #[test]
    fn two_decimal_rendering() {
        assert_eq!(Mpr { sum: 15, depth: 30 }.to_string(), "0.50");
        assert_eq!(Mpr { sum: 164, depth: 30 }.to_string(), "5.47");
        assert_eq!(Mpr { sum: 1, depth: 8 }.to_string(), "0.13");
        assert_eq!(Mpr { sum: 300, depth: 30 }.to_string(), "10.00");
    }

    #[test]
    fn classify_boundaries() {
        let r = |n, d| Ratio::new(n, d);
        assert_eq!(classify(r(0, 1)), SeverityTier::FactualError);
        assert_eq!(classify(r(1, 1)), SeverityTier::FactualError);
        assert_eq!(classify(r(31, 30)), SeverityTier::Lie);
        assert_eq!(classify(r(3, 1)), SeverityTier::Lie);
        assert_eq!(classify(r(91, 30)), SeverityTier::Propaganda);
        assert_eq!(classify_value(5.48), Ok(SeverityTier::Propaganda));
        assert_eq!(classify_value(4.2), Ok(SeverityTier::Propaganda));
        assert_eq!(classify_value(3.0 + f64::EPSILON * 4.0), Ok(SeverityTier::Propaganda));
        assert!(classify_value(-0.1).is_err());
    }

    fn grid(values: &[&[Option<u64>]]) -> GridSummary {
        let rows = (1..=values.len() as u32)
            .map(|id| RowLabel {
                id,
                label: format!("#{id}"),
            })
            .collect();
        let cols = (0..values[0].len()).map(|c| format!("d{c}")).collect();
        let cells = values
            .iter()
            .map(|r| r.iter().map(|v| v.map(|sum| Mpr { sum, depth: 10 })).collect())
            .collect();
        GridSummary::from_cells(rows, cols, cells)
    }

    #[test]
    fn single_cell_grid() {
        let g = grid(&[&[Some(0)]]);
        assert_eq!(g.tier_counts, TierCounts { error: 1, lie: 0, propaganda: 0 });
        assert_eq!(g.row_means, vec![Some(Ratio::from_integer(0))]);
    }

    #[test]
    fn means_skip_missing_cells() {
        let g = grid(&[&[Some(10), Some(40)], &[None, Some(70)]]);
        assert_eq!(g.row_means[0], Some(Ratio::new(5, 2)));
        assert_eq!(g.row_means[1], Some(Ratio::from_integer(7)));
        assert_eq!(g.col_means[0], Some(Ratio::from_integer(1)));
        assert_eq!(g.col_means[1], Some(Ratio::new(11, 2)));
        assert_eq!(g.excluded, vec![(2, "d0".to_string())]);
        assert_eq!(g.cell_count(), 3);
    }

    #[test]
    fn rank_breaks_ties_lexicographically() {
        let g = grid(&[&[Some(50), Some(20)], &[Some(50), Some(20)]]);
        let (top, bottom) = rank_cells(&g, 2, 2, &BTreeSet::new()).unwrap();
        let ids = |cs: &[RankedCell]| cs.iter().map(|c| (c.row_id, c.domain_id.clone())).collect::<Vec<_>>();
        assert_eq!(ids(&top), vec![(1, "d0".into()), (2, "d0".into())]);
        assert_eq!(ids(&bottom), vec![(1, "d1".into()), (2, "d1".into())]);
    }

    #[test]
    fn rank_excludes_domains_and_checks_bounds() {
        let g = grid(&[&[Some(90), Some(20), Some(30)]]);
        let ex: BTreeSet<String> = ["d0".to_string()].into();
        let (top, _) = rank_cells(&g, 1, 0, &ex).unwrap();
        assert_eq!(top[0].domain_id, "d2");
        assert!(matches!(
            rank_cells(&g, 2, 1, &ex),
            Err(MetricsError::NotEnoughCells { available: 2, .. })
        ));
        let all: BTreeSet<String> = g.cols.iter().cloned().collect();
        assert_eq!(rank_cells(&g, 0, 0, &all), Err(MetricsError::EmptyGrid));
    }

    #[test]
    fn inflection_examples() {
        assert_eq!(inflection_point(&[0; 31], TierBoundary::Propaganda, 0.8), None);
        let mut t = vec![0, 0, 0, 0, 0, 8, 9];
        t.extend([10; 24]);
        assert_eq!(inflection_point(&t, TierBoundary::Propaganda, 0.8), Some(5));
        // a lone early spike does not count
        let spike = [0, 5, 0, 0, 0, 0, 4, 4, 4, 4];
        assert_eq!(inflection_point(&spike, TierBoundary::Propaganda, 0.8), Some(6));
    }
}
