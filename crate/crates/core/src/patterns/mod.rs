//! Label distributions, cross-tabulations and chi-square independence tests,
//! with line-delimited records and SVG bar charts on disk.

mod gamma;
mod svg;

use std::fs;
use std::path::{Path, PathBuf};

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Prediction;
use crate::schema::Task;
use crate::text::Story;

pub use gamma::{chi_square_p, gamma_p, gamma_q, ln_gamma};

/// Significance level for independence tests.
pub const ALPHA: f64 = 0.05;

/// Whether labels came from annotation or from a model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    #[default]
    Gold,
    Predicted,
}

impl std::fmt::Display for LabelSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LabelSource::Gold => "gold",
            LabelSource::Predicted => "predicted",
        })
    }
}

/// Copy of `story` whose labels are replaced by a model's predictions.
pub fn with_predictions(story: &Story, prediction: &Prediction) -> Story {
    let mut s = story.clone();
    s.dims = prediction.dims();
    s.forms = prediction.forms();
    if let Some(tags) = &prediction.tags {
        s.element_tags = tags.clone();
    }
    s
}

/// Classes of `task` kept for counting. Class 0 of a dimension is
/// "unspecified"; binary forms have no such class.
fn kept_classes(task: Task, exclude_unspecified: bool) -> Vec<usize> {
    let skip = usize::from(exclude_unspecified && task.dimension().is_some());
    (skip..task.class_count()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub task: Task,
    pub labels: Vec<String>,
    pub counts: Vec<u64>,
}

impl Distribution {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Counts of each class of `task`; stories without a label are skipped.
pub fn distribution(stories: &[Story], task: Task, exclude_unspecified: bool) -> Distribution {
    let classes = kept_classes(task, exclude_unspecified);
    let mut counts = vec![0; classes.len()];
    for s in stories {
        if let Some(i) = s.gold(task).and_then(|c| classes.iter().position(|k| *k == c)) {
            counts[i] += 1;
        }
    }
    Distribution {
        task,
        labels: classes.iter().map(|c| task.class_name(*c)).collect(),
        counts,
    }
}

/// Observed counts for two categorical labellings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub row_task: Option<Task>,
    pub col_task: Option<Task>,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ContingencyTable {
    pub fn new(row_labels: Vec<String>, col_labels: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        Self::with_tasks(None, None, row_labels, col_labels, counts)
    }

    fn with_tasks(
        row_task: Option<Task>,
        col_task: Option<Task>,
        row_labels: Vec<String>,
        col_labels: Vec<String>,
        counts: Vec<Vec<u64>>,
    ) -> Result<Self> {
        if counts.len() != row_labels.len() || counts.iter().any(|r| r.len() != col_labels.len()) {
            return Err(Error::shape(format!(
                "contingency counts do not match {}×{} labels",
                row_labels.len(),
                col_labels.len()
            )));
        }
        Ok(ContingencyTable {
            row_task,
            col_task,
            row_labels,
            col_labels,
            counts,
        })
    }

    /// Unlabelled table, mostly for tests.
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let r = counts.len();
        let c = counts.first().map_or(0, Vec::len);
        Self::new(
            (0..r).map(|i| format!("r{i}")).collect(),
            (0..c).map(|j| format!("c{j}")).collect(),
            counts,
        )
    }

    pub fn row_totals(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_totals(&self) -> Vec<u64> {
        (0..self.col_labels.len())
            .map(|j| self.counts.iter().map(|r| r[j]).sum())
            .collect()
    }

    pub fn total(&self) -> u64 {
        self.row_totals().iter().sum()
    }

    /// Copy without all-zero rows and columns, plus the dropped labels.
    pub fn without_empty(&self) -> (ContingencyTable, Vec<String>) {
        let rows = self.row_totals();
        let cols = self.col_totals();
        let mut dropped = Vec::new();
        dropped.extend((0..rows.len()).filter(|i| rows[*i] == 0).map(|i| self.row_labels[i].clone()));
        dropped.extend((0..cols.len()).filter(|j| cols[*j] == 0).map(|j| self.col_labels[j].clone()));
        let keep_r: Vec<usize> = (0..rows.len()).filter(|i| rows[*i] > 0).collect();
        let keep_c: Vec<usize> = (0..cols.len()).filter(|j| cols[*j] > 0).collect();
        let table = ContingencyTable {
            row_task: self.row_task,
            col_task: self.col_task,
            row_labels: keep_r.iter().map(|i| self.row_labels[*i].clone()).collect(),
            col_labels: keep_c.iter().map(|j| self.col_labels[*j].clone()).collect(),
            counts: keep_r
                .iter()
                .map(|i| keep_c.iter().map(|j| self.counts[*i][*j]).collect())
                .collect(),
        };
        (table, dropped)
    }

    fn describe_rows(&self) -> String {
        self.row_task.map(|t| format!(" of {t}")).unwrap_or_default()
    }

    fn describe_cols(&self) -> String {
        self.col_task.map(|t| format!(" of {t}")).unwrap_or_default()
    }
}

/// Cross-tabulates two tasks over the stories that carry both labels.
pub fn crosstab(stories: &[Story], a: Task, b: Task, exclude_unspecified: bool) -> Result<ContingencyTable> {
    if a == b {
        return Err(Error::Data(format!("cannot cross-tabulate {a} with itself")));
    }
    let rows = kept_classes(a, exclude_unspecified);
    let cols = kept_classes(b, exclude_unspecified);
    let mut counts = vec![vec![0; cols.len()]; rows.len()];
    for s in stories {
        let (Some(x), Some(y)) = (s.gold(a), s.gold(b)) else {
            continue;
        };
        if let (Some(i), Some(j)) = (rows.iter().position(|r| *r == x), cols.iter().position(|c| *c == y)) {
            counts[i][j] += 1;
        }
    }
    ContingencyTable::with_tasks(
        Some(a),
        Some(b),
        rows.iter().map(|c| a.class_name(*c)).collect(),
        cols.iter().map(|c| b.class_name(*c)).collect(),
        counts,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub significant: bool,
    pub expected: Vec<Vec<f64>>,
    pub yates: bool,
    /// Cells with expected count below 5, where the approximation is weak.
    pub low_count_cells: usize,
}

/// Pearson chi-square test of independence. With `yates` set, 2×2 tables
/// get the continuity correction; larger tables are unaffected.
pub fn chi_square(table: &ContingencyTable, yates: bool) -> Result<ChiSquareResult> {
    let (r, c) = (table.row_labels.len(), table.col_labels.len());
    if r < 2 || c < 2 {
        return Err(Error::Data(format!("chi-square needs at least a 2×2 table, got {r}×{c}")));
    }
    let rows = table.row_totals();
    let cols = table.col_totals();
    if let Some(i) = rows.iter().position(|t| *t == 0) {
        return Err(Error::Data(format!("empty row {:?}{}", table.row_labels[i], table.describe_rows())));
    }
    if let Some(j) = cols.iter().position(|t| *t == 0) {
        return Err(Error::Data(format!("empty column {:?}{}", table.col_labels[j], table.describe_cols())));
    }
    let total = table.total() as f64;
    let df = (r - 1) * (c - 1);
    let correct = yates && df == 1;
    let mut statistic = 0.0;
    let mut low = 0;
    let mut expected = vec![vec![0.0; c]; r];
    for i in 0..r {
        for j in 0..c {
            let e = rows[i] as f64 * cols[j] as f64 / total;
            expected[i][j] = e;
            if e < 5.0 {
                low += 1;
            }
            let mut diff = (table.counts[i][j] as f64 - e).abs();
            if correct {
                diff = (diff - 0.5).max(0.0);
            }
            statistic += diff * diff / e;
        }
    }
    if low > 0 {
        debug!(
            "{} x {}: {low} cell(s) with expected count below 5",
            table.row_task.map_or("rows", Task::key),
            table.col_task.map_or("cols", Task::key)
        );
    }
    let p_value = chi_square_p(statistic, df)?;
    Ok(ChiSquareResult {
        statistic,
        df,
        p_value,
        significant: p_value < ALPHA,
        expected,
        yates: correct,
        low_count_cells: low,
    })
}

/// One unit of report output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Analysis {
    Distribution {
        source: LabelSource,
        exclude_unspecified: bool,
        distribution: Distribution,
    },
    Independence {
        source: LabelSource,
        exclude_unspecified: bool,
        table: ContingencyTable,
        /// Categories with no stories, left out of the test.
        #[serde(skip_serializing_if = "Vec::is_empty", default)]
        dropped: Vec<String>,
        /// Absent when the table could not be tested.
        test: Option<ChiSquareResult>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        skipped: Option<String>,
    },
}

impl Analysis {
    pub fn name(&self) -> String {
        let (source, excl, stem) = match self {
            Analysis::Distribution {
                source,
                exclude_unspecified,
                distribution,
            } => (source, exclude_unspecified, distribution.task.key().to_string()),
            Analysis::Independence {
                source,
                exclude_unspecified,
                table,
                ..
            } => (
                source,
                exclude_unspecified,
                format!(
                    "{}_x_{}",
                    table.row_task.map_or("rows", Task::key),
                    table.col_task.map_or("cols", Task::key)
                ),
            ),
        };
        let mode = if *excl { "specified" } else { "all" };
        format!("{source}_{stem}_{mode}")
    }
}

/// Distributions of every task and a tested cross-tabulation of every pair
/// of dimensions plus each dimension against each form. Empty categories
/// are dropped before testing; a table left smaller than 2×2 is recorded
/// untested.
pub fn standard_analyses(
    stories: &[Story],
    source: LabelSource,
    exclude_unspecified: bool,
    yates: bool,
) -> Vec<Analysis> {
    let mut out: Vec<Analysis> = Task::ALL
        .iter()
        .map(|t| Analysis::Distribution {
            source,
            exclude_unspecified,
            distribution: distribution(stories, *t, exclude_unspecified),
        })
        .collect();
    let dims: Vec<Task> = Task::dims().collect();
    let mut pairs = Vec::new();
    for (i, a) in dims.iter().enumerate() {
        pairs.extend(dims[i + 1..].iter().map(|b| (*a, *b)));
        pairs.extend(Task::forms().map(|f| (*a, f)));
    }
    for (a, b) in pairs {
        let table = crosstab(stories, a, b, exclude_unspecified).expect("distinct tasks");
        let (tested, dropped) = table.without_empty();
        let (test, skipped) = match chi_square(&tested, yates) {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
        out.push(Analysis::Independence {
            source,
            exclude_unspecified,
            table,
            dropped,
            test,
            skipped,
        });
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub kind: String,
    pub record: PathBuf,
    pub chart: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub analyses: Vec<ManifestEntry>,
}

/// Writes `<name>.jsonl` and `<name>.svg` per analysis and a `manifest.json`
/// listing them, with paths relative to `out_dir`.
pub fn emit_report(analyses: &[Analysis], out_dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = Manifest::default();
    for a in analyses {
        let name = a.name();
        let record = PathBuf::from(format!("{name}.jsonl"));
        let chart = PathBuf::from(format!("{name}.svg"));
        let line = serde_json::to_string(a).expect("analysis serializes") + "\n";
        let path = out_dir.join(&record);
        fs::write(&path, line).map_err(|e| Error::io(&path, e))?;
        let (kind, svg) = match a {
            Analysis::Distribution { distribution, .. } => ("distribution", svg::distribution_chart(&name, distribution)),
            Analysis::Independence { table, .. } => ("independence", svg::table_chart(&name, table)),
        };
        let path = out_dir.join(&chart);
        fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
        manifest.analyses.push(ManifestEntry {
            name,
            kind: kind.into(),
            record,
            chart,
        });
    }
    let path = out_dir.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
