//! Token-level extraction metrics, per-task classification metrics with
//! confusion matrices, binary form accuracy and Cohen's kappa.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::schema::{ElementTag, Form, Task};
use crate::text::Story;

/// How macro-F1 treats classes that occur in neither predictions nor gold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AbsentClasses {
    /// Leave them out of the average (they are still listed in the report).
    #[default]
    Exclude,
    /// Count them as F1 = 0.
    Include,
}

/// Gold × predicted counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn add(&mut self, gold: usize, pred: usize) -> Result<()> {
        let k = self.classes();
        if gold >= k || pred >= k {
            return Err(Error::Data(format!("class index ({gold}, {pred}) out of range for {k} classes")));
        }
        self.counts[gold][pred] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }

    fn gold_count(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    fn pred_count(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    /// Whether class `c` occurs in gold or predictions.
    pub fn present(&self, c: usize) -> bool {
        self.gold_count(c) + self.pred_count(c) > 0
    }

    /// `2tp / (2tp + fp + fn)`, zero for an absent class.
    pub fn f1(&self, c: usize) -> f64 {
        let tp = self.counts[c][c];
        let denom = self.gold_count(c) + self.pred_count(c);
        if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        }
    }

    /// Macro-F1 and the classes absent from both sides.
    pub fn macro_f1(&self, policy: AbsentClasses) -> (f64, Vec<usize>) {
        let absent: Vec<usize> = (0..self.classes()).filter(|c| !self.present(*c)).collect();
        let counted: Vec<usize> = (0..self.classes())
            .filter(|c| policy == AbsentClasses::Include || self.present(*c))
            .collect();
        let sum: f64 = counted.iter().map(|c| self.f1(*c)).sum();
        (sum / counted.len() as f64, absent)
    }
}

/// Accuracy, macro-F1 and confusion of one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: String,
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Classes missing from both gold and predictions.
    pub absent_classes: Vec<usize>,
    pub support: u64,
    pub confusion: Confusion,
}

impl TaskMetrics {
    fn from_confusion(task: &str, confusion: Confusion, policy: AbsentClasses) -> Result<Self> {
        if confusion.total() == 0 {
            return Err(Error::Data(format!("no examples to evaluate for {task}")));
        }
        let (macro_f1, absent_classes) = confusion.macro_f1(policy);
        Ok(TaskMetrics {
            task: task.to_string(),
            accuracy: confusion.accuracy(),
            macro_f1,
            absent_classes,
            support: confusion.total(),
            confusion,
        })
    }
}

/// Token-level metrics over all tokens of all stories.
pub fn token_metrics(pred: &[Vec<ElementTag>], gold: &[Vec<ElementTag>], policy: AbsentClasses) -> Result<TaskMetrics> {
    if pred.len() != gold.len() {
        return Err(Error::Data(format!("{} predicted stories vs {} gold", pred.len(), gold.len())));
    }
    let mut c = Confusion::new(ElementTag::COUNT);
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Data(format!(
                "story {i}: {} predicted tags vs {} gold tags",
                p.len(),
                g.len()
            )));
        }
        for (pt, gt) in p.iter().zip(g) {
            c.add(gt.index(), pt.index())?;
        }
    }
    TaskMetrics::from_confusion("tokens", c, policy)
}

/// Single-label metrics for one classification task.
pub fn classification_metrics(
    task: &str,
    classes: usize,
    pred: &[usize],
    gold: &[usize],
    policy: AbsentClasses,
) -> Result<TaskMetrics> {
    if pred.len() != gold.len() {
        return Err(Error::Data(format!("{task}: {} predictions vs {} gold labels", pred.len(), gold.len())));
    }
    let mut c = Confusion::new(classes);
    for (p, g) in pred.iter().zip(gold) {
        c.add(*g, *p)?;
    }
    TaskMetrics::from_confusion(task, c, policy)
}

/// Binary accuracy per form, in [`Form::ALL`] order.
pub fn form_metrics(pred: &[[bool; 3]], gold: &[[bool; 3]]) -> Result<[f64; 3]> {
    if pred.is_empty() || pred.len() != gold.len() {
        return Err(Error::Data(format!(
            "form metrics need equal, non-empty lists (got {} and {})",
            pred.len(),
            gold.len()
        )));
    }
    let mut acc = [0.0; 3];
    for f in Form::ALL {
        let i = f.index();
        let hits = pred.iter().zip(gold).filter(|(p, g)| p[i] == g[i]).count();
        acc[i] = hits as f64 / pred.len() as f64;
    }
    Ok(acc)
}

/// Cohen's kappa of two labelings of the same items.
pub fn cohens_kappa<T: Ord>(a: &[T], b: &[T]) -> Result<f64> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::Data(format!(
            "kappa needs equal, non-empty sequences (got {} and {})",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let mut marg: BTreeMap<&T, (f64, f64)> = BTreeMap::new();
    let mut agree = 0usize;
    for (x, y) in a.iter().zip(b) {
        marg.entry(x).or_default().0 += 1.0;
        marg.entry(y).or_default().1 += 1.0;
        agree += usize::from(x == y);
    }
    let po = agree as f64 / n;
    let pe: f64 = marg.values().map(|(ca, cb)| (ca / n) * (cb / n)).sum();
    if pe >= 1.0 {
        // Both raters used one identical label throughout.
        return Ok(1.0);
    }
    Ok((po - pe) / (1.0 - pe))
}

/// Metrics of every head of a model over a story set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tasks: Vec<TaskMetrics>,
}

impl MetricReport {
    pub fn get(&self, task: &str) -> Option<&TaskMetrics> {
        self.tasks.iter().find(|t| t.task == task)
    }

    fn classification(&self) -> impl Iterator<Item = &TaskMetrics> {
        self.tasks.iter().filter(|t| t.task != "tokens")
    }

    /// Mean macro-F1 over classification tasks, or the token macro-F1 for
    /// extraction-only models.
    pub fn mean_macro_f1(&self) -> f64 {
        mean(self.classification().map(|t| t.macro_f1))
            .or_else(|| self.get("tokens").map(|t| t.macro_f1))
            .unwrap_or(0.0)
    }

    pub fn mean_accuracy(&self) -> f64 {
        mean(self.classification().map(|t| t.accuracy))
            .or_else(|| self.get("tokens").map(|t| t.accuracy))
            .unwrap_or(0.0)
    }

    /// One JSON record per task, each tagged with `label`.
    pub fn to_jsonl(&self, label: &str) -> String {
        let mut s = String::new();
        for t in &self.tasks {
            let mut v = serde_json::to_value(t).expect("metrics serialize");
            v["label"] = label.into();
            if t.task == "tokens" {
                v["level"] = "token".into();
            }
            writeln!(s, "{v}").unwrap();
        }
        s
    }

    /// Fixed-width table with values ×100.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<24}{:>10}{:>10}{:>9}\n", "task", "accuracy", "macro-F1", "n");
        for t in &self.tasks {
            let name = if t.task == "tokens" {
                "tokens (token-level)".to_string()
            } else {
                t.task.clone()
            };
            let flag = if t.absent_classes.is_empty() { "" } else { " *" };
            writeln!(
                s,
                "{name:<24}{:>10.1}{:>10.1}{:>9}{flag}",
                100.0 * t.accuracy,
                100.0 * t.macro_f1,
                t.support
            )
            .unwrap();
        }
        if self.tasks.iter().any(|t| !t.absent_classes.is_empty()) {
            s.push_str("* classes absent from gold and predictions left out of macro-F1\n");
        }
        s
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Runs `model` in eval mode over `stories` and scores every head. Stories
/// without a gold label for a task are skipped for that task.
pub fn evaluate(model: &Model, stories: &[Story], policy: AbsentClasses) -> Result<MetricReport> {
    if stories.is_empty() {
        return Err(Error::Data("no stories to evaluate".into()));
    }
    let config = model.config();
    let mut tag_pred = Vec::new();
    let mut tag_gold = Vec::new();
    let mut per_task: Vec<(Task, Vec<usize>, Vec<usize>)> =
        config.classify.iter().map(|t| (*t, Vec::new(), Vec::new())).collect();
    for story in stories {
        let p = model.infer(story)?.prediction;
        if let Some(tags) = &p.tags {
            tag_gold.push(story.element_tags[..tags.len()].to_vec());
            tag_pred.push(tags.clone());
        }
        for (task, pred, gold) in &mut per_task {
            if let (Some(g), Some(c)) = (story.gold(*task), p.class(*task)) {
                gold.push(g);
                pred.push(c);
            }
        }
    }
    let mut report = MetricReport::default();
    if config.extraction() {
        report.tasks.push(token_metrics(&tag_pred, &tag_gold, policy)?);
    }
    for (task, pred, gold) in per_task {
        if gold.is_empty() {
            continue;
        }
        report
            .tasks
            .push(classification_metrics(task.key(), task.class_count(), &pred, &gold, policy)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn perfect_tokens() {
        use ElementTag::*;
        let g = vec![vec![Harasser, None, Time], vec![Location, Trigger]];
        let m = token_metrics(&g, &g, AbsentClasses::Exclude).unwrap();
        assert_eq!((m.accuracy, m.macro_f1), (1.0, 1.0));
    }

    #[test]
    fn all_none_corpus() {
        let g = vec![vec![ElementTag::None; 4]];
        let m = token_metrics(&g, &g, AbsentClasses::Exclude).unwrap();
        assert_eq!((m.accuracy, m.macro_f1), (1.0, 1.0));
        assert_eq!(m.absent_classes, [0, 1, 2, 3]);
        let m = token_metrics(&g, &g, AbsentClasses::Include).unwrap();
        assert_abs_diff_eq!(m.macro_f1, 0.2);
    }

    #[test]
    fn token_length_mismatch() {
        let g = vec![vec![ElementTag::None; 4]];
        let p = vec![vec![ElementTag::None; 3]];
        assert!(token_metrics(&p, &g, AbsentClasses::Exclude).is_err());
    }

    #[test]
    fn constant_prediction_on_balanced_binary_task() {
        let m = classification_metrics("x", 2, &[0, 0, 0, 0], &[0, 1, 0, 1], AbsentClasses::Exclude).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert_abs_diff_eq!(m.macro_f1, (2.0 / 3.0 + 0.0) / 2.0, epsilon = 1e-15);
        assert_eq!(m.confusion.counts, vec![vec![2, 0], vec![2, 0]]);
    }

    #[test]
    fn class_out_of_range() {
        assert!(classification_metrics("x", 3, &[3], &[0], AbsentClasses::Exclude).is_err());
    }

    #[test]
    fn form_accuracy() {
        let g = [[true, false, true], [false, false, true]];
        assert_eq!(form_metrics(&g, &g).unwrap(), [1.0; 3]);
        let p = [[true, true, true], [false, false, false]];
        assert_eq!(form_metrics(&p, &g).unwrap(), [1.0, 0.5, 0.5]);
        assert!(form_metrics(&[], &[]).is_err());
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(cohens_kappa(&[1, 2, 1, 3], &[1, 2, 1, 3]).unwrap(), 1.0);
        assert_eq!(cohens_kappa(&[1, 1, 1, 1], &[1, 1, 0, 0]).unwrap(), 0.0);
        assert_eq!(cohens_kappa(&[4, 4], &[4, 4]).unwrap(), 1.0);
        assert!(cohens_kappa::<u8>(&[], &[]).is_err());
        assert!(cohens_kappa(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn report_table_scales_by_100() {
        let m = classification_metrics("age", 3, &[0, 1, 2, 2], &[0, 1, 2, 1], AbsentClasses::Exclude).unwrap();
        let r = MetricReport { tasks: vec![m] };
        assert!(r.to_table().contains("75.0"), "{}", r.to_table());
        let line = r.to_jsonl("dev");
        let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
        assert_eq!(v["label"], "dev");
        assert_eq!(v["accuracy"], 0.75);
    }

    fn labels() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        (1usize..40).prop_flat_map(|n| (prop::collection::vec(0usize..4, n), prop::collection::vec(0usize..4, n)))
    }

    proptest! {
        #[test]
        fn accuracy_is_trace_over_total((p, g) in labels()) {
            let m = classification_metrics("x", 4, &p, &g, AbsentClasses::Exclude).unwrap();
            let c = &m.confusion;
            prop_assert_eq!(m.accuracy, c.trace() as f64 / c.total() as f64);
            for (k, row) in c.counts.iter().enumerate() {
                prop_assert_eq!(row.iter().sum::<u64>() as usize, g.iter().filter(|x| **x == k).count());
            }
            prop_assert!(m.macro_f1 <= 1.0 && m.macro_f1 >= 0.0);
        }

        #[test]
        fn metrics_ignore_story_order((p, g) in labels(), seed in 0u64..1000) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut idx: Vec<usize> = (0..p.len()).collect();
            idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let ps: Vec<usize> = idx.iter().map(|i| p[*i]).collect();
            let gs: Vec<usize> = idx.iter().map(|i| g[*i]).collect();
            let a = classification_metrics("x", 4, &p, &g, AbsentClasses::Include).unwrap();
            let b = classification_metrics("x", 4, &ps, &gs, AbsentClasses::Include).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn kappa_is_symmetric((p, g) in labels()) {
            let ab = cohens_kappa(&p, &g).unwrap();
            let ba = cohens_kappa(&g, &p).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn macro_f1_is_one_iff_diagonal_with_all_classes(g in prop::collection::vec(0usize..3, 1..30), flip in any::<bool>()) {
            let mut p = g.clone();
            if flip { p[0] = (p[0] + 1) % 3; }
            let m = classification_metrics("x", 3, &p, &g, AbsentClasses::Include).unwrap();
            let diagonal = m.confusion.trace() == m.confusion.total();
            let all = (0..3).all(|c| m.confusion.present(c));
            prop_assert_eq!(m.macro_f1 == 1.0, diagonal && all);
        }
    }
}
