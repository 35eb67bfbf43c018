//! Zero-shot evaluation, baselines, attention and quantifier-recovery
//! reports, and their CSV forms.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::entailment::ScorerConfig;
use crate::error::{Error, Result};
use crate::model::{explanation_weights, prepare_examples, ModelState};
use crate::parallel;
use crate::quantifier::{reference_relations, Quantifier, QuantifierLexicon, RelationKind};
use crate::taskgen::{Task, TaskSuite};
use crate::train::accuracy;

/// Equal-strength relations count as satisfied within this probability gap.
pub const EQUAL_TOLERANCE: f64 = 0.05;
/// Token-length bucket width of the attention report.
pub const BUCKET_WIDTH: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskAccuracy {
    pub task: String,
    pub complexity: String,
    pub accuracy: f64,
    pub ties: usize,
    pub examples: usize,
    pub delta_exent: Option<f64>,
    pub delta_majority: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityAccuracy {
    pub complexity: String,
    pub tasks: usize,
    pub mean_accuracy: f64,
    pub mean_delta_exent: Option<f64>,
    pub mean_delta_majority: Option<f64>,
}

/// Accuracy on every unseen task's test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub seed: Option<u64>,
    pub tasks: Vec<TaskAccuracy>,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for x in xs {
        sum += x;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

impl EvalReport {
    pub fn mean_accuracy(&self) -> f64 {
        mean(self.tasks.iter().map(|t| t.accuracy)).unwrap_or(0.0)
    }

    pub fn total_ties(&self) -> usize {
        self.tasks.iter().map(|t| t.ties).sum()
    }

    /// Per-descriptor means, in first-appearance order.
    pub fn per_complexity(&self) -> Vec<ComplexityAccuracy> {
        let mut groups: IndexMap<&str, Vec<&TaskAccuracy>> = IndexMap::new();
        for t in &self.tasks {
            groups.entry(t.complexity.as_str()).or_default().push(t);
        }
        groups
            .into_iter()
            .map(|(c, ts)| ComplexityAccuracy {
                complexity: c.to_string(),
                tasks: ts.len(),
                mean_accuracy: mean(ts.iter().map(|t| t.accuracy)).unwrap_or(0.0),
                mean_delta_exent: ts.iter().map(|t| t.delta_exent).collect::<Option<Vec<_>>>().and_then(mean),
                mean_delta_majority: ts
                    .iter()
                    .map(|t| t.delta_majority)
                    .collect::<Option<Vec<_>>>()
                    .and_then(mean),
            })
            .collect()
    }

    /// Fills the per-task differences against baseline reports over the same
    /// tasks.
    pub fn attach_baselines(&mut self, exent: Option<&EvalReport>, majority: Option<&EvalReport>) -> Result<()> {
        for (base, slot) in [(exent, 0), (majority, 1)] {
            let Some(base) = base else { continue };
            if base.tasks.len() != self.tasks.len() {
                return Err(Error::LengthMismatch {
                    expected: self.tasks.len(),
                    actual: base.tasks.len(),
                });
            }
            for (t, b) in self.tasks.iter_mut().zip(&base.tasks) {
                if t.task != b.task {
                    return Err(Error::Config(format!("baseline task `{}` does not match `{}`", b.task, t.task)));
                }
                let d = Some(t.accuracy - b.accuracy);
                if slot == 0 {
                    t.delta_exent = d;
                } else {
                    t.delta_majority = d;
                }
            }
        }
        Ok(())
    }

    pub fn write_tasks_csv<W: Write>(&self, out: W) -> Result<()> {
        write_rows(out, &self.tasks)
    }

    pub fn write_complexity_csv<W: Write>(&self, out: W) -> Result<()> {
        write_rows(out, &self.per_complexity())
    }

    pub fn read_tasks_csv<R: Read>(input: R) -> Result<Vec<TaskAccuracy>> {
        read_rows(input)
    }
}

fn write_rows<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

fn read_rows<R: Read, T: for<'de> Deserialize<'de>>(input: R) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(input);
    let rows = r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?;
    Ok(rows)
}

fn unseen(suite: &TaskSuite) -> Result<Vec<&Task>> {
    if suite.unseen.is_empty() {
        return Err(Error::NoUnseenTasks);
    }
    Ok(suite.unseen_tasks().collect())
}

fn task_accuracy(model: &ModelState, task: &Task, scorer: &ScorerConfig) -> Result<TaskAccuracy> {
    let test = prepare_examples(task, &task.test, scorer)?;
    let (acc, ties) = accuracy(model, &test)?;
    Ok(TaskAccuracy {
        task: task.name.clone(),
        complexity: task.complexity.to_string(),
        accuracy: acc,
        ties,
        examples: test.len(),
        delta_exent: None,
        delta_majority: None,
    })
}

/// Accuracy on each unseen task's test split. Train and validation splits of
/// unseen tasks are never read.
pub fn evaluate_zero_shot(model: &ModelState, suite: &TaskSuite, scorer: &ScorerConfig) -> Result<EvalReport> {
    evaluate_named(model, suite, scorer, "lasque")
}

fn evaluate_named(model: &ModelState, suite: &TaskSuite, scorer: &ScorerConfig, name: &str) -> Result<EvalReport> {
    let tasks = unseen(suite)?;
    let rows = parallel::install(|| {
        tasks
            .par_iter()
            .map(|t| task_accuracy(model, t, scorer))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(EvalReport {
        model: name.into(),
        seed: None,
        tasks: rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    /// All quantifier probabilities fixed at 1, mean aggregation, untrained.
    Exent,
    /// Most frequent training label of each task, lowest index on ties.
    Majority,
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exent" => Ok(Baseline::Exent),
            "majority" => Ok(Baseline::Majority),
            _ => Err(Error::Config(format!("unknown baseline `{s}`"))),
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Baseline::Exent => "exent",
            Baseline::Majority => "majority",
        })
    }
}

fn majority_accuracy(task: &Task) -> TaskAccuracy {
    let mut counts = vec![0usize; task.labels.len()];
    for e in &task.train {
        if let Some(i) = task.label_index(&e.label) {
            counts[i] += 1;
        }
    }
    let best = (0..counts.len()).fold(0, |b, i| if counts[i] > counts[b] { i } else { b });
    let ties = counts.iter().filter(|&&c| c == counts[best]).count() > 1;
    let correct = task.test.iter().filter(|e| e.label == task.labels[best]).count();
    TaskAccuracy {
        task: task.name.clone(),
        complexity: task.complexity.to_string(),
        accuracy: correct as f64 / task.test.len().max(1) as f64,
        ties: if ties { task.test.len() } else { 0 },
        examples: task.test.len(),
        delta_exent: None,
        delta_majority: None,
    }
}

pub fn run_baseline(baseline: Baseline, suite: &TaskSuite, scorer: &ScorerConfig) -> Result<EvalReport> {
    match baseline {
        Baseline::Exent => evaluate_named(&ModelState::exent(), suite, scorer, "exent"),
        Baseline::Majority => Ok(EvalReport {
            model: "majority".into(),
            seed: None,
            tasks: unseen(suite)?.into_iter().map(majority_accuracy).collect(),
        }),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightGroup {
    pub group: String,
    pub count: usize,
    pub mean_weight: f64,
}

/// Attention weights over every (unseen test example, explanation) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    /// Groups named `tokens:LO-HI`, ascending.
    pub buckets: Vec<WeightGroup>,
    pub quantified: WeightGroup,
    pub unquantified: WeightGroup,
    /// Quantifiers that occur, in lexicon order.
    pub per_quantifier: Vec<WeightGroup>,
}

impl AttentionReport {
    /// All groups, buckets first, as CSV rows of `group,count,mean_weight`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut rows = self.buckets.clone();
        rows.push(self.quantified.clone());
        rows.push(self.unquantified.clone());
        rows.extend(self.per_quantifier.iter().cloned());
        write_rows(out, &rows)
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Vec<WeightGroup>> {
        read_rows(input)
    }
}

#[derive(Default)]
struct Acc {
    sum: f64,
    count: usize,
}

impl Acc {
    fn push(&mut self, w: f64) {
        self.sum += w;
        self.count += 1;
    }

    fn group(&self, name: String) -> WeightGroup {
        WeightGroup {
            group: name,
            count: self.count,
            mean_weight: if self.count == 0 { 0.0 } else { self.sum / self.count as f64 },
        }
    }
}

pub fn attention_report(model: &ModelState, suite: &TaskSuite, scorer: &ScorerConfig) -> Result<AttentionReport> {
    if model.attention.is_none() {
        return Err(Error::AttentionDisabled);
    }
    let tasks = unseen(suite)?;
    // (tokens, quantifier, weight) per pair, task by task
    let records: Vec<Vec<(usize, Option<Quantifier>, f64)>> = parallel::install(|| {
        tasks
            .par_iter()
            .map(|t| {
                let meta: Vec<(usize, Option<Quantifier>)> = t
                    .explanations
                    .iter()
                    .map(|e| (e.token_count(), e.quantifier))
                    .collect();
                let mut out = Vec::new();
                for ex in prepare_examples(t, &t.test, scorer)? {
                    let w = explanation_weights(model, &ex)?;
                    out.extend(meta.iter().zip(w).map(|(&(n, q), w)| (n, q, w)));
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut buckets: std::collections::BTreeMap<usize, Acc> = Default::default();
    let (mut quant, mut plain) = (Acc::default(), Acc::default());
    let mut per_q: Vec<Acc> = Quantifier::all().map(|_| Acc::default()).collect();
    for (tokens, q, w) in records.into_iter().flatten() {
        buckets.entry(tokens / BUCKET_WIDTH).or_default().push(w);
        match q {
            Some(q) => {
                quant.push(w);
                per_q[q.index()].push(w);
            }
            None => plain.push(w),
        }
    }
    Ok(AttentionReport {
        buckets: buckets
            .into_iter()
            .map(|(b, acc)| {
                let lo = b * BUCKET_WIDTH;
                acc.group(format!("tokens:{}-{}", lo, lo + BUCKET_WIDTH - 1))
            })
            .collect(),
        quantified: quant.group("quantified".into()),
        unquantified: plain.group("unquantified".into()),
        per_quantifier: Quantifier::all()
            .zip(&per_q)
            .filter(|(_, a)| a.count > 0)
            .map(|(q, a)| a.group(format!("quantifier:{q}")))
            .collect(),
    })
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman needs equal lengths");
    pearson(&average_ranks(a), &average_ranks(b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantifierRow {
    pub quantifier: String,
    pub learned: f64,
    pub truth: f64,
    pub abs_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantifierRecovery {
    pub rows: Vec<QuantifierRow>,
    pub spearman: f64,
    /// Over all reference relations.
    pub relations_satisfied: f64,
    /// Over the strictly-greater reference relations only.
    pub strict_relations_satisfied: f64,
}

impl QuantifierRecovery {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_rows(out, &self.rows)
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Vec<QuantifierRow>> {
        read_rows(input)
    }
}

pub fn quantifier_recovery_report(learned: &QuantifierLexicon, truth: &QuantifierLexicon) -> QuantifierRecovery {
    let (l, t) = (learned.probabilities(), truth.probabilities());
    let rows = Quantifier::all()
        .map(|q| {
            let i = q.index();
            QuantifierRow {
                quantifier: q.word().into(),
                learned: l[i],
                truth: t[i],
                abs_error: (l[i] - t[i]).abs(),
            }
        })
        .collect();
    let rels = reference_relations();
    let satisfied = |kinds: &[RelationKind]| {
        let chosen: Vec<_> = rels.iter().filter(|r| kinds.contains(&r.kind)).collect();
        let ok = chosen.iter().filter(|r| r.is_satisfied(learned, EQUAL_TOLERANCE)).count();
        ok as f64 / chosen.len() as f64
    };
    QuantifierRecovery {
        rows,
        spearman: spearman(&l, &t),
        relations_satisfied: satisfied(&[RelationKind::StrictlyGreater, RelationKind::Equal]),
        strict_relations_satisfied: satisfied(&[RelationKind::StrictlyGreater]),
    }
}
