//! Synthetic classification tasks with quantified explanations.
//!
//! Every task is a pure function of its descriptor, seed, split sizes, and the
//! truth lexicon. Labels are sampled so that a quantified rule holds with the
//! quantifier's probability:
//!
//! * binary tasks carry one rule. When the rule's condition holds, the label
//!   the rule asserts is drawn with probability `p`; when it does not hold, the
//!   opposite label is drawn with probability `p`.
//! * multiclass tasks carry one rule per label, with mutually exclusive and
//!   exhaustive conditions. The firing rule's asserted outcome is drawn with
//!   probability `p`, otherwise a uniformly random label from the rest.

use std::collections::{HashMap, HashSet};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explanation::{
    Attributes, Classes, ComplexityDescriptor, ConditionNode, Explanation, Operator, Structure,
    Truth, Value,
};
use crate::parser::RESERVED_WORDS;
use crate::quantifier::{Quantifier, QuantifierLexicon, NUM_QUANTIFIERS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Domain {
    Int { min: i64, max: i64 },
    Categorical { values: Vec<String> },
}

impl Domain {
    pub fn values(&self) -> Vec<Value> {
        match self {
            Domain::Int { min, max } => (*min..=*max).map(Value::Int).collect(),
            Domain::Categorical { values } => values.iter().cloned().map(Value::Cat).collect(),
        }
    }

    pub fn size(&self) -> usize {
        match self {
            Domain::Int { min, max } => (max - min + 1) as usize,
            Domain::Categorical { values } => values.len(),
        }
    }

    pub fn contains(&self, value: &Value) -> bool {
        match (self, value) {
            (Domain::Int { min, max }, Value::Int(v)) => min <= v && v <= max,
            (Domain::Categorical { values }, Value::Cat(c)) => values.contains(c),
            _ => false,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Value {
        match self {
            Domain::Int { min, max } => Value::Int(rng.gen_range(*min..=*max)),
            Domain::Categorical { values } => Value::Cat(values.choose(rng).unwrap().clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub domain: Domain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub attributes: Attributes,
    pub label: String,
}

/// Features-as-text rendering: `"a is 1. b is x."` in attribute order.
pub fn fat_render(attributes: &Attributes) -> String {
    attributes
        .iter()
        .map(|(k, v)| format!("{k} is {v}."))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts {
            train: 200,
            validation: 50,
            test: 100,
        }
    }
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.validation + self.test
    }
}

/// Knobs beyond the descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskOptions {
    /// Label count for multiclass tasks, 3 to 5.
    pub multiclass_labels: usize,
    /// Quantifiers for the task's rules, cycled in rule order. `None` draws
    /// them from the task seed.
    pub quantifiers: Option<Vec<Quantifier>>,
}

impl Default for TaskOptions {
    fn default() -> Self {
        TaskOptions {
            multiclass_labels: 3,
            quantifiers: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub name: String,
    pub schema: Vec<AttributeSpec>,
    pub labels: Vec<String>,
    pub explanations: Vec<Explanation>,
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
    pub complexity: ComplexityDescriptor,
    pub generator_seed: u64,
    /// Generating probability of every quantifier the task's rules use.
    pub truth: IndexMap<Quantifier, f64>,
}

impl Task {
    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn domain(&self, attribute: &str) -> Option<&Domain> {
        self.schema
            .iter()
            .find(|a| a.name == attribute)
            .map(|a| &a.domain)
    }
}

/// Tasks in manifest order with a seen/unseen partition of their indices.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSuite {
    pub tasks: Vec<Task>,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
}

impl TaskSuite {
    pub fn seen_tasks(&self) -> impl Iterator<Item = &Task> {
        self.seen.iter().map(|&i| &self.tasks[i])
    }

    pub fn unseen_tasks(&self) -> impl Iterator<Item = &Task> {
        self.unseen.iter().map(|&i| &self.tasks[i])
    }

    /// Keeps only tasks satisfying `keep`, preserving the seen/unseen split.
    pub fn filter(&self, keep: impl Fn(&Task) -> bool) -> TaskSuite {
        let mut remap = HashMap::new();
        let mut tasks = Vec::new();
        for (i, t) in self.tasks.iter().enumerate() {
            if keep(t) {
                remap.insert(i, tasks.len());
                tasks.push(t.clone());
            }
        }
        let map = |ix: &[usize]| ix.iter().filter_map(|i| remap.get(i).copied()).collect();
        TaskSuite {
            tasks,
            seen: map(&self.seen),
            unseen: map(&self.unseen),
        }
    }
}

/// SplitMix64 finalizer; derives independent sub-seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvwz";
const VOWELS: &[u8] = b"aeiou";

struct Vocabulary {
    used: HashSet<String>,
}

impl Vocabulary {
    fn new() -> Self {
        Vocabulary {
            used: HashSet::new(),
        }
    }

    /// A fresh nonsense word of `syllables` consonant-vowel pairs, closed by a
    /// consonant when `closed` is set.
    fn word(&mut self, rng: &mut ChaCha8Rng, syllables: usize, closed: bool) -> String {
        loop {
            let mut w = String::new();
            for _ in 0..syllables {
                w.push(*CONSONANTS.choose(rng).unwrap() as char);
                w.push(*VOWELS.choose(rng).unwrap() as char);
            }
            if closed {
                w.push(*CONSONANTS.choose(rng).unwrap() as char);
            }
            if RESERVED_WORDS.contains(&w.as_str()) || Quantifier::lookup(&w).is_some() {
                continue;
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

fn leaf(attr: &AttributeSpec, op: Operator, value: Value) -> ConditionNode {
    ConditionNode::leaf(&attr.name, op, value).expect("generator builds well-typed leaves")
}

fn int_leaf(attr: &AttributeSpec, op: Operator, v: i64) -> ConditionNode {
    leaf(attr, op, Value::Int(v))
}

/// A random non-trivial positive comparison on `attr`.
fn positive_leaf(attr: &AttributeSpec, rng: &mut ChaCha8Rng) -> ConditionNode {
    match &attr.domain {
        Domain::Int { min, max } => {
            let op = *[
                Operator::Equal,
                Operator::Greater,
                Operator::Less,
                Operator::GreaterOrEqual,
                Operator::LessOrEqual,
            ]
            .choose(rng)
            .unwrap();
            let v = match op {
                Operator::Greater | Operator::LessOrEqual => rng.gen_range(*min..*max),
                Operator::Less | Operator::GreaterOrEqual => rng.gen_range(min + 1..=*max),
                _ => rng.gen_range(*min..=*max),
            };
            int_leaf(attr, op, v)
        }
        Domain::Categorical { values } => leaf(
            attr,
            Operator::Equal,
            Value::Cat(values.choose(rng).unwrap().clone()),
        ),
    }
}

fn leaves_mut(node: &mut ConditionNode) -> Vec<&mut ConditionNode> {
    match node {
        ConditionNode::Leaf(_) => vec![node],
        ConditionNode::Not(child) => leaves_mut(child),
        ConditionNode::And(cs) | ConditionNode::Or(cs) => cs.iter_mut().flat_map(leaves_mut).collect(),
    }
}

/// Introduces one clause negation: a `not equal to` leaf or a `not` wrapper.
fn add_clause_negation(node: ConditionNode, rng: &mut ChaCha8Rng) -> ConditionNode {
    let mut node = node;
    match rng.gen_range(0..3) {
        0 => {
            let equal: Vec<usize> = leaves_mut(&mut node)
                .iter()
                .enumerate()
                .filter(|(_, l)| matches!(l, ConditionNode::Leaf(c) if c.operator == Operator::Equal))
                .map(|(i, _)| i)
                .collect();
            match equal.choose(rng) {
                Some(&i) => {
                    if let ConditionNode::Leaf(c) = leaves_mut(&mut node).swap_remove(i) {
                        c.operator = Operator::NotEqual;
                    }
                    node
                }
                None => wrap_random_child(node, rng),
            }
        }
        1 => wrap_random_child(node, rng),
        _ => ConditionNode::negate(node),
    }
}

fn wrap_random_child(node: ConditionNode, rng: &mut ChaCha8Rng) -> ConditionNode {
    match node {
        ConditionNode::And(mut cs) => {
            let i = rng.gen_range(0..cs.len());
            cs[i] = ConditionNode::negate(cs[i].clone());
            ConditionNode::And(cs)
        }
        ConditionNode::Or(mut cs) => {
            let i = rng.gen_range(0..cs.len());
            cs[i] = ConditionNode::negate(cs[i].clone());
            ConditionNode::Or(cs)
        }
        other => ConditionNode::negate(other),
    }
}

fn junction(conj: bool, children: Vec<ConditionNode>) -> ConditionNode {
    if conj {
        ConditionNode::And(children)
    } else {
        ConditionNode::Or(children)
    }
}

/// Fraction of assignments to the condition's attributes that satisfy it.
fn firing_rate(cond: &ConditionNode, schema: &[AttributeSpec]) -> f64 {
    let attrs: Vec<&AttributeSpec> = cond
        .attributes()
        .into_iter()
        .map(|a| schema.iter().find(|s| s.name == a).expect("attribute in schema"))
        .collect();
    let domains: Vec<Vec<Value>> = attrs.iter().map(|a| a.domain.values()).collect();
    let mut total = 0usize;
    let mut fired = 0usize;
    for_each_assignment(&attrs, &domains, |assignment| {
        total += 1;
        if matches!(cond.evaluate(assignment), Ok(Truth::True)) {
            fired += 1;
        }
    });
    fired as f64 / total as f64
}

/// Calls `f` once per joint assignment of the given attributes.
pub fn for_each_assignment(
    attrs: &[&AttributeSpec],
    domains: &[Vec<Value>],
    mut f: impl FnMut(&Attributes),
) {
    let mut idx = vec![0usize; attrs.len()];
    let mut current: Attributes = attrs
        .iter()
        .zip(domains)
        .map(|(a, d)| (a.name.clone(), d[0].clone()))
        .collect();
    loop {
        f(&current);
        let mut k = 0;
        loop {
            if k == attrs.len() {
                return;
            }
            idx[k] += 1;
            if idx[k] < domains[k].len() {
                current[k] = domains[k][idx[k]].clone();
                break;
            }
            idx[k] = 0;
            current[k] = domains[k][0].clone();
            k += 1;
        }
    }
}

/// A binary-task condition with the requested structure and clause negation,
/// resampled until it fires on a moderate share of the attribute space.
fn binary_condition(
    structure: Structure,
    clause_negation: bool,
    schema: &[AttributeSpec],
    rng: &mut ChaCha8Rng,
) -> ConditionNode {
    let mut best: Option<(f64, ConditionNode)> = None;
    for _ in 0..64 {
        let mut attrs: Vec<&AttributeSpec> = schema.iter().collect();
        attrs.shuffle(rng);
        let cond = match structure {
            Structure::Simple => positive_leaf(attrs[0], rng),
            Structure::SingleJunction => {
                let n = rng.gen_range(2..=3);
                junction(
                    rng.gen_bool(0.5),
                    attrs[..n].iter().map(|a| positive_leaf(a, rng)).collect(),
                )
            }
            Structure::Nested => {
                let outer_conj = rng.gen_bool(0.5);
                let inner = junction(
                    !outer_conj,
                    attrs[..2].iter().map(|a| positive_leaf(a, rng)).collect(),
                );
                let other = if rng.gen_bool(0.5) {
                    junction(
                        !outer_conj,
                        attrs[2..4].iter().map(|a| positive_leaf(a, rng)).collect(),
                    )
                } else {
                    positive_leaf(attrs[2], rng)
                };
                let mut children = vec![inner, other];
                children.shuffle(rng);
                junction(outer_conj, children)
            }
        };
        let cond = if clause_negation {
            add_clause_negation(cond, rng)
        } else {
            cond
        };
        let rate = firing_rate(&cond, schema);
        let distance = (rate - 0.5).abs();
        if (0.2..=0.8).contains(&rate) {
            return cond;
        }
        if best.as_ref().is_none_or(|(d, _)| distance < *d) {
            best = Some((distance, cond));
        }
    }
    best.expect("at least one candidate").1
}

/// Rules over a pivot attribute with domain 0..=4, one per contiguous interval
/// of a random partition, expressed with the requested structure.
fn multiclass_conditions(
    structure: Structure,
    clause_negation: bool,
    n_labels: usize,
    pivot: &AttributeSpec,
    splitter: &AttributeSpec,
    rng: &mut ChaCha8Rng,
) -> Vec<ConditionNode> {
    let (min, max) = match pivot.domain {
        Domain::Int { min, max } => (min, max),
        _ => unreachable!("pivot is integer"),
    };
    let width = (max - min + 1) as usize;
    // interval boundaries: simple rules need singleton middles
    let cuts: Vec<i64> = if structure == Structure::Simple {
        let first = rng.gen_range(1..=width - (n_labels - 1));
        let mut c = vec![min + first as i64];
        for _ in 1..n_labels - 1 {
            c.push(c.last().unwrap() + 1);
        }
        c
    } else {
        let mut inner: Vec<i64> = ((min + 1)..=max).collect();
        inner.shuffle(rng);
        let mut c = inner[..n_labels - 1].to_vec();
        c.sort_unstable();
        c
    };
    let mut bounds = vec![min];
    bounds.extend(&cuts);
    bounds.push(max + 1);
    let intervals: Vec<(i64, i64)> = bounds.windows(2).map(|w| (w[0], w[1] - 1)).collect();

    intervals
        .iter()
        .map(|&(lo, hi)| {
            let simple_pos = || {
                if lo == hi {
                    int_leaf(pivot, Operator::Equal, lo)
                } else if lo == min {
                    int_leaf(pivot, Operator::LessOrEqual, hi)
                } else {
                    int_leaf(pivot, Operator::GreaterOrEqual, lo)
                }
            };
            let interval_conj = |negated: bool| {
                let upper = if negated {
                    ConditionNode::negate(int_leaf(pivot, Operator::Greater, hi))
                } else {
                    int_leaf(pivot, Operator::LessOrEqual, hi)
                };
                vec![int_leaf(pivot, Operator::GreaterOrEqual, lo), upper]
            };
            match (structure, clause_negation) {
                (Structure::Simple, false) => simple_pos(),
                (Structure::Simple, true) => {
                    let inner = if lo == hi {
                        int_leaf(pivot, Operator::NotEqual, lo)
                    } else if lo == min {
                        int_leaf(pivot, Operator::Greater, hi)
                    } else {
                        int_leaf(pivot, Operator::Less, lo)
                    };
                    ConditionNode::negate(inner)
                }
                (Structure::SingleJunction, neg) => {
                    if !neg && hi - lo <= 2 && rng.gen_bool(0.5) && lo != hi {
                        ConditionNode::Or((lo..=hi).map(|v| int_leaf(pivot, Operator::Equal, v)).collect())
                    } else {
                        ConditionNode::And(interval_conj(neg))
                    }
                }
                (Structure::Nested, neg) => {
                    let c = rng.gen_range(1..=4);
                    let (low, high) = if neg {
                        let l = int_leaf(splitter, Operator::Less, c);
                        (l.clone(), ConditionNode::negate(l))
                    } else {
                        (
                            int_leaf(splitter, Operator::Less, c),
                            int_leaf(splitter, Operator::GreaterOrEqual, c),
                        )
                    };
                    let mut a = interval_conj(false);
                    a.push(low);
                    let mut b = interval_conj(false);
                    b.push(high);
                    ConditionNode::Or(vec![ConditionNode::And(a), ConditionNode::And(b)])
                }
            }
        })
        .collect()
}

fn pick_quantifiers(n: usize, options: &TaskOptions, rng: &mut ChaCha8Rng) -> Vec<Quantifier> {
    match &options.quantifiers {
        Some(qs) if !qs.is_empty() => (0..n).map(|i| qs[i % qs.len()]).collect(),
        _ => {
            let mut all: Vec<Quantifier> = Quantifier::all().collect();
            all.shuffle(rng);
            (0..n).map(|i| all[i % NUM_QUANTIFIERS]).collect()
        }
    }
}

/// Generates one task with default options.
pub fn generate_task(
    complexity: ComplexityDescriptor,
    seed: u64,
    counts: SplitCounts,
    truth: &QuantifierLexicon,
) -> Task {
    generate_task_with(complexity, seed, counts, truth, &TaskOptions::default())
}

/// Generates one task.
///
/// # Panics
/// If any split count is zero, or `options.multiclass_labels` is outside
/// 3..=5.
pub fn generate_task_with(
    complexity: ComplexityDescriptor,
    seed: u64,
    counts: SplitCounts,
    truth: &QuantifierLexicon,
    options: &TaskOptions,
) -> Task {
    assert!(counts.train >= 1 && counts.validation >= 1 && counts.test >= 1);
    assert!((3..=5).contains(&options.multiclass_labels));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vocab = Vocabulary::new();

    let n_labels = match complexity.classes {
        Classes::Binary => 2,
        Classes::Multiclass => options.multiclass_labels,
    };
    let labels: Vec<String> = (0..n_labels).map(|_| vocab.word(&mut rng, 1, true)).collect();

    // schema: large enough that the splits can be disjoint
    let mut n_attrs = rng.gen_range(4..=8);
    let mut schema: Vec<AttributeSpec> = Vec::new();
    let needed = 4.0 * counts.total() as f64;
    loop {
        while schema.len() < n_attrs {
            let name = vocab.word(&mut rng, 2, false);
            let domain = if schema.len() < 2 || rng.gen_bool(0.5) {
                // the first two attributes are integer pivots for multiclass rules
                Domain::Int { min: 0, max: 4 }
            } else {
                let k = rng.gen_range(3..=5);
                Domain::Categorical {
                    values: (0..k).map(|_| vocab.word(&mut rng, 1, true)).collect(),
                }
            };
            schema.push(AttributeSpec { name, domain });
        }
        let space: f64 = schema.iter().map(|a| a.domain.size() as f64).product();
        if space >= needed || n_attrs >= 8 {
            break;
        }
        n_attrs += 1;
    }
    let space: f64 = schema.iter().map(|a| a.domain.size() as f64).product();
    assert!(space >= 2.0 * counts.total() as f64, "split counts too large for disjoint sampling");

    let n_rules = if complexity.classes == Classes::Binary { 1 } else { n_labels };
    let quantifiers = if complexity.quantified {
        pick_quantifiers(n_rules, options, &mut rng)
    } else {
        Vec::new()
    };
    let clause_neg = complexity.negation.clause();
    let label_neg = complexity.negation.label();

    let conditions = match complexity.classes {
        Classes::Binary => vec![binary_condition(complexity.structure, clause_neg, &schema, &mut rng)],
        Classes::Multiclass => {
            let mut order: Vec<usize> = (0..2).collect();
            order.shuffle(&mut rng);
            multiclass_conditions(
                complexity.structure,
                clause_neg,
                n_labels,
                &schema[order[0]],
                &schema[order[1]],
                &mut rng,
            )
        }
    };
    let mut targets: Vec<usize> = (0..n_labels).collect();
    targets.shuffle(&mut rng);
    let explanations: Vec<Explanation> = conditions
        .into_iter()
        .enumerate()
        .map(|(i, cond)| {
            Explanation::new(
                cond,
                quantifiers.get(i).copied(),
                labels[targets[i]].clone(),
                label_neg,
            )
        })
        .collect();

    let truth_record: IndexMap<Quantifier, f64> = {
        let mut used: Vec<Quantifier> = quantifiers.clone();
        used.sort();
        used.dedup();
        used.into_iter().map(|q| (q, truth.prob(q))).collect()
    };

    let mut seen_rows: HashSet<String> = HashSet::new();
    let mut draw_split = |n: usize, rng: &mut ChaCha8Rng, exclusive: bool| -> Vec<Example> {
        let mut out = Vec::with_capacity(n);
        let mut local: HashSet<String> = HashSet::new();
        while out.len() < n {
            let attributes: Attributes = schema
                .iter()
                .map(|a| (a.name.clone(), a.domain.sample(rng)))
                .collect();
            let key = fat_render(&attributes);
            if exclusive && seen_rows.contains(&key) {
                continue;
            }
            local.insert(key);
            let label = sample_label(&attributes, &explanations, &labels, truth, rng);
            out.push(Example { attributes, label });
        }
        seen_rows.extend(local);
        out
    };
    let train = draw_split(counts.train, &mut rng, true);
    let validation = draw_split(counts.validation, &mut rng, true);
    let test = draw_split(counts.test, &mut rng, true);

    Task {
        name: format!("synthetic-{seed:016x}"),
        schema,
        labels,
        explanations,
        train,
        validation,
        test,
        complexity,
        generator_seed: seed,
        truth: truth_record,
    }
}

fn rule_probability(exp: &Explanation, truth: &QuantifierLexicon) -> f64 {
    exp.quantifier.map_or(1.0, |q| truth.prob(q))
}

fn other_label(labels: &[String], not: &str, rng: &mut ChaCha8Rng) -> String {
    let others: Vec<&String> = labels.iter().filter(|l| l.as_str() != not).collect();
    (*others.choose(rng).unwrap()).clone()
}

fn sample_label(
    attributes: &Attributes,
    explanations: &[Explanation],
    labels: &[String],
    truth: &QuantifierLexicon,
    rng: &mut ChaCha8Rng,
) -> String {
    let fired = explanations
        .iter()
        .find(|e| matches!(e.condition.evaluate(attributes), Ok(Truth::True)));
    if labels.len() == 2 {
        let exp = &explanations[0];
        let p = rule_probability(exp, truth);
        let other = other_label(labels, &exp.label, rng);
        // the label the rule asserts for this example
        let asserts_target = fired.is_some() != exp.label_negated;
        let holds = rng.gen_bool(p);
        return if asserts_target == holds {
            exp.label.clone()
        } else {
            other
        };
    }
    let exp = fired.expect("multiclass rules are exhaustive");
    let p = rule_probability(exp, truth);
    let holds = rng.gen_bool(p);
    match (exp.label_negated, holds) {
        (false, true) | (true, false) => exp.label.clone(),
        (false, false) | (true, true) => other_label(labels, &exp.label, rng),
    }
}

/// Per-suite generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub per_complexity: usize,
    pub seed: u64,
    pub counts: SplitCounts,
    pub multiclass_labels: usize,
    /// Descriptors to generate; all 48 when empty.
    #[serde(default)]
    pub complexities: Vec<ComplexityDescriptor>,
}

impl SuiteConfig {
    pub fn new(per_complexity: usize, seed: u64) -> Self {
        SuiteConfig {
            per_complexity,
            seed,
            counts: SplitCounts::default(),
            multiclass_labels: 3,
            complexities: Vec::new(),
        }
    }

    pub fn descriptors(&self) -> Vec<ComplexityDescriptor> {
        if self.complexities.is_empty() {
            ComplexityDescriptor::all()
        } else {
            self.complexities.clone()
        }
    }
}

/// `per_complexity` tasks for each descriptor, all marked seen. Quantified
/// tasks within a descriptor cycle through the quantifier vocabulary so that
/// every quantifier is covered once `per_complexity * rules >= 15`.
pub fn generate_suite(config: &SuiteConfig, truth: &QuantifierLexicon) -> TaskSuite {
    assert!(config.per_complexity >= 1);
    let descriptors = config.descriptors();
    let jobs: Vec<(usize, ComplexityDescriptor, usize)> = descriptors
        .iter()
        .enumerate()
        .flat_map(|(d, desc)| (0..config.per_complexity).map(move |k| (d, *desc, k)))
        .collect();
    let tasks: Vec<Task> = crate::parallel::install(|| {
        jobs.par_iter()
            .enumerate()
            .map(|(id, &(d, desc, k))| {
                let seed = mix_seed(config.seed, id as u64 + 1);
                let rules = match desc.classes {
                    Classes::Binary => 1,
                    Classes::Multiclass => config.multiclass_labels,
                };
                let offset = (mix_seed(config.seed, 1_000_003 + d as u64) % NUM_QUANTIFIERS as u64) as usize;
                let quantifiers = desc.quantified.then(|| {
                    (0..rules)
                        .map(|r| {
                            Quantifier::from_index((offset + k * rules + r) % NUM_QUANTIFIERS).unwrap()
                        })
                        .collect()
                });
                let options = TaskOptions {
                    multiclass_labels: config.multiclass_labels,
                    quantifiers,
                };
                let mut task = generate_task_with(desc, seed, config.counts, truth, &options);
                task.name = format!("task_{id:04}");
                task
            })
            .collect()
    });
    let seen = (0..tasks.len()).collect();
    TaskSuite {
        tasks,
        seen,
        unseen: Vec::new(),
    }
}

/// Stratified seen/unseen split: each descriptor contributes
/// `ceil(fraction * n)` unseen tasks.
pub fn split_seen_unseen(suite: &TaskSuite, unseen_fraction: f64, seed: u64) -> Result<TaskSuite> {
    if !(unseen_fraction > 0.0 && unseen_fraction < 1.0) {
        return Err(Error::Config(format!(
            "unseen fraction must lie in (0, 1), got {unseen_fraction}"
        )));
    }
    let mut strata: IndexMap<ComplexityDescriptor, Vec<usize>> = IndexMap::new();
    for (i, t) in suite.tasks.iter().enumerate() {
        strata.entry(t.complexity).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unseen = Vec::new();
    for (desc, members) in &strata {
        if members.len() < 2 {
            return Err(Error::StratumTooSmall {
                descriptor: desc.to_string(),
                count: members.len(),
            });
        }
        let k = (unseen_fraction * members.len() as f64).ceil() as usize;
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        unseen.extend_from_slice(&shuffled[..k]);
    }
    unseen.sort_unstable();
    let unseen_set: HashSet<usize> = unseen.iter().copied().collect();
    let seen = (0..suite.tasks.len()).filter(|i| !unseen_set.contains(i)).collect();
    Ok(TaskSuite {
        tasks: suite.tasks.clone(),
        seen,
        unseen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explanation::Negation;

    fn desc(classes: Classes, negation: Negation, structure: Structure, quantified: bool) -> ComplexityDescriptor {
        ComplexityDescriptor {
            classes,
            negation,
            structure,
            quantified,
        }
    }

    #[test]
    fn unquantified_binary_rule_is_exact() {
        let d = desc(Classes::Binary, Negation::None, Structure::Simple, false);
        let t = generate_task(d, 7, SplitCounts::default(), &QuantifierLexicon::predefined());
        let exp = &t.explanations[0];
        let other = t.labels.iter().find(|l| **l != exp.label).unwrap();
        for ex in t.train.iter().chain(&t.validation).chain(&t.test) {
            let fires = exp.condition.evaluate(&ex.attributes).unwrap() == Truth::True;
            assert_eq!(&ex.label, if fires { &exp.label } else { other });
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let truth = QuantifierLexicon::predefined();
        for d in ComplexityDescriptor::all() {
            let a = generate_task(d, 11, SplitCounts::default(), &truth);
            let b = generate_task(d, 11, SplitCounts::default(), &truth);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn explanations_match_descriptor_axes() {
        let truth = QuantifierLexicon::predefined();
        for d in ComplexityDescriptor::all() {
            for seed in 0..5 {
                let t = generate_task(d, seed, SplitCounts { train: 10, validation: 5, test: 5 }, &truth);
                for e in &t.explanations {
                    let c = e.complexity(t.labels.len());
                    assert_eq!(c, d, "{e} under {d}");
                    assert!(e.condition.depth() <= 3);
                }
                let targets: HashSet<&String> = t.explanations.iter().map(|e| &e.label).collect();
                if d.classes == Classes::Multiclass {
                    assert_eq!(targets.len(), t.labels.len());
                }
            }
        }
    }

    #[test]
    fn splits_are_disjoint_and_in_domain() {
        let truth = QuantifierLexicon::predefined();
        let t = generate_task(
            desc(Classes::Multiclass, Negation::Both, Structure::Nested, true),
            3,
            SplitCounts::default(),
            &truth,
        );
        let key = |e: &Example| fat_render(&e.attributes);
        let train: HashSet<String> = t.train.iter().map(key).collect();
        let val: HashSet<String> = t.validation.iter().map(key).collect();
        assert!(t.test.iter().all(|e| !train.contains(&key(e)) && !val.contains(&key(e))));
        assert!(train.is_disjoint(&val));
        for e in t.test.iter() {
            for spec in &t.schema {
                assert!(spec.domain.contains(&e.attributes[&spec.name]));
            }
            assert!(t.labels.contains(&e.label));
        }
    }

    #[test]
    fn fat_rendering() {
        let a: Attributes = [("head".to_string(), Value::Int(1)), ("tail".to_string(), Value::Int(0))]
            .into_iter()
            .collect();
        assert_eq!(fat_render(&a), "head is 1. tail is 0.");
        assert_eq!(fat_render(&Attributes::new()), "");
    }

    #[test]
    fn suite_counts_and_split() {
        let truth = QuantifierLexicon::predefined();
        let mut cfg = SuiteConfig::new(2, 5);
        cfg.counts = SplitCounts { train: 4, validation: 2, test: 2 };
        let suite = generate_suite(&cfg, &truth);
        assert_eq!(suite.tasks.len(), 96);
        let mut per: HashMap<ComplexityDescriptor, usize> = HashMap::new();
        for t in &suite.tasks {
            *per.entry(t.complexity).or_default() += 1;
        }
        assert_eq!(per.len(), 48);
        assert!(per.values().all(|&n| n == 2));

        let split = split_seen_unseen(&suite, 0.2, 1).unwrap();
        assert_eq!(split.unseen.len(), 48);
        let again = split_seen_unseen(&suite, 0.2, 1).unwrap();
        assert_eq!(split.unseen, again.unseen);
        let seen: HashSet<_> = split.seen.iter().collect();
        assert!(split.unseen.iter().all(|i| !seen.contains(i)));
        assert_eq!(split.seen.len() + split.unseen.len(), 96);
    }

    #[test]
    fn split_rejects_singleton_strata() {
        let truth = QuantifierLexicon::predefined();
        let mut cfg = SuiteConfig::new(1, 5);
        cfg.counts = SplitCounts { train: 4, validation: 2, test: 2 };
        let suite = generate_suite(&cfg, &truth);
        assert!(matches!(
            split_seen_unseen(&suite, 0.5, 0),
            Err(Error::StratumTooSmall { count: 1, .. })
        ));
        assert!(split_seen_unseen(&suite, 1.0, 0).is_err());
    }

    #[test]
    fn ten_per_descriptor_gives_two_unseen_each() {
        let truth = QuantifierLexicon::predefined();
        let mut cfg = SuiteConfig::new(10, 5);
        cfg.counts = SplitCounts { train: 2, validation: 1, test: 1 };
        cfg.complexities = ComplexityDescriptor::all()[..3].to_vec();
        let suite = split_seen_unseen(&generate_suite(&cfg, &truth), 0.2, 9).unwrap();
        for d in &cfg.complexities {
            let n = suite.unseen_tasks().filter(|t| t.complexity == *d).count();
            assert_eq!(n, 2);
        }
    }
}
