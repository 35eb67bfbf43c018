//! The classification head: per-explanation class logits from NLI scores and
//! quantifier probabilities, aggregation across explanations (mean or learned
//! attention), softmax cross-entropy, the ranking penalty, and analytic
//! gradients for every trainable parameter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::entailment::{nli_scores, pair_features, NliScores, PairKey, ScorerConfig, PAIR_FEATURES};
use crate::error::{Error, Result};
use crate::explanation::{Attributes, Explanation};
use crate::quantifier::{
    ranking_loss, OrdinalRelation, Quantifier, QuantifierLexicon, NUM_QUANTIFIERS,
};
use crate::taskgen::{fat_render, Example, Task};

pub const DEFAULT_HIDDEN: usize = 16;
pub const ATTENTION_INIT_RANGE: f64 = 0.1;
pub const DEFAULT_LAMBDA: f64 = 10.0;

/// Two-layer tanh network scoring each (explanation, example) pair.
///
/// Parameters are stored flat: `w1` (`PAIR_FEATURES x hidden`, row-major),
/// then `b1`, `w2`, and the scalar `b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionNet {
    hidden: usize,
    params: Vec<f64>,
}

impl AttentionNet {
    pub fn zeros(hidden: usize) -> Self {
        assert!(hidden >= 1, "hidden width must be positive");
        AttentionNet {
            hidden,
            params: vec![0.0; Self::param_count(hidden)],
        }
    }

    /// Parameters drawn uniformly from [-0.1, 0.1].
    pub fn random(hidden: usize, seed: u64) -> Self {
        let mut net = Self::zeros(hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in net.params.iter_mut() {
            *p = rng.gen_range(-ATTENTION_INIT_RANGE..=ATTENTION_INIT_RANGE);
        }
        net
    }

    pub fn param_count(hidden: usize) -> usize {
        PAIR_FEATURES * hidden + 2 * hidden + 1
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn b1_offset(&self) -> usize {
        PAIR_FEATURES * self.hidden
    }

    fn w2_offset(&self) -> usize {
        self.b1_offset() + self.hidden
    }

    fn b2_offset(&self) -> usize {
        self.w2_offset() + self.hidden
    }

    /// Human-readable name of a flat parameter index.
    pub fn param_name(&self, index: usize) -> String {
        let h = self.hidden;
        if index < self.b1_offset() {
            format!("attention.w1[{}][{}]", index / h, index % h)
        } else if index < self.w2_offset() {
            format!("attention.b1[{}]", index - self.b1_offset())
        } else if index < self.b2_offset() {
            format!("attention.w2[{}]", index - self.w2_offset())
        } else {
            "attention.b2".into()
        }
    }

    /// Raw score and hidden activations for one feature vector.
    fn score(&self, x: &[f64; PAIR_FEATURES]) -> (f64, Vec<f64>) {
        let h = self.hidden;
        let mut act: Vec<f64> = self.params[self.b1_offset()..self.w2_offset()].to_vec();
        for (i, xi) in x.iter().enumerate() {
            if *xi == 0.0 {
                continue;
            }
            let row = &self.params[i * h..(i + 1) * h];
            for (a, w) in act.iter_mut().zip(row) {
                *a += xi * w;
            }
        }
        act.iter_mut().for_each(|a| *a = a.tanh());
        let w2 = &self.params[self.w2_offset()..self.b2_offset()];
        let out = act.iter().zip(w2).map(|(a, w)| a * w).sum::<f64>() + self.params[self.b2_offset()];
        (out, act)
    }

    /// Accumulates the gradient of `d(loss)/d(score) = delta` into `grad`.
    fn backward(&self, x: &[f64; PAIR_FEATURES], act: &[f64], delta: f64, grad: &mut [f64]) {
        let h = self.hidden;
        let (b1, w2, b2) = (self.b1_offset(), self.w2_offset(), self.b2_offset());
        grad[b2] += delta;
        for k in 0..h {
            grad[w2 + k] += delta * act[k];
            let dpre = delta * self.params[w2 + k] * (1.0 - act[k] * act[k]);
            grad[b1 + k] += dpre;
            for (i, xi) in x.iter().enumerate() {
                grad[i * h + k] += xi * dpre;
            }
        }
    }

    pub fn weights(&self, features: &[[f64; PAIR_FEATURES]]) -> Vec<f64> {
        let scores: Vec<f64> = features.iter().map(|x| self.score(x).0).collect();
        softmax(&scores)
    }
}

#[derive(Serialize, Deserialize)]
struct AttentionRepr {
    hidden: usize,
    w1: Vec<Vec<f64>>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
}

impl Serialize for AttentionNet {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let h = self.hidden;
        AttentionRepr {
            hidden: h,
            w1: self.params[..self.b1_offset()].chunks(h).map(<[f64]>::to_vec).collect(),
            b1: self.params[self.b1_offset()..self.w2_offset()].to_vec(),
            w2: self.params[self.w2_offset()..self.b2_offset()].to_vec(),
            b2: self.params[self.b2_offset()],
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for AttentionNet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        use serde::de::Error as _;
        let r = AttentionRepr::deserialize(deserializer)?;
        let h = r.hidden;
        let shape_ok = h >= 1
            && r.w1.len() == PAIR_FEATURES
            && r.w1.iter().all(|row| row.len() == h)
            && r.b1.len() == h
            && r.w2.len() == h;
        if !shape_ok {
            return Err(D::Error::custom(format!(
                "attention matrices do not match {PAIR_FEATURES} x {h}"
            )));
        }
        let mut params: Vec<f64> = r.w1.into_iter().flatten().collect();
        params.extend(r.b1);
        params.extend(r.w2);
        params.push(r.b2);
        if params.iter().any(|p| !p.is_finite()) {
            return Err(D::Error::custom("non-finite attention parameter"));
        }
        Ok(AttentionNet { hidden: h, params })
    }
}

/// Variants of the logit assignment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogitOptions {
    /// Add `s_n / |L|` to every label.
    pub neutral_term: bool,
    /// Divide the `(1 - p)` share given to non-target labels by `|L| - 1`.
    pub complement_split: bool,
}

impl Default for LogitOptions {
    fn default() -> Self {
        LogitOptions {
            neutral_term: true,
            complement_split: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub lexicon: QuantifierLexicon,
    /// `None` selects mean aggregation.
    pub attention: Option<AttentionNet>,
    pub lambda: f64,
    pub relations: Vec<OrdinalRelation>,
    /// Treat every quantifier probability as 1.
    #[serde(default)]
    pub ignore_quantifiers: bool,
    #[serde(default)]
    pub logits: LogitOptions,
}

impl ModelState {
    pub fn new(lexicon: QuantifierLexicon, attention: Option<AttentionNet>) -> Self {
        ModelState {
            lexicon,
            attention,
            lambda: 0.0,
            relations: Vec::new(),
            ignore_quantifiers: false,
            logits: LogitOptions::default(),
        }
    }

    /// Mean aggregation with every quantifier probability fixed at 1.
    pub fn exent() -> Self {
        ModelState {
            ignore_quantifiers: true,
            ..Self::new(QuantifierLexicon::predefined(), None)
        }
    }

    pub fn with_ranking(mut self, lambda: f64, relations: Vec<OrdinalRelation>) -> Self {
        self.lambda = lambda;
        self.relations = relations;
        self
    }

    pub fn uses_ranking(&self) -> bool {
        self.lambda > 0.0 && !self.relations.is_empty()
    }

    /// Probability used for an explanation's quantifier, and whether it is
    /// learnable along this path.
    fn quantifier_probability(&self, q: Option<Quantifier>) -> (f64, Option<Quantifier>) {
        match q {
            Some(q) if !self.ignore_quantifiers => (self.lexicon.prob(q), Some(q)),
            _ => (1.0, None),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.lexicon.raw().iter().any(|r| r.is_nan()) {
            return Err(Error::Config("lexicon has NaN parameters".into()));
        }
        Ok(())
    }
}

/// One (explanation, example) pair, ready for the head.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub target: usize,
    pub negated: bool,
    pub quantifier: Option<Quantifier>,
    pub scores: NliScores,
    pub features: [f64; PAIR_FEATURES],
}

/// An example with its NLI scores against every task explanation.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedExample {
    pub gold: usize,
    pub n_labels: usize,
    pub pairs: Vec<Pair>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedTask {
    pub n_labels: usize,
    pub train: Vec<PreparedExample>,
    pub validation: Vec<PreparedExample>,
    pub test: Vec<PreparedExample>,
}

/// FNV-1a over the example's features-as-text rendering.
fn example_key(attributes: &Attributes) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in fat_render(attributes).bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn prepare_example(task: &Task, example: &Example, scorer: &ScorerConfig) -> Result<PreparedExample> {
    let gold = task
        .label_index(&example.label)
        .ok_or_else(|| Error::UnknownLabel(example.label.clone()))?;
    let ex_key = example_key(&example.attributes);
    let pairs = task
        .explanations
        .iter()
        .enumerate()
        .map(|(j, exp)| {
            let key = PairKey {
                task: task.generator_seed,
                explanation: j,
                example: ex_key,
            };
            prepare_pair(exp, &task.labels, &example.attributes, scorer, key)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedExample {
        gold,
        n_labels: task.labels.len(),
        pairs,
    })
}

fn prepare_pair(
    exp: &Explanation,
    labels: &[String],
    attributes: &Attributes,
    scorer: &ScorerConfig,
    key: PairKey,
) -> Result<Pair> {
    let target = labels
        .iter()
        .position(|l| *l == exp.label)
        .ok_or_else(|| Error::UnknownLabel(exp.label.clone()))?;
    let scores = nli_scores(exp, attributes, scorer, key)?;
    Ok(Pair {
        target,
        negated: exp.label_negated,
        quantifier: exp.quantifier,
        scores,
        features: pair_features(exp, &scores),
    })
}

/// Prepares a list of the task's examples, typically one split.
pub fn prepare_examples(task: &Task, examples: &[Example], scorer: &ScorerConfig) -> Result<Vec<PreparedExample>> {
    examples
        .iter()
        .map(|e| prepare_example(task, e, scorer))
        .collect()
}

pub fn prepare_task(task: &Task, scorer: &ScorerConfig) -> Result<PreparedTask> {
    Ok(PreparedTask {
        n_labels: task.labels.len(),
        train: prepare_examples(task, &task.train, scorer)?,
        validation: prepare_examples(task, &task.validation, scorer)?,
        test: prepare_examples(task, &task.test, scorer)?,
    })
}

/// Logits for one pair at quantifier probability `p`, and their derivative
/// with respect to `p`.
fn pair_logits(
    scores: &NliScores,
    target: usize,
    negated: bool,
    p: f64,
    n_labels: usize,
    opts: LogitOptions,
) -> (Vec<f64>, Vec<f64>) {
    let (pos, neg) = if negated {
        (scores.contradict, scores.entail)
    } else {
        (scores.entail, scores.contradict)
    };
    let neutral = if opts.neutral_term {
        scores.neutral / n_labels as f64
    } else {
        0.0
    };
    let share = if opts.complement_split && n_labels > 1 {
        1.0 / (n_labels - 1) as f64
    } else {
        1.0
    };
    let mut z = vec![p * neg + (1.0 - p) * pos * share + neutral; n_labels];
    let mut dz = vec![neg - pos * share; n_labels];
    z[target] = p * pos + (1.0 - p) * neg + neutral;
    dz[target] = pos - neg;
    (z, dz)
}

/// Class logits for one explanation given its NLI scores.
pub fn class_logits(
    scores: &NliScores,
    exp: &Explanation,
    lexicon: &QuantifierLexicon,
    labels: &[String],
) -> Result<Vec<f64>> {
    class_logits_with(scores, exp, lexicon, labels, LogitOptions::default())
}

pub fn class_logits_with(
    scores: &NliScores,
    exp: &Explanation,
    lexicon: &QuantifierLexicon,
    labels: &[String],
    opts: LogitOptions,
) -> Result<Vec<f64>> {
    let target = labels
        .iter()
        .position(|l| *l == exp.label)
        .ok_or_else(|| Error::UnknownLabel(exp.label.clone()))?;
    let p = exp.quantifier.map_or(1.0, |q| lexicon.prob(q));
    Ok(pair_logits(scores, target, exp.label_negated, p, labels.len(), opts).0)
}

pub fn aggregate_mean(logits: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = logits.first().ok_or(Error::EmptyAggregate)?;
    let m = logits.len() as f64;
    let mut out = vec![0.0; first.len()];
    for z in logits {
        if z.len() != out.len() {
            return Err(Error::LengthMismatch {
                expected: out.len(),
                actual: z.len(),
            });
        }
        out.iter_mut().zip(z).for_each(|(o, v)| *o += v / m);
    }
    Ok(out)
}

pub fn aggregate_attention(logits: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    if logits.len() != weights.len() {
        return Err(Error::LengthMismatch {
            expected: logits.len(),
            actual: weights.len(),
        });
    }
    let first = logits.first().ok_or(Error::EmptyAggregate)?;
    let mut out = vec![0.0; first.len()];
    for (z, w) in logits.iter().zip(weights) {
        if z.len() != out.len() {
            return Err(Error::LengthMismatch {
                expected: out.len(),
                actual: z.len(),
            });
        }
        out.iter_mut().zip(z).for_each(|(o, v)| *o += w * v);
    }
    Ok(out)
}

/// Attention weights for a list of pair feature vectors.
pub fn attention_weights(features: &[[f64; PAIR_FEATURES]], net: &AttentionNet) -> Result<Vec<f64>> {
    if features.is_empty() {
        return Err(Error::EmptyAggregate);
    }
    Ok(net.weights(features))
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Index of the largest entry; the lowest index wins ties. Also reports
/// whether a tie occurred.
pub fn argmax(xs: &[f64]) -> (usize, bool) {
    let mut best = 0;
    let mut tie = false;
    for (i, x) in xs.iter().enumerate().skip(1) {
        if *x > xs[best] {
            best = i;
            tie = false;
        } else if *x == xs[best] {
            tie = true;
        }
    }
    (best, tie)
}

struct Forward {
    logits: Vec<Vec<f64>>,
    dlogits_dp: Vec<Vec<f64>>,
    learnable: Vec<Option<Quantifier>>,
    weights: Vec<f64>,
    hidden: Vec<Vec<f64>>,
    aggregated: Vec<f64>,
}

fn forward(model: &ModelState, ex: &PreparedExample) -> Result<Forward> {
    if ex.pairs.is_empty() {
        return Err(Error::EmptyAggregate);
    }
    let m = ex.pairs.len();
    let mut logits = Vec::with_capacity(m);
    let mut dlogits_dp = Vec::with_capacity(m);
    let mut learnable = Vec::with_capacity(m);
    for pair in &ex.pairs {
        let (p, q) = model.quantifier_probability(pair.quantifier);
        let (z, dz) = pair_logits(&pair.scores, pair.target, pair.negated, p, ex.n_labels, model.logits);
        logits.push(z);
        dlogits_dp.push(dz);
        learnable.push(q);
    }
    let (weights, hidden) = match &model.attention {
        Some(net) => {
            let (scores, hidden): (Vec<f64>, Vec<Vec<f64>>) =
                ex.pairs.iter().map(|p| net.score(&p.features)).unzip();
            (softmax(&scores), hidden)
        }
        None => (vec![1.0 / m as f64; m], Vec::new()),
    };
    let aggregated = aggregate_attention(&logits, &weights)?;
    Ok(Forward {
        logits,
        dlogits_dp,
        learnable,
        weights,
        hidden,
        aggregated,
    })
}

/// Label distribution for a prepared example.
pub fn predict_prepared(model: &ModelState, ex: &PreparedExample) -> Result<Vec<f64>> {
    Ok(softmax(&forward(model, ex)?.aggregated))
}

/// Attention weights the model assigns to each of the example's explanations.
pub fn explanation_weights(model: &ModelState, ex: &PreparedExample) -> Result<Vec<f64>> {
    Ok(forward(model, ex)?.weights)
}

/// Label distribution for one example of `task`.
pub fn predict(
    attributes: &Attributes,
    task: &Task,
    model: &ModelState,
    scorer: &ScorerConfig,
) -> Result<Vec<f64>> {
    if task.explanations.is_empty() {
        return Err(Error::EmptyAggregate);
    }
    let ex = Example {
        attributes: attributes.clone(),
        label: task.labels[0].clone(),
    };
    predict_prepared(model, &prepare_example(task, &ex, scorer)?)
}

/// Gradient of the total loss, mirroring the trainable parts of
/// [`ModelState`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub lexicon: [f64; NUM_QUANTIFIERS],
    /// Flat, in [`AttentionNet::params`] order; empty without attention.
    pub attention: Vec<f64>,
}

impl Gradients {
    pub fn zeros(model: &ModelState) -> Self {
        Gradients {
            lexicon: [0.0; NUM_QUANTIFIERS],
            attention: vec![0.0; model.attention.as_ref().map_or(0, |n| n.params().len())],
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.lexicon.iter_mut().for_each(|g| *g *= k);
        self.attention.iter_mut().for_each(|g| *g *= k);
    }

    pub fn add(&mut self, other: &Gradients) {
        self.lexicon
            .iter_mut()
            .zip(&other.lexicon)
            .for_each(|(a, b)| *a += b);
        self.attention
            .iter_mut()
            .zip(&other.attention)
            .for_each(|(a, b)| *a += b);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    /// Unweighted ranking loss.
    pub rank: f64,
    pub total: f64,
}

/// Cross-entropy of one example, accumulating its gradient when requested.
fn example_loss(
    model: &ModelState,
    ex: &PreparedExample,
    grad: Option<&mut Gradients>,
    grad_scale: f64,
) -> Result<f64> {
    let fwd = forward(model, ex)?;
    let loss = log_sum_exp(&fwd.aggregated) - fwd.aggregated[ex.gold];
    let Some(grad) = grad else {
        return Ok(loss);
    };
    let mut g = softmax(&fwd.aggregated);
    g[ex.gold] -= 1.0;
    g.iter_mut().for_each(|v| *v *= grad_scale);

    for (j, w) in fwd.weights.iter().enumerate() {
        if let Some(q) = fwd.learnable[j] {
            if !model.lexicon.frozen {
                let dp: f64 = g.iter().zip(&fwd.dlogits_dp[j]).map(|(a, b)| a * b).sum::<f64>() * w;
                grad.lexicon[q.index()] += dp * model.lexicon.dprob_draw(q);
            }
        }
    }
    if let Some(net) = &model.attention {
        let u: Vec<f64> = fwd
            .logits
            .iter()
            .map(|z| z.iter().zip(&g).map(|(a, b)| a * b).sum())
            .collect();
        let mean_u: f64 = u.iter().zip(&fwd.weights).map(|(a, w)| a * w).sum();
        for (j, pair) in ex.pairs.iter().enumerate() {
            let delta = fwd.weights[j] * (u[j] - mean_u);
            net.backward(&pair.features, &fwd.hidden[j], delta, &mut grad.attention);
        }
    }
    Ok(loss)
}

/// Mean cross-entropy over the batch.
pub fn ce_loss(model: &ModelState, batch: &[&PreparedExample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut sum = 0.0;
    for ex in batch {
        sum += example_loss(model, ex, None, 0.0)?;
    }
    Ok(sum / batch.len() as f64)
}

fn ranking_term(model: &ModelState) -> (f64, [f64; NUM_QUANTIFIERS]) {
    if model.relations.is_empty() {
        return (0.0, [0.0; NUM_QUANTIFIERS]);
    }
    let r = ranking_loss(&model.lexicon, &model.relations);
    (r.value, r.grad)
}

/// `ce + lambda * rank`.
pub fn total_loss(model: &ModelState, batch: &[&PreparedExample]) -> Result<LossBreakdown> {
    let ce = ce_loss(model, batch)?;
    let (rank, _) = ranking_term(model);
    Ok(LossBreakdown {
        ce,
        rank,
        total: ce + model.lambda * rank,
    })
}

/// Total loss and its analytic gradient.
pub fn gradients(model: &ModelState, batch: &[&PreparedExample]) -> Result<(LossBreakdown, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut grad = Gradients::zeros(model);
    let scale = 1.0 / batch.len() as f64;
    let mut ce = 0.0;
    for ex in batch {
        ce += example_loss(model, ex, Some(&mut grad), scale)?;
    }
    ce *= scale;
    let (rank, rank_grad) = ranking_term(model);
    if model.lambda != 0.0 {
        for (g, r) in grad.lexicon.iter_mut().zip(rank_grad) {
            *g += model.lambda * r;
        }
    }
    Ok((
        LossBreakdown {
            ce,
            rank,
            total: ce + model.lambda * rank,
        },
        grad,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub parameter: String,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    /// Frozen lexicon parameters are not compared.
    pub skipped: usize,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Gradients smaller than this in magnitude are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_CHECK_FLOOR)
}

/// Differences each loss term separately so a large ranking value does not
/// swamp the cross-entropy difference in rounding error.
fn central_difference(lambda: f64, up: &LossBreakdown, down: &LossBreakdown, step: f64) -> f64 {
    ((up.ce - down.ce) + lambda * (up.rank - down.rank)) / (2.0 * step)
}

/// Compares analytic gradients with central differences of the total loss.
pub fn finite_difference_check(
    model: &ModelState,
    batch: &[&PreparedExample],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(Error::Config(format!("step must be positive, got {step}")));
    }
    let (_, analytic) = gradients(model, batch)?;
    let mut entries = Vec::new();
    let mut skipped = 0;
    let mut probe = model.clone();
    for q in Quantifier::all() {
        if model.lexicon.frozen {
            skipped += 1;
            continue;
        }
        let i = q.index();
        let base = model.lexicon.raw()[i];
        probe.lexicon.raw_mut()[i] = base + step;
        let up = total_loss(&probe, batch)?;
        probe.lexicon.raw_mut()[i] = base - step;
        let down = total_loss(&probe, batch)?;
        probe.lexicon.raw_mut()[i] = base;
        let numeric = central_difference(model.lambda, &up, &down, step);
        entries.push(GradCheckEntry {
            parameter: format!("lexicon.{q}"),
            analytic: analytic.lexicon[i],
            numeric,
            relative_error: relative_error(analytic.lexicon[i], numeric),
        });
    }
    if let Some(net) = &model.attention {
        for i in 0..net.params().len() {
            let base = net.params()[i];
            let set = |probe: &mut ModelState, v: f64| {
                probe.attention.as_mut().unwrap().params_mut()[i] = v;
            };
            set(&mut probe, base + step);
            let up = total_loss(&probe, batch)?;
            set(&mut probe, base - step);
            let down = total_loss(&probe, batch)?;
            set(&mut probe, base);
            let numeric = central_difference(model.lambda, &up, &down, step);
            entries.push(GradCheckEntry {
                parameter: net.param_name(i),
                analytic: analytic.attention[i],
                numeric,
                relative_error: relative_error(analytic.attention[i], numeric),
            });
        }
    }
    let max_relative_error = entries
        .iter()
        .map(|e| e.relative_error)
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_relative_error < tolerance,
        entries,
        skipped,
        max_relative_error,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explanation::{ConditionNode, Operator, Value};

    fn labels(n: usize) -> Vec<String> {
        ["dax", "wug", "fep", "blick", "toma"][..n].iter().map(|s| s.to_string()).collect()
    }

    fn exp(q: Option<&str>, negated: bool) -> Explanation {
        let c = ConditionNode::leaf("head", Operator::Equal, Value::Int(1)).unwrap();
        Explanation::new(c, q.map(|w| w.parse().unwrap()), "dax", negated)
    }

    #[test]
    fn clean_vertex_logits() {
        let z = class_logits(
            &NliScores::new(1.0, 0.0, 0.0),
            &exp(None, false),
            &QuantifierLexicon::predefined(),
            &labels(2),
        )
        .unwrap();
        assert_eq!(z, vec![1.0, 0.0]);
    }

    #[test]
    fn half_probability_is_uniform() {
        let lex = QuantifierLexicon::from_probabilities([0.5; NUM_QUANTIFIERS]);
        for scores in [
            NliScores::new(0.2, 0.5, 0.3),
            NliScores::new(1.0, 0.0, 0.0),
            NliScores::new(0.0, 0.1, 0.9),
        ] {
            for n in [2, 3, 5] {
                let z = class_logits(&scores, &exp(Some("often"), false), &lex, &labels(n)).unwrap();
                assert!(z.iter().all(|v| (v - z[0]).abs() < 1e-15), "{z:?}");
            }
        }
    }

    #[test]
    fn negated_label_flip() {
        let lex = QuantifierLexicon::predefined();
        let z = class_logits(
            &NliScores::new(1.0, 0.0, 0.0),
            &exp(Some("always"), true),
            &lex,
            &labels(3),
        )
        .unwrap();
        assert!((z[0] - 0.05).abs() < 1e-12);
        assert!((z[1] - 0.95).abs() < 1e-12);
        assert!((z[2] - 0.95).abs() < 1e-12);
        assert!(matches!(
            class_logits(&NliScores::new(1.0, 0.0, 0.0), &exp(None, false), &lex, &labels(1)[1..]),
            Err(Error::UnknownLabel(_))
        ));
    }

    #[test]
    fn aggregation() {
        assert!(aggregate_mean(&[]).is_err());
        assert_eq!(aggregate_mean(&[vec![0.3, 0.7]]).unwrap(), vec![0.3, 0.7]);
        assert_eq!(aggregate_mean(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), vec![0.5, 0.5]);
        let zs = [vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(aggregate_attention(&zs, &[1.0, 0.0]).unwrap(), zs[0]);
        assert_eq!(aggregate_attention(&zs, &[0.3, 0.7]).unwrap(), vec![0.3, 0.7]);
        assert_eq!(
            aggregate_attention(&zs, &[0.5, 0.5]).unwrap(),
            aggregate_mean(&zs).unwrap()
        );
        assert!(matches!(
            aggregate_attention(&zs, &[1.0]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn attention_weight_properties() {
        let feats: Vec<[f64; PAIR_FEATURES]> = (0..4)
            .map(|i| {
                let mut f = [0.0; PAIR_FEATURES];
                f[0] = i as f64 * 0.3;
                f[PAIR_FEATURES - 1] = 1.0;
                f
            })
            .collect();
        let w = attention_weights(&feats, &AttentionNet::zeros(16)).unwrap();
        assert!(w.iter().all(|x| (x - 0.25).abs() < 1e-15));
        let net = AttentionNet::random(16, 4);
        assert_eq!(attention_weights(&feats[..1], &net).unwrap(), vec![1.0]);
        let w = attention_weights(&feats, &net).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut shifted = net.clone();
        let b2 = shifted.params().len() - 1;
        shifted.params_mut()[b2] += 3.7;
        let w2 = attention_weights(&feats, &shifted).unwrap();
        for (a, b) in w.iter().zip(&w2) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(attention_weights(&[], &net).is_err());
    }

    #[test]
    fn argmax_ties_prefer_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), (1, true));
        assert_eq!(argmax(&[0.7, 0.1]), (0, false));
        assert_eq!(argmax(&[0.5, 0.5]), (0, true));
    }

    #[test]
    fn attention_serde_round_trip() {
        let net = AttentionNet::random(5, 1);
        let json = serde_json::to_string(&net).unwrap();
        let back: AttentionNet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, net);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["w1"].as_array().unwrap().len(), PAIR_FEATURES);
    }

    fn prepared(descriptor: usize, seed: u64, scorer: ScorerConfig) -> PreparedTask {
        use crate::taskgen::{generate_task, SplitCounts};
        let d = crate::explanation::ComplexityDescriptor::all()[descriptor];
        let counts = SplitCounts { train: 6, validation: 2, test: 2 };
        let t = generate_task(d, seed, counts, &QuantifierLexicon::predefined());
        prepare_task(&t, &scorer).unwrap()
    }

    fn check(model: &ModelState, batch: &[&PreparedExample]) {
        let r = finite_difference_check(model, batch, 1e-5, 1e-4).unwrap();
        let bad: Vec<_> = r.entries.iter().filter(|e| e.relative_error > 1e-4).take(5).collect();
        assert!(r.passed, "max rel error {} {:?}", r.max_relative_error, bad);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let noisy = ScorerConfig { epsilon: 0.1, noise_rate: 0.2, noise_seed: 3 };
        for (k, d) in [0usize, 13, 31, 47].into_iter().enumerate() {
            let task = prepared(d, 100 + k as u64, noisy);
            let batch: Vec<&PreparedExample> = task.train.iter().take(3).collect();
            let base = ModelState::new(QuantifierLexicon::random(k as u64), Some(AttentionNet::random(6, k as u64)))
                .with_ranking(DEFAULT_LAMBDA, crate::quantifier::reference_relations());
            check(&base, &batch);
            let mut mean = base.clone();
            mean.attention = None;
            check(&mean, &batch);
            let mut split = base.clone();
            split.logits = LogitOptions { neutral_term: false, complement_split: true };
            check(&split, &batch);
        }
    }

    #[test]
    fn frozen_lexicon_is_skipped() {
        let task = prepared(40, 9, ScorerConfig::clean());
        let batch: Vec<&PreparedExample> = task.train.iter().take(2).collect();
        let mut model = ModelState::new(QuantifierLexicon::predefined(), Some(AttentionNet::random(4, 2)));
        model.lexicon.frozen = true;
        let r = finite_difference_check(&model, &batch, 1e-5, 1e-4).unwrap();
        assert_eq!(r.skipped, NUM_QUANTIFIERS);
        assert!(r.passed);
        let (_, g) = gradients(&model, &batch).unwrap();
        assert!(g.lexicon.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ce_loss_is_mean_negative_log_likelihood() {
        let task = prepared(5, 1, ScorerConfig::clean());
        let model = ModelState::new(QuantifierLexicon::predefined(), None);
        let batch: Vec<&PreparedExample> = task.train.iter().take(4).collect();
        let expected: f64 = batch
            .iter()
            .map(|e| -predict_prepared(&model, e).unwrap()[e.gold].ln())
            .sum::<f64>()
            / 4.0;
        assert!((ce_loss(&model, &batch).unwrap() - expected).abs() < 1e-12);
        let probs = predict_prepared(&model, batch[0]).unwrap();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
