//! Multi-task training: AdamW over two parameter groups, sequential task
//! cycling with gradient accumulation, best-checkpoint selection on seen
//! validation accuracy, and the staged curricula.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::entailment::ScorerConfig;
use crate::error::{Error, Result};
use crate::explanation::{Classes, ComplexityDescriptor, Negation, Structure};
use crate::model::{
    argmax, gradients, predict_prepared, prepare_task, AttentionNet, Gradients, LogitOptions,
    ModelState, PreparedExample, PreparedTask, DEFAULT_HIDDEN, DEFAULT_LAMBDA,
};
use crate::parallel;
use crate::quantifier::{reference_relations, QuantifierLexicon, NUM_QUANTIFIERS};
use crate::taskgen::{mix_seed, Task, TaskSuite};

const ATTENTION_SALT: u64 = 0xa77e;
const SHUFFLE_SALT: u64 = 0x5eed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// Lexicon at the reference table; no ranking loss.
    Predefined,
    /// Random lexicon; no ranking loss.
    Random,
    /// Random lexicon plus the ranking loss over the reference relations.
    Ordinal,
}

impl FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predefined" => Ok(InitMode::Predefined),
            "random" => Ok(InitMode::Random),
            "ordinal" => Ok(InitMode::Ordinal),
            _ => Err(Error::Config(format!("unknown init mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to attention parameters only.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub grad_accumulation: usize,
    /// Attention parameters.
    pub lr_model: f64,
    /// Lexicon raw parameters.
    pub lr_quant: f64,
    pub optimizer: AdamConfig,
    pub seed: u64,
    pub lambda: f64,
    pub init_mode: InitMode,
    /// Attention aggregation when set, mean otherwise.
    pub attention: bool,
    pub hidden: usize,
    pub complement_split: bool,
    pub scorer: ScorerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batches_per_epoch: 100,
            batch_size: 2,
            grad_accumulation: 8,
            lr_model: 1e-5,
            lr_quant: 1e-2,
            optimizer: AdamConfig::default(),
            seed: 42,
            lambda: DEFAULT_LAMBDA,
            init_mode: InitMode::Ordinal,
            attention: true,
            hidden: DEFAULT_HIDDEN,
            complement_split: false,
            scorer: ScorerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs", self.epochs),
            ("batches_per_epoch", self.batches_per_epoch),
            ("batch_size", self.batch_size),
            ("grad_accumulation", self.grad_accumulation),
            ("hidden", self.hidden),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [("lr_model", self.lr_model), ("lr_quant", self.lr_quant)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("optimizer betas must lie in [0, 1)".into()));
        }
        if !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return Err(Error::Config("optimizer eps must be > 0 and weight_decay >= 0".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        self.scorer.validate()
    }

    /// Fresh model for this configuration's init mode and seed.
    pub fn initial_model(&self) -> ModelState {
        let lexicon = match self.init_mode {
            InitMode::Predefined => QuantifierLexicon::predefined(),
            InitMode::Random | InitMode::Ordinal => QuantifierLexicon::random(self.seed),
        };
        let attention = self
            .attention
            .then(|| AttentionNet::random(self.hidden, mix_seed(self.seed, ATTENTION_SALT)));
        let mut model = ModelState::new(lexicon, attention);
        if self.init_mode == InitMode::Ordinal {
            model = model.with_ranking(self.lambda, reference_relations());
        }
        model.logits = LogitOptions {
            complement_split: self.complement_split,
            ..LogitOptions::default()
        };
        model
    }
}

/// First and second moments for both parameter groups.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m_lexicon: [f64; NUM_QUANTIFIERS],
    v_lexicon: [f64; NUM_QUANTIFIERS],
    m_attention: Vec<f64>,
    v_attention: Vec<f64>,
}

impl AdamState {
    pub fn new(model: &ModelState) -> Self {
        let n = model.attention.as_ref().map_or(0, |a| a.params().len());
        AdamState {
            step: 0,
            m_lexicon: [0.0; NUM_QUANTIFIERS],
            v_lexicon: [0.0; NUM_QUANTIFIERS],
            m_attention: vec![0.0; n],
            v_attention: vec![0.0; n],
        }
    }
}

fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    decay: f64,
    o: &AdamConfig,
    step: u64,
) {
    let c1 = 1.0 - o.beta1.powf(step as f64);
    let c2 = 1.0 - o.beta2.powf(step as f64);
    for i in 0..params.len() {
        m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * grads[i];
        v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * grads[i] * grads[i];
        params[i] *= 1.0 - lr * decay;
        params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + o.eps);
    }
}

/// One AdamW update. The lexicon is left untouched while frozen.
pub fn optimizer_step(
    model: &mut ModelState,
    grads: &Gradients,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    if let Some(i) = grads.lexicon.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(format!("lexicon[{i}]")));
    }
    if let Some(i) = grads.attention.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(format!("attention[{i}]")));
    }
    let n = model.attention.as_ref().map_or(0, |a| a.params().len());
    if grads.attention.len() != n || state.m_attention.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: grads.attention.len(),
        });
    }
    state.step += 1;
    let o = &config.optimizer;
    if !model.lexicon.frozen {
        adam_update(
            model.lexicon.raw_mut(),
            &grads.lexicon,
            &mut state.m_lexicon,
            &mut state.v_lexicon,
            config.lr_quant,
            0.0,
            o,
            state.step,
        );
    }
    if let Some(net) = &mut model.attention {
        adam_update(
            net.params_mut(),
            &grads.attention,
            &mut state.m_attention,
            &mut state.v_attention,
            config.lr_model,
            o.weight_decay,
            o,
            state.step,
        );
    }
    Ok(())
}

/// Accuracy with lowest-index tie-breaking, and the number of ties.
pub fn accuracy(model: &ModelState, examples: &[PreparedExample]) -> Result<(f64, usize)> {
    if examples.is_empty() {
        return Ok((0.0, 0));
    }
    let mut correct = 0;
    let mut ties = 0;
    for ex in examples {
        let (pred, tie) = argmax(&predict_prepared(model, ex)?);
        correct += usize::from(pred == ex.gold);
        ties += usize::from(tie);
    }
    Ok((correct as f64 / examples.len() as f64, ties))
}

/// Mean of per-task validation accuracies.
pub fn mean_validation_accuracy(model: &ModelState, tasks: &[PreparedTask]) -> Result<f64> {
    let accs: Vec<f64> = parallel::install(|| {
        tasks
            .par_iter()
            .map(|t| accuracy(model, &t.validation).map(|a| a.0))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(accs.iter().sum::<f64>() / accs.len().max(1) as f64)
}

/// Mean of per-task test accuracies.
pub fn mean_test_accuracy(model: &ModelState, tasks: &[PreparedTask]) -> Result<f64> {
    let accs: Vec<f64> = parallel::install(|| {
        tasks
            .par_iter()
            .map(|t| accuracy(model, &t.test).map(|a| a.0))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(accs.iter().sum::<f64>() / accs.len().max(1) as f64)
}

pub fn prepare_tasks<'a>(
    tasks: impl IntoIterator<Item = &'a Task>,
    scorer: &ScorerConfig,
) -> Result<Vec<PreparedTask>> {
    let tasks: Vec<&Task> = tasks.into_iter().collect();
    parallel::install(|| tasks.par_iter().map(|t| prepare_task(t, scorer)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: usize,
    pub epoch: usize,
    pub ce: f64,
    pub rank: f64,
    pub total: f64,
    pub val_acc: f64,
    pub probabilities: Vec<f64>,
    pub raw: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub filter: String,
    pub tasks: usize,
    /// Epoch (1-based) whose checkpoint was kept.
    pub selected_epoch: usize,
    pub best_val_acc: f64,
    /// Unseen test accuracy of the kept checkpoint on each stage's tasks,
    /// in stage order. Empty outside curricula.
    pub unseen_accuracy: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub stages: Vec<StageRecord>,
}

impl TrainHistory {
    /// Lexicon at the end of the last epoch, which may differ from the
    /// selected checkpoint's.
    pub fn final_lexicon(&self) -> Option<QuantifierLexicon> {
        let raw: [f64; NUM_QUANTIFIERS] = self.epochs.last()?.raw.clone().try_into().ok()?;
        Some(QuantifierLexicon::from_raw(raw))
    }

    /// Rows of `stage,epoch,ce,rank,total,val_acc`, with header.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["stage", "epoch", "ce", "rank", "total", "val_acc"])?;
        for e in &self.epochs {
            w.write_record([
                e.stage.to_string(),
                e.epoch.to_string(),
                e.ce.to_string(),
                e.rank.to_string(),
                e.total.to_string(),
                e.val_acc.to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Cycles through every task's training examples in reshuffled passes.
struct BatchSampler {
    orders: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(tasks: &[PreparedTask], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, SHUFFLE_SALT));
        let orders = tasks
            .iter()
            .map(|t| {
                let mut o: Vec<usize> = (0..t.train.len()).collect();
                o.shuffle(&mut rng);
                o
            })
            .collect();
        BatchSampler {
            orders,
            cursors: vec![0; tasks.len()],
            rng,
        }
    }

    fn draw<'a>(&mut self, task: usize, tasks: &'a [PreparedTask], n: usize) -> Vec<&'a PreparedExample> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            if self.cursors[task] == self.orders[task].len() {
                self.orders[task].shuffle(&mut self.rng);
                self.cursors[task] = 0;
            }
            out.push(&tasks[task].train[self.orders[task][self.cursors[task]]]);
            self.cursors[task] += 1;
        }
        out
    }
}

/// Trains on already prepared seen tasks, returning the best checkpoint
/// and one history record per epoch.
pub fn train_prepared(
    tasks: &[PreparedTask],
    config: &TrainConfig,
    init: ModelState,
    stage: usize,
) -> Result<(ModelState, Vec<EpochRecord>, usize, f64)> {
    config.validate()?;
    if tasks.is_empty() {
        return Err(Error::NoSeenTasks);
    }
    if let Some(i) = tasks.iter().position(|t| t.train.is_empty()) {
        return Err(Error::Config(format!("seen task {i} has no training examples")));
    }
    let mut model = init;
    model.validate()?;
    let mut adam = AdamState::new(&model);
    let mut sampler = BatchSampler::new(tasks, mix_seed(config.seed, stage as u64));
    let mut acc_grad = Gradients::zeros(&model);
    let mut pending = 0usize;
    let mut global_batch = 0usize;
    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(ModelState, usize, f64)> = None;

    for epoch in 1..=config.epochs {
        let (mut ce, mut rank, mut total) = (0.0, 0.0, 0.0);
        for b in 0..config.batches_per_epoch {
            let task = global_batch % tasks.len();
            global_batch += 1;
            let batch = sampler.draw(task, tasks, config.batch_size);
            let (loss, grad) = gradients(&model, &batch)?;
            ce += loss.ce;
            rank += loss.rank;
            total += loss.total;
            acc_grad.add(&grad);
            pending += 1;
            let last = b + 1 == config.batches_per_epoch;
            if pending == config.grad_accumulation || last {
                acc_grad.scale(1.0 / pending as f64);
                optimizer_step(&mut model, &acc_grad, &mut adam, config)?;
                acc_grad = Gradients::zeros(&model);
                pending = 0;
            }
        }
        let n = config.batches_per_epoch as f64;
        let val_acc = mean_validation_accuracy(&model, tasks)?;
        records.push(EpochRecord {
            stage,
            epoch,
            ce: ce / n,
            rank: rank / n,
            total: total / n,
            val_acc,
            probabilities: model.lexicon.probabilities().to_vec(),
            raw: model.lexicon.raw().to_vec(),
        });
        if best.as_ref().map_or(true, |b| val_acc > b.2) {
            best = Some((model.clone(), epoch, val_acc));
        }
    }
    let (model, epoch, acc) = best.expect("at least one epoch");
    Ok((model, records, epoch, acc))
}

/// Trains on every seen task of `suite`.
pub fn train_multitask(
    suite: &TaskSuite,
    config: &TrainConfig,
    init: ModelState,
) -> Result<(ModelState, TrainHistory)> {
    if suite.seen.is_empty() {
        return Err(Error::NoSeenTasks);
    }
    let tasks = prepare_tasks(suite.seen_tasks(), &config.scorer)?;
    let (model, epochs, selected_epoch, best_val_acc) = train_prepared(&tasks, config, init, 0)?;
    let history = TrainHistory {
        epochs,
        stages: vec![StageRecord {
            stage: 0,
            filter: "all".into(),
            tasks: tasks.len(),
            selected_epoch,
            best_val_acc,
            unseen_accuracy: Vec::new(),
        }],
    };
    Ok((model, history))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurriculumName {
    Classes,
    Negations,
    Conjunctions,
}

impl FromStr for CurriculumName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classes" => Ok(CurriculumName::Classes),
            "negations" => Ok(CurriculumName::Negations),
            "conjunctions" => Ok(CurriculumName::Conjunctions),
            _ => Err(Error::UnknownCurriculum(s.to_string())),
        }
    }
}

impl fmt::Display for CurriculumName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CurriculumName::Classes => "classes",
            CurriculumName::Negations => "negations",
            CurriculumName::Conjunctions => "conjunctions",
        })
    }
}

/// Selects the tasks of one curriculum stage by complexity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageFilter {
    Classes(Classes),
    NoNegation,
    AnyNegation,
    Structure(Structure),
}

impl StageFilter {
    pub fn matches(&self, d: &ComplexityDescriptor) -> bool {
        match self {
            StageFilter::Classes(c) => d.classes == *c,
            StageFilter::NoNegation => d.negation == Negation::None,
            StageFilter::AnyNegation => d.negation != Negation::None,
            StageFilter::Structure(s) => d.structure == *s,
        }
    }
}

impl fmt::Display for StageFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StageFilter::Classes(Classes::Binary) => f.write_str("classes=binary"),
            StageFilter::Classes(Classes::Multiclass) => f.write_str("classes=multiclass"),
            StageFilter::NoNegation => f.write_str("negation=none"),
            StageFilter::AnyNegation => f.write_str("negation=clause|label|both"),
            StageFilter::Structure(Structure::Simple) => f.write_str("structure=simple"),
            StageFilter::Structure(Structure::SingleJunction) => f.write_str("structure=single-junction"),
            StageFilter::Structure(Structure::Nested) => f.write_str("structure=nested"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Curriculum {
    pub name: CurriculumName,
    pub stages: Vec<StageFilter>,
}

impl Curriculum {
    pub fn hardest(&self) -> StageFilter {
        *self.stages.last().expect("curricula have stages")
    }
}

pub fn build_curriculum(name: &str) -> Result<Curriculum> {
    let name: CurriculumName = name.parse()?;
    let stages = match name {
        CurriculumName::Classes => vec![
            StageFilter::Classes(Classes::Binary),
            StageFilter::Classes(Classes::Multiclass),
        ],
        CurriculumName::Negations => vec![StageFilter::NoNegation, StageFilter::AnyNegation],
        CurriculumName::Conjunctions => vec![
            StageFilter::Structure(Structure::Simple),
            StageFilter::Structure(Structure::SingleJunction),
            StageFilter::Structure(Structure::Nested),
        ],
    };
    Ok(Curriculum { name, stages })
}

/// Runs each stage on its seen tasks, starting every stage from the previous
/// stage's kept checkpoint. With `freeze_quantifiers` the lexicon (replaced
/// by `pretrained_lexicon` when given) stays fixed throughout.
pub fn train_curriculum(
    suite: &TaskSuite,
    curriculum: &Curriculum,
    config: &TrainConfig,
    freeze_quantifiers: bool,
    pretrained_lexicon: Option<&QuantifierLexicon>,
) -> Result<(ModelState, TrainHistory)> {
    let (mut models, history) =
        train_curriculum_stages(suite, curriculum, config, freeze_quantifiers, pretrained_lexicon)?;
    Ok((models.pop().expect("curricula have stages"), history))
}

/// Like [`train_curriculum`], returning every stage's kept checkpoint.
pub fn train_curriculum_stages(
    suite: &TaskSuite,
    curriculum: &Curriculum,
    config: &TrainConfig,
    freeze_quantifiers: bool,
    pretrained_lexicon: Option<&QuantifierLexicon>,
) -> Result<(Vec<ModelState>, TrainHistory)> {
    config.validate()?;
    let mut seen = Vec::new();
    let mut unseen = Vec::new();
    for filter in &curriculum.stages {
        let s: Vec<&Task> = suite.seen_tasks().filter(|t| filter.matches(&t.complexity)).collect();
        if s.is_empty() {
            return Err(Error::EmptyStage(filter.to_string()));
        }
        seen.push(prepare_tasks(s, &config.scorer)?);
        let u = suite.unseen_tasks().filter(|t| filter.matches(&t.complexity));
        unseen.push(prepare_tasks(u, &config.scorer)?);
    }

    let mut model = config.initial_model();
    if let Some(lex) = pretrained_lexicon {
        model.lexicon = lex.clone();
    }
    if freeze_quantifiers {
        model.lexicon.frozen = true;
    }
    let mut history = TrainHistory::default();
    let mut kept = Vec::with_capacity(curriculum.stages.len());
    for (i, filter) in curriculum.stages.iter().enumerate() {
        let (best, epochs, selected_epoch, best_val_acc) = train_prepared(&seen[i], config, model, i)?;
        kept.push(best.clone());
        model = best;
        let mut unseen_accuracy = Vec::new();
        for (f, tasks) in curriculum.stages.iter().zip(&unseen) {
            if !tasks.is_empty() {
                unseen_accuracy.push((f.to_string(), mean_test_accuracy(&model, tasks)?));
            }
        }
        history.epochs.extend(epochs);
        history.stages.push(StageRecord {
            stage: i,
            filter: filter.to_string(),
            tasks: seen[i].len(),
            selected_epoch,
            best_val_acc,
            unseen_accuracy,
        });
    }
    Ok((kept, history))
}
