//! The `quantlearn` command line.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::entailment::ScorerConfig;
use crate::error::{Error, Result};
use crate::explanation::ComplexityDescriptor;
use crate::model::{finite_difference_check, prepare_task, ModelState, PreparedExample};
use crate::persist::{load_suite, read_json, save_suite, suite_hash, write_json, Checkpoint, SplitInfo};
use crate::quantifier::QuantifierLexicon;
use crate::report::{attention_report, evaluate_zero_shot, quantifier_recovery_report, run_baseline, Baseline};
use crate::taskgen::{generate_suite, split_seen_unseen, SplitCounts, SuiteConfig};
use crate::train::{build_curriculum, train_curriculum_stages, train_multitask, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "quantlearn", version, about = "Learn zero-shot classifiers from quantified explanations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a task suite directory.
    Gen(GenArgs),
    /// Train a model on the seen tasks of a suite.
    Train(TrainArgs),
    /// Zero-shot accuracy of a checkpoint on the unseen tasks.
    Eval(EvalArgs),
    /// Accuracy of a reference method on the unseen tasks.
    Baseline(BaselineArgs),
    /// Attention weights by explanation length and quantifier.
    ReportAttention(EvalArgs),
    /// Learned against generating quantifier probabilities.
    ReportQuantifiers(QuantArgs),
    /// Compare analytic gradients with central differences.
    CheckGradients(GradArgs),
    /// Lexicon utilities.
    Quantifiers {
        #[command(subcommand)]
        command: QuantifierCommand,
    },
}

#[derive(Subcommand, Debug)]
enum QuantifierCommand {
    /// Print quantifier,probability,raw,frozen rows.
    Dump {
        /// Checkpoint or lexicon file; the reference lexicon when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct GenArgs {
    /// `all`, or comma-separated descriptors such as `binary/none/simple/quantified`.
    #[arg(long, default_value = "all")]
    complexities: String,
    /// Tasks per complexity descriptor.
    #[arg(long)]
    per_complexity: usize,
    #[arg(long)]
    seed: u64,
    /// Fraction of each descriptor's tasks held out as unseen.
    #[arg(long, default_value_t = 0.2)]
    unseen_fraction: f64,
    /// Seed of the seen/unseen split; defaults to `--seed`.
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long, default_value_t = 200)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    validation: usize,
    #[arg(long, default_value_t = 100)]
    test: usize,
    /// Labels per multiclass task (3 to 5).
    #[arg(long, default_value_t = 3)]
    multiclass_labels: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    suite: PathBuf,
    /// Run-config JSON; every field is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `standard` or `curriculum:<classes|negations|conjunctions>`.
    #[arg(long, default_value = "standard")]
    mode: String,
    /// Checkpoint or lexicon file whose lexicon is used and kept frozen.
    #[arg(long)]
    freeze_quantifiers: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    suite: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for eval, CSV file for report-attention.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ScorerArgs {
    /// Mass moved off the indicated NLI vertex.
    #[arg(long, default_value_t = 0.0)]
    epsilon: f64,
    /// Probability of swapping entailment and contradiction per pair.
    #[arg(long, default_value_t = 0.0)]
    noise_rate: f64,
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
}

impl ScorerArgs {
    fn config(&self) -> Result<ScorerConfig> {
        let c = ScorerConfig {
            epsilon: self.epsilon,
            noise_rate: self.noise_rate,
            noise_seed: self.noise_seed,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args, Debug)]
struct BaselineArgs {
    #[arg(long)]
    suite: PathBuf,
    /// `exent` or `majority`.
    #[arg(long)]
    name: String,
    #[command(flatten)]
    scorer: ScorerArgs,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct QuantArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Suite whose generating lexicon is the reference; the built-in table
    /// when omitted.
    #[arg(long)]
    suite: Option<PathBuf>,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradArgs {
    #[arg(long)]
    suite: PathBuf,
    /// Model to check; a fresh model from `--config` when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training examples per task in the probe batch.
    #[arg(long, default_value_t = 2)]
    per_task: usize,
    /// Number of seen tasks contributing to the batch.
    #[arg(long, default_value_t = 4)]
    tasks: usize,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Baseline(a) => baseline(a),
        Command::ReportAttention(a) => report_attention(a),
        Command::ReportQuantifiers(a) => report_quantifiers(a),
        Command::CheckGradients(a) => check_gradients(a),
        Command::Quantifiers {
            command: QuantifierCommand::Dump { checkpoint },
        } => {
            let lex = match checkpoint {
                Some(p) => load_lexicon(&p)?,
                None => QuantifierLexicon::predefined(),
            };
            lex.write_csv(io::stdout().lock())
        }
    }
}

fn parse_complexities(spec: &str) -> Result<Vec<ComplexityDescriptor>> {
    if spec == "all" {
        return Ok(Vec::new());
    }
    let all = ComplexityDescriptor::all();
    spec.split(',')
        .map(|s| {
            let s = s.trim();
            all.iter()
                .find(|d| d.to_string() == s)
                .copied()
                .ok_or_else(|| Error::Config(format!("unknown complexity `{s}`")))
        })
        .collect()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn gen(a: GenArgs) -> Result<()> {
    if a.per_complexity == 0 {
        return Err(Error::Config("--per-complexity must be at least 1".into()));
    }
    if a.train == 0 || a.validation == 0 || a.test == 0 {
        return Err(Error::Config("split sizes must be at least 1".into()));
    }
    if !(3..=5).contains(&a.multiclass_labels) {
        return Err(Error::Config("--multiclass-labels must be 3, 4 or 5".into()));
    }
    let config = SuiteConfig {
        per_complexity: a.per_complexity,
        seed: a.seed,
        counts: SplitCounts {
            train: a.train,
            validation: a.validation,
            test: a.test,
        },
        multiclass_labels: a.multiclass_labels,
        complexities: parse_complexities(&a.complexities)?,
    };
    let truth = QuantifierLexicon::predefined();
    let split = SplitInfo {
        unseen_fraction: a.unseen_fraction,
        seed: a.split_seed.unwrap_or(a.seed),
    };
    let suite = split_seen_unseen(&generate_suite(&config, &truth), split.unseen_fraction, split.seed)?;
    save_suite(&a.out, &suite, &config, &truth, Some(split))?;
    eprintln!(
        "wrote {} tasks ({} seen, {} unseen) to {}",
        suite.tasks.len(),
        suite.seen.len(),
        suite.unseen.len(),
        a.out.display()
    );
    Ok(())
}

/// Lexicon from a checkpoint file or a bare lexicon file.
fn load_lexicon(path: &Path) -> Result<QuantifierLexicon> {
    let value: serde_json::Value = read_json(path)?;
    if value.get("model").is_some() {
        Ok(Checkpoint::load(path)?.model.lexicon)
    } else {
        read_json(path)
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    let c = match path {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    c.validate()?;
    Ok(c)
}

fn train(a: TrainArgs) -> Result<()> {
    let config = load_config(a.config.as_deref())?;
    let (suite, _) = load_suite(&a.suite)?;
    let hash = suite_hash(&a.suite)?;
    let frozen = a.freeze_quantifiers.as_deref().map(load_lexicon).transpose()?;
    create_dir(&a.out)?;
    write_json(&a.out.join("run_config.json"), &config)?;

    let (models, history) = match a.mode.as_str() {
        "standard" => {
            let mut init = config.initial_model();
            if let Some(lex) = &frozen {
                init.lexicon = lex.clone();
                init.lexicon.frozen = true;
            }
            let (m, h) = train_multitask(&suite, &config, init)?;
            (vec![m], h)
        }
        m => match m.strip_prefix("curriculum:") {
            Some(name) => {
                let c = build_curriculum(name)?;
                train_curriculum_stages(&suite, &c, &config, frozen.is_some(), frozen.as_ref())?
            }
            None => return Err(Error::Config(format!("unknown mode `{m}`"))),
        },
    };
    let n = models.len();
    for (i, (model, stage)) in models.into_iter().zip(&history.stages).enumerate() {
        let ck = Checkpoint::new(model, &config, hash.clone(), stage.filter.clone(), stage.selected_epoch);
        if n > 1 {
            ck.save(&a.out.join(format!("stage_{i}.json")))?;
        }
        if i + 1 == n {
            ck.save(&a.out.join("checkpoint.json"))?;
        }
    }
    if let Some(lex) = history.final_lexicon() {
        write_json(&a.out.join("final_lexicon.json"), &lex)?;
    }
    history.write_csv(create(&a.out.join("history.csv"))?)?;
    write_json(&a.out.join("history.json"), &history)?;
    for s in &history.stages {
        eprintln!(
            "stage {} [{}]: {} tasks, epoch {} selected, seen validation accuracy {:.4}",
            s.stage, s.filter, s.tasks, s.selected_epoch, s.best_val_acc
        );
    }
    Ok(())
}

fn load_checked(suite_dir: &Path, checkpoint: &Path) -> Result<(crate::taskgen::TaskSuite, Checkpoint)> {
    let ck = Checkpoint::load(checkpoint)?;
    ck.check_suite(&suite_hash(suite_dir)?)?;
    let (suite, _) = load_suite(suite_dir)?;
    Ok((suite, ck))
}

fn eval(a: EvalArgs) -> Result<()> {
    let (suite, ck) = load_checked(&a.suite, &a.checkpoint)?;
    let scorer = ck.config.scorer;
    let mut report = evaluate_zero_shot(&ck.model, &suite, &scorer)?;
    report.seed = Some(ck.config.seed);
    let exent = run_baseline(Baseline::Exent, &suite, &scorer)?;
    let majority = run_baseline(Baseline::Majority, &suite, &scorer)?;
    report.attach_baselines(Some(&exent), Some(&majority))?;
    create_dir(&a.out)?;
    report.write_tasks_csv(create(&a.out.join("eval_tasks.csv"))?)?;
    report.write_complexity_csv(create(&a.out.join("eval_complexity.csv"))?)?;
    println!(
        "mean unseen accuracy {:.4} (exent {:.4}, majority {:.4}), {} ties over {} tasks",
        report.mean_accuracy(),
        exent.mean_accuracy(),
        majority.mean_accuracy(),
        report.total_ties(),
        report.tasks.len()
    );
    Ok(())
}

fn baseline(a: BaselineArgs) -> Result<()> {
    let which: Baseline = a.name.parse()?;
    let (suite, _) = load_suite(&a.suite)?;
    let report = run_baseline(which, &suite, &a.scorer.config()?)?;
    report.write_tasks_csv(create(&a.out)?)?;
    println!("{which}: mean unseen accuracy {:.4}", report.mean_accuracy());
    Ok(())
}

fn report_attention(a: EvalArgs) -> Result<()> {
    let (suite, ck) = load_checked(&a.suite, &a.checkpoint)?;
    let r = attention_report(&ck.model, &suite, &ck.config.scorer)?;
    r.write_csv(create(&a.out)?)?;
    println!(
        "quantified {:.4} (n={}), unquantified {:.4} (n={})",
        r.quantified.mean_weight, r.quantified.count, r.unquantified.mean_weight, r.unquantified.count
    );
    Ok(())
}

fn report_quantifiers(a: QuantArgs) -> Result<()> {
    let learned = load_lexicon(&a.checkpoint)?;
    let truth = match &a.suite {
        Some(dir) => load_suite(dir)?.1.truth,
        None => QuantifierLexicon::predefined(),
    };
    let r = quantifier_recovery_report(&learned, &truth);
    r.write_csv(create(&a.out)?)?;
    println!(
        "spearman {:.4}, relations satisfied {:.4} (strict {:.4})",
        r.spearman, r.relations_satisfied, r.strict_relations_satisfied
    );
    Ok(())
}

fn check_gradients(a: GradArgs) -> Result<()> {
    let (suite, _) = load_suite(&a.suite)?;
    let (model, scorer): (ModelState, ScorerConfig) = match &a.checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            (ck.model, ck.config.scorer)
        }
        None => {
            let c = load_config(a.config.as_deref())?;
            (c.initial_model(), c.scorer)
        }
    };
    let prepared = suite
        .seen_tasks()
        .take(a.tasks)
        .map(|t| prepare_task(t, &scorer))
        .collect::<Result<Vec<_>>>()?;
    let batch: Vec<&PreparedExample> = prepared.iter().flat_map(|t| t.train.iter().take(a.per_task)).collect();
    if batch.is_empty() {
        return Err(Error::NoSeenTasks);
    }
    let r = finite_difference_check(&model, &batch, a.step, a.tolerance)?;
    let mut out = io::stdout().lock();
    for e in &r.entries {
        writeln!(out, "{}\t{:e}\t{:e}\t{:e}", e.parameter, e.analytic, e.numeric, e.relative_error).ok();
    }
    writeln!(
        out,
        "max relative error {:e} over {} parameters ({} frozen skipped): {}",
        r.max_relative_error,
        r.entries.len(),
        r.skipped,
        if r.passed { "pass" } else { "FAIL" }
    )
    .ok();
    if r.passed {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "gradient check failed: max relative error {:e} >= {:e}",
            r.max_relative_error, a.tolerance
        )))
    }
}
