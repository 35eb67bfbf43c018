//! On-disk formats: suite directories, checkpoints, run configs, and the
//! hashes that tie checkpoints to the suite they were trained on.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::explanation::ComplexityDescriptor;
use crate::model::ModelState;
use crate::parser::parse_explanation;
use crate::quantifier::{Quantifier, QuantifierLexicon};
use crate::taskgen::{AttributeSpec, Example, SuiteConfig, Task, TaskSuite};
use crate::train::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "suite.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub unseen_fraction: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub name: String,
    pub file: String,
    pub complexity: ComplexityDescriptor,
    pub seen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub format: u32,
    pub config: SuiteConfig,
    pub truth: QuantifierLexicon,
    pub split: Option<SplitInfo>,
    pub descriptors: Vec<ComplexityDescriptor>,
    pub tasks: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TaskFile {
    name: String,
    complexity: ComplexityDescriptor,
    generator_seed: u64,
    schema: Vec<AttributeSpec>,
    labels: Vec<String>,
    explanations: Vec<String>,
    truth: IndexMap<Quantifier, f64>,
    train: Vec<Example>,
    validation: Vec<Example>,
    test: Vec<Example>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Hash of a serializable value's compact JSON form.
pub fn json_hash<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("serializable"))
}

/// Writes `suite.json` and one `task_<id>.json` per task.
pub fn save_suite(
    dir: &Path,
    suite: &TaskSuite,
    config: &SuiteConfig,
    truth: &QuantifierLexicon,
    split: Option<SplitInfo>,
) -> Result<SuiteManifest> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let seen: HashSet<usize> = suite.seen.iter().copied().collect();
    let mut entries = Vec::with_capacity(suite.tasks.len());
    for (id, task) in suite.tasks.iter().enumerate() {
        let file = format!("task_{id:04}.json");
        let body = TaskFile {
            name: task.name.clone(),
            complexity: task.complexity,
            generator_seed: task.generator_seed,
            schema: task.schema.clone(),
            labels: task.labels.clone(),
            explanations: task.explanations.iter().map(|e| e.render()).collect(),
            truth: task.truth.clone(),
            train: task.train.clone(),
            validation: task.validation.clone(),
            test: task.test.clone(),
        };
        write_json(&dir.join(&file), &body)?;
        entries.push(ManifestEntry {
            id,
            name: task.name.clone(),
            file,
            complexity: task.complexity,
            seen: seen.contains(&id),
        });
    }
    let manifest = SuiteManifest {
        format: FORMAT_VERSION,
        config: config.clone(),
        truth: truth.clone(),
        split,
        descriptors: config.descriptors(),
        tasks: entries,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

fn load_task(path: &Path) -> Result<Task> {
    let f: TaskFile = read_json(path)?;
    let labels: HashSet<String> = f.labels.iter().cloned().collect();
    let explanations = f
        .explanations
        .iter()
        .map(|text| parse_explanation(text, &labels))
        .collect::<Result<Vec<_>>>()?;
    Ok(Task {
        name: f.name,
        schema: f.schema,
        labels: f.labels,
        explanations,
        train: f.train,
        validation: f.validation,
        test: f.test,
        complexity: f.complexity,
        generator_seed: f.generator_seed,
        truth: f.truth,
    })
}

pub fn load_suite(dir: &Path) -> Result<(TaskSuite, SuiteManifest)> {
    let manifest: SuiteManifest = read_json(&dir.join(MANIFEST_FILE))?;
    if manifest.format != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "unsupported suite format {} (expected {FORMAT_VERSION})",
            manifest.format
        )));
    }
    let mut tasks = Vec::with_capacity(manifest.tasks.len());
    let (mut seen, mut unseen) = (Vec::new(), Vec::new());
    for (i, entry) in manifest.tasks.iter().enumerate() {
        tasks.push(load_task(&dir.join(&entry.file))?);
        if entry.seen {
            seen.push(i);
        } else {
            unseen.push(i);
        }
    }
    Ok((TaskSuite { tasks, seen, unseen }, manifest))
}

/// SHA-256 over the manifest and every task file, in manifest order.
pub fn suite_hash(dir: &Path) -> Result<String> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest_bytes = fs::read(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: SuiteManifest = serde_json::from_slice(&manifest_bytes).map_err(|source| Error::Json {
        path: manifest_path.clone(),
        source,
    })?;
    let mut h = Sha256::new();
    h.update(&manifest_bytes);
    for entry in &manifest.tasks {
        let p: PathBuf = dir.join(&entry.file);
        h.update(entry.file.as_bytes());
        h.update(fs::read(&p).map_err(io_err(&p))?);
    }
    Ok(hex(&h.finalize()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub model: ModelState,
    pub config: TrainConfig,
    pub config_hash: String,
    pub suite_hash: String,
    /// Curriculum stage filter, or `all`.
    pub stage: String,
    /// Epoch the parameters come from.
    pub epoch: usize,
}

impl Checkpoint {
    pub fn new(model: ModelState, config: &TrainConfig, suite_hash: String, stage: String, epoch: usize) -> Self {
        Checkpoint {
            format: FORMAT_VERSION,
            model,
            config: config.clone(),
            config_hash: json_hash(config),
            suite_hash,
            stage,
            epoch,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Checkpoint = read_json(path)?;
        if c.config_hash != json_hash(&c.config) {
            return Err(Error::Config(format!(
                "{}: stored config hash does not match its config",
                path.display()
            )));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn check_suite(&self, suite_hash: &str) -> Result<()> {
        if self.suite_hash != suite_hash {
            return Err(Error::HashMismatch {
                checkpoint: self.suite_hash.clone(),
                suite: suite_hash.to_string(),
            });
        }
        Ok(())
    }
}
