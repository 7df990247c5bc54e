//! The pipeline stages as commands over an output directory. Every command
//! writes its effective config and a manifest next to its outputs, and
//! nothing that depends on wall-clock time.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{sha256_file, RunConfig};
use crate::corpus::{filter_leakage, read_corpus, relation_ids, write_corpus, Instance, KnowledgeGraph, RelationId};
use crate::encoder::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::episodic::FewShotDataset;
use crate::error::{LpdError, Result};
use crate::eval::{
    corrupt_descriptions, evaluate, export_projection, mean_std, shuffle_descriptions, EvalReport, EvalSettings,
    LabeledVector,
};
use crate::model::RelationModel;
use crate::pipeline::{
    build_benchmark, init_model, new_pretraining_state, new_training_state, pretrain, train_episodic, LoopState,
    TrainConfig,
};
use crate::pretrain::PretrainLog;
use crate::tokenizer::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub labels: BTreeMap<String, String>,
    /// File name to SHA-256, for files read.
    pub inputs: BTreeMap<String, String>,
    /// File name to SHA-256, for files written.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    fn new(command: &str, cfg: &RunConfig) -> Result<Self> {
        Ok(Manifest {
            command: command.to_string(),
            config_hash: cfg.hash()?,
            labels: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    fn label(&mut self, key: &str, value: impl ToString) {
        self.labels.insert(key.to_string(), value.to_string());
    }

    /// Hash every output, then write `config.toml` and `manifest.json`.
    fn finish(mut self, dir: &Path, cfg: &RunConfig, outputs: &[&str]) -> Result<Self> {
        for name in outputs {
            self.outputs.insert(name.to_string(), sha256_file(&dir.join(name))?);
        }
        fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
        let mut json = serde_json::to_string_pretty(&self)?;
        json.push('\n');
        fs::write(dir.join("manifest.json"), json)?;
        Ok(self)
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train_relations: Vec<RelationId>,
    pub eval_relations: Vec<RelationId>,
}

impl Split {
    pub fn benchmark(&self) -> BTreeSet<RelationId> {
        self.train_relations.iter().chain(&self.eval_relations).copied().collect()
    }
}

/// The generated artifacts, read back from disk.
pub struct Data {
    pub kg: KnowledgeGraph,
    pub split: Split,
    pub train: FewShotDataset,
    pub eval: FewShotDataset,
    pub pretrain_raw: Vec<Instance>,
    pub vocab: Vocab,
}

const DATA_FILES: [&str; 6] = [
    "kg.json",
    "split.json",
    "train.jsonl",
    "eval.jsonl",
    "pretrain_raw.jsonl",
    "vocab.txt",
];

pub fn cmd_generate(cfg: &RunConfig) -> Result<Manifest> {
    let dir = cfg.data_dir();
    fs::create_dir_all(&dir)?;
    let bench = build_benchmark(&cfg.data)?;
    bench.kg.save(&dir.join("kg.json"))?;
    let split = Split {
        train_relations: bench.train_relations.clone(),
        eval_relations: bench.eval_relations.clone(),
    };
    fs::write(dir.join("split.json"), serde_json::to_string_pretty(&split)? + "\n")?;
    write_corpus(&dir.join("train.jsonl"), bench.train.instances())?;
    write_corpus(&dir.join("eval.jsonl"), bench.eval.instances())?;
    write_corpus(&dir.join("pretrain_raw.jsonl"), &bench.pretrain_raw)?;
    bench.vocab.save(&dir.join("vocab.txt"))?;
    let mut m = Manifest::new("generate", cfg)?;
    m.label("relations", bench.kg.relations.len());
    m.label("train_instances", bench.train.len());
    m.label("eval_instances", bench.eval.len());
    m.finish(&dir, cfg, &DATA_FILES)
}

pub fn load_data(dir: &Path) -> Result<Data> {
    let kg = KnowledgeGraph::load(&dir.join("kg.json"))?;
    let split: Split = serde_json::from_str(&fs::read_to_string(dir.join("split.json"))?)?;
    let train = FewShotDataset::new(read_corpus(&dir.join("train.jsonl"))?, &kg.relations)?;
    let eval = FewShotDataset::new(read_corpus(&dir.join("eval.jsonl"))?, &kg.relations)?;
    if train.relation_ids().iter().any(|id| eval.relation_ids().contains(id)) {
        return Err(LpdError::invalid("train and eval relation sets overlap"));
    }
    Ok(Data {
        pretrain_raw: read_corpus(&dir.join("pretrain_raw.jsonl"))?,
        vocab: Vocab::load(&dir.join("vocab.txt"))?,
        kg,
        split,
        train,
        eval,
    })
}

fn record_data_inputs(m: &mut Manifest, cfg: &RunConfig) -> Result<()> {
    for name in DATA_FILES {
        m.input(&cfg.data_dir().join(name))?;
    }
    Ok(())
}

/// Leakage-filtered pre-training corpus plus an audit of what was removed.
pub fn filtered_pretrain_corpus(data: &Data) -> Result<(Vec<Instance>, BTreeSet<RelationId>)> {
    let benchmark = data.split.benchmark();
    let corpus = filter_leakage(&data.pretrain_raw, &benchmark);
    let remaining = relation_ids(&corpus);
    let overlap: Vec<RelationId> = remaining.intersection(&benchmark).copied().collect();
    if !overlap.is_empty() {
        return Err(LpdError::Leakage(overlap));
    }
    Ok((corpus, remaining))
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<Manifest> {
    let data = load_data(&cfg.data_dir())?;
    let dir = cfg.pretrain_dir();
    fs::create_dir_all(&dir)?;
    let (corpus, remaining) = filtered_pretrain_corpus(&data)?;
    log::info!(
        "pre-training on {} instances of {} relations ({} removed by the leakage filter)",
        corpus.len(),
        remaining.len(),
        data.pretrain_raw.len() - corpus.len()
    );
    let mut model = init_model(&data.vocab, &cfg.encoder, cfg.model_seed)?;
    let mut state = new_pretraining_state(&model, &cfg.pretrain);
    let mut log = PretrainLog::new(BufWriter::new(File::create(dir.join("log.jsonl"))?));
    pretrain(&mut model, &corpus, &data.kg, &cfg.pretrain, &mut state, |rec| {
        if rec.step % 100 == 0 {
            log::info!("pretrain step {} L_CP {:.4} L_MLM {:.4}", rec.step, rec.l_cp, rec.l_mlm);
        }
        log.record(rec)
    })?;
    log.into_inner().flush()?;

    let variant = if cfg.pretrain.batch.alpha_pretrain == 1.0 {
        "CP-equivalent"
    } else {
        "LPD"
    };
    let mut ckpt = model.checkpoint();
    ckpt.labels.insert("stage".into(), "pretrain".into());
    ckpt.labels.insert("variant".into(), variant.into());
    save_checkpoint(&dir.join("model.ckpt"), &ckpt)?;

    let mut m = Manifest::new("pretrain", cfg)?;
    record_data_inputs(&mut m, cfg)?;
    m.label("variant", variant);
    m.label("corpus_instances", corpus.len());
    m.label("corpus_relations", remaining.len());
    m.label("removed_instances", data.pretrain_raw.len() - corpus.len());
    m.label("benchmark_overlap", 0);
    m.finish(&dir, cfg, &["model.ckpt", "log.jsonl"])
}

pub fn load_model(path: &Path, vocab: &Vocab) -> Result<RelationModel> {
    RelationModel::from_checkpoint(load_checkpoint(path)?, vocab.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainLogRecord {
    step: u64,
    loss: f64,
    grad_norm: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Start from this checkpoint instead of a random initialisation.
    pub init: Option<PathBuf>,
    /// Continue from `train/state.json` and `train/model.ckpt`.
    pub resume: bool,
    /// Write every episode and its prompt decisions to `episodes.jsonl`.
    pub dump_episodes: bool,
}

pub fn cmd_train(cfg: &RunConfig, opts: &TrainOptions) -> Result<Manifest> {
    let data = load_data(&cfg.data_dir())?;
    let dir = cfg.train_dir();
    fs::create_dir_all(&dir)?;
    let state_path = dir.join("state.json");
    let model_path = dir.join("model.ckpt");
    let (mut model, mut state) = if opts.resume {
        let state: LoopState = serde_json::from_str(&fs::read_to_string(&state_path)?)?;
        (load_model(&model_path, &data.vocab)?, state)
    } else {
        let model = match &opts.init {
            Some(path) => load_model(path, &data.vocab)?,
            None => init_model(&data.vocab, &cfg.encoder, cfg.model_seed)?,
        };
        let state = new_training_state(&model, &cfg.train);
        (model, state)
    };
    let log_file = fs::OpenOptions::new()
        .create(true)
        .append(opts.resume)
        .write(true)
        .truncate(!opts.resume)
        .open(dir.join("log.jsonl"))?;
    let mut log = BufWriter::new(log_file);
    let mut dump = if opts.dump_episodes {
        let f = fs::OpenOptions::new()
            .create(true)
            .append(opts.resume)
            .write(true)
            .truncate(!opts.resume)
            .open(dir.join("episodes.jsonl"))?;
        Some(BufWriter::new(f))
    } else {
        None
    };
    let mut last_loss = f64::NAN;
    train_episodic(&mut model, &data.train, &cfg.train, &mut state, |step, out| {
        last_loss = out.loss;
        serde_json::to_writer(
            &mut log,
            &TrainLogRecord {
                step,
                loss: out.loss,
                grad_norm: out.grad_norm,
            },
        )?;
        log.write_all(b"\n")?;
        if let Some(d) = dump.as_mut() {
            for rec in &out.records {
                serde_json::to_writer(&mut *d, rec)?;
                d.write_all(b"\n")?;
            }
        }
        if step % 100 == 0 {
            log::info!("train step {step} loss {:.4}", out.loss);
        }
        Ok(())
    })?;
    log.flush()?;
    if let Some(mut d) = dump {
        d.flush()?;
    }
    let mut ckpt = model.checkpoint();
    ckpt.labels.insert("stage".into(), "train".into());
    save_checkpoint(&model_path, &ckpt)?;
    fs::write(&state_path, serde_json::to_string(&state)?)?;

    let mut m = Manifest::new("train", cfg)?;
    record_data_inputs(&mut m, cfg)?;
    if let Some(init) = &opts.init {
        m.input(init)?;
    }
    m.label("steps", state.step);
    m.label("final_loss", format!("{last_loss:.10}"));
    m.label("resumed", opts.resume);
    let mut outputs = vec!["model.ckpt", "state.json", "log.jsonl"];
    if opts.dump_episodes {
        outputs.push("episodes.jsonl");
    }
    m.finish(&dir, cfg, &outputs)
}

fn write_reports(dir: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut jsonl = BufWriter::new(File::create(dir.join("report.jsonl"))?);
    let mut summary = BufWriter::new(File::create(dir.join("summary.txt"))?);
    for r in reports {
        serde_json::to_writer(&mut jsonl, r)?;
        jsonl.write_all(b"\n")?;
        writeln!(summary, "{}", r.summary_line())?;
    }
    jsonl.flush()?;
    summary.flush()?;
    Ok(())
}

fn default_checkpoint(cfg: &RunConfig, explicit: Option<&Path>) -> PathBuf {
    explicit.map_or_else(|| cfg.train_dir().join("model.ckpt"), Path::to_path_buf)
}

pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<EvalReport> {
    let data = load_data(&cfg.data_dir())?;
    let ckpt_path = default_checkpoint(cfg, checkpoint);
    let model = load_model(&ckpt_path, &data.vocab)?;
    let report = evaluate(&model, &data.eval, &cfg.eval)?;
    let dir = cfg.eval_dir();
    fs::create_dir_all(&dir)?;
    write_reports(&dir, std::slice::from_ref(&report))?;
    let mut m = Manifest::new("evaluate", cfg)?;
    record_data_inputs(&mut m, cfg)?;
    m.input(&ckpt_path)?;
    m.finish(&dir, cfg, &["report.jsonl", "summary.txt"])?;
    Ok(report)
}

/// The seven configurations of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptionVariant {
    Original,
    Corrupted,
    Shuffled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationSetting {
    pub row: usize,
    pub name: &'static str,
    /// `None` means the configured training dropout rate.
    pub alpha_train: Option<f64>,
    pub alpha_test: Option<f64>,
    pub descriptions: DescriptionVariant,
}

impl AblationSetting {
    pub fn resolve(&self, cfg: &RunConfig) -> (f64, f64) {
        let a = cfg.train.alpha_train;
        (self.alpha_train.unwrap_or(a), self.alpha_test.unwrap_or(a))
    }
}

pub const ABLATION_ROWS: [AblationSetting; 7] = [
    AblationSetting {
        row: 1,
        name: "LPD",
        alpha_train: None,
        alpha_test: Some(0.0),
        descriptions: DescriptionVariant::Original,
    },
    AblationSetting {
        row: 2,
        name: "no prompts in training or testing",
        alpha_train: Some(1.0),
        alpha_test: Some(1.0),
        descriptions: DescriptionVariant::Original,
    },
    AblationSetting {
        row: 3,
        name: "no prompts in training, prompts in testing",
        alpha_train: Some(1.0),
        alpha_test: Some(0.0),
        descriptions: DescriptionVariant::Original,
    },
    AblationSetting {
        row: 4,
        name: "prompt dropout in training, no prompts in testing",
        alpha_train: None,
        alpha_test: Some(1.0),
        descriptions: DescriptionVariant::Original,
    },
    AblationSetting {
        row: 5,
        name: "same dropout rate in training and testing",
        alpha_train: None,
        alpha_test: None,
        descriptions: DescriptionVariant::Original,
    },
    AblationSetting {
        row: 6,
        name: "corrupted descriptions",
        alpha_train: None,
        alpha_test: Some(0.0),
        descriptions: DescriptionVariant::Corrupted,
    },
    AblationSetting {
        row: 7,
        name: "shuffled descriptions",
        alpha_train: None,
        alpha_test: Some(0.0),
        descriptions: DescriptionVariant::Shuffled,
    },
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: usize,
    pub name: String,
    pub alpha_train: f64,
    pub alpha_test: f64,
    pub descriptions: DescriptionVariant,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Train and eval datasets with their descriptions replaced per `variant`.
/// Shuffling permutes within each split so evaluation relations never
/// receive a training relation's description.
pub fn described_datasets(
    train: &FewShotDataset,
    eval: &FewShotDataset,
    kg: &KnowledgeGraph,
    variant: DescriptionVariant,
    corrupt_fraction: f64,
    seed: u64,
) -> Result<(FewShotDataset, FewShotDataset)> {
    let pick = |ds: &FewShotDataset| {
        ds.relation_ids()
            .iter()
            .filter_map(|id| kg.relation(*id).cloned())
            .collect::<Vec<_>>()
    };
    let apply = |ds: &FewShotDataset, salt: u64| -> Result<FewShotDataset> {
        let rels = pick(ds);
        let changed = match variant {
            DescriptionVariant::Original => return Ok(ds.clone()),
            DescriptionVariant::Corrupted => corrupt_descriptions(&rels, corrupt_fraction, seed)?,
            DescriptionVariant::Shuffled => shuffle_descriptions(&rels, seed ^ salt)?,
        };
        ds.with_descriptions(changed.into_iter().map(|r| (r.id, r.description)).collect())
    };
    Ok((apply(train, 0)?, apply(eval, 0x5eed)?))
}

/// Model trained with `train_cfg` from `init` (or from scratch).
pub fn train_model(
    data_vocab: &Vocab,
    encoder_init: Option<&RelationModel>,
    cfg: &RunConfig,
    train: &FewShotDataset,
    train_cfg: &TrainConfig,
) -> Result<RelationModel> {
    let mut model = match encoder_init {
        Some(m) => m.clone(),
        None => init_model(data_vocab, &cfg.encoder, cfg.model_seed ^ train_cfg.seed)?,
    };
    let mut state = new_training_state(&model, train_cfg);
    train_episodic(&mut model, train, train_cfg, &mut state, |_, _| Ok(()))?;
    Ok(model)
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let data = load_data(&cfg.data_dir())?;
    let pre_path = cfg.pretrain_dir().join("model.ckpt");
    let pretrained = if cfg.ablate.use_pretrained && pre_path.exists() {
        Some(load_model(&pre_path, &data.vocab)?)
    } else {
        None
    };
    let mut acc: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for &seed in &cfg.ablate.seeds {
        // Rows sharing a training setup share one model.
        let mut trained: BTreeMap<(u64, DescriptionVariant), (RelationModel, FewShotDataset)> = BTreeMap::new();
        for row in ABLATION_ROWS {
            let (alpha_train, alpha_test) = row.resolve(cfg);
            let key = (alpha_train.to_bits(), row.descriptions);
            if !trained.contains_key(&key) {
                let (train, eval) = described_datasets(
                    &data.train,
                    &data.eval,
                    &data.kg,
                    row.descriptions,
                    cfg.ablate.corrupt_fraction,
                    seed,
                )?;
                let tc = TrainConfig {
                    alpha_train,
                    seed,
                    ..cfg.train
                };
                log::info!("ablation seed {seed}: training alpha_train={alpha_train} {:?}", row.descriptions);
                let model = train_model(&data.vocab, pretrained.as_ref(), cfg, &train, &tc)?;
                trained.insert(key, (model, eval));
            }
            let (model, eval) = &trained[&key];
            let settings = EvalSettings {
                alpha_test,
                ..cfg.eval
            };
            let report = evaluate(model, eval, &settings)?;
            acc.entry(row.row).or_default().push(report.accuracy);
        }
    }
    let rows: Vec<AblationRow> = ABLATION_ROWS
        .iter()
        .map(|row| {
            let (alpha_train, alpha_test) = row.resolve(cfg);
            let accuracies = acc[&row.row].clone();
            let (mean, std) = mean_std(&accuracies);
            AblationRow {
                row: row.row,
                name: row.name.to_string(),
                alpha_train,
                alpha_test,
                descriptions: row.descriptions,
                seeds: cfg.ablate.seeds.clone(),
                accuracies,
                mean,
                std,
            }
        })
        .collect();

    let dir = cfg.ablate_dir();
    fs::create_dir_all(&dir)?;
    let mut jsonl = BufWriter::new(File::create(dir.join("table.jsonl"))?);
    let mut text = BufWriter::new(File::create(dir.join("table.txt"))?);
    writeln!(text, "row  alpha_train  alpha_test  descriptions  accuracy          name")?;
    for r in &rows {
        serde_json::to_writer(&mut jsonl, r)?;
        jsonl.write_all(b"\n")?;
        writeln!(
            text,
            "{:<4} {:<12.2} {:<11.2} {:<13} {:.4} +/- {:.4}  {}",
            r.row,
            r.alpha_train,
            r.alpha_test,
            format!("{:?}", r.descriptions).to_lowercase(),
            r.mean,
            r.std,
            r.name
        )?;
    }
    jsonl.flush()?;
    text.flush()?;
    let mut m = Manifest::new("ablate", cfg)?;
    record_data_inputs(&mut m, cfg)?;
    if pretrained.is_some() {
        m.input(&pre_path)?;
    }
    m.finish(&dir, cfg, &["table.jsonl", "table.txt"])?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSummary {
    pub relations: (RelationId, RelationId),
    pub support_centroid_distance: f64,
    pub support_mean_spread: f64,
    pub degenerate: bool,
}

/// Projects the two most-confused evaluation relations: every instance
/// once with its prompt (role `support`) and once without (role `query`).
pub fn project_confused_pair(model: &RelationModel, eval: &FewShotDataset, settings: &EvalSettings, out: &Path) -> Result<ProjectionSummary> {
    let report = evaluate(model, eval, settings)?;
    let (a, b) = report
        .confusion
        .most_confused_pair()
        .ok_or_else(|| LpdError::invalid("need at least two evaluation relations"))?;
    let mut vectors = Vec::new();
    for id in [a, b] {
        for &i in eval.members(id) {
            let inst = eval.instance(i);
            vectors.push(LabeledVector {
                label: id.to_string(),
                role: "support".into(),
                values: model.represent(inst, Some(eval.description(id)))?.values,
            });
            vectors.push(LabeledVector {
                label: id.to_string(),
                role: "query".into(),
                values: model.represent(inst, None)?.values,
            });
        }
    }
    let projection = export_projection(&vectors, out)?;
    let (between, within) = projection
        .separation(&a.to_string(), &b.to_string(), Some("support"))
        .ok_or_else(|| LpdError::invalid("projection lost a relation"))?;
    Ok(ProjectionSummary {
        relations: (a, b),
        support_centroid_distance: between,
        support_mean_spread: within,
        degenerate: projection.degenerate,
    })
}

pub fn cmd_project(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<ProjectionSummary> {
    let data = load_data(&cfg.data_dir())?;
    let ckpt_path = default_checkpoint(cfg, checkpoint);
    let model = load_model(&ckpt_path, &data.vocab)?;
    let dir = cfg.project_dir();
    fs::create_dir_all(&dir)?;
    let summary = project_confused_pair(&model, &data.eval, &cfg.eval, &dir.join("projection.csv"))?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    let mut m = Manifest::new("project", cfg)?;
    record_data_inputs(&mut m, cfg)?;
    m.input(&ckpt_path)?;
    m.finish(&dir, cfg, &["projection.csv", "summary.json"])?;
    Ok(summary)
}

/// Loads a checkpoint file without a vocabulary, for inspection.
pub fn inspect_checkpoint(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path)
}
