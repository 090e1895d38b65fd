//! Operator surface behind the CLI: run directories with resolved configs,
//! data-root artifact management, lock files, and the eight pipeline
//! commands (gen-data, train-teacher, distill, train-satic, decode, eval,
//! bench, ablate).

use std::collections::HashMap;
use std::fs;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    generate_corpus, read_jsonl, write_jsonl, CorpusConfig, DatasetItem, Vocabulary,
};
use crate::decoding::{
    beam_decode, bench_csv, greedy_decode_batch, measure_latency, BenchRow,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport, NGramStats};
use crate::model::{CheckpointMeta, Model, ModelConfig};
use crate::training::{
    distill_dataset, init_from_teacher, prepare_items, train_stage, Optimizer, OptimizerConfig,
    Stage, TrainOptions,
};

/// Environment variable naming the default data root.
pub const ENV_DATA_ROOT: &str = "SATIC_DATA_ROOT";

/// Resolves the data root: explicit flag, then $SATIC_DATA_ROOT, then ./data.
pub fn data_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(ENV_DATA_ROOT).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Exclusive lock on an output directory, released on drop. A stale lock
/// (left by a killed process) must be removed by hand; the error says so.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<DirLock> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::validation(format!(
                    "{} is locked by another command; remove {} if no other process is running",
                    dir.display(),
                    path.display()
                )))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Locations of the dataset artifacts under a data root.
#[derive(Debug, Clone)]
pub struct DataPaths {
    pub root: PathBuf,
}

impl DataPaths {
    pub fn new(root: PathBuf) -> DataPaths {
        DataPaths { root }
    }

    pub fn split(&self, name: &str) -> PathBuf {
        self.root.join(format!("{name}.jsonl"))
    }

    pub fn distilled(&self) -> PathBuf {
        self.root.join("train.distilled.jsonl")
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.json")
    }

    pub fn corpus_config(&self) -> PathBuf {
        self.root.join("corpus_config.json")
    }

    pub fn runs(&self) -> PathBuf {
        self.root.join("runs")
    }

    pub fn load_split(&self, name: &str) -> Result<Vec<DatasetItem>> {
        let path = self.split(name);
        if !["train", "val", "test"].contains(&name) {
            return Err(Error::validation(format!(
                "unknown split `{name}`; expected train, val, or test"
            )));
        }
        if !path.exists() {
            return Err(Error::validation(format!(
                "missing dataset file {}; produce it with `satic gen-data`",
                path.display()
            )));
        }
        read_jsonl(&path)
    }

    pub fn load_vocab(&self) -> Result<Vocabulary> {
        let path = self.vocab();
        if !path.exists() {
            return Err(Error::validation(format!(
                "missing vocabulary file {}; produce it with `satic gen-data`",
                path.display()
            )));
        }
        Vocabulary::load(&path)
    }

    pub fn load_distilled(&self) -> Result<Vec<DatasetItem>> {
        load_distilled_file(&self.distilled())
    }
}

fn load_distilled_file(path: &Path) -> Result<Vec<DatasetItem>> {
    if !path.exists() {
        return Err(Error::validation(format!(
            "missing distilled training set {}; produce it with `satic distill`",
            path.display()
        )));
    }
    read_jsonl(path)
}

/// Fully resolved knobs of one run. Precedence when resolving: built-in
/// defaults, then a config file, then command-line flags. The resolved
/// value is persisted as config.json inside the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Model size profile: "desk" or "paper".
    pub profile: String,
    pub k: usize,
    pub beam_width: usize,
    pub seed: u64,
    pub epochs_xe: u64,
    pub epochs_sc: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub sc_lr: f64,
    pub n_samples: usize,
    pub seqkd: bool,
    pub weight_init: bool,
    pub scheduled_sampling: bool,
    pub ss_cap: f64,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            profile: "desk".to_string(),
            k: 1,
            beam_width: 1,
            seed: 7,
            epochs_xe: 15,
            epochs_sc: 25,
            batch_size: 10,
            lr: 5e-4,
            warmup: 1000,
            sc_lr: 5e-5,
            n_samples: 5,
            seqkd: false,
            weight_init: false,
            scheduled_sampling: false,
            ss_cap: 0.25,
        }
    }
}

impl RunConfig {
    /// Loads a (possibly partial) config file; absent fields keep defaults.
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.profile != "desk" && self.profile != "paper" {
            return Err(Error::validation(format!(
                "unknown profile `{}`; expected desk or paper",
                self.profile
            )));
        }
        if self.k == 0 || self.beam_width == 0 || self.batch_size == 0 {
            return Err(Error::validation(
                "k, beam width, and batch size must be at least 1",
            ));
        }
        if self.epochs_sc > 0 && self.n_samples < 2 {
            return Err(Error::validation(
                "self-critical training needs at least 2 samples",
            ));
        }
        Ok(())
    }

    /// Transformer dimensions for this profile, sized to the dataset.
    pub fn model_config(&self, vocab_size: usize, d_feat: usize) -> Result<ModelConfig> {
        let base = match self.profile.as_str() {
            "desk" => ModelConfig {
                d_model: 64,
                n_heads: 4,
                d_k: 16,
                d_v: 16,
                d_ff: 128,
                n_layers: 2,
                vocab_size,
                max_len: 16,
                k: self.k,
                dropout: 0.1,
                d_feat,
            },
            "paper" => ModelConfig {
                d_model: 512,
                n_heads: 8,
                d_k: 64,
                d_v: 64,
                d_ff: 2048,
                n_layers: 6,
                vocab_size,
                max_len: 16,
                k: self.k,
                dropout: 0.1,
                d_feat,
            },
            other => {
                return Err(Error::validation(format!(
                    "unknown profile `{other}`; expected desk or paper"
                )))
            }
        };
        base.validate()?;
        Ok(base)
    }
}

/// Fixed layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    /// Creates the layout and persists the resolved config.
    pub fn create(root: &Path, cfg: &RunConfig) -> Result<RunDir> {
        cfg.validate()?;
        fs::create_dir_all(root.join("checkpoints"))?;
        fs::create_dir_all(root.join("logs"))?;
        fs::create_dir_all(root.join("reports"))?;
        let dir = RunDir { root: root.to_path_buf() };
        fs::write(dir.config_path(), serde_json::to_string_pretty(cfg)?)?;
        Ok(dir)
    }

    /// Opens an existing run directory and its persisted config.
    pub fn open(root: &Path) -> Result<(RunDir, RunConfig)> {
        let dir = RunDir { root: root.to_path_buf() };
        if !dir.config_path().exists() {
            return Err(Error::validation(format!(
                "{} is not a run directory (no config.json); create one with \
                 `satic train-teacher` or `satic train-satic`",
                root.display()
            )));
        }
        let cfg = RunConfig::from_file(&dir.config_path())?;
        Ok((dir, cfg))
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("logs").join("metrics.jsonl")
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    /// Loads the final model checkpoint, naming the producing command if
    /// it is absent.
    pub fn load_model(&self) -> Result<(Model, CheckpointMeta)> {
        let path = self.checkpoint("model.ckpt");
        if !path.exists() {
            return Err(Error::validation(format!(
                "missing checkpoint {}; produce it with `satic train-teacher` \
                 or `satic train-satic`",
                path.display()
            )));
        }
        Model::load_checkpoint(&path)
    }
}

/// Locates a teacher checkpoint from a run directory or a direct .ckpt path.
pub fn teacher_checkpoint(path: &Path) -> Result<PathBuf> {
    let ckpt = if path.is_dir() {
        path.join("checkpoints").join("model.ckpt")
    } else {
        path.to_path_buf()
    };
    if !ckpt.exists() {
        return Err(Error::validation(format!(
            "teacher checkpoint {} not found; train one with `satic train-teacher`",
            ckpt.display()
        )));
    }
    Ok(ckpt)
}

fn load_k1_teacher(ckpt: &Path) -> Result<Model> {
    let (teacher, _) = Model::load_checkpoint(ckpt)?;
    if teacher.config.k != 1 {
        return Err(Error::validation(format!(
            "{} holds a K={} model; the teacher must be K=1 (train it with \
             `satic train-teacher`)",
            ckpt.display(),
            teacher.config.k
        )));
    }
    Ok(teacher)
}

/// Generates the synthetic corpus into the data root: train/val/test JSONL,
/// vocabulary, and the resolved corpus config.
pub fn cmd_gen_data(root: &Path, n_items: usize, seed: u64) -> Result<()> {
    let _lock = DirLock::acquire(root)?;
    let paths = DataPaths::new(root.to_path_buf());
    let cfg = CorpusConfig {
        n_items,
        seed,
        ..CorpusConfig::default()
    };
    let corpus = generate_corpus(&cfg)?;
    let vocab = Vocabulary::build(
        corpus
            .train
            .iter()
            .flat_map(|i| i.refs.iter().map(String::as_str)),
        5,
    )?;
    write_jsonl(&paths.split("train"), &corpus.train)?;
    write_jsonl(&paths.split("val"), &corpus.val)?;
    write_jsonl(&paths.split("test"), &corpus.test)?;
    vocab.save(&paths.vocab())?;
    fs::write(paths.corpus_config(), serde_json::to_string_pretty(&cfg)?)?;
    println!(
        "wrote {} train / {} val / {} test items, vocabulary of {} tokens, under {}",
        corpus.train.len(),
        corpus.val.len(),
        corpus.test.len(),
        vocab.len(),
        root.display()
    );
    Ok(())
}

/// IDF statistics frozen from the original training references. Distilled
/// items keep their originals in the sidecar, so this is stable across
/// distillation.
fn train_idf(items: &[DatasetItem]) -> Result<NGramStats> {
    let refs: Vec<Vec<String>> = items.iter().map(|i| i.eval_refs().to_vec()).collect();
    NGramStats::from_references(&refs)
}

struct TrainPlan<'a> {
    paths: &'a DataPaths,
    run_root: &'a Path,
    cfg: RunConfig,
    train_path: PathBuf,
    teacher: Option<PathBuf>,
}

/// Shared XE + SCST training driver. Writes per-epoch checkpoints and the
/// metric log, then the final model checkpoint.
fn train_inner(plan: TrainPlan) -> Result<RunDir> {
    let cfg = plan.cfg;
    let run = RunDir::create(plan.run_root, &cfg)?;
    let vocab = plan.paths.load_vocab()?;
    let train_items = if plan.train_path == plan.paths.distilled() {
        load_distilled_file(&plan.train_path)?
    } else {
        plan.paths.load_split("train")?
    };
    let val_items = plan.paths.load_split("val")?;
    if train_items.is_empty() || val_items.is_empty() {
        return Err(Error::validation("training and validation splits must be nonempty"));
    }
    let d_feat = train_items[0]
        .features
        .first()
        .map(Vec::len)
        .unwrap_or(0);
    let mcfg = cfg.model_config(vocab.len(), d_feat)?;

    let mut model = match &plan.teacher {
        Some(ckpt) => {
            let teacher = load_k1_teacher(ckpt)?;
            let mut m = Model::new(mcfg, cfg.seed)?;
            init_from_teacher(&mut m, &teacher)?;
            m
        }
        None => Model::new(mcfg, cfg.seed)?,
    };

    let idf = train_idf(&train_items)?;
    let train = prepare_items(&train_items, &vocab, mcfg.max_len)?;
    let val = prepare_items(&val_items, &vocab, mcfg.max_len)?;

    let metrics_path = run.metrics_path();
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)?;

    if cfg.epochs_xe > 0 {
        let mut opt = Optimizer::new(OptimizerConfig::warmed_up(cfg.lr, cfg.warmup));
        let opts = TrainOptions {
            epochs: cfg.epochs_xe,
            start_epoch: 0,
            batch_size: cfg.batch_size,
            seed: cfg.seed,
            n_samples: cfg.n_samples,
            temperature: 1.0,
            scheduled_sampling: cfg.scheduled_sampling,
            ss_cap: cfg.ss_cap,
        };
        let ckpt = run.checkpoint("xe.ckpt");
        let opt_path = run.checkpoint("xe.ckpt.opt");
        train_stage(
            &mut model,
            &mut opt,
            Stage::Xe,
            &train,
            &val,
            &vocab,
            &idf,
            &opts,
            |rec, m, o| {
                writeln!(log, "{}", serde_json::to_string(rec)?)?;
                m.save_checkpoint(
                    &ckpt,
                    &CheckpointMeta {
                        stage: rec.stage.clone(),
                        epoch: rec.epoch,
                        seed: cfg.seed,
                    },
                )?;
                o.save(&opt_path)?;
                println!(
                    "[xe {}/{}] loss {:.4} val CIDEr-D {:.3} ({:.1}s)",
                    rec.epoch + 1,
                    cfg.epochs_xe,
                    rec.loss,
                    rec.val_cider_d,
                    rec.wall_time_s
                );
                Ok(())
            },
        )?;
    }

    if cfg.epochs_sc > 0 {
        let mut opt = Optimizer::new(OptimizerConfig::constant(cfg.sc_lr));
        let opts = TrainOptions {
            epochs: cfg.epochs_sc,
            start_epoch: 0,
            batch_size: cfg.batch_size,
            seed: cfg.seed.wrapping_add(1),
            n_samples: cfg.n_samples,
            temperature: 1.0,
            scheduled_sampling: false,
            ss_cap: cfg.ss_cap,
        };
        let ckpt = run.checkpoint("scst.ckpt");
        let opt_path = run.checkpoint("scst.ckpt.opt");
        train_stage(
            &mut model,
            &mut opt,
            Stage::Scst,
            &train,
            &val,
            &vocab,
            &idf,
            &opts,
            |rec, m, o| {
                writeln!(log, "{}", serde_json::to_string(rec)?)?;
                m.save_checkpoint(
                    &ckpt,
                    &CheckpointMeta {
                        stage: rec.stage.clone(),
                        epoch: rec.epoch,
                        seed: cfg.seed,
                    },
                )?;
                o.save(&opt_path)?;
                println!(
                    "[scst {}/{}] loss {:+.5} val CIDEr-D {:.3} ({:.1}s)",
                    rec.epoch + 1,
                    cfg.epochs_sc,
                    rec.loss,
                    rec.val_cider_d,
                    rec.wall_time_s
                );
                Ok(())
            },
        )?;
    }

    let final_stage = if cfg.epochs_sc > 0 { "scst" } else { "xe" };
    let final_epoch = if cfg.epochs_sc > 0 { cfg.epochs_sc } else { cfg.epochs_xe };
    model.save_checkpoint(
        &run.checkpoint("model.ckpt"),
        &CheckpointMeta {
            stage: final_stage.to_string(),
            epoch: final_epoch.saturating_sub(1),
            seed: cfg.seed,
        },
    )?;
    println!("saved {}", run.checkpoint("model.ckpt").display());
    Ok(run)
}

/// Trains the K=1 autoregressive teacher.
pub fn cmd_train_teacher(data: &Path, run_root: &Path, mut cfg: RunConfig) -> Result<()> {
    cfg.k = 1;
    cfg.seqkd = false;
    cfg.weight_init = false;
    let _lock = DirLock::acquire(run_root)?;
    let paths = DataPaths::new(data.to_path_buf());
    let train_path = paths.split("train");
    train_inner(TrainPlan {
        paths: &paths,
        run_root,
        cfg,
        train_path,
        teacher: None,
    })?;
    Ok(())
}

/// Replaces training references with the teacher's beam output, writing
/// train.distilled.jsonl next to the originals.
pub fn cmd_distill(data: &Path, teacher: &Path, beam_width: usize) -> Result<()> {
    let _lock = DirLock::acquire(data)?;
    let paths = DataPaths::new(data.to_path_buf());
    let out = paths.distilled();
    distill_inner(&paths, teacher, beam_width, &out)
}

fn distill_inner(
    paths: &DataPaths,
    teacher: &Path,
    beam_width: usize,
    out: &Path,
) -> Result<()> {
    let ckpt = teacher_checkpoint(teacher)?;
    let model = load_k1_teacher(&ckpt)?;
    let vocab = paths.load_vocab()?;
    let items = paths.load_split("train")?;
    let distilled = distill_dataset(&model, &items, beam_width, &vocab)?;
    write_jsonl(out, &distilled)?;
    println!(
        "distilled {} items with beam width {} into {}",
        distilled.len(),
        beam_width,
        out.display()
    );
    Ok(())
}

/// Trains a SATIC model at the configured K, optionally on distilled data
/// and/or from teacher-initialized weights.
pub fn cmd_train_satic(
    data: &Path,
    run_root: &Path,
    cfg: RunConfig,
    teacher: Option<&Path>,
) -> Result<()> {
    let _lock = DirLock::acquire(run_root)?;
    let paths = DataPaths::new(data.to_path_buf());
    let teacher_ckpt = match (cfg.weight_init, teacher) {
        (true, Some(t)) => Some(teacher_checkpoint(t)?),
        (true, None) => {
            return Err(Error::validation(
                "--weight-init needs a teacher checkpoint: pass --teacher or \
                 train one with `satic train-teacher`",
            ))
        }
        (false, _) => None,
    };
    let train_path = if cfg.seqkd {
        paths.distilled()
    } else {
        paths.split("train")
    };
    train_inner(TrainPlan {
        paths: &paths,
        run_root,
        cfg,
        train_path,
        teacher: teacher_ckpt,
    })?;
    Ok(())
}

/// One line of a decode output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub id: u64,
    pub caption: String,
    pub log_prob: f64,
    pub model_calls: usize,
}

pub fn decode_report_name(split: &str, beam_width: usize) -> String {
    format!("decode-{split}-bw{beam_width}.jsonl")
}

pub fn eval_report_name(split: &str, beam_width: usize) -> String {
    format!("eval-{split}-bw{beam_width}.json")
}

/// Decodes a split with the run's model and writes caption JSONL under
/// reports/.
pub fn cmd_decode(
    data: &Path,
    run_root: &Path,
    split: &str,
    beam_width: Option<usize>,
    batch_size: usize,
) -> Result<PathBuf> {
    let _lock = DirLock::acquire(run_root)?;
    let paths = DataPaths::new(data.to_path_buf());
    decode_inner(&paths, run_root, split, beam_width, batch_size)
}

fn decode_inner(
    paths: &DataPaths,
    run_root: &Path,
    split: &str,
    beam_width: Option<usize>,
    batch_size: usize,
) -> Result<PathBuf> {
    if batch_size == 0 {
        return Err(Error::validation("batch size must be at least 1"));
    }
    let (run, cfg) = RunDir::open(run_root)?;
    let bw = beam_width.unwrap_or(cfg.beam_width);
    let (model, _) = run.load_model()?;
    let vocab = paths.load_vocab()?;
    let items = paths.load_split(split)?;
    let cap = model.config.max_len;

    let mut records = Vec::with_capacity(items.len());
    if bw == 1 {
        let feats = items
            .iter()
            .map(|i| i.region_features())
            .collect::<Result<Vec<_>>>()?;
        for (chunk, ichunk) in feats.chunks(batch_size).zip(items.chunks(batch_size)) {
            let refs: Vec<_> = chunk.iter().collect();
            let (outs, _) = greedy_decode_batch(&model, &refs, cap)?;
            for (out, item) in outs.iter().zip(ichunk) {
                records.push(DecodeRecord {
                    id: item.id,
                    caption: crate::data::decode_caption(&out.tokens, &vocab),
                    log_prob: out.log_prob,
                    model_calls: out.model_calls,
                });
            }
        }
    } else {
        for item in &items {
            let out = beam_decode(&model, &item.region_features()?, bw, cap)?;
            records.push(DecodeRecord {
                id: item.id,
                caption: crate::data::decode_caption(&out.tokens, &vocab),
                log_prob: out.log_prob,
                model_calls: out.model_calls,
            });
        }
    }

    let out_path = run.report(&decode_report_name(split, bw));
    let mut body = String::new();
    for r in &records {
        body.push_str(&serde_json::to_string(r)?);
        body.push('\n');
    }
    fs::write(&out_path, body)?;
    println!("decoded {} items into {}", records.len(), out_path.display());
    Ok(out_path)
}

/// Scores a decode output against the split's references and writes the
/// report JSON, printing a summary table.
pub fn cmd_eval(
    data: &Path,
    run_root: &Path,
    split: &str,
    beam_width: Option<usize>,
) -> Result<EvalReport> {
    let _lock = DirLock::acquire(run_root)?;
    let paths = DataPaths::new(data.to_path_buf());
    eval_inner(&paths, run_root, split, beam_width)
}

fn eval_inner(
    paths: &DataPaths,
    run_root: &Path,
    split: &str,
    beam_width: Option<usize>,
) -> Result<EvalReport> {
    let (run, cfg) = RunDir::open(run_root)?;
    let bw = beam_width.unwrap_or(cfg.beam_width);
    let decode_path = run.report(&decode_report_name(split, bw));
    if !decode_path.exists() {
        return Err(Error::validation(format!(
            "missing caption file {}; produce it with `satic decode --run {} \
             --split {split} --beam-width {bw}`",
            decode_path.display(),
            run_root.display()
        )));
    }
    let mut records = Vec::new();
    for line in fs::read_to_string(&decode_path)?.lines() {
        if !line.trim().is_empty() {
            records.push(serde_json::from_str::<DecodeRecord>(line)?);
        }
    }
    let items = paths.load_split(split)?;
    let by_id: HashMap<u64, &DatasetItem> = items.iter().map(|i| (i.id, i)).collect();
    let mut candidates = Vec::with_capacity(records.len());
    let mut references = Vec::with_capacity(records.len());
    for r in &records {
        let item = by_id.get(&r.id).ok_or_else(|| {
            Error::validation(format!("caption id {} is not in the {split} split", r.id))
        })?;
        candidates.push(r.caption.clone());
        references.push(item.eval_refs().to_vec());
    }
    let idf = train_idf(&paths.load_split("train")?)?;
    let report = evaluate(&candidates, &references, &idf)?;
    fs::write(
        run.report(&eval_report_name(split, bw)),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!("split {split}, beam width {bw}, {} captions", report.n_items);
    println!("  BLEU-1   {:.4}", report.bleu1);
    println!("  BLEU-4   {:.4}", report.bleu4);
    println!("  ROUGE-L  {:.4}", report.rouge_l);
    println!("  CIDEr-D  {:.4}", report.cider_d);
    Ok(report)
}

/// Latency benchmark: sweeps K and batch size on the run's weights (group
/// size is a decode-time property, so one checkpoint serves every K) and
/// writes a CSV with speedups over the K=1 baseline at equal batch size.
#[allow(clippy::too_many_arguments)]
pub fn cmd_bench(
    data: &Path,
    run_root: &Path,
    ks: &[usize],
    batch_sizes: &[usize],
    beam_width: usize,
    limit: usize,
    warmup: usize,
) -> Result<PathBuf> {
    let _lock = DirLock::acquire(run_root)?;
    let paths = DataPaths::new(data.to_path_buf());
    bench_inner(&paths, run_root, ks, batch_sizes, beam_width, limit, warmup)
}

fn bench_inner(
    paths: &DataPaths,
    run_root: &Path,
    ks: &[usize],
    batch_sizes: &[usize],
    beam_width: usize,
    limit: usize,
    warmup: usize,
) -> Result<PathBuf> {
    let (run, _) = RunDir::open(run_root)?;
    if ks.is_empty() || batch_sizes.is_empty() || limit == 0 {
        return Err(Error::validation(
            "bench needs at least one K, one batch size, and a positive item limit",
        ));
    }
    let batch_sizes: Vec<usize> = if beam_width > 1 {
        vec![1]
    } else {
        batch_sizes.to_vec()
    };
    let mut ks: Vec<usize> = ks.to_vec();
    if !ks.contains(&1) {
        ks.insert(0, 1);
    }
    ks.sort_unstable();
    ks.dedup();

    let items = paths.load_split("test")?;
    let feats = items
        .iter()
        .take(limit)
        .map(|i| i.region_features())
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for &bs in &batch_sizes {
        let mut baseline = None;
        for &k in &ks {
            let (mut model, _) = run.load_model()?;
            if k > model.config.max_len {
                return Err(Error::validation(format!(
                    "K={k} exceeds the model's max length {}",
                    model.config.max_len
                )));
            }
            model.set_k(k);
            let stats = measure_latency(&model, &feats, beam_width, bs, warmup)?;
            if k == 1 {
                baseline = Some(stats.mean_ms);
            }
            let speedup = baseline.map(|b| b / stats.mean_ms).unwrap_or(1.0);
            rows.push(BenchRow {
                k,
                bw: beam_width,
                batch_size: bs,
                mean_ms: stats.mean_ms,
                std_ms: stats.std_ms,
                model_calls: stats.calls_per_sentence,
                speedup,
            });
        }
    }
    let csv = bench_csv(&rows);
    let out = run.report("bench.csv");
    fs::write(&out, &csv)?;
    print!("{csv}");
    println!("wrote {}", out.display());
    Ok(out)
}

/// One evaluated cell of the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub k: usize,
    pub variant: String,
    pub beam_width: usize,
    pub bleu1: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
}

const ABLATION_VARIANTS: [(&str, bool, bool); 4] = [
    ("base", false, false),
    ("+seqkd", true, false),
    ("+winit", false, true),
    ("+seqkd+winit", true, true),
];

fn variant_dir(k: usize, variant: &str) -> String {
    format!("k{k}-{}", variant.replace('+', "").replace("seqkdwinit", "seqkd-winit"))
}

/// Trains and evaluates the {K} x {beam width} x {seqkd, weight-init} grid
/// on the desk corpus and writes a Table-4-shaped summary.
pub fn cmd_ablate(
    data: &Path,
    out_root: &Path,
    base: RunConfig,
    ks: &[usize],
    bws: &[usize],
) -> Result<PathBuf> {
    let _lock = DirLock::acquire(out_root)?;
    let paths = DataPaths::new(data.to_path_buf());
    if ks.is_empty() || bws.is_empty() {
        return Err(Error::validation("ablate needs at least one K and one beam width"));
    }

    // The K=1 base cell doubles as the distillation/weight-init teacher.
    let teacher_root = out_root.join("teacher");
    let mut teacher_cfg = base.clone();
    teacher_cfg.k = 1;
    teacher_cfg.seqkd = false;
    teacher_cfg.weight_init = false;
    println!("== teacher (K=1 base) ==");
    train_inner(TrainPlan {
        paths: &paths,
        run_root: &teacher_root,
        cfg: teacher_cfg,
        train_path: paths.split("train"),
        teacher: None,
    })?;
    let teacher_ckpt = teacher_root.join("checkpoints").join("model.ckpt");

    let distilled_path = out_root.join("train.distilled.jsonl");
    distill_inner(&paths, &teacher_ckpt, 5, &distilled_path)?;

    let mut cells = Vec::new();
    for &k in ks {
        for (variant, seqkd, winit) in ABLATION_VARIANTS {
            let run_root = if k == 1 && variant == "base" {
                teacher_root.clone()
            } else {
                let root = out_root.join(variant_dir(k, variant));
                let mut cfg = base.clone();
                cfg.k = k;
                cfg.seqkd = seqkd;
                cfg.weight_init = winit;
                println!("== K={k} {variant} ==");
                train_inner(TrainPlan {
                    paths: &paths,
                    run_root: &root,
                    cfg,
                    train_path: if seqkd {
                        distilled_path.clone()
                    } else {
                        paths.split("train")
                    },
                    teacher: winit.then(|| teacher_ckpt.clone()),
                })?;
                root
            };
            for &bw in bws {
                decode_inner(&paths, &run_root, "test", Some(bw), 25)?;
                let report = eval_inner(&paths, &run_root, "test", Some(bw))?;
                cells.push(AblationCell {
                    k,
                    variant: variant.to_string(),
                    beam_width: bw,
                    bleu1: report.bleu1,
                    bleu4: report.bleu4,
                    rouge_l: report.rouge_l,
                    cider_d: report.cider_d,
                });
            }
        }
    }

    fs::write(
        out_root.join("ablation.json"),
        serde_json::to_string_pretty(&cells)?,
    )?;
    let table = ablation_table(&cells, ks, bws);
    fs::write(out_root.join("ablation.md"), &table)?;
    print!("{table}");
    Ok(out_root.join("ablation.json"))
}

/// CIDEr-D grid, one row per variant, one column per (K, beam width).
fn ablation_table(cells: &[AblationCell], ks: &[usize], bws: &[usize]) -> String {
    let mut out = String::from("| variant |");
    for &k in ks {
        for &bw in bws {
            out.push_str(&format!(" K={k} bw={bw} |"));
        }
    }
    out.push('\n');
    out.push_str("|---|");
    for _ in 0..ks.len() * bws.len() {
        out.push_str("---|");
    }
    out.push('\n');
    for (variant, _, _) in ABLATION_VARIANTS {
        out.push_str(&format!("| {variant} |"));
        for &k in ks {
            for &bw in bws {
                let cell = cells
                    .iter()
                    .find(|c| c.k == k && c.beam_width == bw && c.variant == variant);
                match cell {
                    Some(c) => out.push_str(&format!(" {:.3} |", c.cider_d)),
                    None => out.push_str(" - |"),
                }
            }
        }
        out.push('\n');
    }
    out
}
