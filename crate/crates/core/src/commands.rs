//! The pretrain / classify / eval / diagnose / synth commands.
//!
//! Each command is a function of the resolved [`RunConfig`] and the files it
//! names. Log records are JSON objects, one per line; the first record of
//! every log embeds the resolved configuration.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{label_names, read_records, synth_generate, train_test_split, write_records, Dataset, Vocab};
use crate::error::{Error, Result};
use crate::model::{Bottleneck, Model};
use crate::rng::RngState;
use crate::train::{
    compute_metrics, evaluate_reconstruction, pooled_features, predict, subsample_labeled, train_classifier,
    ClassificationMetrics, PretrainMetrics, Pretrainer,
};

/// Buffered JSONL run log, written atomically on [`RunLog::finish`].
pub struct RunLog {
    path: Option<PathBuf>,
    lines: Vec<String>,
}

impl RunLog {
    pub fn new(path: Option<PathBuf>, command: &str, cfg: &RunConfig) -> Self {
        let mut log = Self {
            path,
            lines: Vec::new(),
        };
        log.record(json!({ "event": "config", "command": command, "config": cfg }));
        log
    }

    pub fn record(&mut self, v: Value) {
        log::debug!("{v}");
        self.lines.push(v.to_string());
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn finish(self) -> Result<Vec<String>> {
        if let Some(path) = &self.path {
            let dir = path
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .unwrap_or(Path::new("."));
            let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
            for l in &self.lines {
                writeln!(tmp, "{l}")?;
            }
            tmp.persist(path).map_err(|e| Error::Io(e.error))?;
        }
        Ok(self.lines)
    }
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(vec![format!("`{key}` path is required")]))
}

fn load_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    let path = required(&cfg.checkpoint, "checkpoint")?;
    if !path.exists() {
        return Err(Error::Checkpoint(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    Checkpoint::load(path)
}

/// Corpus split into train and held-out parts under a fixed vocabulary.
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

fn split_with(cfg: &RunConfig, vocab: &Vocab, labels: &[String], max_len: usize) -> Result<Splits> {
    let records = read_records(required(&cfg.data, "data")?)?;
    let all = Dataset::from_records(&records, vocab, labels, max_len)?;
    let (tr, te) = train_test_split(all.len(), cfg.test_fraction, cfg.split_seed)?;
    Ok(Splits {
        train: all.subset(&tr),
        test: all.subset(&te),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct PretrainReport {
    pub epochs: Vec<PretrainMetrics>,
    pub final_eval: PretrainMetrics,
    pub log: Vec<String>,
}

/// Pretrains on the training split and writes the checkpoint.
pub fn pretrain(cfg: &RunConfig) -> Result<PretrainReport> {
    cfg.validate()?;
    let ckpt_path = required(&cfg.checkpoint, "checkpoint")?;
    let records = read_records(required(&cfg.data, "data")?)?;
    let (tr, _) = train_test_split(records.len(), cfg.test_fraction, cfg.split_seed)?;
    let train_records: Vec<_> = tr.iter().map(|&i| records[i].clone()).collect();
    let vocab = Vocab::build(train_records.iter().map(|r| r.text.as_str()), cfg.vocab_size)?;
    let labels = label_names(&records);
    let train = Dataset::from_records(&train_records, &vocab, &labels, cfg.max_len)?;

    let model = Model::<f32>::new(cfg.model_config(), &mut RngState::new(cfg.seed))?;
    let mut trainer = Pretrainer::new(model, cfg.train_config());
    let mut log = RunLog::new(cfg.log.clone(), "pretrain", cfg);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let m = trainer.pretrain_epoch(&train.sequences)?;
        log::info!(
            "epoch {} loss {:.4} recon_acc {:.4}",
            m.epoch,
            m.total_loss,
            m.reconstruction_accuracy
        );
        log.record(json!({ "event": "epoch", "metrics": m }));
        epochs.push(m);
    }
    let final_eval = evaluate_reconstruction(&trainer.model, &train.sequences, cfg.batch_size.max(32))?;
    log.record(json!({ "event": "final", "metrics": final_eval }));
    let run = serde_json::to_value(cfg)?;
    Checkpoint::from_model(&trainer.model, vocab, labels, run).save(ckpt_path)?;
    Ok(PretrainReport {
        epochs,
        final_eval,
        log: log.finish()?,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ClassifyReport {
    pub labeled_examples: usize,
    pub train: ClassificationMetrics,
    pub test: ClassificationMetrics,
    pub log: Vec<String>,
}

fn ensure_micro_f1(m: &ClassificationMetrics) -> Result<()> {
    if (m.f1 - m.accuracy).abs() > 1e-12 {
        return Err(Error::invalid(format!(
            "micro-F1 {} differs from accuracy {} on single-label data",
            m.f1, m.accuracy
        )));
    }
    Ok(())
}

/// Trains the classifier head on the labeled fraction of the training split
/// with the encoder frozen, reports held-out metrics, and writes the updated
/// checkpoint back.
pub fn classify(cfg: &RunConfig) -> Result<ClassifyReport> {
    cfg.validate()?;
    let ckpt = load_checkpoint(cfg)?;
    let mut model = ckpt.to_model()?;
    let max_len = model.config.encoder.max_len;
    let splits = split_with(cfg, &ckpt.vocab, &ckpt.labels, max_len)?;
    let c = splits.train.num_classes();
    let chosen = subsample_labeled(&splits.train.labels, c, cfg.labeled_fraction, cfg.seed)?;
    let labeled = splits.train.subset(&chosen);
    let feats = pooled_features(&model, &labeled.sequences, 64)?;
    let mut log = RunLog::new(cfg.log.clone(), "classify", cfg);
    let losses = train_classifier(&mut model, &feats, &labeled.labels, c, &cfg.classifier_config())?;
    log.record(json!({ "event": "classifier", "labeled_examples": labeled.len(), "epoch_losses": losses }));
    let train = compute_metrics(&predict(&model, &feats)?, &labeled.labels, c)?;
    let test = evaluate_classifier(&model, &splits.test)?;
    ensure_micro_f1(&train)?;
    ensure_micro_f1(&test)?;
    log.record(json!({ "event": "metrics", "split": "train", "metrics": train }));
    log.record(json!({ "event": "metrics", "split": "test", "metrics": test }));
    let run = serde_json::to_value(cfg)?;
    Checkpoint::from_model(&model, ckpt.vocab, ckpt.labels, run).save(required(&cfg.checkpoint, "checkpoint")?)?;
    Ok(ClassifyReport {
        labeled_examples: labeled.len(),
        train,
        test,
        log: log.finish()?,
    })
}

pub fn evaluate_classifier(model: &Model<f32>, data: &Dataset) -> Result<ClassificationMetrics> {
    let feats = pooled_features(model, &data.sequences, 64)?;
    compute_metrics(&predict(model, &feats)?, &data.labels, data.num_classes())
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub classification: Option<ClassificationMetrics>,
    pub reconstruction: PretrainMetrics,
    pub log: Vec<String>,
}

/// Metrics on the held-out split.
pub fn eval(cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let ckpt = load_checkpoint(cfg)?;
    let model = ckpt.to_model()?;
    let splits = split_with(cfg, &ckpt.vocab, &ckpt.labels, model.config.encoder.max_len)?;
    if splits.test.is_empty() {
        return Err(Error::Empty("held-out split (test_fraction is 0)".into()));
    }
    let mut log = RunLog::new(cfg.log.clone(), "eval", cfg);
    let classification = match model.params.classifier {
        Some(_) => {
            let m = evaluate_classifier(&model, &splits.test)?;
            ensure_micro_f1(&m)?;
            Some(m)
        }
        None => None,
    };
    let reconstruction = evaluate_reconstruction(&model, &splits.test.sequences, 64)?;
    log.record(json!({ "event": "eval", "classification": classification, "reconstruction": reconstruction }));
    Ok(EvalReport {
        classification,
        reconstruction,
        log: log.finish()?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubEncoderRecord {
    pub record: &'static str,
    pub sub_encoder: usize,
    pub codebook_size: usize,
    pub entropy_bits: f64,
    pub perplexity: f64,
    pub used_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    pub record: &'static str,
    pub total_loss: f64,
    pub reconstruction_loss: f64,
    pub vq_loss: f64,
    pub commitment_loss: f64,
    pub reconstruction_accuracy: f64,
    pub summed_perplexity: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DiagnoseReport {
    pub sub_encoders: Vec<SubEncoderRecord>,
    pub losses: LossRecord,
}

impl DiagnoseReport {
    /// One JSON object per line: the sub-encoder rows, then the loss row.
    pub fn to_jsonl(&self) -> Result<Vec<String>> {
        let mut out = self
            .sub_encoders
            .iter()
            .map(serde_json::to_string)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        out.push(serde_json::to_string(&self.losses)?);
        Ok(out)
    }
}

/// Codeword utilization and loss breakdown of a model over `data`.
pub fn diagnose_model(model: &Model<f32>, data: &[Vec<usize>]) -> Result<DiagnoseReport> {
    let m = evaluate_reconstruction(model, data, 64)?;
    let k = sub_codebook_size(model);
    let sub_encoders = m
        .utilization
        .iter()
        .enumerate()
        .map(|(i, u)| SubEncoderRecord {
            record: "sub_encoder",
            sub_encoder: i,
            codebook_size: k,
            entropy_bits: u.entropy_bits,
            perplexity: u.perplexity,
            used_fraction: u.used_fraction,
        })
        .collect();
    Ok(DiagnoseReport {
        sub_encoders,
        losses: LossRecord {
            record: "losses",
            total_loss: m.total_loss,
            reconstruction_loss: m.reconstruction_loss,
            vq_loss: m.vq_loss,
            commitment_loss: m.commitment_loss,
            reconstruction_accuracy: m.reconstruction_accuracy,
            summed_perplexity: m.utilization.iter().map(|u| u.perplexity).sum(),
        },
    })
}

/// Codes available to each sub-encoder; semantic hashing counts each bit as
/// a two-code sub-encoder.
fn sub_codebook_size(model: &Model<f32>) -> usize {
    match &model.bottleneck {
        Bottleneck::Quantizer(cb) => cb.shape().sub_size,
        Bottleneck::Gumbel(g) => g.cfg.k,
        Bottleneck::SemHash(_) => 2,
    }
}

/// Utilization diagnostics over the whole corpus named by `data`.
pub fn diagnose(cfg: &RunConfig) -> Result<DiagnoseReport> {
    cfg.validate()?;
    let ckpt = load_checkpoint(cfg)?;
    let model = ckpt.to_model()?;
    let records = read_records(required(&cfg.data, "data")?)?;
    let all = Dataset::from_records(&records, &ckpt.vocab, &ckpt.labels, model.config.encoder.max_len)?;
    let report = diagnose_model(&model, &all.sequences)?;
    let mut log = RunLog::new(cfg.log.clone(), "diagnose", cfg);
    for line in report.to_jsonl()? {
        log.record(serde_json::from_str(&line)?);
    }
    log.finish()?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SynthArgs {
    pub num_classes: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub per_class: usize,
    pub seed: u64,
}

/// Writes a synthetic corpus as JSONL; returns the record count.
pub fn synth(args: SynthArgs, out: &Path) -> Result<usize> {
    let records = synth_generate(
        args.num_classes,
        args.vocab_size,
        args.seq_len,
        args.per_class,
        args.seed,
    )?;
    write_records(out, &records)?;
    Ok(records.len())
}
