//! End-to-end stages: in-memory functions shared by the command line and the
//! experiment harness, plus the commands that read and write artifacts in
//! the output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversary::{finetune, FinetuneOutcome, Toggles};
use crate::config::RunConfig;
use crate::corpus::{generate_synthetic_corpus, load_manifest, split_dataset, write_manifest, PairRecord};
use crate::encoders::DualEncoder;
use crate::error::{Error, Result};
use crate::eval::{evaluate, transfer_eval, EvalReport, RecallReport, TransferReport};
use crate::geotag::{cluster_tags, pca_2d, tag_frequency, TagMatrix};
use crate::pretrain::{pretrain, PretrainOutcome};

pub const MANIFEST_SOURCE: &str = "manifest_source.jsonl";
pub const MANIFEST_TARGET: &str = "manifest_target.jsonl";
pub const MANIFEST_SOURCE_TEST: &str = "manifest_source_test.jsonl";
pub const MANIFEST_TARGET_TEST: &str = "manifest_target_test.jsonl";
pub const CHECKPOINT_PRETRAIN: &str = "checkpoint_pretrain.bin";
pub const CHECKPOINT_ADAPT: &str = "checkpoint_adapt.bin";
pub const CONFIG_SNAPSHOT: &str = "config_snapshot.json";

/// Train, validation and test pairs of one domain.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<PairRecord>,
    pub val: Vec<PairRecord>,
    pub test: Vec<PairRecord>,
}

#[derive(Debug, Clone)]
pub struct Domains {
    /// Split 7:1:2.
    pub source: Splits,
    /// Split 2:1:7.
    pub target: Splits,
}

pub fn split_domains(cfg: &RunConfig, source: Vec<PairRecord>, target: Vec<PairRecord>) -> Result<Domains> {
    let (train, val, test) = split_dataset(source, &cfg.pretrain_split())?;
    let source = Splits { train, val, test };
    let (train, val, test) = split_dataset(target, &cfg.finetune_split())?;
    let target = Splits { train, val, test };
    Ok(Domains { source, target })
}

/// Generate the synthetic corpus and split both domains.
pub fn synthetic_domains(cfg: &RunConfig) -> Result<Domains> {
    let corpus = generate_synthetic_corpus(&cfg.data_config())?;
    split_domains(cfg, corpus.source.records, corpus.target.records)
}

/// Fresh encoder sized for `records`, trained on the source splits.
pub fn pretrain_source(cfg: &RunConfig, source: &Splits, dump: Option<PathBuf>) -> Result<PretrainOutcome> {
    let all: Vec<PairRecord> = source.train.iter().chain(&source.val).chain(&source.test).cloned().collect();
    let model = DualEncoder::new(cfg.encoder_for(&all)?)?;
    pretrain(model, &source.train, &source.val, &cfg.filter, &cfg.pretrain, cfg.seed, dump)
}

pub fn adapt_target(
    cfg: &RunConfig,
    pretrained: &DualEncoder,
    domains: &Domains,
    toggles: Toggles,
    dump: Option<PathBuf>,
) -> Result<(FinetuneOutcome, TransferReport)> {
    let outcome = finetune(
        pretrained,
        &domains.source.train,
        &domains.target.train,
        &domains.target.val,
        &cfg.adapt,
        toggles,
        cfg.seed,
        dump,
    )?;
    let report = transfer_eval(pretrained, &outcome.model, &domains.target.test)?;
    Ok((outcome, report))
}

/// The four ablation settings: full, without SS, without CL, without AT.
pub fn ablation_toggles() -> [Toggles; 4] {
    let full = Toggles::default();
    [
        full,
        Toggles { ss: false, ..full },
        Toggles { cl: false, ..full },
        Toggles { at: false, ..full },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub toggles: Toggles,
    pub selected_epoch: usize,
    pub recall: RecallReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateReport {
    pub seed: u64,
    pub direct: RecallReport,
    pub rows: Vec<AblationRow>,
    /// Whether the full configuration's MeanR is at least every other row's.
    pub full_is_max: bool,
}

pub fn run_ablation(cfg: &RunConfig, pretrained: &DualEncoder, domains: &Domains) -> Result<AblateReport> {
    let direct = evaluate(pretrained, &domains.target.test)?;
    let mut rows = Vec::new();
    for toggles in ablation_toggles() {
        let (outcome, report) = adapt_target(cfg, pretrained, domains, toggles, None)?;
        rows.push(AblationRow {
            label: toggles.label().to_string(),
            toggles,
            selected_epoch: outcome.selected_epoch,
            recall: report.adapted,
        });
    }
    let full = rows[0].recall.mean_recall;
    let full_is_max = rows[1..].iter().all(|r| full >= r.recall.mean_recall);
    Ok(AblateReport {
        seed: cfg.seed,
        direct,
        rows,
        full_is_max,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub selected_epoch: usize,
    pub val_mean_recall: Option<f64>,
    pub epoch_losses: Vec<f64>,
    pub source_test: RecallReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub seed: u64,
    pub label: String,
    pub toggles: Toggles,
    pub n_source_train: usize,
    pub n_target_train: usize,
    pub n_target_test: usize,
    pub selected_epoch: usize,
    pub val_mean_recall: Option<f64>,
    #[serde(flatten)]
    pub transfer: TransferReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagPoint {
    pub tag: String,
    pub count: usize,
    pub x: f64,
    pub y: f64,
    pub cluster: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagReport {
    pub manifest_path: String,
    pub n_records: usize,
    pub frequency: BTreeMap<String, usize>,
    pub explained_variance: [f64; 2],
    pub components: [Vec<f64>; 2],
    pub k: usize,
    pub tags: Vec<TagPoint>,
    pub kmeans_iterations: usize,
}

pub fn analyze_records(records: &[PairRecord], k: usize, seed: u64, manifest_path: String) -> Result<TagReport> {
    let frequency = tag_frequency(records);
    let matrix = TagMatrix::from_records(records);
    let pca = pca_2d(&matrix)?;
    let clustering = cluster_tags(&pca.projections, k, seed)?;
    let tags = matrix
        .tags
        .iter()
        .zip(&pca.projections)
        .zip(&clustering.labels)
        .map(|((tag, p), &cluster)| TagPoint {
            tag: tag.clone(),
            count: frequency[tag],
            x: p[0],
            y: p[1],
            cluster,
        })
        .collect();
    Ok(TagReport {
        manifest_path,
        n_records: records.len(),
        frequency,
        explained_variance: pca.explained_variance,
        components: pca.components,
        k,
        tags,
        kmeans_iterations: clustering.iterations,
    })
}

// Commands over the output directory.

fn out_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for row in rows {
        text.push_str(&serde_json::to_string(row)?);
        text.push('\n');
    }
    write_text(path, &text)
}

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    write_text(&out_path(cfg, CONFIG_SNAPSHOT), &(cfg.to_json() + "\n"))
}

/// Input artifact that must exist; a missing file is a configuration error.
fn require(path: &Path, flag: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::config(flag, format!("{} does not exist", path.display())))
    }
}

fn load_required(cfg: &RunConfig, name: &str) -> Result<Vec<PairRecord>> {
    let path = out_path(cfg, name);
    require(&path, "--out")?;
    load_manifest(path)
}

fn load_domains(cfg: &RunConfig) -> Result<Domains> {
    let source = load_required(cfg, MANIFEST_SOURCE)?;
    let target = load_required(cfg, MANIFEST_TARGET)?;
    split_domains(cfg, source, target)
}

fn load_checkpoint(path: &Path) -> Result<DualEncoder> {
    require(path, "--checkpoint")?;
    Ok(DualEncoder::load(path)?.0)
}

/// `gen-data`: both manifests and the config snapshot.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    prepare_out(cfg)?;
    let corpus = generate_synthetic_corpus(&cfg.data_config())?;
    write_manifest(out_path(cfg, MANIFEST_SOURCE), &corpus.source.records)?;
    write_manifest(out_path(cfg, MANIFEST_TARGET), &corpus.target.records)
}

/// `pretrain`: contrastive training on the source manifest.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PretrainReport> {
    let domains = load_domains(cfg)?;
    prepare_out(cfg)?;
    let outcome = pretrain_source(cfg, &domains.source, Some(out_path(cfg, "checkpoint_pretrain_diverged.bin")))?;
    outcome.model.save(out_path(cfg, CHECKPOINT_PRETRAIN), "pretrain")?;
    write_jsonl(&out_path(cfg, "log_pretrain.jsonl"), &outcome.log)?;
    write_manifest(out_path(cfg, MANIFEST_SOURCE_TEST), &domains.source.test)?;
    let report = PretrainReport {
        seed: cfg.seed,
        n_train: domains.source.train.len(),
        n_val: domains.source.val.len(),
        n_test: domains.source.test.len(),
        selected_epoch: outcome.selected_epoch,
        val_mean_recall: outcome.val_mean_recall,
        epoch_losses: outcome.epoch_losses(),
        source_test: evaluate(&outcome.model, &domains.source.test)?,
    };
    write_json(&out_path(cfg, "report_pretrain.json"), &report)?;
    Ok(report)
}

/// `adapt`: fine-tune the pretrained checkpoint towards the target domain.
pub fn cmd_adapt(cfg: &RunConfig) -> Result<AdaptReport> {
    let pretrained = load_checkpoint(&out_path(cfg, CHECKPOINT_PRETRAIN))?;
    let domains = load_domains(cfg)?;
    prepare_out(cfg)?;
    let (outcome, transfer) = adapt_target(
        cfg,
        &pretrained,
        &domains,
        cfg.toggles,
        Some(out_path(cfg, "checkpoint_adapt_diverged.bin")),
    )?;
    outcome.model.save(out_path(cfg, CHECKPOINT_ADAPT), "adapt")?;
    write_jsonl(&out_path(cfg, "log_adapt.jsonl"), &outcome.log)?;
    if cfg.adapt.debug_dump {
        write_jsonl(&out_path(cfg, "log_sampler.jsonl"), &outcome.sampler_dumps)?;
    }
    write_manifest(out_path(cfg, MANIFEST_TARGET_TEST), &domains.target.test)?;
    let report = AdaptReport {
        seed: cfg.seed,
        label: cfg.toggles.label().to_string(),
        toggles: cfg.toggles,
        n_source_train: domains.source.train.len(),
        n_target_train: domains.target.train.len(),
        n_target_test: domains.target.test.len(),
        selected_epoch: outcome.selected_epoch,
        val_mean_recall: outcome.val_mean_recall,
        transfer,
    };
    write_json(&out_path(cfg, "report_adapt.json"), &report)?;
    Ok(report)
}

/// Path as written in reports: relative to the output directory when inside it.
fn display_path(cfg: &RunConfig, path: &Path) -> String {
    path.strip_prefix(&cfg.out_dir).unwrap_or(path).display().to_string()
}

/// `eval`: retrieval metrics of a checkpoint on a manifest. Defaults to the
/// adapted checkpoint and the target test split.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, manifest: Option<&Path>) -> Result<EvalReport> {
    let checkpoint = checkpoint.map_or_else(|| out_path(cfg, CHECKPOINT_ADAPT), Path::to_path_buf);
    let manifest = manifest.map_or_else(|| out_path(cfg, MANIFEST_TARGET_TEST), Path::to_path_buf);
    require(&checkpoint, "--checkpoint")?;
    require(&manifest, "--manifest")?;
    let bytes = fs::read(&checkpoint).map_err(|e| Error::io(&checkpoint, e))?;
    let (model, _) = DualEncoder::from_bytes(&bytes)?;
    let records = load_manifest(&manifest)?;
    prepare_out(cfg)?;
    let report = EvalReport {
        recall: evaluate(&model, &records)?,
        n_queries: records.len(),
        checkpoint_id: hex::encode(Sha256::digest(&bytes)),
        manifest_path: display_path(cfg, &manifest),
    };
    write_json(&out_path(cfg, "report_eval.json"), &report)?;
    Ok(report)
}

/// `ablate`: the four toggle settings from the pretrained checkpoint.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<AblateReport> {
    let pretrained = load_checkpoint(&out_path(cfg, CHECKPOINT_PRETRAIN))?;
    let domains = load_domains(cfg)?;
    prepare_out(cfg)?;
    let report = run_ablation(cfg, &pretrained, &domains)?;
    write_json(&out_path(cfg, "report_ablate.json"), &report)?;
    Ok(report)
}

/// `analyze-tags`: tag statistics of a manifest, the source manifest by default.
pub fn cmd_analyze_tags(cfg: &RunConfig, manifest: Option<&Path>) -> Result<TagReport> {
    let manifest = manifest.map_or_else(|| out_path(cfg, MANIFEST_SOURCE), Path::to_path_buf);
    require(&manifest, "--manifest")?;
    let records = load_manifest(&manifest)?;
    prepare_out(cfg)?;
    let report = analyze_records(&records, cfg.tags.k, cfg.seed, display_path(cfg, &manifest))?;
    write_json(&out_path(cfg, "report_tags.json"), &report)?;
    Ok(report)
}
