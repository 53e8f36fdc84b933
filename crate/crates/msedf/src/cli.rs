//! Command implementations behind the `msedf` binary: train, evaluate,
//! caption, ablate, gradcheck, synth.
//!
//! Runs are driven by a single JSON config file (defaults match the
//! published hyperparameters) with `--set key=value` overrides and an
//! optional `MSEDF_SEED` environment override. Machine-readable results go
//! to stdout as JSON; diagnostics go to stderr.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{load_dataset, tokenize, Dataset, DatasetImage, SyntheticSpec, Vocabulary};
use crate::error::{Error, Result};
use crate::fusion::{fuse, FusedFeature};
use crate::inference::{beam_search, comparison_rerank, greedy_decode, DecodeConfig};
use crate::layers::Mode;
use crate::metrics::{corpus_evaluate, rouge_l, MetricReport};
use crate::model::{init_params, ModelConfig, ModelParams};
use crate::stacking::{StackConfig, StackStrategy};
use crate::tensor::{finite_difference_check, Tape};
use crate::training::{
    cross_entropy_loss, fit, load_checkpoint, save_checkpoint, TrainConfig, TrainHistory,
    TrainSample,
};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub gru_hidden: usize,
    pub l1_out: usize,
    pub l2_out: usize,
    pub dropout_rate: f64,
    pub strategy: StackStrategy,
    pub depth: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            embed_dim: 256,
            gru_hidden: 256,
            l1_out: 256,
            l2_out: 512,
            dropout_rate: 0.5,
            strategy: StackStrategy::Lws,
            depth: 3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub max_epochs: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            batch_size: 64,
            learning_rate: 1e-4,
            patience: 8,
            max_epochs: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    pub beam_width: usize,
    /// 0 means "derive from the dataset caption length".
    pub max_len: usize,
    pub k_similar: usize,
    pub rerank: bool,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection {
            beam_width: 5,
            max_len: 0,
            k_similar: 4,
            rerank: true,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub captions: PathBuf,
    pub features_a: PathBuf,
    pub features_b: PathBuf,
    pub min_count: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub checkpoint: PathBuf,
    pub history: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            checkpoint: PathBuf::from("checkpoint.msck"),
            history: PathBuf::from("history.json"),
        }
    }
}

/// The experiment config file. Unknown keys are rejected.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub decode: DecodeSection,
    pub data: DataSection,
    pub output: OutputSection,
    pub seed: u64,
}

impl RunConfig {
    pub fn stack(&self) -> Result<StackConfig> {
        StackConfig::new(self.model.strategy, self.model.depth)
    }

    pub fn model_config(&self, vocab_size: usize, fused_input_dim: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            embed_dim: self.model.embed_dim,
            gru_hidden: self.model.gru_hidden,
            l1_out: self.model.l1_out,
            l2_out: self.model.l2_out,
            vocab_size,
            fused_input_dim,
            stack: self.stack()?,
            dropout_rate: self.model.dropout_rate,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            patience: self.train.patience,
            max_epochs: self.train.max_epochs,
            seed: self.seed,
        }
    }

    pub fn decode_config(&self, dataset_max_len: usize) -> DecodeConfig {
        DecodeConfig {
            beam_width: self.decode.beam_width,
            max_len: if self.decode.max_len == 0 {
                dataset_max_len + 2
            } else {
                self.decode.max_len
            },
            k_similar: self.decode.k_similar,
            rerank: self.decode.rerank,
        }
    }
}

/// Set a dotted path inside a JSON document. The value is parsed as JSON
/// when possible, otherwise taken as a string.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment.split_once('=').ok_or_else(|| {
        Error::InvalidConfig(format!("override `{assignment}` is not of the form key=value"))
    })?;
    let parsed: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cursor = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = cursor.as_object_mut().ok_or_else(|| {
            Error::InvalidConfig(format!("override path `{path}` does not address an object"))
        })?;
        if i + 1 == parts.len() {
            map.insert(part.to_string(), parsed);
            return Ok(());
        }
        cursor = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split always yields at least one part")
}

/// Load a config file, apply `--set` overrides, then the `MSEDF_SEED`
/// environment override.
pub fn load_config(path: impl AsRef<Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut doc: Value = serde_json::from_str(&text)?;
    for assignment in overrides {
        apply_override(&mut doc, assignment)?;
    }
    let mut config: RunConfig = serde_json::from_value(doc)?;
    if let Ok(seed) = std::env::var("MSEDF_SEED") {
        config.seed = seed.parse().map_err(|_| {
            Error::InvalidConfig(format!("MSEDF_SEED must be an integer, got `{seed}`"))
        })?;
    }
    Ok(config)
}

/// Expand a dataset split into per-caption teacher-forcing samples.
pub fn build_samples(dataset: &Dataset, images: &[DatasetImage]) -> Vec<TrainSample> {
    let mut samples = Vec::new();
    for image in images {
        let features = raw_features(dataset, &image.image_id);
        for encoded in &image.encoded {
            samples.push(TrainSample {
                image_id: image.image_id.clone(),
                features: features.clone(),
                tokens: encoded.clone(),
            });
        }
    }
    samples
}

fn raw_features(dataset: &Dataset, image_id: &str) -> Vec<f64> {
    let a = dataset.store_a.get(image_id).expect("ids validated at load");
    let b = dataset.store_b.get(image_id).expect("ids validated at load");
    a.iter().chain(b.iter()).map(|&v| v as f64).collect()
}

fn eval_fused(params: &ModelParams, dataset: &Dataset, image_id: &str) -> Result<FusedFeature> {
    let tape = Tape::new();
    fuse(
        &tape,
        &dataset.store_a,
        &dataset.store_b,
        &params.l1,
        Mode::Eval,
        image_id,
    )
}

fn tokenized_refs(image: &DatasetImage) -> Vec<Vec<String>> {
    image.captions.iter().map(|c| tokenize(c)).collect()
}

/// Greedy-decode a split and score it with corpus ROUGE-L; this is the
/// default validation hook for early stopping.
pub fn greedy_rouge_score(
    params: &ModelParams,
    dataset: &Dataset,
    images: &[DatasetImage],
    decode: &DecodeConfig,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::EmptyInput("validation split"));
    }
    let mut total = 0.0;
    for image in images {
        let fused = eval_fused(params, dataset, &image.image_id)?;
        let ids = greedy_decode(params, &fused.projected, decode)?;
        let words = dataset.vocab.decode(&ids);
        total += rouge_l(&words, &tokenized_refs(image));
    }
    Ok(total / images.len() as f64)
}

/// How a split is decoded during evaluation.
pub enum DecodeMode {
    Greedy,
    Beam,
}

/// Decode one caption per image in the split.
pub fn decode_split(
    params: &ModelParams,
    dataset: &Dataset,
    images: &[DatasetImage],
    decode: &DecodeConfig,
    mode: DecodeMode,
) -> Result<Vec<(String, Vec<String>)>> {
    // reranking pool: fused training features and their tokenized captions
    let pool: Vec<FusedFeature> = if decode.rerank {
        dataset
            .train
            .iter()
            .map(|img| eval_fused(params, dataset, &img.image_id))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let refs_by_id: BTreeMap<String, Vec<Vec<String>>> = dataset
        .train
        .iter()
        .map(|img| (img.image_id.clone(), tokenized_refs(img)))
        .collect();

    let mut out = Vec::with_capacity(images.len());
    for image in images {
        let fused = eval_fused(params, dataset, &image.image_id)?;
        let ids = match mode {
            DecodeMode::Greedy => greedy_decode(params, &fused.projected, decode)?,
            DecodeMode::Beam => {
                let hyps = beam_search(params, &fused.projected, decode)?;
                if decode.rerank {
                    let filtered: Vec<FusedFeature> = pool
                        .iter()
                        .filter(|p| p.image_id != image.image_id)
                        .map(|p| FusedFeature {
                            image_id: p.image_id.clone(),
                            projected: p.projected.clone(),
                        })
                        .collect();
                    comparison_rerank(
                        &hyps,
                        &fused,
                        &filtered,
                        &refs_by_id,
                        decode.k_similar,
                        &dataset.vocab,
                    )?
                    .token_ids
                } else {
                    hyps.first()
                        .map(|h| h.token_ids.clone())
                        .ok_or(Error::EmptyInput("beam results"))?
                }
            }
        };
        let words = dataset.vocab.decode(&ids);
        out.push((image.image_id.clone(), words));
    }
    Ok(out)
}

#[derive(Serialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_rouge_l: f64,
    pub final_train_loss: f64,
}

/// Train per the config, write the best checkpoint and the per-epoch
/// history, and return a summary (also printed as JSON on stdout).
pub fn cmd_train(config: &RunConfig) -> Result<TrainSummary> {
    let dataset = load_dataset(
        &config.data.captions,
        &config.data.features_a,
        &config.data.features_b,
        config.data.min_count.max(1),
    )?;
    let model_cfg = config.model_config(dataset.vocab.size(), dataset.fused_input_dim())?;
    let params = init_params(&model_cfg, config.seed)?;
    let samples = build_samples(&dataset, &dataset.train);
    let train_cfg = config.train_config();
    let decode = config.decode_config(dataset.max_len);

    let mut score_fn =
        |p: &ModelParams| greedy_rouge_score(p, &dataset, &dataset.val, &decode);
    let (best, history) = fit(&params, &samples, &train_cfg, &mut score_fn)?;

    save_checkpoint(&config.output.checkpoint, &best, None, &dataset.vocab)?;
    let history_json = serde_json::to_string_pretty(&history)?;
    std::fs::write(&config.output.history, history_json + "\n")?;

    let summary = TrainSummary {
        checkpoint: config.output.checkpoint.clone(),
        history: config.output.history.clone(),
        epochs_run: history_len(&history),
        best_epoch: history.best_epoch,
        best_val_rouge_l: history.best_val_score,
        final_train_loss: history.epochs.last().map(|e| e.train_loss).unwrap_or(f64::NAN),
    };
    print_json(&summary)?;
    Ok(summary)
}

fn history_len(history: &TrainHistory) -> usize {
    history.epochs.len()
}

pub struct EvaluateArgs {
    pub checkpoint: PathBuf,
    pub captions: PathBuf,
    pub features_a: PathBuf,
    pub features_b: PathBuf,
    pub min_count: usize,
    pub greedy: bool,
    pub beam_width: usize,
    pub rerank: bool,
    pub k_similar: usize,
    pub max_len: Option<usize>,
    pub per_image: Option<PathBuf>,
}

#[derive(Serialize)]
struct PerImageCaption {
    id: String,
    caption: String,
}

/// Evaluate a checkpoint on the dataset's test split and print the
/// seven-metric report as JSON.
pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<MetricReport> {
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let dataset = load_dataset(
        &args.captions,
        &args.features_a,
        &args.features_b,
        args.min_count.max(1),
    )?;
    check_vocab(&checkpoint.vocab, &dataset.vocab)?;
    if dataset.test.is_empty() {
        return Err(Error::EmptyInput("test split"));
    }

    let decode = DecodeConfig {
        beam_width: args.beam_width,
        max_len: args.max_len.unwrap_or(dataset.max_len + 2),
        k_similar: args.k_similar,
        rerank: args.rerank,
    };
    let mode = if args.greedy {
        DecodeMode::Greedy
    } else {
        DecodeMode::Beam
    };
    let decoded = decode_split(&checkpoint.params, &dataset, &dataset.test, &decode, mode)?;

    let outputs: Vec<Vec<String>> = decoded.iter().map(|(_, words)| words.clone()).collect();
    let references: Vec<Vec<Vec<String>>> = dataset.test.iter().map(tokenized_refs).collect();
    let report = corpus_evaluate(&outputs, &references)?;

    if let Some(path) = &args.per_image {
        let dump: Vec<PerImageCaption> = decoded
            .iter()
            .map(|(id, words)| PerImageCaption {
                id: id.clone(),
                caption: words.join(" "),
            })
            .collect();
        std::fs::write(path, serde_json::to_string_pretty(&dump)? + "\n")?;
    }
    print_json(&report)?;
    Ok(report)
}

fn check_vocab(checkpoint: &Vocabulary, dataset: &Vocabulary) -> Result<()> {
    if checkpoint != dataset {
        return Err(Error::VocabularyMismatch {
            checkpoint: checkpoint.hash64(),
            dataset: dataset.hash64(),
        });
    }
    Ok(())
}

pub struct CaptionArgs {
    pub checkpoint: PathBuf,
    pub captions: Option<PathBuf>,
    pub features_a: PathBuf,
    pub features_b: PathBuf,
    pub image_id: String,
    pub beam_width: usize,
    pub max_len: usize,
    pub k_similar: usize,
    pub rerank: bool,
}

#[derive(Serialize)]
pub struct CaptionOutput {
    pub image_id: String,
    pub caption: String,
}

/// Caption one image from its feature files.
pub fn cmd_caption(args: &CaptionArgs) -> Result<CaptionOutput> {
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let store_a = crate::fusion::FeatureStore::load(&args.features_a)?;
    let store_b = crate::fusion::FeatureStore::load(&args.features_b)?;
    let cfg = DecodeConfig {
        beam_width: args.beam_width,
        max_len: args.max_len,
        k_similar: args.k_similar,
        rerank: args.rerank,
    };
    let train_refs: Vec<(String, Vec<Vec<String>>)> = match (&args.captions, args.rerank) {
        (Some(path), true) => crate::data::load_captions(path)?
            .into_iter()
            .filter(|r| r.split == crate::data::Split::Train)
            .map(|r| {
                let refs = r.captions.iter().map(|c| tokenize(c)).collect();
                (r.image_id, refs)
            })
            .collect(),
        (None, true) => {
            return Err(Error::InvalidConfig(
                "reranking needs --captions for the training reference pool".to_string(),
            ))
        }
        _ => Vec::new(),
    };
    let caption = crate::inference::caption_image(
        &checkpoint.params,
        &checkpoint.vocab,
        &store_a,
        &store_b,
        &train_refs,
        &args.image_id,
        &cfg,
    )?;
    let out = CaptionOutput {
        image_id: args.image_id.clone(),
        caption,
    };
    print_json(&out)?;
    Ok(out)
}

#[derive(Serialize, Clone)]
pub struct AblationRow {
    pub dc: usize,
    pub stack: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

/// Depth-by-strategy grid: the NS baseline plus one cell per (strategy,
/// depth). Every cell trains from the same base seed and is scored on the
/// test split with greedy decoding. Cell failures are reported in their row
/// while the rest of the grid continues.
pub fn cmd_ablate(
    config: &RunConfig,
    strategies: &[StackStrategy],
    depths: &[usize],
) -> Result<AblationTable> {
    let dataset = load_dataset(
        &config.data.captions,
        &config.data.features_a,
        &config.data.features_b,
        config.data.min_count.max(1),
    )?;
    let mut rows = Vec::new();
    let mut cells: Vec<(StackStrategy, usize)> = vec![(StackStrategy::Ns, 1)];
    for &strategy in strategies {
        for &depth in depths {
            cells.push((strategy, depth));
        }
    }
    for (strategy, depth) in cells {
        match ablation_cell(config, &dataset, strategy, depth) {
            Ok(metrics) => rows.push(AblationRow {
                dc: depth,
                stack: strategy.name().to_string(),
                metrics: Some(round_report(&metrics)),
                error: None,
            }),
            Err(e) => rows.push(AblationRow {
                dc: depth,
                stack: strategy.name().to_string(),
                metrics: None,
                error: Some(e.to_string()),
            }),
        }
    }
    let table = AblationTable { rows };
    let mut err = std::io::stderr().lock();
    writeln!(err, "{}", render_ablation_text(&table))?;
    print_json(&table)?;
    Ok(table)
}

fn ablation_cell(
    config: &RunConfig,
    dataset: &Dataset,
    strategy: StackStrategy,
    depth: usize,
) -> Result<MetricReport> {
    // a depth-1 cell is the non-stacked baseline whatever the strategy label
    let stack = if depth == 1 {
        StackConfig::new(StackStrategy::Ns, 1)?
    } else {
        StackConfig::new(strategy, depth)?
    };
    let model_cfg = ModelConfig {
        embed_dim: config.model.embed_dim,
        gru_hidden: config.model.gru_hidden,
        l1_out: config.model.l1_out,
        l2_out: config.model.l2_out,
        vocab_size: dataset.vocab.size(),
        fused_input_dim: dataset.fused_input_dim(),
        stack,
        dropout_rate: config.model.dropout_rate,
    };
    model_cfg.validate()?;
    let params = init_params(&model_cfg, config.seed)?;
    let samples = build_samples(dataset, &dataset.train);
    let train_cfg = config.train_config();
    let decode = DecodeConfig {
        rerank: false,
        ..config.decode_config(dataset.max_len)
    };
    let mut score_fn = |p: &ModelParams| greedy_rouge_score(p, dataset, &dataset.val, &decode);
    let (best, _) = fit(&params, &samples, &train_cfg, &mut score_fn)?;

    let decoded = decode_split(&best, dataset, &dataset.test, &decode, DecodeMode::Greedy)?;
    let outputs: Vec<Vec<String>> = decoded.into_iter().map(|(_, words)| words).collect();
    let references: Vec<Vec<Vec<String>>> = dataset.test.iter().map(tokenized_refs).collect();
    corpus_evaluate(&outputs, &references)
}

fn round4(v: f64) -> f64 {
    (v * 10_000.0).round() / 10_000.0
}

fn round_report(r: &MetricReport) -> MetricReport {
    MetricReport {
        bleu1: round4(r.bleu1),
        bleu2: round4(r.bleu2),
        bleu3: round4(r.bleu3),
        bleu4: round4(r.bleu4),
        meteor: round4(r.meteor),
        rouge_l: round4(r.rouge_l),
        cider: round4(r.cider),
    }
}

pub fn render_ablation_text(table: &AblationTable) -> String {
    let mut out = String::new();
    out.push_str("DC  Stack  BLEU-1  BLEU-2  BLEU-3  BLEU-4  METEOR  ROUGE-L  CIDEr\n");
    for row in &table.rows {
        match (&row.metrics, &row.error) {
            (Some(m), _) => out.push_str(&format!(
                "{:<3} {:<6} {:.4}  {:.4}  {:.4}  {:.4}  {:.4}  {:.4}   {:.4}\n",
                row.dc, row.stack, m.bleu1, m.bleu2, m.bleu3, m.bleu4, m.meteor, m.rouge_l, m.cider
            )),
            (None, Some(e)) => {
                out.push_str(&format!("{:<3} {:<6} failed: {e}\n", row.dc, row.stack))
            }
            (None, None) => unreachable!("row has either metrics or an error"),
        }
    }
    out
}

#[derive(Serialize)]
pub struct GradcheckCell {
    pub strategy: String,
    pub depth: usize,
    pub max_rel_error: f64,
    pub pass: bool,
}

#[derive(Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub cells: Vec<GradcheckCell>,
    pub pass: bool,
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Finite-difference check of the full teacher-forced loss on a tiny model,
/// for the non-stacked baseline and every stacking strategy at depths 2 and
/// 3. Fails if any cell's max relative error reaches 1e-4.
pub fn cmd_gradcheck(seed: u64) -> Result<GradcheckReport> {
    let cells: Vec<(StackStrategy, usize)> = vec![
        (StackStrategy::Ns, 1),
        (StackStrategy::Ss, 2),
        (StackStrategy::Ss, 3),
        (StackStrategy::Cs, 2),
        (StackStrategy::Cs, 3),
        (StackStrategy::Gws, 2),
        (StackStrategy::Gws, 3),
        (StackStrategy::Lws, 2),
        (StackStrategy::Lws, 3),
    ];
    let mut report = GradcheckReport {
        tolerance: GRADCHECK_TOLERANCE,
        cells: Vec::new(),
        pass: true,
    };
    let mut err_out = std::io::stderr().lock();
    for (strategy, depth) in cells {
        let max_rel_error = gradcheck_cell(strategy, depth, seed)?;
        let pass = max_rel_error < GRADCHECK_TOLERANCE;
        writeln!(
            err_out,
            "gradcheck {:<4} depth {}: max relative error {:.3e} {}",
            strategy.name(),
            depth,
            max_rel_error,
            if pass { "ok" } else { "FAIL" }
        )?;
        report.pass &= pass;
        report.cells.push(GradcheckCell {
            strategy: strategy.name().to_string(),
            depth,
            max_rel_error,
            pass,
        });
    }
    print_json(&report)?;
    if !report.pass {
        return Err(Error::NonFinite {
            what: format!("gradient check exceeded tolerance {GRADCHECK_TOLERANCE}"),
        });
    }
    Ok(report)
}

/// Max relative error of one (strategy, depth) cell on tiny dimensions.
pub fn gradcheck_cell(strategy: StackStrategy, depth: usize, seed: u64) -> Result<f64> {
    let cfg = ModelConfig {
        embed_dim: 8,
        gru_hidden: 8,
        l1_out: 8,
        l2_out: 8,
        vocab_size: 11,
        fused_input_dim: 8,
        stack: StackConfig::new(strategy, depth)?,
        dropout_rate: 0.5,
    };
    let params = init_params(&cfg, seed)?;
    let features: Vec<f64> = (0..8).map(|i| ((i as f64) * 0.7 + seed as f64).sin()).collect();
    let tokens = [
        crate::data::START_ID,
        4,
        7,
        5,
        crate::data::END_ID,
        crate::data::PAD_ID,
    ];
    let inputs = &tokens[..tokens.len() - 1];
    let targets = &tokens[1..];
    let trainable = params.trainable();
    finite_difference_check(&trainable, 1e-5, |tape| {
        let fused = crate::fusion::fuse_raw(tape, &features, &params.l1, Mode::Eval, "probe")?;
        let probs = params.forward_sequence(tape, &fused.projected, inputs, Mode::Eval)?;
        cross_entropy_loss(tape, &probs, targets, crate::data::PAD_ID)
    })
}

#[derive(Serialize)]
pub struct SynthOutput {
    pub captions: PathBuf,
    pub features_a: PathBuf,
    pub features_b: PathBuf,
}

/// Generate a synthetic dataset. `spec_path` may be omitted to use the
/// default recipe.
pub fn cmd_synth(spec_path: Option<&Path>, out_dir: &Path) -> Result<SynthOutput> {
    let spec: SyntheticSpec = match spec_path {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => SyntheticSpec::default(),
    };
    let [captions, features_a, features_b] = crate::data::write_synthetic(&spec, out_dir)?;
    let out = SynthOutput {
        captions,
        features_a,
        features_b,
    };
    print_json(&out)?;
    Ok(out)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{}", serde_json::to_string_pretty(value)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn config_defaults_match_the_protocol() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.model.embed_dim, 256);
        assert_eq!(cfg.model.gru_hidden, 256);
        assert_eq!(cfg.model.l1_out, 256);
        assert_eq!(cfg.model.l2_out, 512);
        assert_eq!(cfg.model.dropout_rate, 0.5);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.train.learning_rate, 1e-4);
        assert_eq!(cfg.train.patience, 8);
        assert_eq!(cfg.decode.beam_width, 5);
        assert_eq!(cfg.decode.k_similar, 4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let doc = r#"{"model": {"embed_dim": 8}, "typo_section": 1}"#;
        let parsed: std::result::Result<RunConfig, _> = serde_json::from_str(doc);
        assert!(parsed.is_err());
        let doc = r#"{"model": {"embed_dims": 8}}"#;
        let parsed: std::result::Result<RunConfig, _> = serde_json::from_str(doc);
        assert!(parsed.is_err());
    }

    #[test]
    fn invalid_strategy_string_is_a_config_error() {
        let doc = r#"{"model": {"strategy": "lws2"}}"#;
        let parsed: std::result::Result<RunConfig, _> = serde_json::from_str(doc);
        assert!(parsed.is_err());
    }

    #[test]
    fn overrides_set_nested_keys() {
        let mut doc = serde_json::to_value(RunConfig::default()).unwrap();
        apply_override(&mut doc, "model.depth=2").unwrap();
        apply_override(&mut doc, "train.max_epochs=5").unwrap();
        apply_override(&mut doc, "data.captions=captions.json").unwrap();
        let cfg: RunConfig = serde_json::from_value(doc).unwrap();
        assert_eq!(cfg.model.depth, 2);
        assert_eq!(cfg.train.max_epochs, 5);
        assert_eq!(cfg.data.captions, PathBuf::from("captions.json"));

        let mut doc = serde_json::to_value(RunConfig::default()).unwrap();
        assert!(apply_override(&mut doc, "no-equals-sign").is_err());
    }

    #[test]
    fn gradcheck_grid_has_nine_cells_and_passes() {
        // full run: the baseline plus four strategies at depths 2 and 3
        let report = cmd_gradcheck(13).unwrap();
        assert_eq!(report.cells.len(), 9);
        assert!(report.pass);
        for cell in &report.cells {
            assert!(cell.max_rel_error < GRADCHECK_TOLERANCE);
        }
    }

    #[test]
    fn finite_difference_harness_detects_a_broken_backward_rule() {
        // emulate a corrupted backward rule: the loss rebuilds a constant
        // copy of x each call, so the analytic gradient misses half of
        // d/dx sum(x*x)
        let x = Tensor::row(&[0.8, -1.3, 2.1]);
        let params = vec![("x".to_string(), x.clone())];
        let err = finite_difference_check(&params, 1e-5, |tape| {
            let detached = Tensor::row(&x.to_vec());
            let prod = tape.hadamard(&x, &detached)?;
            Ok(tape.sum(&prod))
        })
        .unwrap();
        assert!(err > GRADCHECK_TOLERANCE, "sabotaged gradient went undetected: {err}");
    }
}
