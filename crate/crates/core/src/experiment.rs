//! Run orchestration: one mode end to end, the three-mode ablation, and the
//! standalone saliency / caption / eval runs behind the CLI.
//!
//! Every run writes into its own output directory and finishes with a
//! `manifest.json` (config hash, seed, code version, file digests). A run
//! that fails leaves a `FAILED` file naming the stage.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::captioner::{
    config_for_mode, train_captioner, CaptionSample, Captioner, CaptionerConfig, Mode, PreparedImage, Preset, StepLog,
    TrainConfig, Vocabulary,
};
use crate::data::{generate_synthetic_corpus, ingest_dataset, Dataset, SyntheticSpec, DEFAULT_PROMPT};
use crate::encoder::{image_saliency, EncoderConfig};
use crate::error::{Error, Result};
use crate::iasm::{aesthetic_saliency, encode_pgm, normalize_resize};
use crate::metrics::{evaluate_corpus, oracle_dump, EvalConfig, EvalReport, Scores, CSV_COLUMNS};
use crate::scorer::{train_scorer, Scorer, ScorerConfig, ScorerTrainConfig};
use crate::tensor::Tensor;

/// Worker thread count for the global pool.
pub const THREADS_ENV: &str = "AESCAP_THREADS";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const FAILED_MARKER: &str = "FAILED";
pub const MANIFEST: &str = "manifest.json";

/// Sizes the global rayon pool from [`THREADS_ENV`], if set.
pub fn init_threads() -> Result<Option<usize>> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(None);
    };
    let n = raw
        .trim()
        .parse::<usize>()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Validation(format!("{THREADS_ENV}={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;
    Ok(Some(n))
}

trait StageExt<T> {
    fn stage(self, name: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, name: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(name))
    }
}

/// Partial [`TrainConfig`]; unset fields keep the preset's value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOverrides {
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub warmup_ratio: Option<f64>,
    pub batch_size: Option<usize>,
    pub total_steps: Option<usize>,
}

impl TrainOverrides {
    pub fn apply(&self, mut c: TrainConfig) -> TrainConfig {
        c.learning_rate = self.learning_rate.unwrap_or(c.learning_rate);
        c.weight_decay = self.weight_decay.unwrap_or(c.weight_decay);
        c.warmup_ratio = self.warmup_ratio.unwrap_or(c.warmup_ratio);
        c.batch_size = self.batch_size.unwrap_or(c.batch_size);
        c.total_steps = self.total_steps.unwrap_or(c.total_steps);
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// JSONL index, or a directory holding `captions.jsonl`.
    pub dataset: PathBuf,
    pub mode: Mode,
    pub preset: Preset,
    pub seed: u64,
    pub out: PathBuf,
    pub pgm_heatmaps: bool,
    /// Held-out fraction when records carry no split of their own.
    pub test_ratio: f64,
    /// Used for records without a prompt.
    pub prompt: String,
    pub train: TrainOverrides,
    /// Replaces the preset's captioner architecture.
    pub captioner: Option<CaptionerConfig>,
    pub scorer: ScorerConfig,
    pub scorer_train: ScorerTrainConfig,
    /// Reuse a trained scorer instead of training one.
    pub scorer_checkpoint: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: PathBuf::from("data"),
            mode: Mode::FinetuneIasc,
            preset: Preset::Desk,
            seed: 0,
            out: PathBuf::from("runs"),
            pgm_heatmaps: false,
            test_ratio: 0.2,
            prompt: DEFAULT_PROMPT.into(),
            train: TrainOverrides::default(),
            captioner: None,
            scorer: ScorerConfig::default(),
            scorer_train: ScorerTrainConfig::default(),
            scorer_checkpoint: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.test_ratio > 0.0 && self.test_ratio < 1.0) {
            return Err(Error::Validation(format!("test_ratio {} must lie in (0, 1)", self.test_ratio)));
        }
        if self.prompt.trim().is_empty() {
            return Err(Error::Validation("prompt is empty".into()));
        }
        self.train_config().validate()?;
        self.captioner_config().validate()?;
        self.scorer_config().validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.apply(TrainConfig::preset(self.preset))
        }
    }

    /// Architecture for the configured mode; the paper preset swaps in the
    /// full-size encoder, which is far too slow for a CPU run.
    pub fn captioner_config(&self) -> CaptionerConfig {
        let mut base = self.captioner.clone().unwrap_or_else(|| match self.preset {
            Preset::Desk => CaptionerConfig::default(),
            Preset::Paper => CaptionerConfig {
                encoder: EncoderConfig::paper_scale(),
                ..CaptionerConfig::default()
            },
        });
        base.seed = self.seed;
        base.encoder.seed = self.seed;
        config_for_mode(&base, self.mode)
    }

    pub fn scorer_config(&self) -> ScorerConfig {
        ScorerConfig {
            seed: self.seed,
            ..self.scorer.clone()
        }
    }

    pub fn scorer_train_config(&self) -> ScorerTrainConfig {
        ScorerTrainConfig {
            seed: self.seed,
            ..self.scorer_train.clone()
        }
    }

    /// SHA-256 of the config with the output directory blanked, so the same
    /// experiment hashes identically wherever it is written.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: Value,
    pub files: Vec<FileEntry>,
}

/// An output directory and the files written to it so far.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let marker = dir.join(FAILED_MARKER);
        if marker.exists() {
            fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
        }
        Ok(Outputs {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.files.push(rel.to_string());
        Ok(path)
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    fn finish(self, command: &str, seed: u64, config_hash: String, config: Value) -> Result<Manifest> {
        let mut files = Vec::with_capacity(self.files.len());
        for rel in &self.files {
            let path = self.dir.join(rel);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            files.push(FileEntry {
                path: rel.clone(),
                sha256: sha256_hex(&bytes),
            });
        }
        let manifest = Manifest {
            tool: "aescap".into(),
            version: VERSION.into(),
            command: command.into(),
            seed,
            config_hash,
            config,
            files,
        };
        let path = self.dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

/// Runs `f`; on error leaves a `FAILED` marker in `dir` naming the failure.
fn with_failure_marker<T>(dir: &Path, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let result = f();
    if let Err(e) = &result {
        // best effort: the original error matters more than a marker write failure
        let _ = fs::create_dir_all(dir);
        let _ = fs::write(dir.join(FAILED_MARKER), format!("{e}\n"));
    }
    result
}

/// One line of `captions.jsonl`, also the input format of [`run_eval`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionLine {
    pub image: String,
    pub caption: String,
}

fn captions_jsonl(lines: &[CaptionLine]) -> Result<String> {
    let mut out = String::new();
    for l in lines {
        out.push_str(&serde_json::to_string(l)?);
        out.push('\n');
    }
    Ok(out)
}

fn train_log_csv(logs: &[StepLog]) -> String {
    let mut out = String::from("step,lr,loss\n");
    for l in logs {
        out.push_str(&format!("{},{},{}\n", l.step, l.lr, l.loss));
    }
    out
}

/// `images/0003.ppm` becomes `images_0003.pgm`.
fn heatmap_name(image: &str) -> String {
    let stem = Path::new(image).with_extension("");
    format!("heatmaps/{}.pgm", stem.to_string_lossy().replace(['/', '\\'], "_"))
}

/// Dataset, its split and every decoded image.
pub struct LoadedData {
    pub dataset: Dataset,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub images: Vec<Tensor>,
}

/// Fails when an image file is referenced from both splits.
pub fn check_disjoint(dataset: &Dataset, train: &[usize], test: &[usize]) -> Result<()> {
    let train_paths: BTreeSet<PathBuf> = train.iter().map(|&i| dataset.image_path(i)).collect();
    if let Some(&i) = test.iter().find(|&&i| train_paths.contains(&dataset.image_path(i))) {
        return Err(Error::Validation(format!(
            "image {} appears in both the train and test splits",
            dataset.records[i].image
        )));
    }
    Ok(())
}

pub fn load_data(path: &Path, seed: u64, test_ratio: f64) -> Result<LoadedData> {
    let dataset = ingest_dataset(path)?;
    for s in &dataset.skipped {
        log::warn!("line {}: skipping {}: {}", s.line, s.image, s.reason);
    }
    let (train, test) = dataset.split(seed, test_ratio)?;
    check_disjoint(&dataset, &train, &test)?;
    let images = (0..dataset.len())
        .into_par_iter()
        .map(|i| dataset.load_image(i))
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedData {
        dataset,
        train,
        test,
        images,
    })
}

/// Loads the configured scorer checkpoint, or trains one on the labeled
/// training split. Returns the per-step losses when trained here.
pub fn obtain_scorer(cfg: &ExperimentConfig, data: &LoadedData) -> Result<(Scorer, Option<Vec<f64>>)> {
    if let Some(path) = &cfg.scorer_checkpoint {
        return Ok((Scorer::load(path)?, None));
    }
    let mut labeled = Vec::with_capacity(data.train.len());
    for &i in &data.train {
        let label = data.dataset.records[i].label.ok_or_else(|| {
            Error::Validation(format!(
                "training the saliency scorer needs a label on every training record ({} has none)",
                data.dataset.records[i].image
            ))
        })?;
        labeled.push((data.images[i].clone(), label));
    }
    let mut scorer = Scorer::new(cfg.scorer_config())?;
    let losses = train_scorer(&mut scorer, &labeled, &cfg.scorer_train_config())?;
    let acc = scorer.accuracy(&labeled)?;
    log::info!("scorer: final loss {:.4}, train accuracy {:.3}", losses.last().copied().unwrap_or(f64::NAN), acc);
    Ok((scorer, Some(losses)))
}

/// Pairs each image with its saliency when a scorer is given.
pub fn prepare_images(images: &[&Tensor], scorer: Option<&Scorer>, encoder: &EncoderConfig) -> Result<Vec<PreparedImage>> {
    images
        .par_iter()
        .map(|img| {
            let saliency = scorer.map(|s| image_saliency(s, img, encoder)).transpose()?;
            Ok(PreparedImage {
                pixels: (*img).clone(),
                saliency,
            })
        })
        .collect()
}

/// Greedy captions, one per image, in input order.
pub fn caption_images(model: &Captioner, images: &[PreparedImage], prompts: &[&str]) -> Result<Vec<String>> {
    images
        .par_iter()
        .zip(prompts.par_iter())
        .map(|(img, p)| model.generate(img, p))
        .collect()
}

fn references(dataset: &Dataset, indices: &[usize]) -> BTreeMap<String, Vec<String>> {
    let mut refs: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for &i in indices {
        let r = &dataset.records[i];
        refs.entry(r.image.clone()).or_default().extend(r.captions.iter().cloned());
    }
    refs
}

/// What a single-mode run produced.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub mode: Mode,
    pub out: PathBuf,
    pub report: EvalReport,
    /// Empty for `no-finetune`.
    pub train_log: Vec<StepLog>,
    pub captions: Vec<CaptionLine>,
    pub train_images: Vec<String>,
    pub test_images: Vec<String>,
    pub manifest: Manifest,
}

/// Trains (unless `no-finetune`), captions the test split and scores it.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    with_failure_marker(&cfg.out, || run_experiment_inner(cfg))
}

fn run_experiment_inner(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate().stage("config")?;
    let mut outs = Outputs::create(&cfg.out).stage("output")?;
    let wiring = cfg.mode.wiring();
    let data = load_data(&cfg.dataset, cfg.seed, cfg.test_ratio).stage("ingest")?;
    let ds = &data.dataset;
    log::info!(
        "{}: {} train / {} test records, mode {}",
        ds.name,
        data.train.len(),
        data.test.len(),
        cfg.mode
    );

    let scorer = if wiring.iasc {
        let (scorer, losses) = obtain_scorer(cfg, &data).stage("scorer")?;
        if losses.is_some() {
            let bytes = scorer.to_checkpoint().and_then(|c| c.to_bytes()).stage("scorer")?;
            outs.write("scorer.ckpt", &bytes).stage("output")?;
        }
        Some(scorer)
    } else {
        None
    };

    let ccfg = cfg.captioner_config();
    let all: Vec<&Tensor> = data.images.iter().collect();
    let prepared = prepare_images(&all, scorer.as_ref(), &ccfg.encoder).stage("saliency")?;
    if cfg.pgm_heatmaps {
        for &i in &data.test {
            if let Some(sal) = &prepared[i].saliency {
                let bytes = encode_pgm(&sal.tiled).stage("saliency")?;
                outs.write(&heatmap_name(&ds.records[i].image), &bytes).stage("output")?;
            }
        }
    }

    let prompt_of = |i: usize| ds.records[i].prompt.as_deref().unwrap_or(&cfg.prompt);
    let vocab = Vocabulary::build(
        data.train
            .iter()
            .flat_map(|&i| ds.records[i].captions.iter().map(String::as_str).chain([prompt_of(i)])),
    );
    let mut model = Captioner::new(ccfg, vocab).stage("model")?;

    let mut train_log = Vec::new();
    if wiring.train {
        let test_set: BTreeSet<usize> = data.test.iter().copied().collect();
        let mut encoded = Vec::new();
        for &i in &data.train {
            let prompt = model.vocab.encode(prompt_of(i));
            for c in &ds.records[i].captions {
                encoded.push((i, prompt.clone(), model.vocab.encode(c)));
            }
        }
        if let Some((i, _, _)) = encoded.iter().find(|(i, _, _)| test_set.contains(i)) {
            return Err(Error::contract(format!("test record {} reached a training batch", ds.records[*i].image)))
                .stage("train");
        }
        let samples: Vec<CaptionSample> = encoded
            .iter()
            .map(|(i, p, c)| CaptionSample {
                image: &prepared[*i],
                prompt: p,
                caption: c,
            })
            .collect();
        let tcfg = cfg.train_config();
        train_log = train_captioner(&mut model, &samples, tcfg, |l| {
            if l.step % 50 == 0 || l.step + 1 == tcfg.total_steps {
                log::info!("step {:>4}  lr {:.3e}  loss {:.4}", l.step, l.lr, l.loss);
            }
        })
        .stage("train")?;
        outs.write("train_log.csv", train_log_csv(&train_log).as_bytes()).stage("output")?;
        let bytes = model.to_checkpoint().and_then(|c| c.to_bytes()).stage("train")?;
        outs.write("captioner.ckpt", &bytes).stage("output")?;
    }

    let test_images: Vec<PreparedImage> = data.test.iter().map(|&i| prepared[i].clone()).collect();
    let prompts: Vec<&str> = data.test.iter().map(|&i| prompt_of(i)).collect();
    let generated = caption_images(&model, &test_images, &prompts).stage("caption")?;
    let captions: Vec<CaptionLine> = data
        .test
        .iter()
        .zip(generated)
        .map(|(&i, caption)| CaptionLine {
            image: ds.records[i].image.clone(),
            caption,
        })
        .collect();
    outs.write("captions.jsonl", captions_jsonl(&captions).stage("output")?.as_bytes())
        .stage("output")?;

    let pairs: Vec<(String, String)> = captions.iter().map(|c| (c.image.clone(), c.caption.clone())).collect();
    let eval_cfg = EvalConfig {
        dataset: ds.name.clone(),
        mode: cfg.mode.to_string(),
        ..EvalConfig::default()
    };
    let report = evaluate_corpus(&pairs, &references(ds, &data.test), &eval_cfg).stage("eval")?;
    outs.write("report.csv", report.to_csv().as_bytes()).stage("output")?;
    outs.write_json("report.json", &report).stage("output")?;

    let name = |v: &[usize]| v.iter().map(|&i| ds.records[i].image.clone()).collect::<Vec<_>>();
    let (train_images, test_images) = (name(&data.train), name(&data.test));
    outs.write_json("split.json", &serde_json::json!({ "train": train_images, "test": test_images }))
        .stage("output")?;
    let manifest = outs
        .finish("train", cfg.seed, cfg.config_hash(), serde_json::to_value(cfg)?)
        .stage("output")?;
    Ok(RunOutput {
        mode: cfg.mode,
        out: cfg.out.clone(),
        report,
        train_log,
        captions,
        train_images,
        test_images,
        manifest,
    })
}

/// Renders the synthetic corpus into `out` and adds a manifest.
pub fn run_gen_data(spec: &SyntheticSpec, seed: u64, out: &Path) -> Result<Manifest> {
    with_failure_marker(out, || {
        let mut outs = Outputs::create(out).stage("output")?;
        let records = generate_synthetic_corpus(spec, seed, out).stage("gen-data")?;
        outs.files = records.into_iter().map(|r| r.image).collect();
        outs.files.extend(["captions.jsonl".to_string(), "synthetic_spec.json".to_string()]);
        let config = serde_json::to_value(spec)?;
        let hash = sha256_hex(config.to_string().as_bytes());
        outs.finish("gen-data", seed, hash, config).stage("output")
    })
}

/// Directory name for a mode's outputs inside an ablation.
pub fn mode_dir(mode: Mode) -> &'static str {
    match mode {
        Mode::NoFinetune => "no-finetune",
        Mode::Finetune => "finetune",
        Mode::FinetuneIasc => "finetune-iasc",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub mode: Mode,
    pub scores: Scores,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

/// The three modes with one shared seed, each in `out/<mode>`, plus a
/// comparison table `ablation.csv` with one row per mode.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<Vec<RunOutput>> {
    with_failure_marker(&cfg.out, || {
        let mut outs = Outputs::create(&cfg.out).stage("output")?;
        let mut runs = Vec::with_capacity(Mode::ALL.len());
        for mode in Mode::ALL {
            let sub = ExperimentConfig {
                mode,
                out: cfg.out.join(mode_dir(mode)),
                ..cfg.clone()
            };
            log::info!("ablation: mode {mode}");
            runs.push(run_experiment(&sub)?);
        }
        let rows: Vec<AblationRow> = runs
            .iter()
            .map(|r| AblationRow {
                mode: r.mode,
                scores: r.report.mean.clone(),
                initial_loss: r.train_log.first().map(|l| l.loss),
                final_loss: r.train_log.last().map(|l| l.loss),
            })
            .collect();
        outs.write("ablation.csv", ablation_csv(&rows).as_bytes()).stage("output")?;
        outs.write_json("ablation.json", &rows).stage("output")?;
        outs.finish("ablate", cfg.seed, cfg.config_hash(), serde_json::to_value(cfg)?)
            .stage("output")?;
        Ok(runs)
    })
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("mode,{}\n", CSV_COLUMNS.join(","));
    for r in rows {
        let s = &r.scores;
        let vals = [s.b1, s.b2, s.b3, s.b4, s.meteor, s.rouge_l, s.cider, s.precision, s.recall, s.spice_l_proxy];
        let vals: Vec<String> = vals.iter().map(|v| format!("{v:.6}")).collect();
        out.push_str(&format!("{},{}\n", r.mode, vals.join(",")));
    }
    out
}

/// Per-image heatmaps at image resolution, plus the scorer's verdicts.
pub fn run_saliency(cfg: &ExperimentConfig) -> Result<Manifest> {
    with_failure_marker(&cfg.out, || {
        cfg.validate().stage("config")?;
        let mut outs = Outputs::create(&cfg.out).stage("output")?;
        let data = load_data(&cfg.dataset, cfg.seed, cfg.test_ratio).stage("ingest")?;
        let (scorer, losses) = obtain_scorer(cfg, &data).stage("scorer")?;
        if losses.is_some() {
            let bytes = scorer.to_checkpoint().and_then(|c| c.to_bytes()).stage("scorer")?;
            outs.write("scorer.ckpt", &bytes).stage("output")?;
        }
        let maps = data
            .images
            .par_iter()
            .map(|img| {
                let m = aesthetic_saliency(&scorer, img)?;
                let (h, w) = (img.shape()[0], img.shape()[1]);
                Ok((m.class_index, encode_pgm(&normalize_resize(&m, h, w)?)?))
            })
            .collect::<Result<Vec<_>>>()
            .stage("saliency")?;
        let mut summary = Vec::with_capacity(maps.len());
        for (record, (class, pgm)) in data.dataset.records.iter().zip(maps) {
            let rel = heatmap_name(&record.image);
            outs.write(&rel, &pgm).stage("output")?;
            summary.push(serde_json::json!({ "image": record.image, "class": class, "label": record.label, "heatmap": rel }));
        }
        outs.write_json("saliency.json", &summary).stage("output")?;
        outs.finish("saliency", cfg.seed, cfg.config_hash(), serde_json::to_value(cfg)?)
            .stage("output")
    })
}

/// Inputs of a standalone captioning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRun {
    pub checkpoint: PathBuf,
    /// Required when the checkpoint has the saliency components.
    pub scorer_checkpoint: Option<PathBuf>,
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub prompt: String,
    /// Caption every record instead of the held-out split.
    pub all_records: bool,
    pub seed: u64,
    pub test_ratio: f64,
}

pub fn run_caption(run: &CaptionRun) -> Result<Vec<CaptionLine>> {
    with_failure_marker(&run.out, || {
        let mut outs = Outputs::create(&run.out).stage("output")?;
        let model = Captioner::load(&run.checkpoint).stage("model")?;
        let scorer = match (model.iasc(), &run.scorer_checkpoint) {
            (true, Some(p)) => Some(Scorer::load(p).stage("scorer")?),
            (true, None) => {
                return Err(Error::Validation(
                    "this checkpoint uses saliency; pass the scorer checkpoint it was trained with".into(),
                ))
                .stage("scorer")
            }
            (false, _) => None,
        };
        let data = load_data(&run.dataset, run.seed, run.test_ratio).stage("ingest")?;
        let ds = &data.dataset;
        let indices: Vec<usize> = if run.all_records {
            (0..ds.len()).collect()
        } else {
            data.test.clone()
        };
        let images: Vec<&Tensor> = indices.iter().map(|&i| &data.images[i]).collect();
        let prepared = prepare_images(&images, scorer.as_ref(), &model.config.encoder).stage("saliency")?;
        let prompts: Vec<&str> = indices
            .iter()
            .map(|&i| ds.records[i].prompt.as_deref().unwrap_or(&run.prompt))
            .collect();
        let generated = caption_images(&model, &prepared, &prompts).stage("caption")?;
        let lines: Vec<CaptionLine> = indices
            .iter()
            .zip(generated)
            .map(|(&i, caption)| CaptionLine {
                image: ds.records[i].image.clone(),
                caption,
            })
            .collect();
        outs.write("captions.jsonl", captions_jsonl(&lines)?.as_bytes()).stage("output")?;
        let value = serde_json::to_value(run)?;
        let hash = sha256_hex(value.to_string().as_bytes());
        outs.finish("caption", run.seed, hash, value).stage("output")?;
        Ok(lines)
    })
}

pub fn read_captions(path: &Path) -> Result<Vec<CaptionLine>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        lines.push(serde_json::from_str(line).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: n + 1,
            detail: e.to_string(),
        })?);
    }
    if lines.is_empty() {
        return Err(Error::Validation(format!("{}: no candidate captions", path.display())));
    }
    Ok(lines)
}

/// Scores a captions file against a dataset's references. With
/// `oracle_dump`, also writes the intermediate n-gram counts.
pub fn run_eval(candidates: &Path, dataset: &Path, out: &Path, label: &str, oracle: Option<&Path>) -> Result<EvalReport> {
    with_failure_marker(out, || {
        let mut outs = Outputs::create(out).stage("output")?;
        let lines = read_captions(candidates).stage("ingest")?;
        let ds = ingest_dataset(dataset).stage("ingest")?;
        let refs = references(&ds, &(0..ds.len()).collect::<Vec<_>>());
        let pairs: Vec<(String, String)> = lines.into_iter().map(|l| (l.image, l.caption)).collect();
        let cfg = EvalConfig {
            dataset: ds.name.clone(),
            mode: label.to_string(),
            ..EvalConfig::default()
        };
        let report = evaluate_corpus(&pairs, &refs, &cfg).stage("eval")?;
        outs.write("report.csv", report.to_csv().as_bytes()).stage("output")?;
        outs.write_json("report.json", &report).stage("output")?;
        if let Some(path) = oracle {
            let dump = oracle_dump(&pairs, &refs).stage("eval")?;
            let text = serde_json::to_string_pretty(&dump)? + "\n";
            fs::write(path, text).map_err(|e| Error::io(path, e)).stage("output")?;
        }
        let config = serde_json::json!({ "candidates": candidates, "dataset": dataset, "mode": label });
        let hash = sha256_hex(config.to_string().as_bytes());
        outs.finish("eval", 0, hash, config).stage("output")?;
        Ok(report)
    })
}
