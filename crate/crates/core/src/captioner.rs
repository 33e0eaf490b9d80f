//! Toy caption decoder conditioned on projected visual tokens.
//!
//! Sequence layout: `[visual tokens][prompt][BOS][caption...]`. Visual
//! tokens attend to each other freely; every text position attends to all
//! visual tokens and causally to text. Loss covers caption positions only.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::encoder::{Encoder, EncoderConfig, ImageSaliency};
use crate::error::{Error, Result};
use crate::nn::{batch_gradients, Block, LayerNorm, Linear, ParamId, ParamStore, SampleLoss, Session, MASKED};
use crate::optim::{AdamW, AdamWConfig, Schedule};
use crate::tensor::{Float, Tape, Tensor, Var};
use crate::text::{detokenize, tokenize};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// Reserved marker for where visual tokens sit; never predicted.
pub const IMAGE: usize = 4;
const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<image>"];

pub const CHECKPOINT_KIND: &str = "captioner";

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Specials first, then every token of `texts` in sorted order.
    pub fn build<S: AsRef<str>>(texts: impl IntoIterator<Item = S>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(|t| tokenize(t.as_ref())).collect();
        let tokens = SPECIALS.iter().map(|s| s.to_string()).chain(words).collect();
        Self::from_tokens(tokens).expect("specials come first and words are unique")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens.iter().zip(SPECIALS).any(|(t, s)| t != s) {
            return Err(Error::Checkpoint("vocabulary does not start with the reserved tokens".into()));
        }
        let index: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() {
            return Err(Error::Checkpoint("duplicate vocabulary entry".into()));
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Text of `ids` up to the first EOS, skipping other reserved tokens.
    pub fn decode(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i >= SPECIALS.len() || i == UNK)
            .filter_map(|&i| self.token(i))
            .collect();
        detokenize(&words)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionerConfig {
    pub encoder: EncoderConfig,
    pub lm_dim: usize,
    pub lm_blocks: usize,
    pub lm_heads: usize,
    pub mlp_ratio: usize,
    /// Longest generated caption, in tokens.
    pub max_new_tokens: usize,
    /// Positional table size; longer sequences are rejected.
    pub max_positions: usize,
    pub seed: u64,
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        CaptionerConfig {
            encoder: EncoderConfig::desk(),
            lm_dim: 64,
            lm_blocks: 2,
            lm_heads: 4,
            mlp_ratio: 4,
            max_new_tokens: 32,
            max_positions: 128,
            seed: 0,
        }
    }
}

impl CaptionerConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.lm_blocks == 0 {
            return Err(Error::Validation("decoder needs at least one block".into()));
        }
        if self.lm_heads == 0 || self.lm_dim % self.lm_heads != 0 {
            return Err(Error::Validation(format!(
                "lm_dim {} must be divisible by lm_heads {}",
                self.lm_dim, self.lm_heads
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Validation("max_new_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// Which component groups stay fixed during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeFlags {
    pub encoder: bool,
    pub projector: bool,
    pub decoder: bool,
}

/// LayerNorm, Linear, GELU, Linear.
#[derive(Clone, Debug)]
pub struct Projector {
    pub ln: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Projector {
    pub fn forward<'t>(&self, s: &Session<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.ln.forward(s, x)?;
        let h = self.fc1.forward(s, h)?.gelu();
        self.fc2.forward(s, h)
    }
}

/// An image ready for encoding: pixels plus, when the saliency components
/// are on, its precomputed saliency.
#[derive(Clone, Debug)]
pub struct PreparedImage {
    pub pixels: Tensor,
    pub saliency: Option<ImageSaliency>,
}

#[derive(Clone, Debug)]
pub struct Captioner {
    pub config: CaptionerConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub projector: Projector,
    tok_embed: ParamId,
    pos_embed: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
}

impl Captioner {
    pub fn new(config: CaptionerConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, config.encoder.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xdec0_de00);
        let (d, dv) = (config.lm_dim, config.encoder.output_dim());
        let projector = Projector {
            ln: LayerNorm::new(&mut store, "projector.ln", dv),
            fc1: Linear::new(&mut store, "projector.fc1", dv, d, true, &mut rng),
            fc2: Linear::new(&mut store, "projector.fc2", d, d, true, &mut rng),
        };
        let tok_embed = store.randn("decoder.tok_embed", &[vocab.len(), d], 0.02, &mut rng);
        let pos_embed = store.randn("decoder.pos_embed", &[config.max_positions, d], 0.02, &mut rng);
        let blocks = (0..config.lm_blocks)
            .map(|i| Block::new(&mut store, &format!("decoder.block{i}"), d, config.lm_heads, config.mlp_ratio, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(&mut store, "decoder.ln_f", d);
        let head = Linear::new(&mut store, "decoder.head", d, vocab.len(), true, &mut rng);
        // near-uniform predictions at initialization
        for v in store.get_mut(head.w).data_mut() {
            *v *= 0.1;
        }
        Ok(Captioner {
            config,
            vocab,
            store,
            encoder,
            projector,
            tok_embed,
            pos_embed,
            blocks,
            ln_f,
            head,
        })
    }

    pub fn set_freeze(&mut self, flags: FreezeFlags) {
        self.store.set_frozen("encoder.", flags.encoder);
        self.store.set_frozen("projector.", flags.projector);
        self.store.set_frozen("decoder.", flags.decoder);
    }

    pub fn iasc(&self) -> bool {
        self.config.encoder.iasc
    }

    pub fn parameter_count(&self) -> usize {
        self.store.iter().map(|(_, p)| p.value.numel()).sum()
    }

    /// Encoder then projector: `[visual tokens x lm_dim]`.
    pub fn project<'t>(&self, s: &Session<'t, '_>, image: &PreparedImage) -> Result<Var<'t>> {
        let encoded = self.encoder.encode(s, &image.pixels, image.saliency.as_ref())?;
        self.projector.forward(s, encoded.tokens)
    }

    /// Logits `[text.len() x vocab]`; row `i` predicts the token after `text[i]`.
    ///
    /// `text` starts with BOS. Prompt positions produce no logits.
    pub fn decoder_forward<'t>(
        &self,
        s: &Session<'t, '_>,
        visual: Var<'t>,
        prompt: &[usize],
        text: &[usize],
    ) -> Result<Var<'t>> {
        let nv = visual.value().rows();
        let prefix = nv + prompt.len();
        let len = prefix + text.len();
        if len > self.config.max_positions {
            return Err(Error::contract(format!(
                "sequence of {len} positions exceeds the maximum of {}",
                self.config.max_positions
            )));
        }
        if let Some(&bad) = prompt.iter().chain(text).find(|&&t| t >= self.vocab.len()) {
            return Err(Error::contract(format!("token id {bad} outside vocabulary")));
        }
        let table = s.param(self.tok_embed);
        let ids: Vec<usize> = prompt.iter().chain(text).copied().collect();
        let words = s.tape().gather_rows(table, &ids)?;
        let x = s.tape().concat_rows(&[visual, words])?;
        let mut x = x.add(s.param(self.pos_embed).slice_rows(0, len)?)?;
        let mask = attention_mask(nv, len);
        for block in &self.blocks {
            x = block.forward(s, x, Some(&mask))?;
        }
        let x = self.ln_f.forward(s, x.slice_rows(prefix, len)?)?;
        self.head.forward(s, x)
    }

    /// Mean cross-entropy numerator for one caption: summed over non-PAD
    /// targets. Returns the sum and the number of counted positions.
    pub fn caption_loss<'t>(
        &self,
        s: &Session<'t, '_>,
        image: &PreparedImage,
        prompt: &[usize],
        caption: &[usize],
    ) -> Result<(Var<'t>, usize)> {
        let visual = self.project(s, image)?;
        let mut text = Vec::with_capacity(caption.len() + 1);
        text.push(BOS);
        text.extend_from_slice(caption);
        let mut targets: Vec<Option<usize>> = caption.iter().map(|&t| (t != PAD).then_some(t)).collect();
        let content = caption.iter().rposition(|&t| t != PAD).map_or(0, |i| i + 1);
        targets.insert(content, Some(EOS));
        targets.truncate(text.len());
        let counted = targets.iter().flatten().count();
        let logits = self.decoder_forward(s, visual, prompt, &text)?;
        Ok((logits.cross_entropy_sum(&targets)?, counted))
    }

    /// Greedy decoding from BOS until EOS or `max_new_tokens`.
    pub fn generate_ids(&self, image: &PreparedImage, prompt: &[usize]) -> Result<Vec<usize>> {
        let visual = {
            let tape = Tape::new();
            let s = Session::new(&tape, &self.store);
            self.project(&s, image)?.value().as_ref().clone()
        };
        let mut text = vec![BOS];
        for _ in 0..self.config.max_new_tokens {
            let tape = Tape::new();
            let s = Session::new(&tape, &self.store);
            let logits = self.decoder_forward(&s, s.constant(visual.clone()), prompt, &text)?.value();
            let last = Tensor::new(vec![logits.cols()], logits.row(logits.rows() - 1).to_vec())?;
            let next = last.argmax();
            if next == EOS {
                break;
            }
            text.push(next);
        }
        Ok(text[1..].to_vec())
    }

    pub fn generate(&self, image: &PreparedImage, prompt: &str) -> Result<String> {
        let ids = self.generate_ids(image, &self.vocab.encode(prompt))?;
        Ok(self.vocab.decode(&ids))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::from_store(
            CHECKPOINT_KIND,
            serde_json::to_value(&self.config)?,
            serde_json::json!({ "vocabulary": self.vocab.tokens() }),
            &self.store,
        ))
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let tokens: Vec<String> = serde_json::from_value(ck.header.extra["vocabulary"].clone())?;
        let mut model = Captioner::new(ck.config()?, Vocabulary::from_tokens(tokens)?)?;
        model.store.load_values(ck.tensors)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

/// Additive mask: visual rows see only visual columns; text rows see all
/// visual columns and text up to themselves.
fn attention_mask(visual: usize, len: usize) -> Tensor {
    Tensor::from_fn(&[len, len], |k| {
        let (i, j) = (k / len, k % len);
        let allowed = if i < visual { j < visual } else { j <= i };
        if allowed {
            0.0
        } else {
            MASKED
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::Validation(format!("unknown preset {s:?} (expected desk or paper)"))),
        }
    }
}

impl TrainConfig {
    pub fn preset(p: Preset) -> Self {
        let base = TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 0.01,
            warmup_ratio: 0.03,
            batch_size: 16,
            total_steps: 400,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        };
        match p {
            Preset::Desk => base,
            Preset::Paper => TrainConfig {
                learning_rate: 4e-5,
                ..base
            },
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            peak_lr: self.learning_rate,
            warmup_ratio: self.warmup_ratio,
            total_steps: self.total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Validation("weight_decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        self.schedule().lr_at(step)
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

/// One training pair: an image, prompt ids and caption ids (PAD allowed).
#[derive(Clone, Copy, Debug)]
pub struct CaptionSample<'a> {
    pub image: &'a PreparedImage,
    pub prompt: &'a [usize],
    pub caption: &'a [usize],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

struct CaptionLoss<'m>(&'m Captioner);

impl SampleLoss<CaptionSample<'_>> for CaptionLoss<'_> {
    fn loss<'t>(&self, s: &Session<'t, '_>, x: &CaptionSample<'_>) -> Result<Var<'t>> {
        Ok(self.0.caption_loss(s, x.image, x.prompt, x.caption)?.0)
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    opt: AdamW,
    step: usize,
}

impl Trainer {
    pub fn new(model: &Captioner, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let opt = AdamW::new(
            &model.store,
            AdamWConfig {
                beta1: config.beta1,
                beta2: config.beta2,
                eps: config.eps,
                weight_decay: config.weight_decay,
            },
        );
        Ok(Trainer { config, opt, step: 0 })
    }

    /// Mean cross-entropy over the batch's counted positions, then one
    /// AdamW update. A non-finite loss or gradient aborts the step.
    pub fn train_step(&mut self, model: &mut Captioner, batch: &[CaptionSample<'_>]) -> Result<StepLog> {
        if batch.is_empty() {
            return Err(Error::contract("empty training batch"));
        }
        let counted: usize = batch
            .iter()
            .map(|x| x.caption.iter().filter(|&&t| t != PAD).count() + 1)
            .sum();
        let (losses, mut grads) = batch_gradients(&model.store, batch, &CaptionLoss(model))
            .map_err(|e| Error::NonFinite(format!("step {}: {e}", self.step)))?;
        grads.scale(1.0 / counted as Float);
        grads
            .check_finite()
            .map_err(|e| Error::NonFinite(format!("step {}: {e}", self.step)))?;
        let loss = losses.iter().sum::<Float>() as f64 / counted as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("step {}: loss is {loss}", self.step)));
        }
        let lr = self.config.lr_at(self.step)?;
        self.opt.update(&mut model.store, &grads, lr);
        let log = StepLog {
            step: self.step,
            lr,
            loss,
        };
        self.step += 1;
        Ok(log)
    }
}

/// Runs `config.total_steps` steps over shuffled epochs of `samples`.
pub fn train_captioner(
    model: &mut Captioner,
    samples: &[CaptionSample<'_>],
    config: TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    if samples.is_empty() {
        return Err(Error::Validation("no training captions".into()));
    }
    let mut trainer = Trainer::new(model, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    let mut logs = Vec::with_capacity(config.total_steps);
    let size = config.batch_size.min(samples.len());
    for _ in 0..config.total_steps {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(samples[order[cursor]]);
            cursor += 1;
        }
        let log = trainer.train_step(model, &batch)?;
        on_step(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// The three ablation rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "no-finetune")]
    NoFinetune,
    #[serde(rename = "finetune")]
    Finetune,
    #[serde(rename = "finetune+IASC")]
    FinetuneIasc,
}

/// How a mode wires the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Wiring {
    pub train: bool,
    pub iasc: bool,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::NoFinetune, Mode::Finetune, Mode::FinetuneIasc];

    pub fn wiring(self) -> Wiring {
        match self {
            Mode::NoFinetune => Wiring {
                train: false,
                iasc: false,
            },
            Mode::Finetune => Wiring {
                train: true,
                iasc: false,
            },
            Mode::FinetuneIasc => Wiring {
                train: true,
                iasc: true,
            },
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::NoFinetune => "no-finetune",
            Mode::Finetune => "finetune",
            Mode::FinetuneIasc => "finetune+IASC",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Validation(format!(
                    "unknown mode {s:?} (expected no-finetune, finetune or finetune+IASC)"
                ))
            })
    }
}

/// Captioner config for a mode: the saliency components follow the wiring.
pub fn config_for_mode(base: &CaptionerConfig, mode: Mode) -> CaptionerConfig {
    let mut cfg = base.clone();
    cfg.encoder.iasc = mode.wiring().iasc;
    cfg
}
