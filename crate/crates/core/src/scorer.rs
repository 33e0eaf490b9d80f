//! Compact ViT style classifier.
//!
//! Stands in for a pretrained aesthetics model: it produces pooled visual
//! features, class scores and the most salient category, and exposes every
//! block's output as a channel-major spatial map so a gradient can be taken
//! against any of them.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::image_ops::resize_image;
use crate::nn::{
    batch_gradients, grid_to_tokens, tokens_to_grid, Block, Grid, Linear, PatchEmbed, ParamStore, SampleLoss,
    Session, VisualTokens,
};
use crate::optim::{AdamW, AdamWConfig, Schedule};
use crate::tensor::{Float, Tape, Tensor, Var};

pub const CHECKPOINT_KIND: &str = "aesthetic-scorer";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub num_classes: usize,
    /// Block whose output is differentiated against for saliency.
    pub target_layer: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        let num_blocks = 4;
        ScorerConfig {
            image_size: 32,
            channels: 3,
            patch_size: 8,
            embed_dim: 32,
            num_blocks,
            num_heads: 4,
            num_classes: 8,
            target_layer: num_blocks - 2,
            mlp_ratio: 2,
            seed: 0,
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Validation(format!(
                "embed_dim {} must be divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.target_layer >= self.num_blocks {
            return Err(Error::Validation(format!(
                "target_layer {} must be below num_blocks {}",
                self.target_layer, self.num_blocks
            )));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Validation(format!(
                "image_size {} must be a multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Validation("num_classes must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Grid {
        let n = self.image_size / self.patch_size;
        Grid { rows: n, cols: n }
    }
}

/// Class scores `y`, the winning category `c` (lowest index on ties) and its score.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassScores {
    pub y: Vec<Float>,
    pub c: usize,
    pub y_c: Float,
}

impl ClassScores {
    pub fn from_logits(y: Vec<Float>) -> Self {
        let c = Tensor::new(vec![y.len()], y.clone()).map(|t| t.argmax()).unwrap_or(0);
        ClassScores { y_c: y[c], c, y }
    }
}

/// Everything one forward pass records.
pub struct ScorerPass<'t> {
    /// Mean-pooled final block output, `[1 x embed_dim]`.
    pub features: Var<'t>,
    /// Each block's output as `[embed_dim x rows x cols]`.
    pub taps: Vec<Var<'t>>,
    /// `[1 x num_classes]`
    pub logits: Var<'t>,
}

impl ScorerPass<'_> {
    pub fn scores(&self) -> ClassScores {
        ClassScores::from_logits(self.logits.value().data().to_vec())
    }
}

#[derive(Clone, Debug)]
pub struct Scorer {
    pub config: ScorerConfig,
    pub store: ParamStore,
    embed: PatchEmbed,
    blocks: Vec<Block>,
    head: Linear,
}

impl Scorer {
    pub fn new(config: ScorerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.embed_dim;
        let embed = PatchEmbed::new(&mut store, "scorer.embed", config.patch_size, config.channels, config.grid(), d, &mut rng);
        let blocks = (0..config.num_blocks)
            .map(|i| Block::new(&mut store, &format!("scorer.block{i}"), d, config.num_heads, config.mlp_ratio, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::new(&mut store, "scorer.head", d, config.num_classes, true, &mut rng);
        Ok(Scorer {
            config,
            store,
            embed,
            blocks,
            head,
        })
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    /// Resizes to the configured input resolution when needed.
    pub fn prepare(&self, image: &Tensor) -> Result<Tensor> {
        let n = self.config.image_size;
        resize_image(image, n, n)
    }

    pub fn patchify<'t>(&self, s: &Session<'t, '_>, image: &Tensor) -> Result<VisualTokens<'t>> {
        self.embed.forward(s, image)
    }

    /// Runs all blocks, returning pooled features and every block's spatial map.
    ///
    /// Each block's output is routed through its spatial map before the next
    /// block consumes it, so every tap lies on the path to the class scores.
    pub fn encode_with_taps<'t>(
        &self,
        s: &Session<'t, '_>,
        tokens: VisualTokens<'t>,
    ) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let mut x = tokens.tokens;
        let mut taps = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let out = block.forward(s, x, None)?;
            let tap = tokens_to_grid(out, tokens.grid)?;
            taps.push(tap);
            x = grid_to_tokens(tap)?;
        }
        Ok((x.mean_rows()?, taps))
    }

    /// Class logits recomputed from block `layer`'s spatial map, running
    /// only the blocks above it.
    pub fn logits_from_tap<'t>(&self, s: &Session<'t, '_>, layer: usize, tap: Var<'t>) -> Result<Var<'t>> {
        if layer >= self.blocks.len() {
            return Err(Error::contract(format!("layer {layer} out of {} blocks", self.blocks.len())));
        }
        let mut x = grid_to_tokens(tap)?;
        for block in &self.blocks[layer + 1..] {
            x = block.forward(s, x, None)?;
        }
        self.classify(s, x.mean_rows()?)
    }

    pub fn classify<'t>(&self, s: &Session<'t, '_>, features: Var<'t>) -> Result<Var<'t>> {
        self.head.forward(s, features)
    }

    pub fn forward<'t>(&self, s: &Session<'t, '_>, image: &Tensor) -> Result<ScorerPass<'t>> {
        let image = self.prepare(image)?;
        let tokens = self.patchify(s, &image)?;
        let (features, taps) = self.encode_with_taps(s, tokens)?;
        let logits = self.classify(s, features)?;
        Ok(ScorerPass {
            features,
            taps,
            logits,
        })
    }

    pub fn scores(&self, image: &Tensor) -> Result<ClassScores> {
        let tape = Tape::new();
        let s = Session::new(&tape, &self.store);
        Ok(self.forward(&s, image)?.scores())
    }

    pub fn accuracy(&self, data: &[(Tensor, usize)]) -> Result<f64> {
        let mut correct = 0;
        for (img, label) in data {
            if self.scores(img)?.c == *label {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len().max(1) as f64)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::from_store(
            CHECKPOINT_KIND,
            serde_json::to_value(&self.config)?,
            serde_json::Value::Null,
            &self.store,
        ))
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let mut scorer = Scorer::new(ck.config()?)?;
        scorer.store.load_values(ck.tensors)?;
        Ok(scorer)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ScorerTrainConfig {
    fn default() -> Self {
        ScorerTrainConfig {
            steps: 300,
            batch_size: 16,
            learning_rate: 2e-3,
            warmup_ratio: 0.03,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

struct ClassLoss<'m>(&'m Scorer);

impl SampleLoss<(Tensor, usize)> for ClassLoss<'_> {
    fn loss<'t>(&self, s: &Session<'t, '_>, (image, label): &(Tensor, usize)) -> Result<Var<'t>> {
        self.0.forward(s, image)?.logits.cross_entropy_sum(&[Some(*label)])
    }
}

/// Supervised training on labeled images; returns the mean loss of every step.
pub fn train_scorer(scorer: &mut Scorer, data: &[(Tensor, usize)], cfg: &ScorerTrainConfig) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Validation("no labeled images to train the scorer on".into()));
    }
    if let Some((_, bad)) = data.iter().find(|(_, l)| *l >= scorer.config.num_classes) {
        return Err(Error::Validation(format!(
            "label {bad} outside {} classes",
            scorer.config.num_classes
        )));
    }
    let schedule = Schedule {
        peak_lr: cfg.learning_rate,
        warmup_ratio: cfg.warmup_ratio,
        total_steps: cfg.steps,
    };
    schedule.validate()?;
    let prepared: Vec<(Tensor, usize)> = data
        .iter()
        .map(|(img, l)| Ok((scorer.prepare(img)?, *l)))
        .collect::<Result<_>>()?;
    let mut opt = AdamW::new(
        &scorer.store,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(prepared.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(prepared[order[cursor]].clone());
            cursor += 1;
        }
        let (per_sample, mut grads) = batch_gradients(&scorer.store, &batch, &ClassLoss(scorer))?;
        grads.scale(1.0 / batch.len() as Float);
        let loss = per_sample.iter().sum::<Float>() as f64 / batch.len() as f64;
        let lr = schedule.lr_at(step)?;
        opt.update(&mut scorer.store, &grads, lr);
        losses.push(loss);
    }
    Ok(losses)
}
