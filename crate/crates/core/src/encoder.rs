//! Saliency-fused vision encoder.
//!
//! Each block runs self-attention over the query stream, then
//! cross-attention whose queries come from that stream and whose keys and
//! values come from the original patch embedding, then an MLP. The query
//! stream starts as the saliency-modulated patch embedding. Images are cut
//! into tiles (plus a thumbnail when there is more than one tile) and each
//! tile's tokens are merged 2x2 by pixel shuffle.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iasm::{aesthetic_saliency, normalize_resize, SaliencyMap};
use crate::image_ops::{crop, resize_image};
use crate::nn::{Attention, Grid, LayerNorm, Linear, Mlp, ParamStore, PatchEmbed, Session, VisualTokens};
use crate::scorer::Scorer;
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThumbnailSaliency {
    /// Run the scorer again on the thumbnail image.
    Recompute,
    /// Resample the full-image map.
    Reuse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// Tile edge in pixels.
    pub tile_base: usize,
    pub max_tiles: usize,
    /// 1 disables pixel shuffle.
    pub shuffle_factor: usize,
    /// Saliency stream and cross-attention. Off means the query stream is
    /// the plain patch embedding and cross-attention is skipped.
    pub iasc: bool,
    pub zero_init_cross_out: bool,
    pub thumbnail_saliency: ThumbnailSaliency,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    pub fn desk() -> Self {
        EncoderConfig {
            channels: 3,
            patch_size: 8,
            embed_dim: 32,
            num_blocks: 4,
            num_heads: 4,
            mlp_ratio: 2,
            tile_base: 32,
            max_tiles: 40,
            shuffle_factor: 2,
            iasc: true,
            zero_init_cross_out: true,
            thumbnail_saliency: ThumbnailSaliency::Recompute,
            seed: 0,
        }
    }

    /// 24 blocks over 448-pixel tiles, up to 40 tiles. 14-pixel patches give
    /// a 32x32 token grid per tile, 16x16 after the shuffle.
    pub fn paper_scale() -> Self {
        EncoderConfig {
            patch_size: 14,
            num_blocks: 24,
            tile_base: 448,
            max_tiles: 40,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.num_blocks == 0 {
            return bad("encoder needs at least one block".into());
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} must be divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.patch_size == 0 || self.tile_base % self.patch_size != 0 {
            return bad(format!(
                "tile_base {} must be a multiple of patch_size {}",
                self.tile_base, self.patch_size
            ));
        }
        if self.max_tiles == 0 {
            return bad("max_tiles must be at least 1".into());
        }
        let g = self.tile_base / self.patch_size;
        if self.shuffle_factor == 0 || g % self.shuffle_factor != 0 {
            return bad(format!(
                "patch grid {g}x{g} is not divisible by shuffle factor {}",
                self.shuffle_factor
            ));
        }
        Ok(())
    }

    /// Patch grid of one tile.
    pub fn grid(&self) -> Grid {
        let n = self.tile_base / self.patch_size;
        Grid { rows: n, cols: n }
    }

    pub fn tokens_per_tile(&self) -> usize {
        self.grid().len() / (self.shuffle_factor * self.shuffle_factor)
    }

    pub fn output_dim(&self) -> usize {
        self.embed_dim * self.shuffle_factor * self.shuffle_factor
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    pub rows: usize,
    pub cols: usize,
    pub includes_thumbnail: bool,
}

impl TilePlan {
    pub fn tiles(&self) -> usize {
        self.rows * self.cols
    }

    /// Tiles plus the thumbnail.
    pub fn views(&self) -> usize {
        self.tiles() + usize::from(self.includes_thumbnail)
    }
}

/// Chooses the tile grid whose aspect ratio is closest (in log ratio) to
/// the image's, among grids no larger than the image area in tiles
/// (rounded up, capped at `max_tiles`). Ties go to fewer tiles, then fewer
/// rows.
pub fn plan_tiles(width: usize, height: usize, cfg: &EncoderConfig) -> Result<TilePlan> {
    if width == 0 || height == 0 {
        return Err(Error::contract(format!("image extents {width}x{height} must be positive")));
    }
    let area = (width * height) as f64 / (cfg.tile_base * cfg.tile_base) as f64;
    let bound = (area.ceil() as usize).clamp(1, cfg.max_tiles);
    let target = (width as f64 / height as f64).ln();
    let mut best: Option<(f64, usize, usize)> = None;
    for r in 1..=bound {
        for c in 1..=bound / r {
            let d = ((c as f64 / r as f64).ln() - target).abs();
            let better = match best {
                None => true,
                Some((bd, br, bc)) => {
                    if (d - bd).abs() > 1e-12 {
                        d < bd
                    } else {
                        (r * c, r) < (br * bc, br)
                    }
                }
            };
            if better {
                best = Some((d, r, c));
            }
        }
    }
    let (_, rows, cols) = best.expect("bound >= 1 admits the 1x1 grid");
    Ok(TilePlan {
        rows,
        cols,
        includes_thumbnail: rows * cols > 1,
    })
}

fn shuffle_map(grid: Grid, dim: usize, f: usize) -> Result<(Vec<usize>, Grid)> {
    if f == 0 || grid.rows % f != 0 || grid.cols % f != 0 {
        return Err(Error::contract(format!(
            "grid {}x{} is not divisible by shuffle factor {f}",
            grid.rows, grid.cols
        )));
    }
    let out = Grid {
        rows: grid.rows / f,
        cols: grid.cols / f,
    };
    let mut src = Vec::with_capacity(grid.len() * dim);
    for r in 0..out.rows {
        for c in 0..out.cols {
            for dy in 0..f {
                for dx in 0..f {
                    let token = (r * f + dy) * grid.cols + c * f + dx;
                    src.extend((0..dim).map(|d| token * dim + d));
                }
            }
        }
    }
    Ok((src, out))
}

/// Merges each `f x f` token neighborhood into one token by concatenating
/// channels in (row, col) order.
pub fn pixel_shuffle<'t>(x: VisualTokens<'t>, f: usize) -> Result<VisualTokens<'t>> {
    let dim = x.dim();
    let (src, grid) = shuffle_map(x.grid, dim, f)?;
    Ok(VisualTokens {
        tokens: x.tokens.permute(src, &[grid.len(), dim * f * f])?,
        grid,
    })
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<'t>(x: VisualTokens<'t>, f: usize) -> Result<VisualTokens<'t>> {
    if f == 0 || x.dim() % (f * f) != 0 {
        return Err(Error::contract(format!("dim {} is not divisible by {f}^2", x.dim())));
    }
    let dim = x.dim() / (f * f);
    let grid = Grid {
        rows: x.grid.rows * f,
        cols: x.grid.cols * f,
    };
    let (fwd, _) = shuffle_map(grid, dim, f)?;
    let mut inv = vec![0; fwd.len()];
    for (i, &s) in fwd.iter().enumerate() {
        inv[s] = i;
    }
    Ok(VisualTokens {
        tokens: x.tokens.permute(inv, &[grid.len(), dim])?,
        grid,
    })
}

/// Per-view saliency for one image, normalized and on the encoder's grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSaliency {
    pub plan: TilePlan,
    /// `[plan.rows * g x plan.cols * g]`, cut per tile.
    pub tiled: SaliencyMap,
    pub thumbnail: Option<SaliencyMap>,
}

impl ImageSaliency {
    /// Map for view `v` (tiles in raster order, then the thumbnail).
    pub fn view(&self, v: usize, grid: Grid) -> Result<SaliencyMap> {
        let plan = self.plan;
        if v == plan.tiles() {
            return self
                .thumbnail
                .clone()
                .ok_or_else(|| Error::contract("no thumbnail saliency for a single-tile plan"));
        }
        let (tr, tc) = (v / plan.cols, v % plan.cols);
        let full_cols = plan.cols * grid.cols;
        let src = self.tiled.values.data();
        let mut data = Vec::with_capacity(grid.len());
        for r in 0..grid.rows {
            let row = tr * grid.rows + r;
            let start = row * full_cols + tc * grid.cols;
            data.extend_from_slice(&src[start..start + grid.cols]);
        }
        Ok(SaliencyMap {
            values: Tensor::new(vec![grid.rows, grid.cols], data)?,
            normalized: true,
            class_index: self.tiled.class_index,
        })
    }
}

/// Computes the saliency inputs for [`Encoder::encode`].
pub fn image_saliency(scorer: &Scorer, image: &Tensor, cfg: &EncoderConfig) -> Result<ImageSaliency> {
    image.expect_rank(3, "image_saliency")?;
    let plan = plan_tiles(image.shape()[1], image.shape()[0], cfg)?;
    let g = cfg.grid();
    let full = aesthetic_saliency(scorer, image)?;
    let tiled = normalize_resize(&full, plan.rows * g.rows, plan.cols * g.cols)?;
    let thumbnail = if plan.includes_thumbnail {
        let m = match cfg.thumbnail_saliency {
            ThumbnailSaliency::Recompute => {
                aesthetic_saliency(scorer, &resize_image(image, cfg.tile_base, cfg.tile_base)?)?
            }
            ThumbnailSaliency::Reuse => full,
        };
        Some(normalize_resize(&m, g.rows, g.cols)?)
    } else {
        None
    };
    Ok(ImageSaliency {
        plan,
        tiled,
        thumbnail,
    })
}

/// The fusion half of a block: LayerNorm then cross-attention.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub ln: LayerNorm,
    pub attn: Attention,
}

#[derive(Clone, Debug)]
pub struct IasBlock {
    pub ln1: LayerNorm,
    pub self_attn: Attention,
    pub cross: Option<CrossAttention>,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl IasBlock {
    /// `h = q + SA(LN q)`, `out = h + CA(LN h, kv)`, `out + MLP(LN out)`.
    /// Without a cross-attention half (or with `kv` absent) this is a plain
    /// pre-norm ViT block.
    pub fn forward<'t>(&self, s: &Session<'t, '_>, q: Var<'t>, kv: Option<Var<'t>>) -> Result<Var<'t>> {
        let n = self.ln1.forward(s, q)?;
        let mut h = q.add(self.self_attn.forward(s, n, n, None)?)?;
        if let (Some(cross), Some(kv)) = (&self.cross, kv) {
            let n = cross.ln.forward(s, h)?;
            h = h.add(cross.attn.forward(s, n, kv, None)?)?;
        }
        let n = self.ln2.forward(s, h)?;
        h.add(self.mlp.forward(s, n)?)
    }
}

/// Encoder output: tile tokens in raster order, thumbnail tokens last.
#[derive(Clone, Copy, Debug)]
pub struct Encoded<'t> {
    /// `[views * tokens_per_view x output_dim]`
    pub tokens: Var<'t>,
    pub plan: TilePlan,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub embed: PatchEmbed,
    pub saliency_proj: Option<Linear>,
    pub blocks: Vec<IasBlock>,
}

pub const PREFIX: &str = "encoder";

impl Encoder {
    pub fn new(store: &mut ParamStore, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xe4c0_de00);
        let d = config.embed_dim;
        let embed = PatchEmbed::new(
            store,
            &format!("{PREFIX}.embed"),
            config.patch_size,
            config.channels,
            config.grid(),
            d,
            &mut rng,
        );
        // The saliency components draw from their own stream so the shared
        // weights are identical with the components on or off.
        let mut iasc_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x1a5c_5a11);
        let saliency_proj = config.iasc.then(|| {
            let lin = Linear::new(store, &format!("{PREFIX}.saliency_proj"), d, d, false, &mut iasc_rng);
            // identity start: the query stream begins as the modulated patch tokens
            let w = store.get_mut(lin.w).data_mut();
            w.fill(0.0);
            for i in 0..d {
                w[i * d + i] = 1.0;
            }
            lin
        });
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for i in 0..config.num_blocks {
            let name = format!("{PREFIX}.block{i}");
            let ln1 = LayerNorm::new(store, &format!("{name}.ln1"), d);
            let self_attn = Attention::new(store, &format!("{name}.self_attn"), d, config.num_heads, &mut rng)?;
            let cross = if config.iasc {
                let ln = LayerNorm::new(store, &format!("{name}.cross.ln"), d);
                let attn = Attention::new(store, &format!("{name}.cross.attn"), d, config.num_heads, &mut iasc_rng)?;
                if config.zero_init_cross_out {
                    attn.out.zero(store);
                }
                Some(CrossAttention { ln, attn })
            } else {
                None
            };
            let ln2 = LayerNorm::new(store, &format!("{name}.ln2"), d);
            let mlp = Mlp::new(store, &format!("{name}.mlp"), d, d * config.mlp_ratio, &mut rng);
            blocks.push(IasBlock {
                ln1,
                self_attn,
                cross,
                ln2,
                mlp,
            });
        }
        Ok(Encoder {
            config,
            embed,
            saliency_proj,
            blocks,
        })
    }

    /// Whether a parameter belongs to the saliency components.
    pub fn is_iasc_param(name: &str) -> bool {
        name.starts_with(&format!("{PREFIX}.saliency_proj")) || name.contains(".cross.")
    }

    /// `W_s((1 + s_i) token_i)` for each patch `i`.
    pub fn build_saliency_stream<'t>(
        &self,
        s: &Session<'t, '_>,
        kv: VisualTokens<'t>,
        m: &SaliencyMap,
    ) -> Result<VisualTokens<'t>> {
        let proj = self
            .saliency_proj
            .as_ref()
            .ok_or_else(|| Error::contract("saliency stream requested with the saliency components disabled"))?;
        if (m.rows(), m.cols()) != (kv.grid.rows, kv.grid.cols) {
            return Err(Error::contract(format!(
                "saliency map {}x{} does not match the {}x{} token grid",
                m.rows(),
                m.cols(),
                kv.grid.rows,
                kv.grid.cols
            )));
        }
        let d = kv.dim();
        let scale = Tensor::new(
            vec![kv.grid.len(), d],
            m.values.data().iter().flat_map(|&v| std::iter::repeat_n(1.0 + v, d)).collect(),
        )?;
        let modulated = kv.tokens.mul(s.constant(scale))?;
        Ok(VisualTokens {
            tokens: proj.forward(s, modulated)?,
            grid: kv.grid,
        })
    }

    /// Blocks over one view. `saliency` must be given exactly when the
    /// saliency components are enabled.
    pub fn encode_view<'t>(
        &self,
        s: &Session<'t, '_>,
        view: &Tensor,
        saliency: Option<&SaliencyMap>,
    ) -> Result<VisualTokens<'t>> {
        let kv = self.embed.forward(s, view)?;
        let (mut x, memory) = match (self.config.iasc, saliency) {
            (true, Some(m)) => (self.build_saliency_stream(s, kv, m)?.tokens, Some(kv.tokens)),
            (false, None) => (kv.tokens, None),
            (true, None) => return Err(Error::contract("saliency map required when the saliency components are on")),
            (false, Some(_)) => return Err(Error::contract("saliency map given with the saliency components off")),
        };
        for block in &self.blocks {
            x = block.forward(s, x, memory)?;
        }
        let out = VisualTokens { tokens: x, grid: kv.grid };
        if self.config.shuffle_factor > 1 {
            pixel_shuffle(out, self.config.shuffle_factor)
        } else {
            Ok(out)
        }
    }

    /// Tiles (and thumbnail), encodes each view, concatenates tokens.
    pub fn encode<'t>(
        &self,
        s: &Session<'t, '_>,
        image: &Tensor,
        saliency: Option<&ImageSaliency>,
    ) -> Result<Encoded<'t>> {
        image.expect_rank(3, "encode")?;
        let cfg = &self.config;
        let plan = plan_tiles(image.shape()[1], image.shape()[0], cfg)?;
        if let Some(sal) = saliency {
            if sal.plan != plan {
                return Err(Error::contract("saliency was computed for a different tile plan"));
            }
        }
        let tb = cfg.tile_base;
        let resized = resize_image(image, plan.rows * tb, plan.cols * tb)?;
        let mut views = Vec::with_capacity(plan.views());
        for r in 0..plan.rows {
            for c in 0..plan.cols {
                views.push(crop(&resized, r * tb, c * tb, tb, tb)?);
            }
        }
        if plan.includes_thumbnail {
            views.push(resize_image(image, tb, tb)?);
        }
        let mut parts = Vec::with_capacity(views.len());
        for (v, view) in views.iter().enumerate() {
            let m = saliency.map(|sal| sal.view(v, cfg.grid())).transpose()?;
            parts.push(self.encode_view(s, view, m.as_ref())?.tokens);
        }
        let tokens = if parts.len() == 1 {
            parts[0]
        } else {
            s.tape().concat_rows(&parts)?
        };
        Ok(Encoded { tokens, plan })
    }
}
