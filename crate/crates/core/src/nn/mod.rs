//! Parameter storage and the transformer building blocks shared by the
//! scorer, the encoder and the caption decoder.

mod params;
mod vit;

pub use params::{Param, ParamGrads, ParamId, ParamStore, Session};
pub use vit::{grid_to_tokens, patchify, tokens_to_grid, Grid, PatchEmbed, VisualTokens};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Tensor, Var};

pub const LN_EPS: Float = 1e-5;

/// Additive mask value for disallowed attention edges.
pub const MASKED: Float = -1e9;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (d_in + d_out) as Float).sqrt();
        let w = store.randn(format!("{name}.w"), &[d_in, d_out], std, rng);
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[d_out])));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward<'t>(&self, s: &Session<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(s.param(self.w))?;
        match self.b {
            Some(b) => y.add_row(s.param(b)),
            None => Ok(y),
        }
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.w).data_mut().fill(0.0);
        if let Some(b) = self.b {
            store.get_mut(b).data_mut().fill(0.0);
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<'t>(&self, s: &Session<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(s.param(self.gamma), s.param(self.beta), LN_EPS)
    }
}

/// Two-layer GELU feed-forward network.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, rng),
        }
    }

    pub fn forward<'t>(&self, s: &Session<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.fc1.forward(s, x)?.gelu();
        self.fc2.forward(s, h)
    }
}

/// Multi-head scaled dot-product attention. Queries come from one
/// sequence, keys and values from another (the same one for self-attention).
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Validation(format!(
                "embed dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Attention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng),
            heads,
        })
    }

    /// `mask`, when given, is an additive `[len(query) x len(kv)]` bias.
    pub fn forward<'t>(
        &self,
        s: &Session<'t, '_>,
        query: Var<'t>,
        kv: Var<'t>,
        mask: Option<&Tensor>,
    ) -> Result<Var<'t>> {
        let q = self.q.forward(s, query)?;
        let k = self.k.forward(s, kv)?;
        let v = self.v.forward(s, kv)?;
        let dim = self.q.d_out;
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as Float).sqrt();
        let mask = mask.map(|m| s.constant(m.clone()));
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = q.slice_cols(a, b)?;
            let kh = k.slice_cols(a, b)?;
            let vh = v.slice_cols(a, b)?;
            let mut scores = qh.matmul(kh.transpose()?)?.mul_scalar(scale);
            if let Some(m) = mask {
                scores = scores.add(m)?;
            }
            heads.push(scores.softmax_rows()?.matmul(vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            s.tape().concat_cols(&heads)?
        };
        self.out.forward(s, merged)
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Block {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, dim * mlp_ratio, rng),
        })
    }

    pub fn forward<'t>(&self, s: &Session<'t, '_>, x: Var<'t>, mask: Option<&Tensor>) -> Result<Var<'t>> {
        let h = self.ln1.forward(s, x)?;
        let x = x.add(self.attn.forward(s, h, h, mask)?)?;
        let h = self.ln2.forward(s, x)?;
        x.add(self.mlp.forward(s, h)?)
    }
}

/// A per-sample scalar loss recorded through a [`Session`].
pub trait SampleLoss<S>: Sync {
    fn loss<'t>(&self, s: &Session<'t, '_>, sample: &S) -> Result<Var<'t>>;
}

/// Runs one tape per sample in parallel and sums the parameter gradients
/// in sample order, so the result does not depend on thread scheduling.
pub fn batch_gradients<S: Sync>(
    store: &ParamStore,
    samples: &[S],
    objective: &impl SampleLoss<S>,
) -> Result<(Vec<Float>, ParamGrads)> {
    let per_sample: Vec<Result<(Float, ParamGrads)>> = samples
        .par_iter()
        .map(|sample| {
            let tape = Tape::new();
            let s = Session::new(&tape, store);
            let loss = objective.loss(&s, sample)?;
            let value = loss.value().item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("loss is {value}")));
            }
            let grads = tape.backward(loss)?;
            Ok((value, s.param_grads(&grads)))
        })
        .collect();
    let mut total = ParamGrads::empty(store.len());
    let mut losses = Vec::with_capacity(samples.len());
    for r in per_sample {
        let (l, g) = r?;
        losses.push(l);
        total.accumulate(g);
    }
    Ok((losses, total))
}

/// Largest relative error between the reverse-mode gradients of `loss`
/// with respect to the trainable parameters and central differences with
/// step `h`.
///
/// Checks `per_tensor` seeded-random entries of every tensor, or all of them
/// when `None`. The error scale is `max(|a|, |b|, floor)`.
pub fn check_param_gradients<F>(
    store: &ParamStore,
    loss: F,
    h: Float,
    floor: Float,
    per_tensor: Option<usize>,
    seed: u64,
) -> Result<Float>
where
    F: for<'t, 's> Fn(&Session<'t, 's>) -> Result<Var<'t>>,
{
    let eval = |st: &ParamStore| -> Result<Float> {
        let tape = Tape::new();
        let s = Session::new(&tape, st);
        Ok(loss(&s)?.value().item())
    };
    let analytic = {
        let tape = Tape::new();
        let s = Session::new(&tape, store);
        let root = loss(&s)?;
        s.param_grads(&tape.backward(root)?)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = store.clone();
    let mut worst: Float = 0.0;
    for (id, p) in store.iter().filter(|(_, p)| !p.frozen) {
        let n = p.value.numel();
        let entries: Vec<usize> = match per_tensor {
            Some(k) if k < n => rand::seq::index::sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for i in entries {
            let orig = p.value.data()[i];
            probe.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = analytic.get(id).map_or(0.0, |g| g.data()[i]);
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(floor));
        }
    }
    Ok(worst)
}
