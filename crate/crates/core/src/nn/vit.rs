use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Linear, ParamId, ParamStore, Session};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Extents of a patch-token grid; tokens are stored in row-major raster order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

impl Grid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A token sequence laid out on a spatial grid.
#[derive(Clone, Copy, Debug)]
pub struct VisualTokens<'t> {
    /// `[grid.len() x dim]`
    pub tokens: Var<'t>,
    pub grid: Grid,
}

impl VisualTokens<'_> {
    pub fn dim(&self) -> usize {
        self.tokens.value().cols()
    }
}

/// Flattens an `H x W x C` image into `(H/p)(W/p)` patch rows of `p*p*C`
/// values, patches in raster order, each patch flattened as (row, col, channel).
pub fn patchify(image: &Tensor, patch: usize) -> Result<(Tensor, Grid)> {
    image.expect_rank(3, "patchify")?;
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::contract(format!(
            "image {h}x{w} is not divisible by patch size {patch}; resize it first"
        )));
    }
    let grid = Grid {
        rows: h / patch,
        cols: w / patch,
    };
    let width = patch * patch * c;
    let mut data = Vec::with_capacity(grid.len() * width);
    for gy in 0..grid.rows {
        for gx in 0..grid.cols {
            for dy in 0..patch {
                let y = gy * patch + dy;
                let start = (y * w + gx * patch) * c;
                data.extend_from_slice(&image.data()[start..start + patch * c]);
            }
        }
    }
    Ok((Tensor::new(vec![grid.len(), width], data)?, grid))
}

/// Linear patch projection plus a learned positional embedding.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub pos: ParamId,
    pub patch: usize,
    pub grid: Grid,
}

impl PatchEmbed {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        patch: usize,
        channels: usize,
        grid: Grid,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        PatchEmbed {
            proj: Linear::new(store, &format!("{name}.proj"), patch * patch * channels, dim, true, rng),
            pos: store.randn(format!("{name}.pos"), &[grid.len(), dim], 0.02, rng),
            patch,
            grid,
        }
    }

    pub fn forward<'t>(&self, s: &Session<'t, '_>, image: &Tensor) -> Result<VisualTokens<'t>> {
        let (patches, grid) = patchify(image, self.patch)?;
        if grid != self.grid {
            return Err(Error::contract(format!(
                "image gives a {}x{} patch grid, model expects {}x{}",
                grid.rows, grid.cols, self.grid.rows, self.grid.cols
            )));
        }
        let x = self.proj.forward(s, s.constant(patches))?;
        Ok(VisualTokens {
            tokens: x.add(s.param(self.pos))?,
            grid,
        })
    }
}

/// `[T x D]` tokens to a channel-major `[D x rows x cols]` map.
pub fn tokens_to_grid<'t>(x: Var<'t>, grid: Grid) -> Result<Var<'t>> {
    let d = x.value().cols();
    x.transpose()?.reshape(&[d, grid.rows, grid.cols])
}

/// Inverse of [`tokens_to_grid`].
pub fn grid_to_tokens(x: Var<'_>) -> Result<Var<'_>> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::shape("grid_to_tokens", format!("{shape:?}")));
    }
    x.reshape(&[shape[0], shape[1] * shape[2]])?.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Float, Tape};

    #[test]
    fn patch_counts() {
        let (p, g) = patchify(&Tensor::zeros(&[8, 8, 3]), 4).unwrap();
        assert_eq!(g.len(), 4);
        assert_eq!(p.shape(), &[4, 48]);
        let (_, g) = patchify(&Tensor::zeros(&[32, 32, 3]), 4).unwrap();
        assert_eq!(g.len(), 64);
    }

    #[test]
    fn indivisible_image_is_rejected() {
        let err = patchify(&Tensor::zeros(&[10, 8, 3]), 4).unwrap_err();
        assert!(err.to_string().contains("resize"));
    }

    #[test]
    fn patch_layout_is_raster() {
        // 4x4 single-channel image, values = flat index
        let img = Tensor::from_fn(&[4, 4, 1], |i| i as Float);
        let (p, _) = patchify(&img, 2).unwrap();
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn grid_round_trip() {
        let tape = Tape::new();
        let x = tape.var(Tensor::from_fn(&[6, 4], |i| i as Float));
        let grid = Grid { rows: 2, cols: 3 };
        let g = tokens_to_grid(x, grid).unwrap();
        assert_eq!(g.shape(), vec![4, 2, 3]);
        // channel 1 at (row 1, col 2) is token 5, feature 1
        assert_eq!(g.value().data()[6 + 5], x.value().at(5, 1));
        assert_eq!(*grid_to_tokens(g).unwrap().value(), *x.value());
    }
}
