//! Aesthetic saliency from the scorer's gradients (LayerCAM style).
//!
//! For the top class `c`, the gradient `g` of `y^c` with respect to the
//! target layer's map `A` is gated by ReLU into position-wise weights, the
//! weighted activations are summed over channels, and a final ReLU gives
//! the map `M^c`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image_ops::{resize_bilinear, to_byte};
use crate::nn::Session;
use crate::scorer::{ClassScores, Scorer};
use crate::tensor::{Float, Tape, Tensor};

/// Non-negative `[rows x cols]` map for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub values: Tensor,
    pub normalized: bool,
    pub class_index: usize,
}

impl SaliencyMap {
    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_zero(&self) -> bool {
        self.values.data().iter().all(|&v| v == 0.0)
    }
}

/// Target-layer activation, its gradient, and the scores they came from.
#[derive(Clone, Debug)]
pub struct LayerCam {
    /// `[K x H' x W']`
    pub activation: Tensor,
    /// Same shape as `activation`.
    pub gradient: Tensor,
    pub scores: ClassScores,
}

/// Forward pass, pick `c = argmax(y)`, backward from `y^c` to the target tap.
pub fn layercam_gradients(scorer: &Scorer, image: &Tensor) -> Result<LayerCam> {
    let tape = Tape::new();
    let s = Session::new(&tape, &scorer.store);
    let pass = scorer.forward(&s, image)?;
    let scores = pass.scores();
    let tap = pass.taps[scorer.config.target_layer];
    let grads = tape.backward(pass.logits.select(scores.c)?)?;
    let gradient = grads.get_or_zeros(tap);
    let activation = tap.value().as_ref().clone();
    activation.check_finite("target activation")?;
    Ok(LayerCam {
        activation,
        gradient,
        scores,
    })
}

pub fn saliency_weights(g: &Tensor) -> Tensor {
    g.map(|v| v.max(0.0))
}

/// `w ⊙ A`
pub fn weighted_features(w: &Tensor, a: &Tensor) -> Result<Tensor> {
    w.zip(a, "weighted_features", |w, a| w * a)
}

/// ReLU of the channel sum of a `[K x H x W]` tensor.
pub fn fuse_channels(a_hat: &Tensor, class_index: usize) -> Result<SaliencyMap> {
    a_hat.expect_rank(3, "fuse_channels")?;
    let (k, h, w) = (a_hat.shape()[0], a_hat.shape()[1], a_hat.shape()[2]);
    let plane = h * w;
    let mut sum = vec![0.0; plane];
    for ch in 0..k {
        for (acc, &v) in sum.iter_mut().zip(&a_hat.data()[ch * plane..(ch + 1) * plane]) {
            *acc += v;
        }
    }
    for v in &mut sum {
        *v = v.max(0.0);
    }
    Ok(SaliencyMap {
        values: Tensor::new(vec![h, w], sum)?,
        normalized: false,
        class_index,
    })
}

/// Min-max normalizes to `[0, 1]` (a constant map becomes all zeros), then
/// resamples bilinearly with aligned corners to `rows x cols`.
pub fn normalize_resize(m: &SaliencyMap, rows: usize, cols: usize) -> Result<SaliencyMap> {
    if rows == 0 || cols == 0 {
        return Err(Error::contract(format!("target grid {rows}x{cols} must be positive")));
    }
    let data = m.values.data();
    let lo = data.iter().copied().fold(Float::INFINITY, Float::min);
    let hi = data.iter().copied().fold(Float::NEG_INFINITY, Float::max);
    let span = hi - lo;
    let norm: Vec<Float> = if span > 0.0 {
        data.iter().map(|&v| (v - lo) / span).collect()
    } else {
        vec![0.0; data.len()]
    };
    let resized = if (m.rows(), m.cols()) == (rows, cols) {
        norm
    } else {
        resize_bilinear(&norm, m.rows(), m.cols(), 1, rows, cols)
    };
    Ok(SaliencyMap {
        values: Tensor::new(vec![rows, cols], resized)?,
        normalized: true,
        class_index: m.class_index,
    })
}

/// The raw map `M^c` for an image, on the target layer's grid.
pub fn aesthetic_saliency(scorer: &Scorer, image: &Tensor) -> Result<SaliencyMap> {
    let cam = layercam_gradients(scorer, image)?;
    let w = saliency_weights(&cam.gradient);
    let a_hat = weighted_features(&w, &cam.activation)?;
    fuse_channels(&a_hat, cam.scores.c)
}

/// 8-bit binary PGM of the normalized map.
pub fn encode_pgm(m: &SaliencyMap) -> Result<Vec<u8>> {
    let m = if m.normalized {
        m.clone()
    } else {
        normalize_resize(m, m.rows(), m.cols())?
    };
    let mut out = format!("P5\n{} {}\n255\n", m.cols(), m.rows()).into_bytes();
    out.extend(m.values.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

pub fn write_pgm(m: &SaliencyMap, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm(m)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::ScorerConfig;
    use crate::tensor::finite_diff_gradient;
    use proptest::prelude::*;

    fn t(shape: &[usize], v: &[Float]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    fn small_scorer(seed: u64) -> Scorer {
        Scorer::new(ScorerConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            num_blocks: 2,
            num_heads: 2,
            num_classes: 3,
            target_layer: 0,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    fn image(seed: u64) -> Tensor {
        Tensor::from_fn(&[8, 8, 3], |i| ((i as Float + seed as Float) * 0.731).sin() * 0.5 + 0.5)
    }

    #[test]
    fn weights_are_relu_of_gradient() {
        let g = t(&[1, 2, 2], &[0.5, -1.0, 2.0, 0.0]);
        let w = saliency_weights(&g);
        assert_eq!(w.data(), &[0.5, 0.0, 2.0, 0.0]);
        assert_eq!(saliency_weights(&w), w);
        assert!(saliency_weights(&g.map(|v| -v.abs() - 1.0)).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_fixture_end_to_end() {
        let a = t(&[1, 2, 2], &[1.0, -2.0, 3.0, 4.0]);
        let g = t(&[1, 2, 2], &[0.5, -1.0, 2.0, 0.0]);
        let a_hat = weighted_features(&saliency_weights(&g), &a).unwrap();
        assert_eq!(a_hat.data(), &[0.5, 0.0, 6.0, 0.0]);
        let m = fuse_channels(&a_hat, 0).unwrap();
        for (x, y) in m.values.data().iter().zip([0.5, 0.0, 6.0, 0.0]) {
            assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn weighting_identities() {
        let a = t(&[2, 1, 2], &[1.0, -2.0, 3.0, 4.0]);
        assert_eq!(weighted_features(&Tensor::ones(&[2, 1, 2]), &a).unwrap(), a);
        assert!(weighted_features(&Tensor::zeros(&[2, 1, 2]), &a).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(weighted_features(&Tensor::ones(&[1, 2, 2]), &a).is_err());
    }

    #[test]
    fn outer_relu_clips_negative_channel_sum() {
        let m = fuse_channels(&t(&[2, 1, 1], &[1.0, -3.0]), 0).unwrap();
        assert_eq!(m.values.data(), &[0.0]);
        assert!(fuse_channels(&Tensor::zeros(&[3, 2, 2]), 0).unwrap().is_zero());
    }

    #[test]
    fn min_max_normalization() {
        let m = SaliencyMap {
            values: t(&[2, 2], &[0.0, 4.0, 2.0, 4.0]),
            normalized: false,
            class_index: 0,
        };
        let n = normalize_resize(&m, 2, 2).unwrap();
        assert_eq!(n.values.data(), &[0.0, 1.0, 0.5, 1.0]);
        assert!(n.normalized);
        let back = normalize_resize(&n, 2, 2).unwrap();
        for (x, y) in back.values.data().iter().zip(n.values.data()) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn zero_map_stays_zero_at_any_size() {
        let m = SaliencyMap {
            values: Tensor::zeros(&[4, 4]),
            normalized: false,
            class_index: 2,
        };
        for (r, c) in [(1, 1), (3, 5), (8, 8)] {
            let n = normalize_resize(&m, r, c).unwrap();
            assert!(n.is_zero());
            assert_eq!(n.values.shape(), &[r, c]);
        }
        assert!(normalize_resize(&m, 0, 2).is_err());
    }

    #[test]
    fn gradients_are_deterministic_and_shaped() {
        let scorer = small_scorer(3);
        let a = layercam_gradients(&scorer, &image(1)).unwrap();
        let b = layercam_gradients(&scorer, &image(1)).unwrap();
        assert_eq!(a.activation, b.activation);
        assert_eq!(a.gradient, b.gradient);
        assert_eq!(a.gradient.shape(), a.activation.shape());
        assert_eq!(a.activation.shape(), &[8, 2, 2]);
    }

    #[cfg(not(feature = "f32"))]
    #[test]
    fn gradient_matches_finite_differences_above_the_tap() {
        let scorer = small_scorer(5);
        let cam = layercam_gradients(&scorer, &image(2)).unwrap();
        let layer = scorer.config.target_layer;
        let c = cam.scores.c;
        let f = |a: &Tensor| {
            let tape = Tape::new();
            let s = Session::new(&tape, &scorer.store);
            let logits = scorer.logits_from_tap(&s, layer, s.constant(a.clone())).unwrap();
            logits.value().data()[c]
        };
        assert!((f(&cam.activation) - cam.scores.y_c).abs() < 1e-12);
        let fd = finite_diff_gradient(f, &cam.activation, 1e-5).unwrap();
        let err = crate::tensor::max_relative_error(&cam.gradient, &fd, 1e-6);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn pgm_layout() {
        let m = SaliencyMap {
            values: t(&[1, 3], &[0.0, 1.0, 3.0]),
            normalized: false,
            class_index: 0,
        };
        let bytes = encode_pgm(&m).unwrap();
        let header = b"P5\n3 1\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 85, 255]);
    }

    proptest! {
        #[test]
        fn non_positive_gradient_gives_zero_map(
            g in prop::collection::vec(-5.0..=0.0f64, 12),
            a in prop::collection::vec(-5.0..5.0f64, 12),
        ) {
            let g = Tensor::new(vec![3, 2, 2], g.into_iter().map(|v| v as Float).collect()).unwrap();
            let a = Tensor::new(vec![3, 2, 2], a.into_iter().map(|v| v as Float).collect()).unwrap();
            let m = fuse_channels(&weighted_features(&saliency_weights(&g), &a).unwrap(), 0).unwrap();
            prop_assert!(m.is_zero());
        }

        #[test]
        fn map_is_non_negative(
            g in prop::collection::vec(-5.0..5.0f64, 12),
            a in prop::collection::vec(-5.0..5.0f64, 12),
            lambda in 0.01..10.0f64,
        ) {
            let g = Tensor::new(vec![3, 2, 2], g.into_iter().map(|v| v as Float).collect()).unwrap();
            let a = Tensor::new(vec![3, 2, 2], a.into_iter().map(|v| v as Float).collect()).unwrap();
            let w = saliency_weights(&g);
            let m = fuse_channels(&weighted_features(&w, &a).unwrap(), 0).unwrap();
            prop_assert!(m.values.data().iter().all(|&v| v >= 0.0));
            let scaled = fuse_channels(&weighted_features(&w, &a.map(|v| v * lambda as Float)).unwrap(), 0).unwrap();
            for (x, y) in m.values.data().iter().zip(scaled.values.data()) {
                prop_assert_eq!(*x > 0.0, *y > 0.0);
            }
        }
    }
}
