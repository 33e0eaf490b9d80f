//! Procedural "aesthetic style" corpus.
//!
//! Each class combines a palette (warm/cool), a composition (centered
//! subject / subject on a rule-of-thirds point) and a lighting style
//! (bright / low-key with vignette). Captions are filled from templates
//! whose attribute words follow the class, plus the subject shape, which
//! varies per image.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Record, Split};
use crate::error::{Error, Result};
use crate::image_ops::encode_ppm;
use crate::tensor::{Float, Tensor};

pub const DEFAULT_PROMPT: &str = "Comment on this image from an aesthetic perspective.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Palette {
    Warm,
    Cool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Composition {
    Centered,
    RuleOfThirds,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Lighting {
    Bright,
    LowKey,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleClass {
    pub name: String,
    pub palette: Palette,
    pub composition: Composition,
    pub lighting: Lighting,
}

impl StyleClass {
    fn slots(&self) -> [(&'static str, &'static str); 7] {
        let (palette, tones) = match self.palette {
            Palette::Warm => ("warm", "orange"),
            Palette::Cool => ("cool", "blue"),
        };
        let (composition, placement) = match self.composition {
            Composition::Centered => ("centered", "in the middle of the frame"),
            Composition::RuleOfThirds => ("balanced", "on a third of the frame"),
        };
        let (light, mood, focus) = match self.lighting {
            Lighting::Bright => ("bright", "cheerful", "sharp"),
            Lighting::LowKey => ("dim", "moody", "soft"),
        };
        [
            ("{palette}", palette),
            ("{tones}", tones),
            ("{composition}", composition),
            ("{placement}", placement),
            ("{light}", light),
            ("{mood}", mood),
            ("{focus}", focus),
        ]
    }

    pub fn fill(&self, template: &str, shape: &str) -> String {
        let mut out = template.replace("{shape}", shape);
        for (k, v) in self.slots() {
            out = out.replace(k, v);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub num_images: usize,
    pub train_ratio: f64,
    pub max_captions: usize,
    pub classes: Vec<StyleClass>,
    pub templates: Vec<String>,
    pub shapes: Vec<String>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let mut classes = Vec::new();
        for palette in [Palette::Warm, Palette::Cool] {
            for composition in [Composition::Centered, Composition::RuleOfThirds] {
                for lighting in [Lighting::Bright, Lighting::LowKey] {
                    let name = format!(
                        "{}-{}-{}",
                        serde_json::to_value(palette).unwrap().as_str().unwrap(),
                        serde_json::to_value(composition).unwrap().as_str().unwrap(),
                        serde_json::to_value(lighting).unwrap().as_str().unwrap()
                    );
                    classes.push(StyleClass {
                        name,
                        palette,
                        composition,
                        lighting,
                    });
                }
            }
        }
        SyntheticSpec {
            image_size: 32,
            num_images: 64,
            train_ratio: 0.8,
            max_captions: 3,
            classes,
            templates: vec![
                "the {palette} {tones} colors and {light} light give a {mood} mood , with the {shape} {placement} .".into(),
                "a {composition} composition : the {shape} sits {placement} , {focus} focus and {palette} tones .".into(),
                "{light} lighting and {palette} colors , the {focus} {shape} is placed {placement} .".into(),
            ],
            shapes: vec!["circle".into(), "square".into()],
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let c = self.classes.len();
        if c == 0 || self.templates.is_empty() || self.shapes.is_empty() {
            return Err(Error::Validation("classes, templates and shapes must be non-empty".into()));
        }
        if !(0.0 < self.train_ratio && self.train_ratio < 1.0) {
            return Err(Error::Validation(format!("train_ratio {} must lie in (0, 1)", self.train_ratio)));
        }
        let (train, test) = self.split_sizes();
        if train < c || test < c {
            return Err(Error::Validation(format!(
                "{} images split {train}/{test} cannot place all {c} classes in both splits",
                self.num_images
            )));
        }
        if self.image_size < 8 || self.max_captions == 0 {
            return Err(Error::Validation("image_size must be >= 8 and max_captions >= 1".into()));
        }
        Ok(())
    }

    pub fn split_sizes(&self) -> (usize, usize) {
        let train = (self.train_ratio * self.num_images as f64).round() as usize;
        (train, self.num_images - train)
    }

    /// Every word the caption templates can produce.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut words = Vec::new();
        for class in &self.classes {
            for shape in &self.shapes {
                for t in &self.templates {
                    words.extend(crate::text::tokenize(&class.fill(t, shape)));
                }
            }
        }
        words.sort();
        words.dedup();
        words
    }
}

/// One generated image with its captions.
#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub image: Tensor,
    pub label: usize,
    pub shape: String,
    pub captions: Vec<String>,
}

fn palette_colors<R: Rng + ?Sized>(p: Palette, rng: &mut R) -> [[Float; 3]; 3] {
    let base = match p {
        Palette::Warm => [[0.95, 0.55, 0.2], [0.8, 0.25, 0.15], [1.0, 0.9, 0.55]],
        Palette::Cool => [[0.2, 0.45, 0.85], [0.1, 0.6, 0.65], [0.75, 0.9, 1.0]],
    };
    base.map(|rgb| rgb.map(|v: Float| (v + rng.random_range(-0.06..0.06)).clamp(0.0, 1.0)))
}

/// Renders one image of `class` at `size x size`.
pub fn render<R: Rng + ?Sized>(class: &StyleClass, shape: &str, size: usize, rng: &mut R) -> Tensor {
    let [top, bottom, subject] = palette_colors(class.palette, rng);
    let s = size as Float;
    let (cy, cx) = match class.composition {
        Composition::Centered => (s / 2.0, s / 2.0),
        Composition::RuleOfThirds => {
            let a = [s / 3.0, 2.0 * s / 3.0];
            (a[rng.random_range(0..2)], a[rng.random_range(0..2)])
        }
    };
    let cy = cy + rng.random_range(-0.05..0.05) * s;
    let cx = cx + rng.random_range(-0.05..0.05) * s;
    let radius = s * rng.random_range(0.14..0.2);
    let (gain, vignette) = match class.lighting {
        Lighting::Bright => (1.0, 0.0),
        Lighting::LowKey => (0.55, 1.1),
    };
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as Float + 0.5, x as Float + 0.5);
            let t = fy / s;
            let inside = match shape {
                "square" => (fy - cy).abs() <= radius && (fx - cx).abs() <= radius,
                _ => (fy - cy).powi(2) + (fx - cx).powi(2) <= radius * radius,
            };
            let dist = ((fy / s - 0.5).powi(2) + (fx / s - 0.5).powi(2)).sqrt() / 0.7071;
            let light = gain * (1.0 - vignette * dist * dist).max(0.05);
            for ch in 0..3 {
                let base = if inside {
                    subject[ch]
                } else {
                    top[ch] * (1.0 - t) + bottom[ch] * t
                };
                let noise = rng.random_range(-0.03..0.03);
                data.push((base * light + noise).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(vec![size, size, 3], data).expect("sized buffer")
}

/// Generates the corpus in memory. Classes cycle so counts differ by at most one.
pub fn generate_samples(spec: &SyntheticSpec, seed: u64) -> Result<Vec<SyntheticSample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(spec.num_images);
    for i in 0..spec.num_images {
        let label = i % spec.classes.len();
        let class = &spec.classes[label];
        let shape = spec.shapes[rng.random_range(0..spec.shapes.len())].clone();
        let image = render(class, &shape, spec.image_size, &mut rng);
        let k = rng.random_range(1..=spec.max_captions.min(spec.templates.len()));
        let mut picks: Vec<usize> = (0..spec.templates.len()).collect();
        picks.shuffle(&mut rng);
        let captions = picks[..k]
            .iter()
            .map(|&t| class.fill(&spec.templates[t], &shape))
            .collect();
        out.push(SyntheticSample {
            image,
            label,
            shape,
            captions,
        });
    }
    Ok(out)
}

/// Stratified split: classes are interleaved in a seed-shuffled round robin
/// and the first `test` entries form the test split.
pub fn stratified_split(labels: &[usize], test_count: usize, seed: u64) -> Vec<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    for m in &mut members {
        m.shuffle(&mut rng);
    }
    let mut order = Vec::with_capacity(labels.len());
    let depth = members.iter().map(Vec::len).max().unwrap_or(0);
    for r in 0..depth {
        for m in &members {
            if let Some(&i) = m.get(r) {
                order.push(i);
            }
        }
    }
    let mut split = vec![Split::Train; labels.len()];
    for &i in order.iter().take(test_count) {
        split[i] = Split::Test;
    }
    split
}

const SEED_SALT: u64 = 0x5eed_5911;

/// Writes `images/NNNN.ppm` and `captions.jsonl` under `dir`.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec, seed: u64, dir: &Path) -> Result<Vec<Record>> {
    let samples = generate_samples(spec, seed)?;
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let (_, test) = spec.split_sizes();
    let splits = stratified_split(&labels, test, seed ^ SEED_SALT);
    let mut records = Vec::with_capacity(samples.len());
    let mut index = String::new();
    for (i, (sample, split)) in samples.iter().zip(splits).enumerate() {
        let rel = format!("images/{i:04}.ppm");
        let path = dir.join(&rel);
        fs::write(&path, encode_ppm(&sample.image)?).map_err(|e| Error::io(&path, e))?;
        let record = Record {
            image: rel,
            captions: sample.captions.clone(),
            prompt: None,
            label: Some(sample.label),
            split: Some(split),
        };
        index.push_str(&serde_json::to_string(&record)?);
        index.push('\n');
        records.push(record);
    }
    let index_path = dir.join("captions.jsonl");
    fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))?;
    let spec_path = dir.join("synthetic_spec.json");
    fs::write(&spec_path, serde_json::to_string_pretty(spec)?).map_err(|e| Error::io(&spec_path, e))?;
    Ok(records)
}
