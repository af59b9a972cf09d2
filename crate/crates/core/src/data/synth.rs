//! Procedural stand-in corpus.
//!
//! Each image is a tinted, textured disc (the tint encodes the imaging
//! modality) carrying one to three coloured blobs inside one quadrant; the
//! blob colour encodes the finding. Keywords name modality, finding,
//! quadrant, eye and sex; the description repeats all of them plus the blob
//! count. Eye and sex are therefore only recoverable from the keywords, and
//! the blob count only from the image.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::corpus::{write_corpus, CorpusRecord};
use super::image::{rgb_to_tensor, write_ppm};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MODALITIES: [(&str, [f64; 3]); 3] = [
    ("color fundus", [0.78, 0.36, 0.18]),
    ("fluorescein angiography", [0.42, 0.42, 0.42]),
    ("optical coherence tomography", [0.16, 0.22, 0.50]),
];

const FINDINGS: [(&str, [f64; 3]); 4] = [
    ("drusen", [0.98, 0.92, 0.25]),
    ("hemorrhage", [0.35, 0.0, 0.02]),
    ("exudates", [1.0, 1.0, 1.0]),
    ("neovascularization", [0.05, 0.85, 0.25]),
];

/// Top-left, top-right, bottom-left, bottom-right.
const QUADRANTS: [&str; 4] = [
    "superior temporal",
    "superior nasal",
    "inferior temporal",
    "inferior nasal",
];
const EYES: [&str; 2] = ["left", "right"];
const SEXES: [&str; 2] = ["male", "female"];
const COUNTS: [&str; 3] = ["one", "two", "three"];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub size: usize,
    /// Row-major 8-bit RGB.
    pub pixels: Vec<u8>,
    pub keywords: String,
    pub description: String,
}

impl SyntheticSample {
    pub fn image(&self) -> Tensor {
        rgb_to_tensor(self.size, self.size, &self.pixels).expect("pixel buffer matches size")
    }
}

/// Renders `n` samples; sample `i` depends only on `(seed, i, image_size)`.
pub fn generate_synthetic_corpus(
    n: usize,
    seed: u64,
    image_size: usize,
) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        return Err(Error::Contract(
            "synthetic corpus needs at least one record".into(),
        ));
    }
    if image_size < 16 {
        return Err(Error::Contract(format!(
            "image size {image_size} is below 16 pixels"
        )));
    }
    Ok((0..n).map(|i| render(seed, i as u64, image_size)).collect())
}

fn render(seed: u64, index: u64, size: usize) -> SyntheticSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let (modality, tint) = MODALITIES[rng.gen_range(0..MODALITIES.len())];
    let (finding, colour) = FINDINGS[rng.gen_range(0..FINDINGS.len())];
    let quadrant = rng.gen_range(0..QUADRANTS.len());
    let eye = EYES[rng.gen_range(0..EYES.len())];
    let sex = SEXES[rng.gen_range(0..SEXES.len())];
    let count = rng.gen_range(1..=3usize);

    let s = size as f64;
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut img = vec![0.0f64; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = ((x as f64 + 0.5) / s - 0.5, (y as f64 + 0.5) / s - 0.5);
            let r = (dx * dx + dy * dy).sqrt();
            let disc = if r < 0.48 { 1.0 - 0.6 * r } else { 0.08 };
            let texture = 0.04 * ((x as f64 * 0.7 + phase).sin() + (y as f64 * 0.5 - phase).cos());
            for c in 0..3 {
                let noise = rng.gen_range(-0.04..0.04);
                img[(y * size + x) * 3 + c] = tint[c] * disc + texture + noise;
            }
        }
    }

    let half = s / 2.0;
    let (qx, qy) = ((quadrant % 2) as f64 * half, (quadrant / 2) as f64 * half);
    for _ in 0..count {
        let radius = rng.gen_range(0.05..0.09) * s;
        let margin = radius + 1.0;
        let cx = qx + rng.gen_range(margin..half - margin);
        let cy = qy + rng.gen_range(margin..half - margin);
        for y in 0..size {
            for x in 0..size {
                let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                let alpha = (1.0 - d / radius).clamp(0.0, 1.0).sqrt();
                if alpha > 0.0 {
                    for c in 0..3 {
                        let p = &mut img[(y * size + x) * 3 + c];
                        *p = (1.0 - alpha) * *p + alpha * colour[c];
                    }
                }
            }
        }
    }

    let pixels = img
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let noun = if count == 1 { "lesion" } else { "lesions" };
    SyntheticSample {
        size,
        pixels,
        keywords: format!("{modality}, {finding}, {}, {eye} eye, {sex}", QUADRANTS[quadrant]),
        description: format!(
            "{modality} image of the {eye} eye of a {sex} patient showing {} {finding} {noun} in the {} quadrant",
            COUNTS[count - 1],
            QUADRANTS[quadrant]
        ),
    }
}

/// Writes `images/NNNNN.ppm` plus `corpus.tsv` under `dir` and returns the
/// corpus path.
pub fn write_synthetic_corpus(dir: &Path, samples: &[SyntheticSample]) -> Result<PathBuf> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let path = images.join(format!("{i:05}.ppm"));
        write_ppm(&path, s.size, s.size, &s.pixels)?;
        records.push(CorpusRecord {
            image: path,
            keywords: s.keywords.clone(),
            description: s.description.clone(),
        });
    }
    let corpus = dir.join("corpus.tsv");
    write_corpus(&corpus, &records)?;
    Ok(corpus)
}
