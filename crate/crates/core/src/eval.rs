//! Checkpoint evaluation and single-image inference.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Variant;
use crate::data::{bicubic_upsample, load_image, make_pair, Dataset, DegradationSpec, ImageTensor, Split};
use crate::error::{FurnError, Result};
use crate::generator::Generator;
use crate::metrics::{psnr, ssim};
use crate::train::load_generator;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub path: String,
    pub psnr: f64,
    pub ssim: f64,
    pub bicubic_psnr: f64,
    pub bicubic_ssim: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanScore {
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: Variant,
    pub scale: usize,
    pub split: Split,
    pub step: u64,
    pub count: usize,
    pub model: MeanScore,
    pub bicubic: MeanScore,
    /// HR scored against itself; must read 100 dB / 1.0.
    pub sanity: MeanScore,
    pub images: Vec<ImageScore>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Clamped, 8-bit quantized super-resolution of one LR image.
pub fn super_resolve_image(generator: &Generator, lr: &ImageTensor) -> Result<ImageTensor> {
    let sr = generator.generate(&lr.to_tensor())?;
    Ok(ImageTensor::from_tensor(&sr)?.clamped().quantized())
}

fn mean(scores: &[ImageScore], f: impl Fn(&ImageScore) -> f64) -> f64 {
    scores.iter().map(f).sum::<f64>() / scores.len() as f64
}

/// Scores `generator` on HR images degraded at its scale.
pub fn evaluate_images(generator: &Generator, images: &[(String, ImageTensor)]) -> Result<(Vec<ImageScore>, MeanScore)> {
    let spec = DegradationSpec::new(generator.config().scale)?;
    let mut scores = Vec::with_capacity(images.len());
    let mut sanity = MeanScore { psnr: 0.0, ssim: 0.0 };
    for (path, hr) in images {
        let (hr, lr) = make_pair(hr, &spec)?;
        let hr = hr.quantized();
        let sr = super_resolve_image(generator, &lr)?;
        let bic = bicubic_upsample(&lr, spec.scale)?.quantized();
        scores.push(ImageScore {
            path: path.clone(),
            psnr: psnr(&sr, &hr, 1.0)?,
            ssim: ssim(&sr, &hr)?,
            bicubic_psnr: psnr(&bic, &hr, 1.0)?,
            bicubic_ssim: ssim(&bic, &hr)?,
        });
        sanity.psnr += psnr(&hr, &hr, 1.0)? / images.len() as f64;
        sanity.ssim += ssim(&hr, &hr)? / images.len() as f64;
    }
    Ok((scores, sanity))
}

/// Evaluates the checkpoint in `checkpoint` on `split` of the dataset at
/// `data_root`.
pub fn evaluate(checkpoint: &Path, data_root: &Path, split: Split) -> Result<MetricsReport> {
    let (generator, meta) = load_generator(checkpoint)?;
    let data = Dataset::load(data_root, split)?;
    let images: Vec<_> = data.paths.iter().cloned().zip(data.images.iter().cloned()).collect();
    let (scores, sanity) = evaluate_images(&generator, &images)?;
    Ok(MetricsReport {
        variant: meta.config.variant,
        scale: meta.config.scale,
        split,
        step: meta.step,
        count: scores.len(),
        model: MeanScore {
            psnr: mean(&scores, |s| s.psnr),
            ssim: mean(&scores, |s| s.ssim),
        },
        bicubic: MeanScore {
            psnr: mean(&scores, |s| s.bicubic_psnr),
            ssim: mean(&scores, |s| s.bicubic_ssim),
        },
        sanity,
        images: scores,
    })
}

/// Reads an LR image, super-resolves it with the checkpoint's generator and
/// writes the result as PNG. Returns the output size.
pub fn super_resolve(checkpoint: &Path, input: &Path, output: &Path) -> Result<(usize, usize)> {
    let (generator, _) = load_generator(checkpoint)?;
    let lr = load_image(input)?;
    if lr.height() < 4 || lr.width() < 4 {
        return Err(FurnError::SizeMismatch {
            expected: "an input of at least 4x4 pixels".into(),
            actual: format!("{}x{}", lr.height(), lr.width()),
        });
    }
    let sr = super_resolve_image(&generator, &lr)?;
    sr.save_png(output)?;
    Ok((sr.height(), sr.width()))
}
