//! Separable bicubic resampling (Keys kernel) used for HR→LR degradation and
//! for the bicubic-upsampling baseline.

use serde::{Deserialize, Serialize};

use crate::data::image::ImageTensor;
use crate::error::{FurnError, Result};

pub const DEFAULT_CUBIC_A: f64 = -0.5;

/// How an HR image is degraded to its LR counterpart.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub scale: usize,
    /// Keys kernel parameter.
    pub a: f64,
    /// Widen the kernel by the scale factor when shrinking.
    pub antialias: bool,
}

impl DegradationSpec {
    pub fn new(scale: usize) -> Result<Self> {
        if scale != 4 && scale != 8 {
            return Err(FurnError::InvalidConfig(format!("degradation scale must be 4 or 8, got {scale}")));
        }
        Ok(DegradationSpec {
            scale,
            a: DEFAULT_CUBIC_A,
            antialias: true,
        })
    }

    /// Kernel settings for plain resizing, where no scale factor applies.
    pub fn resize() -> Self {
        DegradationSpec {
            scale: 1,
            a: DEFAULT_CUBIC_A,
            antialias: true,
        }
    }
}

/// Keys cubic convolution kernel.
pub fn cubic_kernel(x: f64, a: f64) -> f64 {
    let t = x.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        (((t - 5.0) * t + 8.0) * t - 4.0) * a
    } else {
        0.0
    }
}

/// Taps contributing to one output sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Contribution {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Per-output-position taps for resampling a line of `in_len` samples to
/// `out_len`. Out-of-range taps are folded onto the nearest edge sample and
/// each weight set is normalized to sum to one.
pub fn contributions(in_len: usize, out_len: usize, a: f64, antialias: bool) -> Vec<Contribution> {
    let scale = in_len as f64 / out_len as f64;
    let support = if antialias && scale > 1.0 { scale } else { 1.0 };
    let radius = 2.0 * support;
    (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale - 0.5;
            let lo = (center - radius).floor() as isize;
            let hi = (center + radius).ceil() as isize;
            let mut indices: Vec<usize> = Vec::new();
            let mut weights: Vec<f64> = Vec::new();
            for j in lo..=hi {
                let w = cubic_kernel((j as f64 - center) / support, a);
                if w == 0.0 {
                    continue;
                }
                let idx = j.clamp(0, in_len as isize - 1) as usize;
                match indices.iter().position(|&k| k == idx) {
                    Some(p) => weights[p] += w,
                    None => {
                        indices.push(idx);
                        weights.push(w);
                    }
                }
            }
            let total: f64 = weights.iter().sum();
            for w in &mut weights {
                *w /= total;
            }
            Contribution { indices, weights }
        })
        .collect()
}

/// Resamples a single line without clamping the result.
pub fn resample_line(src: &[f64], out_len: usize, spec: &DegradationSpec) -> Vec<f64> {
    contributions(src.len(), out_len, spec.a, spec.antialias)
        .iter()
        .map(|c| c.indices.iter().zip(&c.weights).map(|(&i, w)| src[i] * w).sum())
        .collect()
}

/// Separable bicubic resize of every channel, clamped to `[0, 1]`.
pub fn bicubic_resample(img: &ImageTensor, out_h: usize, out_w: usize, spec: &DegradationSpec) -> Result<ImageTensor> {
    if out_h < 4 || out_w < 4 {
        return Err(FurnError::InvalidDims {
            height: out_h,
            width: out_w,
        });
    }
    let (h, w) = (img.height(), img.width());
    let cols = contributions(w, out_w, spec.a, spec.antialias);
    let rows = contributions(h, out_h, spec.a, spec.antialias);
    let mut out = Vec::with_capacity(3 * out_h * out_w);
    let mut tmp = vec![0.0; h * out_w];
    for c in 0..3 {
        let plane = img.plane(c);
        for y in 0..h {
            let line = &plane[y * w..(y + 1) * w];
            for (x, con) in cols.iter().enumerate() {
                tmp[y * out_w + x] = con.indices.iter().zip(&con.weights).map(|(&i, wt)| line[i] * wt).sum();
            }
        }
        for con in &rows {
            for x in 0..out_w {
                let v: f64 = con.indices.iter().zip(&con.weights).map(|(&i, wt)| tmp[i * out_w + x] * wt).sum();
                out.push(v.clamp(0.0, 1.0));
            }
        }
    }
    ImageTensor::new(out_h, out_w, out)
}

/// `(hr, lr)` where `lr` is the bicubic downsample of `hr` by `spec.scale`.
pub fn make_pair(img: &ImageTensor, spec: &DegradationSpec) -> Result<(ImageTensor, ImageTensor)> {
    let (h, w) = (img.height(), img.width());
    for side in [h, w] {
        if side % spec.scale != 0 {
            return Err(FurnError::IndivisibleSize {
                size: side,
                scale: spec.scale,
            });
        }
    }
    let lr = bicubic_resample(img, h / spec.scale, w / spec.scale, spec)?;
    Ok((img.clone(), lr))
}

/// Bicubic upsampling of an LR image back to `scale`× its size.
pub fn bicubic_upsample(lr: &ImageTensor, scale: usize) -> Result<ImageTensor> {
    bicubic_resample(lr, lr.height() * scale, lr.width() * scale, &DegradationSpec::resize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_values() {
        assert_eq!(cubic_kernel(0.0, -0.5), 1.0);
        assert_eq!(cubic_kernel(1.0, -0.5), 0.0);
        assert_eq!(cubic_kernel(2.0, -0.5), 0.0);
        assert!((cubic_kernel(0.5, -0.5) - 0.5625).abs() < 1e-15);
        assert!((cubic_kernel(1.5, -0.5) + 0.0625).abs() < 1e-15);
    }

    #[test]
    fn weights_sum_to_one() {
        for (i, o) in [(256, 64), (64, 256), (37, 11), (16, 32), (300, 256), (10, 10)] {
            for aa in [false, true] {
                for c in contributions(i, o, -0.5, aa) {
                    assert!((c.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn ramp_upsample_matches_direct_convolution() {
        let src: Vec<f64> = (0..16).map(|i| 0.05 + 0.05 * i as f64).collect();
        let spec = DegradationSpec::resize();
        let up = resample_line(&src, 32, &spec);
        for (i, v) in up.iter().enumerate() {
            let x = (i as f64 + 0.5) / 2.0 - 0.5;
            let base = x.floor() as isize;
            let direct: f64 = (base - 1..=base + 2)
                .map(|j| {
                    let k = j.clamp(0, 15) as usize;
                    cubic_kernel(x - j as f64, -0.5) * src[k]
                })
                .sum();
            assert!((v - direct).abs() < 1e-6, "sample {i}: {v} vs {direct}");
        }
    }

    #[test]
    fn constants_survive_resampling() {
        let img = ImageTensor::constant(64, 64, 0.3);
        let spec = DegradationSpec::new(4).unwrap();
        let (_, lr) = make_pair(&img, &spec).unwrap();
        assert_eq!((lr.height(), lr.width()), (16, 16));
        assert!(lr.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
        let back = bicubic_upsample(&lr, 4).unwrap();
        assert!(back.data().iter().all(|v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn pair_geometry() {
        let img = ImageTensor::constant(256, 256, 0.1);
        let (_, lr4) = make_pair(&img, &DegradationSpec::new(4).unwrap()).unwrap();
        assert_eq!((lr4.height(), lr4.width()), (64, 64));
        let (_, lr8) = make_pair(&img, &DegradationSpec::new(8).unwrap()).unwrap();
        assert_eq!((lr8.height(), lr8.width()), (32, 32));
    }

    #[test]
    fn invalid_inputs() {
        let img = ImageTensor::constant(20, 20, 0.1);
        assert!(matches!(
            make_pair(&img, &DegradationSpec::new(8).unwrap()),
            Err(FurnError::IndivisibleSize { size: 20, scale: 8 })
        ));
        assert!(matches!(
            bicubic_resample(&img, 3, 10, &DegradationSpec::resize()),
            Err(FurnError::InvalidDims { .. })
        ));
        assert!(DegradationSpec::new(3).is_err());
    }
}
