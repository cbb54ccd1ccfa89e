//! WebAssembly bindings behind `www/index.html`.
//!
//! Three things run in the page: a degradation explorer that scores bicubic
//! upsampling against the original face, the D/G curves of the three
//! adversarial losses, and a small generator trained live on synthetic faces.

use wasm_bindgen::prelude::*;

use furn_core::config::{TrainConfig, Variant};
use furn_core::data::{bicubic_upsample, make_pair, synth_face, BatchStream, DegradationSpec, ImageTensor};
use furn_core::eval::super_resolve_image;
use furn_core::losses::AdversarialLoss;
use furn_core::metrics::{psnr, ssim};
use furn_core::train::Trainer;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Interleaved 8-bit RGBA, ready for `ImageData`.
pub fn to_rgba(img: &ImageTensor) -> Vec<u8> {
    let n = img.height() * img.width();
    let mut out = vec![255u8; 4 * n];
    for c in 0..3 {
        for (i, v) in img.plane(c).iter().enumerate() {
            out[4 * i + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    out
}

fn parse_loss(kind: &str) -> Result<AdversarialLoss, String> {
    match kind {
        "rals" => Ok(AdversarialLoss::Rals),
        "bce" => Ok(AdversarialLoss::Bce),
        "lsgan" => Ok(AdversarialLoss::Lsgan),
        other => Err(format!("unknown loss `{other}` (expected rals, bce or lsgan)")),
    }
}

#[wasm_bindgen]
pub struct Degradation {
    hr: ImageTensor,
    lr: ImageTensor,
    bicubic: ImageTensor,
    psnr: f64,
    ssim: f64,
}

#[wasm_bindgen]
impl Degradation {
    pub fn hr_size(&self) -> usize {
        self.hr.height()
    }

    pub fn lr_size(&self) -> usize {
        self.lr.height()
    }

    pub fn hr_rgba(&self) -> Vec<u8> {
        to_rgba(&self.hr)
    }

    pub fn lr_rgba(&self) -> Vec<u8> {
        to_rgba(&self.lr)
    }

    pub fn bicubic_rgba(&self) -> Vec<u8> {
        to_rgba(&self.bicubic)
    }

    pub fn psnr(&self) -> f64 {
        self.psnr
    }

    pub fn ssim(&self) -> f64 {
        self.ssim
    }
}

/// Renders synthetic face `index`, degrades it by `scale` and scores the
/// bicubic reconstruction.
#[wasm_bindgen]
pub fn degrade(seed: u64, index: u64, hr_size: usize, scale: usize) -> Result<Degradation, String> {
    let spec = DegradationSpec::new(scale).map_err(err)?;
    let (hr, lr) = make_pair(&synth_face(hr_size, seed, index), &spec).map_err(err)?;
    let hr = hr.quantized();
    let lr = lr.quantized();
    let bicubic = bicubic_upsample(&lr, scale).map_err(err)?.quantized();
    Ok(Degradation {
        psnr: psnr(&bicubic, &hr, 1.0).map_err(err)?,
        ssim: ssim(&bicubic, &hr).map_err(err)?,
        hr,
        lr,
        bicubic,
    })
}

/// Discriminator and generator loss as the fake batch's mean critic value
/// sweeps `[lo, hi]` in `n` points while the real batch stays centred on
/// `real`. Both batches have a ±`spread` pair of members. Returns the D
/// values followed by the G values.
#[wasm_bindgen]
pub fn loss_curves(kind: &str, real: f64, spread: f64, lo: f64, hi: f64, n: usize) -> Result<Vec<f64>, String> {
    let loss = parse_loss(kind)?;
    let c_real = [real - spread, real + spread];
    let mut d = Vec::with_capacity(n);
    let mut g = Vec::with_capacity(n);
    for i in 0..n {
        let x = if n == 1 { lo } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 };
        let c_fake = [x - spread, x + spread];
        d.push(loss.d_objective(&c_real, &c_fake).map_err(err)?.value);
        g.push(loss.g_objective(&c_real, &c_fake).map_err(err)?.value);
    }
    d.extend(g);
    Ok(d)
}

/// A desk-size generator trained in the page on four synthetic faces.
#[wasm_bindgen]
pub struct TinyDemo {
    trainer: Trainer,
    stream: BatchStream,
    hr: ImageTensor,
    lr: ImageTensor,
    bicubic: ImageTensor,
}

#[wasm_bindgen]
impl TinyDemo {
    /// `variant` is one of ridb, ridb-rals, ridb-se, full. The semantic
    /// variants need `hr_size / 4 >= 16`.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, hr_size: usize, variant: &str, learning_rate: f64) -> Result<TinyDemo, String> {
        let mut cfg = TrainConfig::desk().with_variant(variant.parse::<Variant>().map_err(err)?);
        cfg.seed = seed;
        cfg.batch_size = 2;
        cfg.optimizer.learning_rate = learning_rate;
        cfg.backbone.spec = furn_core::backbone::ConvStackSpec::narrow(4, 16);
        cfg.normalize();
        let trainer = Trainer::new(&cfg, hr_size).map_err(err)?;
        let faces: Vec<_> = (0..4).map(|i| synth_face(hr_size, seed, i)).collect();
        let spec = DegradationSpec::new(cfg.scale).map_err(err)?;
        let stream = BatchStream::new(&faces, cfg.batch_size, &spec, seed).map_err(err)?;
        let (hr, lr) = make_pair(&faces[0], &spec).map_err(err)?;
        let bicubic = bicubic_upsample(&lr, cfg.scale).map_err(err)?.quantized();
        Ok(TinyDemo {
            trainer,
            stream,
            hr: hr.quantized(),
            lr,
            bicubic,
        })
    }

    /// Runs `n` training steps. Returns the last record as
    /// `[step, d_loss, g_adv, perceptual, total]`, NaN where absent.
    pub fn train(&mut self, n: u32) -> Result<Vec<f64>, String> {
        let mut last = vec![self.trainer.step() as f64, f64::NAN, f64::NAN, f64::NAN, f64::NAN];
        for _ in 0..n {
            let batch = self.stream.batch_at(self.trainer.step());
            let r = self.trainer.train_step(&batch).map_err(err)?;
            last = vec![
                r.step as f64,
                r.d_loss.unwrap_or(f64::NAN),
                r.g_adv.unwrap_or(f64::NAN),
                r.perceptual,
                r.total,
            ];
        }
        Ok(last)
    }

    pub fn step(&self) -> u64 {
        self.trainer.step()
    }

    pub fn hr_size(&self) -> usize {
        self.hr.height()
    }

    fn sr(&self) -> Result<ImageTensor, String> {
        super_resolve_image(self.trainer.generator(), &self.lr).map_err(err)
    }

    pub fn sr_rgba(&self) -> Result<Vec<u8>, String> {
        Ok(to_rgba(&self.sr()?))
    }

    pub fn bicubic_rgba(&self) -> Vec<u8> {
        to_rgba(&self.bicubic)
    }

    pub fn hr_rgba(&self) -> Vec<u8> {
        to_rgba(&self.hr)
    }

    /// `[sr_psnr, bicubic_psnr]` on the preview face.
    pub fn scores(&self) -> Result<Vec<f64>, String> {
        Ok(vec![
            psnr(&self.sr()?, &self.hr, 1.0).map_err(err)?,
            psnr(&self.bicubic, &self.hr, 1.0).map_err(err)?,
        ])
    }
}
