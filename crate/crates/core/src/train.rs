//! Alternating discriminator/generator training, checkpoints and the loss log.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, SemanticEncoder, WeightSource};
use crate::blob::{self, Dtype};
use crate::config::TrainConfig;
use crate::data::{Batch, BatchStream, Dataset, DegradationSpec, Split};
use crate::discriminator::{Discriminator, TrainPass};
use crate::error::{FurnError, Result};
use crate::generator::Generator;
use crate::graph::{Graph, Gradients, Var};
use crate::losses::perceptual_objective;
use crate::nn::ParamStore;
use crate::optim::Adam;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const LOSS_LOG: &str = "loss_log.json";
const CHECKPOINT_META: &str = "checkpoint.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub d_loss: Option<f64>,
    pub g_adv: Option<f64>,
    pub perceptual: f64,
    pub total: f64,
}

impl LossRecord {
    pub fn all_finite(&self) -> bool {
        [self.d_loss, self.g_adv, Some(self.perceptual), Some(self.total)]
            .into_iter()
            .flatten()
            .all(f64::is_finite)
    }
}

/// Everything randomness depends on after construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub step: u64,
    pub hr_size: usize,
    pub config: TrainConfig,
    pub config_hash: String,
    pub rng: RngState,
    pub generator_hash: String,
    pub discriminator_hash: String,
}

/// Seed for one randomized pass, derived from `(seed, step, pass)` alone.
fn derive_seed(seed: u64, step: u64, pass: u64) -> u64 {
    let mut h = Sha256::new();
    for v in [seed, step, pass] {
        h.update(v.to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

fn gradients_for(grads: &mut Gradients, vars: &[Var]) -> Vec<Option<Tensor>> {
    vars.iter().map(|&v| grads.take(v)).collect()
}

fn column(values: &[f64]) -> Tensor {
    Tensor::from_vec(&[values.len(), 1], values.to_vec()).expect("column shape")
}

struct GeneratorObjective {
    perceptual: f64,
    adversarial: Option<f64>,
    total: f64,
    grads: Vec<Option<Tensor>>,
    passes: Vec<TrainPass>,
}

/// Networks, frozen encoders and optimizer state of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    hr_size: usize,
    generator: Generator,
    discriminator: Discriminator,
    backbone: Arc<Backbone>,
    enc_hr: Option<SemanticEncoder>,
    enc_lr: Option<SemanticEncoder>,
    adam_g: Adam,
    adam_d: Adam,
    step: u64,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, hr_size: usize) -> Result<Self> {
        cfg.validate()?;
        if hr_size % cfg.scale != 0 {
            return Err(FurnError::IndivisibleSize {
                size: hr_size,
                scale: cfg.scale,
            });
        }
        let backbone = Arc::new(Backbone::build(&cfg.backbone.spec, &cfg.backbone.weights)?);
        let (enc_hr, enc_lr) = if cfg.variant.use_semantics() {
            let lr_backbone = match (&cfg.backbone.weights, cfg.backbone.share_encoders) {
                (WeightSource::SeededRandom { seed }, false) => Arc::new(Backbone::build(
                    &cfg.backbone.spec,
                    &WeightSource::SeededRandom { seed: seed.wrapping_add(1) },
                )?),
                _ => Arc::clone(&backbone),
            };
            (
                Some(backbone.semantic_encoder(hr_size)?),
                Some(lr_backbone.semantic_encoder(hr_size / cfg.scale)?),
            )
        } else {
            (None, None)
        };
        let generator = Generator::build(&cfg.generator, derive_seed(cfg.seed, 0, 0))?;
        let discriminator = Discriminator::build(&cfg.discriminator, derive_seed(cfg.seed, 0, 1))?;
        let adam_g = Adam::new(cfg.optimizer, generator.store());
        let adam_d = Adam::new(cfg.optimizer, discriminator.store());
        Ok(Trainer {
            cfg: cfg.clone(),
            hr_size,
            generator,
            discriminator,
            backbone,
            enc_hr,
            enc_lr,
            adam_g,
            adam_d,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn hr_size(&self) -> usize {
        self.hr_size
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn generator_mut(&mut self) -> &mut Generator {
        &mut self.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    pub fn backbone(&self) -> &Arc<Backbone> {
        &self.backbone
    }

    /// Combined hash of generator and discriminator parameters.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.generator.digest());
        h.update(self.discriminator.digest());
        hex::encode(h.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.generator.store().all_finite() && self.discriminator.store().all_finite()
    }

    fn semantics(&self, batch: &Batch) -> Result<(Option<Tensor>, Option<Tensor>)> {
        match (&self.enc_hr, &self.enc_lr) {
            (Some(hr), Some(lr)) => Ok((Some(hr.encode(&batch.hr)?), Some(lr.encode(&batch.lr)?))),
            _ => Ok((None, None)),
        }
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let hr = batch.hr.shape();
        let lr = batch.lr.shape();
        if hr.len() != 4 || lr.len() != 4 || hr[2] != self.hr_size || hr[3] != self.hr_size || lr[2] * self.cfg.scale != hr[2] || lr[3] * self.cfg.scale != hr[3] {
            return Err(FurnError::SizeMismatch {
                expected: format!("HR {0}x{0} with LR at 1/{1}", self.hr_size, self.cfg.scale),
                actual: format!("HR {:?}, LR {:?}", hr, lr),
            });
        }
        Ok(())
    }

    fn non_finite(&self, detail: String) -> FurnError {
        FurnError::NonFiniteLoss {
            step: self.step + 1,
            detail,
        }
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossRecord> {
        self.check_batch(batch)?;
        let (sem_hr, sem_lr) = self.semantics(batch)?;
        let d_loss = if self.cfg.generator_only {
            None
        } else {
            Some(self.update_discriminator(batch, sem_hr.as_ref(), sem_lr.as_ref())?)
        };
        let (perceptual, g_adv, total) = self.update_generator(batch, sem_hr.as_ref(), sem_lr.as_ref())?;
        self.step += 1;
        if !self.all_finite() {
            return Err(FurnError::NonFiniteLoss {
                step: self.step,
                detail: "parameters became non-finite".into(),
            });
        }
        Ok(LossRecord {
            step: self.step,
            d_loss,
            g_adv,
            perceptual,
            total,
        })
    }

    fn update_discriminator(&mut self, batch: &Batch, sem_hr: Option<&Tensor>, sem_lr: Option<&Tensor>) -> Result<f64> {
        let sr = self.generator.generate(&batch.lr)?;
        let mut g = Graph::new();
        let p = self.discriminator.store().bind(&mut g, true);
        let hr = g.constant(batch.hr.clone());
        let sr = g.constant(sr);
        let sh = sem_hr.map(|s| g.constant(s.clone()));
        let sl = sem_lr.map(|s| g.constant(s.clone()));
        let mut pass_real = TrainPass::new(derive_seed(self.cfg.seed, self.step, 2));
        let mut pass_fake = TrainPass::new(derive_seed(self.cfg.seed, self.step, 3));
        let c_real = self.discriminator.forward(&mut g, &p, hr, sh, Some(&mut pass_real))?;
        let c_fake = self.discriminator.forward(&mut g, &p, sr, sl, Some(&mut pass_fake))?;
        let vg = self
            .cfg
            .loss()
            .d_objective(g.value(c_real).data(), g.value(c_fake).data())?;
        if !vg.value.is_finite() {
            return Err(self.non_finite(format!("discriminator loss is {}", vg.value)));
        }
        let loss = g.scalar_fn(&[c_real, c_fake], vg.value, vec![column(&vg.d_real), column(&vg.d_fake)]);
        let mut grads = g.backward(loss);
        let grads = gradients_for(&mut grads, &p);
        self.adam_d.step(self.discriminator.store_mut(), &grads);
        self.discriminator.apply_stats(&pass_real.stats);
        self.discriminator.apply_stats(&pass_fake.stats);
        Ok(vg.value)
    }

    fn update_generator(
        &mut self,
        batch: &Batch,
        sem_hr: Option<&Tensor>,
        sem_lr: Option<&Tensor>,
    ) -> Result<(f64, Option<f64>, f64)> {
        let obj = self.generator_objective(batch, sem_hr, sem_lr)?;
        self.adam_g.step(self.generator.store_mut(), &obj.grads);
        for pass in &obj.passes {
            self.discriminator.apply_stats(&pass.stats);
        }
        Ok((obj.perceptual, obj.adversarial, obj.total))
    }

    fn generator_objective(&self, batch: &Batch, sem_hr: Option<&Tensor>, sem_lr: Option<&Tensor>) -> Result<GeneratorObjective> {
        let tap = &self.cfg.backbone.spec.perceptual_tap;
        let feat_hr = self.backbone.extract_features(&batch.hr, tap)?;
        let mut g = Graph::new();
        let p = self.generator.store().bind(&mut g, true);
        let pb = self.backbone.bind(&mut g);
        let lr = g.constant(batch.lr.clone());
        let sr = self.generator.forward(&mut g, &p, lr)?;
        let feat_sr = self.backbone.extract_features_in(&mut g, &pb, sr, tap)?;
        let (lp, lp_grad) = perceptual_objective(&feat_hr, g.value(feat_sr))?;
        if !lp.is_finite() {
            return Err(self.non_finite(format!("perceptual loss is {lp}")));
        }
        let lp_var = g.scalar_fn(&[feat_sr], lp, vec![lp_grad]);
        let mut total = g.scale(lp_var, self.cfg.weights.lambda_con);
        let mut adversarial = None;
        let mut passes = Vec::new();
        if !self.cfg.generator_only {
            let pd = self.discriminator.store().bind(&mut g, false);
            let mut pass_fake = TrainPass::new(derive_seed(self.cfg.seed, self.step, 4));
            let sl = sem_lr.map(|s| g.constant(s.clone()));
            let c_fake = self.discriminator.forward(&mut g, &pd, sr, sl, Some(&mut pass_fake))?;
            let loss = self.cfg.loss();
            let c_real_vals = if loss.g_uses_real() {
                let hr = g.constant(batch.hr.clone());
                let sh = sem_hr.map(|s| g.constant(s.clone()));
                let mut pass_real = TrainPass::new(derive_seed(self.cfg.seed, self.step, 5));
                let c_real = self.discriminator.forward(&mut g, &pd, hr, sh, Some(&mut pass_real))?;
                passes.push(pass_real);
                g.value(c_real).data().to_vec()
            } else {
                vec![0.0; g.shape(c_fake)[0]]
            };
            passes.push(pass_fake);
            let vg = loss.g_objective(&c_real_vals, g.value(c_fake).data())?;
            if !vg.value.is_finite() {
                return Err(self.non_finite(format!("adversarial generator loss is {}", vg.value)));
            }
            let adv_var = g.scalar_fn(&[c_fake], vg.value, vec![column(&vg.d_fake)]);
            total = g.add_scaled(total, adv_var, self.cfg.weights.lambda_adv);
            adversarial = Some(vg.value);
        }
        let total_value = g.value(total).data()[0];
        if !total_value.is_finite() {
            return Err(self.non_finite(format!("total generator loss is {total_value}")));
        }
        let mut grads = g.backward(total);
        Ok(GeneratorObjective {
            perceptual: lp,
            adversarial,
            total: total_value,
            grads: gradients_for(&mut grads, &p),
            passes,
        })
    }

    /// Total generator objective of the next step on `batch` and its
    /// gradient for every generator store entry, without updating anything.
    pub fn generator_loss_and_grad(&self, batch: &Batch) -> Result<(f64, Vec<Option<Tensor>>)> {
        self.check_batch(batch)?;
        let (sem_hr, sem_lr) = self.semantics(batch)?;
        let obj = self.generator_objective(batch, sem_hr.as_ref(), sem_lr.as_ref())?;
        Ok((obj.total, obj.grads))
    }

    /// ∂(Σ C)/∂E(I^HR) for the batch's real tuples (eval-mode critic).
    pub fn semantic_gradient(&self, batch: &Batch) -> Result<Option<Tensor>> {
        let (sem_hr, _) = self.semantics(batch)?;
        sem_hr.map(|s| self.discriminator.semantic_gradient(&batch.hr, &s)).transpose()
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let mut tensors = BTreeMap::new();
        let mut put = |prefix: &str, map: BTreeMap<String, Tensor>| {
            for (k, v) in map {
                tensors.insert(format!("{prefix}/{k}"), v);
            }
        };
        put("generator", self.generator.store().to_map());
        put("discriminator", self.discriminator.store().to_map());
        put("adam_g", self.adam_g.to_map(self.generator.store()));
        put("adam_d", self.adam_d.to_map(self.discriminator.store()));
        blob::write_tensor_dir(dir, &tensors, Dtype::F64)?;
        let meta = CheckpointMeta {
            version: CHECKPOINT_VERSION,
            step: self.step,
            hr_size: self.hr_size,
            config: self.cfg.clone(),
            config_hash: self.cfg.fingerprint(),
            rng: RngState {
                seed: self.cfg.seed,
                step: self.step,
            },
            generator_hash: self.generator.digest(),
            discriminator_hash: self.discriminator.digest(),
        };
        let path = dir.join(CHECKPOINT_META);
        std::fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| FurnError::io(path.display(), e))
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let meta = read_meta(dir)?;
        let tensors = read_checkpoint_tensors(dir)?;
        let mut t = Trainer::new(&meta.config, meta.hr_size)?;
        load_prefixed(t.generator.store_mut(), &tensors, "generator")?;
        load_prefixed(t.discriminator.store_mut(), &tensors, "discriminator")?;
        t.adam_g.load(t.generator.store(), &strip(&tensors, "adam_g"))?;
        t.adam_d.load(t.discriminator.store(), &strip(&tensors, "adam_d"))?;
        t.step = meta.step;
        Ok(t)
    }
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(CHECKPOINT_META);
    let text = std::fs::read_to_string(&path).map_err(|e| FurnError::io(path.display(), e))?;
    let mut meta: CheckpointMeta = serde_json::from_str(&text)?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(FurnError::Io(format!("unsupported checkpoint version {}", meta.version)));
    }
    meta.config.normalize();
    Ok(meta)
}

fn read_checkpoint_tensors(dir: &Path) -> Result<BTreeMap<String, Tensor>> {
    blob::read_tensor_dir(dir, Dtype::F64).map_err(|e| match e {
        FurnError::MissingWeightFile(p) => FurnError::Io(format!("checkpoint file {} is missing", p.display())),
        other => other,
    })
}

fn strip(map: &BTreeMap<String, Tensor>, prefix: &str) -> BTreeMap<String, Tensor> {
    let prefix = format!("{prefix}/");
    map.iter()
        .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|k| (k.to_string(), v.clone())))
        .collect()
}

fn load_prefixed(store: &mut ParamStore, map: &BTreeMap<String, Tensor>, prefix: &str) -> Result<()> {
    let sub = strip(map, prefix);
    if let Some((name, _, _)) = store.iter().find(|(name, _, _)| !sub.contains_key(*name)) {
        return Err(FurnError::Io(format!("checkpoint is missing tensor `{prefix}/{name}`")));
    }
    store.load(&sub)
}

/// Generator restored from a checkpoint directory, with its metadata.
pub fn load_generator(dir: &Path) -> Result<(Generator, CheckpointMeta)> {
    let meta = read_meta(dir)?;
    let tensors = read_checkpoint_tensors(dir)?;
    let mut generator = Generator::build(&meta.config.generator, 0)?;
    load_prefixed(generator.store_mut(), &tensors, "generator")?;
    Ok((generator, meta))
}

pub fn checkpoint_dir(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("ckpt-{step:06}"))
}

/// Highest-step checkpoint under `out_dir`, if any.
pub fn latest_checkpoint(out_dir: &Path) -> Result<Option<PathBuf>> {
    let Ok(entries) = std::fs::read_dir(out_dir) else {
        return Ok(None);
    };
    let mut best: Option<(u64, PathBuf)> = None;
    for e in entries {
        let e = e.map_err(|e| FurnError::io(out_dir.display(), e))?;
        let name = e.file_name();
        let Some(step) = name.to_str().and_then(|n| n.strip_prefix("ckpt-")).and_then(|s| s.parse::<u64>().ok()) else {
            continue;
        };
        if e.path().join(CHECKPOINT_META).is_file() && best.as_ref().is_none_or(|(b, _)| step > *b) {
            best = Some((step, e.path()));
        }
    }
    Ok(best.map(|(_, p)| p))
}

pub fn read_loss_log(out_dir: &Path) -> Result<Vec<LossRecord>> {
    let path = out_dir.join(LOSS_LOG);
    let text = std::fs::read_to_string(&path).map_err(|e| FurnError::io(path.display(), e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_loss_log(out_dir: &Path, records: &[LossRecord]) -> Result<()> {
    let path = out_dir.join(LOSS_LOG);
    std::fs::write(&path, serde_json::to_string_pretty(records)? + "\n").map_err(|e| FurnError::io(path.display(), e))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub steps: u64,
    pub records: Vec<LossRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub param_hash: String,
    pub config_hash: String,
}

/// Trains on the train split under `data_root`, writing checkpoints and the
/// loss log into `out_dir`. With `resume`, continues from the latest
/// checkpoint there.
pub fn train(cfg: &TrainConfig, data_root: &Path, out_dir: &Path, resume: bool) -> Result<TrainOutcome> {
    train_with(cfg, data_root, out_dir, resume, |_| {})
}

/// [`train`] with a callback per finished step.
pub fn train_with(
    cfg: &TrainConfig,
    data_root: &Path,
    out_dir: &Path,
    resume: bool,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = Dataset::load(data_root, Split::Train)?;
    let hr_size = data.manifest.hr_size;
    let stream = BatchStream::new(&data.images, cfg.batch_size, &DegradationSpec::new(cfg.scale)?, cfg.seed)?;
    std::fs::create_dir_all(out_dir).map_err(|e| FurnError::io(out_dir.display(), e))?;

    let (mut trainer, mut records) = match resume.then(|| latest_checkpoint(out_dir)).transpose()?.flatten() {
        Some(dir) => {
            let mut trainer = Trainer::load_checkpoint(&dir)?;
            if trainer.config().resume_key() != cfg.resume_key() {
                return Err(FurnError::InvalidConfig(format!(
                    "checkpoint {} was written with a different config",
                    dir.display()
                )));
            }
            trainer.cfg = cfg.clone();
            let mut records = read_loss_log(out_dir).unwrap_or_default();
            records.retain(|r| r.step <= trainer.step());
            (trainer, records)
        }
        None => (Trainer::new(cfg, hr_size)?, Vec::new()),
    };
    let mut checkpoints = Vec::new();
    while trainer.step() < cfg.steps {
        let batch = stream.batch_at(trainer.step());
        let record = trainer.train_step(&batch)?;
        on_step(&record);
        records.push(record);
        let step = trainer.step();
        if step % cfg.checkpoint_every == 0 || step == cfg.steps {
            let dir = checkpoint_dir(out_dir, step);
            trainer.save_checkpoint(&dir)?;
            write_loss_log(out_dir, &records)?;
            checkpoints.push(dir);
        }
    }
    if checkpoints.is_empty() && trainer.step() == 0 {
        let dir = checkpoint_dir(out_dir, 0);
        trainer.save_checkpoint(&dir)?;
        write_loss_log(out_dir, &records)?;
        checkpoints.push(dir);
    }
    Ok(TrainOutcome {
        steps: trainer.step(),
        records,
        checkpoints,
        param_hash: trainer.param_hash(),
        config_hash: cfg.fingerprint(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use crate::data::synth_face;

    fn batch(cfg: &TrainConfig, hr: usize, n: usize) -> Batch {
        let imgs: Vec<_> = (0..n).map(|i| synth_face(hr, 7, i as u64)).collect();
        BatchStream::new(&imgs, n, &DegradationSpec::new(cfg.scale).unwrap(), 1).unwrap().batch_at(0)
    }

    #[test]
    fn derived_seeds_differ_per_pass_and_step() {
        assert_ne!(derive_seed(1, 0, 2), derive_seed(1, 0, 3));
        assert_ne!(derive_seed(1, 0, 2), derive_seed(1, 1, 2));
        assert_eq!(derive_seed(1, 5, 2), derive_seed(1, 5, 2));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut cfg = TrainConfig::desk();
        cfg.optimizer.learning_rate = 0.0;
        let mut t = Trainer::new(&cfg, 64).unwrap();
        let g0 = t.generator().digest();
        let rec = t.train_step(&batch(&cfg, 64, 2)).unwrap();
        assert!(rec.all_finite() && rec.d_loss.is_some() && rec.g_adv.is_some());
        assert_eq!(t.generator().digest(), g0);
    }

    #[test]
    fn every_variant_steps() {
        for v in Variant::ALL {
            let cfg = TrainConfig::desk().with_variant(v);
            let mut t = Trainer::new(&cfg, 64).unwrap();
            let before = t.param_hash();
            let rec = t.train_step(&batch(&cfg, 64, 2)).unwrap();
            assert!(rec.all_finite(), "{v}: {rec:?}");
            assert_ne!(t.param_hash(), before);
        }
    }

    #[test]
    fn rejects_mismatched_batches() {
        let cfg = TrainConfig::desk();
        let mut t = Trainer::new(&cfg, 64).unwrap();
        let b = batch(&cfg, 32, 2);
        assert!(matches!(t.train_step(&b), Err(FurnError::SizeMismatch { .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = TrainConfig::desk();
        let mut t = Trainer::new(&cfg, 64).unwrap();
        t.train_step(&batch(&cfg, 64, 2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        t.save_checkpoint(dir.path()).unwrap();
        let back = Trainer::load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.param_hash(), t.param_hash());
        assert_eq!(back.step(), 1);
        assert_eq!(back.adam_g, t.adam_g);
    }
}
