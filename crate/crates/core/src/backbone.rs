//! Frozen VGG-style convolutional stack shared by the semantic encoder and the
//! perceptual feature extractor.
//!
//! Layer ids follow the usual VGG naming: `conv{stage}_{k}` is the raw output
//! of the k-th convolution in a stage (before its rectifier), `relu{stage}_{k}`
//! the rectified output, and `pool{stage}` the stage's 2×2 max-pool. Stages
//! and convolutions are 1-based.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::blob::{self, Dtype};
use crate::error::{FurnError, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv, Init, ParamStore, LEAKY_SLOPE};
use crate::tensor::Tensor;

/// Spatial size of every semantic map.
pub const SEMANTIC_GRID: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub convs: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStackSpec {
    pub stages: Vec<StageSpec>,
    /// Channel count of the projected semantic map.
    pub semantic_channels: usize,
    /// Layer id tapped for the perceptual loss.
    pub perceptual_tap: String,
}

impl ConvStackSpec {
    /// VGG-19 convolutional body.
    pub fn vgg19() -> Self {
        let stages = [(2, 64), (2, 128), (4, 256), (4, 512), (4, 512)]
            .map(|(convs, channels)| StageSpec { convs, channels })
            .to_vec();
        ConvStackSpec {
            stages,
            semantic_channels: 256,
            perceptual_tap: "conv3_3".into(),
        }
    }

    /// VGG-19 layout at reduced width for desk-scale runs.
    pub fn narrow(width: usize, semantic_channels: usize) -> Self {
        let stages = [(2, 1), (2, 2), (4, 4), (4, 4), (4, 4)]
            .map(|(convs, mult)| StageSpec {
                convs,
                channels: width * mult,
            })
            .to_vec();
        ConvStackSpec {
            stages,
            semantic_channels,
            perceptual_tap: "conv3_3".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.stages.iter().any(|s| s.convs == 0 || s.channels == 0) {
            return Err(FurnError::InvalidConfig("every backbone stage needs convolutions and channels".into()));
        }
        if self.semantic_channels == 0 {
            return Err(FurnError::InvalidConfig("semantic channels must be positive".into()));
        }
        self.parse_tap(&self.perceptual_tap)
            .map_err(|_| FurnError::ShapeMismatch(format!("tap `{}` does not exist in the stack", self.perceptual_tap)))?;
        Ok(())
    }

    /// Resolves a layer id against this stack.
    pub fn parse_tap(&self, id: &str) -> Result<Tap> {
        let unknown = || FurnError::UnknownTap(id.to_string());
        let (kind, rest) = if let Some(r) = id.strip_prefix("conv") {
            (TapKind::PreActivation, r)
        } else if let Some(r) = id.strip_prefix("relu") {
            (TapKind::PostActivation, r)
        } else if let Some(r) = id.strip_prefix("pool") {
            let stage: usize = r.parse().map_err(|_| unknown())?;
            if stage == 0 || stage > self.stages.len() {
                return Err(unknown());
            }
            return Ok(Tap {
                stage: stage - 1,
                conv: self.stages[stage - 1].convs - 1,
                kind: TapKind::Pooled,
            });
        } else {
            return Err(unknown());
        };
        let (s, c) = rest.split_once('_').ok_or_else(unknown)?;
        let stage: usize = s.parse().map_err(|_| unknown())?;
        let conv: usize = c.parse().map_err(|_| unknown())?;
        if stage == 0 || stage > self.stages.len() || conv == 0 || conv > self.stages[stage - 1].convs {
            return Err(unknown());
        }
        Ok(Tap {
            stage: stage - 1,
            conv: conv - 1,
            kind,
        })
    }

    /// Channels produced at a tap.
    pub fn tap_channels(&self, tap: &Tap) -> usize {
        self.stages[tap.stage].channels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TapKind {
    PreActivation,
    PostActivation,
    Pooled,
}

/// A resolved layer position (0-based stage and conv indices).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tap {
    pub stage: usize,
    pub conv: usize,
    pub kind: TapKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum WeightSource {
    SeededRandom { seed: u64 },
    ExternalFile { dir: PathBuf },
}

/// Frozen convolutional stack plus per-stage 1×1 semantic projections.
#[derive(Clone, Debug)]
pub struct Backbone {
    spec: ConvStackSpec,
    source: WeightSource,
    convs: Vec<Vec<Conv>>,
    projections: Vec<Conv>,
    store: ParamStore,
}

impl Backbone {
    pub fn build(spec: &ConvStackSpec, weights: &WeightSource) -> Result<Self> {
        spec.validate()?;
        let seed = match weights {
            WeightSource::SeededRandom { seed } => *seed,
            WeightSource::ExternalFile { .. } => 0,
        };
        let mut init = Init::new(seed);
        let mut store = ParamStore::new();
        let mut convs = Vec::new();
        let mut in_ch = 3;
        for (s, stage) in spec.stages.iter().enumerate() {
            let mut layers = Vec::new();
            for k in 0..stage.convs {
                let name = format!("conv{}_{}", s + 1, k + 1);
                layers.push(Conv::new(&mut store, &mut init, &name, in_ch, stage.channels, 3, 1, relu_gain_fix()));
                in_ch = stage.channels;
            }
            convs.push(layers);
        }
        let projections = spec
            .stages
            .iter()
            .enumerate()
            .map(|(s, stage)| {
                Conv::new(
                    &mut store,
                    &mut init,
                    &format!("proj{}", s + 1),
                    stage.channels,
                    spec.semantic_channels,
                    1,
                    1,
                    relu_gain_fix(),
                )
            })
            .collect();
        store.freeze();
        let mut backbone = Backbone {
            spec: spec.clone(),
            source: weights.clone(),
            convs,
            projections,
            store,
        };
        if let WeightSource::ExternalFile { dir } = weights {
            backbone.load_external(dir)?;
        }
        Ok(backbone)
    }

    fn load_external(&mut self, dir: &Path) -> Result<()> {
        let manifest_path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&manifest_path).map_err(|_| FurnError::MissingWeightFile(manifest_path.clone()))?;
        let listed: std::collections::BTreeMap<String, Vec<usize>> = serde_json::from_str(&text)?;
        // validate every declared shape before touching a blob
        for (name, tensor, _) in self.store.iter() {
            match listed.get(name) {
                None => return Err(FurnError::MissingWeightFile(dir.join(blob::blob_file_name(name)))),
                Some(shape) if shape.as_slice() != tensor.shape() => {
                    return Err(FurnError::ShapeMismatch(format!(
                        "tensor `{name}` has shape {shape:?}, expected {:?}",
                        tensor.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        let tensors = blob::read_listed(dir, &listed, Dtype::F32)?;
        self.store.load(&tensors)
    }

    /// Writes the weights in the external-file layout (f32 blobs + manifest).
    pub fn export(&self, dir: &Path) -> Result<()> {
        blob::write_tensor_dir(dir, &self.store.to_map(), Dtype::F32)
    }

    pub fn spec(&self) -> &ConvStackSpec {
        &self.spec
    }

    pub fn source(&self) -> &WeightSource {
        &self.source
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn digest(&self) -> String {
        self.store.digest()
    }

    /// Binds the frozen weights into `g` as constants.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.store.bind(g, false)
    }

    /// Runs the stack on `x: [N, 3, H, W]` up to and including `tap`.
    pub fn forward_to(&self, g: &mut Graph, p: &[Var], x: Var, tap: Tap) -> Result<Var> {
        let c = g.shape(x)[1];
        if c != 3 {
            return Err(FurnError::ChannelMismatch { expected: 3, actual: c });
        }
        let mut h = x;
        for (s, layers) in self.convs.iter().enumerate() {
            if s > 0 {
                let sh = g.shape(h);
                if sh[2] < 2 || sh[3] < 2 {
                    return Err(FurnError::SizeMismatch {
                        expected: "a map large enough to pool".into(),
                        actual: format!("{}x{}", sh[2], sh[3]),
                    });
                }
                h = g.max_pool2(h);
            }
            for (k, conv) in layers.iter().enumerate() {
                h = conv.forward(g, p, h);
                if tap.stage == s && tap.conv == k && tap.kind == TapKind::PreActivation {
                    return Ok(h);
                }
                h = g.relu(h);
                if tap.stage == s && tap.conv == k && tap.kind == TapKind::PostActivation {
                    return Ok(h);
                }
            }
            if tap.stage == s && tap.kind == TapKind::Pooled {
                return Ok(g.max_pool2(h));
            }
        }
        unreachable!("taps are validated against the stack")
    }

    /// Differentiable feature extraction inside an existing graph.
    pub fn extract_features_in(&self, g: &mut Graph, p: &[Var], x: Var, tap: &str) -> Result<Var> {
        let tap = self.spec.parse_tap(tap)?;
        self.forward_to(g, p, x, tap)
    }

    /// Feature map of `images: [N, 3, H, W]` at `tap`.
    pub fn extract_features(&self, images: &Tensor, tap: &str) -> Result<Tensor> {
        let tap = self.spec.parse_tap(tap)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let x = g.constant(batched(images)?);
        let y = self.forward_to(&mut g, &p, x, tap)?;
        Ok(g.value(y).clone())
    }

    /// Semantic encoder for square inputs of side `input_size`.
    pub fn semantic_encoder(self: &Arc<Self>, input_size: usize) -> Result<SemanticEncoder> {
        let ratio = input_size / SEMANTIC_GRID;
        if input_size % SEMANTIC_GRID != 0 || !ratio.is_power_of_two() {
            return Err(FurnError::SizeMismatch {
                expected: format!("{SEMANTIC_GRID}·2^k pixels"),
                actual: input_size.to_string(),
            });
        }
        let stage = ratio.trailing_zeros() as usize;
        if stage >= self.spec.stages.len() {
            return Err(FurnError::SizeMismatch {
                expected: format!("at most {} pixels", SEMANTIC_GRID << (self.spec.stages.len() - 1)),
                actual: input_size.to_string(),
            });
        }
        Ok(SemanticEncoder {
            backbone: Arc::clone(self),
            input_size,
            tap: Tap {
                stage,
                conv: self.spec.stages[stage].convs - 1,
                kind: TapKind::PostActivation,
            },
        })
    }
}

// He-normal with the plain rectifier gain; the shared initializer assumes the
// leaky slope.
fn relu_gain_fix() -> f64 {
    (1.0 + LEAKY_SLOPE * LEAKY_SLOPE).sqrt()
}

fn batched(images: &Tensor) -> Result<Tensor> {
    match images.rank() {
        3 => {
            let s = images.shape();
            images.clone().reshape(&[1, s[0], s[1], s[2]])
        }
        4 => Ok(images.clone()),
        _ => Err(FurnError::ShapeMismatch(format!("expected an image batch, got {:?}", images.shape()))),
    }
}

/// Embedded-semantics extractor: taps the stage whose output is 16×16 for
/// its input size and projects it to the common semantic width.
#[derive(Clone, Debug)]
pub struct SemanticEncoder {
    backbone: Arc<Backbone>,
    input_size: usize,
    tap: Tap,
}

impl SemanticEncoder {
    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn tap(&self) -> Tap {
        self.tap
    }

    pub fn backbone(&self) -> &Arc<Backbone> {
        &self.backbone
    }

    /// `[N, 3, s, s] → [N, S, 16, 16]` (a single `[3, s, s]` image is
    /// treated as a batch of one).
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let x = batched(images)?;
        let s = x.shape();
        if s[2] != self.input_size || s[3] != self.input_size {
            return Err(FurnError::SizeMismatch {
                expected: format!("{0}x{0}", self.input_size),
                actual: format!("{}x{}", s[2], s[3]),
            });
        }
        let mut g = Graph::new();
        let p = self.backbone.bind(&mut g);
        let xv = g.constant(x);
        let feat = self.backbone.forward_to(&mut g, &p, xv, self.tap)?;
        let proj = &self.backbone.projections[self.tap.stage];
        let out = proj.forward(&mut g, &p, feat);
        Ok(g.value(out).clone())
    }
}

/// `encode_semantics(encoder, img)`
pub fn encode_semantics(encoder: &SemanticEncoder, images: &Tensor) -> Result<Tensor> {
    encoder.encode(images)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Arc<Backbone> {
        Arc::new(Backbone::build(&ConvStackSpec::narrow(4, 8), &WeightSource::SeededRandom { seed: 3 }).unwrap())
    }

    fn image(n: usize, size: usize) -> Tensor {
        let len = n * 3 * size * size;
        Tensor::from_vec(&[n, 3, size, size], (0..len).map(|i| ((i * 31 % 97) as f64) / 97.0).collect()).unwrap()
    }

    #[test]
    fn taps_parse() {
        let spec = ConvStackSpec::vgg19();
        assert_eq!(spec.parse_tap("conv3_3").unwrap(), Tap { stage: 2, conv: 2, kind: TapKind::PreActivation });
        assert_eq!(spec.parse_tap("relu1_2").unwrap().kind, TapKind::PostActivation);
        assert_eq!(spec.parse_tap("pool5").unwrap().stage, 4);
        for bad in ["conv3_5", "conv0_1", "conv6_1", "fc7", "pool0", "conv3"] {
            assert!(matches!(spec.parse_tap(bad), Err(FurnError::UnknownTap(_))), "{bad}");
        }
    }

    #[test]
    fn build_rejects_unknown_perceptual_tap() {
        let mut spec = ConvStackSpec::narrow(4, 8);
        spec.perceptual_tap = "conv2_3".into();
        assert!(matches!(
            Backbone::build(&spec, &WeightSource::SeededRandom { seed: 1 }),
            Err(FurnError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn seeded_backbones_are_reproducible() {
        let a = tiny();
        let b = tiny();
        assert_eq!(a.digest(), b.digest());
        let x = image(1, 32);
        assert_eq!(a.extract_features(&x, "conv3_3").unwrap(), b.extract_features(&x, "conv3_3").unwrap());
    }

    #[test]
    fn perceptual_tap_geometry() {
        let b = tiny();
        let f = b.extract_features(&image(2, 32), "conv3_3").unwrap();
        assert_eq!(f.shape(), &[2, 16, 8, 8]);
        assert!(matches!(b.extract_features(&image(1, 32), "conv9_9"), Err(FurnError::UnknownTap(_))));
    }

    #[test]
    fn pre_and_post_activation_taps_differ_on_negatives() {
        let b = tiny();
        let x = image(1, 32);
        let pre = b.extract_features(&x, "conv3_3").unwrap();
        let post = b.extract_features(&x, "relu3_3").unwrap();
        assert!(pre.data().iter().any(|&v| v < 0.0));
        assert_ne!(pre, post);
        assert_eq!(post, pre.map(|v| v.max(0.0)));
    }

    #[test]
    fn semantic_maps_share_geometry() {
        let b = tiny();
        let hr = b.semantic_encoder(64).unwrap();
        let lr = b.semantic_encoder(16).unwrap();
        assert_eq!(hr.tap().stage, 2);
        assert_eq!(lr.tap().stage, 0);
        let ehr = hr.encode(&image(2, 64)).unwrap();
        let elr = lr.encode(&image(2, 16)).unwrap();
        assert_eq!(ehr.shape(), &[2, 8, 16, 16]);
        assert_eq!(ehr.shape(), elr.shape());
        assert!(matches!(hr.encode(&image(1, 32)), Err(FurnError::SizeMismatch { .. })));
        assert!(b.semantic_encoder(24).is_err());
    }

    #[test]
    fn zero_image_encodes_to_zero() {
        let b = tiny();
        let e = b.semantic_encoder(32).unwrap().encode(&Tensor::zeros(&[1, 3, 32, 32])).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn external_weights_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ConvStackSpec::narrow(2, 4);
        let src = Backbone::build(&spec, &WeightSource::SeededRandom { seed: 9 }).unwrap();
        src.export(dir.path()).unwrap();
        let loaded = Backbone::build(&spec, &WeightSource::ExternalFile { dir: dir.path().into() }).unwrap();
        // f32 storage: equal to the f32-rounded source
        for ((_, a, _), (_, b, _)) in src.store().iter().zip(loaded.store().iter()) {
            assert!(a.max_abs_diff(b) < 1e-6);
        }
        // corrupt one declared shape
        let mpath = dir.path().join("manifest.json");
        let mut m: std::collections::BTreeMap<String, Vec<usize>> =
            serde_json::from_str(&std::fs::read_to_string(&mpath).unwrap()).unwrap();
        m.insert("conv2_1.weight".into(), vec![1, 2, 3, 3]);
        std::fs::write(&mpath, serde_json::to_string(&m).unwrap()).unwrap();
        let err = Backbone::build(&spec, &WeightSource::ExternalFile { dir: dir.path().into() }).unwrap_err();
        assert!(matches!(&err, FurnError::ShapeMismatch(msg) if msg.contains("conv2_1.weight")), "{err}");
        let missing = Backbone::build(&spec, &WeightSource::ExternalFile { dir: dir.path().join("none") });
        assert!(matches!(missing, Err(FurnError::MissingWeightFile(_))));
    }
}
