//! Joint discriminator over (image, embedded semantics) tuples.
//!
//! The semantics branch (ESLDSN) squeezes an `S×16×16` map into 32 values,
//! the image branch (ILDSN) squeezes the image into 64, and a dense head
//! (FCM) turns their concatenation into one raw critic value per sample.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::SEMANTIC_GRID;
use crate::error::{FurnError, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv, Dense, Init, Norm, ParamStore, StatUpdate};
use crate::tensor::Tensor;

/// Side of the map the semantics branch is pooled to before flattening.
const ESLDSN_GRID: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub esldsn_channels: Vec<usize>,
    pub esldsn_strides: Vec<usize>,
    pub ildsn_channels: Vec<usize>,
    pub ildsn_strides: Vec<usize>,
    /// Hidden widths of the dense head; a final width-1 layer is implied.
    pub fcm_widths: Vec<usize>,
    pub leaky_slope: f64,
    pub dropout: f64,
    pub use_semantics: bool,
    pub semantic_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            esldsn_channels: vec![64, 64, 32, 32, 16, 8],
            esldsn_strides: vec![1, 2, 1, 2, 1, 2],
            ildsn_channels: vec![32, 32, 64, 64, 128, 128, 256, 256, 64],
            ildsn_strides: vec![1, 2, 1, 2, 1, 2, 1, 2, 2],
            fcm_widths: vec![256, 128, 64, 32, 16],
            leaky_slope: 0.2,
            dropout: 0.4,
            use_semantics: true,
            semantic_channels: 256,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FurnError::InvalidConfig(m.to_string()));
        if self.esldsn_channels.len() != self.esldsn_strides.len() || self.esldsn_channels.is_empty() {
            return bad("esldsn channels and strides must be non-empty and of equal length");
        }
        if self.ildsn_channels.len() != self.ildsn_strides.len() || self.ildsn_channels.is_empty() {
            return bad("ildsn channels and strides must be non-empty and of equal length");
        }
        let all = self.esldsn_channels.iter().chain(&self.ildsn_channels).chain(&self.fcm_widths);
        if all.copied().any(|c| c == 0) || self.semantic_channels == 0 {
            return bad("widths must be positive");
        }
        if self.esldsn_strides.iter().chain(&self.ildsn_strides).any(|&s| s == 0) {
            return bad("strides must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn semantic_width(&self) -> usize {
        self.esldsn_channels.last().copied().unwrap_or(0) * ESLDSN_GRID * ESLDSN_GRID
    }

    pub fn image_width(&self) -> usize {
        self.ildsn_channels.last().copied().unwrap_or(0)
    }

    pub fn fcm_input(&self) -> usize {
        self.image_width() + if self.use_semantics { self.semantic_width() } else { 0 }
    }
}

/// State for one training-mode forward pass: the dropout stream and the
/// batch-norm statistics it produced.
#[derive(Debug)]
pub struct TrainPass {
    rng: ChaCha8Rng,
    pub stats: Vec<StatUpdate>,
}

impl TrainPass {
    pub fn new(seed: u64) -> Self {
        TrainPass {
            rng: ChaCha8Rng::seed_from_u64(seed),
            stats: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
struct IldsnGroup {
    conv: Conv,
    norm: Option<Norm>,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    cfg: DiscriminatorConfig,
    store: ParamStore,
    esldsn: Vec<Conv>,
    ildsn: Vec<IldsnGroup>,
    fcm: Vec<Dense>,
}

impl Discriminator {
    pub fn build(cfg: &DiscriminatorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(seed);
        let mut store = ParamStore::new();
        let mut esldsn = Vec::new();
        if cfg.use_semantics {
            let mut c = cfg.semantic_channels;
            for (i, (&out, &stride)) in cfg.esldsn_channels.iter().zip(&cfg.esldsn_strides).enumerate() {
                esldsn.push(Conv::new(&mut store, &mut init, &format!("esldsn{i}"), c, out, 3, stride, 1.0));
                c = out;
            }
        }
        let mut ildsn = Vec::new();
        let mut c = 3;
        for (i, (&out, &stride)) in cfg.ildsn_channels.iter().zip(&cfg.ildsn_strides).enumerate() {
            let conv = Conv::new(&mut store, &mut init, &format!("ildsn{i}"), c, out, 3, stride, 1.0);
            let norm = (i > 0).then(|| Norm::new(&mut store, &format!("ildsn{i}.bn"), out));
            ildsn.push(IldsnGroup { conv, norm });
            c = out;
        }
        let mut fcm = Vec::new();
        let mut w = cfg.fcm_input();
        for (i, &out) in cfg.fcm_widths.iter().chain(std::iter::once(&1)).enumerate() {
            fcm.push(Dense::new(&mut store, &mut init, &format!("fcm{i}"), w, out));
            w = out;
        }
        Ok(Discriminator {
            cfg: cfg.clone(),
            store,
            esldsn,
            ildsn,
            fcm,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn digest(&self) -> String {
        self.store.digest()
    }

    pub fn apply_stats(&mut self, stats: &[StatUpdate]) {
        for s in stats {
            s.apply(&mut self.store);
        }
    }

    /// `[N, S, 16, 16] → [N, 32]`
    pub fn esldsn_forward(&self, g: &mut Graph, p: &[Var], sem: Var) -> Result<Var> {
        if !self.cfg.use_semantics {
            return Err(FurnError::InvalidConfig("semantics branch is disabled".into()));
        }
        let s = g.shape(sem);
        if s.len() != 4 || s[1] != self.cfg.semantic_channels || s[2] != SEMANTIC_GRID || s[3] != SEMANTIC_GRID {
            return Err(FurnError::ShapeMismatch(format!(
                "semantics must be [N, {}, {SEMANTIC_GRID}, {SEMANTIC_GRID}], got {s:?}",
                self.cfg.semantic_channels
            )));
        }
        let mut h = sem;
        for conv in &self.esldsn {
            let y = conv.forward(g, p, h);
            h = g.leaky_relu(y, self.cfg.leaky_slope);
        }
        let s = g.shape(h);
        if s[2] != ESLDSN_GRID || s[3] != ESLDSN_GRID {
            h = g.adaptive_avg_pool(h, ESLDSN_GRID, ESLDSN_GRID);
        }
        Ok(g.flatten(h))
    }

    /// `[N, 3, H, W] → [N, 64]`
    pub fn ildsn_forward(&self, g: &mut Graph, p: &[Var], img: Var, mut pass: Option<&mut TrainPass>) -> Result<Var> {
        let s = g.shape(img);
        if s.len() != 4 || s[1] != 3 {
            return Err(FurnError::ShapeMismatch(format!("image batch must be [N, 3, H, W], got {s:?}")));
        }
        let mut h = img;
        for group in &self.ildsn {
            let y = group.conv.forward(g, p, h);
            h = g.leaky_relu(y, self.cfg.leaky_slope);
            if let Some(norm) = &group.norm {
                h = norm.forward(g, p, h, pass.as_deref_mut().map(|t| &mut t.stats));
            }
        }
        h = g.adaptive_avg_pool(h, 1, 1);
        Ok(g.flatten(h))
    }

    /// `[N, fcm_input] → [N, 1]`; dropout is active only with a train pass.
    pub fn fcm_forward(&self, g: &mut Graph, p: &[Var], v: Var, mut pass: Option<&mut TrainPass>) -> Result<Var> {
        let s = g.shape(v);
        if s.len() != 2 || s[1] != self.cfg.fcm_input() {
            return Err(FurnError::WidthMismatch {
                expected: self.cfg.fcm_input(),
                actual: s.get(1).copied().unwrap_or(0),
            });
        }
        let keep = 1.0 - self.cfg.dropout;
        let mut h = v;
        let last = self.fcm.len() - 1;
        for (i, layer) in self.fcm.iter().enumerate() {
            h = layer.forward(g, p, h);
            if i == last {
                break;
            }
            h = g.leaky_relu(h, self.cfg.leaky_slope);
            if let Some(t) = pass.as_deref_mut() {
                if self.cfg.dropout > 0.0 {
                    let shape = g.shape(h).to_vec();
                    let n = shape.iter().product();
                    let mask = (0..n)
                        .map(|_| if t.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    h = g.mul_const(h, Tensor::from_vec(&shape, mask)?);
                }
            }
        }
        Ok(h)
    }

    /// Raw critic values `[N, 1]`. `semantics` is ignored when the semantics
    /// branch is disabled.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &[Var],
        img: Var,
        semantics: Option<Var>,
        mut pass: Option<&mut TrainPass>,
    ) -> Result<Var> {
        let vi = self.ildsn_forward(g, p, img, pass.as_deref_mut())?;
        let v = if self.cfg.use_semantics {
            let sem = semantics.ok_or_else(|| FurnError::ShapeMismatch("semantics are required by this critic".into()))?;
            if g.shape(sem)[0] != g.shape(img)[0] {
                return Err(FurnError::ShapeMismatch(format!(
                    "image batch {} and semantics batch {} differ",
                    g.shape(img)[0],
                    g.shape(sem)[0]
                )));
            }
            let vs = self.esldsn_forward(g, p, sem)?;
            g.concat(&[vs, vi])
        } else {
            vi
        };
        self.fcm_forward(g, p, v, pass)
    }

    /// Eval-mode critic on plain tensors, one value per sample.
    pub fn critic(&self, images: &Tensor, semantics: Option<&Tensor>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let img = g.constant(images.clone());
        let sem = semantics.map(|s| g.constant(s.clone()));
        let c = self.forward(&mut g, &p, img, sem, None)?;
        Ok(g.value(c).data().to_vec())
    }

    /// Training-mode critic (dropout and batch statistics) without applying
    /// the statistics.
    pub fn critic_train(&self, images: &Tensor, semantics: Option<&Tensor>, dropout_seed: u64) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let img = g.constant(images.clone());
        let sem = semantics.map(|s| g.constant(s.clone()));
        let mut pass = TrainPass::new(dropout_seed);
        let c = self.forward(&mut g, &p, img, sem, Some(&mut pass))?;
        Ok(g.value(c).data().to_vec())
    }

    /// Gradient of the summed eval-mode critic w.r.t. the semantics input.
    pub fn semantic_gradient(&self, images: &Tensor, semantics: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let img = g.constant(images.clone());
        let sem = g.parameter(semantics.clone());
        let c = self.forward(&mut g, &p, img, Some(sem), None)?;
        let n = g.shape(c)[0];
        let total = g.scalar_fn(&[c], g.value(c).sum(), vec![Tensor::full(&[n, 1], 1.0)]);
        let mut grads = g.backward(total);
        Ok(grads.take(sem).unwrap_or_else(|| Tensor::zeros(semantics.shape())))
    }

    fn run_branch(&self, x: &Tensor, f: impl FnOnce(&mut Graph, &[Var], Var) -> Result<Var>) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = f(&mut g, &p, xv)?;
        Ok(g.value(y).clone())
    }

    pub fn esldsn(&self, semantics: &Tensor) -> Result<Tensor> {
        self.run_branch(semantics, |g, p, x| self.esldsn_forward(g, p, x))
    }

    pub fn ildsn(&self, images: &Tensor) -> Result<Tensor> {
        self.run_branch(images, |g, p, x| self.ildsn_forward(g, p, x, None))
    }

    pub fn fcm(&self, v: &Tensor) -> Result<Tensor> {
        self.run_branch(v, |g, p, x| self.fcm_forward(g, p, x, None))
    }
}
