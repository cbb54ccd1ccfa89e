//! Super-resolution generator: shallow feature conv, a chain of dense nested
//! blocks (DNBs) built from residual-in-internal-dense blocks (RIDBs), a
//! global residual fusion, and sub-pixel upsampling.

use serde::{Deserialize, Serialize};

use crate::error::{FurnError, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv, Init, ParamStore, LEAKY_SLOPE};
use crate::tensor::Tensor;

/// Init scale for convolutions inside residual branches.
const BRANCH_INIT_SCALE: f64 = 0.1;
/// Init scale for the final RGB conv, so early outputs stay near zero.
const OUTPUT_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub growth: usize,
    pub n_dnb: usize,
    pub ridb_per_dnb: usize,
    pub idb_per_ridb: usize,
    pub convs_per_idb: usize,
    pub residual_scale: f64,
    pub scale: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            base_channels: 64,
            growth: 32,
            n_dnb: 4,
            ridb_per_dnb: 3,
            idb_per_ridb: 2,
            convs_per_idb: 3,
            residual_scale: 0.2,
            scale: 4,
        }
    }
}

impl GeneratorConfig {
    /// C0=8, g=4, one DNB.
    pub fn tiny(scale: usize) -> Self {
        GeneratorConfig {
            base_channels: 8,
            growth: 4,
            n_dnb: 1,
            scale,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("base_channels", self.base_channels),
            ("growth", self.growth),
            ("n_dnb", self.n_dnb),
            ("ridb_per_dnb", self.ridb_per_dnb),
            ("idb_per_ridb", self.idb_per_ridb),
            ("convs_per_idb", self.convs_per_idb),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(FurnError::InvalidConfig(format!("generator {name} must be at least 1")));
        }
        if self.scale != 4 && self.scale != 8 {
            return Err(FurnError::InvalidConfig(format!("scale must be 4 or 8, got {}", self.scale)));
        }
        if !(self.residual_scale.is_finite() && self.residual_scale >= 0.0) {
            return Err(FurnError::InvalidConfig(format!("residual scale {} is invalid", self.residual_scale)));
        }
        Ok(())
    }

    /// Input widths of the convolutions in one internal dense block, followed
    /// by the width entering its fusion conv.
    pub fn dense_widths(&self) -> Vec<usize> {
        (0..=self.convs_per_idb).map(|i| self.base_channels + i * self.growth).collect()
    }
}

#[derive(Clone, Debug)]
struct Idb {
    convs: Vec<Conv>,
    fuse: Conv,
}

#[derive(Clone, Debug)]
struct Ridb {
    idbs: Vec<Idb>,
}

#[derive(Clone, Debug)]
struct Dnb {
    ridbs: Vec<Ridb>,
}

#[derive(Clone, Debug)]
pub struct Generator {
    cfg: GeneratorConfig,
    store: ParamStore,
    sfm: Conv,
    dnbs: Vec<Dnb>,
    grl: Conv,
    um: Vec<Conv>,
    out: Conv,
}

impl Generator {
    pub fn build(cfg: &GeneratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(seed);
        let mut store = ParamStore::new();
        let c0 = cfg.base_channels;
        let sfm = Conv::new(&mut store, &mut init, "sfm", 3, c0, 3, 1, 1.0);
        let widths = cfg.dense_widths();
        let dnbs = (0..cfg.n_dnb)
            .map(|d| Dnb {
                ridbs: (0..cfg.ridb_per_dnb)
                    .map(|r| Ridb {
                        idbs: (0..cfg.idb_per_ridb)
                            .map(|i| {
                                let prefix = format!("dnb{d}.ridb{r}.idb{i}");
                                let convs = widths[..cfg.convs_per_idb]
                                    .iter()
                                    .enumerate()
                                    .map(|(k, &w)| {
                                        let name = format!("{prefix}.conv{k}");
                                        Conv::new(&mut store, &mut init, &name, w, cfg.growth, 3, 1, BRANCH_INIT_SCALE)
                                    })
                                    .collect();
                                let fuse_in = widths[cfg.convs_per_idb];
                                let fuse = Conv::new(&mut store, &mut init, &format!("{prefix}.fuse"), fuse_in, c0, 1, 1, BRANCH_INIT_SCALE);
                                Idb { convs, fuse }
                            })
                            .collect(),
                    })
                    .collect(),
            })
            .collect();
        let grl = Conv::new(&mut store, &mut init, "grl", c0, c0, 3, 1, 1.0);
        let um = (0..cfg.scale.trailing_zeros())
            .map(|u| Conv::new(&mut store, &mut init, &format!("um{u}"), c0, 4 * c0, 3, 1, 1.0))
            .collect();
        let out = Conv::new(&mut store, &mut init, "out", c0, 3, 3, 1, OUTPUT_INIT_SCALE);
        Ok(Generator {
            cfg: cfg.clone(),
            store,
            sfm,
            dnbs,
            grl,
            um,
            out,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    pub fn digest(&self) -> String {
        self.store.digest()
    }

    /// Index of the shallow-feature conv weight in the store.
    pub fn sfm_weight(&self) -> usize {
        self.sfm.weight
    }

    fn check_input(&self, shape: &[usize], channels: usize) -> Result<()> {
        if shape.len() != 4 || shape[2] == 0 || shape[3] == 0 || shape[0] == 0 {
            return Err(FurnError::SizeMismatch {
                expected: "[N, C, H, W]".into(),
                actual: format!("{shape:?}"),
            });
        }
        if shape[1] != channels {
            return Err(FurnError::ChannelMismatch {
                expected: channels,
                actual: shape[1],
            });
        }
        Ok(())
    }

    pub fn sfm_forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        self.check_input(g.shape(x), 3)?;
        Ok(self.sfm.forward(g, p, x))
    }

    fn idb_forward(&self, g: &mut Graph, p: &[Var], idb: &Idb, x: Var) -> Var {
        let mut feats = vec![x];
        for conv in &idb.convs {
            let input = if feats.len() == 1 { x } else { g.concat(&feats) };
            let y = conv.forward(g, p, input);
            feats.push(g.leaky_relu(y, LEAKY_SLOPE));
        }
        let all = g.concat(&feats);
        let fused = idb.fuse.forward(g, p, all);
        g.add_scaled(x, fused, self.cfg.residual_scale)
    }

    /// `F + β·(chain(F) − F)`: the outer skip scales the net change made by
    /// the inner cascade, so zero-weight blocks are exact identities.
    fn nested_skip(&self, g: &mut Graph, x: Var, chain_out: Var) -> Var {
        let delta = g.sub(chain_out, x);
        g.add_scaled(x, delta, self.cfg.residual_scale)
    }

    pub fn ridb_forward(&self, g: &mut Graph, p: &[Var], dnb: usize, ridb: usize, x: Var) -> Result<Var> {
        self.check_input(g.shape(x), self.cfg.base_channels)?;
        let block = &self.dnbs[dnb].ridbs[ridb];
        let mut h = x;
        for idb in &block.idbs {
            h = self.idb_forward(g, p, idb, h);
        }
        Ok(self.nested_skip(g, x, h))
    }

    pub fn dnb_forward(&self, g: &mut Graph, p: &[Var], dnb: usize, x: Var) -> Result<Var> {
        self.check_input(g.shape(x), self.cfg.base_channels)?;
        let mut h = x;
        for r in 0..self.dnbs[dnb].ridbs.len() {
            h = self.ridb_forward(g, p, dnb, r, h)?;
        }
        Ok(self.nested_skip(g, x, h))
    }

    /// Full super-resolution pass on `[N, 3, h, w]`, output `[N, 3, h·r, w·r]`.
    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let f_sf = self.sfm_forward(g, p, x)?;
        let mut h = f_sf;
        for d in 0..self.dnbs.len() {
            h = self.dnb_forward(g, p, d, h)?;
        }
        let f_gf = self.grl.forward(g, p, h);
        let mut h = g.add(f_sf, f_gf);
        for conv in &self.um {
            let y = conv.forward(g, p, h);
            let y = g.pixel_shuffle(y, 2);
            h = g.leaky_relu(y, LEAKY_SLOPE);
        }
        Ok(self.out.forward(g, p, h))
    }

    /// A lone `[C, H, W]` input is treated as a batch of one.
    fn run(&self, x: &Tensor, f: impl FnOnce(&mut Graph, &[Var], Var) -> Result<Var>) -> Result<Tensor> {
        let x = match *x.shape() {
            [c, h, w] => x.clone().reshape(&[1, c, h, w])?,
            _ => x.clone(),
        };
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let xv = g.constant(x);
        let y = f(&mut g, &p, xv)?;
        Ok(g.value(y).clone())
    }

    /// Unclamped output of the full pipeline.
    pub fn generate(&self, lr: &Tensor) -> Result<Tensor> {
        self.run(lr, |g, p, x| self.forward(g, p, x))
    }

    pub fn sfm(&self, lr: &Tensor) -> Result<Tensor> {
        self.run(lr, |g, p, x| self.sfm_forward(g, p, x))
    }

    pub fn ridb(&self, dnb: usize, ridb: usize, f: &Tensor) -> Result<Tensor> {
        self.run(f, |g, p, x| self.ridb_forward(g, p, dnb, ridb, x))
    }

    pub fn dnb(&self, dnb: usize, f: &Tensor) -> Result<Tensor> {
        self.run(f, |g, p, x| self.dnb_forward(g, p, dnb, x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i * 37 % 101) as f64) / 101.0 - 0.3).collect()).unwrap()
    }

    #[test]
    fn builds_are_seeded() {
        let cfg = GeneratorConfig::tiny(4);
        assert_eq!(Generator::build(&cfg, 5).unwrap().digest(), Generator::build(&cfg, 5).unwrap().digest());
        assert_ne!(Generator::build(&cfg, 5).unwrap().digest(), Generator::build(&cfg, 6).unwrap().digest());
    }

    #[test]
    fn rejects_bad_configs() {
        for cfg in [
            GeneratorConfig { scale: 3, ..GeneratorConfig::tiny(4) },
            GeneratorConfig { scale: 2, ..GeneratorConfig::tiny(4) },
            GeneratorConfig { growth: 0, ..GeneratorConfig::tiny(4) },
            GeneratorConfig { residual_scale: f64::NAN, ..GeneratorConfig::tiny(4) },
        ] {
            assert!(matches!(Generator::build(&cfg, 0), Err(FurnError::InvalidConfig(_))));
        }
    }

    #[test]
    fn dense_widths_follow_growth() {
        assert_eq!(GeneratorConfig::tiny(4).dense_widths(), vec![8, 12, 16, 20]);
    }

    #[test]
    fn shapes() {
        let g4 = Generator::build(&GeneratorConfig::tiny(4), 1).unwrap();
        assert_eq!(g4.generate(&ramp(&[2, 3, 8, 8])).unwrap().shape(), &[2, 3, 32, 32]);
        assert_eq!(g4.sfm(&ramp(&[1, 3, 8, 8])).unwrap().shape(), &[1, 8, 8, 8]);
        let g8 = Generator::build(&GeneratorConfig::tiny(8), 1).unwrap();
        assert_eq!(g8.generate(&ramp(&[1, 3, 4, 4])).unwrap().shape(), &[1, 3, 32, 32]);
        assert!(matches!(g4.generate(&ramp(&[1, 4, 8, 8])), Err(FurnError::ChannelMismatch { .. })));
        assert!(matches!(g4.ridb(0, 0, &ramp(&[1, 3, 8, 8])), Err(FurnError::ChannelMismatch { .. })));
    }

    #[test]
    fn zero_beta_dnb_is_identity() {
        let cfg = GeneratorConfig {
            residual_scale: 0.0,
            ..GeneratorConfig::tiny(4)
        };
        let g = Generator::build(&cfg, 2).unwrap();
        let f = ramp(&[1, 8, 6, 6]);
        assert_eq!(g.dnb(0, &f).unwrap(), f);
    }

    #[test]
    fn zero_weights_make_blocks_identities() {
        let mut g = Generator::build(&GeneratorConfig::tiny(4), 2).unwrap();
        g.store_mut().zero_weights();
        let f = ramp(&[2, 8, 5, 5]);
        assert_eq!(g.ridb(0, 1, &f).unwrap(), f);
        assert_eq!(g.dnb(0, &f).unwrap(), f);
        let z = g.sfm(&Tensor::zeros(&[1, 3, 4, 4])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }
}
