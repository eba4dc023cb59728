//! Learned behavioral characterizations: one VAE per tree node.
//!
//! Modules see the grid average-pooled to [`Architecture::input_size`].
//! Production modules run in `f32`; the network is generic so gradients can
//! be verified in `f64`.

mod augment;
mod layers;
mod net;

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use augment::{augment, AugmentConfig};
pub use layers::Scalar;
pub use net::{bce_with_logits, Architecture, LayerShape, LossParts, Net, Pass, Trace};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 1e-5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Share of each epoch drawn from patterns discovered since the last stage.
    pub new_fraction: f64,
    /// Caps the per-epoch dataset size (defaults to the node population).
    pub max_epoch_size: Option<usize>,
    pub optimizer: OptimizerConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            new_fraction: 0.3,
            max_epoch_size: None,
            optimizer: OptimizerConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

struct Adam {
    cfg: OptimizerConfig,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(cfg: OptimizerConfig, n: usize) -> Self {
        Self { cfg, step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    fn update(&mut self, params: &mut [f32], grad: &[f32]) {
        let c = self.cfg;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for i in 0..params.len() {
            let g = grad[i] as f64 + c.weight_decay * params[i] as f64;
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let update = c.learning_rate * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + c.epsilon);
            params[i] = (params[i] as f64 - update) as f32;
        }
    }
}

/// A pattern available to a training stage.
#[derive(Clone, Debug)]
pub struct TrainSample {
    /// Already pooled to the module input size.
    pub grid: Grid,
    pub is_new: bool,
}

/// Epoch dataset: a `new_fraction` share drawn from the new stratum and the
/// rest from the old one, with replacement; an empty stratum defers to the
/// other.
pub fn epoch_indices<R: Rng + ?Sized>(samples: &[TrainSample], size: usize, new_fraction: f64, rng: &mut R) -> Vec<usize> {
    let (new, old): (Vec<usize>, Vec<usize>) = (0..samples.len()).partition(|&i| samples[i].is_new);
    let n_new = if old.is_empty() {
        size
    } else if new.is_empty() {
        0
    } else {
        (size as f64 * new_fraction).round() as usize
    };
    let mut out: Vec<usize> = (0..size).map(|k| {
        let pool = if k < n_new { &new } else { &old };
        pool[rng.gen_range(0..pool.len())]
    }).collect();
    out.shuffle(rng);
    out
}

/// Pools a grid to the module input size and converts it to `f32`.
pub fn module_input(o: &Grid, arch: &Architecture) -> Result<Grid> {
    let (h, w) = o.shape();
    let s = arch.input_size;
    if h != w || h % s != 0 {
        return Err(Error::ShapeMismatch { expected: format!("square grid with side a multiple of {s}"), got: format!("{h}x{w}") });
    }
    o.pooled(h / s)
}

fn as_f32(g: &Grid) -> Vec<f32> {
    g.values().iter().map(|&v| v as f32).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingModule {
    net: Net<f32>,
    pub frozen: bool,
    pub train_epochs: usize,
    /// Mean per-image reconstruction loss of each completed epoch.
    pub loss_history: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageReport {
    pub epochs: usize,
    pub final_reconstruction: Option<f64>,
    pub skipped: Option<String>,
}

const BLOB_MAGIC: &[u8; 4] = b"HMOD";
const BLOB_VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct BlobHeader {
    architecture: Architecture,
    connected: bool,
    frozen: bool,
    train_epochs: usize,
    loss_history: Vec<f64>,
    layers: Vec<LayerShape>,
}

impl EmbeddingModule {
    pub fn new<R: Rng + ?Sized>(arch: Architecture, connected: bool, rng: &mut R) -> Result<Self> {
        Ok(Self { net: Net::new(arch, connected, rng)?, frozen: false, train_epochs: 0, loss_history: Vec::new() })
    }

    pub fn net(&self) -> &Net<f32> {
        &self.net
    }

    pub fn arch(&self) -> &Architecture {
        self.net.arch()
    }

    pub fn latent_dim(&self) -> usize {
        self.net.arch().latent_dim
    }

    pub fn is_connected(&self) -> bool {
        self.net.is_connected()
    }

    pub fn params(&self) -> &[f32] {
        &self.net.params
    }

    /// Posterior-mean embedding of a pooled input and the trace for children.
    pub fn encode(&self, input: &Grid, parent: Option<&Trace<f32>>) -> Result<(Vec<f64>, Trace<f32>)> {
        let (mean, trace) = self.net.encode(&as_f32(input), parent)?;
        Ok((mean.into_iter().map(f64::from).collect(), trace))
    }

    /// Reconstruction probabilities of a pooled input.
    pub fn reconstruct(&self, input: &Grid, parent: Option<&Trace<f32>>) -> Result<Grid> {
        let pass = self.net.forward(&as_f32(input), parent, None)?;
        let s = self.arch().input_size;
        Grid::from_vec(s, s, pass.logits.iter().map(|&l| 1.0 / (1.0 + (-(l as f64)).exp())).collect())
    }

    /// Runs `epochs` epochs over `samples`. `parent_trace` maps an
    /// (augmented) input to the frozen parent's trace, or `None` at the root.
    pub fn train_stage<R: Rng + ?Sized>(
        &mut self,
        samples: &[TrainSample],
        parent_trace: &dyn Fn(&Grid) -> Result<Option<Trace<f32>>>,
        epochs: usize,
        cfg: &TrainConfig,
        rng: &mut R,
    ) -> Result<StageReport> {
        if self.frozen {
            return Err(Error::Config("cannot train a frozen module".into()));
        }
        if epochs == 0 {
            return Ok(StageReport::default());
        }
        if samples.is_empty() {
            return Ok(StageReport { skipped: Some("no patterns routed to this module".into()), ..Default::default() });
        }
        let size = cfg.max_epoch_size.map_or(samples.len(), |cap| cap.min(samples.len())).max(1);
        let latent = self.latent_dim();
        let mut adam = Adam::new(cfg.optimizer, self.net.param_count());
        let mut grad = vec![0.0f32; self.net.param_count()];
        let mut last = None;
        for _ in 0..epochs {
            let order = epoch_indices(samples, size, cfg.new_fraction, rng);
            let mut rec_sum = 0.0;
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let mut inputs = Vec::with_capacity(chunk.len());
                let mut traces = Vec::with_capacity(chunk.len());
                let mut noises = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let g = augment(&samples[i].grid, &cfg.augment, rng);
                    traces.push(parent_trace(&g)?);
                    inputs.push(as_f32(&g));
                    noises.push((0..latent).map(|_| rng.sample::<f32, _>(StandardNormal)).collect::<Vec<f32>>());
                }
                let batch: Vec<(&[f32], Option<&Trace<f32>>, &[f32])> =
                    (0..chunk.len()).map(|k| (&inputs[k][..], traces[k].as_ref(), &noises[k][..])).collect();
                grad.fill(0.0);
                let parts = self.net.loss_and_grad(&batch, &mut grad)?;
                if !parts.total.is_finite() {
                    return Err(Error::NumericalFault { step: self.train_epochs });
                }
                rec_sum += parts.reconstruction * chunk.len() as f64;
                adam.update(&mut self.net.params, &grad);
            }
            let rec = rec_sum / size as f64;
            self.loss_history.push(rec);
            self.train_epochs += 1;
            last = Some(rec);
        }
        Ok(StageReport { epochs, final_reconstruction: last, skipped: None })
    }

    pub fn write_blob<W: Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::to_vec(&BlobHeader {
            architecture: *self.arch(),
            connected: self.is_connected(),
            frozen: self.frozen,
            train_epochs: self.train_epochs,
            loss_history: self.loss_history.clone(),
            layers: self.net.manifest().to_vec(),
        })?;
        w.write_all(BLOB_MAGIC)?;
        w.write_u8(BLOB_VERSION)?;
        w.write_u32::<LittleEndian>(header.len() as u32)?;
        w.write_all(&header)?;
        for &p in &self.net.params {
            w.write_f32::<LittleEndian>(p)?;
        }
        Ok(())
    }

    pub fn read_blob<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BLOB_MAGIC {
            return Err(Error::Format("not a module blob".into()));
        }
        let version = r.read_u8()?;
        if version != BLOB_VERSION {
            return Err(Error::Format(format!("unsupported module blob version {version}")));
        }
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: BlobHeader = serde_json::from_slice(&header)?;
        let count: usize = header.layers.iter().map(|l| l.shape.iter().product::<usize>()).sum();
        let mut params = vec![0.0f32; count];
        r.read_f32_into::<LittleEndian>(&mut params)?;
        let net = Net::from_params(header.architecture, header.connected, params)?;
        if net.manifest() != header.layers.as_slice() {
            return Err(Error::Format("layer manifest does not match the architecture".into()));
        }
        Ok(Self { net, frozen: header.frozen, train_epochs: header.train_epochs, loss_history: header.loss_history })
    }
}
