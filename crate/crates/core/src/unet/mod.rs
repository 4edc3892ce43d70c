//! The u-net: contracting path of (conv3x3, batch norm, ReLU) pairs with 2x2
//! max pooling, a bottleneck, an expanding path of 2x2 up-convolutions,
//! skip concatenation and conv pairs, and a 1x1 convolution with a sigmoid.
//! Input size is free as long as both sides are multiples of `2^depth`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid_value, BatchNormMode, BatchNormStats, Checkpoint, Graph, NodeId, Shape, Tensor};
use crate::candidates::ProbabilityMap;
use crate::error::{invalid_arg, shape_err, Error, Result};
use crate::imaging::io::write_bytes;
use crate::imaging::{Image, PreprocessParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnetConfig {
    /// Number of pooling stages.
    pub depth: usize,
    /// Channels of the first block; doubled at every level.
    pub base_filters: usize,
    #[serde(default = "one")]
    pub in_channels: usize,
}

fn one() -> usize {
    1
}

impl Default for UnetConfig {
    /// Desk-scale network used for training.
    fn default() -> Self {
        UnetConfig {
            depth: 3,
            base_filters: 8,
            in_channels: 1,
        }
    }
}

impl UnetConfig {
    /// Four pooling stages, 128 filters in the first block.
    pub fn full_scale() -> Self {
        UnetConfig {
            depth: 4,
            base_filters: 128,
            in_channels: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 10 {
            return Err(invalid_arg!("u-net depth must lie in 1..=10, got {}", self.depth));
        }
        if self.base_filters == 0 {
            return Err(invalid_arg!("u-net base filters must be positive"));
        }
        if self.in_channels != 1 {
            return Err(invalid_arg!("u-net takes single-channel input, got {} channels", self.in_channels));
        }
        Ok(())
    }

    /// Channels at level `d` (`d == depth` is the bottleneck).
    pub fn channels(&self, level: usize) -> usize {
        self.base_filters << level
    }

    /// Spatial sizes must be multiples of this.
    pub fn grid_multiple(&self) -> usize {
        1 << self.depth
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        param_shapes(self).iter().map(|(_, s)| s.numel()).sum()
    }
}

fn param_shapes(cfg: &UnetConfig) -> Vec<(String, Shape)> {
    let mut out = Vec::new();
    let conv = |out: &mut Vec<(String, Shape)>, name: String, cin: usize, cout: usize| {
        out.push((format!("{name}.weight"), Shape::new(cout, cin, 3, 3)));
        out.push((format!("{name}.bias"), Shape::new(1, cout, 1, 1)));
        out.push((format!("{name}.bn.gamma"), Shape::new(1, cout, 1, 1)));
        out.push((format!("{name}.bn.beta"), Shape::new(1, cout, 1, 1)));
    };
    let mut cin = cfg.in_channels;
    for d in 0..cfg.depth {
        let c = cfg.channels(d);
        conv(&mut out, format!("enc{d}.conv0"), cin, c);
        conv(&mut out, format!("enc{d}.conv1"), c, c);
        cin = c;
    }
    let cb = cfg.channels(cfg.depth);
    conv(&mut out, "bottleneck.conv0".into(), cin, cb);
    conv(&mut out, "bottleneck.conv1".into(), cb, cb);
    for d in (0..cfg.depth).rev() {
        let (c, cup) = (cfg.channels(d), cfg.channels(d + 1));
        out.push((format!("dec{d}.up.weight"), Shape::new(cup, c, 2, 2)));
        conv(&mut out, format!("dec{d}.conv0"), 2 * c, c);
        conv(&mut out, format!("dec{d}.conv1"), c, c);
    }
    out.push(("head.weight".into(), Shape::new(1, cfg.channels(0), 1, 1)));
    out.push(("head.bias".into(), Shape::new(1, 1, 1, 1)));
    out
}

/// Parameter and running-statistics container.
#[derive(Debug, Clone, PartialEq)]
pub struct UnetModel {
    config: UnetConfig,
    names: Vec<String>,
    params: Vec<Tensor<f32>>,
    /// One entry per batch-norm layer, in forward order.
    bn_stats: Vec<BatchNormStats<f32>>,
}

/// How batch norm behaves during a forward pass.
enum Stats<'a> {
    Batch(&'a mut [BatchNormStats<f32>]),
    Running(&'a [BatchNormStats<f32>]),
}

/// Walks the parameter list in forward order.
struct Cursor<'a> {
    p: &'a [NodeId],
    pi: usize,
    si: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> NodeId {
        self.pi += 1;
        self.p[self.pi - 1]
    }

    /// conv3x3, batch norm, ReLU.
    fn block(&mut self, g: &mut Graph<f32>, x: NodeId, stats: &mut Stats<'_>) -> Result<NodeId> {
        let (w, b, gamma, beta) = (self.next(), self.next(), self.next(), self.next());
        let y = g.conv2d(x, w, b)?;
        let mode = match stats {
            Stats::Batch(s) => BatchNormMode::Train(&mut s[self.si]),
            Stats::Running(s) => BatchNormMode::Eval(&s[self.si]),
        };
        self.si += 1;
        let y = g.batch_norm(y, gamma, beta, mode)?;
        Ok(g.relu(y))
    }
}

/// Sidecar stored next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub unet: UnetConfig,
    pub preprocessing: PreprocessParams,
}

/// Original extent of a tensor padded by [`pad_to_grid`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRecord {
    pub height: usize,
    pub width: usize,
    pub origin: (usize, usize),
}

/// Zero-pad bottom and right to the next multiple of `multiple`.
pub fn pad_to_grid<T: crate::autodiff::Element>(x: &Tensor<T>, multiple: usize) -> Result<(Tensor<T>, CropRecord)> {
    if multiple == 0 {
        return Err(invalid_arg!("grid multiple must be at least 1"));
    }
    let s = x.shape();
    let up = |n: usize| n.div_ceil(multiple) * multiple;
    let record = CropRecord {
        height: s.height,
        width: s.width,
        origin: (0, 0),
    };
    Ok((x.resize_spatial(up(s.height), up(s.width)), record))
}

/// Undo [`pad_to_grid`].
pub fn crop<T: crate::autodiff::Element>(x: &Tensor<T>, record: &CropRecord) -> Tensor<T> {
    x.resize_spatial(record.height, record.width)
}

/// Path of the JSON sidecar for a checkpoint path.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl UnetModel {
    /// Fresh model. Convolution weights are uniform in `±sqrt(6 / fan_in)`,
    /// biases and batch-norm shifts zero, batch-norm scales one.
    pub fn build(config: UnetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut bn_stats = Vec::new();
        for (name, shape) in param_shapes(&config) {
            let t = if name.ends_with(".weight") {
                let fan_in = if name.ends_with("up.weight") {
                    shape.batch
                } else {
                    shape.channels * shape.height * shape.width
                };
                let bound = (6.0 / fan_in as f64).sqrt() as f32;
                let data = (0..shape.numel()).map(|_| rng.random_range(-bound..=bound)).collect();
                Tensor::new(shape, data)?
            } else if name.ends_with(".gamma") {
                bn_stats.push(BatchNormStats::new(shape.channels));
                Tensor::full(shape, 1.0)
            } else {
                Tensor::zeros(shape)
            };
            names.push(name);
            params.push(t);
        }
        Ok(UnetModel {
            config,
            names,
            params,
            bn_stats,
        })
    }

    pub fn config(&self) -> &UnetConfig {
        &self.config
    }

    pub fn parameter_names(&self) -> &[String] {
        &self.names
    }

    pub fn parameters(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    pub fn batch_norm_stats(&self) -> &[BatchNormStats<f32>] {
        &self.bn_stats
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    fn check_input(&self, s: Shape) -> Result<()> {
        if s.channels != self.config.in_channels {
            return Err(shape_err!("u-net expects {} input channel(s), got {s}", self.config.in_channels));
        }
        let m = self.config.grid_multiple();
        if !s.height.is_multiple_of(m) || !s.width.is_multiple_of(m) {
            return Err(shape_err!(
                "input {}x{} is not a multiple of {m} (2^depth) in both dimensions; pad it first",
                s.height,
                s.width
            ));
        }
        Ok(())
    }

    /// Record the network on `g`, returning the logits node.
    fn logits(&self, g: &mut Graph<f32>, x: NodeId, p: &[NodeId], mut stats: Stats<'_>) -> Result<NodeId> {
        let mut cur = Cursor { p, pi: 0, si: 0 };
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = x;
        for _ in 0..self.config.depth {
            h = cur.block(g, h, &mut stats)?;
            h = cur.block(g, h, &mut stats)?;
            skips.push(h);
            h = g.max_pool2(h)?;
        }
        h = cur.block(g, h, &mut stats)?;
        h = cur.block(g, h, &mut stats)?;
        for skip in skips.into_iter().rev() {
            let up = g.up_conv2(h, cur.next())?;
            h = g.concat_channels(skip, up)?;
            h = cur.block(g, h, &mut stats)?;
            h = cur.block(g, h, &mut stats)?;
        }
        let (w, b) = (cur.next(), cur.next());
        debug_assert_eq!(cur.pi, p.len());
        g.conv2d(h, w, b)
    }

    fn record(&self, g: &mut Graph<f32>, trainable: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.input(t.clone()) })
            .collect()
    }

    /// Eval-mode logits (running batch-norm statistics).
    pub fn forward_logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_input(x.shape())?;
        let mut g = Graph::new();
        let p = self.record(&mut g, false);
        let xi = g.input(x.clone());
        let out = self.logits(&mut g, xi, &p, Stats::Running(&self.bn_stats))?;
        Ok(g.take_value(out))
    }

    /// Eval-mode probability map, same spatial size as `x`. Does not change
    /// the model.
    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.forward_logits(x)?.map(sigmoid_value))
    }

    /// Eval-mode weighted logistic loss of a batch.
    pub fn eval_loss(&self, x: &Tensor<f32>, target: &Tensor<f32>, negative_weight: f32) -> Result<f32> {
        self.check_input(x.shape())?;
        let mut g = Graph::new();
        let p = self.record(&mut g, false);
        let xi = g.input(x.clone());
        let z = self.logits(&mut g, xi, &p, Stats::Running(&self.bn_stats))?;
        let loss = g.weighted_logistic_loss(z, target, negative_weight)?;
        Ok(g.value(loss).data()[0])
    }

    /// Train-mode loss and parameter gradients for one batch. Batch norm
    /// uses batch statistics and updates the running ones.
    pub fn loss_and_gradients(
        &mut self,
        x: &Tensor<f32>,
        target: &Tensor<f32>,
        negative_weight: f32,
    ) -> Result<(f32, Vec<Tensor<f32>>)> {
        self.check_input(x.shape())?;
        let mut g = Graph::new();
        let p = self.record(&mut g, true);
        let xi = g.input(x.clone());
        let mut stats = std::mem::take(&mut self.bn_stats);
        let z = self.logits(&mut g, xi, &p, Stats::Batch(&mut stats));
        self.bn_stats = stats;
        let loss = g.weighted_logistic_loss(z?, target, negative_weight)?;
        let value = g.value(loss).data()[0];
        let mut grads = g.backward(loss)?;
        let grads = p
            .iter()
            .zip(&self.params)
            .map(|(&id, t)| grads.take(id).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((value, grads))
    }

    /// Probability map of a whole preprocessed image: zero-pad to the grid,
    /// run in eval mode, crop back.
    pub fn infer_full_image(&self, img: &Image) -> Result<ProbabilityMap> {
        let x = Tensor::new(Shape::new(1, 1, img.height(), img.width()), img.pixels().to_vec())?;
        let (padded, record) = pad_to_grid(&x, self.config.grid_multiple())?;
        let probs = crop(&self.forward(&padded)?, &record);
        ProbabilityMap::new(Image::new(img.width(), img.height(), img.spacing_mm(), probs.into_data())?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (n, t) in self.names.iter().zip(&self.params) {
            ck.push(n.clone(), t.clone());
        }
        let bn_names = self.names.iter().filter(|n| n.ends_with(".bn.gamma"));
        for (n, s) in bn_names.zip(&self.bn_stats) {
            let base = n.trim_end_matches(".gamma");
            let c = s.mean.len();
            ck.push(format!("{base}.running_mean"), Tensor::new(Shape::new(1, c, 1, 1), s.mean.clone()).unwrap());
            ck.push(format!("{base}.running_var"), Tensor::new(Shape::new(1, c, 1, 1), s.var.clone()).unwrap());
        }
        ck
    }

    pub fn from_checkpoint(config: UnetConfig, ck: &Checkpoint) -> Result<Self> {
        let mut model = UnetModel::build(config, 0)?;
        for (n, t) in model.names.iter().zip(model.params.iter_mut()) {
            let stored = ck.require(n)?;
            if stored.shape() != t.shape() {
                return Err(Error::Data(format!(
                    "checkpoint tensor {n} has shape {} but the configuration needs {}",
                    stored.shape(),
                    t.shape()
                )));
            }
            *t = stored.clone();
        }
        let bn_names: Vec<String> = model.names.iter().filter(|n| n.ends_with(".bn.gamma")).cloned().collect();
        for (n, s) in bn_names.iter().zip(model.bn_stats.iter_mut()) {
            let base = n.trim_end_matches(".gamma");
            let mean = ck.require(&format!("{base}.running_mean"))?;
            let var = ck.require(&format!("{base}.running_var"))?;
            if mean.numel() != s.mean.len() || var.numel() != s.var.len() {
                return Err(Error::Data(format!("checkpoint statistics of {base} have the wrong length")));
            }
            s.mean = mean.data().to_vec();
            s.var = var.data().to_vec();
        }
        Ok(model)
    }

    /// Write the checkpoint and its JSON sidecar.
    pub fn save(&self, path: &Path, preprocessing: &PreprocessParams) -> Result<()> {
        self.to_checkpoint().save(path)?;
        let sidecar = ModelSidecar {
            unet: self.config,
            preprocessing: preprocessing.clone(),
        };
        let side = sidecar_path(path);
        let mut json = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::format(&side, e.to_string()))?;
        json.push('\n');
        write_bytes(&side, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<(Self, ModelSidecar)> {
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sidecar: ModelSidecar = serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
        let ck = Checkpoint::load(path)?;
        Ok((UnetModel::from_checkpoint(sidecar.unet, &ck)?, sidecar))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(shape: Shape, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn parameter_shapes_follow_config() {
        let m = UnetModel::build(UnetConfig { depth: 2, base_filters: 8, in_channels: 1 }, 0).unwrap();
        let w = |n: &str| m.parameters()[m.parameter_names().iter().position(|x| x == n).unwrap()].shape();
        assert_eq!(w("enc0.conv0.weight"), Shape::new(8, 1, 3, 3));
        assert_eq!(w("enc1.conv1.weight"), Shape::new(16, 16, 3, 3));
        assert_eq!(w("bottleneck.conv0.weight"), Shape::new(32, 16, 3, 3));
        assert_eq!(w("dec1.up.weight"), Shape::new(32, 16, 2, 2));
        assert_eq!(w("dec0.conv0.weight"), Shape::new(8, 16, 3, 3));
        assert_eq!(w("head.weight"), Shape::new(1, 8, 1, 1));
        assert_eq!(m.batch_norm_stats().len(), 10);
    }

    #[test]
    fn equal_seeds_equal_parameters() {
        let cfg = UnetConfig::default();
        assert_eq!(UnetModel::build(cfg, 4).unwrap(), UnetModel::build(cfg, 4).unwrap());
        assert_ne!(UnetModel::build(cfg, 4).unwrap(), UnetModel::build(cfg, 5).unwrap());
    }

    #[test]
    fn shape_preserved_and_in_range() {
        let m = UnetModel::build(UnetConfig { depth: 2, base_filters: 4, in_channels: 1 }, 1).unwrap();
        let y = m.forward(&noise(Shape::new(2, 1, 24, 20), 0)).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 1, 24, 20));
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn indivisible_input_names_multiple() {
        let m = UnetModel::build(UnetConfig::default(), 1).unwrap();
        let err = m.forward(&noise(Shape::new(1, 1, 20, 16), 0)).unwrap_err().to_string();
        assert!(err.contains("multiple of 8"), "{err}");
    }

    #[test]
    fn pad_and_crop() {
        let x = noise(Shape::new(1, 1, 345, 345), 2);
        let (p, rec) = pad_to_grid(&x, 8).unwrap();
        assert_eq!((p.shape().height, p.shape().width), (352, 352));
        assert_eq!(rec, CropRecord { height: 345, width: 345, origin: (0, 0) });
        assert_eq!(crop(&p, &rec), x);
        let y = noise(Shape::new(1, 1, 344, 344), 3);
        assert_eq!(pad_to_grid(&y, 8).unwrap().0, y);
        assert!(pad_to_grid(&y, 0).is_err());
    }

    #[test]
    fn eval_is_pure_and_train_updates_stats() {
        let mut m = UnetModel::build(UnetConfig { depth: 1, base_filters: 2, in_channels: 1 }, 3).unwrap();
        let x = noise(Shape::new(2, 1, 8, 8), 4);
        let before = m.clone();
        let a = m.forward(&x).unwrap();
        let b = m.forward(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(m, before);
        let t = Tensor::zeros(x.shape());
        m.loss_and_gradients(&x, &t, 0.25).unwrap();
        assert_ne!(m.batch_norm_stats(), before.batch_norm_stats());
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut m = UnetModel::build(UnetConfig { depth: 2, base_filters: 2, in_channels: 1 }, 8).unwrap();
        let x = noise(Shape::new(1, 1, 8, 8), 1);
        m.loss_and_gradients(&x, &Tensor::zeros(x.shape()), 0.25).unwrap();
        m.save(&path, &PreprocessParams::default()).unwrap();
        let (back, side) = UnetModel::load(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(side.unet, *m.config());
        assert_eq!(side.preprocessing, PreprocessParams::default());
    }

    #[test]
    fn infer_full_image_keeps_dims() {
        let m = UnetModel::build(UnetConfig { depth: 2, base_filters: 2, in_channels: 1 }, 8).unwrap();
        let img = Image::from_fn(13, 9, 0.2, |x, y| ((x * y) % 5) as f32 / 5.0).unwrap();
        let map = m.infer_full_image(&img).unwrap();
        assert_eq!((map.width(), map.height(), map.spacing_mm()), (13, 9, 0.2));
        assert_eq!(map, m.infer_full_image(&img).unwrap());
    }
}
