//! The complete network: a small 3x3-conv encoder, the latent pool, and the
//! fused decoder/classifier, with named-tensor checkpointing.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::isda::RunningStats;
use crate::pool::{self, DecoderVars, LatentPool, PoolVars};
use crate::rng::Rng;
use crate::tensor::Tensor;

const KERNEL: usize = 3;

/// Which parameters participate in gradient computation for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    All,
    /// Stage-2 finetuning: only the final linear classifier.
    ClassifierOnly,
    /// Evaluation: everything enters the tape as constants.
    None,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub input_channels: usize,
    /// 3x3 same-padding conv stack; layer i maps `channels[i]` to
    /// `channels[i+1]` with weights `[c_out, c_in*9]`.
    pub conv_weights: Vec<Tensor>,
    pub conv_biases: Vec<Tensor>,
    pub pool: LatentPool,
    pub fuse_weight: Tensor, // [D, 2D]
    pub fuse_bias: Tensor,   // [D]
    pub cls_weight: Tensor,  // [C, D]
    pub cls_bias: Tensor,    // [C]
    /// Route features through the latent pool and fused decoder; off means
    /// plain encoder + GAP + classifier.
    pub use_latent: bool,
}

/// Tape handles for all model parameters in one forward pass.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub conv: Vec<(Var, Var)>,
    pub pool: PoolVars,
    pub dec: DecoderVars,
}

fn uniform_init(shape: Vec<usize>, bound: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| (rng.uniform() * 2.0 - 1.0) * bound).collect();
    Tensor::with_grad(Tensor::new(shape, data).expect("shape matches data"))
}

impl Model {
    pub fn init(
        cfg: &ExperimentConfig,
        input_channels: usize,
        num_classes: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if input_channels == 0 || num_classes == 0 {
            return Err(Error::InvalidArgument(
                "model needs input_channels, num_classes >= 1".to_string(),
            ));
        }
        let d = cfg.feature_dim;
        let mut widths = vec![input_channels];
        widths.extend_from_slice(&cfg.encoder_channels);
        widths.push(d);

        let mut conv_weights = Vec::new();
        let mut conv_biases = Vec::new();
        for pair in widths.windows(2) {
            let (c_in, c_out) = (pair[0], pair[1]);
            let fan_in = (c_in * KERNEL * KERNEL) as f64;
            conv_weights.push(uniform_init(
                vec![c_out, c_in * KERNEL * KERNEL],
                (6.0 / fan_in).sqrt(),
                rng,
            ));
            conv_biases.push(Tensor::with_grad(Tensor::zeros(vec![c_out])));
        }

        let pool = LatentPool::init(cfg.latent_count, d, rng)?;
        let fuse_weight = uniform_init(vec![d, 2 * d], (6.0 / (3.0 * d as f64)).sqrt(), rng);
        let cls_weight =
            uniform_init(vec![num_classes, d], (6.0 / (num_classes + d) as f64).sqrt(), rng);
        Ok(Self {
            input_channels,
            conv_weights,
            conv_biases,
            pool,
            fuse_weight,
            fuse_bias: Tensor::with_grad(Tensor::zeros(vec![d])),
            cls_weight,
            cls_bias: Tensor::with_grad(Tensor::zeros(vec![num_classes])),
            use_latent: cfg.use_latent,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.cls_weight.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.pool.dim()
    }

    pub fn num_latents(&self) -> usize {
        self.pool.num_latents()
    }

    /// Stable parameter enumeration used by the optimizer and checkpoints.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        for (i, t) in self.conv_weights.iter().enumerate() {
            out.push((format!("conv{i}_weight"), t));
        }
        for (i, t) in self.conv_biases.iter().enumerate() {
            out.push((format!("conv{i}_bias"), t));
        }
        out.push(("latents".to_string(), &self.pool.latents));
        out.push(("proj_weight".to_string(), &self.pool.proj_weight));
        out.push(("proj_bias".to_string(), &self.pool.proj_bias));
        out.push(("head_weight".to_string(), &self.pool.head_weight));
        out.push(("head_bias".to_string(), &self.pool.head_bias));
        out.push(("fuse_weight".to_string(), &self.fuse_weight));
        out.push(("fuse_bias".to_string(), &self.fuse_bias));
        out.push(("cls_weight".to_string(), &self.cls_weight));
        out.push(("cls_bias".to_string(), &self.cls_bias));
        out
    }

    pub fn visit_tensors_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        for (i, t) in self.conv_weights.iter_mut().enumerate() {
            f(&format!("conv{i}_weight"), t);
        }
        for (i, t) in self.conv_biases.iter_mut().enumerate() {
            f(&format!("conv{i}_bias"), t);
        }
        f("latents", &mut self.pool.latents);
        f("proj_weight", &mut self.pool.proj_weight);
        f("proj_bias", &mut self.pool.proj_bias);
        f("head_weight", &mut self.pool.head_weight);
        f("head_bias", &mut self.pool.head_bias);
        f("fuse_weight", &mut self.fuse_weight);
        f("fuse_bias", &mut self.fuse_bias);
        f("cls_weight", &mut self.cls_weight);
        f("cls_bias", &mut self.cls_bias);
    }

    fn is_classifier(name: &str) -> bool {
        name.starts_with("cls_")
    }

    /// Record all parameters on the tape, honoring the trainability mode, and
    /// return the handles plus the (name, var) list in enumeration order.
    pub fn leaves(&self, g: &mut Graph, trainable: Trainable) -> (ModelVars, Vec<(String, Var)>) {
        let mut named = Vec::new();
        {
            let mut record = |name: String, t: &Tensor| -> Var {
                let grad = match trainable {
                    Trainable::All => true,
                    Trainable::ClassifierOnly => Self::is_classifier(&name),
                    Trainable::None => false,
                };
                let var = if grad {
                    g.leaf(t)
                } else {
                    g.constant(t.shape().to_vec(), t.data().to_vec())
                        .expect("stored tensors are well-formed")
                };
                named.push((name, var));
                var
            };
            for (name, t) in self.named_tensors() {
                record(name, t);
            }
        }
        let lookup = |want: &str| -> Var {
            named
                .iter()
                .find(|(name, _)| name == want)
                .map(|(_, v)| *v)
                .expect("all model tensors are enumerated")
        };
        let conv = (0..self.conv_weights.len())
            .map(|i| (lookup(&format!("conv{i}_weight")), lookup(&format!("conv{i}_bias"))))
            .collect();
        let vars = ModelVars {
            conv,
            pool: PoolVars {
                latents: lookup("latents"),
                proj_weight: lookup("proj_weight"),
                proj_bias: lookup("proj_bias"),
                head_weight: lookup("head_weight"),
                head_bias: lookup("head_bias"),
            },
            dec: DecoderVars {
                fuse_weight: lookup("fuse_weight"),
                fuse_bias: lookup("fuse_bias"),
                cls_weight: lookup("cls_weight"),
                cls_bias: lookup("cls_bias"),
            },
        };
        (vars, named)
    }

    /// Run the conv encoder on one image, producing the feature map
    /// `[D, H*W]` plus the spatial extent.
    pub fn forward_features(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        image: &Tensor,
    ) -> Result<(Var, usize, usize)> {
        let shape = image.shape();
        if shape.len() != 3 || shape[0] != self.input_channels {
            return Err(Error::Shape(format!(
                "expected image [{}, H, W], got {shape:?}",
                self.input_channels
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        let mut x = g.constant(vec![shape[0], h * w], image.data().to_vec())?;
        for &(weight, bias) in &vars.conv {
            let cols = g.im2col(x, h, w, KERNEL)?;
            let conv = g.matmul(weight, cols)?;
            let conv = g.add_col_bias(conv, bias)?;
            x = g.relu(conv);
        }
        Ok((x, h, w))
    }

    /// Latent-pool pass over a feature map: normalized similarity stack
    /// `[M, HW]` and reconstruction `[D, HW]`.
    pub fn forward_latent(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        features: Var,
    ) -> Result<(Var, Var)> {
        let encoded = pool::encode_latents(g, &vars.pool)?;
        let raw = pool::similarity_maps(g, encoded, features)?;
        let normalized = pool::normalize_maps(g, raw)?;
        let f_hat = pool::reconstruct(g, encoded, normalized)?;
        Ok((normalized, f_hat))
    }

    /// Decoder input for one image: the `[D, 1]` pooled vector fed to the
    /// final classifier, following the configured path (latent-fused or plain
    /// GAP). Also returns the feature map for callers that need it.
    pub fn forward_pooled(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        image: &Tensor,
    ) -> Result<(Var, Var)> {
        let (features, _, _) = self.forward_features(g, vars, image)?;
        let pooled = if self.use_latent {
            let (_, f_hat) = self.forward_latent(g, vars, features)?;
            pool::fuse_pooled(g, features, f_hat, &vars.dec)?
        } else {
            g.mean_cols(features)?
        };
        Ok((pooled, features))
    }

    /// Per-image logits `[C, 1]` following the configured path.
    pub fn forward_logits(&self, g: &mut Graph, vars: &ModelVars, image: &Tensor) -> Result<Var> {
        let (pooled, _) = self.forward_pooled(g, vars, image)?;
        pool::apply_classifier(g, pooled, vars.dec.cls_weight, vars.dec.cls_bias)
    }

    /// Evaluation-only forward: class logits for one image.
    pub fn classify(&self, image: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let (vars, _) = self.leaves(&mut g, Trainable::None);
        let logits = self.forward_logits(&mut g, &vars, image)?;
        Ok(g.value(logits).to_vec())
    }

    /// Spatially averaged normalized similarity per latent category for one
    /// image: a length-M weight vector on the simplex.
    pub fn latent_weights(&self, image: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let (vars, _) = self.leaves(&mut g, Trainable::None);
        let (features, _, _) = self.forward_features(&mut g, &vars, image)?;
        let (normalized, _) = self.forward_latent(&mut g, &vars, features)?;
        let weights = g.mean_cols(normalized)?;
        Ok(g.value(weights).to_vec())
    }

    /// Save all tensors plus optional running statistics into `dir`, with a
    /// manifest recording names, shapes, and the training step.
    pub fn save(&self, dir: &Path, step: u64, stats: Option<&RunningStats>) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (name, tensor) in self.named_tensors() {
            tensor.save(&dir.join(format!("{name}.lct")))?;
            entries.push(ManifestTensor { name, shape: tensor.shape().to_vec() });
        }
        if let Some(stats) = stats {
            let (n, mu, sigma) = stats.to_tensors();
            for (name, tensor) in [("stats_n", &n), ("stats_mu", &mu), ("stats_sigma", &sigma)] {
                tensor.save(&dir.join(format!("{name}.lct")))?;
                entries.push(ManifestTensor {
                    name: name.to_string(),
                    shape: tensor.shape().to_vec(),
                });
            }
        }
        let manifest = Manifest {
            step,
            use_latent: self.use_latent,
            input_channels: self.input_channels,
            conv_layers: self.conv_weights.len(),
            tensors: entries,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Load a checkpoint saved by [`Model::save`]. Missing tensor files are
    /// reported together by name.
    pub fn load(dir: &Path) -> Result<(Self, Option<RunningStats>, u64)> {
        let manifest_path = dir.join("manifest.json");
        if !manifest_path.is_file() {
            return Err(Error::MissingFile(manifest_path));
        }
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;

        let mut required: Vec<String> = Vec::new();
        for i in 0..manifest.conv_layers {
            required.push(format!("conv{i}_weight"));
            required.push(format!("conv{i}_bias"));
        }
        required.extend(
            [
                "latents",
                "proj_weight",
                "proj_bias",
                "head_weight",
                "head_bias",
                "fuse_weight",
                "fuse_bias",
                "cls_weight",
                "cls_bias",
            ]
            .map(String::from),
        );

        let listed: Vec<&str> = manifest.tensors.iter().map(|t| t.name.as_str()).collect();
        let mut missing: Vec<String> =
            required.iter().filter(|name| !listed.contains(&name.as_str())).cloned().collect();
        missing.extend(
            manifest
                .tensors
                .iter()
                .filter(|t| !dir.join(format!("{}.lct", t.name)).is_file())
                .map(|t| t.name.clone()),
        );
        if !missing.is_empty() {
            missing.dedup();
            return Err(Error::MissingTensors(missing));
        }

        let load_named = |name: &str| -> Result<Tensor> {
            let mut t = Tensor::load(&dir.join(format!("{name}.lct")))?;
            let declared =
                manifest.tensors.iter().find(|e| e.name == name).expect("presence checked above");
            if t.shape() != declared.shape.as_slice() {
                return Err(Error::BadTensorFile {
                    path: dir.join(format!("{name}.lct")),
                    reason: format!(
                        "shape {:?} does not match manifest {:?}",
                        t.shape(),
                        declared.shape
                    ),
                });
            }
            t.requires_grad = true;
            Ok(t)
        };

        let mut conv_weights = Vec::new();
        let mut conv_biases = Vec::new();
        for i in 0..manifest.conv_layers {
            conv_weights.push(load_named(&format!("conv{i}_weight"))?);
            conv_biases.push(load_named(&format!("conv{i}_bias"))?);
        }
        let model = Self {
            input_channels: manifest.input_channels,
            conv_weights,
            conv_biases,
            pool: LatentPool {
                latents: load_named("latents")?,
                proj_weight: load_named("proj_weight")?,
                proj_bias: load_named("proj_bias")?,
                head_weight: load_named("head_weight")?,
                head_bias: load_named("head_bias")?,
            },
            fuse_weight: load_named("fuse_weight")?,
            fuse_bias: load_named("fuse_bias")?,
            cls_weight: load_named("cls_weight")?,
            cls_bias: load_named("cls_bias")?,
            use_latent: manifest.use_latent,
        };

        let stats = if listed.contains(&"stats_n") {
            let n = load_named("stats_n")?;
            let mu = load_named("stats_mu")?;
            let sigma = load_named("stats_sigma")?;
            Some(RunningStats::from_tensors(&n, &mu, &sigma)?)
        } else {
            None
        };
        Ok((model, stats, manifest.step))
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestTensor {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    step: u64,
    use_latent: bool,
    input_channels: usize,
    conv_layers: usize,
    tensors: Vec<ManifestTensor>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            latent_count: 4,
            feature_dim: 6,
            encoder_channels: vec![5],
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn init_shapes() {
        let mut rng = Rng::seeded(70);
        let model = Model::init(&small_config(), 1, 10, &mut rng).unwrap();
        assert_eq!(model.conv_weights.len(), 2);
        assert_eq!(model.conv_weights[0].shape(), &[5, 9]);
        assert_eq!(model.conv_weights[1].shape(), &[6, 45]);
        assert_eq!(model.pool.latents.shape(), &[4, 6]);
        assert_eq!(model.fuse_weight.shape(), &[6, 12]);
        assert_eq!(model.cls_weight.shape(), &[10, 6]);
        for (name, t) in model.named_tensors() {
            assert!(t.data().iter().all(|v| v.is_finite()), "{name} has non-finite values");
        }
    }

    #[test]
    fn forward_matches_naive_convolution() {
        // Single 3x3 conv layer, checked against an explicit sliding-window
        // implementation with zero padding.
        let mut cfg = small_config();
        cfg.encoder_channels = vec![];
        cfg.feature_dim = 2;
        let mut rng = Rng::seeded(71);
        let model = Model::init(&cfg, 1, 3, &mut rng).unwrap();
        let image = Tensor::new(vec![1, 3, 3], (1..=9).map(|v| v as f64 / 4.0).collect()).unwrap();

        let mut g = Graph::new();
        let (vars, _) = model.leaves(&mut g, Trainable::None);
        let (f, h, w) = model.forward_features(&mut g, &vars, &image).unwrap();
        assert_eq!((h, w), (3, 3));
        assert_eq!(g.shape(f), &[2, 9]);

        let weight = model.conv_weights[0].data();
        let bias = model.conv_biases[0].data();
        for out_c in 0..2 {
            for y in 0..3usize {
                for x in 0..3usize {
                    let mut acc = bias[out_c];
                    for ky in 0..3usize {
                        for kx in 0..3usize {
                            let (sy, sx) =
                                (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                            if !(0..3).contains(&sy) || !(0..3).contains(&sx) {
                                continue;
                            }
                            acc += weight[out_c * 9 + ky * 3 + kx]
                                * image.data()[(sy * 3 + sx) as usize];
                        }
                    }
                    let want = acc.max(0.0);
                    let got = g.value(f)[out_c * 9 + y * 3 + x];
                    assert!((got - want).abs() < 1e-12, "({out_c},{y},{x}): {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn classifier_only_mode_freezes_everything_else() {
        let mut rng = Rng::seeded(72);
        let model = Model::init(&small_config(), 1, 4, &mut rng).unwrap();
        let image = Tensor::new(vec![1, 4, 4], (0..16).map(|v| v as f64 / 8.0).collect()).unwrap();

        let mut g = Graph::new();
        let (vars, named) = model.leaves(&mut g, Trainable::ClassifierOnly);
        let logits = model.forward_logits(&mut g, &vars, &image).unwrap();
        let row = g.transpose(logits).unwrap();
        let ce = g.cross_entropy_rows(row, vec![2]).unwrap();
        let loss = g.mean_all(ce);
        let grads = g.backward(loss).unwrap();

        for (name, var) in &named {
            let got = grads.get(*var).is_some();
            let want = name.starts_with("cls_");
            assert_eq!(got, want, "{name}: gradient presence {got}");
        }
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let mut rng = Rng::seeded(73);
        let model = Model::init(&small_config(), 1, 10, &mut rng).unwrap();
        let mut stats = RunningStats::new(4, 6).unwrap();
        stats.observe_iteration(&model.pool.latents, 16).unwrap();

        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path(), 1234, Some(&stats)).unwrap();
        let (back, back_stats, step) = Model::load(dir.path()).unwrap();
        assert_eq!(step, 1234);
        assert_eq!(back.use_latent, model.use_latent);
        assert_eq!(back_stats.unwrap(), stats);
        let originals = model.named_tensors();
        for ((name_a, a), (name_b, b)) in originals.iter().zip(back.named_tensors().iter()) {
            assert_eq!(name_a, name_b);
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name_a} differs");
            }
        }
    }

    #[test]
    fn load_reports_missing_tensors_by_name() {
        let mut rng = Rng::seeded(74);
        let model = Model::init(&small_config(), 1, 10, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path(), 0, None).unwrap();
        fs::remove_file(dir.path().join("head_weight.lct")).unwrap();
        fs::remove_file(dir.path().join("cls_bias.lct")).unwrap();
        match Model::load(dir.path()) {
            Err(Error::MissingTensors(names)) => {
                assert!(names.contains(&"head_weight".to_string()));
                assert!(names.contains(&"cls_bias".to_string()));
            }
            other => panic!("expected MissingTensors, got {other:?}"),
        }
    }

    #[test]
    fn latent_weights_uniform_for_zeroed_pool() {
        let mut rng = Rng::seeded(75);
        let mut model = Model::init(&small_config(), 1, 10, &mut rng).unwrap();
        // Zero projection output: every similarity is sigmoid(0), softmax
        // over equal scores is uniform.
        model.pool.proj_weight = Tensor::with_grad(Tensor::zeros(vec![6, 6]));
        model.pool.proj_bias = Tensor::with_grad(Tensor::zeros(vec![6]));
        let image = Tensor::new(vec![1, 4, 4], vec![0.5; 16]).unwrap();
        let weights = model.latent_weights(&image).unwrap();
        assert_eq!(weights.len(), 4);
        for w in weights {
            assert!((w - 0.25).abs() < 1e-12);
        }
    }
}
