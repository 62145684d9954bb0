//! The latent-category pool: a small set of learnable embeddings shared by
//! all classes, projected and matched against encoder feature maps to
//! produce per-location similarity weights, a reconstructed feature map, a
//! reconstruction loss, and a fused classification head.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Learnable state of the latent pool.
///
/// `latents` holds M latent-category embeddings of width D. `proj_*` is the
/// 1x1 projection applied to each embedding before similarity matching.
/// `head_*` is the M-way latent classifier consumed by the augmentation
/// loss (each latent category is its own pseudo-class).
#[derive(Debug, Clone)]
pub struct LatentPool {
    pub latents: Tensor,     // [M, D]
    pub proj_weight: Tensor, // [D, D]
    pub proj_bias: Tensor,   // [D]
    pub head_weight: Tensor, // [M, D]
    pub head_bias: Tensor,   // [M]
}

/// Tape handles for the pool parameters within one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct PoolVars {
    pub latents: Var,
    pub proj_weight: Var,
    pub proj_bias: Var,
    pub head_weight: Var,
    pub head_bias: Var,
}

/// Tape handles for the decoder: 1x1 fusion projection plus the final linear
/// classifier.
#[derive(Debug, Clone, Copy)]
pub struct DecoderVars {
    pub fuse_weight: Var, // [D, 2D]
    pub fuse_bias: Var,   // [D]
    pub cls_weight: Var,  // [C, D]
    pub cls_bias: Var,    // [C]
}

impl LatentPool {
    /// Fresh pool: embeddings from N(0, 0.02^2) so initial similarities sit
    /// near the uninformative sigmoid midpoint; projection and head use
    /// uniform fan-balanced initialization with zero biases.
    pub fn init(m: usize, d: usize, rng: &mut Rng) -> Result<Self> {
        if m == 0 || d == 0 {
            return Err(Error::InvalidArgument(format!(
                "latent pool needs M, D >= 1, got M={m}, D={d}"
            )));
        }
        let latents: Vec<f64> = (0..m * d).map(|_| 0.02 * rng.normal()).collect();
        let bound = (6.0 / (2.0 * d as f64)).sqrt();
        let proj: Vec<f64> = (0..d * d).map(|_| (rng.uniform() * 2.0 - 1.0) * bound).collect();
        let head_bound = (6.0 / (m + d) as f64).sqrt();
        let head: Vec<f64> = (0..m * d).map(|_| (rng.uniform() * 2.0 - 1.0) * head_bound).collect();
        Ok(Self {
            latents: Tensor::with_grad(Tensor::new(vec![m, d], latents)?),
            proj_weight: Tensor::with_grad(Tensor::new(vec![d, d], proj)?),
            proj_bias: Tensor::with_grad(Tensor::zeros(vec![d])),
            head_weight: Tensor::with_grad(Tensor::new(vec![m, d], head)?),
            head_bias: Tensor::with_grad(Tensor::zeros(vec![m])),
        })
    }

    pub fn num_latents(&self) -> usize {
        self.latents.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.latents.shape()[1]
    }

    /// Record all pool parameters as tape leaves.
    pub fn leaves(&self, g: &mut Graph) -> PoolVars {
        PoolVars {
            latents: g.leaf(&self.latents),
            proj_weight: g.leaf(&self.proj_weight),
            proj_bias: g.leaf(&self.proj_bias),
            head_weight: g.leaf(&self.head_weight),
            head_bias: g.leaf(&self.head_bias),
        }
    }
}

/// Project every latent embedding: column m of the result is
/// `proj_weight @ latents[m] + proj_bias`, shape [D, M].
pub fn encode_latents(g: &mut Graph, pool: &PoolVars) -> Result<Var> {
    let lt = g.transpose(pool.latents)?; // [D, M]
    let projected = g.matmul(pool.proj_weight, lt)?;
    g.add_col_bias(projected, pool.proj_bias)
}

/// Raw similarity stack `S[m, loc] = sigmoid(E[:,m] . f[:,loc])`, shape
/// [M, HW]. Errors if the channel widths of `encoded` and `features`
/// disagree.
pub fn similarity_maps(g: &mut Graph, encoded: Var, features: Var) -> Result<Var> {
    let et = g.transpose(encoded)?; // [M, D]
    let scores = g.matmul(et, features)?; // [M, HW]
    Ok(g.sigmoid(scores))
}

/// Normalize a similarity stack across latent categories, independently at
/// each spatial location: softmax over the M axis.
pub fn normalize_maps(g: &mut Graph, raw: Var) -> Result<Var> {
    g.softmax_cols(raw)
}

/// Reconstructed feature map: each location is the similarity-weighted
/// convex combination of the encoded latents. [D, M] x [M, HW] -> [D, HW].
pub fn reconstruct(g: &mut Graph, encoded: Var, normalized: Var) -> Result<Var> {
    g.matmul(encoded, normalized)
}

/// Reconstruction loss: correlate the reconstruction with the original
/// features, `C = f_hat^T f` ([HW, HW]), and require each location to match
/// itself — row j is treated as a logit vector whose target is the diagonal
/// entry j. Mean cross-entropy over locations.
pub fn recon_loss(g: &mut Graph, f_hat: Var, features: Var) -> Result<Var> {
    let fh_shape = g.shape(f_hat).to_vec();
    let f_shape = g.shape(features).to_vec();
    if fh_shape != f_shape {
        return Err(Error::Shape(format!(
            "recon_loss: reconstruction {fh_shape:?} vs features {f_shape:?}"
        )));
    }
    let fht = g.transpose(f_hat)?; // [HW, D]
    let corr = g.matmul(fht, features)?; // [HW, HW]
    let hw = g.shape(corr)[0];
    let ce = g.cross_entropy_rows(corr, (0..hw).collect())?;
    Ok(g.mean_all(ce))
}

/// Fuse original and reconstructed features into the decoder input:
/// channel-concat to [2D, HW], 1x1 projection back to D channels with ReLU,
/// then global average pool. Returns the pooled vector of shape [D, 1].
pub fn fuse_pooled(g: &mut Graph, features: Var, f_hat: Var, dec: &DecoderVars) -> Result<Var> {
    let cat = g.concat_rows(features, f_hat)?; // [2D, HW]
    let mixed = g.matmul(dec.fuse_weight, cat)?; // [D, HW]
    let mixed = g.add_col_bias(mixed, dec.fuse_bias)?;
    let mixed = g.relu(mixed);
    g.mean_cols(mixed) // [D, 1]
}

/// Final linear classifier on a pooled feature vector. [C, D] x [D, 1] + [C].
pub fn apply_classifier(g: &mut Graph, pooled: Var, cls_weight: Var, cls_bias: Var) -> Result<Var> {
    let logits = g.matmul(cls_weight, pooled)?;
    g.add_col_bias(logits, cls_bias)
}

/// Fuse original and reconstructed features and classify.
/// Returns logits of shape [C, 1].
pub fn fuse_and_classify(
    g: &mut Graph,
    features: Var,
    f_hat: Var,
    dec: &DecoderVars,
) -> Result<Var> {
    let pooled = fuse_pooled(g, features, f_hat, dec)?;
    apply_classifier(g, pooled, dec.cls_weight, dec.cls_bias)
}

/// Baseline head: classify the global average pool of the raw feature map,
/// bypassing the latent pool entirely. Returns logits of shape [C, 1].
pub fn classify_gap(g: &mut Graph, features: Var, cls_weight: Var, cls_bias: Var) -> Result<Var> {
    let pooled = g.mean_cols(features)?; // [D, 1]
    apply_classifier(g, pooled, cls_weight, cls_bias)
}
