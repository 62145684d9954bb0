//! Pluggable augmentation strategies.
//!
//! The trainer is written against [`AugStrategy`]; which statistics are
//! tracked and which loss terms are produced is decided by the concrete
//! strategy selected by name from the config. Three are registered:
//!
//! * `none` — no augmentation, plain cross-entropy everywhere.
//! * `latent` — the closed-form augmented loss over latent categories,
//!   tracking one Gaussian per latent embedding.
//! * `raw_isda` — the same closed-form bound applied directly to the pooled
//!   decoder features with one Gaussian per *class*, replacing the per-item
//!   classification cross-entropy. Kept as a contrast arm for ablations.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::isda::{self, RunningStats};
use crate::pool::{DecoderVars, PoolVars};
use crate::tensor::Tensor;

/// Names accepted by [`make_strategy`], in registry order.
pub const STRATEGY_NAMES: [&str; 3] = ["none", "latent", "raw_isda"];

/// Hooks the training loop calls; every method has a no-op default so a
/// strategy only implements the parts it participates in.
pub trait AugStrategy: std::fmt::Debug {
    /// Registry name, echoed in logs and metrics.
    fn name(&self) -> &'static str;

    /// Extra loss term over the latent pool (the augmented latent
    /// classification), or `None` when the strategy adds nothing.
    fn latent_term(
        &mut self,
        _g: &mut Graph,
        _pool: &PoolVars,
        _lambda: f64,
    ) -> Result<Option<Var>> {
        Ok(None)
    }

    /// Replacement for one item's classification cross-entropy given the
    /// pooled decoder input `[D, 1]`, or `None` to keep plain cross-entropy.
    fn class_term(
        &mut self,
        _g: &mut Graph,
        _pooled: Var,
        _dec: &DecoderVars,
        _label: usize,
        _lambda: f64,
    ) -> Result<Option<Var>> {
        Ok(None)
    }

    /// Record the post-update latent embeddings for one iteration.
    fn observe_latents(&mut self, _latents: &Tensor, _batch_size: u64) -> Result<()> {
        Ok(())
    }

    /// Record one item's pooled feature vector with its true class.
    fn observe_feature(&mut self, _feature: &[f64], _label: usize) -> Result<()> {
        Ok(())
    }

    /// Statistics to persist in checkpoints, if the strategy keeps any.
    fn stats(&self) -> Option<&RunningStats> {
        None
    }

    /// Restore statistics from a checkpoint. Strategies without state accept
    /// and ignore.
    fn load_stats(&mut self, _stats: RunningStats) -> Result<()> {
        Ok(())
    }
}

/// Plain training: no extra terms, no statistics.
#[derive(Debug, Default)]
pub struct NoAug;

impl AugStrategy for NoAug {
    fn name(&self) -> &'static str {
        "none"
    }
}

/// Closed-form augmentation over latent categories: one running Gaussian per
/// latent embedding, refreshed every iteration, feeding the latent-space
/// augmented loss.
#[derive(Debug)]
pub struct LatentAug {
    stats: RunningStats,
}

impl LatentAug {
    pub fn new(num_latents: usize, dim: usize) -> Result<Self> {
        Ok(Self { stats: RunningStats::new(num_latents, dim)? })
    }
}

impl AugStrategy for LatentAug {
    fn name(&self) -> &'static str {
        "latent"
    }

    fn latent_term(&mut self, g: &mut Graph, pool: &PoolVars, lambda: f64) -> Result<Option<Var>> {
        isda::latent_aug_loss(g, pool, &self.stats, lambda).map(Some)
    }

    fn observe_latents(&mut self, latents: &Tensor, batch_size: u64) -> Result<()> {
        self.stats.observe_iteration(latents, batch_size)
    }

    fn stats(&self) -> Option<&RunningStats> {
        Some(&self.stats)
    }

    fn load_stats(&mut self, stats: RunningStats) -> Result<()> {
        if stats.categories() != self.stats.categories() || stats.dim() != self.stats.dim() {
            return Err(Error::Shape(format!(
                "checkpoint statistics ({}, {}) do not match strategy ({}, {})",
                stats.categories(),
                stats.dim(),
                self.stats.categories(),
                self.stats.dim()
            )));
        }
        self.stats = stats;
        Ok(())
    }
}

/// Contrast arm: apply the closed-form bound to the pooled decoder features
/// themselves, with one running Gaussian per true class. Replaces the per-item
/// classification cross-entropy instead of adding a latent term.
#[derive(Debug)]
pub struct RawFeatureIsda {
    stats: RunningStats,
}

impl RawFeatureIsda {
    pub fn new(num_classes: usize, dim: usize) -> Result<Self> {
        Ok(Self { stats: RunningStats::new(num_classes, dim)? })
    }
}

impl AugStrategy for RawFeatureIsda {
    fn name(&self) -> &'static str {
        "raw_isda"
    }

    fn class_term(
        &mut self,
        g: &mut Graph,
        pooled: Var,
        dec: &DecoderVars,
        label: usize,
        lambda: f64,
    ) -> Result<Option<Var>> {
        if label >= self.stats.categories() {
            return Err(Error::LabelOutOfRange { label, classes: self.stats.categories() });
        }
        isda::isda_bound_ce(
            g,
            pooled,
            dec.cls_weight,
            dec.cls_bias,
            self.stats.cov(label),
            label,
            lambda,
        )
        .map(Some)
    }

    fn observe_feature(&mut self, feature: &[f64], label: usize) -> Result<()> {
        if label >= self.stats.categories() {
            return Err(Error::LabelOutOfRange { label, classes: self.stats.categories() });
        }
        let zeros = vec![0.0; feature.len() * feature.len()];
        self.stats.update(label, feature, &zeros, 1)
    }

    fn stats(&self) -> Option<&RunningStats> {
        Some(&self.stats)
    }

    fn load_stats(&mut self, stats: RunningStats) -> Result<()> {
        if stats.categories() != self.stats.categories() || stats.dim() != self.stats.dim() {
            return Err(Error::Shape(format!(
                "checkpoint statistics ({}, {}) do not match strategy ({}, {})",
                stats.categories(),
                stats.dim(),
                self.stats.categories(),
                self.stats.dim()
            )));
        }
        self.stats = stats;
        Ok(())
    }
}

/// Look a strategy up by its registered name.
pub fn make_strategy(
    name: &str,
    num_classes: usize,
    num_latents: usize,
    feature_dim: usize,
) -> Result<Box<dyn AugStrategy>> {
    match name {
        "none" => Ok(Box::new(NoAug)),
        "latent" => Ok(Box::new(LatentAug::new(num_latents, feature_dim)?)),
        "raw_isda" => Ok(Box::new(RawFeatureIsda::new(num_classes, feature_dim)?)),
        other => {
            Err(Error::UnknownStrategy { name: other.to_string(), known: STRATEGY_NAMES.to_vec() })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;
    use crate::pool::LatentPool;
    use crate::rng::Rng;

    #[test]
    fn registry_resolves_all_names() {
        for name in STRATEGY_NAMES {
            let s = make_strategy(name, 10, 4, 6).unwrap();
            assert_eq!(s.name(), name);
        }
    }

    #[test]
    fn registry_rejects_unknown_names() {
        match make_strategy("cutmix", 10, 4, 6) {
            Err(Error::UnknownStrategy { name, known }) => {
                assert_eq!(name, "cutmix");
                assert_eq!(known, STRATEGY_NAMES.to_vec());
            }
            other => panic!("expected UnknownStrategy, got {other:?}"),
        }
    }

    #[test]
    fn none_strategy_contributes_nothing() {
        let mut s = make_strategy("none", 3, 2, 4).unwrap();
        let mut g = Graph::new();
        let mut rng = Rng::seeded(80);
        let pool = LatentPool::init(2, 4, &mut rng).unwrap();
        let (vars, _) = pool_vars(&mut g, &pool);
        assert!(s.latent_term(&mut g, &vars.0, 0.3).unwrap().is_none());
        assert!(s.stats().is_none());
        s.observe_latents(&pool.latents, 8).unwrap();
        s.observe_feature(&[1.0, 2.0, 3.0, 4.0], 1).unwrap();
    }

    fn pool_vars(g: &mut Graph, pool: &LatentPool) -> ((PoolVars, DecoderVars), ()) {
        let pv = PoolVars {
            latents: g.leaf(&pool.latents),
            proj_weight: g.leaf(&pool.proj_weight),
            proj_bias: g.leaf(&pool.proj_bias),
            head_weight: g.leaf(&pool.head_weight),
            head_bias: g.leaf(&pool.head_bias),
        };
        let dec = DecoderVars {
            fuse_weight: pv.proj_weight,
            fuse_bias: pv.proj_bias,
            cls_weight: pv.head_weight,
            cls_bias: pv.head_bias,
        };
        ((pv, dec), ())
    }

    #[test]
    fn latent_strategy_tracks_embeddings_and_produces_the_bound() {
        let mut rng = Rng::seeded(81);
        let pool = LatentPool::init(3, 4, &mut rng).unwrap();
        let mut s = make_strategy("latent", 10, 3, 4).unwrap();
        s.observe_latents(&pool.latents, 16).unwrap();
        assert_eq!(s.stats().unwrap().count(0), 16);

        let mut g = Graph::new();
        let ((pv, _), ()) = pool_vars(&mut g, &pool);
        let term = s.latent_term(&mut g, &pv, 0.0).unwrap().unwrap();
        let got = g.value(term)[0];

        // With lambda = 0 the term is the mean plain cross-entropy of each
        // embedding against the latent head.
        let mut want = 0.0;
        for m in 0..3 {
            let mut logits = vec![0.0; 3];
            for (k, logit) in logits.iter_mut().enumerate() {
                *logit = pool.head_bias.data()[k]
                    + pool
                        .head_weight
                        .row(k)
                        .iter()
                        .zip(pool.latents.row(m))
                        .map(|(w, f)| w * f)
                        .sum::<f64>();
            }
            want += ops::cross_entropy_logits(&logits, m).unwrap();
        }
        want /= 3.0;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn raw_strategy_replaces_class_loss_and_matches_plain_ce_before_stats() {
        let mut s = make_strategy("raw_isda", 3, 2, 2).unwrap();
        let mut g = Graph::new();
        let pooled_t = Tensor::new(vec![2, 1], vec![0.4, -0.2]).unwrap();
        let w_t = Tensor::with_grad(
            Tensor::new(vec![3, 2], vec![0.1, 0.2, -0.3, 0.5, 0.7, -0.1]).unwrap(),
        );
        let b_t = Tensor::with_grad(Tensor::new(vec![3], vec![0.0, 0.1, -0.2]).unwrap());
        let pooled = g.constant(vec![2, 1], pooled_t.data().to_vec()).unwrap();
        let dec = DecoderVars {
            fuse_weight: pooled,
            fuse_bias: pooled,
            cls_weight: g.leaf(&w_t),
            cls_bias: g.leaf(&b_t),
        };

        // No observations yet: covariance is zero, the bound is plain CE.
        let term = s.class_term(&mut g, pooled, &dec, 1, 0.7).unwrap().unwrap();
        let got = g.value(term)[0];
        let logits: Vec<f64> = (0..3)
            .map(|k| {
                b_t.data()[k]
                    + w_t.row(k).iter().zip(pooled_t.data()).map(|(w, f)| w * f).sum::<f64>()
            })
            .collect();
        let want = ops::cross_entropy_logits(&logits, 1).unwrap();
        assert!((got - want).abs() < 1e-12);

        // After observing spread-out features the quadratic penalty kicks in
        // and the bound strictly exceeds plain CE.
        s.observe_feature(&[1.0, 0.0], 1).unwrap();
        s.observe_feature(&[-1.0, 0.0], 1).unwrap();
        let term = s.class_term(&mut g, pooled, &dec, 1, 0.7).unwrap().unwrap();
        let with_cov = g.value(term)[0];
        assert!(with_cov > want + 1e-6, "{with_cov} vs {want}");
    }

    #[test]
    fn load_stats_validates_dimensions() {
        let mut s = make_strategy("latent", 10, 3, 4).unwrap();
        let wrong = RunningStats::new(5, 4).unwrap();
        assert!(s.load_stats(wrong).is_err());
        let right = RunningStats::new(3, 4).unwrap();
        s.load_stats(right).unwrap();
    }
}
