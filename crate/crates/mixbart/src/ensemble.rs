//! Bayesian backfitting over the tree ensemble: one sweep proposes a
//! structure move, optionally moves the gate bandwidth, and redraws the
//! leaves of every tree in turn against the residual of all the others.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rng::RngStream;
use crate::tree::SoftTree;
use crate::tree_sampler::{
    propose_structure, update_bandwidth, LeafSystem, MoveKind, SplitProbabilities, TreePrior,
};
use crate::util::RowMatrix;

/// Gate bandwidth used to emulate hard decision rules.
pub const HARD_BANDWIDTH: f64 = 1e-6;

/// Ensemble configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct BartConfig {
    pub trees: usize,
    /// Soft gating; `false` pins the bandwidth to [`HARD_BANDWIDTH`] and
    /// disables the bandwidth move, reusing the same evaluator.
    pub soft: bool,
    /// Sparse Dirichlet splitting weights; `false` keeps them uniform.
    pub sparse: bool,
    /// Depth prior: split probability `split_base (1+d)^{-split_power}`.
    pub split_base: f64,
    pub split_power: f64,
    /// Leaf-value prior standard deviation; `None` uses
    /// `1.5 / (leaf_scale_k sqrt(trees))`.
    pub leaf_scale: Option<f64>,
    pub leaf_scale_k: f64,
    /// MH update of the per-tree gate bandwidth (soft mode only).
    pub bandwidth_update: bool,
    pub bandwidth_init: f64,
    /// Exponential prior rate on the bandwidth.
    pub bandwidth_prior_rate: f64,
    /// Log-scale half-width of the bandwidth random walk.
    pub bandwidth_step: f64,
    /// Dirichlet concentration for the splitting weights.
    pub dirichlet_a: f64,
    /// Discrete-grid hyperprior step on the concentration.
    pub dirichlet_update: bool,
    /// Prior variance of the ensemble-level intercept. The leaf prior applies
    /// to deviations around this level, so it is kept diffuse: the surface,
    /// not the spatial intercepts, should carry the overall log-rate level.
    pub intercept_prior_variance: f64,
}

impl Default for BartConfig {
    fn default() -> Self {
        Self {
            trees: 25,
            soft: true,
            sparse: true,
            split_base: 0.95,
            split_power: 2.0,
            leaf_scale: None,
            leaf_scale_k: 2.0,
            bandwidth_update: true,
            bandwidth_init: 0.1,
            bandwidth_prior_rate: 10.0,
            bandwidth_step: 0.5,
            dirichlet_a: 1.0,
            dirichlet_update: false,
            intercept_prior_variance: 100.0,
        }
    }
}

impl BartConfig {
    pub fn resolved_leaf_scale(&self) -> f64 {
        self.leaf_scale
            .unwrap_or(1.5 / (self.leaf_scale_k * (self.trees as f64).sqrt()))
    }

    pub fn tree_prior(&self) -> TreePrior {
        TreePrior {
            split_base: self.split_base,
            split_power: self.split_power,
            leaf_scale: self.resolved_leaf_scale(),
        }
    }

    pub fn initial_bandwidth(&self) -> f64 {
        if self.soft {
            self.bandwidth_init
        } else {
            HARD_BANDWIDTH
        }
    }
}

/// Per-tree fitted contributions and their running total.
#[derive(Debug, Clone)]
pub struct FitCache {
    per_tree: Vec<Vec<f64>>,
    total: Vec<f64>,
}

impl FitCache {
    pub fn new(trees: usize, rows: usize) -> Self {
        Self {
            per_tree: vec![vec![0.0; rows]; trees],
            total: vec![0.0; rows],
        }
    }

    pub fn total(&self) -> &[f64] {
        &self.total
    }

    pub fn tree_fit(&self, t: usize) -> &[f64] {
        &self.per_tree[t]
    }

    /// Recomputes the running total from the per-tree contributions.
    pub fn refresh_total(&mut self) {
        for v in &mut self.total {
            *v = 0.0;
        }
        for fit in &self.per_tree {
            for (acc, g) in self.total.iter_mut().zip(fit) {
                *acc += g;
            }
        }
    }
}

/// Acceptance counters for one or more sweeps.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq)]
pub struct SweepStats {
    pub grow_proposed: u64,
    pub grow_accepted: u64,
    pub prune_proposed: u64,
    pub prune_accepted: u64,
    pub change_proposed: u64,
    pub change_accepted: u64,
    pub bandwidth_proposed: u64,
    pub bandwidth_accepted: u64,
}

impl SweepStats {
    pub fn merge(&mut self, other: &SweepStats) {
        self.grow_proposed += other.grow_proposed;
        self.grow_accepted += other.grow_accepted;
        self.prune_proposed += other.prune_proposed;
        self.prune_accepted += other.prune_accepted;
        self.change_proposed += other.change_proposed;
        self.change_accepted += other.change_accepted;
        self.bandwidth_proposed += other.bandwidth_proposed;
        self.bandwidth_accepted += other.bandwidth_accepted;
    }

    pub fn bandwidth_rate(&self) -> f64 {
        if self.bandwidth_proposed == 0 {
            f64::NAN
        } else {
            self.bandwidth_accepted as f64 / self.bandwidth_proposed as f64
        }
    }
}

/// The sum-of-trees block of one chain: `f(Z) = intercept + Σ_t g_t(Z)`.
/// The intercept carries the overall level with a diffuse prior; leaf values
/// model centered deviations around it.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub trees: Vec<SoftTree>,
    pub split_probs: SplitProbabilities,
    pub cache: FitCache,
    pub intercept: f64,
    fitted: Vec<f64>,
    config: BartConfig,
    ranges: Vec<(f64, f64)>,
}

impl Ensemble {
    pub fn new(config: BartConfig, n_exposures: usize, ranges: Vec<(f64, f64)>, rows: usize) -> Self {
        let trees = (0..config.trees)
            .map(|_| SoftTree::root_only(config.initial_bandwidth()))
            .collect();
        let split_probs =
            SplitProbabilities::uniform(n_exposures, config.dirichlet_a, config.sparse);
        Self {
            trees,
            split_probs,
            cache: FitCache::new(config.trees, rows),
            intercept: 0.0,
            fitted: vec![0.0; rows],
            config,
            ranges,
        }
    }

    pub fn config(&self) -> &BartConfig {
        &self.config
    }

    /// `f(Z_i)` per row, intercept included.
    pub fn fitted(&self) -> &[f64] {
        &self.fitted
    }

    pub fn set_intercept(&mut self, value: f64) {
        self.intercept = value;
        self.refresh_fitted();
    }

    fn refresh_fitted(&mut self) {
        for (f, t) in self.fitted.iter_mut().zip(self.cache.total()) {
            *f = self.intercept + t;
        }
    }

    /// Restores cache consistency after trees changed externally (e.g. after
    /// deserialization or a tree permutation).
    pub fn rebuild_cache(&mut self, exposures: &RowMatrix) {
        for (t, tree) in self.trees.iter().enumerate() {
            for i in 0..exposures.rows() {
                self.cache.per_tree[t][i] = tree.predict(exposures.row(i));
            }
        }
        self.cache.refresh_total();
        self.refresh_fitted();
    }

    /// Serialized trees with the intercept folded evenly into the leaves, so
    /// the archived ensemble predicts `f` exactly (leaf weights sum to one,
    /// so adding `intercept/T` to every leaf of every tree shifts the sum by
    /// exactly the intercept).
    pub fn serialized_trees(&self) -> Vec<crate::tree::FlatTree> {
        let share = self.intercept / self.trees.len() as f64;
        self.trees
            .iter()
            .map(|tree| {
                let mut shifted = tree.clone();
                let values: Vec<f64> =
                    shifted.leaf_values().iter().map(|v| v + share).collect();
                shifted.set_leaf_values(&values);
                shifted.to_flat()
            })
            .collect()
    }

    /// One backfitting sweep against the weighted working response.
    ///
    /// `kappa[i] = (y_i − ξ)/2` and `other[i]` is the non-tree part of the
    /// linear predictor; the residual enters only through `ω r = κ − ω·(other
    /// + fit of the other trees)`, so nothing blows up when a weight is tiny.
    pub fn backfit_sweep(
        &mut self,
        exposures: &RowMatrix,
        kappa: &[f64],
        omega: &[f64],
        other: &[f64],
        rng: &mut RngStream,
    ) -> Result<SweepStats> {
        let n = exposures.rows();
        let prior = self.config.tree_prior();
        let mut stats = SweepStats::default();
        let mut weighted_resid = vec![0.0; n];
        let mut fit_minus = vec![0.0; n];

        // Conjugate intercept draw against the residual of all trees.
        {
            let mut weight_sum = 1.0 / self.config.intercept_prior_variance;
            let mut resid_sum = 0.0;
            for i in 0..n {
                weight_sum += omega[i];
                resid_sum += kappa[i] - omega[i] * (other[i] + self.cache.total[i]);
            }
            let mean = resid_sum / weight_sum;
            self.intercept = mean + rng.normal() / weight_sum.sqrt();
        }

        for t in 0..self.trees.len() {
            for i in 0..n {
                fit_minus[i] = self.cache.total[i] - self.cache.per_tree[t][i];
                weighted_resid[i] =
                    kappa[i] - omega[i] * (other[i] + self.intercept + fit_minus[i]);
            }

            // Structure move.
            let proposal =
                propose_structure(&self.trees[t], &self.split_probs, &self.ranges, &prior, rng);
            let current_system = LeafSystem::build(
                &self.trees[t],
                exposures,
                omega,
                &weighted_resid,
                prior.leaf_scale,
            )?;
            let candidate_system = LeafSystem::build(
                &proposal.candidate,
                exposures,
                omega,
                &weighted_resid,
                prior.leaf_scale,
            )?;
            let log_accept = proposal.log_prior_ratio
                + proposal.log_proposal_ratio
                + candidate_system.collapsed_log_lik()
                - current_system.collapsed_log_lik();
            let accepted = rng.uniform().ln() < log_accept;
            match proposal.kind {
                MoveKind::Grow => {
                    stats.grow_proposed += 1;
                    stats.grow_accepted += accepted as u64;
                }
                MoveKind::Prune => {
                    stats.prune_proposed += 1;
                    stats.prune_accepted += accepted as u64;
                }
                MoveKind::Change => {
                    stats.change_proposed += 1;
                    stats.change_accepted += accepted as u64;
                }
            }
            let mut system = if accepted {
                self.trees[t] = proposal.candidate;
                candidate_system
            } else {
                current_system
            };

            // Bandwidth move.
            if self.config.soft && self.config.bandwidth_update {
                stats.bandwidth_proposed += 1;
                let accepted_bw = update_bandwidth(
                    &mut self.trees[t],
                    exposures,
                    omega,
                    &weighted_resid,
                    &prior,
                    self.config.bandwidth_prior_rate,
                    self.config.bandwidth_step,
                    rng,
                )?;
                if accepted_bw {
                    stats.bandwidth_accepted += 1;
                    system = LeafSystem::build(
                        &self.trees[t],
                        exposures,
                        omega,
                        &weighted_resid,
                        prior.leaf_scale,
                    )?;
                }
            }

            // Conjugate leaf redraw and cache update.
            let leaves = system.draw_leaf_values(rng);
            self.trees[t].set_leaf_values(&leaves);
            for i in 0..n {
                let g = self.trees[t].predict(exposures.row(i));
                self.cache.per_tree[t][i] = g;
                self.cache.total[i] = fit_minus[i] + g;
            }
        }

        if self.config.sparse {
            self.split_probs.update(&self.trees, rng);
            if self.config.dirichlet_update {
                self.split_probs.update_concentration(rng)?;
            }
        }
        self.cache.refresh_total();
        self.refresh_fitted();
        Ok(stats)
    }
}
