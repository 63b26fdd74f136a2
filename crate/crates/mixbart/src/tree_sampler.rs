//! MCMC machinery for soft trees: the branching-process structure prior,
//! grow/prune/change proposals, the integrated leaf likelihood under
//! heteroscedastic Gaussian working responses, conjugate leaf draws, the
//! gate-bandwidth update, and the sparse Dirichlet splitting weights.

use nalgebra::{DMatrix, DVector};

use crate::dist::PrecisionFactor;
use crate::error::Result;
use crate::rng::RngStream;
use crate::tree::{Node, Side, SoftTree};
use crate::util::RowMatrix;

/// Proposal mix over structure moves.
const GROW_PROB: f64 = 0.3;
const PRUNE_PROB: f64 = 0.3;

/// Structure prior and leaf scale.
#[derive(Debug, Clone, Copy)]
pub struct TreePrior {
    /// Base of the depth prior: a depth-`d` node splits with probability
    /// `split_base (1 + d)^{-split_power}`.
    pub split_base: f64,
    pub split_power: f64,
    /// Leaf values are a priori `N(0, leaf_scale²)`.
    pub leaf_scale: f64,
}

impl TreePrior {
    pub fn split_probability(&self, depth: usize) -> f64 {
        self.split_base * (1.0 + depth as f64).powf(-self.split_power)
    }

    /// Log prior probability of a tree shape (split-rule factors excluded;
    /// they cancel against the proposal everywhere they appear).
    pub fn shape_log_prior(&self, tree: &SoftTree) -> f64 {
        fn walk(prior: &TreePrior, node: &Node, depth: usize) -> f64 {
            match node {
                Node::Leaf { .. } => (1.0 - prior.split_probability(depth)).ln(),
                Node::Split { left, right, .. } => {
                    prior.split_probability(depth).ln()
                        + walk(prior, left, depth + 1)
                        + walk(prior, right, depth + 1)
                }
            }
        }
        walk(self, &tree.root, 0)
    }
}

/// Dirichlet-distributed splitting weights over exposures.
#[derive(Debug, Clone)]
pub struct SplitProbabilities {
    probs: Vec<f64>,
    concentration: f64,
    sparse: bool,
}

impl SplitProbabilities {
    pub fn uniform(n_exposures: usize, concentration: f64, sparse: bool) -> Self {
        Self {
            probs: vec![1.0 / n_exposures as f64; n_exposures],
            concentration,
            sparse,
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn concentration(&self) -> f64 {
        self.concentration
    }

    pub fn set_probs(&mut self, probs: Vec<f64>) {
        self.probs = probs;
    }

    pub fn sample_var(&self, rng: &mut RngStream) -> usize {
        let u = rng.uniform();
        let mut acc = 0.0;
        for (k, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u <= acc {
                return k;
            }
        }
        self.probs.len() - 1
    }

    /// Gibbs draw `s ~ Dirichlet(a/q + n_1, ..., a/q + n_q)` where `n_k`
    /// counts internal nodes splitting on exposure `k` across the ensemble.
    /// A no-op when sparsity is disabled: the weights stay uniform.
    pub fn update(&mut self, trees: &[SoftTree], rng: &mut RngStream) {
        if !self.sparse {
            return;
        }
        let q = self.probs.len();
        let mut counts = vec![0usize; q];
        for tree in trees {
            for var in tree.split_variables() {
                counts[var] += 1;
            }
        }
        let mut draws = Vec::with_capacity(q);
        let mut total = 0.0;
        for &n_k in &counts {
            let shape = self.concentration / q as f64 + n_k as f64;
            let g = crate::dist::draw_gamma(shape, 1.0, rng).expect("positive shape");
            draws.push(g);
            total += g;
        }
        for g in &mut draws {
            *g /= total;
        }
        self.probs = draws;
    }

    /// Optional hyperprior step on the concentration: a discrete grid over
    /// `r = a/(a+q)` with a Beta(0.5, 1) prior, scored against the current
    /// weights. Off unless the config enables it.
    pub fn update_concentration(&mut self, rng: &mut RngStream) -> Result<()> {
        if !self.sparse {
            return Ok(());
        }
        use statrs::function::gamma::ln_gamma;
        let q = self.probs.len() as f64;
        let log_s_sum: f64 = self.probs.iter().map(|s| s.max(1e-300).ln()).sum();
        let grid: Vec<f64> = (1..100).map(|k| k as f64 / 100.0).collect();
        let log_weights: Vec<f64> = grid
            .iter()
            .map(|&r| {
                let a = q * r / (1.0 - r);
                // Beta(0.5, 1) prior density on r, up to a constant.
                let log_prior = -0.5 * r.ln();
                let log_lik = ln_gamma(a) - q * ln_gamma(a / q) + (a / q - 1.0) * log_s_sum;
                log_prior + log_lik
            })
            .collect();
        let idx = crate::dist::draw_discrete_log(&log_weights, rng)?;
        self.concentration = q * grid[idx] / (1.0 - grid[idx]);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoveKind {
    Grow,
    Prune,
    Change,
}

/// A candidate structure together with the MH ratio pieces. Split-rule
/// densities are omitted from both ratios since the proposal draws rules from
/// the prior and they cancel exactly.
pub struct StructureProposal {
    pub candidate: SoftTree,
    pub log_prior_ratio: f64,
    pub log_proposal_ratio: f64,
    pub kind: MoveKind,
}

fn grow_move_prob(tree: &SoftTree) -> f64 {
    // Prune and change are impossible on a root-only tree; those draws fall
    // back to grow, so its effective proposal probability becomes 1.
    if tree.leaf_count() == 1 {
        1.0
    } else {
        GROW_PROB
    }
}

fn draw_rule(
    split_probs: &SplitProbabilities,
    ranges: &[(f64, f64)],
    rng: &mut RngStream,
) -> (usize, f64) {
    let var = split_probs.sample_var(rng);
    let (lo, hi) = ranges[var];
    let cut = lo + rng.uniform() * (hi - lo);
    (var, cut)
}

/// Proposes one structure move.
pub fn propose_structure(
    tree: &SoftTree,
    split_probs: &SplitProbabilities,
    ranges: &[(f64, f64)],
    prior: &TreePrior,
    rng: &mut RngStream,
) -> StructureProposal {
    let u = rng.uniform();
    let kind = if tree.leaf_count() == 1 || u < GROW_PROB {
        MoveKind::Grow
    } else if u < GROW_PROB + PRUNE_PROB {
        MoveKind::Prune
    } else {
        MoveKind::Change
    };
    match kind {
        MoveKind::Grow => propose_grow(tree, split_probs, ranges, prior, rng),
        MoveKind::Prune => propose_prune(tree, prior, rng),
        MoveKind::Change => propose_change(tree, split_probs, ranges, rng),
    }
}

fn pick(paths: &[Vec<Side>], rng: &mut RngStream) -> Vec<Side> {
    let idx = ((rng.uniform() * paths.len() as f64) as usize).min(paths.len() - 1);
    paths[idx].clone()
}

fn propose_grow(
    tree: &SoftTree,
    split_probs: &SplitProbabilities,
    ranges: &[(f64, f64)],
    prior: &TreePrior,
    rng: &mut RngStream,
) -> StructureProposal {
    let leaves = tree.leaf_paths();
    let path = pick(&leaves, rng);
    let depth = path.len();
    let (var, cut) = draw_rule(split_probs, ranges, rng);

    let mut candidate = tree.clone();
    *candidate.node_at_path_mut(&path) = Node::Split {
        var,
        cut,
        left: Box::new(Node::Leaf { value: 0.0 }),
        right: Box::new(Node::Leaf { value: 0.0 }),
    };

    let p_d = prior.split_probability(depth);
    let p_child = prior.split_probability(depth + 1);
    let log_prior_ratio = p_d.ln() + 2.0 * (1.0 - p_child).ln() - (1.0 - p_d).ln();
    let log_proposal_ratio = (PRUNE_PROB / candidate.prunable_paths().len() as f64).ln()
        - (grow_move_prob(tree) / leaves.len() as f64).ln();
    StructureProposal {
        candidate,
        log_prior_ratio,
        log_proposal_ratio,
        kind: MoveKind::Grow,
    }
}

fn propose_prune(tree: &SoftTree, prior: &TreePrior, rng: &mut RngStream) -> StructureProposal {
    let prunable = tree.prunable_paths();
    let path = pick(&prunable, rng);
    let depth = path.len();

    let mut candidate = tree.clone();
    *candidate.node_at_path_mut(&path) = Node::Leaf { value: 0.0 };

    let p_d = prior.split_probability(depth);
    let p_child = prior.split_probability(depth + 1);
    let log_prior_ratio = (1.0 - p_d).ln() - p_d.ln() - 2.0 * (1.0 - p_child).ln();
    let log_proposal_ratio = (grow_move_prob(&candidate) / candidate.leaf_paths().len() as f64)
        .ln()
        - (PRUNE_PROB / prunable.len() as f64).ln();
    StructureProposal {
        candidate,
        log_prior_ratio,
        log_proposal_ratio,
        kind: MoveKind::Prune,
    }
}

fn propose_change(
    tree: &SoftTree,
    split_probs: &SplitProbabilities,
    ranges: &[(f64, f64)],
    rng: &mut RngStream,
) -> StructureProposal {
    let internals = tree.internal_paths();
    let path = pick(&internals, rng);
    let (new_var, new_cut) = draw_rule(split_probs, ranges, rng);

    let mut candidate = tree.clone();
    if let Node::Split { var, cut, .. } = candidate.node_at_path_mut(&path) {
        *var = new_var;
        *cut = new_cut;
    }
    StructureProposal {
        candidate,
        log_prior_ratio: 0.0,
        log_proposal_ratio: 0.0,
        kind: MoveKind::Change,
    }
}

/// The conjugate leaf system `A = Φᵀ Ω Φ + I/σ²`, `m = Φᵀ (Ω r)`, built from
/// per-observation weights and pre-multiplied residuals (`ω·r`, which stays
/// finite even where `r` itself would not).
pub struct LeafSystem {
    factor: PrecisionFactor,
    m: DVector<f64>,
    log_det_a: f64,
    leaves: usize,
    log_sigma2: f64,
}

impl LeafSystem {
    pub fn build(
        tree: &SoftTree,
        exposures: &RowMatrix,
        omega: &[f64],
        weighted_resid: &[f64],
        leaf_scale: f64,
    ) -> Result<Self> {
        let n = exposures.rows();
        assert_eq!(omega.len(), n);
        assert_eq!(weighted_resid.len(), n);
        let l = tree.leaf_count();
        let sigma2 = leaf_scale * leaf_scale;
        let mut a = DMatrix::zeros(l, l);
        let mut m = DVector::zeros(l);
        let mut buf = Vec::with_capacity(l);
        for i in 0..n {
            tree.leaf_weights(exposures.row(i), &mut buf);
            let w = omega[i];
            let wr = weighted_resid[i];
            for p in 0..l {
                let bp = buf[p];
                if bp == 0.0 {
                    continue;
                }
                m[p] += wr * bp;
                let wbp = w * bp;
                for q in p..l {
                    a[(p, q)] += wbp * buf[q];
                }
            }
        }
        for p in 0..l {
            for q in 0..p {
                a[(p, q)] = a[(q, p)];
            }
            a[(p, p)] += 1.0 / sigma2;
        }
        let factor = PrecisionFactor::new(a, "leaf system")?;
        let log_det_a = factor.log_det();
        Ok(Self {
            factor,
            m,
            log_det_a,
            leaves: l,
            log_sigma2: sigma2.ln(),
        })
    }

    /// Integrated log likelihood up to terms constant in the tree structure
    /// (`-n/2 log 2π + ½Σ log ω − ½ Σ ω r²` are identical across MH
    /// candidates and dropped).
    pub fn collapsed_log_lik(&self) -> f64 {
        let quad = self.m.dot(&self.factor.solve(&self.m));
        -0.5 * (self.log_det_a + self.leaves as f64 * self.log_sigma2) + 0.5 * quad
    }

    /// `mu ~ MVN(A⁻¹ m, A⁻¹)` in left-to-right leaf order.
    pub fn draw_leaf_values(&self, rng: &mut RngStream) -> Vec<f64> {
        self.factor.draw_with_rhs(&self.m, rng).iter().copied().collect()
    }

    pub fn posterior_mean(&self) -> Vec<f64> {
        self.factor.solve(&self.m).iter().copied().collect()
    }
}

/// Full integrated log marginal of the working response: the Gaussian
/// `y* ~ N(Φ mu, Ω⁻¹)` with `mu ~ N(0, σ² I)` integrated out. Used by tests
/// and oracles; the sampler itself uses [`LeafSystem::collapsed_log_lik`].
pub fn integrated_log_likelihood(
    tree: &SoftTree,
    exposures: &RowMatrix,
    ystar: &[f64],
    omega: &[f64],
    leaf_scale: f64,
) -> Result<f64> {
    let n = exposures.rows();
    let weighted: Vec<f64> = ystar.iter().zip(omega).map(|(y, w)| y * w).collect();
    let system = LeafSystem::build(tree, exposures, omega, &weighted, leaf_scale)?;
    let log_omega_sum: f64 = omega.iter().map(|w| w.ln()).sum();
    let quad_data: f64 = ystar
        .iter()
        .zip(omega)
        .map(|(y, w)| w * y * y)
        .sum();
    Ok(-0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln() + 0.5 * log_omega_sum
        - 0.5 * quad_data
        + system.collapsed_log_lik())
}

/// One MH step on the gate bandwidth: log-scale uniform random walk against
/// an exponential prior, scored by the integrated leaf likelihood.
#[allow(clippy::too_many_arguments)]
pub fn update_bandwidth(
    tree: &mut SoftTree,
    exposures: &RowMatrix,
    omega: &[f64],
    weighted_resid: &[f64],
    prior: &TreePrior,
    prior_rate: f64,
    log_step: f64,
    rng: &mut RngStream,
) -> Result<bool> {
    let current = tree.bandwidth;
    let proposed = (current.ln() + (rng.uniform() * 2.0 - 1.0) * log_step).exp();
    let ll_current =
        LeafSystem::build(tree, exposures, omega, weighted_resid, prior.leaf_scale)?
            .collapsed_log_lik();
    let mut candidate = tree.clone();
    candidate.bandwidth = proposed;
    let ll_proposed =
        LeafSystem::build(&candidate, exposures, omega, weighted_resid, prior.leaf_scale)?
            .collapsed_log_lik();
    let log_accept = ll_proposed - ll_current - prior_rate * (proposed - current)
        + (proposed.ln() - current.ln());
    if rng.uniform().ln() < log_accept {
        tree.bandwidth = proposed;
        Ok(true)
    } else {
        Ok(false)
    }
}
