//! The model driver: Pólya-gamma augmentation, the conjugate `beta` and
//! dispersion updates, and the full per-iteration Gibbs loop with burn-in,
//! thinning, and posterior persistence.
//!
//! One iteration runs, in order: the augmentation over all rows, `beta`, the
//! spatial intercepts, their scale `tau²`, the autocorrelation `rho`, a
//! backfitting sweep over the trees, and the dispersion `xi` through its
//! table-count augmentation. The linear predictor is recomputed after every
//! block.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::config::{PriorConfig, RunConfig, Schedule};
use crate::data::PanelDataset;
use crate::dist::{
    draw_crt, draw_gamma, draw_polya_gamma, nb_log_density, softplus, CrtParams, PolyaGammaParams,
    PrecisionFactor,
};
use crate::ensemble::{BartConfig, Ensemble, SweepStats};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::spatial::{update_nu, update_rho, update_tau2, CarStructure, SpatialState};
use crate::store::{PosteriorStore, StoreMeta};
use crate::util::RowMatrix;

/// Numerical floor on the augmentation weights before any division by them.
pub const OMEGA_FLOOR: f64 = 1e-300;

/// Substream tag spaces for the row-parallel draws.
const TAG_PG: u64 = 1 << 62;
const TAG_CRT: u64 = 2 << 62;

fn row_tag(kind: u64, iteration: usize, row: usize) -> u64 {
    kind | ((iteration as u64 & 0x3FFF_FFFF) << 32) | row as u64
}

/// One chain's full parameter state.
pub struct ChainState {
    pub beta: DVector<f64>,
    pub spatial: SpatialState,
    pub ensemble: Ensemble,
    pub xi: f64,
    /// Linear-predictor components per row, kept current after every block.
    pub linear_part: Vec<f64>,
    pub eta: Vec<f64>,
}

impl ChainState {
    fn new(data: &PanelDataset, car: &CarStructure, bart: BartConfig) -> Self {
        let n = data.rows();
        let mut ensemble = Ensemble::new(
            bart,
            data.n_exposures(),
            data.exposure_ranges.clone(),
            n,
        );
        // Start the ensemble at the crude log-rate level so the surface, not
        // the spatial intercepts, carries it from the first iteration; the
        // redundant level direction between the two blocks mixes far too
        // slowly to rely on burn-in for this.
        let total_counts: u64 = data.counts.iter().sum();
        let total_pop: f64 = data.log_population.iter().map(|lp| lp.exp()).sum();
        ensemble.intercept = ((total_counts as f64 + 0.5) / total_pop).ln();
        ensemble.rebuild_cache(&data.exposures);
        let mut state = Self {
            beta: DVector::zeros(data.n_confounders()),
            spatial: SpatialState::initial(car.region_count()),
            ensemble,
            xi: 1.0,
            linear_part: vec![0.0; n],
            eta: vec![0.0; n],
        };
        state.refresh_linear_part(data);
        state.refresh_eta(data);
        state
    }

    /// `log Pop + Xβ` per row.
    fn refresh_linear_part(&mut self, data: &PanelDataset) {
        for i in 0..data.rows() {
            let xb: f64 = data
                .confounders
                .row(i)
                .iter()
                .zip(self.beta.iter())
                .map(|(x, b)| x * b)
                .sum();
            self.linear_part[i] = data.log_population[i] + xb;
        }
    }

    /// Recomputes all derived vectors after components were set externally
    /// (test harnesses that initialize the state from the prior).
    pub fn sync_derived(&mut self, data: &PanelDataset) {
        self.refresh_linear_part(data);
        self.refresh_eta(data);
    }

    /// `eta = log Pop + Xβ + f(Z) + nu`, from current components.
    pub fn refresh_eta(&mut self, data: &PanelDataset) {
        let fit = self.ensemble.fitted();
        for i in 0..data.rows() {
            self.eta[i] = self.linear_part[i] + fit[i] + self.spatial.nu[data.region_index[i]];
        }
    }

    fn check_eta_finite(&self, iteration: usize) -> Result<()> {
        if let Some(row) = self.eta.iter().position(|e| !e.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite linear predictor at iteration {iteration}, row {row}"
            )));
        }
        Ok(())
    }
}

/// Augmentation draw for every row: `ω_ij ~ PG(y_ij + ξ, η_ij)` and the
/// latent outcome `y*_ij = (y_ij − ξ)/(2 ω_ij)`.
pub fn pg_augment(
    data: &PanelDataset,
    xi: f64,
    eta: &[f64],
    iteration: usize,
    rng: &RngStream,
) -> (Vec<f64>, Vec<f64>) {
    let omega = draw_omega(data, xi, eta, iteration, rng);
    let ystar = data
        .counts
        .iter()
        .zip(&omega)
        .map(|(&y, &w)| (y as f64 - xi) / (2.0 * w))
        .collect();
    (omega, ystar)
}

/// The weights alone, row-parallel over deterministic substreams.
fn draw_omega(
    data: &PanelDataset,
    xi: f64,
    eta: &[f64],
    iteration: usize,
    rng: &RngStream,
) -> Vec<f64> {
    (0..data.rows())
        .into_par_iter()
        .map(|i| {
            let mut sub = rng.substream(row_tag(TAG_PG, iteration, i));
            let params = PolyaGammaParams::new(data.counts[i] as f64 + xi, eta[i])
                .expect("y + xi > 0");
            draw_polya_gamma(params, &mut sub).max(OMEGA_FLOOR)
        })
        .collect()
}

/// Posterior precision and rhs for the `beta` block, taking the weights and
/// the already-weighted residuals (`ω r^β = κ − ω (log Pop + f + ν)`).
pub fn beta_posterior(
    data: &PanelDataset,
    prior: &PriorConfig,
    omega: &[f64],
    weighted_resid: &[f64],
) -> (DMatrix<f64>, DVector<f64>) {
    let p = data.n_confounders();
    let prior_precision = 1.0 / prior.beta_variance;
    let mut precision = DMatrix::from_diagonal_element(p, p, prior_precision);
    let mut rhs = DVector::from_element(p, prior_precision * prior.beta_mean);
    for i in 0..data.rows() {
        let x = data.confounders.row(i);
        let w = omega[i];
        let wr = weighted_resid[i];
        for a in 0..p {
            rhs[a] += x[a] * wr;
            let wxa = w * x[a];
            for b in a..p {
                precision[(a, b)] += wxa * x[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            precision[(a, b)] = precision[(b, a)];
        }
    }
    (precision, rhs)
}

/// Diagnostics accumulated over a run.
#[derive(Debug, Clone, Default)]
pub struct RunDiagnostics {
    pub sweep_stats: SweepStats,
    pub block_sequence: Vec<String>,
}

/// One chain bound to its data; owns a mutable copy of the panel so
/// joint-distribution tests can redraw the counts.
pub struct ChainRunner {
    data: PanelDataset,
    car: CarStructure,
    prior: PriorConfig,
    pub state: ChainState,
    rng: RngStream,
    iteration: usize,
    pub diagnostics: RunDiagnostics,
}

impl ChainRunner {
    pub fn new(
        data: PanelDataset,
        car: CarStructure,
        prior: PriorConfig,
        bart: BartConfig,
        rng: RngStream,
    ) -> Result<Self> {
        prior.validate()?;
        if car.region_count() != data.n_regions() {
            return Err(Error::Data(format!(
                "adjacency has {} regions, dataset has {}",
                car.region_count(),
                data.n_regions()
            )));
        }
        if let Some(rho) = prior.rho_fixed {
            // Pinning rho must still hit a grid member so the archive is
            // consistent with the sampled case.
            let snapped = (rho * 999.0).round() / 999.0;
            let mut state = ChainState::new(&data, &car, bart);
            state.spatial.rho = snapped;
            return Ok(Self {
                data,
                car,
                prior,
                state,
                rng,
                iteration: 0,
                diagnostics: RunDiagnostics::default(),
            });
        }
        let state = ChainState::new(&data, &car, bart);
        Ok(Self {
            data,
            car,
            prior,
            state,
            rng,
            iteration: 0,
            diagnostics: RunDiagnostics::default(),
        })
    }

    pub fn data(&self) -> &PanelDataset {
        &self.data
    }

    pub fn car(&self) -> &CarStructure {
        &self.car
    }

    /// Replaces the observed counts (joint-distribution test harness).
    pub fn set_counts(&mut self, counts: Vec<u64>) {
        assert_eq!(counts.len(), self.data.rows());
        self.data.counts = counts;
    }

    /// One full Gibbs iteration in the fixed block order.
    pub fn step(&mut self) -> Result<()> {
        let n = self.data.rows();
        let trace = self.iteration == 0;
        let record = |label: &str, diagnostics: &mut RunDiagnostics| {
            if trace {
                diagnostics.block_sequence.push(label.to_string());
            }
        };

        // Augmentation.
        let omega = draw_omega(&self.data, self.state.xi, &self.state.eta, self.iteration, &self.rng);
        let kappa: Vec<f64> = self
            .data
            .counts
            .iter()
            .map(|&y| (y as f64 - self.state.xi) / 2.0)
            .collect();
        record("pg", &mut self.diagnostics);

        // beta block.
        if self.data.n_confounders() > 0 {
            let fit = self.state.ensemble.fitted();
            let weighted_resid: Vec<f64> = (0..n)
                .map(|i| {
                    let rest = self.data.log_population[i]
                        + fit[i]
                        + self.state.spatial.nu[self.data.region_index[i]];
                    kappa[i] - omega[i] * rest
                })
                .collect();
            let (precision, rhs) = beta_posterior(&self.data, &self.prior, &omega, &weighted_resid);
            let factor = PrecisionFactor::new(precision, "beta posterior")?;
            self.state.beta = factor.draw_with_rhs(&rhs, &mut self.rng);
            self.state.refresh_linear_part(&self.data);
            self.state.refresh_eta(&self.data);
        }
        record("beta", &mut self.diagnostics);

        // Spatial intercepts.
        {
            let fit = self.state.ensemble.fitted();
            let regions = self.car.region_count();
            let mut weight_sums = vec![0.0; regions];
            let mut weighted_resid_sums = vec![0.0; regions];
            for i in 0..n {
                let r = self.data.region_index[i];
                let rest = self.state.linear_part[i] + fit[i];
                weight_sums[r] += omega[i];
                weighted_resid_sums[r] += kappa[i] - omega[i] * rest;
            }
            update_nu(
                &mut self.state.spatial,
                &self.car,
                &weight_sums,
                &weighted_resid_sums,
                &mut self.rng,
            )?;
            self.state.refresh_eta(&self.data);
        }
        record("nu", &mut self.diagnostics);

        // Scale.
        update_tau2(
            &mut self.state.spatial,
            &self.car,
            self.prior.alpha_tau,
            self.prior.beta_tau,
            &mut self.rng,
        )?;
        record("tau2", &mut self.diagnostics);

        // Autocorrelation.
        if self.prior.rho_fixed.is_none() {
            update_rho(&mut self.state.spatial, &self.car, &mut self.rng)?;
        }
        record("rho", &mut self.diagnostics);

        // Trees.
        {
            let other: Vec<f64> = (0..n)
                .map(|i| {
                    self.state.linear_part[i] + self.state.spatial.nu[self.data.region_index[i]]
                })
                .collect();
            let stats = self.state.ensemble.backfit_sweep(
                &self.data.exposures,
                &kappa,
                &omega,
                &other,
                &mut self.rng,
            )?;
            self.diagnostics.sweep_stats.merge(&stats);
            self.interweave_level();
            self.state.refresh_eta(&self.data);
        }
        record("trees", &mut self.diagnostics);

        // Dispersion through the table counts.
        {
            let xi_old = self.state.xi;
            let iteration = self.iteration;
            let rng = &self.rng;
            let table_total: u64 = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut sub = rng.substream(row_tag(TAG_CRT, iteration, i));
                    draw_crt(
                        CrtParams::new(xi_old, self.data.counts[i]).expect("xi > 0"),
                        &mut sub,
                    )
                })
                .sum();
            let softplus_sum: f64 = self.state.eta.iter().map(|&e| softplus(e)).sum();
            let shape = self.prior.alpha_xi + table_total as f64;
            let rate = self.prior.beta_xi + softplus_sum;
            self.state.xi = draw_gamma(shape, rate, &mut self.rng)?;
        }
        record("xi", &mut self.diagnostics);

        self.state.check_eta_finite(self.iteration)?;
        self.iteration += 1;
        Ok(())
    }

    /// Exact Gibbs step along the unidentified level direction shared by the
    /// ensemble intercept and the spatial intercepts: shifting
    /// `(alpha, nu) -> (alpha + c, nu - c·1)` leaves the likelihood
    /// untouched, so `c` has a Gaussian conditional determined by the two
    /// priors alone. Without this move the level direction mixes as a random
    /// walk with tiny steps and per-chain credible intervals understate it.
    fn interweave_level(&mut self) {
        let rho = self.state.spatial.rho;
        if rho >= 1.0 {
            // Intrinsic-CAR limit: the level is flat in both blocks; leave it
            // where it sits.
            return;
        }
        let tau2 = self.state.spatial.tau2;
        let sigma_alpha2 = self.state.ensemble.config().intercept_prior_variance;
        let degree = self.car.degree();
        let degree_sum: f64 = degree.iter().sum();
        let degree_nu: f64 = degree
            .iter()
            .zip(self.state.spatial.nu.iter())
            .map(|(d, v)| d * v)
            .sum();
        let precision = 1.0 / sigma_alpha2 + (1.0 - rho) * degree_sum / tau2;
        let mean = (-self.state.ensemble.intercept / sigma_alpha2
            + (1.0 - rho) * degree_nu / tau2)
            / precision;
        let c = mean + self.rng.normal() / precision.sqrt();
        self.state
            .ensemble
            .set_intercept(self.state.ensemble.intercept + c);
        self.state.spatial.nu.add_scalar_mut(-c);
    }

    /// Runs the full schedule and archives thinned post-burn-in draws.
    pub fn run(mut self, schedule: Schedule, config_echo: RunConfig) -> Result<PosteriorStore> {
        schedule.validate()?;
        let total = schedule.total_iterations();
        let p = self.data.n_confounders();
        let regions = self.car.region_count();
        let q = self.data.n_exposures();

        let mut beta = RowMatrix::zeros(schedule.samples, p);
        let mut nu = RowMatrix::zeros(schedule.samples, regions);
        let mut tau2 = Vec::with_capacity(schedule.samples);
        let mut rho = Vec::with_capacity(schedule.samples);
        let mut xi = Vec::with_capacity(schedule.samples);
        let mut split_probs = RowMatrix::zeros(schedule.samples, q);
        let mut trees = Vec::with_capacity(schedule.samples);

        let mut kept = 0usize;
        for it in 0..total {
            self.step()?;
            if it >= schedule.burnin && (it - schedule.burnin + 1) % schedule.thin == 0 {
                beta.row_mut(kept)
                    .copy_from_slice(self.state.beta.as_slice());
                nu.row_mut(kept)
                    .copy_from_slice(self.state.spatial.nu.as_slice());
                tau2.push(self.state.spatial.tau2);
                rho.push(self.state.spatial.rho);
                xi.push(self.state.xi);
                split_probs
                    .row_mut(kept)
                    .copy_from_slice(self.state.ensemble.split_probs.probs());
                trees.push(self.state.ensemble.serialized_trees());
                kept += 1;
            }
            if (it + 1) % 500 == 0 {
                log::info!("iteration {}/{total}", it + 1);
            }
        }
        assert_eq!(kept, schedule.samples, "draw count must equal samples");

        let meta = StoreMeta {
            seed: self.rng.seed(),
            stream_id: self.rng.stream_id(),
            burnin: schedule.burnin,
            samples: schedule.samples,
            thin: schedule.thin,
            total_iterations: total,
            n_rows: self.data.rows(),
            region_ids: self.data.region_ids.clone(),
            confounder_names: self.data.confounder_names.clone(),
            exposure_names: self.data.exposure_names.clone(),
            config: config_echo,
            block_sequence: self.diagnostics.block_sequence.clone(),
            sweep_stats: self.diagnostics.sweep_stats,
        };
        Ok(PosteriorStore {
            meta,
            beta,
            nu,
            tau2,
            rho,
            xi,
            split_probs,
            trees,
        })
    }
}

/// Reconstructs the linear predictor of one stored draw from its components.
pub fn reconstruct_eta(store: &PosteriorStore, data: &PanelDataset, draw: usize) -> Result<Vec<f64>> {
    let trees = store.decode_trees(draw)?;
    let beta = store.beta.row(draw);
    let nu = store.nu.row(draw);
    Ok((0..data.rows())
        .map(|i| {
            let xb: f64 = data
                .confounders
                .row(i)
                .iter()
                .zip(beta)
                .map(|(x, b)| x * b)
                .sum();
            let fit = crate::tree::predict_ensemble(&trees, data.exposures.row(i));
            data.log_population[i] + xb + fit + nu[data.region_index[i]]
        })
        .collect())
}

/// Per-draw, per-row log density matrix (draw-major), feeding WAIC.
pub struct LogLikMatrix {
    pub draws: usize,
    pub rows: usize,
    pub values: Vec<f64>,
}

impl LogLikMatrix {
    pub fn value(&self, draw: usize, row: usize) -> f64 {
        self.values[draw * self.rows + row]
    }

    pub fn row_slice(&self, draw: usize) -> &[f64] {
        &self.values[draw * self.rows..(draw + 1) * self.rows]
    }
}

pub fn log_likelihood_matrix(store: &PosteriorStore, data: &PanelDataset) -> Result<LogLikMatrix> {
    if store.draw_count() == 0 {
        return Err(Error::Data("posterior store is empty".to_string()));
    }
    let draws = store.draw_count();
    let rows = data.rows();
    let per_draw: Vec<Vec<f64>> = (0..draws)
        .into_par_iter()
        .map(|m| {
            let eta = reconstruct_eta(store, data, m)?;
            let xi = store.xi[m];
            Ok((0..rows)
                .map(|i| nb_log_density(data.counts[i], xi, eta[i]))
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut values = Vec::with_capacity(draws * rows);
    for row in per_draw {
        values.extend(row);
    }
    Ok(LogLikMatrix { draws, rows, values })
}
