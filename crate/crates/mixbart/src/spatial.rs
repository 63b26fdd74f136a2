//! Proper-CAR machinery: adjacency structure, eigenvalue precomputation, and
//! the Gibbs updates for the spatial intercepts, their scale, and the
//! autocorrelation parameter.
//!
//! The random intercepts follow `nu ~ MVN(0, tau² (D − rho W)⁻¹)` where `W` is
//! the 0/1 adjacency matrix and `D` the diagonal of neighbor counts. `rho`
//! lives on a 1,000-cell uniform grid over [0, 1]; the determinant term of its
//! discrete posterior is precomputed from the eigenvalues of `D⁻¹W`.

use nalgebra::{DMatrix, DVector};

use crate::dist::{draw_discrete_log, draw_inverse_gamma, PrecisionFactor};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Number of cells in the `rho` grid: `{0/999, ..., 999/999}`.
pub const RHO_GRID_SIZE: usize = 1000;

/// Immutable spatial structure shared by all chains.
#[derive(Debug, Clone)]
pub struct CarStructure {
    region_count: usize,
    adjacency: DMatrix<f64>,
    degree: DVector<f64>,
    /// Eigenvalues of `D⁻¹W`, ascending.
    eigenvalues: Vec<f64>,
    rho_grid: Vec<f64>,
    /// `Σ_i log(1 − rho λ_i)` per grid cell; `-inf` where any factor is ≤ 0.
    log_det_terms: Vec<f64>,
}

impl CarStructure {
    /// Builds the structure from a symmetric edge list over region indices.
    /// Rejects self-loops, isolated regions, and disconnected graphs.
    pub fn from_edges(region_count: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if region_count == 0 {
            return Err(Error::Data("no regions".to_string()));
        }
        let mut adjacency = DMatrix::zeros(region_count, region_count);
        for &(a, b) in edges {
            if a >= region_count || b >= region_count {
                return Err(Error::Data(format!(
                    "edge ({a}, {b}) references an unknown region index"
                )));
            }
            if a == b {
                return Err(Error::Data(format!("self-loop on region {a}")));
            }
            adjacency[(a, b)] = 1.0;
            adjacency[(b, a)] = 1.0;
        }
        let degree = DVector::from_fn(region_count, |i, _| adjacency.row(i).sum());
        if let Some(i) = degree.iter().position(|&d| d == 0.0) {
            return Err(Error::Data(format!("region {i} has no neighbors")));
        }
        let components = connected_components(&adjacency);
        if components.len() > 1 {
            let sizes: Vec<String> = components
                .iter()
                .map(|c| format!("{{{} regions}}", c.len()))
                .collect();
            return Err(Error::Data(format!(
                "adjacency graph is disconnected: {} components {}",
                components.len(),
                sizes.join(", ")
            )));
        }

        // D^{-1}W is similar to the symmetric D^{-1/2} W D^{-1/2}, so its
        // eigenvalues are real and computable by a symmetric solver.
        let d_inv_sqrt = DVector::from_fn(region_count, |i, _| 1.0 / degree[i].sqrt());
        let mut sym = adjacency.clone();
        for i in 0..region_count {
            for j in 0..region_count {
                sym[(i, j)] *= d_inv_sqrt[i] * d_inv_sqrt[j];
            }
        }
        let mut eigenvalues: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
        eigenvalues.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // For a connected graph the top eigenvalue of D⁻¹W is exactly 1; the
        // solver returns it to machine precision. Pin it so the rho = 1 grid
        // cell gets its structural zero weight.
        if let Some(last) = eigenvalues.last_mut() {
            if (*last - 1.0).abs() < 1e-8 {
                *last = 1.0;
            }
        }

        let rho_grid: Vec<f64> = (0..RHO_GRID_SIZE)
            .map(|k| k as f64 / (RHO_GRID_SIZE - 1) as f64)
            .collect();
        let log_det_terms: Vec<f64> = rho_grid
            .iter()
            .map(|&rho| {
                let mut sum = 0.0;
                for &lambda in &eigenvalues {
                    let factor = 1.0 - rho * lambda;
                    if factor <= 0.0 {
                        return f64::NEG_INFINITY;
                    }
                    sum += factor.ln();
                }
                sum
            })
            .collect();

        Ok(Self {
            region_count,
            adjacency,
            degree,
            eigenvalues,
            rho_grid,
            log_det_terms,
        })
    }

    pub fn region_count(&self) -> usize {
        self.region_count
    }

    pub fn adjacency(&self) -> &DMatrix<f64> {
        &self.adjacency
    }

    pub fn degree(&self) -> &DVector<f64> {
        &self.degree
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn rho_grid(&self) -> &[f64] {
        &self.rho_grid
    }

    pub fn log_det_terms(&self) -> &[f64] {
        &self.log_det_terms
    }

    /// `D − rho W`.
    pub fn precision_core(&self, rho: f64) -> DMatrix<f64> {
        let mut m = -&self.adjacency * rho;
        for i in 0..self.region_count {
            m[(i, i)] += self.degree[i];
        }
        m
    }

    /// `nuᵀ (D − rho W) nu`.
    pub fn quadratic_form(&self, nu: &DVector<f64>, rho: f64) -> f64 {
        let d_part: f64 = (0..self.region_count)
            .map(|i| self.degree[i] * nu[i] * nu[i])
            .sum();
        d_part - rho * self.adjacency_quadratic(nu)
    }

    /// `nuᵀ W nu`.
    pub fn adjacency_quadratic(&self, nu: &DVector<f64>) -> f64 {
        (self.adjacency.clone() * nu).dot(nu)
    }
}

fn connected_components(adjacency: &DMatrix<f64>) -> Vec<Vec<usize>> {
    let n = adjacency.nrows();
    let mut seen = vec![false; n];
    let mut components = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        let mut stack = vec![start];
        let mut comp = Vec::new();
        seen[start] = true;
        while let Some(i) = stack.pop() {
            comp.push(i);
            for j in 0..n {
                if adjacency[(i, j)] > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        comp.sort_unstable();
        components.push(comp);
    }
    components
}

/// One chain's spatial state.
#[derive(Debug, Clone)]
pub struct SpatialState {
    pub nu: DVector<f64>,
    pub tau2: f64,
    pub rho: f64,
}

impl SpatialState {
    pub fn initial(region_count: usize) -> Self {
        Self {
            nu: DVector::zeros(region_count),
            tau2: 1.0,
            rho: 0.0,
        }
    }
}

/// Posterior precision and rhs of the intercept update. The per-observation
/// likelihood terms arrive pre-summed by region: `weight_sums[i] = Σ_j ω_ij`
/// and `weighted_residual_sums[i] = Σ_j ω_ij r^ν_ij` (the latter is the
/// numerically safe form of the A.4 residual product).
pub fn nu_posterior(
    car: &CarStructure,
    tau2: f64,
    rho: f64,
    weight_sums: &[f64],
    weighted_residual_sums: &[f64],
) -> (DMatrix<f64>, DVector<f64>) {
    let i = car.region_count();
    assert_eq!(weight_sums.len(), i);
    assert_eq!(weighted_residual_sums.len(), i);
    let mut precision = car.precision_core(rho) / tau2;
    for r in 0..i {
        precision[(r, r)] += weight_sums[r];
    }
    let rhs = DVector::from_column_slice(weighted_residual_sums);
    (precision, rhs)
}

/// Gibbs draw of the spatial intercepts. Regions without observations simply
/// contribute zero likelihood terms and fall back to the prior.
pub fn update_nu(
    state: &mut SpatialState,
    car: &CarStructure,
    weight_sums: &[f64],
    weighted_residual_sums: &[f64],
    rng: &mut RngStream,
) -> Result<()> {
    let (precision, rhs) = nu_posterior(car, state.tau2, state.rho, weight_sums, weighted_residual_sums);
    let factor = PrecisionFactor::new(precision, "nu posterior")?;
    state.nu = factor.draw_with_rhs(&rhs, rng);
    Ok(())
}

/// Gibbs draw of `tau² ~ IG(α + I/2, β + nuᵀ(D − rho W)nu / 2)`.
pub fn update_tau2(
    state: &mut SpatialState,
    car: &CarStructure,
    alpha_tau: f64,
    beta_tau: f64,
    rng: &mut RngStream,
) -> Result<()> {
    let shape = alpha_tau + car.region_count() as f64 / 2.0;
    let rate = beta_tau + car.quadratic_form(&state.nu, state.rho) / 2.0;
    state.tau2 = draw_inverse_gamma(shape, rate, rng)?;
    Ok(())
}

/// Log-weights of the discrete `rho` posterior:
/// `½ Σ log(1 − rho λ_i) + rho/(2 tau²) nuᵀWnu` per grid cell.
pub fn rho_log_weights(car: &CarStructure, nu: &DVector<f64>, tau2: f64) -> Vec<f64> {
    let quad = car.adjacency_quadratic(nu);
    car.rho_grid()
        .iter()
        .zip(car.log_det_terms())
        .map(|(&rho, &ld)| 0.5 * ld + rho * quad / (2.0 * tau2))
        .collect()
}

/// Gibbs draw of `rho` from its 1,000-cell discrete posterior.
pub fn update_rho(state: &mut SpatialState, car: &CarStructure, rng: &mut RngStream) -> Result<()> {
    let log_weights = rho_log_weights(car, &state.nu, state.tau2);
    let idx = draw_discrete_log(&log_weights, rng)?;
    state.rho = car.rho_grid()[idx];
    Ok(())
}

/// Draws `nu` from the pCAR prior (used by the simulation bench and the
/// no-data limit of the Gibbs update).
pub fn draw_car_prior(
    car: &CarStructure,
    tau2: f64,
    rho: f64,
    rng: &mut RngStream,
) -> Result<DVector<f64>> {
    let factor = PrecisionFactor::new(car.precision_core(rho) / tau2, "pCAR prior")?;
    Ok(factor.draw_with_rhs(&DVector::zeros(car.region_count()), rng))
}

/// Parses a plain-text adjacency edge list: one `region_id_a,region_id_b`
/// pair per line, ids as they appear in the dataset. Blank lines and lines
/// starting with `#` are skipped.
pub fn parse_edge_list(text: &str) -> Result<Vec<(String, String)>> {
    let mut edges = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.splitn(2, ',');
        let a = parts.next().map(str::trim).unwrap_or("");
        let b = parts.next().map(str::trim).unwrap_or("");
        if a.is_empty() || b.is_empty() {
            return Err(Error::Data(format!(
                "adjacency line {} is not `a,b`: {line:?}",
                lineno + 1
            )));
        }
        edges.push((a.to_string(), b.to_string()));
    }
    Ok(edges)
}
