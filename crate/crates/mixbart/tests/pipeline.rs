//! End-to-end behavior of the sampler against its own generating model.

mod common;

use mixbart::config::{PriorConfig, RunConfig, Schedule};
use mixbart::data::PanelDataset;
use mixbart::dist::{nb_mean, nb_var};
use mixbart::ensemble::{BartConfig, Ensemble};
use mixbart::rng::RngStream;
use mixbart::sampler::{pg_augment, reconstruct_eta, ChainRunner};
use mixbart::simlab::{draw_negative_binomial, fit_replicate, generate_replicate, BartSetting, LatticeConfig, SimConfig};
use mixbart::spatial::{draw_car_prior, CarStructure};
use mixbart::tree::predict_ensemble;
use mixbart::util::{mean, quantile, sample_var, RowMatrix};

use common::{ks_statistic, ks_test_two_sample, std_normal_cdf};

/// Simulates a panel with no exposure surface (f = 0) so the linear block is
/// exactly the generating model when trees are pinned to root-only.
fn simulate_linear_panel(
    regions: usize,
    days: usize,
    beta: &[f64],
    tau2: f64,
    rho: f64,
    xi: f64,
    rng: &mut RngStream,
) -> (PanelDataset, CarStructure, Vec<f64>) {
    let edges: Vec<(usize, usize)> = (0..regions - 1).map(|r| (r, r + 1)).collect();
    let car = CarStructure::from_edges(regions, &edges).unwrap();
    let nu = draw_car_prior(&car, tau2, rho, rng).unwrap();
    let n = regions * days;
    let p = beta.len();
    let mut region_index = Vec::with_capacity(n);
    let mut conf = RowMatrix::zeros(n, p);
    let mut expo = RowMatrix::zeros(n, 2);
    let mut counts = Vec::with_capacity(n);
    let mut population: Vec<f64> = Vec::with_capacity(n);
    for r in 0..regions {
        for _ in 0..days {
            let i = region_index.len();
            region_index.push(r);
            population.push(30.0);
            for j in 0..p {
                conf.set(i, j, rng.uniform());
            }
            expo.set(i, 0, rng.uniform());
            expo.set(i, 1, rng.uniform());
            let xb: f64 = conf.row(i).iter().zip(beta).map(|(x, b)| x * b).sum();
            let eta = population[i].ln() + xb + nu[r];
            counts.push(draw_negative_binomial(xi, eta, rng));
        }
    }
    let date_index: Vec<i64> = (0..n).map(|i| (i % days) as i64).collect();
    let data = PanelDataset::from_parts(
        (0..regions).map(|r| format!("R{r}")).collect(),
        region_index,
        date_index,
        counts,
        population,
        conf,
        expo,
        (1..=p).map(|j| format!("x{j}")).collect(),
        vec!["z1".into(), "z2".into()],
    )
    .unwrap();
    (data, car, nu.iter().copied().collect())
}

#[test]
fn linear_model_recovers_beta_with_nominal_coverage() {
    // Trees disabled (split_base = 0, one root-only tree): the fit reduces to
    // the augmented linear model; over replicates the 95% credible intervals
    // should cover the generating coefficients at roughly nominal rate.
    let beta_true = [-1.0, 0.5];
    let replicates = 30;
    let mut covered = 0usize;
    let mut total = 0usize;
    for rep in 0..replicates {
        let mut rng = RngStream::new(2_000 + rep, 0);
        let (data, car, _) =
            simulate_linear_panel(8, 40, &beta_true, 0.3, 0.9, 1.0, &mut rng);
        let prior = PriorConfig {
            alpha_tau: 2.0,
            beta_tau: 0.6,
            ..PriorConfig::default()
        };
        let bart = BartConfig {
            trees: 1,
            split_base: 0.0,
            bandwidth_update: false,
            sparse: false,
            ..BartConfig::default()
        };
        let runner = ChainRunner::new(data, car, prior, bart, RngStream::new(3_000 + rep, 1)).unwrap();
        let schedule = Schedule {
            burnin: 300,
            samples: 150,
            thin: 2,
            seed: 0,
        };
        let store = runner.run(schedule, RunConfig::default()).unwrap();
        for (j, &b_true) in beta_true.iter().enumerate() {
            let draws: Vec<f64> = (0..store.draw_count()).map(|m| store.beta.get(m, j)).collect();
            let lo = quantile(&draws, 0.025);
            let hi = quantile(&draws, 0.975);
            total += 1;
            if b_true >= lo && b_true <= hi {
                covered += 1;
            }
        }
    }
    let coverage = covered as f64 / total as f64;
    assert!(
        (0.85..=1.0).contains(&coverage),
        "beta coverage {coverage} over {total} intervals"
    );
}

#[test]
fn augmentation_pivot_is_standard_normal() {
    // eta ~ N(m, v), y ~ NB(xi, sigmoid(eta)), omega ~ PG(y + xi, eta): the
    // conjugate posterior pivot (eta - mu_post) sqrt(omega + 1/v) is exactly
    // standard normal in the joint distribution.
    let n = 100_000;
    let xi = 1.3;
    let m = 0.4;
    let v: f64 = 0.49;
    let mut rng = RngStream::new(4_001, 0);
    let mut eta = Vec::with_capacity(n);
    let mut counts = Vec::with_capacity(n);
    for _ in 0..n {
        let e = m + v.sqrt() * rng.normal();
        eta.push(e);
        counts.push(draw_negative_binomial(xi, e, &mut rng));
    }
    let data = PanelDataset::from_parts(
        vec!["A".into()],
        vec![0; n],
        (0..n).map(|i| i as i64).collect(),
        counts.clone(),
        vec![1.0; n],
        RowMatrix::zeros(n, 0),
        RowMatrix::from_rows(&vec![vec![0.5]; n]),
        vec![],
        vec!["z1".into()],
    )
    .unwrap();
    let (omega, _ystar) = pg_augment(&data, xi, &eta, 0, &RngStream::new(4_002, 0));
    let pivots: Vec<f64> = (0..n)
        .map(|i| {
            let kappa = (counts[i] as f64 - xi) / 2.0;
            let precision = omega[i] + 1.0 / v;
            let mu_post = (kappa + m / v) / precision;
            (eta[i] - mu_post) * precision.sqrt()
        })
        .collect();
    let d = ks_statistic(&pivots, std_normal_cdf);
    assert!(d < 0.01, "Kolmogorov distance {d}");
    let pivot_mean = mean(&pivots);
    let pivot_var = sample_var(&pivots);
    assert!(pivot_mean.abs() < 0.02, "pivot mean {pivot_mean}");
    assert!((pivot_var - 1.0).abs() < 0.03, "pivot var {pivot_var}");
}

#[test]
fn tree_order_permutation_leaves_fit_distribution_unchanged() {
    // Exchangeable tree prior: permuting the ensemble before a sweep must not
    // change the distribution of the fitted surface (matched-seed runs,
    // two-sample KS over 200 replicates).
    let n = 80;
    let mut data_rng = RngStream::new(5_000, 0);
    let z = RowMatrix::from_rows(
        &(0..n)
            .map(|_| vec![data_rng.uniform(), data_rng.uniform()])
            .collect::<Vec<_>>(),
    );
    let kappa: Vec<f64> = (0..n).map(|_| data_rng.normal()).collect();
    let omega: Vec<f64> = (0..n).map(|_| 0.5 + data_rng.uniform()).collect();
    let other = vec![0.0; n];
    let config = BartConfig {
        trees: 4,
        ..BartConfig::default()
    };

    let run_one = |seed: u64, permute: bool| -> f64 {
        let mut ens = Ensemble::new(config.clone(), 2, z.column_ranges(), n);
        let mut rng = RngStream::new(seed, 9);
        for _ in 0..5 {
            ens.backfit_sweep(&z, &kappa, &omega, &other, &mut rng).unwrap();
        }
        if permute {
            ens.trees.reverse();
            ens.rebuild_cache(&z);
        }
        ens.backfit_sweep(&z, &kappa, &omega, &other, &mut rng).unwrap();
        mean(ens.cache.total())
    };

    let a: Vec<f64> = (0..200).map(|r| run_one(6_000 + r, false)).collect();
    let b: Vec<f64> = (0..200).map(|r| run_one(6_000 + r, true)).collect();
    let p = ks_test_two_sample(&a, &b);
    assert!(p > 0.01, "two-sample KS p = {p}");
}

#[test]
fn archived_surface_matches_serialized_tree_sum() {
    let config = SimConfig {
        days: 20,
        lattice: LatticeConfig {
            rows: 2,
            cols: 3,
            ..LatticeConfig::default()
        },
        schedule: Schedule {
            burnin: 30,
            samples: 10,
            thin: 2,
            seed: 0,
        },
        ..SimConfig::default()
    };
    let mut rng = RngStream::new(7_000, 0);
    let (data, car, _) = generate_replicate(&config, &mut rng).unwrap();
    let setting = BartSetting {
        trees: 5,
        soft: true,
        sparse: true,
    };
    let store = fit_replicate(&data, &car, setting, config.schedule, 7_001, 0).unwrap();

    let mut row_rng = RngStream::new(7_002, 0);
    for m in 0..store.draw_count() {
        let trees = store.decode_trees(m).unwrap();
        for _ in 0..10 {
            let i = (row_rng.uniform() * data.rows() as f64) as usize % data.rows();
            let z = data.exposures.row(i);
            let ensemble_total = predict_ensemble(&trees, z);
            let tree_sum: f64 = trees.iter().map(|t| t.predict(z)).sum();
            assert!((ensemble_total - tree_sum).abs() < 1e-9);
            assert!(ensemble_total.is_finite());
        }
    }
}

#[test]
fn fitted_state_reproduces_marginal_count_moments() {
    // E(Y) = xi e^eta and Var(Y) = xi e^eta (1 + e^eta) under the fitted
    // parameters, checked by simulation from a stored draw.
    let config = SimConfig {
        days: 15,
        lattice: LatticeConfig {
            rows: 2,
            cols: 2,
            ..LatticeConfig::default()
        },
        schedule: Schedule {
            burnin: 40,
            samples: 5,
            thin: 2,
            seed: 0,
        },
        ..SimConfig::default()
    };
    let mut rng = RngStream::new(8_000, 0);
    let (data, car, _) = generate_replicate(&config, &mut rng).unwrap();
    let setting = BartSetting {
        trees: 3,
        soft: true,
        sparse: false,
    };
    let store = fit_replicate(&data, &car, setting, config.schedule, 8_001, 0).unwrap();
    let draw = store.draw_count() - 1;
    let eta = reconstruct_eta(&store, &data, draw).unwrap();
    let xi = store.xi[draw];
    let mut sim_rng = RngStream::new(8_002, 0);
    for &i in &[0usize, 7, 23] {
        let n = 40_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| draw_negative_binomial(xi, eta[i], &mut sim_rng) as f64)
            .collect();
        let m = mean(&draws);
        let v = sample_var(&draws);
        let em = nb_mean(xi, eta[i]);
        let ev = nb_var(xi, eta[i]);
        assert!(ev > em, "overdispersion direction must hold");
        let se_m = (ev / n as f64).sqrt();
        assert!((m - em).abs() < 6.0 * se_m, "row {i}: mean {m} vs {em}");
        assert!((v - ev).abs() < 0.15 * ev + 6.0 * ev * (2.0 / n as f64).sqrt(), "row {i}: var {v} vs {ev}");
    }
}
