//! Shared statistics helpers for the integration suites.
#![allow(dead_code)]

use statrs::distribution::ContinuousCDF;

/// One-sample Kolmogorov-Smirnov statistic against an analytic CDF.
pub fn ks_statistic(values: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        d = d.max((f - lo).abs()).max((hi - f).abs());
    }
    d
}

/// Asymptotic Kolmogorov distribution tail probability.
pub fn ks_p_value(d: f64, n_eff: f64) -> f64 {
    let lambda = (n_eff.sqrt() + 0.12 + 0.11 / n_eff.sqrt()) * d;
    let mut p = 0.0;
    for j in 1..=100 {
        let jf = j as f64;
        let term = 2.0 * (-2.0 * jf * jf * lambda * lambda).exp();
        p += if j % 2 == 1 { term } else { -term };
    }
    p.clamp(0.0, 1.0)
}

pub fn ks_test_one_sample(values: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let d = ks_statistic(values, cdf);
    ks_p_value(d, values.len() as f64)
}

/// Two-sample Kolmogorov-Smirnov p-value.
pub fn ks_test_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (na, nb) = (sa.len(), sb.len());
    let mut i = 0;
    let mut j = 0;
    let mut d: f64 = 0.0;
    while i < na && j < nb {
        let x = sa[i].min(sb[j]);
        while i < na && sa[i] <= x {
            i += 1;
        }
        while j < nb && sb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    let n_eff = (na * nb) as f64 / (na + nb) as f64;
    ks_p_value(d, n_eff)
}

/// Upper-tail chi-squared p-value.
pub fn chi2_p_value(stat: f64, dof: f64) -> f64 {
    let dist = statrs::distribution::ChiSquared::new(dof).unwrap();
    1.0 - dist.cdf(stat)
}

/// Gamma(shape, rate) CDF.
pub fn gamma_cdf(shape: f64, rate: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    statrs::distribution::Gamma::new(shape, rate).unwrap().cdf(x)
}

/// Inverse-gamma(shape, rate) CDF.
pub fn inverse_gamma_cdf(shape: f64, rate: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    1.0 - gamma_cdf(shape, rate, 1.0 / x)
}

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    statrs::distribution::Normal::new(0.0, 1.0).unwrap().cdf(x)
}

pub fn pearson_correlation(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va.sqrt() * vb.sqrt())
}

#[cfg(test)]
mod self_tests {
    use super::*;

    #[test]
    fn ks_p_value_calibrates() {
        // D = 1.36/sqrt(n) is the classic 5% critical value.
        let p = ks_p_value(1.36 / (1000f64).sqrt(), 1000.0);
        assert!((p - 0.05).abs() < 0.01, "p={p}");
    }
}
