//! Post-fit summaries: first- and second-order accumulated local effects,
//! partial dependence, fixed-profile curves, the decile mixture-effect curve,
//! and WAIC. Every estimand is evaluated per posterior draw over the tree
//! surface only; the offset, confounder, and spatial blocks are additive in
//! the model and drop out of exposure contrasts.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

use crate::data::PanelDataset;
use crate::error::{Error, Result};
use crate::sampler::LogLikMatrix;
use crate::store::PosteriorStore;
use crate::tree::{predict_ensemble, SoftTree};
use crate::util::{log_sum_exp, quantile, quantile_sorted, RowMatrix};

/// Anything that maps an exposure vector to a scalar.
pub trait Surface: Sync {
    fn eval(&self, z: &[f64]) -> f64;
}

impl<F: Fn(&[f64]) -> f64 + Sync> Surface for F {
    fn eval(&self, z: &[f64]) -> f64 {
        self(z)
    }
}

/// One posterior draw's tree ensemble as a surface.
pub struct EnsembleSurface<'a> {
    pub trees: &'a [SoftTree],
}

impl Surface for EnsembleSurface<'_> {
    fn eval(&self, z: &[f64]) -> f64 {
        predict_ensemble(self.trees, z)
    }
}

/// Quantile bins of one exposure: deduplicated type-7 boundaries, per-row
/// membership, and counts. Empty bins are merged into their left neighbor.
#[derive(Debug, Clone)]
pub struct AleBins {
    pub boundaries: Vec<f64>,
    pub bin_of_row: Vec<usize>,
    pub counts: Vec<usize>,
    pub merged_bins: usize,
}

impl AleBins {
    pub fn build(values: &[f64], requested: usize) -> Result<Self> {
        if requested < 2 {
            return Err(Error::Config(format!(
                "need at least 2 bins, got {requested}"
            )));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut boundaries: Vec<f64> = (0..=requested)
            .map(|j| quantile_sorted(&sorted, j as f64 / requested as f64))
            .collect();
        boundaries.dedup();
        if boundaries.len() < 2 {
            return Err(Error::Data(
                "exposure has a single distinct value; no bins".to_string(),
            ));
        }
        let mut merged_bins = requested - (boundaries.len() - 1);

        // Assign rows, then merge any empty bin into its left neighbor.
        loop {
            let bins = boundaries.len() - 1;
            let mut counts = vec![0usize; bins];
            let mut bin_of_row = Vec::with_capacity(values.len());
            for &z in values {
                let bin = assign_bin(&boundaries, z);
                counts[bin] += 1;
                bin_of_row.push(bin);
            }
            if let Some(empty) = counts.iter().position(|&c| c == 0) {
                if bins == 1 {
                    return Err(Error::Data("cannot bin exposure".to_string()));
                }
                // Remove the boundary separating the empty bin from its left
                // neighbor (or right neighbor when it is the first bin).
                boundaries.remove(empty.max(1));
                merged_bins += 1;
                continue;
            }
            return Ok(Self {
                boundaries,
                bin_of_row,
                counts,
                merged_bins,
            });
        }
    }

    pub fn bins(&self) -> usize {
        self.boundaries.len() - 1
    }
}

fn assign_bin(boundaries: &[f64], z: f64) -> usize {
    // (b_j, b_{j+1}] bins with the minimum folded into bin 0.
    let bins = boundaries.len() - 1;
    if z <= boundaries[0] {
        return 0;
    }
    match boundaries.binary_search_by(|b| b.partial_cmp(&z).unwrap()) {
        Ok(j) => j.saturating_sub(1).min(bins - 1),
        Err(j) => (j - 1).min(bins - 1),
    }
}

/// First-order ALE of one exposure, per draw, with pointwise summaries.
#[derive(Debug, Clone)]
pub struct AleResult {
    pub exposure: usize,
    pub boundaries: Vec<f64>,
    pub counts: Vec<usize>,
    /// Draw-major curves at the boundaries, centered.
    pub per_draw: RowMatrix,
    pub mean: Vec<f64>,
    pub lo95: Vec<f64>,
    pub hi95: Vec<f64>,
    pub centering: Vec<f64>,
    pub merged_bins: usize,
    /// Evaluations whose varied coordinate moved farther than one bin width
    /// from the row's observed value; structurally zero.
    pub audit_violations: usize,
}

/// Accumulates one surface's local effects into a centered curve.
fn ale1_curve(
    surface: &dyn Surface,
    data: &RowMatrix,
    k: usize,
    bins: &AleBins,
    audit: &AtomicUsize,
) -> (Vec<f64>, f64) {
    let nbins = bins.bins();
    let mut sums = vec![0.0; nbins];
    let mut buf = vec![0.0; data.cols()];
    for (i, &bin) in bins.bin_of_row.iter().enumerate() {
        let lower = bins.boundaries[bin];
        let upper = bins.boundaries[bin + 1];
        let width = upper - lower;
        let observed = data.get(i, k);
        if (observed - lower).abs() > width || (observed - upper).abs() > width {
            audit.fetch_add(1, Ordering::Relaxed);
        }
        buf.copy_from_slice(data.row(i));
        buf[k] = upper;
        let hi = surface.eval(&buf);
        buf[k] = lower;
        let lo = surface.eval(&buf);
        sums[bin] += hi - lo;
    }
    let mut curve = Vec::with_capacity(nbins + 1);
    curve.push(0.0);
    let mut acc = 0.0;
    for (s, &c) in sums.iter().zip(&bins.counts) {
        acc += s / c as f64;
        curve.push(acc);
    }
    // Bin-count-weighted midpoint centering.
    let n: usize = bins.counts.iter().sum();
    let center: f64 = bins
        .counts
        .iter()
        .enumerate()
        .map(|(j, &c)| c as f64 * 0.5 * (curve[j] + curve[j + 1]))
        .sum::<f64>()
        / n as f64;
    for v in &mut curve {
        *v -= center;
    }
    (curve, center)
}

fn summarize_pointwise(per_draw: &RowMatrix) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let draws = per_draw.rows();
    let points = per_draw.cols();
    let mut mean = vec![0.0; points];
    let mut lo = vec![0.0; points];
    let mut hi = vec![0.0; points];
    let mut column = vec![0.0; draws];
    for j in 0..points {
        for m in 0..draws {
            column[m] = per_draw.get(m, j);
        }
        mean[j] = column.iter().sum::<f64>() / draws as f64;
        column.sort_by(|a, b| a.partial_cmp(b).unwrap());
        lo[j] = quantile_sorted(&column, 0.025);
        hi[j] = quantile_sorted(&column, 0.975);
    }
    (mean, lo, hi)
}

pub fn ale_first_order<S: Surface>(
    surfaces: &[S],
    data: &RowMatrix,
    k: usize,
    requested_bins: usize,
) -> Result<AleResult> {
    if surfaces.is_empty() {
        return Err(Error::Data("no posterior draws".to_string()));
    }
    let bins = AleBins::build(&data.column(k), requested_bins)?;
    if bins.merged_bins > 0 {
        log::warn!(
            "exposure {k}: merged {} empty/duplicate quantile bins",
            bins.merged_bins
        );
    }
    let audit = AtomicUsize::new(0);
    let curves: Vec<(Vec<f64>, f64)> = surfaces
        .par_iter()
        .map(|s| ale1_curve(s, data, k, &bins, &audit))
        .collect();
    let per_draw = RowMatrix::from_rows(&curves.iter().map(|(c, _)| c.clone()).collect::<Vec<_>>());
    let centering = curves.iter().map(|(_, c)| *c).collect();
    let (mean, lo95, hi95) = summarize_pointwise(&per_draw);
    Ok(AleResult {
        exposure: k,
        boundaries: bins.boundaries.clone(),
        counts: bins.counts.clone(),
        per_draw,
        mean,
        lo95,
        hi95,
        centering,
        merged_bins: bins.merged_bins,
        audit_violations: audit.load(Ordering::Relaxed),
    })
}

/// Second-order ALE surface on the boundary grid `(K1+1) x (K2+1)`,
/// row-major.
#[derive(Debug, Clone)]
pub struct Ale2Result {
    pub exposures: (usize, usize),
    pub boundaries1: Vec<f64>,
    pub boundaries2: Vec<f64>,
    /// Cell counts, `bins1 x bins2` row-major.
    pub cell_counts: Vec<usize>,
    /// Cells whose double difference was imputed from the nearest nonempty
    /// cell, `bins1 x bins2` row-major.
    pub imputed: Vec<bool>,
    pub per_draw: RowMatrix,
    pub mean: Vec<f64>,
    pub lo95: Vec<f64>,
    pub hi95: Vec<f64>,
    pub audit_violations: usize,
}

impl Ale2Result {
    pub fn grid_value(&self, values: &[f64], a: usize, b: usize) -> f64 {
        values[a * self.boundaries2.len() + b]
    }
}

#[allow(clippy::too_many_arguments)]
fn ale2_surface_counts(
    surface: &dyn Surface,
    data: &RowMatrix,
    k: usize,
    l: usize,
    bins1: &AleBins,
    bins2: &AleBins,
    counts: &[usize],
    imputed: &[bool],
    nearest: &[usize],
    audit: &AtomicUsize,
) -> Vec<f64> {
    let nb1 = bins1.bins();
    let nb2 = bins2.bins();
    let mut sums = vec![0.0; nb1 * nb2];
    let mut buf = vec![0.0; data.cols()];
    for i in 0..data.rows() {
        let a = bins1.bin_of_row[i];
        let b = bins2.bin_of_row[i];
        let (lo1, hi1) = (bins1.boundaries[a], bins1.boundaries[a + 1]);
        let (lo2, hi2) = (bins2.boundaries[b], bins2.boundaries[b + 1]);
        let (z1, z2) = (data.get(i, k), data.get(i, l));
        if (z1 - lo1).abs() > hi1 - lo1 || (z2 - lo2).abs() > hi2 - lo2 {
            audit.fetch_add(1, Ordering::Relaxed);
        }
        buf.copy_from_slice(data.row(i));
        buf[k] = hi1;
        buf[l] = hi2;
        let pp = surface.eval(&buf);
        buf[l] = lo2;
        let pm = surface.eval(&buf);
        buf[k] = lo1;
        let mm = surface.eval(&buf);
        buf[l] = hi2;
        let mp = surface.eval(&buf);
        sums[a * nb2 + b] += pp - pm - mp + mm;
    }
    let mut delta = vec![0.0; nb1 * nb2];
    for c in 0..nb1 * nb2 {
        delta[c] = if counts[c] > 0 {
            sums[c] / counts[c] as f64
        } else {
            f64::NAN
        };
    }
    for c in 0..nb1 * nb2 {
        if imputed[c] {
            delta[c] = delta[nearest[c]];
        }
    }

    // Double cumulative sum onto the boundary grid.
    let g1 = nb1 + 1;
    let g2 = nb2 + 1;
    let mut h = vec![0.0; g1 * g2];
    for a in 1..g1 {
        for b in 1..g2 {
            h[a * g2 + b] = delta[(a - 1) * nb2 + (b - 1)] + h[(a - 1) * g2 + b]
                + h[a * g2 + (b - 1)]
                - h[(a - 1) * g2 + (b - 1)];
        }
    }

    // Subtract the accumulated per-axis means (cell-count weighted).
    let cell = |a: usize, b: usize| counts[a * nb2 + b] as f64;
    let mut f1 = vec![0.0; g1];
    for a in 1..g1 {
        let mut num = 0.0;
        let mut den = 0.0;
        for b in 0..nb2 {
            let d_lo = h[a * g2 + b] - h[(a - 1) * g2 + b];
            let d_hi = h[a * g2 + b + 1] - h[(a - 1) * g2 + b + 1];
            num += cell(a - 1, b) * 0.5 * (d_lo + d_hi);
            den += cell(a - 1, b);
        }
        f1[a] = f1[a - 1] + if den > 0.0 { num / den } else { 0.0 };
    }
    let mut f2 = vec![0.0; g2];
    for b in 1..g2 {
        let mut num = 0.0;
        let mut den = 0.0;
        for a in 0..nb1 {
            let d_lo = h[a * g2 + b] - h[a * g2 + b - 1];
            let d_hi = h[(a + 1) * g2 + b] - h[(a + 1) * g2 + b - 1];
            num += cell(a, b - 1) * 0.5 * (d_lo + d_hi);
            den += cell(a, b - 1);
        }
        f2[b] = f2[b - 1] + if den > 0.0 { num / den } else { 0.0 };
    }
    for a in 0..g1 {
        for b in 0..g2 {
            h[a * g2 + b] -= f1[a] + f2[b];
        }
    }

    // Center to zero cell-count-weighted mean over the four corners.
    let n: f64 = counts.iter().map(|&c| c as f64).sum();
    let mut center = 0.0;
    for a in 0..nb1 {
        for b in 0..nb2 {
            let corners = h[a * g2 + b] + h[a * g2 + b + 1] + h[(a + 1) * g2 + b]
                + h[(a + 1) * g2 + b + 1];
            center += cell(a, b) * 0.25 * corners;
        }
    }
    center /= n;
    for v in &mut h {
        *v -= center;
    }
    h
}

fn cell_counts(bins1: &AleBins, bins2: &AleBins) -> Vec<usize> {
    let nb2 = bins2.bins();
    let mut counts = vec![0usize; bins1.bins() * nb2];
    for (a, b) in bins1.bin_of_row.iter().zip(&bins2.bin_of_row) {
        counts[a * nb2 + b] += 1;
    }
    counts
}

pub fn ale_second_order<S: Surface>(
    surfaces: &[S],
    data: &RowMatrix,
    k: usize,
    l: usize,
    requested_bins: usize,
) -> Result<Ale2Result> {
    if k == l {
        return Err(Error::Config(
            "second-order ALE needs two distinct exposures".to_string(),
        ));
    }
    if surfaces.is_empty() {
        return Err(Error::Data("no posterior draws".to_string()));
    }
    let bins1 = AleBins::build(&data.column(k), requested_bins)?;
    let bins2 = AleBins::build(&data.column(l), requested_bins)?;
    let counts = cell_counts(&bins1, &bins2);
    let nb1 = bins1.bins();
    let nb2 = bins2.bins();

    // Nearest nonempty cell per empty cell (Manhattan distance, deterministic
    // scan order), used to impute double differences along the accumulation.
    let imputed: Vec<bool> = counts.iter().map(|&c| c == 0).collect();
    let mut nearest = vec![0usize; counts.len()];
    for a in 0..nb1 {
        for b in 0..nb2 {
            let c = a * nb2 + b;
            if counts[c] > 0 {
                nearest[c] = c;
                continue;
            }
            let mut best = usize::MAX;
            let mut best_dist = usize::MAX;
            for a2 in 0..nb1 {
                for b2 in 0..nb2 {
                    let c2 = a2 * nb2 + b2;
                    if counts[c2] == 0 {
                        continue;
                    }
                    let dist = a.abs_diff(a2) + b.abs_diff(b2);
                    if dist < best_dist {
                        best_dist = dist;
                        best = c2;
                    }
                }
            }
            nearest[c] = best;
        }
    }

    let audit = AtomicUsize::new(0);
    let surfaces_out: Vec<Vec<f64>> = surfaces
        .par_iter()
        .map(|s| {
            ale2_surface_counts(
                s, data, k, l, &bins1, &bins2, &counts, &imputed, &nearest, &audit,
            )
        })
        .collect();
    let per_draw = RowMatrix::from_rows(&surfaces_out);
    let (mean, lo95, hi95) = summarize_pointwise(&per_draw);
    Ok(Ale2Result {
        exposures: (k, l),
        boundaries1: bins1.boundaries.clone(),
        boundaries2: bins2.boundaries.clone(),
        cell_counts: counts,
        imputed,
        per_draw,
        mean,
        lo95,
        hi95,
        audit_violations: audit.load(Ordering::Relaxed),
    })
}

/// Composes a second-order surface with the two main-effect curves
/// (the "main effects added on" display convention). The ALE1 results must
/// come from the same data and bin count.
pub fn compose_joint_surface(ale2: &Ale2Result, ale1_k: &AleResult, ale1_l: &AleResult) -> Vec<f64> {
    let g2 = ale2.boundaries2.len();
    let mut out = ale2.mean.clone();
    for (a, _) in ale2.boundaries1.iter().enumerate() {
        for b in 0..g2 {
            out[a * g2 + b] += interp(&ale1_k.boundaries, &ale1_k.mean, ale2.boundaries1[a])
                + interp(&ale1_l.boundaries, &ale1_l.mean, ale2.boundaries2[b]);
        }
    }
    out
}

fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    for w in xs.windows(2).zip(ys.windows(2)) {
        let (seg, vals) = w;
        if x <= seg[1] {
            let t = (x - seg[0]) / (seg[1] - seg[0]);
            return vals[0] + t * (vals[1] - vals[0]);
        }
    }
    *ys.last().unwrap()
}

/// Per-draw curves on an explicit grid (partial dependence or fixed profile).
#[derive(Debug, Clone)]
pub struct CurveResult {
    pub exposure: usize,
    pub grid: Vec<f64>,
    pub per_draw: RowMatrix,
    pub mean: Vec<f64>,
    pub lo95: Vec<f64>,
    pub hi95: Vec<f64>,
    pub n_evaluations: usize,
}

pub fn partial_dependence<S: Surface>(
    surfaces: &[S],
    data: &RowMatrix,
    k: usize,
    grid: &[f64],
) -> Result<CurveResult> {
    if surfaces.is_empty() {
        return Err(Error::Data("no posterior draws".to_string()));
    }
    let evals = AtomicUsize::new(0);
    let rows_out: Vec<Vec<f64>> = surfaces
        .par_iter()
        .map(|s| {
            let mut buf = vec![0.0; data.cols()];
            grid.iter()
                .map(|&g| {
                    let mut acc = 0.0;
                    for i in 0..data.rows() {
                        buf.copy_from_slice(data.row(i));
                        buf[k] = g;
                        acc += s.eval(&buf);
                        evals.fetch_add(1, Ordering::Relaxed);
                    }
                    acc / data.rows() as f64
                })
                .collect()
        })
        .collect();
    let n_evaluations = evals.load(Ordering::Relaxed);
    // The accounting identity of the estimator: one prediction per draw, row,
    // and grid value.
    assert_eq!(n_evaluations, surfaces.len() * data.rows() * grid.len());
    let per_draw = RowMatrix::from_rows(&rows_out);
    let (mean, lo95, hi95) = summarize_pointwise(&per_draw);
    Ok(CurveResult {
        exposure: k,
        grid: grid.to_vec(),
        per_draw,
        mean,
        lo95,
        hi95,
        n_evaluations,
    })
}

pub fn fixed_profile<S: Surface>(
    surfaces: &[S],
    reference: &[f64],
    k: usize,
    grid: &[f64],
) -> Result<CurveResult> {
    if surfaces.is_empty() {
        return Err(Error::Data("no posterior draws".to_string()));
    }
    let rows_out: Vec<Vec<f64>> = surfaces
        .par_iter()
        .map(|s| {
            let mut buf = reference.to_vec();
            grid.iter()
                .map(|&g| {
                    buf[k] = g;
                    s.eval(&buf)
                })
                .collect()
        })
        .collect();
    let per_draw = RowMatrix::from_rows(&rows_out);
    let (mean, lo95, hi95) = summarize_pointwise(&per_draw);
    Ok(CurveResult {
        exposure: k,
        grid: grid.to_vec(),
        per_draw,
        mean,
        lo95,
        hi95,
        n_evaluations: surfaces.len() * grid.len(),
    })
}

/// Relative risk when every exposure sits at the same decile, against the
/// all-medians profile.
#[derive(Debug, Clone)]
pub struct DecileResult {
    pub deciles: Vec<f64>,
    pub per_draw: RowMatrix,
    pub mean: Vec<f64>,
    pub lo95: Vec<f64>,
    pub hi95: Vec<f64>,
}

pub fn decile_mixture_effect<S: Surface>(surfaces: &[S], data: &RowMatrix) -> Result<DecileResult> {
    if surfaces.is_empty() {
        return Err(Error::Data("no posterior draws".to_string()));
    }
    let q = data.cols();
    let deciles: Vec<f64> = (1..=9).map(|d| d as f64 / 10.0).collect();
    let mut profiles = Vec::with_capacity(deciles.len());
    let mut median = vec![0.0; q];
    for k in 0..q {
        let col = data.column(k);
        median[k] = quantile(&col, 0.5);
    }
    for &d in &deciles {
        let mut profile = vec![0.0; q];
        for k in 0..q {
            profile[k] = quantile(&data.column(k), d);
        }
        profiles.push(profile);
    }
    let rows_out: Vec<Vec<f64>> = surfaces
        .par_iter()
        .map(|s| {
            let f_median = s.eval(&median);
            profiles
                .iter()
                .map(|p| (s.eval(p) - f_median).exp())
                .collect()
        })
        .collect();
    let per_draw = RowMatrix::from_rows(&rows_out);
    let (mean, lo95, hi95) = summarize_pointwise(&per_draw);
    Ok(DecileResult {
        deciles,
        per_draw,
        mean,
        lo95,
        hi95,
    })
}

/// WAIC decomposition.
#[derive(Debug, Clone)]
pub struct WaicResult {
    pub waic: f64,
    pub lppd: f64,
    pub p_waic: f64,
    pub per_row: Vec<(f64, f64)>,
}

pub fn waic(ll: &LogLikMatrix) -> Result<WaicResult> {
    if ll.draws < 2 {
        return Err(Error::Data(
            "WAIC needs at least 2 posterior draws".to_string(),
        ));
    }
    let m = ll.draws as f64;
    let mut lppd = 0.0;
    let mut p_waic = 0.0;
    let mut per_row = Vec::with_capacity(ll.rows);
    let mut column = vec![0.0; ll.draws];
    for i in 0..ll.rows {
        for d in 0..ll.draws {
            column[d] = ll.value(d, i);
        }
        let row_lppd = log_sum_exp(&column) - m.ln();
        let mean = column.iter().sum::<f64>() / m;
        let row_p = column.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0);
        lppd += row_lppd;
        p_waic += row_p;
        per_row.push((row_lppd, row_p));
    }
    Ok(WaicResult {
        waic: -2.0 * (lppd - p_waic),
        lppd,
        p_waic,
        per_row,
    })
}

/// Posterior-draw surfaces from a store.
pub fn store_surfaces(store: &PosteriorStore) -> Result<Vec<Vec<SoftTree>>> {
    store.decode_all_trees()
}

/// Effect-query plumbing shared by the CLI.
#[derive(Debug, Clone, PartialEq)]
pub enum EffectMode {
    Ale1,
    Ale2,
    Pd,
    Fixed,
    Decile,
}

#[derive(Debug, Clone)]
pub enum Reference {
    Median,
    Values(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct EffectQuery {
    pub mode: EffectMode,
    pub exposure: Option<String>,
    pub exposure2: Option<String>,
    pub bins: usize,
    /// Central display fraction (e.g. 0.95); trimming never affects the
    /// accumulation, only which grid rows are emitted.
    pub trim: Option<f64>,
    pub reference: Reference,
    /// Grid size for PD/fixed curves.
    pub grid_points: usize,
    /// Restricts evaluation to the first `n` posterior draws.
    pub draw_limit: Option<usize>,
}

impl Default for EffectQuery {
    fn default() -> Self {
        Self {
            mode: EffectMode::Ale1,
            exposure: None,
            exposure2: None,
            bins: 40,
            trim: Some(0.95),
            reference: Reference::Median,
            grid_points: 41,
            draw_limit: None,
        }
    }
}

/// One row of the tidy output CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct TidyRow {
    pub mode: String,
    pub exposure_1: String,
    pub exposure_2: String,
    pub grid_1: f64,
    pub grid_2: Option<f64>,
    pub mean: f64,
    pub lo95: f64,
    pub hi95: f64,
    pub n_bin: usize,
    pub flag: String,
}

pub fn tidy_csv(rows: &[TidyRow]) -> String {
    let mut out = String::from("mode,exposure_1,exposure_2,grid_1,grid_2,mean,lo95,hi95,n_bin,flag\n");
    for r in rows {
        let grid_2 = r.grid_2.map(|g| g.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.mode, r.exposure_1, r.exposure_2, r.grid_1, grid_2, r.mean, r.lo95, r.hi95, r.n_bin,
            r.flag
        ));
    }
    out
}

pub fn parse_tidy_csv(text: &str) -> Result<Vec<TidyRow>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != "mode,exposure_1,exposure_2,grid_1,grid_2,mean,lo95,hi95,n_bin,flag" {
        return Err(Error::Data(format!("unexpected tidy header: {header}")));
    }
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 10 {
            return Err(Error::Data(format!("bad tidy row: {line}")));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Data(format!("bad number `{s}` in tidy row")))
        };
        rows.push(TidyRow {
            mode: parts[0].to_string(),
            exposure_1: parts[1].to_string(),
            exposure_2: parts[2].to_string(),
            grid_1: parse(parts[3])?,
            grid_2: if parts[4].is_empty() {
                None
            } else {
                Some(parse(parts[4])?)
            },
            mean: parse(parts[5])?,
            lo95: parse(parts[6])?,
            hi95: parse(parts[7])?,
            n_bin: parts[8]
                .parse()
                .map_err(|_| Error::Data(format!("bad count `{}`", parts[8])))?,
            flag: parts[9].to_string(),
        });
    }
    Ok(rows)
}

fn trim_range(values: &[f64], trim: Option<f64>) -> (f64, f64) {
    match trim {
        None => (f64::NEG_INFINITY, f64::INFINITY),
        Some(frac) => {
            let tail = (1.0 - frac) / 2.0;
            (quantile(values, tail), quantile(values, 1.0 - tail))
        }
    }
}

/// Runs one effect query against a store + dataset and renders tidy rows.
pub fn run_effect_query(
    store: &PosteriorStore,
    data: &PanelDataset,
    query: &EffectQuery,
) -> Result<Vec<TidyRow>> {
    let mut decoded = store_surfaces(store)?;
    if let Some(limit) = query.draw_limit {
        if limit == 0 {
            return Err(Error::Config("draw limit must be positive".to_string()));
        }
        decoded.truncate(limit);
    }
    let surfaces: Vec<EnsembleSurface> = decoded
        .iter()
        .map(|trees| EnsembleSurface { trees })
        .collect();
    let z = &data.exposures;
    let mut rows = Vec::new();
    match query.mode {
        EffectMode::Ale1 => {
            let name = query
                .exposure
                .as_ref()
                .ok_or_else(|| Error::Config("ale1 needs --exposure".to_string()))?;
            let k = data.exposure_index(name)?;
            let result = ale_first_order(&surfaces, z, k, query.bins)?;
            let (lo, hi) = trim_range(&z.column(k), query.trim);
            for (j, &b) in result.boundaries.iter().enumerate() {
                if b < lo || b > hi {
                    continue;
                }
                rows.push(TidyRow {
                    mode: "ale1".to_string(),
                    exposure_1: name.clone(),
                    exposure_2: String::new(),
                    grid_1: b,
                    grid_2: None,
                    mean: result.mean[j],
                    lo95: result.lo95[j],
                    hi95: result.hi95[j],
                    n_bin: result.counts[j.saturating_sub(1)],
                    flag: String::new(),
                });
            }
        }
        EffectMode::Ale2 => {
            let name1 = query
                .exposure
                .as_ref()
                .ok_or_else(|| Error::Config("ale2 needs --exposure".to_string()))?;
            let name2 = query
                .exposure2
                .as_ref()
                .ok_or_else(|| Error::Config("ale2 needs --exposure2".to_string()))?;
            let k = data.exposure_index(name1)?;
            let l = data.exposure_index(name2)?;
            let result = ale_second_order(&surfaces, z, k, l, query.bins)?;
            let (lo1, hi1) = trim_range(&z.column(k), query.trim);
            let (lo2, hi2) = trim_range(&z.column(l), query.trim);
            let g2 = result.boundaries2.len();
            let nb2 = g2 - 1;
            for (a, &b1) in result.boundaries1.iter().enumerate() {
                if b1 < lo1 || b1 > hi1 {
                    continue;
                }
                for (b, &b2) in result.boundaries2.iter().enumerate() {
                    if b2 < lo2 || b2 > hi2 {
                        continue;
                    }
                    let cell_a = a.min(result.boundaries1.len() - 2);
                    let cell_b = b.min(nb2 - 1);
                    let cell = cell_a * nb2 + cell_b;
                    rows.push(TidyRow {
                        mode: "ale2".to_string(),
                        exposure_1: name1.clone(),
                        exposure_2: name2.clone(),
                        grid_1: b1,
                        grid_2: Some(b2),
                        mean: result.mean[a * g2 + b],
                        lo95: result.lo95[a * g2 + b],
                        hi95: result.hi95[a * g2 + b],
                        n_bin: result.cell_counts[cell],
                        flag: if result.imputed[cell] {
                            "imputed".to_string()
                        } else {
                            String::new()
                        },
                    });
                }
            }
        }
        EffectMode::Pd | EffectMode::Fixed => {
            let name = query
                .exposure
                .as_ref()
                .ok_or_else(|| Error::Config("curve modes need --exposure".to_string()))?;
            let k = data.exposure_index(name)?;
            let col = z.column(k);
            let (lo, hi) = trim_range(&col, query.trim);
            let (gmin, gmax) = (
                col.iter().copied().fold(f64::INFINITY, f64::min),
                col.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            );
            let grid: Vec<f64> = (0..query.grid_points)
                .map(|i| gmin + (gmax - gmin) * i as f64 / (query.grid_points - 1) as f64)
                .collect();
            let (mode, result) = if query.mode == EffectMode::Pd {
                ("pd", partial_dependence(&surfaces, z, k, &grid)?)
            } else {
                let reference = match &query.reference {
                    Reference::Median => (0..z.cols())
                        .map(|j| quantile(&z.column(j), 0.5))
                        .collect::<Vec<f64>>(),
                    Reference::Values(v) => {
                        if v.len() != z.cols() {
                            return Err(Error::Config(format!(
                                "reference profile has {} values, need {}",
                                v.len(),
                                z.cols()
                            )));
                        }
                        v.clone()
                    }
                };
                ("fixed", fixed_profile(&surfaces, &reference, k, &grid)?)
            };
            for (j, &g) in result.grid.iter().enumerate() {
                if g < lo || g > hi {
                    continue;
                }
                rows.push(TidyRow {
                    mode: mode.to_string(),
                    exposure_1: name.clone(),
                    exposure_2: String::new(),
                    grid_1: g,
                    grid_2: None,
                    mean: result.mean[j],
                    lo95: result.lo95[j],
                    hi95: result.hi95[j],
                    n_bin: data.rows(),
                    flag: String::new(),
                });
            }
        }
        EffectMode::Decile => {
            let result = decile_mixture_effect(&surfaces, z)?;
            for (j, &d) in result.deciles.iter().enumerate() {
                rows.push(TidyRow {
                    mode: "decile".to_string(),
                    exposure_1: "all".to_string(),
                    exposure_2: String::new(),
                    grid_1: d,
                    grid_2: None,
                    mean: result.mean[j],
                    lo95: result.lo95[j],
                    hi95: result.hi95[j],
                    n_bin: data.rows(),
                    flag: String::new(),
                });
            }
        }
    }
    Ok(rows)
}
