//! Prediction, scoring and repeated k-fold cross-validation.

use std::collections::HashMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{gp_predict_mean, KernelState};
use crate::io::{fit_transform, Dataset, Design, NormalizationTransform, Schema};
use crate::sampler::{
    run, AcceptanceTable, Calibration, ColumnRoles, Hyperparams, PosteriorDraws, RunOptions,
    Variant,
};
use crate::trees::DecisionTree;

/// Per-draw predictions and noise replicates for a set of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    /// `draws[m][i]`: prediction of draw `m` for row `i`.
    pub draws: Vec<Vec<f64>>,
    /// Mean over draws for every row.
    pub mean: Vec<f64>,
    /// `replicates[i]`: every noisy replicate for row `i`, `Q` per draw.
    pub replicates: Vec<Vec<f64>>,
    pub original_scale: bool,
    /// Rows that met a categorical level unseen in training.
    pub unknown_level: Vec<bool>,
}

fn column_means(draws: &[Vec<f64>], n: usize) -> Vec<f64> {
    let mut mean = vec![0.0; n];
    for d in draws {
        for (m, v) in mean.iter_mut().zip(d) {
            *m += v;
        }
    }
    let m = draws.len() as f64;
    mean.iter_mut().for_each(|v| *v /= m);
    mean
}

impl PredictionSet {
    pub fn n_rows(&self) -> usize {
        self.mean.len()
    }

    /// Map every prediction back through the inverse target transform.
    pub fn to_original_scale(mut self, t: &NormalizationTransform) -> Self {
        if self.original_scale {
            return self;
        }
        for d in &mut self.draws {
            d.iter_mut().for_each(|v| *v = t.inverse_y(*v));
        }
        for r in &mut self.replicates {
            r.iter_mut().for_each(|v| *v = t.inverse_y(*v));
        }
        self.mean = column_means(&self.draws, self.mean.len());
        self.original_scale = true;
        self
    }

    /// Central interval at `level` from the pooled replicates of each row;
    /// level 0 gives the median twice.
    pub fn intervals(&self, level: f64) -> Result<Vec<(f64, f64)>> {
        if !(0.0..1.0).contains(&level) {
            return Err(Error::InvalidInput(format!("interval level {level} not in [0, 1)")));
        }
        let lo = (1.0 - level) / 2.0;
        self.replicates
            .iter()
            .map(|r| {
                if r.is_empty() {
                    return Err(Error::InvalidInput("no interval replicates".into()));
                }
                let mut s = r.clone();
                s.sort_by(f64::total_cmp);
                Ok((quantile_sorted(&s, lo), quantile_sorted(&s, 1.0 - lo)))
            })
            .collect()
    }

    /// Mean CRPS over rows against `y`.
    pub fn crps(&self, y: &[f64]) -> Result<f64> {
        if y.len() != self.n_rows() {
            return Err(Error::InvalidInput("target length does not match predictions".into()));
        }
        let mut total = 0.0;
        for (r, &v) in self.replicates.iter().zip(y) {
            total += crps(r, v)?;
        }
        Ok(total / y.len() as f64)
    }

    /// Fraction of `values` inside their interval at `level`.
    pub fn coverage(&self, values: &[f64], level: f64) -> Result<f64> {
        let iv = self.intervals(level)?;
        let hits = iv
            .iter()
            .zip(values)
            .filter(|((lo, hi), v)| lo <= *v && *v <= hi)
            .count();
        Ok(hits as f64 / values.len() as f64)
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Predict normalised rows `x_star` from every retained draw. Each draw's
/// prediction sums, over trees, the GP conditional mean of the leaf the row
/// falls in (or the leaf constant); `q` replicates per draw add noise with
/// the draw's residual precision.
pub fn predict<R: Rng + ?Sized>(
    post: &PosteriorDraws,
    x_star: &Design,
    q: usize,
    rng: &mut R,
) -> Result<PredictionSet> {
    if post.draws.is_empty() {
        return Err(Error::NoDraws);
    }
    if x_star.n_cols() != post.design.n_cols() {
        return Err(Error::InvalidInput(format!(
            "prediction rows have {} columns, the model expects {}",
            x_star.n_cols(),
            post.design.n_cols()
        )));
    }
    let n_star = x_star.n_rows();
    let hp = &post.hyperparams;
    let gp = post.variant.gp_nodes();
    let gp_cols = &post.roles.gp;
    let mut unknown_level = vec![false; n_star];
    let mut draws = Vec::with_capacity(post.draws.len());
    let mut replicates = vec![Vec::with_capacity(post.draws.len() * q); n_star];

    for draw in &post.draws {
        let mut pred = vec![0.0; n_star];
        for tree in &draw.trees {
            let dt = DecisionTree::from_nodes(tree.nodes.clone(), &post.design)?;
            let mut test_by_leaf: HashMap<usize, Vec<usize>> = HashMap::new();
            for i in 0..n_star {
                let (leaf, flag) = dt.route_flagged(x_star.row(i));
                unknown_level[i] |= flag;
                test_by_leaf.entry(leaf).or_default().push(i);
            }
            let mut train_by_leaf: HashMap<usize, Vec<usize>> = HashMap::new();
            for (i, &leaf) in dt.leaf_of_row().iter().enumerate() {
                if test_by_leaf.contains_key(&leaf) {
                    train_by_leaf.entry(leaf).or_default().push(i);
                }
            }
            let mut leaves: Vec<_> = test_by_leaf.into_iter().collect();
            leaves.sort_unstable_by_key(|(leaf, _)| *leaf);
            for (leaf, test_rows) in leaves {
                let train_rows = train_by_leaf.get(&leaf).ok_or_else(|| {
                    Error::Invariant(format!("leaf {leaf} holds no training rows"))
                })?;
                if gp {
                    let kernel = KernelState {
                        length_scales: tree.phi.clone(),
                        nu: hp.nu,
                        tau_mu: hp.tau_mu,
                        nugget: hp.nugget,
                    };
                    let psi: Vec<f64> = train_rows.iter().map(|&i| tree.fit[i]).collect();
                    let x_node = post.design.gp_matrix(train_rows, gp_cols);
                    let xs = x_star.gp_matrix(&test_rows, gp_cols);
                    let mean = gp_predict_mean(&psi, &x_node, &xs, &kernel)?;
                    for (&i, m) in test_rows.iter().zip(mean.iter()) {
                        pred[i] += m;
                    }
                } else {
                    let value = tree.fit[train_rows[0]];
                    for &i in &test_rows {
                        pred[i] += value;
                    }
                }
            }
        }
        if q > 0 {
            let sd = draw.tau.recip().sqrt();
            for (i, &p) in pred.iter().enumerate() {
                for _ in 0..q {
                    replicates[i].push(p + sd * rng.sample::<f64, _>(StandardNormal));
                }
            }
        }
        draws.push(pred);
    }
    let mean = column_means(&draws, n_star);
    Ok(PredictionSet {
        draws,
        mean,
        replicates,
        original_scale: false,
        unknown_level,
    })
}

pub fn rmse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.len() != y_hat.len() || y.is_empty() {
        return Err(Error::InvalidInput(format!(
            "rmse needs equal non-empty lengths, got {} and {}",
            y.len(),
            y_hat.len()
        )));
    }
    let ss: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((ss / y.len() as f64).sqrt())
}

/// Sample CRPS: `mean |X_i - y| - 1/(2 m^2) sum_{i,j} |X_i - X_j|`, with the
/// pair sum taken from the sorted sample in `O(m log m)`.
pub fn crps(samples: &[f64], y: f64) -> Result<f64> {
    let m = samples.len();
    if m < 2 {
        return Err(Error::InvalidInput("CRPS needs at least two replicates".into()));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let mf = m as f64;
    let abs_err = s.iter().map(|x| (x - y).abs()).sum::<f64>() / mf;
    // sum_{i<j} (x_(j) - x_(i)) = sum_i (2i - m + 1) x_(i), zero-based.
    let pairs: f64 = s
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * i as f64 - mf + 1.0) * x)
        .sum();
    Ok((abs_err - pairs / (mf * mf)).max(0.0))
}

/// A fitted model with everything needed to predict on raw covariates.
#[derive(Clone, Debug, PartialEq)]
pub struct FittedModel {
    pub transform: NormalizationTransform,
    pub schema: Schema,
    pub calibration: Calibration,
    pub posterior: PosteriorDraws,
}

impl FittedModel {
    /// Predict raw (un-normalised) covariates; results are on the original
    /// target scale.
    pub fn predict<R: Rng + ?Sized>(&self, x: &Design, q: usize, rng: &mut R) -> Result<PredictionSet> {
        predict_raw(&self.posterior, &self.transform, x, q, rng)
    }
}

pub fn predict_raw<R: Rng + ?Sized>(
    post: &PosteriorDraws,
    transform: &NormalizationTransform,
    x: &Design,
    q: usize,
    rng: &mut R,
) -> Result<PredictionSet> {
    let xs = transform.transform_design(x)?;
    Ok(predict(post, &xs, q, rng)?.to_original_scale(transform))
}

/// Normalise, calibrate and run the sampler on a raw data set.
pub fn fit_dataset<R: Rng + ?Sized>(
    data: &Dataset,
    hp: &Hyperparams,
    variant: Variant,
    roles: Option<&ColumnRoles>,
    opts: &RunOptions,
    rng: &mut R,
) -> Result<FittedModel> {
    let (transform, norm) = fit_transform(data)?;
    let (hp, calibration) = hp.calibrate(&norm.y, &norm.design)?;
    let roles = roles
        .cloned()
        .unwrap_or_else(|| ColumnRoles::defaults(&norm.design));
    let posterior = run(&norm.design, &norm.y, &hp, variant, &roles, opts, rng)?;
    Ok(FittedModel {
        transform,
        schema: data.schema(),
        calibration,
        posterior,
    })
}

/// Mix `parts` into `base` to get an independent seed per job.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts
        .iter()
        .fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// Fold of every row: a random permutation dealt out round-robin, so fold
/// sizes differ by at most one.
pub fn fold_assignment<R: Rng + ?Sized>(n: usize, folds: usize, rng: &mut R) -> Result<Vec<usize>> {
    if folds < 2 || folds > n {
        return Err(Error::InvalidInput(format!("cannot split {n} rows into {folds} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut fold = vec![0; n];
    for (k, &i) in order.iter().enumerate() {
        fold[i] = k % folds;
    }
    Ok(fold)
}

#[derive(Clone, Debug)]
pub struct CvConfig {
    pub repetitions: usize,
    pub folds: usize,
    pub variants: Vec<Variant>,
    /// Template; `nu`, `tau_mu` and `d_tau` are recalibrated on every
    /// training split.
    pub hyperparams: Hyperparams,
    pub roles: Option<ColumnRoles>,
    pub seed: u64,
    /// Worker threads; 0 uses the available parallelism.
    pub workers: usize,
    /// Keep per-draw minimum length-scales of each kernel column.
    pub keep_min_phi: bool,
    /// Smallest test fold accepted. Leave-one-out needs 1.
    pub min_test_rows: usize,
    pub verbose: bool,
}

impl CvConfig {
    pub fn new(variants: Vec<Variant>, hyperparams: Hyperparams, seed: u64) -> Self {
        CvConfig {
            repetitions: 5,
            folds: 5,
            variants,
            hyperparams,
            roles: None,
            seed,
            workers: 0,
            keep_min_phi: false,
            min_test_rows: 2,
            verbose: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvRecord {
    pub repetition: usize,
    pub fold: usize,
    pub variant: Variant,
    pub n_test: usize,
    pub rmse: f64,
    pub crps: f64,
    /// Share of held-out targets inside their 95% interval.
    pub coverage_95: f64,
    pub acceptance: AcceptanceTable,
    /// `min_phi[m][j]`: minimum over trees of the length-scale of kernel
    /// column `j` in draw `m`. Empty unless requested.
    pub min_phi: Vec<Vec<f64>>,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Rmse,
    Crps,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Rmse => "rmse",
            Metric::Crps => "crps",
        }
    }

    fn of(self, r: &CvRecord) -> f64 {
        match self {
            Metric::Rmse => r.rmse,
            Metric::Crps => r.crps,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvReport {
    pub variants: Vec<Variant>,
    /// In (repetition, fold, variant) order.
    pub records: Vec<CvRecord>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl CvReport {
    pub fn records_for(&self, variant: Variant) -> impl Iterator<Item = &CvRecord> {
        self.records.iter().filter(move |r| r.variant == variant)
    }

    pub fn median(&self, variant: Variant, metric: Metric) -> f64 {
        let v: Vec<f64> = self.records_for(variant).map(|r| metric.of(r)).collect();
        median(&v)
    }

    /// Ranks of the variants (1 = best) in every partition, keyed by
    /// `(repetition, fold)`. Ties keep the configured variant order.
    pub fn ranks(&self, metric: Metric) -> Vec<((usize, usize), Vec<(Variant, usize)>)> {
        let mut partitions: Vec<(usize, usize)> =
            self.records.iter().map(|r| (r.repetition, r.fold)).collect();
        partitions.dedup();
        partitions
            .into_iter()
            .map(|key| {
                let mut rows: Vec<&CvRecord> = self
                    .records
                    .iter()
                    .filter(|r| (r.repetition, r.fold) == key)
                    .collect();
                rows.sort_by(|a, b| metric.of(a).total_cmp(&metric.of(b)));
                let ranks = rows
                    .iter()
                    .enumerate()
                    .map(|(k, r)| (r.variant, k + 1))
                    .collect();
                (key, ranks)
            })
            .collect()
    }

    pub fn mean_rank(&self, variant: Variant, metric: Metric) -> f64 {
        let ranks: Vec<f64> = self
            .ranks(metric)
            .iter()
            .filter_map(|(_, r)| r.iter().find(|(v, _)| *v == variant).map(|(_, k)| *k as f64))
            .collect();
        ranks.iter().sum::<f64>() / ranks.len() as f64
    }

    /// Long format: `repetition,fold,variant,metric,value`.
    pub fn write_long_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "repetition,fold,variant,metric,value")?;
        let rank_maps: Vec<(Metric, HashMap<(usize, usize, Variant), usize>)> =
            [Metric::Rmse, Metric::Crps]
                .into_iter()
                .map(|m| {
                    let map = self
                        .ranks(m)
                        .into_iter()
                        .flat_map(|((rep, fold), r)| {
                            r.into_iter().map(move |(v, k)| ((rep, fold, v), k))
                        })
                        .collect();
                    (m, map)
                })
                .collect();
        for r in &self.records {
            let key = (r.repetition, r.fold, r.variant);
            writeln!(w, "{},{},{},rmse,{}", r.repetition, r.fold, r.variant, r.rmse)?;
            writeln!(w, "{},{},{},crps,{}", r.repetition, r.fold, r.variant, r.crps)?;
            writeln!(w, "{},{},{},coverage_95,{}", r.repetition, r.fold, r.variant, r.coverage_95)?;
            for (m, map) in &rank_maps {
                writeln!(
                    w,
                    "{},{},{},rank_{},{}",
                    r.repetition,
                    r.fold,
                    r.variant,
                    m.name(),
                    map[&key]
                )?;
            }
        }
        Ok(())
    }

    /// One row per variant: medians and mean ranks.
    pub fn write_summary_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "variant,median_rmse,median_crps,mean_rank_rmse,mean_rank_crps")?;
        for &v in &self.variants {
            writeln!(
                w,
                "{},{},{},{},{}",
                v,
                self.median(v, Metric::Rmse),
                self.median(v, Metric::Crps),
                self.mean_rank(v, Metric::Rmse),
                self.mean_rank(v, Metric::Crps)
            )?;
        }
        Ok(())
    }

    /// Per-move acceptance rates pooled over all jobs of each variant; moves
    /// a variant never proposes are omitted.
    pub fn write_acceptance_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "variant,move,proposed,accepted,rate")?;
        for &v in &self.variants {
            let mut table = AcceptanceTable::default();
            for r in self.records_for(v) {
                table.merge(&r.acceptance);
            }
            write_acceptance_rows(w, &v.to_string(), &table)?;
        }
        Ok(())
    }

    /// Per-variable summaries of the per-draw minimum length-scale: median
    /// and share of draws at or above 10.
    pub fn write_min_phi_csv<W: Write>(&self, w: &mut W, names: &[String]) -> Result<()> {
        writeln!(w, "variant,variable,median_min_phi,share_min_phi_ge_10")?;
        for &v in &self.variants {
            let records: Vec<&CvRecord> = self.records_for(v).filter(|r| !r.min_phi.is_empty()).collect();
            let Some(first) = records.first() else { continue };
            for j in 0..first.min_phi[0].len() {
                let values: Vec<f64> = records
                    .iter()
                    .flat_map(|r| r.min_phi.iter().map(move |d| d[j]))
                    .collect();
                let share = values.iter().filter(|&&x| x >= 10.0).count() as f64 / values.len() as f64;
                let name = names.get(j).cloned().unwrap_or_else(|| format!("x{}", j + 1));
                writeln!(w, "{v},{name},{},{share}", median(&values))?;
            }
        }
        Ok(())
    }
}

pub fn write_acceptance_rows<W: Write>(w: &mut W, label: &str, table: &AcceptanceTable) -> Result<()> {
    for kind in crate::trees::MoveKind::ALL {
        let i = kind.index();
        if table.proposed[i] == 0 {
            continue;
        }
        writeln!(
            w,
            "{label},{kind},{},{},{}",
            table.proposed[i],
            table.accepted[i],
            table.accepted[i] as f64 / table.proposed[i] as f64
        )?;
    }
    Ok(())
}

/// Fit on `train`, score on `test`, both raw.
pub fn fit_and_score<R: Rng + ?Sized>(
    train: &Dataset,
    test: &Dataset,
    hp: &Hyperparams,
    variant: Variant,
    roles: Option<&ColumnRoles>,
    keep_min_phi: bool,
    rng: &mut R,
) -> Result<(f64, f64, f64, AcceptanceTable, Vec<Vec<f64>>)> {
    let model = fit_dataset(train, hp, variant, roles, &RunOptions::default(), rng)?;
    let q = hp.q_replicates.max(1);
    let pred = model.predict(&test.design, q, rng)?;
    let r = rmse(&test.y, &pred.mean)?;
    let c = pred.crps(&test.y)?;
    let cov = pred.coverage(&test.y, 0.95)?;
    let min_phi = if keep_min_phi && variant.gp_nodes() {
        model.posterior.min_phi_by_draw()
    } else {
        Vec::new()
    };
    Ok((r, c, cov, model.posterior.acceptance.clone(), min_phi))
}

/// Repeated k-fold cross-validation of every variant. Jobs run on a worker
/// pool; each has its own seed derived from `(seed, repetition, fold,
/// variant)`, so results do not depend on the number of workers.
pub fn cross_validate(data: &Dataset, cfg: &CvConfig) -> Result<CvReport> {
    if cfg.variants.is_empty() {
        return Err(Error::InvalidInput("no variants to compare".into()));
    }
    if cfg.repetitions == 0 {
        return Err(Error::InvalidInput("at least one repetition is needed".into()));
    }
    cfg.hyperparams.validate()?;
    let n = data.n_rows();
    let mut jobs = Vec::new();
    for rep in 0..cfg.repetitions {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[rep as u64, u64::MAX]));
        let assignment = fold_assignment(n, cfg.folds, &mut rng)?;
        for fold in 0..cfg.folds {
            let test: Vec<usize> = (0..n).filter(|&i| assignment[i] == fold).collect();
            if test.len() < cfg.min_test_rows.max(1) {
                return Err(Error::InvalidInput(format!(
                    "fold {fold} has {} rows, fewer than {}",
                    test.len(),
                    cfg.min_test_rows
                )));
            }
            let train: Vec<usize> = (0..n).filter(|&i| assignment[i] != fold).collect();
            for (vi, &variant) in cfg.variants.iter().enumerate() {
                jobs.push((rep, fold, vi, variant, train.clone(), test.clone()));
            }
        }
    }
    let workers = if cfg.workers == 0 {
        std::thread::available_parallelism().map_or(1, |p| p.get())
    } else {
        cfg.workers
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidInput(format!("worker pool: {e}")))?;
    let results: Vec<Result<CvRecord>> = pool.install(|| {
        jobs.par_iter()
            .map(|(rep, fold, vi, variant, train, test)| {
                let start = Instant::now();
                let seed = derive_seed(cfg.seed, &[*rep as u64, *fold as u64, *vi as u64]);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (rmse, crps, coverage_95, acceptance, min_phi) = fit_and_score(
                    &data.select_rows(train),
                    &data.select_rows(test),
                    &cfg.hyperparams,
                    *variant,
                    cfg.roles.as_ref(),
                    cfg.keep_min_phi,
                    &mut rng,
                )?;
                let seconds = start.elapsed().as_secs_f64();
                if cfg.verbose {
                    eprintln!(
                        "rep {rep} fold {fold} variant {variant}: rmse {rmse:.4} crps {crps:.4} ({seconds:.1}s)"
                    );
                }
                Ok(CvRecord {
                    repetition: *rep,
                    fold: *fold,
                    variant: *variant,
                    n_test: test.len(),
                    rmse,
                    crps,
                    coverage_95,
                    acceptance,
                    min_phi,
                    seconds,
                })
            })
            .collect()
    });
    let records = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(CvReport {
        variants: cfg.variants.clone(),
        records,
    })
}

/// `resolution^2` points on a regular grid over `[lo, hi]^2`, first
/// coordinate varying slowest.
pub fn grid_design(resolution: usize, lo: f64, hi: f64) -> Result<Design> {
    if resolution < 2 {
        return Err(Error::InvalidInput("grid resolution must be at least 2".into()));
    }
    let last = (resolution - 1) as f64;
    let at = |k: usize| lo + (hi - lo) * (k as f64 / last);
    let mut values = Vec::with_capacity(2 * resolution * resolution);
    for a in 0..resolution {
        for b in 0..resolution {
            values.push(at(a));
            values.push(at(b));
        }
    }
    Design::continuous(resolution * resolution, 2, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 3.53553).abs() < 1e-5);
        let y = [1.0, -2.0, 0.5];
        let yh = [0.0, 1.0, 2.0];
        let scaled = rmse(&y.map(|v| -3.0 * v), &yh.map(|v| -3.0 * v)).unwrap();
        assert!((scaled - 3.0 * rmse(&y, &yh).unwrap()).abs() < 1e-12);
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(rmse(&[], &[]).is_err());
    }

    /// O(m^2) evaluation of the same estimator.
    fn crps_naive(x: &[f64], y: f64) -> f64 {
        let m = x.len() as f64;
        let a = x.iter().map(|v| (v - y).abs()).sum::<f64>() / m;
        let mut b = 0.0;
        for u in x {
            for v in x {
                b += (u - v).abs();
            }
        }
        a - b / (2.0 * m * m)
    }

    #[test]
    fn crps_examples() {
        assert_eq!(crps(&[2.5; 7], 1.0).unwrap(), 1.5);
        assert_eq!(crps(&[0.3; 4], 0.3).unwrap(), 0.0);
        assert!(crps(&[1.0], 0.0).is_err());
        let x = [0.3, -1.2, 2.0, 0.7, 0.7, -0.1];
        assert!((crps(&x, 0.4).unwrap() - crps_naive(&x, 0.4)).abs() < 1e-14);
    }

    #[test]
    fn quantile_examples() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&s, 0.0), 1.0);
        assert_eq!(quantile_sorted(&s, 1.0), 4.0);
        assert_eq!(quantile_sorted(&s, 0.5), 2.5);
        assert!((quantile_sorted(&s, 0.25) - 1.75).abs() < 1e-15);
    }

    #[test]
    fn folds_are_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = fold_assignment(23, 5, &mut rng).unwrap();
        let mut counts = [0; 5];
        for &k in &f {
            counts[k] += 1;
        }
        assert!(counts.iter().all(|&c| c == 4 || c == 5));
        let loo = fold_assignment(7, 7, &mut rng).unwrap();
        let mut sorted = loo.clone();
        sorted.sort();
        assert_eq!(sorted, (0..7).collect::<Vec<_>>());
        assert!(fold_assignment(3, 5, &mut rng).is_err());
    }

    #[test]
    fn ranks_are_permutations() {
        let rec = |rep, fold, variant, rmse: f64| CvRecord {
            repetition: rep,
            fold,
            variant,
            n_test: 3,
            rmse,
            crps: -rmse,
            coverage_95: 1.0,
            acceptance: AcceptanceTable::default(),
            min_phi: vec![],
            seconds: 0.0,
        };
        let report = CvReport {
            variants: vec![Variant::A, Variant::D, Variant::C],
            records: vec![
                rec(0, 0, Variant::A, 3.0),
                rec(0, 0, Variant::D, 1.0),
                rec(0, 0, Variant::C, 2.0),
                rec(0, 1, Variant::A, 1.0),
                rec(0, 1, Variant::D, 1.0),
                rec(0, 1, Variant::C, 0.5),
            ],
        };
        for (_, r) in report.ranks(Metric::Rmse) {
            let sum: usize = r.iter().map(|(_, k)| k).sum();
            assert_eq!(sum, 6);
        }
        assert_eq!(report.mean_rank(Variant::D, Metric::Rmse), 2.0);
        assert_eq!(report.median(Variant::A, Metric::Rmse), 2.0);
    }

    #[test]
    fn grid_has_resolution_squared_rows() {
        let g = grid_design(50, -1.0, 1.0).unwrap();
        assert_eq!(g.n_rows(), 2500);
        assert_eq!(g.row(0), &[-1.0, -1.0]);
        assert_eq!(g.row(2499), &[1.0, 1.0]);
    }

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(1, &[0, 0, 0]);
        assert_ne!(a, derive_seed(1, &[0, 0, 1]));
        assert_ne!(a, derive_seed(1, &[0, 1, 0]));
        assert_ne!(a, derive_seed(2, &[0, 0, 0]));
        assert_eq!(a, derive_seed(1, &[0, 0, 0]));
    }
}
