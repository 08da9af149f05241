//! Hyperparameter calibration and the backfitting MCMC sampler.
//!
//! Each iteration visits the trees in order. For tree `t` it forms the
//! partial residuals, proposes one structural move, redraws the node
//! predictions and updates the length-scales one dimension at a time; the
//! residual precision is drawn once all trees have been visited.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_ur, ln_gamma};

use crate::error::{Error, Result};
use crate::gp::{
    constant_node_log_likelihood, log_marginal_node_likelihood, sample_constant_node, sample_psi,
    CovarianceBundle, KernelState, DEFAULT_NUGGET,
};
use crate::io::Design;
use crate::trees::{
    default_theta_grid, log_tree_prior, propose_move, DecisionTree, MoveKind, MoveProbabilities,
    Node, SplitContext,
};

/// Model restrictions: which node model and which move set is used.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Constant nodes, axis-aligned moves only.
    A,
    /// Constant nodes with rotated moves.
    B,
    /// GP nodes, axis-aligned moves only.
    C,
    /// GP nodes with rotated moves.
    D,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::A, Variant::B, Variant::C, Variant::D];

    pub fn gp_nodes(self) -> bool {
        matches!(self, Variant::C | Variant::D)
    }

    pub fn projection(self) -> bool {
        matches!(self, Variant::B | Variant::D)
    }

    pub fn move_probabilities(self, hp: &Hyperparams) -> MoveProbabilities {
        if self.projection() {
            hp.move_probs
        } else {
            MoveProbabilities::without_projection()
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::A => "A",
            Variant::B => "B",
            Variant::C => "C",
            Variant::D => "D",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Variant::A),
            "B" => Ok(Variant::B),
            "C" => Ok(Variant::C),
            "D" => Ok(Variant::D),
            other => Err(Error::InvalidInput(format!("unknown variant '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub n_trees: usize,
    pub k: f64,
    pub alpha: f64,
    pub beta: f64,
    pub nu: f64,
    pub tau_mu: f64,
    /// Weight of the first gamma component of the length-scale prior.
    pub kappa: f64,
    pub a_phi1: f64,
    pub d_phi1: f64,
    pub a_phi2: f64,
    pub d_phi2: f64,
    pub a_tau: f64,
    /// Set from the data by [`Hyperparams::calibrate`].
    pub d_tau: f64,
    pub eta_tau: f64,
    pub move_probs: MoveProbabilities,
    pub theta_grid: Vec<f64>,
    pub phi_grid: Vec<f64>,
    pub n_mcmc: usize,
    pub n_burnin: usize,
    /// Noise replicates per draw when building prediction intervals.
    pub q_replicates: usize,
    pub min_leaf_size: usize,
    pub nugget: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        let n_trees = 10;
        let k = 2.0;
        let prec = 4.0 * k * k * n_trees as f64;
        Hyperparams {
            n_trees,
            k,
            alpha: 0.95,
            beta: 2.0,
            nu: prec,
            tau_mu: prec,
            kappa: 0.3,
            a_phi1: 2.0,
            d_phi1: 2.5,
            a_phi2: 5000.0,
            d_phi2: 100.0,
            a_tau: 3.0,
            d_tau: 1.0,
            eta_tau: 0.9,
            move_probs: MoveProbabilities::default(),
            theta_grid: default_theta_grid(),
            phi_grid: vec![
                0.1, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 50.0,
            ],
            n_mcmc: 2000,
            n_burnin: 500,
            q_replicates: 10,
            min_leaf_size: 1,
            nugget: DEFAULT_NUGGET,
        }
    }
}

/// Outcome of calibrating the residual-precision prior.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Calibration {
    pub tau_ols: f64,
    /// True when there were too few rows for the regression and the target
    /// variance was used instead.
    pub variance_fallback: bool,
}

impl Hyperparams {
    /// Set `nu = tau_mu = 4 k^2 T` and solve `d_tau` from a linear
    /// regression of `y` (already on the model scale) on `design`.
    pub fn calibrate(&self, y: &[f64], design: &Design) -> Result<(Hyperparams, Calibration)> {
        if y.len() != design.n_rows() || y.len() < 2 {
            return Err(Error::InvalidInput("calibration needs at least two rows".into()));
        }
        let mut hp = self.clone();
        let prec = 4.0 * hp.k * hp.k * hp.n_trees as f64;
        hp.nu = prec;
        hp.tau_mu = prec;
        let (tau_ols, variance_fallback) = ols_precision(y, design);
        hp.d_tau = solve_d_tau(hp.a_tau, tau_ols, hp.eta_tau)?;
        Ok((
            hp,
            Calibration {
                tau_ols,
                variance_fallback,
            },
        ))
    }

    pub fn n_retained(&self) -> usize {
        self.n_mcmc.saturating_sub(self.n_burnin)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if self.n_trees == 0 {
            return bad("the number of trees must be positive");
        }
        if self.n_burnin >= self.n_mcmc {
            return bad("burn-in must be smaller than the number of iterations");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) || !(self.beta >= 0.0) {
            return bad("tree prior needs alpha in (0,1) and beta >= 0");
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return bad("kappa must lie in (0,1)");
        }
        if !(self.eta_tau > 0.0 && self.eta_tau < 1.0) {
            return bad("eta_tau must lie in (0,1)");
        }
        let positive = [
            self.k, self.nu, self.tau_mu, self.a_phi1, self.d_phi1, self.a_phi2, self.d_phi2,
            self.a_tau, self.d_tau,
        ];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return bad("precisions and gamma parameters must be positive");
        }
        let probs = self.move_probs.0;
        if probs.iter().any(|p| !(*p >= 0.0)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("move probabilities must be non-negative and sum to one");
        }
        if self.phi_grid.is_empty() || self.phi_grid.iter().any(|v| !(*v > 0.0)) {
            return bad("the length-scale grid must hold positive values");
        }
        let max_theta = std::f64::consts::FRAC_PI_4 + 1e-12;
        if self.theta_grid.iter().any(|t| !(*t >= 0.0 && *t <= max_theta)) {
            return bad("rotation angles must lie in [0, pi/4]");
        }
        if !(self.nugget >= 0.0) {
            return bad("nugget must be non-negative");
        }
        Ok(())
    }
}

/// Residual precision of a least-squares fit with intercept, using the
/// pseudo-inverse for rank-deficient designs. With `n <= p + 1` the inverse
/// variance of `y` is returned and the flag is set.
pub fn ols_precision(y: &[f64], design: &Design) -> (f64, bool) {
    let n = y.len();
    let p = design.n_cols();
    if n <= p + 1 {
        let mean = y.iter().sum::<f64>() / n as f64;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        return (1.0 / var, true);
    }
    let x = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { design.get(i, j - 1) });
    let yv = nalgebra::DVector::from_column_slice(y);
    let svd = x.clone().svd(true, true);
    let eps = 1e-10 * svd.singular_values.max().max(1.0);
    let beta = svd.solve(&yv, eps).expect("u and v were computed");
    let resid = yv - x * beta;
    let rank = svd.rank(eps);
    let dof = (n - rank).max(1) as f64;
    let sigma2 = resid.norm_squared() / dof;
    (1.0 / sigma2.max(1e-300), false)
}

/// Rate `d` such that `Pr(tau >= tau_ols) = eta` under `Ga(a, rate d)`.
pub fn solve_d_tau(a: f64, tau_ols: f64, eta: f64) -> Result<f64> {
    if !(tau_ols > 0.0) || !tau_ols.is_finite() {
        return Err(Error::NonFinite(format!("regression precision {tau_ols}")));
    }
    // Upper tail Q(a, x) is decreasing in x = d * tau_ols.
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while gamma_ur(a, hi) > eta {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gamma_ur(a, mid) > eta {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi) / tau_ols)
}

fn log_gamma_density(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

/// Log density of the two-component gamma mixture prior on a length-scale.
pub fn log_phi_prior(phi: f64, hp: &Hyperparams) -> f64 {
    let a = hp.kappa.ln() + log_gamma_density(phi, hp.a_phi1, hp.d_phi1);
    let b = (1.0 - hp.kappa).ln() + log_gamma_density(phi, hp.a_phi2, hp.d_phi2);
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `y` minus the fits of every tree except `t`.
pub fn partial_residuals(y: &[f64], fits: &[Vec<f64>], t: usize) -> Vec<f64> {
    let mut r = y.to_vec();
    for (s, fit) in fits.iter().enumerate() {
        if s != t {
            for (ri, fi) in r.iter_mut().zip(fit) {
                *ri -= fi;
            }
        }
    }
    r
}

/// Draw the residual precision from `Ga(n/2 + a, rate SSR/2 + d)`.
pub fn gibbs_tau<R: Rng + ?Sized>(y: &[f64], y_hat: &[f64], a: f64, d: f64, rng: &mut R) -> f64 {
    let (shape, rate) = tau_conditional(y, y_hat, a, d);
    Gamma::new(shape, 1.0 / rate)
        .expect("positive gamma parameters")
        .sample(rng)
}

/// Shape and rate of the residual-precision full conditional.
pub fn tau_conditional(y: &[f64], y_hat: &[f64], a: f64, d: f64) -> (f64, f64) {
    let ssr: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum();
    (y.len() as f64 / 2.0 + a, 0.5 * ssr + d)
}

/// Which columns may be split on, rotated, or enter the kernels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnRoles {
    pub split: Vec<usize>,
    pub rotation: Vec<usize>,
    pub gp: Vec<usize>,
}

impl ColumnRoles {
    /// Split on every column; rotate and use in kernels every continuous one.
    pub fn defaults(design: &Design) -> Self {
        let cont = design.continuous_columns();
        ColumnRoles {
            split: (0..design.n_cols()).collect(),
            rotation: cont.clone(),
            gp: cont,
        }
    }

    pub fn validate(&self, design: &Design, variant: Variant) -> Result<()> {
        let p = design.n_cols();
        if self.split.is_empty() {
            return Err(Error::InvalidInput("no columns to split on".into()));
        }
        for &j in self.split.iter().chain(&self.rotation).chain(&self.gp) {
            if j >= p {
                return Err(Error::InvalidInput(format!("column index {j} out of range")));
            }
        }
        for &j in self.rotation.iter().chain(&self.gp) {
            if !design.kind(j).is_continuous() {
                return Err(Error::InvalidInput(format!(
                    "column {j} is categorical and cannot be rotated or used in a kernel"
                )));
            }
        }
        if variant.gp_nodes() && self.gp.is_empty() {
            return Err(Error::InvalidInput(format!(
                "variant {variant} needs at least one continuous kernel column"
            )));
        }
        Ok(())
    }
}

/// Per-move proposal and acceptance counts over the retained iterations.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceTable {
    pub proposed: [u64; 5],
    pub accepted: [u64; 5],
    /// Proposals rejected because they were invalid (empty leaf, no node).
    pub invalid: [u64; 5],
    /// Proposals rejected because the proposed tree failed numerically.
    pub numeric_failures: u64,
    pub phi_proposed: u64,
    pub phi_accepted: u64,
}

impl AcceptanceTable {
    pub fn rate(&self, kind: MoveKind) -> Option<f64> {
        let p = self.proposed[kind.index()];
        (p > 0).then(|| self.accepted[kind.index()] as f64 / p as f64)
    }

    pub fn merge(&mut self, other: &AcceptanceTable) {
        for i in 0..5 {
            self.proposed[i] += other.proposed[i];
            self.accepted[i] += other.accepted[i];
            self.invalid[i] += other.invalid[i];
        }
        self.numeric_failures += other.numeric_failures;
        self.phi_proposed += other.phi_proposed;
        self.phi_accepted += other.phi_accepted;
    }
}

/// One tree of one retained draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeDraw {
    pub nodes: Vec<Node>,
    /// Length-scales of the kernel columns (empty for constant nodes).
    pub phi: Vec<f64>,
    /// Node prediction for every training row; rows sharing a leaf hold
    /// that leaf's prediction vector.
    pub fit: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub tau: f64,
    pub trees: Vec<TreeDraw>,
}

impl Draw {
    /// Sum of the tree fits.
    pub fn fitted(&self) -> Vec<f64> {
        let n = self.trees.first().map_or(0, |t| t.fit.len());
        let mut out = vec![0.0; n];
        for tree in &self.trees {
            for (o, f) in out.iter_mut().zip(&tree.fit) {
                *o += f;
            }
        }
        out
    }

    pub(crate) fn validate(&self, n_rows: usize, n_gp: usize) -> std::result::Result<(), String> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(format!("tau {} is not a positive number", self.tau));
        }
        for (t, tree) in self.trees.iter().enumerate() {
            if tree.fit.len() != n_rows {
                return Err(format!("tree {t} has {} fitted values", tree.fit.len()));
            }
            if !tree.phi.is_empty() && tree.phi.len() != n_gp {
                return Err(format!("tree {t} has {} length-scales", tree.phi.len()));
            }
            if tree.nodes.is_empty() {
                return Err(format!("tree {t} has no nodes"));
            }
            for (id, node) in tree.nodes.iter().enumerate() {
                if let Some((l, r)) = node.children {
                    if l >= tree.nodes.len() || r >= tree.nodes.len() || node.rule.is_none() {
                        return Err(format!("tree {t} node {id} is malformed"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Retained draws of one sampler run.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorDraws {
    pub variant: Variant,
    pub hyperparams: Hyperparams,
    pub roles: ColumnRoles,
    /// Normalised training covariates the draws were fitted to.
    pub design: Design,
    pub draws: Vec<Draw>,
    /// Residual precision after every iteration, burn-in included.
    pub tau_trace: Vec<f64>,
    pub acceptance: AcceptanceTable,
}

impl PosteriorDraws {
    /// For every draw, the minimum length-scale over trees of each kernel
    /// column.
    pub fn min_phi_by_draw(&self) -> Vec<Vec<f64>> {
        self.draws
            .iter()
            .map(|d| {
                let p = self.roles.gp.len();
                (0..p)
                    .map(|j| {
                        d.trees
                            .iter()
                            .filter_map(|t| t.phi.get(j).copied())
                            .fold(f64::INFINITY, f64::min)
                    })
                    .collect()
            })
            .collect()
    }

    /// Posterior mean of the in-sample fit on the model scale.
    pub fn mean_fit(&self) -> Vec<f64> {
        let n = self.design.n_rows();
        let mut out = vec![0.0; n];
        for d in &self.draws {
            for (o, f) in out.iter_mut().zip(d.fitted()) {
                *o += f;
            }
        }
        let m = self.draws.len().max(1) as f64;
        out.iter_mut().for_each(|v| *v /= m);
        out
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Progress line on standard error every 100 iterations.
    pub verbose: bool,
    /// Exhaustive structural checks after every iteration.
    pub check_invariants: bool,
}

/// Node model shared by the tree, node and length-scale updates.
struct Leaves<'a> {
    design: &'a Design,
    gp_cols: &'a [usize],
    gp: bool,
    tau: f64,
    tau_mu: f64,
}

impl Leaves<'_> {
    fn log_lik(
        &self,
        rows: &[usize],
        r: &[f64],
        kernel: &KernelState,
    ) -> Result<(f64, Option<CovarianceBundle>)> {
        let rl: Vec<f64> = rows.iter().map(|&i| r[i]).collect();
        if self.gp {
            let x = self.design.gp_matrix(rows, self.gp_cols);
            let bundle = CovarianceBundle::new(&x, kernel, self.tau)?;
            let ll = log_marginal_node_likelihood(&rl, &bundle)?;
            Ok((ll, Some(bundle)))
        } else {
            Ok((constant_node_log_likelihood(&rl, self.tau, self.tau_mu), None))
        }
    }
}

/// Result of one structural MH step.
pub struct TreeStep {
    pub tree: DecisionTree,
    pub kind: MoveKind,
    pub valid: bool,
    pub accepted: bool,
    /// `min(1, ratio)`; `None` for invalid or numerically failed proposals.
    pub accept_prob: Option<f64>,
    pub numeric_failure: bool,
    cache: HashMap<usize, (f64, Option<CovarianceBundle>)>,
}

/// Inputs shared by every tree update of one sweep.
pub struct StepContext<'a> {
    pub split: SplitContext<'a>,
    pub gp_cols: &'a [usize],
    pub hp: &'a Hyperparams,
    pub variant: Variant,
    pub probs: MoveProbabilities,
}

/// One structural MH update of a tree against its partial residuals.
pub fn mh_tree_step<R: Rng + ?Sized>(
    tree: &DecisionTree,
    r: &[f64],
    kernel: &KernelState,
    tau: f64,
    ctx: &StepContext<'_>,
    rng: &mut R,
) -> TreeStep {
    let leaves = Leaves {
        design: ctx.split.design,
        gp_cols: ctx.gp_cols,
        gp: ctx.variant.gp_nodes(),
        tau,
        tau_mu: ctx.hp.tau_mu,
    };
    let proposal = propose_move(tree, &ctx.split, &ctx.probs, rng);
    let kind = proposal.kind;
    let reject = |valid: bool, numeric_failure: bool, accept_prob: Option<f64>, cache| TreeStep {
        tree: tree.clone(),
        kind,
        valid,
        accepted: false,
        accept_prob,
        numeric_failure,
        cache,
    };
    let Some(proposed) = proposal.tree else {
        return reject(false, false, None, HashMap::new());
    };

    let mut old_cache = HashMap::new();
    let mut old_ll = 0.0;
    for &leaf in &proposal.removed_leaves {
        match leaves.log_lik(&tree.rows_of(leaf), r, kernel) {
            Ok(v) => {
                old_ll += v.0;
                old_cache.insert(leaf, v);
            }
            Err(_) => return reject(true, true, None, HashMap::new()),
        }
    }
    let mut new_cache = HashMap::new();
    let mut new_ll = 0.0;
    for &leaf in &proposal.added_leaves {
        match leaves.log_lik(&proposed.rows_of(leaf), r, kernel) {
            Ok(v) => {
                new_ll += v.0;
                new_cache.insert(leaf, v);
            }
            Err(_) => return reject(true, true, None, old_cache),
        }
    }
    let log_ratio = new_ll - old_ll + log_tree_prior(&proposed, ctx.hp.alpha, ctx.hp.beta)
        - log_tree_prior(tree, ctx.hp.alpha, ctx.hp.beta);
    let accept_prob = if log_ratio >= 0.0 { 1.0 } else { log_ratio.exp() };
    let u: f64 = rng.random();
    if u.ln() < log_ratio {
        TreeStep {
            tree: proposed,
            kind,
            valid: true,
            accepted: true,
            accept_prob: Some(accept_prob),
            numeric_failure: false,
            cache: new_cache,
        }
    } else {
        reject(true, false, Some(accept_prob), old_cache)
    }
}

/// Node predictions of one tree: `(leaf, rows, values)`.
type LeafPsi = Vec<(usize, Vec<usize>, Vec<f64>)>;

/// Draw the node predictions of every leaf and return them with the total
/// tree log-likelihood under the current kernel.
fn gibbs_psi<R: Rng + ?Sized>(
    step: &mut TreeStep,
    r: &[f64],
    kernel: &KernelState,
    leaves: &Leaves<'_>,
    rng: &mut R,
) -> Result<(LeafPsi, f64)> {
    let mut out = Vec::new();
    let mut total = 0.0;
    for (leaf, rows) in step.tree.leaf_rows() {
        let rl: Vec<f64> = rows.iter().map(|&i| r[i]).collect();
        let (ll, bundle) = match step.cache.remove(&leaf) {
            Some(v) => v,
            None => leaves.log_lik(&rows, r, kernel)?,
        };
        let psi = match bundle {
            Some(mut b) => sample_psi(&rl, &mut b, rng)?.as_slice().to_vec(),
            None => {
                let v = sample_constant_node(&rl, leaves.tau, leaves.tau_mu, rng);
                vec![v; rows.len()]
            }
        };
        total += ll;
        out.push((leaf, rows, psi));
    }
    Ok((out, total))
}

fn tree_log_lik(
    tree: &DecisionTree,
    r: &[f64],
    kernel: &KernelState,
    leaves: &Leaves<'_>,
) -> Result<f64> {
    let mut total = 0.0;
    for (_, rows) in tree.leaf_rows() {
        total += leaves.log_lik(&rows, r, kernel)?.0;
    }
    Ok(total)
}

/// Coordinate-wise MH update of the length-scales of one tree. Returns the
/// number of accepted coordinates; `current_ll` is the tree log-likelihood
/// under the incoming kernel.
pub fn mh_phi_step<R: Rng + ?Sized>(
    tree: &DecisionTree,
    r: &[f64],
    kernel: &mut KernelState,
    tau: f64,
    current_ll: f64,
    design: &Design,
    gp_cols: &[usize],
    hp: &Hyperparams,
    rng: &mut R,
) -> usize {
    let leaves = Leaves {
        design,
        gp_cols,
        gp: true,
        tau,
        tau_mu: hp.tau_mu,
    };
    let mut ll = current_ll;
    let mut accepted = 0;
    for j in 0..kernel.length_scales.len() {
        let current = kernel.length_scales[j];
        let proposal = hp.phi_grid[rng.random_range(0..hp.phi_grid.len())];
        if proposal == current {
            accepted += 1;
            continue;
        }
        let mut trial = kernel.clone();
        trial.length_scales[j] = proposal;
        let Ok(new_ll) = tree_log_lik(tree, r, &trial, &leaves) else {
            continue;
        };
        let log_ratio = new_ll - ll + log_phi_prior(proposal, hp) - log_phi_prior(current, hp);
        let u: f64 = rng.random();
        if u.ln() < log_ratio {
            *kernel = trial;
            ll = new_ll;
            accepted += 1;
        }
    }
    accepted
}

fn check_state(
    trees: &[DecisionTree],
    psi: &[LeafPsi],
    fits: &[Vec<f64>],
    design: &Design,
) -> Result<()> {
    for (t, tree) in trees.iter().enumerate() {
        if !tree.check_partition(design) {
            return Err(Error::Invariant(format!("tree {t} leaves do not partition the rows")));
        }
        let mut value_of = HashMap::new();
        for (leaf, rows, values) in &psi[t] {
            for (&i, &v) in rows.iter().zip(values) {
                value_of.insert((*leaf, i), v);
            }
        }
        for i in 0..design.n_rows() {
            let leaf = tree.route(design.row(i));
            match value_of.get(&(leaf, i)) {
                Some(&v) if v == fits[t][i] => {}
                _ => {
                    return Err(Error::Invariant(format!(
                        "tree {t} row {i}: stored fit disagrees with its leaf prediction"
                    )))
                }
            }
        }
    }
    Ok(())
}

/// Run the sampler on normalised data (`y` on the `[-0.5, 0.5]` scale).
pub fn run<R: Rng + ?Sized>(
    design: &Design,
    y: &[f64],
    hp: &Hyperparams,
    variant: Variant,
    roles: &ColumnRoles,
    opts: &RunOptions,
    rng: &mut R,
) -> Result<PosteriorDraws> {
    hp.validate()?;
    roles.validate(design, variant)?;
    let n = design.n_rows();
    if y.len() != n || n == 0 {
        return Err(Error::InvalidInput(format!("{} targets for {n} rows", y.len())));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite target".into()));
    }
    let n_trees = hp.n_trees;
    let gp = variant.gp_nodes();
    let n_gp = if gp { roles.gp.len() } else { 0 };
    let step_ctx = StepContext {
        split: SplitContext {
            design,
            split_columns: &roles.split,
            rotation_columns: &roles.rotation,
            theta_grid: &hp.theta_grid,
            min_leaf_size: hp.min_leaf_size,
        },
        gp_cols: &roles.gp,
        hp,
        variant,
        probs: variant.move_probabilities(hp),
    };

    let mut trees = vec![DecisionTree::stump(n); n_trees];
    let mut kernels: Vec<KernelState> = (0..n_trees)
        .map(|_| {
            let mut k = KernelState::new(vec![1.0; n_gp], hp.nu, hp.tau_mu);
            k.nugget = hp.nugget;
            k
        })
        .collect();
    let mut fits = vec![vec![0.0; n]; n_trees];
    let mut psi: Vec<LeafPsi> = vec![vec![(0, (0..n).collect(), vec![0.0; n])]; n_trees];
    let mut tau = 1.0;

    {
        let leaves = Leaves {
            design,
            gp_cols: &roles.gp,
            gp,
            tau,
            tau_mu: hp.tau_mu,
        };
        let ll = tree_log_lik(&trees[0], y, &kernels[0], &leaves)?;
        if !ll.is_finite() {
            return Err(Error::NonFinite(format!(
                "initial log-likelihood {ll} for {n} rows"
            )));
        }
    }

    let mut table = AcceptanceTable::default();
    let mut running = AcceptanceTable::default();
    let mut draws = Vec::with_capacity(hp.n_retained());
    let mut tau_trace = Vec::with_capacity(hp.n_mcmc);

    for iter in 0..hp.n_mcmc {
        let retained = iter >= hp.n_burnin;
        for t in 0..n_trees {
            let r = partial_residuals(y, &fits, t);
            let leaves = Leaves {
                design,
                gp_cols: &roles.gp,
                gp,
                tau,
                tau_mu: hp.tau_mu,
            };
            let mut step = mh_tree_step(&trees[t], &r, &kernels[t], tau, &step_ctx, rng);
            if opts.check_invariants {
                if let Some(p) = step.accept_prob {
                    if !(0.0..=1.0).contains(&p) {
                        return Err(Error::Invariant(format!("acceptance probability {p}")));
                    }
                }
            }
            for tab in [&mut running]
                .into_iter()
                .chain(retained.then_some(&mut table))
            {
                let k = step.kind.index();
                tab.proposed[k] += 1;
                tab.accepted[k] += step.accepted as u64;
                tab.invalid[k] += (!step.valid) as u64;
                tab.numeric_failures += step.numeric_failure as u64;
            }

            let (leaf_psi, ll) = gibbs_psi(&mut step, &r, &kernels[t], &leaves, rng)?;
            let fit = &mut fits[t];
            for (_, rows, values) in &leaf_psi {
                for (&i, &v) in rows.iter().zip(values) {
                    fit[i] = v;
                }
            }
            trees[t] = step.tree;
            psi[t] = leaf_psi;

            if gp {
                let acc = mh_phi_step(
                    &trees[t],
                    &r,
                    &mut kernels[t],
                    tau,
                    ll,
                    design,
                    &roles.gp,
                    hp,
                    rng,
                );
                if retained {
                    table.phi_proposed += n_gp as u64;
                    table.phi_accepted += acc as u64;
                }
            }
        }

        let mut y_hat = vec![0.0; n];
        for fit in &fits {
            for (o, f) in y_hat.iter_mut().zip(fit) {
                *o += f;
            }
        }
        tau = gibbs_tau(y, &y_hat, hp.a_tau, hp.d_tau, rng);
        if !tau.is_finite() || tau <= 0.0 {
            return Err(Error::NonFinite(format!("residual precision {tau} at iteration {iter}")));
        }
        tau_trace.push(tau);

        if opts.check_invariants {
            check_state(&trees, &psi, &fits, design)?;
        }
        if retained {
            draws.push(Draw {
                tau,
                trees: (0..n_trees)
                    .map(|t| TreeDraw {
                        nodes: trees[t].nodes().to_vec(),
                        phi: kernels[t].length_scales.clone(),
                        fit: fits[t].clone(),
                    })
                    .collect(),
            });
        }
        if opts.verbose && (iter + 1) % 100 == 0 {
            let depth =
                trees.iter().map(|t| t.max_depth() as f64).sum::<f64>() / n_trees as f64;
            let rates: Vec<String> = MoveKind::ALL
                .iter()
                .filter_map(|&k| running.rate(k).map(|r| format!("{k}={r:.3}")))
                .collect();
            eprintln!(
                "iter {:>5}  tau {:.4}  mean depth {:.2}  {}",
                iter + 1,
                tau,
                depth,
                rates.join(" ")
            );
        }
    }

    Ok(PosteriorDraws {
        variant,
        hyperparams: hp.clone(),
        roles: roles.clone(),
        design: design.clone(),
        draws,
        tau_trace,
        acceptance: table,
    })
}
