//! Probabilistic matrix factorization with paragraph-vector priors, and the
//! imputed-SVD baseline it is compared against.
//!
//! The objective maximized by [`train_parvecmf`] is
//!
//! ```text
//! L = − Σ_i λ_i/2 ‖u_i − θ_i‖² − Σ_j λ_j/2 ‖v_j − θ_j‖² − Σ_ij c_ij/2 (r_ij − u_i·v_j)²
//! ```
//!
//! with `c_ij = a` on observed cells and `b` elsewhere (where `r_ij` counts
//! as 0). Sums over unobserved cells are never materialized: they are
//! expressed through the Gram matrices `UᵀU` and `VᵀV`.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::time::Instant;

use log::debug;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::RatingsMatrix;
use crate::error::{Error, Result};
use crate::matrix::{axpy, dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Damping {
    /// `row ← (1−γ)·row + γ·update`; `γ = 1` is the undamped rule.
    Fixed(f64),
    /// Per-row `γ = λ / (λ + tr M)`, where `M` is the row's confidence-weighted
    /// second-moment matrix. Turns each update into a gradient step no longer
    /// than the inverse curvature bound, so the objective never decreases.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMode {
    /// Evaluate the update rule once per row per sweep.
    FixedPoint,
    /// Solve each row's stationarity condition in closed form.
    Exact,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfHyperparams {
    pub k: usize,
    pub lambda_u: f64,
    pub lambda_v: f64,
    /// Per-user precision overriding `lambda_u` when present.
    pub lambda_u_per: Option<Vec<f64>>,
    pub lambda_v_per: Option<Vec<f64>>,
    /// Confidence on observed ratings (`a`).
    pub conf_obs: f64,
    /// Confidence on unobserved cells (`b`); 0 drops them from the objective.
    pub conf_unobs: f64,
    pub max_iters: usize,
    /// Stop once `|ΔL| / |L|` falls below this.
    pub tol: f64,
    /// When set, stop on `‖∇L‖_∞ < grad_tol` instead of the relative change.
    pub grad_tol: Option<f64>,
    pub damping: Damping,
    pub mode: SolveMode,
    /// Half-width of the uniform noise added to the priors at initialization.
    pub init_noise: f64,
    pub seed: u64,
}

impl Default for MfHyperparams {
    fn default() -> Self {
        MfHyperparams {
            k: 10,
            lambda_u: 1.0,
            lambda_v: 1.0,
            lambda_u_per: None,
            lambda_v_per: None,
            conf_obs: 1.0,
            conf_unobs: 0.01,
            max_iters: 100,
            tol: 1e-6,
            grad_tol: None,
            damping: Damping::Fixed(1.0),
            mode: SolveMode::FixedPoint,
            init_noise: 0.01,
            seed: 1,
        }
    }
}

impl MfHyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::arg("latent dimension k must be at least 1"));
        }
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.lambda_u) || !positive(self.lambda_v) {
            return Err(Error::arg("lambda_u and lambda_v must be positive"));
        }
        for per in [&self.lambda_u_per, &self.lambda_v_per].into_iter().flatten() {
            if !per.iter().all(|&l| positive(l)) {
                return Err(Error::arg("per-entity precisions must be positive"));
            }
        }
        if !(self.conf_obs > self.conf_unobs && self.conf_unobs >= 0.0) {
            return Err(Error::arg(format!(
                "confidences must satisfy a > b >= 0 (a = {}, b = {})",
                self.conf_obs, self.conf_unobs
            )));
        }
        if !positive(self.tol) {
            return Err(Error::arg("tol must be positive"));
        }
        if let Damping::Fixed(g) = self.damping {
            if !(g > 0.0 && g <= 1.0) {
                return Err(Error::arg(format!("damping {g} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentModel {
    pub u: Matrix,
    pub v: Matrix,
    pub theta_u: Matrix,
    pub theta_v: Matrix,
    pub hyper: MfHyperparams,
}

impl LatentModel {
    /// A model sitting exactly on its priors.
    pub fn new(theta_u: Matrix, theta_v: Matrix, hyper: MfHyperparams) -> Result<Self> {
        hyper.validate()?;
        if theta_u.cols() != hyper.k || theta_v.cols() != hyper.k {
            return Err(Error::arg(format!(
                "prior width ({}, {}) differs from k = {}",
                theta_u.cols(),
                theta_v.cols(),
                hyper.k
            )));
        }
        for (per, n, side) in [(&hyper.lambda_u_per, theta_u.rows(), "user"), (&hyper.lambda_v_per, theta_v.rows(), "item")] {
            if per.as_ref().is_some_and(|p| p.len() != n) {
                return Err(Error::arg(format!("per-{side} precision list has the wrong length")));
            }
        }
        Ok(LatentModel { u: theta_u.clone(), v: theta_v.clone(), theta_u, theta_v, hyper })
    }

    pub fn n_users(&self) -> usize {
        self.u.rows()
    }

    pub fn n_items(&self) -> usize {
        self.v.rows()
    }

    pub fn k(&self) -> usize {
        self.hyper.k
    }

    pub fn lambda_user(&self, i: usize) -> f64 {
        self.hyper.lambda_u_per.as_ref().map_or(self.hyper.lambda_u, |p| p[i])
    }

    pub fn lambda_item(&self, j: usize) -> f64 {
        self.hyper.lambda_v_per.as_ref().map_or(self.hyper.lambda_v, |p| p[j])
    }

    /// `u_i · v_j`, unclipped.
    pub fn predict(&self, i: usize, j: usize) -> Result<f64> {
        if i >= self.n_users() || j >= self.n_items() {
            return Err(Error::arg(format!(
                "({i}, {j}) outside a {}×{} model",
                self.n_users(),
                self.n_items()
            )));
        }
        Ok(dot(self.u.row(i), self.v.row(j)))
    }

    fn check_against(&self, r: &RatingsMatrix) -> Result<()> {
        let k = self.k();
        if r.n_users() != self.n_users()
            || r.n_items() != self.n_items()
            || self.u.cols() != k
            || self.v.cols() != k
            || self.theta_u.rows() != self.n_users()
            || self.theta_v.rows() != self.n_items()
        {
            return Err(Error::arg(format!(
                "model ({}×{}, k = {k}) does not fit a {}×{} ratings matrix",
                self.n_users(),
                self.n_items(),
                r.n_users(),
                r.n_items()
            )));
        }
        Ok(())
    }
}

/// Clamps a prediction onto the rating scale. Rankings are unaffected.
pub fn clip_score(x: f64) -> f64 {
    x.clamp(crate::dataset::MIN_SCORE, crate::dataset::MAX_SCORE)
}

fn sum_over_all_cells(gram_u: &Matrix, gram_v: &Matrix) -> f64 {
    // Σ_ij (u_i·v_j)² = tr(UᵀU · VᵀV)
    gram_u.as_slice().iter().zip(gram_v.as_slice()).map(|(a, b)| a * b).sum()
}

/// The MAP objective. With `b = 0` the data term covers observed cells only.
pub fn log_likelihood(model: &LatentModel, r: &RatingsMatrix) -> Result<f64> {
    model.check_against(r)?;
    let (a, b) = (model.hyper.conf_obs, model.hyper.conf_unobs);
    let mut prior = 0.0;
    for i in 0..model.n_users() {
        prior += model.lambda_user(i) / 2.0 * sq_dist(model.u.row(i), model.theta_u.row(i));
    }
    for j in 0..model.n_items() {
        prior += model.lambda_item(j) / 2.0 * sq_dist(model.v.row(j), model.theta_v.row(j));
    }
    let mut observed = 0.0;
    let mut observed_pred_sq = 0.0;
    for e in r.entries() {
        let pred = dot(model.u.row(e.user), model.v.row(e.item));
        observed += (e.score - pred).powi(2);
        observed_pred_sq += pred * pred;
    }
    let mut data = a / 2.0 * observed;
    if b > 0.0 {
        let all = sum_over_all_cells(&model.u.gram(), &model.v.gram());
        data += b / 2.0 * (all - observed_pred_sq);
    }
    Ok(-prior - data)
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum()
}

/// `Σ_j c_ij (r_ij − row·other_j) other_j` over every cell of one row,
/// given the observed `(index, score)` pairs and `gram = OtherᵀOther`.
fn data_pull(row: &[f64], observed: &[(usize, f64)], other: &Matrix, gram: &Matrix, a: f64, b: f64) -> Vec<f64> {
    let k = row.len();
    let mut g = vec![0.0; k];
    for &(j, r) in observed {
        let o = other.row(j);
        let pred = dot(row, o);
        axpy(a * r - (a - b) * pred, o, &mut g);
    }
    if b > 0.0 {
        for (c, gc) in g.iter_mut().enumerate() {
            *gc -= b * dot(gram.row(c), row);
        }
    }
    g
}

/// Gradient of [`log_likelihood`] with respect to every entry of `U` and `V`.
pub fn gradient(model: &LatentModel, r: &RatingsMatrix) -> Result<(Matrix, Matrix)> {
    model.check_against(r)?;
    let (a, b) = (model.hyper.conf_obs, model.hyper.conf_unobs);
    let k = model.k();
    let gram_u = model.u.gram();
    let gram_v = model.v.gram();
    let by_user = r.by_user();
    let by_item = r.by_item();

    let mut gu = Matrix::zeros(model.n_users(), k);
    for (i, obs) in by_user.iter().enumerate() {
        let pull = data_pull(model.u.row(i), obs, &model.v, &gram_v, a, b);
        let lam = model.lambda_user(i);
        for (c, g) in gu.row_mut(i).iter_mut().enumerate() {
            *g = pull[c] - lam * (model.u.get(i, c) - model.theta_u.get(i, c));
        }
    }
    let mut gv = Matrix::zeros(model.n_items(), k);
    for (j, obs) in by_item.iter().enumerate() {
        let pull = data_pull(model.v.row(j), obs, &model.u, &gram_u, a, b);
        let lam = model.lambda_item(j);
        for (c, g) in gv.row_mut(j).iter_mut().enumerate() {
            *g = pull[c] - lam * (model.v.get(j, c) - model.theta_v.get(j, c));
        }
    }
    Ok((gu, gv))
}

/// `‖∇L‖_∞`.
pub fn gradient_inf_norm(model: &LatentModel, r: &RatingsMatrix) -> Result<f64> {
    let (gu, gv) = gradient(model, r)?;
    Ok(gu.as_slice().iter().chain(gv.as_slice()).fold(0.0, |m, g| m.max(g.abs())))
}

#[derive(Clone, Copy)]
enum Side {
    User,
    Item,
}

/// Everything a half-sweep over one side needs, computed once.
struct HalfSweep<'a> {
    side: Side,
    model: &'a LatentModel,
    observed: &'a [Vec<(usize, f64)>],
    gram: Matrix,
}

impl<'a> HalfSweep<'a> {
    fn new(side: Side, model: &'a LatentModel, observed: &'a [Vec<(usize, f64)>]) -> Self {
        let other = match side {
            Side::User => &model.v,
            Side::Item => &model.u,
        };
        HalfSweep { side, model, observed, gram: other.gram() }
    }

    fn parts(&self, idx: usize) -> (&'a [f64], &'a [f64], &'a Matrix, f64) {
        let m = self.model;
        match self.side {
            Side::User => (m.u.row(idx), m.theta_u.row(idx), &m.v, m.lambda_user(idx)),
            Side::Item => (m.v.row(idx), m.theta_v.row(idx), &m.u, m.lambda_item(idx)),
        }
    }

    /// The update rule `row ← θ + pull / λ`, with the pull evaluated at the
    /// current row, optionally damped.
    fn fixed_point(&self, idx: usize, damping: Damping) -> Vec<f64> {
        let (a, b) = (self.model.hyper.conf_obs, self.model.hyper.conf_unobs);
        let (row, theta, other, lam) = self.parts(idx);
        let pull = data_pull(row, &self.observed[idx], other, &self.gram, a, b);
        let gamma = match damping {
            Damping::Fixed(g) => g,
            Damping::Auto => {
                let trace_gram: f64 = (0..self.gram.rows()).map(|c| self.gram.get(c, c)).sum();
                let trace_obs: f64 = self.observed[idx].iter().map(|&(j, _)| dot(other.row(j), other.row(j))).sum();
                lam / (lam + b * trace_gram + (a - b) * trace_obs)
            }
        };
        row.iter()
            .zip(theta)
            .zip(&pull)
            .map(|((&old, &t), &p)| (1.0 - gamma) * old + gamma * (t + p / lam))
            .collect()
    }

    /// `(λI + b·G + (a−b)·Σ_obs o oᵀ)⁻¹ (a·Σ_obs r·o + λθ)`.
    fn exact(&self, idx: usize) -> Vec<f64> {
        let (a, b) = (self.model.hyper.conf_obs, self.model.hyper.conf_unobs);
        let (_, theta, other, lam) = self.parts(idx);
        let k = theta.len();
        let mut sys = DMatrix::<f64>::from_fn(k, k, |r, c| b * self.gram.get(r, c));
        let mut rhs = DVector::<f64>::from_fn(k, |c, _| lam * theta[c]);
        for c in 0..k {
            sys[(c, c)] += lam;
        }
        for &(j, r) in &self.observed[idx] {
            let o = other.row(j);
            for p in 0..k {
                rhs[p] += a * r * o[p];
                for q in 0..k {
                    sys[(p, q)] += (a - b) * o[p] * o[q];
                }
            }
        }
        // positive definite for λ > 0 and a > b >= 0
        let chol = sys.cholesky().expect("row system is positive definite");
        chol.solve(&rhs).iter().copied().collect()
    }
}

fn check_row(model: &LatentModel, r: &RatingsMatrix, idx: usize, side: Side) -> Result<()> {
    model.check_against(r)?;
    let n = match side {
        Side::User => model.n_users(),
        Side::Item => model.n_items(),
    };
    if idx >= n {
        return Err(Error::arg(format!("index {idx} out of range ({n})")));
    }
    Ok(())
}

/// One application of the user update rule to row `i`, using the model's damping.
pub fn map_update_user(model: &LatentModel, r: &RatingsMatrix, i: usize) -> Result<Vec<f64>> {
    check_row(model, r, i, Side::User)?;
    let by_user = r.by_user();
    Ok(HalfSweep::new(Side::User, model, &by_user).fixed_point(i, model.hyper.damping))
}

/// One application of the item update rule to row `j`.
pub fn map_update_item(model: &LatentModel, r: &RatingsMatrix, j: usize) -> Result<Vec<f64>> {
    check_row(model, r, j, Side::Item)?;
    let by_item = r.by_item();
    Ok(HalfSweep::new(Side::Item, model, &by_item).fixed_point(j, model.hyper.damping))
}

/// The maximizer of `L` over `u_i` with everything else fixed.
pub fn exact_solve_user(model: &LatentModel, r: &RatingsMatrix, i: usize) -> Result<Vec<f64>> {
    check_row(model, r, i, Side::User)?;
    let by_user = r.by_user();
    Ok(HalfSweep::new(Side::User, model, &by_user).exact(i))
}

/// The maximizer of `L` over `v_j` with everything else fixed.
pub fn exact_solve_item(model: &LatentModel, r: &RatingsMatrix, j: usize) -> Result<Vec<f64>> {
    check_row(model, r, j, Side::Item)?;
    let by_item = r.by_item();
    Ok(HalfSweep::new(Side::Item, model, &by_item).exact(j))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRecord {
    pub sweep: usize,
    pub log_likelihood: f64,
    pub grad_inf_norm: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    /// Sweep 0 is the initialization.
    pub sweeps: Vec<SweepRecord>,
    pub converged: bool,
}

impl TrainingLog {
    pub fn final_grad_inf_norm(&self) -> f64 {
        self.sweeps.last().map_or(f64::NAN, |s| s.grad_inf_norm)
    }

    /// TSV `sweep \t log_likelihood \t grad_inf_norm \t seconds`.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "sweep\tlog_likelihood\tgrad_inf_norm\tseconds")?;
        for s in &self.sweeps {
            writeln!(w, "{}\t{:?}\t{:?}\t{:.6}", s.sweep, s.log_likelihood, s.grad_inf_norm, s.seconds)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One full sweep: every user row from the current `V`, then every item row
/// from the new `U`.
pub fn sweep(model: &mut LatentModel, by_user: &[Vec<(usize, f64)>], by_item: &[Vec<(usize, f64)>]) {
    let (mode, damping) = (model.hyper.mode, model.hyper.damping);
    let new_u = half_sweep(model, Side::User, by_user, mode, damping);
    model.u = new_u;
    let new_v = half_sweep(model, Side::Item, by_item, mode, damping);
    model.v = new_v;
}

fn half_sweep(model: &LatentModel, side: Side, observed: &[Vec<(usize, f64)>], mode: SolveMode, damping: Damping) -> Matrix {
    let hs = HalfSweep::new(side, model, observed);
    let (rows, k) = match side {
        Side::User => (model.n_users(), model.k()),
        Side::Item => (model.n_items(), model.k()),
    };
    let mut out = Matrix::zeros(rows, k);
    for idx in 0..rows {
        let row = match mode {
            SolveMode::FixedPoint => hs.fixed_point(idx, damping),
            SolveMode::Exact => hs.exact(idx),
        };
        out.row_mut(idx).copy_from_slice(&row);
    }
    out
}

/// Fits `U`, `V` by alternating sweeps, starting from the priors plus seeded
/// uniform noise. Stops on the relative change of `L` (or on the gradient
/// norm when `grad_tol` is set) or after `max_iters` sweeps.
pub fn train_parvecmf(
    r_train: &RatingsMatrix,
    theta_u: &Matrix,
    theta_v: &Matrix,
    hyper: &MfHyperparams,
) -> Result<(LatentModel, TrainingLog)> {
    let mut model = LatentModel::new(theta_u.clone(), theta_v.clone(), hyper.clone())?;
    model.check_against(r_train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    if hyper.init_noise > 0.0 {
        for m in [&mut model.u, &mut model.v] {
            for x in m.as_mut_slice() {
                *x += rng.gen_range(-hyper.init_noise..=hyper.init_noise);
            }
        }
    }

    let by_user = r_train.by_user();
    let by_item = r_train.by_item();
    let start = Instant::now();
    let mut log = TrainingLog::default();
    let mut prev = log_likelihood(&model, r_train)?;
    log.sweeps.push(SweepRecord {
        sweep: 0,
        log_likelihood: prev,
        grad_inf_norm: gradient_inf_norm(&model, r_train)?,
        seconds: 0.0,
    });

    for s in 1..=hyper.max_iters {
        sweep(&mut model, &by_user, &by_item);
        let ll = log_likelihood(&model, r_train)?;
        if !ll.is_finite() || !model.u.is_finite() || !model.v.is_finite() {
            return Err(Error::Divergence { sweep: s });
        }
        let grad = gradient_inf_norm(&model, r_train)?;
        log.sweeps.push(SweepRecord {
            sweep: s,
            log_likelihood: ll,
            grad_inf_norm: grad,
            seconds: start.elapsed().as_secs_f64(),
        });
        debug!("sweep {s}: L = {ll:.6e}, |grad|_inf = {grad:.3e}");
        let done = match hyper.grad_tol {
            Some(gt) => grad < gt,
            None => (ll - prev).abs() <= hyper.tol * ll.abs().max(f64::MIN_POSITIVE),
        };
        prev = ll;
        if done {
            log.converged = true;
            break;
        }
    }
    Ok((model, log))
}

/// Rank-`k` SVD of the user-mean-imputed, user-centered ratings matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdModel {
    pub u: Matrix,
    /// Non-increasing.
    pub sigma: Vec<f64>,
    pub v: Matrix,
    pub user_means: Vec<f64>,
    pub global_mean: f64,
}

impl SvdModel {
    /// `mean_i + Σ_c u_ic σ_c v_jc`.
    pub fn predict(&self, i: usize, j: usize) -> Result<f64> {
        if i >= self.u.rows() || j >= self.v.rows() {
            return Err(Error::arg(format!("({i}, {j}) outside a {}×{} model", self.u.rows(), self.v.rows())));
        }
        Ok(self.predict_unchecked(i, j))
    }

    fn predict_unchecked(&self, i: usize, j: usize) -> f64 {
        let (ui, vj) = (self.u.row(i), self.v.row(j));
        self.user_means[i] + (0..self.sigma.len()).map(|c| ui[c] * self.sigma[c] * vj[c]).sum::<f64>()
    }
}

/// Exact decomposition while the smaller side stays below this; randomized
/// subspace iteration above.
const DENSE_SVD_MAX_SIDE: usize = 256;

/// Imputes unobserved cells with the user's mean (global mean for users with
/// no ratings), centers each row on that mean and keeps the top `k` singular
/// triplets.
pub fn train_svd(r_train: &RatingsMatrix, k: usize) -> Result<SvdModel> {
    let (n, m) = (r_train.n_users(), r_train.n_items());
    if k == 0 || k > n.min(m) {
        return Err(Error::arg(format!("SVD rank {k} outside [1, {}]", n.min(m))));
    }
    let global_mean = if r_train.is_empty() {
        0.0
    } else {
        r_train.entries().iter().map(|e| e.score).sum::<f64>() / r_train.len() as f64
    };
    let mut sums = vec![0.0; n];
    let mut counts = vec![0usize; n];
    for e in r_train.entries() {
        sums[e.user] += e.score;
        counts[e.user] += 1;
    }
    let user_means: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c == 0 { global_mean } else { s / c as f64 })
        .collect();

    // after imputation and centering only observed cells are non-zero
    let centered: Vec<(usize, usize, f64)> =
        r_train.entries().iter().map(|e| (e.user, e.item, e.score - user_means[e.user])).collect();

    let (u, sigma, v) = if n.min(m) <= DENSE_SVD_MAX_SIDE {
        dense_truncated_svd(n, m, &centered, k)
    } else {
        randomized_truncated_svd(n, m, &centered, k, 0x5fd0_u64)
    };
    Ok(SvdModel { u, sigma, v, user_means, global_mean })
}

fn dense_truncated_svd(n: usize, m: usize, cells: &[(usize, usize, f64)], k: usize) -> (Matrix, Vec<f64>, Matrix) {
    // decompose whichever orientation has fewer columns
    let tall = n >= m;
    let (rows, ncols) = if tall { (n, m) } else { (m, n) };
    let mut cols = vec![vec![0.0; rows]; ncols];
    for &(i, j, x) in cells {
        if tall {
            cols[j][i] = x;
        } else {
            cols[i][j] = x;
        }
    }
    let (left, sigma, right) = jacobi_svd(cols, rows);
    let (u, v) = if tall { (left, right) } else { (right, left) };
    (columns_to_matrix(&u[..k]), sigma[..k].to_vec(), columns_to_matrix(&v[..k]))
}

/// Randomized range finder with power iterations over the sparse cells.
fn randomized_truncated_svd(
    n: usize,
    m: usize,
    cells: &[(usize, usize, f64)],
    k: usize,
    seed: u64,
) -> (Matrix, Vec<f64>, Matrix) {
    const OVERSAMPLE: usize = 10;
    const POWER_ITERS: usize = 6;
    let l = (k + OVERSAMPLE).min(n.min(m));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = DMatrix::<f64>::from_fn(m, l, |_, _| rng.gen_range(-1.0..1.0));

    let times = |x: &DMatrix<f64>| -> DMatrix<f64> {
        let mut y = DMatrix::<f64>::zeros(n, x.ncols());
        for &(i, j, a) in cells {
            for c in 0..x.ncols() {
                y[(i, c)] += a * x[(j, c)];
            }
        }
        y
    };
    let times_t = |y: &DMatrix<f64>| -> DMatrix<f64> {
        let mut x = DMatrix::<f64>::zeros(m, y.ncols());
        for &(i, j, a) in cells {
            for c in 0..y.ncols() {
                x[(j, c)] += a * y[(i, c)];
            }
        }
        x
    };

    let mut q = times(&omega).qr().q();
    for _ in 0..POWER_ITERS {
        let z = times_t(&q).qr().q();
        q = times(&z).qr().q();
    }
    // Bᵀ = Aᵀ Q is m × l; Bᵀ = P Σ Wᵀ gives A ≈ (Q W) Σ Pᵀ
    let bt = times_t(&q);
    let cols: Vec<Vec<f64>> = bt.column_iter().map(|c| c.iter().copied().collect()).collect();
    let (p, sigma, w) = jacobi_svd(cols, m);
    let left: Vec<Vec<f64>> = w[..k]
        .iter()
        .map(|wc| (0..n).map(|i| (0..l).map(|c| q[(i, c)] * wc[c]).sum()).collect())
        .collect();
    (columns_to_matrix(&left), sigma[..k].to_vec(), columns_to_matrix(&p[..k]))
}

fn columns_to_matrix(cols: &[Vec<f64>]) -> Matrix {
    let rows = cols.first().map_or(0, Vec::len);
    Matrix::from_vec(rows, cols.len(), (0..rows).flat_map(|i| cols.iter().map(move |c| c[i])).collect())
}

/// One-sided Jacobi SVD of a matrix given as `ncols` columns of length
/// `rows`, `rows >= ncols`. Returns left vectors, singular values and right
/// vectors, all ordered by descending singular value.
fn jacobi_svd(mut a: Vec<Vec<f64>>, rows: usize) -> (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>) {
    let c = a.len();
    debug_assert!(rows >= c);
    let mut v: Vec<Vec<f64>> = (0..c).map(|j| (0..c).map(|i| (i == j) as u8 as f64).collect()).collect();
    for _ in 0..60 {
        let mut rotated = false;
        for p in 0..c {
            for q in p + 1..c {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for m in [&mut a, &mut v] {
                    let (lo, hi) = m.split_at_mut(q);
                    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                        let (xp, yq) = (*x, *y);
                        *x = cs * xp - sn * yq;
                        *y = sn * xp + cs * yq;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let sigma: Vec<f64> = a.iter().map(|col| dot(col, col).sqrt()).collect();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&x, &y| sigma[y].total_cmp(&sigma[x]).then(x.cmp(&y)));
    let smax = order.first().map_or(0.0, |&j| sigma[j]);

    let mut left: Vec<Vec<f64>> = Vec::with_capacity(c);
    let mut sorted_sigma = Vec::with_capacity(c);
    let mut right = Vec::with_capacity(c);
    for &j in &order {
        let s = sigma[j];
        let col = if s > 1e-13 * smax.max(f64::MIN_POSITIVE) {
            let mut u: Vec<f64> = a[j].iter().map(|x| x / s).collect();
            orthogonalize(&mut u, &left);
            u
        } else {
            // numerically null direction: any unit vector orthogonal to the rest
            (0..rows)
                .map(|e| {
                    let mut u = vec![0.0; rows];
                    u[e] = 1.0;
                    orthogonalize(&mut u, &left);
                    u
                })
                .max_by(|x, y| dot(x, x).total_cmp(&dot(y, y)))
                .expect("rows >= 1")
        };
        let nrm = dot(&col, &col).sqrt();
        left.push(col.into_iter().map(|x| x / nrm).collect());
        sorted_sigma.push(if s > 1e-13 * smax { s } else { 0.0 });
        right.push(v[j].clone());
    }
    (left, sorted_sigma, right)
}

fn orthogonalize(u: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for b in basis {
            let proj = dot(u, b);
            axpy(-proj, b, u);
        }
    }
}

/// Anything that can score (user, item) pairs for ranking.
pub trait Scorer {
    fn n_users(&self) -> usize;
    fn n_items(&self) -> usize;
    /// Scores for every item, indexed by item.
    fn score_items(&self, user: usize) -> Vec<f64>;
}

impl Scorer for LatentModel {
    fn n_users(&self) -> usize {
        self.u.rows()
    }

    fn n_items(&self) -> usize {
        self.v.rows()
    }

    fn score_items(&self, user: usize) -> Vec<f64> {
        let ui = self.u.row(user);
        self.v.iter_rows().map(|vj| dot(ui, vj)).collect()
    }
}

impl Scorer for SvdModel {
    fn n_users(&self) -> usize {
        self.u.rows()
    }

    fn n_items(&self) -> usize {
        self.v.rows()
    }

    fn score_items(&self, user: usize) -> Vec<f64> {
        (0..self.v.rows()).map(|j| self.predict_unchecked(user, j)).collect()
    }
}

/// Ranks every item outside `exclude` by descending score, ties to the lower
/// item index, and keeps the first `n`.
pub fn recommend_top_n<S: Scorer + ?Sized>(
    model: &S,
    user: usize,
    n: usize,
    exclude: &HashSet<usize>,
) -> Result<Vec<(usize, f64)>> {
    if n == 0 {
        return Err(Error::arg("list size must be at least 1"));
    }
    if user >= model.n_users() {
        return Err(Error::arg(format!("user {user} out of range ({})", model.n_users())));
    }
    let scores = model.score_items(user);
    Ok(rank_scores(&scores, n, exclude))
}

pub(crate) fn rank_scores(scores: &[f64], n: usize, exclude: &HashSet<usize>) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = scores
        .iter()
        .copied()
        .enumerate()
        .filter(|(j, _)| !exclude.contains(j))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(n);
    ranked
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"PVMF";
const CHECKPOINT_VERSION: u32 = 1;

/// A trained factorization with its id tables and the training pairs used to
/// filter recommendations.
#[derive(Debug, Clone, PartialEq)]
pub struct MfCheckpoint {
    pub model: LatentModel,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    /// (user, item) pairs seen in training.
    pub seen: Vec<(usize, usize)>,
}

impl MfCheckpoint {
    pub fn from_training(model: LatentModel, r_train: &RatingsMatrix) -> Self {
        MfCheckpoint {
            model,
            user_ids: r_train.user_ids().to_vec(),
            item_ids: r_train.item_ids().to_vec(),
            seen: r_train.entries().iter().map(|e| (e.user, e.item)).collect(),
        }
    }

    /// Little-endian binary: header, hyperparameters, `U`, `V`, `θ_u`, `θ_v`
    /// as row-major f64 blocks, then the id tables and seen pairs.
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        let m = &self.model;
        let h = &m.hyper;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for v in [m.n_users(), m.n_items(), m.k()] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for v in [h.lambda_u, h.lambda_v, h.conf_obs, h.conf_unobs, h.tol, h.init_noise] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(h.max_iters as u64).to_le_bytes())?;
        w.write_all(&h.seed.to_le_bytes())?;
        let (damp_tag, damp_val) = match h.damping {
            Damping::Fixed(g) => (0u8, g),
            Damping::Auto => (1u8, 0.0),
        };
        w.write_all(&[damp_tag, matches!(h.mode, SolveMode::Exact) as u8])?;
        w.write_all(&damp_val.to_le_bytes())?;
        w.write_all(&h.grad_tol.unwrap_or(-1.0).to_le_bytes())?;
        for per in [&h.lambda_u_per, &h.lambda_v_per] {
            match per {
                Some(vals) => {
                    w.write_all(&[1])?;
                    write_f64s(&mut w, vals)?;
                }
                None => w.write_all(&[0])?,
            }
        }
        for mat in [&m.u, &m.v, &m.theta_u, &m.theta_v] {
            write_f64s(&mut w, mat.as_slice())?;
        }
        for id in self.user_ids.iter().chain(&self.item_ids) {
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
        }
        w.write_all(&(self.seen.len() as u64).to_le_bytes())?;
        for &(i, j) in &self.seen {
            w.write_all(&(i as u64).to_le_bytes())?;
            w.write_all(&(j as u64).to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a factorization checkpoint".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported factorization checkpoint version {version}")));
        }
        let n = read_u64(&mut r)? as usize;
        let m = read_u64(&mut r)? as usize;
        let k = read_u64(&mut r)? as usize;
        let mut f = [0.0; 6];
        for v in &mut f {
            *v = read_f64(&mut r)?;
        }
        let max_iters = read_u64(&mut r)? as usize;
        let seed = read_u64(&mut r)?;
        let mut tags = [0u8; 2];
        r.read_exact(&mut tags)?;
        let damp_val = read_f64(&mut r)?;
        let grad_tol = read_f64(&mut r)?;
        let mut per = [None, None];
        for (slot, len) in per.iter_mut().zip([n, m]) {
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            if flag[0] == 1 {
                *slot = Some(read_f64s(&mut r, len)?);
            }
        }
        let [lambda_u_per, lambda_v_per] = per;
        let hyper = MfHyperparams {
            k,
            lambda_u: f[0],
            lambda_v: f[1],
            lambda_u_per,
            lambda_v_per,
            conf_obs: f[2],
            conf_unobs: f[3],
            max_iters,
            tol: f[4],
            grad_tol: (grad_tol >= 0.0).then_some(grad_tol),
            damping: if tags[0] == 1 { Damping::Auto } else { Damping::Fixed(damp_val) },
            mode: if tags[1] == 1 { SolveMode::Exact } else { SolveMode::FixedPoint },
            init_noise: f[5],
            seed,
        };
        let u = Matrix::from_vec(n, k, read_f64s(&mut r, n * k)?);
        let v = Matrix::from_vec(m, k, read_f64s(&mut r, m * k)?);
        let theta_u = Matrix::from_vec(n, k, read_f64s(&mut r, n * k)?);
        let theta_v = Matrix::from_vec(m, k, read_f64s(&mut r, m * k)?);
        let mut ids = Vec::with_capacity(n + m);
        for _ in 0..n + m {
            let len = read_u32(&mut r)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            ids.push(String::from_utf8(buf).map_err(|_| Error::Format("id is not UTF-8".into()))?);
        }
        let item_ids = ids.split_off(n);
        let n_seen = read_u64(&mut r)? as usize;
        let mut seen = Vec::with_capacity(n_seen);
        for _ in 0..n_seen {
            let (i, j) = (read_u64(&mut r)? as usize, read_u64(&mut r)? as usize);
            if i >= n || j >= m {
                return Err(Error::Format("seen pair out of range".into()));
            }
            seen.push((i, j));
        }
        let model = LatentModel { u, v, theta_u, theta_v, hyper };
        Ok(MfCheckpoint { model, user_ids: ids, item_ids, seen })
    }
}

fn write_f64s<W: Write>(w: &mut W, vals: &[f64]) -> Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

fn read_f64s<R: Read>(r: &mut R, len: usize) -> Result<Vec<f64>> {
    (0..len).map(|_| read_f64(r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Rating;

    fn ratings(n: usize, m: usize, cells: &[(usize, usize, f64)]) -> RatingsMatrix {
        RatingsMatrix::from_parts(
            (0..n).map(|i| format!("u{i}")).collect(),
            (0..m).map(|j| format!("i{j}")).collect(),
            cells.iter().map(|&(user, item, score)| Rating { user, item, score }).collect(),
        )
        .unwrap()
    }

    fn scalar_model(u: f64, tu: f64, lu: f64, v: f64, tv: f64, lv: f64, a: f64, b: f64) -> LatentModel {
        let hyper = MfHyperparams { k: 1, lambda_u: lu, lambda_v: lv, conf_obs: a, conf_unobs: b, ..Default::default() };
        let mut model = LatentModel::new(Matrix::from_vec(1, 1, vec![tu]), Matrix::from_vec(1, 1, vec![tv]), hyper).unwrap();
        model.u.set(0, 0, u);
        model.v.set(0, 0, v);
        model
    }

    #[test]
    fn predict_examples() {
        let hyper = MfHyperparams { k: 2, ..Default::default() };
        let m = LatentModel::new(Matrix::from_rows(&[vec![1.0, 2.0]]), Matrix::from_rows(&[vec![3.0, 4.0]]), hyper.clone())
            .unwrap();
        assert_eq!(m.predict(0, 0).unwrap(), 11.0);
        let e = LatentModel::new(
            Matrix::from_rows(&[vec![1.0, 0.0]]),
            Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]),
            hyper,
        )
        .unwrap();
        assert_eq!(e.predict(0, 0).unwrap(), 0.0);
        assert_eq!(e.predict(0, 1).unwrap(), 1.0);
        assert!(matches!(e.predict(1, 0), Err(Error::Argument(_))));
        assert!(matches!(e.predict(0, 2), Err(Error::Argument(_))));
    }

    #[test]
    fn log_likelihood_hand_value() {
        let model = scalar_model(1.0, 0.0, 2.0, 1.0, 1.0, 3.0, 4.0, 0.0);
        let r = ratings(1, 1, &[(0, 0, 3.0)]);
        assert_eq!(log_likelihood(&model, &r).unwrap(), -9.0);
    }

    #[test]
    fn log_likelihood_zero_at_perfect_fit() {
        let hyper = MfHyperparams { k: 2, conf_unobs: 0.0, ..Default::default() };
        let tu = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.5, -1.0]]);
        let tv = Matrix::from_rows(&[vec![2.0, 0.0], vec![1.0, 1.0]]);
        let model = LatentModel::new(tu, tv, hyper).unwrap();
        let r = ratings(2, 2, &[(0, 0, 2.0), (0, 1, 3.0), (1, 0, 1.0)]);
        assert_eq!(log_likelihood(&model, &r).unwrap(), 0.0);
    }

    #[test]
    fn log_likelihood_scales_linearly_in_precisions() {
        let tu = Matrix::from_rows(&[vec![0.3, -0.2], vec![1.0, 0.4]]);
        let tv = Matrix::from_rows(&[vec![0.7, 0.1], vec![-0.5, 0.9], vec![0.2, 0.2]]);
        let base = MfHyperparams { k: 2, lambda_u: 0.7, lambda_v: 1.3, conf_obs: 2.0, conf_unobs: 0.25, ..Default::default() };
        let r = ratings(2, 3, &[(0, 0, 4.0), (1, 2, 2.0), (0, 1, 5.0)]);
        let mut m1 = LatentModel::new(tu.clone(), tv.clone(), base.clone()).unwrap();
        m1.u.set(0, 1, 1.5);
        m1.v.set(2, 0, -0.8);
        let l1 = log_likelihood(&m1, &r).unwrap();
        let t = 3.0;
        let scaled = MfHyperparams {
            lambda_u: base.lambda_u * t,
            lambda_v: base.lambda_v * t,
            conf_obs: base.conf_obs * t,
            conf_unobs: base.conf_unobs * t,
            ..base
        };
        let m2 = LatentModel { hyper: scaled, ..m1 };
        let l2 = log_likelihood(&m2, &r).unwrap();
        assert!((l2 - t * l1).abs() <= 1e-12 * l2.abs(), "{l2} vs {}", t * l1);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let model = scalar_model(1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0);
        let r = ratings(2, 1, &[(1, 0, 3.0)]);
        assert!(matches!(log_likelihood(&model, &r), Err(Error::Argument(_))));
    }

    #[test]
    fn update_with_no_confidence_returns_prior() {
        // a user without ratings and b = 0
        let hyper = MfHyperparams { k: 2, conf_unobs: 0.0, ..Default::default() };
        let tu = Matrix::from_rows(&[vec![0.1, 0.2], vec![0.3, 0.4]]);
        let tv = Matrix::from_rows(&[vec![1.0, 1.0]]);
        let mut model = LatentModel::new(tu, tv, hyper).unwrap();
        model.u.set(1, 0, 9.0);
        model.v.set(0, 1, 3.0);
        let r = ratings(2, 1, &[(0, 0, 5.0)]);
        assert_eq!(map_update_user(&model, &r, 1).unwrap(), vec![0.3, 0.4]);
        assert_eq!(exact_solve_user(&model, &r, 1).unwrap(), vec![0.3, 0.4]);

        let r_empty = ratings(2, 1, &[]);
        assert_eq!(map_update_item(&model, &r_empty, 0).unwrap(), vec![1.0, 1.0]);
        assert_eq!(exact_solve_item(&model, &r_empty, 0).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn scalar_fixed_point_converges_to_one() {
        // u = (r − u·v)·v/λ + θ with θ = 0, λ = 1, v = 1, a = 1, r = 2
        let r = ratings(1, 1, &[(0, 0, 2.0)]);
        let mut model = scalar_model(0.3, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0);
        // undamped, the map u ↦ 2 − u oscillates around 1; half-damping lands on it
        model.hyper.damping = Damping::Fixed(0.5);
        for _ in 0..60 {
            let next = map_update_user(&model, &r, 0).unwrap();
            model.u.set(0, 0, next[0]);
        }
        assert!((model.u.get(0, 0) - 1.0).abs() < 1e-12);
        model.hyper.damping = Damping::Fixed(1.0);
        model.u.set(0, 0, 1.0);
        assert_eq!(map_update_user(&model, &r, 0).unwrap(), vec![1.0], "1 is a fixed point of the verbatim rule");
        assert!((exact_solve_user(&model, &r, 0).unwrap()[0] - 1.0).abs() < 1e-15);

        let mut mirror = scalar_model(1.0, 0.0, 1.0, 0.3, 0.0, 1.0, 1.0, 0.0);
        mirror.hyper.damping = Damping::Auto;
        for _ in 0..200 {
            let next = map_update_item(&mirror, &r, 0).unwrap();
            mirror.v.set(0, 0, next[0]);
        }
        assert!((mirror.v.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((exact_solve_item(&mirror, &r, 0).unwrap()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn large_precision_pins_row_to_prior() {
        let r = ratings(1, 2, &[(0, 0, 4.0), (0, 1, 1.0)]);
        let hyper = MfHyperparams { k: 2, lambda_u: 1e6, lambda_v: 1e6, ..Default::default() };
        let mut model = LatentModel::new(
            Matrix::from_rows(&[vec![0.2, -0.1]]),
            Matrix::from_rows(&[vec![0.5, 0.5], vec![1.0, -1.0]]),
            hyper,
        )
        .unwrap();
        model.u.set(0, 0, 0.7);
        let by_user = r.by_user();
        let hs = HalfSweep::new(Side::User, &model, &by_user);
        let pull = data_pull(model.u.row(0), &by_user[0], &model.v, &hs.gram, 1.0, 0.01);
        let next = map_update_user(&model, &r, 0).unwrap();
        for c in 0..2 {
            let off = (next[c] - model.theta_u.get(0, c)).abs();
            assert!(off <= 1e-6 * pull[c].abs() * (1.0 + 1e-9), "{off} vs {}", pull[c]);
        }

        let mut heavy = model.clone();
        heavy.theta_v = Matrix::zeros(2, 2);
        heavy.hyper.lambda_v = 1e12;
        let vj = exact_solve_item(&heavy, &r, 0).unwrap();
        assert!(vj.iter().all(|x| x.abs() < 1e-10), "{vj:?}");
    }

    #[test]
    fn empty_training_set_snaps_to_priors() {
        let hyper = MfHyperparams { k: 3, conf_unobs: 0.0, max_iters: 5, ..Default::default() };
        let tu = Matrix::from_rows(&[vec![0.1, 0.2, 0.3], vec![-0.4, 0.0, 0.5]]);
        let tv = Matrix::from_rows(&[vec![1.0, -1.0, 0.0]]);
        let r = ratings(2, 1, &[]);
        let (model, log) = train_parvecmf(&r, &tu, &tv, &hyper).unwrap();
        assert_eq!(model.u, tu);
        assert_eq!(model.v, tv);
        assert!(log.converged);
        assert_ne!(log.sweeps[0].log_likelihood, 0.0, "initial noise is visible before the first sweep");
    }

    #[test]
    fn divergence_is_reported() {
        // undamped rule on a heavily weighted row: the iteration multiplier is far above 1
        let hyper = MfHyperparams { k: 1, lambda_u: 0.01, lambda_v: 0.01, conf_obs: 10.0, max_iters: 5000, ..Default::default() };
        let r = ratings(2, 2, &[(0, 0, 5.0), (0, 1, 5.0), (1, 0, 5.0), (1, 1, 1.0)]);
        let theta = Matrix::from_vec(2, 1, vec![1.0, 1.0]);
        match train_parvecmf(&r, &theta, &theta, &hyper) {
            Err(Error::Divergence { sweep }) => assert!(sweep >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn exact_mode_never_decreases_objective() {
        let hyper = MfHyperparams { k: 2, mode: SolveMode::Exact, max_iters: 50, tol: 1e-14, ..Default::default() };
        let r = ratings(3, 3, &[(0, 0, 5.0), (0, 2, 1.0), (1, 1, 4.0), (2, 0, 2.0), (2, 2, 5.0)]);
        let tu = Matrix::from_rows(&[vec![0.1, 0.3], vec![-0.2, 0.4], vec![0.5, 0.5]]);
        let tv = Matrix::from_rows(&[vec![0.2, 0.1], vec![0.0, -0.3], vec![0.6, 0.2]]);
        let (_, log) = train_parvecmf(&r, &tu, &tv, &hyper).unwrap();
        for w in log.sweeps.windows(2) {
            assert!(w[1].log_likelihood >= w[0].log_likelihood - 1e-12 * w[0].log_likelihood.abs());
        }
    }

    #[test]
    fn svd_recovers_low_rank_matrices() {
        let r = ratings(2, 2, &[(0, 0, 2.0), (0, 1, 4.0), (1, 0, 1.0), (1, 1, 2.0)]);
        let s = train_svd(&r, 1).unwrap();
        for e in r.entries() {
            assert!((s.predict(e.user, e.item).unwrap() - e.score).abs() < 1e-9);
        }

        let full = ratings(3, 2, &[(0, 0, 5.0), (0, 1, 1.0), (1, 0, 2.0), (1, 1, 4.0), (2, 0, 3.0), (2, 1, 3.5)]);
        let s = train_svd(&full, 2).unwrap();
        for e in full.entries() {
            assert!((s.predict(e.user, e.item).unwrap() - e.score).abs() < 1e-8);
        }
        assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
        assert!(matches!(train_svd(&full, 3), Err(Error::Argument(_))));
        assert!(matches!(train_svd(&full, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn svd_single_rating_predicts_user_mean() {
        let r = ratings(2, 3, &[(0, 1, 4.0), (1, 0, 2.0), (1, 2, 5.0)]);
        let s = train_svd(&r, 1).unwrap();
        for j in [0, 2] {
            assert!((s.predict(0, j).unwrap() - 4.0).abs() < 1e-12);
        }
        let cold = ratings(2, 2, &[(0, 1, 4.0)]);
        let s = train_svd(&cold, 1).unwrap();
        assert!((s.predict(1, 0).unwrap() - 4.0).abs() < 1e-12, "empty user falls back to the global mean");
    }

    #[test]
    fn randomized_svd_matches_dense_on_low_rank_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, m, rank) = (60, 40, 4);
        let a: Vec<Vec<f64>> = (0..n).map(|_| (0..rank).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let b: Vec<Vec<f64>> = (0..m).map(|_| (0..rank).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let cells: Vec<(usize, usize, f64)> =
            (0..n).flat_map(|i| (0..m).map(move |j| (i, j))).map(|(i, j)| (i, j, dot(&a[i], &b[j]))).collect();
        let (_, s_dense, _) = dense_truncated_svd(n, m, &cells, rank);
        let (u, s_rand, v) = randomized_truncated_svd(n, m, &cells, rank, 3);
        for (x, y) in s_dense.iter().zip(&s_rand) {
            assert!((x - y).abs() < 1e-8 * x.max(1.0), "{x} vs {y}");
        }
        for &(i, j, x) in &cells {
            let rec: f64 = (0..rank).map(|c| u.get(i, c) * s_rand[c] * v.get(j, c)).sum();
            assert!((rec - x).abs() < 1e-8);
        }
    }

    #[test]
    fn jacobi_svd_is_accurate_on_rank_deficient_shapes() {
        for seed in 0..40u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(2..60);
            let m = rng.gen_range(2..60);
            let rank = rng.gen_range(1..=n.min(m));
            let a: Vec<Vec<f64>> = (0..n).map(|_| (0..rank).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let b: Vec<Vec<f64>> = (0..m).map(|_| (0..rank).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let cells: Vec<(usize, usize, f64)> =
                (0..n).flat_map(|i| (0..m).map(move |j| (i, j))).map(|(i, j)| (i, j, dot(&a[i], &b[j]))).collect();
            let k = n.min(m);
            let (u, s, v) = dense_truncated_svd(n, m, &cells, k);
            assert!(s.windows(2).all(|w| w[0] >= w[1]));
            for (mat, dim) in [(&u, n), (&v, m)] {
                let g = mat.gram();
                for p in 0..k {
                    for q in 0..k {
                        let want = if p == q { 1.0 } else { 0.0 };
                        assert!((g.get(p, q) - want).abs() < 1e-8, "seed {seed}: {dim}x{k} not orthonormal");
                    }
                }
            }
            for &(i, j, x) in &cells {
                let rec: f64 = (0..k).map(|c| u.get(i, c) * s[c] * v.get(j, c)).sum();
                assert!((rec - x).abs() < 1e-9, "seed {seed} ({n}x{m}, rank {rank})");
            }
        }
    }

    #[test]
    fn top_n_ordering_and_exclusions() {
        let scores = [0.5, 0.9, 0.9];
        assert_eq!(rank_scores(&scores, 2, &HashSet::new()), vec![(1, 0.9), (2, 0.9)]);
        let all: HashSet<usize> = [0, 1, 2].into_iter().collect();
        assert!(rank_scores(&scores, 2, &all).is_empty());
        assert_eq!(rank_scores(&scores, 10, &HashSet::new()).len(), 3);

        let model = LatentModel::new(
            Matrix::from_rows(&[vec![1.0]]),
            Matrix::from_rows(&[vec![0.5], vec![0.9], vec![0.9]]),
            MfHyperparams { k: 1, ..Default::default() },
        )
        .unwrap();
        let excl: HashSet<usize> = [1].into_iter().collect();
        let list = recommend_top_n(&model, 0, 5, &excl).unwrap();
        assert_eq!(list.iter().map(|p| p.0).collect::<Vec<_>>(), [2, 0]);
        assert!(recommend_top_n(&model, 0, 0, &excl).is_err());
        assert!(recommend_top_n(&model, 1, 3, &excl).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let r = ratings(2, 3, &[(0, 1, 4.0), (1, 0, 2.0)]);
        let hyper = MfHyperparams {
            k: 2,
            lambda_u_per: Some(vec![0.5, 2.0]),
            damping: Damping::Auto,
            grad_tol: Some(1e-9),
            ..Default::default()
        };
        let tu = Matrix::from_rows(&[vec![0.1, 0.2], vec![0.3, 0.4]]);
        let tv = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]]);
        let (model, _) = train_parvecmf(&r, &tu, &tv, &hyper).unwrap();
        let ckpt = MfCheckpoint::from_training(model, &r);
        let mut buf = Vec::new();
        ckpt.save(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"PVMF");
        assert_eq!(MfCheckpoint::load(&buf[..]).unwrap(), ckpt);
        assert!(MfCheckpoint::load(&b"NOPE...."[..]).is_err());
    }

    #[test]
    fn training_log_tsv_header() {
        let log = TrainingLog {
            sweeps: vec![SweepRecord { sweep: 0, log_likelihood: -1.5, grad_inf_norm: 0.25, seconds: 0.0 }],
            converged: false,
        };
        let mut buf = Vec::new();
        log.write_tsv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("sweep\tlog_likelihood\tgrad_inf_norm\tseconds"));
        assert_eq!(text.lines().nth(1), Some("0\t-1.5\t0.25\t0.000000"));
    }
}
