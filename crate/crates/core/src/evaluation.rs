//! Ranked-list metrics and k-fold cross-validation of the factorization
//! against the SVD baseline.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::time::Instant;

use log::info;

use crate::dataset::{split_folds, FoldPlan, RatingsMatrix, Review, MIN_SCORE};
use crate::error::{Error, Result};
use crate::factorization::{recommend_top_n, train_parvecmf, train_svd, MfHyperparams, Scorer};
use crate::pvdm::{build_entity_docs, entity_priors, train_corpus, EntityKind, PvConfig, TaggedDocument};

/// Average precision of one ranked list over its first `l` positions,
/// normalized by the full size of the relevant set (so AP < 1 whenever
/// `|relevant| > l`).
pub fn average_precision(list: &[usize], relevant: &HashSet<usize>, l: usize) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::Evaluation("average precision of an empty relevant set".into()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, item) in list.iter().take(l).enumerate() {
        if relevant.contains(item) {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    Ok(sum / relevant.len() as f64)
}

/// `1 / rank` of the first relevant item within the first `l` positions, 0 if
/// none appears.
pub fn reciprocal_rank(list: &[usize], relevant: &HashSet<usize>, l: usize) -> f64 {
    list.iter()
        .take(l)
        .position(|item| relevant.contains(item))
        .map_or(0.0, |pos| 1.0 / (pos + 1) as f64)
}

fn check_users(lists: &[Vec<usize>], relevants: &[HashSet<usize>]) -> Result<()> {
    if lists.len() != relevants.len() {
        return Err(Error::arg(format!("{} lists but {} relevant sets", lists.len(), relevants.len())));
    }
    if lists.is_empty() {
        return Err(Error::Evaluation("no evaluable users".into()));
    }
    Ok(())
}

/// Mean average precision over users; every relevant set must be non-empty.
pub fn map_at_n(lists: &[Vec<usize>], relevants: &[HashSet<usize>], n: usize) -> Result<f64> {
    check_users(lists, relevants)?;
    let mut total = 0.0;
    for (list, rel) in lists.iter().zip(relevants) {
        total += average_precision(list, rel, n)?;
    }
    Ok(total / lists.len() as f64)
}

/// Mean reciprocal rank over users.
pub fn mrr_at_n(lists: &[Vec<usize>], relevants: &[HashSet<usize>], n: usize) -> Result<f64> {
    check_users(lists, relevants)?;
    if let Some(u) = relevants.iter().position(HashSet::is_empty) {
        return Err(Error::Evaluation(format!("user #{u} has no relevant items")));
    }
    let total: f64 = lists.iter().zip(relevants).map(|(list, rel)| reciprocal_rank(list, rel, n)).sum();
    Ok(total / lists.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub n_folds: usize,
    pub list_size: usize,
    pub relevance_threshold: f64,
    pub seed: u64,
    /// Latent dimensions to evaluate; each sets both the embedding width and `k`.
    pub feature_sweep: Vec<usize>,
    /// Folds evaluated concurrently. Results do not depend on it.
    pub fold_threads: usize,
    /// Keep every ranked list in the report.
    pub record_lists: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_folds: 5,
            list_size: 5,
            relevance_threshold: 4.0,
            seed: 1,
            feature_sweep: vec![5, 10, 20, 50],
            fold_threads: 1,
            record_lists: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_folds < 2 {
            return Err(Error::arg(format!("need at least 2 folds, got {}", self.n_folds)));
        }
        if self.list_size == 0 {
            return Err(Error::arg("list size must be at least 1"));
        }
        // a threshold above the scale is allowed and leaves nobody to evaluate
        if !(self.relevance_threshold.is_finite() && self.relevance_threshold >= MIN_SCORE) {
            return Err(Error::arg(format!("relevance threshold {} below {MIN_SCORE}", self.relevance_threshold)));
        }
        if self.feature_sweep.is_empty() || self.feature_sweep.contains(&0) {
            return Err(Error::arg("feature sweep must list positive dimensions"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    ParVecMf,
    Svd,
}

impl ModelKind {
    pub const ALL: [ModelKind; 2] = [ModelKind::ParVecMf, ModelKind::Svd];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::ParVecMf => "parvecmf",
            ModelKind::Svd => "svd",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Metrics of one model at one dimension on one fold; `None` when the fold
/// had no evaluable users.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldScore {
    pub model: ModelKind,
    pub features: usize,
    pub fold: usize,
    pub metrics: Option<(f64, f64)>,
}

/// Who was scored in one fold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FoldUsers {
    /// Users with a relevant test item and at least one training rating.
    pub evaluated: usize,
    /// Users with a relevant test item but no training ratings.
    pub skipped_cold: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub model: ModelKind,
    pub features: usize,
    pub fold: usize,
    pub user: usize,
    pub items: Vec<usize>,
    pub relevant: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub mf: MfHyperparams,
    pub pv: PvConfig,
    /// Ordered by feature count, then model, then fold.
    pub scores: Vec<FoldScore>,
    pub fold_users: Vec<FoldUsers>,
    pub fold_seconds: Vec<f64>,
    pub lists: Vec<RankedList>,
}

impl EvalReport {
    /// Mean (MAP, MRR) across the folds that had evaluable users.
    pub fn mean(&self, model: ModelKind, features: usize) -> Option<(f64, f64)> {
        let vals: Vec<(f64, f64)> = self
            .scores
            .iter()
            .filter(|s| s.model == model && s.features == features)
            .filter_map(|s| s.metrics)
            .collect();
        if vals.is_empty() {
            return None;
        }
        let n = vals.len() as f64;
        Some((vals.iter().map(|v| v.0).sum::<f64>() / n, vals.iter().map(|v| v.1).sum::<f64>() / n))
    }

    /// TSV `model \t features \t fold \t map_at_n \t mrr_at_n`; folds without
    /// evaluable users carry `NA`. Contains nothing run-dependent, so equal
    /// inputs give identical bytes.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "model\tfeatures\tfold\tmap_at_n\tmrr_at_n")?;
        for s in &self.scores {
            match s.metrics {
                Some((map, mrr)) => writeln!(w, "{}\t{}\t{}\t{map}\t{mrr}", s.model, s.features, s.fold)?,
                None => writeln!(w, "{}\t{}\t{}\tNA\tNA", s.model, s.features, s.fold)?,
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Fold means as TSV `model \t features \t map_at_n \t mrr_at_n`.
    pub fn write_means_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "model\tfeatures\tmap_at_n\tmrr_at_n")?;
        for &f in &self.config.feature_sweep {
            for m in ModelKind::ALL {
                match self.mean(m, f) {
                    Some((map, mrr)) => writeln!(w, "{m}\t{f}\t{map}\t{mrr}")?,
                    None => writeln!(w, "{m}\t{f}\tNA\tNA")?,
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// `key = value` summary including hyperparameters and timings.
    pub fn write_summary<W: Write>(&self, mut w: W) -> Result<()> {
        let c = &self.config;
        writeln!(w, "eval.folds = {}", c.n_folds)?;
        writeln!(w, "eval.list_size = {}", c.list_size)?;
        writeln!(w, "eval.relevance_threshold = {}", c.relevance_threshold)?;
        writeln!(w, "eval.seed = {}", c.seed)?;
        let sweep: Vec<String> = c.feature_sweep.iter().map(usize::to_string).collect();
        writeln!(w, "eval.features = {}", sweep.join(","))?;
        let mf = &self.mf;
        writeln!(w, "mf.lambda_u = {}", mf.lambda_u)?;
        writeln!(w, "mf.lambda_v = {}", mf.lambda_v)?;
        writeln!(w, "mf.conf_obs = {}", mf.conf_obs)?;
        writeln!(w, "mf.conf_unobs = {}", mf.conf_unobs)?;
        writeln!(w, "mf.max_iters = {}", mf.max_iters)?;
        writeln!(w, "mf.tol = {}", mf.tol)?;
        writeln!(w, "mf.mode = {:?}", mf.mode)?;
        writeln!(w, "mf.damping = {:?}", mf.damping)?;
        let pv = &self.pv;
        writeln!(w, "pv.window = {}", pv.window)?;
        writeln!(w, "pv.epochs = {}", pv.epochs)?;
        writeln!(w, "pv.initial_lr = {}", pv.initial_lr)?;
        writeln!(w, "pv.final_lr = {}", pv.final_lr)?;
        writeln!(w, "pv.seed = {}", pv.seed)?;
        for (f, u) in self.fold_users.iter().enumerate() {
            writeln!(w, "fold.{f}.evaluated_users = {}", u.evaluated)?;
            writeln!(w, "fold.{f}.skipped_cold_users = {}", u.skipped_cold)?;
        }
        for &f in &c.feature_sweep {
            for m in ModelKind::ALL {
                match self.mean(m, f) {
                    Some((map, mrr)) => {
                        writeln!(w, "mean.{m}.{f}.map_at_n = {map}")?;
                        writeln!(w, "mean.{m}.{f}.mrr_at_n = {mrr}")?;
                    }
                    None => writeln!(w, "mean.{m}.{f} = NA")?,
                }
            }
        }
        for (f, s) in self.fold_seconds.iter().enumerate() {
            writeln!(w, "fold.{f}.seconds = {s:.3}")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// What one fold trains on and is tested against.
#[derive(Debug, Clone)]
pub struct FoldInputs {
    pub fold: usize,
    pub train: RatingsMatrix,
    pub test: RatingsMatrix,
    /// User documents followed by item documents, from training pairs only.
    pub docs: Vec<TaggedDocument>,
}

pub fn fold_inputs(matrix: &RatingsMatrix, reviews: &[Review], plan: &FoldPlan, fold: usize) -> FoldInputs {
    let train = plan.train_matrix(matrix, fold);
    let test = plan.test_matrix(matrix, fold);
    let allowed: HashSet<(usize, usize)> = train.entries().iter().map(|e| (e.user, e.item)).collect();
    let mut docs = build_entity_docs(reviews, EntityKind::User, matrix, &allowed);
    docs.extend(build_entity_docs(reviews, EntityKind::Item, matrix, &allowed));
    FoldInputs { fold, train, test, docs }
}

/// Structural leakage check: no (user, item) pair of the test set may appear
/// among the training ratings or among the reviews behind any document.
pub fn check_fold_isolation(inputs: &FoldInputs) -> Result<()> {
    let test: HashSet<(usize, usize)> = inputs.test.entries().iter().map(|e| (e.user, e.item)).collect();
    if let Some(e) = inputs.train.entries().iter().find(|e| test.contains(&(e.user, e.item))) {
        return Err(Error::Evaluation(format!(
            "fold {}: pair ({}, {}) is in both train and test ratings",
            inputs.fold, e.user, e.item
        )));
    }
    for doc in &inputs.docs {
        if let Some(pair) = doc.sources.iter().find(|p| test.contains(p)) {
            return Err(Error::Evaluation(format!(
                "fold {}: document {} uses the review of test pair {pair:?}",
                inputs.fold, doc.tag
            )));
        }
    }
    Ok(())
}

struct FoldOutcome {
    users: FoldUsers,
    scores: Vec<FoldScore>,
    lists: Vec<RankedList>,
    seconds: f64,
}

/// `cross_validate` with every fold of `plan` and each swept dimension:
/// train embeddings on the fold's training reviews, fit both models on its
/// training ratings, and score top-N lists for every test user holding a
/// relevant test item.
pub fn cross_validate(
    matrix: &RatingsMatrix,
    reviews: &[Review],
    config: &EvalConfig,
    mf: &MfHyperparams,
    pv: &PvConfig,
) -> Result<EvalReport> {
    config.validate()?;
    let plan = split_folds(matrix, config.n_folds, config.seed)?;
    cross_validate_with_plan(matrix, reviews, &plan, config, mf, pv)
}

pub fn cross_validate_with_plan(
    matrix: &RatingsMatrix,
    reviews: &[Review],
    plan: &FoldPlan,
    config: &EvalConfig,
    mf: &MfHyperparams,
    pv: &PvConfig,
) -> Result<EvalReport> {
    config.validate()?;
    if plan.k != config.n_folds || plan.assignment.len() != matrix.len() {
        return Err(Error::arg("fold plan does not match the configuration or the ratings"));
    }
    let min_side = matrix.n_users().min(matrix.n_items());
    if let Some(&f) = config.feature_sweep.iter().find(|&&f| f > min_side) {
        return Err(Error::arg(format!("{f} features exceed the smaller matrix side ({min_side})")));
    }

    let run_fold = |fold: usize| -> Result<FoldOutcome> { evaluate_fold(matrix, reviews, plan, fold, config, mf, pv) };
    let threads = config.fold_threads.clamp(1, config.n_folds);
    let outcomes: Vec<Result<FoldOutcome>> = if threads == 1 {
        (0..config.n_folds).map(run_fold).collect()
    } else {
        let mut slots: Vec<Option<Result<FoldOutcome>>> = (0..config.n_folds).map(|_| None).collect();
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let run_fold = &run_fold;
                    s.spawn(move || {
                        (t..config.n_folds).step_by(threads).map(|f| (f, run_fold(f))).collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (f, out) in h.join().expect("fold worker panicked") {
                    slots[f] = Some(out);
                }
            }
        });
        slots.into_iter().map(|o| o.expect("every fold ran")).collect()
    };

    let mut per_fold = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        per_fold.push(o?);
    }
    if per_fold.iter().all(|o| o.users.evaluated == 0) {
        return Err(Error::Evaluation("no fold has evaluable users".into()));
    }

    let mut scores: Vec<FoldScore> = per_fold.iter().flat_map(|o| o.scores.iter().cloned()).collect();
    scores.sort_by_key(|s| (config.feature_sweep.iter().position(|&f| f == s.features), s.model, s.fold));
    let lists = per_fold.iter().flat_map(|o| o.lists.iter().cloned()).collect();
    Ok(EvalReport {
        config: config.clone(),
        mf: mf.clone(),
        pv: pv.clone(),
        scores,
        fold_users: per_fold.iter().map(|o| o.users).collect(),
        fold_seconds: per_fold.iter().map(|o| o.seconds).collect(),
        lists,
    })
}

fn evaluate_fold(
    matrix: &RatingsMatrix,
    reviews: &[Review],
    plan: &FoldPlan,
    fold: usize,
    config: &EvalConfig,
    mf: &MfHyperparams,
    pv: &PvConfig,
) -> Result<FoldOutcome> {
    let start = Instant::now();
    let inputs = fold_inputs(matrix, reviews, plan, fold);
    check_fold_isolation(&inputs)?;

    let train_items: Vec<HashSet<usize>> =
        inputs.train.by_user().into_iter().map(|obs| obs.into_iter().map(|(j, _)| j).collect()).collect();
    let mut relevant: Vec<Vec<usize>> = vec![Vec::new(); matrix.n_users()];
    for e in inputs.test.entries() {
        if e.score >= config.relevance_threshold {
            relevant[e.user].push(e.item);
        }
    }
    let mut users = FoldUsers::default();
    let mut targets = Vec::new();
    for (u, rel) in relevant.iter_mut().enumerate() {
        if rel.is_empty() {
            continue;
        }
        if train_items[u].is_empty() {
            users.skipped_cold += 1;
        } else {
            rel.sort_unstable();
            users.evaluated += 1;
            targets.push(u);
        }
    }
    info!("fold {fold}: {} evaluable users, {} cold users skipped", users.evaluated, users.skipped_cold);

    let mut scores = Vec::new();
    let mut lists = Vec::new();
    for &features in &config.feature_sweep {
        if targets.is_empty() {
            scores.extend(ModelKind::ALL.map(|model| FoldScore { model, features, fold, metrics: None }));
            continue;
        }
        let pv_cfg = PvConfig { dim: features, ..pv.clone() };
        let mf_cfg = MfHyperparams { k: features, ..mf.clone() };
        let embeddings = if inputs.docs.is_empty() { None } else { Some(train_corpus(&inputs.docs, &pv_cfg)?) };
        let (theta_u, theta_v) = entity_priors(embeddings.as_ref(), matrix, features);
        let (latent, _) = train_parvecmf(&inputs.train, &theta_u, &theta_v, &mf_cfg)?;
        let svd = train_svd(&inputs.train, features)?;
        let models: [(ModelKind, &dyn Scorer); 2] = [(ModelKind::ParVecMf, &latent), (ModelKind::Svd, &svd)];
        for (model, scorer) in models {
            let mut ranked = Vec::with_capacity(targets.len());
            let mut rel_sets = Vec::with_capacity(targets.len());
            for &u in &targets {
                let top = recommend_top_n(scorer, u, config.list_size, &train_items[u])?;
                ranked.push(top.into_iter().map(|(j, _)| j).collect::<Vec<_>>());
                rel_sets.push(relevant[u].iter().copied().collect::<HashSet<_>>());
            }
            let map = map_at_n(&ranked, &rel_sets, config.list_size)?;
            let mrr = mrr_at_n(&ranked, &rel_sets, config.list_size)?;
            scores.push(FoldScore { model, features, fold, metrics: Some((map, mrr)) });
            if config.record_lists {
                for (&user, items) in targets.iter().zip(ranked) {
                    lists.push(RankedList { model, features, fold, user, items, relevant: relevant[user].clone() });
                }
            }
        }
    }
    Ok(FoldOutcome { users, scores, lists, seconds: start.elapsed().as_secs_f64() })
}
