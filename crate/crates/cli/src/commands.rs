//! Subcommand implementations. Every file they produce is written atomically.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::{info, warn};
use parvecmf::dataset::{
    build_matrix, parse_reviews, split_folds, stats, write_reviews, DatasetStats, FoldPlan, MalformedPolicy,
    RatingsMatrix, Review,
};
use parvecmf::evaluation::{cross_validate_with_plan, EvalReport};
use parvecmf::factorization::{clip_score, recommend_top_n, train_parvecmf, MfCheckpoint, TrainingLog};
use parvecmf::pvdm::{build_entity_docs, entity_priors, train_corpus, EmbeddingModel, EntityKind};
use parvecmf::synth::generate;
use parvecmf::textproc::tokenize;
use parvecmf::Error;

use crate::config::{DatasetSource, RunConfig};
use crate::workdir::{write_atomic, Workdir};

pub const FOLDS_FILE: &str = "folds.tsv";
pub const STATS_FILE: &str = "stats.txt";
pub const SYNTHETIC_REVIEWS_FILE: &str = "synthetic_reviews.txt";
pub const PV_CHECKPOINT: &str = "pv.ckpt";
pub const WORD_VECTORS: &str = "words.vec";
pub const DOC_VECTORS: &str = "docs.vec";
pub const MF_CHECKPOINT: &str = "mf.ckpt";
pub const MF_LOG: &str = "mf_train_log.tsv";
pub const REPORT_TSV: &str = "report.tsv";
pub const REPORT_SUMMARY: &str = "report_summary.txt";
pub const PLOT_TSV: &str = "plot.tsv";

/// Process exit status for an error: 1 usage or configuration, 2 data,
/// 3 training divergence.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Argument(_) => 1,
        Error::Divergence { .. } => 3,
        _ => 2,
    }
}

pub fn read_snap(path: &Path, policy: MalformedPolicy) -> Result<Vec<Review>, Error> {
    let file = File::open(path).map_err(|e| Error::Format(format!("cannot open {}: {e}", path.display())))?;
    let outcome = parse_reviews(BufReader::new(file), policy)?;
    if outcome.helpfulness_anomalies > 0 {
        info!("{} reviews have more helpful votes than votes", outcome.helpfulness_anomalies);
    }
    Ok(outcome.reviews)
}

pub fn load_reviews(cfg: &RunConfig) -> Result<Vec<Review>, Error> {
    match &cfg.dataset {
        DatasetSource::Snap(path) => read_snap(path, cfg.malformed),
        DatasetSource::Synthetic(s) => Ok(generate(s)?.reviews),
    }
}

/// Corpus dimensions of a SNAP file, printed and written as `key = value`.
pub fn cmd_stats(dataset: &Path, out: &Path, policy: MalformedPolicy) -> Result<DatasetStats, Error> {
    let reviews = read_snap(dataset, policy)?;
    let s = stats(&reviews, tokenize);
    write_atomic(out, |w| s.write_kv(w))?;
    Ok(s)
}

pub struct Prepared {
    pub reviews: Vec<Review>,
    pub matrix: RatingsMatrix,
    pub plan: FoldPlan,
}

/// Loads the dataset, builds the ratings matrix and writes the fold plan.
pub fn cmd_prepare(cfg: &RunConfig, wd: &Workdir) -> Result<Prepared, Error> {
    let reviews = load_reviews(cfg)?;
    if let DatasetSource::Synthetic(_) = cfg.dataset {
        write_atomic(&wd.path(SYNTHETIC_REVIEWS_FILE), |w| write_reviews(&reviews, w))?;
    }
    let s = stats(&reviews, tokenize);
    write_atomic(&wd.path(STATS_FILE), |w| s.write_kv(w))?;
    let matrix = build_matrix(&reviews, cfg.dedup)?;
    let plan = split_folds(&matrix, cfg.eval.n_folds, cfg.eval.seed)?;
    write_atomic(&wd.path(FOLDS_FILE), |w| plan.write_tsv(&matrix, w))?;
    info!(
        "{} reviews, {} users, {} items, {} ratings in {} folds",
        reviews.len(),
        matrix.n_users(),
        matrix.n_items(),
        matrix.len(),
        plan.k
    );
    Ok(Prepared { reviews, matrix, plan })
}

/// Reuses the fold plan on disk when there is one, otherwise prepares.
fn prepared(cfg: &RunConfig, wd: &Workdir) -> Result<Prepared, Error> {
    let folds = wd.path(FOLDS_FILE);
    if !folds.is_file() {
        return cmd_prepare(cfg, wd);
    }
    let reviews = load_reviews(cfg)?;
    let matrix = build_matrix(&reviews, cfg.dedup)?;
    let plan = FoldPlan::read_tsv(&matrix, BufReader::new(File::open(&folds)?), cfg.eval.seed)?;
    if plan.k != cfg.eval.n_folds {
        return Err(Error::Config(format!(
            "{} holds {} folds but eval.folds = {}; rerun prepare",
            folds.display(),
            plan.k,
            cfg.eval.n_folds
        )));
    }
    Ok(Prepared { reviews, matrix, plan })
}

fn training_matrix(p: &Prepared, fold: Option<usize>) -> Result<RatingsMatrix, Error> {
    match fold {
        None => Ok(p.matrix.clone()),
        Some(f) if f < p.plan.k => Ok(p.plan.train_matrix(&p.matrix, f)),
        Some(f) => Err(Error::Argument(format!("fold {f} out of range ({} folds)", p.plan.k))),
    }
}

/// Trains one joint embedding model on all reviews, or on the training part
/// of `fold`, and exports the word and document tables.
pub fn cmd_train_pv(cfg: &RunConfig, wd: &Workdir, fold: Option<usize>) -> Result<EmbeddingModel, Error> {
    let p = prepared(cfg, wd)?;
    let train = training_matrix(&p, fold)?;
    let allowed: HashSet<(usize, usize)> = train.entries().iter().map(|e| (e.user, e.item)).collect();
    let mut docs = build_entity_docs(&p.reviews, EntityKind::User, &p.matrix, &allowed);
    docs.extend(build_entity_docs(&p.reviews, EntityKind::Item, &p.matrix, &allowed));
    if docs.is_empty() {
        return Err(Error::Training("no review text to train on".into()));
    }
    let model = train_corpus(&docs, &cfg.pv)?;
    write_atomic(&wd.path(PV_CHECKPOINT), |w| model.save(w))?;
    write_atomic(&wd.path(WORD_VECTORS), |w| model.write_word_vectors(w))?;
    write_atomic(&wd.path(DOC_VECTORS), |w| model.write_doc_vectors(w))?;
    info!("trained {} word and {} document vectors of width {}", model.words.rows(), model.docs.rows(), model.dim());
    Ok(model)
}

/// Fits the factorization with priors from the saved embedding model.
pub fn cmd_train_mf(cfg: &RunConfig, wd: &Workdir, fold: Option<usize>) -> Result<(MfCheckpoint, TrainingLog), Error> {
    let ckpt = wd.path(PV_CHECKPOINT);
    let file = File::open(&ckpt)
        .map_err(|e| Error::Format(format!("cannot open {} (run train-pv first): {e}", ckpt.display())))?;
    let embeddings = EmbeddingModel::load(BufReader::new(file))?;
    if embeddings.dim() != cfg.mf.k {
        return Err(Error::Config(format!(
            "embedding width {} differs from mf.k = {}",
            embeddings.dim(),
            cfg.mf.k
        )));
    }
    let p = prepared(cfg, wd)?;
    let train = training_matrix(&p, fold)?;
    let (theta_u, theta_v) = entity_priors(Some(&embeddings), &p.matrix, cfg.mf.k);
    let (model, log) = train_parvecmf(&train, &theta_u, &theta_v, &cfg.mf)?;
    write_atomic(&wd.path(MF_LOG), |w| log.write_tsv(w))?;
    if !log.converged {
        warn!("factorization stopped after {} sweeps without meeting the tolerance", cfg.mf.max_iters);
    }
    let checkpoint = MfCheckpoint::from_training(model, &train);
    write_atomic(&wd.path(MF_CHECKPOINT), |w| checkpoint.save(w))?;
    Ok((checkpoint, log))
}

fn write_report(wd: &Workdir, report: &EvalReport) -> Result<(), Error> {
    write_atomic(&wd.path(REPORT_TSV), |w| report.write_tsv(w))?;
    write_atomic(&wd.path(PLOT_TSV), |w| report.write_means_tsv(w))?;
    write_atomic(&wd.path(REPORT_SUMMARY), |w| report.write_summary(w))
}

/// Cross-validates both models over the prepared folds.
pub fn cmd_evaluate(cfg: &RunConfig, wd: &Workdir) -> Result<EvalReport, Error> {
    let p = prepared(cfg, wd)?;
    let report = cross_validate_with_plan(&p.matrix, &p.reviews, &p.plan, &cfg.eval, &cfg.mf, &cfg.pv)?;
    write_report(wd, &report)?;
    Ok(report)
}

/// Name of the pipeline stage an error most likely came from.
fn failed_stage(err: &Error) -> &'static str {
    match err {
        Error::Training(_) | Error::Inference(_) => "train-pv",
        Error::Divergence { .. } => "train-mf",
        _ => "evaluate",
    }
}

/// Prepare and cross-validate end to end. On failure a `FAILED` marker
/// names the stage and earlier outputs are kept.
pub fn cmd_run(cfg: &RunConfig, wd: &Workdir) -> Result<EvalReport, Error> {
    wd.clear_failed()?;
    let p = match cmd_prepare(cfg, wd) {
        Ok(p) => p,
        Err(e) => {
            wd.mark_failed("prepare", &e)?;
            return Err(e);
        }
    };
    let outcome = cross_validate_with_plan(&p.matrix, &p.reviews, &p.plan, &cfg.eval, &cfg.mf, &cfg.pv)
        .and_then(|report| write_report(wd, &report).map(|_| report));
    if let Err(e) = &outcome {
        wd.mark_failed(failed_stage(e), e)?;
    }
    outcome
}

/// Top-`n` unseen items for `user`, as `(item id, score)`.
pub fn cmd_recommend(checkpoint: &Path, user: &str, n: usize, clip: bool) -> Result<Vec<(String, f64)>, Error> {
    if n == 0 {
        return Err(Error::Argument("N must be at least 1".into()));
    }
    let file = File::open(checkpoint)
        .map_err(|e| Error::Format(format!("cannot open checkpoint {}: {e}", checkpoint.display())))?;
    let ckpt = MfCheckpoint::load(BufReader::new(file))?;
    let u = ckpt
        .user_ids
        .iter()
        .position(|id| id == user)
        .ok_or_else(|| Error::Lookup { kind: "user", key: user.to_owned() })?;
    let seen: HashSet<usize> = ckpt.seen.iter().filter(|&&(i, _)| i == u).map(|&(_, j)| j).collect();
    let list = recommend_top_n(&ckpt.model, u, n, &seen)?;
    Ok(list
        .into_iter()
        .map(|(j, s)| (ckpt.item_ids[j].clone(), if clip { clip_score(s) } else { s }))
        .collect())
}

/// Averages a per-fold report into one row per (model, features), in order
/// of first appearance, skipping `NA` folds.
pub fn cmd_export_plot(report: &Path, out: &Path) -> Result<usize, Error> {
    let file = File::open(report).map_err(|e| Error::Format(format!("cannot open {}: {e}", report.display())))?;
    let mut groups: Vec<((String, String), Vec<(f64, f64)>)> = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if n == 0 || line.is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("{} line {}: `{line}`", report.display(), n + 1));
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(bad());
        }
        let key = (cols[0].to_owned(), cols[1].to_owned());
        let idx = match groups.iter().position(|(k, _)| *k == key) {
            Some(i) => i,
            None => {
                groups.push((key, Vec::new()));
                groups.len() - 1
            }
        };
        if cols[3] != "NA" {
            let map: f64 = cols[3].parse().map_err(|_| bad())?;
            let mrr: f64 = cols[4].parse().map_err(|_| bad())?;
            groups[idx].1.push((map, mrr));
        }
    }
    write_atomic(out, |w| {
        writeln!(w, "model\tfeatures\tmap_at_n\tmrr_at_n")?;
        for ((model, features), vals) in &groups {
            if vals.is_empty() {
                writeln!(w, "{model}\t{features}\tNA\tNA")?;
            } else {
                let n = vals.len() as f64;
                let map = vals.iter().map(|v| v.0).sum::<f64>() / n;
                let mrr = vals.iter().map(|v| v.1).sum::<f64>() / n;
                writeln!(w, "{model}\t{features}\t{map}\t{mrr}")?;
            }
        }
        Ok(())
    })?;
    Ok(groups.len())
}
