//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Overrides given on the
//! command line replace file values. Component seeds (`eval.seed`,
//! `pv.seed`, `mf.seed`, `synth.seed`) default to the global `seed`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use parvecmf::dataset::{DedupPolicy, MalformedPolicy};
use parvecmf::evaluation::EvalConfig;
use parvecmf::factorization::{Damping, MfHyperparams, SolveMode};
use parvecmf::pvdm::PvConfig;
use parvecmf::synth::SynthConfig;
use parvecmf::Error;

pub const WORKDIR_ENV: &str = "PARVECMF_WORKDIR";

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    /// SNAP-format review dump.
    Snap(PathBuf),
    Synthetic(SynthConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub workdir: PathBuf,
    pub seed: u64,
    pub verbosity: String,
    pub dedup: DedupPolicy,
    pub malformed: MalformedPolicy,
    pub eval: EvalConfig,
    pub mf: MfHyperparams,
    pub pv: PvConfig,
}

const KEYS: &[&str] = &[
    "dataset.source",
    "dataset.path",
    "dataset.dedup",
    "dataset.malformed",
    "workdir",
    "seed",
    "verbosity",
    "threads",
    "eval.folds",
    "eval.list_size",
    "eval.relevance_threshold",
    "eval.features",
    "eval.seed",
    "eval.fold_threads",
    "mf.k",
    "mf.lambda_u",
    "mf.lambda_v",
    "mf.conf_obs",
    "mf.conf_unobs",
    "mf.max_iters",
    "mf.tol",
    "mf.grad_tol",
    "mf.damping",
    "mf.mode",
    "mf.init_noise",
    "mf.seed",
    "pv.dim",
    "pv.window",
    "pv.epochs",
    "pv.initial_lr",
    "pv.final_lr",
    "pv.threads",
    "pv.seed",
    "synth.users",
    "synth.items",
    "synth.topics",
    "synth.ratings_per_user",
    "synth.words_per_review",
    "synth.words_per_topic",
    "synth.background_words",
    "synth.p_own_topic",
    "synth.p_item_word",
    "synth.p_user_word",
    "synth.seed",
];

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Parses `key = value` lines into a map, rejecting unknown keys.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, Error> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_err(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
        insert_checked(&mut map, k.trim(), v.trim())?;
    }
    Ok(map)
}

fn insert_checked(map: &mut BTreeMap<String, String>, key: &str, value: &str) -> Result<(), Error> {
    if !KEYS.contains(&key) {
        return Err(config_err(format!("unknown key `{key}`")));
    }
    map.insert(key.to_owned(), value.to_owned());
    Ok(())
}

/// Applies `key=value` overrides on top of `map`.
pub fn apply_overrides(map: &mut BTreeMap<String, String>, overrides: &[String]) -> Result<(), Error> {
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| config_err(format!("override `{o}` is not key=value")))?;
        insert_checked(map, k.trim(), v.trim())?;
    }
    Ok(())
}

struct Reader<'a> {
    map: &'a BTreeMap<String, String>,
}

impl Reader<'_> {
    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T, Error> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| config_err(format!("`{key}`: cannot parse `{v}`"))),
        }
    }

    fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, Error> {
        self.map
            .get(key)
            .map(|v| v.parse().map_err(|_| config_err(format!("`{key}`: cannot parse `{v}`"))))
            .transpose()
    }
}

impl RunConfig {
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self, Error> {
        let r = Reader { map };
        let seed: u64 = r.get("seed", 1)?;
        let threads: usize = r.get("threads", 1)?;

        let sd = SynthConfig::default();
        let dataset = match r.get("dataset.source", "snap".to_string())?.as_str() {
            "snap" => {
                let path: PathBuf = r
                    .opt::<String>("dataset.path")?
                    .ok_or_else(|| config_err("`dataset.path` is required for a snap dataset"))?
                    .into();
                DatasetSource::Snap(path)
            }
            "synthetic" => DatasetSource::Synthetic(SynthConfig {
                n_users: r.get("synth.users", sd.n_users)?,
                n_items: r.get("synth.items", sd.n_items)?,
                n_topics: r.get("synth.topics", sd.n_topics)?,
                ratings_per_user: r.get("synth.ratings_per_user", sd.ratings_per_user)?,
                words_per_review: r.get("synth.words_per_review", sd.words_per_review)?,
                words_per_topic: r.get("synth.words_per_topic", sd.words_per_topic)?,
                background_words: r.get("synth.background_words", sd.background_words)?,
                p_own_topic: r.get("synth.p_own_topic", sd.p_own_topic)?,
                p_item_word: r.get("synth.p_item_word", sd.p_item_word)?,
                p_user_word: r.get("synth.p_user_word", sd.p_user_word)?,
                seed: r.get("synth.seed", seed)?,
            }),
            other => return Err(config_err(format!("`dataset.source` must be snap or synthetic, got `{other}`"))),
        };
        let dedup = match r.get("dataset.dedup", "keep_latest".to_string())?.as_str() {
            "keep_latest" => DedupPolicy::KeepLatest,
            "keep_first" => DedupPolicy::KeepFirst,
            "mean_score" => DedupPolicy::MeanScore,
            other => return Err(config_err(format!("unknown dedup policy `{other}`"))),
        };
        let malformed = match r.get("dataset.malformed", "skip".to_string())?.as_str() {
            "skip" => MalformedPolicy::SkipAndCount,
            "fail" => MalformedPolicy::FailFast,
            other => return Err(config_err(format!("`dataset.malformed` must be skip or fail, got `{other}`"))),
        };

        let ed = EvalConfig::default();
        let feature_sweep = match map.get("eval.features") {
            None => ed.feature_sweep.clone(),
            Some(list) => list
                .split(',')
                .map(|x| x.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| config_err(format!("`eval.features`: cannot parse `{list}`")))?,
        };
        let eval = EvalConfig {
            n_folds: r.get("eval.folds", ed.n_folds)?,
            list_size: r.get("eval.list_size", ed.list_size)?,
            relevance_threshold: r.get("eval.relevance_threshold", ed.relevance_threshold)?,
            seed: r.get("eval.seed", seed)?,
            feature_sweep,
            fold_threads: r.get("eval.fold_threads", threads)?,
            record_lists: false,
        };

        // k and p describe the same width; either key sets both
        let pd = PvConfig::default();
        let (k, p) = match (r.opt::<usize>("mf.k")?, r.opt::<usize>("pv.dim")?) {
            (Some(k), Some(p)) if k != p => {
                return Err(config_err(format!("mf.k = {k} differs from pv.dim = {p}; they must be equal")))
            }
            (Some(k), _) | (None, Some(k)) => (k, k),
            (None, None) => (pd.dim, pd.dim),
        };
        let pv = PvConfig {
            dim: p,
            window: r.get("pv.window", pd.window)?,
            epochs: r.get("pv.epochs", pd.epochs)?,
            initial_lr: r.get("pv.initial_lr", pd.initial_lr)?,
            final_lr: r.get("pv.final_lr", pd.final_lr)?,
            seed: r.get("pv.seed", seed)?,
            threads: r.get("pv.threads", threads)?,
        };

        let md = MfHyperparams::default();
        let damping = match map.get("mf.damping").map(String::as_str) {
            None => md.damping,
            Some("auto") => Damping::Auto,
            Some(v) => Damping::Fixed(v.parse().map_err(|_| config_err(format!("`mf.damping`: cannot parse `{v}`")))?),
        };
        let mode = match map.get("mf.mode").map(String::as_str) {
            None => md.mode,
            Some("fixed_point") => SolveMode::FixedPoint,
            Some("exact") => SolveMode::Exact,
            Some(v) => return Err(config_err(format!("`mf.mode` must be fixed_point or exact, got `{v}`"))),
        };
        let mf = MfHyperparams {
            k,
            lambda_u: r.get("mf.lambda_u", md.lambda_u)?,
            lambda_v: r.get("mf.lambda_v", md.lambda_v)?,
            lambda_u_per: None,
            lambda_v_per: None,
            conf_obs: r.get("mf.conf_obs", md.conf_obs)?,
            conf_unobs: r.get("mf.conf_unobs", md.conf_unobs)?,
            max_iters: r.get("mf.max_iters", md.max_iters)?,
            tol: r.get("mf.tol", md.tol)?,
            grad_tol: r.opt("mf.grad_tol")?,
            damping,
            mode,
            init_noise: r.get("mf.init_noise", md.init_noise)?,
            seed: r.get("mf.seed", seed)?,
        };

        let config = RunConfig {
            dataset,
            workdir: r.get("workdir", "parvecmf-work".to_string())?.into(),
            seed,
            verbosity: r.get("verbosity", "info".to_string())?,
            dedup,
            malformed,
            eval,
            mf,
            pv,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), Error> {
        let wrap = |e: Error| config_err(e.to_string());
        self.eval.validate().map_err(wrap)?;
        self.mf.validate().map_err(wrap)?;
        self.pv.validate().map_err(wrap)?;
        if self.mf.k != self.pv.dim {
            return Err(config_err("mf.k and pv.dim must be equal"));
        }
        match &self.dataset {
            DatasetSource::Snap(path) if !path.is_file() => {
                Err(config_err(format!("dataset file {} does not exist", path.display())))
            }
            DatasetSource::Synthetic(s) => s.validate().map_err(wrap),
            _ => Ok(()),
        }
    }

    /// Reads `path`, applies overrides, and resolves the workdir: an explicit
    /// flag wins over the environment, which wins over the file.
    pub fn load(path: &Path, overrides: &[String], workdir_flag: Option<&Path>) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        let mut map = parse_kv(&text)?;
        apply_overrides(&mut map, overrides)?;
        let mut cfg = RunConfig::from_map(&map)?;
        if let Some(w) = workdir_flag {
            cfg.workdir = w.to_path_buf();
        } else if let Some(w) = std::env::var_os(WORKDIR_ENV) {
            cfg.workdir = w.into();
        }
        Ok(cfg)
    }

    /// Forces every single-threaded, reproducible mode.
    pub fn make_deterministic(&mut self) {
        self.pv.threads = 1;
        self.eval.fold_threads = 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth_map(extra: &str) -> BTreeMap<String, String> {
        parse_kv(&format!("dataset.source = synthetic\n{extra}")).unwrap()
    }

    #[test]
    fn defaults_and_seed_propagation() {
        let cfg = RunConfig::from_map(&synth_map("seed = 9  # global")).unwrap();
        assert_eq!((cfg.eval.seed, cfg.pv.seed, cfg.mf.seed), (9, 9, 9));
        assert_eq!(cfg.mf.k, cfg.pv.dim);
        let DatasetSource::Synthetic(s) = &cfg.dataset else { panic!() };
        assert_eq!(s.seed, 9);
        let cfg = RunConfig::from_map(&synth_map("seed = 9\npv.seed = 3")).unwrap();
        assert_eq!((cfg.pv.seed, cfg.mf.seed), (3, 9));
    }

    #[test]
    fn width_keys() {
        let cfg = RunConfig::from_map(&synth_map("mf.k = 7")).unwrap();
        assert_eq!((cfg.mf.k, cfg.pv.dim), (7, 7));
        assert!(matches!(RunConfig::from_map(&synth_map("mf.k = 7\npv.dim = 8")), Err(Error::Config(_))));
        assert!(RunConfig::from_map(&synth_map("mf.k = 8\npv.dim = 8")).is_ok());
    }

    #[test]
    fn overrides_win() {
        let mut map = synth_map("eval.folds = 3");
        apply_overrides(&mut map, &["eval.folds=4".into(), "mf.damping = auto".into()]).unwrap();
        let cfg = RunConfig::from_map(&map).unwrap();
        assert_eq!(cfg.eval.n_folds, 4);
        assert_eq!(cfg.mf.damping, Damping::Auto);
    }

    #[test]
    fn rejections() {
        assert!(parse_kv("colour = blue").is_err());
        assert!(parse_kv("no equals sign").is_err());
        assert!(RunConfig::from_map(&synth_map("eval.folds = x")).is_err());
        assert!(RunConfig::from_map(&synth_map("eval.folds = 1")).is_err());
        assert!(RunConfig::from_map(&parse_kv("dataset.source = snap").unwrap()).is_err());
        assert!(RunConfig::from_map(&parse_kv("dataset.path = /no/such/file").unwrap()).is_err());
        let mut map = synth_map("");
        assert!(apply_overrides(&mut map, &["bogus".into()]).is_err());
    }

    #[test]
    fn feature_list() {
        let cfg = RunConfig::from_map(&synth_map("eval.features = 5, 10,20")).unwrap();
        assert_eq!(cfg.eval.feature_sweep, vec![5, 10, 20]);
    }
}
