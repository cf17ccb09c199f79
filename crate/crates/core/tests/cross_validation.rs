use std::collections::{HashMap, HashSet};

use parvecmf::dataset::{build_matrix, split_folds, DedupPolicy, Review};
use parvecmf::evaluation::{cross_validate, EvalConfig, EvalReport, ModelKind};
use parvecmf::factorization::{recommend_top_n, MfHyperparams, SolveMode, SvdModel};
use parvecmf::matrix::Matrix;
use parvecmf::pvdm::PvConfig;
use parvecmf::synth::{generate, SynthConfig};
use parvecmf::Error;
use proptest::prelude::*;

fn review(user: &str, item: &str, score: f64, text: &str) -> Review {
    Review {
        product_id: item.into(),
        user_id: user.into(),
        profile_name: String::new(),
        helpfulness: (0, 0),
        score,
        time: 0,
        summary: String::new(),
        text: text.into(),
    }
}

/// 4 users × 4 items, 12 of 16 cells rated.
fn tiny() -> Vec<Review> {
    let rows: [(&str, [Option<f64>; 4]); 4] = [
        ("ua", [Some(5.0), Some(4.0), None, Some(1.0)]),
        ("ub", [Some(4.0), None, Some(2.0), Some(5.0)]),
        ("uc", [None, Some(5.0), Some(4.0), Some(2.0)]),
        ("ud", [Some(1.0), Some(4.0), Some(5.0), None]),
    ];
    let items = ["pa", "pb", "pc", "pd"];
    let mut out = Vec::new();
    for (user, cells) in rows {
        for (item, cell) in items.iter().zip(cells) {
            if let Some(s) = cell {
                let mood = if s >= 4.0 { "tasty fresh crunchy" } else { "stale bland soggy" };
                out.push(review(user, item, s, &format!("the {item} snack was {mood} for {user}")));
            }
        }
    }
    out
}

fn tiny_config() -> (EvalConfig, MfHyperparams, PvConfig) {
    let eval = EvalConfig { n_folds: 2, list_size: 2, feature_sweep: vec![1, 2], record_lists: true, ..Default::default() };
    let mf = MfHyperparams { conf_unobs: 0.1, mode: SolveMode::Exact, max_iters: 50, ..Default::default() };
    let pv = PvConfig { window: 2, epochs: 5, ..Default::default() };
    (eval, mf, pv)
}

/// Straight from the definitions, sharing nothing with the library.
fn oracle_ap(list: &[usize], relevant: &[usize]) -> f64 {
    let mut total = 0.0;
    for i in 1..=list.len() {
        if relevant.contains(&list[i - 1]) {
            let hits = list[..i].iter().filter(|x| relevant.contains(x)).count();
            total += hits as f64 / i as f64;
        }
    }
    total / relevant.len() as f64
}

fn oracle_rr(list: &[usize], relevant: &[usize]) -> f64 {
    for (i, x) in list.iter().enumerate() {
        if relevant.contains(x) {
            return 1.0 / (i + 1) as f64;
        }
    }
    0.0
}

#[test]
fn tiny_report_matches_brute_force_metrics() {
    let reviews = tiny();
    let m = build_matrix(&reviews, DedupPolicy::KeepLatest).unwrap();
    let (eval, mf, pv) = tiny_config();
    let report = cross_validate(&m, &reviews, &eval, &mf, &pv).unwrap();
    let plan = split_folds(&m, eval.n_folds, eval.seed).unwrap();

    let mut checked = 0;
    for score in &report.scores {
        let train = plan.train_matrix(&m, score.fold);
        let test = plan.test_matrix(&m, score.fold);
        let train_items: HashMap<usize, HashSet<usize>> = train.entries().iter().fold(HashMap::new(), |mut acc, e| {
            acc.entry(e.user).or_default().insert(e.item);
            acc
        });
        let mut expected_users: Vec<usize> = test
            .entries()
            .iter()
            .filter(|e| e.score >= 4.0 && train_items.contains_key(&e.user))
            .map(|e| e.user)
            .collect();
        expected_users.sort_unstable();
        expected_users.dedup();

        let lists: Vec<_> = report
            .lists
            .iter()
            .filter(|l| l.model == score.model && l.features == score.features && l.fold == score.fold)
            .collect();
        assert_eq!(lists.iter().map(|l| l.user).collect::<Vec<_>>(), expected_users);
        let Some((map, mrr)) = score.metrics else {
            assert!(expected_users.is_empty());
            continue;
        };
        let (mut ap_sum, mut rr_sum) = (0.0, 0.0);
        for l in &lists {
            let mut relevant: Vec<usize> =
                test.entries().iter().filter(|e| e.user == l.user && e.score >= 4.0).map(|e| e.item).collect();
            relevant.sort_unstable();
            assert_eq!(l.relevant, relevant);
            assert!(l.items.iter().all(|j| !train_items[&l.user].contains(j)), "training item recommended");
            assert_eq!(l.items.len(), eval.list_size.min(m.n_items() - train_items[&l.user].len()));
            ap_sum += oracle_ap(&l.items, &relevant);
            rr_sum += oracle_rr(&l.items, &relevant);
        }
        assert!((map - ap_sum / lists.len() as f64).abs() < 1e-12);
        assert!((mrr - rr_sum / lists.len() as f64).abs() < 1e-12);
        checked += 1;
    }
    assert!(checked > 0, "no fold produced metrics");
}

fn without_timings(mut r: EvalReport) -> EvalReport {
    r.fold_seconds.clear();
    r
}

#[test]
fn same_seed_gives_the_same_report() {
    let reviews = tiny();
    let m = build_matrix(&reviews, DedupPolicy::KeepLatest).unwrap();
    let (eval, mf, pv) = tiny_config();
    let a = without_timings(cross_validate(&m, &reviews, &eval, &mf, &pv).unwrap());
    let b = without_timings(cross_validate(&m, &reviews, &eval, &mf, &pv).unwrap());
    assert_eq!(a, b);
    let parallel = EvalConfig { fold_threads: 2, ..eval };
    let c = without_timings(cross_validate(&m, &reviews, &parallel, &mf, &pv).unwrap());
    assert_eq!(a.scores, c.scores);
    assert_eq!(a.lists, c.lists);
}

#[test]
fn threshold_above_the_scale_leaves_nobody_to_evaluate() {
    let reviews = tiny();
    let m = build_matrix(&reviews, DedupPolicy::KeepLatest).unwrap();
    let (eval, mf, pv) = tiny_config();
    let eval = EvalConfig { relevance_threshold: 5.5, ..eval };
    assert!(matches!(cross_validate(&m, &reviews, &eval, &mf, &pv), Err(Error::Evaluation(_))));
    let eval = EvalConfig { relevance_threshold: 0.5, ..eval };
    assert!(matches!(cross_validate(&m, &reviews, &eval, &mf, &pv), Err(Error::Argument(_))));
}

#[test]
fn user_accounting_and_metric_ranges_on_synthetic_data() {
    let cfg = SynthConfig { n_users: 40, n_items: 30, ratings_per_user: 8, ..Default::default() };
    let reviews = generate(&cfg).unwrap().reviews;
    let m = build_matrix(&reviews, DedupPolicy::KeepLatest).unwrap();
    let eval = EvalConfig { feature_sweep: vec![3], ..Default::default() };
    let mf = MfHyperparams { mode: SolveMode::Exact, max_iters: 20, ..Default::default() };
    let pv = PvConfig { epochs: 3, ..Default::default() };
    let report = cross_validate(&m, &reviews, &eval, &mf, &pv).unwrap();
    let plan = split_folds(&m, eval.n_folds, eval.seed).unwrap();
    for (fold, users) in report.fold_users.iter().enumerate() {
        let with_relevant: HashSet<usize> =
            plan.test_matrix(&m, fold).entries().iter().filter(|e| e.score >= 4.0).map(|e| e.user).collect();
        assert_eq!(users.evaluated + users.skipped_cold, with_relevant.len());
    }
    for s in &report.scores {
        let (map, mrr) = s.metrics.unwrap();
        assert!((0.0..=1.0).contains(&map) && (0.0..=1.0).contains(&mrr));
    }
    for model in ModelKind::ALL {
        assert!(report.mean(model, 3).is_some());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Factors on a 1/8 grid keep every score exact, so shifting one user's
    /// baseline by an integer moves all of that user's scores by exactly it.
    #[test]
    fn shifting_one_users_scores_keeps_the_list(
        cells in prop::collection::vec(-8i32..=8, 5 * 2 + 6 * 2),
        shift in -20i32..=20,
        user in 0usize..5,
        n in 1usize..7,
    ) {
        let grid = |c: &[i32]| c.iter().map(|&x| x as f64 / 8.0).collect::<Vec<_>>();
        let model = SvdModel {
            u: Matrix::from_vec(5, 2, grid(&cells[..10])),
            sigma: vec![2.0, 1.0],
            v: Matrix::from_vec(6, 2, grid(&cells[10..])),
            user_means: vec![3.0; 5],
            global_mean: 3.0,
        };
        let mut shifted = model.clone();
        shifted.user_means[user] += shift as f64;
        let exclude: HashSet<usize> = [0, 3].into_iter().collect();
        let a: Vec<usize> = recommend_top_n(&model, user, n, &exclude).unwrap().into_iter().map(|p| p.0).collect();
        let b: Vec<usize> = recommend_top_n(&shifted, user, n, &exclude).unwrap().into_iter().map(|p| p.0).collect();
        let relevant = [1usize, 4];
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(oracle_ap(&a, &relevant), oracle_ap(&b, &relevant));
        prop_assert_eq!(oracle_rr(&a, &relevant), oracle_rr(&b, &relevant));
    }
}
