//! Leave-one-out ranking evaluation: HR@k and NDCG@k via a full ranking over
//! the item vocabulary, with seen items excluded.

use std::collections::HashSet;

use crate::data::SplitDataset;
use crate::error::{Error, Result};
use crate::losses;
use crate::model::Model;
use crate::params::ParameterVector;

/// Cutoffs reported by default.
pub const DEFAULT_KS: [usize; 2] = [5, 10];

/// Feed the train prefix and score the validation item, or feed the prefix
/// plus the validation item and score the test item.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Validation,
    Test,
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EvalMode::Validation => write!(f, "valid"),
            EvalMode::Test => write!(f, "test"),
        }
    }
}

/// Mean metrics over the evaluated users.
#[derive(Clone, Debug)]
pub struct MetricReport {
    pub ks: Vec<usize>,
    pub hr: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub users: usize,
    pub mean_loss: f64,
}

impl MetricReport {
    pub fn hr_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&kk| kk == k).map(|i| self.hr[i])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&kk| kk == k).map(|i| self.ndcg[i])
    }
}

/// 1-based rank of `target` among all non-excluded items. Ties are broken
/// toward the smaller item id, so a tied item outranks the target only when
/// its id is smaller.
pub fn target_rank(scores: &[f64], target: u32, exclude: &HashSet<u32>) -> Result<usize> {
    if target == 0 || target as usize > scores.len() {
        return Err(Error::Contract(format!(
            "target_rank: target {target} outside 1..={}",
            scores.len()
        )));
    }
    if exclude.contains(&target) {
        return Err(Error::Contract(format!(
            "target_rank: target {target} is excluded"
        )));
    }
    let ts = scores[target as usize - 1];
    let mut ahead = 0usize;
    for (idx, &s) in scores.iter().enumerate() {
        let item = idx as u32 + 1;
        if item == target || exclude.contains(&item) {
            continue;
        }
        if s > ts || (s == ts && item < target) {
            ahead += 1;
        }
    }
    Ok(ahead + 1)
}

/// Single-target HR@k and NDCG@k for a 1-based rank.
pub fn rank_metrics(rank: usize, ks: &[usize]) -> Vec<(f64, f64)> {
    ks.iter()
        .map(|&k| {
            if rank <= k {
                (1.0, 1.0 / ((rank as f64) + 1.0).log2())
            } else {
                (0.0, 0.0)
            }
        })
        .collect()
}

/// Evaluate a scoring function over users: one ranked held-out item each,
/// averaged. The scorer sees the fed sequence and returns one score per item.
pub fn evaluate_with<F>(
    scorer: F,
    split: &SplitDataset,
    users: &[u32],
    mode: EvalMode,
    num_items: u32,
    ks: &[usize],
) -> Result<MetricReport>
where
    F: Fn(&[u32]) -> Result<Vec<f64>> + Sync,
{
    if users.is_empty() {
        return Err(Error::Contract("evaluate: empty user set".into()));
    }
    let mut hr_sum = vec![0.0; ks.len()];
    let mut ndcg_sum = vec![0.0; ks.len()];
    let mut loss_sum = 0.0;
    for &user in users {
        let prefix = split.train(user);
        let mut fed: Vec<u32> = prefix.to_vec();
        let target = match mode {
            EvalMode::Validation => split.valid(user),
            EvalMode::Test => {
                fed.push(split.valid(user));
                split.test(user)
            }
        };
        let scores = scorer(&fed)?;
        if scores.len() != num_items as usize {
            return Err(Error::Dimension(format!(
                "evaluate: scorer returned {} scores for {} items",
                scores.len(),
                num_items
            )));
        }
        // Exclude everything already fed, but never the target itself:
        // revisited items stay rankable.
        let mut exclude: HashSet<u32> = fed.iter().cloned().collect();
        exclude.remove(&target);
        let rank = target_rank(&scores, target, &exclude)?;
        for (i, (hr, ndcg)) in rank_metrics(rank, ks).into_iter().enumerate() {
            hr_sum[i] += hr;
            ndcg_sum[i] += ndcg;
        }
        loss_sum += losses::rec_loss(&scores, target)?;
    }
    let n = users.len() as f64;
    Ok(MetricReport {
        ks: ks.to_vec(),
        hr: hr_sum.into_iter().map(|v| v / n).collect(),
        ndcg: ndcg_sum.into_iter().map(|v| v / n).collect(),
        users: users.len(),
        mean_loss: loss_sum / n,
    })
}

/// Evaluate a model's personalized or global parameters over a user set.
pub fn evaluate(
    model: &Model,
    params: &ParameterVector,
    split: &SplitDataset,
    users: &[u32],
    mode: EvalMode,
) -> Result<MetricReport> {
    evaluate_with(
        |seq| model.scores_vec(params, seq),
        split,
        users,
        mode,
        model.config().vocab_size,
        &DEFAULT_KS,
    )
}

/// Global train-set popularity per item, usable as a non-personalized
/// baseline scorer.
pub fn popularity_scores(split: &SplitDataset, num_items: u32) -> Vec<f64> {
    let mut counts = vec![0.0; num_items as usize];
    for user in 1..=split.num_users() {
        for &item in split.train(user) {
            counts[item as usize - 1] += 1.0;
        }
    }
    counts
}

/// Evaluate the popularity baseline over a user set.
pub fn evaluate_popularity(
    split: &SplitDataset,
    users: &[u32],
    mode: EvalMode,
    num_items: u32,
) -> Result<MetricReport> {
    let scores = popularity_scores(split, num_items);
    evaluate_with(
        |_seq| Ok(scores.clone()),
        split,
        users,
        mode,
        num_items,
        &DEFAULT_KS,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dataset, leave_one_out_split, RawEvent};
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn no_exclusions() -> HashSet<u32> {
        HashSet::new()
    }

    /// Sort oracle: order items by (score desc, id asc), find the target.
    fn rank_by_sort(scores: &[f64], target: u32, exclude: &HashSet<u32>) -> usize {
        let mut items: Vec<u32> = (1..=scores.len() as u32)
            .filter(|v| !exclude.contains(v))
            .collect();
        items.sort_by(|&a, &b| {
            scores[b as usize - 1]
                .partial_cmp(&scores[a as usize - 1])
                .unwrap()
                .then(a.cmp(&b))
        });
        items.iter().position(|&v| v == target).unwrap() + 1
    }

    #[test]
    fn highest_score_ranks_first() {
        let scores = [0.3, 9.0, 0.1];
        assert_eq!(target_rank(&scores, 2, &no_exclusions()).unwrap(), 1);
    }

    #[test]
    fn excluding_better_items_promotes_target() {
        let scores = [5.0, 4.0, 3.0, 2.0];
        let exclude: HashSet<u32> = [1, 2].into_iter().collect();
        assert_eq!(target_rank(&scores, 3, &exclude).unwrap(), 1);
    }

    #[test]
    fn excluded_target_is_a_contract_error() {
        let exclude: HashSet<u32> = [1].into_iter().collect();
        assert!(matches!(
            target_rank(&[1.0, 2.0], 1, &exclude).unwrap_err(),
            Error::Contract(_)
        ));
    }

    #[test]
    fn rank_matches_sort_oracle_with_ties() {
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for _ in 0..500 {
            let n = rng.random_range(2..=20usize);
            // Coarse quantization forces plenty of score ties.
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.random_range(0..5) as f64) * 0.25)
                .collect();
            let mut exclude = HashSet::new();
            for v in 1..=n as u32 {
                if rng.random::<f64>() < 0.2 {
                    exclude.insert(v);
                }
            }
            let candidates: Vec<u32> = (1..=n as u32).filter(|v| !exclude.contains(v)).collect();
            if candidates.is_empty() {
                continue;
            }
            let target = candidates[rng.random_range(0..candidates.len())];
            assert_eq!(
                target_rank(&scores, target, &exclude).unwrap(),
                rank_by_sort(&scores, target, &exclude)
            );
        }
    }

    #[test]
    fn rank_metric_values() {
        let m = rank_metrics(1, &[5, 10]);
        assert_eq!(m[0], (1.0, 1.0));
        let m = rank_metrics(3, &[5]);
        assert_eq!(m[0].0, 1.0);
        assert!((m[0].1 - 0.5).abs() < 1e-15, "1/log2(4) = 0.5");
        let m = rank_metrics(11, &[10]);
        assert_eq!(m[0], (0.0, 0.0));
    }

    #[test]
    fn metrics_monotone_in_k_and_ndcg_below_hr() {
        for rank in 1..=30 {
            let m = rank_metrics(rank, &[1, 2, 5, 10, 20]);
            for pair in m.windows(2) {
                assert!(pair[0].0 <= pair[1].0);
                assert!(pair[0].1 <= pair[1].1);
            }
            for (hr, ndcg) in m {
                assert!((0.0..=1.0).contains(&ndcg));
                assert!(ndcg <= hr);
            }
        }
    }

    proptest! {
        /// Shifting or positively scaling all scores never changes a rank.
        #[test]
        fn rank_is_invariant_to_affine_score_maps(
            seed in 0u64..500,
            shift in -10.0f64..10.0,
            scale in 0.01f64..100.0,
        ) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let n = rng.random_range(3..=15usize);
            let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let target = rng.random_range(1..=n as u32);
            let mapped: Vec<f64> = scores.iter().map(|&v| v * scale + shift).collect();
            let none = no_exclusions();
            prop_assert_eq!(
                target_rank(&scores, target, &none).unwrap(),
                target_rank(&mapped, target, &none).unwrap()
            );
        }
    }

    fn toy_split(num_users: u32, num_items: u32, seed: u64) -> crate::data::SplitDataset {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut events = Vec::new();
        let mut order = 0usize;
        for u in 1..=num_users {
            for t in 0..5 {
                events.push(RawEvent {
                    user: format!("u{u}"),
                    item: format!("i{}", rng.random_range(1..=num_items)),
                    ts: t,
                    order,
                });
                order += 1;
            }
        }
        let ds = build_dataset(events, 1, 50).unwrap();
        leave_one_out_split(&ds).unwrap()
    }

    #[test]
    fn oracle_scorer_gets_perfect_metrics() {
        let split = toy_split(10, 8, 4);
        let users: Vec<u32> = (1..=10).collect();
        for mode in [EvalMode::Validation, EvalMode::Test] {
            // Cheating scorer: put the held-out item on top.
            let report = evaluate_with(
                |fed: &[u32]| {
                    let mut scores = vec![0.0; 8];
                    // Identify the user by their fed sequence.
                    for &u in &users {
                        let mut expect = split.train(u).to_vec();
                        if mode == EvalMode::Test {
                            expect.push(split.valid(u));
                        }
                        if expect == fed {
                            let target = match mode {
                                EvalMode::Validation => split.valid(u),
                                EvalMode::Test => split.test(u),
                            };
                            scores[target as usize - 1] = 1.0;
                            break;
                        }
                    }
                    Ok(scores)
                },
                &split,
                &users,
                mode,
                8,
                &DEFAULT_KS,
            )
            .unwrap();
            assert_eq!(report.hr, vec![1.0, 1.0]);
            assert_eq!(report.ndcg, vec![1.0, 1.0]);
        }
    }

    #[test]
    fn single_user_report_is_that_users_metrics() {
        let split = toy_split(3, 10, 9);
        let scores: Vec<f64> = (0..10).map(|i| i as f64 * 0.1).collect();
        let report = evaluate_with(
            |_fed| Ok(scores.clone()),
            &split,
            &[2],
            EvalMode::Validation,
            10,
            &DEFAULT_KS,
        )
        .unwrap();
        assert_eq!(report.users, 1);
        let mut exclude: HashSet<u32> = split.train(2).iter().cloned().collect();
        exclude.remove(&split.valid(2));
        let rank = target_rank(&scores, split.valid(2), &exclude).unwrap();
        let want = rank_metrics(rank, &DEFAULT_KS);
        assert_eq!(report.hr[0], want[0].0);
        assert_eq!(report.ndcg[1], want[1].1);
    }

    #[test]
    fn empty_user_set_is_a_contract_error() {
        let split = toy_split(3, 10, 9);
        assert!(matches!(
            evaluate_with(
                |_| Ok(vec![0.0; 10]),
                &split,
                &[],
                EvalMode::Test,
                10,
                &DEFAULT_KS
            )
            .unwrap_err(),
            Error::Contract(_)
        ));
    }

    /// Monte-Carlo expectation: with uniform random scores over 100 items and
    /// nothing excluded, HR@10 concentrates near 0.1.
    #[test]
    fn uniform_random_scores_hit_ten_percent() {
        let mut rng = ChaCha12Rng::seed_from_u64(2024);
        let trials = 2000;
        let mut hits = 0.0;
        for _ in 0..trials {
            let scores: Vec<f64> = (0..100).map(|_| rng.random::<f64>()).collect();
            let target = rng.random_range(1..=100u32);
            let rank = target_rank(&scores, target, &no_exclusions()).unwrap();
            hits += rank_metrics(rank, &[10])[0].0;
        }
        let hr10 = hits / trials as f64;
        assert!(
            (hr10 - 0.1).abs() <= 0.03,
            "HR@10 {hr10} not within 0.1 +- 0.03"
        );
    }

    #[test]
    fn popularity_scores_count_train_items() {
        let split = toy_split(6, 7, 12);
        let scores = popularity_scores(&split, 7);
        let mut want = vec![0.0; 7];
        for u in 1..=6 {
            for &i in split.train(u) {
                want[i as usize - 1] += 1.0;
            }
        }
        assert_eq!(scores, want);
    }
}
