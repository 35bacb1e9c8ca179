//! Budget-constrained subset construction, reward re-ranking and
//! Jaccard-filtered greedy augmentation.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{tokenize, CorpusError, NGramBag, PreferenceSample};
use crate::scorer::{score_batch, ScoreError, ScoreRequest, Scorer};

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("budget {budget} is not divisible by ranking length {length}")]
    IndivisibleBudget { budget: usize, length: usize },
    #[error("subset construction failed: {0}")]
    Construction(String),
    #[error("scoring sample {id} failed: {source}")]
    Scoring {
        id: String,
        #[source]
        source: ScoreError,
    },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("pool exhausted after adding {added} of {requested} samples")]
    AugmentationUnderflow { added: usize, requested: usize },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    pub prompt_count: usize,
    pub ranking_length: usize,
}

/// Ways to spend a fixed number of annotated responses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub budget: usize,
    pub allocations: Vec<Allocation>,
}

/// One allocation per ranking length, ordered by length.
pub fn plan_budget(budget: usize, ranking_lengths: &[usize]) -> Result<BudgetPlan, CurationError> {
    if budget == 0 {
        return Err(CurationError::InvalidArgument("budget must be positive".into()));
    }
    let lengths: BTreeSet<usize> = ranking_lengths.iter().copied().collect();
    if lengths.is_empty() {
        return Err(CurationError::InvalidArgument(
            "at least one ranking length is required".into(),
        ));
    }
    let mut allocations = Vec::with_capacity(lengths.len());
    for length in lengths {
        if length < 2 {
            return Err(CurationError::InvalidArgument(format!(
                "ranking length must be at least 2, got {length}"
            )));
        }
        if budget % length != 0 {
            return Err(CurationError::IndivisibleBudget { budget, length });
        }
        allocations.push(Allocation {
            prompt_count: budget / length,
            ranking_length: length,
        });
    }
    Ok(BudgetPlan { budget, allocations })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubsetSpec {
    pub size: usize,
    pub ranking_length: usize,
    pub seed: u64,
}

fn truncate_ranking(sample: &PreferenceSample, k: usize) -> PreferenceSample {
    PreferenceSample {
        id: sample.id.clone(),
        prompt: sample.prompt.clone(),
        responses: sample.responses[..k].to_vec(),
        rewards: sample.rewards.as_ref().map(|r| r[..k].to_vec()),
    }
}

fn check_strictly_ascending(name: &str, values: &[usize], min: usize) -> Result<(), CurationError> {
    if values.is_empty() {
        return Err(CurationError::InvalidArgument(format!("{name} must not be empty")));
    }
    if values[0] < min {
        return Err(CurationError::InvalidArgument(format!(
            "{name} must be at least {min}, got {}",
            values[0]
        )));
    }
    if values.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CurationError::InvalidArgument(format!(
            "{name} must be strictly ascending"
        )));
    }
    Ok(())
}

/// Builds every (size, length) subset from one seeded shuffle.
///
/// A subset of size `s` is the first `s` samples of the shuffle, so smaller
/// subsets are contained in larger ones. A `k`-ranking keeps the first `k`
/// responses, so shorter rankings are prefixes of longer ones.
pub fn build_nested_subsets(
    samples: &[PreferenceSample],
    sizes: &[usize],
    ranking_lengths: &[usize],
    seed: u64,
) -> Result<BTreeMap<(usize, usize), Vec<PreferenceSample>>, CurationError> {
    check_strictly_ascending("sizes", sizes, 1)?;
    check_strictly_ascending("ranking lengths", ranking_lengths, 2)?;
    let max_size = *sizes.last().unwrap();
    if max_size > samples.len() {
        return Err(CurationError::Construction(format!(
            "requested {max_size} samples but the corpus has {}",
            samples.len()
        )));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let selected = &order[..max_size];

    let max_len = *ranking_lengths.last().unwrap();
    if let Some(&short) = selected
        .iter()
        .find(|&&i| samples[i].ranking_len() < max_len)
    {
        return Err(CurationError::Construction(format!(
            "sample {} has {} responses, fewer than the requested ranking length {max_len}",
            samples[short].id,
            samples[short].ranking_len()
        )));
    }

    let mut out = BTreeMap::new();
    for &size in sizes {
        for &k in ranking_lengths {
            let subset = selected[..size]
                .iter()
                .map(|&i| truncate_ranking(&samples[i], k))
                .collect();
            out.insert((size, k), subset);
        }
    }
    Ok(out)
}

/// Reorders responses by `scores`, highest first, keeping the original order
/// among ties, and attaches the sorted scores as rewards.
pub fn rerank_with_scores(
    sample: &PreferenceSample,
    scores: &[f64],
) -> Result<PreferenceSample, CurationError> {
    if scores.len() != sample.responses.len() {
        return Err(CurationError::InvalidArgument(format!(
            "sample {}: {} scores for {} responses",
            sample.id,
            scores.len(),
            sample.responses.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(CurationError::InvalidArgument(format!(
            "sample {}: scores must be finite",
            sample.id
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let reranked = PreferenceSample {
        id: sample.id.clone(),
        prompt: sample.prompt.clone(),
        responses: order.iter().map(|&i| sample.responses[i].clone()).collect(),
        rewards: Some(order.iter().map(|&i| scores[i]).collect()),
    };
    reranked.validate()?;
    Ok(reranked)
}

pub async fn rerank_sample(
    sample: &PreferenceSample,
    scorer: &dyn Scorer,
    max_in_flight: usize,
) -> Result<PreferenceSample, CurationError> {
    let scoring = |source| CurationError::Scoring {
        id: sample.id.clone(),
        source,
    };
    let requests = sample
        .responses
        .iter()
        .map(|r| ScoreRequest::new(sample.prompt.clone(), r.clone()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(scoring)?;
    let scores: Vec<f64> = score_batch(scorer, &requests, max_in_flight)
        .await
        .map_err(scoring)?
        .into_iter()
        .map(|r| r.score)
        .collect();
    rerank_with_scores(sample, &scores)
}

/// `|A ∩ B| / |A ∪ B|` over the distinct grams of two bags.
pub fn jaccard_index(x: &NGramBag, y: &NGramBag) -> Result<f64, CurationError> {
    x.check_order(y)?;
    if x.is_empty() && y.is_empty() {
        return Err(CurationError::Degenerate(
            "jaccard index is undefined for two empty gram sets".into(),
        ));
    }
    let (small, large) = if x.unique() <= y.unique() { (x, y) } else { (y, x) };
    let inter = small.distinct().filter(|g| large.contains(g)).count() as u64;
    let union = x.unique() + y.unique() - inter;
    Ok(inter as f64 / union as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    /// Supporting samples drawn from the current set each iteration.
    pub n_support: usize,
    /// Candidates evaluated per iteration.
    pub batch_size: usize,
    /// Samples to add.
    pub count: usize,
    pub ngram_order: usize,
    pub seed: u64,
}

impl AugmentationConfig {
    pub fn new(count: usize, seed: u64) -> Self {
        Self {
            n_support: 2,
            batch_size: 8,
            count,
            ngram_order: crate::DEFAULT_NGRAM,
            seed,
        }
    }

    fn validate(&self) -> Result<(), CurationError> {
        for (name, v) in [
            ("n_support", self.n_support),
            ("batch_size", self.batch_size),
            ("count", self.count),
            ("ngram_order", self.ngram_order),
        ] {
            if v < 1 {
                return Err(CurationError::InvalidArgument(format!(
                    "{name} must be at least 1"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    /// Index into the original pool.
    pub pool_index: usize,
    pub jaccard: f64,
}

/// What one augmentation iteration looked at and chose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationStep {
    /// Indices into the growing set at the time of the iteration.
    pub supports: Vec<usize>,
    pub candidates: Vec<CandidateScore>,
    pub selected: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationOutcome {
    /// Seed samples followed by the added ones, in selection order.
    pub samples: Vec<PreferenceSample>,
    pub steps: Vec<AugmentationStep>,
}

impl AugmentationOutcome {
    pub fn added(&self) -> &[PreferenceSample] {
        &self.samples[self.samples.len() - self.steps.len()..]
    }
}

fn check_disjoint(seed_set: &[PreferenceSample], pool: &[PreferenceSample]) -> Result<(), CurationError> {
    let seed_ids: HashSet<&str> = seed_set.iter().map(|s| s.id.as_str()).collect();
    let mut pool_ids = HashSet::with_capacity(pool.len());
    for s in pool {
        if seed_ids.contains(s.id.as_str()) {
            return Err(CurationError::InvalidArgument(format!(
                "pool sample {} also appears in the seed set",
                s.id
            )));
        }
        if !pool_ids.insert(s.id.as_str()) {
            return Err(CurationError::InvalidArgument(format!(
                "pool sample id {} is duplicated",
                s.id
            )));
        }
    }
    Ok(())
}

fn sample_bag(sample: &PreferenceSample, n: usize) -> Result<NGramBag, CorpusError> {
    let mut bag = NGramBag::new(n)?;
    bag.add_document(&tokenize(&sample.prompt));
    Ok(bag)
}

/// Greedily grows `seed_set` with pool samples whose prompts overlap least
/// with a few randomly drawn supporting samples.
///
/// Each iteration draws `n_support` samples from the current set, merges
/// their prompt grams into `X`, draws `batch_size` candidates from the
/// unused pool and moves the candidate with the lowest Jaccard index against
/// `X` into the set. Ties go to the lowest pool index.
pub fn augment_dataset(
    seed_set: &[PreferenceSample],
    pool: &[PreferenceSample],
    config: &AugmentationConfig,
) -> Result<AugmentationOutcome, CurationError> {
    config.validate()?;
    if seed_set.is_empty() {
        return Err(CurationError::InvalidArgument(
            "seed set must not be empty".into(),
        ));
    }
    check_disjoint(seed_set, pool)?;

    let n = config.ngram_order;
    let mut current: Vec<usize> = Vec::with_capacity(seed_set.len() + config.count);
    let mut bags: Vec<NGramBag> = Vec::with_capacity(seed_set.len() + pool.len());
    for s in seed_set.iter().chain(pool) {
        bags.push(sample_bag(s, n)?);
    }
    // Entries of `current` index into seed_set ++ pool.
    current.extend(0..seed_set.len());
    let mut remaining: Vec<usize> = (0..pool.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut steps = Vec::with_capacity(config.count);

    for added in 0..config.count {
        if remaining.is_empty() {
            return Err(CurationError::AugmentationUnderflow {
                added,
                requested: config.count,
            });
        }
        let supports: Vec<usize> =
            index::sample(&mut rng, current.len(), config.n_support.min(current.len())).into_vec();
        let mut support_bag = NGramBag::new(n)?;
        for &s in &supports {
            support_bag.merge(&bags[current[s]])?;
        }

        let picks = index::sample(&mut rng, remaining.len(), config.batch_size.min(remaining.len()));
        let mut candidates = Vec::with_capacity(picks.len());
        let mut best: Option<(usize, CandidateScore)> = None;
        for slot in picks.iter() {
            let pool_index = remaining[slot];
            let jaccard = jaccard_index(&support_bag, &bags[seed_set.len() + pool_index])?;
            let cand = CandidateScore { pool_index, jaccard };
            let better = match best {
                None => true,
                Some((_, b)) => {
                    jaccard < b.jaccard || (jaccard == b.jaccard && pool_index < b.pool_index)
                }
            };
            if better {
                best = Some((slot, cand));
            }
            candidates.push(cand);
        }
        let (slot, chosen) = best.expect("batch is non-empty");
        remaining.swap_remove(slot);
        current.push(seed_set.len() + chosen.pool_index);
        steps.push(AugmentationStep {
            supports,
            candidates,
            selected: chosen.pool_index,
        });
    }

    let samples = current
        .iter()
        .map(|&i| {
            if i < seed_set.len() {
                seed_set[i].clone()
            } else {
                pool[i - seed_set.len()].clone()
            }
        })
        .collect();
    Ok(AugmentationOutcome { samples, steps })
}

/// Grows `seed_set` with `count` pool samples drawn uniformly, for comparison
/// against [`augment_dataset`].
pub fn uniform_growth(
    seed_set: &[PreferenceSample],
    pool: &[PreferenceSample],
    count: usize,
    seed: u64,
) -> Result<Vec<PreferenceSample>, CurationError> {
    check_disjoint(seed_set, pool)?;
    if count > pool.len() {
        return Err(CurationError::AugmentationUnderflow {
            added: 0,
            requested: count,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, pool.len(), count);
    Ok(seed_set
        .iter()
        .cloned()
        .chain(picks.iter().map(|i| pool[i].clone()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Gram;
    use crate::scorer::{MockScorer, ScoreResponse};
    use async_trait::async_trait;

    fn sample(id: &str, prompt: &str, n_resp: usize) -> PreferenceSample {
        PreferenceSample::new(
            id,
            prompt,
            (0..n_resp).map(|i| format!("{id}-r{i}")).collect(),
        )
        .unwrap()
    }

    fn bag(grams: &[(&str, &str)]) -> NGramBag {
        let mut b = NGramBag::new(2).unwrap();
        for (a, c) in grams {
            b.insert(Gram::new([*a, *c]), 1);
        }
        b
    }

    #[test]
    fn budget_examples() {
        let plan = plan_budget(48000, &[2, 3, 4]).unwrap();
        let pairs: Vec<(usize, usize)> = plan
            .allocations
            .iter()
            .map(|a| (a.prompt_count, a.ranking_length))
            .collect();
        assert_eq!(pairs, [(24000, 2), (16000, 3), (12000, 4)]);

        let plan = plan_budget(6000, &[4, 2, 3]).unwrap();
        let pairs: Vec<(usize, usize)> = plan
            .allocations
            .iter()
            .map(|a| (a.prompt_count, a.ranking_length))
            .collect();
        assert_eq!(pairs, [(3000, 2), (2000, 3), (1500, 4)]);

        assert!(matches!(
            plan_budget(10, &[3]),
            Err(CurationError::IndivisibleBudget { length: 3, .. })
        ));
        assert!(plan_budget(10, &[1]).is_err());
        assert!(plan_budget(0, &[2]).is_err());
    }

    #[test]
    fn nested_subsets_nest() {
        let corpus: Vec<_> = (0..50).map(|i| sample(&format!("s{i}"), "p", 4)).collect();
        let subsets = build_nested_subsets(&corpus, &[10, 30], &[2, 4], 3).unwrap();
        assert_eq!(subsets.len(), 4);
        let small: HashSet<_> = subsets[&(10, 2)].iter().map(|s| &s.id).collect();
        let large: HashSet<_> = subsets[&(30, 2)].iter().map(|s| &s.id).collect();
        assert!(small.is_subset(&large));
        for (short, long) in subsets[&(30, 2)].iter().zip(&subsets[&(30, 4)]) {
            assert_eq!(short.id, long.id);
            assert_eq!(short.responses[..], long.responses[..2]);
        }
        assert_eq!(
            subsets,
            build_nested_subsets(&corpus, &[10, 30], &[2, 4], 3).unwrap()
        );
    }

    #[test]
    fn nested_subsets_errors() {
        let corpus: Vec<_> = (0..5).map(|i| sample(&format!("s{i}"), "p", 2)).collect();
        assert!(matches!(
            build_nested_subsets(&corpus, &[6], &[2], 0),
            Err(CurationError::Construction(_))
        ));
        assert!(matches!(
            build_nested_subsets(&corpus, &[3], &[3], 0),
            Err(CurationError::Construction(_))
        ));
        assert!(build_nested_subsets(&corpus, &[3, 2], &[2], 0).is_err());
        assert!(build_nested_subsets(&corpus, &[3], &[1], 0).is_err());
    }

    #[test]
    fn rerank_examples() {
        let s = PreferenceSample::new("x", "p", vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let r = rerank_with_scores(&s, &[0.1, 0.9, 0.5]).unwrap();
        assert_eq!(r.responses, ["b", "c", "a"]);
        assert_eq!(r.rewards.unwrap(), [0.9, 0.5, 0.1]);

        let r = rerank_with_scores(&s, &[0.3, 0.3, 0.3]).unwrap();
        assert_eq!(r.responses, ["a", "b", "c"]);

        assert!(rerank_with_scores(&s, &[0.1]).is_err());
    }

    struct Failing;

    #[async_trait]
    impl Scorer for Failing {
        async fn score(&self, _: &ScoreRequest) -> Result<ScoreResponse, ScoreError> {
            Err(ScoreError::Transport {
                attempts: 3,
                retryable: true,
                status: Some(500),
                message: "HTTP 500".into(),
            })
        }
    }

    #[tokio::test]
    async fn rerank_via_scorer() {
        let s = sample("q", "some prompt", 4);
        let r = rerank_sample(&s, &MockScorer, 2).await.unwrap();
        let rewards = r.rewards.clone().unwrap();
        assert!(rewards.windows(2).all(|w| w[0] >= w[1]));
        for (resp, reward) in r.responses.iter().zip(&rewards) {
            assert_eq!(*reward, MockScorer::score_pair("some prompt", resp));
        }
        match rerank_sample(&s, &Failing, 2).await {
            Err(CurationError::Scoring { id, .. }) => assert_eq!(id, "q"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn jaccard_examples() {
        let a = bag(&[("a", "b"), ("b", "c"), ("c", "d")]);
        let b = bag(&[("b", "c"), ("c", "d"), ("d", "e")]);
        assert_eq!(jaccard_index(&a, &b).unwrap(), 0.5);
        assert_eq!(jaccard_index(&a, &a).unwrap(), 1.0);
        assert_eq!(jaccard_index(&a, &bag(&[("x", "y")])).unwrap(), 0.0);
        assert_eq!(jaccard_index(&a, &NGramBag::new(2).unwrap()).unwrap(), 0.0);
        let empty = NGramBag::new(2).unwrap();
        assert!(matches!(
            jaccard_index(&empty, &empty),
            Err(CurationError::Degenerate(_))
        ));
    }

    #[test]
    fn augmentation_picks_the_novel_candidate() {
        let seed = vec![
            sample("s0", "how do I bake bread", 2),
            sample("s1", "how do I bake a cake", 2),
        ];
        let pool = vec![
            sample("p0", "how do I bake cookies", 2),
            sample("p1", "explain quantum tunnelling briefly", 2),
            sample("p2", "how do I bake pie", 2),
        ];
        let cfg = AugmentationConfig {
            batch_size: 3,
            ..AugmentationConfig::new(1, 0)
        };
        let out = augment_dataset(&seed, &pool, &cfg).unwrap();
        assert_eq!(out.steps[0].selected, 1);
        assert_eq!(out.added()[0].id, "p1");
        assert_eq!(out.samples.len(), 3);
        assert_eq!(out.samples[..2], seed[..]);
    }

    #[test]
    fn augmentation_errors() {
        let seed = vec![sample("s0", "a b c", 2)];
        let pool = vec![sample("p0", "d e f", 2)];
        match augment_dataset(&seed, &pool, &AugmentationConfig::new(2, 0)) {
            Err(CurationError::AugmentationUnderflow { added, requested }) => {
                assert_eq!((added, requested), (1, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
        let overlapping = vec![sample("s0", "x y", 2)];
        assert!(augment_dataset(&seed, &overlapping, &AugmentationConfig::new(1, 0)).is_err());
        assert!(augment_dataset(&[], &pool, &AugmentationConfig::new(1, 0)).is_err());
        let bad = AugmentationConfig {
            batch_size: 0,
            ..AugmentationConfig::new(1, 0)
        };
        assert!(augment_dataset(&seed, &pool, &bad).is_err());
    }

    #[test]
    fn uniform_growth_is_seeded() {
        let seed = vec![sample("s0", "a b", 2)];
        let pool: Vec<_> = (0..20).map(|i| sample(&format!("p{i}"), "c d", 2)).collect();
        let a = uniform_growth(&seed, &pool, 5, 9).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(a, uniform_growth(&seed, &pool, 5, 9).unwrap());
        assert!(uniform_growth(&seed, &pool, 21, 9).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_bag() -> impl Strategy<Value = NGramBag> {
            prop::collection::vec((0u8..6, 0u8..6), 0..12).prop_map(|pairs| {
                let mut b = NGramBag::new(2).unwrap();
                for (x, y) in pairs {
                    b.insert(Gram::new([x.to_string(), y.to_string()]), 1);
                }
                b
            })
        }

        proptest! {
            #[test]
            fn jaccard_symmetric_and_bounded(a in arb_bag(), b in arb_bag()) {
                prop_assume!(!(a.is_empty() && b.is_empty()));
                let ab = jaccard_index(&a, &b).unwrap();
                prop_assert_eq!(ab, jaccard_index(&b, &a).unwrap());
                prop_assert!((0.0..=1.0).contains(&ab));
                let sa: HashSet<_> = a.distinct().collect();
                let sb: HashSet<_> = b.distinct().collect();
                prop_assert_eq!(ab == 1.0, sa == sb);
                prop_assert_eq!(ab == 0.0, sa.is_disjoint(&sb));
            }

            #[test]
            fn plans_multiply_to_budget(k in 1usize..500, lengths in prop::collection::btree_set(2usize..7, 1..4)) {
                let lengths: Vec<usize> = lengths.into_iter().collect();
                let lcm = lengths.iter().fold(1usize, |acc, &l| acc * l / gcd(acc, l));
                let plan = plan_budget(lcm * k, &lengths).unwrap();
                for a in &plan.allocations {
                    prop_assert_eq!(a.prompt_count * a.ranking_length, plan.budget);
                }
            }

            #[test]
            fn rerank_preserves_responses(scores in prop::collection::vec(-5i32..5, 1..8)) {
                let s = sample("z", "p", scores.len());
                let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
                let r = rerank_with_scores(&s, &scores).unwrap();
                let rewards = r.rewards.clone().unwrap();
                prop_assert!(rewards.windows(2).all(|w| w[0] >= w[1]));
                let mut before = s.responses.clone();
                let mut after = r.responses.clone();
                before.sort();
                after.sort();
                prop_assert_eq!(before, after);
            }
        }

        fn gcd(a: usize, b: usize) -> usize {
            if b == 0 { a } else { gcd(b, a % b) }
        }
    }
}
