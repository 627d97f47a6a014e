use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Sample indices of one batch, ordered by score descending.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub indices: Vec<usize>,
    /// Fewer than five samples: the relative term is skipped.
    pub relative_exempt: bool,
}

/// Shuffle all samples with `shuffle_seed`, cut into chunks of `batch_size`,
/// then sort each chunk by score descending (ties keep ascending index).
pub fn build_batches(scores: &[f64], batch_size: usize, shuffle_seed: u64) -> Vec<BatchPlan> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    order
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let mut indices = chunk.to_vec();
            indices.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            BatchPlan {
                relative_exempt: indices.len() < 5,
                indices,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn batches_partition_and_sort(
            scores in proptest::collection::vec(prop_oneof![1.0f64..10.0, Just(5.0)], 1..120),
            b in 1usize..40,
            seed in any::<u64>(),
        ) {
            let plans = build_batches(&scores, b, seed);
            let mut seen: Vec<usize> = plans.iter().flat_map(|p| p.indices.clone()).collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..scores.len()).collect::<Vec<_>>());
            for p in &plans {
                prop_assert!(p.indices.len() <= b);
                prop_assert_eq!(p.relative_exempt, p.indices.len() < 5);
                for w in p.indices.windows(2) {
                    prop_assert!(scores[w[0]] > scores[w[1]] || (scores[w[0]] == scores[w[1]] && w[0] < w[1]));
                }
            }
            prop_assert_eq!(plans, build_batches(&scores, b, seed));
        }
    }

    #[test]
    fn tail_batch_is_flagged() {
        let scores: Vec<f64> = (0..35).map(f64::from).collect();
        let plans = build_batches(&scores, 32, 1);
        assert_eq!(plans.len(), 2);
        assert!(!plans[0].relative_exempt);
        assert!(plans[1].relative_exempt);
    }

    #[test]
    fn seed_changes_composition() {
        let scores: Vec<f64> = (0..64).map(f64::from).collect();
        assert_ne!(build_batches(&scores, 8, 1), build_batches(&scores, 8, 2));
    }
}
