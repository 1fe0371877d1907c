use std::collections::{BTreeSet, HashMap};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, HeldoutUser, InteractionVector, UserHistory};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitParams {
    pub n_heldout_users: usize,
    pub fold_in_fraction: f64,
    pub seed: u64,
}

impl Default for SplitParams {
    fn default() -> Self {
        SplitParams {
            n_heldout_users: 10_000,
            fold_in_fraction: 0.8,
            seed: 0,
        }
    }
}

/// Users and interactions removed while building a split.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitDiagnostics {
    pub discarded_validation_users: usize,
    pub discarded_test_users: usize,
    /// Heldout-user interactions with items never seen by a training user.
    pub dropped_out_of_vocab_interactions: usize,
}

/// Number of fold-in items for a history of `n` items.
pub(crate) fn fold_in_count(n: usize, fraction: f64) -> usize {
    // The epsilon absorbs representation error such as 0.7 * 10 = 7.000000000000001.
    ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Strong-generalization split of ingested users.
///
/// `n_heldout_users` users each go to validation and test, drawn uniformly
/// without overlap; the rest train. The item vocabulary is built from
/// training users only. Each heldout user keeps ⌈fraction·N_u⌉ of their
/// in-vocabulary items as fold-in; users left with an empty fold-in or
/// heldout part are discarded and counted in the diagnostics.
pub fn split(users: &[UserHistory], params: &SplitParams) -> Result<DatasetSplit> {
    let f = params.fold_in_fraction;
    if !(f > 0.0 && f < 1.0) {
        return Err(Error::Config(format!(
            "fold-in fraction must lie in (0, 1), got {f}"
        )));
    }
    let n = params.n_heldout_users;
    if 2 * n >= users.len() {
        return Err(Error::Config(format!(
            "{n} validation + {n} test users leave no training users out of {}",
            users.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut order: Vec<usize> = (0..users.len()).collect();
    order.shuffle(&mut rng);
    let mut validation_idx = order[..n].to_vec();
    let mut test_idx = order[n..2 * n].to_vec();
    let mut train_idx = order[2 * n..].to_vec();
    validation_idx.sort_unstable();
    test_idx.sort_unstable();
    train_idx.sort_unstable();

    let vocab: Vec<String> = train_idx
        .iter()
        .flat_map(|&u| users[u].items.iter().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let lookup: HashMap<&str, usize> = vocab
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();

    let train = train_idx
        .iter()
        .map(|&u| {
            let items = users[u].items.iter().map(|it| lookup[it.as_str()]).collect();
            InteractionVector::new(u, items)
        })
        .collect();

    let mut diagnostics = SplitDiagnostics::default();
    let mut partition = |group: &[usize], discarded: &mut usize| -> Vec<HeldoutUser> {
        let mut out = Vec::with_capacity(group.len());
        for &u in group {
            let known: Vec<usize> = users[u]
                .items
                .iter()
                .filter_map(|it| lookup.get(it.as_str()).copied())
                .collect();
            diagnostics.dropped_out_of_vocab_interactions += users[u].items.len() - known.len();
            let n_fold = fold_in_count(known.len(), f);
            if n_fold == 0 || n_fold >= known.len() {
                *discarded += 1;
                continue;
            }
            let chosen = index::sample(&mut rng, known.len(), n_fold).into_vec();
            let mut in_fold = vec![false; known.len()];
            for c in chosen {
                in_fold[c] = true;
            }
            let (fold, held): (Vec<_>, Vec<_>) = known
                .iter()
                .zip(&in_fold)
                .partition(|(_, &flag)| flag);
            out.push(HeldoutUser {
                fold_in: InteractionVector::new(u, fold.into_iter().map(|(&i, _)| i).collect()),
                heldout: InteractionVector::new(u, held.into_iter().map(|(&i, _)| i).collect()),
            });
        }
        out
    };
    let mut discarded_validation = 0;
    let mut discarded_test = 0;
    let validation = partition(&validation_idx, &mut discarded_validation);
    let test = partition(&test_idx, &mut discarded_test);
    diagnostics.discarded_validation_users = discarded_validation;
    diagnostics.discarded_test_users = discarded_test;

    Ok(DatasetSplit {
        vocab,
        n_users: users.len(),
        train,
        validation,
        test,
        params: params.clone(),
        diagnostics,
    })
}
