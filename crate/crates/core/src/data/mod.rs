//! Triple data: encoding, reciprocal augmentation, frequency counts, the
//! filter index used for filtered ranking, minibatching, and the synthetic
//! generator.

mod synth;
mod vocab;

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use synth::{synth_generate, HeadRelDistribution, SyntheticData};
pub use vocab::{build_vocab, load_triples, read_vocab_file, write_triples, Vocab, INVERSE_MARKER};

/// A fact `(head, relation, tail)` with dense integer ids.
///
/// After augmentation relation ids live in `[0, 2 * num_relations)`; the
/// inverse of relation `r` has id `r + num_relations`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

impl Triple {
    pub const fn new(head: usize, relation: usize, tail: usize) -> Self {
        Triple {
            head,
            relation,
            tail,
        }
    }

    /// The reciprocal fact `(tail, relation + num_relations, head)`.
    pub const fn reciprocal(self, num_relations: usize) -> Self {
        Triple::new(self.tail, self.relation + num_relations, self.head)
    }
}

/// Returns `triples` followed by the reciprocal of every triple, in order.
pub fn augment_reciprocal(triples: &[Triple], num_relations: usize) -> Vec<Triple> {
    debug_assert!(triples.iter().all(|t| t.relation < num_relations));
    let mut out = Vec::with_capacity(2 * triples.len());
    out.extend_from_slice(triples);
    out.extend(triples.iter().map(|t| t.reciprocal(num_relations)));
    out
}

/// Train/valid/test splits, all stored in augmented form.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
    pub num_entities: usize,
    /// Number of original relations; the augmented relation table has twice as many rows.
    pub num_relations: usize,
}

impl Dataset {
    /// Augments raw splits and checks every id against the given counts.
    pub fn from_raw(
        train: &[Triple],
        valid: &[Triple],
        test: &[Triple],
        num_entities: usize,
        num_relations: usize,
    ) -> Result<Self> {
        for t in train.iter().chain(valid).chain(test) {
            if t.head >= num_entities || t.tail >= num_entities || t.relation >= num_relations {
                return Err(Error::InvalidArgument(format!(
                    "triple {t:?} out of range for {num_entities} entities, {num_relations} relations"
                )));
            }
        }
        Ok(Dataset {
            train: augment_reciprocal(train, num_relations),
            valid: augment_reciprocal(valid, num_relations),
            test: augment_reciprocal(test, num_relations),
            num_entities,
            num_relations,
        })
    }

    /// Builds a vocabulary over all three files and loads the augmented splits.
    pub fn load(
        train: impl AsRef<Path>,
        valid: impl AsRef<Path>,
        test: impl AsRef<Path>,
    ) -> Result<(Self, Vocab)> {
        let paths = [train.as_ref(), valid.as_ref(), test.as_ref()];
        let vocab = build_vocab(&paths)?;
        let raw_train = load_triples(paths[0], &vocab)?;
        let raw_valid = load_triples(paths[1], &vocab)?;
        let raw_test = load_triples(paths[2], &vocab)?;
        let ds = Dataset::from_raw(
            &raw_train,
            &raw_valid,
            &raw_test,
            vocab.num_entities(),
            vocab.num_relations(),
        )?;
        Ok((ds, vocab))
    }

    /// The raw (un-augmented) half of a split.
    pub fn raw(split: &[Triple]) -> &[Triple] {
        &split[..split.len() / 2]
    }

    /// Rows of the relation table (original plus inverse relations).
    pub fn num_relation_rows(&self) -> usize {
        2 * self.num_relations
    }

    pub fn frequencies(&self) -> FrequencyTable {
        count_frequencies(&self.train, self.num_entities, self.num_relations)
    }

    pub fn filter_index(&self) -> FilterIndex {
        build_filter_index([&self.train[..], &self.valid[..], &self.test[..]])
    }
}

/// Occurrence counts over the augmented training set.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FrequencyTable {
    /// Head plus tail occurrences per entity.
    pub entity: Vec<u64>,
    /// Occurrences per relation, inverse relations included.
    pub relation: Vec<u64>,
}

/// Counts entity and relation occurrences. Self-loops count once as head and
/// once as tail.
pub fn count_frequencies(
    augmented_train: &[Triple],
    num_entities: usize,
    num_relations: usize,
) -> FrequencyTable {
    let mut entity = vec![0u64; num_entities];
    let mut relation = vec![0u64; 2 * num_relations];
    for t in augmented_train {
        entity[t.head] += 1;
        entity[t.tail] += 1;
        relation[t.relation] += 1;
    }
    FrequencyTable { entity, relation }
}

/// All tails known to be true for each `(head, relation)` across every split.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FilterIndex {
    tails: HashMap<(usize, usize), Vec<usize>>,
}

impl FilterIndex {
    /// Sorted, deduplicated known tails; empty when the pair was never seen.
    pub fn tails(&self, head: usize, relation: usize) -> &[usize] {
        self.tails
            .get(&(head, relation))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn contains(&self, t: Triple) -> bool {
        self.tails(t.head, t.relation).binary_search(&t.tail).is_ok()
    }

    pub fn len(&self) -> usize {
        self.tails.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tails.is_empty()
    }
}

pub fn build_filter_index<'a>(splits: impl IntoIterator<Item = &'a [Triple]>) -> FilterIndex {
    let mut tails: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for split in splits {
        for t in split {
            tails.entry((t.head, t.relation)).or_default().push(t.tail);
        }
    }
    for v in tails.values_mut() {
        v.sort_unstable();
        v.dedup();
    }
    FilterIndex { tails }
}

/// One epoch of minibatches: a seeded permutation of the triples, chunked.
#[derive(Clone, Debug)]
pub struct Minibatches {
    order: Vec<Triple>,
    batch_size: usize,
}

impl Minibatches {
    pub fn iter(&self) -> std::slice::Chunks<'_, Triple> {
        self.order.chunks(self.batch_size)
    }

    pub fn len(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

impl<'a> IntoIterator for &'a Minibatches {
    type Item = &'a [Triple];
    type IntoIter = std::slice::Chunks<'a, Triple>;

    fn into_iter(self) -> Self::IntoIter {
        self.iter()
    }
}

/// Shuffles `triples` with a generator keyed by `(seed, epoch)` and splits the
/// result into chunks of `batch_size` (the last one may be shorter).
pub fn minibatch_iter(triples: &[Triple], batch_size: usize, seed: u64, epoch: u64) -> Minibatches {
    assert!(batch_size >= 1, "batch_size must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order = triples.to_vec();
    order.shuffle(&mut rng);
    Minibatches { order, batch_size }
}
