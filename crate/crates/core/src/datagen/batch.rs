use std::collections::{BTreeMap, HashMap};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub persons: usize,
    pub tuples_per_person: usize,
    pub negs_per_image: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            persons: 8,
            tuples_per_person: 2,
            negs_per_image: 6,
        }
    }
}

/// An image-description pair by slot: `image` indexes [`BatchPlan::tuples`],
/// `text` indexes [`BatchPlan::texts`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub image: usize,
    pub text: usize,
    pub positive: bool,
}

/// One training batch over indices into the training split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    /// Sampled tuples, grouped by person.
    pub tuples: Vec<usize>,
    /// Descriptions to encode: the sampled tuples' own descriptions first,
    /// then any extra negatives drawn from outside the batch.
    pub texts: Vec<usize>,
    pub pairs: Vec<Pair>,
}

impl BatchPlan {
    pub fn num_positives(&self) -> usize {
        self.pairs.iter().filter(|p| p.positive).count()
    }

    pub fn num_negatives(&self) -> usize {
        self.pairs.len() - self.num_positives()
    }
}

/// Samples `persons` identities and `tuples_per_person` tuples of each.
/// Positives are every image-description combination within a person;
/// each image gets `negs_per_image` distinct descriptions of other
/// identities, taken from the batch first and topped up from the rest of
/// the split when the batch has too few.
pub fn compose_batch(labels: &[usize], config: &BatchConfig, rng: &mut impl Rng) -> Result<BatchPlan> {
    let BatchConfig {
        persons,
        tuples_per_person: per,
        negs_per_image: negs,
    } = *config;
    if persons == 0 || per == 0 {
        return Err(Error::Config("persons and tuples_per_person must be at least 1".into()));
    }
    let mut by_identity: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_identity.entry(l).or_default().push(i);
    }
    let eligible: Vec<&Vec<usize>> = by_identity.values().filter(|v| v.len() >= per).collect();
    if eligible.len() < persons {
        return Err(Error::NotEnoughIdentities {
            needed: persons,
            available: eligible.len(),
        });
    }

    let mut tuples = Vec::with_capacity(persons * per);
    for k in index::sample(rng, eligible.len(), persons) {
        let members = eligible[k];
        tuples.extend(index::sample(rng, members.len(), per).into_iter().map(|j| members[j]));
    }
    let mut texts = tuples.clone();
    let mut slot_of: HashMap<usize, usize> = texts.iter().enumerate().map(|(s, &t)| (t, s)).collect();

    let mut pairs = Vec::new();
    for (i, &img) in tuples.iter().enumerate() {
        for (j, &txt) in tuples.iter().enumerate() {
            if labels[img] == labels[txt] {
                pairs.push(Pair {
                    image: i,
                    text: j,
                    positive: true,
                });
            }
        }
    }

    for (i, &img) in tuples.iter().enumerate() {
        let own = labels[img];
        let in_batch: Vec<usize> = (0..tuples.len()).filter(|&j| labels[tuples[j]] != own).collect();
        let mut chosen: Vec<usize> = in_batch.choose_multiple(rng, negs.min(in_batch.len())).copied().collect();
        if chosen.len() < negs {
            let mut outside: Vec<usize> = (0..labels.len())
                .filter(|&t| labels[t] != own && !tuples.contains(&t))
                .collect();
            let missing = negs - chosen.len();
            if outside.len() < missing {
                return Err(Error::Dataset(format!(
                    "only {} descriptions of other identities available, need {negs} negatives",
                    in_batch.len() + outside.len()
                )));
            }
            outside.shuffle(rng);
            for &t in &outside[..missing] {
                let slot = *slot_of.entry(t).or_insert_with(|| {
                    texts.push(t);
                    texts.len() - 1
                });
                chosen.push(slot);
            }
        }
        pairs.extend(chosen.into_iter().map(|text| Pair {
            image: i,
            text,
            positive: false,
        }));
    }
    Ok(BatchPlan { tuples, texts, pairs })
}
