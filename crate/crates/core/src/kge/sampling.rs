use std::collections::{HashMap, HashSet};

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{EntityId, EntityKind, Fkg, Triple};

const MAX_ATTEMPTS: usize = 100;

/// Same-kind corruption of heads or tails, avoiding known triples when possible.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    kinds: Vec<EntityKind>,
    members: HashMap<EntityKind, Vec<EntityId>>,
    known: HashSet<Triple>,
}

impl NegativeSampler {
    pub fn new(fkg: &Fkg) -> Self {
        let kinds: Vec<EntityKind> = fkg.entities().iter().map(|e| e.kind).collect();
        let mut members: HashMap<EntityKind, Vec<EntityId>> = HashMap::new();
        for (i, k) in kinds.iter().enumerate() {
            members.entry(*k).or_default().push(EntityId(i));
        }
        Self {
            kinds,
            members,
            known: fkg.triples().iter().copied().collect(),
        }
    }

    fn peers(&self, e: EntityId) -> &[EntityId] {
        self.members.get(&self.kinds[e.0]).map_or(&[], Vec::as_slice)
    }

    /// Uniform draw among the other entities of `e`'s kind.
    fn replace<R: Rng + ?Sized>(&self, e: EntityId, rng: &mut R) -> EntityId {
        let peers = self.peers(e);
        let own = peers.binary_search(&e).expect("entity listed under its kind");
        let mut i = rng.random_range(0..peers.len() - 1);
        if i >= own {
            i += 1;
        }
        peers[i]
    }

    pub fn sample<R: Rng + ?Sized>(&self, triple: &Triple, k: usize, rng: &mut R) -> Result<Vec<Triple>> {
        if k == 0 {
            return Err(Error::Sampling("negatives per positive must be at least 1".into()));
        }
        if triple.head.0 >= self.kinds.len() || triple.tail.0 >= self.kinds.len() {
            return Err(Error::Reference(format!("triple {triple:?} references unknown entities")));
        }
        let head_ok = self.peers(triple.head).len() > 1;
        let tail_ok = self.peers(triple.tail).len() > 1;
        if !head_ok && !tail_ok {
            return Err(Error::Sampling(format!(
                "entities {} and {} are the only members of their kinds",
                triple.head.0, triple.tail.0
            )));
        }
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            let mut candidate = *triple;
            for _ in 0..MAX_ATTEMPTS {
                let corrupt_head = match (head_ok, tail_ok) {
                    (true, true) => rng.random::<bool>(),
                    (h, _) => h,
                };
                candidate = *triple;
                if corrupt_head {
                    candidate.head = self.replace(triple.head, rng);
                } else {
                    candidate.tail = self.replace(triple.tail, rng);
                }
                if !self.known.contains(&candidate) {
                    break;
                }
            }
            out.push(candidate);
        }
        Ok(out)
    }
}

/// One-off sampling; build a [`NegativeSampler`] to draw repeatedly.
pub fn negative_sample<R: Rng + ?Sized>(
    triple: &Triple,
    fkg: &Fkg,
    k: usize,
    rng: &mut R,
) -> Result<Vec<Triple>> {
    NegativeSampler::new(fkg).sample(triple, k, rng)
}
