use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;

use super::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::rng;

/// Identity-aligned batch: `lists[k][j]` is the domain-`domains[k]` image of
/// the j-th identity, in the same identity order for every k.
#[derive(Debug, Clone)]
pub struct IdentityBatch<'a> {
    pub domains: Vec<u8>,
    pub lists: Vec<Vec<&'a Sample>>,
}

impl IdentityBatch<'_> {
    pub fn len(&self) -> usize {
        self.lists.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn identities(&self) -> Vec<u32> {
        self.lists[0].iter().map(|s| s.identity_id).collect()
    }
}

fn assemble<'a>(ds: &'a Dataset, split: Split, picks: &[(u32, usize)]) -> Result<IdentityBatch<'a>> {
    let domains = ds.manifest.config.domains_for(split);
    let lists = domains
        .iter()
        .map(|&d| {
            picks
                .iter()
                .map(|&(id, f)| {
                    ds.lookup(split, id, f, d)
                        .map(|i| &ds.samples[i])
                        .ok_or_else(|| Error::Consistency(format!("{split} identity {id} frame {f} lacks domain {d}")))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(IdentityBatch { domains, lists })
}

/// Draw `batch_identities` distinct identities and one aligned frame each.
pub fn sample_identity_batch<'a>(
    ds: &'a Dataset,
    split: Split,
    batch_identities: usize,
    rng: &mut rng::Rng,
) -> Result<IdentityBatch<'a>> {
    if batch_identities < 2 {
        return Err(Error::Argument(format!("batch needs at least 2 identities, got {batch_identities}")));
    }
    let ids = ds.identities(split);
    if batch_identities > ids.len() {
        return Err(Error::Argument(format!(
            "batch of {batch_identities} identities exceeds the {} available in {split}",
            ids.len()
        )));
    }
    let chosen: Vec<u32> = ids.choose_multiple(rng, batch_identities).copied().collect();
    let picks: Vec<(u32, usize)> =
        chosen.into_iter().map(|id| (id, rng.random_range(0..ds.frame_count(split, id)))).collect();
    assemble(ds, split, &picks)
}

/// One epoch: a seeded permutation of identities cut into batches of
/// `batch_identities`; a trailing remainder is kept only if it has at least 2.
pub fn epoch_batches(ds: &Dataset, split: Split, batch_identities: usize, seed: u64, epoch: u64) -> Result<Vec<IdentityBatch<'_>>> {
    if batch_identities < 2 {
        return Err(Error::Argument(format!("batch needs at least 2 identities, got {batch_identities}")));
    }
    let mut ids = ds.identities(split);
    if batch_identities > ids.len() {
        return Err(Error::Argument(format!(
            "batch of {batch_identities} identities exceeds the {} available in {split}",
            ids.len()
        )));
    }
    let mut r = rng::stream(seed, "epoch-order", epoch);
    ids.shuffle(&mut r);
    ids.chunks(batch_identities)
        .filter(|c| c.len() >= 2)
        .map(|c| {
            let picks: Vec<(u32, usize)> =
                c.iter().map(|&id| (id, r.random_range(0..ds.frame_count(split, id)))).collect();
            assemble(ds, split, &picks)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetConfig;

    fn ds(identities: usize, m: u8) -> Dataset {
        Dataset::generate(&DatasetConfig { identities, images_per_identity: 2, m, hold_out: None, seed: 5, ..Default::default() })
            .unwrap()
    }

    #[test]
    fn batch_is_aligned_across_domains() {
        let d = ds(10, 2);
        let b = sample_identity_batch(&d, Split::Train, 2, &mut rng::stream(1, "t", 0)).unwrap();
        assert_eq!(b.lists.len(), 3);
        assert_eq!(b.domains, vec![0, 1, 2]);
        let order = b.identities();
        for (k, list) in b.lists.iter().enumerate() {
            assert_eq!(list.len(), 2);
            assert_eq!(list.iter().map(|s| s.identity_id).collect::<Vec<_>>(), order);
            assert!(list.iter().all(|s| s.domain == b.domains[k]));
            let frames: Vec<u32> = list.iter().map(|s| s.frame).collect();
            assert_eq!(frames, b.lists[0].iter().map(|s| s.frame).collect::<Vec<_>>());
        }
        assert_ne!(order[0], order[1]);
    }

    #[test]
    fn batch_preconditions() {
        let d = ds(10, 2);
        let mut r = rng::stream(0, "t", 0);
        assert!(matches!(sample_identity_batch(&d, Split::Train, 1, &mut r), Err(Error::Argument(_))));
        assert!(matches!(sample_identity_batch(&d, Split::Train, 7, &mut r), Err(Error::Argument(_))));
    }

    #[test]
    fn different_rng_states_give_different_subsets() {
        // 40 train identities = 10x a batch of 4.
        let d = ds(67, 2);
        assert!(d.identities(Split::Train).len() >= 40);
        let mut r = rng::stream(9, "t", 0);
        let first = {
            let mut v = sample_identity_batch(&d, Split::Train, 4, &mut r).unwrap().identities();
            v.sort();
            v
        };
        let identical = (0..100)
            .filter(|_| {
                let mut v = sample_identity_batch(&d, Split::Train, 4, &mut r).unwrap().identities();
                v.sort();
                v == first
            })
            .count();
        assert!(identical < 5, "{identical} repeated subsets");
    }

    #[test]
    fn epoch_covers_each_identity_once() {
        let d = ds(20, 3);
        let batches = epoch_batches(&d, Split::Train, 4, 2, 0).unwrap();
        let mut seen: Vec<u32> = batches.iter().flat_map(|b| b.identities()).collect();
        seen.sort();
        assert_eq!(seen, d.identities(Split::Train));
        let again = epoch_batches(&d, Split::Train, 4, 2, 0).unwrap();
        assert_eq!(batches.iter().map(|b| b.identities()).collect::<Vec<_>>(), again.iter().map(|b| b.identities()).collect::<Vec<_>>());
    }
}
