//! Synthetic catalogs and logs with planted user preferences.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{index, SliceRandom};
use rand::Rng as _;

use super::{Catalog, ConversationRecord, Dataset, InteractionLog, UserHistory, Vocab};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub users: usize,
    pub items: usize,
    pub attributes: usize,
    pub attrs_per_item: usize,
    pub sessions_per_user: usize,
    /// Interactions preceding the first conversation of each user.
    pub history_len: usize,
    /// Size of each user's hidden preferred attribute set.
    pub latent_size: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            users: 200,
            items: 500,
            attributes: 40,
            attrs_per_item: 4,
            sessions_per_user: 5,
            history_len: 20,
            latent_size: 6,
        }
    }
}

impl SyntheticConfig {
    fn check(&self) -> Result<()> {
        let counts = [
            self.users,
            self.items,
            self.attributes,
            self.attrs_per_item,
            self.sessions_per_user,
            self.latent_size,
        ];
        if counts.contains(&0) {
            return Err(Error::Config("synthetic counts must be at least 1".into()));
        }
        if self.attrs_per_item > self.attributes {
            return Err(Error::Config(format!(
                "attrs_per_item {} exceeds the number of attributes {}",
                self.attrs_per_item, self.attributes
            )));
        }
        if self.latent_size > self.attributes {
            return Err(Error::Config(format!(
                "latent_size {} exceeds the number of attributes {}",
                self.latent_size, self.attributes
            )));
        }
        if self.history_len + self.sessions_per_user > self.items {
            return Err(Error::Config(format!(
                "{} items cannot fill a log of {} distinct interactions",
                self.items,
                self.history_len + self.sessions_per_user
            )));
        }
        Ok(())
    }
}

fn random_subset(rng: &mut rng::Rng, n: usize, k: usize) -> Vec<u32> {
    let mut v: Vec<u32> = index::sample(rng, n, k)
        .into_iter()
        .map(|a| a as u32 + 1)
        .collect();
    v.sort_unstable();
    v
}

/// Builds a dataset where each user draws distinct items with probability
/// proportional to the overlap between the item's attributes and the user's
/// latent set. The last `sessions_per_user` interactions of every user become
/// conversation records whose attribute sequence is a shuffled proper subset
/// of the target's attributes.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    generate_with_latent(cfg).map(|(d, _)| d)
}

fn generate_with_latent(cfg: &SyntheticConfig) -> Result<(Dataset, Vec<Vec<u32>>)> {
    cfg.check()?;
    let mut r = rng::seeded(cfg.seed);
    let mut vocab = Vocab::default();
    for a in 0..cfg.attributes {
        vocab.attributes.intern(&format!("a{a}"));
    }
    let item_attrs: Vec<Vec<u32>> = (0..cfg.items)
        .map(|_| random_subset(&mut r, cfg.attributes, cfg.attrs_per_item))
        .collect();
    for i in 0..cfg.items {
        vocab.items.intern(&format!("i{i}"));
    }
    let catalog = Catalog::new(item_attrs, cfg.attributes)?;

    let total = cfg.history_len + cfg.sessions_per_user;
    let mut log = InteractionLog::default();
    let mut records = Vec::new();
    let mut latents = Vec::with_capacity(cfg.users);
    for u in 0..cfg.users {
        vocab.users.intern(&format!("u{u}"));
        let latent = random_subset(&mut r, cfg.attributes, cfg.latent_size);
        let mut weights: Vec<f64> = catalog
            .items()
            .map(|i| {
                catalog
                    .item_attributes(i)
                    .iter()
                    .filter(|a| latent.binary_search(a).is_ok())
                    .count() as f64
            })
            .collect();
        let mut taken = vec![false; cfg.items];
        let mut items = Vec::with_capacity(total);
        for _ in 0..total {
            let k = match WeightedIndex::new(&weights) {
                Ok(dist) => dist.sample(&mut r),
                Err(_) => {
                    let open: Vec<usize> = (0..cfg.items).filter(|&k| !taken[k]).collect();
                    open[r.random_range(0..open.len())]
                }
            };
            taken[k] = true;
            weights[k] = 0.0;
            items.push(k as u32 + super::FIRST_ITEM);
        }
        for (s, &target) in items[cfg.history_len..].iter().enumerate() {
            let attrs = catalog.item_attributes(target);
            let size = if attrs.len() == 1 {
                1
            } else {
                r.random_range(1..attrs.len())
            };
            let mut seq: Vec<u32> = index::sample(&mut r, attrs.len(), size)
                .into_iter()
                .map(|k| attrs[k])
                .collect();
            seq.shuffle(&mut r);
            records.push(ConversationRecord {
                user: u as u32,
                attributes: seq,
                target,
                history_cutoff: cfg.history_len + s,
            });
        }
        log.users.push(UserHistory {
            timestamps: (0..total as i64).collect(),
            items,
        });
        latents.push(latent);
    }
    Ok((
        Dataset {
            catalog,
            log,
            records,
            vocab,
        },
        latents,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            seed: 7,
            users: 30,
            items: 60,
            attributes: 12,
            history_len: 8,
            sessions_per_user: 3,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        assert_eq!(
            generate_synthetic(&small()).unwrap(),
            generate_synthetic(&small()).unwrap()
        );
        let other = SyntheticConfig { seed: 8, ..small() };
        assert_ne!(
            generate_synthetic(&small()).unwrap(),
            generate_synthetic(&other).unwrap()
        );
    }

    #[test]
    fn sessions_per_user_records_each() {
        let d = generate_synthetic(&small()).unwrap();
        d.validate().unwrap();
        assert_eq!(d.records.len(), 90);
        for u in 0..30 {
            assert_eq!(d.records.iter().filter(|r| r.user == u).count(), 3);
        }
        for r in &d.records {
            let attrs = d.catalog.item_attributes(r.target);
            assert!(r.attributes.iter().all(|a| attrs.contains(a)));
            assert!(r.attributes.len() < attrs.len());
            assert_eq!(
                d.log.users[r.user as usize].items[r.history_cutoff],
                r.target
            );
        }
    }

    #[test]
    fn logs_hold_distinct_items() {
        let d = generate_synthetic(&small()).unwrap();
        for h in &d.log.users {
            let mut v = h.items.clone();
            v.sort_unstable();
            v.dedup();
            assert_eq!(v.len(), h.items.len());
        }
    }

    #[test]
    fn rejects_impossible_configs() {
        assert!(generate_synthetic(&SyntheticConfig {
            attrs_per_item: 13,
            ..small()
        })
        .is_err());
        assert!(generate_synthetic(&SyntheticConfig {
            history_len: 60,
            ..small()
        })
        .is_err());
        assert!(generate_synthetic(&SyntheticConfig {
            users: 0,
            ..small()
        })
        .is_err());
    }

    #[test]
    fn drawn_items_overlap_latent_set_more_than_uniform() {
        let cfg = SyntheticConfig {
            users: 1000,
            history_len: 0,
            sessions_per_user: 1,
            ..small()
        };
        let (d, latents) = generate_with_latent(&cfg).unwrap();
        let mut drawn = 0.0;
        let mut uniform = 0.0;
        for (h, latent) in d.log.users.iter().zip(&latents) {
            let overlap = |i: u32| {
                d.catalog
                    .item_attributes(i)
                    .iter()
                    .filter(|a| latent.contains(a))
                    .count() as f64
            };
            drawn += overlap(h.items[0]);
            uniform += d.catalog.items().map(overlap).sum::<f64>() / cfg.items as f64;
        }
        let n = cfg.users as f64;
        assert!(
            drawn / n > uniform / n + 0.2,
            "drawn {} vs uniform {}",
            drawn / n,
            uniform / n
        );
    }
}
