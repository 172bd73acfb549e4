//! Catalog, interaction logs, conversation records and the leave-one-out
//! split.
//!
//! Internal ids are dense. Items live in `[2, |I| + 1]` because item id 0 is
//! padding and 1 is the mask token; attributes live in `[1, |A|]` with 0 as
//! padding. Users are indexed from 0.

mod io;
mod synthetic;

use std::collections::HashMap;

use indexmap::IndexSet;

use crate::error::{Error, Result};

pub use io::{
    read_catalog, read_conversations, read_id_map, read_interactions, write_catalog,
    write_conversations, write_id_map, write_interactions, CATALOG_FILE, CONVERSATIONS_FILE,
    INTERACTIONS_FILE,
};
pub use synthetic::{generate_synthetic, SyntheticConfig};

pub const PAD: u32 = 0;
pub const ITEM_MASK: u32 = 1;
pub const FIRST_ITEM: u32 = 2;

/// Items and their attribute sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Catalog {
    /// `item_attributes[i]` holds the attributes of item `i + 2`, ascending.
    item_attributes: Vec<Vec<u32>>,
    attribute_count: usize,
    /// Items carrying each attribute; index 0 unused.
    attribute_items: Vec<Vec<u32>>,
}

impl Catalog {
    /// Builds a catalog from per-item attribute lists (item `k` of the list
    /// gets id `k + 2`). Lists are sorted; duplicates and empty sets are
    /// rejected.
    pub fn new(item_attributes: Vec<Vec<u32>>, attribute_count: usize) -> Result<Self> {
        let mut items = Vec::with_capacity(item_attributes.len());
        let mut attribute_items = vec![Vec::new(); attribute_count + 1];
        for (k, mut attrs) in item_attributes.into_iter().enumerate() {
            let id = k as u32 + FIRST_ITEM;
            if attrs.is_empty() {
                return Err(Error::EmptyAttributeSet(id.to_string()));
            }
            attrs.sort_unstable();
            let len = attrs.len();
            attrs.dedup();
            if attrs.len() != len {
                return Err(Error::Config(format!("item {id} lists an attribute twice")));
            }
            for &a in &attrs {
                if a == PAD || a as usize > attribute_count {
                    return Err(Error::InvalidId {
                        kind: "attribute",
                        id: a,
                    });
                }
                attribute_items[a as usize].push(id);
            }
            items.push(attrs);
        }
        Ok(Self {
            item_attributes: items,
            attribute_count,
            attribute_items,
        })
    }

    pub fn item_count(&self) -> usize {
        self.item_attributes.len()
    }

    pub fn attribute_count(&self) -> usize {
        self.attribute_count
    }

    /// Size of the item embedding table including PAD and MASK rows.
    pub fn item_vocab_size(&self) -> usize {
        self.item_count() + FIRST_ITEM as usize
    }

    /// Size of the attribute embedding table including the PAD row.
    pub fn attribute_vocab_size(&self) -> usize {
        self.attribute_count + 1
    }

    pub fn items(&self) -> impl Iterator<Item = u32> + Clone {
        FIRST_ITEM..FIRST_ITEM + self.item_count() as u32
    }

    pub fn attributes(&self) -> impl Iterator<Item = u32> + Clone {
        1..=self.attribute_count as u32
    }

    pub fn is_item(&self, id: u32) -> bool {
        id >= FIRST_ITEM && ((id - FIRST_ITEM) as usize) < self.item_count()
    }

    pub fn is_attribute(&self, id: u32) -> bool {
        id >= 1 && id as usize <= self.attribute_count
    }

    /// Attribute set of `item`, ascending.
    ///
    /// # Panics
    /// If `item` is not a catalog item.
    pub fn item_attributes(&self, item: u32) -> &[u32] {
        assert!(self.is_item(item), "item id {item} outside the catalog");
        &self.item_attributes[(item - FIRST_ITEM) as usize]
    }

    /// Items whose attribute set contains `attr`, ascending.
    pub fn items_with_attribute(&self, attr: u32) -> &[u32] {
        &self.attribute_items[attr as usize]
    }

    pub fn item_has_attribute(&self, item: u32, attr: u32) -> bool {
        self.item_attributes(item).binary_search(&attr).is_ok()
    }

    pub fn check_item(&self, id: u32) -> Result<()> {
        if self.is_item(id) {
            Ok(())
        } else {
            Err(Error::InvalidId { kind: "item", id })
        }
    }
}

/// One user's chronologically ordered interactions.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UserHistory {
    pub items: Vec<u32>,
    pub timestamps: Vec<i64>,
}

impl UserHistory {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Interaction sequences indexed by internal user id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InteractionLog {
    pub users: Vec<UserHistory>,
}

impl InteractionLog {
    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn interaction_count(&self) -> usize {
        self.users.iter().map(UserHistory::len).sum()
    }

    pub fn history(&self, user: u32) -> &[u32] {
        self.users
            .get(user as usize)
            .map(|h| h.items.as_slice())
            .unwrap_or(&[])
    }
}

/// One conversation: the confirmed attribute sequence, the item the user
/// was looking for, and how many log entries preceded it.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ConversationRecord {
    pub user: u32,
    pub attributes: Vec<u32>,
    pub target: u32,
    pub history_cutoff: usize,
}

impl ConversationRecord {
    pub fn validate(&self, catalog: &Catalog, log: &InteractionLog) -> Result<()> {
        if self.attributes.is_empty() {
            return Err(Error::EmptySequence);
        }
        for &a in &self.attributes {
            if !catalog.is_attribute(a) {
                return Err(Error::InvalidId {
                    kind: "attribute",
                    id: a,
                });
            }
        }
        catalog.check_item(self.target)?;
        let len = log.history(self.user).len();
        if self.history_cutoff > len {
            return Err(Error::Config(format!(
                "record for user {} has history cutoff {} beyond log length {len}",
                self.user, self.history_cutoff
            )));
        }
        Ok(())
    }

    /// Item history preceding this conversation.
    pub fn history<'a>(&self, log: &'a InteractionLog) -> &'a [u32] {
        let h = log.history(self.user);
        &h[..self.history_cutoff.min(h.len())]
    }
}

/// Raw-id ↔ internal-id mapping for one vocabulary.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdMap {
    raw: IndexSet<String>,
    offset: u32,
}

impl IdMap {
    /// Empty map whose first inserted raw id gets internal id `offset`.
    pub fn new(offset: u32) -> Self {
        Self {
            raw: IndexSet::new(),
            offset,
        }
    }

    pub fn for_items() -> Self {
        Self::new(FIRST_ITEM)
    }

    pub fn for_attributes() -> Self {
        Self::new(1)
    }

    pub fn for_users() -> Self {
        Self::new(0)
    }

    pub fn offset(&self) -> u32 {
        self.offset
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    /// Internal id of `raw`, inserting it when new.
    pub fn intern(&mut self, raw: &str) -> u32 {
        let (idx, _) = self.raw.insert_full(raw.to_string());
        idx as u32 + self.offset
    }

    pub fn get(&self, raw: &str) -> Option<u32> {
        self.raw.get_index_of(raw).map(|i| i as u32 + self.offset)
    }

    pub fn raw(&self, id: u32) -> Option<&str> {
        id.checked_sub(self.offset)
            .and_then(|i| self.raw.get_index(i as usize))
            .map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u32)> {
        self.raw
            .iter()
            .enumerate()
            .map(move |(i, r)| (r.as_str(), i as u32 + self.offset))
    }
}

/// Raw-id vocabularies for users, items and attributes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub users: IdMap,
    pub items: IdMap,
    pub attributes: IdMap,
}

impl Default for Vocab {
    fn default() -> Self {
        Self {
            users: IdMap::for_users(),
            items: IdMap::for_items(),
            attributes: IdMap::for_attributes(),
        }
    }
}

/// Everything a training or evaluation run consumes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub catalog: Catalog,
    pub log: InteractionLog,
    pub records: Vec<ConversationRecord>,
    pub vocab: Vocab,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            r.validate(&self.catalog, &self.log)?;
        }
        for h in &self.log.users {
            for &i in &h.items {
                self.catalog.check_item(i)?;
            }
        }
        Ok(())
    }
}

/// Train / validation / test partition of conversation records.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: Vec<ConversationRecord>,
    pub valid: Vec<ConversationRecord>,
    pub test: Vec<ConversationRecord>,
}

/// Groups records by user in chronological order (by `history_cutoff`,
/// ties kept in input order).
pub fn records_by_user(records: &[ConversationRecord]) -> Vec<(u32, Vec<ConversationRecord>)> {
    let mut groups: HashMap<u32, Vec<ConversationRecord>> = HashMap::new();
    for r in records {
        groups.entry(r.user).or_default().push(r.clone());
    }
    let mut out: Vec<_> = groups.into_iter().collect();
    out.sort_by_key(|(u, _)| *u);
    for (_, rs) in &mut out {
        rs.sort_by_key(|r| r.history_cutoff);
    }
    out
}

/// Last record per user is test, the one before it validation, the rest
/// training. Users with fewer than three records only contribute training.
pub fn leave_one_out_split(records: &[ConversationRecord]) -> SplitSpec {
    let mut split = SplitSpec::default();
    for (_, mut rs) in records_by_user(records) {
        if rs.len() >= 3 {
            let test = rs.pop().expect("len >= 3");
            let valid = rs.pop().expect("len >= 2");
            split.test.push(test);
            split.valid.push(valid);
        }
        split.train.extend(rs);
    }
    split
}

/// For each user, the number of leading log entries that precede every
/// held-out (validation or test) conversation. Pre-training must not look
/// past this point.
pub fn pretrain_cutoffs(log: &InteractionLog, split: &SplitSpec) -> Vec<usize> {
    let mut cut: Vec<usize> = log.users.iter().map(UserHistory::len).collect();
    for r in split.valid.iter().chain(&split.test) {
        if let Some(c) = cut.get_mut(r.user as usize) {
            *c = (*c).min(r.history_cutoff);
        }
    }
    cut
}

/// Drops items with fewer than `min_count` interactions and re-indexes the
/// remaining ones densely. Records whose target is dropped are removed;
/// history cutoffs are shifted to count only kept interactions.
pub fn filter_rare_items(data: &Dataset, min_count: usize) -> Result<Dataset> {
    if min_count <= 1 {
        return Ok(data.clone());
    }
    let mut counts = vec![0usize; data.catalog.item_vocab_size()];
    for h in &data.log.users {
        for &i in &h.items {
            counts[i as usize] += 1;
        }
    }
    let mut remap = vec![PAD; data.catalog.item_vocab_size()];
    let mut items = IdMap::for_items();
    let mut attrs = Vec::new();
    for item in data.catalog.items() {
        if counts[item as usize] >= min_count {
            let raw = data
                .vocab
                .items
                .raw(item)
                .map(str::to_string)
                .unwrap_or(item.to_string());
            remap[item as usize] = items.intern(&raw);
            attrs.push(data.catalog.item_attributes(item).to_vec());
        }
    }
    let catalog = Catalog::new(attrs, data.catalog.attribute_count())?;
    let mut kept_before: Vec<Vec<usize>> = Vec::with_capacity(data.log.users.len());
    let mut log = InteractionLog::default();
    for h in &data.log.users {
        let mut nh = UserHistory::default();
        let mut prefix = Vec::with_capacity(h.len() + 1);
        prefix.push(0);
        for (&i, &t) in h.items.iter().zip(&h.timestamps) {
            if remap[i as usize] != PAD {
                nh.items.push(remap[i as usize]);
                nh.timestamps.push(t);
            }
            prefix.push(nh.items.len());
        }
        kept_before.push(prefix);
        log.users.push(nh);
    }
    let records = data
        .records
        .iter()
        .filter(|r| remap[r.target as usize] != PAD)
        .map(|r| ConversationRecord {
            user: r.user,
            attributes: r.attributes.clone(),
            target: remap[r.target as usize],
            history_cutoff: kept_before[r.user as usize][r.history_cutoff],
        })
        .collect();
    Ok(Dataset {
        catalog,
        log,
        records,
        vocab: Vocab {
            users: data.vocab.users.clone(),
            items,
            attributes: data.vocab.attributes.clone(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(user: u32, cutoff: usize) -> ConversationRecord {
        ConversationRecord {
            user,
            attributes: vec![1],
            target: 2,
            history_cutoff: cutoff,
        }
    }

    #[test]
    fn catalog_basic_counts() {
        let c = Catalog::new(vec![vec![1], vec![1, 2], vec![2]], 2).unwrap();
        assert_eq!(c.item_count(), 3);
        assert_eq!(c.attribute_count(), 2);
        assert_eq!(c.items().collect::<Vec<_>>(), vec![2, 3, 4]);
        assert_eq!(c.items_with_attribute(2), &[3, 4]);
        assert!(!c.is_item(0) && !c.is_item(1) && !c.is_item(5));
    }

    #[test]
    fn catalog_rejects_empty_and_duplicate_sets() {
        assert!(matches!(
            Catalog::new(vec![vec![]], 2),
            Err(Error::EmptyAttributeSet(_))
        ));
        assert!(Catalog::new(vec![vec![1, 1]], 2).is_err());
        assert!(Catalog::new(vec![vec![3]], 2).is_err());
        assert!(Catalog::new(vec![vec![0]], 2).is_err());
    }

    #[test]
    fn split_four_records() {
        let rs: Vec<_> = (0..4).map(|k| rec(0, k)).collect();
        let s = leave_one_out_split(&rs);
        assert_eq!(s.train, vec![rs[0].clone(), rs[1].clone()]);
        assert_eq!(s.valid, vec![rs[2].clone()]);
        assert_eq!(s.test, vec![rs[3].clone()]);
    }

    #[test]
    fn split_degenerate_users_train_only() {
        let rs = vec![rec(0, 0), rec(0, 1), rec(1, 0)];
        let s = leave_one_out_split(&rs);
        assert_eq!(s.train.len(), 3);
        assert!(s.valid.is_empty() && s.test.is_empty());
    }

    #[test]
    fn split_orders_by_cutoff() {
        let rs = vec![rec(0, 5), rec(0, 1), rec(0, 3)];
        let s = leave_one_out_split(&rs);
        assert_eq!(s.test[0].history_cutoff, 5);
        assert_eq!(s.valid[0].history_cutoff, 3);
        assert_eq!(s.train[0].history_cutoff, 1);
    }

    #[test]
    fn pretrain_cutoff_stops_before_held_out() {
        let log = InteractionLog {
            users: vec![UserHistory {
                items: vec![2; 10],
                timestamps: (0..10).collect(),
            }],
        };
        let rs: Vec<_> = [4, 6, 8].iter().map(|&c| rec(0, c)).collect();
        let s = leave_one_out_split(&rs);
        assert_eq!(pretrain_cutoffs(&log, &s), vec![6]);
    }

    #[test]
    fn id_map_offsets() {
        let mut m = IdMap::for_items();
        assert_eq!(m.intern("x"), 2);
        assert_eq!(m.intern("y"), 3);
        assert_eq!(m.intern("x"), 2);
        assert_eq!(m.raw(3), Some("y"));
        assert_eq!(m.raw(1), None);
    }

    #[test]
    fn rare_item_filter_reindexes() {
        let catalog = Catalog::new(vec![vec![1], vec![1], vec![1]], 1).unwrap();
        let mut vocab = Vocab::default();
        for r in ["a", "b", "c"] {
            vocab.items.intern(r);
        }
        vocab.users.intern("u");
        vocab.attributes.intern("x");
        let log = InteractionLog {
            users: vec![UserHistory {
                items: vec![2, 3, 2, 4, 2],
                timestamps: (0..5).collect(),
            }],
        };
        let records = vec![
            ConversationRecord {
                user: 0,
                attributes: vec![1],
                target: 3,
                history_cutoff: 1,
            },
            ConversationRecord {
                user: 0,
                attributes: vec![1],
                target: 2,
                history_cutoff: 4,
            },
        ];
        let data = Dataset {
            catalog,
            log,
            records,
            vocab,
        };
        let f = filter_rare_items(&data, 2).unwrap();
        assert_eq!(f.catalog.item_count(), 1);
        assert_eq!(f.log.users[0].items, vec![2, 2, 2]);
        assert_eq!(f.records.len(), 1);
        assert_eq!(f.records[0].history_cutoff, 2);
        f.validate().unwrap();
    }
}
