//! Interaction logs, item catalog, leave-one-out splits and item-to-item
//! co-occurrence mining.

mod synth;

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

pub use synth::{generate_synthetic, SynthConfig, SyntheticData};

pub const DEFAULT_CATEGORY_DELIMITER: &str = ">";

/// Index of an item inside a [`Catalog`] (catalog order is ascending item id).
pub type ItemIdx = usize;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user_id: String,
    pub item_id: String,
    pub ts: i64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    pub title: String,
    pub category: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Item {
    pub item_id: String,
    pub title: String,
    /// Level 1 is the coarsest category.
    pub category_path: Vec<String>,
    pub extra_metadata: BTreeMap<String, String>,
}

impl Item {
    pub fn from_record(rec: ItemRecord, delimiter: &str) -> Self {
        let category_path = rec
            .category
            .split(delimiter)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect();
        Self {
            item_id: rec.item_id,
            title: rec.title,
            category_path,
            extra_metadata: rec.meta,
        }
    }

    pub fn to_record(&self, delimiter: &str) -> ItemRecord {
        ItemRecord {
            item_id: self.item_id.clone(),
            title: self.title.clone(),
            category: self.category_path.join(&format!(" {delimiter} ")),
            meta: self.extra_metadata.clone(),
        }
    }

    /// Title followed by the category path, the text the embedder sees.
    pub fn text(&self) -> String {
        let mut s = self.title.clone();
        for c in &self.category_path {
            s.push(' ');
            s.push_str(c);
        }
        s
    }

    pub fn category_at(&self, level: usize) -> Option<&str> {
        level
            .checked_sub(1)
            .and_then(|l| self.category_path.get(l))
            .map(String::as_str)
    }
}

/// Items sorted by id with a reverse lookup.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Catalog {
    items: Vec<Item>,
    index: HashMap<String, ItemIdx>,
}

impl Catalog {
    pub fn new(mut items: Vec<Item>) -> Result<Self> {
        items.sort_by(|a, b| a.item_id.cmp(&b.item_id));
        let mut index = HashMap::with_capacity(items.len());
        for (i, it) in items.iter().enumerate() {
            if index.insert(it.item_id.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate item_id {}", it.item_id)));
            }
        }
        Ok(Self { items, index })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn get(&self, idx: ItemIdx) -> &Item {
        &self.items[idx]
    }

    pub fn idx(&self, item_id: &str) -> Option<ItemIdx> {
        self.index.get(item_id).copied()
    }

    pub fn id(&self, idx: ItemIdx) -> &str {
        &self.items[idx].item_id
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionSequence {
    pub user_id: String,
    /// Chronological; the last element is the test target, the second-last the
    /// validation target.
    pub items: Vec<ItemIdx>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub catalog: Catalog,
    /// Sorted by user id.
    pub sequences: Vec<InteractionSequence>,
}

#[derive(Clone, Debug)]
pub struct IngestOptions {
    pub min_interactions: usize,
    pub category_delimiter: String,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            min_interactions: 3,
            category_delimiter: DEFAULT_CATEGORY_DELIMITER.to_string(),
        }
    }
}

/// Reads both streams, orders each user's interactions by timestamp (ties keep
/// input order) and applies iterative min-interaction filtering to a fixed point.
pub fn ingest(interactions: impl BufRead, items: impl BufRead, opts: &IngestOptions) -> Result<Corpus> {
    let interactions: Vec<InteractionRecord> = jsonl::read(interactions, "interactions")?;
    let item_records: Vec<ItemRecord> = jsonl::read(items, "items")?;
    ingest_records(interactions, item_records, opts)
}

pub fn ingest_records(
    interactions: Vec<InteractionRecord>,
    item_records: Vec<ItemRecord>,
    opts: &IngestOptions,
) -> Result<Corpus> {
    if opts.min_interactions == 0 {
        return Err(Error::invalid("min_interactions must be at least 1"));
    }
    let mut meta: BTreeMap<String, Item> = BTreeMap::new();
    for (line, rec) in item_records.into_iter().enumerate() {
        if rec.item_id.is_empty() {
            return Err(Error::MalformedRecord {
                source_name: "items".into(),
                line: line + 1,
                reason: "empty item_id".into(),
            });
        }
        if meta.contains_key(&rec.item_id) {
            return Err(Error::MalformedRecord {
                source_name: "items".into(),
                line: line + 1,
                reason: format!("duplicate item_id {}", rec.item_id),
            });
        }
        let item = Item::from_record(rec, &opts.category_delimiter);
        meta.insert(item.item_id.clone(), item);
    }

    // user -> [(ts, input order, item)]
    let mut per_user: BTreeMap<String, Vec<(i64, usize, String)>> = BTreeMap::new();
    for (line, rec) in interactions.into_iter().enumerate() {
        if !meta.contains_key(&rec.item_id) {
            return Err(Error::MalformedRecord {
                source_name: "interactions".into(),
                line: line + 1,
                reason: format!("item {} has no metadata record", rec.item_id),
            });
        }
        per_user
            .entry(rec.user_id)
            .or_default()
            .push((rec.ts, line, rec.item_id));
    }
    let mut users: Vec<(String, Vec<String>)> = per_user
        .into_iter()
        .map(|(u, mut evs)| {
            evs.sort_by_key(|(ts, order, _)| (*ts, *order));
            (u, evs.into_iter().map(|(_, _, it)| it).collect())
        })
        .collect();

    filter_to_fixed_point(&mut users, opts.min_interactions);
    if users.is_empty() {
        return Err(Error::EmptyCorpus {
            min_interactions: opts.min_interactions,
        });
    }

    let mut surviving: BTreeMap<&str, ()> = BTreeMap::new();
    for (_, seq) in &users {
        for it in seq {
            surviving.insert(it.as_str(), ());
        }
    }
    let catalog = Catalog::new(surviving.keys().map(|id| meta[*id].clone()).collect())?;
    let sequences = users
        .iter()
        .map(|(u, seq)| InteractionSequence {
            user_id: u.clone(),
            items: seq
                .iter()
                .map(|it| catalog.idx(it).expect("surviving item in catalog"))
                .collect(),
        })
        .collect();
    Ok(Corpus { catalog, sequences })
}

/// Removes users and items with fewer than `min` interactions until nothing changes.
fn filter_to_fixed_point(users: &mut Vec<(String, Vec<String>)>, min: usize) {
    loop {
        let mut item_counts: HashMap<&str, usize> = HashMap::new();
        for (_, seq) in users.iter() {
            for it in seq {
                *item_counts.entry(it.as_str()).or_default() += 1;
            }
        }
        let rare: std::collections::HashSet<String> = item_counts
            .iter()
            .filter(|(_, &c)| c < min)
            .map(|(k, _)| k.to_string())
            .collect();
        let before: usize = users.iter().map(|(_, s)| s.len()).sum::<usize>() + users.len();
        for (_, seq) in users.iter_mut() {
            seq.retain(|it| !rare.contains(it));
        }
        users.retain(|(_, seq)| seq.len() >= min && !seq.is_empty());
        let after: usize = users.iter().map(|(_, s)| s.len()).sum::<usize>() + users.len();
        if after == before {
            break;
        }
    }
}

impl Corpus {
    /// Streams back out in the ingest input formats (ascending ids, ts = position).
    pub fn to_records(&self, delimiter: &str) -> (Vec<InteractionRecord>, Vec<ItemRecord>) {
        let mut inter = Vec::new();
        for s in &self.sequences {
            for (pos, &it) in s.items.iter().enumerate() {
                inter.push(InteractionRecord {
                    user_id: s.user_id.clone(),
                    item_id: self.catalog.id(it).to_string(),
                    ts: pos as i64,
                });
            }
        }
        let items = self.catalog.items().iter().map(|i| i.to_record(delimiter)).collect();
        (inter, items)
    }
}

/// One prediction problem: `history -> target`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example<'a> {
    pub user: usize,
    pub history: &'a [ItemIdx],
    pub target: ItemIdx,
}

/// Leave-one-out view over a corpus.
///
/// For a sequence of length `n`, the test target is position `n-1`, the
/// validation target position `n-2`, and training targets are positions
/// `1..=n-3`, each predicted from everything before it.
#[derive(Clone, Debug)]
pub struct SplitCorpus {
    pub corpus: Corpus,
}

pub fn split_leave_one_out(corpus: Corpus) -> Result<SplitCorpus> {
    for s in &corpus.sequences {
        if s.items.len() < 3 {
            return Err(Error::SequenceTooShort {
                user_id: s.user_id.clone(),
                len: s.items.len(),
            });
        }
    }
    Ok(SplitCorpus { corpus })
}

impl SplitCorpus {
    pub fn catalog(&self) -> &Catalog {
        &self.corpus.catalog
    }

    pub fn num_users(&self) -> usize {
        self.corpus.sequences.len()
    }

    pub fn user_id(&self, user: usize) -> &str {
        &self.corpus.sequences[user].user_id
    }

    pub fn sequence(&self, user: usize) -> &[ItemIdx] {
        &self.corpus.sequences[user].items
    }

    /// Items strictly before the validation target.
    pub fn training_sequence(&self, user: usize) -> &[ItemIdx] {
        let s = self.sequence(user);
        &s[..s.len() - 2]
    }

    pub fn training_sequences(&self) -> impl Iterator<Item = &[ItemIdx]> {
        (0..self.num_users()).map(|u| self.training_sequence(u))
    }

    pub fn train_examples(&self, user: usize) -> impl Iterator<Item = Example<'_>> {
        let s = self.training_sequence(user);
        (1..s.len()).map(move |t| Example {
            user,
            history: &s[..t],
            target: s[t],
        })
    }

    /// The last training example of a user, if the user has one.
    pub fn last_train_example(&self, user: usize) -> Option<Example<'_>> {
        let s = self.training_sequence(user);
        (s.len() >= 2).then(|| Example {
            user,
            history: &s[..s.len() - 1],
            target: s[s.len() - 1],
        })
    }

    pub fn valid_example(&self, user: usize) -> Example<'_> {
        let s = self.sequence(user);
        Example {
            user,
            history: &s[..s.len() - 2],
            target: s[s.len() - 2],
        }
    }

    pub fn test_example(&self, user: usize) -> Example<'_> {
        let s = self.sequence(user);
        Example {
            user,
            history: &s[..s.len() - 1],
            target: s[s.len() - 1],
        }
    }

    pub fn valid_examples(&self) -> impl Iterator<Item = Example<'_>> {
        (0..self.num_users()).map(|u| self.valid_example(u))
    }

    pub fn test_examples(&self) -> impl Iterator<Item = Example<'_>> {
        (0..self.num_users()).map(|u| self.test_example(u))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct I2IPair {
    pub source: ItemIdx,
    pub target: ItemIdx,
    pub cooccurrence_count: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct I2IRecord {
    pub src: String,
    pub dst: String,
    pub count: u32,
}

pub const DEFAULT_I2I_WINDOW: usize = 3;

/// Counts forward co-occurrences `(i, j)` with `j` at most `window` positions
/// after `i`. Pairs below `min_count` are dropped; output is sorted by count
/// descending, then by source and target id.
pub fn extract_i2i<'a>(
    sequences: impl IntoIterator<Item = &'a [ItemIdx]>,
    catalog: &Catalog,
    window: usize,
    min_count: u32,
) -> Result<Vec<I2IPair>> {
    if window == 0 {
        return Err(Error::invalid("co-occurrence window must be at least 1"));
    }
    let mut counts: HashMap<(ItemIdx, ItemIdx), u32> = HashMap::new();
    for seq in sequences {
        for (p, &i) in seq.iter().enumerate() {
            for &j in seq.iter().skip(p + 1).take(window) {
                if i != j {
                    *counts.entry((i, j)).or_default() += 1;
                }
            }
        }
    }
    let mut pairs: Vec<I2IPair> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_count)
        .map(|((s, t), c)| I2IPair {
            source: s,
            target: t,
            cooccurrence_count: c,
        })
        .collect();
    pairs.sort_by(|a, b| {
        b.cooccurrence_count
            .cmp(&a.cooccurrence_count)
            .then_with(|| catalog.id(a.source).cmp(catalog.id(b.source)))
            .then_with(|| catalog.id(a.target).cmp(catalog.id(b.target)))
    });
    Ok(pairs)
}

impl I2IPair {
    pub fn to_record(&self, catalog: &Catalog) -> I2IRecord {
        I2IRecord {
            src: catalog.id(self.source).to_string(),
            dst: catalog.id(self.target).to_string(),
            count: self.cooccurrence_count,
        }
    }

    pub fn from_record(rec: &I2IRecord, catalog: &Catalog) -> Result<Self> {
        let idx = |id: &str| catalog.idx(id).ok_or_else(|| Error::UnknownItem(id.to_string()));
        Ok(Self {
            source: idx(&rec.src)?,
            target: idx(&rec.dst)?,
            cooccurrence_count: rec.count,
        })
    }
}
