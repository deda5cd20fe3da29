//! Loading artifacts back into models, and the frozen tool services the
//! planner routes between.

use std::collections::BTreeSet;

use anyhow::{Context, Result};
use sidrec::corpus::{ingest_records, Catalog, ItemIdx, SplitCorpus};
use sidrec::decoder::{recommend, BeamConfig, CandidateRecord, SidTrie};
use sidrec::nn::Checkpoint;
use sidrec::planner::{planner_prompt, Tools, MAX_PLAN_TOKENS};
use sidrec::quantizer::{CodebookFile, SidMap, SidRecord};
use sidrec::ranker::{rank_candidates, RankerModel};
use sidrec::seqmodel::vocab::words;
use sidrec::seqmodel::{history_window, SequenceModel, TokenId, VocabSpec, Vocabulary};
use sidrec::slowpath::{i2i_instruction, ThinkAndRec};
use sidrec::{corpus, jsonl};

use crate::config::PipelineConfig;
use crate::workspace::{read_json, Workspace};

pub fn load_split(ws: &Workspace, cfg: &PipelineConfig) -> Result<SplitCorpus> {
    let inter = jsonl::read_file(&ws.path("corpus_interactions.jsonl"))?;
    let items = jsonl::read_file(&ws.path("corpus_items.jsonl"))?;
    let opts = corpus::IngestOptions {
        min_interactions: cfg.ingest.min_interactions,
        category_delimiter: cfg.ingest.category_delimiter.clone(),
    };
    Ok(corpus::split_leave_one_out(ingest_records(inter, items, &opts)?)?)
}

pub fn load_catalog(ws: &Workspace, cfg: &PipelineConfig) -> Result<Catalog> {
    let records: Vec<corpus::ItemRecord> = jsonl::read_file(&ws.path("corpus_items.jsonl"))?;
    let items = records
        .into_iter()
        .map(|r| corpus::Item::from_record(r, &cfg.ingest.category_delimiter))
        .collect();
    Ok(Catalog::new(items)?)
}

pub fn load_vocab(ws: &Workspace) -> Result<Vocabulary> {
    let spec: VocabSpec = read_json(&ws.path("vocab.json"))?;
    Ok(Vocabulary::new(spec)?)
}

pub fn load_sid_map(ws: &Workspace, catalog: &Catalog) -> Result<SidMap> {
    let cb: CodebookFile = read_json(&ws.path("codebook.json"))?;
    let records: Vec<SidRecord> = jsonl::read_file(&ws.path("sid_map.jsonl"))?;
    Ok(SidMap::from_records(
        &records,
        catalog,
        cb.n_layers,
        cb.codes_per_layer,
    )?)
}

/// Words of every item's text plus the teacher prompt's fixed wording.
pub fn vocab_words(catalog: &Catalog) -> BTreeSet<String> {
    let mut set: BTreeSet<String> = words(&i2i_instruction("", "")).collect();
    for item in catalog.items() {
        set.extend(words(&item.text()));
    }
    set
}

pub fn load_seqmodel(ws: &Workspace, artifact: &str, vocab: &Vocabulary) -> Result<SequenceModel> {
    let ckpt = Checkpoint::load(&ws.path(artifact)).with_context(|| format!("loading {artifact}"))?;
    SequenceModel::from_checkpoint(&ckpt, vocab).with_context(|| format!("loading {artifact}"))
}

pub fn load_ranker(ws: &Workspace, catalog: &Catalog) -> Result<RankerModel> {
    let ckpt = Checkpoint::load(&ws.path("ranker.ckpt")).context("loading ranker.ckpt")?;
    RankerModel::from_checkpoint(&ckpt, catalog).context("loading ranker.ckpt")
}

/// Candidate lists and scores per user, in user order.
pub fn load_candidates(ws: &Workspace, artifact: &str, split: &SplitCorpus) -> Result<Vec<(Vec<ItemIdx>, Vec<f64>)>> {
    let records: Vec<CandidateRecord> = jsonl::read_file(&ws.path(artifact))?;
    if records.len() != split.num_users() {
        anyhow::bail!(
            "{artifact} has {} users but the corpus has {}",
            records.len(),
            split.num_users()
        );
    }
    records
        .iter()
        .enumerate()
        .map(|(u, r)| {
            if r.user_id != split.user_id(u) {
                anyhow::bail!(
                    "{artifact}: line {} is user {:?}, expected {:?}",
                    u + 1,
                    r.user_id,
                    split.user_id(u)
                );
            }
            let c = r.to_candidates(split.catalog())?;
            Ok((c.iter().map(|c| c.item).collect(), c.iter().map(|c| c.score).collect()))
        })
        .collect()
}

/// The three frozen services over one episode set. `histories[u]` is the
/// context of episode `u`; `fast_lists[u]` its precomputed fast candidates.
pub struct ModelTools<'a> {
    pub histories: Vec<&'a [ItemIdx]>,
    pub fast_lists: Vec<&'a [ItemIdx]>,
    pub fast: &'a SequenceModel,
    pub ranker: &'a RankerModel,
    pub slow: &'a SequenceModel,
    pub sid_map: &'a SidMap,
    pub vocab: &'a Vocabulary,
    pub trie: &'a SidTrie,
    pub beam: BeamConfig,
    pub max_think: usize,
}

impl Tools for ModelTools<'_> {
    /// Prefix of the configured-width beam; wider requests rerun the beam.
    fn fast_rec(&self, user: usize, k: usize) -> sidrec::Result<Vec<ItemIdx>> {
        let pre = self.fast_lists[user];
        if k <= pre.len() || pre.len() < self.beam.width {
            return Ok(pre.iter().copied().take(k).collect());
        }
        let cfg = BeamConfig {
            width: k,
            ..self.beam.clone()
        };
        let c = recommend(
            self.fast,
            self.histories[user],
            self.sid_map,
            self.vocab,
            self.trie,
            &cfg,
        )?;
        Ok(c.into_iter().map(|c| c.item).take(k).collect())
    }

    fn rank_candidates(&self, user: usize, candidates: &[ItemIdx], n: usize) -> sidrec::Result<Vec<ItemIdx>> {
        Ok(rank_candidates(self.ranker, self.histories[user], candidates, n)
            .into_iter()
            .map(|(i, _)| i)
            .collect())
    }

    fn think_and_rec(&self, user: usize, j: usize) -> sidrec::Result<Vec<ItemIdx>> {
        let t = ThinkAndRec {
            model: self.slow,
            vocab: self.vocab,
            sid_map: self.sid_map,
            trie: self.trie,
            max_think: self.max_think,
        };
        let cfg = BeamConfig {
            width: j,
            ..self.beam.clone()
        };
        Ok(t.run(self.histories[user], &cfg)?
            .candidates
            .into_iter()
            .map(|c| c.item)
            .collect())
    }
}

/// Every frozen model the routing stages call into.
pub struct Frozen {
    pub vocab: Vocabulary,
    pub sid_map: SidMap,
    pub trie: SidTrie,
    pub fast: SequenceModel,
    pub ranker: RankerModel,
    pub slow: SequenceModel,
}

/// Inputs [`Frozen::load`] reads, besides the corpus.
pub const FROZEN_INPUTS: [&str; 6] = [
    "codebook.json",
    "sid_map.jsonl",
    "vocab.json",
    "fast.ckpt",
    "ranker.ckpt",
    "slow.ckpt",
];

impl Frozen {
    pub fn load(ws: &Workspace, catalog: &Catalog) -> Result<Self> {
        let vocab = load_vocab(ws)?;
        let sid_map = load_sid_map(ws, catalog)?;
        let trie = SidTrie::build(&sid_map, &vocab)?;
        let fast = load_seqmodel(ws, "fast.ckpt", &vocab)?;
        let slow = load_seqmodel(ws, "slow.ckpt", &vocab)?;
        let ranker = load_ranker(ws, catalog)?;
        Ok(Self {
            vocab,
            sid_map,
            trie,
            fast,
            ranker,
            slow,
        })
    }

    pub fn tools<'a>(
        &'a self,
        histories: Vec<&'a [ItemIdx]>,
        fast_lists: Vec<&'a [ItemIdx]>,
        cfg: &PipelineConfig,
    ) -> ModelTools<'a> {
        ModelTools {
            histories,
            fast_lists,
            fast: &self.fast,
            ranker: &self.ranker,
            slow: &self.slow,
            sid_map: &self.sid_map,
            vocab: &self.vocab,
            trie: &self.trie,
            beam: cfg.decoder.clone(),
            max_think: cfg.slow.max_think,
        }
    }
}

/// Planner prompts: the newest whole history items that leave room for a plan.
pub fn planner_prompts(
    histories: &[&[ItemIdx]],
    sid_map: &SidMap,
    vocab: &Vocabulary,
    max_len: usize,
) -> Vec<Vec<TokenId>> {
    let budget = max_len.saturating_sub(MAX_PLAN_TOKENS + 1);
    histories
        .iter()
        .map(|h| planner_prompt(&history_window(h, sid_map, vocab, budget), vocab, max_len))
        .collect()
}
