//! Data model for multi-level goal sequences: vocabularies, dialog ingestion,
//! co-occurrence adjacency matrices, autoregressive prefix expansion, and a
//! seeded synthetic-corpus generator.
//!
//! The on-disk format is JSONL, one dialog per line:
//!
//! ```json
//! {"dialog_id": "d0", "goal_types": ["QA", "Music Rec"], "goal_entities": ["Jay Chou", "Shuo Hao Bu Ku"]}
//! ```
//!
//! with optional `goal_attributes` and `final_goal_type` / `final_goal_entity` /
//! `final_goal_attribute` fields. Final goals default to each sequence's last
//! element; re-serialization emits them only when they differ, which makes
//! generate → load → re-serialize byte-identical.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

/// Default adjacency value for goal pairs never seen in training data. Keeps
/// fusion contributions for unseen pairs three orders below seen pairs.
pub const DEFAULT_EPSILON: f64 = 1e-3;

/// Probability that the synthetic generator advances an entity deterministically
/// within its type block instead of sampling uniformly.
const ENTITY_WALK_PROB: f64 = 0.85;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("dialog {dialog_id}: goal sequences have mismatched lengths {lengths:?}")]
    LengthMismatch {
        dialog_id: String,
        lengths: Vec<usize>,
    },
    #[error("dialog {dialog_id}: goal sequence too short ({len} < 2)")]
    SequenceTooShort { dialog_id: String, len: usize },
    #[error("dialog {dialog_id}: attribute level inconsistent with the rest of the corpus")]
    InconsistentLevels { dialog_id: String },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("split fractions must sum to 1, got {0}")]
    FractionSum(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Goal granularity levels, ordered high to low.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GoalLevel {
    Type,
    Entity,
    Attribute,
}

impl GoalLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            GoalLevel::Type => "type",
            GoalLevel::Entity => "entity",
            GoalLevel::Attribute => "attribute",
        }
    }

    pub fn from_index(i: usize) -> GoalLevel {
        match i {
            0 => GoalLevel::Type,
            1 => GoalLevel::Entity,
            2 => GoalLevel::Attribute,
            _ => panic!("no goal level with index {i}"),
        }
    }
}

/// One level's goal vocabulary; ids are assigned in first-appearance order.
#[derive(Debug, Clone)]
pub struct GoalVocabulary {
    pub level: GoalLevel,
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl GoalVocabulary {
    pub fn new(level: GoalLevel) -> Self {
        GoalVocabulary {
            level,
            names: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Vocabulary rebuilt from a fixed name list (checkpoint restore).
    pub fn from_names(level: GoalLevel, names: Vec<String>) -> Self {
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        GoalVocabulary {
            level,
            names,
            index,
        }
    }

    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// One dialog's goal path across levels, with the predefined final goal.
#[derive(Debug, Clone, PartialEq)]
pub struct DialogRecord {
    pub dialog_id: String,
    pub type_seq: Vec<usize>,
    pub entity_seq: Vec<usize>,
    pub attribute_seq: Option<Vec<usize>>,
    /// Final recommendation goal id per level, aligned with level index.
    pub final_goal: Vec<usize>,
}

impl DialogRecord {
    /// Number of goal steps in the dialog.
    pub fn len(&self) -> usize {
        self.type_seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.type_seq.is_empty()
    }

    pub fn levels(&self) -> usize {
        if self.attribute_seq.is_some() {
            3
        } else {
            2
        }
    }

    pub fn seq(&self, level: usize) -> &[usize] {
        match level {
            0 => &self.type_seq,
            1 => &self.entity_seq,
            2 => self
                .attribute_seq
                .as_deref()
                .expect("dialog has no attribute level"),
            _ => panic!("no level {level}"),
        }
    }
}

/// Co-occurrence matrix between a high and a low goal level. Entries are 1.0
/// for pairs seen at the same position of some training dialog, ε otherwise.
#[derive(Debug, Clone)]
pub struct AdjacencyMatrix {
    values: Tensor,
    epsilon: f64,
}

impl AdjacencyMatrix {
    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn get(&self, high: usize, low: usize) -> f64 {
        self.values.get(high, low)
    }

    /// Rebuild from raw values (checkpoint restore); validates the 1.0/ε alphabet.
    pub fn from_values(values: Tensor, epsilon: f64) -> Result<Self, DataError> {
        check_epsilon(epsilon)?;
        for &v in values.data() {
            if v != 1.0 && v != epsilon {
                return Err(DataError::InvalidParameter(format!(
                    "adjacency entry {v} is neither 1.0 nor epsilon {epsilon}"
                )));
            }
        }
        Ok(AdjacencyMatrix { values, epsilon })
    }
}

fn check_epsilon(epsilon: f64) -> Result<(), DataError> {
    if !(epsilon > 0.0 && epsilon < 0.1) {
        return Err(DataError::InvalidParameter(format!(
            "epsilon must be in (0, 0.1), got {epsilon}"
        )));
    }
    Ok(())
}

/// Pair (high-level, low-level) co-occurrence over training dialogs.
/// Co-occurrence is position-aligned: the two goals must appear at the same
/// turn of the same dialog.
pub fn build_adjacency(
    records: &[DialogRecord],
    high_level: usize,
    low_level: usize,
    n_high: usize,
    n_low: usize,
    epsilon: f64,
) -> Result<AdjacencyMatrix, DataError> {
    check_epsilon(epsilon)?;
    let mut values = Tensor::from_vec(n_high, n_low, vec![epsilon; n_high * n_low]);
    for rec in records {
        let high = rec.seq(high_level);
        let low = rec.seq(low_level);
        for (&h, &l) in high.iter().zip(low) {
            values.data_mut()[h * n_low + l] = 1.0;
        }
    }
    Ok(AdjacencyMatrix { values, epsilon })
}

/// One autoregressive training example: a length-L prefix per level, the
/// (L+1)-th goals as targets, and the dialog's final goals.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingInstance {
    pub prefix_len: usize,
    /// Per-level prefix id sequences, each of length `prefix_len`.
    pub prefixes: Vec<Vec<usize>>,
    /// Per-level next-goal targets.
    pub targets: Vec<usize>,
    /// Per-level final recommendation goal ids.
    pub finals: Vec<usize>,
}

/// Expand each dialog of length n into n−1 instances with L = 1..n−1,
/// ordered by dialog then ascending L.
pub fn expand_instances(records: &[DialogRecord]) -> Vec<TrainingInstance> {
    let mut out = Vec::new();
    for rec in records {
        let levels = rec.levels();
        for prefix_len in 1..rec.len() {
            let mut prefixes = Vec::with_capacity(levels);
            let mut targets = Vec::with_capacity(levels);
            for level in 0..levels {
                let seq = rec.seq(level);
                prefixes.push(seq[..prefix_len].to_vec());
                targets.push(seq[prefix_len]);
            }
            out.push(TrainingInstance {
                prefix_len,
                prefixes,
                targets,
                finals: rec.final_goal.clone(),
            });
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct RawDialog {
    dialog_id: String,
    goal_types: Vec<String>,
    goal_entities: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    goal_attributes: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_goal_type: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_goal_entity: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_goal_attribute: Option<String>,
}

/// Vocabularies plus dialog records for one corpus.
#[derive(Debug, Clone)]
pub struct GoalHierarchyDataset {
    pub vocabs: Vec<GoalVocabulary>,
    pub records: Vec<DialogRecord>,
}

impl GoalHierarchyDataset {
    pub fn levels(&self) -> usize {
        self.vocabs.len()
    }

    pub fn vocab_sizes(&self) -> Vec<usize> {
        self.vocabs.iter().map(|v| v.len()).collect()
    }

    /// Canonical JSONL serialization (UTF-8, LF). Final-goal fields are
    /// emitted only when they differ from the sequence's last element.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in &self.records {
            let raw = self.record_to_raw(rec);
            out.push_str(&serde_json::to_string(&raw).expect("dialog serialization"));
            out.push('\n');
        }
        out
    }

    fn record_to_raw(&self, rec: &DialogRecord) -> RawDialog {
        let name = |level: usize, id: usize| self.vocabs[level].name(id).to_string();
        let final_if_differs = |level: usize| {
            let seq = rec.seq(level);
            let f = rec.final_goal[level];
            if *seq.last().unwrap() == f {
                None
            } else {
                Some(name(level, f))
            }
        };
        RawDialog {
            dialog_id: rec.dialog_id.clone(),
            goal_types: rec.type_seq.iter().map(|&i| name(0, i)).collect(),
            goal_entities: rec.entity_seq.iter().map(|&i| name(1, i)).collect(),
            goal_attributes: rec
                .attribute_seq
                .as_ref()
                .map(|seq| seq.iter().map(|&i| name(2, i)).collect()),
            final_goal_type: final_if_differs(0),
            final_goal_entity: final_if_differs(1),
            final_goal_attribute: rec.attribute_seq.as_ref().and_then(|_| final_if_differs(2)),
        }
    }
}

/// Parse a JSONL corpus from a string. Vocabularies are built in
/// first-appearance order; malformed records are rejected with line numbers.
pub fn load_dialogs_str(text: &str) -> Result<GoalHierarchyDataset, DataError> {
    let mut vocabs = Vec::new();
    let records = load_dialogs_str_with(&mut vocabs, text)?;
    Ok(GoalHierarchyDataset { vocabs, records })
}

/// As [`load_dialogs_str`], interning into existing vocabularies so several
/// files (train, dev, test) can share one id space. Pass an empty `Vec` to
/// start fresh.
pub fn load_dialogs_str_with(
    vocabs: &mut Vec<GoalVocabulary>,
    text: &str,
) -> Result<Vec<DialogRecord>, DataError> {
    if vocabs.is_empty() {
        vocabs.push(GoalVocabulary::new(GoalLevel::Type));
        vocabs.push(GoalVocabulary::new(GoalLevel::Entity));
    }
    let mut attr_vocab: Option<GoalVocabulary> = if vocabs.len() == 3 {
        Some(vocabs.pop().unwrap())
    } else {
        None
    };
    let mut records = Vec::new();
    let mut saw_record = attr_vocab.is_some()
        || vocabs.iter().any(|v| !v.is_empty());

    for (lineno, line) in text.lines().enumerate() {
        let raw: RawDialog =
            serde_json::from_str(line).map_err(|source| DataError::Parse {
                line: lineno + 1,
                source,
            })?;

        let mut lengths = vec![raw.goal_types.len(), raw.goal_entities.len()];
        if let Some(attrs) = &raw.goal_attributes {
            lengths.push(attrs.len());
        }
        if lengths.iter().any(|&l| l != lengths[0]) {
            return Err(DataError::LengthMismatch {
                dialog_id: raw.dialog_id,
                lengths,
            });
        }
        if lengths[0] < 2 {
            return Err(DataError::SequenceTooShort {
                dialog_id: raw.dialog_id,
                len: lengths[0],
            });
        }

        match (&attr_vocab, &raw.goal_attributes) {
            (None, Some(_)) if saw_record => {
                return Err(DataError::InconsistentLevels {
                    dialog_id: raw.dialog_id,
                })
            }
            (None, Some(_)) => attr_vocab = Some(GoalVocabulary::new(GoalLevel::Attribute)),
            (Some(_), None) => {
                return Err(DataError::InconsistentLevels {
                    dialog_id: raw.dialog_id,
                })
            }
            _ => {}
        }
        saw_record = true;

        let type_seq: Vec<usize> = raw
            .goal_types
            .iter()
            .map(|n| vocabs[0].intern(n))
            .collect();
        let entity_seq: Vec<usize> = raw
            .goal_entities
            .iter()
            .map(|n| vocabs[1].intern(n))
            .collect();
        let attribute_seq = raw.goal_attributes.as_ref().map(|attrs| {
            let vocab = attr_vocab.as_mut().unwrap();
            attrs.iter().map(|n| vocab.intern(n)).collect::<Vec<_>>()
        });

        let mut final_goal = vec![
            match &raw.final_goal_type {
                Some(n) => vocabs[0].intern(n),
                None => *type_seq.last().unwrap(),
            },
            match &raw.final_goal_entity {
                Some(n) => vocabs[1].intern(n),
                None => *entity_seq.last().unwrap(),
            },
        ];
        if let Some(attrs) = &attribute_seq {
            final_goal.push(match &raw.final_goal_attribute {
                Some(n) => attr_vocab.as_mut().unwrap().intern(n),
                None => *attrs.last().unwrap(),
            });
        }

        records.push(DialogRecord {
            dialog_id: raw.dialog_id,
            type_seq,
            entity_seq,
            attribute_seq,
            final_goal,
        });
    }

    if let Some(av) = attr_vocab {
        vocabs.push(av);
    }
    Ok(records)
}

/// Load a JSONL corpus from a file.
pub fn load_dialogs_jsonl(path: impl AsRef<Path>) -> Result<GoalHierarchyDataset, DataError> {
    let text = fs::read_to_string(path)?;
    load_dialogs_str(&text)
}

/// Parameters for the synthetic corpus generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_types: usize,
    pub n_entities: usize,
    /// Zero produces a two-level corpus.
    pub n_attributes: usize,
    pub n_dialogs: usize,
    /// Inclusive (min, max) dialog length.
    pub len_range: (usize, usize),
    /// Per-step probability of moving the goal type toward the dialog's
    /// designated final type.
    pub drift: f64,
    pub seed: u64,
}

/// Generate a seeded hierarchical corpus as JSONL text.
///
/// Types follow a seeded Markov chain with drift toward a per-dialog final
/// type; each type owns a disjoint entity block and each entity maps to a
/// fixed attribute, so the levels are genuinely informative of each other.
/// The final goals are the last-step goals. Deterministic per seed.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<String, DataError> {
    let c = config;
    if c.n_types < 2 {
        return Err(DataError::InvalidParameter(format!(
            "need at least 2 goal types, got {}",
            c.n_types
        )));
    }
    if c.n_entities < c.n_types {
        return Err(DataError::InvalidParameter(format!(
            "need at least one entity per type: {} entities < {} types",
            c.n_entities, c.n_types
        )));
    }
    if c.n_dialogs == 0 {
        return Err(DataError::InvalidParameter("n_dialogs must be positive".into()));
    }
    if c.len_range.0 < 2 || c.len_range.0 > c.len_range.1 {
        return Err(DataError::InvalidParameter(format!(
            "dialog length range {:?} is empty or below 2",
            c.len_range
        )));
    }
    if !(0.0..=1.0).contains(&c.drift) {
        return Err(DataError::InvalidParameter(format!(
            "drift must be in [0, 1], got {}",
            c.drift
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);

    // disjoint entity blocks per type; the first (n_entities % n_types)
    // types get one extra entity
    let base = c.n_entities / c.n_types;
    let extra = c.n_entities % c.n_types;
    let block_start: Vec<usize> = (0..c.n_types)
        .scan(0usize, |acc, t| {
            let start = *acc;
            *acc += base + usize::from(t < extra);
            Some(start)
        })
        .collect();
    let block_size = |t: usize| base + usize::from(t < extra);

    // peaked seeded second-order Markov chain over types: each (previous,
    // current) pair has a dominant successor drawn once per corpus. The type
    // path is predictable from a short type history, while recovering the
    // same structure from entity sequences means estimating a context table
    // n_entities²/n_types² times larger.
    const DOMINANT_PROB: f64 = 0.8;
    let successor: Vec<usize> = (0..c.n_types * c.n_types)
        .map(|_| rng.gen_range(0..c.n_types))
        .collect();
    let mut out = String::new();
    for k in 0..c.n_dialogs {
        let n = rng.gen_range(c.len_range.0..=c.len_range.1);
        let final_type = rng.gen_range(0..c.n_types);
        // keep the start near the final type: full drift always arrives, and
        // partial drift arrives often enough that final goals carry signal
        let reach = (n - 1).min(2);
        let lo = final_type.saturating_sub(reach);
        let hi = (final_type + reach).min(c.n_types - 1);
        let mut t = rng.gen_range(lo..=hi);
        let mut t_prev = t;
        // dialogs converge toward the final type's anchor entity (the first
        // of its block): drifting steps inside that block walk toward it and
        // tend to hover once there
        let final_offset = 0;

        let mut types = Vec::with_capacity(n);
        let mut entities = Vec::with_capacity(n);
        let mut offset = rng.gen_range(0..block_size(t));
        types.push(t);
        entities.push(block_start[t] + offset);

        for _ in 1..n {
            let t_next = if rng.gen::<f64>() < c.drift {
                match t.cmp(&final_type) {
                    std::cmp::Ordering::Less => t + 1,
                    std::cmp::Ordering::Greater => t - 1,
                    std::cmp::Ordering::Equal => t,
                }
            } else if rng.gen::<f64>() < DOMINANT_PROB {
                successor[t_prev * c.n_types + t]
            } else {
                rng.gen_range(0..c.n_types)
            };
            t_prev = t;
            t = t_next;
            // the same drift pressure acts inside the final type's block,
            // pulling the entity toward (and holding it at) the anchor
            offset = if t == final_type && rng.gen::<f64>() < c.drift {
                match offset.cmp(&final_offset) {
                    std::cmp::Ordering::Less => offset + 1,
                    std::cmp::Ordering::Greater => offset - 1,
                    std::cmp::Ordering::Equal => offset,
                }
            } else if rng.gen::<f64>() < ENTITY_WALK_PROB {
                (offset + 1) % block_size(t)
            } else {
                rng.gen_range(0..block_size(t))
            };
            // entering a smaller block can strand the offset out of range
            offset %= block_size(t);
            types.push(t);
            entities.push(block_start[t] + offset);
        }

        let raw = RawDialog {
            dialog_id: format!("dialog{k}"),
            goal_types: types.iter().map(|&t| format!("type{t}")).collect(),
            goal_entities: entities.iter().map(|&e| format!("entity{e}")).collect(),
            goal_attributes: (c.n_attributes > 0).then(|| {
                entities
                    .iter()
                    .map(|&e| format!("attr{}", e % c.n_attributes))
                    .collect()
            }),
            final_goal_type: None,
            final_goal_entity: None,
            final_goal_attribute: None,
        };
        out.push_str(&serde_json::to_string(&raw).expect("dialog serialization"));
        out.push('\n');
    }
    Ok(out)
}

/// Seeded shuffle followed by a contiguous partition at dialog level.
pub fn split_dataset(
    records: &[DialogRecord],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<DialogRecord>, Vec<DialogRecord>, Vec<DialogRecord>), DataError> {
    let total = fractions.0 + fractions.1 + fractions.2;
    if (total - 1.0).abs() > 1e-9 {
        return Err(DataError::FractionSum(total));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let n = records.len() as f64;
    let n_train = (fractions.0 * n).round() as usize;
    let n_dev = ((fractions.0 + fractions.1) * n).round() as usize - n_train;
    let take = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    let train = take(&order[..n_train]);
    let dev = take(&order[n_train..n_train + n_dev]);
    let test = take(&order[n_train + n_dev..]);
    Ok((train, dev, test))
}

/// A corpus prepared for training: split at dialog level, adjacency built from
/// the train split only, every split expanded to per-prefix instances.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub levels: usize,
    pub vocab_sizes: Vec<usize>,
    /// `[type→entity]`, plus `[entity→attribute]` for three-level corpora.
    pub adjacency: Vec<AdjacencyMatrix>,
    pub train_records: Vec<DialogRecord>,
    pub dev_records: Vec<DialogRecord>,
    pub test_records: Vec<DialogRecord>,
    pub train: Vec<TrainingInstance>,
    pub dev: Vec<TrainingInstance>,
    pub test: Vec<TrainingInstance>,
}

pub fn prepare(
    dataset: &GoalHierarchyDataset,
    fractions: (f64, f64, f64),
    epsilon: f64,
    seed: u64,
) -> Result<PreparedData, DataError> {
    let (train_records, dev_records, test_records) =
        split_dataset(&dataset.records, fractions, seed)?;
    let sizes = dataset.vocab_sizes();
    let mut adjacency = Vec::new();
    for level in 1..dataset.levels() {
        adjacency.push(build_adjacency(
            &train_records,
            level - 1,
            level,
            sizes[level - 1],
            sizes[level],
            epsilon,
        )?);
    }
    Ok(PreparedData {
        levels: dataset.levels(),
        vocab_sizes: sizes,
        adjacency,
        train: expand_instances(&train_records),
        dev: expand_instances(&dev_records),
        test: expand_instances(&test_records),
        train_records,
        dev_records,
        test_records,
    })
}
