//! Constructors for the five self-supervised task streams: contrastive
//! antonym flips, jigsaw ordering, binary sentence order, masked entities and
//! masked tokens.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, is_special, QaExample, SegmentedContext, TokenId, Vocabulary, CLS, MASK, NUM_SPECIALS, SEP};
use crate::error::{Error, Result};
use crate::rng::{Rng, SeedPath};

pub const MLM_SELECT_PROB: f64 = 0.15;
pub const MEM_SELECT_PROB: f64 = 0.15;
pub const MASK_TOKEN_PROB: f64 = 0.8;
pub const RANDOM_TOKEN_PROB: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Crl,
    Jp,
    Bsop,
    Mem,
    Mlm,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Crl, Task::Jp, Task::Bsop, Task::Mem, Task::Mlm];

    pub fn name(self) -> &'static str {
        match self {
            Task::Crl => "crl",
            Task::Jp => "jp",
            Task::Bsop => "bsop",
            Task::Mem => "mem",
            Task::Mlm => "mlm",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Task> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s.trim().to_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

/// Parses `crl,jp,...`; an empty string or `none` means no tasks.
pub fn parse_task_set(s: &str) -> Result<BTreeSet<Task>> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("none") {
        return Ok(BTreeSet::new());
    }
    if s.eq_ignore_ascii_case("all") {
        return Ok(Task::ALL.into_iter().collect());
    }
    s.split(',').map(str::parse).collect()
}

pub fn format_task_set(tasks: &BTreeSet<Task>) -> String {
    if tasks.is_empty() {
        return "none".into();
    }
    tasks.iter().map(|t| t.name()).collect::<Vec<_>>().join(",")
}

// ---------------------------------------------------------------------------
// Antonym lexicon

/// Word to antonym-phrase map, closed under symmetry. Entries are stored in
/// tokenized form joined by single spaces.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AntonymLexicon {
    pairs: BTreeMap<String, BTreeSet<String>>,
    declared: usize,
}

impl AntonymLexicon {
    /// Number of distinct unordered pairs listed in the source, before closure.
    pub fn declared_pairs(&self) -> usize {
        self.declared
    }

    /// Number of headwords after closure.
    pub fn size(&self) -> usize {
        self.pairs.len()
    }

    pub fn antonyms(&self, word: &str) -> impl Iterator<Item = &str> {
        self.pairs.get(word).into_iter().flatten().map(String::as_str)
    }

    pub fn parse(text: &str) -> Result<AntonymLexicon> {
        let mut seen: HashSet<(String, String)> = HashSet::new();
        let mut lex = AntonymLexicon::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let malformed = |m: &str| Error::Lexicon(format!("line {}: {m}", idx + 1));
            let (a, b) = line
                .split_once('\t')
                .ok_or_else(|| malformed("expected word<TAB>antonym"))?;
            let a = corpus::tokenize(a).join(" ");
            let b = corpus::tokenize(b).join(" ");
            if a.is_empty() || b.is_empty() || b.contains('\t') {
                return Err(malformed("empty side"));
            }
            if a == b {
                return Err(malformed(&format!("{a:?} paired with itself")));
            }
            let key = if a < b {
                (a.clone(), b.clone())
            } else {
                (b.clone(), a.clone())
            };
            if seen.insert(key) {
                lex.declared += 1;
            }
            lex.pairs.entry(a.clone()).or_default().insert(b.clone());
            lex.pairs.entry(b).or_default().insert(a);
        }
        Ok(lex)
    }

    /// Compiles the lexicon against a vocabulary. Headwords containing
    /// out-of-vocabulary tokens can never match and are dropped; replacement
    /// phrases are encoded as-is (possibly with `[UNK]`).
    pub fn index(&self, vocab: &Vocabulary) -> LexiconIndex {
        let mut entries: HashMap<Vec<TokenId>, Vec<Vec<TokenId>>> = HashMap::new();
        let mut max_len = 0;
        for (head, ants) in &self.pairs {
            let words: Vec<&str> = head.split(' ').collect();
            let Some(key) = words.iter().map(|w| vocab.get(w)).collect::<Option<Vec<_>>>() else {
                continue;
            };
            let mut reps: Vec<Vec<TokenId>> = Vec::new();
            for a in ants {
                let enc = vocab.encode(&a.split(' ').collect::<Vec<_>>());
                if enc != key && !reps.contains(&enc) {
                    reps.push(enc);
                }
            }
            if reps.is_empty() {
                continue;
            }
            max_len = max_len.max(key.len());
            entries.insert(key, reps);
        }
        LexiconIndex { entries, max_len }
    }
}

pub fn load_lexicon(path: impl AsRef<Path>) -> Result<AntonymLexicon> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    AntonymLexicon::parse(&text).map_err(|e| Error::Lexicon(format!("{}: {e}", path.display())))
}

/// The antonym list bundled with the crate.
pub fn builtin_lexicon() -> AntonymLexicon {
    AntonymLexicon::parse(include_str!("../data/antonyms.tsv")).expect("bundled lexicon is well formed")
}

/// Lexicon in token-id space.
#[derive(Debug, Clone, Default)]
pub struct LexiconIndex {
    entries: HashMap<Vec<TokenId>, Vec<Vec<TokenId>>>,
    max_len: usize,
}

impl LexiconIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Non-overlapping matches scanning left to right, longest headword first.
    pub fn find_matches(&self, tokens: &[TokenId]) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < tokens.len() {
            let longest = self.max_len.min(tokens.len() - pos);
            match (1..=longest)
                .rev()
                .find(|&len| self.entries.contains_key(&tokens[pos..pos + len]))
            {
                Some(len) => {
                    out.push((pos, len));
                    pos += len;
                }
                None => pos += 1,
            }
        }
        out
    }

    pub fn replacements(&self, key: &[TokenId]) -> &[Vec<TokenId>] {
        self.entries.get(key).map(Vec::as_slice).unwrap_or(&[])
    }
}

// ---------------------------------------------------------------------------
// Instances

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipSpan {
    /// Token position in the original context.
    pub position: usize,
    pub original: Vec<TokenId>,
    pub replacement: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrlInstance {
    pub candidates: [Vec<TokenId>; 2],
    pub label: usize,
    pub flipped_spans: Vec<FlipSpan>,
    pub source_id: String,
}

impl CrlInstance {
    pub fn original(&self) -> &[TokenId] {
        &self.candidates[self.label]
    }

    pub fn contrastive(&self) -> &[TokenId] {
        &self.candidates[1 - self.label]
    }
}

/// Rebuilds a token stream with the given flips applied.
pub fn apply_flips(original: &[TokenId], flips: &[FlipSpan]) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(original.len());
    let mut pos = 0;
    for f in flips {
        out.extend_from_slice(&original[pos..f.position]);
        out.extend_from_slice(&f.replacement);
        pos = f.position + f.original.len();
    }
    out.extend_from_slice(&original[pos..]);
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JigsawInstance {
    /// Each candidate is a list of K segments in presentation order.
    pub candidates: Vec<Vec<Vec<TokenId>>>,
    /// Segment indices of each candidate; the identity order sits at `label`.
    pub orders: Vec<Vec<usize>>,
    pub label: usize,
    /// How many splits fell back to the token midpoint during normalization.
    pub midpoint_splits: usize,
    pub source_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairOrder {
    Original,
    Reversed,
}

impl PairOrder {
    pub fn index(self) -> usize {
        match self {
            PairOrder::Original => 0,
            PairOrder::Reversed => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BsopInstance {
    pub pair: [Vec<TokenId>; 2],
    pub label: PairOrder,
    /// Index `i` of the source pair `(s_i, s_{i+1})`.
    pub position: usize,
    pub source_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    #[default]
    Mlm,
    Mem,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Treatment {
    Mask,
    Random,
    Keep,
}

// Position-keyed maps are written as `[[pos, value], ...]`; integer map keys do
// not survive the tagged-enum round trip.
mod pos_map {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer, T: Serialize>(map: &BTreeMap<usize, T>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(map.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>, T: Deserialize<'de>>(d: D) -> Result<BTreeMap<usize, T>, D::Error> {
        Ok(Vec::<(usize, T)>::deserialize(d)?.into_iter().collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedInstance {
    pub input_ids: Vec<TokenId>,
    /// Position to original token id.
    #[serde(with = "pos_map")]
    pub targets: BTreeMap<usize, TokenId>,
    #[serde(with = "pos_map")]
    pub treatments: BTreeMap<usize, Treatment>,
    #[serde(skip)]
    pub kind: MaskKind,
    pub source_id: String,
}

impl MaskedInstance {
    /// The source sequence: `input_ids` with every target restored.
    pub fn restored(&self) -> Vec<TokenId> {
        let mut out = self.input_ids.clone();
        for (&pos, &id) in &self.targets {
            out[pos] = id;
        }
        out
    }
}

/// One line of a task interchange file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskInstance {
    Crl(CrlInstance),
    Jp(JigsawInstance),
    Bsop(BsopInstance),
    Mem(MaskedInstance),
    Mlm(MaskedInstance),
}

impl TaskInstance {
    pub fn task(&self) -> Task {
        match self {
            TaskInstance::Crl(_) => Task::Crl,
            TaskInstance::Jp(_) => Task::Jp,
            TaskInstance::Bsop(_) => Task::Bsop,
            TaskInstance::Mem(_) => Task::Mem,
            TaskInstance::Mlm(_) => Task::Mlm,
        }
    }

    pub fn source_id(&self) -> &str {
        match self {
            TaskInstance::Crl(i) => &i.source_id,
            TaskInstance::Jp(i) => &i.source_id,
            TaskInstance::Bsop(i) => &i.source_id,
            TaskInstance::Mem(i) | TaskInstance::Mlm(i) => &i.source_id,
        }
    }
}

// ---------------------------------------------------------------------------
// Constructors

/// Flips up to `n_flips` lexicon matches to a random antonym each and
/// presents (original, flipped) in coin-flip order. `None` when nothing in the
/// context matches the lexicon.
pub fn make_crl(
    context: &SegmentedContext,
    lexicon: &LexiconIndex,
    n_flips: usize,
    rng: &mut Rng,
) -> Result<Option<CrlInstance>> {
    if n_flips < 1 {
        return Err(Error::Config("n_flips must be at least 1".into()));
    }
    let original = context.tokens();
    let matches = lexicon.find_matches(&original);
    if matches.is_empty() {
        return Ok(None);
    }
    let amount = n_flips.min(matches.len());
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, matches.len(), amount).into_vec();
    picked.sort_unstable();
    let flipped_spans: Vec<FlipSpan> = picked
        .into_iter()
        .map(|m| {
            let (pos, len) = matches[m];
            let key = &original[pos..pos + len];
            let replacement = lexicon
                .replacements(key)
                .choose(rng)
                .expect("indexed headwords have replacements")
                .clone();
            FlipSpan {
                position: pos,
                original: key.to_vec(),
                replacement,
            }
        })
        .collect();
    let flipped = apply_flips(&original, &flipped_spans);
    let original_first = rng.gen_bool(0.5);
    let (candidates, label) = if original_first {
        ([original, flipped], 0)
    } else {
        ([flipped, original], 1)
    };
    Ok(Some(CrlInstance {
        candidates,
        label,
        flipped_spans,
        source_id: context.source_id.clone(),
    }))
}

pub const CONJUNCTIONS: [&str; 6] = ["and", "but", "or", "because", "so", "then"];
pub const CLAUSE_PUNCTUATION: [&str; 2] = [",", ";"];

/// Token ids that mark clause boundaries for segment splitting.
#[derive(Debug, Clone, Default)]
pub struct SplitPoints {
    after: HashSet<TokenId>,
    before: HashSet<TokenId>,
}

impl SplitPoints {
    pub fn from_vocab(vocab: &Vocabulary) -> Self {
        SplitPoints {
            after: CLAUSE_PUNCTUATION.iter().filter_map(|t| vocab.get(t)).collect(),
            before: CONJUNCTIONS.iter().filter_map(|t| vocab.get(t)).collect(),
        }
    }

    pub fn new(after: impl IntoIterator<Item = TokenId>, before: impl IntoIterator<Item = TokenId>) -> Self {
        SplitPoints {
            after: after.into_iter().collect(),
            before: before.into_iter().collect(),
        }
    }

    /// Cut positions `b` (left = `seg[..b]`) that keep both halves non-empty.
    fn candidates(&self, seg: &[TokenId]) -> Vec<usize> {
        (1..seg.len())
            .filter(|&b| self.after.contains(&seg[b - 1]) || self.before.contains(&seg[b]))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Normalized {
    pub segments: Vec<Vec<TokenId>>,
    pub midpoint_splits: usize,
}

/// Forces a sentence list to exactly `k` segments. While short, the longest
/// segment is cut at the clause boundary nearest its middle (token midpoint
/// if it has none); while long, the adjacent pair with the smallest combined
/// length is merged. Ties go to the leftmost candidate.
pub fn normalize_segments(sentences: &[Vec<TokenId>], k: usize, splits: &SplitPoints) -> Result<Normalized> {
    if k < 2 {
        return Err(Error::Config("K must be at least 2".into()));
    }
    let mut segs: Vec<Vec<TokenId>> = sentences.iter().filter(|s| !s.is_empty()).cloned().collect();
    if segs.is_empty() {
        return Err(Error::ContextTooShort("no tokens".into()));
    }
    let mut midpoint_splits = 0;
    while segs.len() < k {
        let (idx, longest) = segs.iter().enumerate().fold(
            (0, 0),
            |best, (i, s)| if s.len() > best.1 { (i, s.len()) } else { best },
        );
        if longest < 2 {
            return Err(Error::ContextTooShort(format!(
                "{} tokens cannot form {k} segments",
                segs.iter().map(Vec::len).sum::<usize>()
            )));
        }
        let seg = &segs[idx];
        // nearest to the middle; doubled to stay in integers, ties to the left
        let cut = splits
            .candidates(seg)
            .into_iter()
            .min_by_key(|&b| (2 * b).abs_diff(seg.len()))
            .unwrap_or_else(|| {
                midpoint_splits += 1;
                seg.len() / 2
            });
        let right = segs[idx].split_off(cut);
        segs.insert(idx + 1, right);
    }
    while segs.len() > k {
        let i = (0..segs.len() - 1)
            .min_by_key(|&i| segs[i].len() + segs[i + 1].len())
            .expect("at least two segments");
        let right = segs.remove(i + 1);
        segs[i].extend(right);
    }
    Ok(Normalized {
        segments: segs,
        midpoint_splits,
    })
}

fn factorial_capped(k: usize, cap: usize) -> usize {
    let mut acc: usize = 1;
    for i in 2..=k {
        acc = acc.saturating_mul(i);
        if acc >= cap {
            return cap;
        }
    }
    acc
}

/// Normalizes to `k` segments and presents `p` distinct orderings, exactly one
/// of them the original, at a uniformly drawn position.
pub fn make_jigsaw(
    context: &SegmentedContext,
    k: usize,
    p: usize,
    splits: &SplitPoints,
    rng: &mut Rng,
) -> Result<JigsawInstance> {
    if p < 2 {
        return Err(Error::Config("P must be at least 2".into()));
    }
    let norm = normalize_segments(&context.sentences, k, splits)?;
    let p = p.min(factorial_capped(k, p));
    let identity: Vec<usize> = (0..k).collect();
    let mut seen: HashSet<Vec<usize>> = HashSet::from([identity.clone()]);
    let mut orders = Vec::with_capacity(p);
    while orders.len() < p - 1 {
        let mut perm = identity.clone();
        perm.shuffle(rng);
        if seen.insert(perm.clone()) {
            orders.push(perm);
        }
    }
    let label = rng.gen_range(0..p);
    orders.insert(label, identity);
    let candidates = orders
        .iter()
        .map(|o| o.iter().map(|&i| norm.segments[i].clone()).collect())
        .collect();
    Ok(JigsawInstance {
        candidates,
        orders,
        label,
        midpoint_splits: norm.midpoint_splits,
        source_id: context.source_id.clone(),
    })
}

/// Picks one adjacent sentence pair and reverses it with probability one half.
pub fn make_bsop(context: &SegmentedContext, rng: &mut Rng) -> Option<BsopInstance> {
    let sents = &context.sentences;
    if sents.len() < 2 {
        return None;
    }
    let i = rng.gen_range(0..sents.len() - 1);
    let (a, b) = (sents[i].clone(), sents[i + 1].clone());
    let (pair, label) = if rng.gen_bool(0.5) {
        ([b, a], PairOrder::Reversed)
    } else {
        ([a, b], PairOrder::Original)
    };
    Some(BsopInstance {
        pair,
        label,
        position: i,
        source_id: context.source_id.clone(),
    })
}

fn draw_treatment(rng: &mut Rng) -> Treatment {
    let u: f64 = rng.gen();
    if u < MASK_TOKEN_PROB {
        Treatment::Mask
    } else if u < MASK_TOKEN_PROB + RANDOM_TOKEN_PROB {
        Treatment::Random
    } else {
        Treatment::Keep
    }
}

/// Masks a sequence. `mlm` selects non-special tokens independently; `mem`
/// selects whole entity spans (token ranges `[start, end)`) and always
/// selects at least one. Selected tokens get `[MASK]` 80% of the time, a
/// random non-special token 10% and stay unchanged 10%.
pub fn make_masked(
    sequence: &[TokenId],
    kind: MaskKind,
    spans: &[(usize, usize)],
    vocab_size: usize,
    source_id: &str,
    rng: &mut Rng,
) -> Result<MaskedInstance> {
    let selected: Vec<usize> = match kind {
        MaskKind::Mlm => sequence
            .iter()
            .enumerate()
            .filter(|&(_, &id)| !is_special(id))
            .filter(|_| rng.gen_bool(MLM_SELECT_PROB))
            .map(|(i, _)| i)
            .collect(),
        MaskKind::Mem => {
            if spans.is_empty() {
                return Err(Error::NoEntities);
            }
            let mut prev_end = 0;
            for &(s, e) in spans {
                if s >= e || e > sequence.len() || s < prev_end {
                    return Err(Error::Config(format!("invalid entity range {s}..{e}")));
                }
                prev_end = e;
            }
            let mut chosen: Vec<usize> = (0..spans.len()).filter(|_| rng.gen_bool(MEM_SELECT_PROB)).collect();
            if chosen.is_empty() {
                chosen.push(rng.gen_range(0..spans.len()));
            }
            chosen
                .into_iter()
                .flat_map(|j| spans[j].0..spans[j].1)
                .filter(|&i| !is_special(sequence[i]))
                .collect()
        }
    };
    let mut input_ids = sequence.to_vec();
    let mut targets = BTreeMap::new();
    let mut treatments = BTreeMap::new();
    for pos in selected {
        let t = draw_treatment(rng);
        match t {
            Treatment::Mask => input_ids[pos] = MASK,
            Treatment::Random if vocab_size > NUM_SPECIALS => {
                input_ids[pos] = rng.gen_range(NUM_SPECIALS as TokenId..vocab_size as TokenId)
            }
            Treatment::Random | Treatment::Keep => {}
        }
        targets.insert(pos, sequence[pos]);
        treatments.insert(pos, t);
    }
    Ok(MaskedInstance {
        input_ids,
        targets,
        treatments,
        kind,
        source_id: source_id.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Stream generation

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub tasks: BTreeSet<Task>,
    /// Jigsaw segments per context.
    pub k: usize,
    /// Jigsaw candidates per instance.
    pub p: usize,
    pub n_flips: usize,
    pub max_len: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            tasks: Task::ALL.into_iter().collect(),
            k: 5,
            p: 5,
            n_flips: 1,
            max_len: 180,
        }
    }
}

/// The generated instances of one source example; each task yields at most one.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExampleTasks {
    pub crl: Option<CrlInstance>,
    pub jp: Option<JigsawInstance>,
    pub bsop: Option<BsopInstance>,
    pub mem: Option<MaskedInstance>,
    pub mlm: Option<MaskedInstance>,
}

impl ExampleTasks {
    pub fn instances(&self) -> Vec<TaskInstance> {
        let mut out = Vec::new();
        out.extend(self.crl.clone().map(TaskInstance::Crl));
        out.extend(self.jp.clone().map(TaskInstance::Jp));
        out.extend(self.bsop.clone().map(TaskInstance::Bsop));
        out.extend(self.mem.clone().map(TaskInstance::Mem));
        out.extend(self.mlm.clone().map(TaskInstance::Mlm));
        out
    }

    fn insert(&mut self, inst: TaskInstance) {
        match inst {
            TaskInstance::Crl(i) => self.crl = Some(i),
            TaskInstance::Jp(i) => self.jp = Some(i),
            TaskInstance::Bsop(i) => self.bsop = Some(i),
            TaskInstance::Mem(mut i) => {
                i.kind = MaskKind::Mem;
                self.mem = Some(i)
            }
            TaskInstance::Mlm(mut i) => {
                i.kind = MaskKind::Mlm;
                self.mlm = Some(i)
            }
        }
    }

    pub fn retain_tasks(&mut self, tasks: &BTreeSet<Task>) {
        for t in Task::ALL {
            if tasks.contains(&t) {
                continue;
            }
            match t {
                Task::Crl => self.crl = None,
                Task::Jp => self.jp = None,
                Task::Bsop => self.bsop = None,
                Task::Mem => self.mem = None,
                Task::Mlm => self.mlm = None,
            }
        }
    }
}

/// All generated instances keyed by source example id.
pub type TaskStreams = BTreeMap<String, ExampleTasks>;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub eligible_tokens: u64,
    pub selected: u64,
    pub selection_rate: f64,
    pub mask: u64,
    pub random: u64,
    pub keep: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskStats {
    pub emitted: u64,
    pub absent: BTreeMap<String, u64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub label_histogram: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub masking: Option<MaskStats>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub midpoint_splits: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StreamStats {
    pub seed: u64,
    pub examples: u64,
    pub tasks: BTreeMap<String, TaskStats>,
}

enum Outcome {
    Made(TaskInstance),
    Absent(&'static str),
}

/// Shared, read-only inputs of the constructors.
pub struct TaskContext<'a> {
    pub vocab: &'a Vocabulary,
    pub lexicon: LexiconIndex,
    pub splits: SplitPoints,
    pub config: GenConfig,
}

impl<'a> TaskContext<'a> {
    pub fn new(vocab: &'a Vocabulary, lexicon: &AntonymLexicon, config: GenConfig) -> Self {
        TaskContext {
            vocab,
            lexicon: lexicon.index(vocab),
            splits: SplitPoints::from_vocab(vocab),
            config,
        }
    }

    fn masked_source(&self, ex: &QaExample) -> (Vec<TokenId>, Vec<(usize, usize)>) {
        let tokens = corpus::tokenize_with_offsets(&ex.context);
        let room = self.config.max_len.saturating_sub(2);
        let keep = tokens.len().min(room);
        let mut seq = Vec::with_capacity(keep + 2);
        seq.push(CLS);
        seq.extend(tokens[..keep].iter().map(|t| self.vocab.id(&t.text)));
        seq.push(SEP);
        let spans = corpus::spans_to_token_ranges(&tokens, &corpus::tag_entities(ex))
            .into_iter()
            .filter(|&(_, e)| e <= keep)
            .map(|(s, e)| (s + 1, e + 1))
            .collect();
        (seq, spans)
    }

    fn build(&self, ex: &QaExample, task: Task, rng: &mut Rng) -> Outcome {
        let seg = SegmentedContext::new(&ex.id, &ex.context, self.vocab);
        let c = &self.config;
        match task {
            Task::Crl => match make_crl(&seg, &self.lexicon, c.n_flips, rng) {
                Ok(Some(i)) => Outcome::Made(TaskInstance::Crl(i)),
                Ok(None) => Outcome::Absent("no_lexicon_match"),
                Err(_) => Outcome::Absent("error"),
            },
            Task::Jp => match make_jigsaw(&seg, c.k, c.p, &self.splits, rng) {
                Ok(i) => Outcome::Made(TaskInstance::Jp(i)),
                Err(Error::ContextTooShort(_)) => Outcome::Absent("context_too_short"),
                Err(_) => Outcome::Absent("error"),
            },
            Task::Bsop => match make_bsop(&seg, rng) {
                Some(i) => Outcome::Made(TaskInstance::Bsop(i)),
                None => Outcome::Absent("single_sentence"),
            },
            Task::Mem | Task::Mlm => {
                let (seq, spans) = self.masked_source(ex);
                let kind = if task == Task::Mem {
                    MaskKind::Mem
                } else {
                    MaskKind::Mlm
                };
                match make_masked(&seq, kind, &spans, self.vocab.len(), &ex.id, rng) {
                    Ok(i) if i.targets.is_empty() => Outcome::Absent("nothing_selected"),
                    Ok(i) if task == Task::Mem => Outcome::Made(TaskInstance::Mem(i)),
                    Ok(i) => Outcome::Made(TaskInstance::Mlm(i)),
                    Err(Error::NoEntities) => Outcome::Absent("no_entities"),
                    Err(_) => Outcome::Absent("error"),
                }
            }
        }
    }

    /// Builds every enabled task for every example. The RNG of each
    /// (example, task) cell is derived from `(seed, example id, task)`.
    pub fn generate(&self, examples: &[QaExample], seed: u64) -> Result<(TaskStreams, StreamStats)> {
        let mut ids = HashSet::new();
        for ex in examples {
            if !ids.insert(ex.id.as_str()) {
                return Err(Error::Invalid {
                    id: ex.id.clone(),
                    message: "duplicate example id".into(),
                });
            }
        }
        let tasks: Vec<Task> = self.config.tasks.iter().copied().collect();
        let cells: Vec<(String, Vec<Outcome>)> = examples
            .par_iter()
            .map(|ex| {
                let outcomes = tasks
                    .iter()
                    .map(|&t| {
                        let mut rng = SeedPath::new(seed).with_str(&ex.id).with_str(t.name()).rng();
                        self.build(ex, t, &mut rng)
                    })
                    .collect();
                (ex.id.clone(), outcomes)
            })
            .collect();

        let mut streams = TaskStreams::new();
        let mut stats = StreamStats {
            seed,
            examples: examples.len() as u64,
            tasks: tasks
                .iter()
                .map(|t| (t.name().to_string(), TaskStats::default()))
                .collect(),
        };
        for (id, outcomes) in cells {
            let entry = streams.entry(id).or_default();
            for (task, outcome) in tasks.iter().zip(outcomes) {
                let ts = stats.tasks.get_mut(task.name()).expect("stats seeded per task");
                match outcome {
                    Outcome::Made(inst) => {
                        ts.emitted += 1;
                        record_stats(ts, &inst, self.config.p);
                        entry.insert(inst);
                    }
                    Outcome::Absent(reason) => *ts.absent.entry(reason.to_string()).or_default() += 1,
                }
            }
        }
        Ok((streams, stats))
    }
}

fn bump(hist: &mut Vec<u64>, idx: usize, min_len: usize) {
    if hist.len() < min_len.max(idx + 1) {
        hist.resize(min_len.max(idx + 1), 0);
    }
    hist[idx] += 1;
}

fn record_stats(ts: &mut TaskStats, inst: &TaskInstance, p: usize) {
    match inst {
        TaskInstance::Crl(i) => bump(&mut ts.label_histogram, i.label, 2),
        TaskInstance::Jp(i) => {
            bump(&mut ts.label_histogram, i.label, p);
            *ts.midpoint_splits.get_or_insert(0) += i.midpoint_splits as u64;
        }
        TaskInstance::Bsop(i) => bump(&mut ts.label_histogram, i.label.index(), 2),
        TaskInstance::Mem(i) | TaskInstance::Mlm(i) => {
            let m = ts.masking.get_or_insert_with(MaskStats::default);
            m.eligible_tokens += i.restored().iter().filter(|&&id| !is_special(id)).count() as u64;
            m.selected += i.targets.len() as u64;
            for t in i.treatments.values() {
                match t {
                    Treatment::Mask => m.mask += 1,
                    Treatment::Random => m.random += 1,
                    Treatment::Keep => m.keep += 1,
                }
            }
            m.selection_rate = m.selected as f64 / m.eligible_tokens.max(1) as f64;
        }
    }
}

pub fn generate_stream(
    examples: &[QaExample],
    vocab: &Vocabulary,
    lexicon: &AntonymLexicon,
    config: &GenConfig,
    seed: u64,
) -> Result<(TaskStreams, StreamStats)> {
    TaskContext::new(vocab, lexicon, config.clone()).generate(examples, seed)
}

pub fn stream_file_name(task: Task) -> String {
    format!("{}.jsonl", task.name())
}

/// Writes one JSON Lines file per enabled task plus `stats.json`.
pub fn write_streams(
    dir: impl AsRef<Path>,
    streams: &TaskStreams,
    stats: &StreamStats,
    tasks: &BTreeSet<Task>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bufs: BTreeMap<Task, String> = tasks.iter().map(|&t| (t, String::new())).collect();
    for tasks_of in streams.values() {
        for inst in tasks_of.instances() {
            if let Some(buf) = bufs.get_mut(&inst.task()) {
                buf.push_str(&serde_json::to_string(&inst)?);
                buf.push('\n');
            }
        }
    }
    for (task, buf) in bufs {
        let path = dir.join(stream_file_name(task));
        fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join("stats.json");
    let mut json = serde_json::to_string_pretty(stats)?;
    json.push('\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Reads whichever task files exist in `dir`.
pub fn read_streams(dir: impl AsRef<Path>) -> Result<TaskStreams> {
    let dir = dir.as_ref();
    let mut streams = TaskStreams::new();
    for task in Task::ALL {
        let path = dir.join(stream_file_name(task));
        if !path.exists() {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let inst: TaskInstance = serde_json::from_str(line).map_err(|e| Error::Record {
                path: path.clone(),
                line: idx + 1,
                message: e.to_string(),
            })?;
            if inst.task() != task {
                return Err(Error::Record {
                    path: path.clone(),
                    line: idx + 1,
                    message: format!("{} instance in {} file", inst.task(), task),
                });
            }
            streams.entry(inst.source_id().to_string()).or_default().insert(inst);
        }
    }
    Ok(streams)
}
