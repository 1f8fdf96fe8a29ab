//! Dataset ingestion and the text substrate shared by every task constructor:
//! tokenization, vocabulary, sentence segmentation and entity tagging.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const MASK: TokenId = 4;
pub const NUM_SPECIALS: usize = 5;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

pub fn is_special(id: TokenId) -> bool {
    (id as usize) < NUM_SPECIALS
}

/// Question category used for the per-type accuracy breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QType {
    InParagraph,
    OutOfParagraph,
    NoEffect,
    #[default]
    Unlabeled,
}

impl QType {
    pub fn parse(s: &str) -> Option<QType> {
        match s.trim().to_lowercase().replace('-', "_").as_str() {
            "in_paragraph" | "in" => Some(QType::InParagraph),
            "out_of_paragraph" | "out" => Some(QType::OutOfParagraph),
            "no_effect" | "no" => Some(QType::NoEffect),
            "unlabeled" | "" => Some(QType::Unlabeled),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            QType::InParagraph => "in_paragraph",
            QType::OutOfParagraph => "out_of_paragraph",
            QType::NoEffect => "no_effect",
            QType::Unlabeled => "unlabeled",
        }
    }
}

/// Half-open character span `[start, end)` into a context string.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }
}

/// One multiple-choice item.
#[derive(Debug, Clone, PartialEq)]
pub struct QaExample {
    pub id: String,
    pub context: String,
    pub question: String,
    pub options: Vec<String>,
    pub gold: usize,
    pub qtype: QType,
    pub entities: Option<Vec<Span>>,
}

/// On-disk record layout. `entities` are `[start, end]` character offsets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub context: String,
    pub question: String,
    pub options: Vec<String>,
    pub gold: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qtype: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entities: Option<Vec<[usize; 2]>>,
}

impl From<&QaExample> for DatasetRecord {
    fn from(ex: &QaExample) -> Self {
        DatasetRecord {
            id: ex.id.clone(),
            context: ex.context.clone(),
            question: ex.question.clone(),
            options: ex.options.clone(),
            gold: ex.gold as i64,
            qtype: match ex.qtype {
                QType::Unlabeled => None,
                q => Some(q.as_str().to_string()),
            },
            entities: ex
                .entities
                .as_ref()
                .map(|spans| spans.iter().map(|s| [s.start, s.end]).collect()),
        }
    }
}

impl QaExample {
    /// Validates a raw record; the error message names the offending field.
    pub fn from_record(rec: DatasetRecord) -> std::result::Result<QaExample, String> {
        if rec.options.len() < 2 {
            return Err(format!(
                "record {}: options: need at least 2, found {}",
                rec.id,
                rec.options.len()
            ));
        }
        if rec.gold < 0 || rec.gold as usize >= rec.options.len() {
            return Err(format!(
                "record {}: gold: {} out of range for {} options",
                rec.id,
                rec.gold,
                rec.options.len()
            ));
        }
        if tokenize(&rec.context).is_empty() {
            return Err(format!("record {}: context: empty", rec.id));
        }
        if tokenize(&rec.question).is_empty() {
            return Err(format!("record {}: question: empty", rec.id));
        }
        let qtype = match rec.qtype.as_deref() {
            None => QType::Unlabeled,
            Some(s) => QType::parse(s).ok_or_else(|| format!("record {}: qtype: unknown value {s:?}", rec.id))?,
        };
        let entities = match rec.entities {
            None => None,
            Some(raw) => {
                let n = rec.context.chars().count();
                let spans: Vec<Span> = raw.iter().map(|&[s, e]| Span::new(s, e)).collect();
                validate_spans(&spans, n).map_err(|m| format!("record {}: entities: {m}", rec.id))?;
                Some(spans)
            }
        };
        Ok(QaExample {
            id: rec.id,
            context: rec.context,
            question: rec.question,
            options: rec.options,
            gold: rec.gold as usize,
            qtype,
            entities,
        })
    }
}

fn validate_spans(spans: &[Span], len: usize) -> std::result::Result<(), String> {
    let mut prev_end = 0;
    for (i, s) in spans.iter().enumerate() {
        if s.start >= s.end {
            return Err(format!("span {i} is empty or reversed"));
        }
        if s.end > len {
            return Err(format!("span {i} exceeds context length {len}"));
        }
        if i > 0 && s.start < prev_end {
            return Err(format!("span {i} overlaps or is out of order"));
        }
        prev_end = s.end;
    }
    Ok(())
}

/// Reads a JSON Lines dataset. Blank lines are skipped; every invalid record
/// is reported with its line number.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<QaExample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, path)
}

pub fn parse_dataset(text: &str, path: &Path) -> Result<Vec<QaExample>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record_err = |message: String| Error::Record {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let rec: DatasetRecord = serde_json::from_str(line).map_err(|e| record_err(e.to_string()))?;
        out.push(QaExample::from_record(rec).map_err(record_err)?);
    }
    Ok(out)
}

pub fn write_dataset(path: impl AsRef<Path>, examples: &[QaExample]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = String::new();
    for ex in examples {
        buf.push_str(&serde_json::to_string(&DatasetRecord::from(ex))?);
        buf.push('\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// A token with its character offsets in the raw text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn normalize_token(raw: &str) -> String {
    raw.nfkc().collect::<String>().to_lowercase()
}

/// Tokenizes and keeps character offsets into `text`.
///
/// Rules: runs of letters, digits and `_` form a word; an apostrophe joins a
/// word only when letters follow it (`don't`); every other non-space
/// character is a token of its own. Each token is NFKC-normalized and
/// lowercased.
pub fn tokenize_with_offsets(text: &str) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if is_word_char(c) {
            i += 1;
            while i < chars.len() {
                if is_word_char(chars[i]) {
                    i += 1;
                } else if (chars[i] == '\'' || chars[i] == '’') && i + 1 < chars.len() && chars[i + 1].is_alphabetic()
                {
                    i += 2;
                } else {
                    break;
                }
            }
        } else {
            i += 1;
        }
        let raw: String = chars[start..i].iter().collect();
        tokens.push(Token {
            text: normalize_token(&raw),
            start,
            end: i,
        });
    }
    tokens
}

pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_with_offsets(text).into_iter().map(|t| t.text).collect()
}

/// Token/id map. Ids `0..5` are the reserved specials; the rest are ordered
/// by descending corpus frequency, then lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    id_of: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn specials_only() -> Self {
        Self::from_counted(Vec::new())
    }

    fn from_counted(entries: Vec<(String, u64)>) -> Self {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut counts = vec![0; NUM_SPECIALS];
        for (tok, count) in entries {
            tokens.push(tok);
            counts.push(count);
        }
        let id_of = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Vocabulary { tokens, counts, id_of }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> TokenId {
        match self.id_of.get(token) {
            Some(&id) if !is_special(id) => id,
            _ => UNK,
        }
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.id_of.get(token).copied().filter(|&id| !is_special(id))
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or(SPECIAL_TOKENS[UNK as usize])
    }

    /// Corpus frequency; `None` for specials and unknown tokens.
    pub fn count(&self, token: &str) -> Option<u64> {
        self.get(token).map(|id| self.counts[id as usize])
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn encode_text(&self, text: &str) -> Vec<TokenId> {
        self.encode(&tokenize(text))
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&id| self.token(id).to_string()).collect()
    }

    /// Text dump: five special-name header lines, then `token<TAB>count`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for tok in &self.tokens[..NUM_SPECIALS] {
            out.push_str(tok);
            out.push('\n');
        }
        for (tok, count) in self.tokens.iter().zip(&self.counts).skip(NUM_SPECIALS) {
            let _ = writeln!(out, "{tok}\t{count}");
        }
        out
    }

    pub fn parse_dump(text: &str) -> std::result::Result<Vocabulary, String> {
        let mut lines = text.lines();
        for (i, expected) in SPECIAL_TOKENS.iter().enumerate() {
            match lines.next() {
                Some(l) if l == *expected => {}
                other => return Err(format!("line {}: expected {expected}, found {other:?}", i + 1)),
            }
        }
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + NUM_SPECIALS + 1;
            let (tok, count) = line
                .split_once('\t')
                .ok_or_else(|| format!("line {lineno}: expected token<TAB>count"))?;
            let count: u64 = count
                .parse()
                .map_err(|_| format!("line {lineno}: bad count {count:?}"))?;
            if tok.is_empty() || !seen.insert(tok.to_string()) {
                return Err(format!("line {lineno}: empty or duplicate token"));
            }
            entries.push((tok.to_string(), count));
        }
        Ok(Self::from_counted(entries))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.dump()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Vocabulary> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::parse_dump(&text).map_err(|m| Error::Record {
            path: path.to_path_buf(),
            line: m
                .strip_prefix("line ")
                .and_then(|r| r.split(':').next())
                .and_then(|n| n.parse().ok())
                .unwrap_or(0),
            message: m,
        })
    }
}

/// Counts tokens over contexts, questions and options. Tokens seen fewer than
/// `min_count` times are left out and encode to `[UNK]`.
pub fn build_vocab(examples: &[QaExample], min_count: u64) -> Result<Vocabulary> {
    if min_count < 1 {
        return Err(Error::Config("min_count must be at least 1".into()));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for ex in examples {
        let texts = [&ex.context, &ex.question].into_iter().chain(ex.options.iter());
        for text in texts {
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
    }
    let mut entries: Vec<(String, u64)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(Vocabulary::from_counted(entries))
}

fn abbreviations() -> &'static HashSet<String> {
    static ABBREV: OnceLock<HashSet<String>> = OnceLock::new();
    ABBREV.get_or_init(|| word_list(include_str!("../data/abbreviations.txt")))
}

fn domain_nouns() -> &'static HashSet<String> {
    static NOUNS: OnceLock<HashSet<String>> = OnceLock::new();
    NOUNS.get_or_init(|| word_list(include_str!("../data/domain_nouns.txt")))
}

fn word_list(text: &str) -> HashSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect()
}

/// Collapses whitespace runs to single spaces and trims.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Splits on `.`, `!` or `?` followed by whitespace, except after a listed
/// abbreviation. Joining the result with single spaces gives back the
/// whitespace-normalized input.
pub fn split_sentences(context: &str) -> Vec<String> {
    let words: Vec<&str> = context.split_whitespace().collect();
    let mut sentences = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for (i, word) in words.iter().enumerate() {
        current.push(word);
        let terminal = word.ends_with(['.', '!', '?']);
        let last = i + 1 == words.len();
        if terminal && !last && !abbreviations().contains(&word.to_lowercase()) {
            sentences.push(current.join(" "));
            current.clear();
        }
    }
    if !current.is_empty() {
        sentences.push(current.join(" "));
    }
    sentences
}

/// A context cut into sentences, each already encoded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentedContext {
    pub sentences: Vec<Vec<TokenId>>,
    pub source_id: String,
}

impl SegmentedContext {
    pub fn new(source_id: &str, context: &str, vocab: &Vocabulary) -> Self {
        SegmentedContext {
            sentences: split_sentences(context)
                .iter()
                .map(|s| vocab.encode_text(s))
                .filter(|s| !s.is_empty())
                .collect(),
            source_id: source_id.to_string(),
        }
    }

    pub fn tokens(&self) -> Vec<TokenId> {
        self.sentences.concat()
    }
}

const CAPITALIZED_STOPWORDS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "it", "its", "they", "their", "there", "then", "when", "what",
    "which", "who", "how", "if", "in", "on", "at", "as", "and", "but", "or", "so", "because", "after", "before",
    "some", "many", "more", "less", "most", "each", "every", "he", "she", "we", "you", "i", "suppose", "does", "do",
    "will", "is", "are", "was", "were",
];

/// Entity spans for masked entity modeling: the record's own annotations when
/// present, else maximal runs of capitalized words plus listed domain nouns.
pub fn tag_entities(example: &QaExample) -> Vec<Span> {
    if let Some(spans) = &example.entities {
        return spans.clone();
    }
    heuristic_entities(&example.context)
}

pub fn heuristic_entities(text: &str) -> Vec<Span> {
    let chars: Vec<char> = text.chars().collect();
    let tokens = tokenize_with_offsets(text);
    let mut spans = Vec::new();
    let mut run: Option<Span> = None;
    for tok in &tokens {
        let first = chars[tok.start];
        let capitalized = first.is_uppercase() && !CAPITALIZED_STOPWORDS.contains(&tok.text.as_str());
        if capitalized {
            // runs only continue across plain whitespace
            run = match run {
                Some(r) if chars[r.end..tok.start].iter().all(|c| c.is_whitespace()) => {
                    Some(Span::new(r.start, tok.end))
                }
                Some(r) => {
                    spans.push(r);
                    Some(Span::new(tok.start, tok.end))
                }
                None => Some(Span::new(tok.start, tok.end)),
            };
            continue;
        }
        if let Some(r) = run.take() {
            spans.push(r);
        }
        if domain_nouns().contains(&tok.text) {
            spans.push(Span::new(tok.start, tok.end));
        }
    }
    if let Some(r) = run {
        spans.push(r);
    }
    spans
}

/// Maps character spans onto token positions of `tokens`: a token belongs to
/// a span when it lies entirely inside it. Spans covering no token are dropped.
pub fn spans_to_token_ranges(tokens: &[Token], spans: &[Span]) -> Vec<(usize, usize)> {
    spans
        .iter()
        .filter_map(|s| {
            let inside: Vec<usize> = tokens
                .iter()
                .enumerate()
                .filter(|(_, t)| t.start >= s.start && t.end <= s.end)
                .map(|(i, _)| i)
                .collect();
            match (inside.first(), inside.last()) {
                (Some(&a), Some(&b)) => Some((a, b + 1)),
                _ => None,
            }
        })
        .collect()
}
