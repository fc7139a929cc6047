//! Corpus ingestion: word-level tokenizer, frequency-ordered vocabulary and
//! entity-association pairs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const MASK: u32 = 2;
pub const CLS: u32 = 3;
pub const NUM_SPECIAL: u32 = 4;

pub const SPECIAL_TOKENS: [&str; 4] = ["[PAD]", "[UNK]", "[MASK]", "[CLS]"];

pub const DEFAULT_MAX_SEQ_LEN: usize = 128;

pub fn is_special(id: u32) -> bool {
    id < NUM_SPECIAL
}

/// Lowercases and splits on whitespace; every punctuation character becomes
/// its own token.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !ch.is_whitespace() && !ch.is_control() {
            out.push(ch.to_lowercase().collect());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Vocabulary from an ordered list of non-special tokens; ids start at 4.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut id_to_token: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(tokens.into_iter().map(Into::into));
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, tok) in id_to_token.iter().enumerate() {
            if token_to_id.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::contract(format!(
                    "duplicate vocabulary token `{tok}`"
                )));
            }
        }
        Ok(Self {
            token_to_id,
            id_to_token,
        })
    }

    /// Counts tokens over `lines` and keeps those seen at least `min_freq`
    /// times, ordered by descending frequency then lexicographically.
    pub fn from_lines<'a>(
        lines: impl IntoIterator<Item = &'a str>,
        min_freq: usize,
    ) -> Result<Self> {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut any = false;
        for line in lines {
            for w in split_words(line) {
                any = true;
                *counts.entry(w).or_default() += 1;
            }
        }
        if !any {
            return Err(Error::contract("corpus contains no tokens"));
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_freq.max(1) && !SPECIAL_TOKENS.contains(&w.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(ranked.into_iter().map(|(w, _)| w))
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.id_to_token
            .get(id as usize)
            .map_or(SPECIAL_TOKENS[UNK as usize], String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_words(text).iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `token<TAB>id` per line, in id order.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (i, tok) in self.id_to_token.iter().enumerate() {
            s.push_str(tok);
            s.push('\t');
            s.push_str(&i.to_string());
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut tokens = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message,
            };
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| parse_err("expected `token<TAB>id`".into()))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|e| parse_err(format!("bad id `{id}`: {e}")))?;
            if id != tokens.len() {
                return Err(parse_err(format!(
                    "ids must be contiguous, expected {}",
                    tokens.len()
                )));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < NUM_SPECIAL as usize
            || tokens[..NUM_SPECIAL as usize]
                .iter()
                .zip(SPECIAL_TOKENS)
                .any(|(a, b)| a != b)
        {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: "vocabulary must start with the four special tokens".into(),
            });
        }
        Self::from_tokens(tokens.into_iter().skip(NUM_SPECIAL as usize))
    }

    /// Fraction of token occurrences in `lines` that map to a non-UNK id.
    pub fn coverage<'a>(&self, lines: impl IntoIterator<Item = &'a str>) -> f64 {
        let (mut hit, mut total) = (0usize, 0usize);
        for line in lines {
            for id in self.encode(line) {
                total += 1;
                hit += usize::from(id != UNK);
            }
        }
        if total == 0 {
            0.0
        } else {
            hit as f64 / total as f64
        }
    }
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_owned).collect())
}

/// Builds a vocabulary from a one-document-per-line corpus file.
pub fn build_vocab(corpus_path: &Path, min_freq: usize) -> Result<Vocab> {
    let lines = read_lines(corpus_path)?;
    Vocab::from_lines(lines.iter().map(String::as_str), min_freq)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub entity_id: Option<String>,
    pub tokens: Vec<u32>,
    /// Token count before truncation.
    pub raw_len: usize,
}

impl Document {
    pub fn new(tokens: Vec<u32>) -> Self {
        Self {
            entity_id: None,
            raw_len: tokens.len(),
            tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn tokenize(text: &str, vocab: &Vocab, max_seq_len: usize) -> Document {
    let mut tokens = vocab.encode(text);
    let raw_len = tokens.len();
    tokens.truncate(max_seq_len);
    Document {
        entity_id: None,
        tokens,
        raw_len,
    }
}

/// Tokenizes every non-blank line of a corpus file.
pub fn load_corpus(path: &Path, vocab: &Vocab, max_seq_len: usize) -> Result<Vec<Document>> {
    Ok(read_lines(path)?
        .iter()
        .filter(|l| !l.trim().is_empty())
        .map(|l| tokenize(l, vocab, max_seq_len))
        .filter(|d| !d.is_empty())
        .collect())
}

/// Undirected entity associations with tokenized content for each entity.
#[derive(Clone, Debug, Default)]
pub struct EntityPairSet {
    /// Each pair stored once, smaller id first, in first-seen order.
    pub pairs: Vec<(String, String)>,
    pub content: BTreeMap<String, Document>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PairLoadStats {
    pub dropped_missing: usize,
    pub dropped_self: usize,
    pub duplicates: usize,
}

impl EntityPairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn docs(&self, i: usize) -> (&Document, &Document) {
        let (a, b) = &self.pairs[i];
        (&self.content[a], &self.content[b])
    }

    /// Entities that occur in at least one pair, sorted.
    pub fn entities(&self) -> Vec<&str> {
        let set: BTreeSet<&str> = self
            .pairs
            .iter()
            .flat_map(|(a, b)| [a.as_str(), b.as_str()])
            .collect();
        set.into_iter().collect()
    }

    pub fn neighbours(&self) -> BTreeMap<&str, BTreeSet<&str>> {
        let mut map: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for (a, b) in &self.pairs {
            map.entry(a).or_default().insert(b);
            map.entry(b).or_default().insert(a);
        }
        map
    }

    /// Builds the set from already-parsed rows.
    pub fn from_parts(
        pairs: impl IntoIterator<Item = (String, String)>,
        content: BTreeMap<String, Document>,
    ) -> (Self, PairLoadStats) {
        let mut stats = PairLoadStats::default();
        let mut seen = BTreeSet::new();
        let mut kept = Vec::new();
        for (a, b) in pairs {
            if a == b {
                stats.dropped_self += 1;
                continue;
            }
            if !content.contains_key(&a) || !content.contains_key(&b) {
                stats.dropped_missing += 1;
                continue;
            }
            let key = if a <= b { (a, b) } else { (b, a) };
            if seen.insert(key.clone()) {
                kept.push(key);
            } else {
                stats.duplicates += 1;
            }
        }
        (
            Self {
                pairs: kept,
                content,
            },
            stats,
        )
    }
}

fn parse_tsv2(path: &Path) -> Result<Vec<(usize, String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((a, b)) = line.split_once('\t') else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "expected two tab-separated columns".into(),
            });
        };
        let a = a.trim();
        if a.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "empty first column".into(),
            });
        }
        rows.push((i + 1, a.to_string(), b.trim().to_string()));
    }
    Ok(rows)
}

/// Reads `id_a<TAB>id_b` pairs and `id<TAB>text` content.
pub fn load_entity_pairs(
    pairs_path: &Path,
    content_path: &Path,
    vocab: &Vocab,
    max_seq_len: usize,
) -> Result<(EntityPairSet, PairLoadStats)> {
    let content: BTreeMap<String, Document> = load_content(content_path, vocab, max_seq_len)?;
    let mut pairs = Vec::new();
    for (line, a, b) in parse_tsv2(pairs_path)? {
        if b.is_empty() || b.contains('\t') {
            return Err(Error::Parse {
                path: pairs_path.to_path_buf(),
                line,
                message: "expected `id_a<TAB>id_b`".into(),
            });
        }
        pairs.push((a, b));
    }
    Ok(EntityPairSet::from_parts(pairs, content))
}

pub fn load_content(
    path: &Path,
    vocab: &Vocab,
    max_seq_len: usize,
) -> Result<BTreeMap<String, Document>> {
    Ok(parse_tsv2(path)?
        .into_iter()
        .map(|(_, id, text)| {
            let mut doc = tokenize(&text, vocab, max_seq_len);
            doc.entity_id = Some(id.clone());
            (id, doc)
        })
        .collect())
}
