//! Story ingestion, word-level vocabulary and fixed-length encoding.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::numerics::Rng;
use crate::{Error, Result};

pub type TokenId = u32;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const START: &str = "[START]";
pub const END: &str = "[END]";
pub const SPECIALS: [&str; 4] = [PAD, UNK, START, END];

pub const PAD_ID: TokenId = 0;
pub const UNK_ID: TokenId = 1;
pub const START_ID: TokenId = 2;
pub const END_ID: TokenId = 3;

pub const DEFAULT_VOCAB_SIZE: usize = 10_000;
pub const DEFAULT_MAX_LEN: usize = 150;

/// One raw story; the JSON Lines form is `{"text": ...}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryRecord {
    pub text: String,
}

impl StoryRecord {
    pub fn new(text: impl Into<String>) -> Self {
        Self { text: text.into() }
    }
}

/// Lowercases, replaces every character other than a letter, digit or
/// apostrophe with a space, and splits on whitespace.
pub fn normalize_text(raw: &str) -> Vec<String> {
    let cleaned: String = raw
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() || c == '\'' { c } else { ' ' })
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

/// Stories read from disk plus the number of lines that were skipped.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadedCorpus {
    pub stories: Vec<StoryRecord>,
    pub skipped: usize,
}

/// Reads up to `limit` stories from a JSON Lines file (`{"text": ...}` per
/// line) or a plain-text file with one story per line. The format is chosen
/// by the first non-blank character: `{` means JSON Lines.
///
/// Blank lines are ignored. Malformed JSON lines and stories that normalize
/// to nothing are skipped and counted.
pub fn load_corpus(path: impl AsRef<Path>, limit: usize) -> Result<LoadedCorpus> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = LoadedCorpus::default();
    let mut jsonl: Option<bool> = None;
    for line in BufReader::new(file).lines() {
        if out.stories.len() >= limit {
            break;
        }
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let is_json = *jsonl.get_or_insert_with(|| trimmed.starts_with('{'));
        let text = if is_json {
            match serde_json::from_str::<StoryRecord>(trimmed) {
                Ok(s) => s.text,
                Err(_) => {
                    out.skipped += 1;
                    continue;
                }
            }
        } else {
            trimmed.to_owned()
        };
        if normalize_text(&text).is_empty() {
            out.skipped += 1;
            continue;
        }
        out.stories.push(StoryRecord { text });
    }
    Ok(out)
}

/// Bidirectional token/id map. Ids 0..4 are the specials; the rest are
/// ordered by descending frequency, ties broken lexicographically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Specials followed by `tokens`, in that order.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let all = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(tokens.into_iter().map(Into::into));
        let mut tokens = Vec::new();
        let mut ids = HashMap::new();
        for t in all {
            if ids.insert(t.clone(), tokens.len() as TokenId).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate token {t:?}")));
            }
            tokens.push(t);
        }
        Ok(Self { tokens, ids })
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

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Writes one token per line; line number minus one is the id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
        for t in &self.tokens {
            writeln!(f, "{t}").map_err(|e| Error::io(path, e))?;
        }
        f.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let lines: Vec<&str> = text.lines().collect();
        for (i, special) in SPECIALS.iter().enumerate() {
            match lines.get(i) {
                Some(l) if l == special => {}
                Some(l) => return Err(parse_err(i + 1, format!("expected {special}, found {l:?}"))),
                None => return Err(parse_err(i + 1, format!("expected {special}, found end of file"))),
            }
        }
        let mut tokens = Vec::with_capacity(lines.len());
        let mut ids = HashMap::with_capacity(lines.len());
        for (i, l) in lines.iter().enumerate() {
            if l.is_empty() || l.chars().any(char::is_whitespace) {
                return Err(parse_err(i + 1, format!("invalid token {l:?}")));
            }
            if ids.insert(l.to_string(), i as TokenId).is_some() {
                return Err(parse_err(i + 1, format!("duplicate token {l:?}")));
            }
            tokens.push(l.to_string());
        }
        Ok(Self { tokens, ids })
    }
}

/// Keeps the `max_size - 4` most frequent normalized tokens after the specials.
pub fn build_vocabulary(stories: &[StoryRecord], max_size: usize) -> Result<Vocabulary> {
    if max_size < 5 {
        return Err(Error::InvalidArgument(format!("vocabulary size {max_size} < 5")));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for s in stories {
        for t in normalize_text(&s.text) {
            *counts.entry(t).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, u64)> = counts
        .into_iter()
        .filter(|(t, _)| !SPECIALS.contains(&t.as_str()))
        .collect();
    ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - SPECIALS.len());
    Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t))
}

/// Aligned id sequences for one story.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedStory {
    pub enc_ids: Vec<TokenId>,
    pub dec_input: Vec<TokenId>,
    pub dec_target: Vec<TokenId>,
}

/// Encodes `story` for teacher-forced reconstruction.
///
/// The encoder side is the first `max_len` tokens, right-padded. The decoder
/// side is `[START] + first (max_len - 1) tokens + [END]`, padded to
/// `max_len + 1`; its first `max_len` ids are the input and its last `max_len`
/// ids the target.
pub fn encode_story(vocab: &Vocabulary, story: &StoryRecord, max_len: usize) -> Result<EncodedStory> {
    if max_len < 2 {
        return Err(Error::InvalidArgument(format!("max_len {max_len} < 2")));
    }
    Ok(encode_tokens(vocab, &normalize_text(&story.text), max_len))
}

pub(crate) fn encode_tokens(vocab: &Vocabulary, tokens: &[String], max_len: usize) -> EncodedStory {
    let ids: Vec<TokenId> = tokens.iter().map(|t| vocab.id(t).unwrap_or(UNK_ID)).collect();
    let mut enc_ids: Vec<TokenId> = ids.iter().copied().take(max_len).collect();
    enc_ids.resize(max_len, PAD_ID);
    let mut dec = Vec::with_capacity(max_len + 1);
    dec.push(START_ID);
    dec.extend(ids.iter().copied().take(max_len - 1));
    dec.push(END_ID);
    dec.resize(max_len + 1, PAD_ID);
    EncodedStory {
        enc_ids,
        dec_input: dec[..max_len].to_vec(),
        dec_target: dec[1..].to_vec(),
    }
}

/// Joins tokens with single spaces, dropping `[PAD]` and `[START]` and
/// stopping at the first `[END]`.
pub fn decode_ids(vocab: &Vocabulary, ids: &[TokenId]) -> Result<String> {
    let mut words = Vec::new();
    for &id in ids {
        let token = vocab.token(id).ok_or(Error::IdOutOfRange {
            what: "token",
            id: id as usize,
            limit: vocab.len(),
        })?;
        match id {
            END_ID => break,
            PAD_ID | START_ID => {}
            _ => words.push(token),
        }
    }
    Ok(words.join(" "))
}

/// `(batch, max_len)` id arrays for one training step, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedBatch {
    pub batch: usize,
    pub max_len: usize,
    pub enc_ids: Vec<TokenId>,
    pub dec_input: Vec<TokenId>,
    pub dec_target: Vec<TokenId>,
}

impl EncodedBatch {
    pub fn from_stories(stories: &[&EncodedStory]) -> Self {
        let max_len = stories.first().map_or(0, |s| s.enc_ids.len());
        let mut b = Self {
            batch: stories.len(),
            max_len,
            enc_ids: Vec::with_capacity(stories.len() * max_len),
            dec_input: Vec::with_capacity(stories.len() * max_len),
            dec_target: Vec::with_capacity(stories.len() * max_len),
        };
        for s in stories {
            b.enc_ids.extend_from_slice(&s.enc_ids);
            b.dec_input.extend_from_slice(&s.dec_input);
            b.dec_target.extend_from_slice(&s.dec_target);
        }
        b
    }

    pub fn positions(&self) -> usize {
        self.batch * self.max_len
    }
}

/// Splits encoded stories into batches of at most `batch_size`, keeping the
/// final partial batch. With a seed the stories are permuted first.
pub fn make_batches(encoded: &[EncodedStory], batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<EncodedBatch>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut order: Vec<&EncodedStory> = encoded.iter().collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(Rng::new(seed).inner_mut());
    }
    Ok(order.chunks(batch_size).map(EncodedBatch::from_stories).collect())
}

/// Deterministic news-like stories for demos and tests when no real corpus
/// is at hand. Each story is two to six template sentences drawn from fixed
/// word lists.
pub fn synthetic_stories(count: usize, seed: u64) -> Vec<StoryRecord> {
    const PLACES: &[&str] = &[
        "Springfield", "Riverton", "the capital", "Lakeview", "Oakdale", "the northern district", "Port Allen",
        "Greenfield", "the county", "Maple Heights", "downtown", "the harbor", "Westbrook", "the valley",
    ];
    const ACTORS: &[&str] = &[
        "the mayor", "city officials", "the council", "local police", "researchers", "the governor",
        "school leaders", "the company", "state regulators", "residents", "the committee", "investors",
        "health officials", "the union", "firefighters", "the board", "analysts", "farmers",
    ];
    const VERBS: &[&str] = &[
        "announced", "approved", "rejected", "reported", "proposed", "delayed", "launched", "reviewed",
        "criticized", "celebrated", "funded", "expanded", "postponed", "investigated", "defended",
    ];
    const OBJECTS: &[&str] = &[
        "a new budget", "the road project", "plans for a park", "a tax increase", "the housing program",
        "a water treatment plant", "the school schedule", "a wildfire response plan", "the transit line",
        "an education grant", "the annual festival", "a hospital expansion", "new safety rules",
        "the bridge repairs", "a jobs program", "the election results", "a trade agreement",
    ];
    const WHEN: &[&str] = &[
        "on monday", "on tuesday", "on wednesday", "on thursday", "on friday", "last week", "this morning",
        "late on sunday", "earlier this year", "after a long meeting",
    ];
    const TAILS: &[&str] = &[
        "officials said", "according to a statement", "the report said", "a spokesperson confirmed",
        "residents said", "the agency noted", "sources said",
    ];
    let mut rng = Rng::new(seed);
    let pick = |list: &[&'static str], rng: &mut Rng| list[rng.below(list.len())];
    (0..count)
        .map(|_| {
            let sentences = 2 + rng.below(5);
            let mut parts = Vec::with_capacity(sentences);
            for _ in 0..sentences {
                let s = match rng.below(4) {
                    0 => format!(
                        "{} in {} {} {} {}, {}.",
                        pick(ACTORS, &mut rng),
                        pick(PLACES, &mut rng),
                        pick(VERBS, &mut rng),
                        pick(OBJECTS, &mut rng),
                        pick(WHEN, &mut rng),
                        pick(TAILS, &mut rng)
                    ),
                    1 => format!(
                        "The plan would cost {} million dollars and affect {} families in {}.",
                        1 + rng.below(90),
                        100 + rng.below(900),
                        pick(PLACES, &mut rng)
                    ),
                    2 => format!(
                        "{} {} {} {}.",
                        pick(ACTORS, &mut rng),
                        pick(VERBS, &mut rng),
                        pick(OBJECTS, &mut rng),
                        pick(WHEN, &mut rng)
                    ),
                    _ => format!(
                        "{} said {} {} {} in {}.",
                        pick(ACTORS, &mut rng),
                        pick(ACTORS, &mut rng),
                        pick(VERBS, &mut rng),
                        pick(OBJECTS, &mut rng),
                        pick(PLACES, &mut rng)
                    ),
                };
                let mut chars = s.chars();
                let capitalized = match chars.next() {
                    Some(f) => f.to_uppercase().chain(chars).collect(),
                    None => s,
                };
                parts.push(capitalized);
            }
            StoryRecord::new(parts.join(" "))
        })
        .collect()
}
