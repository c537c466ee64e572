use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SEP: usize = 4;
pub const NUM_RESERVED: usize = 5;

const RESERVED_NAMES: [&str; NUM_RESERVED] = ["<pad>", "<bos>", "<eos>", "<unk>", "<sep>"];
pub const VOCAB_HEADER: &str = "ctxseq-vocab v1";

/// Character-level token map. Ids `0..5` are reserved (PAD, BOS, EOS, UNK,
/// SEP); corpus characters start at id 5.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<char>,
    ids: HashMap<char, usize>,
}

impl Vocabulary {
    /// Counts characters over `texts` and keeps those seen at least
    /// `min_count` times, ordered by count (descending) then character.
    pub fn build<I, S>(texts: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: BTreeMap<char, usize> = BTreeMap::new();
        let mut seen_any = false;
        for text in texts {
            seen_any = true;
            for ch in text.as_ref().chars() {
                *counts.entry(ch).or_default() += 1;
            }
        }
        if !seen_any {
            return Err(Error::Corpus(
                "cannot build a vocabulary from an empty stream".into(),
            ));
        }
        let mut entries: Vec<(char, usize)> = counts
            .into_iter()
            .filter(|&(_, n)| n >= min_count)
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(Self::from_tokens(
            entries.into_iter().map(|(c, _)| c).collect(),
        ))
    }

    pub fn from_tokens(tokens: Vec<char>) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i + NUM_RESERVED))
            .collect();
        Self { tokens, ids }
    }

    /// Total size including reserved ids.
    pub fn len(&self) -> usize {
        self.tokens.len() + NUM_RESERVED
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, ch: char) -> usize {
        self.ids.get(&ch).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<char> {
        id.checked_sub(NUM_RESERVED)
            .and_then(|i| self.tokens.get(i))
            .copied()
    }

    pub fn tokens(&self) -> &[char] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars().map(|c| self.id(c)).collect()
    }

    /// Inverse of [`Vocabulary::encode`]. PAD, BOS and EOS are dropped, UNK
    /// renders as U+FFFD and SEP as U+241E.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::with_capacity(ids.len());
        for &id in ids {
            match id {
                PAD | BOS | EOS => {}
                UNK => out.push('\u{FFFD}'),
                SEP => out.push('\u{241E}'),
                _ => out.push(self.token(id).ok_or_else(|| {
                    Error::Index(format!(
                        "token id {id} outside vocabulary of {}",
                        self.len()
                    ))
                })?),
            }
        }
        Ok(out)
    }

    /// Printable name of any id, reserved ones included.
    pub fn display(&self, id: usize) -> String {
        if id < NUM_RESERVED {
            RESERVED_NAMES[id].to_string()
        } else {
            self.token(id)
                .map_or_else(|| format!("<{id}?>"), String::from)
        }
    }

    /// File form: header line, then one escaped token per line in id order.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{VOCAB_HEADER}").unwrap();
        for &c in &self.tokens {
            writeln!(s, "{}", escape(c)).unwrap();
        }
        s
    }

    pub fn from_file_string(s: &str) -> Result<Self> {
        let mut lines = s.split('\n');
        if lines.next() != Some(VOCAB_HEADER) {
            return Err(Error::Format {
                field: "vocab header".into(),
                detail: format!("expected {VOCAB_HEADER:?}"),
            });
        }
        let mut tokens = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let c = unescape(line).ok_or_else(|| Error::Format {
                field: format!("vocab line {}", i + 2),
                detail: format!("not a single token: {line:?}"),
            })?;
            tokens.push(c);
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::util::write_atomic(path, self.to_file_string().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file_string(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the file form, hex encoded.
    pub fn hash(&self) -> String {
        crate::util::hex(&Sha256::digest(self.to_file_string().as_bytes()))
    }
}

fn escape(c: char) -> String {
    match c {
        '\\' => "\\\\".into(),
        '\n' => "\\n".into(),
        '\r' => "\\r".into(),
        '\t' => "\\t".into(),
        c => c.to_string(),
    }
}

fn unescape(line: &str) -> Option<char> {
    let mut chars = line.chars();
    let first = chars.next()?;
    let c = if first == '\\' {
        match chars.next()? {
            '\\' => '\\',
            'n' => '\n',
            'r' => '\r',
            't' => '\t',
            _ => return None,
        }
    } else {
        first
    };
    chars.next().is_none().then_some(c)
}
