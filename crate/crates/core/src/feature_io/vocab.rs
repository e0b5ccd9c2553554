use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const SOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const RESERVED: [&str; 4] = ["<pad>", "<sos>", "<eos>", "<unk>"];

/// Caption as vocabulary indices, normally framed by `<sos>` … `<eos>`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct TokenSequence(pub Vec<u32>);

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn ids(&self) -> Vec<usize> {
        self.0.iter().map(|&t| t as usize).collect()
    }
}

/// Bijection between token strings and indices with the four reserved
/// tokens pinned at 0..=3.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED {
            v.insert(t);
        }
        v
    }

    /// Vocabulary over all words in `captions`, in order of first appearance.
    pub fn from_captions<'a, I, S>(captions: I) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut v = Self::new();
        for caption in captions {
            for w in caption {
                v.insert(w.as_ref());
            }
        }
        v
    }

    /// Returns the index of `token`, adding it if new.
    pub fn insert(&mut self, token: &str) -> u32 {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        let i = self.tokens.len() as u32;
        self.tokens.push(token.to_owned());
        self.index.insert(token.to_owned(), i);
        i
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_reserved(id: u32) -> bool {
        id <= UNK
    }

    /// `[<sos>, ids..., <eos>]`; unknown words become `<unk>`.
    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> TokenSequence {
        let mut ids = Vec::with_capacity(words.len() + 2);
        ids.push(SOS);
        ids.extend(words.iter().map(|w| self.id(w.as_ref()).unwrap_or(UNK)));
        ids.push(EOS);
        TokenSequence(ids)
    }

    /// Words of a sequence with `<sos>`, `<eos>` and `<pad>` removed; decoding
    /// stops at the first `<eos>`.
    pub fn decode(&self, seq: &TokenSequence) -> Vec<String> {
        seq.0
            .iter()
            .copied()
            .take_while(|&t| t != EOS)
            .filter(|&t| t != SOS && t != PAD)
            .map(|t| self.token(t).unwrap_or("<unk>").to_owned())
            .collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for (line_no, line) in text.lines().enumerate() {
            if line.is_empty() || line.contains(char::is_whitespace) {
                return Err(Error::Parse {
                    path: path.into(),
                    line: line_no + 1,
                    message: format!("invalid token {line:?}"),
                });
            }
            if v.index.contains_key(line) {
                return Err(Error::Parse {
                    path: path.into(),
                    line: line_no + 1,
                    message: format!("duplicate token {line:?}"),
                });
            }
            v.insert(line);
        }
        if v.tokens.len() < RESERVED.len() || v.tokens[..4] != RESERVED {
            return Err(Error::Parse {
                path: path.into(),
                line: 1,
                message: "reserved tokens <pad> <sos> <eos> <unk> must open the file".into(),
            });
        }
        Ok(v)
    }
}
