use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{symbol, TaskKind};
use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

/// Rendered in place of UNK by [`TokenizerSpec::decode`].
pub const UNK_TEXT: &str = "\u{FFFD}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    Char,
    GreedyMerge,
}

impl std::str::FromStr for TokenizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "char" => Ok(TokenizerKind::Char),
            "greedy_merge" | "merge" => Ok(TokenizerKind::GreedyMerge),
            other => Err(Error::invalid(format!("unknown tokenizer kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub bos: TokenId,
    pub eos: TokenId,
    pub pad: TokenId,
    pub unk: TokenId,
}

/// Token inventory plus the rules for mapping text onto it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "RawTokenizer", into = "RawTokenizer")]
pub struct TokenizerSpec {
    kind: TokenizerKind,
    vocab: Vec<String>,
    special: SpecialTokens,
    lookup: HashMap<String, TokenId>,
    max_token_chars: usize,
}

#[derive(Serialize, Deserialize)]
struct RawTokenizer {
    kind: TokenizerKind,
    vocab: Vec<String>,
}

impl TryFrom<RawTokenizer> for TokenizerSpec {
    type Error = Error;

    fn try_from(raw: RawTokenizer) -> Result<Self> {
        TokenizerSpec::new(raw.kind, raw.vocab)
    }
}

impl From<TokenizerSpec> for RawTokenizer {
    fn from(t: TokenizerSpec) -> Self {
        RawTokenizer {
            kind: t.kind,
            vocab: t.vocab,
        }
    }
}

impl PartialEq for TokenizerSpec {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind && self.vocab == other.vocab
    }
}

impl TokenizerSpec {
    /// Builds a tokenizer from an explicit vocabulary. The four special
    /// tokens must be present as `<bos>`, `<eos>`, `<pad>`, `<unk>`.
    pub fn new(kind: TokenizerKind, vocab: Vec<String>) -> Result<Self> {
        let mut lookup = HashMap::with_capacity(vocab.len());
        for (i, tok) in vocab.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::invalid("empty token in vocabulary"));
            }
            if lookup.insert(tok.clone(), i as TokenId).is_some() {
                return Err(Error::invalid(format!("duplicate token `{tok}`")));
            }
        }
        let find = |s: &str| {
            lookup
                .get(s)
                .copied()
                .ok_or_else(|| Error::invalid(format!("special token {s} missing")))
        };
        let special = SpecialTokens {
            bos: find(BOS)?,
            eos: find(EOS)?,
            pad: find(PAD)?,
            unk: find(UNK)?,
        };
        let is_special = |s: &str| [BOS, EOS, PAD, UNK].contains(&s);
        let normal = vocab.iter().filter(|t| !is_special(t));
        match kind {
            TokenizerKind::Char => {
                if let Some(t) = normal.clone().find(|t| t.chars().count() != 1) {
                    return Err(Error::invalid(format!("char tokenizer has multi-char token `{t}`")));
                }
            }
            TokenizerKind::GreedyMerge => {
                for t in normal.clone() {
                    for c in t.chars() {
                        if !lookup.contains_key(c.encode_utf8(&mut [0; 4]) as &str) {
                            return Err(Error::invalid(format!(
                                "token `{t}` uses character `{c}` that is not itself a token"
                            )));
                        }
                    }
                }
            }
        }
        let max_token_chars = normal.map(|t| t.chars().count()).max().unwrap_or(1);
        Ok(Self {
            kind,
            vocab,
            special,
            lookup,
            max_token_chars,
        })
    }

    /// Character tokenizer over the distinct characters of `chars`.
    pub fn char_level(chars: &str) -> Result<Self> {
        let set: BTreeSet<char> = chars.chars().collect();
        let mut vocab: Vec<String> = [BOS, EOS, PAD, UNK].iter().map(|s| s.to_string()).collect();
        vocab.extend(set.into_iter().map(String::from));
        Self::new(TokenizerKind::Char, vocab)
    }

    /// Single characters of `chars` plus the given multi-character merges.
    pub fn greedy_merge(chars: &str, merges: &[&str]) -> Result<Self> {
        let base = Self::char_level(chars)?;
        let mut vocab = base.vocab;
        for m in merges {
            if !vocab.iter().any(|t| t == m) {
                vocab.push(m.to_string());
            }
        }
        Self::new(TokenizerKind::GreedyMerge, vocab)
    }

    /// Tokenizer covering the synthetic task language for an alphabet of
    /// `alphabet_size` symbols. The merge variant adds task names, the
    /// separator, and all symbol bigrams.
    pub fn for_tasks(kind: TokenizerKind, alphabet_size: usize) -> Result<Self> {
        let mut chars: String = TaskKind::ALL.iter().map(|k| k.name()).collect();
        chars.push_str(" :=");
        chars.extend((0..alphabet_size).map(symbol));
        match kind {
            TokenizerKind::Char => Self::char_level(&chars),
            TokenizerKind::GreedyMerge => {
                let mut merges: Vec<String> = TaskKind::ALL.iter().map(|k| k.name().to_string()).collect();
                merges.push(" : ".into());
                merges.push(" =".into());
                for a in 0..alphabet_size {
                    for b in 0..alphabet_size {
                        merges.push([symbol(a), symbol(b)].iter().collect());
                    }
                }
                let refs: Vec<&str> = merges.iter().map(String::as_str).collect();
                Self::greedy_merge(&chars, &refs)
            }
        }
    }

    pub fn kind(&self) -> TokenizerKind {
        self.kind
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn special(&self) -> SpecialTokens {
        self.special
    }

    pub fn bos(&self) -> TokenId {
        self.special.bos
    }

    pub fn eos(&self) -> TokenId {
        self.special.eos
    }

    pub fn pad(&self) -> TokenId {
        self.special.pad
    }

    pub fn unk(&self) -> TokenId {
        self.special.unk
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        let s = self.special;
        id == s.bos || id == s.eos || id == s.pad || id == s.unk
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.lookup.get(token).copied()
    }

    pub fn token_str(&self, id: TokenId) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    /// Text a token contributes when decoded. Specials other than UNK
    /// contribute nothing.
    pub fn token_text(&self, id: TokenId) -> &str {
        if id == self.special.unk {
            UNK_TEXT
        } else if self.is_special(id) {
            ""
        } else {
            self.vocab.get(id as usize).map(String::as_str).unwrap_or(UNK_TEXT)
        }
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        match self.kind {
            TokenizerKind::Char => text
                .chars()
                .map(|c| self.lookup_normal(c.encode_utf8(&mut [0; 4])).unwrap_or(self.special.unk))
                .collect(),
            TokenizerKind::GreedyMerge => self.encode_longest_match(text),
        }
    }

    fn lookup_normal(&self, s: &str) -> Option<TokenId> {
        self.lookup.get(s).copied().filter(|&id| !self.is_special(id))
    }

    fn encode_longest_match(&self, text: &str) -> Vec<TokenId> {
        let bounds: Vec<usize> = text.char_indices().map(|(i, _)| i).chain([text.len()]).collect();
        let n_chars = bounds.len() - 1;
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < n_chars {
            let longest = self.max_token_chars.min(n_chars - pos);
            let hit = (1..=longest)
                .rev()
                .find_map(|len| self.lookup_normal(&text[bounds[pos]..bounds[pos + len]]).map(|id| (id, len)));
            match hit {
                Some((id, len)) => {
                    out.push(id);
                    pos += len;
                }
                None => {
                    out.push(self.special.unk);
                    pos += 1;
                }
            }
        }
        out
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&id| self.token_text(id)).collect()
    }

    /// Hex SHA-256 over the kind and vocabulary.
    pub fn vocab_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}", self.kind).as_bytes());
        for t in &self.vocab {
            h.update((t.len() as u64).to_le_bytes());
            h.update(t.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn char_encoding() {
        let t = TokenizerSpec::char_level("ab").unwrap();
        assert_eq!(t.encode("ab"), vec![t.id_of("a").unwrap(), t.id_of("b").unwrap()]);
        assert_eq!(t.encode("az"), vec![t.id_of("a").unwrap(), t.unk()]);
        assert_eq!(t.decode(&t.encode("abba")), "abba");
    }

    #[test]
    fn greedy_longest_match() {
        let t = TokenizerSpec::greedy_merge("ab", &["ab"]).unwrap();
        let ids = t.encode("aba");
        assert_eq!(ids, vec![t.id_of("ab").unwrap(), t.id_of("a").unwrap()]);
        assert_eq!(t.decode(&ids), "aba");
    }

    #[test]
    fn specials_are_never_matched_from_text() {
        let t = TokenizerSpec::char_level("<bo>s").unwrap();
        let ids = t.encode("<bos>");
        assert_eq!(ids.len(), 5);
        assert!(!ids.contains(&t.bos()));
    }

    #[test]
    fn rejects_duplicates_and_open_merges() {
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert!(TokenizerSpec::new(TokenizerKind::Char, v(&[BOS, EOS, PAD, UNK, "a", "a"])).is_err());
        assert!(TokenizerSpec::new(TokenizerKind::Char, v(&[BOS, EOS, PAD, "a"])).is_err());
        assert!(TokenizerSpec::new(TokenizerKind::GreedyMerge, v(&[BOS, EOS, PAD, UNK, "a", "ab"])).is_err());
    }

    #[test]
    fn task_tokenizers_cover_instructions() {
        for kind in [TokenizerKind::Char, TokenizerKind::GreedyMerge] {
            let t = TokenizerSpec::for_tasks(kind, 5).unwrap();
            let text = "REVERSE : abcde";
            let ids = t.encode(text);
            assert!(!ids.contains(&t.unk()));
            assert_eq!(t.decode(&ids), text);
        }
        let merge = TokenizerSpec::for_tasks(TokenizerKind::GreedyMerge, 5).unwrap();
        assert_eq!(merge.encode("SORT : abc").len(), 4);
    }

    #[test]
    fn serde_round_trip() {
        let t = TokenizerSpec::for_tasks(TokenizerKind::GreedyMerge, 3).unwrap();
        let s = serde_json::to_string(&t).unwrap();
        let back: TokenizerSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(t, back);
        assert_eq!(t.vocab_hash(), back.vocab_hash());
    }
}
