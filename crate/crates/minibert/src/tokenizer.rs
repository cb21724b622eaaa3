//! WordPiece tokenization and sequence assembly.
//!
//! Text is first split on whitespace with punctuation isolated into its own
//! tokens (optionally lowercased and accent stripped), then each word is
//! greedily matched longest-prefix-first against the vocabulary, with
//! non-initial pieces carrying the `##` continuation prefix. Words with no
//! match at all collapse to `[UNK]`. Sequences are packed as
//! `[CLS] a [SEP]` or `[CLS] a [SEP] b [SEP]` with segment ids 0 through the
//! first `[SEP]` inclusive and 1 afterwards.

use std::collections::HashMap;
use std::path::Path;

use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

pub const SPECIAL_TOKENS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

const CONTINUATION: &str = "##";

/// Words longer than this many characters are not wordpiece-matched and map
/// straight to `[UNK]`.
const MAX_WORD_CHARS: usize = 100;

pub type TokenId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenizerConfig {
    pub lowercase: bool,
    pub strip_accents: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            lowercase: true,
            strip_accents: true,
        }
    }
}

/// Immutable vocabulary: dense ids in file line order, with the five special
/// tokens each present exactly once.
#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
    pad: TokenId,
    unk: TokenId,
    cls: TokenId,
    sep: TokenId,
    mask: TokenId,
}

impl Vocab {
    pub fn from_lines<I: IntoIterator<Item = S>, S: Into<String>>(lines: I) -> Result<Self> {
        let tokens: Vec<String> = lines.into_iter().map(Into::into).collect();
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::Vocab(format!("empty token at line {}", i + 1)));
            }
            if let Some(prev) = ids.insert(tok.clone(), i as TokenId) {
                return Err(Error::Vocab(format!(
                    "duplicate token {:?} at lines {} and {}",
                    tok,
                    prev + 1,
                    i + 1
                )));
            }
        }
        let lookup = |name: &str| -> Result<TokenId> {
            ids.get(name)
                .copied()
                .ok_or_else(|| Error::Vocab(format!("missing special token {}", name)))
        };
        Ok(Vocab {
            pad: lookup(PAD)?,
            unk: lookup(UNK)?,
            cls: lookup(CLS)?,
            sep: lookup(SEP)?,
            mask: lookup(MASK)?,
            tokens,
            ids,
        })
    }

    /// Load a UTF-8 vocab file, one token per line, line index = id.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Vocab(format!("cannot read {}: {}", path.display(), e)))?;
        Self::from_lines(text.lines().map(|l| l.to_string()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn pad_id(&self) -> TokenId {
        self.pad
    }
    pub fn unk_id(&self) -> TokenId {
        self.unk
    }
    pub fn cls_id(&self) -> TokenId {
        self.cls
    }
    pub fn sep_id(&self) -> TokenId {
        self.sep
    }
    pub fn mask_id(&self) -> TokenId {
        self.mask
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id == self.pad || id == self.unk || id == self.cls || id == self.sep || id == self.mask
    }

    /// Ids eligible as random replacement tokens (everything non-special).
    pub fn non_special_ids(&self) -> Vec<TokenId> {
        (0..self.len() as TokenId)
            .filter(|&id| !self.is_special(id))
            .collect()
    }

    pub fn ids_to_tokens(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&id| self.token(id).to_string()).collect()
    }

    pub fn tokens_to_ids(&self, tokens: &[String]) -> Vec<TokenId> {
        tokens
            .iter()
            .map(|t| self.id(t).unwrap_or(self.unk))
            .collect()
    }
}

fn is_combining_mark(c: char) -> bool {
    matches!(c, '\u{0300}'..='\u{036f}' | '\u{1ab0}'..='\u{1aff}' | '\u{1dc0}'..='\u{1dff}' | '\u{20d0}'..='\u{20ff}' | '\u{fe20}'..='\u{fe2f}')
}

fn normalize_word(word: &str, cfg: TokenizerConfig) -> String {
    let mut s = if cfg.lowercase {
        word.to_lowercase()
    } else {
        word.to_string()
    };
    if cfg.strip_accents {
        s = s.nfd().filter(|c| !is_combining_mark(*c)).collect();
    }
    s
}

/// Whitespace split with punctuation isolated into single-char tokens.
/// Anything neither alphanumeric nor whitespace counts as punctuation.
pub fn basic_split(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if !ch.is_alphanumeric() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn wordpiece_word(word: &str, vocab: &Vocab, out: &mut Vec<String>) {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() > MAX_WORD_CHARS {
        out.push(UNK.to_string());
        return;
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut matched = None;
        while start < end {
            let mut piece: String = chars[start..end].iter().collect();
            if start > 0 {
                piece = format!("{}{}", CONTINUATION, piece);
            }
            if vocab.id(&piece).is_some() {
                matched = Some(piece);
                break;
            }
            end -= 1;
        }
        match matched {
            Some(piece) => {
                pieces.push(piece);
                start = end;
            }
            None => {
                // Whole word becomes a single UNK when any part fails.
                out.push(UNK.to_string());
                return;
            }
        }
    }
    out.append(&mut pieces);
}

/// Tokenize raw text into wordpiece strings.
pub fn wordpiece(text: &str, vocab: &Vocab, cfg: TokenizerConfig) -> Vec<String> {
    let mut out = Vec::new();
    for word in basic_split(text) {
        let norm = normalize_word(&word, cfg);
        if norm.is_empty() {
            continue;
        }
        wordpiece_word(&norm, vocab, &mut out);
    }
    out
}

/// A wordpiece plus the byte range of the source text it came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OffsetToken {
    pub piece: String,
    pub byte_start: usize,
    pub byte_end: usize,
}

/// Like [`wordpiece`] but tracks, per piece, the byte range of the original
/// text it consumed. When normalization changes a word's character count the
/// pieces all carry the whole word's range; otherwise pieces subdivide it.
pub fn wordpiece_offsets(text: &str, vocab: &Vocab, cfg: TokenizerConfig) -> Vec<OffsetToken> {
    let mut words: Vec<(String, usize, usize)> = Vec::new();
    let mut cur = String::new();
    let mut cur_start = 0;
    for (byte, ch) in text.char_indices() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                words.push((std::mem::take(&mut cur), cur_start, byte));
            }
        } else if !ch.is_alphanumeric() {
            if !cur.is_empty() {
                words.push((std::mem::take(&mut cur), cur_start, byte));
            }
            words.push((ch.to_string(), byte, byte + ch.len_utf8()));
        } else {
            if cur.is_empty() {
                cur_start = byte;
            }
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        words.push((cur, cur_start, text.len()));
    }

    let mut out = Vec::new();
    for (word, w_start, w_end) in words {
        let norm = normalize_word(&word, cfg);
        if norm.is_empty() {
            continue;
        }
        let mut pieces = Vec::new();
        wordpiece_word(&norm, vocab, &mut pieces);
        let raw_chars: Vec<usize> = word
            .char_indices()
            .map(|(b, _)| w_start + b)
            .chain(std::iter::once(w_end))
            .collect();
        let exact = norm.chars().count() == word.chars().count();
        let mut consumed = 0usize;
        for piece in pieces {
            let plen = piece.trim_start_matches(CONTINUATION).chars().count();
            let (bs, be) = if exact && piece != UNK && consumed + plen < raw_chars.len() {
                (raw_chars[consumed], raw_chars[consumed + plen])
            } else {
                (w_start, w_end)
            };
            consumed += plen;
            out.push(OffsetToken {
                piece,
                byte_start: bs,
                byte_end: be,
            });
        }
    }
    out
}

/// One packed input sequence: ids plus A/B segment ids; positions are
/// implicitly `0..len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSequence {
    pub token_ids: Vec<TokenId>,
    pub segment_ids: Vec<u8>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Positions holding neither [CLS], [SEP] nor [PAD].
    pub fn non_special_positions(&self, vocab: &Vocab) -> Vec<usize> {
        self.token_ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| id != vocab.cls_id() && id != vocab.sep_id() && id != vocab.pad_id())
            .map(|(i, _)| i)
            .collect()
    }

    /// Positions belonging to segment B, excluding special tokens. For
    /// single-segment inputs this is empty.
    pub fn segment_b_positions(&self, vocab: &Vocab) -> Vec<usize> {
        self.token_ids
            .iter()
            .zip(self.segment_ids.iter())
            .enumerate()
            .filter(|(_, (&id, &seg))| {
                seg == 1 && id != vocab.sep_id() && id != vocab.cls_id() && id != vocab.pad_id()
            })
            .map(|(i, _)| i)
            .collect()
    }
}

/// Pack one or two tokenized sentences into `[CLS] a [SEP] (b [SEP])?`.
/// Over-long pairs are truncated one token at a time from the end of the
/// currently longer sentence (ties drop from b) until they fit.
pub fn encode_pair(
    a: &[String],
    b: Option<&[String]>,
    max_len: usize,
    vocab: &Vocab,
) -> Result<EncodedSequence> {
    if a.is_empty() {
        return Err(Error::Data("encode_pair: sentence a is empty".into()));
    }
    let overhead = if b.is_some() { 3 } else { 2 };
    if max_len < overhead + 1 {
        return Err(Error::Data(format!(
            "encode_pair: max_len {} cannot fit {} special tokens plus content",
            max_len, overhead
        )));
    }
    let mut a_len = a.len();
    let mut b_len = b.map_or(0, |b| b.len());
    while a_len + b_len > max_len - overhead {
        if b_len >= a_len && b_len > 0 {
            b_len -= 1;
        } else {
            a_len -= 1;
        }
    }
    if a_len == 0 || (b.is_some() && b_len == 0) {
        return Err(Error::Data(
            "encode_pair: truncation consumed an entire sentence".into(),
        ));
    }
    let mut token_ids = Vec::with_capacity(a_len + b_len + overhead);
    let mut segment_ids = Vec::with_capacity(a_len + b_len + overhead);
    token_ids.push(vocab.cls_id());
    segment_ids.push(0);
    for t in &a[..a_len] {
        token_ids.push(vocab.id(t).unwrap_or(vocab.unk_id()));
        segment_ids.push(0);
    }
    token_ids.push(vocab.sep_id());
    segment_ids.push(0);
    if let Some(b) = b {
        for t in &b[..b_len] {
            token_ids.push(vocab.id(t).unwrap_or(vocab.unk_id()));
            segment_ids.push(1);
        }
        token_ids.push(vocab.sep_id());
        segment_ids.push(1);
    }
    Ok(EncodedSequence {
        token_ids,
        segment_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_vocab(extra: &[&str]) -> Vocab {
        let mut lines: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        lines.extend(extra.iter().map(|s| s.to_string()));
        Vocab::from_lines(lines).unwrap()
    }

    #[test]
    fn vocab_ids_follow_file_order() {
        let v = toy_vocab(&["dog"]);
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("dog"), Some(5));
        assert_eq!(v.id(PAD), Some(0));
    }

    #[test]
    fn vocab_duplicate_rejected_with_line_numbers() {
        let lines = [PAD, UNK, CLS, SEP, MASK, "dog", "cat", "dog"];
        let err = Vocab::from_lines(lines.iter().map(|s| s.to_string()))
            .unwrap_err()
            .to_string();
        assert!(err.contains("6") && err.contains("8"), "{err}");
    }

    #[test]
    fn vocab_missing_special_named() {
        let lines = [PAD, UNK, CLS, SEP, "dog"];
        let err = Vocab::from_lines(lines.iter().map(|s| s.to_string()))
            .unwrap_err()
            .to_string();
        assert!(err.contains("[MASK]"), "{err}");
    }

    #[test]
    fn vocab_loads_thirty_thousand_tokens() {
        let mut lines: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        for i in 0..29_995 {
            lines.push(format!("tok{}", i));
        }
        let v = Vocab::from_lines(lines).unwrap();
        assert_eq!(v.len(), 30_000);
    }

    #[test]
    fn wordpiece_splits_with_continuation_prefix() {
        let v = toy_vocab(&["flight", "##less", "birds"]);
        let toks = wordpiece("flightless birds", &v, TokenizerConfig::default());
        assert_eq!(toks, vec!["flight", "##less", "birds"]);
    }

    #[test]
    fn wordpiece_whole_word_hit() {
        let v = toy_vocab(&["dog"]);
        assert_eq!(
            wordpiece("dog", &v, TokenizerConfig::default()),
            vec!["dog"]
        );
    }

    #[test]
    fn wordpiece_unmatched_word_becomes_unk() {
        let v = toy_vocab(&["dog"]);
        assert_eq!(
            wordpiece("zebra", &v, TokenizerConfig::default()),
            vec![UNK]
        );
    }

    #[test]
    fn wordpiece_lowercases_and_strips_accents() {
        let v = toy_vocab(&["cafe"]);
        assert_eq!(
            wordpiece("Caf\u{00e9}", &v, TokenizerConfig::default()),
            vec!["cafe"]
        );
    }

    #[test]
    fn wordpiece_isolates_punctuation() {
        let v = toy_vocab(&["dog", "!"]);
        assert_eq!(
            wordpiece("dog!", &v, TokenizerConfig::default()),
            vec!["dog", "!"]
        );
    }

    /// Exhaustive-search oracle: at each offset try every prefix length from
    /// longest to shortest, independent of the production matcher.
    fn greedy_oracle(word: &str, vocab: &Vocab) -> Vec<String> {
        let chars: Vec<char> = word.chars().collect();
        let mut out = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let candidates: Vec<String> = (start + 1..=chars.len())
                .rev()
                .map(|end| {
                    let body: String = chars[start..end].iter().collect();
                    if start == 0 {
                        body
                    } else {
                        format!("##{}", body)
                    }
                })
                .collect();
            match candidates.iter().find(|c| vocab.id(c).is_some()) {
                Some(best) => {
                    let consumed = best.trim_start_matches("##").chars().count();
                    out.push(best.clone());
                    start += consumed;
                }
                None => return vec![UNK.to_string()],
            }
        }
        out
    }

    #[test]
    fn wordpiece_matches_exhaustive_greedy_oracle() {
        let pieces = [
            "a", "ab", "abc", "b", "bc", "c", "##a", "##ab", "##b", "##bc", "##c", "##ca", "ca",
            "cab", "##abc", "x", "##x", "xa", "##xa", "bca",
        ];
        let v = toy_vocab(&pieces);
        let cfg = TokenizerConfig::default();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..500 {
            let len = rng.gen_range(1..=8);
            let word: String = (0..len)
                .map(|_| ['a', 'b', 'c', 'x', 'z'][rng.gen_range(0..5)])
                .collect();
            let mut got = Vec::new();
            wordpiece_word(&word, &v, &mut got);
            assert_eq!(got, greedy_oracle(&word, &v), "word {:?}", word);
        }
        let _ = cfg;
    }

    #[test]
    fn encode_single_sentence_layout() {
        let v = toy_vocab(&["hi"]);
        let seq = encode_pair(&["hi".to_string()], None, 8, &v).unwrap();
        assert_eq!(seq.token_ids, vec![v.cls_id(), v.id("hi").unwrap(), v.sep_id()]);
        assert_eq!(seq.segment_ids, vec![0, 0, 0]);
    }

    #[test]
    fn encode_pair_layout_and_segments() {
        let v = toy_vocab(&["x", "y"]);
        let seq = encode_pair(&["x".to_string()], Some(&["y".to_string()]), 8, &v).unwrap();
        assert_eq!(
            seq.token_ids,
            vec![
                v.cls_id(),
                v.id("x").unwrap(),
                v.sep_id(),
                v.id("y").unwrap(),
                v.sep_id()
            ]
        );
        assert_eq!(seq.segment_ids, vec![0, 0, 0, 1, 1]);
    }

    /// Truncation-loop oracle: simulate alternating drops independently.
    #[test]
    fn encode_pair_truncates_longer_first_to_exact_budget() {
        let v = toy_vocab(&["w"]);
        let a: Vec<String> = vec!["w".into(); 300];
        let b: Vec<String> = vec!["w".into(); 300];
        let seq = encode_pair(&a, Some(&b), 512, &v).unwrap();
        assert_eq!(seq.len(), 512);
        let (mut oa, mut ob) = (300usize, 300usize);
        while oa + ob > 512 - 3 {
            if ob >= oa {
                ob -= 1;
            } else {
                oa -= 1;
            }
        }
        let seg0 = seq.segment_ids.iter().filter(|&&s| s == 0).count();
        assert_eq!(seg0, oa + 2);
        assert_eq!(seq.len() - seg0, ob + 1);
    }

    #[test]
    fn encode_pair_rejects_tiny_max_len() {
        let v = toy_vocab(&["x"]);
        assert!(encode_pair(&["x".to_string()], None, 2, &v).is_err());
        assert!(encode_pair(&["x".to_string()], Some(&["x".to_string()]), 3, &v).is_err());
    }

    #[test]
    fn round_trip_ids_tokens_ids() {
        let v = toy_vocab(&["dog", "cat", "##s"]);
        let ids = vec![v.cls_id(), 5, 6, 7, v.sep_id()];
        let toks = v.ids_to_tokens(&ids);
        assert_eq!(v.tokens_to_ids(&toks), ids);
    }

    #[test]
    fn encoded_sequence_invariants_hold() {
        let v = toy_vocab(&["x", "y"]);
        let seq = encode_pair(
            &["x".to_string(), "y".to_string()],
            Some(&["y".to_string()]),
            16,
            &v,
        )
        .unwrap();
        assert_eq!(seq.token_ids[0], v.cls_id());
        assert_eq!(
            seq.token_ids.iter().filter(|&&t| t == v.sep_id()).count(),
            2
        );
        assert!(seq.segment_ids.windows(2).all(|w| w[0] <= w[1]));
    }
}
