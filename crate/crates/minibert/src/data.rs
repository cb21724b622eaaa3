//! Pre-training instance generation and fine-tuning dataset loaders.
//!
//! Corpora are document-level: one sentence per line, a blank line separates
//! documents. Pre-training examples pack two sampled spans with a
//! continuation label, then corrupt a random subset of non-special positions
//! under a [`MaskingPolicy`]. All sampling is a pure function of the corpus,
//! the config, and the RNG stream handed in.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tokenizer::{
    wordpiece, wordpiece_offsets, EncodedSequence, TokenId, TokenizerConfig, Vocab,
};

/// Ignore marker for token-level labels (first-subtoken rule).
pub use crate::tensor::IGNORE_INDEX;

#[derive(Clone, Debug)]
pub struct Document {
    pub sentences: Vec<Vec<TokenId>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NspLabel {
    IsNext,
    NotNext,
}

impl NspLabel {
    pub fn class_index(self) -> usize {
        match self {
            NspLabel::IsNext => 0,
            NspLabel::NotNext => 1,
        }
    }
}

/// Which corruption a selected position receives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskBranch {
    Mask,
    Same,
    Random,
}

/// Selection rate and branch split for masked-token corruption.
#[derive(Clone, Copy, Debug)]
pub struct MaskingPolicy {
    pub select_rate: f64,
    pub p_mask: f64,
    pub p_same: f64,
    pub p_random: f64,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        MaskingPolicy {
            select_rate: 0.15,
            p_mask: 0.8,
            p_same: 0.1,
            p_random: 0.1,
        }
    }
}

impl MaskingPolicy {
    pub fn new(select_rate: f64, p_mask: f64, p_same: f64, p_random: f64) -> Result<Self> {
        let p = MaskingPolicy {
            select_rate,
            p_mask,
            p_same,
            p_random,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.select_rate) {
            return Err(Error::Config(format!(
                "select_rate must be in [0, 1], got {}",
                self.select_rate
            )));
        }
        let sum = self.p_mask + self.p_same + self.p_random;
        if [self.p_mask, self.p_same, self.p_random]
            .iter()
            .any(|&p| !(0.0..=1.0).contains(&p))
            || (sum - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "branch probabilities must be nonnegative and sum to 1, got {} + {} + {}",
                self.p_mask, self.p_same, self.p_random
            )));
        }
        Ok(())
    }
}

/// One pre-training instance: the corrupted sequence, which positions were
/// selected, the original ids at those positions, and (when sentence-pair
/// packing is active) the continuation label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PretrainExample {
    pub seq: EncodedSequence,
    pub mlm_positions: Vec<usize>,
    pub mlm_targets: Vec<TokenId>,
    pub nsp_label: Option<NspLabel>,
}

impl PretrainExample {
    /// The sequence with all corruptions undone.
    pub fn original_ids(&self) -> Vec<TokenId> {
        let mut ids = self.seq.token_ids.clone();
        for (&p, &t) in self.mlm_positions.iter().zip(&self.mlm_targets) {
            ids[p] = t;
        }
        ids
    }

    /// Check the structural invariants; used by sweep tests.
    pub fn validate(&self, vocab: &Vocab, policy: &MaskingPolicy) -> Result<()> {
        if self.mlm_positions.len() != self.mlm_targets.len() {
            return Err(Error::Data("positions/targets length mismatch".into()));
        }
        let candidates = self.seq.non_special_positions(vocab).len();
        for &p in &self.mlm_positions {
            if p >= self.seq.len() {
                return Err(Error::Data(format!("masked position {} out of range", p)));
            }
            let id = self.seq.token_ids[p];
            if id == vocab.cls_id() || id == vocab.sep_id() || id == vocab.pad_id() {
                return Err(Error::Data(format!(
                    "masked position {} landed on a structural special token",
                    p
                )));
            }
        }
        let expect = expected_selection_count(policy.select_rate, candidates);
        if self.mlm_positions.len() != expect {
            return Err(Error::Data(format!(
                "selected {} positions, expected {} for rate {} over {} candidates",
                self.mlm_positions.len(),
                expect,
                policy.select_rate,
                candidates
            )));
        }
        Ok(())
    }
}

fn expected_selection_count(rate: f64, candidates: usize) -> usize {
    if rate == 0.0 || candidates == 0 {
        0
    } else {
        (((rate * candidates as f64).round() as usize).max(1)).min(candidates)
    }
}

/// Load a document-level corpus: one sentence per line, blank line between
/// documents. Sentences are tokenized immediately; empty documents dropped.
pub fn load_corpus(path: &Path, vocab: &Vocab, cfg: TokenizerConfig) -> Result<Vec<Document>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read corpus {}: {}", path.display(), e)))?;
    let docs = parse_corpus(&text, vocab, cfg)?;
    if docs.len() < 2 {
        log::warn!(
            "corpus {} has {} document(s); sampling NotNext pairs needs at least 2",
            path.display(),
            docs.len()
        );
    }
    Ok(docs)
}

pub fn parse_corpus(text: &str, vocab: &Vocab, cfg: TokenizerConfig) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    let mut cur: Vec<Vec<TokenId>> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !cur.is_empty() {
                docs.push(Document {
                    sentences: std::mem::take(&mut cur),
                });
            }
            continue;
        }
        let toks = wordpiece(line, vocab, cfg);
        if !toks.is_empty() {
            cur.push(vocab.tokens_to_ids(&toks));
        }
    }
    if !cur.is_empty() {
        docs.push(Document { sentences: cur });
    }
    if docs.is_empty() {
        return Err(Error::Data("corpus contains no documents".into()));
    }
    Ok(docs)
}

const SAMPLE_RETRIES: usize = 64;

/// Sample a sentence-pair instance. Spans are contiguous sentence runs; with
/// probability 1/2 the second span is the continuation of the first
/// (IsNext), otherwise it comes from a different, uniformly chosen document.
/// The combined token budget is at most `max_len - 3`.
pub fn sample_nsp_pair(
    docs: &[Document],
    rng: &mut ChaCha8Rng,
    max_len: usize,
) -> Result<(Vec<TokenId>, Vec<TokenId>, NspLabel)> {
    let label = if rng.gen_bool(0.5) {
        NspLabel::IsNext
    } else {
        NspLabel::NotNext
    };
    sample_nsp_pair_forced(docs, rng, max_len, label)
}

/// Same as [`sample_nsp_pair`] with the label fixed by the caller.
pub fn sample_nsp_pair_forced(
    docs: &[Document],
    rng: &mut ChaCha8Rng,
    max_len: usize,
    label: NspLabel,
) -> Result<(Vec<TokenId>, Vec<TokenId>, NspLabel)> {
    if max_len < 5 {
        return Err(Error::Data(format!(
            "max_len {} leaves no room for a packed pair",
            max_len
        )));
    }
    if docs.is_empty() {
        return Err(Error::Data("no documents to sample from".into()));
    }
    if label == NspLabel::NotNext && docs.len() < 2 {
        return Err(Error::Data(
            "sampling NotNext pairs needs at least 2 documents".into(),
        ));
    }
    for _ in 0..SAMPLE_RETRIES {
        let (a, b) = match label {
            NspLabel::IsNext => {
                let doc = &docs[rng.gen_range(0..docs.len())];
                let n = doc.sentences.len();
                if n < 2 {
                    continue;
                }
                let split = rng.gen_range(1..n);
                let a_start = rng.gen_range(0..split);
                let b_end = rng.gen_range(split + 1..=n);
                (
                    flatten(&doc.sentences[a_start..split]),
                    flatten(&doc.sentences[split..b_end]),
                )
            }
            NspLabel::NotNext => {
                let da = rng.gen_range(0..docs.len());
                let mut db = rng.gen_range(0..docs.len() - 1);
                if db >= da {
                    db += 1;
                }
                (
                    sample_span(&docs[da], rng),
                    sample_span(&docs[db], rng),
                )
            }
        };
        let (mut a, mut b) = (a, b);
        let budget = max_len - 3;
        while a.len() + b.len() > budget {
            if b.len() >= a.len() && !b.is_empty() {
                b.pop();
            } else {
                a.pop();
            }
        }
        if a.is_empty() || b.is_empty() {
            continue;
        }
        return Ok((a, b, label));
    }
    Err(Error::Data(format!(
        "could not sample a {:?} pair after {} retries; documents too short",
        label, SAMPLE_RETRIES
    )))
}

fn flatten(sents: &[Vec<TokenId>]) -> Vec<TokenId> {
    sents.iter().flatten().copied().collect()
}

fn sample_span(doc: &Document, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
    let n = doc.sentences.len();
    let start = rng.gen_range(0..n);
    let end = rng.gen_range(start + 1..=n);
    flatten(&doc.sentences[start..end])
}

/// Pack already-tokenized ids as `[CLS] a [SEP] (b [SEP])?`. The caller is
/// responsible for the token budget.
pub fn encode_id_pair(a: &[TokenId], b: Option<&[TokenId]>, vocab: &Vocab) -> EncodedSequence {
    let mut token_ids = Vec::with_capacity(a.len() + b.map_or(0, |b| b.len()) + 3);
    let mut segment_ids = Vec::with_capacity(token_ids.capacity());
    token_ids.push(vocab.cls_id());
    segment_ids.push(0);
    token_ids.extend_from_slice(a);
    segment_ids.extend(std::iter::repeat(0).take(a.len()));
    token_ids.push(vocab.sep_id());
    segment_ids.push(0);
    if let Some(b) = b {
        token_ids.extend_from_slice(b);
        token_ids.push(vocab.sep_id());
        segment_ids.extend(std::iter::repeat(1).take(b.len() + 1));
    }
    EncodedSequence {
        token_ids,
        segment_ids,
    }
}

/// Corrupt a sequence under the policy: `round(select_rate * candidates)`
/// non-special positions (at least one, unless the rate is exactly 0) are
/// chosen without replacement, then each independently becomes `[MASK]`,
/// a random non-special vocab token, or stays unchanged, per the branch
/// probabilities. Original ids are recorded as prediction targets.
pub fn apply_masking(
    seq: &EncodedSequence,
    policy: &MaskingPolicy,
    vocab: &Vocab,
    rng: &mut ChaCha8Rng,
) -> Result<PretrainExample> {
    policy.validate()?;
    let mut candidates = seq.non_special_positions(vocab);
    if candidates.is_empty() {
        return Err(Error::Data(
            "apply_masking: sequence has no non-special tokens".into(),
        ));
    }
    let k = expected_selection_count(policy.select_rate, candidates.len());
    // Partial Fisher-Yates, then restore ascending order.
    for i in 0..k {
        let j = rng.gen_range(i..candidates.len());
        candidates.swap(i, j);
    }
    let mut positions: Vec<usize> = candidates[..k].to_vec();
    positions.sort_unstable();
    let branches: Vec<MaskBranch> = positions
        .iter()
        .map(|_| {
            let u: f64 = rng.gen();
            if u < policy.p_mask {
                MaskBranch::Mask
            } else if u < policy.p_mask + policy.p_same {
                MaskBranch::Same
            } else {
                MaskBranch::Random
            }
        })
        .collect();
    mask_at_positions(seq, &positions, &branches, vocab, rng)
}

/// Apply given branches at given positions; the forced-path core of
/// [`apply_masking`], kept separate so tests can pin positions and branches.
pub fn mask_at_positions(
    seq: &EncodedSequence,
    positions: &[usize],
    branches: &[MaskBranch],
    vocab: &Vocab,
    rng: &mut ChaCha8Rng,
) -> Result<PretrainExample> {
    if positions.len() != branches.len() {
        return Err(Error::Data("positions/branches length mismatch".into()));
    }
    let replacements = vocab.non_special_ids();
    let mut out = seq.clone();
    let mut targets = Vec::with_capacity(positions.len());
    for (&p, &br) in positions.iter().zip(branches) {
        let original = seq.token_ids[p];
        targets.push(original);
        out.token_ids[p] = match br {
            MaskBranch::Mask => vocab.mask_id(),
            MaskBranch::Same => original,
            MaskBranch::Random => {
                if replacements.is_empty() {
                    return Err(Error::Data(
                        "vocab has no non-special tokens for random replacement".into(),
                    ));
                }
                replacements[rng.gen_range(0..replacements.len())]
            }
        };
    }
    Ok(PretrainExample {
        seq: out,
        mlm_positions: positions.to_vec(),
        mlm_targets: targets,
        nsp_label: None,
    })
}

/// Batch of independent pair+mask examples, deterministic per RNG stream.
pub fn build_pretrain_batch(
    docs: &[Document],
    batch_size: usize,
    max_len: usize,
    policy: &MaskingPolicy,
    vocab: &Vocab,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PretrainExample>> {
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let (a, b, label) = sample_nsp_pair(docs, rng, max_len)?;
        let seq = encode_id_pair(&a, Some(&b), vocab);
        let mut ex = apply_masking(&seq, policy, vocab, rng)?;
        ex.nsp_label = Some(label);
        out.push(ex);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Fine-tuning dataset loaders. All are line-oriented TSV; malformed rows are
// rejected with their line number.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ClsExample {
    pub seq: EncodedSequence,
    pub label: usize,
}

/// `label \t text_a (\t text_b)?`
pub fn load_cls_dataset(
    path: &Path,
    vocab: &Vocab,
    max_len: usize,
    cfg: TokenizerConfig,
) -> Result<Vec<ClsExample>> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (lineno, line) in nonempty_lines(&text) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(Error::Data(format!(
                "{}:{}: expected 2 or 3 tab-separated fields, got {}",
                path.display(),
                lineno,
                fields.len()
            )));
        }
        let label: usize = fields[0].parse().map_err(|_| {
            Error::Data(format!(
                "{}:{}: label {:?} is not a nonnegative integer",
                path.display(),
                lineno,
                fields[0]
            ))
        })?;
        let a = wordpiece(fields[1], vocab, cfg);
        if a.is_empty() {
            return Err(Error::Data(format!(
                "{}:{}: text_a tokenized to nothing",
                path.display(),
                lineno
            )));
        }
        let b = fields.get(2).map(|t| wordpiece(t, vocab, cfg));
        let seq = crate::tokenizer::encode_pair(&a, b.as_deref(), max_len, vocab)?;
        out.push(ClsExample { seq, label });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct SpanExample {
    pub seq: EncodedSequence,
    /// Gold (start, end) token positions into `seq`, inclusive; None for
    /// unanswerable questions.
    pub answer: Option<(usize, usize)>,
    pub passage: String,
    /// Byte range of the passage text behind each sequence position
    /// (None for specials and question tokens).
    pub token_spans: Vec<Option<(usize, usize)>>,
}

impl SpanExample {
    /// Answer text for a predicted token span.
    pub fn span_text(&self, start: usize, end: usize) -> String {
        match (self.token_spans.get(start), self.token_spans.get(end)) {
            (Some(Some((bs, _))), Some(Some((_, be)))) if bs <= be => {
                self.passage[*bs..*be].to_string()
            }
            _ => String::new(),
        }
    }

    pub fn gold_text(&self) -> Option<String> {
        self.answer.map(|(s, e)| self.span_text(s, e))
    }
}

/// `question \t passage \t start_char \t end_char` (chars into the passage,
/// end exclusive; both empty or `-` for unanswerable). Questions whose answer
/// cannot be aligned to passage tokens are dropped; the count is returned.
pub fn load_span_dataset(
    path: &Path,
    vocab: &Vocab,
    max_len: usize,
    cfg: TokenizerConfig,
) -> Result<(Vec<SpanExample>, usize)> {
    let text = read(path)?;
    let mut out = Vec::new();
    let mut dropped = 0usize;
    for (lineno, line) in nonempty_lines(&text) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Data(format!(
                "{}:{}: expected 4 tab-separated fields, got {}",
                path.display(),
                lineno,
                fields.len()
            )));
        }
        let question = wordpiece(fields[0], vocab, cfg);
        if question.is_empty() {
            return Err(Error::Data(format!(
                "{}:{}: question tokenized to nothing",
                path.display(),
                lineno
            )));
        }
        let passage = fields[1].to_string();
        let ptoks = wordpiece_offsets(&passage, vocab, cfg);
        if ptoks.is_empty() {
            return Err(Error::Data(format!(
                "{}:{}: passage tokenized to nothing",
                path.display(),
                lineno
            )));
        }
        let char_answer = parse_char_range(fields[2], fields[3]).map_err(|m| {
            Error::Data(format!("{}:{}: {}", path.display(), lineno, m))
        })?;

        // Truncate the passage only; questions in the fixtures are short.
        let q_ids: Vec<TokenId> = question
            .iter()
            .map(|t| vocab.id(t).unwrap_or(vocab.unk_id()))
            .collect();
        let budget = max_len.saturating_sub(3 + q_ids.len());
        if budget == 0 {
            return Err(Error::Data(format!(
                "{}:{}: question alone exceeds max_len {}",
                path.display(),
                lineno,
                max_len
            )));
        }
        let kept = &ptoks[..ptoks.len().min(budget)];
        let p_ids: Vec<TokenId> = kept
            .iter()
            .map(|t| vocab.id(&t.piece).unwrap_or(vocab.unk_id()))
            .collect();
        let seq = encode_id_pair(&q_ids, Some(&p_ids), vocab);
        let passage_base = 1 + q_ids.len() + 1;
        let mut token_spans = vec![None; seq.len()];
        for (i, t) in kept.iter().enumerate() {
            token_spans[passage_base + i] = Some((t.byte_start, t.byte_end));
        }

        let answer = match char_answer {
            None => None,
            Some((cs, ce)) => {
                let (bs, be) = match char_range_to_bytes(&passage, cs, ce) {
                    Some(r) => r,
                    None => {
                        dropped += 1;
                        continue;
                    }
                };
                let start_tok = kept
                    .iter()
                    .position(|t| t.byte_start < be && t.byte_end > bs);
                let end_tok = kept
                    .iter()
                    .rposition(|t| t.byte_start < be && t.byte_end > bs);
                match (start_tok, end_tok) {
                    (Some(s), Some(e)) => Some((passage_base + s, passage_base + e)),
                    _ => {
                        dropped += 1;
                        continue;
                    }
                }
            }
        };
        out.push(SpanExample {
            seq,
            answer,
            passage,
            token_spans,
        });
    }
    if dropped > 0 {
        log::warn!(
            "{}: dropped {} example(s) whose answer did not align to tokens",
            path.display(),
            dropped
        );
    }
    Ok((out, dropped))
}

fn parse_char_range(
    s: &str,
    e: &str,
) -> std::result::Result<Option<(usize, usize)>, String> {
    let blank = |f: &str| f.is_empty() || f == "-";
    if blank(s) && blank(e) {
        return Ok(None);
    }
    let cs: usize = s
        .parse()
        .map_err(|_| format!("start offset {:?} is not an integer", s))?;
    let ce: usize = e
        .parse()
        .map_err(|_| format!("end offset {:?} is not an integer", e))?;
    if ce <= cs {
        return Err(format!("empty answer range {}..{}", cs, ce));
    }
    Ok(Some((cs, ce)))
}

fn char_range_to_bytes(text: &str, cs: usize, ce: usize) -> Option<(usize, usize)> {
    let mut byte_of_char: Vec<usize> = text.char_indices().map(|(b, _)| b).collect();
    byte_of_char.push(text.len());
    if ce >= byte_of_char.len() {
        return None;
    }
    Some((byte_of_char[cs], byte_of_char[ce]))
}

#[derive(Clone, Debug)]
pub struct ChoiceExample {
    pub seqs: Vec<EncodedSequence>,
    pub gold: usize,
}

/// `gold \t context \t choice0 \t choice1 \t choice2 \t choice3`
pub fn load_choice_dataset(
    path: &Path,
    vocab: &Vocab,
    max_len: usize,
    cfg: TokenizerConfig,
) -> Result<Vec<ChoiceExample>> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (lineno, line) in nonempty_lines(&text) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(Error::Data(format!(
                "{}:{}: expected 6 tab-separated fields, got {}",
                path.display(),
                lineno,
                fields.len()
            )));
        }
        let gold: usize = fields[0].parse().map_err(|_| {
            Error::Data(format!(
                "{}:{}: gold index {:?} is not an integer",
                path.display(),
                lineno,
                fields[0]
            ))
        })?;
        if gold >= 4 {
            return Err(Error::Data(format!(
                "{}:{}: gold index {} out of range 0..4",
                path.display(),
                lineno,
                gold
            )));
        }
        let context = wordpiece(fields[1], vocab, cfg);
        let mut seqs = Vec::with_capacity(4);
        for choice in &fields[2..6] {
            let cont = wordpiece(choice, vocab, cfg);
            seqs.push(crate::tokenizer::encode_pair(
                &context,
                Some(&cont),
                max_len,
                vocab,
            )?);
        }
        out.push(ChoiceExample { seqs, gold });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct TagExample {
    pub seq: EncodedSequence,
    /// Per-position labels; first sub-token of each word carries the word's
    /// label, everything else (continuations, specials) is IGNORE_INDEX.
    pub labels: Vec<usize>,
}

impl TagExample {
    pub fn first_subtoken_positions(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != IGNORE_INDEX)
            .map(|(i, _)| i)
            .collect()
    }
}

/// `word word ... \t label label ...` with one integer label per word.
pub fn load_tag_dataset(
    path: &Path,
    vocab: &Vocab,
    max_len: usize,
    cfg: TokenizerConfig,
) -> Result<Vec<TagExample>> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (lineno, line) in nonempty_lines(&text) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(Error::Data(format!(
                "{}:{}: expected 2 tab-separated fields, got {}",
                path.display(),
                lineno,
                fields.len()
            )));
        }
        let words: Vec<&str> = fields[0].split_whitespace().collect();
        let raw_labels: Vec<&str> = fields[1].split_whitespace().collect();
        if words.len() != raw_labels.len() || words.is_empty() {
            return Err(Error::Data(format!(
                "{}:{}: {} words but {} labels",
                path.display(),
                lineno,
                words.len(),
                raw_labels.len()
            )));
        }
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        for (word, lraw) in words.iter().zip(&raw_labels) {
            let label: usize = lraw.parse().map_err(|_| {
                Error::Data(format!(
                    "{}:{}: label {:?} is not a nonnegative integer",
                    path.display(),
                    lineno,
                    lraw
                ))
            })?;
            let pieces = wordpiece(word, vocab, cfg);
            for (i, piece) in pieces.iter().enumerate() {
                ids.push(vocab.id(piece).unwrap_or(vocab.unk_id()));
                labels.push(if i == 0 { label } else { IGNORE_INDEX });
            }
        }
        let budget = max_len - 2;
        ids.truncate(budget);
        labels.truncate(budget);
        let seq = encode_id_pair(&ids, None, vocab);
        let mut full = Vec::with_capacity(seq.len());
        full.push(IGNORE_INDEX);
        full.extend_from_slice(&labels);
        full.push(IGNORE_INDEX);
        out.push(TagExample { seq, labels: full });
    }
    Ok(out)
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {}", path.display(), e)))
}

fn nonempty_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streams::{lane, stream};
    use crate::tokenizer::SPECIAL_TOKENS;
    use std::io::Write;

    fn toy_vocab(extra: &[&str]) -> Vocab {
        let mut lines: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        lines.extend(extra.iter().map(|s| s.to_string()));
        Vocab::from_lines(lines).unwrap()
    }

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn corpus_blank_line_separates_documents() {
        let v = toy_vocab(&["a", "b", "c"]);
        let docs = parse_corpus("a b\nb c\nc a\n\nc b\nb a\na c\n", &v, Default::default()).unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[0].sentences.len(), 3);
        assert_eq!(docs[1].sentences.len(), 3);
    }

    #[test]
    fn corpus_trailing_blanks_no_empty_document() {
        let v = toy_vocab(&["a"]);
        let docs = parse_corpus("a\n\n\na\n\n\n\n", &v, Default::default()).unwrap();
        assert_eq!(docs.len(), 2);
    }

    #[test]
    fn corpus_token_counts_match_tokenizer_replay() {
        let v = toy_vocab(&["flight", "##less", "birds", "are"]);
        let text = "flightless birds\nbirds are flightless\n";
        let docs = parse_corpus(text, &v, Default::default()).unwrap();
        for (line, sent) in text.lines().zip(&docs[0].sentences) {
            let replay = wordpiece(line, &v, Default::default());
            assert_eq!(sent.len(), replay.len());
        }
        assert_eq!(docs[0].sentences[0].len(), 3);
    }

    #[test]
    fn nsp_only_split_of_two_sentences() {
        let v = toy_vocab(&["a", "b"]);
        let docs = parse_corpus("a a\nb b\n", &v, Default::default()).unwrap();
        let mut rng = stream(1, lane::DATA, 0);
        let (a, b, label) =
            sample_nsp_pair_forced(&docs, &mut rng, 32, NspLabel::IsNext).unwrap();
        assert_eq!(label, NspLabel::IsNext);
        assert_eq!(a, docs[0].sentences[0]);
        assert_eq!(b, docs[0].sentences[1]);
    }

    #[test]
    fn nsp_notnext_comes_from_other_document() {
        let v = toy_vocab(&["a", "b"]);
        let docs = parse_corpus("a\na a\n\nb\nb b\n", &v, Default::default()).unwrap();
        let a_id = v.id("a").unwrap();
        let b_id = v.id("b").unwrap();
        for i in 0..50 {
            let mut rng = stream(2, lane::DATA, i);
            let (a, b, _) =
                sample_nsp_pair_forced(&docs, &mut rng, 32, NspLabel::NotNext).unwrap();
            let a_doc = if a[0] == a_id { 0 } else { 1 };
            let b_doc = if b[0] == b_id { 1 } else { 0 };
            assert_ne!(a_doc, b_doc);
        }
    }

    #[test]
    fn nsp_label_balance_within_binomial_bound() {
        let v = toy_vocab(&["a", "b"]);
        let docs = parse_corpus("a\na\na\n\nb\nb\nb\n", &v, Default::default()).unwrap();
        let mut rng = stream(3, lane::DATA, 0);
        let n = 100_000;
        let mut is_next = 0usize;
        for _ in 0..n {
            let (_, _, label) = sample_nsp_pair(&docs, &mut rng, 32).unwrap();
            if label == NspLabel::IsNext {
                is_next += 1;
            }
        }
        let frac = is_next as f64 / n as f64;
        assert!((0.49..=0.51).contains(&frac), "IsNext fraction {frac}");
    }

    #[test]
    fn masking_forced_mask_branch_mirrors_illustration() {
        let v = toy_vocab(&["my", "dog", "is", "hairy", "apple"]);
        let ids = v.tokens_to_ids(&["my".into(), "dog".into(), "is".into(), "hairy".into()]);
        let seq = encode_id_pair(&ids, None, &v);
        // Position 4 of the packed sequence is "hairy".
        assert_eq!(v.token(seq.token_ids[4]), "hairy");
        let mut rng = stream(4, lane::DATA, 0);
        let ex = mask_at_positions(&seq, &[4], &[MaskBranch::Mask], &v, &mut rng).unwrap();
        assert_eq!(ex.seq.token_ids[4], v.mask_id());
        assert_eq!(ex.mlm_targets, vec![v.id("hairy").unwrap()]);
        // Random branch substitutes some other non-special token, target kept.
        let ex2 =
            mask_at_positions(&seq, &[4], &[MaskBranch::Random], &v, &mut rng).unwrap();
        assert!(!v.is_special(ex2.seq.token_ids[4]));
        assert_eq!(ex2.mlm_targets, vec![v.id("hairy").unwrap()]);
        // Same branch keeps the word.
        let ex3 = mask_at_positions(&seq, &[4], &[MaskBranch::Same], &v, &mut rng).unwrap();
        assert_eq!(ex3.seq.token_ids[4], v.id("hairy").unwrap());
    }

    #[test]
    fn masking_zero_rate_yields_empty_selection() {
        let v = toy_vocab(&["a"]);
        let seq = encode_id_pair(&[v.id("a").unwrap()], None, &v);
        let policy = MaskingPolicy::new(0.0, 0.8, 0.1, 0.1).unwrap();
        let mut rng = stream(5, lane::DATA, 0);
        let ex = apply_masking(&seq, &policy, &v, &mut rng).unwrap();
        assert!(ex.mlm_positions.is_empty());
    }

    #[test]
    fn masking_minimum_one_when_rate_positive() {
        let v = toy_vocab(&["a"]);
        let seq = encode_id_pair(&[v.id("a").unwrap()], None, &v);
        let policy = MaskingPolicy::new(0.15, 0.8, 0.1, 0.1).unwrap();
        let mut rng = stream(6, lane::DATA, 0);
        let ex = apply_masking(&seq, &policy, &v, &mut rng).unwrap();
        assert_eq!(ex.mlm_positions.len(), 1);
    }

    #[test]
    fn masking_statistics_match_policy() {
        // Selected fraction and branch split over ~1e6 candidate tokens.
        let v = toy_vocab(&["w0", "w1", "w2", "w3", "w4", "w5", "w6", "w7"]);
        let ids: Vec<TokenId> = (0..40).map(|i| v.id(&format!("w{}", i % 8)).unwrap()).collect();
        let seq = encode_id_pair(&ids, None, &v);
        let policy = MaskingPolicy::default();
        let mut rng = stream(7, lane::DATA, 0);
        let (mut cand, mut selected) = (0u64, 0u64);
        let (mut m, mut s, mut r) = (0u64, 0u64, 0u64);
        let runs = 26_000;
        for _ in 0..runs {
            let ex = apply_masking(&seq, &policy, &v, &mut rng).unwrap();
            cand += 40;
            selected += ex.mlm_positions.len() as u64;
            for (&p, &orig) in ex.mlm_positions.iter().zip(&ex.mlm_targets) {
                let now = ex.seq.token_ids[p];
                if now == v.mask_id() {
                    m += 1;
                } else if now == orig {
                    s += 1;
                } else {
                    r += 1;
                }
            }
        }
        assert!(cand >= 1_000_000);
        let sel_frac = selected as f64 / cand as f64;
        assert!((0.147..=0.153).contains(&sel_frac), "selected {sel_frac}");
        let total = (m + s + r) as f64;
        // "Same" draws are invisible token-wise but "random" may coincide with
        // the original too; with 35 distinct tokens the collision rate is
        // ~1/35 of the random branch, inside the +-0.02 bound.
        assert!((m as f64 / total - 0.8).abs() < 0.02);
        assert!((s as f64 / total - 0.1).abs() < 0.02);
        assert!((r as f64 / total - 0.1).abs() < 0.02);
    }

    #[test]
    fn masking_never_touches_structural_specials() {
        let v = toy_vocab(&["a", "b"]);
        let docs = parse_corpus("a b\nb a\n\nb\na\n", &v, Default::default()).unwrap();
        let policy = MaskingPolicy {
            select_rate: 1.0,
            ..Default::default()
        };
        for i in 0..200 {
            let mut rng = stream(8, lane::DATA, i);
            let batch = build_pretrain_batch(&docs, 4, 16, &policy, &v, &mut rng).unwrap();
            for ex in batch {
                for &p in &ex.mlm_positions {
                    let id = ex.seq.token_ids[p];
                    assert_ne!(id, v.cls_id());
                    assert_ne!(id, v.sep_id());
                    assert_ne!(id, v.pad_id());
                }
            }
        }
    }

    #[test]
    fn batch_composition_matches_manual_pipeline() {
        let v = toy_vocab(&["a", "b", "c"]);
        let docs =
            parse_corpus("a b c\nb c a\nc a b\n\nc c\nb b\na a\n", &v, Default::default())
                .unwrap();
        let policy = MaskingPolicy::default();
        let mut r1 = stream(9, lane::DATA, 0);
        let batch = build_pretrain_batch(&docs, 1, 16, &policy, &v, &mut r1).unwrap();
        let mut r2 = stream(9, lane::DATA, 0);
        let (a, b, label) = sample_nsp_pair(&docs, &mut r2, 16).unwrap();
        let seq = encode_id_pair(&a, Some(&b), &v);
        let mut manual = apply_masking(&seq, &policy, &v, &mut r2).unwrap();
        manual.nsp_label = Some(label);
        assert_eq!(batch[0], manual);
    }

    #[test]
    fn batch_deterministic_per_seed_and_invariants_hold() {
        let v = toy_vocab(&["a", "b", "c"]);
        let docs =
            parse_corpus("a b c\nb c a\nc a b\n\nc c\nb b\na a\n", &v, Default::default())
                .unwrap();
        let policy = MaskingPolicy::default();
        let gen = |seed| {
            let mut rng = stream(seed, lane::DATA, 0);
            build_pretrain_batch(&docs, 8, 16, &policy, &v, &mut rng).unwrap()
        };
        assert_eq!(gen(10), gen(10));
        for i in 0..1_250u64 {
            let mut rng = stream(11, lane::DATA, i);
            for ex in build_pretrain_batch(&docs, 8, 16, &policy, &v, &mut rng).unwrap() {
                ex.validate(&v, &policy).unwrap();
                assert!(ex.nsp_label.is_some());
            }
        }
    }

    #[test]
    fn cls_loader_single_sentence_row() {
        let v = toy_vocab(&["good", "movie"]);
        let f = write_tmp("1\tgood movie\n");
        let rows = load_cls_dataset(f.path(), &v, 16, Default::default()).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].label, 1);
        assert_eq!(rows[0].seq.segment_ids, vec![0, 0, 0, 0]);
    }

    #[test]
    fn cls_loader_rejects_malformed_row_with_line_number() {
        let v = toy_vocab(&["x"]);
        let f = write_tmp("1\tx\nnot_a_label\tx\n");
        let err = load_cls_dataset(f.path(), &v, 16, Default::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains(":2:"), "{err}");
    }

    #[test]
    fn span_loader_whole_first_passage_token() {
        let v = toy_vocab(&["who", "dog", "ran"]);
        let f = write_tmp("who\tdog ran\t0\t3\n");
        let (rows, dropped) = load_span_dataset(f.path(), &v, 32, Default::default()).unwrap();
        assert_eq!(dropped, 0);
        let ex = &rows[0];
        // Layout: [CLS] who [SEP] dog ran [SEP]; first passage index is 3.
        assert_eq!(ex.answer, Some((3, 3)));
        assert_eq!(ex.span_text(3, 3), "dog");
    }

    #[test]
    fn span_loader_null_answer_and_drop_counting() {
        let v = toy_vocab(&["q", "w"]);
        let f = write_tmp("q\tw w\t-\t-\nq\tw w\t90\t95\n");
        let (rows, dropped) = load_span_dataset(f.path(), &v, 32, Default::default()).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].answer, None);
        assert_eq!(dropped, 1);
    }

    #[test]
    fn tag_loader_first_subtoken_rule() {
        // "york" splits into "yo" + "##rk"; only "yo" carries the label.
        let v = toy_vocab(&["new", "yo", "##rk", "in"]);
        let f = write_tmp("in new york\t0 1 1\n");
        let rows = load_tag_dataset(f.path(), &v, 16, Default::default()).unwrap();
        let ex = &rows[0];
        let toks: Vec<&str> = ex.seq.token_ids.iter().map(|&i| v.token(i)).collect();
        assert_eq!(toks, vec!["[CLS]", "in", "new", "yo", "##rk", "[SEP]"]);
        assert_eq!(
            ex.labels,
            vec![IGNORE_INDEX, 0, 1, 1, IGNORE_INDEX, IGNORE_INDEX]
        );
        assert_eq!(ex.first_subtoken_positions(), vec![1, 2, 3]);
    }

    #[test]
    fn choice_loader_shares_context() {
        let v = toy_vocab(&["ctx", "c0", "c1", "c2", "c3"]);
        let f = write_tmp("2\tctx\tc0\tc1\tc2\tc3\n");
        let rows = load_choice_dataset(f.path(), &v, 16, Default::default()).unwrap();
        assert_eq!(rows[0].gold, 2);
        assert_eq!(rows[0].seqs.len(), 4);
        for seq in &rows[0].seqs {
            assert_eq!(seq.token_ids[1], v.id("ctx").unwrap());
        }
    }
}
