//! Bundled synthetic fixtures so every run, test, and example works offline.
//!
//! All content is generated deterministically from fixed seeds. The corpora
//! share one closed vocabulary:
//!
//! * a topic-structured pre-training corpus (each document carries a topic
//!   token in every sentence, so continuation-vs-random is learnable),
//! * a cloze corpus of `l? m? r?` triples where the middle token is
//!   `m[(i+j) mod 10]`, a deterministic function of BOTH neighbors, giving a
//!   left-to-right model a hard ceiling of chance accuracy,
//! * small classification, span, multiple-choice, and tagging sets.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::streams::stream;
use crate::tokenizer::SPECIAL_TOKENS;

const FIXTURE_SEED: u64 = 0xf1f1;
const FIXTURE_LANE: u64 = 99;

pub fn vocab_text() -> String {
    let mut lines: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    for t in 0..20 {
        lines.push(format!("topic{}", t));
    }
    for i in 0..10 {
        lines.push(format!("item{}", i));
    }
    for p in 0..7 {
        lines.push(format!("pair{}", p));
    }
    for i in 0..10 {
        lines.push(format!("l{}", i));
    }
    for i in 0..10 {
        lines.push(format!("m{}", i));
    }
    for i in 0..10 {
        lines.push(format!("r{}", i));
    }
    lines.push("find".into());
    lines.push("where".into());
    lines.push("##ish".into());
    lines.push("##est".into());
    lines.join("\n") + "\n"
}

/// Topic-structured corpus: 20 documents of 10 sentences, every sentence
/// headed by its document's topic token.
pub fn pretrain_corpus() -> String {
    let mut out = String::new();
    for d in 0..20usize {
        for s in 0..10usize {
            let a = (d + 3 * s) % 10;
            let b = (2 * d + 7 * s) % 10;
            let _ = writeln!(out, "topic{} item{} item{} pair{}", d, a, b, (a + b) % 7);
        }
        out.push('\n');
    }
    out
}

/// Held-out corpus, disjoint from `pretrain_corpus` by construction: its
/// sentences have five tokens where training sentences have four.
pub fn heldout_corpus() -> String {
    let mut out = String::new();
    for d in 0..6usize {
        for s in 0..5usize {
            let a = (3 * d + s + 1) % 10;
            let b = (d + 5 * s + 2) % 10;
            let c = (2 * d + s + 4) % 10;
            let _ = writeln!(
                out,
                "topic{} item{} item{} item{} pair{}",
                d + 7,
                a,
                b,
                c,
                (a + b + c) % 7
            );
        }
        out.push('\n');
    }
    out
}

fn cloze_sentence(rng: &mut ChaCha8Rng) -> (String, Vec<usize>) {
    let mut words = Vec::with_capacity(9);
    let mut targets = Vec::with_capacity(3);
    for t in 0..3 {
        let i = rng.gen_range(0..10usize);
        let j = rng.gen_range(0..10usize);
        words.push(format!("l{}", i));
        words.push(format!("m{}", (i + j) % 10));
        words.push(format!("r{}", j));
        targets.push(3 * t + 1);
    }
    (words.join(" "), targets)
}

/// Cloze pre-training corpus: 40 documents of 8 sentences of three triples.
pub fn cloze_corpus() -> String {
    let mut rng = stream(FIXTURE_SEED, FIXTURE_LANE, 0);
    let mut out = String::new();
    for _ in 0..40 {
        for _ in 0..8 {
            let (sent, _) = cloze_sentence(&mut rng);
            out.push_str(&sent);
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// Cloze dev cases: `sentence tokens \t target word index`. The target is
/// always an `m?` position whose identity is `(i + j) mod 10` of its
/// neighbors.
pub fn cloze_dev() -> String {
    let mut rng = stream(FIXTURE_SEED, FIXTURE_LANE, 1);
    let mut out = String::new();
    for case in 0..200usize {
        let (sent, targets) = cloze_sentence(&mut rng);
        let target = targets[case % 3];
        let _ = writeln!(out, "{}\t{}", sent, target);
    }
    out
}

fn cls_rows(rng: &mut ChaCha8Rng, n: usize) -> String {
    let mut out = String::new();
    for _ in 0..n {
        let label = rng.gen_range(0..2usize);
        let t = rng.gen_range(0..10usize) + 10 * label;
        let a = rng.gen_range(0..5usize) + 5 * label;
        let p = rng.gen_range(0..3usize) + 4 * label;
        let _ = writeln!(out, "{}\ttopic{} item{} pair{}", label, t, a, p);
    }
    out
}

/// Separable classification fixture: the two classes draw from disjoint
/// token sets (topic decile, item half, pair range all agree on the label).
pub fn cls_train() -> String {
    cls_rows(&mut stream(FIXTURE_SEED, FIXTURE_LANE, 2), 64)
}

pub fn cls_dev() -> String {
    cls_rows(&mut stream(FIXTURE_SEED, FIXTURE_LANE, 3), 32)
}

fn span_rows(rng: &mut ChaCha8Rng, n: usize, null_every: Option<usize>) -> String {
    let mut out = String::new();
    for row in 0..n {
        let mut items: Vec<usize> = (0..10).collect();
        for i in (1..items.len()).rev() {
            let j = rng.gen_range(0..=i);
            items.swap(i, j);
        }
        let words: Vec<String> = items[..8].iter().map(|i| format!("item{}", i)).collect();
        let passage = words.join(" ");
        let make_null = null_every.map_or(false, |k| row % k == k - 1);
        if make_null {
            // Ask for an item that is not in the passage.
            let missing = items[8];
            let _ = writeln!(out, "find item{}\t{}\t-\t-", missing, passage);
        } else {
            let pick = rng.gen_range(0..8usize);
            let target = &words[pick];
            let start: usize = words[..pick].iter().map(|w| w.chars().count() + 1).sum();
            let end = start + target.chars().count();
            let _ = writeln!(out, "find {}\t{}\t{}\t{}", target, passage, start, end);
        }
    }
    out
}

pub fn span_train() -> String {
    span_rows(&mut stream(FIXTURE_SEED, FIXTURE_LANE, 4), 32, None)
}

pub fn span_dev() -> String {
    span_rows(&mut stream(FIXTURE_SEED, FIXTURE_LANE, 5), 16, None)
}

/// Unanswerable variant: every fourth row asks for an absent item.
pub fn span2_train() -> String {
    span_rows(&mut stream(FIXTURE_SEED, FIXTURE_LANE, 6), 32, Some(4))
}

pub fn span2_dev() -> String {
    span_rows(&mut stream(FIXTURE_SEED, FIXTURE_LANE, 7), 16, Some(4))
}

fn choice_rows(rng: &mut ChaCha8Rng, n: usize) -> String {
    let mut out = String::new();
    for _ in 0..n {
        let t = rng.gen_range(0..20usize);
        let a = rng.gen_range(0..10usize);
        let gold = rng.gen_range(0..4usize);
        let mut choices = Vec::with_capacity(4);
        for c in 0..4 {
            if c == gold {
                // The right continuation repeats the context's item.
                choices.push(format!("item{} item{}", a, a));
            } else {
                let mut x = rng.gen_range(0..10usize);
                if x == a {
                    x = (x + 1) % 10;
                }
                choices.push(format!("item{} pair{}", x, rng.gen_range(0..7usize)));
            }
        }
        let _ = writeln!(
            out,
            "{}\ttopic{} item{}\t{}\t{}\t{}\t{}",
            gold, t, a, choices[0], choices[1], choices[2], choices[3]
        );
    }
    out
}

pub fn choice_train() -> String {
    choice_rows(&mut stream(FIXTURE_SEED, FIXTURE_LANE, 8), 24)
}

pub fn choice_dev() -> String {
    choice_rows(&mut stream(FIXTURE_SEED, FIXTURE_LANE, 9), 12)
}

fn tag_rows(rng: &mut ChaCha8Rng, n: usize) -> String {
    // Label by word family: pair -> 0, item -> 1, topic -> 2. One word per
    // row carries an "ish" suffix so it splits into two pieces.
    let mut out = String::new();
    for _ in 0..n {
        let t = rng.gen_range(0..20usize);
        let a = rng.gen_range(0..10usize);
        let b = rng.gen_range(0..10usize);
        let p = rng.gen_range(0..7usize);
        let _ = writeln!(
            out,
            "topic{} item{}ish pair{} item{}\t2 1 0 1",
            t, a, p, b
        );
    }
    out
}

pub fn tag_train() -> String {
    tag_rows(&mut stream(FIXTURE_SEED, FIXTURE_LANE, 10), 48)
}

pub fn tag_dev() -> String {
    tag_rows(&mut stream(FIXTURE_SEED, FIXTURE_LANE, 11), 24)
}

pub const FIXTURE_FILES: [(&str, fn() -> String); 15] = [
    ("vocab.txt", vocab_text),
    ("pretrain.txt", pretrain_corpus),
    ("heldout.txt", heldout_corpus),
    ("cloze_pretrain.txt", cloze_corpus),
    ("cloze_dev.tsv", cloze_dev),
    ("cls_train.tsv", cls_train),
    ("cls_dev.tsv", cls_dev),
    ("span_train.tsv", span_train),
    ("span_dev.tsv", span_dev),
    ("span2_train.tsv", span2_train),
    ("span2_dev.tsv", span2_dev),
    ("choice_train.tsv", choice_train),
    ("choice_dev.tsv", choice_dev),
    ("tag_train.tsv", tag_train),
    ("tag_dev.tsv", tag_dev),
];

/// The desk-scale model configuration sized for the fixture vocabulary.
pub fn desk_config() -> crate::model::ModelConfig {
    let vocab_size = vocab_text().lines().count();
    crate::model::ModelConfig::new(2, 32, 2, vocab_size, 64).expect("valid")
}

/// Write every fixture into `dir`, returning the paths.
pub fn write_all(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for (name, gen) in FIXTURE_FILES {
        let path = dir.join(name);
        std::fs::write(&path, gen())?;
        out.push((name.to_string(), path));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::parse_corpus;
    use crate::tokenizer::{Vocab, UNK};

    fn vocab() -> Vocab {
        Vocab::from_lines(vocab_text().lines().map(|l| l.to_string())).unwrap()
    }

    #[test]
    fn fixtures_are_deterministic() {
        assert_eq!(cloze_corpus(), cloze_corpus());
        assert_eq!(cls_train(), cls_train());
        assert_eq!(span2_dev(), span2_dev());
    }

    #[test]
    fn every_fixture_word_is_in_vocab() {
        let v = vocab();
        let unk = v.id(UNK).unwrap();
        for (name, gen) in FIXTURE_FILES {
            if name == "vocab.txt" {
                continue;
            }
            let content = gen();
            for line in content.lines() {
                // Labels and offsets are bare numbers by design; only the
                // word fields must resolve in the vocab.
                let words = line
                    .split(['\t', ' '])
                    .filter(|w| !w.is_empty() && *w != "-")
                    .filter(|w| !w.chars().all(|c| c.is_ascii_digit()));
                for word in words {
                    for tok in crate::tokenizer::wordpiece(word, &v, Default::default()) {
                        assert_ne!(
                            v.id(&tok),
                            Some(unk),
                            "fixture {} leaked unknown token {:?} in line {:?}",
                            name,
                            tok,
                            line
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn pretrain_corpus_has_twenty_documents_of_ten() {
        let v = vocab();
        let docs = parse_corpus(&pretrain_corpus(), &v, Default::default()).unwrap();
        assert_eq!(docs.len(), 20);
        assert!(docs.iter().all(|d| d.sentences.len() == 10));
        let total: usize = docs.iter().map(|d| d.sentences.len()).sum();
        assert_eq!(total, 200);
    }

    #[test]
    fn heldout_sentences_are_disjoint_from_training() {
        let corpus = pretrain_corpus();
        let train: std::collections::HashSet<&str> = corpus
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| l.trim())
            .collect();
        let heldout = heldout_corpus();
        for line in heldout.lines().filter(|l| !l.trim().is_empty()) {
            assert!(!train.contains(line.trim()), "overlap: {:?}", line);
        }
    }

    #[test]
    fn cloze_middle_token_is_sum_of_neighbors() {
        for line in cloze_dev().lines().take(50) {
            let (sent, idx) = line.split_once('\t').unwrap();
            let words: Vec<&str> = sent.split(' ').collect();
            let t: usize = idx.parse().unwrap();
            let i: usize = words[t - 1][1..].parse().unwrap();
            let j: usize = words[t + 1][1..].parse().unwrap();
            assert_eq!(words[t], format!("m{}", (i + j) % 10));
        }
    }

    #[test]
    fn span_offsets_select_the_named_item() {
        let v = vocab();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("span.tsv");
        std::fs::write(&path, span_train()).unwrap();
        let (rows, dropped) =
            crate::data::load_span_dataset(&path, &v, 64, Default::default()).unwrap();
        assert_eq!(dropped, 0);
        for ex in rows {
            let (s, e) = ex.answer.unwrap();
            let answer = ex.span_text(s, e);
            // The question is "find <answer>".
            let q_second = ex.seq.token_ids[2];
            assert_eq!(v.token(q_second), answer);
        }
    }
}
