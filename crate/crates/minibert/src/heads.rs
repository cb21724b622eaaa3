//! Output heads and losses: masked-token prediction, continuation
//! classification, sequence classification, span extraction (with the
//! null-answer decision), multiple choice, and token tagging.

use rand_chacha::ChaCha8Rng;

use crate::data::{NspLabel, PretrainExample, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::model::{EncoderOutput, ModelConfig, LAYER_NORM_EPS};
use crate::streams::{lane, stream};
use crate::tensor::{Dtype, Tape, Tensor};

pub const DEFAULT_MAX_SPAN_LEN: usize = 30;

fn trunc_normal_param<T: Dtype>(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<T> {
    use rand_distr::{Distribution, StandardNormal};
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break T::c(z * crate::model::INIT_STDDEV);
            }
        })
        .collect();
    Tensor::param(shape, data).expect("consistent")
}

fn zeros_param<T: Dtype>(shape: Vec<usize>) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::param(shape, vec![T::zero(); n]).expect("consistent")
}

fn ones_param<T: Dtype>(shape: Vec<usize>) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::param(shape, vec![T::one(); n]).expect("consistent")
}

/// Masked-token prediction head: a hidden-size transform (gelu + norm), then
/// a projection onto the vocabulary. By default the projection shares storage
/// with the token embedding table (one source of truth); an untied mode owns
/// its own matrix. A free output bias exists either way.
pub struct MlmHead<T: Dtype> {
    pub transform_w: Tensor<T>,
    pub transform_b: Tensor<T>,
    pub norm_gain: Tensor<T>,
    pub norm_bias: Tensor<T>,
    pub output: MlmOutput<T>,
    pub output_bias: Tensor<T>,
}

pub enum MlmOutput<T: Dtype> {
    /// Shares the token embedding table `[V, H]`.
    Tied(Tensor<T>),
    /// Owns an independent `[V, H]` matrix.
    Untied(Tensor<T>),
}

impl<T: Dtype> MlmOutput<T> {
    fn matrix(&self) -> &Tensor<T> {
        match self {
            MlmOutput::Tied(t) | MlmOutput::Untied(t) => t,
        }
    }
}

impl<T: Dtype> MlmHead<T> {
    pub fn init(cfg: &ModelConfig, token_table: Option<Tensor<T>>, seed: u64) -> Self {
        let mut rng = stream(seed, lane::HEAD_INIT, 0);
        let h = cfg.hidden;
        let output = match token_table {
            Some(t) => MlmOutput::Tied(t),
            None => MlmOutput::Untied(trunc_normal_param(&mut rng, vec![cfg.vocab_size, h])),
        };
        MlmHead {
            transform_w: trunc_normal_param(&mut rng, vec![h, h]),
            transform_b: zeros_param(vec![h]),
            norm_gain: ones_param(vec![h]),
            norm_bias: zeros_param(vec![h]),
            output,
            output_bias: zeros_param(vec![cfg.vocab_size]),
        }
    }

    pub fn is_tied(&self) -> bool {
        matches!(self.output, MlmOutput::Tied(_))
    }

    /// Parameters owned by this head (a tied projection belongs to the
    /// embedding table and is not repeated here).
    pub fn params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![
            ("mlm.transform.w".to_string(), self.transform_w.clone()),
            ("mlm.transform.b".to_string(), self.transform_b.clone()),
            ("mlm.norm.gain".to_string(), self.norm_gain.clone()),
            ("mlm.norm.bias".to_string(), self.norm_bias.clone()),
            ("mlm.output_bias".to_string(), self.output_bias.clone()),
        ];
        if let MlmOutput::Untied(w) = &self.output {
            out.push(("mlm.output.w".to_string(), w.clone()));
        }
        out
    }

    /// Vocabulary logits at the given sequence positions: `[len, V]`.
    pub fn logits_at(
        &self,
        out: &EncoderOutput<T>,
        positions: &[usize],
        tape: &Tape<T>,
    ) -> Result<Tensor<T>> {
        let picked = tape.gather_rows(out.last(), positions)?;
        let lin = tape.add(&tape.matmul(&picked, &self.transform_w)?, &self.transform_b)?;
        let act = tape.gelu(&lin)?;
        let hid = tape.layer_norm(&act, &self.norm_gain, &self.norm_bias, LAYER_NORM_EPS)?;
        let proj = tape.matmul(&hid, &tape.transpose(self.output.matrix())?)?;
        tape.add(&proj, &self.output_bias)
    }
}

/// Mean cross-entropy over the example's masked positions only.
pub fn mlm_loss<T: Dtype>(
    out: &EncoderOutput<T>,
    example: &PretrainExample,
    head: &MlmHead<T>,
    tape: &Tape<T>,
) -> Result<Tensor<T>> {
    if example.mlm_positions.is_empty() {
        return Err(Error::Data(
            "mlm_loss: example has no masked positions".into(),
        ));
    }
    let logits = head.logits_at(out, &example.mlm_positions, tape)?;
    let targets: Vec<usize> = example.mlm_targets.iter().map(|&t| t as usize).collect();
    tape.cross_entropy(&logits, &targets, IGNORE_INDEX)
}

/// Binary continuation classifier applied to the sequence representation.
pub struct NspHead<T: Dtype> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Dtype> NspHead<T> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = stream(seed, lane::HEAD_INIT, 1);
        NspHead {
            w: trunc_normal_param(&mut rng, vec![2, cfg.hidden]),
            b: zeros_param(vec![2]),
        }
    }

    pub fn params(&self) -> Vec<(String, Tensor<T>)> {
        vec![
            ("nsp.w".to_string(), self.w.clone()),
            ("nsp.b".to_string(), self.b.clone()),
        ]
    }

    pub fn logits(&self, out: &EncoderOutput<T>, tape: &Tape<T>) -> Result<Tensor<T>> {
        tape.add(
            &tape.matmul(&out.cls, &tape.transpose(&self.w)?)?,
            &self.b,
        )
    }
}

pub fn nsp_loss<T: Dtype>(
    out: &EncoderOutput<T>,
    label: NspLabel,
    head: &NspHead<T>,
    tape: &Tape<T>,
) -> Result<Tensor<T>> {
    let logits = head.logits(out, tape)?;
    tape.cross_entropy(&logits, &[label.class_index()], IGNORE_INDEX)
}

/// Pre-training objective: the sum of the mean masked-token loss and the
/// mean continuation loss; with the continuation task disabled it is the
/// masked-token loss alone.
pub fn pretrain_loss<T: Dtype>(
    mlm: &Tensor<T>,
    nsp: Option<&Tensor<T>>,
    tape: &Tape<T>,
) -> Result<Tensor<T>> {
    match nsp {
        Some(nsp) => tape.add(mlm, nsp),
        None => Ok(mlm.clone()),
    }
}

/// K-way classifier on the sequence representation. Weights only, as the
/// classification layer introduces no bias.
pub struct ClsHead<T: Dtype> {
    pub w: Tensor<T>,
}

impl<T: Dtype> ClsHead<T> {
    pub fn init(cfg: &ModelConfig, labels: usize, seed: u64) -> Result<Self> {
        if labels < 2 {
            return Err(Error::Config(format!(
                "classification needs at least 2 labels, got {}",
                labels
            )));
        }
        let mut rng = stream(seed, lane::HEAD_INIT, 2);
        Ok(ClsHead {
            w: trunc_normal_param(&mut rng, vec![labels, cfg.hidden]),
        })
    }

    pub fn labels(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn params(&self) -> Vec<(String, Tensor<T>)> {
        vec![("cls.w".to_string(), self.w.clone())]
    }

    pub fn logits(&self, out: &EncoderOutput<T>, tape: &Tape<T>) -> Result<Tensor<T>> {
        tape.matmul(&out.cls, &tape.transpose(&self.w)?)
    }
}

/// Log-probabilities over the K labels, log(softmax(C W^T)).
pub fn classify<T: Dtype>(out: &EncoderOutput<T>, head: &ClsHead<T>) -> Result<Vec<T>> {
    let tape = Tape::disabled();
    let logits = head.logits(out, &tape)?;
    let probs = tape.softmax(&logits, 1)?;
    let out = probs.data().iter().map(|&p| p.ln()).collect();
    Ok(out)
}

pub fn cls_loss<T: Dtype>(
    out: &EncoderOutput<T>,
    label: usize,
    head: &ClsHead<T>,
    tape: &Tape<T>,
) -> Result<Tensor<T>> {
    let logits = head.logits(out, tape)?;
    tape.cross_entropy(&logits, &[label], IGNORE_INDEX)
}

/// Span extraction head: a start vector and an end vector dotted with every
/// final hidden state. `tau` is the null-answer margin used in the
/// unanswerable variant.
pub struct SpanHead<T: Dtype> {
    pub start: Tensor<T>,
    pub end: Tensor<T>,
    pub tau: f64,
}

impl<T: Dtype> SpanHead<T> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = stream(seed, lane::HEAD_INIT, 3);
        SpanHead {
            start: trunc_normal_param(&mut rng, vec![1, cfg.hidden]),
            end: trunc_normal_param(&mut rng, vec![1, cfg.hidden]),
            tau: 0.0,
        }
    }

    pub fn params(&self) -> Vec<(String, Tensor<T>)> {
        vec![
            ("span.start".to_string(), self.start.clone()),
            ("span.end".to_string(), self.end.clone()),
        ]
    }

    /// Raw dot-product logits for every sequence position: `([N], [N])`.
    pub fn logits(
        &self,
        out: &EncoderOutput<T>,
        tape: &Tape<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let t = out.last();
        let n = t.shape()[0];
        let s = tape.reshape(&tape.matmul(t, &tape.transpose(&self.start)?)?, vec![n])?;
        let e = tape.reshape(&tape.matmul(t, &tape.transpose(&self.end)?)?, vec![n])?;
        Ok((s, e))
    }
}

/// Mask logits so that only `allowed` positions survive a softmax.
fn restrict_logits<T: Dtype>(
    logits: &Tensor<T>,
    allowed: &[usize],
    tape: &Tape<T>,
) -> Result<Tensor<T>> {
    let n = logits.len();
    let mut mask = vec![T::neg_inf(); n];
    for &p in allowed {
        if p >= n {
            return Err(Error::shape(
                "span",
                format!("position {} out of range for length {}", p, n),
            ));
        }
        mask[p] = T::zero();
    }
    tape.add(logits, &Tensor::new(vec![n], mask)?)
}

/// Start/end probabilities restricted to the given passage positions;
/// everything else is exactly zero.
pub fn span_scores<T: Dtype>(
    out: &EncoderOutput<T>,
    head: &SpanHead<T>,
    passage_positions: &[usize],
) -> Result<(Vec<T>, Vec<T>)> {
    if passage_positions.is_empty() {
        return Err(Error::Data(
            "span_scores: no passage positions to score".into(),
        ));
    }
    let tape = Tape::disabled();
    let (s, e) = head.logits(out, &tape)?;
    let sp = tape.softmax(&restrict_logits(&s, passage_positions, &tape)?, 0)?;
    let ep = tape.softmax(&restrict_logits(&e, passage_positions, &tape)?, 0)?;
    Ok((sp.to_vec(), ep.to_vec()))
}

/// Training loss: cross-entropy of the gold start and end positions under
/// softmaxes restricted to `allowed` (passage positions, plus position 0 in
/// the unanswerable variant where null answers point at the start token).
pub fn span_loss<T: Dtype>(
    out: &EncoderOutput<T>,
    gold: (usize, usize),
    allowed: &[usize],
    head: &SpanHead<T>,
    tape: &Tape<T>,
) -> Result<Tensor<T>> {
    let (s, e) = head.logits(out, tape)?;
    let n = s.len();
    let s2 = tape.reshape(&restrict_logits(&s, allowed, tape)?, vec![1, n])?;
    let e2 = tape.reshape(&restrict_logits(&e, allowed, tape)?, vec![1, n])?;
    let ls = tape.cross_entropy(&s2, &[gold.0], IGNORE_INDEX)?;
    let le = tape.cross_entropy(&e2, &[gold.1], IGNORE_INDEX)?;
    tape.add(&ls, &le)
}

/// Highest scoring span (i, j) with `j >= i` and `j - i < max_span_len`,
/// scored as `start[i] + end[j]`. Ties break to the smallest i, then j.
pub fn best_span(
    start_logits: &[f64],
    end_logits: &[f64],
    max_span_len: usize,
) -> Result<(usize, usize, f64)> {
    let n = start_logits.len().min(end_logits.len());
    if n == 0 || max_span_len == 0 {
        return Err(Error::Data("best_span: no candidate positions".into()));
    }
    let mut best: Option<(usize, usize, f64)> = None;
    for i in 0..n {
        for j in i..n.min(i + max_span_len) {
            let score = start_logits[i] + end_logits[j];
            if best.map_or(true, |(_, _, s)| score > s) {
                best = Some((i, j, score));
            }
        }
    }
    Ok(best.expect("n > 0"))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SpanPrediction {
    Null,
    Span { start: usize, end: usize, score: f64 },
}

/// Unanswerable-mode decision: compare the best non-null span score with the
/// null score `cls_start + cls_end`; answer null iff the span does not beat
/// the null score by more than `tau`.
pub fn null_or_span(
    start_logits: &[f64],
    end_logits: &[f64],
    cls_start: f64,
    cls_end: f64,
    tau: f64,
) -> Result<SpanPrediction> {
    let (i, j, s_hat) = best_span(start_logits, end_logits, DEFAULT_MAX_SPAN_LEN)?;
    let s_null = cls_start + cls_end;
    if s_hat > s_null + tau {
        Ok(SpanPrediction::Span {
            start: i,
            end: j,
            score: s_hat,
        })
    } else {
        Ok(SpanPrediction::Null)
    }
}

/// Multiple-choice head: one vector dotted with each choice's sequence
/// representation.
pub struct ChoiceHead<T: Dtype> {
    pub w: Tensor<T>,
}

impl<T: Dtype> ChoiceHead<T> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = stream(seed, lane::HEAD_INIT, 4);
        ChoiceHead {
            w: trunc_normal_param(&mut rng, vec![1, cfg.hidden]),
        }
    }

    pub fn params(&self) -> Vec<(String, Tensor<T>)> {
        vec![("choice.w".to_string(), self.w.clone())]
    }

    /// `[1, count]` score logits, one per choice.
    pub fn logits(&self, outs: &[EncoderOutput<T>], tape: &Tape<T>) -> Result<Tensor<T>> {
        let dots: Vec<Tensor<T>> = outs
            .iter()
            .map(|o| tape.matmul(&o.cls, &tape.transpose(&self.w)?))
            .collect::<Result<_>>()?;
        tape.concat_cols(&dots)
    }
}

/// Softmax-normalized probabilities over exactly four choices.
pub fn choice_scores<T: Dtype>(
    outs: &[EncoderOutput<T>],
    head: &ChoiceHead<T>,
) -> Result<Vec<T>> {
    if outs.len() != 4 {
        return Err(Error::Data(format!(
            "choice_scores expects exactly 4 sequences, got {}",
            outs.len()
        )));
    }
    let tape = Tape::disabled();
    let logits = head.logits(outs, &tape)?;
    Ok(tape.softmax(&logits, 1)?.to_vec())
}

pub fn choice_loss<T: Dtype>(
    outs: &[EncoderOutput<T>],
    gold: usize,
    head: &ChoiceHead<T>,
    tape: &Tape<T>,
) -> Result<Tensor<T>> {
    if outs.len() != 4 {
        return Err(Error::Data(format!(
            "choice_loss expects exactly 4 sequences, got {}",
            outs.len()
        )));
    }
    let logits = head.logits(outs, tape)?;
    tape.cross_entropy(&logits, &[gold], IGNORE_INDEX)
}

/// Token-level classifier over every position; loss and decoding consider
/// only first-subtoken positions.
pub struct TagHead<T: Dtype> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Dtype> TagHead<T> {
    pub fn init(cfg: &ModelConfig, labels: usize, seed: u64) -> Self {
        let mut rng = stream(seed, lane::HEAD_INIT, 5);
        TagHead {
            w: trunc_normal_param(&mut rng, vec![labels, cfg.hidden]),
            b: zeros_param(vec![labels]),
        }
    }

    pub fn labels(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn params(&self) -> Vec<(String, Tensor<T>)> {
        vec![
            ("tag.w".to_string(), self.w.clone()),
            ("tag.b".to_string(), self.b.clone()),
        ]
    }
}

/// Per-position label logits `[N, labels]`.
pub fn tag_logits<T: Dtype>(
    out: &EncoderOutput<T>,
    head: &TagHead<T>,
    tape: &Tape<T>,
) -> Result<Tensor<T>> {
    tape.add(
        &tape.matmul(out.last(), &tape.transpose(&head.w)?)?,
        &head.b,
    )
}

/// Cross-entropy over positions whose label is not IGNORE_INDEX.
pub fn tag_loss<T: Dtype>(
    out: &EncoderOutput<T>,
    labels: &[usize],
    head: &TagHead<T>,
    tape: &Tape<T>,
) -> Result<Tensor<T>> {
    let logits = tag_logits(out, head, tape)?;
    tape.cross_entropy(&logits, labels, IGNORE_INDEX)
}
