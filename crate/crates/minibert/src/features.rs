//! Frozen-feature extraction and the downstream tagger trained on top.
//!
//! Extraction reads retained hidden states and never writes back: outputs
//! are detached copies, so no gradient can reach the encoder. The expensive
//! representation is computed once and cached; downstream models rerun
//! cheaply on top of it.

use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{NamedTensor, TensorData};
use crate::data::IGNORE_INDEX;
use crate::error::{Error, Result};
use crate::model::EncoderOutput;
use crate::optim::{AdamParams, AdamState};
use crate::streams::{lane, stream};
use crate::tensor::{Dtype, Tape, Tensor};

/// Which layer activations feed the downstream model. Weighted modes carry
/// normalized mixing weights (sum 1), ordered from the topmost layer down.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureStrategy {
    EmbeddingsOnly,
    SecondToLast,
    Last,
    WeightedSumLastFour { weights: [f64; 4] },
    ConcatLastFour,
    WeightedSumAll { weights: Vec<f64> },
}

impl FeatureStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            FeatureStrategy::EmbeddingsOnly => "embeddings-only",
            FeatureStrategy::SecondToLast => "second-to-last",
            FeatureStrategy::Last => "last",
            FeatureStrategy::WeightedSumLastFour { .. } => "weighted-sum-last-4",
            FeatureStrategy::ConcatLastFour => "concat-last-4",
            FeatureStrategy::WeightedSumAll { .. } => "weighted-sum-all",
        }
    }

    /// Parse one of the six strategy names; weighted modes start uniform.
    /// `layers` sizes the all-layer weight vector.
    pub fn parse(name: &str, layers: usize) -> Result<Self> {
        match name {
            "embeddings-only" => Ok(FeatureStrategy::EmbeddingsOnly),
            "second-to-last" => Ok(FeatureStrategy::SecondToLast),
            "last" => Ok(FeatureStrategy::Last),
            "weighted-sum-last-4" => Ok(FeatureStrategy::WeightedSumLastFour {
                weights: [0.25; 4],
            }),
            "concat-last-4" => Ok(FeatureStrategy::ConcatLastFour),
            "weighted-sum-all" => {
                if layers == 0 {
                    return Err(Error::Config(
                        "weighted-sum-all needs at least one layer".into(),
                    ));
                }
                Ok(FeatureStrategy::WeightedSumAll {
                    weights: vec![1.0 / layers as f64; layers],
                })
            }
            other => Err(Error::Config(format!(
                "unknown feature strategy {:?}; expected one of embeddings-only, \
                 second-to-last, last, weighted-sum-last-4, concat-last-4, weighted-sum-all",
                other
            ))),
        }
    }

    /// Per-token output width given hidden size `h`.
    pub fn output_dim(&self, h: usize) -> usize {
        match self {
            FeatureStrategy::ConcatLastFour => 4 * h,
            _ => h,
        }
    }

    fn validate(&self) -> Result<()> {
        let check = |ws: &[f64]| -> Result<()> {
            let sum: f64 = ws.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "mixing weights must sum to 1, got {}",
                    sum
                )));
            }
            Ok(())
        };
        match self {
            FeatureStrategy::WeightedSumLastFour { weights } => check(weights),
            FeatureStrategy::WeightedSumAll { weights } => check(weights),
            _ => Ok(()),
        }
    }

    /// How many trailing layers this strategy consumes.
    fn layers_needed(&self, total_layers: usize) -> Result<()> {
        let need = match self {
            FeatureStrategy::EmbeddingsOnly => 0,
            FeatureStrategy::Last => 1,
            FeatureStrategy::SecondToLast => 2,
            FeatureStrategy::WeightedSumLastFour { .. } | FeatureStrategy::ConcatLastFour => 4,
            FeatureStrategy::WeightedSumAll { weights } => weights.len(),
        };
        if total_layers < need
            || matches!(self, FeatureStrategy::WeightedSumAll { weights } if weights.len() != total_layers)
        {
            return Err(Error::Config(format!(
                "strategy {} needs {} layers but the encoder has {}",
                self.name(),
                need,
                total_layers
            )));
        }
        Ok(())
    }
}

/// Per-token feature vectors for one encoded sequence: `[N, H]`, or
/// `[N, 4H]` for the concatenating strategy. The result is detached; the
/// encoder is never touched.
pub fn extract_features<T: Dtype>(
    out: &EncoderOutput<T>,
    strategy: &FeatureStrategy,
) -> Result<Tensor<T>> {
    strategy.validate()?;
    let layers = out.hidden.len() - 1;
    strategy.layers_needed(layers)?;
    let pick = |k_from_top: usize| &out.hidden[layers - k_from_top];
    match strategy {
        FeatureStrategy::EmbeddingsOnly => Ok(out.hidden[0].detach()),
        FeatureStrategy::Last => Ok(pick(0).detach()),
        FeatureStrategy::SecondToLast => Ok(pick(1).detach()),
        FeatureStrategy::ConcatLastFour => {
            let (n, h) = pick(0).dims2("extract_features")?;
            let mut data = Vec::with_capacity(n * 4 * h);
            for row in 0..n {
                for k in (0..4).rev() {
                    let d = pick(k).data();
                    data.extend_from_slice(&d[row * h..(row + 1) * h]);
                }
            }
            Tensor::new(vec![n, 4 * h], data)
        }
        FeatureStrategy::WeightedSumLastFour { weights } => {
            weighted_sum(&(0..4).map(pick).collect::<Vec<_>>(), weights)
        }
        FeatureStrategy::WeightedSumAll { weights } => {
            weighted_sum(&(0..weights.len()).map(pick).collect::<Vec<_>>(), weights)
        }
    }
}

/// Mix layers top-down. Zero-weight terms are skipped entirely and the first
/// surviving term is assigned rather than accumulated, so degenerate weights
/// like (1, 0, 0, 0) reproduce a single layer bit for bit.
fn weighted_sum<T: Dtype>(layers: &[&Tensor<T>], weights: &[f64]) -> Result<Tensor<T>> {
    let shape = layers[0].shape().to_vec();
    let mut acc: Option<Vec<T>> = None;
    for (layer, &w) in layers.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let wt = T::c(w);
        let d = layer.data();
        match &mut acc {
            None => acc = Some(d.iter().map(|&v| v * wt).collect()),
            Some(acc) => {
                for (a, &v) in acc.iter_mut().zip(d.iter()) {
                    *a += v * wt;
                }
            }
        }
    }
    let data = acc.unwrap_or_else(|| vec![T::zero(); shape.iter().product()]);
    Tensor::new(shape, data)
}

/// The per-layer stack (topmost first) behind a weighted strategy, for
/// downstream models that learn their own mixing weights.
pub fn extract_layer_stack<T: Dtype>(
    out: &EncoderOutput<T>,
    strategy: &FeatureStrategy,
) -> Result<Vec<Tensor<T>>> {
    let layers = out.hidden.len() - 1;
    strategy.layers_needed(layers)?;
    let k = match strategy {
        FeatureStrategy::WeightedSumLastFour { .. } => 4,
        FeatureStrategy::WeightedSumAll { weights } => weights.len(),
        other => {
            return Err(Error::Config(format!(
                "strategy {} has no learnable mixing weights",
                other.name()
            )))
        }
    };
    Ok((0..k).map(|i| out.hidden[layers - i].detach()).collect())
}

// ---------------------------------------------------------------------------
// Feature cache: the same tensor-directory layout as checkpoints, keyed by
// (corpus hash, checkpoint hash, strategy).
// ---------------------------------------------------------------------------

const CACHE_MAGIC: &[u8; 4] = b"MBFT";

pub fn cache_file_name(corpus_hash: &str, checkpoint_hash: &str, strategy: &str) -> String {
    format!(
        "features-{}-{}-{}.mbft",
        &corpus_hash[..corpus_hash.len().min(12)],
        &checkpoint_hash[..checkpoint_hash.len().min(12)],
        strategy
    )
}

pub fn save_features(path: &std::path::Path, examples: &[Tensor<f32>]) -> Result<()> {
    let tensors: Vec<NamedTensor> = examples
        .iter()
        .enumerate()
        .map(|(i, t)| NamedTensor {
            name: format!("example{}", i),
            shape: t.shape().to_vec(),
            data: TensorData::F32(t.to_vec()),
        })
        .collect();
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CACHE_MAGIC);
    bytes.extend_from_slice(&crate::checkpoint::encode_tensor_block(&tensors));
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_features(path: &std::path::Path) -> Result<Vec<Tensor<f32>>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 4 || &bytes[..4] != CACHE_MAGIC {
        return Err(Error::CheckpointMagic);
    }
    let tensors = crate::checkpoint::decode_tensor_block(&bytes[4..])?;
    tensors
        .into_iter()
        .map(|t| match t.data {
            TensorData::F32(v) => Tensor::new(t.shape, v),
            TensorData::F64(_) => Err(Error::CheckpointTruncated {
                reading: "feature cache holds f64 data".into(),
            }),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Downstream tagger on frozen features: an optional learned scalar mix, a
// two-layer bidirectional recurrent net, and a linear classifier.
// ---------------------------------------------------------------------------

/// One tagging example on frozen features. `layers` holds one `[N, D]`
/// tensor per mixed layer (a single entry for fixed strategies).
pub struct FrozenExample {
    pub layers: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct TaggerConfig {
    /// Per-direction recurrent width (768 at full scale, shrunk here).
    pub hidden: usize,
    pub labels: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for TaggerConfig {
    fn default() -> Self {
        TaggerConfig {
            hidden: 16,
            labels: 2,
            epochs: 8,
            lr: 1e-2,
        }
    }
}

struct LstmCell {
    w: Tensor<f32>,
    b: Tensor<f32>,
}

impl LstmCell {
    fn init(rng: &mut ChaCha8Rng, input: usize, hidden: usize) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let n = (input + hidden) * 4 * hidden;
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                (z * 0.1) as f32
            })
            .collect();
        LstmCell {
            w: Tensor::param(vec![input + hidden, 4 * hidden], data).unwrap(),
            b: Tensor::param(vec![4 * hidden], vec![0.0; 4 * hidden]).unwrap(),
        }
    }

    /// One direction over the rows of `x`; returns per-position states.
    fn run(&self, x: &Tensor<f32>, reverse: bool, tape: &Tape<f32>) -> Result<Vec<Tensor<f32>>> {
        let (n, _) = x.dims2("lstm")?;
        let h = self.b.len() / 4;
        let mut hidden = Tensor::new(vec![1, h], vec![0.0; h])?;
        let mut cell = Tensor::new(vec![1, h], vec![0.0; h])?;
        let mut states = vec![None; n];
        let order: Vec<usize> = if reverse {
            (0..n).rev().collect()
        } else {
            (0..n).collect()
        };
        for t in order {
            let xt = tape.row(x, t)?;
            let z = tape.add(
                &tape.matmul(&tape.concat_cols(&[xt, hidden.clone()])?, &self.w)?,
                &self.b,
            )?;
            let i = tape.sigmoid(&tape.slice_cols(&z, 0, h)?)?;
            let f = tape.sigmoid(&tape.slice_cols(&z, h, h)?)?;
            let g = tape.tanh_act(&tape.slice_cols(&z, 2 * h, h)?)?;
            let o = tape.sigmoid(&tape.slice_cols(&z, 3 * h, h)?)?;
            cell = tape.add(&tape.mul(&f, &cell)?, &tape.mul(&i, &g)?)?;
            hidden = tape.mul(&o, &tape.tanh_act(&cell)?)?;
            states[t] = Some(hidden.clone());
        }
        Ok(states.into_iter().map(|s| s.unwrap()).collect())
    }
}

struct Tagger {
    mix_logits: Option<Tensor<f32>>,
    layer1_fwd: LstmCell,
    layer1_bwd: LstmCell,
    layer2_fwd: LstmCell,
    layer2_bwd: LstmCell,
    out_w: Tensor<f32>,
    out_b: Tensor<f32>,
}

impl Tagger {
    fn init(input_dim: usize, mix_layers: usize, cfg: &TaggerConfig, seed: u64) -> Self {
        let mut rng = stream(seed, lane::HEAD_INIT, 77);
        use rand_distr::{Distribution, StandardNormal};
        let h = cfg.hidden;
        let mix_logits = (mix_layers > 1).then(|| {
            Tensor::param(vec![1, mix_layers], vec![0.0; mix_layers]).unwrap()
        });
        let out_n = 2 * h * cfg.labels;
        let out_data = (0..out_n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z * 0.1) as f32
            })
            .collect();
        Tagger {
            mix_logits,
            layer1_fwd: LstmCell::init(&mut rng, input_dim, h),
            layer1_bwd: LstmCell::init(&mut rng, input_dim, h),
            layer2_fwd: LstmCell::init(&mut rng, 2 * h, h),
            layer2_bwd: LstmCell::init(&mut rng, 2 * h, h),
            out_w: Tensor::param(vec![2 * h, cfg.labels], out_data).unwrap(),
            out_b: Tensor::param(vec![cfg.labels], vec![0.0; cfg.labels]).unwrap(),
        }
    }

    fn params(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        if let Some(mix) = &self.mix_logits {
            out.push(("tagger.mix".to_string(), mix.clone()));
        }
        for (name, cell) in [
            ("l1f", &self.layer1_fwd),
            ("l1b", &self.layer1_bwd),
            ("l2f", &self.layer2_fwd),
            ("l2b", &self.layer2_bwd),
        ] {
            out.push((format!("tagger.{}.w", name), cell.w.clone()));
            out.push((format!("tagger.{}.b", name), cell.b.clone()));
        }
        out.push(("tagger.out.w".to_string(), self.out_w.clone()));
        out.push(("tagger.out.b".to_string(), self.out_b.clone()));
        out
    }

    /// Mix the frozen layer stack under softmaxed scalar weights (identity
    /// for single-layer inputs).
    fn mix(&self, layers: &[Tensor<f32>], tape: &Tape<f32>) -> Result<Tensor<f32>> {
        match &self.mix_logits {
            None => Ok(layers[0].clone()),
            Some(logits) => {
                let weights = tape.softmax(logits, 1)?;
                let mut acc: Option<Tensor<f32>> = None;
                for (k, layer) in layers.iter().enumerate() {
                    let w_k = tape.slice_cols(&weights, k, 1)?;
                    let term = tape.mul_by_scalar(layer, &w_k)?;
                    acc = Some(match acc {
                        None => term,
                        Some(a) => tape.add(&a, &term)?,
                    });
                }
                Ok(acc.unwrap())
            }
        }
    }

    fn logits(&self, ex: &FrozenExample, tape: &Tape<f32>) -> Result<Tensor<f32>> {
        let x = self.mix(&ex.layers, tape)?;
        let f1 = self.layer1_fwd.run(&x, false, tape)?;
        let b1 = self.layer1_bwd.run(&x, true, tape)?;
        let joined: Vec<Tensor<f32>> = f1
            .iter()
            .zip(&b1)
            .map(|(f, b)| tape.concat_cols(&[f.clone(), b.clone()]))
            .collect::<Result<_>>()?;
        let x2 = tape.concat_rows(&joined)?;
        let f2 = self.layer2_fwd.run(&x2, false, tape)?;
        let b2 = self.layer2_bwd.run(&x2, true, tape)?;
        let joined2: Vec<Tensor<f32>> = f2
            .iter()
            .zip(&b2)
            .map(|(f, b)| tape.concat_cols(&[f.clone(), b.clone()]))
            .collect::<Result<_>>()?;
        let states = tape.concat_rows(&joined2)?;
        tape.add(&tape.matmul(&states, &self.out_w)?, &self.out_b)
    }
}

pub struct TaggerResult {
    pub dev_accuracy: f64,
    pub epoch_accuracies: Vec<f64>,
    /// Softmaxed mixing weights after training, when the strategy had them.
    pub learned_mix: Option<Vec<f32>>,
}

/// Train the downstream tagger on frozen features. Only tagger parameters
/// move; the features are constants and the encoder is untouched by
/// construction.
pub fn frozen_tagger_train(
    train: &[FrozenExample],
    dev: &[FrozenExample],
    cfg: &TaggerConfig,
    seed: u64,
) -> Result<TaggerResult> {
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Data("frozen tagger needs train and dev examples".into()));
    }
    let input_dim = train[0].layers[0].shape()[1];
    let mix_layers = train[0].layers.len();
    let tagger = Tagger::init(input_dim, mix_layers, cfg, seed);
    let params = tagger.params();
    let mut adam = AdamState::new(&params, AdamParams::default());
    let mut epoch_accuracies = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = stream(seed, lane::SHUFFLE, 1_000 + epoch as u64);
        for i in (1..order.len()).rev() {
            let j = rand::Rng::gen_range(&mut rng, 0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(4) {
            let tape = Tape::new();
            let mut acc: Option<Tensor<f32>> = None;
            for &i in chunk {
                let logits = tagger.logits(&train[i], &tape)?;
                let loss = tape.cross_entropy(&logits, &train[i].labels, IGNORE_INDEX)?;
                acc = Some(match acc {
                    None => loss,
                    Some(a) => tape.add(&a, &loss)?,
                });
            }
            let loss = tape.scale(&acc.unwrap(), 1.0 / chunk.len() as f64)?;
            tape.backward(&loss)?;
            adam.step(&params, cfg.lr)?;
            for (_, p) in &params {
                p.zero_grad();
            }
        }
        epoch_accuracies.push(tagger_accuracy(&tagger, dev)?);
    }
    let dev_accuracy = *epoch_accuracies.last().unwrap_or(&0.0);
    let learned_mix = tagger.mix_logits.as_ref().map(|logits| {
        let tape = Tape::disabled();
        tape.softmax(logits, 1).unwrap().to_vec()
    });
    Ok(TaggerResult {
        dev_accuracy,
        epoch_accuracies,
        learned_mix,
    })
}

fn tagger_accuracy(tagger: &Tagger, dev: &[FrozenExample]) -> Result<f64> {
    let tape = Tape::disabled();
    let mut hits = 0usize;
    let mut total = 0usize;
    for ex in dev {
        let logits = tagger.logits(ex, &tape)?;
        let k = logits.shape()[1];
        for (pos, &label) in ex.labels.iter().enumerate() {
            if label == IGNORE_INDEX {
                continue;
            }
            let row: Vec<f32> = (0..k).map(|j| logits.at(&[pos, j])).collect();
            if crate::eval::argmax(&row) == label {
                hits += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Data("no scored positions in dev set".into()));
    }
    Ok(hits as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Encoder, Forward, ModelConfig};
    use crate::tokenizer::EncodedSequence;

    fn run_encoder(layers: usize, h: usize) -> EncoderOutput<f32> {
        let mut cfg = ModelConfig::new(layers, h, 2, 16, 16).unwrap();
        cfg.dropout = 0.0;
        let enc = Encoder::<f32>::init(cfg, 5).unwrap();
        let tape = Tape::disabled();
        let seq = EncodedSequence {
            token_ids: vec![2, 6, 7, 8, 3],
            segment_ids: vec![0; 5],
        };
        let mut fwd = Forward::inference(&tape);
        enc.forward(&seq, None, &mut fwd).unwrap()
    }

    #[test]
    fn concat_last_four_quadruples_the_width() {
        let out = run_encoder(4, 8);
        let f = extract_features(&out, &FeatureStrategy::ConcatLastFour).unwrap();
        assert_eq!(f.shape(), &[5, 32]);
        // At full scale (H=768) the same strategy yields 3072-wide vectors.
        assert_eq!(FeatureStrategy::ConcatLastFour.output_dim(768), 3072);
    }

    #[test]
    fn embeddings_only_is_layer_zero_exactly() {
        let out = run_encoder(2, 8);
        let f = extract_features(&out, &FeatureStrategy::EmbeddingsOnly).unwrap();
        assert!(f.bitwise_eq(&out.hidden[0]));
    }

    #[test]
    fn degenerate_weights_equal_last_hidden_bitwise() {
        let out = run_encoder(4, 8);
        let f = extract_features(
            &out,
            &FeatureStrategy::WeightedSumLastFour {
                weights: [1.0, 0.0, 0.0, 0.0],
            },
        )
        .unwrap();
        let last = extract_features(&out, &FeatureStrategy::Last).unwrap();
        assert!(f.bitwise_eq(&last));
    }

    #[test]
    fn weighted_sum_all_needs_matching_layer_count() {
        let out = run_encoder(2, 8);
        let bad = FeatureStrategy::WeightedSumAll {
            weights: vec![0.25; 4],
        };
        assert!(extract_features(&out, &bad).is_err());
        let good = FeatureStrategy::WeightedSumAll {
            weights: vec![0.5; 2],
        };
        assert!(extract_features(&out, &good).is_ok());
    }

    #[test]
    fn too_few_layers_for_strategy_errors() {
        let out = run_encoder(2, 8);
        assert!(extract_features(&out, &FeatureStrategy::ConcatLastFour).is_err());
        let out0 = run_encoder(0, 8);
        assert!(extract_features(&out0, &FeatureStrategy::Last).is_err());
    }

    #[test]
    fn extraction_is_pure() {
        let out = run_encoder(1, 8);
        let before = out.hidden[1].to_vec();
        let a = extract_features(&out, &FeatureStrategy::Last).unwrap();
        let b = extract_features(&out, &FeatureStrategy::Last).unwrap();
        assert!(a.bitwise_eq(&b));
        assert_eq!(out.hidden[1].to_vec(), before);
        assert!(!a.requires_grad());
    }

    #[test]
    fn cache_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(cache_file_name("aabbcc", "ddeeff", "last"));
        let ex = vec![
            Tensor::new(vec![2, 3], vec![1.0f32, -2.0, 0.5, 3.25, -0.125, 9.0]).unwrap(),
            Tensor::new(vec![1, 3], vec![0.1, 0.2, 0.3]).unwrap(),
        ];
        save_features(&path, &ex).unwrap();
        let back = load_features(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in ex.iter().zip(&back) {
            assert!(a.bitwise_eq(b));
        }
    }

    fn toy_frozen_set(n: usize, offset: u64) -> Vec<FrozenExample> {
        // Class of each position = sign pattern of its feature vector;
        // trivially decodable, which is the point: the harness is under test.
        use rand::Rng;
        let mut rng = stream(offset, 3, 0);
        (0..n)
            .map(|_| {
                let len = rng.gen_range(3..6usize);
                let mut data = Vec::new();
                let mut labels = Vec::new();
                for pos in 0..len {
                    let class = rng.gen_range(0..2usize);
                    let base = if class == 0 { 1.0 } else { -1.0 };
                    for j in 0..6 {
                        let noise: f64 = rng.gen_range(-0.2..0.2);
                        data.push((base * ((j % 2) as f64 * 2.0 - 1.0) + noise) as f32);
                    }
                    labels.push(if pos == 0 { IGNORE_INDEX } else { class });
                }
                FrozenExample {
                    layers: vec![Tensor::new(vec![len, 6], data).unwrap()],
                    labels,
                }
            })
            .collect()
    }

    #[test]
    fn tagger_learns_separable_positions() {
        let train = toy_frozen_set(24, 1);
        let dev = toy_frozen_set(12, 2);
        let cfg = TaggerConfig {
            hidden: 8,
            labels: 2,
            epochs: 6,
            lr: 2e-2,
        };
        let result = frozen_tagger_train(&train, &dev, &cfg, 9).unwrap();
        assert!(
            result.dev_accuracy >= 0.95,
            "dev accuracy {}",
            result.dev_accuracy
        );
    }

    #[test]
    fn learned_mix_weights_are_softmax_normalized() {
        let mut train = toy_frozen_set(8, 3);
        for ex in &mut train {
            let extra = ex.layers[0].detach();
            ex.layers.push(extra);
        }
        let mut dev = toy_frozen_set(4, 4);
        for ex in &mut dev {
            let extra = ex.layers[0].detach();
            ex.layers.push(extra);
        }
        let cfg = TaggerConfig {
            hidden: 4,
            labels: 2,
            epochs: 2,
            lr: 1e-2,
        };
        let result = frozen_tagger_train(&train, &dev, &cfg, 10).unwrap();
        let mix = result.learned_mix.unwrap();
        assert_eq!(mix.len(), 2);
        let sum: f32 = mix.iter().sum();
        assert!((sum - 1.0).abs() < 1e-5);
    }
}
