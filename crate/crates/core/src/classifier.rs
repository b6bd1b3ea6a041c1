//! Mean-pooled dual classification head (intent + speaker) on top of the
//! encoder, and the full model that ties the two together.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::glorot;
use crate::data::{Dataset, Utterance};
use crate::encoder::{self, encode, EncoderConfig, EncoderWeights, ForwardMode};
use crate::error::{Error, Result};
use crate::metrics::{self, Metrics};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead<T> {
    /// `n_intents × (d_model + 6)`.
    pub intent: T,
    pub intent_bias: T,
    /// `n_speakers × (d_model + 6)`.
    pub speaker: T,
    pub speaker_bias: T,
}

impl<T> ClassifierHead<T> {
    pub fn map<U>(&self, path: &str, f: &mut impl FnMut(&str, &T) -> U) -> ClassifierHead<U> {
        ClassifierHead {
            intent: f(&format!("{path}.intent.weight"), &self.intent),
            intent_bias: f(&format!("{path}.intent.bias"), &self.intent_bias),
            speaker: f(&format!("{path}.speaker.weight"), &self.speaker),
            speaker_bias: f(&format!("{path}.speaker.bias"), &self.speaker_bias),
        }
    }

    pub fn for_each_mut(&mut self, path: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{path}.intent.weight"), &mut self.intent);
        f(&format!("{path}.intent.bias"), &mut self.intent_bias);
        f(&format!("{path}.speaker.weight"), &mut self.speaker);
        f(&format!("{path}.speaker.bias"), &mut self.speaker_bias);
    }
}

impl ClassifierHead<Tensor> {
    pub fn init<R: Rng + ?Sized>(input_dim: usize, n_intents: usize, n_speakers: usize, rng: &mut R) -> Self {
        ClassifierHead {
            intent: glorot(rng, n_intents, input_dim),
            intent_bias: Tensor::zeros(&[n_intents]),
            speaker: glorot(rng, n_speakers, input_dim),
            speaker_bias: Tensor::zeros(&[n_speakers]),
        }
    }
}

/// Mean over time, then one affine map per task. Returns `(intent, speaker)`
/// logits as `n × 1` columns.
pub fn pool_and_classify(tape: &mut Tape, hidden: Var, head: &ClassifierHead<Var>) -> Result<(Var, Var)> {
    let pooled = tape.mean_cols(hidden)?;
    let intent = tape.matmul(head.intent, pooled)?;
    let intent = tape.add_col_bias(intent, head.intent_bias)?;
    let speaker = tape.matmul(head.speaker, pooled)?;
    let speaker = tape.add_col_bias(speaker, head.speaker_bias)?;
    Ok((intent, speaker))
}

/// Everything needed to rebuild a model's shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub n_intents: usize,
    pub n_speakers: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_intents == 0 || self.n_speakers == 0 {
            return Err(Error::param("need at least one intent and one speaker class"));
        }
        self.encoder.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SluModel<T> {
    pub encoder: EncoderWeights<T>,
    pub head: ClassifierHead<T>,
}

impl<T> SluModel<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&str, &T) -> U) -> SluModel<U> {
        SluModel { encoder: self.encoder.map("encoder", f), head: self.head.map("head", f) }
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&str, &mut T)) {
        self.encoder.for_each_mut("encoder", f);
        self.head.for_each_mut("head", f);
    }
}

impl SluModel<Tensor> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = encoder::init_with_rng(&cfg.encoder, &mut rng);
        let head = ClassifierHead::init(cfg.encoder.output_dim(), cfg.n_intents, cfg.n_speakers, &mut rng);
        Ok(SluModel { encoder, head })
    }

    pub fn bind(&self, tape: &mut Tape) -> SluModel<Var> {
        self.map(&mut |_, t| tape.param(t))
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> SluModel<Var> {
        self.map(&mut |_, t| tape.constant(t.clone()))
    }

    /// Parameters in traversal order, with their dotted names.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut names = Vec::new();
        self.map(&mut |name, _| names.push(name.to_string()));
        let mut refs = Vec::new();
        collect_refs(self, &mut refs);
        names.into_iter().zip(refs).collect()
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.map(&mut |_, t| n += t.len());
        n
    }
}

fn collect_refs<'a>(model: &'a SluModel<Tensor>, out: &mut Vec<&'a Tensor>) {
    fn attn<'a>(w: &'a crate::attention::AttentionWeights<Tensor>, out: &mut Vec<&'a Tensor>) {
        for h in &w.heads {
            out.extend([&h.query, &h.key, &h.value]);
            out.extend(h.pos_query.iter().chain(&h.pos_key).chain(&h.pos_u));
        }
        if let Some(s) = &w.shared {
            out.extend([&s.pos_key, &s.u]);
            out.extend(s.v.iter());
        }
        out.push(&w.out);
    }
    let e = &model.encoder;
    out.extend([&e.conv1, &e.conv1_bias, &e.conv2, &e.conv2_bias, &e.proj, &e.proj_bias]);
    for l in &e.layers {
        attn(&l.attention, out);
        out.extend([&l.ln1_gamma, &l.ln1_beta, &l.ff1, &l.ff1_bias, &l.ff2, &l.ff2_bias, &l.ln2_gamma, &l.ln2_beta]);
    }
    let h = &model.head;
    out.extend([&h.intent, &h.intent_bias, &h.speaker, &h.speaker_bias]);
}

/// Intent and speaker logits for one utterance.
pub fn forward_logits(
    tape: &mut Tape,
    model: &SluModel<Var>,
    cfg: &ModelConfig,
    features: &Tensor,
    mode: &mut ForwardMode,
) -> Result<(Var, Var)> {
    let f = tape.constant(features.clone());
    let hidden = encode(tape, f, &cfg.encoder, &model.encoder, mode)?;
    pool_and_classify(tape, hidden, &model.head)
}

/// Unweighted sum of intent and speaker cross-entropy for one utterance.
pub fn utterance_loss(
    tape: &mut Tape,
    model: &SluModel<Var>,
    cfg: &ModelConfig,
    utt: &Utterance,
    mode: &mut ForwardMode,
) -> Result<Var> {
    let (intent, speaker) = forward_logits(tape, model, cfg, &utt.features, mode)?;
    let li = tape.cross_entropy(intent, utt.intent)?;
    let ls = tape.cross_entropy(speaker, utt.speaker)?;
    tape.add(li, ls)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Predicted `(intent, speaker)` for one utterance in eval mode.
pub fn predict(model: &SluModel<Tensor>, cfg: &ModelConfig, features: &Tensor) -> Result<(usize, usize)> {
    let mut tape = Tape::new();
    let bound = model.bind_frozen(&mut tape);
    let (i, s) = forward_logits(&mut tape, &bound, cfg, features, &mut ForwardMode::eval())?;
    Ok((argmax(tape.value(i).data()), argmax(tape.value(s).data())))
}

/// Intent F1 (micro and macro) and speaker accuracy over a dataset.
pub fn evaluate(model: &SluModel<Tensor>, cfg: &ModelConfig, data: &Dataset) -> Result<Metrics> {
    let mut intents = Vec::with_capacity(data.len());
    let mut speakers = Vec::with_capacity(data.len());
    for utt in &data.utterances {
        let (pi, ps) = predict(model, cfg, &utt.features)?;
        intents.push((utt.intent, pi));
        speakers.push((utt.speaker, ps));
    }
    Ok(metrics::summarize(&intents, &speakers, cfg.n_intents))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head_on(tape: &mut Tape, d: usize) -> ClassifierHead<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut head = ClassifierHead::init(d, 3, 2, &mut rng);
        head.intent_bias = Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap();
        head.speaker_bias = Tensor::from_vec(&[2], vec![-1.0, 1.0]).unwrap();
        head.map("h", &mut |_, t| tape.param(t))
    }

    #[test]
    fn zero_input_gives_biases() {
        let mut tape = Tape::new();
        let head = head_on(&mut tape, 4);
        let hidden = tape.constant(Tensor::zeros(&[4, 5]));
        let (i, s) = pool_and_classify(&mut tape, hidden, &head).unwrap();
        assert_eq!(tape.value(i).data(), &[0.1, 0.2, 0.3]);
        assert_eq!(tape.value(s).data(), &[-1.0, 1.0]);
    }

    #[test]
    fn single_column_pooling_is_identity() {
        let mut tape = Tape::new();
        let head = head_on(&mut tape, 4);
        let col = Tensor::from_vec(&[4, 1], vec![0.5, -0.25, 1.0, 2.0]).unwrap();
        let hidden = tape.constant(col.clone());
        let pooled = tape.mean_cols(hidden).unwrap();
        assert_eq!(tape.value(pooled), &col);
        let (i, _) = pool_and_classify(&mut tape, hidden, &head).unwrap();
        assert_eq!(tape.shape(i), &[3, 1]);
    }

    #[test]
    fn pooling_ignores_column_order() {
        let mut tape = Tape::new();
        let head = head_on(&mut tape, 3);
        let h = Tensor::from_fn(&[3, 4], |k| (k as f64 * 0.7).sin());
        let hp = h.select_columns(&[2, 0, 3, 1]).unwrap();
        let a = tape.constant(h);
        let b = tape.constant(hp);
        let (ia, sa) = pool_and_classify(&mut tape, a, &head).unwrap();
        let (ib, sb) = pool_and_classify(&mut tape, b, &head).unwrap();
        assert!(tape.value(ia).max_abs_diff(tape.value(ib)) < 1e-15);
        assert!(tape.value(sa).max_abs_diff(tape.value(sb)) < 1e-15);
    }

    #[test]
    fn named_parameters_line_up_with_map_order() {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                n_layers: 2,
                share_layers: false,
                d_ff: 4,
                conv_channels: [1, 2],
                input_dim: 4,
                attention: crate::attention::AttentionConfig {
                    n_heads: 1,
                    d_head: 2,
                    variant: crate::attention::Variant::RelativeDai,
                    ..Default::default()
                },
                ..Default::default()
            },
            n_intents: 2,
            n_speakers: 2,
        };
        let model = SluModel::init(&cfg, 0).unwrap();
        let mut shapes = Vec::new();
        model.map(&mut |name, t| shapes.push((name.to_string(), t.shape().to_vec())));
        let named = model.named_parameters();
        assert_eq!(named.len(), shapes.len());
        for ((n1, t), (n2, s)) in named.iter().zip(&shapes) {
            assert_eq!(n1, n2);
            assert_eq!(t.shape(), &s[..]);
        }
    }
}
