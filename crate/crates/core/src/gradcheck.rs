//! Central-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{multi_head, AttentionConfig, AttentionWeights, Variant};
use crate::classifier::{utterance_loss, ClassifierHead, ModelConfig, SluModel};
use crate::data::Utterance;
use crate::encoder::{encode, init_weights, sequence_positions, EncoderConfig, ForwardMode};
use crate::error::{Error, Result};
use crate::position::PositionConfig;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Where the largest disagreement between analytic and numeric gradients occurred.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub param: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<(f64, Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f(&mut tape, &vars)?;
    if tape.is_stochastic() {
        return Err(Error::contract("gradient check needs a deterministic function; dropout is active"));
    }
    if tape.value(loss).len() != 1 {
        return Err(Error::contract("gradient check needs a scalar function"));
    }
    Ok((tape.value(loss).data()[0], tape, vars, loss))
}

/// Max over all parameter elements of
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_report(f, params, eps).map(|r| r.max_rel_error)
}

pub fn grad_check_report<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::param(format!("finite-difference step {eps} must be positive")));
    }
    let (base, tape, vars, loss) = evaluate(&f, params)?;
    let (again, ..) = evaluate(&f, params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::contract("function under test is not deterministic"));
    }
    let grads = tape.backward(loss)?;
    drop(tape);

    let mut report = GradCheckReport { max_rel_error: 0.0, param: 0, element: 0, analytic: 0.0, numeric: 0.0 };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for e in 0..params[pi].len() {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + eps;
            let (plus, ..) = evaluate(&f, &work)?;
            work[pi].data_mut()[e] = orig - eps;
            let (minus, ..) = evaluate(&f, &work)?;
            work[pi].data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > report.max_rel_error || (pi == 0 && e == 0) {
                report = GradCheckReport { max_rel_error: rel, param: pi, element: e, analytic: a, numeric };
            }
        }
    }
    Ok(report)
}

/// One row of [`standard_suite`].
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteRow {
    pub name: String,
    pub report: GradCheckReport,
}

/// Largest relative error the suite tolerates with 64-bit arithmetic.
pub const SUITE_TOLERANCE: f64 = 1e-4;

fn random(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Random linear functional of `out`, so every output element matters.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(random(seed, tape.shape(out)));
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn jittered<W>(w: &mut W, seed: u64, for_each: impl FnOnce(&mut W, &mut dyn FnMut(&str, &mut Tensor))) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Lifts zero-initialized biases and u/v off zero so every path carries signal.
    for_each(w, &mut |_, t| t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3)));
}

fn tiny_encoder(variant: Variant) -> EncoderConfig {
    EncoderConfig {
        n_layers: 2,
        attention: AttentionConfig { n_heads: 2, d_head: 2, window: Some(3), variant, ..Default::default() },
        d_ff: 5,
        dropout: 0.0,
        share_layers: true,
        position: PositionConfig::new(8),
        conv_channels: [2, 2],
        conv_kernel: 5,
        input_dim: 6,
        ..Default::default()
    }
}

/// Checks every differentiable tape operation, multi-head attention for
/// each variant (full, masked-window and banded layouts), the 2-layer
/// shared encoder for each variant, and the classifier loss.
pub fn standard_suite(eps: f64) -> Result<Vec<SuiteRow>> {
    type Check = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
    let mut cases: Vec<(String, Vec<Tensor>, Check)> = Vec::new();
    let mut op = |name: &str, params: Vec<Tensor>, f: Check| cases.push((name.to_string(), params, f));

    let kinked = {
        let mut x = random(10, &[3, 4]);
        x.data_mut().iter_mut().for_each(|v| *v = v.signum() * (0.1 + v.abs()));
        x
    };
    op("matmul", vec![random(1, &[3, 4]), random(2, &[4, 2])], Box::new(|t, p| {
        let y = t.matmul(p[0], p[1])?;
        project(t, y, 9)
    }));
    op("transpose", vec![random(3, &[3, 4])], Box::new(|t, p| {
        let y = t.transpose(p[0])?;
        project(t, y, 9)
    }));
    op("add_sub_mul", vec![random(4, &[2, 3]), random(5, &[2, 3])], Box::new(|t, p| {
        let a = t.add(p[0], p[1])?;
        let b = t.sub(p[0], p[1])?;
        let y = t.mul(a, b)?;
        project(t, y, 9)
    }));
    op("scale_mul_const", vec![random(6, &[4])], Box::new(|t, p| {
        let a = t.scale(p[0], -2.5);
        let y = t.mul_const(a, vec![1.0, 0.5, -3.0, 2.0])?;
        project(t, y, 9)
    }));
    op("add_col_bias", vec![random(7, &[3, 5]), random(8, &[3])], Box::new(|t, p| {
        let y = t.add_col_bias(p[0], p[1])?;
        project(t, y, 9)
    }));
    op("add_channel_bias", vec![random(7, &[2, 3, 4]), random(8, &[2])], Box::new(|t, p| {
        let y = t.add_channel_bias(p[0], p[1])?;
        project(t, y, 9)
    }));
    op("relu", vec![kinked], Box::new(|t, p| {
        let y = t.relu(p[0]);
        project(t, y, 9)
    }));
    op("reshape_concat_mean", vec![random(11, &[2, 6]), random(12, &[3, 6])], Box::new(|t, p| {
        let a = t.reshape(p[0], &[4, 3])?;
        let a = t.reshape(a, &[2, 6])?;
        let c = t.concat_rows(&[a, p[1]])?;
        let y = t.mean_cols(c)?;
        project(t, y, 9)
    }));
    op("gather", vec![random(13, &[1, 5])], Box::new(|t, p| {
        let index = vec![Some(0), Some(4), None, Some(4), Some(2), Some(1), None, Some(0), Some(3)];
        let y = t.gather(p[0], &[3, 3], index)?;
        project(t, y, 9)
    }));
    op("layer_norm", vec![random(20, &[5, 3]), random(21, &[5]), random(22, &[5])], Box::new(|t, p| {
        let y = t.layer_norm(p[0], p[1], p[2], 1e-5)?;
        project(t, y, 9)
    }));
    op("softmax_masked", vec![random(23, &[3, 3])], Box::new(|t, p| {
        let mask = [true, false, true, true, true, true, false, true, false];
        let y = t.softmax_masked(p[0], Some(&mask))?;
        project(t, y, 9)
    }));
    op("softmax", vec![random(24, &[2, 4])], Box::new(|t, p| {
        let y = t.softmax_masked(p[0], None)?;
        project(t, y, 9)
    }));
    op("cross_entropy", vec![random(25, &[4, 1])], Box::new(|t, p| t.cross_entropy(p[0], 2)));
    for stride in [(1, 1), (2, 2), (2, 1)] {
        op(&format!("conv2d stride {stride:?}"), vec![random(30, &[2, 5, 7]), random(31, &[3, 2, 3, 3])], Box::new(move |t, p| {
            let y = t.conv2d(p[0], p[1], stride)?;
            project(t, y, 9)
        }));
    }
    for radius in [0, 1, 2] {
        op(&format!("band_scores radius {radius}"), vec![random(32, &[3, 6]), random(33, &[3, 6])], Box::new(move |t, p| {
            let y = t.band_scores(p[0], p[1], radius)?;
            project(t, y, 9)
        }));
        op(&format!("band_apply radius {radius}"), vec![random(34, &[6, 2 * radius + 1]), random(35, &[2, 6])], Box::new(move |t, p| {
            let y = t.band_apply(p[0], p[1], radius)?;
            project(t, y, 9)
        }));
    }

    for variant in Variant::ALL {
        for (window, banded) in [(None, false), (Some(3), false), (Some(3), true)] {
            let mut cfg = tiny_encoder(variant);
            cfg.attention.window = window;
            cfg.attention.banded = banded;
            let mut w = AttentionWeights::init(&cfg.attention, &mut ChaCha8Rng::seed_from_u64(50));
            jittered(&mut w, 51, |w, f| w.for_each_mut("a", &mut |n, t| f(n, t)));
            let mut params = vec![random(52, &[cfg.d_model(), 5])];
            w.map("a", &mut |_, t| params.push(t.clone()));
            let layout = match (window, banded) {
                (None, _) => "full",
                (_, false) => "masked",
                (_, true) => "banded",
            };
            op(&format!("attention {variant} {layout}"), params, Box::new(move |t, p| {
                let mut it = p[1..].iter().copied();
                let wv = w.map("a", &mut |_, _| it.next().expect("one var per tensor"));
                let pos = sequence_positions(t, 5, &cfg, &mut ForwardMode::eval())?;
                let y = multi_head(t, p[0], &pos.inputs, &wv, &cfg.attention)?;
                project(t, y, 9)
            }));
        }
    }

    let features = random(60, &[6, 11]);
    for variant in Variant::ALL {
        let cfg = tiny_encoder(variant);
        let mut w = init_weights(&cfg, 61);
        jittered(&mut w, 62, |w, f| w.for_each_mut("e", &mut |n, t| f(n, t)));
        let mut params = Vec::new();
        w.map("e", &mut |_, t| params.push(t.clone()));
        let features = features.clone();
        op(&format!("encoder 2-layer shared {variant}"), params, Box::new(move |t, p| {
            let mut it = p.iter().copied();
            let wv = w.map("e", &mut |_, _| it.next().expect("one var per tensor"));
            let f = t.constant(features.clone());
            let out = encode(t, f, &cfg, &wv, &mut ForwardMode::eval())?;
            project(t, out, 99)
        }));
    }

    let model_cfg = ModelConfig { encoder: tiny_encoder(Variant::Light), n_intents: 3, n_speakers: 2 };
    let model = SluModel::init(&model_cfg, 70)?;
    let utt = Utterance { id: "u".into(), features: random(71, &[6, 10]), intent: 1, speaker: 0 };
    let head = vec![model.head.intent.clone(), model.head.intent_bias.clone(), model.head.speaker.clone(), model.head.speaker_bias.clone()];
    op("classifier loss", head, Box::new(move |t, p| {
        let mut bound = model.bind_frozen(t);
        bound.head = ClassifierHead { intent: p[0], intent_bias: p[1], speaker: p[2], speaker_bias: p[3] };
        utterance_loss(t, &bound, &model_cfg, &utt, &mut ForwardMode::eval())
    }));

    cases
        .into_iter()
        .map(|(name, params, f)| Ok(SuiteRow { name, report: grad_check_report(f, &params, eps)? }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::from_vec(&[4], vec![0.3, -0.7, 1.2, 0.05]).unwrap();
        let err = grad_check(
            |tape, p| {
                let sq = tape.mul(p[0], p[0])?;
                Ok(tape.sum(sq))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn dropout_is_rejected() {
        let x = Tensor::from_vec(&[4], vec![0.3, -0.7, 1.2, 0.05]).unwrap();
        let err = grad_check(
            |tape, p| {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let y = tape.dropout(p[0], 0.1, true, &mut rng)?;
                Ok(tape.sum(y))
            },
            &[x],
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
