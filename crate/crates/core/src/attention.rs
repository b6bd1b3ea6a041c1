//! Self-attention parameterizations.
//!
//! Four ways of injecting position into scaled dot-product attention:
//!
//! * [`Variant::Absolute`]: sinusoidal `p` added to the content before the
//!   query/key/value projections.
//! * [`Variant::RelativeDai`]: content logits plus a relative term
//!   `(K_p p_{i−j})ᵀu + (K_p p_{i−j})ᵀv`, all over `√d_k`, with
//!   `d_model`-dimensional sinusoidal offset embeddings. `u` and `v` hit the
//!   same vector, so only `u + v` matters.
//! * [`Variant::ConcatAbs`]: the 6-dimensional light position is concatenated
//!   to the content and the projections are block diagonal, giving
//!   `(K_c x_j)ᵀ(Q_c x_i)/√d_k + (K_p p_j)ᵀ(Q_p p_i)/√d_p`.
//! * [`Variant::Light`]: the content term plus `(K_p p_{i−j})ᵀu/√d_p` with
//!   light offset embeddings.
//!
//! In the relative variants the position term does not depend on content,
//! so it is a single vector over offsets ([`relative_bias_vector`]) gathered
//! into the score matrix. Windowed attention is computed in banded form:
//! scores are `L × window` instead of `L × L`.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::position::{OffsetRange, LIGHT_DIM};
use crate::tape::{band_key, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Absolute,
    RelativeDai,
    ConcatAbs,
    Light,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Absolute, Variant::RelativeDai, Variant::ConcatAbs, Variant::Light];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Absolute => "absolute",
            Variant::RelativeDai => "relative_dai",
            Variant::ConcatAbs => "concat_abs",
            Variant::Light => "light",
        }
    }

    /// Uses a relative (offset-indexed) position term.
    pub fn is_relative(self) -> bool {
        matches!(self, Variant::RelativeDai | Variant::Light)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::param(format!("unknown attention variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub n_heads: usize,
    pub d_head: usize,
    /// Odd neighborhood size centered on each query; `None` attends everywhere.
    pub window: Option<usize>,
    pub variant: Variant,
    /// Light variant only: one `K_p`/`u` pair for all heads instead of one per head.
    pub shared_position: bool,
    /// Compute windowed attention as a band (`L × window` scores) rather
    /// than a masked `L × L` matrix. Both give the same output.
    pub banded: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            n_heads: 8,
            d_head: 64,
            window: Some(5),
            variant: Variant::Light,
            shared_position: false,
            banded: true,
        }
    }
}

impl AttentionConfig {
    pub fn d_model(&self) -> usize {
        self.n_heads * self.d_head
    }

    /// Dimension of the position embedding the variant consumes.
    pub fn d_p(&self) -> usize {
        match self.variant {
            Variant::Light | Variant::ConcatAbs => LIGHT_DIM,
            Variant::Absolute | Variant::RelativeDai => self.d_model(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_head == 0 {
            return Err(Error::param("attention needs at least one head of positive width"));
        }
        if let Some(w) = self.window {
            if w == 0 || w % 2 == 0 {
                return Err(Error::param(format!("attention window must be odd and >= 1, got {w}")));
            }
        }
        if matches!(self.variant, Variant::Absolute | Variant::RelativeDai) && self.d_model() % 2 != 0 {
            return Err(Error::param("sinusoidal position variants need an even d_model"));
        }
        Ok(())
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        AttentionConfig { variant, ..self.clone() }
    }
}

/// Projections owned by one head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights<T> {
    /// `Q` / `Q_c`: `d_head × d_model`.
    pub query: T,
    /// `K` / `K_c`: `d_head × d_model`.
    pub key: T,
    /// `V`: `d_head × d_model`.
    pub value: T,
    /// Concat variant `Q_p`: `6 × 6`.
    pub pos_query: Option<T>,
    /// Concat / light variant `K_p`: `6 × 6`.
    pub pos_key: Option<T>,
    /// Light variant `u`: 6-vector.
    pub pos_u: Option<T>,
}

/// Position parameters shared by every head of a layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedPosition<T> {
    /// `K_p`: `d_model × d_p` (relative_dai) or `6 × 6` (shared light).
    pub pos_key: T,
    pub u: T,
    /// relative_dai only.
    pub v: Option<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T> {
    pub heads: Vec<HeadWeights<T>>,
    pub shared: Option<SharedPosition<T>>,
    /// `W_out`: `d_model × (n_heads · d_head)`.
    pub out: T,
}

fn map_opt<T, U>(v: &Option<T>, name: &str, f: &mut impl FnMut(&str, &T) -> U) -> Option<U> {
    v.as_ref().map(|t| f(name, t))
}

impl<T> HeadWeights<T> {
    pub fn map<U>(&self, path: &str, f: &mut impl FnMut(&str, &T) -> U) -> HeadWeights<U> {
        HeadWeights {
            query: f(&format!("{path}.query"), &self.query),
            key: f(&format!("{path}.key"), &self.key),
            value: f(&format!("{path}.value"), &self.value),
            pos_query: map_opt(&self.pos_query, &format!("{path}.pos_query"), f),
            pos_key: map_opt(&self.pos_key, &format!("{path}.pos_key"), f),
            pos_u: map_opt(&self.pos_u, &format!("{path}.pos_u"), f),
        }
    }

    pub fn for_each_mut(&mut self, path: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{path}.query"), &mut self.query);
        f(&format!("{path}.key"), &mut self.key);
        f(&format!("{path}.value"), &mut self.value);
        if let Some(t) = &mut self.pos_query {
            f(&format!("{path}.pos_query"), t);
        }
        if let Some(t) = &mut self.pos_key {
            f(&format!("{path}.pos_key"), t);
        }
        if let Some(t) = &mut self.pos_u {
            f(&format!("{path}.pos_u"), t);
        }
    }
}

impl<T> AttentionWeights<T> {
    pub fn map<U>(&self, path: &str, f: &mut impl FnMut(&str, &T) -> U) -> AttentionWeights<U> {
        AttentionWeights {
            heads: self.heads.iter().enumerate().map(|(h, w)| w.map(&format!("{path}.head{h}"), f)).collect(),
            shared: self.shared.as_ref().map(|s| SharedPosition {
                pos_key: f(&format!("{path}.shared.pos_key"), &s.pos_key),
                u: f(&format!("{path}.shared.u"), &s.u),
                v: map_opt(&s.v, &format!("{path}.shared.v"), f),
            }),
            out: f(&format!("{path}.out"), &self.out),
        }
    }

    pub fn for_each_mut(&mut self, path: &str, f: &mut impl FnMut(&str, &mut T)) {
        for (h, w) in self.heads.iter_mut().enumerate() {
            w.for_each_mut(&format!("{path}.head{h}"), f);
        }
        if let Some(s) = &mut self.shared {
            f(&format!("{path}.shared.pos_key"), &mut s.pos_key);
            f(&format!("{path}.shared.u"), &mut s.u);
            if let Some(v) = &mut s.v {
                f(&format!("{path}.shared.v"), v);
            }
        }
        f(&format!("{path}.out"), &mut self.out);
    }
}

/// Uniform Glorot initialization of an `rows × cols` matrix.
pub(crate) fn glorot<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(&[rows, cols], |_| rng.random_range(-limit..limit))
}

pub(crate) fn small_uniform<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Tensor {
    Tensor::from_fn(&[n], |_| rng.random_range(-0.1..0.1))
}

impl AttentionWeights<Tensor> {
    /// Glorot-uniform projections; `u`/`v` uniform in `[−0.1, 0.1]`.
    pub fn init<R: Rng + ?Sized>(cfg: &AttentionConfig, rng: &mut R) -> Self {
        let (d_model, d_head) = (cfg.d_model(), cfg.d_head);
        let per_head_light = cfg.variant == Variant::Light && !cfg.shared_position;
        let heads = (0..cfg.n_heads)
            .map(|_| HeadWeights {
                query: glorot(rng, d_head, d_model),
                key: glorot(rng, d_head, d_model),
                value: glorot(rng, d_head, d_model),
                pos_query: (cfg.variant == Variant::ConcatAbs).then(|| glorot(rng, LIGHT_DIM, LIGHT_DIM)),
                pos_key: (cfg.variant == Variant::ConcatAbs || per_head_light)
                    .then(|| glorot(rng, LIGHT_DIM, LIGHT_DIM)),
                pos_u: per_head_light.then(|| small_uniform(rng, LIGHT_DIM)),
            })
            .collect();
        let shared = match cfg.variant {
            Variant::RelativeDai => Some(SharedPosition {
                pos_key: glorot(rng, d_model, cfg.d_p()),
                u: small_uniform(rng, cfg.d_p()),
                v: Some(small_uniform(rng, cfg.d_p())),
            }),
            Variant::Light if cfg.shared_position => Some(SharedPosition {
                pos_key: glorot(rng, LIGHT_DIM, LIGHT_DIM),
                u: small_uniform(rng, LIGHT_DIM),
                v: None,
            }),
            _ => None,
        };
        AttentionWeights { heads, shared, out: glorot(rng, d_model, cfg.n_heads * d_head) }
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.map("", &mut |_, t| n += t.len());
        n
    }

    /// Zeroes every position-specific parameter (`Q_p`, `K_p`, `u`, `v`).
    pub fn zero_position_params(&mut self) {
        self.for_each_mut("", &mut |name, t| {
            if name.contains("pos_") || name.contains(".shared.") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        });
    }
}

/// How scores are laid out for one attention call.
#[derive(Clone, Debug)]
pub enum Layout {
    /// `L × L` scores; `false` mask entries are excluded from the softmax.
    Full(Option<Arc<[bool]>>),
    /// `L × (2·radius+1)` scores around the diagonal.
    Band(usize),
}

impl Layout {
    pub fn for_config(len: usize, cfg: &AttentionConfig) -> Result<Self> {
        match cfg.window {
            None => Ok(Layout::Full(None)),
            Some(w) if cfg.banded => {
                window_mask(1, w)?;
                Ok(Layout::Band((w - 1) / 2))
            }
            Some(w) => Ok(Layout::Full(Some(window_mask(len, w)?.into()))),
        }
    }

    /// Gather pattern turning an offset vector into this layout's score shape.
    fn offset_index(&self, len: usize, offsets: OffsetRange) -> Result<(Vec<usize>, Vec<Option<usize>>)> {
        let missing = |delta: i64| Error::contract(format!("no relative embedding for offset {delta}"));
        match self {
            Layout::Full(mask) => {
                let mut idx = Vec::with_capacity(len * len);
                for i in 0..len {
                    for j in 0..len {
                        let delta = i as i64 - j as i64;
                        let allowed = mask.as_ref().is_none_or(|m| m[i * len + j]);
                        let slot = offsets.index(delta);
                        if allowed && slot.is_none() {
                            return Err(missing(delta));
                        }
                        idx.push(slot.filter(|_| allowed));
                    }
                }
                Ok((vec![len, len], idx))
            }
            Layout::Band(r) => {
                let w = 2 * r + 1;
                let mut idx = Vec::with_capacity(len * w);
                for i in 0..len {
                    for c in 0..w {
                        if band_key(i, c, *r, len).is_none() {
                            idx.push(None);
                            continue;
                        }
                        let delta = *r as i64 - c as i64;
                        idx.push(Some(offsets.index(delta).ok_or_else(|| missing(delta))?));
                    }
                }
                Ok((vec![len, w], idx))
            }
        }
    }

    fn mask(&self, len: usize) -> Option<Vec<bool>> {
        match self {
            Layout::Full(mask) => mask.as_ref().map(|m| m.to_vec()),
            Layout::Band(r) => {
                let w = 2 * r + 1;
                Some((0..len * w).map(|k| band_key(k / w, k % w, *r, len).is_some()).collect())
            }
        }
    }
}

/// `mask[i][j]` is true iff `|i − j| ≤ (window − 1)/2`.
pub fn window_mask(len: usize, window: usize) -> Result<Vec<bool>> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::param(format!("window must be odd and >= 1, got {window}")));
    }
    let r = (window - 1) / 2;
    Ok((0..len * len).map(|k| (k / len).abs_diff(k % len) <= r).collect())
}

/// Content-independent position logits over offsets, shape `[1 × n_offsets]`.
#[derive(Clone, Copy, Debug)]
pub struct RelativeBias {
    pub values: Var,
    pub offsets: OffsetRange,
}

/// `b(δ) = scale · uᵀ (K_p p_δ)` for every offset in `table`'s range.
///
/// `table` holds the offset embeddings as `d_p × n_offsets` columns.
pub fn relative_bias_vector(
    tape: &mut Tape,
    pos_key: Var,
    u: Var,
    table: Var,
    offsets: OffsetRange,
    scale: f64,
) -> Result<RelativeBias> {
    if tape.shape(table)[1] != offsets.len() {
        return Err(Error::dim("relative table width does not match the offset range"));
    }
    let projected = tape.matmul(pos_key, table)?;
    let d = tape.shape(projected)[0];
    if tape.value(u).len() != d {
        return Err(Error::dim(format!("u has {} entries, K_p p has {d}", tape.value(u).len())));
    }
    let u_row = tape.reshape(u, &[1, d])?;
    let b = tape.matmul(u_row, projected)?;
    Ok(RelativeBias { values: tape.scale(b, scale), offsets })
}

fn project(tape: &mut Tape, w: Var, x: Var) -> Result<Var> {
    tape.matmul(w, x)
}

/// Raw content scores `qᵀk` in the layout's shape.
fn scores(tape: &mut Tape, q: Var, k: Var, layout: &Layout) -> Result<Var> {
    match layout {
        Layout::Full(_) => {
            let qt = tape.transpose(q)?;
            tape.matmul(qt, k)
        }
        Layout::Band(r) => tape.band_scores(q, k, *r),
    }
}

/// Softmax over keys, then the weighted sum of values.
fn attend(tape: &mut Tape, logits: Var, v: Var, layout: &Layout) -> Result<Var> {
    let len = tape.shape(v)[1];
    tape.meter_scores(tape.value(logits).len());
    let mask = layout.mask(len);
    let weights = tape.softmax_masked(logits, mask.as_deref())?;
    match layout {
        Layout::Full(_) => {
            let wt = tape.transpose(weights)?;
            tape.matmul(v, wt)
        }
        Layout::Band(r) => tape.band_apply(weights, v, *r),
    }
}

fn content_logits(tape: &mut Tape, x: Var, head: &HeadWeights<Var>, layout: &Layout) -> Result<(Var, Var)> {
    let q = project(tape, head.query, x)?;
    let k = project(tape, head.key, x)?;
    let d_k = tape.shape(q)[0] as f64;
    let s = scores(tape, q, k, layout)?;
    Ok((tape.scale(s, 1.0 / d_k.sqrt()), project(tape, head.value, x)?))
}

fn required<T: Copy>(v: Option<T>, what: &str) -> Result<T> {
    v.ok_or_else(|| Error::contract(format!("attention weights lack {what}")))
}

/// Additive absolute attention: `softmax((K(x+p))ᵀ(Q(x+p))/√d_k) · V(x+p)`.
pub fn attn_absolute(tape: &mut Tape, x: Var, p: Var, head: &HeadWeights<Var>, layout: &Layout) -> Result<Var> {
    if tape.shape(p) != tape.shape(x) {
        return Err(Error::dim(format!(
            "absolute position must match content shape {:?}, got {:?}",
            tape.shape(x),
            tape.shape(p)
        )));
    }
    let xin = tape.add(x, p)?;
    let (logits, v) = content_logits(tape, xin, head, layout)?;
    attend(tape, logits, v, layout)
}

/// Content attention plus a gathered offset bias (relative_dai and light).
fn attn_with_bias(tape: &mut Tape, x: Var, bias: &RelativeBias, head: &HeadWeights<Var>, layout: &Layout) -> Result<Var> {
    let len = tape.shape(x)[1];
    let (content, v) = content_logits(tape, x, head, layout)?;
    let (shape, index) = layout.offset_index(len, bias.offsets)?;
    let gathered = tape.gather(bias.values, &shape, index)?;
    let logits = tape.add(content, gathered)?;
    attend(tape, logits, v, layout)
}

/// Relative attention with `d_model`-dimensional offset embeddings. `bias`
/// comes from [`relative_bias_vector`] with `u + v` and scale `1/√d_k`.
pub fn attn_relative_dai(tape: &mut Tape, x: Var, bias: &RelativeBias, head: &HeadWeights<Var>, layout: &Layout) -> Result<Var> {
    attn_with_bias(tape, x, bias, head, layout)
}

/// Light relative attention; `bias` comes from [`relative_bias_vector`]
/// with this head's (or the shared) `K_p`, `u` and scale `1/√6`.
pub fn attn_light(tape: &mut Tape, x: Var, bias: &RelativeBias, head: &HeadWeights<Var>, layout: &Layout) -> Result<Var> {
    attn_with_bias(tape, x, bias, head, layout)
}

/// Concatenated absolute attention with block-diagonal projections.
pub fn attn_concat_abs(tape: &mut Tape, x: Var, p: Var, head: &HeadWeights<Var>, layout: &Layout) -> Result<Var> {
    let (d_p, len_p) = tape.value(p).dims2()?;
    if d_p != LIGHT_DIM || len_p != tape.shape(x)[1] {
        return Err(Error::dim(format!("concat attention needs a 6 × L position matrix, got {:?}", tape.shape(p))));
    }
    let (content, v) = content_logits(tape, x, head, layout)?;
    let qp = project(tape, required(head.pos_query, "Q_p")?, p)?;
    let kp = project(tape, required(head.pos_key, "K_p")?, p)?;
    let sp = scores(tape, qp, kp, layout)?;
    let sp = tape.scale(sp, 1.0 / (d_p as f64).sqrt());
    let logits = tape.add(content, sp)?;
    attend(tape, logits, v, layout)
}

/// Position inputs for one sequence, already on the tape.
#[derive(Clone, Copy, Debug)]
pub struct PositionInputs {
    /// Absolute matrix: sinusoidal `d_model × L` or light `6 × L`.
    pub absolute: Option<Var>,
    /// Offset embeddings `d_p × n_offsets` and the offsets they cover.
    pub relative: Option<(Var, OffsetRange)>,
}

/// `W_out · concat(head_1, …, head_N)` for the configured variant.
pub fn multi_head(
    tape: &mut Tape,
    x: Var,
    pos: &PositionInputs,
    weights: &AttentionWeights<Var>,
    cfg: &AttentionConfig,
) -> Result<Var> {
    if weights.heads.len() != cfg.n_heads {
        return Err(Error::param(format!(
            "configured for {} heads, weights have {}",
            cfg.n_heads,
            weights.heads.len()
        )));
    }
    let len = tape.shape(x)[1];
    let layout = Layout::for_config(len, cfg)?;
    let relative = || required(pos.relative, "relative position embeddings");

    let shared_bias = match (cfg.variant, &weights.shared) {
        (Variant::RelativeDai, Some(s)) => {
            let (table, offsets) = relative()?;
            let uv = tape.add(s.u, required(s.v, "v")?)?;
            let scale = 1.0 / (cfg.d_head as f64).sqrt();
            Some(relative_bias_vector(tape, s.pos_key, uv, table, offsets, scale)?)
        }
        (Variant::Light, Some(s)) => {
            let (table, offsets) = relative()?;
            Some(relative_bias_vector(tape, s.pos_key, s.u, table, offsets, 1.0 / (LIGHT_DIM as f64).sqrt())?)
        }
        (Variant::RelativeDai, None) => return Err(Error::contract("relative_dai attention lacks shared K_p, u, v")),
        _ => None,
    };

    let mut outputs = Vec::with_capacity(cfg.n_heads);
    for head in &weights.heads {
        let out = match cfg.variant {
            Variant::Absolute => attn_absolute(tape, x, required(pos.absolute, "absolute positions")?, head, &layout)?,
            Variant::ConcatAbs => {
                attn_concat_abs(tape, x, required(pos.absolute, "absolute positions")?, head, &layout)?
            }
            Variant::RelativeDai => attn_relative_dai(tape, x, shared_bias.as_ref().expect("checked above"), head, &layout)?,
            Variant::Light => {
                let bias = match &shared_bias {
                    Some(b) => *b,
                    None => {
                        let (table, offsets) = relative()?;
                        let kp = required(head.pos_key, "K_p")?;
                        let u = required(head.pos_u, "u")?;
                        relative_bias_vector(tape, kp, u, table, offsets, 1.0 / (LIGHT_DIM as f64).sqrt())?
                    }
                };
                attn_light(tape, x, &bias, head, &layout)?
            }
        };
        outputs.push(out);
    }
    let stacked = tape.concat_rows(&outputs)?;
    tape.matmul(weights.out, stacked)
}

/// Trainable scalars in one attention layer.
pub fn count_parameters(cfg: &AttentionConfig) -> usize {
    let d_model = cfg.d_model();
    let content = cfg.n_heads * 3 * cfg.d_head * d_model + d_model * cfg.n_heads * cfg.d_head;
    content + position_extras(cfg)
}

/// Scalars spent on position beyond content-only attention.
pub fn position_extras(cfg: &AttentionConfig) -> usize {
    let light = LIGHT_DIM * LIGHT_DIM + LIGHT_DIM;
    match cfg.variant {
        Variant::Absolute => 0,
        Variant::RelativeDai => cfg.d_model() * cfg.d_p() + 2 * cfg.d_p(),
        Variant::ConcatAbs => cfg.n_heads * 2 * LIGHT_DIM * LIGHT_DIM,
        Variant::Light if cfg.shared_position => light,
        Variant::Light => cfg.n_heads * light,
    }
}
