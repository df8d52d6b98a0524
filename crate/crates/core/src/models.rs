//! Forward computations: the four text encoders producing fixed-width
//! embeddings, the GRU prediction network over interpolant blocks, and the
//! early/late fusion heads producing mortality probabilities.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::EpisodeRecord;
use crate::graph::NodeId;
use crate::interp::{assemble_block_on_tape, InterpSpec, ReferenceGrid};
use crate::params::Binding;
use crate::{NumericError, Op, ParameterStore, Real, Tape, Tensor};

pub const PROB_CLAMP: Real = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextVariant {
    Tfidf1nn,
    WeCnn,
    UseGru,
    WseGru,
}

/// Architecture of one text encoder; every variant terminates in an
/// `embed_dim`-wide embedding layer (128 by default).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderSpec {
    pub variant: TextVariant,
    /// TF-IDF vocabulary size, or word-vector width for the other variants.
    pub input_dim: usize,
    pub embed_dim: usize,
    pub gru_hidden: usize,
    pub conv_kernels: usize,
    pub conv_width: usize,
}

impl TextEncoderSpec {
    pub fn new(variant: TextVariant, input_dim: usize) -> Self {
        Self {
            variant,
            input_dim,
            embed_dim: 128,
            gru_hidden: 64,
            conv_kernels: 16,
            conv_width: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    TextOnly,
    TsOnly,
    EarlyFusion,
    LateFusion,
}

impl Modality {
    pub fn uses_text(self) -> bool {
        !matches!(self, Modality::TsOnly)
    }

    pub fn uses_timeseries(self) -> bool {
        !matches!(self, Modality::TextOnly)
    }
}

/// Full model architecture: which parameter groups exist and their shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub modality: Modality,
    pub text: Option<TextEncoderSpec>,
    pub interp: Option<InterpSpec>,
    pub grid: Option<ReferenceGrid>,
    /// Hidden units of the prediction GRU over interpolants.
    pub pred_hidden: usize,
    /// Width of the learned text projection injected per step in early fusion.
    pub text_proj: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), NumericError> {
        if self.modality.uses_text() && self.text.is_none() {
            return Err(NumericError::Invalid("modality requires a text encoder spec".into()));
        }
        if self.modality.uses_timeseries() && (self.interp.is_none() || self.grid.is_none()) {
            return Err(NumericError::Invalid("modality requires interp spec and grid".into()));
        }
        Ok(())
    }

    /// Width of the per-step GRU input vector.
    pub fn ts_input_dim(&self) -> usize {
        let base = self.interp.as_ref().map(|i| 3 * i.d).unwrap_or(0);
        match self.modality {
            Modality::EarlyFusion => base + self.text_proj,
            _ => base,
        }
    }
}

fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<Real> {
    let bound = (6.0 / (fan_in + fan_out) as Real).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

fn init_dense(
    store: &mut ParameterStore,
    prefix: &str,
    rows: usize,
    cols: usize,
    rng: &mut impl Rng,
) {
    store.insert(
        format!("{prefix}.w"),
        Tensor::matrix(rows, cols, xavier(rng, cols, rows, rows * cols)).unwrap(),
    );
    store.insert(format!("{prefix}.b"), Tensor::vector(vec![0.0; rows]));
}

fn init_gru(store: &mut ParameterStore, prefix: &str, f: usize, h: usize, rng: &mut impl Rng) {
    for gate in ["z", "r", "h"] {
        store.insert(
            format!("{prefix}.w{gate}"),
            Tensor::matrix(h, f, xavier(rng, f, h, h * f)).unwrap(),
        );
        store.insert(
            format!("{prefix}.u{gate}"),
            Tensor::matrix(h, h, xavier(rng, h, h, h * h)).unwrap(),
        );
        store.insert(format!("{prefix}.b{gate}"), Tensor::vector(vec![0.0; h]));
    }
}

/// Install freshly initialized text-encoder parameters (the `text.*` group).
pub fn init_text_params(spec: &TextEncoderSpec, store: &mut ParameterStore, rng: &mut impl Rng) {
    match spec.variant {
        TextVariant::Tfidf1nn => {
            init_dense(store, "text.dense", spec.embed_dim, spec.input_dim, rng);
        }
        TextVariant::WeCnn => {
            let (k, w, e) = (spec.conv_kernels, spec.conv_width, spec.input_dim);
            store.insert(
                "text.conv.k",
                Tensor::new(vec![k, w, e], xavier(rng, w * e, k, k * w * e)).unwrap(),
            );
            store.insert("text.conv.b", Tensor::vector(vec![0.0; k]));
            init_dense(store, "text.dense", spec.embed_dim, k, rng);
        }
        TextVariant::UseGru | TextVariant::WseGru => {
            init_gru(store, "text.gru", spec.input_dim, spec.gru_hidden, rng);
            init_dense(store, "text.dense", spec.embed_dim, spec.gru_hidden, rng);
        }
    }
}

/// Install prediction-network parameters (the `pred.*` group) for a modality.
pub fn init_pred_params(spec: &ModelSpec, store: &mut ParameterStore, rng: &mut impl Rng) {
    let embed = spec.text.as_ref().map(|t| t.embed_dim).unwrap_or(0);
    match spec.modality {
        Modality::TextOnly => {
            init_dense(store, "pred.out", 1, embed, rng);
        }
        Modality::TsOnly => {
            init_gru(store, "pred.gru", spec.ts_input_dim(), spec.pred_hidden, rng);
            init_dense(store, "pred.out", 1, spec.pred_hidden, rng);
        }
        Modality::LateFusion => {
            init_gru(store, "pred.gru", spec.ts_input_dim(), spec.pred_hidden, rng);
            init_dense(store, "pred.out", 1, spec.pred_hidden + embed, rng);
        }
        Modality::EarlyFusion => {
            init_dense(store, "pred.proj", spec.text_proj, embed, rng);
            init_gru(store, "pred.gru", spec.ts_input_dim(), spec.pred_hidden, rng);
            init_dense(store, "pred.out", 1, spec.pred_hidden, rng);
        }
    }
}

fn dense(
    tape: &mut Tape,
    binding: &Binding,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId, NumericError> {
    let w = binding.id(&format!("{prefix}.w"))?;
    let b = binding.id(&format!("{prefix}.b"))?;
    let wx = tape.apply(Op::MatMul, &[w, x])?;
    tape.apply(Op::Add, &[wx, b])
}

/// Standard GRU recursion over a list of per-step input vectors; returns the
/// final hidden state (`h0 = 0`, so an empty sequence yields zeros).
pub fn gru_sequence(
    tape: &mut Tape,
    binding: &Binding,
    prefix: &str,
    steps: &[NodeId],
    hidden: usize,
) -> Result<NodeId, NumericError> {
    let wz = binding.id(&format!("{prefix}.wz"))?;
    let uz = binding.id(&format!("{prefix}.uz"))?;
    let bz = binding.id(&format!("{prefix}.bz"))?;
    let wr = binding.id(&format!("{prefix}.wr"))?;
    let ur = binding.id(&format!("{prefix}.ur"))?;
    let br = binding.id(&format!("{prefix}.br"))?;
    let wh = binding.id(&format!("{prefix}.wh"))?;
    let uh = binding.id(&format!("{prefix}.uh"))?;
    let bh = binding.id(&format!("{prefix}.bh"))?;
    let ones = tape.constant(Tensor::full(&[hidden], 1.0));
    let mut h = tape.constant(Tensor::zeros(&[hidden]));
    for &x in steps {
        let zx = tape.apply(Op::MatMul, &[wz, x])?;
        let zh = tape.apply(Op::MatMul, &[uz, h])?;
        let zs = tape.apply(Op::Add, &[zx, zh])?;
        let zs = tape.apply(Op::Add, &[zs, bz])?;
        let z = tape.apply(Op::Sigmoid, &[zs])?;

        let rx = tape.apply(Op::MatMul, &[wr, x])?;
        let rh = tape.apply(Op::MatMul, &[ur, h])?;
        let rs = tape.apply(Op::Add, &[rx, rh])?;
        let rs = tape.apply(Op::Add, &[rs, br])?;
        let r = tape.apply(Op::Sigmoid, &[rs])?;

        let gated = tape.apply(Op::Mul, &[r, h])?;
        let cx = tape.apply(Op::MatMul, &[wh, x])?;
        let ch = tape.apply(Op::MatMul, &[uh, gated])?;
        let cs = tape.apply(Op::Add, &[cx, ch])?;
        let cs = tape.apply(Op::Add, &[cs, bh])?;
        let cand = tape.apply(Op::Tanh, &[cs])?;

        let neg_z = tape.apply(Op::Scale(-1.0), &[z])?;
        let one_minus_z = tape.apply(Op::Add, &[ones, neg_z])?;
        let keep = tape.apply(Op::Mul, &[one_minus_z, h])?;
        let update = tape.apply(Op::Mul, &[z, cand])?;
        h = tape.apply(Op::Add, &[keep, update])?;
    }
    Ok(h)
}

/// Split a `[rows, cols]` matrix node into per-row vectors.
fn rows_of(tape: &mut Tape, m: NodeId) -> Result<Vec<NodeId>, NumericError> {
    let (rows, cols) = {
        let s = tape.value(m).shape();
        (s[0], s[1])
    };
    (0..rows)
        .map(|i| {
            let r = tape.apply(Op::Slice { axis: 0, start: i, len: 1 }, &[m])?;
            tape.apply(Op::Reshape(vec![cols]), &[r])
        })
        .collect()
}

/// Split a `[rows, cols]` matrix node into per-column vectors.
fn cols_of(tape: &mut Tape, m: NodeId) -> Result<Vec<NodeId>, NumericError> {
    let (rows, cols) = {
        let s = tape.value(m).shape();
        (s[0], s[1])
    };
    (0..cols)
        .map(|k| {
            let c = tape.apply(Op::Slice { axis: 1, start: k, len: 1 }, &[m])?;
            tape.apply(Op::Reshape(vec![rows]), &[c])
        })
        .collect()
}

/// Encode pre-extracted text features into the fixed embedding.
pub fn encode_text(
    tape: &mut Tape,
    binding: &Binding,
    spec: &TextEncoderSpec,
    features: &Tensor,
) -> Result<NodeId, NumericError> {
    match spec.variant {
        TextVariant::Tfidf1nn => {
            if features.rank() != 1 || features.shape()[0] != spec.input_dim {
                return Err(feature_mismatch(spec, features));
            }
            let v = tape.constant(features.clone());
            let lin = dense(tape, binding, "text.dense", v)?;
            tape.apply(Op::Relu, &[lin])
        }
        TextVariant::WeCnn => {
            if features.rank() != 2
                || features.shape()[1] != spec.input_dim
                || features.shape()[0] < spec.conv_width
            {
                return Err(feature_mismatch(spec, features));
            }
            let m = tape.constant(features.clone());
            let k = binding.id("text.conv.k")?;
            let b = binding.id("text.conv.b")?;
            let conv = tape.apply(Op::Conv1d, &[m, k])?;
            let conv = tape.apply(Op::Add, &[conv, b])?;
            let act = tape.apply(Op::Relu, &[conv])?;
            let pooled = tape.apply(Op::MaxPoolTime, &[act])?;
            dense(tape, binding, "text.dense", pooled)
        }
        TextVariant::UseGru | TextVariant::WseGru => {
            if features.rank() != 2 || (features.shape()[0] > 0 && features.shape()[1] != spec.input_dim)
            {
                return Err(feature_mismatch(spec, features));
            }
            let steps = if features.shape()[0] == 0 {
                Vec::new()
            } else {
                let m = tape.constant(features.clone());
                rows_of(tape, m)?
            };
            let h = gru_sequence(tape, binding, "text.gru", &steps, spec.gru_hidden)?;
            dense(tape, binding, "text.dense", h)
        }
    }
}

fn feature_mismatch(spec: &TextEncoderSpec, features: &Tensor) -> NumericError {
    NumericError::Invalid(format!(
        "text features of shape {:?} do not fit variant {:?}",
        features.shape(),
        spec.variant
    ))
}

/// Binary cross entropy with the probability clamped away from 0 and 1.
pub fn bce_loss(tape: &mut Tape, p: NodeId, y: Real) -> Result<NodeId, NumericError> {
    let clamp = Op::Clamp { lo: PROB_CLAMP, hi: 1.0 - PROB_CLAMP };
    let p_safe = tape.apply(clamp.clone(), &[p])?;
    let log_p = tape.apply(Op::Log, &[p_safe])?;
    let neg_p = tape.apply(Op::Scale(-1.0), &[p])?;
    let one_minus_p = tape.apply(Op::AddConst(1.0), &[neg_p])?;
    let q_safe = tape.apply(clamp, &[one_minus_p])?;
    let log_q = tape.apply(Op::Log, &[q_safe])?;
    let term_p = tape.apply(Op::Scale(-y), &[log_p])?;
    let term_q = tape.apply(Op::Scale(-(1.0 - y)), &[log_q])?;
    tape.apply(Op::Add, &[term_p, term_q])
}

fn sigmoid_head(
    tape: &mut Tape,
    binding: &Binding,
    latent: NodeId,
) -> Result<NodeId, NumericError> {
    let lin = dense(tape, binding, "pred.out", latent)?;
    let scalar = tape.apply(Op::Reshape(vec![]), &[lin])?;
    tape.apply(Op::Sigmoid, &[scalar])
}

/// Full forward pass for one record, producing a probability node in (0, 1).
///
/// `text_features` must be present for text-using modalities (the variant's
/// feature tensor); the interpolant block is assembled on the tape for
/// time-series-using modalities.
pub fn forward_prob(
    tape: &mut Tape,
    binding: &Binding,
    spec: &ModelSpec,
    record: &EpisodeRecord,
    text_features: Option<&Tensor>,
) -> Result<NodeId, NumericError> {
    spec.validate()?;
    let embedding = match (&spec.text, spec.modality.uses_text()) {
        (Some(text_spec), true) => {
            let features = text_features.ok_or_else(|| {
                NumericError::Invalid("text features required for this modality".into())
            })?;
            Some(encode_text(tape, binding, text_spec, features)?)
        }
        _ => None,
    };
    match spec.modality {
        Modality::TextOnly => sigmoid_head(tape, binding, embedding.unwrap()),
        Modality::TsOnly => {
            let block = ts_block(tape, binding, spec, record)?;
            let steps = cols_of(tape, block)?;
            let h = gru_sequence(tape, binding, "pred.gru", &steps, spec.pred_hidden)?;
            sigmoid_head(tape, binding, h)
        }
        Modality::LateFusion => {
            let block = ts_block(tape, binding, spec, record)?;
            let steps = cols_of(tape, block)?;
            let h = gru_sequence(tape, binding, "pred.gru", &steps, spec.pred_hidden)?;
            let joint = tape.apply(Op::Concat(0), &[h, embedding.unwrap()])?;
            sigmoid_head(tape, binding, joint)
        }
        Modality::EarlyFusion => {
            let block = ts_block(tape, binding, spec, record)?;
            let proj = dense(tape, binding, "pred.proj", embedding.unwrap())?;
            let cols = cols_of(tape, block)?;
            let steps: Vec<NodeId> = cols
                .into_iter()
                .map(|c| tape.apply(Op::Concat(0), &[c, proj]))
                .collect::<Result<_, _>>()?;
            let h = gru_sequence(tape, binding, "pred.gru", &steps, spec.pred_hidden)?;
            sigmoid_head(tape, binding, h)
        }
    }
}

fn ts_block(
    tape: &mut Tape,
    binding: &Binding,
    spec: &ModelSpec,
    record: &EpisodeRecord,
) -> Result<NodeId, NumericError> {
    let interp = spec.interp.as_ref().unwrap();
    let grid = spec.grid.as_ref().unwrap();
    Ok(assemble_block_on_tape(tape, binding, interp, grid, record)?.block)
}
