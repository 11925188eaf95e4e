//! LSTM encoder-decoder with additive attention.
//!
//! Encoder: single-layer unidirectional LSTM over source embeddings; its
//! hidden states are the annotations and its final `(h, c)` seeds the decoder.
//!
//! Decoder step `t`, given the previous token and state `(h, c)`:
//!
//! ```text
//! e_j   = v · tanh(W_enc a_j + W_dec h)        alignment scores
//! ctx   = Σ_j softmax(e)_j a_j
//! h', c' = LSTM([emb(prev); ctx], (h, c))
//! log p = log_softmax([h'; ctx] W_out + b_out)
//! ```
//!
//! Everything is expressed on a [`Tape`], so the same code serves
//! inference (no gradients) and training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::vocab::{TokenId, BOS, EOS, PAD};

/// Scale of the uniform initialisation range.
pub const INIT_SCALE: f64 = 0.08;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0} sequence is empty")]
    EmptySequence(&'static str),
    #[error("{side} token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange {
        side: &'static str,
        id: TokenId,
        vocab: usize,
    },
    #[error("decoder state has length {got}, expected hidden size {expected}")]
    StateSize { got: usize, expected: usize },
    #[error("parameter {name} has shape {got:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("unknown parameter {0}")]
    UnknownParam(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Sizes from which every parameter shape follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub embed: usize,
    pub hidden: usize,
}

impl ModelDims {
    pub fn new(src_vocab: usize, tgt_vocab: usize, embed: usize, hidden: usize) -> Self {
        ModelDims {
            src_vocab,
            tgt_vocab,
            embed,
            hidden,
        }
    }

    /// Swap source and target vocabularies (for a response-to-query model).
    pub fn reversed(self) -> Self {
        ModelDims {
            src_vocab: self.tgt_vocab,
            tgt_vocab: self.src_vocab,
            ..self
        }
    }
}

/// Parameter slots in serialization order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(usize)]
enum Slot {
    SrcEmbed,
    TgtEmbed,
    EncWi,
    EncWf,
    EncWg,
    EncWo,
    EncBi,
    EncBf,
    EncBg,
    EncBo,
    DecWi,
    DecWf,
    DecWg,
    DecWo,
    DecBi,
    DecBf,
    DecBg,
    DecBo,
    AttEnc,
    AttDec,
    AttV,
    OutW,
    OutB,
}

pub const PARAM_NAMES: [&str; 23] = [
    "src_embed", "tgt_embed", "enc_w_i", "enc_w_f", "enc_w_g", "enc_w_o", "enc_b_i", "enc_b_f", "enc_b_g",
    "enc_b_o", "dec_w_i", "dec_w_f", "dec_w_g", "dec_w_o", "dec_b_i", "dec_b_f", "dec_b_g", "dec_b_o", "att_enc",
    "att_dec", "att_v", "out_w", "out_b",
];

fn param_shape(index: usize, d: &ModelDims) -> [usize; 2] {
    let (e, h) = (d.embed, d.hidden);
    match index {
        0 => [d.src_vocab, e],
        1 => [d.tgt_vocab, e],
        2..=5 => [e + h, h],
        6..=9 | 14..=17 => [1, h],
        10..=13 => [e + 2 * h, h],
        18 | 19 => [h, h],
        20 => [h, 1],
        21 => [2 * h, d.tgt_vocab],
        22 => [1, d.tgt_vocab],
        _ => unreachable!("parameter index {index}"),
    }
}

/// All model weights, stored in [`PARAM_NAMES`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    dims: ModelDims,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        let tensors = (0..PARAM_NAMES.len()).map(|i| Tensor::zeros(&param_shape(i, &dims))).collect();
        ModelParams { dims, tensors }
    }

    /// Uniform initialisation in `[-0.08, 0.08]` from a seeded stream.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = (0..PARAM_NAMES.len())
            .map(|i| Tensor::uniform(&param_shape(i, &dims), INIT_SCALE, &mut rng))
            .collect();
        ModelParams { dims, tensors }
    }

    /// Assemble from named tensors; every name must be present with the
    /// shape implied by `dims`.
    pub fn from_named(dims: ModelDims, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut slots: Vec<Option<Tensor>> = vec![None; PARAM_NAMES.len()];
        for (name, t) in named {
            let idx = PARAM_NAMES
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| ModelError::UnknownParam(name.clone()))?;
            let expected = param_shape(idx, &dims);
            if t.shape() != expected {
                return Err(ModelError::ParamShape {
                    name,
                    got: t.shape().to_vec(),
                    expected: expected.to_vec(),
                });
            }
            slots[idx] = Some(t);
        }
        let tensors = slots
            .into_iter()
            .enumerate()
            .map(|(i, t)| t.ok_or_else(|| ModelError::UnknownParam(format!("missing {}", PARAM_NAMES[i]))))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelParams { dims, tensors })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        PARAM_NAMES.iter().copied().zip(self.tensors.iter())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        PARAM_NAMES.iter().position(|n| *n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        PARAM_NAMES.iter().position(|n| *n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Register every tensor on `tape`. Trainable bindings receive gradients.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { tape.param(t) } else { tape.constant_ref(t) })
            .collect();
        Bound { vars, dims: self.dims }
    }

    fn check_ids(&self, ids: &[TokenId], side: &'static str) -> Result<()> {
        let vocab = if side == "source" { self.dims.src_vocab } else { self.dims.tgt_vocab };
        if ids.is_empty() {
            return Err(ModelError::EmptySequence(side));
        }
        match ids.iter().find(|&&id| id as usize >= vocab) {
            Some(&id) => Err(ModelError::TokenOutOfRange { side, id, vocab }),
            None => Ok(()),
        }
    }
}

/// Parameters registered on a tape.
pub struct Bound {
    vars: Vec<Var>,
    dims: ModelDims,
}

impl Bound {
    /// Wrap vars registered in [`PARAM_NAMES`] order, e.g. by a gradient
    /// checker.
    pub fn from_vars(vars: Vec<Var>, dims: ModelDims) -> Self {
        assert_eq!(vars.len(), PARAM_NAMES.len(), "expected one var per parameter");
        Bound { vars, dims }
    }

    fn get(&self, slot: Slot) -> Var {
        self.vars[slot as usize]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }
}

/// Encoder output on a tape.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    /// `[n, H]`, one row per source token.
    pub annotations: Var,
    /// `annotations · W_enc`, cached for attention.
    pub keys: Var,
    pub h: Var,
    pub c: Var,
}

struct LstmSlots {
    w: [Slot; 4],
    b: [Slot; 4],
}

const ENC: LstmSlots = LstmSlots {
    w: [Slot::EncWi, Slot::EncWf, Slot::EncWg, Slot::EncWo],
    b: [Slot::EncBi, Slot::EncBf, Slot::EncBg, Slot::EncBo],
};
const DEC: LstmSlots = LstmSlots {
    w: [Slot::DecWi, Slot::DecWf, Slot::DecWg, Slot::DecWo],
    b: [Slot::DecBi, Slot::DecBf, Slot::DecBg, Slot::DecBo],
};

fn lstm_cell(tape: &mut Tape<'_>, p: &Bound, slots: &LstmSlots, input: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let xh = tape.concat(&[input, h], 1)?;
    let mut gates = [xh; 4];
    for (k, gate) in gates.iter_mut().enumerate() {
        let lin = tape.matmul(xh, p.get(slots.w[k]))?;
        let pre = tape.add(lin, p.get(slots.b[k]))?;
        *gate = if k == 2 { tape.tanh(pre)? } else { tape.sigmoid(pre)? };
    }
    let [i, f, g, o] = gates;
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_new = tape.add(keep, write)?;
    let squashed = tape.tanh(c_new)?;
    let h_new = tape.mul(o, squashed)?;
    Ok((h_new, c_new))
}

pub fn encode_on(tape: &mut Tape<'_>, p: &Bound, x: &[TokenId]) -> Result<EncodedVars> {
    let hsize = p.dims.hidden;
    let mut h = tape.constant(Tensor::zeros(&[1, hsize]));
    let mut c = tape.constant(Tensor::zeros(&[1, hsize]));
    let mut rows = Vec::with_capacity(x.len());
    for &tok in x {
        let emb = tape.embed_lookup(p.get(Slot::SrcEmbed), &[tok as usize])?;
        (h, c) = lstm_cell(tape, p, &ENC, emb, h, c)?;
        rows.push(h);
    }
    let annotations = tape.concat(&rows, 0)?;
    let keys = tape.matmul(annotations, p.get(Slot::AttEnc))?;
    Ok(EncodedVars { annotations, keys, h, c })
}

/// Attention over `annotations` (with precomputed `keys`) given decoder
/// hidden state `h`. Returns `(context [1,H], weights [1,n])`.
pub fn attend_on(tape: &mut Tape<'_>, p: &Bound, annotations: Var, keys: Var, h: Var) -> Result<(Var, Var)> {
    let query = tape.matmul(h, p.get(Slot::AttDec))?;
    let pre = tape.add(keys, query)?;
    let act = tape.tanh(pre)?;
    let scores = tape.matmul(act, p.get(Slot::AttV))?;
    let scores = tape.transpose(scores)?;
    let weights = tape.softmax(scores)?;
    let context = tape.matmul(weights, annotations)?;
    Ok((context, weights))
}

/// Decoder recurrence for one step. Returns the new `(h, c)` and the output
/// feature row `[h'; ctx]` fed to the projection.
fn decoder_cell_on(tape: &mut Tape<'_>, p: &Bound, prev: TokenId, h: Var, c: Var, context: Var) -> Result<(Var, Var, Var)> {
    let emb = tape.embed_lookup(p.get(Slot::TgtEmbed), &[prev as usize])?;
    let input = tape.concat(&[emb, context], 1)?;
    let (h_new, c_new) = lstm_cell(tape, p, &DEC, input, h, c)?;
    let feature = tape.concat(&[h_new, context], 1)?;
    Ok((h_new, c_new, feature))
}

fn project_on(tape: &mut Tape<'_>, p: &Bound, features: Var) -> Result<Var> {
    let logits = tape.matmul(features, p.get(Slot::OutW))?;
    let logits = tape.add(logits, p.get(Slot::OutB))?;
    Ok(tape.log_softmax(logits)?)
}

/// Gold tokens scored under teacher forcing: `y` with EOS appended unless
/// it already ends in EOS.
pub fn scored_tokens(y: &[TokenId]) -> Vec<TokenId> {
    let mut out = y.to_vec();
    if out.last() != Some(&EOS) {
        out.push(EOS);
    }
    out
}

/// Teacher-forced decode. Returns the `[T, V]` log-probability matrix, one
/// row per scored token.
pub fn teacher_forced_on(tape: &mut Tape<'_>, p: &Bound, enc: &EncodedVars, scored: &[TokenId]) -> Result<Var> {
    let (mut h, mut c) = (enc.h, enc.c);
    let mut prev = BOS;
    let mut features = Vec::with_capacity(scored.len());
    for &gold in scored {
        let (context, _) = attend_on(tape, p, enc.annotations, enc.keys, h)?;
        let (h2, c2, feat) = decoder_cell_on(tape, p, prev, h, c, context)?;
        (h, c) = (h2, c2);
        features.push(feat);
        prev = gold;
    }
    let stacked = tape.concat(&features, 0)?;
    project_on(tape, p, stacked)
}

/// `log p(y|x)` as a `[1]` node.
pub fn sequence_log_prob_on(tape: &mut Tape<'_>, p: &Bound, enc: &EncodedVars, y: &[TokenId]) -> Result<Var> {
    let scored = scored_tokens(y);
    let logp = teacher_forced_on(tape, p, enc, &scored)?;
    let idx: Vec<usize> = scored.iter().map(|&t| t as usize).collect();
    let gold = tape.pick(logp, &idx)?;
    Ok(tape.sum(gold)?)
}

/// LSTM hidden and cell vectors between decode steps.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
    pub step: usize,
}

impl DecoderState {
    fn check(&self, hidden: usize) -> Result<()> {
        for v in [&self.h, &self.c] {
            if v.len() != hidden {
                return Err(ModelError::StateSize {
                    got: v.len(),
                    expected: hidden,
                });
            }
        }
        Ok(())
    }
}

/// Encoder output detached from any tape.
#[derive(Clone, Debug)]
pub struct Encoding {
    /// `[n, H]`.
    pub annotations: Tensor,
    keys: Tensor,
    pub initial_state: DecoderState,
}

impl Encoding {
    pub fn len(&self) -> usize {
        self.annotations.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Attention result for one decoder state.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub context: Vec<f64>,
    pub weights: Vec<f64>,
}

pub fn encode(params: &ModelParams, x: &[TokenId]) -> Result<Encoding> {
    params.check_ids(x, "source")?;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let enc = encode_on(&mut tape, &p, x)?;
    Ok(Encoding {
        annotations: tape.value(enc.annotations),
        keys: tape.value(enc.keys),
        initial_state: DecoderState {
            h: tape.values(enc.h).to_vec(),
            c: tape.values(enc.c).to_vec(),
            step: 0,
        },
    })
}

/// Attention context for an arbitrary `[n, H]` annotation matrix.
pub fn attention_context(params: &ModelParams, state: &DecoderState, annotations: &Tensor) -> Result<Attention> {
    state.check(params.dims.hidden)?;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let ann = tape.constant_ref(annotations);
    let keys = tape.matmul(ann, p.get(Slot::AttEnc))?;
    attention_detached(&mut tape, &p, ann, keys, state)
}

/// Attention using the keys cached in `enc`.
pub fn attend(params: &ModelParams, state: &DecoderState, enc: &Encoding) -> Result<Attention> {
    state.check(params.dims.hidden)?;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let ann = tape.constant_ref(&enc.annotations);
    let keys = tape.constant_ref(&enc.keys);
    attention_detached(&mut tape, &p, ann, keys, state)
}

fn attention_detached(tape: &mut Tape<'_>, p: &Bound, ann: Var, keys: Var, state: &DecoderState) -> Result<Attention> {
    let h = tape.constant(Tensor::row(state.h.clone()));
    let (context, weights) = attend_on(tape, p, ann, keys, h)?;
    Ok(Attention {
        context: tape.values(context).to_vec(),
        weights: tape.values(weights).to_vec(),
    })
}

/// One decoder step. Returns log-probabilities over the target vocabulary
/// and the next state.
pub fn decode_step(params: &ModelParams, prev: TokenId, state: &DecoderState, context: &[f64]) -> Result<(Vec<f64>, DecoderState)> {
    if prev as usize >= params.dims.tgt_vocab {
        return Err(ModelError::TokenOutOfRange {
            side: "target",
            id: prev,
            vocab: params.dims.tgt_vocab,
        });
    }
    state.check(params.dims.hidden)?;
    if context.len() != params.dims.hidden {
        return Err(ModelError::StateSize {
            got: context.len(),
            expected: params.dims.hidden,
        });
    }
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let h = tape.constant(Tensor::row(state.h.clone()));
    let c = tape.constant(Tensor::row(state.c.clone()));
    let ctx = tape.constant(Tensor::row(context.to_vec()));
    let (h2, c2, feature) = decoder_cell_on(&mut tape, &p, prev, h, c, ctx)?;
    let logp = project_on(&mut tape, &p, feature)?;
    Ok((
        tape.values(logp).to_vec(),
        DecoderState {
            h: tape.values(h2).to_vec(),
            c: tape.values(c2).to_vec(),
            step: state.step + 1,
        },
    ))
}

/// Teacher-forced `log p(y|x)`, scoring EOS. Always `<= 0`.
pub fn sequence_log_prob(params: &ModelParams, x: &[TokenId], y: &[TokenId]) -> Result<f64> {
    params.check_ids(x, "source")?;
    params.check_ids(y, "target")?;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let enc = encode_on(&mut tape, &p, x)?;
    let lp = sequence_log_prob_on(&mut tape, &p, &enc, y)?;
    Ok(tape.item(lp))
}

/// Teacher-forced log-probability rows, one per scored token of `y`.
pub fn teacher_forced_log_probs(params: &ModelParams, x: &[TokenId], y: &[TokenId]) -> Result<Vec<Vec<f64>>> {
    params.check_ids(x, "source")?;
    params.check_ids(y, "target")?;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let enc = encode_on(&mut tape, &p, x)?;
    let scored = scored_tokens(y);
    let logp = teacher_forced_on(&mut tape, &p, &enc, &scored)?;
    let v = params.dims.tgt_vocab;
    Ok(tape.values(logp).chunks(v).map(<[f64]>::to_vec).collect())
}

/// Query/response pairs padded to the longest sequence on each side.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    pub src: Vec<Vec<TokenId>>,
    pub tgt: Vec<Vec<TokenId>>,
    pub src_lens: Vec<usize>,
    pub tgt_lens: Vec<usize>,
}

impl PaddedBatch {
    /// Targets are stored with EOS appended before padding.
    pub fn new(pairs: &[(Vec<TokenId>, Vec<TokenId>)]) -> Self {
        let targets: Vec<Vec<TokenId>> = pairs.iter().map(|(_, y)| scored_tokens(y)).collect();
        let src_max = pairs.iter().map(|(x, _)| x.len()).max().unwrap_or(0);
        let tgt_max = targets.iter().map(Vec::len).max().unwrap_or(0);
        let pad = |s: &[TokenId], n: usize| {
            let mut v = s.to_vec();
            v.resize(n, PAD);
            v
        };
        PaddedBatch {
            src: pairs.iter().map(|(x, _)| pad(x, src_max)).collect(),
            tgt: targets.iter().map(|y| pad(y, tgt_max)).collect(),
            src_lens: pairs.iter().map(|(x, _)| x.len()).collect(),
            tgt_lens: targets.iter().map(Vec::len).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// Per-row `log p(y|x)` for a padded batch. Positions at or beyond each
/// row's length are masked out of both the recurrence and the score.
pub fn batch_log_probs(params: &ModelParams, batch: &PaddedBatch) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(batch.len());
    for r in 0..batch.len() {
        let x = &batch.src[r][..batch.src_lens[r]];
        let y = &batch.tgt[r][..batch.tgt_lens[r]];
        out.push(sequence_log_prob(params, x, y)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ModelDims {
        ModelDims::new(12, 10, 6, 5)
    }

    #[test]
    fn shapes_follow_dims() {
        let p = ModelParams::init(ModelDims::new(7, 9, 3, 4), 1);
        assert_eq!(p.get("src_embed").unwrap().shape(), &[7, 3]);
        assert_eq!(p.get("dec_w_g").unwrap().shape(), &[3 + 8, 4]);
        assert_eq!(p.get("out_w").unwrap().shape(), &[8, 9]);
        assert_eq!(p.get("att_v").unwrap().shape(), &[4, 1]);
        assert!(p.tensors().iter().flat_map(|t| t.values()).all(|v| v.abs() <= INIT_SCALE));
    }

    #[test]
    fn encode_gives_one_annotation_per_token() {
        let p = ModelParams::init(dims(), 2);
        let enc = encode(&p, &[4, 5, 6, 7, 8]).unwrap();
        assert_eq!(enc.annotations.shape(), &[5, 5]);
    }

    #[test]
    fn zero_params_give_equal_annotations() {
        let p = ModelParams::zeros(dims());
        let enc = encode(&p, &[4, 5, 6]).unwrap();
        let a = &enc.annotations;
        for r in 1..3 {
            for c in 0..5 {
                assert_eq!(a.at(r, c), a.at(0, c));
            }
        }
    }

    #[test]
    fn encode_rejects_bad_input() {
        let p = ModelParams::init(dims(), 2);
        assert_eq!(encode(&p, &[]).unwrap_err(), ModelError::EmptySequence("source"));
        assert!(matches!(encode(&p, &[4, 12]), Err(ModelError::TokenOutOfRange { id: 12, .. })));
    }

    #[test]
    fn encode_is_deterministic() {
        let p = ModelParams::init(dims(), 9);
        let a = encode(&p, &[4, 9, 5]).unwrap();
        let b = encode(&ModelParams::init(dims(), 9), &[4, 9, 5]).unwrap();
        let bits = |t: &Tensor| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.annotations), bits(&b.annotations));
    }

    #[test]
    fn single_annotation_gets_full_weight() {
        let p = ModelParams::init(dims(), 3);
        let enc = encode(&p, &[6]).unwrap();
        let att = attention_context(&p, &enc.initial_state, &enc.annotations).unwrap();
        assert_eq!(att.weights, vec![1.0]);
        for (c, a) in att.context.iter().zip(enc.annotations.values()) {
            assert!((c - a).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_annotations_get_uniform_weights() {
        let p = ModelParams::init(dims(), 3);
        let row = vec![0.1, -0.2, 0.3, 0.0, 0.05];
        let ann = Tensor::new(vec![3, 5], [row.clone(), row.clone(), row].concat()).unwrap();
        let state = DecoderState {
            h: vec![0.2; 5],
            c: vec![0.0; 5],
            step: 0,
        };
        let att = attention_context(&p, &state, &ann).unwrap();
        for w in att.weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_built_alignment_scores() {
        // W_dec = 0, W_enc = I, v = [2, 0, ...]: score_j = 2 tanh(a_j[0]).
        // a_1[0] = 0 gives score 0; a_2[0] = atanh(ln 3 / 2) gives score ln 3.
        let mut p = ModelParams::zeros(dims());
        *p.get_mut("att_enc").unwrap() = Tensor::identity(5);
        p.get_mut("att_v").unwrap().set(0, 0, 2.0);
        let u = (3f64.ln() / 2.0).atanh();
        let mut ann = Tensor::zeros(&[2, 5]);
        ann.set(1, 0, u);
        ann.set(1, 1, 1.0);
        let state = DecoderState {
            h: vec![0.3; 5],
            c: vec![0.0; 5],
            step: 0,
        };
        let att = attention_context(&p, &state, &ann).unwrap();
        assert!((att.weights[0] - 0.25).abs() < 1e-12, "{:?}", att.weights);
        assert!((att.weights[1] - 0.75).abs() < 1e-12);
        assert!((att.context[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn decode_step_normalises() {
        let p = ModelParams::init(dims(), 4);
        let enc = encode(&p, &[4, 5]).unwrap();
        let att = attend(&p, &enc.initial_state, &enc).unwrap();
        let (logp, next) = decode_step(&p, BOS, &enc.initial_state, &att.context).unwrap();
        let total: f64 = logp.iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert_eq!(next.step, 1);
        let (again, _) = decode_step(&p, BOS, &enc.initial_state, &att.context).unwrap();
        assert_eq!(logp, again);
    }

    #[test]
    fn zero_projection_is_uniform() {
        let mut p = ModelParams::init(dims(), 4);
        p.get_mut("out_w").unwrap().fill(0.0);
        p.get_mut("out_b").unwrap().fill(0.0);
        let enc = encode(&p, &[4]).unwrap();
        let att = attend(&p, &enc.initial_state, &enc).unwrap();
        let (logp, _) = decode_step(&p, BOS, &enc.initial_state, &att.context).unwrap();
        for l in logp {
            assert!((l + 10f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_step_rejects_invalid_token() {
        let p = ModelParams::init(dims(), 4);
        let enc = encode(&p, &[4]).unwrap();
        let att = attend(&p, &enc.initial_state, &enc).unwrap();
        assert!(matches!(
            decode_step(&p, 10, &enc.initial_state, &att.context),
            Err(ModelError::TokenOutOfRange { id: 10, .. })
        ));
    }

    #[test]
    fn uniform_model_sequence_log_prob() {
        let mut p = ModelParams::init(dims(), 4);
        p.get_mut("out_w").unwrap().fill(0.0);
        p.get_mut("out_b").unwrap().fill(0.0);
        let lp = sequence_log_prob(&p, &[4, 5], &[6, 7]).unwrap();
        assert!((lp - 3.0 * 0.1f64.ln()).abs() < 1e-12);
        assert!((lp - -6.9078).abs() < 1e-4);
    }

    #[test]
    fn eos_is_not_appended_twice() {
        let p = ModelParams::init(dims(), 4);
        let a = sequence_log_prob(&p, &[4], &[6, 7]).unwrap();
        let b = sequence_log_prob(&p, &[4], &[6, 7, EOS]).unwrap();
        assert_eq!(a, b);
        assert_eq!(sequence_log_prob(&p, &[4], &[]).unwrap_err(), ModelError::EmptySequence("target"));
    }

    #[test]
    fn sequence_log_prob_matches_stepwise_product() {
        let p = ModelParams::init(dims(), 21);
        let (x, y) = ([4u32, 8, 5], [6u32, 9, 4, 7]);
        let lp = sequence_log_prob(&p, &x, &y).unwrap();
        assert!(lp <= 0.0);

        // Independent route: detached encode / attend / decode_step calls,
        // multiplying probabilities rather than summing logs.
        let enc = encode(&p, &x).unwrap();
        let mut state = enc.initial_state.clone();
        let mut prev = BOS;
        let mut prob = 1.0;
        for &gold in y.iter().chain(std::iter::once(&EOS)) {
            let att = attention_context(&p, &state, &enc.annotations).unwrap();
            let (logp, next) = decode_step(&p, prev, &state, &att.context).unwrap();
            prob *= logp[gold as usize].exp();
            state = next;
            prev = gold;
        }
        assert!((lp - prob.ln()).abs() < 1e-10, "{lp} vs {}", prob.ln());
    }

    #[test]
    fn padded_batch_matches_unpadded() {
        let p = ModelParams::init(dims(), 8);
        let pairs = vec![
            (vec![4, 5, 6, 7, 8], vec![9, 4]),
            (vec![5], vec![6, 7, 8, 9, 4, 5]),
            (vec![7, 7], vec![EOS]),
        ];
        let batch = PaddedBatch::new(&pairs);
        assert!(batch.src.iter().all(|s| s.len() == 5));
        assert!(batch.tgt.iter().all(|s| s.len() == 7));
        let padded = batch_log_probs(&p, &batch).unwrap();
        for ((x, y), lp) in pairs.iter().zip(padded) {
            let single = sequence_log_prob(&p, x, y).unwrap();
            assert!((single - lp).abs() < 1e-10);
        }
    }
}
