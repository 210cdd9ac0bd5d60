//! Drives cells across time and layers to turn a token sequence into a
//! fixed-length sentence vector.
//!
//! Layer 1 always runs the plain LSTM over the embedded inputs from zero
//! initial states. Layers above it run the configured cell kind: plain
//! stacking feeds only the lower hidden state upward, while the CAS and
//! peephole cells consume the lower layer's full state pair
//! (`below = (h_t^{l-1}, c_t^{l-1})`, `left = (h_{t-1}^l, c_{t-1}^l)`).
//!
//! A bidirectional encoder runs a second, independently parameterized
//! stack over the reversed sequence; the two top-layer sequences are
//! concatenated per timestep before pooling, giving a `2d` sentence vector.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::cell::{
    cas_backward, cas_forward, lstm_backward, lstm_forward, peephole_backward, peephole_forward,
    CasParams, GateSet, LambdaSpec, LayerGrads, LayerParams, LstmParams, PeepholeParams,
    StateGrad, StatePair,
};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{uniform_init, Scalar, Shape, Tensor};

/// Which cell runs in layers above the first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    PlainStacked,
    Cas,
    Peephole,
}

/// How the hidden sequence collapses to a sentence vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Max,
    Mean,
    Last,
}

/// Mixing-vector configuration applied to every CAS layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LambdaKind {
    Constant(f64),
    Trainable,
    NoneSum,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    /// Input (embedding) dimension `d_0`.
    pub input_dim: usize,
    /// State dimension, uniform across layers as the cell-aware fusion
    /// requires.
    pub dim: usize,
    pub cell: CellKind,
    pub bidirectional: bool,
    pub pooling: Pooling,
    pub lambda: LambdaKind,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::InvalidConfig(
                "encoder needs at least one layer".into(),
            ));
        }
        if self.dim == 0 || self.input_dim == 0 {
            return Err(Error::InvalidConfig(
                "encoder dims must be positive".into(),
            ));
        }
        if let LambdaKind::Constant(v) = self.lambda {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!(
                    "lambda must lie in [0, 1], got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Dimension of the pooled sentence vector.
    pub fn sentence_dim(&self) -> usize {
        if self.bidirectional {
            2 * self.dim
        } else {
            self.dim
        }
    }
}

/// Parameters for one encoder direction: one layer per stack level, the
/// first always a plain LSTM.
#[derive(Clone, Debug)]
pub struct EncoderParams<T> {
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Scalar> EncoderParams<T> {
    pub fn init(config: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let dim = config.dim;
        let mut layers = Vec::with_capacity(config.num_layers);
        layers.push(LayerParams::Plain(LstmParams::init(
            config.input_dim,
            dim,
            rng,
        )));
        for _ in 1..config.num_layers {
            layers.push(match config.cell {
                CellKind::PlainStacked => LayerParams::Plain(LstmParams::init(dim, dim, rng)),
                CellKind::Cas => {
                    let lambda = match config.lambda {
                        LambdaKind::Constant(v) => LambdaSpec::constant(v, dim)?,
                        LambdaKind::Trainable => LambdaSpec::trainable(dim),
                        LambdaKind::NoneSum => LambdaSpec::NoneSum,
                    };
                    LayerParams::Cas(CasParams::init(dim, lambda, rng))
                }
                CellKind::Peephole => LayerParams::Peephole(PeepholeParams::init(dim, rng)),
            });
        }
        Ok(EncoderParams { layers })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn dim(&self) -> usize {
        self.layers[0].dim()
    }

    pub fn zeros_grads(&self) -> Vec<LayerGrads<T>> {
        self.layers.iter().map(|l| l.zeros_grads()).collect()
    }

    /// Total number of scalar parameters; trainable mixing vectors are
    /// counted only when `include_lambda` is set.
    pub fn num_scalars(&self, include_lambda: bool) -> u64 {
        let mut total = 0u64;
        for layer in &self.layers {
            match layer {
                LayerParams::Plain(p) => {
                    for (_, t) in p.entries() {
                        total += t.len() as u64;
                    }
                }
                LayerParams::Cas(p) => {
                    for (_, t) in p.base.entries() {
                        total += t.len() as u64;
                    }
                    total += (p.w_g.len() + p.u_g.len() + p.b_g.len()) as u64;
                    if include_lambda {
                        if let LambdaSpec::Trainable(u) = &p.lambda {
                            total += u.len() as u64;
                        }
                    }
                }
                LayerParams::Peephole(p) => {
                    for (_, t) in p.base.entries() {
                        total += t.len() as u64;
                    }
                    total += (p.w_g.len() + p.b_g.len() + p.p_g1.len() + p.p_g2.len()) as u64;
                }
            }
        }
        total
    }

    fn check_runnable(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Empty("encoder layer stack"));
        }
        if !matches!(self.layers[0], LayerParams::Plain(_)) {
            return Err(Error::InvalidConfig(
                "the bottom layer has no lower cell state and must be a plain LSTM".into(),
            ));
        }
        Ok(())
    }
}

/// Word representation lookup table, one row per vocabulary entry.
#[derive(Clone, Debug)]
pub struct EmbeddingTable<T> {
    pub table: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> EmbeddingTable<T> {
    pub fn init(vocab_size: usize, dim: usize, trainable: bool, rng: &mut Rng) -> Result<Self> {
        Ok(EmbeddingTable {
            table: uniform_init(rng, Shape::Matrix(vocab_size, dim), 0.1)?,
            trainable,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.table.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }
}

/// Projects token indices to their word representations, one row per token.
pub fn embed<T: Scalar>(tokens: &[usize], table: &EmbeddingTable<T>) -> Result<Tensor<T>> {
    if tokens.is_empty() {
        return Err(Error::Empty("token sequence"));
    }
    let rows: Vec<Tensor<T>> = tokens
        .iter()
        .map(|&t| {
            if t >= table.vocab_size() {
                Err(Error::IndexOutOfRange {
                    what: "token",
                    index: t,
                    bound: table.vocab_size(),
                })
            } else {
                Ok(table.table.row_vector(t))
            }
        })
        .collect::<Result<_>>()?;
    Tensor::from_rows(&rows)
}

/// Everything a forward pass caches for the matching backward pass and for
/// gate analysis: per-layer, per-timestep states and gate activations.
#[derive(Clone, Debug)]
pub struct EncodeTrace<T> {
    pub states: Vec<Vec<StatePair<T>>>,
    pub gates: Vec<Vec<GateSet<T>>>,
}

/// Runs one encoder direction over a `T x d_0` input, returning the
/// top-layer hidden states as a `T x d` matrix plus the full trace.
pub fn encode<T: Scalar>(
    x: &Tensor<T>,
    params: &EncoderParams<T>,
) -> Result<(Tensor<T>, EncodeTrace<T>)> {
    params.check_runnable()?;
    let t_len = x.rows();
    if t_len == 0 {
        return Err(Error::Empty("input sequence"));
    }
    let num_layers = params.layers.len();
    let mut states: Vec<Vec<StatePair<T>>> = Vec::with_capacity(num_layers);
    let mut gates: Vec<Vec<GateSet<T>>> = Vec::with_capacity(num_layers);

    for (l, layer) in params.layers.iter().enumerate() {
        let dim = layer.dim();
        let mut layer_states: Vec<StatePair<T>> = Vec::with_capacity(t_len);
        let mut layer_gates: Vec<GateSet<T>> = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let left = if t == 0 {
                StatePair::zeros(dim)
            } else {
                layer_states[t - 1].clone()
            };
            let (state, gate) = match layer {
                LayerParams::Plain(p) => {
                    let input = if l == 0 {
                        x.row_vector(t)
                    } else {
                        states[l - 1][t].h.clone()
                    };
                    lstm_forward(&input, &left, p)?
                }
                LayerParams::Cas(p) => cas_forward(&states[l - 1][t], &left, p)?,
                LayerParams::Peephole(p) => peephole_forward(&states[l - 1][t], &left, p)?,
            };
            layer_states.push(state);
            layer_gates.push(gate);
        }
        states.push(layer_states);
        gates.push(layer_gates);
    }

    let top: Vec<Tensor<T>> = states[num_layers - 1].iter().map(|s| s.h.clone()).collect();
    let hidden = Tensor::from_rows(&top)?;
    Ok((hidden, EncodeTrace { states, gates }))
}

/// Reverse-mode pass through [`encode`]: given `d_hidden` (gradients on the
/// top-layer hidden states, `T x d`), returns per-layer parameter gradients
/// and the gradient with respect to the input rows.
pub fn encode_backward<T: Scalar>(
    x: &Tensor<T>,
    params: &EncoderParams<T>,
    trace: &EncodeTrace<T>,
    d_hidden: &Tensor<T>,
) -> Result<(Vec<LayerGrads<T>>, Tensor<T>)> {
    params.check_runnable()?;
    let t_len = x.rows();
    let num_layers = params.layers.len();
    let mut grads = params.zeros_grads();
    let mut d_states: Vec<Vec<StateGrad<T>>> = params
        .layers
        .iter()
        .map(|l| (0..t_len).map(|_| StateGrad::zeros(l.dim())).collect())
        .collect();
    let mut d_x = Tensor::zeros_matrix(t_len, x.cols());

    for t in 0..t_len {
        d_states[num_layers - 1][t]
            .dh
            .add_assign(&d_hidden.row_vector(t));
    }

    for t in (0..t_len).rev() {
        for l in (0..num_layers).rev() {
            let dim = params.layers[l].dim();
            let left = if t == 0 {
                StatePair::zeros(dim)
            } else {
                trace.states[l][t - 1].clone()
            };
            let state = &trace.states[l][t];
            let gate = &trace.gates[l][t];
            let (dh, dc) = (d_states[l][t].dh.clone(), d_states[l][t].dc.clone());
            match &params.layers[l] {
                LayerParams::Plain(p) => {
                    let input = if l == 0 {
                        x.row_vector(t)
                    } else {
                        trace.states[l - 1][t].h.clone()
                    };
                    let (g, d_input, d_left) =
                        lstm_backward(&input, &left, p, state, gate, &dh, &dc)?;
                    match &mut grads[l] {
                        LayerGrads::Plain(acc) => acc.add_assign(&g),
                        _ => unreachable!("layer kind is fixed"),
                    }
                    if l == 0 {
                        for (o, v) in d_x.row_mut(t).iter_mut().zip(d_input.data()) {
                            *o = *o + *v;
                        }
                    } else {
                        d_states[l - 1][t].dh.add_assign(&d_input);
                    }
                    if t > 0 {
                        d_states[l][t - 1].add_assign(&d_left);
                    }
                }
                LayerParams::Cas(p) => {
                    let below = &trace.states[l - 1][t];
                    let (g, d_below, d_left) =
                        cas_backward(below, &left, p, state, gate, &dh, &dc)?;
                    match &mut grads[l] {
                        LayerGrads::Cas(acc) => acc.add_assign(&g),
                        _ => unreachable!("layer kind is fixed"),
                    }
                    d_states[l - 1][t].add_assign(&d_below);
                    if t > 0 {
                        d_states[l][t - 1].add_assign(&d_left);
                    }
                }
                LayerParams::Peephole(p) => {
                    let below = &trace.states[l - 1][t];
                    let (g, d_below, d_left) =
                        peephole_backward(below, &left, p, state, gate, &dh, &dc)?;
                    match &mut grads[l] {
                        LayerGrads::Peephole(acc) => acc.add_assign(&g),
                        _ => unreachable!("layer kind is fixed"),
                    }
                    d_states[l - 1][t].add_assign(&d_below);
                    if t > 0 {
                        d_states[l][t - 1].add_assign(&d_left);
                    }
                }
            }
        }
    }
    Ok((grads, d_x))
}

/// Top-layer hidden states of one or both reading directions, with the
/// traces needed for backward passes and gate analysis. Backward-direction
/// rows are re-aligned so row `t` always corresponds to input position `t`.
#[derive(Clone, Debug)]
pub struct HiddenSequence<T> {
    pub forward: Tensor<T>,
    pub backward: Option<Tensor<T>>,
    pub trace: EncodeTrace<T>,
    pub trace_backward: Option<EncodeTrace<T>>,
}

impl<T: Scalar> HiddenSequence<T> {
    /// Per-timestep rows fed to pooling: `h_t` or `h_t (+) hhat_t`.
    pub fn rows(&self) -> Tensor<T> {
        match &self.backward {
            Some(b) => concat_rows(&self.forward, b),
            None => self.forward.clone(),
        }
    }
}

/// Runs the forward direction and, when `bwd` params are given, the
/// reversed direction as well.
pub fn encode_sequence<T: Scalar>(
    x: &Tensor<T>,
    fwd: &EncoderParams<T>,
    bwd: Option<&EncoderParams<T>>,
) -> Result<HiddenSequence<T>> {
    let (forward, trace) = encode(x, fwd)?;
    let (backward, trace_backward) = match bwd {
        Some(params) => {
            let (h_rev, t_rev) = encode(&reverse_rows(x), params)?;
            (Some(reverse_rows(&h_rev)), Some(t_rev))
        }
        None => (None, None),
    };
    Ok(HiddenSequence {
        forward,
        backward,
        trace,
        trace_backward,
    })
}

/// Matrix with row order flipped (time reversal).
pub fn reverse_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let rows: Vec<Tensor<T>> = (0..x.rows()).rev().map(|r| x.row_vector(r)).collect();
    Tensor::from_rows(&rows).expect("row set nonempty")
}

/// Per-timestep concatenation of two row matrices.
pub fn concat_rows<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.rows(), b.rows(), "concat_rows length mismatch");
    let mut data = Vec::with_capacity(a.len() + b.len());
    for r in 0..a.rows() {
        data.extend_from_slice(a.row(r));
        data.extend_from_slice(b.row(r));
    }
    Tensor::matrix(a.rows(), a.cols() + b.cols(), data).expect("concat dims consistent")
}

/// Splits each row at column `left`, undoing [`concat_rows`].
pub fn split_cols<T: Scalar>(m: &Tensor<T>, left: usize) -> (Tensor<T>, Tensor<T>) {
    assert!(left <= m.cols(), "split point beyond row width");
    let right = m.cols() - left;
    let mut a = Vec::with_capacity(m.rows() * left);
    let mut b = Vec::with_capacity(m.rows() * right);
    for r in 0..m.rows() {
        let row = m.row(r);
        a.extend_from_slice(&row[..left]);
        b.extend_from_slice(&row[left..]);
    }
    (
        Tensor::matrix(m.rows(), left, a).expect("split dims consistent"),
        Tensor::matrix(m.rows(), right, b).expect("split dims consistent"),
    )
}

/// Record of which input rows produced the pooled vector.
#[derive(Clone, Debug)]
pub enum PoolTrace {
    /// Per-dimension index of the selected row.
    Max(Vec<usize>),
    /// Indices of the rows that were averaged.
    Mean(Vec<usize>),
    Last(usize),
}

/// Collapses valid rows of `h` to a single vector. The mask flags which
/// rows participate; padded positions never influence the result.
pub fn pool<T: Scalar>(h: &Tensor<T>, method: Pooling, mask: &[bool]) -> Result<Tensor<T>> {
    Ok(pool_traced(h, method, mask)?.0)
}

pub fn pool_traced<T: Scalar>(
    h: &Tensor<T>,
    method: Pooling,
    mask: &[bool],
) -> Result<(Tensor<T>, PoolTrace)> {
    if mask.len() != h.rows() {
        return Err(Error::ShapeMismatch {
            op: "pool mask",
            lhs: Shape::Matrix(h.rows(), h.cols()),
            rhs: Shape::Vector(mask.len()),
        });
    }
    let valid: Vec<usize> = (0..h.rows()).filter(|&r| mask[r]).collect();
    if valid.is_empty() {
        return Err(Error::Empty("pooling mask (all positions masked)"));
    }
    let d = h.cols();
    match method {
        Pooling::Max => {
            let mut out = h.row(valid[0]).to_vec();
            let mut arg = vec![valid[0]; d];
            for &r in &valid[1..] {
                for (j, &v) in h.row(r).iter().enumerate() {
                    if v > out[j] {
                        out[j] = v;
                        arg[j] = r;
                    }
                }
            }
            Ok((Tensor::vector(out), PoolTrace::Max(arg)))
        }
        Pooling::Mean => {
            let mut out = vec![T::zero(); d];
            for &r in &valid {
                for (o, &v) in out.iter_mut().zip(h.row(r)) {
                    *o = *o + v;
                }
            }
            let n = T::from_usize(valid.len()).expect("row count fits scalar");
            for o in out.iter_mut() {
                *o = *o / n;
            }
            Ok((Tensor::vector(out), PoolTrace::Mean(valid)))
        }
        Pooling::Last => {
            let r = *valid.last().expect("nonempty");
            Ok((Tensor::vector(h.row(r).to_vec()), PoolTrace::Last(r)))
        }
    }
}

/// Routes a pooled-vector gradient back onto the `T x d` hidden rows.
pub fn pool_backward<T: Scalar>(
    trace: &PoolTrace,
    d_pooled: &Tensor<T>,
    t_len: usize,
) -> Tensor<T> {
    let d = d_pooled.vec_len();
    let mut out = Tensor::zeros_matrix(t_len, d);
    match trace {
        PoolTrace::Max(arg) => {
            for (j, &r) in arg.iter().enumerate() {
                out.row_mut(r)[j] = d_pooled.data()[j];
            }
        }
        PoolTrace::Mean(valid) => {
            let n = T::from_usize(valid.len()).expect("row count fits scalar");
            for &r in valid {
                for (o, &v) in out.row_mut(r).iter_mut().zip(d_pooled.data()) {
                    *o = v / n;
                }
            }
        }
        PoolTrace::Last(r) => {
            for (o, &v) in out.row_mut(*r).iter_mut().zip(d_pooled.data()) {
                *o = v;
            }
        }
    }
    out
}

/// Encodes a token sequence to its sentence vector: embed, run one or both
/// directions, concatenate per timestep, pool over time.
pub fn encode_sentence<T: Scalar>(
    tokens: &[usize],
    table: &EmbeddingTable<T>,
    config: &EncoderConfig,
    fwd: &EncoderParams<T>,
    bwd: Option<&EncoderParams<T>>,
) -> Result<Tensor<T>> {
    if config.bidirectional && bwd.is_none() {
        return Err(Error::InvalidConfig(
            "bidirectional encoding needs backward-direction parameters".into(),
        ));
    }
    let x = embed(tokens, table)?;
    let seq = encode_sequence(&x, fwd, if config.bidirectional { bwd } else { None })?;
    let rows = seq.rows();
    let mask = vec![true; rows.rows()];
    pool(&rows, config.pooling, &mask)
}
