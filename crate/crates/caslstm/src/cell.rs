//! One layer-timestep block of each cell type: the plain LSTM, the
//! cell-aware stacked (CAS) cell, and the peephole-integration variant.
//!
//! The plain cell computes, from the input `x` and the left (previous
//! timestep) state:
//!
//! ```text
//! i = sigmoid(W_i x + U_i h_left + b_i)        input gate
//! f = sigmoid(W_f x + U_f h_left + b_f)        forget gate
//! c~ = tanh  (W_c x + U_c h_left + b_c)        candidate cell
//! o = sigmoid(W_o x + U_o h_left + b_o)        output gate
//! c = i*c~ + f*c_left
//! h = o*tanh(c)
//! ```
//!
//! The CAS cell additionally receives the lower layer's state pair and
//! gates its cell state through a second forget gate `g`:
//!
//! ```text
//! g = sigmoid(W_g h_below + U_g h_left + b_g)
//! c = i*c~ + (1-lambda)*f*c_left + lambda*g*c_below
//! ```
//!
//! `lambda` mixes the horizontal and vertical contributions per dimension;
//! it can be a constant vector, a trainable vector `sigmoid(u)`, or absent
//! (plain unweighted summation of both terms).
//!
//! The peephole variant computes `g` without the left hidden state,
//! from elementwise peepholes on the two cell states instead:
//!
//! ```text
//! g = sigmoid(W_g h_below + p_g1*c_left + p_g2*c_below + b_g)
//! c = i*c~ + f*c_left + g*c_below
//! ```
//!
//! Every forward op has a matching hand-derived backward op that transposes
//! the chain rule exactly; all of them are verified against central finite
//! differences in the training module.

use alloc::format;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{
    add_outer, matvec, matvec_t, real, sigmoid, tanh_act, uniform_init, xavier_bound, Scalar,
    Shape, Tensor,
};

/// Hidden state `h` and cell state `c` of one layer at one time step.
#[derive(Clone, Debug, PartialEq)]
pub struct StatePair<T> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Scalar> StatePair<T> {
    pub fn zeros(dim: usize) -> Self {
        StatePair {
            h: Tensor::zeros_vector(dim),
            c: Tensor::zeros_vector(dim),
        }
    }

    pub fn new(h: Tensor<T>, c: Tensor<T>) -> Self {
        StatePair { h, c }
    }

    pub fn dim(&self) -> usize {
        self.h.vec_len()
    }
}

/// Gradient of a loss with respect to one state pair.
#[derive(Clone, Debug)]
pub struct StateGrad<T> {
    pub dh: Tensor<T>,
    pub dc: Tensor<T>,
}

impl<T: Scalar> StateGrad<T> {
    pub fn zeros(dim: usize) -> Self {
        StateGrad {
            dh: Tensor::zeros_vector(dim),
            dc: Tensor::zeros_vector(dim),
        }
    }

    pub fn add_assign(&mut self, other: &StateGrad<T>) {
        self.dh.add_assign(&other.dh);
        self.dc.add_assign(&other.dc);
    }
}

/// Gate activations recorded by a forward pass. `g` is present only for
/// cells that see the lower layer's cell state.
#[derive(Clone, Debug)]
pub struct GateSet<T> {
    pub i: Tensor<T>,
    pub f: Tensor<T>,
    pub o: Tensor<T>,
    pub c_tilde: Tensor<T>,
    pub g: Option<Tensor<T>>,
}

/// Weights of one plain LSTM layer. `W_*` map the layer input, `U_*` the
/// recurrent hidden state, `b_*` are biases.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams<T> {
    pub w_i: Tensor<T>,
    pub u_i: Tensor<T>,
    pub b_i: Tensor<T>,
    pub w_f: Tensor<T>,
    pub u_f: Tensor<T>,
    pub b_f: Tensor<T>,
    pub w_c: Tensor<T>,
    pub u_c: Tensor<T>,
    pub b_c: Tensor<T>,
    pub w_o: Tensor<T>,
    pub u_o: Tensor<T>,
    pub b_o: Tensor<T>,
}

impl<T: Scalar> LstmParams<T> {
    /// Xavier-uniform weights; zero biases except the forget bias, which
    /// starts at 1 so memory is carried early in training.
    pub fn init(input_dim: usize, dim: usize, rng: &mut Rng) -> Self {
        let wb = xavier_bound(input_dim, dim);
        let ub = xavier_bound(dim, dim);
        let w = |rng: &mut Rng| uniform_init(rng, Shape::Matrix(dim, input_dim), wb).unwrap();
        let u = |rng: &mut Rng| uniform_init(rng, Shape::Matrix(dim, dim), ub).unwrap();
        LstmParams {
            w_i: w(rng),
            u_i: u(rng),
            b_i: Tensor::zeros_vector(dim),
            w_f: w(rng),
            u_f: u(rng),
            b_f: Tensor::full(Shape::Vector(dim), T::one()),
            w_c: w(rng),
            u_c: u(rng),
            b_c: Tensor::zeros_vector(dim),
            w_o: w(rng),
            u_o: u(rng),
            b_o: Tensor::zeros_vector(dim),
        }
    }

    pub fn zeros(input_dim: usize, dim: usize) -> Self {
        let m = || Tensor::zeros_matrix(dim, input_dim);
        let u = || Tensor::zeros_matrix(dim, dim);
        let b = || Tensor::zeros_vector(dim);
        LstmParams {
            w_i: m(),
            u_i: u(),
            b_i: b(),
            w_f: m(),
            u_f: u(),
            b_f: b(),
            w_c: m(),
            u_c: u(),
            b_c: b(),
            w_o: m(),
            u_o: u(),
            b_o: b(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_i.cols()
    }

    pub fn dim(&self) -> usize {
        self.w_i.rows()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.dim())
    }

    pub fn entries(&self) -> [(&'static str, &Tensor<T>); 12] {
        [
            ("w_i", &self.w_i),
            ("u_i", &self.u_i),
            ("b_i", &self.b_i),
            ("w_f", &self.w_f),
            ("u_f", &self.u_f),
            ("b_f", &self.b_f),
            ("w_c", &self.w_c),
            ("u_c", &self.u_c),
            ("b_c", &self.b_c),
            ("w_o", &self.w_o),
            ("u_o", &self.u_o),
            ("b_o", &self.b_o),
        ]
    }

    pub fn entries_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 12] {
        [
            ("w_i", &mut self.w_i),
            ("u_i", &mut self.u_i),
            ("b_i", &mut self.b_i),
            ("w_f", &mut self.w_f),
            ("u_f", &mut self.u_f),
            ("b_f", &mut self.b_f),
            ("w_c", &mut self.w_c),
            ("u_c", &mut self.u_c),
            ("b_c", &mut self.b_c),
            ("w_o", &mut self.w_o),
            ("u_o", &mut self.u_o),
            ("b_o", &mut self.b_o),
        ]
    }

    pub fn add_assign(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self.entries_mut().into_iter().zip(other.entries()) {
            a.add_assign(b);
        }
    }

    fn check_input(&self, x: &Tensor<T>, left: &StatePair<T>) -> Result<()> {
        if x.shape() != Shape::Vector(self.input_dim()) {
            return Err(Error::ShapeMismatch {
                op: "lstm input",
                lhs: Shape::Vector(self.input_dim()),
                rhs: x.shape(),
            });
        }
        if left.h.shape() != Shape::Vector(self.dim()) || left.c.shape() != left.h.shape() {
            return Err(Error::ShapeMismatch {
                op: "lstm state",
                lhs: Shape::Vector(self.dim()),
                rhs: left.h.shape(),
            });
        }
        Ok(())
    }
}

/// Mixing specification for the CAS cell-state fusion.
#[derive(Clone, Debug, PartialEq)]
pub enum LambdaSpec<T> {
    /// Fixed per-dimension vector in [0, 1].
    Constant(Tensor<T>),
    /// Unconstrained vector `u`, realized as `sigmoid(u)`.
    Trainable(Tensor<T>),
    /// No mixing vector: both cell terms enter with coefficient 1.
    NoneSum,
}

impl<T: Scalar> LambdaSpec<T> {
    /// Constant lambda with every entry equal to `value`.
    pub fn constant(value: f64, dim: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::InvalidConfig(format!(
                "lambda must lie in [0, 1], got {value}"
            )));
        }
        Ok(LambdaSpec::Constant(Tensor::full(
            Shape::Vector(dim),
            real(value),
        )))
    }

    /// Trainable lambda initialized at 0.5 (`u = 0`).
    pub fn trainable(dim: usize) -> Self {
        LambdaSpec::Trainable(Tensor::zeros_vector(dim))
    }

    /// The effective mixing vector, or `None` for unweighted summation.
    pub fn realized(&self) -> Option<Tensor<T>> {
        match self {
            LambdaSpec::Constant(v) => Some(v.clone()),
            LambdaSpec::Trainable(u) => Some(sigmoid(u)),
            LambdaSpec::NoneSum => None,
        }
    }
}

/// Weights of one CAS layer: a plain LSTM parameter set extended with the
/// vertical forget gate `g` and the mixing vector.
#[derive(Clone, Debug, PartialEq)]
pub struct CasParams<T> {
    pub base: LstmParams<T>,
    pub w_g: Tensor<T>,
    pub u_g: Tensor<T>,
    pub b_g: Tensor<T>,
    pub lambda: LambdaSpec<T>,
}

impl<T: Scalar> CasParams<T> {
    /// The cell-aware fusion requires equal dims for the lower and current
    /// layer, so a single `dim` parameterizes the layer. The vertical
    /// forget bias starts at 1 like the horizontal one.
    pub fn init(dim: usize, lambda: LambdaSpec<T>, rng: &mut Rng) -> Self {
        let bound = xavier_bound(dim, dim);
        CasParams {
            base: LstmParams::init(dim, dim, rng),
            w_g: uniform_init(rng, Shape::Matrix(dim, dim), bound).unwrap(),
            u_g: uniform_init(rng, Shape::Matrix(dim, dim), bound).unwrap(),
            b_g: Tensor::full(Shape::Vector(dim), T::one()),
            lambda,
        }
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    fn check(&self, below: &StatePair<T>, left: &StatePair<T>) -> Result<()> {
        if self.base.input_dim() != self.base.dim() {
            return Err(Error::InvalidConfig(format!(
                "cell-aware fusion requires equal lower and current dims, got {} and {}",
                self.base.input_dim(),
                self.base.dim()
            )));
        }
        if below.dim() != self.dim() {
            return Err(Error::InvalidConfig(format!(
                "cell-aware fusion requires equal lower and current dims, got {} and {}",
                below.dim(),
                self.dim()
            )));
        }
        self.base.check_input(&below.h, left)
    }
}

/// Gradients for one CAS layer. `lambda_u` is present only when the mixing
/// vector is trainable.
#[derive(Clone, Debug)]
pub struct CasGrads<T> {
    pub base: LstmParams<T>,
    pub w_g: Tensor<T>,
    pub u_g: Tensor<T>,
    pub b_g: Tensor<T>,
    pub lambda_u: Option<Tensor<T>>,
}

impl<T: Scalar> CasGrads<T> {
    pub fn zeros_like(params: &CasParams<T>) -> Self {
        let dim = params.dim();
        CasGrads {
            base: params.base.zeros_like(),
            w_g: Tensor::zeros_matrix(dim, dim),
            u_g: Tensor::zeros_matrix(dim, dim),
            b_g: Tensor::zeros_vector(dim),
            lambda_u: match params.lambda {
                LambdaSpec::Trainable(_) => Some(Tensor::zeros_vector(dim)),
                _ => None,
            },
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.base.add_assign(&other.base);
        self.w_g.add_assign(&other.w_g);
        self.u_g.add_assign(&other.u_g);
        self.b_g.add_assign(&other.b_g);
        if let (Some(a), Some(b)) = (self.lambda_u.as_mut(), other.lambda_u.as_ref()) {
            a.add_assign(b);
        }
    }
}

/// Weights of one peephole-integration layer: the vertical gate sees the
/// lower hidden state plus elementwise peepholes on both cell states, and
/// the fusion is unweighted.
#[derive(Clone, Debug, PartialEq)]
pub struct PeepholeParams<T> {
    pub base: LstmParams<T>,
    pub w_g: Tensor<T>,
    pub b_g: Tensor<T>,
    pub p_g1: Tensor<T>,
    pub p_g2: Tensor<T>,
}

impl<T: Scalar> PeepholeParams<T> {
    pub fn init(dim: usize, rng: &mut Rng) -> Self {
        let bound = xavier_bound(dim, dim);
        PeepholeParams {
            base: LstmParams::init(dim, dim, rng),
            w_g: uniform_init(rng, Shape::Matrix(dim, dim), bound).unwrap(),
            b_g: Tensor::full(Shape::Vector(dim), T::one()),
            p_g1: uniform_init(rng, Shape::Vector(dim), bound).unwrap(),
            p_g2: uniform_init(rng, Shape::Vector(dim), bound).unwrap(),
        }
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn zeros_like(&self) -> Self {
        let dim = self.dim();
        PeepholeParams {
            base: self.base.zeros_like(),
            w_g: Tensor::zeros_matrix(dim, dim),
            b_g: Tensor::zeros_vector(dim),
            p_g1: Tensor::zeros_vector(dim),
            p_g2: Tensor::zeros_vector(dim),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.base.add_assign(&other.base);
        self.w_g.add_assign(&other.w_g);
        self.b_g.add_assign(&other.b_g);
        self.p_g1.add_assign(&other.p_g1);
        self.p_g2.add_assign(&other.p_g2);
    }

    fn check(&self, below: &StatePair<T>, left: &StatePair<T>) -> Result<()> {
        if self.base.input_dim() != self.base.dim() || below.dim() != self.dim() {
            return Err(Error::InvalidConfig(format!(
                "peephole integration requires equal lower and current dims, got {} and {}",
                below.dim(),
                self.dim()
            )));
        }
        self.base.check_input(&below.h, left)
    }
}

fn gate_preact<T: Scalar>(
    w: &Tensor<T>,
    x: &Tensor<T>,
    u: &Tensor<T>,
    h: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>> {
    Ok(matvec(w, x)?.add(&matvec(u, h)?).add(b))
}

/// `da * a * (1 - a)`: gradient through a sigmoid, from its activation.
fn sigmoid_backprop<T: Scalar>(da: &Tensor<T>, a: &Tensor<T>) -> Tensor<T> {
    da.zip(a, |d, v| d * v * (T::one() - v))
}

/// `da * (1 - a^2)`: gradient through a tanh, from its activation.
fn tanh_backprop<T: Scalar>(da: &Tensor<T>, a: &Tensor<T>) -> Tensor<T> {
    da.zip(a, |d, v| d * (T::one() - v * v))
}

/// Shared head of every cell backward: splits the upstream `(dh, dc)` into
/// the output-gate gradient and the total cell-state gradient.
fn backward_head<T: Scalar>(
    state: &StatePair<T>,
    o: &Tensor<T>,
    dh: &Tensor<T>,
    dc_in: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let tc = tanh_act(&state.c);
    let d_o = dh.mul(&tc);
    let dtc = dh.mul(o);
    let dc = dc_in.add(&tanh_backprop(&dtc, &tc));
    (d_o, dc)
}

/// Plain LSTM forward for one timestep.
pub fn lstm_forward<T: Scalar>(
    x: &Tensor<T>,
    left: &StatePair<T>,
    params: &LstmParams<T>,
) -> Result<(StatePair<T>, GateSet<T>)> {
    params.check_input(x, left)?;
    let i = sigmoid(&gate_preact(&params.w_i, x, &params.u_i, &left.h, &params.b_i)?);
    let f = sigmoid(&gate_preact(&params.w_f, x, &params.u_f, &left.h, &params.b_f)?);
    let c_tilde = tanh_act(&gate_preact(&params.w_c, x, &params.u_c, &left.h, &params.b_c)?);
    let o = sigmoid(&gate_preact(&params.w_o, x, &params.u_o, &left.h, &params.b_o)?);
    let c = i.mul(&c_tilde).add(&f.mul(&left.c));
    let h = o.mul(&tanh_act(&c));
    Ok((
        StatePair::new(h, c),
        GateSet {
            i,
            f,
            o,
            c_tilde,
            g: None,
        },
    ))
}

/// Plain LSTM backward. Returns parameter gradients, the gradient with
/// respect to the input `x`, and the gradient with respect to the left
/// state.
pub fn lstm_backward<T: Scalar>(
    x: &Tensor<T>,
    left: &StatePair<T>,
    params: &LstmParams<T>,
    state: &StatePair<T>,
    gates: &GateSet<T>,
    dh: &Tensor<T>,
    dc_in: &Tensor<T>,
) -> Result<(LstmParams<T>, Tensor<T>, StateGrad<T>)> {
    params.check_input(x, left)?;
    let (d_o, dc) = backward_head(state, &gates.o, dh, dc_in);

    let di = dc.mul(&gates.c_tilde);
    let dct = dc.mul(&gates.i);
    let df = dc.mul(&left.c);
    let dc_left = dc.mul(&gates.f);

    let dz_i = sigmoid_backprop(&di, &gates.i);
    let dz_f = sigmoid_backprop(&df, &gates.f);
    let dz_c = tanh_backprop(&dct, &gates.c_tilde);
    let dz_o = sigmoid_backprop(&d_o, &gates.o);

    let mut grads = params.zeros_like();
    let mut dx = Tensor::zeros_vector(x.vec_len());
    let mut dh_left = Tensor::zeros_vector(left.dim());
    for (dz, w, u, gw, gu, gb) in [
        (&dz_i, &params.w_i, &params.u_i, &mut grads.w_i, &mut grads.u_i, &mut grads.b_i),
        (&dz_f, &params.w_f, &params.u_f, &mut grads.w_f, &mut grads.u_f, &mut grads.b_f),
        (&dz_c, &params.w_c, &params.u_c, &mut grads.w_c, &mut grads.u_c, &mut grads.b_c),
        (&dz_o, &params.w_o, &params.u_o, &mut grads.w_o, &mut grads.u_o, &mut grads.b_o),
    ] {
        add_outer(gw, dz, x);
        add_outer(gu, dz, &left.h);
        gb.add_assign(dz);
        dx.add_assign(&matvec_t(w, dz)?);
        dh_left.add_assign(&matvec_t(u, dz)?);
    }

    Ok((
        grads,
        dx,
        StateGrad {
            dh: dh_left,
            dc: dc_left,
        },
    ))
}

/// CAS forward for one timestep of a non-bottom layer.
pub fn cas_forward<T: Scalar>(
    below: &StatePair<T>,
    left: &StatePair<T>,
    params: &CasParams<T>,
) -> Result<(StatePair<T>, GateSet<T>)> {
    params.check(below, left)?;
    let p = &params.base;
    let x = &below.h;
    let i = sigmoid(&gate_preact(&p.w_i, x, &p.u_i, &left.h, &p.b_i)?);
    let f = sigmoid(&gate_preact(&p.w_f, x, &p.u_f, &left.h, &p.b_f)?);
    let g = sigmoid(&gate_preact(&params.w_g, x, &params.u_g, &left.h, &params.b_g)?);
    let c_tilde = tanh_act(&gate_preact(&p.w_c, x, &p.u_c, &left.h, &p.b_c)?);
    let o = sigmoid(&gate_preact(&p.w_o, x, &p.u_o, &left.h, &p.b_o)?);

    let horizontal = f.mul(&left.c);
    let vertical = g.mul(&below.c);
    let mixed = match params.lambda.realized() {
        Some(lam) => {
            let one_minus = lam.map(|v| T::one() - v);
            horizontal.mul(&one_minus).add(&vertical.mul(&lam))
        }
        None => horizontal.add(&vertical),
    };
    let c = i.mul(&c_tilde).add(&mixed);
    let h = o.mul(&tanh_act(&c));
    Ok((
        StatePair::new(h, c),
        GateSet {
            i,
            f,
            o,
            c_tilde,
            g: Some(g),
        },
    ))
}

/// CAS backward. Returns parameter gradients (including the trainable
/// lambda gradient when applicable) and gradients with respect to both
/// incoming state pairs.
pub fn cas_backward<T: Scalar>(
    below: &StatePair<T>,
    left: &StatePair<T>,
    params: &CasParams<T>,
    state: &StatePair<T>,
    gates: &GateSet<T>,
    dh: &Tensor<T>,
    dc_in: &Tensor<T>,
) -> Result<(CasGrads<T>, StateGrad<T>, StateGrad<T>)> {
    params.check(below, left)?;
    let g = gates.g.as_ref().expect("CAS gate set carries g");
    let (d_o, dc) = backward_head(state, &gates.o, dh, dc_in);

    let di = dc.mul(&gates.c_tilde);
    let dct = dc.mul(&gates.i);

    let horizontal = gates.f.mul(&left.c);
    let vertical = g.mul(&below.c);
    let (df, dg, dc_left, dc_below, d_lambda) = match params.lambda.realized() {
        Some(lam) => {
            let one_minus = lam.map(|v| T::one() - v);
            (
                dc.mul(&one_minus).mul(&left.c),
                dc.mul(&lam).mul(&below.c),
                dc.mul(&one_minus).mul(&gates.f),
                dc.mul(&lam).mul(g),
                Some(dc.mul(&vertical.sub(&horizontal))),
            )
        }
        None => (
            dc.mul(&left.c),
            dc.mul(&below.c),
            dc.mul(&gates.f),
            dc.mul(g),
            None,
        ),
    };

    let dz_i = sigmoid_backprop(&di, &gates.i);
    let dz_f = sigmoid_backprop(&df, &gates.f);
    let dz_g = sigmoid_backprop(&dg, g);
    let dz_c = tanh_backprop(&dct, &gates.c_tilde);
    let dz_o = sigmoid_backprop(&d_o, &gates.o);

    let mut grads = CasGrads::zeros_like(params);
    let p = &params.base;
    let x = &below.h;
    let mut dh_below = Tensor::zeros_vector(below.dim());
    let mut dh_left = Tensor::zeros_vector(left.dim());
    for (dz, w, u, gw, gu, gb) in [
        (&dz_i, &p.w_i, &p.u_i, &mut grads.base.w_i, &mut grads.base.u_i, &mut grads.base.b_i),
        (&dz_f, &p.w_f, &p.u_f, &mut grads.base.w_f, &mut grads.base.u_f, &mut grads.base.b_f),
        (&dz_g, &params.w_g, &params.u_g, &mut grads.w_g, &mut grads.u_g, &mut grads.b_g),
        (&dz_c, &p.w_c, &p.u_c, &mut grads.base.w_c, &mut grads.base.u_c, &mut grads.base.b_c),
        (&dz_o, &p.w_o, &p.u_o, &mut grads.base.w_o, &mut grads.base.u_o, &mut grads.base.b_o),
    ] {
        add_outer(gw, dz, x);
        add_outer(gu, dz, &left.h);
        gb.add_assign(dz);
        dh_below.add_assign(&matvec_t(w, dz)?);
        dh_left.add_assign(&matvec_t(u, dz)?);
    }

    if let LambdaSpec::Trainable(_) = params.lambda {
        let lam = params.lambda.realized().expect("trainable lambda realizes");
        let d_lambda = d_lambda.expect("trainable lambda has a mixing gradient");
        grads.lambda_u = Some(sigmoid_backprop(&d_lambda, &lam));
    }

    Ok((
        grads,
        StateGrad {
            dh: dh_below,
            dc: dc_below,
        },
        StateGrad {
            dh: dh_left,
            dc: dc_left,
        },
    ))
}

/// Peephole-integration forward for one timestep of a non-bottom layer.
pub fn peephole_forward<T: Scalar>(
    below: &StatePair<T>,
    left: &StatePair<T>,
    params: &PeepholeParams<T>,
) -> Result<(StatePair<T>, GateSet<T>)> {
    params.check(below, left)?;
    let p = &params.base;
    let x = &below.h;
    let i = sigmoid(&gate_preact(&p.w_i, x, &p.u_i, &left.h, &p.b_i)?);
    let f = sigmoid(&gate_preact(&p.w_f, x, &p.u_f, &left.h, &p.b_f)?);
    let z_g = matvec(&params.w_g, x)?
        .add(&params.p_g1.mul(&left.c))
        .add(&params.p_g2.mul(&below.c))
        .add(&params.b_g);
    let g = sigmoid(&z_g);
    let c_tilde = tanh_act(&gate_preact(&p.w_c, x, &p.u_c, &left.h, &p.b_c)?);
    let o = sigmoid(&gate_preact(&p.w_o, x, &p.u_o, &left.h, &p.b_o)?);

    let c = i
        .mul(&c_tilde)
        .add(&f.mul(&left.c))
        .add(&g.mul(&below.c));
    let h = o.mul(&tanh_act(&c));
    Ok((
        StatePair::new(h, c),
        GateSet {
            i,
            f,
            o,
            c_tilde,
            g: Some(g),
        },
    ))
}

/// Peephole-integration backward.
pub fn peephole_backward<T: Scalar>(
    below: &StatePair<T>,
    left: &StatePair<T>,
    params: &PeepholeParams<T>,
    state: &StatePair<T>,
    gates: &GateSet<T>,
    dh: &Tensor<T>,
    dc_in: &Tensor<T>,
) -> Result<(PeepholeParams<T>, StateGrad<T>, StateGrad<T>)> {
    params.check(below, left)?;
    let g = gates.g.as_ref().expect("peephole gate set carries g");
    let (d_o, dc) = backward_head(state, &gates.o, dh, dc_in);

    let di = dc.mul(&gates.c_tilde);
    let dct = dc.mul(&gates.i);
    let df = dc.mul(&left.c);
    let dg = dc.mul(&below.c);
    let mut dc_left = dc.mul(&gates.f);
    let mut dc_below = dc.mul(g);

    let dz_i = sigmoid_backprop(&di, &gates.i);
    let dz_f = sigmoid_backprop(&df, &gates.f);
    let dz_g = sigmoid_backprop(&dg, g);
    let dz_c = tanh_backprop(&dct, &gates.c_tilde);
    let dz_o = sigmoid_backprop(&d_o, &gates.o);

    let mut grads = params.zeros_like();
    let p = &params.base;
    let x = &below.h;
    let mut dh_below = Tensor::zeros_vector(below.dim());
    let mut dh_left = Tensor::zeros_vector(left.dim());
    for (dz, w, u, gw, gu, gb) in [
        (&dz_i, &p.w_i, &p.u_i, &mut grads.base.w_i, &mut grads.base.u_i, &mut grads.base.b_i),
        (&dz_f, &p.w_f, &p.u_f, &mut grads.base.w_f, &mut grads.base.u_f, &mut grads.base.b_f),
        (&dz_c, &p.w_c, &p.u_c, &mut grads.base.w_c, &mut grads.base.u_c, &mut grads.base.b_c),
        (&dz_o, &p.w_o, &p.u_o, &mut grads.base.w_o, &mut grads.base.u_o, &mut grads.base.b_o),
    ] {
        add_outer(gw, dz, x);
        add_outer(gu, dz, &left.h);
        gb.add_assign(dz);
        dh_below.add_assign(&matvec_t(w, dz)?);
        dh_left.add_assign(&matvec_t(u, dz)?);
    }

    // The g gate has no recurrent matrix; its other paths run through the
    // peephole vectors into both cell states.
    add_outer(&mut grads.w_g, &dz_g, x);
    grads.b_g.add_assign(&dz_g);
    grads.p_g1.add_assign(&dz_g.mul(&left.c));
    grads.p_g2.add_assign(&dz_g.mul(&below.c));
    dh_below.add_assign(&matvec_t(&params.w_g, &dz_g)?);
    dc_left.add_assign(&dz_g.mul(&params.p_g1));
    dc_below.add_assign(&dz_g.mul(&params.p_g2));

    Ok((
        grads,
        StateGrad {
            dh: dh_below,
            dc: dc_below,
        },
        StateGrad {
            dh: dh_left,
            dc: dc_left,
        },
    ))
}

/// Enumeration of layer kinds used by the encoder.
#[derive(Clone, Debug)]
pub enum LayerParams<T> {
    Plain(LstmParams<T>),
    Cas(CasParams<T>),
    Peephole(PeepholeParams<T>),
}

/// Gradient container matching [`LayerParams`].
#[derive(Clone, Debug)]
pub enum LayerGrads<T> {
    Plain(LstmParams<T>),
    Cas(CasGrads<T>),
    Peephole(PeepholeParams<T>),
}

impl<T: Scalar> LayerParams<T> {
    pub fn dim(&self) -> usize {
        match self {
            LayerParams::Plain(p) => p.dim(),
            LayerParams::Cas(p) => p.dim(),
            LayerParams::Peephole(p) => p.dim(),
        }
    }

    pub fn zeros_grads(&self) -> LayerGrads<T> {
        match self {
            LayerParams::Plain(p) => LayerGrads::Plain(p.zeros_like()),
            LayerParams::Cas(p) => LayerGrads::Cas(CasGrads::zeros_like(p)),
            LayerParams::Peephole(p) => LayerGrads::Peephole(p.zeros_like()),
        }
    }
}

impl<T: Scalar> LayerGrads<T> {
    pub fn add_assign(&mut self, other: &Self) {
        match (self, other) {
            (LayerGrads::Plain(a), LayerGrads::Plain(b)) => a.add_assign(b),
            (LayerGrads::Cas(a), LayerGrads::Cas(b)) => a.add_assign(b),
            (LayerGrads::Peephole(a), LayerGrads::Peephole(b)) => a.add_assign(b),
            _ => panic!("layer gradient kind mismatch"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::real;

    fn vecf(v: &[f64]) -> Tensor<f64> {
        Tensor::vector(v.to_vec())
    }

    fn scalar_params(w: f64, u: f64, b: f64) -> LstmParams<f64> {
        let mut p = LstmParams::zeros(1, 1);
        for (name, t) in p.entries_mut() {
            let v = if name.starts_with('w') {
                w
            } else if name.starts_with('u') {
                u
            } else {
                b
            };
            t.data_mut()[0] = v;
        }
        p
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn lstm_zero_params_give_zero_state() {
        let p = LstmParams::<f64>::zeros(3, 2);
        let (state, gates) = lstm_forward(&vecf(&[0.3, -1.0, 2.0]), &StatePair::zeros(2), &p).unwrap();
        assert_eq!(state.h.data(), &[0.0, 0.0]);
        assert_eq!(state.c.data(), &[0.0, 0.0]);
        assert_eq!(gates.i.data(), &[0.5, 0.5]);
        assert_eq!(gates.c_tilde.data(), &[0.0, 0.0]);
        assert!(gates.g.is_none());
    }

    #[test]
    fn lstm_saturated_gates_carry_memory() {
        let mut p = LstmParams::<f64>::zeros(1, 1);
        p.b_f.data_mut()[0] = 20.0;
        p.b_i.data_mut()[0] = -20.0;
        let left = StatePair::new(vecf(&[0.0]), vecf(&[1.0]));
        let (state, _) = lstm_forward(&vecf(&[0.7]), &left, &p).unwrap();
        assert!((state.c.data()[0] - 1.0).abs() < 1e-8);
    }

    // Scalar hand evaluation of the six equations: all weights 1, biases 0,
    // x = 1, left = (0.5, 0.5). Every pre-activation equals 1.5.
    #[test]
    fn lstm_scalar_hand_evaluation() {
        let p = scalar_params(1.0, 1.0, 0.0);
        let left = StatePair::new(vecf(&[0.5]), vecf(&[0.5]));
        let (state, gates) = lstm_forward(&vecf(&[1.0]), &left, &p).unwrap();

        let s = sig(1.5);
        let ct = 1.5f64.tanh();
        let c = s * ct + s * 0.5;
        let h = s * c.tanh();
        assert!((gates.i.data()[0] - s).abs() < 1e-10);
        assert!((gates.c_tilde.data()[0] - ct).abs() < 1e-10);
        assert!((state.c.data()[0] - c).abs() < 1e-10);
        assert!((state.h.data()[0] - h).abs() < 1e-10);
        // Frozen values for the independent record.
        assert!((state.c.data()[0] - 1.1488133474481148).abs() < 1e-10);
        assert!((state.h.data()[0] - 0.6682531514154169).abs() < 1e-10);
    }

    fn scalar_cas(lambda: LambdaSpec<f64>) -> CasParams<f64> {
        CasParams {
            base: scalar_params(1.0, 1.0, 0.0),
            w_g: Tensor::matrix(1, 1, vec![1.0]).unwrap(),
            u_g: Tensor::matrix(1, 1, vec![1.0]).unwrap(),
            b_g: vecf(&[0.0]),
            lambda,
        }
    }

    // Scalar hand evaluation of the CAS equations with lambda = 0.5:
    // all pre-activations equal 1, so i = f = g = o = sigmoid(1) and
    // c = sig(1)tanh(1) + 0.5*sig(1)*0.6 + 0.5*sig(1)*0.4.
    #[test]
    fn cas_scalar_hand_evaluation() {
        let p = scalar_cas(LambdaSpec::constant(0.5, 1).unwrap());
        let below = StatePair::new(vecf(&[1.0]), vecf(&[0.4]));
        let left = StatePair::new(vecf(&[0.0]), vecf(&[0.6]));
        let (state, gates) = cas_forward(&below, &left, &p).unwrap();

        let s = sig(1.0);
        let c = s * 1.0f64.tanh() + 0.5 * s * 0.6 + 0.5 * s * 0.4;
        let h = s * c.tanh();
        assert!((gates.g.as_ref().unwrap().data()[0] - s).abs() < 1e-10);
        assert!((state.c.data()[0] - c).abs() < 1e-10);
        assert!((state.h.data()[0] - h).abs() < 1e-10);
        assert!((state.c.data()[0] - 0.9222992304609422).abs() < 1e-10);
        assert!((state.h.data()[0] - 0.5314673811301976).abs() < 1e-10);
    }

    fn random_lstm(dim: usize, rng: &mut Rng) -> LstmParams<f64> {
        let mut p = LstmParams::init(dim, dim, rng);
        // Randomize biases too so reductions are not trivially zero.
        for (name, t) in p.entries_mut() {
            if name.starts_with('b') {
                *t = uniform_init(rng, Shape::Vector(dim), 0.5).unwrap();
            }
        }
        p
    }

    fn random_state(dim: usize, rng: &mut Rng) -> StatePair<f64> {
        StatePair::new(
            uniform_init(rng, Shape::Vector(dim), 0.9).unwrap(),
            uniform_init(rng, Shape::Vector(dim), 1.5).unwrap(),
        )
    }

    fn cas_from_shared(
        shared: &LstmParams<f64>,
        lambda: LambdaSpec<f64>,
        rng: &mut Rng,
    ) -> CasParams<f64> {
        let dim = shared.dim();
        CasParams {
            base: shared.clone(),
            w_g: uniform_init(rng, Shape::Matrix(dim, dim), 1.0).unwrap(),
            u_g: uniform_init(rng, Shape::Matrix(dim, dim), 1.0).unwrap(),
            b_g: uniform_init(rng, Shape::Vector(dim), 1.0).unwrap(),
            lambda,
        }
    }

    // lambda = 0 zeroes the vertical term and restores the conventional
    // cell exactly, for any g-gate parameters.
    #[test]
    fn cas_lambda_zero_reduces_to_plain() {
        let mut rng = Rng::new(21);
        for _ in 0..20 {
            let dim = 1 + rng.index(4);
            let shared = random_lstm(dim, &mut rng);
            let cas = cas_from_shared(&shared, LambdaSpec::constant(0.0, dim).unwrap(), &mut rng);
            let below = random_state(dim, &mut rng);
            let left = random_state(dim, &mut rng);

            let (cas_state, _) = cas_forward(&below, &left, &cas).unwrap();
            let (plain_state, _) = lstm_forward(&below.h, &left, &shared).unwrap();
            for (a, b) in cas_state.c.data().iter().zip(plain_state.c.data()) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in cas_state.h.data().iter().zip(plain_state.h.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cas_lambda_one_ignores_left_cell() {
        let mut rng = Rng::new(22);
        let dim = 3;
        let shared = random_lstm(dim, &mut rng);
        let cas = cas_from_shared(&shared, LambdaSpec::constant(1.0, dim).unwrap(), &mut rng);
        let below = random_state(dim, &mut rng);
        let left_a = random_state(dim, &mut rng);
        // Same hidden state, different cell state: c must not change.
        let left_b = StatePair::new(
            left_a.h.clone(),
            uniform_init(&mut rng, Shape::Vector(dim), 2.0).unwrap(),
        );
        let (sa, ga) = cas_forward(&below, &left_a, &cas).unwrap();
        let (sb, _) = cas_forward(&below, &left_b, &cas).unwrap();
        assert_eq!(sa.c, sb.c);
        // And c equals i*c~ + g*c_below exactly.
        let expect = ga
            .i
            .mul(&ga.c_tilde)
            .add(&ga.g.as_ref().unwrap().mul(&below.c));
        for (a, b) in sa.c.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    // With lambda = 0.5, swapping the roles of the left and below contexts
    // (state pairs, the f/g parameter triples, and each gate's W/U slots)
    // leaves the new state unchanged: both contexts enter the computation
    // through the same procedure.
    #[test]
    fn cas_half_lambda_context_swap_symmetry() {
        let mut rng = Rng::new(23);
        for _ in 0..20 {
            let dim = 1 + rng.index(4);
            let shared = random_lstm(dim, &mut rng);
            let cas = cas_from_shared(&shared, LambdaSpec::constant(0.5, dim).unwrap(), &mut rng);
            let below = random_state(dim, &mut rng);
            let left = random_state(dim, &mut rng);
            let (state, _) = cas_forward(&below, &left, &cas).unwrap();

            let swap_wu = |w: &Tensor<f64>, u: &Tensor<f64>| (u.clone(), w.clone());
            let mut swapped = cas.clone();
            (swapped.base.w_i, swapped.base.u_i) = swap_wu(&cas.base.w_i, &cas.base.u_i);
            (swapped.base.w_c, swapped.base.u_c) = swap_wu(&cas.base.w_c, &cas.base.u_c);
            (swapped.base.w_o, swapped.base.u_o) = swap_wu(&cas.base.w_o, &cas.base.u_o);
            // f takes over g's weights with W/U roles exchanged, and vice versa.
            swapped.base.w_f = cas.u_g.clone();
            swapped.base.u_f = cas.w_g.clone();
            swapped.base.b_f = cas.b_g.clone();
            swapped.w_g = cas.base.u_f.clone();
            swapped.u_g = cas.base.w_f.clone();
            swapped.b_g = cas.base.b_f.clone();

            let (state_swapped, _) = cas_forward(&left, &below, &swapped).unwrap();
            for (a, b) in state.c.data().iter().zip(state_swapped.c.data()) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in state.h.data().iter().zip(state_swapped.h.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cas_rejects_rectangular_params() {
        let mut p = scalar_cas(LambdaSpec::NoneSum);
        p.base.w_i = Tensor::zeros_matrix(1, 2);
        let below = StatePair::new(vecf(&[0.1, 0.2]), vecf(&[0.0, 0.0]));
        let left = StatePair::zeros(1);
        assert!(matches!(
            cas_forward(&below, &left, &p),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn lambda_constant_range_checked() {
        assert!(LambdaSpec::<f64>::constant(-0.1, 2).is_err());
        assert!(LambdaSpec::<f64>::constant(1.1, 2).is_err());
        assert!(LambdaSpec::<f64>::constant(1.0, 2).is_ok());
    }

    #[test]
    fn gate_ranges_hold_on_random_instances() {
        let mut rng = Rng::new(31);
        for _ in 0..50 {
            let dim = 1 + rng.index(5);
            let p = CasParams::init(dim, LambdaSpec::trainable(dim), &mut rng);
            let below = random_state(dim, &mut rng);
            let left = random_state(dim, &mut rng);
            let (state, gates) = cas_forward(&below, &left, &p).unwrap();
            for t in [&gates.i, &gates.f, &gates.o, gates.g.as_ref().unwrap()] {
                assert!(t.data().iter().all(|&v| v > 0.0 && v < 1.0));
            }
            assert!(gates.c_tilde.data().iter().all(|&v| v > -1.0 && v < 1.0));
            assert!(state.h.data().iter().all(|&v| v > -1.0 && v < 1.0));
        }
    }

    fn scalar_peephole() -> PeepholeParams<f64> {
        PeepholeParams {
            base: scalar_params(1.0, 1.0, 0.0),
            w_g: Tensor::matrix(1, 1, vec![1.0]).unwrap(),
            b_g: vecf(&[0.0]),
            p_g1: vecf(&[1.0]),
            p_g2: vecf(&[1.0]),
        }
    }

    // Scalar hand evaluation of the peephole equations: the four base gates
    // see pre-activation 1.3, the vertical gate sees 1 + 0.5 + 0.2 = 1.7.
    #[test]
    fn peephole_scalar_hand_evaluation() {
        let p = scalar_peephole();
        let below = StatePair::new(vecf(&[1.0]), vecf(&[0.2]));
        let left = StatePair::new(vecf(&[0.3]), vecf(&[0.5]));
        let (state, gates) = peephole_forward(&below, &left, &p).unwrap();

        let s13 = sig(1.3);
        let g = sig(1.7);
        let c = s13 * 1.3f64.tanh() + s13 * 0.5 + g * 0.2;
        let h = s13 * c.tanh();
        assert!((gates.g.as_ref().unwrap().data()[0] - g).abs() < 1e-10);
        assert!((state.c.data()[0] - c).abs() < 1e-10);
        assert!((state.h.data()[0] - h).abs() < 1e-10);
        assert!((state.c.data()[0] - 1.2391966427909245).abs() < 1e-10);
        assert!((state.h.data()[0] - 0.6642084098145671).abs() < 1e-10);
    }

    #[test]
    fn peephole_zero_params_give_zero_state() {
        let p = PeepholeParams {
            base: LstmParams::zeros(2, 2),
            w_g: Tensor::zeros_matrix(2, 2),
            b_g: Tensor::zeros_vector(2),
            p_g1: Tensor::zeros_vector(2),
            p_g2: Tensor::zeros_vector(2),
        };
        let below = StatePair::new(vecf(&[0.4, -0.2]), Tensor::zeros_vector(2));
        let (state, _) = peephole_forward(&below, &StatePair::zeros(2), &p).unwrap();
        assert_eq!(state.h.data(), &[0.0, 0.0]);
        assert_eq!(state.c.data(), &[0.0, 0.0]);
    }

    // With zero peephole vectors, g depends only on h_below and b_g.
    #[test]
    fn peephole_disabled_peepholes_ignore_cell_states() {
        let mut rng = Rng::new(41);
        let dim = 4;
        let mut p = PeepholeParams::init(dim, &mut rng);
        p.p_g1 = Tensor::zeros_vector(dim);
        p.p_g2 = Tensor::zeros_vector(dim);
        let below_a = random_state(dim, &mut rng);
        let left_a = random_state(dim, &mut rng);
        let below_b = StatePair::new(
            below_a.h.clone(),
            uniform_init(&mut rng, Shape::Vector(dim), 2.0).unwrap(),
        );
        let left_b = StatePair::new(
            left_a.h.clone(),
            uniform_init(&mut rng, Shape::Vector(dim), 2.0).unwrap(),
        );
        let (_, ga) = peephole_forward(&below_a, &left_a, &p).unwrap();
        let (_, gb) = peephole_forward(&below_b, &left_b, &p).unwrap();
        for (a, b) in ga
            .g
            .as_ref()
            .unwrap()
            .data()
            .iter()
            .zip(gb.g.as_ref().unwrap().data())
        {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_upstream_gradients_give_zero_grads() {
        let mut rng = Rng::new(51);
        let dim = 3;
        let p = CasParams::init(dim, LambdaSpec::trainable(dim), &mut rng);
        let below = random_state(dim, &mut rng);
        let left = random_state(dim, &mut rng);
        let (state, gates) = cas_forward(&below, &left, &p).unwrap();
        let zero = Tensor::zeros_vector(dim);
        let (grads, d_below, d_left) =
            cas_backward(&below, &left, &p, &state, &gates, &zero, &zero).unwrap();
        assert!(grads.base.w_i.data().iter().all(|&v| v == 0.0));
        assert!(grads.w_g.data().iter().all(|&v| v == 0.0));
        assert!(grads.lambda_u.unwrap().data().iter().all(|&v| v == 0.0));
        assert!(d_below.dh.data().iter().all(|&v| v == 0.0));
        assert!(d_left.dc.data().iter().all(|&v| v == 0.0));
    }

    // lambda = 0: gradients with respect to the shared LSTM parameters
    // equal the plain backward gradients on the reduced instance.
    #[test]
    fn cas_lambda_zero_backward_matches_plain() {
        let mut rng = Rng::new(52);
        for _ in 0..10 {
            let dim = 1 + rng.index(4);
            let shared = random_lstm(dim, &mut rng);
            let cas = cas_from_shared(&shared, LambdaSpec::constant(0.0, dim).unwrap(), &mut rng);
            let below = random_state(dim, &mut rng);
            let left = random_state(dim, &mut rng);
            let dh = uniform_init(&mut rng, Shape::Vector(dim), 1.0).unwrap();
            let dc = uniform_init(&mut rng, Shape::Vector(dim), 1.0).unwrap();

            let (state, gates) = cas_forward(&below, &left, &cas).unwrap();
            let (cas_grads, d_below, d_left_cas) =
                cas_backward(&below, &left, &cas, &state, &gates, &dh, &dc).unwrap();

            let (pstate, pgates) = lstm_forward(&below.h, &left, &shared).unwrap();
            let (plain_grads, dx, d_left_plain) =
                lstm_backward(&below.h, &left, &shared, &pstate, &pgates, &dh, &dc).unwrap();

            for ((_, a), (_, b)) in cas_grads.base.entries().into_iter().zip(plain_grads.entries())
            {
                for (x, y) in a.data().iter().zip(b.data()) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
            assert!(cas_grads.w_g.data().iter().all(|&v| v == 0.0));
            for (x, y) in d_below.dh.data().iter().zip(dx.data()) {
                assert!((x - y).abs() < 1e-12);
            }
            assert!(d_below.dc.data().iter().all(|&v| v == 0.0));
            for (x, y) in d_left_cas.dc.data().iter().zip(d_left_plain.dc.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn trainable_lambda_realizes_half_at_init() {
        let spec = LambdaSpec::<f64>::trainable(3);
        let lam = spec.realized().unwrap();
        for &v in lam.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn real_helper_round_trips() {
        let x: f64 = real::<f64>(0.25);
        assert_eq!(x, 0.25);
    }
}
