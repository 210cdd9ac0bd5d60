//! Feature functions over sentence vectors and the MLP classification
//! head: `P(y | X) = softmax(W_c MLP(phi(...)))`.
//!
//! Two-sentence tasks combine the encoded pair with one of two matching
//! features before the MLP:
//!
//! ```text
//! phi_nli(s1, s2) = s1 (+) s2 (+) |s1 - s2| (+) (s1 * s2)    length 4d
//! phi_pi (s1, s2) =               |s1 - s2| (+) (s1 * s2)    length 2d
//! ```
//!
//! Single-sentence tasks feed the sentence vector straight through. Hidden
//! layers use ReLU; dropout masks are generated by the caller so the
//! functions here stay pure.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{matvec, matvec_t, add_outer, relu, softmax, uniform_init, xavier_bound};
use crate::tensor::{Scalar, Shape, Tensor};

/// Which feature function feeds the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    Nli,
    Pi,
    Single,
}

impl FeatureKind {
    pub fn is_pair(&self) -> bool {
        !matches!(self, FeatureKind::Single)
    }

    /// Feature length for sentence vectors of dimension `d`.
    pub fn output_dim(&self, d: usize) -> usize {
        match self {
            FeatureKind::Nli => 4 * d,
            FeatureKind::Pi => 2 * d,
            FeatureKind::Single => d,
        }
    }
}

fn check_pair<T: Scalar>(op: &'static str, s1: &Tensor<T>, s2: &Tensor<T>) -> Result<()> {
    if s1.shape() != s2.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: s1.shape(),
            rhs: s2.shape(),
        });
    }
    Ok(())
}

/// `s1 (+) s2 (+) |s1 - s2| (+) (s1 * s2)`.
pub fn phi_nli<T: Scalar>(s1: &Tensor<T>, s2: &Tensor<T>) -> Result<Tensor<T>> {
    check_pair("phi_nli", s1, s2)?;
    let mut out = Vec::with_capacity(4 * s1.len());
    out.extend_from_slice(s1.data());
    out.extend_from_slice(s2.data());
    out.extend(s1.data().iter().zip(s2.data()).map(|(&a, &b)| (a - b).abs()));
    out.extend(s1.data().iter().zip(s2.data()).map(|(&a, &b)| a * b));
    Ok(Tensor::vector(out))
}

/// `|s1 - s2| (+) (s1 * s2)`; symmetric in its arguments.
pub fn phi_pi<T: Scalar>(s1: &Tensor<T>, s2: &Tensor<T>) -> Result<Tensor<T>> {
    check_pair("phi_pi", s1, s2)?;
    let mut out = Vec::with_capacity(2 * s1.len());
    out.extend(s1.data().iter().zip(s2.data()).map(|(&a, &b)| (a - b).abs()));
    out.extend(s1.data().iter().zip(s2.data()).map(|(&a, &b)| a * b));
    Ok(Tensor::vector(out))
}

/// The sentence representation itself.
pub fn phi_single<T: Scalar>(s: &Tensor<T>) -> Tensor<T> {
    s.clone()
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Gradients of `phi_nli` with respect to both sentence vectors. Uses the
/// subgradient `sign(0) = 0` for the absolute-difference block.
pub fn phi_nli_backward<T: Scalar>(
    s1: &Tensor<T>,
    s2: &Tensor<T>,
    d_phi: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let d = s1.len();
    let dp = d_phi.data();
    let (a, rest) = dp.split_at(d);
    let (b, rest) = rest.split_at(d);
    let (c, e) = rest.split_at(d);
    let mut ds1 = Vec::with_capacity(d);
    let mut ds2 = Vec::with_capacity(d);
    for j in 0..d {
        let sg = sign(s1.data()[j] - s2.data()[j]);
        ds1.push(a[j] + c[j] * sg + e[j] * s2.data()[j]);
        ds2.push(b[j] - c[j] * sg + e[j] * s1.data()[j]);
    }
    (Tensor::vector(ds1), Tensor::vector(ds2))
}

/// Gradients of `phi_pi` with respect to both sentence vectors.
pub fn phi_pi_backward<T: Scalar>(
    s1: &Tensor<T>,
    s2: &Tensor<T>,
    d_phi: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let d = s1.len();
    let dp = d_phi.data();
    let (c, e) = dp.split_at(d);
    let mut ds1 = Vec::with_capacity(d);
    let mut ds2 = Vec::with_capacity(d);
    for j in 0..d {
        let sg = sign(s1.data()[j] - s2.data()[j]);
        ds1.push(c[j] * sg + e[j] * s2.data()[j]);
        ds2.push(-c[j] * sg + e[j] * s1.data()[j]);
    }
    (Tensor::vector(ds1), Tensor::vector(ds2))
}

/// A weight matrix and bias vector.
#[derive(Clone, Debug)]
pub struct Affine<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> Affine<T> {
    fn init(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        Affine {
            w: uniform_init(rng, Shape::Matrix(out_dim, in_dim), xavier_bound(in_dim, out_dim))
                .unwrap(),
            b: Tensor::zeros_vector(out_dim),
        }
    }

    fn zeros_like(&self) -> Self {
        Affine {
            w: Tensor::zeros(self.w.shape()),
            b: Tensor::zeros(self.b.shape()),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.w.add_assign(&other.w);
        self.b.add_assign(&other.b);
    }

    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(matvec(&self.w, x)?.add(&self.b))
    }
}

/// MLP head: zero or more ReLU hidden layers, then a linear projection to
/// class logits.
#[derive(Clone, Debug)]
pub struct MlpParams<T> {
    pub hidden: Vec<Affine<T>>,
    pub out: Affine<T>,
}

impl<T: Scalar> MlpParams<T> {
    pub fn init(
        input_dim: usize,
        hidden_dims: &[usize],
        num_classes: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidConfig(alloc::format!(
                "classifier needs at least two classes, got {num_classes}"
            )));
        }
        let mut hidden = Vec::with_capacity(hidden_dims.len());
        let mut prev = input_dim;
        for &d in hidden_dims {
            hidden.push(Affine::init(prev, d, rng));
            prev = d;
        }
        Ok(MlpParams {
            hidden,
            out: Affine::init(prev, num_classes, rng),
        })
    }

    pub fn zeros_like(&self) -> Self {
        MlpParams {
            hidden: self.hidden.iter().map(|a| a.zeros_like()).collect(),
            out: self.out.zeros_like(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.hidden.iter_mut().zip(other.hidden.iter()) {
            a.add_assign(b);
        }
        self.out.add_assign(&other.out);
    }

    pub fn input_dim(&self) -> usize {
        match self.hidden.first() {
            Some(a) => a.w.cols(),
            None => self.out.w.cols(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.out.w.rows()
    }

    pub fn num_scalars(&self) -> u64 {
        let mut total = (self.out.w.len() + self.out.b.len()) as u64;
        for a in &self.hidden {
            total += (a.w.len() + a.b.len()) as u64;
        }
        total
    }
}

/// Class logits with their softmax probabilities.
#[derive(Clone, Debug)]
pub struct ClassLogits<T> {
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
}

/// Cache for the MLP backward pass. Dropout masks, when present, were
/// applied to the layer inputs (index 0: features; index k>0: output of
/// hidden layer k-1).
#[derive(Clone, Debug)]
pub struct MlpTrace<T> {
    pub inputs: Vec<Tensor<T>>,
    pub masks: Vec<Option<Tensor<T>>>,
    pub probs: Tensor<T>,
}

/// Plain inference-mode forward.
pub fn mlp_forward<T: Scalar>(
    features: &Tensor<T>,
    params: &MlpParams<T>,
) -> Result<ClassLogits<T>> {
    Ok(mlp_forward_traced(features, params, &[])?.0)
}

/// Forward pass that records everything needed for backward. `masks` holds
/// one optional inverted-dropout mask per layer input (features first,
/// then each hidden output); pass an empty slice to disable dropout.
pub fn mlp_forward_traced<T: Scalar>(
    features: &Tensor<T>,
    params: &MlpParams<T>,
    masks: &[Option<Tensor<T>>],
) -> Result<(ClassLogits<T>, MlpTrace<T>)> {
    if features.shape() != Shape::Vector(params.input_dim()) {
        return Err(Error::ShapeMismatch {
            op: "mlp input",
            lhs: Shape::Vector(params.input_dim()),
            rhs: features.shape(),
        });
    }
    let num_layers = params.hidden.len() + 1;
    let mut inputs = Vec::with_capacity(num_layers);
    let mut used_masks = Vec::with_capacity(num_layers);
    let mut cur = features.clone();
    for k in 0..num_layers {
        let mask = masks.get(k).cloned().flatten();
        if let Some(m) = &mask {
            cur = cur.mul(m);
        }
        inputs.push(cur.clone());
        used_masks.push(mask);
        if k < params.hidden.len() {
            cur = relu(&params.hidden[k].apply(&cur)?);
        }
    }
    let logits = params.out.apply(inputs.last().expect("at least one layer"))?;
    let probs = softmax(&logits)?;
    Ok((
        ClassLogits {
            logits,
            probs: probs.clone(),
        },
        MlpTrace {
            inputs,
            masks: used_masks,
            probs,
        },
    ))
}

/// Backward pass given the gradient on the logits. Returns parameter
/// gradients and the gradient with respect to the (pre-dropout) features.
pub fn mlp_backward<T: Scalar>(
    params: &MlpParams<T>,
    trace: &MlpTrace<T>,
    d_logits: &Tensor<T>,
) -> Result<(MlpParams<T>, Tensor<T>)> {
    let mut grads = params.zeros_like();
    let last_input = trace.inputs.last().expect("trace has inputs");
    add_outer(&mut grads.out.w, d_logits, last_input);
    grads.out.b.add_assign(d_logits);
    let mut d_cur = matvec_t(&params.out.w, d_logits)?;

    for k in (0..params.hidden.len()).rev() {
        // d_cur is the gradient on relu(z_k); the layer input saw dropout
        // before the affine map.
        let input = &trace.inputs[k + 1];
        let dz = d_cur.zip(input, |d, a| if a > T::zero() { d } else { T::zero() });
        let pre_relu_input = &trace.inputs[k];
        add_outer(&mut grads.hidden[k].w, &dz, pre_relu_input);
        grads.hidden[k].b.add_assign(&dz);
        d_cur = matvec_t(&params.hidden[k].w, &dz)?;
        if let Some(m) = &trace.masks[k + 1] {
            d_cur = d_cur.mul(m);
        }
    }
    if let Some(m) = &trace.masks[0] {
        d_cur = d_cur.mul(m);
    }
    Ok((grads, d_cur))
}

/// Negative log-likelihood of the gold label.
pub fn cross_entropy<T: Scalar>(probs: &Tensor<T>, gold: usize) -> Result<T> {
    if gold >= probs.len() {
        return Err(Error::IndexOutOfRange {
            what: "label",
            index: gold,
            bound: probs.len(),
        });
    }
    Ok(-probs.data()[gold].ln())
}

/// Gradient of the cross-entropy loss with respect to the logits:
/// `p - onehot(gold)`.
pub fn cross_entropy_grad<T: Scalar>(probs: &Tensor<T>, gold: usize) -> Result<Tensor<T>> {
    if gold >= probs.len() {
        return Err(Error::IndexOutOfRange {
            what: "label",
            index: gold,
            bound: probs.len(),
        });
    }
    let mut d = probs.clone();
    d.data_mut()[gold] = d.data()[gold] - T::one();
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::uniform_init;

    fn vecf(v: &[f64]) -> Tensor<f64> {
        Tensor::vector(v.to_vec())
    }

    #[test]
    fn phi_nli_examples() {
        let out = phi_nli(&vecf(&[1.0, 2.0]), &vecf(&[3.0, 1.0])).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 1.0, 3.0, 2.0]);

        let s = vecf(&[0.5, -2.0]);
        let same = phi_nli(&s, &s).unwrap();
        assert_eq!(same.data(), &[0.5, -2.0, 0.5, -2.0, 0.0, 0.0, 0.25, 4.0]);

        let z = vecf(&[0.0, 0.0, 0.0]);
        assert_eq!(phi_nli(&z, &z).unwrap().data(), &[0.0; 12]);
        assert!(phi_nli(&z, &vecf(&[1.0])).is_err());
    }

    #[test]
    fn phi_pi_examples_and_symmetry() {
        let out = phi_pi(&vecf(&[1.0, 2.0]), &vecf(&[3.0, 1.0])).unwrap();
        assert_eq!(out.data(), &[2.0, 1.0, 3.0, 2.0]);

        let mut rng = Rng::new(13);
        for _ in 0..100 {
            let d = 1 + rng.index(6);
            let a = uniform_init::<f64>(&mut rng, Shape::Vector(d), 2.0).unwrap();
            let b = uniform_init::<f64>(&mut rng, Shape::Vector(d), 2.0).unwrap();
            assert_eq!(phi_pi(&a, &b).unwrap(), phi_pi(&b, &a).unwrap());
            assert_eq!(phi_pi(&a, &b).unwrap().len(), 2 * d);
            assert_eq!(phi_nli(&a, &b).unwrap().len(), 4 * d);
        }

        let s = vecf(&[2.0, -3.0]);
        assert_eq!(phi_pi(&s, &s).unwrap().data(), &[0.0, 0.0, 4.0, 9.0]);
    }

    #[test]
    fn phi_single_is_identity() {
        let s = vecf(&[1.0, 2.0]);
        assert_eq!(phi_single(&s), s);
        let z = Tensor::<f64>::zeros_vector(4);
        assert_eq!(phi_single(&z), z);
        let mut rng = Rng::new(14);
        let r = uniform_init::<f64>(&mut rng, Shape::Vector(9), 1.0).unwrap();
        assert_eq!(phi_single(&r).len(), 9);
    }

    #[test]
    fn mlp_zero_params_uniform_probabilities() {
        let params = MlpParams::<f64> {
            hidden: vec![Affine {
                w: Tensor::zeros_matrix(3, 2),
                b: Tensor::zeros_vector(3),
            }],
            out: Affine {
                w: Tensor::zeros_matrix(2, 3),
                b: Tensor::zeros_vector(2),
            },
        };
        let out = mlp_forward(&vecf(&[0.4, -1.0]), &params).unwrap();
        assert_eq!(out.probs.data(), &[0.5, 0.5]);
    }

    #[test]
    fn mlp_closed_form_logits() {
        // One hidden layer arranged so the logits come out as [ln 3, 0].
        let ln3 = 3.0f64.ln();
        let params = MlpParams::<f64> {
            hidden: vec![Affine {
                w: Tensor::matrix(1, 1, vec![1.0]).unwrap(),
                b: Tensor::vector(vec![0.0]),
            }],
            out: Affine {
                w: Tensor::matrix(2, 1, vec![0.0, 0.0]).unwrap(),
                b: Tensor::vector(vec![ln3, 0.0]),
            },
        };
        let out = mlp_forward(&vecf(&[1.0]), &params).unwrap();
        assert!((out.probs.data()[0] - 0.75).abs() < 1e-12);
        assert!((out.probs.data()[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn mlp_probabilities_sum_to_one() {
        let mut rng = Rng::new(15);
        for _ in 0..20 {
            let params = MlpParams::<f64>::init(5, &[7], 4, &mut rng).unwrap();
            let x = uniform_init(&mut rng, Shape::Vector(5), 3.0).unwrap();
            let out = mlp_forward(&x, &params).unwrap();
            assert!((out.probs.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let certain = vecf(&[1.0, 0.0]);
        assert_eq!(cross_entropy(&certain, 0).unwrap(), 0.0);

        let uniform = vecf(&[0.25; 4]);
        assert!((cross_entropy(&uniform, 2).unwrap() - 4.0f64.ln()).abs() < 1e-15);

        assert!(cross_entropy(&uniform, 4).is_err());
    }

    // Finite differences on the logits verify the fused softmax +
    // cross-entropy gradient p - onehot.
    #[test]
    fn cross_entropy_grad_matches_finite_differences() {
        let mut rng = Rng::new(16);
        let eps = 1e-6;
        for _ in 0..20 {
            let n = 2 + rng.index(4);
            let logits = uniform_init::<f64>(&mut rng, Shape::Vector(n), 2.0).unwrap();
            let gold = rng.index(n);
            let probs = softmax(&logits).unwrap();
            let analytic = cross_entropy_grad(&probs, gold).unwrap();
            for j in 0..n {
                let mut plus = logits.clone();
                plus.data_mut()[j] += eps;
                let mut minus = logits.clone();
                minus.data_mut()[j] -= eps;
                let lp = cross_entropy(&softmax(&plus).unwrap(), gold).unwrap();
                let lm = cross_entropy(&softmax(&minus).unwrap(), gold).unwrap();
                let numeric = (lp - lm) / (2.0 * eps);
                assert!((analytic.data()[j] - numeric).abs() < 1e-8);
            }
        }
    }

    // Finite differences over every MLP parameter.
    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut rng = Rng::new(17);
        let mut params = MlpParams::<f64>::init(4, &[5, 3], 3, &mut rng).unwrap();
        let x = uniform_init(&mut rng, Shape::Vector(4), 1.0).unwrap();
        let gold = 1usize;

        let loss = |p: &MlpParams<f64>, x: &Tensor<f64>| -> f64 {
            let out = mlp_forward(x, p).unwrap();
            cross_entropy(&out.probs, gold).unwrap()
        };

        let (out, trace) = mlp_forward_traced(&x, &params, &[]).unwrap();
        let d_logits = cross_entropy_grad(&out.probs, gold).unwrap();
        let (grads, d_x) = mlp_backward(&params, &trace, &d_logits).unwrap();

        let eps = 1e-6;
        // Parameter gradients, every entry of every tensor.
        let flat_grads: Vec<f64> = grads
            .hidden
            .iter()
            .flat_map(|a| a.w.data().iter().chain(a.b.data()).copied().collect::<Vec<_>>())
            .chain(grads.out.w.data().iter().copied())
            .chain(grads.out.b.data().iter().copied())
            .collect();
        let mut idx = 0;
        for layer in 0..=params.hidden.len() {
            for part in 0..2 {
                let len = {
                    let t = select(&mut params, layer, part);
                    t.len()
                };
                for j in 0..len {
                    let orig = select(&mut params, layer, part).data()[j];
                    select(&mut params, layer, part).data_mut()[j] = orig + eps;
                    let lp = loss(&params, &x);
                    select(&mut params, layer, part).data_mut()[j] = orig - eps;
                    let lm = loss(&params, &x);
                    select(&mut params, layer, part).data_mut()[j] = orig;
                    let numeric = (lp - lm) / (2.0 * eps);
                    let analytic = flat_grads[idx];
                    idx += 1;
                    let rel =
                        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
                    assert!(rel < 1e-6, "layer {layer} part {part} entry {j}");
                }
            }
        }

        // Input gradient.
        for j in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[j] += eps;
            let mut minus = x.clone();
            minus.data_mut()[j] -= eps;
            let numeric = (loss(&params, &plus) - loss(&params, &minus)) / (2.0 * eps);
            let analytic = d_x.data()[j];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-6);
        }
    }

    fn select<'a>(p: &'a mut MlpParams<f64>, layer: usize, part: usize) -> &'a mut Tensor<f64> {
        let a = if layer < p.hidden.len() {
            &mut p.hidden[layer]
        } else {
            &mut p.out
        };
        if part == 0 {
            &mut a.w
        } else {
            &mut a.b
        }
    }

    // One small gradient step on a fixed example lowers the loss.
    #[test]
    fn single_gradient_step_decreases_loss() {
        let mut rng = Rng::new(18);
        let mut params = MlpParams::<f64>::init(3, &[4], 2, &mut rng).unwrap();
        let x = uniform_init(&mut rng, Shape::Vector(3), 1.0).unwrap();
        let gold = 0usize;

        let (out, trace) = mlp_forward_traced(&x, &params, &[]).unwrap();
        let before = cross_entropy(&out.probs, gold).unwrap();
        let d_logits = cross_entropy_grad(&out.probs, gold).unwrap();
        let (grads, _) = mlp_backward(&params, &trace, &d_logits).unwrap();

        let lr = 1e-3;
        for (a, g) in params.hidden.iter_mut().zip(grads.hidden.iter()) {
            a.w.add_assign(&g.w.scale(-lr));
            a.b.add_assign(&g.b.scale(-lr));
        }
        params.out.w.add_assign(&grads.out.w.scale(-lr));
        params.out.b.add_assign(&grads.out.b.scale(-lr));

        let after = cross_entropy(&mlp_forward(&x, &params).unwrap().probs, gold).unwrap();
        assert!(after < before);
    }
}
