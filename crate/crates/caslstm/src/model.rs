//! The full classification model: embedding, one or two encoder
//! directions (shared across the sentences of a pair task), a feature
//! function, and the MLP head. Parameters are reachable through a stable
//! named registry so the optimizer, checkpointing, and gradient checking
//! all walk the same ordered list.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::cell::{CasGrads, LambdaSpec, LayerGrads, LayerParams};
use crate::classifier::{
    cross_entropy, cross_entropy_grad, mlp_backward, mlp_forward_traced, phi_nli,
    phi_nli_backward, phi_pi, phi_pi_backward, phi_single, FeatureKind, MlpParams, MlpTrace,
};
use crate::data::LabeledExample;
use crate::encoder::{
    embed, encode_backward, encode_sequence, pool_backward, pool_traced, reverse_rows,
    split_cols, EmbeddingTable, EncoderConfig, EncoderParams, HiddenSequence, PoolTrace,
};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{dropout_mask, Scalar, Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub feature: FeatureKind,
    pub mlp_hidden: Vec<usize>,
    pub num_classes: usize,
    pub vocab_size: usize,
    pub embedding_trainable: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least two classes, got {}",
                self.num_classes
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::InvalidConfig(
                "vocabulary must hold at least the reserved tokens".into(),
            ));
        }
        if self.mlp_hidden.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig(
                "mlp hidden widths must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Input width of the MLP head.
    pub fn feature_dim(&self) -> usize {
        self.feature.output_dim(self.encoder.sentence_dim())
    }
}

/// Dropout rates and the stream that draws the masks; present only during
/// training forward passes.
pub struct DropoutPlan<'a> {
    pub embedding_rate: f64,
    pub mlp_rate: f64,
    pub rng: &'a mut Rng,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub embedding: EmbeddingTable<T>,
    pub encoder_fwd: EncoderParams<T>,
    pub encoder_bwd: Option<EncoderParams<T>>,
    pub mlp: MlpParams<T>,
}

/// Gradient container mirroring [`Model`]'s parameter registry.
#[derive(Clone, Debug)]
pub struct ModelGrads<T> {
    pub embedding: Tensor<T>,
    pub encoder_fwd: Vec<LayerGrads<T>>,
    pub encoder_bwd: Option<Vec<LayerGrads<T>>>,
    pub mlp: MlpParams<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let embedding = EmbeddingTable::init(
            config.vocab_size,
            config.encoder.input_dim,
            config.embedding_trainable,
            rng,
        )?;
        let encoder_fwd = EncoderParams::init(&config.encoder, rng)?;
        let encoder_bwd = if config.encoder.bidirectional {
            Some(EncoderParams::init(&config.encoder, rng)?)
        } else {
            None
        };
        let mlp = MlpParams::init(
            config.feature_dim(),
            &config.mlp_hidden,
            config.num_classes,
            rng,
        )?;
        Ok(Model {
            config,
            embedding,
            encoder_fwd,
            encoder_bwd,
            mlp,
        })
    }

    pub fn zero_grads(&self) -> ModelGrads<T> {
        ModelGrads {
            embedding: Tensor::zeros(self.embedding.table.shape()),
            encoder_fwd: self.encoder_fwd.zeros_grads(),
            encoder_bwd: self.encoder_bwd.as_ref().map(|p| p.zeros_grads()),
            mlp: self.mlp.zeros_like(),
        }
    }

    /// Every parameter tensor with its stable registry name. Constant
    /// mixing vectors are configuration, not parameters, and do not
    /// appear; trainable ones appear as `*.lambda_u`.
    pub fn entries(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        out.push(("embedding".into(), &self.embedding.table));
        push_layers(&mut out, "enc_fwd", &self.encoder_fwd.layers);
        if let Some(bwd) = &self.encoder_bwd {
            push_layers(&mut out, "enc_bwd", &bwd.layers);
        }
        push_mlp(&mut out, &self.mlp);
        out
    }

    pub fn entries_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        out.push(("embedding".into(), &mut self.embedding.table));
        push_layers_mut(&mut out, "enc_fwd", &mut self.encoder_fwd.layers);
        if let Some(bwd) = &mut self.encoder_bwd {
            push_layers_mut(&mut out, "enc_bwd", &mut bwd.layers);
        }
        push_mlp_mut(&mut out, &mut self.mlp);
        out
    }

    /// Whether the named registry entry receives optimizer updates.
    pub fn is_trainable(&self, name: &str) -> bool {
        name != "embedding" || self.embedding.trainable
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries_mut()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn num_params(&self) -> u64 {
        self.entries().iter().map(|(_, t)| t.len() as u64).sum()
    }

    fn encode_one(
        &self,
        tokens: &[usize],
        dropout: Option<(f64, &mut Rng)>,
    ) -> Result<SentencePass<T>> {
        let embedded = embed(tokens, &self.embedding)?;
        let (x, emb_mask) = match dropout {
            Some((rate, rng)) if rate > 0.0 => {
                let mask = dropout_mask(embedded.shape(), rate, rng);
                (embedded.mul(&mask), Some(mask))
            }
            _ => (embedded, None),
        };
        let seq = encode_sequence(&x, &self.encoder_fwd, self.encoder_bwd.as_ref())?;
        let rows = seq.rows();
        let mask = vec![true; rows.rows()];
        let (pooled, pool) = pool_traced(&rows, self.config.encoder.pooling, &mask)?;
        Ok(SentencePass {
            tokens: tokens.to_vec(),
            x,
            emb_mask,
            seq,
            pool,
            pooled,
        })
    }

    /// Full forward pass over one example. `dropout` enables training-mode
    /// masking; pass `None` for inference and gradient checking.
    pub fn forward(
        &self,
        example: &LabeledExample,
        mut dropout: Option<DropoutPlan<'_>>,
    ) -> Result<ForwardPass<T>> {
        if example.label >= self.config.num_classes {
            return Err(Error::IndexOutOfRange {
                what: "label",
                index: example.label,
                bound: self.config.num_classes,
            });
        }
        let s1 = self.encode_one(
            &example.tokens,
            dropout.as_mut().map(|d| (d.embedding_rate, &mut *d.rng)),
        )?;
        let s2 = if self.config.feature.is_pair() {
            let second = example.tokens2.as_ref().ok_or(Error::InvalidConfig(
                "pair feature function needs a second sentence".into(),
            ))?;
            Some(self.encode_one(
                second,
                dropout.as_mut().map(|d| (d.embedding_rate, &mut *d.rng)),
            )?)
        } else {
            None
        };

        let features = match self.config.feature {
            FeatureKind::Nli => phi_nli(&s1.pooled, &s2.as_ref().expect("pair").pooled)?,
            FeatureKind::Pi => phi_pi(&s1.pooled, &s2.as_ref().expect("pair").pooled)?,
            FeatureKind::Single => phi_single(&s1.pooled),
        };

        let mlp_masks: Vec<Option<Tensor<T>>> = match dropout.as_mut() {
            Some(d) if d.mlp_rate > 0.0 => {
                let mut masks = vec![Some(dropout_mask(
                    Shape::Vector(features.len()),
                    d.mlp_rate,
                    d.rng,
                ))];
                for &width in &self.config.mlp_hidden {
                    masks.push(Some(dropout_mask(Shape::Vector(width), d.mlp_rate, d.rng)));
                }
                masks
            }
            _ => Vec::new(),
        };
        let (logits, mlp_trace) = mlp_forward_traced(&features, &self.mlp, &mlp_masks)?;
        let loss = cross_entropy(&logits.probs, example.label)?;
        let predicted = argmax(&logits.probs);
        Ok(ForwardPass {
            loss,
            probs: logits.probs,
            predicted,
            trace: ModelTrace {
                s1,
                s2,
                mlp: mlp_trace,
                gold: example.label,
            },
        })
    }

    /// Loss of one example in inference mode; the scalar function that
    /// finite differences probe.
    pub fn loss(&self, example: &LabeledExample) -> Result<T> {
        Ok(self.forward(example, None)?.loss)
    }

    pub fn predict(&self, example: &LabeledExample) -> Result<usize> {
        Ok(self.forward(example, None)?.predicted)
    }

    /// Exact reverse-mode gradients for the pass returned by
    /// [`Model::forward`].
    pub fn backward(&self, pass: &ForwardPass<T>) -> Result<ModelGrads<T>> {
        let mut grads = self.zero_grads();
        let trace = &pass.trace;
        let d_logits = cross_entropy_grad(&pass.probs, trace.gold)?;
        let (mlp_grads, d_features) = mlp_backward(&self.mlp, &trace.mlp, &d_logits)?;
        grads.mlp.add_assign(&mlp_grads);

        match self.config.feature {
            FeatureKind::Nli => {
                let s2 = trace.s2.as_ref().expect("pair");
                let (d1, d2) = phi_nli_backward(&trace.s1.pooled, &s2.pooled, &d_features);
                self.backprop_sentence(&mut grads, &trace.s1, &d1)?;
                self.backprop_sentence(&mut grads, s2, &d2)?;
            }
            FeatureKind::Pi => {
                let s2 = trace.s2.as_ref().expect("pair");
                let (d1, d2) = phi_pi_backward(&trace.s1.pooled, &s2.pooled, &d_features);
                self.backprop_sentence(&mut grads, &trace.s1, &d1)?;
                self.backprop_sentence(&mut grads, s2, &d2)?;
            }
            FeatureKind::Single => {
                self.backprop_sentence(&mut grads, &trace.s1, &d_features)?;
            }
        }
        Ok(grads)
    }

    fn backprop_sentence(
        &self,
        grads: &mut ModelGrads<T>,
        sp: &SentencePass<T>,
        d_pooled: &Tensor<T>,
    ) -> Result<()> {
        let t_len = sp.x.rows();
        let d_rows = pool_backward(&sp.pool, d_pooled, t_len);
        let (d_fwd_h, d_bwd_h) = if self.encoder_bwd.is_some() {
            let (a, b) = split_cols(&d_rows, self.config.encoder.dim);
            (a, Some(b))
        } else {
            (d_rows, None)
        };

        let (g_fwd, mut d_x) =
            encode_backward(&sp.x, &self.encoder_fwd, &sp.seq.trace, &d_fwd_h)?;
        for (acc, g) in grads.encoder_fwd.iter_mut().zip(&g_fwd) {
            acc.add_assign(g);
        }

        if let Some(d_bh) = d_bwd_h {
            let bwd_params = self.encoder_bwd.as_ref().expect("bidirectional");
            let trace_bwd = sp.seq.trace_backward.as_ref().expect("bidirectional");
            // The backward direction ran over the reversed input, so its
            // hidden gradient and input gradient both need re-reversal.
            let x_rev = reverse_rows(&sp.x);
            let (g_bwd, d_x_rev) =
                encode_backward(&x_rev, bwd_params, trace_bwd, &reverse_rows(&d_bh))?;
            let acc_bwd = grads.encoder_bwd.as_mut().expect("bidirectional");
            for (acc, g) in acc_bwd.iter_mut().zip(&g_bwd) {
                acc.add_assign(g);
            }
            d_x.add_assign(&reverse_rows(&d_x_rev));
        }

        if let Some(mask) = &sp.emb_mask {
            d_x = d_x.mul(mask);
        }
        if self.embedding.trainable {
            for (t, &token) in sp.tokens.iter().enumerate() {
                let src = d_x.row(t).to_vec();
                for (o, v) in grads.embedding.row_mut(token).iter_mut().zip(src) {
                    *o = *o + v;
                }
            }
        }
        Ok(())
    }
}

impl<T: Scalar> ModelGrads<T> {
    pub fn entries(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        out.push(("embedding".into(), &self.embedding));
        push_grad_layers(&mut out, "enc_fwd", &self.encoder_fwd);
        if let Some(bwd) = &self.encoder_bwd {
            push_grad_layers(&mut out, "enc_bwd", bwd);
        }
        push_mlp(&mut out, &self.mlp);
        out
    }

    pub fn entries_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        out.push(("embedding".into(), &mut self.embedding));
        push_grad_layers_mut(&mut out, "enc_fwd", &mut self.encoder_fwd);
        if let Some(bwd) = &mut self.encoder_bwd {
            push_grad_layers_mut(&mut out, "enc_bwd", bwd);
        }
        push_mlp_mut(&mut out, &mut self.mlp);
        out
    }

    pub fn add_assign(&mut self, other: &ModelGrads<T>) {
        self.embedding.add_assign(&other.embedding);
        for (a, b) in self.encoder_fwd.iter_mut().zip(&other.encoder_fwd) {
            a.add_assign(b);
        }
        if let (Some(a), Some(b)) = (self.encoder_bwd.as_mut(), other.encoder_bwd.as_ref()) {
            for (x, y) in a.iter_mut().zip(b) {
                x.add_assign(y);
            }
        }
        self.mlp.add_assign(&other.mlp);
    }

    pub fn scale_assign(&mut self, k: T) {
        for (_, t) in self.entries_mut() {
            t.scale_assign(k);
        }
    }
}

/// One encoded sentence with everything its backward pass needs.
#[derive(Clone, Debug)]
pub struct SentencePass<T> {
    tokens: Vec<usize>,
    x: Tensor<T>,
    emb_mask: Option<Tensor<T>>,
    pub seq: HiddenSequence<T>,
    pool: PoolTrace,
    pub pooled: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ModelTrace<T> {
    pub s1: SentencePass<T>,
    pub s2: Option<SentencePass<T>>,
    mlp: MlpTrace<T>,
    gold: usize,
}

/// Result of a forward pass, holding the cache for [`Model::backward`].
#[derive(Clone, Debug)]
pub struct ForwardPass<T> {
    pub loss: T,
    pub probs: Tensor<T>,
    pub predicted: usize,
    pub trace: ModelTrace<T>,
}

pub(crate) fn argmax<T: Scalar>(probs: &Tensor<T>) -> usize {
    let mut best = 0;
    for (i, &v) in probs.data().iter().enumerate() {
        if v > probs.data()[best] {
            best = i;
        }
    }
    best
}

fn push_layers<'a, T: Scalar>(
    out: &mut Vec<(String, &'a Tensor<T>)>,
    prefix: &str,
    layers: &'a [LayerParams<T>],
) {
    for (l, layer) in layers.iter().enumerate() {
        match layer {
            LayerParams::Plain(p) => {
                for (name, t) in p.entries() {
                    out.push((format!("{prefix}.{l}.{name}"), t));
                }
            }
            LayerParams::Cas(p) => {
                for (name, t) in p.base.entries() {
                    out.push((format!("{prefix}.{l}.{name}"), t));
                }
                out.push((format!("{prefix}.{l}.w_g"), &p.w_g));
                out.push((format!("{prefix}.{l}.u_g"), &p.u_g));
                out.push((format!("{prefix}.{l}.b_g"), &p.b_g));
                if let LambdaSpec::Trainable(u) = &p.lambda {
                    out.push((format!("{prefix}.{l}.lambda_u"), u));
                }
            }
            LayerParams::Peephole(p) => {
                for (name, t) in p.base.entries() {
                    out.push((format!("{prefix}.{l}.{name}"), t));
                }
                out.push((format!("{prefix}.{l}.w_g"), &p.w_g));
                out.push((format!("{prefix}.{l}.b_g"), &p.b_g));
                out.push((format!("{prefix}.{l}.p_g1"), &p.p_g1));
                out.push((format!("{prefix}.{l}.p_g2"), &p.p_g2));
            }
        }
    }
}

fn push_layers_mut<'a, T: Scalar>(
    out: &mut Vec<(String, &'a mut Tensor<T>)>,
    prefix: &str,
    layers: &'a mut [LayerParams<T>],
) {
    for (l, layer) in layers.iter_mut().enumerate() {
        match layer {
            LayerParams::Plain(p) => {
                for (name, t) in p.entries_mut() {
                    out.push((format!("{prefix}.{l}.{name}"), t));
                }
            }
            LayerParams::Cas(p) => {
                for (name, t) in p.base.entries_mut() {
                    out.push((format!("{prefix}.{l}.{name}"), t));
                }
                out.push((format!("{prefix}.{l}.w_g"), &mut p.w_g));
                out.push((format!("{prefix}.{l}.u_g"), &mut p.u_g));
                out.push((format!("{prefix}.{l}.b_g"), &mut p.b_g));
                if let LambdaSpec::Trainable(u) = &mut p.lambda {
                    out.push((format!("{prefix}.{l}.lambda_u"), u));
                }
            }
            LayerParams::Peephole(p) => {
                for (name, t) in p.base.entries_mut() {
                    out.push((format!("{prefix}.{l}.{name}"), t));
                }
                out.push((format!("{prefix}.{l}.w_g"), &mut p.w_g));
                out.push((format!("{prefix}.{l}.b_g"), &mut p.b_g));
                out.push((format!("{prefix}.{l}.p_g1"), &mut p.p_g1));
                out.push((format!("{prefix}.{l}.p_g2"), &mut p.p_g2));
            }
        }
    }
}

fn push_grad_layers<'a, T: Scalar>(
    out: &mut Vec<(String, &'a Tensor<T>)>,
    prefix: &str,
    layers: &'a [LayerGrads<T>],
) {
    for (l, layer) in layers.iter().enumerate() {
        match layer {
            LayerGrads::Plain(p) => {
                for (name, t) in p.entries() {
                    out.push((format!("{prefix}.{l}.{name}"), t));
                }
            }
            LayerGrads::Cas(CasGrads {
                base,
                w_g,
                u_g,
                b_g,
                lambda_u,
            }) => {
                for (name, t) in base.entries() {
                    out.push((format!("{prefix}.{l}.{name}"), t));
                }
                out.push((format!("{prefix}.{l}.w_g"), w_g));
                out.push((format!("{prefix}.{l}.u_g"), u_g));
                out.push((format!("{prefix}.{l}.b_g"), b_g));
                if let Some(u) = lambda_u {
                    out.push((format!("{prefix}.{l}.lambda_u"), u));
                }
            }
            LayerGrads::Peephole(p) => {
                for (name, t) in p.base.entries() {
                    out.push((format!("{prefix}.{l}.{name}"), t));
                }
                out.push((format!("{prefix}.{l}.w_g"), &p.w_g));
                out.push((format!("{prefix}.{l}.b_g"), &p.b_g));
                out.push((format!("{prefix}.{l}.p_g1"), &p.p_g1));
                out.push((format!("{prefix}.{l}.p_g2"), &p.p_g2));
            }
        }
    }
}

fn push_grad_layers_mut<'a, T: Scalar>(
    out: &mut Vec<(String, &'a mut Tensor<T>)>,
    prefix: &str,
    layers: &'a mut [LayerGrads<T>],
) {
    for (l, layer) in layers.iter_mut().enumerate() {
        match layer {
            LayerGrads::Plain(p) => {
                for (name, t) in p.entries_mut() {
                    out.push((format!("{prefix}.{l}.{name}"), t));
                }
            }
            LayerGrads::Cas(CasGrads {
                base,
                w_g,
                u_g,
                b_g,
                lambda_u,
            }) => {
                for (name, t) in base.entries_mut() {
                    out.push((format!("{prefix}.{l}.{name}"), t));
                }
                out.push((format!("{prefix}.{l}.w_g"), w_g));
                out.push((format!("{prefix}.{l}.u_g"), u_g));
                out.push((format!("{prefix}.{l}.b_g"), b_g));
                if let Some(u) = lambda_u {
                    out.push((format!("{prefix}.{l}.lambda_u"), u));
                }
            }
            LayerGrads::Peephole(p) => {
                for (name, t) in p.base.entries_mut() {
                    out.push((format!("{prefix}.{l}.{name}"), t));
                }
                out.push((format!("{prefix}.{l}.w_g"), &mut p.w_g));
                out.push((format!("{prefix}.{l}.b_g"), &mut p.b_g));
                out.push((format!("{prefix}.{l}.p_g1"), &mut p.p_g1));
                out.push((format!("{prefix}.{l}.p_g2"), &mut p.p_g2));
            }
        }
    }
}

fn push_mlp<'a, T: Scalar>(out: &mut Vec<(String, &'a Tensor<T>)>, mlp: &'a MlpParams<T>) {
    for (k, a) in mlp.hidden.iter().enumerate() {
        out.push((format!("mlp.hidden{k}.w"), &a.w));
        out.push((format!("mlp.hidden{k}.b"), &a.b));
    }
    out.push(("mlp.out.w".into(), &mlp.out.w));
    out.push(("mlp.out.b".into(), &mlp.out.b));
}

fn push_mlp_mut<'a, T: Scalar>(
    out: &mut Vec<(String, &'a mut Tensor<T>)>,
    mlp: &'a mut MlpParams<T>,
) {
    for (k, a) in mlp.hidden.iter_mut().enumerate() {
        out.push((format!("mlp.hidden{k}.w"), &mut a.w));
        out.push((format!("mlp.hidden{k}.b"), &mut a.b));
    }
    out.push(("mlp.out.w".into(), &mut mlp.out.w));
    out.push(("mlp.out.b".into(), &mut mlp.out.b));
}
