//! Trainable parameters and the forward pass from raw embeddings to fused
//! latents and reconstructions.
//!
//! The model is plain value data. A forward pass binds every parameter to a
//! [`Tape`] with [`MixQuantModel::bind`], runs on the bound copy, and the
//! trainer writes updated values back through [`MixQuantModel::params_mut`].
//! Both walk parameters in the same canonical order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{InputDims, ItemRecord, NormStats};
use crate::error::{Error, Result};
use crate::numerics::{concat_cols, sum_vars, Tape, Tensor, Var};
use crate::quantize::{quantize_all, Codebook, ExpertKind, ExpertTag, Quantized};
use crate::router::{route_behavior, Routed};
use crate::scalar::Scalar;

/// Dense layer `x·W + b` with `W: in × out` and `b: 1 × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    /// Weights and bias uniform in `±1/√fan_in`.
    pub fn new<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<T> { (0..n).map(|_| T::lit(rng.random_range(-bound..=bound))).collect() };
        let weight = Tensor::from_vec(fan_in, fan_out, draw(fan_in * fan_out)).expect("sized buffer");
        let bias = Tensor::from_vec(1, fan_out, draw(fan_out)).expect("sized buffer");
        Self { weight, bias }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(fan_in, fan_out),
            bias: Tensor::zeros(1, fan_out),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Stack of linear layers with relu between them and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    layers: Vec<Linear<T>>,
}

impl<T: Scalar> Mlp<T> {
    /// `sizes = [in, hidden…, out]`; at least two entries.
    pub fn new<R: Rng>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        Self {
            layers: sizes.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect(),
        }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        Self {
            layers: sizes.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect(),
        }
    }

    /// Checks that layer shapes chain and every parameter is finite.
    pub fn from_layers(layers: Vec<Linear<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("mlp", "no layers"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.shape() != [1, l.out_dim()] {
                return Err(Error::shape(
                    "mlp",
                    format!("layer {i}: bias {:?} for {} outputs", l.bias.shape(), l.out_dim()),
                ));
            }
            if !(l.weight.is_finite() && l.bias.is_finite()) {
                return Err(Error::NonFinite(format!("mlp layer {i}")));
            }
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::shape(
                    "mlp",
                    format!("layer {i} emits {} but layer {} takes {}", w[0].out_dim(), i + 1, w[1].in_dim()),
                ));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Linear<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear<T>] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Linear::out_dim))
            .collect()
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> BoundMlp<'t, T> {
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.param(l.weight.clone()), tape.param(l.bias.clone())))
                .collect(),
        }
    }
}

/// An [`Mlp`] whose parameters live on a tape.
#[derive(Clone, Debug)]
pub struct BoundMlp<'t, T> {
    pub layers: Vec<(Var<'t, T>, Var<'t, T>)>,
}

impl<'t, T: Scalar> BoundMlp<'t, T> {
    pub fn forward(&self, x: Var<'t, T>) -> Var<'t, T> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(w).add_row(b);
            if i < last {
                h = h.relu();
            }
        }
        h
    }
}

/// Architecture of a [`MixQuantModel`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dims: InputDims,
    pub latent_dim: usize,
    pub codebook_size: usize,
    pub n_shared: usize,
    pub n_text: usize,
    pub n_vision: usize,
    pub n_behavior: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let InputDims { text, vision, behavior } = self.dims;
        if text == 0 || vision == 0 || behavior == 0 {
            return Err(Error::Config(format!("input dims must be positive, got {:?}", self.dims)));
        }
        if self.latent_dim == 0 || self.codebook_size == 0 {
            return Err(Error::Config("latent_dim and codebook_size must be positive".into()));
        }
        if self.n_shared == 0 || self.n_text == 0 || self.n_vision == 0 || self.n_behavior == 0 {
            return Err(Error::Config(format!(
                "every expert family needs at least one expert, got {}/{}/{}/{}",
                self.n_shared, self.n_text, self.n_vision, self.n_behavior
            )));
        }
        Ok(())
    }

    /// Semantic-ID length: one position per expert.
    pub fn sid_length(&self) -> usize {
        self.n_shared + self.n_text + self.n_vision + self.n_behavior
    }

    /// Expert tags in Semantic-ID position order.
    pub fn expert_tags(&self) -> Vec<ExpertTag> {
        [
            (ExpertKind::Shared, self.n_shared),
            (ExpertKind::Text, self.n_text),
            (ExpertKind::Vision, self.n_vision),
            (ExpertKind::Behavior, self.n_behavior),
        ]
        .into_iter()
        .flat_map(|(kind, n)| (0..n).map(move |i| ExpertTag::new(kind, i)))
        .collect()
    }

    /// First Semantic-ID position held by a behavior expert.
    pub fn behavior_offset(&self) -> usize {
        self.n_shared + self.n_text + self.n_vision
    }
}

/// The full tokenizer.
#[derive(Clone, Debug, PartialEq)]
pub struct MixQuantModel<T> {
    config: ModelConfig,
    pub projector_text: Mlp<T>,
    pub projector_vision: Mlp<T>,
    pub projector_behavior: Mlp<T>,
    pub shared_experts: Vec<Mlp<T>>,
    pub text_experts: Vec<Mlp<T>>,
    pub vision_experts: Vec<Mlp<T>>,
    pub behavior_experts: Vec<Mlp<T>>,
    pub gate_text: Mlp<T>,
    pub gate_vision: Mlp<T>,
    pub router: Mlp<T>,
    pub decoder: Mlp<T>,
    /// One codebook per expert, in Semantic-ID position order.
    pub codebooks: Vec<Codebook<T>>,
    pub norm_stats: NormStats,
}

struct Layout {
    projector: [Vec<usize>; 3],
    shared: Vec<usize>,
    specific: [Vec<usize>; 3],
    gates: [Vec<usize>; 2],
    router: Vec<usize>,
    decoder: Vec<usize>,
}

impl Layout {
    fn of(c: &ModelConfig) -> Self {
        let d = c.latent_dim;
        let InputDims { text, vision, behavior } = c.dims;
        let total = c.dims.total();
        Self {
            projector: [vec![text, 2 * d, d], vec![vision, 2 * d, d], vec![behavior, 2 * d, d]],
            shared: vec![3 * d, 2 * d, d],
            specific: [vec![text, 2 * d, d], vec![vision, 2 * d, d], vec![behavior, 2 * d, d]],
            gates: [vec![text, 2 * d, c.n_text], vec![vision, 2 * d, c.n_vision]],
            router: vec![behavior, 2 * d, c.n_behavior],
            decoder: vec![d, 2 * total, total],
        }
    }
}

impl<T: Scalar> MixQuantModel<T> {
    /// Seeded random initialisation.
    pub fn new<R: Rng>(config: ModelConfig, norm_stats: NormStats, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let l = Layout::of(&config);
        let many = |n: usize, sizes: &[usize], rng: &mut R| (0..n).map(|_| Mlp::new(sizes, rng)).collect::<Vec<_>>();
        let projector_text = Mlp::new(&l.projector[0], rng);
        let projector_vision = Mlp::new(&l.projector[1], rng);
        let projector_behavior = Mlp::new(&l.projector[2], rng);
        let shared_experts = many(config.n_shared, &l.shared, rng);
        let text_experts = many(config.n_text, &l.specific[0], rng);
        let vision_experts = many(config.n_vision, &l.specific[1], rng);
        let behavior_experts = many(config.n_behavior, &l.specific[2], rng);
        let gate_text = Mlp::new(&l.gates[0], rng);
        let gate_vision = Mlp::new(&l.gates[1], rng);
        let router = Mlp::new(&l.router, rng);
        let decoder = Mlp::new(&l.decoder, rng);
        let codebooks = config
            .expert_tags()
            .into_iter()
            .map(|tag| Codebook::random(tag, config.codebook_size, config.latent_dim, rng))
            .collect();
        Ok(Self {
            config,
            projector_text,
            projector_vision,
            projector_behavior,
            shared_experts,
            text_experts,
            vision_experts,
            behavior_experts,
            gate_text,
            gate_vision,
            router,
            decoder,
            codebooks,
            norm_stats,
        })
    }

    /// Every parameter zero, codebooks included.
    pub fn zeros(config: ModelConfig, norm_stats: NormStats) -> Result<Self> {
        config.validate()?;
        let l = Layout::of(&config);
        let many = |n: usize, sizes: &[usize]| (0..n).map(|_| Mlp::zeros(sizes)).collect::<Vec<_>>();
        Ok(Self {
            config,
            projector_text: Mlp::zeros(&l.projector[0]),
            projector_vision: Mlp::zeros(&l.projector[1]),
            projector_behavior: Mlp::zeros(&l.projector[2]),
            shared_experts: many(config.n_shared, &l.shared),
            text_experts: many(config.n_text, &l.specific[0]),
            vision_experts: many(config.n_vision, &l.specific[1]),
            behavior_experts: many(config.n_behavior, &l.specific[2]),
            gate_text: Mlp::zeros(&l.gates[0]),
            gate_vision: Mlp::zeros(&l.gates[1]),
            router: Mlp::zeros(&l.router),
            decoder: Mlp::zeros(&l.decoder),
            codebooks: config
                .expert_tags()
                .into_iter()
                .map(|tag| Codebook::new(tag, Tensor::zeros(config.codebook_size, config.latent_dim)))
                .collect(),
            norm_stats,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn sid_length(&self) -> usize {
        self.codebooks.len()
    }

    fn mlps(&self) -> Vec<(String, &Mlp<T>)> {
        let mut out = vec![
            ("projector.text".to_string(), &self.projector_text),
            ("projector.vision".to_string(), &self.projector_vision),
            ("projector.behavior".to_string(), &self.projector_behavior),
        ];
        for (kind, experts) in [
            ("shared", &self.shared_experts),
            ("text", &self.text_experts),
            ("vision", &self.vision_experts),
            ("behavior", &self.behavior_experts),
        ] {
            out.extend(experts.iter().enumerate().map(|(i, m)| (format!("expert.{kind}{i}"), m)));
        }
        out.push(("gate.text".to_string(), &self.gate_text));
        out.push(("gate.vision".to_string(), &self.gate_vision));
        out.push(("router".to_string(), &self.router));
        out.push(("decoder".to_string(), &self.decoder));
        out
    }

    /// Named parameters in canonical order: MLP layers (weight, bias), then
    /// codebooks.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (name, mlp) in self.mlps() {
            for (j, l) in mlp.layers.iter().enumerate() {
                out.push((format!("{name}.l{j}.weight"), &l.weight));
                out.push((format!("{name}.l{j}.bias"), &l.bias));
            }
        }
        for cb in &self.codebooks {
            out.push((format!("codebook.{}", cb.tag()), &cb.codewords));
        }
        out
    }

    /// Mutable parameters in the order of [`named_params`](Self::named_params).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let Self {
            projector_text,
            projector_vision,
            projector_behavior,
            shared_experts,
            text_experts,
            vision_experts,
            behavior_experts,
            gate_text,
            gate_vision,
            router,
            decoder,
            codebooks,
            ..
        } = self;
        let mlps = [projector_text, projector_vision, projector_behavior]
            .into_iter()
            .chain(shared_experts.iter_mut())
            .chain(text_experts.iter_mut())
            .chain(vision_experts.iter_mut())
            .chain(behavior_experts.iter_mut())
            .chain([gate_text, gate_vision, router, decoder]);
        let mut out = Vec::new();
        for mlp in mlps {
            for l in mlp.layers.iter_mut() {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out.extend(codebooks.iter_mut().map(|cb| &mut cb.codewords));
        out
    }

    /// Index of the first codebook tensor within the canonical order.
    pub fn codebook_param_offset(&self) -> usize {
        self.named_params().len() - self.codebooks.len()
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_params().iter().all(|(_, t)| t.is_finite())
    }

    /// Binds a copy of every parameter to `tape` as a leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> BoundModel<'t, T> {
        let vars: Vec<Var<'t, T>> = self
            .named_params()
            .into_iter()
            .map(|(_, t)| tape.param(t.clone()))
            .collect();
        self.bind_vars(&vars)
    }

    /// Assembles a bound model from vars in canonical order, e.g. the leaves
    /// handed out by a gradient checker.
    pub fn bind_vars<'t>(&self, vars: &[Var<'t, T>]) -> BoundModel<'t, T> {
        let mut it = vars.iter().copied();
        let mut take = |mlp: &Mlp<T>| BoundMlp {
            layers: mlp
                .layers
                .iter()
                .map(|_| (it.next().expect("param count"), it.next().expect("param count")))
                .collect(),
        };
        let projector_text = take(&self.projector_text);
        let projector_vision = take(&self.projector_vision);
        let projector_behavior = take(&self.projector_behavior);
        let shared_experts = self.shared_experts.iter().map(&mut take).collect();
        let text_experts = self.text_experts.iter().map(&mut take).collect();
        let vision_experts = self.vision_experts.iter().map(&mut take).collect();
        let behavior_experts = self.behavior_experts.iter().map(&mut take).collect();
        let gate_text = take(&self.gate_text);
        let gate_vision = take(&self.gate_vision);
        let router = take(&self.router);
        let decoder = take(&self.decoder);
        let codebooks = self
            .codebooks
            .iter()
            .map(|cb| (cb.tag(), it.next().expect("param count")))
            .collect();
        assert!(it.next().is_none(), "more vars than parameters");
        BoundModel {
            config: self.config,
            params: vars.to_vec(),
            projector_text,
            projector_vision,
            projector_behavior,
            shared_experts,
            text_experts,
            vision_experts,
            behavior_experts,
            gate_text,
            gate_vision,
            router,
            decoder,
            codebooks,
        }
    }
}

/// Raw embeddings of a batch plus each item's normalised behavior norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub text: Tensor<T>,
    pub vision: Tensor<T>,
    pub behavior: Tensor<T>,
    /// `B × 1`, each entry in `[0, 1]`.
    pub n_norm: Tensor<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_items<'a, I>(items: I, stats: NormStats) -> Result<Self>
    where
        I: IntoIterator<Item = &'a ItemRecord<T>>,
    {
        let items: Vec<&ItemRecord<T>> = items.into_iter().collect();
        if items.is_empty() {
            return Err(Error::Precondition("empty batch".into()));
        }
        let rows = |f: fn(&ItemRecord<T>) -> &[T]| Tensor::from_rows(&items.iter().map(|i| f(i)).collect::<Vec<_>>());
        let n_norm: Vec<T> = items
            .iter()
            .map(|i| crate::align::normalize_norm(i.behavior_norm(), stats))
            .collect();
        Ok(Self {
            text: rows(|i| &i.text)?,
            vision: rows(|i| &i.vision)?,
            behavior: rows(|i| &i.behavior)?,
            n_norm: Tensor::column_vector(&n_norm),
        })
    }

    pub fn len(&self) -> usize {
        self.text.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> InputDims {
        InputDims::new(self.text.cols(), self.vision.cols(), self.behavior.cols())
    }

    /// `[text | vision | behavior]`, the reconstruction target.
    pub fn target(&self) -> Tensor<T> {
        let mut out = Tensor::zeros(self.len(), self.dims().total());
        for r in 0..self.len() {
            let row = out.row_mut(r);
            let (t, rest) = row.split_at_mut(self.text.cols());
            let (v, b) = rest.split_at_mut(self.vision.cols());
            t.copy_from_slice(self.text.row(r));
            v.copy_from_slice(self.vision.row(r));
            b.copy_from_slice(self.behavior.row(r));
        }
        out
    }
}

/// Projected hidden representations.
#[derive(Clone, Copy, Debug)]
pub struct Projected<'t, T> {
    pub h_t: Var<'t, T>,
    pub h_v: Var<'t, T>,
    pub h_b: Var<'t, T>,
    /// `[h_t | h_v | h_b]`, width `3d`.
    pub h: Var<'t, T>,
}

/// Everything a single forward pass produces.
pub struct Forward<'t, T> {
    pub projected: Projected<'t, T>,
    /// Pre-quantization latents in Semantic-ID position order.
    pub latents: Vec<(ExpertTag, Var<'t, T>)>,
    pub gate_text: Var<'t, T>,
    pub gate_vision: Var<'t, T>,
    pub routed: Routed<'t, T>,
    pub quantized: Quantized<'t, T>,
    pub z: Var<'t, T>,
    pub z_q: Var<'t, T>,
    pub reconstruction: Var<'t, T>,
    pub target: Var<'t, T>,
    pub n_norm: Var<'t, T>,
}

impl<'t, T: Scalar> Forward<'t, T> {
    /// Batch mean of the per-item squared reconstruction error.
    pub fn reconstruction_loss(&self) -> Var<'t, T> {
        let r = self.reconstruction - self.target;
        (r * r).sum_cols().mean()
    }
}

/// A [`MixQuantModel`] whose parameters are leaves of one tape.
pub struct BoundModel<'t, T> {
    config: ModelConfig,
    /// All leaves in canonical order.
    pub params: Vec<Var<'t, T>>,
    pub projector_text: BoundMlp<'t, T>,
    pub projector_vision: BoundMlp<'t, T>,
    pub projector_behavior: BoundMlp<'t, T>,
    pub shared_experts: Vec<BoundMlp<'t, T>>,
    pub text_experts: Vec<BoundMlp<'t, T>>,
    pub vision_experts: Vec<BoundMlp<'t, T>>,
    pub behavior_experts: Vec<BoundMlp<'t, T>>,
    pub gate_text: BoundMlp<'t, T>,
    pub gate_vision: BoundMlp<'t, T>,
    pub router: BoundMlp<'t, T>,
    pub decoder: BoundMlp<'t, T>,
    pub codebooks: Vec<(ExpertTag, Var<'t, T>)>,
}

impl<'t, T: Scalar> BoundModel<'t, T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn project_modalities(&self, e_t: Var<'t, T>, e_v: Var<'t, T>, e_b: Var<'t, T>) -> Projected<'t, T> {
        let h_t = self.projector_text.forward(e_t);
        let h_v = self.projector_vision.forward(e_v);
        let h_b = self.projector_behavior.forward(e_b);
        Projected {
            h_t,
            h_v,
            h_b,
            h: concat_cols(&[h_t, h_v, h_b]),
        }
    }

    pub fn encode_shared(&self, h: Var<'t, T>) -> Vec<Var<'t, T>> {
        self.shared_experts.iter().map(|e| e.forward(h)).collect()
    }

    /// Each specific expert reads only its own modality.
    #[allow(clippy::type_complexity)]
    pub fn encode_specific(
        &self,
        e_t: Var<'t, T>,
        e_v: Var<'t, T>,
        e_b: Var<'t, T>,
    ) -> (Vec<Var<'t, T>>, Vec<Var<'t, T>>, Vec<Var<'t, T>>) {
        (
            self.text_experts.iter().map(|e| e.forward(e_t)).collect(),
            self.vision_experts.iter().map(|e| e.forward(e_v)).collect(),
            self.behavior_experts.iter().map(|e| e.forward(e_b)).collect(),
        )
    }

    /// Row-wise softmax gates over the text and vision experts.
    pub fn compute_gates(&self, e_t: Var<'t, T>, e_v: Var<'t, T>) -> (Var<'t, T>, Var<'t, T>) {
        (
            self.gate_text.forward(e_t).softmax(),
            self.gate_vision.forward(e_v).softmax(),
        )
    }

    /// Decoder applied to `z + sg(z_q − z)`: forward sees `z_q`, gradients
    /// flow to `z`.
    pub fn decode(&self, z: Var<'t, T>, z_q: Var<'t, T>) -> Var<'t, T> {
        self.decoder.forward(z + (z_q - z).stop_gradient())
    }

    pub fn forward(&self, batch: &Batch<T>, commitment: T) -> Result<Forward<'t, T>> {
        if batch.dims() != self.config.dims {
            return Err(Error::Mismatch(format!(
                "batch dims {:?} do not match model dims {:?}",
                batch.dims(),
                self.config.dims
            )));
        }
        let tape = self.router.layers[0].0.tape();
        let e_t = tape.constant(batch.text.clone());
        let e_v = tape.constant(batch.vision.clone());
        let e_b = tape.constant(batch.behavior.clone());
        let n_norm = tape.constant(batch.n_norm.clone());

        let projected = self.project_modalities(e_t, e_v, e_b);
        let z_s = self.encode_shared(projected.h);
        let (z_t, z_v, z_b) = self.encode_specific(e_t, e_v, e_b);
        let (g_t, g_v) = self.compute_gates(e_t, e_v);
        let routed = route_behavior(self.router.forward(e_b), n_norm);

        let latents: Vec<(ExpertTag, Var<'t, T>)> = self
            .config
            .expert_tags()
            .into_iter()
            .zip(z_s.iter().chain(&z_t).chain(&z_v).chain(&z_b).copied())
            .collect();
        let quantized = quantize_all(&latents, &self.codebooks, commitment)?;

        let c = &self.config;
        let q = &quantized.quantized;
        let (q_s, rest) = q.split_at(c.n_shared);
        let (q_t, rest) = rest.split_at(c.n_text);
        let (q_v, q_b) = rest.split_at(c.n_vision);
        let z = fuse_latents(&z_s, &z_t, &z_v, &z_b, g_t, g_v, routed.weights);
        let z_q = fuse_latents(q_s, q_t, q_v, q_b, g_t, g_v, routed.weights);
        let reconstruction = self.decode(z, z_q);
        Ok(Forward {
            projected,
            latents,
            gate_text: g_t,
            gate_vision: g_v,
            routed,
            quantized,
            z,
            z_q,
            reconstruction,
            target: tape.constant(batch.target()),
            n_norm,
        })
    }
}

/// `Σ z_s + Σ g_t,i z_t,i + Σ g_v,i z_v,i + Σ R_i z_b,i`, row by row. Gate
/// and router columns scale the matching expert's rows.
pub fn fuse_latents<'t, T: Scalar>(
    shared: &[Var<'t, T>],
    text: &[Var<'t, T>],
    vision: &[Var<'t, T>],
    behavior: &[Var<'t, T>],
    g_t: Var<'t, T>,
    g_v: Var<'t, T>,
    router: Var<'t, T>,
) -> Var<'t, T> {
    let mut terms: Vec<Var<'t, T>> = shared.to_vec();
    for (weights, latents) in [(g_t, text), (g_v, vision), (router, behavior)] {
        terms.extend(latents.iter().enumerate().map(|(i, z)| z.mul_col(weights.column(i))));
    }
    sum_vars(&terms)
}

/// Magic prefix of checkpoint files.
pub const CHECKPOINT_MAGIC: &[u8; 16] = b"MIXQUANT-CKPT\0\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// JSON header stored ahead of the raw parameter values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub scalar: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub norm_stats: NormStats,
    /// Free-form training hyperparameters.
    pub hyperparams: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Serialises as: magic, `u64` LE header length, JSON header, then every
/// tensor in header order as `f64` LE.
pub fn write_checkpoint<T: Scalar, W: Write>(
    model: &MixQuantModel<T>,
    seed: u64,
    hyperparams: serde_json::Value,
    w: &mut W,
) -> Result<()> {
    let params = model.named_params();
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        scalar: T::NAME.to_string(),
        seed,
        model: model.config,
        norm_stats: model.norm_stats,
        hyperparams,
        tensors: params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, t) in &params {
        for &v in t.data() {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<(MixQuantModel<T>, CheckpointHeader)> {
    let mut magic = [0u8; 16];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("file too short for a checkpoint".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)
        .map_err(|_| Error::Format("truncated checkpoint header".into()))?;
    let len = usize::try_from(u64::from_le_bytes(len))
        .map_err(|_| Error::Format("checkpoint header too large".into()))?;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)
        .map_err(|_| Error::Format("truncated checkpoint header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&json).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", header.version)));
    }

    let mut model = MixQuantModel::<T>::zeros(header.model, header.norm_stats)?;
    let expected: Vec<TensorEntry> = model
        .named_params()
        .iter()
        .map(|(name, t)| TensorEntry {
            name: name.clone(),
            rows: t.rows(),
            cols: t.cols(),
        })
        .collect();
    if expected != header.tensors {
        return Err(Error::Mismatch("checkpoint tensor table does not match its model config".into()));
    }
    let mut buf = [0u8; 8];
    for t in model.params_mut() {
        for v in t.data_mut() {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Format("truncated checkpoint data".into()))?;
            *v = T::lit(f64::from_le_bytes(buf));
        }
    }
    if r.read(&mut buf)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint data".into()));
    }
    if !model.is_finite() {
        return Err(Error::NonFinite("checkpoint parameters".into()));
    }
    Ok((model, header))
}

pub fn save_checkpoint<T: Scalar>(
    model: &MixQuantModel<T>,
    seed: u64,
    hyperparams: serde_json::Value,
    path: &Path,
) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, seed, hyperparams, &mut buf)?;
    fs::write(path, buf).map_err(|e| Error::file(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(MixQuantModel<T>, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    read_checkpoint(bytes.as_slice())
}
