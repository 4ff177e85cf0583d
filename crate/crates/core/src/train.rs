//! The composed objective, the optimisation loop and its bookkeeping:
//! k-means codebook init, usage tracking, dead-code resets, λ control.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{alignment_losses, alignment_weight, AlignBatch};
use crate::data::{Dataset, InputDims};
use crate::error::{Error, Result};
use crate::model::{Batch, BoundModel, Forward, MixQuantModel, ModelConfig};
use crate::numerics::{Tape, Tensor, Var};
use crate::quantize::{kmeans, reset_dead_codes, ExpertKind};
use crate::router::{load_balance_factor, sparsity_regularization, target_sparsity, SparsityState};
use crate::scalar::Scalar;

/// Latents kept per expert for re-seeding dead codewords.
const RECENT_LATENTS: usize = 1024;

/// Training hyperparameters. Serialised field names are the config-file keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub w_recon: f64,
    pub w_align_block: f64,
    pub w_vq: f64,
    pub w_reg: f64,
    /// Controller steepness.
    pub alpha: f64,
    /// Controller threshold.
    pub beta: f64,
    pub tau: f64,
    /// Target-sparsity scale.
    pub theta: f64,
    pub lambda_0: f64,
    pub update_factor: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Epochs trained on the content term alone before the weighted
    /// behavior-content term is switched on.
    pub warmup_epochs: usize,
    pub codebook_size: usize,
    /// Codewords used fewer times than this in an epoch are re-seeded.
    pub reset_threshold: u64,
    pub latent_dim: usize,
    pub n_shared: usize,
    pub n_text: usize,
    pub n_vision: usize,
    pub n_behavior: usize,
    pub beta_commit: f64,
    pub grad_clip: f64,
    /// Lloyd iterations for codebook init; 0 keeps the random init.
    pub kmeans_iters: usize,
    /// Ablation: controller weight fixed at 1 for every item.
    pub force_unit_alignment: bool,
    pub dead_code_reset: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            w_recon: 1.0,
            w_align_block: 1.0,
            w_vq: 1.0,
            w_reg: 1.0,
            alpha: 10.0,
            beta: 9.0,
            tau: 0.07,
            theta: 1.0 / 3.0,
            lambda_0: 1e-2,
            update_factor: 1.02,
            lambda_min: 1e-6,
            lambda_max: 10.0,
            warmup_epochs: 0,
            codebook_size: 64,
            reset_threshold: 1,
            latent_dim: 16,
            n_shared: 2,
            n_text: 2,
            n_vision: 2,
            n_behavior: 6,
            beta_commit: 0.25,
            grad_clip: 5.0,
            kmeans_iters: 10,
            force_unit_alignment: false,
            dead_code_reset: true,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.alpha > 0.0 && self.beta.is_finite()) {
            return bad(format!("controller needs alpha > 0, got ({}, {})", self.alpha, self.beta));
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return bad(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        for (name, w) in [
            ("w_recon", self.w_recon),
            ("w_align_block", self.w_align_block),
            ("w_vq", self.w_vq),
            ("w_reg", self.w_reg),
            ("beta_commit", self.beta_commit),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {w}"));
            }
        }
        self.sparsity_state()?;
        Ok(())
    }

    pub fn model_config(&self, dims: InputDims) -> ModelConfig {
        ModelConfig {
            dims,
            latent_dim: self.latent_dim,
            codebook_size: self.codebook_size,
            n_shared: self.n_shared,
            n_text: self.n_text,
            n_vision: self.n_vision,
            n_behavior: self.n_behavior,
        }
    }

    pub fn sparsity_state(&self) -> Result<SparsityState> {
        SparsityState::new(self.lambda_0, self.update_factor, self.theta, self.lambda_min, self.lambda_max)
    }
}

/// Loss components and router statistics of one step, or their epoch means.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub recon: f64,
    pub content: f64,
    /// Batch mean of `w_i · L_align,i`.
    pub align: f64,
    pub vq: f64,
    pub reg: f64,
    pub total: f64,
    pub s_current: f64,
    pub s_target: f64,
    pub mean_w: f64,
    /// λ used for this step's regularizer.
    pub lambda: f64,
}

impl StepReport {
    pub const FIELDS: [&'static str; 10] = [
        "recon", "content", "align", "vq", "reg", "total", "s_current", "s_target", "mean_w", "lambda",
    ];

    pub fn values(&self) -> [f64; 10] {
        [
            self.recon,
            self.content,
            self.align,
            self.vq,
            self.reg,
            self.total,
            self.s_current,
            self.s_target,
            self.mean_w,
            self.lambda,
        ]
    }

    fn from_values(v: [f64; 10]) -> Self {
        Self {
            recon: v[0],
            content: v[1],
            align: v[2],
            vq: v[3],
            reg: v[4],
            total: v[5],
            s_current: v[6],
            s_target: v[7],
            mean_w: v[8],
            lambda: v[9],
        }
    }

    /// Field-wise mean; `None` for an empty slice.
    pub fn mean(reports: &[StepReport]) -> Option<StepReport> {
        if reports.is_empty() {
            return None;
        }
        let mut acc = [0.0; 10];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        Some(Self::from_values(acc.map(|a| a / reports.len() as f64)))
    }
}

/// History CSV: header row, then one row per epoch.
pub fn history_csv(history: &[StepReport]) -> String {
    let mut out = String::from("epoch");
    for f in StepReport::FIELDS {
        out.push(',');
        out.push_str(f);
    }
    out.push('\n');
    for (e, r) in history.iter().enumerate() {
        write!(out, "{}", e + 1).expect("string write");
        for v in r.values() {
            write!(out, ",{v}").expect("string write");
        }
        out.push('\n');
    }
    out
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new<'a, I>(lr: f64, params: I) -> Self
    where
        I: IntoIterator<Item = &'a Tensor<T>>,
    {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.rows(), p.cols()), Tensor::zeros(p.rows(), p.cols())))
            .unzip();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update of every parameter from its gradient.
    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>]) {
        debug_assert_eq!(params.len(), grads.len());
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        let one = T::one();
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    /// Clears both moments for selected rows of one parameter.
    pub fn reset_rows(&mut self, param: usize, rows: &[usize]) {
        for &r in rows {
            self.m[param].row_mut(r).iter_mut().for_each(|x| *x = T::zero());
            self.v[param].row_mut(r).iter_mut().for_each(|x| *x = T::zero());
        }
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: T) -> T {
    let norm = grads.iter().map(Tensor::squared_norm).sum::<T>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x = *x * s);
        }
    }
    norm
}

/// Owns the model and every piece of mutable training state.
pub struct Trainer<T> {
    cfg: TrainConfig,
    model: MixQuantModel<T>,
    adam: Adam<T>,
    sparsity: SparsityState,
    rng: ChaCha8Rng,
    epoch: usize,
    recent: Vec<VecDeque<Vec<T>>>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(dataset: &Dataset<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if dataset.len() < 2 {
            return Err(Error::Precondition(format!(
                "training needs at least 2 items for in-batch negatives, got {}",
                dataset.len()
            )));
        }
        let stats = dataset.norm_stats();
        if stats.is_degenerate() {
            warn!(
                "every behavior embedding has norm {}; normalised norms are fixed at 0.5",
                stats.min
            );
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = MixQuantModel::new(cfg.model_config(dataset.dims()), stats, &mut rng)?;
        let adam = Adam::new(cfg.learning_rate, model.named_params().into_iter().map(|(_, t)| t));
        let recent = vec![VecDeque::new(); model.sid_length()];
        Ok(Self {
            sparsity: cfg.sparsity_state()?,
            cfg,
            model,
            adam,
            rng,
            epoch: 0,
            recent,
        })
    }

    pub fn model(&self) -> &MixQuantModel<T> {
        &self.model
    }

    pub fn into_model(self) -> MixQuantModel<T> {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn sparsity(&self) -> &SparsityState {
        &self.sparsity
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn commitment(&self) -> T {
        T::lit(self.cfg.beta_commit)
    }

    /// Seeds every codebook with k-means over the current encoders'
    /// latents for the whole dataset.
    pub fn init_codebooks(&mut self, dataset: &Dataset<T>) -> Result<()> {
        let mut per_expert: Vec<Vec<Vec<T>>> = vec![Vec::new(); self.model.sid_length()];
        let stats = self.model.norm_stats;
        for chunk in dataset.items().chunks(self.cfg.batch_size.max(256)) {
            let batch = Batch::from_items(chunk, stats)?;
            let tape = Tape::new();
            let f = self.model.bind(&tape).forward(&batch, self.commitment())?;
            tape.check()?;
            for (e, (_, z)) in f.latents.iter().enumerate() {
                per_expert[e].extend(z.value().iter_rows().map(<[T]>::to_vec));
            }
        }
        for (cb, points) in self.model.codebooks.iter_mut().zip(&per_expert) {
            cb.codewords = kmeans(points, cb.size(), self.cfg.kmeans_iters, &mut self.rng)?;
        }
        Ok(())
    }

    /// One forward/backward pass and parameter update on `batch`, followed
    /// by the λ update.
    pub fn train_step(&mut self, batch: &Batch<T>) -> Result<StepReport> {
        let cfg = &self.cfg;
        let tape = Tape::new();
        let bound = self.model.bind(&tape);
        let lambda = self.sparsity.lambda;
        let Objective {
            total,
            forward: f,
            report,
        } = objective(&bound, batch, cfg, lambda, self.epoch >= cfg.warmup_epochs)?;
        let (s_target, s_current) = (report.s_target, report.s_current);
        for (name, v) in [
            ("reconstruction loss", report.recon),
            ("content contrastive loss", report.content),
            ("behavior-content alignment loss", report.align),
            ("vq loss", report.vq),
            ("sparsity regularization", report.reg),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite(name.to_string()));
            }
        }
        tape.check()?;

        let grads = total.backward()?;
        let mut grads: Vec<Tensor<T>> = bound.params.iter().map(|&p| grads.get_or_zeros(p)).collect();
        let norm = clip_global_norm(&mut grads, T::lit(cfg.grad_clip));
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }

        // Usage and recent latents; inactive behavior positions emit PAD and
        // are not counted.
        let offset = self.model.config().behavior_offset();
        for (e, (tag, z)) in f.latents.iter().enumerate() {
            let z = z.value();
            for (r, &code) in f.quantized.assignments[e].iter().enumerate() {
                if tag.kind == ExpertKind::Behavior && !f.routed.outputs[r].active_mask[e - offset] {
                    continue;
                }
                self.model.codebooks[e].record_usage(code);
                let recent = &mut self.recent[e];
                if recent.len() == RECENT_LATENTS {
                    recent.pop_front();
                }
                recent.push_back(z.row(r).to_vec());
            }
        }
        drop(f);

        self.adam.step(self.model.params_mut(), &grads);
        if !self.model.is_finite() {
            return Err(Error::NonFinite("parameters after update".into()));
        }
        self.sparsity = self.sparsity.updated(s_target, s_current);
        Ok(report)
    }

    /// One shuffled pass over `dataset`; returns the mean step report.
    /// A trailing partial batch is dropped unless the dataset is smaller
    /// than one batch, in which case the whole dataset is one batch.
    pub fn run_epoch(&mut self, dataset: &Dataset<T>) -> Result<StepReport> {
        if self.epoch == 0 && self.cfg.kmeans_iters > 0 {
            self.init_codebooks(dataset)?;
        }
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut self.rng);
        let bsz = self.cfg.batch_size.min(dataset.len());
        let stats = self.model.norm_stats;
        let mut reports = Vec::with_capacity(order.len() / bsz);
        for idx in order.chunks_exact(bsz) {
            let batch = Batch::from_items(idx.iter().map(|&i| &dataset.items()[i]), stats)?;
            reports.push(self.train_step(&batch)?);
        }
        self.end_epoch();
        let mean = StepReport::mean(&reports).expect("at least one batch");
        info!(
            "epoch {}: total {:.4} recon {:.4} content {:.4} align {:.4} vq {:.4} reg {:.5} s_current {:.3} s_target {:.3} lambda {:.3e}",
            self.epoch, mean.total, mean.recon, mean.content, mean.align, mean.vq, mean.reg, mean.s_current, mean.s_target, self.sparsity.lambda
        );
        Ok(mean)
    }

    fn end_epoch(&mut self) {
        let offset = self.model.codebook_param_offset();
        for (e, cb) in self.model.codebooks.iter_mut().enumerate() {
            if self.cfg.dead_code_reset {
                let recent: Vec<Vec<T>> = self.recent[e].iter().cloned().collect();
                let replaced = reset_dead_codes(cb, &recent, self.cfg.reset_threshold, &mut self.rng);
                if !replaced.is_empty() {
                    debug!("epoch {}: re-seeded {} codewords of {}", self.epoch + 1, replaced.len(), cb.tag());
                }
                self.adam.reset_rows(offset + e, &replaced);
            } else {
                cb.reset_usage();
            }
            self.recent[e].clear();
        }
        self.epoch += 1;
    }
}

/// Training objective on one batch with its parts.
pub struct Objective<'t, T> {
    pub total: Var<'t, T>,
    pub forward: Forward<'t, T>,
    pub report: StepReport,
}

/// Builds the weighted training objective for `batch` on `bound` with the
/// sparsity penalty at `lambda`. The behavior-content term is included only
/// when `align_on`.
///
/// The load-balance factor and controller weights depend on the batch but
/// not differentiably on the parameters; they enter as constants.
pub fn objective<'t, T: Scalar>(
    bound: &BoundModel<'t, T>,
    batch: &Batch<T>,
    cfg: &TrainConfig,
    lambda: f64,
    align_on: bool,
) -> Result<Objective<'t, T>> {
    let f = bound.forward(batch, T::lit(cfg.beta_commit))?;
    let tape = f.reconstruction.tape();
    let b = batch.len();

    let n_norm: Vec<T> = batch.n_norm.data().to_vec();
    let weights: Vec<T> = n_norm
        .iter()
        .map(|&n| {
            if cfg.force_unit_alignment {
                T::one()
            } else {
                alignment_weight(n, T::lit(cfg.alpha), T::lit(cfg.beta))
            }
        })
        .collect();
    let align = alignment_losses(&AlignBatch {
        h_t: f.projected.h_t,
        h_v: f.projected.h_v,
        h_b: f.projected.h_b,
        weights: tape.constant(Tensor::column_vector(&weights)),
        tau: T::lit(cfg.tau),
    })?;

    let bf = b as f64;
    let s_target = n_norm
        .iter()
        .map(|&n| target_sparsity(n, T::lit(cfg.theta)).as_f64())
        .sum::<f64>()
        / bf;
    let s_current = f.routed.outputs.iter().map(|o| o.s_current.as_f64()).sum::<f64>() / bf;
    let f_lb = load_balance_factor(&f.routed.outputs, T::lit(s_target))?;
    let reg = sparsity_regularization(f.routed.weights, f_lb, T::lit(lambda));
    let recon = f.reconstruction_loss();
    let vq = f.quantized.vq_loss;

    let align_block = if align_on {
        align.content + align.weighted_align
    } else {
        align.content
    };
    let total = recon.scale(T::lit(cfg.w_recon))
        + align_block.scale(T::lit(cfg.w_align_block))
        + vq.scale(T::lit(cfg.w_vq))
        + reg.scale(T::lit(cfg.w_reg));

    let report = StepReport {
        recon: recon.item().as_f64(),
        content: align.content.item().as_f64(),
        align: align.weighted_align.item().as_f64(),
        vq: vq.item().as_f64(),
        reg: reg.item().as_f64(),
        total: total.item().as_f64(),
        s_current,
        s_target,
        mean_w: weights.iter().map(|w| w.as_f64()).sum::<f64>() / bf,
        lambda,
    };
    Ok(Objective {
        total,
        forward: f,
        report,
    })
}

/// Trains a fresh model for `cfg.epochs` epochs; returns it with the
/// per-epoch mean reports.
pub fn train<T: Scalar>(dataset: &Dataset<T>, cfg: &TrainConfig) -> Result<(MixQuantModel<T>, Vec<StepReport>)> {
    let mut trainer = Trainer::new(dataset, cfg.clone())?;
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        history.push(trainer.run_epoch(dataset)?);
    }
    Ok((trainer.into_model(), history))
}
