//! Behavior-content alignment: the norm-driven alignment-strength controller
//! and the two in-batch InfoNCE objectives.

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::numerics::{l2_norm, Var};
use crate::scalar::{sigmoid, Scalar};

/// Steepness and threshold of the controller curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControllerParams {
    pub alpha: f64,
    pub beta: f64,
    pub norm_stats: NormStats,
}

impl ControllerParams {
    pub fn new(alpha: f64, beta: f64, norm_stats: NormStats) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(Error::Config(format!(
                "controller needs alpha > 0 and finite beta, got ({alpha}, {beta})"
            )));
        }
        Ok(Self {
            alpha,
            beta,
            norm_stats,
        })
    }

    /// Controller weight for a raw behavior embedding.
    pub fn weight<T: Scalar>(&self, e_b: &[T]) -> T {
        alignment_weight(norm_normalize(e_b, self.norm_stats), T::lit(self.alpha), T::lit(self.beta))
    }
}

/// Min-max normalised L2 norm of `e_b`, clamped to `[0, 1]`.
pub fn norm_normalize<T: Scalar>(e_b: &[T], stats: NormStats) -> T {
    normalize_norm(l2_norm(e_b), stats)
}

/// Min-max normalisation of an already computed norm. Degenerate stats
/// (`max == min`) map everything to 0.5.
pub fn normalize_norm<T: Scalar>(norm: T, stats: NormStats) -> T {
    if stats.is_degenerate() {
        return T::lit(0.5);
    }
    let n = (norm.as_f64() - stats.min) / (stats.max - stats.min);
    T::lit(n.clamp(0.0, 1.0))
}

/// `σ(α·n − β) / σ(α − β)`. Equals 1 exactly at `n = 1`.
pub fn alignment_weight<T: Scalar>(n_norm: T, alpha: T, beta: T) -> T {
    sigmoid(alpha * n_norm - beta) / sigmoid(alpha - beta)
}

fn check_batch<T: Scalar>(what: &str, a: Var<'_, T>, b: Var<'_, T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "contrastive",
            format!("{what}: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    if a.rows() < 2 {
        return Err(Error::Precondition(format!(
            "{what} needs a batch of at least 2 for in-batch negatives, got {}",
            a.rows()
        )));
    }
    Ok(())
}

/// `B × B` cosine-similarity logits scaled by `1/τ`.
fn similarity_logits<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>, tau: T) -> Var<'t, T> {
    a.normalize_rows()
        .matmul_t(b.normalize_rows())
        .scale(T::one() / tau)
}

/// Symmetric text↔vision InfoNCE, averaged over the batch. The positive for
/// row `i` is row `i` of the other matrix; the other `B − 1` rows are
/// negatives.
pub fn content_contrastive_loss<'t, T: Scalar>(h_t: Var<'t, T>, h_v: Var<'t, T>, tau: T) -> Result<Var<'t, T>> {
    check_batch("content contrastive loss", h_t, h_v)?;
    let logits = similarity_logits(h_t, h_v, tau);
    let t2v = logits.log_softmax().diag();
    let v2t = logits.transpose().log_softmax().diag();
    Ok(-(t2v + v2t).mean())
}

/// One-directional behavior→content InfoNCE, one entry per item (`B × 1`).
pub fn behavior_content_contrastive_loss<'t, T: Scalar>(
    h_b: Var<'t, T>,
    h_c: Var<'t, T>,
    tau: T,
) -> Result<Var<'t, T>> {
    check_batch("behavior-content contrastive loss", h_b, h_c)?;
    Ok(-similarity_logits(h_b, h_c, tau).log_softmax().diag())
}

/// Hidden representations and controller weights for one batch.
#[derive(Clone, Copy, Debug)]
pub struct AlignBatch<'t, T> {
    pub h_t: Var<'t, T>,
    pub h_v: Var<'t, T>,
    pub h_b: Var<'t, T>,
    /// `B × 1` controller outputs.
    pub weights: Var<'t, T>,
    pub tau: T,
}

/// Both components of the alignment objective.
pub struct AlignLosses<'t, T> {
    pub content: Var<'t, T>,
    /// Batch mean of `w_i · L_align,i`.
    pub weighted_align: Var<'t, T>,
}

impl<'t, T: Scalar> AlignLosses<'t, T> {
    pub fn total(&self) -> Var<'t, T> {
        self.content + self.weighted_align
    }
}

pub fn alignment_losses<'t, T: Scalar>(batch: &AlignBatch<'t, T>) -> Result<AlignLosses<'t, T>> {
    if batch.weights.shape() != [batch.h_b.rows(), 1] {
        return Err(Error::shape(
            "alignment",
            format!("weights {:?} for batch of {}", batch.weights.shape(), batch.h_b.rows()),
        ));
    }
    let content = content_contrastive_loss(batch.h_t, batch.h_v, batch.tau)?;
    let h_c = batch.h_t + batch.h_v;
    let per_item = behavior_content_contrastive_loss(batch.h_b, h_c, batch.tau)?;
    Ok(AlignLosses {
        content,
        weighted_align: (per_item * batch.weights).mean(),
    })
}

/// `L_content + mean_i(w_i · L_align,i)`.
pub fn total_alignment_loss<'t, T: Scalar>(batch: &AlignBatch<'t, T>) -> Result<Var<'t, T>> {
    Ok(alignment_losses(batch)?.total())
}
