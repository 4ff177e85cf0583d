//! Per-expert codebooks: cosine nearest-codeword search, the codebook and
//! commitment losses, k-means initialisation and dead-code resets.

use std::fmt;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, l2_norm, sum_vars, Tensor, Var, NORM_EPS};
use crate::scalar::Scalar;

/// Commitment weight of the VQ objective.
pub const DEFAULT_COMMITMENT: f64 = 0.25;

/// Noise half-width added to latents that re-seed dead codewords.
const RESEED_NOISE: f64 = 1e-3;

/// Which family an expert belongs to. The declaration order is the order of
/// positions in a Semantic-ID sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertKind {
    Shared,
    Text,
    Vision,
    Behavior,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ExpertTag {
    pub kind: ExpertKind,
    pub index: usize,
}

impl ExpertTag {
    pub fn new(kind: ExpertKind, index: usize) -> Self {
        Self { kind, index }
    }
}

impl fmt::Display for ExpertTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = match self.kind {
            ExpertKind::Shared => "shared",
            ExpertKind::Text => "text",
            ExpertKind::Vision => "vision",
            ExpertKind::Behavior => "behavior",
        };
        write!(f, "{k}{}", self.index)
    }
}

/// `K` codewords of width `d` owned by one expert, plus per-epoch usage.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T> {
    pub codewords: Tensor<T>,
    usage: Vec<u64>,
    tag: ExpertTag,
}

impl<T: Scalar> Codebook<T> {
    pub fn new(tag: ExpertTag, codewords: Tensor<T>) -> Self {
        let usage = vec![0; codewords.rows()];
        Self {
            codewords,
            usage,
            tag,
        }
    }

    /// Codewords drawn uniformly from `[-1/√d, 1/√d]`.
    pub fn random<R: Rng>(tag: ExpertTag, size: usize, dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let data = (0..size * dim)
            .map(|_| T::lit(rng.random_range(-bound..bound)))
            .collect();
        Self::new(tag, Tensor::from_vec(size, dim, data).expect("sized buffer"))
    }

    pub fn tag(&self) -> ExpertTag {
        self.tag
    }

    pub fn size(&self) -> usize {
        self.codewords.rows()
    }

    pub fn dim(&self) -> usize {
        self.codewords.cols()
    }

    pub fn codeword(&self, k: usize) -> &[T] {
        self.codewords.row(k)
    }

    pub fn usage_counts(&self) -> &[u64] {
        &self.usage
    }

    pub fn record_usage(&mut self, code: usize) {
        self.usage[code] += 1;
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|u| *u = 0);
    }

    pub fn nearest(&self, z: &[T]) -> Assignment<T> {
        nearest_codeword(z, &self.codewords)
    }
}

/// Result of matching one latent against a codebook.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment<T> {
    pub code_index: usize,
    pub codeword: Vec<T>,
    pub similarity: T,
}

/// Index of the codeword with the highest cosine similarity to `z`; ties go
/// to the lowest index.
pub fn nearest_codeword<T: Scalar>(z: &[T], codewords: &Tensor<T>) -> Assignment<T> {
    let norms: Vec<T> = codewords.iter_rows().map(l2_norm).collect();
    let (code_index, similarity) = best_match(z, codewords, &norms);
    Assignment {
        code_index,
        codeword: codewords.row(code_index).to_vec(),
        similarity,
    }
}

fn best_match<T: Scalar>(z: &[T], codewords: &Tensor<T>, norms: &[T]) -> (usize, T) {
    let eps = T::lit(NORM_EPS);
    let zn = l2_norm(z).max(eps);
    let mut best = (0, T::neg_infinity());
    for (k, (row, &n)) in codewords.iter_rows().zip(norms).enumerate() {
        let s = dot(z, row) / (zn * n.max(eps));
        if s > best.1 {
            best = (k, s);
        }
    }
    best
}

/// Nearest codeword index for every row of `latents`.
pub fn assign_rows<T: Scalar>(latents: &Tensor<T>, codewords: &Tensor<T>) -> Vec<(usize, T)> {
    let norms: Vec<T> = codewords.iter_rows().map(l2_norm).collect();
    latents
        .iter_rows()
        .map(|z| best_match(z, codewords, &norms))
        .collect()
}

/// Output of [`quantize_all`].
pub struct Quantized<'t, T> {
    /// `assignments[e][r]` is the code chosen for row `r` by expert `e`.
    pub assignments: Vec<Vec<usize>>,
    pub similarities: Vec<Vec<T>>,
    /// Selected codewords, one `B × d` var per expert.
    pub quantized: Vec<Var<'t, T>>,
    /// Batch mean of `Σ_e ‖sg(z) − z_q‖² + β‖z − sg(z_q)‖²`.
    pub vq_loss: Var<'t, T>,
}

/// Quantizes each expert's batch of latents with its own codebook.
///
/// `latents` and `codebooks` are parallel and must already be in expert
/// order. The returned assignments keep that order.
pub fn quantize_all<'t, T: Scalar>(
    latents: &[(ExpertTag, Var<'t, T>)],
    codebooks: &[(ExpertTag, Var<'t, T>)],
    commitment: T,
) -> Result<Quantized<'t, T>> {
    if latents.is_empty() {
        return Err(Error::Precondition("no latents to quantize".into()));
    }
    if latents.len() != codebooks.len() {
        return Err(Error::Precondition(format!(
            "{} latents but {} codebooks",
            latents.len(),
            codebooks.len()
        )));
    }
    let mut assignments = Vec::with_capacity(latents.len());
    let mut similarities = Vec::with_capacity(latents.len());
    let mut quantized = Vec::with_capacity(latents.len());
    let mut terms = Vec::with_capacity(latents.len());
    for ((tag, z), (cb_tag, cb)) in latents.iter().zip(codebooks) {
        if tag != cb_tag {
            return Err(Error::Precondition(format!("latent {tag} paired with codebook {cb_tag}")));
        }
        let picks = assign_rows(&z.value(), &cb.value());
        let idx: Vec<usize> = picks.iter().map(|p| p.0).collect();
        let zq = cb.gather_rows(&idx);
        let codebook_term = z.stop_gradient() - zq;
        let commit_term = *z - zq.stop_gradient();
        let per_row = (codebook_term * codebook_term).sum_cols()
            + (commit_term * commit_term).sum_cols().scale(commitment);
        terms.push(per_row);
        similarities.push(picks.iter().map(|p| p.1).collect());
        assignments.push(idx);
        quantized.push(zq);
    }
    let vq_loss = sum_vars(&terms).mean();
    Ok(Quantized {
        assignments,
        similarities,
        quantized,
        vq_loss,
    })
}

/// Re-seeds codewords used fewer than `threshold` times this epoch from
/// randomly chosen `recent` latents plus small noise, then clears usage.
/// Returns the replaced indices.
pub fn reset_dead_codes<T: Scalar, R: Rng>(
    codebook: &mut Codebook<T>,
    recent: &[Vec<T>],
    threshold: u64,
    rng: &mut R,
) -> Vec<usize> {
    let dead: Vec<usize> = codebook
        .usage
        .iter()
        .enumerate()
        .filter(|(_, &u)| u < threshold)
        .map(|(k, _)| k)
        .collect();
    let mut replaced = Vec::new();
    if !recent.is_empty() {
        for &k in &dead {
            let src = &recent[rng.random_range(0..recent.len())];
            for (c, &v) in codebook.codewords.row_mut(k).iter_mut().zip(src) {
                *c = v + T::lit(rng.random_range(-RESEED_NOISE..RESEED_NOISE));
            }
            replaced.push(k);
        }
    }
    codebook.reset_usage();
    replaced
}

/// Lloyd's k-means with `iterations` rounds, seeded from distinct random
/// points. Empty clusters are re-seeded from a random point.
pub fn kmeans<T: Scalar, R: Rng>(points: &[Vec<T>], k: usize, iterations: usize, rng: &mut R) -> Result<Tensor<T>> {
    let dim = points
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Precondition("k-means needs at least one point".into()))?;
    if k == 0 {
        return Err(Error::Precondition("k-means needs k ≥ 1".into()));
    }
    let noise = |rng: &mut R| T::lit(rng.random_range(-RESEED_NOISE..RESEED_NOISE));
    let mut centers = Tensor::zeros(k, dim);
    if points.len() >= k {
        for (c, p) in sample(rng, points.len(), k).into_iter().enumerate() {
            centers.row_mut(c).copy_from_slice(&points[p]);
        }
    } else {
        for c in 0..k {
            let src = &points[c % points.len()];
            for (dst, &v) in centers.row_mut(c).iter_mut().zip(src) {
                *dst = v + if c < points.len() { T::zero() } else { noise(rng) };
            }
        }
    }

    let mut owner = vec![0usize; points.len()];
    for _ in 0..iterations {
        for (p, o) in points.iter().zip(owner.iter_mut()) {
            *o = nearest_euclidean(p, &centers);
        }
        let mut sums = Tensor::<T>::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (p, &o) in points.iter().zip(&owner) {
            counts[o] += 1;
            for (s, &v) in sums.row_mut(o).iter_mut().zip(p) {
                *s = *s + v;
            }
        }
        for (c, &count) in counts.iter().enumerate() {
            if count == 0 {
                let src = &points[rng.random_range(0..points.len())];
                for (dst, &v) in centers.row_mut(c).iter_mut().zip(src) {
                    *dst = v + noise(rng);
                }
            } else {
                let n = T::from_usize_lossy(count);
                for (dst, &s) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s / n;
                }
            }
        }
    }
    Ok(centers)
}

fn nearest_euclidean<T: Scalar>(p: &[T], centers: &Tensor<T>) -> usize {
    let mut best = (0, T::infinity());
    for (c, row) in centers.iter_rows().enumerate() {
        let d: T = row.iter().zip(p).map(|(&a, &b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}
