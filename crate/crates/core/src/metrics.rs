//! Semantic-ID emission and the quantization quality metrics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ItemRecord};
use crate::error::{Error, Result};
use crate::model::{Batch, MixQuantModel};
use crate::numerics::Tape;
use crate::quantize::DEFAULT_COMMITMENT;
use crate::scalar::Scalar;

/// Items per forward pass during tokenization.
const CHUNK: usize = 256;

/// Semantic-ID sequence of one item. Positions run shared, text, vision,
/// behavior; a suppressed behavior position holds the PAD code `K`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticIds {
    pub item_id: String,
    pub codes: Vec<usize>,
    /// Number of behavior positions that are not PAD.
    pub active_behavior: usize,
}

/// Tokenizes `items` in order. Behavior position `j` is PAD iff the router
/// weight `R_j ≤ threshold`.
pub fn tokenize<T: Scalar>(model: &MixQuantModel<T>, items: &[ItemRecord<T>], threshold: T) -> Result<Vec<SemanticIds>> {
    let cfg = *model.config();
    let pad = cfg.codebook_size;
    let offset = cfg.behavior_offset();
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(CHUNK) {
        let batch = Batch::from_items(chunk, model.norm_stats)?;
        let tape = Tape::new();
        let f = model.bind(&tape).forward(&batch, T::lit(DEFAULT_COMMITMENT))?;
        tape.check()?;
        let router = f.routed.weights.value();
        for (r, item) in chunk.iter().enumerate() {
            let mut codes: Vec<usize> = f.quantized.assignments.iter().map(|a| a[r]).collect();
            let mut active = 0;
            for (j, &w) in router.row(r).iter().enumerate() {
                if w <= threshold {
                    codes[offset + j] = pad;
                } else {
                    active += 1;
                }
            }
            out.push(SemanticIds {
                item_id: item.item_id.clone(),
                codes,
                active_behavior: active,
            });
        }
    }
    Ok(out)
}

pub fn tokenize_item<T: Scalar>(model: &MixQuantModel<T>, item: &ItemRecord<T>, threshold: T) -> Result<SemanticIds> {
    Ok(tokenize(model, std::slice::from_ref(item), threshold)?.remove(0))
}

pub fn write_sid_jsonl<W: Write>(sids: &[SemanticIds], w: &mut W) -> Result<()> {
    for s in sids {
        serde_json::to_writer(&mut *w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// `counts[p][k]`: how often position `p` emitted code `k`, PAD excluded.
pub fn code_counts(sids: &[SemanticIds], sid_length: usize, codebook_size: usize) -> Result<Vec<Vec<u64>>> {
    let mut counts = vec![vec![0u64; codebook_size]; sid_length];
    for s in sids {
        if s.codes.len() != sid_length {
            return Err(Error::Mismatch(format!(
                "{} has {} codes, expected {sid_length}",
                s.item_id,
                s.codes.len()
            )));
        }
        for (p, &c) in s.codes.iter().enumerate() {
            if c < codebook_size {
                counts[p][c] += 1;
            } else if c > codebook_size {
                return Err(Error::Mismatch(format!("{}: code {c} out of range", s.item_id)));
            }
        }
    }
    Ok(counts)
}

/// Mean over codebooks of the natural-log Shannon entropy of code usage.
pub fn token_entropy(counts: &[Vec<u64>]) -> Result<f64> {
    if counts.is_empty() {
        return Err(Error::Precondition("entropy over zero codebooks".into()));
    }
    let mut acc = 0.0;
    for (p, c) in counts.iter().enumerate() {
        let total: u64 = c.iter().sum();
        if total == 0 {
            return Err(Error::Precondition(format!("codebook {p} has no assignments")));
        }
        let total = total as f64;
        acc -= c
            .iter()
            .filter(|&&n| n > 0)
            .map(|&n| {
                let q = n as f64 / total;
                q * q.ln()
            })
            .sum::<f64>();
    }
    Ok(acc / counts.len() as f64)
}

/// Mean over codebooks of the fraction of codewords used at least once.
pub fn codebook_utilization(counts: &[Vec<u64>]) -> Result<f64> {
    if counts.is_empty() || counts.iter().any(Vec::is_empty) {
        return Err(Error::Precondition("utilization over an empty codebook".into()));
    }
    Ok(counts
        .iter()
        .map(|c| c.iter().filter(|&&n| n > 0).count() as f64 / c.len() as f64)
        .sum::<f64>()
        / counts.len() as f64)
}

/// Mean over items of `‖e − decoder(z + sg(z_q − z))‖²`.
pub fn reconstruction_metric<T: Scalar>(model: &MixQuantModel<T>, items: &[ItemRecord<T>]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Precondition("reconstruction over zero items".into()));
    }
    let mut sum = 0.0;
    for chunk in items.chunks(CHUNK) {
        let batch = Batch::from_items(chunk, model.norm_stats)?;
        let tape = Tape::new();
        let f = model.bind(&tape).forward(&batch, T::lit(DEFAULT_COMMITMENT))?;
        tape.check()?;
        let (rec, tgt) = (f.reconstruction.value(), f.target.value());
        for (a, b) in rec.iter_rows().zip(tgt.iter_rows()) {
            sum += a.iter().zip(b).map(|(&x, &y)| (x - y).as_f64().powi(2)).sum::<f64>();
        }
    }
    Ok(sum / items.len() as f64)
}

/// Metrics for one tokenization pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub recon_loss: f64,
    /// Averaged over codebooks that emitted at least one non-PAD token.
    pub entropy: f64,
    /// Averaged over all codebooks; one that never emits scores 0.
    pub utilization: f64,
}

pub fn quant_report<T: Scalar>(model: &MixQuantModel<T>, dataset: &Dataset<T>, threshold: T) -> Result<QuantReport> {
    let cfg = model.config();
    let sids = tokenize(model, dataset.items(), threshold)?;
    let counts = code_counts(&sids, cfg.sid_length(), cfg.codebook_size)?;
    let emitting: Vec<Vec<u64>> = counts.iter().filter(|c| c.iter().any(|&n| n > 0)).cloned().collect();
    Ok(QuantReport {
        recon_loss: reconstruction_metric(model, dataset.items())?,
        entropy: if emitting.is_empty() { 0.0 } else { token_entropy(&emitting)? },
        utilization: codebook_utilization(&counts)?,
    })
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// side is constant or the lengths differ.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, InputDims, NormStats, SyntheticConfig};
    use crate::model::{Linear, Mlp, ModelConfig};
    use crate::numerics::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn entropy_values() {
        assert!((token_entropy(&[vec![5; 16]]).unwrap() - 16f64.ln()).abs() < 1e-12);
        let mut one = vec![0; 16];
        one[3] = 40;
        assert_eq!(token_entropy(&[one.clone()]).unwrap(), 0.0);
        let e = token_entropy(&[vec![3, 1]]).unwrap();
        assert!((e - 0.562335).abs() < 1e-6);
        assert!(token_entropy(&[vec![0, 0]]).is_err());
        assert!(token_entropy(&[]).is_err());
        assert_eq!(codebook_utilization(&[one]).unwrap(), 1.0 / 16.0);
    }

    #[test]
    fn utilization_values() {
        assert_eq!(codebook_utilization(&[vec![1, 2, 3]]).unwrap(), 1.0);
        let c = vec![1, 1, 1, 1, 1, 1, 1, 0, 0, 0];
        assert!((codebook_utilization(&[c]).unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn utilization_matches_set_membership() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = 20;
        let picks: Vec<Vec<usize>> = (0..3).map(|_| (0..15).map(|_| rng.random_range(0..k)).collect()).collect();
        let counts: Vec<Vec<u64>> = picks
            .iter()
            .map(|p| {
                let mut c = vec![0; k];
                p.iter().for_each(|&i| c[i] += 1);
                c
            })
            .collect();
        let want = picks
            .iter()
            .map(|p| p.iter().collect::<std::collections::BTreeSet<_>>().len() as f64 / k as f64)
            .sum::<f64>()
            / 3.0;
        assert!((codebook_utilization(&counts).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn spearman_handles_ties_and_constants() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(spearman(&[1.0, 2.0], &[1.0, 1.0]).is_none());
    }

    fn tiny() -> (MixQuantModel<f64>, Dataset<f64>) {
        let dims = InputDims::new(4, 4, 4);
        let ds = generate_synthetic::<f64>(&SyntheticConfig::new(30, dims, 3, 1.1, 2)).unwrap().dataset;
        let cfg = ModelConfig {
            dims,
            latent_dim: 4,
            codebook_size: 5,
            n_shared: 1,
            n_text: 1,
            n_vision: 1,
            n_behavior: 3,
        };
        let m = MixQuantModel::new(cfg, ds.norm_stats(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        (m, ds)
    }

    fn set_router_bias(m: &mut MixQuantModel<f64>, bias: f64) {
        let sizes = m.router.sizes();
        let mut layers: Vec<Linear<f64>> = sizes.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect();
        layers.last_mut().unwrap().bias = Tensor::filled(1, 3, bias);
        m.router = Mlp::from_layers(layers).unwrap();
    }

    #[test]
    fn router_sign_controls_padding() {
        let (mut m, ds) = tiny();
        set_router_bias(&mut m, -1.0);
        let sids = tokenize(&m, ds.items(), 0.0).unwrap();
        assert_eq!(sids.len(), ds.len());
        for s in &sids {
            assert_eq!(s.codes.len(), 6);
            assert_eq!(&s.codes[3..], &[5, 5, 5]);
            assert!(s.codes[..3].iter().all(|&c| c < 5));
            assert_eq!(s.active_behavior, 0);
        }
        set_router_bias(&mut m, 1.0);
        let sids = tokenize(&m, ds.items(), 0.0).unwrap();
        assert!(sids.iter().all(|s| s.codes.iter().all(|&c| c < 5) && s.active_behavior == 3));
        assert_eq!(tokenize_item(&m, &ds.items()[7], 0.0).unwrap(), sids[7]);
    }

    #[test]
    fn huge_threshold_pads_everything_and_padding_is_monotone() {
        let (m, ds) = tiny();
        let pads = |t: f64| -> Vec<usize> {
            tokenize(&m, ds.items(), t)
                .unwrap()
                .iter()
                .map(|s| s.codes.iter().filter(|&&c| c == 5).count())
                .collect()
        };
        let mut prev = pads(-1.0);
        for t in [0.0, 0.05, 0.2, 0.5, 1.0, 1e9] {
            let cur = pads(t);
            assert!(cur.iter().zip(&prev).all(|(c, p)| c >= p));
            prev = cur;
        }
        assert!(prev.iter().all(|&p| p == 3));
    }

    #[test]
    fn reconstruction_matches_per_item_loop() {
        let (m, ds) = tiny();
        let got = reconstruction_metric(&m, ds.items()).unwrap();
        let mut want = 0.0;
        for item in ds.items() {
            let batch = Batch::from_items([item], ds.norm_stats()).unwrap();
            let tape = Tape::new();
            let f = m.bind(&tape).forward(&batch, 0.25).unwrap();
            let e = item.concatenated();
            want += f.reconstruction.value().data().iter().zip(&e).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        want /= ds.len() as f64;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn exact_decoder_gives_zero_reconstruction() {
        // One text/vision/behavior-free item: all-zero embeddings and an
        // all-zero model reconstruct exactly.
        let dims = InputDims::new(2, 2, 2);
        let cfg = ModelConfig {
            dims,
            latent_dim: 2,
            codebook_size: 2,
            n_shared: 1,
            n_text: 1,
            n_vision: 1,
            n_behavior: 1,
        };
        let m = MixQuantModel::<f64>::zeros(cfg, NormStats::new(0.0, 0.0)).unwrap();
        let item = ItemRecord {
            item_id: "z".into(),
            text: vec![0.0; 2],
            vision: vec![0.0; 2],
            behavior: vec![0.0; 2],
        };
        assert_eq!(reconstruction_metric(&m, &[item]).unwrap(), 0.0);
    }

    #[test]
    fn report_fields_are_finite_and_bounded() {
        let (m, ds) = tiny();
        let r = quant_report(&m, &ds, 0.0).unwrap();
        assert!(r.recon_loss.is_finite());
        assert!(r.entropy >= 0.0 && r.entropy <= 5f64.ln() + 1e-12);
        assert!((0.0..=1.0).contains(&r.utilization));
    }

    #[test]
    fn sid_jsonl_shape() {
        let s = SemanticIds {
            item_id: "a".into(),
            codes: vec![1, 2, 7],
            active_behavior: 0,
        };
        let mut buf = Vec::new();
        write_sid_jsonl(&[s], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "{\"item_id\":\"a\",\"codes\":[1,2,7],\"active_behavior\":0}\n");
    }
}
