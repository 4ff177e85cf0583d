use mixquant::align::{alignment_weight, behavior_content_contrastive_loss, content_contrastive_loss};
use mixquant::data::{generate_synthetic, InputDims, NormStats, SyntheticConfig};
use mixquant::metrics::{code_counts, spearman, token_entropy, tokenize};
use mixquant::model::{Batch, MixQuantModel, ModelConfig};
use mixquant::numerics::{finite_diff_check, Tape, Tensor};
use mixquant::quantize::{nearest_codeword, quantize_all, ExpertKind, ExpertTag};
use mixquant::router::{route_behavior, target_sparsity, SparsityState};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |d| Tensor::from_vec(rows, cols, d).unwrap())
}

fn sized_matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| matrix(r, c, -2.0, 2.0))
}

fn vec_rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    t.iter_rows().map(<[f64]>::to_vec).collect()
}

fn small_model(seed: u64, dims: InputDims, n_behavior: usize) -> MixQuantModel<f64> {
    let cfg = ModelConfig {
        dims,
        latent_dim: 4,
        codebook_size: 5,
        n_shared: 1,
        n_text: 2,
        n_vision: 1,
        n_behavior,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MixQuantModel::new(cfg, NormStats::new(0.0, 3.0), &mut rng).unwrap()
}

fn random_batch(seed: u64, b: usize, dims: InputDims) -> Batch<f64> {
    let data = generate_synthetic::<f64>(&SyntheticConfig::new(b, dims, 1, 1.1, seed)).unwrap();
    Batch::from_items(data.dataset.items(), NormStats::new(0.0, 3.0)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    // --- numerics ---

    #[test]
    fn smooth_op_chain_matches_finite_differences(a in matrix(3, 4, -2.0, 2.0), w in matrix(4, 3, -2.0, 2.0)) {
        let report = finite_diff_check(
            |_, v| {
                let h = v[0].matmul(v[1]);
                let s = h.sigmoid() * h.normalize_rows();
                (s.log_softmax() + h.exp().scale(0.1)).sum()
            },
            &[a, w],
            1e-5,
            1e-4,
        ).unwrap();
        prop_assert!(report.passed(), "{}", report.max_rel_err());
    }

    #[test]
    fn relu_matches_finite_differences_away_from_kinks(x in matrix(4, 3, -2.0, 2.0)) {
        prop_assume!(x.data().iter().all(|v| v.abs() >= 1e-3));
        let report = finite_diff_check(|_, v| (v[0].relu() * v[0]).mean(), &[x], 1e-5, 1e-4).unwrap();
        prop_assert!(report.passed());
        prop_assert_eq!(report.nonsmooth(), 0);
    }

    #[test]
    fn stop_gradient_is_identity_forward_and_zero_backward(x in sized_matrix(4, 4)) {
        let tape = Tape::new();
        let p = tape.param(x.clone());
        let sg = p.stop_gradient();
        prop_assert_eq!(sg.to_tensor(), x);
        let g = (sg * sg).sum().backward().unwrap();
        prop_assert!(g.get(p).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn shared_subexpressions_accumulate(x in sized_matrix(3, 3)) {
        let tape = Tape::new();
        let p = tape.param(x.clone());
        let y = p.scale(2.0);
        let g = (y + y + p).sum().backward().unwrap();
        prop_assert!(g.get(p).unwrap().data().iter().all(|&v| v == 5.0));
    }

    // --- data ---

    #[test]
    fn synthetic_generation_is_pure_and_norms_follow_popularity(
        n in 20usize..200, k in 1usize..6, s in 0.5f64..2.0, seed in any::<u64>()
    ) {
        let cfg = SyntheticConfig::new(n, InputDims::new(6, 5, 7), k.min(n), s, seed);
        let a = generate_synthetic::<f64>(&cfg).unwrap();
        let b = generate_synthetic::<f64>(&cfg).unwrap();
        prop_assert_eq!(&a.dataset, &b.dataset);
        let stats = a.dataset.norm_stats();
        let norms: Vec<f64> = a.dataset.items().iter().map(|i| i.behavior_norm()).collect();
        prop_assert!(norms.iter().all(|&x| stats.min <= x && x <= stats.max));
        // Rank 1 is the most popular item, so popularity is the negated rank.
        let popularity: Vec<f64> = a.popularity_rank.iter().map(|&r| -(r as f64)).collect();
        prop_assert!(spearman(&popularity, &norms).unwrap() >= 0.9);
    }

    // --- model ---

    #[test]
    fn specific_experts_are_isolated_from_other_modalities(seed in 0u64..1000, shift in -1.0f64..1.0) {
        let dims = InputDims::new(5, 4, 6);
        let m = small_model(seed, dims, 2);
        prop_assert_eq!(m.sid_length(), 1 + 2 + 1 + 2);
        let batch = random_batch(seed, 3, dims);
        let mut moved = batch.clone();
        moved.vision = moved.vision.map(|v| v + shift);

        let tape = Tape::new();
        let bound = m.bind(&tape);
        let f0 = bound.forward(&batch, 0.25).unwrap();
        let f1 = bound.forward(&moved, 0.25).unwrap();
        prop_assert_eq!(f0.gate_text.to_tensor(), f1.gate_text.to_tensor());
        for ((tag, z0), (_, z1)) in f0.latents.iter().zip(&f1.latents) {
            if tag.kind == ExpertKind::Text {
                prop_assert_eq!(z0.to_tensor(), z1.to_tensor());
            }
        }
    }

    #[test]
    fn decode_forward_depends_only_on_quantized_latent(seed in 0u64..1000, z in matrix(2, 4, -2.0, 2.0), z2 in matrix(2, 4, -2.0, 2.0)) {
        let m = small_model(seed, InputDims::new(3, 3, 3), 1);
        let tape = Tape::new();
        let bound = m.bind(&tape);
        let zq = tape.constant(Tensor::from_rows(&[[0.5, -0.1, 0.3, 0.9], [0.0, 0.2, -0.7, 0.4]]).unwrap());
        let a = bound.decode(tape.param(z), zq).to_tensor();
        let b = bound.decode(tape.param(z2), zq).to_tensor();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    // --- quantize ---

    #[test]
    fn nearest_codeword_ignores_positive_rescaling(
        cb in (1usize..20, 1usize..8).prop_flat_map(|(k, d)| (matrix(k, d, -1.0, 1.0), prop::collection::vec(-1.0f64..1.0, d))),
        exp in -8i32..8,
    ) {
        let (book, z) = cb;
        let base = nearest_codeword(&z, &book);
        prop_assert!(base.code_index < book.rows());
        let scaled: Vec<f64> = z.iter().map(|v| v * 2f64.powi(exp)).collect();
        prop_assert_eq!(nearest_codeword(&scaled, &book).code_index, base.code_index);
    }

    #[test]
    fn vq_loss_is_nonnegative_and_zero_on_codewords(book in matrix(6, 3, -1.0, 1.0), z in matrix(4, 3, -1.0, 1.0), pick in prop::collection::vec(0usize..6, 4)) {
        let tag = ExpertTag::new(ExpertKind::Shared, 0);
        let tape = Tape::new();
        let cb = tape.param(book.clone());
        let q = quantize_all(&[(tag, tape.param(z))], &[(tag, cb)], 0.25).unwrap();
        prop_assert!(q.vq_loss.item() >= 0.0);
        prop_assert!(q.assignments[0].iter().all(|&k| k < 6));

        let on_codewords = Tensor::from_rows(&pick.iter().map(|&k| book.row(k).to_vec()).collect::<Vec<_>>()).unwrap();
        let q = quantize_all(&[(tag, tape.param(on_codewords))], &[(tag, cb)], 0.25).unwrap();
        prop_assert!(q.vq_loss.item().abs() < 1e-24);
    }

    // --- align ---

    #[test]
    fn controller_is_monotone_with_unit_top(alpha in 0.1f64..30.0, beta in -10.0f64..20.0) {
        prop_assert_eq!(alignment_weight(1.0, alpha, beta), 1.0);
        let grid: Vec<f64> = (0..=100).map(|i| alignment_weight(i as f64 / 100.0, alpha, beta)).collect();
        prop_assert!(grid.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(grid.iter().all(|&w| w > 0.0 && w <= 1.0));
    }

    #[test]
    fn contrastive_losses_match_loops(
        mats in (2usize..9).prop_flat_map(|b| (matrix(b, 5, -1.0, 1.0), matrix(b, 5, -1.0, 1.0))),
        tau in 0.05f64..2.0,
    ) {
        let (a, b) = mats;
        let unit = |m: &Tensor<f64>| -> Vec<Vec<f64>> {
            vec_rows(m).into_iter().map(|r| {
                let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                r.into_iter().map(|x| x / n).collect()
            }).collect()
        };
        let nce = |p: &[Vec<f64>], q: &[Vec<f64>]| -> Vec<f64> {
            (0..p.len()).map(|i| {
                let l: Vec<f64> = q.iter().map(|qj| p[i].iter().zip(qj).map(|(x, y)| x * y).sum::<f64>() / tau).collect();
                let lse = l.iter().map(|v| v.exp()).sum::<f64>().ln();
                lse - l[i]
            }).collect()
        };
        let (ua, ub) = (unit(&a), unit(&b));
        let tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let n = ua.len() as f64;
        let want = nce(&ua, &ub).iter().zip(nce(&ub, &ua)).map(|(x, y)| x + y).sum::<f64>() / n;
        prop_assert!((content_contrastive_loss(va, vb, tau).unwrap().item() - want).abs() < 1e-10);
        let got = behavior_content_contrastive_loss(va, vb, tau).unwrap().to_tensor();
        for (g, w) in got.data().iter().zip(nce(&ua, &ub)) {
            prop_assert!((g - w).abs() < 1e-10);
        }
    }

    // --- router ---

    #[test]
    fn router_weights_are_nonnegative_with_quantized_sparsity(pre in (1usize..6, 1usize..9).prop_flat_map(|(b, n)| matrix(b, n, -2.0, 2.0)), nn in -1.0f64..2.0) {
        let tape = Tape::new();
        let b = pre.rows();
        let n_b = pre.cols();
        let r = route_behavior(tape.constant(pre), tape.constant(Tensor::filled(b, 1, nn)));
        prop_assert!(r.weights.value().data().iter().all(|&w| w >= 0.0));
        for o in &r.outputs {
            let inactive = o.active_mask.iter().filter(|&&a| !a).count();
            prop_assert_eq!(o.s_current, 1.0 - o.active_count() as f64 / n_b as f64);
            prop_assert_eq!(o.active_count() + inactive, n_b);
        }
    }

    #[test]
    fn lambda_controller_closes_the_gap(target in 0.05f64..0.6, gain in 1.0f64..20.0, start in 1e-4f64..1.0) {
        // Density responds monotonically to λ: sparsity = 1 − exp(−gain·λ).
        let sparsity = |l: f64| 1.0 - (-gain * l).exp();
        let mut state = SparsityState::new(start, 1.02, 1.0 / 3.0, 1e-6, 10.0).unwrap();
        let gap0 = (sparsity(state.lambda) - target).abs();
        for _ in 0..200 {
            state = state.updated(target, sparsity(state.lambda));
        }
        let gap = (sparsity(state.lambda) - target).abs();
        // Once bracketing the target the loop jitters by at most one 2% λ
        // step, which moves the sparsity by at most 0.02/e.
        prop_assert!(gap < gap0 || gap <= 0.02 / std::f64::consts::E, "gap {gap} from {gap0}");
    }

    #[test]
    fn target_sparsity_stays_in_unit_interval(n in -1.0f64..2.0, theta in 0.0f64..1.0) {
        let s = target_sparsity(n, theta);
        prop_assert!((0.0..=1.0).contains(&s));
    }

    // --- metrics ---

    #[test]
    fn entropy_is_bounded_by_log_k(counts in prop::collection::vec(prop::collection::vec(0u64..50, 2..20), 1..4)) {
        prop_assume!(counts.iter().all(|c| c.iter().sum::<u64>() > 0));
        let h = token_entropy(&counts).unwrap();
        let k = counts.iter().map(Vec::len).max().unwrap() as f64;
        prop_assert!(h <= k.ln() + 1e-12);
        let uniform = counts.iter().all(|c| c.iter().all(|&v| v == c[0]));
        let all_uniform_k = uniform && counts.iter().all(|c| c.len() as f64 == k);
        prop_assert_eq!((h - k.ln()).abs() < 1e-12, all_uniform_k);
    }

    #[test]
    fn pad_only_in_behavior_positions(seed in 0u64..500, bias in -1.0f64..1.0, threshold in 0.0f64..0.5) {
        let dims = InputDims::new(4, 4, 4);
        let mut m = small_model(seed, dims, 3);
        let last = m.router.layers_mut().last_mut().unwrap();
        last.bias = last.bias.map(|b| b + bias);
        let data = generate_synthetic::<f64>(&SyntheticConfig::new(12, dims, 2, 1.1, seed)).unwrap();
        let sids = tokenize(&m, data.dataset.items(), threshold).unwrap();
        let offset = m.config().behavior_offset();
        let k = m.config().codebook_size;
        for s in &sids {
            prop_assert!(s.codes[..offset].iter().all(|&c| c < k));
            prop_assert_eq!(s.codes[offset..].iter().filter(|&&c| c != k).count(), s.active_behavior);
        }
        prop_assert!(code_counts(&sids, m.sid_length(), k).is_ok());
    }
}
