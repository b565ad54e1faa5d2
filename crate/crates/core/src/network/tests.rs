use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::kmax_k;

fn tiny(d_model: usize, n_heads: usize) -> NetworkConfig {
    NetworkConfig {
        d_model,
        n_heads,
        ffn_dim: 2 * d_model,
        dropout: 0.0,
        d_audio: 3,
        d_visual: 5,
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

type Mat = Vec<Vec<f64>>;

fn to_mat(a: &Array2<f64>) -> Mat {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn affine(x: &Mat, l: &Linear) -> Mat {
    x.iter()
        .map(|row| {
            (0..l.weight.ncols())
                .map(|j| l.bias[j] + (0..row.len()).map(|i| row[i] * l.weight[[i, j]]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn norm(x: &Mat, ln: &LayerNorm) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| ln.gain[j] * (v - mean) / (var + 1e-5).sqrt() + ln.shift[j])
                .collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
        .collect()
}

/// Straight-line encoder block: per-head softmax(Q K^T / sqrt(dh)) V, output
/// projection, residual, norm, GELU feed-forward, residual, norm.
fn block_oracle(b: &EncoderBlock, heads: usize, q_in: &Mat, kv_in: &Mat) -> Mat {
    let q = affine(q_in, &b.attn.query);
    let k = affine(kv_in, &b.attn.key);
    let v = affine(kv_in, &b.attn.value);
    let t = q.len();
    let d = q[0].len();
    let dh = d / heads;
    let mut concat = vec![vec![0.0; d]; t];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..t {
            let scores: Vec<f64> = (0..t)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in cols.clone() {
                concat[i][c] = (0..t).map(|j| exps[j] / z * v[j][c]).sum();
            }
        }
    }
    let n1 = norm(&add(&affine(&concat, &b.attn.output), q_in), &b.norm_attn);
    let act: Mat = affine(&n1, &b.ffn.inner)
        .into_iter()
        .map(|r| {
            r.into_iter()
                .map(|x| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh()))
                .collect()
        })
        .collect();
    norm(&add(&affine(&act, &b.ffn.outer), &n1), &b.norm_ffn)
}

fn assert_close(a: &Array2<f64>, b: &Mat, tol: f64) {
    for (i, row) in b.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            assert!((a[[i, j]] - v).abs() <= tol, "[{i},{j}] {} vs {v}", a[[i, j]]);
        }
    }
}

#[test]
fn cross_attention_matches_straight_line_oracle() {
    for heads in [1, 2] {
        let cfg = tiny(8, heads);
        let params = init_params(&cfg, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_matrix(&mut rng, 3, 8);
        let kv = random_matrix(&mut rng, 3, 8);
        let got = cross_attention(&q, &kv, &params.block, &cfg, None).unwrap();
        assert_close(&got, &block_oracle(&params.block, heads, &to_mat(&q), &to_mat(&kv)), 1e-12);
    }
}

#[test]
fn single_snippet_attends_to_its_only_value() {
    let cfg = tiny(8, 2);
    let mut params = init_params(&cfg, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let q = random_matrix(&mut rng, 1, 8);
    let kv = random_matrix(&mut rng, 1, 8);
    // Identity value/output maps expose the attention output through the residual.
    params.block.attn.value = Linear::zeros(8, 8);
    params.block.attn.output = Linear::zeros(8, 8);
    for i in 0..8 {
        params.block.attn.value.weight[[i, i]] = 1.0;
        params.block.attn.output.weight[[i, i]] = 1.0;
    }
    let expected = block_oracle(&params.block, 2, &to_mat(&q), &to_mat(&kv));
    let got = cross_attention(&q, &kv, &params.block, &cfg, None).unwrap();
    assert_close(&got, &expected, 1e-12);
    let (heads, weights) = multi_head_attention(&q, &kv, &kv, 2);
    assert!(weights.iter().all(|w| w.iter().all(|&x| x == 1.0)));
    assert_eq!(heads, kv);
}

#[test]
fn shape_mismatch_is_a_contract_error() {
    let cfg = tiny(8, 2);
    let params = init_params(&cfg, 0);
    let a = Array2::zeros((4, 3));
    let v = Array2::zeros((5, 5));
    assert!(matches!(forward_av(&a, &v, &params, &cfg, None), Err(crate::Error::Contract(_))));
    let q = Array2::zeros((4, 7));
    assert!(cross_attention(&q, &q, &params.block, &cfg, None).is_err());
    assert!(forward_visual(&Array2::zeros((4, 4)), &params.visual_path(), &cfg, None).is_err());
}

#[test]
fn k_values() {
    assert_eq!(kmax_k(15), 1);
    assert_eq!(kmax_k(16), 2);
    assert_eq!(kmax_k(32), 3);
    assert_eq!(kmax_pool(&[0.9, 0.1, 0.8, 0.2]), (0.9, vec![0]));
}

#[test]
fn zero_heads_give_half_everywhere() {
    let cfg = tiny(8, 2);
    let mut params = init_params(&cfg, 4);
    params.head_a = Linear::zeros(8, 1);
    params.head_v = Linear::zeros(8, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (b, _) = forward_av(&random_matrix(&mut rng, 6, 3), &random_matrix(&mut rng, 6, 5), &params, &cfg, None)
        .unwrap();
    assert!(b.snippet_scores.iter().all(|&s| s == 0.5));
    assert_eq!(b.p, 0.5);
    let (out, _) = forward_visual(&random_matrix(&mut rng, 6, 5), &params.visual_path(), &cfg, None).unwrap();
    assert_eq!(out.p, 0.5);
}

#[test]
fn initialization_conventions() {
    let cfg = tiny(8, 2);
    let a = init_params(&cfg, 9);
    assert_eq!(a, init_params(&cfg, 9));
    assert_ne!(a, init_params(&cfg, 10));
    assert!(a.block.norm_attn.gain.iter().all(|&g| g == 1.0));
    assert!(a.block.norm_ffn.shift.iter().all(|&s| s == 0.0));
    assert!(a.proj_v.bias.iter().all(|&b| b == 0.0));
    let bound = 1.0 / (cfg.d_visual as f64).sqrt();
    assert!(a.proj_v.weight.iter().all(|w| w.abs() <= bound));
    assert_eq!(init_twin(&cfg, 9), a.visual_path());
}

#[test]
fn parameter_counts_match_shape_sums() {
    let cfg = NetworkConfig::new(128, 1024);
    let params = init_params(&cfg, 0);
    let twin = init_twin(&cfg, 0);
    assert_eq!(count_parameters(&params), 131_200 + 16_512 + 66_048 + 131_712 + 512 + 258);
    assert_eq!(count_parameters(&params), 346_242);
    assert_eq!(count_parameters(&twin), 131_200 + 66_048 + 131_712 + 512 + 129);
    assert_eq!(count_parameters(&params) + count_parameters(&twin), 675_843);
    assert_eq!(parameter_counts(&cfg), (346_242, 675_843));

    let minimal = NetworkConfig {
        d_model: 1,
        n_heads: 1,
        ffn_dim: 1,
        dropout: 0.0,
        d_audio: 1,
        d_visual: 1,
    };
    assert_eq!(count_parameters(&init_params(&minimal, 0)), 24);
    assert_eq!(parameter_counts(&minimal).0, 24);
}

#[test]
fn twin_shapes_mirror_the_av_visual_path() {
    let cfg = tiny(8, 2);
    let mut av_shapes = std::collections::HashMap::new();
    init_params(&cfg, 0).visit(&mut |n, s, _| {
        av_shapes.insert(n.to_string(), s);
    });
    init_twin(&cfg, 0).visit(&mut |n, s, _| assert_eq!(av_shapes[n], s, "{n}"));
}

#[test]
fn twin_equals_av_visual_stream_with_equal_attention_inputs() {
    // With audio projected onto the same vectors as visual, the visual query stream
    // of the AV network is exactly the twin's self-attention stream.
    let cfg = NetworkConfig { d_audio: 5, ..tiny(8, 2) };
    let mut params = init_params(&cfg, 6);
    params.proj_a = params.proj_v.clone();
    let twin = params.visual_path();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let visual = random_matrix(&mut rng, 7, 5);
    let (b, _) = forward_av(&visual, &visual, &params, &cfg, None).unwrap();
    let (out, _) = forward_visual(&visual, &twin, &cfg, None).unwrap();
    assert_eq!(b.h_v, out.h);
    assert_eq!(b.l_v, out.logits);
}

#[test]
fn forward_is_deterministic_without_dropout() {
    let cfg = NetworkConfig { dropout: 0.1, ..tiny(8, 2) };
    let params = init_params(&cfg, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_matrix(&mut rng, 5, 3);
    let v = random_matrix(&mut rng, 5, 5);
    let x = forward_av(&a, &v, &params, &cfg, None).unwrap().0;
    let y = forward_av(&a, &v, &params, &cfg, None).unwrap().0;
    assert_eq!(x.h_a, y.h_a);
    assert_eq!(x.p, y.p);
    let mut r1 = ChaCha8Rng::seed_from_u64(5);
    let z = forward_av(&a, &v, &params, &cfg, Some(&mut r1)).unwrap().0;
    assert_ne!(x.h_a, z.h_a);
}

#[test]
fn attention_is_shared_between_directions() {
    let cfg = tiny(8, 2);
    let params = init_params(&cfg, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_matrix(&mut rng, 4, 3);
    let v = random_matrix(&mut rng, 4, 5);
    let (b, cache) = forward_av(&a, &v, &params, &cfg, None).unwrap();
    let (b0, _) = forward_av(&Array2::zeros((4, 3)), &v, &params, &cfg, None).unwrap();
    assert_ne!(b.h_a, b0.h_a);
    assert_ne!(b.h_v, b0.h_v);

    let zero_l = Array1::zeros(4);
    let ones = Array2::ones((4, 8));
    let zeros = Array2::zeros((4, 8));
    let mut from_audio = params.zeros_like();
    backward_av(&params, &mut from_audio, &cfg, &cache, &b, &ones, &zeros, &zero_l);
    let mut from_visual = params.zeros_like();
    backward_av(&params, &mut from_visual, &cfg, &cache, &b, &zeros, &ones, &zero_l);
    for g in [&from_audio, &from_visual] {
        assert!(g.block.attn.query.weight.iter().any(|x| x.abs() > 0.0));
        assert!(g.block.attn.key.weight.iter().any(|x| x.abs() > 0.0));
        assert!(g.proj_a.weight.iter().any(|x| x.abs() > 0.0));
        assert!(g.proj_v.weight.iter().any(|x| x.abs() > 0.0));
    }
}

/// Sort-based oracle for K-max pooling.
fn kmax_oracle(scores: &[f64]) -> f64 {
    let mut s = scores.to_vec();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let k = scores.len() / 16 + 1;
    s[..k].iter().sum::<f64>() / k as f64
}

proptest! {
    #[test]
    fn kmax_matches_sort_oracle(logits in prop::collection::vec(-8.0f64..8.0, 1..80)) {
        let scores: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
        let (p, top) = kmax_pool(&scores);
        prop_assert!((p - kmax_oracle(&scores)).abs() <= 1e-12);
        // Selecting on logits or on sigmoids picks the same snippets.
        prop_assert_eq!(top, top_k_indices(&logits, kmax_k(logits.len())));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn permuting_snippets_permutes_outputs(seed in any::<u64>(), t in 1usize..9) {
        let cfg = tiny(8, 2);
        let params = init_params(&cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let a = random_matrix(&mut rng, t, 3);
        let v = random_matrix(&mut rng, t, 5);
        let mut perm: Vec<usize> = (0..t).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let pa = a.select(ndarray::Axis(0), &perm);
        let pv = v.select(ndarray::Axis(0), &perm);
        let (b, _) = forward_av(&a, &v, &params, &cfg, None).unwrap();
        let (pb, _) = forward_av(&pa, &pv, &params, &cfg, None).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            for j in 0..8 {
                prop_assert!((pb.h_a[[i, j]] - b.h_a[[src, j]]).abs() <= 1e-12);
                prop_assert!((pb.h_v[[i, j]] - b.h_v[[src, j]]).abs() <= 1e-12);
            }
            prop_assert!((pb.l_a[i] - b.l_a[src]).abs() <= 1e-12);
            prop_assert!((pb.l_v[i] - b.l_v[src]).abs() <= 1e-12);
        }
        prop_assert!((pb.p - b.p).abs() <= 1e-12);
    }
}
