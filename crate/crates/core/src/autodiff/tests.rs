use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::grad_check;
use super::params::{ParamGroup, ParamStore};
use super::tape::{NodeId, Tape};
use crate::error::Error;

const LN2: f64 = std::f64::consts::LN_2;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn leaf2(tape: &mut Tape<f64>, rng: &mut ChaCha8Rng, r: usize, c: usize) -> NodeId {
    let data = rand_vec(rng, r * c, -1.0, 1.0);
    tape.leaf(data, vec![r, c], true).unwrap()
}

fn leaf1(tape: &mut Tape<f64>, rng: &mut ChaCha8Rng, n: usize) -> NodeId {
    let data = rand_vec(rng, n, -1.0, 1.0);
    tape.leaf(data, vec![n], true).unwrap()
}

/// Scalar loss with non-uniform weights so gradients are informative.
fn wsum(tape: &mut Tape<f64>, rng: &mut ChaCha8Rng, x: NodeId) -> NodeId {
    let n = tape.value(x).len();
    let shape = tape.shape(x).to_vec();
    let w = tape.constant(rand_vec(rng, n, 0.1, 1.0), shape).unwrap();
    let m = tape.mul(x, w).unwrap();
    tape.sum_all(m)
}

fn assert_grad_ok(tape: &mut Tape<f64>, loss: NodeId, leaves: &[NodeId]) {
    let report = grad_check(tape, loss, leaves, 1e-5).unwrap();
    assert!(
        report.max_rel_err < 1e-4,
        "max rel err {} at {}",
        report.max_rel_err,
        report.worst
    );
}

// ── analytic spot checks ────────────────────────────────────────────────

#[test]
fn softmax_uniform_logits() {
    let mut t = Tape::<f64>::eval();
    let x = t.constant(vec![0.0, 0.0, 0.0], vec![3]).unwrap();
    let s = t.softmax(x).unwrap();
    for &v in t.value(s) {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn matmul_identity_passthrough() {
    let mut t = Tape::<f64>::eval();
    let eye = t
        .constant(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], vec![3, 3])
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let data = rand_vec(&mut rng, 12, -2.0, 2.0);
    let x = t.constant(data.clone(), vec![3, 4]).unwrap();
    let y = t.matmul(eye, x).unwrap();
    assert_eq!(t.value(y), &data[..]);
}

#[test]
fn affine_combine_identity() {
    let mut t = Tape::<f64>::eval();
    let x = t.constant(vec![1.5, -2.0, 0.25], vec![3]).unwrap();
    let y = t.constant(vec![9.0, 9.0, 9.0], vec![3]).unwrap();
    let z = t.affine_combine(1.0, x, 0.0, y).unwrap();
    assert_eq!(t.value(z), t.value(x));
}

#[test]
fn kl_equal_distributions_is_zero() {
    let mut t = Tape::<f64>::eval();
    let p = t.constant(vec![0.0, 1.0, 0.0], vec![3]).unwrap();
    let q = t.constant(vec![0.0, 1.0, 0.0], vec![3]).unwrap();
    let l = t.kl_loss(p, q).unwrap();
    assert!(t.scalar(l).abs() < 1e-12);
}

#[test]
fn kl_uniform_pred_one_hot_target() {
    let mut t = Tape::<f64>::eval();
    let p = t.constant(vec![0.5, 0.5], vec![2]).unwrap();
    let q = t.constant(vec![1.0, 0.0], vec![2]).unwrap();
    let l = t.kl_loss(p, q).unwrap();
    assert!((t.scalar(l) - LN2).abs() < 1e-12);
}

#[test]
fn kl_matches_scalar_oracle() {
    // Oracle: direct scalar loop over Σ t (ln t − ln p), written against
    // the definition rather than the tape.
    fn oracle(pred: &[f64], target: &[f64]) -> f64 {
        let mut s = 0.0;
        for (&p, &t) in pred.iter().zip(target) {
            if t > 0.0 {
                s += t * (t.ln() - p.max(1e-12).ln());
            }
        }
        s
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let n = rng.random_range(2..8);
        let mut p = rand_vec(&mut rng, n, 0.01, 1.0);
        let mut q = rand_vec(&mut rng, n, 0.01, 1.0);
        let (sp, sq) = (p.iter().sum::<f64>(), q.iter().sum::<f64>());
        for v in p.iter_mut() {
            *v /= sp;
        }
        for v in q.iter_mut() {
            *v /= sq;
        }
        let expect = oracle(&p, &q);
        let mut t = Tape::<f64>::eval();
        let pn = t.constant(p, vec![n]).unwrap();
        let qn = t.constant(q, vec![n]).unwrap();
        let l = t.kl_loss(pn, qn).unwrap();
        assert!((t.scalar(l) - expect).abs() < 1e-10);
    }
}

#[test]
fn kl_rejects_unnormalized() {
    let mut t = Tape::<f64>::eval();
    let p = t.constant(vec![0.2, 0.2], vec![2]).unwrap();
    let q = t.constant(vec![1.0, 0.0], vec![2]).unwrap();
    assert!(matches!(t.kl_loss(p, q), Err(Error::Shape { .. })));
}

#[test]
fn bce_half_score_is_ln_two() {
    let mut t = Tape::<f64>::eval();
    let s = t.scalar_leaf(0.5);
    let l0 = t.bce_loss(s, 0.0).unwrap();
    let l1 = t.bce_loss(s, 1.0).unwrap();
    assert!((t.scalar(l0) - LN2).abs() < 1e-12);
    assert!((t.scalar(l1) - LN2).abs() < 1e-12);
    assert!((t.scalar(l1) - 0.693).abs() < 1e-3);
}

#[test]
fn bce_perfect_score() {
    let mut t = Tape::<f64>::eval();
    let s = t.scalar_leaf(1.0);
    let l = t.bce_loss(s, 1.0).unwrap();
    assert!(t.scalar(l) >= 0.0 && t.scalar(l) < 1e-9);
}

#[test]
fn bce_confident_wrong() {
    let mut t = Tape::<f64>::eval();
    let s = t.scalar_leaf(0.9);
    let l = t.bce_loss(s, 0.0).unwrap();
    assert!((t.scalar(l) - 2.3026).abs() < 1e-4);
}

#[test]
fn square_gradient_at_three() {
    let mut t = Tape::<f64>::eval();
    let x = t.leaf(vec![3.0], vec![1], true).unwrap();
    let sq = t.mul(x, x).unwrap();
    let loss = t.sum_all(sq);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x), vec![6.0]);
}

// ── finite-difference checks per primitive ──────────────────────────────

fn check_matmul(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, k, n) = (rng.random_range(2..6), rng.random_range(2..6), rng.random_range(2..6));
    let mut t = Tape::<f64>::eval();
    let a = leaf2(&mut t, &mut rng, m, k);
    let b = leaf2(&mut t, &mut rng, k, n);
    let y = t.matmul(a, b).unwrap();
    let loss = wsum(&mut t, &mut rng, y);
    assert_grad_ok(&mut t, loss, &[a, b]);
}

fn check_vecmat(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, n) = (rng.random_range(2..6), rng.random_range(2..6));
    let mut t = Tape::<f64>::eval();
    let x = leaf1(&mut t, &mut rng, k);
    let w = leaf2(&mut t, &mut rng, k, n);
    let y = t.vecmat(x, w).unwrap();
    let loss = wsum(&mut t, &mut rng, y);
    assert_grad_ok(&mut t, loss, &[x, w]);
}

fn check_elementwise(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, c) = (rng.random_range(2..5), rng.random_range(2..5));
    let mut t = Tape::<f64>::eval();
    let a = leaf2(&mut t, &mut rng, r, c);
    let b = leaf2(&mut t, &mut rng, r, c);
    let sum = t.add(a, b).unwrap();
    let prod = t.mul(sum, a).unwrap();
    let tr = t.transpose(prod).unwrap();
    let sc = t.scale(tr, 0.7);
    let af = t.affine_combine(0.3, sc, -1.2, sc).unwrap();
    let loss = wsum(&mut t, &mut rng, af);
    assert_grad_ok(&mut t, loss, &[a, b]);
}

fn check_bias_and_pool(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, c) = (rng.random_range(2..6), rng.random_range(2..6));
    let mut t = Tape::<f64>::eval();
    let x = leaf2(&mut t, &mut rng, r, c);
    let bias = leaf1(&mut t, &mut rng, c);
    let y = t.add_row_broadcast(x, bias).unwrap();
    let m0 = t.mean_axis(y, 0).unwrap();
    let m1 = t.mean_axis(y, 1).unwrap();
    let l0 = wsum(&mut t, &mut rng, m0);
    let l1 = wsum(&mut t, &mut rng, m1);
    let loss = t.mean_scalars(&[l0, l1]).unwrap();
    assert_grad_ok(&mut t, loss, &[x, bias]);
}

fn check_masked_mean(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, c) = (rng.random_range(2..6), rng.random_range(2..6));
    let mut mask: Vec<u8> = (0..r).map(|_| rng.random_range(0..2)).collect();
    mask[0] = 1;
    let mut t = Tape::<f64>::eval();
    let x = leaf2(&mut t, &mut rng, r, c);
    let y = t.masked_mean_rows(x, &mask).unwrap();
    let loss = wsum(&mut t, &mut rng, y);
    assert_grad_ok(&mut t, loss, &[x]);
}

fn check_activations(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(3..8);
    let mut t = Tape::<f64>::eval();
    let x = leaf1(&mut t, &mut rng, n);
    let g = t.gelu(x);
    let s = t.sigmoid(g);
    let e = t.exp(s);
    let l = t.ln(e);
    let loss = wsum(&mut t, &mut rng, l);
    assert_grad_ok(&mut t, loss, &[x]);
}

fn check_softmax_rows(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, c) = (rng.random_range(2..5), rng.random_range(2..6));
    let mut t = Tape::<f64>::eval();
    let x = leaf2(&mut t, &mut rng, r, c);
    let y = t.softmax(x).unwrap();
    let loss = wsum(&mut t, &mut rng, y);
    assert_grad_ok(&mut t, loss, &[x]);
}

fn check_layer_norm(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, c) = (rng.random_range(2..6), rng.random_range(3..8));
    let mut t = Tape::<f64>::eval();
    let x = leaf2(&mut t, &mut rng, r, c);
    let gamma = t.leaf(rand_vec(&mut rng, c, 0.5, 1.5), vec![c], true).unwrap();
    let beta = leaf1(&mut t, &mut rng, c);
    let y = t.layer_norm(x, gamma, beta, 1e-5).unwrap();
    let loss = wsum(&mut t, &mut rng, y);
    assert_grad_ok(&mut t, loss, &[x, gamma, beta]);
}

fn check_shaping(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, c) = (rng.random_range(2..5), rng.random_range(4..7));
    let mut t = Tape::<f64>::eval();
    let a = leaf2(&mut t, &mut rng, r, c);
    let b = leaf2(&mut t, &mut rng, r, 3);
    let cat = t.concat_cols(&[a, b]).unwrap();
    let sl = t.slice_cols(cat, 1, c + 2).unwrap();
    let flat = t.reshape(sl, vec![r * (c + 1)]).unwrap();
    let loss = wsum(&mut t, &mut rng, flat);
    assert_grad_ok(&mut t, loss, &[a, b]);
}

fn check_embedding_and_index(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v, d) = (rng.random_range(4..8), rng.random_range(2..5));
    let len = rng.random_range(2..6);
    let ids: Vec<usize> = (0..len).map(|_| rng.random_range(0..v)).collect();
    let mut t = Tape::<f64>::eval();
    let table = leaf2(&mut t, &mut rng, v, d);
    let emb = t.embedding(table, &ids).unwrap();
    let pooled = t.mean_axis(emb, 0).unwrap();
    let i0 = t.index(pooled, 0).unwrap();
    let i1 = t.index(pooled, d - 1).unwrap();
    let loss = t.mean_scalars(&[i0, i1]).unwrap();
    assert_grad_ok(&mut t, loss, &[table]);
}

fn check_key_mask(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = rng.random_range(3..6);
    let mut mask: Vec<u8> = (0..l).map(|_| rng.random_range(0..2)).collect();
    mask[0] = 1;
    let mut t = Tape::<f64>::eval();
    let x = leaf2(&mut t, &mut rng, l, l);
    let masked = t.key_mask_bias(x, &mask).unwrap();
    let att = t.softmax(masked).unwrap();
    let loss = wsum(&mut t, &mut rng, att);
    assert_grad_ok(&mut t, loss, &[x]);
}

fn check_mix(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, c) = (rng.random_range(2..5), rng.random_range(2..5));
    let mut t = Tape::<f64>::eval();
    let x = leaf2(&mut t, &mut rng, r, c);
    let y = leaf2(&mut t, &mut rng, r, c);
    let lam = t.leaf(vec![rng.random_range(0.1..0.9)], vec![], true).unwrap();
    let mixed = t.mix(x, y, lam).unwrap();
    let loss = wsum(&mut t, &mut rng, mixed);
    assert_grad_ok(&mut t, loss, &[x, y, lam]);
}

fn check_losses(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..6);
    let mut t = Tape::<f64>::eval();
    let logits = leaf1(&mut t, &mut rng, n);
    let target_logits = leaf1(&mut t, &mut rng, n);
    let pred = t.softmax(logits).unwrap();
    let target = t.softmax(target_logits).unwrap();
    let kl = t.kl_loss(pred, target).unwrap();
    let sx = leaf1(&mut t, &mut rng, 1);
    let s0 = t.index(sx, 0).unwrap();
    let sig = t.sigmoid(s0);
    let bce = t.bce_loss(sig, f64::from(seed % 2 == 0)).unwrap();
    let loss = t.mean_scalars(&[kl, bce]).unwrap();
    assert_grad_ok(&mut t, loss, &[logits, target_logits, sx]);
}

#[test]
fn primitives_match_central_differences() {
    for seed in 0..22 {
        check_matmul(seed);
        check_vecmat(seed);
        check_elementwise(seed);
        check_bias_and_pool(seed);
        check_masked_mean(seed);
        check_activations(seed);
        check_softmax_rows(seed);
        check_layer_norm(seed);
        check_shaping(seed);
        check_embedding_and_index(seed);
        check_key_mask(seed);
        check_mix(seed);
        check_losses(seed);
    }
}

#[test]
fn mlp_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut t = Tape::<f64>::eval();
    let x = leaf1(&mut t, &mut rng, 4);
    let w1 = leaf2(&mut t, &mut rng, 4, 8);
    let b1 = leaf1(&mut t, &mut rng, 8);
    let w2 = leaf2(&mut t, &mut rng, 8, 3);
    let b2 = leaf1(&mut t, &mut rng, 3);
    let h = t.vecmat(x, w1).unwrap();
    let h = t.add(h, b1).unwrap();
    let h = t.gelu(h);
    let o = t.vecmat(h, w2).unwrap();
    let o = t.add(o, b2).unwrap();
    let p = t.softmax(o).unwrap();
    let target = t.constant(vec![0.0, 1.0, 0.0], vec![3]).unwrap();
    let loss = t.kl_loss(p, target).unwrap();
    assert_grad_ok(&mut t, loss, &[x, w1, b1, w2, b2]);
}

#[test]
fn gradcheck_layer_norm_4x8() {
    check_layer_norm(404);
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut t = Tape::<f64>::eval();
    let x = leaf2(&mut t, &mut rng, 4, 8);
    let gamma = t.leaf(rand_vec(&mut rng, 8, 0.5, 1.5), vec![8], true).unwrap();
    let beta = leaf1(&mut t, &mut rng, 8);
    let y = t.layer_norm(x, gamma, beta, 1e-5).unwrap();
    let loss = wsum(&mut t, &mut rng, y);
    let report = grad_check(&mut t, loss, &[x, gamma, beta], 1e-5).unwrap();
    assert!(report.max_rel_err < 1e-4);
}

#[test]
fn gradcheck_constant_function() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut t = Tape::<f64>::eval();
    let x = leaf1(&mut t, &mut rng, 5);
    let c = t.constant(vec![2.0], vec![]).unwrap();
    let loss = t.sum_all(c);
    let report = grad_check(&mut t, loss, &[x], 1e-5).unwrap();
    assert_eq!(report.max_rel_err, 0.0);
    let _ = x;
}

// ── mode and determinism contracts ──────────────────────────────────────

#[test]
fn dropout_is_identity_in_eval_mode() {
    let mut t = Tape::<f64>::eval();
    let x = t.constant(vec![1.0, 2.0, 3.0], vec![3]).unwrap();
    let y = t.dropout(x, 0.5).unwrap();
    assert_eq!(x, y);
    assert!(!t.is_stochastic());
}

#[test]
fn dropout_train_mode_masks_and_rescales() {
    let mut t = Tape::<f64>::new(true, 9);
    let x = t.constant(vec![1.0; 1000], vec![1000]).unwrap();
    let y = t.dropout(x, 0.25).unwrap();
    assert!(t.is_stochastic());
    let vals = t.value(y);
    let kept = vals.iter().filter(|&&v| v != 0.0).count();
    for &v in vals {
        assert!(v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12);
    }
    assert!(kept > 650 && kept < 850, "kept {}", kept);
}

#[test]
fn stochastic_graph_refuses_replay() {
    let mut t = Tape::<f64>::new(true, 1);
    let x = t.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
    let y = t.dropout(x, 0.5).unwrap();
    let loss = t.sum_all(y);
    assert!(t.replay_forward().is_err());
    assert!(grad_check(&mut t, loss, &[x], 1e-5).is_err());
}

#[test]
fn forward_backward_deterministic_bitwise() {
    fn run() -> (Vec<u32>, Vec<u32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut t = Tape::<f32>::new(true, 123);
        let n: usize = 64;
        let data: Vec<f32> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = t.leaf(data, vec![n, n], true).unwrap();
        let b = t.matmul(a, a).unwrap();
        let d = t.dropout(b, 0.1).unwrap();
        let g = t.gelu(d);
        let loss = t.sum_all(g);
        t.backward(loss).unwrap();
        let fwd = t.value(g).iter().map(|v| v.to_bits()).collect();
        let grad = t.grad(a).iter().map(|v| v.to_bits()).collect();
        (fwd, grad)
    }
    let (f1, g1) = run();
    let (f2, g2) = run();
    assert_eq!(f1, f2);
    assert_eq!(g1, g2);
}

#[test]
fn masked_mean_requires_live_row() {
    let mut t = Tape::<f64>::eval();
    let x = t.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
    assert!(t.masked_mean_rows(x, &[0, 0]).is_err());
}

#[test]
fn shape_errors_name_the_primitive() {
    let mut t = Tape::<f64>::eval();
    let a = t.constant(vec![0.0; 6], vec![2, 3]).unwrap();
    let b = t.constant(vec![0.0; 6], vec![2, 3]).unwrap();
    match t.matmul(a, b) {
        Err(Error::Shape { op, .. }) => assert_eq!(op, "matmul"),
        other => panic!("expected shape error, got {:?}", other.map(|_| ())),
    }
}

// ── scoped extraction ───────────────────────────────────────────────────

#[test]
fn restricted_groups_receive_exact_zeros() {
    let mut store = ParamStore::<f64>::new();
    store
        .register("enc.w", vec![2], vec![0.5, -0.5], ParamGroup::EncoderBelowMg)
        .unwrap();
    store
        .register("gen.w", vec![2], vec![0.3, 0.8], ParamGroup::Generator)
        .unwrap();
    store
        .register("disc.w", vec![2], vec![-0.2, 0.1], ParamGroup::Discriminator)
        .unwrap();
    let mut t = Tape::<f64>::eval();
    let binding = store.bind(&mut t).unwrap();
    let ids: Vec<_> = (0..3).map(|i| binding.node(super::params::ParamId(i))).collect();
    let s0 = t.mul(ids[0], ids[1]).unwrap();
    let s1 = t.mul(s0, ids[2]).unwrap();
    let loss = t.sum_all(s1);
    t.backward(loss).unwrap();
    let scoped = store.extract_grads(&t, &binding, &[ParamGroup::Generator, ParamGroup::Discriminator]);
    let gen = store.lookup("gen.w").unwrap();
    let enc = store.lookup("enc.w").unwrap();
    assert!(scoped.get(gen).iter().any(|&g| g != 0.0));
    assert!(scoped.get(enc).iter().all(|&g| g == 0.0));
    let full = store.extract_grads(&t, &binding, &ParamGroup::ALL);
    assert!(full.get(enc).iter().any(|&g| g != 0.0));
}

// ── property tests ──────────────────────────────────────────────────────

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(vals in proptest::collection::vec(-30.0f64..30.0, 4..24)) {
        let n = vals.len();
        let (r, c) = if n % 2 == 0 { (2, n / 2) } else { (1, n) };
        let mut t = Tape::<f64>::eval();
        let x = t.constant(vals, vec![r, c]).unwrap();
        let y = t.softmax(x).unwrap();
        for row in t.value(y).chunks(c) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn kl_nonnegative_on_random_distributions(
        a in proptest::collection::vec(0.01f64..1.0, 2..8),
        bump in 0usize..8,
    ) {
        let n = a.len();
        let mut b = a.clone();
        b[bump % n] += 0.5;
        let (sa, sb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
        let p: Vec<f64> = a.iter().map(|v| v / sa).collect();
        let q: Vec<f64> = b.iter().map(|v| v / sb).collect();
        let mut t = Tape::<f64>::eval();
        let pn = t.constant(p, vec![n]).unwrap();
        let qn = t.constant(q, vec![n]).unwrap();
        let l = t.kl_loss(pn, qn).unwrap();
        prop_assert!(t.scalar(l) >= -1e-12);
    }

    #[test]
    fn bce_nonnegative(score in 0.0f64..=1.0, label in 0u8..2) {
        let mut t = Tape::<f64>::eval();
        let s = t.scalar_leaf(score);
        let l = t.bce_loss(s, f64::from(label)).unwrap();
        prop_assert!(t.scalar(l) >= 0.0);
    }
}
