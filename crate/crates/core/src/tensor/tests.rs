use super::gradcheck::{check, DEFAULT_STEP};
use super::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn brute_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

#[test]
fn matmul_hand_example() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
    let b = g.constant(Tensor::matrix(2, 2, vec![5., 6., 7., 8.]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[19., 22., 43., 50.]);
    assert_eq!(brute_matmul(&[1., 2., 3., 4.], &[5., 6., 7., 8.], 2, 2, 2), vec![19., 22., 43., 50.]);
}

#[test]
fn matmul_identity_and_zero() {
    let mut g = Graph::new();
    let a_t = Tensor::randn(&[2, 2], 1.0, &mut rng(1));
    let a = g.constant(a_t.clone());
    let i = g.constant(Tensor::eye(2));
    let z = g.constant(Tensor::zeros(&[2, 2]));
    let ia = g.matmul(i, a).unwrap();
    let az = g.matmul(a, z).unwrap();
    assert_eq!(g.value(ia), &a_t);
    assert!(g.value(az).data().iter().all(|&x| x == 0.0));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.matches("[2, 3]").count() == 2, "{msg}");
}

#[test]
fn matmul_matches_brute_force_on_random_rectangles() {
    let mut r = rng(2);
    for &(m, k, n) in &[(3, 5, 4), (1, 7, 2), (6, 1, 3)] {
        let a = Tensor::randn(&[m, k], 1.0, &mut r);
        let b = Tensor::randn(&[k, n], 1.0, &mut r);
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul(av, bv).unwrap();
        let want = brute_matmul(a.data(), b.data(), m, k, n);
        for (x, y) in g.value(c).data().iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::vector(vec![3.0; 4]));
    let s = g.softmax(c, 0).unwrap();
    assert!(g.value(s).data().iter().all(|&p| (p - 0.25).abs() < 1e-15));

    let one = g.constant(Tensor::vector(vec![-7.5]));
    let s1 = g.softmax(one, 0).unwrap();
    assert_eq!(g.value(s1).data(), &[1.0]);

    let x = g.constant(Tensor::vector(vec![0.0, 2f64.ln()]));
    let s2 = g.softmax(x, 0).unwrap();
    let p = g.value(s2).data();
    assert!((p[0] - 1.0 / 3.0).abs() < 1e-15 && (p[1] - 2.0 / 3.0).abs() < 1e-15);

    assert!(g.softmax(x, 1).is_err());
}

#[test]
fn softmax_axis_zero_on_matrix() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(2, 3, vec![0., 1., 2., 3., 4., 5.]).unwrap());
    let s = g.softmax(x, 0).unwrap();
    let d = g.value(s).data();
    for col in 0..3 {
        assert!((d[col] + d[3 + col] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn backward_of_sum_of_squares_is_twice_x() {
    let xt = Tensor::vector(vec![1.5, -2.0, 0.25]);
    let mut g = Graph::new();
    let x = g.param(xt.clone());
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    let grad = g.grad(x).unwrap();
    assert_eq!(grad.data(), &[3.0, -4.0, 0.5]);
}

#[test]
fn unreachable_and_frozen_leaves() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    let y = g.param(Tensor::vector(vec![3.0, 4.0]));
    let frozen = g.constant(Tensor::vector(vec![5.0, 6.0]));
    let prod = g.mul(y, frozen).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0]);
    assert_eq!(g.grad(y).unwrap().data(), &[5.0, 6.0]);
    assert!(g.grad(frozen).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    let y = g.scale(x, 2.0);
    assert!(g.backward(y).is_err());
}

#[test]
fn loss_primitive_examples() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = g.constant(Tensor::vector(vec![3.0, 5.0]));
    let m = g.mse(a, b).unwrap();
    assert_eq!(g.value(m).item().unwrap(), 6.5);
    let z = g.mse(a, a).unwrap();
    assert_eq!(g.value(z).item().unwrap(), 0.0);

    for v in [2usize, 7, 50] {
        let l = g.constant(Tensor::vector(vec![0.3; v]));
        let ce = g.cross_entropy(l, &[v - 1]).unwrap();
        assert!((g.value(ce).item().unwrap() - (v as f64).ln()).abs() < 1e-12);
    }
    let l = g.constant(Tensor::vector(vec![0.0; 3]));
    assert!(matches!(g.cross_entropy(l, &[3]), Err(crate::Error::OutOfRange { .. })));
    let c = g.constant(Tensor::vector(vec![0.0; 3]));
    assert!(g.mse(a, c).is_err());
}

#[test]
fn random_three_layer_graph_matches_finite_differences() {
    let mut r = rng(3);
    let inputs = vec![
        Tensor::randn(&[4, 5], 1.0, &mut r),
        Tensor::randn(&[5, 6], 0.5, &mut r),
        Tensor::randn(&[6], 0.5, &mut r),
        Tensor::randn(&[6, 6], 0.5, &mut r),
        Tensor::randn(&[6, 3], 0.5, &mut r),
    ];
    let res = check(&inputs, DEFAULT_STEP, |g, v| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.add_row(h, v[2])?;
        let h = g.gelu(h);
        let h = g.matmul(h, v[3])?;
        let h = g.tanh(h);
        let o = g.matmul(h, v[4])?;
        g.cross_entropy(o, &[0, 2, 1, 1])
    })
    .unwrap();
    assert!(res.passes(1e-6), "{:?}", res.rel_errors);
}

#[test]
fn attention_weights_are_distributions_and_causal() {
    let mut r = rng(4);
    let mut g = Graph::new();
    let q = g.constant(Tensor::randn(&[10, 8], 1.0, &mut r));
    let k = g.constant(Tensor::randn(&[10, 8], 1.0, &mut r));
    let v = g.constant(Tensor::randn(&[10, 4], 1.0, &mut r));
    let out = g.attention(q, k, v, AttnSpec::new(2, 2).causal(true)).unwrap();
    let w = g.attention_weights(out).unwrap();
    for (row_i, row) in w.chunks(5).enumerate() {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let i = row_i % 5;
        assert!(row[i + 1..].iter().all(|&p| p == 0.0));
    }
}

#[test]
fn attention_groups_do_not_mix() {
    let mut r = rng(5);
    let q = Tensor::randn(&[6, 4], 1.0, &mut r);
    let k = Tensor::randn(&[6, 4], 1.0, &mut r);
    let v = Tensor::randn(&[6, 4], 1.0, &mut r);
    let run = |v: Tensor| {
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v));
        let o = g.attention(qv, kv, vv, AttnSpec::new(2, 1)).unwrap();
        g.value(o).clone()
    };
    let base = run(v.clone());
    let mut v2 = v.clone();
    for x in &mut v2.data_mut()[12..] {
        *x += 10.0;
    }
    let changed = run(v2);
    assert_eq!(&base.data()[..12], &changed.data()[..12]);
    assert_ne!(&base.data()[12..], &changed.data()[12..]);
}

fn small_tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-1.5f64..1.5, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn gradcheck_matmul_family(a in small_tensor(vec![3, 4]), b in small_tensor(vec![4, 2]), c in small_tensor(vec![5, 4])) {
        let res = check(&[a, b, c], DEFAULT_STEP, |g, v| {
            let ab = g.matmul(v[0], v[1])?;
            let cat = g.matmul_nt(v[2], v[0])?;
            let t = g.transpose(ab)?;
            let s1 = g.sum(t);
            let sq = g.mul(cat, cat)?;
            let s2 = g.mean(sq);
            g.add(s1, s2)
        }).unwrap();
        prop_assert!(res.passes(1e-5), "{:?}", res.rel_errors);
    }

    #[test]
    fn gradcheck_softmax_any_axis(x in small_tensor(vec![2, 3, 4]), w in small_tensor(vec![2, 3, 4]), axis in 0usize..3) {
        let res = check(&[x, w], DEFAULT_STEP, |g, v| {
            let s = g.softmax(v[0], axis)?;
            let p = g.mul(s, v[1])?;
            Ok(g.sum(p))
        }).unwrap();
        prop_assert!(res.passes(1e-5), "{:?}", res.rel_errors);
    }

    #[test]
    fn gradcheck_layer_norm_and_rows(x in small_tensor(vec![4, 5]), gam in small_tensor(vec![5]), bet in small_tensor(vec![5]), w in small_tensor(vec![3, 5])) {
        let res = check(&[x, gam, bet, w], DEFAULT_STEP, |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            let picked = g.gather_rows(y, &[3, 0, 3])?;
            let both = g.concat_rows(&[picked, v[3]])?;
            let m = g.mean_rows(both);
            let r = g.reshape(m, &[5])?;
            let q = g.mul(r, r)?;
            let e = g.sub(q, v[1])?;
            let s = g.scale(e, 0.7);
            Ok(g.sum(s))
        }).unwrap();
        prop_assert!(res.passes(1e-5), "{:?}", res.rel_errors);
    }

    #[test]
    fn gradcheck_losses(a in small_tensor(vec![3, 5]), b in small_tensor(vec![3, 5]), t0 in 0usize..5, t1 in 0usize..5) {
        let res = check(&[a, b], DEFAULT_STEP, |g, v| {
            let m = g.mse(v[0], v[1])?;
            let ce = g.cross_entropy(v[0], &[t0, t1, 2])?;
            g.add(m, ce)
        }).unwrap();
        prop_assert!(res.passes(1e-5), "{:?}", res.rel_errors);
    }

    #[test]
    fn gradcheck_attention(q in small_tensor(vec![6, 4]), k in small_tensor(vec![6, 4]), v in small_tensor(vec![6, 6]), w in small_tensor(vec![6, 6]), causal in any::<bool>()) {
        let res = check(&[q, k, v, w], DEFAULT_STEP, |g, x| {
            let o = g.attention(x[0], x[1], x[2], AttnSpec::new(2, 2).causal(causal))?;
            let p = g.mul(o, x[3])?;
            Ok(g.sum(p))
        }).unwrap();
        prop_assert!(res.passes(1e-5), "{:?}", res.rel_errors);
    }

    #[test]
    fn softmax_is_shift_invariant(x in prop::collection::vec(-5.0f64..5.0, 1..8), c in -20.0f64..20.0) {
        let mut g = Graph::new();
        let n = x.len();
        let a = g.constant(Tensor::vector(x.clone()));
        let b = g.constant(Tensor::vector(x.iter().map(|v| v + c).collect()));
        let (sa, sb) = (g.softmax(a, 0).unwrap(), g.softmax(b, 0).unwrap());
        let (pa, pb) = (g.value(sa).data(), g.value(sb).data());
        prop_assert!((pa.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..n {
            prop_assert!(pa[i] >= 0.0);
            prop_assert!((pa[i] - pb[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut r = rng(9);
        let inputs = [Tensor::randn(&[4, 4], 1.0, &mut r), Tensor::randn(&[4, 4], 1.0, &mut r)];
        let mut g = Graph::new();
        let a = g.param(inputs[0].clone());
        let b = g.param(inputs[1].clone());
        let c = g.attention(a, b, b, AttnSpec::new(1, 2)).unwrap();
        let l = g.mse(c, a).unwrap();
        g.backward(l).unwrap();
        (g.value(l).item().unwrap(), g.grad(a).unwrap(), g.grad(b).unwrap())
    };
    let (l1, ga1, gb1) = run();
    let (l2, ga2, gb2) = run();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(ga1, ga2);
    assert_eq!(gb1, gb2);
}

#[test]
fn tensor_construction_invariants() {
    assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
    assert_eq!(t.dims2(), (2, 3));
    assert!(t.clone().reshape(&[3, 2]).is_ok());
    assert!(t.reshape(&[4]).is_err());
}
