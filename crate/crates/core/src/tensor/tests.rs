use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::*;

fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

fn rand_vec(rng: &mut ChaCha12Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn arr(shape: &[usize], data: &[f64]) -> DiffArray<f64> {
    DiffArray::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Random projection to a scalar so vector-valued ops can be checked.
fn project(tape: &mut Tape<f64>, out: NodeId, seed: u64) -> NodeId {
    let n = tape.data(out).len();
    let w = rand_vec(&mut rng(seed), n);
    let wid = tape.constant(tape.shape(out).to_vec(), w).unwrap();
    let prod = tape.mul(out, wid).unwrap();
    tape.sum_all(prod)
}

#[test]
fn matmul_identity() {
    let mut t = Tape::new();
    let i2 = t.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let a = t.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let c = t.matmul(i2, a).unwrap();
    assert_eq!(t.data(c), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_projector() {
    let mut t = Tape::new();
    let p = t.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let a = t.constant(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
    let c = t.matmul(p, a).unwrap();
    assert_eq!(t.data(c), &[5.0, 6.0, 0.0, 0.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let b = t.constant(vec![2, 2], vec![0.0; 4]).unwrap();
    let err = t.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
}

#[test]
fn matmul_gradcheck() {
    let mut r = rng(7);
    let a = arr(&[3, 4], &rand_vec(&mut r, 12));
    let b = arr(&[4, 2], &rand_vec(&mut r, 8));
    let report = check_inputs(&[a, b], 1e-5, |t, ids| {
        let c = t.matmul(ids[0], ids[1]).unwrap();
        project(t, c, 11)
    });
    assert!(report.max_err < 1e-6, "rel err {}", report.max_err);
}

#[test]
fn matmul_deterministic_bitwise() {
    let mut r = rng(3);
    let a = rand_vec(&mut r, 20 * 30);
    let b = rand_vec(&mut r, 30 * 10);
    let run = || {
        let mut t = Tape::new();
        let ai = t.constant(vec![20, 30], a.clone()).unwrap();
        let bi = t.constant(vec![30, 10], b.clone()).unwrap();
        let c = t.matmul(ai, bi).unwrap();
        t.data(c).to_vec()
    };
    let x = run();
    let y = run();
    assert!(x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn softmax_symmetric_row() {
    let mut t = Tape::new();
    let x = t.constant(vec![1, 2], vec![0.0, 0.0]).unwrap();
    let s = t.softmax_rows(x, None).unwrap();
    assert_eq!(t.data(s), &[0.5, 0.5]);
}

#[test]
fn softmax_forced_exponentials() {
    let mut t = Tape::new();
    let x = t
        .constant(vec![1, 3], vec![1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln()])
        .unwrap();
    let s = t.softmax_rows(x, None).unwrap();
    let got = t.data(s);
    for (g, want) in got.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
        assert!((g - want).abs() < 1e-12);
    }
}

#[test]
fn softmax_single_unmasked_entry() {
    let mut t = Tape::new();
    let x = t.constant(vec![1, 2], vec![5.0, 9.0]).unwrap();
    let mask = arr(&[1, 2], &[0.0, f64::NEG_INFINITY]);
    let s = t.softmax_rows(x, Some(&mask)).unwrap();
    assert_eq!(t.data(s), &[1.0, 0.0]);
}

#[test]
fn softmax_fully_masked_row_errors() {
    let mut t = Tape::new();
    let x = t.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mask = arr(
        &[2, 2],
        &[0.0, 0.0, f64::NEG_INFINITY, f64::NEG_INFINITY],
    );
    assert!(matches!(
        t.softmax_rows(x, Some(&mask)),
        Err(TensorError::DegenerateMask { row: 1 })
    ));
}

#[test]
fn softmax_rejects_invalid_mask_values() {
    let mut t = Tape::new();
    let x = t.constant(vec![1, 2], vec![1.0, 2.0]).unwrap();
    let mask = arr(&[1, 2], &[0.0, -1.0]);
    assert!(matches!(
        t.softmax_rows(x, Some(&mask)),
        Err(TensorError::InvalidMask { .. })
    ));
}

#[test]
fn softmax_rows_sum_to_one_and_masked_exactly_zero() {
    let mut r = rng(42);
    for _ in 0..50 {
        let m = 4;
        let n = 6;
        let x = rand_vec(&mut r, m * n);
        // random mask leaving at least one live entry per row
        let mut mask = vec![0.0f64; m * n];
        for row in 0..m {
            let keep = r.gen_range(0..n);
            for j in 0..n {
                if j != keep && r.gen_bool(0.4) {
                    mask[row * n + j] = f64::NEG_INFINITY;
                }
            }
        }
        let mut t = Tape::new();
        let xid = t.constant(vec![m, n], x).unwrap();
        let mid = arr(&[m, n], &mask);
        let s = t.softmax_rows(xid, Some(&mid)).unwrap();
        let out = t.data(s);
        for row in 0..m {
            let sum: f64 = out[row * n..(row + 1) * n].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row sum {sum}");
            for j in 0..n {
                if mask[row * n + j].is_infinite() {
                    assert_eq!(out[row * n + j], 0.0);
                }
            }
        }
    }
}

#[test]
fn softmax_gradcheck_masked() {
    let mut r = rng(9);
    let x = arr(&[3, 4], &rand_vec(&mut r, 12));
    let mut mask = vec![0.0f64; 12];
    mask[1] = f64::NEG_INFINITY;
    mask[7] = f64::NEG_INFINITY;
    let m = arr(&[3, 4], &mask);
    let report = check_inputs(&[x], 1e-5, move |t, ids| {
        let s = t.softmax_rows(ids[0], Some(&m)).unwrap();
        project(t, s, 13)
    });
    assert!(report.max_err < 1e-6, "rel err {}", report.max_err);
}

#[test]
fn conv3d_identity_kernel() {
    let mut t = Tape::new();
    let mut r = rng(5);
    let x = rand_vec(&mut r, 4 * 4 * 4);
    let xid = t.constant(vec![1, 4, 4, 4], x.clone()).unwrap();
    let k = t.constant(vec![1, 1, 1, 1, 1], vec![1.0]).unwrap();
    let y = t.conv3d(xid, k, 1, 0).unwrap();
    assert_eq!(t.data(y), &x[..]);
}

#[test]
fn conv3d_counting_argument() {
    let mut t = Tape::new();
    let x = t.constant(vec![1, 5, 5, 5], vec![1.0; 125]).unwrap();
    let k = t.constant(vec![1, 1, 3, 3, 3], vec![1.0; 27]).unwrap();
    let y = t.conv3d(x, k, 1, 1).unwrap();
    assert_eq!(t.shape(y), &[1, 5, 5, 5]);
    let data = t.data(y);
    // interior voxel sees the full 27-count, a corner sees its 2x2x2 octant
    let at = |h: usize, w: usize, d: usize| data[(h * 5 + w) * 5 + d];
    assert_eq!(at(2, 2, 2), 27.0);
    assert_eq!(at(0, 0, 0), 8.0);
    assert_eq!(at(0, 2, 2), 18.0);
}

#[test]
fn conv3d_non_integer_output_is_config_error() {
    let mut t = Tape::new();
    let x = t.constant(vec![1, 4, 4, 4], vec![0.0; 64]).unwrap();
    let k = t.constant(vec![1, 1, 3, 3, 3], vec![0.0; 27]).unwrap();
    assert!(matches!(t.conv3d(x, k, 2, 0), Err(TensorError::Config(_))));
}

#[test]
fn conv3d_rejects_even_kernel() {
    let mut t = Tape::new();
    let x = t.constant(vec![1, 4, 4, 4], vec![0.0; 64]).unwrap();
    let k = t.constant(vec![1, 1, 2, 2, 2], vec![0.0; 8]).unwrap();
    assert!(matches!(t.conv3d(x, k, 1, 0), Err(TensorError::Config(_))));
}

#[test]
fn conv3d_gradcheck() {
    let mut r = rng(17);
    let x = arr(&[2, 4, 4, 4], &rand_vec(&mut r, 128));
    let k = arr(&[3, 2, 3, 3, 3], &rand_vec(&mut r, 162));
    let report = check_inputs(&[x, k], 1e-5, |t, ids| {
        let y = t.conv3d(ids[0], ids[1], 1, 1).unwrap();
        project(t, y, 23)
    });
    assert!(report.max_err < 1e-6, "rel err {}", report.max_err);
}

#[test]
fn conv3d_stride2_gradcheck() {
    let mut r = rng(19);
    let x = arr(&[1, 4, 4, 4], &rand_vec(&mut r, 64));
    let k = arr(&[2, 1, 3, 3, 3], &rand_vec(&mut r, 54));
    let report = check_inputs(&[x, k], 1e-5, |t, ids| {
        let y = t.conv3d(ids[0], ids[1], 2, 1).unwrap();
        project(t, y, 29)
    });
    assert!(report.max_err < 1e-6, "rel err {}", report.max_err);
}

fn toy_mha(store: &mut ParamStore<f64>, d: usize, heads: usize) -> MultiHeadAttention {
    MultiHeadAttention::new(store, "mha", d, heads).unwrap()
}

#[test]
fn attention_single_token_weight_is_one() {
    let mut store = ParamStore::<f64>::new(1);
    let mha = toy_mha(&mut store, 4, 2);
    let mut t = Tape::new();
    let x = t.constant(vec![1, 4], vec![0.3, -0.2, 0.9, 0.4]).unwrap();
    let trace = mha.forward_traced(&mut t, &store, x, x, None).unwrap();
    for &w in &trace.weights {
        assert_eq!(t.data(w), &[1.0]);
    }
    assert_eq!(t.shape(trace.out), &[1, 4]);
}

#[test]
fn attention_duplicated_tokens_give_duplicated_outputs() {
    let mut store = ParamStore::<f64>::new(2);
    let mha = toy_mha(&mut store, 6, 3);
    let mut t = Tape::new();
    let tok = [0.1, 0.5, -0.3, 0.8, 0.0, -0.6];
    let mut data = Vec::new();
    for _ in 0..3 {
        data.extend_from_slice(&tok);
    }
    let x = t.constant(vec![3, 6], data).unwrap();
    let y = mha.forward(&mut t, &store, x, x, None).unwrap();
    let out = t.data(y);
    assert_eq!(&out[0..6], &out[6..12]);
    assert_eq!(&out[0..6], &out[12..18]);
}

#[test]
fn attention_heads_must_divide_width() {
    let mut store = ParamStore::<f64>::new(3);
    assert!(matches!(
        MultiHeadAttention::new(&mut store, "bad", 7, 2),
        Err(TensorError::Config(_))
    ));
}

#[test]
fn attention_gradcheck() {
    let mut r = rng(31);
    let x_data = rand_vec(&mut r, 4 * 8);
    let mut store = ParamStore::<f64>::new(4);
    let mha = toy_mha(&mut store, 8, 2);

    // forward via the store, collecting analytic grads for every parameter
    let mut tape = Tape::new();
    let x = tape.constant(vec![4, 8], x_data.clone()).unwrap();
    let y = mha.forward(&mut tape, &store, x, x, None).unwrap();
    let loss = project(&mut tape, y, 37);
    tape.backward(loss).unwrap();
    let analytic: BTreeMap<String, Vec<f64>> = ParamStore::grads_of(&tape);

    let probes: Vec<(String, usize)> = store
        .manifest()
        .into_iter()
        .flat_map(|(path, shape)| {
            let n: usize = shape.iter().product();
            (0..n).map(move |i| (path.clone(), i))
        })
        .collect();
    let report = check_params(&store, &analytic, &probes, 1e-5, |s| {
        let mut t = Tape::new();
        let x = t.constant(vec![4, 8], x_data.clone()).unwrap();
        let y = mha.forward(&mut t, s, x, x, None).unwrap();
        let l = project(&mut t, y, 37);
        t.value(l)
    });
    assert!(report.max_err < 1e-6, "rel err {}", report.max_err);
}

#[test]
fn feed_forward_zero_weights_is_identity() {
    let mut store = ParamStore::<f64>::new(5);
    let ff = FeedForward::new(&mut store, "ff", 4, 8);
    for path in [&ff.lin1.w, &ff.lin1.b, &ff.lin2.w, &ff.lin2.b] {
        let p = store.get_mut(path).unwrap();
        p.data.iter_mut().for_each(|v| *v = 0.0);
    }
    let mut t = Tape::new();
    let data = vec![0.4, -0.3, 0.7, 1.2, 0.0, 0.1, -0.9, 0.2];
    let x = t.constant(vec![2, 4], data.clone()).unwrap();
    let y = ff.forward(&mut t, &store, x).unwrap();
    assert_eq!(t.data(y), &data[..]);
}

#[test]
fn feed_forward_is_tokenwise_local() {
    let mut store = ParamStore::<f64>::new(6);
    let ff = FeedForward::new(&mut store, "ff", 3, 5);
    let run = |other: f64| {
        let mut t = Tape::new();
        let x = t
            .constant(vec![2, 3], vec![0.5, -0.1, 0.2, other, other, other])
            .unwrap();
        let y = ff.forward(&mut t, &store, x).unwrap();
        t.data(y)[0..3].to_vec()
    };
    assert_eq!(run(0.0), run(42.0));
}

#[test]
fn feed_forward_gradcheck() {
    let mut r = rng(41);
    let x_data = rand_vec(&mut r, 3 * 4);
    let mut store = ParamStore::<f64>::new(7);
    let ff = FeedForward::new(&mut store, "ff", 4, 8);

    let mut tape = Tape::new();
    let x = tape.constant(vec![3, 4], x_data.clone()).unwrap();
    let y = ff.forward(&mut tape, &store, x).unwrap();
    let loss = project(&mut tape, y, 43);
    tape.backward(loss).unwrap();
    let analytic = ParamStore::grads_of(&tape);
    let probes: Vec<(String, usize)> = store
        .manifest()
        .into_iter()
        .flat_map(|(path, shape)| {
            let n: usize = shape.iter().product();
            (0..n).map(move |i| (path.clone(), i))
        })
        .collect();
    let report = check_params(&store, &analytic, &probes, 1e-5, |s| {
        let mut t = Tape::new();
        let x = t.constant(vec![3, 4], x_data.clone()).unwrap();
        let y = ff.forward(&mut t, s, x).unwrap();
        let l = project(&mut t, y, 43);
        t.value(l)
    });
    assert!(report.max_err < 1e-6, "rel err {}", report.max_err);
}

#[test]
fn layer_norm_gradcheck() {
    let mut r = rng(51);
    let x = arr(&[3, 5], &rand_vec(&mut r, 15));
    let g = arr(&[5], &rand_vec(&mut r, 5));
    let b = arr(&[5], &rand_vec(&mut r, 5));
    let report = check_inputs(&[x, g, b], 1e-5, |t, ids| {
        let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5).unwrap();
        project(t, y, 53)
    });
    assert!(report.max_err < 1e-6, "rel err {}", report.max_err);
}

#[test]
fn channel_norm_gradcheck() {
    let mut r = rng(61);
    let x = arr(&[2, 3, 2, 2], &rand_vec(&mut r, 24));
    let g = arr(&[2], &rand_vec(&mut r, 2));
    let b = arr(&[2], &rand_vec(&mut r, 2));
    let report = check_inputs(&[x, g, b], 1e-5, |t, ids| {
        let y = t.channel_norm(ids[0], ids[1], ids[2], 1e-5).unwrap();
        project(t, y, 59)
    });
    assert!(report.max_err < 1e-6, "rel err {}", report.max_err);
}

#[test]
fn structural_ops_gradcheck() {
    let mut r = rng(71);
    let a = arr(&[2, 3, 4], &rand_vec(&mut r, 24));
    let report = check_inputs(&[a], 1e-5, |t, ids| {
        let tr = t.transpose_last2(ids[0]).unwrap();
        let s = t.slice_last(tr, 1, 2).unwrap();
        let c = t.concat(&[s, s], 2).unwrap();
        let g = t
            .gather(c, (0..12).map(|i| i * 2).collect(), vec![12])
            .unwrap();
        let cs = t.cumsum(g).unwrap();
        let m = t.mean_axis(cs, 0).unwrap();
        project(t, m, 73)
    });
    assert!(report.max_err < 1e-6, "rel err {}", report.max_err);
}

#[test]
fn pointwise_ops_gradcheck() {
    let mut r = rng(81);
    let a = arr(&[6], &rand_vec(&mut r, 6));
    let report = check_inputs(&[a], 1e-5, |t, ids| {
        let e = t.exp(ids[0]);
        let l = t.ln(e);
        let g = t.gelu(l);
        let lr = t.leaky_relu(g, 0.01);
        let s = t.sigmoid(lr);
        project(t, s, 83)
    });
    assert!(report.max_err < 1e-6, "rel err {}", report.max_err);
}

#[test]
fn bat_matmul_gradcheck() {
    let mut r = rng(91);
    let a = arr(&[2, 3, 4], &rand_vec(&mut r, 24));
    let b = arr(&[2, 4, 2], &rand_vec(&mut r, 16));
    let report = check_inputs(&[a, b], 1e-5, |t, ids| {
        let y = t.bat_matmul(ids[0], ids[1]).unwrap();
        project(t, y, 97)
    });
    assert!(report.max_err < 1e-6, "rel err {}", report.max_err);
}

#[test]
fn gradient_accumulates_over_shared_use() {
    // y = sum(p) + sum(p) => dp = 2 everywhere
    let mut t = Tape::new();
    let p = t.var(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
    let s1 = t.sum_all(p);
    let s2 = t.sum_all(p);
    let y = t.add(s1, s2).unwrap();
    t.backward(y).unwrap();
    assert_eq!(t.grad(p).unwrap(), &[2.0, 2.0, 2.0]);
}

#[test]
fn off_path_leaf_gets_zero_grad() {
    let mut t = Tape::new();
    let used = t.var(vec![2], vec![1.0, 2.0]).unwrap();
    let unused = t.var(vec![2], vec![3.0, 4.0]).unwrap();
    let y = t.sum_all(used);
    t.backward(y).unwrap();
    assert_eq!(t.grad(used).unwrap(), &[1.0, 1.0]);
    assert_eq!(t.grad(unused).unwrap(), &[0.0, 0.0]);
}

#[test]
fn sgd_definition_case() {
    let mut store = ParamStore::<f64>::new(0);
    store.add("p", vec![1], ParamInit::Zeros);
    store.get_mut("p").unwrap().data[0] = 1.0;
    store.get_mut("p").unwrap().grad = Some(vec![2.0]);
    Sgd::new(0.1).step(&mut store).unwrap();
    assert!((store.get("p").unwrap().data[0] - 0.8).abs() < 1e-15);
}

#[test]
fn sgd_zero_grad_is_fixed_point() {
    let mut store = ParamStore::<f64>::new(0);
    store.add("p", vec![2], ParamInit::Ones);
    store.get_mut("p").unwrap().grad = Some(vec![0.0, 0.0]);
    Sgd::new(0.5).step(&mut store).unwrap();
    assert_eq!(store.get("p").unwrap().data, vec![1.0, 1.0]);
}

#[test]
fn sgd_converges_on_quadratic() {
    // f(p) = (p - 3)^2, lr 0.1: |p - 3| contracts by 0.8 per step
    let mut store = ParamStore::<f64>::new(0);
    store.add("p", vec![1], ParamInit::Zeros);
    let mut opt = Sgd::new(0.1);
    for _ in 0..50 {
        let mut t = Tape::new();
        let p = store.leaf_on(&mut t, "p").unwrap();
        let c = t.scalar(3.0);
        let d = t.sub(p, c).unwrap();
        let sq = t.mul(d, d).unwrap();
        let loss = t.sum_all(sq);
        t.backward(loss).unwrap();
        store.absorb_grads(&t).unwrap();
        opt.step(&mut store).unwrap();
    }
    assert!((store.get("p").unwrap().data[0] - 3.0).abs() < 1e-3);
}

#[test]
fn missing_grad_is_an_error() {
    let mut store = ParamStore::<f64>::new(0);
    store.add("p", vec![1], ParamInit::Ones);
    assert!(matches!(
        Sgd::new(0.1).step(&mut store),
        Err(TensorError::UninitializedGradient { .. })
    ));
    assert!(matches!(
        Adam::new(0.1).step(&mut store),
        Err(TensorError::UninitializedGradient { .. })
    ));
}

#[test]
fn adam_state_keyed_by_path() {
    let mut store = ParamStore::<f64>::new(0);
    store.add("a", vec![1], ParamInit::Zeros);
    store.add("b", vec![1], ParamInit::Zeros);
    let mut opt = Adam::new(0.1);
    // a gets a constant gradient, b alternating; their trajectories differ
    for step in 0..4 {
        store.get_mut("a").unwrap().grad = Some(vec![1.0]);
        store.get_mut("b").unwrap().grad = Some(vec![if step % 2 == 0 { 1.0 } else { -1.0 }]);
        opt.step(&mut store).unwrap();
    }
    let a = store.get("a").unwrap().data[0];
    let b = store.get("b").unwrap().data[0];
    assert!(a < b, "a={a} b={b}");
}

#[test]
fn adam_converges_on_quadratic() {
    let mut store = ParamStore::<f64>::new(0);
    store.add("p", vec![1], ParamInit::Zeros);
    let mut opt = Adam::new(0.2);
    for _ in 0..200 {
        let mut t = Tape::new();
        let p = store.leaf_on(&mut t, "p").unwrap();
        let c = t.scalar(3.0);
        let d = t.sub(p, c).unwrap();
        let sq = t.mul(d, d).unwrap();
        let loss = t.sum_all(sq);
        t.backward(loss).unwrap();
        store.absorb_grads(&t).unwrap();
        opt.step(&mut store).unwrap();
    }
    assert!((store.get("p").unwrap().data[0] - 3.0).abs() < 1e-2);
}

#[test]
fn param_init_is_seed_deterministic() {
    let build = || {
        let mut s = ParamStore::<f64>::new(1234);
        Linear::new(&mut s, "lin", 7, 5);
        Conv3::new(&mut s, "conv", 2, 3, 3, 1, 1);
        s
    };
    let a = build();
    let b = build();
    for ((pa, va), (pb, vb)) in a.iter().zip(b.iter()) {
        assert_eq!(pa, pb);
        assert!(va
            .data
            .iter()
            .zip(&vb.data)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let mut c = ParamStore::<f64>::new(1235);
    Linear::new(&mut c, "lin", 7, 5);
    assert_ne!(a.get("lin.w").unwrap().data, c.get("lin.w").unwrap().data);
}

#[test]
fn transformer_block_gradcheck() {
    let mut r = rng(101);
    let x_data = rand_vec(&mut r, 4 * 6);
    let mut store = ParamStore::<f64>::new(8);
    let block = TransformerBlock::new(&mut store, "blk", 6, 2, 12).unwrap();

    let mut tape = Tape::new();
    let x = tape.constant(vec![4, 6], x_data.clone()).unwrap();
    let y = block.forward(&mut tape, &store, x).unwrap();
    let loss = project(&mut tape, y, 103);
    tape.backward(loss).unwrap();
    let analytic = ParamStore::grads_of(&tape);
    let probes: Vec<(String, usize)> = store
        .manifest()
        .into_iter()
        .flat_map(|(path, shape)| {
            let n: usize = shape.iter().product();
            (0..n).map(move |i| (path.clone(), i))
        })
        .collect();
    let report = check_params(&store, &analytic, &probes, 1e-5, |s| {
        let mut t = Tape::new();
        let x = t.constant(vec![4, 6], x_data.clone()).unwrap();
        let y = block.forward(&mut t, s, x).unwrap();
        let l = project(&mut t, y, 103);
        t.value(l)
    });
    assert!(report.max_err < 1e-6, "rel err {}", report.max_err);
}
