//! Kernel checks against independent oracles: direct index maps, explicit
//! gathers, brute-force softmax attention and central finite differences.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reltrans::attention::*;
use reltrans::meter::{self, Category};
use reltrans::tensor::{matmul_nt, Tensor};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn global_table(rng: &mut ChaCha8Rng, rows: usize, dh: usize) -> RelativeEmbeddingTable<f64> {
    RelativeEmbeddingTable::new(TableMode::Global, random(rng, &[rows, dh])).unwrap()
}

fn left_table(rng: &mut ChaCha8Rng, n: usize, dh: usize) -> RelativeEmbeddingTable<f64> {
    RelativeEmbeddingTable::new(TableMode::LocalLeft, random(rng, &[2 * n - 1, dh])).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

/// Softmax over the listed logits, written out independently.
fn oracle_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

// ---------------------------------------------------------------- skewing

#[test]
fn skew_global_matches_index_map_for_all_small_lengths() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for l in 1..=64 {
        for _ in 0..3 {
            let qe = random(&mut rng, &[l, l]);
            let s = skew_global(&qe).unwrap();
            for i in 0..l {
                for j in 0..=i {
                    assert_eq!(s.get(i, j).to_bits(), qe.get(i, j + l - 1 - i).to_bits(), "L={l} ({i},{j})");
                }
            }
        }
    }
}

#[test]
fn skew_local_matches_index_map_for_all_block_lengths() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for n in 1..=32 {
        let qe = random(&mut rng, &[n, 2 * n - 1]);
        let s = skew_local(&qe).unwrap();
        for i in 0..n {
            for j in 0..n {
                assert_eq!(s.get(i, j).to_bits(), qe.get(i, j + n - 1 - i).to_bits(), "N={n} ({i},{j})");
            }
        }
    }
}

#[test]
fn skew_local_matches_gather_over_previous_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (n, dh) = (16, 5);
    let q = random(&mut rng, &[n, dh]);
    let table = left_table(&mut rng, n, dh);
    let s = skew_local(&matmul_nt(&q, table.embeddings()).unwrap()).unwrap();
    for i in 0..n {
        for j in 0..n {
            // key j of the previous block sits at distance j - N - i
            let d = j as isize - n as isize - i as isize;
            let e = table.embeddings().row(table.row_for_distance(d));
            assert_eq!(s.get(i, j).to_bits(), dot(q.row(i), e).to_bits());
        }
    }
}

#[test]
fn skew_global_random_64_matches_naive_gather() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let q = random(&mut rng, &[64, 8]);
    let table = global_table(&mut rng, 64, 8);
    let naive = naive_srel_global(&q, &table).unwrap();
    let fast = skew_global(&matmul_nt(&q, table.embeddings()).unwrap()).unwrap();
    for i in 0..64 {
        for j in 0..=i {
            assert_eq!(naive.get(i, j).to_bits(), fast.get(i, j).to_bits());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn skew_gradient_scatter_then_gather_is_identity_on_triangle(l in 1usize..24, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ds = random(&mut rng, &[l, l]);
        let back = skew_global(&skew_global_backward(&ds).unwrap()).unwrap();
        for i in 0..l {
            for j in 0..=i {
                prop_assert_eq!(back.get(i, j).to_bits(), ds.get(i, j).to_bits());
            }
        }
    }

    #[test]
    fn pad_reshape_slice_round_trip(rows in 1usize..6, cols in 1usize..6, before in 0usize..3, after in 0usize..3, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[rows, cols]);
        let padded = x.pad(&[(before, after), (after, before)]).unwrap();
        let shape = padded.shape().to_vec();
        let n = padded.len();
        let flat = padded.reshape(&[n]).unwrap().reshape(&shape).unwrap();
        let back = flat.slice(&[before..before + rows, after..after + cols]).unwrap();
        prop_assert!(back.bitwise_eq(&x));
    }
}

// ------------------------------------------------------- global attention

/// Plain scaled dot-product attention with the same arithmetic as the kernel, written independently.
fn plain_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let l = q.rows();
    let scale = (q.cols() as f64).sqrt();
    let logits = matmul_nt(q, k).unwrap().map(|x| x / scale);
    let w = reltrans::softmax_rows(&logits, Some(&reltrans::Mask::causal(l))).unwrap();
    reltrans::matmul(&w, v).unwrap()
}

/// Full relative attention through explicit per-pair embeddings.
fn gather_attention(q: &Tensor, k: &Tensor, v: &Tensor, table: &RelativeEmbeddingTable<f64>) -> Tensor {
    let (l, dh) = (q.rows(), q.cols());
    let mut z = Tensor::zeros(&[l, v.cols()]);
    for i in 0..l {
        let logits: Vec<f64> = (0..=i)
            .map(|j| {
                let e = table.embeddings().row(table.row_for_distance(j as isize - i as isize));
                (dot(q.row(i), k.row(j)) + dot(q.row(i), e)) / (dh as f64).sqrt()
            })
            .collect();
        let w = oracle_softmax(&logits);
        for (j, wj) in w.iter().enumerate() {
            for c in 0..v.cols() {
                z.row_mut(i)[c] += wj * v.get(j, c);
            }
        }
    }
    z
}

#[test]
fn zero_table_reduces_to_plain_attention_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..20 {
        let l = 1 + trial % 13;
        let (q, k, v) = (random(&mut rng, &[l, 4]), random(&mut rng, &[l, 4]), random(&mut rng, &[l, 3]));
        let zero = RelativeEmbeddingTable::zeros(TableMode::Global, l, 4).unwrap();
        let mask = CausalMask::new(l);
        let rel = relative_attention_global(&q, &k, &v, Some(&zero), &mask, Default::default()).unwrap();
        assert!(rel.z.bitwise_eq(&plain_attention(&q, &k, &v)));
    }
}

#[test]
fn global_attention_matches_gather_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for &rows in &[32, 10] {
        let l = 32;
        let (q, k, v) = (random(&mut rng, &[l, 8]), random(&mut rng, &[l, 8]), random(&mut rng, &[l, 8]));
        let table = global_table(&mut rng, rows, 8);
        let out = relative_attention_global(&q, &k, &v, Some(&table), &CausalMask::new(l), Default::default()).unwrap();
        let oracle = gather_attention(&q, &k, &v, &table);
        assert!(out.z.max_abs_diff(&oracle) < 1e-12, "rows={rows}");
    }
}

#[test]
fn global_attention_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let l = 32;
    let (q, k, v) = (random(&mut rng, &[l, 4]), random(&mut rng, &[l, 4]), random(&mut rng, &[l, 4]));
    let table = global_table(&mut rng, l, 4);
    let mask = CausalMask::new(l);
    let base = relative_attention_global(&q, &k, &v, Some(&table), &mask, Default::default()).unwrap();
    for t in 1..l {
        let (mut k2, mut v2) = (k.clone(), v.clone());
        for c in 0..4 {
            k2.row_mut(t)[c] += 3.0;
            v2.row_mut(t)[c] -= 2.0;
        }
        let out = relative_attention_global(&q, &k2, &v2, Some(&table), &mask, Default::default()).unwrap();
        for i in 0..t {
            assert_eq!(out.z.row(i), base.z.row(i), "t={t} i={i}");
        }
    }
}

// -------------------------------------------------------- local attention

/// Brute force over the two-block span with per-pair embeddings.
fn local_oracle(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    left: Option<&RelativeEmbeddingTable<f64>>,
    right: Option<&RelativeEmbeddingTable<f64>>,
    n: usize,
) -> Tensor {
    let (l, dh) = (q.rows(), q.cols());
    let mut z = Tensor::zeros(&[l, v.cols()]);
    for i in 0..l {
        let b = i / n;
        let start = if b == 0 { 0 } else { (b - 1) * n };
        let keys: Vec<usize> = (start..=i).collect();
        let logits: Vec<f64> = keys
            .iter()
            .map(|&j| {
                let d = j as isize - i as isize;
                let rel = if j < b * n {
                    left.map_or(0.0, |t| dot(q.row(i), t.embeddings().row(t.row_for_distance(d))))
                } else {
                    right.map_or(0.0, |t| dot(q.row(i), t.embeddings().row(t.row_for_distance(d))))
                };
                (dot(q.row(i), k.row(j)) + rel) / (dh as f64).sqrt()
            })
            .collect();
        let w = oracle_softmax(&logits);
        for (&j, wj) in keys.iter().zip(&w) {
            for c in 0..v.cols() {
                z.row_mut(i)[c] += wj * v.get(j, c);
            }
        }
    }
    z
}

#[test]
fn local_plain_two_blocks_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (n, l) = (2, 4);
    let (q, k, v) = (random(&mut rng, &[l, 3]), random(&mut rng, &[l, 3]), random(&mut rng, &[l, 3]));
    let zl = RelativeEmbeddingTable::zeros(TableMode::LocalLeft, 2 * n - 1, 3).unwrap();
    let zr = RelativeEmbeddingTable::zeros(TableMode::Global, n, 3).unwrap();
    let cfg = LocalAttentionConfig::new(n, l).unwrap();
    let out = relative_attention_local(&q, &k, &v, Some(&zl), Some(&zr), cfg, Default::default()).unwrap();
    let oracle = local_oracle(&q, &k, &v, None, None, n);
    assert!(out.z.max_abs_diff(&oracle) < 1e-12);
}

#[test]
fn local_random_matches_gather_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (n, m, dh) = (8, 4, 6);
    let l = n * m;
    let (q, k, v) = (random(&mut rng, &[l, dh]), random(&mut rng, &[l, dh]), random(&mut rng, &[l, dh]));
    let left = left_table(&mut rng, n, dh);
    let right = global_table(&mut rng, n, dh);
    let cfg = LocalAttentionConfig::new(n, l).unwrap();
    let out = relative_attention_local(&q, &k, &v, Some(&left), Some(&right), cfg, Default::default()).unwrap();
    let oracle = local_oracle(&q, &k, &v, Some(&left), Some(&right), n);
    assert!(out.z.max_abs_diff(&oracle) < 1e-12);
    for i in 0..l {
        let s: f64 = out.weights.row(i).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn single_block_local_equals_global() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let n = 6;
    let (q, k, v) = (random(&mut rng, &[n, 4]), random(&mut rng, &[n, 4]), random(&mut rng, &[n, 4]));
    let right = global_table(&mut rng, n, 4);
    let left = left_table(&mut rng, n, 4);
    let cfg = LocalAttentionConfig::new(n, n).unwrap();
    let local = relative_attention_local(&q, &k, &v, Some(&left), Some(&right), cfg, Default::default()).unwrap();
    let global = relative_attention_global(&q, &k, &v, Some(&right), &CausalMask::new(n), Default::default()).unwrap();
    assert!(local.z.max_abs_diff(&global.z) < 1e-14);
}

#[test]
fn local_attention_ignores_keys_outside_span() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (n, l, dh) = (4, 32, 4);
    let (q, k, v) = (random(&mut rng, &[l, dh]), random(&mut rng, &[l, dh]), random(&mut rng, &[l, dh]));
    let left = left_table(&mut rng, n, dh);
    let right = global_table(&mut rng, n, dh);
    let cfg = LocalAttentionConfig::new(n, l).unwrap();
    let base = relative_attention_local(&q, &k, &v, Some(&left), Some(&right), cfg, Default::default()).unwrap();
    for t in 0..l {
        let mut v2 = v.clone();
        v2.row_mut(t)[0] += 5.0;
        let out = relative_attention_local(&q, &k, &v2, Some(&left), Some(&right), cfg, Default::default()).unwrap();
        for i in 0..l {
            let b = i / n;
            let in_span = t <= i && t + n >= b * n;
            if !in_span {
                assert_eq!(out.z.row(i), base.z.row(i), "t={t} i={i}");
            }
        }
    }
}

// ------------------------------------------------------------- gradients

const H: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Central differences of `f` with respect to every entry of `x`.
fn numeric_grad(x: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut g = Tensor::zeros(x.shape());
    for idx in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[idx] += H;
        let mut xm = x.clone();
        xm.data_mut()[idx] -= H;
        g.data_mut()[idx] = (f(&xp) - f(&xm)) / (2.0 * H);
    }
    g
}

fn assert_grad_close(name: &str, analytic: &Tensor, numeric: &Tensor) {
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        assert!(rel_err(a, n) < 1e-6, "{name}[{i}]: analytic {a} numeric {n}");
    }
}

fn weighted_sum(z: &Tensor, g: &Tensor) -> f64 {
    dot(z.data(), g.data())
}

#[test]
fn global_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let (l, dh) = (6, 4);
    let (q, k, v) = (random(&mut rng, &[l, dh]), random(&mut rng, &[l, dh]), random(&mut rng, &[l, dh]));
    let table = global_table(&mut rng, 4, dh);
    let extra = random(&mut rng, &[l, l]);
    let g = random(&mut rng, &[l, dh]);
    let mask = CausalMask::new(l);

    let run = |q: &Tensor, k: &Tensor, v: &Tensor, t: &RelativeEmbeddingTable<f64>, e: &Tensor| {
        let extras = AttentionExtras { extra_logits: Some(e), dropout: None };
        weighted_sum(&relative_attention_global(q, k, v, Some(t), &mask, extras).unwrap().z, &g)
    };
    let extras = AttentionExtras { extra_logits: Some(&extra), dropout: None };
    let (_, tape) = relative_attention_global_taped(&q, &k, &v, Some(&table), &mask, extras).unwrap();
    let grads = relative_attention_global_backward(&tape, Some(&table), &g).unwrap();

    assert_grad_close("dq", &grads.dq, &numeric_grad(&q, |x| run(x, &k, &v, &table, &extra)));
    assert_grad_close("dk", &grads.dk, &numeric_grad(&k, |x| run(&q, x, &v, &table, &extra)));
    assert_grad_close("dv", &grads.dv, &numeric_grad(&v, |x| run(&q, &k, x, &table, &extra)));
    let dt = numeric_grad(table.embeddings(), |x| {
        let t = RelativeEmbeddingTable::new(TableMode::Global, x.clone()).unwrap();
        run(&q, &k, &v, &t, &extra)
    });
    assert_grad_close("dtable", grads.d_table.as_ref().unwrap(), &dt);
    // only the causal triangle of the extra logits reaches the output
    let de = numeric_grad(&extra, |x| run(&q, &k, &v, &table, x));
    assert_grad_close("dextra", grads.d_extra.as_ref().unwrap(), &de);
}

#[test]
fn global_backward_with_dropout_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let (l, dh) = (5, 3);
    let (q, k, v) = (random(&mut rng, &[l, dh]), random(&mut rng, &[l, dh]), random(&mut rng, &[l, dh]));
    let drop = Tensor::from_fn(&[l, l], |i| if i % 3 == 0 { 0.0 } else { 1.0 / 0.9 });
    let g = random(&mut rng, &[l, dh]);
    let mask = CausalMask::new(l);
    let extras = AttentionExtras { extra_logits: None, dropout: Some(&drop) };
    let (_, tape) = relative_attention_global_taped(&q, &k, &v, None, &mask, extras).unwrap();
    let grads = relative_attention_global_backward(&tape, None, &g).unwrap();
    let num =
        numeric_grad(&q, |x| weighted_sum(&relative_attention_global(x, &k, &v, None, &mask, extras).unwrap().z, &g));
    assert_grad_close("dq", &grads.dq, &num);
}

#[test]
fn local_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let (n, l, dh) = (3, 9, 4);
    let (q, k, v) = (random(&mut rng, &[l, dh]), random(&mut rng, &[l, dh]), random(&mut rng, &[l, dh]));
    let left = left_table(&mut rng, n, dh);
    let right = global_table(&mut rng, n, dh);
    let extra = random(&mut rng, &[l, l]);
    let g = random(&mut rng, &[l, dh]);
    let cfg = LocalAttentionConfig::new(n, l).unwrap();
    let run = |q: &Tensor,
               k: &Tensor,
               v: &Tensor,
               lt: &RelativeEmbeddingTable<f64>,
               rt: &RelativeEmbeddingTable<f64>,
               e: &Tensor| {
        let extras = AttentionExtras { extra_logits: Some(e), dropout: None };
        weighted_sum(&relative_attention_local(q, k, v, Some(lt), Some(rt), cfg, extras).unwrap().z, &g)
    };
    let extras = AttentionExtras { extra_logits: Some(&extra), dropout: None };
    let (_, tape) = relative_attention_local_taped(&q, &k, &v, Some(&left), Some(&right), cfg, extras).unwrap();
    let grads = relative_attention_local_backward(&tape, Some(&left), Some(&right), &g).unwrap();

    assert_grad_close("dq", &grads.dq, &numeric_grad(&q, |x| run(x, &k, &v, &left, &right, &extra)));
    assert_grad_close("dk", &grads.dk, &numeric_grad(&k, |x| run(&q, x, &v, &left, &right, &extra)));
    assert_grad_close("dv", &grads.dv, &numeric_grad(&v, |x| run(&q, &k, x, &left, &right, &extra)));
    let dl = numeric_grad(left.embeddings(), |x| {
        let t = RelativeEmbeddingTable::new(TableMode::LocalLeft, x.clone()).unwrap();
        run(&q, &k, &v, &t, &right, &extra)
    });
    assert_grad_close("dleft", grads.d_table_left.as_ref().unwrap(), &dl);
    let dr = numeric_grad(right.embeddings(), |x| {
        let t = RelativeEmbeddingTable::new(TableMode::Global, x.clone()).unwrap();
        run(&q, &k, &v, &left, &t, &extra)
    });
    assert_grad_close("dright", grads.d_table.as_ref().unwrap(), &dr);
    let de = numeric_grad(&extra, |x| run(&q, &k, &v, &left, &right, x));
    assert_grad_close("dextra", grads.d_extra.as_ref().unwrap(), &de);
}

#[test]
fn zero_upstream_gradient_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (l, dh) = (6, 4);
    let (q, k, v) = (random(&mut rng, &[l, dh]), random(&mut rng, &[l, dh]), random(&mut rng, &[l, dh]));
    let table = global_table(&mut rng, l, dh);
    let (_, tape) =
        relative_attention_global_taped(&q, &k, &v, Some(&table), &CausalMask::new(l), Default::default()).unwrap();
    let grads = relative_attention_global_backward(&tape, Some(&table), &Tensor::zeros(&[l, dh])).unwrap();
    for t in [&grads.dq, &grads.dk, &grads.dv, grads.d_table.as_ref().unwrap()] {
        assert!(t.data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn multi_head_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let (l, d, heads) = (6, 4, 2);
    let x = random(&mut rng, &[l, d]);
    let w = ProjectionWeights {
        wq: random(&mut rng, &[d, d]),
        wk: random(&mut rng, &[d, d]),
        wv: random(&mut rng, &[d, d]),
        wo: random(&mut rng, &[d, d]),
    };
    let tables = HeadTables::Global(vec![global_table(&mut rng, 4, 2), global_table(&mut rng, 4, 2)]);
    let g = random(&mut rng, &[l, d]);
    let f = |x: &Tensor, w: &ProjectionWeights<f64>| {
        weighted_sum(&multi_head_attention(x, w, &tables, heads, AttentionMode::Global).unwrap(), &g)
    };
    let mha = MultiHeadAttention { weights: &w, tables: &tables, heads, mode: AttentionMode::Global };
    let (_, tape) = mha.forward_taped::<NoBias>(&x, None, None).unwrap();
    let grads = mha.backward::<NoBias>(&tape, None, &g).unwrap();
    assert_grad_close("dx", &grads.dx, &numeric_grad(&x, |x| f(x, &w)));
    let dwq = numeric_grad(&w.wq, |m| f(&x, &ProjectionWeights { wq: m.clone(), ..w.clone() }));
    assert_grad_close("dwq", &grads.projections.wq, &dwq);
    let dwo = numeric_grad(&w.wo, |m| f(&x, &ProjectionWeights { wo: m.clone(), ..w.clone() }));
    assert_grad_close("dwo", &grads.projections.wo, &dwo);
}

// ---------------------------------------------------------- multi-head

#[test]
fn multi_head_shape_and_causality() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for &(l, d, heads) in &[(5, 6, 3), (8, 8, 1), (12, 8, 4)] {
        let x = random(&mut rng, &[l, d]);
        let w = ProjectionWeights {
            wq: random(&mut rng, &[d, d]),
            wk: random(&mut rng, &[d, d]),
            wv: random(&mut rng, &[d, d]),
            wo: random(&mut rng, &[d, d]),
        };
        let dh = d / heads;
        let tables = HeadTables::Global((0..heads).map(|_| global_table(&mut rng, l, dh)).collect());
        let y = multi_head_attention(&x, &w, &tables, heads, AttentionMode::Global).unwrap();
        assert_eq!(y.shape(), &[l, d]);
        for t in 1..l {
            let mut x2 = x.clone();
            x2.row_mut(t)[0] += 1.0;
            let y2 = multi_head_attention(&x2, &w, &tables, heads, AttentionMode::Global).unwrap();
            for s in 0..t {
                assert_eq!(y.row(s), y2.row(s));
            }
        }
    }
    let x: Tensor = Tensor::zeros(&[3, 6]);
    let err = multi_head_attention(&x, &ProjectionWeights::zeros(6), &HeadTables::None, 4, AttentionMode::Global);
    assert!(matches!(err, Err(reltrans::Error::Config(_))));
}

#[test]
fn single_head_is_projected_single_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let (l, d) = (7, 4);
    let x = random(&mut rng, &[l, d]);
    let w = ProjectionWeights {
        wq: random(&mut rng, &[d, d]),
        wk: random(&mut rng, &[d, d]),
        wv: random(&mut rng, &[d, d]),
        wo: random(&mut rng, &[d, d]),
    };
    let table = global_table(&mut rng, l, d);
    let y = multi_head_attention(&x, &w, &HeadTables::Global(vec![table.clone()]), 1, AttentionMode::Global).unwrap();
    let q = reltrans::matmul(&x, &w.wq).unwrap();
    let k = reltrans::matmul(&x, &w.wk).unwrap();
    let v = reltrans::matmul(&x, &w.wv).unwrap();
    let z = relative_attention_global(&q, &k, &v, Some(&table), &CausalMask::new(l), Default::default()).unwrap().z;
    assert!(y.bitwise_eq(&reltrans::matmul(&z, &w.wo).unwrap()));
}

// --------------------------------------------------------------- memory

#[test]
fn naive_path_materializes_quadratic_gather() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let (l, dh) = (48, 8);
    let q = random(&mut rng, &[l, dh]).cast::<f32>();
    let table = global_table(&mut rng, l, dh);
    let table = RelativeEmbeddingTable::new(TableMode::Global, table.embeddings().cast::<f32>()).unwrap();
    let (_, naive) = meter::measure(|| naive_srel_global(&q, &table).unwrap());
    let (_, fast) = meter::measure(|| efficient_srel_global(&q, &table).unwrap());
    assert_eq!(naive.category(Category::RelativeEmbedding).peak_bytes(), l * l * dh * 4);
    assert_eq!(fast.category(Category::RelativeEmbedding).peak_bytes(), l * dh * 4);
    assert_eq!(naive.category(Category::RelativeLogits).peak_bytes(), l * l * 4);
    // Q Eᵀ and its padded copy are briefly alive together
    assert!(fast.category(Category::RelativeLogits).peak_bytes() <= 3 * l * l * 4);
}
