use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reltrans::gradcheck::check_model;
use reltrans::model::weights::NormWeights;
use reltrans::model::{
    train_step, AttentionKind, Model, ModelConfig, NormPlacement, PositionMode, TrainConfig, TrainState,
};
use reltrans::Tensor;

fn small(attention: AttentionKind) -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        max_len: 8,
        depth: 8,
        heads: 2,
        layers: 2,
        feedforward_size: 12,
        attention,
        block_length: 4,
        dropout: 0.0,
        init_scale: 0.3,
        seed: 5,
        ..Default::default()
    }
}

fn random_tokens(n: usize, vocab: u32, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0..vocab)).collect()
}

fn assert_gradcheck(cfg: ModelConfig, tokens: &[u32]) {
    let model = Model::init(cfg).unwrap();
    let report = check_model(&model, tokens, 1e-5, 1e-5).unwrap();
    assert!(report.passes(1e-5), "max relative error {} in {}", report.max_relative_error, report.worst_slot);
}

#[test]
fn gradcheck_global_with_pitch_time() {
    let cfg = ModelConfig { use_pitch_time_relative: true, ..small(AttentionKind::Global) };
    assert_gradcheck(cfg, &random_tokens(8, 12, 1));
}

#[test]
fn gradcheck_local_with_pitch_time() {
    let cfg = ModelConfig { use_pitch_time_relative: true, ..small(AttentionKind::Local) };
    assert_gradcheck(cfg, &random_tokens(8, 12, 2));
}

#[test]
fn gradcheck_local_with_padding() {
    assert_gradcheck(small(AttentionKind::Local), &random_tokens(7, 12, 3));
}

#[test]
fn gradcheck_post_norm_with_positions() {
    let cfg = ModelConfig {
        norm: NormPlacement::Post,
        position_mode: PositionMode::ConcatSinusoid,
        sinusoid_width: 4,
        ..small(AttentionKind::Global)
    };
    assert_gradcheck(cfg, &random_tokens(8, 12, 4));
}

fn layer_norm(x: &[f64], w: &NormWeights) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter().enumerate().map(|(i, v)| (v - mean) * inv * w.gain.data()[i] + w.bias.data()[i]).collect()
}

fn vec_mat(x: &[f64], m: &Tensor) -> Vec<f64> {
    (0..m.cols()).map(|j| x.iter().enumerate().map(|(i, v)| v * m.get(i, j)).sum()).collect()
}

/// Textbook pre-norm decoder written with plain loops.
fn plain_decoder(model: &Model, tokens: &[u32]) -> Vec<Vec<f64>> {
    let cfg = &model.config;
    let w = &model.weights;
    let dh = cfg.depth / cfg.heads;
    let mut x: Vec<Vec<f64>> = tokens.iter().map(|&t| w.embedding.row(t as usize).to_vec()).collect();
    for lw in &w.layers {
        let a: Vec<Vec<f64>> = x.iter().map(|r| layer_norm(r, &lw.norm1)).collect();
        let q: Vec<_> = a.iter().map(|r| vec_mat(r, &lw.attention.wq)).collect();
        let k: Vec<_> = a.iter().map(|r| vec_mat(r, &lw.attention.wk)).collect();
        let v: Vec<_> = a.iter().map(|r| vec_mat(r, &lw.attention.wv)).collect();
        let mut concat = vec![vec![0.0; cfg.depth]; tokens.len()];
        for h in 0..cfg.heads {
            let c = h * dh..(h + 1) * dh;
            for i in 0..tokens.len() {
                let logits: Vec<f64> =
                    (0..=i).map(|j| c.clone().map(|d| q[i][d] * k[j][d]).sum::<f64>() / (dh as f64).sqrt()).collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for d in c.clone() {
                    concat[i][d] = (0..=i).map(|j| e[j] / z * v[j][d]).sum();
                }
            }
        }
        for i in 0..tokens.len() {
            let o = vec_mat(&concat[i], &lw.attention.wo);
            let hid: Vec<f64> = x[i].iter().zip(&o).map(|(a, b)| a + b).collect();
            let b = layer_norm(&hid, &lw.norm2);
            let inner: Vec<f64> =
                vec_mat(&b, &lw.ffn.w1).iter().zip(lw.ffn.b1.data()).map(|(a, c)| (a + c).max(0.0)).collect();
            let f = vec_mat(&inner, &lw.ffn.w2);
            x[i] = hid.iter().zip(&f).zip(lw.ffn.b2.data()).map(|((h, f), b)| h + f + b).collect();
        }
    }
    x.iter()
        .map(|r| {
            let n = layer_norm(r, &w.final_norm);
            vec_mat(&n, &w.w_out).iter().zip(w.b_out.data()).map(|(a, b)| a + b).collect()
        })
        .collect()
}

#[test]
fn non_relative_model_matches_plain_decoder() {
    let cfg = ModelConfig { use_relative: false, ..small(AttentionKind::Global) };
    let model = Model::init(cfg).unwrap();
    let tokens = random_tokens(8, 12, 9);
    let got = model.forward(&tokens).unwrap();
    let want = plain_decoder(&model, &tokens);
    for (i, row) in want.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            assert!((got.get(i, j) - v).abs() < 1e-12, "({i},{j}) {} vs {v}", got.get(i, j));
        }
    }
}

#[test]
fn parameter_count_matches_slots() {
    for cfg in [
        small(AttentionKind::Global),
        small(AttentionKind::Local),
        ModelConfig { use_pitch_time_relative: true, ..small(AttentionKind::Global) },
        ModelConfig { use_relative: false, ..small(AttentionKind::Global) },
        ModelConfig::default(),
    ] {
        let model = Model::init(cfg.clone()).unwrap();
        let counted: usize = model.weights.slots().iter().map(|(_, t)| t.len()).sum();
        assert_eq!(cfg.parameter_count(), counted);
    }
    // hand count: D=8 F=12 V=12 H=2 L=8, global tables of 5 rows by 4 per head
    let cfg = small(AttentionKind::Global);
    let per_layer = 4 * 64 + 2 * 5 * 4 + 2 * 8 * 12 + 12 + 8 + 4 * 8;
    assert_eq!(cfg.parameter_count(), 12 * 8 + 2 * per_layer + 2 * 8 + 8 * 12 + 12);
}

fn train_cfg(steps: u64) -> TrainConfig {
    TrainConfig { steps, batch_size: 1, peak_lr: 1e-2, warmup_steps: 50, ..Default::default() }
}

#[test]
fn overfits_a_tiny_corpus() {
    let cfg = ModelConfig {
        vocab_size: 16,
        max_len: 200,
        depth: 16,
        heads: 2,
        layers: 1,
        feedforward_size: 32,
        dropout: 0.0,
        seed: 1,
        ..Default::default()
    };
    let seq: Vec<u32> = random_tokens(200, 16, 11);
    let mut state = TrainState::new(Model::init(cfg).unwrap(), &train_cfg(2000)).unwrap();
    let batch = vec![seq.clone()];
    for _ in 0..2000 {
        train_step(&mut state, &batch).unwrap();
    }
    let (sum, n) = state.model.sequence_nll(&seq).unwrap();
    assert!(sum / (n as f64) < 0.1, "training NLL {}", sum / n as f64);
}

#[test]
fn same_seed_gives_identical_weights() {
    let cfg = ModelConfig { dropout: 0.1, ..small(AttentionKind::Local) };
    let run = || {
        let tc = TrainConfig { seed: 3, ..train_cfg(100) };
        let mut state = TrainState::new(Model::init(cfg.clone()).unwrap(), &tc).unwrap();
        let seqs = vec![random_tokens(8, 12, 1), random_tokens(8, 12, 2)];
        for _ in 0..100 {
            let batch = reltrans::model::sample_batch(state.rng(), &seqs, 2, 8).unwrap();
            train_step(&mut state, &batch).unwrap();
        }
        state.checkpoint().to_bytes().unwrap()
    };
    assert_eq!(run(), run());
}
