use reltrans::model::config::{AttributeScheme, PitchTimeConfig};
use reltrans::model::{pitch_time_relative_logits, TokenAttributes};
use reltrans::Tensor;

#[test]
fn four_token_hand_case() {
    let cfg =
        PitchTimeConfig { max_time_distance: 2, max_pitch_interval: 3, gather_cap: 16, scheme: AttributeScheme::Jsb };
    let attrs = TokenAttributes { times: vec![0, 1, 1, 3], pitches: vec![Some(60), Some(64), None, Some(55)] };
    // time row r reads r + 1 through channel 0, pitch row r reads 100 (r + 1) through channel 1
    let e_t = Tensor::from_rows(&(0..5).map(|r| vec![r as f64 + 1.0, 0.0]).collect::<Vec<_>>());
    let e_p = Tensor::from_rows(&(0..8).map(|r| vec![0.0, 100.0 * (r as f64 + 1.0)]).collect::<Vec<_>>());
    let q = Tensor::full(&[4, 2], 1.0);
    let got = pitch_time_relative_logits(&cfg, &q, &attrs, &e_t, &e_p).unwrap();
    let want =
        [[403.0, 0.0, 0.0, 0.0], [102.0, 403.0, 0.0, 0.0], [802.0, 803.0, 803.0, 0.0], [701.0, 701.0, 801.0, 403.0]];
    for i in 0..4 {
        for j in 0..4 {
            assert_eq!(got.get(i, j), want[i][j], "({i},{j})");
        }
    }
}

#[test]
fn double_loop_oracle_on_random_case() {
    let cfg = PitchTimeConfig::default();
    let attrs = TokenAttributes {
        times: vec![0, 3, 3, 90, 91, 200],
        pitches: vec![Some(40), None, Some(41), Some(100), Some(12), None],
    };
    let l = 6;
    let dh = 3;
    let e_t = Tensor::from_fn(&[cfg.time_rows(), dh], |k| (k as f64 * 0.37).sin());
    let e_p = Tensor::from_fn(&[cfg.pitch_rows(), dh], |k| (k as f64 * 0.11).cos());
    let q = Tensor::from_fn(&[l, dh], |k| k as f64 * 0.5 - 3.0);
    let got = pitch_time_relative_logits(&cfg, &q, &attrs, &e_t, &e_p).unwrap();
    let (t, p) = (cfg.max_time_distance as i64, cfg.max_pitch_interval as i64);
    for i in 0..l {
        for j in 0..l {
            let mut want = 0.0;
            if j <= i {
                let rt = ((attrs.times[j] - attrs.times[i]).clamp(-t, t) + t) as usize;
                let rp = match (attrs.pitches[i], attrs.pitches[j]) {
                    (Some(a), Some(b)) => ((b as i64 - a as i64).clamp(-p, p) + p) as usize,
                    _ => 2 * p as usize + 1,
                };
                for d in 0..dh {
                    want += q.get(i, d) * e_t.get(rt, d);
                }
                for d in 0..dh {
                    want += q.get(i, d) * e_p.get(rp, d);
                }
            }
            assert!((got.get(i, j) - want).abs() < 1e-12, "({i},{j})");
        }
    }
}
