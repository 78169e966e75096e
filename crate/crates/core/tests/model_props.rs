use mmseq::model::{decode, DecodeMode, Seq2Seq};
use mmseq::numerics::ParamStore;
use mmseq::prep::{TokenId, PAD};
use mmseq::rng::rng_for;
use mmseq::rnn::{BiGru, RnnConfig};
use mmseq::train::{fit, resume_state, to_checkpoint, Example, TrainConfig, TrainState};
use mmseq::transformer::{causal_mask, multi_head_attention, AttentionParams, Pass, Transformer, TransformerConfig};
use mmseq::{Checkpoint, Tensor};
use proptest::prelude::*;
use rand::Rng as _;

fn tiny_tfm(seed: u64) -> Transformer {
    let cfg = TransformerConfig { d_emb: 8, d_ff: 16, n_blocks: 1, heads: 2, max_in_len: 8, max_out_len: 8, grid_vocab: 12, seg_vocab: 12, dropout: 0.0 };
    Transformer::new(cfg, seed).unwrap()
}

fn tiny_gru(seed: u64) -> BiGru {
    let cfg = RnnConfig { d_emb: 6, hidden: 8, max_in_len: 8, max_out_len: 8, grid_vocab: 12, seg_vocab: 12 };
    BiGru::new(cfg, seed).unwrap()
}

fn random_tokens(rng: &mut impl rand::Rng, max_len: usize) -> Vec<TokenId> {
    let n = rng.random_range(1..=max_len);
    (0..n).map(|_| rng.random_range(4..12)).collect()
}

/// Attention written as explicit loops over heads, queries and keys.
fn attention_loops(q_in: &Tensor, k_in: &Tensor, w: &[Tensor; 8], heads: usize, mask: Option<&Tensor>) -> Tensor {
    let proj = |x: &Tensor, wm: &Tensor, b: &Tensor| {
        let (n, d) = x.dims2().unwrap();
        let out = wm.shape()[1];
        let mut y = vec![0.0; n * out];
        for i in 0..n {
            for j in 0..out {
                let mut s = b.data()[j];
                for k in 0..d {
                    s += x.at(i, k) * wm.at(k, j);
                }
                y[i * out + j] = s;
            }
        }
        Tensor::new(&[n, out], y).unwrap()
    };
    let q = proj(q_in, &w[0], &w[1]);
    let k = proj(k_in, &w[2], &w[3]);
    let v = proj(k_in, &w[4], &w[5]);
    let (lq, d) = q.dims2().unwrap();
    let lk = k.dims2().unwrap().0;
    let dk = d / heads;
    let mut cat = vec![0.0; lq * d];
    for h in 0..heads {
        for i in 0..lq {
            let mut scores: Vec<f64> = (0..lk)
                .map(|j| {
                    let dot: f64 = (0..dk).map(|c| q.at(i, h * dk + c) * k.at(j, h * dk + c)).sum();
                    dot / (dk as f64).sqrt() + mask.map_or(0.0, |m| m.at(i, j))
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            scores.iter_mut().for_each(|s| *s = (*s - mx).exp());
            let z: f64 = scores.iter().sum();
            for c in 0..dk {
                cat[i * d + h * dk + c] = (0..lk).map(|j| scores[j] / z * v.at(j, h * dk + c)).sum();
            }
        }
    }
    proj(&Tensor::new(&[lq, d], cat).unwrap(), &w[6], &w[7])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_matches_loops(seed in any::<u64>(), lq in 1usize..6, lk in 1usize..7, heads in 1usize..4, causal in any::<bool>()) {
        let d = 4 * heads;
        let lk = if causal { lq } else { lk };
        let mut rng = rng_for(seed, "attn", 0);
        let mut rand_t = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let w = [
            rand_t(&[d, d]), rand_t(&[d]), rand_t(&[d, d]), rand_t(&[d]),
            rand_t(&[d, d]), rand_t(&[d]), rand_t(&[d, d]), rand_t(&[d]),
        ];
        let q_in = rand_t(&[lq, d]);
        let k_in = rand_t(&[lk, d]);
        let mut store = ParamStore::new();
        let names = ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"];
        let ids: Vec<_> = names.iter().zip(&w).map(|(n, t)| store.add(*n, t.clone()).unwrap()).collect();
        let p = AttentionParams { wq: ids[0], bq: ids[1], wk: ids[2], bk: ids[3], wv: ids[4], bv: ids[5], wo: ids[6], bo: ids[7], heads };
        let mask = causal.then(|| causal_mask(lq));
        let mut pass = Pass::new();
        let q = pass.tape.constant(q_in.clone());
        let k = pass.tape.constant(k_in.clone());
        let m = mask.clone().map(|m| pass.tape.constant(m));
        let out = multi_head_attention(&mut pass, &store, q, k, k, m, &p).unwrap();
        let got = pass.tape.value(out).clone();
        let want = attention_loops(&q_in, &k_in, &w, heads, mask.as_ref());
        prop_assert_eq!(got.shape(), want.shape());
        for (a, b) in got.data().iter().zip(want.data()) {
            prop_assert!((a - b).abs() < 1e-10, "{} vs {}", a, b);
        }
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn decoder_is_causal() {
    let mut rng = rng_for(1, "causal", 0);
    for seed in 0..20 {
        let m = tiny_tfm(seed);
        let input = random_tokens(&mut rng, 8);
        let mem = m.encoder_forward(&input).unwrap();
        let mut a = vec![1];
        a.extend(random_tokens(&mut rng, 6));
        let mut b = a.clone();
        let cut = rng.random_range(1..a.len().max(2)).min(a.len());
        for t in &mut b[cut..] {
            *t = rng.random_range(4..12);
        }
        let la = m.decoder_forward(&a, &mem).unwrap();
        let lb = m.decoder_forward(&b, &mem).unwrap();
        for r in 0..cut {
            assert!(max_abs_diff(la.row(r), lb.row(r)) < 1e-12, "row {r} sees the future");
        }
    }
}

/// Next-token distributions after a fixed prefix.
fn step_probs<M: Seq2Seq>(m: &M, input: &[TokenId], prefix: &[TokenId]) -> Vec<f64> {
    m.start_decoding(input).unwrap().next_log_probs(prefix).unwrap()
}

#[test]
fn trailing_pad_does_not_change_outputs() {
    let mut rng = rng_for(2, "pad", 0);
    for seed in 0..20 {
        let input = random_tokens(&mut rng, 5);
        let mut padded = input.clone();
        padded.extend(std::iter::repeat_n(PAD, rng.random_range(1..=3)));
        let prefix = [1, 5, 7];
        let t = tiny_tfm(seed);
        assert!(max_abs_diff(&step_probs(&t, &input, &prefix), &step_probs(&t, &padded, &prefix)) < 1e-12);
        let g = tiny_gru(seed);
        assert!(max_abs_diff(&step_probs(&g, &input, &prefix), &step_probs(&g, &padded, &prefix)) < 1e-12);
    }
}

fn beam_one_is_greedy<M: Seq2Seq>(m: &M, input: &[TokenId]) {
    let g = decode(m.start_decoding(input).unwrap().as_mut(), DecodeMode::Greedy, m.max_out()).unwrap();
    let b = decode(m.start_decoding(input).unwrap().as_mut(), DecodeMode::Beam(1), m.max_out()).unwrap();
    assert_eq!(g.tokens, b.tokens);
    assert_eq!(g.truncated, b.truncated);
    assert!((g.log_prob - b.log_prob).abs() < 1e-12);
}

#[test]
fn beam_width_one_equals_greedy_on_100_models() {
    let mut rng = rng_for(3, "beam", 0);
    for seed in 0..100 {
        let input = random_tokens(&mut rng, 8);
        beam_one_is_greedy(&tiny_tfm(seed), &input);
        beam_one_is_greedy(&tiny_gru(seed), &input);
    }
}

fn toy_examples(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = rng_for(seed, "toy", 0);
    (0..n).map(|_| Example { input: random_tokens(&mut rng, 8), target: random_tokens(&mut rng, 6) }).collect()
}

fn train_bytes<M: Seq2Seq>(mut m: M, train: &[Example], val: &[Example], cfg: &TrainConfig) -> Vec<Vec<u8>> {
    let mut per_epoch = Vec::new();
    fit(&mut m, train, val, cfg, TrainState::default(), &mut |m, st| {
        per_epoch.push(to_checkpoint(m, Some(st))?.to_bytes()?);
        Ok(())
    })
    .unwrap();
    per_epoch
}

#[test]
fn training_is_byte_deterministic() {
    let (train, val) = (toy_examples(24, 4), toy_examples(6, 5));
    let cfg = TrainConfig { epochs: 3, batch_size: 5, seed: 9, patience: None, ..TrainConfig::default() };
    let dropout = TransformerConfig { dropout: 0.2, ..tiny_tfm(0).config().clone() };
    let a = train_bytes(Transformer::new(dropout.clone(), 7).unwrap(), &train, &val, &cfg);
    let b = train_bytes(Transformer::new(dropout, 7).unwrap(), &train, &val, &cfg);
    assert_eq!(a.len(), 3);
    assert_eq!(a, b);
    assert_eq!(train_bytes(tiny_gru(7), &train, &val, &cfg), train_bytes(tiny_gru(7), &train, &val, &cfg));
}

fn resume_matches<M: Seq2Seq>(make: impl Fn() -> M) {
    let (train, val) = (toy_examples(20, 6), toy_examples(5, 7));
    let cfg = TrainConfig { epochs: 4, batch_size: 6, seed: 3, patience: None, ..TrainConfig::default() };
    let full = train_bytes(make(), &train, &val, &cfg);

    let mut m = make();
    let half = TrainConfig { epochs: 2, ..cfg.clone() };
    let st = fit(&mut m, &train, &val, &half, TrainState::default(), &mut |_, _| Ok(())).unwrap();
    let bytes = to_checkpoint(&m, Some(&st)).unwrap().to_bytes().unwrap();
    assert_eq!(bytes, full[1]);
    let ck = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
    let mut m = M::from_checkpoint(&ck).unwrap();
    let st = fit(&mut m, &train, &val, &cfg, resume_state(&ck).unwrap(), &mut |_, _| Ok(())).unwrap();
    assert_eq!(to_checkpoint(&m, Some(&st)).unwrap().to_bytes().unwrap(), full[3]);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    resume_matches(|| Transformer::new(TransformerConfig { dropout: 0.1, ..tiny_tfm(0).config().clone() }, 11).unwrap());
    resume_matches(|| tiny_gru(11));
}
