//! Bi-GRU encoder and GRU decoder with Luong (general) attention.
//!
//! Row-vector convention: a gate is `[h_prev, x] W + b` with
//! `W: [hidden + input, hidden]`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::{count_correct, log_softmax, ModelKind, RowLoss, Seq2Seq, StepDecoder};
use crate::numerics::{Checkpoint, ParamId, ParamStore, Tape, Tensor, Var, MASK_NEG};
use crate::prep::{TokenId, PAD};
use crate::rng::{rng_for, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct RnnConfig {
    pub d_emb: usize,
    pub hidden: usize,
    pub max_in_len: usize,
    pub max_out_len: usize,
    pub grid_vocab: usize,
    pub seg_vocab: usize,
}

impl RnnConfig {
    pub fn desk(grid_vocab: usize, seg_vocab: usize) -> Self {
        RnnConfig { d_emb: 64, hidden: 64, max_in_len: 8, max_out_len: 50, grid_vocab, seg_vocab }
    }

    pub fn full_scale(grid_vocab: usize, seg_vocab: usize) -> Self {
        RnnConfig { d_emb: 1024, hidden: 1024, ..Self::desk(grid_vocab, seg_vocab) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_emb == 0 || self.hidden == 0 || self.max_in_len == 0 || self.max_out_len == 0 {
            return Err(Error::invalid("rnn sizes must be positive"));
        }
        if self.grid_vocab == 0 || self.seg_vocab == 0 {
            return Err(Error::invalid("vocabulary sizes must be positive"));
        }
        Ok(())
    }

    pub fn to_hyper(&self) -> Vec<(String, String)> {
        [
            ("d_emb", self.d_emb),
            ("hidden", self.hidden),
            ("max_in_len", self.max_in_len),
            ("max_out_len", self.max_out_len),
            ("grid_vocab", self.grid_vocab),
            ("seg_vocab", self.seg_vocab),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(RnnConfig {
            d_emb: ck.hyper_parse("d_emb")?,
            hidden: ck.hyper_parse("hidden")?,
            max_in_len: ck.hyper_parse("max_in_len")?,
            max_out_len: ck.hyper_parse("max_out_len")?,
            grid_vocab: ck.hyper_parse("grid_vocab")?,
            seg_vocab: ck.hyper_parse("seg_vocab")?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GruParams {
    pub w_r: ParamId,
    pub b_r: ParamId,
    pub w_u: ParamId,
    pub b_u: ParamId,
    pub w_h: ParamId,
    pub b_h: ParamId,
    pub hidden: usize,
}

impl GruParams {
    pub fn register(store: &mut ParamStore, pre: &str, input: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        let shape = [hidden + input, hidden];
        Ok(GruParams {
            w_r: store.add_uniform(&format!("{pre}.w_r"), &shape, bound, rng)?,
            b_r: store.add_full(&format!("{pre}.b_r"), &[hidden], 0.0)?,
            w_u: store.add_uniform(&format!("{pre}.w_u"), &shape, bound, rng)?,
            b_u: store.add_full(&format!("{pre}.b_u"), &[hidden], 0.0)?,
            w_h: store.add_uniform(&format!("{pre}.w_h"), &shape, bound, rng)?,
            b_h: store.add_full(&format!("{pre}.b_h"), &[hidden], 0.0)?,
            hidden,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttnParams {
    /// [hidden, 2 * hidden]
    pub w_a: ParamId,
    /// [3 * hidden, hidden], no bias
    pub w_c: ParamId,
    /// [hidden, seg_vocab]
    pub w_s: ParamId,
    pub b_s: ParamId,
}

fn gate<'p>(tape: &mut Tape<'p>, store: &'p ParamStore, hx: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let w = tape.param(store, w);
    let b = tape.param(store, b);
    let z = tape.matmul(hx, w)?;
    tape.add_row(z, b)
}

/// One GRU update for row vectors `x: [1, in]`, `h_prev: [1, hidden]`.
pub fn gru_cell<'p>(tape: &mut Tape<'p>, store: &'p ParamStore, x: Var, h_prev: Var, p: &GruParams) -> Result<Var> {
    let (hr, hc) = tape.value(h_prev).dims2()?;
    let (xr, xc) = tape.value(x).dims2()?;
    let expect_rows = store.get(p.w_r).value.shape()[0];
    if hr != 1 || xr != 1 || hc != p.hidden || hc + xc != expect_rows {
        return Err(Error::Shape(format!(
            "gru cell: x {:?}, h {:?} for weights [{expect_rows}, {}]",
            tape.value(x).shape(),
            tape.value(h_prev).shape(),
            p.hidden
        )));
    }
    let hx = tape.concat_cols(&[h_prev, x])?;
    let r = gate(tape, store, hx, p.w_r, p.b_r)?;
    let r = tape.sigmoid(r);
    let u = gate(tape, store, hx, p.w_u, p.b_u)?;
    let u = tape.sigmoid(u);
    let rh = tape.mul(r, h_prev)?;
    let rhx = tape.concat_cols(&[rh, x])?;
    let cand = gate(tape, store, rhx, p.w_h, p.b_h)?;
    let cand = tape.tanh(cand);
    let diff = tape.sub(cand, h_prev)?;
    let step = tape.mul(u, diff)?;
    tape.add(h_prev, step)
}

/// Output of one decoder step.
pub struct LuongStep {
    pub logits: Var,
    pub state: Var,
    pub weights: Var,
}

pub struct BiGru {
    config: RnnConfig,
    store: ParamStore,
    enc_emb: ParamId,
    dec_emb: ParamId,
    fwd: GruParams,
    bwd: GruParams,
    init_w: ParamId,
    init_b: ParamId,
    dec: GruParams,
    attn: AttnParams,
}

impl BiGru {
    pub fn new(config: RnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, "init-gru", 0);
        let mut store = ParamStore::new();
        let (e, h) = (config.d_emb, config.hidden);
        let enc_emb = store.add_uniform("enc.emb", &[config.grid_vocab, e], 1.0, &mut rng)?;
        let dec_emb = store.add_uniform("dec.emb", &[config.seg_vocab, e], 1.0, &mut rng)?;
        let fwd = GruParams::register(&mut store, "enc.fwd", e, h, &mut rng)?;
        let bwd = GruParams::register(&mut store, "enc.bwd", e, h, &mut rng)?;
        let init_w = store.add_uniform("dec.init.w", &[2 * h, h], 1.0 / ((2 * h) as f64).sqrt(), &mut rng)?;
        let init_b = store.add_full("dec.init.b", &[h], 0.0)?;
        let dec = GruParams::register(&mut store, "dec.gru", e, h, &mut rng)?;
        let attn = AttnParams {
            w_a: store.add_uniform("attn.w_a", &[h, 2 * h], 1.0 / ((2 * h) as f64).sqrt(), &mut rng)?,
            w_c: store.add_uniform("attn.w_c", &[3 * h, h], 1.0 / ((3 * h) as f64).sqrt(), &mut rng)?,
            w_s: store.add_uniform("attn.w_s", &[h, config.seg_vocab], 1.0 / (h as f64).sqrt(), &mut rng)?,
            b_s: store.add_full("attn.b_s", &[config.seg_vocab], 0.0)?,
        };
        Ok(BiGru { config, store, enc_emb, dec_emb, fwd, bwd, init_w, init_b, dec, attn })
    }

    pub fn config(&self) -> &RnnConfig {
        &self.config
    }

    /// The recurrence has no length-bound parameters, so a trained model can
    /// be run on inputs longer than it was trained on.
    pub fn set_max_in_len(&mut self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::invalid("max input length must be positive"));
        }
        self.config.max_in_len = n;
        Ok(())
    }

    pub fn encoder_params(&self) -> (GruParams, GruParams) {
        (self.fwd, self.bwd)
    }

    pub fn encoder_embedding(&self) -> ParamId {
        self.enc_emb
    }

    /// Encoder states `H: [len, 2 * hidden]` plus the decoder's initial
    /// state. Both directions run over the non-PAD prefix only; PAD rows of
    /// `H` are zero.
    pub fn bigru_encode<'p>(&'p self, tape: &mut Tape<'p>, input: &[TokenId]) -> Result<(Var, Var)> {
        if input.is_empty() || input.len() > self.config.max_in_len {
            return Err(Error::invalid(format!("input length {} outside 1..={}", input.len(), self.config.max_in_len)));
        }
        let n = input.iter().position(|&t| t == PAD).unwrap_or(input.len());
        if n == 0 {
            return Err(Error::invalid("input has no tokens before padding"));
        }
        let h = self.config.hidden;
        let table = tape.param(&self.store, self.enc_emb);
        let emb = tape.embedding(table, &input[..n])?;
        let xs: Vec<Var> = (0..n).map(|t| tape.slice_rows(emb, t, 1)).collect::<Result<_>>()?;
        let zero = tape.constant(Tensor::zeros(&[1, h]));
        let mut fwd = Vec::with_capacity(n);
        let mut s = zero;
        for &x in &xs {
            s = gru_cell(tape, &self.store, x, s, &self.fwd)?;
            fwd.push(s);
        }
        let mut bwd = vec![zero; n];
        let mut s = zero;
        for t in (0..n).rev() {
            s = gru_cell(tape, &self.store, xs[t], s, &self.bwd)?;
            bwd[t] = s;
        }
        let mut rows = Vec::with_capacity(input.len());
        for t in 0..n {
            rows.push(tape.concat_cols(&[fwd[t], bwd[t]])?);
        }
        if input.len() > n {
            rows.push(tape.constant(Tensor::zeros(&[input.len() - n, 2 * h])));
        }
        let states = tape.concat_rows(&rows)?;
        let last = tape.concat_cols(&[fwd[n - 1], bwd[0]])?;
        let w = tape.param(&self.store, self.init_w);
        let b = tape.param(&self.store, self.init_b);
        let s0 = tape.matmul(last, w)?;
        let s0 = tape.add_row(s0, b)?;
        let s0 = tape.tanh(s0);
        Ok((states, s0))
    }

    /// One attention decoder step. `mask` is the additive [1, len] PAD mask
    /// over encoder positions.
    pub fn luong_step<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        y_prev: TokenId,
        s_prev: Var,
        states: Var,
        mask: Var,
    ) -> Result<LuongStep> {
        let table = tape.param(&self.store, self.dec_emb);
        let y = tape.embedding(table, &[y_prev])?;
        let s = gru_cell(tape, &self.store, y, s_prev, &self.dec)?;
        let wa = tape.param(&self.store, self.attn.w_a);
        let sw = tape.matmul(s, wa)?;
        let e = tape.matmul_t(sw, states)?;
        let e = tape.add(e, mask)?;
        let w = tape.softmax(e, 1)?;
        let c = tape.matmul(w, states)?;
        let cs = tape.concat_cols(&[c, s])?;
        let wc = tape.param(&self.store, self.attn.w_c);
        let st = tape.matmul(cs, wc)?;
        let st = tape.tanh(st);
        let ws = tape.param(&self.store, self.attn.w_s);
        let bs = tape.param(&self.store, self.attn.b_s);
        let logits = tape.matmul(st, ws)?;
        let logits = tape.add_row(logits, bs)?;
        Ok(LuongStep { logits, state: s, weights: w })
    }

    pub fn pad_mask(input: &[TokenId]) -> Tensor {
        let data = input.iter().map(|&t| if t == PAD { MASK_NEG } else { 0.0 }).collect();
        Tensor::new(&[1, input.len()], data).expect("sized")
    }

    /// Attention weights of every teacher-forced decoder step, [steps, len].
    pub fn attention_maps(&self, input: &[TokenId], target_in: &[TokenId]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (states, mut s) = self.bigru_encode(&mut tape, input)?;
        let mask = tape.constant(Self::pad_mask(input));
        let mut rows = Vec::new();
        for &y in target_in {
            let step = self.luong_step(&mut tape, y, s, states, mask)?;
            s = step.state;
            rows.push(step.weights);
        }
        let w = tape.concat_rows(&rows)?;
        Ok(tape.value(w).clone())
    }
}

impl Seq2Seq for BiGru {
    fn kind(&self) -> ModelKind {
        ModelKind::Gru
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn max_in(&self) -> usize {
        self.config.max_in_len
    }

    fn max_out(&self) -> usize {
        self.config.max_out_len
    }

    fn out_vocab(&self) -> usize {
        self.config.seg_vocab
    }

    fn row_loss<'p>(&'p self, tape: &mut Tape<'p>, input: &[TokenId], framed: &[TokenId], scale: f64) -> Result<RowLoss> {
        if framed.len() < 2 || framed.len() > self.config.max_out_len + 2 {
            return Err(Error::invalid(format!("framed target length {} outside 2..={}", framed.len(), self.config.max_out_len + 2)));
        }
        let (states, mut s) = self.bigru_encode(tape, input)?;
        let mask = tape.constant(Self::pad_mask(input));
        let mut logits = Vec::with_capacity(framed.len() - 1);
        for &y in &framed[..framed.len() - 1] {
            let step = self.luong_step(tape, y, s, states, mask)?;
            s = step.state;
            logits.push(step.logits);
        }
        let logits = tape.concat_rows(&logits)?;
        let labels = &framed[1..];
        let (correct, counted) = count_correct(tape.value(logits), labels);
        let loss = tape.cross_entropy_scaled(logits, labels, PAD, scale)?;
        Ok(RowLoss { loss, correct, counted })
    }

    fn start_decoding<'s>(&'s self, input: &[TokenId]) -> Result<Box<dyn StepDecoder + 's>> {
        let mut tape = Tape::new();
        let (states, s0) = self.bigru_encode(&mut tape, input)?;
        let mut cache = HashMap::new();
        cache.insert(Vec::new(), tape.value(s0).clone());
        Ok(Box::new(GruStep {
            model: self,
            states: tape.value(states).clone(),
            mask: Self::pad_mask(input),
            cache,
        }))
    }

    fn hyperparameters(&self) -> Vec<(String, String)> {
        self.config.to_hyper()
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != ModelKind::Gru.tag() {
            return Err(Error::invalid(format!("checkpoint holds a {} model, expected GRU", ck.kind)));
        }
        let mut model = BiGru::new(RnnConfig::from_checkpoint(ck)?, 0)?;
        crate::train::load_params(model.store_mut(), ck)?;
        Ok(model)
    }
}

/// Decoder states keyed by the consumed prefix, so beam hypotheses sharing a
/// prefix reuse work.
struct GruStep<'m> {
    model: &'m BiGru,
    states: Tensor,
    mask: Tensor,
    cache: HashMap<Vec<TokenId>, Tensor>,
}

impl GruStep<'_> {
    fn state_after(&mut self, prefix: &[TokenId]) -> Result<(Tensor, Vec<f64>)> {
        let (head, last) = prefix.split_at(prefix.len() - 1);
        if !self.cache.contains_key(head) {
            let (s, _) = self.state_after(head)?;
            self.cache.insert(head.to_vec(), s);
        }
        let s_prev = self.cache[head].clone();
        let mut tape = Tape::new();
        let s = tape.constant(s_prev);
        let h = tape.constant(self.states.clone());
        let m = tape.constant(self.mask.clone());
        let step = self.model.luong_step(&mut tape, last[0], s, h, m)?;
        Ok((tape.value(step.state).clone(), tape.value(step.logits).row(0).to_vec()))
    }
}

impl StepDecoder for GruStep<'_> {
    fn next_log_probs(&mut self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        if prefix.is_empty() {
            return Err(Error::invalid("decoder prefix must start with BOS"));
        }
        let (s, logits) = self.state_after(prefix)?;
        self.cache.insert(prefix.to_vec(), s);
        Ok(log_softmax(&logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_gru(store: &mut ParamStore, input: usize, hidden: usize) -> GruParams {
        let shape = [hidden + input, hidden];
        GruParams {
            w_r: store.add_full("w_r", &shape, 0.0).unwrap(),
            b_r: store.add_full("b_r", &[hidden], 0.0).unwrap(),
            w_u: store.add_full("w_u", &shape, 0.0).unwrap(),
            b_u: store.add_full("b_u", &[hidden], 0.0).unwrap(),
            w_h: store.add_full("w_h", &shape, 0.0).unwrap(),
            b_h: store.add_full("b_h", &[hidden], 0.0).unwrap(),
            hidden,
        }
    }

    #[test]
    fn zero_weights_halve_the_state() {
        let mut store = ParamStore::new();
        let p = zero_gru(&mut store, 2, 3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 2], vec![0.7, -1.0]).unwrap());
        let h0 = tape.constant(Tensor::zeros(&[1, 3]));
        let h = gru_cell(&mut tape, &store, x, h0, &p).unwrap();
        assert_eq!(tape.value(h).data(), &[0.0; 3]);
        let v = tape.constant(Tensor::new(&[1, 3], vec![2.0, -4.0, 0.5]).unwrap());
        let h = gru_cell(&mut tape, &store, x, v, &p).unwrap();
        assert_eq!(tape.value(h).data(), &[1.0, -2.0, 0.25]);
        let bad = tape.constant(Tensor::zeros(&[1, 4]));
        assert!(gru_cell(&mut tape, &store, x, bad, &p).is_err());
    }

    fn tiny() -> BiGru {
        let cfg = RnnConfig { d_emb: 4, hidden: 5, max_in_len: 4, max_out_len: 6, grid_vocab: 9, seg_vocab: 10 };
        BiGru::new(cfg, 1).unwrap()
    }

    #[test]
    fn encoder_shapes_and_padding() {
        let m = tiny();
        let mut tape = Tape::new();
        let (h, s0) = m.bigru_encode(&mut tape, &[5]).unwrap();
        assert_eq!(tape.value(h).shape(), &[1, 10]);
        assert_eq!(tape.value(s0).shape(), &[1, 5]);
        let (hp, _) = m.bigru_encode(&mut tape, &[5, 6, PAD, PAD]).unwrap();
        let (hu, _) = m.bigru_encode(&mut tape, &[5, 6]).unwrap();
        assert_eq!(&tape.value(hp).data()[..20], tape.value(hu).data());
        assert!(tape.value(hp).data()[20..].iter().all(|&v| v == 0.0));
        assert!(m.bigru_encode(&mut tape, &[5; 5]).is_err());
    }

    #[test]
    fn attention_is_a_distribution_without_pad_mass() {
        let m = tiny();
        let w = m.attention_maps(&[4, 7, 5, PAD], &[1, 4, 6]).unwrap();
        for r in 0..3 {
            let row = w.row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v >= 0.0));
            assert_eq!(row[3], 0.0);
        }
        let single = m.attention_maps(&[4], &[1]).unwrap();
        assert_eq!(single.data(), &[1.0]);
    }

    #[test]
    fn cached_decoding_matches_teacher_forcing() {
        let m = tiny();
        let input = [4, 7, 5];
        let framed = [1, 6, 8, 2];
        let mut tape = Tape::new();
        let (states, mut s) = m.bigru_encode(&mut tape, &input).unwrap();
        let mask = tape.constant(BiGru::pad_mask(&input));
        let mut dec = m.start_decoding(&input).unwrap();
        for t in 0..3 {
            let step = m.luong_step(&mut tape, framed[t], s, states, mask).unwrap();
            s = step.state;
            let want = log_softmax(tape.value(step.logits).row(0));
            let got = dec.next_log_probs(&framed[..=t]).unwrap();
            for (a, b) in want.iter().zip(&got) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
