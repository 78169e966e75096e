//! Transformer encoder-decoder from grid-cell tokens to segment tokens.
//!
//! Post-norm residual blocks, sinusoidal positions added to unscaled
//! embeddings, PAD keys masked in every attention, causal decoder
//! self-attention.

use crate::error::{Error, Result};
use crate::model::{count_correct, log_softmax, ModelKind, RowLoss, Seq2Seq, StepDecoder};
use crate::numerics::{Checkpoint, ParamId, ParamStore, Tape, Tensor, Var, MASK_NEG};
use crate::prep::{TokenId, PAD};
use crate::rng::{rng_for, Rng};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerConfig {
    pub d_emb: usize,
    pub d_ff: usize,
    pub n_blocks: usize,
    pub heads: usize,
    pub max_in_len: usize,
    /// Content tokens; the decoder sees at most one more (BOS).
    pub max_out_len: usize,
    pub grid_vocab: usize,
    pub seg_vocab: usize,
    pub dropout: f64,
}

impl TransformerConfig {
    pub fn desk(grid_vocab: usize, seg_vocab: usize) -> Self {
        TransformerConfig {
            d_emb: 64,
            d_ff: 256,
            n_blocks: 2,
            heads: 4,
            max_in_len: 20,
            max_out_len: 100,
            grid_vocab,
            seg_vocab,
            dropout: 0.0,
        }
    }

    /// Reference sizes of the full-scale model.
    pub fn full_scale(grid_vocab: usize, seg_vocab: usize) -> Self {
        TransformerConfig { d_emb: 512, d_ff: 2048, n_blocks: 8, heads: 16, ..Self::desk(grid_vocab, seg_vocab) }
    }

    pub fn d_k(&self) -> usize {
        self.d_emb / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_emb % self.heads != 0 {
            return Err(Error::invalid(format!("d_emb {} not divisible by {} heads", self.d_emb, self.heads)));
        }
        if self.d_emb % 2 != 0 {
            return Err(Error::invalid(format!("d_emb {} must be even", self.d_emb)));
        }
        if self.d_ff == 0 || self.n_blocks == 0 || self.max_in_len == 0 || self.max_out_len == 0 {
            return Err(Error::invalid("transformer sizes must be positive"));
        }
        if self.grid_vocab == 0 || self.seg_vocab == 0 {
            return Err(Error::invalid("vocabulary sizes must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn to_hyper(&self) -> Vec<(String, String)> {
        [
            ("d_emb", self.d_emb.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("n_blocks", self.n_blocks.to_string()),
            ("heads", self.heads.to_string()),
            ("max_in_len", self.max_in_len.to_string()),
            ("max_out_len", self.max_out_len.to_string()),
            ("grid_vocab", self.grid_vocab.to_string()),
            ("seg_vocab", self.seg_vocab.to_string()),
            ("dropout", self.dropout.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(TransformerConfig {
            d_emb: ck.hyper_parse("d_emb")?,
            d_ff: ck.hyper_parse("d_ff")?,
            n_blocks: ck.hyper_parse("n_blocks")?,
            heads: ck.hyper_parse("heads")?,
            max_in_len: ck.hyper_parse("max_in_len")?,
            max_out_len: ck.hyper_parse("max_out_len")?,
            grid_vocab: ck.hyper_parse("grid_vocab")?,
            seg_vocab: ck.hyper_parse("seg_vocab")?,
            dropout: ck.hyper_parse("dropout")?,
        })
    }
}

/// Sinusoidal table: even columns sin(pos / 10000^(2i/d)), odd columns the
/// cosine of the same angle.
pub fn positional_encoding(max_len: usize, d_emb: usize) -> Result<Tensor> {
    if d_emb % 2 != 0 {
        return Err(Error::invalid(format!("positional encoding needs an even width, got {d_emb}")));
    }
    let mut data = vec![0.0; max_len * d_emb];
    for pos in 0..max_len {
        for i in 0..d_emb / 2 {
            let angle = pos as f64 / 10000f64.powf((2 * i) as f64 / d_emb as f64);
            data[pos * d_emb + 2 * i] = angle.sin();
            data[pos * d_emb + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(&[max_len, d_emb], data)
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub heads: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct EncoderBlock {
    attn: AttentionParams,
    ln1: Norm,
    ffn: FeedForward,
    ln2: Norm,
}

#[derive(Debug, Clone, Copy)]
struct DecoderBlock {
    self_attn: AttentionParams,
    ln1: Norm,
    cross_attn: AttentionParams,
    ln2: Norm,
    ffn: FeedForward,
    ln3: Norm,
}

/// Forward-pass context: the tape plus optional attention recording and
/// dropout randomness.
pub struct Pass<'p, 'r> {
    pub tape: Tape<'p>,
    pub record: Option<&'r mut Vec<Tensor>>,
    pub dropout: Option<(f64, &'r mut Rng)>,
}

impl<'p, 'r> Pass<'p, 'r> {
    pub fn new() -> Self {
        Pass { tape: Tape::new(), record: None, dropout: None }
    }
}

impl Default for Pass<'_, '_> {
    fn default() -> Self {
        Self::new()
    }
}

fn linear<'p>(tape: &mut Tape<'p>, store: &'p ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let wv = tape.param(store, w);
    let bv = tape.param(store, b);
    let y = tape.matmul(x, wv)?;
    tape.add_row(y, bv)
}

fn dropout<'p>(pass: &mut Pass<'p, '_>, x: Var) -> Result<Var> {
    let Some((p, rng)) = pass.dropout.as_mut() else { return Ok(x) };
    use rand::Rng as _;
    let keep = 1.0 - *p;
    let shape = pass.tape.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let mask: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
    let m = pass.tape.constant(Tensor::new(&shape, mask)?);
    pass.tape.mul(x, m)
}

/// Scaled dot-product attention over `heads` linear projections of the
/// inputs, concatenated and projected back. `mask` is an additive
/// [len_q, len_k] constant (0 or a large negative value).
pub fn multi_head_attention<'p>(
    pass: &mut Pass<'p, '_>,
    store: &'p ParamStore,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    mask: Option<Var>,
    p: &AttentionParams,
) -> Result<Var> {
    let tape = &mut pass.tape;
    let (len_q, d) = tape.value(q_in).dims2()?;
    let (len_k, dk_in) = tape.value(k_in).dims2()?;
    if tape.value(v_in).dims2()?.0 != len_k || dk_in != d {
        return Err(Error::Shape(format!(
            "attention inputs {:?} / {:?} / {:?}",
            tape.value(q_in).shape(),
            tape.value(k_in).shape(),
            tape.value(v_in).shape()
        )));
    }
    if let Some(m) = mask {
        if tape.value(m).shape() != [len_q, len_k] {
            return Err(Error::Shape(format!("attention mask {:?} for [{len_q}, {len_k}]", tape.value(m).shape())));
        }
    }
    let q = linear(tape, store, q_in, p.wq, p.bq)?;
    let k = linear(tape, store, k_in, p.wk, p.bk)?;
    let v = linear(tape, store, v_in, p.wv, p.bv)?;
    let dk = tape.value(q).dims2()?.1 / p.heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let tape = &mut pass.tape;
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(k, h * dk, dk)?;
        let vh = tape.slice_cols(v, h * dk, dk)?;
        let scores = tape.matmul_t(qh, kh)?;
        let mut scores = tape.scale(scores, scale);
        if let Some(m) = mask {
            scores = tape.add(scores, m)?;
        }
        let w = tape.softmax(scores, 1)?;
        if let Some(rec) = pass.record.as_mut() {
            rec.push(pass.tape.value(w).clone());
        }
        heads.push(pass.tape.matmul(w, vh)?);
    }
    let tape = &mut pass.tape;
    let cat = tape.concat_cols(&heads)?;
    linear(tape, store, cat, p.wo, p.bo)
}

/// Encoder output for one input sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderMemory {
    /// [in_len, d_emb]
    pub tensor: Tensor,
    /// True at PAD input positions.
    pub pad: Vec<bool>,
}

pub struct Transformer {
    config: TransformerConfig,
    store: ParamStore,
    enc_emb: ParamId,
    dec_emb: ParamId,
    encoder: Vec<EncoderBlock>,
    decoder: Vec<DecoderBlock>,
    out_w: ParamId,
    out_b: ParamId,
    pe: Tensor,
}

impl Transformer {
    /// Fresh model. Linear weights are uniform in +-1/sqrt(fan_in), biases
    /// and norm shifts zero, norm gains one, embeddings uniform in +-1.
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, "init-tfm", 0);
        let mut store = ParamStore::new();
        let d = config.d_emb;
        let enc_emb = store.add_uniform("enc.emb", &[config.grid_vocab, d], 1.0, &mut rng)?;
        let dec_emb = store.add_uniform("dec.emb", &[config.seg_vocab, d], 1.0, &mut rng)?;
        let mut encoder = Vec::new();
        for b in 0..config.n_blocks {
            let pre = format!("enc.block{b}");
            encoder.push(EncoderBlock {
                attn: attention_params(&mut store, &format!("{pre}.mha"), d, config.heads, &mut rng)?,
                ln1: norm_params(&mut store, &format!("{pre}.ln1"), d)?,
                ffn: ffn_params(&mut store, &format!("{pre}.ffn"), d, config.d_ff, &mut rng)?,
                ln2: norm_params(&mut store, &format!("{pre}.ln2"), d)?,
            });
        }
        let mut decoder = Vec::new();
        for b in 0..config.n_blocks {
            let pre = format!("dec.block{b}");
            decoder.push(DecoderBlock {
                self_attn: attention_params(&mut store, &format!("{pre}.self"), d, config.heads, &mut rng)?,
                ln1: norm_params(&mut store, &format!("{pre}.ln1"), d)?,
                cross_attn: attention_params(&mut store, &format!("{pre}.cross"), d, config.heads, &mut rng)?,
                ln2: norm_params(&mut store, &format!("{pre}.ln2"), d)?,
                ffn: ffn_params(&mut store, &format!("{pre}.ffn"), d, config.d_ff, &mut rng)?,
                ln3: norm_params(&mut store, &format!("{pre}.ln3"), d)?,
            });
        }
        let bound = 1.0 / (d as f64).sqrt();
        let out_w = store.add_uniform("out.w", &[d, config.seg_vocab], bound, &mut rng)?;
        let out_b = store.add_full("out.b", &[config.seg_vocab], 0.0)?;
        let pe = positional_encoding(config.max_in_len.max(config.max_out_len + 1), d)?;
        Ok(Transformer { config, store, enc_emb, dec_emb, encoder, decoder, out_w, out_b, pe })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn out_bias(&self) -> ParamId {
        self.out_b
    }

    pub fn out_weight(&self) -> ParamId {
        self.out_w
    }

    fn embed<'p>(&'p self, tape: &mut Tape<'p>, table: ParamId, tokens: &[TokenId]) -> Result<Var> {
        let t = tape.param(&self.store, table);
        let e = tape.embedding(t, tokens)?;
        let d = self.config.d_emb;
        let pe = Tensor::new(&[tokens.len(), d], self.pe.data()[..tokens.len() * d].to_vec())?;
        let pe = tape.constant(pe);
        tape.add(e, pe)
    }

    fn add_norm<'p>(&'p self, pass: &mut Pass<'p, '_>, x: Var, sub: Var, n: &Norm) -> Result<Var> {
        let sub = dropout(pass, sub)?;
        let tape = &mut pass.tape;
        let s = tape.add(x, sub)?;
        let g = tape.param(&self.store, n.gain);
        let b = tape.param(&self.store, n.bias);
        tape.layer_norm(s, g, b, LN_EPS)
    }

    fn feed_forward<'p>(&'p self, tape: &mut Tape<'p>, x: Var, f: &FeedForward) -> Result<Var> {
        let h = linear(tape, &self.store, x, f.w1, f.b1)?;
        let h = tape.relu(h);
        linear(tape, &self.store, h, f.w2, f.b2)
    }

    /// Encoder stack on a tape. PAD tokens are masked as attention keys.
    pub fn encode_on<'p>(&'p self, pass: &mut Pass<'p, '_>, input: &[TokenId]) -> Result<Var> {
        if input.is_empty() || input.len() > self.config.max_in_len {
            return Err(Error::invalid(format!(
                "input length {} outside 1..={}",
                input.len(),
                self.config.max_in_len
            )));
        }
        let mask = key_pad_mask(input.len(), input);
        let mask = pass.tape.constant(mask);
        let x = self.embed(&mut pass.tape, self.enc_emb, input)?;
        let mut x = dropout(pass, x)?;
        for blk in &self.encoder {
            let a = multi_head_attention(pass, &self.store, x, x, x, Some(mask), &blk.attn)?;
            x = self.add_norm(pass, x, a, &blk.ln1)?;
            let f = self.feed_forward(&mut pass.tape, x, &blk.ffn)?;
            x = self.add_norm(pass, x, f, &blk.ln2)?;
        }
        Ok(x)
    }

    pub fn encoder_forward(&self, input: &[TokenId]) -> Result<EncoderMemory> {
        let mut pass = Pass::new();
        let m = self.encode_on(&mut pass, input)?;
        Ok(EncoderMemory { tensor: pass.tape.value(m).clone(), pad: input.iter().map(|&t| t == PAD).collect() })
    }

    /// Decoder stack; returns logits [len, seg_vocab]. `target_in` starts
    /// with BOS.
    pub fn decode_on<'p>(
        &'p self,
        pass: &mut Pass<'p, '_>,
        target_in: &[TokenId],
        memory: Var,
        memory_pad: &[bool],
    ) -> Result<Var> {
        if target_in.is_empty() || target_in.len() > self.config.max_out_len + 1 {
            return Err(Error::invalid(format!(
                "decoder input length {} outside 1..={}",
                target_in.len(),
                self.config.max_out_len + 1
            )));
        }
        let len = target_in.len();
        let causal = causal_mask(len);
        let causal = pass.tape.constant(causal);
        let cross = pad_mask_from_flags(len, memory_pad);
        let cross = pass.tape.constant(cross);
        let y = self.embed(&mut pass.tape, self.dec_emb, target_in)?;
        let mut y = dropout(pass, y)?;
        for blk in &self.decoder {
            let a = multi_head_attention(pass, &self.store, y, y, y, Some(causal), &blk.self_attn)?;
            y = self.add_norm(pass, y, a, &blk.ln1)?;
            let c = multi_head_attention(pass, &self.store, y, memory, memory, Some(cross), &blk.cross_attn)?;
            y = self.add_norm(pass, y, c, &blk.ln2)?;
            let f = self.feed_forward(&mut pass.tape, y, &blk.ffn)?;
            y = self.add_norm(pass, y, f, &blk.ln3)?;
        }
        linear(&mut pass.tape, &self.store, y, self.out_w, self.out_b)
    }

    /// Logits for a decoder input given a precomputed memory.
    pub fn decoder_forward(&self, target_in: &[TokenId], memory: &EncoderMemory) -> Result<Tensor> {
        let mut pass = Pass::new();
        let m = pass.tape.constant(memory.tensor.clone());
        let logits = self.decode_on(&mut pass, target_in, m, &memory.pad)?;
        Ok(pass.tape.value(logits).clone())
    }

    /// Every attention weight matrix of one forward pass, in execution
    /// order (encoder blocks, then decoder self/cross per block; heads
    /// innermost).
    pub fn attention_maps(&self, input: &[TokenId], target_in: &[TokenId]) -> Result<Vec<Tensor>> {
        let mut maps = Vec::new();
        {
            let mut pass = Pass { tape: Tape::new(), record: Some(&mut maps), dropout: None };
            let m = self.encode_on(&mut pass, input)?;
            let pad: Vec<bool> = input.iter().map(|&t| t == PAD).collect();
            self.decode_on(&mut pass, target_in, m, &pad)?;
        }
        Ok(maps)
    }

    fn row_loss_pass<'p>(&'p self, pass: &mut Pass<'p, '_>, input: &[TokenId], framed: &[TokenId], scale: f64) -> Result<RowLoss> {
        if framed.len() < 2 {
            return Err(Error::invalid("framed target needs at least BOS and EOS"));
        }
        let memory = self.encode_on(pass, input)?;
        let pad: Vec<bool> = input.iter().map(|&t| t == PAD).collect();
        let logits = self.decode_on(pass, &framed[..framed.len() - 1], memory, &pad)?;
        let labels = &framed[1..];
        let (correct, counted) = count_correct(pass.tape.value(logits), labels);
        let loss = pass.tape.cross_entropy_scaled(logits, labels, PAD, scale)?;
        Ok(RowLoss { loss, correct, counted })
    }
}

fn attention_params(store: &mut ParamStore, pre: &str, d: usize, heads: usize, rng: &mut Rng) -> Result<AttentionParams> {
    let bound = 1.0 / (d as f64).sqrt();
    Ok(AttentionParams {
        wq: store.add_uniform(&format!("{pre}.wq"), &[d, d], bound, rng)?,
        bq: store.add_full(&format!("{pre}.bq"), &[d], 0.0)?,
        wk: store.add_uniform(&format!("{pre}.wk"), &[d, d], bound, rng)?,
        bk: store.add_full(&format!("{pre}.bk"), &[d], 0.0)?,
        wv: store.add_uniform(&format!("{pre}.wv"), &[d, d], bound, rng)?,
        bv: store.add_full(&format!("{pre}.bv"), &[d], 0.0)?,
        wo: store.add_uniform(&format!("{pre}.wo"), &[d, d], bound, rng)?,
        bo: store.add_full(&format!("{pre}.bo"), &[d], 0.0)?,
        heads,
    })
}

fn norm_params(store: &mut ParamStore, pre: &str, d: usize) -> Result<Norm> {
    Ok(Norm {
        gain: store.add_full(&format!("{pre}.gain"), &[d], 1.0)?,
        bias: store.add_full(&format!("{pre}.bias"), &[d], 0.0)?,
    })
}

fn ffn_params(store: &mut ParamStore, pre: &str, d: usize, d_ff: usize, rng: &mut Rng) -> Result<FeedForward> {
    Ok(FeedForward {
        w1: store.add_uniform(&format!("{pre}.w1"), &[d, d_ff], 1.0 / (d as f64).sqrt(), rng)?,
        b1: store.add_full(&format!("{pre}.b1"), &[d_ff], 0.0)?,
        w2: store.add_uniform(&format!("{pre}.w2"), &[d_ff, d], 1.0 / (d_ff as f64).sqrt(), rng)?,
        b2: store.add_full(&format!("{pre}.b2"), &[d], 0.0)?,
    })
}

/// [rows, keys] additive mask blocking PAD keys.
fn key_pad_mask(rows: usize, keys: &[TokenId]) -> Tensor {
    let flags: Vec<bool> = keys.iter().map(|&t| t == PAD).collect();
    pad_mask_from_flags(rows, &flags)
}

fn pad_mask_from_flags(rows: usize, pad: &[bool]) -> Tensor {
    let mut data = Vec::with_capacity(rows * pad.len());
    for _ in 0..rows {
        data.extend(pad.iter().map(|&p| if p { MASK_NEG } else { 0.0 }));
    }
    Tensor::new(&[rows, pad.len()], data).expect("sized")
}

/// Blocks attention from position i to every j > i.
pub fn causal_mask(len: usize) -> Tensor {
    let mut data = vec![0.0; len * len];
    for i in 0..len {
        for j in i + 1..len {
            data[i * len + j] = MASK_NEG;
        }
    }
    Tensor::new(&[len, len], data).expect("sized")
}

impl Seq2Seq for Transformer {
    fn kind(&self) -> ModelKind {
        ModelKind::Transformer
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
        let mut pass = Pass { tape: std::mem::take(tape), record: None, dropout: None };
        let out = self.row_loss_pass(&mut pass, input, framed, scale);
        *tape = pass.tape;
        out
    }

    fn row_loss_train<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        input: &[TokenId],
        framed: &[TokenId],
        scale: f64,
        rng: &mut Rng,
    ) -> Result<RowLoss> {
        let mut pass = Pass { tape: std::mem::take(tape), record: None, dropout: None };
        if self.config.dropout > 0.0 {
            pass.dropout = Some((self.config.dropout, rng));
        }
        let out = self.row_loss_pass(&mut pass, input, framed, scale);
        *tape = pass.tape;
        out
    }

    fn start_decoding<'s>(&'s self, input: &[TokenId]) -> Result<Box<dyn StepDecoder + 's>> {
        Ok(Box::new(TransformerStep { model: self, memory: self.encoder_forward(input)? }))
    }

    fn hyperparameters(&self) -> Vec<(String, String)> {
        self.config.to_hyper()
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != ModelKind::Transformer.tag() {
            return Err(Error::invalid(format!("checkpoint holds a {} model, expected TFM", ck.kind)));
        }
        let mut model = Transformer::new(TransformerConfig::from_checkpoint(ck)?, 0)?;
        crate::train::load_params(model.store_mut(), ck)?;
        Ok(model)
    }
}

struct TransformerStep<'m> {
    model: &'m Transformer,
    memory: EncoderMemory,
}

impl StepDecoder for TransformerStep<'_> {
    fn next_log_probs(&mut self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let logits = self.model.decoder_forward(prefix, &self.memory)?;
        Ok(log_softmax(logits.row(prefix.len() - 1)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Transformer {
        let cfg = TransformerConfig { d_emb: 8, d_ff: 16, n_blocks: 1, heads: 2, max_in_len: 6, max_out_len: 6, grid_vocab: 11, seg_vocab: 11, dropout: 0.0 };
        Transformer::new(cfg, 3).unwrap()
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding(5, 8).unwrap();
        for i in 0..4 {
            assert_eq!(pe.at(0, 2 * i), 0.0);
            assert_eq!(pe.at(0, 2 * i + 1), 1.0);
        }
        assert!((pe.at(1, 0) - 1f64.sin()).abs() < 1e-15);
        assert!((positional_encoding(3, 64).unwrap().at(1, 0) - 0.841_471).abs() < 1e-6);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(positional_encoding(4, 7).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = TransformerConfig::desk(10, 10);
        c.validate().unwrap();
        c.heads = 3;
        assert!(c.validate().is_err());
        let p = TransformerConfig::full_scale(10, 10);
        assert_eq!((p.d_emb, p.d_ff, p.n_blocks, p.heads, p.d_k()), (512, 2048, 8, 16, 32));
    }

    #[test]
    fn shapes_and_limits() {
        let m = tiny();
        let mem = m.encoder_forward(&[4, 5, 6]).unwrap();
        assert_eq!(mem.tensor.shape(), &[3, 8]);
        let logits = m.decoder_forward(&[1, 4, 5], &mem).unwrap();
        assert_eq!(logits.shape(), &[3, 11]);
        assert!(m.encoder_forward(&[4; 7]).is_err());
        assert!(m.decoder_forward(&[1; 8], &mem).is_err());
        assert_eq!(m.encoder_forward(&[4, 5, 6]).unwrap(), mem);
    }
}
