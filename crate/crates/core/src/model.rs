//! What the trainer and decoder need from a sequence-to-sequence model, plus
//! greedy and beam decoding written once for both architectures.

use crate::error::{Error, Result};
use crate::numerics::{Checkpoint, ParamStore, Tape, Var};
use crate::prep::{TokenId, BOS, EOS, N_SPECIAL, PAD};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Transformer,
    Gru,
}

impl ModelKind {
    /// Checkpoint tag.
    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::Transformer => "TFM",
            ModelKind::Gru => "GRU",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "TFM" => Ok(ModelKind::Transformer),
            "GRU" => Ok(ModelKind::Gru),
            other => Err(Error::invalid(format!("unknown model kind tag {other:?}"))),
        }
    }

    /// Short name used on the command line and in file names.
    pub fn cli_name(self) -> &'static str {
        match self {
            ModelKind::Transformer => "tfm",
            ModelKind::Gru => "gru",
        }
    }
}

/// Teacher-forced loss of one example, built on a tape.
pub struct RowLoss {
    pub loss: Var,
    /// Label positions where the argmax logit equals the label.
    pub correct: usize,
    pub counted: usize,
}

/// Per-input decoding state: returns next-token log-probabilities over the
/// output vocabulary given the tokens generated so far (BOS first).
pub trait StepDecoder {
    fn next_log_probs(&mut self, prefix: &[TokenId]) -> Result<Vec<f64>>;
}

pub trait Seq2Seq: Sized {
    fn kind(&self) -> ModelKind;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn max_in(&self) -> usize;
    /// Maximum number of content tokens in a target.
    fn max_out(&self) -> usize;
    fn out_vocab(&self) -> usize;

    /// Summed cross entropy over non-PAD labels of `framed` (BOS, tokens,
    /// EOS, PAD...), multiplied by `scale`.
    fn row_loss<'p>(&'p self, tape: &mut Tape<'p>, input: &[TokenId], framed: &[TokenId], scale: f64) -> Result<RowLoss>;

    /// Training-mode loss; models with dropout draw their masks from `rng`.
    fn row_loss_train<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        input: &[TokenId],
        framed: &[TokenId],
        scale: f64,
        rng: &mut Rng,
    ) -> Result<RowLoss> {
        let _ = rng;
        self.row_loss(tape, input, framed, scale)
    }

    fn start_decoding<'s>(&'s self, input: &[TokenId]) -> Result<Box<dyn StepDecoder + 's>>;

    fn hyperparameters(&self) -> Vec<(String, String)>;
    fn from_checkpoint(ck: &Checkpoint) -> Result<Self>;
}

/// Argmax accuracy bookkeeping for logits [len, V] against labels.
pub(crate) fn count_correct(logits: &crate::numerics::Tensor, labels: &[TokenId]) -> (usize, usize) {
    let mut correct = 0;
    let mut counted = 0;
    for (r, &t) in labels.iter().enumerate() {
        if t == PAD {
            continue;
        }
        counted += 1;
        if argmax(logits.row(r)) == t as usize {
            correct += 1;
        }
    }
    (correct, counted)
}

/// First index of the maximum.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Generated content tokens, BOS and EOS stripped.
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    /// Hit the length limit before emitting EOS.
    pub truncated: bool,
}

/// Token ids a decoder may emit: EOS and the non-special tokens.
fn emittable(t: usize) -> bool {
    t == EOS as usize || t >= N_SPECIAL
}

pub fn decode(dec: &mut dyn StepDecoder, mode: DecodeMode, max_len: usize) -> Result<Decoded> {
    match mode {
        DecodeMode::Greedy => greedy(dec, max_len),
        DecodeMode::Beam(0) => Err(Error::invalid("beam width must be at least 1")),
        DecodeMode::Beam(w) => beam(dec, w, max_len),
    }
}

fn greedy(dec: &mut dyn StepDecoder, max_len: usize) -> Result<Decoded> {
    let mut prefix = vec![BOS];
    let mut log_prob = 0.0;
    while prefix.len() <= max_len {
        let lp = dec.next_log_probs(&prefix)?;
        let mut best: Option<usize> = None;
        for t in (0..lp.len()).filter(|&t| emittable(t)) {
            if best.is_none_or(|b| lp[t] > lp[b]) {
                best = Some(t);
            }
        }
        let t = best.ok_or_else(|| Error::invalid("output vocabulary has no emittable token"))?;
        log_prob += lp[t];
        if t == EOS as usize {
            return Ok(Decoded { tokens: prefix[1..].to_vec(), log_prob, truncated: false });
        }
        prefix.push(t as TokenId);
    }
    Ok(Decoded { tokens: prefix[1..].to_vec(), log_prob, truncated: true })
}

#[derive(Clone)]
struct Hyp {
    tokens: Vec<TokenId>,
    log_prob: f64,
    finished: bool,
}

impl Hyp {
    /// Length-normalized score; EOS counts towards the length.
    fn score(&self) -> f64 {
        let len = self.tokens.len() - 1 + usize::from(self.finished);
        if len == 0 { 0.0 } else { self.log_prob / len as f64 }
    }
}

/// Higher score first, then lexicographically smaller token sequence.
fn rank(a: &Hyp, b: &Hyp) -> std::cmp::Ordering {
    b.score().total_cmp(&a.score()).then_with(|| a.tokens.cmp(&b.tokens)).then(b.finished.cmp(&a.finished))
}

fn beam(dec: &mut dyn StepDecoder, width: usize, max_len: usize) -> Result<Decoded> {
    let mut beams = vec![Hyp { tokens: vec![BOS], log_prob: 0.0, finished: false }];
    loop {
        if beams.iter().all(|h| h.finished) {
            break;
        }
        let mut pool: Vec<Hyp> = Vec::new();
        let mut expanded = false;
        for h in &beams {
            if h.finished {
                pool.push(h.clone());
                continue;
            }
            if h.tokens.len() > max_len {
                continue;
            }
            expanded = true;
            let lp = dec.next_log_probs(&h.tokens)?;
            for t in (0..lp.len()).filter(|&t| emittable(t)) {
                let mut tokens = h.tokens.clone();
                let finished = t == EOS as usize;
                if !finished {
                    tokens.push(t as TokenId);
                }
                pool.push(Hyp { tokens, log_prob: h.log_prob + lp[t], finished });
            }
        }
        if !expanded {
            break;
        }
        pool.sort_by(rank);
        pool.truncate(width);
        beams = pool;
    }
    // Hypotheses cut off at the length limit compete on score like the
    // finished ones, as in greedy decoding.
    let best = &beams[0];
    Ok(Decoded { tokens: best.tokens[1..].to_vec(), log_prob: best.log_prob, truncated: !best.finished })
}
