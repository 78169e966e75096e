//! Reverse-mode gradients against central finite differences.

use mmseq::model::Seq2Seq;
use mmseq::numerics::{Tape, Var};
use mmseq::rng::rng_for;
use mmseq::rnn::{BiGru, RnnConfig};
use mmseq::train::{batch_gradients, Example};
use mmseq::transformer::{Transformer, TransformerConfig};
use mmseq::Tensor;
use rand::Rng as _;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// |a - n| / max(|a|, |n|), with an absolute floor so that gradients that
/// are zero up to rounding do not divide by zero.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_for(seed, "gradcheck", shape.iter().product::<usize>() as u64);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Checks d/dx of sum(w * f(x)) for every element of every input.
fn check_op(inputs: &[Tensor], f: impl Fn(&mut Tape<'static>, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor], want_grad: bool| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.variable(x.clone())).collect();
        let out = f(&mut tape, &vars);
        let w = random_tensor(tape.value(out).shape(), 99);
        let w = tape.constant(w);
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod);
        let value = tape.value(loss).item();
        if !want_grad {
            return (value, Vec::new());
        }
        let g = tape.backward(loss).unwrap();
        let grads = vars
            .iter()
            .zip(xs)
            .map(|(&v, x)| g.get(v).map_or(vec![0.0; x.len()], |s| s.to_vec()))
            .collect();
        (value, grads)
    };
    let (_, analytic) = eval(inputs, true);
    let mut worst: f64 = 0.0;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * H);
            worst = worst.max(rel_err(analytic[i][j], numeric));
        }
    }
    worst
}

#[test]
fn elementwise_and_matrix_ops() {
    let a = random_tensor(&[3, 4], 1);
    let b = random_tensor(&[4, 5], 2);
    let c = random_tensor(&[3, 4], 3);
    let row = random_tensor(&[4], 4);
    assert!(check_op(&[a.clone(), b.clone()], |t, v| t.matmul(v[0], v[1]).unwrap()) < TOL);
    assert!(check_op(&[a.clone(), c.clone()], |t, v| t.matmul_t(v[0], v[1]).unwrap()) < TOL);
    assert!(check_op(&[a.clone(), c.clone()], |t, v| t.add(v[0], v[1]).unwrap()) < TOL);
    assert!(check_op(&[a.clone(), c.clone()], |t, v| t.sub(v[0], v[1]).unwrap()) < TOL);
    assert!(check_op(&[a.clone(), c.clone()], |t, v| t.mul(v[0], v[1]).unwrap()) < TOL);
    assert!(check_op(&[a.clone(), row.clone()], |t, v| t.add_row(v[0], v[1]).unwrap()) < TOL);
    assert!(check_op(&[a.clone()], |t, v| t.affine(v[0], -1.5, 0.25)) < TOL);
    assert!(check_op(&[a.clone()], |t, v| t.scale(v[0], 0.3)) < TOL);
    assert!(check_op(&[a.clone()], |t, v| t.sigmoid(v[0])) < TOL);
    assert!(check_op(&[a.clone()], |t, v| t.tanh(v[0])) < TOL);
    assert!(check_op(&[a.clone()], |t, v| t.relu(v[0])) < TOL);
    assert!(check_op(&[a.clone()], |t, v| t.sum(v[0])) < TOL);
}

#[test]
fn softmax_norm_and_reshaping_ops() {
    let a = random_tensor(&[3, 6], 5);
    let gain = random_tensor(&[6], 6);
    let bias = random_tensor(&[6], 7);
    let b = random_tensor(&[2, 6], 8);
    assert!(check_op(&[a.clone()], |t, v| t.softmax(v[0], 1).unwrap()) < TOL);
    assert!(check_op(&[a.clone()], |t, v| t.softmax(v[0], 0).unwrap()) < TOL);
    assert!(check_op(&[a.clone(), gain, bias], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()) < TOL);
    assert!(check_op(&[a.clone()], |t, v| t.slice_cols(v[0], 2, 3).unwrap()) < TOL);
    assert!(check_op(&[a.clone()], |t, v| t.slice_rows(v[0], 1, 2).unwrap()) < TOL);
    assert!(check_op(&[a.clone(), b.clone()], |t, v| t.concat_rows(&[v[0], v[1]]).unwrap()) < TOL);
    assert!(check_op(&[a.clone(), a.clone()], |t, v| t.concat_cols(&[v[0], v[1]]).unwrap()) < TOL);
    assert!(check_op(&[a.clone()], |t, v| t.embedding(v[0], &[2, 0, 2, 1]).unwrap()) < TOL);
    let targets = [4u32, 0, 5];
    assert!(check_op(&[a.clone()], |t, v| t.cross_entropy(v[0], &targets, 0).unwrap()) < TOL);
    assert!(check_op(&[a], |t, v| t.cross_entropy_scaled(v[0], &targets, 99, 0.7).unwrap()) < TOL);
}

fn examples() -> Vec<Example> {
    vec![
        Example { input: vec![4, 5, 6, 7], target: vec![8, 9, 10] },
        Example { input: vec![10, 4], target: vec![5, 5, 6, 7, 8] },
        Example { input: vec![3, 9, 6, 0], target: vec![4] },
    ]
}

/// Mean training loss exactly as the trainer defines it, recomputed from
/// scratch with a fresh dropout stream for every evaluation.
fn batch_loss<M: Seq2Seq>(model: &M, batch: &[Example]) -> f64 {
    let total: usize = batch.iter().map(|e| e.target.len() + 1).sum();
    let scale = 1.0 / total as f64;
    let mut rng = rng_for(0, "dropout", 0);
    batch
        .iter()
        .map(|ex| {
            let mut tape = Tape::new();
            let r = model.row_loss_train(&mut tape, &ex.input, &ex.framed_target(), scale, &mut rng).unwrap();
            tape.value(r.loss).item()
        })
        .sum()
}

/// Worst relative error over every element of every parameter.
fn check_model<M: Seq2Seq>(model: &mut M) -> (f64, usize) {
    let batch = examples();
    let refs: Vec<&Example> = batch.iter().collect();
    let (analytic, _) = batch_gradients(model, &refs, 0).unwrap();
    let names: Vec<String> = model.store().iter().map(|p| p.name.clone()).collect();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (slot, name) in names.iter().enumerate() {
        let id = model.store().id(name).unwrap();
        let n = model.store().get(id).value.len();
        for j in 0..n {
            let orig = model.store().get(id).value.data()[j];
            model.store_mut().get_mut(id).value.data_mut()[j] = orig + H;
            let up = batch_loss(model, &batch);
            model.store_mut().get_mut(id).value.data_mut()[j] = orig - H;
            let down = batch_loss(model, &batch);
            model.store_mut().get_mut(id).value.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * H);
            let a = analytic[slot].get(j).copied().unwrap_or(0.0);
            let e = rel_err(a, numeric);
            assert!(e < TOL, "{name}[{j}]: analytic {a} numeric {numeric}");
            worst = worst.max(e);
            checked += 1;
        }
    }
    (worst, checked)
}

/// Zero-initialized biases and unit gains would make some gradients
/// degenerate; shift every parameter off its initial value.
fn jitter(store: &mut mmseq::ParamStore, seed: u64) {
    let mut rng = rng_for(seed, "jitter", 0);
    for p in store.iter_mut() {
        for x in p.value.data_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
}

fn tiny_transformer(dropout: f64) -> Transformer {
    let cfg = TransformerConfig {
        d_emb: 8,
        d_ff: 16,
        n_blocks: 1,
        heads: 2,
        max_in_len: 6,
        max_out_len: 6,
        grid_vocab: 11,
        seg_vocab: 11,
        dropout,
    };
    let mut m = Transformer::new(cfg, 5).unwrap();
    jitter(m.store_mut(), 5);
    m
}

#[test]
fn transformer_parameters() {
    let (worst, n) = check_model(&mut tiny_transformer(0.0));
    assert!(n > 1000);
    assert!(worst < TOL, "worst {worst}");
}

#[test]
fn transformer_parameters_with_dropout_masks() {
    let (worst, _) = check_model(&mut tiny_transformer(0.25));
    assert!(worst < TOL, "worst {worst}");
}

#[test]
fn gru_parameters() {
    let cfg = RnnConfig { d_emb: 6, hidden: 8, max_in_len: 4, max_out_len: 6, grid_vocab: 11, seg_vocab: 11 };
    let mut m = BiGru::new(cfg, 6).unwrap();
    jitter(m.store_mut(), 6);
    let (worst, n) = check_model(&mut m);
    assert!(n > 1000);
    assert!(worst < TOL, "worst {worst}");
}
