// Independent loop-based forward of the training objective, used as a
// finite-difference oracle for the tape. It reads parameters straight from
// the model structs and shares no code with the tape ops.

use fedpick::autodiff::{Mode, Tape, Tensor};
use fedpick::losses::{total_loss, LossWeights};
use fedpick::model::{ClientModel, Linear};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor<f64>) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn linear(x: &Mat, l: &Linear<f64>) -> Mat {
    let (din, dout) = (l.weight.shape()[0], l.weight.shape()[1]);
    let w = l.weight.data();
    let b = l.bias.data();
    x.iter()
        .map(|row| (0..dout).map(|j| b[j] + (0..din).map(|k| row[k] * w[k * dout + j]).sum::<f64>()).collect())
        .collect()
}

fn batch_norm(x: &Mat, gamma: &[f64], beta: &[f64], eps: f64) -> Mat {
    let m = x.len() as f64;
    let d = x[0].len();
    let mut out = x.clone();
    for j in 0..d {
        let mean = x.iter().map(|r| r[j]).sum::<f64>() / m;
        let var = x.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / m;
        for (o, r) in out.iter_mut().zip(x) {
            o[j] = gamma[j] * (r[j] - mean) / (var + eps).sqrt() + beta[j];
        }
    }
    out
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn ce(logits: &Mat, labels: &[usize]) -> f64 {
    logits.iter().zip(labels).map(|(r, &y)| -log_softmax(r)[y]).sum::<f64>() / logits.len() as f64
}

fn neg_entropy(logits: &Mat) -> f64 {
    logits.iter().map(|r| log_softmax(r).iter().map(|l| l.exp() * l).sum::<f64>()).sum::<f64>() / logits.len() as f64
}

fn sym_kl(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| {
            let (la, lb) = (log_softmax(ra), log_softmax(rb));
            la.iter().zip(&lb).map(|(x, y)| (x.exp() - y.exp()) * (x - y)).sum::<f64>()
        })
        .sum::<f64>()
        / a.len() as f64
}

/// Per-element quantities held fixed while parameters are perturbed:
/// the Gumbel difference and `hard - soft` of the unperturbed pass.
pub struct Frozen {
    pub noise: Mat,
    pub offset: Mat,
}

/// Total training loss in train mode (batch statistics), with the hard mask
/// expressed as `soft + offset` so that its derivative is the soft one.
pub fn reference_loss(
    model: &ClientModel<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    w: &LossWeights,
    frozen: &Frozen,
) -> f64 {
    let mut h = to_mat(x);
    let n_layers = model.encoder.layers.len();
    for (i, layer) in model.encoder.layers.iter().enumerate() {
        h = linear(&h, &layer.linear);
        if let Some(bn) = &layer.bn {
            h = batch_norm(&h, bn.gamma.data(), bn.beta.data(), bn.eps);
        }
        if i + 1 < n_layers {
            h.iter_mut().flatten().for_each(|v| *v = v.max(0.0));
        }
    }
    let z = h;
    let lg = linear(&z, &model.head_global);
    let gce = ce(&lg, labels);
    let Some(p) = &model.pfsm else { return gce };
    let mut a = linear(&z, &p.gate.hidden);
    a.iter_mut().flatten().for_each(|v| *v = v.max(0.0));
    let logits = linear(&a, &p.gate.output);
    let mut zp = z.clone();
    let mut zu = z.clone();
    for i in 0..z.len() {
        for j in 0..z[0].len() {
            let soft = 1.0 / (1.0 + (-(logits[i][j] + frozen.noise[i][j]) / p.tau).exp());
            let m = if p.soft_mask { soft } else { soft + frozen.offset[i][j] };
            zp[i][j] = z[i][j] * m;
            zu[i][j] = z[i][j] * (1.0 - m);
        }
    }
    let lp = linear(&zp, &p.head_relevant);
    let lu = linear(&zu, &p.head_irrelevant);
    gce + w.lambda_lce * ce(&lp, labels) + w.lambda_ent * neg_entropy(&lu) + w.lambda_dis * sym_kl(&lp, &lg)
}

pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    pub loss_tape: f64,
    pub loss_reference: f64,
}

/// Compares tape gradients of the total loss with central differences of
/// [`reference_loss`] for every trainable scalar.
pub fn check_total_loss_gradient(
    model: &ClientModel<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    w: &LossWeights,
    noise_seed: u64,
    h: f64,
) -> GradCheck {
    let mut m = model.clone();
    let mut tape = Tape::new();
    let vars = m.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let out = m.forward(&mut tape, &vars, xv, Mode::Train, Some(&mut rng)).unwrap();
    let loss = total_loss(&mut tape, &out, labels, w).unwrap();
    tape.backward(loss.total_var).unwrap();
    let analytic: Vec<Vec<f64>> = vars.trainable().into_iter().map(|v| tape.grad(v)).collect();

    let (rows, cols) = (x.rows(), model.feature_dim());
    let frozen = match &out.selection {
        Some(sel) => {
            let soft = tape.value(sel.mask_soft);
            let hard = tape.value(sel.mask_hard);
            let noise = sel.noise.as_ref().expect("train mode samples noise");
            Frozen {
                noise: to_mat(noise),
                offset: (0..rows).map(|i| (0..cols).map(|j| hard.at(i, j) - soft.at(i, j)).collect()).collect(),
            }
        }
        None => Frozen { noise: vec![vec![0.0; cols]; rows], offset: vec![vec![0.0; cols]; rows] },
    };

    let mut probe = model.clone();
    let loss_reference = reference_loss(&probe, x, labels, w, &frozen);
    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0;
    for (p_idx, grads) in analytic.iter().enumerate() {
        for (e_idx, &a) in grads.iter().enumerate() {
            let orig = probe.trainable_mut()[p_idx].data()[e_idx];
            probe.trainable_mut()[p_idx].data_mut()[e_idx] = orig + h;
            let up = reference_loss(&probe, x, labels, w, &frozen);
            probe.trainable_mut()[p_idx].data_mut()[e_idx] = orig - h;
            let down = reference_loss(&probe, x, labels, w, &frozen);
            probe.trainable_mut()[p_idx].data_mut()[e_idx] = orig;
            let n = (up - down) / (2.0 * h);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            max_rel_err = max_rel_err.max(rel);
            checked += 1;
        }
    }
    GradCheck { max_rel_err, checked, loss_tape: loss.total, loss_reference }
}
