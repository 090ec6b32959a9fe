//! Client network: MLP encoder, global classifier and the personalized
//! feature-selection module (gate net, Gumbel-Sigmoid mask, two heads).

use rand::distr::{Distribution, Open01, Uniform};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BnState, Mode, Tape, Tensor, Var};
use crate::error::{config_err, Error, Result};
use crate::Scalar;

/// Parameter group used to decide what is shared with the server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    EncoderWeights,
    EncoderBn,
    ClassifierG,
    Pfsm,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::EncoderWeights, Role::EncoderBn, Role::ClassifierG, Role::Pfsm];

    pub fn name(self) -> &'static str {
        match self {
            Role::EncoderWeights => "encoder_weights",
            Role::EncoderBn => "encoder_bn",
            Role::ClassifierG => "classifier_g",
            Role::Pfsm => "pfsm",
        }
    }
}

/// A named model tensor together with its role and whether SGD updates it.
#[derive(Debug)]
pub struct Entry<T> {
    pub name: String,
    pub role: Role,
    pub trainable: bool,
    pub tensor: T,
}

fn entry<T>(name: String, role: Role, trainable: bool, tensor: T) -> Entry<T> {
    Entry { name, role, trainable, tensor }
}

/// Fully connected layer `x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl<S: Scalar> Linear<S> {
    /// Glorot-uniform weights, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
        let data = (0..fan_in * fan_out).map(|_| S::lit(dist.sample(rng))).collect();
        Self {
            weight: Tensor::new(vec![fan_in, fan_out], data).expect("consistent shape"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weight: Tensor::zeros(&[fan_in, fan_out]), bias: Tensor::zeros(&[fan_out]) }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> LinearVars {
        LinearVars { weight: tape.param(self.weight.clone()), bias: tape.param(self.bias.clone()) }
    }

    fn entries<'a>(&'a self, prefix: &str, role: Role, out: &mut Vec<Entry<&'a Tensor<S>>>) {
        out.push(entry(format!("{prefix}.weight"), role, true, &self.weight));
        out.push(entry(format!("{prefix}.bias"), role, true, &self.bias));
    }

    fn entries_mut<'a>(&'a mut self, prefix: &str, role: Role, out: &mut Vec<Entry<&'a mut Tensor<S>>>) {
        out.push(entry(format!("{prefix}.weight"), role, true, &mut self.weight));
        out.push(entry(format!("{prefix}.bias"), role, true, &mut self.bias));
    }
}

/// Raw logits of a linear classifier.
pub fn classify<S: Scalar>(tape: &mut Tape<S>, head: LinearVars, z: Var) -> Result<Var> {
    tape.affine(z, head.weight, head.bias)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<S> {
    pub linear: Linear<S>,
    /// `None` bypasses normalization.
    pub bn: Option<BnState<S>>,
}

#[derive(Debug, Clone)]
pub struct EncoderLayerVars {
    pub linear: LinearVars,
    pub bn: Option<(Var, Var)>,
}

/// Stack of affine -> BN -> ReLU layers; the last layer has no ReLU.
/// An empty stack is the identity map.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<S> {
    pub input_dim: usize,
    pub layers: Vec<EncoderLayer<S>>,
}

impl<S: Scalar> Encoder<S> {
    pub fn feature_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, |l| l.linear.out_dim())
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> Vec<EncoderLayerVars> {
        self.layers
            .iter()
            .map(|l| EncoderLayerVars {
                linear: l.linear.bind(tape),
                bn: l.bn.as_ref().map(|bn| (tape.param(bn.gamma.clone()), tape.param(bn.beta.clone()))),
            })
            .collect()
    }

    /// Maps `x: [B, n]` to universal features `z_g: [B, k]`.
    pub fn encode(&mut self, tape: &mut Tape<S>, vars: &[EncoderLayerVars], x: Var, mode: Mode) -> Result<Var> {
        if tape.value(x).cols() != self.input_dim {
            return Err(config_err(format!("encoder expects width {}, got {}", self.input_dim, tape.value(x).cols())));
        }
        let depth = self.layers.len();
        let mut h = x;
        for (i, (layer, lv)) in self.layers.iter_mut().zip(vars).enumerate() {
            h = tape.affine(h, lv.linear.weight, lv.linear.bias)?;
            if let (Some(bn), Some((gamma, beta))) = (layer.bn.as_mut(), lv.bn) {
                h = bn.forward(tape, h, gamma, beta, mode)?;
            }
            if i + 1 < depth {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    fn entries<'a>(&'a self, out: &mut Vec<Entry<&'a Tensor<S>>>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.linear.entries(&format!("encoder.{i}"), Role::EncoderWeights, out);
            if let Some(bn) = &layer.bn {
                out.push(entry(format!("encoder.{i}.bn.gamma"), Role::EncoderBn, true, &bn.gamma));
                out.push(entry(format!("encoder.{i}.bn.beta"), Role::EncoderBn, true, &bn.beta));
                out.push(entry(format!("encoder.{i}.bn.running_mean"), Role::EncoderBn, false, &bn.running_mean));
                out.push(entry(format!("encoder.{i}.bn.running_var"), Role::EncoderBn, false, &bn.running_var));
            }
        }
    }

    fn entries_mut<'a>(&'a mut self, out: &mut Vec<Entry<&'a mut Tensor<S>>>) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.linear.entries_mut(&format!("encoder.{i}"), Role::EncoderWeights, out);
            if let Some(bn) = &mut layer.bn {
                out.push(entry(format!("encoder.{i}.bn.gamma"), Role::EncoderBn, true, &mut bn.gamma));
                out.push(entry(format!("encoder.{i}.bn.beta"), Role::EncoderBn, true, &mut bn.beta));
                out.push(entry(format!("encoder.{i}.bn.running_mean"), Role::EncoderBn, false, &mut bn.running_mean));
                out.push(entry(format!("encoder.{i}.bn.running_var"), Role::EncoderBn, false, &mut bn.running_var));
            }
        }
    }
}

/// Linear(d, d/2) -> ReLU -> Linear(d/2, d): one mask logit per feature.
#[derive(Debug, Clone, PartialEq)]
pub struct GateNet<S> {
    pub hidden: Linear<S>,
    pub output: Linear<S>,
}

#[derive(Debug, Clone, Copy)]
pub struct GateVars {
    pub hidden: LinearVars,
    pub output: LinearVars,
}

impl<S: Scalar> GateNet<S> {
    pub fn init(d: usize, rng: &mut impl Rng) -> Self {
        let half = (d / 2).max(1);
        Self { hidden: Linear::init(d, half, rng), output: Linear::init(half, d, rng) }
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> GateVars {
        GateVars { hidden: self.hidden.bind(tape), output: self.output.bind(tape) }
    }

    pub fn logits(tape: &mut Tape<S>, vars: GateVars, z: Var) -> Result<Var> {
        let h = tape.affine(z, vars.hidden.weight, vars.hidden.bias)?;
        let h = tape.relu(h)?;
        tape.affine(h, vars.output.weight, vars.output.bias)
    }
}

/// Relaxed Bernoulli mask `sigmoid((z_l + G' - G'') / tau)`, with `G = -ln(-ln u)`,
/// `u ~ U(0, 1)` drawn per element in train mode. Eval mode draws no noise.
///
/// Returns the soft mask and the sampled noise difference `G' - G''`.
pub fn gumbel_sigmoid<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Var,
    tau: S,
    mode: Mode,
    rng: Option<&mut dyn RngCore>,
) -> Result<(Var, Option<Tensor<S>>)> {
    if !(tau > S::zero()) || !tau.is_finite() {
        return Err(config_err(format!("temperature must be positive, got {tau}")));
    }
    let shape = tape.value(logits).shape().to_vec();
    let noise = match mode {
        Mode::Train => {
            let rng = rng.ok_or_else(|| Error::Usage("train-mode Gumbel sampling needs an rng".into()))?;
            let n = tape.value(logits).len();
            let data = (0..n).map(|_| S::lit(gumbel(rng) - gumbel(rng))).collect();
            Some(Tensor::new(shape.clone(), data)?)
        }
        Mode::Eval => None,
    };
    let offset = match &noise {
        Some(t) => t.data().to_vec(),
        None => vec![S::zero(); tape.value(logits).len()],
    };
    let scaled = tape.shift_scale(logits, &offset, S::one() / tau)?;
    Ok((tape.sigmoid(scaled)?, noise))
}

fn gumbel(rng: &mut dyn RngCore) -> f64 {
    let u: f64 = Open01.sample(rng);
    -(-u.ln()).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PfsmConfig {
    pub tau: f64,
    pub eps_mask: f64,
    /// Re-weight with the soft mask instead of the thresholded one.
    pub soft_mask: bool,
}

impl Default for PfsmConfig {
    fn default() -> Self {
        Self { tau: 1.0, eps_mask: 0.5, soft_mask: false }
    }
}

/// Personalized feature-selection module.
#[derive(Debug, Clone, PartialEq)]
pub struct Pfsm<S> {
    pub gate: GateNet<S>,
    pub head_relevant: Linear<S>,
    pub head_irrelevant: Linear<S>,
    pub tau: S,
    pub eps_mask: S,
    pub soft_mask: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct PfsmVars {
    pub gate: GateVars,
    pub head_relevant: LinearVars,
    pub head_irrelevant: LinearVars,
}

/// Outputs of the selection module; all arrays are `[B, k]`.
#[derive(Debug, Clone)]
pub struct Selection<S> {
    pub z_relevant: Var,
    pub z_irrelevant: Var,
    pub mask_soft: Var,
    pub mask_hard: Var,
    /// `G' - G''` used in train mode.
    pub noise: Option<Tensor<S>>,
}

impl<S: Scalar> Pfsm<S> {
    pub fn bind(&self, tape: &mut Tape<S>) -> PfsmVars {
        PfsmVars {
            gate: self.gate.bind(tape),
            head_relevant: self.head_relevant.bind(tape),
            head_irrelevant: self.head_irrelevant.bind(tape),
        }
    }

    /// Splits `z_g` into complementary task-relevant and task-irrelevant parts.
    pub fn select(
        &self,
        tape: &mut Tape<S>,
        vars: &PfsmVars,
        z_g: Var,
        mode: Mode,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Selection<S>> {
        let d = self.gate.hidden.in_dim();
        if tape.value(z_g).cols() != d {
            return Err(config_err(format!("gate expects width {d}, got {}", tape.value(z_g).cols())));
        }
        let logits = GateNet::logits(tape, vars.gate, z_g)?;
        let (mask_soft, noise) = gumbel_sigmoid(tape, logits, self.tau, mode, rng)?;
        let mask_hard = tape.hard_threshold_ste(mask_soft, self.eps_mask)?;
        let mask = if self.soft_mask { mask_soft } else { mask_hard };
        let z_relevant = tape.hadamard(z_g, mask)?;
        let inverse = tape.complement(mask)?;
        let z_irrelevant = tape.hadamard(z_g, inverse)?;
        Ok(Selection { z_relevant, z_irrelevant, mask_soft, mask_hard, noise })
    }

    fn entries<'a>(&'a self, out: &mut Vec<Entry<&'a Tensor<S>>>) {
        self.gate.hidden.entries("pfsm.gate.hidden", Role::Pfsm, out);
        self.gate.output.entries("pfsm.gate.output", Role::Pfsm, out);
        self.head_relevant.entries("pfsm.head_relevant", Role::Pfsm, out);
        self.head_irrelevant.entries("pfsm.head_irrelevant", Role::Pfsm, out);
    }

    fn entries_mut<'a>(&'a mut self, out: &mut Vec<Entry<&'a mut Tensor<S>>>) {
        self.gate.hidden.entries_mut("pfsm.gate.hidden", Role::Pfsm, out);
        self.gate.output.entries_mut("pfsm.gate.output", Role::Pfsm, out);
        self.head_relevant.entries_mut("pfsm.head_relevant", Role::Pfsm, out);
        self.head_irrelevant.entries_mut("pfsm.head_irrelevant", Role::Pfsm, out);
    }
}

/// Softmax of the summed global and personalized logits.
pub fn ensemble_logits<S: Scalar>(tape: &mut Tape<S>, logits_g: Var, logits_p: Var) -> Result<Var> {
    let sum = tape.add(logits_g, logits_p)?;
    tape.softmax(sum)
}

/// Architecture of a client model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDims {
    pub input_dim: usize,
    /// Output width of every encoder layer; empty means identity encoder.
    pub encoder_widths: Vec<usize>,
    pub num_classes: usize,
    pub batch_norm: bool,
    /// `None` builds a plain encoder + classifier (baselines).
    pub pfsm: Option<PfsmConfig>,
}

impl ModelDims {
    pub fn feature_dim(&self) -> usize {
        self.encoder_widths.last().copied().unwrap_or(self.input_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 || self.encoder_widths.contains(&0) {
            return Err(config_err(format!("model dimensions must be positive: {self:?}")));
        }
        if let Some(p) = &self.pfsm {
            if !(p.tau > 0.0) || !p.tau.is_finite() {
                return Err(config_err(format!("tau must be positive, got {}", p.tau)));
            }
            if !(p.eps_mask > 0.0 && p.eps_mask < 1.0) {
                return Err(config_err(format!("eps_mask must lie in (0, 1), got {}", p.eps_mask)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientModel<S> {
    pub encoder: Encoder<S>,
    pub head_global: Linear<S>,
    pub pfsm: Option<Pfsm<S>>,
}

#[derive(Debug, Clone)]
pub struct ModelVars {
    pub encoder: Vec<EncoderLayerVars>,
    pub head_global: LinearVars,
    pub pfsm: Option<PfsmVars>,
}

impl ModelVars {
    /// Trainable leaves in [`ClientModel::entries`] order.
    pub fn trainable(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in &self.encoder {
            out.extend([l.linear.weight, l.linear.bias]);
            if let Some((g, b)) = l.bn {
                out.extend([g, b]);
            }
        }
        out.extend([self.head_global.weight, self.head_global.bias]);
        if let Some(p) = &self.pfsm {
            for lv in [p.gate.hidden, p.gate.output, p.head_relevant, p.head_irrelevant] {
                out.extend([lv.weight, lv.bias]);
            }
        }
        out
    }
}

/// Recorded forward pass. Selection fields are `None` for models without PFSM.
#[derive(Debug, Clone)]
pub struct ForwardOutput<S> {
    pub z_g: Var,
    pub logits_g: Var,
    pub selection: Option<Selection<S>>,
    pub logits_p: Option<Var>,
    pub logits_u: Option<Var>,
}

/// Plain arrays from an eval-mode pass.
#[derive(Debug, Clone)]
pub struct Inference<S> {
    pub z_g: Tensor<S>,
    pub logits_g: Tensor<S>,
    pub logits_p: Option<Tensor<S>>,
    pub mask_hard: Option<Tensor<S>>,
}

/// Builds a model with deterministic parameters for `seed`.
pub fn init_model<S: Scalar>(dims: &ModelDims, seed: u64) -> Result<ClientModel<S>> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(dims.encoder_widths.len());
    let mut fan_in = dims.input_dim;
    for &w in &dims.encoder_widths {
        layers.push(EncoderLayer {
            linear: Linear::init(fan_in, w, &mut rng),
            bn: dims.batch_norm.then(|| BnState::new(w)),
        });
        fan_in = w;
    }
    let k = dims.feature_dim();
    let head_global = Linear::init(k, dims.num_classes, &mut rng);
    let pfsm = dims.pfsm.as_ref().map(|p| Pfsm {
        gate: GateNet::init(k, &mut rng),
        head_relevant: Linear::init(k, dims.num_classes, &mut rng),
        head_irrelevant: Linear::init(k, dims.num_classes, &mut rng),
        tau: S::lit(p.tau),
        eps_mask: S::lit(p.eps_mask),
        soft_mask: p.soft_mask,
    });
    Ok(ClientModel { encoder: Encoder { input_dim: dims.input_dim, layers }, head_global, pfsm })
}

impl<S: Scalar> ClientModel<S> {
    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.feature_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.head_global.out_dim()
    }

    pub fn has_pfsm(&self) -> bool {
        self.pfsm.is_some()
    }

    /// Every tensor of the model, trainable parameters and BN buffers alike,
    /// in a fixed order.
    pub fn entries(&self) -> Vec<Entry<&Tensor<S>>> {
        let mut out = Vec::new();
        self.encoder.entries(&mut out);
        self.head_global.entries("head_global", Role::ClassifierG, &mut out);
        if let Some(p) = &self.pfsm {
            p.entries(&mut out);
        }
        out
    }

    pub fn entries_mut(&mut self) -> Vec<Entry<&mut Tensor<S>>> {
        let mut out = Vec::new();
        self.encoder.entries_mut(&mut out);
        self.head_global.entries_mut("head_global", Role::ClassifierG, &mut out);
        if let Some(p) = &mut self.pfsm {
            p.entries_mut(&mut out);
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.entries_mut().into_iter().filter(|e| e.trainable).map(|e| e.tensor).collect()
    }

    pub fn roles(&self) -> Vec<Role> {
        let mut roles: Vec<Role> = self.entries().iter().map(|e| e.role).collect();
        roles.sort();
        roles.dedup();
        roles
    }

    /// Registers every trainable parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape<S>) -> ModelVars {
        ModelVars {
            encoder: self.encoder.bind(tape),
            head_global: self.head_global.bind(tape),
            pfsm: self.pfsm.as_ref().map(|p| p.bind(tape)),
        }
    }

    /// Full forward pass: encoder, selection module and the three heads.
    /// Train mode updates BN running statistics and needs `rng` for mask noise.
    pub fn forward(
        &mut self,
        tape: &mut Tape<S>,
        vars: &ModelVars,
        x: Var,
        mode: Mode,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<ForwardOutput<S>> {
        let z_g = self.encoder.encode(tape, &vars.encoder, x, mode)?;
        let logits_g = classify(tape, vars.head_global, z_g)?;
        let (selection, logits_p, logits_u) = match (&self.pfsm, &vars.pfsm) {
            (Some(pfsm), Some(pv)) => {
                let sel = pfsm.select(tape, pv, z_g, mode, rng)?;
                let lp = classify(tape, pv.head_relevant, sel.z_relevant)?;
                let lu = classify(tape, pv.head_irrelevant, sel.z_irrelevant)?;
                (Some(sel), Some(lp), Some(lu))
            }
            _ => (None, None, None),
        };
        Ok(ForwardOutput { z_g, logits_g, selection, logits_p, logits_u })
    }

    /// Eval-mode pass over `x` without keeping the tape.
    pub fn infer(&mut self, x: &Tensor<S>) -> Result<Inference<S>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &vars, xv, Mode::Eval, None)?;
        Ok(Inference {
            z_g: tape.value(out.z_g).clone(),
            logits_g: tape.value(out.logits_g).clone(),
            logits_p: out.logits_p.map(|v| tape.value(v).clone()),
            mask_hard: out.selection.map(|s| tape.value(s.mask_hard).clone()),
        })
    }

    /// Class probabilities: the ensemble when a selection module exists and
    /// `ensemble` is set, otherwise softmax of the global head.
    pub fn predict_proba(&mut self, x: &Tensor<S>, ensemble: bool) -> Result<Tensor<S>> {
        let inf = self.infer(x)?;
        let mut tape = Tape::new();
        let lg = tape.constant(inf.logits_g);
        let probs = match (ensemble, inf.logits_p) {
            (true, Some(lp)) => {
                let lp = tape.constant(lp);
                ensemble_logits(&mut tape, lg, lp)?
            }
            _ => tape.softmax(lg)?,
        };
        Ok(tape.value(probs).clone())
    }

    /// Converts all tensors to another scalar type.
    pub fn cast<T: Scalar>(&self) -> ClientModel<T> {
        let lin = |l: &Linear<S>| Linear { weight: l.weight.cast(), bias: l.bias.cast() };
        ClientModel {
            encoder: Encoder {
                input_dim: self.encoder.input_dim,
                layers: self
                    .encoder
                    .layers
                    .iter()
                    .map(|l| EncoderLayer {
                        linear: lin(&l.linear),
                        bn: l.bn.as_ref().map(|bn| BnState {
                            gamma: bn.gamma.cast(),
                            beta: bn.beta.cast(),
                            running_mean: bn.running_mean.cast(),
                            running_var: bn.running_var.cast(),
                            momentum: T::lit(bn.momentum.as_f64()),
                            eps: T::lit(bn.eps.as_f64()),
                        }),
                    })
                    .collect(),
            },
            head_global: lin(&self.head_global),
            pfsm: self.pfsm.as_ref().map(|p| Pfsm {
                gate: GateNet { hidden: lin(&p.gate.hidden), output: lin(&p.gate.output) },
                head_relevant: lin(&p.head_relevant),
                head_irrelevant: lin(&p.head_irrelevant),
                tau: T::lit(p.tau.as_f64()),
                eps_mask: T::lit(p.eps_mask.as_f64()),
                soft_mask: p.soft_mask,
            }),
        }
    }
}

/// Index of the largest entry of each row (first one on ties).
pub fn argmax_rows<S: Scalar>(t: &Tensor<S>) -> Vec<usize> {
    (0..t.rows())
        .map(|i| {
            let row = t.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
