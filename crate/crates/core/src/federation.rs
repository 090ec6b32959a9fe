//! Round protocol: local updates, sample-weighted aggregation of the shared
//! parameter roles, broadcast and per-round evaluation. Baselines differ only
//! in which roles are shared and whether a selection module exists.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::analysis::{mask_selection_ratio, sparsity_ratio, SPARSITY_EPS};
use crate::autodiff::{Mode, SgdMomentum, Tape, Tensor};
use crate::datasets::{batches, ClientData, Dataset};
use crate::error::{config_err, Error, Result};
use crate::losses::{total_loss, LossWeights};
use crate::metrics::{MetricsLog, Split};
use crate::model::{argmax_rows, init_model, ClientModel, ModelDims, PfsmConfig, Role};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    FedPick,
    FedAvg,
    FedBn,
    FedPer,
    SingleSet,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] =
        [Algorithm::FedPick, Algorithm::FedAvg, Algorithm::FedBn, Algorithm::FedPer, Algorithm::SingleSet];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedPick => "fedpick",
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedBn => "fedbn",
            Algorithm::FedPer => "fedper",
            Algorithm::SingleSet => "singleset",
        }
    }

    pub fn uses_selection(self) -> bool {
        self == Algorithm::FedPick
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            config_err(format!("unknown algorithm `{s}` (expected one of fedpick, fedavg, fedbn, fedper, singleset)"))
        })
    }
}

/// Component switches used by the ablation study.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ablations {
    pub soft_mask: bool,
    pub share_pfsm: bool,
    pub share_bn: bool,
    pub no_ensemble: bool,
}

impl Ablations {
    pub fn any(&self) -> bool {
        self.soft_mask || self.share_pfsm || self.share_bn || self.no_ensemble
    }
}

/// Which parameter roles are averaged by the server and which stay on the client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionSpec {
    pub shared: BTreeSet<Role>,
    pub local: BTreeSet<Role>,
}

impl PartitionSpec {
    pub fn is_shared(&self, role: Role) -> bool {
        self.shared.contains(&role)
    }

    pub fn aggregates(&self) -> bool {
        !self.shared.is_empty()
    }
}

pub fn make_partition(algorithm: Algorithm, ablations: &Ablations) -> Result<PartitionSpec> {
    use Role::*;
    if algorithm != Algorithm::FedPick && ablations.any() {
        return Err(config_err(format!("ablation switches only apply to fedpick, not {algorithm}")));
    }
    let (mut shared, mut local): (Vec<Role>, Vec<Role>) = match algorithm {
        Algorithm::FedPick => (vec![EncoderWeights, ClassifierG], vec![EncoderBn, Pfsm]),
        Algorithm::FedAvg => (vec![EncoderWeights, EncoderBn, ClassifierG], vec![]),
        Algorithm::FedBn => (vec![EncoderWeights, ClassifierG], vec![EncoderBn]),
        Algorithm::FedPer => (vec![EncoderWeights, EncoderBn], vec![ClassifierG]),
        Algorithm::SingleSet => (vec![], vec![EncoderWeights, EncoderBn, ClassifierG]),
    };
    for (flag, role) in [(ablations.share_bn, EncoderBn), (ablations.share_pfsm, Pfsm)] {
        if flag {
            local.retain(|r| *r != role);
            shared.push(role);
        }
    }
    Ok(PartitionSpec { shared: shared.into_iter().collect(), local: local.into_iter().collect() })
}

/// Named tensors of the shared roles, in model order.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedSnapshot<S> {
    pub tensors: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> SharedSnapshot<S> {
    pub fn extract(model: &ClientModel<S>, partition: &PartitionSpec) -> Self {
        let tensors = model
            .entries()
            .into_iter()
            .filter(|e| partition.is_shared(e.role))
            .map(|e| (e.name, e.tensor.clone()))
            .collect();
        Self { tensors }
    }

    /// Overwrites the matching tensors of `model`.
    pub fn load_into(&self, model: &mut ClientModel<S>) -> Result<()> {
        let mut entries = model.entries_mut();
        for (name, t) in &self.tensors {
            let e = entries
                .iter_mut()
                .find(|e| &e.name == name)
                .ok_or_else(|| Error::Protocol(format!("model has no tensor `{name}`")))?;
            if e.tensor.shape() != t.shape() {
                return Err(Error::Protocol(format!(
                    "tensor `{name}` has shape {:?}, snapshot carries {:?}",
                    e.tensor.shape(),
                    t.shape()
                )));
            }
            e.tensor.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}

/// Sample-size weighted mean of client uploads: `sum_i M_i / sum_j M_j * p_i`.
pub fn aggregate<S: Scalar>(uploads: &[(usize, &SharedSnapshot<S>)]) -> Result<SharedSnapshot<S>> {
    let (_, first) = uploads.first().ok_or_else(|| Error::Protocol("no client uploads to aggregate".into()))?;
    let total: usize = uploads.iter().map(|(m, _)| *m).sum();
    if uploads.iter().any(|(m, _)| *m == 0) {
        return Err(Error::Protocol("every client must hold at least one sample".into()));
    }
    for (_, up) in uploads {
        let compatible = up.tensors.len() == first.tensors.len()
            && up.tensors.iter().zip(&first.tensors).all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape());
        if !compatible {
            return Err(Error::Protocol("client uploads are not shape-compatible".into()));
        }
    }
    let weights: Vec<S> = uploads.iter().map(|(m, _)| S::from_usize_lossy(*m) / S::from_usize_lossy(total)).collect();
    let tensors = first
        .tensors
        .iter()
        .enumerate()
        .map(|(idx, (name, t))| {
            let mut acc = vec![S::zero(); t.len()];
            for ((_, up), &w) in uploads.iter().zip(&weights) {
                for (a, &v) in acc.iter_mut().zip(up.tensors[idx].1.data()) {
                    *a += w * v;
                }
            }
            (name.clone(), Tensor::new(t.shape().to_vec(), acc).expect("shape preserved"))
        })
        .collect();
    Ok(SharedSnapshot { tensors })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub algorithm: Algorithm,
    pub ablations: Ablations,
    pub lr: f64,
    pub momentum: f64,
    pub weights: LossWeights,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            rounds: 50,
            local_epochs: 1,
            batch_size: 64,
            algorithm: Algorithm::FedPick,
            ablations: Ablations::default(),
            lr: 0.01,
            momentum: 0.5,
            weights: LossWeights::OFFICE,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.local_epochs == 0 || self.batch_size == 0 {
            return Err(config_err("T, E and B must all be >= 1"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(config_err(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        self.weights.validate()?;
        make_partition(self.algorithm, &self.ablations).map(|_| ())
    }

    pub fn ensemble(&self) -> bool {
        self.algorithm.uses_selection() && !self.ablations.no_ensemble
    }
}

pub struct ClientState<S> {
    pub id: usize,
    pub model: ClientModel<S>,
    pub train: Dataset<S>,
    pub test: Dataset<S>,
    pub optimizer: SgdMomentum<S>,
}

impl<S: Scalar> ClientState<S> {
    pub fn new(
        id: usize,
        model: ClientModel<S>,
        train: Dataset<S>,
        test: Dataset<S>,
        cfg: &RoundConfig,
    ) -> Result<Self> {
        for ds in [&train, &test] {
            if ds.input_dim() != model.input_dim() {
                return Err(config_err(format!(
                    "client {id}: data width {} != model input width {}",
                    ds.input_dim(),
                    model.input_dim()
                )));
            }
            if ds.num_classes > model.num_classes() {
                return Err(config_err(format!("client {id}: data has more classes than the model")));
            }
        }
        let optimizer = SgdMomentum::new(S::lit(cfg.lr), S::lit(cfg.momentum))?;
        Ok(Self { id, model, train, test, optimizer })
    }
}

/// Mean loss terms over the batches of a local update or an evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossValues {
    pub gce: f64,
    pub lce: f64,
    pub ent: f64,
    pub dis: f64,
    pub total: f64,
}

impl LossValues {
    fn add_scaled<S: Scalar>(&mut self, b: &crate::losses::LossBreakdown<S>, w: f64) {
        self.gce += w * b.gce.as_f64();
        self.lce += w * b.lce.as_f64();
        self.ent += w * b.ent.as_f64();
        self.dis += w * b.dis.as_f64();
        self.total += w * b.total.as_f64();
    }

    fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("loss_total", self.total),
            ("loss_gce", self.gce),
            ("loss_lce", self.lce),
            ("loss_ent", self.ent),
            ("loss_dis", self.dis),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct ClientUpdate<S> {
    pub upload: SharedSnapshot<S>,
    /// Mean loss of each local epoch.
    pub epoch_losses: Vec<LossValues>,
    pub steps: usize,
}

/// Splits shuffled indices into batches; a trailing single-sample batch is
/// merged into its predecessor since train-mode BN needs two rows.
fn local_batches<S: Scalar>(ds: &Dataset<S>, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    let mut out: Vec<Vec<usize>> = batches(ds, batch_size, rng)?.collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(tail);
    }
    Ok(out)
}

/// Loads the broadcast roles (if any), trains every parameter jointly for
/// `E` epochs and returns the shared roles for aggregation.
pub fn client_update<S: Scalar>(
    client: &mut ClientState<S>,
    broadcast: Option<&SharedSnapshot<S>>,
    partition: &PartitionSpec,
    cfg: &RoundConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ClientUpdate<S>> {
    if client.train.is_empty() {
        return Err(config_err(format!("client {} has no training data", client.id)));
    }
    if let Some(snapshot) = broadcast {
        snapshot.load_into(&mut client.model)?;
    }
    let mut epoch_losses = Vec::with_capacity(cfg.local_epochs);
    let mut steps = 0;
    for _ in 0..cfg.local_epochs {
        let mut acc = LossValues::default();
        let plan = local_batches(&client.train, cfg.batch_size, rng)?;
        let nb = plan.len() as f64;
        for idx in plan {
            let (x, y) = client.train.gather(&idx);
            let mut tape = Tape::new();
            let vars = client.model.bind(&mut tape);
            let xv = tape.constant(x);
            let out = client.model.forward(&mut tape, &vars, xv, Mode::Train, Some(&mut *rng as &mut dyn RngCore))?;
            let loss = total_loss(&mut tape, &out, &y, &cfg.weights)?;
            if !loss.total.is_finite() {
                return Err(Error::Training(format!("non-finite loss on client {}", client.id)));
            }
            tape.backward(loss.total_var)?;
            let grads: Vec<Vec<S>> = vars.trainable().into_iter().map(|v| tape.grad(v)).collect();
            client.optimizer.step(&mut client.model.trainable_mut(), &grads)?;
            acc.add_scaled(&loss, 1.0 / nb);
            steps += 1;
        }
        epoch_losses.push(acc);
    }
    Ok(ClientUpdate { upload: SharedSnapshot::extract(&client.model, partition), epoch_losses, steps })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub losses: LossValues,
    pub selection_ratio: Option<f64>,
}

/// Eval-mode accuracy and loss terms on `data`. Predictions use the
/// global/personalized ensemble unless disabled.
pub fn evaluate_on<S: Scalar>(model: &mut ClientModel<S>, data: &Dataset<S>, cfg: &RoundConfig) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(config_err("cannot evaluate on an empty split"));
    }
    let probs = model.predict_proba(&data.features, cfg.ensemble())?;
    let pred = argmax_rows(&probs);
    let accuracy = crate::analysis::accuracy(&pred, &data.labels);
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let xv = tape.constant(data.features.clone());
    let out = model.forward(&mut tape, &vars, xv, Mode::Eval, None)?;
    let loss = total_loss(&mut tape, &out, &data.labels, &cfg.weights)?;
    let mut losses = LossValues::default();
    losses.add_scaled(&loss, 1.0);
    let selection_ratio = if model.has_pfsm() { Some(mask_selection_ratio(model, data)?.as_f64()) } else { None };
    Ok(EvalReport { accuracy, losses, selection_ratio })
}

pub fn evaluate<S: Scalar>(client: &mut ClientState<S>, cfg: &RoundConfig) -> Result<EvalReport> {
    evaluate_on(&mut client.model, &client.test, cfg)
}

/// Mean sparsity ratio of the eval-mode universal features on `data`.
pub fn feature_sparsity<S: Scalar>(model: &mut ClientModel<S>, data: &Dataset<S>) -> Result<f64> {
    let inf = model.infer(&data.features)?;
    Ok(sparsity_ratio(&inf.z_g, S::lit(SPARSITY_EPS))?.as_f64())
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one client's stream in one round; independent of scheduling.
pub fn stream_seed(master_seed: u64, client_id: usize, round: usize) -> u64 {
    mix64(mix64(mix64(master_seed) ^ client_id as u64) ^ round as u64)
}

/// Architecture implied by an algorithm: only FedPick carries a selection module.
pub fn model_dims_for(
    algorithm: Algorithm,
    input_dim: usize,
    encoder_widths: &[usize],
    num_classes: usize,
    pfsm: PfsmConfig,
) -> ModelDims {
    ModelDims {
        input_dim,
        encoder_widths: encoder_widths.to_vec(),
        num_classes,
        batch_norm: true,
        pfsm: algorithm.uses_selection().then_some(pfsm),
    }
}

/// Builds one client per dataset with models seeded from `seed`.
pub fn build_clients<S: Scalar>(
    data: Vec<ClientData<S>>,
    dims: &ModelDims,
    cfg: &RoundConfig,
    seed: u64,
) -> Result<Vec<ClientState<S>>> {
    data.into_iter()
        .enumerate()
        .map(|(id, d)| {
            let model = init_model(dims, stream_seed(seed, id, usize::MAX))?;
            ClientState::new(id, model, d.train, d.test, cfg)
        })
        .collect()
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| config_err(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

fn context(err: Error, round: usize, client: usize) -> Error {
    match err {
        Error::Training(m) => Error::Training(format!("round {round}, client {client}: {m}")),
        other => other,
    }
}

/// Runs `T` rounds of local updates, aggregation, broadcast and evaluation.
/// Results depend only on `seed`, never on `workers`.
pub fn run_training<S: Scalar>(
    clients: &mut [ClientState<S>],
    cfg: &RoundConfig,
    seed: u64,
    workers: usize,
) -> Result<MetricsLog> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(config_err("at least one client is required"));
    }
    let partition = make_partition(cfg.algorithm, &cfg.ablations)?;
    let in_dim = clients[0].model.input_dim();
    if clients.iter().any(|c| c.model.input_dim() != in_dim || c.model.has_pfsm() != cfg.algorithm.uses_selection()) {
        return Err(config_err("client models are inconsistent with each other or with the algorithm"));
    }
    let sizes: Vec<usize> = clients.iter().map(|c| c.train.len()).collect();
    let mut broadcast = partition.aggregates().then(|| SharedSnapshot::extract(&clients[0].model, &partition));
    let mut log = MetricsLog::new();

    with_pool(workers, || -> Result<()> {
        for round in 1..=cfg.rounds {
            let updates: Vec<ClientUpdate<S>> = clients
                .par_iter_mut()
                .map(|c| {
                    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, c.id, round));
                    client_update(c, broadcast.as_ref(), &partition, cfg, &mut rng).map_err(|e| context(e, round, c.id))
                })
                .collect::<Result<_>>()?;
            for (c, up) in clients.iter().zip(&updates) {
                let mut mean = LossValues::default();
                for e in &up.epoch_losses {
                    mean.total += e.total / up.epoch_losses.len() as f64;
                    mean.gce += e.gce / up.epoch_losses.len() as f64;
                    mean.lce += e.lce / up.epoch_losses.len() as f64;
                    mean.ent += e.ent / up.epoch_losses.len() as f64;
                    mean.dis += e.dis / up.epoch_losses.len() as f64;
                }
                for (name, v) in mean.named() {
                    log.push(round, c.id, Split::Train, name, v)?;
                }
            }

            if partition.aggregates() {
                let pre: Vec<f64> =
                    clients.par_iter_mut().map(|c| feature_sparsity(&mut c.model, &c.test)).collect::<Result<_>>()?;
                let uploads: Vec<(usize, &SharedSnapshot<S>)> =
                    sizes.iter().copied().zip(updates.iter().map(|u| &u.upload)).collect();
                let merged = aggregate(&uploads)?;
                clients.par_iter_mut().try_for_each(|c| merged.load_into(&mut c.model))?;
                let post: Vec<f64> =
                    clients.par_iter_mut().map(|c| feature_sparsity(&mut c.model, &c.test)).collect::<Result<_>>()?;
                for (c, (a, b)) in clients.iter().zip(pre.iter().zip(&post)) {
                    log.push(round, c.id, Split::Test, "sparsity_pre_agg", *a)?;
                    log.push(round, c.id, Split::Test, "sparsity_post_agg", *b)?;
                }
                broadcast = Some(merged);
            }

            let reports: Vec<EvalReport> = clients
                .par_iter_mut()
                .map(|c| evaluate(c, cfg).map_err(|e| context(e, round, c.id)))
                .collect::<Result<_>>()?;
            for (c, r) in clients.iter().zip(&reports) {
                log.push(round, c.id, Split::Test, "accuracy", r.accuracy)?;
                for (name, v) in r.losses.named() {
                    log.push(round, c.id, Split::Test, name, v)?;
                }
                if let Some(s) = r.selection_ratio {
                    log.push(round, c.id, Split::Test, "selection_ratio", s)?;
                }
            }
            log::debug!(
                "round {round}: mean test accuracy {:.4}",
                reports.iter().map(|r| r.accuracy).sum::<f64>() / reports.len() as f64
            );
        }
        Ok(())
    })??;
    Ok(log)
}
