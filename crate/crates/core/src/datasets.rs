//! Labeled client datasets, a synthetic cross-domain generator, CSV I/O and
//! shuffled mini-batching.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::autodiff::Tensor;
use crate::error::{config_err, Error, Result};
use crate::Scalar;

/// Samples of one client: `features: [M, n]` and labels in `[0, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<S> {
    pub features: Tensor<S>,
    pub labels: Vec<usize>,
    pub domain_id: usize,
    pub num_classes: usize,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(features: Tensor<S>, labels: Vec<usize>, domain_id: usize, num_classes: usize) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::Data(format!("features must be 2-D, got {:?}", features.shape())));
        }
        if features.rows() != labels.len() {
            return Err(Error::Data(format!("{} feature rows but {} labels", features.rows(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {num_classes})")));
        }
        if !features.all_finite() {
            return Err(Error::Data("features contain non-finite values".into()));
        }
        Ok(Self { features, labels, domain_id, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    /// Features and labels of the given rows.
    pub fn gather(&self, idx: &[usize]) -> (Tensor<S>, Vec<usize>) {
        (self.features.select_rows(idx), idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Per-column mean of the features.
    pub fn feature_means(&self) -> Vec<f64> {
        let n = self.input_dim();
        let mut m = vec![0.0; n];
        for i in 0..self.len() {
            for (acc, v) in m.iter_mut().zip(self.features.row(i)) {
                *acc += v.as_f64();
            }
        }
        m.iter_mut().for_each(|v| *v /= self.len() as f64);
        m
    }
}

/// Affine distortion that turns shared class structure into one client's domain.
///
/// A latent sample `u` holds `n - nuisance_dims` label-dependent coordinates
/// followed by `nuisance_dims` label-independent ones; the observed input is
/// `mixing * (scale .* u) + shift`.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    /// Orthogonal `[n, n]` matrix, row-major.
    pub mixing: Vec<f64>,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
    /// Std of the within-class noise on the informative coordinates.
    pub noise_sigma: f64,
    pub nuisance_dims: usize,
    pub nuisance_mean: Vec<f64>,
    pub nuisance_std: f64,
}

impl DomainSpec {
    pub fn identity(n: usize, nuisance_dims: usize, noise_sigma: f64) -> Self {
        let mut mixing = vec![0.0; n * n];
        for i in 0..n {
            mixing[i * n + i] = 1.0;
        }
        Self {
            mixing,
            shift: vec![0.0; n],
            scale: vec![1.0; n],
            noise_sigma,
            nuisance_dims,
            nuisance_mean: vec![0.0; nuisance_dims],
            nuisance_std: 1.0,
        }
    }

    /// Random domain whose distortion strength grows with `magnitude`;
    /// `magnitude == 0` gives [`DomainSpec::identity`].
    pub fn random(n: usize, nuisance_dims: usize, noise_sigma: f64, magnitude: f64, rng: &mut impl Rng) -> Self {
        let mut spec = Self::identity(n, nuisance_dims, noise_sigma);
        if magnitude <= 0.0 {
            return spec;
        }
        let angle = Uniform::new(-std::f64::consts::PI, std::f64::consts::PI).expect("finite range");
        let unit = Uniform::new(-0.5, 0.5).expect("finite range");
        // Random Givens rotations composed into an orthogonal matrix.
        for _ in 0..2 * n {
            let p = rng.random_range(0..n);
            let q = rng.random_range(0..n);
            if p == q {
                continue;
            }
            let theta = magnitude * angle.sample(rng);
            let (s, c) = theta.sin_cos();
            for col in 0..n {
                let a = spec.mixing[p * n + col];
                let b = spec.mixing[q * n + col];
                spec.mixing[p * n + col] = c * a - s * b;
                spec.mixing[q * n + col] = s * a + c * b;
            }
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        let rotated = spec.mixing.clone();
        for (dst, &src) in perm.iter().enumerate() {
            spec.mixing[dst * n..(dst + 1) * n].copy_from_slice(&rotated[src * n..(src + 1) * n]);
        }
        for v in &mut spec.scale {
            *v = (magnitude * unit.sample(rng)).exp();
        }
        for v in &mut spec.shift {
            let z: f64 = StandardNormal.sample(rng);
            *v = magnitude * z;
        }
        for v in &mut spec.nuisance_mean {
            let z: f64 = StandardNormal.sample(rng);
            *v = magnitude * z;
        }
        spec.nuisance_std = (magnitude * unit.sample(rng)).exp();
        spec
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    fn apply(&self, latent: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let scaled: Vec<f64> = latent.iter().zip(&self.scale).map(|(u, s)| u * s).collect();
        (0..n)
            .map(|i| {
                let row = &self.mixing[i * n..(i + 1) * n];
                row.iter().zip(&scaled).map(|(a, b)| a * b).sum::<f64>() + self.shift[i]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_clients: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    pub samples_per_client: usize,
    pub test_fraction: f64,
    pub nuisance_dims: usize,
    /// Std of the shared class prototypes.
    pub class_separation: f64,
    pub noise_sigma: f64,
    /// One distortion strength per client; 0 yields the shared (IID) domain.
    pub domain_magnitudes: Vec<f64>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_clients: 4,
            input_dim: 20,
            num_classes: 10,
            samples_per_client: 1000,
            test_fraction: 0.5,
            nuisance_dims: 8,
            class_separation: 1.0,
            noise_sigma: 1.0,
            domain_magnitudes: vec![1.0; 4],
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(config_err("n_clients must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(config_err("at least two classes are required"));
        }
        if self.nuisance_dims >= self.input_dim {
            return Err(config_err(format!(
                "nuisance_dims ({}) must leave at least one informative dimension of n = {}",
                self.nuisance_dims, self.input_dim
            )));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(config_err(format!("test_fraction must lie in (0, 1), got {}", self.test_fraction)));
        }
        let test = self.test_count();
        if test < self.num_classes || self.samples_per_client - test < self.num_classes {
            return Err(config_err(format!(
                "samples_per_client = {} is too small for balanced {}-class splits",
                self.samples_per_client, self.num_classes
            )));
        }
        if self.domain_magnitudes.len() != self.n_clients {
            return Err(config_err(format!(
                "{} domain magnitudes for {} clients",
                self.domain_magnitudes.len(),
                self.n_clients
            )));
        }
        if self.domain_magnitudes.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(config_err("domain magnitudes must be finite and >= 0"));
        }
        if !(self.class_separation > 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(config_err("class_separation must be > 0 and noise_sigma >= 0"));
        }
        Ok(())
    }

    fn test_count(&self) -> usize {
        (self.samples_per_client as f64 * self.test_fraction).round() as usize
    }
}

/// Train/test data of one client plus the domain that produced it.
#[derive(Debug, Clone)]
pub struct ClientData<S> {
    pub train: Dataset<S>,
    pub test: Dataset<S>,
    pub domain: DomainSpec,
}

/// Generates one domain per client around shared class prototypes.
/// Both splits are class-balanced and drawn from the client's own domain.
pub fn gen_synthetic_domains<S: Scalar>(cfg: &SyntheticConfig, seed: u64) -> Result<Vec<ClientData<S>>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let informative = cfg.input_dim - cfg.nuisance_dims;
    let prototypes: Vec<Vec<f64>> = (0..cfg.num_classes)
        .map(|_| (0..informative).map(|_| cfg.class_separation * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let n_test = cfg.test_count();
    let n_train = cfg.samples_per_client - n_test;
    let mut out = Vec::with_capacity(cfg.n_clients);
    for (client, &magnitude) in cfg.domain_magnitudes.iter().enumerate() {
        let mut crng = ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(client as u64 + 1)));
        let domain = DomainSpec::random(cfg.input_dim, cfg.nuisance_dims, cfg.noise_sigma, magnitude, &mut crng);
        let mut split = |count: usize| -> Result<Dataset<S>> {
            let mut labels: Vec<usize> = (0..count).map(|i| i % cfg.num_classes).collect();
            labels.shuffle(&mut crng);
            let mut data = Vec::with_capacity(count * cfg.input_dim);
            for &y in &labels {
                let mut latent = Vec::with_capacity(cfg.input_dim);
                for &mu in &prototypes[y] {
                    let e: f64 = crng.sample(StandardNormal);
                    latent.push(mu + domain.noise_sigma * e);
                }
                for &m in &domain.nuisance_mean {
                    let e: f64 = crng.sample(StandardNormal);
                    latent.push(m + domain.nuisance_std * e);
                }
                data.extend(domain.apply(&latent).into_iter().map(S::lit));
            }
            Dataset::new(Tensor::new(vec![count, cfg.input_dim], data)?, labels, client, cfg.num_classes)
        };
        let train = split(n_train)?;
        let test = split(n_test)?;
        out.push(ClientData { train, test, domain });
    }
    Ok(out)
}

/// Reads `f0,...,f{n-1},label` CSV. `num_classes` defaults to `max label + 1`.
pub fn load_csv<S: Scalar>(path: &Path, domain_id: usize, num_classes: Option<usize>) -> Result<Dataset<S>> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text, domain_id, num_classes)
}

pub fn parse_csv<S: Scalar>(text: &str, domain_id: usize, num_classes: Option<usize>) -> Result<Dataset<S>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(Error::Parse { line: 1, message: "empty file".into() })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let label_col = cols
        .iter()
        .position(|c| *c == "label")
        .ok_or(Error::Parse { line: 1, message: "missing column `label`".into() })?;
    if label_col != cols.len() - 1 {
        return Err(Error::Parse { line: 1, message: "column `label` must be last".into() });
    }
    let n = cols.len() - 1;
    for (i, c) in cols[..n].iter().enumerate() {
        if *c != format!("f{i}") {
            return Err(Error::Parse { line: 1, message: format!("expected column `f{i}`, found `{c}`") });
        }
    }
    if n == 0 {
        return Err(Error::Parse { line: 1, message: "no feature columns".into() });
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != n + 1 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {} fields, found {}", n + 1, fields.len()),
            });
        }
        for f in &fields[..n] {
            let v: f64 =
                f.parse().map_err(|_| Error::Parse { line: line_no, message: format!("invalid number `{f}`") })?;
            data.push(S::lit(v));
        }
        let label: usize = fields[n]
            .parse()
            .map_err(|_| Error::Data(format!("line {line_no}: label `{}` is not a non-negative integer", fields[n])))?;
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::Parse { line: 2, message: "no data rows".into() });
    }
    let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    Dataset::new(Tensor::new(vec![labels.len(), n], data)?, labels, domain_id, classes)
}

pub fn to_csv<S: Scalar>(ds: &Dataset<S>) -> String {
    let n = ds.input_dim();
    let mut out = String::new();
    for i in 0..n {
        let _ = write!(out, "f{i},");
    }
    out.push_str("label\n");
    for (i, &y) in ds.labels.iter().enumerate() {
        for v in ds.features.row(i) {
            let _ = write!(out, "{},", v.as_f64());
        }
        let _ = writeln!(out, "{y}");
    }
    out
}

pub fn write_csv<S: Scalar>(ds: &Dataset<S>, path: &Path) -> Result<()> {
    std::fs::write(path, to_csv(ds))?;
    Ok(())
}

/// One epoch of shuffled index batches; the last batch may be short.
#[derive(Debug, Clone)]
pub struct BatchIter {
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl BatchIter {
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for BatchIter {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(batch)
    }
}

/// Shuffles the sample indices of `ds` with `rng` and cuts them into batches of `batch_size`.
pub fn batches<S: Scalar>(ds: &Dataset<S>, batch_size: usize, rng: &mut impl Rng) -> Result<BatchIter> {
    if batch_size == 0 {
        return Err(config_err("batch size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(rng);
    Ok(BatchIter { order, batch_size, pos: 0 })
}
