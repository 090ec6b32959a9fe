//! Experiment configuration. Unknown keys are rejected so that a config file
//! always describes the run it produced.

use std::path::{Path, PathBuf};

use fedpick::datasets::SyntheticConfig;
use fedpick::federation::{Ablations, Algorithm, RoundConfig};
use fedpick::losses::LossWeights;
use fedpick::model::PfsmConfig;
use fedpick::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub federation: FederationSection,
    pub hyper: HyperSection,
    pub ablations: AblationSection,
    pub model: ModelSection,
    pub dataset: DatasetSection,
    pub probe: ProbeSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            federation: FederationSection::default(),
            hyper: HyperSection::default(),
            ablations: AblationSection::default(),
            model: ModelSection::default(),
            dataset: DatasetSection::Synthetic(SyntheticSection::default()),
            probe: ProbeSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationSection {
    pub algorithm: String,
    #[serde(rename = "T")]
    pub rounds: usize,
    #[serde(rename = "E")]
    pub local_epochs: usize,
    #[serde(rename = "B")]
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl Default for FederationSection {
    fn default() -> Self {
        let r = RoundConfig::default();
        Self {
            algorithm: r.algorithm.name().to_string(),
            rounds: r.rounds,
            local_epochs: r.local_epochs,
            batch_size: r.batch_size,
            lr: r.lr,
            momentum: r.momentum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperSection {
    pub tau: f64,
    pub lambda_lce: f64,
    pub lambda_ent: f64,
    pub lambda_dis: f64,
    pub eps_mask: f64,
}

impl Default for HyperSection {
    fn default() -> Self {
        let w = LossWeights::OFFICE;
        let p = PfsmConfig::default();
        Self {
            tau: p.tau,
            lambda_lce: w.lambda_lce,
            lambda_ent: w.lambda_ent,
            lambda_dis: w.lambda_dis,
            eps_mask: p.eps_mask,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub soft_mask: bool,
    pub share_pfsm: bool,
    pub share_bn: bool,
    pub no_ensemble: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Widths of the hidden encoder layers.
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { hidden: vec![64], feature_dim: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum DatasetSection {
    Synthetic(SyntheticSection),
    Csv(CsvSection),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub n_clients: usize,
    pub n: usize,
    #[serde(rename = "C")]
    pub num_classes: usize,
    pub samples_per_client: usize,
    pub test_fraction: f64,
    pub nuisance_dims: usize,
    pub class_separation: f64,
    pub noise_sigma: f64,
    /// One distortion strength per client; defaults to 1.0 for every client.
    pub domain_magnitudes: Option<Vec<f64>>,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        let s = SyntheticConfig::default();
        Self {
            n_clients: s.n_clients,
            n: s.input_dim,
            num_classes: s.num_classes,
            samples_per_client: s.samples_per_client,
            test_fraction: s.test_fraction,
            nuisance_dims: s.nuisance_dims,
            class_separation: s.class_separation,
            noise_sigma: s.noise_sigma,
            domain_magnitudes: None,
        }
    }
}

impl SyntheticSection {
    pub fn to_core(&self) -> SyntheticConfig {
        SyntheticConfig {
            n_clients: self.n_clients,
            input_dim: self.n,
            num_classes: self.num_classes,
            samples_per_client: self.samples_per_client,
            test_fraction: self.test_fraction,
            nuisance_dims: self.nuisance_dims,
            class_separation: self.class_separation,
            noise_sigma: self.noise_sigma,
            domain_magnitudes: self.domain_magnitudes.clone().unwrap_or_else(|| vec![1.0; self.n_clients]),
        }
    }
}

/// One train/test CSV pair per client; paths are relative to the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSection {
    #[serde(rename = "C")]
    pub num_classes: usize,
    pub train: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    /// Neighbours of the KNN classifier.
    pub k: usize,
    /// Directory holding `client_{i}.ckpt` files; pretrains when absent.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self { k: 10, checkpoint_dir: None }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and makes relative paths absolute, taking them
    /// relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = std::path::absolute(path.parent().unwrap_or(Path::new(".")))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DatasetSection::Csv(csv) = &mut cfg.dataset {
            csv.train.iter_mut().chain(csv.test.iter_mut()).for_each(resolve);
        }
        if let Some(dir) = &mut cfg.probe.checkpoint_dir {
            resolve(dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn algorithm(&self) -> Result<Algorithm> {
        self.federation
            .algorithm
            .parse()
            .map_err(|e: Error| Error::Config(format!("federation.algorithm: {}", strip_kind(&e))))
    }

    pub fn round_config(&self) -> Result<RoundConfig> {
        let a = &self.ablations;
        Ok(RoundConfig {
            rounds: self.federation.rounds,
            local_epochs: self.federation.local_epochs,
            batch_size: self.federation.batch_size,
            algorithm: self.algorithm()?,
            ablations: Ablations {
                soft_mask: a.soft_mask,
                share_pfsm: a.share_pfsm,
                share_bn: a.share_bn,
                no_ensemble: a.no_ensemble,
            },
            lr: self.federation.lr,
            momentum: self.federation.momentum,
            weights: LossWeights {
                lambda_lce: self.hyper.lambda_lce,
                lambda_ent: self.hyper.lambda_ent,
                lambda_dis: self.hyper.lambda_dis,
            },
        })
    }

    pub fn pfsm_config(&self) -> PfsmConfig {
        PfsmConfig { tau: self.hyper.tau, eps_mask: self.hyper.eps_mask, soft_mask: self.ablations.soft_mask }
    }

    /// Encoder output widths: the hidden layers followed by the feature layer.
    pub fn encoder_widths(&self) -> Vec<usize> {
        let mut w = self.model.hidden.clone();
        w.push(self.model.feature_dim);
        w
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.federation;
        let fail = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        let algorithm = self.algorithm()?;
        for (field, v) in [("federation.T", f.rounds), ("federation.E", f.local_epochs), ("federation.B", f.batch_size)]
        {
            if v == 0 {
                return fail(field, "must be >= 1".into());
            }
        }
        if !(f.lr >= 0.0 && f.lr.is_finite()) {
            return fail("federation.lr", format!("must be finite and >= 0, got {}", f.lr));
        }
        if !(0.0..1.0).contains(&f.momentum) {
            return fail("federation.momentum", format!("must lie in [0, 1), got {}", f.momentum));
        }
        let h = &self.hyper;
        if !(h.tau > 0.0 && h.tau.is_finite()) {
            return fail("hyper.tau", format!("must be positive, got {}", h.tau));
        }
        if !(h.eps_mask > 0.0 && h.eps_mask < 1.0) {
            return fail("hyper.eps_mask", format!("must lie in (0, 1), got {}", h.eps_mask));
        }
        for (field, v) in
            [("hyper.lambda_lce", h.lambda_lce), ("hyper.lambda_ent", h.lambda_ent), ("hyper.lambda_dis", h.lambda_dis)]
        {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(field, format!("must be finite and >= 0, got {v}"));
            }
        }
        let a = &self.ablations;
        if algorithm != Algorithm::FedPick && (a.soft_mask || a.share_pfsm || a.share_bn || a.no_ensemble) {
            return fail("ablations", format!("switches only apply to fedpick, not {algorithm}"));
        }
        if self.model.feature_dim == 0 || self.model.hidden.contains(&0) {
            return fail("model", "layer widths must be >= 1".into());
        }
        if self.probe.k == 0 {
            return fail("probe.k", "must be >= 1".into());
        }
        match &self.dataset {
            DatasetSection::Synthetic(s) => {
                if let Some(m) = &s.domain_magnitudes {
                    if m.len() != s.n_clients {
                        return fail(
                            "dataset.domain_magnitudes",
                            format!("{} values for n_clients = {}", m.len(), s.n_clients),
                        );
                    }
                }
                s.to_core().validate().map_err(|e| Error::Config(format!("dataset: {}", strip_kind(&e))))?;
            }
            DatasetSection::Csv(c) => {
                if c.train.is_empty() || c.train.len() != c.test.len() {
                    return fail("dataset.train", "need one train and one test file per client".into());
                }
                if c.num_classes < 2 {
                    return fail("dataset.C", "at least two classes are required".into());
                }
            }
        }
        Ok(())
    }
}

fn strip_kind(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
