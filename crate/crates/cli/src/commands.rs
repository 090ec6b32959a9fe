//! The `run`, `probe` and `analyze` commands. Each writes its artifacts into a
//! directory and returns what it wrote for programmatic use.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use fedpick::analysis::{fisher_scores, important_feature_overlap, probe_model, probe_ratios, selection_frequencies};
use fedpick::checkpoint;
use fedpick::datasets::{gen_synthetic_domains, load_csv, ClientData};
use fedpick::federation::{build_clients, model_dims_for, run_training, ClientState, RoundConfig};
use fedpick::metrics::{MetricsLog, Split};
use fedpick::{Error, Result};
use serde::Serialize;

use crate::config::{Config, DatasetSection};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const PROBE_FILE: &str = "probe.csv";
pub const ANALYSIS_FILE: &str = "analysis.csv";

pub fn checkpoint_name(client_id: usize) -> String {
    format!("client_{client_id}.ckpt")
}

pub fn load_data(cfg: &Config) -> Result<Vec<ClientData<f64>>> {
    match &cfg.dataset {
        DatasetSection::Synthetic(s) => gen_synthetic_domains(&s.to_core(), cfg.seed),
        DatasetSection::Csv(c) => c
            .train
            .iter()
            .zip(&c.test)
            .enumerate()
            .map(|(i, (tr, te))| {
                let train = load_csv(tr, i, Some(c.num_classes))?;
                let test = load_csv(te, i, Some(c.num_classes))?;
                let domain = fedpick::datasets::DomainSpec::identity(train.input_dim(), 0, 0.0);
                Ok(ClientData { train, test, domain })
            })
            .collect(),
    }
}

/// Clients with freshly initialized models for `cfg`.
pub fn prepare(cfg: &Config) -> Result<(Vec<ClientState<f64>>, RoundConfig)> {
    let rounds = cfg.round_config()?;
    let data = load_data(cfg)?;
    let first = data.first().ok_or_else(|| Error::Config("dataset: no clients".into()))?;
    let input_dim = first.train.input_dim();
    let num_classes = first.train.num_classes;
    let dims = model_dims_for(rounds.algorithm, input_dim, &cfg.encoder_widths(), num_classes, cfg.pfsm_config());
    let clients = build_clients(data, &dims, &rounds, cfg.seed)?;
    Ok((clients, rounds))
}

pub fn train(cfg: &Config, workers: usize) -> Result<(MetricsLog, Vec<ClientState<f64>>)> {
    let (mut clients, rounds) = prepare(cfg)?;
    let log = run_training(&mut clients, &rounds, cfg.seed, workers)?;
    Ok((log, clients))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientSummary {
    pub client_id: usize,
    pub best_accuracy: f64,
    pub final_accuracy: f64,
    pub selection_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub config: Config,
    pub clients: Vec<ClientSummary>,
    pub mean_best_accuracy: f64,
    pub std_best_accuracy: f64,
    pub mean_final_accuracy: f64,
}

pub fn summarize(cfg: &Config, log: &MetricsLog, n_clients: usize) -> Summary {
    let clients: Vec<ClientSummary> = (0..n_clients)
        .map(|id| ClientSummary {
            client_id: id,
            best_accuracy: log.best(id, Split::Test, "accuracy").unwrap_or(f64::NAN),
            final_accuracy: log.series(id, Split::Test, "accuracy").last().map_or(f64::NAN, |p| p.1),
            selection_ratio: log.series(id, Split::Test, "selection_ratio").last().map(|p| p.1),
        })
        .collect();
    let n = clients.len().max(1) as f64;
    let mean = clients.iter().map(|c| c.best_accuracy).sum::<f64>() / n;
    let var = clients.iter().map(|c| (c.best_accuracy - mean).powi(2)).sum::<f64>() / n;
    Summary {
        config: cfg.clone(),
        mean_best_accuracy: mean,
        std_best_accuracy: var.sqrt(),
        mean_final_accuracy: clients.iter().map(|c| c.final_accuracy).sum::<f64>() / n,
        clients,
    }
}

fn write(dir: &Path, name: &str, contents: &[u8]) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, contents)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Ok(path)
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<Config> {
    let mut cfg = Config::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Trains and writes metrics, summary, the resolved config and one checkpoint per client.
pub fn cmd_run(config_path: &Path, seed: Option<u64>, out: &Path, workers: usize) -> Result<Summary> {
    let cfg = load_config(config_path, seed)?;
    fs::create_dir_all(out)?;
    let (log, clients) = train(&cfg, workers)?;
    write(out, METRICS_FILE, log.to_csv().as_bytes())?;
    write(out, CONFIG_FILE, cfg.to_toml().as_bytes())?;
    for c in &clients {
        write(out, &checkpoint_name(c.id), &checkpoint::encode(&c.model))?;
    }
    let summary = summarize(&cfg, &log, clients.len());
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Config(e.to_string()))?;
    write(out, SUMMARY_FILE, json.as_bytes())?;
    log::info!("mean best accuracy {:.4} over {} clients", summary.mean_best_accuracy, clients.len());
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeRow {
    pub client_id: usize,
    pub ratio: f64,
    pub accuracy: f64,
}

/// Pretrains (or restores) the encoders, freezes them and runs the Fisher/KNN
/// probe over selection ratios 0.1..1.0.
pub fn probe(cfg: &Config, workers: usize) -> Result<Vec<ProbeRow>> {
    let clients = match &cfg.probe.checkpoint_dir {
        Some(dir) => {
            let (mut clients, _) = prepare(cfg)?;
            for c in &mut clients {
                let path = dir.join(checkpoint_name(c.id));
                if !path.exists() {
                    return Err(Error::Checkpoint(format!("missing {}", path.display())));
                }
                checkpoint::load_into(&mut c.model, &path)?;
            }
            clients
        }
        None => train(cfg, workers)?.1,
    };
    let ratios = probe_ratios();
    let mut rows = Vec::new();
    for mut c in clients {
        let acc = probe_model(&mut c.model, &c.train, &c.test, &ratios, cfg.probe.k)?;
        rows.extend(ratios.iter().zip(acc).map(|(&ratio, accuracy)| ProbeRow { client_id: c.id, ratio, accuracy }));
    }
    Ok(rows)
}

pub fn probe_csv(rows: &[ProbeRow]) -> String {
    let mut s = String::from("client_id,ratio,accuracy\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.1},{}", r.client_id, r.ratio, r.accuracy);
    }
    s
}

pub fn cmd_probe(config_path: &Path, seed: Option<u64>, out: &Path, workers: usize) -> Result<Vec<ProbeRow>> {
    let cfg = load_config(config_path, seed)?;
    fs::create_dir_all(out)?;
    let rows = probe(&cfg, workers)?;
    write(out, PROBE_FILE, probe_csv(&rows).as_bytes())?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub selection_ratio: Vec<f64>,
    /// Mean Fisher score of dimensions the mask keeps for most samples; `None` if there are none.
    pub fisher_selected: Vec<Option<f64>>,
    pub fisher_unselected: Vec<Option<f64>>,
    pub overlap: Vec<Vec<f64>>,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Mask diagnostics of the checkpoints in a finished run directory.
pub fn analyze(run_dir: &Path) -> Result<Analysis> {
    let cfg_path = run_dir.join(CONFIG_FILE);
    if !cfg_path.exists() {
        return Err(Error::Checkpoint(format!("missing {}", cfg_path.display())));
    }
    let cfg = Config::load(&cfg_path)?;
    let (mut clients, rounds) = prepare(&cfg)?;
    if !rounds.algorithm.uses_selection() {
        return Err(Error::Analysis(format!("{} runs have no feature-selection module to analyze", rounds.algorithm)));
    }
    let mut out =
        Analysis { selection_ratio: vec![], fisher_selected: vec![], fisher_unselected: vec![], overlap: vec![] };
    let mut freqs = Vec::new();
    for c in &mut clients {
        let path = run_dir.join(checkpoint_name(c.id));
        if !path.exists() {
            return Err(Error::Checkpoint(format!("missing {}", path.display())));
        }
        checkpoint::load_into(&mut c.model, &path)?;
        let freq = selection_frequencies(&mut c.model, &c.test)?;
        let z = c.model.infer(&c.test.features)?.z_g;
        let fisher = fisher_scores(&z, &c.test.labels)?;
        let keep: Vec<bool> = freq.iter().map(|&f| f >= 0.5).collect();
        out.selection_ratio.push(freq.iter().sum::<f64>() / freq.len() as f64);
        out.fisher_selected.push(mean_of(fisher.scores.iter().zip(&keep).filter(|p| *p.1).map(|p| *p.0)));
        out.fisher_unselected.push(mean_of(fisher.scores.iter().zip(&keep).filter(|p| !*p.1).map(|p| *p.0)));
        freqs.push(freq);
    }
    out.overlap = important_feature_overlap(&freqs, 0.5)?;
    Ok(out)
}

pub fn analysis_csv(a: &Analysis) -> String {
    let mut s = String::from("metric,client_id,other_client_id,value\n");
    for (i, r) in a.selection_ratio.iter().enumerate() {
        let _ = writeln!(s, "selection_ratio,{i},,{r}");
    }
    for (name, series) in [("fisher_selected", &a.fisher_selected), ("fisher_unselected", &a.fisher_unselected)] {
        for (i, v) in series.iter().enumerate() {
            if let Some(v) = v {
                let _ = writeln!(s, "{name},{i},,{v}");
            }
        }
    }
    for (i, row) in a.overlap.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let _ = writeln!(s, "overlap,{i},{j},{v}");
        }
    }
    s
}

pub fn cmd_analyze(run_dir: &Path) -> Result<Analysis> {
    let a = analyze(run_dir)?;
    write(run_dir, ANALYSIS_FILE, analysis_csv(&a).as_bytes())?;
    Ok(a)
}
