use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use fdsim_core::data::{dirichlet_partition, synthetic_dataset_gen};
use fdsim_core::federation::{run_experiment, FedConfig, Strategy};
use fdsim_core::model::save_checkpoint;
use fdsim_core::oracle::{run_suite, Suite};
use fdsim_core::telemetry::{mean_over_seeds, read_logs, summarize, write_logs, MeanSummaryRow, RoundRecord};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{parse_config, serialize_config, ConfigFile};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ARTIFACTS_FILE: &str = "artifacts.json";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_JSON: &str = "summary.json";
const BYTES_PER_MB: f64 = 1e6;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("oracle failure: {0}")]
    Oracle(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::Oracle(_) => 4,
        }
    }
}

fn runtime(context: &str) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{context}: {e}"))
}

/// Written once, before any round runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: ConfigFile,
    pub config_sha256: String,
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

/// What `run` will execute: one base config crossed with strategies and seeds.
#[derive(Debug, Clone)]
pub struct RunRequest {
    pub config: FedConfig,
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
}

fn load_config(path: Option<&Path>) -> Result<FedConfig, CliError> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    parse_config(&text).map_err(|e| CliError::Config(e.to_string()))
}

fn parse_strategies(raw: &[String]) -> Result<Vec<Strategy>, CliError> {
    let mut out = Vec::new();
    for s in raw {
        if s == "all" {
            out.extend(Strategy::ALL);
        } else {
            out.push(s.parse().map_err(CliError::Config)?);
        }
    }
    let mut unique = Vec::with_capacity(out.len());
    for s in out {
        if !unique.contains(&s) {
            unique.push(s);
        }
    }
    Ok(unique)
}

impl RunRequest {
    pub fn from_args(
        config: Option<&Path>,
        seeds: &[u64],
        strategies: &[String],
        rounds: Option<u32>,
    ) -> Result<Self, CliError> {
        let mut config = load_config(config)?;
        if let Some(r) = rounds {
            config.rounds = r;
        }
        config.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let strategies = if strategies.is_empty() { vec![config.strategy] } else { parse_strategies(strategies)? };
        let seeds = if seeds.is_empty() { vec![config.seed] } else { seeds.to_vec() };
        Ok(Self { config, strategies, seeds })
    }

    pub fn from_manifest(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let m: RunManifest = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let config = m.config.to_fed_config().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(Self { config, strategies: m.strategies, seeds: m.seeds })
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn log_stem(strategy: Strategy, seed: u64) -> String {
    format!("{strategy}_seed{seed}")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(runtime(&path.display().to_string()))
}

pub fn cmd_run(req: &RunRequest, out: &Path) -> Result<(), CliError> {
    if req.seeds.is_empty() || req.strategies.is_empty() {
        return Err(CliError::Config("need at least one seed and one strategy".into()));
    }
    fs::create_dir_all(out).map_err(runtime(&out.display().to_string()))?;
    let file = ConfigFile::from_fed_config(&req.config).map_err(|e| CliError::Config(e.to_string()))?;
    let config_text = serialize_config(&req.config).map_err(|e| CliError::Config(e.to_string()))?;
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: file,
        config_sha256: sha256_hex(config_text.as_bytes()),
        strategies: req.strategies.clone(),
        seeds: req.seeds.clone(),
        out_dir: out.to_path_buf(),
    };
    let manifest_json = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(&out.join(MANIFEST_FILE), manifest_json.as_bytes())?;

    let jobs: Vec<(Strategy, u64)> =
        req.strategies.iter().flat_map(|&s| req.seeds.iter().map(move |&seed| (s, seed))).collect();
    let written = jobs
        .par_iter()
        .map(|&(strategy, seed)| -> Result<Vec<PathBuf>, CliError> {
            let cfg = FedConfig { strategy, seed, ..req.config.clone() };
            let log = run_experiment(&cfg).map_err(|e| CliError::Runtime(format!("{strategy} seed {seed}: {e}")))?;
            let stem = log_stem(strategy, seed);
            let csv = out.join(format!("{stem}.csv"));
            write_logs(&log.records, &csv).map_err(|e| CliError::Runtime(e.to_string()))?;
            let events = out.join(format!("{stem}.events.jsonl"));
            write_file(&events, log.events_jsonl().as_bytes())?;
            let ckpt = out.join(format!("{stem}.server.ckpt"));
            write_file(&ckpt, &save_checkpoint(&log.server))?;
            let last = log.records.last().expect("round 0 is always recorded");
            eprintln!(
                "{stem}: {} rounds, server accuracy {:.4}, {:.3} MB total",
                last.round,
                last.server_accuracy,
                last.cumulative_bytes as f64 / BYTES_PER_MB
            );
            Ok(vec![csv, events, ckpt])
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut hashes = BTreeMap::new();
    for path in written.into_iter().flatten() {
        let bytes = fs::read(&path).map_err(runtime(&path.display().to_string()))?;
        let name = path.file_name().expect("file path").to_string_lossy().into_owned();
        hashes.insert(name, sha256_hex(&bytes));
    }
    let json = serde_json::to_string_pretty(&hashes).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(&out.join(ARTIFACTS_FILE), json.as_bytes())
}

/// Run logs in `dir`: every `.csv` except a previous summary.
fn find_logs(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
    let mut logs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv") && p.file_name().is_some_and(|n| n != SUMMARY_CSV))
        .collect();
    logs.sort();
    Ok(logs)
}

/// Per-strategy means over seeds at each threshold.
pub fn report_rows(runs: &[Vec<RoundRecord>], thresholds: &[f64]) -> Result<Vec<MeanSummaryRow>, CliError> {
    let mut by_strategy: BTreeMap<Strategy, Vec<_>> = BTreeMap::new();
    for records in runs {
        let summary = summarize(records, thresholds).map_err(|e| CliError::Runtime(e.to_string()))?;
        by_strategy.entry(records[0].strategy).or_default().push(summary);
    }
    let mut rows = Vec::new();
    for per_seed in by_strategy.values() {
        rows.extend(mean_over_seeds(per_seed).map_err(|e| CliError::Runtime(e.to_string()))?);
    }
    Ok(rows)
}

fn mb(v: Option<f64>) -> String {
    v.map(|b| format!("{:.6}", b / BYTES_PER_MB)).unwrap_or_default()
}

pub fn summary_csv(rows: &[MeanSummaryRow]) -> String {
    let mut s = String::from(
        "strategy,accuracy_threshold,seeds,seeds_reached,mean_total_mb,mean_uplink_mb,mean_downlink_mb,mean_rounds\n",
    );
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.strategy,
            r.accuracy_threshold,
            r.seeds,
            r.seeds_reached,
            mb(r.mean_bytes_to_threshold),
            mb(r.mean_uplink_bytes_to_threshold),
            mb(r.mean_downlink_bytes_to_threshold),
            r.mean_rounds_to_threshold.map(|v| v.to_string()).unwrap_or_default()
        ));
    }
    s
}

pub fn cmd_report(log_dir: &Path, thresholds: &[f64], out: &Path) -> Result<(), CliError> {
    if thresholds.is_empty() || thresholds.iter().any(|t| !t.is_finite()) {
        return Err(CliError::Config("thresholds must be finite numbers".into()));
    }
    let logs = find_logs(log_dir)?;
    if logs.is_empty() {
        return Err(CliError::Config(format!("no run logs in {}", log_dir.display())));
    }
    let mut runs = Vec::with_capacity(logs.len());
    for path in &logs {
        let records = read_logs(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        if records.is_empty() {
            return Err(CliError::Runtime(format!("{}: log has no records", path.display())));
        }
        runs.push(records);
    }
    let rows = report_rows(&runs, thresholds)?;
    fs::create_dir_all(out).map_err(runtime(&out.display().to_string()))?;
    write_file(&out.join(SUMMARY_CSV), summary_csv(&rows).as_bytes())?;
    let json = serde_json::to_string_pretty(&rows).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(&out.join(SUMMARY_JSON), json.as_bytes())?;
    print!("{}", summary_csv(&rows));
    Ok(())
}

pub fn cmd_partition(config: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> Result<(), CliError> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let data = synthetic_dataset_gen(&cfg.data, cfg.seed).map_err(|e| CliError::Runtime(e.to_string()))?;
    let shards = dirichlet_partition(&data.pool, cfg.num_clients, cfg.dirichlet_gamma, cfg.seed)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut text = String::from("client,samples");
    for c in 0..cfg.data.num_classes {
        text.push_str(&format!(",class_{c}"));
    }
    text.push('\n');
    for (n, idx) in shards.iter().enumerate() {
        let hist = data.pool.subset(idx).class_histogram();
        text.push_str(&format!("{n},{}", idx.len()));
        for h in hist {
            text.push_str(&format!(",{h}"));
        }
        text.push('\n');
    }
    match out {
        Some(p) => write_file(p, text.as_bytes()),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(runtime("stdout")),
    }
}

pub fn cmd_oracle(suite: &str, seed: u64) -> Result<(), CliError> {
    let suites = if suite == "all" { Suite::ALL.to_vec() } else { vec![suite.parse().map_err(CliError::Config)?] };
    let mut failed = Vec::new();
    for s in suites {
        let report = run_suite(s, seed).map_err(|e| CliError::Runtime(e.to_string()))?;
        println!("{report}");
        if !report.passed() {
            failed.push(s.to_string());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Oracle(format!("suites failed: {}", failed.join(", "))))
    }
}
