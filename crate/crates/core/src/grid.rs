//! The beta x rho experiment grid: run configuration, cell orchestration
//! with on-disk resumability, and CSV reports.
//!
//! Run layout: `<results_dir>/<run_id>/`
//! - `config.toml`        frozen snapshot of the configuration
//! - `checkpoints/`       one base checkpoint per seed, one adapter per cell
//! - `cells/<tag>.kv`     per-cell results (`key = value`), the resume unit
//! - `cells/<tag>.failed` error marker for failed cells
//! - `per_seed.csv`, `summary.csv`, `flops.csv`

use crate::checkpoint::{file_hash, load_base, save_adapter, save_base, Meta};
use crate::cost::FlopsLedger;
use crate::data::{pack_corpus, read_corpus_dir, tokenize, CorpusWindow};
use crate::error::{Error, Result};
use crate::experiments::{
    desk_sft_dataset, finetune, pretrain, MetricsReport, Precision, TrainSpec,
};
use crate::model::ModelConfig;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

fn default_model() -> ModelSection {
    ModelSection::default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub window: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = crate::experiments::desk_model();
        Self {
            d_model: m.d_model,
            layers: m.layers,
            heads: m.heads,
            d_ff: m.d_ff,
            window: m.window,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            steps: 3000,
            lr: 1e-3,
            batch: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub beta: f64,
    pub rho: f64,
    pub lr: f64,
    pub batch: usize,
    pub window: usize,
    pub steps: usize,
    pub seed: u64,
    pub kl_on_replay: bool,
    pub precision: Precision,
    pub rank: usize,
    pub alpha: f64,
    pub lora_dropout: f64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let s = TrainSpec::default();
        Self {
            beta: s.beta,
            rho: s.rho,
            lr: s.lr,
            batch: s.batch,
            window: s.window,
            steps: s.steps,
            seed: s.seed,
            kl_on_replay: s.kl_on_replay,
            precision: s.precision,
            rank: s.rank,
            alpha: s.alpha,
            lora_dropout: s.lora_dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub betas: Vec<f64>,
    pub rhos: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            betas: vec![0.0, 0.001, 0.01, 0.1],
            rhos: vec![0.0, 1.0],
            seeds: vec![1, 2, 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub pretrain_dir: String,
    pub replay_dir: String,
    pub sft_examples: usize,
    pub probe_examples: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            pretrain_dir: "data/corpus_pretrain".into(),
            replay_dir: "data/corpus_replay".into(),
            sft_examples: 96,
            probe_examples: 24,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub results_dir: String,
    pub run_id: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            results_dir: "results".into(),
            run_id: "grid".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_model")]
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub grid: GridSection,
    pub data: DataSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab: crate::data::VOCAB_SIZE,
            d_model: self.model.d_model,
            layers: self.model.layers,
            heads: self.model.heads,
            d_ff: self.model.d_ff,
            window: self.model.window,
        }
    }

    pub fn train_spec(&self) -> TrainSpec {
        let f = &self.finetune;
        TrainSpec {
            beta: f.beta,
            rho: f.rho,
            lr: f.lr,
            batch: f.batch,
            window: f.window,
            steps: f.steps,
            seed: f.seed,
            kl_on_replay: f.kl_on_replay,
            precision: f.precision,
            rank: f.rank,
            alpha: f.alpha,
            lora_dropout: f.lora_dropout,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("{e}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub beta: f64,
    pub rho: f64,
    pub seed: u64,
    pub metrics: MetricsReport,
    pub f_fwd: f64,
    pub optimizer_steps: usize,
    pub measured_macs: u64,
    pub adapter_fraction: f64,
}

impl CellResult {
    pub fn ledger(&self, config: &ModelConfig, batch: usize, window: usize) -> Result<FlopsLedger> {
        FlopsLedger::new(
            config,
            batch,
            window,
            self.optimizer_steps,
            self.rho,
            self.adapter_fraction,
            self.measured_macs,
        )
    }
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub dir: PathBuf,
    pub cells: Vec<CellResult>,
    /// (cell tag, error message) for cells that failed.
    pub failed: Vec<(String, String)>,
}

pub fn cell_tag(beta: f64, rho: f64, seed: u64) -> String {
    format!("b{beta}-r{rho}-s{seed}")
}

fn write_cell_file(path: &Path, cell: &CellResult) -> Result<()> {
    let m = &cell.metrics;
    let mut out = String::new();
    out.push_str(&format!("beta = {}\n", cell.beta));
    out.push_str(&format!("rho = {}\n", cell.rho));
    out.push_str(&format!("seed = {}\n", cell.seed));
    out.push_str(&format!("probes = {}\n", m.probe_names.join(",")));
    let join = |xs: &[f64]| {
        xs.iter()
            .map(|x| format!("{x}"))
            .collect::<Vec<_>>()
            .join(",")
    };
    out.push_str(&format!("before = {}\n", join(&m.before)));
    out.push_str(&format!("after = {}\n", join(&m.after)));
    out.push_str(&format!("forgetting = {}\n", m.forgetting));
    out.push_str(&format!("plasticity = {}\n", m.plasticity));
    out.push_str(&format!("holdout_kl = {}\n", m.holdout_kl));
    out.push_str(&format!("f_fwd = {}\n", cell.f_fwd));
    out.push_str(&format!("optimizer_steps = {}\n", cell.optimizer_steps));
    out.push_str(&format!("measured_macs = {}\n", cell.measured_macs));
    out.push_str(&format!("adapter_fraction = {}\n", cell.adapter_fraction));
    std::fs::write(path, out)?;
    Ok(())
}

fn read_cell_file(path: &Path) -> Result<CellResult> {
    let text = std::fs::read_to_string(path)?;
    let mut kv = BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once(" = ") {
            kv.insert(k.to_string(), v.to_string());
        }
    }
    let get = |k: &str| -> Result<&String> {
        kv.get(k)
            .ok_or_else(|| Error::Config(format!("{}: missing {k}", path.display())))
    };
    let parse_f64 = |k: &str| -> Result<f64> {
        get(k)?
            .parse()
            .map_err(|e| Error::Config(format!("{}: bad {k}: {e}", path.display())))
    };
    let parse_list = |k: &str| -> Result<Vec<f64>> {
        get(k)?
            .split(',')
            .map(|x| {
                x.parse()
                    .map_err(|e| Error::Config(format!("{}: bad {k}: {e}", path.display())))
            })
            .collect()
    };
    let probe_names: Vec<String> = get("probes")?.split(',').map(String::from).collect();
    let before = parse_list("before")?;
    let after = parse_list("after")?;
    if before.len() != probe_names.len() || after.len() != probe_names.len() {
        return Err(Error::Config(format!(
            "{}: probe/score length mismatch",
            path.display()
        )));
    }
    Ok(CellResult {
        beta: parse_f64("beta")?,
        rho: parse_f64("rho")?,
        seed: get("seed")?
            .parse()
            .map_err(|e| Error::Config(format!("bad seed: {e}")))?,
        metrics: MetricsReport {
            probe_names,
            before,
            after,
            forgetting: parse_f64("forgetting")?,
            plasticity: parse_f64("plasticity")?,
            holdout_kl: parse_f64("holdout_kl")?,
        },
        f_fwd: parse_f64("f_fwd")?,
        optimizer_steps: get("optimizer_steps")?
            .parse()
            .map_err(|e| Error::Config(format!("bad optimizer_steps: {e}")))?,
        measured_macs: get("measured_macs")?
            .parse()
            .map_err(|e| Error::Config(format!("bad measured_macs: {e}")))?,
        adapter_fraction: parse_f64("adapter_fraction")?,
    })
}

/// Run (or resume) the full grid and write the CSV reports.
pub fn run_grid(cfg: &RunConfig) -> Result<GridOutcome> {
    if cfg.grid.betas.is_empty() || cfg.grid.rhos.is_empty() || cfg.grid.seeds.is_empty() {
        return Err(Error::InvalidArgument("empty grid".into()));
    }
    let config = cfg.model_config();
    let dir = PathBuf::from(&cfg.output.results_dir).join(&cfg.output.run_id);
    std::fs::create_dir_all(dir.join("checkpoints"))?;
    std::fs::create_dir_all(dir.join("cells"))?;

    // freeze the configuration; refuse to resume under a different one
    let snapshot = cfg.to_toml()?;
    let snapshot_path = dir.join("config.toml");
    if snapshot_path.exists() {
        let existing = std::fs::read_to_string(&snapshot_path)?;
        if existing != snapshot {
            return Err(Error::Config(format!(
                "{} differs from the requested configuration; use a fresh run_id",
                snapshot_path.display()
            )));
        }
    } else {
        std::fs::write(&snapshot_path, &snapshot)?;
    }

    let pretrain_corpus = tokenize(&read_corpus_dir(Path::new(&cfg.data.pretrain_dir))?);
    let replay_corpus = tokenize(&read_corpus_dir(Path::new(&cfg.data.replay_dir))?);
    let replay_windows: Vec<CorpusWindow> =
        pack_corpus(&replay_corpus, cfg.finetune.window + 1)?;
    let sft = desk_sft_dataset(cfg.data.sft_examples, cfg.data.probe_examples);

    // one base model per seed, shared by all cells of that seed
    let mut bases = BTreeMap::new();
    for &seed in &cfg.grid.seeds {
        let path = dir.join("checkpoints").join(format!("base-s{seed}.ckpt"));
        let params = if path.exists() {
            load_base(&path)?.0
        } else {
            let out = pretrain(
                &config,
                &pretrain_corpus,
                cfg.pretrain.steps,
                cfg.pretrain.lr,
                cfg.pretrain.batch,
                seed,
            )?;
            let mut meta = Meta::new();
            meta.insert("holdout_ppl".into(), format!("{}", out.holdout_ppl));
            meta.insert(
                "initial_holdout_ppl".into(),
                format!("{}", out.initial_holdout_ppl),
            );
            save_base(&path, &out.params, seed, &meta)?;
            out.params
        };
        bases.insert(seed, (params, file_hash(&path)?));
    }

    let mut cells = Vec::new();
    let mut failed = Vec::new();
    for &rho in &cfg.grid.rhos {
        for &beta in &cfg.grid.betas {
            for &seed in &cfg.grid.seeds {
                let tag = cell_tag(beta, rho, seed);
                let cell_path = dir.join("cells").join(format!("{tag}.kv"));
                let fail_path = dir.join("cells").join(format!("{tag}.failed"));
                if cell_path.exists() {
                    cells.push(read_cell_file(&cell_path)?);
                    continue;
                }
                if fail_path.exists() {
                    failed.push((tag, std::fs::read_to_string(&fail_path)?));
                    continue;
                }
                let (base, base_hash) = &bases[&seed];
                let spec = TrainSpec {
                    beta,
                    rho,
                    seed,
                    ..cfg.train_spec()
                };
                match finetune(base, &spec, &sft, &replay_windows, cfg.data.probe_examples)
                {
                    Ok(out) => {
                        let ckpt = dir
                            .join("checkpoints")
                            .join(format!("adapter-{tag}.ckpt"));
                        save_adapter(
                            &ckpt,
                            &out.adapter,
                            &config,
                            seed,
                            *base_hash,
                            &Meta::new(),
                        )?;
                        let cell = CellResult {
                            beta,
                            rho,
                            seed,
                            metrics: out.metrics,
                            f_fwd: out.ledger.f_fwd,
                            optimizer_steps: out.ledger.optimizer_steps,
                            measured_macs: out.ledger.measured_macs,
                            adapter_fraction: crate::model::trainable_fraction(
                                base,
                                &out.adapter,
                            ),
                        };
                        write_cell_file(&cell_path, &cell)?;
                        cells.push(cell);
                    }
                    Err(e) => {
                        let msg = format!("{e}");
                        std::fs::write(&fail_path, &msg)?;
                        failed.push((tag, msg));
                    }
                }
            }
        }
    }

    write_reports(&dir, cfg, &cells)?;
    Ok(GridOutcome { dir, cells, failed })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Seed-mean F and P for one (beta, rho) cell of an outcome.
pub fn cell_means(cells: &[CellResult], beta: f64, rho: f64) -> Option<(f64, f64)> {
    let picked: Vec<&CellResult> = cells
        .iter()
        .filter(|c| c.beta == beta && c.rho == rho)
        .collect();
    if picked.is_empty() {
        return None;
    }
    let f = mean(&picked.iter().map(|c| c.metrics.forgetting).collect::<Vec<_>>());
    let p = mean(&picked.iter().map(|c| c.metrics.plasticity).collect::<Vec<_>>());
    Some((f, p))
}

fn write_reports(dir: &Path, cfg: &RunConfig, cells: &[CellResult]) -> Result<()> {
    let config = cfg.model_config();

    // per_seed.csv: one row per completed cell
    let mut per_seed = String::new();
    let probe_names: Vec<String> = cells
        .first()
        .map(|c| c.metrics.probe_names.clone())
        .unwrap_or_default();
    per_seed.push_str("rho,beta,seed");
    for n in &probe_names {
        per_seed.push_str(&format!(",before_{n}"));
    }
    for n in &probe_names {
        per_seed.push_str(&format!(",after_{n}"));
    }
    per_seed.push_str(",forgetting,plasticity,holdout_kl\n");
    for c in cells {
        per_seed.push_str(&format!("{},{},{}", c.rho, c.beta, c.seed));
        for x in &c.metrics.before {
            per_seed.push_str(&format!(",{x:.4}"));
        }
        for x in &c.metrics.after {
            per_seed.push_str(&format!(",{x:.4}"));
        }
        per_seed.push_str(&format!(
            ",{:.4},{:.4},{:.6}\n",
            c.metrics.forgetting, c.metrics.plasticity, c.metrics.holdout_kl
        ));
    }
    std::fs::write(dir.join("per_seed.csv"), per_seed)?;

    // summary.csv: one row per (rho, beta), absolute and relative means
    let mut summary = String::new();
    summary.push_str(
        "rho,beta,f_mean,p_mean,f_rel_pct,p_rel_pct,holdout_kl_mean,n_seeds\n",
    );
    for &rho in &cfg.grid.rhos {
        for &beta in &cfg.grid.betas {
            let picked: Vec<&CellResult> = cells
                .iter()
                .filter(|c| c.beta == beta && c.rho == rho)
                .collect();
            if picked.is_empty() {
                summary.push_str(&format!("{rho},{beta},NA,NA,NA,NA,NA,0\n"));
                continue;
            }
            let n_general = probe_names.len().saturating_sub(1);
            let f = mean(&picked.iter().map(|c| c.metrics.forgetting).collect::<Vec<_>>());
            let p = mean(&picked.iter().map(|c| c.metrics.plasticity).collect::<Vec<_>>());
            let kl = mean(&picked.iter().map(|c| c.metrics.holdout_kl).collect::<Vec<_>>());
            let before_general = mean(
                &picked
                    .iter()
                    .map(|c| mean(&c.metrics.before[..n_general]))
                    .collect::<Vec<_>>(),
            );
            let before_target = mean(
                &picked
                    .iter()
                    .map(|c| c.metrics.before[n_general])
                    .collect::<Vec<_>>(),
            );
            // relative change as in the absolute/before construction; the
            // target-task denominator is floored at 1.0 because an untrained
            // desk model can score ~0 on the unseen task format
            let f_rel = 100.0 * f / before_general.max(1.0);
            let p_rel = 100.0 * p / before_target.max(1.0);
            summary.push_str(&format!(
                "{rho},{beta},{f:.4},{p:.4},{f_rel:.2},{p_rel:.2},{kl:.6},{}\n",
                picked.len()
            ));
        }
    }
    std::fs::write(dir.join("summary.csv"), summary)?;

    // flops.csv: modeled band and measured totals per cell
    let mut flops = String::new();
    flops.push_str(
        "rho,beta,seed,f_fwd,optimizer_steps,measured_flops,c_lora_low,c_lora_high,c_ft,ratio_to_full_ft,within_bounds\n",
    );
    for c in cells {
        let ledger = c.ledger(&config, cfg.finetune.batch, cfg.finetune.window)?;
        flops.push_str(&format!(
            "{},{},{},{:.0},{},{:.0},{:.0},{:.0},{:.0},{:.4},{}\n",
            c.rho,
            c.beta,
            c.seed,
            ledger.f_fwd,
            ledger.optimizer_steps,
            ledger.measured_flops(),
            ledger.modeled.c_lora_low,
            ledger.modeled.c_lora_high,
            ledger.modeled.c_ft,
            ledger.ratio_to_full_ft(),
            ledger.within_lora_bounds()
        ));
    }
    std::fs::write(dir.join("flops.csv"), flops)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrip_and_defaults() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.finetune.lr, 1e-3);
        assert_eq!(cfg.grid.betas, vec![0.0, 0.001, 0.01, 0.1]);
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn config_partial_override() {
        let cfg = RunConfig::from_toml(
            "[finetune]\nbeta = 0.01\nrho = 1.0\n\n[grid]\nseeds = [7]\n",
        )
        .unwrap();
        assert_eq!(cfg.finetune.beta, 0.01);
        assert_eq!(cfg.finetune.rho, 1.0);
        assert_eq!(cfg.finetune.lr, 1e-3); // untouched default
        assert_eq!(cfg.grid.seeds, vec![7]);
        assert_eq!(cfg.grid.betas, vec![0.0, 0.001, 0.01, 0.1]);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(RunConfig::from_toml("[finetune]\nbta = 0.01\n").is_err());
        assert!(RunConfig::from_toml("[mystery]\nx = 1\n").is_err());
    }

    #[test]
    fn cell_file_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cell = CellResult {
            beta: 0.001,
            rho: 1.0,
            seed: 3,
            metrics: MetricsReport {
                probe_names: vec!["copy".into(), "kv".into()],
                before: vec![91.234567891234, 3.0],
                after: vec![88.0, 55.5],
                forgetting: 3.234567891234,
                plasticity: 52.5,
                holdout_kl: 0.012345678901234567,
            },
            f_fwd: 1.23e9,
            optimizer_steps: 480,
            measured_macs: 123456789012345,
            adapter_fraction: 0.0421,
        };
        let path = dir.path().join("cell.kv");
        write_cell_file(&path, &cell).unwrap();
        let back = read_cell_file(&path).unwrap();
        assert_eq!(cell, back);
    }
}
