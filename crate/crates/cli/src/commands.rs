use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use bitalloc_core::allocator::{Criterion, RateAllocation};
use bitalloc_core::dataset::{atomic_write, sidecar_path, Dataset};
use bitalloc_core::divergence::HistogramConfig;
use bitalloc_core::harness::{
    build_t1, distribution_drift_check, evaluate_allocation, sweep, write_sweep_csv, EvaluationReport, Pipeline,
    SweepCell, SweepConfig,
};
use bitalloc_core::mlu::{generate_lqr_dataset, train_mlp, DemoDataset, MlpModel};
use bitalloc_core::{fingerprint, Error};
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

/// Written next to every output: enough to tell which config and seed produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub model_fingerprint: Option<String>,
    /// File name to SHA-256 of its bytes.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    fn new(command: &str, cfg: &RunConfig, seed: u64) -> Self {
        Manifest {
            command: command.into(),
            config_hash: cfg.hash(),
            seed,
            model_fingerprint: None,
            outputs: BTreeMap::new(),
        }
    }

    fn record(&mut self, path: &Path) -> anyhow::Result<()> {
        let bytes = fs::read(path).with_context(|| format!("reading back {}", path.display()))?;
        self.outputs.insert(file_name(path), fingerprint(&bytes));
        Ok(())
    }

    fn write(&self, path: &Path) -> anyhow::Result<()> {
        write_bytes(path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    Ok(())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    ensure_parent(path)?;
    atomic_write(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn file_hash(path: &Path) -> anyhow::Result<String> {
    Ok(fingerprint(&fs::read(path).with_context(|| format!("reading {}", path.display()))?))
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let d = cfg.data;
    let data = generate_lqr_dataset(d.train_sequences, d.test_sequences, d.sequence_length, cfg.seeds.data)?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let train = out.join("train.bin");
    let test = out.join("test.bin");
    let mut m = Manifest::new("gen-data", cfg, cfg.seeds.data);
    data.train.write_binary(&train).with_context(|| format!("cannot write {}", train.display()))?;
    // never leave a train set without its test set
    if let Err(e) = data.test.write_binary(&test) {
        for p in [&train, &sidecar_path(&train)] {
            let _ = fs::remove_file(p);
        }
        return Err(anyhow!(e).context(format!("cannot write {}", test.display())));
    }
    for p in [&train, &test] {
        m.record(p)?;
        m.record(&sidecar_path(p))?;
    }
    m.write(&out.join("manifest.json"))?;
    info!(
        "wrote {} train and {} test sequences ({} redraws) to {}",
        data.n_train_sequences(),
        data.n_test_sequences(),
        data.redraws,
        out.display()
    );
    Ok(())
}

fn load_demo(cfg: &RunConfig) -> anyhow::Result<DemoDataset> {
    let dir = &cfg.paths.data_dir;
    let read = |name: &str| -> anyhow::Result<Dataset> {
        let p = dir.join(name);
        if !p.exists() {
            bail!("dataset not found: {} (run gen-data first)", p.display());
        }
        Ok(Dataset::read_binary(&p).with_context(|| format!("reading {}", p.display()))?)
    };
    let (train, test) = (read("train.bin")?, read("test.bin")?);
    Ok(DemoDataset { train, test, seq_len: cfg.data.sequence_length, redraws: 0 })
}

pub fn train(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let data = load_demo(cfg)?;
    let (model, log) = train_mlp(&data, &cfg.train)?;
    ensure_parent(out)?;
    model.save(out).with_context(|| format!("cannot write {}", out.display()))?;
    let log_path = out.with_extension("log.json");
    write_bytes(&log_path, serde_json::to_string_pretty(&log)?.as_bytes())?;
    let mut m = Manifest::new("train", cfg, cfg.train.seed);
    m.model_fingerprint = Some(model.fingerprint().to_string());
    m.record(out)?;
    m.record(&log_path)?;
    m.write(&manifest_path(out))?;
    match log.test_mse {
        Some(mse) => info!("best epoch {} of {}, final test MSE {mse:.4}", log.best_epoch, log.epochs.len()),
        None => info!("best epoch {} of {}, no test set", log.best_epoch, log.epochs.len()),
    }
    Ok(())
}

fn load_model(cfg: &RunConfig) -> anyhow::Result<MlpModel> {
    let p = &cfg.paths.model;
    if !p.exists() {
        bail!("model not found: {} (run train first)", p.display());
    }
    MlpModel::load(p).with_context(|| format!("reading {}", p.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct T1Stamp {
    model_sha256: String,
    t1: bitalloc_core::harness::T1Config,
}

/// Load T1 from its cache when it was built from this model and config, else build and cache it.
fn load_or_build_t1(cfg: &RunConfig, model: &MlpModel) -> anyhow::Result<Dataset> {
    let path = &cfg.paths.t1;
    let stamp = T1Stamp { model_sha256: file_hash(&cfg.paths.model)?, t1: cfg.t1_config() };
    let stamp_path = manifest_path(path);
    if path.exists() {
        let cached: Option<T1Stamp> = fs::read_to_string(&stamp_path).ok().and_then(|s| serde_json::from_str(&s).ok());
        if cached.as_ref() == Some(&stamp) {
            return Ok(Dataset::read_binary(path)?);
        }
        info!("T1 cache at {} is stale, rebuilding", path.display());
    }
    let t1 = build_t1(model, &cfg.sampler(), &cfg.t1_config())?;
    ensure_parent(path)?;
    t1.write_binary(path)?;
    write_bytes(&stamp_path, serde_json::to_string_pretty(&stamp)?.as_bytes())?;
    info!("built T1 with {} samples", t1.len());
    Ok(t1)
}

#[derive(Debug, Serialize)]
struct AllocateOutput<'a> {
    r_sum: u32,
    method: Criterion,
    allocation: &'a RateAllocation,
    bits: &'a [u32],
    score: Option<f64>,
}

pub fn allocate(cfg: &RunConfig, r_sum: u32, method: Criterion, out: Option<&Path>) -> anyhow::Result<()> {
    let model = load_model(cfg)?;
    let t1 = load_or_build_t1(cfg, &model)?;
    let mut pipe = Pipeline::new(&t1, &model, cfg.scenario())?;
    let sel = pipe.select(method, r_sum)?;
    let score = sel.table.as_ref().and_then(|t| t.best()).map(|b| b.score);
    println!(
        "{}",
        serde_json::to_string(&AllocateOutput { r_sum, method, allocation: &sel.allocation, bits: &sel.bits, score })?
    );
    if let Some(table) = &sel.table {
        let path = out
            .map(Path::to_path_buf)
            .unwrap_or_else(|| cfg.paths.reports.join(format!("scores_{r_sum}_{method}.csv")));
        let mut buf = Vec::new();
        table.write_csv(&mut buf)?;
        write_bytes(&path, &buf)?;
        let mut m = Manifest::new("allocate", cfg, cfg.seeds.t1);
        m.model_fingerprint = Some(model.fingerprint().to_string());
        m.record(&path)?;
        m.write(&manifest_path(&path))?;
        info!("score table written to {}", path.display());
    }
    Ok(())
}

/// What `evaluate` runs: explicit per-feature depths, or a selection rule at a budget.
pub enum EvalTarget {
    Bits(Vec<u32>),
    Select { r_sum: u32, method: Criterion },
}

pub fn evaluate(cfg: &RunConfig, target: EvalTarget, out: Option<&Path>) -> anyhow::Result<EvaluationReport> {
    let model = load_model(cfg)?;
    let t1 = load_or_build_t1(cfg, &model)?;
    let mut pipe = Pipeline::new(&t1, &model, cfg.scenario())?;
    let bits = match target {
        EvalTarget::Bits(b) => {
            if b.len() != pipe.n_features() {
                bail!("--bits needs {} values, got {}", pipe.n_features(), b.len());
            }
            b
        }
        EvalTarget::Select { r_sum, method } => pipe.select(method, r_sum)?.bits,
    };
    let rep = evaluate_allocation(
        &bits,
        &pipe.bank,
        &model,
        &cfg.criterion(),
        &cfg.sampler(),
        cfg.iterations,
        cfg.seeds.eval,
    )?;
    let json = serde_json::to_string_pretty(&rep)?;
    println!("{json}");
    if let Some(path) = out {
        write_bytes(path, json.as_bytes())?;
        let mut m = Manifest::new("evaluate", cfg, cfg.seeds.eval);
        m.model_fingerprint = Some(model.fingerprint().to_string());
        m.record(path)?;
        m.write(&manifest_path(path))?;
    }
    Ok(rep)
}

/// Checkpoint of a sweep in progress; `complete` flips once every cell is done.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub config_hash: String,
    pub seed: u64,
    pub model_fingerprint: String,
    pub r_sums: Vec<u32>,
    pub methods: Vec<Criterion>,
    pub iterations: usize,
    pub n_features: usize,
    pub complete: bool,
    pub cells: Vec<SweepCell>,
}

pub fn sweep_cmd(cfg: &RunConfig, r_sums: Vec<u32>, methods: Vec<Criterion>, dir: &Path) -> anyhow::Result<()> {
    let model = load_model(cfg)?;
    let t1 = load_or_build_t1(cfg, &model)?;
    let mut pipe = Pipeline::new(&t1, &model, cfg.scenario())?;
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let manifest_file = dir.join("manifest.json");
    let scfg = SweepConfig {
        r_sums: r_sums.clone(),
        methods: methods.clone(),
        iterations: cfg.iterations,
        seed: cfg.seeds.eval,
        criterion: cfg.criterion(),
        sampler: cfg.sampler(),
    };
    let mut state = SweepManifest {
        config_hash: cfg.hash(),
        seed: cfg.seeds.eval,
        model_fingerprint: file_hash(&cfg.paths.model)?,
        r_sums,
        methods,
        iterations: cfg.iterations,
        n_features: pipe.n_features(),
        complete: false,
        cells: Vec::new(),
    };
    let mut done = BTreeMap::new();
    if let Ok(text) = fs::read_to_string(&manifest_file) {
        match serde_json::from_str::<SweepManifest>(&text) {
            Ok(prev) if prev.config_hash == state.config_hash && prev.model_fingerprint == state.model_fingerprint => {
                info!("resuming sweep with {} finished cell(s)", prev.cells.len());
                for c in prev.cells {
                    done.insert((c.r_sum, c.method), c);
                }
            }
            _ => info!("existing sweep manifest does not match this run, starting over"),
        }
    }
    state.cells = done.values().cloned().collect();
    let cells = sweep(&mut pipe, &scfg, &done, |cell, table| {
        if let Some(t) = table {
            let mut buf = Vec::new();
            t.write_csv(&mut buf)?;
            atomic_write(&dir.join(format!("scores_{}_{}.csv", cell.r_sum, cell.method)), &buf)?;
        }
        state.cells.push(cell.clone());
        atomic_write(&manifest_file, serde_json::to_string_pretty(&state)?.as_bytes())
    })?;
    let mut buf = Vec::new();
    write_sweep_csv(&cells, state.n_features, &mut buf)?;
    let csv_path = dir.join("sweep.csv");
    write_bytes(&csv_path, &buf)?;
    state.cells = cells;
    state.complete = true;
    write_bytes(&manifest_file, serde_json::to_string_pretty(&state)?.as_bytes())?;
    let failed = state.cells.iter().filter(|c| c.failure.is_some()).count();
    info!("sweep finished: {} cells, {failed} failed; table at {}", state.cells.len(), csv_path.display());
    Ok(())
}

pub fn drift_check(cfg: &RunConfig, r_sums: Vec<u32>, method: Criterion, out: &Path) -> anyhow::Result<()> {
    let model = load_model(cfg)?;
    let t1 = load_or_build_t1(cfg, &model)?;
    let mut pipe = Pipeline::new(&t1, &model, cfg.scenario())?;
    let n = pipe.n_features();
    let full = pipe.scenario.histogram_config(&t1, &pipe.bank)?;
    let hist = HistogramConfig::new(full.bins_per_dim[..n].to_vec(), full.edges[..n].to_vec())?;
    let mut allocations = Vec::new();
    for r in r_sums {
        allocations.push((Some(r), pipe.select(method, r)?.bits));
    }
    let loop_cfg = bitalloc_core::harness::T1Config { seed: cfg.seeds.eval, ..cfg.t1_config() };
    let rows = distribution_drift_check(&t1, &model, &pipe.bank, &allocations, &hist, &cfg.sampler(), &loop_cfg)?;
    let mut wr = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["r_sum".to_string()];
    header.extend((1..=n).map(|i| format!("R{i}")));
    header.extend(["samples", "kld"].map(String::from));
    wr.write_record(&header)?;
    for r in &rows {
        let mut rec = vec![r.r_sum.map(|v| v.to_string()).unwrap_or_default()];
        rec.extend(r.bits.iter().map(u32::to_string));
        rec.push(r.samples.to_string());
        rec.push(format!("{:?}", r.kld.value));
        wr.write_record(&rec)?;
        let label = r.r_sum.map_or_else(|| "-".to_string(), |v| v.to_string());
        info!("R_sum {label} {:?}: input drift {:.5}", r.bits, r.kld.value);
    }
    let bytes = wr.into_inner().map_err(|e| anyhow!("csv: {e}"))?;
    write_bytes(out, &bytes)?;
    let mut m = Manifest::new("drift-check", cfg, cfg.seeds.eval);
    m.model_fingerprint = Some(model.fingerprint().to_string());
    m.record(out)?;
    m.write(&manifest_path(out))?;
    Ok(())
}

/// Wide table for plotting: one row per R_sum, `p_e`/`ci_lo`/`ci_hi` columns per method.
pub fn export_plot(sweep_dir: &Path, out: &Path) -> anyhow::Result<()> {
    let manifest_file = sweep_dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_file)
        .with_context(|| format!("no sweep manifest at {} (run sweep first)", manifest_file.display()))?;
    let state: SweepManifest = serde_json::from_str(&text)?;
    if !state.complete {
        log::warn!("sweep at {} is incomplete; missing cells are left empty", sweep_dir.display());
    }
    let mut wr = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["r_sum".to_string()];
    for m in &state.methods {
        header.extend(["p_e", "ci_lo", "ci_hi"].map(|c| format!("{m}_{c}")));
    }
    wr.write_record(&header)?;
    for &r in &state.r_sums {
        let mut rec = vec![r.to_string()];
        for &m in &state.methods {
            let rep = state.cells.iter().find(|c| c.r_sum == r && c.method == m).and_then(|c| c.report.as_ref());
            match rep {
                Some(rep) => rec.extend([rep.p_e, rep.ci_lo, rep.ci_hi].map(|v| format!("{v:?}"))),
                None => rec.extend(std::iter::repeat_n(String::new(), 3)),
            }
        }
        wr.write_record(&rec)?;
    }
    let bytes = wr.into_inner().map_err(|e| anyhow!("csv: {e}"))?;
    write_bytes(out, &bytes)
}

/// Map core errors that stem from bad arguments onto usage failures.
pub fn is_usage_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::InvalidArgument(_))))
}
