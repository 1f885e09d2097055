use std::path::{Path, PathBuf};

use bitalloc_core::allocator::Criterion;
use bitalloc_core::harness::{SuccessCriterion, T1Config, DEFAULT_ITERATIONS};
use bitalloc_core::mlu::TrainConfig;
use bitalloc_core::plant::ScenarioSampler;
use bitalloc_core::scenario::{Scenario, ScenarioKind};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub model: PathBuf,
    pub t1: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_dir: "artifacts/data".into(),
            model: "artifacts/model.json".into(),
            t1: "artifacts/t1.bin".into(),
            reports: "artifacts/reports".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub t1: u64,
    pub eval: u64,
    /// Jitter seed of the kNN estimator.
    pub knn: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { data: 1, t1: T1Config::default().seed, eval: 99, knn: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_sequences: usize,
    pub test_sequences: usize,
    pub sequence_length: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { train_sequences: 600, test_sequences: 200, sequence_length: 200 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct T1Section {
    pub samples: usize,
    pub rollouts: usize,
    pub horizon: f64,
}

impl Default for T1Section {
    fn default() -> Self {
        let d = T1Config::default();
        T1Section { samples: d.samples, rollouts: d.rollouts, horizon: d.horizon }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorName {
    Hist,
    Knn,
}

impl EstimatorName {
    pub fn criterion(self) -> Criterion {
        match self {
            EstimatorName::Hist => Criterion::KldHist,
            EstimatorName::Knn => Criterion::KldKnn,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub lo: u32,
    pub hi: u32,
}

/// Everything a pipeline run depends on. Unset fields take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioKind,
    pub paths: Paths,
    pub seeds: Seeds,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub t1: T1Section,
    pub estimator: EstimatorName,
    pub knn_k: Option<usize>,
    pub histogram_bins: Option<Vec<usize>>,
    pub bounds: Option<Bounds>,
    pub iterations: usize,
    /// Defaults to 42..=48 for the main scenario and 5 for the extension.
    pub r_sums: Option<Vec<u32>>,
    pub methods: Vec<Criterion>,
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scenario: ScenarioKind::PendulumMain,
            paths: Paths::default(),
            seeds: Seeds::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            t1: T1Section::default(),
            estimator: EstimatorName::Hist,
            knn_k: None,
            histogram_bins: None,
            bounds: None,
            iterations: DEFAULT_ITERATIONS,
            r_sums: None,
            methods: Criterion::ALL.to_vec(),
            threads: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| anyhow::anyhow!("invalid config {}: {e}", path.display()))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        bitalloc_core::fingerprint(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn scenario(&self) -> Scenario {
        let mut s = Scenario::of(self.scenario);
        if let Some(b) = self.bounds {
            s.lo = b.lo;
            s.hi = b.hi;
        }
        if let Some(bins) = &self.histogram_bins {
            s.histogram_bins = bins.clone();
        }
        s.knn_k = self.knn_k;
        s.knn_seed = self.seeds.knn;
        s
    }

    pub fn r_sums(&self) -> Vec<u32> {
        match &self.r_sums {
            Some(v) => v.clone(),
            None => match self.scenario {
                ScenarioKind::PendulumMain => (42..=48).collect(),
                ScenarioKind::PendulumMlExtension => vec![5],
            },
        }
    }

    pub fn t1_config(&self) -> T1Config {
        T1Config { samples: self.t1.samples, rollouts: self.t1.rollouts, horizon: self.t1.horizon, seed: self.seeds.t1 }
    }

    pub fn sampler(&self) -> ScenarioSampler {
        ScenarioSampler::default()
    }

    pub fn criterion(&self) -> SuccessCriterion {
        SuccessCriterion::default()
    }
}
