use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{SyntheticTaskSpec, TaskKind};
use crate::error::{Error, Result};
use crate::merge::{MergeMethod, MergeSpec, RouterKind};
use crate::model::ModelConfig;
use crate::numerics::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub eval_every: usize,
    pub eval_batches: usize,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.95
}

impl PhaseConfig {
    pub fn optim(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselinePolicy {
    /// Every parameter of the base is fine-tuned.
    #[default]
    All,
    MlpOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Defaults to a tenth of the pretraining rate.
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default)]
    pub weight_decay: f64,
    /// Steps at which specialist checkpoints are kept (the fine-tuning trajectory).
    pub schedule: Vec<usize>,
    #[serde(default)]
    pub train_layernorm: bool,
    /// Blend the pretraining mix into every specialist corpus.
    #[serde(default)]
    pub datamix: bool,
    #[serde(default = "default_datamix_ratio")]
    pub datamix_ratio: f64,
    #[serde(default)]
    pub baseline_policy: BaselinePolicy,
    pub eval_every: usize,
    pub eval_batches: usize,
}

fn default_datamix_ratio() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorporaConfig {
    pub pretrain: SyntheticTaskSpec,
    /// Exactly two: the specialists `A` and `B`.
    pub specialists: Vec<SyntheticTaskSpec>,
    pub adaptation: Vec<SyntheticTaskSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeEntry {
    pub method: String,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub router: RouterKind,
}

impl MergeEntry {
    fn new(method: &str, k: Option<usize>) -> Self {
        Self {
            method: method.into(),
            alpha: None,
            k,
            router: RouterKind::Linear,
        }
    }

    pub fn spec(&self, seed: u64) -> Result<MergeSpec> {
        Ok(MergeSpec {
            method: MergeMethod::from_parts(&self.method, self.alpha, self.k)?,
            router: self.router,
            seed,
        })
    }

    /// Static methods listed without `alpha`, which studies sweep over the grid.
    pub fn sweeps_alpha(&self) -> bool {
        self.alpha.is_none() && matches!(self.method.as_str(), "lerp" | "slerp" | "activation_interp")
    }

    /// Row label: method name plus the router kind when it is not linear.
    pub fn label(&self) -> Result<String> {
        if self.sweeps_alpha() {
            return Ok(self.method.clone());
        }
        let m = MergeMethod::from_parts(&self.method, self.alpha, self.k)?;
        Ok(match self.router {
            RouterKind::Linear => m.to_string(),
            RouterKind::Mlp2 => format!("{m}+mlp2"),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Cap on token positions per Gram matrix.
    pub cka_rows: usize,
    /// Validation windows forming the CKA batch.
    pub cka_batch: usize,
    /// Static interpolation grid; the best value is reported.
    pub alpha_grid: Vec<f64>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            cka_rows: 512,
            cka_batch: 16,
            alpha_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub pretrain: PhaseConfig,
    pub finetune: FinetuneConfig,
    pub router: PhaseConfig,
    pub corpora: CorporaConfig,
    /// Merge methods evaluated by `merge-train` and the ladder study; static
    /// methods listed without `alpha` are swept over `analysis.alpha_grid`.
    pub merges: Vec<MergeEntry>,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

fn ladder() -> Vec<MergeEntry> {
    vec![
        MergeEntry::new("lerp", None),
        MergeEntry::new("slerp", None),
        MergeEntry::new("activation_interp", None),
        MergeEntry::new("single_router", None),
        MergeEntry::new("full_router", None),
        MergeEntry::new("full_router_base", None),
        MergeEntry::new("multi_layer", Some(2)),
        MergeEntry::new("multi_layer", Some(3)),
    ]
}

impl ExperimentConfig {
    /// Desk-scale defaults: minutes to an hour on a laptop.
    pub fn default_preset() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            model: ModelConfig {
                n_layers: 4,
                n_heads: 4,
                d_model: 128,
                d_mlp: 512,
                vocab_size: 96,
                context_length: 128,
                seed: 0,
            },
            pretrain: PhaseConfig {
                steps: 20_000,
                batch_size: 16,
                lr: 8e-4,
                beta1: 0.9,
                beta2: 0.95,
                weight_decay: 0.0,
                eval_every: 500,
                eval_batches: 8,
            },
            finetune: FinetuneConfig {
                steps: 5_000,
                batch_size: 16,
                lr: None,
                weight_decay: 0.0,
                schedule: vec![0, 250, 500, 1000, 2000, 3000, 4000, 5000],
                train_layernorm: false,
                datamix: false,
                datamix_ratio: 0.5,
                baseline_policy: BaselinePolicy::All,
                eval_every: 250,
                eval_batches: 8,
            },
            router: PhaseConfig {
                steps: 1_000,
                batch_size: 16,
                lr: 1e-2,
                beta1: 0.9,
                beta2: 0.95,
                weight_decay: 0.0,
                eval_every: 100,
                eval_batches: 8,
            },
            corpora: CorporaConfig {
                pretrain: SyntheticTaskSpec::new(TaskKind::PretrainMix, 2_000_000, 0),
                specialists: vec![
                    SyntheticTaskSpec::new(TaskKind::Math, 400_000, 0),
                    SyntheticTaskSpec::new(TaskKind::Code, 400_000, 0),
                ],
                adaptation: vec![SyntheticTaskSpec::new(TaskKind::Crossdomain, 200_000, 0)],
            },
            merges: ladder(),
            analysis: AnalysisConfig {
                cka_rows: 2048,
                ..AnalysisConfig::default()
            },
        }
    }

    /// Two specialist coding corpora merged for two held-out coding tasks.
    pub fn indomain_preset() -> Self {
        let mut c = Self::default_preset();
        c.output_dir = PathBuf::from("runs/indomain");
        c.corpora.specialists = vec![
            SyntheticTaskSpec::new(TaskKind::IndomainA, 400_000, 0),
            SyntheticTaskSpec::new(TaskKind::IndomainB, 400_000, 0),
        ];
        c.corpora.adaptation = vec![
            SyntheticTaskSpec::new(TaskKind::IndomainAdapt1, 200_000, 0),
            SyntheticTaskSpec::new(TaskKind::IndomainAdapt2, 200_000, 0),
        ];
        c
    }

    /// Budget used by the acceptance suite on a single CPU core.
    pub fn acceptance_preset() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/acceptance"),
            model: ModelConfig {
                n_layers: 4,
                n_heads: 2,
                d_model: 32,
                d_mlp: 128,
                vocab_size: 96,
                context_length: 32,
                seed: 0,
            },
            pretrain: PhaseConfig {
                steps: 1_500,
                batch_size: 8,
                lr: 3e-3,
                beta1: 0.9,
                beta2: 0.95,
                weight_decay: 0.0,
                eval_every: 250,
                eval_batches: 4,
            },
            finetune: FinetuneConfig {
                steps: 700,
                batch_size: 8,
                lr: None,
                weight_decay: 0.0,
                schedule: vec![0, 25, 50, 100, 200, 350, 500, 700],
                train_layernorm: false,
                datamix: false,
                datamix_ratio: 0.5,
                baseline_policy: BaselinePolicy::All,
                eval_every: 100,
                eval_batches: 4,
            },
            router: PhaseConfig {
                steps: 150,
                batch_size: 8,
                lr: 1e-2,
                beta1: 0.9,
                beta2: 0.95,
                weight_decay: 0.0,
                eval_every: 50,
                eval_batches: 6,
            },
            corpora: CorporaConfig {
                pretrain: SyntheticTaskSpec::new(TaskKind::PretrainMix, 200_000, 0),
                specialists: vec![
                    SyntheticTaskSpec::new(TaskKind::Math, 60_000, 0),
                    SyntheticTaskSpec::new(TaskKind::Code, 60_000, 0),
                ],
                adaptation: vec![SyntheticTaskSpec::new(TaskKind::Crossdomain, 40_000, 0)],
            },
            merges: ladder(),
            analysis: AnalysisConfig {
                cka_rows: 256,
                cka_batch: 8,
                alpha_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            },
        }
    }

    /// Seconds-scale configuration for smoke and determinism tests.
    pub fn tiny_preset() -> Self {
        let mut c = Self::acceptance_preset();
        c.output_dir = PathBuf::from("runs/tiny");
        c.model = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_mlp: 16,
            vocab_size: 96,
            context_length: 12,
            seed: 0,
        };
        c.pretrain.steps = 20;
        c.pretrain.eval_every = 10;
        c.pretrain.eval_batches = 1;
        c.finetune.steps = 12;
        c.finetune.schedule = vec![0, 4, 8, 12];
        c.finetune.eval_every = 6;
        c.finetune.eval_batches = 1;
        c.router.steps = 5;
        c.router.eval_every = 5;
        c.router.eval_batches = 1;
        c.pretrain.batch_size = 2;
        c.finetune.batch_size = 2;
        c.router.batch_size = 2;
        c.corpora.pretrain.size_tokens = 4_000;
        for s in c.corpora.specialists.iter_mut().chain(c.corpora.adaptation.iter_mut()) {
            s.size_tokens = 2_000;
        }
        c.analysis.cka_rows = 24;
        c.analysis.cka_batch = 2;
        c.analysis.alpha_grid = vec![0.0, 0.5, 1.0];
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default_preset()),
            "indomain" => Ok(Self::indomain_preset()),
            "acceptance" => Ok(Self::acceptance_preset()),
            "tiny" => Ok(Self::tiny_preset()),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn finetune_lr(&self) -> f64 {
        self.finetune.lr.unwrap_or(self.pretrain.lr / 10.0)
    }

    pub fn finetune_phase(&self) -> PhaseConfig {
        PhaseConfig {
            steps: self.finetune.steps,
            batch_size: self.finetune.batch_size,
            lr: self.finetune_lr(),
            beta1: self.pretrain.beta1,
            beta2: self.pretrain.beta2,
            weight_decay: self.finetune.weight_decay,
            eval_every: self.finetune.eval_every,
            eval_batches: self.finetune.eval_batches,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for (name, p) in [("pretrain", &self.pretrain), ("router", &self.router)] {
            if p.batch_size == 0 || p.eval_batches == 0 || p.eval_every == 0 {
                return Err(Error::Config(format!(
                    "{name}: batch_size, eval_every and eval_batches must be positive"
                )));
            }
            if !(p.lr > 0.0) {
                return Err(Error::Config(format!("{name}: lr must be positive")));
            }
        }
        let f = &self.finetune;
        if f.batch_size == 0 || f.eval_batches == 0 || f.eval_every == 0 || !(self.finetune_lr() > 0.0) {
            return Err(Error::Config(
                "finetune: batch_size, eval_every, eval_batches and lr must be positive".into(),
            ));
        }
        if f.schedule.is_empty() || f.schedule.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "finetune.schedule must be non-empty and strictly increasing".into(),
            ));
        }
        if f.schedule.iter().any(|&s| s > f.steps) {
            return Err(Error::Config(format!(
                "finetune.schedule exceeds finetune.steps = {}",
                f.steps
            )));
        }
        if !(0.0..=1.0).contains(&f.datamix_ratio) {
            return Err(Error::Config("finetune.datamix_ratio must lie in [0, 1]".into()));
        }
        if self.corpora.specialists.len() != 2 {
            return Err(Error::Config(format!(
                "corpora.specialists needs exactly two entries, found {}",
                self.corpora.specialists.len()
            )));
        }
        if self.corpora.adaptation.is_empty() {
            return Err(Error::Config("corpora.adaptation must list at least one task".into()));
        }
        for spec in self.all_specs() {
            spec.validate(self.model.context_length)?;
        }
        for m in &self.merges {
            if !m.sweeps_alpha() {
                m.spec(0)?;
            }
        }
        let a = &self.analysis;
        if a.cka_rows < 2 || a.cka_batch == 0 || a.alpha_grid.is_empty() {
            return Err(Error::Config(
                "analysis: cka_rows >= 2, cka_batch > 0, non-empty alpha_grid".into(),
            ));
        }
        if a.alpha_grid.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::Config("analysis.alpha_grid values must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn all_specs(&self) -> Vec<&SyntheticTaskSpec> {
        std::iter::once(&self.corpora.pretrain)
            .chain(&self.corpora.specialists)
            .chain(&self.corpora.adaptation)
            .collect()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}
