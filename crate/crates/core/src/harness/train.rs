//! Corpora, training loops and on-disk artifacts for one seeded run.

use std::path::{Path, PathBuf};

use crate::data::{build_tokenizer, Corpus, Split, SyntheticTaskSpec, Tokenizer};
use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::{BaselinePolicy, ExperimentConfig, MergeEntry, PhaseConfig};
use crate::merge::{build_merged, train_router, CurvePoint, MergeSpec, MergedModel, RouterTrainConfig};
use crate::model::{validation_loss, LanguageModel, TrainPolicy, TransformerModel};
use crate::numerics::{derive_seed, AdamConfig, AdamState, Tape};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: AdamConfig,
    pub eval_every: usize,
    pub eval_batches: usize,
    pub seed: u64,
}

impl TrainSettings {
    pub fn from_phase(p: &PhaseConfig, seed: u64) -> Self {
        Self {
            steps: p.steps,
            batch_size: p.batch_size,
            optim: p.optim(),
            eval_every: p.eval_every,
            eval_batches: p.eval_batches,
            seed,
        }
    }
}

/// Trains the parameters selected by `policy` with AdamW on `corpus`.
///
/// `on_step(step, model)` runs before the first update (step 0) and after
/// every update. The returned curve holds validation CE at step 0, every
/// `eval_every` steps and at the end.
pub fn train(
    model: &mut TransformerModel,
    corpus: &Corpus,
    policy: TrainPolicy,
    s: &TrainSettings,
    mut on_step: impl FnMut(usize, &TransformerModel) -> Result<()>,
) -> Result<Vec<CurvePoint>> {
    let eval = |m: &TransformerModel| validation_loss(m, corpus, s.batch_size, s.eval_batches, s.seed);
    let mut curve = vec![CurvePoint {
        step: 0,
        loss: eval(model)?,
    }];
    on_step(0, model)?;
    if s.steps == 0 {
        return Ok(curve);
    }
    let seq = model.config.context_length;
    let mut opt = AdamState::new(s.optim);
    for (i, b) in corpus
        .batches(Split::Train, s.batch_size, seq, s.seed)?
        .take(s.steps)
        .enumerate()
    {
        let mut tape = Tape::new();
        let fwd = model.forward_tape(&mut tape, &b.tokens, b.batch, policy)?;
        let loss = tape.cross_entropy(fwd.logits, &b.targets)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Diverged(format!("training loss {value} at step {i}")));
        }
        tape.backward(loss)?;
        model.zero_grad();
        model.accumulate_grads(&tape, &fwd.params)?;
        opt.step(&mut model.trainable_mut(policy))?;
        let step = i + 1;
        if step % s.eval_every.max(1) == 0 || step == s.steps {
            curve.push(CurvePoint {
                step,
                loss: eval(model)?,
            });
        }
        on_step(step, model)?;
    }
    model.zero_grad();
    Ok(curve)
}

/// Tokenizer and corpora of one run. Corpus seeds combine the run seed, the
/// corpus role and the seed written in its spec.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub tokenizer: Tokenizer,
    pub pretrain: Corpus,
    pub specialists: Vec<Corpus>,
    pub adaptation: Vec<Corpus>,
}

fn seeded_spec(spec: &SyntheticTaskSpec, run_seed: u64, role: &str) -> SyntheticTaskSpec {
    let mut s = spec.clone();
    s.seed = derive_seed(run_seed, &format!("corpus/{role}/{}", spec.seed));
    s
}

impl Workspace {
    pub fn new(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config.corpora;
        let pretrain = seeded_spec(&c.pretrain, seed, "pretrain");
        let specialists: Vec<_> = c
            .specialists
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut s = seeded_spec(s, seed, &format!("specialist{i}"));
                if config.finetune.datamix {
                    s.pretrain_mix_ratio = config.finetune.datamix_ratio;
                }
                s
            })
            .collect();
        let adaptation: Vec<_> = c
            .adaptation
            .iter()
            .enumerate()
            .map(|(i, s)| seeded_spec(s, seed, &format!("adaptation{i}")))
            .collect();
        let all: Vec<SyntheticTaskSpec> = std::iter::once(pretrain.clone())
            .chain(specialists.iter().cloned())
            .chain(adaptation.iter().cloned())
            .collect();
        let tokenizer = build_tokenizer(&all);
        if tokenizer.vocab_size() > config.model.vocab_size {
            return Err(Error::Config(format!(
                "corpora need {} token ids but model.vocab_size is {}",
                tokenizer.vocab_size(),
                config.model.vocab_size
            )));
        }
        let gen = |s: &SyntheticTaskSpec| Corpus::generate(s, &tokenizer);
        Ok(Self {
            config: config.clone(),
            seed,
            pretrain: gen(&pretrain),
            specialists: specialists.iter().map(gen).collect(),
            adaptation: adaptation.iter().map(gen).collect(),
            tokenizer,
        })
    }

    pub fn adaptation(&self, name: &str) -> Result<&Corpus> {
        self.adaptation
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::Config(format!("no adaptation corpus named {name:?}")))
    }

    /// Validation CE on the shared evaluation windows; every method in a study
    /// is scored on the same windows.
    pub fn eval_loss(&self, model: &impl LanguageModel, corpus: &Corpus) -> Result<f64> {
        let r = &self.config.router;
        validation_loss(model, corpus, r.batch_size, r.eval_batches, self.eval_seed())
    }

    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.seed, "eval")
    }

    pub fn initial_model(&self) -> Result<TransformerModel> {
        let mut cfg = self.config.model;
        cfg.seed = derive_seed(self.seed, "init");
        TransformerModel::new(cfg)
    }

    pub fn router_config(&self) -> RouterTrainConfig {
        let r = &self.config.router;
        RouterTrainConfig {
            steps: r.steps,
            batch_size: r.batch_size,
            optim: r.optim(),
            eval_every: r.eval_every,
            eval_batches: r.eval_batches,
            seed: self.eval_seed(),
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.config.output_dir.join(format!("seed-{}", self.seed))
    }
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub name: String,
    /// `(step, model)` for every entry of the fine-tuning schedule.
    pub checkpoints: Vec<(usize, TransformerModel)>,
    pub curve: Vec<CurvePoint>,
}

impl Trajectory {
    pub fn last(&self) -> &TransformerModel {
        &self.checkpoints.last().expect("schedule is non-empty").1
    }
}

pub fn pretrain(ws: &Workspace) -> Result<(TransformerModel, Vec<CurvePoint>)> {
    let mut model = ws.initial_model()?;
    let s = TrainSettings::from_phase(&ws.config.pretrain, derive_seed(ws.seed, "pretrain"));
    let curve = train(&mut model, &ws.pretrain, TrainPolicy::All, &s, |_, _| Ok(()))?;
    Ok((model, curve))
}

/// MLP-only fine-tuning of `base` on specialist corpus `index`, keeping a
/// copy at each scheduled step.
pub fn finetune(ws: &Workspace, base: &TransformerModel, index: usize) -> Result<Trajectory> {
    let corpus = ws
        .specialists
        .get(index)
        .ok_or_else(|| Error::contract(format!("no specialist corpus {index}")))?;
    let f = &ws.config.finetune;
    let policy = TrainPolicy::mlp_only(f.train_layernorm);
    let s = TrainSettings::from_phase(
        &ws.config.finetune_phase(),
        derive_seed(ws.seed, &format!("finetune/{}", corpus.name)),
    );
    let mut model = base.clone();
    let mut checkpoints = Vec::with_capacity(f.schedule.len());
    let curve = train(&mut model, corpus, policy, &s, |step, m| {
        if f.schedule.contains(&step) {
            checkpoints.push((step, m.clone()));
        }
        Ok(())
    })?;
    Ok(Trajectory {
        name: corpus.name.clone(),
        checkpoints,
        curve,
    })
}

/// Fine-tunes the base directly on an adaptation corpus, the reference that
/// merging is compared against.
pub fn finetune_baseline(
    ws: &Workspace,
    base: &TransformerModel,
    corpus: &Corpus,
) -> Result<(TransformerModel, Vec<CurvePoint>)> {
    let policy = match ws.config.finetune.baseline_policy {
        BaselinePolicy::All => TrainPolicy::All,
        BaselinePolicy::MlpOnly => TrainPolicy::MlpOnly,
    };
    let s = TrainSettings::from_phase(
        &ws.config.finetune_phase(),
        derive_seed(ws.seed, &format!("baseline/{}", corpus.name)),
    );
    let mut model = base.clone();
    let curve = train(&mut model, corpus, policy, &s, |_, _| Ok(()))?;
    Ok((model, curve))
}

/// Builds a merge of the two specialists and trains its routers on `corpus`.
pub fn merge_and_train(
    ws: &Workspace,
    entry: &MergeEntry,
    alpha: Option<f64>,
    specialists: &[TransformerModel],
    base: &TransformerModel,
    corpus: &Corpus,
) -> Result<(MergedModel, Vec<CurvePoint>)> {
    let mut e = entry.clone();
    if alpha.is_some() {
        e.alpha = alpha;
    }
    let spec: MergeSpec = e.spec(derive_seed(ws.seed, &format!("router/{}", e.label()?)))?;
    let mut merged = build_merged(spec, specialists, base)?;
    let curve = if merged.routers.is_empty() {
        vec![CurvePoint {
            step: 0,
            loss: ws.eval_loss(&merged, corpus)?,
        }]
    } else {
        train_router(&mut merged, corpus, &ws.router_config())?
    };
    Ok((merged, curve))
}

/// Base model and both fine-tuning trajectories of one seed.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub base: TransformerModel,
    pub pretrain_curve: Vec<CurvePoint>,
    pub trajectories: Vec<Trajectory>,
}

impl Artifacts {
    pub fn build(ws: &Workspace) -> Result<Self> {
        let (base, pretrain_curve) = pretrain(ws)?;
        let trajectories = (0..ws.specialists.len())
            .map(|i| finetune(ws, &base, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            base,
            pretrain_curve,
            trajectories,
        })
    }

    pub fn specialists(&self) -> Vec<TransformerModel> {
        self.trajectories.iter().map(|t| t.last().clone()).collect()
    }

    /// Specialist pair at schedule position `i`.
    pub fn pair_at(&self, i: usize) -> Result<(usize, Vec<TransformerModel>)> {
        let mut step = None;
        let mut models = Vec::new();
        for t in &self.trajectories {
            let (s, m) = t
                .checkpoints
                .get(i)
                .ok_or_else(|| Error::contract(format!("trajectory {} has no checkpoint {i}", t.name)))?;
            if step.is_some_and(|p| p != *s) {
                return Err(Error::contract("trajectories use different schedules"));
            }
            step = Some(*s);
            models.push(m.clone());
        }
        Ok((step.unwrap_or(0), models))
    }

    pub fn base_path(dir: &Path) -> PathBuf {
        dir.join("base.ckpt")
    }

    pub fn checkpoint_path(dir: &Path, name: &str, step: usize) -> PathBuf {
        dir.join("finetune").join(name).join(format!("step-{step:06}.ckpt"))
    }

    pub fn save_base(&self, dir: &Path) -> Result<()> {
        Checkpoint::from_model(
            &self.base,
            "pretrain",
            self.pretrain_curve.last().map_or(0, |p| p.step) as u64,
        )
        .save(&Self::base_path(dir))
    }

    pub fn save_trajectories(&self, dir: &Path) -> Result<()> {
        for t in &self.trajectories {
            for (step, m) in &t.checkpoints {
                Checkpoint::from_model(m, &format!("finetune/{}", t.name), *step as u64)
                    .save(&Self::checkpoint_path(dir, &t.name, *step))?;
            }
        }
        Ok(())
    }

    pub fn load_base(dir: &Path) -> Result<TransformerModel> {
        Checkpoint::load(&Self::base_path(dir))?.to_model()
    }

    /// Loads the trajectories written by [`Artifacts::save_trajectories`].
    pub fn load(ws: &Workspace, dir: &Path) -> Result<Self> {
        let base = Self::load_base(dir)?;
        let mut trajectories = Vec::new();
        for corpus in &ws.specialists {
            let mut checkpoints = Vec::new();
            for &step in &ws.config.finetune.schedule {
                let path = Self::checkpoint_path(dir, &corpus.name, step);
                if !path.exists() {
                    return Err(Error::contract(format!(
                        "missing fine-tuning checkpoint {}; run finetune first",
                        path.display()
                    )));
                }
                checkpoints.push((step, Checkpoint::load(&path)?.to_model()?));
            }
            trajectories.push(Trajectory {
                name: corpus.name.clone(),
                checkpoints,
                curve: Vec::new(),
            });
        }
        Ok(Self {
            base,
            pretrain_curve: Vec::new(),
            trajectories,
        })
    }

    /// Loads cached artifacts from the run directory, training whatever is missing.
    pub fn load_or_build(ws: &Workspace) -> Result<Self> {
        let dir = ws.run_dir();
        let complete = ws.specialists.iter().all(|c| {
            ws.config
                .finetune
                .schedule
                .iter()
                .all(|&s| Self::checkpoint_path(&dir, &c.name, s).exists())
        });
        if Self::base_path(&dir).exists() && complete {
            return Self::load(ws, &dir);
        }
        let (base, pretrain_curve) = if Self::base_path(&dir).exists() {
            (Self::load_base(&dir)?, Vec::new())
        } else {
            pretrain(ws)?
        };
        let trajectories = (0..ws.specialists.len())
            .map(|i| finetune(ws, &base, i))
            .collect::<Result<Vec<_>>>()?;
        let a = Self {
            base,
            pretrain_curve,
            trajectories,
        };
        a.save_base(&dir)?;
        a.save_trajectories(&dir)?;
        Ok(a)
    }
}
