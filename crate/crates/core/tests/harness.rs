use mergelab::harness::{
    finetune, merge_and_train, pretrain, read_metrics, train, Artifacts, ExperimentConfig, MergeEntry, MetricsLog,
    TrainSettings, Workspace,
};
use mergelab::merge::RouterKind;
use mergelab::model::{cross_entropy_of, validation_loss, TrainPolicy, TransformerModel};
use mergelab::numerics::{seeded, AdamConfig, AdamState, Tape, Tensor};

fn tiny(dir: &std::path::Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::tiny_preset();
    c.output_dir = dir.to_path_buf();
    c
}

#[test]
fn overfits_a_single_batch() {
    let mut cfg = ExperimentConfig::tiny_preset().model;
    cfg.vocab_size = 10;
    cfg.d_model = 16;
    cfg.d_mlp = 32;
    let mut m = TransformerModel::new(cfg).unwrap();
    let tokens: Vec<usize> = (0..24).map(|i| (i * 7 + 3) % 10).collect();
    let targets: Vec<usize> = (0..24).map(|i| (i * 3 + 1) % 10).collect();
    let mut opt = AdamState::new(AdamConfig {
        lr: 1e-2,
        ..AdamConfig::default()
    });
    for _ in 0..300 {
        let mut tape = Tape::new();
        let fwd = m.forward_tape(&mut tape, &tokens, 2, TrainPolicy::All).unwrap();
        let loss = tape.cross_entropy(fwd.logits, &targets).unwrap();
        tape.backward(loss).unwrap();
        m.zero_grad();
        m.accumulate_grads(&tape, &fwd.params).unwrap();
        opt.step(&mut m.trainable_mut(TrainPolicy::All)).unwrap();
    }
    let ce = cross_entropy_of(&m.forward(&tokens, 2).unwrap(), &targets).unwrap();
    assert!(ce < 0.1, "CE after overfitting {ce}");
}

#[test]
fn random_init_predicts_uniformly() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(&tiny(dir.path()), 0).unwrap();
    let m = ws.initial_model().unwrap();
    let v = ws.config.model.vocab_size as f64;
    let ce = validation_loss(&m, &ws.adaptation[0], 4, 4, 0).unwrap();
    assert!((ce - v.ln()).abs() < 0.1, "CE {ce} vs ln V {}", v.ln());
    assert_eq!(ce, validation_loss(&m, &ws.adaptation[0], 4, 4, 0).unwrap());
}

#[test]
fn zero_step_pretraining_is_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(dir.path());
    c.pretrain.steps = 0;
    let ws = Workspace::new(&c, 5).unwrap();
    let (m, curve) = pretrain(&ws).unwrap();
    assert_eq!(m.full_hash(), ws.initial_model().unwrap().full_hash());
    assert_eq!(curve.len(), 1);
}

#[test]
fn training_reduces_loss_and_respects_policy() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(&tiny(dir.path()), 1).unwrap();
    let mut m = ws.initial_model().unwrap();
    let trunk = m.trunk_hash();
    let s = TrainSettings {
        steps: 40,
        batch_size: 4,
        optim: AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        },
        eval_every: 20,
        eval_batches: 2,
        seed: 0,
    };
    let mut seen = Vec::new();
    let curve = train(&mut m, &ws.pretrain, TrainPolicy::MlpOnly, &s, |step, _| {
        seen.push(step);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, (0..=40).collect::<Vec<_>>());
    assert_eq!(curve.iter().map(|p| p.step).collect::<Vec<_>>(), vec![0, 20, 40]);
    assert!(curve[2].loss < curve[0].loss);
    assert_eq!(m.trunk_hash(), trunk);
}

#[test]
fn finetuning_keeps_the_trunk_and_follows_the_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(&tiny(dir.path()), 2).unwrap();
    let (base, _) = pretrain(&ws).unwrap();
    let t = finetune(&ws, &base, 0).unwrap();
    let steps: Vec<usize> = t.checkpoints.iter().map(|c| c.0).collect();
    assert_eq!(steps, ws.config.finetune.schedule);
    assert_eq!(t.checkpoints[0].1.full_hash(), base.full_hash());
    for (_, m) in &t.checkpoints {
        assert_eq!(m.trunk_hash(), base.trunk_hash());
    }
    assert_ne!(t.last().mlp_hash(), base.mlp_hash());
}

#[test]
fn artifacts_are_cached_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(&tiny(dir.path()), 4).unwrap();
    let built = Artifacts::load_or_build(&ws).unwrap();
    let loaded = Artifacts::load_or_build(&ws).unwrap();
    assert_eq!(built.base.full_hash(), loaded.base.full_hash());
    for (a, b) in built.trajectories.iter().zip(&loaded.trajectories) {
        assert_eq!(a.checkpoints.len(), b.checkpoints.len());
        for (x, y) in a.checkpoints.iter().zip(&b.checkpoints) {
            assert_eq!(x.0, y.0);
            assert_eq!(x.1.full_hash(), y.1.full_hash());
        }
    }
    let mut c = ws.config.clone();
    c.finetune.schedule = vec![0, 5, 12];
    let other = Workspace::new(&c, 4).unwrap();
    assert!(Artifacts::load(&other, &other.run_dir()).is_err());
}

#[test]
fn router_prefers_the_useful_expert_over_noise() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(dir.path());
    c.router.steps = 150;
    c.router.lr = 5e-2;
    let ws = Workspace::new(&c, 6).unwrap();
    let (base, _) = pretrain(&ws).unwrap();
    let a = finetune(&ws, &base, 0).unwrap().last().clone();
    let mut b = base.clone();
    b.reinit_mlps(&mut seeded(9, "noise"));
    let mut rng = seeded(10, "noise-scale");
    for block in &mut b.blocks {
        block.mlp.w_out = Tensor::randn(block.mlp.w_out.shape(), 2.0, &mut rng);
        block.mlp.w_in = Tensor::randn(block.mlp.w_in.shape(), 2.0, &mut rng);
    }
    for kind in [RouterKind::Linear, RouterKind::Mlp2] {
        let entry = MergeEntry {
            method: "full_router".into(),
            alpha: None,
            k: None,
            router: kind,
        };
        let corpus = &ws.specialists[0];
        let (merged, curve) = merge_and_train(&ws, &entry, None, &[a.clone(), b.clone()], &base, corpus).unwrap();
        assert!(curve.last().unwrap().loss < curve[0].loss);
        let batch = corpus
            .batches(mergelab::data::Split::Validation, 2, c.model.context_length, 0)
            .unwrap()
            .next()
            .unwrap();
        let weights = merged.routing_weights(&batch.tokens, 2).unwrap();
        let mut total = 0.0;
        let mut count = 0.0;
        for w in weights.into_iter().flatten() {
            for r in 0..w.rows() {
                total += w.row(r)[0];
                count += 1.0;
            }
        }
        let mean = total / count;
        assert!(mean > 0.9, "{kind:?}: mean weight on the useful expert {mean}");
    }
}

#[test]
fn metrics_log_is_parseable_after_each_row() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(&tiny(dir.path()), 7).unwrap();
    let art = Artifacts::build(&ws).unwrap();
    let path = dir.path().join("m.csv");
    let mut log = MetricsLog::create(&path).unwrap();
    let rows = mergelab::harness::ladder_study(&ws, &art, &ws.adaptation[0], &mut log).unwrap();
    let back = read_metrics(&path).unwrap();
    assert_eq!(back.len(), log.rows().len());
    assert!(back.iter().any(|r| r.method == "finetune_base"));
    assert!(rows.entries.iter().all(|e| e.loss.is_finite()));
}
