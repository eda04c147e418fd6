use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mergelab::data::Corpus;
use mergelab::harness::{
    divergence_study, finetune, ladder_study, layer_study, merge_and_train, pretrain, read_metrics,
    read_similarity_csv, write_atomic, write_plots, Artifacts, Checkpoint, CkaBatch, ExperimentConfig, MergeEntry,
    MetricsLog, MetricsRow, Workspace,
};
use mergelab::merge::{CurvePoint, RouterKind};

#[derive(Parser)]
#[command(
    name = "mergelab",
    version,
    about = "Train, merge and compare tiny transformer specialists"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML). Defaults to the built-in `default` preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, u64)> {
        let cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::default_preset(),
        };
        let seed = self.seed.unwrap_or(cfg.seed);
        Ok((cfg, seed))
    }

    fn workspace(&self) -> Result<Workspace> {
        let (cfg, seed) = self.load()?;
        Ok(Workspace::new(&cfg, seed)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the base model and write `base.ckpt`.
    Pretrain(Common),
    /// Fine-tune the MLPs of the base on each specialist corpus.
    Finetune(Common),
    /// Merge the final specialists and train the routers on an adaptation task.
    MergeTrain(MergeArgs),
    /// Validation cross-entropy of a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Layer-by-layer CKA between two checkpoints.
    Cka(CkaArgs),
    /// Run one of the studies and write metrics plus plots.
    Study(StudyArgs),
    /// Re-render SVG charts from a metrics CSV or layer-similarity CSVs.
    Plot(PlotArgs),
    /// Print a built-in config preset as TOML.
    Config {
        #[arg(long, default_value = "default")]
        preset: String,
    },
}

#[derive(Args)]
struct MergeArgs {
    #[command(flatten)]
    common: Common,
    /// lerp, slerp, activation_interp, single_router, full_router, full_router_base or multi_layer.
    #[arg(long)]
    method: String,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum, default_value_t = RouterArg::Linear)]
    router: RouterArg,
    /// Adaptation corpus; defaults to the first one in the config.
    #[arg(long)]
    task: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RouterArg {
    Linear,
    Mlp2,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus name (pretraining, specialist or adaptation); defaults to the first adaptation task.
    #[arg(long)]
    task: Option<String>,
}

#[derive(Args)]
struct CkaArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    task: Option<String>,
    /// Write the matrix CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StudyKind {
    Divergence,
    Ladder,
    Layers,
}

#[derive(Args)]
struct StudyArgs {
    #[arg(value_enum)]
    kind: StudyKind,
    #[command(flatten)]
    common: Common,
    /// Adaptation corpus; defaults to every one in the config.
    #[arg(long)]
    task: Option<String>,
}

#[derive(Args)]
struct PlotArgs {
    #[command(flatten)]
    common: Common,
    /// Metrics CSV to chart.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Directory of layer-similarity CSVs to render as heatmaps.
    #[arg(long)]
    layers: Option<PathBuf>,
    /// Output directory; defaults to the input's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Pretrain(c) => cmd_pretrain(&c),
        Command::Finetune(c) => cmd_finetune(&c),
        Command::MergeTrain(a) => cmd_merge(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Cka(a) => cmd_cka(&a),
        Command::Study(a) => cmd_study(&a),
        Command::Plot(a) => cmd_plot(&a),
        Command::Config { preset } => {
            print!("{}", ExperimentConfig::preset(&preset)?.to_toml());
            Ok(())
        }
    }
}

fn curve_rows(study: &str, method: &str, curve: &[CurvePoint], seed: u64, seconds: f64) -> Vec<MetricsRow> {
    curve
        .iter()
        .map(|p| MetricsRow {
            study: study.into(),
            method: method.into(),
            step: Some(p.step as u64),
            ce_loss: p.loss,
            seconds,
            seed,
            ..MetricsRow::default()
        })
        .collect()
}

fn write_rows(path: &Path, rows: Vec<MetricsRow>) -> Result<()> {
    let mut log = MetricsLog::create(path)?;
    for r in rows {
        log.push(r)?;
    }
    Ok(())
}

fn cmd_pretrain(c: &Common) -> Result<()> {
    let ws = c.workspace()?;
    let dir = ws.run_dir();
    let t = Instant::now();
    let (base, curve) = pretrain(&ws)?;
    let last = curve.last().expect("curve has step 0");
    Checkpoint::from_model(&base, "pretrain", last.step as u64).save(&Artifacts::base_path(&dir))?;
    write_rows(
        &dir.join("pretrain").join("metrics.csv"),
        curve_rows("pretrain", "pretrain", &curve, ws.seed, t.elapsed().as_secs_f64()),
    )?;
    println!("pretrain: {} steps, validation CE {:.4}", last.step, last.loss);
    println!("wrote {}", Artifacts::base_path(&dir).display());
    Ok(())
}

fn cmd_finetune(c: &Common) -> Result<()> {
    let ws = c.workspace()?;
    let dir = ws.run_dir();
    let base = Artifacts::load_base(&dir).context("base checkpoint missing; run `pretrain` first")?;
    let mut rows = Vec::new();
    for i in 0..ws.specialists.len() {
        let t = Instant::now();
        let traj = finetune(&ws, &base, i)?;
        for (step, m) in &traj.checkpoints {
            Checkpoint::from_model(m, &format!("finetune/{}", traj.name), *step as u64)
                .save(&Artifacts::checkpoint_path(&dir, &traj.name, *step))?;
        }
        let last = traj.curve.last().expect("curve has step 0");
        println!(
            "finetune/{}: validation CE {:.4} after {} steps",
            traj.name, last.loss, last.step
        );
        rows.extend(curve_rows(
            "finetune",
            &traj.name,
            &traj.curve,
            ws.seed,
            t.elapsed().as_secs_f64(),
        ));
    }
    write_rows(&dir.join("finetune").join("metrics.csv"), rows)?;
    Ok(())
}

fn corpus<'a>(ws: &'a Workspace, task: Option<&str>) -> Result<&'a Corpus> {
    let Some(name) = task else {
        return Ok(&ws.adaptation[0]);
    };
    std::iter::once(&ws.pretrain)
        .chain(&ws.specialists)
        .chain(&ws.adaptation)
        .find(|c| c.name == name)
        .with_context(|| format!("no corpus named {name:?} in this config"))
}

fn file_hashes(ws: &Workspace, dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for c in &ws.specialists {
        for &s in &ws.config.finetune.schedule {
            out.push(Checkpoint::load(&Artifacts::checkpoint_path(dir, &c.name, s))?.content_hash());
        }
    }
    Ok(out)
}

fn cmd_merge(a: &MergeArgs) -> Result<()> {
    let ws = a.common.workspace()?;
    let dir = ws.run_dir();
    let art = Artifacts::load(&ws, &dir)?;
    let corpus = corpus(&ws, a.task.as_deref())?;
    let entry = MergeEntry {
        method: a.method.clone(),
        alpha: a.alpha,
        k: a.k,
        router: match a.router {
            RouterArg::Linear => RouterKind::Linear,
            RouterArg::Mlp2 => RouterKind::Mlp2,
        },
    };
    let label = entry.label()?;
    let before = file_hashes(&ws, &dir)?;
    let specialists = art.specialists();
    let memory: Vec<String> = specialists.iter().map(|m| m.full_hash()).collect();
    let t = Instant::now();
    let (merged, curve) = merge_and_train(&ws, &entry, None, &specialists, &art.base, corpus)?;
    let loss = ws.eval_loss(&merged, corpus)?;
    if file_hashes(&ws, &dir)? != before || specialists.iter().map(|m| m.full_hash()).collect::<Vec<_>>() != memory {
        bail!("specialist checkpoints changed during router training");
    }
    let study = format!("merge-train/{}", corpus.name);
    let mut rows = curve_rows(&study, &label, &curve, ws.seed, t.elapsed().as_secs_f64());
    for r in &mut rows {
        r.alpha = entry.alpha;
        r.k = merged.spec.method.k();
    }
    let path = dir
        .join("merge-train")
        .join(format!("{}-{}.csv", corpus.name, label.replace('+', "-")));
    write_rows(&path, rows)?;
    println!(
        "{label} on {}: CE {:.4} ({} trainable router parameters)",
        corpus.name,
        loss,
        merged.trainable_param_count()
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ws = a.common.workspace()?;
    let model = Checkpoint::load(&a.checkpoint)?.to_model()?;
    let corpus = corpus(&ws, a.task.as_deref())?;
    println!("{:.6}", ws.eval_loss(&model, corpus)?);
    Ok(())
}

fn cmd_cka(a: &CkaArgs) -> Result<()> {
    let ws = a.common.workspace()?;
    let ma = Checkpoint::load(&a.a)?.to_model()?;
    let mb = Checkpoint::load(&a.b)?.to_model()?;
    let corpus = corpus(&ws, a.task.as_deref())?;
    let m = CkaBatch::new(&ws, corpus)?.similarity(&ws, &ma, &mb)?;
    match &a.out {
        Some(p) => {
            write_atomic(p, m.to_csv().as_bytes())?;
            println!("wrote {}", p.display());
        }
        None => print!("{}", m.to_csv()),
    }
    Ok(())
}

fn cmd_study(a: &StudyArgs) -> Result<()> {
    let ws = a.common.workspace()?;
    let art = Artifacts::load_or_build(&ws)?;
    let tasks: Vec<&Corpus> = match &a.task {
        Some(name) => vec![ws.adaptation(name)?],
        None => ws.adaptation.iter().collect(),
    };
    let name = match a.kind {
        StudyKind::Divergence => "divergence",
        StudyKind::Ladder => "ladder",
        StudyKind::Layers => "layers",
    };
    let dir = ws.run_dir().join(name);
    if let StudyKind::Layers = a.kind {
        for c in tasks {
            let out = dir.join(&c.name);
            let s = layer_study(&ws, &art, c, &out)?;
            for (id, m) in &s.matrices {
                let (near, far) = m.band_means();
                println!("{}/{id}: adjacent {near:.3}, distant {far:.3}", c.name);
            }
            println!("wrote {}", out.display());
        }
        return Ok(());
    }
    let path = dir.join("metrics.csv");
    let mut log = MetricsLog::create(&path)?;
    for c in tasks {
        match a.kind {
            StudyKind::Divergence => {
                for p in divergence_study(&ws, &art, c, &mut log)? {
                    println!(
                        "{}: step {:>6} cka {:.3}/{:.3} interp {:.4} best {:.4} full_router {:.4}",
                        c.name, p.step, p.cka_adapt, p.cka_pretrain, p.interp_half, p.interp_best, p.full_router
                    );
                }
            }
            StudyKind::Ladder => {
                let r = ladder_study(&ws, &art, c, &mut log)?;
                for e in &r.entries {
                    println!(
                        "{}: {:<24} {:.4} ({} params)",
                        c.name, e.label, e.loss, e.trainable_params
                    );
                }
                println!("{}: {:<24} {:.4}", c.name, "finetune_base", r.finetuned_base);
            }
            StudyKind::Layers => unreachable!(),
        }
    }
    let plots = write_plots(log.rows(), &dir)?;
    println!("wrote {} and {} charts", path.display(), plots.len());
    Ok(())
}

fn cmd_plot(a: &PlotArgs) -> Result<()> {
    let (cfg, seed) = a.common.load()?;
    let run_dir = cfg.output_dir.join(format!("seed-{seed}"));
    if a.metrics.is_none() && a.layers.is_none() {
        bail!(
            "nothing to plot: pass --metrics and/or --layers (runs live under {})",
            run_dir.display()
        );
    }
    if let Some(p) = &a.metrics {
        let rows = read_metrics(p)?;
        let out = a
            .out
            .clone()
            .unwrap_or_else(|| p.parent().unwrap_or(Path::new(".")).to_path_buf());
        for f in write_plots(&rows, &out)? {
            println!("wrote {}", f.display());
        }
    }
    if let Some(d) = &a.layers {
        let out = a.out.clone().unwrap_or_else(|| d.clone());
        let mut entries: Vec<PathBuf> = std::fs::read_dir(d)
            .with_context(|| format!("reading {}", d.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        entries.sort();
        for p in entries {
            let text = std::fs::read_to_string(&p)?;
            let (rows, cols, values) = read_similarity_csv(&text)?;
            let stem = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let svg = mergelab::harness::heatmap(&stem, rows, cols, &values, 0.0, 1.0);
            let f = out.join(format!("{stem}.svg"));
            write_atomic(&f, svg.as_bytes())?;
            println!("wrote {}", f.display());
        }
    }
    Ok(())
}
