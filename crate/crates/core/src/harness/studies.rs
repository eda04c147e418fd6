//! Divergence, routing-ladder and layer-similarity studies.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::analysis::{layer_similarity, LayerSimilarityMatrix};
use crate::data::{Corpus, Split};
use crate::error::{Error, Result};
use crate::harness::config::MergeEntry;
use crate::harness::report::{heatmap, line_chart, write_atomic, MetricsLog, MetricsRow, Series};
use crate::harness::train::{finetune_baseline, merge_and_train, Artifacts, Workspace};
use crate::merge::{build_merged, MergeMethod, MergeSpec};
use crate::model::TransformerModel;
use crate::numerics::derive_seed;

/// Token window shared by every CKA measurement on `corpus`.
pub struct CkaBatch {
    pub tokens: Vec<usize>,
    pub batch: usize,
    pub mask: Vec<bool>,
    pub dataset: String,
}

impl CkaBatch {
    pub fn new(ws: &Workspace, corpus: &Corpus) -> Result<Self> {
        let a = &ws.config.analysis;
        let seq = ws.config.model.context_length;
        let b = corpus
            .batches(Split::Validation, a.cka_batch, seq, derive_seed(ws.seed, "cka"))?
            .next()
            .expect("batch stream is infinite");
        Ok(Self {
            mask: b.mask.iter().map(|&m| m > 0.0).collect(),
            tokens: b.tokens,
            batch: b.batch,
            dataset: corpus.name.clone(),
        })
    }

    pub fn similarity(
        &self,
        ws: &Workspace,
        a: &TransformerModel,
        b: &TransformerModel,
    ) -> Result<LayerSimilarityMatrix> {
        layer_similarity(
            a,
            b,
            &self.tokens,
            self.batch,
            Some(&self.mask),
            &self.dataset,
            ws.config.analysis.cka_rows,
            derive_seed(ws.seed, "cka-rows"),
        )
    }

    /// CKA averaged over layers, comparing layer `l` of `a` with layer `l` of `b`.
    pub fn mean_layer_cka(&self, ws: &Workspace, a: &TransformerModel, b: &TransformerModel) -> Result<f64> {
        let m = self.similarity(ws, a, b)?;
        Ok((0..m.rows).map(|i| m.get(i, i)).sum::<f64>() / m.rows as f64)
    }
}

fn row(ws: &Workspace, study: &str, method: &str, loss: f64, started: Instant) -> MetricsRow {
    MetricsRow {
        study: study.to_string(),
        method: method.to_string(),
        ce_loss: loss,
        seconds: started.elapsed().as_secs_f64(),
        seed: ws.seed,
        ..MetricsRow::default()
    }
}

fn static_loss(
    ws: &Workspace,
    method: MergeMethod,
    pair: &[TransformerModel],
    base: &TransformerModel,
    corpus: &Corpus,
) -> Result<f64> {
    let merged = build_merged(MergeSpec::new(method), pair, base)?;
    ws.eval_loss(&merged, corpus)
}

/// Best grid value of a static merge as `(alpha, loss)`; ties keep the first.
fn sweep(
    ws: &Workspace,
    make: impl Fn(f64) -> MergeMethod,
    pair: &[TransformerModel],
    base: &TransformerModel,
    corpus: &Corpus,
) -> Result<(f64, f64)> {
    let mut best = (f64::NAN, f64::INFINITY);
    for &alpha in &ws.config.analysis.alpha_grid {
        let loss = static_loss(ws, make(alpha), pair, base, corpus)?;
        if loss < best.1 {
            best = (alpha, loss);
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DivergencePoint {
    pub step: usize,
    pub cka_adapt: f64,
    pub cka_pretrain: f64,
    /// Activation interpolation at `alpha = 0.5`.
    pub interp_half: f64,
    pub interp_best: f64,
    pub best_alpha: f64,
    pub full_router: f64,
    /// Each specialist's CE on its own validation split.
    pub specialist_losses: Vec<f64>,
}

pub fn divergence_study(
    ws: &Workspace,
    art: &Artifacts,
    corpus: &Corpus,
    log: &mut MetricsLog,
) -> Result<Vec<DivergencePoint>> {
    let study = format!("divergence/{}", corpus.name);
    let adapt = CkaBatch::new(ws, corpus)?;
    let pre = CkaBatch::new(ws, &ws.pretrain)?;
    let full = MergeEntry {
        method: "full_router".into(),
        alpha: None,
        k: None,
        router: Default::default(),
    };
    let n = art.trajectories.first().map_or(0, |t| t.checkpoints.len());
    if n == 0 {
        return Err(Error::contract("divergence study needs fine-tuning trajectories"));
    }
    let mut points = Vec::with_capacity(n);
    for i in 0..n {
        let (step, pair) = art.pair_at(i)?;
        let t0 = Instant::now();
        let cka_adapt = adapt.mean_layer_cka(ws, &pair[0], &pair[1])?;
        let cka_pretrain = pre.mean_layer_cka(ws, &pair[0], &pair[1])?;
        let with_cka = |mut r: MetricsRow, alpha: Option<f64>| {
            r.step = Some(step as u64);
            r.alpha = alpha;
            r.cka_adapt = Some(cka_adapt);
            r.cka_pretrain = Some(cka_pretrain);
            r.divergence = Some(1.0 - cka_adapt);
            r
        };
        let interp_half = static_loss(
            ws,
            MergeMethod::ActivationInterp { alpha: 0.5 },
            &pair,
            &art.base,
            corpus,
        )?;
        log.push(with_cka(
            row(ws, &study, "activation_interp", interp_half, t0),
            Some(0.5),
        ))?;
        let t1 = Instant::now();
        let (best_alpha, interp_best) = sweep(
            ws,
            |alpha| MergeMethod::ActivationInterp { alpha },
            &pair,
            &art.base,
            corpus,
        )?;
        log.push(with_cka(
            row(ws, &study, "activation_interp_best", interp_best, t1),
            Some(best_alpha),
        ))?;
        let t2 = Instant::now();
        let (merged, _) = merge_and_train(ws, &full, None, &pair, &art.base, corpus)?;
        let full_router = ws.eval_loss(&merged, corpus)?;
        log.push(with_cka(row(ws, &study, "full_router", full_router, t2), None))?;
        let mut specialist_losses = Vec::new();
        for (model, c) in pair.iter().zip(&ws.specialists) {
            let t = Instant::now();
            let loss = ws.eval_loss(model, c)?;
            log.push(with_cka(
                row(ws, &study, &format!("specialist/{}", c.name), loss, t),
                None,
            ))?;
            specialist_losses.push(loss);
        }
        points.push(DivergencePoint {
            step,
            cka_adapt,
            cka_pretrain,
            interp_half,
            interp_best,
            best_alpha,
            full_router,
            specialist_losses,
        });
    }
    Ok(points)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LadderEntry {
    pub label: String,
    pub method: String,
    pub alpha: Option<f64>,
    pub k: Option<usize>,
    /// Validation CE after router training (or at the best grid alpha).
    pub loss: f64,
    /// CE of the same merge before any router update.
    pub initial_loss: f64,
    pub trainable_params: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LadderResult {
    pub entries: Vec<LadderEntry>,
    /// Zero-initialized full router, i.e. uniform activation interpolation.
    pub uniform: f64,
    pub base: f64,
    pub specialists: Vec<f64>,
    pub finetuned_base: f64,
}

impl LadderResult {
    pub fn get(&self, label: &str) -> Option<&LadderEntry> {
        self.entries.iter().find(|e| e.label == label)
    }

    /// Lowest CE among the interpolation methods without routers.
    pub fn best_static(&self) -> Option<f64> {
        self.entries
            .iter()
            .filter(|e| e.trainable_params == 0)
            .map(|e| e.loss)
            .min_by(f64::total_cmp)
    }

    pub fn best_merge(&self) -> Option<f64> {
        self.entries.iter().map(|e| e.loss).min_by(f64::total_cmp)
    }
}

pub fn ladder_study(ws: &Workspace, art: &Artifacts, corpus: &Corpus, log: &mut MetricsLog) -> Result<LadderResult> {
    let study = format!("ladder/{}", corpus.name);
    let pair = art.specialists();
    let mut entries = Vec::new();
    for entry in &ws.config.merges {
        let t = Instant::now();
        let label = entry.label()?;
        let (alpha, loss, initial_loss, params) = if entry.sweeps_alpha() {
            let make = |alpha| MergeMethod::from_parts(&entry.method, Some(alpha), None).expect("static method");
            let (alpha, loss) = sweep(ws, make, &pair, &art.base, corpus)?;
            (Some(alpha), loss, loss, 0)
        } else {
            let (merged, curve) = merge_and_train(ws, entry, None, &pair, &art.base, corpus)?;
            let loss = ws.eval_loss(&merged, corpus)?;
            (entry.alpha, loss, curve[0].loss, merged.trainable_param_count())
        };
        let k = MergeMethod::from_parts(&entry.method, alpha.or(entry.alpha), entry.k)?.k();
        let mut r = row(ws, &study, &label, loss, t);
        r.alpha = alpha;
        r.k = k;
        log.push(r)?;
        entries.push(LadderEntry {
            label,
            method: entry.method.clone(),
            alpha,
            k,
            loss,
            initial_loss,
            trainable_params: params,
        });
    }
    let t = Instant::now();
    let uniform_spec = MergeSpec::new(MergeMethod::FullRouter);
    let uniform = ws.eval_loss(&build_merged(uniform_spec, &pair, &art.base)?, corpus)?;
    log.push(row(ws, &study, "uniform", uniform, t))?;
    let t = Instant::now();
    let base = ws.eval_loss(&art.base, corpus)?;
    log.push(row(ws, &study, "base", base, t))?;
    let mut specialists = Vec::new();
    for (m, c) in pair.iter().zip(&ws.specialists) {
        let t = Instant::now();
        let loss = ws.eval_loss(m, corpus)?;
        log.push(row(ws, &study, &format!("specialist/{}", c.name), loss, t))?;
        specialists.push(loss);
    }
    let t = Instant::now();
    let (ft, _) = finetune_baseline(ws, &art.base, corpus)?;
    let finetuned_base = ws.eval_loss(&ft, corpus)?;
    let mut r = row(ws, &study, "finetune_base", finetuned_base, t);
    r.step = Some(ws.config.finetune.steps as u64);
    log.push(r)?;
    Ok(LadderResult {
        entries,
        uniform,
        base,
        specialists,
        finetuned_base,
    })
}

#[derive(Clone, Debug)]
pub struct LayerStudy {
    /// `(name, matrix)` with names like `adapt_intra_a` or `pretrain_inter_ab`.
    pub matrices: Vec<(String, LayerSimilarityMatrix)>,
}

impl LayerStudy {
    pub fn get(&self, name: &str) -> Option<&LayerSimilarityMatrix> {
        self.matrices.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }
}

/// Intra-A, intra-B and inter-AB matrices of the final specialists on the
/// adaptation and pretraining batches; writes CSV and heatmaps into `dir`.
pub fn layer_study(ws: &Workspace, art: &Artifacts, corpus: &Corpus, dir: &Path) -> Result<LayerStudy> {
    let pair = art.specialists();
    let mut matrices = Vec::new();
    for (prefix, c) in [("adapt", corpus), ("pretrain", &ws.pretrain)] {
        let batch = CkaBatch::new(ws, c)?;
        for (name, a, b) in [
            ("intra_a", &pair[0], &pair[0]),
            ("intra_b", &pair[1], &pair[1]),
            ("inter_ab", &pair[0], &pair[1]),
        ] {
            let m = batch.similarity(ws, a, b)?;
            let id = format!("{prefix}_{name}");
            write_atomic(&dir.join(format!("{id}.csv")), m.to_csv().as_bytes())?;
            let title = format!("{name} CKA on {}", c.name);
            write_atomic(
                &dir.join(format!("{id}.svg")),
                heatmap(&title, m.rows, m.cols, &m.values, 0.0, 1.0).as_bytes(),
            )?;
            matrices.push((id, m));
        }
    }
    Ok(LayerStudy { matrices })
}

/// Parses a layer-similarity CSV back into a row-major grid.
pub fn read_similarity_csv(text: &str) -> Result<(usize, usize, Vec<f64>)> {
    let bad = |m: &str| Error::Config(format!("similarity csv: {m}"));
    let mut lines = text.lines().filter(|l| !l.is_empty());
    let header = lines.next().ok_or_else(|| bad("empty"))?;
    let cols = header.split(',').count().saturating_sub(1);
    let mut values = Vec::new();
    let mut rows = 0;
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != cols + 1 {
            return Err(bad("ragged row"));
        }
        for c in &cells[1..] {
            values.push(c.trim().parse::<f64>().map_err(|_| bad("non-numeric cell"))?);
        }
        rows += 1;
    }
    Ok((rows, cols, values))
}

/// SVG charts for a metrics table, as `(file name, document)` pairs.
pub fn plot_metrics(rows: &[MetricsRow]) -> Vec<(String, String)> {
    let mut studies: Vec<&str> = rows.iter().map(|r| r.study.as_str()).collect();
    studies.sort_unstable();
    studies.dedup();
    let mut out = Vec::new();
    for study in studies {
        let rs: Vec<&MetricsRow> = rows.iter().filter(|r| r.study == study).collect();
        let stem = study.replace('/', "_");
        let mut methods: Vec<&str> = rs.iter().map(|r| r.method.as_str()).collect();
        methods.dedup();
        let mut seen = Vec::new();
        methods.retain(|m| {
            let fresh = !seen.contains(m);
            seen.push(*m);
            fresh
        });
        if study.starts_with("divergence") {
            let series = |x: fn(&MetricsRow) -> Option<f64>, merges_only: bool| -> Vec<Series> {
                methods
                    .iter()
                    .filter(|m| !merges_only || !m.starts_with("specialist"))
                    .map(|m| Series {
                        label: m.to_string(),
                        points: rs
                            .iter()
                            .filter(|r| r.method == *m)
                            .filter_map(|r| Some((x(r)?, r.ce_loss)))
                            .collect(),
                    })
                    .collect()
            };
            out.push((
                format!("{stem}_loss_vs_step.svg"),
                line_chart(
                    &format!("{study}: CE over fine-tuning"),
                    "fine-tuning step",
                    "CE loss",
                    &series(|r| r.step.map(|s| s as f64), false),
                    true,
                ),
            ));
            out.push((
                format!("{stem}_loss_vs_cka_adapt.svg"),
                line_chart(
                    &format!("{study}: merging CE vs CKA (adaptation)"),
                    "CKA",
                    "CE loss",
                    &series(|r| r.cka_adapt, true),
                    false,
                ),
            ));
            out.push((
                format!("{stem}_loss_vs_cka_pretrain.svg"),
                line_chart(
                    &format!("{study}: merging CE vs CKA (pretraining)"),
                    "CKA",
                    "CE loss",
                    &series(|r| r.cka_pretrain, true),
                    false,
                ),
            ));
        } else {
            let series: Vec<Series> = methods
                .iter()
                .enumerate()
                .map(|(i, m)| Series {
                    label: m.to_string(),
                    points: rs
                        .iter()
                        .filter(|r| r.method == *m)
                        .map(|r| (i as f64, r.ce_loss))
                        .collect(),
                })
                .collect();
            out.push((
                format!("{stem}.svg"),
                line_chart(
                    &format!("{study}: CE by method"),
                    "method index",
                    "CE loss",
                    &series,
                    false,
                ),
            ));
        }
    }
    out
}

/// Writes every chart of [`plot_metrics`] into `dir`.
pub fn write_plots(rows: &[MetricsRow], dir: &Path) -> Result<Vec<PathBuf>> {
    plot_metrics(rows)
        .into_iter()
        .map(|(name, svg)| {
            let p = dir.join(name);
            write_atomic(&p, svg.as_bytes())?;
            Ok(p)
        })
        .collect()
}
