//! Training runs, evaluation, ablation sweeps and run manifests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::association::{LossBreakdown, Mode};
use crate::config::RunConfig;
use crate::datagen::{compose_batch, Attribute, Dataset, Layout, TupleSource};
use crate::diffcore::{checkpoint, Graph, ParamStore, Sgd};
use crate::error::{Error, Result};
use crate::evalkit::{
    attention_heatmap, evaluate_reid, mass_in_region, metrics_csv_row, text_to_image_retrieve, Metrics, METRICS_HEADER,
};
use crate::model::{Model, ModelConfig, PreparedSplit};
use crate::textpipe::{tokenize, Vocab};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const MODEL_FILE: &str = "model.json";
pub const CONFIG_FILE: &str = "config.txt";
pub const LOSSES_FILE: &str = "losses.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCAB_FILE: &str = "vocab.txt";

pub const LOSSES_HEADER: &str = "epoch,step,L_I,L_T,L_dis,L_rec,L_rank,total";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub epoch: usize,
    pub step: usize,
    pub losses: LossBreakdown,
}

impl LossRow {
    pub fn csv(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.step, l.id_image, l.id_text, l.dis, l.rec, l.rank, l.total
        )
    }
}

/// A trained (or freshly initialized) model with its parameters.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub mode: Mode,
}

/// Model dimensions implied by a run configuration and a dataset.
pub fn model_config(cfg: &RunConfig, ds: &Dataset) -> ModelConfig {
    ModelConfig {
        image_size: ds.image_size(),
        vocab_size: ds.vocab.len(),
        identities: ds.num_train_identities(),
        ..cfg.model
    }
}

/// Freshly initialized model. Initialization uses its own RNG stream of the
/// run seed, so it is identical across modes.
pub fn init_model(cfg: &RunConfig, ds: &Dataset) -> Result<Trained> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let model = Model::new(model_config(cfg, ds), &mut store, &mut rng)?;
    Ok(Trained {
        model,
        store,
        mode: cfg.mode,
    })
}

pub fn steps_per_epoch(cfg: &RunConfig, train_tuples: usize) -> usize {
    if cfg.steps_per_epoch > 0 {
        cfg.steps_per_epoch
    } else {
        let per_batch = cfg.batch.persons * cfg.batch.tuples_per_person;
        train_tuples.div_ceil(per_batch).max(1)
    }
}

/// Called after each epoch with the epoch number and current model.
pub type EpochHook<'a> = dyn FnMut(usize, &Trained) -> Result<()> + 'a;

/// Runs SGD over the configured epochs. Loss rows are passed to `on_step`
/// as they are produced. A non-finite loss stops training with an error
/// before the parameters are updated.
pub fn train(
    cfg: &RunConfig,
    ds: &Dataset,
    on_step: &mut dyn FnMut(&LossRow) -> Result<()>,
    on_epoch: &mut EpochHook<'_>,
) -> Result<Trained> {
    cfg.validate()?;
    let mut run = init_model(cfg, ds)?;
    let data = PreparedSplit::<f32>::new(&ds.train, &ds.vocab);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    batch_rng.set_stream(1);
    let sgd = Sgd::new(cfg.momentum);
    let steps = steps_per_epoch(cfg, ds.train.len());
    let mut last_lr = None;

    for epoch in 1..=cfg.epochs {
        let lr = cfg.schedule.lr(epoch);
        if last_lr.is_some_and(|prev| prev != lr) {
            log::info!("epoch {epoch}: learning rate decayed to {lr:e}");
        }
        last_lr = Some(lr);
        let mut epoch_total = 0.0;
        for step in 1..=steps {
            let plan = compose_batch(&data.labels, &cfg.batch, &mut batch_rng)?;
            let mut g = Graph::new();
            let (loss, losses) = run
                .model
                .batch_loss(&mut g, &run.store, &data, &plan, cfg.mode, &cfg.weights)?;
            if !losses.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            g.backward(loss)?;
            run.store.accumulate(&g);
            sgd.step(&mut run.store, lr)?;
            epoch_total += losses.total;
            on_step(&LossRow { epoch, step, losses })?;
        }
        log::info!(
            "{} seed {} epoch {epoch}/{}: mean loss {:.4}",
            cfg.mode,
            cfg.seed,
            cfg.epochs,
            epoch_total / steps as f64
        );
        on_epoch(epoch, &run)?;
    }
    Ok(run)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)?;
    Ok(())
}

/// Trains into `out`: config snapshot, model dimensions, streamed loss CSV
/// and a checkpoint refreshed after every epoch. On a non-finite loss the
/// last completed epoch's checkpoint is left in place.
pub fn train_to_dir(cfg: &RunConfig, ds: &Dataset, out: &Path) -> Result<Trained> {
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_text())?;
    let mcfg = model_config(cfg, ds);
    fs::write(out.join(MODEL_FILE), serde_json::to_string_pretty(&mcfg)?)?;
    fs::write(out.join(VOCAB_FILE), ds.vocab.to_text())?;
    let mut losses = std::io::BufWriter::new(fs::File::create(out.join(LOSSES_FILE))?);
    writeln!(losses, "{LOSSES_HEADER}")?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let result = train(
        cfg,
        ds,
        &mut |row| Ok(writeln!(losses, "{}", row.csv())?),
        &mut |_, run| checkpoint::save(&run.store, &ckpt),
    );
    losses.flush()?;
    result
}

/// Restores a model saved by [`train_to_dir`].
pub fn load_trained(run_dir: &Path) -> Result<Trained> {
    let cfg = RunConfig::load(&run_dir.join(CONFIG_FILE))?;
    let mcfg: ModelConfig = serde_json::from_str(
        &fs::read_to_string(run_dir.join(MODEL_FILE))
            .map_err(|e| Error::Checkpoint(format!("cannot read {MODEL_FILE}: {e}")))?,
    )?;
    let mut store = ParamStore::new();
    let model = Model::new(mcfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
    checkpoint::load(&mut store, &run_dir.join(CHECKPOINT_FILE))?;
    Ok(Trained {
        model,
        store,
        mode: cfg.mode,
    })
}

/// The vocabulary a run was trained with.
pub fn load_run_vocab(run_dir: &Path) -> Result<Vocab> {
    Vocab::load(&run_dir.join(VOCAB_FILE))
}

/// Image-only evaluation on the test split.
pub fn evaluate(run: &Trained, source: &dyn TupleSource) -> Result<Metrics> {
    evaluate_reid(&run.model, &run.store, source)
}

pub fn write_metrics(path: &Path, rows: &[(String, u64, Metrics)]) -> Result<()> {
    let mut s = format!("{METRICS_HEADER}\n");
    for (variant, seed, m) in rows {
        s.push_str(&metrics_csv_row(variant, *seed, m));
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}

/// Inputs and outputs of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: std::collections::BTreeMap<String, String>,
    pub dataset_hash: String,
    pub seed: u64,
    pub mode: Mode,
    pub metrics: Option<Metrics>,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Attention mass of test-set shirt phrases inside the torso rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingReport {
    pub phrases: usize,
    /// Phrases with torso mass at or above the threshold.
    pub grounded: usize,
    pub threshold: f64,
    pub mean_mass: f64,
    /// Torso mass under uniform attention.
    pub chance: f64,
}

impl GroundingReport {
    pub fn fraction(&self) -> f64 {
        if self.phrases == 0 {
            0.0
        } else {
            self.grounded as f64 / self.phrases as f64
        }
    }
}

/// Phrases of `attr` in the query and gallery tuples, with their attention
/// mass inside `rows` (all columns).
pub fn phrase_masses(run: &Trained, ds: &Dataset, attr: Attribute, rows: (usize, usize)) -> Result<Vec<f64>> {
    let bins = run.model.pooled_bin_pixels();
    let size = ds.image_size();
    let mut masses = Vec::new();
    for t in ds.query.iter().chain(&ds.gallery) {
        let image = t.image.to_tensor::<f32>();
        for p in &t.phrases {
            if !p.words().any(|w| w == attr.noun()) {
                continue;
            }
            let words: Vec<&str> = p.words().collect();
            let idx = ds.vocab.encode(&words);
            let (weights, _) = run.model.phrase_attention(&run.store, &image, &idx)?;
            let heat = attention_heatmap(&weights, &bins, size)?;
            masses.push(mass_in_region(&heat.raw, rows, (0, size.1))?);
        }
    }
    Ok(masses)
}

pub fn shirt_grounding(run: &Trained, ds: &Dataset, threshold: f64) -> Result<GroundingReport> {
    let (h, w) = ds.image_size();
    let rows = Layout::new(h, w).torso_rows();
    let masses = phrase_masses(run, ds, Attribute::Shirt, rows)?;
    let bins = run.model.pooled_bin_pixels();
    let uniform = vec![1.0 / bins.len() as f64; bins.len()];
    let chance = mass_in_region(&attention_heatmap(&uniform, &bins, (h, w))?.raw, rows, (0, w))?;
    Ok(GroundingReport {
        phrases: masses.len(),
        grounded: masses.iter().filter(|&&m| m >= threshold).count(),
        threshold,
        mean_mass: masses.iter().sum::<f64>() / masses.len().max(1) as f64,
        chance,
    })
}

/// Description-to-image identity retrieval over the gallery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextRetrievalReport {
    pub queries: usize,
    pub top1: f64,
    /// Expected top-1 of a uniformly random gallery ranking.
    pub chance: f64,
}

/// Every test-set description (query and gallery tuples) ranks the gallery
/// images by relevance score; a hit is a same-identity image at rank 1.
pub fn text_retrieval(run: &Trained, ds: &Dataset) -> Result<TextRetrievalReport> {
    let globals = ds
        .gallery
        .iter()
        .map(|t| run.model.image_global(&run.store, &t.image.to_tensor::<f32>()))
        .collect::<Result<Vec<_>>>()?;
    let mut hits = 0usize;
    let mut chance = 0.0;
    let queries: Vec<_> = ds.query.iter().chain(&ds.gallery).collect();
    for q in &queries {
        let words = ds.vocab.encode(&tokenize(&q.text));
        let ranked = text_to_image_retrieve(&run.model, &run.store, run.mode, &words, &globals)?;
        if ds.gallery[ranked[0].0].label == q.label {
            hits += 1;
        }
        let relevant = ds.gallery.iter().filter(|g| g.label == q.label).count();
        chance += relevant as f64 / ds.gallery.len() as f64;
    }
    let n = queries.len().max(1) as f64;
    Ok(TextRetrievalReport {
        queries: queries.len(),
        top1: hits as f64 / n,
        chance: chance / n,
    })
}

/// Outcome of one configuration in an ablation or sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub variant: String,
    pub seed: u64,
    pub outcome: std::result::Result<Metrics, String>,
    /// The failure, if any, was a non-finite loss or gradient.
    pub numeric_failure: bool,
}

/// Trains and evaluates one configuration in memory.
pub fn train_and_evaluate(cfg: &RunConfig, ds: &Dataset) -> Result<(Trained, Metrics)> {
    let run = train(cfg, ds, &mut |_| Ok(()), &mut |_, _| Ok(()))?;
    let metrics = evaluate(&run, ds)?;
    Ok((run, metrics))
}

fn run_one(cfg: &RunConfig, ds: &Dataset, variant: String, out: Option<&Path>) -> RunResult {
    let start = Instant::now();
    let outcome = match out {
        Some(dir) => train_to_dir(cfg, ds, dir).and_then(|run| evaluate(&run, ds)),
        None => train_and_evaluate(cfg, ds).map(|(_, m)| m),
    };
    let elapsed = start.elapsed().as_secs_f64();
    match &outcome {
        Ok(m) => log::info!("{variant} seed {}: mAP {:.4} top-1 {:.4} ({elapsed:.1}s)", cfg.seed, m.map, m.top1),
        Err(e) => log::error!("{variant} seed {} failed: {e}", cfg.seed),
    }
    RunResult {
        variant,
        seed: cfg.seed,
        numeric_failure: outcome.as_ref().is_err_and(Error::is_numeric),
        outcome: outcome.map_err(|e| e.to_string()),
    }
}

/// Every mode × seed. With `out`, each run is kept in `out/<mode>_s<seed>`.
pub fn ablate(base: &RunConfig, ds: &Dataset, modes: &[Mode], seeds: &[u64], out: Option<&Path>) -> Vec<RunResult> {
    let mut results = Vec::new();
    for &mode in modes {
        for &seed in seeds {
            let cfg = RunConfig { mode, seed, ..base.clone() };
            let dir: Option<PathBuf> = out.map(|o| o.join(format!("{mode}_s{seed}")));
            results.push(run_one(&cfg, ds, mode.to_string(), dir.as_deref()));
        }
    }
    results
}

/// Text identity loss weight sweep in the global association configuration.
pub const LAMBDA_T_SWEEP: [f64; 5] = [0.0, 0.05, 0.1, 0.5, 1.0];

pub fn sweep_lambda_t(base: &RunConfig, ds: &Dataset, values: &[f64], seeds: &[u64]) -> Vec<RunResult> {
    let mut results = Vec::new();
    for &lambda in values {
        for &seed in seeds {
            let mut cfg = RunConfig {
                mode: Mode::Gda,
                seed,
                ..base.clone()
            };
            cfg.weights.lambda_t = lambda;
            results.push(run_one(&cfg, ds, format!("lambda_t={lambda}"), None));
        }
    }
    results
}

/// Mean and sample standard deviation per metric for one variant.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub variant: String,
    pub runs: usize,
    pub failed: usize,
    pub mean: Metrics,
    pub sd: Metrics,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

/// Groups results by variant in first-seen order.
pub fn summarize(results: &[RunResult]) -> Vec<SummaryRow> {
    let mut order: Vec<&str> = Vec::new();
    for r in results {
        if !order.contains(&r.variant.as_str()) {
            order.push(&r.variant);
        }
    }
    order
        .into_iter()
        .map(|variant| {
            let group: Vec<&RunResult> = results.iter().filter(|r| r.variant == variant).collect();
            let ok: Vec<&Metrics> = group.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
            let stat = |f: fn(&Metrics) -> f64| mean_sd(&ok.iter().map(|m| f(m)).collect::<Vec<_>>());
            let (map, map_sd) = stat(|m| m.map);
            let (t1, t1_sd) = stat(|m| m.top1);
            let (t5, t5_sd) = stat(|m| m.top5);
            let (t10, t10_sd) = stat(|m| m.top10);
            SummaryRow {
                variant: variant.to_string(),
                runs: group.len(),
                failed: group.len() - ok.len(),
                mean: Metrics {
                    map,
                    top1: t1,
                    top5: t5,
                    top10: t10,
                    ..Default::default()
                },
                sd: Metrics {
                    map: map_sd,
                    top1: t1_sd,
                    top5: t5_sd,
                    top10: t10_sd,
                    ..Default::default()
                },
            }
        })
        .collect()
}

/// One CSV row per run; failed runs carry `FAILED` in the metric columns.
pub fn raw_results_csv(results: &[RunResult]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in results {
        match &r.outcome {
            Ok(m) => s.push_str(&metrics_csv_row(&r.variant, r.seed, m)),
            Err(_) => s.push_str(&format!("{},{},FAILED,FAILED,FAILED,FAILED", r.variant, r.seed)),
        }
        s.push('\n');
    }
    s
}

/// Percent mean ± sd per variant.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let mut s = format!(
        "{:<14} {:>15} {:>15} {:>15} {:>15}\n",
        "variant", "mAP", "top-1", "top-5", "top-10"
    );
    for r in rows {
        if r.failed > 0 {
            s.push_str(&format!("{:<14} FAILED ({} of {} runs)\n", r.variant, r.failed, r.runs));
            continue;
        }
        let cell = |m: f64, sd: f64| format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * sd);
        s.push_str(&format!(
            "{:<14} {:>15} {:>15} {:>15} {:>15}\n",
            r.variant,
            cell(r.mean.map, r.sd.map),
            cell(r.mean.top1, r.sd.top1),
            cell(r.mean.top5, r.sd.top5),
            cell(r.mean.top10, r.sd.top10)
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_dataset, DataConfig};
    use crate::textpipe::Lexicon;

    fn tiny_cfg(mode: Mode) -> RunConfig {
        let mut cfg = RunConfig {
            mode,
            epochs: 2,
            steps_per_epoch: 2,
            data: DataConfig {
                n_train_ids: 6,
                n_test_ids: 2,
                images_per_id: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        cfg.model.conv_widths = [2, 3, 4];
        cfg.model.d = 4;
        cfg.model.d_out = 4;
        cfg.model.d_e = 3;
        cfg.model.d_h = 3;
        cfg.batch.persons = 3;
        cfg.batch.negs_per_image = 2;
        cfg
    }

    fn tiny_data(cfg: &RunConfig) -> Dataset {
        gen_dataset(&cfg.data, &Lexicon::default()).unwrap()
    }

    #[test]
    fn auto_steps_per_epoch() {
        let cfg = RunConfig::default();
        assert_eq!(steps_per_epoch(&cfg, 256), 16);
        assert_eq!(steps_per_epoch(&cfg, 250), 16);
    }

    #[test]
    fn basel_rows_have_only_image_loss() {
        let cfg = tiny_cfg(Mode::Basel);
        let ds = tiny_data(&cfg);
        let mut rows = Vec::new();
        let mut record = |r: &LossRow| {
            rows.push(*r);
            Ok(())
        };
        train(&cfg, &ds, &mut record, &mut |_, _| Ok(())).unwrap();
        assert_eq!(rows.len(), 4);
        for r in rows {
            assert!(r.losses.id_image > 0.0);
            assert_eq!((r.losses.id_text, r.losses.dis, r.losses.rec, r.losses.rank), (0.0, 0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn run_directory_round_trip_and_determinism() {
        let cfg = tiny_cfg(Mode::Proposed);
        let ds = tiny_data(&cfg);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let run = train_to_dir(&cfg, &ds, a.path()).unwrap();
        train_to_dir(&cfg, &ds, b.path()).unwrap();
        let ca = fs::read(a.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(ca, fs::read(b.path().join(CHECKPOINT_FILE)).unwrap());
        assert_eq!(
            fs::read(a.path().join(LOSSES_FILE)).unwrap(),
            fs::read(b.path().join(LOSSES_FILE)).unwrap()
        );
        let loaded = load_trained(a.path()).unwrap();
        for (x, y) in loaded.store.iter().zip(run.store.iter()) {
            assert_eq!(x.value, y.value);
        }
        assert_eq!(evaluate(&loaded, &ds).unwrap(), evaluate(&run, &ds).unwrap());
    }

    #[test]
    fn non_finite_loss_keeps_last_checkpoint() {
        let mut cfg = tiny_cfg(Mode::Basel);
        cfg.schedule.initial = 1e30;
        cfg.schedule.decayed = 1e30;
        cfg.epochs = 10;
        let ds = tiny_data(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let err = train_to_dir(&cfg, &ds, dir.path()).unwrap_err();
        assert!(
            matches!(err, Error::NonFiniteLoss { .. } | Error::NonFiniteGradient(_)),
            "{err}"
        );
    }

    #[test]
    fn summary_orders_and_flags_failures() {
        let m = |v: f64| Metrics {
            map: v,
            top1: v,
            top5: v,
            top10: v,
            ..Default::default()
        };
        let results = vec![
            RunResult { variant: "basel".into(), seed: 0, outcome: Ok(m(0.4)), numeric_failure: false },
            RunResult { variant: "basel".into(), seed: 1, outcome: Ok(m(0.6)), numeric_failure: false },
            RunResult { variant: "GDA".into(), seed: 0, outcome: Err("boom".into()), numeric_failure: true },
        ];
        let rows = summarize(&results);
        assert_eq!(rows[0].variant, "basel");
        assert!((rows[0].mean.map - 0.5).abs() < 1e-12);
        assert!((rows[0].sd.map - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!(rows[1].failed, 1);
        assert!(summary_table(&rows).contains("FAILED"));
        assert!(raw_results_csv(&results).contains("GDA,0,FAILED"));
    }
}
