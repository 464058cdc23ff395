use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use retina_forge::arch::{reference_budget, ArchKind, ArchitectureSpec, Model, BUDGET_TOLERANCE};
use retina_forge::eval::{
    counts_csv, evaluate_maps, format_table, inter_rater_from_maps, metrics_csv, predict_map, EvaluationReport,
    InterRaterReport, MetricsReport, Reference,
};
use retina_forge::gradcheck::{run_suite, GradcheckConfig, GradcheckReport};
use retina_forge::io::{
    archive_size, load_weights, read_rgb, save_weights, write_binary_map,
    write_probability_map, ArchiveMeta,
};
use retina_forge::nn::BackwardFault;
use retina_forge::pipeline::{
    generate_fov_mask, preprocess_dataset, sample_training_patches, split_train_val, GrayImage, Mask, PatchSet,
    PreparedSample,
};
use retina_forge::train::{train, write_history_csv, EpochRecord, TrainObserver};
use retina_forge::{Error, Result};

use crate::cache::{self, Prepared};
use crate::config::RunConfig;

pub const WEIGHTS_FILE: &str = "weights.imiu";
pub const HISTORY_FILE: &str = "history.csv";

/// Progress messages on stderr.
#[derive(Debug, Clone, Copy, Default)]
pub struct Log {
    pub quiet: bool,
}

impl Log {
    pub fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_prepare(c: &RunConfig, log: Log) -> Result<Vec<String>> {
    let dir = c.cache_dir();
    let ids = cache::prepare(c.manifest()?, &c.pipeline, &dir)?;
    c.save(&dir.join("config.json"))?;
    log.say(format!("prepared {} samples into {}", ids.len(), dir.display()));
    Ok(ids)
}

/// Probability and binary PNGs for one map, zeroed outside the FOV.
fn write_maps(dir: &Path, id: &str, map: &GrayImage, fov: &Mask, threshold: f32) -> Result<[PathBuf; 2]> {
    create_dir(dir)?;
    let masked = GrayImage::from_fn(map.width(), map.height(), |x, y| if fov.get(x, y) { map.get(x, y) } else { 0.0 });
    let prob = dir.join(format!("{id}_prob.png"));
    let bin = dir.join(format!("{id}_bin.png"));
    write_probability_map(&masked, &prob)?;
    write_binary_map(&masked, threshold, &bin)?;
    Ok([prob, bin])
}

/// `report.csv`, `counts.csv` and `report.txt` in `dir`; returns the table.
fn write_report(dir: &Path, rows: &[(String, &MetricsReport)]) -> Result<String> {
    create_dir(dir)?;
    let table = format_table(rows);
    write_text(&dir.join("report.csv"), &metrics_csv("image", rows))?;
    write_text(&dir.join("counts.csv"), &counts_csv("image", rows))?;
    write_text(&dir.join("report.txt"), &table)?;
    Ok(table)
}

fn load_model(path: &Path, spec: &ArchitectureSpec) -> Result<Model> {
    Ok(load_weights(path, Some(spec))?.0)
}

struct Progress<'a> {
    log: Log,
    fold: &'a str,
    archive: &'a Path,
    seed: u64,
    archive_bytes: u64,
}

impl TrainObserver for Progress<'_> {
    fn epoch_end(&mut self, r: &EpochRecord, improved: bool) {
        self.log.say(format!(
            "[{}] epoch {:>3}  lr {:.1e}  train {:.5}  val {:.5}{}",
            self.fold,
            r.epoch + 1,
            r.lr,
            r.train_loss,
            r.val_loss,
            if improved { "  *" } else { "" }
        ));
    }

    fn checkpoint(&mut self, model: &Model, r: &EpochRecord) -> Result<()> {
        self.archive_bytes = save_weights(model, ArchiveMeta { seed: self.seed, epoch: r.epoch }, self.archive)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FoldSummary {
    pub name: String,
    pub archive: PathBuf,
    pub archive_bytes: u64,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub folds: Vec<FoldSummary>,
    /// Test images of every fold scored together; `None` when no fold has
    /// test images.
    pub report: Option<EvaluationReport>,
}

fn training_patches(c: &RunConfig, samples: &[&PreparedSample]) -> Result<(PatchSet, PatchSet)> {
    let sets = samples
        .iter()
        .map(|s| {
            sample_training_patches(&s.image, &s.gt1, &s.id, c.pipeline.patches_per_image, c.pipeline.patch_size, c.seed)
        })
        .collect::<Result<Vec<_>>>()?;
    split_train_val(&PatchSet::merge(&sets)?, c.pipeline.val_count())
}

/// Train one model per fold, keep each fold's best-validation weights and
/// score the fold's test images with them.
pub fn cmd_train(c: &RunConfig, log: Log) -> Result<TrainSummary> {
    let data = cache::load(c.manifest()?, &c.pipeline, &c.cache_dir())?;
    create_dir(&c.out)?;
    c.save(&c.out.join("config.json"))?;
    let spec = c.spec();
    let eval = c.eval_config();
    let (mut folds, mut tested, mut maps) = (Vec::new(), Vec::new(), Vec::new());
    for fold in &data.folds {
        let dir = c.out.join(&fold.name);
        create_dir(&dir)?;
        let train_samples: Vec<&PreparedSample> = fold.train.iter().map(|&i| &data.samples[i]).collect();
        let (train_set, val_set) = training_patches(c, &train_samples)?;
        log.say(format!(
            "[{}] {} on {} images: {} training / {} validation patches",
            fold.name,
            c.arch,
            train_samples.len(),
            train_set.len(),
            val_set.len()
        ));
        let mut model = Model::build(&spec, c.seed)?;
        let archive = dir.join(WEIGHTS_FILE);
        let mut progress = Progress { log, fold: &fold.name, archive: &archive, seed: c.seed, archive_bytes: 0 };
        let outcome = train(&mut model, &train_set, &val_set, &c.train, &mut progress)?;
        let archive_bytes = progress.archive_bytes;
        write_history_csv(&dir.join(HISTORY_FILE), &outcome.history)?;
        outcome.restore_best(&mut model);
        for &i in &fold.test {
            let s = &data.samples[i];
            let map = predict_map(&model, &s.image, &eval)?;
            write_maps(&dir.join("maps"), &s.id, &map, &s.fov, c.threshold)?;
            tested.push(s.clone());
            maps.push(map);
        }
        folds.push(FoldSummary {
            name: fold.name.clone(),
            archive,
            archive_bytes,
            best_epoch: outcome.best_epoch,
            best_val_loss: outcome.best_val_loss,
            history: outcome.history,
        });
    }
    let report = if tested.is_empty() {
        None
    } else {
        let report = evaluate_maps(&tested, &maps, Reference::Gt1, c.threshold)?;
        log.say(write_report(&c.out, &report.rows())?);
        Some(report)
    };
    Ok(TrainSummary { folds, report })
}

/// Predict every fold's test images with that fold's archive, or with
/// `weights` for all folds when given.
fn predict_folds(
    c: &RunConfig,
    data: &Prepared,
    weights: Option<&Path>,
    maps_dir: &Path,
) -> Result<(Vec<PreparedSample>, Vec<GrayImage>)> {
    let spec = c.spec();
    let eval = c.eval_config();
    let shared = weights.map(|p| load_model(p, &spec)).transpose()?;
    let (mut tested, mut maps) = (Vec::new(), Vec::new());
    for fold in &data.folds {
        if fold.test.is_empty() {
            continue;
        }
        let own;
        let model = match &shared {
            Some(m) => m,
            None => {
                own = load_model(&c.out.join(&fold.name).join(WEIGHTS_FILE), &spec)?;
                &own
            }
        };
        for &i in &fold.test {
            let s = &data.samples[i];
            let map = predict_map(model, &s.image, &eval)?;
            write_maps(maps_dir, &s.id, &map, &s.fov, c.threshold)?;
            tested.push(s.clone());
            maps.push(map);
        }
    }
    if tested.is_empty() {
        return Err(Error::Config("the manifest's split has no test images".into()));
    }
    Ok((tested, maps))
}

/// Score the test images against the first observer.
pub fn cmd_eval(c: &RunConfig, weights: Option<&Path>, log: Log) -> Result<EvaluationReport> {
    let data = cache::load(c.manifest()?, &c.pipeline, &c.cache_dir())?;
    let dir = c.out.join("eval");
    c.save(&dir.join("config.json"))?;
    let (tested, maps) = predict_folds(c, &data, weights, &dir.join("maps"))?;
    let report = evaluate_maps(&tested, &maps, Reference::Gt1, c.threshold)?;
    log.say(write_report(&dir, &report.rows())?);
    Ok(report)
}

fn required<'a>(weights: Option<&'a Path>, what: &str) -> Result<&'a Path> {
    weights.ok_or_else(|| Error::Config(format!("{what} needs --weights")))
}

/// Score a model trained elsewhere on this manifest's test images.
pub fn cmd_cross_eval(c: &RunConfig, weights: Option<&Path>, log: Log) -> Result<EvaluationReport> {
    let weights = required(weights, "cross-eval")?;
    let data = cache::load(c.manifest()?, &c.pipeline, &c.cache_dir())?;
    let dir = c.out.join("cross-eval");
    c.save(&dir.join("config.json"))?;
    let (tested, maps) = predict_folds(c, &data, Some(weights), &dir.join("maps"))?;
    let report = evaluate_maps(&tested, &maps, Reference::Gt1, c.threshold)?;
    log.say(write_report(&dir, &report.rows())?);
    Ok(report)
}

/// Score the model and the first observer against the second observer.
pub fn cmd_interrater(c: &RunConfig, weights: Option<&Path>, log: Log) -> Result<InterRaterReport> {
    let data = cache::load(c.manifest()?, &c.pipeline, &c.cache_dir())?;
    let dir = c.out.join("interrater");
    c.save(&dir.join("config.json"))?;
    let (tested, maps) = predict_folds(c, &data, weights, &dir.join("maps"))?;
    let report = inter_rater_from_maps(&tested, &maps, c.threshold)?;
    let mut rows = report.model.rows();
    rows.pop();
    rows.push(("model".into(), &report.model.pooled));
    rows.push(("human".into(), &report.human.pooled));
    log.say(write_report(&dir, &rows)?);
    Ok(report)
}

/// Probability and binary maps for raw RGB `inputs`, or for every cached
/// sample of the manifest when `inputs` is empty. Returns the files written.
pub fn cmd_predict(c: &RunConfig, weights: Option<&Path>, inputs: &[PathBuf], log: Log) -> Result<Vec<PathBuf>> {
    let model = load_model(required(weights, "predict")?, &c.spec())?;
    let dir = c.out.join("predict");
    c.save(&dir.join("config.json"))?;
    let eval = c.eval_config();
    let jobs: Vec<(String, GrayImage, Mask)> = if inputs.is_empty() {
        let data = cache::load(c.manifest()?, &c.pipeline, &c.cache_dir())?;
        data.samples.into_iter().map(|s| (s.id, s.image, s.fov)).collect()
    } else {
        c.pipeline.validate()?;
        let rgb = inputs.iter().map(|p| read_rgb(p)).collect::<Result<Vec<_>>>()?;
        let images = preprocess_dataset(&rgb, &c.pipeline)?;
        let mut jobs = Vec::with_capacity(inputs.len());
        for ((path, rgb), image) in inputs.iter().zip(&rgb).zip(images) {
            let id = path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
            jobs.push((id, image, generate_fov_mask(rgb, c.pipeline.fov_threshold)?));
        }
        jobs
    };
    let mut written = Vec::new();
    for (id, image, fov) in &jobs {
        let map = predict_map(&model, image, &eval)?;
        written.extend(write_maps(&dir, id, &map, fov, c.threshold)?);
        log.say(format!("{id}: maps written to {}", dir.display()));
    }
    Ok(written)
}

#[derive(Debug, Clone)]
pub struct ParamRow {
    pub kind: ArchKind,
    pub parameters: usize,
    pub budget: f64,
    pub archive_bytes: usize,
}

impl ParamRow {
    pub fn deviation(&self) -> f64 {
        self.parameters as f64 / self.budget - 1.0
    }

    pub fn within_budget(&self) -> bool {
        self.deviation().abs() <= BUDGET_TOLERANCE
    }
}

#[derive(Debug, Clone)]
pub struct ParamsReport {
    pub rows: Vec<ParamRow>,
    /// Failed checks, empty when everything holds.
    pub failures: Vec<String>,
}

impl ParamsReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<11} {:>11} {:>9} {:>9} {:>13} {:>9}\n",
            "Model", "Parameters", "Budget", "Dev", "Archive (B)", "Size (MB)"
        );
        for r in &self.rows {
            writeln!(
                s,
                "{:<11} {:>11} {:>8.3}M {:>+8.1}% {:>13} {:>9.3}",
                r.kind.title(),
                r.parameters,
                r.budget / 1e6,
                100.0 * r.deviation(),
                r.archive_bytes,
                r.archive_bytes as f64 / 1e6
            )
            .expect("write to string");
        }
        s
    }
}

/// Parameter counts and archive sizes of the four default architectures,
/// checked against the reference budgets.
pub fn cmd_params() -> Result<ParamsReport> {
    let mut rows = Vec::new();
    for kind in [ArchKind::Unet, ArchKind::MiUnet, ArchKind::IterNet, ArchKind::IterMiUnet] {
        let model = Model::build(&ArchitectureSpec::default_for(kind), 0)?;
        rows.push(ParamRow {
            kind,
            parameters: model.count_parameters(),
            budget: reference_budget(kind),
            archive_bytes: archive_size(&model, ArchiveMeta::default()),
        });
    }
    let mut failures: Vec<String> = rows
        .iter()
        .filter(|r| !r.within_budget())
        .map(|r| format!("{} has {} parameters, outside ±15% of {}", r.kind.title(), r.parameters, r.budget))
        .collect();
    let count = |k: ArchKind| rows.iter().find(|r| r.kind == k).map_or(0, |r| r.parameters);
    let order = [ArchKind::MiUnet, ArchKind::IterMiUnet, ArchKind::Unet, ArchKind::IterNet];
    if !order.windows(2).all(|w| count(w[0]) < count(w[1])) {
        failures.push("expected MiUnet < IterMiUnet < Unet < Iternet".into());
    }
    if 50 * count(ArchKind::IterMiUnet) >= count(ArchKind::IterNet) {
        failures.push("IterMiUnet is not under 1/50 of Iternet".into());
    }
    Ok(ParamsReport { rows, failures })
}

/// Run the finite-difference suite. `seed` replaces the default suite seed.
pub fn cmd_gradcheck(seed: Option<u64>, trials: Option<usize>, fault: Option<BackwardFault>) -> Result<GradcheckReport> {
    let mut config = GradcheckConfig { fault, ..GradcheckConfig::default() };
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(t) = trials {
        config.trials = t;
    }
    run_suite(&config)
}
