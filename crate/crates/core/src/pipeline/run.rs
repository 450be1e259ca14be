//! File-backed stages of a run and the end-to-end driver.
//!
//! Every stage reads its inputs from and writes its outputs to the run
//! directory, so stages can be invoked one at a time:
//!
//! ```text
//! config.txt             resolved configuration
//! split.csv              patient_id,label,partition,fold
//! prep/<id>.gmgv         preprocessed volume (and <id>_mask.gmgv)
//! extractor.gmgm         extractor checkpoint
//! extractor_trace.csv    epoch,loss,val_accuracy
//! heatmaps/<id>.gmgv     Grad-CAM heat on the input grid
//! voi/<id>.gmgv          extracted VOI
//! voi_boxes.csv          patient_id,label,status,x0,x1,y0,y1,z0,z1,probability
//! slices/<id>/*.pgm      CT / heat / overlay slices
//! classifiers/*.gmgm     fold<k>_gmgenet and fold<k>_densenet checkpoints
//! predictions.csv        fold,model,patient_id,label,score
//! report.txt             metrics tables, t-test, localization
//! roc.csv, roc_full.csv  threshold,fpr,tpr for the VOI and full-volume models
//! run.log                stage timings; the only file with wall-clock data
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::ctprep::{preprocess, preprocess_mask, CtVolume, Orientation};
use crate::dataio::{
    export_heatmap_slices, load_manifest, SliceExport, read_grid, read_volume, write_grid, write_volume, Manifest, ManifestEntry,
};
use crate::densenet::{build_model, Model};
use crate::error::{Error, Result};
use crate::gradcam::{extract_voi, grad_cam, refine_mask, Heatmap, VoiBox};
use crate::phantom;
use crate::pipeline::localization::{localization_eval, LocalizationReport, LocalizationSample};
use crate::pipeline::metrics::{confusion_metrics, roc_auc, threshold_predictions, to_f64, Confusion, RocPoint};
use crate::pipeline::optim::AdadeltaState;
use crate::pipeline::split::{make_split, SplitPlan};
use crate::pipeline::stats::{mean_sd, paired_t_test, TTest};
use crate::pipeline::train::{accuracy_at, predict_all, train, TrainConfig};
use crate::tensor::Tensor;
use crate::volume::Grid3;

pub const VOI_MODEL: &str = "GMGENet";
pub const FULL_MODEL: &str = "DenseNet";

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.txt")
    }
    pub fn split(&self) -> PathBuf {
        self.root.join("split.csv")
    }
    pub fn prep_volume(&self, id: &str) -> PathBuf {
        self.root.join("prep").join(format!("{id}.gmgv"))
    }
    pub fn prep_mask(&self, id: &str) -> PathBuf {
        self.root.join("prep").join(format!("{id}_mask.gmgv"))
    }
    pub fn extractor(&self) -> PathBuf {
        self.root.join("extractor.gmgm")
    }
    pub fn extractor_trace(&self) -> PathBuf {
        self.root.join("extractor_trace.csv")
    }
    pub fn heatmap(&self, id: &str) -> PathBuf {
        self.root.join("heatmaps").join(format!("{id}.gmgv"))
    }
    pub fn voi(&self, id: &str) -> PathBuf {
        self.root.join("voi").join(format!("{id}.gmgv"))
    }
    pub fn voi_boxes(&self) -> PathBuf {
        self.root.join("voi_boxes.csv")
    }
    pub fn slices(&self, id: &str) -> PathBuf {
        self.root.join("slices").join(id)
    }
    pub fn classifier(&self, fold: usize, model: &str) -> PathBuf {
        self.root
            .join("classifiers")
            .join(format!("fold{}_{}.gmgm", fold + 1, model.to_ascii_lowercase()))
    }
    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions.csv")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.txt")
    }
    pub fn roc(&self, model: &str) -> PathBuf {
        self.root
            .join(if model == VOI_MODEL { "roc.csv" } else { "roc_full.csv" })
    }
    pub fn log(&self) -> PathBuf {
        self.root.join("run.log")
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn csv_rows(path: &Path) -> Result<Vec<csv::StringRecord>> {
    let text = read_text(path)?;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    reader
        .records()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| Error::Parse {
                offset: i + 1,
                reason: format!("{}: {e}", path.display()),
            })
        })
        .collect()
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, path: &Path) -> Result<T> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Validation(format!("{}: bad column {i} in {:?}", path.display(), rec)))
}

/// Appends timing lines to `run.log` and mirrors them to the `log` facade.
pub struct RunLog {
    path: PathBuf,
}

impl RunLog {
    pub fn open(dir: &RunDir) -> Result<Self> {
        ensure_parent(&dir.log())?;
        Ok(RunLog { path: dir.log() })
    }

    pub fn line(&self, msg: &str) {
        log::info!("{msg}");
        if let Ok(mut f) = std::fs::OpenOptions::new().create(true).append(true).open(&self.path) {
            let _ = writeln!(f, "{msg}");
        }
    }

    pub fn stage<R>(&self, name: &str, f: impl FnOnce() -> Result<R>) -> Result<R> {
        self.line(&format!("stage {name} started"));
        let t = Instant::now();
        let r = f();
        match &r {
            Ok(_) => self.line(&format!("stage {name} finished in {:.1}s", t.elapsed().as_secs_f64())),
            Err(e) => self.line(&format!("stage {name} failed after {:.1}s: {e}", t.elapsed().as_secs_f64())),
        }
        r
    }
}

/// Writes `config.txt` and returns the run directory.
pub fn init_run(cfg: &RunConfig) -> Result<RunDir> {
    let dir = RunDir::new(&cfg.run_dir);
    std::fs::create_dir_all(&dir.root).map_err(|e| Error::io(&dir.root, e))?;
    write_text(&dir.config(), &cfg.to_text())?;
    Ok(dir)
}

/// Generates the phantom set into `data_dir`.
pub fn synth(cfg: &RunConfig) -> Result<Manifest> {
    phantom::generate(&cfg.phantom_spec(), cfg.phantom_per_class, &cfg.data_dir)
}

fn raw_volume(entry: &ManifestEntry) -> Result<CtVolume> {
    let mut v = read_volume(&entry.volume_path)?;
    if let Some(l) = entry.landmarks {
        v.orientation = if l.nose_slice < l.acromion_slice {
            Orientation::HeadFirst
        } else {
            Orientation::FeetFirst
        };
        v.landmarks = Some(l);
        v.validate()?;
    }
    Ok(v)
}

/// Preprocesses every manifest volume (and mask) into `prep/`.
pub fn preprocess_all(cfg: &RunConfig, manifest: &Manifest, dir: &RunDir) -> Result<()> {
    let p = cfg.prep_params();
    manifest.entries.par_iter().try_for_each(|e| -> Result<()> {
        let raw = raw_volume(e)?;
        let prep = preprocess(&raw, &p)?;
        let out = dir.prep_volume(&e.patient_id);
        ensure_parent(&out)?;
        write_volume(&prep, &out)?;
        if let Some(mp) = &e.mask_path {
            let mask = read_grid(mp)?;
            let m = preprocess_mask(&mask, &raw, &p)?;
            write_grid(&m, prep.spacing, &dir.prep_mask(&e.patient_id))?;
        }
        Ok(())
    })
}

/// Makes the split plan and writes `split.csv`.
pub fn split_stage(cfg: &RunConfig, manifest: &Manifest, dir: &RunDir) -> Result<SplitPlan> {
    let ids = manifest.ids();
    let plan = make_split(&ids, &manifest.labels(), cfg.seed, cfg.extractor_n, cfg.test_frac, cfg.folds)?;
    let mut out = String::from("patient_id,label,partition,fold\n");
    for e in &manifest.entries {
        let id = &e.patient_id;
        let (part, fold) = if plan.extractor_ids.contains(id) {
            ("extractor", String::new())
        } else if plan.test_ids.contains(id) {
            ("test", String::new())
        } else {
            let k = plan.folds.iter().position(|f| f.contains(id)).expect("verified plan");
            ("train", (k + 1).to_string())
        };
        writeln!(out, "{id},{},{part},{fold}", e.label).expect("string write");
    }
    write_text(&dir.split(), &out)?;
    Ok(plan)
}

/// Reads `split.csv` back into a plan.
pub fn read_split(cfg: &RunConfig, manifest: &Manifest, dir: &RunDir) -> Result<SplitPlan> {
    let path = dir.split();
    let mut plan = SplitPlan {
        seed: cfg.seed,
        extractor_ids: Vec::new(),
        train_ids: Vec::new(),
        test_ids: Vec::new(),
        folds: vec![Vec::new(); cfg.folds],
    };
    for rec in csv_rows(&path)? {
        let id = rec.get(0).unwrap_or("").to_string();
        match rec.get(2).unwrap_or("") {
            "extractor" => plan.extractor_ids.push(id),
            "test" => plan.test_ids.push(id),
            "train" => {
                let k: usize = field(&rec, 3, &path)?;
                plan.folds
                    .get_mut(k.wrapping_sub(1))
                    .ok_or_else(|| Error::Validation(format!("{}: fold {k} out of range", path.display())))?
                    .push(id.clone());
                plan.train_ids.push(id);
            }
            other => return Err(Error::Validation(format!("{}: partition {other:?}", path.display()))),
        }
    }
    plan.verify(&manifest.ids())?;
    Ok(plan)
}

fn load_inputs(ids: &[String], path: impl Fn(&str) -> PathBuf + Sync) -> Result<Vec<Tensor<f32>>> {
    ids.par_iter().map(|id| Ok(read_grid(&path(id))?.to_tensor())).collect()
}

fn labels_of(manifest: &Manifest, ids: &[String]) -> Result<Vec<u8>> {
    ids.iter()
        .map(|id| {
            manifest
                .get(id)
                .map(|e| e.label)
                .ok_or_else(|| Error::Validation(format!("{id} is not in the manifest")))
        })
        .collect()
}

fn train_config(cfg: &RunConfig, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: cfg.batch_size,
        seed,
        recalibrate_bn: cfg.recalibrate_bn,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorSummary {
    pub loss: Vec<f64>,
    /// Accuracy on every non-extractor patient after each epoch.
    pub val_accuracy: Vec<f64>,
}

impl ExtractorSummary {
    pub fn final_accuracy(&self) -> f64 {
        self.val_accuracy.last().copied().unwrap_or(0.0)
    }

    /// First epoch (1-based) reaching `target`.
    pub fn first_epoch_reaching(&self, target: f64) -> Option<usize> {
        self.val_accuracy.iter().position(|&a| a >= target).map(|i| i + 1)
    }
}

/// Trains the extractor on the extractor set's full volumes, recording the
/// validation accuracy on the remaining patients after every epoch.
pub fn train_extractor(cfg: &RunConfig, manifest: &Manifest, plan: &SplitPlan, dir: &RunDir) -> Result<ExtractorSummary> {
    let xs = load_inputs(&plan.extractor_ids, |id| dir.prep_volume(id))?;
    let ys = labels_of(manifest, &plan.extractor_ids)?;
    let pool = plan.pool_ids();
    let vx = load_inputs(&pool, |id| dir.prep_volume(id))?;
    let vy = labels_of(manifest, &pool)?;
    let mut model = build_model::<f32>(&cfg.extractor_model())?;
    let mut state = AdadeltaState::for_params(model.params(), cfg.adadelta_rho, cfg.adadelta_eps)?;
    let mut val = Vec::with_capacity(cfg.extractor_epochs);
    let loss = train(
        &mut model,
        &xs,
        &ys,
        &train_config(cfg, cfg.extractor_epochs, cfg.seed),
        &mut state,
        |epoch, loss, m| {
            let acc = accuracy_at(&predict_all(m, &vx, cfg.batch_size)?, &vy, cfg.threshold);
            log::info!("extractor epoch {} loss {loss:.4} validation accuracy {acc:.4}", epoch + 1);
            val.push(acc);
            Ok(())
        },
    )?;
    model.save(&dir.extractor())?;
    let mut trace = String::from("epoch,loss,val_accuracy\n");
    for (i, (l, a)) in loss.iter().zip(&val).enumerate() {
        writeln!(trace, "{},{l:.6},{a:.6}", i + 1).expect("string write");
    }
    write_text(&dir.extractor_trace(), &trace)?;
    Ok(ExtractorSummary {
        loss,
        val_accuracy: val,
    })
}

pub fn read_extractor_trace(dir: &RunDir) -> Result<ExtractorSummary> {
    let path = dir.extractor_trace();
    let mut s = ExtractorSummary {
        loss: Vec::new(),
        val_accuracy: Vec::new(),
    };
    for rec in csv_rows(&path)? {
        s.loss.push(field(&rec, 1, &path)?);
        s.val_accuracy.push(field(&rec, 2, &path)?);
    }
    Ok(s)
}

/// Outcome of Grad-CAM extraction for one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub patient_id: String,
    pub label: u8,
    /// `None` when the heatmap carried no signal.
    pub voi: Option<VoiBox>,
    pub probability: f64,
}

/// Heatmap of `model` for one preprocessed volume, restricted to the body.
pub fn body_heatmap(model: &Model<f32>, volume: &Grid3<f32>, body_floor: f32) -> Result<(Heatmap<f32>, f64)> {
    let [w, h, d] = volume.dims();
    let input = volume.to_tensor::<f32>().reshape(&[1, 1, d, h, w])?;
    let cam = grad_cam(model, &input)?;
    Ok((refine_mask(&cam.heatmap, volume, body_floor)?, cam.probability as f64))
}

/// Grad-CAM VOI extraction for every non-extractor patient.
pub fn extract_all(cfg: &RunConfig, manifest: &Manifest, plan: &SplitPlan, dir: &RunDir) -> Result<Vec<Extraction>> {
    let model = Model::<f32>::load(&dir.extractor())?;
    let pool = plan.pool_ids();
    let labels = labels_of(manifest, &pool)?;
    let voi_params = cfg.voi_params();
    let results: Vec<Extraction> = pool
        .par_iter()
        .zip(&labels)
        .map(|(id, &label)| -> Result<Extraction> {
            let prep = read_volume(&dir.prep_volume(id))?;
            let (heat, probability) = body_heatmap(&model, &prep.voxels, cfg.body_floor)?;
            let hp = dir.heatmap(id);
            ensure_parent(&hp)?;
            write_grid(&heat.values, prep.spacing, &hp)?;
            let voi = match extract_voi(&heat, &prep.voxels, cfg.voi_extent.0, &voi_params) {
                Ok((b, crop)) => {
                    let vp = dir.voi(id);
                    ensure_parent(&vp)?;
                    write_grid(&crop, prep.spacing, &vp)?;
                    Some(b)
                }
                Err(Error::NoSignal { .. }) => None,
                Err(e) => return Err(e),
            };
            Ok(Extraction {
                patient_id: id.clone(),
                label,
                voi,
                probability,
            })
        })
        .collect::<Result<_>>()?;

    let mut out = String::from("patient_id,label,status,x0,x1,y0,y1,z0,z1,probability\n");
    for r in &results {
        match &r.voi {
            Some(b) => writeln!(
                out,
                "{},{},ok,{},{},{},{},{},{},{:.6}",
                r.patient_id, r.label, b.x0, b.x1, b.y0, b.y1, b.z0, b.z1, r.probability
            ),
            None => writeln!(out, "{},{},no_signal,,,,,,,{:.6}", r.patient_id, r.label, r.probability),
        }
        .expect("string write");
    }
    write_text(&dir.voi_boxes(), &out)?;

    for r in results.iter().take(cfg.export_patients) {
        let prep = read_volume(&dir.prep_volume(&r.patient_id))?;
        let heat = read_grid(&dir.heatmap(&r.patient_id))?;
        export_heatmap_slices(&heat, &prep.voxels, &dir.slices(&r.patient_id), cfg.export_stride, r.voi.as_ref())?;
    }
    Ok(results)
}

pub fn read_extractions(cfg: &RunConfig, dir: &RunDir) -> Result<Vec<Extraction>> {
    let path = dir.voi_boxes();
    csv_rows(&path)?
        .iter()
        .map(|rec| {
            let voi = match rec.get(2) {
                Some("ok") => {
                    let c = |i| field::<usize>(rec, i, &path);
                    Some(VoiBox {
                        x0: c(3)?,
                        x1: c(4)?,
                        y0: c(5)?,
                        y1: c(6)?,
                        z0: c(7)?,
                        z1: c(8)?,
                        target_extent: cfg.voi_extent.0,
                    })
                }
                _ => None,
            };
            Ok(Extraction {
                patient_id: rec.get(0).unwrap_or("").to_string(),
                label: field(rec, 1, &path)?,
                voi,
                probability: field(rec, 9, &path)?,
            })
        })
        .collect()
}

/// Grad-CAM for one volume against a saved checkpoint. A volume whose
/// dimensions already match the model input is used as is; anything else is
/// preprocessed first. Writes `heatmap.gmgv` and slice PGMs every
/// `export_stride` slices into `out_dir`.
pub fn gradcam_single(
    cfg: &RunConfig,
    checkpoint: &Path,
    volume: &Path,
    out_dir: &Path,
) -> Result<(Heatmap<f32>, Vec<SliceExport>)> {
    let model = Model::<f32>::load(checkpoint)?;
    let [_, d, h, w] = model.config().input_shape;
    let mut v = read_volume(volume)?;
    if v.dims() != [w, h, d] {
        if v.landmarks.is_none() {
            v = landmarks_from_manifest(cfg, volume)?;
        }
        v = preprocess(&v, &cfg.prep_params())?;
    }
    let (heat, probability) = body_heatmap(&model, &v.voxels, cfg.body_floor)?;
    let voi = match extract_voi(&heat, &v.voxels, cfg.voi_extent.0, &cfg.voi_params()) {
        Ok((b, _)) => Some(b),
        Err(Error::NoSignal { .. }) => None,
        Err(e) => return Err(e),
    };
    log::info!("positive probability {probability:.4}, VOI {voi:?}");
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_grid(&heat.values, v.spacing, &out_dir.join("heatmap.gmgv"))?;
    let slices = export_heatmap_slices(&heat.values, &v.voxels, out_dir, cfg.export_stride, voi.as_ref())?;
    Ok((heat, slices))
}

/// Reads `volume` through the manifest entry that names the same file, which
/// supplies the landmarks the raw file lacks.
fn landmarks_from_manifest(cfg: &RunConfig, volume: &Path) -> Result<CtVolume> {
    let missing = || {
        Error::LandmarkRequired(format!(
            "{} needs preprocessing and no manifest entry gives its landmarks",
            volume.display()
        ))
    };
    let path = cfg.manifest_path();
    if !path.exists() {
        return Err(missing());
    }
    let target = std::fs::canonicalize(volume).map_err(|e| Error::io(volume, e))?;
    let manifest = load_manifest(&path)?;
    let entry = manifest
        .entries
        .iter()
        .find(|e| std::fs::canonicalize(&e.volume_path).is_ok_and(|p| p == target))
        .ok_or_else(missing)?;
    raw_volume(entry)
}

/// One test-set score.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub fold: usize,
    pub model: String,
    pub patient_id: String,
    pub label: u8,
    pub score: f64,
}

/// Trains the VOI and full-volume classifiers on every fold and scores the
/// test set. Patients whose extraction failed are left out of both models.
pub fn train_classifiers(
    cfg: &RunConfig,
    manifest: &Manifest,
    plan: &SplitPlan,
    extractions: &[Extraction],
    dir: &RunDir,
) -> Result<Vec<Prediction>> {
    let ok: std::collections::HashSet<&str> = extractions
        .iter()
        .filter(|e| e.voi.is_some())
        .map(|e| e.patient_id.as_str())
        .collect();
    let keep = |ids: &[String]| -> Vec<String> { ids.iter().filter(|id| ok.contains(id.as_str())).cloned().collect() };
    let test_ids = keep(&plan.test_ids);
    let test_labels = labels_of(manifest, &test_ids)?;
    let mut predictions = Vec::new();
    for (model_name, extent) in [(VOI_MODEL, cfg.voi_extent.0), (FULL_MODEL, cfg.input_extent.0)] {
        let path = |id: &str| {
            if model_name == VOI_MODEL {
                dir.voi(id)
            } else {
                dir.prep_volume(id)
            }
        };
        let all_train = keep(&plan.train_ids);
        let inputs: HashMap<String, Tensor<f32>> = all_train
            .iter()
            .cloned()
            .zip(load_inputs(&all_train, path)?)
            .collect();
        let test_x = load_inputs(&test_ids, path)?;
        for k in 0..plan.folds.len() {
            let ids = keep(&plan.fold_train(k));
            let xs: Vec<Tensor<f32>> = ids.iter().map(|id| inputs[id].clone()).collect();
            let ys = labels_of(manifest, &ids)?;
            let seed = cfg.seed.wrapping_add(1000 + k as u64);
            let mut model = build_model::<f32>(&cfg.classifier_model(extent, seed))?;
            let mut state = AdadeltaState::for_params(model.params(), cfg.adadelta_rho, cfg.adadelta_eps)?;
            let loss = train(
                &mut model,
                &xs,
                &ys,
                &train_config(cfg, cfg.classifier_epochs, seed),
                &mut state,
                |_, _, _| Ok(()),
            )?;
            log::info!(
                "{model_name} fold {} trained on {} patients, final loss {:.4}",
                k + 1,
                xs.len(),
                loss.last().copied().unwrap_or(f64::NAN)
            );
            let cp = dir.classifier(k, model_name);
            ensure_parent(&cp)?;
            model.save(&cp)?;
            let scores = predict_all(&model, &test_x, cfg.batch_size)?;
            for ((id, &label), score) in test_ids.iter().zip(&test_labels).zip(scores) {
                predictions.push(Prediction {
                    fold: k,
                    model: model_name.to_string(),
                    patient_id: id.clone(),
                    label,
                    score,
                });
            }
        }
    }
    let mut out = String::from("fold,model,patient_id,label,score\n");
    for p in &predictions {
        writeln!(out, "{},{},{},{},{:.8}", p.fold + 1, p.model, p.patient_id, p.label, p.score).expect("string write");
    }
    write_text(&dir.predictions(), &out)?;
    Ok(predictions)
}

pub fn read_predictions(dir: &RunDir) -> Result<Vec<Prediction>> {
    let path = dir.predictions();
    csv_rows(&path)?
        .iter()
        .map(|rec| {
            Ok(Prediction {
                fold: field::<usize>(rec, 0, &path)?.saturating_sub(1),
                model: rec.get(1).unwrap_or("").to_string(),
                patient_id: rec.get(2).unwrap_or("").to_string(),
                label: field(rec, 3, &path)?,
                score: field(rec, 4, &path)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldMetrics {
    pub fold: usize,
    pub accuracy: f64,
    pub auc: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub counts: Confusion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelMetrics {
    pub name: String,
    pub folds: Vec<FoldMetrics>,
    /// `(mean, sd)` of accuracy, AUC, sensitivity and specificity.
    pub accuracy: (f64, f64),
    pub auc: (f64, f64),
    pub sensitivity: (f64, f64),
    pub specificity: (f64, f64),
    /// Pooled over folds.
    pub roc: Vec<RocPoint>,
}

impl ModelMetrics {
    pub fn fold_accuracies(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.accuracy).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TTestOutcome {
    Done(TTest),
    /// Every fold difference was identical.
    Degenerate(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub patients: usize,
    pub extractor_n: usize,
    pub train_n: usize,
    pub test_n: usize,
    pub extraction_failures: Vec<String>,
    pub extractor: Option<ExtractorSummary>,
    pub voi: ModelMetrics,
    pub full: ModelMetrics,
    pub t_test: TTestOutcome,
    pub localization: Option<LocalizationReport>,
}

fn model_metrics(name: &str, preds: &[Prediction], folds: usize, threshold: f64) -> Result<ModelMetrics> {
    let mut per_fold = Vec::with_capacity(folds);
    for k in 0..folds {
        let p: Vec<&Prediction> = preds.iter().filter(|p| p.model == name && p.fold == k).collect();
        if p.is_empty() {
            return Err(Error::Validation(format!("no {name} predictions for fold {}", k + 1)));
        }
        let scores: Vec<f64> = p.iter().map(|p| p.score).collect();
        let labels: Vec<u8> = p.iter().map(|p| p.label).collect();
        let m = confusion_metrics(&threshold_predictions(&scores, threshold), &labels)?;
        per_fold.push(FoldMetrics {
            fold: k,
            accuracy: to_f64(m.accuracy),
            auc: roc_auc(&scores, &labels)?.auc,
            sensitivity: to_f64(m.sensitivity),
            specificity: to_f64(m.specificity),
            counts: m.counts,
        });
    }
    let col = |f: fn(&FoldMetrics) -> f64| mean_sd(&per_fold.iter().map(f).collect::<Vec<_>>());
    let pooled: Vec<&Prediction> = preds.iter().filter(|p| p.model == name).collect();
    let roc = roc_auc(
        &pooled.iter().map(|p| p.score).collect::<Vec<_>>(),
        &pooled.iter().map(|p| p.label).collect::<Vec<_>>(),
    )?;
    Ok(ModelMetrics {
        name: name.to_string(),
        accuracy: col(|f| f.accuracy),
        auc: col(|f| f.auc),
        sensitivity: col(|f| f.sensitivity),
        specificity: col(|f| f.specificity),
        folds: per_fold,
        roc: roc.points,
    })
}

/// Peak hit-rate and box IoU over positives that have a truth mask.
pub fn localization_stage(manifest: &Manifest, extractions: &[Extraction], dir: &RunDir) -> Result<Option<LocalizationReport>> {
    let mut loaded = Vec::new();
    for e in extractions {
        let has_mask = manifest.get(&e.patient_id).is_some_and(|m| m.mask_path.is_some());
        if e.label == 1 && has_mask {
            let heat = read_grid(&dir.heatmap(&e.patient_id))?;
            let mask = read_grid(&dir.prep_mask(&e.patient_id))?;
            loaded.push((heat, mask, e.voi));
        }
    }
    if loaded.is_empty() {
        return Ok(None);
    }
    let samples: Vec<LocalizationSample<'_, f32>> = loaded
        .iter()
        .map(|(h, m, v)| LocalizationSample {
            heatmap: h,
            voi: v.as_ref(),
            mask: m,
        })
        .collect();
    localization_eval(&samples).map(Some)
}

/// Computes every metric from the files of earlier stages and writes
/// `report.txt`, `roc.csv` and `roc_full.csv`.
pub fn evaluate(cfg: &RunConfig, manifest: &Manifest, plan: &SplitPlan, dir: &RunDir) -> Result<MetricsReport> {
    let extractions = read_extractions(cfg, dir)?;
    let preds = read_predictions(dir)?;
    let voi = model_metrics(VOI_MODEL, &preds, plan.folds.len(), cfg.threshold)?;
    let full = model_metrics(FULL_MODEL, &preds, plan.folds.len(), cfg.threshold)?;
    let t_test = match paired_t_test(&voi.fold_accuracies(), &full.fold_accuracies(), cfg.alpha) {
        Ok(t) => TTestOutcome::Done(t),
        Err(Error::DegenerateTest(m)) => TTestOutcome::Degenerate(m),
        Err(e) => return Err(e),
    };
    let report = MetricsReport {
        patients: manifest.entries.len(),
        extractor_n: plan.extractor_ids.len(),
        train_n: plan.train_ids.len(),
        test_n: plan.test_ids.len(),
        extraction_failures: extractions
            .iter()
            .filter(|e| e.voi.is_none())
            .map(|e| e.patient_id.clone())
            .collect(),
        extractor: read_extractor_trace(dir).ok(),
        localization: localization_stage(manifest, &extractions, dir)?,
        voi,
        full,
        t_test,
    };
    write_text(&dir.report(), &render_report(&report, cfg))?;
    for m in [&report.voi, &report.full] {
        let mut out = String::from("threshold,fpr,tpr\n");
        for p in &m.roc {
            writeln!(out, "{},{:.6},{:.6}", p.threshold, p.fpr, p.tpr).expect("string write");
        }
        write_text(&dir.roc(&m.name), &out)?;
    }
    Ok(report)
}

pub fn render_report(r: &MetricsReport, cfg: &RunConfig) -> String {
    let mut s = String::new();
    let w = &mut s;
    writeln!(w, "Two-stage run report").unwrap();
    writeln!(
        w,
        "patients {}: extractor {}, train {}, test {}, folds {}",
        r.patients,
        r.extractor_n,
        r.train_n,
        r.test_n,
        r.voi.folds.len()
    )
    .unwrap();
    writeln!(
        w,
        "extraction failures: {}{}",
        r.extraction_failures.len(),
        if r.extraction_failures.is_empty() {
            String::new()
        } else {
            format!(" ({})", r.extraction_failures.join(" "))
        }
    )
    .unwrap();
    if let Some(e) = &r.extractor {
        writeln!(
            w,
            "extractor: {} epochs, final loss {:.4}, validation accuracy {:.4}, first epoch >= 0.90: {}",
            e.loss.len(),
            e.loss.last().copied().unwrap_or(f64::NAN),
            e.final_accuracy(),
            e.first_epoch_reaching(0.9).map_or("none".to_string(), |k| k.to_string())
        )
        .unwrap();
    }
    writeln!(w).unwrap();
    writeln!(w, "per-fold test metrics (threshold {})", cfg.threshold).unwrap();
    writeln!(
        w,
        "{:<5} {:<9} {:>8} {:>8} {:>11} {:>11} {:>4} {:>4} {:>4} {:>4}",
        "fold", "model", "accuracy", "auc", "sensitivity", "specificity", "tp", "fp", "tn", "fn"
    )
    .unwrap();
    for k in 0..r.voi.folds.len() {
        for m in [&r.voi, &r.full] {
            let f = &m.folds[k];
            writeln!(
                w,
                "{:<5} {:<9} {:>8.4} {:>8.4} {:>11.4} {:>11.4} {:>4} {:>4} {:>4} {:>4}",
                k + 1,
                m.name,
                f.accuracy,
                f.auc,
                f.sensitivity,
                f.specificity,
                f.counts.tp,
                f.counts.fp,
                f.counts.tn,
                f.counts.fn_
            )
            .unwrap();
        }
    }
    writeln!(w).unwrap();
    writeln!(w, "mean (sd) over folds").unwrap();
    writeln!(
        w,
        "{:<9} {:>15} {:>15} {:>15} {:>15}",
        "model", "accuracy", "auc", "sensitivity", "specificity"
    )
    .unwrap();
    let ms = |(m, sd): (f64, f64)| format!("{m:.3} ({sd:.3})");
    for m in [&r.voi, &r.full] {
        writeln!(
            w,
            "{:<9} {:>15} {:>15} {:>15} {:>15}",
            m.name,
            ms(m.accuracy),
            ms(m.auc),
            ms(m.sensitivity),
            ms(m.specificity)
        )
        .unwrap();
    }
    writeln!(w).unwrap();
    match &r.t_test {
        TTestOutcome::Done(t) => writeln!(
            w,
            "paired t-test on fold accuracy ({} - {}): mean difference {:.4}, t = {:.4}, df = {}, alpha = {}, critical = {:.4}, reject = {}",
            VOI_MODEL,
            FULL_MODEL,
            t.mean_diff,
            t.t,
            t.df,
            t.alpha,
            t.critical,
            if t.reject { "yes" } else { "no" }
        ),
        TTestOutcome::Degenerate(m) => writeln!(w, "paired t-test on fold accuracy: degenerate ({m})"),
    }
    .unwrap();
    if let Some(l) = &r.localization {
        writeln!(
            w,
            "localization over positives: peak hit-rate {:.4} ({}/{}), mean box IoU {:.4}, empty masks skipped {}",
            l.hit_rate, l.hits, l.evaluated, l.mean_iou, l.skipped
        )
        .unwrap();
    }
    s
}

/// Synthesizes data when the manifest is missing, then runs every stage.
pub fn run_all(cfg: &RunConfig) -> Result<MetricsReport> {
    let dir = init_run(cfg)?;
    let log = RunLog::open(&dir)?;
    let manifest_path = cfg.manifest_path();
    if !manifest_path.exists() {
        log.stage("synth", || synth(cfg))?;
    }
    let manifest = load_manifest(&manifest_path)?;
    log.stage("preprocess", || preprocess_all(cfg, &manifest, &dir))?;
    let plan = log.stage("split", || split_stage(cfg, &manifest, &dir))?;
    log.stage("train-extractor", || train_extractor(cfg, &manifest, &plan, &dir))?;
    let extractions = log.stage("extract-voi", || extract_all(cfg, &manifest, &plan, &dir))?;
    log.stage("train-classifier", || train_classifiers(cfg, &manifest, &plan, &extractions, &dir))?;
    log.stage("evaluate", || evaluate(cfg, &manifest, &plan, &dir))
}
