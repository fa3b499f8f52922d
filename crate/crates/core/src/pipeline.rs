//! Pipeline stages over files: simulate, train, correct, fit, evaluate,
//! classify, sweep the smoothness weight and check gradients. Every stage
//! records its resolved configuration next to its artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classify::{evaluate_motion_methods, MethodSummary, RoiRecord};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::gradcheck::{model_gradcheck, GradCheckReport};
use crate::io::{self, VolumeContainer};
use crate::loss::{local_ncc, smoothness};
use crate::net::MotionNet;
use crate::patlak::{self, InputFunction, ParametricMaps};
use crate::phantom::{
    condition_metrics, evaluate_correction, inject_motion, lesion_records, simulate_frames, ConditionMetrics, Conditions,
    CorrectionReport, EvalContext, MotionSpec, PhantomSpec,
};
use crate::series::FrameSeries;
use crate::train::{apply, train_observed, Correction};
use crate::warp::DisplacementField;

pub const CONFIG_FILE: &str = "resolved_config.toml";
pub const SERIES_FILE: &str = "series.toml";
pub const FIELDS_FILE: &str = "fields.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.toml";
pub const LOSS_FILE: &str = "loss.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const TRUTH_DIR: &str = "truth";
pub const MOTION_FREE_FILE: &str = "motion_free.toml";
pub const PHANTOM_FILE: &str = "phantom.toml";
pub const MOTION_FILE: &str = "motion.toml";
pub const KI_FILE: &str = "ki.toml";
pub const VB_FILE: &str = "vb.toml";
pub const NFE_FILE: &str = "nfe.toml";
pub const DEGENERATE_FILE: &str = "degenerate.toml";
pub const AUC_FILE: &str = "auc.csv";
pub const AUC_SUMMARY_FILE: &str = "auc_summary.csv";
pub const ROC_FILE: &str = "roc.csv";
pub const SWEEP_FILE: &str = "lambda_sweep.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.json";

pub const ACTIVITY_UNITS: &str = "kBq/mL";

/// Display windows of the exported slices.
pub const KI_WINDOW: (f64, f64) = (0.0, 0.04);
pub const VB_WINDOW: (f64, f64) = (0.0, 1.0);
pub const NFE_WINDOW: (f64, f64) = (0.0, 1.0);

/// Condition names in reporting order.
pub const CONDITIONS: [&str; 3] = ["motion_free", "motion", "corrected"];

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn start_stage(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    create_dir(out)?;
    io::write_toml(&out.join(CONFIG_FILE), cfg)
}

pub fn input_function(cfg: &PipelineConfig) -> Result<InputFunction> {
    cfg.phantom.input.tabulate()
}

pub fn eval_context(cfg: &PipelineConfig, spec: &PhantomSpec) -> Result<EvalContext> {
    let mut ctx = EvalContext::new(spec, input_function(cfg)?)?;
    ctx.t_star = cfg.eval.t_star;
    ctx.weights = cfg.eval.weights;
    ctx.nmi_bins = cfg.eval.nmi_bins;
    Ok(ctx)
}

/// Phantom, its motion, the clean and moved series and the correcting fields.
#[derive(Clone, Debug)]
pub struct Simulation {
    pub spec: PhantomSpec,
    pub motion: MotionSpec,
    pub motion_free: FrameSeries,
    pub moved: FrameSeries,
    pub true_fields: Vec<DisplacementField>,
}

pub fn simulate_phantom(cfg: &PipelineConfig) -> Result<Simulation> {
    cfg.validate()?;
    let p = &cfg.phantom;
    let spec = PhantomSpec::desk(p.seed, &p.lesions)?;
    let ifn = input_function(cfg)?;
    let (mid, dur) = p.timing();
    let motion_free = simulate_frames(&spec, &ifn, &mid, &dur, p.noise_sigma, p.seed)?;
    let m = &cfg.motion;
    let motion = if m.enabled {
        MotionSpec::random(&spec, p.frames, m.reference_index, &m.motion, m.seed)?
    } else {
        MotionSpec::none(p.frames, m.reference_index, m.motion.bound)
    };
    let (moved, true_fields) = inject_motion(&motion_free, &motion)?;
    Ok(Simulation {
        spec,
        motion,
        motion_free,
        moved,
        true_fields,
    })
}

/// Writes the moved series at the top level and the truth bundle below it.
pub fn simulate(cfg: &PipelineConfig, out: &Path) -> Result<Simulation> {
    start_stage(cfg, out)?;
    let sim = simulate_phantom(cfg)?;
    let truth_dir = out.join(TRUTH_DIR);
    create_dir(&truth_dir)?;
    io::write_volume(&out.join(SERIES_FILE), &VolumeContainer::from_series(&sim.moved, ACTIVITY_UNITS))?;
    io::write_volume(&truth_dir.join(MOTION_FREE_FILE), &VolumeContainer::from_series(&sim.motion_free, ACTIVITY_UNITS))?;
    io::write_volume(&truth_dir.join(FIELDS_FILE), &VolumeContainer::from_fields(&sim.true_fields, &sim.moved)?)?;
    let truth = sim.spec.truth()?;
    let voxel = sim.spec.voxel_mm;
    io::write_volume(&truth_dir.join(KI_FILE), &VolumeContainer::from_volume(&truth.ki, voxel, "1/min")?)?;
    io::write_volume(&truth_dir.join(VB_FILE), &VolumeContainer::from_volume(&truth.vb, voxel, "1")?)?;
    io::write_toml(&truth_dir.join(PHANTOM_FILE), &sim.spec)?;
    io::write_toml(&truth_dir.join(MOTION_FILE), &sim.motion)?;
    Ok(sim)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub epoch: usize,
    pub total: f64,
    pub similarity: f64,
    pub smoothness: f64,
}

/// A freshly initialized network trained on `series` with the configured objective.
pub fn train_network(cfg: &PipelineConfig, series: &FrameSeries) -> Result<(MotionNet, Vec<LossRow>)> {
    cfg.validate()?;
    let mut net = MotionNet::new(cfg.net.clone(), cfg.seed)?;
    let mut rows = Vec::new();
    train_observed(&mut net, std::slice::from_ref(series), &cfg.train, |r| {
        rows.push(LossRow {
            step: r.step,
            epoch: r.epoch,
            total: r.terms.total,
            similarity: r.terms.similarity,
            smoothness: r.terms.smoothness,
        })
    })?;
    Ok((net, rows))
}

pub fn read_series(path: &Path) -> Result<FrameSeries> {
    io::read_volume(path)?.into_series()
}

pub fn train(cfg: &PipelineConfig, series: &Path, out: &Path) -> Result<(MotionNet, Vec<LossRow>)> {
    start_stage(cfg, out)?;
    let series = read_series(series)?;
    let (net, rows) = train_network(cfg, &series)?;
    io::write_checkpoint(&out.join(CHECKPOINT_FILE), &net)?;
    io::write_csv(&out.join(LOSS_FILE), &rows)?;
    Ok((net, rows))
}

pub fn correct(cfg: &PipelineConfig, checkpoint: &Path, series: &Path, out: &Path) -> Result<Correction> {
    start_stage(cfg, out)?;
    let net = io::read_checkpoint(checkpoint)?;
    let series = read_series(series)?;
    let c = apply(&net, &series, &cfg.train)?;
    io::write_volume(&out.join(SERIES_FILE), &VolumeContainer::from_series(&c.corrected, ACTIVITY_UNITS))?;
    io::write_volume(&out.join(FIELDS_FILE), &VolumeContainer::from_fields(&c.fields, &c.corrected)?)?;
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FitSummary {
    pub voxels: usize,
    pub degenerate: usize,
    /// Over non-degenerate voxels.
    pub mean_nfe: f64,
    pub max_nfe: f64,
}

pub fn write_maps(maps: &ParametricMaps, voxel_mm: [f64; 3], out: &Path) -> Result<()> {
    io::write_volume(&out.join(KI_FILE), &VolumeContainer::from_volume(&maps.ki, voxel_mm, "1/min")?)?;
    io::write_volume(&out.join(VB_FILE), &VolumeContainer::from_volume(&maps.vb, voxel_mm, "1")?)?;
    io::write_volume(&out.join(NFE_FILE), &VolumeContainer::from_volume(&maps.nfe, voxel_mm, "1")?)?;
    io::write_volume(&out.join(DEGENERATE_FILE), &VolumeContainer::from_volume(&maps.degenerate, voxel_mm, "mask")?)
}

pub fn fit(cfg: &PipelineConfig, series: &Path, out: &Path) -> Result<(ParametricMaps, FitSummary)> {
    start_stage(cfg, out)?;
    let series = read_series(series)?;
    let maps = patlak::parametric_maps(&series, &input_function(cfg)?, cfg.eval.t_star, cfg.eval.weights)?;
    let degenerate = maps.degenerate.data().iter().filter(|&&d| d != 0.0).count();
    let (mean_nfe, max_nfe) = maps.nfe_summary()?;
    let summary = FitSummary {
        voxels: maps.ki.len(),
        degenerate,
        mean_nfe,
        max_nfe,
    };
    write_maps(&maps, series.spacing_mm(), out)?;
    io::write_json(&out.join(METRICS_FILE), &summary)?;
    Ok((maps, summary))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FrameTerms {
    pub frame: usize,
    /// Local NCC of the corrected frame against the reference.
    pub similarity: f64,
    pub smoothness: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegionNfe {
    pub condition: String,
    pub region: String,
    pub mean_nfe: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub frames: Vec<FrameTerms>,
    pub conditions: CorrectionReport,
    pub regions: Vec<RegionNfe>,
}

/// Loss terms of each corrected frame at full resolution.
pub fn frame_terms(cfg: &PipelineConfig, corrected: &FrameSeries, fields: &[DisplacementField]) -> Result<Vec<FrameTerms>> {
    let loss = cfg.train.loss();
    let reference = corrected.frame(cfg.train.reference_index);
    corrected
        .frames()
        .iter()
        .zip(fields)
        .enumerate()
        .map(|(frame, (f, u))| {
            Ok(FrameTerms {
                frame,
                similarity: local_ncc(reference, f, &loss)?,
                smoothness: smoothness(u),
            })
        })
        .collect()
}

/// Everything the evaluation stage derives from the three conditions.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub maps: Vec<ParametricMaps>,
    pub rois: Vec<(String, Vec<RoiRecord>)>,
}

pub fn evaluate_conditions(
    cfg: &PipelineConfig,
    spec: &PhantomSpec,
    series: [&FrameSeries; 3],
    true_fields: &[DisplacementField],
    est_fields: &[DisplacementField],
) -> Result<Evaluation> {
    let ctx = eval_context(cfg, spec)?;
    let conditions = evaluate_correction(
        Conditions {
            motion_free: series[0],
            motion: series[1],
            corrected: series[2],
        },
        true_fields,
        Some(est_fields),
        &ctx,
    )?;
    let truth = spec.truth()?;
    let mut maps = Vec::with_capacity(3);
    let mut rois = Vec::with_capacity(3);
    let mut regions = Vec::new();
    for (name, s) in CONDITIONS.iter().zip(series) {
        let (m, _) = condition_metrics(s, &ctx)?;
        let valid = m.valid();
        for (i, r) in spec.regions.iter().enumerate() {
            let mask: Vec<bool> = truth.mask(i).iter().zip(&valid).map(|(a, b)| *a && *b).collect();
            if let Ok((mean_nfe, _)) = patlak::summarize(&m.nfe, &mask) {
                regions.push(RegionNfe {
                    condition: name.to_string(),
                    region: r.name.clone(),
                    mean_nfe,
                });
            }
        }
        rois.push((name.to_string(), lesion_records(spec, &truth, &m.ki)?));
        maps.push(m);
    }
    Ok(Evaluation {
        report: MetricsReport {
            frames: frame_terms(cfg, series[2], est_fields)?,
            conditions,
            regions,
        },
        maps,
        rois,
    })
}

fn export_slices(maps: &ParametricMaps, condition: &str, out: &Path) -> Result<()> {
    for (name, vol, window) in [("ki", &maps.ki, KI_WINDOW), ("vb", &maps.vb, VB_WINDOW), ("nfe", &maps.nfe, NFE_WINDOW)] {
        let (rows, cols, v) = io::central_slice(vol, 1)?;
        io::write_pgm(&out.join(format!("{name}_{condition}.pgm")), rows, cols, &v, window, &format!("{name} {condition}"))?;
    }
    Ok(())
}

pub fn rois_file(condition: &str) -> String {
    format!("rois_{condition}.csv")
}

/// Compare the motion-free and moved series of a simulation with a corrected series.
pub fn evaluate(cfg: &PipelineConfig, sim: &Path, corrected: &Path, out: &Path) -> Result<Evaluation> {
    start_stage(cfg, out)?;
    let truth_dir = sim.join(TRUTH_DIR);
    let spec: PhantomSpec = io::read_toml(&truth_dir.join(PHANTOM_FILE))?;
    let motion_free = read_series(&truth_dir.join(MOTION_FREE_FILE))?;
    let moved = read_series(&sim.join(SERIES_FILE))?;
    let true_fields = io::read_volume(&truth_dir.join(FIELDS_FILE))?.into_fields()?;
    let corrected_series = read_series(&corrected.join(SERIES_FILE))?;
    let est_fields = io::read_volume(&corrected.join(FIELDS_FILE))?.into_fields()?;
    let ev = evaluate_conditions(cfg, &spec, [&motion_free, &moved, &corrected_series], &true_fields, &est_fields)?;
    io::write_json(&out.join(METRICS_FILE), &ev.report)?;
    for ((name, recs), maps) in ev.rois.iter().zip(&ev.maps) {
        io::write_csv(&out.join(rois_file(name)), recs)?;
        export_slices(maps, name, out)?;
    }
    Ok(ev)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AucRow {
    pub method: String,
    pub fold: usize,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AucSummaryRow {
    pub method: String,
    pub mean_auc: f64,
    pub std_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RocRow {
    pub method: String,
    pub fpr: f64,
    pub tpr: f64,
}

pub fn classify_records(cfg: &PipelineConfig, methods: &[(String, Vec<RoiRecord>)]) -> Result<Vec<MethodSummary>> {
    let c = &cfg.classify;
    evaluate_motion_methods(methods, c.folds, c.seed, &c.logistic)
}

pub fn write_classification(summaries: &[MethodSummary], out: &Path) -> Result<()> {
    let mut aucs = Vec::new();
    let mut roc = Vec::new();
    for s in summaries {
        aucs.extend(s.fold_aucs.iter().enumerate().map(|(fold, &auc)| AucRow {
            method: s.method.clone(),
            fold,
            auc,
        }));
        roc.extend(s.mean_roc.iter().map(|&(fpr, tpr)| RocRow {
            method: s.method.clone(),
            fpr,
            tpr,
        }));
    }
    let summary: Vec<AucSummaryRow> = summaries
        .iter()
        .map(|s| AucSummaryRow {
            method: s.method.clone(),
            mean_auc: s.mean_auc,
            std_auc: s.std_auc,
        })
        .collect();
    io::write_csv(&out.join(AUC_FILE), &aucs)?;
    io::write_csv(&out.join(AUC_SUMMARY_FILE), &summary)?;
    io::write_csv(&out.join(ROC_FILE), &roc)
}

/// Cross-validated AUC of each named ROI table.
pub fn classify(cfg: &PipelineConfig, methods: &[(String, PathBuf)], out: &Path) -> Result<Vec<MethodSummary>> {
    start_stage(cfg, out)?;
    let tables = methods
        .iter()
        .map(|(name, path)| {
            let recs: Vec<RoiRecord> = io::read_csv(path)?;
            for r in &recs {
                r.validate()?;
            }
            Ok((name.clone(), recs))
        })
        .collect::<Result<Vec<_>>>()?;
    let summaries = classify_records(cfg, &tables)?;
    write_classification(&summaries, out)?;
    Ok(summaries)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub mean_nfe: f64,
    pub max_nfe: f64,
    pub ki_vb_nmi: f64,
    pub ki_vb_ncc: f64,
    pub tumor_ki_mean: f64,
    pub tumor_ki_max: f64,
}

impl SweepRow {
    fn new(lambda: f64, m: &ConditionMetrics) -> Self {
        Self {
            lambda,
            mean_nfe: m.mean_nfe,
            max_nfe: m.max_nfe,
            ki_vb_nmi: m.ki_vb_nmi,
            ki_vb_ncc: m.ki_vb_ncc,
            tumor_ki_mean: m.tumor_ki_mean,
            tumor_ki_max: m.tumor_ki_max,
        }
    }
}

/// Metrics of the corrected series after training with the given `lambda`.
pub fn lambda_row(cfg: &PipelineConfig, spec: &PhantomSpec, moved: &FrameSeries, lambda: f64) -> Result<SweepRow> {
    let mut c = cfg.clone();
    c.train.lambda = lambda;
    let (net, _) = train_network(&c, moved)?;
    let corrected = apply(&net, moved, &c.train)?.corrected;
    let (_, m) = condition_metrics(&corrected, &eval_context(&c, spec)?)?;
    Ok(SweepRow::new(lambda, &m))
}

/// Train one network per configured smoothness weight on the moved series.
pub fn sweep_lambda(cfg: &PipelineConfig, sim: &Path, out: &Path) -> Result<Vec<SweepRow>> {
    start_stage(cfg, out)?;
    let spec: PhantomSpec = io::read_toml(&sim.join(TRUTH_DIR).join(PHANTOM_FILE))?;
    let moved = read_series(&sim.join(SERIES_FILE))?;
    let rows = cfg
        .lambdas
        .iter()
        .map(|&l| lambda_row(cfg, &spec, &moved, l))
        .collect::<Result<Vec<_>>>()?;
    io::write_csv(&out.join(SWEEP_FILE), &rows)?;
    Ok(rows)
}

pub fn gradcheck(cfg: &PipelineConfig, out: &Path) -> Result<GradCheckReport> {
    start_stage(cfg, out)?;
    let report = model_gradcheck(&cfg.gradcheck)?;
    io::write_json(&out.join(GRADCHECK_FILE), &report)?;
    Ok(report)
}

/// Subdirectories of a full run.
pub const RUN_STAGES: [&str; 6] = ["simulate", "train", "correct", "fit", "evaluate", "classify"];

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub metrics: MetricsReport,
    pub classification: Vec<MethodSummary>,
}

/// simulate → train → correct → fit → evaluate → classify, each stage in its
/// own subdirectory of `out` and reading its inputs from disk.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<RunSummary> {
    start_stage(cfg, out)?;
    let dir = |s: &str| out.join(s);
    simulate(cfg, &dir("simulate"))?;
    let series = dir("simulate").join(SERIES_FILE);
    train(cfg, &series, &dir("train"))?;
    correct(cfg, &dir("train").join(CHECKPOINT_FILE), &series, &dir("correct"))?;
    fit(cfg, &dir("correct").join(SERIES_FILE), &dir("fit"))?;
    let ev = evaluate(cfg, &dir("simulate"), &dir("correct"), &dir("evaluate"))?;
    let methods: Vec<(String, PathBuf)> = CONDITIONS
        .iter()
        .map(|c| (c.to_string(), dir("evaluate").join(rois_file(c))))
        .collect();
    let classification = classify(cfg, &methods, &dir("classify"))?;
    Ok(RunSummary {
        metrics: ev.report,
        classification,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> PipelineConfig {
        let mut c = PipelineConfig::with_seed(2);
        c.train.max_steps = 2;
        c
    }

    #[test]
    fn full_run_writes_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick();
        let run = run_pipeline(&cfg, dir.path()).unwrap();
        assert_eq!(run.classification.len(), 3);
        assert_eq!(run.metrics.frames.len(), cfg.phantom.frames);
        for stage in RUN_STAGES {
            assert!(dir.path().join(stage).join(CONFIG_FILE).exists(), "{stage}");
        }
        let loss: Vec<LossRow> = io::read_csv(&dir.path().join("train").join(LOSS_FILE)).unwrap();
        assert_eq!(loss.len(), 2);
        for c in CONDITIONS {
            assert!(dir.path().join("evaluate").join(format!("ki_{c}.pgm")).exists());
        }
        let back: PipelineConfig = io::read_toml(&dir.path().join("train").join(CONFIG_FILE)).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn identity_checkpoint_leaves_payload_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick();
        simulate(&cfg, &dir.path().join("sim")).unwrap();
        let mut net = MotionNet::new(cfg.net.clone(), 0).unwrap();
        net.zero_flow_head();
        let ckpt = dir.path().join(CHECKPOINT_FILE);
        io::write_checkpoint(&ckpt, &net).unwrap();
        let series = dir.path().join("sim").join(SERIES_FILE);
        correct(&cfg, &ckpt, &series, &dir.path().join("out")).unwrap();
        let a = fs::read(io::payload_path(&series)).unwrap();
        let b = fs::read(io::payload_path(&dir.path().join("out").join(SERIES_FILE))).unwrap();
        assert!(a == b);
    }

    #[test]
    fn sweep_writes_one_row_per_lambda() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick();
        cfg.train.max_steps = 1;
        cfg.lambdas = vec![0.1, 100.0];
        simulate(&cfg, &dir.path().join("sim")).unwrap();
        let rows = sweep_lambda(&cfg, &dir.path().join("sim"), &dir.path().join("sweep")).unwrap();
        assert_eq!(rows.iter().map(|r| r.lambda).collect::<Vec<_>>(), vec![0.1, 100.0]);
        let text = fs::read_to_string(dir.path().join("sweep").join(SWEEP_FILE)).unwrap();
        assert!(text.starts_with("lambda,mean_nfe,max_nfe,ki_vb_nmi,ki_vb_ncc,tumor_ki_mean,tumor_ki_max\n"));
    }

    #[test]
    fn invalid_config_fails_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick();
        cfg.classify.folds = 1;
        assert!(simulate(&cfg, &dir.path().join("sim")).is_err());
        assert!(!dir.path().join("sim").exists());
    }
}
