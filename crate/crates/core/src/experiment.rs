//! Experiment driver: data splits, training runs and evaluation.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedavg::{self, FedConfig, LocalDataset, RoundLog, TransportMode};
use crate::metrics::{bland_altman, BlandAltmanResult, Confusion, MetricsRecord};
use crate::par;
use crate::params::ModelParams;
use crate::phantom::{partition_clients, BurdenBand, PartitionMode, PhantomCase};
use crate::pipeline::{self, FrameMeasure, PipelineConfig};
use crate::seed;
use crate::unet::{UNetConfig, UNetModel};

/// Case-level assignment to `k` folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    /// `(case_id, fold)` in input order.
    pub assignments: Vec<(String, usize)>,
}

impl FoldPlan {
    pub fn fold_of(&self, case_id: &str) -> Option<usize> {
        self.assignments.iter().find(|(id, _)| id == case_id).map(|&(_, f)| f)
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &(_, f) in &self.assignments {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Seeded shuffle, then round-robin into `k` folds.
pub fn make_folds(case_ids: &[String], k: usize, seed: u64) -> Result<FoldPlan> {
    if k == 0 || case_ids.len() < k {
        return Err(Error::config(format!("cannot form {k} folds from {} cases", case_ids.len())));
    }
    let mut order: Vec<usize> = (0..case_ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; case_ids.len()];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % k;
    }
    Ok(FoldPlan {
        k,
        seed,
        assignments: case_ids.iter().cloned().zip(fold).collect(),
    })
}

/// Holdout share: 16 of every 151 cases.
pub const HOLDOUT_FRACTION: f64 = 16.0 / 151.0;

/// Seeded case-level split into `(train, holdout)` indices, both sorted.
pub fn holdout_split(n_cases: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_hold = ((n_cases as f64 * HOLDOUT_FRACTION).round() as usize).max(1);
    if n_cases <= n_hold {
        return Err(Error::config(format!("{n_cases} cases are too few for a holdout split")));
    }
    let mut order: Vec<usize> = (0..n_cases).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut hold = order[..n_hold].to_vec();
    let mut train = order[n_hold..].to_vec();
    hold.sort_unstable();
    train.sort_unstable();
    Ok((train, hold))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Centralized,
    #[default]
    Federated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
#[derive(Default)]
pub enum EvalProtocol {
    #[default]
    Holdout,
    CrossValidation { k: usize },
}


/// Everything a training run depends on besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub mode: TrainMode,
    pub protocol: EvalProtocol,
    pub partition: PartitionMode,
    pub transport: TransportMode,
    pub fed: FedConfig,
    /// Architecture; the input size is taken from the pipeline.
    pub unet: UNetConfig,
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: TrainMode::Federated,
            protocol: EvalProtocol::Holdout,
            partition: PartitionMode::Iid,
            transport: TransportMode::InProcess,
            fed: FedConfig::default(),
            unet: UNetConfig::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

impl RunConfig {
    /// U-Net configuration sized for `height x width` frames.
    pub fn model_config(&self, height: usize, width: usize) -> UNetConfig {
        let (h, w) = self.pipeline.model_input_dims(height, width);
        self.unet.with_input(h, w)
    }

    pub fn label(&self) -> String {
        let mode = match self.mode {
            TrainMode::Centralized => "centralized",
            TrainMode::Federated => "federated",
        };
        let coords = match self.pipeline.coordinate_mode {
            pipeline::CoordinateMode::Cartesian => "cartesian",
            pipeline::CoordinateMode::Polar => "polar",
        };
        let post = if self.pipeline.postprocess == pipeline::PostProcess::None { "raw" } else { "post" };
        let protocol = match self.protocol {
            EvalProtocol::Holdout => "holdout".to_string(),
            EvalProtocol::CrossValidation { k } => format!("cv{k}"),
        };
        format!("{mode}/{coords}+{post}/{protocol}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    Eem,
    Lumen,
    Plaque,
}

impl Structure {
    pub const ALL: [Structure; 3] = [Structure::Eem, Structure::Lumen, Structure::Plaque];

    pub fn as_str(self) -> &'static str {
        match self {
            Structure::Eem => "eem",
            Structure::Lumen => "lumen",
            Structure::Plaque => "plaque",
        }
    }
}

/// Case-level plaque indicators compared in agreement analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaqueIndicators {
    pub area_mm2: f64,
    pub volume_mm3: f64,
    pub burden_index: f64,
}

impl PlaqueIndicators {
    fn from_measures(m: &[FrameMeasure], frame_spacing_mm: f64) -> Result<Self> {
        let v = pipeline::case_volumes(m, frame_spacing_mm)?;
        let n = m.len() as f64;
        Ok(PlaqueIndicators {
            area_mm2: m.iter().map(|f| f.plaque_mm2).sum::<f64>() / n,
            volume_mm3: v.plaque_mm3,
            burden_index: m.iter().map(|f| f.burden_index).sum::<f64>() / n,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: String,
    pub band: BurdenBand,
    pub fold: usize,
    pub frame_count: usize,
    /// One record per structure, in `Structure::ALL` order.
    pub records: Vec<(Structure, MetricsRecord)>,
    pub truth: PlaqueIndicators,
    pub predicted: PlaqueIndicators,
}

impl CaseResult {
    pub fn record(&self, s: Structure) -> &MetricsRecord {
        &self.records.iter().find(|(k, _)| *k == s).expect("all structures recorded").1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Scores {
    pub dsc: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Mean scores per structure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Summary {
    pub eem: Scores,
    pub lumen: Scores,
    pub plaque: Scores,
}

impl Summary {
    pub fn get(&self, s: Structure) -> &Scores {
        match s {
            Structure::Eem => &self.eem,
            Structure::Lumen => &self.lumen,
            Structure::Plaque => &self.plaque,
        }
    }

    fn get_mut(&mut self, s: Structure) -> &mut Scores {
        match s {
            Structure::Eem => &mut self.eem,
            Structure::Lumen => &mut self.lumen,
            Structure::Plaque => &mut self.plaque,
        }
    }

    /// Mean over cases of per-case scores.
    pub fn of_cases(cases: &[&CaseResult]) -> Summary {
        let mut out = Summary::default();
        if cases.is_empty() {
            return out;
        }
        let n = cases.len() as f64;
        for s in Structure::ALL {
            let t = out.get_mut(s);
            for c in cases {
                let r = c.record(s);
                t.dsc += r.dsc / n;
                t.recall += r.recall / n;
                t.precision += r.precision / n;
            }
        }
        out
    }

    /// Arithmetic mean of several summaries.
    pub fn mean(items: &[Summary]) -> Summary {
        let mut out = Summary::default();
        let n = items.len() as f64;
        for s in Structure::ALL {
            let t = out.get_mut(s);
            t.dsc = items.iter().map(|x| x.get(s).dsc).sum::<f64>() / n;
            t.recall = items.iter().map(|x| x.get(s).recall).sum::<f64>() / n;
            t.precision = items.iter().map(|x| x.get(s).precision).sum::<f64>() / n;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Indicator {
    PlaqueArea,
    PlaqueVolume,
    BurdenIndex,
}

impl Indicator {
    pub const ALL: [Indicator; 3] = [Indicator::PlaqueArea, Indicator::PlaqueVolume, Indicator::BurdenIndex];

    pub fn as_str(self) -> &'static str {
        match self {
            Indicator::PlaqueArea => "plaque_area",
            Indicator::PlaqueVolume => "plaque_volume",
            Indicator::BurdenIndex => "burden_index",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            Indicator::PlaqueArea => "mm^2",
            Indicator::PlaqueVolume => "mm^3",
            Indicator::BurdenIndex => "",
        }
    }

    fn pick(self, p: &PlaqueIndicators) -> f64 {
        match self {
            Indicator::PlaqueArea => p.area_mm2,
            Indicator::PlaqueVolume => p.volume_mm3,
            Indicator::BurdenIndex => p.burden_index,
        }
    }
}

/// Published clinical DSCs, kept only as context for desk results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalReference {
    pub note: String,
    pub eem_dsc: f64,
    pub lumen_dsc: f64,
    pub plaque_dsc: f64,
}

impl Default for ClinicalReference {
    fn default() -> Self {
        ClinicalReference {
            note: "clinical reference, not comparable (different data)".into(),
            eem_dsc: 0.890,
            lumen_dsc: 0.877,
            plaque_dsc: 0.706,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Report {
    pub label: String,
    pub cases: Vec<CaseResult>,
    /// Mean case scores per evaluated fold (one entry for a holdout run).
    pub folds: Vec<Summary>,
    /// Mean of `folds`.
    pub aggregate: Summary,
    /// Same evaluation with freshly initialised weights.
    pub baseline: Option<Summary>,
    pub bland_altman: Vec<(Indicator, BlandAltmanResult)>,
    pub rounds: Vec<Vec<RoundLog>>,
    pub reference: ClinicalReference,
}

impl Report {
    /// Recomputes fold summaries, aggregate and agreement statistics from `cases`.
    pub fn finalize(&mut self) -> Result<()> {
        let n_folds = self.cases.iter().map(|c| c.fold + 1).max().unwrap_or(0);
        self.folds = (0..n_folds)
            .map(|f| Summary::of_cases(&self.cases.iter().filter(|c| c.fold == f).collect::<Vec<_>>()))
            .collect();
        self.aggregate = if self.folds.is_empty() { Summary::default() } else { Summary::mean(&self.folds) };
        self.bland_altman.clear();
        if self.cases.len() >= 2 {
            for ind in Indicator::ALL {
                let manual: Vec<f64> = self.cases.iter().map(|c| ind.pick(&c.truth)).collect();
                let auto: Vec<f64> = self.cases.iter().map(|c| ind.pick(&c.predicted)).collect();
                self.bland_altman.push((ind, bland_altman(&manual, &auto)?));
            }
        }
        Ok(())
    }
}

/// Segments every frame of `case` and scores it against ground truth.
pub fn evaluate_case(case: &PhantomCase, eem: &UNetModel, lumen: &UNetModel, pipeline: &PipelineConfig, fold: usize) -> Result<CaseResult> {
    if case.frame_count() == 0 {
        return Err(Error::config(format!("case {} has no frames", case.case_id)));
    }
    let results = pipeline::segment_frames(&case.frames, eem, lumen, pipeline)?;
    let mut conf = [Confusion::default(); 3];
    let mut pred_m = Vec::with_capacity(results.len());
    let mut truth_m = Vec::with_capacity(results.len());
    for (i, r) in results.iter().enumerate() {
        let truth = [&case.eem_masks[i], &case.lumen_masks[i], &case.plaque_masks[i]];
        let pred = [&r.eem_mask, &r.lumen_mask, &r.plaque_mask];
        for k in 0..3 {
            conf[k].add(Confusion::of(pred[k], truth[k])?);
        }
        pred_m.push(pipeline::measure(r, case.pixel_spacing_mm));
        truth_m.push(FrameMeasure::from_masks(truth[0], truth[1], truth[2], case.pixel_spacing_mm));
    }
    let predicted = PlaqueIndicators::from_measures(&pred_m, case.frame_spacing_mm)?;
    let truth = PlaqueIndicators::from_measures(&truth_m, case.frame_spacing_mm)?;
    let vols = pipeline::case_volumes(&pred_m, case.frame_spacing_mm)?;
    let n = pred_m.len() as f64;
    let mean = |f: fn(&FrameMeasure) -> f64| pred_m.iter().map(f).sum::<f64>() / n;
    let areas = [mean(|m| m.eem_mm2), mean(|m| m.lumen_mm2), mean(|m| m.plaque_mm2)];
    let volumes = [vols.eem_mm3, vols.lumen_mm3, vols.plaque_mm3];
    let records = Structure::ALL
        .iter()
        .enumerate()
        .map(|(k, &s)| {
            let mut r = MetricsRecord::from_confusion(conf[k]);
            r.area_mm2 = areas[k];
            r.volume_mm3 = volumes[k];
            r.burden_index = predicted.burden_index;
            (s, r)
        })
        .collect();
    Ok(CaseResult {
        case_id: case.case_id.clone(),
        band: case.band,
        fold,
        frame_count: case.frame_count(),
        records,
        truth,
        predicted,
    })
}

/// Evaluates a combined EEM+lumen parameter set on `cases`.
pub fn evaluate_params(params: &ModelParams, cases: &[&PhantomCase], unet: &UNetConfig, pipeline: &PipelineConfig, fold: usize) -> Result<Vec<CaseResult>> {
    let (eem, lumen) = fedavg::build_pair(unet, params)?;
    par::map(cases, |c| evaluate_case(c, &eem, &lumen, pipeline, fold)).into_iter().collect()
}

fn frame_dims(cases: &[PhantomCase]) -> Result<(usize, usize)> {
    let first = cases
        .iter()
        .flat_map(|c| c.frames.first())
        .next()
        .ok_or_else(|| Error::config("dataset has no frames"))?;
    match *first.shape() {
        [1, h, w] => Ok((h, w)),
        ref s => Err(Error::shape(format!("frames must be 1xHxW, got {s:?}"))),
    }
}

/// Weights and report of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub report: Report,
    /// Final weights per fold (one entry for a holdout run).
    pub weights: Vec<ModelParams>,
    pub timings_s: BTreeMap<String, f64>,
}

/// Per-client training sets built from the `train` cases. Centralized
/// runs get a single set in the same order a one-client federation would.
pub fn client_datasets(cases: &[PhantomCase], train: &[usize], cfg: &RunConfig) -> Result<Vec<LocalDataset>> {
    let bands: Vec<BurdenBand> = train.iter().map(|&i| cases[i].band).collect();
    let n_parts = match cfg.mode {
        TrainMode::Centralized => 1,
        TrainMode::Federated => cfg.fed.n_clients,
    };
    partition_clients(&bands, n_parts, cfg.partition)?
        .iter()
        .map(|p| LocalDataset::from_cases(p.iter().map(|&k| &cases[train[k]]), &cfg.pipeline))
        .collect()
}

/// Training indices, holdout indices and model configuration of a holdout run.
pub fn holdout_plan(cases: &[PhantomCase], cfg: &RunConfig) -> Result<(Vec<usize>, Vec<usize>, UNetConfig)> {
    let (h, w) = frame_dims(cases)?;
    let (train, hold) = holdout_split(cases.len(), seed::derive(cfg.fed.seed, seed::TAG_SPLIT))?;
    Ok((train, hold, cfg.model_config(h, w)))
}

/// Trains on `train` cases and evaluates on `test` cases.
fn train_and_evaluate(cases: &[PhantomCase], train: &[usize], test: &[usize], cfg: &RunConfig, fed: &FedConfig, fold: usize, report: &mut Report) -> Result<ModelParams> {
    let (h, w) = frame_dims(cases)?;
    let unet = cfg.model_config(h, w);
    let datasets = client_datasets(cases, train, cfg)?;
    let (params, logs) = match cfg.mode {
        TrainMode::Centralized => {
            let history = fedavg::train_centralized(&datasets[0], &unet, fed)?;
            let last = history.last().cloned().map_or_else(|| fedavg::init_pair(&unet, fed.seed), Ok)?;
            (last, Vec::new())
        }
        TrainMode::Federated => {
            let out = fedavg::server_run(&datasets, &unet, fed, cfg.transport, None)?;
            (out.params, out.logs)
        }
    };
    let test_cases: Vec<&PhantomCase> = test.iter().map(|&i| &cases[i]).collect();
    report.cases.extend(evaluate_params(&params, &test_cases, &unet, &cfg.pipeline, fold)?);
    report.rounds.push(logs);
    Ok(params)
}

/// Runs the configured experiment on `cases`.
pub fn run_experiment(cases: &[PhantomCase], cfg: &RunConfig) -> Result<RunOutput> {
    cfg.fed.validate()?;
    cfg.pipeline.validate()?;
    let (h, w) = frame_dims(cases)?;
    let unet = cfg.model_config(h, w);
    unet.validate()?;
    let mut report = Report { label: cfg.label(), ..Report::default() };
    let mut weights = Vec::new();
    let mut timings = BTreeMap::new();
    let started = Instant::now();
    let mut eval_sets: Vec<Vec<usize>> = Vec::new();
    match cfg.protocol {
        EvalProtocol::Holdout => {
            let (train, hold, _) = holdout_plan(cases, cfg)?;
            weights.push(train_and_evaluate(cases, &train, &hold, cfg, &cfg.fed, 0, &mut report)?);
            eval_sets.push(hold);
        }
        EvalProtocol::CrossValidation { k } => {
            let ids: Vec<String> = cases.iter().map(|c| c.case_id.clone()).collect();
            let plan = make_folds(&ids, k, seed::derive(cfg.fed.seed, seed::TAG_FOLDS))?;
            for f in 0..k {
                let (test, train): (Vec<usize>, Vec<usize>) = (0..cases.len()).partition(|&i| plan.assignments[i].1 == f);
                let fed = FedConfig { seed: seed::derive_path(cfg.fed.seed, &[seed::TAG_FOLDS, f as u64]), ..cfg.fed };
                weights.push(train_and_evaluate(cases, &train, &test, cfg, &fed, f, &mut report)?);
                eval_sets.push(test);
            }
        }
    }
    timings.insert("train_and_eval".into(), started.elapsed().as_secs_f64());
    let started = Instant::now();
    let mut baseline_cases = Vec::new();
    for (f, set) in eval_sets.iter().enumerate() {
        let fed_seed = match cfg.protocol {
            EvalProtocol::Holdout => cfg.fed.seed,
            EvalProtocol::CrossValidation { .. } => seed::derive_path(cfg.fed.seed, &[seed::TAG_FOLDS, f as u64]),
        };
        let init = fedavg::init_pair(&unet, fed_seed)?;
        let test_cases: Vec<&PhantomCase> = set.iter().map(|&i| &cases[i]).collect();
        baseline_cases.extend(evaluate_params(&init, &test_cases, &unet, &cfg.pipeline, f)?);
    }
    let mut baseline = Report { cases: baseline_cases, ..Report::default() };
    baseline.finalize()?;
    report.baseline = Some(baseline.aggregate);
    timings.insert("baseline_eval".into(), started.elapsed().as_secs_f64());
    report.finalize()?;
    Ok(RunOutput { report, weights, timings_s: timings })
}

/// Evaluates saved weights on every case of a dataset.
pub fn evaluate_dataset(params: &ModelParams, cases: &[PhantomCase], cfg: &RunConfig) -> Result<Report> {
    let (h, w) = frame_dims(cases)?;
    let unet = cfg.model_config(h, w);
    let refs: Vec<&PhantomCase> = cases.iter().collect();
    let mut report = Report {
        label: format!("eval/{}", cfg.label()),
        cases: evaluate_params(params, &refs, &unet, &cfg.pipeline, 0)?,
        ..Report::default()
    };
    report.finalize()?;
    Ok(report)
}
