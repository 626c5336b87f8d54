//! Seeded experiment runs, baselines and hyperparameter sweeps.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::config::{Ablation, AdaptConfig};
use crate::error::{Error, Result};
use crate::harness::dataset::{load_dataset, Dataset, Split};
use crate::harness::synth::{gen_synthetic_shift, split_nshot, SyntheticSpec};
use crate::model::ModelParams;
use crate::trainer::{adapt, evaluate, init_and_pretrain, TargetTask, TrainReport};

/// Adaptation method. All share pretraining and the frozen classifier; they
/// differ in which target losses are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Labeled target rows only.
    SourcePlusTarget,
    /// Labeled loss plus entropy minimisation.
    Ent,
    /// Full objective, propagation seeded by labeled rows only.
    MeshNa,
    /// Full objective with low-uncertainty seed augmentation.
    Mesh,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::SourcePlusTarget,
        Method::Ent,
        Method::MeshNa,
        Method::Mesh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::SourcePlusTarget => "S+T",
            Method::Ent => "ENT",
            Method::MeshNa => "MESH-nA",
            Method::Mesh => "MESH",
        }
    }

    /// Ablation switches for this method; `base` supplies per-term switches
    /// for the MESH variants.
    pub fn ablation(self, base: Ablation) -> Ablation {
        match self {
            Method::SourcePlusTarget => Ablation::ALL,
            Method::Ent => Ablation {
                no_ent: false,
                ..Ablation::ALL
            },
            Method::MeshNa => Ablation {
                no_augmentation: true,
                ..base
            },
            Method::Mesh => base,
        }
    }

    pub fn configure(self, cfg: &AdaptConfig) -> AdaptConfig {
        let mut c = cfg.clone();
        c.ablation = self.ablation(cfg.ablation);
        c
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s+t" | "st" | "s-t" => Ok(Method::SourcePlusTarget),
            "ent" => Ok(Method::Ent),
            "mesh-na" | "mesh_na" | "meshna" => Ok(Method::MeshNa),
            "mesh" => Ok(Method::Mesh),
            _ => Err(Error::Param(format!(
                "unknown method {s:?} (expected S+T, ENT, MESH-nA or MESH)"
            ))),
        }
    }
}

/// Where the source and target data come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Regenerated per seed.
    Synthetic(SyntheticSpec),
    /// Fixed files. A target without `labeled` rows is split per seed.
    Files { source: PathBuf, target: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub data: DataSource,
    pub method: Method,
    pub cfg: AdaptConfig,
    pub seeds: Vec<u64>,
    pub shots: usize,
    pub test_fraction: f64,
    /// Report path; per-seed epoch logs are written next to it.
    pub out: Option<PathBuf>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic(SyntheticSpec::default()),
            method: Method::Mesh,
            cfg: AdaptConfig::default(),
            seeds: vec![2021, 2022, 2023],
            shots: 3,
            test_fraction: 0.25,
            out: None,
        }
    }
}

/// Outcome of one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub source_val_acc: f64,
    /// Target test accuracy of the source model before adaptation.
    pub target_before_acc: f64,
    pub final_acc: f64,
    /// Unlabeled pseudo-label accuracy, averaged over epochs.
    pub pseudo_acc: Option<f64>,
    /// Accuracy of the selected low-uncertainty seeds, averaged over epochs.
    pub seed_acc: Option<f64>,
    pub train: TrainReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub method: Method,
    pub shots: usize,
    pub rows: Vec<SeedResult>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn mean_opt(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Vec<f64> = v.collect::<Option<Vec<_>>>()?;
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

impl ExperimentReport {
    pub const COLUMNS: &'static [&'static str] = &[
        "seed",
        "source_val_acc",
        "target_before_acc",
        "final_acc",
        "pseudo_acc",
        "seed_acc",
    ];

    fn column(&self, f: impl Fn(&SeedResult) -> Option<f64>) -> Option<Vec<f64>> {
        self.rows.iter().map(f).collect()
    }

    /// Arithmetic mean and population standard deviation of `final_acc`.
    pub fn final_acc(&self) -> (f64, f64) {
        mean_std(&self.rows.iter().map(|r| r.final_acc).collect::<Vec<_>>())
    }

    /// Aggregate row: `(mean, std)` per numeric column, `None` when any seed
    /// lacks the value.
    pub fn aggregate(&self) -> Vec<Option<(f64, f64)>> {
        let cols: [fn(&SeedResult) -> Option<f64>; 5] = [
            |r| Some(r.source_val_acc),
            |r| Some(r.target_before_acc),
            |r| Some(r.final_acc),
            |r| r.pseudo_acc,
            |r| r.seed_acc,
        ];
        cols.iter()
            .map(|f| self.column(f).map(|v| mean_std(&v)))
            .collect()
    }

    /// Tab-separated report: comment header, one row per seed, one
    /// aggregate `mean±std` row.
    pub fn to_text(&self, cfg: &AdaptConfig) -> String {
        let mut s = String::new();
        let seeds: Vec<String> = self.rows.iter().map(|r| r.seed.to_string()).collect();
        let _ = writeln!(
            s,
            "# method={} shots={} seeds={}",
            self.method,
            self.shots,
            seeds.join(",")
        );
        let _ = writeln!(
            s,
            "# config {}",
            cfg.to_text().lines().collect::<Vec<_>>().join("; ")
        );
        s.push_str(&self.body_text());
        s
    }

    /// The table without the comment header.
    pub fn body_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "na".to_string(), |x| format!("{x:.6}"));
        let mut s = Self::COLUMNS.join("\t");
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}",
                r.seed,
                r.source_val_acc,
                r.target_before_acc,
                r.final_acc,
                opt(r.pseudo_acc),
                opt(r.seed_acc)
            );
        }
        s.push_str("mean±std");
        for agg in self.aggregate() {
            match agg {
                Some((m, sd)) => {
                    let _ = write!(s, "\t{m:.6}±{sd:.6}");
                }
                None => s.push_str("\tna"),
            }
        }
        s.push('\n');
        s
    }
}

/// Source and split target for one seed.
fn load_seed_data(spec: &ExperimentSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    let (source, target) = match &spec.data {
        DataSource::Synthetic(s) => gen_synthetic_shift(s, seed)?,
        DataSource::Files { source, target } => (load_dataset(source)?, load_dataset(target)?),
    };
    if source.num_classes != target.num_classes || source.dim() != target.dim() {
        return Err(Error::Data(format!(
            "source ({} features, {} classes) and target ({} features, {} classes) disagree",
            source.dim(),
            source.num_classes,
            target.dim(),
            target.num_classes
        )));
    }
    let target = if target.indices_of(Split::Labeled).is_empty() {
        split_nshot(&target, spec.shots, spec.test_fraction, seed)?
    } else {
        target
    };
    Ok((source, target))
}

/// Pretrained models keyed by seed and every setting that influences
/// pretraining, so sweeps over adaptation knobs reuse them.
#[derive(Default)]
struct PretrainCache {
    models: HashMap<(u64, String), (ModelParams, f64)>,
}

const PRETRAIN_KEYS: &[&str] = &[
    "eps-smooth",
    "lr-encoder",
    "lr-bottleneck",
    "lr-classifier",
    "momentum",
    "batch-size",
    "dropout-rate",
    "train-dropout",
    "pretrain-epochs",
    "hidden-dims",
    "bottleneck-dim",
    "activation",
];

impl PretrainCache {
    fn get(
        &mut self,
        source: &Dataset,
        cfg: &AdaptConfig,
        seed: u64,
        data_key: &str,
    ) -> Result<(ModelParams, f64)> {
        let mut key = data_key.to_string();
        for k in PRETRAIN_KEYS {
            let _ = write!(key, "|{k}={}", cfg.get(k).expect("known key"));
        }
        if let Some(hit) = self.models.get(&(seed, key.clone())) {
            return Ok(hit.clone());
        }
        let model = init_and_pretrain(source, cfg)?;
        let val = evaluate(&model, &source.split(Split::Val))?;
        self.models.insert((seed, key), (model.clone(), val));
        Ok((model, val))
    }
}

fn data_key(spec: &ExperimentSpec) -> String {
    format!(
        "{:?}|shots={}|test={}",
        spec.data, spec.shots, spec.test_fraction
    )
}

fn run_seed(
    spec: &ExperimentSpec,
    method: Method,
    seed: u64,
    cache: &mut PretrainCache,
) -> Result<SeedResult> {
    let (source, target) = load_seed_data(spec, seed)?;
    let mut cfg = method.configure(&spec.cfg);
    cfg.seed = seed;
    let (model, source_val_acc) = cache.get(&source, &cfg, seed, &data_key(spec))?;

    let (task, diagnostics) = TargetTask::from_dataset(&target)?;
    let scoring = {
        let test = target.split(Split::Test);
        if test.is_empty() {
            target.split(Split::Unlabeled)
        } else {
            test
        }
    };
    let target_before_acc = evaluate(&model, &scoring)?;
    // `adapt` only ever sees `task`; `diagnostics` scores progress.
    let (adapted, train) = adapt(model, &task, &cfg, &diagnostics)?;
    let final_acc = evaluate(&adapted, &scoring)?;
    Ok(SeedResult {
        seed,
        source_val_acc,
        target_before_acc,
        final_acc,
        pseudo_acc: mean_opt(train.epochs.iter().map(|e| e.pseudo_accuracy)),
        seed_acc: mean_opt(train.epochs.iter().map(|e| e.seed_accuracy)),
        train,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Path of the per-seed epoch log written next to a report.
pub fn epoch_log_path(report: &Path, seed: u64) -> PathBuf {
    let stem = report
        .file_stem()
        .map_or_else(|| "report".into(), |s| s.to_string_lossy().into_owned());
    report.with_file_name(format!("{stem}.seed{seed}.epochs.tsv"))
}

fn write_report(report: &ExperimentReport, cfg: &AdaptConfig, out: &Path) -> Result<()> {
    write_text(out, &report.to_text(cfg))?;
    for r in &report.rows {
        write_text(&epoch_log_path(out, r.seed), &r.train.to_text())?;
    }
    Ok(())
}

fn run_with_cache(
    spec: &ExperimentSpec,
    method: Method,
    cache: &mut PretrainCache,
) -> Result<ExperimentReport> {
    if spec.seeds.is_empty() {
        return Err(Error::Param("experiment needs at least one seed".into()));
    }
    spec.cfg.validate()?;
    let rows = spec
        .seeds
        .iter()
        .map(|&seed| run_seed(spec, method, seed, cache))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport {
        method,
        shots: spec.shots,
        rows,
    })
}

/// Runs `spec.method` for every seed and writes the report when `spec.out`
/// is set.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    let report = run_with_cache(spec, spec.method, &mut PretrainCache::default())?;
    if let Some(out) = &spec.out {
        write_report(&report, &spec.cfg, out)?;
    }
    Ok(report)
}

/// Runs several methods on the same seeds, pretraining once per seed.
/// Reports are not written.
pub fn run_methods(spec: &ExperimentSpec, methods: &[Method]) -> Result<Vec<ExperimentReport>> {
    let mut cache = PretrainCache::default();
    methods
        .iter()
        .map(|&m| run_with_cache(spec, m, &mut cache))
        .collect()
}

/// One point of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: String,
    pub report: ExperimentReport,
}

/// Varies one setting (`shots` or any config key) over `values`. With
/// `out_dir`, writes `sweep_<key>_<value>.tsv` per point plus
/// `sweep_<key>_summary.tsv`.
pub fn run_sweep(
    base: &ExperimentSpec,
    key: &str,
    values: &[String],
    out_dir: Option<&Path>,
) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(Error::Param("sweep needs at least one value".into()));
    }
    let mut cache = PretrainCache::default();
    let mut points = Vec::with_capacity(values.len());
    for v in values {
        let mut spec = base.clone();
        if key == "shots" {
            spec.shots = v
                .parse()
                .map_err(|_| Error::Param(format!("shots: cannot parse {v:?}")))?;
        } else {
            spec.cfg.set(key, v)?;
        }
        let report = run_with_cache(&spec, spec.method, &mut cache)?;
        if let Some(dir) = out_dir {
            write_report(
                &report,
                &spec.cfg,
                &dir.join(format!("sweep_{key}_{v}.tsv")),
            )?;
        }
        points.push(SweepPoint {
            value: v.clone(),
            report,
        });
    }
    if let Some(dir) = out_dir {
        let mut s = format!(
            "# sweep {key} method={}\n{key}\tfinal_acc_mean\tfinal_acc_std\n",
            base.method
        );
        for p in &points {
            let (m, sd) = p.report.final_acc();
            let _ = writeln!(s, "{}\t{m:.6}\t{sd:.6}", p.value);
        }
        write_text(&dir.join(format!("sweep_{key}_summary.tsv")), &s)?;
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("bogus".parse::<Method>().is_err());
    }

    #[test]
    fn method_ablations() {
        assert_eq!(
            Method::SourcePlusTarget.ablation(Ablation::default()),
            Ablation::ALL
        );
        let ent = Method::Ent.ablation(Ablation::default());
        assert!(!ent.no_ent && ent.no_ps && ent.no_vat && ent.no_div);
        assert!(Method::MeshNa.ablation(Ablation::default()).no_augmentation);
        assert_eq!(
            Method::Mesh.ablation(Ablation::default()),
            Ablation::default()
        );
    }

    #[test]
    fn aggregate_is_mean() {
        let row = |seed, acc| SeedResult {
            seed,
            source_val_acc: 1.0,
            target_before_acc: 0.5,
            final_acc: acc,
            pseudo_acc: None,
            seed_acc: Some(0.5),
            train: TrainReport::default(),
        };
        let r = ExperimentReport {
            method: Method::Mesh,
            shots: 3,
            rows: vec![row(1, 0.7), row(2, 0.8), row(3, 0.9)],
        };
        let (m, _) = r.final_acc();
        assert!((m - 0.8).abs() < 1e-12);
        let agg = r.aggregate();
        assert!(agg[3].is_none());
        let body = r.body_text();
        assert_eq!(body.lines().count(), 5);
        assert!(body.lines().last().unwrap().starts_with("mean±std"));
    }

    #[test]
    fn empty_seed_list_rejected() {
        let spec = ExperimentSpec {
            seeds: vec![],
            ..ExperimentSpec::default()
        };
        assert!(matches!(run_experiment(&spec), Err(Error::Param(_))));
    }
}
