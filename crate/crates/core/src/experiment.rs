//! Experiment harness: single train-and-evaluate runs on a generated world,
//! the three-row ablation, and one-parameter sweeps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::data::split_paired;
use crate::error::{FsacError, Result};
use crate::eval::{MetricsReport, CMC_RANKS};
use crate::stmetric::StParams;
use crate::synth::{generate_world, World};
use crate::trainer::{run_fsac, snapshot, EvalSets, EvalSnapshot, TrainOutcome};

/// Train on the train side of a seeded split of `world`, then evaluate the
/// held-out query and gallery sides.
pub fn train_and_evaluate(world: &World, cfg: &PipelineConfig) -> Result<(TrainOutcome, EvalSnapshot)> {
    cfg.validate()?;
    let (face, body) = split_paired(&world.faces, &world.bodies, &world.graph, cfg.eval.gallery_ratio, cfg.seed)?;
    let graph = world.graph.restrict(&face.train, &body.train);
    let sets = EvalSets { face, body };
    let outcome = run_fsac(
        &sets.face.train,
        &sets.body.train,
        &graph,
        &cfg.cluster,
        &cfg.train,
        cfg.eval.per_epoch.then_some(&sets),
    )?;
    let report = snapshot(&sets, &outcome.face_head, &outcome.body_head)?;
    Ok((outcome, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Classic triplet (σ = η = 0), no fusion.
    Baseline,
    /// Spatial-temporal triplet, no fusion.
    StTriplet,
    /// Spatial-temporal triplet plus face-body fusion.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::StTriplet, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::StTriplet => "+st-triplet",
            Variant::Full => "+st-triplet+fusion",
        }
    }

    pub fn apply(self, base: &PipelineConfig) -> PipelineConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Baseline => {
                cfg.train.st_params = StParams::CLASSIC;
                cfg.train.fusion = false;
            }
            Variant::StTriplet => cfg.train.fusion = false,
            Variant::Full => cfg.train.fusion = true,
        }
        cfg
    }
}

/// Mean and population standard deviation of each metric over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: MetricsReport,
    pub std: MetricsReport,
}

impl MetricSummary {
    pub fn of(reports: &[MetricsReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(FsacError::EmptyQuerySet);
        }
        let n = reports.len() as f64;
        let stat = |get: &dyn Fn(&MetricsReport) -> f64| {
            let mean = reports.iter().map(get).sum::<f64>() / n;
            let var = reports.iter().map(|r| (get(r) - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        };
        let (map_mean, map_std) = stat(&|r| r.map);
        let mut mean = MetricsReport {
            map: map_mean,
            cmc: Default::default(),
            n_queries: reports.iter().map(|r| r.n_queries).sum::<usize>() / reports.len(),
            n_rejected: reports.iter().map(|r| r.n_rejected).sum::<usize>() / reports.len(),
        };
        let mut std = MetricsReport {
            map: map_std,
            cmc: Default::default(),
            n_queries: 0,
            n_rejected: 0,
        };
        for k in CMC_RANKS {
            let (m, s) = stat(&|r| r.rank(k));
            mean.cmc.insert(k, m);
            std.cmc.insert(k, s);
        }
        Ok(Self { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub name: String,
    /// One snapshot per seed, in seed order.
    pub per_seed: Vec<EvalSnapshot>,
    pub face: MetricSummary,
    pub body: MetricSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["variant", "part", "mAP", "rank1", "rank5", "rank10", "mAP_std"])
            .map_err(|e| csv_err(path, e))?;
        for row in &self.rows {
            for (part, s) in [("face", &row.face), ("body", &row.body)] {
                let m = &s.mean;
                let rec = [
                    row.name.clone(),
                    part.to_string(),
                    m.map.to_string(),
                    m.rank(1).to_string(),
                    m.rank(5).to_string(),
                    m.rank(10).to_string(),
                    s.std.map.to_string(),
                ];
                w.write_record(&rec).map_err(|e| csv_err(path, e))?;
            }
        }
        w.flush().map_err(|e| FsacError::io(path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> FsacError {
    FsacError::io(path, std::io::Error::other(e))
}

/// Seeds `base.seed, base.seed + 1, ...`, `base.eval.n_seeds` of them.
pub fn experiment_seeds(base: &PipelineConfig) -> Vec<u64> {
    (0..base.eval.n_seeds as u64).map(|i| base.seed.wrapping_add(i)).collect()
}

/// Runs every variant on a freshly generated world per seed. The world comes
/// from `base.world` (or the default world) with the seed applied.
pub fn ablation_suite(base: &PipelineConfig) -> Result<AblationTable> {
    base.validate()?;
    let seeds = experiment_seeds(base);
    let mut per_variant: Vec<Vec<EvalSnapshot>> = vec![Vec::new(); Variant::ALL.len()];
    for &seed in &seeds {
        let cfg = base.seeded(seed);
        let mut world_cfg = base.world_or_default();
        world_cfg.seed = seed;
        let world = generate_world(&world_cfg)?;
        for (v, out) in Variant::ALL.iter().zip(per_variant.iter_mut()) {
            let (_, report) = train_and_evaluate(&world, &v.apply(&cfg))?;
            log::info!("seed {seed} {}: face mAP {:.4}", v.name(), report.face.map);
            out.push(report);
        }
    }
    let rows = Variant::ALL
        .iter()
        .zip(per_variant)
        .map(|(&variant, per_seed)| {
            let face: Vec<_> = per_seed.iter().map(|s| s.face.clone()).collect();
            let body: Vec<_> = per_seed.iter().map(|s| s.body.clone()).collect();
            Ok(AblationRow {
                variant,
                name: variant.name().to_string(),
                face: MetricSummary::of(&face)?,
                body: MetricSummary::of(&body)?,
                per_seed,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AblationTable { seeds, rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Sigma,
    Eta,
}

impl std::str::FromStr for SweepParam {
    type Err = FsacError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigma" => Ok(Self::Sigma),
            "eta" => Ok(Self::Eta),
            other => Err(FsacError::invalid("param", format!("expected sigma or eta, got `{other}`"))),
        }
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Sigma => "sigma",
            SweepParam::Eta => "eta",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub report: EvalSnapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub param: SweepParam,
    pub points: Vec<SweepPoint>,
}

impl SweepCurve {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record([self.param.name(), "face_mAP", "face_rank1", "face_rank5", "face_rank10", "body_mAP", "body_rank1"])
            .map_err(|e| csv_err(path, e))?;
        for p in &self.points {
            let (f, b) = (&p.report.face, &p.report.body);
            let rec = [
                p.value.to_string(),
                f.map.to_string(),
                f.rank(1).to_string(),
                f.rank(5).to_string(),
                f.rank(10).to_string(),
                b.map.to_string(),
                b.rank(1).to_string(),
            ];
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| FsacError::io(path, e))
    }
}

/// One full run per value on the same world and seed.
pub fn sweep(param: SweepParam, values: &[f64], world: &World, base: &PipelineConfig) -> Result<SweepCurve> {
    if values.is_empty() {
        return Err(FsacError::invalid("values", "sweep needs at least one value"));
    }
    let mut points = Vec::with_capacity(values.len());
    for &value in values {
        let mut cfg = base.clone();
        match param {
            SweepParam::Sigma => cfg.train.st_params.sigma = value,
            SweepParam::Eta => cfg.train.st_params.eta = value,
        }
        let (_, report) = train_and_evaluate(world, &cfg)?;
        points.push(SweepPoint { value, report });
    }
    Ok(SweepCurve { param, points })
}
