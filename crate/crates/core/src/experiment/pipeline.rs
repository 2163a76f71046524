use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::config::{DataSource, RunConfig};
use super::reports::{latency_rows, write_csv, LatencyRow};
use super::{ensure_dir, io_err, ExperimentError};
use crate::data::{gen_synthetic, load_cifar10_split, resize_bilinear, CifarSplit, DatasetSplit};
use crate::latency::{
    builtin_cost_table, census_of_model, latency_estimate, pareto_frontier, write_pareto_csv,
    CostTable, NonlinearityCensus, ParetoPoint,
};
use crate::rng::Rng;
use crate::train::{
    accuracy, finetune, layerwise_taylorize_baseline, per_class_accuracy, privit_search,
    teacher_logits, train_supervised, FinetuneRow, HistoryRow, SupervisedRow, TrainError,
};
use crate::vit::{write_checkpoint, AttentionVariant, Model, SwitchSet};

const TEST_SEED_SALT: u64 = 0x5eed_7e57;

/// Train and test splits described by `cfg.data`.
pub fn load_data(cfg: &RunConfig) -> Result<(DatasetSplit, DatasetSplit), ExperimentError> {
    let m = &cfg.model;
    match cfg.data.source {
        DataSource::Synthetic => {
            let train = gen_synthetic(
                m.num_classes,
                cfg.data.train_per_class,
                m.image_size,
                m.channels,
                cfg.seed,
            )?;
            let test = gen_synthetic(
                m.num_classes,
                cfg.data.test_per_class.max(1),
                m.image_size,
                m.channels,
                cfg.seed ^ TEST_SEED_SALT,
            )?;
            Ok((train, test))
        }
        DataSource::Cifar10 => {
            let dir = cfg
                .data
                .path
                .as_ref()
                .ok_or_else(|| ExperimentError::Config("data.path missing".into()))?;
            let train =
                load_cifar10_split(dir, CifarSplit::Train, cfg.data.train_per_class, cfg.seed)?;
            let test = load_cifar10_split(
                dir,
                CifarSplit::Test,
                cfg.data.test_per_class.max(1),
                cfg.seed,
            )?;
            Ok((
                resize_bilinear(&train, m.image_size),
                resize_bilinear(&test, m.image_size),
            ))
        }
    }
}

/// Builtin costs merged with `cfg.cost_overrides`.
pub fn cost_table(cfg: &RunConfig) -> Result<CostTable, ExperimentError> {
    let mut table = builtin_cost_table();
    if let Some(path) = &cfg.cost_overrides {
        let file = std::fs::File::open(path).map_err(io_err(path))?;
        table.apply_overrides(file)?;
    }
    Ok(table)
}

/// Independent random streams for the stages of one run.
struct Streams {
    init: Rng,
    pretrain: Rng,
    student_init: Rng,
    search: Rng,
    finetune: Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let mut root = Rng::new(seed);
        Self {
            init: root.fork(),
            pretrain: root.fork(),
            student_init: root.fork(),
            search: root.fork(),
            finetune: root.fork(),
        }
    }
}

#[derive(Serialize)]
struct Metric<'a> {
    key: &'a str,
    value: String,
}

fn write_metrics(path: &Path, metrics: &[(&str, String)]) -> Result<(), ExperimentError> {
    let rows: Vec<Metric> = metrics
        .iter()
        .map(|(k, v)| Metric {
            key: k,
            value: v.clone(),
        })
        .collect();
    write_csv(path, &rows)
}

fn write_config(cfg: &RunConfig, dir: &Path) -> Result<(), ExperimentError> {
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml()).map_err(io_err(&path))
}

pub struct PretrainRun {
    pub teacher: Model,
    pub history: Vec<SupervisedRow>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

fn pretrain(
    cfg: &RunConfig,
    train: &DatasetSplit,
    test: &DatasetSplit,
    streams: &mut Streams,
) -> Result<PretrainRun, ExperimentError> {
    let mut teacher = Model::new(cfg.model.clone(), cfg.search.epsilon, &mut streams.init)?;
    teacher.switches = SwitchSet::all_on(&cfg.model, cfg.search.epsilon);
    let history = train_supervised(&mut teacher, train, &cfg.pretrain, &mut streams.pretrain)?;
    Ok(PretrainRun {
        train_accuracy: accuracy(&teacher, train)?,
        test_accuracy: accuracy(&teacher, test)?,
        teacher,
        history,
    })
}

fn save_pretrain(run: &PretrainRun, dir: &Path) -> Result<(), ExperimentError> {
    write_checkpoint(&run.teacher, dir.join("teacher.pvit"))?;
    write_csv(&dir.join("pretrain.csv"), &run.history)?;
    Ok(())
}

/// Trains the all-nonlinear teacher and writes `teacher.pvit`,
/// `pretrain.csv` and `metrics.csv` into `cfg.out_dir`.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PretrainRun, ExperimentError> {
    cfg.validate()?;
    let dir = ensure_dir(&cfg.out_dir)?;
    let (train, test) = load_data(cfg)?;
    let run = pretrain(cfg, &train, &test, &mut Streams::new(cfg.seed))?;
    write_config(cfg, &dir)?;
    save_pretrain(&run, &dir)?;
    write_metrics(
        &dir.join("metrics.csv"),
        &[
            ("epochs", run.history.len().to_string()),
            ("train_accuracy", run.train_accuracy.to_string()),
            ("test_accuracy", run.test_accuracy.to_string()),
        ],
    )?;
    Ok(run)
}

/// Results of one search + finetune run.
#[derive(Clone, Debug)]
pub struct SearchRun {
    pub model: Model,
    pub history: Vec<HistoryRow>,
    pub finetune: Vec<FinetuneRow>,
    pub census: NonlinearityCensus,
    pub latency: Vec<LatencyRow>,
    pub latency_reluops: f64,
    pub teacher_test_accuracy: f64,
    /// Test accuracy right after binarization, before finetuning.
    pub binarized_test_accuracy: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub per_class_test_accuracy: Vec<f64>,
    pub teacher_per_class_test_accuracy: Vec<f64>,
}

#[derive(Serialize)]
struct CensusRow {
    layer: String,
    softmax_rows: u64,
    taylor_rows: u64,
    layernorms: u64,
    gelu_elements: u64,
}

fn census_rows(c: &NonlinearityCensus) -> Vec<CensusRow> {
    let mut rows: Vec<CensusRow> = c
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| CensusRow {
            layer: i.to_string(),
            softmax_rows: l.softmax_rows,
            taylor_rows: l.taylor_rows,
            layernorms: l.layernorms,
            gelu_elements: l.gelu_elements,
        })
        .collect();
    rows.push(CensusRow {
        layer: "final".into(),
        softmax_rows: 0,
        taylor_rows: 0,
        layernorms: c.final_layernorms,
        gelu_elements: 0,
    });
    rows
}

/// Search, binarize and finetune a student, writing `model.pvit`,
/// `history.csv`, `finetune.csv`, `census.csv`, `latency.csv` and
/// `metrics.csv` into `cfg.out_dir`.
///
/// Without a `teacher` one is pretrained first from the same seed and
/// saved as `teacher.pvit`. On non-convergence `history.csv` is still
/// written before the error is returned.
pub fn cmd_search(cfg: &RunConfig, teacher: Option<&Model>) -> Result<SearchRun, ExperimentError> {
    cfg.validate()?;
    let dir = ensure_dir(&cfg.out_dir)?;
    let table = cost_table(cfg)?;
    let (train, test) = load_data(cfg)?;
    let mut streams = Streams::new(cfg.seed);
    write_config(cfg, &dir)?;

    let owned;
    let teacher = match teacher {
        Some(t) => {
            if t.config != cfg.model {
                return Err(ExperimentError::Config(
                    "teacher model config differs from the run config".into(),
                ));
            }
            t
        }
        None => {
            let run = pretrain(cfg, &train, &test, &mut streams)?;
            save_pretrain(&run, &dir)?;
            owned = run.teacher;
            &owned
        }
    };

    let mut student = if cfg.init_from_teacher {
        teacher.clone()
    } else {
        Model::new(
            cfg.model.clone(),
            cfg.search.epsilon,
            &mut streams.student_init,
        )?
    };
    student.switches = SwitchSet::new(&cfg.model, cfg.search.epsilon);
    let soft = if cfg.search.kd_enabled {
        Some(teacher_logits(teacher, &train)?)
    } else {
        None
    };

    let history_path = dir.join("history.csv");
    let outcome = match privit_search(
        &mut student,
        soft.as_ref(),
        &train,
        &cfg.search,
        &mut streams.search,
    ) {
        Ok(o) => o,
        Err(TrainError::NonConvergence { epochs, history }) => {
            write_csv(&history_path, &history)?;
            return Err(TrainError::NonConvergence { epochs, history }.into());
        }
        Err(e) => return Err(e.into()),
    };
    write_csv(&history_path, &outcome.history)?;
    let binarized_test_accuracy = accuracy(&student, &test)?;

    let ft = finetune(
        &mut student,
        soft.as_ref(),
        &train,
        &cfg.search,
        &mut streams.finetune,
    )?;
    write_csv(&dir.join("finetune.csv"), &ft)?;
    write_checkpoint(&student, dir.join("model.pvit"))?;

    let census = census_of_model(&student)?;
    write_csv(&dir.join("census.csv"), &census_rows(&census))?;
    let latency = latency_rows(&census, &table)?;
    write_csv(&dir.join("latency.csv"), &latency)?;
    let report = latency_estimate(&census.entries(), &table)?;

    let run = SearchRun {
        teacher_test_accuracy: accuracy(teacher, &test)?,
        teacher_per_class_test_accuracy: per_class_accuracy(teacher, &test)?,
        binarized_test_accuracy,
        train_accuracy: accuracy(&student, &train)?,
        test_accuracy: accuracy(&student, &test)?,
        per_class_test_accuracy: per_class_accuracy(&student, &test)?,
        latency_reluops: report.total_reluops,
        history: outcome.history,
        finetune: ft,
        census,
        latency,
        model: student,
    };
    let (g, s) = run.model.switches.count_active();
    write_metrics(
        &dir.join("metrics.csv"),
        &[
            ("search_epochs", run.history.len().to_string()),
            ("gelu_count", g.to_string()),
            ("softmax_count", s.to_string()),
            ("latency_reluops", run.latency_reluops.to_string()),
            ("latency_m", report.latency_m().to_string()),
            (
                "latency_source",
                if report.estimated {
                    "estimate"
                } else {
                    "exact"
                }
                .to_string(),
            ),
            (
                "teacher_test_accuracy",
                run.teacher_test_accuracy.to_string(),
            ),
            (
                "binarized_test_accuracy",
                run.binarized_test_accuracy.to_string(),
            ),
            ("train_accuracy", run.train_accuracy.to_string()),
            ("test_accuracy", run.test_accuracy.to_string()),
        ],
    )?;
    Ok(run)
}

fn shared_teacher(cfg: &RunConfig) -> Result<Model, ExperimentError> {
    let (train, test) = load_data(cfg)?;
    Ok(pretrain(cfg, &train, &test, &mut Streams::new(cfg.seed))?.teacher)
}

/// One grid cell of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepCell {
    pub label: String,
    pub gelu_budget: usize,
    pub softmax_budget: usize,
    pub status: String,
    pub latency_reluops: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub search_epochs: Option<usize>,
}

pub struct SweepResult {
    /// Cells sorted by `(gelu_budget, softmax_budget)`.
    pub cells: Vec<SweepCell>,
    pub points: Vec<ParetoPoint>,
    pub frontier: Vec<ParetoPoint>,
}

/// Runs `cmd_search` for every `(G, S)` pair in parallel, sharing one
/// teacher. Writes `sweep.csv`, `pareto.csv` and one subdirectory per cell.
/// A failing cell is recorded and does not stop the sweep.
pub fn cmd_sweep(
    base: &RunConfig,
    gelu_budgets: &[usize],
    softmax_budgets: &[usize],
) -> Result<SweepResult, ExperimentError> {
    base.validate()?;
    if gelu_budgets.is_empty() || softmax_budgets.is_empty() {
        return Err(ExperimentError::Config("sweep grid is empty".into()));
    }
    let dir = ensure_dir(&base.out_dir)?;
    write_config(base, &dir)?;
    let teacher = shared_teacher(base)?;
    let grid: Vec<(usize, usize)> = gelu_budgets
        .iter()
        .flat_map(|&g| softmax_budgets.iter().map(move |&s| (g, s)))
        .collect();
    let mut cells: Vec<SweepCell> = grid
        .par_iter()
        .map(|&(g, s)| {
            let label = format!("g{g}_s{s}");
            let mut cfg = base.clone();
            cfg.search.gelu_budget = g;
            cfg.search.softmax_budget = s;
            cfg.out_dir = base.out_dir.join("cells").join(&label);
            match cmd_search(&cfg, Some(&teacher)) {
                Ok(run) => SweepCell {
                    label,
                    gelu_budget: g,
                    softmax_budget: s,
                    status: "ok".into(),
                    latency_reluops: Some(run.latency_reluops),
                    test_accuracy: Some(run.test_accuracy),
                    search_epochs: Some(run.history.len()),
                },
                Err(e) => SweepCell {
                    label,
                    gelu_budget: g,
                    softmax_budget: s,
                    status: format!("error: {e}"),
                    latency_reluops: None,
                    test_accuracy: None,
                    search_epochs: None,
                },
            }
        })
        .collect();
    cells.sort_by_key(|c| (c.gelu_budget, c.softmax_budget));
    cells.dedup_by_key(|c| (c.gelu_budget, c.softmax_budget));
    write_csv(&dir.join("sweep.csv"), &cells)?;

    let points: Vec<ParetoPoint> = cells
        .iter()
        .filter_map(|c| {
            Some(ParetoPoint::new(
                c.label.clone(),
                c.latency_reluops?,
                c.test_accuracy?,
            ))
        })
        .collect();
    let frontier = if points.is_empty() {
        Vec::new()
    } else {
        pareto_frontier(&points)?
    };
    let file = std::fs::File::create(dir.join("pareto.csv")).map_err(io_err(&dir))?;
    write_pareto_csv(&points, &frontier, file)?;
    Ok(SweepResult {
        cells,
        points,
        frontier,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub gelu_budget: usize,
    pub softmax_budget: usize,
    pub status: String,
    pub test_accuracy: Option<f64>,
    pub latency_reluops: Option<f64>,
}

/// Runs the same search once per attention surrogate and writes
/// `ablation.csv`.
pub fn cmd_ablate_attention(
    cfg: &RunConfig,
    variants: &[AttentionVariant],
) -> Result<Vec<AblationRow>, ExperimentError> {
    cfg.validate()?;
    let dir = ensure_dir(&cfg.out_dir)?;
    write_config(cfg, &dir)?;
    let teacher = shared_teacher(cfg)?;
    let mut rows = Vec::new();
    for &variant in variants {
        let mut run_cfg = cfg.clone();
        run_cfg.model.attn_variant = variant;
        run_cfg.out_dir = cfg.out_dir.join(variant.name());
        // With every switch at 1 the surrogate is never evaluated, so the
        // teacher is shared across variants.
        let mut t = teacher.clone();
        t.config.attn_variant = variant;
        let (status, acc, lat) = match cmd_search(&run_cfg, Some(&t)) {
            Ok(run) => (
                "ok".to_string(),
                Some(run.test_accuracy),
                Some(run.latency_reluops),
            ),
            Err(e @ ExperimentError::Train(TrainError::NonConvergence { .. })) => {
                (format!("error: {e}"), None, None)
            }
            Err(e) => return Err(e),
        };
        rows.push(AblationRow {
            variant: variant.name().to_string(),
            gelu_budget: cfg.search.gelu_budget,
            softmax_budget: cfg.search.softmax_budget,
            status,
            test_accuracy: acc,
            latency_reluops: lat,
        });
    }
    write_csv(&dir.join("ablation.csv"), &rows)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BaselineRow {
    pub method: String,
    pub k: usize,
    pub gelu_budget: usize,
    pub softmax_budget: usize,
    pub gelu_count: usize,
    pub softmax_count: usize,
    pub test_accuracy: f64,
    pub latency_reluops: f64,
}

/// For each `k`, linearizes the GELUs of the last `k` layers of the
/// teacher and finetunes (`layerwise`), then runs the switch search at the
/// same GELU budget with the softmax budget at its total (`search`).
/// Writes `baseline.csv`.
pub fn cmd_baseline(cfg: &RunConfig, ks: &[usize]) -> Result<Vec<BaselineRow>, ExperimentError> {
    cfg.validate()?;
    let dir = ensure_dir(&cfg.out_dir)?;
    write_config(cfg, &dir)?;
    let table = cost_table(cfg)?;
    let (train, test) = load_data(cfg)?;
    let teacher = pretrain(cfg, &train, &test, &mut Streams::new(cfg.seed))?.teacher;
    let soft = if cfg.search.kd_enabled {
        Some(teacher_logits(&teacher, &train)?)
    } else {
        None
    };
    let (g_total, s_total) = cfg.switch_totals();
    let layers = cfg.model.num_layers;
    let mut rows = Vec::new();
    for &k in ks {
        let gelu_budget = g_total * (layers - k.min(layers)) / layers;

        let mut base = layerwise_taylorize_baseline(&teacher, k)?;
        let mut rng = Rng::new(cfg.seed).fork();
        finetune(&mut base, soft.as_ref(), &train, &cfg.search, &mut rng)?;
        let sub = ensure_dir(&cfg.out_dir.join(format!("k{k}_layerwise")))?;
        write_checkpoint(&base, sub.join("model.pvit"))?;
        let census = census_of_model(&base)?;
        let (g, s) = base.switches.count_active();
        rows.push(BaselineRow {
            method: "layerwise".into(),
            k,
            gelu_budget,
            softmax_budget: s_total,
            gelu_count: g,
            softmax_count: s,
            test_accuracy: accuracy(&base, &test)?,
            latency_reluops: latency_estimate(&census.entries(), &table)?.total_reluops,
        });

        let mut run_cfg = cfg.clone();
        run_cfg.search.gelu_budget = gelu_budget;
        run_cfg.search.softmax_budget = s_total;
        run_cfg.out_dir = cfg.out_dir.join(format!("k{k}_search"));
        let run = cmd_search(&run_cfg, Some(&teacher))?;
        let (g, s) = run.model.switches.count_active();
        rows.push(BaselineRow {
            method: "search".into(),
            k,
            gelu_budget,
            softmax_budget: s_total,
            gelu_count: g,
            softmax_count: s,
            test_accuracy: run.test_accuracy,
            latency_reluops: run.latency_reluops,
        });
    }
    write_csv(&dir.join("baseline.csv"), &rows)?;
    Ok(rows)
}
