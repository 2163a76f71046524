//! Acceptance criteria 1-9. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass criterion numbers as arguments to run
//! a subset, e.g. `cargo test -p privit-core --test acceptance -- 3 6`.

mod common;

use std::cell::OnceCell;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{brute_force_frontier, reference_forward, RefSwitches};
use privit_core::autodiff::grad_check_many;
use privit_core::experiment::{cmd_baseline, cmd_pretrain, cmd_search, RunConfig, SearchRun};
use privit_core::latency::{
    builtin_cost_table, census_of_switches, cost_of, latency_estimate, pareto_frontier,
    CensusEntry, CostTag, ParetoPoint,
};
use privit_core::train::{kd_loss, privit_loss, SearchConfig};
use privit_core::vit::{
    vit_forward, AttentionVariant, MaskSelection, Model, ModelConfig, ModelParams, Params,
    SwitchSet, SwitchVars, VitError,
};
use privit_core::{Graph, Rng, Tensor};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn desk_config(seed: u64, out: &Path) -> RunConfig {
    RunConfig {
        seed,
        out_dir: out.to_path_buf(),
        ..RunConfig::default()
    }
}

/// Budgets at `pct` percent of each mask's entries.
fn budgets(cfg: &RunConfig, pct: usize) -> (usize, usize) {
    let (g, s) = cfg.switch_totals();
    (g * pct / 100, s * pct / 100)
}

struct QuarterRun {
    seed: u64,
    result: Result<SearchRun, String>,
    elapsed: Duration,
}

/// Runs shared by criteria 4 and 5: search + finetune at 25%/25% budgets.
struct Ctx {
    quarter: OnceCell<Vec<QuarterRun>>,
}

impl Ctx {
    fn quarter_runs(&self) -> &[QuarterRun] {
        self.quarter.get_or_init(|| {
            (0..3)
                .map(|seed| {
                    let dir = tempfile::tempdir().unwrap();
                    let mut cfg = desk_config(seed, dir.path());
                    (cfg.search.gelu_budget, cfg.search.softmax_budget) = budgets(&cfg, 25);
                    let t = Instant::now();
                    let result = cmd_search(&cfg, None).map_err(|e| e.to_string());
                    QuarterRun {
                        seed,
                        result,
                        elapsed: t.elapsed(),
                    }
                })
                .collect()
        })
    }
}

fn gradient_correctness(_: &Ctx) -> Check {
    let start = Instant::now();
    let loss_cfg = SearchConfig::default();
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let cfg = ModelConfig::default();
        let mut rng = Rng::new(100 + seed);
        let mut m = Model::new(cfg.clone(), 0.001, &mut rng).unwrap();
        m.params.pos_embed = rng.uniform_tensor(m.params.pos_embed.shape(), -1.0, 1.0);
        m.params.cls_token = rng.uniform_tensor(m.params.cls_token.shape(), -1.0, 1.0);
        // Interior switch values keep |s| differentiable.
        m.switches.gelu = rng.uniform_tensor(m.switches.gelu.shape(), 0.2, 1.0);
        m.switches.softmax = rng.uniform_tensor(m.switches.softmax.shape(), 0.2, 1.0);
        let x = rng.uniform_tensor(&[2, cfg.image_size, cfg.image_size, cfg.channels], 0.0, 1.0);
        let labels = [rng.below(cfg.num_classes), rng.below(cfg.num_classes)];
        let teacher = rng.normal_tensor(&[2, cfg.num_classes], 2.0);

        let mut inputs: Vec<Tensor> = m.params.refs().into_iter().cloned().collect();
        inputs.push(m.switches.gelu.clone());
        inputs.push(m.switches.softmax.clone());
        let n = m.params.count();
        let report = grad_check_many(
            |g: &mut Graph, vars| {
                let params = Params::from_flat(cfg.num_layers, vars[..n].iter().copied());
                let switches = SwitchVars {
                    gelu: vars[n],
                    softmax: vars[n + 1],
                };
                let xv = g.constant(x.clone());
                let logits = vit_forward(g, &cfg, &params, &switches, xv)?;
                let main = privit_loss(
                    g,
                    logits,
                    &labels,
                    &switches,
                    (false, false),
                    loss_cfg.lambda_g,
                    loss_cfg.lambda_s,
                )?;
                let t = g.constant(teacher.clone());
                let kd = kd_loss(g, logits, t, loss_cfg.kd_temperature)?;
                Ok::<_, VitError>(g.add(main, kd)?)
            },
            &inputs,
            1e-5,
        )
        .map_err(|e| e.to_string())?;
        let names = ModelParams::shapes(&cfg).names();
        let at = names
            .get(report.worst.0)
            .cloned()
            .unwrap_or_else(|| "switches".into());
        ensure(report.max_rel_error < 1e-4, || {
            format!(
                "seed {}: max rel error {:.3e} at {at}[{}] (analytic {:.6e}, numeric {:.6e})",
                100 + seed,
                report.max_rel_error,
                report.worst.1,
                report.analytic,
                report.numeric
            )
        })?;
        worst = worst.max(report.max_rel_error);
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "max rel error {worst:.2e} over 3 seeds in {:.1}s",
        elapsed.as_secs_f64()
    ))
}

fn switch_endpoints(_: &Ctx) -> Check {
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let cfg = ModelConfig {
            attn_variant: AttentionVariant::Squared,
            ..ModelConfig::default()
        };
        let mut rng = Rng::new(200 + seed);
        let mut m = Model::new(cfg.clone(), 0.001, &mut rng).unwrap();
        m.params.pos_embed = rng.uniform_tensor(m.params.pos_embed.shape(), -1.0, 1.0);
        let x = rng.uniform_tensor(&[3, cfg.image_size, cfg.image_size, cfg.channels], 0.0, 1.0);

        let on = reference_forward(&cfg, &m.params, &RefSwitches::constant(&cfg, 1.0, 1.0), &x);
        let d_on = m.logits(&x).unwrap().max_abs_diff(&on);

        m.switches.gelu = Tensor::zeros(m.switches.gelu.shape());
        m.switches.softmax = Tensor::zeros(m.switches.softmax.shape());
        let off = reference_forward(&cfg, &m.params, &RefSwitches::constant(&cfg, 0.0, 0.0), &x);
        let d_off = m.logits(&x).unwrap().max_abs_diff(&off);
        ensure(d_on < 1e-10 && d_off < 1e-10, || {
            format!("seed {seed}: all-on diff {d_on:.2e}, all-off diff {d_off:.2e}")
        })?;
        worst = worst.max(d_on).max(d_off);
    }
    Ok(format!("max |diff| {worst:.2e}"))
}

fn cost_table_fidelity(_: &Ctx) -> Check {
    let table = builtin_cost_table();
    for (tag, n, want) in [
        (CostTag::Softmax, 197, 18586u64),
        (CostTag::Layernorm, 192, 6504),
        (CostTag::Gelu, 1, 270),
        (CostTag::Square, 197, 3248),
        (CostTag::ReluSoftmax, 257, 4428),
        (CostTag::ReluSoftmax, 65, 1133),
        (CostTag::Layernorm, 256, 8614),
    ] {
        let got = cost_of(tag, n, &table).map_err(|e| e.to_string())?;
        ensure(got.fract() == 0.0 && got as u64 == want, || {
            format!("{tag}({n}) = {got}, want {want}")
        })?;
    }
    let entries = [
        CensusEntry {
            tag: CostTag::Softmax,
            n: 197,
            count: 1000,
        },
        CensusEntry {
            tag: CostTag::Layernorm,
            n: 192,
            count: 1000,
        },
        CensusEntry {
            tag: CostTag::Gelu,
            n: 1,
            count: 1000,
        },
    ];
    let total = latency_estimate(&entries, &table)
        .map_err(|e| e.to_string())?
        .total_reluops;
    ensure(total == 25_360_000.0, || {
        format!("hypothetical network = {total}")
    })?;
    Ok("7 anchors exact, hypothetical network = 25360000 ReLUOps".into())
}

fn algorithm_contract(ctx: &Ctx) -> Check {
    let run = &ctx.quarter_runs()[0];
    let r = run
        .result
        .as_ref()
        .map_err(|e| format!("seed {}: {e}", run.seed))?;
    let dir = tempfile::tempdir().unwrap();
    let cfg = {
        let mut c = desk_config(run.seed, dir.path());
        (c.search.gelu_budget, c.search.softmax_budget) = budgets(&c, 25);
        c
    };
    let s = &cfg.search;
    let h = &r.history;
    ensure(h.len() <= 300, || format!("{} epochs", h.len()))?;
    ensure(r.model.switches.is_binarized(), || {
        "masks not binary".into()
    })?;
    let (g, sc) = r.model.switches.count_active();
    ensure(g <= s.gelu_budget && sc <= s.softmax_budget, || {
        format!(
            "counts ({g}, {sc}) over budgets ({}, {})",
            s.gelu_budget, s.softmax_budget
        )
    })?;
    let mut prev = (s.lambda_g, s.lambda_s, usize::MAX, usize::MAX);
    for row in h {
        for (before, after) in [(prev.0, row.lambda_g), (prev.1, row.lambda_s)] {
            ensure(after == before || after == before * s.kappa, || {
                format!("epoch {}: lambda {before} -> {after}", row.epoch)
            })?;
        }
        ensure(
            row.lowest_gelu_count <= prev.2 && row.lowest_softmax_count <= prev.3,
            || format!("epoch {}: lowest counts increased", row.epoch),
        )?;
        prev = (
            row.lambda_g,
            row.lambda_s,
            row.lowest_gelu_count,
            row.lowest_softmax_count,
        );
    }
    ensure(run.elapsed < Duration::from_secs(600), || {
        format!("took {:?}", run.elapsed)
    })?;
    Ok(format!(
        "budgets ({}, {}), {} epochs, final counts ({g}, {sc}), run {:.1}s",
        s.gelu_budget,
        s.softmax_budget,
        h.len(),
        run.elapsed.as_secs_f64()
    ))
}

fn quality_retention(ctx: &Ctx) -> Check {
    let mut parts = Vec::new();
    let mut failures = Vec::new();
    for run in ctx.quarter_runs() {
        match &run.result {
            Ok(r) => {
                let gap = 100.0 * (r.teacher_test_accuracy - r.test_accuracy);
                parts.push(format!(
                    "seed {}: {:.1}% vs teacher {:.1}%",
                    run.seed,
                    100.0 * r.test_accuracy,
                    100.0 * r.teacher_test_accuracy
                ));
                if gap > 3.0 {
                    failures.push(format!("seed {} drops {gap:.1} points", run.seed));
                }
            }
            Err(e) => failures.push(format!("seed {}: {e}", run.seed)),
        }
    }
    ensure(failures.is_empty(), || failures.join("; "))?;
    Ok(parts.join(", "))
}

fn latency_and_pareto(_: &Ctx) -> Check {
    let table = builtin_cost_table();
    let total = |cfg: &ModelConfig, s: &SwitchSet| -> Result<f64, String> {
        let census = census_of_switches(cfg, s).map_err(|e| e.to_string())?;
        Ok(latency_estimate(&census.entries(), &table)
            .map_err(|e| e.to_string())?
            .total_reluops)
    };

    let base_cfg = ModelConfig::vit_base();
    let mut full = SwitchSet::new(&base_cfg, 0.001);
    full.binarize(MaskSelection::Both);
    let t0 = total(&base_cfg, &full)?;
    let mut one_row = full.clone();
    one_row.softmax.data_mut()[5] = 0.0;
    let d_row = t0 - total(&base_cfg, &one_row)?;
    ensure(d_row == 15338.0, || format!("softmax row delta {d_row}"))?;
    let mut one_token = full.clone();
    one_token.gelu.data_mut()[7] = 0.0;
    let d_tok = t0 - total(&base_cfg, &one_token)?;
    ensure(d_tok == 270.0 * base_cfg.mlp_dim as f64, || {
        format!("gelu token delta {d_tok}")
    })?;

    // Every single switch of the desk model lowers latency.
    let desk = ModelConfig::default();
    let mut rng = Rng::new(600);
    let mut set = SwitchSet::new(&desk, 0.001);
    for v in set.gelu.data_mut().iter_mut().chain(set.softmax.data_mut()) {
        *v = if rng.below(2) == 0 { 0.0 } else { 1.0 };
    }
    set.binarize(MaskSelection::Both);
    let t = total(&desk, &set)?;
    for (mask, i) in (0..set.gelu.len())
        .map(|i| (0, i))
        .chain((0..set.softmax.len()).map(|i| (1, i)))
    {
        let mut on = set.clone();
        let slot = if mask == 0 {
            &mut on.gelu.data_mut()[i]
        } else {
            &mut on.softmax.data_mut()[i]
        };
        if *slot == 1.0 {
            continue;
        }
        *slot = 1.0;
        let up = total(&desk, &on)?;
        ensure(up > t, || {
            format!("enabling mask {mask} entry {i} did not raise latency")
        })?;
    }

    let mut rng = Rng::new(601);
    for set in 0..100 {
        let n = 1 + rng.below(200);
        let points: Vec<ParetoPoint> = (0..n)
            .map(|i| {
                ParetoPoint::new(
                    format!("p{i:03}"),
                    1.0 + rng.below(50) as f64,
                    rng.below(26) as f64 / 25.0,
                )
            })
            .collect();
        let fast = pareto_frontier(&points).map_err(|e| e.to_string())?;
        ensure(fast == brute_force_frontier(&points), || {
            format!("set {set} (n={n}) differs from oracle")
        })?;
    }
    Ok(format!(
        "row delta {d_row}, token delta {d_tok}, 100 random sets match the oracle"
    ))
}

fn determinism(_: &Ctx) -> Check {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg_a = desk_config(11, a.path());
    let cfg_b = desk_config(11, b.path());
    cmd_search(&cfg_a, None).map_err(|e| e.to_string())?;
    cmd_search(&cfg_b, None).map_err(|e| e.to_string())?;
    for f in ["history.csv", "model.pvit"] {
        let x = fs::read(a.path().join(f)).map_err(|e| e.to_string())?;
        let y = fs::read(b.path().join(f)).map_err(|e| e.to_string())?;
        ensure(x == y, || format!("{f} differs"))?;
    }
    Ok("history.csv and model.pvit byte-identical across two runs".into())
}

fn baseline_harness(_: &Ctx) -> Check {
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk_config(21, dir.path());
    let rows = cmd_baseline(&cfg, &[1]).map_err(|e| e.to_string())?;
    ensure(rows.len() == 2, || format!("{} rows", rows.len()))?;
    for r in &rows {
        ensure(
            r.gelu_count <= r.gelu_budget && r.softmax_count <= r.softmax_budget,
            || format!("{} over budget: {r:?}", r.method),
        )?;
    }
    let csv = fs::read_to_string(dir.path().join("baseline.csv")).map_err(|e| e.to_string())?;
    ensure(csv.lines().count() == 3, || {
        "baseline.csv should hold two rows".into()
    })?;
    Ok(rows
        .iter()
        .map(|r| {
            format!(
                "{} k={} gelu {}/{} acc {:.1}%",
                r.method,
                r.k,
                r.gelu_count,
                r.gelu_budget,
                100.0 * r.test_accuracy
            )
        })
        .collect::<Vec<_>>()
        .join(", "))
}

fn kd_contribution(_: &Ctx) -> Check {
    let mut parts = Vec::new();
    let mut failures = Vec::new();
    for seed in 0..3 {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = desk_config(30 + seed, &dir.path().join("teacher"));
        (cfg.search.gelu_budget, cfg.search.softmax_budget) = budgets(&cfg, 10);
        let teacher = cmd_pretrain(&cfg).map_err(|e| e.to_string())?.teacher;
        let mut acc = [0.0; 2];
        for (i, kd) in [true, false].into_iter().enumerate() {
            let mut run_cfg = cfg.clone();
            run_cfg.search.kd_enabled = kd;
            run_cfg.out_dir = dir.path().join(if kd { "kd" } else { "no_kd" });
            acc[i] = cmd_search(&run_cfg, Some(&teacher))
                .map_err(|e| format!("seed {seed} kd={kd}: {e}"))?
                .test_accuracy;
        }
        parts.push(format!(
            "seed {}: kd {:.1}% / no-kd {:.1}%",
            30 + seed,
            100.0 * acc[0],
            100.0 * acc[1]
        ));
        if acc[0] < acc[1] - 0.01 {
            failures.push(format!("seed {}", 30 + seed));
        }
    }
    let (g, s) = budgets(&RunConfig::default(), 10);
    ensure(failures.is_empty(), || {
        format!(
            "KD worse by more than 1 point at {}: {}",
            failures.join(", "),
            parts.join(", ")
        )
    })?;
    Ok(format!("budgets ({g}, {s}); {}", parts.join(", ")))
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn(&Ctx) -> Check); 9] = [
        (1, "gradient correctness", gradient_correctness),
        (2, "switch-endpoint exactness", switch_endpoints),
        (3, "cost-table fidelity", cost_table_fidelity),
        (4, "search contract", algorithm_contract),
        (5, "quality retention", quality_retention),
        (6, "latency monotonicity and Pareto", latency_and_pareto),
        (7, "determinism", determinism),
        (8, "baseline harness", baseline_harness),
        (9, "KD contribution", kd_contribution),
    ];
    let selected: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let ctx = Ctx {
        quarter: OnceCell::new(),
    };
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| f(&ctx)))
            .unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {n} ({name}): {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}): {detail} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
