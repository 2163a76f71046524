use super::loss::{kd_loss, privit_loss};
use super::optim::{cosine_lr, Adam};
use super::schedule::{schedule_penalties, Binarization, SearchConfig, SearchState};
use super::TrainError;
use crate::autodiff::{Graph, Tensor};
use crate::data::DatasetSplit;
use crate::rng::Rng;
use crate::vit::{bind_params, bind_switches, vit_forward, MaskSelection, Model};

const EVAL_CHUNK: usize = 256;

/// Mean losses over one pass, plus the total loss of every batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochStats {
    pub train_loss: f64,
    pub ce_loss: f64,
    pub kd_loss: f64,
    pub batch_losses: Vec<f64>,
}

/// One search epoch, recorded after scheduling and budget checks.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub ce_loss: f64,
    pub kd_loss: f64,
    pub gelu_count: usize,
    pub softmax_count: usize,
    pub lowest_gelu_count: usize,
    pub lowest_softmax_count: usize,
    pub lambda_g: f64,
    pub lambda_s: f64,
    pub c_frozen: bool,
    pub s_frozen: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub state: SearchState,
    pub history: Vec<HistoryRow>,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct FinetuneRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub ce_loss: f64,
    pub kd_loss: f64,
}

/// Logits of `teacher` for every image of `data`, `[len, classes]`.
pub fn teacher_logits(teacher: &Model, data: &DatasetSplit) -> Result<Tensor, TrainError> {
    let classes = teacher.config.num_classes;
    let mut out = Vec::with_capacity(data.len() * classes);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, _) = data.batch(chunk);
        out.extend(teacher.logits(&x)?.into_data());
    }
    Ok(Tensor::new(&[data.len(), classes], out)?)
}

fn predictions(model: &Model, data: &DatasetSplit) -> Result<Vec<usize>, TrainError> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(EVAL_CHUNK) {
        out.extend(model.predict(&data.batch(chunk).0)?);
    }
    Ok(out)
}

/// Fraction of correctly classified images.
pub fn accuracy(model: &Model, data: &DatasetSplit) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let pred = predictions(model, data)?;
    let hits = pred
        .iter()
        .zip(&data.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

/// Accuracy per class; classes with no images score 0.
pub fn per_class_accuracy(model: &Model, data: &DatasetSplit) -> Result<Vec<f64>, TrainError> {
    let pred = predictions(model, data)?;
    let mut hits = vec![0usize; data.num_classes];
    let mut totals = vec![0usize; data.num_classes];
    for (&p, &l) in pred.iter().zip(&data.labels) {
        totals[l] += 1;
        hits[l] += usize::from(p == l);
    }
    Ok(hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
        .collect())
}

fn gather_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let width = t.shape()[1];
    let mut data = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * width..(r + 1) * width]);
    }
    Tensor::new(&[rows.len(), width], data).expect("gather shape")
}

/// Hyperparameters of one optimizer pass.
#[derive(Clone, Debug, PartialEq)]
pub struct PassConfig {
    pub lr: f64,
    pub switch_lr: f64,
    pub lambda_g: f64,
    pub lambda_s: f64,
    pub batch_size: usize,
    pub kd_temperature: f64,
    /// Clamp switches to [0, 1] after every update.
    pub project_switches: bool,
}

/// One shuffled pass over `data`. Weights and unfrozen switches are updated
/// by `opt`; weights use slots `0..P`, the GELU and softmax masks `P` and
/// `P + 1`.
pub fn train_epoch(
    model: &mut Model,
    data: &DatasetSplit,
    teacher: Option<&Tensor>,
    opt: &mut Adam,
    pass: &PassConfig,
    rng: &mut Rng,
) -> Result<EpochStats, TrainError> {
    if let Some(t) = teacher {
        let expected = vec![data.len(), model.config.num_classes];
        if t.shape() != expected.as_slice() {
            return Err(TrainError::TeacherShape {
                got: t.shape().to_vec(),
                expected,
            });
        }
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut order);
    let mut stats = EpochStats::default();
    let n_params = model.params.count();
    for chunk in order.chunks(pass.batch_size) {
        let (images, labels) = data.batch(chunk);
        let mut g = Graph::new();
        let params = bind_params(&mut g, &model.params, true);
        let switches = bind_switches(&mut g, &model.switches);
        let x = g.constant(images);
        let logits = vit_forward(&mut g, &model.config, &params, &switches, x)?;
        let frozen = (model.switches.gelu_frozen, model.switches.softmax_frozen);
        let mut loss = privit_loss(
            &mut g,
            logits,
            &labels,
            &switches,
            frozen,
            pass.lambda_g,
            pass.lambda_s,
        )?;
        let mut kd_value = 0.0;
        if let Some(t) = teacher {
            let t = g.constant(gather_rows(t, chunk));
            let kd = kd_loss(&mut g, logits, t, pass.kd_temperature)?;
            kd_value = g.value(kd).item();
            loss = g.add(loss, kd)?;
        }
        let ce = g.cross_entropy(logits, &labels)?;
        g.backward(loss)?;

        let total = g.value(loss).item();
        stats.batch_losses.push(total);
        stats.train_loss += total;
        stats.ce_loss += g.value(ce).item();
        stats.kd_loss += kd_value;

        opt.tick();
        let vars = params.refs();
        for (slot, (var, tensor)) in vars.into_iter().zip(model.params.refs_mut()).enumerate() {
            let grad = g.grad_or_zeros(*var);
            opt.update(slot, tensor.data_mut(), grad.data(), pass.lr);
        }
        if !model.switches.gelu_frozen {
            let grad = g.grad_or_zeros(switches.gelu);
            opt.update(
                n_params,
                model.switches.gelu.data_mut(),
                grad.data(),
                pass.switch_lr,
            );
            if pass.project_switches {
                clamp_unit(model.switches.gelu.data_mut());
            }
        }
        if !model.switches.softmax_frozen {
            let grad = g.grad_or_zeros(switches.softmax);
            opt.update(
                n_params + 1,
                model.switches.softmax.data_mut(),
                grad.data(),
                pass.switch_lr,
            );
            if pass.project_switches {
                clamp_unit(model.switches.softmax.data_mut());
            }
        }
    }
    let batches = stats.batch_losses.len().max(1) as f64;
    stats.train_loss /= batches;
    stats.ce_loss /= batches;
    stats.kd_loss /= batches;
    Ok(stats)
}

fn clamp_unit(values: &mut [f64]) {
    values.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// Penalized search with penalty scheduling until both masks are binarized
/// within budget.
///
/// The first `warmup_epochs` epochs only record counts. After each later
/// epoch the penalties are rescheduled and each mask whose active count is
/// within budget is marked as met. Under early binarization a met mask is
/// binarized and frozen at once; under late binarization both are binarized
/// together in the first epoch where both counts are within budget.
pub fn privit_search(
    model: &mut Model,
    teacher: Option<&Tensor>,
    data: &DatasetSplit,
    cfg: &SearchConfig,
    rng: &mut Rng,
) -> Result<SearchOutcome, TrainError> {
    cfg.validate()?;
    model.switches.epsilon = cfg.epsilon;
    let (g0, s0) = model.switches.count_active();
    let mut state = SearchState::new(cfg, g0, s0);
    state.c_budget_met = model.switches.gelu_frozen;
    state.s_budget_met = model.switches.softmax_frozen;
    let mut opt = Adam::new();
    let mut history = Vec::new();
    let teacher = if cfg.kd_enabled { teacher } else { None };

    for epoch in 1..=cfg.max_epochs {
        let pass = PassConfig {
            lr: cfg.lr,
            switch_lr: cfg.switch_lr,
            lambda_g: state.lambda_g,
            lambda_s: state.lambda_s,
            batch_size: cfg.batch_size,
            kd_temperature: cfg.kd_temperature,
            project_switches: cfg.project_switches,
        };
        let stats = train_epoch(model, data, teacher, &mut opt, &pass, rng)?;
        let (gc, sc) = model.switches.count_active();
        state.epoch = epoch;
        if epoch <= cfg.warmup_epochs {
            state.record_counts(gc, sc);
        } else {
            state = schedule_penalties(&state, gc, sc, cfg);
            let c_ok = gc <= cfg.gelu_budget;
            let s_ok = sc <= cfg.softmax_budget;
            state.c_budget_met |= c_ok;
            state.s_budget_met |= s_ok;
            match cfg.strategy.binarization() {
                Binarization::Early => {
                    if c_ok {
                        model.switches.binarize(MaskSelection::Gelu);
                    }
                    if s_ok {
                        model.switches.binarize(MaskSelection::Softmax);
                    }
                }
                Binarization::Late => {
                    if c_ok && s_ok {
                        model.switches.binarize(MaskSelection::Both);
                    }
                }
            }
        }
        history.push(HistoryRow {
            epoch,
            train_loss: stats.train_loss,
            ce_loss: stats.ce_loss,
            kd_loss: stats.kd_loss,
            gelu_count: gc,
            softmax_count: sc,
            lowest_gelu_count: state.lowest_gelu_count,
            lowest_softmax_count: state.lowest_softmax_count,
            lambda_g: state.lambda_g,
            lambda_s: state.lambda_s,
            c_frozen: model.switches.gelu_frozen,
            s_frozen: model.switches.softmax_frozen,
        });
        if model.switches.gelu_frozen && model.switches.softmax_frozen {
            return Ok(SearchOutcome { state, history });
        }
    }
    Err(TrainError::NonConvergence {
        epochs: cfg.max_epochs,
        history,
    })
}

/// Trains the weights of a model with frozen binary switches using AdamW
/// and a cosine learning-rate schedule.
pub fn finetune(
    model: &mut Model,
    teacher: Option<&Tensor>,
    data: &DatasetSplit,
    cfg: &SearchConfig,
    rng: &mut Rng,
) -> Result<Vec<FinetuneRow>, TrainError> {
    cfg.validate()?;
    if !model.switches.is_binarized() {
        return Err(TrainError::NotBinarized);
    }
    let teacher = if cfg.kd_enabled { teacher } else { None };
    let before = model.switches.clone();
    let mut opt = Adam::adamw(cfg.weight_decay);
    let mut rows = Vec::with_capacity(cfg.finetune_epochs);
    for epoch in 0..cfg.finetune_epochs {
        let lr = cosine_lr(cfg.finetune_lr, epoch, cfg.finetune_epochs);
        let pass = PassConfig {
            lr,
            switch_lr: 0.0,
            lambda_g: 0.0,
            lambda_s: 0.0,
            batch_size: cfg.batch_size,
            kd_temperature: cfg.kd_temperature,
            project_switches: false,
        };
        let stats = train_epoch(model, data, teacher, &mut opt, &pass, rng)?;
        rows.push(FinetuneRow {
            epoch: epoch + 1,
            lr,
            train_loss: stats.train_loss,
            ce_loss: stats.ce_loss,
            kd_loss: stats.kd_loss,
        });
    }
    debug_assert_eq!(before, model.switches);
    Ok(rows)
}

/// Sets every GELU switch of the last `k` layers to 0 and freezes both
/// masks.
pub fn layerwise_taylorize_baseline(model: &Model, k: usize) -> Result<Model, TrainError> {
    let layers = model.config.num_layers;
    if k > layers {
        return Err(TrainError::LayerOutOfRange { k, layers });
    }
    let mut out = model.clone();
    let per_layer = out.switches.gelu.len() / layers;
    let start = (layers - k) * per_layer;
    out.switches.gelu.data_mut()[start..]
        .iter_mut()
        .for_each(|c| *c = 0.0);
    out.switches.gelu_frozen = true;
    out.switches.softmax_frozen = true;
    Ok(out)
}

/// Settings for plain supervised training of an all-nonlinear model.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisedConfig {
    pub max_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Training stops once train accuracy reaches this value.
    pub target_accuracy: f64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            max_epochs: 200,
            lr: 1e-3,
            batch_size: 32,
            target_accuracy: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct SupervisedRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
}

/// Adam on cross-entropy with every switch fixed at 1, until the target
/// train accuracy or the epoch cap.
pub fn train_supervised(
    model: &mut Model,
    data: &DatasetSplit,
    cfg: &SupervisedConfig,
    rng: &mut Rng,
) -> Result<Vec<SupervisedRow>, TrainError> {
    if cfg.batch_size == 0 {
        return Err(TrainError::Config("batch_size must be positive".into()));
    }
    model.switches = crate::vit::SwitchSet::all_on(&model.config, model.switches.epsilon);
    let mut opt = Adam::new();
    let mut rows = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        let pass = PassConfig {
            lr: cfg.lr,
            switch_lr: 0.0,
            lambda_g: 0.0,
            lambda_s: 0.0,
            batch_size: cfg.batch_size,
            kd_temperature: 1.0,
            project_switches: false,
        };
        let stats = train_epoch(model, data, None, &mut opt, &pass, rng)?;
        let acc = accuracy(model, data)?;
        rows.push(SupervisedRow {
            epoch,
            train_loss: stats.train_loss,
            train_accuracy: acc,
        });
        if acc >= cfg.target_accuracy {
            break;
        }
    }
    Ok(rows)
}
