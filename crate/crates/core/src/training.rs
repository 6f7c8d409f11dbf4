//! Optimisation loop, evaluation and prediction.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use tbnet_tensor::{par, BatchStats, Graph, Tensor};

use crate::checkpoint::Checkpoint;
use crate::config::{AblationFlags, TrainConfig};
use crate::data::{compute_class_weights, extract_boundary, ClassWeights, Dataset, Sample};
use crate::error::{Error, Result};
use crate::grid::{Grid, LabelMap};
use crate::losses::{total_loss, total_loss_with_grad, LossReport};
use crate::metrics::{compute_metrics, ConfusionMatrix, MetricsReport};
use crate::network::{images_to_tensor, update_running_stats, Ctx, Mode, Network, ParamStore};
use crate::rng::substream;

/// Root-mean-square propagation:
/// `v ← ρ·v + (1-ρ)·g²`, `θ ← θ - lr·g / sqrt(v + ε)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp {
    pub decay: f64,
    pub eps: f64,
    accum: BTreeMap<String, Tensor>,
}

pub const RMSPROP_EPS: f64 = 1e-10;

/// One update of a flat parameter slice.
pub fn rmsprop_update(param: &mut [f64], grad: &[f64], accum: &mut [f64], lr: f64, decay: f64, eps: f64) {
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(accum.iter_mut()) {
        *v = decay * *v + (1.0 - decay) * g * g;
        *p -= lr * g / (*v + eps).sqrt();
    }
}

impl RmsProp {
    pub fn new(decay: f64) -> Self {
        Self {
            decay,
            eps: RMSPROP_EPS,
            accum: BTreeMap::new(),
        }
    }

    pub fn accumulators(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.accum.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn set_accumulator(&mut self, name: impl Into<String>, t: Tensor) {
        self.accum.insert(name.into(), t);
    }

    /// Applies `grads` (by parameter name) to `store`. Parameters without a
    /// gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::Validation(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient of `{name}` has the wrong shape")));
            }
            let v = self
                .accum
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            rmsprop_update(p.data_mut(), g.data(), v.data_mut(), lr, self.decay, self.eps);
        }
        Ok(())
    }
}

pub struct StepGradients {
    pub report: LossReport,
    pub grads: BTreeMap<String, Tensor>,
    pub stats: Vec<(String, BatchStats)>,
}

/// Parameters, optimizer state and progress counters.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub network: Network,
    pub params: ParamStore,
    pub optimizer: RmsProp,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimisation steps.
    pub step: usize,
    pub best_val_miou: Option<f64>,
    pub class_weights: ClassWeights,
}

impl TrainState {
    /// Fresh parameters drawn from `cfg.seed`.
    pub fn new(cfg: TrainConfig, flags: AblationFlags, class_weights: ClassWeights) -> Result<Self> {
        if class_weights.num_classes() != cfg.num_classes {
            return Err(Error::ConfigConflict(format!(
                "{} class weights for {} classes",
                class_weights.num_classes(),
                cfg.num_classes
            )));
        }
        let network = Network::new(cfg, flags)?;
        let params = network.init_params(network.cfg.seed)?;
        Ok(Self {
            optimizer: RmsProp::new(network.cfg.decay),
            network,
            params,
            epoch: 0,
            step: 0,
            best_val_miou: None,
            class_weights,
        })
    }

    pub fn cfg(&self) -> &TrainConfig {
        &self.network.cfg
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.network.cfg.clone(),
            flags: self.network.flags,
            epoch: self.epoch,
            step: self.step,
            best_val_miou: self.best_val_miou,
            class_weights: self.class_weights.clone(),
            params: self.params.clone(),
            optim: self
                .optimizer
                .accumulators()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    pub fn from_checkpoint(c: Checkpoint) -> Result<Self> {
        let network = Network::new(c.config, c.flags)?;
        let mut optimizer = RmsProp::new(network.cfg.decay);
        for (n, t) in c.optim {
            optimizer.set_accumulator(n, t);
        }
        Ok(Self {
            network,
            params: c.params,
            optimizer,
            epoch: c.epoch,
            step: c.step,
            best_val_miou: c.best_val_miou,
            class_weights: c.class_weights,
        })
    }

    /// Loss, parameter gradients and observed batch statistics for `batch`
    /// (samples already at the input size), without updating anything.
    pub fn compute_gradients(&self, batch: &[&Sample]) -> Result<StepGradients> {
        self.gradients_in(batch, Mode::Train)
    }

    /// [`compute_gradients`](Self::compute_gradients) with batch norm in `mode`.
    pub fn gradients_in(&self, batch: &[&Sample], mode: Mode) -> Result<StepGradients> {
        let net = &self.network;
        let images: Vec<&Grid<f64>> = batch.iter().map(|s| &s.image).collect();
        let x = images_to_tensor(&images, net.cfg.input_size)?;
        let step = self.step;
        let g = Graph::new();
        let ctx = Ctx::new(&g, &self.params, mode);
        let out = net.forward(&ctx, &g.constant(x))?;
        let (report, lg) =
            total_loss_with_grad(&out, batch, &self.class_weights, &net.cfg, &net.flags).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
                other => other,
            })?;
        let mut seeds = vec![(&out.seg_logits, lg.seg_logits)];
        if let (Some(b), Some(gb)) = (&out.boundary_logits, lg.boundary_logits) {
            seeds.push((b, gb));
        }
        let mut gr = g.backward(seeds)?;
        let grads = ctx
            .param_vars()
            .iter()
            .filter_map(|(n, v)| gr.take(v).map(|t| (n.clone(), t)))
            .collect();
        Ok(StepGradients {
            report,
            grads,
            stats: ctx.take_stats(),
        })
    }

    /// Train-mode loss of `batch` under the current parameters.
    pub fn loss(&self, batch: &[&Sample]) -> Result<LossReport> {
        self.loss_in(batch, Mode::Train)
    }

    /// Loss of `batch` with batch norm in `mode`.
    pub fn loss_in(&self, batch: &[&Sample], mode: Mode) -> Result<LossReport> {
        let net = &self.network;
        let images: Vec<&Grid<f64>> = batch.iter().map(|s| &s.image).collect();
        let x = images_to_tensor(&images, net.cfg.input_size)?;
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &self.params, mode);
        let out = net.forward(&ctx, &g.constant(x))?;
        total_loss(&out, batch, &self.class_weights, &net.cfg, &net.flags)
    }

    /// One forward/backward/update on `batch` (samples already at the input size).
    pub fn train_step(&mut self, batch: &[&Sample]) -> Result<LossReport> {
        let step = self.step;
        let StepGradients { report, grads, stats } = self.compute_gradients(batch)?;
        if let Some((name, _)) = grads.iter().find(|(_, t)| !t.all_finite()) {
            return Err(Error::Numeric(format!("step {step}: non-finite gradient for `{name}`")));
        }
        let lr = self.network.cfg.learning_rate_at(self.epoch);
        self.optimizer.step(&mut self.params, &grads, lr)?;
        update_running_stats(&mut self.params, &stats)?;
        if !self.params.all_finite() {
            return Err(Error::Numeric(format!("step {step}: parameters became non-finite")));
        }
        self.step += 1;
        Ok(report)
    }
}

/// One sampled coordinate of a finite-difference gradient check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckEntry {
    /// `|a - n| / max(|a|, |n|)`, with differences below `floor` counted as agreement.
    pub fn rel_error(&self, floor: f64) -> f64 {
        let diff = (self.analytic - self.numeric).abs();
        if diff <= floor {
            0.0
        } else {
            diff / self.analytic.abs().max(self.numeric.abs())
        }
    }
}

/// Compares the analytic gradient of the total loss with central differences
/// of step `h` at `count` coordinates drawn from `seed` (a parameter tensor
/// uniformly, then an element uniformly).
///
/// `mode` selects batch norm behaviour. With `Mode::Train` on tiny feature
/// maps the batch statistics of a two-image batch make the loss nearly
/// piecewise constant in some directions, so differences at practical `h`
/// stop tracking the derivative; `Mode::Eval` freezes the statistics and
/// checks every other path exactly.
pub fn gradient_check(
    state: &TrainState,
    batch: &[&Sample],
    count: usize,
    h: f64,
    seed: u64,
    mode: Mode,
) -> Result<Vec<GradCheckEntry>> {
    use rand::Rng;
    let analytic = state.gradients_in(batch, mode)?.grads;
    let names: Vec<&String> = analytic.keys().collect();
    let mut rng = substream(seed, "gradient-check", 0);
    let mut probe = state.clone();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name = names[rng.gen_range(0..names.len())].clone();
        let index = rng.gen_range(0..analytic[&name].numel());
        let orig = state.params.get(&name).expect("graded parameter").data()[index];
        let mut at = |v: f64| -> Result<f64> {
            probe.params.get_mut(&name).expect("graded parameter").data_mut()[index] = v;
            Ok(probe.loss_in(batch, mode)?.total)
        };
        let numeric = (at(orig + h)? - at(orig - h)?) / (2.0 * h);
        at(orig)?;
        out.push(GradCheckEntry {
            analytic: analytic[&name].data()[index],
            name,
            index,
            numeric,
        });
    }
    Ok(out)
}

/// Copies of `samples` resized to `size` (images bilinearly, labels by nearest
/// neighbour); boundary targets are re-derived when the size changes.
pub fn prepare_samples(samples: &[Sample], size: (usize, usize)) -> Result<Vec<Sample>> {
    samples
        .iter()
        .map(|s| {
            if s.image.dims() == size {
                let mut s = s.clone();
                s.boundary = Some(s.boundary_or_extract());
                return Ok(s);
            }
            let t = images_to_tensor(&[&s.image], size)?;
            let labels = s.labels.resize_nearest(size.0, size.1);
            Ok(Sample {
                id: s.id.clone(),
                image: Grid::from_vec(size.0, size.1, t.into_data())?,
                boundary: Some(extract_boundary(&labels)),
                labels,
            })
        })
        .collect()
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        step: usize,
        epoch: usize,
        seg: f64,
        boundary: f64,
        total: f64,
        lr: f64,
    },
    Eval {
        step: usize,
        epoch: usize,
        mean_cpa: Option<f64>,
        mean_iou: Option<f64>,
        report: MetricsReport,
    },
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where `train_log.jsonl`, `last.ckpt` and `best.ckpt` go; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Scored after every `eval_every` epochs; `best.ckpt` tracks its mean IoU.
    pub val: Option<Dataset>,
    pub eval_every: usize,
    /// Stop after this many steps in total (across resumes).
    pub max_steps: Option<usize>,
    /// Continue from this state instead of initialising.
    pub resume: Option<TrainState>,
}

pub struct TrainRun {
    pub state: TrainState,
    pub log: Vec<LogRecord>,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

fn architecture_conflicts(a: &TrainConfig, b: &TrainConfig) -> Vec<String> {
    let mut v = Vec::new();
    let mut check = |field: &str, differs: bool, x: String, y: String| {
        if differs {
            v.push(format!("{field}: checkpoint has {x}, requested {y}"));
        }
    };
    check("input_size", a.input_size != b.input_size, format!("{:?}", a.input_size), format!("{:?}", b.input_size));
    check("width_divisor", a.width_divisor != b.width_divisor, a.width_divisor.to_string(), b.width_divisor.to_string());
    check(
        "backbone_blocks",
        a.backbone_blocks != b.backbone_blocks,
        format!("{:?}", a.backbone_blocks),
        format!("{:?}", b.backbone_blocks),
    );
    check("context_depth", a.context_depth != b.context_depth, a.context_depth.to_string(), b.context_depth.to_string());
    check("num_classes", a.num_classes != b.num_classes, a.num_classes.to_string(), b.num_classes.to_string());
    check(
        "boundary_fusion",
        a.boundary_fusion != b.boundary_fusion,
        format!("{:?}", a.boundary_fusion),
        format!("{:?}", b.boundary_fusion),
    );
    v
}

/// Errors unless `state` was built for the same architecture as `cfg`/`flags`.
pub fn check_compatible(state: &TrainState, cfg: &TrainConfig, flags: &AblationFlags) -> Result<()> {
    let mut v = architecture_conflicts(state.cfg(), cfg);
    if state.network.flags != *flags {
        v.push(format!(
            "ablation flags: checkpoint has {:?}, requested {:?}",
            state.network.flags, flags
        ));
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::ConfigConflict(v.join("; ")))
    }
}

struct LogSink {
    file: Option<BufWriter<File>>,
    records: Vec<LogRecord>,
}

impl LogSink {
    fn push(&mut self, r: LogRecord) -> Result<()> {
        if let Some(f) = self.file.as_mut() {
            let line = serde_json::to_string(&r).expect("record serializes");
            writeln!(f, "{line}").and_then(|_| f.flush()).map_err(|e| Error::io(LOG_FILE, e))?;
        }
        self.records.push(r);
        Ok(())
    }
}

/// Trains for `cfg.epochs` epochs (or until `max_steps`).
///
/// The batch order of epoch `e` is a shuffle drawn from `(cfg.seed, e)`, so a
/// run resumed from a checkpoint replays exactly the steps it would have taken.
pub fn train(cfg: &TrainConfig, data: &Dataset, flags: &AblationFlags, opts: TrainOptions) -> Result<TrainRun> {
    let v = crate::config::validate_config(cfg);
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    if data.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    if data.taxonomy.num_classes() != cfg.num_classes {
        return Err(Error::ConfigConflict(format!(
            "dataset has {} classes, config expects {}",
            data.taxonomy.num_classes(),
            cfg.num_classes
        )));
    }
    let samples = prepare_samples(&data.samples, cfg.input_size)?;
    let mut state = match opts.resume {
        Some(s) => {
            check_compatible(&s, cfg, flags)?;
            let mut s = s;
            s.network = Network::new(cfg.clone(), *flags)?;
            s.optimizer.decay = cfg.decay;
            s
        }
        None => {
            let prepared = Dataset {
                split: data.split,
                taxonomy: data.taxonomy.clone(),
                samples: samples.clone(),
            };
            TrainState::new(cfg.clone(), *flags, compute_class_weights(&prepared)?)?
        }
    };
    let mut sink = LogSink {
        file: None,
        records: Vec::new(),
    };
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOG_FILE);
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        sink.file = Some(BufWriter::new(f));
    }
    let save = |state: &TrainState, name: &str| -> Result<()> {
        match &opts.out_dir {
            Some(dir) => state.to_checkpoint().save(&dir.join(name)),
            None => Ok(()),
        }
    };
    let bs = cfg.batch_size;
    let steps_per_epoch = samples.len().div_ceil(bs);
    let max_steps = opts.max_steps.unwrap_or(usize::MAX);
    let eval_every = opts.eval_every.max(1);
    while state.epoch < cfg.epochs && state.step < max_steps {
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut substream(cfg.seed, "order", epoch as u64));
        let done_in_epoch = state.step.saturating_sub(epoch * steps_per_epoch).min(steps_per_epoch);
        for chunk in order.chunks(bs).skip(done_in_epoch) {
            if state.step >= max_steps {
                break;
            }
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let r = state.train_step(&batch)?;
            sink.push(LogRecord::Step {
                step: state.step,
                epoch,
                seg: r.seg,
                boundary: r.boundary,
                total: r.total,
                lr: cfg.learning_rate_at(epoch),
            })?;
        }
        if state.step < (epoch + 1) * steps_per_epoch {
            save(&state, LAST_CHECKPOINT)?;
            break;
        }
        state.epoch += 1;
        if let Some(val) = &opts.val {
            if state.epoch % eval_every == 0 || state.epoch == cfg.epochs {
                let report = evaluate(&state, val)?;
                let miou = report.mean_iou;
                sink.push(LogRecord::Eval {
                    step: state.step,
                    epoch: state.epoch,
                    mean_cpa: report.mean_cpa,
                    mean_iou: miou,
                    report,
                })?;
                let score = miou.unwrap_or(0.0);
                if state.best_val_miou.map_or(true, |b| score > b) {
                    state.best_val_miou = Some(score);
                    save(&state, BEST_CHECKPOINT)?;
                }
            }
        }
        save(&state, LAST_CHECKPOINT)?;
    }
    Ok(TrainRun {
        state,
        log: sink.records,
    })
}

/// Class map by argmax over channels of `probs: [n, C, H, W]`; ties go to the lowest class id.
pub fn argmax_labels(probs: &Tensor) -> Result<Vec<LabelMap>> {
    let (n, c, h, w) = probs.dims4()?;
    let plane = h * w;
    Ok((0..n)
        .map(|img| {
            let p = &probs.data()[img * c * plane..(img + 1) * c * plane];
            let data = (0..plane)
                .map(|m| {
                    let mut best = 0;
                    for k in 1..c {
                        if p[k * plane + m] > p[best * plane + m] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect();
            Grid::from_vec(h, w, data).expect("sized")
        })
        .collect())
}

/// Predicted classes and boundary probabilities for one image at its own
/// resolution. The boundary map is `None` without a boundary stream.
pub fn predict_with(net: &Network, params: &ParamStore, image: &Grid<f64>) -> Result<(LabelMap, Option<Grid<f64>>)> {
    let x = images_to_tensor(&[image], net.cfg.input_size)?;
    let out = net.infer(params, &x)?;
    let (h, w) = image.dims();
    let back = |t: &Tensor| -> Result<Tensor> {
        if (t.shape()[2], t.shape()[3]) == (h, w) {
            Ok(t.clone())
        } else {
            Ok(tbnet_tensor::resize::resize_bilinear(t, h, w)?)
        }
    };
    let probs = back(out.seg_probs.value())?;
    let labels = argmax_labels(&probs)?.pop().expect("one image");
    let boundary = match &out.boundary_prob {
        Some(b) => Some(Grid::from_vec(h, w, back(b.value())?.into_data())?),
        None => None,
    };
    Ok((labels, boundary))
}

pub fn predict(state: &TrainState, image: &Grid<f64>) -> Result<(LabelMap, Option<Grid<f64>>)> {
    predict_with(&state.network, &state.params, image)
}

/// Frozen-parameter scoring of every sample, at each sample's own resolution.
pub fn evaluate(state: &TrainState, data: &Dataset) -> Result<MetricsReport> {
    let c = state.cfg().num_classes;
    if data.taxonomy.num_classes() != c {
        return Err(Error::ConfigConflict(format!(
            "dataset has {} classes, checkpoint predicts {c}",
            data.taxonomy.num_classes()
        )));
    }
    let parts = par::map_indices(data.len(), |i| -> Result<ConfusionMatrix> {
        let s = &data.samples[i];
        let (pred, _) = predict(state, &s.image)?;
        let mut cm = ConfusionMatrix::new(c);
        cm.add(&pred, &s.labels)?;
        Ok(cm)
    });
    let mut cm = ConfusionMatrix::new(c);
    for p in parts {
        cm.merge(&p?)?;
    }
    Ok(compute_metrics(&cm, &data.taxonomy))
}

/// Loads `dir/last.ckpt` when it exists.
pub fn load_last(dir: &Path) -> Result<Option<TrainState>> {
    let p = dir.join(LAST_CHECKPOINT);
    if !p.exists() {
        return Ok(None);
    }
    Ok(Some(TrainState::from_checkpoint(Checkpoint::load(&p)?)?))
}
