//! Epoch-level training loops for every learning rule, including the
//! continuous-propagation pipeline with delayed per-layer updates.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::{epoch_order, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{gemm, gemm_nt, sub_scaled_tn, xent_from_probs, Matrix, OpCounters};
use crate::network::{
    accuracy, forward_with, init_params, layer_forward, mask_relu, FeedbackMode, NetworkSpec,
    Params,
};
use crate::scalar::{Precision, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LearningRule {
    Sgd,
    Mbgd { batch: usize },
    Fa { batch: usize },
    Dfa { batch: usize },
    Cp,
    Mbcp { batch: usize },
}

impl LearningRule {
    pub fn batch(self) -> usize {
        match self {
            LearningRule::Sgd | LearningRule::Cp => 1,
            LearningRule::Mbgd { batch }
            | LearningRule::Fa { batch }
            | LearningRule::Dfa { batch }
            | LearningRule::Mbcp { batch } => batch,
        }
    }

    pub fn feedback(self) -> Option<FeedbackMode> {
        match self {
            LearningRule::Fa { .. } => Some(FeedbackMode::Fa),
            LearningRule::Dfa { .. } => Some(FeedbackMode::Dfa),
            _ => None,
        }
    }

    pub fn is_pipelined(self) -> bool {
        matches!(self, LearningRule::Cp | LearningRule::Mbcp { .. })
    }

    pub fn default_lr(self) -> f64 {
        match self {
            LearningRule::Sgd | LearningRule::Cp => 0.02,
            LearningRule::Mbgd { batch } | LearningRule::Mbcp { batch } => {
                if batch <= 8 {
                    0.02
                } else {
                    0.05
                }
            }
            LearningRule::Fa { .. } | LearningRule::Dfa { .. } => 0.002,
        }
    }

    pub fn validate(self) -> Result<()> {
        if self.batch() == 0 {
            return Err(Error::Config(format!("{self}: batch size must be at least 1")));
        }
        Ok(())
    }

    /// Short tag used in file names and CSV keys, e.g. `mbgd8`.
    pub fn key(self) -> String {
        match self {
            LearningRule::Sgd => "sgd".into(),
            LearningRule::Cp => "cp".into(),
            LearningRule::Mbgd { batch } => format!("mbgd{batch}"),
            LearningRule::Fa { batch } => format!("fa{batch}"),
            LearningRule::Dfa { batch } => format!("dfa{batch}"),
            LearningRule::Mbcp { batch } => format!("mbcp{batch}"),
        }
    }
}

impl fmt::Display for LearningRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LearningRule::Sgd => f.write_str("SGD"),
            LearningRule::Cp => f.write_str("CP"),
            LearningRule::Mbgd { batch } => write!(f, "MBGD({batch})"),
            LearningRule::Fa { batch } => write!(f, "FA({batch})"),
            LearningRule::Dfa { batch } => write!(f, "DFA({batch})"),
            LearningRule::Mbcp { batch } => write!(f, "MBCP({batch})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub rule: LearningRule,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
}

impl TrainConfig {
    pub fn new(rule: LearningRule, epochs: usize, seed: u64) -> Self {
        TrainConfig {
            rule,
            lr: rule.default_lr(),
            epochs,
            seed,
            precision: Precision::Native,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.rule.validate()?;
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} is not usable", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based epoch number.
    pub epoch: usize,
    pub val_acc: f64,
    pub loss: f64,
    pub updates: u64,
    pub macs: u64,
    pub weight_accesses: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub rule: LearningRule,
    pub records: Vec<EpochRecord>,
    /// Epoch at which the loss or weights became non-finite.
    pub diverged_at: Option<usize>,
}

impl TrainHistory {
    pub fn final_accuracy(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.val_acc)
    }

    pub fn best_accuracy(&self) -> f64 {
        self.records.iter().map(|r| r.val_acc).fold(0.0, f64::max)
    }

    /// First epoch whose validation accuracy reaches `threshold`.
    pub fn epochs_to(&self, threshold: f64) -> Option<usize> {
        self.records
            .iter()
            .find(|r| r.val_acc >= threshold)
            .map(|r| r.epoch)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "val_acc", "loss", "updates", "macs"])?;
        for r in &self.records {
            out.write_record([
                r.epoch.to_string(),
                format!("{:.6}", r.val_acc),
                format!("{:.6}", r.loss),
                r.updates.to_string(),
                r.macs.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Validation accuracy, evaluated in fixed-size chunks.
pub fn evaluate<T: Scalar>(params: &Params<T>, data: &Dataset<T>, precision: Precision) -> Result<f64> {
    const CHUNK: usize = 1000;
    let mut hits = 0.0;
    let mut scratch = OpCounters::new();
    let k = data.len();
    let mut start = 0;
    while start < k {
        let end = (start + CHUNK).min(k);
        let idx: Vec<usize> = (start..end).collect();
        let cache = forward_with(params, &data.images.select_rows(&idx), precision, &mut scratch)?;
        hits += accuracy(&cache.probs, &data.classes[start..end]) * (end - start) as f64;
        start = end;
    }
    Ok(if k == 0 { 0.0 } else { hits / k as f64 })
}

fn check_inputs<T: Scalar>(spec: &NetworkSpec, train: &Dataset<T>, val: &Dataset<T>) -> Result<()> {
    for d in [train, val] {
        if d.input_width() != spec.input() {
            return Err(Error::shape(
                "train",
                format!("dataset width {} for network {spec}", d.input_width()),
            ));
        }
    }
    if spec.output() != train.labels.cols() {
        return Err(Error::shape(
            "train",
            format!("{} classes for network output {}", train.labels.cols(), spec.output()),
        ));
    }
    if train.is_empty() {
        return Err(Error::Validation("empty training set".into()));
    }
    Ok(())
}

/// Trains from a fresh initialisation and returns the history.
pub fn train<T: Scalar>(
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    train: &Dataset<T>,
    val: &Dataset<T>,
) -> Result<TrainHistory> {
    fit(spec, cfg, train, val).map(|(h, _)| h)
}

/// As [`train`], also returning the final parameters.
pub fn fit<T: Scalar>(
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    train: &Dataset<T>,
    val: &Dataset<T>,
) -> Result<(TrainHistory, Params<T>)> {
    let mut params = init_params(spec, cfg.seed, cfg.rule.feedback());
    params.store(cfg.precision);
    fit_from(params, cfg, train, val, 0)
}

/// Continues training `params`, numbering epochs after `completed`.
pub fn fit_from<T: Scalar>(
    mut params: Params<T>,
    cfg: &TrainConfig,
    train: &Dataset<T>,
    val: &Dataset<T>,
    completed: usize,
) -> Result<(TrainHistory, Params<T>)> {
    cfg.validate()?;
    check_inputs(params.spec(), train, val)?;
    if cfg.rule.feedback() != params.feedback().map(|f| f.mode) {
        return Err(Error::Config(format!(
            "{} needs feedback {:?}, parameters carry {:?}",
            cfg.rule,
            cfg.rule.feedback(),
            params.feedback().map(|f| f.mode)
        )));
    }
    let mut history = TrainHistory {
        rule: cfg.rule,
        records: Vec::with_capacity(cfg.epochs),
        diverged_at: None,
    };
    for e in completed..completed + cfg.epochs {
        let stats = if cfg.rule.is_pipelined() {
            let (p, stats) = cp_epoch(params, cfg, train, e as u64)?;
            params = p;
            stats
        } else {
            batch_epoch(&mut params, cfg, train, e as u64)?
        };
        if !stats.loss.is_finite() || !params.is_finite() {
            history.diverged_at = Some(e + 1);
            break;
        }
        history.records.push(EpochRecord {
            epoch: e + 1,
            val_acc: evaluate(&params, val, cfg.precision)?,
            loss: stats.loss,
            updates: stats.updates,
            macs: stats.counters.macs,
            weight_accesses: stats.counters.weight_accesses,
        });
    }
    Ok((history, params))
}

#[derive(Debug, Clone, Default)]
pub struct EpochStats {
    pub loss: f64,
    pub updates: u64,
    pub counters: OpCounters,
    /// The same counters split by the layer whose weights were used.
    pub per_layer: Vec<OpCounters>,
}

fn summed(per_layer: &[OpCounters]) -> OpCounters {
    let mut total = OpCounters::new();
    for c in per_layer {
        total.add(c);
    }
    total
}

fn batches(order: &[usize], b: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(b)
}

/// `W ← W − (η/b)·inputᵀδ`, `bias ← bias − (η/b)·colsum(δ)`, then storage rounding.
fn update_layer<T: Scalar>(
    params: &mut Params<T>,
    l: usize,
    input: &Matrix<T>,
    delta: &Matrix<T>,
    lr: f64,
    precision: Precision,
    counters: &mut OpCounters,
) -> Result<()> {
    let scale = T::of(lr / input.rows() as f64);
    sub_scaled_tn(&mut params.weights[l], input, delta, scale, counters)?;
    for (bv, g) in params.biases[l].iter_mut().zip(delta.col_sums()) {
        *bv -= scale * g;
    }
    precision.store_all(params.weights[l].as_mut_slice());
    precision.store_all(&mut params.biases[l]);
    Ok(())
}

/// One epoch of SGD, MBGD, FA or DFA with the update for each layer fused
/// into the backward sweep.
pub fn batch_epoch<T: Scalar>(
    params: &mut Params<T>,
    cfg: &TrainConfig,
    train: &Dataset<T>,
    epoch: u64,
) -> Result<EpochStats> {
    let order = epoch_order(train.len(), epoch, cfg.seed);
    let l = params.spec().layers();
    let mode = cfg.rule.feedback();
    let mut per = vec![OpCounters::new(); l];
    let mut updates = 0;
    let mut loss_sum = 0.0;
    for idx in batches(&order, cfg.rule.batch()) {
        let mut x = train.images.select_rows(idx);
        cfg.precision.store_all(x.as_mut_slice());
        let y = train.labels.select_rows(idx);
        let mut inputs = vec![x];
        let mut probs = None;
        for (i, c) in per.iter_mut().enumerate() {
            let last = i + 1 == l;
            let (_, h) = layer_forward(&params.weights[i], &params.biases[i], &inputs[i], last, cfg.precision, c)?;
            if last {
                probs = Some(h);
            } else {
                inputs.push(h);
            }
        }
        let sx = xent_from_probs(probs.expect("at least one layer"), &y);
        loss_sum += sx.loss.as_f64() * idx.len() as f64;
        let e = sx.error;
        let mut delta = e.clone();
        for layer in (0..l).rev() {
            let c = &mut per[layer];
            c.weight_accesses += 2 * params.weights[layer].len() as u64;
            let next = if layer == 0 {
                None
            } else {
                let mut d = match mode {
                    None => gemm_nt(&delta, &params.weights[layer], c)?,
                    Some(fb) => {
                        let b = &params.feedback().expect("feedback checked").mats[layer - 1];
                        c.weight_accesses += b.len() as u64;
                        match fb {
                            FeedbackMode::Fa => gemm_nt(&delta, b, c)?,
                            FeedbackMode::Dfa => gemm(&e, b, None, c)?,
                        }
                    }
                };
                mask_relu(&mut d, &inputs[layer]);
                Some(d)
            };
            update_layer(params, layer, &inputs[layer], &delta, cfg.lr, cfg.precision, c)?;
            if let Some(d) = next {
                delta = d;
            }
        }
        updates += 1;
    }
    Ok(EpochStats {
        loss: loss_sum / train.len() as f64,
        updates,
        counters: summed(&per),
        per_layer: per,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    Forward,
    Backward,
}

/// One scheduled layer operation, recorded when tracing is enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineEvent {
    pub step: usize,
    pub layer: usize,
    pub unit: usize,
    pub pass: Pass,
    /// Updates applied to this layer before the operation ran.
    pub weight_version: u64,
}

#[derive(Debug, Clone)]
struct CachedUnit<T> {
    unit: usize,
    input: Matrix<T>,
    /// Output error, held only by the last layer.
    error: Option<Matrix<T>>,
}

/// A unit entering the pipeline: its index and its `(x, y)` batch.
pub struct UnitInput<T> {
    pub unit: usize,
    pub x: Matrix<T>,
    pub y: Matrix<T>,
}

/// Continuous-propagation pipeline. Unit `s` runs forward through layer `l`
/// at step `s+l` and backward through it at step `s+2L−l−1`; within a step a
/// layer's backward and update precede its forward.
pub struct PipelineState<T> {
    pub params: Params<T>,
    pub step: usize,
    pub lr: f64,
    pub precision: Precision,
    /// Operation counters per layer.
    pub counters: Vec<OpCounters>,
    pub updates: Vec<u64>,
    pub loss_sum: f64,
    /// Largest number of cached units seen per layer.
    pub max_live: Vec<usize>,
    pub trace: Option<Vec<PipelineEvent>>,
    fifo: Vec<VecDeque<CachedUnit<T>>>,
    fwd_wire: Vec<Option<(usize, Matrix<T>, Matrix<T>)>>,
    bwd_wire: Vec<Option<(usize, Matrix<T>)>>,
}

impl<T: Scalar> PipelineState<T> {
    pub fn new(params: Params<T>, lr: f64, precision: Precision) -> Self {
        let l = params.spec().layers();
        PipelineState {
            params,
            step: 0,
            lr,
            precision,
            counters: vec![OpCounters::new(); l],
            updates: vec![0; l],
            loss_sum: 0.0,
            max_live: vec![0; l],
            trace: None,
            fifo: (0..l).map(|_| VecDeque::new()).collect(),
            fwd_wire: vec![None; l],
            bwd_wire: vec![None; l],
        }
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn live(&self, layer: usize) -> usize {
        self.fifo[layer].len()
    }

    pub fn is_empty(&self) -> bool {
        self.fifo.iter().all(VecDeque::is_empty)
            && self.fwd_wire.iter().all(Option::is_none)
            && self.bwd_wire.iter().all(Option::is_none)
    }

    /// Starts a new epoch: step numbering restarts at zero.
    pub fn reset_step(&mut self) {
        debug_assert!(self.is_empty());
        self.step = 0;
    }

    fn record(&mut self, layer: usize, unit: usize, pass: Pass) {
        let step = self.step;
        let weight_version = self.updates[layer];
        if let Some(t) = &mut self.trace {
            t.push(PipelineEvent {
                step,
                layer,
                unit,
                pass,
                weight_version,
            });
        }
    }
}

/// Advances the pipeline by one step, admitting `entering` at layer 0.
pub fn cp_step<T: Scalar>(state: &mut PipelineState<T>, entering: Option<UnitInput<T>>) -> Result<()> {
    let l = state.params.spec().layers();
    let t = state.step;
    let mut next_fwd: Vec<Option<(usize, Matrix<T>, Matrix<T>)>> = vec![None; l];
    let mut next_bwd: Vec<Option<(usize, Matrix<T>)>> = vec![None; l];
    let mut fwd_in = std::mem::replace(&mut state.fwd_wire, vec![None; l]);
    let mut bwd_in = std::mem::take(&mut state.bwd_wire);
    fwd_in[0] = entering.map(|u| {
        let mut x = u.x;
        state.precision.store_all(x.as_mut_slice());
        (u.unit, x, u.y)
    });

    for layer in 0..l {
        // Backward for the unit due at this step.
        let due = state.fifo[layer]
            .front()
            .is_some_and(|c| c.unit + 2 * l - layer - 1 == t);
        if due {
            let cached = state.fifo[layer].pop_front().expect("due unit");
            let delta = if layer + 1 == l {
                cached.error.clone().expect("last layer keeps the error")
            } else {
                let (u, d) = bwd_in[layer]
                    .take()
                    .ok_or_else(|| Error::Validation(format!("no error for layer {layer} at step {t}")))?;
                if u != cached.unit {
                    return Err(Error::Validation(format!(
                        "layer {layer} step {t}: error for unit {u}, cache holds {}",
                        cached.unit
                    )));
                }
                d
            };
            state.record(layer, cached.unit, Pass::Backward);
            let c = &mut state.counters[layer];
            if layer > 0 {
                let mut d = gemm_nt(&delta, &state.params.weights[layer], c)?;
                mask_relu(&mut d, &cached.input);
                next_bwd[layer - 1] = Some((cached.unit, d));
            }
            update_layer(&mut state.params, layer, &cached.input, &delta, state.lr, state.precision, c)?;
            c.weight_accesses += state.params.weights[layer].len() as u64;
            state.updates[layer] += 1;
        }

        // Forward for the unit that arrived at this layer.
        if let Some((unit, input, y)) = fwd_in[layer].take() {
            state.record(layer, unit, Pass::Forward);
            let last = layer + 1 == l;
            let (_, h) = layer_forward(
                &state.params.weights[layer],
                &state.params.biases[layer],
                &input,
                last,
                state.precision,
                &mut state.counters[layer],
            )?;
            let error = if last {
                let sx = xent_from_probs(h, &y);
                state.loss_sum += sx.loss.as_f64() * y.rows() as f64;
                Some(sx.error)
            } else {
                next_fwd[layer + 1] = Some((unit, h, y));
                None
            };
            state.fifo[layer].push_back(CachedUnit { unit, input, error });
            state.max_live[layer] = state.max_live[layer].max(state.fifo[layer].len());
        }
    }
    state.fwd_wire = next_fwd;
    state.bwd_wire = next_bwd;
    state.step += 1;
    Ok(())
}

/// Steps needed to push `units` units through an `l`-layer pipeline.
pub fn pipeline_steps(units: usize, l: usize) -> usize {
    if units == 0 {
        0
    } else {
        units + 2 * l - 1
    }
}

/// Fill, steady state and drain for one epoch of CP or MBCP.
pub fn cp_epoch<T: Scalar>(
    params: Params<T>,
    cfg: &TrainConfig,
    train: &Dataset<T>,
    epoch: u64,
) -> Result<(Params<T>, EpochStats)> {
    let mut state = PipelineState::new(params, cfg.lr, cfg.precision);
    run_cp_epoch(&mut state, train, cfg.rule.batch(), epoch, cfg.seed)?;
    let stats = EpochStats {
        loss: state.loss_sum / train.len() as f64,
        updates: state.updates[0],
        counters: summed(&state.counters),
        per_layer: state.counters.clone(),
    };
    Ok((state.params, stats))
}

/// Runs one full epoch through an existing (empty) pipeline.
pub fn run_cp_epoch<T: Scalar>(
    state: &mut PipelineState<T>,
    train: &Dataset<T>,
    b: usize,
    epoch: u64,
    seed: u64,
) -> Result<()> {
    let order = epoch_order(train.len(), epoch, seed);
    let units: Vec<&[usize]> = batches(&order, b).collect();
    let l = state.params.spec().layers();
    state.reset_step();
    for t in 0..pipeline_steps(units.len(), l) {
        let entering = units.get(t).map(|idx| UnitInput {
            unit: t,
            x: train.images.select_rows(idx),
            y: train.labels.select_rows(idx),
        });
        cp_step(state, entering)?;
    }
    debug_assert!(state.is_empty());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(k: usize, d: usize, seed: u64) -> Dataset<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let classes: Vec<u8> = (0..k).map(|i| (i % 10) as u8).collect();
        let pixels: Vec<u8> = (0..k * d)
            .map(|i| {
                let c = classes[i / d] as usize;
                if i % d == c % d { 255 } else { rng.gen_range(0..60) }
            })
            .collect();
        Dataset::from_bytes(&pixels, classes, (1, d as u32)).unwrap()
    }

    fn spec(d: &[usize]) -> NetworkSpec {
        NetworkSpec::new(d.to_vec()).unwrap()
    }

    fn run(rule: LearningRule, dims: &[usize], k: usize, epochs: usize) -> (TrainHistory, Params<f64>) {
        let data = toy(k, dims[0], 1);
        let cfg = TrainConfig::new(rule, epochs, 5);
        fit(&spec(dims), &cfg, &data, &data).unwrap()
    }

    #[test]
    fn full_batch_is_one_update() {
        let (h, _) = run(LearningRule::Mbgd { batch: 12 }, &[12, 6, 10], 12, 1);
        assert_eq!(h.records[0].updates, 1);
    }

    #[test]
    fn update_count_law() {
        for (rule, want) in [
            (LearningRule::Sgd, 24),
            (LearningRule::Mbgd { batch: 4 }, 6),
            (LearningRule::Dfa { batch: 3 }, 8),
            (LearningRule::Fa { batch: 2 }, 12),
            (LearningRule::Cp, 24),
            (LearningRule::Mbcp { batch: 6 }, 4),
        ] {
            let (h, _) = run(rule, &[12, 7, 5, 10], 24, 2);
            assert!(h.records.iter().all(|r| r.updates == want), "{rule}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        for rule in [LearningRule::Sgd, LearningRule::Cp, LearningRule::Dfa { batch: 2 }] {
            let a = run(rule, &[12, 8, 10], 30, 2);
            let b = run(rule, &[12, 8, 10], 30, 2);
            assert_eq!(a.0, b.0);
            assert_eq!(a.1, b.1);
        }
    }

    #[test]
    fn cp_schedule_for_three_layers() {
        let data = toy(8, 12, 2);
        let params: Params<f64> = init_params(&spec(&[12, 6, 5, 10]), 1, None);
        let mut st = PipelineState::new(params, 0.02, Precision::Native).with_trace();
        run_cp_epoch(&mut st, &data, 1, 0, 1).unwrap();
        let trace = st.trace.as_ref().unwrap();
        let of_unit0: Vec<(usize, usize, Pass)> = trace
            .iter()
            .filter(|e| e.unit == 0)
            .map(|e| (e.step, e.layer, e.pass))
            .collect();
        assert_eq!(
            of_unit0,
            vec![
                (0, 0, Pass::Forward),
                (1, 1, Pass::Forward),
                (2, 2, Pass::Forward),
                (3, 2, Pass::Backward),
                (4, 1, Pass::Backward),
                (5, 0, Pass::Backward),
            ]
        );
        for e in trace.iter().filter(|e| e.layer == 0 && e.pass == Pass::Forward) {
            let stale = e.unit < 5;
            assert_eq!(e.weight_version == 0, stale, "unit {}", e.unit);
        }
        // Unit 5's forward at step 5 sees the update made earlier in that step.
        assert!(trace
            .iter()
            .any(|e| e.unit == 5 && e.layer == 0 && e.pass == Pass::Forward && e.weight_version == 1));
        assert_eq!(st.step, pipeline_steps(8, 3));
        for l in 0..3 {
            assert!(st.max_live[l] <= 2 * (3 - l), "layer {l}: {}", st.max_live[l]);
        }
        assert!(st.is_empty());
    }

    #[test]
    fn single_layer_cp_equals_sgd() {
        let a = run(LearningRule::Cp, &[12, 10], 40, 3);
        let b = run(LearningRule::Sgd, &[12, 10], 40, 3);
        assert_eq!(a.1, b.1);
        for (x, y) in a.0.records.iter().zip(&b.0.records) {
            assert_eq!((x.val_acc, x.loss, x.updates, x.macs), (y.val_acc, y.loss, y.updates, y.macs));
        }
    }

    #[test]
    fn cp_macs_match_sgd() {
        let a = run(LearningRule::Cp, &[12, 9, 7, 10], 20, 1);
        let b = run(LearningRule::Sgd, &[12, 9, 7, 10], 20, 1);
        assert_eq!(a.0.records[0].macs, b.0.records[0].macs);
        assert_eq!(2 * a.0.records[0].weight_accesses, b.0.records[0].weight_accesses);
    }

    #[test]
    fn learning_reduces_loss() {
        for rule in [
            LearningRule::Sgd,
            LearningRule::Cp,
            LearningRule::Mbgd { batch: 4 },
            LearningRule::Mbcp { batch: 4 },
        ] {
            let (h, _) = run(rule, &[12, 16, 10], 200, 4);
            assert!(h.records[3].loss < h.records[0].loss, "{rule}");
        }
    }

    #[test]
    fn divergence_is_recorded_not_raised() {
        let data = toy(40, 12, 1);
        let mut cfg = TrainConfig::new(LearningRule::Sgd, 5, 0);
        cfg.lr = 1e200;
        let h = train(&spec(&[12, 16, 10]), &cfg, &data, &data).unwrap();
        assert!(h.diverged_at.is_some());
        assert!(h.records.len() < 5);
    }

    #[test]
    fn config_and_shape_errors() {
        let data = toy(10, 12, 1);
        let cfg = TrainConfig::new(LearningRule::Mbgd { batch: 0 }, 1, 0);
        assert!(matches!(train(&spec(&[12, 10]), &cfg, &data, &data), Err(Error::Config(_))));
        let cfg = TrainConfig::new(LearningRule::Sgd, 1, 0);
        assert!(matches!(train(&spec(&[11, 10]), &cfg, &data, &data), Err(Error::Shape { .. })));
    }

    #[test]
    fn history_csv_layout() {
        let (h, _) = run(LearningRule::Sgd, &[12, 10], 10, 2);
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,val_acc,loss,updates,macs");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1,"));
    }

    #[test]
    fn rule_labels_and_defaults() {
        assert_eq!(LearningRule::Mbgd { batch: 8 }.to_string(), "MBGD(8)");
        assert_eq!(LearningRule::Dfa { batch: 50 }.key(), "dfa50");
        assert_eq!(LearningRule::Mbgd { batch: 50 }.default_lr(), 0.05);
        assert_eq!(LearningRule::Cp.batch(), 1);
        let json = serde_json::to_string(&LearningRule::Mbcp { batch: 4 }).unwrap();
        assert_eq!(json, r#"{"kind":"mbcp","batch":4}"#);
    }
}
