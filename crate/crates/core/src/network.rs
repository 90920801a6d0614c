//! Multilayer perceptron: parameters, forward pass and the three backward
//! variants (backpropagation, feedback alignment, direct feedback alignment).

use std::io::{Read, Write};

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gemm, gemm_nt, gemm_tn, relu, softmax_rows, validate_one_hot, xent_from_probs};
use crate::linalg::{Matrix, OpCounters};
use crate::scalar::{Precision, Scalar};

/// Layer widths `[d_0, …, d_L]`. Layer `i` (zero-based) maps `d_i → d_{i+1}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct NetworkSpec(Vec<usize>);

impl NetworkSpec {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Validation(format!(
                "a network needs at least one weight layer, got dims {dims:?}"
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Validation(format!("zero-width layer in {dims:?}")));
        }
        Ok(NetworkSpec(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    /// Number of weight layers `L`.
    pub fn layers(&self) -> usize {
        self.0.len() - 1
    }

    /// `(m_i, n_i)` for zero-based layer `i`.
    pub fn shape(&self, i: usize) -> (usize, usize) {
        (self.0[i], self.0[i + 1])
    }

    pub fn shapes(&self) -> impl DoubleEndedIterator<Item = (usize, usize)> + ExactSizeIterator + '_ {
        self.0.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn input(&self) -> usize {
        self.0[0]
    }

    pub fn output(&self) -> usize {
        self.0[self.0.len() - 1]
    }

    /// `Σ m_i·n_i`.
    pub fn weight_count(&self) -> usize {
        self.shapes().map(|(m, n)| m * n).sum()
    }
}

impl TryFrom<Vec<usize>> for NetworkSpec {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        NetworkSpec::new(v)
    }
}

impl From<NetworkSpec> for Vec<usize> {
    fn from(s: NetworkSpec) -> Self {
        s.0
    }
}

impl std::fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        f.write_str(&parts.join("-"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackMode {
    /// `B_i [n_i×n_{i+1}]` stands in for `W_{i+1}` in the error chain.
    Fa,
    /// `B_i [n_L×n_i]` maps the output error straight to hidden layer `i`.
    Dfa,
}

/// Fixed random feedback, one matrix per hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Feedback<T> {
    pub mode: FeedbackMode,
    pub mats: Vec<Matrix<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    spec: NetworkSpec,
    pub(crate) weights: Vec<Matrix<T>>,
    pub(crate) biases: Vec<Vec<T>>,
    feedback: Option<Feedback<T>>,
}

fn feedback_shape(spec: &NetworkSpec, mode: FeedbackMode, i: usize) -> (usize, usize) {
    let d = spec.dims();
    match mode {
        FeedbackMode::Fa => (d[i + 1], d[i + 2]),
        FeedbackMode::Dfa => (spec.output(), d[i + 1]),
    }
}

fn uniform_matrix<T: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<T> {
    let a = (6.0 / rows as f64).sqrt();
    let u = Uniform::new_inclusive(-a, a);
    Matrix::from_fn(rows, cols, |_, _| T::of(u.sample(rng)))
}

/// Uniform `±√(6/m)` weights and zero biases; feedback drawn the same way
/// from an independent stream when `feedback` is set.
pub fn init_params<T: Scalar>(
    spec: &NetworkSpec,
    seed: u64,
    feedback: Option<FeedbackMode>,
) -> Params<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = spec
        .shapes()
        .map(|(m, n)| uniform_matrix(m, n, &mut rng))
        .collect();
    let biases = spec.shapes().map(|(_, n)| vec![T::zero(); n]).collect();
    let feedback = feedback.map(|mode| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mats = (0..spec.layers() - 1)
            .map(|i| {
                let (r, c) = feedback_shape(spec, mode, i);
                uniform_matrix(r, c, &mut rng)
            })
            .collect();
        Feedback { mode, mats }
    });
    Params {
        spec: spec.clone(),
        weights,
        biases,
        feedback,
    }
}

impl<T: Scalar> Params<T> {
    pub fn new(
        spec: NetworkSpec,
        weights: Vec<Matrix<T>>,
        biases: Vec<Vec<T>>,
        feedback: Option<Feedback<T>>,
    ) -> Result<Self> {
        let l = spec.layers();
        if weights.len() != l || biases.len() != l {
            return Err(Error::shape("Params::new", format!("expected {l} layers")));
        }
        for (i, (m, n)) in spec.shapes().enumerate() {
            if weights[i].shape() != (m, n) || biases[i].len() != n {
                return Err(Error::shape(
                    "Params::new",
                    format!("layer {i}: weights {:?}, expected {m}x{n}", weights[i].shape()),
                ));
            }
        }
        if let Some(fb) = &feedback {
            if fb.mats.len() != l - 1 {
                return Err(Error::shape("Params::new", "one feedback matrix per hidden layer"));
            }
            for (i, b) in fb.mats.iter().enumerate() {
                let want = feedback_shape(&spec, fb.mode, i);
                if b.shape() != want {
                    return Err(Error::shape(
                        "Params::new",
                        format!("feedback {i}: {:?}, expected {want:?}", b.shape()),
                    ));
                }
            }
        }
        Ok(Params {
            spec,
            weights,
            biases,
            feedback,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[Matrix<T>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<T>] {
        &self.biases
    }

    pub fn feedback(&self) -> Option<&Feedback<T>> {
        self.feedback.as_ref()
    }

    pub fn weights_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.biases
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
            && self.biases.iter().flatten().all(|v| v.is_finite())
    }

    /// Rounds every stored weight and bias to the given storage precision.
    pub fn store(&mut self, precision: Precision) {
        for w in &mut self.weights {
            precision.store_all(w.as_mut_slice());
        }
        for b in &mut self.biases {
            precision.store_all(b);
        }
    }
}

/// Activations of one batch. `pre[i]` is `a_i`, `hidden[i]` is `h_i = relu(a_i)`
/// for the hidden layers and `probs` is the softmax of the last `a`.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub input: Matrix<T>,
    pub pre: Vec<Matrix<T>>,
    pub hidden: Vec<Matrix<T>>,
    pub probs: Matrix<T>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Input to layer `i`, i.e. `h_{i-1}` with `h_0 = X`.
    pub fn layer_input(&self, i: usize) -> &Matrix<T> {
        if i == 0 {
            &self.input
        } else {
            &self.hidden[i - 1]
        }
    }

    pub fn batch(&self) -> usize {
        self.input.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub weights: Vec<Matrix<T>>,
    pub biases: Vec<Vec<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn zeros_like(params: &Params<T>) -> Self {
        Grads {
            weights: params
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: params.biases.iter().map(|b| vec![T::zero(); b.len()]).collect(),
        }
    }
}

fn add_bias<T: Scalar>(a: &mut Matrix<T>, bias: &[T]) {
    for r in 0..a.rows() {
        for (v, &b) in a.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// `a = input·W + bias`, followed by ReLU for hidden layers or softmax for the
/// last. Returns `(a, h)` with `h` rounded to the storage precision.
pub fn layer_forward<T: Scalar>(
    w: &Matrix<T>,
    bias: &[T],
    input: &Matrix<T>,
    last: bool,
    precision: Precision,
    counters: &mut OpCounters,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let mut a = gemm(input, w, None, counters)?;
    add_bias(&mut a, bias);
    let mut h = if last { softmax_rows(&a) } else { relu(&a) };
    if !last {
        precision.store_all(h.as_mut_slice());
    }
    Ok((a, h))
}

/// Zeroes entries of `delta` where the ReLU output `h` is not positive.
pub fn mask_relu<T: Scalar>(delta: &mut Matrix<T>, h: &Matrix<T>) {
    for (d, &v) in delta.as_mut_slice().iter_mut().zip(h.as_slice()) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
}

/// Batch-averaged `(h_{i-1}ᵀδ_i / b, colsum(δ_i) / b)`.
pub fn layer_grads<T: Scalar>(
    input: &Matrix<T>,
    delta: &Matrix<T>,
    counters: &mut OpCounters,
) -> Result<(Matrix<T>, Vec<T>)> {
    let inv_b = T::one() / T::of(input.rows() as f64);
    let dw = gemm_tn(input, delta, counters)?.map(|v| v * inv_b);
    let db = delta.col_sums().into_iter().map(|v| v * inv_b).collect();
    Ok((dw, db))
}

pub fn forward<T: Scalar>(
    params: &Params<T>,
    x: &Matrix<T>,
    counters: &mut OpCounters,
) -> Result<ForwardCache<T>> {
    forward_with(params, x, Precision::Native, counters)
}

pub fn forward_with<T: Scalar>(
    params: &Params<T>,
    x: &Matrix<T>,
    precision: Precision,
    counters: &mut OpCounters,
) -> Result<ForwardCache<T>> {
    if x.cols() != params.spec.input() {
        return Err(Error::shape(
            "forward",
            format!("input width {} for network {}", x.cols(), params.spec),
        ));
    }
    let l = params.spec.layers();
    let mut input = x.clone();
    precision.store_all(input.as_mut_slice());
    let mut pre = Vec::with_capacity(l);
    let mut hidden = Vec::with_capacity(l - 1);
    let mut probs = None;
    for i in 0..l {
        let src = if i == 0 { &input } else { &hidden[i - 1] };
        let (a, h) = layer_forward(
            &params.weights[i],
            &params.biases[i],
            src,
            i + 1 == l,
            precision,
            counters,
        )?;
        pre.push(a);
        if i + 1 == l {
            probs = Some(h);
        } else {
            hidden.push(h);
        }
    }
    Ok(ForwardCache {
        input,
        pre,
        hidden,
        probs: probs.expect("at least one layer"),
    })
}

fn output_error<T: Scalar>(cache: &ForwardCache<T>, y: &Matrix<T>) -> Result<Matrix<T>> {
    if y.shape() != cache.probs.shape() {
        return Err(Error::shape(
            "backward",
            format!("labels {:?} vs predictions {:?}", y.shape(), cache.probs.shape()),
        ));
    }
    validate_one_hot(y)?;
    Ok(xent_from_probs(cache.probs.clone(), y).error)
}

fn grads_from_deltas<T: Scalar>(
    cache: &ForwardCache<T>,
    deltas: &[Matrix<T>],
    counters: &mut OpCounters,
) -> Result<Grads<T>> {
    let mut weights = Vec::with_capacity(deltas.len());
    let mut biases = Vec::with_capacity(deltas.len());
    for (i, d) in deltas.iter().enumerate() {
        let (dw, db) = layer_grads(cache.layer_input(i), d, counters)?;
        weights.push(dw);
        biases.push(db);
    }
    Ok(Grads { weights, biases })
}

/// Error chain through `W_{i+1}` (`None`) or the FA feedback matrices.
fn chained_deltas<T: Scalar>(
    params: &Params<T>,
    cache: &ForwardCache<T>,
    e: Matrix<T>,
    feedback: Option<&[Matrix<T>]>,
    counters: &mut OpCounters,
) -> Result<Vec<Matrix<T>>> {
    let l = params.spec.layers();
    let mut deltas = vec![e];
    for i in (0..l - 1).rev() {
        let upper = &deltas[deltas.len() - 1];
        let through = match feedback {
            Some(b) => &b[i],
            None => &params.weights[i + 1],
        };
        let mut d = gemm_nt(upper, through, counters)?;
        mask_relu(&mut d, &cache.hidden[i]);
        deltas.push(d);
    }
    deltas.reverse();
    Ok(deltas)
}

pub fn backward_bp<T: Scalar>(
    params: &Params<T>,
    cache: &ForwardCache<T>,
    y: &Matrix<T>,
    counters: &mut OpCounters,
) -> Result<Grads<T>> {
    let e = output_error(cache, y)?;
    let deltas = chained_deltas(params, cache, e, None, counters)?;
    grads_from_deltas(cache, &deltas, counters)
}

fn require_feedback<T: Scalar>(params: &Params<T>, mode: FeedbackMode) -> Result<&[Matrix<T>]> {
    match &params.feedback {
        Some(fb) if fb.mode == mode => Ok(&fb.mats),
        Some(fb) => Err(Error::Config(format!(
            "parameters carry {:?} feedback, {mode:?} requested",
            fb.mode
        ))),
        None => Err(Error::Config(format!(
            "{mode:?} backward pass needs feedback matrices"
        ))),
    }
}

pub fn backward_fa<T: Scalar>(
    params: &Params<T>,
    cache: &ForwardCache<T>,
    y: &Matrix<T>,
    counters: &mut OpCounters,
) -> Result<Grads<T>> {
    let b = require_feedback(params, FeedbackMode::Fa)?;
    let e = output_error(cache, y)?;
    let deltas = chained_deltas(params, cache, e, Some(b), counters)?;
    grads_from_deltas(cache, &deltas, counters)
}

pub fn backward_dfa<T: Scalar>(
    params: &Params<T>,
    cache: &ForwardCache<T>,
    y: &Matrix<T>,
    counters: &mut OpCounters,
) -> Result<Grads<T>> {
    let order: Vec<usize> = (0..params.spec.layers() - 1).collect();
    backward_dfa_ordered(params, cache, y, &order, counters)
}

/// Hidden-layer deltas `δ_i = (e·B_i) ⊙ f'(h_i)`, evaluated in `order`.
pub(crate) fn dfa_hidden_delta<T: Scalar>(
    b: &Matrix<T>,
    e: &Matrix<T>,
    h: &Matrix<T>,
    counters: &mut OpCounters,
) -> Result<Matrix<T>> {
    let mut d = gemm(e, b, None, counters)?;
    mask_relu(&mut d, h);
    Ok(d)
}

pub(crate) fn backward_dfa_ordered<T: Scalar>(
    params: &Params<T>,
    cache: &ForwardCache<T>,
    y: &Matrix<T>,
    order: &[usize],
    counters: &mut OpCounters,
) -> Result<Grads<T>> {
    let b = require_feedback(params, FeedbackMode::Dfa)?;
    let l = params.spec.layers();
    let e = output_error(cache, y)?;
    let mut deltas: Vec<Option<Matrix<T>>> = vec![None; l];
    for &i in order {
        deltas[i] = Some(dfa_hidden_delta(&b[i], &e, &cache.hidden[i], counters)?);
    }
    deltas[l - 1] = Some(e);
    let deltas: Vec<Matrix<T>> = deltas
        .into_iter()
        .map(|d| d.ok_or_else(|| Error::Validation("DFA order misses a layer".into())))
        .collect::<Result<_>>()?;
    grads_from_deltas(cache, &deltas, counters)
}

/// `W_i ← W_i − η·ΔW_i` and likewise for the biases.
pub fn apply_grads<T: Scalar>(params: &mut Params<T>, grads: &Grads<T>, lr: T) -> Result<()> {
    if grads.weights.len() != params.weights.len() {
        return Err(Error::shape("apply_grads", "layer count"));
    }
    for (w, g) in params.weights.iter_mut().zip(&grads.weights) {
        if w.shape() != g.shape() {
            return Err(Error::shape(
                "apply_grads",
                format!("{:?} vs {:?}", w.shape(), g.shape()),
            ));
        }
        for (v, &d) in w.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *v -= lr * d;
        }
    }
    for (b, g) in params.biases.iter_mut().zip(&grads.biases) {
        for (v, &d) in b.iter_mut().zip(g) {
            *v -= lr * d;
        }
    }
    Ok(())
}

/// Fraction of rows whose arg-max prediction matches the one-hot label.
pub fn accuracy<T: Scalar>(probs: &Matrix<T>, classes: &[u8]) -> f64 {
    if classes.is_empty() {
        return 0.0;
    }
    let hits = (0..probs.rows())
        .filter(|&r| {
            let row = probs.row(r);
            let best = row
                .iter()
                .enumerate()
                .fold(0, |bi, (i, &v)| if v > row[bi] { i } else { bi });
            best == classes[r] as usize
        })
        .count();
    hits as f64 / classes.len() as f64
}

const PARAMS_MAGIC: &[u8; 8] = b"MLPPARAM";
const PARAMS_VERSION: u32 = 1;

fn write_f64s<W: Write, T: Scalar>(w: &mut W, vs: &[T]) -> Result<()> {
    for v in vs {
        w.write_all(&v.as_f64().to_le_bytes())?;
    }
    Ok(())
}

/// Flat little-endian container: magic, version, layer dims, feedback tag,
/// then row-major weights, biases and feedback as `f64`.
pub fn write_params<W: Write, T: Scalar>(params: &Params<T>, mut w: W) -> Result<()> {
    w.write_all(PARAMS_MAGIC)?;
    w.write_all(&PARAMS_VERSION.to_le_bytes())?;
    let dims = params.spec.dims();
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let tag: u8 = match params.feedback.as_ref().map(|f| f.mode) {
        None => 0,
        Some(FeedbackMode::Fa) => 1,
        Some(FeedbackMode::Dfa) => 2,
    };
    w.write_all(&[tag])?;
    for m in &params.weights {
        write_f64s(&mut w, m.as_slice())?;
    }
    for b in &params.biases {
        write_f64s(&mut w, b)?;
    }
    if let Some(fb) = &params.feedback {
        for m in &fb.mats {
            write_f64s(&mut w, m.as_slice())?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .buf
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::format(self.pos as u64, "truncated parameter file"))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn matrix<T: Scalar>(&mut self, rows: usize, cols: usize) -> Result<Matrix<T>> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(T::of(f64::from_bits(self.u64()?)));
        }
        Matrix::new(rows, cols, data)
    }
}

pub fn read_params<R: Read, T: Scalar>(mut r: R) -> Result<Params<T>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(8)? != PARAMS_MAGIC {
        return Err(Error::format(0, "not a parameter file"));
    }
    let version = c.u32()?;
    if version != PARAMS_VERSION {
        return Err(Error::format(8, format!("unsupported version {version}")));
    }
    let n = c.u32()? as usize;
    let dims = (0..n).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let spec = NetworkSpec::new(dims)?;
    let tag_pos = c.pos as u64;
    let mode = match c.take(1)?[0] {
        0 => None,
        1 => Some(FeedbackMode::Fa),
        2 => Some(FeedbackMode::Dfa),
        t => return Err(Error::format(tag_pos, format!("unknown feedback tag {t}"))),
    };
    let weights = spec
        .shapes()
        .map(|(m, n)| c.matrix(m, n))
        .collect::<Result<Vec<_>>>()?;
    let biases = spec
        .shapes()
        .map(|(_, n)| c.matrix::<T>(1, n).map(Matrix::into_vec))
        .collect::<Result<Vec<_>>>()?;
    let feedback = match mode {
        None => None,
        Some(mode) => {
            let mats = (0..spec.layers() - 1)
                .map(|i| {
                    let (r, cols) = feedback_shape(&spec, mode, i);
                    c.matrix(r, cols)
                })
                .collect::<Result<Vec<_>>>()?;
            Some(Feedback { mode, mats })
        }
    };
    if c.pos != buf.len() {
        return Err(Error::format(c.pos as u64, "trailing bytes"));
    }
    Params::new(spec, weights, biases, feedback)
}
