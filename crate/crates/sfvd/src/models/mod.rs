//! Video classifiers, the channel-merge fusion layer, and flat-parameter
//! utilities shared by expert training, distillation, and evaluation.

pub mod convnet;
pub mod fusion;
pub mod kernels;
pub mod recurrent;

use crate::data::Vdim;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub use convnet::ConvNet;
pub use fusion::FusionLayer;
pub use recurrent::RecurrentNet;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Conv3d,
    CnnGru,
    CnnLstm,
}

impl Arch {
    pub fn parse(s: &str) -> Result<Arch> {
        match s {
            "conv3d" => Ok(Arch::Conv3d),
            "cnn_gru" => Ok(Arch::CnnGru),
            "cnn_lstm" => Ok(Arch::CnnLstm),
            other => Err(Error::Config(format!(
                "unknown arch {other:?}, expected conv3d | cnn_gru | cnn_lstm"
            ))),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Arch::Conv3d => write!(f, "conv3d"),
            Arch::CnnGru => write!(f, "cnn_gru"),
            Arch::CnnLstm => write!(f, "cnn_lstm"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub arch: Arch,
    /// Channel multiplier (trunk width).
    pub width: usize,
    /// Block count.
    pub depth: usize,
    pub num_classes: usize,
    pub dims: Vdim,
    pub init_seed: u64,
}

/// One named parameter array within the flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
}

impl ParamLayout {
    pub fn push(&mut self, name: &str, shape: &[usize]) -> usize {
        let offset = self.total;
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset,
        });
        self.total += shape.iter().product::<usize>();
        offset
    }

    /// Canonical text form; the CRC-32 of this string is the layout digest
    /// used by the trajectory-buffer format.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&e.name);
            s.push(':');
            s.push_str(
                &e.shape
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join("x"),
            );
            s.push(':');
            s.push_str(&e.offset.to_string());
            s.push(';');
        }
        s
    }

    pub fn digest(&self) -> u32 {
        crc32fast::hash(self.describe().as_bytes())
    }
}

/// Flat parameter vector tagged with its layout digest.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatParams {
    pub values: Vec<f64>,
    pub digest: u32,
}

/// Split a flat vector into named arrays according to `layout`.
pub fn unflatten<'a, 'b>(
    layout: &'b ParamLayout,
    values: &'a [f64],
) -> Result<Vec<(&'a [f64], &'b ParamEntry)>> {
    if values.len() != layout.total {
        return Err(Error::Format(format!(
            "parameter vector length {} does not match layout total {}",
            values.len(),
            layout.total
        )));
    }
    Ok(layout
        .entries
        .iter()
        .map(|e| (&values[e.offset..e.offset + e.len()], e))
        .collect())
}

/// Rebuild a flat vector from named arrays; the inverse of [`unflatten`].
pub fn flatten(layout: &ParamLayout, named: &[(String, Vec<f64>)]) -> Result<Vec<f64>> {
    if named.len() != layout.entries.len() {
        return Err(Error::Format(format!(
            "expected {} arrays, got {}",
            layout.entries.len(),
            named.len()
        )));
    }
    let mut out = vec![0.0; layout.total];
    for (entry, (name, vals)) in layout.entries.iter().zip(named) {
        if *name != entry.name || vals.len() != entry.len() {
            return Err(Error::Format(format!(
                "layout mismatch at {:?} (expected {:?} of {})",
                name,
                entry.name,
                entry.len()
            )));
        }
        out[entry.offset..entry.offset + vals.len()].copy_from_slice(vals);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Squared,
}

/// Per-item training target. For cross-entropy, `Soft` carries learnable
/// logits whose softmax is the target distribution; for squared loss it is
/// the raw regression target vector.
#[derive(Clone, Copy, Debug)]
pub enum Target<'a, S: Real> {
    Hard(usize),
    Soft(&'a [S]),
}

fn softmax<S: Real>(logits: &[S]) -> Vec<S> {
    let mut m = logits[0];
    for &z in &logits[1..] {
        m = m.max_by_value(z);
    }
    let exps: Vec<S> = logits.iter().map(|&z| (z - m).exp()).collect();
    let mut sum = S::zero();
    for &e in &exps {
        sum += e;
    }
    let inv = S::one() / sum;
    exps.into_iter().map(|e| e * inv).collect()
}

fn log_sum_exp<S: Real>(logits: &[S]) -> S {
    let mut m = logits[0];
    for &z in &logits[1..] {
        m = m.max_by_value(z);
    }
    let mut sum = S::zero();
    for &z in logits {
        sum += (z - m).exp();
    }
    m + sum.ln()
}

/// Loss value, gradient w.r.t. logits, and (for soft targets) gradient
/// w.r.t. the target vector.
pub fn loss_and_dlogits<S: Real>(
    kind: LossKind,
    logits: &[S],
    target: &Target<'_, S>,
) -> (S, Vec<S>, Option<Vec<S>>) {
    let n = logits.len();
    match (kind, target) {
        (LossKind::CrossEntropy, Target::Hard(y)) => {
            let lse = log_sum_exp(logits);
            let loss = lse - logits[*y];
            let mut dz = softmax(logits);
            dz[*y] -= S::one();
            (loss, dz, None)
        }
        (LossKind::CrossEntropy, Target::Soft(t)) => {
            let q = softmax(t);
            let lse = log_sum_exp(logits);
            let mut qz = S::zero();
            for (qi, zi) in q.iter().zip(logits) {
                qz += *qi * *zi;
            }
            let loss = lse - qz;
            let p = softmax(logits);
            let dz: Vec<S> = p.iter().zip(&q).map(|(&pi, &qi)| pi - qi).collect();
            let dt: Vec<S> = q.iter().zip(logits).map(|(&qk, &zk)| qk * (qz - zk)).collect();
            (loss, dz, Some(dt))
        }
        (LossKind::Squared, Target::Hard(y)) => {
            let mut loss = S::zero();
            let mut dz = Vec::with_capacity(n);
            for (i, &z) in logits.iter().enumerate() {
                let t = if i == *y { S::one() } else { S::zero() };
                let d = z - t;
                loss += d * d;
                dz.push(d + d);
            }
            (loss, dz, None)
        }
        (LossKind::Squared, Target::Soft(t)) => {
            let mut loss = S::zero();
            let mut dz = Vec::with_capacity(n);
            let mut dt = Vec::with_capacity(n);
            for (&z, &ti) in logits.iter().zip(*t) {
                let d = z - ti;
                loss += d * d;
                dz.push(d + d);
                dt.push(-(d + d));
            }
            (loss, dz, Some(dt))
        }
    }
}

/// Result of one item's loss/grad evaluation.
pub struct ItemGrads<S: Real> {
    pub loss: S,
    /// Gradient w.r.t. the input video (flat, same dims), when requested.
    pub dinput: Option<Vec<S>>,
    /// Gradient w.r.t. the soft target vector, when the target is soft.
    pub dtarget: Option<Vec<S>>,
}

/// A classifier that the trajectory-matching machinery can train and
/// differentiate through. Implemented by the production models and by tiny
/// hand-checkable models in tests.
pub trait Backbone: Sync {
    fn layout(&self) -> &ParamLayout;
    fn num_classes(&self) -> usize;
    fn input_dims(&self) -> Vdim;
    fn init_params(&self, seed: u64) -> Vec<f64>;
    /// Logits for a single flat video.
    fn forward_logits<S: Real>(&self, params: &[S], video: &[S]) -> Vec<S>;
    /// Loss and parameter gradient (accumulated into `dparams`) for one item.
    fn item_loss_grads<S: Real>(
        &self,
        params: &[S],
        video: &[S],
        target: &Target<'_, S>,
        loss: LossKind,
        dparams: &mut [S],
        want_dinput: bool,
    ) -> ItemGrads<S>;

    fn param_count(&self) -> usize {
        self.layout().total
    }
}

/// Architecture dispatch wrapper.
pub enum Model {
    Conv(ConvNet),
    Recurrent(RecurrentNet),
}

/// Instantiate a model per spec. Fails when pooling would collapse the
/// spatial extent before the head.
pub fn build_model(spec: &ModelSpec) -> Result<Model> {
    match spec.arch {
        Arch::Conv3d => Ok(Model::Conv(ConvNet::new(spec)?)),
        Arch::CnnGru | Arch::CnnLstm => Ok(Model::Recurrent(RecurrentNet::new(spec)?)),
    }
}

impl Backbone for Model {
    fn layout(&self) -> &ParamLayout {
        match self {
            Model::Conv(m) => m.layout(),
            Model::Recurrent(m) => m.layout(),
        }
    }
    fn num_classes(&self) -> usize {
        match self {
            Model::Conv(m) => m.num_classes(),
            Model::Recurrent(m) => m.num_classes(),
        }
    }
    fn input_dims(&self) -> Vdim {
        match self {
            Model::Conv(m) => m.input_dims(),
            Model::Recurrent(m) => m.input_dims(),
        }
    }
    fn init_params(&self, seed: u64) -> Vec<f64> {
        match self {
            Model::Conv(m) => m.init_params(seed),
            Model::Recurrent(m) => m.init_params(seed),
        }
    }
    fn forward_logits<S: Real>(&self, params: &[S], video: &[S]) -> Vec<S> {
        match self {
            Model::Conv(m) => m.forward_logits(params, video),
            Model::Recurrent(m) => m.forward_logits(params, video),
        }
    }
    fn item_loss_grads<S: Real>(
        &self,
        params: &[S],
        video: &[S],
        target: &Target<'_, S>,
        loss: LossKind,
        dparams: &mut [S],
        want_dinput: bool,
    ) -> ItemGrads<S> {
        match self {
            Model::Conv(m) => m.item_loss_grads(params, video, target, loss, dparams, want_dinput),
            Model::Recurrent(m) => {
                m.item_loss_grads(params, video, target, loss, dparams, want_dinput)
            }
        }
    }
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        match self {
            Model::Conv(m) => m.spec(),
            Model::Recurrent(m) => m.spec(),
        }
    }
}

/// Uniform He-style init used by every layer: `U(-1/sqrt(fan_in), +)`,
/// biases zero. Stable given the rng stream order.
pub(crate) fn init_uniform(rng: &mut crate::rng::Rng, fan_in: usize, out: &mut [f64]) {
    use rand::Rng as _;
    let bound = 1.0 / (fan_in as f64).sqrt();
    for v in out.iter_mut() {
        *v = (rng.random::<f64>() * 2.0 - 1.0) * bound;
    }
}
