//! Differentiable inner loop for trajectory matching.
//!
//! The student is trained for `N` plain gradient steps on synthetic items;
//! the outer loss compares the resulting parameters against an expert
//! segment. Gradients w.r.t. the synthetic learnables flow through all `N`
//! steps exactly:
//!
//! * forward: unroll `theta_{j+1} = theta_j - alpha * g_j` in f64, recording
//!   every `theta_j` and minibatch;
//! * reverse: sweep `j = N-1..0` with adjoint `v = dL/dtheta_{j+1}`. One
//!   forward+backward pass on dual numbers with parameter tangent `v` yields
//!   the tangent of every gradient the pass computes, i.e. the
//!   Hessian-vector product `H_theta v` and the mixed products
//!   `d(grad_P l)/dtheta * v` for the synthetic parameters and soft labels.
//!   The adjoint updates are then `v <- v - alpha * H v`,
//!   `dP += -alpha * mixed`, `dalpha += -(v . g_j)`.
//!
//! Only first-order kernels are required; dual numbers supply the exact
//! second-order terms.

use crate::error::{Error, Result};
use crate::models::{Backbone, ItemGrads, LossKind, Target};
use crate::rng::Rng;
use crate::scalar::{Dual, Real};

/// Synthetic-parameter source: materializes items from the learnable vector
/// `p` and pulls video gradients back onto it.
pub trait SynSource {
    fn param_len(&self) -> usize;
    fn item_count(&self) -> usize;
    /// Flat `(f, c, h, w)` video for `item` under the current `p`.
    fn materialize(&self, p: &[f64], item: usize) -> Vec<f64>;
    /// Accumulate the adjoint of [`SynSource::materialize`] into `dp`.
    fn pullback<S: Real>(&self, item: usize, dvideo: &[S], dp: &mut [S]);
}

/// Per-item labels for the inner loss.
#[derive(Clone, Debug)]
pub enum Labels {
    Hard(Vec<usize>),
    /// Learnable per-item logits.
    Soft(Vec<Vec<f64>>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Hard(v) => v.len(),
            Labels::Soft(v) => v.len(),
        }
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct InnerRun {
    /// `thetas[0] = theta_start`, one entry per step after that.
    pub thetas: Vec<Vec<f64>>,
    pub batches: Vec<Vec<usize>>,
    /// Mean inner loss per step (before that step's update).
    pub losses: Vec<f64>,
}

fn pick_batch(items: usize, batch_syn: usize, rng: &mut Rng) -> Vec<usize> {
    if batch_syn >= items {
        (0..items).collect()
    } else {
        rand::seq::index::sample(rng, items, batch_syn).into_vec()
    }
}

/// Mean loss and gradients over one minibatch, generic over the scalar.
/// Returns the mean loss; `dtheta` is overwritten with the mean gradient,
/// `dp` (when given) accumulates the mean pullback, `dlabels` likewise.
#[allow(clippy::too_many_arguments)]
fn batch_grads<S: Real, B: Backbone, M: SynSource>(
    model: &B,
    src: &M,
    labels: &Labels,
    p: &[f64],
    params: &[S],
    batch: &[usize],
    loss_kind: LossKind,
    dtheta: &mut [S],
    mut dp: Option<&mut [S]>,
    mut dlabels: Option<&mut Vec<Vec<S>>>,
) -> S {
    for g in dtheta.iter_mut() {
        *g = S::zero();
    }
    let scale = S::from_f64(1.0 / batch.len() as f64);
    let mut total = S::zero();
    for &item in batch {
        let video64 = src.materialize(p, item);
        let video: Vec<S> = video64.iter().map(|&v| S::from_f64(v)).collect();
        let soft_buf: Option<Vec<S>> = match labels {
            Labels::Soft(all) => Some(all[item].iter().map(|&v| S::from_f64(v)).collect()),
            Labels::Hard(_) => None,
        };
        let target = match (labels, &soft_buf) {
            (Labels::Hard(ys), _) => Target::Hard(ys[item]),
            (Labels::Soft(_), Some(buf)) => Target::Soft(buf),
            _ => unreachable!(),
        };
        let want_dinput = dp.is_some();
        let ItemGrads { loss, dinput, dtarget } =
            model.item_loss_grads(params, &video, &target, loss_kind, dtheta, want_dinput);
        total += loss;
        if let (Some(dp_acc), Some(dv)) = (dp.as_deref_mut(), dinput) {
            let scaled: Vec<S> = dv.iter().map(|&g| g * scale).collect();
            src.pullback(item, &scaled, dp_acc);
        }
        if let (Some(dl), Some(dt)) = (dlabels.as_deref_mut(), dtarget) {
            for (acc, g) in dl[item].iter_mut().zip(dt) {
                *acc += g * scale;
            }
        }
    }
    for g in dtheta.iter_mut() {
        *g = *g * scale;
    }
    total * scale
}

/// Unroll `n_steps` inner gradient steps from `theta_start`.
#[allow(clippy::too_many_arguments)]
pub fn unroll_inner<B: Backbone, M: SynSource>(
    model: &B,
    src: &M,
    labels: &Labels,
    p: &[f64],
    alpha: f64,
    n_steps: usize,
    batch_syn: usize,
    theta_start: &[f64],
    loss_kind: LossKind,
    rng: &mut Rng,
) -> Result<InnerRun> {
    if n_steps < 1 {
        return Err(Error::Argument("inner steps must be >= 1".into()));
    }
    let items = src.item_count();
    if items == 0 || labels.len() != items {
        return Err(Error::Argument(format!(
            "label count {} does not match item count {items}",
            labels.len()
        )));
    }
    let mut thetas = vec![theta_start.to_vec()];
    let mut batches = Vec::with_capacity(n_steps);
    let mut losses = Vec::with_capacity(n_steps);
    let mut dtheta = vec![0.0; model.param_count()];
    for step in 0..n_steps {
        let batch = pick_batch(items, batch_syn, rng);
        let theta = thetas.last().unwrap();
        let loss = batch_grads::<f64, B, M>(
            model, src, labels, p, theta, &batch, loss_kind, &mut dtheta, None, None,
        );
        if !loss.is_finite() {
            return Err(Error::Distill(format!(
                "non-finite inner loss at step {step}"
            )));
        }
        let next: Vec<f64> = theta
            .iter()
            .zip(&dtheta)
            .map(|(&t, &g)| t - alpha * g)
            .collect();
        thetas.push(next);
        batches.push(batch);
        losses.push(loss);
    }
    Ok(InnerRun {
        thetas,
        batches,
        losses,
    })
}

pub struct MetaGrads {
    pub dp: Vec<f64>,
    pub dlabels: Option<Vec<Vec<f64>>>,
    pub dalpha: f64,
}

/// Reverse sweep through an unrolled run: converts `dL/dtheta_final` into
/// gradients w.r.t. the synthetic parameters, soft labels, and step size.
#[allow(clippy::too_many_arguments)]
pub fn meta_gradient<B: Backbone, M: SynSource>(
    model: &B,
    src: &M,
    labels: &Labels,
    p: &[f64],
    alpha: f64,
    run: &InnerRun,
    dtheta_final: Vec<f64>,
    loss_kind: LossKind,
) -> MetaGrads {
    let n_steps = run.batches.len();
    let pn = model.param_count();
    let want_labels = matches!(labels, Labels::Soft(_));
    let mut dp = vec![0.0; src.param_len()];
    let mut dlabels: Option<Vec<Vec<f64>>> = want_labels.then(|| {
        (0..labels.len())
            .map(|i| match labels {
                Labels::Soft(all) => vec![0.0; all[i].len()],
                Labels::Hard(_) => vec![],
            })
            .collect()
    });
    let mut dalpha = 0.0;
    let mut v = dtheta_final;
    let mut dtheta_dual = vec![Dual::constant(0.0); pn];
    for j in (0..n_steps).rev() {
        let theta = &run.thetas[j];
        let params: Vec<Dual> = theta
            .iter()
            .zip(&v)
            .map(|(&t, &tv)| Dual::new(t, tv))
            .collect();
        let mut dp_step = vec![Dual::constant(0.0); src.param_len()];
        let mut dl_step: Option<Vec<Vec<Dual>>> = want_labels.then(|| {
            (0..labels.len())
                .map(|i| match labels {
                    Labels::Soft(all) => vec![Dual::constant(0.0); all[i].len()],
                    Labels::Hard(_) => vec![],
                })
                .collect()
        });
        batch_grads::<Dual, B, M>(
            model,
            src,
            labels,
            p,
            &params,
            &run.batches[j],
            loss_kind,
            &mut dtheta_dual,
            Some(&mut dp_step),
            dl_step.as_mut(),
        );
        // dalpha += -(v . g_j); value lanes carry g_j
        let mut vg = 0.0;
        for (vi, g) in v.iter().zip(&dtheta_dual) {
            vg += vi * g.v;
        }
        dalpha -= vg;
        // dP += -alpha * tangent(grad_P l)
        for (acc, g) in dp.iter_mut().zip(&dp_step) {
            *acc -= alpha * g.t;
        }
        if let (Some(dl), Some(step)) = (dlabels.as_mut(), dl_step) {
            for (acc_vec, step_vec) in dl.iter_mut().zip(step) {
                for (acc, g) in acc_vec.iter_mut().zip(step_vec) {
                    *acc -= alpha * g.t;
                }
            }
        }
        // v <- v - alpha * (H v); tangent lanes carry H v
        for (vi, g) in v.iter_mut().zip(&dtheta_dual) {
            *vi -= alpha * g.t;
        }
    }
    MetaGrads {
        dp,
        dlabels,
        dalpha,
    }
}

/// Normalized squared trajectory-matching loss and its gradient w.r.t. the
/// student endpoint: `||theta_hat - end||^2 / ||start - end||^2`.
pub fn trajectory_loss(
    theta_hat: &[f64],
    start: &[f64],
    end: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if theta_hat.len() != start.len() || start.len() != end.len() {
        return Err(Error::Argument(format!(
            "trajectory loss layout mismatch: {} / {} / {}",
            theta_hat.len(),
            start.len(),
            end.len()
        )));
    }
    let mut den = 0.0;
    for (s, e) in start.iter().zip(end) {
        den += (s - e) * (s - e);
    }
    if den == 0.0 {
        return Err(Error::Match(
            "degenerate expert segment: start equals end".into(),
        ));
    }
    let mut num = 0.0;
    for (h, e) in theta_hat.iter().zip(end) {
        num += (h - e) * (h - e);
    }
    let grad: Vec<f64> = theta_hat
        .iter()
        .zip(end)
        .map(|(h, e)| 2.0 * (h - e) / den)
        .collect();
    Ok((num / den, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Vdim;
    use crate::models::{ItemGrads, ParamLayout};
    use crate::rng::seeded;

    /// One-parameter linear model phi(x) = theta * x with a single scalar
    /// logit; used for the hand-derivable oracles.
    struct ScalarLinear {
        layout: ParamLayout,
    }

    impl ScalarLinear {
        fn new() -> Self {
            let mut layout = ParamLayout::default();
            layout.push("w", &[1]);
            ScalarLinear { layout }
        }
    }

    impl Backbone for ScalarLinear {
        fn layout(&self) -> &ParamLayout {
            &self.layout
        }
        fn num_classes(&self) -> usize {
            1
        }
        fn input_dims(&self) -> Vdim {
            Vdim::new(1, 1, 1, 1)
        }
        fn init_params(&self, _seed: u64) -> Vec<f64> {
            vec![0.0]
        }
        fn forward_logits<S: Real>(&self, params: &[S], video: &[S]) -> Vec<S> {
            vec![params[0] * video[0]]
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
            let logits = self.forward_logits(params, video);
            let (loss_val, dz, dtarget) = crate::models::loss_and_dlogits(loss, &logits, target);
            dparams[0] += dz[0] * video[0];
            let dinput = want_dinput.then(|| vec![dz[0] * params[0]]);
            ItemGrads {
                loss: loss_val,
                dinput,
                dtarget,
            }
        }
    }

    /// Identity source: p is the single item's single pixel.
    struct IdSource;
    impl SynSource for IdSource {
        fn param_len(&self) -> usize {
            1
        }
        fn item_count(&self) -> usize {
            1
        }
        fn materialize(&self, p: &[f64], _item: usize) -> Vec<f64> {
            vec![p[0]]
        }
        fn pullback<S: Real>(&self, _item: usize, dvideo: &[S], dp: &mut [S]) {
            dp[0] += dvideo[0];
        }
    }

    #[test]
    fn trajectory_loss_identities_and_hand_case() {
        let start = vec![0.0, 0.0];
        let end = vec![1.0, 0.0];
        // theta_hat = end -> 0
        let (l0, _) = trajectory_loss(&end, &start, &end).unwrap();
        assert_eq!(l0, 0.0);
        // theta_hat = start -> 1
        let (l1, _) = trajectory_loss(&start, &start, &end).unwrap();
        assert!((l1 - 1.0).abs() < 1e-12);
        // hand case ||(0,1)||^2 / ||(1,0)||^2 = 1
        let (lh, _) = trajectory_loss(&[1.0, 1.0], &start, &end).unwrap();
        assert!((lh - 1.0).abs() < 1e-12);
        // degenerate segment rejected
        assert!(trajectory_loss(&end, &end, &end).is_err());
    }

    #[test]
    fn reflection_symmetry_of_trajectory_loss() {
        let start = vec![0.3, -0.7, 1.1];
        let end = vec![1.0, 0.2, -0.4];
        let hat = vec![0.9, 0.9, 0.0];
        let reflected: Vec<f64> = hat.iter().zip(&end).map(|(h, e)| 2.0 * e - h).collect();
        let (a, _) = trajectory_loss(&hat, &start, &end).unwrap();
        let (b, _) = trajectory_loss(&reflected, &start, &end).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    /// Spec oracle: theta0=0, x=1, y=1, alpha=0.1, squared loss. One step
    /// gives theta1 = 0.2 and d theta1 / dx = 0.2.
    #[test]
    fn scalar_inner_step_and_meta_gradient_oracle() {
        let model = ScalarLinear::new();
        let src = IdSource;
        let p = vec![1.0]; // x
        let y = vec![1.0];
        let labels = Labels::Soft(vec![y]);
        let mut rng = seeded(0);
        let run = unroll_inner(
            &model,
            &src,
            &labels,
            &p,
            0.1,
            1,
            1,
            &[0.0],
            LossKind::Squared,
            &mut rng,
        )
        .unwrap();
        assert!((run.thetas[1][0] - 0.2).abs() < 1e-12);

        // Meta-gradient with outer loss L = theta1 (dL/dtheta1 = 1):
        // theta1(x) = 2*alpha*x*y at theta0=0 -> d/dx = 2*0.1*1 = 0.2
        let meta = meta_gradient(
            &model,
            &src,
            &labels,
            &p,
            0.1,
            &run,
            vec![1.0],
            LossKind::Squared,
        );
        assert!((meta.dp[0] - 0.2).abs() < 1e-12, "dp = {}", meta.dp[0]);
        // dalpha: theta1 = theta0 - alpha*g, dL/dalpha = -g = 2x(y - 0) = ... g = 2x(theta x - y) = -2
        assert!((meta.dalpha - 2.0).abs() < 1e-12, "dalpha = {}", meta.dalpha);
    }

    #[test]
    fn alpha_zero_keeps_theta_fixed() {
        let model = ScalarLinear::new();
        let src = IdSource;
        let labels = Labels::Hard(vec![0]);
        let mut rng = seeded(0);
        let run = unroll_inner(
            &model,
            &src,
            &labels,
            &[0.7],
            0.0,
            4,
            1,
            &[0.5],
            LossKind::CrossEntropy,
            &mut rng,
        )
        .unwrap();
        for theta in &run.thetas {
            assert_eq!(theta[0], 0.5);
        }
    }

    #[test]
    fn full_batch_unroll_ignores_rng() {
        let model = ScalarLinear::new();
        let src = IdSource;
        let labels = Labels::Hard(vec![0]);
        let a = unroll_inner(
            &model, &src, &labels, &[0.7], 0.1, 3, 1, &[0.5],
            LossKind::CrossEntropy, &mut seeded(1),
        )
        .unwrap();
        let b = unroll_inner(
            &model, &src, &labels, &[0.7], 0.1, 3, 1, &[0.5],
            LossKind::CrossEntropy, &mut seeded(999),
        )
        .unwrap();
        assert_eq!(a.thetas, b.thetas);
    }
}
