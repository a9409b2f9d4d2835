//! Adam and the training step.

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::losses::{total_loss, EdgeKernels};
use crate::model::{bicubic_upsample, GlMamba};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub step: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState<S>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64, store: &ParamStore<S>) -> Self {
        let zeros = || store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState {
                step: 0,
                m: zeros(),
                v: zeros(),
            },
        }
    }

    /// One bias-corrected update; `grads[i]` pairs with parameter `i`.
    pub fn update(&mut self, store: &mut ParamStore<S>, grads: &[Option<Tensor<S>>]) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let c1 = S::lit(1.0 - self.beta1.powi(t));
        let c2 = S::lit(1.0 - self.beta2.powi(t));
        let (lr, eps) = (S::lit(self.lr), S::lit(self.eps));
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[k] else { continue };
            let (m, v) = (&mut self.state.m[k], &mut self.state.v[k]);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (S::one() - b1) * gi;
                let vi = b2 * v.data()[i] + (S::one() - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / c1;
                let vhat = vi / c2;
                p[i] = p[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Images `(N, 1, ·, ·)` of one minibatch.
#[derive(Clone, Debug)]
pub struct Batch<S> {
    pub lr: Tensor<S>,
    pub reference: Tensor<S>,
    pub hr: Tensor<S>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub loss: f64,
    pub l1_sr: f64,
    pub l1_ref: f64,
    pub celoss: f64,
}

/// Loss terms and per-parameter gradients at the current parameters.
pub fn loss_and_grads<S: Scalar>(
    model: &GlMamba,
    store: &ParamStore<S>,
    batch: &Batch<S>,
    with_grads: bool,
) -> Result<(StepLog, Vec<Option<Tensor<S>>>)> {
    let cfg = &model.config;
    let mut g = Graph::new();
    let p = store.bind(&mut g, |_| with_grads);
    let o = model.forward_images(&mut g, &p, &batch.lr, &batch.reference)?;
    let hr = g.constant(batch.hr.clone());
    let rf = g.constant(batch.reference.clone());
    let kernels = EdgeKernels::new(cfg.e2_symmetric);
    let t = total_loss(&mut g, o.sr, hr, o.rec_ref, rf, &cfg.loss_weights, &kernels)?;
    let val = |v| g.value(v).data()[0].to_f64();
    let log = StepLog {
        loss: val(t.total),
        l1_sr: val(t.l1_sr),
        l1_ref: val(t.l1_ref),
        celoss: val(t.celoss),
    };
    if !with_grads {
        return Ok((log, Vec::new()));
    }
    let mut grads = g.backward(t.total)?;
    let mut out = Vec::with_capacity(store.len());
    for (k, id) in store.ids().enumerate() {
        let gr = grads.take(p.var(id));
        if let Some(gr) = &gr {
            if !gr.is_finite() {
                return Err(Error::NonFiniteParam {
                    what: "gradient",
                    name: store.name(id).to_string(),
                });
            }
        }
        debug_assert_eq!(k, out.len());
        out.push(gr);
    }
    Ok((log, out))
}

/// Forward, loss, backward, and one Adam update. Returns the loss before
/// the update.
pub fn train_step<S: Scalar>(model: &GlMamba, store: &mut ParamStore<S>, adam: &mut Adam<S>, batch: &Batch<S>) -> Result<StepLog> {
    let (log, grads) = loss_and_grads(model, store, batch, true)?;
    adam.update(store, &grads);
    for id in store.ids() {
        if !store.get(id).is_finite() {
            return Err(Error::NonFiniteParam {
                what: "value after update",
                name: store.name(id).to_string(),
            });
        }
    }
    Ok(log)
}

/// Mean loss over `batches` without updating anything.
pub fn evaluate_loss<S: Scalar>(model: &GlMamba, store: &ParamStore<S>, batches: &[Batch<S>]) -> Result<StepLog> {
    let mut acc = StepLog {
        loss: 0.0,
        l1_sr: 0.0,
        l1_ref: 0.0,
        celoss: 0.0,
    };
    for b in batches {
        let (l, _) = loss_and_grads(model, store, b, false)?;
        acc.loss += l.loss;
        acc.l1_sr += l.l1_sr;
        acc.l1_ref += l.l1_ref;
        acc.celoss += l.celoss;
    }
    let n = batches.len().max(1) as f64;
    Ok(StepLog {
        loss: acc.loss / n,
        l1_sr: acc.l1_sr / n,
        l1_ref: acc.l1_ref / n,
        celoss: acc.celoss / n,
    })
}

/// Bicubic baseline SR of a batch, for comparison with the model.
pub fn bicubic_baseline<S: Scalar>(lr: &Tensor<S>, scale: usize) -> Tensor<S> {
    bicubic_upsample(lr, scale)
}
