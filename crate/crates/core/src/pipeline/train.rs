use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::scalar::Scalar;
use crate::synthdata::{batch_order, Sample};
use crate::tensor::Tensor;

use super::config::TrainConfig;
use super::model::{distillation_loss, student_forward, MvadModel, Pyramid, Teacher};

/// Teacher features for a fixed set of samples, `[N·v, c_j, h_j, w_j]`.
#[derive(Debug, Clone)]
pub struct FeatureBank<T> {
    pub stages: Pyramid<Tensor<T>>,
    pub views: usize,
}

impl<T: Scalar> FeatureBank<T> {
    /// Runs the teacher over `samples`, `chunk` samples at a time.
    pub fn build(teacher: &Teacher<T>, samples: &[Sample], chunk: usize) -> Result<Self> {
        let views = samples.first().map(|s| s.images.shape()[0]).unwrap_or(0);
        let mut parts: [Vec<Tensor<T>>; 3] = Default::default();
        for group in samples.chunks(chunk.max(1)) {
            let f = teacher.forward(&stack_images(group)?)?;
            for (dst, t) in parts.iter_mut().zip(f) {
                dst.push(t);
            }
        }
        let cat = |ts: &Vec<Tensor<T>>| Tensor::concat(&ts.iter().collect::<Vec<_>>(), 0);
        Ok(Self {
            stages: [cat(&parts[0])?, cat(&parts[1])?, cat(&parts[2])?],
            views,
        })
    }

    pub fn samples(&self) -> usize {
        self.stages[0].shape()[0] / self.views.max(1)
    }

    /// Features of the given samples, in the given order.
    pub fn select(&self, samples: &[usize]) -> Result<Pyramid<Tensor<T>>> {
        let rows: Vec<usize> = samples
            .iter()
            .flat_map(|&i| (0..self.views).map(move |j| i * self.views + j))
            .collect();
        Ok([
            self.stages[0].gather(0, &rows)?,
            self.stages[1].gather(0, &rows)?,
            self.stages[2].gather(0, &rows)?,
        ])
    }
}

/// `[p·v, 3, H, W]` images of whole samples, cast to `T`.
pub fn stack_images<T: Scalar>(samples: &[Sample]) -> Result<Tensor<T>> {
    let parts: Vec<Tensor<T>> = samples.iter().map(|s| s.images.cast()).collect();
    Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub loss_trace: Vec<StepInfo>,
    pub steps_per_epoch: usize,
}

/// Shuffle seed of one epoch.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(epoch as u64 + 1)
}

/// A backpropagated tape, the student's leaves with their trainable flags,
/// and the loss value.
pub type LossGrads<T> = (Tape<T>, Vec<(Var, bool)>, f64);

/// One loss evaluation with gradients left on the tape.
pub fn loss_and_grads<T: Scalar>(model: &MvadModel<T>, feats: &Pyramid<Tensor<T>>) -> Result<LossGrads<T>> {
    let mut tape = Tape::new();
    let student = model.student.bind(&mut tape, true)?;
    let f_e = [
        tape.constant(feats[0].clone())?,
        tape.constant(feats[1].clone())?,
        tape.constant(feats[2].clone())?,
    ];
    let f_d = student_forward(&mut tape, &f_e, &student, &model.config)?;
    let loss = distillation_loss(&mut tape, &f_e, &f_d)?;
    let value = tape.value(loss).item().as_f64();
    tape.backward(loss)?;
    let mut vars = Vec::new();
    student.visit_named(&mut |_, &v, flag| vars.push((v, flag)));
    Ok((tape, vars, value))
}

/// AdamW on the student only; the teacher is never bound with gradients.
pub fn train<T: Scalar>(
    model: &mut MvadModel<T>,
    bank: &FeatureBank<T>,
    cfg: &TrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&StepInfo),
) -> Result<TrainReport> {
    cfg.validate()?;
    if bank.views != model.views() {
        return Err(Error::Compatibility(format!(
            "features have {} views, model expects {}",
            bank.views,
            model.views()
        )));
    }
    let opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let n = bank.samples();
    let steps_per_epoch = n.div_ceil(cfg.batch_samples);
    let mut trace = Vec::with_capacity(cfg.epochs * steps_per_epoch);
    for epoch in 0..cfg.epochs {
        let order = batch_order(n, Some(epoch_seed(seed, epoch)));
        for (step, chunk) in order.chunks(cfg.batch_samples).enumerate() {
            let diverged = |e: Error| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("training diverged at epoch {epoch}, step {step}: {msg}")),
                other => other,
            };
            let feats = bank.select(chunk)?;
            let (tape, vars, loss) = loss_and_grads(model, &feats).map_err(diverged)?;
            if !loss.is_finite() {
                return Err(diverged(Error::NonFinite(format!("loss {loss}"))));
            }
            let mut i = 0;
            let mut result = Ok(());
            model.student.visit_mut(&mut |param, flag| {
                let (var, _) = vars[i];
                i += 1;
                if !flag || result.is_err() {
                    return;
                }
                let zeros;
                let grad = match tape.grad(var) {
                    Some(g) => g,
                    None => {
                        zeros = vec![T::zero(); param.tensor.numel()];
                        &zeros
                    }
                };
                result = opt.step(param, grad);
            });
            result.map_err(diverged)?;
            let info = StepInfo { epoch, step, loss };
            on_step(&info);
            trace.push(info);
        }
    }
    Ok(TrainReport {
        loss_trace: trace,
        steps_per_epoch,
    })
}
