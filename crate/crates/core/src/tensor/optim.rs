use super::{Gradients, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Learning-rate schedule applied on top of the base rate.
#[derive(Clone, Debug, PartialEq)]
pub enum LrSchedule {
    Fixed,
    /// Linear warmup to the base rate, then inverse square-root decay.
    WarmupDecay { warmup_steps: u64 },
    /// Multiply the rate by `factor` once the validation metric has failed to
    /// improve for more than `patience` consecutive reports.
    Plateau { factor: f64, patience: u32, min_lr: f64 },
}

/// Mutable optimizer state; moments are indexed like the parameter store.
#[derive(Clone, Debug)]
pub struct OptimizerState<R> {
    pub step: u64,
    pub first_moment: Vec<Tensor<R>>,
    pub second_moment: Vec<Tensor<R>>,
    pub num_decays: u32,
    pub best_metric: Option<f32>,
    pub bad_reports: u32,
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<R> {
    pub config: AdamConfig,
    pub schedule: LrSchedule,
    pub state: OptimizerState<R>,
}

impl<R: Real> Adam<R> {
    pub fn new(config: AdamConfig, schedule: LrSchedule, store: &ParamStore<R>) -> Result<Self> {
        if config.learning_rate.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::config("training.optimizer.learning_rate", "must be > 0"));
        }
        let zeros: Vec<Tensor<R>> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Ok(Adam {
            config,
            schedule,
            state: OptimizerState {
                step: 0,
                first_moment: zeros.clone(),
                second_moment: zeros,
                num_decays: 0,
                best_metric: None,
                bad_reports: 0,
            },
        })
    }

    /// Learning rate that the next call to [`Adam::step`] will use.
    pub fn current_lr(&self) -> f64 {
        let base = self.config.learning_rate;
        match &self.schedule {
            LrSchedule::Fixed => base,
            LrSchedule::WarmupDecay { warmup_steps } => {
                let t = (self.state.step + 1) as f64;
                let w = (*warmup_steps).max(1) as f64;
                base * (t / w).min((w / t).sqrt())
            }
            LrSchedule::Plateau { factor, min_lr, .. } => {
                (base * factor.powi(self.state.num_decays as i32)).max(*min_lr)
            }
        }
    }

    /// Feeds a validation score to the plateau scheduler.
    pub fn report_validation(&mut self, metric: f64, lower_is_better: bool) {
        let metric = metric as f32;
        let improved = match self.state.best_metric {
            None => true,
            Some(best) if lower_is_better => metric < best,
            Some(best) => metric > best,
        };
        if improved {
            self.state.best_metric = Some(metric);
            self.state.bad_reports = 0;
            return;
        }
        self.state.bad_reports += 1;
        if let LrSchedule::Plateau { patience, .. } = self.schedule {
            if self.state.bad_reports > patience {
                self.state.num_decays += 1;
                self.state.bad_reports = 0;
            }
        }
    }

    /// One update of every trainable parameter.
    pub fn step(&mut self, store: &mut ParamStore<R>, grads: &Gradients<R>) -> Result<()> {
        let lr = self.current_lr();
        if lr.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Contract(format!("learning rate {lr} is not positive")));
        }
        if self.state.first_moment.len() != store.len() {
            return Err(Error::Contract("optimizer state does not match parameter store".into()));
        }
        let t = self.state.step + 1;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let bc1 = R::of(1.0 - b1.powi(t as i32));
        let bc2 = R::of(1.0 - b2.powi(t as i32));
        let (rb1, rb2) = (R::of(b1), R::of(b2));
        let (lr, eps) = (R::of(lr), R::of(self.config.eps));
        for id in store.ids().collect::<Vec<_>>() {
            if !store.get(id).requires_grad {
                continue;
            }
            let g = grads.param(id).ok_or_else(|| {
                Error::Contract(format!("missing gradient for parameter {}", store.get(id).name))
            })?;
            let m = self.state.first_moment[id.0].data_mut();
            let v = self.state.second_moment[id.0].data_mut();
            let p = store.get_mut(id).value.data_mut();
            for (((pi, mi), vi), &gi) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *mi = rb1 * *mi + (R::one() - rb1) * gi;
                *vi = rb2 * *vi + (R::one() - rb2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        self.state.step = t;
        Ok(())
    }
}
