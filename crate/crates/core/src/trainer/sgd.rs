use crate::autodiff::{ParamGroup, ParamStore};
use crate::error::{Error, Result};

/// `lr_init · decay^epoch`, clamped below at `floor` (or at `lr_init` when that is smaller).
pub fn lr_schedule(epoch: usize, lr_init: f64, decay: f64, floor: f64) -> f64 {
    let exp = i32::try_from(epoch).unwrap_or(i32::MAX);
    (lr_init * decay.powi(exp)).max(floor.min(lr_init))
}

/// SGD with heavy-ball momentum and L2 weight decay, one velocity buffer per tensor.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect(),
        }
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, v: Vec<Vec<f64>>) -> Result<()> {
        if v.len() != self.velocity.len() || v.iter().zip(&self.velocity).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Incompatible("momentum buffers do not match the model".into()));
        }
        self.velocity = v;
        Ok(())
    }

    /// `v ← μ·v + g + wd·p; p ← p − lr·v`, then zeroes the group's gradients.
    pub fn step(&mut self, store: &mut ParamStore, group: ParamGroup, lr: f64) -> Result<()> {
        for id in store.ids_in(group) {
            if store.get(id).grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NumericFault {
                    component: format!("gradient of {}", store.get(id).name),
                });
            }
        }
        for id in store.ids_in(group) {
            let p = store.get_mut(id);
            let v = &mut self.velocity[id.index()];
            for ((w, g), vi) in p.value.data_mut().iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + g + self.weight_decay * *w;
                *w -= lr * *vi;
            }
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        Ok(())
    }
}
