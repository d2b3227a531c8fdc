use crate::error::{Error, Result};
use crate::net::{ParamGroup, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Adam with one learning rate per parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr_spatial: f64,
    pub lr_temporal: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>, lr_spatial: f64, lr_temporal: f64) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Adam { lr_spatial, lr_temporal, beta1: BETA1, beta2: BETA2, eps: EPS, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Rebuild from saved moments.
    pub fn from_state(
        lr_spatial: f64,
        lr_temporal: f64,
        step: u64,
        m: Vec<Tensor<T>>,
        v: Vec<Tensor<T>>,
    ) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::Format("optimizer moments do not pair up".into()));
        }
        Ok(Adam { lr_spatial, lr_temporal, beta1: BETA1, beta2: BETA2, eps: EPS, step, m, v })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.v
    }

    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Spatial => self.lr_spatial,
            ParamGroup::Temporal => self.lr_temporal,
        }
    }

    /// One update. `grads[i]` belongs to parameter `i`; `None` means zero.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let (c1, c2) = (T::c(1.0 - self.beta1), T::c(1.0 - self.beta2));
        let bias1 = T::c(1.0 - self.beta1.powi(t));
        let bias2 = T::c(1.0 - self.beta2.powi(t));
        let eps = T::c(self.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let lr = match p.group {
                ParamGroup::Spatial => self.lr_spatial,
                ParamGroup::Temporal => self.lr_temporal,
            };
            let zero;
            let g = match g {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(p.value.shape());
                    &zero
                }
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if g.shape() != p.value.shape() {
                return Err(Error::shape("adam", format!("{}: grad {:?} vs {:?}", p.name, g.shape(), p.value.shape())));
            }
            *m = m.zip_map(g, |mi, gi| b1 * mi + c1 * gi)?;
            *v = v.zip_map(g, |vi, gi| b2 * vi + c2 * gi * gi)?;
            if lr == 0.0 {
                continue;
            }
            let lr = T::c(lr);
            let upd = m.zip_map(v, |mi, vi| lr * (mi / bias1) / ((vi / bias2).sqrt() + eps))?;
            p.value = p.value.sub(&upd)?;
        }
        Ok(())
    }
}
