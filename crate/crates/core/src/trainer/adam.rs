use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ParamStore;

/// Adam with one step counter shared by every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub(crate) m: BTreeMap<String, Vec<f32>>,
    pub(crate) v: BTreeMap<String, Vec<f32>>,
}

impl Adam {
    /// Zero moments for every parameter of `params`.
    pub fn new(params: &ParamStore, learning_rate: f64, betas: [f64; 2], eps: f64) -> Self {
        let zeros = || params.iter().map(|(k, t)| (k.to_string(), vec![0.0; t.numel()])).collect();
        Adam {
            learning_rate,
            beta1: betas[0],
            beta2: betas[1],
            eps,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f32]> {
        self.m.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f32]> {
        self.v.get(name).map(Vec::as_slice)
    }

    /// One update of every parameter in `trainable`, whose gradients must be
    /// populated. Gradients are cleared afterwards.
    pub fn step<'a>(&mut self, params: &mut ParamStore, trainable: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let names: Vec<&str> = trainable.into_iter().collect();
        for name in &names {
            let p = params
                .get(name)
                .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
            if p.grad().is_none() {
                return Err(Error::MissingGradient(name.to_string()));
            }
            if !self.m.contains_key(*name) {
                return Err(Error::UnknownParameter(name.to_string()));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for name in names {
            let p = params.get_mut(name).expect("checked above");
            let g = p.take_grad().expect("checked above");
            let m = self.m.get_mut(name).expect("checked above");
            let v = self.v.get_mut(name).expect("checked above");
            for (((theta, &g), m), v) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g as f64;
                let m_new = b1 * *m as f64 + (1.0 - b1) * g;
                let v_new = b2 * *v as f64 + (1.0 - b2) * g * g;
                *m = m_new as f32;
                *v = v_new as f32;
                let m_hat = m_new / c1;
                let v_hat = v_new / c2;
                *theta = (*theta as f64 - self.learning_rate * m_hat / (v_hat.sqrt() + self.eps)) as f32;
            }
        }
        params.clear_grads();
        Ok(())
    }
}
