use crate::config::Precision;
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tape::Mat;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Adam with per-tensor moments and a separate step counter per group.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    /// Steps taken by [`ParamGroup::Main`] and [`ParamGroup::SigmaPrime`].
    pub t: [u64; 2],
}

fn slot(g: ParamGroup) -> usize {
    match g {
        ParamGroup::Main => 0,
        ParamGroup::SigmaPrime => 1,
    }
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = || store.entries().iter().map(|e| Mat::zeros(e.value.dim())).collect();
        Adam {
            lr,
            m: zeros(),
            v: zeros(),
            t: [0, 0],
        }
    }

    /// Applies one update to the parameters of `groups` that have gradients.
    /// Nothing is touched if any of those gradients is non-finite.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[(ParamId, Mat)],
        groups: &[ParamGroup],
        precision: Precision,
    ) -> Result<()> {
        let selected: Vec<&(ParamId, Mat)> = grads
            .iter()
            .filter(|(id, _)| groups.contains(&store.group(*id)))
            .collect();
        for (id, g) in &selected {
            if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {} contains {bad}",
                    store.name(*id)
                )));
            }
        }
        for &g in groups {
            self.t[slot(g)] += 1;
        }
        for (id, g) in selected {
            let t = self.t[slot(store.group(*id))] as i32;
            let c1 = 1.0 - BETA1.powi(t);
            let c2 = 1.0 - BETA2.powi(t);
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            m.zip_mut_with(g, |m, &g| *m = BETA1 * *m + (1.0 - BETA1) * g);
            v.zip_mut_with(g, |v, &g| *v = BETA2 * *v + (1.0 - BETA2) * g * g);
            let lr = self.lr;
            let p = store.value_mut(*id);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + EPS);
                if precision == Precision::F32 {
                    *p = *p as f32 as f64;
                }
            });
        }
        Ok(())
    }
}
