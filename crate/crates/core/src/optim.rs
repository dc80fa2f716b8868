//! Adam with constant learning rate and global-norm gradient clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::losses::{TAU_MAX, TAU_MIN};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;
pub const CLIP_NORM: f64 = 1.0;

/// First and second moments of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// Optimizer state keyed by parameter name so it survives checkpointing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub lr: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub moments: BTreeMap<String, Moments>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Global L2 norm over all gradient entries, accumulated in f64.
pub fn global_norm(grads: &[(ParamId, Vec<f32>)]) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|&x| x as f64 * x as f64)
        .sum::<f64>()
        .sqrt()
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One clipped update. Parameters without an entry in `grads` are left
    /// alone. The temperature `loss.tau` is clamped into its range afterwards.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f32>)]) -> Result<StepStats> {
        self.step_with_clip(store, grads, Some(CLIP_NORM))
    }

    pub fn step_with_clip(
        &mut self,
        store: &mut ParamStore,
        grads: &[(ParamId, Vec<f32>)],
        clip: Option<f64>,
    ) -> Result<StepStats> {
        let norm = global_norm(grads);
        if !norm.is_finite() {
            return Err(Error::invalid("non-finite gradient"));
        }
        let scale = match clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for (id, g) in grads {
            let name = store.name(*id).to_string();
            let p = store.get_mut(*id);
            if p.numel() != g.len() {
                return Err(Error::ParamMismatch {
                    name,
                    detail: format!("gradient has {} entries, parameter {}", g.len(), p.numel()),
                });
            }
            let mo = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            for (((w, &gi), m), v) in p.data_mut().iter_mut().zip(g).zip(&mut mo.m).zip(&mut mo.v) {
                let gi = gi as f64 * scale;
                let m1 = BETA1 * *m as f64 + (1.0 - BETA1) * gi;
                let v1 = BETA2 * *v as f64 + (1.0 - BETA2) * gi * gi;
                *m = m1 as f32;
                *v = v1 as f32;
                let upd = self.lr * (m1 / bc1) / ((v1 / bc2).sqrt() + EPS);
                *w = (*w as f64 - upd) as f32;
            }
            if name == "loss.tau" {
                for w in p.data_mut() {
                    *w = w.clamp(TAU_MIN, TAU_MAX);
                }
            }
        }
        Ok(StepStats {
            grad_norm: norm,
            clipped: scale < 1.0,
        })
    }

    /// Moments as tensors named `opt.m.<param>` / `opt.v.<param>`.
    pub fn export(&self) -> Result<Vec<(String, Tensor)>> {
        let mut out = Vec::new();
        for (name, mo) in &self.moments {
            out.push((format!("opt.m.{name}"), Tensor::new(vec![mo.m.len()], mo.m.clone())?));
            out.push((format!("opt.v.{name}"), Tensor::new(vec![mo.v.len()], mo.v.clone())?));
        }
        Ok(out)
    }

    /// Inverse of [`Adam::export`].
    pub fn import(lr: f64, t: u64, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut moments = BTreeMap::new();
        for (key, m) in tensors {
            let Some(name) = key.strip_prefix("opt.m.") else { continue };
            let v = tensors.get(&format!("opt.v.{name}")).ok_or_else(|| Error::ParamMismatch {
                name: name.to_string(),
                detail: "first moment without second moment".into(),
            })?;
            moments.insert(
                name.to_string(),
                Moments {
                    m: m.data().to_vec(),
                    v: v.data().to_vec(),
                },
            );
        }
        Ok(Adam { lr, t, moments })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut s, id) = store();
        let before = s.get(id).clone();
        let mut a = Adam::new(1e-2);
        for _ in 0..5 {
            a.step(&mut s, &[(id, vec![0.0; 3])]).unwrap();
        }
        assert_eq!(s.get(id).data(), before.data());
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // With bias correction the first update is lr · g/|g| per entry.
        let (mut s, id) = store();
        let mut a = Adam::new(0.1);
        a.step(&mut s, &[(id, vec![0.3, -0.2, 0.0])]).unwrap();
        let d = s.get(id).data();
        assert!((d[0] - 0.9).abs() < 1e-6);
        assert!((d[1] + 1.9).abs() < 1e-6);
        assert_eq!(d[2], 0.5);
    }

    #[test]
    fn clipping_scales_to_unit_norm() {
        let (mut s, id) = store();
        let mut a = Adam::new(0.1);
        let st = a.step(&mut s, &[(id, vec![3.0, 4.0, 0.0])]).unwrap();
        assert!(st.clipped);
        assert!((st.grad_norm - 5.0).abs() < 1e-12);
        let m = &a.moments["w"].m;
        assert!((m[0] - 0.1 * 0.6).abs() < 1e-7 && (m[1] - 0.1 * 0.8).abs() < 1e-7);
    }

    #[test]
    fn tau_is_clamped() {
        let mut s = ParamStore::new();
        let id = s.insert_full("loss.tau", &[1], 0.06).unwrap();
        let mut a = Adam::new(0.5);
        a.step(&mut s, &[(id, vec![1.0])]).unwrap();
        assert_eq!(s.get(id).item(), TAU_MIN);
    }

    #[test]
    fn export_import_round_trip() {
        let (mut s, id) = store();
        let mut a = Adam::new(0.1);
        a.step(&mut s, &[(id, vec![0.1, 0.2, 0.3])]).unwrap();
        let map: BTreeMap<_, _> = a.export().unwrap().into_iter().collect();
        assert_eq!(Adam::import(0.1, a.t, &map).unwrap(), a);
    }
}
