//! Named parameter tensors with Adam optimizer state.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.0008,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    adam: AdamState,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, value: Tensor) {
        self.params.insert(id.into(), value);
    }

    pub fn get(&self, id: &str) -> Result<&Tensor> {
        self.params
            .get(id)
            .ok_or_else(|| Error::UnknownParam(id.to_string()))
    }

    pub fn get_mut(&mut self, id: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(id)
            .ok_or_else(|| Error::UnknownParam(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.params.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Registers every parameter on `tape` and returns the bound variables.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), tape.param(k, v.clone())))
                .collect(),
        }
    }

    /// Adam update with bias correction, descending along `grads`.
    /// Parameters absent from `grads` are left untouched; the step
    /// counter advances once per call.
    pub fn adam_step(&mut self, grads: &BTreeMap<String, Tensor>, cfg: &AdamConfig) -> Result<()> {
        for (id, g) in grads {
            let p = self.get(id)?;
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.adam.step += 1;
        let t = self.adam.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (id, g) in grads {
            let p = self.params.get_mut(id).expect("checked above");
            let m = self
                .adam
                .m
                .entry(id.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .adam
                .v
                .entry(id.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pi, mi), vi), &gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<serde_json::Value> {
        for (id, t) in self.params.iter().chain(&self.adam.m).chain(&self.adam.v) {
            if !t.is_finite() {
                return Err(Error::Format(format!("parameter `{id}` holds non-finite values")));
            }
        }
        Ok(serde_json::to_value(ParamStoreDoc {
            format_version: FORMAT_VERSION,
            params: self.params.clone(),
            adam: self.adam.clone(),
        })?)
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self> {
        let version = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Format("missing format_version".into()))?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let doc: ParamStoreDoc = serde_json::from_value(value)?;
        for (id, t) in doc.params.iter().chain(&doc.adam.m).chain(&doc.adam.v) {
            if t.shape().iter().product::<usize>() != t.len() {
                return Err(Error::Format(format!("parameter `{id}`: shape/data length mismatch")));
            }
        }
        for (id, m) in doc.adam.m.iter().chain(&doc.adam.v) {
            match doc.params.get(id) {
                Some(p) if p.shape() == m.shape() => {}
                _ => return Err(Error::Format(format!("optimizer moment `{id}` has no matching parameter"))),
            }
        }
        Ok(ParamStore {
            params: doc.params,
            adam: doc.adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_json()?)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(serde_json::from_str(&text)?)
    }
}

#[derive(Serialize, Deserialize)]
struct ParamStoreDoc {
    format_version: u64,
    params: BTreeMap<String, Tensor>,
    adam: AdamState,
}

/// Parameters of one [`ParamStore`] bound as leaves on a tape.
#[derive(Debug)]
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, id: &str) -> Var<'t> {
        match self.vars.get(id) {
            Some(v) => *v,
            None => panic!("parameter `{id}` is not bound"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grads(pairs: &[(&str, Tensor)]) -> BTreeMap<String, Tensor> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(0.0));
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        s.adam_step(&grads(&[("w", Tensor::scalar(1.0))]), &cfg).unwrap();
        // m_hat = 1, v_hat = 1, step = lr / (1 + eps)
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((s.get("w").unwrap().item() - expected).abs() < 1e-15);
        assert_eq!(s.adam().step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![0.25, -3.0]));
        let before = s.get("w").unwrap().clone();
        for _ in 0..10 {
            s.adam_step(&grads(&[("w", Tensor::zeros(&[2]))]), &AdamConfig::default())
                .unwrap();
        }
        assert_eq!(s.get("w").unwrap(), &before);
    }

    #[test]
    fn identical_inputs_give_identical_states() {
        let run = || {
            let mut s = ParamStore::new();
            s.insert("a", Tensor::vector(vec![1.0, 2.0, 3.0]));
            for k in 0..7 {
                let g = Tensor::vector(vec![k as f64 * 0.3, -1.0, 0.01]);
                s.adam_step(&grads(&[("a", g)]), &AdamConfig::default()).unwrap();
            }
            s
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        for (x, y) in a.get("a").unwrap().data().iter().zip(b.get("a").unwrap().data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn moments_match_parameter_shapes() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[2, 3]));
        s.insert("frozen", Tensor::zeros(&[4]));
        s.adam_step(&grads(&[("w", Tensor::ones(&[2, 3]))]), &AdamConfig::default())
            .unwrap();
        assert_eq!(s.adam().m["w"].shape(), &[2, 3]);
        assert_eq!(s.adam().v["w"].shape(), &[2, 3]);
        assert!(!s.adam().m.contains_key("frozen"));
        assert_eq!(s.get("frozen").unwrap(), &Tensor::zeros(&[4]));
    }

    #[test]
    fn shape_mismatch_is_rejected_before_any_update() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[2]));
        let err = s
            .adam_step(&grads(&[("w", Tensor::zeros(&[3]))]), &AdamConfig::default())
            .unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
        assert_eq!(s.adam().step, 0);
    }

    #[test]
    fn json_roundtrip_is_bitwise() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![0.1, 1.0 / 3.0, -2.5e-300, std::f64::consts::PI]));
        s.adam_step(&grads(&[("w", Tensor::vector(vec![0.7, -0.2, 1e-9, 3.0]))]), &AdamConfig::default())
            .unwrap();
        let text = serde_json::to_string(&s.to_json().unwrap()).unwrap();
        let back = ParamStore::from_json(serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, s);
        for (x, y) in back.get("w").unwrap().data().iter().zip(s.get("w").unwrap().data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut doc = ParamStore::new().to_json().unwrap();
        doc["format_version"] = 2.into();
        assert!(matches!(
            ParamStore::from_json(doc),
            Err(Error::Version { found: 2, expected: 1 })
        ));
    }
}
