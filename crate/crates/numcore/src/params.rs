//! Named parameter storage with per-parameter gradient buffers and Adam moments.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{NumError, Result};
use crate::tensor::{Precision, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a freshly registered parameter is filled.
#[derive(Debug, Clone)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
    Uniform(f64),
    Value(Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub trainable: bool,
}

/// First and second moment estimates for one trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
    pub(crate) moments: Vec<Option<Moments>>,
    pub(crate) step: u64,
    precision: Precision,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        ParameterStore {
            precision,
            ..Self::default()
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn register<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<ParamId> {
        self.register_with(name, rows, cols, init, true, rng)
    }

    /// Registers a buffer that is saved with the model but never optimized.
    pub fn register_buffer(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
    ) -> Result<ParamId> {
        let name = name.into();
        let mut value = value;
        self.precision.round_slice(value.data_mut());
        self.insert(name, value, false)
    }

    pub fn register_with<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        init: Init,
        trainable: bool,
        rng: &mut R,
    ) -> Result<ParamId> {
        let name = name.into();
        if rows == 0 || cols == 0 {
            return Err(NumError::EmptyShape { rows, cols });
        }
        let mut value = match init {
            Init::Zeros => Tensor::zeros(rows, cols),
            Init::Ones => Tensor::filled(rows, cols, 1.0),
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                uniform(rows, cols, bound, rng)
            }
            Init::Uniform(bound) => uniform(rows, cols, bound, rng),
            Init::Value(t) => {
                if t.shape() != (rows, cols) {
                    return Err(NumError::Shape {
                        op: "register",
                        left: (rows, cols),
                        right: t.shape(),
                    });
                }
                t
            }
        };
        self.precision.round_slice(value.data_mut());
        self.insert(name, value, trainable)
    }

    fn insert(&mut self, name: String, value: Tensor, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(&name) {
            return Err(NumError::DuplicateParameter(name));
        }
        let id = ParamId(self.params.len());
        let moments = trainable.then(|| Moments {
            first: vec![0.0; value.len()],
            second: vec![0.0; value.len()],
        });
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            trainable,
        });
        self.moments.push(moments);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| NumError::UnknownParameter(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, mut value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(NumError::Shape {
                op: "set_value",
                left: p.value.shape(),
                right: value.shape(),
            });
        }
        self.precision.round_slice(value.data_mut());
        p.value = value;
        Ok(())
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|id| &self.params[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn moments(&self, id: ParamId) -> Option<&Moments> {
        self.moments[id.0].as_ref()
    }

    /// Number of optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let p = &mut self.params[id.0];
        p.trainable = trainable;
        if trainable && self.moments[id.0].is_none() {
            let n = p.value.len();
            self.moments[id.0] = Some(Moments {
                first: vec![0.0; n],
                second: vec![0.0; n],
            });
        } else if !trainable {
            self.moments[id.0] = None;
        }
    }

    pub fn freeze_all(&mut self) {
        for i in 0..self.params.len() {
            self.set_trainable(ParamId(i), false);
        }
    }

    /// Adds `grad` into the gradient buffer of `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != grad.shape() {
            return Err(NumError::Shape {
                op: "accumulate_grad",
                left: p.value.shape(),
                right: grad.shape(),
            });
        }
        match &mut p.grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(grad.data()) {
                    *a += b;
                }
            }
            None => p.grad = Some(grad.clone()),
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub(crate) fn split_mut(&mut self, id: ParamId) -> (&mut Parameter, Option<&mut Moments>) {
        (&mut self.params[id.0], self.moments[id.0].as_mut())
    }

    pub(crate) fn from_checkpoint_parts(
        params: Vec<Parameter>,
        moments: Vec<Option<Moments>>,
        step: u64,
        precision: Precision,
    ) -> Result<Self> {
        let mut index = HashMap::with_capacity(params.len());
        for (i, p) in params.iter().enumerate() {
            if index.insert(p.name.clone(), ParamId(i)).is_some() {
                return Err(NumError::DuplicateParameter(p.name.clone()));
            }
            if p.trainable != moments[i].is_some() {
                return Err(NumError::Checkpoint(format!(
                    "optimizer state does not match trainable flag for `{}`",
                    p.name
                )));
            }
        }
        Ok(ParameterStore {
            params,
            index,
            moments,
            step,
            precision,
        })
    }
}

fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::from_parts(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParameterStore::new();
        s.register("w", 2, 2, Init::Zeros, &mut rng).unwrap();
        assert!(matches!(
            s.register("w", 1, 1, Init::Zeros, &mut rng),
            Err(NumError::DuplicateParameter(_))
        ));
    }

    #[test]
    fn moments_track_trainable_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParameterStore::new();
        let w = s.register("w", 2, 3, Init::FanIn(3), &mut rng).unwrap();
        let b = s.register_buffer("running", Tensor::zeros(2, 1)).unwrap();
        assert!(s.moments(w).is_some());
        assert!(s.moments(b).is_none());
        s.set_trainable(w, false);
        assert!(s.moments(w).is_none());
    }

    #[test]
    fn fan_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParameterStore::new();
        let w = s.register("w", 16, 25, Init::FanIn(25), &mut rng).unwrap();
        assert!(s.value(w).data().iter().all(|x| x.abs() <= 0.2));
    }
}
