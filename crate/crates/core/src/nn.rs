//! Named parameter storage and the two parameterised layers every model part
//! is assembled from.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};
use crate::tensor::{Checkpoint, ConvSpec, Element, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Rc<Tensor<T>>,
}

/// Parameters in registration order. That order fixes checkpoint layout and
/// the order in which optimizer updates are applied.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value: Rc::new(value),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    /// Mutable access; clones the buffer only if a live graph still shares it.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Rc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let cur = &self.params[id.0];
        if cur.value.shape() != value.shape() {
            return Err(Error::dim(
                "extent",
                format!(
                    "{}: shape {:?} does not match {:?}",
                    cur.name,
                    value.shape(),
                    cur.value.shape()
                ),
            ));
        }
        self.params[id.0].value = Rc::new(value);
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn var<'g>(&self, graph: &'g Graph<T>, id: ParamId) -> Var<'g, T> {
        graph.param(id.0, &self.params[id.0].value)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: Rc::new(p.value.cast()),
                })
                .collect(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            tensors: self
                .params
                .iter()
                .map(|p| (p.name.clone(), p.value.cast()))
                .collect(),
        }
    }

    /// Loads values by name. The checkpoint must hold exactly this store's
    /// parameters with matching shapes.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.tensors.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                ckpt.tensors.len(),
                self.params.len()
            )));
        }
        for p in &mut self.params {
            let t = ckpt
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: checkpoint shape {:?}, model shape {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = Rc::new(t.cast());
        }
        Ok(())
    }

    /// Overwrites every parameter with `N(0, std)` draws, including the ones
    /// initialised to zero or one. Gradient checks use this so that no path
    /// through the network is trivially inactive.
    pub fn randomize(&mut self, seed: u64, std: f64) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("finite std");
        for p in &mut self.params {
            let shape = p.value.shape().to_vec();
            p.value = Rc::new(Tensor::from_fn(shape, |_| {
                T::from_f64(normal.sample(&mut rng))
            }));
        }
    }
}

/// Truncated normal at +-2 std, by rejection.
pub fn trunc_normal<T: Element, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let z: f64 = normal.sample(rng);
        if z.abs() <= 2.0 {
            break T::from_f64(z * std);
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Truncated normal with std `sqrt(2 / fan_out)`, where
    /// `fan_out = kh * kw * out / groups`.
    HeFanOut,
    Zeros,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: ConvSpec,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = match init {
            Init::HeFanOut => {
                let fan_out = spec.kernel_h * spec.kernel_w * spec.out_channels / spec.groups;
                trunc_normal(&spec.weight_shape(), (2.0 / fan_out as f64).sqrt(), rng)
            }
            Init::Zeros => Tensor::zeros(spec.weight_shape()),
        };
        let weight = store.add(format!("{name}.weight"), w);
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros([spec.out_channels])));
        Conv2d { spec, weight, bias }
    }

    pub fn forward<'g, T: Element>(
        &self,
        graph: &'g Graph<T>,
        store: &ParamStore<T>,
        x: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let w = store.var(graph, self.weight);
        let b = self.bias.map(|b| store.var(graph, b));
        x.conv2d(w, b, &self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels])),
        }
    }

    pub fn forward<'g, T: Element>(
        &self,
        graph: &'g Graph<T>,
        store: &ParamStore<T>,
        x: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        x.layer_norm(store.var(graph, self.gamma), store.var(graph, self.beta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trunc_normal_is_bounded_and_seeded() {
        let mut a = Xoshiro256PlusPlus::seed_from_u64(3);
        let mut b = Xoshiro256PlusPlus::seed_from_u64(3);
        let x: Tensor<f64> = trunc_normal(&[1000], 0.02, &mut a);
        let y: Tensor<f64> = trunc_normal(&[1000], 0.02, &mut b);
        assert_eq!(x, y);
        assert!(x.max_abs() <= 0.04);
        let mean = x.sum() / 1000.0;
        assert!(mean.abs() < 0.003);
    }

    #[test]
    fn checkpoint_round_trip_by_name() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let spec = ConvSpec::new(2, 4, 3, 1, 1, 1).unwrap();
        Conv2d::new(&mut store, "c", spec, Init::HeFanOut, &mut rng);
        LayerNorm::new(&mut store, "n", 4);
        let ckpt = store.to_checkpoint();
        let mut other = store.clone();
        other.randomize(9, 1.0);
        other.load_checkpoint(&ckpt).unwrap();
        assert_eq!(other.to_checkpoint(), ckpt);

        let mut short = ckpt.clone();
        short.tensors.pop();
        assert!(other.load_checkpoint(&short).is_err());
    }
}
