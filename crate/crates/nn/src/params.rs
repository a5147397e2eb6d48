//! Named parameter storage. Trainable values and running statistics are kept
//! as 32-bit floats; they are widened to 64 bits when bound to a graph.

use crate::error::{shape_err, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl Param {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&self.shape, self.values.iter().map(|&v| v as f64).collect())
            .expect("param shape is consistent")
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    buffers: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f32>) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), values.len(), "param shape");
        self.params.push(Param {
            name: name.into(),
            shape: shape.to_vec(),
            values,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f32>) -> BufferId {
        assert_eq!(shape.iter().product::<usize>(), values.len(), "buffer shape");
        self.buffers.push(Param {
            name: name.into(),
            shape: shape.to_vec(),
            values,
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn buffers(&self) -> &[Param] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Param] {
        &mut self.buffers
    }

    pub fn buffer(&self, id: BufferId) -> &Param {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Param {
        &mut self.buffers[id.0]
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    /// Overwrites a parameter or buffer by name, checking the shape.
    pub fn set_by_name(&mut self, name: &str, shape: &[usize], values: Vec<f32>) -> Result<bool> {
        for p in self.params.iter_mut().chain(self.buffers.iter_mut()) {
            if p.name == name {
                if p.shape != shape || values.len() != p.values.len() {
                    return Err(shape_err("set_by_name", format!("{name} {:?}", p.shape), shape));
                }
                p.values = values;
                return Ok(true);
            }
        }
        Ok(false)
    }

    /// Places every parameter on `g` as a leaf.
    pub fn bind<'a>(&'a self, g: &mut Graph, requires_grad: bool) -> Bound<'a> {
        let vars = self
            .params
            .iter()
            .map(|p| g.leaf(p.to_tensor(), requires_grad))
            .collect();
        Bound { vars, store: self }
    }
}

/// Parameters of a [`ParamStore`] placed on a particular graph.
pub struct Bound<'a> {
    vars: Vec<Var>,
    store: &'a ParamStore,
}

impl<'a> Bound<'a> {
    /// Uses caller-provided vars (one per parameter, in store order).
    pub fn from_vars(vars: Vec<Var>, store: &'a ParamStore) -> Result<Self> {
        if vars.len() != store.params.len() {
            return Err(shape_err("bind", format!("{} vars", store.params.len()), &[vars.len()]));
        }
        Ok(Self { vars, store })
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Gradient for every parameter in store order (zeros where none flowed).
    pub fn collect_grads(&self, grads: &mut Gradients) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .zip(&self.store.params)
            .map(|(v, p)| grads.take(*v).unwrap_or_else(|| vec![0.0; p.len()]))
            .collect()
    }
}
