//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Forward ops (see [`crate::ops`]) push nodes onto the tape in topological
//! order; each node captures the values its backward rule needs. `backward`
//! walks the tape once in reverse and accumulates parameter gradients
//! additively into the [`ParamStore`].

use alloc::borrow::ToOwned;
use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Tensor<T>>>;

struct Node<T: Scalar> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackFn<T>>,
    param: Option<usize>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives no gradient (inputs, masks).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, None)
    }

    /// Leaf bound to parameter `idx` of the store used at `backward` time.
    pub fn param(&mut self, idx: usize, value: Tensor<T>) -> Var {
        self.push_leaf(value, Some(idx))
    }

    /// Bind every parameter in `store` as a leaf, in store order.
    pub fn bind(&mut self, store: &ParamStore<T>) -> BoundParams {
        let vars = (0..store.len())
            .map(|i| self.param(i, store.value(i).clone()))
            .collect();
        BoundParams { vars }
    }

    pub fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, parents: Vec<Var>, backward: BackFn<T>) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            parents: parents.into_iter().map(|v| v.0).collect(),
            backward: Some(backward),
            param: None,
        });
        Var(id)
    }

    fn push_leaf(&mut self, value: Tensor<T>, param: Option<usize>) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            param,
        });
        Var(id)
    }

    /// Reverse sweep from a scalar root; parameter gradients accumulate
    /// additively into `store` (call `store.zero_grads()` between steps).
    pub fn backward(&self, root: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.sweep(root)?;
        for (node, grad) in self.nodes.iter().zip(grads) {
            if let (Some(idx), Some(g)) = (node.param, grad) {
                store.grad_mut(idx).add_assign(&g);
            }
        }
        Ok(())
    }

    /// Gradients of a scalar root with respect to arbitrary leaves.
    pub fn grad_of(&self, root: Var, wrt: &[Var]) -> Result<Vec<Tensor<T>>> {
        let grads = self.sweep(root)?;
        Ok(wrt
            .iter()
            .map(|v| {
                grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()))
            })
            .collect())
    }

    fn sweep(&self, root: Var) -> Result<Vec<Option<Tensor<T>>>> {
        let root_value = &self.nodes[root.0].value;
        if root_value.numel() != 1 {
            return Err(Error::NonScalarRoot {
                numel: root_value.numel(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(root_value.shape(), T::one()));

        for id in (0..=root.0).rev() {
            let Some(grad_out) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if let Some(back) = &node.backward {
                let parent_grads = back(&grad_out);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                    match &mut grads[pid] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
            // Keep leaf grads for grad_of / backward consumers.
            if node.backward.is_none() {
                grads[id] = Some(grad_out);
            }
        }
        Ok(grads)
    }
}

/// Parameter vars created by [`Tape::bind`], in store order.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn get(&self, idx: usize) -> Var {
        self.vars[idx]
    }
}

/// Named trainable tensors with per-parameter gradient accumulators.
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    grads: Vec<Tensor<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::Invalid(alloc::format!(
                "duplicate parameter name {name}"
            )));
        }
        let idx = self.values.len();
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.names.push(name.to_owned());
        self.index.insert(name.to_owned(), idx);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn lookup(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn value(&self, idx: usize) -> &Tensor<T> {
        &self.values[idx]
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.values[idx]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.lookup(name).map(|i| &self.values[i])
    }

    pub fn grad(&self, idx: usize) -> &Tensor<T> {
        &self.grads[idx]
    }

    pub fn grad_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.grads[idx]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(T::zero());
        }
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter())
    }
}

/// Max relative error between analytic gradients and central finite
/// differences (step 1e-5), taken over every coordinate of every parameter.
///
/// Coordinates sitting on a kink (relu, max-pool ties) make finite
/// differences meaningless; they are detected by disagreement between the
/// step and double-step estimates and excluded.
///
/// `f` must rebuild the computation from scratch on the tape it is given,
/// reading parameters through the supplied [`BoundParams`].
pub fn grad_check<F>(store: &mut ParamStore<f64>, mut f: F) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, &BoundParams) -> Result<Var>,
{
    let step = 1e-5;

    // Analytic pass.
    store.zero_grads();
    let mut tape = Tape::new();
    let bound = tape.bind(store);
    let root = f(&mut tape, &bound)?;
    tape.backward(root, store)?;
    let analytic: Vec<Tensor<f64>> = (0..store.len()).map(|i| store.grad(i).clone()).collect();

    let mut eval = |store: &mut ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = tape.bind(store);
        let root = f(&mut tape, &bound)?;
        Ok(tape.val(root).item())
    };

    let mut worst = 0.0f64;
    for p in 0..store.len() {
        for i in 0..store.value(p).numel() {
            let orig = store.value(p).data()[i];
            let mut central = |h: f64| -> Result<f64> {
                store.value_mut(p).data_mut()[i] = orig + h;
                let up = eval(store)?;
                store.value_mut(p).data_mut()[i] = orig - h;
                let down = eval(store)?;
                store.value_mut(p).data_mut()[i] = orig;
                Ok((up - down) / (2.0 * h))
            };
            let numeric = central(step)?;
            let numeric2 = central(2.0 * step)?;
            if (numeric - numeric2).abs() > 1e-6 * numeric.abs().max(1.0) {
                continue;
            }
            let err = (analytic[p].data()[i] - numeric).abs() / numeric.abs().max(1.0);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}
