//! Dense N-dimensional tensors with reverse-mode automatic differentiation.
//!
//! Define-by-run: every differentiable operation pushes one node onto a
//! [`Tape`]; the tape is rebuilt per forward pass and freed with it. Scalars
//! are `f64` throughout — gradient checks are the backbone of the test suite
//! and are meaningless at single precision.

mod conv;
mod ops;

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::error::{CoreError, Result};

/// Backward rule: maps the gradient w.r.t. the node's output to gradients
/// w.r.t. each tracked input, in the order recorded in `Node::inputs`.
type BackFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

struct Node {
    inputs: Vec<usize>,
    len: usize,
    back: Option<BackFn>,
}

/// Topologically ordered record of one forward pass.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<Vec<Node>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { inner: Rc::new(RefCell::new(Vec::new())) }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, inputs: Vec<usize>, len: usize, back: Option<BackFn>) -> usize {
        let mut nodes = self.inner.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { inputs, len, back });
        id
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Create a tracked leaf (gradient is retained after `backward`).
    pub fn leaf(&self, data: Vec<f64>, shape: &[usize]) -> Tensor {
        assert_eq!(
            data.len(),
            numel(shape),
            "leaf data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        let id = self.push(Vec::new(), data.len(), None);
        Tensor { data: Rc::new(data), shape: shape.to_vec(), node: Some((self.clone(), id)) }
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// N-dimensional row-major array, optionally attached to a tape node.
#[derive(Clone)]
pub struct Tensor {
    data: Rc<Vec<f64>>,
    shape: Vec<usize>,
    node: Option<(Tape, usize)>,
}

impl core::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("tracked", &self.node.is_some())
            .finish()
    }
}

impl Tensor {
    /// Untracked tensor (constant w.r.t. differentiation).
    pub fn constant(data: Vec<f64>, shape: &[usize]) -> Tensor {
        assert_eq!(
            data.len(),
            numel(shape),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { data: Rc::new(data), shape: shape.to_vec(), node: None }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(vec![v], &[1])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::constant(vec![0.0; numel(shape)], shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of {} elements", self.data.len());
        self.data[0]
    }

    pub(crate) fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|(_, id)| *id)
    }

    /// Tape shared by the given operands, if any operand is tracked.
    /// Panics if two operands belong to different tapes.
    pub(crate) fn join_tape(operands: &[&Tensor]) -> Option<Tape> {
        let mut found: Option<Tape> = None;
        for t in operands {
            if let Some((tape, _)) = &t.node {
                match &found {
                    None => found = Some(tape.clone()),
                    Some(prev) => assert!(prev.same_tape(tape), "operands from different tapes"),
                }
            }
        }
        found
    }

    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        tape: Option<Tape>,
        inputs: Vec<usize>,
        back: BackFn,
    ) -> Tensor {
        Tensor::from_op_shared(Rc::new(data), shape, tape, inputs, back)
    }

    pub(crate) fn from_op_shared(
        data: Rc<Vec<f64>>,
        shape: Vec<usize>,
        tape: Option<Tape>,
        inputs: Vec<usize>,
        back: BackFn,
    ) -> Tensor {
        debug_assert_eq!(data.len(), numel(&shape));
        let node = tape.map(|tape| {
            let id = tape.push(inputs, data.len(), Some(back));
            (tape, id)
        });
        Tensor { data, shape, node }
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self) -> Result<Gradients> {
        if self.data.len() != 1 {
            return Err(CoreError::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape
            )));
        }
        let (tape, root) = self.node.as_ref().ok_or_else(|| {
            CoreError::InvalidArgument("backward on an untracked tensor".into())
        })?;
        let nodes = tape.inner.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[*root] = Some(vec![1.0]);
        for i in (0..=*root).rev() {
            if grads[i].is_none() {
                continue;
            }
            let node = &nodes[i];
            let Some(back) = &node.back else { continue }; // leaf: retain gradient
            let g = grads[i].take().expect("checked above");
            let input_grads = back(&g);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&inp, ig) in node.inputs.iter().zip(input_grads) {
                debug_assert_eq!(ig.len(), nodes[inp].len);
                match &mut grads[inp] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&ig) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Result of a backward sweep: gradients for the tape's leaves.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. the given tracked tensor, if it was
    /// reached by the sweep.
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        let id = t.node_id()?;
        self.grads.get(id)?.as_deref()
    }
}

/// Named learnable tensor.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

/// Handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Flat store of model parameters; names are unique paths like
/// `stage3.dst.level1.block0.smsa.q_proj.weight`.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], value: Vec<f64>) -> ParamId {
        assert_eq!(value.len(), numel(shape), "parameter {name}: value/shape mismatch");
        assert!(!self.index.contains_key(name), "duplicate parameter name {name}");
        let id = self.params.len();
        self.index.insert(String::from(name), id);
        self.params.push(Parameter { name: String::from(name), shape: shape.to_vec(), value });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// One forward pass: a fresh tape plus lazily bound parameter leaves.
pub struct Ctx<'a> {
    pub tape: Tape,
    params: &'a ParamSet,
    bound: RefCell<Vec<Option<Tensor>>>,
}

impl<'a> Ctx<'a> {
    pub fn new(params: &'a ParamSet) -> Self {
        Ctx {
            tape: Tape::new(),
            params,
            bound: RefCell::new(vec![None; params.len()]),
        }
    }

    /// Tensor view of a parameter, bound to this pass's tape on first use.
    pub fn p(&self, id: ParamId) -> Tensor {
        let mut bound = self.bound.borrow_mut();
        if bound[id.0].is_none() {
            let p = self.params.get(id);
            bound[id.0] = Some(self.tape.leaf(p.value.clone(), &p.shape));
        }
        bound[id.0].clone().expect("just bound")
    }

    pub fn params(&self) -> &ParamSet {
        self.params
    }

    /// Per-parameter gradients, aligned with the param set. Parameters the
    /// loss does not depend on get exact zeros.
    pub fn collect_grads(&self, g: &Gradients) -> Vec<Vec<f64>> {
        let bound = self.bound.borrow();
        (0..self.params.len())
            .map(|i| {
                let n = self.params.get(ParamId(i)).value.len();
                match &bound[i] {
                    Some(t) => g.get(t).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; n]),
                    None => vec![0.0; n],
                }
            })
            .collect()
    }
}
