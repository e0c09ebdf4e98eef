//! Static computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in topological order: an op node may only consume
//! nodes that already exist, so the node id order is a valid evaluation
//! order and its reverse a valid backward order. The graph is built once per
//! architecture and then re-run with new input bindings every step.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub type NodeId = usize;

pub type Bindings<T = f32> = HashMap<String, Tensor<T>>;

/// A differentiable operation.
pub trait Op<T: Scalar>: fmt::Debug + Send + Sync {
    fn kind(&self) -> &'static str;

    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>>;

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;

    /// Vector-Jacobian product. `needs[i]` says whether the gradient of input
    /// `i` is wanted; entries for unwanted inputs may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

#[derive(Clone, Debug)]
pub enum NodeKind<T: Scalar> {
    /// Bound per run. `None` dimensions accept any extent.
    Input {
        name: String,
        shape: Vec<Option<usize>>,
    },
    /// Persistent trainable tensor.
    Param { name: String },
    Op {
        op: Arc<dyn Op<T>>,
        inputs: Vec<NodeId>,
    },
}

#[derive(Clone, Debug)]
pub struct Node<T: Scalar> {
    pub id: NodeId,
    pub kind: NodeKind<T>,
    pub value: Option<Tensor<T>>,
    pub grad: Option<Tensor<T>>,
    pub requires_grad: bool,
}

impl<T: Scalar> Node<T> {
    pub fn kind_name(&self) -> &'static str {
        match &self.kind {
            NodeKind::Input { .. } => "input",
            NodeKind::Param { .. } => "param",
            NodeKind::Op { op, .. } => op.kind(),
        }
    }

    pub fn inputs(&self) -> &[NodeId] {
        match &self.kind {
            NodeKind::Op { inputs, .. } => inputs,
            _ => &[],
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    inputs: BTreeMap<String, NodeId>,
    params: Vec<NodeId>,
    param_index: HashMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
    names: HashMap<NodeId, String>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            inputs: BTreeMap::new(),
            params: Vec::new(),
            param_index: HashMap::new(),
            outputs: BTreeMap::new(),
            names: HashMap::new(),
        }
    }

    pub fn input(&mut self, name: &str, shape: Vec<Option<usize>>, requires_grad: bool) -> Result<NodeId> {
        if self.inputs.contains_key(name) {
            return Err(Error::graph(format!("duplicate input '{name}'")));
        }
        let id = self.push(
            NodeKind::Input {
                name: name.to_string(),
                shape,
            },
            None,
            requires_grad,
        );
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<NodeId> {
        if self.param_index.contains_key(name) {
            return Err(Error::graph(format!("duplicate parameter '{name}'")));
        }
        let id = self.push(
            NodeKind::Param {
                name: name.to_string(),
            },
            Some(value),
            true,
        );
        self.params.push(id);
        self.param_index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn apply(&mut self, op: impl Op<T> + 'static, inputs: &[NodeId]) -> Result<NodeId> {
        self.apply_arc(Arc::new(op), inputs)
    }

    pub fn apply_arc(&mut self, op: Arc<dyn Op<T>>, inputs: &[NodeId]) -> Result<NodeId> {
        if let Some(&bad) = inputs.iter().find(|&&i| i >= self.nodes.len()) {
            return Err(Error::graph(format!(
                "{} consumes node {bad} which does not exist yet",
                op.kind()
            )));
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(
            NodeKind::Op {
                op,
                inputs: inputs.to_vec(),
            },
            None,
            requires_grad,
        ))
    }

    /// Attach a human-readable label used in shape tables.
    pub fn label(&mut self, id: NodeId, name: impl Into<String>) {
        self.names.insert(id, name.into());
    }

    pub fn label_of(&self, id: NodeId) -> Option<&str> {
        self.names.get(&id).map(String::as_str)
    }

    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.to_string(), id);
    }

    fn push(&mut self, kind: NodeKind<T>, value: Option<Tensor<T>>, requires_grad: bool) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            id,
            kind,
            value,
            grad: None,
            requires_grad,
        });
        id
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn outputs(&self) -> &BTreeMap<String, NodeId> {
        &self.outputs
    }

    pub fn input_ids(&self) -> &BTreeMap<String, NodeId> {
        &self.inputs
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id].value.as_ref()
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id].grad.as_ref()
    }

    /// Parameters in creation order.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(move |&id| match &self.nodes[id].kind {
            NodeKind::Param { name } => (
                name.as_str(),
                self.nodes[id].value.as_ref().expect("parameter without value"),
            ),
            _ => unreachable!(),
        })
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        let ids: std::collections::HashSet<NodeId> = self.params.iter().copied().collect();
        self.nodes
            .iter_mut()
            .filter(move |n| ids.contains(&n.id))
            .map(|n| match &n.kind {
                NodeKind::Param { name } => (
                    name.as_str(),
                    n.value.as_mut().expect("parameter without value"),
                ),
                _ => unreachable!(),
            })
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params().map(|(n, _)| n.to_string()).collect()
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.param_index.get(name).copied()
    }

    pub fn param_value(&self, name: &str) -> Option<&Tensor<T>> {
        self.param_id(name).and_then(|id| self.nodes[id].value.as_ref())
    }

    pub fn param_data_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let id = self.param_id(name)?;
        self.nodes[id].value.as_mut().map(|v| v.data_mut())
    }

    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .param_id(name)
            .ok_or_else(|| Error::graph(format!("unknown parameter '{name}'")))?;
        let slot = self.nodes[id].value.as_mut().expect("parameter without value");
        if slot.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter '{name}': expected {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn num_param_elements(&self) -> usize {
        self.params().map(|(_, t)| t.numel()).sum()
    }

    /// Marks every ancestor of `targets` (inclusive).
    fn ancestors(&self, targets: &[NodeId]) -> Vec<bool> {
        let mut needed = vec![false; self.nodes.len()];
        for &t in targets {
            needed[t] = true;
        }
        for id in (0..self.nodes.len()).rev() {
            if needed[id] {
                for &i in self.nodes[id].inputs() {
                    needed[i] = true;
                }
            }
        }
        needed
    }

    /// Evaluate every graph output.
    pub fn forward(&mut self, bindings: &Bindings<T>) -> Result<BTreeMap<String, Tensor<T>>> {
        let targets: Vec<NodeId> = self.outputs.values().copied().collect();
        self.run(bindings, &targets)?;
        Ok(self
            .outputs
            .iter()
            .map(|(name, &id)| (name.clone(), self.nodes[id].value.clone().expect("evaluated output")))
            .collect())
    }

    /// Evaluate the ancestors of `targets`, in node order. Inputs outside that
    /// closure need not be bound.
    pub fn run(&mut self, bindings: &Bindings<T>, targets: &[NodeId]) -> Result<()> {
        let needed = self.ancestors(targets);
        for node in &mut self.nodes {
            node.grad = None;
            if !matches!(node.kind, NodeKind::Param { .. }) {
                node.value = None;
            }
        }
        for id in 0..self.nodes.len() {
            if !needed[id] {
                continue;
            }
            let value = match &self.nodes[id].kind {
                NodeKind::Param { .. } => continue,
                NodeKind::Input { name, shape } => {
                    let bound = bindings
                        .get(name)
                        .ok_or_else(|| Error::graph(format!("input '{name}' is not bound")))?;
                    check_declared(name, shape, bound.shape())?;
                    bound.clone()
                }
                NodeKind::Op { op, inputs } => {
                    let args = inputs
                        .iter()
                        .map(|&i| {
                            self.nodes[i].value.as_ref().ok_or_else(|| {
                                Error::graph(format!("node {i} read before it was evaluated"))
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    op.forward(&args)
                        .map_err(|e| Error::graph(format!("node {id} ({}): {e}", op.kind())))?
                }
            };
            self.nodes[id].value = Some(value);
        }
        Ok(())
    }

    /// Reverse pass from a scalar `loss`. Returns the gradient of every named
    /// leaf that requires one (parameters and grad-enabled inputs); leaves the
    /// loss does not depend on get zeros.
    pub fn backward(&mut self, loss: NodeId) -> Result<BTreeMap<String, Tensor<T>>> {
        let loss_value = self.nodes[loss]
            .value
            .as_ref()
            .ok_or_else(|| Error::graph("backward called before forward"))?;
        if !loss_value.is_scalar() {
            return Err(Error::graph(format!(
                "loss must be scalar, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::ones(loss_value.shape().to_vec()));

        for id in (0..=loss).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            if let NodeKind::Op { op, inputs } = &self.nodes[id].kind {
                let needs: Vec<bool> = inputs.iter().map(|&i| self.nodes[i].requires_grad).collect();
                if needs.iter().any(|&n| n) {
                    let args: Vec<&Tensor<T>> = inputs
                        .iter()
                        .map(|&i| self.nodes[i].value.as_ref().expect("forward value"))
                        .collect();
                    let output = self.nodes[id].value.as_ref().expect("forward value");
                    let input_grads = op
                        .backward(&args, output, &grad, &needs)
                        .map_err(|e| Error::graph(format!("backward of node {id} ({}): {e}", op.kind())))?;
                    for ((&input, g), need) in inputs.iter().zip(input_grads).zip(&needs) {
                        let (true, Some(g)) = (*need, g) else {
                            continue;
                        };
                        match &mut grads[input] {
                            Some(acc) => acc.add_assign(&g)?,
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
            }
            self.nodes[id].grad = Some(grad);
        }

        let mut out = BTreeMap::new();
        for node in &self.nodes {
            let name = match &node.kind {
                NodeKind::Param { name } => name,
                NodeKind::Input { name, .. } if node.requires_grad => name,
                _ => continue,
            };
            let grad = match &node.grad {
                Some(g) => g.clone(),
                None => {
                    let shape = node
                        .value
                        .as_ref()
                        .map(|v| v.shape().to_vec())
                        .ok_or_else(|| Error::graph(format!("input '{name}' was not evaluated")))?;
                    Tensor::zeros(shape)
                }
            };
            out.insert(name.clone(), grad);
        }
        Ok(out)
    }

    /// Static shape propagation. Nodes whose inputs are unbound get `None`.
    pub fn infer_shapes(&self, input_shapes: &BTreeMap<String, Vec<usize>>) -> Result<Vec<Option<Vec<usize>>>> {
        let mut shapes: Vec<Option<Vec<usize>>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let shape = match &node.kind {
                NodeKind::Param { .. } => node.value.as_ref().map(|v| v.shape().to_vec()),
                NodeKind::Input { name, shape } => match input_shapes.get(name) {
                    Some(s) => {
                        check_declared(name, shape, s)?;
                        Some(s.clone())
                    }
                    None => None,
                },
                NodeKind::Op { op, inputs } => {
                    let args: Option<Vec<&[usize]>> =
                        inputs.iter().map(|&i| shapes[i].as_deref()).collect();
                    match args {
                        Some(args) => Some(
                            op.output_shape(&args)
                                .map_err(|e| Error::shape(format!("node {} ({}): {e}", node.id, op.kind())))?,
                        ),
                        None => None,
                    }
                }
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }
}

fn check_declared(name: &str, declared: &[Option<usize>], actual: &[usize]) -> Result<()> {
    let ok = declared.len() == actual.len()
        && declared
            .iter()
            .zip(actual)
            .all(|(d, &a)| d.is_none_or(|d| d == a));
    if ok {
        Ok(())
    } else {
        let decl: Vec<String> = declared
            .iter()
            .map(|d| d.map_or("*".to_string(), |v| v.to_string()))
            .collect();
        Err(Error::shape(format!(
            "input '{name}' declared [{}], bound {actual:?}",
            decl.join(", ")
        )))
    }
}
