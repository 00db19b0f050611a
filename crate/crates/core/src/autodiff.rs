//! Tape-based reverse-mode differentiation over the kernels in
//! [`crate::kernels`].
//!
//! A [`Graph`] records a feed-forward network as an append-only list of
//! nodes in topological order. [`Graph::forward`] evaluates every node and
//! caches its output (plus max-pool argmax routing). [`Graph::backward`]
//! then sweeps from a seeded node back to any ancestor, returning the
//! gradient of the seeded scalar with respect to that ancestor's output.
//!
//! [`Graph::backward_guided`] runs the same sweep down to the input but
//! swaps every ReLU backward for the guided rule: a gradient survives only
//! where both the forward input and the incoming gradient are positive.
//!
//! ```
//! use std::sync::Arc;
//! use saliency::{Graph, GradientSeed, Op, Tensor};
//!
//! # fn main() -> saliency::Result<()> {
//! let weight = Tensor::new(vec![1, 3], vec![2.0, -1.0, 0.5])?;
//! let bias = Tensor::zeros(&[1])?;
//! let mut graph = Graph::<f64>::new(&[3])?;
//! let fc = graph.push("fc", Op::Dense { weight: Arc::new(weight), bias: Arc::new(bias) })?;
//!
//! let x = Tensor::new(vec![1, 3], vec![1.0, 1.0, 1.0])?;
//! let scores = graph.forward(&x)?;
//! assert_eq!(scores.data(), [1.5]);
//!
//! let grad = graph.backward(&GradientSeed::one_hot(fc, 0), Graph::<f64>::INPUT)?;
//! assert_eq!(grad.data(), [2.0, -1.0, 0.5]);
//! # Ok(())
//! # }
//! ```

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, Conv2dParams, Pool2dParams};
use crate::tensor::{Scalar, Tensor};

pub type NodeId = usize;

/// Operation recorded at a node. Parameters are shared, so cloning or
/// forking a graph never copies weights.
#[derive(Clone, Debug)]
pub enum Op<T> {
    Input,
    Conv2d {
        weight: Arc<Tensor<T>>,
        bias: Arc<Tensor<T>>,
        params: Conv2dParams,
    },
    Relu,
    MaxPool2d(Pool2dParams),
    GlobalAvgPool,
    Flatten,
    Dense {
        weight: Arc<Tensor<T>>,
        bias: Arc<Tensor<T>>,
    },
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    Conv2d,
    Relu,
    MaxPool2d,
    GlobalAvgPool,
    Flatten,
    Dense,
    Softmax,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Conv2d => "conv2d",
            OpKind::Relu => "relu",
            OpKind::MaxPool2d => "maxpool2d",
            OpKind::GlobalAvgPool => "gap",
            OpKind::Flatten => "flatten",
            OpKind::Dense => "dense",
            OpKind::Softmax => "softmax",
        }
    }
}

impl<T> Op<T> {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu => OpKind::Relu,
            Op::MaxPool2d(_) => OpKind::MaxPool2d,
            Op::GlobalAvgPool => OpKind::GlobalAvgPool,
            Op::Flatten => OpKind::Flatten,
            Op::Dense { .. } => OpKind::Dense,
            Op::Softmax => OpKind::Softmax,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node<T> {
    name: String,
    op: Op<T>,
    input: Option<NodeId>,
    /// Per-sample output shape (no batch dimension).
    shape: Vec<usize>,
    output: Option<Tensor<T>>,
    argmax: Option<Vec<usize>>,
}

impl<T> Node<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn op(&self) -> &Op<T> {
        &self.op
    }

    pub fn input(&self) -> Option<NodeId> {
        self.input
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn output(&self) -> Option<&Tensor<T>> {
        self.output.as_ref()
    }
}

/// Which scalar to differentiate: element `index` (flat, including the batch
/// dimension) of node `node`'s output, seeded with `value`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientSeed<T> {
    pub node: NodeId,
    pub index: usize,
    pub value: T,
}

impl<T: Scalar> GradientSeed<T> {
    /// The usual seed: one at `index`, zero elsewhere.
    pub fn one_hot(node: NodeId, index: usize) -> Self {
        GradientSeed {
            node,
            index,
            value: T::one(),
        }
    }

    pub fn scaled(self, a: T) -> Self {
        GradientSeed {
            value: self.value * a,
            ..self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ReluRule {
    Standard,
    Guided,
}

/// A recorded feed-forward computation.
#[derive(Clone, Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    names: HashMap<String, NodeId>,
    batch: Option<usize>,
}

impl<T: Scalar> Graph<T> {
    /// Id of the input placeholder every graph starts with.
    pub const INPUT: NodeId = 0;

    /// Starts a graph whose input samples have shape `input_shape`
    /// (e.g. `[C, H, W]`; the batch dimension is implicit).
    pub fn new(input_shape: &[usize]) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::InvalidShape {
                shape: input_shape.to_vec(),
                reason: "input extents must be positive".into(),
            });
        }
        let input = Node {
            name: "input".to_string(),
            op: Op::Input,
            input: None,
            shape: input_shape.to_vec(),
            output: None,
            argmax: None,
        };
        Ok(Graph {
            nodes: vec![input],
            names: HashMap::from([("input".to_string(), 0)]),
            batch: None,
        })
    }

    /// Appends a node fed by the most recently added node.
    pub fn push(&mut self, name: impl Into<String>, op: Op<T>) -> Result<NodeId> {
        let last = self.nodes.len() - 1;
        self.push_from(last, name, op)
    }

    /// Appends a node fed by `input`.
    pub fn push_from(&mut self, input: NodeId, name: impl Into<String>, op: Op<T>) -> Result<NodeId> {
        let name = name.into();
        if self.names.contains_key(&name) {
            return Err(Error::Layer {
                layer: name,
                reason: "duplicate layer name".into(),
            });
        }
        let src = self.nodes.get(input).ok_or_else(|| Error::Layer {
            layer: name.clone(),
            reason: format!("input node {input} does not exist"),
        })?;
        if matches!(op, Op::Input) {
            return Err(Error::Layer {
                layer: name,
                reason: "a graph has exactly one input node".into(),
            });
        }
        let shape = infer_shape(&op, &src.shape).map_err(|reason| Error::ShapeChain {
            layer: name.clone(),
            reason,
        })?;
        let id = self.nodes.len();
        self.nodes.push(Node {
            name: name.clone(),
            op,
            input: Some(input),
            shape,
            output: None,
            argmax: None,
        });
        self.names.insert(name, id);
        self.batch = None;
        Ok(id)
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Option<&Node<T>> {
        self.nodes.get(id)
    }

    /// Number of nodes excluding the input placeholder.
    pub fn num_layers(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        self.names.get(name).copied()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.nodes[0].shape
    }

    /// Ids of the nodes that read `id`'s output.
    pub fn consumers(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.input == Some(id))
            .map(|(i, _)| i)
            .collect()
    }

    /// The node producing raw class scores: the last node, or its input
    /// when the last node is a softmax.
    pub fn score_node(&self) -> NodeId {
        let last = self.nodes.len() - 1;
        match (&self.nodes[last].op, self.nodes[last].input) {
            (Op::Softmax, Some(src)) => src,
            _ => last,
        }
    }

    /// The trailing softmax node, if the graph ends with one.
    pub fn softmax_node(&self) -> Option<NodeId> {
        let last = self.nodes.len() - 1;
        matches!(self.nodes[last].op, Op::Softmax).then_some(last)
    }

    /// Same structure and parameters, no cached activations.
    pub fn fork(&self) -> Self {
        Graph {
            nodes: self
                .nodes
                .iter()
                .map(|n| Node {
                    output: None,
                    argmax: None,
                    ..n.clone()
                })
                .collect(),
            names: self.names.clone(),
            batch: None,
        }
    }

    /// Evaluates the graph on `input` (shape `[N, ...input_shape]`), caches
    /// every activation and returns the pre-softmax scores.
    pub fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let expected = &self.nodes[0].shape;
        if input.ndim() != expected.len() + 1 || &input.shape()[1..] != expected.as_slice() {
            return Err(Error::Layer {
                layer: "input".into(),
                reason: format!(
                    "expected [N, {}], got {:?}",
                    expected
                        .iter()
                        .map(|d| d.to_string())
                        .collect::<Vec<_>>()
                        .join(", "),
                    input.shape()
                ),
            });
        }
        self.batch = None;
        self.nodes[0].output = Some(input.clone());
        for id in 1..self.nodes.len() {
            let src = self.nodes[id].input.expect("non-input node has an input");
            let x = self.nodes[src].output.as_ref().expect("topological order");
            let (y, argmax) = eval_node(&self.nodes[id].op, x).map_err(|e| Error::Layer {
                layer: self.nodes[id].name.clone(),
                reason: e.to_string(),
            })?;
            self.nodes[id].output = Some(y);
            self.nodes[id].argmax = argmax;
        }
        self.batch = Some(input.shape()[0]);
        Ok(self.nodes[self.score_node()]
            .output
            .clone()
            .expect("forward populated every node"))
    }

    /// Cached output of `id` from the last forward pass.
    pub fn output(&self, id: NodeId) -> Result<&Tensor<T>> {
        if self.batch.is_none() {
            return Err(Error::NotForwarded);
        }
        self.nodes
            .get(id)
            .and_then(|n| n.output.as_ref())
            .ok_or(Error::NotForwarded)
    }

    pub fn scores(&self) -> Result<&Tensor<T>> {
        self.output(self.score_node())
    }

    /// Gradient of the seeded scalar with respect to `target`'s output.
    pub fn backward(&self, seed: &GradientSeed<T>, target: NodeId) -> Result<Tensor<T>> {
        self.sweep(seed, target, ReluRule::Standard)
    }

    /// Guided-backpropagation gradient of the seeded scalar with respect to
    /// the graph input.
    pub fn backward_guided(&self, seed: &GradientSeed<T>) -> Result<Tensor<T>> {
        self.sweep(seed, Self::INPUT, ReluRule::Guided)
    }

    fn sweep(&self, seed: &GradientSeed<T>, target: NodeId, rule: ReluRule) -> Result<Tensor<T>> {
        if self.batch.is_none() {
            return Err(Error::NotForwarded);
        }
        if seed.node >= self.nodes.len() || target >= self.nodes.len() {
            return Err(Error::NotAncestor {
                target,
                seed: seed.node,
            });
        }
        // Every node has a single input, so the only path from target to
        // seed is the input chain.
        let mut path = vec![seed.node];
        let mut cur = seed.node;
        while cur != target {
            match self.nodes[cur].input {
                Some(src) => {
                    path.push(src);
                    cur = src;
                }
                None => {
                    return Err(Error::NotAncestor {
                        target,
                        seed: seed.node,
                    })
                }
            }
        }

        let seed_out = self.output(seed.node)?;
        if seed.index >= seed_out.len() {
            return Err(Error::SeedOutOfRange {
                index: seed.index,
                len: seed_out.len(),
            });
        }
        let mut grad = Tensor::zeros(seed_out.shape())?;
        let mut data = grad.into_data();
        data[seed.index] = seed.value;
        grad = Tensor::from_parts(seed_out.shape().to_vec(), data);

        for &id in &path[..path.len() - 1] {
            grad = self.node_backward(id, &grad, rule)?;
        }
        Ok(grad)
    }

    fn node_backward(&self, id: NodeId, grad: &Tensor<T>, rule: ReluRule) -> Result<Tensor<T>> {
        let node = &self.nodes[id];
        let src = node.input.expect("non-input node");
        let x = self.output(src)?;
        match &node.op {
            Op::Input => unreachable!("input node has no backward"),
            Op::Conv2d { weight, params, .. } => {
                kernels::conv2d_backward_input(grad, weight, x.dims4("conv2d")?, *params)
            }
            Op::Relu => match rule {
                ReluRule::Standard => kernels::relu_backward(grad, x),
                ReluRule::Guided => kernels::relu_backward_guided(grad, x),
            },
            Op::MaxPool2d(_) => {
                let argmax = node.argmax.as_deref().ok_or(Error::NotForwarded)?;
                kernels::maxpool2d_backward(grad, argmax, x.dims4("maxpool2d")?)
            }
            Op::GlobalAvgPool => kernels::global_average_pool_backward(grad, x.dims4("gap")?),
            Op::Flatten => grad.clone().reshape(x.shape().to_vec()),
            Op::Dense { weight, .. } => kernels::dense_backward_input(grad, weight),
            Op::Softmax => kernels::softmax_backward(grad, self.output(id)?),
        }
    }
}

type Eval<T> = (Tensor<T>, Option<Vec<usize>>);

fn eval_node<T: Scalar>(op: &Op<T>, x: &Tensor<T>) -> Result<Eval<T>> {
    Ok(match op {
        Op::Input => (x.clone(), None),
        Op::Conv2d {
            weight,
            bias,
            params,
        } => (kernels::conv2d(x, weight, bias, *params)?, None),
        Op::Relu => (kernels::relu(x), None),
        Op::MaxPool2d(p) => {
            let (y, arg) = kernels::maxpool2d(x, *p)?;
            (y, Some(arg))
        }
        Op::GlobalAvgPool => (kernels::global_average_pool(x)?, None),
        Op::Flatten => {
            let n = x.shape()[0];
            let d = x.len() / n;
            (x.clone().reshape(vec![n, d])?, None)
        }
        Op::Dense { weight, bias } => (kernels::dense(x, weight, bias)?, None),
        Op::Softmax => (kernels::softmax(x)?, None),
    })
}

/// Per-sample output shape of `op` applied to a per-sample `input` shape.
fn infer_shape<T: Scalar>(op: &Op<T>, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
    let spatial = |what: &str| -> std::result::Result<[usize; 4], String> {
        match *input {
            [c, h, w] => Ok([1, c, h, w]),
            _ => Err(format!("{what} needs a [C, H, W] input, got {input:?}")),
        }
    };
    match op {
        Op::Input => Ok(input.to_vec()),
        Op::Conv2d {
            weight,
            bias,
            params,
        } => {
            let x = spatial("conv2d")?;
            let k = weight.dims4("conv2d").map_err(|e| e.to_string())?;
            if bias.shape() != [k[0]] {
                return Err(format!("bias shape {:?}, expected [{}]", bias.shape(), k[0]));
            }
            let [_, k, h, w] = kernels::conv2d_output_shape(x, k, *params).map_err(|e| e.to_string())?;
            Ok(vec![k, h, w])
        }
        Op::Relu => Ok(input.to_vec()),
        Op::MaxPool2d(p) => {
            let x = spatial("maxpool2d")?;
            let [_, c, h, w] = kernels::maxpool2d_output_shape(x, *p).map_err(|e| e.to_string())?;
            Ok(vec![c, h, w])
        }
        Op::GlobalAvgPool => {
            let [_, c, _, _] = spatial("gap")?;
            Ok(vec![c])
        }
        Op::Flatten => Ok(vec![input.iter().product()]),
        Op::Dense { weight, bias } => {
            let [m, d] = weight.dims2("dense").map_err(|e| e.to_string())?;
            if input != [d] {
                return Err(format!("dense expects [{d}] features, got {input:?}"));
            }
            if bias.shape() != [m] {
                return Err(format!("bias shape {:?}, expected [{m}]", bias.shape()));
            }
            Ok(vec![m])
        }
        Op::Softmax => match input {
            [_] => Ok(input.to_vec()),
            _ => Err(format!("softmax needs a flat score vector, got {input:?}")),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arc(shape: &[usize], data: Vec<f64>) -> Arc<Tensor<f64>> {
        Arc::new(Tensor::new(shape.to_vec(), data).unwrap())
    }

    #[test]
    fn dense_identity_scores_equal_input() {
        let mut g = Graph::<f64>::new(&[3]).unwrap();
        let eye = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        g.push(
            "fc",
            Op::Dense {
                weight: arc(&[3, 3], eye),
                bias: arc(&[3], vec![0.0; 3]),
            },
        )
        .unwrap();
        let x = Tensor::new(vec![1, 3], vec![0.5, -2.0, 7.0]).unwrap();
        assert_eq!(g.forward(&x).unwrap(), x);
    }

    #[test]
    fn backward_before_forward_fails() {
        let mut g = Graph::<f64>::new(&[2]).unwrap();
        let fc = g
            .push(
                "fc",
                Op::Dense {
                    weight: arc(&[1, 2], vec![1.0, 1.0]),
                    bias: arc(&[1], vec![0.0]),
                },
            )
            .unwrap();
        assert!(matches!(
            g.backward(&GradientSeed::one_hot(fc, 0), 0),
            Err(Error::NotForwarded)
        ));
    }

    #[test]
    fn target_must_be_ancestor() {
        let mut g = Graph::<f64>::new(&[2]).unwrap();
        let a = g.push("a", Op::Relu).unwrap();
        let b = g.push_from(0, "b", Op::Relu).unwrap();
        g.forward(&Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        assert!(matches!(
            g.backward(&GradientSeed::one_hot(b, 0), a),
            Err(Error::NotAncestor { .. })
        ));
        assert!(g.backward(&GradientSeed::one_hot(b, 0), 0).is_ok());
    }

    #[test]
    fn push_rejects_broken_chain() {
        let mut g = Graph::<f64>::new(&[3, 4, 4]).unwrap();
        let err = g
            .push(
                "fc",
                Op::Dense {
                    weight: arc(&[2, 48], vec![0.0; 96]),
                    bias: arc(&[2], vec![0.0; 2]),
                },
            )
            .unwrap_err();
        assert!(matches!(err, Error::ShapeChain { ref layer, .. } if layer == "fc"));
        g.push("flat", Op::Flatten).unwrap();
        g.push(
            "fc",
            Op::Dense {
                weight: arc(&[2, 48], vec![0.0; 96]),
                bias: arc(&[2], vec![0.0; 2]),
            },
        )
        .unwrap();
        assert!(g.push("fc", Op::Relu).is_err());
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let mut g = Graph::<f64>::new(&[1, 2, 2]).unwrap();
        g.push("relu", Op::Relu).unwrap();
        let err = g.forward(&Tensor::zeros(&[1, 1, 3, 3]).unwrap()).unwrap_err();
        assert!(err.to_string().contains("input"));
    }

    #[test]
    fn softmax_tail_keeps_score_node() {
        let mut g = Graph::<f64>::new(&[2]).unwrap();
        let fc = g
            .push(
                "fc",
                Op::Dense {
                    weight: arc(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]),
                    bias: arc(&[2], vec![0.0; 2]),
                },
            )
            .unwrap();
        let sm = g.push("softmax", Op::Softmax).unwrap();
        assert_eq!(g.score_node(), fc);
        assert_eq!(g.softmax_node(), Some(sm));
        let scores = g.forward(&Tensor::new(vec![1, 2], vec![3.0, 1.0]).unwrap()).unwrap();
        assert_eq!(scores.data(), [3.0, 1.0]);
        let p = g.output(sm).unwrap();
        assert!((p.data()[0] + p.data()[1] - 1.0).abs() < 1e-12);
    }
}
