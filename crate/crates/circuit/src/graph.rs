//! Add/multiply circuits, their degree ledger and the polynomial certificate.

use rayon::prelude::*;

use crate::error::{CircuitError, Result};

pub type NodeId = u32;

/// One circuit node. Only the first four kinds are polynomial; `Opaque`
/// exists so that foreign operations can be represented and rejected.
#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Input(u32),
    Const(f64),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Opaque(Box<OpaqueNode>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpaqueNode {
    pub tag: String,
    pub args: Vec<NodeId>,
}

impl Node {
    pub fn kind(&self) -> &str {
        match self {
            Node::Input(_) => "INPUT",
            Node::Const(_) => "CONST",
            Node::Add(..) => "ADD",
            Node::Mul(..) => "MUL",
            Node::Opaque(o) => &o.tag,
        }
    }

    pub fn operands(&self) -> Vec<NodeId> {
        match self {
            Node::Input(_) | Node::Const(_) => vec![],
            Node::Add(a, b) | Node::Mul(a, b) => vec![*a, *b],
            Node::Opaque(o) => o.args.clone(),
        }
    }
}

/// Directed acyclic graph in topological order: every operand id is smaller
/// than the id of the node that uses it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ArithmeticCircuit {
    nodes: Vec<Node>,
    degree: Vec<u64>,
    outputs: Vec<NodeId>,
    num_inputs: usize,
}

fn node_degree(node: &Node, degree: &[u64]) -> u64 {
    match node {
        Node::Input(_) => 1,
        Node::Const(_) => 0,
        Node::Add(a, b) => degree[*a as usize].max(degree[*b as usize]),
        Node::Mul(a, b) => degree[*a as usize].saturating_add(degree[*b as usize]),
        Node::Opaque(o) => o.args.iter().map(|a| degree[*a as usize]).max().unwrap_or(0),
    }
}

impl ArithmeticCircuit {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a node after checking that its operands already exist.
    pub fn push(&mut self, node: Node) -> Result<NodeId> {
        let id = self.nodes.len();
        if id >= NodeId::MAX as usize {
            return Err(CircuitError::Malformed { node: id, msg: "too many nodes".into() });
        }
        if let Some(bad) = node.operands().into_iter().find(|&a| a as usize >= id) {
            return Err(CircuitError::Malformed { node: id, msg: format!("operand {bad} does not precede it") });
        }
        if let Node::Input(i) = node {
            self.num_inputs = self.num_inputs.max(i as usize + 1);
        }
        self.degree.push(node_degree(&node, &self.degree));
        self.nodes.push(node);
        Ok(id as NodeId)
    }

    pub fn input(&mut self, index: u32) -> NodeId {
        self.push(Node::Input(index)).expect("inputs have no operands")
    }

    pub fn constant(&mut self, value: f64) -> NodeId {
        self.push(Node::Const(value)).expect("constants have no operands")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Node::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Node::Mul(a, b))
    }

    pub fn opaque(&mut self, tag: &str, args: &[NodeId]) -> Result<NodeId> {
        self.push(Node::Opaque(Box::new(OpaqueNode { tag: tag.to_string(), args: args.to_vec() })))
    }

    pub fn set_outputs(&mut self, outputs: Vec<NodeId>) -> Result<()> {
        if let Some(&bad) = outputs.iter().find(|&&o| o as usize >= self.nodes.len()) {
            return Err(CircuitError::Malformed { node: bad as usize, msg: "output refers to a missing node".into() });
        }
        self.outputs = outputs;
        Ok(())
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    /// Degree bound of every node.
    pub fn degrees(&self) -> &[u64] {
        &self.degree
    }

    pub fn degree(&self, id: NodeId) -> u64 {
        self.degree[id as usize]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// One more than the largest INPUT index.
    pub fn num_inputs(&self) -> usize {
        self.num_inputs
    }

    /// Evaluate in a single sweep over the nodes.
    pub fn eval(&self, inputs: &[f64]) -> Result<Vec<f64>> {
        if inputs.len() != self.num_inputs {
            return Err(CircuitError::InputCount { expected: self.num_inputs, got: inputs.len() });
        }
        let mut v = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            v.push(match node {
                Node::Input(i) => inputs[*i as usize],
                Node::Const(c) => *c,
                Node::Add(a, b) => v[*a as usize] + v[*b as usize],
                Node::Mul(a, b) => v[*a as usize] * v[*b as usize],
                Node::Opaque(o) => {
                    return Err(CircuitError::Malformed { node: id, msg: format!("cannot evaluate {}", o.tag) });
                }
            });
        }
        Ok(self.outputs.iter().map(|&o| v[o as usize]).collect())
    }

    /// Evaluate several input vectors in parallel.
    pub fn eval_many(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        inputs.par_iter().map(|x| self.eval(x)).collect()
    }
}

/// Result of [`verify_polynomial`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Certificate {
    pub ok: bool,
    pub node_count: usize,
    /// Largest degree bound over the outputs.
    pub max_degree: u64,
    /// Longest chain of multiplications whose operands both depend on the
    /// inputs, over the outputs. Multiplying by a constant is free.
    pub mul_depth: u64,
    /// Nodes of a forbidden kind or out of topological order.
    pub offending: Vec<usize>,
}

/// Scan every node: only INPUT, CONST, ADD and MUL may occur, and operands
/// must precede their users. Degrees and depths are recomputed from scratch.
pub fn verify_polynomial(c: &ArithmeticCircuit) -> Certificate {
    let n = c.nodes.len();
    let mut degree = vec![0u64; n];
    let mut depth = vec![0u64; n];
    let mut offending = Vec::new();
    for (id, node) in c.nodes.iter().enumerate() {
        let ops = node.operands();
        if ops.iter().any(|&a| a as usize >= id) {
            offending.push(id);
            continue;
        }
        let (d, m) = match node {
            Node::Input(_) => (1, 0),
            Node::Const(_) => (0, 0),
            Node::Add(a, b) => {
                let (a, b) = (*a as usize, *b as usize);
                (degree[a].max(degree[b]), depth[a].max(depth[b]))
            }
            Node::Mul(a, b) => {
                let (a, b) = (*a as usize, *b as usize);
                let both = degree[a] > 0 && degree[b] > 0;
                (degree[a].saturating_add(degree[b]), depth[a].max(depth[b]) + both as u64)
            }
            Node::Opaque(_) => {
                offending.push(id);
                (ops.iter().map(|&a| degree[a as usize]).max().unwrap_or(0), ops.iter().map(|&a| depth[a as usize]).max().unwrap_or(0))
            }
        };
        degree[id] = d;
        depth[id] = m;
    }
    let outs = c.outputs.iter().map(|&o| o as usize);
    Certificate {
        ok: offending.is_empty() && !c.outputs.is_empty(),
        node_count: n,
        max_degree: outs.clone().map(|o| degree[o]).max().unwrap_or(0),
        mul_depth: outs.map(|o| depth[o]).max().unwrap_or(0),
        offending,
    }
}
