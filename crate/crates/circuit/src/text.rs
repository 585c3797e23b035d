//! Line-oriented circuit file format.
//!
//! ```text
//! 0 INPUT 0
//! 1 CONST 1.0000000000000001e-1
//! 2 MUL 1 0
//! OUTPUTS 2
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{CircuitError, Result};
use crate::graph::{ArithmeticCircuit, Node, NodeId};

pub fn write_to<W: Write>(c: &ArithmeticCircuit, out: W) -> Result<()> {
    let mut out = BufWriter::new(out);
    for (id, node) in c.nodes().iter().enumerate() {
        match node {
            Node::Input(i) => writeln!(out, "{id} INPUT {i}")?,
            Node::Const(v) => writeln!(out, "{id} CONST {v:.16e}")?,
            Node::Add(a, b) => writeln!(out, "{id} ADD {a} {b}")?,
            Node::Mul(a, b) => writeln!(out, "{id} MUL {a} {b}")?,
            Node::Opaque(o) => {
                return Err(CircuitError::Malformed { node: id, msg: format!("{} has no text form", o.tag) });
            }
        }
    }
    write!(out, "OUTPUTS")?;
    for o in c.outputs() {
        write!(out, " {o}")?;
    }
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

pub fn write_circuit(c: &ArithmeticCircuit, path: impl AsRef<Path>) -> Result<()> {
    write_to(c, File::create(path)?)
}

fn parse<T: std::str::FromStr>(tok: Option<&str>, what: &str, line: usize) -> Result<T> {
    let tok = tok.ok_or_else(|| CircuitError::Parse { line, msg: format!("missing {what}") })?;
    tok.parse().map_err(|_| CircuitError::Parse { line, msg: format!("bad {what} {tok:?}") })
}

pub fn read_from<R: BufRead>(input: R) -> Result<ArithmeticCircuit> {
    let mut c = ArithmeticCircuit::new();
    let mut outputs: Option<Vec<NodeId>> = None;
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let err = |msg: String| CircuitError::Parse { line: line_no, msg };
        if outputs.is_some() {
            if line.trim().is_empty() {
                continue;
            }
            return Err(err("content after OUTPUTS".into()));
        }
        let mut toks = line.split_whitespace();
        let first = toks.next().ok_or_else(|| err("empty line".into()))?;
        if first == "OUTPUTS" {
            let ids = toks.map(|t| parse::<NodeId>(Some(t), "output id", line_no)).collect::<Result<Vec<_>>>()?;
            if ids.is_empty() {
                return Err(err("circuit has no outputs".into()));
            }
            if let Some(bad) = ids.iter().find(|&&o| o as usize >= c.len()) {
                return Err(err(format!("output {bad} refers to a missing node")));
            }
            outputs = Some(ids);
            continue;
        }
        let id: usize = parse(Some(first), "node id", line_no)?;
        if id != c.len() {
            return Err(err(format!("expected node id {}, got {id}", c.len())));
        }
        let kind = toks.next().ok_or_else(|| err("missing node kind".into()))?;
        let node = match kind {
            "INPUT" => Node::Input(parse(toks.next(), "input index", line_no)?),
            "CONST" => Node::Const(parse(toks.next(), "constant", line_no)?),
            "ADD" | "MUL" => {
                let a = parse(toks.next(), "operand", line_no)?;
                let b = parse(toks.next(), "operand", line_no)?;
                if kind == "ADD" {
                    Node::Add(a, b)
                } else {
                    Node::Mul(a, b)
                }
            }
            other => return Err(err(format!("unknown node kind {other:?}"))),
        };
        if let Some(extra) = toks.next() {
            return Err(err(format!("unexpected token {extra:?}")));
        }
        c.push(node).map_err(|e| err(e.to_string()))?;
    }
    let outputs = outputs.ok_or_else(|| CircuitError::Parse { line: c.len() + 1, msg: "missing OUTPUTS line".into() })?;
    c.set_outputs(outputs)?;
    Ok(c)
}

pub fn read_circuit(path: impl AsRef<Path>) -> Result<ArithmeticCircuit> {
    read_from(BufReader::new(File::open(path)?))
}
