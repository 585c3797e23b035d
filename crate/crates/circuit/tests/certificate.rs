mod common;

use std::collections::HashMap;

use common::rng;
use polynext_circuit::folded::{FLinear, FMlp, FNorm};
use polynext_circuit::{verify_polynomial, ArithmeticCircuit, CircuitBuilder, Node};
use polynext_core::norm::PositionAffine;
use polynext_core::{Fusion, Tensor};
use rand_chacha::ChaCha8Rng;

/// Sparse polynomial: exponent vector to coefficient.
#[derive(Clone, Debug, Default)]
struct Poly(HashMap<Vec<u32>, f64>);

impl Poly {
    fn constant(c: f64, vars: usize) -> Self {
        Poly(HashMap::from([(vec![0; vars], c)]))
    }

    fn var(i: usize, vars: usize) -> Self {
        let mut e = vec![0; vars];
        e[i] = 1;
        Poly(HashMap::from([(e, 1.0)]))
    }

    fn add(&self, o: &Poly) -> Poly {
        let mut out = self.0.clone();
        for (e, c) in &o.0 {
            *out.entry(e.clone()).or_insert(0.0) += c;
        }
        Poly(out)
    }

    fn mul(&self, o: &Poly) -> Poly {
        let mut out: HashMap<Vec<u32>, f64> = HashMap::new();
        for (ea, ca) in &self.0 {
            for (eb, cb) in &o.0 {
                let e: Vec<u32> = ea.iter().zip(eb).map(|(a, b)| a + b).collect();
                *out.entry(e).or_insert(0.0) += ca * cb;
            }
        }
        Poly(out)
    }

    /// Highest total degree with a coefficient that is not negligible
    /// relative to the largest one.
    fn degree(&self) -> u64 {
        let scale = self.0.values().fold(0.0f64, |m, c| m.max(c.abs()));
        self.0
            .iter()
            .filter(|(_, c)| c.abs() > 1e-9 * scale)
            .map(|(e, _)| e.iter().sum::<u32>() as u64)
            .max()
            .unwrap_or(0)
    }
}

fn expand(c: &ArithmeticCircuit) -> Vec<Poly> {
    let vars = c.num_inputs();
    let mut v: Vec<Poly> = Vec::with_capacity(c.len());
    for node in c.nodes() {
        let p = match node {
            Node::Input(i) => Poly::var(*i as usize, vars),
            Node::Const(k) => Poly::constant(*k, vars),
            Node::Add(a, b) => v[*a as usize].add(&v[*b as usize]),
            Node::Mul(a, b) => v[*a as usize].mul(&v[*b as usize]),
            Node::Opaque(_) => panic!("opaque node"),
        };
        v.push(p);
    }
    c.outputs().iter().map(|&o| v[o as usize].clone()).collect()
}

fn linear(d_in: usize, d_out: usize, r: &mut ChaCha8Rng) -> FLinear {
    FLinear { w: Tensor::randn(&[d_out, d_in], 1.0, r), b: Tensor::randn(&[d_out], 1.0, r) }
}

fn affine_mlp(d: usize, r: &mut ChaCha8Rng) -> FMlp {
    FMlp {
        wa: linear(d, d, r),
        wb: linear(d, d, r),
        norm: FNorm::Affine(PositionAffine { a: Tensor::randn(&[d, 1], 1.0, r), b: Tensor::randn(&[d, 1], 1.0, r) }),
        wo: linear(d, d, r),
        fusion: Fusion::Hadamard,
    }
}

fn mlp_stack(layers: usize, d: usize, residual: bool, seed: u64) -> ArithmeticCircuit {
    let mut r = rng(seed);
    let mut b = CircuitBuilder::new();
    let mut x = b.inputs(d, 1, 1).unwrap();
    for _ in 0..layers {
        let f = b.mlp(&x, &affine_mlp(d, &mut r)).unwrap();
        x = if residual { b.add_maps(&x, &f).unwrap() } else { f };
    }
    b.finish(&x).unwrap()
}

#[test]
fn hadamard_of_two_vectors() {
    let mut b = CircuitBuilder::new();
    let x = b.inputs(4, 1, 1).unwrap();
    let (u, v) = (
        polynext_circuit::Wires { c: 2, h: 1, w: 1, ids: x.ids[..2].to_vec() },
        polynext_circuit::Wires { c: 2, h: 1, w: 1, ids: x.ids[2..].to_vec() },
    );
    let y = b.hadamard(&u, &v).unwrap();
    let c = b.finish(&y).unwrap();
    let muls = c.nodes().iter().filter(|n| matches!(n, Node::Mul(..))).count();
    assert_eq!(muls, 2);
    assert!(c.outputs().iter().all(|&o| c.degree(o) == 2));
    assert_eq!(c.eval(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![3.0, 8.0]);
}

#[test]
fn poly_mlp_has_degree_two_and_depth_one() {
    let c = mlp_stack(1, 2, false, 1);
    let cert = verify_polynomial(&c);
    assert!(cert.ok);
    assert_eq!((cert.max_degree, cert.mul_depth), (2, 1));
    assert_eq!(cert.node_count, c.len());
    for p in expand(&c) {
        assert_eq!(p.degree(), 2);
    }
}

#[test]
fn composed_mlps_have_degree_four() {
    for residual in [false, true] {
        let cert = verify_polynomial(&mlp_stack(2, 2, residual, 2));
        assert_eq!((cert.max_degree, cert.mul_depth), (4, 2), "residual {residual}");
    }
}

#[test]
fn degree_doubles_per_block_like_the_symbolic_expansion() {
    for layers in 1..=4u32 {
        let c = mlp_stack(layers as usize, 2, false, 10 + layers as u64);
        let cert = verify_polynomial(&c);
        assert!(cert.ok);
        assert_eq!(cert.max_degree, 2u64.pow(layers));
        assert_eq!(cert.mul_depth, layers as u64);
        let polys = expand(&c);
        for (p, &o) in polys.iter().zip(c.outputs()) {
            assert_eq!(p.degree(), c.degree(o));
        }
        let x = [0.3, -0.7];
        let direct = c.eval(&x).unwrap();
        for (p, want) in polys.iter().zip(direct) {
            let got: f64 = p.0.iter().map(|(e, k)| k * x[0].powi(e[0] as i32) * x[1].powi(e[1] as i32)).sum();
            assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
        }
    }
}

#[test]
fn ledger_is_an_upper_bound() {
    for d in 1..=3 {
        let c = mlp_stack(2, d, true, 20 + d as u64);
        for (p, &o) in expand(&c).iter().zip(c.outputs()) {
            assert!(p.degree() <= c.degree(o));
        }
    }
    let mut c = ArithmeticCircuit::new();
    let (x, y) = (c.input(0), c.input(1));
    let xy = c.mul(x, y).unwrap();
    let neg = c.constant(-1.0);
    let m = c.mul(neg, xy).unwrap();
    let z = c.add(xy, m).unwrap();
    c.set_outputs(vec![z]).unwrap();
    assert_eq!(c.degree(z), 2);
    assert_eq!(expand(&c)[0].degree(), 0);
}

#[test]
fn const_only_circuit_returns_constants() {
    let mut c = ArithmeticCircuit::new();
    let a = c.constant(1.5);
    let b = c.constant(-2.0);
    let s = c.add(a, b).unwrap();
    c.set_outputs(vec![a, s]).unwrap();
    assert_eq!(c.eval(&[]).unwrap(), vec![1.5, -0.5]);
    assert_eq!(verify_polynomial(&c).max_degree, 0);
}

#[test]
fn input_count_is_checked() {
    let c = mlp_stack(1, 2, false, 3);
    assert!(c.eval(&[1.0]).is_err());
    assert!(c.eval(&[1.0, 2.0, 3.0]).is_err());
}

#[test]
fn permuting_independent_nodes_keeps_outputs() {
    // (x0·x1) + (x2 + x3) with the two independent subterms in either order
    let build = |mul_first: bool| {
        let mut c = ArithmeticCircuit::new();
        let x: Vec<_> = (0..4).map(|i| c.input(i)).collect();
        let (m, a) = if mul_first {
            let m = c.mul(x[0], x[1]).unwrap();
            (m, c.add(x[2], x[3]).unwrap())
        } else {
            let a = c.add(x[2], x[3]).unwrap();
            (c.mul(x[0], x[1]).unwrap(), a)
        };
        let out = c.add(m, a).unwrap();
        c.set_outputs(vec![out, m]).unwrap();
        c
    };
    let (a, b) = (build(true), build(false));
    assert_ne!(a.nodes(), b.nodes());
    let x = [0.5, -3.0, 2.25, 7.0];
    assert_eq!(a.eval(&x).unwrap(), b.eval(&x).unwrap());
    assert_eq!(verify_polynomial(&a), verify_polynomial(&b));
}

#[test]
fn forbidden_kind_fails_the_certificate() {
    let mut c = ArithmeticCircuit::new();
    let x = c.input(0);
    let k = c.constant(2.0);
    let d = c.opaque("DIV", &[x, k]).unwrap();
    let y = c.add(d, x).unwrap();
    c.set_outputs(vec![y]).unwrap();
    let cert = verify_polynomial(&c);
    assert!(!cert.ok);
    assert_eq!(cert.offending, vec![2]);
    assert!(c.eval(&[1.0]).is_err());
    let mut c = ArithmeticCircuit::new();
    let x = c.input(0);
    let s = c.opaque("SQRT", &[x]).unwrap();
    c.set_outputs(vec![s]).unwrap();
    assert!(!verify_polynomial(&c).ok);
}

#[test]
fn ok_implies_only_whitelisted_kinds() {
    let c = mlp_stack(3, 3, true, 4);
    let cert = verify_polynomial(&c);
    assert!(cert.ok);
    assert!(c.nodes().iter().all(|n| matches!(n.kind(), "INPUT" | "CONST" | "ADD" | "MUL")));
}

#[test]
fn power_lowers_to_chained_products() {
    let mut b = CircuitBuilder::new();
    let x = b.inputs(1, 1, 1).unwrap();
    let before = b.node_count();
    let p = b.power(x.ids[0], 4).unwrap();
    assert_eq!(b.node_count() - before, 3);
    let c = b.finish(&polynext_circuit::Wires { c: 1, h: 1, w: 1, ids: vec![p] }).unwrap();
    assert_eq!(c.eval(&[1.5]).unwrap(), vec![1.5f64 * 1.5 * 1.5 * 1.5]);
    assert_eq!(verify_polynomial(&c).max_degree, 4);
}
