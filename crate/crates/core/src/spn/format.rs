//! `spn-circuit v1` text format.
//!
//! ```text
//! spn-circuit v1
//! variables <count>
//! var <id> <name> <X|Z> <domain>
//! params <count>
//! param <id> <component> <source> <values>...
//! nodes <count>
//! n <id> sum <param> <children>...
//! n <id> product <children>...
//! n <id> ind <var> <state>
//! n <id> const <value>
//! root <id>
//! end
//! ```
//!
//! `<source>` is one of `sum:<node>`, `cpt:<parent>:<child>:<row>`,
//! `unary:<node>`, `mixture` or `free`, referring to SPGM node ids.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::format::{floats, num, write_floats, Lines};
use crate::model::{NodeId, VarId, VarKind, Variable};

use super::{ParamSource, ParamVector, Spn, SpnNode};

pub const CIRCUIT_HEADER: &str = "spn-circuit v1";

fn source_token(s: &ParamSource) -> String {
    match s {
        ParamSource::SumWeights(n) => format!("sum:{}", n.0),
        ParamSource::Cpt { parent, child, row } => format!("cpt:{}:{}:{row}", parent.0, child.0),
        ParamSource::Unary(n) => format!("unary:{}", n.0),
        ParamSource::Mixture => "mixture".into(),
        ParamSource::Free => "free".into(),
    }
}

fn parse_source(line: usize, tok: &str) -> Result<ParamSource> {
    let parts: Vec<&str> = tok.split(':').collect();
    let n = |i: usize| -> Result<usize> { num(line, parts.get(i), "parameter source") };
    Ok(match parts[0] {
        "sum" if parts.len() == 2 => ParamSource::SumWeights(NodeId(n(1)?)),
        "cpt" if parts.len() == 4 => ParamSource::Cpt {
            parent: NodeId(n(1)?),
            child: NodeId(n(2)?),
            row: n(3)?,
        },
        "unary" if parts.len() == 2 => ParamSource::Unary(NodeId(n(1)?)),
        "mixture" if parts.len() == 1 => ParamSource::Mixture,
        "free" if parts.len() == 1 => ParamSource::Free,
        _ => return Err(Error::parse(line, format!("invalid parameter source `{tok}`"))),
    })
}

pub fn emit_circuit(spn: &Spn) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{CIRCUIT_HEADER}");
    let _ = writeln!(out, "variables {}", spn.variables().len());
    for (i, v) in spn.variables().iter().enumerate() {
        let kind = match v.kind {
            VarKind::Model => "X",
            VarKind::Context => "Z",
        };
        let _ = writeln!(out, "var {i} {} {kind} {}", v.name, v.domain);
    }
    let _ = writeln!(out, "params {}", spn.params().len());
    for (i, p) in spn.params().iter().enumerate() {
        let _ = write!(out, "param {i} {} {}", p.component, source_token(&p.source));
        write_floats(&mut out, &p.values);
        out.push('\n');
    }
    let _ = writeln!(out, "nodes {}", spn.nodes().len());
    for (i, node) in spn.nodes().iter().enumerate() {
        let _ = write!(out, "n {i} ");
        match node {
            SpnNode::Sum { children, param } => {
                let _ = write!(out, "sum {param}");
                for c in children {
                    let _ = write!(out, " {c}");
                }
            }
            SpnNode::Product { children } => {
                out.push_str("product");
                for c in children {
                    let _ = write!(out, " {c}");
                }
            }
            SpnNode::Indicator { var, state } => {
                let _ = write!(out, "ind {} {state}", var.0);
            }
            SpnNode::Constant(v) => {
                let _ = write!(out, "const {v:?}");
            }
        }
        out.push('\n');
    }
    let _ = writeln!(out, "root {}", spn.root());
    out.push_str("end\n");
    out
}

pub fn parse_circuit(text: &str) -> Result<Spn> {
    let mut lines = Lines::new(text);
    lines.expect_header(CIRCUIT_HEADER)?;
    let (line, toks) = lines.expect_keyword("variables")?;
    let nvars: usize = num(line, toks.get(1), "variable count")?;
    let mut variables = Vec::with_capacity(nvars);
    for i in 0..nvars {
        let (line, toks) = lines.expect_keyword("var")?;
        if toks.len() != 5 || toks[1] != i.to_string() {
            return Err(Error::parse(line, format!("expected `var {i} <name> <X|Z> <domain>`")));
        }
        let kind = match toks[3] {
            "X" => VarKind::Model,
            "Z" => VarKind::Context,
            other => return Err(Error::parse(line, format!("invalid variable kind `{other}`"))),
        };
        variables.push(Variable {
            name: toks[2].to_string(),
            kind,
            domain: num(line, toks.get(4), "domain")?,
        });
    }
    let (line, toks) = lines.expect_keyword("params")?;
    let nparams: usize = num(line, toks.get(1), "parameter count")?;
    let mut params = Vec::with_capacity(nparams);
    for i in 0..nparams {
        let (line, toks) = lines.expect_keyword("param")?;
        if toks.len() < 4 || toks[1] != i.to_string() {
            return Err(Error::parse(line, format!("expected `param {i} <component> <source> <values>`")));
        }
        params.push(ParamVector {
            component: num(line, toks.get(2), "component")?,
            source: parse_source(line, toks[3])?,
            values: floats(line, &toks[4..], "weight")?,
        });
    }
    let (line, toks) = lines.expect_keyword("nodes")?;
    let nnodes: usize = num(line, toks.get(1), "node count")?;
    let mut nodes = Vec::with_capacity(nnodes);
    for i in 0..nnodes {
        let (line, toks) = lines.expect_keyword("n")?;
        if toks.len() < 3 || toks[1] != i.to_string() {
            return Err(Error::parse(line, format!("expected `n {i} <kind> ...`")));
        }
        let ids = |from: usize| -> Result<Vec<usize>> {
            toks[from..]
                .iter()
                .map(|t| num(line, Some(t), "child id"))
                .collect()
        };
        nodes.push(match toks[2] {
            "sum" => SpnNode::Sum {
                param: num(line, toks.get(3), "parameter id")?,
                children: ids(4)?,
            },
            "product" => SpnNode::Product { children: ids(3)? },
            "ind" => SpnNode::Indicator {
                var: VarId(num(line, toks.get(3), "variable id")?),
                state: num(line, toks.get(4), "state")?,
            },
            "const" => SpnNode::Constant(num(line, toks.get(3), "constant")?),
            other => return Err(Error::parse(line, format!("unknown node kind `{other}`"))),
        });
    }
    let (line, toks) = lines.expect_keyword("root")?;
    let root: usize = num(line, toks.get(1), "root id")?;
    lines.expect_keyword("end")?;
    Spn::new(variables, nodes, root, params).map_err(|e| Error::parse(line, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::spn::compile;

    #[test]
    fn circuit_round_trip() {
        let spn = compile(&fixtures::e1().spgm).unwrap();
        let text = emit_circuit(&spn);
        let back = parse_circuit(&text).unwrap();
        assert_eq!(back, spn);
        assert_eq!(emit_circuit(&back), text);
    }

    #[test]
    fn bad_source_is_rejected() {
        let text = emit_circuit(&compile(&fixtures::e1().spgm).unwrap());
        let broken = text.replacen("unary:", "nope:", 1);
        assert!(parse_circuit(&broken).unwrap_err().to_string().contains("invalid parameter source"));
    }
}
