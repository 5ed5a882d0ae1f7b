//! Text serialization of models.
//!
//! `spgm-model v1`:
//!
//! ```text
//! spgm-model v1
//! variables <count>
//! var <id> <name> <X|Z> <domain>
//! nodes <count>
//! node <id> vnode <var> children [<child>]
//! node <id> sum-observed <var> children <c>... weights <w>...
//! node <id> sum-unobserved children <c>... weights <w>...
//! node <id> product children <c>...
//! root <id>
//! cpt <parent> <child> <rows> <cols> <row-major values>...
//! unary <node> <values>...
//! end
//! ```
//!
//! `spgm-mixture v1` wraps several models:
//!
//! ```text
//! spgm-mixture v1
//! components <K>
//! lambdas <l1> ... <lK>
//! component 0
//! spgm-model v1
//! ...
//! end
//! component 1
//! ...
//! end-mixture
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Ids are dense and
//! listed in order. Floats use the shortest representation that parses back
//! to the same value.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mixture::SpgmMixture;
use crate::model::{Cpt, Node, NodeId, NodeKind, Spgm, VarId, VarKind, Variable};

pub const MODEL_HEADER: &str = "spgm-model v1";
pub const MIXTURE_HEADER: &str = "spgm-mixture v1";

/// Non-empty, non-comment lines with their 1-based line numbers.
pub(crate) struct Lines<'a> {
    inner: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
}

impl<'a> Lines<'a> {
    pub(crate) fn new(text: &'a str) -> Self {
        Lines {
            inner: text.lines().enumerate().peekable(),
        }
    }

    pub(crate) fn next_line(&mut self) -> Option<(usize, Vec<&'a str>)> {
        for (i, line) in self.inner.by_ref() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            return Some((i + 1, line.split_whitespace().collect()));
        }
        None
    }

    pub(crate) fn expect(&mut self, what: &str) -> Result<(usize, Vec<&'a str>)> {
        self.next_line()
            .ok_or_else(|| Error::parse(0, format!("unexpected end of input, expected {what}")))
    }

    pub(crate) fn expect_keyword(&mut self, keyword: &str) -> Result<(usize, Vec<&'a str>)> {
        let (line, toks) = self.expect(keyword)?;
        if toks.first() != Some(&keyword) {
            return Err(Error::parse(
                line,
                format!("expected `{keyword}`, found `{}`", toks.join(" ")),
            ));
        }
        Ok((line, toks))
    }

    pub(crate) fn expect_header(&mut self, header: &str) -> Result<()> {
        let (line, toks) = self.expect(header)?;
        let found = toks.join(" ");
        if found != header {
            let kind = header.split(' ').next().unwrap_or_default();
            if toks.first() == Some(&kind) {
                return Err(Error::parse(
                    line,
                    format!("unsupported schema version `{found}`, expected `{header}`"),
                ));
            }
            return Err(Error::parse(line, format!("expected `{header}`, found `{found}`")));
        }
        Ok(())
    }
}

pub(crate) fn num<T: std::str::FromStr>(line: usize, tok: Option<&&str>, field: &str) -> Result<T> {
    let tok = tok.ok_or_else(|| Error::parse(line, format!("missing {field}")))?;
    tok.parse()
        .map_err(|_| Error::parse(line, format!("invalid {field} `{tok}`")))
}

pub(crate) fn floats(line: usize, toks: &[&str], field: &str) -> Result<Vec<f64>> {
    toks.iter()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::parse(line, format!("invalid {field} `{t}`")))
        })
        .collect()
}

pub(crate) fn write_floats(out: &mut String, values: &[f64]) {
    for v in values {
        let _ = write!(out, " {v:?}");
    }
}

fn ids(line: usize, toks: &[&str], field: &str) -> Result<Vec<NodeId>> {
    toks.iter()
        .map(|t| {
            t.parse::<usize>()
                .map(NodeId)
                .map_err(|_| Error::parse(line, format!("invalid {field} `{t}`")))
        })
        .collect()
}

pub fn emit_model(spgm: &Spgm) -> Result<String> {
    let mut out = String::new();
    emit_model_into(spgm, &mut out)?;
    Ok(out)
}

fn emit_model_into(spgm: &Spgm, out: &mut String) -> Result<()> {
    out.push_str(MODEL_HEADER);
    out.push('\n');
    let _ = writeln!(out, "variables {}", spgm.variables().len());
    for (i, v) in spgm.variables().iter().enumerate() {
        if v.name.is_empty() || v.name.chars().any(char::is_whitespace) {
            return Err(Error::invalid(format!("variable name `{}` cannot be serialized", v.name)));
        }
        let kind = match v.kind {
            VarKind::Model => "X",
            VarKind::Context => "Z",
        };
        let _ = writeln!(out, "var {i} {} {kind} {}", v.name, v.domain);
    }
    let _ = writeln!(out, "nodes {}", spgm.nodes().len());
    for (i, node) in spgm.nodes().iter().enumerate() {
        let _ = write!(out, "node {i} ");
        match &node.kind {
            NodeKind::Vnode { var } => {
                let _ = write!(out, "vnode {} children", var.0);
            }
            NodeKind::SumObserved { var, .. } => {
                let _ = write!(out, "sum-observed {} children", var.0);
            }
            NodeKind::SumUnobserved { .. } => out.push_str("sum-unobserved children"),
            NodeKind::Product => out.push_str("product children"),
        }
        for c in &node.children {
            let _ = write!(out, " {}", c.0);
        }
        if let Some(w) = node.kind.weights() {
            out.push_str(" weights");
            write_floats(out, w);
        }
        out.push('\n');
    }
    let _ = writeln!(out, "root {}", spgm.root().0);
    for (&(s, t), cpt) in spgm.pairwise() {
        let _ = write!(
            out,
            "cpt {} {} {} {}",
            s.0,
            t.0,
            cpt.parent_states(),
            cpt.child_states()
        );
        write_floats(out, cpt.values());
        out.push('\n');
    }
    for (&n, p) in spgm.unary() {
        let _ = write!(out, "unary {}", n.0);
        write_floats(out, p);
        out.push('\n');
    }
    out.push_str("end\n");
    Ok(())
}

/// Parses a model; the result is not validated.
pub fn parse_model(text: &str) -> Result<Spgm> {
    let mut lines = Lines::new(text);
    let spgm = parse_model_lines(&mut lines)?;
    if let Some((line, toks)) = lines.next_line() {
        return Err(Error::parse(line, format!("trailing content `{}`", toks.join(" "))));
    }
    Ok(spgm)
}

fn parse_model_lines(lines: &mut Lines<'_>) -> Result<Spgm> {
    lines.expect_header(MODEL_HEADER)?;
    let (line, toks) = lines.expect_keyword("variables")?;
    let nvars: usize = num(line, toks.get(1), "variable count")?;
    let mut variables = Vec::with_capacity(nvars);
    for i in 0..nvars {
        let (line, toks) = lines.expect_keyword("var")?;
        if toks.len() != 5 {
            return Err(Error::parse(line, "expected `var <id> <name> <X|Z> <domain>`"));
        }
        let id: usize = num(line, toks.get(1), "variable id")?;
        if id != i {
            return Err(Error::parse(line, format!("variable id {id} out of order, expected {i}")));
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
    let (line, toks) = lines.expect_keyword("nodes")?;
    let nnodes: usize = num(line, toks.get(1), "node count")?;
    let mut nodes = Vec::with_capacity(nnodes);
    for i in 0..nnodes {
        let (line, toks) = lines.expect_keyword("node")?;
        let id: usize = num(line, toks.get(1), "node id")?;
        if id != i {
            return Err(Error::parse(line, format!("node id {id} out of order, expected {i}")));
        }
        let variant = *toks
            .get(2)
            .ok_or_else(|| Error::parse(line, "missing node variant"))?;
        let (var, rest) = match variant {
            "vnode" | "sum-observed" => (
                Some(VarId(num(line, toks.get(3), "variable")?)),
                toks.get(4..).unwrap_or(&[]),
            ),
            "sum-unobserved" | "product" => (None, toks.get(3..).unwrap_or(&[])),
            other => return Err(Error::parse(line, format!("unknown node variant `{other}`"))),
        };
        if rest.first() != Some(&"children") {
            return Err(Error::parse(line, "expected `children`"));
        }
        let rest = &rest[1..];
        let split = rest.iter().position(|t| *t == "weights");
        let (child_toks, weight_toks) = match split {
            Some(p) => (&rest[..p], Some(&rest[p + 1..])),
            None => (rest, None),
        };
        let children = ids(line, child_toks, "child id")?;
        let is_sum = matches!(variant, "sum-observed" | "sum-unobserved");
        let weights = match (is_sum, weight_toks) {
            (true, Some(w)) => floats(line, w, "weight")?,
            (true, None) => return Err(Error::parse(line, "sum node needs `weights`")),
            (false, Some(_)) => {
                return Err(Error::parse(line, format!("{variant} node cannot have weights")))
            }
            (false, None) => Vec::new(),
        };
        let kind = match variant {
            "vnode" => NodeKind::Vnode { var: var.unwrap() },
            "sum-observed" => NodeKind::SumObserved {
                var: var.unwrap(),
                weights,
            },
            "sum-unobserved" => NodeKind::SumUnobserved { weights },
            _ => NodeKind::Product,
        };
        nodes.push(Node { kind, children });
    }
    let (line, toks) = lines.expect_keyword("root")?;
    let root = NodeId(num(line, toks.get(1), "root id")?);
    let mut pairwise = BTreeMap::new();
    let mut unary = BTreeMap::new();
    loop {
        let (line, toks) = lines.expect("`cpt`, `unary` or `end`")?;
        match toks[0] {
            "cpt" => {
                let s = NodeId(num(line, toks.get(1), "parent id")?);
                let t = NodeId(num(line, toks.get(2), "child id")?);
                let rows: usize = num(line, toks.get(3), "row count")?;
                let cols: usize = num(line, toks.get(4), "column count")?;
                let values = floats(line, toks.get(5..).unwrap_or(&[]), "probability")?;
                let cpt = Cpt::new(rows, cols, values).map_err(|e| Error::parse(line, e.to_string()))?;
                if pairwise.insert((s, t), cpt).is_some() {
                    return Err(Error::parse(line, format!("duplicate cpt ({}, {})", s.0, t.0)));
                }
            }
            "unary" => {
                let n = NodeId(num(line, toks.get(1), "node id")?);
                let values = floats(line, toks.get(2..).unwrap_or(&[]), "probability")?;
                if unary.insert(n, values).is_some() {
                    return Err(Error::parse(line, format!("duplicate unary {}", n.0)));
                }
            }
            "end" => break,
            other => return Err(Error::parse(line, format!("unexpected `{other}`"))),
        }
    }
    Ok(Spgm::from_parts(variables, nodes, root, pairwise, unary))
}

pub fn emit_mixture(mixture: &SpgmMixture) -> Result<String> {
    let mut out = String::new();
    out.push_str(MIXTURE_HEADER);
    out.push('\n');
    let _ = writeln!(out, "components {}", mixture.components.len());
    out.push_str("lambdas");
    write_floats(&mut out, &mixture.lambdas);
    out.push('\n');
    for (k, c) in mixture.components.iter().enumerate() {
        let _ = writeln!(out, "component {k}");
        emit_model_into(c, &mut out)?;
    }
    out.push_str("end-mixture\n");
    Ok(out)
}

/// Parses a mixture file, or a plain model file as a one-component mixture.
pub fn parse_mixture(text: &str) -> Result<SpgmMixture> {
    let mut lines = Lines::new(text);
    let mut probe = Lines::new(text);
    if let Some((_, toks)) = probe.next_line() {
        if toks.join(" ") == MODEL_HEADER {
            return Ok(SpgmMixture::single(parse_model(text)?));
        }
    }
    lines.expect_header(MIXTURE_HEADER)?;
    let (line, toks) = lines.expect_keyword("components")?;
    let k: usize = num(line, toks.get(1), "component count")?;
    let (line, toks) = lines.expect_keyword("lambdas")?;
    let lambdas = floats(line, &toks[1..], "mixture weight")?;
    if lambdas.len() != k {
        return Err(Error::parse(line, format!("{} weights for {k} components", lambdas.len())));
    }
    let mut components = Vec::with_capacity(k);
    for i in 0..k {
        let (line, toks) = lines.expect_keyword("component")?;
        let id: usize = num(line, toks.get(1), "component id")?;
        if id != i {
            return Err(Error::parse(line, format!("component {id} out of order, expected {i}")));
        }
        components.push(parse_model_lines(&mut lines)?);
    }
    lines.expect_keyword("end-mixture")?;
    if let Some((line, toks)) = lines.next_line() {
        return Err(Error::parse(line, format!("trailing content `{}`", toks.join(" "))));
    }
    Ok(SpgmMixture {
        components,
        lambdas,
    })
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_model(path: &Path) -> Result<Spgm> {
    parse_model(&read(path)?).map_err(|e| e.with_path(path))
}

pub fn load_mixture(path: &Path) -> Result<SpgmMixture> {
    parse_mixture(&read(path)?).map_err(|e| e.with_path(path))
}

pub fn save_model(spgm: &Spgm, path: &Path) -> Result<()> {
    write_text(path, &emit_model(spgm)?)
}

pub fn save_mixture(mixture: &SpgmMixture, path: &Path) -> Result<()> {
    write_text(path, &emit_mixture(mixture)?)
}
