use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{Spgm, VarId, Variable};

/// Marker for an unassigned variable in the dense evidence form.
pub const FREE: u32 = u32::MAX;

/// Partial assignment over model and context variables.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Evidence {
    assignments: BTreeMap<VarId, usize>,
}

impl Evidence {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (VarId, usize)>) -> Self {
        Evidence {
            assignments: pairs.into_iter().collect(),
        }
    }

    /// Full assignment of the model variables from a dataset row.
    pub fn from_row(model_vars: &[VarId], row: &[u8]) -> Self {
        Self::from_pairs(
            model_vars
                .iter()
                .zip(row)
                .map(|(&v, &s)| (v, s as usize)),
        )
    }

    /// Parses `NAME=state,NAME=state`; an empty string or `{}` is empty evidence.
    pub fn parse(spgm: &Spgm, text: &str) -> Result<Self> {
        let text = text.trim();
        let mut ev = Evidence::new();
        if text.is_empty() || text == "{}" {
            return Ok(ev);
        }
        for item in text.split(',') {
            let item = item.trim();
            if item.is_empty() {
                continue;
            }
            let (name, state) = item
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("expected NAME=state, got `{item}`")))?;
            let var = spgm
                .var_by_name(name.trim())
                .ok_or_else(|| Error::UnknownVariable(name.trim().to_string()))?;
            let state: usize = state
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad state in `{item}`")))?;
            ev.set(var, state);
        }
        ev.check(spgm.variables())?;
        Ok(ev)
    }

    pub fn set(&mut self, var: VarId, state: usize) -> &mut Self {
        self.assignments.insert(var, state);
        self
    }

    pub fn with(mut self, var: VarId, state: usize) -> Self {
        self.set(var, state);
        self
    }

    pub fn remove(&mut self, var: VarId) -> Option<usize> {
        self.assignments.remove(&var)
    }

    pub fn get(&self, var: VarId) -> Option<usize> {
        self.assignments.get(&var).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (VarId, usize)> + '_ {
        self.assignments.iter().map(|(&v, &s)| (v, s))
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    /// Checks every assignment against the variable table.
    pub fn check(&self, variables: &[Variable]) -> Result<()> {
        for (&var, &state) in &self.assignments {
            let v = variables
                .get(var.0)
                .ok_or_else(|| Error::UnknownVariable(var.to_string()))?;
            if state >= v.domain {
                return Err(Error::StateOutOfDomain {
                    var,
                    state,
                    domain: v.domain,
                });
            }
        }
        Ok(())
    }

    /// Dense form indexed by variable id, [`FREE`] for unassigned entries.
    pub fn dense(&self, variables: &[Variable]) -> Result<Vec<u32>> {
        self.check(variables)?;
        let mut out = vec![FREE; variables.len()];
        for (&var, &state) in &self.assignments {
            out[var.0] = state as u32;
        }
        Ok(out)
    }

    pub fn display(&self, spgm: &Spgm) -> String {
        self.assignments
            .iter()
            .map(|(v, s)| {
                let name = spgm
                    .variables()
                    .get(v.0)
                    .map_or_else(|| v.to_string(), |x| x.name.clone());
                format!("{name}={s}")
            })
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Indicator `[var]_state` under the evidence: 1 when the variable is free or
/// set to `state`, 0 otherwise.
pub fn indicator(
    variables: &[Variable],
    evidence: &Evidence,
    var: VarId,
    state: usize,
) -> Result<u8> {
    let v = variables
        .get(var.0)
        .ok_or_else(|| Error::UnknownVariable(var.to_string()))?;
    if state >= v.domain {
        return Err(Error::StateOutOfDomain {
            var,
            state,
            domain: v.domain,
        });
    }
    Ok(match evidence.get(var) {
        None => 1,
        Some(s) => u8::from(s == state),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::VarKind;

    fn vars() -> Vec<Variable> {
        ["A", "B"]
            .iter()
            .map(|n| Variable {
                name: n.to_string(),
                kind: VarKind::Model,
                domain: 2,
            })
            .collect()
    }

    #[test]
    fn empty_evidence_gives_ones() {
        let v = vars();
        for var in 0..2 {
            for s in 0..2 {
                assert_eq!(indicator(&v, &Evidence::new(), VarId(var), s).unwrap(), 1);
            }
        }
    }

    #[test]
    fn observed_variable_selects_its_state() {
        let v = vars();
        let ev = Evidence::new().with(VarId(0), 1);
        assert_eq!(indicator(&v, &ev, VarId(0), 1).unwrap(), 1);
        assert_eq!(indicator(&v, &ev, VarId(0), 0).unwrap(), 0);
        assert_eq!(indicator(&v, &ev, VarId(1), 0).unwrap(), 1);
    }

    #[test]
    fn out_of_domain_state_is_rejected() {
        let v = vars();
        assert!(matches!(
            indicator(&v, &Evidence::new(), VarId(0), 2),
            Err(Error::StateOutOfDomain { .. })
        ));
        assert!(Evidence::new().with(VarId(1), 5).check(&v).is_err());
        assert!(Evidence::new().with(VarId(7), 0).check(&v).is_err());
    }
}
