use std::collections::BTreeMap;

use crate::workloads::{ParamValue, ParamVector};

use super::EnsembleError;

/// Cartesian product of the sweep axes over `base`. Axes are taken in name
/// order with the last one varying fastest. An empty sweep yields `base`.
pub fn cartesian(base: &ParamVector, sweep: &BTreeMap<String, Vec<ParamValue>>) -> Result<Vec<ParamVector>, EnsembleError> {
    let mut out = vec![base.clone()];
    for (name, values) in sweep {
        if values.is_empty() {
            return Err(EnsembleError::InvalidSweep(format!("axis {name:?} has no values")));
        }
        out = out
            .into_iter()
            .flat_map(|partial| {
                values.iter().map(move |v| {
                    let mut next = partial.clone();
                    next.insert(name.clone(), v.clone());
                    next
                })
            })
            .collect();
    }
    Ok(out)
}
