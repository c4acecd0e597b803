//! Central finite differences against tape gradients.

use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so entries whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub floor: f64,
    /// Cap on checked entries per tensor; entries are taken at an even stride.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-5,
            max_entries: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct WorstEntry {
    pub group: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub worst: Vec<WorstEntry>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }

    /// `Err(Numeric)` listing the worst entries when the check failed.
    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            Ok(self)
        } else {
            Err(Error::Numeric(self.to_string()))
        }
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "gradcheck {} max_rel_err={:.3e} tol={:.1e}",
            if self.passed() { "ok" } else { "FAILED" },
            self.max_rel_err,
            self.tolerance
        )?;
        for g in &self.groups {
            writeln!(f, "  {:<40} n={:<5} max_rel_err={:.3e}", g.name, g.checked, g.max_rel_err)?;
        }
        for w in self.worst.iter().take(5) {
            writeln!(
                f,
                "  worst {}[{}]: analytic={:.6e} numeric={:.6e} rel={:.3e}",
                w.group, w.index, w.analytic, w.numeric, w.rel_err
            )?;
        }
        Ok(())
    }
}

fn sample_indices(n: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(cap) if cap < n => {
            let stride = n as f64 / cap as f64;
            (0..cap).map(|i| (i as f64 * stride) as usize).collect()
        }
        _ => (0..n).collect(),
    }
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(Error::Usage(format!("gradcheck objective is {:?}, not scalar", t.dims())));
    }
    Ok(t.item())
}

/// Checks every non-frozen parameter of `store` used by `objective`.
///
/// The objective is rebuilt on a fresh eval-mode tape for every evaluation.
pub fn gradcheck_params<F>(store: &mut ParamStore, objective: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let root = objective(&mut tape, store)?;
    scalar_of(&tape, root)?;
    tape.backward(root)?;
    tape.accumulate_param_grads(store);
    let analytic: Vec<(crate::numerics::ParamId, Tensor)> = store
        .trainable()
        .map(|id| (id, store.get(id).grad.clone()))
        .collect();

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let v = objective(&mut t, store)?;
        scalar_of(&t, v)
    };

    let mut groups = Vec::new();
    let mut worst = Vec::new();
    let mut global = 0.0f64;
    for (id, grad) in analytic {
        let name = store.get(id).name.clone();
        let n = grad.numel();
        let mut group_max = 0.0f64;
        let idx = sample_indices(n, opts.max_entries);
        for &k in &idx {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + opts.step;
            let fp = eval(store)?;
            store.value_mut(id).data_mut()[k] = orig - opts.step;
            let fm = eval(store)?;
            store.value_mut(id).data_mut()[k] = orig;
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = grad.data()[k];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let rel = (a - numeric).abs() / denom;
            if !rel.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient in {name}[{k}]")));
            }
            group_max = group_max.max(rel);
            worst.push(WorstEntry {
                group: name.clone(),
                index: k,
                analytic: a,
                numeric,
                rel_err: rel,
            });
        }
        global = global.max(group_max);
        groups.push(GroupReport {
            name,
            checked: idx.len(),
            max_rel_err: group_max,
        });
    }
    worst.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
    worst.truncate(10);
    store.zero_grad();
    Ok(GradCheckReport {
        groups,
        worst,
        max_rel_err: global,
        tolerance: opts.tolerance,
    })
}

/// Checks the gradient of `f` with respect to each of `inputs`.
pub fn gradcheck<F>(inputs: &[Tensor], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("input{i}"), t.clone()))
        .collect();
    gradcheck_params(
        &mut store,
        |tape, store| {
            let vars: Vec<Var> = ids.iter().map(|&id| tape.param(store, id)).collect();
            f(tape, &vars)
        },
        opts,
    )
}
