use super::{Graph, ParamStore, Result, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "max_rel_error={:.3e} coords={} worst={}[{},{}] analytic={:.9e} numeric={:.9e}",
            self.max_rel_error,
            self.coords_checked,
            self.worst_param,
            self.worst_index.0,
            self.worst_index.1,
            self.analytic,
            self.numeric
        )
    }
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    Ok(g.scalar(loss))
}

/// Compares analytic gradients of the scalar built by `f` against central
/// finite differences over every non-frozen coordinate of `store`.
///
/// Relative error per coordinate is `|a - n| / max(1, |a|, |n|)`.
pub fn grad_check<F>(store: &ParamStore, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grad();

    let mut g = Graph::new();
    let loss = f(&mut g, &work)?;
    let first = g.scalar(loss);
    let grads = g.backward(loss)?;
    g.accumulate_param_grads(&grads, &mut work)?;
    drop(g);

    let second = eval(&work, &f)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second });
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let ids: Vec<_> = work.ids().collect();
    for id in ids {
        let (rows, cols) = work.value(id).dim();
        for r in 0..rows {
            if work.get(id).frozen_rows.contains(&r) {
                continue;
            }
            for c in 0..cols {
                let orig = work.value(id)[[r, c]];
                work.value_mut(id)[[r, c]] = orig + eps;
                let up = eval(&work, &f)?;
                work.value_mut(id)[[r, c]] = orig - eps;
                let down = eval(&work, &f)?;
                work.value_mut(id)[[r, c]] = orig;

                let numeric = (up - down) / (2.0 * eps);
                let analytic = work.grad(id)[[r, c]];
                let rel = (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs());
                report.coords_checked += 1;
                if rel > report.max_rel_error || report.worst_param.is_empty() {
                    report.max_rel_error = rel;
                    report.worst_param = work.get(id).name.clone();
                    report.worst_index = (r, c);
                    report.analytic = analytic;
                    report.numeric = numeric;
                }
            }
        }
    }
    Ok(report)
}
