use super::graph::{Bound, Graph, Var};
use super::params::ParamStore;

/// Worst disagreement between analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    /// max over scalars of |a - n| / max(|a|, |n|), counting only entries
    /// where |a - n| exceeds `abs_floor`.
    pub max_rel_error: f64,
    /// max over all scalars of |a - n|.
    pub max_abs_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheck {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_error <= rel_tol
    }
}

/// Compares reverse-mode gradients of `loss` with central differences over
/// every scalar of `params`.
pub fn gradient_check(
    params: &ParamStore,
    loss: impl Fn(&mut Graph, &Bound) -> Var,
    step: f64,
    abs_floor: f64,
) -> GradCheck {
    let mut g = Graph::new();
    let bound = g.bind(params);
    let l = loss(&mut g, &bound);
    let grads = g.backward(l).for_params(&bound, &g);
    let eval = |p: &ParamStore| {
        let mut g = Graph::new();
        let b = g.bind(p);
        let l = loss(&mut g, &b);
        g.scalar_value(l)
    };
    let mut report = GradCheck {
        checked: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
    };
    let mut work = params.clone();
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let n = params.get(&name).unwrap().len();
        for i in 0..n {
            let orig = work.get(&name).unwrap().data()[i];
            work.tensor_mut(&name).unwrap().data_mut()[i] = orig + step;
            let up = eval(&work);
            work.tensor_mut(&name).unwrap().data_mut()[i] = orig - step;
            let down = eval(&work);
            work.tensor_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads[&name].data()[i];
            let diff = (analytic - numeric).abs();
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(diff);
            if diff > abs_floor {
                let rel = diff / analytic.abs().max(numeric.abs());
                if rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst = Some((name.clone(), i, analytic, numeric));
                }
            }
        }
    }
    report
}
