//! Central finite-difference checks of [`Graph::backward`].

use super::{Graph, NodeId, Result, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    /// Largest `|a - n| / max(|a|, |n|, floor)` over all checked elements.
    pub max_rel_err: f64,
    /// `||a - n|| / max(||a||, ||n||)` over all checked elements.
    pub norm_rel_err: f64,
    pub checked: usize,
}

/// Compares analytic gradients of `f` with respect to each of `inputs` against
/// `(f(x + eps) - f(x - eps)) / 2 eps`.
///
/// `f` must be deterministic: it is re-run twice per element.
pub fn check<F>(inputs: &[Tensor], eps: f64, floor: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &ids)?;
        Ok(g.value(out).data[0])
    };
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &ids)?;
    g.backward(out)?;
    let mut analytic = Vec::new();
    for (k, id) in ids.iter().enumerate() {
        let grad = g
            .grad(*id)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        analytic.push(grad);
    }
    let mut max_rel: f64 = 0.0;
    let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    let mut checked = 0;
    let mut xs = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[k].numel() {
            let orig = xs[k].data[i];
            xs[k].data[i] = orig + eps;
            let up = eval(&xs)?;
            xs[k].data[i] = orig - eps;
            let down = eval(&xs)?;
            xs[k].data[i] = orig;
            let num = (up - down) / (2.0 * eps);
            let a = grad[i];
            max_rel = max_rel.max((a - num).abs() / a.abs().max(num.abs()).max(floor));
            diff2 += (a - num).powi(2);
            a2 += a * a;
            n2 += num * num;
            checked += 1;
        }
    }
    let denom = a2.sqrt().max(n2.sqrt());
    Ok(GradReport {
        max_rel_err: max_rel,
        norm_rel_err: if denom > 0.0 { diff2.sqrt() / denom } else { 0.0 },
        checked,
    })
}
