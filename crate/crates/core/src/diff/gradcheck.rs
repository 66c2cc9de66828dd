//! Central finite-difference verification of analytic gradients.

use crate::scalar::Scalar;

use super::{Graph, GraphError, NodeId};

/// Gradients smaller than this are compared in absolute terms, since a
/// central difference cannot resolve them from rounding noise.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Node and flat element index where the worst error occurred.
    pub worst: Option<(NodeId, usize)>,
    pub worst_label: Option<String>,
    /// Analytic and finite-difference values at the worst element.
    pub worst_values: (f64, f64),
    pub elements: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Checks every grad-requiring leaf of `graph` against central differences
/// with step `h`. `output` must be scalar.
pub fn grad_check<T: Scalar>(
    graph: &mut Graph<T>,
    output: NodeId,
    tolerance: f64,
    h: f64,
) -> Result<GradCheckReport, GraphError> {
    let leaves = graph.grad_leaves();
    grad_check_nodes(graph, output, &leaves, tolerance, h)
}

/// As [`grad_check`], restricted to the listed leaves.
///
/// Per element the error is `|g_a − g_fd| / max(GRAD_FLOOR, |g_a| + |g_fd|)`; the
/// check passes iff the maximum does not exceed `tolerance`.
pub fn grad_check_nodes<T: Scalar>(
    graph: &mut Graph<T>,
    output: NodeId,
    leaves: &[NodeId],
    tolerance: f64,
    h: f64,
) -> Result<GradCheckReport, GraphError> {
    graph.forward()?;
    let grads = graph.backward(output)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_label: None,
        worst_values: (0.0, 0.0),
        elements: 0,
        tolerance,
        passed: true,
    };
    for &leaf in leaves {
        let analytic: Vec<f64> = match grads.get(leaf) {
            Some(g) => g.data().iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; graph.value(leaf).len()],
        };
        for (e, &ga) in analytic.iter().enumerate() {
            let orig = graph.value(leaf).data()[e];
            graph.leaf_data_mut(leaf)[e] = orig + T::of(h);
            graph.forward()?;
            let fp = graph.value(output).data()[0].as_f64();
            graph.leaf_data_mut(leaf)[e] = orig - T::of(h);
            graph.forward()?;
            let fm = graph.value(output).data()[0].as_f64();
            graph.leaf_data_mut(leaf)[e] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let rel = (ga - fd).abs() / (ga.abs() + fd.abs()).max(GRAD_FLOOR);
            report.elements += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((leaf, e));
                report.worst_values = (ga, fd);
            }
        }
    }
    graph.forward()?;
    report.worst_label = report.worst.and_then(|(n, _)| graph.label(n).map(str::to_owned));
    report.passed = report.max_rel_error <= tolerance;
    Ok(report)
}
