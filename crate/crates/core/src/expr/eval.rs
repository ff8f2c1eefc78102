use super::{Arity, Expression, Op};
use crate::error::{FexError, Result};
use crate::points::PointSet;

/// Bottom-up evaluation, one output column per node.
pub(super) fn evaluate_batch(expr: &Expression, points: &PointSet) -> Result<Vec<f64>> {
    let dim = expr.template().input_dim();
    if points.dim() != dim {
        return Err(FexError::DimensionMismatch { expected: dim, got: points.dim() });
    }
    let out = eval_node(expr, 0, points)?;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(FexError::NonFinite("expression evaluation"));
    }
    Ok(out)
}

fn eval_node(expr: &Expression, i: usize, points: &PointSet) -> Result<Vec<f64>> {
    let t = expr.template();
    let node = &t.nodes()[i];
    let off = t.param_offset(i);
    let p = expr.params();
    let values = match (expr.ops().ops()[i], node.arity) {
        (Op::Binary(b), Arity::Binary) => {
            let l = eval_node(expr, node.children[0], points)?;
            let r = eval_node(expr, node.children[1], points)?;
            l.iter().zip(&r).map(|(&a, &c)| b.apply(a, c)).collect::<Result<Vec<_>>>()?
        }
        (Op::Unary(u), Arity::Unary) if node.is_leaf() => {
            let dim = points.dim();
            let (alpha, beta) = (&p[off..off + dim], p[off + dim]);
            points
                .rows()
                .map(|x| {
                    let mut s = alpha[0] * u.apply(x[0]);
                    for j in 1..dim {
                        s += alpha[j] * u.apply(x[j]);
                    }
                    s + beta
                })
                .collect()
        }
        (Op::Unary(u), Arity::Unary) => {
            let (alpha, beta) = (p[off], p[off + 1]);
            let mut v = eval_node(expr, node.children[0], points)?;
            for z in &mut v {
                *z = alpha * u.apply(*z) + beta;
            }
            v
        }
        _ => unreachable!("arity checked at construction"),
    };
    if values.iter().any(|v| !v.is_finite()) {
        return Err(FexError::NonFinite("expression evaluation"));
    }
    Ok(values)
}
