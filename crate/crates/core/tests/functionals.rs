use std::f64::consts::PI;
use std::sync::Arc;

use fex_core::expr::{OperatorSequence, OperatorSet, TreeTemplate};
use fex_core::pde::PdeProblem;
use fex_core::points::PointSet;
use fex_core::rng::stream;
use fex_core::sampling::sample_interior;
use fex_core::symbolic::DiffSelector;
use rand::Rng;

fn problems(d: usize) -> Vec<PdeProblem> {
    vec![
        PdeProblem::poisson(d).unwrap().with_batches(&[200, 100]).unwrap(),
        PdeProblem::conservation(d).unwrap().with_batches(&[200, 100]).unwrap(),
        PdeProblem::schrodinger_with_samples(d, 10_000).unwrap().with_batches(&[200, 300]).unwrap(),
        PdeProblem::eigen(d).unwrap().with_batches(&[300, 100]).unwrap(),
        PdeProblem::eigen_simplified(d, 2.0).unwrap().with_batches(&[300]).unwrap(),
    ]
}

#[test]
fn functional_gradients_match_finite_differences() {
    let set = OperatorSet::standard();
    let mut rng = stream(21, &[]);
    for p in problems(2) {
        let t = Arc::new(TreeTemplate::with_depth(3, p.layout()).unwrap());
        let mut checked = 0;
        while checked < 15 {
            let idx: Vec<usize> = t.nodes().iter().map(|n| rng.gen_range(0..set.width(n.arity))).collect();
            let ops = OperatorSequence::from_indices(&t, &set, &idx).unwrap();
            let theta = t.init_params(&mut rng).0;
            let f = p.compile(&t, &ops).unwrap();
            let batches = p.sample(&mut rng).unwrap();
            let mut grad = vec![0.0; theta.len()];
            // exp(exp(..)) can overflow on the [-3,3] box; such draws carry no information
            let Ok(v) = f.value_and_grad(&theta, &batches, &mut grad) else { continue };
            if v.abs() > 1e8 {
                continue;
            }
            let value = |th: &[f64]| f.value(th, &batches).unwrap();
            for k in 0..theta.len() {
                let c = |h: f64| {
                    let mut a = theta.clone();
                    let mut b = theta.clone();
                    a[k] += h;
                    b[k] -= h;
                    (value(&a) - value(&b)) / (2.0 * h)
                };
                let fd = (4.0 * c(5e-5) - c(1e-4)) / 3.0;
                let tol = 1e-6 * fd.abs().max(grad[k].abs()).max(v.abs()).max(1.0);
                assert!((grad[k] - fd).abs() <= tol, "{} {:?} k={k}: {} vs {fd}", p.name(), ops, grad[k]);
            }
            checked += 1;
        }
    }
}

#[test]
fn conservation_true_solution_has_zero_residual() {
    let d = 5;
    let p = PdeProblem::conservation(d).unwrap();
    let u = p.true_solution().unwrap();
    let layout = p.layout();
    let ut = u.diff_x(DiffSelector::Partial(layout.time_index().unwrap())).unwrap();
    let ux: Vec<_> = (0..d).map(|i| u.diff_x(DiffSelector::Partial(layout.spatial_index(i))).unwrap()).collect();
    let pts = sample_interior(p.domain(), 10_000, &mut stream(4, &[])).unwrap().points;
    let t = ut.eval_batch(&pts).unwrap();
    let xs: Vec<Vec<f64>> = ux.iter().map(|e| e.eval_batch(&pts).unwrap()).collect();
    for j in 0..pts.len() {
        let r = PI * d as f64 / 4.0 * t[j] - xs.iter().map(|c| c[j]).sum::<f64>();
        assert!(r.abs() < 1e-12, "{r}");
    }
}

#[test]
fn poisson_true_solution_has_zero_loss_on_any_batch() {
    let p = PdeProblem::poisson(4).unwrap();
    let u = p.true_solution().unwrap();
    for s in 0..3 {
        let b = p.sample(&mut stream(s, &[])).unwrap();
        assert!(p.functional_value(&u, &b).unwrap().abs() < 1e-20);
    }
    let pts = PointSet::new(4, vec![0.5, -0.5, 1.0, 0.0]);
    assert!((u.eval_point(pts.row(0)).unwrap() - 0.75).abs() < 1e-15);
}
