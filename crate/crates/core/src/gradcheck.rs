//! Central-difference verification of tape gradients.

use crate::autograd::{Graph, Var};
use crate::error::{LabError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    /// `max |g_ad - g_fd| / max(1, |g_ad|, |g_fd|)` over every coordinate.
    pub max_rel_error: f64,
    pub coordinates: usize,
}

fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(LabError::dim("gradcheck", v.shape(), &[1, 1]));
    }
    let y = v.data()[0];
    if !y.is_finite() {
        return Err(LabError::Numeric(format!("objective is {y}")));
    }
    Ok(y)
}

/// Compares the tape gradient of the scalar `f` at `params` against central
/// differences with step `h`.
pub fn gradcheck<F>(f: F, params: &[Tensor], h: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(LabError::Config(format!(
            "gradcheck step {h} outside [1e-6, 1e-4]"
        )));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).is_finite() {
        return Err(LabError::Numeric("non-finite objective".into()));
    }
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad_or_zero(v)).collect();

    let mut worst = 0.0f64;
    let mut coords = 0;
    let mut probe = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for ci in 0..p.len() {
            let orig = p.data()[ci];
            probe[pi].data_mut()[ci] = orig + h;
            let up = eval(&f, &probe)?;
            probe[pi].data_mut()[ci] = orig - h;
            let down = eval(&f, &probe)?;
            probe[pi].data_mut()[ci] = orig;
            let fd = (up - down) / (2.0 * h);
            let ad = analytic[pi].data()[ci];
            let rel = (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs());
            worst = worst.max(rel);
            coords += 1;
        }
    }
    Ok(GradcheckReport {
        max_rel_error: worst,
        coordinates: coords,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let r = gradcheck(|g, v| g.mul(v[0], v[0]), &[Tensor::scalar(3.0)], 1e-5).unwrap();
        assert!(r.max_rel_error <= 1e-8, "{r:?}");
    }

    #[test]
    fn sum_of_softmax_is_flat() {
        let x = Tensor::from_rows(&[vec![0.3, -1.2, 2.0]]).unwrap();
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let s = g.softmax_rows(v).unwrap();
        let y = g.sum(s);
        g.backward(y).unwrap();
        assert!(g.grad(v).unwrap().data().iter().all(|d| d.abs() < 1e-12));
        let r = gradcheck(
            |g, v| {
                let s = g.softmax_rows(v[0])?;
                Ok(g.sum(s))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-8);
    }

    #[test]
    fn rejects_bad_step() {
        assert!(gradcheck(|g, v| Ok(g.sum(v[0])), &[Tensor::scalar(1.0)], 1e-2).is_err());
    }

    #[test]
    fn non_finite_objective_is_error() {
        let r = gradcheck(
            |g, v| Ok(g.scale(v[0], f64::INFINITY)),
            &[Tensor::scalar(1.0)],
            1e-5,
        );
        assert!(matches!(r, Err(LabError::Numeric(_))));
    }
}
