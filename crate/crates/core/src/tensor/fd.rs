use super::{GradMap, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Central-difference gradient estimate `(f(θ+ε) − f(θ−ε)) / 2ε`, one
/// coordinate at a time. Used as a test oracle for the tape.
pub fn finite_diff_grad<F>(loss_fn: F, params: &ParamSet, eps: f64) -> Result<GradMap>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite difference step must be positive"));
    }
    let mut out = ParamSet::new();
    for (name, t) in params.iter() {
        let mut g = Vec::with_capacity(t.len());
        for i in 0..t.len() {
            let probe = |delta: f64| -> Result<f64> {
                let mut data = t.to_vec();
                data[i] += delta;
                let mut p = params.clone();
                p.replace(name, Tensor::new(t.shape().to_vec(), data)?)?;
                let v = loss_fn(&p)?;
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("finite difference probe of `{name}`[{i}]")));
                }
                Ok(v)
            };
            g.push((probe(eps)? - probe(-eps)?) / (2.0 * eps));
        }
        out.insert(name, Tensor::new(t.shape().to_vec(), g)?)?;
    }
    Ok(out)
}

/// `|a − b| / max(|a|, |b|, floor)`; the floor keeps near-zero entries from
/// dominating when both sides are at rounding level.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
