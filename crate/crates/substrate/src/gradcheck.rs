//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Graph, ParamSet, Result, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Base step; the step for a scalar `p` is `step * max(1, |p|)`.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Number of scalars checked. The subset is drawn uniformly (with
    /// replacement) over all parameter scalars using `seed`; when the
    /// parameters hold no more than `samples` scalars every one is checked.
    pub samples: usize,
    pub seed: u64,
    /// Denominator floor of the relative error
    /// `|analytic - numeric| / max(|analytic|, |numeric|, abs_floor)`.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-3,
            samples: 64,
            seed: 0,
            abs_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst scalar.
    pub worst_param: Option<(String, usize)>,
    pub checked: usize,
    pub passed: bool,
}

/// Check the tape's gradient of the scalar built by `build`.
pub fn grad_check<F>(
    params: &ParamSet<f64>,
    build: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: for<'p> Fn(&mut Graph<'p, f64>) -> Result<Var>,
{
    let value = |p: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::with_params(p);
        let loss = build(&mut g)?;
        g.value(loss).item()
    };
    let analytic = |p: &ParamSet<f64>| -> Result<ParamSet<f64>> {
        let mut g = Graph::with_params(p);
        let loss = build(&mut g)?;
        Ok(g.backward(loss)?.param_grads(p))
    };
    grad_check_with(params, value, analytic, cfg)
}

/// Compare an arbitrary analytic gradient against central differences of `value`.
pub fn grad_check_with<V, G>(
    params: &ParamSet<f64>,
    value: V,
    analytic: G,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    V: Fn(&ParamSet<f64>) -> Result<f64>,
    G: Fn(&ParamSet<f64>) -> Result<ParamSet<f64>>,
{
    let first = value(params)?;
    let second = value(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let grads = analytic(params)?;

    let sizes: Vec<usize> = params.iter().map(|(_, t)| t.numel()).collect();
    let total: usize = sizes.iter().sum();
    let picks: Vec<(usize, usize)> = if total <= cfg.samples {
        sizes
            .iter()
            .enumerate()
            .flat_map(|(p, &n)| (0..n).map(move |i| (p, i)))
            .collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        (0..cfg.samples)
            .map(|_| locate(&sizes, rng.gen_range(0..total)))
            .collect()
    };

    let mut probe = params.clone();
    let mut max_rel_err = 0.0f64;
    let mut worst_param = None;
    for &(p, i) in &picks {
        let original = probe.values_mut_at(p)[i];
        let h = cfg.step * original.abs().max(1.0);
        probe.values_mut_at(p)[i] = original + h;
        let plus = value(&probe)?;
        probe.values_mut_at(p)[i] = original - h;
        let minus = value(&probe)?;
        probe.values_mut_at(p)[i] = original;

        let numeric = (plus - minus) / (2.0 * h);
        let exact = grads.get_index(p).expect("same layout").1.data()[i];
        let denom = exact.abs().max(numeric.abs()).max(cfg.abs_floor);
        let rel = (exact - numeric).abs() / denom;
        if rel > max_rel_err || worst_param.is_none() {
            max_rel_err = max_rel_err.max(rel);
            if rel >= max_rel_err {
                let name = params.get_index(p).expect("valid index").0.to_string();
                worst_param = Some((name, i));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst_param,
        checked: picks.len(),
        passed: max_rel_err <= cfg.tol,
    })
}

fn locate(sizes: &[usize], mut flat: usize) -> (usize, usize) {
    for (p, &n) in sizes.iter().enumerate() {
        if flat < n {
            return (p, flat);
        }
        flat -= n;
    }
    unreachable!("flat index beyond parameter count")
}
