use crate::error::{Error, Result};

use super::{Graph, Tensor, Var};

/// Finite-difference settings. Always run at 64-bit.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Lower bound of the relative-error denominator, so entries whose true
    /// gradient is zero are compared absolutely against this scale.
    pub floor: f64,
    /// Central differences cannot resolve gradients below roughly
    /// `eps·|f|/h`. The denominator floor is raised to
    /// `roundoff_ulps·eps·|f(x)|/(h·tol)` so such entries pass iff their
    /// absolute error is within `roundoff_ulps` units of that resolution.
    pub roundoff_ulps: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            roundoff_ulps: 8.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub n_checked: usize,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &GradCheckReport) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.n_checked += other.n_checked;
        self.passed &= other.passed;
    }
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor<f64>], track: bool) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_grad(track)))
        .collect();
    let out = f(&mut g, &vars)?;
    if g.data(out).len() != 1 {
        return Err(Error::contract(format!(
            "gradient check needs a scalar-valued function, got shape {:?}",
            g.shape(out)
        )));
    }
    Ok((g, vars, out))
}

/// Compare reverse-mode gradients of a scalar function of several tensors
/// against central finite differences.
pub fn gradient_check_many<F>(
    f: F,
    inputs: &[Tensor<f64>],
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (g, vars, out) = eval_scalar(&f, inputs, true)?;
    let f0 = g.data(out)[0].abs();
    let grads = g.backward(out)?;
    let resolution = cfg.roundoff_ulps * f64::EPSILON * f0 / cfg.h;
    let floor = cfg.floor.max(resolution / cfg.tol);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        n_checked: 0,
        passed: true,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for (j, &a) in analytic.iter().enumerate() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + cfg.h;
            let (gp, _, op) = eval_scalar(&f, &probe, false)?;
            let fp = gp.data(op)[0];
            probe[i].data_mut()[j] = x0 - cfg.h;
            let (gm, _, om) = eval_scalar(&f, &probe, false)?;
            let fm = gm.data(om)[0];
            probe[i].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * cfg.h);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(floor);
            if !rel.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient comparison at input {i}, entry {j}"
                )));
            }
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.n_checked += 1;
        }
    }
    report.passed = report.max_rel_err <= cfg.tol;
    Ok(report)
}

/// Single-input form of [`gradient_check_many`].
pub fn gradient_check<F>(f: F, x: &Tensor<f64>, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    gradient_check_many(|g, v| f(g, v[0]), std::slice::from_ref(x), cfg)
}
