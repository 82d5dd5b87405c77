//! Central finite-difference verification of tape gradients.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::params::{ParamKind, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    pub eps: f64,
    /// Also check gradients of learnable parameters bound on the tape.
    pub check_params: bool,
    /// Added to every analytic gradient entry. Negative-control hook.
    pub corrupt: Option<f64>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            eps: 1e-5,
            check_params: true,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Where the worst coordinate lives, e.g. `input 1 [37]` or `aa.head0.w_q [3]`,
    /// with both gradient estimates.
    pub worst: String,
    pub coordinates: usize,
    /// Smallest ReLU input magnitude at the unperturbed point.
    pub relu_margin: f64,
}

fn eval<F>(f: &F, store: &ParamStore, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let root = f(&mut tape, store, &vars)?;
    Ok(tape.value(root).item())
}

/// Compares tape gradients of the scalar `f` against central differences,
/// for every input coordinate and (optionally) every learnable parameter.
pub fn gradcheck_full<F>(
    inputs: &[Tensor],
    store: &ParamStore,
    f: F,
    opts: GradcheckOptions,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var>,
{
    let mut tape = if opts.check_params {
        Tape::new()
    } else {
        Tape::inference()
    };
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone(), true)).collect();
    let root = f(&mut tape, store, &vars)?;
    tape.backward(root)?;
    let relu_margin = tape.relu_margin();

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        coordinates: 0,
        relu_margin,
    };
    let eps = opts.eps;
    let bump = opts.corrupt.unwrap_or(0.0);
    let note =
        |report: &mut GradcheckReport, analytic: f64, numeric: f64, at: &dyn Fn() -> String| {
            let e = relative_error(analytic + bump, numeric);
            report.coordinates += 1;
            if e > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = report.max_rel_error.max(e);
                report.worst = format!("{} (analytic {analytic:.6e}, numeric {numeric:.6e})", at());
            }
        };

    for (i, (x, &v)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = tape
            .grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape()));
        let mut probe = inputs.to_vec();
        for j in 0..x.len() {
            let orig = x.data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let up = eval(&f, store, &probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let down = eval(&f, store, &probe)?;
            probe[i].data_mut()[j] = orig;
            note(
                &mut report,
                analytic.data()[j],
                (up - down) / (2.0 * eps),
                &|| format!("input {i} [{j}]"),
            );
        }
    }

    if opts.check_params {
        let mut probe = store.clone();
        for (id, _) in tape.bound_params() {
            if store.kind(id) != ParamKind::Learnable {
                continue;
            }
            let value = store.get(id);
            let analytic = tape
                .param_grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(value.shape()));
            for j in 0..value.len() {
                let orig = value.data()[j];
                probe.get_mut(id).data_mut()[j] = orig + eps;
                let up = eval(&f, &probe, inputs)?;
                probe.get_mut(id).data_mut()[j] = orig - eps;
                let down = eval(&f, &probe, inputs)?;
                probe.get_mut(id).data_mut()[j] = orig;
                note(
                    &mut report,
                    analytic.data()[j],
                    (up - down) / (2.0 * eps),
                    &|| format!("{} [{j}]", store.name(id)),
                );
            }
        }
    }
    Ok(report)
}

/// Max relative error between the tape gradient of scalar `f` at `x` and
/// central differences with step `eps`.
pub fn gradcheck<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let store = ParamStore::new();
    let report = gradcheck_full(
        core::slice::from_ref(x),
        &store,
        |tape, _, vars| f(tape, vars[0]),
        GradcheckOptions {
            eps,
            check_params: false,
            corrupt: None,
        },
    )?;
    Ok(report.max_rel_error)
}

/// Weights used to turn a tensor-valued op into a scalar for checking; a
/// plain sum would hide errors in ops whose outputs have constant sums.
pub fn probe_weights(shape: Shape, seed: u64) -> Tensor {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    Tensor::uniform(shape, -1.0, 1.0, &mut rng)
}
