//! Central finite-difference check of tape gradients.

use super::{params::Bound, ParamStore, Result, Tape, Var};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub params: Vec<ParamCheck>,
    /// Set when a gradient or loss evaluation was not finite.
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.failure.is_none() && self.max_rel_err <= tol
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

/// Loss value and branch signature.
fn eval_loss<F>(params: &ParamStore, f: &F) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = f(&mut tape, &bound)?;
    Ok((tape.value(loss).item(), tape.branch_signature()))
}

/// Compares the tape gradient of every parameter entry against central
/// differences with step [`FD_STEP`]. `f` must be deterministic.
pub fn grad_check<F>(params: &ParamStore, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    check(params, Difference::Central(FD_STEP), f)
}

/// [`grad_check`] with each numeric derivative refined by Ridders'
/// extrapolation over central differences. Entries whose gradient is tiny
/// next to the loss are otherwise swamped by rounding in the loss itself.
///
/// The first step is the largest of `initial_step / 1.4^k` whose probes
/// stay on the smooth piece of the unperturbed point (same relu signs and
/// max winners); extrapolation then shrinks from there. Entries where no
/// such step exists fall back to a plain central difference at
/// [`FD_STEP`].
pub fn grad_check_extrapolated<F>(params: &ParamStore, initial_step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    check(params, Difference::Ridders(initial_step), f)
}

#[derive(Clone, Copy)]
enum Difference {
    Central(f64),
    Ridders(f64),
}

const RIDDERS_SHRINK: f64 = 1.4;
const RIDDERS_ROUNDS: usize = 10;

/// Ridders' method as in Numerical Recipes `dfridr`. `central(h)` is the
/// central difference at step `h`, or `None` when the probes leave the
/// smooth piece.
fn ridders<C>(h0: f64, mut central: C) -> Result<Option<f64>>
where
    C: FnMut(f64) -> Result<Option<f64>>,
{
    let mut h = h0;
    let first = loop {
        if h < FD_STEP {
            return Ok(None);
        }
        if let Some(d) = central(h)? {
            break d;
        }
        h /= RIDDERS_SHRINK;
    };
    let c2 = RIDDERS_SHRINK * RIDDERS_SHRINK;
    let mut table = vec![vec![0.0; RIDDERS_ROUNDS]; RIDDERS_ROUNDS];
    table[0][0] = first;
    let mut best = first;
    let mut err = f64::INFINITY;
    for i in 1..RIDDERS_ROUNDS {
        h /= RIDDERS_SHRINK;
        let Some(d) = central(h)? else { break };
        table[0][i] = d;
        let mut fac = c2;
        for j in 1..=i {
            table[j][i] = (table[j - 1][i] * fac - table[j - 1][i - 1]) / (fac - 1.0);
            fac *= c2;
            let e = f64::max(
                (table[j][i] - table[j - 1][i]).abs(),
                (table[j][i] - table[j - 1][i - 1]).abs(),
            );
            if e <= err {
                err = e;
                best = table[j][i];
            }
        }
        if (table[i][i] - table[i - 1][i - 1]).abs() >= 2.0 * err {
            break;
        }
    }
    Ok(Some(best))
}

fn check<F>(params: &ParamStore, method: Difference, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut report = GradCheckReport::default();
    if params.is_empty() {
        return Ok(report);
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = f(&mut tape, &bound)?;
    let grads = tape.backward(loss)?;
    let analytic = bound.grads(&tape, &grads);
    let base = tape.branch_signature();

    let mut probe = params.clone();
    for id in params.ids() {
        let name = params.name(id).to_string();
        let ga = &analytic[id.index()];
        if let Some(i) = ga.data().iter().position(|g| !g.is_finite()) {
            report.failure = Some(format!("non-finite analytic gradient in {name}[{i}]"));
            return Ok(report);
        }
        let mut check = ParamCheck {
            name: name.clone(),
            ..ParamCheck::default()
        };
        for i in 0..ga.data().len() {
            let orig = params.get(id).data()[i];
            let mut central = |h: f64| -> Result<(f64, bool)> {
                probe.get_mut(id).data_mut()[i] = orig + h;
                let (plus, sp) = eval_loss(&probe, &f)?;
                probe.get_mut(id).data_mut()[i] = orig - h;
                let (minus, sm) = eval_loss(&probe, &f)?;
                probe.get_mut(id).data_mut()[i] = orig;
                Ok(((plus - minus) / (2.0 * h), sp == base && sm == base))
            };
            let numeric = match method {
                Difference::Central(h) => central(h)?.0,
                Difference::Ridders(h0) => match ridders(h0, |h| central(h).map(|(d, same)| same.then_some(d)))? {
                    Some(d) => d,
                    None => central(FD_STEP)?.0,
                },
            };
            if !numeric.is_finite() {
                report.failure = Some(format!("non-finite numeric gradient in {name}[{i}]"));
                return Ok(report);
            }
            let err = relative_error(ga.data()[i], numeric);
            if err > check.max_rel_err || i == 0 {
                check.max_rel_err = err;
                check.worst_index = i;
                check.analytic = ga.data()[i];
                check.numeric = numeric;
            }
        }
        report.max_rel_err = report.max_rel_err.max(check.max_rel_err);
        report.params.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_layer_passes_tightly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamStore::new();
        let w = params.insert_glorot("w", 4, 3, &mut rng);
        let b = params.insert_glorot("b", 1, 3, &mut rng);
        let x = Tensor::new(2, 4, vec![0.3, -0.2, 0.9, 0.1, -0.5, 0.4, 0.2, -0.8]).unwrap();
        let target = Tensor::new(2, 3, vec![0.1, 0.2, 0.3, -0.1, -0.2, -0.3]).unwrap();
        let report = grad_check(&params, |tape, bound| {
            let xv = tape.constant(x.clone());
            let h = tape.matmul(xv, bound[w])?;
            let y = tape.add_row(h, bound[b])?;
            tape.mse(y, &target)
        })
        .unwrap();
        assert_eq!(report.params.len(), 2);
        assert!(report.max_rel_err <= 1e-6, "{report:?}");
    }

    #[test]
    fn no_parameters_gives_empty_report() {
        let params = ParamStore::new();
        let report = grad_check(&params, |tape, _| Ok(tape.constant(Tensor::scalar(1.0)))).unwrap();
        assert!(report.params.is_empty());
        assert_eq!(report.max_rel_err, 0.0);
        assert!(report.passed(1e-4));
    }

    #[test]
    fn non_finite_gradient_is_reported_by_name() {
        let mut params = ParamStore::new();
        params.insert("bad", Tensor::scalar(1.0));
        let report = grad_check(&params, |tape, bound| {
            let inf = tape.constant(Tensor::scalar(f64::INFINITY));
            let v = bound.vars()[0];
            let y = tape.mul(v, inf)?;
            Ok(tape.sum(y))
        })
        .unwrap();
        let failure = report.failure.expect("failure recorded");
        assert!(failure.contains("bad"), "{failure}");
    }

    #[test]
    fn extrapolation_recovers_tiny_gradients() {
        // A large constant next to a tiny slope: plain differences lose the
        // slope in the loss rounding, extrapolation keeps it.
        let mut params = ParamStore::new();
        let w = params.insert("w", Tensor::new(1, 3, vec![0.3, -0.7, 1.1]).unwrap());
        let f = |tape: &mut Tape, b: &Bound| {
            let x = tape.mul(b[w], b[w])?;
            let y = tape.scale(x, 1e-7);
            let s = tape.sum(y);
            let c = tape.constant(Tensor::scalar(7.0));
            tape.add(s, c)
        };
        let plain = grad_check(&params, f).unwrap();
        let refined = grad_check_extrapolated(&params, 1e-2, f).unwrap();
        assert!(refined.max_rel_err < 1e-6, "{refined:?}");
        assert!(refined.max_rel_err < plain.max_rel_err);
    }

    #[test]
    fn extrapolation_stays_off_kinks() {
        // relu kink 1e-3 away from the probe point.
        let mut params = ParamStore::new();
        let w = params.insert("w", Tensor::new(1, 2, vec![1e-3, -2e-3]).unwrap());
        let f = |tape: &mut Tape, b: &Bound| {
            let sq = tape.mul(b[w], b[w])?;
            let r = tape.relu(b[w]);
            let y = tape.add(sq, r)?;
            Ok(tape.sum(y))
        };
        let report = grad_check_extrapolated(&params, 1e-2, f).unwrap();
        assert!(report.max_rel_err < 1e-9, "{report:?}");
    }

    #[test]
    fn branch_signature_tracks_relu_signs() {
        let sig = |v: f64| {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::scalar(v));
            tape.relu(x);
            tape.branch_signature()
        };
        assert_eq!(sig(0.5), sig(2.0));
        assert_ne!(sig(0.5), sig(-0.5));
    }
}
