//! Central finite-difference verification of tape gradients (f64 only).

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub step: f64,
    pub rel_tol: f64,
    /// Denominator floor so near-zero gradients are compared absolutely.
    pub abs_floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-6,
            rel_tol: 1e-4,
            abs_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    /// Coordinates whose step straddled a kink (piecewise check only).
    pub kinks: usize,
    pub passed: bool,
}

/// Compares the analytic gradient of `loss` with
/// `(f(x + h) - f(x - h)) / 2h` for every scalar of every parameter.
pub fn check_gradients<F>(store: &ParamStore<f64>, cfg: GradCheck, loss: F) -> Result<GradReport>
where
    F: for<'s> Fn(&mut Tape<'s, f64>, &'s ParamStore<f64>) -> Result<Var>,
{
    check(store, cfg, false, loss)
}

/// Like [`check_gradients`] for losses with kinks such as `|x|`.
///
/// A coordinate that fails the central test is retried with steps `h/10`,
/// `h/100` and `h/1000`. If one of them agrees, the original step straddled
/// a kink and the coordinate is counted in `kinks`; otherwise it fails.
pub fn check_piecewise_gradients<F>(store: &ParamStore<f64>, cfg: GradCheck, loss: F) -> Result<GradReport>
where
    F: for<'s> Fn(&mut Tape<'s, f64>, &'s ParamStore<f64>) -> Result<Var>,
{
    check(store, cfg, true, loss)
}

fn check<F>(store: &ParamStore<f64>, cfg: GradCheck, piecewise: bool, loss: F) -> Result<GradReport>
where
    F: for<'s> Fn(&mut Tape<'s, f64>, &'s ParamStore<f64>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let l = loss(&mut tape, store)?;
        tape.backward(l)?
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let l = loss(&mut tape, s)?;
        Ok(tape.scalar(l))
    };

    let mut probe = store.clone();
    let mut report = GradReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
        kinks: 0,
        passed: true,
    };
    let base = if piecewise { eval(store)? } else { 0.0 };
    for (id, p) in store.iter() {
        let zero = ndarray::Array2::zeros(p.value.raw_dim());
        let g = analytic.get(id).unwrap_or(&zero);
        for k in 0..p.value.len() {
            let orig = p.value.as_slice().expect("standard layout")[k];
            probe.value_mut(id).as_slice_mut().expect("standard layout")[k] = orig + cfg.step;
            let up = eval(&probe)?;
            probe.value_mut(id).as_slice_mut().expect("standard layout")[k] = orig - cfg.step;
            let down = eval(&probe)?;
            probe.value_mut(id).as_slice_mut().expect("standard layout")[k] = orig;

            let numeric = (up - down) / (2.0 * cfg.step);
            let a = g.as_slice().expect("standard layout")[k];
            let denom = a.abs().max(numeric.abs()).max(cfg.abs_floor);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if piecewise && rel >= cfg.rel_tol {
                // A kink at distance δ from x spoils every stencil wider than
                // δ; shrinking the step moves it outside. The tolerance grows
                // only by the round-off bound of the smaller step.
                let mut refined = false;
                for div in [10.0, 100.0, 1000.0] {
                    let h = cfg.step / div;
                    let mut at = |d: f64| -> Result<f64> {
                        probe.value_mut(id).as_slice_mut().expect("standard layout")[k] = orig + d;
                        let v = eval(&probe);
                        probe.value_mut(id).as_slice_mut().expect("standard layout")[k] = orig;
                        v
                    };
                    let central = (at(h)? - at(-h)?) / (2.0 * h);
                    let roundoff = 4.0 * f64::EPSILON * base.abs().max(1.0) / h;
                    let tol = cfg.rel_tol * a.abs().max(central.abs()).max(cfg.abs_floor) + roundoff;
                    if (a - central).abs() <= tol {
                        refined = true;
                        break;
                    }
                }
                if refined {
                    report.kinks += 1;
                    continue;
                }
            }
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((p.name.clone(), k, a, numeric));
            }
        }
    }
    report.passed = report.max_rel_err < cfg.rel_tol;
    Ok(report)
}
