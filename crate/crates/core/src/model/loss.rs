use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::TARGET_PER_JOINT;
use crate::diffcore::{Real, Tape, Var};
use crate::error::{Error, Result};
use crate::kinematics::JOINTS;

/// Fixed weights `(θ, rv, p, fv)` found by grid search.
pub const MANUAL_WEIGHTS: [f64; 4] = [1.0, 30.0, 0.5, 0.1];

/// How the per-task losses are combined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
#[derive(Default)]
pub enum LossWeighting {
    /// `Σ exp(-s_i) L_i + s_i` with trainable log-variances `s_i`.
    #[default]
    Homoscedastic,
    /// `Σ λ_i L_i`.
    Manual { weights: [f64; 4] },
}

impl LossWeighting {
    pub fn manual() -> Self {
        LossWeighting::Manual {
            weights: MANUAL_WEIGHTS,
        }
    }
}

/// Splits `(B*T) x 198` targets into `(B*T) x 132` rotations and
/// `(B*T) x 66` positions, both joint-major.
pub fn split_targets<S: Real>(t: &Array2<S>) -> (Array2<S>, Array2<S>) {
    let rows = t.nrows();
    let mut rot = Array2::zeros((rows, JOINTS * 6));
    let mut pos = Array2::zeros((rows, JOINTS * 3));
    for j in 0..JOINTS {
        let o = j * TARGET_PER_JOINT;
        for c in 0..6 {
            rot.column_mut(j * 6 + c).assign(&t.column(o + c));
        }
        for c in 0..3 {
            pos.column_mut(j * 3 + c).assign(&t.column(o + 6 + c));
        }
    }
    (rot, pos)
}

/// Inverse of [`split_targets`].
pub fn join_targets<S: Real>(rot: &Array2<S>, pos: &Array2<S>) -> Array2<S> {
    let rows = rot.nrows();
    let mut t = Array2::zeros((rows, JOINTS * TARGET_PER_JOINT));
    for j in 0..JOINTS {
        let o = j * TARGET_PER_JOINT;
        for c in 0..6 {
            t.column_mut(o + c).assign(&rot.column(j * 6 + c));
        }
        for c in 0..3 {
            t.column_mut(o + 6 + c).assign(&pos.column(j * 3 + c));
        }
    }
    t
}

fn windows_of(tape: &Tape<'_, impl Real>, v: Var, window: usize) -> Result<usize> {
    let rows = tape.shape(v).0;
    if window == 0 || !rows.is_multiple_of(window) || rows == 0 {
        return Err(Error::Shape(format!(
            "{rows} rows is not a whole number of {window}-frame windows"
        )));
    }
    Ok(rows / window)
}

fn l1_mean<S: Real>(tape: &mut Tape<'_, S>, pred: Var, gt: Var, per: f64) -> Result<Var> {
    let d = tape.sub(pred, gt)?;
    let s = tape.sum_abs(d);
    Ok(tape.scale(s, S::of(1.0 / per)))
}

/// Rotation loss: L1 summed over joints and 6D components, averaged over
/// frames (and windows).
pub fn loss_theta<S: Real>(tape: &mut Tape<'_, S>, pred: Var, gt: Var, window: usize) -> Result<Var> {
    let b = windows_of(tape, pred, window)?;
    l1_mean(tape, pred, gt, (b * window) as f64)
}

/// Rotational velocity loss over the `T-1` frame differences.
pub fn loss_rot_velocity<S: Real>(tape: &mut Tape<'_, S>, pred: Var, gt: Var, window: usize) -> Result<Var> {
    if window < 2 {
        return Err(Error::InvalidInput(
            "velocity loss needs windows of at least 2 frames".into(),
        ));
    }
    let b = windows_of(tape, pred, window)?;
    let dp = tape.time_diff(pred, window)?;
    let dg = tape.time_diff(gt, window)?;
    l1_mean(tape, dp, dg, (b * (window - 1)) as f64)
}

/// Position loss: L1 over the 3 coordinates, summed over joints, averaged
/// over frames.
pub fn loss_position<S: Real>(tape: &mut Tape<'_, S>, pred: Var, gt: Var, window: usize) -> Result<Var> {
    loss_theta(tape, pred, gt, window)
}

/// Positional velocity loss restricted to the listed joints.
pub fn loss_pos_velocity<S: Real>(
    tape: &mut Tape<'_, S>,
    pred: Var,
    gt: Var,
    joints: &[usize],
    window: usize,
) -> Result<Var> {
    let cols: Vec<usize> = joints.iter().flat_map(|&j| (0..3).map(move |c| j * 3 + c)).collect();
    let p = tape.select_cols(pred, cols.clone())?;
    let g = tape.select_cols(gt, cols)?;
    loss_rot_velocity(tape, p, g, window)
}

/// Combines task losses. `log_vars` must hold one `1 x 1` variable per loss
/// in homoscedastic mode and is ignored otherwise.
pub fn total_loss<S: Real>(
    tape: &mut Tape<'_, S>,
    losses: &[Var],
    weighting: LossWeighting,
    log_vars: &[Var],
) -> Result<Var> {
    if losses.is_empty() {
        return Err(Error::InvalidInput("no losses to combine".into()));
    }
    let mut terms = Vec::with_capacity(losses.len());
    match weighting {
        LossWeighting::Homoscedastic => {
            if log_vars.len() != losses.len() {
                return Err(Error::Shape(format!(
                    "{} log-variances for {} losses",
                    log_vars.len(),
                    losses.len()
                )));
            }
            for (&l, &s) in losses.iter().zip(log_vars) {
                let neg = tape.scale(s, S::of(-1.0));
                let w = tape.exp(neg);
                let wl = tape.mul(w, l)?;
                terms.push(tape.add(wl, s)?);
            }
        }
        LossWeighting::Manual { weights } => {
            if losses.len() > weights.len() {
                return Err(Error::Shape(format!(
                    "{} losses for {} weights",
                    losses.len(),
                    weights.len()
                )));
            }
            for (&l, &w) in losses.iter().zip(weights.iter()) {
                terms.push(tape.scale(l, S::of(w)));
            }
        }
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::{check_gradients, GradCheck};
    use crate::diffcore::ParamStore;
    use crate::kinematics::Skeleton;
    use ndarray::{array, s};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    fn eval(f: impl FnOnce(&mut Tape<'_, f64>) -> Result<Var>) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape).unwrap();
        tape.scalar(v)
    }

    #[test]
    fn theta_loss_values() {
        let gt = Array2::zeros((1, 132));
        let ones = Array2::ones((1, 132));
        let v = eval(|t| {
            let p = t.constant(ones.clone());
            let g = t.constant(gt.clone());
            loss_theta(t, p, g, 1)
        });
        assert_eq!(v, 132.0);
        let a = rand(6, 132, 1);
        let b = rand(6, 132, 2);
        let same = eval(|t| {
            let p = t.constant(a.clone());
            loss_theta(t, p, p, 6)
        });
        assert_eq!(same, 0.0);
        let perm = [3, 0, 5, 1, 4, 2];
        let pa = Array2::from_shape_fn((6, 132), |(r, c)| a[[perm[r], c]]);
        let pb = Array2::from_shape_fn((6, 132), |(r, c)| b[[perm[r], c]]);
        let v1 = eval(|t| {
            let p = t.constant(a.clone());
            let g = t.constant(b.clone());
            loss_theta(t, p, g, 6)
        });
        let v2 = eval(|t| {
            let p = t.constant(pa.clone());
            let g = t.constant(pb.clone());
            loss_theta(t, p, g, 6)
        });
        assert!((v1 - v2).abs() < 1e-12);
    }

    #[test]
    fn velocity_loss_values() {
        let gt = rand(5, 132, 3);
        let shifted = &gt + 0.7;
        let v = eval(|t| {
            let p = t.constant(shifted.clone());
            let g = t.constant(gt.clone());
            loss_rot_velocity(t, p, g, 5)
        });
        assert!(v.abs() < 1e-12);

        // Two frames, one joint moved by (0.1, -0.2, 0, 0, 0, 0.3) in the
        // prediction only: |Δ| summed = 0.6 over T-1 = 1 difference.
        let g = Array2::zeros((2, 132));
        let mut p = Array2::zeros((2, 132));
        p.slice_mut(s![1, 6..12]).assign(&array![0.1, -0.2, 0.0, 0.0, 0.0, 0.3]);
        let v = eval(|t| {
            let pv = t.constant(p.clone());
            let gv = t.constant(g.clone());
            loss_rot_velocity(t, pv, gv, 2)
        });
        assert!((v - 0.6).abs() < 1e-12);
    }

    #[test]
    fn velocity_loss_rejects_single_frame() {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(Array2::zeros((3, 132)));
        assert!(loss_rot_velocity(&mut tape, v, v, 1).is_err());
    }

    #[test]
    fn position_losses() {
        let gt = Array2::zeros((1, 66));
        let mut p = gt.clone();
        p.slice_mut(s![0, 9..12]).fill(1.0);
        let v = eval(|t| {
            let a = t.constant(p.clone());
            let b = t.constant(gt.clone());
            loss_position(t, a, b, 1)
        });
        assert_eq!(v, 3.0);

        let skel = Skeleton::default();
        let g = rand(4, 66, 5);
        let mut upper_err = g.clone();
        for &j in skel.upper() {
            for c in 0..3 {
                for r in 0..4 {
                    upper_err[[r, j * 3 + c]] += (r as f64) * 0.3;
                }
            }
        }
        let v = eval(|t| {
            let a = t.constant(upper_err.clone());
            let b = t.constant(g.clone());
            loss_pos_velocity(t, a, b, skel.lower(), 4)
        });
        assert_eq!(v, 0.0);

        // Lower joint 4 moves 0.1 in x between the two frames in the
        // prediction only.
        let g = Array2::zeros((2, 66));
        let mut p = g.clone();
        p[[1, 12]] = 0.1;
        let v = eval(|t| {
            let a = t.constant(p.clone());
            let b = t.constant(g.clone());
            loss_pos_velocity(t, a, b, skel.lower(), 2)
        });
        assert!((v - 0.1).abs() < 1e-12);
    }

    #[test]
    fn weighting_modes() {
        let ls = [0.7, 0.02, 1.3, 0.4];
        let total = |w: LossWeighting, s: [f64; 4]| {
            eval(|t| {
                let l: Vec<Var> = ls.iter().map(|&v| t.constant(array![[v]])).collect();
                let sv: Vec<Var> = s.iter().map(|&v| t.constant(array![[v]])).collect();
                total_loss(t, &l, w, &sv)
            })
        };
        let plain: f64 = ls.iter().sum();
        assert!((total(LossWeighting::Homoscedastic, [0.0; 4]) - plain).abs() < 1e-12);
        let manual = 1.0 * ls[0] + 30.0 * ls[1] + 0.5 * ls[2] + 0.1 * ls[3];
        assert_eq!(total(LossWeighting::manual(), [9.0; 4]), manual);
        let s: [f64; 4] = [0.3, -0.5, 1.0, 0.0];
        let expected: f64 = ls.iter().zip(&s).map(|(l, s)| (-s).exp() * l + s).sum();
        assert!((total(LossWeighting::Homoscedastic, s) - expected).abs() < 1e-12);
    }

    #[test]
    fn log_variance_gradient() {
        let ls = [0.7, 0.02, 1.3, 0.4];
        let mut store = ParamStore::<f64>::new();
        let ids: Vec<_> = [0.3, -0.5, 1.0, 0.0]
            .iter()
            .enumerate()
            .map(|(i, &v)| store.add(format!("s{i}"), array![[v]]))
            .collect();
        let report = check_gradients(&store, GradCheck::default(), |tape, st| {
            let l: Vec<Var> = ls.iter().map(|&v| tape.constant(array![[v]])).collect();
            let s: Vec<Var> = ids.iter().map(|&id| tape.param(st, id)).collect();
            total_loss(tape, &l, LossWeighting::Homoscedastic, &s)
        })
        .unwrap();
        assert!(report.passed, "{report:?}");

        let mut tape = Tape::new();
        let l: Vec<Var> = ls.iter().map(|&v| tape.constant(array![[v]])).collect();
        let s: Vec<Var> = ids.iter().map(|&id| tape.param(&store, id)).collect();
        let tot = total_loss(&mut tape, &l, LossWeighting::Homoscedastic, &s).unwrap();
        let g = tape.backward(tot).unwrap();
        for (i, &id) in ids.iter().enumerate() {
            let si = store.value(id)[[0, 0]];
            let expected = -(-si).exp() * ls[i] + 1.0;
            assert!((g.get(id).unwrap()[[0, 0]] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn split_and_join_are_inverse() {
        let t = rand(3, 198, 9);
        let (r, p) = split_targets(&t);
        assert_eq!(r[[1, 6]], t[[1, 9]]);
        assert_eq!(p[[2, 3]], t[[2, 15]]);
        assert_eq!(join_targets(&r, &p), t);
    }
}
