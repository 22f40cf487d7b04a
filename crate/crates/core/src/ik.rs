//! L-BFGS and inverse-kinematics refinement of predicted rotations toward
//! predicted joint positions.
//!
//! Each frame is solved independently over local 6D rotations plus a root
//! translation; the objective is the summed squared distance between
//! forward-kinematics positions and the targets, differentiated on the tape.

use std::collections::VecDeque;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::kinematics::{
    global_to_local, matrix_to_sixd, positions_from_global, sixd_to_matrix, Rot6D, RotMatrix, Skeleton, Vec3, JOINTS,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LbfgsConfig {
    /// Stored curvature pairs.
    pub memory: usize,
    pub max_iters: usize,
    /// Armijo sufficient-decrease constant.
    pub c1: f64,
    /// Step shrink factor of the backtracking line search.
    pub shrink: f64,
    /// Stop once `‖∇f‖` falls below this.
    pub gtol: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            memory: 10,
            max_iters: 15,
            c1: 1e-4,
            shrink: 0.5,
            gtol: 1e-8,
            max_backtracks: 40,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.memory == 0 || self.max_iters == 0 {
            return Err(Error::Config("L-BFGS memory and max_iters must be at least 1".into()));
        }
        if !(self.c1 > 0.0 && self.c1 < 1.0 && self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::Config("L-BFGS needs c1 and shrink in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    /// Accepted steps.
    pub iters: usize,
    /// Objective after each accepted step, starting with `f(x0)`.
    pub history: Vec<f64>,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn evaluate<F>(f: &mut F, x: &[f64]) -> Result<(f64, Vec<f64>)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (v, g) = f(x)?;
    if g.len() != x.len() {
        return Err(Error::Optimizer(format!(
            "gradient has {} entries for {} variables",
            g.len(),
            x.len()
        )));
    }
    if !v.is_finite() || g.iter().any(|g| !g.is_finite()) {
        return Err(Error::Optimizer(format!("non-finite objective {v} or gradient")));
    }
    Ok((v, g))
}

/// Minimises `f` from `x0` with two-loop-recursion L-BFGS and a
/// backtracking Armijo line search. Accepted steps never increase `f`.
pub fn lbfgs_minimize<F>(mut f: F, x0: &[f64], cfg: &LbfgsConfig) -> Result<LbfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    cfg.validate()?;
    let mut x = x0.to_vec();
    let (mut fx, mut g) = evaluate(&mut f, &x)?;
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut history = vec![fx];
    let mut iters = 0;
    let mut converged = norm(&g) <= cfg.gtol;

    while !converged && iters < cfg.max_iters {
        // Two-loop recursion: d = -H g.
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(q, y)| *q -= a * y);
            alphas.push(a);
        }
        if let Some((s, y, _)) = pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|q| *q *= gamma);
        }
        for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(q, s)| *q += (a - b) * s);
        }
        let mut d: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &d);
        if slope >= 0.0 {
            // Lost descent; restart from steepest descent.
            pairs.clear();
            d = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=cfg.max_backtracks {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(x, d)| x + step * d).collect();
            let (fn_, gn) = evaluate(&mut f, &xn)?;
            if fn_ <= fx + cfg.c1 * step * slope {
                accepted = Some((xn, fn_, gn));
                break;
            }
            step *= cfg.shrink;
        }
        let Some((xn, fn_, gn)) = accepted else {
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
            if pairs.len() == cfg.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        } else {
            // Armijo alone does not guarantee curvature; a stale history
            // then keeps proposing the same poorly scaled step.
            pairs.clear();
        }
        x = xn;
        fx = fn_;
        g = gn;
        iters += 1;
        history.push(fx);
        converged = norm(&g) <= cfg.gtol;
    }
    Ok(LbfgsResult {
        x,
        f: fx,
        iters,
        history,
        converged,
    })
}

/// Decision variables of one frame: 22 local 6D rotations then the root.
pub const IK_VARS: usize = JOINTS * 6 + 3;

/// `Σ_i ‖FK(x)_i − target_i‖²` and its gradient with respect to `x`.
pub fn ik_objective(skel: &Skeleton, target: &[Vec3], x: &[f64]) -> Result<(f64, Vec<f64>)> {
    let n = skel.joint_count();
    if x.len() != n * 6 + 3 || target.len() != n {
        return Err(Error::Shape(format!(
            "IK with {} variables and {} targets for {n} joints",
            x.len(),
            target.len()
        )));
    }
    let mut store = ParamStore::<f64>::new();
    let id = store.add(
        "x",
        Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row vector"),
    );
    let mut tape = Tape::new();
    let xv = tape.param(&store, id);
    let root = tape.select_cols(xv, (n * 6..n * 6 + 3).collect())?;
    let root = tape.reshape(root, (3, 1))?;
    let mut rot: Vec<Var> = Vec::with_capacity(n);
    let mut pos: Vec<Var> = Vec::with_capacity(n);
    let mut loss: Option<Var> = None;
    for i in 0..n {
        let six = tape.select_cols(xv, (i * 6..i * 6 + 6).collect())?;
        let local = tape.sixd_to_matrix(six)?;
        let (g, p) = match skel.parent(i) {
            None => (local, root),
            Some(pa) => {
                let o = skel.offset(i);
                let off = tape.constant(Array2::from_shape_vec((3, 1), vec![o.x, o.y, o.z]).expect("column"));
                let step = tape.matmul(rot[pa], off)?;
                (tape.matmul(rot[pa], local)?, tape.add(pos[pa], step)?)
            }
        };
        rot.push(g);
        pos.push(p);
        let t = target[i];
        let tv = tape.constant(Array2::from_shape_vec((3, 1), vec![t.x, t.y, t.z]).expect("column"));
        let diff = tape.sub(p, tv)?;
        let sq = tape.sum_sq(diff);
        loss = Some(match loss {
            None => sq,
            Some(l) => tape.add(l, sq)?,
        });
    }
    let loss = loss.ok_or_else(|| Error::InvalidInput("empty skeleton".into()))?;
    let value = tape.scalar(loss);
    let grads = tape.backward(loss)?;
    let grad = grads
        .get(id)
        .map(|g| g.iter().copied().collect())
        .unwrap_or_else(|| vec![0.0; x.len()]);
    Ok((value, grad))
}

/// Refined pose of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct IkFrame {
    pub global_rot: Vec<RotMatrix>,
    pub root: Vec3,
    pub initial: f64,
    pub objective: f64,
    pub iters: usize,
    /// The solve failed and the initial pose was kept.
    pub fallback: bool,
}

fn pack(skel: &Skeleton, global_rot: &[RotMatrix], root: &Vec3) -> Vec<f64> {
    let mut x = Vec::with_capacity(IK_VARS);
    for r in global_to_local(skel, global_rot) {
        x.extend_from_slice(&matrix_to_sixd(&r).0);
    }
    x.extend_from_slice(root.as_slice());
    x
}

fn unpack(skel: &Skeleton, x: &[f64]) -> Result<(Vec<RotMatrix>, Vec3)> {
    let n = skel.joint_count();
    let mut global: Vec<RotMatrix> = Vec::with_capacity(n);
    for i in 0..n {
        let local = sixd_to_matrix(&Rot6D::from_slice(&x[i * 6..i * 6 + 6]))?;
        global.push(match skel.parent(i) {
            None => local,
            Some(p) => global[p].mul(&local),
        });
    }
    Ok((global, Vec3::new(x[n * 6], x[n * 6 + 1], x[n * 6 + 2])))
}

/// Refines one frame's global rotations toward `target` positions. The
/// root starts at the root target.
pub fn ik_refine_frame(skel: &Skeleton, global_rot: &[RotMatrix], target: &[Vec3], cfg: &LbfgsConfig) -> IkFrame {
    let n = skel.joint_count();
    let root = target.first().copied().unwrap_or_else(Vec3::zeros);
    let keep = |initial: f64| IkFrame {
        global_rot: global_rot.to_vec(),
        root,
        initial,
        objective: initial,
        iters: 0,
        fallback: true,
    };
    if global_rot.len() != n || target.len() != n {
        return keep(f64::NAN);
    }
    let x0 = pack(skel, global_rot, &root);
    let initial = match ik_objective(skel, target, &x0) {
        Ok((v, _)) => v,
        Err(_) => return keep(f64::NAN),
    };
    let solved = lbfgs_minimize(|x| ik_objective(skel, target, x), &x0, cfg)
        .and_then(|r| unpack(skel, &r.x).map(|(rot, root)| (rot, root, r.f, r.iters)));
    match solved {
        Ok((rot, root, f, iters)) if f <= initial => IkFrame {
            global_rot: rot,
            root,
            initial,
            objective: f,
            iters,
            fallback: false,
        },
        Ok(_) | Err(_) => {
            log::debug!("IK fell back to the initial pose");
            keep(initial)
        }
    }
}

/// Frame-parallel refinement of a sequence; results keep frame order.
pub fn ik_refine(
    skel: &Skeleton,
    global_rot: &[Vec<RotMatrix>],
    targets: &[Vec<Vec3>],
    cfg: &LbfgsConfig,
) -> Result<Vec<IkFrame>> {
    cfg.validate()?;
    if global_rot.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} rotation frames for {} target frames",
            global_rot.len(),
            targets.len()
        )));
    }
    Ok(global_rot
        .par_iter()
        .zip(targets.par_iter())
        .map(|(r, t)| ik_refine_frame(skel, r, t, cfg))
        .collect())
}

/// Joint positions of a refined frame.
pub fn frame_positions(skel: &Skeleton, frame: &IkFrame) -> Vec<Vec3> {
    positions_from_global(skel, &frame.global_rot, &frame.root)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{axis_angle_to_matrix, forward_kinematics, AxisAngle};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn quad(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((dot(x, x), x.iter().map(|v| 2.0 * v).collect()))
    }

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Ok((f, g))
    }

    #[test]
    fn quadratic_converges_in_few_iterations() {
        let r = lbfgs_minimize(quad, &[3.0, 4.0], &LbfgsConfig::default()).unwrap();
        assert!(r.iters <= 3, "{}", r.iters);
        assert!(norm(&r.x) < 1e-8 && r.converged);
    }

    #[test]
    fn rosenbrock_with_relaxed_budget() {
        let cfg = LbfgsConfig {
            max_iters: 100,
            ..Default::default()
        };
        let r = lbfgs_minimize(rosenbrock, &[-1.2, 1.0], &cfg).unwrap();
        assert!(r.f < 1e-6, "{r:?}");
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn start_at_minimum_takes_no_step() {
        let r = lbfgs_minimize(quad, &[0.0, 0.0], &LbfgsConfig::default()).unwrap();
        assert_eq!(r.iters, 0);
        assert_eq!(r.x, vec![0.0, 0.0]);
    }

    #[test]
    fn non_finite_objective_aborts() {
        let f = |x: &[f64]| Ok((f64::NAN, x.to_vec()));
        assert!(matches!(
            lbfgs_minimize(f, &[1.0], &LbfgsConfig::default()),
            Err(Error::Optimizer(_))
        ));
        let bad = LbfgsConfig {
            memory: 0,
            ..Default::default()
        };
        assert!(lbfgs_minimize(quad, &[1.0], &bad).is_err());
    }

    fn random_pose(rng: &mut ChaCha8Rng, scale: f64) -> Vec<RotMatrix> {
        (0..JOINTS)
            .map(|_| {
                let a = AxisAngle::new(
                    rng.random_range(-scale..scale),
                    rng.random_range(-scale..scale),
                    rng.random_range(-scale..scale),
                );
                axis_angle_to_matrix(&a).unwrap()
            })
            .collect()
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let skel = Skeleton::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pose = forward_kinematics(&skel, &random_pose(&mut rng, 0.5), &Vec3::new(0.1, 0.9, 0.0));
        let target: Vec<Vec3> = forward_kinematics(&skel, &random_pose(&mut rng, 0.5), &Vec3::new(0.0, 1.0, 0.2)).pos;
        let x = pack(&skel, &pose.rot, &Vec3::new(0.1, 0.9, 0.0));
        let (_, g) = ik_objective(&skel, &target, &x).unwrap();
        let h = 1e-6;
        for k in 0..x.len() {
            let mut xp = x.clone();
            xp[k] += h;
            let mut xm = x.clone();
            xm[k] -= h;
            let fd = (ik_objective(&skel, &target, &xp).unwrap().0 - ik_objective(&skel, &target, &xm).unwrap().0)
                / (2.0 * h);
            let err = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-6);
            assert!(err < 1e-4, "var {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn exact_targets_leave_the_pose_unchanged() {
        let skel = Skeleton::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pose = forward_kinematics(&skel, &random_pose(&mut rng, 0.4), &Vec3::new(0.0, 0.9, 0.0));
        let f = ik_refine_frame(&skel, &pose.rot, &pose.pos, &LbfgsConfig::default());
        assert!(f.initial < 1e-20);
        for (a, b) in f.global_rot.iter().zip(&pose.rot) {
            assert!((a.0 - b.0).abs().max() < 1e-9);
        }
    }

    #[test]
    fn recovers_perturbed_poses() {
        let skel = Skeleton::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = 5f64.to_radians();
        let mut rots = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..4 {
            let local = random_pose(&mut rng, 0.5);
            let truth = forward_kinematics(&skel, &local, &Vec3::new(0.0, 0.9, 0.0));
            let jitter: Vec<RotMatrix> = local
                .iter()
                .map(|r| {
                    let dir = Vec3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    );
                    r.mul(&axis_angle_to_matrix(&AxisAngle(dir.normalize() * noise)).unwrap())
                })
                .collect();
            rots.push(forward_kinematics(&skel, &jitter, &Vec3::new(0.0, 0.9, 0.0)).rot);
            targets.push(truth.pos);
        }
        let out = ik_refine(&skel, &rots, &targets, &LbfgsConfig::default()).unwrap();
        let mut err = 0.0;
        for (f, t) in out.iter().zip(&targets) {
            assert!(!f.fallback && f.iters <= 15 && f.objective <= f.initial);
            let p = frame_positions(&skel, f);
            err += p.iter().zip(t).map(|(a, b)| (a - b).norm()).sum::<f64>() / JOINTS as f64;
        }
        let cm = err / out.len() as f64 * 100.0;
        assert!(cm < 1.0, "{cm} cm");
    }

    #[test]
    fn unreachable_targets_reduce_the_objective() {
        let skel = Skeleton::default();
        let pose = forward_kinematics(&skel, &vec![RotMatrix::identity(); JOINTS], &Vec3::new(0.0, 0.9, 0.0));
        let mut target = pose.pos.clone();
        let wrist = skel.hands()[0];
        target[wrist] += Vec3::new(1.5, 0.0, 0.0);
        let f = ik_refine_frame(&skel, &pose.rot, &target, &LbfgsConfig::default());
        assert!(!f.fallback);
        assert!(f.objective < f.initial);
        assert!(f.objective > 0.0);
    }

    #[test]
    fn mismatched_lengths_are_errors() {
        let skel = Skeleton::default();
        assert!(ik_refine(
            &skel,
            &[vec![RotMatrix::identity(); JOINTS]],
            &[],
            &LbfgsConfig::default()
        )
        .is_err());
        assert!(ik_objective(&skel, &[], &[0.0; IK_VARS]).is_err());
    }
}
