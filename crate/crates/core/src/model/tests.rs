use super::*;
use crate::data::{make_dataset, synth_generate, MotionKind};
use crate::diffcore::gradcheck::{check_gradients, check_piecewise_gradients, GradCheck};
use crate::prior::{train_vqvae, PriorConfig, PriorTrainConfig};
use ndarray::{s, Array2};
use rand::Rng;

fn tiny(multi_head: bool, weighting: LossWeighting) -> MemMlpConfig {
    MemMlpConfig {
        window: 4,
        width: 6,
        depth: 2,
        conv_kernel: 3,
        memory_layers: vec![1, 2],
        predictor_depth: 1,
        multi_head,
        code_dim: 5,
        weighting,
        blend: Blend::default(),
    }
}

fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

struct Inputs {
    x: Array2<f64>,
    xp: Array2<f64>,
    tp: Array2<f64>,
    e: Array2<f64>,
    target: Array2<f64>,
}

fn inputs(cfg: &MemMlpConfig, windows: usize, seed: u64) -> Inputs {
    let rows = windows * cfg.window;
    Inputs {
        x: random(rows, SPARSE_DIM, seed),
        xp: random(rows, SPARSE_DIM, seed + 1),
        tp: random(rows, TARGET_DIM, seed + 2),
        e: random(windows, cfg.code_dim, seed + 3),
        target: random(rows, TARGET_DIM, seed + 4),
    }
}

fn run(model: &MemMlp<f64>, inp: &Inputs, blend: &[Array2<f64>]) -> (Array2<f64>, Option<Array2<f64>>, u64) {
    let mut tape = Tape::new();
    let x = tape.constant(inp.x.clone());
    let mem = MemoryInputs {
        x_prev: tape.constant(inp.xp.clone()),
        theta_prev: tape.constant(inp.tp.clone()),
        codes: tape.constant(inp.e.clone()),
    };
    let out = model.forward_on(&mut tape, x, Some(&mem), blend).unwrap();
    (
        tape.value(out.rot).clone(),
        out.pos.map(|p| tape.value(p).clone()),
        tape.macs(),
    )
}

#[test]
fn closed_form_counts_match_the_tape() {
    for multi in [true, false] {
        for w in [LossWeighting::Homoscedastic, LossWeighting::manual()] {
            let cfg = tiny(multi, w);
            let model = MemMlp::<f64>::new(cfg.clone(), 1).unwrap();
            assert_eq!(model.store.scalar_count(), cfg.param_count());
            let inp = inputs(&cfg, 1, 2);
            let (rot, pos, macs) = run(&model, &inp, &model.constant_blend(1, 0.5));
            assert_eq!(macs, cfg.macs());
            assert_eq!(rot.dim(), (4, ROT_DIM));
            assert_eq!(pos.is_some(), multi);
        }
    }
}

#[test]
fn default_size_is_in_the_expected_range() {
    let cfg = MemMlpConfig::default();
    let p = cfg.param_count() as f64 / 1e6;
    let g = cfg.macs() as f64 / 1e9;
    assert!((3.5..5.0).contains(&p), "{p} M params");
    assert!((0.15..0.3).contains(&g), "{g} GMACs");
}

#[test]
fn memory_is_required_when_configured() {
    let cfg = tiny(true, LossWeighting::Homoscedastic);
    let model = MemMlp::<f64>::new(cfg.clone(), 1).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(random(4, SPARSE_DIM, 0));
    let err = model.forward_on(&mut tape, x, None, &[]).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");

    let plain = MemMlpConfig {
        memory_layers: vec![],
        ..cfg
    };
    let model = MemMlp::<f64>::new(plain, 1).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(random(8, SPARSE_DIM, 0));
    let out = model.forward_on(&mut tape, x, None, &[]).unwrap();
    assert_eq!(tape.shape(out.rot), (8, ROT_DIM));
}

#[test]
fn rejects_bad_shapes() {
    let cfg = tiny(true, LossWeighting::Homoscedastic);
    let model = MemMlp::<f64>::new(cfg.clone(), 1).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(random(5, SPARSE_DIM, 0));
    assert!(model.forward_on(&mut tape, x, None, &[]).is_err());
    let mut bad = inputs(&cfg, 2, 0);
    bad.e = random(1, cfg.code_dim, 0);
    let mut tape = Tape::new();
    let x = tape.constant(bad.x.clone());
    let mem = MemoryInputs {
        x_prev: tape.constant(bad.xp.clone()),
        theta_prev: tape.constant(bad.tp.clone()),
        codes: tape.constant(bad.e.clone()),
    };
    let blend = model.constant_blend(2, 0.5);
    assert!(matches!(
        model.forward_on(&mut tape, x, Some(&mem), &blend),
        Err(Error::Shape(_))
    ));
}

#[test]
fn blend_extremes_select_one_memory_source() {
    let cfg = tiny(true, LossWeighting::Homoscedastic);
    let model = MemMlp::<f64>::new(cfg.clone(), 3).unwrap();
    let a = inputs(&cfg, 1, 10);
    let mut codes_changed = inputs(&cfg, 1, 10);
    codes_changed.e = random(1, cfg.code_dim, 99);
    let mut theta_changed = inputs(&cfg, 1, 10);
    theta_changed.tp = random(4, TARGET_DIM, 99);

    let one = model.constant_blend(1, 1.0);
    assert_eq!(run(&model, &a, &one).0, run(&model, &codes_changed, &one).0);
    assert_ne!(run(&model, &a, &one).0, run(&model, &theta_changed, &one).0);
    let zero = model.constant_blend(1, 0.0);
    assert_eq!(run(&model, &a, &zero).0, run(&model, &theta_changed, &zero).0);
    assert_ne!(run(&model, &a, &zero).0, run(&model, &codes_changed, &zero).0);
}

#[test]
fn windows_are_independent_within_a_batch() {
    let cfg = tiny(true, LossWeighting::Homoscedastic);
    let model = MemMlp::<f64>::new(cfg.clone(), 3).unwrap();
    let both = inputs(&cfg, 2, 20);
    let first = Inputs {
        x: both.x.slice(s![..4, ..]).to_owned(),
        xp: both.xp.slice(s![..4, ..]).to_owned(),
        tp: both.tp.slice(s![..4, ..]).to_owned(),
        e: both.e.slice(s![..1, ..]).to_owned(),
        target: both.target.slice(s![..4, ..]).to_owned(),
    };
    let (r2, _, _) = run(&model, &both, &model.constant_blend(2, 0.5));
    let (r1, _, _) = run(&model, &first, &model.constant_blend(1, 0.5));
    for (a, b) in r2.slice(s![..4, ..]).iter().zip(r1.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

/// `Σ rot² + Σ pos²` when `smooth`, otherwise the training loss.
fn objective<'s>(
    tape: &mut Tape<'s, f64>,
    store: &'s ParamStore<f64>,
    model: &MemMlp<f64>,
    inp: &Inputs,
    blend: &[Array2<f64>],
    lower: &[usize],
    smooth: bool,
) -> Result<Var> {
    let x = tape.constant(inp.x.clone());
    let mem = MemoryInputs {
        x_prev: tape.constant(inp.xp.clone()),
        theta_prev: tape.constant(inp.tp.clone()),
        codes: tape.constant(inp.e.clone()),
    };
    let out = model.forward_with(tape, store, x, Some(&mem), blend)?;
    let (total, _) = model.losses_with(tape, store, &out, &inp.target, lower)?;
    if !smooth {
        return Ok(total);
    }
    let mut acc = tape.sum_sq(out.rot);
    if let Some(p) = out.pos {
        let sp = tape.sum_sq(p);
        acc = tape.add(acc, sp)?;
    }
    Ok(acc)
}

#[test]
fn gradients_match_finite_differences() {
    // A smooth readout checks the network; the L1 objective has kinks, so it
    // goes through the piecewise check that re-tests straddled steps.
    for cfg in [
        tiny(true, LossWeighting::Homoscedastic),
        tiny(false, LossWeighting::manual()),
    ] {
        let model = MemMlp::<f64>::new(cfg.clone(), 5).unwrap();
        let inp = inputs(&cfg, 2, 30);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let blend = model.random_blend(2, &mut rng);
        let lower = Skeleton::default().lower().to_vec();
        for smooth in [true, false] {
            let gc = GradCheck {
                step: 1e-5,
                rel_tol: 1e-3,
                abs_floor: 1e-5,
            };
            let report = if smooth {
                check_gradients(&model.store, gc, |t, st| {
                    objective(t, st, &model, &inp, &blend, &lower, true)
                })
            } else {
                check_piecewise_gradients(&model.store, gc, |t, st| {
                    objective(t, st, &model, &inp, &blend, &lower, false)
                })
            }
            .unwrap();
            assert!(report.passed, "smooth={smooth}: {report:?}");
        }
    }
}

#[test]
fn log_variances_exist_only_for_learned_weighting() {
    let h = MemMlp::<f64>::new(tiny(true, LossWeighting::Homoscedastic), 0).unwrap();
    assert_eq!(h.log_var_ids().len(), 4);
    let h1 = MemMlp::<f64>::new(tiny(false, LossWeighting::Homoscedastic), 0).unwrap();
    assert_eq!(h1.log_var_ids().len(), 2);
    let m = MemMlp::<f64>::new(tiny(true, LossWeighting::manual()), 0).unwrap();
    assert!(m.log_var_ids().is_empty());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let cfg = tiny(true, LossWeighting::Homoscedastic);
    let model = MemMlp::<f32>::new(cfg.clone(), 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.mmwt");
    model.save(&path).unwrap();
    let back = MemMlp::<f32>::load(&path).unwrap();
    assert_eq!(back.cfg, cfg);
    assert!(back.store.same_values(&model.store));

    let mut ck = model.to_checkpoint();
    ck.kind = "vqvae".into();
    assert!(matches!(MemMlp::<f32>::from_checkpoint(&ck), Err(Error::Checkpoint(_))));
    let mut ck = model.to_checkpoint();
    ck.meta = serde_json::to_string(&MemMlpConfig { width: 7, ..cfg }).unwrap();
    assert!(MemMlp::<f32>::from_checkpoint(&ck).is_err());
}

#[test]
fn config_validation_and_strict_parsing() {
    let ok = MemMlpConfig::default();
    ok.validate().unwrap();
    for bad in [
        MemMlpConfig {
            window: 1,
            ..ok.clone()
        },
        MemMlpConfig {
            conv_kernel: 2,
            ..ok.clone()
        },
        MemMlpConfig {
            memory_layers: vec![4, 2],
            ..ok.clone()
        },
        MemMlpConfig {
            memory_layers: vec![9],
            ..ok.clone()
        },
        MemMlpConfig {
            blend: Blend::Fixed { value: 1.5 },
            ..ok.clone()
        },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
    }
    let json = serde_json::to_string(&ok).unwrap();
    assert_eq!(serde_json::from_str::<MemMlpConfig>(&json).unwrap(), ok);
    assert!(serde_json::from_str::<MemMlpConfig>(r#"{"widht": 3}"#).is_err());
    let partial: MemMlpConfig = serde_json::from_str(r#"{"width": 32}"#).unwrap();
    assert_eq!(partial.depth, 8);
}

#[test]
fn single_head_positions_follow_the_tracked_head() {
    let skel = Skeleton::default();
    let cfg = MemMlpConfig {
        multi_head: false,
        memory_layers: vec![],
        ..tiny(false, LossWeighting::Homoscedastic)
    };
    let model = MemMlp::<f64>::new(cfg, 2).unwrap();
    let mut x = random(4, SPARSE_DIM, 3);
    x[[3, 0]] = 0.25;
    x[[3, 1]] = 1.7;
    x[[3, 2]] = -0.5;
    let zeros_s = Array2::zeros((4, SPARSE_DIM));
    let zeros_t = Array2::zeros((4, TARGET_DIM));
    let (out, _) = model
        .infer_window(None, &skel, x.view(), zeros_s.view(), zeros_t.view(), &[])
        .unwrap();
    let head = skel.tracked()[0];
    let o = head * crate::data::TARGET_PER_JOINT + 6;
    let p = out.slice(s![3, o..o + 3]).to_vec();
    assert!(
        (p[0] - 0.25).abs() < 1e-9 && (p[1] - 1.7).abs() < 1e-9 && (p[2] + 0.5).abs() < 1e-9,
        "{p:?}"
    );
}

#[test]
fn training_reduces_the_loss() {
    let skel = Skeleton::default();
    let clips: Vec<_> = [MotionKind::Walk, MotionKind::Squat]
        .iter()
        .map(|&k| synth_generate(k, 1, 1.0, 30.0, &skel))
        .collect();
    let ds = make_dataset(&clips, &skel, 6, 2).unwrap();
    let pcfg = PriorConfig {
        window: 6,
        hidden: 16,
        latent: 8,
        codes: 4,
        enc_blocks: 2,
        dec_blocks: 1,
        beta: 0.25,
    };
    let ptrain = PriorTrainConfig {
        epochs: 2,
        batch: 8,
        ..Default::default()
    };
    let (prior, _) = train_vqvae(&ds, pcfg, &ptrain).unwrap();
    let cfg = MemMlpConfig {
        window: 6,
        width: 16,
        depth: 2,
        memory_layers: vec![2],
        predictor_depth: 1,
        code_dim: 8,
        ..Default::default()
    };
    let tcfg = TrainConfig {
        batch: 8,
        schedule: crate::diffcore::LrSchedule {
            total: 150,
            drop_at: 120,
            lr0: 3e-3,
            lr1: 3e-4,
        },
        log_every: 0,
        ..Default::default()
    };
    let (model, log) = train(cfg, tcfg, &ds, Some(&prior), &skel).unwrap();
    assert_eq!(log.len(), 150);
    let head: f64 = log[..10].iter().map(|r| r.unweighted()).sum::<f64>() / 10.0;
    let tail: f64 = log[140..].iter().map(|r| r.unweighted()).sum::<f64>() / 10.0;
    assert!(tail < 0.7 * head, "{head} -> {tail}");
    assert_eq!(log[130].lr, 3e-4);
    assert!(model.store.flat_values().iter().all(|v| v.is_finite()));
}

#[test]
fn trainer_requires_a_frozen_matching_prior() {
    let skel = Skeleton::default();
    let clip = synth_generate(MotionKind::Sway, 0, 1.0, 30.0, &skel);
    let ds = make_dataset(&[clip], &skel, 6, 3).unwrap();
    let cfg = MemMlpConfig {
        window: 6,
        width: 8,
        depth: 2,
        memory_layers: vec![2],
        predictor_depth: 1,
        code_dim: 8,
        ..Default::default()
    };
    let tcfg = TrainConfig::default();
    let err = Trainer::new(cfg.clone(), tcfg.clone(), &ds, None, &skel).err().unwrap();
    assert!(matches!(err, Error::Contract(_)));
    let pcfg = PriorConfig {
        window: 6,
        hidden: 8,
        latent: 8,
        codes: 4,
        enc_blocks: 1,
        dec_blocks: 1,
        beta: 0.25,
    };
    let unfrozen = crate::prior::VqVae::<f32>::new(pcfg.clone(), 0).unwrap();
    let err = Trainer::new(cfg.clone(), tcfg.clone(), &ds, Some(&unfrozen), &skel)
        .err()
        .unwrap();
    assert!(matches!(err, Error::Contract(_)));
    let mut wrong = crate::prior::VqVae::<f32>::new(PriorConfig { latent: 4, ..pcfg }, 0).unwrap();
    wrong.freeze();
    let err = Trainer::new(cfg, tcfg, &ds, Some(&wrong), &skel).err().unwrap();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn zero_weight_block_is_the_identity() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let blk = MlpBlock::new(&mut store, "b", 5, 3, &mut rng);
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        store.value_mut(id).fill(0.0);
    }
    let h = random(8, 5, 1);
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let out = blk.forward(&mut tape, &store, hv, 4).unwrap();
    assert_eq!(tape.value(out), &h);
}

#[test]
fn position_branch_does_not_affect_rotations() {
    let cfg = tiny(true, LossWeighting::Homoscedastic);
    let mut model = MemMlp::<f64>::new(cfg.clone(), 4).unwrap();
    let inp = inputs(&cfg, 1, 40);
    let blend = model.constant_blend(1, 0.5);
    let (rot, pos, _) = run(&model, &inp, &blend);
    let ids: Vec<ParamId> = model
        .store
        .iter()
        .filter(|(_, p)| p.name.starts_with("pos_head"))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        model.store.value_mut(id).fill(0.0);
    }
    let (rot2, pos2, _) = run(&model, &inp, &blend);
    assert_eq!(rot, rot2);
    assert_ne!(pos, pos2);
}

#[test]
fn memory_features_reach_the_backbone_output() {
    let cfg = tiny(true, LossWeighting::Homoscedastic);
    let model = MemMlp::<f64>::new(cfg.clone(), 6).unwrap();
    let inp = inputs(&cfg, 1, 50);
    let blend = model.constant_blend(1, 0.5);
    let h_of = |xp: &Array2<f64>, tp: &Array2<f64>, e: &Array2<f64>| {
        let mut tape = Tape::new();
        let x = tape.constant(inp.x.clone());
        let mem = MemoryInputs {
            x_prev: tape.constant(xp.clone()),
            theta_prev: tape.constant(tp.clone()),
            codes: tape.constant(e.clone()),
        };
        let h = model
            .backbone_on(&mut tape, &model.store, x, Some(&mem), &blend)
            .unwrap();
        tape.value(h).clone()
    };
    let base = h_of(&inp.xp, &inp.tp, &inp.e);
    let zeroed = h_of(
        &Array2::zeros(inp.xp.raw_dim()),
        &Array2::zeros(inp.tp.raw_dim()),
        &Array2::zeros(inp.e.raw_dim()),
    );
    let diff: f64 = (&base - &zeroed).mapv(f64::abs).sum();
    assert!(diff > 1e-6, "{diff}");
}

#[test]
fn spec_sized_tiny_model_passes_gradient_check() {
    let cfg = MemMlpConfig {
        window: 4,
        width: 8,
        depth: 2,
        memory_layers: vec![2],
        predictor_depth: 1,
        code_dim: 4,
        ..Default::default()
    };
    let model = MemMlp::<f64>::new(cfg.clone(), 8).unwrap();
    let inp = inputs(&cfg, 1, 60);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let blend = model.random_blend(1, &mut rng);
    let gc = GradCheck {
        step: 1e-4,
        rel_tol: 1e-3,
        ..GradCheck::default()
    };
    let report = check_gradients(&model.store, gc, |tape, store| {
        let x = tape.constant(inp.x.clone());
        let mem = MemoryInputs {
            x_prev: tape.constant(inp.xp.clone()),
            theta_prev: tape.constant(inp.tp.clone()),
            codes: tape.constant(inp.e.clone()),
        };
        let out = model.forward_with(tape, store, x, Some(&mem), &blend)?;
        let a = tape.sum_sq(out.rot);
        let b = tape.sum_sq(out.pos.unwrap());
        tape.add(a, b)
    })
    .unwrap();
    assert!(report.passed, "{report:?}");
}

fn smoke_setup() -> (Skeleton, crate::data::Dataset, crate::prior::VqVae<f32>) {
    let skel = Skeleton::default();
    let clip = synth_generate(MotionKind::Walk, 2, 1.0, 30.0, &skel);
    let ds = make_dataset(&[clip], &skel, 6, 2).unwrap();
    let pcfg = PriorConfig {
        window: 6,
        hidden: 8,
        latent: 8,
        codes: 4,
        enc_blocks: 1,
        dec_blocks: 1,
        beta: 0.25,
    };
    let ptrain = PriorTrainConfig {
        epochs: 1,
        batch: 8,
        ..Default::default()
    };
    let (prior, _) = train_vqvae(&ds, pcfg, &ptrain).unwrap();
    (skel, ds, prior)
}

fn smoke_cfgs() -> (MemMlpConfig, TrainConfig) {
    (
        MemMlpConfig {
            window: 6,
            width: 8,
            depth: 2,
            memory_layers: vec![2],
            predictor_depth: 1,
            code_dim: 8,
            ..Default::default()
        },
        TrainConfig {
            batch: 4,
            schedule: crate::diffcore::LrSchedule {
                total: 5,
                drop_at: 3,
                lr0: 1e-3,
                lr1: 1e-4,
            },
            log_every: 0,
            ..Default::default()
        },
    )
}

#[test]
fn training_is_deterministic_and_leaves_the_prior_alone() {
    let (skel, ds, prior) = smoke_setup();
    let before = prior.store.clone();
    let (cfg, tcfg) = smoke_cfgs();
    let (m1, l1) = train(cfg.clone(), tcfg.clone(), &ds, Some(&prior), &skel).unwrap();
    let (m2, l2) = train(cfg, tcfg, &ds, Some(&prior), &skel).unwrap();
    assert_eq!(l1, l2);
    assert!(m1.store.same_values(&m2.store));
    assert!(prior.store.same_values(&before));
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let model = MemMlp::<f32>::new(tiny(true, LossWeighting::Homoscedastic), 0).unwrap();
    let mut bytes = model.to_checkpoint().to_bytes();
    bytes[0] = b'X';
    assert!(Checkpoint::from_bytes(&bytes).is_err());
}
