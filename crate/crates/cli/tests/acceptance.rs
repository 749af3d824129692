//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! (run with `--nocapture` to see them as they complete).
//!
//! The expensive fixtures (desk dataset, trained desk model) are built once
//! and cached under the cargo tmp dir keyed by config hash, so reruns and
//! the criteria that share them stay inside the compute budget.

use ndarray::{ArrayD, IxDyn};
use niles_autodiff::{check_grad_directional, DType, Tensor};
use niles_cli::commands::{cmd_evaluate, high_k_log_distance};
use niles_cli::config::RunConfig;
use niles_model::closure::{
    compute_closure, niles_step, rollout, ClosureMode, RolloutKind, SdeRunConfig,
};
use niles_model::encdec::{decode, encode, ArchConfig};
use niles_model::params::ParamBuilder;
use niles_model::sde::{
    kl_initial, reverse_solve, reversible_heun_solve, PosteriorDynamics, SdeDynamics, WienerPath,
};
use niles_model::train::{build_params, quad_weights, train, Precision, TrainConfig};
use niles_solver::dataset::{build_dataset, load_manifest, load_split, verify_dataset, Split};
use niles_solver::mesh::{MeshSpec, SpectralMesh};
use niles_solver::metrics::{
    mean_kinetic_energy_of_grid, rmse, tke_spectrum_of_grid, to_uniform_grid, Spectrum,
};
use niles_solver::stepper::{
    l2_velocity_error, taylor_green, ForcingConfig, SolverConfig, StepHistory, Stepper,
    TensorState,
};
use niles_solver::FlowField;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Instant;

fn report(criterion: usize, pass: bool, detail: &str) {
    println!(
        "criterion {criterion:2}: {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
}

fn scratch_root() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

static FIXTURE_LOCK: Mutex<()> = Mutex::new(());

/// Build (or reuse) the desk dataset fixture.
fn desk_dataset() -> (PathBuf, RunConfig) {
    let _guard = FIXTURE_LOCK.lock().unwrap();
    let cfg = RunConfig::desk();
    let dir = scratch_root().join(format!("desk-data-{}", &cfg.hash()[..12]));
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() {
        if let Ok(manifest) = load_manifest(&dir) {
            if verify_dataset(&manifest, &dir).is_ok() {
                return (dir, cfg);
            }
        }
    }
    std::fs::create_dir_all(&dir).unwrap();
    let t0 = Instant::now();
    build_dataset(&cfg.dataset, &dir).expect("desk dataset build");
    println!("[fixture] desk dataset built in {:?}", t0.elapsed());
    (dir, cfg)
}

/// Train (or reuse) the desk model; returns (checkpoint dir, training log).
fn desk_trained_model() -> (PathBuf, Vec<niles_model::train::LogRow>, RunConfig) {
    let (data_dir, cfg) = desk_dataset();
    let _guard = FIXTURE_LOCK.lock().unwrap();
    let tc = desk_train_config();
    let key = niles_solver::io::sha256_hex(
        format!("{}-{}", cfg.hash(), serde_json::to_string(&tc).unwrap()).as_bytes(),
    );
    let out = scratch_root().join(format!("desk-train-{}", &key[..12]));
    let log_path = out.join("train_log.csv");
    let total_steps = tc.max_steps.unwrap();
    let final_ckpt = out.join(format!("ckpt_{total_steps:06}"));
    if final_ckpt.exists() && log_path.exists() {
        let log = parse_log(&log_path);
        if log.len() >= total_steps {
            return (final_ckpt, log, cfg);
        }
    }
    let _ = std::fs::remove_dir_all(&out);
    std::fs::create_dir_all(&out).unwrap();
    let manifest = load_manifest(&data_dir).unwrap();
    let train_data = load_split(&manifest, &data_dir, Split::Train).unwrap();
    let val_data = load_split(&manifest, &data_dir, Split::Val).unwrap();
    let mesh = cfg.dataset.coarse_mesh.build().unwrap();
    let stepper = Stepper::new(&mesh, cfg.les_solver.clone()).unwrap();
    let t0 = Instant::now();
    let outcome = train(
        &stepper,
        &cfg.arch,
        &tc,
        &train_data,
        &val_data,
        &out,
        &cfg.hash(),
        None,
    )
    .expect("desk training");
    println!("[fixture] desk training ({} steps) in {:?}", outcome.log.len(), t0.elapsed());
    (outcome.final_checkpoint, outcome.log, cfg)
}

fn desk_train_config() -> TrainConfig {
    TrainConfig {
        model: ClosureMode::Niles,
        base_lr: 2e-3,
        kl_final_beta: 1e-3,
        epochs: 3,
        rollout_steps: 8,
        batch_size: 2,
        posterior_scale: 1.0,
        seed: 11,
        sde: SdeRunConfig::default(),
        grad_clip: 1.0,
        precision: Precision::F32,
        differentiate_through_solver: true,
        checkpoint_every: 0,
        validate_every: 0,
        val_rollout_steps: 8,
        max_steps: Some(400),
    }
}

fn parse_log(path: &std::path::Path) -> Vec<niles_model::train::LogRow> {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines()
        .skip(1)
        .filter_map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return None;
            }
            Some(niles_model::train::LogRow {
                step: f[0].parse().ok()?,
                lr: f[1].parse().ok()?,
                beta: f[2].parse().ok()?,
                recon: f[3].parse().ok()?,
                kl_z0: f[4].parse().ok()?,
                kl_path: f[5].parse().ok()?,
                total: f[6].parse().ok()?,
                wallclock: f[7].parse().ok()?,
            })
        })
        .collect()
}

#[test]
fn criterion_01_solver_correctness_taylor_green() {
    let t0 = Instant::now();
    let mesh = SpectralMesh::new(4, 4, 8).unwrap();
    let nu = 1e-2;
    let dt = 1e-4;
    let cfg = SolverConfig {
        viscosity: nu,
        dt,
        cg_tol: 1e-11,
        cg_max_iters: 4000,
        forcing: None,
        dealias: false,
        pressure_extrap_order: 2,
        cfl_limit: 0.5,
    };
    let stepper = Stepper::new(&mesh, cfg).unwrap();
    let mut h = StepHistory::new(taylor_green(&mesh, nu, 0.0));
    for _ in 0..100 {
        stepper.advance(&mut h).unwrap();
    }
    let exact = taylor_green(&mesh, nu, 100.0 * dt);
    let err = l2_velocity_error(&stepper.ops, h.latest(), &exact);
    let elapsed = t0.elapsed();
    let in_time = elapsed.as_secs() < 60;
    let pass = err < 1e-6 && in_time;
    report(
        1,
        pass,
        &format!(
            "taylor-green L2 error {err:.3e} (tolerance 1e-6; consistency limit of the \
             order-(P-2) pressure space measures ~8e-6 here), runtime {elapsed:?}"
        ),
    );
    assert!(in_time, "criterion 1 runtime bound violated: {elapsed:?}");
    assert!(err < 1e-6, "criterion 1: {err:.3e} >= 1e-6");
}

#[test]
fn criterion_02_temporal_self_convergence() {
    let mesh = SpectralMesh::new(4, 4, 8).unwrap();
    let nu = 5e-2;
    let t_end = 0.048;
    let run = |dt: f64| -> FlowField {
        let cfg = SolverConfig {
            viscosity: nu,
            dt,
            cg_tol: 1e-13,
            cg_max_iters: 6000,
            forcing: None,
            dealias: false,
            pressure_extrap_order: 2,
            cfl_limit: 0.8,
        };
        let stepper = Stepper::new(&mesh, cfg).unwrap();
        let mut h = StepHistory::from_fields(vec![
            taylor_green(&mesh, nu, 0.0),
            taylor_green(&mesh, nu, dt),
            taylor_green(&mesh, nu, 2.0 * dt),
        ])
        .unwrap();
        let n = (t_end / dt).round() as usize - 2;
        for _ in 0..n {
            stepper.advance(&mut h).unwrap();
        }
        h.latest().clone()
    };
    let dt0 = 1.6e-3;
    let ops = niles_solver::MeshOps::new(&mesh, false);
    let a = run(dt0);
    let b = run(dt0 / 2.0);
    let c = run(dt0 / 4.0);
    let e1 = l2_velocity_error(&ops, &a, &b);
    let e2 = l2_velocity_error(&ops, &b, &c);
    let ratio = e1 / e2;
    let pass = (6.5..=9.5).contains(&ratio);
    report(
        2,
        pass,
        &format!("dt-halving error ratio {ratio:.2} (e1 {e1:.3e}, e2 {e2:.3e}), bound [6.5, 9.5]"),
    );
    assert!(pass);
}

#[test]
fn criterion_03_divergence_contract_on_desk_run() {
    // 1500-step desk DNS: the divergence contract must hold at every step;
    // the last half of the horizon doubles as the statistically-steady
    // kinetic-energy check for the forced run
    let cfg = RunConfig::desk();
    let mesh = cfg.dataset.dns_mesh.build().unwrap();
    let solver = cfg.dataset.solver.clone();
    let cg_tol = solver.cg_tol;
    let stepper = Stepper::new(&mesh, solver).unwrap();
    let base = niles_solver::stepper::kolmogorov_initial(&mesh, &ForcingConfig::default());
    let init =
        niles_solver::dataset::perturb_initial(&base, &stepper, 7, cfg.dataset.perturb_amplitude)
            .unwrap();
    let n_steps = 1500;
    let mut max_div: f64 = 0.0;
    let mut ke = Vec::with_capacity(n_steps);
    stepper
        .simulate_with(&init, n_steps, |_, field, diag| {
            max_div = max_div.max(diag.divergence);
            ke.push(stepper.kinetic_energy(field));
            Ok(())
        })
        .unwrap();
    let pass_div = max_div <= cg_tol;
    // running-mean drift over the last half
    let half = &ke[n_steps / 2..];
    let mean_first: f64 = half[..half.len() / 2].iter().sum::<f64>() / (half.len() / 2) as f64;
    let mean_second: f64 =
        half[half.len() / 2..].iter().sum::<f64>() / (half.len() - half.len() / 2) as f64;
    let drift = (mean_second - mean_first).abs() / mean_first.abs().max(1e-30);
    let pass = pass_div && drift < 0.2;
    report(
        3,
        pass,
        &format!(
            "max divergence {max_div:.2e} (tol {cg_tol:.1e}) over {n_steps} steps; \
             kinetic-energy running-mean drift over last half {:.1}%",
            drift * 100.0
        ),
    );
    assert!(pass_div, "divergence {max_div:.3e} above {cg_tol:.1e}");
    assert!(drift < 0.2, "kinetic energy not statistically steady: {drift}");
}

#[test]
fn criterion_04_adjoint_through_full_step() {
    let t0 = Instant::now();
    let mesh = SpectralMesh::new(2, 2, 3).unwrap();
    let cfg = SolverConfig {
        viscosity: 1e-3,
        dt: 1e-3,
        cg_tol: 1e-12,
        cg_max_iters: 2000,
        forcing: Some(ForcingConfig {
            amplitude: 1.0,
            wavenumber: 2,
        }),
        dealias: false,
        pressure_extrap_order: 2,
        cfl_limit: 1.0,
    };
    let stepper = Stepper::new(&mesh, cfg).unwrap();
    let arch = ArchConfig::tiny();
    let mut params = build_params(&arch, ClosureMode::Niles, 5, DType::F64);
    for name in ["dec.out.w", "enc.mu.w", "enc.sigma.w", "sde.post.out.w", "sde.prior.out.w"] {
        let shape = params.p(name).shape().to_vec();
        let mut w = ArrayD::zeros(IxDyn(&shape));
        for (i, v) in w.iter_mut().enumerate() {
            *v = ((i as f64 + 1.0) * 0.37).sin() * 0.05;
        }
        params.set(name, w);
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    let init = FlowField::from_fn(&mesh, |x, y| {
        (
            (two_pi * 2.0 * y).sin() + 0.1 * (two_pi * x).cos(),
            0.1 * (two_pi * (x - y)).sin(),
        )
    });
    let mut h = StepHistory::new(stepper.project_divergence_free(&init).unwrap());
    while h.fields.len() < 3 {
        stepper.advance(&mut h).unwrap();
    }
    let history: Vec<TensorState> = h.fields.iter().map(TensorState::from_field).collect();
    let sde = SdeRunConfig {
        k_ensemble: 4,
        sde_steps: 8,
        ..SdeRunConfig::default()
    };
    let weights = quad_weights(&stepper);
    let probe_names = [
        "enc.proj.w",
        "enc.sigma.b",
        "dec.out.w",
        "sde.post.b0.mlp1.w",
        "sde.prior.proj.w",
        "sde.diff.l0.w",
    ];
    let inputs: Vec<ArrayD<f64>> = probe_names.iter().map(|n| params.p(n).to_array()).collect();
    let err = check_grad_directional(
        |probes| {
            let mut p = params.clone();
            for (name, probe) in probe_names.iter().zip(probes) {
                p.set_tensor(name, probe.clone());
            }
            let (next, kls, _) =
                niles_step(&stepper, &history, &p, &arch, &sde, ClosureMode::Niles, 0xacce).unwrap();
            next.vel
                .square()
                .weighted_sum_all(std::rc::Rc::clone(&weights))
                .add(&kls.kl_z0.scale(0.31))
                .add(&kls.kl_path.scale(0.17))
        },
        &inputs,
        1e-5,
        8,
        4242,
    );
    let elapsed = t0.elapsed();
    let pass = err < 1e-4 && elapsed.as_secs() < 300;
    report(
        4,
        pass,
        &format!("full-step gradient vs central differences: max rel err {err:.3e} (tol 1e-4), runtime {elapsed:?}"),
    );
    assert!(pass, "criterion 4: err {err:.3e}, runtime {elapsed:?}");
}

#[test]
fn criterion_05_sde_strong_order_and_reversibility() {
    // strong order on the OU oracle over dtau in {1/8 .. 1/128}
    struct Ou {
        lambda: f64,
        sigma: f64,
    }
    impl SdeDynamics for Ou {
        fn drift(&self, z: &Tensor, _t: f64) -> Tensor {
            z.scale(-self.lambda)
        }
        fn diffusion(&self, z: &Tensor, _t: f64) -> Tensor {
            Tensor::zeros(z.shape(), DType::F64).add_const(self.sigma)
        }
        fn kl_rate(&self, _z: &Tensor, _t: f64) -> Option<Tensor> {
            None
        }
        fn inputs(&self) -> Vec<Tensor> {
            vec![]
        }
    }
    let lambda = 1.5;
    let sigma = 0.8;
    let fine_n = 1usize << 16;
    let resolutions = [8usize, 16, 32, 64, 128];
    let n_paths = 64;
    let mut errors = vec![0.0f64; resolutions.len()];
    use rand_distr::Distribution;
    for path in 0..n_paths {
        let mut rng = niles_solver::seeds::rng_from(5000 + path as u64);
        let fine_std = (1.0 / fine_n as f64).sqrt();
        let fine: Vec<f64> = (0..fine_n)
            .map(|_| {
                let n: f64 = rand_distr::StandardNormal.sample(&mut rng);
                n * fine_std
            })
            .collect();
        let delta = 1.0 / fine_n as f64;
        let decay = (-lambda * delta).exp();
        let half = (-lambda * delta * 0.5).exp();
        let mut z_oracle = 1.0;
        for dw in &fine {
            z_oracle = decay * z_oracle + sigma * half * dw;
        }
        for (ri, &res) in resolutions.iter().enumerate() {
            let group = fine_n / res;
            let coarse: Vec<ArrayD<f64>> = (0..res)
                .map(|k| {
                    let s: f64 = fine[k * group..(k + 1) * group].iter().sum();
                    ArrayD::from_elem(IxDyn(&[1]), s)
                })
                .collect();
            let noise = WienerPath {
                increments: coarse,
                dtau: 1.0 / res as f64,
            };
            let sol = reversible_heun_solve(
                &Ou { lambda, sigma },
                &ArrayD::from_elem(IxDyn(&[1]), 1.0),
                &noise,
            )
            .unwrap();
            errors[ri] += (sol.z_final[[0]] - z_oracle).abs();
        }
    }
    for e in errors.iter_mut() {
        *e /= n_paths as f64;
    }
    let xs: Vec<f64> = resolutions.iter().map(|r| (1.0 / *r as f64).ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let xm = xs.iter().sum::<f64>() / n;
    let ym = ys.iter().sum::<f64>() / n;
    let slope = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - xm) * (y - ym))
        .sum::<f64>()
        / xs.iter().map(|x| (x - xm) * (x - xm)).sum::<f64>();

    // reversibility with the neural dynamics and frozen noise
    let arch = ArchConfig::tiny();
    let mut b = ParamBuilder::new(3, DType::F64);
    niles_model::encdec::build_encoder_decoder_params(&mut b, &arch);
    niles_model::sde::build_sde_params(&mut b, &arch);
    let mut params = b.params;
    for name in ["sde.post.out.w", "sde.prior.out.w"] {
        let shape = params.p(name).shape().to_vec();
        let mut w = ArrayD::zeros(IxDyn(&shape));
        for (i, v) in w.iter_mut().enumerate() {
            *v = ((i as f64) * 0.13).sin() * 0.1;
        }
        params.set(name, w);
    }
    let el = arch.latent_tokens();
    let wl = arch.latent_width();
    let ctx = Tensor::zeros(&[el, wl], DType::F64);
    let dynamics = PosteriorDynamics {
        params,
        arch: arch.clone(),
        context: ctx,
        zero_diffusion: false,
    };
    let z0 = ArrayD::from_shape_fn(IxDyn(&[el, wl]), |ix| ((ix[1] + 1) as f64 * 0.21).sin());
    let noise = WienerPath::sample(&[el, wl], 16, 99);
    let sol = reversible_heun_solve(&dynamics, &z0, &noise).unwrap();
    let back = reverse_solve(&dynamics, &sol.z_final, &sol.zhat_final, &noise);
    let mut resid = 0.0f64;
    for (a, b) in back.iter().zip(z0.iter()) {
        resid = resid.max((a - b).abs());
    }
    let pass = slope >= 0.45 && resid < 1e-10;
    report(
        5,
        pass,
        &format!("OU strong-order slope {slope:.2} (>= 0.45); reversibility residual {resid:.2e} (< 1e-10)"),
    );
    assert!(pass, "slope {slope}, residual {resid}");
}

#[test]
fn criterion_06_kl_identities() {
    // path KL vanishes exactly when posterior and prior drifts coincide
    struct Matched;
    impl SdeDynamics for Matched {
        fn drift(&self, z: &Tensor, _t: f64) -> Tensor {
            z.scale(0.7).add_const(0.1)
        }
        fn diffusion(&self, z: &Tensor, _t: f64) -> Tensor {
            Tensor::zeros(z.shape(), DType::F64).add_const(0.4)
        }
        fn kl_rate(&self, z: &Tensor, t: f64) -> Option<Tensor> {
            let h = self.drift(z, t);
            let g = self.diffusion(z, t);
            Some(h.sub(&h).div(&g).square().sum_all().scale(0.5))
        }
        fn inputs(&self) -> Vec<Tensor> {
            vec![]
        }
    }
    let noise = WienerPath::sample(&[6], 16, 3);
    let sol = reversible_heun_solve(&Matched, &ArrayD::from_elem(IxDyn(&[6]), 0.4), &noise).unwrap();
    let kl_zero = sol.kl == 0.0;

    // printed-form initial KL on hand-computed cases
    let n = 6;
    let mu = Tensor::zeros(&[n], DType::F64);
    let sigma = Tensor::constant(ArrayD::from_elem(IxDyn(&[n]), 0.1), DType::F64);
    let case1 = (kl_initial(&mu, &sigma, 0.1, false).scalar_value() - n as f64 / 2.0).abs();
    let mu2 = Tensor::constant(ArrayD::from_elem(IxDyn(&[1]), 0.1), DType::F64);
    let sigma2 = Tensor::constant(ArrayD::from_elem(IxDyn(&[1]), 0.1), DType::F64);
    let case2 = (kl_initial(&mu2, &sigma2, 0.1, false).scalar_value() - 1.0).abs();
    let pass = kl_zero && case1 < 1e-12 && case2 < 1e-12;
    report(
        6,
        pass,
        &format!(
            "matched-drift path KL = {} (exact 0); printed-form cases off by {case1:.1e}, {case2:.1e}",
            sol.kl
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_07_paper_architecture_shapes() {
    let arch = ArchConfig::paper();
    let mut b = ParamBuilder::new(0, DType::F64);
    niles_model::encdec::build_encoder_decoder_params(&mut b, &arch);
    let encdec_count = b.params.count();
    let mut b2 = ParamBuilder::new(0, DType::F64);
    niles_model::sde::build_sde_params(&mut b2, &arch);
    let sde_count = b2.params.count();

    let mut full = ParamBuilder::new(1, DType::F64);
    niles_model::encdec::build_encoder_decoder_params(&mut full, &arch);
    let params = full.params;
    let v = Tensor::constant(
        ArrayD::from_shape_fn(IxDyn(&[144, 25, 2]), |ix| ((ix[0] + ix[1]) as f64 * 0.01).sin()),
        DType::F64,
    );
    let enc = encode(&params, &arch, &v).unwrap();
    let latent_ok = enc.mu.shape() == [9, 192] && enc.sigma.shape() == [9, 192];
    let dec = decode(&params, &arch, &enc.mu, Some(&enc.skips)).unwrap();
    let dec_ok = dec.shape() == [144, 50];
    let pass = latent_ok && dec_ok;
    report(
        7,
        pass,
        &format!(
            "encoder latent {:?} (want (9, 192)); decoder output {:?} (want (144, 50)); \
             soft parameter-count check (non-failing): drift+diffusion {sde_count} vs reported \
             1862977, encoder-decoder {encdec_count} vs reported 2752178",
            enc.mu.shape(),
            dec.shape()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_degenerate_ensemble() {
    let mesh = SpectralMesh::new(4, 4, 3).unwrap();
    let cfg = SolverConfig::desk_les();
    let _stepper = Stepper::new(&mesh, cfg).unwrap();
    let arch = ArchConfig::desk();
    let mut params = build_params(&arch, ClosureMode::Niles, 3, DType::F64);
    // nontrivial decoder so members would differ if noise leaked in
    let shape = params.p("dec.out.w").shape().to_vec();
    let mut w = ArrayD::zeros(IxDyn(&shape));
    for (i, v) in w.iter_mut().enumerate() {
        *v = ((i as f64) * 0.07).sin() * 0.1;
    }
    params.set("dec.out.w", w);
    let two_pi = 2.0 * std::f64::consts::PI;
    let state = FlowField::from_fn(&mesh, |x, y| {
        ((two_pi * 4.0 * y).sin(), 0.2 * (two_pi * x).cos())
    });
    let v = Tensor::constant(state.velocity.clone().into_dyn(), DType::F64);
    let run = |k: usize| {
        let sde = SdeRunConfig {
            k_ensemble: k,
            zero_noise: true,
            ..SdeRunConfig::default()
        };
        compute_closure(&params, &arch, &sde, ClosureMode::Niles, &v, 2e-3, 9).unwrap()
    };
    let base = run(1);
    let mut pass = base.spread == 0.0;
    for k in [2usize, 4, 7] {
        let out = run(k);
        pass &= out.spread == 0.0;
        for (a, b) in base.tendency.value().iter().zip(out.tendency.value().iter()) {
            pass &= a.to_bits() == b.to_bits();
        }
    }
    report(
        8,
        pass,
        "zero diffusion + zero initial variance: ensemble spread exactly 0, output bitwise K-invariant",
    );
    assert!(pass);
}

#[test]
fn criterion_09_metrics() {
    // analytic rmse cases
    let mesh = SpectralMesh::new(4, 4, 8).unwrap();
    let c = 0.37;
    let f0 = FlowField::from_fn(&mesh, |_, _| (0.0, 0.0));
    let fc = FlowField::from_fn(&mesh, |_, _| (c, c));
    let e_const = (rmse(&fc, &f0).unwrap() - c * 2.0_f64.sqrt()).abs();
    let two_pi = 2.0 * std::f64::consts::PI;
    let fs = FlowField::from_fn(&mesh, |x, _| ((two_pi * x).sin(), 0.0));
    let e_sin = (rmse(&fs, &f0).unwrap() - 0.5_f64.sqrt()).abs();

    // Parseval on a turbulent fixture snapshot from the desk dataset
    let (data_dir, cfg) = desk_dataset();
    let manifest = load_manifest(&data_dir).unwrap();
    let test = load_split(&manifest, &data_dir, Split::Test).unwrap();
    let coarse_mesh = cfg.dataset.coarse_mesh.build().unwrap();
    let snap = test[0].field(test[0].snapshots.len() / 2, &coarse_mesh);
    let grid = to_uniform_grid(&snap, cfg.eval.spectrum_resolution);
    let spec = tke_spectrum_of_grid(&grid);
    let mean_ke = mean_kinetic_energy_of_grid(&grid);
    let parseval = (spec.total_energy() - mean_ke).abs() / mean_ke.max(1e-300);
    let pass = e_const < 1e-8 && e_sin < 1e-8 && parseval < 0.01;
    report(
        9,
        pass,
        &format!(
            "rmse analytic errors {e_const:.1e} / {e_sin:.1e} (< 1e-8); Parseval mismatch \
             {:.3}% on a turbulent snapshot (< 1%)",
            parseval * 100.0
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_10_end_to_end_desk_experiment() {
    let t_total = Instant::now();
    let (ckpt, log, cfg) = desk_trained_model();
    let (data_dir, _) = desk_dataset();

    // (a) smoke-training loss drop over the first 200 steps
    let early: f64 = log[..10].iter().map(|r| r.recon).sum::<f64>() / 10.0;
    let late: f64 = log[190..200].iter().map(|r| r.recon).sum::<f64>() / 10.0;
    let drop = 1.0 - late / early;
    let pass_a = drop >= 0.2;

    // (b) 1000-step rollouts: trained model vs no-closure, judged on the
    // high-wavenumber spectrum tail against filtered DNS
    let out_dir = scratch_root().join("desk-eval");
    let summary = cmd_evaluate(&cfg, &ckpt, &data_dir, 1000, true, &out_dir, 33).unwrap();

    // boundedness: max |u| of the model rollout below 5x the dataset ceiling
    let manifest = load_manifest(&data_dir).unwrap();
    let test = load_split(&manifest, &data_dir, Split::Test).unwrap();
    let coarse_mesh = cfg.dataset.coarse_mesh.build().unwrap();
    let data_ceiling = test
        .iter()
        .flat_map(|t| t.snapshots.iter())
        .flat_map(|s| s.iter())
        .fold(0.0f64, |a, &b| a.max(b.abs()));
    let params = niles_cli::commands::load_eval_params(&cfg, &ckpt).unwrap();
    let stepper = Stepper::new(&coarse_mesh, cfg.les_solver.clone()).unwrap();
    let initial = test[0].field(0, &coarse_mesh);
    let snaps = rollout(
        &stepper,
        &initial,
        1000,
        &RolloutKind::Closure {
            params: &params,
            arch: &cfg.arch,
            sde: &cfg.train.sde,
            mode: ClosureMode::Niles,
            seed: 33,
        },
    )
    .unwrap();
    let max_u = snaps
        .iter()
        .flat_map(|f| f.velocity.iter())
        .fold(0.0f64, |a, &b| a.max(b.abs()));
    let pass_bounded = max_u < 5.0 * data_ceiling;

    // spectrum tail distances over the coarse-resolved band
    let k_resolved = cfg.dataset.coarse_mesh.elements_x * (cfg.dataset.coarse_mesh.order + 1) / 2;
    let truncate = |s: &Spectrum| Spectrum {
        k: s.k[..=k_resolved].to_vec(),
        energy: s.energy[..=k_resolved].to_vec(),
        n_fields_averaged: s.n_fields_averaged,
    };
    let reference = truncate(&summary.reference);
    let find = |name: &str| {
        truncate(
            &summary
                .spectra
                .iter()
                .find(|(n, _)| n == name)
                .unwrap_or_else(|| panic!("missing {name} spectrum"))
                .1,
        )
    };
    let d_model = high_k_log_distance(&find("niles"), &reference, 1e-30);
    let d_nocl = high_k_log_distance(&find("no_closure"), &reference, 1e-30);
    let pass_tail = d_model < d_nocl;
    let elapsed = t_total.elapsed();
    let pass = pass_a && pass_bounded && pass_tail;
    report(
        10,
        pass,
        &format!(
            "(a) rollout loss drop over 200 smoke steps: {:.1}% (>= 20%); (b) 1000-step rollout \
             max |u| {max_u:.2} vs 5x data ceiling {:.2}; high-k spectrum log-L1 to filtered DNS: \
             model {d_model:.3} vs no-closure {d_nocl:.3}; criterion wall time {elapsed:?}",
            drop * 100.0,
            5.0 * data_ceiling
        ),
    );
    assert!(pass_a, "smoke training drop {:.3} < 0.2", drop);
    assert!(pass_bounded, "rollout unbounded: {max_u} vs ceiling {data_ceiling}");
    assert!(pass_tail, "tail distance {d_model:.3} not better than no-closure {d_nocl:.3}");
}

#[test]
fn criterion_11_determinism() {
    // reduced-scale double runs: dataset shards, training curves and
    // evaluation CSVs must be bit-identical
    let mut cfg = RunConfig::desk();
    cfg.dataset.dns_mesh = MeshSpec {
        elements_x: 8,
        elements_y: 8,
        order: 6,
    };
    cfg.dataset.n_trajectories = 3;
    cfg.dataset.n_val = 1;
    cfg.dataset.n_test = 1;
    cfg.dataset.burn_in_steps = 100;
    cfg.dataset.keep_steps = 300;
    cfg.dataset.solver.cg_tol = 1e-9;
    cfg.train.max_steps = Some(8);
    cfg.train.rollout_steps = 4;
    cfg.train.batch_size = 2;
    cfg.eval.rollout_steps = 20;
    cfg.validate().unwrap();

    let root = scratch_root().join("determinism");
    let _ = std::fs::remove_dir_all(&root);
    let run_all = |tag: &str| -> (Vec<u8>, String, Vec<u8>, Vec<u8>) {
        let dir = root.join(tag);
        let data = dir.join("data");
        build_dataset(&cfg.dataset, &data).unwrap();
        let manifest = load_manifest(&data).unwrap();
        // dataset bytes: concatenate all shards
        let mut shard_bytes = Vec::new();
        for t in &manifest.trajectories {
            for s in &t.shards {
                shard_bytes.extend(std::fs::read(data.join(&s.file)).unwrap());
            }
        }
        let train_data = load_split(&manifest, &data, Split::Train).unwrap();
        let mesh = cfg.dataset.coarse_mesh.build().unwrap();
        let stepper = Stepper::new(&mesh, cfg.les_solver.clone()).unwrap();
        let out = dir.join("train");
        let outcome = train(
            &stepper,
            &cfg.arch,
            &cfg.train,
            &train_data,
            &[],
            &out,
            &cfg.hash(),
            None,
        )
        .unwrap();
        // training curve without the wallclock column
        let curve = outcome
            .log
            .iter()
            .map(|r| {
                format!(
                    "{},{:e},{:e},{:e},{:e},{:e},{:e}",
                    r.step, r.lr, r.beta, r.recon, r.kl_z0, r.kl_path, r.total
                )
            })
            .collect::<Vec<_>>()
            .join("\n");
        let eval_dir = dir.join("eval");
        cmd_evaluate(
            &cfg,
            &outcome.final_checkpoint,
            &data,
            cfg.eval.rollout_steps,
            true,
            &eval_dir,
            7,
        )
        .unwrap();
        let rmse_csv = std::fs::read(eval_dir.join("rmse.csv")).unwrap();
        let spectra_csv = std::fs::read(eval_dir.join("spectra.csv")).unwrap();
        (shard_bytes, curve, rmse_csv, spectra_csv)
    };
    let a = run_all("run_a");
    let b = run_all("run_b");
    let pass = a.0 == b.0 && a.1 == b.1 && a.2 == b.2 && a.3 == b.3;
    report(
        11,
        pass,
        &format!(
            "two full runs: dataset shards identical: {}; training curves identical: {}; \
             evaluation CSVs identical: {} / {}",
            a.0 == b.0,
            a.1 == b.1,
            a.2 == b.2,
            a.3 == b.3
        ),
    );
    assert!(pass);
}
