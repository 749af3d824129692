//! Subcommand implementations: dataset generation, training, rollout
//! evaluation with baselines, integrity verification, and standalone
//! spectra.

use crate::config::RunConfig;
use crate::svg::{plot, Series};
use anyhow::{bail, Result};
use niles_model::closure::{ClosureMode, RolloutKind};
use niles_model::train::{load_params_from_checkpoint, train, TrainConfig};
use niles_model::Params;
use niles_solver::dataset::{
    build_dataset, load_manifest, load_split, verify_dataset, CoarseTrajectory, Split,
};
use niles_solver::metrics::{rmse, tke_spectrum, Spectrum};
use niles_solver::stepper::Stepper;
use niles_solver::FlowField;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

fn artifact_header(cfg_hash: &str, seed: u64) -> String {
    format!("# config_hash={cfg_hash}\n# code_version={CODE_VERSION}\n# seed={seed}\n")
}

pub fn cmd_generate(config: &RunConfig, out: &Path, force: bool) -> Result<()> {
    if out.join("manifest.json").exists() && !force {
        bail!(
            "dataset manifest already exists at {} (use --force to regenerate)",
            out.join("manifest.json").display()
        );
    }
    let manifest = build_dataset(&config.dataset, out)?;
    let n_snaps: usize = manifest
        .trajectories
        .iter()
        .map(|t| t.shards.iter().map(|s| s.n_snapshots).sum::<usize>())
        .sum();
    println!("manifest: {}", out.join("manifest.json").display());
    println!(
        "trajectories: {} (train {:?} / val {:?} / test {:?}), {} coarse snapshots, coarse dt {}",
        manifest.trajectories.len(),
        manifest.splits.train,
        manifest.splits.val,
        manifest.splits.test,
        n_snaps,
        manifest.coarse_dt
    );
    Ok(())
}

pub fn cmd_verify(data_dir: &Path) -> Result<()> {
    let manifest = load_manifest(data_dir)?;
    let checked = verify_dataset(&manifest, data_dir)?;
    println!("ok: {checked} shards verified against the manifest");
    Ok(())
}

pub fn cmd_train(
    config: &RunConfig,
    model: ClosureMode,
    data_dir: &Path,
    out: &Path,
    resume: Option<&Path>,
    seed_override: Option<u64>,
) -> Result<()> {
    let manifest = load_manifest(data_dir)?;
    let train_data = load_split(&manifest, data_dir, Split::Train)?;
    let val_data = load_split(&manifest, data_dir, Split::Val)?;
    let coarse_mesh = config.dataset.coarse_mesh.build()?;
    let stepper = Stepper::new(&coarse_mesh, config.les_solver.clone())?;
    let mut tc: TrainConfig = config.train.clone();
    tc.model = model;
    if let Some(s) = seed_override {
        tc.seed = s;
    }
    let outcome = train(
        &stepper,
        &config.arch,
        &tc,
        &train_data,
        &val_data,
        out,
        &config.hash(),
        resume,
    )?;
    println!("final checkpoint: {}", outcome.final_checkpoint.display());
    if let (Some(v), Some(b)) = (outcome.best_val, outcome.best_checkpoint.as_ref()) {
        println!("best validation mse {v:.6e} at {}", b.display());
    }
    if let (Some(first), Some(last)) = (outcome.log.first(), outcome.log.last()) {
        println!(
            "rollout loss: {:.6e} -> {:.6e} over {} steps",
            first.recon,
            last.recon,
            outcome.log.len()
        );
    }
    Ok(())
}

struct MethodRun {
    snapshots: Vec<FlowField>,
    wall_seconds: f64,
}

fn run_method(
    stepper: &Stepper,
    initial: &FlowField,
    steps: usize,
    kind: &RolloutKind,
) -> Result<MethodRun> {
    let t0 = Instant::now();
    let snapshots = niles_model::closure::rollout(stepper, initial, steps, kind)?;
    Ok(MethodRun {
        snapshots,
        wall_seconds: t0.elapsed().as_secs_f64(),
    })
}

pub struct EvalSummary {
    /// (method, mean spectrum over test trajectories)
    pub spectra: Vec<(String, Spectrum)>,
    /// reference spectrum from the filtered-DNS data
    pub reference: Spectrum,
    /// rmse[method][step] averaged over test trajectories
    pub rmse: Vec<(String, Vec<f64>)>,
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_evaluate(
    config: &RunConfig,
    checkpoint: &Path,
    data_dir: &Path,
    steps: usize,
    baselines: bool,
    out: &Path,
    seed: u64,
) -> Result<EvalSummary> {
    if !checkpoint.exists() {
        bail!("missing checkpoint {}", checkpoint.display());
    }
    std::fs::create_dir_all(out)?;
    let manifest = load_manifest(data_dir)?;
    let test = load_split(&manifest, data_dir, Split::Test)?;
    if test.is_empty() {
        bail!("test split is empty");
    }
    let coarse_mesh = config.dataset.coarse_mesh.build()?;
    let stepper = Stepper::new(&coarse_mesh, config.les_solver.clone())?;
    let params = load_params_from_checkpoint(
        checkpoint,
        &config.arch,
        config.train.model,
        config.train.precision.dtype(),
    )?;
    let model_name = match config.train.model {
        ClosureMode::Niles => "niles",
        ClosureMode::Deterministic => "deterministic",
    };

    let mut method_specs: Vec<(String, RolloutKind)> = vec![(
        model_name.to_string(),
        RolloutKind::Closure {
            params: &params,
            arch: &config.arch,
            sde: &config.train.sde,
            mode: config.train.model,
            seed,
        },
    )];
    if baselines {
        method_specs.push((
            "implicit_les".into(),
            RolloutKind::ImplicitLes(config.eval.implicit_les_alpha),
        ));
        method_specs.push(("no_closure".into(), RolloutKind::NoClosure));
    }

    // per-method per-step rmse sums and spectra sums over test trajectories
    let mut rmse_acc: Vec<Vec<f64>> = vec![Vec::new(); method_specs.len()];
    let mut ref_rmse_acc: Vec<f64> = Vec::new();
    let mut spectra_acc: Vec<Vec<Spectrum>> = vec![Vec::new(); method_specs.len()];
    let mut ref_spectra: Vec<Spectrum> = Vec::new();
    let mut timings: Vec<(String, f64)> = Vec::new();
    let n = config.eval.spectrum_resolution;

    for traj in &test {
        let initial = traj.field(0, &coarse_mesh);
        let compare_len = steps.min(traj.snapshots.len() - 1);
        // reference: the filtered-DNS snapshots themselves (self-comparison
        // is identically zero and pins the column convention)
        for k in 1..=compare_len {
            let target = traj.field(k, &coarse_mesh);
            let r = rmse(&target, &target)?;
            if ref_rmse_acc.len() < k {
                ref_rmse_acc.push(0.0);
            }
            ref_rmse_acc[k - 1] += r;
        }
        let dns_spec: Vec<Spectrum> = (0..traj.snapshots.len())
            .step_by(config.eval.spectrum_every)
            .map(|k| tke_spectrum(&traj.field(k, &coarse_mesh), n))
            .collect();
        ref_spectra.push(Spectrum::average(&dns_spec)?);

        for (mi, (name, kind)) in method_specs.iter().enumerate() {
            let run = run_method(&stepper, &initial, steps, kind)?;
            timings.push((format!("{name}/traj{}", traj.id), run.wall_seconds));
            if rmse_acc[mi].len() < compare_len {
                rmse_acc[mi].resize(compare_len, 0.0);
            }
            for k in 1..=compare_len {
                let target = traj.field(k, &coarse_mesh);
                rmse_acc[mi][k - 1] += rmse(&run.snapshots[k], &target)?;
            }
            let spec: Vec<Spectrum> = (0..run.snapshots.len())
                .step_by(config.eval.spectrum_every)
                .map(|f| tke_spectrum(&run.snapshots[f], n))
                .collect();
            spectra_acc[mi].push(Spectrum::average(&spec)?);
        }
    }

    let n_test = test.len() as f64;
    let header = artifact_header(&config.hash(), seed);

    // rmse.csv
    let mut rmse_rows: Vec<(String, Vec<f64>)> = Vec::new();
    rmse_rows.push((
        "reference".into(),
        ref_rmse_acc.iter().map(|v| v / n_test).collect(),
    ));
    for (mi, (name, _)) in method_specs.iter().enumerate() {
        rmse_rows.push((name.clone(), rmse_acc[mi].iter().map(|v| v / n_test).collect()));
    }
    {
        let mut f = std::fs::File::create(out.join("rmse.csv"))?;
        write!(f, "{header}")?;
        let cols: Vec<String> = rmse_rows.iter().map(|(n, _)| format!("rmse_{n}")).collect();
        writeln!(f, "step,t,{}", cols.join(","))?;
        let max_len = rmse_rows.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
        for k in 0..max_len {
            let t = (k + 1) as f64 * stepper.cfg.dt;
            let vals: Vec<String> = rmse_rows
                .iter()
                .map(|(_, v)| v.get(k).map(|x| format!("{x:.10e}")).unwrap_or_default())
                .collect();
            writeln!(f, "{},{:.6e},{}", k + 1, t, vals.join(","))?;
        }
    }

    // spectra.csv
    let reference = Spectrum::average(&ref_spectra)?;
    let mut spectra: Vec<(String, Spectrum)> = Vec::new();
    for (mi, (name, _)) in method_specs.iter().enumerate() {
        spectra.push((name.clone(), Spectrum::average(&spectra_acc[mi])?));
    }
    {
        let mut f = std::fs::File::create(out.join("spectra.csv"))?;
        write!(f, "{header}")?;
        let cols: Vec<String> = spectra.iter().map(|(n, _)| format!("e_{n}")).collect();
        writeln!(f, "k,e_reference,{}", cols.join(","))?;
        for (i, &k) in reference.k.iter().enumerate() {
            let vals: Vec<String> = spectra
                .iter()
                .map(|(_, s)| format!("{:.10e}", s.energy[i]))
                .collect();
            writeln!(f, "{k},{:.10e},{}", reference.energy[i], vals.join(","))?;
        }
    }

    // timings.csv: wall-clock per simulated second (hardware-dependent,
    // excluded from determinism comparisons)
    {
        let sim_seconds = steps as f64 * stepper.cfg.dt;
        let mut f = std::fs::File::create(out.join("timings.csv"))?;
        write!(f, "{header}")?;
        writeln!(f, "method,wall_seconds,sim_seconds,wall_per_sim_second")?;
        for (name, wall) in &timings {
            writeln!(
                f,
                "{name},{wall:.3},{sim_seconds:.4},{:.3}",
                wall / sim_seconds.max(1e-300)
            )?;
        }
    }

    // svg panels
    let rmse_series: Vec<Series> = rmse_rows
        .iter()
        .map(|(name, v)| Series {
            label: name.clone(),
            x: (1..=v.len()).map(|k| k as f64).collect(),
            y: v.clone(),
        })
        .collect();
    std::fs::write(
        out.join("rmse.svg"),
        plot("rollout rmse", "step", "rmse", &rmse_series, false),
    )?;
    let mut spec_series = vec![Series {
        label: "reference".into(),
        x: reference.k.iter().map(|&k| k as f64).collect(),
        y: reference.energy.clone(),
    }];
    for (name, s) in &spectra {
        spec_series.push(Series {
            label: name.clone(),
            x: s.k.iter().map(|&k| k as f64).collect(),
            y: s.energy.clone(),
        });
    }
    std::fs::write(
        out.join("spectra.svg"),
        plot("time-averaged tke spectrum", "k", "E(k)", &spec_series, true),
    )?;

    println!(
        "wrote rmse.csv, spectra.csv, timings.csv, rmse.svg, spectra.svg to {}",
        out.display()
    );
    Ok(EvalSummary {
        spectra,
        reference,
        rmse: rmse_rows,
    })
}

pub fn cmd_spectrum(config: &RunConfig, data_dir: &Path, out: &Path, seed: u64) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let manifest = load_manifest(data_dir)?;
    let test = load_split(&manifest, data_dir, Split::Test)?;
    if test.is_empty() {
        bail!("test split is empty");
    }
    let coarse_mesh = config.dataset.coarse_mesh.build()?;
    let n = config.eval.spectrum_resolution;
    let per_traj: Result<Vec<Spectrum>> = test
        .iter()
        .map(|traj: &CoarseTrajectory| {
            let specs: Vec<Spectrum> = (0..traj.snapshots.len())
                .step_by(config.eval.spectrum_every)
                .map(|k| tke_spectrum(&traj.field(k, &coarse_mesh), n))
                .collect();
            Ok(Spectrum::average(&specs)?)
        })
        .collect();
    let avg = Spectrum::average(&per_traj?)?;
    let mut f = std::fs::File::create(out.join("dns_spectrum.csv"))?;
    write!(f, "{}", artifact_header(&config.hash(), seed))?;
    writeln!(f, "k,e")?;
    for (k, e) in avg.k.iter().zip(&avg.energy) {
        writeln!(f, "{k},{e:.10e}")?;
    }
    std::fs::write(
        out.join("dns_spectrum.svg"),
        plot(
            "filtered-dns tke spectrum",
            "k",
            "E(k)",
            &[Series {
                label: "reference".into(),
                x: avg.k.iter().map(|&k| k as f64).collect(),
                y: avg.energy.clone(),
            }],
            true,
        ),
    )?;
    println!("wrote dns_spectrum.csv and dns_spectrum.svg to {}", out.display());
    Ok(())
}

/// Log-space L1 distance over the top third of wavenumber bins, the
/// long-term-statistics figure of merit.
pub fn high_k_log_distance(a: &Spectrum, b: &Spectrum, floor: f64) -> f64 {
    let n = a.energy.len().min(b.energy.len());
    let start = n - n / 3;
    let mut d = 0.0;
    for i in start..n {
        let x = a.energy[i].max(floor).ln();
        let y = b.energy[i].max(floor).ln();
        d += (x - y).abs();
    }
    d
}

/// Expose params loading for the acceptance harness.
pub fn load_eval_params(config: &RunConfig, checkpoint: &Path) -> Result<Params> {
    Ok(load_params_from_checkpoint(
        checkpoint,
        &config.arch,
        config.train.model,
        config.train.precision.dtype(),
    )?)
}
