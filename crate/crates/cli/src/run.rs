//! `verify` and `simulate`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use kinemix_core::collision::{estimate_spectral_gap, CollisionTensor, LinearizedOperator, SpectralConfig};
use kinemix_core::diagnostics::{estimate_constants, summary_table, Record, RecordSink, RunDiagnostics};
use kinemix_core::mixture::build_basis;
use kinemix_core::transport::{make_initial, Mode, Operators, SimState, Stepper};
use kinemix_core::verify::Verifier;
use serde::Serialize;
use serde_json::json;

use crate::config::{RunConfig, SCHEMA_VERSION};
use crate::{Failure, EXIT_BLOWUP, EXIT_FAILED_CHECK, EXIT_OK};

fn prepare(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::config(format!("cannot create output directory {}: {e}", dir.display())))
}

fn write_manifest(cfg: &RunConfig, command: &str) -> Result<(), Failure> {
    let dir = &cfg.output.dir;
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "schema_version": SCHEMA_VERSION,
        "config_hash": cfg.hash_hex(),
    });
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(&manifest).unwrap() + "\n")?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

#[derive(Serialize)]
struct SuiteSummary {
    suite: String,
    passed: bool,
    checks: usize,
    failures: usize,
    seconds: f64,
    error: Option<String>,
}

pub fn verify(cfg: &RunConfig) -> Result<u8, Failure> {
    let dir = &cfg.output.dir;
    prepare(dir)?;
    write_manifest(cfg, "verify")?;
    let hash = cfg.hash_hex();
    let suites = cfg.suites()?;
    let mut verifier = Verifier::new(cfg.verify_config(), cfg.output.tensor_cache.clone())?;
    let mut sink = RecordSink::with_config_hash(BufWriter::new(File::create(dir.join("records.ndjson"))?), hash.clone());
    let mut rows = Vec::new();
    for suite in suites {
        let start = Instant::now();
        let row = match verifier.run(suite) {
            Ok(rep) => {
                sink.extend(&rep.records)?;
                SuiteSummary {
                    suite: suite.name().into(),
                    passed: rep.passed(),
                    checks: rep.records.len(),
                    failures: rep.failures().count(),
                    seconds: rep.elapsed.as_secs_f64(),
                    error: None,
                }
            }
            Err(e) if e.is_config() => return Err(e.into()),
            Err(e) => SuiteSummary {
                suite: suite.name().into(),
                passed: false,
                checks: 0,
                failures: 1,
                seconds: start.elapsed().as_secs_f64(),
                error: Some(e.to_string()),
            },
        };
        println!(
            "{:<4} {:<13} {:>3} checks {:>3} failed {:>8.1}s{}",
            if row.passed { "PASS" } else { "FAIL" },
            row.suite,
            row.checks,
            row.failures,
            row.seconds,
            row.error.as_deref().map(|e| format!("  ({e})")).unwrap_or_default()
        );
        sink.flush()?;
        rows.push(row);
    }
    let (_, table) = sink.into_inner();
    let passed = rows.iter().all(|r| r.passed);
    let summary = json!({ "config_hash": hash, "passed": passed, "suites": rows });
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary).unwrap() + "\n")?;
    let mut text = format!("# kinemix verify\n# config_hash {hash}\n# suites {}\n", rows.len());
    for r in &rows {
        text += &format!("# {} {}\n", r.suite, if r.passed { "pass" } else { "fail" });
    }
    text += &summary_table(&table);
    fs::write(dir.join("summary.txt"), text)?;
    Ok(if passed { EXIT_OK } else { EXIT_FAILED_CHECK })
}

fn dump(state: &SimState<f64>, dir: &Path) -> PathBuf {
    let path = dir.join("abort.kmxs");
    if let Err(e) = state.save(&path) {
        eprintln!("kinemix: could not write {}: {e}", path.display());
    }
    path
}

pub fn simulate(cfg: &RunConfig) -> Result<u8, Failure> {
    let dir = &cfg.output.dir;
    prepare(dir)?;
    write_manifest(cfg, "simulate")?;
    let hash = cfg.hash();
    let hex = cfg.hash_hex();
    let params = cfg.params()?;
    let grid = cfg.velocity_grid()?;
    let space = cfg.spatial_grid()?;
    let scheme = cfg.scheme_config();

    let start = Instant::now();
    let tensor = CollisionTensor::new(&params, &grid, &cfg.collision())?;
    if let Some(d) = &cfg.output.tensor_cache {
        fs::create_dir_all(d)?;
    }
    let linear = LinearizedOperator::cached(&tensor, cfg.output.tensor_cache.as_deref())?;
    let basis = build_basis(&params, &grid)?;
    let nonlinear = match (scheme.nonlinear, scheme.nonlinear_events) {
        (false, _) => None,
        (true, n) if n > 0 && n < tensor.n_events() => Some(tensor.subsample(n, cfg.seed)?),
        (true, _) => Some(tensor),
    };
    let ops = Operators { params: params.clone(), grid, basis, linear, nonlinear };
    let stepper = Stepper::new(&ops, space.clone(), scheme.clone())?;
    eprintln!("operators ready in {:.1}s, dt = {:.4e}", start.elapsed().as_secs_f64(), stepper.dt);

    let profile = cfg.profile();
    let mut state = if profile.amplitude == 0.0 {
        SimState::zeros(space.n, ops.dim(), hash)
    } else {
        make_initial(&profile, &ops, &space, hash)?
    };
    if scheme.mode == Mode::Micromacro {
        state = state.with_split(&ops.basis);
    }
    let spectral = estimate_spectral_gap(&ops.linear, &ops.basis, &ops.grid, &SpectralConfig::default())?;
    let constants = estimate_constants(&ops.linear, &ops.basis, &ops.grid, &params, &spectral, cfg.diagnostics.theta)?;
    let mut diag = RunDiagnostics::new(&ops, space.clone(), constants, cfg.diagnostics_config(), &state);

    let mut sink = RecordSink::with_config_hash(BufWriter::new(File::create(dir.join("records.ndjson"))?), hex.clone());
    let ckpt_dir = dir.join("checkpoints");
    let every = cfg.output.checkpoint_every;
    if every > 0 {
        fs::create_dir_all(&ckpt_dir)?;
    }
    let steps = stepper.steps_to(state.t, cfg.scheme.t_final);
    for _ in 0..steps {
        let next = match stepper.step(&state) {
            Ok(n) => n,
            Err(e) => {
                let f = Failure::from(e);
                if f.code == EXIT_BLOWUP {
                    sink.flush()?;
                    let p = dump(&state, dir);
                    return Err(Failure::new(EXIT_BLOWUP, format!("{} (state at t = {:.6} written to {})", f.message, state.t, p.display())));
                }
                return Err(f);
            }
        };
        let records: Vec<Record> = diag.observe(&state, &next)?;
        sink.extend(&records)?;
        let ratio = diag.energy.ratio.last().copied().unwrap_or(0.0);
        if !ratio.is_finite() || ratio > cfg.diagnostics.blowup_ratio {
            sink.flush()?;
            let p = dump(&next, dir);
            return Err(Failure::new(
                EXIT_BLOWUP,
                format!("blow-up at t = {:.6}: energy ratio {ratio:e} (state written to {})", next.t, p.display()),
            ));
        }
        if every > 0 && next.step % every == 0 {
            next.save(&ckpt_dir.join(format!("step_{:08}.kmxs", next.step)))?;
        }
        state = next;
    }
    sink.extend(&diag.finish()?)?;
    sink.flush()?;
    let failures = sink.failures();
    let (_, table) = sink.into_inner();
    let energy = json!({ "config_hash": hex, "steps": steps, "dt": stepper.dt, "report": &diag.energy });
    fs::write(dir.join("energy.json"), serde_json::to_string(&energy).unwrap() + "\n")?;
    let text = format!(
        "# kinemix simulate\n# config_hash {hex}\n# steps {steps} dt {:.6e} t_final {:.6}\n{}",
        stepper.dt,
        state.t,
        summary_table(&table)
    );
    fs::write(dir.join("summary.txt"), &text)?;
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())?;
    Ok(if failures == 0 { EXIT_OK } else { EXIT_FAILED_CHECK })
}
