//! Implementations of the six subcommands. Each one loads its inputs,
//! drives the library, prints a text or JSON report, and stamps a manifest
//! next to every file it writes.

use std::fs;
use std::time::Instant;

use serde::Deserialize;
use serde_json::json;
use sprnn_core::{
    check_feasibility, fnv1a64_f32, load_dense, load_sparse, max_rel_err, optimize_layer,
    prune_dense, run_lstm_sequence_dense, run_rnn_sequence_dense, save_dense, save_sparse,
    simulate_layer, ActivationFn, Algorithm, ArchProfile, CellKind, FeasibilityVerdict,
    LimitingResource, RunConfig, SparseLayer, SyncMode, WarpSchedule, WorkloadShape,
};

use crate::manifest::{Manifest, SCHEMA_VERSION};
use crate::synth;
use crate::{
    Cell, CliResult, Failure, FeasibilityArgs, GenArgs, LayoutArgs, PruneArgs, RunArgs,
    SimulateArgs,
};

/// One aligned `label value` report line.
fn kv(label: &str, value: impl std::fmt::Display) {
    println!("{label:<22}{value}");
}

/// Prefixes a library error with the file it concerns; the exit-code class
/// is unchanged.
fn at_path(e: sprnn_core::Error, path: &std::path::Path) -> Failure {
    match Failure::from(e) {
        Failure::Usage(m) => Failure::Usage(format!("{}: {m}", path.display())),
        Failure::Format(m) => Failure::Format(format!("{}: {m}", path.display())),
        other => other,
    }
}

/// Creates the directories an output path needs.
fn ensure_parent(path: &std::path::Path) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| {
                Failure::Format(format!("cannot create {}: {e}", parent.display()))
            })?;
        }
    }
    Ok(())
}

fn print_json(value: &serde_json::Value) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("reports contain no non-serializable values")
    );
}

/// Maps the CLI cell choice onto the layer geometry: an LSTM layer stacks
/// the four gate rows of each unit, so its hidden size is rows/4.
fn resolve_cell(cell: Cell, rows: usize) -> CliResult<(CellKind, usize)> {
    let kind: CellKind = cell.into();
    let hidden = match kind {
        CellKind::Rnn => rows,
        CellKind::Lstm => {
            if rows % 4 != 0 {
                return Err(Failure::Usage(format!(
                    "an lstm layer needs a row count divisible by 4, got {rows}"
                )));
            }
            rows / 4
        }
    };
    Ok((kind, hidden))
}

fn padded(mut layer: SparseLayer) -> SparseLayer {
    layer.pad_rows();
    layer
}

pub fn gen(a: GenArgs) -> CliResult<()> {
    if a.rows == 0 || a.cols == 0 {
        return Err(Failure::Usage(format!(
            "rows and cols must be at least 1, got {}x{}",
            a.rows, a.cols
        )));
    }
    let mut rng = synth::rng_for(a.seed);
    let matrix = synth::dense_matrix(a.rows, a.cols, a.dist, &mut rng)?;
    ensure_parent(&a.out)?;
    save_dense(&a.out, &matrix).map_err(|e| at_path(e, &a.out))?;

    let mut manifest = Manifest::new(
        "gen",
        Some(a.seed),
        json!({
            "rows": a.rows,
            "cols": a.cols,
            "dist": a.dist.label(),
            "generator": "chacha8 keyed by seed, row-major fill",
        }),
    );
    manifest.stamp_output(&a.out)?;
    let manifest_path = manifest.write_sidecar(&a.out)?;

    if a.json {
        print_json(&json!({
            "schema_version": SCHEMA_VERSION,
            "manifest": manifest,
        }));
    } else {
        kv("wrote", a.out.display());
        kv("matrix", format!("{} x {}", a.rows, a.cols));
        kv("dist", a.dist.label());
        kv("seed", a.seed);
        kv("checksum", &manifest.outputs[0].checksum_fnv1a64);
        kv("manifest", manifest_path.display());
    }
    Ok(())
}

pub fn prune(a: PruneArgs) -> CliResult<()> {
    let dense = load_dense(&a.input).map_err(|e| at_path(e, &a.input))?;
    let mut layer = prune_dense(&dense, a.mode.into(), a.density)?;

    let slots = (dense.rows() * dense.cols()) as f64;
    let kept = layer.total_pairs();
    let pre_density = kept as f64 / slots;
    layer.pad_rows();
    let stored = layer.total_pairs();
    let post_density = stored as f64 / slots;
    ensure_parent(&a.out)?;
    save_sparse(&a.out, &layer).map_err(|e| at_path(e, &a.out))?;

    let mut manifest = Manifest::new(
        "prune",
        None,
        json!({
            "density": a.density,
            "mode": format!("{:?}", a.mode).to_lowercase(),
        }),
    );
    manifest.stamp_input(&a.input)?;
    manifest.stamp_output(&a.out)?;
    let manifest_path = manifest.write_sidecar(&a.out)?;

    let report = json!({
        "rows": dense.rows(),
        "cols": dense.cols(),
        "requested_density": a.density,
        "kept_pairs": kept,
        "padding_pairs": stored - kept,
        "pairs_per_row": layer.max_row_len(),
        "pre_padding_density": pre_density,
        "post_padding_density": post_density,
    });
    if a.json {
        print_json(&json!({
            "schema_version": SCHEMA_VERSION,
            "manifest": manifest,
            "report": report,
        }));
    } else {
        kv("wrote", a.out.display());
        kv(
            "layer",
            format!(
                "{} x {}, {} pairs/row",
                dense.rows(),
                dense.cols(),
                layer.max_row_len()
            ),
        );
        kv("requested density", a.density);
        kv("pre-padding density", format!("{pre_density:.6}"));
        kv("post-padding density", format!("{post_density:.6}"));
        kv("padding pairs", stored - kept);
        kv("manifest", manifest_path.display());
    }
    Ok(())
}

pub fn layout(a: LayoutArgs) -> CliResult<()> {
    let layer = padded(load_sparse(&a.input).map_err(|e| at_path(e, &a.input))?);
    let before = layer.layout();
    let optimized = optimize_layer(&layer, a.width)?;
    ensure_parent(&a.out)?;
    save_sparse(&a.out, &optimized).map_err(|e| at_path(e, &a.out))?;

    let mut manifest = Manifest::new("layout", None, json!({ "width": a.width }));
    manifest.stamp_input(&a.input)?;
    manifest.stamp_output(&a.out)?;
    let manifest_path = manifest.write_sidecar(&a.out)?;

    if a.json {
        print_json(&json!({
            "schema_version": SCHEMA_VERSION,
            "manifest": manifest,
            "report": {
                "rows": optimized.rows(),
                "cols": optimized.cols(),
                "pairs_per_row": optimized.max_row_len(),
                "layout_before": before.to_string(),
                "layout_after": optimized.layout().to_string(),
            },
        }));
    } else {
        kv("wrote", a.out.display());
        kv(
            "layer",
            format!(
                "{} x {}, {} pairs/row",
                optimized.rows(),
                optimized.cols(),
                optimized.max_row_len()
            ),
        );
        kv("layout", format!("{before} -> {}", optimized.layout()));
        kv("manifest", manifest_path.display());
    }
    Ok(())
}

pub fn simulate(a: SimulateArgs) -> CliResult<()> {
    let layer = padded(load_sparse(&a.input).map_err(|e| at_path(e, &a.input))?);
    let (cell, hidden) = resolve_cell(a.cell, layer.rows())?;
    let lanes = a.lanes.unwrap_or_else(|| cell.default_lanes_per_row());
    let pairs = layer
        .pairs_per_row()
        .expect("padded layers always have uniform rows");
    let schedule = WarpSchedule::new(cell, hidden, pairs, lanes)?;
    let report = simulate_layer(&schedule, &layer, a.width)?;

    let mut manifest = Manifest::new(
        "simulate",
        None,
        json!({
            "width": a.width,
            "cell": format!("{:?}", a.cell).to_lowercase(),
            "lanes_per_row": lanes,
        }),
    );
    manifest.stamp_input(&a.input)?;

    if a.json {
        print_json(&json!({
            "schema_version": SCHEMA_VERSION,
            "manifest": manifest,
            "report": report,
        }));
    } else {
        kv(
            "layer",
            format!("{} x {}, {} pairs/row", report.rows, report.cols, report.pairs_per_row),
        );
        kv("layout", layer.layout());
        kv("density", format!("{:.6}", report.density));
        kv("lanes per row", report.lanes_per_row);
        kv("vector width", report.vector_width);
        kv("load instructions", report.total_load_instructions);
        kv("ideal cycles", report.ideal_cycles);
        kv("actual cycles", report.actual_cycles);
        kv("excess cycles", report.actual_cycles - report.ideal_cycles);
        kv("penalty", format!("{:.4}", report.penalty));
    }
    Ok(())
}

/// Optional run settings file; explicit flags override any field.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSpecFile {
    sync_mode: Option<String>,
    workers: Option<usize>,
    vector_width: Option<u8>,
    timesteps: Option<usize>,
    batch: Option<usize>,
    activation: Option<String>,
    trace: Option<bool>,
}

pub fn run(a: RunArgs) -> CliResult<()> {
    let file_cfg: RunSpecFile = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                Failure::Format(format!("cannot read {}: {e}", path.display()))
            })?;
            serde_json::from_str(&text).map_err(|e| {
                Failure::Format(format!("bad run config {}: {e}", path.display()))
            })?
        }
        None => RunSpecFile::default(),
    };

    let timesteps = a.timesteps.or(file_cfg.timesteps).unwrap_or(16);
    let batch = a.batch.or(file_cfg.batch).unwrap_or(1);
    let workers = a
        .workers
        .or(file_cfg.workers)
        .unwrap_or_else(|| RunConfig::default().workers);
    let width = match a.width.or(file_cfg.vector_width) {
        Some(w) if matches!(w, 1 | 2 | 4) => w,
        Some(w) => {
            return Err(Failure::Usage(format!(
                "vector width must be 1, 2, or 4, got {w}"
            )))
        }
        None => 1,
    };
    let sync: SyncMode = match a.sync {
        Some(s) => s.into(),
        None => match &file_cfg.sync_mode {
            Some(s) => s.parse()?,
            None => SyncMode::Lamport,
        },
    };
    let activation_explicit = a.activation.is_some() || file_cfg.activation.is_some();
    let activation: ActivationFn = match a.activation {
        Some(x) => x.into(),
        None => match &file_cfg.activation {
            Some(s) => s.parse()?,
            None => ActivationFn::Tanh,
        },
    };
    let trace = a.trace || file_cfg.trace.unwrap_or(false);
    if timesteps == 0 {
        return Err(Failure::Usage("timesteps must be at least 1".to_string()));
    }

    let layer = padded(load_sparse(&a.input).map_err(|e| at_path(e, &a.input))?);
    let (cell, hidden) = resolve_cell(a.cell, layer.rows())?;
    if cell == CellKind::Lstm && activation_explicit {
        return Err(Failure::Usage(
            "lstm gate nonlinearities are fixed; --activation applies to rnn cells only"
                .to_string(),
        ));
    }
    let pairs = layer
        .pairs_per_row()
        .expect("padded layers always have uniform rows");
    let schedule = WarpSchedule::new(cell, hidden, pairs, cell.default_lanes_per_row())?;

    // Fixed draw order keyed by --seed: h0, then the cell state for LSTM
    // runs, then one broadcast bias per step.
    let mut rng = synth::rng_for(a.seed);
    let h0 = synth::activation_state(hidden, batch, &mut rng)?;
    let c0 = match cell {
        CellKind::Lstm => Some(synth::activation_state(hidden, batch, &mut rng)?),
        CellKind::Rnn => None,
    };
    let biases = synth::broadcast_biases(layer.rows(), timesteps, &mut rng)?;

    let config = RunConfig {
        sync_mode: sync,
        workers,
        vector_width: width,
        trace,
        ..RunConfig::default()
    };
    let exec = sprnn_core::Executor::new(&layer, &schedule, config)?;
    let started = Instant::now();
    let output = match &c0 {
        None => exec.run(&h0, &biases, activation)?,
        Some(c0) => exec.run_lstm(&h0, c0, &biases)?,
    };
    let elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
    let final_checksum = format!("{:016x}", fnv1a64_f32(output.hidden.data()));

    // Dense reference check on the reconstructed matrix.
    let verify = if a.verify {
        let dense = layer.reconstruct_dense();
        let err = match &c0 {
            None => {
                let (h, _) = run_rnn_sequence_dense(&dense, &h0, &biases, activation, false)?;
                max_rel_err(h.data(), output.hidden.data())
            }
            Some(c0) => {
                let (h, c, _) = run_lstm_sequence_dense(&dense, &h0, c0, &biases, false)?;
                let cell_out = output
                    .cell
                    .as_ref()
                    .expect("lstm runs always produce a cell state");
                max_rel_err(h.data(), output.hidden.data())
                    .max(max_rel_err(c.data(), cell_out.data()))
            }
        };
        Some(err)
    } else {
        None
    };

    let mut manifest = Manifest::new(
        "run",
        Some(a.seed),
        json!({
            "cell": format!("{:?}", a.cell).to_lowercase(),
            "timesteps": timesteps,
            "batch": batch,
            "activation": match cell { CellKind::Rnn => Some(activation.to_string()), CellKind::Lstm => None },
            "sync": sync.to_string(),
            "workers": workers,
            "width": width,
            "synthesis": "chacha8 keyed by seed: h0, cell state (lstm), then per-step broadcast biases; uniform [-1,1)",
        }),
    );
    manifest.stamp_input(&a.input)?;

    let mut manifest_path = None;
    if let Some(out) = &a.out {
        let state = json!({
            "schema_version": SCHEMA_VERSION,
            "hidden": { "rows": hidden, "batch": batch, "data": output.hidden.data() },
            "cell": output.cell.as_ref().map(|c| {
                json!({ "rows": hidden, "batch": batch, "data": c.data() })
            }),
        });
        let mut text = serde_json::to_string_pretty(&state)
            .expect("state reports contain no non-serializable values");
        text.push('\n');
        ensure_parent(out)?;
        fs::write(out, text)
            .map_err(|e| Failure::Format(format!("cannot write {}: {e}", out.display())))?;
        manifest.stamp_output(out)?;
        manifest_path = Some(manifest.write_sidecar(out)?);
    }

    let report = json!({
        "hidden": hidden,
        "batch": batch,
        "timesteps": timesteps,
        "elapsed_ms": elapsed_ms,
        "final_checksum": final_checksum,
        "stats": output.stats,
        "trace": output.trace,
        "verify": verify.map(|err| json!({
            "max_rel_err": err,
            "tolerance": a.tolerance,
            "passed": err <= a.tolerance,
        })),
    });
    if a.json {
        print_json(&json!({
            "schema_version": SCHEMA_VERSION,
            "manifest": manifest,
            "report": report,
        }));
    } else {
        kv(
            "layer",
            format!("{} x {}, {pairs} pairs/row ({})", layer.rows(), layer.cols(), layer.layout()),
        );
        kv(
            "cell",
            format!("{}, hidden {hidden}, batch {batch}", format!("{:?}", a.cell).to_lowercase()),
        );
        kv("timesteps", timesteps);
        kv("engine", format!("{sync}, {workers} workers, width {width}"));
        kv("elapsed", format!("{elapsed_ms:.2} ms"));
        kv("publishes", output.stats.publishes);
        kv("canonicalized writes", output.stats.canonicalized_writes);
        kv("max polls", output.stats.max_polls);
        kv("prefetched words", output.stats.prefetched_words);
        kv("final checksum", &final_checksum);
        if let Some(err) = verify {
            kv(
                "max relative error",
                format!("{err:.3e} (tolerance {:.3e})", a.tolerance),
            );
        }
        if let Some(path) = &manifest_path {
            kv("state", a.out.as_ref().expect("out set with manifest").display());
            kv("manifest", path.display());
        }
    }

    if let Some(err) = verify {
        if err > a.tolerance {
            return Err(Failure::Verification(format!(
                "max relative error {err:.3e} exceeds tolerance {:.3e}",
                a.tolerance
            )));
        }
    }
    Ok(())
}

pub fn feasibility(a: FeasibilityArgs) -> CliResult<()> {
    let arch = ArchProfile::load_json(&a.arch).map_err(|e| at_path(e, &a.arch))?;
    let shape = WorkloadShape {
        hidden: a.hidden,
        density: a.density,
        batch: a.batch,
        vector_width: a.width,
        sync_mode: a.sync.into(),
        index16: a.index16,
    };
    let algorithms: Vec<Algorithm> = match a.algo {
        Some(x) => vec![x.into()],
        None => Algorithm::ALL.to_vec(),
    };
    let verdicts = algorithms
        .iter()
        .map(|&alg| check_feasibility(&arch, alg, &shape))
        .collect::<sprnn_core::Result<Vec<_>>>()?;

    let mut manifest = Manifest::new(
        "feasibility",
        None,
        json!({
            "hidden": a.hidden,
            "density": a.density,
            "batch": a.batch,
            "width": a.width,
            "sync": SyncMode::from(a.sync).to_string(),
            "index16": a.index16,
            "algorithms": algorithms.iter().map(|x| x.to_string()).collect::<Vec<_>>(),
        }),
    );
    manifest.stamp_input(&a.arch)?;

    if a.json {
        print_json(&json!({
            "schema_version": SCHEMA_VERSION,
            "manifest": manifest,
            "arch": arch.name,
            "verdicts": verdicts,
        }));
        return Ok(());
    }

    kv(
        "arch",
        format!(
            "{} ({} SMs, {} regs/SM, {} B smem/block)",
            arch.name, arch.sm_count, arch.registers_per_sm, arch.shared_mem_bytes_per_block
        ),
    );
    kv(
        "workload",
        format!(
            "H={}, density {}, batch {}, width {}, {}",
            a.hidden,
            a.density,
            a.batch,
            a.width,
            SyncMode::from(a.sync)
        ),
    );
    println!();
    println!(
        "{:<19}{:<24}{:<28}{}",
        "algorithm", "verdict", "registers (req/avail)", "shared mem (req/avail)"
    );
    for v in &verdicts {
        println!(
            "{:<19}{:<24}{:<28}{}",
            v.algorithm.to_string(),
            verdict_text(v),
            format!("{} / {}", v.registers_required, v.registers_available),
            format!("{} / {}", v.shared_mem_required, v.shared_mem_available),
        );
    }
    Ok(())
}

fn verdict_text(v: &FeasibilityVerdict) -> String {
    if v.feasible {
        "feasible".to_string()
    } else {
        let resource = match v.limiting_resource {
            LimitingResource::Registers => "Registers",
            LimitingResource::SharedMemory => "SharedMemory",
            LimitingResource::None => "none",
        };
        format!("infeasible: {resource}")
    }
}
