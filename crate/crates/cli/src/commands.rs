use std::io::Write;
use std::path::{Path, PathBuf};

use implicit_herd::baseline::compare_trajectories;
use implicit_herd::estimator::EstimatorConfig;
use implicit_herd::io::{
    emit_plotdata, read_packets, read_trace, replay_estimator, scenario_hash, with_param, write_run, ConfigDocument,
    PlotKind, RunSummary,
};
use implicit_herd::sim::{run as run_scenario, ControllerMode, Integrator, Scenario};
use implicit_herd::HerdError;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::{EstimatorArg, IntegratorArg, ModeArg, Overrides};

pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn validation(message: impl Into<String>) -> Self {
        CliError { code: 2, message: message.into() }
    }

    fn failure(message: impl Into<String>) -> Self {
        CliError { code: 3, message: message.into() }
    }
}

impl From<HerdError> for CliError {
    fn from(e: HerdError) -> Self {
        let input_side = e.is_validation() || matches!(e, HerdError::Io(_) | HerdError::Csv(_));
        CliError { code: if input_side { 2 } else { 3 }, message: e.to_string() }
    }
}

type CliResult = Result<(), CliError>;

fn config_path(positional: Option<PathBuf>, o: &Overrides) -> Result<PathBuf, CliError> {
    match (positional, &o.config) {
        (Some(a), Some(b)) if &a != b => Err(CliError::validation("config given twice with different paths")),
        (Some(p), _) => Ok(p),
        (None, Some(p)) => Ok(p.clone()),
        (None, None) => Err(CliError::validation("no config file given")),
    }
}

fn load(positional: Option<PathBuf>, o: &Overrides) -> Result<ConfigDocument, CliError> {
    let path = config_path(positional, o)?;
    let mut doc = ConfigDocument::load(&path).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    apply_overrides(&mut doc.scenario, o);
    doc.scenario.validate()?;
    Ok(doc)
}

fn apply_overrides(sc: &mut Scenario, o: &Overrides) {
    if let Some(seed) = o.seed {
        sc.seed = seed;
    }
    if let Some(mode) = o.mode {
        sc.mode = match mode {
            ModeArg::Implicit => ControllerMode::Implicit,
            ModeArg::Adaptive => ControllerMode::ImplicitAdaptive,
            ModeArg::Baseline => ControllerMode::LmBaseline,
        };
    }
    if o.no_caging {
        sc.caging = None;
    }
    match o.estimator {
        Some(EstimatorArg::Perfect) => sc.estimator = None,
        Some(EstimatorArg::Dkf) if sc.estimator.is_none() => sc.estimator = Some(EstimatorConfig::default()),
        _ => {}
    }
    if let Some(i) = o.integrator {
        sc.integrator = match i {
            IntegratorArg::Euler => Integrator::Euler,
            IntegratorArg::Rk4 => Integrator::Rk4,
        };
    }
}

fn out_dir(doc: &ConfigDocument, o: &Overrides) -> PathBuf {
    o.out_dir.clone().or_else(|| doc.output.dir.clone()).unwrap_or_else(|| PathBuf::from("out"))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into())
}

pub fn run(config: Option<PathBuf>, o: &Overrides) -> CliResult {
    let doc = load(config, o)?;
    let sc = &doc.scenario;
    let dir = out_dir(&doc, o);
    let out = run_scenario(sc)?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    let files = write_run(&dir, sc, &out)?;
    for kind in &doc.output.plots {
        match emit_plotdata(&out.trace, *kind, None) {
            Ok(table) => table.write_csv(&dir.join(format!("plot-{}.csv", kind.as_str())))?,
            Err(e) => eprintln!("warning: skipped plot {}: {e}", kind.as_str()),
        }
    }
    let m = &out.metrics;
    println!(
        "{}: {} ticks, settling {} s, steady-state {:.4} m, herding error {:.4} m",
        sc.name,
        out.trace.len(),
        fmt_opt(m.settling_time),
        m.steady_state_error,
        m.herding_error
    );
    println!("wrote {}", files.trace.display());
    match &out.failure {
        None => Ok(()),
        Some(f) => Err(CliError::failure(format!("run stopped at t = {:.2} s ({}): {}", f.t, f.kind, f.message))),
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn thread_pool() -> Result<rayon::ThreadPool, CliError> {
    let threads = match std::env::var("IMPLICIT_HERD_THREADS") {
        Ok(v) => {
            v.parse().map_err(|_| CliError::validation(format!("IMPLICIT_HERD_THREADS must be a count, got `{v}`")))?
        }
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| CliError::failure(e.to_string()))
}

pub fn sweep(config: Option<PathBuf>, param: &str, values: &[String], o: &Overrides) -> CliResult {
    let doc = load(config, o)?;
    let dir = out_dir(&doc, o);
    let variants = values
        .iter()
        .map(|raw| Ok((raw.clone(), with_param(&doc.scenario, param, parse_value(raw))?)))
        .collect::<Result<Vec<_>, HerdError>>()?;
    let results: Vec<Result<RunSummary, HerdError>> = thread_pool()?.install(|| {
        variants
            .par_iter()
            .map(|(raw, sc)| {
                let out = run_scenario(sc)?;
                write_run(&dir.join(format!("{param}={raw}")), sc, &out)?;
                RunSummary::new(sc, &out)
            })
            .collect()
    });
    println!("{:>10}  {:>13}  {:>18}  {:>13}  status", param, "herding_error", "steady_state_error", "settling_time");
    let mut rows = Vec::new();
    let mut failed = 0;
    for ((raw, _), res) in variants.iter().zip(results) {
        let summary = res?;
        let m = &summary.metrics;
        let status = match &summary.failure {
            None => "ok".to_string(),
            Some(f) => {
                failed += 1;
                format!("{} at {:.2} s", f.kind, f.t)
            }
        };
        println!(
            "{raw:>10}  {:>13.4}  {:>18.4}  {:>13}  {status}",
            m.herding_error,
            m.steady_state_error,
            fmt_opt(m.settling_time)
        );
        rows.push(json!({ "value": parse_value(raw), "summary": summary }));
    }
    std::fs::create_dir_all(&dir).map_err(HerdError::from)?;
    let report = json!({ "param": param, "runs": rows });
    std::fs::write(dir.join("sweep.json"), format!("{report:#}\n")).map_err(HerdError::from)?;
    if failed > 0 {
        return Err(CliError::failure(format!("{failed} of {} sweep runs stopped early", variants.len())));
    }
    Ok(())
}

pub fn compare(a: &Path, b: &Path, after: f64, plot_out: Option<&Path>) -> CliResult {
    let ta = read_trace(a)?;
    let tb = read_trace(b)?;
    if (ta.header.m, ta.header.n) != (tb.header.m, tb.header.n) {
        return Err(CliError::validation(format!(
            "traces have {}v{} and {}v{} bodies",
            ta.header.m, ta.header.n, tb.header.m, tb.header.n
        )));
    }
    if ta.header.scenario_hash != tb.header.scenario_hash {
        eprintln!("note: traces come from different scenarios (hashes differ)");
    }
    let gap = compare_trajectories(&ta.records, &tb.records)?;
    println!("max evader gap: {:.6} m", gap.max_evader_gap);
    println!("max evader gap after {after} s: {:.6} m", gap.max_evader_gap_after(after));
    println!("max input gap: {:.6} m", gap.max_input_gap);
    println!("max input gap after {after} s: {:.6} m", gap.max_input_gap_after(after));
    if let Some(path) = plot_out {
        emit_plotdata(&ta.records, PlotKind::InputDiff, Some(&tb.records))?.write_csv(path)?;
    }
    Ok(())
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

pub fn validate_gains(config: Option<PathBuf>, o: &Overrides) -> CliResult {
    let doc = load(config, o)?;
    let sc = &doc.scenario;
    let r = sc.gain_report()?;
    println!(
        "K    negative definite: {}  eigenvalues in [{:.6e}, {:.6e}]",
        yes_no(r.k_negative_definite),
        r.k_min_eigenvalue,
        r.k_max_eigenvalue
    );
    println!(
        "Kbar negative definite: {}  eigenvalues in [{:.6e}, {:.6e}]",
        yes_no(r.kbar_negative_definite),
        r.kbar_min_eigenvalue,
        r.kbar_max_eigenvalue
    );
    println!(
        "J_u rank {}/{}  condition {:.3e}  |h(0)| {:.3e}",
        r.ju_rank, r.ju_expected_rank, r.ju_condition, r.h0_norm
    );
    if !r.k_negative_definite {
        return Err(CliError::validation("K is not negative definite"));
    }
    if !r.kbar_negative_definite {
        eprintln!("warning: Kbar is indefinite at the initial state; adaptation carries no stability guarantee there");
    }
    Ok(())
}

fn same(a: f64, b: f64) -> bool {
    a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan())
}

pub fn replay(trace: &Path, config: Option<PathBuf>, packets: Option<PathBuf>) -> CliResult {
    let dir = trace.parent().unwrap_or(Path::new("."));
    let config = config.unwrap_or_else(|| dir.join("config.json"));
    let packets = packets.unwrap_or_else(|| dir.join("packets.csv"));
    let recorded = read_trace(trace)?;
    let doc = ConfigDocument::load(&config)?;
    let hash = scenario_hash(&doc.scenario)?;
    if recorded.header.scenario_hash != hash {
        return Err(HerdError::Schema(format!(
            "trace hash {} does not match config hash {hash}",
            recorded.header.scenario_hash
        ))
        .into());
    }
    let log = read_packets(&packets)?;
    let out = replay_estimator(&doc.scenario, &log)?;
    let mut max_diff: f64 = 0.0;
    let mut mismatched = 0;
    for (a, b) in recorded.records.iter().zip(&out.trace) {
        let pairs = [(a.rmse_evaders, b.rmse_evaders), (a.rmse_herders, b.rmse_herders)];
        if pairs.iter().any(|(p, q)| !same(*p, *q)) || a.x != b.x || a.u != b.u {
            mismatched += 1;
        }
        for (p, q) in pairs {
            if p.is_finite() && q.is_finite() {
                max_diff = max_diff.max((p - q).abs());
            }
        }
    }
    println!("replayed {} packets over {} ticks", log.packets.len(), out.trace.len());
    println!("max RMSE difference: {max_diff:.3e}  mismatched ticks: {mismatched}");
    if out.trace.len() != recorded.records.len() || mismatched > 0 {
        return Err(CliError::failure(format!(
            "replay diverged from the recorded trace ({} vs {} ticks, {mismatched} mismatched)",
            out.trace.len(),
            recorded.records.len()
        )));
    }
    Ok(())
}

pub fn plot_data(trace: &Path, kind: &str, baseline: Option<&Path>, out: Option<&Path>) -> CliResult {
    let kind: PlotKind = kind.parse()?;
    let t = read_trace(trace)?;
    let base = baseline.map(read_trace).transpose()?;
    let table = emit_plotdata(&t.records, kind, base.as_ref().map(|b| b.records.as_slice()))?;
    match out {
        Some(path) => table.write_csv(path)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            match stdout.write_all(table.to_csv().as_bytes()) {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => return Err(HerdError::from(e).into()),
                _ => {}
            }
        }
    }
    Ok(())
}
