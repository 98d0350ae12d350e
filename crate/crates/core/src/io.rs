//! Config documents, trace and packet-log files, metrics summaries and plot data.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{HerdError, Result};
use crate::estimator::MeasurementPacket;
use crate::sim::{FailureRecord, MetricsReport, PacketSource, RunOutput, Scenario, Simulation};
use crate::trace::{Phase, TraceRecord};

pub const SCHEMA_VERSION: u32 = 1;

/// A scenario plus where its artifacts go.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDocument {
    pub scenario: Scenario,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub plots: Vec<PlotKind>,
}

impl ConfigDocument {
    pub fn new(scenario: Scenario) -> Self {
        ConfigDocument { scenario, output: OutputSpec::default() }
    }

    /// Parses and validates a JSON config.
    pub fn parse(text: &str) -> Result<Self> {
        let doc: ConfigDocument = serde_json::from_str(text)?;
        doc.scenario.validate()?;
        Ok(doc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.to_json()?;
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }
}

/// SHA-256 over the scenario as compact JSON with sorted keys.
pub fn scenario_hash(sc: &Scenario) -> Result<String> {
    // serde_json's default map is ordered, so Value rendering is canonical
    let canonical = serde_json::to_value(sc)?.to_string();
    Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
}

/// Sets `path` (dot separated, array indices allowed) inside a JSON tree.
/// Missing objects along the way are created; a null parent becomes an
/// object.
pub fn set_param(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(HerdError::Config(format!("bad parameter path `{path}`")));
    }
    let mut node = root;
    for (i, key) in keys.iter().enumerate() {
        let last = i + 1 == keys.len();
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(key.to_string(), value);
                    return Ok(());
                }
                map.entry(key.to_string()).or_insert(Value::Null)
            }
            Value::Array(items) => {
                let idx: usize =
                    key.parse().map_err(|_| HerdError::Config(format!("`{key}` in `{path}` is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| HerdError::Config(format!("index {idx} out of range ({len}) in `{path}`")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(HerdError::Config(format!("`{path}` walks into a scalar at `{key}`"))),
        };
    }
    unreachable!("loop returns on the last key")
}

/// Copy of `sc` with one dotted parameter replaced.
pub fn with_param(sc: &Scenario, path: &str, value: Value) -> Result<Scenario> {
    let mut tree = serde_json::to_value(sc)?;
    set_param(&mut tree, path, value)?;
    let out: Scenario = serde_json::from_value(tree)?;
    out.validate()?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceHeader {
    pub schema_version: u32,
    pub scenario_hash: String,
    pub seed: u64,
    pub m: usize,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
}

const LIST_COLUMNS: [&str; 5] = ["y", "x_ref", "h", "h_tilde", "theta_hat"];
const TAIL_COLUMNS: [&str; 6] = ["rmse_evaders", "rmse_herders", "rank", "condition", "k_margin", "barrier_min"];

fn trace_columns(m: usize, n: usize) -> Vec<String> {
    let mut cols = vec!["t".to_string(), "phase".to_string()];
    for j in 0..m {
        cols.push(format!("x{j}_x"));
        cols.push(format!("x{j}_y"));
    }
    for i in 0..n {
        cols.push(format!("u{i}_x"));
        cols.push(format!("u{i}_y"));
    }
    cols.extend(LIST_COLUMNS.iter().map(|s| s.to_string()));
    cols.extend(TAIL_COLUMNS.iter().map(|s| s.to_string()));
    cols
}

/// 17 significant digits, enough to round-trip any f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse().map_err(|_| HerdError::Schema(format!("`{s}` is not a number")))
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(" ")
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split_whitespace().map(parse_f64).collect()
}

fn write_header_lines(w: &mut impl Write, pairs: &[(&str, String)]) -> Result<()> {
    for (k, v) in pairs {
        writeln!(w, "# {k}={v}")?;
    }
    Ok(())
}

/// Splits leading `# key=value` lines from the CSV body.
fn split_header(text: &str) -> Result<(BTreeMap<String, String>, &str)> {
    let mut map = BTreeMap::new();
    let mut rest = text;
    while let Some(line) = rest.strip_prefix('#') {
        let (line, tail) = line.split_once('\n').unwrap_or((line, ""));
        let (k, v) =
            line.trim().split_once('=').ok_or_else(|| HerdError::Schema(format!("malformed header line `#{line}`")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
        rest = tail;
    }
    Ok((map, rest))
}

fn header_field<T: FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = map.get(key).ok_or_else(|| HerdError::Schema(format!("header is missing `{key}`")))?;
    raw.parse().map_err(|_| HerdError::Schema(format!("header `{key}` has bad value `{raw}`")))
}

fn check_schema(map: &BTreeMap<String, String>) -> Result<()> {
    let version: u32 = header_field(map, "schema_version")?;
    if version != SCHEMA_VERSION {
        return Err(HerdError::Schema(format!("schema version {version}, this build reads {SCHEMA_VERSION}")));
    }
    Ok(())
}

pub fn write_trace_to(w: &mut impl Write, header: &TraceHeader, records: &[TraceRecord]) -> Result<()> {
    write_header_lines(
        w,
        &[
            ("schema_version", header.schema_version.to_string()),
            ("scenario_hash", header.scenario_hash.clone()),
            ("seed", header.seed.to_string()),
            ("m", header.m.to_string()),
            ("n", header.n.to_string()),
        ],
    )?;
    let mut csv = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    csv.write_record(trace_columns(header.m, header.n))?;
    for r in records {
        if r.m() != header.m || r.n() != header.n {
            return Err(HerdError::Schema(format!(
                "record at t = {} has {}/{} bodies, header says {}/{}",
                r.t,
                r.m(),
                r.n(),
                header.m,
                header.n
            )));
        }
        let mut row = vec![fmt_f64(r.t), r.phase.as_str().to_string()];
        row.extend(r.x.iter().chain(&r.u).map(|v| fmt_f64(*v)));
        for list in [&r.y, &r.x_ref, &r.h, &r.h_tilde, &r.theta_hat] {
            row.push(fmt_list(list));
        }
        row.push(fmt_f64(r.rmse_evaders));
        row.push(fmt_f64(r.rmse_herders));
        row.push(r.rank.to_string());
        row.extend([r.condition, r.k_margin, r.barrier_min].iter().map(|v| fmt_f64(*v)));
        csv.write_record(&row)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn write_trace(path: &Path, header: &TraceHeader, records: &[TraceRecord]) -> Result<()> {
    let mut buf = Vec::new();
    write_trace_to(&mut buf, header, records)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_trace_from(r: impl Read) -> Result<TraceFile> {
    let mut text = String::new();
    BufReader::new(r).read_to_string(&mut text)?;
    let (map, body) = split_header(&text)?;
    check_schema(&map)?;
    let header = TraceHeader {
        schema_version: SCHEMA_VERSION,
        scenario_hash: header_field(&map, "scenario_hash")?,
        seed: header_field(&map, "seed")?,
        m: header_field(&map, "m")?,
        n: header_field(&map, "n")?,
    };
    let (m, n) = (header.m, header.n);
    let mut csv = csv::ReaderBuilder::new().from_reader(body.as_bytes());
    let expected = trace_columns(m, n);
    let got: Vec<String> = csv.headers()?.iter().map(String::from).collect();
    if got != expected {
        return Err(HerdError::Schema(format!("trace columns do not match a {m}v{n} layout")));
    }
    let mut records = Vec::new();
    for row in csv.records() {
        let row = row?;
        let f = |k: usize| parse_f64(&row[k]);
        let phase = Phase::parse(&row[1]).ok_or_else(|| HerdError::Schema(format!("unknown phase `{}`", &row[1])))?;
        let xs = (0..2 * m).map(|k| f(2 + k)).collect::<Result<Vec<_>>>()?;
        let us = (0..2 * n).map(|k| f(2 + 2 * m + k)).collect::<Result<Vec<_>>>()?;
        let base = 2 + 2 * (m + n);
        let lists = (0..5).map(|k| parse_list(&row[base + k])).collect::<Result<Vec<_>>>()?;
        let tail = base + 5;
        let mut lists = lists.into_iter();
        let mut next = || lists.next().expect("five list columns");
        records.push(TraceRecord {
            t: f(0)?,
            x: xs,
            u: us,
            y: next(),
            x_ref: next(),
            h: next(),
            h_tilde: next(),
            theta_hat: next(),
            phase,
            rmse_evaders: f(tail)?,
            rmse_herders: f(tail + 1)?,
            rank: row[tail + 2].parse().map_err(|_| HerdError::Schema(format!("bad rank `{}`", &row[tail + 2])))?,
            condition: f(tail + 3)?,
            k_margin: f(tail + 4)?,
            barrier_min: f(tail + 5)?,
        });
    }
    Ok(TraceFile { header, records })
}

pub fn read_trace(path: &Path) -> Result<TraceFile> {
    read_trace_from(fs::File::open(path)?)
}

/// A packet log: every exchange-round packet in order, hex encoded.
#[derive(Debug, Clone, PartialEq)]
pub struct PacketLog {
    pub scenario_hash: String,
    pub dim: usize,
    pub packets: Vec<MeasurementPacket>,
}

impl PacketLog {
    pub fn by_tick(&self) -> BTreeMap<u32, Vec<MeasurementPacket>> {
        let mut map: BTreeMap<u32, Vec<MeasurementPacket>> = BTreeMap::new();
        for p in &self.packets {
            map.entry(p.tick).or_default().push(p.clone());
        }
        map
    }
}

pub fn write_packets(path: &Path, log: &PacketLog) -> Result<()> {
    let mut buf = Vec::new();
    write_header_lines(
        &mut buf,
        &[
            ("schema_version", SCHEMA_VERSION.to_string()),
            ("scenario_hash", log.scenario_hash.clone()),
            ("dim", log.dim.to_string()),
        ],
    )?;
    {
        let mut csv = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(&mut buf);
        csv.write_record(["tick", "sender", "payload"])?;
        for p in &log.packets {
            csv.write_record([p.tick.to_string(), p.sender.to_string(), hex::encode(p.encode())])?;
        }
        csv.flush()?;
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_packets(path: &Path) -> Result<PacketLog> {
    let text = fs::read_to_string(path)?;
    let (map, body) = split_header(&text)?;
    check_schema(&map)?;
    let dim: usize = header_field(&map, "dim")?;
    let mut csv = csv::ReaderBuilder::new().from_reader(body.as_bytes());
    if csv.headers()?.iter().collect::<Vec<_>>() != ["tick", "sender", "payload"] {
        return Err(HerdError::Schema("packet log columns must be tick,sender,payload".into()));
    }
    let mut packets = Vec::new();
    for row in csv.records() {
        let row = row?;
        let bytes = hex::decode(&row[2]).map_err(|e| HerdError::Schema(format!("bad packet payload: {e}")))?;
        let p = MeasurementPacket::decode(&bytes, dim)?;
        if row[0] != p.tick.to_string() || row[1] != p.sender.to_string() {
            return Err(HerdError::Schema(format!("packet row {}/{} disagrees with its payload", &row[0], &row[1])));
        }
        packets.push(p);
    }
    Ok(PacketLog { scenario_hash: header_field(&map, "scenario_hash")?, dim, packets })
}

/// Machine-readable outcome of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub scenario: String,
    pub scenario_hash: String,
    pub seed: u64,
    pub completed: bool,
    pub failure: Option<FailureRecord>,
    pub warnings: Vec<String>,
    pub metrics: MetricsReport,
}

impl RunSummary {
    pub fn new(sc: &Scenario, out: &RunOutput) -> Result<Self> {
        Ok(RunSummary {
            schema_version: SCHEMA_VERSION,
            scenario: sc.name.clone(),
            scenario_hash: scenario_hash(sc)?,
            seed: sc.seed,
            completed: out.failure.is_none(),
            failure: out.failure.clone(),
            warnings: out.warnings.clone(),
            metrics: out.metrics.clone(),
        })
    }
}

/// Paths of the files written for one run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub config: PathBuf,
    pub trace: PathBuf,
    pub packets: Option<PathBuf>,
    pub metrics: PathBuf,
}

pub fn trace_header(sc: &Scenario) -> Result<TraceHeader> {
    Ok(TraceHeader {
        schema_version: SCHEMA_VERSION,
        scenario_hash: scenario_hash(sc)?,
        seed: sc.seed,
        m: sc.m(),
        n: sc.n(),
    })
}

/// Writes config.json, trace.csv, metrics.json and (with an estimator)
/// packets.csv into `dir`.
pub fn write_run(dir: &Path, sc: &Scenario, out: &RunOutput) -> Result<RunArtifacts> {
    fs::create_dir_all(dir)?;
    let header = trace_header(sc)?;
    let config = dir.join("config.json");
    ConfigDocument::new(sc.clone()).save(&config)?;
    let trace = dir.join("trace.csv");
    write_trace(&trace, &header, &out.trace)?;
    let packets = if sc.estimator.is_some() {
        let path = dir.join("packets.csv");
        let log = PacketLog {
            scenario_hash: header.scenario_hash.clone(),
            dim: 2 * (sc.m() + sc.n()),
            packets: out.packets.clone(),
        };
        write_packets(&path, &log)?;
        Some(path)
    } else {
        None
    };
    let metrics = dir.join("metrics.json");
    let mut s = serde_json::to_string_pretty(&RunSummary::new(sc, out)?)?;
    s.push('\n');
    fs::write(&metrics, s)?;
    Ok(RunArtifacts { config, trace, packets, metrics })
}

/// Re-runs `sc` with exchange rounds fed from `log` instead of sensing.
pub fn replay_estimator(sc: &Scenario, log: &PacketLog) -> Result<RunOutput> {
    let hash = scenario_hash(sc)?;
    if log.scenario_hash != hash {
        return Err(HerdError::Schema(format!(
            "packet log belongs to scenario {}, config hashes to {hash}",
            log.scenario_hash
        )));
    }
    if sc.estimator.is_none() {
        return Err(HerdError::Config("replay needs a scenario with an estimator".into()));
    }
    Ok(Simulation::with_packets(sc.clone(), PacketSource::Log(log.by_tick()))?.run())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlotKind {
    ErrorCurves,
    InputDiff,
    Theta,
    Rmse,
}

impl PlotKind {
    pub const ALL: [PlotKind; 4] = [PlotKind::ErrorCurves, PlotKind::InputDiff, PlotKind::Theta, PlotKind::Rmse];

    pub fn as_str(&self) -> &'static str {
        match self {
            PlotKind::ErrorCurves => "error-curves",
            PlotKind::InputDiff => "input-diff",
            PlotKind::Theta => "theta",
            PlotKind::Rmse => "rmse",
        }
    }
}

impl FromStr for PlotKind {
    type Err = HerdError;

    fn from_str(s: &str) -> Result<Self> {
        PlotKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| HerdError::UnknownKind(s.to_string()))
    }
}

/// Tidy columnar data: one row per tick.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl PlotTable {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.columns.join(",");
        s.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
            let _ = writeln!(s, "{}", cells.join(","));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = BufReader::new(fs::File::open(path)?);
        let mut lines = file.lines();
        let columns: Vec<String> = match lines.next() {
            Some(l) => l?.split(',').map(String::from).collect(),
            None => return Err(HerdError::Schema("empty plot file".into())),
        };
        let mut rows = Vec::new();
        for l in lines {
            let row = l?.split(',').map(parse_f64).collect::<Result<Vec<_>>>()?;
            if row.len() != columns.len() {
                return Err(HerdError::Schema("ragged plot row".into()));
            }
            rows.push(row);
        }
        Ok(PlotTable { columns, rows })
    }
}

fn entity_norms(flat: &[f64], count: usize) -> Vec<f64> {
    (0..count)
        .map(|k| match flat.get(2 * k..2 * k + 2) {
            Some(c) => c[0].hypot(c[1]),
            None => f64::NAN,
        })
        .collect()
}

/// Builds plot data of one kind. `baseline` is the second trace for
/// `input-diff` and is ignored otherwise.
pub fn emit_plotdata(trace: &[TraceRecord], kind: PlotKind, baseline: Option<&[TraceRecord]>) -> Result<PlotTable> {
    let empty = || HerdError::EmptyData(kind.as_str().to_string());
    if trace.is_empty() {
        return Err(empty());
    }
    let table = |names: Vec<String>, rows: Vec<Vec<f64>>| {
        let mut columns = vec!["t".to_string()];
        columns.extend(names);
        PlotTable { columns, rows }
    };
    match kind {
        PlotKind::ErrorCurves => {
            let count = trace.iter().map(|r| r.y.len().min(r.x_ref.len()) / 2).max().unwrap_or(0);
            if count == 0 {
                return Err(empty());
            }
            let rows =
                trace.iter().map(|r| std::iter::once(r.t).chain(entity_norms(&r.error(), count)).collect()).collect();
            Ok(table((0..count).map(|j| format!("err{j}")).collect(), rows))
        }
        PlotKind::InputDiff => {
            let other = baseline.ok_or_else(|| HerdError::Config("input-diff needs a baseline trace".into()))?;
            if other.len() != trace.len() {
                return Err(HerdError::GridMismatch(format!("{} vs {} ticks", trace.len(), other.len())));
            }
            let n = trace[0].n();
            let mut rows = Vec::with_capacity(trace.len());
            for (a, b) in trace.iter().zip(other) {
                if (a.t - b.t).abs() > 1e-9 || a.u.len() != b.u.len() {
                    return Err(HerdError::GridMismatch(format!("ticks at t = {} and t = {} differ", a.t, b.t)));
                }
                let diff: Vec<f64> = a.u.iter().zip(&b.u).map(|(p, q)| p - q).collect();
                rows.push(std::iter::once(a.t).chain(entity_norms(&diff, n)).collect());
            }
            Ok(table((0..n).map(|i| format!("du{i}")).collect(), rows))
        }
        PlotKind::Theta => {
            let count = trace.iter().map(|r| r.theta_hat.len()).max().unwrap_or(0);
            if count == 0 {
                return Err(empty());
            }
            let rows = trace
                .iter()
                .map(|r| {
                    std::iter::once(r.t)
                        .chain((0..count).map(|j| r.theta_hat.get(j).copied().unwrap_or(f64::NAN)))
                        .collect()
                })
                .collect();
            Ok(table((0..count).map(|j| format!("theta{j}")).collect(), rows))
        }
        PlotKind::Rmse => {
            if trace.iter().all(|r| r.rmse_evaders.is_nan() && r.rmse_herders.is_nan()) {
                return Err(empty());
            }
            let rows = trace
                .iter()
                .map(|r| vec![r.t, r.rmse_evaders, r.rmse_herders, (r.rmse_evaders + r.rmse_herders) / 2.0])
                .collect();
            Ok(table(vec!["rmse_evaders".into(), "rmse_herders".into(), "rmse_mean".into()], rows))
        }
    }
}
