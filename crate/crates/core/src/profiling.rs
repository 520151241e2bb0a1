//! Profiler exports in, raw metrics and run features out.
//!
//! Two Nsight Compute CSV layouts are accepted, both recognized by their
//! header row rather than column position:
//!
//! * the details page (`--csv`, optionally with `--metrics`), one row per
//!   (launch, metric) with `Metric Name` / `Metric Unit` / `Metric Value`;
//! * the raw page (`--csv --page raw`), one row per launch with one column
//!   per metric and an optional units row under the header.
//!
//! Metric names are emitted verbatim; mapping them onto standardized fields
//! is the knowledge base's job. Every value remembers the CSV line(s) it came
//! from, and rows that cannot be read are reported instead of guessed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::value::Value;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("line {line}: {detail}")]
pub struct ParseFault {
    pub line: u64,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KernelProfile {
    pub kernel_name: String,
    /// Number of profiled launches folded into `metrics`.
    pub launches: usize,
    pub metrics: BTreeMap<String, f64>,
    /// Canonical unit per metric (time in `nsecond`, sizes in `byte`).
    pub units: BTreeMap<String, String>,
    /// CSV lines each metric was read from.
    pub source_lines: BTreeMap<String, Vec<u64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RawProfile {
    pub per_kernel: Vec<KernelProfile>,
    /// Whole-program view: counters summed, everything else weighted by
    /// kernel duration.
    pub aggregate: BTreeMap<String, f64>,
    #[serde(default)]
    pub faults: Vec<ParseFault>,
}

/// Run-level features from the system profiler.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunFeatures {
    pub values: BTreeMap<String, Value>,
    #[serde(default)]
    pub faults: Vec<ParseFault>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingResult {
    pub mean_latency_ms: f64,
    pub sample_count: usize,
    pub warmup_count: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub samples_ms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TimingError {
    #[error("latency must be positive and finite, got {0}")]
    InvalidLatency(f64),
    #[error("no timed samples")]
    EmptySamples,
}

/// Metrics that are summed across launches rather than averaged.
fn is_counter(metric: &str) -> bool {
    metric.ends_with(".sum")
}

const DURATION_METRICS: [&str; 2] = ["gpu__time_duration.sum", "Duration"];

/// Parses a number as printed by the profiler: optional thousands
/// separators, optional trailing `%`, always `.` as the decimal point.
fn parse_number(text: &str) -> Option<f64> {
    let t = text.trim().trim_end_matches('%').trim();
    if t.is_empty() {
        return None;
    }
    let cleaned: String = if t.contains(',') {
        // Accept commas only as three-digit group separators.
        let (int, frac) = t.split_once('.').map_or((t, None), |(a, b)| (a, Some(b)));
        let digits = int.trim_start_matches(['-', '+']);
        let groups: Vec<&str> = digits.split(',').collect();
        let grouped = !groups[0].is_empty()
            && groups[0].len() <= 3
            && groups[1..].iter().all(|g| g.len() == 3 && g.chars().all(|c| c.is_ascii_digit()));
        if !grouped {
            return None;
        }
        let mut s = int.replace(',', "");
        if let Some(f) = frac {
            s.push('.');
            s.push_str(f);
        }
        s
    } else {
        t.to_string()
    };
    cleaned.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Converts time and size units to `nsecond` and `byte`; other units pass
/// through unchanged.
fn canonical_unit(unit: &str) -> (String, f64) {
    let u = unit.trim();
    let factor = match u {
        "nsecond" | "ns" => Some(("nsecond", 1.0)),
        "usecond" | "us" => Some(("nsecond", 1e3)),
        "msecond" | "ms" => Some(("nsecond", 1e6)),
        "second" | "s" => Some(("nsecond", 1e9)),
        "byte" => Some(("byte", 1.0)),
        "Kbyte" | "KB" => Some(("byte", 1e3)),
        "Mbyte" | "MB" => Some(("byte", 1e6)),
        "Gbyte" | "GB" => Some(("byte", 1e9)),
        "Tbyte" | "TB" => Some(("byte", 1e12)),
        "KiB" | "Kibyte" => Some(("byte", 1024.0)),
        "MiB" | "Mibyte" => Some(("byte", 1024.0 * 1024.0)),
        "GiB" | "Gibyte" => Some(("byte", 1024.0 * 1024.0 * 1024.0)),
        _ => None,
    };
    match factor {
        Some((c, f)) => (c.to_string(), f),
        None => (u.to_string(), 1.0),
    }
}

#[derive(Default)]
struct Launch {
    metrics: BTreeMap<String, (f64, u64)>,
}

#[derive(Default)]
struct KernelAcc {
    launches: BTreeMap<String, Launch>,
    launch_order: Vec<String>,
    units: BTreeMap<String, String>,
}

impl KernelAcc {
    fn launch(&mut self, id: &str) -> &mut Launch {
        if !self.launches.contains_key(id) {
            self.launch_order.push(id.to_string());
        }
        self.launches.entry(id.to_string()).or_default()
    }
}

struct Collector {
    kernels: Vec<(String, KernelAcc)>,
    faults: Vec<ParseFault>,
}

impl Collector {
    fn kernel(&mut self, name: &str) -> &mut KernelAcc {
        let pos = match self.kernels.iter().position(|(n, _)| n == name) {
            Some(p) => p,
            None => {
                self.kernels.push((name.to_string(), KernelAcc::default()));
                self.kernels.len() - 1
            }
        };
        &mut self.kernels[pos].1
    }

    fn fault(&mut self, line: u64, detail: impl Into<String>) {
        self.faults.push(ParseFault {
            line,
            detail: detail.into(),
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn put(&mut self, kernel: &str, launch: &str, metric: &str, raw: &str, unit: &str, line: u64) {
        let Some(value) = parse_number(raw) else {
            self.fault(line, format!("metric {metric:?}: value {raw:?} is not numeric"));
            return;
        };
        let (unit, factor) = canonical_unit(unit);
        let acc = self.kernel(kernel);
        acc.units.entry(metric.to_string()).or_insert(unit);
        let slot = acc.launch(launch);
        if slot.metrics.contains_key(metric) {
            self.fault(line, format!("metric {metric:?} repeated for launch {launch}; first value kept"));
            return;
        }
        slot.metrics.insert(metric.to_string(), (value * factor, line));
    }

    fn finish(self) -> RawProfile {
        let mut per_kernel = Vec::with_capacity(self.kernels.len());
        for (name, acc) in self.kernels {
            let launches: Vec<&Launch> = acc.launch_order.iter().map(|id| &acc.launches[id]).collect();
            let mut profile = KernelProfile {
                kernel_name: name,
                launches: launches.len(),
                units: acc.units,
                ..Default::default()
            };
            let names: std::collections::BTreeSet<&String> =
                launches.iter().flat_map(|l| l.metrics.keys()).collect();
            for metric in names {
                let present: Vec<(f64, f64, u64)> = launches
                    .iter()
                    .filter_map(|l| {
                        let (v, line) = *l.metrics.get(metric)?;
                        Some((v, launch_duration(&l.metrics), line))
                    })
                    .collect();
                profile.metrics.insert(metric.clone(), combine(metric, &present));
                profile
                    .source_lines
                    .insert(metric.clone(), present.iter().map(|p| p.2).collect());
            }
            per_kernel.push(profile);
        }
        let aggregate = aggregate(&per_kernel);
        RawProfile {
            per_kernel,
            aggregate,
            faults: self.faults,
        }
    }
}

fn launch_duration(metrics: &BTreeMap<String, (f64, u64)>) -> f64 {
    DURATION_METRICS
        .iter()
        .find_map(|m| metrics.get(*m).map(|(v, _)| *v))
        .unwrap_or(f64::NAN)
}

/// Sum for counters; duration-weighted mean otherwise, falling back to the
/// plain mean when any weight is unusable.
fn combine(metric: &str, values: &[(f64, f64, u64)]) -> f64 {
    if is_counter(metric) {
        return values.iter().map(|v| v.0).sum();
    }
    let weights_ok = values.iter().all(|v| v.1.is_finite() && v.1 > 0.0);
    if weights_ok {
        let total: f64 = values.iter().map(|v| v.1).sum();
        values.iter().map(|v| v.0 * v.1).sum::<f64>() / total
    } else {
        values.iter().map(|v| v.0).sum::<f64>() / values.len() as f64
    }
}

fn kernel_duration(k: &KernelProfile) -> f64 {
    DURATION_METRICS
        .iter()
        .find_map(|m| k.metrics.get(*m).copied())
        .unwrap_or(f64::NAN)
}

fn aggregate(kernels: &[KernelProfile]) -> BTreeMap<String, f64> {
    let names: std::collections::BTreeSet<&String> = kernels.iter().flat_map(|k| k.metrics.keys()).collect();
    names
        .into_iter()
        .map(|metric| {
            let values: Vec<(f64, f64, u64)> = kernels
                .iter()
                .filter_map(|k| Some((*k.metrics.get(metric)?, kernel_duration(k), 0)))
                .collect();
            (metric.clone(), combine(metric, &values))
        })
        .collect()
}

fn reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes())
}

fn column(header: &csv::StringRecord, name: &str) -> Option<usize> {
    header.iter().position(|h| h.trim() == name)
}

/// Columns of the raw page that describe the launch rather than a metric.
const LAUNCH_COLUMNS: [&str; 12] = [
    "ID",
    "Process ID",
    "Process Name",
    "Host Name",
    "Kernel Name",
    "Kernel Time",
    "Context",
    "Stream",
    "Device",
    "CC",
    "Block Size",
    "Grid Size",
];

/// Parses an Nsight Compute CSV export (details or raw page).
pub fn parse_ncu_csv(text: &str) -> RawProfile {
    let mut collector = Collector {
        kernels: Vec::new(),
        faults: Vec::new(),
    };
    let mut rows = reader(text).into_records();
    // Skip banner lines (`==PROF==`, warnings) until a header appears.
    let header = loop {
        match rows.next() {
            None => return collector.finish(),
            Some(Err(e)) => {
                let line = e.position().map_or(0, |p| p.line());
                collector.fault(line, e.to_string());
            }
            Some(Ok(rec)) if column(&rec, "Kernel Name").is_some() => break rec,
            Some(Ok(_)) => {}
        }
    };
    let kernel_col = column(&header, "Kernel Name").expect("header has Kernel Name");
    let id_col = column(&header, "ID");
    let detail = (
        column(&header, "Metric Name"),
        column(&header, "Metric Unit"),
        column(&header, "Metric Value"),
    );
    let width = header.len();

    match detail {
        (Some(name_col), unit_col, Some(value_col)) => {
            for rec in rows {
                let rec = match rec {
                    Ok(r) => r,
                    Err(e) => {
                        collector.fault(e.position().map_or(0, |p| p.line()), e.to_string());
                        continue;
                    }
                };
                let line = rec.position().map_or(0, |p| p.line());
                if rec.len() != width {
                    collector.fault(line, format!("expected {width} fields, found {}", rec.len()));
                    continue;
                }
                let kernel = rec[kernel_col].trim();
                let metric = rec[name_col].trim();
                if kernel.is_empty() || metric.is_empty() {
                    collector.fault(line, "missing kernel or metric name");
                    continue;
                }
                let launch = id_col.map_or("0", |c| rec[c].trim());
                let unit = unit_col.map_or("", |c| &rec[c]);
                collector.put(kernel, launch, metric, &rec[value_col], unit, line);
            }
        }
        _ => {
            let metric_cols: Vec<usize> = (0..width)
                .filter(|&i| !LAUNCH_COLUMNS.contains(&header[i].trim()) && !header[i].trim().is_empty())
                .collect();
            let mut units: Vec<String> = vec![String::new(); width];
            let mut first = true;
            for rec in rows {
                let rec = match rec {
                    Ok(r) => r,
                    Err(e) => {
                        collector.fault(e.position().map_or(0, |p| p.line()), e.to_string());
                        continue;
                    }
                };
                let line = rec.position().map_or(0, |p| p.line());
                if rec.len() != width {
                    collector.fault(line, format!("expected {width} fields, found {}", rec.len()));
                    first = false;
                    continue;
                }
                // Units row: no kernel name, directly under the header.
                if first && rec[kernel_col].trim().is_empty() {
                    units = rec.iter().map(str::to_string).collect();
                    first = false;
                    continue;
                }
                first = false;
                let kernel = rec[kernel_col].trim();
                if kernel.is_empty() {
                    collector.fault(line, "missing kernel name");
                    continue;
                }
                let launch = id_col.map_or_else(|| line.to_string(), |c| rec[c].trim().to_string());
                for &c in &metric_cols {
                    collector.put(kernel, &launch, header[c].trim(), &rec[c], &units[c], line);
                }
            }
        }
    }
    collector.finish()
}

/// Parses an Nsight Systems CUDA kernel summary (`nsys stats` CSV).
pub fn parse_nsys_summary(text: &str) -> RunFeatures {
    let mut faults = Vec::new();
    let mut rows = reader(text).into_records();
    let time_headers = ["Total Time (ns)", "Total Time"];
    let mut found = None;
    for rec in rows.by_ref() {
        match rec {
            Ok(rec) => {
                let inst = column(&rec, "Instances");
                let time = time_headers.iter().find_map(|h| column(&rec, h));
                if let (Some(i), Some(t)) = (inst, time) {
                    found = Some((rec.clone(), i, t, column(&rec, "Name")));
                    break;
                }
            }
            Err(e) => faults.push(ParseFault {
                line: e.position().map_or(0, |p| p.line()),
                detail: e.to_string(),
            }),
        }
    }

    let mut launches = 0u64;
    let mut total_ns = 0.0f64;
    let mut names: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
    if let Some((header, inst_col, time_col, name_col)) = found {
        for rec in rows {
            let rec = match rec {
                Ok(r) => r,
                Err(e) => {
                    faults.push(ParseFault {
                        line: e.position().map_or(0, |p| p.line()),
                        detail: e.to_string(),
                    });
                    continue;
                }
            };
            let line = rec.position().map_or(0, |p| p.line());
            if rec.iter().all(|f| f.trim().is_empty()) {
                continue;
            }
            if rec.len() != header.len() {
                faults.push(ParseFault {
                    line,
                    detail: format!("expected {} fields, found {}", header.len(), rec.len()),
                });
                continue;
            }
            let inst = parse_number(&rec[inst_col]).filter(|v| *v >= 0.0 && v.fract() == 0.0);
            let time = parse_number(&rec[time_col]).filter(|v| *v >= 0.0);
            match (inst, time) {
                (Some(i), Some(t)) => {
                    launches += i as u64;
                    total_ns += t;
                    if let Some(c) = name_col {
                        names.insert(rec[c].trim().to_string());
                    }
                }
                _ => faults.push(ParseFault {
                    line,
                    detail: "instance count or total time is not a valid number".into(),
                }),
            }
        }
    }

    let total_ms = total_ns / 1e6;
    let mut values = BTreeMap::new();
    values.insert("kernel_launch_count".to_string(), Value::Number(launches as f64));
    values.insert("distinct_kernel_count".to_string(), Value::Number(names.len() as f64));
    values.insert("total_gpu_time_ms".to_string(), Value::Number(total_ms));
    if launches > 0 {
        values.insert("mean_launch_time_ms".to_string(), Value::Number(total_ms / launches as f64));
    }
    RunFeatures { values, faults }
}

/// `baseline / candidate`.
pub fn compute_speedup(baseline_latency_ms: f64, candidate_latency_ms: f64) -> Result<f64, TimingError> {
    for v in [baseline_latency_ms, candidate_latency_ms] {
        if !(v.is_finite() && v > 0.0) {
            return Err(TimingError::InvalidLatency(v));
        }
    }
    Ok(baseline_latency_ms / candidate_latency_ms)
}

/// Mean over timed samples; warm-up iterations are recorded only as a count.
pub fn aggregate_timing(samples_ms: &[f64], warmup_count: usize) -> Result<TimingResult, TimingError> {
    if samples_ms.is_empty() {
        return Err(TimingError::EmptySamples);
    }
    if let Some(bad) = samples_ms.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(TimingError::InvalidLatency(*bad));
    }
    Ok(TimingResult {
        mean_latency_ms: samples_ms.iter().sum::<f64>() / samples_ms.len() as f64,
        sample_count: samples_ms.len(),
        warmup_count,
        samples_ms: samples_ms.to_vec(),
    })
}
