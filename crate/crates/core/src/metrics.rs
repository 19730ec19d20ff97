//! Scraped metric series, derived CPU rates and CSV export.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

pub const BUSY_SECONDS: &str = "replica_busy_vcpu_seconds_total";
pub const OUTSTANDING: &str = "endpoint_outstanding_requests";
pub const CPU_RATE: &str = "cpu_rate";
pub const CLUSTER_CPU_RATE: &str = "cluster_cpu_rate";

pub const CSV_HEADER: &str = "time_s,cluster,service,replica,value";

/// Sample times closer than this are treated as the same grid point.
const GRID_EPS: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("rate window {window} s must be positive")]
    BadWindow { window: f64 },
    #[error("series {0} has fewer samples than one rate window")]
    InsufficientSamples(String),
    #[error("series do not share a scrape grid: {0}")]
    MismatchedGrid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Labels {
    pub cluster: String,
    pub service: String,
    pub replica: Option<usize>,
}

impl fmt::Display for Labels {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{cluster={},service={}", self.cluster, self.service)?;
        if let Some(r) = self.replica {
            write!(f, ",replica={r}")?;
        }
        write!(f, "}}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SeriesKey {
    pub name: String,
    pub labels: Labels,
}

impl fmt::Display for SeriesKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.name, self.labels)
    }
}

/// All series of a run, keyed by name and labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsStore {
    series: BTreeMap<SeriesKey, Vec<(f64, f64)>>,
}

impl MetricsStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a sample. Times within a series must be strictly increasing.
    pub fn record(&mut self, name: &str, labels: Labels, t: f64, value: f64) {
        let samples = self.series.entry(SeriesKey { name: name.to_string(), labels }).or_default();
        debug_assert!(samples.last().is_none_or(|&(last, _)| t > last), "non-increasing sample time {t}");
        samples.push((t, value));
    }

    pub fn get(&self, key: &SeriesKey) -> Option<&[(f64, f64)]> {
        self.series.get(key).map(Vec::as_slice)
    }

    pub fn series(&self, name: &str) -> impl Iterator<Item = (&Labels, &[(f64, f64)])> + '_ {
        let name = name.to_string();
        self.series.iter().filter(move |(k, _)| k.name == name).map(|(k, v)| (&k.labels, v.as_slice()))
    }

    /// Samples of the series named `name` whose labels satisfy `pred`.
    pub fn find(&self, name: &str, pred: impl Fn(&Labels) -> bool) -> Vec<(&Labels, &[(f64, f64)])> {
        self.series(name).filter(|(l, _)| pred(l)).collect()
    }

    pub fn names(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.series.keys().map(|k| k.name.as_str()).collect();
        v.dedup();
        v
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn merge(&mut self, other: MetricsStore) {
        self.series.extend(other.series);
    }

    /// Rows `(t, labels, value)` of one metric sorted by time then labels.
    fn rows(&self, name: &str) -> Vec<(f64, &Labels, f64)> {
        let mut rows: Vec<(f64, &Labels, f64)> =
            self.series(name).flat_map(|(l, s)| s.iter().map(move |&(t, v)| (t, l, v))).collect();
        rows.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
        rows
    }

    /// One metric as CSV, header first.
    pub fn write_csv<W: Write>(&self, name: &str, mut w: W) -> io::Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for (t, l, v) in self.rows(name) {
            let replica = l.replica.map(|r| r.to_string()).unwrap_or_default();
            writeln!(w, "{t},{},{},{replica},{v}", l.cluster, l.service)?;
        }
        Ok(())
    }

    /// Write `<dir>/<name>.csv` for every requested metric name, header-only
    /// when the store holds no such series.
    pub fn export_csv(&self, dir: &Path, names: &[&str]) -> io::Result<()> {
        for name in names {
            let file = std::fs::File::create(dir.join(format!("{name}.csv")))?;
            let mut w = io::BufWriter::new(file);
            self.write_csv(name, &mut w)?;
            w.flush()?;
        }
        Ok(())
    }
}

fn lookup(samples: &[(f64, f64)], t: f64) -> Option<f64> {
    let i = samples.partition_point(|&(s, _)| s < t - GRID_EPS);
    samples.get(i).filter(|&&(s, _)| (s - t).abs() <= GRID_EPS).map(|&(_, v)| v)
}

/// Windowed rate of one counter series: `(c(t) - c(t - w)) / w` at every
/// sample time that has a sample exactly one window earlier.
pub fn rate(samples: &[(f64, f64)], window: f64) -> Vec<(f64, f64)> {
    samples
        .iter()
        .filter_map(|&(t, v)| lookup(samples, t - window).map(|old| (t, (v - old) / window)))
        .collect()
}

/// Derive `cpu_rate` for every busy-seconds counter in `store`.
pub fn cpu_rate(store: &MetricsStore, window: f64) -> Result<MetricsStore, MetricsError> {
    if !(window > 0.0 && window.is_finite()) {
        return Err(MetricsError::BadWindow { window });
    }
    let mut out = MetricsStore::new();
    for (labels, samples) in store.series(BUSY_SECONDS) {
        let r = rate(samples, window);
        if r.is_empty() {
            return Err(MetricsError::InsufficientSamples(format!("{BUSY_SECONDS}{labels}")));
        }
        for (t, v) in r {
            out.record(CPU_RATE, labels.clone(), t, v);
        }
    }
    Ok(out)
}

/// Sum the `cpu_rate` series per `(cluster, service)`.
pub fn aggregate_by_cluster(rates: &MetricsStore) -> Result<MetricsStore, MetricsError> {
    let mut groups: BTreeMap<(String, String), Vec<(&Labels, &[(f64, f64)])>> = BTreeMap::new();
    for (l, s) in rates.series(CPU_RATE) {
        groups.entry((l.cluster.clone(), l.service.clone())).or_default().push((l, s));
    }
    let mut out = MetricsStore::new();
    for ((cluster, service), members) in groups {
        let (first_labels, grid) = members[0];
        for &(l, s) in &members[1..] {
            let same = s.len() == grid.len() && s.iter().zip(grid).all(|(a, b)| (a.0 - b.0).abs() <= GRID_EPS);
            if !same {
                return Err(MetricsError::MismatchedGrid(format!("{first_labels} vs {l}")));
            }
        }
        let labels = Labels { cluster, service, replica: None };
        for (i, &(t, _)) in grid.iter().enumerate() {
            let sum: f64 = members.iter().map(|(_, s)| s[i].1).sum();
            out.record(CLUSTER_CPU_RATE, labels.clone(), t, sum);
        }
    }
    Ok(out)
}

/// Mean of a series' values over samples with `from <= t < to`.
pub fn window_mean(samples: &[(f64, f64)], from: f64, to: f64) -> Option<f64> {
    let vals: Vec<f64> = samples.iter().filter(|&&(t, _)| t >= from && t < to).map(|&(_, v)| v).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}
