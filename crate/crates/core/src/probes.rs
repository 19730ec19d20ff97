//! Cluster-to-cluster RTT measurement through the gateway.

use std::io::{self, Write};

use crate::engine::{probe_count, EngineError, EngineState, ProbeOutcome, ProbeSample};

/// Per-pair summary of a ping experiment. Mean and variance (population,
/// ms and ms²) are over received probes and are `None` when all were lost.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RttStats {
    pub sent: u64,
    pub received: u64,
    pub mean: Option<f64>,
    pub variance: Option<f64>,
    pub loss_fraction: f64,
}

/// Ping every pair in `pairs` every `interval` seconds for `duration`
/// seconds with client load switched off, then wait one response timeout so
/// the last probes can return.
///
/// The engine's scenario duration must cover `duration + timeout`.
pub fn run_ping(
    mut engine: EngineState,
    pairs: Vec<(usize, usize)>,
    interval: f64,
    duration: f64,
) -> Result<Vec<ProbeSample>, EngineError> {
    let count = probe_count(duration, interval);
    engine.disable_workload();
    engine.set_probes(pairs, interval, count);
    let spec = engine.topology().spec();
    let until = (duration + spec.engine.timeout_s).min(spec.duration_s);
    let result = engine.run(until)?;
    Ok(result
        .probes
        .into_iter()
        .map(|mut p| {
            if p.outcome == ProbeOutcome::Pending {
                p.outcome = ProbeOutcome::Lost;
            }
            p
        })
        .collect())
}

/// `n x n` matrix of per-pair statistics; pending probes are ignored.
pub fn rtt_stats(samples: &[ProbeSample], n: usize) -> Vec<Vec<RttStats>> {
    let mut acc = vec![vec![(0u64, 0u64, 0.0f64, 0.0f64); n]; n];
    for p in samples {
        let (sent, recv, mean, m2) = &mut acc[p.src][p.dst];
        match p.outcome {
            ProbeOutcome::Pending => continue,
            ProbeOutcome::Lost => *sent += 1,
            ProbeOutcome::Rtt(x) => {
                *sent += 1;
                *recv += 1;
                let d = x - *mean;
                *mean += d / *recv as f64;
                *m2 += d * (x - *mean);
            }
        }
    }
    acc.into_iter()
        .map(|row| {
            row.into_iter()
                .map(|(sent, received, mean, m2)| RttStats {
                    sent,
                    received,
                    mean: (received > 0).then_some(mean),
                    variance: (received > 0).then(|| m2 / received as f64),
                    loss_fraction: if sent == 0 { 0.0 } else { (sent - received) as f64 / sent as f64 },
                })
                .collect()
        })
        .collect()
}

/// CSV of raw probes: `src,dst,sent_at,rtt_ms,lost` with cluster names.
pub fn write_probe_csv<W: Write>(samples: &[ProbeSample], names: &[&str], mut w: W) -> io::Result<()> {
    writeln!(w, "src,dst,sent_at,rtt_ms,lost")?;
    let mut rows: Vec<&ProbeSample> = samples.iter().collect();
    rows.sort_by(|a, b| a.sent_at.total_cmp(&b.sent_at).then((a.src, a.dst).cmp(&(b.src, b.dst))));
    for p in rows {
        let (rtt, lost) = match p.outcome {
            ProbeOutcome::Rtt(v) => (v.to_string(), "false"),
            ProbeOutcome::Lost => (String::new(), "true"),
            ProbeOutcome::Pending => (String::new(), ""),
        };
        writeln!(w, "{},{},{},{rtt},{lost}", names[p.src], names[p.dst], p.sent_at)?;
    }
    Ok(())
}

/// Human-readable mean-RTT matrix; `-` marks an all-lost pair.
pub fn format_matrix(stats: &[Vec<RttStats>], names: &[&str]) -> String {
    let mut out = String::from("mean RTT [ms]");
    for n in names {
        out.push_str(&format!("\t{n}"));
    }
    out.push('\n');
    for (i, row) in stats.iter().enumerate() {
        out.push_str(names[i]);
        for s in row {
            match s.mean {
                Some(m) => out.push_str(&format!("\t{m:.3}")),
                None => out.push_str("\t-"),
            }
        }
        out.push('\n');
    }
    out
}
