//! Text exports for external tabulation and plotting.

use serde::Serialize;

use crate::metrics::{self, TaskMetrics};
use crate::train::{MetricsReport, Utilization};

/// One line of the metrics stream: a single task of a single run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord<'a> {
    pub variant: &'a str,
    pub seed: u64,
    pub task: usize,
    #[serde(flatten)]
    pub metrics: &'a TaskMetrics,
}

/// Line-delimited JSON, one record per task.
pub fn metrics_jsonl(variant: &str, seed: u64, report: &MetricsReport) -> String {
    report
        .tasks
        .iter()
        .enumerate()
        .map(|(task, m)| {
            let rec = MetricsRecord {
                variant,
                seed,
                task,
                metrics: m,
            };
            serde_json::to_string(&rec).expect("metrics serialize") + "\n"
        })
        .collect()
}

/// Two columns: epoch and value.
pub fn curve_text(curve: &[(usize, f64)]) -> String {
    curve.iter().map(|(e, v)| format!("{e}\t{v:.9e}\n")).collect()
}

/// Tab-separated expert dispatch counts per layer and region, with the share
/// of the region's dispatches each expert received.
pub fn route_tsv(util: &Utilization, region_names: &[String]) -> String {
    let mut out = String::from("layer\tregion\texpert\tcount\tshare\n");
    let nx = util.num_experts;
    for (layer, counts) in util.dispatch.iter().enumerate() {
        for r in 0..util.num_regions {
            let row = &counts[r * nx..(r + 1) * nx];
            let total: u64 = row.iter().sum();
            let name = region_names.get(r).cloned().unwrap_or_else(|| r.to_string());
            for (x, &c) in row.iter().enumerate() {
                let share = if total > 0 { c as f64 / total as f64 } else { 0.0 };
                out.push_str(&format!("{layer}\t{name}\t{x}\t{c}\t{share:.6}\n"));
            }
        }
    }
    out
}

/// Per-variant summary table: mean ± std of each task's accuracy over seeds.
pub fn summary_table(rows: &[(String, Vec<MetricsReport>)]) -> String {
    let mut out = String::from("variant\ttask\tacc_mean\tacc_std\tkappa_mean\tkappa_std\tchance\tseeds\n");
    for (variant, reports) in rows {
        let Some(first) = reports.first() else { continue };
        for t in 0..first.tasks.len() {
            let acc: Vec<f64> = reports.iter().map(|r| r.tasks[t].accuracy).collect();
            let kappa: Vec<f64> = reports.iter().map(|r| r.tasks[t].kappa).collect();
            let (am, asd) = metrics::mean_std(&acc);
            let (km, ksd) = metrics::mean_std(&kappa);
            out.push_str(&format!(
                "{variant}\t{t}\t{am:.4}\t{asd:.4}\t{km:.4}\t{ksd:.4}\t{:.4}\t{}\n",
                first.tasks[t].chance,
                reports.len()
            ));
        }
    }
    out
}
