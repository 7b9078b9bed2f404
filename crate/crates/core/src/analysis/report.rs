//! CSV renderings. Field names match the serde JSON of the same records.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::bench::BenchRecord;
use super::erf::ErfReport;
use super::rank::RankReport;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacRecord {
    pub height: usize,
    pub width: usize,
    pub matmul_macs: u64,
    pub conv_macs: u64,
    pub total_macs: u64,
    pub elementwise_ops: u64,
    pub peak_temp_elements: u64,
}

/// Spectra are `;`-separated inside one column.
pub fn rank_csv(reports: &[RankReport]) -> String {
    let mut s = String::from("kind,n,d,pairs,seed,tol,rank,sweeps,singular_values\n");
    for r in reports {
        let spectrum: Vec<String> = r.singular_values.iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:e},{},{},{}",
            r.kind,
            r.n,
            r.d,
            r.pairs,
            r.seed,
            r.tol,
            r.rank,
            r.sweeps,
            spectrum.join(";")
        );
    }
    s
}

pub fn erf_csv(reports: &[ErfReport]) -> String {
    let mut s = String::from("k_core,dilation,k_extra,predicted,measured_h,measured_w\n");
    for r in reports {
        let extra = r.k_extra.map_or(String::new(), |k| k.to_string());
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.k_core, r.dilation, extra, r.predicted, r.measured_h, r.measured_w
        );
    }
    s
}

pub fn bench_csv(records: &[BenchRecord]) -> String {
    let mut s = String::from("n,engine,median_ms,peak_temp_elements,largest_temp_elements,rel_error\n");
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{:.6},{},{},{:e}",
            r.n,
            r.engine.name(),
            r.median_ms,
            r.peak_temp_elements,
            r.largest_temp_elements,
            r.rel_error
        );
    }
    s
}

pub fn macs_csv(records: &[MacRecord]) -> String {
    let mut s = String::from(
        "height,width,matmul_macs,conv_macs,total_macs,elementwise_ops,peak_temp_elements\n",
    );
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.height, r.width, r.matmul_macs, r.conv_macs, r.total_macs, r.elementwise_ops, r.peak_temp_elements
        );
    }
    s
}
