//! CSV emitters. Floats use 17 significant digits so equal bits give equal text.

use std::fmt::Write as _;

use crate::model::ParamCounts;
use crate::trainer::Metrics;

pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// One evaluation of one task after one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub stage: usize,
    pub method: String,
    pub task: String,
    pub metrics: Metrics,
    pub counts: ParamCounts,
}

pub const REPORT_HEADER: &str = "stage,method,task,auroc,auprc,accuracy,encoder_params,moe_params,router_params,head_params";

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.stage,
            r.method,
            r.task,
            opt(r.metrics.auroc),
            opt(r.metrics.auprc),
            num(r.metrics.accuracy),
            r.counts.encoder,
            r.counts.moe,
            r.counts.router,
            r.counts.head
        );
    }
    out
}
