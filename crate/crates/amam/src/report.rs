//! Evaluation report JSON (fixed 6 decimals) and PR-curve CSV.

use std::fmt::Write;

use amam_core::EvalReport;

use crate::format::{csv_num, fixed6};

pub fn report_json(r: &EvalReport) -> String {
    let mut s = String::from("{\n");
    let num = |k: &str, v: f64| format!("  \"{k}\": {},\n", fixed6(v));
    s += &num("iou_threshold", r.iou_threshold);
    s += &num("conf_threshold", r.conf_threshold);
    s += &num("precision", r.precision);
    s += &num("recall", r.recall);
    let _ = writeln!(s, "  \"precision_degenerate\": {},", r.precision_degenerate);
    let _ = writeln!(s, "  \"recall_degenerate\": {},", r.recall_degenerate);
    s += &num("ap_50", r.ap_50);
    s += &num("ap_50_95", r.ap_50_95);
    s += "  \"per_threshold\": [";
    for (i, (t, ap)) in r.per_threshold.iter().enumerate() {
        let sep = if i == 0 { "\n" } else { ",\n" };
        let _ = write!(
            s,
            "{sep}    {{\"iou\": {}, \"ap\": {}}}",
            fixed6(*t),
            fixed6(*ap)
        );
    }
    s += "\n  ]\n}\n";
    s
}

/// `recall,precision` after each ranked detection.
pub fn pr_csv(curve: &[(f64, f64)]) -> String {
    let mut s = String::from("recall,precision\n");
    for (r, p) in curve {
        let _ = writeln!(s, "{},{}", csv_num(*r), csv_num(*p));
    }
    s
}

/// Human-readable summary for the terminal.
pub fn report_text(r: &EvalReport) -> String {
    let flag = |d: bool| {
        if d {
            " (degenerate: no denominator)"
        } else {
            ""
        }
    };
    let mut s = String::new();
    let _ = writeln!(s, "IoU threshold      {}", fixed6(r.iou_threshold));
    let _ = writeln!(s, "conf threshold     {}", fixed6(r.conf_threshold));
    let _ = writeln!(
        s,
        "precision          {}{}",
        fixed6(r.precision),
        flag(r.precision_degenerate)
    );
    let _ = writeln!(
        s,
        "recall             {}{}",
        fixed6(r.recall),
        flag(r.recall_degenerate)
    );
    let _ = writeln!(s, "AP@0.5             {}", fixed6(r.ap_50));
    let _ = writeln!(s, "AP@0.5:0.95        {}", fixed6(r.ap_50_95));
    for (t, ap) in &r.per_threshold {
        let _ = writeln!(s, "  AP@{:.2}          {}", t, fixed6(*ap));
    }
    s
}
