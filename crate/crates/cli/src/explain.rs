//! Plain-text attention report.

use std::fmt::Write;

use timelyrec::calendar::{CalendarFields, Granularity};
use timelyrec::data::Vocab;
use timelyrec::model::Explanation;

fn fields_row(f: &CalendarFields) -> String {
    Granularity::ALL
        .iter()
        .map(|&g| format!("{:<12}", g.slot_label(f.slot(g))))
        .collect::<String>()
        .trim_end()
        .to_string()
}

/// One block per granularity (window weights by radius, raw and divided by
/// the target-slot weight, plus the importance gate), one row per history
/// entry (calendar fields and similarity), then the score.
pub fn render(
    ex: &Explanation,
    user: &str,
    item: &str,
    t: i64,
    items: &Vocab,
) -> String {
    let mut out = String::new();
    let header: String = Granularity::ALL
        .iter()
        .map(|g| format!("{:<12}", g.name()))
        .collect();
    let _ = writeln!(out, "user={user} item={item} time={t}");
    let _ = writeln!(out, "{}", header.trim_end());
    let _ = writeln!(out, "{}", fields_row(&ex.fields));
    let _ = writeln!(out);

    let _ = writeln!(out, "[gradual attention]");
    for ga in &ex.granularities {
        let radii: String = (0..ga.weights.len()).map(|r| format!("{:>10}", format!("r={r}"))).collect();
        let _ = writeln!(
            out,
            "{:<12} slot={:<6}{radii}{:>12}",
            ga.granularity.name(),
            ga.granularity.slot_label(ga.slot),
            "importance"
        );
        let raw: String = ga.weights.iter().map(|w| format!("{w:>10.6}")).collect();
        let _ = writeln!(out, "{:<12} {:<11}{raw}{:>12.6}", "", "weight", ga.gate);
        let norm: String = ga.normalized.iter().map(|w| format!("{w:>10.6}")).collect();
        let _ = writeln!(out, "{:<12} {:<11}{norm}", "", "normalized");
    }
    let _ = writeln!(out);

    let _ = writeln!(out, "[time-based attention]");
    let _ = writeln!(
        out,
        "{:<12}{:<12}{}{:>12}",
        "item",
        "timestamp",
        format!("{:<48}", header.trim_end()),
        "similarity"
    );
    for h in &ex.history {
        let _ = writeln!(
            out,
            "{:<12}{:<12}{:<48}{:>12.6}",
            items.external(h.item),
            h.timestamp,
            fields_row(&h.fields),
            h.similarity
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "score={:.6}", ex.score);
    out
}
