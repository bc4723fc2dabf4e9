//! Static SVG renderings of an [`AttentionTrace`].
//!
//! Heat cells are `<rect class="cell">` elements, so counting them gives the
//! grid size.

use std::fmt::Write;

use gazeattn_core::{AttentionTrace, Task};

const CELL: f64 = 28.0;
const LABEL_W: f64 = 110.0;
const LABEL_H: f64 = 90.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// White to deep blue as `value` goes from 0 to 1.
fn blue(value: f64) -> String {
    let t = value.clamp(0.0, 1.0);
    let mix = |from: f64, to: f64| (from + (to - from) * t).round() as u8;
    format!(
        "#{:02x}{:02x}{:02x}",
        mix(255.0, 8.0),
        mix(255.0, 48.0),
        mix(255.0, 107.0)
    )
}

fn row_max(row: &[f64]) -> f64 {
    row.iter().cloned().fold(0.0, f64::max)
}

fn header(out: &mut String, width: f64, height: f64) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
}

fn column_labels(out: &mut String, tokens: &[String]) {
    for (j, tok) in tokens.iter().enumerate() {
        let x = LABEL_W + (j as f64 + 0.5) * CELL;
        let y = LABEL_H - 6.0;
        let _ = writeln!(
            out,
            r#"<text x="{x}" y="{y}" transform="rotate(-60 {x} {y})">{}</text>"#,
            escape(tok)
        );
    }
}

fn cell(out: &mut String, i: usize, j: usize, value: f64, shade: f64) {
    let x = LABEL_W + j as f64 * CELL;
    let y = LABEL_H + i as f64 * CELL;
    let _ = writeln!(
        out,
        r##"<rect class="cell" x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{}" stroke="#dddddd"><title>{value:.4}</title></rect>"##,
        blue(shade)
    );
}

/// One horizontal strip per epoch over the probe tokens. Shading is relative
/// to each epoch's largest share.
pub fn saliency_strips(trace: &AttentionTrace) -> String {
    let cols = trace.probe_tokens.len();
    let rows = trace.epoch_saliency.len();
    let mut out = String::new();
    header(
        &mut out,
        LABEL_W + cols as f64 * CELL + 10.0,
        LABEL_H + rows as f64 * CELL + 10.0,
    );
    column_labels(&mut out, &trace.probe_tokens);
    for (i, u) in trace.epoch_saliency.iter().enumerate() {
        let y = LABEL_H + (i as f64 + 0.65) * CELL;
        let _ = writeln!(out, r#"<text x="4" y="{y}">epoch {}</text>"#, i + 1);
        let max = row_max(u);
        for (j, &v) in u.iter().enumerate() {
            cell(&mut out, i, j, v, if max > 0.0 { v / max } else { 0.0 });
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Decoder steps (vertical) against input positions (horizontal).
pub fn attention_grid(trace: &AttentionTrace) -> String {
    let cols = trace.probe_tokens.len();
    let rows = trace.attention.len();
    let row_labels: Vec<String> = if trace.task == Some(Task::Sentcomp) || trace.output_tokens.len() != rows {
        trace.probe_tokens.iter().take(rows).cloned().collect()
    } else {
        trace.output_tokens.clone()
    };
    let mut out = String::new();
    header(
        &mut out,
        LABEL_W + cols as f64 * CELL + 10.0,
        LABEL_H + rows as f64 * CELL + 10.0,
    );
    column_labels(&mut out, &trace.probe_tokens);
    for (i, weights) in trace.attention.iter().enumerate() {
        let y = LABEL_H + (i as f64 + 0.65) * CELL;
        let label = row_labels.get(i).map_or(String::new(), |s| escape(s));
        let _ = writeln!(out, r#"<text x="4" y="{y}">{label}</text>"#);
        for (j, &w) in weights.iter().enumerate() {
            cell(&mut out, i, j, w, w);
        }
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace() -> AttentionTrace {
        AttentionTrace {
            task: Some(Task::Paragen),
            probe_tokens: vec!["a".into(), "<b>".into(), "c".into()],
            epoch_saliency: vec![vec![0.2, 0.3, 0.5], vec![0.1, 0.1, 0.8]],
            attention: vec![vec![0.5, 0.25, 0.25], vec![0.0, 1.0, 0.0]],
            output_tokens: vec!["x".into(), "</s>".into()],
            truncated: false,
        }
    }

    #[test]
    fn cell_counts() {
        let t = trace();
        assert_eq!(saliency_strips(&t).matches(r#"class="cell""#).count(), 6);
        let grid = attention_grid(&t);
        assert_eq!(grid.matches(r#"class="cell""#).count(), 6);
        assert!(grid.contains("&lt;b&gt;") && grid.contains("&lt;/s&gt;"));
    }

    #[test]
    fn shading_endpoints() {
        assert_eq!(blue(0.0), "#ffffff");
        assert_eq!(blue(1.0), "#08306b");
    }
}
