//! Hand-built SVG renderings of the analysis CSVs. Static result
//! displays, not a charting library: fixed canvas, linear scales, no
//! interactivity.

use std::fmt::Write;

use oommix_core::analysis::{ProjectionRow, SweepRow};
use oommix_core::error::{Error, Result};

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 48.0;

const PHASE_FILL: [&str; 2] = ["#7f9fc4", "#d98143"];
const CLASS_FILL: [&str; 6] = ["#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377"];

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        W / 2.0,
        title
    )
}

fn axis(out: &mut String, x_label: &str, y_label: &str) {
    let (x0, y0, x1, y1) = frame();
    write!(
        out,
        "<line x1=\"{x0}\" y1=\"{y1}\" x2=\"{x1}\" y2=\"{y1}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>\n\
         <text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{y_label}</text>\n",
        (x0 + x1) / 2.0,
        H - 10.0,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
    )
    .unwrap();
}

/// Plot frame (x0, y0, x1, y1) with y0 the top.
fn frame() -> (f64, f64, f64, f64) {
    (MARGIN, 36.0, W - MARGIN / 2.0, H - MARGIN)
}

// ── λ histogram ─────────────────────────────────────────────────────────

pub fn lambda_histogram(rows: &[(usize, f64, f64, u64)]) -> String {
    let (x0, y0, x1, y1) = frame();
    let peak = rows.iter().map(|r| r.3).max().unwrap_or(1).max(1) as f64;
    let mut out = header("Mixing coefficient distribution by training phase");
    axis(&mut out, "lambda", "count");

    for &(phase, lo, hi, count) in rows {
        let fill = PHASE_FILL[phase.min(1)];
        // split each bin between the two phases side by side
        let span = (x1 - x0) * (hi - lo);
        let bx = x0 + (x1 - x0) * lo + span * 0.5 * phase.min(1) as f64;
        let bh = (y1 - y0) * count as f64 / peak;
        write!(
            out,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" \
             fill=\"{}\" stroke=\"white\" stroke-width=\"0.5\"/>\n",
            bx,
            y1 - bh,
            span * 0.5,
            bh,
            fill
        )
        .unwrap();
    }

    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let x = x0 + (x1 - x0) * v;
        write!(
            out,
            "<line x1=\"{x:.2}\" y1=\"{y1}\" x2=\"{x:.2}\" y2=\"{}\" stroke=\"black\"/>\n\
             <text x=\"{x:.2}\" y=\"{}\" text-anchor=\"middle\">{v:.1}</text>\n",
            y1 + 4.0,
            y1 + 18.0
        )
        .unwrap();
    }

    legend(&mut out, &[("first phase", PHASE_FILL[0]), ("second phase", PHASE_FILL[1])]);
    out.push_str("</svg>\n");
    out
}

// ── sweep accuracy lines ────────────────────────────────────────────────

pub fn sweep_lines(rows: &[SweepRow]) -> Result<String> {
    let ran: Vec<&SweepRow> = rows.iter().filter(|r| !r.skipped).collect();
    if ran.is_empty() {
        return Err(Error::Analysis("sweep.csv holds no completed cells".into()));
    }
    let (x0, y0, x1, y1) = frame();
    let gx_min = ran.iter().map(|r| r.m_g).min().unwrap() as f64;
    let gx_max = ran.iter().map(|r| r.m_g).max().unwrap() as f64;
    let lo = ran.iter().map(|r| r.mean - r.std).fold(f64::INFINITY, f64::min);
    let hi = ran.iter().map(|r| r.mean + r.std).fold(f64::NEG_INFINITY, f64::max);
    let pad = ((hi - lo) * 0.15).max(1e-3);
    let (lo, hi) = (lo - pad, hi + pad);
    let sx = |g: f64| {
        if gx_max > gx_min {
            x0 + (x1 - x0) * (g - gx_min) / (gx_max - gx_min)
        } else {
            (x0 + x1) / 2.0
        }
    };
    let sy = |a: f64| y1 - (y1 - y0) * (a - lo) / (hi - lo);

    let mut out = header("Test accuracy by generator placement");
    axis(&mut out, "m_g", "accuracy");

    let mut mds: Vec<usize> = ran.iter().map(|r| r.m_d).collect();
    mds.sort_unstable();
    mds.dedup();
    let mut entries = Vec::new();
    for (si, &md) in mds.iter().enumerate() {
        let color = CLASS_FILL[si % CLASS_FILL.len()];
        let mut series: Vec<&&SweepRow> = ran.iter().filter(|r| r.m_d == md).collect();
        series.sort_by_key(|r| r.m_g);
        let path: Vec<String> = series
            .iter()
            .map(|r| format!("{:.2},{:.2}", sx(r.m_g as f64), sy(r.mean)))
            .collect();
        write!(
            out,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>\n",
            path.join(" "),
            color
        )
        .unwrap();
        for r in &series {
            let (cx, cy) = (sx(r.m_g as f64), sy(r.mean));
            write!(
                out,
                "<line x1=\"{cx:.2}\" y1=\"{:.2}\" x2=\"{cx:.2}\" y2=\"{:.2}\" stroke=\"{color}\"/>\n\
                 <circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                sy(r.mean - r.std),
                sy(r.mean + r.std),
            )
            .unwrap();
        }
        entries.push((format!("m_d = {}", md), color));
    }

    for &g in ran.iter().map(|r| r.m_g).collect::<std::collections::BTreeSet<_>>().iter() {
        let x = sx(g as f64);
        write!(
            out,
            "<text x=\"{x:.2}\" y=\"{}\" text-anchor=\"middle\">{g}</text>\n",
            y1 + 18.0
        )
        .unwrap();
    }
    for i in 0..=4 {
        let a = lo + (hi - lo) * i as f64 / 4.0;
        write!(
            out,
            "<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\">{a:.3}</text>\n",
            x0 - 6.0,
            sy(a) + 4.0
        )
        .unwrap();
    }

    let refs: Vec<(&str, &str)> = entries.iter().map(|(s, c)| (s.as_str(), *c)).collect();
    legend(&mut out, &refs);
    out.push_str("</svg>\n");
    Ok(out)
}

// ── projection scatter ──────────────────────────────────────────────────

pub fn projection_scatter(rows: &[ProjectionRow]) -> String {
    let mut out = header("Isomap projection: actual vs generated");
    let planes = [("x / y", 0, 1), ("x / z", 0, 2), ("y / z", 1, 2)];
    let panel_w = (W - 4.0 * 16.0) / 3.0;
    for (pi, &(label, a, b)) in planes.iter().enumerate() {
        let px = 16.0 + pi as f64 * (panel_w + 16.0);
        let (py, ph) = (48.0, H - 110.0);
        scatter_panel(&mut out, rows, a, b, px, py, panel_w, ph, label);
    }
    let mut entries: Vec<(String, &str)> = Vec::new();
    let mut classes: Vec<usize> =
        rows.iter().filter(|r| r.tag == "actual").map(|r| r.class).collect();
    classes.sort_unstable();
    classes.dedup();
    for c in classes {
        entries.push((format!("class {}", c), CLASS_FILL[c % CLASS_FILL.len()]));
    }
    entries.push(("generated".into(), "#222222"));
    let refs: Vec<(&str, &str)> = entries.iter().map(|(s, c)| (s.as_str(), *c)).collect();
    legend(&mut out, &refs);
    out.push_str("</svg>\n");
    out
}

#[allow(clippy::too_many_arguments)]
fn scatter_panel(
    out: &mut String,
    rows: &[ProjectionRow],
    a: usize,
    b: usize,
    px: f64,
    py: f64,
    pw: f64,
    ph: f64,
    label: &str,
) {
    let (mut lo_a, mut hi_a) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut lo_b, mut hi_b) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in rows {
        lo_a = lo_a.min(r.xyz[a]);
        hi_a = hi_a.max(r.xyz[a]);
        lo_b = lo_b.min(r.xyz[b]);
        hi_b = hi_b.max(r.xyz[b]);
    }
    let span_a = (hi_a - lo_a).max(1e-9);
    let span_b = (hi_b - lo_b).max(1e-9);
    let sx = |v: f64| px + 6.0 + (pw - 12.0) * (v - lo_a) / span_a;
    let sy = |v: f64| py + ph - 6.0 - (ph - 12.0) * (v - lo_b) / span_b;

    write!(
        out,
        "<rect x=\"{px:.2}\" y=\"{py:.2}\" width=\"{pw:.2}\" height=\"{ph:.2}\" \
         fill=\"none\" stroke=\"#999\"/>\n\
         <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{label}</text>\n",
        px + pw / 2.0,
        py + ph + 16.0
    )
    .unwrap();

    // draw generated last so the crosses stay visible over the cloud
    for r in rows.iter().filter(|r| r.tag == "actual") {
        write!(
            out,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"{}\" fill-opacity=\"0.7\"/>\n",
            sx(r.xyz[a]),
            sy(r.xyz[b]),
            CLASS_FILL[r.class % CLASS_FILL.len()]
        )
        .unwrap();
    }
    for r in rows.iter().filter(|r| r.tag != "actual") {
        let (cx, cy) = (sx(r.xyz[a]), sy(r.xyz[b]));
        write!(
            out,
            "<path d=\"M {} {} L {} {} M {} {} L {} {}\" stroke=\"#222222\" stroke-width=\"1\"/>\n",
            cx - 2.5,
            cy - 2.5,
            cx + 2.5,
            cy + 2.5,
            cx - 2.5,
            cy + 2.5,
            cx + 2.5,
            cy - 2.5
        )
        .unwrap();
    }
}

fn legend(out: &mut String, entries: &[(&str, &str)]) {
    let y = H - 16.0;
    let mut x = MARGIN;
    for (label, color) in entries {
        write!(
            out,
            "<rect x=\"{x:.2}\" y=\"{:.2}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n\
             <text x=\"{:.2}\" y=\"{:.2}\">{label}</text>\n",
            y - 9.0,
            x + 14.0,
            y
        )
        .unwrap();
        x += 14.0 + 7.0 * label.len() as f64 + 18.0;
    }
}
