#![allow(clippy::write_with_newline)]

//! Minimal static SVG charts for the experiment outputs. No dependencies,
//! deterministic output bytes.

use std::fmt::Write;

use crate::experiments::{CpuPerPacketRow, LatencyRow, MapRow, Variant};

const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

fn svg_header(width: u32, height: u32, title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"15\">{title}</text>\n",
        width / 2
    )
}

/// Per-packet CPU cost over the rate sweep, one line per variant, log-x.
pub fn cpu_per_packet_svg(rows: &[CpuPerPacketRow]) -> String {
    let (w, h) = (640u32, 420u32);
    let (left, right, top, bottom) = (70.0, 170.0, 40.0, 50.0);
    let plot_w = w as f64 - left - right;
    let plot_h = h as f64 - top - bottom;

    let min_rate = rows.iter().map(|r| r.rate).min().unwrap_or(100) as f64;
    let max_rate = rows.iter().map(|r| r.rate).max().unwrap_or(1_000_000) as f64;
    let max_y = rows
        .iter()
        .map(|r| r.avg_us_per_packet)
        .fold(1.0f64, f64::max)
        * 1.15;

    let x = |rate: f64| left + (rate.log10() - min_rate.log10()) / (max_rate.log10() - min_rate.log10()).max(1e-9) * plot_w;
    let y = |us: f64| top + plot_h - us / max_y * plot_h;

    let mut svg = svg_header(w, h, "CPU time per packet");
    // Axes and gridlines at decade boundaries.
    let _ = write!(
        svg,
        "<line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{}\" stroke=\"black\"/>\n",
        top + plot_h,
        left + plot_w,
        top + plot_h,
        top + plot_h
    );
    let mut decade = min_rate;
    while decade <= max_rate {
        let px = x(decade);
        let _ = write!(
            svg,
            "<line x1=\"{px:.1}\" y1=\"{top}\" x2=\"{px:.1}\" y2=\"{:.1}\" stroke=\"#dddddd\"/>\n\
             <text x=\"{px:.1}\" y=\"{:.1}\" text-anchor=\"middle\">1e{}</text>\n",
            top + plot_h,
            top + plot_h + 18.0,
            decade.log10().round() as i32
        );
        decade *= 10.0;
    }
    for tick in 0..=4 {
        let us = max_y * tick as f64 / 4.0;
        let py = y(us);
        let _ = write!(
            svg,
            "<text x=\"{:.1}\" y=\"{py:.1}\" text-anchor=\"end\">{us:.1}</text>\n",
            left - 8.0
        );
    }
    let _ = write!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">packet rate (pkt/s)</text>\n\
         <text x=\"18\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.1})\">us per packet</text>\n",
        left + plot_w / 2.0,
        h as f64 - 10.0,
        top + plot_h / 2.0,
        top + plot_h / 2.0
    );

    for (vi, variant) in Variant::ALL.iter().enumerate() {
        let mut points: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.variant == *variant)
            .map(|r| (x(r.rate as f64), y(r.avg_us_per_packet)))
            .collect();
        if points.is_empty() {
            continue;
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let path: Vec<String> = points.iter().map(|(px, py)| format!("{px:.1},{py:.1}")).collect();
        let color = COLORS[vi % COLORS.len()];
        let _ = write!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            path.join(" ")
        );
        for (px, py) in &points {
            let _ = write!(svg, "<circle cx=\"{px:.1}\" cy=\"{py:.1}\" r=\"3\" fill=\"{color}\"/>\n");
        }
        let ly = top + 14.0 * vi as f64;
        let _ = write!(
            svg,
            "<rect x=\"{:.1}\" y=\"{ly:.1}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
            w as f64 - right + 10.0,
            w as f64 - right + 25.0,
            ly + 9.0,
            variant.label()
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Percentile markers per ISR path.
pub fn latency_dist_svg(rows: &[LatencyRow]) -> String {
    let (w, h) = (640u32, 80 + rows.len() as u32 * 48);
    let (left, right) = (170.0, 40.0);
    let plot_w = w as f64 - left - right;
    let max_us = rows
        .iter()
        .flat_map(|r| r.percentiles.iter())
        .fold(1.0f64, |a, b| a.max(*b))
        * 1.1;
    let x = |us: f64| left + us / max_us * plot_w;

    let mut svg = svg_header(w, h, "ISR latency percentiles per execution path");
    for (i, row) in rows.iter().enumerate() {
        let cy = 60.0 + i as f64 * 48.0;
        let _ = write!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{} (n={})</text>\n\
             <line x1=\"{:.1}\" y1=\"{cy:.1}\" x2=\"{:.1}\" y2=\"{cy:.1}\" stroke=\"#888888\"/>\n",
            left - 10.0,
            cy + 4.0,
            row.path.label(),
            row.samples,
            x(row.percentiles[0]),
            x(row.percentiles[4]),
        );
        for (pi, us) in row.percentiles.iter().enumerate() {
            let px = x(*us);
            let _ = write!(
                svg,
                "<line x1=\"{px:.1}\" y1=\"{:.1}\" x2=\"{px:.1}\" y2=\"{:.1}\" \
                 stroke=\"{}\" stroke-width=\"2\"/>\n",
                cy - 12.0,
                cy + 12.0,
                COLORS[pi % COLORS.len()]
            );
        }
    }
    let labels = ["p0", "p90", "p99", "p99.9", "p99.99"];
    for (pi, label) in labels.iter().enumerate() {
        let _ = write!(
            svg,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\">{label}</text>\n",
            left + pi as f64 * 90.0,
            h as f64 - 24.0,
            COLORS[pi % COLORS.len()],
            left + pi as f64 * 90.0 + 14.0,
            h as f64 - 15.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn heat_color(v: f64) -> String {
    // White -> blue ramp.
    let v = v.clamp(0.0, 1.0);
    let r = (255.0 - 200.0 * v) as u8;
    let g = (255.0 - 160.0 * v) as u8;
    format!("#{r:02x}{g:02x}ff")
}

/// Four heat panels: utilization and HP liveness for each system.
pub fn mitigation_map_svg(rows: &[MapRow]) -> String {
    let mut hp_rates: Vec<u64> = rows.iter().map(|r| r.hp_rate).collect();
    let mut lp_rates: Vec<u64> = rows.iter().map(|r| r.lp_rate).collect();
    hp_rates.sort_unstable();
    hp_rates.dedup();
    lp_rates.sort_unstable();
    lp_rates.dedup();

    let cell = 16.0;
    let panel_w = lp_rates.len() as f64 * cell;
    let panel_h = hp_rates.len() as f64 * cell;
    let (margin_x, margin_y, gap) = (120.0, 60.0, 60.0);
    let w = (margin_x + panel_w * 2.0 + gap + 40.0) as u32;
    let h = (margin_y + panel_h * 2.0 + gap + 60.0) as u32;

    let max_util = rows.iter().map(|r| r.cpu_util).fold(1e-9f64, f64::max);

    let mut svg = svg_header(w, h, "CPU utilization and HP flow liveness");
    let panels = [
        ("modified", false, "utilization"),
        ("modified", true, "hp liveness"),
        ("baseline", false, "utilization"),
        ("baseline", true, "hp liveness"),
    ];
    for (pi, (system, liveness, label)) in panels.iter().enumerate() {
        let px0 = margin_x + (pi % 2) as f64 * (panel_w + gap);
        let py0 = margin_y + (pi / 2) as f64 * (panel_h + gap);
        let _ = write!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\">{system}: {label}</text>\n",
            px0,
            py0 - 8.0
        );
        for row in rows.iter().filter(|r| r.system == *system) {
            let xi = lp_rates.iter().position(|r| *r == row.lp_rate).unwrap();
            let yi = hp_rates.iter().position(|r| *r == row.hp_rate).unwrap();
            let value = if *liveness {
                row.hp_liveness
            } else {
                row.cpu_util / max_util
            };
            let _ = write!(
                svg,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{cell}\" height=\"{cell}\" \
                 fill=\"{}\" stroke=\"#eeeeee\"/>\n",
                px0 + xi as f64 * cell,
                py0 + panel_h - (yi + 1) as f64 * cell,
                heat_color(value)
            );
        }
        let _ = write!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\">lp {} .. {} pkt/s</text>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"end\">hp {} .. {}</text>\n",
            px0,
            py0 + panel_h + 14.0,
            lp_rates.first().unwrap(),
            lp_rates.last().unwrap(),
            px0 - 6.0,
            py0 + panel_h / 2.0,
            hp_rates.first().unwrap(),
            hp_rates.last().unwrap()
        );
    }
    svg.push_str("</svg>\n");
    svg
}
