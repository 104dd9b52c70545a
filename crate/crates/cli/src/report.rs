//! Markdown tables (methods x NFE) and SVG line plots from a sweep CSV.

use std::fmt::Write as _;

use anyhow::{bail, Context};

use crate::sweep::CsvTable;

struct Grid<'a> {
    methods: Vec<&'a str>,
    nfes: Vec<usize>,
    /// `cells[m][k]` is the verbatim value for `methods[m]` at `nfes[k]`.
    cells: Vec<Vec<&'a str>>,
}

fn grid<'a>(table: &'a CsvTable, metric: &str) -> anyhow::Result<Grid<'a>> {
    let mc = table.column("method").context("method column")?;
    let nc = table.column("nfe").context("nfe column")?;
    let vc = table
        .column(metric)
        .with_context(|| format!("CSV has no {metric:?} column"))?;
    let mut methods: Vec<&str> = Vec::new();
    let mut nfes: Vec<usize> = Vec::new();
    for row in &table.rows {
        if !methods.contains(&row[mc].as_str()) {
            methods.push(&row[mc]);
        }
        let n: usize = row[nc].parse().context("nfe")?;
        if !nfes.contains(&n) {
            nfes.push(n);
        }
    }
    nfes.sort_unstable();
    let mut cells = vec![vec![""; nfes.len()]; methods.len()];
    for (i, row) in table.rows.iter().enumerate() {
        let m = methods.iter().position(|&x| x == row[mc]).expect("collected above");
        let k = nfes.binary_search(&row[nc].parse().expect("parsed above")).expect("collected above");
        if !cells[m][k].is_empty() {
            bail!("CSV row {} repeats method {} at nfe {}", i + 1, row[mc], row[nc]);
        }
        cells[m][k] = &row[vc];
    }
    Ok(Grid { methods, nfes, cells })
}

/// Methods as rows, NFE as columns; blank cells stay empty.
pub fn markdown_table(table: &CsvTable, metric: &str) -> anyhow::Result<String> {
    let g = grid(table, metric)?;
    let mut out = String::new();
    write!(out, "| method |")?;
    for n in &g.nfes {
        write!(out, " {n} |")?;
    }
    writeln!(out)?;
    write!(out, "|---|")?;
    for _ in &g.nfes {
        write!(out, "---|")?;
    }
    writeln!(out)?;
    for (m, row) in g.methods.iter().zip(&g.cells) {
        write!(out, "| {m} |")?;
        for v in row {
            if v.is_empty() {
                write!(out, " |")?;
            } else {
                write!(out, " {v} |")?;
            }
        }
        writeln!(out)?;
    }
    Ok(out)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
        .replace('\'', "&apos;")
}

const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

/// Metric against NFE (log x axis), one polyline per method. With
/// `log_y`, non-positive values are left out of the plot.
pub fn svg_plot(table: &CsvTable, metric: &str, log_y: bool) -> anyhow::Result<String> {
    let g = grid(table, metric)?;
    let (w, h) = (720.0, 440.0);
    let (left, right, top, bottom) = (70.0, 160.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;

    let ty = |v: f64| if log_y { v.log10() } else { v };
    let mut values = Vec::new();
    for row in &g.cells {
        for v in row {
            if let Ok(x) = v.parse::<f64>() {
                if x.is_finite() && (!log_y || x > 0.0) {
                    values.push(ty(x));
                }
            }
        }
    }
    let (mut y0, mut y1) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !y0.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let x0 = (*g.nfes.first().unwrap_or(&1) as f64).log10();
    let mut x1 = (*g.nfes.last().unwrap_or(&1) as f64).log10();
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    let px = |n: usize| left + ((n as f64).log10() - x0) / (x1 - x0) * pw;
    let py = |v: f64| top + (1.0 - (v - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#)?;
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#)?;
    writeln!(s, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#)?;
    writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{} vs NFE</text>"#,
        left + pw / 2.0,
        xml_escape(metric)
    )?;
    writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    )?;
    for &n in &g.nfes {
        let x = px(n);
        writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" font-family="sans-serif" font-size="10" text-anchor="middle">{n}</text>"#,
            top + ph + 15.0
        )?;
    }
    for k in 0..=4 {
        let v = y0 + (y1 - y0) * k as f64 / 4.0;
        let label = if log_y { 10f64.powf(v) } else { v };
        writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="10" text-anchor="end">{label:.3}</text>"#,
            left - 6.0,
            py(v) + 3.0
        )?;
    }
    writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle">NFE</text>"#,
        left + pw / 2.0,
        h - 12.0
    )?;
    for (i, (m, row)) in g.methods.iter().zip(&g.cells).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = g
            .nfes
            .iter()
            .zip(row)
            .filter_map(|(&n, v)| {
                let x = v.parse::<f64>().ok()?;
                (x.is_finite() && (!log_y || x > 0.0)).then(|| format!("{:.2},{:.2}", px(n), py(ty(x))))
            })
            .collect();
        writeln!(
            s,
            r#"<polyline data-method="{}" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            xml_escape(m),
            pts.join(" ")
        )?;
        let ly = top + 14.0 + 18.0 * i as f64;
        writeln!(
            s,
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
            left + pw + 12.0,
            left + pw + 32.0
        )?;
        writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11">{}</text>"#,
            left + pw + 38.0,
            ly + 4.0,
            xml_escape(m)
        )?;
    }
    writeln!(s, "</svg>")?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sweep::read_csv;

    const TWO_BY_TWO: &str = "method,nfe,frechet\nflow,1,4.125\nflow,10,0.0625\nddpm_ddim,1,87.76\nddpm_ddim,10,2.08\n";

    #[test]
    fn markdown_keeps_values_verbatim() {
        let t = read_csv(TWO_BY_TWO.as_bytes()).unwrap();
        let md = markdown_table(&t, "frechet").unwrap();
        for v in ["4.125", "0.0625", "87.76", "2.08"] {
            assert!(md.contains(v), "{md}");
        }
        assert!(md.starts_with("| method | 1 | 10 |"));
    }

    #[test]
    fn blank_cells_render_empty() {
        let text = "method,nfe,frechet\nbespoke,4,\nbespoke,5,0.3\n";
        let md = markdown_table(&read_csv(text.as_bytes()).unwrap(), "frechet").unwrap();
        assert!(md.contains("| bespoke | | 0.3 |"), "{md}");
    }

    #[test]
    fn svg_is_well_formed_with_one_polyline_per_method() {
        let t = read_csv(TWO_BY_TWO.as_bytes()).unwrap();
        for log_y in [false, true] {
            let svg = svg_plot(&t, "frechet", log_y).unwrap();
            let doc = roxmltree::Document::parse(&svg).unwrap();
            let lines: Vec<_> = doc.descendants().filter(|n| n.has_tag_name("polyline")).collect();
            assert_eq!(lines.len(), 2);
            assert_eq!(lines[0].attribute("data-method"), Some("flow"));
        }
    }

    #[test]
    fn unknown_metric_and_duplicates_rejected() {
        let t = read_csv(TWO_BY_TWO.as_bytes()).unwrap();
        assert!(markdown_table(&t, "fid").is_err());
        let dup = read_csv("method,nfe,frechet\nflow,1,1\nflow,1,2\n".as_bytes()).unwrap();
        assert!(markdown_table(&dup, "frechet").unwrap_err().to_string().contains("row 2"));
    }
}
