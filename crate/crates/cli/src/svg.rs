//! Static vector rendering of energy landscapes.

use std::fmt::Write as _;

use dsebm::landscape::Landscape;

const W: f64 = 480.0;
const H: f64 = 220.0;
const PAD: f64 = 40.0;

fn bounds(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, lo + 0.5)
    }
}

fn panel(out: &mut String, top: f64, title: &str, xs: &[f64], ys: &[f64], threshold: Option<f64>) {
    let (x0, x1) = bounds(xs);
    let mut all = ys.to_vec();
    all.extend(threshold);
    let (y0, y1) = bounds(&all);
    let px = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let py = |y: f64| top + H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    writeln!(
        out,
        r##"<rect x="{PAD}" y="{}" width="{}" height="{}" fill="none" stroke="#888"/>"##,
        top + PAD,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    )
    .unwrap();
    writeln!(out, r#"<text x="{PAD}" y="{}" font-size="13">{title}</text>"#, top + PAD - 8.0).unwrap();
    let pts: Vec<String> = xs.iter().zip(ys).map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
    writeln!(out, r##"<polyline fill="none" stroke="#1f5fa8" stroke-width="1.5" points="{}"/>"##, pts.join(" ")).unwrap();
    if let Some(t) = threshold {
        writeln!(
            out,
            r##"<line x1="{PAD}" x2="{}" y1="{y:.2}" y2="{y:.2}" stroke="#c0392b" stroke-dasharray="5,4"/><text x="{}" y="{:.2}" font-size="11" fill="#c0392b">threshold {t:.4}</text>"##,
            W - PAD,
            W - PAD - 110.0,
            py(t) - 4.0,
            y = py(t)
        )
        .unwrap();
    }
    for (x, anchor) in [(x0, "start"), (x1, "end")] {
        writeln!(
            out,
            r#"<text x="{:.2}" y="{}" font-size="11" text-anchor="{anchor}">{x}</text>"#,
            px(x),
            top + H - PAD + 14.0
        )
        .unwrap();
    }
}

fn color(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let r = (255.0 * t) as u8;
    let b = (255.0 * (1.0 - t)) as u8;
    format!("rgb({r},{},{b})", (120.0 * (1.0 - (2.0 * t - 1.0).abs())) as u8)
}

fn heatmap(out: &mut String, left: f64, title: &str, land: &Landscape, values: &[f64], threshold: Option<f64>) {
    let (n0, n1) = (land.axes[0].len(), land.axes[1].len());
    let size = W - 2.0 * PAD;
    let (cw, ch) = (size / n0 as f64, size / n1 as f64);
    let (lo, hi) = bounds(values);
    writeln!(out, r#"<text x="{}" y="{}" font-size="13">{title}</text>"#, left + PAD, PAD - 8.0).unwrap();
    for i in 0..n0 {
        for j in 0..n1 {
            let v = values[i * n1 + j];
            let (x, y) = (left + PAD + i as f64 * cw, PAD + size - (j + 1) as f64 * ch);
            writeln!(
                out,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                cw + 0.3,
                ch + 0.3,
                color((v - lo) / (hi - lo))
            )
            .unwrap();
            if threshold.is_some_and(|t| v > t) {
                writeln!(
                    out,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="{:.2}" fill="white" fill-opacity="0.6"/>"#,
                    x + cw / 2.0,
                    y + ch / 2.0,
                    (cw.min(ch) / 5.0).max(0.5)
                )
                .unwrap();
            }
        }
    }
}

/// One panel per score for 1-D grids, one heatmap per score for 2-D grids;
/// 2-D cells above a threshold carry a white dot.
pub fn render(land: &Landscape, thresholds: (Option<f64>, Option<f64>), comment: &str) -> String {
    let mut out = String::new();
    let (width, height) = if land.dims() == 1 { (W, 2.0 * H) } else { (2.0 * W, W) };
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    )
    .unwrap();
    writeln!(out, "<!--\n{}-->", comment.replace("--", "- -")).unwrap();
    writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    if land.dims() == 1 {
        let xs: Vec<f64> = land.points.iter().map(|p| p.coords[0]).collect();
        panel(&mut out, 0.0, "energy E(x)", &xs, &land.energies(), thresholds.0);
        panel(&mut out, H, "reconstruction error", &xs, &land.recon_errors(), thresholds.1);
    } else {
        heatmap(&mut out, 0.0, "energy E(x)", land, &land.energies(), thresholds.0);
        heatmap(&mut out, W, "reconstruction error", land, &land.recon_errors(), thresholds.1);
    }
    out.push_str("</svg>\n");
    out
}
