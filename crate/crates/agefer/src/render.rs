//! Deterministic rendering of run artifacts: heatmap images with a
//! viridis-style colormap, expression-by-age-group panels, SVG bar charts
//! and confusion matrices, and small HTML helpers.
//!
//! Everything here is a pure function of its inputs (fixed float
//! formatting, no timestamps), so re-rendering the same artifacts yields
//! byte-identical files.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::manifest::{AgeGroup, Expression};

/// Ten evenly spaced viridis anchor colors, linearly interpolated.
const VIRIDIS: [[u8; 3]; 10] = [
    [68, 1, 84],
    [72, 40, 120],
    [62, 74, 137],
    [49, 104, 142],
    [38, 130, 142],
    [31, 158, 137],
    [53, 183, 121],
    [109, 205, 89],
    [180, 222, 44],
    [253, 231, 37],
];

/// Map t in [0, 1] (clamped) to an RGB color.
pub fn viridis(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let pos = t * (VIRIDIS.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(VIRIDIS.len() - 1);
    let f = pos - lo as f64;
    let mut out = [0u8; 3];
    for ch in 0..3 {
        let a = VIRIDIS[lo][ch] as f64;
        let b = VIRIDIS[hi][ch] as f64;
        out[ch] = (a + (b - a) * f).round() as u8;
    }
    out
}

/// Render a [0, 1] grid through the colormap, one pixel per cell.
pub fn heat_image(grid: &Array2<f64>) -> RgbImage {
    let (h, w) = grid.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for ((r, c), &v) in grid.indexed_iter() {
        img.put_pixel(c as u32, r as u32, Rgb(viridis(v)));
    }
    img
}

/// PNG-encode in memory; identical pixels yield identical bytes.
pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut bytes = Cursor::new(Vec::new());
    img.write_to(&mut bytes, ImageFormat::Png)?;
    Ok(bytes.into_inner())
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    let bytes = encode_png(img)?;
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

const PANEL_GUTTER: usize = 4;
const PANEL_MISSING: Rgb<u8> = Rgb([96, 96, 96]);
const PANEL_BG: Rgb<u8> = Rgb([255, 255, 255]);

/// Assemble per-(expression, age group) display grids into one panel image:
/// one row per expression (in `Expression::ALL` order), one column per age
/// group, white gutters, grey tiles for missing cells. All grids must be
/// square and same-sized.
pub fn heatmap_panel(cells: &BTreeMap<(Expression, AgeGroup), Array2<f64>>) -> Result<RgbImage> {
    let tile = cells
        .values()
        .next()
        .map(|g| g.dim().0)
        .ok_or(Error::EmptyAggregation)?;
    for grid in cells.values() {
        if grid.dim() != (tile, tile) {
            return Err(Error::GridShapeMismatch {
                expected: (tile, tile),
                got: grid.dim(),
            });
        }
    }
    let cols = AgeGroup::ALL.len();
    let rows = Expression::ALL.len();
    let width = cols * tile + (cols + 1) * PANEL_GUTTER;
    let height = rows * tile + (rows + 1) * PANEL_GUTTER;
    let mut img = RgbImage::from_pixel(width as u32, height as u32, PANEL_BG);
    for (ri, &expression) in Expression::ALL.iter().enumerate() {
        for (ci, &group) in AgeGroup::ALL.iter().enumerate() {
            let x0 = PANEL_GUTTER + ci * (tile + PANEL_GUTTER);
            let y0 = PANEL_GUTTER + ri * (tile + PANEL_GUTTER);
            match cells.get(&(expression, group)) {
                Some(grid) => {
                    for ((r, c), &v) in grid.indexed_iter() {
                        img.put_pixel((x0 + c) as u32, (y0 + r) as u32, Rgb(viridis(v)));
                    }
                }
                None => {
                    for r in 0..tile {
                        for c in 0..tile {
                            img.put_pixel((x0 + c) as u32, (y0 + r) as u32, PANEL_MISSING);
                        }
                    }
                }
            }
        }
    }
    Ok(img)
}

pub fn html_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(ch),
        }
    }
    out
}

fn fmt(v: f64) -> String {
    format!("{v:.4}")
}

/// Grouped bar chart: one cluster per entry of `group_labels`, one bar per
/// series within each cluster. `values[s][g]` is series `s` at group `g`.
pub struct BarChart {
    pub title: String,
    pub group_labels: Vec<String>,
    pub series_labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
    /// Top of the y axis; values are clamped into [0, y_max].
    pub y_max: f64,
}

pub fn bar_chart_svg(chart: &BarChart) -> Result<String> {
    if chart.group_labels.is_empty()
        || chart.series_labels.is_empty()
        || chart.values.len() != chart.series_labels.len()
        || chart.values.iter().any(|row| row.len() != chart.group_labels.len())
        || !(chart.y_max > 0.0)
    {
        return Err(Error::ReportStructureMismatch(format!(
            "bar chart needs values shaped (series={}, groups={}) and a positive y_max",
            chart.series_labels.len(),
            chart.group_labels.len()
        )));
    }
    let n_groups = chart.group_labels.len();
    let n_series = chart.series_labels.len();
    let bar_w = 22.0;
    let bar_gap = 4.0;
    let cluster_w = n_series as f64 * bar_w + (n_series - 1) as f64 * bar_gap;
    let cluster_gap = 30.0;
    let (left, right, top, bottom) = (52.0, 16.0, 34.0, 46.0);
    let plot_h = 220.0;
    let plot_w = n_groups as f64 * cluster_w + (n_groups + 1) as f64 * cluster_gap;
    let width = left + plot_w + right;
    let height = top + plot_h + bottom;
    let legend_h = 16.0 * n_series as f64;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" \
         font-family=\"sans-serif\" font-size=\"11\">\n",
        fmt(width),
        fmt(height + legend_h)
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
        fmt(width / 2.0),
        html_escape(&chart.title)
    ));
    // Axis and horizontal gridlines every quarter.
    for i in 0..=4 {
        let frac = i as f64 / 4.0;
        let y = top + plot_h * (1.0 - frac);
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#ccc\" stroke-width=\"1\"/>\n",
            fmt(left),
            fmt(y),
            fmt(left + plot_w),
            fmt(y)
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            fmt(left - 6.0),
            fmt(y + 4.0),
            fmt(chart.y_max * frac)
        ));
    }
    for (g, label) in chart.group_labels.iter().enumerate() {
        let cluster_x = left + cluster_gap + g as f64 * (cluster_w + cluster_gap);
        for (s, series) in chart.values.iter().enumerate() {
            let v = series[g].clamp(0.0, chart.y_max);
            let h = plot_h * v / chart.y_max;
            let x = cluster_x + s as f64 * (bar_w + bar_gap);
            let [r, gc, b] = series_color(s, n_series);
            svg.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"rgb({r},{gc},{b})\"/>\n",
                fmt(x),
                fmt(top + plot_h - h),
                fmt(bar_w),
                fmt(h)
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            fmt(cluster_x + cluster_w / 2.0),
            fmt(top + plot_h + 18.0),
            html_escape(label)
        ));
    }
    for (s, label) in chart.series_labels.iter().enumerate() {
        let y = height + 4.0 + s as f64 * 16.0;
        let [r, gc, b] = series_color(s, n_series);
        svg.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"12\" height=\"12\" fill=\"rgb({r},{gc},{b})\"/>\n",
            fmt(left),
            fmt(y)
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\">{}</text>\n",
            fmt(left + 18.0),
            fmt(y + 10.0),
            html_escape(label)
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn series_color(index: usize, n_series: usize) -> [u8; 3] {
    if n_series <= 1 {
        return viridis(0.3);
    }
    viridis(0.1 + 0.75 * index as f64 / (n_series - 1) as f64)
}

/// Row-normalized confusion matrix as an annotated SVG grid; `matrix` is
/// square with rows = true class, columns = predicted class.
pub fn confusion_matrix_svg(title: &str, labels: &[String], matrix: &Array2<f64>) -> Result<String> {
    let n = labels.len();
    if matrix.dim() != (n, n) || n == 0 {
        return Err(Error::GridShapeMismatch {
            expected: (n, n),
            got: matrix.dim(),
        });
    }
    let cell = 46.0;
    let (left, top) = (96.0, 64.0);
    let width = left + n as f64 * cell + 16.0;
    let height = top + n as f64 * cell + 16.0;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" \
         font-family=\"sans-serif\" font-size=\"10\">\n",
        fmt(width),
        fmt(height)
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"16\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
        fmt(width / 2.0),
        html_escape(title)
    ));
    for (i, label) in labels.iter().enumerate() {
        // Column headers (predicted class), slanted to fit.
        let x = left + (i as f64 + 0.5) * cell;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"start\" transform=\"rotate(-40 {} {})\">{}</text>\n",
            fmt(x),
            fmt(top - 8.0),
            fmt(x),
            fmt(top - 8.0),
            html_escape(label)
        ));
        // Row headers (true class).
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            fmt(left - 8.0),
            fmt(top + (i as f64 + 0.5) * cell + 4.0),
            html_escape(label)
        ));
    }
    for ((r, c), &v) in matrix.indexed_iter() {
        let x = left + c as f64 * cell;
        let y = top + r as f64 * cell;
        let [cr, cg, cb] = viridis(v);
        svg.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"rgb({cr},{cg},{cb})\" \
             stroke=\"#fff\" stroke-width=\"1\"/>\n",
            fmt(x),
            fmt(y),
            fmt(cell),
            fmt(cell)
        ));
        // Keep annotations readable on both dark (low) and bright (high)
        // viridis cells.
        let text_fill = if v < 0.6 { "#fff" } else { "#000" };
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"{text_fill}\">{:.2}</text>\n",
            fmt(x + cell / 2.0),
            fmt(y + cell / 2.0 + 4.0),
            v
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Fixed-skeleton HTML document wrapping pre-rendered body sections.
pub fn html_document(title: &str, sections: &[String]) -> String {
    let mut doc = String::new();
    doc.push_str("<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n");
    doc.push_str(&format!("<title>{}</title>\n", html_escape(title)));
    doc.push_str(
        "<style>\nbody { font-family: sans-serif; margin: 2rem; color: #222; }\n\
         h1, h2, h3 { font-weight: 600; }\n\
         table { border-collapse: collapse; margin: 1rem 0; }\n\
         th, td { border: 1px solid #bbb; padding: 4px 10px; text-align: right; }\n\
         th:first-child, td:first-child { text-align: left; }\n\
         figure { margin: 1rem 0; }\n\
         </style>\n</head>\n<body>\n",
    );
    doc.push_str(&format!("<h1>{}</h1>\n", html_escape(title)));
    for section in sections {
        doc.push_str(section);
        doc.push('\n');
    }
    doc.push_str("</body>\n</html>\n");
    doc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn viridis_hits_anchor_colors() {
        assert_eq!(viridis(0.0), [68, 1, 84]);
        assert_eq!(viridis(1.0), [253, 231, 37]);
        assert_eq!(viridis(-3.0), [68, 1, 84]);
        assert_eq!(viridis(7.0), [253, 231, 37]);
        // t = 1/3 lands exactly on anchor index 3.
        assert_eq!(viridis(1.0 / 3.0), [49, 104, 142]);
        // Halfway between anchors 4 and 5.
        assert_eq!(viridis(0.5), [35, 144, 140]);
    }

    #[test]
    fn heat_image_maps_cells_through_the_colormap() {
        let grid = Array2::from_shape_vec((2, 2), vec![0.0, 1.0, 1.0 / 3.0, 2.0]).unwrap();
        let img = heat_image(&grid);
        assert_eq!(img.dimensions(), (2, 2));
        assert_eq!(img.get_pixel(0, 0).0, [68, 1, 84]);
        assert_eq!(img.get_pixel(1, 0).0, [253, 231, 37]);
        assert_eq!(img.get_pixel(0, 1).0, [49, 104, 142]);
        assert_eq!(img.get_pixel(1, 1).0, [253, 231, 37]);
    }

    #[test]
    fn png_encoding_is_deterministic() {
        let grid = Array2::from_shape_fn((9, 7), |(r, c)| ((r * 7 + c) as f64) / 62.0);
        let a = encode_png(&heat_image(&grid)).unwrap();
        let b = encode_png(&heat_image(&grid)).unwrap();
        assert_eq!(a, b);
        assert!(a.starts_with(&[0x89, b'P', b'N', b'G']));
    }

    #[test]
    fn panel_lays_out_expressions_by_rows_and_groups_by_columns() {
        let mut cells = BTreeMap::new();
        for &e in &Expression::ALL {
            for &g in &AgeGroup::ALL {
                if (e, g) == (Expression::Sadness, AgeGroup::Elderly) {
                    continue; // leave one missing cell
                }
                cells.insert((e, g), Array2::from_elem((8, 8), 1.0));
            }
        }
        let img = heatmap_panel(&cells).unwrap();
        let gutter = PANEL_GUTTER as u32;
        assert_eq!(img.dimensions(), (3 * 8 + 4 * gutter, 7 * 8 + 8 * gutter));
        // Gutter pixel is white; a present tile is bright viridis.
        assert_eq!(img.get_pixel(0, 0).0, [255, 255, 255]);
        assert_eq!(img.get_pixel(gutter, gutter).0, [253, 231, 37]);
        // Sadness row index 2, elderly column index 2 is the grey tile.
        let x = gutter + 2 * (8 + gutter);
        let y = gutter + 2 * (8 + gutter);
        assert_eq!(img.get_pixel(x, y).0, [96, 96, 96]);
    }

    #[test]
    fn panel_rejects_mismatched_tiles_and_empty_input() {
        let mut cells = BTreeMap::new();
        cells.insert((Expression::Neutral, AgeGroup::Adults), Array2::zeros((8, 8)));
        cells.insert((Expression::Anger, AgeGroup::Adults), Array2::zeros((9, 9)));
        assert!(matches!(
            heatmap_panel(&cells),
            Err(Error::GridShapeMismatch { .. })
        ));
        assert!(matches!(
            heatmap_panel(&BTreeMap::new()),
            Err(Error::EmptyAggregation)
        ));
    }

    #[test]
    fn bar_chart_draws_one_rect_per_bar_with_scaled_height() {
        let chart = BarChart {
            title: "macro F1 <by> group".into(),
            group_labels: vec!["children".into(), "adults".into(), "elderly".into()],
            series_labels: vec!["baseline".into(), "age_weighted".into()],
            values: vec![vec![0.5, 0.75, 1.0], vec![0.25, 0.5, 0.75]],
            y_max: 1.0,
        };
        let svg = bar_chart_svg(&chart).unwrap();
        // 6 bars plus 2 legend swatches.
        assert_eq!(svg.matches("<rect").count(), 8);
        // A bar at exactly half of y_max is half the 220-px plot height.
        assert!(svg.contains("height=\"110.0000\""));
        assert!(svg.contains("height=\"220.0000\""));
        assert!(svg.contains("height=\"55.0000\""));
        assert!(svg.contains("macro F1 &lt;by&gt; group"));
        assert_eq!(bar_chart_svg(&chart).unwrap(), svg);
    }

    #[test]
    fn bar_chart_validates_shape() {
        let chart = BarChart {
            title: "t".into(),
            group_labels: vec!["a".into()],
            series_labels: vec!["s".into()],
            values: vec![vec![0.1, 0.2]],
            y_max: 1.0,
        };
        assert!(matches!(
            bar_chart_svg(&chart),
            Err(Error::ReportStructureMismatch(_))
        ));
    }

    #[test]
    fn confusion_svg_has_one_cell_per_entry() {
        let labels = vec!["neutral".to_string(), "happiness".to_string()];
        let matrix = Array2::from_shape_vec((2, 2), vec![0.9, 0.1, 0.3, 0.7]).unwrap();
        let svg = confusion_matrix_svg("baseline / adults", &labels, &matrix).unwrap();
        assert_eq!(svg.matches("<rect").count(), 4);
        assert!(svg.contains(">0.90<"));
        assert!(svg.contains(">0.30<"));
        let bad = Array2::zeros((3, 3));
        assert!(matches!(
            confusion_matrix_svg("x", &labels, &bad),
            Err(Error::GridShapeMismatch { .. })
        ));
    }

    #[test]
    fn html_document_escapes_and_wraps() {
        let doc = html_document("a <b> & c", &["<p>section</p>".to_string()]);
        assert!(doc.contains("<title>a &lt;b&gt; &amp; c</title>"));
        assert!(doc.contains("<p>section</p>"));
        assert!(doc.starts_with("<!DOCTYPE html>"));
        assert!(doc.ends_with("</html>\n"));
    }
}
