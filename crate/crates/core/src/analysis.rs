//! Class-frequency drift tables, IM-size statistics and run reports
//! (CSV plus an SVG line chart).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset_io::{read_json, write_json};
use crate::error::{Error, Result};
use crate::raster::ClassMask;

/// Pixel share of every class (and the IM) over a set of masks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTable {
    /// Percentage per class, in class order.
    pub class_pct: Vec<f64>,
    /// Percentage of IM pixels; `None` unless IM-aware.
    pub im_pct: Option<f64>,
    /// Percentage-point difference to a reference, per class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diff: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abs_dev_sum: Option<f64>,
}

/// Frequencies over `masks`. With `im_aware`, labels are IM-shifted: label 0
/// is the IM and label `c + 1` is class `c`.
pub fn class_frequency(masks: &[ClassMask], num_classes: usize, im_aware: bool) -> Result<FrequencyTable> {
    let total: usize = masks.iter().map(ClassMask::len).sum();
    if total == 0 {
        return Err(Error::Empty("no mask pixels to count"));
    }
    let slots = num_classes + im_aware as usize;
    let mut counts = vec![0usize; slots];
    for m in masks {
        for &v in m.data() {
            let v = v as usize;
            if v >= slots {
                return Err(Error::ClassOutOfRange { id: v as u32, classes: slots as u32 });
            }
            counts[v] += 1;
        }
    }
    let pct = |n: usize| 100.0 * n as f64 / total as f64;
    let (im_pct, class_counts) = if im_aware { (Some(pct(counts[0])), &counts[1..]) } else { (None, &counts[..]) };
    Ok(FrequencyTable { class_pct: class_counts.iter().map(|&n| pct(n)).collect(), im_pct, diff: None, abs_dev_sum: None })
}

impl FrequencyTable {
    /// Adds per-class differences to `reference` and their absolute sum.
    pub fn with_reference(mut self, reference: &FrequencyTable) -> Result<Self> {
        if reference.class_pct.len() != self.class_pct.len() {
            return Err(Error::Shape(format!("{} vs {} classes", self.class_pct.len(), reference.class_pct.len())));
        }
        let diff: Vec<f64> = self.class_pct.iter().zip(&reference.class_pct).map(|(a, b)| a - b).collect();
        self.abs_dev_sum = Some(diff.iter().map(|d| d.abs()).sum());
        self.diff = Some(diff);
        Ok(self)
    }

    /// Class and IM percentages rounded to one decimal with largest-remainder
    /// apportionment, so the rounded values still sum to exactly 100.0.
    pub fn rounded_shares(&self) -> Vec<f64> {
        let mut values = self.class_pct.clone();
        values.extend(self.im_pct);
        let tenths: Vec<f64> = values.iter().map(|v| v * 10.0).collect();
        let mut floors: Vec<i64> = tenths.iter().map(|t| t.floor() as i64).collect();
        let target = 1000 - floors.iter().sum::<i64>();
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| (tenths[b] - tenths[b].floor()).total_cmp(&(tenths[a] - tenths[a].floor())).then(a.cmp(&b)));
        for &i in order.iter().take(target.max(0) as usize) {
            floors[i] += 1;
        }
        floors.into_iter().map(|t| t as f64 / 10.0).collect()
    }

    /// One CSV row per class plus an `im` row; diffs and `abs_dev_sum`
    /// when a reference was applied.
    pub fn to_csv(&self, class_names: Option<&[String]>) -> String {
        let rounded = self.rounded_shares();
        let mut out = String::from("class,pct,pct_rounded,diff\n");
        for (c, pct) in self.class_pct.iter().enumerate() {
            let name = class_names.and_then(|n| n.get(c)).cloned().unwrap_or_else(|| c.to_string());
            let diff = self.diff.as_ref().map(|d| d[c].to_string()).unwrap_or_default();
            let _ = writeln!(out, "{name},{pct},{:.1},{diff}", rounded[c]);
        }
        if let Some(im) = self.im_pct {
            let _ = writeln!(out, "im,{im},{:.1},", rounded[self.class_pct.len()]);
        }
        if let Some(s) = self.abs_dev_sum {
            let _ = writeln!(out, "abs_dev_sum,,,{s}");
        }
        out
    }
}

/// IM size of one pseudo-labeled image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImSample {
    pub im_px: usize,
    pub total_px: usize,
    pub accepted: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImSummary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub p10: f64,
    pub p90: f64,
    pub min: f64,
    pub max: f64,
    pub rejection_rate: f64,
}

/// Linear-interpolated percentile of sorted values.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn im_statistics(samples: &[ImSample]) -> Result<ImSummary> {
    if samples.is_empty() {
        return Err(Error::Empty("no IM samples"));
    }
    let mut f: Vec<f64> = samples.iter().map(|s| s.im_px as f64 / s.total_px.max(1) as f64).collect();
    f.sort_by(f64::total_cmp);
    let n = f.len();
    Ok(ImSummary {
        count: n,
        mean: f.iter().sum::<f64>() / n as f64,
        median: percentile(&f, 0.5),
        p10: percentile(&f, 0.1),
        p90: percentile(&f, 0.9),
        min: f[0],
        max: f[n - 1],
        rejection_rate: samples.iter().filter(|s| !s.accepted).count() as f64 / n as f64,
    })
}

/// One point of a metric-vs-generation series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub approach: String,
    pub generation: usize,
    pub metric: String,
    pub value: f64,
    pub stderr: Option<f64>,
}

/// Per-generation summary rows read from a run report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSeries {
    pub approach: String,
    pub metric: String,
    pub values: Vec<(usize, f64)>,
}

/// Groups series by approach; repeated runs of one approach are averaged
/// per generation with the sample standard error.
pub fn aggregate_series(runs: &[RunSeries]) -> Result<Vec<SeriesPoint>> {
    if runs.is_empty() {
        return Err(Error::Empty("no run reports"));
    }
    let mut grouped: BTreeMap<(String, String, usize), Vec<f64>> = BTreeMap::new();
    for r in runs {
        for &(g, v) in &r.values {
            grouped.entry((r.approach.clone(), r.metric.clone(), g)).or_default().push(v);
        }
    }
    Ok(grouped
        .into_iter()
        .map(|((approach, metric, generation), vals)| {
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let stderr = (vals.len() >= 2).then(|| {
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
                (var / n).sqrt()
            });
            SeriesPoint { approach, generation, metric, value: mean, stderr }
        })
        .collect())
}

pub fn series_csv(points: &[SeriesPoint]) -> String {
    let mut out = String::from("approach,generation,metric,value,stderr\n");
    for p in points {
        let se = p.stderr.map(|s| s.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{}", p.approach, p.generation, p.metric, p.value, se);
    }
    out
}

const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Self-contained SVG line chart, one polyline per approach.
pub fn series_svg(points: &[SeriesPoint]) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 70.0, 150.0, 30.0, 50.0);
    let mut by_approach: BTreeMap<&str, Vec<&SeriesPoint>> = BTreeMap::new();
    for p in points {
        by_approach.entry(&p.approach).or_default().push(p);
    }
    let gmin = points.iter().map(|p| p.generation).min().unwrap_or(0) as f64;
    let gmax = points.iter().map(|p| p.generation).max().unwrap_or(1).max(gmin as usize + 1) as f64;
    let mut vmin = points.iter().map(|p| p.value).fold(f64::INFINITY, f64::min);
    let mut vmax = points.iter().map(|p| p.value).fold(f64::NEG_INFINITY, f64::max);
    if !vmin.is_finite() {
        (vmin, vmax) = (0.0, 1.0);
    }
    if vmax - vmin < 1e-9 {
        vmin -= 0.05;
        vmax += 0.05;
    }
    let px = |g: f64| left + (g - gmin) / (gmax - gmin) * (w - left - right);
    let py = |v: f64| top + (vmax - v) / (vmax - vmin) * (h - top - bottom);
    let metric = points.first().map(|p| p.metric.as_str()).unwrap_or("metric");

    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let (x0, x1, y0, y1) = (left, w - right, top, h - bottom);
    let _ = writeln!(s, "<line x1=\"{x0}\" y1=\"{y1}\" x2=\"{x1}\" y2=\"{y1}\" stroke=\"black\"/>");
    let _ = writeln!(s, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>");
    for g in gmin as usize..=gmax as usize {
        let x = px(g as f64);
        let _ = writeln!(s, "<line x1=\"{x:.1}\" y1=\"{y1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"black\"/>", y1 + 4.0);
        let _ = writeln!(s, "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{g}</text>", y1 + 18.0);
    }
    for i in 0..=4 {
        let v = vmin + (vmax - vmin) * i as f64 / 4.0;
        let y = py(v);
        let _ = writeln!(s, "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{x0}\" y2=\"{y:.1}\" stroke=\"black\"/>", x0 - 4.0);
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.3}</text>", x0 - 6.0, y + 4.0);
    }
    let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">Generation</text>", (x0 + x1) / 2.0, h - 10.0);
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{}</text>",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        xml_escape(metric)
    );
    for (i, (approach, pts)) in by_approach.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> = pts.iter().map(|p| format!("{:.1},{:.1}", px(p.generation as f64), py(p.value))).collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>", coords.join(" "));
        for c in &coords {
            let (cx, cy) = c.split_once(',').unwrap_or(("0", "0"));
            let _ = writeln!(s, "<circle cx=\"{cx}\" cy=\"{cy}\" r=\"3\" fill=\"{color}\"/>");
        }
        let ly = top + 16.0 * i as f64;
        let _ = writeln!(s, "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>", x1 + 10.0, x1 + 30.0);
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\">{}</text>", x1 + 35.0, ly + 4.0, xml_escape(approach));
    }
    s.push_str("</svg>\n");
    s
}

/// Reads run reports, writes `series.csv` and `series.svg` into `out_dir`.
pub fn emit_report(series: &[RunSeries], out_dir: &Path) -> Result<Vec<SeriesPoint>> {
    let points = aggregate_series(series)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv = out_dir.join("series.csv");
    std::fs::write(&csv, series_csv(&points)).map_err(|e| Error::io(&csv, e))?;
    let svg = out_dir.join("series.svg");
    std::fs::write(&svg, series_svg(&points)).map_err(|e| Error::io(&svg, e))?;
    write_json(&out_dir.join("series.json"), &points)?;
    Ok(points)
}

/// Loads a frequency table written by [`write_frequency`].
pub fn read_frequency(path: &Path) -> Result<FrequencyTable> {
    read_json(path)
}

pub fn write_frequency(path: &Path, table: &FrequencyTable) -> Result<()> {
    write_json(path, table)
}
