//! CSV tables and self-contained SVG charts.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::analysis::{BinSummary, Metric, RelativeSummary};
use crate::error::{Error, Result};
use crate::mergeability::{LocalityResult, PoolSummary};
use crate::toy::tasks::MergeComparison;

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Pipeline(format!("csv {}: {other:?}", path.display())),
    }
}

/// One header row from the field names, one line per item.
pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_records(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `bin, lower, upper, count, <metric>_mean, <metric>_se, …`
pub fn write_bins_csv(path: impl AsRef<Path>, bins: &[BinSummary]) -> Result<()> {
    let metrics: Vec<Metric> = bins.first().map(|b| b.stats.iter().map(|s| s.metric).collect()).unwrap_or_default();
    let mut header: Vec<String> = ["bin", "lower", "upper", "count"].map(String::from).to_vec();
    for m in &metrics {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_se"));
    }
    let rows: Vec<Vec<String>> = bins
        .iter()
        .map(|b| {
            let mut r = vec![b.bin.clone(), b.lower.to_string(), b.upper.to_string(), b.count.to_string()];
            for s in &b.stats {
                r.push(opt(s.mean));
                r.push(opt(s.se));
            }
            r
        })
        .collect();
    write_records(path.as_ref(), &header, &rows)
}

pub fn write_histogram_csv(path: impl AsRef<Path>, summary: &PoolSummary) -> Result<()> {
    let n = summary.observed.len().saturating_sub(1).max(1);
    let header = ["score", "observed", "expected"].map(String::from).to_vec();
    let rows: Vec<Vec<String>> = summary
        .observed
        .iter()
        .zip(&summary.expected)
        .enumerate()
        .map(|(k, (o, e))| vec![(k as f64 / n as f64).to_string(), o.to_string(), e.to_string()])
        .collect();
    write_records(path.as_ref(), &header, &rows)
}

pub fn write_retention_csv(path: impl AsRef<Path>, cmp: &MergeComparison) -> Result<()> {
    let header = ["algorithm", "task_id", "group", "weight", "base_accuracy", "finetuned_accuracy", "merged_accuracy", "retention"]
        .map(String::from)
        .to_vec();
    let mut rows = Vec::new();
    for (algo, table) in [("mean", &cmp.mean), ("weighted", &cmp.weighted)] {
        for r in table.iter() {
            let weight = if algo == "mean" { 1.0 / table.len() as f64 } else { cmp.weights[&r.task_id] };
            rows.push(vec![
                algo.to_string(),
                r.task_id.clone(),
                format!("{:?}", r.group).to_lowercase(),
                weight.to_string(),
                r.base_accuracy.to_string(),
                r.finetuned_accuracy.to_string(),
                r.merged_accuracy.to_string(),
                r.retention.to_string(),
            ]);
        }
    }
    write_records(path.as_ref(), &header, &rows)
}

const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];
const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Plot area with a categorical x axis and a linear y axis.
struct Frame {
    categories: usize,
    y_min: f64,
    y_max: f64,
    out: String,
}

impl Frame {
    fn new(title: &str, categories: &[String], y_label: &str, y_min: f64, y_max: f64) -> Self {
        let (y_min, y_max) = if y_max - y_min < 1e-12 { (y_min - 0.5, y_max + 0.5) } else { (y_min, y_max) };
        let mut f = Frame { categories: categories.len().max(1), y_min, y_max, out: String::new() };
        let _ = write!(
            f.out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">
<rect width="100%" height="100%" fill="white"/>
<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>
"#,
            LEFT + (WIDTH - LEFT - RIGHT) / 2.0,
            escape(title)
        );
        let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, TOP, HEIGHT - BOTTOM);
        let _ = writeln!(f.out, r#"<line x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}" stroke="black"/>"#);
        let _ = writeln!(f.out, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
        for i in 0..=4 {
            let v = y_min + (y_max - y_min) * i as f64 / 4.0;
            let y = f.y(v);
            let _ = writeln!(f.out, r##"<line x1="{x0}" y1="{y:.1}" x2="{x1}" y2="{y:.1}" stroke="#ddd"/>"##);
            let _ = writeln!(f.out, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, x0 - 6.0, y + 4.0, tick(v));
        }
        for (i, c) in categories.iter().enumerate() {
            let _ = writeln!(f.out, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, f.x(i), y1 + 16.0, escape(c));
        }
        let _ = writeln!(
            f.out,
            r#"<text transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
            (y0 + y1) / 2.0,
            escape(y_label)
        );
        f
    }

    fn band(&self) -> f64 {
        (WIDTH - LEFT - RIGHT) / self.categories as f64
    }

    /// Centre of category `i`.
    fn x(&self, i: usize) -> f64 {
        LEFT + self.band() * (i as f64 + 0.5)
    }

    fn y(&self, v: f64) -> f64 {
        let t = (v - self.y_min) / (self.y_max - self.y_min);
        HEIGHT - BOTTOM - t * (HEIGHT - TOP - BOTTOM)
    }

    fn legend(&mut self, i: usize, name: &str, color: &str) {
        let y = TOP + 8.0 + 18.0 * i as f64;
        let x = WIDTH - RIGHT + 12.0;
        let _ = writeln!(self.out, r#"<rect x="{x}" y="{}" width="12" height="12" fill="{color}"/>"#, y - 9.0);
        let _ = writeln!(self.out, r#"<text x="{}" y="{y}">{}</text>"#, x + 18.0, escape(name));
    }

    fn finish(mut self) -> String {
        self.out.push_str("</svg>\n");
        self.out
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn nice_max(v: f64) -> f64 {
    if v <= 0.0 {
        return 1.0;
    }
    let mag = 10f64.powf(v.log10().floor());
    [1.0, 2.0, 2.5, 5.0, 10.0].iter().map(|m| m * mag).find(|&c| c >= v).unwrap_or(10.0 * mag)
}

/// Observed counts as wide bars, binomial expectation as thin bars.
pub fn histogram_svg(title: &str, summary: &PoolSummary) -> String {
    let n = summary.observed.len().saturating_sub(1).max(1);
    let labels: Vec<String> = (0..summary.observed.len()).map(|k| format!("{:.2}", k as f64 / n as f64)).collect();
    let top = summary
        .observed
        .iter()
        .map(|&o| o as f64)
        .chain(summary.expected.iter().copied())
        .fold(0.0, f64::max);
    let mut f = Frame::new(title, &labels, "updates", 0.0, nice_max(top));
    let base = f.y(0.0);
    for (k, (&o, &e)) in summary.observed.iter().zip(&summary.expected).enumerate() {
        let w = f.band() * 0.7;
        let y = f.y(o as f64);
        let _ = writeln!(f.out, r#"<rect x="{:.1}" y="{y:.1}" width="{w:.1}" height="{:.1}" fill="{}" opacity="0.8"/>"#, f.x(k) - w / 2.0, base - y, PALETTE[0]);
        let w = f.band() * 0.15;
        let y = f.y(e);
        let _ = writeln!(f.out, r#"<rect x="{:.1}" y="{y:.1}" width="{w:.1}" height="{:.1}" fill="{}"/>"#, f.x(k) - w / 2.0, base - y, PALETTE[1]);
    }
    f.legend(0, "observed", PALETTE[0]);
    f.legend(1, &format!("binomial p={:.2}", summary.success_rate), PALETTE[1]);
    f.finish()
}

/// A named line of `(mean, se)` points; `None` leaves a gap.
pub struct Series {
    pub name: String,
    pub points: Vec<Option<(f64, f64)>>,
}

/// Lines with shaded ±SE bands over categorical x positions.
pub fn line_chart_svg(title: &str, categories: &[String], y_label: &str, series: &[Series]) -> String {
    let values = series.iter().flat_map(|s| s.points.iter().flatten()).flat_map(|&(m, e)| [m - e, m + e]).filter(|v| v.is_finite());
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo.min(0.0), hi) } else { (0.0, 1.0) };
    let mut f = Frame::new(title, categories, y_label, lo, hi + 0.05 * (hi - lo).max(1e-9));
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let runs = s.points.iter().enumerate().fold(Vec::<Vec<(usize, f64, f64)>>::new(), |mut acc, (i, p)| {
            match p {
                Some((m, e)) if m.is_finite() => match acc.last_mut() {
                    Some(run) if run.last().is_some_and(|&(j, _, _)| j + 1 == i) => run.push((i, *m, *e)),
                    _ => acc.push(vec![(i, *m, *e)]),
                },
                _ => {}
            }
            acc
        });
        for run in runs {
            let upper: Vec<String> = run.iter().map(|&(i, m, e)| format!("{:.1},{:.1}", f.x(i), f.y(m + e))).collect();
            let lower: Vec<String> = run.iter().rev().map(|&(i, m, e)| format!("{:.1},{:.1}", f.x(i), f.y(m - e))).collect();
            let _ = writeln!(f.out, r#"<polygon points="{} {}" fill="{color}" opacity="0.2"/>"#, upper.join(" "), lower.join(" "));
            let line: Vec<String> = run.iter().map(|&(i, m, _)| format!("{:.1},{:.1}", f.x(i), f.y(m))).collect();
            let _ = writeln!(f.out, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, line.join(" "));
            for &(i, m, _) in &run {
                let _ = writeln!(f.out, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, f.x(i), f.y(m));
            }
        }
        f.legend(si, &s.name, color);
    }
    f.finish()
}

/// Relative change of each metric per score bin, normalized to the first bin.
pub fn relative_change_svg(rel: &RelativeSummary) -> String {
    let categories: Vec<String> = rel.bins.iter().map(|b| b.bin.clone()).collect();
    let metrics: Vec<Metric> = rel.bins.first().map(|b| b.stats.iter().map(|s| s.metric).collect()).unwrap_or_default();
    let series: Vec<Series> = metrics
        .iter()
        .filter(|m| !rel.flagged.contains(m))
        .map(|&m| Series {
            name: m.name().to_string(),
            points: rel
                .bins
                .iter()
                .map(|b| b.stat(m).and_then(|s| Some((s.mean?, s.se.unwrap_or(0.0)))))
                .collect(),
        })
        .collect();
    line_chart_svg("Relative change by mergeability bin", &categories, "relative to S=0 bin", &series)
}

pub fn locality_svg(result: &LocalityResult) -> String {
    let categories: Vec<String> = result.rows.iter().map(|r| r.bin.clone()).collect();
    let series = [
        Series { name: "fixed set".into(), points: result.rows.iter().map(|r| Some((r.fixed_accuracy, r.fixed_se))).collect() },
        Series { name: "partners".into(), points: result.rows.iter().map(|r| Some((r.partner_accuracy, r.partner_se))).collect() },
    ];
    line_chart_svg("Accuracy by partner bin", &categories, "accuracy", &series)
}

/// Grouped bars of merged-over-finetuned retention per task.
pub fn retention_svg(cmp: &MergeComparison) -> String {
    let categories: Vec<String> = cmp.mean.iter().map(|r| format!("{} ({:?})", r.task_id, r.group).to_lowercase()).collect();
    let top = cmp.mean.iter().chain(&cmp.weighted).map(|r| r.retention).fold(1.0, f64::max);
    let mut f = Frame::new(&format!("Retention, mean vs weighted (tau={})", cmp.tau), &categories, "retention", 0.0, top);
    let base = f.y(0.0);
    for (gi, (name, rows)) in [("mean", &cmp.mean), ("weighted", &cmp.weighted)].into_iter().enumerate() {
        let w = f.band() * 0.35;
        for (i, r) in rows.iter().enumerate() {
            let x = f.x(i) - w + gi as f64 * w;
            let y = f.y(r.retention);
            let _ = writeln!(f.out, r#"<rect x="{x:.1}" y="{y:.1}" width="{w:.1}" height="{:.1}" fill="{}"/>"#, base - y, PALETTE[gi]);
        }
        f.legend(gi, name, PALETTE[gi]);
    }
    f.finish()
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{aggregate_bins, relative_to_first_bin, AnalysisRow};
    use crate::mergeability::lattice_edges;

    fn summary() -> PoolSummary {
        PoolSummary {
            merge_spec: "knots".into(),
            trials: 2,
            partners: 3,
            seed: 0,
            partner_distribution: String::new(),
            success_cutoff: 0.5,
            pool_size: 10,
            success_rate: 0.5,
            observed: vec![5, 0, 5],
            expected: vec![2.5, 5.0, 2.5],
            mean_score: 0.5,
            chi_square: None,
        }
    }

    #[test]
    fn histogram_chart_is_well_formed() {
        let svg = histogram_svg("a < b", &summary());
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<rect").count(), 1 + 6 + 2);
        assert!(svg.contains("a &lt; b"));
    }

    #[test]
    fn gaps_split_lines() {
        let s = Series { name: "m".into(), points: vec![Some((1.0, 0.1)), None, Some((2.0, 0.0)), Some((3.0, 0.2))] };
        let cats: Vec<String> = (0..4).map(|i| i.to_string()).collect();
        let svg = line_chart_svg("t", &cats, "y", &[s]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("<circle").count(), 3);
    }

    #[test]
    fn csv_tables() {
        let dir = tempfile::tempdir().unwrap();
        let row = AnalysisRow {
            id: "a".into(),
            score: 0.0,
            delta_base: 0.2,
            delta_trained: 0.5,
            correct_rank: 1,
            base_p_correct: 0.1,
            base_perplexity: 3.0,
            context_length: 4,
            frobenius: 1.0,
            sigma_max: 0.5,
            base_task_accuracy: None,
        };
        let rows = vec![row.clone(), AnalysisRow { score: 1.0, ..row }];
        let p = dir.path().join("rows.csv");
        write_csv(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("id,score,delta_base"));
        assert_eq!(text.lines().count(), 3);

        let bins = aggregate_bins(&rows, &lattice_edges(5), &[Metric::DeltaBase]).unwrap();
        let p = dir.path().join("bins.csv");
        write_bins_csv(&p, &bins).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), "bin,lower,upper,count,delta_base_mean,delta_base_se");
        assert!(text.lines().nth(2).unwrap().ends_with(",0,,"));

        let svg = relative_change_svg(&relative_to_first_bin(&bins).unwrap());
        assert!(svg.contains("delta_base"));

        let p = dir.path().join("hist.csv");
        write_histogram_csv(&p, &summary()).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().nth(2).unwrap(), "0.5,0,5");
    }

    #[test]
    fn unwritable_path_errors() {
        assert!(matches!(write_csv::<u8>("/nonexistent-dir/x.csv", &[]), Err(Error::Io { .. })));
    }
}
