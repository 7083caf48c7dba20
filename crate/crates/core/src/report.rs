//! Machine-readable reports and rate-distortion tables.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{bd_metrics, chamfer_distance, d1_psnr, default_peak, PointCloud, RdPoint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionReport {
    pub input: String,
    pub output: String,
    pub input_points: usize,
    /// `8·(payload_bytes + header_bytes) / input_points`.
    pub bpp: f64,
    pub header_bytes: usize,
    /// Every byte after the header, the trailing CRC included.
    pub payload_bytes: usize,
    pub z_bytes: usize,
    pub coord_bytes: usize,
    pub y_bytes: usize,
    pub n_sparse: usize,
    pub ddim_steps: usize,
    pub seed: u64,
    pub enc_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecompressReport {
    pub input: String,
    pub output: String,
    pub points: usize,
    pub ddim_steps: usize,
    pub dec_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub cd: f64,
    pub d1_psnr: f64,
    pub peak: f64,
    pub bpp: Option<f64>,
    pub dec_time_s: Option<f64>,
    pub ddim_steps: Option<usize>,
}

impl EvalReport {
    /// Distortion of `rec` against `reference`; `peak = None` uses the reference bounding-box diagonal.
    pub fn compute(reference: &PointCloud, rec: &PointCloud, peak: Option<f64>) -> Result<Self> {
        let peak = peak.unwrap_or_else(|| default_peak(reference));
        Ok(EvalReport {
            cd: chamfer_distance(reference, rec)?,
            d1_psnr: d1_psnr(reference, rec, Some(peak))?,
            peak,
            bpp: None,
            dec_time_s: None,
            ddim_steps: None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BdReport {
    pub anchor: String,
    pub test: String,
    pub bd_psnr: f64,
    /// Percent rate change of `test` relative to `anchor`.
    pub bd_rate: f64,
}

/// One operating point of a rate-distortion sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdRow {
    pub model_id: String,
    pub bpp: f64,
    pub d1_psnr: f64,
    pub cd: f64,
}

pub const RD_HEADER: &str = "model_id,bpp,d1_psnr,cd";

/// CSV text with rows sorted by ascending bpp.
pub fn rd_csv(rows: &[RdRow]) -> Result<String> {
    let mut rows = rows.to_vec();
    rows.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
    let mut out = String::from(RD_HEADER);
    out.push('\n');
    for r in &rows {
        if r.model_id.contains([',', '\n', '"']) {
            return Err(Error::InvalidArgument(format!("model id {:?} cannot be written to CSV", r.model_id)));
        }
        writeln!(out, "{},{},{},{}", r.model_id, r.bpp, r.d1_psnr, r.cd).unwrap();
    }
    Ok(out)
}

pub fn parse_rd_csv(text: &str) -> Result<Vec<RdRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == RD_HEADER => {}
        _ => return Err(Error::Parse(format!("RD table must start with '{RD_HEADER}'"))),
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(Error::Parse(format!("RD row {}: expected 4 fields, got {}", i + 1, f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("RD row {}: {e}", i + 1)));
            Ok(RdRow { model_id: f[0].to_string(), bpp: num(f[1])?, d1_psnr: num(f[2])?, cd: num(f[3])? })
        })
        .collect()
}

pub fn load_rd_csv(path: &Path) -> Result<Vec<RdRow>> {
    parse_rd_csv(&std::fs::read_to_string(path)?)
}

/// BD metrics between two RD tables (each at least 4 points).
pub fn bd_report(anchor: &[RdRow], test: &[RdRow], anchor_name: &str, test_name: &str) -> Result<BdReport> {
    let curve = |rows: &[RdRow]| {
        let mut c: Vec<RdPoint> = rows.iter().map(|r| RdPoint { bpp: r.bpp, psnr: r.d1_psnr }).collect();
        c.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        c
    };
    let r = bd_metrics(&curve(anchor), &curve(test))?;
    Ok(BdReport { anchor: anchor_name.to_string(), test: test_name.to_string(), bd_psnr: r.bd_psnr, bd_rate: r.bd_rate })
}

/// A bpp / D1-PSNR line plot as standalone SVG.
pub fn rd_svg(rows: &[RdRow]) -> String {
    let (w, h, m) = (480.0, 320.0, 40.0);
    let mut rows = rows.to_vec();
    rows.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
    let fin: Vec<&RdRow> = rows.iter().filter(|r| r.bpp.is_finite() && r.d1_psnr.is_finite()).collect();
    let range = |f: &dyn Fn(&RdRow) -> f64| {
        let lo = fin.iter().map(|r| f(r)).fold(f64::INFINITY, f64::min);
        let hi = fin.iter().map(|r| f(r)).fold(f64::NEG_INFINITY, f64::max);
        if hi > lo { (lo, hi) } else { (lo - 1.0, lo + 1.0) }
    };
    let (x0, x1) = range(&|r| r.bpp);
    let (y0, y1) = range(&|r| r.d1_psnr);
    let px = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let py = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n");
    writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>").unwrap();
    writeln!(s, "<line x1=\"{m}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>", h - m, w - m, h - m).unwrap();
    writeln!(s, "<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{}\" stroke=\"black\"/>", h - m).unwrap();
    writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"12\">bpp</text>", w / 2.0, h - 8.0).unwrap();
    writeln!(s, "<text x=\"4\" y=\"{}\" font-size=\"12\">D1 PSNR (dB)</text>", m - 10.0).unwrap();
    let pts: Vec<String> = fin.iter().map(|r| format!("{:.2},{:.2}", px(r.bpp), py(r.d1_psnr))).collect();
    writeln!(s, "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{}\"/>", pts.join(" ")).unwrap();
    for r in &fin {
        writeln!(s, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"steelblue\"><title>{}</title></circle>", px(r.bpp), py(r.d1_psnr), r.model_id).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, bpp: f64, psnr: f64) -> RdRow {
        RdRow { model_id: id.into(), bpp, d1_psnr: psnr, cd: 0.1 }
    }

    #[test]
    fn csv_is_sorted_and_roundtrips() {
        let rows = vec![row("b", 0.5, 30.0), row("a", 0.25, 28.0)];
        let text = rd_csv(&rows).unwrap();
        let back = parse_rd_csv(&text).unwrap();
        assert_eq!(back.iter().map(|r| r.model_id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert!(parse_rd_csv("bpp\n1").is_err());
        assert!(rd_csv(&[row("x,y", 1.0, 1.0)]).is_err());
    }

    #[test]
    fn eval_identity() {
        let a = PointCloud::from_points(&[[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
        let r = EvalReport::compute(&a, &a, None).unwrap();
        assert_eq!((r.cd, r.d1_psnr, r.peak), (0.0, 999.0, 1.0));
    }
}
