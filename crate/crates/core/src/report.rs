//! Evaluation reports (long-form CSV + JSON), run ledger and SVG charts.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        write!(s, "{b:02x}").unwrap();
    }
    s
}

/// Hash of the JSON serialization of a config value.
pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(cfg)?))
}

/// One metric value for one cell of a table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub section: String,
    pub attack: String,
    pub defense: String,
    /// Sweep parameter (ε_v, constraint fraction, ...), if any.
    pub param: Option<f64>,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub stage: String,
    pub per_image_s: f64,
    pub images: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub checkpoint_hash: String,
    pub rows: Vec<ReportRow>,
    /// Wall-clock; kept out of the CSV so that it stays reproducible.
    pub timing: Vec<TimingRow>,
    /// Sanity alarms (e.g. an adaptive attack weaker than its baseline).
    pub alarms: Vec<String>,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl EvalReport {
    pub fn new(config_hash: String, checkpoint_hash: String) -> Self {
        Self {
            config_hash,
            checkpoint_hash,
            ..Default::default()
        }
    }

    pub fn push(
        &mut self,
        section: &str,
        attack: &str,
        defense: &str,
        param: Option<f64>,
        metric: &str,
        value: f64,
    ) {
        self.rows.push(ReportRow {
            section: section.into(),
            attack: attack.into(),
            defense: defense.into(),
            param,
            metric: metric.into(),
            value,
        });
    }

    pub fn alarm(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        log::warn!("{msg}");
        self.alarms.push(msg);
    }

    /// Rows matching the given keys.
    pub fn find(
        &self,
        section: &str,
        attack: &str,
        defense: &str,
        metric: &str,
    ) -> Vec<&ReportRow> {
        self.rows
            .iter()
            .filter(|r| {
                r.section == section
                    && r.attack == attack
                    && r.defense == defense
                    && r.metric == metric
            })
            .collect()
    }

    pub fn value(&self, section: &str, attack: &str, defense: &str, metric: &str) -> Option<f64> {
        self.find(section, attack, defense, metric)
            .first()
            .map(|r| r.value)
    }

    pub fn extend(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
        self.timing.extend(other.timing);
        self.alarms.extend(other.alarms);
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("config_hash,checkpoint_hash,section,attack,defense,param,metric,value\n");
        for r in &self.rows {
            let param = r.param.map(|p| p.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                self.config_hash,
                self.checkpoint_hash,
                csv_field(&r.section),
                csv_field(&r.attack),
                csv_field(&r.defense),
                param,
                csv_field(&r.metric),
                r.value
            )
            .unwrap();
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.csv"), self.to_csv())?;
        std::fs::write(dir.join("report.json"), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Append-only JSON-lines ledger.
pub struct Ledger {
    file: Option<std::fs::File>,
}

impl Ledger {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(Self {
            file: Some(
                std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)?,
            ),
        })
    }

    /// A ledger that discards entries.
    pub fn disabled() -> Self {
        Self { file: None }
    }

    pub fn record<T: Serialize>(&mut self, entry: &T) -> Result<()> {
        if let Some(f) = self.file.as_mut() {
            let mut line = serde_json::to_vec(entry)?;
            line.push(b'\n');
            f.write_all(&line)?;
        }
        Ok(())
    }
}

/// Minimal SVG line chart; one polyline per series.
pub fn svg_line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const M: f64 = 48.0;
    const COLORS: [&str; 6] = [
        "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
    ];
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">{title}</text>\n\
         <line x1=\"{M}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>\n\
         <text x=\"12\" y=\"{}\" transform=\"rotate(-90 12 {})\" text-anchor=\"middle\">{y_label}</text>\n\
         <text x=\"{M}\" y=\"{}\" text-anchor=\"middle\">{x0:.3}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x1:.3}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{y0:.2}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{y1:.2}</text>\n",
        W / 2.0,
        H - M,
        W - M,
        H - M,
        H - M,
        W / 2.0,
        H - 10.0,
        H / 2.0,
        H / 2.0,
        H - M + 14.0,
        W - M,
        H - M + 14.0,
        M - 4.0,
        H - M,
        M - 4.0,
        M + 4.0,
    );
    for (i, (name, p)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = p
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            path.join(" ")
        )
        .unwrap();
        writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{name}</text>",
            W - M - 90.0,
            M + 14.0 * i as f64
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn csv_quotes_fields() {
        let mut r = EvalReport::new("h".into(), "c".into());
        r.push("main", "adaptive(λ=1,2)", "none", Some(0.5), "miou", 12.5);
        let csv = r.to_csv();
        assert!(csv.lines().nth(1).unwrap().contains("\"adaptive(λ=1,2)\""));
        assert!(csv.ends_with(",0.5,miou,12.5\n"));
    }

    #[test]
    fn svg_has_one_polyline_per_series() {
        let s = svg_line_chart(
            "t",
            "x",
            "y",
            &[
                ("a".into(), vec![(0.0, 1.0), (1.0, 2.0)]),
                ("b".into(), vec![]),
            ],
        );
        assert_eq!(s.matches("<polyline").count(), 2);
    }
}
