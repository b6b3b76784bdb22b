use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Metrics of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub image_id: String,
    pub local_contrast: f64,
    pub cpbd: f64,
    pub no_edges: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        serialize_with = "ser_psnr",
        deserialize_with = "de_psnr"
    )]
    pub psnr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub method: String,
    pub count: usize,
    pub mean_local_contrast: f64,
    pub mean_cpbd: f64,
    /// Mean CPBD over images where edges were found.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_cpbd_with_edges: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_mse: Option<f64>,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        serialize_with = "ser_psnr",
        deserialize_with = "de_psnr"
    )]
    pub mean_psnr: Option<f64>,
}

/// Per-image metrics of one method plus corpus means.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub images: Vec<ImageMetrics>,
    pub summary: MetricsSummary,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "row", rename_all = "snake_case")]
enum Row {
    Image(ImageMetrics),
    Summary(MetricsSummary),
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl MetricsReport {
    pub fn new(method: impl Into<String>, images: Vec<ImageMetrics>) -> Self {
        let with_ref = !images.is_empty() && images.iter().all(|m| m.mse.is_some());
        let summary = MetricsSummary {
            method: method.into(),
            count: images.len(),
            mean_local_contrast: mean(images.iter().map(|m| m.local_contrast)).unwrap_or(0.0),
            mean_cpbd: mean(images.iter().map(|m| m.cpbd)).unwrap_or(1.0),
            mean_cpbd_with_edges: mean(images.iter().filter(|m| !m.no_edges).map(|m| m.cpbd)),
            mean_mse: with_ref
                .then(|| mean(images.iter().filter_map(|m| m.mse)))
                .flatten(),
            mean_psnr: with_ref
                .then(|| mean(images.iter().filter_map(|m| m.psnr)))
                .flatten(),
        };
        Self { images, summary }
    }

    /// Rows written by [`MetricsReport::write_jsonl`]: one per image plus the summary.
    pub fn row_count(&self) -> usize {
        self.images.len() + 1
    }

    /// One JSON object per image, then one summary object.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for m in &self.images {
            serde_json::to_writer(&mut out, &Row::Image(m.clone())).map_err(json_err)?;
            out.write_all(b"\n")?;
        }
        serde_json::to_writer(&mut out, &Row::Summary(self.summary.clone())).map_err(json_err)?;
        out.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut images = Vec::new();
        let mut summary = None;
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line).map_err(json_err)? {
                Row::Image(m) => images.push(m),
                Row::Summary(s) => summary = Some(s),
            }
        }
        let summary = summary.ok_or_else(|| Error::Config("report has no summary row".into()))?;
        Ok(Self { images, summary })
    }
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

/// Method comparison table: a header plus one tab-separated row per method.
pub fn summary_table(summaries: &[MetricsSummary]) -> String {
    let mut s = String::from("method\tmean_cl\tmean_cpbd\tmean_psnr\n");
    for m in summaries {
        let psnr = match m.mean_psnr {
            Some(p) if p.is_infinite() => "inf".to_string(),
            Some(p) => format!("{p:.4}"),
            None => "-".to_string(),
        };
        let _ = writeln!(
            s,
            "{}\t{:.4}\t{:.4}\t{}",
            m.method, m.mean_local_contrast, m.mean_cpbd, psnr
        );
    }
    s
}

fn ser_psnr<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(p) if p.is_infinite() => s.serialize_str("inf"),
        Some(p) => s.serialize_f64(*p),
        None => s.serialize_none(),
    }
}

fn de_psnr<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }
    match Option::<Repr>::deserialize(d)? {
        None => Ok(None),
        Some(Repr::Num(v)) => Ok(Some(v)),
        Some(Repr::Text(t)) if t == "inf" => Ok(Some(f64::INFINITY)),
        Some(Repr::Text(t)) => Err(serde::de::Error::custom(format!("bad psnr {t:?}"))),
    }
}
