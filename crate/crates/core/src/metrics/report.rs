use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{ari, fg_ari, miou, MetricError, Segmentation};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub miou: f64,
    pub ari: f64,
    /// `None` when the ground truth has no foreground.
    pub fg_ari: Option<f64>,
}

impl SampleMetrics {
    pub fn compute(pred: &Segmentation, gt: &Segmentation) -> Result<Self, MetricError> {
        let fg = match fg_ari(pred, gt) {
            Ok(v) => Some(v),
            Err(MetricError::NoForeground) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            miou: miou(pred, gt)?,
            ari: ari(pred, gt)?,
            fg_ari: fg,
        })
    }
}

/// Dataset-level metrics of one trained model (one seed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub samples: usize,
    pub miou: f64,
    pub ari: f64,
    pub fg_ari: Option<f64>,
    /// Samples left out of the fg-ARI mean for lack of foreground.
    pub fg_ari_excluded: usize,
}

/// Averages per-sample metrics over a validation set.
pub fn evaluate_samples(seed: u64, samples: &[SampleMetrics]) -> Result<SeedMetrics, MetricError> {
    if samples.is_empty() {
        return Err(MetricError::Empty);
    }
    let n = samples.len() as f64;
    let fg: Vec<f64> = samples.iter().filter_map(|s| s.fg_ari).collect();
    Ok(SeedMetrics {
        seed,
        samples: samples.len(),
        miou: samples.iter().map(|s| s.miou).sum::<f64>() / n,
        ari: samples.iter().map(|s| s.ari).sum::<f64>() / n,
        fg_ari: (!fg.is_empty()).then(|| fg.iter().sum::<f64>() / fg.len() as f64),
        fg_ari_excluded: samples.len() - fg.len(),
    })
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl MetricSummary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            count: values.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub per_seed: Vec<SeedMetrics>,
    pub miou: MetricSummary,
    pub ari: MetricSummary,
    pub fg_ari: Option<MetricSummary>,
}

/// Mean ± population std of each metric across seeds.
pub fn aggregate_seeds(label: &str, per_seed: &[SeedMetrics]) -> Result<MetricReport, MetricError> {
    let col = |f: fn(&SeedMetrics) -> f64| per_seed.iter().map(f).collect::<Vec<_>>();
    let miou = MetricSummary::of(&col(|s| s.miou)).ok_or(MetricError::Empty)?;
    let ari = MetricSummary::of(&col(|s| s.ari)).ok_or(MetricError::Empty)?;
    let fg: Vec<f64> = per_seed.iter().filter_map(|s| s.fg_ari).collect();
    Ok(MetricReport {
        label: label.to_string(),
        per_seed: per_seed.to_vec(),
        miou,
        ari,
        fg_ari: MetricSummary::of(&fg),
    })
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    /// One `label,metric,mean,std,count` row per metric.
    pub fn write_csv_rows<W: Write>(&self, out: &mut csv::Writer<W>) -> csv::Result<()> {
        let mut rows = vec![("miou", self.miou), ("ari", self.ari)];
        if let Some(fg) = self.fg_ari {
            rows.push(("fg_ari", fg));
        }
        for (name, s) in rows {
            out.write_record([
                self.label.clone(),
                name.to_string(),
                format!("{}", s.mean),
                format!("{}", s.std),
                s.count.to_string(),
            ])?;
        }
        Ok(())
    }

    pub const CSV_HEADER: [&'static str; 5] = ["label", "metric", "mean", "std", "count"];

    pub fn to_csv(reports: &[MetricReport]) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::CSV_HEADER).expect("in-memory write");
        for r in reports {
            r.write_csv_rows(&mut w).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seed(s: u64, v: f64) -> SeedMetrics {
        SeedMetrics {
            seed: s,
            samples: 1,
            miou: v,
            ari: v,
            fg_ari: Some(v),
            fg_ari_excluded: 0,
        }
    }

    #[test]
    fn single_seed_has_zero_std() {
        let r = aggregate_seeds("x", &[seed(0, 0.3)]).unwrap();
        assert_eq!(r.ari.std, 0.0);
        assert_eq!(r.ari.mean, 0.3);
    }

    #[test]
    fn two_seed_mean() {
        let r = aggregate_seeds("x", &[seed(0, 0.4), seed(1, 0.6)]).unwrap();
        assert!((r.miou.mean - 0.5).abs() < 1e-15);
        assert!((r.miou.std - 0.1).abs() < 1e-15);
    }

    #[test]
    fn ten_reports_match_spreadsheet_recomputation() {
        let vals = [0.91, 0.12, 0.55, 0.73, 0.64, 0.08, 0.99, 0.47, 0.33, 0.86];
        let seeds: Vec<SeedMetrics> = vals.iter().enumerate().map(|(i, &v)| seed(i as u64, v)).collect();
        let r = aggregate_seeds("x", &seeds).unwrap();
        // =AVERAGE(...) and =STDEV.P(...) of the column above
        assert!((r.ari.mean - 0.568).abs() < 1e-12);
        assert!((r.ari.std - 0.302_846_495_769_721_6).abs() < 1e-12);
    }

    #[test]
    fn empty_aggregation_errors() {
        assert_eq!(aggregate_seeds("x", &[]), Err(MetricError::Empty));
        assert_eq!(evaluate_samples(0, &[]), Err(MetricError::Empty));
    }

    #[test]
    fn samples_without_foreground_are_counted_not_averaged() {
        let s = [
            SampleMetrics { miou: 1.0, ari: 1.0, fg_ari: Some(0.5) },
            SampleMetrics { miou: 0.0, ari: 0.0, fg_ari: None },
        ];
        let m = evaluate_samples(3, &s).unwrap();
        assert_eq!(m.fg_ari, Some(0.5));
        assert_eq!(m.fg_ari_excluded, 1);
        assert_eq!(m.ari, 0.5);
    }

    #[test]
    fn csv_has_one_row_per_metric() {
        let r = aggregate_seeds("wnconv", &[seed(0, 0.4), seed(1, 0.6)]).unwrap();
        let csv = MetricReport::to_csv(&[r.clone()]);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(1).unwrap().starts_with("wnconv,miou,"));
        assert_eq!(MetricReport::from_json(&r.to_json()).unwrap(), r);
    }
}
