use std::io::Write;

use serde::{Deserialize, Serialize};

use super::EvalError;

/// One metric value, keyed like the consolidated results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub gamma_c: f64,
    pub gamma_r: f64,
    pub model: String,
    pub tau: usize,
    pub metric: String,
    pub value: f64,
    /// Number of pooled predictions or anchors behind the value.
    #[serde(default)]
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
}

impl MetricsReport {
    pub fn push(&mut self, gamma: (f64, f64), model: &str, tau: usize, metric: &str, value: f64, count: usize) {
        self.rows.push(MetricRow {
            gamma_c: gamma.0,
            gamma_r: gamma.1,
            model: model.into(),
            tau,
            metric: metric.into(),
            value,
            count,
        });
    }

    pub fn get(&self, model: &str, tau: usize, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.tau == tau && r.metric == metric)
            .map(|r| r.value)
    }

    pub fn has_nan(&self) -> bool {
        self.rows.iter().any(|r| r.value.is_nan())
    }

    pub fn extend(&mut self, other: MetricsReport) {
        self.rows.extend(other.rows);
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Self, EvalError> {
        let rows = csv::Reader::from_reader(reader)
            .deserialize()
            .collect::<Result<Vec<MetricRow>, _>>()?;
        Ok(Self { rows })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let mut r = MetricsReport::default();
        r.push((5.0, 0.0), "crn", 3, "treatment_accuracy", 81.25, 400);
        r.push((5.0, 0.0), "crn", 1, "rmse", 0.731, 8000);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("gamma_c,gamma_r,model,tau,metric,value,count"));
        assert_eq!(MetricsReport::read_csv(buf.as_slice()).unwrap(), r);
        assert_eq!(r.get("crn", 1, "rmse"), Some(0.731));
    }
}
