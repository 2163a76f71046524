use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::LatencyError;

/// One run on the latency/accuracy plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub label: String,
    #[serde(rename = "latency_reluops")]
    pub latency: f64,
    pub accuracy: f64,
}

impl ParetoPoint {
    pub fn new(label: impl Into<String>, latency: f64, accuracy: f64) -> Self {
        Self {
            label: label.into(),
            latency,
            accuracy,
        }
    }

    /// Lower-or-equal latency and higher-or-equal accuracy, strictly better
    /// on at least one.
    pub fn dominates(&self, other: &ParetoPoint) -> bool {
        self.latency <= other.latency
            && self.accuracy >= other.accuracy
            && (self.latency < other.latency || self.accuracy > other.accuracy)
    }

    fn validate(&self) -> Result<(), LatencyError> {
        let bad = |msg: &str| {
            Err(LatencyError::InvalidPoint {
                label: self.label.clone(),
                msg: msg.into(),
            })
        };
        if !(0.0..=1.0).contains(&self.accuracy) {
            return bad("accuracy outside [0, 1]");
        }
        if !(self.latency > 0.0 && self.latency.is_finite()) {
            return bad("latency must be finite and positive");
        }
        Ok(())
    }
}

/// Undominated points sorted by latency. Of several identical points the
/// one with the smallest label is kept.
pub fn pareto_frontier(points: &[ParetoPoint]) -> Result<Vec<ParetoPoint>, LatencyError> {
    if points.is_empty() {
        return Err(LatencyError::EmptyInput);
    }
    for p in points {
        p.validate()?;
    }
    let mut sorted: Vec<&ParetoPoint> = points.iter().collect();
    sorted.sort_by(|a, b| {
        a.latency
            .total_cmp(&b.latency)
            .then(b.accuracy.total_cmp(&a.accuracy))
            .then(a.label.cmp(&b.label))
    });
    let mut out: Vec<ParetoPoint> = Vec::new();
    for p in sorted {
        if out.last().is_none_or(|best| p.accuracy > best.accuracy) {
            out.push(p.clone());
        }
    }
    Ok(out)
}

#[derive(Deserialize)]
struct InputRow {
    label: String,
    latency_reluops: f64,
    accuracy: f64,
}

/// Reads `label,latency_reluops,accuracy` rows; extra columns are ignored.
pub fn read_points_csv<R: Read>(reader: R) -> Result<Vec<ParetoPoint>, LatencyError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    rdr.records()
        .map(|rec| {
            let row: InputRow = rec?.deserialize(Some(&headers))?;
            Ok(ParetoPoint::new(
                row.label,
                row.latency_reluops,
                row.accuracy,
            ))
        })
        .collect()
}

/// Writes every point with an `on_frontier` flag, in input order.
pub fn write_pareto_csv<W: Write>(
    points: &[ParetoPoint],
    frontier: &[ParetoPoint],
    writer: W,
) -> Result<(), LatencyError> {
    #[derive(Serialize)]
    struct Row<'a> {
        label: &'a str,
        latency_reluops: f64,
        accuracy: f64,
        on_frontier: bool,
    }
    let mut wtr = csv::Writer::from_writer(writer);
    for p in points {
        wtr.serialize(Row {
            label: &p.label,
            latency_reluops: p.latency,
            accuracy: p.accuracy,
            on_frontier: frontier.contains(p),
        })?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(label: &str, lat: f64, acc: f64) -> ParetoPoint {
        ParetoPoint::new(label, lat, acc)
    }

    #[test]
    fn three_point_example() {
        let pts = [p("a", 10.0, 0.90), p("b", 12.0, 0.95), p("c", 11.0, 0.85)];
        assert_eq!(
            pareto_frontier(&pts).unwrap(),
            vec![pts[0].clone(), pts[1].clone()]
        );
    }

    #[test]
    fn single_and_duplicate_points() {
        let one = [p("x", 3.0, 0.5)];
        assert_eq!(pareto_frontier(&one).unwrap(), one.to_vec());
        let dup = [p("b", 3.0, 0.5), p("a", 3.0, 0.5)];
        assert_eq!(pareto_frontier(&dup).unwrap(), vec![p("a", 3.0, 0.5)]);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            pareto_frontier(&[]),
            Err(LatencyError::EmptyInput)
        ));
        assert!(pareto_frontier(&[p("bad", 1.0, 1.5)]).is_err());
        assert!(pareto_frontier(&[p("free", 0.0, 0.5)]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let pts = vec![p("a", 10.0, 0.9), p("b", 12.0, 0.95), p("c", 11.0, 0.85)];
        let front = pareto_frontier(&pts).unwrap();
        let mut buf = Vec::new();
        write_pareto_csv(&pts, &front, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("label,latency_reluops,accuracy,on_frontier\n"));
        assert!(text.contains("c,11.0,0.85,false"));
        assert_eq!(read_points_csv(buf.as_slice()).unwrap(), pts);
    }
}
