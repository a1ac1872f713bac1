//! Space JSON and field CSV formats.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FiniteMetricMeasureSpace, SpaceRef};
use crate::error::{Error, Result};
use crate::field::ScalarField;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricSpec {
    Named(String),
    Snowflake { snowflake: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dist: Option<Vec<Vec<f64>>>,
    pub weights: Vec<f64>,
    pub metric: MetricSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

impl SpaceFile {
    pub fn from_space(space: &FiniteMetricMeasureSpace) -> Self {
        let n = space.len();
        let (points, dist, metric) = match space.metric_exponent() {
            Some(alpha) => (
                Some((0..n).map(|i| space.coords(i).unwrap().to_vec()).collect()),
                None,
                if alpha == 1.0 {
                    MetricSpec::Named("euclidean".into())
                } else {
                    MetricSpec::Snowflake { snowflake: alpha }
                },
            ),
            None => (
                None,
                Some(
                    (0..n)
                        .map(|i| (0..n).map(|j| space.dist(i, j)).collect())
                        .collect(),
                ),
                MetricSpec::Named("matrix".into()),
            ),
        };
        SpaceFile {
            points,
            dist,
            weights: space.weights().to_vec(),
            metric,
            labels: space.labels().map(<[String]>::to_vec),
        }
    }

    pub fn into_space(self) -> Result<FiniteMetricMeasureSpace> {
        match (self.metric, self.points, self.dist) {
            (MetricSpec::Named(m), Some(points), None) if m == "euclidean" => {
                FiniteMetricMeasureSpace::from_points(points, self.weights, 1.0, self.labels)
            }
            (MetricSpec::Snowflake { snowflake }, Some(points), None) => {
                if !(snowflake > 0.0 && snowflake < 1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "snowflake exponent {snowflake} must lie in (0, 1)"
                    )));
                }
                FiniteMetricMeasureSpace::from_points(points, self.weights, snowflake, self.labels)
            }
            (MetricSpec::Named(m), None, Some(dist)) if m == "matrix" => {
                FiniteMetricMeasureSpace::from_matrix(dist, self.weights, self.labels)
            }
            (metric, points, dist) => Err(Error::InvalidSpace(format!(
                "metric {metric:?} does not match the supplied data (points: {}, dist: {})",
                points.is_some(),
                dist.is_some()
            ))),
        }
    }
}

pub fn read_space_json(path: impl AsRef<Path>) -> Result<FiniteMetricMeasureSpace> {
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: SpaceFile = serde_json::from_str(&text)?;
    file.into_space()
}

pub fn write_space_json(space: &FiniteMetricMeasureSpace, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(&SpaceFile::from_space(space))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Renders a field as `point,value` CSV with round-trip precision.
pub fn field_to_csv(field: &ScalarField) -> String {
    let mut out = String::from("point,value\n");
    for (i, v) in field.values().iter().enumerate() {
        out.push_str(&format!("{i},{v:?}\n"));
    }
    out
}

pub fn read_field_csv(space: &SpaceRef, path: impl AsRef<Path>) -> Result<ScalarField> {
    let mut reader = csv::Reader::from_path(&path)?;
    let mut values = vec![None; space.len()];
    for row in reader.deserialize() {
        let (point, value): (usize, f64) = row?;
        space.check_point(point)?;
        values[point] = Some(value);
    }
    let values = values
        .into_iter()
        .enumerate()
        .map(|(i, v)| v.ok_or(Error::NotCovered { point: i }))
        .collect::<Result<Vec<_>>>()?;
    ScalarField::new(space, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{make_space, SpaceKind};

    #[test]
    fn space_json_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("space.json");
        for kind in [
            SpaceKind::Grid {
                dim: 2,
                side: 4,
                extent: 2.0,
            },
            SpaceKind::Snowflake {
                base: Box::new(SpaceKind::StandardCantor { depth: 3 }),
                alpha: 0.5,
            },
        ] {
            let s = make_space(&kind).unwrap();
            write_space_json(&s, &path).unwrap();
            let back = read_space_json(&path).unwrap();
            assert_eq!(back.len(), s.len());
            assert_eq!(back.weights(), s.weights());
            for i in 0..s.len() {
                for j in 0..s.len() {
                    assert_eq!(back.dist(i, j), s.dist(i, j));
                }
            }
        }
    }

    #[test]
    fn matrix_file_and_mismatches() {
        let text = r#"{"dist": [[0, 1], [1, 0]], "weights": [1, 2], "metric": "matrix", "labels": ["a", "b"]}"#;
        let s = serde_json::from_str::<SpaceFile>(text)
            .unwrap()
            .into_space()
            .unwrap();
        assert_eq!(s.labels().unwrap(), &["a".to_string(), "b".to_string()]);
        let bad = r#"{"points": [[0], [1]], "weights": [1, 1], "metric": "matrix"}"#;
        assert!(serde_json::from_str::<SpaceFile>(bad)
            .unwrap()
            .into_space()
            .is_err());
        let snow = r#"{"points": [[0], [4]], "weights": [1, 1], "metric": {"snowflake": 0.5}}"#;
        let s = serde_json::from_str::<SpaceFile>(snow)
            .unwrap()
            .into_space()
            .unwrap();
        assert_eq!(s.dist(0, 1), 2.0);
    }

    #[test]
    fn field_csv_round_trips() {
        let s = make_space(&SpaceKind::Grid {
            dim: 1,
            side: 5,
            extent: 1.0,
        })
        .unwrap()
        .into_ref();
        let f = ScalarField::from_fn(&s, |i| (i as f64 * 0.1).exp()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        std::fs::write(&path, field_to_csv(&f)).unwrap();
        let back = read_field_csv(&s, &path).unwrap();
        assert_eq!(back.values(), f.values());
        std::fs::write(&path, "point,value\n0,1.0\n").unwrap();
        assert!(matches!(
            read_field_csv(&s, &path),
            Err(Error::NotCovered { point: 1 })
        ));
    }
}
