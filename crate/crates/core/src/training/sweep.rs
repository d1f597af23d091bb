//! One-at-a-time ablation grids over w, k, p and the encoder.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PlvmError, Result};
use crate::evalsuite::RecognitionMetrics;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub w: f64,
    pub k: usize,
    pub p: f64,
    pub encoder: String,
}

impl SweepPoint {
    pub fn label(&self) -> String {
        format!("w={}_k={}_p={}_enc={}", self.w, self.k, self.p, self.encoder)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub base: SweepPoint,
    pub w: Vec<f64>,
    pub k: Vec<usize>,
    pub p: Vec<f64>,
    pub encoders: Vec<String>,
}

impl SweepGrid {
    pub fn standard(encoder: &str) -> Self {
        Self {
            base: SweepPoint {
                w: 20.0,
                k: 16,
                p: 0.6,
                encoder: encoder.to_string(),
            },
            w: vec![1.0, 5.0, 10.0, 15.0, 20.0],
            k: vec![8, 12, 16, 20],
            p: vec![0.4, 0.5, 0.6, 0.7],
            encoders: vec![encoder.to_string()],
        }
    }

    /// Varies one axis at a time around `base`; the base point appears once.
    pub fn points(&self) -> Vec<SweepPoint> {
        let b = &self.base;
        let mut out = vec![b.clone()];
        let mut push = |p: SweepPoint| {
            if !out.contains(&p) {
                out.push(p);
            }
        };
        self.w.iter().for_each(|&w| push(SweepPoint { w, ..b.clone() }));
        self.k.iter().for_each(|&k| push(SweepPoint { k, ..b.clone() }));
        self.p.iter().for_each(|&p| push(SweepPoint { p, ..b.clone() }));
        self.encoders.iter().for_each(|e| push(SweepPoint { encoder: e.clone(), ..b.clone() }));
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub config: String,
    pub pos: f64,
    pub neg: f64,
    pub mean: f64,
}

/// Runs `run` for each point, in order.
pub fn ablation_sweep(
    points: &[SweepPoint],
    mut run: impl FnMut(&SweepPoint) -> Result<RecognitionMetrics>,
) -> Result<Vec<SweepRow>> {
    points
        .iter()
        .map(|pt| {
            let m = run(pt)?;
            Ok(SweepRow {
                config: pt.label(),
                pos: m.pos,
                neg: m.neg,
                mean: m.mean,
            })
        })
        .collect()
}

pub fn write_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| PlvmError::Manifest(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| PlvmError::Manifest(e.to_string()))?;
    }
    w.flush().map_err(|e| PlvmError::io(path, e))
}
