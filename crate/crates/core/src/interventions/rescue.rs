use serde::{Deserialize, Serialize};

use super::{ablation_kl, intervention_kl, recovery_ratio, CleanRun, InterventionSpec};
use crate::error::{Error, Result};
use crate::model::Model;

/// One ordered pair at one layer: `ablated` stays zeroed, `rescued` is
/// restored from the clean cache.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RescueEntry {
    pub ablated: usize,
    pub rescued: usize,
    pub ablation_kl: f64,
    pub rescue_kl: f64,
    /// Fraction recovered; `None` when the ablation had no measurable effect.
    pub recovery: Option<f64>,
    pub recovery_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RescueLayer {
    pub layer: usize,
    pub entries: Vec<RescueEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanEntry {
    pub ablated: usize,
    pub rescued: usize,
    /// Mean over layers where the recovery is defined.
    pub recovery: Option<f64>,
    pub recovery_pct: Option<f64>,
    pub defined_layers: usize,
}

/// Per-layer and layer-mean rescue matrices. Diagonal entries never appear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RescueReport {
    pub streams: usize,
    pub layers: Vec<RescueLayer>,
    pub mean: Vec<MeanEntry>,
}

fn pct(v: Option<f64>) -> Option<f64> {
    v.map(|x| 100.0 * x)
}

impl RescueReport {
    /// `n × n` matrix of recovery fractions, rows = ablated, columns = rescued.
    pub fn matrix(&self, layer_index: usize) -> Vec<Vec<Option<f64>>> {
        let mut m = vec![vec![None; self.streams]; self.streams];
        for e in &self.layers[layer_index].entries {
            m[e.ablated][e.rescued] = e.recovery;
        }
        m
    }

    pub fn mean_matrix(&self) -> Vec<Vec<Option<f64>>> {
        let mut m = vec![vec![None; self.streams]; self.streams];
        for e in &self.mean {
            m[e.ablated][e.rescued] = e.recovery;
        }
        m
    }

    /// Rows `layer,ablated,rescued,recovery,recovery_pct`; undefined entries
    /// are left out.
    pub fn layers_csv(&self) -> String {
        let mut out = String::from("layer,ablated,rescued,recovery,recovery_pct\n");
        for layer in &self.layers {
            for e in &layer.entries {
                if let (Some(r), Some(p)) = (e.recovery, e.recovery_pct) {
                    out.push_str(&format!(
                        "{},{},{},{r},{p}\n",
                        layer.layer, e.ablated, e.rescued
                    ));
                }
            }
        }
        out
    }
}

/// Ablate each listed pair at each listed layer and restore one stream at a
/// time (or both when `rescue_both`).
pub fn rescue_matrix(
    model: &Model,
    runs: &[CleanRun],
    layers: &[usize],
    pairs: &[[usize; 2]],
    rescue_both: bool,
) -> Result<RescueReport> {
    let n = model.config().streams;
    if n < 2 {
        return Err(Error::Contract(
            "rescue matrix needs at least 2 streams".into(),
        ));
    }
    let mut out_layers = Vec::with_capacity(layers.len());
    for &layer in layers {
        let mut entries = Vec::with_capacity(2 * pairs.len());
        for &[a, b] in pairs {
            let abl = ablation_kl(model, runs, layer, a, b)?;
            for (rescued, ablated) in [(a, b), (b, a)] {
                let rescue: &[usize] = if rescue_both { &[a, b] } else { &[rescued] };
                let res = intervention_kl(
                    model,
                    runs,
                    &InterventionSpec::ablate(layer, &[a, b], rescue),
                )?;
                let recovery = recovery_ratio(abl, res);
                entries.push(RescueEntry {
                    ablated,
                    rescued,
                    ablation_kl: abl,
                    rescue_kl: res,
                    recovery,
                    recovery_pct: pct(recovery),
                });
            }
        }
        entries.sort_by_key(|e| (e.ablated, e.rescued));
        out_layers.push(RescueLayer { layer, entries });
    }

    let mut mean = Vec::new();
    if let Some(first) = out_layers.first() {
        for (k, e) in first.entries.iter().enumerate() {
            let defined: Vec<f64> = out_layers
                .iter()
                .filter_map(|l| l.entries[k].recovery)
                .collect();
            let recovery =
                (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
            mean.push(MeanEntry {
                ablated: e.ablated,
                rescued: e.rescued,
                recovery,
                recovery_pct: pct(recovery),
                defined_layers: defined.len(),
            });
        }
    }
    Ok(RescueReport {
        streams: n,
        layers: out_layers,
        mean,
    })
}

/// Per-layer `recovery(+b,−a) − recovery(+a,−b)`: positive when `b` is the
/// better rescuer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsymmetrySeries {
    pub a: usize,
    pub b: usize,
    pub per_layer: Vec<(usize, f64)>,
    /// Layers where either recovery was undefined.
    pub skipped: Vec<usize>,
    pub mean: Option<f64>,
}

pub fn rescue_asymmetry(report: &RescueReport, a: usize, b: usize) -> Result<AsymmetrySeries> {
    if a == b || a >= report.streams || b >= report.streams {
        return Err(Error::Contract(format!(
            "({a}, {b}) is not a valid stream pair"
        )));
    }
    let lookup = |layer: &RescueLayer, ablated: usize, rescued: usize| {
        layer
            .entries
            .iter()
            .find(|e| e.ablated == ablated && e.rescued == rescued)
            .map(|e| e.recovery)
    };
    let mut per_layer = Vec::new();
    let mut skipped = Vec::new();
    for layer in &report.layers {
        match (lookup(layer, a, b), lookup(layer, b, a)) {
            (None, _) | (_, None) => {
                return Err(Error::Contract(format!("pair ({a}, {b}) was not measured")));
            }
            (Some(Some(b_rescues)), Some(Some(a_rescues))) => {
                per_layer.push((layer.layer, b_rescues - a_rescues))
            }
            _ => skipped.push(layer.layer),
        }
    }
    let mean = (!per_layer.is_empty())
        .then(|| per_layer.iter().map(|(_, v)| v).sum::<f64>() / per_layer.len() as f64);
    Ok(AsymmetrySeries {
        a,
        b,
        per_layer,
        skipped,
        mean,
    })
}

/// Rows `layer,stream_a,stream_b,asymmetry,asymmetry_pct`.
pub fn asymmetry_csv(series: &[AsymmetrySeries]) -> String {
    let mut out = String::from("layer,stream_a,stream_b,asymmetry,asymmetry_pct\n");
    for s in series {
        for &(layer, v) in &s.per_layer {
            out.push_str(&format!("{layer},{},{},{v},{}\n", s.a, s.b, 100.0 * v));
        }
    }
    out
}
