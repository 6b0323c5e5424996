use super::{run_intervened, CleanRun, InterventionSpec, PromptPair};
use crate::error::{Error, Result};
use crate::model::{mean_token_kl, Model};

/// Mean `KL(clean target ‖ patched target)` for each `(layer, stream)`,
/// patching the differing span from the source run. Rows follow `layers`.
pub fn patch_heatmap(
    model: &Model,
    pairs: &[PromptPair],
    layers: &[usize],
    streams: &[usize],
) -> Result<Vec<Vec<f64>>> {
    if pairs.is_empty() {
        return Err(Error::Input("no prompt pairs".into()));
    }
    let mut sums = vec![vec![0.0; streams.len()]; layers.len()];
    for pair in pairs {
        let target = CleanRun::new(model, &pair.target)?;
        let source = CleanRun::new(model, &pair.source)?;
        for (li, &layer) in layers.iter().enumerate() {
            for (si, &stream) in streams.iter().enumerate() {
                let spec = InterventionSpec::patch(layer, stream, pair.span.clone());
                let logits = run_intervened(model, &target, &spec, Some(&source))?;
                sums[li][si] += mean_token_kl(&target.cache.logits, &logits);
            }
        }
    }
    for row in &mut sums {
        for v in row.iter_mut() {
            *v /= pairs.len() as f64;
        }
    }
    Ok(sums)
}

/// Rows `layer,stream,mean_kl`.
pub fn patch_csv(layers: &[usize], streams: &[usize], heatmap: &[Vec<f64>]) -> String {
    let mut out = String::from("layer,stream,mean_kl\n");
    for (li, &l) in layers.iter().enumerate() {
        for (si, &s) in streams.iter().enumerate() {
            out.push_str(&format!("{l},{s},{}\n", heatmap[li][si]));
        }
    }
    out
}
