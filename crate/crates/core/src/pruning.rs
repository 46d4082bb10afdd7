//! L2 magnitude channel pruning by zero-masking, and accuracy-vs-sparsity sweeps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::trainer::evaluate;

/// L2 norm of each output channel of a `(C_out, C_in, kH, kW)` weight.
pub fn channel_norms<T: Scalar>(weight: &Tensor<T>) -> Result<Vec<f64>> {
    let [c, _, _, _] = weight.dims4("channel_norms")?;
    let per = weight.numel() / c;
    Ok(weight
        .data()
        .chunks_exact(per)
        .map(|ch| ch.iter().map(|v| v.to_f64().unwrap_or(f64::NAN).powi(2)).sum::<f64>().sqrt())
        .collect())
}

/// `floor(p·C)`, guarding against products such as `0.29 * 100 = 28.999…`.
pub fn pruned_count(fraction: f64, channels: usize) -> usize {
    ((fraction * channels as f64 + 1e-9).floor() as usize).min(channels)
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid(format!("prune fraction must lie in [0, 1), got {fraction}")));
    }
    Ok(())
}

/// Channels to prune: the `floor(p·C)` smallest norms, lower index first on ties.
pub fn select_pruned(norms: &[f64], fraction: f64) -> Result<Vec<usize>> {
    check_fraction(fraction)?;
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)));
    order.truncate(pruned_count(fraction, norms.len()));
    order.sort_unstable();
    Ok(order)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMask {
    /// `true` = kept.
    pub kept: Vec<bool>,
    pub norms: Vec<f64>,
}

impl LayerMask {
    pub fn pruned(&self) -> impl Iterator<Item = usize> + '_ {
        self.kept.iter().enumerate().filter(|(_, &k)| !k).map(|(i, _)| i)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneMask {
    pub fraction: f64,
    pub layers: BTreeMap<String, LayerMask>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneOptions {
    /// Also zero the shift β of the batch norm following each pruned channel.
    /// Running statistics are untouched, so in eval mode the channel still
    /// carries the constant `-γ·μ/σ`.
    pub zero_bn_beta: bool,
}

impl Default for PruneOptions {
    fn default() -> Self {
        PruneOptions { zero_bn_beta: true }
    }
}

/// The layers pruned for a model: its topographic layers, or the layers the
/// default rule would make topographic when it has none.
pub fn prune_layers<T: Scalar>(model: &Model<T>) -> Vec<String> {
    match model.topo_layer_ids() {
        ids if !ids.is_empty() => ids,
        _ => model.default_attachment_ids(),
    }
}

pub fn compute_mask<T: Scalar>(model: &Model<T>, fraction: f64, layers: &[String]) -> Result<PruneMask> {
    check_fraction(fraction)?;
    let mut out = BTreeMap::new();
    for id in layers {
        let conv = model.conv(id).ok_or_else(|| Error::invalid(format!("no conv layer `{id}` to prune")))?;
        let norms = channel_norms(&model.params()[conv.weight].value)?;
        let mut kept = vec![true; norms.len()];
        for i in select_pruned(&norms, fraction)? {
            kept[i] = false;
        }
        out.insert(id.clone(), LayerMask { kept, norms });
    }
    Ok(PruneMask { fraction, layers: out })
}

/// Zeroes weights and bias (and optionally the following β) of masked channels.
pub fn apply_mask<T: Scalar>(model: &mut Model<T>, mask: &PruneMask, opts: PruneOptions) -> Result<()> {
    for (id, layer) in &mask.layers {
        let conv = model.conv(id).ok_or_else(|| Error::invalid(format!("no conv layer `{id}` to prune")))?.clone();
        if layer.kept.len() != conv.out_channels {
            return Err(Error::shape("apply_mask", format!("{id}: mask of {} for {} channels", layer.kept.len(), conv.out_channels)));
        }
        let beta = model.bns()[conv.bn].beta;
        let per = conv.in_channels * conv.kernel * conv.kernel;
        let params = model.params_mut();
        for c in layer.pruned() {
            params[conv.weight].value.data_mut()[c * per..(c + 1) * per].fill(T::zero());
            params[conv.bias].value.data_mut()[c] = T::zero();
            if opts.zero_bn_beta {
                params[beta].value.data_mut()[c] = T::zero();
            }
        }
    }
    Ok(())
}

/// Returns a pruned copy of `model`; the input is left untouched.
pub fn apply_prune<T: Scalar>(model: &Model<T>, fraction: f64, layers: &[String], opts: PruneOptions) -> Result<(Model<T>, PruneMask)> {
    let mask = compute_mask(model, fraction, layers)?;
    let mut pruned = model.clone();
    apply_mask(&mut pruned, &mask, opts)?;
    Ok((pruned, mask))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub model_kind: String,
    pub seed: u64,
    pub test_accuracy: f64,
}

/// A baseline and a topographic model trained with the same split and seed.
pub struct CheckpointPair<'a, T> {
    pub seed: u64,
    pub baseline: &'a Model<T>,
    pub topographic: &'a Model<T>,
}

fn same_architecture<T: Scalar>(a: &Model<T>, b: &Model<T>) -> bool {
    let (sa, sb) = (a.spec(), b.spec());
    sa.family == sb.family
        && sa.widths == sb.widths
        && sa.num_classes == sb.num_classes
        && sa.in_channels == sb.in_channels
        && sa.image_size == sb.image_size
}

/// Test accuracy of every model at every fraction. Both members of a pair are
/// pruned on the topographic model's layer set.
pub fn prune_sweep<T: Scalar>(
    pairs: &[CheckpointPair<'_, T>],
    fractions: &[f64],
    test: &Split,
    batch_size: usize,
    opts: PruneOptions,
) -> Result<Vec<SweepRow>> {
    if fractions.is_empty() {
        return Err(Error::invalid("no prune fractions given"));
    }
    for &f in fractions {
        check_fraction(f)?;
    }
    let mut rows = Vec::new();
    for pair in pairs {
        if !same_architecture(pair.baseline, pair.topographic) {
            return Err(Error::Checkpoint(format!("seed {}: baseline and topographic architectures differ", pair.seed)));
        }
        let layers = prune_layers(pair.topographic);
        for &f in fractions {
            for (kind, model) in [("baseline", pair.baseline), ("topographic", pair.topographic)] {
                let (pruned, _) = apply_prune(model, f, &layers, opts)?;
                let acc = evaluate(&pruned, test, batch_size)?.accuracy;
                rows.push(SweepRow { fraction: f, model_kind: kind.into(), seed: pair.seed, test_accuracy: acc });
            }
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("fraction,model_kind,seed,test_accuracy\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.fraction, r.model_kind, r.seed, r.test_accuracy));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub fraction: f64,
    pub model_kind: String,
    pub mean: f64,
    /// Sample standard deviation over seeds (0 for a single seed).
    pub std: f64,
    pub seeds: usize,
}

pub fn summarize(rows: &[SweepRow]) -> Vec<SweepSummary> {
    let mut groups: Vec<((f64, String), Vec<f64>)> = Vec::new();
    for r in rows {
        match groups.iter_mut().find(|((f, k), _)| *f == r.fraction && *k == r.model_kind) {
            Some((_, v)) => v.push(r.test_accuracy),
            None => groups.push(((r.fraction, r.model_kind.clone()), vec![r.test_accuracy])),
        }
    }
    groups
        .into_iter()
        .map(|((fraction, model_kind), v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
            SweepSummary { fraction, model_kind, mean, std, seeds: v.len() }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelSpec;

    #[test]
    fn norms_of_simple_channels() {
        let mut w = Tensor::<f64>::zeros([2, 1, 2, 2]);
        w.data_mut()[4] = 3.0;
        assert_eq!(channel_norms(&w).unwrap(), vec![0.0, 3.0]);
    }

    #[test]
    fn selection_rules() {
        assert!(select_pruned(&[1.0, 2.0], 0.0).unwrap().is_empty());
        assert_eq!(select_pruned(&[2.0, 1.0], 0.5).unwrap(), vec![1]);
        assert_eq!(select_pruned(&[1.0, 1.0, 1.0, 0.5], 0.5).unwrap(), vec![0, 3]);
        assert!(select_pruned(&[1.0], 1.0).is_err());
        assert!(select_pruned(&[1.0], -0.1).is_err());
        assert_eq!(pruned_count(0.29, 100), 29);
        assert_eq!(pruned_count(0.62, 64), 39);
    }

    #[test]
    fn masking_is_idempotent_and_zero_is_identity() {
        let model = Model::<f64>::new(ModelSpec::small_vgg(3, 8, 4).with_widths(vec![4, 8]), 0).unwrap();
        let layers = prune_layers(&model);
        let (same, _) = apply_prune(&model, 0.0, &layers, PruneOptions::default()).unwrap();
        assert_eq!(same.params(), model.params());

        let (once, mask) = apply_prune(&model, 0.5, &layers, PruneOptions::default()).unwrap();
        let mut twice = once.clone();
        apply_mask(&mut twice, &mask, PruneOptions::default()).unwrap();
        assert_eq!(once.params(), twice.params());
        let conv = model.conv("stage2.conv2").unwrap();
        let norms = channel_norms(&once.params()[conv.weight].value).unwrap();
        assert_eq!(norms.iter().filter(|&&n| n == 0.0).count(), 4);
    }

    #[test]
    fn summary_statistics() {
        let rows: Vec<SweepRow> = [0.6, 0.8]
            .iter()
            .enumerate()
            .map(|(s, &a)| SweepRow { fraction: 0.5, model_kind: "baseline".into(), seed: s as u64, test_accuracy: a })
            .collect();
        let s = summarize(&rows);
        assert_eq!(s.len(), 1);
        assert!((s[0].mean - 0.7).abs() < 1e-12);
        assert!((s[0].std - 0.02f64.sqrt()).abs() < 1e-12);
        assert!(sweep_csv(&rows).starts_with("fraction,model_kind,seed,test_accuracy\n0.5,baseline,0,0.6\n"));
    }
}
