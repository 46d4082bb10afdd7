//! Topographic auxiliary loss.
//!
//! For a layer with `C` output channels and channel positions `p_i`, the loss
//! is the mean over channel pairs `i < j` of `(S_ij - 1 / (|p_i - p_j| + 1))^2`,
//! where `S` is the cosine similarity between flattened channel activations.
//! The combined objective adds `lambda` times the mean of the per-layer losses
//! to the classification loss.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};
use crate::topography::{DistanceTarget, Layout, Scheme};

/// Added to the norm product so an all-zero channel has similarity 0.
pub const SIMILARITY_EPS: f64 = 1e-12;

/// How a batch of activations is turned into similarity matrices.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    /// One similarity matrix per sample, losses averaged over the batch.
    #[default]
    PerSample,
    /// Samples concatenated along the spatial axis into a single matrix.
    Pooled,
}

/// A convolutional layer bound to a layout of its output channels.
#[derive(Clone, Debug)]
pub struct TopoLayerSpec {
    pub layer_id: String,
    pub layout: Layout,
    pub targets: DistanceTarget,
}

impl TopoLayerSpec {
    pub fn new(layer_id: impl Into<String>, scheme: Scheme, channels: usize) -> Result<Self> {
        let layout = scheme.layout(channels)?;
        Ok(Self::from_layout(layer_id, layout))
    }

    pub fn from_layout(layer_id: impl Into<String>, layout: Layout) -> Self {
        let targets = DistanceTarget::new(&layout);
        TopoLayerSpec { layer_id: layer_id.into(), layout, targets }
    }

    pub fn channel_count(&self) -> usize {
        self.layout.channel_count()
    }
}

/// Cosine similarity between channels of a single `(C, H, W)` activation.
/// Returns a `(C, C)` variable.
pub fn cosine_similarity_matrix<T: Scalar>(tape: &mut Tape<T>, y: Var) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    if shape.len() < 2 || shape[0] < 2 {
        return Err(Error::shape("cosine_similarity_matrix", format!("expected (C >= 2, ...), got {shape:?}")));
    }
    let c = shape[0];
    let f: usize = shape[1..].iter().product();
    let batched = tape.reshape(y, &[1, c, f])?;
    let s = tape.cosine_similarity(batched, false, SIMILARITY_EPS)?;
    tape.reshape(s, &[c, c])
}

/// Per-layer loss from a `(C, C)` or `(G, C, C)` similarity variable; with a
/// leading group axis the per-group losses are averaged.
pub fn topo_layer_loss<T: Scalar>(tape: &mut Tape<T>, similarity: Var, targets: &DistanceTarget) -> Result<Var> {
    let shape = tape.value(similarity).shape().to_vec();
    let c = targets.channel_count();
    let groups = match shape.as_slice() {
        [a, b] if *a == c && *b == c => 1,
        [g, a, b] if *a == c && *b == c => *g,
        _ => {
            return Err(Error::shape(
                "topo_layer_loss",
                format!("similarity {shape:?} does not match a {c}-channel layout"),
            ))
        }
    };
    let pair_weight = 2.0 / (c * (c - 1)) as f64 / groups as f64;
    let mut target = Vec::with_capacity(groups * c * c);
    let mut mask = Vec::with_capacity(groups * c * c);
    for _ in 0..groups {
        target.extend(targets.targets().iter().map(|&t| T::lit(t)));
        for i in 0..c {
            for j in 0..c {
                mask.push(if i < j { T::lit(pair_weight) } else { T::zero() });
            }
        }
    }
    let target = tape.constant(Tensor::new(shape.clone(), target)?);
    let mask = tape.constant(Tensor::new(shape, mask)?);
    let diff = tape.sub(similarity, target)?;
    let sq = tape.square(diff)?;
    let weighted = tape.mul(sq, mask)?;
    tape.sum(weighted)
}

/// Loss of a `(B, C, H, W)` pre-activation batch.
pub fn batched_topo_loss<T: Scalar>(
    tape: &mut Tape<T>,
    activations: Var,
    targets: &DistanceTarget,
    mode: SimilarityMode,
) -> Result<Var> {
    let shape = tape.value(activations).shape().to_vec();
    if shape.len() < 3 {
        return Err(Error::shape("batched_topo_loss", format!("expected (B, C, ...), got {shape:?}")));
    }
    if shape[1] != targets.channel_count() {
        return Err(Error::shape(
            "batched_topo_loss",
            format!("{} channels but layout has {}", shape[1], targets.channel_count()),
        ));
    }
    let s = tape.cosine_similarity(activations, mode == SimilarityMode::Pooled, SIMILARITY_EPS)?;
    topo_layer_loss(tape, s, targets)
}

/// Loss value of a recorded activation without extending the caller's tape.
pub fn measure_topo_loss<T: Scalar>(activations: &Tensor<T>, targets: &DistanceTarget, mode: SimilarityMode) -> Result<f64> {
    let mut scratch = Tape::new();
    let y = scratch.constant(activations.clone());
    let loss = batched_topo_loss(&mut scratch, y, targets, mode)?;
    Ok(scratch.value(loss).data()[0].to_f64().unwrap_or(f64::NAN))
}

/// Breakdown of one evaluation of the combined objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopoLossReport {
    pub per_layer: BTreeMap<String, f64>,
    pub mean: f64,
    pub lambda: f64,
    pub classif: f64,
    pub total: f64,
}

/// One line of the per-step metrics stream.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub classif_loss: f64,
    pub topo_loss: BTreeMap<String, f64>,
    pub topo_loss_mean: f64,
    pub total: f64,
}

impl TopoLossReport {
    pub fn step_metrics(&self, step: u64) -> StepMetrics {
        StepMetrics {
            step,
            classif_loss: self.classif,
            topo_loss: self.per_layer.clone(),
            topo_loss_mean: self.mean,
            total: self.total,
        }
    }
}

fn scalar_of<T: Scalar>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).data()[0].to_f64().unwrap_or(f64::NAN)
}

/// `classif + lambda * mean(layer_losses)`.
///
/// The mean runs over the layers passed in, i.e. the layers that carry a
/// layout. With `lambda == 0` the returned variable is `classif` itself, so
/// the topographic terms cannot touch the gradient.
pub fn combined_loss<T: Scalar>(
    tape: &mut Tape<T>,
    classif: Var,
    layer_losses: &[(String, Var)],
    lambda: f64,
) -> Result<(Var, TopoLossReport)> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("topographic weight must be finite and >= 0, got {lambda}")));
    }
    if lambda > 0.0 && layer_losses.is_empty() {
        return Err(Error::invalid("positive topographic weight with no topographic layers"));
    }
    let per_layer: BTreeMap<String, f64> =
        layer_losses.iter().map(|(id, v)| (id.clone(), scalar_of(tape, *v))).collect();
    let mean = if layer_losses.is_empty() {
        0.0
    } else {
        layer_losses.iter().map(|(_, v)| scalar_of(tape, *v)).sum::<f64>() / layer_losses.len() as f64
    };
    let total = if lambda == 0.0 {
        classif
    } else {
        let mut acc = layer_losses[0].1;
        for (_, v) in &layer_losses[1..] {
            acc = tape.add(acc, *v)?;
        }
        let weighted = tape.scale(acc, lambda / layer_losses.len() as f64)?;
        tape.add(classif, weighted)?
    };
    let report = TopoLossReport {
        per_layer,
        mean,
        lambda,
        classif: scalar_of(tape, classif),
        total: scalar_of(tape, total),
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topography::make_circle;

    fn naive_similarity(y: &[f64], c: usize, f: usize) -> Vec<f64> {
        let mut s = vec![0.0; c * c];
        for i in 0..c {
            for j in 0..c {
                let (a, b) = (&y[i * f..(i + 1) * f], &y[j * f..(j + 1) * f]);
                let dot: f64 = a.iter().zip(b).map(|(x, z)| x * z).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                s[i * c + j] = dot / (na * nb + SIMILARITY_EPS);
            }
        }
        s
    }

    #[test]
    fn identical_channels_have_unit_similarity() {
        let mut tape = Tape::<f64>::new();
        let y = tape.constant(Tensor::new([2, 2, 2], vec![1.0, -2.0, 3.0, 0.5, 1.0, -2.0, 3.0, 0.5]).unwrap());
        let s = cosine_similarity_matrix(&mut tape, y).unwrap();
        assert!((tape.value(s).data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_channels() {
        let mut tape = Tape::<f64>::new();
        let y = tape.constant(Tensor::new([2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let s = cosine_similarity_matrix(&mut tape, y).unwrap();
        assert_eq!(tape.value(s).data()[1], 0.0);
    }

    #[test]
    fn three_channel_similarity_matches_pairwise_loop() {
        let y: Vec<f64> = (0..3 * 20).map(|i| ((i * 7919) % 97) as f64 / 13.0 - 3.5).collect();
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::new([3, 4, 5], y.clone()).unwrap());
        let s = cosine_similarity_matrix(&mut tape, v).unwrap();
        let naive = naive_similarity(&y, 3, 20);
        for (a, b) in tape.value(s).data().iter().zip(&naive) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_pair_closed_form() {
        // two channels one unit apart, perfectly similar
        let layout = crate::topography::make_grid2d(2).unwrap();
        let dt = DistanceTarget::new(&layout);
        assert!((dt.distance(0, 1) - 0.5).abs() < 1e-15);
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::new([2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap());
        let loss = topo_layer_loss(&mut tape, s, &dt).unwrap();
        let expected = (1.0 - 1.0 / 1.5f64).powi(2);
        assert!((tape.value(loss).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn unit_distance_pair_gives_quarter() {
        let layout = Layout::from_positions(2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let dt = DistanceTarget::new(&layout);
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::new([2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap());
        let loss = topo_layer_loss(&mut tape, s, &dt).unwrap();
        assert_eq!(tape.value(loss).data()[0], 0.25);
    }

    #[test]
    fn matching_targets_give_zero_loss() {
        let dt = DistanceTarget::new(&make_circle(5).unwrap());
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::new([5, 5], dt.targets().to_vec()).unwrap());
        let loss = topo_layer_loss(&mut tape, s, &dt).unwrap();
        assert_eq!(tape.value(loss).data()[0], 0.0);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let dt = DistanceTarget::new(&make_circle(4).unwrap());
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::zeros([3, 3]));
        assert!(topo_layer_loss(&mut tape, s, &dt).is_err());
        let y = tape.constant(Tensor::zeros([2, 3, 4, 4]));
        assert!(batched_topo_loss(&mut tape, y, &dt, SimilarityMode::PerSample).is_err());
    }

    #[test]
    fn combined_loss_arithmetic_and_lambda_zero() {
        let mut tape = Tape::<f64>::new();
        let c = tape.leaf(Tensor::scalar(1.0), true);
        let a = tape.leaf(Tensor::scalar(0.2), true);
        let b = tape.leaf(Tensor::scalar(0.4), true);
        let layers = vec![("a".to_string(), a), ("b".to_string(), b)];
        let (total, report) = combined_loss(&mut tape, c, &layers, 1.0).unwrap();
        assert!((tape.value(total).data()[0] - 1.3).abs() < 1e-15);
        assert!((report.mean - 0.3).abs() < 1e-15);

        let (total0, report0) = combined_loss(&mut tape, c, &layers, 0.0).unwrap();
        assert_eq!(total0, c);
        assert_eq!(report0.total, 1.0);
        let grads = tape.backward(total0).unwrap();
        assert!(grads.get(a).is_none());

        assert!(combined_loss(&mut tape, c, &[], 0.5).is_err());
        assert!(combined_loss(&mut tape, c, &layers, -1.0).is_err());
    }
}
