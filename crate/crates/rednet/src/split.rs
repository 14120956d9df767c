//! Network splitting at a cut-off layer and snapshot collection.
//!
//! The cut-off index `l` counts every layer, activations and pooling
//! included: `pre` keeps layers `1..=l` (1-based), `post` the rest. Both
//! halves are full networks, so the composition identity
//! `post(pre(x)) == net(x)` holds exactly.

use crate::error::{Error, Result};
use crate::nn::Network;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SplitNetwork<T: Scalar = f64> {
    pub pre: Network<T>,
    pub post: Network<T>,
    /// Number of layers in `pre` (the 1-based index of the last one).
    pub cut_index: usize,
}

/// Split `net` after layer `l` (1-based, counting all layers).
pub fn split_network<T: Scalar>(net: &Network<T>, l: usize) -> Result<SplitNetwork<T>> {
    let total = net.len();
    if l < 1 || l >= total {
        return Err(Error::Parameter(format!(
            "cut-off layer {l} out of range: this network needs 1 <= l <= {}",
            total - 1
        )));
    }
    let pre = Network::new(
        net.input_shape().to_vec(),
        net.layers()[..l].to_vec(),
    )?;
    let post = Network::new(
        net.layer_output_shape(l - 1).to_vec(),
        net.layers()[l..].to_vec(),
    )?;
    Ok(SplitNetwork {
        pre,
        post,
        cut_index: l,
    })
}

/// Snapshot matrix of intermediate features: column `j` is the row-major
/// flattening of the pre-model output on `inputs[j]`.
pub fn collect_features<T: Scalar>(pre: &Network<T>, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
    if inputs.is_empty() {
        return Err(Error::Parameter("collect_features needs at least one input".into()));
    }
    let n_l: usize = pre.output_shape().iter().product();
    let n = inputs.len();
    let mut snapshots = Tensor::zeros(&[n_l, n]);
    for (j, x) in inputs.iter().enumerate() {
        let out = pre
            .output(x)
            .map_err(|e| Error::Shape(format!("sample {j}: {e}")))?;
        for (i, &v) in out.data().iter().enumerate() {
            snapshots.set(i, j, v);
        }
    }
    Ok(snapshots)
}
