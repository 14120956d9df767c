//! Sequential container: shape-checked construction, forward traces,
//! and backpropagation over the whole layer stack.

use crate::error::{Error, Result};
use crate::nn::Layer;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered layer stack with a declared input shape. Layer shapes are
/// chained and validated once, at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T: Scalar = f64> {
    input_shape: Vec<usize>,
    layers: Vec<Layer<T>>,
    /// Output shape of every layer, precomputed at construction.
    shapes: Vec<Vec<usize>>,
}

/// Everything forward evaluation produced: the input and one activation
/// per layer (the last is the network output). Consumed by backward.
#[derive(Debug, Clone)]
pub struct ActivationTrace<T: Scalar = f64> {
    pub input: Tensor<T>,
    pub activations: Vec<Tensor<T>>,
}

impl<T: Scalar> ActivationTrace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.activations.last().expect("networks have >= 1 layer")
    }
}

/// Parameter gradients mirroring the network's layer/parameter layout,
/// plus the gradient with respect to the network input.
#[derive(Debug, Clone)]
pub struct GradientBundle<T: Scalar = f64> {
    pub layer_grads: Vec<Vec<Tensor<T>>>,
    pub input_grad: Tensor<T>,
}

impl<T: Scalar> Network<T> {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Parameter("a network needs at least one layer".into()));
        }
        if input_shape.is_empty() {
            return Err(Error::Shape("network input shape must be non-empty".into()));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut current = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            layer.validate().map_err(|e| at_layer(i, layer, e))?;
            current = layer
                .output_shape(&current)
                .map_err(|e| at_layer(i, layer, e))?;
            shapes.push(current.clone());
        }
        Ok(Network {
            input_shape,
            layers,
            shapes,
        })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    /// Mutable access for optimizers; parameter shapes must not change.
    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction requires >= 1 layer
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("networks have >= 1 layer")
    }

    /// Output shape of layer `i` (0-based).
    pub fn layer_output_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Evaluate the network, keeping every intermediate activation.
    pub fn forward(&self, x: &Tensor<T>) -> Result<ActivationTrace<T>> {
        if x.shape() != self.input_shape {
            return Err(Error::Shape(format!(
                "network expects input shape {:?}, got {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut current = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer.apply(current).map_err(|e| at_layer(i, layer, e))?;
            activations.push(out);
            current = activations.last().expect("just pushed");
        }
        Ok(ActivationTrace {
            input: x.clone(),
            activations,
        })
    }

    /// Forward without keeping the trace; returns the output only.
    pub fn output(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut trace = self.forward(x)?;
        Ok(trace.activations.pop().expect("networks have >= 1 layer"))
    }

    /// Backpropagate `grad_out` (gradient of a scalar loss w.r.t. the
    /// network output) through a trace produced by [`Network::forward`].
    pub fn backward(
        &self,
        trace: &ActivationTrace<T>,
        grad_out: &Tensor<T>,
    ) -> Result<GradientBundle<T>> {
        self.check_trace(trace)?;
        if grad_out.shape() != self.output_shape() {
            return Err(Error::Shape(format!(
                "grad_out shape {:?} does not match output shape {:?}",
                grad_out.shape(),
                self.output_shape()
            )));
        }
        let mut layer_grads = vec![Vec::new(); self.layers.len()];
        let mut grad = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            let input = if i == 0 {
                &trace.input
            } else {
                &trace.activations[i - 1]
            };
            let (param_grads, grad_in) = self.layers[i]
                .backward(input, &grad)
                .map_err(|e| at_layer(i, &self.layers[i], e))?;
            layer_grads[i] = param_grads;
            grad = grad_in;
        }
        Ok(GradientBundle {
            layer_grads,
            input_grad: grad,
        })
    }

    fn check_trace(&self, trace: &ActivationTrace<T>) -> Result<()> {
        if trace.input.shape() != self.input_shape {
            return Err(Error::Contract(format!(
                "trace input shape {:?} does not match network input {:?}",
                trace.input.shape(),
                self.input_shape
            )));
        }
        if trace.activations.len() != self.layers.len() {
            return Err(Error::Contract(format!(
                "trace has {} activations for a {}-layer network",
                trace.activations.len(),
                self.layers.len()
            )));
        }
        for (i, (act, shape)) in trace.activations.iter().zip(&self.shapes).enumerate() {
            if act.shape() != shape.as_slice() {
                return Err(Error::Contract(format!(
                    "trace activation {i} has shape {:?}, expected {:?}",
                    act.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }
}

fn at_layer<T: Scalar>(i: usize, layer: &Layer<T>, e: Error) -> Error {
    let tag = format!("layer {i} ({})", layer.kind_name());
    match e {
        Error::Shape(m) => Error::Shape(format!("{tag}: {m}")),
        Error::Parameter(m) => Error::Parameter(format!("{tag}: {m}")),
        other => other,
    }
}
