use serde::{Deserialize, Serialize};

use super::ops::{conv2d_backward_raw, conv2d_raw};
use super::{
    concat_backward, concat_channels, maxpool2, maxpool2_backward, relu, relu_backward, upsample2,
    upsample2_backward, Scalar, Tensor4,
};
use crate::{Error, Result};

/// Where a convolution sits in the encoder-decoder layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvRole {
    Encoder,
    Decoder,
    Head,
}

/// One node of a feed-forward layer list. Activation 0 is the network
/// input and activation `i + 1` is the output of layer `i`.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Convolution with "same" padding; kernel size comes from the weight shape.
    Conv {
        weight: usize,
        bias: usize,
        relu: bool,
        role: ConvRole,
    },
    MaxPool,
    Upsample,
    /// Appends the channels of activation `skip` after the current tensor's.
    Concat { skip: usize },
}

/// A named trainable tensor with its gradient and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub adam_m: Vec<T>,
    pub adam_v: Vec<T>,
    pub(crate) grad_ready: bool,
}

impl<T: Scalar> ParamTensor<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<T>) -> Result<Self> {
        let name = name.into();
        let n: usize = shape.iter().product();
        if value.len() != n {
            return Err(Error::ShapeMismatch {
                name,
                expected: shape,
                found: vec![value.len()],
            });
        }
        Ok(Self {
            name,
            shape,
            value,
            grad: vec![T::zero(); n],
            adam_m: vec![T::zero(); n],
            adam_v: vec![T::zero(); n],
            grad_ready: false,
        })
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn has_gradient(&self) -> bool {
        self.grad_ready
    }

    pub fn cast<U: Scalar>(&self) -> ParamTensor<U> {
        let c = |v: &[T]| v.iter().map(|x| U::from_f64(x.as_f64())).collect();
        ParamTensor {
            name: self.name.clone(),
            shape: self.shape.clone(),
            value: c(&self.value),
            grad: c(&self.grad),
            adam_m: c(&self.adam_m),
            adam_v: c(&self.adam_v),
            grad_ready: self.grad_ready,
        }
    }

    fn kernel_shape(&self) -> [usize; 4] {
        [self.shape[0], self.shape[1], self.shape[2], self.shape[3]]
    }
}

/// All activations of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    pub acts: Vec<Tensor4<T>>,
}

impl<T> Trace<T> {
    pub fn output(&self) -> &Tensor4<T> {
        self.acts.last().expect("trace holds at least the input")
    }
}

/// Layer list plus parameter registry.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph<T> {
    layers: Vec<Layer>,
    params: Vec<ParamTensor<T>>,
}

fn scan<T: Scalar>(t: &Tensor4<T>, what: &str, layer: usize) -> Result<()> {
    if !t.all_finite() {
        return Err(Error::Numeric(format!("non-finite {what} at layer {layer}")));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn new(layers: Vec<Layer>, params: Vec<ParamTensor<T>>) -> Result<Self> {
        let mut names: Vec<&str> = params.iter().map(|p| p.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::invalid(format!("duplicate parameter name `{}`", w[0])));
        }
        for (i, layer) in layers.iter().enumerate() {
            match *layer {
                Layer::Conv { weight, bias, .. } => {
                    let (Some(w), Some(b)) = (params.get(weight), params.get(bias)) else {
                        return Err(Error::invalid(format!("layer {i} references a missing parameter")));
                    };
                    if w.shape.len() != 4 || b.shape != [w.shape[0]] {
                        return Err(Error::invalid(format!(
                            "layer {i}: weight {:?} / bias {:?} are not a conv pair",
                            w.shape, b.shape
                        )));
                    }
                }
                Layer::Concat { skip } if skip > i => {
                    return Err(Error::invalid(format!("layer {i} concatenates future activation {skip}")));
                }
                _ => {}
            }
        }
        Ok(Self { layers, params })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[ParamTensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ParamTensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
            p.grad_ready = false;
        }
    }

    pub fn cast<U: Scalar>(&self) -> Graph<U> {
        Graph {
            layers: self.layers.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
        }
    }

    fn apply(&self, i: usize, x: &Tensor4<T>, acts: &[Option<Tensor4<T>>]) -> Result<Tensor4<T>> {
        let y = match self.layers[i] {
            Layer::Conv { weight, bias, relu: r, .. } => {
                let w = &self.params[weight];
                let y = conv2d_raw(x, &w.value, w.kernel_shape(), &self.params[bias].value)?;
                if r {
                    relu(&y)
                } else {
                    y
                }
            }
            Layer::MaxPool => maxpool2(x)?,
            Layer::Upsample => upsample2(x),
            Layer::Concat { skip } => {
                let s = acts[skip]
                    .as_ref()
                    .ok_or_else(|| Error::InvalidState(format!("activation {skip} was released")))?;
                concat_channels(x, s)?
            }
        };
        scan(&y, "activation", i)?;
        Ok(y)
    }

    /// Inference pass; activations are released after their last use.
    pub fn forward(&self, input: &Tensor4<T>) -> Result<Tensor4<T>> {
        let n = self.layers.len();
        let mut last_use: Vec<usize> = (0..=n).collect();
        for (i, l) in self.layers.iter().enumerate() {
            if let Layer::Concat { skip } = *l {
                last_use[skip] = last_use[skip].max(i);
            }
        }
        let mut acts: Vec<Option<Tensor4<T>>> = vec![None; n + 1];
        acts[0] = Some(input.clone());
        for i in 0..n {
            let x = acts[i].as_ref().expect("input of the current layer is live");
            let y = self.apply(i, x, &acts)?;
            acts[i + 1] = Some(y);
            for (j, a) in acts.iter_mut().enumerate().take(i + 1) {
                if last_use[j] <= i {
                    *a = None;
                }
            }
        }
        Ok(acts[n].take().expect("final activation"))
    }

    /// Forward pass that keeps every activation for [`Graph::backward`].
    pub fn forward_trace(&self, input: &Tensor4<T>) -> Result<Trace<T>> {
        let mut acts: Vec<Option<Tensor4<T>>> = Vec::with_capacity(self.layers.len() + 1);
        acts.push(Some(input.clone()));
        for i in 0..self.layers.len() {
            let y = self.apply(i, acts[i].as_ref().expect("kept"), &acts)?;
            acts.push(Some(y));
        }
        Ok(Trace {
            acts: acts.into_iter().map(|a| a.expect("kept")).collect(),
        })
    }

    /// Back-propagates `grad_output` through the traced pass, accumulating
    /// parameter gradients, and returns the gradient w.r.t. the input.
    pub fn backward(&mut self, trace: &Trace<T>, grad_output: &Tensor4<T>) -> Result<Tensor4<T>> {
        let n = self.layers.len();
        if trace.acts.len() != n + 1 {
            return Err(Error::invalid("trace does not belong to this graph"));
        }
        if grad_output.shape() != trace.output().shape() {
            return Err(Error::invalid(format!(
                "output gradient {:?} does not match output {:?}",
                grad_output.shape(),
                trace.output().shape()
            )));
        }
        let mut pending: Vec<Option<Tensor4<T>>> = vec![None; n + 1];
        let mut g = grad_output.clone();
        for i in (0..n).rev() {
            if let Some(p) = pending[i + 1].take() {
                add_into(&mut g, &p);
            }
            g = match self.layers[i] {
                Layer::Conv { weight, bias, relu: r, .. } => {
                    if r {
                        g = relu_backward(&trace.acts[i + 1], &g)?;
                    }
                    let w = &self.params[weight];
                    let grads = conv2d_backward_raw(&trace.acts[i], &w.value, w.kernel_shape(), &g)?;
                    for (p, d) in [(weight, &grads.weight), (bias, &grads.bias)] {
                        let p = &mut self.params[p];
                        for (a, &v) in p.grad.iter_mut().zip(d.iter()) {
                            *a += v;
                        }
                        p.grad_ready = true;
                    }
                    grads.input
                }
                Layer::MaxPool => maxpool2_backward(&trace.acts[i], &g)?,
                Layer::Upsample => upsample2_backward(&g)?,
                Layer::Concat { skip } => {
                    let (main, side) = concat_backward(&g, trace.acts[i].channels())?;
                    match &mut pending[skip] {
                        Some(p) => add_into(p, &side),
                        slot => *slot = Some(side),
                    }
                    main
                }
            };
            scan(&g, "gradient", i)?;
        }
        if let Some(p) = pending[0].take() {
            add_into(&mut g, &p);
        }
        for p in &self.params {
            if p.grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient for `{}`", p.name)));
            }
        }
        Ok(g)
    }
}

fn add_into<T: Scalar>(acc: &mut Tensor4<T>, other: &Tensor4<T>) {
    debug_assert_eq!(acc.shape(), other.shape());
    for (a, &b) in acc.data_mut().iter_mut().zip(other.data()) {
        *a += b;
    }
}
