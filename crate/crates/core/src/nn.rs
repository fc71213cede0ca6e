//! Shared parameter containers and initialization.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{DType, Padding, Tensor};

fn he_uniform(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let limit = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
}

/// Kernel + bias of one 2-D convolution layer.
#[derive(Clone)]
pub struct ConvParams {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    /// He-uniform fan-in kernel, zero bias.
    pub fn init(
        rng: &mut ChaCha8Rng,
        kh: usize,
        kw: usize,
        cin: usize,
        cout: usize,
        dtype: DType,
    ) -> Result<ConvParams> {
        let kernel = Tensor::param(
            vec![kh, kw, cin, cout],
            he_uniform(rng, kh * kw * cin * cout, kh * kw * cin),
            dtype,
        )?;
        let bias = Tensor::param(vec![cout], vec![0.0; cout], dtype)?;
        Ok(ConvParams { kernel, bias })
    }

    pub fn zeros(kh: usize, kw: usize, cin: usize, cout: usize, dtype: DType) -> Result<ConvParams> {
        Ok(ConvParams {
            kernel: Tensor::param(vec![kh, kw, cin, cout], vec![0.0; kh * kw * cin * cout], dtype)?,
            bias: Tensor::param(vec![cout], vec![0.0; cout], dtype)?,
        })
    }

    pub fn apply(&self, x: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
        x.conv2d(&self.kernel, &self.bias, stride, padding)
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[3]
    }

    pub fn collect_named(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.kernel"), self.kernel.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Weight + bias of a linear layer on the last dim.
#[derive(Clone)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    pub fn init(rng: &mut ChaCha8Rng, cin: usize, cout: usize, dtype: DType) -> Result<LinearParams> {
        Ok(LinearParams {
            weight: Tensor::param(vec![cin, cout], he_uniform(rng, cin * cout, cin), dtype)?,
            bias: Tensor::param(vec![cout], vec![0.0; cout], dtype)?,
        })
    }

    pub fn zeros(cin: usize, cout: usize, dtype: DType) -> Result<LinearParams> {
        Ok(LinearParams {
            weight: Tensor::param(vec![cin, cout], vec![0.0; cin * cout], dtype)?,
            bias: Tensor::param(vec![cout], vec![0.0; cout], dtype)?,
        })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.linear(&self.weight, &self.bias)
    }

    pub fn collect_named(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}
