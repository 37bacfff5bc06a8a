//! Parameterized building blocks.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::Element;

/// Square-kernel convolution with "same" padding.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl Conv {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(Error::Config(format!("{name}: kernel size must be odd, got {k}")));
        }
        let weight = store.add(format!("{name}.weight"), vec![cout, cin, k, k], Init::FanIn(cin * k * k))?;
        let bias = store.add(format!("{name}.bias"), vec![cout], Init::Const(0.0))?;
        Ok(Conv {
            weight,
            bias,
            cin,
            cout,
            k,
        })
    }

    pub fn param_count(cin: usize, cout: usize, k: usize) -> usize {
        cin * cout * k * k + cout
    }

    pub fn forward<T: Element>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.weight), p.var(self.bias), self.k / 2)
    }
}

/// Dense layer over the last axis; the weight is stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), vec![fan_in, fan_out], Init::FanIn(fan_in))?;
        let bias = store.add(format!("{name}.bias"), vec![fan_out], Init::Const(0.0))?;
        Ok(Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn param_count(fan_in: usize, fan_out: usize) -> usize {
        fan_in * fan_out + fan_out
    }

    pub fn forward<T: Element>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let dims = g.dims(x);
        let last = *dims.last().expect("dims");
        if last != self.fan_in {
            return Err(Error::shape("linear", &dims, &[self.fan_in, self.fan_out]));
        }
        let rows = dims.iter().product::<usize>() / last;
        let flat = g.reshape(x, vec![rows, last])?;
        let y = g.matmul(flat, p.var(self.weight))?;
        let y = g.add(y, p.var(self.bias))?;
        let mut out = dims;
        *out.last_mut().expect("dims") = self.fan_out;
        g.reshape(y, out)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, c: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), vec![c], Init::Const(1.0))?;
        let beta = store.add(format!("{name}.beta"), vec![c], Init::Const(0.0))?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn param_count(c: usize) -> usize {
        2 * c
    }

    pub fn forward<T: Element>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta), Self::EPS)
    }
}
