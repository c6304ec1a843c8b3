//! Minimal tensor/autodiff engine used by the VAE, the conditioner and the
//! denoiser. Everything runs in f64 on the CPU, single-threaded, so results
//! are bit-for-bit reproducible.

mod adam;
mod gradcheck;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{gradient_check, GradCheck};
pub use graph::{Bound, Gradients, Graph, Var};
pub use kernels::{conv2d_forward, Conv2dSpec};
pub use params::{
    load_checkpoint, save_checkpoint, CheckpointMeta, Init, ParamSpec, ParamStore, SCHEMA_VERSION,
};
pub use tensor::Tensor;

/// Declares a conv layer `prefix.w` / `prefix.b`.
pub fn conv_specs(prefix: &str, cin: usize, cout: usize, kh: usize, kw: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(
            format!("{prefix}.w"),
            &[cout, cin, kh, kw],
            Init::HeUniform {
                fan_in: cin * kh * kw,
                gain: 1.0,
            },
        ),
        ParamSpec::new(format!("{prefix}.b"), &[cout], Init::Zeros),
    ]
}

/// Like [`conv_specs`] but zero-initialised, for residual output layers.
pub fn zero_conv_specs(prefix: &str, cin: usize, cout: usize, kh: usize, kw: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.w"), &[cout, cin, kh, kw], Init::Zeros),
        ParamSpec::new(format!("{prefix}.b"), &[cout], Init::Zeros),
    ]
}

/// Declares a dense layer `prefix.w` [in, out] / `prefix.b` [1, out].
pub fn linear_specs(prefix: &str, cin: usize, cout: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(
            format!("{prefix}.w"),
            &[cin, cout],
            Init::HeUniform {
                fan_in: cin,
                gain: 1.0,
            },
        ),
        ParamSpec::new(format!("{prefix}.b"), &[1, cout], Init::Zeros),
    ]
}

pub fn conv(g: &mut Graph, p: &Bound, prefix: &str, x: Var, spec: Conv2dSpec) -> Var {
    let w = p.get(&format!("{prefix}.w"));
    let b = p.get(&format!("{prefix}.b"));
    g.conv2d(x, w, Some(b), spec)
}

pub fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Var {
    let w = p.get(&format!("{prefix}.w"));
    let b = p.get(&format!("{prefix}.b"));
    let y = g.matmul(x, w);
    g.add(y, b)
}
