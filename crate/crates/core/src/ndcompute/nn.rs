use super::params::ParamSet;
use super::tape::{Tape, Var};
use super::tensor::Real;
use crate::error::{Error, Result};

/// `x · W + b` using `{prefix}.weight` / `{prefix}.bias`.
pub fn linear<T: Real>(tape: &mut Tape<T>, params: &ParamSet<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(params, &format!("{prefix}.weight"))?;
    let b = tape.param(params, &format!("{prefix}.bias"))?;
    let h = tape.matmul(x, w)?;
    tape.add_bias(h, b)
}

/// Multi-layer perceptron over the rows of `x`: affine + rectifier on every
/// hidden layer, affine only on the last. `dims` lists all widths including
/// input and output, and must agree with the stored weights.
pub fn mlp_forward<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
    prefix: &str,
    dims: &[usize],
    x: Var,
) -> Result<Var> {
    if dims.len() < 2 {
        return Err(Error::config(format!("mlp `{prefix}` needs at least two widths")));
    }
    let layers = dims.len() - 1;
    let mut h = x;
    for (i, w) in dims.windows(2).enumerate() {
        let name = format!("{prefix}.{i}.weight");
        let shape = params.get(&name)?.shape();
        if shape != [w[0], w[1]] {
            return Err(Error::config(format!(
                "`{name}` has shape {shape:?}, expected [{}, {}]",
                w[0], w[1]
            )));
        }
        h = linear(tape, params, &format!("{prefix}.{i}"), h)?;
        if i + 1 < layers {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Layer normalization using `{prefix}.gain` / `{prefix}.shift`.
pub fn norm<T: Real>(tape: &mut Tape<T>, params: &ParamSet<T>, prefix: &str, x: Var) -> Result<Var> {
    let g = tape.param(params, &format!("{prefix}.gain"))?;
    let s = tape.param(params, &format!("{prefix}.shift"))?;
    tape.layer_norm(x, g, s)
}
