//! Transposed-convolution generator from the `h × w × C2d` view-feature map
//! to an `H × W × 3` image. Rectifiers sit between stages; the last stage is
//! linear and its output is clamped to `[0, 1]` only inside the loss.
//!
//! The full preset uses `pad = out_pad = 1` on every stage, which are the
//! small values that land the stages on 28, 56, 112 and 224 from a 7×7 map.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ndcompute::{uniform_tensor, ParamSet, Real, Tape, Tensor, Var};

pub const PREFIX: &str = "decoder";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stage {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl Stage {
    pub const fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, pad: usize, out_pad: usize) -> Self {
        Self {
            c_in,
            c_out,
            kernel,
            stride,
            pad,
            out_pad,
        }
    }

    fn out_extent(&self, n: usize) -> Option<usize> {
        let v = (n as i64 - 1) * self.stride as i64 - 2 * self.pad as i64 + self.kernel as i64 + self.out_pad as i64;
        (v > 0).then_some(v as usize)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub stages: Vec<Stage>,
    /// Initial bias of the output stage; mid-gray keeps early predictions
    /// inside the clamp range.
    pub output_bias: f64,
}

impl DecoderConfig {
    /// 7×7×256 → 224×224×3.
    pub fn full() -> Self {
        Self {
            stages: vec![
                Stage::new(256, 128, 5, 4, 1, 1),
                Stage::new(128, 64, 3, 2, 1, 1),
                Stage::new(64, 32, 3, 2, 1, 1),
                Stage::new(32, 3, 3, 2, 1, 1),
            ],
            output_bias: 0.5,
        }
    }

    /// 4×4×128 → 32×32×3.
    pub fn desk() -> Self {
        Self {
            stages: vec![
                Stage::new(128, 64, 3, 2, 1, 1),
                Stage::new(64, 32, 3, 2, 1, 1),
                Stage::new(32, 16, 3, 2, 1, 1),
                Stage::new(16, 3, 3, 1, 1, 0),
            ],
            output_bias: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let Some(last) = self.stages.last() else {
            return Err(Error::config("decoder needs at least one stage"));
        };
        for pair in self.stages.windows(2) {
            if pair[0].c_out != pair[1].c_in {
                return Err(Error::config(format!(
                    "decoder stage outputs {} channels but the next expects {}",
                    pair[0].c_out, pair[1].c_in
                )));
            }
        }
        if last.c_out != 3 {
            return Err(Error::config(format!("decoder must end in 3 channels, not {}", last.c_out)));
        }
        if self.stages.iter().any(|s| s.kernel == 0 || s.stride == 0) {
            return Err(Error::config("decoder kernels and strides must be positive"));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.stages[0].c_in
    }

    /// Spatial extents after every stage, starting from `(h, w)`.
    pub fn stage_dims(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        let mut dims = Vec::with_capacity(self.stages.len());
        let (mut ch, mut cw) = (h, w);
        for (i, s) in self.stages.iter().enumerate() {
            match (s.out_extent(ch), s.out_extent(cw)) {
                (Some(a), Some(b)) => (ch, cw) = (a, b),
                _ => return Err(Error::config(format!("decoder stage {i} has no valid output for {ch}x{cw}"))),
            }
            dims.push((ch, cw));
        }
        Ok(dims)
    }

    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok(*self.stage_dims(h, w)?.last().expect("validated"))
    }
}

pub fn init_params<T: Real>(params: &mut ParamSet<T>, cfg: &DecoderConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    cfg.validate()?;
    let last = cfg.stages.len() - 1;
    for (i, s) in cfg.stages.iter().enumerate() {
        // each output cell sums roughly c_in·⌈k/s⌉² products
        let taps = s.kernel.div_ceil(s.stride).pow(2);
        let fan = (s.c_in * taps) as f64;
        let gain = if i == last { 3.0 } else { 6.0 };
        params.insert(
            format!("{PREFIX}.{i}.kernel"),
            uniform_tensor(&[s.kernel, s.kernel, s.c_in, s.c_out], (gain / fan).sqrt(), rng),
        )?;
        let bias = if i == last { cfg.output_bias } else { 0.0 };
        params.insert(format!("{PREFIX}.{i}.bias"), Tensor::full(&[s.c_out], T::from_f64_lossy(bias)))?;
    }
    Ok(())
}

/// `fmap[h, w, C]` → image `[H, W, 3]`, unclamped.
pub fn decode<T: Real>(tape: &mut Tape<T>, params: &ParamSet<T>, cfg: &DecoderConfig, fmap: Var) -> Result<Var> {
    cfg.validate()?;
    match tape.shape(fmap) {
        &[_, _, c] if c == cfg.in_channels() => {}
        s => {
            return Err(Error::config(format!(
                "decoder expects [h, w, {}] input, got {s:?}",
                cfg.in_channels()
            )))
        }
    }
    let last = cfg.stages.len() - 1;
    let mut x = fmap;
    for (i, s) in cfg.stages.iter().enumerate() {
        let kernel = tape.param(params, &format!("{PREFIX}.{i}.kernel"))?;
        let bias = tape.param(params, &format!("{PREFIX}.{i}.bias"))?;
        x = tape
            .tconv2d(x, kernel, s.stride, s.pad, s.out_pad)
            .map_err(|e| Error::config(format!("decoder stage {i}: {e}")))?;
        x = tape.add_bias(x, bias)?;
        if i < last {
            x = tape.relu(x);
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::ndcompute::{grad_check, GradCheckConfig};

    #[test]
    fn full_preset_reaches_224() {
        let cfg = DecoderConfig::full();
        assert_eq!(cfg.stage_dims(7, 7).unwrap(), vec![(28, 28), (56, 56), (112, 112), (224, 224)]);
        assert_eq!(cfg.output_dims(7, 7).unwrap().0 / 7, 32);
        assert_eq!(DecoderConfig::desk().stage_dims(4, 4).unwrap(), vec![(8, 8), (16, 16), (32, 32), (32, 32)]);
    }

    #[test]
    fn desk_forward_shape_and_zero_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = DecoderConfig::desk();
        let mut params = ParamSet::<f32>::new();
        init_params(&mut params, &cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let fmap = tape.leaf(uniform_tensor(&[4, 4, 128], 1.0, &mut rng));
        let img = decode(&mut tape, &params, &cfg, fmap).unwrap();
        assert_eq!(tape.shape(img), &[32, 32, 3]);

        for (_, t) in params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let fmap = tape.leaf(uniform_tensor(&[4, 4, 128], 1.0, &mut rng));
        let img = decode(&mut tape, &params, &cfg, fmap).unwrap();
        assert!(tape.value(img).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn chain_errors() {
        let mut cfg = DecoderConfig::desk();
        cfg.stages[1].c_in = 65;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = DecoderConfig::desk();
        cfg.stages[3].c_out = 4;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let cfg = DecoderConfig::desk();
        let mut params = ParamSet::<f64>::new();
        init_params(&mut params, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut tape = Tape::new();
        let fmap = tape.leaf(Tensor::zeros(&[4, 4, 64]));
        assert!(matches!(decode(&mut tape, &params, &cfg, fmap), Err(Error::Config(_))));
    }

    #[test]
    fn gradients_wrt_input_and_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = DecoderConfig {
            stages: vec![Stage::new(4, 3, 3, 2, 1, 1), Stage::new(3, 3, 3, 1, 1, 0)],
            output_bias: 0.5,
        };
        let mut params = ParamSet::<f64>::new();
        init_params(&mut params, &cfg, &mut rng).unwrap();
        params.get_mut("decoder.0.bias").unwrap().data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.2..0.2));
        // treat the feature map as a parameter so its gradient is checked too
        params.insert("fmap", uniform_tensor(&[3, 3, 4], 1.0, &mut rng)).unwrap();
        let head: Tensor<f64> = uniform_tensor(&[6, 6, 3], 1.0, &mut rng);
        let f = |tape: &mut Tape<f64>, p: &ParamSet<f64>| {
            let fmap = tape.param(p, "fmap")?;
            let img = decode(tape, p, &cfg, fmap)?;
            let h = tape.leaf(head.clone());
            let prod = tape.mul(img, h)?;
            Ok(tape.sum_all(prod))
        };
        let report = grad_check(f, &params, &GradCheckConfig::default()).unwrap();
        assert!(report.max_rel_err < 1e-5, "{:?}", report.worst);
    }
}
