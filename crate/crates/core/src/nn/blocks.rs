//! Conv/linear blocks and the feature-statistics helpers shared by the
//! generator, encoders and SR network.

use super::init::Init;
use super::vars::Scope;
use crate::error::Result;
use candle_core::{Tensor, Var};

#[derive(Clone)]
pub struct Linear {
    pub w: Var,
    pub b: Option<Var>,
}

impl Linear {
    pub fn new(scope: &Scope, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let w = scope.param("w", &[out_dim, in_dim], Init::Fan { fan_in: in_dim, gain: 1.0 })?;
        let b = if bias { Some(scope.param("b", &[out_dim], Init::Zeros)?) } else { None };
        Ok(Self { w, b })
    }

    /// `x`: `(.., in_dim)` -> `(.., out_dim)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().expect("linear input rank >= 1");
        let flat = x.reshape(((), in_dim))?;
        let mut y = flat.matmul(&self.w.as_tensor().t()?)?;
        if let Some(b) = &self.b {
            y = y.broadcast_add(b.as_tensor())?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().expect("rank") = self.w.dims()[0];
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Clone)]
pub struct Conv2d {
    pub w: Var,
    pub b: Option<Var>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        scope: &Scope,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let w = scope.param(
            "w",
            &[out_ch, in_ch, k, k],
            Init::Fan { fan_in: in_ch * k * k, gain: 1.0 },
        )?;
        let b = Some(scope.param("b", &[out_ch], Init::Zeros)?);
        Ok(Self { w, b, stride, padding })
    }

    pub fn no_bias(
        scope: &Scope,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let w = scope.param(
            "w",
            &[out_ch, in_ch, k, k],
            Init::Fan { fan_in: in_ch * k * k, gain: 1.0 },
        )?;
        Ok(Self { w, b: None, stride, padding })
    }

    /// Zero-initialized conv (identity-like residual/SFT heads).
    pub fn zeroed(
        scope: &Scope,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let w = scope.param("w", &[out_ch, in_ch, k, k], Init::Zeros)?;
        let b = Some(scope.param("b", &[out_ch], Init::Zeros)?);
        Ok(Self { w, b, stride, padding })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.conv2d(self.w.as_tensor(), self.padding, self.stride, 1, 1)?;
        if let Some(b) = &self.b {
            y = y.broadcast_add(&b.as_tensor().reshape((1, (), 1, 1))?)?;
        }
        Ok(y)
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * slope)?)?)
}

/// Nearest-neighbor 2x upsample built from broadcast + reshape (both have
/// well-defined gradients).
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let y = x
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?;
    Ok(y.contiguous()?)
}

/// Per-(batch, channel) spatial mean and standard deviation.
pub fn instance_stats(x: &Tensor, eps: f64) -> Result<(Tensor, Tensor)> {
    let (b, c, _h, _w) = x.dims4()?;
    let mean = x.mean_keepdim(3)?.mean_keepdim(2)?; // (b, c, 1, 1)
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(3)?.mean_keepdim(2)?;
    let std = (var + eps)?.sqrt()?;
    Ok((mean.reshape((b, c, 1, 1))?, std.reshape((b, c, 1, 1))?))
}

/// Re-statistic `content` to match `target`'s per-channel mean/std.
/// When the channel counts differ, every content channel is mapped onto
/// the target's channel-pooled mean/std instead.
pub fn adain(content: &Tensor, target: &Tensor, eps: f64) -> Result<Tensor> {
    let (c_mean, c_std) = instance_stats(content, eps)?;
    let normalized = content.broadcast_sub(&c_mean)?.broadcast_div(&c_std)?;
    if content.dims()[1] == target.dims()[1] {
        let (t_mean, t_std) = instance_stats(target, eps)?;
        Ok(normalized.broadcast_mul(&t_std)?.broadcast_add(&t_mean)?)
    } else {
        let (t_mean, t_std) = global_stats(target, eps)?;
        Ok(normalized.broadcast_mul(&t_std)?.broadcast_add(&t_mean)?)
    }
}

/// Per-batch mean and std pooled over channels and space: `(B, 1, 1, 1)`.
pub fn global_stats(x: &Tensor, eps: f64) -> Result<(Tensor, Tensor)> {
    let (b, _c, _h, _w) = x.dims4()?;
    let flat = x.reshape((b, ()))?;
    let mean = flat.mean_keepdim(1)?;
    let var = flat.broadcast_sub(&mean)?.sqr()?.mean_keepdim(1)?;
    let std = (var + eps)?.sqrt()?;
    Ok((mean.reshape((b, 1, 1, 1))?, std.reshape((b, 1, 1, 1))?))
}

/// Style-modulated 3x3 convolution (weight demodulation folded into input
/// and output scaling, which is algebraically identical to per-sample
/// kernel modulation for groups-free conv).
#[derive(Clone)]
pub struct ModConv {
    pub w: Var,
    pub b: Var,
    pub style: Linear,
    pub demodulate: bool,
    pub padding: usize,
}

impl ModConv {
    pub fn new(scope: &Scope, in_ch: usize, out_ch: usize, k: usize, w_dim: usize) -> Result<Self> {
        let w = scope.param(
            "w",
            &[out_ch, in_ch, k, k],
            Init::Fan { fan_in: in_ch * k * k, gain: 1.0 },
        )?;
        let b = scope.param("b", &[out_ch], Init::Zeros)?;
        let style_scope = scope.sub("style");
        let style = Linear::new(&style_scope, w_dim, in_ch, true)?;
        Ok(Self { w, b, style, demodulate: true, padding: k / 2 })
    }

    /// `x`: `(B, Cin, H, W)`, `w_latent`: `(B, w_dim)`.
    pub fn forward(&self, x: &Tensor, w_latent: &Tensor) -> Result<Tensor> {
        let (bsz, in_ch, _, _) = x.dims4()?;
        // Styles offset to 1 so a zero linear output is the identity.
        let s = (self.style.forward(w_latent)? + 1.0)?; // (B, Cin)
        let xs = x.broadcast_mul(&s.reshape((bsz, in_ch, 1, 1))?)?;
        let mut y = xs.conv2d(self.w.as_tensor(), self.padding, 1, 1, 1)?;
        if self.demodulate {
            // d[b, o] = 1 / sqrt(sum_i s[b,i]^2 * sum_k w[o,i,k]^2 + eps)
            let k2 = self.w.as_tensor().sqr()?.sum(3)?.sum(2)?; // (Cout, Cin)
            let d = s.sqr()?.matmul(&k2.t()?)?; // (B, Cout)
            let d = (d + 1e-8)?.sqrt()?.recip()?;
            let (_, out_ch, _, _) = y.dims4()?;
            y = y.broadcast_mul(&d.reshape((bsz, out_ch, 1, 1))?)?;
        }
        y = y.broadcast_add(&self.b.as_tensor().reshape((1, (), 1, 1))?)?;
        Ok(y)
    }
}

/// Residual block: x + conv(lrelu(conv(x))) * scale.
#[derive(Clone)]
pub struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    pub fn new(scope: &Scope, ch: usize) -> Result<Self> {
        let conv1 = Conv2d::new(&scope.sub("conv1"), ch, ch, 3, 1, 1)?;
        let conv2 = Conv2d::new(&scope.sub("conv2"), ch, ch, 3, 1, 1)?;
        Ok(Self { conv1, conv2 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(x)?.relu()?;
        let h = self.conv2.forward(&h)?;
        Ok((x + (h * 0.5)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init::randn_tensor;
    use crate::nn::{device, ParamStore};

    #[test]
    fn upsample2x_repeats_pixels() {
        let dev = device();
        let x = Tensor::from_vec(vec![1.0f32, 2.0, 3.0, 4.0], (1, 1, 2, 2), &dev).unwrap();
        let y = upsample2x(&x).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v, vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]);
    }

    #[test]
    fn adain_matches_target_statistics() {
        let dev = device();
        let mut rng = crate::nn::init::rng_for(0, "adain");
        let content = randn_tensor(&mut rng, &[2, 3, 8, 8], &dev).unwrap();
        let target = ((randn_tensor(&mut rng, &[2, 3, 8, 8], &dev).unwrap() * 2.0).unwrap() + 1.5).unwrap();
        let out = adain(&content, &target, 1e-5).unwrap();
        let (om, os) = instance_stats(&out, 0.0).unwrap();
        let (tm, ts) = instance_stats(&target, 0.0).unwrap();
        let dm = (om - tm).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        let ds = (os - ts).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(dm < 1e-5, "mean diff {dm}");
        assert!(ds < 1e-4, "std diff {ds}");
    }

    #[test]
    fn mod_conv_matches_explicit_kernel_modulation() {
        // The folded implementation must equal building the per-sample
        // modulated+demodulated kernel explicitly.
        let dev = device();
        let store = ParamStore::new(9);
        let scope = store.root().sub("mc");
        let mc = ModConv::new(&scope, 3, 5, 3, 8).unwrap();
        let mut rng = crate::nn::init::rng_for(1, "mc.x");
        let x = randn_tensor(&mut rng, &[2, 3, 6, 6], &dev).unwrap();
        let wl = randn_tensor(&mut rng, &[2, 8], &dev).unwrap();
        let fast = mc.forward(&x, &wl).unwrap();

        let s = (mc.style.forward(&wl).unwrap() + 1.0).unwrap().to_vec2::<f32>().unwrap();
        let w = mc.w.as_tensor().to_vec1_flat();
        let dims = mc.w.dims().to_vec();
        let (oc, ic, k) = (dims[0], dims[1], dims[2]);
        let mut outs = Vec::new();
        for b in 0..2 {
            let mut wmod = vec![0.0f32; oc * ic * k * k];
            for o in 0..oc {
                for i in 0..ic {
                    for t in 0..k * k {
                        wmod[(o * ic + i) * k * k + t] = w[(o * ic + i) * k * k + t] * s[b][i];
                    }
                }
            }
            for o in 0..oc {
                let sum: f32 = (0..ic * k * k).map(|j| wmod[o * ic * k * k + j].powi(2)).sum();
                let d = 1.0 / (sum + 1e-8).sqrt();
                for j in 0..ic * k * k {
                    wmod[o * ic * k * k + j] *= d;
                }
            }
            let wt = Tensor::from_vec(wmod, (oc, ic, k, k), &dev).unwrap();
            let xb = x.narrow(0, b, 1).unwrap();
            let y = xb.conv2d(&wt, 1, 1, 1, 1).unwrap();
            outs.push(y);
        }
        let slow = Tensor::cat(&outs, 0).unwrap();
        let slow = slow
            .broadcast_add(&mc.b.as_tensor().reshape((1, oc, 1, 1)).unwrap())
            .unwrap();
        let diff = (fast - slow).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff < 1e-5, "diff={diff}");
    }

    trait FlatVec {
        fn to_vec1_flat(&self) -> Vec<f32>;
    }
    impl FlatVec for Tensor {
        fn to_vec1_flat(&self) -> Vec<f32> {
            self.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        }
    }
}
