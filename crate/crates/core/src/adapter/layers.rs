//! Layer primitives with analytic backward passes.
//!
//! All tensors are `f64` in standard layout; activations carry a `[F, C, H, W]`
//! shape. Backward methods accumulate parameter gradients into a same-typed
//! gradient container and return the gradient with respect to the layer input.

use ndarray::{Array1, Array2, Array3, Array4};
use rand::Rng;

use crate::{Error, Result};

/// Flat parameter access shared by layers, networks, the optimizer, and the
/// checkpoint writer. Traversal order is fixed by the implementation and is
/// the contract for optimizer state and serialized blobs.
pub trait ParamTensors {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));
    fn named_shapes(&self) -> Vec<(String, Vec<usize>)>;

    fn n_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, s| n += s.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.visit(&mut |_, s| out.extend_from_slice(s));
        out
    }

    fn load_flat(&mut self, data: &[f64]) -> Result<()> {
        let expect = self.n_params();
        if data.len() != expect {
            return Err(Error::Argument(format!(
                "flat parameter vector has {} values, expected {expect}",
                data.len()
            )));
        }
        let mut pos = 0;
        self.visit_mut(&mut |_, s| {
            s.copy_from_slice(&data[pos..pos + s.len()]);
            pos += s.len();
        });
        Ok(())
    }
}

/// Clone a parameter container and zero every tensor, for use as a gradient
/// accumulator.
pub fn zeroed<P: ParamTensors + Clone>(p: &P) -> P {
    let mut q = p.clone();
    q.visit_mut(&mut |_, s| s.fill(0.0));
    q
}

/// 2D convolution over the spatial axes, applied to each frame independently.
/// Weight layout `[C_out, C_in, K, K]`, zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Array4<f64>,
    pub b: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (1.0 / (c_in * k * k) as f64).sqrt();
        Conv2d {
            w: Array4::from_shape_simple_fn((c_out, c_in, k, k), || rng.gen_range(-bound..bound)),
            b: Array1::zeros(c_out),
            stride,
            pad,
        }
    }

    /// All-zero weights and biases; the output is identically zero until the
    /// first optimizer update.
    pub fn zero_init(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            w: Array4::zeros((c_out, c_in, k, k)),
            b: Array1::zeros(c_out),
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.w.dim().2;
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (nf, c_in, h, w) = x.dim();
        let (c_out, c_in_w, k, _) = self.w.dim();
        assert_eq!(c_in, c_in_w, "conv input channel mismatch");
        let (s, p) = (self.stride, self.pad);
        let (ho, wo) = self.out_hw(h, w);
        let mut out = Array4::zeros((nf, c_out, ho, wo));
        let xs = x.as_slice().expect("standard layout");
        let ws = self.w.as_slice().expect("standard layout");
        let os = out.as_slice_mut().expect("standard layout");
        for f in 0..nf {
            for oc in 0..c_out {
                let obase = (f * c_out + oc) * ho * wo;
                os[obase..obase + ho * wo].fill(self.b[oc]);
                for ic in 0..c_in {
                    let xbase = (f * c_in + ic) * h * w;
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = ws[((oc * c_in + ic) * k + ky) * k + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let ox_lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
                            let ox_hi = ((w + p - kx).div_ceil(s)).min(wo);
                            for oy in 0..ho {
                                let iy = (oy * s + ky) as isize - p as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = xbase + iy as usize * w;
                                let orow = obase + oy * wo;
                                for ox in ox_lo..ox_hi {
                                    os[orow + ox] += wv * xs[xrow + ox * s + kx - p];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulate parameter gradients into `grad` and return the input
    /// gradient.
    pub fn backward(&self, x: &Array4<f64>, gout: &Array4<f64>, grad: &mut Conv2d) -> Array4<f64> {
        let (nf, c_in, h, w) = x.dim();
        let (c_out, _, k, _) = self.w.dim();
        let (s, p) = (self.stride, self.pad);
        let (ho, wo) = self.out_hw(h, w);
        assert_eq!(gout.dim(), (nf, c_out, ho, wo), "conv output grad shape");
        let mut gin = Array4::zeros((nf, c_in, h, w));
        let xs = x.as_slice().expect("standard layout");
        let gs = gout.as_slice().expect("standard layout");
        let ws = self.w.as_slice().expect("standard layout");
        let gw = grad.w.as_slice_mut().expect("standard layout");
        let gi = gin.as_slice_mut().expect("standard layout");
        for f in 0..nf {
            for oc in 0..c_out {
                let obase = (f * c_out + oc) * ho * wo;
                grad.b[oc] += gs[obase..obase + ho * wo].iter().sum::<f64>();
                for ic in 0..c_in {
                    let xbase = (f * c_in + ic) * h * w;
                    for ky in 0..k {
                        for kx in 0..k {
                            let widx = ((oc * c_in + ic) * k + ky) * k + kx;
                            let wv = ws[widx];
                            let mut acc = 0.0;
                            let ox_lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
                            let ox_hi = ((w + p - kx).div_ceil(s)).min(wo);
                            for oy in 0..ho {
                                let iy = (oy * s + ky) as isize - p as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = xbase + iy as usize * w;
                                let orow = obase + oy * wo;
                                for ox in ox_lo..ox_hi {
                                    let g = gs[orow + ox];
                                    let ix = xrow + ox * s + kx - p;
                                    acc += g * xs[ix];
                                    gi[ix] += wv * g;
                                }
                            }
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
        gin
    }
}

impl ParamTensors for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("w", self.w.as_slice().expect("standard layout"));
        f("b", self.b.as_slice().expect("standard layout"));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("w", self.w.as_slice_mut().expect("standard layout"));
        f("b", self.b.as_slice_mut().expect("standard layout"));
    }

    fn named_shapes(&self) -> Vec<(String, Vec<usize>)> {
        vec![
            ("w".into(), self.w.shape().to_vec()),
            ("b".into(), self.b.shape().to_vec()),
        ]
    }
}

/// 1D convolution over the frame axis with zero padding, shared across all
/// spatial positions. Weight layout `[C_out, C_in, K]` with odd `K`.
#[derive(Debug, Clone)]
pub struct TemporalConv {
    pub w: Array3<f64>,
    pub b: Array1<f64>,
}

impl TemporalConv {
    pub fn new<R: Rng>(c_in: usize, c_out: usize, k: usize, rng: &mut R) -> Self {
        assert!(k % 2 == 1, "temporal kernel must be odd");
        let bound = (1.0 / (c_in * k) as f64).sqrt();
        TemporalConv {
            w: Array3::from_shape_simple_fn((c_out, c_in, k), || rng.gen_range(-bound..bound)),
            b: Array1::zeros(c_out),
        }
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (nf, c_in, h, w) = x.dim();
        let (c_out, c_in_w, k) = self.w.dim();
        assert_eq!(c_in, c_in_w, "temporal conv channel mismatch");
        let off = k / 2;
        let mut out = Array4::zeros((nf, c_out, h, w));
        let plane = h * w;
        let xs = x.as_slice().expect("standard layout");
        let os = out.as_slice_mut().expect("standard layout");
        for f in 0..nf {
            for oc in 0..c_out {
                let obase = (f * c_out + oc) * plane;
                os[obase..obase + plane].fill(self.b[oc]);
                for kt in 0..k {
                    let sf = f as isize + kt as isize - off as isize;
                    if sf < 0 || sf >= nf as isize {
                        continue;
                    }
                    for ic in 0..c_in {
                        let wv = self.w[[oc, ic, kt]];
                        let xbase = (sf as usize * c_in + ic) * plane;
                        for i in 0..plane {
                            os[obase + i] += wv * xs[xbase + i];
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(
        &self,
        x: &Array4<f64>,
        gout: &Array4<f64>,
        grad: &mut TemporalConv,
    ) -> Array4<f64> {
        let (nf, c_in, h, w) = x.dim();
        let (c_out, _, k) = self.w.dim();
        let off = k / 2;
        assert_eq!(gout.dim(), (nf, c_out, h, w), "temporal output grad shape");
        let plane = h * w;
        let mut gin = Array4::zeros(x.dim());
        let xs = x.as_slice().expect("standard layout");
        let gs = gout.as_slice().expect("standard layout");
        let gi = gin.as_slice_mut().expect("standard layout");
        for f in 0..nf {
            for oc in 0..c_out {
                let obase = (f * c_out + oc) * plane;
                grad.b[oc] += gs[obase..obase + plane].iter().sum::<f64>();
                for kt in 0..k {
                    let sf = f as isize + kt as isize - off as isize;
                    if sf < 0 || sf >= nf as isize {
                        continue;
                    }
                    for ic in 0..c_in {
                        let wv = self.w[[oc, ic, kt]];
                        let xbase = (sf as usize * c_in + ic) * plane;
                        let mut acc = 0.0;
                        for i in 0..plane {
                            let g = gs[obase + i];
                            acc += g * xs[xbase + i];
                            gi[xbase + i] += wv * g;
                        }
                        grad.w[[oc, ic, kt]] += acc;
                    }
                }
            }
        }
        gin
    }
}

impl ParamTensors for TemporalConv {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("w", self.w.as_slice().expect("standard layout"));
        f("b", self.b.as_slice().expect("standard layout"));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("w", self.w.as_slice_mut().expect("standard layout"));
        f("b", self.b.as_slice_mut().expect("standard layout"));
    }

    fn named_shapes(&self) -> Vec<(String, Vec<usize>)> {
        vec![
            ("w".into(), self.w.shape().to_vec()),
            ("b".into(), self.b.shape().to_vec()),
        ]
    }
}

/// Per-channel affine modulation driven by a step-embedding vector:
/// `out = u * (1 + scale(phi)) + shift(phi)` with learned linear maps from
/// the embedding to per-channel scale and shift.
#[derive(Debug, Clone)]
pub struct EmbedAffine {
    pub w_scale: Array2<f64>,
    pub b_scale: Array1<f64>,
    pub w_shift: Array2<f64>,
    pub b_shift: Array1<f64>,
}

impl EmbedAffine {
    pub fn new<R: Rng>(channels: usize, embed_dim: usize, rng: &mut R) -> Self {
        let bound = (1.0 / embed_dim as f64).sqrt();
        let mut init =
            || Array2::from_shape_simple_fn((channels, embed_dim), || rng.gen_range(-bound..bound));
        EmbedAffine {
            w_scale: init(),
            b_scale: Array1::zeros(channels),
            w_shift: init(),
            b_shift: Array1::zeros(channels),
        }
    }

    pub fn scale_shift(&self, phi: &Array1<f64>) -> (Array1<f64>, Array1<f64>) {
        (
            &self.w_scale.dot(phi) + &self.b_scale,
            &self.w_shift.dot(phi) + &self.b_shift,
        )
    }

    pub fn forward(&self, u: &Array4<f64>, phi: &Array1<f64>) -> Array4<f64> {
        let (scale, shift) = self.scale_shift(phi);
        let (nf, c, _, _) = u.dim();
        assert_eq!(c, scale.len(), "modulation channel mismatch");
        let mut out = u.clone();
        for f in 0..nf {
            for ch in 0..c {
                let (sc, sh) = (1.0 + scale[ch], shift[ch]);
                out.slice_mut(ndarray::s![f, ch, .., ..])
                    .mapv_inplace(|v| v * sc + sh);
            }
        }
        out
    }

    pub fn backward(
        &self,
        u: &Array4<f64>,
        phi: &Array1<f64>,
        gout: &Array4<f64>,
        grad: &mut EmbedAffine,
    ) -> Array4<f64> {
        let (scale, _) = self.scale_shift(phi);
        let (nf, c, _, _) = u.dim();
        assert_eq!(gout.dim(), u.dim(), "modulation output grad shape");
        let mut gin = Array4::zeros(u.dim());
        for ch in 0..c {
            let mut g_scale = 0.0;
            let mut g_shift = 0.0;
            let sc = 1.0 + scale[ch];
            for f in 0..nf {
                let up = u.slice(ndarray::s![f, ch, .., ..]);
                let gp = gout.slice(ndarray::s![f, ch, .., ..]);
                let mut gi = gin.slice_mut(ndarray::s![f, ch, .., ..]);
                ndarray::Zip::from(&mut gi).and(&gp).and(&up).for_each(|o, &g, &uv| {
                    *o = g * sc;
                    g_scale += g * uv;
                    g_shift += g;
                });
            }
            for e in 0..phi.len() {
                grad.w_scale[[ch, e]] += g_scale * phi[e];
                grad.w_shift[[ch, e]] += g_shift * phi[e];
            }
            grad.b_scale[ch] += g_scale;
            grad.b_shift[ch] += g_shift;
        }
        gin
    }
}

impl ParamTensors for EmbedAffine {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("w_scale", self.w_scale.as_slice().expect("standard layout"));
        f("b_scale", self.b_scale.as_slice().expect("standard layout"));
        f("w_shift", self.w_shift.as_slice().expect("standard layout"));
        f("b_shift", self.b_shift.as_slice().expect("standard layout"));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("w_scale", self.w_scale.as_slice_mut().expect("standard layout"));
        f("b_scale", self.b_scale.as_slice_mut().expect("standard layout"));
        f("w_shift", self.w_shift.as_slice_mut().expect("standard layout"));
        f("b_shift", self.b_shift.as_slice_mut().expect("standard layout"));
    }

    fn named_shapes(&self) -> Vec<(String, Vec<usize>)> {
        vec![
            ("w_scale".into(), self.w_scale.shape().to_vec()),
            ("b_scale".into(), self.b_scale.shape().to_vec()),
            ("w_shift".into(), self.w_shift.shape().to_vec()),
            ("b_shift".into(), self.b_shift.shape().to_vec()),
        ]
    }
}

pub fn silu(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v / (1.0 + (-v).exp()))
}

/// Backward through silu given the pre-activation input.
pub fn silu_backward(x: &Array4<f64>, gout: &Array4<f64>) -> Array4<f64> {
    let mut gin = gout.clone();
    ndarray::Zip::from(&mut gin).and(x).for_each(|g, &v| {
        let s = 1.0 / (1.0 + (-v).exp());
        *g *= s * (1.0 + v * (1.0 - s));
    });
    gin
}

/// Sinusoidal features of the normalized step index `k / n_steps` at
/// geometrically spaced frequencies; `dim` must be even.
pub fn step_features(k: usize, n_steps: usize, dim: usize) -> Array1<f64> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dimension must be even");
    assert!(n_steps > 0);
    let t = k as f64 / n_steps as f64;
    let mut phi = Array1::zeros(dim);
    for j in 0..dim / 2 {
        let arg = t * std::f64::consts::PI * (1 << j) as f64;
        phi[2 * j] = arg.sin();
        phi[2 * j + 1] = arg.cos();
    }
    phi
}
