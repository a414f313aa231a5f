use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array4, ArrayView2, Axis, Ix1, Ix2};

use super::{Elem, ParamId, ParamStore};
use crate::rng::Rng;

/// k×k convolution with zero padding `k/2` and the given stride.
///
/// Weights are stored pre-flattened as `(k*k*cin, cout)` in (ky, kx, cin) order, which
/// matches the im2col column layout.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug)]
pub struct ConvCache<F> {
    cols: Array2<F>,
    in_shape: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Elem>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
        rng: &mut Rng,
    ) -> Self {
        assert!(kernel % 2 == 1 && stride >= 1);
        let fan_in = kernel * kernel * cin;
        let weight = store.add_normal(format!("{name}.w"), &[fan_in, cout], fan_in, gain, rng);
        let bias = store.add_zeros(format!("{name}.b"), &[cout]);
        Conv2d {
            weight,
            bias,
            cin,
            cout,
            kernel,
            stride,
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.kernel / 2;
        (
            (h + 2 * p - self.kernel) / self.stride + 1,
            (w + 2 * p - self.kernel) / self.stride + 1,
        )
    }

    fn im2col<F: Elem>(&self, x: &ndarray::ArrayView4<F>, ho: usize, wo: usize) -> Array2<F> {
        let (b, h, w, c) = x.dim();
        let k = self.kernel;
        let p = self.kernel as isize / 2;
        let kc = k * k * c;
        let src = x.as_slice().expect("standard layout input");
        let mut cols = Array2::<F>::zeros((b * ho * wo, kc));
        let dst = cols.as_slice_mut().unwrap();
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = ((bi * ho + oy) * wo + ox) * kc;
                    for ky in 0..k {
                        let iy = (oy * self.stride) as isize + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride) as isize + kx as isize - p;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let s0 = ((bi * h + iy as usize) * w + ix as usize) * c;
                            let d0 = row + (ky * k + kx) * c;
                            dst[d0..d0 + c].copy_from_slice(&src[s0..s0 + c]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<F: Elem>(&self, cols: &Array2<F>, cache: &ConvCache<F>) -> Array4<F> {
        let (b, h, w, c) = cache.in_shape;
        let (ho, wo) = cache.out_hw;
        let k = self.kernel;
        let p = self.kernel as isize / 2;
        let kc = k * k * c;
        let src = cols.as_slice().expect("contiguous");
        let mut out = Array4::<F>::zeros((b, h, w, c));
        let dst = out.as_slice_mut().unwrap();
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = ((bi * ho + oy) * wo + ox) * kc;
                    for ky in 0..k {
                        let iy = (oy * self.stride) as isize + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride) as isize + kx as isize - p;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let d0 = ((bi * h + iy as usize) * w + ix as usize) * c;
                            let s0 = row + (ky * k + kx) * c;
                            for (d, s) in dst[d0..d0 + c].iter_mut().zip(&src[s0..s0 + c]) {
                                *d = *d + *s;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward<F: Elem>(&self, store: &ParamStore<F>, x: &Array4<F>) -> (Array4<F>, ConvCache<F>) {
        let (b, h, w, c) = x.dim();
        assert_eq!(c, self.cin, "conv input channels");
        let (ho, wo) = self.out_hw(h, w);
        let x = x.as_standard_layout();
        let cols = self.im2col(&x.view(), ho, wo);
        let weight = as2(store.value(self.weight));
        let bias = as1(store.value(self.bias));
        let mut out = Array2::<F>::zeros((b * ho * wo, self.cout));
        for mut row in out.rows_mut() {
            row.assign(&bias);
        }
        general_mat_mul(F::one(), &cols, &weight, F::one(), &mut out);
        let out = out
            .into_shape_with_order((b, ho, wo, self.cout))
            .expect("conv output shape");
        (
            out,
            ConvCache {
                cols,
                in_shape: (b, h, w, c),
                out_hw: (ho, wo),
            },
        )
    }

    /// Accumulates parameter gradients; returns the input gradient if requested.
    pub fn backward<F: Elem>(
        &self,
        store: &mut ParamStore<F>,
        cache: ConvCache<F>,
        grad_out: &Array4<F>,
        need_input_grad: bool,
    ) -> Option<Array4<F>> {
        let (b, _, _, _) = cache.in_shape;
        let (ho, wo) = cache.out_hw;
        let g = grad_out.as_standard_layout();
        let g2 = g
            .view()
            .into_shape_with_order((b * ho * wo, self.cout))
            .expect("grad shape");
        {
            let gw = store.grad_mut(self.weight);
            let mut gw = gw.view_mut().into_dimensionality::<Ix2>().unwrap();
            general_mat_mul(F::one(), &cache.cols.t(), &g2, F::one(), &mut gw);
        }
        {
            let gb = store.grad_mut(self.bias);
            let mut gb = gb.view_mut().into_dimensionality::<Ix1>().unwrap();
            gb += &g2.sum_axis(Axis(0));
        }
        if !need_input_grad {
            return None;
        }
        let weight = as2(store.value(self.weight));
        let mut gcols = Array2::<F>::zeros(cache.cols.raw_dim());
        general_mat_mul(F::one(), &g2, &weight.t(), F::zero(), &mut gcols);
        Some(self.col2im(&gcols, &cache))
    }
}

fn as2<F: Elem>(a: &ndarray::ArrayD<F>) -> ArrayView2<'_, F> {
    a.view().into_dimensionality::<Ix2>().expect("2-d parameter")
}

fn as1<F: Elem>(a: &ndarray::ArrayD<F>) -> ndarray::ArrayView1<'_, F> {
    a.view().into_dimensionality::<Ix1>().expect("1-d parameter")
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub din: usize,
    pub dout: usize,
}

#[derive(Debug)]
pub struct LinearCache<F> {
    input: Array2<F>,
}

impl Linear {
    pub fn new<F: Elem>(
        store: &mut ParamStore<F>,
        name: &str,
        din: usize,
        dout: usize,
        gain: f64,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.add_normal(format!("{name}.w"), &[din, dout], din, gain, rng);
        let bias = store.add_zeros(format!("{name}.b"), &[dout]);
        Linear {
            weight,
            bias,
            din,
            dout,
        }
    }

    pub fn forward<F: Elem>(&self, store: &ParamStore<F>, x: &Array2<F>) -> (Array2<F>, LinearCache<F>) {
        let mut out = Array2::<F>::zeros((x.nrows(), self.dout));
        let bias = as1(store.value(self.bias));
        for mut row in out.rows_mut() {
            row.assign(&bias);
        }
        general_mat_mul(F::one(), x, &as2(store.value(self.weight)), F::one(), &mut out);
        (out, LinearCache { input: x.clone() })
    }

    pub fn backward<F: Elem>(
        &self,
        store: &mut ParamStore<F>,
        cache: LinearCache<F>,
        grad_out: &Array2<F>,
    ) -> Array2<F> {
        {
            let gw = store.grad_mut(self.weight);
            let mut gw = gw.view_mut().into_dimensionality::<Ix2>().unwrap();
            general_mat_mul(F::one(), &cache.input.t(), grad_out, F::one(), &mut gw);
        }
        {
            let gb = store.grad_mut(self.bias);
            let mut gb = gb.view_mut().into_dimensionality::<Ix1>().unwrap();
            gb += &grad_out.sum_axis(Axis(0));
        }
        let mut gin = Array2::<F>::zeros(cache.input.raw_dim());
        general_mat_mul(
            F::one(),
            grad_out,
            &as2(store.value(self.weight)).t(),
            F::zero(),
            &mut gin,
        );
        gin
    }
}

fn sigmoid_scalar<F: Elem>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

pub fn silu<F: Elem, D: ndarray::Dimension>(x: &ndarray::Array<F, D>) -> ndarray::Array<F, D> {
    x.mapv(|v| v * sigmoid_scalar(v))
}

/// Gradient through SiLU given the pre-activation input.
pub fn silu_backward<F: Elem, D: ndarray::Dimension>(
    x: &ndarray::Array<F, D>,
    grad_out: &ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    let mut g = grad_out.clone();
    g.zip_mut_with(x, |g, &v| {
        let s = sigmoid_scalar(v);
        *g = *g * s * (F::one() + v * (F::one() - s));
    });
    g
}

pub fn sigmoid<F: Elem, D: ndarray::Dimension>(x: &ndarray::Array<F, D>) -> ndarray::Array<F, D> {
    x.mapv(sigmoid_scalar)
}

/// Gradient through a sigmoid given its output.
pub fn sigmoid_backward<F: Elem, D: ndarray::Dimension>(
    y: &ndarray::Array<F, D>,
    grad_out: &ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    let mut g = grad_out.clone();
    g.zip_mut_with(y, |g, &s| *g = *g * s * (F::one() - s));
    g
}

pub fn upsample_nearest2<F: Elem>(x: &Array4<F>) -> Array4<F> {
    let (b, h, w, c) = x.dim();
    let mut out = Array4::<F>::zeros((b, 2 * h, 2 * w, c));
    for dy in 0..2 {
        for dx in 0..2 {
            out.slice_mut(s![.., dy..;2, dx..;2, ..]).assign(x);
        }
    }
    out
}

pub fn upsample_nearest2_backward<F: Elem>(grad_out: &Array4<F>) -> Array4<F> {
    let (b, h2, w2, c) = grad_out.dim();
    let mut g = Array4::<F>::zeros((b, h2 / 2, w2 / 2, c));
    for dy in 0..2 {
        for dx in 0..2 {
            g += &grad_out.slice(s![.., dy..;2, dx..;2, ..]);
        }
    }
    g
}

/// Folds each 2×2 spatial block into channels: `(b, h, w, c) -> (b, h/2, w/2, 4c)`.
pub fn space_to_depth2<F: Elem>(x: &Array4<F>) -> Array4<F> {
    let (b, h, w, c) = x.dim();
    let mut out = Array4::<F>::zeros((b, h / 2, w / 2, 4 * c));
    for dy in 0..2 {
        for dx in 0..2 {
            let k = (dy * 2 + dx) * c;
            out.slice_mut(s![.., .., .., k..k + c])
                .assign(&x.slice(s![.., dy..;2, dx..;2, ..]));
        }
    }
    out
}

/// Inverse of [`space_to_depth2`]; also its adjoint, since both are permutations.
pub fn depth_to_space2<F: Elem>(x: &Array4<F>) -> Array4<F> {
    let (b, h, w, c4) = x.dim();
    let c = c4 / 4;
    let mut out = Array4::<F>::zeros((b, 2 * h, 2 * w, c));
    for dy in 0..2 {
        for dx in 0..2 {
            let k = (dy * 2 + dx) * c;
            out.slice_mut(s![.., dy..;2, dx..;2, ..])
                .assign(&x.slice(s![.., .., .., k..k + c]));
        }
    }
    out
}

pub fn concat_channels<F: Elem>(a: &Array4<F>, b: &Array4<F>) -> Array4<F> {
    ndarray::concatenate(Axis(3), &[a.view(), b.view()])
        .expect("matching spatial shapes")
        .as_standard_layout()
        .to_owned()
}

pub fn split_channels<F: Elem>(x: &Array4<F>, first: usize) -> (Array4<F>, Array4<F>) {
    (
        x.slice(s![.., .., .., ..first]).as_standard_layout().to_owned(),
        x.slice(s![.., .., .., first..]).as_standard_layout().to_owned(),
    )
}

/// Pre-activation residual block with an additive per-channel embedding bias:
/// `x + conv2(silu(conv1(silu(x)) + proj(silu(emb))))`.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub emb_proj: Option<Linear>,
}

#[derive(Debug)]
pub struct ResBlockCache<F> {
    x: Array4<F>,
    c1: ConvCache<F>,
    h1: Array4<F>,
    c2: ConvCache<F>,
    emb: Option<(Array2<F>, LinearCache<F>)>,
}

impl ResBlock {
    pub fn new<F: Elem>(
        store: &mut ParamStore<F>,
        name: &str,
        channels: usize,
        emb_dim: Option<usize>,
        rng: &mut Rng,
    ) -> Self {
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), channels, channels, 3, 1, 1.0, rng);
        // Small second conv keeps the block close to identity at initialisation.
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), channels, channels, 3, 1, 0.2, rng);
        let emb_proj = emb_dim.map(|d| Linear::new(store, &format!("{name}.emb"), d, channels, 0.5, rng));
        ResBlock {
            conv1,
            conv2,
            emb_proj,
        }
    }

    pub fn forward<F: Elem>(
        &self,
        store: &ParamStore<F>,
        x: &Array4<F>,
        emb: Option<&Array2<F>>,
    ) -> (Array4<F>, ResBlockCache<F>) {
        let (a1, c1) = self.conv1.forward(store, &silu(x));
        let mut h1 = a1;
        let emb_cache = match (&self.emb_proj, emb) {
            (Some(proj), Some(e)) => {
                let se = silu(e);
                let (bias, lc) = proj.forward(store, &se);
                for (mut sample, brow) in h1.outer_iter_mut().zip(bias.rows()) {
                    for mut px in sample.lanes_mut(Axis(2)) {
                        px += &brow;
                    }
                }
                Some((e.clone(), lc))
            }
            (None, _) => None,
            (Some(_), None) => panic!("residual block requires an embedding"),
        };
        let (a2, c2) = self.conv2.forward(store, &silu(&h1));
        let out = x + &a2;
        (
            out,
            ResBlockCache {
                x: x.clone(),
                c1,
                h1,
                c2,
                emb: emb_cache,
            },
        )
    }

    /// Returns `(grad_x, grad_emb)`.
    pub fn backward<F: Elem>(
        &self,
        store: &mut ParamStore<F>,
        cache: ResBlockCache<F>,
        grad_out: &Array4<F>,
    ) -> (Array4<F>, Option<Array2<F>>) {
        let g_a2 = self.conv2.backward(store, cache.c2, grad_out, true).unwrap();
        let g_h1 = silu_backward(&cache.h1, &g_a2);
        let g_emb = match (&self.emb_proj, cache.emb) {
            (Some(proj), Some((e, lc))) => {
                let (b, _, _, c) = g_h1.dim();
                let g_bias: Array2<F> = g_h1
                    .view()
                    .into_shape_with_order((b, g_h1.len() / (b * c), c))
                    .unwrap()
                    .sum_axis(Axis(1));
                let g_se = proj.backward(store, lc, &g_bias);
                Some(silu_backward(&e, &g_se))
            }
            _ => None,
        };
        let g_sx = self.conv1.backward(store, cache.c1, &g_h1, true).unwrap();
        let mut g_x = silu_backward(&cache.x, &g_sx);
        g_x += grad_out;
        (g_x, g_emb)
    }
}

/// Sinusoidal embedding of integer timesteps, `dim` must be even.
pub fn timestep_embedding<F: Elem>(t: &[usize], dim: usize) -> Array2<F> {
    let half = dim / 2;
    let freqs: Array1<f64> = Array1::from_shape_fn(half, |k| {
        (-(10000f64.ln()) * k as f64 / half as f64).exp()
    });
    Array2::from_shape_fn((t.len(), dim), |(i, j)| {
        let arg = t[i] as f64 * freqs[j % half];
        F::of(if j < half { arg.sin() } else { arg.cos() })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng as _;

    fn random4(rng: &mut Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
    }

    /// Weighted sum of outputs as a scalar objective; its gradient w.r.t. the output is
    /// the weight tensor.
    fn objective(y: &Array4<f64>, w: &Array4<f64>) -> f64 {
        (y * w).sum()
    }

    fn check_layer(
        store: &mut ParamStore<f64>,
        x: &Array4<f64>,
        fwd: &dyn Fn(&ParamStore<f64>, &Array4<f64>) -> Array4<f64>,
        analytic: &dyn Fn(&mut ParamStore<f64>, &Array4<f64>, &Array4<f64>) -> Array4<f64>,
        rng: &mut Rng,
    ) {
        let y = fwd(store, x);
        let w = random4(rng, y.dim());
        store.zero_grad();
        let gx = analytic(store, x, &w);
        let h = 1e-6;
        for idx in [0, x.len() / 3, x.len() - 1] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (objective(&fwd(store, &xp), &w) - objective(&fwd(store, &xm), &w)) / (2.0 * h);
            let an = gx.as_slice().unwrap()[idx];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "input grad {idx}: {fd} vs {an}");
        }
        let grads = store.flat_grads();
        let base = store.flat_values();
        for idx in (0..base.len()).step_by((base.len() / 7).max(1)) {
            let mut p = base.clone();
            p[idx] += h;
            store.set_flat_values(&p);
            let fp = objective(&fwd(store, x), &w);
            p[idx] -= 2.0 * h;
            store.set_flat_values(&p);
            let fm = objective(&fwd(store, x), &w);
            store.set_flat_values(&base);
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (fd - grads[idx]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "param grad {idx}: {fd} vs {}",
                grads[idx]
            );
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = rng_from_seed(1);
        for (k, stride) in [(3, 1), (3, 2), (1, 1)] {
            let mut store = ParamStore::<f64>::new();
            let conv = Conv2d::new(&mut store, "c", 3, 4, k, stride, 1.0, &mut rng);
            for v in store.entries_mut()[1].value.iter_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
            let x = random4(&mut rng, (2, 6, 6, 3));
            let c1 = conv.clone();
            let c2 = conv.clone();
            check_layer(
                &mut store,
                &x,
                &move |s, x| c1.forward(s, x).0,
                &move |s, x, w| {
                    let (_, cache) = c2.forward(s, x);
                    c2.backward(s, cache, w, true).unwrap()
                },
                &mut rng,
            );
        }
    }

    #[test]
    fn resblock_gradients_match_finite_differences() {
        let mut rng = rng_from_seed(2);
        let mut store = ParamStore::<f64>::new();
        let block = ResBlock::new(&mut store, "r", 3, None, &mut rng);
        let x = random4(&mut rng, (2, 4, 4, 3));
        let b1 = block.clone();
        let b2 = block.clone();
        check_layer(
            &mut store,
            &x,
            &move |s, x| b1.forward(s, x, None).0,
            &move |s, x, w| {
                let (_, cache) = b2.forward(s, x, None);
                b2.backward(s, cache, w).0
            },
            &mut rng,
        );
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let mut rng = rng_from_seed(3);
        let x = random4(&mut rng, (1, 3, 2, 2));
        let g = random4(&mut rng, (1, 6, 4, 2));
        let lhs = (upsample_nearest2(&x) * &g).sum();
        let rhs = (&x * &upsample_nearest2_backward(&g)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn space_depth_round_trip() {
        let mut rng = rng_from_seed(5);
        let x = random4(&mut rng, (2, 4, 6, 3));
        let y = space_to_depth2(&x);
        assert_eq!(y.dim(), (2, 2, 3, 12));
        assert_eq!(depth_to_space2(&y), x);
    }

    #[test]
    fn stride_two_halves_resolution() {
        let mut rng = rng_from_seed(4);
        let mut store = ParamStore::<f32>::new();
        let conv = Conv2d::new(&mut store, "d", 2, 5, 3, 2, 1.0, &mut rng);
        let (y, _) = conv.forward(&store, &Array4::zeros((3, 16, 16, 2)));
        assert_eq!(y.dim(), (3, 8, 8, 5));
    }
}
