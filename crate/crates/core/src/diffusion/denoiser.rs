//! Dual-head denoisers: `F(noisy, t, cond) -> (z_A, z_E)`.

use ndarray::{Array2, Array4, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    concat_channels, silu, silu_backward, split_channels, timestep_embedding, upsample_nearest2,
    upsample_nearest2_backward, Conv2d, ConvCache, Elem, Linear, LinearCache, ParamId, ParamStore,
    ResBlock, ResBlockCache,
};
use crate::rng::Rng;

/// A network mapping a noisy latent, its timestep and a conditioning latent to an
/// albedo head and a lighting head of the same shape as the noisy latent.
pub trait Denoiser<F: Elem> {
    type Cache;

    fn forward(
        &self,
        store: &ParamStore<F>,
        noisy: &Array4<F>,
        t: &[usize],
        cond: &Array4<F>,
    ) -> (Array4<F>, Array4<F>, Self::Cache);

    /// Accumulates parameter gradients given the gradients of both heads.
    fn backward(
        &self,
        store: &mut ParamStore<F>,
        cache: Self::Cache,
        grad_albedo: &Array4<F>,
        grad_lighting: &Array4<F>,
    );
}

/// Two-parameter linear model `z_A = a * cond`, `z_E = e * noisy`. Small enough to
/// check gradients of the whole training objective by finite differences.
#[derive(Debug, Clone)]
pub struct LinearStandIn {
    pub a: ParamId,
    pub e: ParamId,
}

impl LinearStandIn {
    pub fn new<F: Elem>(store: &mut ParamStore<F>, a: f64, e: f64) -> Self {
        let a = store.add("a", ArrayD::from_elem(IxDyn(&[1]), F::of(a)));
        let e = store.add("e", ArrayD::from_elem(IxDyn(&[1]), F::of(e)));
        LinearStandIn { a, e }
    }
}

impl<F: Elem> Denoiser<F> for LinearStandIn {
    type Cache = (Array4<F>, Array4<F>);

    fn forward(
        &self,
        store: &ParamStore<F>,
        noisy: &Array4<F>,
        _t: &[usize],
        cond: &Array4<F>,
    ) -> (Array4<F>, Array4<F>, Self::Cache) {
        let a = store.value(self.a)[0];
        let e = store.value(self.e)[0];
        (cond * a, noisy * e, (noisy.clone(), cond.clone()))
    }

    fn backward(
        &self,
        store: &mut ParamStore<F>,
        (noisy, cond): Self::Cache,
        grad_albedo: &Array4<F>,
        grad_lighting: &Array4<F>,
    ) {
        let ga: F = (grad_albedo * &cond).sum();
        let ge: F = (grad_lighting * &noisy).sum();
        store.grad_mut(self.a)[0] += ga;
        store.grad_mut(self.e)[0] += ge;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    /// Channel width per resolution level, finest first.
    pub widths: Vec<usize>,
    pub time_embedding_dim: usize,
    pub cond_dropout_prob: f64,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            latent_channels: 4,
            widths: vec![64, 96, 128],
            time_embedding_dim: 128,
            cond_dropout_prob: 0.1,
            seed: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 {
            return Err(Error::param("latent_channels must be at least 1"));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::param("widths must be a non-empty list of positive sizes"));
        }
        if self.time_embedding_dim == 0 || self.time_embedding_dim % 2 != 0 {
            return Err(Error::param("time_embedding_dim must be even and positive"));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout_prob) {
            return Err(Error::param("cond_dropout_prob must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Latent sides must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.widths.len() - 1)
    }
}

/// Small UNet. The conditioning latent is concatenated to the noisy latent along
/// channels; the final convolution emits `2c` channels split into the two heads.
#[derive(Debug, Clone)]
pub struct UNet {
    c: usize,
    emb_dim: usize,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    res_down: Vec<ResBlock>,
    down: Vec<Conv2d>,
    mid: ResBlock,
    up_conv: Vec<Conv2d>,
    res_up: Vec<ResBlock>,
    conv_out: Conv2d,
}

pub struct UNetCache<F> {
    time1: LinearCache<F>,
    time_hidden: Array2<F>,
    time2: LinearCache<F>,
    conv_in: ConvCache<F>,
    res_down: Vec<ResBlockCache<F>>,
    down: Vec<ConvCache<F>>,
    mid: ResBlockCache<F>,
    up_conv: Vec<ConvCache<F>>,
    res_up: Vec<ResBlockCache<F>>,
    pre_out: Array4<F>,
    conv_out: ConvCache<F>,
}

impl UNet {
    pub fn new<F: Elem>(cfg: &DenoiserConfig, store: &mut ParamStore<F>, rng: &mut Rng) -> Self {
        let w = &cfg.widths;
        let levels = w.len();
        let c = cfg.latent_channels;
        let e = cfg.time_embedding_dim;
        let time1 = Linear::new(store, "time.fc1", e, e, 1.0, rng);
        let time2 = Linear::new(store, "time.fc2", e, e, 1.0, rng);
        let conv_in = Conv2d::new(store, "in", 2 * c, w[0], 3, 1, 1.0, rng);
        let mut res_down = Vec::new();
        let mut down = Vec::new();
        for l in 0..levels {
            res_down.push(ResBlock::new(store, &format!("down{l}.res"), w[l], Some(e), rng));
            if l + 1 < levels {
                down.push(Conv2d::new(store, &format!("down{l}.conv"), w[l], w[l + 1], 3, 2, 1.0, rng));
            }
        }
        let mid = ResBlock::new(store, "mid", w[levels - 1], Some(e), rng);
        let mut up_conv = Vec::new();
        let mut res_up = Vec::new();
        for l in (0..levels - 1).rev() {
            up_conv.push(Conv2d::new(store, &format!("up{l}.conv"), w[l + 1] + w[l], w[l], 3, 1, 1.0, rng));
            res_up.push(ResBlock::new(store, &format!("up{l}.res"), w[l], Some(e), rng));
        }
        // Deliberately not zero-initialised: the heads must depend on the condition
        // from the start.
        let conv_out = Conv2d::new(store, "out", w[0], 2 * c, 3, 1, 0.5, rng);
        UNet {
            c,
            emb_dim: e,
            time1,
            time2,
            conv_in,
            res_down,
            down,
            mid,
            up_conv,
            res_up,
            conv_out,
        }
    }
}

impl<F: Elem> Denoiser<F> for UNet {
    type Cache = UNetCache<F>;

    fn forward(
        &self,
        store: &ParamStore<F>,
        noisy: &Array4<F>,
        t: &[usize],
        cond: &Array4<F>,
    ) -> (Array4<F>, Array4<F>, UNetCache<F>) {
        let temb = timestep_embedding::<F>(t, self.emb_dim);
        let (th, time1) = self.time1.forward(store, &temb);
        let (emb, time2) = self.time2.forward(store, &silu(&th));

        let (mut h, conv_in) = self.conv_in.forward(store, &concat_channels(noisy, cond));
        let mut skips = Vec::new();
        let mut res_down = Vec::new();
        let mut down = Vec::new();
        for (l, block) in self.res_down.iter().enumerate() {
            let (h1, rc) = block.forward(store, &h, Some(&emb));
            res_down.push(rc);
            h = h1;
            if let Some(conv) = self.down.get(l) {
                skips.push(h.clone());
                let (h2, dc) = conv.forward(store, &h);
                down.push(dc);
                h = h2;
            }
        }
        let (mut h, mid) = self.mid.forward(store, &h, Some(&emb));
        let mut up_conv = Vec::new();
        let mut res_up = Vec::new();
        for (conv, block) in self.up_conv.iter().zip(&self.res_up) {
            let skip = skips.pop().expect("one skip per level");
            let (h1, uc) = conv.forward(store, &concat_channels(&upsample_nearest2(&h), &skip));
            up_conv.push(uc);
            let (h2, rc) = block.forward(store, &h1, Some(&emb));
            res_up.push(rc);
            h = h2;
        }
        let (out, conv_out) = self.conv_out.forward(store, &silu(&h));
        let (albedo, lighting) = split_channels(&out, self.c);
        (
            albedo,
            lighting,
            UNetCache {
                time1,
                time_hidden: th,
                time2,
                conv_in,
                res_down,
                down,
                mid,
                up_conv,
                res_up,
                pre_out: h,
                conv_out,
            },
        )
    }

    fn backward(
        &self,
        store: &mut ParamStore<F>,
        cache: UNetCache<F>,
        grad_albedo: &Array4<F>,
        grad_lighting: &Array4<F>,
    ) {
        let g_out = concat_channels(grad_albedo, grad_lighting);
        let g = self.conv_out.backward(store, cache.conv_out, &g_out, true).unwrap();
        let mut g = silu_backward(&cache.pre_out, &g);
        let mut g_emb: Option<Array2<F>> = None;
        let mut add_emb = |ge: Option<Array2<F>>| {
            let ge = ge.expect("embedding gradient");
            match &mut g_emb {
                Some(acc) => *acc += &ge,
                None => g_emb = Some(ge),
            }
        };

        // Gradients flowing into each skip connection, finest level last.
        let mut g_skips = Vec::new();
        let ups = self.up_conv.iter().zip(&self.res_up);
        for ((conv, block), (uc, rc)) in ups
            .zip(cache.up_conv.into_iter().zip(cache.res_up))
            .rev()
        {
            let (g1, ge) = block.backward(store, rc, &g);
            add_emb(ge);
            let g_cat = conv.backward(store, uc, &g1, true).unwrap();
            // The up-conv input is [upsampled coarser features, skip]; the skip has the
            // width of this level's block.
            let up_ch = conv.cin - block.conv1.cin;
            let (g_up, g_skip) = split_channels(&g_cat, up_ch);
            g_skips.push(g_skip);
            g = upsample_nearest2_backward(&g_up);
        }
        let (g_mid, ge) = self.mid.backward(store, cache.mid, &g);
        add_emb(ge);
        g = g_mid;
        let mut down_caches = cache.down;
        for (l, rc) in cache.res_down.into_iter().enumerate().rev() {
            if let Some(conv) = self.down.get(l) {
                let dc = down_caches.pop().expect("one cache per down conv");
                g = conv.backward(store, dc, &g, true).unwrap();
                g += &g_skips.pop().expect("one skip gradient per level");
            }
            let (g1, ge) = self.res_down[l].backward(store, rc, &g);
            add_emb(ge);
            g = g1;
        }
        self.conv_in.backward(store, cache.conv_in, &g, false);

        let g_emb = g_emb.expect("at least one residual block");
        let g_th = self.time2.backward(store, cache.time2, &g_emb);
        let g_th = silu_backward(&cache.time_hidden, &g_th);
        self.time1.backward(store, cache.time1, &g_th);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng as _;

    fn rand4(rng: &mut Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn unet_gradients_match_finite_differences() {
        let cfg = DenoiserConfig {
            latent_channels: 2,
            widths: vec![4, 6],
            time_embedding_dim: 8,
            ..Default::default()
        };
        let mut rng = rng_from_seed(3);
        let mut store = ParamStore::<f64>::new();
        let net = UNet::new(&cfg, &mut store, &mut rng);
        let shape = (2, 4, 4, 2);
        let noisy = rand4(&mut rng, shape);
        let cond = rand4(&mut rng, shape);
        let wa = rand4(&mut rng, shape);
        let we = rand4(&mut rng, shape);
        let t = [3usize, 700];
        let objective = |store: &ParamStore<f64>| {
            let (a, e, _) = net.forward(store, &noisy, &t, &cond);
            (&a * &wa).sum() + (&e * &we).sum()
        };
        let (_, _, cache) = net.forward(&store, &noisy, &t, &cond);
        net.backward(&mut store, cache, &wa, &we);
        let grads = store.flat_grads();
        let base = store.flat_values();
        let h = 1e-6;
        for idx in (0..base.len()).step_by(7) {
            let mut p = base.clone();
            p[idx] += h;
            store.set_flat_values(&p);
            let up = objective(&store);
            p[idx] -= 2.0 * h;
            store.set_flat_values(&p);
            let dn = objective(&store);
            let fd = (up - dn) / (2.0 * h);
            let err = (fd - grads[idx]).abs() / fd.abs().max(grads[idx].abs()).max(1e-3);
            assert!(err < 1e-5, "param {idx}: fd {fd} analytic {}", grads[idx]);
        }
        store.set_flat_values(&base);
    }

    #[test]
    fn heads_have_the_latent_shape() {
        let cfg = DenoiserConfig {
            widths: vec![8, 8, 8],
            time_embedding_dim: 16,
            ..Default::default()
        };
        let mut store = ParamStore::<f32>::new();
        let net = UNet::new(&cfg, &mut store, &mut rng_from_seed(0));
        let x = Array4::<f32>::zeros((3, 16, 16, 4));
        let (a, e, _) = net.forward(&store, &x, &[1, 2, 3], &x);
        assert_eq!(a.dim(), (3, 16, 16, 4));
        assert_eq!(e.dim(), (3, 16, 16, 4));
    }
}
