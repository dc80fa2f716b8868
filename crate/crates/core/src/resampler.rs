//! Single-layer Perceiver-style resampler, used as embedding predictor and as
//! probe head, plus the pooling that turns latents into special tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Binder, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::llm::attention;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResamplerConfig {
    pub heads: usize,
    pub ffn_mult: usize,
}

impl Default for ResamplerConfig {
    fn default() -> Self {
        ResamplerConfig { heads: 4, ffn_mult: 2 }
    }
}

/// `x · w + b`.
#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
    pub dim_in: usize,
    pub dim_out: usize,
}

impl Affine {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim_in: usize,
        dim_out: usize,
        std: f32,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Affine {
            w: store.insert_normal(format!("{prefix}.w"), &[dim_in, dim_out], std, rng)?,
            b: store.insert_full(format!("{prefix}.b"), &[dim_out], 0.0)?,
            dim_in,
            dim_out,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, b: &mut Binder<'_>, x: Var) -> Result<Var> {
        let (w, bb) = (b.bind(g, self.w), b.bind(g, self.b));
        g.linear(x, w, bb)
    }
}

/// Parameter handles of one resampler block.
#[derive(Clone, Debug)]
pub struct ResamplerBlock {
    pub n_queries: usize,
    pub key_dim: usize,
    pub dim: usize,
    pub heads: usize,
    /// Own latent queries; `None` when the caller supplies them.
    pub latents: Option<ParamId>,
    lnq_g: ParamId,
    lnq_b: ParamId,
    lnk_g: ParamId,
    lnk_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    out: Affine,
    lnf_g: ParamId,
    lnf_b: ParamId,
    ff1: Affine,
    ff2: Affine,
}

impl ResamplerBlock {
    /// Registers a block mapping keys of width `key_dim` to `n_queries × dim`.
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        n_queries: usize,
        key_dim: usize,
        dim: usize,
        own_latents: bool,
        cfg: &ResamplerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if n_queries == 0 || key_dim == 0 || dim == 0 {
            return Err(Error::invalid("resampler sizes must be positive"));
        }
        if cfg.heads == 0 || !dim.is_multiple_of(cfg.heads) {
            return Err(Error::invalid(format!(
                "resampler dim {dim} not divisible by {} heads",
                cfg.heads
            )));
        }
        let p = |s: &str| format!("{prefix}.{s}");
        let std_d = (1.0 / dim as f32).sqrt();
        let std_k = (1.0 / key_dim as f32).sqrt();
        let f = dim * cfg.ffn_mult;
        let latents = if own_latents {
            Some(store.insert_normal(p("latents"), &[n_queries, dim], std_d, rng)?)
        } else {
            None
        };
        Ok(ResamplerBlock {
            n_queries,
            key_dim,
            dim,
            heads: cfg.heads,
            latents,
            lnq_g: store.insert_full(p("lnq_g"), &[dim], 1.0)?,
            lnq_b: store.insert_full(p("lnq_b"), &[dim], 0.0)?,
            lnk_g: store.insert_full(p("lnk_g"), &[key_dim], 1.0)?,
            lnk_b: store.insert_full(p("lnk_b"), &[key_dim], 0.0)?,
            wq: store.insert_normal(p("wq"), &[dim, dim], std_d, rng)?,
            wk: store.insert_normal(p("wk"), &[key_dim, dim], std_k, rng)?,
            wv: store.insert_normal(p("wv"), &[key_dim, dim], std_k, rng)?,
            out: Affine::register(store, &p("out"), dim, dim, std_d, rng)?,
            lnf_g: store.insert_full(p("lnf_g"), &[dim], 1.0)?,
            lnf_b: store.insert_full(p("lnf_b"), &[dim], 0.0)?,
            ff1: Affine::register(store, &p("ff1"), dim, f, std_d, rng)?,
            ff2: Affine::register(store, &p("ff2"), f, dim, (1.0 / f as f32).sqrt(), rng)?,
        })
    }

    /// The block's own latents as a graph node.
    pub fn own_latents<T: Real>(&self, g: &mut Graph<T>, b: &mut Binder<'_>) -> Result<Var> {
        let id = self
            .latents
            .ok_or_else(|| Error::invalid("resampler has no latents of its own"))?;
        Ok(b.bind(g, id))
    }

    /// Cross-attention of `latents` over `keys`, residual, then LN + FFN + residual.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<'_>,
        latents: Var,
        keys: Var,
    ) -> Result<Var> {
        match g.shape(keys) {
            [n, d] if *n > 0 && *d == self.key_dim => {}
            s => {
                return Err(Error::shape(
                    "resample",
                    format!("keys {s:?}, expected (n × {})", self.key_dim),
                ))
            }
        }
        if g.shape(latents) != [self.n_queries, self.dim] {
            return Err(Error::shape(
                "resample",
                format!(
                    "latents {:?}, expected [{}, {}]",
                    g.shape(latents),
                    self.n_queries,
                    self.dim
                ),
            ));
        }
        let (qg, qb) = (b.bind(g, self.lnq_g), b.bind(g, self.lnq_b));
        let qn = g.layer_norm(latents, qg, qb)?;
        let (kg, kb) = (b.bind(g, self.lnk_g), b.bind(g, self.lnk_b));
        let kn = g.layer_norm(keys, kg, kb)?;
        let (wq, wk, wv) = (b.bind(g, self.wq), b.bind(g, self.wk), b.bind(g, self.wv));
        let q = g.matmul(qn, wq)?;
        let k = g.matmul(kn, wk)?;
        let v = g.matmul(kn, wv)?;
        let a = attention(g, q, k, v, self.heads, None)?;
        let a = self.out.forward(g, b, a)?;
        let x = g.add(latents, a)?;
        let (fg, fb) = (b.bind(g, self.lnf_g), b.bind(g, self.lnf_b));
        let h = g.layer_norm(x, fg, fb)?;
        let h = self.ff1.forward(g, b, h)?;
        let h = g.gelu(h)?;
        let h = self.ff2.forward(g, b, h)?;
        g.add(x, h)
    }

    /// Frozen tensor-level forward using the block's own latents.
    pub fn resample(&self, store: &ParamStore, keys: &Tensor) -> Result<Tensor> {
        let mut g = Graph::<f32>::new();
        let mut b = Binder::frozen(store);
        let k = g.leaf(keys, false);
        let l = self.own_latents(&mut g, &mut b)?;
        let y = self.forward(&mut g, &mut b, l, k)?;
        Ok(g.to_tensor(y))
    }
}

/// Group boundaries for pooling `n` rows into `groups` consecutive groups of
/// `n / groups` rows; the last group absorbs the remainder.
pub fn pool_groups(n: usize, groups: usize) -> Result<Vec<std::ops::Range<usize>>> {
    if groups == 0 {
        return Err(Error::invalid("cannot pool into zero groups"));
    }
    if groups > n {
        return Err(Error::invalid(format!("cannot pool {n} rows into {groups} groups")));
    }
    let size = n / groups;
    Ok((0..groups)
        .map(|i| i * size..if i + 1 == groups { n } else { (i + 1) * size })
        .collect())
}

/// (groups × n) averaging matrix for [`pool_groups`].
pub fn pooling_matrix<T: Real>(n: usize, groups: usize) -> Result<Vec<T>> {
    let mut m = vec![T::zero(); groups * n];
    for (i, r) in pool_groups(n, groups)?.into_iter().enumerate() {
        let w = T::one() / T::from_f64(r.len() as f64);
        m[i * n + r.start..i * n + r.end].iter_mut().for_each(|v| *v = w);
    }
    Ok(m)
}

/// Mean-pools latent rows into `n_seek` groups, then maps them to hidden width.
pub fn derive_special_tokens<T: Real>(
    g: &mut Graph<T>,
    b: &mut Binder<'_>,
    latents: Var,
    n_seek: usize,
    token_proj: &Affine,
) -> Result<Var> {
    let n = g.shape(latents)[0];
    let pool = g.constant(vec![n_seek.max(1), n], pooling_matrix(n, n_seek)?)?;
    let pooled = g.matmul(pool, latents)?;
    token_proj.forward(g, b, pooled)
}

/// Mean of the ⟨g⟩ rows mapped to the gen target width: the gen latent.
pub fn derive_gen_query<T: Real>(
    g: &mut Graph<T>,
    b: &mut Binder<'_>,
    gen_tokens: Var,
    query_proj: &Affine,
) -> Result<Var> {
    if g.shape(gen_tokens).first().copied().unwrap_or(0) == 0 {
        return Err(Error::invalid("no gen tokens to pool"));
    }
    let m = g.mean_axis(gen_tokens, 0)?;
    query_proj.forward(g, b, m)
}
