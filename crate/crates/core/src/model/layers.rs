//! Parameterized building blocks. Each holds only parameter ids; values live
//! in a [`ParamStore`].

use rand::Rng;

use crate::error::Result;
use crate::numeric::{Graph, Mask, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut impl Rng) -> Result<Self> {
        let w = store.add_uniform(&format!("{name}.w"), &[d_in, d_out], rng)?;
        let b = if bias {
            Some(store.add_full(&format!("{name}.b"), &[d_out], 0.0)?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add_full(&format!("{name}.g"), &[d], 1.0)?,
            bias: store.add_full(&format!("{name}.b"), &[d], 0.0)?,
        })
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var, eps: f64) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, eps)
    }
}

/// Two linear maps with a ReLU between them.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, d_ff: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            inner: Linear::new(store, &format!("{name}.1"), d, d_ff, true, rng)?,
            outer: Linear::new(store, &format!("{name}.2"), d_ff, d, true, rng)?,
        })
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var, dropout: f64) -> Result<Var> {
        let h = self.inner.apply(g, store, x)?;
        let h = g.relu(h);
        let h = g.dropout(h, dropout)?;
        self.outer.apply(g, store, h)
    }
}

/// Per-head multiplicative weights over real keys (memory slots always get
/// weight one).
#[derive(Default)]
pub enum KeyWeights<'a> {
    #[default]
    None,
    /// One `[queries x keys]` matrix shared by every head.
    Shared(Var),
    PerHead(&'a [Var]),
}

/// Optional parts of an attention call.
#[derive(Default)]
pub struct AttendOpts<'a> {
    pub weights: KeyWeights<'a>,
    pub mask: Option<&'a Mask>,
    pub tag: Option<TraceTag<'a>>,
}

/// Names an attention module in recorded traces.
#[derive(Clone, Copy, Debug)]
pub struct TraceTag<'a> {
    pub module: &'a str,
    pub layer: usize,
}

/// Multi-head scaled dot-product attention with optional learned memory
/// slots appended to the keys and values.
#[derive(Clone, Debug)]
pub struct MultiHead {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub memory: Option<(ParamId, ParamId)>,
    pub heads: usize,
}

impl MultiHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        memory_slots: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let q = Linear::new(store, &format!("{name}.q"), d, d, true, rng)?;
        let k = Linear::new(store, &format!("{name}.k"), d, d, true, rng)?;
        let v = Linear::new(store, &format!("{name}.v"), d, d, true, rng)?;
        let o = Linear::new(store, &format!("{name}.o"), d, d, true, rng)?;
        let memory = if memory_slots > 0 {
            Some((
                store.add_uniform(&format!("{name}.mem_k"), &[memory_slots, d], rng)?,
                store.add_uniform(&format!("{name}.mem_v"), &[memory_slots, d], rng)?,
            ))
        } else {
            None
        };
        Ok(Self {
            q,
            k,
            v,
            o,
            memory,
            heads,
        })
    }

    pub fn attend(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        keys: Var,
        values: Var,
        opts: AttendOpts<'_>,
    ) -> Result<Var> {
        let q = self.q.apply(g, store, queries)?;
        self.attend_projected(g, store, q, keys, values, opts)
    }

    /// Like [`MultiHead::attend`] with queries already passed through `q`.
    pub fn attend_projected(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q: Var,
        keys: Var,
        values: Var,
        opts: AttendOpts<'_>,
    ) -> Result<Var> {
        let AttendOpts { weights, mask, tag } = opts;
        let mut k = self.k.apply(g, store, keys)?;
        let mut v = self.v.apply(g, store, values)?;
        let n_q = g.shape(q)[0];
        let mut slots = 0;
        if let Some((mk, mv)) = self.memory {
            let mk = g.param(store, mk);
            let mv = g.param(store, mv);
            slots = g.shape(mk)[0];
            k = g.concat_rows(&[k, mk])?;
            v = g.concat_rows(&[v, mv])?;
        }
        let ones = (slots > 0).then(|| g.constant(Tensor::ones(&[n_q, slots])));
        let full_weights = |g: &mut Graph, w: Var| -> Result<Var> {
            match ones {
                Some(o) => g.concat_cols(&[w, o]),
                None => Ok(w),
            }
        };
        let shared = match weights {
            KeyWeights::Shared(w) => Some(full_weights(g, w)?),
            _ => None,
        };
        let d = g.shape(q)[1];
        let dk = d / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dk, dk)?,
                    g.slice_cols(k, h * dk, dk)?,
                    g.slice_cols(v, h * dk, dk)?,
                )
            };
            let s = g.matmul_t(qh, kh)?;
            let s = g.scale(s, scale);
            let a = match (&weights, shared) {
                (_, Some(w)) => g.weighted_softmax_rows(s, w, mask)?,
                (KeyWeights::PerHead(ws), _) => {
                    let w = full_weights(g, ws[h])?;
                    g.weighted_softmax_rows(s, w, mask)?
                }
                _ => g.softmax_rows(s, mask)?,
            };
            if let Some(t) = tag {
                g.record_attention(t.module, t.layer, h, a);
            }
            outs.push(g.matmul(a, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        self.o.apply(g, store, cat)
    }
}
