//! Encoder and head forward passes, with an activation cache for backprop.

use crate::error::{Error, Result};
use crate::model::{
    AdapterKind, AdapterParams, BackboneLayer, Ia3Layer, LoraLayer, LoraPair, ModelSpec,
    ParameterStore,
};
use crate::prompt::PAD_ID;
use crate::scalar::Scalar;
use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Epsilon inside the RMS normalizer.
pub(crate) const NORM_EPS: f64 = 1e-6;

/// Per-task prediction: one probability vector per configured head, plus the
/// pooled encoder state they were read from.
#[derive(Debug, Clone)]
pub struct TaskPrediction<S: Scalar> {
    /// Softmax outputs, aligned with `ModelSpec::heads`.
    pub probs: Vec<Array1<S>>,
    /// Pre-softmax logits, aligned with `ModelSpec::heads`.
    pub logits: Vec<Array1<S>>,
    /// Pooled terminal hidden state.
    pub z: Array1<S>,
}

/// Result of an encoder pass.
pub struct ForwardOutput<S: Scalar> {
    pub z: Array1<S>,
    pub(crate) cache: Option<Cache<S>>,
}

/// Cached activations for one projection site.
pub(crate) struct ProjCache<S: Scalar> {
    /// LoRA intermediate `a.dot(input)` per position (`seq x rank`).
    pub u: Option<Array2<S>>,
    /// Inverted dropout mask on the LoRA input path (values 0 or 1/(1-p)).
    pub mask: Option<Array2<S>>,
}

pub(crate) struct LayerCache<S: Scalar> {
    /// Residual-stream input to the layer.
    pub x_in: Array2<S>,
    pub attn_normed: Array2<S>,
    pub attn_inv_rms: Array1<S>,
    pub q: Array2<S>,
    /// Key/value activations before the elementwise rescale (when active).
    pub k_pre: Array2<S>,
    pub v_pre: Array2<S>,
    /// Key/value activations as used by attention.
    pub k: Array2<S>,
    pub v: Array2<S>,
    /// Causal softmax weights per query head (`seq x seq`, upper triangle 0).
    pub probs: Vec<Array2<S>>,
    /// Concatenated head outputs (input to the output projection).
    pub ctx: Array2<S>,
    pub proj_q: ProjCache<S>,
    pub proj_k: ProjCache<S>,
    pub proj_v: ProjCache<S>,
    pub proj_o: ProjCache<S>,
    /// Residual stream after the attention sublayer.
    pub x_mid: Array2<S>,
    pub ff_normed: Array2<S>,
    pub ff_inv_rms: Array1<S>,
    /// Feed-forward pre-activation.
    pub f1: Array2<S>,
    /// SiLU output before the elementwise rescale (when active).
    pub act_pre: Array2<S>,
    /// Feed-forward intermediate as consumed by the down projection.
    pub act: Array2<S>,
}

pub(crate) struct Cache<S: Scalar> {
    /// Number of virtual (prefix) rows prepended ahead of real tokens.
    pub n_prefix: usize,
    /// Pooled row index within the full (prefix + tokens) sequence.
    pub pooled: usize,
    pub layers: Vec<LayerCache<S>>,
    /// Residual stream after the last layer.
    pub final_x: Array2<S>,
    pub final_inv_rms: Array1<S>,
}

/// Numerically safe sigmoid.
fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub(crate) fn silu<S: Scalar>(x: S) -> S {
    x * sigmoid(x)
}

pub(crate) fn silu_grad<S: Scalar>(x: S) -> S {
    let s = sigmoid(x);
    s * (S::one() + x * (S::one() - s))
}

/// RMS-normalizes every row and applies the gain. Returns the normalized
/// rows and the per-row `1 / rms` factors needed by the backward pass.
pub(crate) fn rmsnorm_rows<S: Scalar>(
    x: &Array2<S>,
    gain: &Array1<S>,
) -> (Array2<S>, Array1<S>) {
    let d = x.ncols();
    let inv_d = S::of(1.0 / d as f64);
    let eps = S::of(NORM_EPS);
    let mut out = x.clone();
    let mut inv_rms = Array1::<S>::zeros(x.nrows());
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let mean_sq = row.iter().map(|v| *v * *v).sum::<S>() * inv_d;
        let inv = S::one() / (mean_sq + eps).sqrt();
        inv_rms[i] = inv;
        for (v, g) in row.iter_mut().zip(gain.iter()) {
            *v = *v * inv * *g;
        }
    }
    (out, inv_rms)
}

/// In-place numerically stable softmax over `row[..=last]`, zeroing the rest.
fn causal_softmax_row<S: Scalar>(row: &mut [S], last: usize) {
    let mut max = row[0];
    for v in row.iter().take(last + 1) {
        if *v > max {
            max = *v;
        }
    }
    let mut sum = S::zero();
    for v in row.iter_mut().take(last + 1) {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = S::one() / sum;
    for v in row.iter_mut().take(last + 1) {
        *v = *v * inv;
    }
    for v in row.iter_mut().skip(last + 1) {
        *v = S::zero();
    }
}

/// Stable softmax of a logit vector.
pub(crate) fn softmax1<S: Scalar>(logits: &Array1<S>) -> Array1<S> {
    let max = logits.iter().cloned().fold(S::neg_infinity(), S::max);
    let mut out = logits.mapv(|v| (v - max).exp());
    let inv = S::one() / out.sum();
    out.mapv_inplace(|v| v * inv);
    out
}

/// Fresh inverted-dropout mask with keep scale `1 / (1 - p)`.
fn dropout_mask<S: Scalar>(rng: &mut ChaCha12Rng, rows: usize, cols: usize, p: f64) -> Array2<S> {
    let keep = S::of(1.0 / (1.0 - p));
    let data: Vec<S> = (0..rows * cols)
        .map(|_| if rng.gen::<f64>() < p { S::zero() } else { keep })
        .collect();
    Array2::from_shape_vec((rows, cols), data).expect("shape matches data length")
}

/// Linear projection `input.dot(w.t())` with an optional low-rank delta.
fn project<S: Scalar>(
    input: &Array2<S>,
    w: &Array2<S>,
    lora: Option<(&LoraPair<S>, S)>,
    dropout_p: f64,
    rng: &mut Option<ChaCha12Rng>,
) -> (Array2<S>, ProjCache<S>) {
    let mut out = input.dot(&w.t());
    let Some((pair, scale)) = lora else {
        return (out, ProjCache { u: None, mask: None });
    };
    let mask = match rng {
        Some(r) if dropout_p > 0.0 => {
            Some(dropout_mask::<S>(r, input.nrows(), input.ncols(), dropout_p))
        }
        _ => None,
    };
    let dropped;
    let adapter_in: &Array2<S> = match &mask {
        Some(m) => {
            dropped = input * m;
            &dropped
        }
        None => input,
    };
    let u = adapter_in.dot(&pair.a.t());
    out.scaled_add(scale, &u.dot(&pair.b.t()));
    (out, ProjCache { u: Some(u), mask })
}

#[allow(clippy::too_many_arguments)]
fn layer_forward<S: Scalar>(
    spec: &ModelSpec,
    layer: &BackboneLayer<S>,
    lora: Option<&LoraLayer<S>>,
    ia3: Option<&Ia3Layer<S>>,
    x: &Array2<S>,
    dropout_p: f64,
    rng: &mut Option<ChaCha12Rng>,
    want_cache: bool,
) -> (Array2<S>, Option<LayerCache<S>>) {
    let seq = x.nrows();
    let d = spec.d_model;
    let hd = spec.head_dim();
    let group = spec.n_heads / spec.kv_heads();
    let lora_scale = S::of(spec.adapter.alpha / spec.adapter.rank.max(1) as f64);
    let pick = |pair: Option<&LoraPair<S>>| pair.map(|p| (p, lora_scale));

    // Attention sublayer.
    let (a, attn_inv_rms) = rmsnorm_rows(x, &layer.attn_norm);
    let (q, proj_q) = project(&a, &layer.wq, pick(lora.map(|l| &l.q)), dropout_p, rng);
    let (k_pre, proj_k) = project(&a, &layer.wk, pick(lora.map(|l| &l.k)), dropout_p, rng);
    let (v_pre, proj_v) = project(&a, &layer.wv, pick(lora.map(|l| &l.v)), dropout_p, rng);
    let (k, v) = match ia3 {
        Some(vecs) => (&k_pre * &vecs.keys, &v_pre * &vecs.values),
        None => (k_pre.clone(), v_pre.clone()),
    };

    let scale = S::of(1.0 / (hd as f64).sqrt());
    let mut ctx = Array2::<S>::zeros((seq, d));
    let mut probs_all = Vec::with_capacity(spec.n_heads);
    for h in 0..spec.n_heads {
        let g = h / group;
        let q_h = q.slice(s![.., h * hd..(h + 1) * hd]);
        let k_h = k.slice(s![.., g * hd..(g + 1) * hd]);
        let v_h = v.slice(s![.., g * hd..(g + 1) * hd]);
        let mut scores = q_h.dot(&k_h.t());
        scores.mapv_inplace(|v| v * scale);
        for i in 0..seq {
            causal_softmax_row(
                scores.row_mut(i).as_slice_mut().expect("contiguous row"),
                i,
            );
        }
        let ctx_h = scores.dot(&v_h);
        ctx.slice_mut(s![.., h * hd..(h + 1) * hd]).assign(&ctx_h);
        probs_all.push(scores);
    }
    let (o, proj_o) = project(&ctx, &layer.wo, pick(lora.map(|l| &l.o)), dropout_p, rng);
    let x_mid = x + &o;

    // Feed-forward sublayer.
    let (b, ff_inv_rms) = rmsnorm_rows(&x_mid, &layer.ff_norm);
    let f1 = b.dot(&layer.w1.t());
    let act_pre = f1.mapv(silu);
    let act = match ia3 {
        Some(vecs) => &act_pre * &vecs.ff,
        None => act_pre.clone(),
    };
    let x_out = &x_mid + &act.dot(&layer.w2.t());

    let cache = want_cache.then(|| LayerCache {
        x_in: x.clone(),
        attn_normed: a,
        attn_inv_rms,
        q,
        k_pre,
        v_pre,
        k,
        v,
        probs: probs_all,
        ctx,
        proj_q,
        proj_k,
        proj_v,
        proj_o,
        x_mid,
        ff_normed: b,
        ff_inv_rms,
        f1,
        act_pre,
        act,
    });
    (x_out, cache)
}

/// Runs the encoder and pools the hidden state of the last real
/// (non-padding) token.
///
/// `dropout_seed` selects training mode: when set (and the active adapter
/// uses dropout) masks are drawn from a ChaCha stream seeded with it, so the
/// same seed always reproduces the same masks. `None` is inference mode.
pub(crate) fn encoder_forward_impl<S: Scalar>(
    store: &ParameterStore<S>,
    tokens: &[u32],
    dropout_seed: Option<u64>,
    want_cache: bool,
) -> Result<ForwardOutput<S>> {
    let spec = &store.spec;
    if tokens.is_empty() {
        return Err(Error::Config("cannot encode an empty token sequence".into()));
    }
    if tokens.len() > spec.max_len {
        return Err(Error::Config(format!(
            "sequence length {} exceeds max_len {}",
            tokens.len(),
            spec.max_len
        )));
    }
    if let Some(bad) = tokens.iter().find(|t| **t as usize >= spec.vocab_size) {
        return Err(Error::Data(format!(
            "token id {} outside vocabulary of size {}",
            bad, spec.vocab_size
        )));
    }
    let last_real = tokens
        .iter()
        .rposition(|t| *t != PAD_ID)
        .ok_or_else(|| Error::Config("cannot pool a sequence of padding tokens".into()))?;

    let d = spec.d_model;
    let prefix = match &store.trainable.adapter {
        AdapterParams::Prefix(emb) => Some(emb),
        _ => None,
    };
    let n_prefix = prefix.map_or(0, |p| p.nrows());
    let total = n_prefix + tokens.len();
    let mut x = Array2::<S>::zeros((total, d));
    if let Some(p) = prefix {
        x.slice_mut(s![..n_prefix, ..]).assign(p);
    }
    for (i, tok) in tokens.iter().enumerate() {
        let row = &store.backbone.token_emb.row(*tok as usize) + &store.backbone.pos_emb.row(i);
        x.row_mut(n_prefix + i).assign(&row);
    }

    let dropout_p = match spec.adapter.kind {
        AdapterKind::Lora => spec.adapter.dropout,
        _ => 0.0,
    };
    let mut rng = match dropout_seed {
        Some(seed) if dropout_p > 0.0 => Some(ChaCha12Rng::seed_from_u64(seed)),
        _ => None,
    };

    let mut layer_caches = Vec::with_capacity(spec.n_layers);
    for (li, layer) in store.backbone.layers.iter().enumerate() {
        let lora = match &store.trainable.adapter {
            AdapterParams::Lora(layers) => Some(&layers[li]),
            _ => None,
        };
        let ia3 = match &store.trainable.adapter {
            AdapterParams::Ia3(layers) => Some(&layers[li]),
            _ => None,
        };
        let (next, cache) =
            layer_forward(spec, layer, lora, ia3, &x, dropout_p, &mut rng, want_cache);
        if let Some(c) = cache {
            layer_caches.push(c);
        }
        x = next;
    }

    let (normed, final_inv_rms) = rmsnorm_rows(&x, &store.backbone.final_norm);
    let pooled = n_prefix + last_real;
    let z = normed.row(pooled).to_owned();
    let cache = want_cache.then(|| Cache {
        n_prefix,
        pooled,
        layers: layer_caches,
        final_x: x,
        final_inv_rms,
    });
    Ok(ForwardOutput { z, cache })
}

/// Inference-mode encoder pass returning the pooled terminal hidden state.
pub fn encoder_forward<S: Scalar>(store: &ParameterStore<S>, tokens: &[u32]) -> Result<Array1<S>> {
    Ok(encoder_forward_impl(store, tokens, None, false)?.z)
}

/// Applies every task head to a pooled hidden state.
pub fn heads_forward<S: Scalar>(
    store: &ParameterStore<S>,
    z: &Array1<S>,
) -> Result<TaskPrediction<S>> {
    if z.len() != store.spec.d_model {
        return Err(Error::Config(format!(
            "pooled state width {} does not match d_model {}",
            z.len(),
            store.spec.d_model
        )));
    }
    let mut logits = Vec::with_capacity(store.trainable.heads.tasks.len());
    let mut probs = Vec::with_capacity(store.trainable.heads.tasks.len());
    for head in &store.trainable.heads.tasks {
        let l = head.w.dot(z) + &head.b;
        probs.push(softmax1(&l));
        logits.push(l);
    }
    Ok(TaskPrediction {
        probs,
        logits,
        z: z.clone(),
    })
}

/// Encoder plus heads in one call.
pub fn predict<S: Scalar>(store: &ParameterStore<S>, tokens: &[u32]) -> Result<TaskPrediction<S>> {
    let z = encoder_forward(store, tokens)?;
    heads_forward(store, &z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::default_schemas;

    fn store(kind: AdapterKind) -> ParameterStore<f64> {
        ParameterStore::init(ModelSpec::toy(kind, 64, default_schemas()), 11).unwrap()
    }

    #[test]
    fn probabilities_are_normalized() {
        let st = store(AdapterKind::Frozen);
        let pred = predict(&st, &[3, 9, 4, 17]).unwrap();
        for (schema, p) in st.spec.heads.iter().zip(&pred.probs) {
            assert_eq!(p.len(), schema.class_count());
            let sum: f64 = p.sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn trailing_padding_leaves_pooled_state_unchanged() {
        for kind in AdapterKind::ALL {
            let st = store(kind);
            let z = encoder_forward(&st, &[5, 8, 2]).unwrap();
            let z_pad = encoder_forward(&st, &[5, 8, 2, PAD_ID, PAD_ID]).unwrap();
            assert_eq!(z, z_pad, "{:?}", kind);
        }
    }

    #[test]
    fn empty_and_all_pad_sequences_are_rejected() {
        let st = store(AdapterKind::Frozen);
        assert!(encoder_forward(&st, &[]).is_err());
        assert!(encoder_forward(&st, &[PAD_ID, PAD_ID]).is_err());
    }

    #[test]
    fn out_of_vocabulary_token_is_rejected() {
        let st = store(AdapterKind::Frozen);
        assert!(encoder_forward(&st, &[64]).is_err());
    }

    #[test]
    fn over_length_sequence_is_rejected() {
        let st = store(AdapterKind::Frozen);
        let long = vec![1_u32; st.spec.max_len + 1];
        assert!(encoder_forward(&st, &long).is_err());
    }

    #[test]
    fn prefix_adapter_changes_output_but_keeps_width() {
        let frozen = store(AdapterKind::Frozen);
        let prefixed = store(AdapterKind::Prefix);
        let z0 = encoder_forward(&frozen, &[5, 8, 2]).unwrap();
        let z1 = encoder_forward(&prefixed, &[5, 8, 2]).unwrap();
        assert_eq!(z0.len(), z1.len());
        assert_ne!(z0, z1);
    }

    #[test]
    fn grouped_kv_projections_run() {
        let mut spec = ModelSpec::toy(AdapterKind::Lora, 64, default_schemas());
        spec.kv_dim = 16;
        let st = ParameterStore::<f64>::init(spec, 11).unwrap();
        let z = encoder_forward(&st, &[1, 2, 3, 4, 5]).unwrap();
        assert!(z.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn dropout_seed_reproduces_masks() {
        let st = store(AdapterKind::Lora);
        // Dropout only has an observable effect once LoRA B is nonzero.
        let mut st = st;
        if let AdapterParams::Lora(layers) = &mut st.trainable.adapter {
            for layer in layers {
                layer.q.b.fill(0.05);
                layer.o.b.fill(0.05);
            }
        }
        let a = encoder_forward_impl(&st, &[5, 8, 2, 9], Some(77), false).unwrap().z;
        let b = encoder_forward_impl(&st, &[5, 8, 2, 9], Some(77), false).unwrap().z;
        let c = encoder_forward_impl(&st, &[5, 8, 2, 9], Some(78), false).unwrap().z;
        let d = encoder_forward_impl(&st, &[5, 8, 2, 9], None, false).unwrap().z;
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
