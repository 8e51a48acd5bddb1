//! Parameter containers, deterministic initialization, and flat traversal.

use crate::error::Result;
use crate::model::{AdapterKind, ModelSpec};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// One low-rank pair. The additive path is `scale * b.dot(a.dot(x))` with
/// `a: rank x d_in` and `b: d_out x rank`; the dense delta is never formed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraPair<S: Scalar> {
    pub a: Array2<S>,
    pub b: Array2<S>,
}

/// Low-rank pairs for the four attention projections of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraLayer<S: Scalar> {
    pub q: LoraPair<S>,
    pub k: LoraPair<S>,
    pub v: LoraPair<S>,
    pub o: LoraPair<S>,
}

/// Elementwise rescale vectors for one layer: keys and values (width
/// `kv_dim`) and the feed-forward intermediate (width `d_ff`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ia3Layer<S: Scalar> {
    pub keys: Array1<S>,
    pub values: Array1<S>,
    pub ff: Array1<S>,
}

/// Trainable adapter parameters for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AdapterParams<S: Scalar> {
    Frozen,
    Lora(Vec<LoraLayer<S>>),
    Ia3(Vec<Ia3Layer<S>>),
    /// `prefix_len x d_model` learned virtual-token embeddings.
    Prefix(Array2<S>),
}

/// Linear classification head for one task: `logits = w.dot(z) + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams<S: Scalar> {
    pub w: Array2<S>,
    pub b: Array1<S>,
}

/// All task heads, aligned with `ModelSpec::heads`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heads<S: Scalar> {
    pub tasks: Vec<HeadParams<S>>,
}

/// Everything the optimizer touches. Doubles as the gradient container,
/// since gradients share shapes with their parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainableParams<S: Scalar> {
    pub adapter: AdapterParams<S>,
    pub heads: Heads<S>,
}

/// Frozen backbone weights for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneLayer<S: Scalar> {
    pub attn_norm: Array1<S>,
    /// `d_model x d_model`, rows are output features.
    pub wq: Array2<S>,
    /// `kv_dim x d_model`.
    pub wk: Array2<S>,
    /// `kv_dim x d_model`.
    pub wv: Array2<S>,
    /// `d_model x d_model`.
    pub wo: Array2<S>,
    pub ff_norm: Array1<S>,
    /// `d_ff x d_model`.
    pub w1: Array2<S>,
    /// `d_model x d_ff`.
    pub w2: Array2<S>,
}

/// The frozen backbone. Reconstructed from `(spec, seed)` on checkpoint
/// load, so it is never serialized.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<S: Scalar> {
    pub token_emb: Array2<S>,
    pub pos_emb: Array2<S>,
    pub layers: Vec<BackboneLayer<S>>,
    pub final_norm: Array1<S>,
}

/// A full model: spec, frozen backbone, and trainable parameters.
#[derive(Debug, Clone)]
pub struct ParameterStore<S: Scalar> {
    pub spec: ModelSpec,
    /// Seed that deterministically reproduces the backbone and the
    /// trainable-parameter initialization.
    pub init_seed: u64,
    pub backbone: Backbone<S>,
    pub trainable: TrainableParams<S>,
}

/// Metadata attached to each flat parameter slice during traversal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamMeta {
    pub name: &'static str,
    /// Whether decoupled weight decay applies. Biases and rescale vectors
    /// are exempt.
    pub decay: bool,
}

// RNG stream layout for `ParameterStore::init`. Heads use one stream per
// task id so the same task initializes identically whether it is trained
// alone or alongside the other tasks.
const STREAM_BACKBONE: u64 = 0;
const STREAM_ADAPTER: u64 = 1;
const STREAM_HEAD_BASE: u64 = 10;

fn stream_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One standard normal draw via Box-Muller. Sampled in `f64` regardless of
/// the target precision so `f32` and `f64` models share a value stream.
fn standard_normal(rng: &mut ChaCha12Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn gaussian2<S: Scalar>(rng: &mut ChaCha12Rng, rows: usize, cols: usize, sigma: f64) -> Array2<S> {
    let data: Vec<S> = (0..rows * cols)
        .map(|_| S::of(standard_normal(rng) * sigma))
        .collect();
    Array2::from_shape_vec((rows, cols), data).expect("shape matches data length")
}

fn ones1<S: Scalar>(n: usize) -> Array1<S> {
    Array1::from_elem(n, S::one())
}

impl<S: Scalar> Backbone<S> {
    /// Deterministically initializes the frozen backbone from a seed.
    pub fn init(spec: &ModelSpec, seed: u64) -> Self {
        let rng = &mut stream_rng(seed, STREAM_BACKBONE);
        let sigma = spec.init_sigma;
        let d = spec.d_model;
        let token_emb = gaussian2(rng, spec.vocab_size, d, sigma);
        let pos_emb = gaussian2(rng, spec.max_len, d, sigma);
        let layers = (0..spec.n_layers)
            .map(|_| BackboneLayer {
                attn_norm: ones1(d),
                wq: gaussian2(rng, d, d, sigma),
                wk: gaussian2(rng, spec.kv_dim, d, sigma),
                wv: gaussian2(rng, spec.kv_dim, d, sigma),
                wo: gaussian2(rng, d, d, sigma),
                ff_norm: ones1(d),
                w1: gaussian2(rng, spec.d_ff, d, sigma),
                w2: gaussian2(rng, d, spec.d_ff, sigma),
            })
            .collect();
        Backbone {
            token_emb,
            pos_emb,
            layers,
            final_norm: ones1(d),
        }
    }

    /// Content hash over every backbone value, used to assert immutability.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        let mut eat = |arr: &[S]| {
            for v in arr {
                hasher.update(v.as_f64().to_bits().to_le_bytes());
            }
        };
        eat(self.token_emb.as_slice().expect("contiguous"));
        eat(self.pos_emb.as_slice().expect("contiguous"));
        for layer in &self.layers {
            eat(layer.attn_norm.as_slice().expect("contiguous"));
            eat(layer.wq.as_slice().expect("contiguous"));
            eat(layer.wk.as_slice().expect("contiguous"));
            eat(layer.wv.as_slice().expect("contiguous"));
            eat(layer.wo.as_slice().expect("contiguous"));
            eat(layer.ff_norm.as_slice().expect("contiguous"));
            eat(layer.w1.as_slice().expect("contiguous"));
            eat(layer.w2.as_slice().expect("contiguous"));
        }
        eat(self.final_norm.as_slice().expect("contiguous"));
        format!("{:x}", hasher.finalize())
    }
}

impl<S: Scalar> AdapterParams<S> {
    fn init(spec: &ModelSpec, seed: u64) -> Self {
        let rng = &mut stream_rng(seed, STREAM_ADAPTER);
        let sigma = spec.init_sigma;
        let d = spec.d_model;
        let kv = spec.kv_dim;
        match spec.adapter.kind {
            AdapterKind::Frozen => AdapterParams::Frozen,
            AdapterKind::Lora => {
                let r = spec.adapter.rank;
                // A is Gaussian, B starts at zero so the adapted model is
                // exactly the frozen model at initialization.
                let mut pair = |d_in: usize, d_out: usize| LoraPair {
                    a: gaussian2(rng, r, d_in, sigma),
                    b: Array2::zeros((d_out, r)),
                };
                let layers = (0..spec.n_layers)
                    .map(|_| LoraLayer {
                        q: pair(d, d),
                        k: pair(d, kv),
                        v: pair(d, kv),
                        o: pair(d, d),
                    })
                    .collect();
                AdapterParams::Lora(layers)
            }
            AdapterKind::Ia3 => {
                let layers = (0..spec.n_layers)
                    .map(|_| Ia3Layer {
                        keys: ones1(kv),
                        values: ones1(kv),
                        ff: ones1(spec.d_ff),
                    })
                    .collect();
                AdapterParams::Ia3(layers)
            }
            AdapterKind::Prefix => {
                AdapterParams::Prefix(gaussian2(rng, spec.adapter.prefix_len, d, sigma))
            }
        }
    }

    fn zeros(spec: &ModelSpec) -> Self {
        let d = spec.d_model;
        let kv = spec.kv_dim;
        match spec.adapter.kind {
            AdapterKind::Frozen => AdapterParams::Frozen,
            AdapterKind::Lora => {
                let r = spec.adapter.rank;
                let pair = |d_in: usize, d_out: usize| LoraPair {
                    a: Array2::zeros((r, d_in)),
                    b: Array2::zeros((d_out, r)),
                };
                AdapterParams::Lora(
                    (0..spec.n_layers)
                        .map(|_| LoraLayer {
                            q: pair(d, d),
                            k: pair(d, kv),
                            v: pair(d, kv),
                            o: pair(d, d),
                        })
                        .collect(),
                )
            }
            AdapterKind::Ia3 => AdapterParams::Ia3(
                (0..spec.n_layers)
                    .map(|_| Ia3Layer {
                        keys: Array1::zeros(kv),
                        values: Array1::zeros(kv),
                        ff: Array1::zeros(spec.d_ff),
                    })
                    .collect(),
            ),
            AdapterKind::Prefix => {
                AdapterParams::Prefix(Array2::zeros((spec.adapter.prefix_len, d)))
            }
        }
    }
}

impl<S: Scalar> TrainableParams<S> {
    /// Zero-valued parameters with the shapes the spec dictates; used as the
    /// gradient accumulator.
    pub fn zeros(spec: &ModelSpec) -> Self {
        TrainableParams {
            adapter: AdapterParams::zeros(spec),
            heads: Heads {
                tasks: spec
                    .heads
                    .iter()
                    .map(|schema| HeadParams {
                        w: Array2::zeros((schema.class_count(), spec.d_model)),
                        b: Array1::zeros(schema.class_count()),
                    })
                    .collect(),
            },
        }
    }

    /// Flat immutable views over every trainable tensor, in a fixed order.
    pub fn slices(&self) -> Vec<(ParamMeta, &[S])> {
        let mut out: Vec<(ParamMeta, &[S])> = Vec::new();
        let meta = |name: &'static str, decay: bool| ParamMeta { name, decay };
        match &self.adapter {
            AdapterParams::Frozen => {}
            AdapterParams::Lora(layers) => {
                for layer in layers {
                    for (name_a, name_b, pair) in [
                        ("lora.q.a", "lora.q.b", &layer.q),
                        ("lora.k.a", "lora.k.b", &layer.k),
                        ("lora.v.a", "lora.v.b", &layer.v),
                        ("lora.o.a", "lora.o.b", &layer.o),
                    ] {
                        out.push((meta(name_a, true), pair.a.as_slice().expect("contiguous")));
                        out.push((meta(name_b, true), pair.b.as_slice().expect("contiguous")));
                    }
                }
            }
            AdapterParams::Ia3(layers) => {
                for layer in layers {
                    out.push((meta("ia3.keys", false), layer.keys.as_slice().expect("contiguous")));
                    out.push((
                        meta("ia3.values", false),
                        layer.values.as_slice().expect("contiguous"),
                    ));
                    out.push((meta("ia3.ff", false), layer.ff.as_slice().expect("contiguous")));
                }
            }
            AdapterParams::Prefix(emb) => {
                out.push((meta("prefix", true), emb.as_slice().expect("contiguous")));
            }
        }
        for head in &self.heads.tasks {
            out.push((meta("head.w", true), head.w.as_slice().expect("contiguous")));
            out.push((meta("head.b", false), head.b.as_slice().expect("contiguous")));
        }
        out
    }

    /// Flat mutable views over every trainable tensor, in the same order as
    /// [`TrainableParams::slices`].
    pub fn slices_mut(&mut self) -> Vec<(ParamMeta, &mut [S])> {
        let mut out: Vec<(ParamMeta, &mut [S])> = Vec::new();
        let meta = |name: &'static str, decay: bool| ParamMeta { name, decay };
        match &mut self.adapter {
            AdapterParams::Frozen => {}
            AdapterParams::Lora(layers) => {
                for layer in layers {
                    for (name_a, name_b, pair) in [
                        ("lora.q.a", "lora.q.b", &mut layer.q),
                        ("lora.k.a", "lora.k.b", &mut layer.k),
                        ("lora.v.a", "lora.v.b", &mut layer.v),
                        ("lora.o.a", "lora.o.b", &mut layer.o),
                    ] {
                        out.push((meta(name_a, true), pair.a.as_slice_mut().expect("contiguous")));
                        out.push((meta(name_b, true), pair.b.as_slice_mut().expect("contiguous")));
                    }
                }
            }
            AdapterParams::Ia3(layers) => {
                for layer in layers {
                    out.push((
                        meta("ia3.keys", false),
                        layer.keys.as_slice_mut().expect("contiguous"),
                    ));
                    out.push((
                        meta("ia3.values", false),
                        layer.values.as_slice_mut().expect("contiguous"),
                    ));
                    out.push((meta("ia3.ff", false), layer.ff.as_slice_mut().expect("contiguous")));
                }
            }
            AdapterParams::Prefix(emb) => {
                out.push((meta("prefix", true), emb.as_slice_mut().expect("contiguous")));
            }
        }
        for head in &mut self.heads.tasks {
            out.push((meta("head.w", true), head.w.as_slice_mut().expect("contiguous")));
            out.push((meta("head.b", false), head.b.as_slice_mut().expect("contiguous")));
        }
        out
    }

    /// Total trainable element count.
    pub fn n_params(&self) -> u64 {
        self.slices().iter().map(|(_, s)| s.len() as u64).sum()
    }

    /// Sets every value to zero (gradient reset between steps).
    pub fn set_zero(&mut self) {
        for (_, s) in self.slices_mut() {
            for v in s {
                *v = S::zero();
            }
        }
    }

    /// Multiplies every value by `factor` (gradient normalization).
    pub fn scale(&mut self, factor: S) {
        for (_, s) in self.slices_mut() {
            for v in s {
                *v = *v * factor;
            }
        }
    }

    /// `self += factor * other`. Panics if shapes differ.
    pub fn add_scaled(&mut self, other: &Self, factor: S) {
        let theirs = other.slices();
        let mut ours = self.slices_mut();
        assert_eq!(ours.len(), theirs.len(), "mismatched parameter layout");
        for ((_, a), (_, b)) in ours.iter_mut().zip(theirs.iter()) {
            assert_eq!(a.len(), b.len(), "mismatched parameter shape");
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x = *x + *y * factor;
            }
        }
    }

    /// Largest absolute elementwise difference, widened to `f64`.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let theirs = other.slices();
        let ours = self.slices();
        assert_eq!(ours.len(), theirs.len(), "mismatched parameter layout");
        let mut worst = 0.0_f64;
        for ((_, a), (_, b)) in ours.iter().zip(theirs.iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                worst = worst.max((x.as_f64() - y.as_f64()).abs());
            }
        }
        worst
    }
}

impl<S: Scalar> ParameterStore<S> {
    /// Builds a model with a deterministic initialization.
    ///
    /// LoRA `B` matrices start at zero and rescale vectors start at one, so
    /// adapted forward passes coincide with the frozen model at step zero.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let backbone = Backbone::init(&spec, seed);
        let adapter = AdapterParams::init(&spec, seed);
        let heads = Heads {
            tasks: spec
                .heads
                .iter()
                .map(|schema| {
                    let rng = &mut stream_rng(seed, STREAM_HEAD_BASE + schema.task.index() as u64);
                    HeadParams {
                        w: gaussian2(rng, schema.class_count(), spec.d_model, spec.init_sigma),
                        b: Array1::zeros(schema.class_count()),
                    }
                })
                .collect(),
        };
        Ok(ParameterStore {
            spec,
            init_seed: seed,
            backbone,
            trainable: TrainableParams { adapter, heads },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::count_trainable;
    use crate::tasks::{default_schemas, TaskId};

    fn toy(kind: AdapterKind) -> ModelSpec {
        ModelSpec::toy(kind, 64, default_schemas())
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        for kind in AdapterKind::ALL {
            let a = ParameterStore::<f64>::init(toy(kind), 7).unwrap();
            let b = ParameterStore::<f64>::init(toy(kind), 7).unwrap();
            assert_eq!(a.backbone.fingerprint(), b.backbone.fingerprint());
            assert_eq!(a.trainable.max_abs_diff(&b.trainable), 0.0);
            let c = ParameterStore::<f64>::init(toy(kind), 8).unwrap();
            assert_ne!(a.backbone.fingerprint(), c.backbone.fingerprint());
        }
    }

    #[test]
    fn lora_b_starts_zero_and_rescales_start_one() {
        let store = ParameterStore::<f64>::init(toy(AdapterKind::Lora), 3).unwrap();
        if let AdapterParams::Lora(layers) = &store.trainable.adapter {
            for layer in layers {
                for pair in [&layer.q, &layer.k, &layer.v, &layer.o] {
                    assert!(pair.b.iter().all(|v| *v == 0.0));
                    assert!(pair.a.iter().any(|v| *v != 0.0));
                }
            }
        } else {
            panic!("expected lora adapter");
        }
        let store = ParameterStore::<f64>::init(toy(AdapterKind::Ia3), 3).unwrap();
        if let AdapterParams::Ia3(layers) = &store.trainable.adapter {
            for layer in layers {
                assert!(layer.keys.iter().all(|v| *v == 1.0));
                assert!(layer.values.iter().all(|v| *v == 1.0));
                assert!(layer.ff.iter().all(|v| *v == 1.0));
            }
        } else {
            panic!("expected ia3 adapter");
        }
    }

    #[test]
    fn traversal_covers_exactly_the_counted_parameters() {
        for kind in AdapterKind::ALL {
            let spec = toy(kind);
            let store = ParameterStore::<f64>::init(spec.clone(), 1).unwrap();
            let breakdown = count_trainable(&spec).unwrap();
            assert_eq!(store.trainable.n_params(), breakdown.total, "{:?}", kind);
        }
    }

    #[test]
    fn decay_exemptions_cover_biases_and_rescales() {
        let store = ParameterStore::<f64>::init(toy(AdapterKind::Ia3), 1).unwrap();
        for (meta, _) in store.trainable.slices() {
            if meta.name.starts_with("ia3.") || meta.name == "head.b" {
                assert!(!meta.decay, "{} should be decay-exempt", meta.name);
            } else {
                assert!(meta.decay, "{} should decay", meta.name);
            }
        }
    }

    #[test]
    fn head_init_is_stable_across_head_subsets() {
        // The HER2 head must initialize identically whether it is the only
        // head or one of seven.
        let full = ParameterStore::<f64>::init(toy(AdapterKind::Lora), 42).unwrap();
        let mut solo_spec = toy(AdapterKind::Lora);
        solo_spec.heads = vec![solo_spec.heads.last().unwrap().clone()];
        assert_eq!(solo_spec.heads[0].task, TaskId::Her2);
        let solo = ParameterStore::<f64>::init(solo_spec, 42).unwrap();
        let full_her2 = &full.trainable.heads.tasks[6].w;
        let solo_her2 = &solo.trainable.heads.tasks[0].w;
        assert_eq!(full_her2, solo_her2);
    }

    #[test]
    fn arithmetic_helpers_work() {
        let spec = toy(AdapterKind::Lora);
        let mut a = TrainableParams::<f64>::zeros(&spec);
        let store = ParameterStore::<f64>::init(spec, 5).unwrap();
        a.add_scaled(&store.trainable, 2.0);
        a.scale(0.5);
        assert_eq!(a.max_abs_diff(&store.trainable), 0.0);
        a.set_zero();
        assert!(a.slices().iter().all(|(_, s)| s.iter().all(|v| *v == 0.0)));
    }
}
