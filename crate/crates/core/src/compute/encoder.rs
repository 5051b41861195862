//! Transformer building blocks shared by the speech encoder, text encoder and decoder.
//!
//! Blocks are pre-norm: `h += Attn(LN(h))`, an optional depthwise temporal
//! convolution branch `h += DwConv3(LN(h))`, then `h += FFN(LN(h))`. Positional
//! information is a fixed sinusoidal table added once before the first block.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamGroup, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{ClsrError, Result};

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (fan_in.max(1) as f64).sqrt();
        Self::with_std(store, name, group, fan_in, fan_out, std, rng)
    }

    pub fn with_std<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            group,
            Tensor::randn(fan_in, fan_out, std, rng),
        );
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(1, fan_out));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        store.value(self.weight).rows()
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.value(self.weight).cols()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), group, Tensor::full(1, dim, 1.0)),
            bias: store.add(format!("{name}.bias"), group, Tensor::zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.q"), group, dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), group, dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), group, dim, dim, rng),
            output: Linear::new(store, &format!("{name}.o"), group, dim, dim, rng),
            heads,
        }
    }

    /// Unmasked scaled dot-product attention of `queries` over `memory`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, queries: Var, memory: Var) -> Var {
        let q = self.query.forward(g, store, queries);
        let k = self.key.forward(g, store, memory);
        let v = self.value.forward(g, store, memory);
        let dim = g.shape(q).1;
        let head_dim = dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * head_dim, head_dim),
                    g.slice_cols(k, h * head_dim, head_dim),
                    g.slice_cols(v, h * head_dim, head_dim),
                )
            };
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let p = g.softmax_rows(scores);
            outs.push(g.matmul(p, vh));
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.output.forward(g, store, merged)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), group, dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), group, hidden, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.up.forward(g, store, x);
        let h = g.gelu(h);
        self.down.forward(g, store, h)
    }
}

/// Depthwise convolution over time with kernel 3 and same padding.
#[derive(Clone, Copy, Debug)]
pub struct DepthwiseConv3 {
    /// `3 x d`: taps for offsets -1, 0, +1.
    pub taps: ParamId,
    pub bias: ParamId,
}

impl DepthwiseConv3 {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            taps: store.add(format!("{name}.taps"), group, Tensor::randn(3, dim, 0.3, rng)),
            bias: store.add(format!("{name}.bias"), group, Tensor::zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let taps = g.param(store, self.taps);
        let mut acc: Option<Var> = None;
        // out[i] = Σ_o taps[o] ⊙ x[i + o]
        for (row, offset) in [(0usize, -1isize), (1, 0), (2, 1)] {
            let shifted = if offset == 0 { x } else { g.shift_rows(x, -offset) };
            let tap = g.slice_rows(taps, row, 1);
            let term = g.mul_row(shifted, tap);
            acc = Some(match acc {
                Some(a) => g.add(a, term),
                None => term,
            });
        }
        let b = g.param(store, self.bias);
        g.add_row(acc.expect("three taps"), b)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub conv: Option<(LayerNorm, DepthwiseConv3)>,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        config: &EncoderConfig,
        rng: &mut R,
    ) -> Self {
        let d = config.d_model;
        Self {
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), group, d),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), group, d, config.heads, rng),
            conv: config.conv_branch.then(|| {
                (
                    LayerNorm::new(store, &format!("{name}.conv_norm"), group, d),
                    DepthwiseConv3::new(store, &format!("{name}.conv"), group, d, rng),
                )
            }),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), group, d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), group, d, config.ff_dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Var {
        let n = self.attn_norm.forward(g, store, h);
        let a = self.attn.forward(g, store, n, n);
        let mut h = g.add(h, a);
        if let Some((norm, conv)) = &self.conv {
            let n = norm.forward(g, store, h);
            let c = conv.forward(g, store, n);
            h = g.add(h, c);
        }
        let n = self.ffn_norm.forward(g, store, h);
        let f = self.ffn.forward(g, store, n);
        g.add(h, f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Width of the rows fed to the encoder; a projection is created when it differs
    /// from `d_model` or `project_input` is set.
    pub input_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub layers: usize,
    pub conv_branch: bool,
    pub positional: bool,
    pub project_input: bool,
    /// Prepend a trainable CLS row.
    pub cls: bool,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(ClsrError::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !self.project_input && self.input_dim != self.d_model {
            return Err(ClsrError::Config("unprojected input must match d_model".into()));
        }
        Ok(())
    }
}

/// Encoder parameters: optional input projection and CLS row, a block stack and a final norm.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub input: Option<Linear>,
    pub cls: Option<ParamId>,
    pub blocks: Vec<EncoderBlock>,
    pub final_norm: Option<LayerNorm>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        config: EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let input = config.project_input.then(|| {
            Linear::new(
                store,
                &format!("{name}.input"),
                group,
                config.input_dim,
                config.d_model,
                rng,
            )
        });
        let cls = config
            .cls
            .then(|| store.add(format!("{name}.cls"), group, Tensor::randn(1, config.d_model, 1.0, rng)));
        let blocks = (0..config.layers)
            .map(|i| EncoderBlock::new(store, &format!("{name}.layer{i}"), group, &config, rng))
            .collect();
        let final_norm =
            (config.layers > 0).then(|| LayerNorm::new(store, &format!("{name}.final_norm"), group, config.d_model));
        Ok(Self {
            config,
            input,
            cls,
            blocks,
            final_norm,
        })
    }

    /// `x` is `rows x input_dim`; the result is `(rows [+1 with CLS]) x d_model`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (rows, cols) = g.shape(x);
        if cols != self.config.input_dim {
            return Err(ClsrError::Shape(format!(
                "encoder expects width {}, got {cols}",
                self.config.input_dim
            )));
        }
        if rows == 0 && self.cls.is_none() {
            return Err(ClsrError::Shape("encoder input has no rows".into()));
        }
        let mut h = match &self.input {
            Some(lin) => lin.forward(g, store, x),
            None => x,
        };
        if let Some(cls) = self.cls {
            let c = g.param(store, cls);
            h = if rows == 0 { c } else { g.concat_rows(&[c, h]) };
        }
        if self.blocks.is_empty() {
            return Ok(h);
        }
        if self.config.positional {
            let n = g.shape(h).0;
            let pe = g.constant(sinusoidal_positions(n, self.config.d_model));
            h = g.add(h, pe);
        }
        for block in &self.blocks {
            h = block.forward(g, store, h);
        }
        let norm = self.final_norm.as_ref().expect("final norm exists with blocks");
        Ok(norm.forward(g, store, h))
    }
}

/// Fixed sinusoidal table: `pe[p][2i] = sin(p / 10000^(2i/d))`, `pe[p][2i+1] = cos(..)`.
pub fn sinusoidal_positions(rows: usize, dim: usize) -> Tensor {
    let mut pe = Tensor::zeros(rows, dim);
    for p in 0..rows {
        for i in 0..dim {
            let exponent = (2 * (i / 2)) as f64 / dim as f64;
            let angle = p as f64 / 10000f64.powf(exponent);
            pe.set(p, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolingMode {
    /// Row 0, which must be a prepended CLS row.
    Cls,
    Mean,
}

/// Sentence vector (`1 x d`) from token-level representations.
pub fn pool(g: &mut Graph, reps: Var, mode: PoolingMode) -> Result<Var> {
    let rows = g.shape(reps).0;
    if rows == 0 {
        return Err(ClsrError::Shape("cannot pool an empty sequence".into()));
    }
    Ok(match mode {
        PoolingMode::Cls => g.slice_rows(reps, 0, 1),
        PoolingMode::Mean => {
            let s = g.sum_cols(reps);
            g.scale(s, 1.0 / rows as f64)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::gradcheck::{grad_check, grad_check_params};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(layers: usize, positional: bool) -> EncoderConfig {
        EncoderConfig {
            input_dim: 5,
            d_model: 8,
            heads: 2,
            ff_dim: 12,
            layers,
            conv_branch: true,
            positional,
            project_input: true,
            cls: false,
        }
    }

    #[test]
    fn output_shape_follows_input_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "enc", ParamGroup::SpeechEncoder, config(2, true), &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(9, 5, 1.0, &mut rng));
        let h = enc.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(h), (9, 8));
    }

    #[test]
    fn zero_layers_is_input_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "enc", ParamGroup::SpeechEncoder, config(0, true), &mut rng).unwrap();
        let input = Tensor::randn(4, 5, 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let h = enc.forward(&mut g, &store, x).unwrap();
        let lin = enc.input.unwrap();
        let mut expected = input.matmul(store.value(lin.weight));
        for r in 0..expected.rows() {
            for (o, b) in expected.row_mut(r).iter_mut().zip(store.value(lin.bias).row(0)) {
                *o += b;
            }
        }
        assert_eq!(g.value(h), &expected);
    }

    #[test]
    fn rejects_mismatched_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "enc", ParamGroup::SpeechEncoder, config(1, true), &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(3, 4));
        assert!(matches!(enc.forward(&mut g, &store, x), Err(ClsrError::Shape(_))));
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut cfg = config(1, true);
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn permutation_equivariant_without_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let mut cfg = config(2, false);
        cfg.conv_branch = false;
        let enc = Encoder::new(&mut store, "enc", ParamGroup::SpeechEncoder, cfg, &mut rng).unwrap();
        let input = Tensor::randn(5, 5, 1.0, &mut rng);
        let perm = [3usize, 0, 4, 1, 2];
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let h = enc.forward(&mut g, &store, x).unwrap();
        let xp = g.constant(input.select_rows(&perm));
        let hp = enc.forward(&mut g, &store, xp).unwrap();
        let expected = g.value(h).select_rows(&perm);
        for (a, b) in expected.data().iter().zip(g.value(hp).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "enc", ParamGroup::SpeechEncoder, config(2, true), &mut rng).unwrap();
        let w = Tensor::randn(3, 8, 1.0, &mut rng);
        let x = Tensor::randn(3, 5, 1.0, &mut rng);
        let report = grad_check(
            |g, x| {
                let h = enc.forward(g, &store, x).unwrap();
                let h = g.mul_const(h, w.clone());
                g.sum(h)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(report.passes(1e-3), "{}", report.max_rel_error);
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let mut cfg = config(1, true);
        cfg.cls = true;
        let enc = Encoder::new(&mut store, "enc", ParamGroup::TextEncoder, cfg, &mut rng).unwrap();
        let x = Tensor::randn(3, 5, 1.0, &mut rng);
        let w = Tensor::randn(1, 8, 1.0, &mut rng);
        let ids: Vec<_> = store.ids().collect();
        let report = grad_check_params(
            &store,
            &ids,
            |g, s| {
                let xv = g.constant(x.clone());
                let h = enc.forward(g, s, xv).unwrap();
                assert_eq!(g.shape(h), (4, 8));
                let v = pool(g, h, PoolingMode::Cls).unwrap();
                let v = g.mul_const(v, w.clone());
                g.sum(v)
            },
            1e-4,
        )
        .unwrap();
        assert!(report.passes(1e-3), "{}", report.max_rel_error);
    }

    #[test]
    fn pooling_laws() {
        let mut g = Graph::new();
        let r = vec![0.5, -1.0, 2.0];
        let neg: Vec<f64> = r.iter().map(|v| -v).collect();
        let same = g.constant(Tensor::from_rows(&[r.clone(), r.clone()]).unwrap());
        let m = pool(&mut g, same, PoolingMode::Mean).unwrap();
        assert_eq!(g.value(m).row(0), r.as_slice());
        let opposite = g.constant(Tensor::from_rows(&[r.clone(), neg]).unwrap());
        let m = pool(&mut g, opposite, PoolingMode::Mean).unwrap();
        assert!(g.value(m).data().iter().all(|&v| v == 0.0));
        let c = pool(&mut g, opposite, PoolingMode::Cls).unwrap();
        assert_eq!(g.value(c).row(0), r.as_slice());
        let empty = g.constant(Tensor::zeros(0, 3));
        assert!(pool(&mut g, empty, PoolingMode::Mean).is_err());
    }
}
