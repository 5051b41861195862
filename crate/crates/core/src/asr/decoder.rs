use rand::Rng;

use crate::compute::encoder::{FeedForward, LayerNorm, MultiHeadAttention};
use crate::compute::{sinusoidal_positions, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::corpus::TokenSequence;
use crate::error::{ClsrError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub layers: usize,
    pub vocab_size: usize,
    /// Add sinusoidal positions to the token queries.
    pub positional: bool,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(ClsrError::Config(format!(
                "decoder d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.vocab_size == 0 {
            return Err(ClsrError::Config("decoder needs a non-empty vocabulary".into()));
        }
        Ok(())
    }
}

/// `logits = x · Wᵀ + b` with `W` stored `|V| x d_m`, so row `v` of `W` belongs to token `v`.
#[derive(Clone, Copy, Debug)]
pub struct OutputLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl OutputLayer {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul_t(x, w);
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub self_norm: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderBlock {
    fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var, memory: Var) -> Var {
        let n = self.self_norm.forward(g, store, h);
        let a = self.self_attn.forward(g, store, n, n);
        let h = g.add(h, a);
        let n = self.cross_norm.forward(g, store, h);
        let c = self.cross_attn.forward(g, store, n, memory);
        let h = g.add(h, c);
        let n = self.ffn_norm.forward(g, store, h);
        let f = self.ffn.forward(g, store, n);
        g.add(h, f)
    }
}

/// Non-autoregressive decoder: all `n` token queries attend to each other and to
/// the `t` frames at once; no causal mask.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    /// Normalises queries so acoustic and substituted text rows enter on one scale.
    pub input_norm: LayerNorm,
    pub blocks: Vec<DecoderBlock>,
    pub final_norm: LayerNorm,
    pub output: OutputLayer,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: DecoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let group = ParamGroup::Decoder;
        let d = config.d_model;
        let blocks = (0..config.layers)
            .map(|i| {
                let name = format!("decoder.layer{i}");
                DecoderBlock {
                    self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), group, d),
                    self_attn: MultiHeadAttention::new(
                        store,
                        &format!("{name}.self_attn"),
                        group,
                        d,
                        config.heads,
                        rng,
                    ),
                    cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), group, d),
                    cross_attn: MultiHeadAttention::new(
                        store,
                        &format!("{name}.cross_attn"),
                        group,
                        d,
                        config.heads,
                        rng,
                    ),
                    ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), group, d),
                    ffn: FeedForward::new(store, &format!("{name}.ffn"), group, d, config.ff_dim, rng),
                }
            })
            .collect();
        let std = 1.0 / (d as f64).sqrt();
        let output = OutputLayer {
            weight: store.add(
                "decoder.output.weight",
                group,
                Tensor::randn(config.vocab_size, d, std, rng),
            ),
            bias: store.add("decoder.output.bias", group, Tensor::zeros(1, config.vocab_size)),
        };
        Ok(Self {
            config,
            input_norm: LayerNorm::new(store, "decoder.input_norm", group, d),
            blocks,
            final_norm: LayerNorm::new(store, "decoder.final_norm", group, d),
            output,
        })
    }

    /// Token logits (`n x |V|`) for queries `e` (`n x d_m`) over frames `hs` (`t x d_m`).
    pub fn decode(&self, g: &mut Graph, store: &ParamStore, hs: Var, e: Var) -> Result<Var> {
        let d = self.config.d_model;
        let (n, ed) = g.shape(e);
        let (t, hd) = g.shape(hs);
        if n == 0 {
            return Err(ClsrError::Shape("decoder needs at least one query row".into()));
        }
        if t == 0 || ed != d || hd != d {
            return Err(ClsrError::Shape(format!(
                "decoder expects width {d}; got queries {n}x{ed}, frames {t}x{hd}"
            )));
        }
        let mut h = self.input_norm.forward(g, store, e);
        if self.config.positional {
            let pe = g.constant(sinusoidal_positions(n, d));
            h = g.add(h, pe);
        }
        for block in &self.blocks {
            h = block.forward(g, store, h, hs);
        }
        let h = self.final_norm.forward(g, store, h);
        Ok(self.output.forward(g, store, h))
    }

    pub fn output_weight<'a>(&self, store: &'a ParamStore) -> &'a Tensor {
        store.value(self.output.weight)
    }
}

/// Row argmax of the logits; ties go to the lowest token id.
pub fn transcribe(logits: &Tensor) -> TokenSequence {
    (0..logits.rows()).map(|r| logits.row_argmax(r)).collect()
}

/// `E^c`: row `i` is the output-layer weight row of `tokens[i]`.
pub fn text_embeds_from_output_layer(tokens: &[usize], weight: &Tensor) -> Result<Tensor> {
    if let Some(&bad) = tokens.iter().find(|&&t| t >= weight.rows()) {
        return Err(ClsrError::Data(format!(
            "token id {bad} outside the {}-token output layer",
            weight.rows()
        )));
    }
    Ok(weight.select_rows(tokens))
}
