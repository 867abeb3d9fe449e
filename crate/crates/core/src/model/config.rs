use crate::error::{Error, Result};

/// Network hyperparameters. Parameter shapes are a pure function of this.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub enc_depth: usize,
    pub dec_width: usize,
    /// Attention heads in every decoder block.
    pub dec_heads: usize,
    pub dec_depth: usize,
    /// Hidden width of every MLP as a multiple of its block width.
    pub mlp_ratio: usize,
    pub cube_dim: usize,
    pub num_classes: usize,
    /// Adds block-causal query-query attention to every decoder block.
    pub decoder_self_attention: bool,
    /// Adds the target token's positional embedding to the shared query.
    pub query_pos_embed: bool,
    pub ln_eps: f64,
    /// Frequency base of the sinusoidal positional embedding.
    pub pos_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 96,
            num_heads: 4,
            enc_depth: 4,
            dec_width: 512,
            dec_heads: 16,
            dec_depth: 4,
            mlp_ratio: 4,
            cube_dim: 128,
            num_classes: 8,
            decoder_self_attention: false,
            query_pos_embed: true,
            ln_eps: 1e-6,
            pos_base: 10_000.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("dec_width", self.dec_width),
            ("dec_heads", self.dec_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("cube_dim", self.cube_dim),
            ("num_classes", self.num_classes),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::config("embed_dim", "must be divisible by num_heads"));
        }
        if self.dec_width % self.dec_heads != 0 {
            return Err(Error::config("dec_width", "must be divisible by dec_heads"));
        }
        if self.ln_eps <= 0.0 {
            return Err(Error::config("ln_eps", "must be positive"));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    ///
    /// With `D = embed_dim`, `W = dec_width`, `r = mlp_ratio`, `P = cube_dim`,
    /// `K = num_classes`:
    ///
    /// * embedding `P·D + D`
    /// * encoder block `4D + 4(D² + D) + 2rD² + rD + D`
    /// * decoder input `2D + D·W + W`, query `W`
    /// * decoder block `4W + 4(W² + W) + 2rW² + rW + W`, plus `2W + 4(W² + W)`
    ///   with self-attention
    /// * output norm and head `2W + W·P + P`
    /// * classifier `2D + D·K + K`
    pub fn param_count(&self) -> usize {
        let (d, w, r, p, k) = (self.embed_dim, self.dec_width, self.mlp_ratio, self.cube_dim, self.num_classes);
        let attn = |x: usize| 4 * (x * x + x);
        let mlp = |x: usize| 2 * r * x * x + r * x + x;
        let enc_block = 4 * d + attn(d) + mlp(d);
        let mut dec_block = 4 * w + attn(w) + mlp(w);
        if self.decoder_self_attention {
            dec_block += 2 * w + attn(w);
        }
        (p * d + d)
            + self.enc_depth * enc_block
            + (2 * d + d * w + w)
            + w
            + self.dec_depth * dec_block
            + (2 * w + w * p + p)
            + (2 * d + d * k + k)
    }
}
