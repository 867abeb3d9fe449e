//! Encoder, cross-attention decoder, losses and the downstream head.
//!
//! Blocks are pre-norm. Encoder self-attention is restricted by the
//! layout's block-causal mask, so the encoder output of a cluster depends only
//! on clusters at the same or earlier order positions. Decoder queries are a
//! shared learned vector plus the target token's positional embedding; they
//! attend only to encoder outputs of strictly earlier clusters.

use std::sync::Arc;

use tensorad::{Gradients, NodeId, Real, Tape, Tensor};

use crate::error::Result;
use crate::layout::{BoolMatrix, LayoutPlan};
use crate::model::config::ModelConfig;
use crate::model::params::{Init, ModelParams, ParamId, ParamSpec};
use crate::model::posembed::positional_embedding;
use crate::tokenizer::{CubeTargets, GridDims, TokenGrid};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderBlock {
    pub norm1: Norm,
    pub attn: Attention,
    pub norm2: Norm,
    pub mlp: Mlp,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderBlock {
    pub self_attn: Option<(Norm, Attention)>,
    pub norm_q: Norm,
    pub cross: Attention,
    pub norm2: Norm,
    pub mlp: Mlp,
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init, decay: bool) -> ParamId {
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
            decay,
        });
        ParamId(self.specs.len() - 1)
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Linear {
        Linear {
            w: self.add(format!("{name}.weight"), &[din, dout], Init::TruncNormal(INIT_STD), true),
            b: self.add(format!("{name}.bias"), &[dout], Init::Zeros, false),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gamma: self.add(format!("{name}.gamma"), &[d], Init::Ones, false),
            beta: self.add(format!("{name}.beta"), &[d], Init::Zeros, false),
        }
    }

    fn attention(&mut self, name: &str, dq: usize, dkv: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), dq, dq),
            k: self.linear(&format!("{name}.k"), dkv, dq),
            v: self.linear(&format!("{name}.v"), dkv, dq),
            o: self.linear(&format!("{name}.o"), dq, dq),
        }
    }

    fn mlp(&mut self, name: &str, d: usize, ratio: usize) -> Mlp {
        Mlp {
            fc1: self.linear(&format!("{name}.fc1"), d, d * ratio),
            fc2: self.linear(&format!("{name}.fc2"), d * ratio, d),
        }
    }
}

/// Parameter layout of the network; the arrays themselves live in [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ArVideoModel {
    pub config: ModelConfig,
    pub embed: Linear,
    pub encoder: Vec<EncoderBlock>,
    pub dec_in_norm: Norm,
    pub dec_embed: Linear,
    pub query: ParamId,
    pub decoder: Vec<DecoderBlock>,
    pub dec_norm: Norm,
    pub head: Linear,
    pub fc_norm: Norm,
    pub classifier: Linear,
    specs: Vec<ParamSpec>,
}

/// Post-softmax encoder attention maps of one forward pass, `[layer][head]`.
#[derive(Clone, Debug, Default)]
pub struct AttentionRecord {
    pub layers: Vec<Vec<Tensor<f64>>>,
    /// Machine epsilon of the precision the maps were computed in.
    pub epsilon: f64,
}

impl ArVideoModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, w, r) = (config.embed_dim, config.dec_width, config.mlp_ratio);
        let mut b = Builder { specs: Vec::new() };
        let embed = b.linear("embed", config.cube_dim, d);
        let encoder = (0..config.enc_depth)
            .map(|i| EncoderBlock {
                norm1: b.norm(&format!("enc.{i}.norm1"), d),
                attn: b.attention(&format!("enc.{i}.attn"), d, d),
                norm2: b.norm(&format!("enc.{i}.norm2"), d),
                mlp: b.mlp(&format!("enc.{i}.mlp"), d, r),
            })
            .collect();
        let dec_in_norm = b.norm("dec.in_norm", d);
        let dec_embed = b.linear("dec.embed", d, w);
        let query = b.add("dec.query".into(), &[1, w], Init::Normal(INIT_STD), false);
        let decoder = (0..config.dec_depth)
            .map(|i| DecoderBlock {
                self_attn: config
                    .decoder_self_attention
                    .then(|| (b.norm(&format!("dec.{i}.self_norm"), w), b.attention(&format!("dec.{i}.self_attn"), w, w))),
                norm_q: b.norm(&format!("dec.{i}.norm_q"), w),
                cross: b.attention(&format!("dec.{i}.cross"), w, w),
                norm2: b.norm(&format!("dec.{i}.norm2"), w),
                mlp: b.mlp(&format!("dec.{i}.mlp"), w, r),
            })
            .collect();
        let dec_norm = b.norm("dec.norm", w);
        let head = b.linear("dec.head", w, config.cube_dim);
        let fc_norm = b.norm("cls.norm", d);
        let classifier = b.linear("cls.head", d, config.num_classes);
        Ok(Self {
            config,
            embed,
            encoder,
            dec_in_norm,
            dec_embed,
            query,
            decoder,
            dec_norm,
            head,
            fc_norm,
            classifier,
            specs: b.specs,
        })
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn init_params<F: Real>(&self, seed: u64) -> ModelParams<F> {
        ModelParams::init(&self.specs, seed)
    }
}

/// One forward computation on its own tape, with parameters bound lazily.
pub struct Forward<'p, F: Real> {
    pub tape: Tape<F>,
    params: &'p ModelParams<F>,
    bound: Vec<Option<NodeId>>,
    trainable: bool,
    capture: bool,
    pub attention: AttentionRecord,
}

impl<'p, F: Real> Forward<'p, F> {
    /// Parameters become differentiable leaves.
    pub fn new(params: &'p ModelParams<F>) -> Self {
        Self::with_mode(params, true)
    }

    /// Parameters become constants; nothing is differentiable.
    pub fn inference(params: &'p ModelParams<F>) -> Self {
        Self::with_mode(params, false)
    }

    fn with_mode(params: &'p ModelParams<F>, trainable: bool) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            trainable,
            capture: false,
            attention: AttentionRecord {
                layers: Vec::new(),
                epsilon: F::epsilon().to_f64().unwrap(),
            },
        }
    }

    /// Records encoder attention maps during the pass.
    pub fn capture_attention(mut self) -> Self {
        self.capture = true;
        self
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.bound[id.0] {
            return n;
        }
        let t = self.params.get(id).clone();
        let n = if self.trainable { self.tape.leaf(t) } else { self.tape.constant(t) };
        self.bound[id.0] = Some(n);
        n
    }

    /// Token cube vectors as a `[N, cube_dim]` node.
    pub fn grid(&mut self, g: &TokenGrid, differentiable: bool) -> NodeId {
        let t = grid_tensor(g);
        if differentiable {
            self.tape.leaf(t)
        } else {
            self.tape.constant(t)
        }
    }

    /// Gradients of every bound parameter, in parameter order.
    pub fn param_grads(&self, grads: &mut Gradients<F>) -> Vec<Option<Tensor<F>>> {
        self.bound.iter().map(|b| b.and_then(|n| grads.take(n))).collect()
    }

    fn linear(&mut self, x: NodeId, l: Linear) -> Result<NodeId> {
        let w = self.param(l.w);
        let b = self.param(l.b);
        let y = self.tape.matmul(x, w)?;
        Ok(self.tape.add(y, b)?)
    }

    fn norm(&mut self, x: NodeId, n: Norm, eps: f64) -> Result<NodeId> {
        let g = self.param(n.gamma);
        let b = self.param(n.beta);
        Ok(self.tape.layernorm(x, g, b, F::from_f64(eps).unwrap())?)
    }

    fn mlp(&mut self, x: NodeId, m: Mlp) -> Result<NodeId> {
        let h = self.linear(x, m.fc1)?;
        let h = self.tape.gelu(h)?;
        self.linear(h, m.fc2)
    }

    fn attention(
        &mut self,
        xq: NodeId,
        xkv: NodeId,
        a: Attention,
        heads: usize,
        mask: &Arc<[bool]>,
        record: bool,
    ) -> Result<NodeId> {
        let q = self.linear(xq, a.q)?;
        let k = self.linear(xkv, a.k)?;
        let v = self.linear(xkv, a.v)?;
        let width = self.tape.value(q).shape()[1];
        let dh = width / heads;
        let scale = F::from_f64(1.0 / (dh as f64).sqrt()).unwrap();
        let mut outs = Vec::with_capacity(heads);
        let mut maps = Vec::new();
        for h in 0..heads {
            let qh = self.tape.slice_cols(q, h * dh, dh)?;
            let kh = self.tape.slice_cols(k, h * dh, dh)?;
            let vh = self.tape.slice_cols(v, h * dh, dh)?;
            let kt = self.tape.transpose(kh)?;
            let s = self.tape.matmul(qh, kt)?;
            let s = self.tape.scale(s, scale)?;
            let p = self.tape.masked_softmax(s, mask)?;
            if record {
                maps.push(self.tape.value(p).cast::<f64>());
            }
            outs.push(self.tape.matmul(p, vh)?);
        }
        if record {
            self.attention.layers.push(maps);
        }
        let o = self.tape.concat(&outs, 1)?;
        self.linear(o, a.o)
    }
}

pub fn grid_tensor<F: Real>(g: &TokenGrid) -> Tensor<F> {
    Tensor::new(
        &[g.len(), g.cube_dim],
        g.cubes.iter().map(|&v| F::from_f32(v).unwrap()).collect(),
    )
    .unwrap()
}

fn pos_table<F: Real>(dims: GridDims, tokens: &[usize], dim: usize, base: f64) -> Tensor<F> {
    let mut data = Vec::with_capacity(tokens.len() * dim);
    for &tok in tokens {
        let (t, h, w) = dims.coords(tok);
        data.extend(positional_embedding(t, h, w, dim, base).into_iter().map(|v| F::from_f64(v).unwrap()));
    }
    Tensor::new(&[tokens.len(), dim], data).unwrap()
}

impl ArVideoModel {
    /// Linear projection of the selected cubes plus their positional embedding.
    pub fn embed_tokens<F: Real>(&self, f: &mut Forward<F>, grid: NodeId, dims: GridDims, tokens: &[usize]) -> Result<NodeId> {
        let x = f.tape.gather_rows(grid, tokens)?;
        let x = f.linear(x, self.embed)?;
        let pos = f.tape.constant(pos_table(dims, tokens, self.config.embed_dim, self.config.pos_base));
        Ok(f.tape.add(x, pos)?)
    }

    /// Runs the encoder blocks over an embedded sequence.
    pub fn run_encoder<F: Real>(&self, f: &mut Forward<F>, mut x: NodeId, mask: &BoolMatrix) -> Result<NodeId> {
        let eps = self.config.ln_eps;
        let record = f.capture;
        for blk in &self.encoder {
            let h = f.norm(x, blk.norm1, eps)?;
            let a = f.attention(h, h, blk.attn, self.config.num_heads, &mask.data, record)?;
            x = f.tape.add(x, a)?;
            let h = f.norm(x, blk.norm2, eps)?;
            let m = f.mlp(h, blk.mlp)?;
            x = f.tape.add(x, m)?;
        }
        Ok(x)
    }

    /// Encoder outputs aligned with `plan.encoder_tokens`.
    pub fn encode<F: Real>(&self, f: &mut Forward<F>, plan: &LayoutPlan, grid: NodeId) -> Result<NodeId> {
        let x = self.embed_tokens(f, grid, plan.dims, &plan.encoder_tokens)?;
        self.run_encoder(f, x, &plan.enc_mask)
    }

    /// Predicted cube vectors, one row per entry of `plan.target_tokens`.
    pub fn decode_predict<F: Real>(&self, f: &mut Forward<F>, enc_out: NodeId, plan: &LayoutPlan) -> Result<NodeId> {
        let cfg = &self.config;
        let eps = cfg.ln_eps;
        let mem = f.norm(enc_out, self.dec_in_norm, eps)?;
        let mem = f.linear(mem, self.dec_embed)?;
        let pos = if cfg.query_pos_embed {
            pos_table(plan.dims, &plan.target_tokens, cfg.dec_width, cfg.pos_base)
        } else {
            Tensor::zeros(&[plan.dec_len(), cfg.dec_width])
        };
        let pos = f.tape.constant(pos);
        let query = f.param(self.query);
        let mut h = f.tape.add(pos, query)?;
        for blk in &self.decoder {
            if let Some((norm, attn)) = blk.self_attn {
                let n = f.norm(h, norm, eps)?;
                let a = f.attention(n, n, attn, cfg.dec_heads, &plan.dec_self_mask.data, false)?;
                h = f.tape.add(h, a)?;
            }
            let n = f.norm(h, blk.norm_q, eps)?;
            let a = f.attention(n, mem, blk.cross, cfg.dec_heads, &plan.cross_mask.data, false)?;
            h = f.tape.add(h, a)?;
            let n = f.norm(h, blk.norm2, eps)?;
            let m = f.mlp(n, blk.mlp)?;
            h = f.tape.add(h, m)?;
        }
        let h = f.norm(h, self.dec_norm, eps)?;
        f.linear(h, self.head)
    }

    /// Mean of squared errors over all target tokens and cube dimensions.
    pub fn pretrain_loss<F: Real>(&self, f: &mut Forward<F>, pred: NodeId, targets: &CubeTargets, plan: &LayoutPlan) -> Result<NodeId> {
        let t = target_tensor(targets, &plan.target_tokens);
        Ok(f.tape.mse(pred, &t)?)
    }

    /// One MSE term per target cluster, in `plan.target_groups` order.
    pub fn cluster_loss_terms<F: Real>(
        &self,
        f: &mut Forward<F>,
        pred: NodeId,
        targets: &CubeTargets,
        plan: &LayoutPlan,
    ) -> Result<Vec<NodeId>> {
        plan.target_ranges()
            .into_iter()
            .map(|r| {
                let rows: Vec<usize> = r.clone().collect();
                let p = f.tape.gather_rows(pred, &rows)?;
                let t = target_tensor(targets, &plan.target_tokens[r]);
                Ok(f.tape.mse(p, &t)?)
            })
            .collect()
    }

    /// Mean-pooled encoder features with every token visible and no mask.
    pub fn pooled_features<F: Real>(&self, f: &mut Forward<F>, grid: NodeId, dims: GridDims) -> Result<NodeId> {
        let tokens: Vec<usize> = (0..dims.len()).collect();
        let x = self.embed_tokens(f, grid, dims, &tokens)?;
        let full = BoolMatrix::from_fn(tokens.len(), tokens.len(), |_, _| true);
        let x = self.run_encoder(f, x, &full)?;
        Ok(f.tape.mean_rows(x)?)
    }

    /// Class logits `[1, num_classes]`: pooled features, norm, linear head.
    pub fn downstream_logits<F: Real>(&self, f: &mut Forward<F>, grid: NodeId, dims: GridDims) -> Result<NodeId> {
        let pooled = self.pooled_features(f, grid, dims)?;
        let h = f.norm(pooled, self.fc_norm, self.config.ln_eps)?;
        f.linear(h, self.classifier)
    }
}

fn target_tensor<F: Real>(targets: &CubeTargets, tokens: &[usize]) -> Tensor<F> {
    let mut data = Vec::with_capacity(tokens.len() * targets.cube_dim);
    for &t in tokens {
        data.extend(targets.cube(t).iter().map(|&v| F::from_f64(v).unwrap()));
    }
    Tensor::new(&[tokens.len(), targets.cube_dim], data).unwrap()
}

/// Encoder outputs and attention maps for one plan, without gradients.
pub fn encode<F: Real>(
    model: &ArVideoModel,
    params: &ModelParams<F>,
    plan: &LayoutPlan,
    grid: &TokenGrid,
) -> Result<(Tensor<F>, AttentionRecord)> {
    let mut f = Forward::inference(params).capture_attention();
    let g = f.grid(grid, false);
    let out = model.encode(&mut f, plan, g)?;
    Ok((f.tape.value(out).clone(), f.attention))
}

/// Predicted target cubes for one plan, without gradients.
pub fn predict<F: Real>(model: &ArVideoModel, params: &ModelParams<F>, plan: &LayoutPlan, grid: &TokenGrid) -> Result<Tensor<F>> {
    let mut f = Forward::inference(params);
    let g = f.grid(grid, false);
    let enc = model.encode(&mut f, plan, g)?;
    let pred = model.decode_predict(&mut f, enc, plan)?;
    Ok(f.tape.value(pred).clone())
}

/// Class logits for one video, without gradients.
pub fn downstream_forward<F: Real>(model: &ArVideoModel, params: &ModelParams<F>, grid: &TokenGrid) -> Result<Vec<F>> {
    let mut f = Forward::inference(params);
    let g = f.grid(grid, false);
    let logits = model.downstream_logits(&mut f, g, grid.dims)?;
    Ok(f.tape.value(logits).data().to_vec())
}
