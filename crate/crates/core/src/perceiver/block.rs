//! One latent cross-attention unit: cross-attention from the latent array
//! into an input array, a feed-forward layer, then `depth` rounds of latent
//! self-attention and feed-forward. Every sub-block is pre-normalised and
//! wrapped in a residual connection.

use rand::Rng;

use super::{Graph, ModelError, PerceiverConfig};
use crate::tensor::{Matrix, NodeId, ParamStore};

/// Input geometry of a unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockShape {
    /// Rows of the input array (keys and values).
    pub input_rows: usize,
    /// Columns of the input array.
    pub input_cols: usize,
}

pub(crate) struct BlockOutput {
    pub latent: NodeId,
    /// Cross-attention probabilities, one `latents x input_rows` node per head.
    pub cross_attention: Vec<NodeId>,
}

fn init_linear<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.insert(
        format!("{prefix}.w"),
        Matrix::uniform(fan_in, fan_out, bound, rng),
    );
    store.insert(format!("{prefix}.b"), Matrix::zeros(1, fan_out));
}

fn init_projection<R: Rng>(
    store: &mut ParamStore,
    name: String,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.insert(name, Matrix::uniform(fan_in, fan_out, bound, rng));
}

fn init_norm(store: &mut ParamStore, prefix: &str, width: usize) {
    store.insert(format!("{prefix}.g"), Matrix::filled(1, width, 1.0));
    store.insert(format!("{prefix}.b"), Matrix::zeros(1, width));
}

pub(crate) fn init_ffn<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    input: usize,
    hidden: usize,
    output: usize,
    rng: &mut R,
) {
    init_linear(store, &format!("{prefix}.l1"), input, hidden, rng);
    init_linear(store, &format!("{prefix}.l2"), hidden, output, rng);
}

fn init_attention<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    heads: usize,
    query_width: usize,
    input_width: usize,
    cfg: &PerceiverConfig,
    rng: &mut R,
) {
    let dh = cfg.head_dim();
    for h in 0..heads {
        init_projection(store, format!("{prefix}.h{h}.q"), query_width, dh, rng);
        init_projection(store, format!("{prefix}.h{h}.k"), input_width, dh, rng);
        init_projection(store, format!("{prefix}.h{h}.v"), input_width, dh, rng);
    }
    init_linear(
        store,
        &format!("{prefix}.out"),
        heads * dh,
        cfg.latent_dim,
        rng,
    );
}

/// Adds the parameters of one unit reading `input_cols`-wide inputs.
pub(crate) fn init_block<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &PerceiverConfig,
    input_cols: usize,
    rng: &mut R,
) {
    let la = cfg.latent_dim;
    init_norm(store, &format!("{prefix}.cross.ln_q"), la);
    init_norm(store, &format!("{prefix}.cross.ln_kv"), input_cols);
    init_attention(
        store,
        &format!("{prefix}.cross"),
        cfg.cross_heads,
        la,
        input_cols,
        cfg,
        rng,
    );
    init_norm(store, &format!("{prefix}.cross_ffn.ln"), la);
    init_ffn(
        store,
        &format!("{prefix}.cross_ffn"),
        la,
        cfg.ffn_hidden(),
        la,
        rng,
    );
    for layer in 0..cfg.depth {
        let p = format!("{prefix}.self{layer}");
        init_norm(store, &format!("{p}.attn.ln"), la);
        init_attention(
            store,
            &format!("{p}.attn"),
            cfg.self_heads,
            la,
            la,
            cfg,
            rng,
        );
        init_norm(store, &format!("{p}.ffn.ln"), la);
        init_ffn(store, &format!("{p}.ffn"), la, cfg.ffn_hidden(), la, rng);
    }
}

/// Multi-head attention from `queries` into `inputs`; returns the projected
/// output and the per-head probability nodes.
fn attention(
    g: &mut Graph,
    prefix: &str,
    heads: usize,
    queries: NodeId,
    inputs: NodeId,
    cfg: &PerceiverConfig,
) -> Result<(NodeId, Vec<NodeId>), ModelError> {
    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = g.project(queries, &format!("{prefix}.h{h}.q"))?;
        let k = g.project(inputs, &format!("{prefix}.h{h}.k"))?;
        let v = g.project(inputs, &format!("{prefix}.h{h}.v"))?;
        let kt = g.tape.transpose(k);
        let logits = g.tape.matmul(q, kt)?;
        let logits = g.tape.scale(logits, scale);
        let p = g.tape.softmax_rows(logits);
        outs.push(g.tape.matmul(p, v)?);
        probs.push(p);
    }
    let joined = if outs.len() == 1 {
        outs[0]
    } else {
        g.tape.concat_cols(&outs)?
    };
    let out = g.linear(joined, &format!("{prefix}.out"))?;
    Ok((out, probs))
}

pub(crate) fn forward_block(
    g: &mut Graph,
    prefix: &str,
    cfg: &PerceiverConfig,
    latent: NodeId,
    input: NodeId,
) -> Result<BlockOutput, ModelError> {
    let q = g.layer_norm(latent, &format!("{prefix}.cross.ln_q"))?;
    let kv = g.layer_norm(input, &format!("{prefix}.cross.ln_kv"))?;
    let (attn, cross_attention) =
        attention(g, &format!("{prefix}.cross"), cfg.cross_heads, q, kv, cfg)?;
    let mut x = g.tape.add(latent, attn)?;

    let h = g.layer_norm(x, &format!("{prefix}.cross_ffn.ln"))?;
    let h = g.ffn(h, &format!("{prefix}.cross_ffn"))?;
    x = g.tape.add(x, h)?;

    for layer in 0..cfg.depth {
        let p = format!("{prefix}.self{layer}");
        let h = g.layer_norm(x, &format!("{p}.attn.ln"))?;
        let (a, _) = attention(g, &format!("{p}.attn"), cfg.self_heads, h, h, cfg)?;
        x = g.tape.add(x, a)?;
        let h = g.layer_norm(x, &format!("{p}.ffn.ln"))?;
        let h = g.ffn(h, &format!("{p}.ffn"))?;
        x = g.tape.add(x, h)?;
    }
    Ok(BlockOutput {
        latent: x,
        cross_attention,
    })
}

/// Scalar multiplications in the matrix products of one unit.
pub fn count_block_multiplies(cfg: &PerceiverConfig, shape: BlockShape) -> u64 {
    let lp = cfg.latents as u64;
    let la = cfg.latent_dim as u64;
    let dh = cfg.head_dim() as u64;
    let hidden = cfg.ffn_hidden() as u64;
    let (n, d) = (shape.input_rows as u64, shape.input_cols as u64);

    let attention = |heads: u64, queries: u64, query_width: u64, keys: u64, key_width: u64| {
        heads * (queries * query_width * dh      // Q
            + 2 * keys * key_width * dh          // K, V
            + queries * dh * keys                // Q Kᵀ
            + queries * keys * dh)               // P V
            + queries * heads * dh * la // output projection
    };
    let ffn = 2 * lp * la * hidden;

    let cross = attention(cfg.cross_heads as u64, lp, la, n, d) + ffn;
    let latent = (attention(cfg.self_heads as u64, lp, la, lp, la) + ffn) * cfg.depth as u64;
    cross + latent
}
