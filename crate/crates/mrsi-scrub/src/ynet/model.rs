//! The Y-shaped graph itself: parameter containers, deterministic He
//! initialization, the cached forward pass and the exact backward pass.
//!
//! Two independent encoders downsample their inputs `depth` times, doubling
//! channels per level; the bottleneck sees both deepest outputs concatenated;
//! each decoder level upsamples and concatenates the same-level features of
//! BOTH encoders before its conv block; a final block and a kernel-1
//! convolution map back to the two output channels. Every conv block is
//! conv -> PReLU -> dropout -> conv -> PReLU -> dropout.
//!
//! Gradients are returned in a `ParamSet` of the same shape as the weights,
//! and both flatten in one canonical order (enc1 blocks, enc2 blocks,
//! bottleneck, decoder levels ascending, final block, head; within a block
//! conv1 weight/bias, slope1, conv2 weight/bias, slope2). The weights file,
//! the Adam state and the gradient checks all rely on that order staying
//! put.

use ndarray::Array1;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    concat, conv_backward, conv_forward, dropout_backward, dropout_forward, maxpool_backward,
    maxpool_forward, prelu_backward, prelu_forward, split_rows, upsample_backward,
    upsample_forward, Conv, Feat, PoolCache,
};
use super::YNetConfig;

pub(crate) const PRELU_INIT: f64 = 0.25;

/// conv -> PReLU -> dropout -> conv -> PReLU -> dropout, with one learned
/// PReLU slope per channel.
#[derive(Clone, Debug)]
pub(crate) struct ConvBlock {
    pub conv1: Conv,
    pub prelu1: Array1<f64>,
    pub conv2: Conv,
    pub prelu2: Array1<f64>,
}

impl Conv {
    /// He-style fan-in uniform weights (`|w| <= sqrt(6 / (c_in * k))`) and
    /// zero biases when a generator is supplied; all zeros otherwise (the
    /// shape used for gradient accumulators).
    fn build(c_out: usize, c_in: usize, k: usize, rng: Option<&mut ChaCha8Rng>) -> Conv {
        let mut w = ndarray::Array2::zeros((c_out, c_in * k));
        if let Some(rng) = rng {
            let bound = (6.0 / (c_in * k) as f64).sqrt();
            for v in w.iter_mut() {
                *v = (rng.gen::<f64>() * 2.0 - 1.0) * bound;
            }
        }
        Conv { w, b: Array1::zeros(c_out), c_in, k }
    }
}

impl ConvBlock {
    fn build(c_in: usize, c_out: usize, k: usize, mut rng: Option<&mut ChaCha8Rng>) -> ConvBlock {
        let slope = if rng.is_some() { PRELU_INIT } else { 0.0 };
        ConvBlock {
            conv1: Conv::build(c_out, c_in, k, rng.as_deref_mut()),
            prelu1: Array1::from_elem(c_out, slope),
            conv2: Conv::build(c_out, c_out, k, rng.as_deref_mut()),
            prelu2: Array1::from_elem(c_out, slope),
        }
    }
}

/// Every learnable tensor of the network, in graph order. Doubles as the
/// gradient container (same shapes, zero-built).
#[derive(Clone, Debug)]
pub(crate) struct ParamSet {
    pub enc1: Vec<ConvBlock>,
    pub enc2: Vec<ConvBlock>,
    pub bneck: ConvBlock,
    pub dec: Vec<ConvBlock>,
    pub final_blk: ConvBlock,
    pub head: Conv,
}

impl ParamSet {
    /// Construct with He-initialized weights (`Some(rng)`) or all zeros
    /// (`None`). Tensors are drawn in canonical order, so a fixed seed fixes
    /// the weights bit-for-bit.
    pub fn build(cfg: &YNetConfig, mut rng: Option<&mut ChaCha8Rng>) -> ParamSet {
        let k = cfg.kernel;
        let d = cfg.depth;
        let enc1 = (0..d)
            .map(|i| ConvBlock::build(cfg.enc_in(i), cfg.enc_out(i), k, rng.as_deref_mut()))
            .collect();
        let enc2 = (0..d)
            .map(|i| ConvBlock::build(cfg.enc_in(i), cfg.enc_out(i), k, rng.as_deref_mut()))
            .collect();
        let bneck = ConvBlock::build(cfg.bneck_channels(), cfg.bneck_channels(), k, rng.as_deref_mut());
        let dec = (0..d)
            .map(|i| ConvBlock::build(cfg.dec_in(i), cfg.dec_out(i), k, rng.as_deref_mut()))
            .collect();
        let final_blk =
            ConvBlock::build(cfg.base_channels, cfg.base_channels, k, rng.as_deref_mut());
        let head = Conv::build(cfg.out_channels, cfg.base_channels, 1, rng.as_deref_mut());
        ParamSet { enc1, enc2, bneck, dec, final_blk, head }
    }

    /// Visit every tensor in canonical order: `(name, dims, data)`. Conv
    /// weights are logically `[c_out, c_in, k]`, biases and slopes rank 1.
    pub fn visit_tensors(&self, f: &mut impl FnMut(String, Vec<usize>, &[f64])) {
        fn conv(name: String, c: &Conv, f: &mut impl FnMut(String, Vec<usize>, &[f64])) {
            let dims = vec![c.c_out(), c.c_in, c.k];
            f(format!("{name} weight"), dims, c.w.as_slice().unwrap());
            f(format!("{name} bias"), vec![c.b.len()], c.b.as_slice().unwrap());
        }
        fn block(name: &str, b: &ConvBlock, f: &mut impl FnMut(String, Vec<usize>, &[f64])) {
            conv(format!("{name} conv1"), &b.conv1, f);
            f(format!("{name} slope1"), vec![b.prelu1.len()], b.prelu1.as_slice().unwrap());
            conv(format!("{name} conv2"), &b.conv2, f);
            f(format!("{name} slope2"), vec![b.prelu2.len()], b.prelu2.as_slice().unwrap());
        }
        for (i, b) in self.enc1.iter().enumerate() {
            block(&format!("enc1 block {i}"), b, f);
        }
        for (i, b) in self.enc2.iter().enumerate() {
            block(&format!("enc2 block {i}"), b, f);
        }
        block("bottleneck", &self.bneck, f);
        for (i, b) in self.dec.iter().enumerate() {
            block(&format!("dec block {i}"), b, f);
        }
        block("final block", &self.final_blk, f);
        conv("head".into(), &self.head, f);
    }

    /// Mutable twin of [`Self::visit_tensors`]; the two must visit the same
    /// tensors in the same order (asserted in tests).
    pub fn visit_tensors_mut(&mut self, f: &mut impl FnMut(String, Vec<usize>, &mut [f64])) {
        fn conv(name: String, c: &mut Conv, f: &mut impl FnMut(String, Vec<usize>, &mut [f64])) {
            let dims = vec![c.c_out(), c.c_in, c.k];
            f(format!("{name} weight"), dims, c.w.as_slice_mut().unwrap());
            f(format!("{name} bias"), vec![c.b.len()], c.b.as_slice_mut().unwrap());
        }
        fn block(
            name: &str,
            b: &mut ConvBlock,
            f: &mut impl FnMut(String, Vec<usize>, &mut [f64]),
        ) {
            conv(format!("{name} conv1"), &mut b.conv1, f);
            f(format!("{name} slope1"), vec![b.prelu1.len()], b.prelu1.as_slice_mut().unwrap());
            conv(format!("{name} conv2"), &mut b.conv2, f);
            f(format!("{name} slope2"), vec![b.prelu2.len()], b.prelu2.as_slice_mut().unwrap());
        }
        for (i, b) in self.enc1.iter_mut().enumerate() {
            block(&format!("enc1 block {i}"), b, f);
        }
        for (i, b) in self.enc2.iter_mut().enumerate() {
            block(&format!("enc2 block {i}"), b, f);
        }
        block("bottleneck", &mut self.bneck, f);
        for (i, b) in self.dec.iter_mut().enumerate() {
            block(&format!("dec block {i}"), b, f);
        }
        block("final block", &mut self.final_blk, f);
        conv("head".into(), &mut self.head, f);
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_tensors(&mut |_, _, data| n += data.len());
        n
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit_tensors(&mut |_, _, data| out.extend_from_slice(data));
        out
    }

    pub fn set_flat(&mut self, v: &[f64]) {
        let mut off = 0;
        self.visit_tensors_mut(&mut |_, _, data| {
            data.copy_from_slice(&v[off..off + data.len()]);
            off += data.len();
        });
        assert_eq!(off, v.len(), "flat parameter vector has the wrong length");
    }
}

/// Everything a conv block's backward pass needs: its input, both
/// pre-activations and both dropout masks (None in eval mode or at rate 0).
#[derive(Clone, Debug)]
struct BlockCache {
    x: Feat,
    z1: Feat,
    m1: Option<ndarray::Array2<f64>>,
    h1: Feat,
    z2: Feat,
    m2: Option<ndarray::Array2<f64>>,
}

fn block_forward(
    blk: &ConvBlock,
    x: Feat,
    rate: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> (Feat, BlockCache) {
    let z1 = conv_forward(&blk.conv1, &x);
    let a1 = prelu_forward(&z1, &blk.prelu1);
    let (h1, m1) = match rng.as_deref_mut() {
        Some(r) if rate > 0.0 => {
            let (h, m) = dropout_forward(&a1, rate, r);
            (h, Some(m))
        }
        _ => (a1, None),
    };
    let z2 = conv_forward(&blk.conv2, &h1);
    let a2 = prelu_forward(&z2, &blk.prelu2);
    let (out, m2) = match rng {
        Some(r) if rate > 0.0 => {
            let (h, m) = dropout_forward(&a2, rate, r);
            (h, Some(m))
        }
        _ => (a2, None),
    };
    (out, BlockCache { x, z1, m1, h1, z2, m2 })
}

fn block_forward_eval(blk: &ConvBlock, x: &Feat) -> Feat {
    let z1 = conv_forward(&blk.conv1, x);
    let a1 = prelu_forward(&z1, &blk.prelu1);
    let z2 = conv_forward(&blk.conv2, &a1);
    prelu_forward(&z2, &blk.prelu2)
}

/// Gradients for one block plus the gradient at its input.
fn block_backward(blk: &ConvBlock, c: &BlockCache, grad_out: &Feat) -> (ConvBlock, Feat) {
    let g = match &c.m2 {
        Some(m) => dropout_backward(grad_out, m),
        None => grad_out.clone(),
    };
    let (gz2, gs2) = prelu_backward(&c.z2, &blk.prelu2, &g);
    let (gw2, gb2, gh1) = conv_backward(&blk.conv2, &c.h1, &gz2);
    let g = match &c.m1 {
        Some(m) => dropout_backward(&gh1, m),
        None => gh1,
    };
    let (gz1, gs1) = prelu_backward(&c.z1, &blk.prelu1, &g);
    let (gw1, gb1, gx) = conv_backward(&blk.conv1, &c.x, &gz1);
    let grads = ConvBlock {
        conv1: Conv { w: gw1, b: gb1, c_in: blk.conv1.c_in, k: blk.conv1.k },
        prelu1: gs1,
        conv2: Conv { w: gw2, b: gb2, c_in: blk.conv2.c_in, k: blk.conv2.k },
        prelu2: gs2,
    };
    (grads, gx)
}

struct EncCache {
    block: BlockCache,
    pool: PoolCache,
}

struct DecCache {
    block: BlockCache,
    split: [usize; 3],
}

/// The forward tape: every intermediate the backward pass replays. Opaque to
/// callers; produced by [`super::forward`] and consumed by
/// [`super::backward`].
pub struct ForwardCache {
    enc1: Vec<EncCache>,
    enc2: Vec<EncCache>,
    bneck: BlockCache,
    dec: Vec<DecCache>,
    final_blk: BlockCache,
    head_in: Feat,
    pub(crate) out_channels: usize,
    pub(crate) batch: usize,
    pub(crate) len: usize,
}

fn encode(
    blocks: &[ConvBlock],
    mut cur: Feat,
    pool: usize,
    rate: f64,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> (Feat, Vec<Feat>, Vec<EncCache>) {
    let mut skips = Vec::with_capacity(blocks.len());
    let mut caches = Vec::with_capacity(blocks.len());
    for blk in blocks {
        let (out, bc) = block_forward(blk, cur, rate, rng.as_deref_mut());
        let (pooled, pc) = maxpool_forward(&out, pool);
        skips.push(out);
        caches.push(EncCache { block: bc, pool: pc });
        cur = pooled;
    }
    (cur, skips, caches)
}

/// Full cached forward pass. Dropout fires only when a generator is passed
/// AND the configured rate is positive; masks are drawn in a fixed graph
/// order (enc1 shallow to deep, enc2, bottleneck, decoder deep to shallow,
/// final block), so a seeded stream makes training reproducible.
pub(crate) fn run_forward(
    p: &ParamSet,
    cfg: &YNetConfig,
    x1: Feat,
    x2: Feat,
    mut rng: Option<&mut ChaCha8Rng>,
) -> (Feat, ForwardCache) {
    let pool = cfg.pool_factor;
    let rate = cfg.dropout_rate;
    let (batch, len) = (x1.batch, x1.len);
    let (deep1, skips1, enc1) = encode(&p.enc1, x1, pool, rate, &mut rng);
    let (deep2, skips2, enc2) = encode(&p.enc2, x2, pool, rate, &mut rng);
    let bneck_in = concat(&[&deep1, &deep2]);
    let (mut cur, bneck) = block_forward(&p.bneck, bneck_in, rate, rng.as_deref_mut());
    let mut dec: Vec<Option<DecCache>> = (0..cfg.depth).map(|_| None).collect();
    for i in (0..cfg.depth).rev() {
        let up = upsample_forward(&cur, pool);
        let split = [up.channels(), skips1[i].channels(), skips2[i].channels()];
        let cat = concat(&[&up, &skips1[i], &skips2[i]]);
        let (out, bc) = block_forward(&p.dec[i], cat, rate, rng.as_deref_mut());
        dec[i] = Some(DecCache { block: bc, split });
        cur = out;
    }
    let (head_in, final_blk) = block_forward(&p.final_blk, cur, rate, rng.as_deref_mut());
    let y = conv_forward(&p.head, &head_in);
    let cache = ForwardCache {
        enc1,
        enc2,
        bneck,
        dec: dec.into_iter().map(|d| d.expect("every level visited")).collect(),
        final_blk,
        head_in,
        out_channels: cfg.out_channels,
        batch,
        len,
    };
    (y, cache)
}

/// Forward pass that keeps no tape — the inference path, where the cache for
/// a large batch would dwarf the activations themselves.
pub(crate) fn run_forward_eval(p: &ParamSet, cfg: &YNetConfig, x1: &Feat, x2: &Feat) -> Feat {
    let pool = cfg.pool_factor;
    let run_enc = |blocks: &[ConvBlock], input: &Feat| {
        let mut skips = Vec::with_capacity(blocks.len());
        let mut cur = None;
        for blk in blocks {
            let out = block_forward_eval(blk, cur.as_ref().unwrap_or(input));
            let (pooled, _) = maxpool_forward(&out, pool);
            skips.push(out);
            cur = Some(pooled);
        }
        (cur.expect("depth >= 1"), skips)
    };
    let (deep1, skips1) = run_enc(&p.enc1, x1);
    let (deep2, skips2) = run_enc(&p.enc2, x2);
    let mut cur = block_forward_eval(&p.bneck, &concat(&[&deep1, &deep2]));
    for i in (0..cfg.depth).rev() {
        let up = upsample_forward(&cur, pool);
        cur = block_forward_eval(&p.dec[i], &concat(&[&up, &skips1[i], &skips2[i]]));
    }
    let head_in = block_forward_eval(&p.final_blk, &cur);
    conv_forward(&p.head, &head_in)
}

/// Exact gradients of every parameter given the tape and the gradient at the
/// network output. Skip tensors feed two consumers (the pool below them and
/// their decoder concat), so their gradients accumulate before the block
/// backward runs.
pub(crate) fn run_backward(
    p: &ParamSet,
    cfg: &YNetConfig,
    cache: &ForwardCache,
    grad_out: &Feat,
) -> ParamSet {
    let pool = cfg.pool_factor;
    let mut g = ParamSet::build(cfg, None);
    let (ghw, ghb, gf) = conv_backward(&p.head, &cache.head_in, grad_out);
    g.head.w = ghw;
    g.head.b = ghb;
    let (fg, mut gcur) = block_backward(&p.final_blk, &cache.final_blk, &gf);
    g.final_blk = fg;
    let mut gskip1: Vec<Option<Feat>> = (0..cfg.depth).map(|_| None).collect();
    let mut gskip2: Vec<Option<Feat>> = (0..cfg.depth).map(|_| None).collect();
    // decoder levels in reverse execution order: shallowest ran last
    for i in 0..cfg.depth {
        let dc = &cache.dec[i];
        let (bg, gcat) = block_backward(&p.dec[i], &dc.block, &gcur);
        g.dec[i] = bg;
        let mut parts = split_rows(&gcat, &dc.split).into_iter();
        let gup = parts.next().unwrap();
        gskip1[i] = parts.next();
        gskip2[i] = parts.next();
        gcur = upsample_backward(&gup, pool);
    }
    let (bg, gbin) = block_backward(&p.bneck, &cache.bneck, &gcur);
    g.bneck = bg;
    let half = cfg.enc_out(cfg.depth - 1);
    let mut halves = split_rows(&gbin, &[half, half]).into_iter();
    let gp1 = halves.next().unwrap();
    let gp2 = halves.next().unwrap();
    for (branch, caches, grads, mut gpool, gskips) in [
        (&p.enc1, &cache.enc1, &mut g.enc1, gp1, &gskip1),
        (&p.enc2, &cache.enc2, &mut g.enc2, gp2, &gskip2),
    ] {
        for i in (0..cfg.depth).rev() {
            let ec = &caches[i];
            let mut gout = maxpool_backward(&gpool, &ec.pool, pool);
            gout.add_assign(gskips[i].as_ref().expect("skip gradient recorded"));
            let (bg, gx) = block_backward(&branch[i], &ec.block, &gout);
            grads[i] = bg;
            gpool = gx;
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn tensor_visitors_agree_on_order_and_shape() {
        let cfg = YNetConfig { depth: 2, base_channels: 3, padded_length: 16, ..YNetConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamSet::build(&cfg, Some(&mut rng));
        let mut seen = Vec::new();
        p.visit_tensors(&mut |name, dims, data| seen.push((name, dims, data.len())));
        let mut seen_mut = Vec::new();
        p.visit_tensors_mut(&mut |name, dims, data| seen_mut.push((name, dims, data.len())));
        assert_eq!(seen, seen_mut);
        assert_eq!(seen.iter().map(|(_, _, n)| n).sum::<usize>(), p.num_params());
        // every tensor's dims product matches its data length
        for (name, dims, n) in &seen {
            assert_eq!(dims.iter().product::<usize>(), *n, "{name}");
        }
    }

    #[test]
    fn flat_round_trips() {
        let cfg = YNetConfig { depth: 1, base_channels: 2, padded_length: 8, kernel: 3, ..YNetConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ParamSet::build(&cfg, Some(&mut rng));
        let v = p.flat();
        let mut q = ParamSet::build(&cfg, None);
        q.set_flat(&v);
        assert_eq!(q.flat(), v);
    }
}
