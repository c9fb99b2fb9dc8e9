//! Coordinate-based cross-attention upsampler.
//!
//! Queries are built per output pixel from a sinusoidal encoding of its
//! normalized coordinate concatenated with its RGB value, projected to `C`
//! channels by a small convolution. A stack of pre-norm cross-attention blocks
//! lets every query attend globally to the low-resolution backbone tokens,
//! and a final linear head maps the result back to `C` feature channels.
//! Because queries are just coordinates, any output resolution works.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::interp::resize_image;
use crate::error::{Error, Result};
use crate::linalg::{self, linear, linear_backward};
use crate::nn::{self, AttentionCache, LayerNormCache};
use crate::params::{constant, variance_scaled, Param, ParamSet};
use crate::par;
use crate::types::{make_coord_grid, CoordGrid, FeatureMap, ImageTensor};

/// Query rows processed together; bounds attention memory at high resolution.
pub const QUERY_CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LowresPe {
    None,
    Learnable,
    Sine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoftUpConfig {
    pub channels: usize,
    pub num_blocks: usize,
    /// `None` means `max(1, channels / 64)`.
    pub heads: Option<usize>,
    pub pe_freqs: usize,
    pub query_conv_kernel: usize,
    pub lowres_pe: LowresPe,
    pub ffn_expansion: usize,
    /// Token grid of the learnable low-res encoding table.
    pub lowres_grid: Option<[usize; 2]>,
    /// Seed of the fixed projection used by the sine low-res encoding.
    pub pe_seed: u64,
}

impl Default for LoftUpConfig {
    fn default() -> Self {
        LoftUpConfig {
            channels: 384,
            num_blocks: 2,
            heads: None,
            pe_freqs: 10,
            query_conv_kernel: 3,
            lowres_pe: LowresPe::Sine,
            ffn_expansion: 4,
            lowres_grid: None,
            pe_seed: 0,
        }
    }
}

impl LoftUpConfig {
    pub fn with_channels(channels: usize) -> Self {
        LoftUpConfig {
            channels,
            ..Default::default()
        }
    }

    pub fn heads(&self) -> usize {
        self.heads.unwrap_or((self.channels / 64).max(1))
    }

    /// Channels entering the query convolution: `4K` encoding plus RGB.
    pub fn query_in(&self) -> usize {
        4 * self.pe_freqs + 3
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.channels == 0 {
            return fail("channels must be ≥ 1".into());
        }
        let heads = self.heads();
        if heads == 0 || self.channels % heads != 0 {
            return fail(format!("channels {} not divisible by heads {heads}", self.channels));
        }
        if self.pe_freqs == 0 {
            return fail("pe_freqs must be ≥ 1".into());
        }
        if self.num_blocks == 0 {
            return fail("num_blocks must be ≥ 1".into());
        }
        if !matches!(self.query_conv_kernel, 1 | 3) {
            return fail(format!("query_conv_kernel must be 1 or 3, got {}", self.query_conv_kernel));
        }
        if self.ffn_expansion == 0 {
            return fail("ffn_expansion must be ≥ 1".into());
        }
        if self.lowres_pe == LowresPe::Learnable && self.lowres_grid.is_none() {
            return fail("learnable low-res encoding needs lowres_grid".into());
        }
        Ok(())
    }
}

/// Per pixel: for axis in (x, y), for k in 0..K, `[sin(2^k π u), cos(2^k π u)]`.
pub fn sinusoidal_pe(coords: &CoordGrid, k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::invalid("positional encoding needs K ≥ 1"));
    }
    let mut out = Vec::with_capacity(coords.coords().len() * 4 * k);
    for c in coords.coords() {
        push_pe(&mut out, *c, k);
    }
    Ok(out)
}

fn push_pe(out: &mut Vec<f64>, c: [f64; 2], k: usize) {
    for u in c {
        let mut freq = PI;
        for _ in 0..k {
            let (s, co) = (freq * u).sin_cos();
            out.push(s);
            out.push(co);
            freq *= 2.0;
        }
    }
}

/// Borrowed weights of one transformer block.
struct BlockWeights<'a> {
    n1g: &'a [f64],
    n1b: &'a [f64],
    wq: &'a [f64],
    bq: &'a [f64],
    wk: &'a [f64],
    bk: &'a [f64],
    wv: &'a [f64],
    bv: &'a [f64],
    wo: &'a [f64],
    bo: &'a [f64],
    n2g: &'a [f64],
    n2b: &'a [f64],
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
}

fn block_name(l: usize, part: &str) -> String {
    format!("blocks.{l}.{part}")
}

/// Saved activations of one block over one query chunk.
#[derive(Debug)]
struct BlockTape {
    n1: Vec<f64>,
    ln1: LayerNormCache,
    q: Vec<f64>,
    attn: AttentionCache,
    o: Vec<f64>,
    n2: Vec<f64>,
    ln2: LayerNormCache,
    hpre: Vec<f64>,
    hact: Vec<f64>,
}

#[derive(Debug)]
struct ChunkTape {
    rows: usize,
    cols: Vec<f64>,
    blocks: Vec<BlockTape>,
    x_final: Vec<f64>,
}

/// Everything needed to backpropagate one single-image forward.
#[derive(Debug)]
pub struct LoftUpTape {
    chunks: Vec<ChunkTape>,
    tokens: Vec<f64>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    out_h: usize,
    out_w: usize,
}

#[derive(Clone, Debug)]
pub struct LoftUp {
    cfg: LoftUpConfig,
    /// Fixed `[4K, C]` map from the low-res sine encoding to feature space.
    sine_proj: Vec<f64>,
}

impl LoftUp {
    pub fn new(cfg: LoftUpConfig) -> Result<Self> {
        cfg.validate()?;
        let pe_dim = 4 * cfg.pe_freqs;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.pe_seed ^ 0x5349_4e45_5045_0001);
        let bound = (3.0 / pe_dim as f64).sqrt();
        let sine_proj = (0..pe_dim * cfg.channels)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Ok(LoftUp { cfg, sine_proj })
    }

    pub fn config(&self) -> &LoftUpConfig {
        &self.cfg
    }

    /// Fresh parameters. Attention output projections and second FFN matrices
    /// start at zero, so every block begins as the identity.
    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = self.cfg.channels;
        let e = self.cfg.ffn_expansion * c;
        let k = self.cfg.query_conv_kernel;
        let cin = self.cfg.query_in();
        let mut p = ParamSet::new();
        let mut add = |name: String, param: Param| p.insert(name, param).expect("unique parameter names");
        add("query_conv.weight".into(), variance_scaled(&mut rng, vec![c, cin, k, k], cin * k * k));
        add("query_conv.bias".into(), Param::zeros(vec![c]));
        for l in 0..self.cfg.num_blocks {
            add(block_name(l, "norm1.weight"), constant(vec![c], 1.0));
            add(block_name(l, "norm1.bias"), Param::zeros(vec![c]));
            for proj in ["q", "k", "v"] {
                add(block_name(l, &format!("attn.{proj}.weight")), variance_scaled(&mut rng, vec![c, c], c));
                add(block_name(l, &format!("attn.{proj}.bias")), Param::zeros(vec![c]));
            }
            add(block_name(l, "attn.out.weight"), Param::zeros(vec![c, c]));
            add(block_name(l, "attn.out.bias"), Param::zeros(vec![c]));
            add(block_name(l, "norm2.weight"), constant(vec![c], 1.0));
            add(block_name(l, "norm2.bias"), Param::zeros(vec![c]));
            add(block_name(l, "ffn.fc1.weight"), variance_scaled(&mut rng, vec![e, c], c));
            add(block_name(l, "ffn.fc1.bias"), Param::zeros(vec![e]));
            add(block_name(l, "ffn.fc2.weight"), Param::zeros(vec![c, e]));
            add(block_name(l, "ffn.fc2.bias"), Param::zeros(vec![c]));
        }
        add("head.weight".into(), variance_scaled(&mut rng, vec![c, c], c));
        add("head.bias".into(), Param::zeros(vec![c]));
        if self.cfg.lowres_pe == LowresPe::Learnable {
            let [h, w] = self.cfg.lowres_grid.expect("validated");
            let data = (0..h * w * c).map(|_| rng.random_range(-0.02..0.02)).collect();
            add("lowres_pe".into(), Param::new(vec![h * w, c], data).expect("shape"));
        }
        p
    }

    fn block<'a>(&self, params: &'a ParamSet, l: usize) -> Result<BlockWeights<'a>> {
        let c = self.cfg.channels;
        let e = self.cfg.ffn_expansion * c;
        let g = |part: &str, shape: &[usize]| params.data(&block_name(l, part), shape);
        Ok(BlockWeights {
            n1g: g("norm1.weight", &[c])?,
            n1b: g("norm1.bias", &[c])?,
            wq: g("attn.q.weight", &[c, c])?,
            bq: g("attn.q.bias", &[c])?,
            wk: g("attn.k.weight", &[c, c])?,
            bk: g("attn.k.bias", &[c])?,
            wv: g("attn.v.weight", &[c, c])?,
            bv: g("attn.v.bias", &[c])?,
            wo: g("attn.out.weight", &[c, c])?,
            bo: g("attn.out.bias", &[c])?,
            n2g: g("norm2.weight", &[c])?,
            n2b: g("norm2.bias", &[c])?,
            w1: g("ffn.fc1.weight", &[e, c])?,
            b1: g("ffn.fc1.bias", &[e])?,
            w2: g("ffn.fc2.weight", &[c, e])?,
            b2: g("ffn.fc2.bias", &[c])?,
        })
    }

    /// Pixel-major query input (`P × (4K + 3)`): encoding then RGB.
    fn query_input(&self, img: &ImageTensor, grid: &CoordGrid) -> Result<Vec<f64>> {
        if img.batch() != 1 {
            return Err(Error::invalid("query encoding takes a single image"));
        }
        if (img.height(), img.width()) != (grid.height(), grid.width()) {
            return Err(Error::invalid(format!(
                "image {}×{} does not match query grid {}×{}",
                img.height(),
                img.width(),
                grid.height(),
                grid.width()
            )));
        }
        let plane = grid.height() * grid.width();
        let planes = img.planes(0);
        let mut x = Vec::with_capacity(plane * self.cfg.query_in());
        for (p, c) in grid.coords().iter().enumerate() {
            push_pe(&mut x, *c, self.cfg.pe_freqs);
            x.extend([planes[p], planes[plane + p], planes[2 * plane + p]]);
        }
        Ok(x)
    }

    /// Query features (`h_q·w_q × C`, pixel-major) for an image already resampled to the grid.
    pub fn encode_queries(&self, params: &ParamSet, img: &ImageTensor, grid: &CoordGrid) -> Result<Vec<f64>> {
        let x = self.query_input(img, grid)?;
        let (h, w) = (grid.height(), grid.width());
        let k = self.cfg.query_conv_kernel;
        let cin = self.cfg.query_in();
        let c = self.cfg.channels;
        let wc = nn::conv_weight_tap_major(params.data("query_conv.weight", &[c, cin, k, k])?, c, cin, k);
        let bc = params.data("query_conv.bias", &[c])?;
        let cols = nn::im2col(&x, h, w, cin, k, 0, h * w);
        Ok(linear(&cols, h * w, &wc, bc, cin * k * k, c))
    }

    /// Key/value token sequence (`h·w × C`) with the configured positional encoding.
    pub fn encode_lowres(&self, params: &ParamSet, lowres: &FeatureMap) -> Result<Vec<f64>> {
        if lowres.batch() != 1 {
            return Err(Error::invalid("low-res encoding takes a single feature map"));
        }
        let c = self.cfg.channels;
        if lowres.channels() != c {
            return Err(Error::invalid(format!(
                "low-res features have {} channels, model expects {c}",
                lowres.channels()
            )));
        }
        let (h, w) = (lowres.height(), lowres.width());
        let mut tokens = lowres.tokens(0);
        match self.cfg.lowres_pe {
            LowresPe::None => {}
            LowresPe::Learnable => {
                let [gh, gw] = self.cfg.lowres_grid.expect("validated");
                if (gh, gw) != (h, w) {
                    return Err(Error::invalid(format!(
                        "learnable encoding table is {gh}×{gw}, features are {h}×{w}"
                    )));
                }
                let table = params.data("lowres_pe", &[h * w, c])?;
                tokens.iter_mut().zip(table).for_each(|(t, p)| *t += p);
            }
            LowresPe::Sine => {
                let pe = sinusoidal_pe(&make_coord_grid(h, w)?, self.cfg.pe_freqs)?;
                let d = 4 * self.cfg.pe_freqs;
                linalg::gemm(
                    1.0,
                    linalg::View::rm(&pe, h * w, d),
                    linalg::View::rm(&self.sine_proj, d, c),
                    1.0,
                    linalg::ViewMut::rm(&mut tokens, h * w, c),
                );
            }
        }
        Ok(tokens)
    }

    /// One pre-norm cross-attention block applied to `queries` (`rows × C`).
    pub fn cross_attention_block(&self, params: &ParamSet, block: usize, queries: &[f64], kv_tokens: &[f64]) -> Result<Vec<f64>> {
        let c = self.cfg.channels;
        let bw = self.block(params, block)?;
        let n = kv_tokens.len() / c;
        let keys = linear(kv_tokens, n, bw.wk, bw.bk, c, c);
        let values = linear(kv_tokens, n, bw.wv, bw.bv, c, c);
        let mut x = queries.to_vec();
        self.block_forward(&bw, &mut x, &keys, &values, false)?;
        Ok(x)
    }

    /// Attention probabilities of block `block` (`heads × rows × tokens`).
    pub fn attention_weights(&self, params: &ParamSet, block: usize, queries: &[f64], kv_tokens: &[f64]) -> Result<Vec<Vec<f64>>> {
        let c = self.cfg.channels;
        let bw = self.block(params, block)?;
        let n = kv_tokens.len() / c;
        let rows = queries.len() / c;
        let keys = linear(kv_tokens, n, bw.wk, bw.bk, c, c);
        let values = linear(kv_tokens, n, bw.wv, bw.bv, c, c);
        let (n1, _) = nn::layer_norm(queries, c, bw.n1g, bw.n1b);
        let q = linear(&n1, rows, bw.wq, bw.bq, c, c);
        let (_, cache) = nn::multi_head_attention(&q, &keys, &values, rows, n, c, self.cfg.heads(), true);
        Ok(cache.expect("kept").probs)
    }

    fn block_forward(&self, bw: &BlockWeights<'_>, x: &mut [f64], keys: &[f64], values: &[f64], keep: bool) -> Result<Option<BlockTape>> {
        let c = self.cfg.channels;
        let e = self.cfg.ffn_expansion * c;
        let rows = x.len() / c;
        let n = keys.len() / c;
        let (n1, ln1) = nn::layer_norm(x, c, bw.n1g, bw.n1b);
        let q = linear(&n1, rows, bw.wq, bw.bq, c, c);
        let (o, attn) = nn::multi_head_attention(&q, keys, values, rows, n, c, self.cfg.heads(), keep);
        let a = linear(&o, rows, bw.wo, bw.bo, c, c);
        x.iter_mut().zip(&a).for_each(|(x, a)| *x += a);
        let (n2, ln2) = nn::layer_norm(x, c, bw.n2g, bw.n2b);
        let hpre = linear(&n2, rows, bw.w1, bw.b1, c, e);
        let hact: Vec<f64> = hpre.iter().map(|v| nn::gelu(*v)).collect();
        let f = linear(&hact, rows, bw.w2, bw.b2, e, c);
        x.iter_mut().zip(&f).for_each(|(x, f)| *x += f);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite activation in cross-attention block".into()));
        }
        Ok(keep.then(|| BlockTape {
            n1,
            ln1,
            q,
            attn: attn.expect("kept"),
            o,
            n2,
            ln2,
            hpre,
            hact,
        }))
    }

    /// Shared pipeline over a pixel-major query input laid out on an `h × w` grid.
    fn run(&self, params: &ParamSet, x0: &[f64], h: usize, w: usize, lowres: &FeatureMap, keep: bool) -> Result<(Vec<f64>, Option<LoftUpTape>)> {
        let c = self.cfg.channels;
        let k = self.cfg.query_conv_kernel;
        let cin = self.cfg.query_in();
        let wc = nn::conv_weight_tap_major(params.data("query_conv.weight", &[c, cin, k, k])?, c, cin, k);
        let bc = params.data("query_conv.bias", &[c])?;
        let wh = params.data("head.weight", &[c, c])?;
        let bh = params.data("head.bias", &[c])?;
        let tokens = self.encode_lowres(params, lowres)?;
        let n = tokens.len() / c;
        let blocks = (0..self.cfg.num_blocks)
            .map(|l| self.block(params, l))
            .collect::<Result<Vec<_>>>()?;
        let keys: Vec<Vec<f64>> = blocks.iter().map(|b| linear(&tokens, n, b.wk, b.bk, c, c)).collect();
        let values: Vec<Vec<f64>> = blocks.iter().map(|b| linear(&tokens, n, b.wv, b.bv, c, c)).collect();

        let total = h * w;
        let n_chunks = total.div_ceil(QUERY_CHUNK);
        let results = par::map_range(n_chunks, |ci| -> Result<(Vec<f64>, Option<ChunkTape>)> {
            let r0 = ci * QUERY_CHUNK;
            let rows = QUERY_CHUNK.min(total - r0);
            let cols = nn::im2col(x0, h, w, cin, k, r0, rows);
            let mut x = linear(&cols, rows, &wc, bc, cin * k * k, c);
            let mut tapes = Vec::new();
            for (l, bw) in blocks.iter().enumerate() {
                if let Some(t) = self.block_forward(bw, &mut x, &keys[l], &values[l], keep)? {
                    tapes.push(t);
                }
            }
            let y = linear(&x, rows, wh, bh, c, c);
            let tape = keep.then(|| ChunkTape {
                rows,
                cols,
                blocks: tapes,
                x_final: x,
            });
            Ok((y, tape))
        });
        let mut out = Vec::with_capacity(total * c);
        let mut chunks = Vec::new();
        for r in results {
            let (y, t) = r?;
            out.extend_from_slice(&y);
            chunks.extend(t);
        }
        let tape = keep.then(|| LoftUpTape {
            chunks,
            tokens,
            keys,
            values,
            out_h: h,
            out_w: w,
        });
        Ok((out, tape))
    }

    fn prepare(&self, img: &ImageTensor, out_h: usize, out_w: usize) -> Result<Vec<f64>> {
        let grid = make_coord_grid(out_h, out_w)?;
        let rgb = resize_image(img, out_h, out_w)?;
        self.query_input(&rgb, &grid)
    }

    /// Upsampled features (`batch × C × out_h × out_w`).
    pub fn forward(&self, params: &ParamSet, img: &ImageTensor, lowres: &FeatureMap, out_h: usize, out_w: usize) -> Result<FeatureMap> {
        if img.batch() != lowres.batch() {
            return Err(Error::invalid("image and feature batches differ"));
        }
        let mut maps = Vec::with_capacity(img.batch());
        for b in 0..img.batch() {
            let x0 = self.prepare(&img.image(b), out_h, out_w)?;
            let (y, _) = self.run(params, &x0, out_h, out_w, &lowres.image(b), false)?;
            maps.push(FeatureMap::from_tokens(&y, self.cfg.channels, out_h, out_w)?);
        }
        FeatureMap::stack(&maps)
    }

    /// Features at arbitrary query points given their normalized coordinates and
    /// RGB values. Only defined for the pointwise (kernel 1) query encoder.
    pub fn forward_points(&self, params: &ParamSet, coords: &[[f64; 2]], rgb: &[[f64; 3]], lowres: &FeatureMap) -> Result<Vec<f64>> {
        if self.cfg.query_conv_kernel != 1 {
            return Err(Error::invalid("point queries require query_conv_kernel = 1"));
        }
        if coords.len() != rgb.len() || coords.is_empty() {
            return Err(Error::invalid("need one RGB value per query coordinate"));
        }
        let mut x0 = Vec::with_capacity(coords.len() * self.cfg.query_in());
        for (c, v) in coords.iter().zip(rgb) {
            push_pe(&mut x0, *c, self.cfg.pe_freqs);
            x0.extend_from_slice(v);
        }
        Ok(self.run(params, &x0, 1, coords.len(), lowres, false)?.0)
    }

    /// Single-image forward that records activations for [`LoftUp::backward`].
    pub fn forward_train(&self, params: &ParamSet, img: &ImageTensor, lowres: &FeatureMap, out_h: usize, out_w: usize) -> Result<(FeatureMap, LoftUpTape)> {
        if img.batch() != 1 || lowres.batch() != 1 {
            return Err(Error::invalid("training forward takes a single image"));
        }
        let x0 = self.prepare(img, out_h, out_w)?;
        let (y, tape) = self.run(params, &x0, out_h, out_w, lowres, true)?;
        Ok((FeatureMap::from_tokens(&y, self.cfg.channels, out_h, out_w)?, tape.expect("kept")))
    }

    /// Gradient of a scalar loss with respect to every parameter, given the
    /// loss gradient at the output feature map.
    pub fn backward(&self, params: &ParamSet, tape: &LoftUpTape, grad_out: &FeatureMap) -> Result<ParamSet> {
        let c = self.cfg.channels;
        let e = self.cfg.ffn_expansion * c;
        let k = self.cfg.query_conv_kernel;
        let cin = self.cfg.query_in();
        if (grad_out.channels(), grad_out.height(), grad_out.width()) != (c, tape.out_h, tape.out_w) {
            return Err(Error::invalid("output gradient does not match the recorded forward"));
        }
        let dy_all = grad_out.tokens(0);
        let wh = params.data("head.weight", &[c, c])?;
        let blocks = (0..self.cfg.num_blocks)
            .map(|l| self.block(params, l))
            .collect::<Result<Vec<_>>>()?;
        let n = tape.tokens.len() / c;
        let heads = self.cfg.heads();

        let mut offsets = Vec::with_capacity(tape.chunks.len());
        let mut acc = 0;
        for ch in &tape.chunks {
            offsets.push(acc);
            acc += ch.rows;
        }

        let partials = par::map_range(tape.chunks.len(), |ci| {
            let ch = &tape.chunks[ci];
            let rows = ch.rows;
            let dy = &dy_all[offsets[ci] * c..(offsets[ci] + rows) * c];
            let mut g = params.zeros_like();
            let mut dkeys = vec![vec![0.0; n * c]; blocks.len()];
            let mut dvalues = vec![vec![0.0; n * c]; blocks.len()];

            let (mut dwh, mut dbh) = (vec![0.0; c * c], vec![0.0; c]);
            let mut dx = linear_backward(&ch.x_final, dy, rows, wh, c, c, &mut dwh, &mut dbh, true).expect("dx");
            add_grad(&mut g, "head.weight", &dwh);
            add_grad(&mut g, "head.bias", &dbh);

            for (l, bw) in blocks.iter().enumerate().rev() {
                let t = &ch.blocks[l];
                // FFN residual
                let (mut dw2, mut db2) = (vec![0.0; c * e], vec![0.0; c]);
                let mut dh = linear_backward(&t.hact, &dx, rows, bw.w2, e, c, &mut dw2, &mut db2, true).expect("dx");
                dh.iter_mut().zip(&t.hpre).for_each(|(d, z)| *d *= nn::gelu_grad(*z));
                let (mut dw1, mut db1) = (vec![0.0; e * c], vec![0.0; e]);
                let dn2 = linear_backward(&t.n2, &dh, rows, bw.w1, c, e, &mut dw1, &mut db1, true).expect("dx");
                let (mut dg2, mut dbn2) = (vec![0.0; c], vec![0.0; c]);
                let dx1 = nn::layer_norm_backward(&dn2, c, bw.n2g, &t.ln2, &mut dg2, &mut dbn2);
                dx.iter_mut().zip(&dx1).for_each(|(a, b)| *a += b);

                // attention residual
                let (mut dwo, mut dbo) = (vec![0.0; c * c], vec![0.0; c]);
                let d_o = linear_backward(&t.o, &dx, rows, bw.wo, c, c, &mut dwo, &mut dbo, true).expect("dx");
                let dq = nn::multi_head_attention_backward(
                    &d_o,
                    &t.q,
                    &tape.keys[l],
                    &tape.values[l],
                    &t.attn,
                    rows,
                    n,
                    c,
                    heads,
                    &mut dkeys[l],
                    &mut dvalues[l],
                );
                let (mut dwq, mut dbq) = (vec![0.0; c * c], vec![0.0; c]);
                let dn1 = linear_backward(&t.n1, &dq, rows, bw.wq, c, c, &mut dwq, &mut dbq, true).expect("dx");
                let (mut dg1, mut dbn1) = (vec![0.0; c], vec![0.0; c]);
                let dx0 = nn::layer_norm_backward(&dn1, c, bw.n1g, &t.ln1, &mut dg1, &mut dbn1);
                dx.iter_mut().zip(&dx0).for_each(|(a, b)| *a += b);

                add_grad(&mut g, &block_name(l, "ffn.fc2.weight"), &dw2);
                add_grad(&mut g, &block_name(l, "ffn.fc2.bias"), &db2);
                add_grad(&mut g, &block_name(l, "ffn.fc1.weight"), &dw1);
                add_grad(&mut g, &block_name(l, "ffn.fc1.bias"), &db1);
                add_grad(&mut g, &block_name(l, "norm2.weight"), &dg2);
                add_grad(&mut g, &block_name(l, "norm2.bias"), &dbn2);
                add_grad(&mut g, &block_name(l, "attn.out.weight"), &dwo);
                add_grad(&mut g, &block_name(l, "attn.out.bias"), &dbo);
                add_grad(&mut g, &block_name(l, "attn.q.weight"), &dwq);
                add_grad(&mut g, &block_name(l, "attn.q.bias"), &dbq);
                add_grad(&mut g, &block_name(l, "norm1.weight"), &dg1);
                add_grad(&mut g, &block_name(l, "norm1.bias"), &dbn1);
            }

            let (mut dwc, mut dbc) = (vec![0.0; c * cin * k * k], vec![0.0; c]);
            let wc = params.data("query_conv.weight", &[c, cin, k, k]).expect("checked in forward");
            linear_backward(&ch.cols, &dx, rows, wc, cin * k * k, c, &mut dwc, &mut dbc, false);
            add_grad(&mut g, "query_conv.weight", &nn::conv_weight_channel_major(&dwc, c, cin, k));
            add_grad(&mut g, "query_conv.bias", &dbc);
            (g, dkeys, dvalues)
        });

        let mut grads = params.zeros_like();
        let mut dkeys = vec![vec![0.0; n * c]; blocks.len()];
        let mut dvalues = vec![vec![0.0; n * c]; blocks.len()];
        for (g, dk, dv) in partials {
            grads.add_scaled(&g, 1.0)?;
            for l in 0..blocks.len() {
                dkeys[l].iter_mut().zip(&dk[l]).for_each(|(a, b)| *a += b);
                dvalues[l].iter_mut().zip(&dv[l]).for_each(|(a, b)| *a += b);
            }
        }

        let want_tokens = self.cfg.lowres_pe == LowresPe::Learnable;
        let mut dtokens = vec![0.0; n * c];
        for (l, bw) in blocks.iter().enumerate() {
            let (mut dwk, mut dbk) = (vec![0.0; c * c], vec![0.0; c]);
            let (mut dwv, mut dbv) = (vec![0.0; c * c], vec![0.0; c]);
            let a = linear_backward(&tape.tokens, &dkeys[l], n, bw.wk, c, c, &mut dwk, &mut dbk, want_tokens);
            let b = linear_backward(&tape.tokens, &dvalues[l], n, bw.wv, c, c, &mut dwv, &mut dbv, want_tokens);
            if let (Some(a), Some(b)) = (a, b) {
                dtokens.iter_mut().zip(a.iter().zip(&b)).for_each(|(d, (x, y))| *d += x + y);
            }
            add_grad(&mut grads, &block_name(l, "attn.k.weight"), &dwk);
            add_grad(&mut grads, &block_name(l, "attn.k.bias"), &dbk);
            add_grad(&mut grads, &block_name(l, "attn.v.weight"), &dwv);
            add_grad(&mut grads, &block_name(l, "attn.v.bias"), &dbv);
        }
        if want_tokens {
            add_grad(&mut grads, "lowres_pe", &dtokens);
        }
        Ok(grads)
    }
}

fn add_grad(g: &mut ParamSet, name: &str, d: &[f64]) {
    let dst = g.data_mut(name).expect("gradient set mirrors parameters");
    dst.iter_mut().zip(d).for_each(|(a, b)| *a += b);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::param_count;

    fn tiny(kernel: usize, pe: LowresPe) -> LoftUp {
        LoftUp::new(LoftUpConfig {
            channels: 8,
            num_blocks: 1,
            heads: Some(1),
            pe_freqs: 2,
            query_conv_kernel: kernel,
            lowres_pe: pe,
            lowres_grid: Some([2, 2]),
            ..Default::default()
        })
        .unwrap()
    }

    fn noise(seed: u64, c: usize, h: usize, w: usize) -> (ImageTensor, FeatureMap) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = ImageTensor::new(1, 8, 8, (0..3 * 64).map(|_| rng.random::<f64>()).collect()).unwrap();
        let f = FeatureMap::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0)).unwrap();
        (img, f)
    }

    #[test]
    fn sinusoidal_examples() {
        let g = make_coord_grid(1, 1).unwrap();
        let pe = sinusoidal_pe(&g, 3).unwrap();
        assert_eq!(pe.len(), 12);
        for pair in pe.chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
        let mut v = Vec::new();
        push_pe(&mut v, [0.5, 1.0], 1);
        assert!((v[0] - 1.0).abs() < 1e-15 && v[1].abs() < 1e-15);
        assert!(v[2].abs() < 1e-15 && (v[3] + 1.0).abs() < 1e-15);
        assert!(sinusoidal_pe(&g, 0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LoftUpConfig { channels: 96, heads: Some(5), ..Default::default() }.validate().is_err());
        assert!(LoftUpConfig { query_conv_kernel: 5, ..Default::default() }.validate().is_err());
        assert!(LoftUpConfig { lowres_pe: LowresPe::Learnable, ..Default::default() }.validate().is_err());
        assert_eq!(LoftUpConfig::with_channels(384).heads(), 6);
        assert_eq!(LoftUpConfig::with_channels(32).heads(), 1);
    }

    #[test]
    fn query_encoding_locality_and_shape() {
        let m = tiny(1, LowresPe::Sine);
        let params = m.init_params(0);
        let (img, _) = noise(1, 8, 2, 2);
        let grid = make_coord_grid(8, 8).unwrap();
        let q = m.encode_queries(&params, &img, &grid).unwrap();
        // perturb one pixel's RGB: only that query changes with a pointwise conv
        let mut data = img.data().to_vec();
        data[9] = 1.0 - data[9];
        let img2 = ImageTensor::new(1, 8, 8, data).unwrap();
        let q2 = m.encode_queries(&params, &img2, &grid).unwrap();
        for p in 0..64 {
            let same = q[p * 8..(p + 1) * 8] == q2[p * 8..(p + 1) * 8];
            assert_eq!(same, p != 9, "pixel {p}");
        }

        let m3 = tiny(3, LowresPe::Sine);
        let mut params3 = m3.init_params(0);
        assert_eq!(m3.encode_queries(&params3, &img, &grid).unwrap().len(), 64 * 8);
        params3.data_mut("query_conv.weight").unwrap().iter_mut().for_each(|v| *v = 0.0);
        params3.data_mut("query_conv.bias").unwrap().copy_from_slice(&[0.5; 8]);
        assert!(m3.encode_queries(&params3, &img, &grid).unwrap().iter().all(|v| *v == 0.5));

        let small = ImageTensor::filled(1, 4, 4, 0.5).unwrap();
        assert!(m3.encode_queries(&params3, &small, &grid).is_err());
    }

    #[test]
    fn lowres_encoding_variants() {
        let (_, f) = noise(2, 8, 4, 4);
        let none = tiny(1, LowresPe::None);
        let t = none.encode_lowres(&none.init_params(0), &f).unwrap();
        assert_eq!(t, f.tokens(0));
        assert_eq!(t.len(), 16 * 8);

        let sine = tiny(1, LowresPe::Sine);
        let constant = FeatureMap::from_fn(8, 4, 4, |c, _, _| c as f64 * 0.1).unwrap();
        let tc = sine.encode_lowres(&sine.init_params(0), &constant).unwrap();
        let pe = sinusoidal_pe(&make_coord_grid(4, 4).unwrap(), 2).unwrap();
        // projected encoding differences between tokens 0 and 5
        for ch in 0..8 {
            let mut diff = 0.0;
            for d in 0..8 {
                diff += (pe[5 * 8 + d] - pe[d]) * sine.sine_proj[d * 8 + ch];
            }
            assert!(((tc[5 * 8 + ch] - tc[ch]) - diff).abs() < 1e-12);
        }

        let learn = tiny(1, LowresPe::Learnable);
        let p = learn.init_params(0);
        assert!(learn.encode_lowres(&p, &f).is_err()); // 4×4 vs 2×2 table
    }

    #[test]
    fn identity_blocks_at_init() {
        let m = tiny(3, LowresPe::Sine);
        let params = m.init_params(4);
        let (img, _) = noise(3, 8, 2, 2);
        let grid = make_coord_grid(8, 8).unwrap();
        let q = m.encode_queries(&params, &img, &grid).unwrap();
        let tokens: Vec<f64> = (0..4 * 8).map(|i| (i as f64 * 0.37).sin()).collect();
        let out = m.cross_attention_block(&params, 0, &q, &tokens).unwrap();
        assert_eq!(out, q);
    }

    #[test]
    fn single_token_attention_is_value_path() {
        let m = tiny(1, LowresPe::None);
        let params = m.init_params(1);
        let q: Vec<f64> = (0..5 * 8).map(|i| (i as f64).cos()).collect();
        let kv: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        let probs = m.attention_weights(&params, 0, &q, &kv).unwrap();
        assert!(probs[0].iter().all(|p| *p == 1.0));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let m = tiny(1, LowresPe::None);
        let params = m.init_params(2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q: Vec<f64> = (0..7 * 8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let kv: Vec<f64> = (0..6 * 8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let probs = m.attention_weights(&params, 0, &q, &kv).unwrap();
        for row in probs[0].chunks(6) {
            // independent recomputation of the normalization
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|p| *p > 0.0));
        }
    }

    #[test]
    fn output_shapes() {
        let m = tiny(3, LowresPe::Sine);
        let params = m.init_params(0);
        let (img, f) = noise(5, 8, 2, 2);
        for (h, w) in [(1, 1), (8, 8), (16, 16), (5, 11)] {
            let out = m.forward(&params, &img, &f, h, w).unwrap();
            assert_eq!((out.batch(), out.channels(), out.height(), out.width()), (1, 8, h, w));
        }
        assert!(m.forward(&params, &img, &f, 0, 4).is_err());
    }

    #[test]
    fn default_parameter_budget() {
        let m = LoftUp::new(LoftUpConfig::default()).unwrap();
        let n = param_count(&m.init_params(0));
        assert_eq!(n, 3_845_760);
        assert!(n <= 4_420_000);
    }
}
