//! A small bidirectional transformer encoder with hand-written backward pass.
//!
//! Blocks are pre-norm:
//!
//! ```text
//! x  = drop(word[id] + pos[i] + type[t])
//! x += drop(attn(ln1(x)))
//! x += drop(ffn(ln2(x)))      ffn(h) = gelu(h W1 + b1) W2 + b2
//! out = lnf(x)
//! ```
//!
//! Every tensor is a row-major `Array2<f64>`; vectors are stored as `1 x n`
//! rows so they broadcast over sequence positions.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, CLS, SEP};
use crate::error::{Error, Result};
use crate::rng::Rng;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub dropout_p: f64,
    pub n_types: usize,
}

impl EncoderConfig {
    /// Default toy architecture for a vocabulary of the given size.
    pub fn toy(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            max_len: 180,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            dropout_p: 0.1,
            n_types: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail("d_model must be a multiple of n_heads");
        }
        if self.max_len < 3 {
            return fail("max_len must be at least 3");
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail("dropout_p must lie in [0, 1)");
        }
        if self.vocab_size < 5 || self.d_model == 0 || self.d_ff == 0 || self.n_types == 0 {
            return fail("vocab_size, d_model, d_ff and n_types must be positive (vocab_size >= 5)");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Array2<f64>,
    pub ln1_b: Array2<f64>,
    pub wq: Array2<f64>,
    pub bq: Array2<f64>,
    pub wk: Array2<f64>,
    pub bk: Array2<f64>,
    pub wv: Array2<f64>,
    pub bv: Array2<f64>,
    pub wo: Array2<f64>,
    pub bo: Array2<f64>,
    pub ln2_g: Array2<f64>,
    pub ln2_b: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub word: Array2<f64>,
    pub pos: Array2<f64>,
    pub typ: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Array2<f64>,
    pub lnf_b: Array2<f64>,
}

/// Weight init: normal(0, 0.02) truncated at two standard deviations.
pub(crate) fn trunc_normal(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * INIT_STD {
            break v;
        }
    })
}

impl LayerParams {
    fn init(c: &EncoderConfig, rng: &mut Rng) -> Self {
        let (d, f) = (c.d_model, c.d_ff);
        LayerParams {
            ln1_g: Array2::ones((1, d)),
            ln1_b: Array2::zeros((1, d)),
            wq: trunc_normal(d, d, rng),
            bq: Array2::zeros((1, d)),
            wk: trunc_normal(d, d, rng),
            bk: Array2::zeros((1, d)),
            wv: trunc_normal(d, d, rng),
            bv: Array2::zeros((1, d)),
            wo: trunc_normal(d, d, rng),
            bo: Array2::zeros((1, d)),
            ln2_g: Array2::ones((1, d)),
            ln2_b: Array2::zeros((1, d)),
            w1: trunc_normal(d, f, rng),
            b1: Array2::zeros((1, f)),
            w2: trunc_normal(f, d, rng),
            b2: Array2::zeros((1, d)),
        }
    }

    fn zeros(c: &EncoderConfig) -> Self {
        let (d, f) = (c.d_model, c.d_ff);
        let z = |r, c| Array2::zeros((r, c));
        LayerParams {
            ln1_g: z(1, d),
            ln1_b: z(1, d),
            wq: z(d, d),
            bq: z(1, d),
            wk: z(d, d),
            bk: z(1, d),
            wv: z(d, d),
            bv: z(1, d),
            wo: z(d, d),
            bo: z(1, d),
            ln2_g: z(1, d),
            ln2_b: z(1, d),
            w1: z(d, f),
            b1: z(1, f),
            w2: z(f, d),
            b2: z(1, d),
        }
    }

    fn named(&self) -> [(&'static str, &Array2<f64>); 16] {
        [
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Array2<f64>); 16] {
        [
            ("ln1_g", &mut self.ln1_g),
            ("ln1_b", &mut self.ln1_b),
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
            ("ln2_g", &mut self.ln2_g),
            ("ln2_b", &mut self.ln2_b),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }
}

impl EncoderParams {
    pub fn init(config: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        Ok(EncoderParams {
            word: trunc_normal(config.vocab_size, d, rng),
            pos: trunc_normal(config.max_len, d, rng),
            typ: trunc_normal(config.n_types, d, rng),
            layers: (0..config.n_layers).map(|_| LayerParams::init(config, rng)).collect(),
            lnf_g: Array2::ones((1, d)),
            lnf_b: Array2::zeros((1, d)),
            config: config.clone(),
        })
    }

    pub fn zeros(config: &EncoderConfig) -> Self {
        let d = config.d_model;
        EncoderParams {
            word: Array2::zeros((config.vocab_size, d)),
            pos: Array2::zeros((config.max_len, d)),
            typ: Array2::zeros((config.n_types, d)),
            layers: (0..config.n_layers).map(|_| LayerParams::zeros(config)).collect(),
            lnf_g: Array2::zeros((1, d)),
            lnf_b: Array2::zeros((1, d)),
            config: config.clone(),
        }
    }

    /// Tensors in manifest order.
    pub fn named(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = vec![
            ("embed.word".to_string(), &self.word),
            ("embed.pos".to_string(), &self.pos),
            ("embed.type".to_string(), &self.typ),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.named().into_iter().map(|(n, t)| (format!("layer{l}.{n}"), t)));
        }
        out.push(("final.ln_g".to_string(), &self.lnf_g));
        out.push(("final.ln_b".to_string(), &self.lnf_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = vec![
            ("embed.word".to_string(), &mut self.word),
            ("embed.pos".to_string(), &mut self.pos),
            ("embed.type".to_string(), &mut self.typ),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.extend(layer.named_mut().into_iter().map(|(n, t)| (format!("layer{l}.{n}"), t)));
        }
        out.push(("final.ln_g".to_string(), &mut self.lnf_g));
        out.push(("final.ln_b".to_string(), &mut self.lnf_b));
        out
    }

    /// Expected shapes derived from the config alone.
    pub fn manifest(config: &EncoderConfig) -> Vec<(String, [usize; 2])> {
        EncoderParams::zeros(config)
            .named()
            .into_iter()
            .map(|(n, t)| (n, [t.nrows(), t.ncols()]))
            .collect()
    }

    pub fn check_shapes(&self) -> Result<()> {
        for ((name, t), (_, want)) in self.named().into_iter().zip(Self::manifest(&self.config)) {
            if t.shape() != want {
                return Err(Error::Shape {
                    name,
                    expected: want.to_vec(),
                    found: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Encodes one sequence.
    pub fn forward(&self, input: &SequenceInput, mode: Mode, rng: &mut Rng) -> Result<(Array2<f64>, ForwardCache)> {
        let c = &self.config;
        input.validate(c)?;
        let n = input.len();
        let d = c.d_model;
        let p = if mode == Mode::Train { c.dropout_p } else { 0.0 };

        let mut x0 = Array2::zeros((n, d));
        for (i, mut row) in x0.axis_iter_mut(Axis(0)).enumerate() {
            row += &self.word.row(input.ids[i] as usize);
            row += &self.pos.row(i);
            row += &self.typ.row(input.type_ids[i] as usize);
        }
        let drop_emb = dropout_mask(n, d, p, rng);
        let mut x = apply_mask(x0, &drop_emb);

        let scale = 1.0 / (c.head_dim() as f64).sqrt();
        let mut layers = Vec::with_capacity(c.n_layers);
        for (l, lp) in self.layers.iter().enumerate() {
            let (h, ln1) = layer_norm(&x, &lp.ln1_g, &lp.ln1_b);
            let q = h.dot(&lp.wq) + &lp.bq;
            let k = h.dot(&lp.wk) + &lp.bk;
            let v = h.dot(&lp.wv) + &lp.bv;
            let mut ctx = Array2::zeros((n, d));
            let mut probs = Vec::with_capacity(c.n_heads);
            for head in 0..c.n_heads {
                let cols = s![.., head * c.head_dim()..(head + 1) * c.head_dim()];
                let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
                for (j, &keep) in input.mask.iter().enumerate() {
                    if !keep {
                        scores.column_mut(j).fill(f64::NEG_INFINITY);
                    }
                }
                softmax_rows(&mut scores);
                ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
                probs.push(scores);
            }
            let attn = ctx.dot(&lp.wo) + &lp.bo;
            let drop_attn = dropout_mask(n, d, p, rng);
            let x1 = x + &apply_mask(attn, &drop_attn);

            let (h2, ln2) = layer_norm(&x1, &lp.ln2_g, &lp.ln2_b);
            let u = h2.dot(&lp.w1) + &lp.b1;
            let g = u.mapv(gelu);
            let f = g.dot(&lp.w2) + &lp.b2;
            let drop_ffn = dropout_mask(n, d, p, rng);
            x = x1 + &apply_mask(f, &drop_ffn);

            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("encoder layer {l}")));
            }
            layers.push(LayerCache {
                ln1,
                h,
                q,
                k,
                v,
                probs,
                ctx,
                drop_attn,
                ln2,
                h2,
                u,
                g,
                drop_ffn,
            });
        }
        let (out, lnf) = layer_norm(&x, &self.lnf_g, &self.lnf_b);
        let cache = ForwardCache {
            ids: input.ids.clone(),
            type_ids: input.type_ids.clone(),
            drop_emb,
            layers,
            lnf,
        };
        Ok((out, cache))
    }

    /// Accumulates parameter gradients for one sequence into `grads` and
    /// returns the gradient with respect to the summed input embeddings.
    pub fn backward(&self, cache: ForwardCache, d_out: &Array2<f64>, grads: &mut EncoderParams) -> Array2<f64> {
        let c = &self.config;
        let scale = 1.0 / (c.head_dim() as f64).sqrt();
        let mut dx = layer_norm_backward(d_out, &cache.lnf, &self.lnf_g, &mut grads.lnf_g, &mut grads.lnf_b);

        for ((lp, lc), lg) in self.layers.iter().zip(cache.layers).zip(grads.layers.iter_mut()).rev() {
            // feed-forward branch
            let df = apply_mask_ref(&dx, &lc.drop_ffn);
            lg.w2 += &lc.g.t().dot(&df);
            lg.b2 += &df.sum_axis(Axis(0)).insert_axis(Axis(0));
            let mut du = df.dot(&lp.w2.t());
            Zip::from(&mut du).and(&lc.u).for_each(|g, &u| *g *= gelu_grad(u));
            lg.w1 += &lc.h2.t().dot(&du);
            lg.b1 += &du.sum_axis(Axis(0)).insert_axis(Axis(0));
            let dh2 = du.dot(&lp.w1.t());
            let dx1 = dx + &layer_norm_backward(&dh2, &lc.ln2, &lp.ln2_g, &mut lg.ln2_g, &mut lg.ln2_b);

            // attention branch
            let da = apply_mask_ref(&dx1, &lc.drop_attn);
            lg.wo += &lc.ctx.t().dot(&da);
            lg.bo += &da.sum_axis(Axis(0)).insert_axis(Axis(0));
            let dctx = da.dot(&lp.wo.t());
            let mut dq = Array2::zeros(lc.q.raw_dim());
            let mut dk = Array2::zeros(lc.k.raw_dim());
            let mut dv = Array2::zeros(lc.v.raw_dim());
            for (head, probs) in lc.probs.iter().enumerate() {
                let cols = s![.., head * c.head_dim()..(head + 1) * c.head_dim()];
                let dctx_h = dctx.slice(cols);
                dv.slice_mut(cols).assign(&probs.t().dot(&dctx_h));
                let dp = dctx_h.dot(&lc.v.slice(cols).t());
                let dscores = softmax_backward(probs, &dp.view()) * scale;
                dq.slice_mut(cols).assign(&dscores.dot(&lc.k.slice(cols)));
                dk.slice_mut(cols).assign(&dscores.t().dot(&lc.q.slice(cols)));
            }
            for (dproj, gw, gb) in [
                (&dq, &mut lg.wq, &mut lg.bq),
                (&dk, &mut lg.wk, &mut lg.bk),
                (&dv, &mut lg.wv, &mut lg.bv),
            ] {
                *gw += &lc.h.t().dot(dproj);
                *gb += &dproj.sum_axis(Axis(0)).insert_axis(Axis(0));
            }
            let dh = dq.dot(&lp.wq.t()) + dk.dot(&lp.wk.t()) + dv.dot(&lp.wv.t());
            dx = dx1 + &layer_norm_backward(&dh, &lc.ln1, &lp.ln1_g, &mut lg.ln1_g, &mut lg.ln1_b);
        }

        let dx0 = apply_mask_ref(&dx, &cache.drop_emb);
        for (i, row) in dx0.axis_iter(Axis(0)).enumerate() {
            let mut w = grads.word.row_mut(cache.ids[i] as usize);
            w += &row;
            let mut p = grads.pos.row_mut(i);
            p += &row;
            let mut t = grads.typ.row_mut(cache.type_ids[i] as usize);
            t += &row;
        }
        dx0
    }
}

/// First-position hidden state.
pub fn cls_state(hidden: &Array2<f64>) -> Array1<f64> {
    hidden.row(0).to_owned()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One encoder input row set: ids, segment types and attention mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceInput {
    pub ids: Vec<TokenId>,
    pub type_ids: Vec<u8>,
    pub mask: Vec<bool>,
}

impl SequenceInput {
    /// Unpadded input with every position attended.
    pub fn new(ids: Vec<TokenId>, type_ids: Vec<u8>) -> Self {
        let mask = vec![true; ids.len()];
        SequenceInput { ids, type_ids, mask }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Extends with `[PAD]` positions that are masked out.
    pub fn padded(&self, len: usize) -> SequenceInput {
        let mut out = self.clone();
        while out.ids.len() < len {
            out.ids.push(crate::corpus::PAD);
            out.type_ids.push(0);
            out.mask.push(false);
        }
        out
    }

    pub fn validate(&self, c: &EncoderConfig) -> Result<()> {
        let n = self.ids.len();
        if n == 0 || self.type_ids.len() != n || self.mask.len() != n {
            return Err(Error::Config(
                "sequence, type and mask lengths differ or are empty".into(),
            ));
        }
        if n > c.max_len {
            return Err(Error::InputTooLong(format!("{n} tokens > max_len {}", c.max_len)));
        }
        if self.ids[0] != CLS || !self.mask[0] {
            return Err(Error::Config("position 0 must be an attended [CLS]".into()));
        }
        if let Some(&bad) = self.ids.iter().find(|&&id| id as usize >= c.vocab_size) {
            return Err(Error::Config(format!(
                "token id {bad} outside vocabulary of {}",
                c.vocab_size
            )));
        }
        if let Some(&bad) = self.type_ids.iter().find(|&&t| t as usize >= c.n_types) {
            return Err(Error::Config(format!("type id {bad} >= n_types {}", c.n_types)));
        }
        Ok(())
    }
}

/// `[CLS] c [SEP] q [SEP] a [SEP]`; type 0 through the first `[SEP]`, 1 after.
/// Over-long inputs lose context tail first, then question tail; the answer
/// is kept whole.
pub fn format_qa_input(
    context: &[TokenId],
    question: &[TokenId],
    answer: &[TokenId],
    max_len: usize,
) -> Result<SequenceInput> {
    if context.is_empty() || question.is_empty() || answer.is_empty() {
        return Err(Error::Config("context, question and answer must be non-empty".into()));
    }
    if answer.len() + 4 > max_len {
        return Err(Error::InputTooLong(format!(
            "answer of {} tokens plus 4 specials exceeds max_len {max_len}",
            answer.len()
        )));
    }
    let budget = max_len - 4 - answer.len();
    let excess = (context.len() + question.len()).saturating_sub(budget);
    let c_cut = excess.min(context.len());
    let c_len = context.len() - c_cut;
    let q_len = question.len() - (excess - c_cut);

    let mut ids = Vec::with_capacity(c_len + q_len + answer.len() + 4);
    ids.push(CLS);
    ids.extend_from_slice(&context[..c_len]);
    ids.push(SEP);
    let first_sep = ids.len();
    ids.extend_from_slice(&question[..q_len]);
    ids.push(SEP);
    ids.extend_from_slice(answer);
    ids.push(SEP);
    let type_ids = (0..ids.len()).map(|i| u8::from(i >= first_sep)).collect();
    Ok(SequenceInput::new(ids, type_ids))
}

/// `[CLS] s1 [SEP] s2 [SEP] ...`, segment `i` taking `types[i]` (its closing
/// `[SEP]` included). The longest segment's tail is trimmed until the
/// sequence fits; every segment keeps at least one token.
pub fn format_segments(segments: &[&[TokenId]], types: &[u8], max_len: usize) -> Result<SequenceInput> {
    if segments.is_empty() || segments.iter().any(|s| s.is_empty()) || types.len() != segments.len() {
        return Err(Error::Config("segments must be non-empty with one type each".into()));
    }
    let specials = segments.len() + 1;
    if specials + segments.len() > max_len {
        return Err(Error::InputTooLong(format!(
            "{} segments cannot fit in {max_len}",
            segments.len()
        )));
    }
    let mut lens: Vec<usize> = segments.iter().map(|s| s.len()).collect();
    let mut total: usize = lens.iter().sum::<usize>() + specials;
    while total > max_len {
        let i = (0..lens.len())
            .max_by_key(|&i| (lens[i], std::cmp::Reverse(i)))
            .expect("non-empty");
        let cut = (total - max_len).min(lens[i] - 1).max(1);
        lens[i] -= cut;
        total -= cut;
    }
    let mut ids = vec![CLS];
    let mut type_ids = vec![types[0]];
    for ((seg, &len), &t) in segments.iter().zip(&lens).zip(types) {
        ids.extend_from_slice(&seg[..len]);
        ids.push(SEP);
        type_ids.extend(std::iter::repeat_n(t, len + 1));
    }
    Ok(SequenceInput::new(ids, type_ids))
}

#[derive(Debug)]
pub struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

#[derive(Debug)]
struct LayerCache {
    ln1: LnCache,
    h: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    drop_attn: Option<Array2<f64>>,
    ln2: LnCache,
    h2: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
    drop_ffn: Option<Array2<f64>>,
}

/// Activations retained by `forward`; `backward` consumes it.
#[derive(Debug)]
pub struct ForwardCache {
    ids: Vec<TokenId>,
    type_ids: Vec<u8>,
    drop_emb: Option<Array2<f64>>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
}

impl ForwardCache {
    /// Attention probabilities of one head, `queries x keys`.
    pub fn attention(&self, layer: usize, head: usize) -> &Array2<f64> {
        &self.layers[layer].probs[head]
    }
}

fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut Rng) -> Option<Array2<f64>> {
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some(Array2::from_shape_simple_fn((rows, cols), || {
        if rng.gen::<f64>() < p {
            0.0
        } else {
            keep
        }
    }))
}

fn apply_mask(x: Array2<f64>, mask: &Option<Array2<f64>>) -> Array2<f64> {
    match mask {
        Some(m) => x * m,
        None => x,
    }
}

fn apply_mask_ref(x: &Array2<f64>, mask: &Option<Array2<f64>>) -> Array2<f64> {
    match mask {
        Some(m) => x * m,
        None => x.clone(),
    }
}

pub(crate) fn layer_norm(x: &Array2<f64>, g: &Array2<f64>, b: &Array2<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mean = x.sum_axis(Axis(1)) / d;
    let centered = x - &mean.view().insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
    let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = centered * inv_std.view().insert_axis(Axis(1));
    let y = &xhat * g + b;
    (y, LnCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: &Array2<f64>,
    dg: &mut Array2<f64>,
    db: &mut Array2<f64>,
) -> Array2<f64> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = dy * g;
    let d = dy.ncols() as f64;
    let mean_dxhat = dxhat.sum_axis(Axis(1)) / d;
    let mean_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / d;
    let mut dx = dxhat - &mean_dxhat.insert_axis(Axis(1)) - &(&cache.xhat * &mean_dxhat_xhat.insert_axis(Axis(1)));
    dx *= &cache.inv_std.view().insert_axis(Axis(1));
    dx
}

/// Row-wise softmax in place. Rows may contain `-inf` entries but not only those.
pub(crate) fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Gradient through row-wise softmax given probabilities `p` and upstream `dp`.
fn softmax_backward(p: &Array2<f64>, dp: &ArrayView2<f64>) -> Array2<f64> {
    let inner = (p * dp).sum_axis(Axis(1));
    p * &(dp - &inner.insert_axis(Axis(1)))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn toy(vocab: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size: vocab,
            max_len: 24,
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 32,
            dropout_p: 0.1,
            n_types: 2,
        }
    }

    #[test]
    fn qa_formatting() {
        let inp = format_qa_input(&[10, 11, 12], &[13, 14], &[15], 180).unwrap();
        assert_eq!(inp.len(), 10);
        let seps: Vec<usize> = inp
            .ids
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == SEP)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(seps, [4, 7, 9]);
        assert_eq!(inp.type_ids, [0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
    }

    #[test]
    fn qa_truncation_keeps_answer() {
        let c: Vec<TokenId> = (0..250).map(|i| 10 + i % 7).collect();
        let q: Vec<TokenId> = vec![20; 30];
        let a: Vec<TokenId> = vec![30; 20];
        let inp = format_qa_input(&c, &q, &a, 180).unwrap();
        assert_eq!(inp.len(), 180);
        assert_eq!(&inp.ids[179 - 20..179], a.as_slice());
        // question survives whole, context shrinks
        assert_eq!(inp.ids.iter().filter(|&&t| t == 20).count(), 30);

        let long_q = vec![20; 300];
        let inp = format_qa_input(&c, &long_q, &a, 180).unwrap();
        assert_eq!(inp.len(), 180);
        assert_eq!(inp.ids[1], SEP, "context fully truncated");
        assert!(format_qa_input(&c, &q, &vec![30; 177], 180).is_err());
    }

    #[test]
    fn segment_formatting() {
        let inp = format_segments(&[&[10, 11], &[12]], &[0, 1], 10).unwrap();
        assert_eq!(inp.ids, [CLS, 10, 11, SEP, 12, SEP]);
        assert_eq!(inp.type_ids, [0, 0, 0, 0, 1, 1]);
        let inp = format_segments(&[&[10; 8], &[12; 3]], &[0, 0], 8).unwrap();
        assert_eq!(inp.len(), 8);
        assert_eq!(inp.ids.iter().filter(|&&t| t == 12).count(), 3);
    }

    #[test]
    fn config_validation() {
        let mut c = toy(10);
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = toy(10);
        c.max_len = 2;
        assert!(c.validate().is_err());
        let mut c = toy(10);
        c.dropout_p = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn forward_shape_and_eval_determinism() {
        let mut c = toy(20);
        c.d_model = 32;
        let params = EncoderParams::init(&c, &mut rng_from_seed(0)).unwrap();
        let inp = format_qa_input(&[10, 11], &[12], &[13, 14], c.max_len).unwrap();
        let (h1, _) = params.forward(&inp, Mode::Eval, &mut rng_from_seed(1)).unwrap();
        let (h2, _) = params.forward(&inp, Mode::Eval, &mut rng_from_seed(2)).unwrap();
        assert_eq!(h1.shape(), [inp.len(), 32]);
        assert_eq!(h1, h2);
        assert_eq!(cls_state(&h1), h1.row(0));
    }

    #[test]
    fn padding_does_not_leak() {
        let c = toy(20);
        let params = EncoderParams::init(&c, &mut rng_from_seed(0)).unwrap();
        let inp = format_qa_input(&[10, 11], &[12], &[13], c.max_len).unwrap();
        let (a, _) = params
            .forward(&inp.padded(12), Mode::Eval, &mut rng_from_seed(0))
            .unwrap();
        let (b, _) = params
            .forward(&inp.padded(20), Mode::Eval, &mut rng_from_seed(0))
            .unwrap();
        let k = inp.len();
        assert_eq!(a.slice(s![..k, ..]), b.slice(s![..k, ..]));
        let (_, cache) = params
            .forward(&inp.padded(20), Mode::Eval, &mut rng_from_seed(0))
            .unwrap();
        let p = cache.attention(1, 0);
        for row in p.axis_iter(Axis(0)) {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.slice(s![k..]).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let c = toy(20);
        let params = EncoderParams::init(&c, &mut rng_from_seed(0)).unwrap();
        let inp = format_qa_input(&[10, 11], &[12], &[13], c.max_len).unwrap();
        let (h, cache) = params.forward(&inp, Mode::Train, &mut rng_from_seed(3)).unwrap();
        let mut g = EncoderParams::zeros(&c);
        params.backward(cache, &Array2::zeros(h.raw_dim()), &mut g);
        assert!(g.named().iter().all(|(_, t)| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn layer_norm_scale_gradient_closed_form() {
        // x = [a, -a] normalizes to xhat = [1, -1] (up to eps); with loss
        // L = w . y the scale gradient is w * xhat.
        let a = 3.0;
        let x = ndarray::arr2(&[[a, -a]]);
        let g = ndarray::arr2(&[[1.0, 1.0]]);
        let b = ndarray::arr2(&[[0.0, 0.0]]);
        let (_, cache) = layer_norm(&x, &g, &b);
        let w = ndarray::arr2(&[[0.7, -0.2]]);
        let mut dg = Array2::zeros((1, 2));
        let mut db = Array2::zeros((1, 2));
        let dx = layer_norm_backward(&w, &cache, &g, &mut dg, &mut db);
        let xhat = a / (a * a + LN_EPS).sqrt();
        assert!((dg[[0, 0]] - 0.7 * xhat).abs() < 1e-15);
        assert!((dg[[0, 1]] - 0.2 * xhat).abs() < 1e-15);
        assert_eq!(db, w);
        // dx = inv_std * (w - mean(w) - xhat * mean(w * xhat)), by hand for two elements
        let inv_std = 1.0 / (a * a + LN_EPS).sqrt();
        let mean_w = 0.25;
        let mean_wx = (0.7 * xhat + 0.2 * xhat) / 2.0;
        let expect0 = inv_std * (0.7 - mean_w - xhat * mean_wx);
        let expect1 = inv_std * (-0.2 - mean_w + xhat * mean_wx);
        assert!((dx[[0, 0]] - expect0).abs() < 1e-15);
        assert!((dx[[0, 1]] - expect1).abs() < 1e-15);
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &u in &[-3.0, -0.5, 0.0, 0.3, 2.0] {
            let h = 1e-6;
            let fd = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert!((fd - gelu_grad(u)).abs() < 1e-8);
        }
    }
}
