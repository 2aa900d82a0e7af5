use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    apply_mask, Attention, AttentionCache, Ctx, FeedForward, FeedForwardCache, LayerNorm, LayerNormCache,
};
use super::params::{Init, ParamId, ParamSet};
use super::tensor::{log_softmax_in_place, matmul, matmul_nt, matmul_tn_acc, softmax_in_place, vecmat, Mat};
use super::{Example, ModelConfig};
use crate::annotate::Factor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vocab::{TokenId, BOS_ID};

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross_attn: Attention,
    ln3: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: ParamId,
    factor_embed: ParamId,
    target_factor: ParamId,
    enc: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    dec: Vec<DecoderLayer>,
    dec_norm: LayerNorm,
    out_proj: ParamId,
    out_bias: ParamId,
}

/// Pre-norm encoder-decoder transformer.
///
/// Source positions embed as `[word ⊕ factor]`, target positions as
/// `[word ⊕ target_factor]`; the word table is shared by both sides and by the
/// output layer, which projects the decoder state down to word width first.
#[derive(Debug, Clone)]
pub struct Transformer<T> {
    config: ModelConfig,
    params: ParamSet<T>,
    layout: Layout,
    positions: Mat<T>,
    embed_scale: T,
}

struct EncCache<T> {
    ln1: LayerNormCache<T>,
    attn: AttentionCache<T>,
    drop1: Option<Vec<T>>,
    ln2: LayerNormCache<T>,
    ff: FeedForwardCache<T>,
    drop2: Option<Vec<T>>,
}

struct DecCache<T> {
    ln1: LayerNormCache<T>,
    self_attn: AttentionCache<T>,
    drop1: Option<Vec<T>>,
    ln2: LayerNormCache<T>,
    cross_attn: AttentionCache<T>,
    drop2: Option<Vec<T>>,
    ln3: LayerNormCache<T>,
    ff: FeedForwardCache<T>,
    drop3: Option<Vec<T>>,
}

/// Encoder output plus per-layer cross-attention keys and values.
#[derive(Debug, Clone)]
pub struct EncodedSource<T> {
    memory: Mat<T>,
    cross: Vec<(Mat<T>, Mat<T>)>,
}

impl<T: Scalar> EncodedSource<T> {
    pub fn memory(&self) -> &Mat<T> {
        &self.memory
    }
}

/// Incremental decoder state: self-attention keys/values of every fed position.
#[derive(Debug, Clone)]
pub struct DecoderState<T> {
    pos: usize,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
}

impl<T> DecoderState<T> {
    pub fn position(&self) -> usize {
        self.pos
    }
}

fn sinusoids<T: Scalar>(rows: usize, width: usize) -> Mat<T> {
    let mut m = Mat::zeros(rows, width);
    let half = width / 2;
    for pos in 0..rows {
        for i in 0..width {
            let k = (i % half.max(1)) as f64;
            let freq = 1.0 / 10000f64.powf(k / half.max(1) as f64);
            let angle = pos as f64 * freq;
            m.data[pos * width + i] = T::from_f64_lossy(if i < half { angle.sin() } else { angle.cos() });
        }
    }
    m
}

impl<T: Scalar> Transformer<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamSet::new();
        let d = config.model_size;
        let dw = config.word_embed_size();
        let embed = ps.add(
            "embed.words".into(),
            config.vocab_size,
            dw,
            Init::Uniform(1.0 / (dw as f64).sqrt()),
            &mut rng,
        );
        let factor_embed = ps.add(
            "embed.factors".into(),
            3,
            config.factor_embed_size,
            Init::Uniform(1.0),
            &mut rng,
        );
        let target_factor = ps.add(
            "embed.target_factor".into(),
            1,
            config.factor_embed_size,
            Init::Uniform(1.0),
            &mut rng,
        );
        let enc = (0..config.num_layers_enc)
            .map(|l| {
                let n = format!("encoder.{l}");
                EncoderLayer {
                    ln1: LayerNorm::new(&mut ps, &mut rng, &format!("{n}.ln1"), d),
                    attn: Attention::new(&mut ps, &mut rng, &format!("{n}.self_attn"), d, config.attention_heads),
                    ln2: LayerNorm::new(&mut ps, &mut rng, &format!("{n}.ln2"), d),
                    ff: FeedForward::new(&mut ps, &mut rng, &n, d, config.feed_forward_hidden),
                }
            })
            .collect();
        let enc_norm = LayerNorm::new(&mut ps, &mut rng, "encoder.final_norm", d);
        let dec = (0..config.num_layers_dec)
            .map(|l| {
                let n = format!("decoder.{l}");
                DecoderLayer {
                    ln1: LayerNorm::new(&mut ps, &mut rng, &format!("{n}.ln1"), d),
                    self_attn: Attention::new(&mut ps, &mut rng, &format!("{n}.self_attn"), d, config.attention_heads),
                    ln2: LayerNorm::new(&mut ps, &mut rng, &format!("{n}.ln2"), d),
                    cross_attn: Attention::new(
                        &mut ps,
                        &mut rng,
                        &format!("{n}.cross_attn"),
                        d,
                        config.attention_heads,
                    ),
                    ln3: LayerNorm::new(&mut ps, &mut rng, &format!("{n}.ln3"), d),
                    ff: FeedForward::new(&mut ps, &mut rng, &n, d, config.feed_forward_hidden),
                }
            })
            .collect();
        let dec_norm = LayerNorm::new(&mut ps, &mut rng, "decoder.final_norm", d);
        let out_proj = ps.add("output.projection".into(), d, dw, Init::Xavier, &mut rng);
        let out_bias = ps.add("output.bias".into(), 1, config.vocab_size, Init::Zeros, &mut rng);
        let positions = sinusoids(config.max_seq_len + 1, d);
        let embed_scale = T::from_f64_lossy((dw as f64).sqrt());
        Ok(Transformer {
            config,
            params: ps,
            layout: Layout {
                embed,
                factor_embed,
                target_factor,
                enc,
                enc_norm,
                dec,
                dec_norm,
                out_proj,
                out_bias,
            },
            positions,
            embed_scale,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamSet<T>) {
        assert_eq!(params.len(), self.params.len());
        self.params = params;
    }

    pub fn factor_table(&self) -> &Mat<T> {
        self.params.get(self.layout.factor_embed)
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        let vocab = self.config.vocab_size;
        match ids.iter().find(|&&id| id as usize >= vocab) {
            Some(&id) => Err(Error::OutOfVocabulary { id: id as usize, vocab }),
            None => Ok(()),
        }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len,
                max: self.config.max_seq_len,
            });
        }
        Ok(())
    }

    fn embed_row(&self, out: &mut [T], id: TokenId, tail: &[T], pos: usize) {
        let dw = self.config.word_embed_size();
        let e = self.params.get(self.layout.embed).row(id as usize);
        for (o, &v) in out[..dw].iter_mut().zip(e) {
            *o = v * self.embed_scale;
        }
        out[dw..].copy_from_slice(tail);
        for (o, &p) in out.iter_mut().zip(self.positions.row(pos)) {
            *o += p;
        }
    }

    /// Source embedding before contextualization: `[word ⊕ factor] + position`.
    pub fn embed_source(&self, ids: &[TokenId], factors: &[u32]) -> Result<Mat<T>> {
        let factors = factors
            .iter()
            .map(|&f| Factor::try_from(f))
            .collect::<Result<Vec<_>>>()?;
        self.embed_factored(ids, &factors)
    }

    fn embed_factored(&self, ids: &[TokenId], factors: &[Factor]) -> Result<Mat<T>> {
        if ids.len() != factors.len() {
            return Err(Error::LengthMismatch {
                what: "subword ids vs factors",
                left: ids.len(),
                right: factors.len(),
            });
        }
        self.check_len(ids.len())?;
        self.check_ids(ids)?;
        let table = self.params.get(self.layout.factor_embed);
        let mut x = Mat::zeros(ids.len(), self.config.model_size);
        for (t, (&id, f)) in ids.iter().zip(factors).enumerate() {
            self.embed_row(x.row_mut(t), id, table.row(f.index()), t);
        }
        Ok(x)
    }

    fn embed_target(&self, inputs: &[TokenId]) -> Mat<T> {
        let tail = self.params.get(self.layout.target_factor).data.clone();
        let mut y = Mat::zeros(inputs.len(), self.config.model_size);
        for (t, &id) in inputs.iter().enumerate() {
            self.embed_row(y.row_mut(t), id, &tail, t);
        }
        y
    }

    fn encode_full(&self, mut x: Mat<T>, ctx: &mut Ctx) -> (Mat<T>, Vec<EncCache<T>>, LayerNormCache<T>) {
        let p = &self.params;
        let mut caches = Vec::with_capacity(self.layout.enc.len());
        for layer in &self.layout.enc {
            let (a, ln1) = layer.ln1.forward(p, &x);
            let (mut s, attn) = layer.attn.forward(p, &a, &a, false, ctx);
            let drop1 = ctx.mask::<T>(s.len());
            apply_mask(&mut s, &drop1);
            x.add_assign(&s);
            let (b, ln2) = layer.ln2.forward(p, &x);
            let (mut f, ff) = layer.ff.forward(p, &b, ctx);
            let drop2 = ctx.mask::<T>(f.len());
            apply_mask(&mut f, &drop2);
            x.add_assign(&f);
            caches.push(EncCache {
                ln1,
                attn,
                drop1,
                ln2,
                ff,
                drop2,
            });
        }
        let (out, norm) = self.layout.enc_norm.forward(p, &x);
        (out, caches, norm)
    }

    fn decode_full(
        &self,
        mut y: Mat<T>,
        memory: &Mat<T>,
        ctx: &mut Ctx,
    ) -> (Mat<T>, Vec<DecCache<T>>, LayerNormCache<T>) {
        let p = &self.params;
        let mut caches = Vec::with_capacity(self.layout.dec.len());
        for layer in &self.layout.dec {
            let (a, ln1) = layer.ln1.forward(p, &y);
            let (mut s, self_attn) = layer.self_attn.forward(p, &a, &a, true, ctx);
            let drop1 = ctx.mask::<T>(s.len());
            apply_mask(&mut s, &drop1);
            y.add_assign(&s);
            let (b, ln2) = layer.ln2.forward(p, &y);
            let (mut c, cross_attn) = layer.cross_attn.forward(p, &b, memory, false, ctx);
            let drop2 = ctx.mask::<T>(c.len());
            apply_mask(&mut c, &drop2);
            y.add_assign(&c);
            let (e, ln3) = layer.ln3.forward(p, &y);
            let (mut f, ff) = layer.ff.forward(p, &e, ctx);
            let drop3 = ctx.mask::<T>(f.len());
            apply_mask(&mut f, &drop3);
            y.add_assign(&f);
            caches.push(DecCache {
                ln1,
                self_attn,
                drop1,
                ln2,
                cross_attn,
                drop2,
                ln3,
                ff,
                drop3,
            });
        }
        let (out, norm) = self.layout.dec_norm.forward(p, &y);
        (out, caches, norm)
    }

    /// Logits for every row of the final decoder states, plus the projected states.
    fn output_logits(&self, h: &Mat<T>) -> (Mat<T>, Mat<T>) {
        let z = matmul(h, self.params.get(self.layout.out_proj));
        let mut logits = matmul_nt(&z, self.params.get(self.layout.embed));
        let bias = &self.params.get(self.layout.out_bias).data;
        for i in 0..logits.rows {
            for (v, &b) in logits.row_mut(i).iter_mut().zip(bias) {
                *v += b;
            }
        }
        (logits, z)
    }

    fn decoder_inputs(ex: &Example) -> Vec<TokenId> {
        std::iter::once(BOS_ID).chain(ex.tgt.iter().copied()).collect()
    }

    fn validate_example(&self, ex: &Example) -> Result<()> {
        self.check_len(ex.src.len())?;
        self.check_len(ex.tgt.len())?;
        self.check_ids(&ex.tgt)
    }

    /// Summed label-smoothed cross-entropy over the `tgt.len() + 1` target positions.
    pub fn loss(&self, ex: &Example, label_smoothing: f64) -> Result<T> {
        self.run(ex, label_smoothing, None, &mut Ctx::inference())
    }

    /// Like [`Transformer::loss`], accumulating gradients into `grads`.
    pub fn loss_and_grad(
        &self,
        ex: &Example,
        label_smoothing: f64,
        grads: &mut ParamSet<T>,
        ctx: &mut Ctx,
    ) -> Result<T> {
        self.run(ex, label_smoothing, Some(grads), ctx)
    }

    fn run(&self, ex: &Example, label_smoothing: f64, grads: Option<&mut ParamSet<T>>, ctx: &mut Ctx) -> Result<T> {
        self.validate_example(ex)?;
        let x0 = self.embed_factored(&ex.src, &ex.factors)?;
        let (memory, enc_caches, enc_norm) = self.encode_full(x0, ctx);
        let inputs = Self::decoder_inputs(ex);
        let y0 = self.embed_target(&inputs);
        let (h, dec_caches, dec_norm) = self.decode_full(y0, &memory, ctx);
        let (mut logits, z) = self.output_logits(&h);

        let vocab = self.config.vocab_size;
        let eps = T::from_f64_lossy(label_smoothing);
        let off = if vocab > 1 {
            eps / T::from_usize_lossy(vocab - 1)
        } else {
            T::zero()
        };
        let on = T::one() - eps;
        let targets: Vec<TokenId> = ex
            .tgt
            .iter()
            .copied()
            .chain(std::iter::once(crate::vocab::EOS_ID))
            .collect();
        let mut loss = T::zero();
        for (t, &y) in targets.iter().enumerate() {
            let row = logits.row_mut(t);
            log_softmax_in_place(row);
            let mut row_loss = T::zero();
            for (i, &lp) in row.iter().enumerate() {
                let q = if i == y as usize { on } else { off };
                if q != T::zero() {
                    row_loss -= q * lp;
                }
            }
            loss += row_loss;
            // log-probs become the gradient p - q in place
            for (i, v) in row.iter_mut().enumerate() {
                let q = if i == y as usize { on } else { off };
                *v = v.exp() - q;
            }
        }

        let Some(g) = grads else { return Ok(loss) };
        let dlogits = logits;
        let l = &self.layout;
        let p = &self.params;

        let dz = matmul(&dlogits, p.get(l.embed));
        matmul_tn_acc(g.get_mut(l.embed), &dlogits, &z);
        {
            let gb = g.get_mut(l.out_bias);
            for i in 0..dlogits.rows {
                for (acc, &d) in gb.data.iter_mut().zip(dlogits.row(i)) {
                    *acc += d;
                }
            }
        }
        matmul_tn_acc(g.get_mut(l.out_proj), &h, &dz);
        let dh = matmul_nt(&dz, p.get(l.out_proj));

        let mut dy = l.dec_norm.backward(p, g, &dec_norm, &dh);
        let mut dmemory = memory.zeros_like();
        for (layer, c) in l.dec.iter().zip(&dec_caches).rev() {
            let mut df = dy.clone();
            apply_mask(&mut df, &c.drop3);
            let de = layer.ff.backward(p, g, &c.ff, &df);
            dy.add_assign(&layer.ln3.backward(p, g, &c.ln3, &de));

            let mut dc = dy.clone();
            apply_mask(&mut dc, &c.drop2);
            let (db, dmem) = layer.cross_attn.backward(p, g, &c.cross_attn, &dc);
            dmemory.add_assign(&dmem);
            dy.add_assign(&layer.ln2.backward(p, g, &c.ln2, &db));

            let mut ds = dy.clone();
            apply_mask(&mut ds, &c.drop1);
            let (mut da, dkv) = layer.self_attn.backward(p, g, &c.self_attn, &ds);
            da.add_assign(&dkv);
            dy.add_assign(&layer.ln1.backward(p, g, &c.ln1, &da));
        }
        self.embedding_backward(g, &inputs, None, &dy);

        let mut dx = l.enc_norm.backward(p, g, &enc_norm, &dmemory);
        for (layer, c) in l.enc.iter().zip(&enc_caches).rev() {
            let mut df = dx.clone();
            apply_mask(&mut df, &c.drop2);
            let db = layer.ff.backward(p, g, &c.ff, &df);
            dx.add_assign(&layer.ln2.backward(p, g, &c.ln2, &db));

            let mut ds = dx.clone();
            apply_mask(&mut ds, &c.drop1);
            let (mut da, dkv) = layer.attn.backward(p, g, &c.attn, &ds);
            da.add_assign(&dkv);
            dx.add_assign(&layer.ln1.backward(p, g, &c.ln1, &da));
        }
        self.embedding_backward(g, &ex.src, Some(&ex.factors), &dx);
        Ok(loss)
    }

    fn embedding_backward(&self, g: &mut ParamSet<T>, ids: &[TokenId], factors: Option<&[Factor]>, dx: &Mat<T>) {
        let dw = self.config.word_embed_size();
        let l = &self.layout;
        for (t, &id) in ids.iter().enumerate() {
            let drow = dx.row(t);
            for (acc, &d) in g.get_mut(l.embed).row_mut(id as usize).iter_mut().zip(&drow[..dw]) {
                *acc += d * self.embed_scale;
            }
            let tail = match factors {
                Some(f) => g.get_mut(l.factor_embed).row_mut(f[t].index()),
                None => g.get_mut(l.target_factor).row_mut(0),
            };
            for (acc, &d) in tail.iter_mut().zip(&drow[dw..]) {
                *acc += d;
            }
        }
    }

    /// Next-token distribution after `tgt_prefix`, computed with the full
    /// (non-incremental) network in inference mode.
    pub fn forward(&self, src: &[TokenId], factors: &[Factor], tgt_prefix: &[TokenId]) -> Result<Vec<T>> {
        self.check_len(tgt_prefix.len())?;
        self.check_ids(tgt_prefix)?;
        let x0 = self.embed_factored(src, factors)?;
        let mut ctx = Ctx::inference();
        let (memory, _, _) = self.encode_full(x0, &mut ctx);
        let inputs: Vec<TokenId> = std::iter::once(BOS_ID).chain(tgt_prefix.iter().copied()).collect();
        let y0 = self.embed_target(&inputs);
        let (h, _, _) = self.decode_full(y0, &memory, &mut ctx);
        let last = h.rows - 1;
        let (logits, _) = self.output_logits(&Mat::from_vec(1, h.cols, h.row(last).to_vec()));
        let mut probs = logits.data;
        softmax_in_place(&mut probs);
        Ok(probs)
    }

    pub fn encode(&self, src: &[TokenId], factors: &[Factor]) -> Result<EncodedSource<T>> {
        let x0 = self.embed_factored(src, factors)?;
        let (memory, _, _) = self.encode_full(x0, &mut Ctx::inference());
        let cross = self
            .layout
            .dec
            .iter()
            .map(|layer| {
                (
                    layer.cross_attn.k.forward(&self.params, &memory),
                    layer.cross_attn.v.forward(&self.params, &memory),
                )
            })
            .collect();
        Ok(EncodedSource { memory, cross })
    }

    pub fn start_state(&self) -> DecoderState<T> {
        let n = self.layout.dec.len();
        DecoderState {
            pos: 0,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
        }
    }

    /// Number of decoder positions available (inputs including BOS).
    pub fn max_decoder_positions(&self) -> usize {
        self.positions.rows
    }

    /// Feeds `token` at the state's position and returns next-token log-probabilities.
    pub fn step(&self, enc: &EncodedSource<T>, state: &mut DecoderState<T>, token: TokenId) -> Vec<T> {
        let p = &self.params;
        let d = self.config.model_size;
        let tail = p.get(self.layout.target_factor).data.clone();
        let mut x = vec![T::zero(); d];
        let pos = state.pos.min(self.positions.rows - 1);
        self.embed_row(&mut x, token, &tail, pos);
        for (li, layer) in self.layout.dec.iter().enumerate() {
            let a = layer.ln1.forward_row(p, &x);
            let q = layer.self_attn.q.forward_row(p, &a);
            state.keys[li].extend(layer.self_attn.k.forward_row(p, &a));
            state.values[li].extend(layer.self_attn.v.forward_row(p, &a));
            let s = layer.self_attn.attend_row(p, &q, &state.keys[li], &state.values[li]);
            add_row(&mut x, &s);
            let b = layer.ln2.forward_row(p, &x);
            let q = layer.cross_attn.q.forward_row(p, &b);
            let (k, v) = &enc.cross[li];
            let c = layer.cross_attn.attend_row(p, &q, &k.data, &v.data);
            add_row(&mut x, &c);
            let e = layer.ln3.forward_row(p, &x);
            let f = layer.ff.forward_row(p, &e);
            add_row(&mut x, &f);
        }
        state.pos += 1;
        let h = self.layout.dec_norm.forward_row(p, &x);
        let mut z = vec![T::zero(); self.config.word_embed_size()];
        vecmat(&h, p.get(self.layout.out_proj), &mut z);
        let embed = p.get(self.layout.embed);
        let bias = &p.get(self.layout.out_bias).data;
        let mut logits: Vec<T> = (0..embed.rows)
            .map(|i| super::tensor::dot(&z, embed.row(i)) + bias[i])
            .collect();
        log_softmax_in_place(&mut logits);
        logits
    }

    /// Total loss gradient check helper: analytic gradient of [`Transformer::loss`].
    pub fn gradient(&self, ex: &Example, label_smoothing: f64) -> Result<(T, ParamSet<T>)> {
        let mut g = self.params.zeros_like();
        let loss = self.loss_and_grad(ex, label_smoothing, &mut g, &mut Ctx::inference())?;
        Ok((loss, g))
    }
}

fn add_row<T: Scalar>(x: &mut [T], y: &[T]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a += b;
    }
}
