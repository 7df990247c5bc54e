use rand::Rng;

use super::params::{EncoderConfig, LayerSlots, ParameterSet};
use super::scalar::{accumulate_col_sums, add_row_bias, gemm, matmul, Mat, Scalar};
use crate::error::{LpdError, Result};
use crate::rng::SeededRng;
use crate::tokenizer::{TokenId, PAD};

const LN_EPS: f64 = 1e-5;

/// Forward-pass mode. Training applies internal dropout drawn from the
/// supplied generator; evaluation is a pure function of input and weights.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut SeededRng),
}

/// Pre-norm transformer encoder with learned positional embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub config: EncoderConfig,
    pub params: ParameterSet<T>,
}

struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

struct LayerCache<T> {
    ln1: LnCache<T>,
    a: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    ctx: Vec<T>,
    drop1: Option<Vec<T>>,
    ln2: LnCache<T>,
    b: Vec<T>,
    hpre: Vec<T>,
    hact: Vec<T>,
    drop2: Option<Vec<T>>,
}

/// Hidden states of one sequence plus everything backward needs.
pub struct ForwardPass<T> {
    ids: Vec<TokenId>,
    key_valid: Vec<bool>,
    emb_drop: Option<Vec<T>>,
    layers: Vec<LayerCache<T>>,
    lnf: LnCache<T>,
    hidden: Vec<T>,
    width: usize,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `len x hidden`, row-major.
    pub fn hidden(&self) -> &[T] {
        &self.hidden
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.hidden[i * self.width..(i + 1) * self.width]
    }
}

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044_715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044_715);
    let half = T::of(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
}

fn ln_forward<T: Scalar>(x: &[T], g: &[T], b: &[T]) -> (Vec<T>, LnCache<T>) {
    let h = g.len();
    let rows = x.len() / h;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let n = T::of(h as f64);
    for r in 0..rows {
        let xr = &x[r * h..(r + 1) * h];
        let mean = xr.iter().copied().sum::<T>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
        rstd[r] = rs;
        for j in 0..h {
            let xh = (xr[j] - mean) * rs;
            xhat[r * h + j] = xh;
            y[r * h + j] = xh * g[j] + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Returns (dx, dgain, dbias).
fn ln_backward<T: Scalar>(dy: &[T], cache: &LnCache<T>, g: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let h = g.len();
    let rows = dy.len() / h;
    let mut dx = vec![T::zero(); dy.len()];
    let mut dg = vec![T::zero(); h];
    let mut db = vec![T::zero(); h];
    let n = T::of(h as f64);
    let mut dxhat = vec![T::zero(); h];
    for r in 0..rows {
        let (dyr, xh) = (&dy[r * h..(r + 1) * h], &cache.xhat[r * h..(r + 1) * h]);
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for j in 0..h {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xh[j];
        }
        mean_d /= n;
        mean_dx /= n;
        let rs = cache.rstd[r];
        for j in 0..h {
            dx[r * h + j] = rs * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    (dx, dg, db)
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

fn dropout_mask<T: Scalar>(n: usize, p: f64, rng: &mut SeededRng) -> Vec<T> {
    let keep = T::of(1.0 / (1.0 - p));
    (0..n)
        .map(|_| if rng.random_bool(p) { T::zero() } else { keep })
        .collect()
}

impl<T: Scalar> Encoder<T> {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        let params = ParameterSet::init(&config, seed)?;
        Ok(Encoder { config, params })
    }

    pub fn from_params(config: EncoderConfig, params: ParameterSet<T>) -> Result<Self> {
        config.validate()?;
        let expected = super::params::Layout::new(&config);
        if expected.total() != params.data.len() || expected != params.layout {
            return Err(LpdError::Shape(format!(
                "parameter vector of length {} does not match config ({})",
                params.data.len(),
                expected.total()
            )));
        }
        Ok(Encoder { config, params })
    }

    pub fn cast<U: Scalar>(&self) -> Encoder<U> {
        Encoder {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.data.len()
    }

    fn p(&self, slot: super::params::Slot) -> &[T] {
        self.params.slot(slot)
    }

    pub fn forward(&self, ids: &[TokenId], mode: Mode<'_>) -> Result<ForwardPass<T>> {
        let cfg = &self.config;
        let (len, h) = (ids.len(), cfg.hidden);
        if len == 0 || len > cfg.max_length {
            return Err(LpdError::Shape(format!(
                "sequence length {len} outside 1..={}",
                cfg.max_length
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(LpdError::Shape(format!(
                "token id {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let mut rng = match mode {
            Mode::Train(r) if cfg.dropout_internal > 0.0 => Some(r),
            _ => None,
        };
        let pdrop = cfg.dropout_internal;
        let layout = &self.params.layout;

        let tok = self.p(layout.tok_emb);
        let pos = self.p(layout.pos_emb);
        let mut x = vec![T::zero(); len * h];
        for (i, &id) in ids.iter().enumerate() {
            let row = &mut x[i * h..(i + 1) * h];
            let t = &tok[id as usize * h..(id as usize + 1) * h];
            let p = &pos[i * h..(i + 1) * h];
            for j in 0..h {
                row[j] = t[j] + p[j];
            }
        }
        let emb_drop = rng.as_deref_mut().map(|r| dropout_mask::<T>(len * h, pdrop, r));
        if let Some(m) = &emb_drop {
            x.iter_mut().zip(m).for_each(|(v, m)| *v *= *m);
        }

        let key_valid: Vec<bool> = ids.iter().map(|&id| id != PAD).collect();
        let mut layers = Vec::with_capacity(cfg.layers);
        for slots in &layout.layers {
            let (cache, out) = self.layer_forward(slots, &x, &key_valid, rng.as_deref_mut());
            layers.push(cache);
            x = out;
        }
        let (hidden, lnf) = ln_forward(&x, self.p(layout.lnf_g), self.p(layout.lnf_b));
        Ok(ForwardPass {
            ids: ids.to_vec(),
            key_valid,
            emb_drop,
            layers,
            lnf,
            hidden,
            width: h,
        })
    }

    fn layer_forward(
        &self,
        s: &LayerSlots,
        x: &[T],
        key_valid: &[bool],
        mut rng: Option<&mut SeededRng>,
    ) -> (LayerCache<T>, Vec<T>) {
        let cfg = &self.config;
        let (h, f, nh, dh) = (cfg.hidden, cfg.ffn_dim, cfg.heads, cfg.head_dim());
        let len = x.len() / h;
        let pdrop = cfg.dropout_internal;

        let (a, ln1) = ln_forward(x, self.p(s.ln1_g), self.p(s.ln1_b));
        let proj = |w, bias| {
            let mut out = matmul(Mat::new(&a, len, h), Mat::new(self.p(w), h, h));
            add_row_bias(&mut out, self.p(bias));
            out
        };
        let q = proj(s.wq, s.bq);
        let k = proj(s.wk, s.bk);
        let v = proj(s.wv, s.bv);

        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); nh * len * len];
        let mut ctx = vec![T::zero(); len * h];
        for head in 0..nh {
            let off = head * dh;
            let p = &mut probs[head * len * len..(head + 1) * len * len];
            gemm(
                scale,
                Mat::strided(&q[off..], len, dh, h),
                Mat::strided(&k[off..], len, dh, h).t(),
                T::zero(),
                p,
                len,
            );
            for row in p.chunks_exact_mut(len) {
                let mut max = T::neg_infinity();
                for (j, &val) in row.iter().enumerate() {
                    if key_valid[j] && val > max {
                        max = val;
                    }
                }
                let mut sum = T::zero();
                for (j, val) in row.iter_mut().enumerate() {
                    *val = if key_valid[j] { (*val - max).exp() } else { T::zero() };
                    sum += *val;
                }
                row.iter_mut().for_each(|val| *val /= sum);
            }
            gemm(
                T::one(),
                Mat::new(p, len, len),
                Mat::strided(&v[off..], len, dh, h),
                T::zero(),
                &mut ctx[off..],
                h,
            );
        }
        let mut o = matmul(Mat::new(&ctx, len, h), Mat::new(self.p(s.wo), h, h));
        add_row_bias(&mut o, self.p(s.bo));
        let drop1 = rng.as_deref_mut().map(|r| dropout_mask::<T>(len * h, pdrop, r));
        if let Some(m) = &drop1 {
            o.iter_mut().zip(m).for_each(|(v, m)| *v *= *m);
        }
        let mut x_mid = x.to_vec();
        add_into(&mut x_mid, &o);

        let (b, ln2) = ln_forward(&x_mid, self.p(s.ln2_g), self.p(s.ln2_b));
        let mut hpre = matmul(Mat::new(&b, len, h), Mat::new(self.p(s.w1), h, f));
        add_row_bias(&mut hpre, self.p(s.b1));
        let hact: Vec<T> = hpre.iter().map(|&v| gelu(v)).collect();
        let mut ff = matmul(Mat::new(&hact, len, f), Mat::new(self.p(s.w2), f, h));
        add_row_bias(&mut ff, self.p(s.b2));
        let drop2 = rng.map(|r| dropout_mask::<T>(len * h, pdrop, r));
        if let Some(m) = &drop2 {
            ff.iter_mut().zip(m).for_each(|(v, m)| *v *= *m);
        }
        let mut out = x_mid;
        add_into(&mut out, &ff);
        (
            LayerCache {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                ctx,
                drop1,
                ln2,
                b,
                hpre,
                hact,
                drop2,
            },
            out,
        )
    }

    /// Accumulate parameter gradients for `d_hidden` (`len x hidden`, the
    /// loss gradient w.r.t. the final hidden states) into `grads`.
    pub fn backward(&self, pass: &ForwardPass<T>, d_hidden: &[T], grads: &mut [T]) -> Result<()> {
        let h = self.config.hidden;
        let len = pass.len();
        if d_hidden.len() != len * h || grads.len() != self.params.data.len() {
            return Err(LpdError::Shape("backward buffers do not match forward pass".into()));
        }
        let layout = &self.params.layout;
        let (mut dx, dg, db) = ln_backward(d_hidden, &pass.lnf, self.p(layout.lnf_g));
        add_into(&mut grads[layout.lnf_g.range()], &dg);
        add_into(&mut grads[layout.lnf_b.range()], &db);

        for (slots, cache) in layout.layers.iter().zip(&pass.layers).rev() {
            dx = self.layer_backward(slots, cache, &pass.key_valid, dx, grads);
        }

        if let Some(m) = &pass.emb_drop {
            dx.iter_mut().zip(m).for_each(|(v, m)| *v *= *m);
        }
        let tok = layout.tok_emb.offset;
        let pos = layout.pos_emb.offset;
        for (i, &id) in pass.ids.iter().enumerate() {
            let d = &dx[i * h..(i + 1) * h];
            add_into(&mut grads[tok + id as usize * h..tok + (id as usize + 1) * h], d);
            add_into(&mut grads[pos + i * h..pos + (i + 1) * h], d);
        }
        Ok(())
    }

    fn layer_backward(
        &self,
        s: &LayerSlots,
        c: &LayerCache<T>,
        key_valid: &[bool],
        dout: Vec<T>,
        grads: &mut [T],
    ) -> Vec<T> {
        let cfg = &self.config;
        let (h, f, nh, dh) = (cfg.hidden, cfg.ffn_dim, cfg.heads, cfg.head_dim());
        let len = dout.len() / h;
        let one = T::one();

        // feed-forward branch: out = x_mid + drop(W2 gelu(W1 ln2(x_mid)))
        let mut dff = dout.clone();
        if let Some(m) = &c.drop2 {
            dff.iter_mut().zip(m).for_each(|(v, m)| *v *= *m);
        }
        gemm(one, Mat::new(&c.hact, len, f).t(), Mat::new(&dff, len, h), one, &mut grads[s.w2.range()], h);
        accumulate_col_sums(&dff, h, &mut grads[s.b2.range()]);
        let mut dh_act = matmul(Mat::new(&dff, len, h), Mat::new(self.p(s.w2), f, h).t());
        for (d, &x) in dh_act.iter_mut().zip(&c.hpre) {
            *d *= gelu_grad(x);
        }
        gemm(one, Mat::new(&c.b, len, h).t(), Mat::new(&dh_act, len, f), one, &mut grads[s.w1.range()], f);
        accumulate_col_sums(&dh_act, f, &mut grads[s.b1.range()]);
        let d_b = matmul(Mat::new(&dh_act, len, f), Mat::new(self.p(s.w1), h, f).t());
        let (dx_ln2, dg2, db2) = ln_backward(&d_b, &c.ln2, self.p(s.ln2_g));
        add_into(&mut grads[s.ln2_g.range()], &dg2);
        add_into(&mut grads[s.ln2_b.range()], &db2);
        let mut dx_mid = dout;
        add_into(&mut dx_mid, &dx_ln2);

        // attention branch: x_mid = x + drop(Wo attn(ln1(x)))
        let mut d_o = dx_mid.clone();
        if let Some(m) = &c.drop1 {
            d_o.iter_mut().zip(m).for_each(|(v, m)| *v *= *m);
        }
        gemm(one, Mat::new(&c.ctx, len, h).t(), Mat::new(&d_o, len, h), one, &mut grads[s.wo.range()], h);
        accumulate_col_sums(&d_o, h, &mut grads[s.bo.range()]);
        let dctx = matmul(Mat::new(&d_o, len, h), Mat::new(self.p(s.wo), h, h).t());

        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut dq = vec![T::zero(); len * h];
        let mut dk = vec![T::zero(); len * h];
        let mut dv = vec![T::zero(); len * h];
        let mut dp = vec![T::zero(); len * len];
        for head in 0..nh {
            let off = head * dh;
            let p = &c.probs[head * len * len..(head + 1) * len * len];
            let dctx_h = Mat::strided(&dctx[off..], len, dh, h);
            gemm(one, dctx_h, Mat::strided(&c.v[off..], len, dh, h).t(), T::zero(), &mut dp, len);
            gemm(one, Mat::new(p, len, len).t(), dctx_h, T::zero(), &mut dv[off..], h);
            for i in 0..len {
                let (pr, dr) = (&p[i * len..(i + 1) * len], &mut dp[i * len..(i + 1) * len]);
                let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for j in 0..len {
                    dr[j] = if key_valid[j] { pr[j] * (dr[j] - dot) } else { T::zero() };
                }
            }
            gemm(scale, Mat::new(&dp, len, len), Mat::strided(&c.k[off..], len, dh, h), T::zero(), &mut dq[off..], h);
            gemm(scale, Mat::new(&dp, len, len).t(), Mat::strided(&c.q[off..], len, dh, h), T::zero(), &mut dk[off..], h);
        }

        let mut da = vec![T::zero(); len * h];
        for (d, w, b) in [(&dq, s.wq, s.bq), (&dk, s.wk, s.bk), (&dv, s.wv, s.bv)] {
            gemm(one, Mat::new(&c.a, len, h).t(), Mat::new(d, len, h), one, &mut grads[w.range()], h);
            accumulate_col_sums(d, h, &mut grads[b.range()]);
            gemm(one, Mat::new(d, len, h), Mat::new(self.p(w), h, h).t(), one, &mut da, h);
        }
        let (dx_ln1, dg1, db1) = ln_backward(&da, &c.ln1, self.p(s.ln1_g));
        add_into(&mut grads[s.ln1_g.range()], &dg1);
        add_into(&mut grads[s.ln1_b.range()], &db1);
        let mut dx = dx_mid;
        add_into(&mut dx, &dx_ln1);
        dx
    }

    /// Vocabulary logits (`positions.len() x vocab_size`) for the hidden
    /// states at `positions`.
    pub fn mlm_logits(&self, hidden: &[T], positions: &[usize]) -> Result<Vec<T>> {
        let (h, v) = (self.config.hidden, self.config.vocab_size);
        let rows = self.gather_rows(hidden, positions)?;
        let m = positions.len();
        let layout = &self.params.layout;
        let mut logits = match layout.mlm_w {
            Some(w) => matmul(Mat::new(&rows, m, h), Mat::new(self.p(w), h, v)),
            None => matmul(Mat::new(&rows, m, h), Mat::new(self.p(layout.tok_emb), v, h).t()),
        };
        add_row_bias(&mut logits, self.p(layout.mlm_b));
        Ok(logits)
    }

    /// Backpropagate `d_logits` through the MLM head: parameter gradients go
    /// to `grads`, hidden-state gradients are added to `d_hidden`.
    pub fn mlm_backward(
        &self,
        hidden: &[T],
        positions: &[usize],
        d_logits: &[T],
        d_hidden: &mut [T],
        grads: &mut [T],
    ) -> Result<()> {
        let (h, v) = (self.config.hidden, self.config.vocab_size);
        let m = positions.len();
        if d_logits.len() != m * v || d_hidden.len() != hidden.len() {
            return Err(LpdError::Shape("MLM gradient buffers do not match".into()));
        }
        if m == 0 {
            return Ok(());
        }
        let rows = self.gather_rows(hidden, positions)?;
        let layout = &self.params.layout;
        let one = T::one();
        accumulate_col_sums(d_logits, v, &mut grads[layout.mlm_b.range()]);
        let d_rows = match layout.mlm_w {
            Some(w) => {
                gemm(one, Mat::new(&rows, m, h).t(), Mat::new(d_logits, m, v), one, &mut grads[w.range()], v);
                matmul(Mat::new(d_logits, m, v), Mat::new(self.p(w), h, v).t())
            }
            None => {
                let e = layout.tok_emb;
                gemm(one, Mat::new(d_logits, m, v).t(), Mat::new(&rows, m, h), one, &mut grads[e.range()], h);
                matmul(Mat::new(d_logits, m, v), Mat::new(self.p(e), v, h))
            }
        };
        for (r, &pos) in positions.iter().enumerate() {
            add_into(&mut d_hidden[pos * h..(pos + 1) * h], &d_rows[r * h..(r + 1) * h]);
        }
        Ok(())
    }

    fn gather_rows(&self, hidden: &[T], positions: &[usize]) -> Result<Vec<T>> {
        let h = self.config.hidden;
        let len = hidden.len() / h;
        let mut rows = Vec::with_capacity(positions.len() * h);
        for &p in positions {
            if p >= len {
                return Err(LpdError::Shape(format!("position {p} outside sequence of {len}")));
            }
            rows.extend_from_slice(&hidden[p * h..(p + 1) * h]);
        }
        Ok(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            hidden: 8,
            layers: 2,
            heads: 2,
            ffn_dim: 16,
            max_length: 16,
            vocab_size: 20,
            dropout_internal: 0.1,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let enc = Encoder::<f32>::new(tiny(), 1).unwrap();
        let ids = [2, 12, 6, 13, 7, 14, 8, 15, 9, 3];
        let a = enc.forward(&ids, Mode::Eval).unwrap();
        let b = enc.forward(&ids, Mode::Eval).unwrap();
        assert_eq!(a.hidden(), b.hidden());
        let mut rng = seeded(0);
        let c = enc.forward(&ids, Mode::Train(&mut rng)).unwrap();
        assert_ne!(a.hidden(), c.hidden());
    }

    #[test]
    fn padding_does_not_change_real_positions() {
        let enc = Encoder::<f64>::new(tiny(), 2).unwrap();
        let ids = vec![2, 12, 6, 13, 7, 14, 8, 15, 9, 3];
        let mut padded = ids.clone();
        padded.extend([PAD; 4]);
        let a = enc.forward(&ids, Mode::Eval).unwrap();
        let b = enc.forward(&padded, Mode::Eval).unwrap();
        for (x, y) in a.hidden().iter().zip(b.hidden()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_embeddings_give_position_only_output() {
        let mut enc = Encoder::<f64>::new(tiny(), 3).unwrap();
        let tok = enc.params.layout.tok_emb;
        enc.params.data[tok.range()].iter_mut().for_each(|v| *v = 0.0);
        let a = enc.forward(&[2, 12, 13, 3], Mode::Eval).unwrap();
        let b = enc.forward(&[2, 17, 11, 3], Mode::Eval).unwrap();
        assert_eq!(a.hidden(), b.hidden());
    }

    #[test]
    fn rejects_bad_inputs() {
        let enc = Encoder::<f32>::new(tiny(), 1).unwrap();
        assert!(enc.forward(&[], Mode::Eval).is_err());
        assert!(enc.forward(&[2, 99, 3], Mode::Eval).is_err());
        assert!(enc.forward(&vec![2; 17], Mode::Eval).is_err());
    }

    #[test]
    fn mlm_shapes_tied_and_untied() {
        let ids = [2, 12, 13, 14, 3];
        for tie in [false, true] {
            let enc = Encoder::<f32>::new(EncoderConfig { tie_mlm_head: tie, ..tiny() }, 5).unwrap();
            let pass = enc.forward(&ids, Mode::Eval).unwrap();
            let logits = enc.mlm_logits(pass.hidden(), &[1, 3]).unwrap();
            assert_eq!(logits.len(), 2 * 20);
            assert!(logits.iter().all(|v| v.is_finite()));
            assert!(enc.mlm_logits(pass.hidden(), &[]).unwrap().is_empty());
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let enc = Encoder::<f64>::new(tiny(), 4).unwrap();
        let pass = enc.forward(&[2, 12, 13, 3], Mode::Eval).unwrap();
        let mut grads = enc.params.zeros_like();
        enc.backward(&pass, &vec![0.0; pass.hidden().len()], &mut grads).unwrap();
        assert!(grads.iter().all(|&g| g == 0.0));
    }
}
