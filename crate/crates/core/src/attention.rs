//! The multi-attention layer: cross-attention into a latent array,
//! self-attention over the latents, and view-attention exchanging
//! information between the two mammogram views.
//!
//! Every sublayer is `LayerNorm(x + Dropout(Attn(...)))`; cross and self
//! attention are followed by a position-wise feed-forward sublayer with the
//! same residual/normalization wrapping.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Which branch's self-attention output feeds a view-attention input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ViewSource {
    Current,
    Opposite,
}

impl ViewSource {
    fn letter(self) -> char {
        match self {
            ViewSource::Current => 'C',
            ViewSource::Opposite => 'O',
        }
    }
}

/// Query/key/value sources of the view-attention sublayer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WiringConfig {
    pub query: ViewSource,
    pub key: ViewSource,
    pub value: ViewSource,
}

impl WiringConfig {
    /// The six tabulated wirings, indexed 0..=5. `OOO` is also legal but
    /// sits outside the table.
    pub const ALL: [&'static str; 6] = ["COO", "OCO", "OOC", "CCO", "COC", "OCC"];

    pub fn new(query: ViewSource, key: ViewSource, value: ViewSource) -> Result<Self> {
        let w = WiringConfig { query, key, value };
        if [query, key, value].iter().all(|&s| s == ViewSource::Current) {
            return Err(Error::Validation(
                "view-attention wiring must take at least one input from the opposite view".into(),
            ));
        }
        Ok(w)
    }

    pub fn all() -> Vec<WiringConfig> {
        Self::ALL.iter().map(|s| s.parse().expect("legal wiring")).collect()
    }

    /// Position of this wiring in [`WiringConfig::ALL`].
    pub fn index(&self) -> Option<usize> {
        let s = self.to_string();
        Self::ALL.iter().position(|w| *w == s)
    }
}

impl Default for WiringConfig {
    /// Query and key from the opposite view, value from the current view.
    fn default() -> Self {
        WiringConfig {
            query: ViewSource::Opposite,
            key: ViewSource::Opposite,
            value: ViewSource::Current,
        }
    }
}

impl fmt::Display for WiringConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}{}", self.query.letter(), self.key.letter(), self.value.letter())
    }
}

impl FromStr for WiringConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let invalid = || {
            Error::Validation(format!(
                "invalid wiring {s:?}; expected one of {} or OOO",
                Self::ALL.join(", ")
            ))
        };
        let letters: Vec<ViewSource> = s
            .trim()
            .chars()
            .map(|c| match c.to_ascii_uppercase() {
                'C' => Ok(ViewSource::Current),
                'O' => Ok(ViewSource::Opposite),
                _ => Err(invalid()),
            })
            .collect::<Result<_>>()?;
        let [q, k, v] = letters[..] else { return Err(invalid()) };
        WiringConfig::new(q, k, v).map_err(|_| invalid())
    }
}

/// `N × (2·n_bands + 1)` positional features: the normalized index
/// `p_i = 2i/N − 1`, then `sin(p_i·S_b·π)` and `cos(p_i·S_b·π)` for
/// `S_b = b·m_freq/n_bands`, `b = 1..=n_bands`.
pub fn positional_features(n: usize, n_bands: usize, m_freq: f64) -> Result<Tensor> {
    if n == 0 || n_bands == 0 {
        return Err(Error::Config("positional encoding needs n ≥ 1 and n_bands ≥ 1".into()));
    }
    let width = 2 * n_bands + 1;
    let mut data = Vec::with_capacity(n * width);
    for i in 0..n {
        let p = 2.0 * i as f64 / n as f64 - 1.0;
        data.push(p);
        let bands = (1..=n_bands).map(|b| b as f64 * m_freq / n_bands as f64);
        data.extend(bands.clone().map(|s| (p * s * std::f64::consts::PI).sin()));
        data.extend(bands.map(|s| (p * s * std::f64::consts::PI).cos()));
    }
    Tensor::new(&[n, width], data)
}

/// Appends Fourier positional features to each row of `sequence`.
pub fn fourier_encode(sequence: &Tensor, n_bands: usize, m_freq: f64) -> Result<Tensor> {
    let (n, l) = sequence.dims2()?;
    let pe = positional_features(n, n_bands, m_freq)?;
    let width = l + pe.shape()[1];
    let mut data = Vec::with_capacity(n * width);
    for i in 0..n {
        data.extend_from_slice(sequence.row(i));
        data.extend_from_slice(pe.row(i));
    }
    Tensor::new(&[n, width], data)
}

/// Tape version of [`fourier_encode`]; the features are constants.
pub fn encode_positions(tape: &mut Tape, sequence: Var, n_bands: usize, m_freq: f64) -> Result<Var> {
    let n = tape.value(sequence).dims2()?.0;
    let pe = tape.constant(positional_features(n, n_bands, m_freq)?)?;
    tape.concat_cols(sequence, pe)
}

/// `Softmax(QKᵀ/√d)V` with `heads` column-split heads (`d` is the per-head
/// key width). One head is plain scaled dot-product attention.
pub fn attention_unit(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let ((_, dq), (nk, dk), (nv, dv)) = (
        tape.value(q).dims2()?,
        tape.value(k).dims2()?,
        tape.value(v).dims2()?,
    );
    if dq != dk {
        return Err(Error::dim("attention", format!("query width {dq} vs key width {dk}")));
    }
    if nk != nv {
        return Err(Error::dim("attention", format!("{nk} keys vs {nv} values")));
    }
    if heads == 0 || dk % heads != 0 || dv % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide widths {dk}/{dv}")));
    }
    let (hk, hv) = (dk / heads, dv / heads);
    let mut out: Option<Var> = None;
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * hk, (h + 1) * hk)?,
                tape.slice_cols(k, h * hk, (h + 1) * hk)?,
                tape.slice_cols(v, h * hv, (h + 1) * hv)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, 1.0 / (hk as f64).sqrt())?;
        let weights = tape.softmax(scores, 1)?;
        let head = tape.matmul(weights, vh)?;
        out = Some(match out {
            None => head,
            Some(prev) => tape.concat_cols(prev, head)?,
        });
    }
    Ok(out.expect("at least one head"))
}

#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct NormAffine {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Cross-attention sublayer parameters. `attr_kv` is present only on the
/// last layer, which attends jointly over image tokens and descriptors.
#[derive(Clone, Copy, Debug)]
pub struct CrossParams {
    pub proj: Projection,
    pub attr_kv: Option<(ParamId, ParamId)>,
    pub norm_attn: NormAffine,
    pub ffn: FeedForward,
    pub norm_ffn: NormAffine,
}

#[derive(Clone, Copy, Debug)]
pub struct SelfParams {
    pub proj: Projection,
    pub norm_attn: NormAffine,
    pub ffn: FeedForward,
    pub norm_ffn: NormAffine,
}

#[derive(Clone, Copy, Debug)]
pub struct ViewParams {
    pub proj: Projection,
    pub norm: NormAffine,
}

/// All parameters of one branch's multi-attention layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerParams {
    pub cross: CrossParams,
    pub self_attn: SelfParams,
    pub view: ViewParams,
}

/// What a cross-attention sublayer attends over.
#[derive(Clone, Copy, Debug)]
pub enum KeyValues {
    /// Descriptor vectors `Φ` (`K × L`), no positional encoding.
    Attributes(Var),
    /// Image tokens (`N_k × d'`), Fourier-encoded before projection.
    Image { tokens: Var, m_freq: f64 },
    /// Image tokens and descriptor vectors in one key/value set.
    Joint { tokens: Var, m_freq: f64, attributes: Var },
}

/// Input width of the key/value projections for image tokens.
pub fn image_kv_width(token_width: usize, n_bands: usize) -> usize {
    token_width + 2 * n_bands + 1
}

/// Registers parameters with a fan-in scaled normal initialization.
pub struct ParamFactory<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl ParamFactory<'_> {
    pub fn normal(&mut self, name: String, shape: &[usize], gain: f64) -> Result<ParamId> {
        let fan_in = shape[0];
        let normal = Normal::new(0.0, gain / (fan_in as f64).sqrt()).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(self.rng)).collect();
        self.store.insert(name, Tensor::new(shape, data)?)
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store.insert(name, Tensor::full(shape, value))
    }

    fn projection(&mut self, prefix: &str, q_in: usize, kv_in: usize, d_model: usize) -> Result<Projection> {
        Ok(Projection {
            wq: self.normal(format!("{prefix}.wq"), &[q_in, d_model], 1.0)?,
            wk: self.normal(format!("{prefix}.wk"), &[kv_in, d_model], 1.0)?,
            wv: self.normal(format!("{prefix}.wv"), &[kv_in, d_model], 1.0)?,
        })
    }

    fn norm(&mut self, prefix: &str, width: usize) -> Result<NormAffine> {
        Ok(NormAffine {
            gamma: self.constant(format!("{prefix}.gamma"), &[width], 1.0)?,
            beta: self.constant(format!("{prefix}.beta"), &[width], 0.0)?,
        })
    }

    fn ffn(&mut self, prefix: &str, d_model: usize) -> Result<FeedForward> {
        let hidden = 2 * d_model;
        Ok(FeedForward {
            w1: self.normal(format!("{prefix}.w1"), &[d_model, hidden], 2f64.sqrt())?,
            b1: self.constant(format!("{prefix}.b1"), &[hidden], 0.0)?,
            w2: self.normal(format!("{prefix}.w2"), &[hidden, d_model], 1.0)?,
            b2: self.constant(format!("{prefix}.b2"), &[d_model], 0.0)?,
        })
    }

    /// Parameters of one layer. `kv_width` is the width of its
    /// cross-attention keys/values; `joint` adds descriptor projections.
    pub fn layer(&mut self, prefix: &str, d_model: usize, kv_width: usize, joint: bool) -> Result<LayerParams> {
        let cross = CrossParams {
            proj: self.projection(&format!("{prefix}.cross"), d_model, kv_width, d_model)?,
            attr_kv: if joint {
                Some((
                    self.normal(format!("{prefix}.cross.wk_attr"), &[d_model, d_model], 1.0)?,
                    self.normal(format!("{prefix}.cross.wv_attr"), &[d_model, d_model], 1.0)?,
                ))
            } else {
                None
            },
            norm_attn: self.norm(&format!("{prefix}.cross.norm_attn"), d_model)?,
            ffn: self.ffn(&format!("{prefix}.cross.ffn"), d_model)?,
            norm_ffn: self.norm(&format!("{prefix}.cross.norm_ffn"), d_model)?,
        };
        let self_attn = SelfParams {
            proj: self.projection(&format!("{prefix}.self"), d_model, d_model, d_model)?,
            norm_attn: self.norm(&format!("{prefix}.self.norm_attn"), d_model)?,
            ffn: self.ffn(&format!("{prefix}.self.ffn"), d_model)?,
            norm_ffn: self.norm(&format!("{prefix}.self.norm_ffn"), d_model)?,
        };
        let view = ViewParams {
            proj: self.projection(&format!("{prefix}.view"), d_model, d_model, d_model)?,
            norm: self.norm(&format!("{prefix}.view.norm"), d_model)?,
        };
        Ok(LayerParams {
            cross,
            self_attn,
            view,
        })
    }
}

/// Shared state for running sublayers on one tape.
pub struct Sublayers<'a> {
    pub store: &'a ParamStore,
    pub heads: usize,
    pub dropout: f64,
    pub n_bands: usize,
}

impl Sublayers<'_> {
    fn p(&self, tape: &mut Tape, id: ParamId) -> Result<Var> {
        tape.param(self.store, id)
    }

    /// `Q = X_q·W_Q`, `K = X_k·W_K`, `V = X_v·W_V`.
    pub fn project_qkv(&self, tape: &mut Tape, proj: &Projection, xq: Var, xk: Var, xv: Var) -> Result<(Var, Var, Var)> {
        let (wq, wk, wv) = (self.p(tape, proj.wq)?, self.p(tape, proj.wk)?, self.p(tape, proj.wv)?);
        Ok((tape.matmul(xq, wq)?, tape.matmul(xk, wk)?, tape.matmul(xv, wv)?))
    }

    /// `max(0, x·W1 + b1)·W2 + b2`, row-wise.
    pub fn ffn(&self, tape: &mut Tape, ffn: &FeedForward, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (
            self.p(tape, ffn.w1)?,
            self.p(tape, ffn.b1)?,
            self.p(tape, ffn.w2)?,
            self.p(tape, ffn.b2)?,
        );
        let h = tape.matmul(x, w1)?;
        let h = tape.add_bias(h, b1)?;
        let h = tape.relu(h)?;
        let o = tape.matmul(h, w2)?;
        tape.add_bias(o, b2)
    }

    /// `LayerNorm(residual + Dropout(update))`.
    pub fn residual_norm(
        &self,
        tape: &mut Tape,
        norm: &NormAffine,
        residual: Var,
        update: Var,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let update = tape.dropout(update, self.dropout, rng)?;
        let sum = tape.add(residual, update)?;
        let (g, b) = (self.p(tape, norm.gamma)?, self.p(tape, norm.beta)?);
        tape.layer_norm(sum, g, b, LAYER_NORM_EPS)
    }

    fn ffn_block(
        &self,
        tape: &mut Tape,
        ffn: &FeedForward,
        norm: &NormAffine,
        x: Var,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let f = self.ffn(tape, ffn, x)?;
        self.residual_norm(tape, norm, x, f, rng)
    }

    /// Cross-attention of the latent array over `kv`, then the FFN sublayer.
    pub fn cross_attention(
        &self,
        tape: &mut Tape,
        params: &CrossParams,
        latent: Var,
        kv: KeyValues,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let (q, k, v) = match kv {
            KeyValues::Attributes(phi) => self.project_qkv(tape, &params.proj, latent, phi, phi)?,
            KeyValues::Image { tokens, m_freq } => {
                let enc = encode_positions(tape, tokens, self.n_bands, m_freq)?;
                self.project_qkv(tape, &params.proj, latent, enc, enc)?
            }
            KeyValues::Joint {
                tokens,
                m_freq,
                attributes,
            } => {
                let (wk_attr, wv_attr) = params.attr_kv.ok_or_else(|| {
                    Error::Usage("joint key/values need descriptor projections".into())
                })?;
                let enc = encode_positions(tape, tokens, self.n_bands, m_freq)?;
                let (q, k_img, v_img) = self.project_qkv(tape, &params.proj, latent, enc, enc)?;
                let (wk, wv) = (self.p(tape, wk_attr)?, self.p(tape, wv_attr)?);
                let k_attr = tape.matmul(attributes, wk)?;
                let v_attr = tape.matmul(attributes, wv)?;
                (q, tape.concat_rows(k_img, k_attr)?, tape.concat_rows(v_img, v_attr)?)
            }
        };
        let a = attention_unit(tape, q, k, v, self.heads)?;
        let h = self.residual_norm(tape, &params.norm_attn, latent, a, rng.as_deref_mut())?;
        self.ffn_block(tape, &params.ffn, &params.norm_ffn, h, rng)
    }

    /// First-layer cross-attention: learnable queries over the descriptor set.
    pub fn first_cross_attention(
        &self,
        tape: &mut Tape,
        params: &CrossParams,
        queries: Var,
        attributes: Var,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        self.cross_attention(tape, params, queries, KeyValues::Attributes(attributes), rng)
    }

    /// Self-attention over the latent array, then the FFN sublayer.
    pub fn self_attention(
        &self,
        tape: &mut Tape,
        params: &SelfParams,
        latent: Var,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let (q, k, v) = self.project_qkv(tape, &params.proj, latent, latent, latent)?;
        let a = attention_unit(tape, q, k, v, self.heads)?;
        let h = self.residual_norm(tape, &params.norm_attn, latent, a, rng.as_deref_mut())?;
        self.ffn_block(tape, &params.ffn, &params.norm_ffn, h, rng)
    }

    /// View-attention: Q/K/V drawn from the current or opposite branch's
    /// self-attention output per `wiring`; the residual is the current one.
    pub fn view_attention(
        &self,
        tape: &mut Tape,
        params: &ViewParams,
        current: Var,
        opposite: Var,
        wiring: WiringConfig,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let wiring = WiringConfig::new(wiring.query, wiring.key, wiring.value)?;
        let pick = |s: ViewSource| match s {
            ViewSource::Current => current,
            ViewSource::Opposite => opposite,
        };
        let (q, k, v) = self.project_qkv(
            tape,
            &params.proj,
            pick(wiring.query),
            pick(wiring.key),
            pick(wiring.value),
        )?;
        let a = attention_unit(tape, q, k, v, self.heads)?;
        self.residual_norm(tape, &params.norm, current, a, rng)
    }

    /// One multi-attention layer for both branches. Cross and self attention
    /// run per branch; view attention then exchanges the self-attention
    /// outputs. Returns `(layer outputs, self-attention outputs)`, each indexed
    /// by branch.
    pub fn dual_layer(
        &self,
        tape: &mut Tape,
        params: [&LayerParams; 2],
        latents: [Var; 2],
        kvs: [KeyValues; 2],
        wiring: WiringConfig,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<([Var; 2], [Var; 2])> {
        let mut selfs = [latents[0]; 2];
        for b in 0..2 {
            let c = self.cross_attention(tape, &params[b].cross, latents[b], kvs[b], rng.as_deref_mut())?;
            selfs[b] = self.self_attention(tape, &params[b].self_attn, c, rng.as_deref_mut())?;
        }
        let mut outs = [latents[0]; 2];
        for b in 0..2 {
            outs[b] = self.view_attention(tape, &params[b].view, selfs[b], selfs[1 - b], wiring, rng.as_deref_mut())?;
        }
        Ok((outs, selfs))
    }
}
