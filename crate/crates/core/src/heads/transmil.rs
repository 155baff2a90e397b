//! TransMIL: two Nyström self-attention layers with a PPEG positional
//! encoder between them, read out through a class token.

use alloc::format;
use alloc::vec::Vec;

use super::{nystrom_attention, uniform, HeadConfig, Linear, PPEG_KERNELS};
use crate::error::Result;
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

struct Norm {
    gain: ParamId,
    shift: ParamId,
}

impl Norm {
    fn build<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Norm {
            gain: store.add(format!("{name}.gain"), ParamKind::Norm, Tensor::filled(1, dim, T::one())),
            shift: store.add(format!("{name}.shift"), ParamKind::Norm, Tensor::zeros(1, dim)),
        }
    }

    fn apply<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(self.gain), tape.param(self.shift));
        tape.layer_norm(x, g, b, T::lit(1e-5))
    }
}

struct TransLayer {
    norm: Norm,
    qkv: Linear,
    out: Linear,
    /// `heads×K` depthwise residual kernels over the sequence, no bias.
    residual: ParamId,
}

struct DepthwiseConv {
    weight: ParamId,
    bias: ParamId,
}

pub(crate) struct Layout {
    embed: Linear,
    cls_token: ParamId,
    layers: Vec<TransLayer>,
    ppeg: Vec<DepthwiseConv>,
    norm: Norm,
    classifier: Linear,
}

impl Layout {
    pub(super) fn build<T: Real>(config: &HeadConfig, store: &mut ParamStore<T>, rng: &mut Rng) -> Self {
        let (d, h) = (config.input_dim, config.hidden_dim);
        let t = &config.transmil;
        let inner = t.inner_dim();
        let embed = Linear::build(store, "embed", d, h, true, rng);
        let cls_data = (0..h).map(|_| T::lit(rng.uniform_in(-0.02, 0.02))).collect();
        let cls_token = store.add("cls_token", ParamKind::Token, Tensor::new(1, h, cls_data).expect("h > 0"));
        let mut layers = Vec::with_capacity(t.layers);
        let mut ppeg = Vec::new();
        for l in 0..t.layers {
            let name = format!("layer{l}");
            layers.push(TransLayer {
                norm: Norm::build(store, &format!("{name}.norm"), h),
                qkv: Linear::build(store, &format!("{name}.attn.qkv"), h, 3 * inner, false, rng),
                out: Linear::build(store, &format!("{name}.attn.out"), inner, h, true, rng),
                residual: store.add(
                    format!("{name}.attn.residual.weight"),
                    ParamKind::Weight,
                    uniform(t.heads, t.residual_kernel, t.residual_kernel, rng),
                ),
            });
            if l == 0 {
                for k in PPEG_KERNELS {
                    ppeg.push(DepthwiseConv {
                        weight: store.add(format!("ppeg.conv{k}.weight"), ParamKind::Weight, uniform(h, k * k, k * k, rng)),
                        bias: store.add(format!("ppeg.conv{k}.bias"), ParamKind::Bias, Tensor::zeros(1, h)),
                    });
                }
            }
        }
        let norm = Norm::build(store, "norm", h);
        let classifier = Linear::build(store, "classifier", h, config.bins, true, rng);
        Layout {
            embed,
            cls_token,
            layers,
            ppeg,
            norm,
            classifier,
        }
    }

    pub(super) fn forward<T: Real>(
        &self,
        config: &HeadConfig,
        tape: &mut Tape<'_, T>,
        bag: Var,
        training: bool,
        rng: &mut Rng,
    ) -> Result<Var> {
        let h = self.embed.apply(tape, bag)?;
        let h = tape.relu(h);
        let h = tape.dropout(h, config.dropout, rng, training)?;

        // Pad to a square grid by cycling through the leading instances.
        let m = tape.shape(h).rows;
        let side = ceil_sqrt(m);
        let h = if side * side == m {
            h
        } else {
            tape.gather_rows(h, (0..side * side).map(|i| i % m).collect())?
        };
        let cls = tape.param(self.cls_token);
        let mut seq = tape.concat_rows(&[cls, h])?;

        for (l, layer) in self.layers.iter().enumerate() {
            let normed = layer.norm.apply(tape, seq)?;
            let attn = self.attention(config, layer, tape, normed)?;
            seq = tape.add(seq, attn)?;
            if l == 0 {
                seq = self.ppeg(tape, seq, side)?;
            }
        }
        let seq = self.norm.apply(tape, seq)?;
        let cls_out = tape.gather_rows(seq, alloc::vec![0])?;
        self.classifier.apply(tape, cls_out)
    }

    fn attention<T: Real>(&self, config: &HeadConfig, layer: &TransLayer, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let t = &config.transmil;
        let (n, inner) = (tape.shape(x).rows, t.inner_dim());
        let mut qkv = layer.qkv.apply(tape, x)?;

        // With more tokens than landmarks, zero-pad at the front to a multiple
        // of the landmark count; otherwise every token is its own landmark.
        let landmarks = t.landmarks.min(n);
        let pad = (landmarks - n % landmarks) % landmarks;
        if pad > 0 {
            let zeros = tape.constant(Tensor::zeros(pad, 3 * inner));
            qkv = tape.concat_rows(&[zeros, qkv])?;
        }
        let scale = T::lit(1.0 / libm::sqrt(t.head_dim as f64));
        let residual = tape.param(layer.residual);
        let mut heads = Vec::with_capacity(t.heads);
        for hd in 0..t.heads {
            let q = tape.slice_cols(qkv, hd * t.head_dim, t.head_dim)?;
            let q = tape.scale(q, scale);
            let k = tape.slice_cols(qkv, inner + hd * t.head_dim, t.head_dim)?;
            let v = tape.slice_cols(qkv, 2 * inner + hd * t.head_dim, t.head_dim)?;
            let out = nystrom_attention(tape, q, k, v, landmarks, t.pinv_iterations)?;
            let kernel = tape.gather_rows(residual, alloc::vec![hd])?;
            let res = tape.seq_conv(v, kernel)?;
            heads.push(tape.add(out, res)?);
        }
        let merged = tape.concat_cols(&heads)?;
        let out = layer.out.apply(tape, merged)?;
        if pad > 0 {
            tape.gather_rows(out, (pad..pad + n).collect())
        } else {
            Ok(out)
        }
    }

    /// Position encoding: depthwise 7×7, 5×5 and 3×3 convolutions over the
    /// `side×side` token grid, summed with the input. The class token passes
    /// through untouched.
    fn ppeg<T: Real>(&self, tape: &mut Tape<'_, T>, seq: Var, side: usize) -> Result<Var> {
        let n = tape.shape(seq).rows;
        let cls = tape.gather_rows(seq, alloc::vec![0])?;
        let grid = tape.gather_rows(seq, (1..n).collect())?;
        let mut acc = grid;
        for conv in &self.ppeg {
            let (w, b) = (tape.param(conv.weight), tape.param(conv.bias));
            let y = tape.depthwise_conv2d(grid, w, b, side)?;
            acc = tape.add(acc, y)?;
        }
        tape.concat_rows(&[cls, acc])
    }
}

fn ceil_sqrt(m: usize) -> usize {
    let mut s = libm::sqrt(m as f64) as usize;
    while s * s < m {
        s += 1;
    }
    while s > 1 && (s - 1) * (s - 1) >= m {
        s -= 1;
    }
    s
}
