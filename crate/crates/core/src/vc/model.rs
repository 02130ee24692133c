//! The voice-conversion model: a content encoder with a vector-quantized
//! bottleneck, a causal context network, a speaker encoder, a pitch
//! predictor and a Conformer mel decoder.
//!
//! Rates: mel frames at 100 Hz, content/unit frames at 50 Hz (the encoder
//! downsamples by 2), decoder output back at 100 Hz. Model parameters live
//! in two stores: `params` holds everything trained against the main
//! objective; `mi_params` holds the variational speaker posterior, which is
//! trained by its own alternating likelihood step.

use ndarray::{Array2, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::VcModelConfig;
use crate::error::Result;
use crate::nn::{
    concat, conv1d, depthwise_conv1d, gru, kaiming_uniform, linear, ones, recurrent_uniform,
    xavier_uniform, zeros, Conv1dSpec, Lease, ParamId, ParamStore, Var,
};
use crate::vc::quantizer::Codebook;

const LN_EPS: f64 = 1e-5;

struct Lin {
    w: ParamId,
    b: ParamId,
}

struct Norm {
    g: ParamId,
    b: ParamId,
}

struct Cv {
    w: ParamId,
    b: ParamId,
}

struct Ffn {
    ln: Norm,
    hid: Lin,
    out: Lin,
}

struct Attn {
    ln: Norm,
    qkv: Lin,
    out: Lin,
}

struct ConvModule {
    ln: Norm,
    pw_in: Lin,
    dw: ParamId,
    norm: Norm,
    pw_out: Lin,
}

struct Block {
    ffn_a: Ffn,
    attn: Attn,
    conv: ConvModule,
    ffn_b: Ffn,
    ln_out: Norm,
}

struct VcIds {
    enc1: Cv,
    enc1_ln: Norm,
    enc2: Cv,
    enc2_ln: Norm,
    enc3: Cv,
    enc3_ln: Norm,
    gru_w: ParamId,
    gru_u: ParamId,
    gru_b: ParamId,
    cpc: Vec<ParamId>,
    spk1: Cv,
    spk1_ln: Norm,
    spk2: Cv,
    spk2_ln: Norm,
    spk_out: Lin,
    pit1: Cv,
    pit1_ln: Norm,
    pit2: Cv,
    pit2_ln: Norm,
    pit_out: Lin,
    dec_in: Lin,
    blocks: Vec<Block>,
    up_conv: Cv,
    up_ln: Norm,
    dec_out: Lin,
}

struct MiIds {
    fc1: Lin,
    fc2: Lin,
    mu: Lin,
    lv: Lin,
}

fn reg_lin(store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Lin {
    Lin {
        w: store.register(&format!("{name}.w"), xavier_uniform(rng, &[cin, cout], cin, cout)),
        b: store.register(&format!("{name}.b"), zeros(&[cout])),
    }
}

fn reg_norm(store: &mut ParamStore<f32>, name: &str, c: usize) -> Norm {
    Norm {
        g: store.register(&format!("{name}.g"), ones(&[c])),
        b: store.register(&format!("{name}.b"), zeros(&[c])),
    }
}

fn reg_conv(
    store: &mut ParamStore<f32>,
    rng: &mut ChaCha8Rng,
    name: &str,
    k: usize,
    cin: usize,
    cout: usize,
) -> Cv {
    Cv {
        w: store.register(&format!("{name}.w"), kaiming_uniform(rng, &[k, cin, cout], k * cin)),
        b: store.register(&format!("{name}.b"), zeros(&[cout])),
    }
}

fn reg_ffn(store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng, name: &str, d: usize, hidden: usize) -> Ffn {
    Ffn {
        ln: reg_norm(store, &format!("{name}.ln"), d),
        hid: reg_lin(store, rng, &format!("{name}.hid"), d, hidden),
        out: reg_lin(store, rng, &format!("{name}.out"), hidden, d),
    }
}

/// Sinusoidal position table, `[frames, dim]`: even columns sine, odd
/// columns cosine, geometrically spaced rates.
pub fn sinusoidal_encoding(frames: usize, dim: usize) -> Array2<f32> {
    assert!(dim % 2 == 0, "position encoding needs an even dim");
    let mut pe = Array2::zeros((frames, dim));
    for t in 0..frames {
        for i in 0..dim / 2 {
            let rate = 10_000f64.powf(-(2.0 * i as f64) / dim as f64);
            let phase = t as f64 * rate;
            pe[[t, 2 * i]] = phase.sin() as f32;
            pe[[t, 2 * i + 1]] = phase.cos() as f32;
        }
    }
    pe
}

/// Variational speaker posterior `q(s | z̄)`: a two-layer net emitting a
/// diagonal Gaussian. The log-variance head is smoothly clamped to
/// (-10, 10) so the likelihood stays finite for any input.
#[allow(clippy::too_many_arguments)]
pub fn mi_posterior<'t, F: crate::nn::Scalar>(
    zbar: Var<'t, F>,
    w1: Var<'t, F>,
    b1: Var<'t, F>,
    w2: Var<'t, F>,
    b2: Var<'t, F>,
    w_mu: Var<'t, F>,
    b_mu: Var<'t, F>,
    w_lv: Var<'t, F>,
    b_lv: Var<'t, F>,
) -> (Var<'t, F>, Var<'t, F>) {
    let h = linear(zbar, w1, b1).relu();
    let h = linear(h, w2, b2).relu();
    let mu = linear(h, w_mu, b_mu);
    let lv = linear(h, w_lv, b_lv).scale(0.1).tanh().scale(10.0);
    (mu, lv)
}

pub struct VcModel {
    pub cfg: VcModelConfig,
    pub params: ParamStore<f32>,
    pub mi_params: ParamStore<f32>,
    pub codebook: Codebook,
    ids: VcIds,
    mi_ids: MiIds,
}

impl VcModel {
    pub fn new(cfg: &VcModelConfig, seed: u64) -> Result<VcModel> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (d, c) = (cfg.content_dim, cfg.context_dim);
        let [w1, w2] = cfg.encoder_widths;

        let enc1 = reg_conv(&mut p, &mut rng, "content.conv1", 3, cfg.n_mels, w1);
        let enc1_ln = reg_norm(&mut p, "content.ln1", w1);
        let enc2 = reg_conv(&mut p, &mut rng, "content.conv2", 3, w1, w2);
        let enc2_ln = reg_norm(&mut p, "content.ln2", w2);
        // Kernel 4 with stride 2 and pad 1 halves an even-length sequence
        // exactly, which fixes the 100 -> 50 Hz rate contract.
        let enc3 = reg_conv(&mut p, &mut rng, "content.conv3", 4, w2, d);
        let enc3_ln = reg_norm(&mut p, "content.ln3", d);

        let gru_w = p.register("context.w", xavier_uniform(&mut rng, &[d, 3 * c], d, c));
        let gru_u = p.register("context.u", recurrent_uniform(&mut rng, &[c, 3 * c], c));
        let gru_b = p.register("context.b", zeros(&[3 * c]));

        let cpc = (1..=cfg.cpc_horizon)
            .map(|m| p.register(&format!("cpc.w{m}"), xavier_uniform(&mut rng, &[d, c], c, d)))
            .collect();

        let sw = cfg.speaker_width;
        let spk1 = reg_conv(&mut p, &mut rng, "speaker.conv1", cfg.speaker_kernel, cfg.n_mels, sw);
        let spk1_ln = reg_norm(&mut p, "speaker.ln1", sw);
        let spk2 = reg_conv(&mut p, &mut rng, "speaker.conv2", cfg.speaker_kernel, sw, sw);
        let spk2_ln = reg_norm(&mut p, "speaker.ln2", sw);
        let spk_out = reg_lin(&mut p, &mut rng, "speaker.out", 2 * sw, cfg.speaker_dim);

        let pw = cfg.pitch_width;
        let pit_in = d + cfg.speaker_dim;
        let pit1 = reg_conv(&mut p, &mut rng, "pitch.conv1", cfg.pitch_kernel, pit_in, pw);
        let pit1_ln = reg_norm(&mut p, "pitch.ln1", pw);
        let pit2 = reg_conv(&mut p, &mut rng, "pitch.conv2", cfg.pitch_kernel, pw, pw);
        let pit2_ln = reg_norm(&mut p, "pitch.ln2", pw);
        let pit_out = reg_lin(&mut p, &mut rng, "pitch.out", pw, 1);

        let dd = cfg.decoder_dim;
        let dec_in = reg_lin(&mut p, &mut rng, "decoder.in", d + cfg.speaker_dim + 1, dd);
        let blocks = (1..=cfg.decoder_blocks)
            .map(|i| {
                let base = format!("decoder.block{i}");
                Block {
                    ffn_a: reg_ffn(&mut p, &mut rng, &format!("{base}.ffn_a"), dd, cfg.decoder_ffn),
                    attn: Attn {
                        ln: reg_norm(&mut p, &format!("{base}.attn.ln"), dd),
                        qkv: reg_lin(&mut p, &mut rng, &format!("{base}.attn.qkv"), dd, 3 * dd),
                        out: reg_lin(&mut p, &mut rng, &format!("{base}.attn.out"), dd, dd),
                    },
                    conv: ConvModule {
                        ln: reg_norm(&mut p, &format!("{base}.conv.ln"), dd),
                        pw_in: reg_lin(&mut p, &mut rng, &format!("{base}.conv.pw_in"), dd, 2 * dd),
                        dw: p.register(
                            &format!("{base}.conv.dw"),
                            kaiming_uniform(&mut rng, &[cfg.decoder_conv_kernel, dd], cfg.decoder_conv_kernel),
                        ),
                        norm: reg_norm(&mut p, &format!("{base}.conv.norm"), dd),
                        pw_out: reg_lin(&mut p, &mut rng, &format!("{base}.conv.pw_out"), dd, dd),
                    },
                    ffn_b: reg_ffn(&mut p, &mut rng, &format!("{base}.ffn_b"), dd, cfg.decoder_ffn),
                    ln_out: reg_norm(&mut p, &format!("{base}.out_ln"), dd),
                }
            })
            .collect();
        let up_conv = reg_conv(&mut p, &mut rng, "decoder.up_conv", 3, dd, dd);
        let up_ln = reg_norm(&mut p, "decoder.up_ln", dd);
        let dec_out = reg_lin(&mut p, &mut rng, "decoder.out", dd, cfg.n_mels);

        let mut mp = ParamStore::new();
        let mh = cfg.mi_hidden;
        let mi_ids = MiIds {
            fc1: reg_lin(&mut mp, &mut rng, "mi.fc1", d, mh),
            fc2: reg_lin(&mut mp, &mut rng, "mi.fc2", mh, mh),
            mu: reg_lin(&mut mp, &mut rng, "mi.mu", mh, cfg.speaker_dim),
            lv: reg_lin(&mut mp, &mut rng, "mi.lv", mh, cfg.speaker_dim),
        };

        Ok(VcModel {
            cfg: cfg.clone(),
            params: p,
            mi_params: mp,
            codebook: Codebook::new(cfg.codebook_size, d, seed.wrapping_add(1)),
            ids: VcIds {
                enc1,
                enc1_ln,
                enc2,
                enc2_ln,
                enc3,
                enc3_ln,
                gru_w,
                gru_u,
                gru_b,
                cpc,
                spk1,
                spk1_ln,
                spk2,
                spk2_ln,
                spk_out,
                pit1,
                pit1_ln,
                pit2,
                pit2_ln,
                pit_out,
                dec_in,
                blocks,
                up_conv,
                up_ln,
                dec_out,
            },
            mi_ids,
        })
    }

    fn lin<'t>(&self, lease: &Lease<'t, f32>, ids: &Lin, x: Var<'t, f32>) -> Var<'t, f32> {
        linear(x, lease.var(&self.params, ids.w), lease.var(&self.params, ids.b))
    }

    fn norm<'t>(&self, lease: &Lease<'t, f32>, ids: &Norm, x: Var<'t, f32>) -> Var<'t, f32> {
        x.layer_norm(lease.var(&self.params, ids.g), lease.var(&self.params, ids.b), LN_EPS)
    }

    fn cv<'t>(&self, lease: &Lease<'t, f32>, ids: &Cv, x: Var<'t, f32>, spec: Conv1dSpec) -> Var<'t, f32> {
        conv1d(x, lease.var(&self.params, ids.w), lease.var(&self.params, ids.b), spec)
    }

    /// Mel `[B, T, n_mels]` to content frames `[B, T/2, content_dim]`.
    pub fn content_encode<'t>(&self, lease: &Lease<'t, f32>, mel: Var<'t, f32>) -> Var<'t, f32> {
        let t = mel.shape()[1];
        assert!(t >= 4 && t % 2 == 0, "content encoder needs an even mel length >= 4, got {t}");
        let same = Conv1dSpec { stride: 1, padding: 1 };
        let h = self.cv(lease, &self.ids.enc1, mel, same);
        let h = self.norm(lease, &self.ids.enc1_ln, h).relu();
        let h = self.cv(lease, &self.ids.enc2, h, same);
        let h = self.norm(lease, &self.ids.enc2_ln, h).relu();
        let z = self.cv(lease, &self.ids.enc3, h, Conv1dSpec { stride: 2, padding: 1 });
        // No rectifier on the bottleneck: codewords may use the whole space.
        self.norm(lease, &self.ids.enc3_ln, z)
    }

    /// Snap content frames `[B, T2, D]` to their nearest codewords.
    /// Returns the quantized values and the `[B, T2]` index grid; rows of
    /// the value tensor are bit-identical to codebook rows.
    pub fn quantize_batch(&self, z: &ArrayD<f32>) -> Result<(ArrayD<f32>, Array2<usize>)> {
        assert_eq!(z.ndim(), 3, "content frames are [B, T2, D]");
        let (b, t2, d) = (z.shape()[0], z.shape()[1], z.shape()[2]);
        let flat = z.view().into_shape_with_order((b * t2, d)).expect("contiguous frames");
        let (snapped, idx) = self.codebook.quantize(flat)?;
        let frames = snapped.into_shape_with_order((b, t2, d)).unwrap().into_dyn();
        let indices = Array2::from_shape_vec((b, t2), idx).unwrap();
        Ok((frames, indices))
    }

    /// Causal context over quantized units: `[B, T2, D]` to `[B, T2, C]`.
    /// Frame `t` of the output depends only on inputs at times `<= t`.
    pub fn context<'t>(&self, lease: &Lease<'t, f32>, zq: Var<'t, f32>) -> Var<'t, f32> {
        gru(
            zq,
            lease.var(&self.params, self.ids.gru_w),
            lease.var(&self.params, self.ids.gru_u),
            lease.var(&self.params, self.ids.gru_b),
        )
    }

    /// One projection per prediction offset, each `[D, C]`.
    pub fn cpc_heads<'t>(&self, lease: &Lease<'t, f32>) -> Vec<Var<'t, f32>> {
        self.ids.cpc.iter().map(|&id| lease.var(&self.params, id)).collect()
    }

    /// Utterance-level speaker embedding: per-frame features, statistics
    /// pooling (mean and stddev over time), projection, L2 normalization.
    pub fn speaker_encode<'t>(&self, lease: &Lease<'t, f32>, mel: Var<'t, f32>) -> Var<'t, f32> {
        let t = mel.shape()[1];
        assert!(t >= 8, "speaker encoder needs at least 8 frames, got {t}");
        let spec = Conv1dSpec { stride: 1, padding: self.cfg.speaker_kernel / 2 };
        let h = self.cv(lease, &self.ids.spk1, mel, spec);
        let h = self.norm(lease, &self.ids.spk1_ln, h).relu();
        let h = self.cv(lease, &self.ids.spk2, h, spec);
        let h = self.norm(lease, &self.ids.spk2_ln, h).relu();
        let mean = h.mean_axis(1);
        let second = h.mul(h).mean_axis(1);
        let sd = second.sub(mean.mul(mean)).add_scalar(1e-5).sqrt();
        let stats = concat(1, &[mean, sd]);
        l2_normalize_rows(self.lin(lease, &self.ids.spk_out, stats))
    }

    /// Per-frame scalar in normalized log-F0 space, `[B, T2]`, from units
    /// and the speaker embedding.
    pub fn predict_f0<'t>(&self, lease: &Lease<'t, f32>, zq: Var<'t, f32>, s: Var<'t, f32>) -> Var<'t, f32> {
        let (b, t2) = (zq.shape()[0], zq.shape()[1]);
        let sb = broadcast_over_time(s, t2);
        let x = concat(2, &[zq, sb]);
        let spec = Conv1dSpec { stride: 1, padding: self.cfg.pitch_kernel / 2 };
        let h = self.cv(lease, &self.ids.pit1, x, spec);
        let h = self.norm(lease, &self.ids.pit1_ln, h).relu();
        let h = self.cv(lease, &self.ids.pit2, h, spec);
        let h = self.norm(lease, &self.ids.pit2_ln, h).relu();
        self.lin(lease, &self.ids.pit_out, h).reshape(&[b, t2])
    }

    /// Units + speaker + F0 to mel frames at twice the unit rate:
    /// `[B, T2, D]`, `[B, S]`, `[B, T2]` to `[B, 2*T2, n_mels]`.
    pub fn decode<'t>(
        &self,
        lease: &Lease<'t, f32>,
        zq: Var<'t, f32>,
        s: Var<'t, f32>,
        f0: Var<'t, f32>,
    ) -> Var<'t, f32> {
        let (b, t2) = (zq.shape()[0], zq.shape()[1]);
        assert_eq!(f0.shape(), vec![b, t2], "one F0 value per unit frame");
        let x = concat(2, &[zq, broadcast_over_time(s, t2), f0.reshape(&[b, t2, 1])]);
        let mut h = self.lin(lease, &self.ids.dec_in, x);
        let pe = sinusoidal_encoding(t2, self.cfg.decoder_dim)
            .broadcast((b, t2, self.cfg.decoder_dim))
            .unwrap()
            .to_owned()
            .into_dyn();
        h = h.add(lease.tape().constant(pe));
        for block in &self.ids.blocks {
            h = self.conformer_block(lease, block, h);
        }
        let up = h.repeat_interleave(1, 2);
        let up = self.cv(lease, &self.ids.up_conv, up, Conv1dSpec { stride: 1, padding: 1 });
        let up = self.norm(lease, &self.ids.up_ln, up).relu();
        self.lin(lease, &self.ids.dec_out, up)
    }

    fn conformer_block<'t>(&self, lease: &Lease<'t, f32>, ids: &Block, x: Var<'t, f32>) -> Var<'t, f32> {
        let x = x.add(self.ffn(lease, &ids.ffn_a, x).scale(0.5));
        let x = x.add(self.mhsa(lease, &ids.attn, x));
        let x = x.add(self.conv_module(lease, &ids.conv, x));
        let x = x.add(self.ffn(lease, &ids.ffn_b, x).scale(0.5));
        self.norm(lease, &ids.ln_out, x)
    }

    fn ffn<'t>(&self, lease: &Lease<'t, f32>, ids: &Ffn, x: Var<'t, f32>) -> Var<'t, f32> {
        let h = self.norm(lease, &ids.ln, x);
        let h = self.lin(lease, &ids.hid, h).swish();
        self.lin(lease, &ids.out, h)
    }

    fn mhsa<'t>(&self, lease: &Lease<'t, f32>, ids: &Attn, x: Var<'t, f32>) -> Var<'t, f32> {
        let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let heads = self.cfg.decoder_heads;
        let dh = d / heads;
        let qkv = self.lin(lease, &ids.qkv, self.norm(lease, &ids.ln, x));
        let split = |y: Var<'t, f32>| {
            y.reshape(&[b, t, heads, dh]).permute(&[0, 2, 1, 3]).reshape(&[b * heads, t, dh])
        };
        let q = split(qkv.slice_axis(2, 0, d));
        let k = split(qkv.slice_axis(2, d, d));
        let v = split(qkv.slice_axis(2, 2 * d, d));
        let scores = q.bmm(k.permute(&[0, 2, 1])).scale(1.0 / (dh as f64).sqrt());
        let ctx = scores.softmax_last().bmm(v);
        let merged = ctx.reshape(&[b, heads, t, dh]).permute(&[0, 2, 1, 3]).reshape(&[b, t, d]);
        self.lin(lease, &ids.out, merged)
    }

    fn conv_module<'t>(&self, lease: &Lease<'t, f32>, ids: &ConvModule, x: Var<'t, f32>) -> Var<'t, f32> {
        let d = self.cfg.decoder_dim;
        let gates = self.lin(lease, &ids.pw_in, self.norm(lease, &ids.ln, x));
        let a = gates.slice_axis(2, 0, d);
        let g = gates.slice_axis(2, d, d);
        let h = a.mul(g.sigmoid());
        let h = depthwise_conv1d(h, lease.var(&self.params, ids.dw));
        let h = self.norm(lease, &ids.norm, h).swish();
        self.lin(lease, &ids.pw_out, h)
    }

    /// Posterior parameters from pooled content frames; the estimator's
    /// parameters come from `mi_params` via its own lease.
    pub fn mi_forward<'t>(&self, mi: &Lease<'t, f32>, zbar: Var<'t, f32>) -> (Var<'t, f32>, Var<'t, f32>) {
        let v = |ids: &Lin| (mi.var(&self.mi_params, ids.w), mi.var(&self.mi_params, ids.b));
        let (w1, b1) = v(&self.mi_ids.fc1);
        let (w2, b2) = v(&self.mi_ids.fc2);
        let (wm, bm) = v(&self.mi_ids.mu);
        let (wl, bl) = v(&self.mi_ids.lv);
        mi_posterior(zbar, w1, b1, w2, b2, wm, bm, wl, bl)
    }
}

fn broadcast_over_time(s: Var<'_, f32>, t2: usize) -> Var<'_, f32> {
    let (b, c) = (s.shape()[0], s.shape()[1]);
    s.reshape(&[b, 1, c]).repeat_interleave(1, t2)
}

fn l2_normalize_rows(x: Var<'_, f32>) -> Var<'_, f32> {
    let (b, c) = (x.shape()[0], x.shape()[1]);
    let norm = x.mul(x).sum_axis(1).add_scalar(1e-12).sqrt();
    x.div(norm.reshape(&[b, 1]).repeat_interleave(1, c))
}
