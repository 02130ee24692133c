//! Lip-to-index network: grayscale lip crops at 25 FPS in, per-frame
//! posteriors over the unit codebook at 50 FPS out.
//!
//! Front end: a temporal transposed convolution (kernel 4, stride 2,
//! pad 1 along time; 5x5 spatial taps) doubles the frame rate before any
//! spatial pooling, realized as four plain 2-D convolutions whose outputs
//! interleave. Trunk: a ResNet-18 topology at a configurable channel
//! multiplier, channels last with layer norm. Head: stacked multi-scale
//! temporal convolution layers (parallel kernels averaged), then a linear
//! classifier.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::L2IModelConfig;
use crate::error::{CoreError, Result};
use crate::lip2ind::IndexPosterior;
use crate::lips::LipSequence;
use crate::nn::{
    concat, conv1d, conv2d, global_avg_pool2d, kaiming_uniform, linear, maxpool2d, ones,
    xavier_uniform, zeros, Conv1dSpec, Conv2dSpec, Lease, ParamId, ParamStore, Tape, Var,
};

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

struct ResBlock {
    conv1: Cv,
    ln1: Norm,
    conv2: Cv,
    ln2: Norm,
    /// 1x1 projection when the shape changes across the block.
    down: Option<(Cv, Norm)>,
    stride: usize,
}

struct TcnLayer {
    branches: Vec<Cv>,
    ln: Norm,
}

struct L2IIds {
    /// Transposed-conv taps, one per temporal kernel position.
    stem_taps: [ParamId; 4],
    stem_bias: ParamId,
    stem_ln: Norm,
    conv1: Cv,
    conv1_ln: Norm,
    blocks: Vec<ResBlock>,
    temporal_in: Lin,
    tcn: Vec<TcnLayer>,
    head: Lin,
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

fn reg_conv2(
    store: &mut ParamStore<f32>,
    rng: &mut ChaCha8Rng,
    name: &str,
    k: usize,
    cin: usize,
    cout: usize,
) -> Cv {
    Cv {
        w: store.register(&format!("{name}.w"), kaiming_uniform(rng, &[k, k, cin, cout], k * k * cin)),
        b: store.register(&format!("{name}.b"), zeros(&[cout])),
    }
}

fn reg_conv1(
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

pub struct Lip2IndModel {
    pub cfg: L2IModelConfig,
    pub params: ParamStore<f32>,
    ids: L2IIds,
}

impl Lip2IndModel {
    pub fn new(cfg: &L2IModelConfig, seed: u64) -> Result<Lip2IndModel> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let sc = cfg.stem_channels;
        let stages = cfg.stage_channels();

        let stem_taps = [0, 1, 2, 3].map(|k| {
            p.register(&format!("stem.tap{k}"), kaiming_uniform(&mut rng, &[5, 5, 1, sc], 25))
        });
        let stem_bias = p.register("stem.b", zeros(&[sc]));
        let stem_ln = reg_norm(&mut p, "stem.ln", sc);

        let conv1 = reg_conv2(&mut p, &mut rng, "trunk.conv1", 7, sc, stages[0]);
        let conv1_ln = reg_norm(&mut p, "trunk.ln1", stages[0]);

        let mut blocks = Vec::new();
        let mut cin = stages[0];
        for (si, &cout) in stages.iter().enumerate() {
            for bi in 0..2 {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                let base = format!("trunk.s{}b{}", si + 1, bi + 1);
                let down = (stride != 1 || cin != cout).then(|| {
                    (
                        reg_conv2(&mut p, &mut rng, &format!("{base}.down"), 1, cin, cout),
                        reg_norm(&mut p, &format!("{base}.down_ln"), cout),
                    )
                });
                blocks.push(ResBlock {
                    conv1: reg_conv2(&mut p, &mut rng, &format!("{base}.conv1"), 3, cin, cout),
                    ln1: reg_norm(&mut p, &format!("{base}.ln1"), cout),
                    conv2: reg_conv2(&mut p, &mut rng, &format!("{base}.conv2"), 3, cout, cout),
                    ln2: reg_norm(&mut p, &format!("{base}.ln2"), cout),
                    down,
                    stride,
                });
                cin = cout;
            }
        }

        let tw = cfg.temporal_width;
        let temporal_in = reg_lin(&mut p, &mut rng, "temporal.in", stages[3], tw);
        let tcn = (1..=cfg.temporal_layers)
            .map(|li| TcnLayer {
                branches: cfg
                    .temporal_kernels
                    .iter()
                    .map(|&k| reg_conv1(&mut p, &mut rng, &format!("temporal.l{li}.k{k}"), k, tw, tw))
                    .collect(),
                ln: reg_norm(&mut p, &format!("temporal.l{li}.ln"), tw),
            })
            .collect();
        let head = reg_lin(&mut p, &mut rng, "head", tw, cfg.num_classes);

        Ok(Lip2IndModel {
            cfg: cfg.clone(),
            params: p,
            ids: L2IIds {
                stem_taps,
                stem_bias,
                stem_ln,
                conv1,
                conv1_ln,
                blocks,
                temporal_in,
                tcn,
                head,
            },
        })
    }

    fn lin<'t>(&self, lease: &Lease<'t, f32>, ids: &Lin, x: Var<'t, f32>) -> Var<'t, f32> {
        linear(x, lease.var(&self.params, ids.w), lease.var(&self.params, ids.b))
    }

    fn norm<'t>(&self, lease: &Lease<'t, f32>, ids: &Norm, x: Var<'t, f32>) -> Var<'t, f32> {
        x.layer_norm(lease.var(&self.params, ids.g), lease.var(&self.params, ids.b), LN_EPS)
    }

    fn cv2<'t>(&self, lease: &Lease<'t, f32>, ids: &Cv, x: Var<'t, f32>, spec: Conv2dSpec) -> Var<'t, f32> {
        conv2d(x, lease.var(&self.params, ids.w), lease.var(&self.params, ids.b), spec)
    }

    /// Temporal 2x upsampling, before normalization: a transposed
    /// convolution with kernel (4, 5, 5), stride (2, 1, 1), padding
    /// (1, 2, 2). Output frame 2v collects taps 1 and 3 of inputs v and
    /// v-1; frame 2v+1 collects taps 2 and 0 of inputs v and v+1.
    /// `[B, L, H, W]` -> `[B*2L, H, W, stem_channels]`.
    fn stem_raw<'t>(&self, lease: &Lease<'t, f32>, lips: Var<'t, f32>) -> Var<'t, f32> {
        let (b, l, h, w) = (lips.shape()[0], lips.shape()[1], lips.shape()[2], lips.shape()[3]);
        let c = self.cfg.stem_channels;
        let f = h * w * c;
        let x = lips.reshape(&[b * l, h, w, 1]);
        let spec = Conv2dSpec { stride: 1, padding: 2 };
        let zero_bias = lease.tape().constant(ArrayD::zeros(IxDyn(&[c])));
        let tap = |k: usize| {
            conv2d(x, lease.var(&self.params, self.ids.stem_taps[k]), zero_bias, spec)
                .reshape(&[b, l, f])
        };
        let zero_frame = lease.tape().constant(ArrayD::zeros(IxDyn(&[b, 1, f])));
        let (late, early) = if l > 1 {
            (
                concat(1, &[zero_frame, tap(3).slice_axis(1, 0, l - 1)]),
                concat(1, &[tap(0).slice_axis(1, 1, l - 1), zero_frame]),
            )
        } else {
            (zero_frame, zero_frame)
        };
        let even = tap(1).add(late).reshape(&[b, l, 1, f]);
        let odd = tap(2).add(early).reshape(&[b, l, 1, f]);
        let frames = concat(2, &[even, odd]).reshape(&[b * 2 * l, h, w, c]);
        frames.add_bias(lease.var(&self.params, self.ids.stem_bias))
    }

    fn res_block<'t>(&self, lease: &Lease<'t, f32>, ids: &ResBlock, x: Var<'t, f32>) -> Var<'t, f32> {
        let h = self.cv2(lease, &ids.conv1, x, Conv2dSpec { stride: ids.stride, padding: 1 });
        let h = self.norm(lease, &ids.ln1, h).relu();
        let h = self.cv2(lease, &ids.conv2, h, Conv2dSpec { stride: 1, padding: 1 });
        let h = self.norm(lease, &ids.ln2, h);
        let skip = match &ids.down {
            Some((cv, ln)) => {
                let s = self.cv2(lease, cv, x, Conv2dSpec { stride: ids.stride, padding: 0 });
                self.norm(lease, ln, s)
            }
            None => x,
        };
        h.add(skip).relu()
    }

    /// Full network: lip crops `[B, L, S, S]` to logits `[B, 2L, N]`.
    pub fn forward<'t>(&self, lease: &Lease<'t, f32>, lips: Var<'t, f32>) -> Var<'t, f32> {
        let sh = lips.shape();
        assert_eq!(sh.len(), 4, "lip input is [B, L, H, W]");
        let (b, l) = (sh[0], sh[1]);
        assert!(l >= 1, "need at least one frame");
        let s = self.cfg.input_size;
        assert_eq!((sh[2], sh[3]), (s, s), "expected {s}x{s} crops, got {}x{}", sh[2], sh[3]);

        let mut y = self.stem_raw(lease, lips);
        y = self.norm(lease, &self.ids.stem_ln, y).relu();
        y = self.cv2(lease, &self.ids.conv1, y, Conv2dSpec { stride: 2, padding: 3 });
        y = self.norm(lease, &self.ids.conv1_ln, y).relu();
        y = maxpool2d(y, 3, 2, 1);
        for block in &self.ids.blocks {
            y = self.res_block(lease, block, y);
        }
        let feat = global_avg_pool2d(y);
        let trunk_out = self.cfg.stage_channels()[3];
        let mut t = self.lin(lease, &self.ids.temporal_in, feat.reshape(&[b, 2 * l, trunk_out]));
        for layer in &self.ids.tcn {
            let mut avg: Option<Var<'t, f32>> = None;
            for (cv, &k) in layer.branches.iter().zip(&self.cfg.temporal_kernels) {
                let br = conv1d(
                    t,
                    lease.var(&self.params, cv.w),
                    lease.var(&self.params, cv.b),
                    Conv1dSpec { stride: 1, padding: k / 2 },
                );
                avg = Some(match avg {
                    Some(acc) => acc.add(br),
                    None => br,
                });
            }
            let mixed = avg.expect("at least one branch").scale(1.0 / layer.branches.len() as f64);
            let mixed = self.norm(lease, &layer.ln, mixed).relu();
            t = t.add(mixed);
        }
        self.lin(lease, &self.ids.head, t)
    }

    /// Inference on one clip: frames must already be `input_size` crops.
    /// Returns row-stochastic posteriors, two rows per input frame.
    pub fn posterior(&self, lips: &LipSequence) -> Result<IndexPosterior> {
        let (l, h, w) = (lips.num_frames(), lips.height(), lips.width());
        let s = self.cfg.input_size;
        if h != s || w != s {
            return Err(CoreError::LipFormat(format!(
                "posterior needs {s}x{s} crops, got {h}x{w}"
            )));
        }
        if l == 0 {
            return Err(CoreError::LipFormat("empty lip sequence".into()));
        }
        let tape = Tape::new();
        let lease = Lease::new(&tape, self.params.len());
        let x = tape.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, l, h, w]), lips.data().to_vec()).expect("lip layout"),
        );
        let probs = self.forward(&lease, x).softmax_last().value();
        let rows = Array2::from_shape_vec(
            (2 * l, self.cfg.num_classes),
            probs.iter().copied().collect(),
        )
        .expect("posterior layout");
        IndexPosterior::new(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::Rng;

    fn small_cfg() -> L2IModelConfig {
        L2IModelConfig {
            stem_channels: 2,
            channel_multiplier: 0.125,
            temporal_width: 16,
            temporal_layers: 2,
            temporal_kernels: [3, 5, 7],
            num_classes: 11,
            input_size: 16,
        }
    }

    fn rand_lips(rng: &mut ChaCha8Rng, b: usize, l: usize, s: usize) -> ArrayD<f32> {
        Array4::from_shape_fn((b, l, s, s), |_| rng.random_range(0.0f32..1.0)).into_dyn()
    }

    #[test]
    fn output_length_is_exactly_double() {
        let m = Lip2IndModel::new(&small_cfg(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for l in [1usize, 2, 3, 5, 8, 13, 30, 64, 100] {
            let tape = Tape::new();
            let lease = Lease::new(&tape, m.params.len());
            let x = tape.constant(rand_lips(&mut rng, 1, l, 16));
            let logits = m.forward(&lease, x);
            assert_eq!(logits.shape(), vec![1, 2 * l, 11], "length {l}");
        }
    }

    #[test]
    fn stem_matches_a_direct_transposed_convolution() {
        // Oracle: dense conv_transpose3d with kernel (4,5,5), stride
        // (2,1,1), padding (1,2,2) computed by summation over input taps.
        let m = Lip2IndModel::new(&small_cfg(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (l, s, c) = (3usize, 9usize, 2usize);
        let lips = rand_lips(&mut rng, 1, l, s);

        let tape = Tape::new();
        let lease = Lease::new(&tape, m.params.len());
        let got = m.stem_raw(&lease, tape.constant(lips.clone())).value();
        assert_eq!(got.shape(), &[2 * l, s, s, c]);

        let taps: Vec<&ArrayD<f32>> =
            m.ids.stem_taps.iter().map(|&id| m.params.value(id)).collect();
        let bias = m.params.value(m.ids.stem_bias);
        for u in 0..2 * l {
            for y in 0..s {
                for x in 0..s {
                    for ch in 0..c {
                        let mut acc = bias[[ch]];
                        for t in 0..l {
                            // Transposed conv: u = 2t - 1 + kt.
                            let kt = u as isize - 2 * t as isize + 1;
                            if !(0..4).contains(&kt) {
                                continue;
                            }
                            let w = taps[kt as usize];
                            for ky in 0..5usize {
                                for kx in 0..5usize {
                                    let sy = y as isize + ky as isize - 2;
                                    let sx = x as isize + kx as isize - 2;
                                    if sy < 0 || sx < 0 || sy >= s as isize || sx >= s as isize {
                                        continue;
                                    }
                                    acc += lips[[0, t, sy as usize, sx as usize]]
                                        * w[[ky, kx, 0, ch]];
                                }
                            }
                        }
                        let diff = (got[[u, y, x, ch]] - acc).abs();
                        assert!(diff <= 1e-5, "({u},{y},{x},{ch}): {diff}");
                    }
                }
            }
        }
    }

    #[test]
    fn posterior_rows_are_stochastic() {
        let m = Lip2IndModel::new(&small_cfg(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f32> = (0..6 * 16 * 16).map(|_| rng.random_range(0.0..1.0)).collect();
        let clip = LipSequence::new(data, 6, 16, 16).unwrap();
        let q = m.posterior(&clip).unwrap();
        assert_eq!(q.probs.dim(), (12, 11));
        for row in q.probs.rows() {
            let sum: f32 = row.sum();
            assert!((sum - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn posterior_rejects_wrong_crop_size() {
        let m = Lip2IndModel::new(&small_cfg(), 6).unwrap();
        let clip = LipSequence::constant(3, 20, 20, 0.5);
        assert!(m.posterior(&clip).is_err());
    }

    #[test]
    fn duplicated_clips_get_identical_posteriors() {
        let m = Lip2IndModel::new(&small_cfg(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let one = rand_lips(&mut rng, 1, 4, 16);
        let mut two = ArrayD::zeros(IxDyn(&[2, 4, 16, 16]));
        for b in 0..2 {
            for ((t, y, x), &v) in one
                .view()
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap()
                .index_axis(ndarray::Axis(0), 0)
                .indexed_iter()
            {
                two[[b, t, y, x]] = v;
            }
        }
        let tape = Tape::new();
        let lease = Lease::new(&tape, m.params.len());
        let logits = m.forward(&lease, tape.constant(two)).value();
        for t in 0..8 {
            for n in 0..11 {
                assert_eq!(logits[[0, t, n]].to_bits(), logits[[1, t, n]].to_bits());
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let m = Lip2IndModel::new(&small_cfg(), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_lips(&mut rng, 2, 3, 16);
        let run = || {
            let tape = Tape::new();
            let lease = Lease::new(&tape, m.params.len());
            m.forward(&lease, tape.constant(x.clone())).value()
        };
        assert_eq!(run(), run());
    }
}
