//! 1D residual convolutional classifier with hand-written reverse mode.
//!
//! Activations are stored channel-major over the batch, `[c][b][l]`, so a
//! convolution is a single GEMM against an im2col matrix and batch norm
//! statistics are contiguous per channel.

mod checkpoint;
mod gemm;
mod optim;
mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, ModelCheckpoint, CHECKPOINT_VERSION};
pub use optim::{adam_step, softmax_pos, weighted_ce, AdamState};
pub use train::{patient_folds, train_cv, train_fold, CvResult, EpochLog, FoldOutcome, Standardizer, TrainConfig};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::{self, Purpose};
use crate::{Error, Result};
use gemm::gemm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub out: usize,
    pub kernel: usize,
    pub downsample: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub in_channels: usize,
    pub length: usize,
    pub stem: ConvSpec,
    pub blocks: Vec<BlockSpec>,
    pub norm: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl ArchSpec {
    /// Stem 32/k7, blocks (32,k5), (64,k5,/2), (64,k3).
    pub fn standard(in_channels: usize, length: usize) -> Self {
        ArchSpec {
            in_channels,
            length,
            stem: ConvSpec {
                out: 32,
                kernel: 7,
                stride: 1,
            },
            blocks: vec![
                BlockSpec {
                    out: 32,
                    kernel: 5,
                    downsample: false,
                },
                BlockSpec {
                    out: 64,
                    kernel: 5,
                    downsample: true,
                },
                BlockSpec {
                    out: 64,
                    kernel: 3,
                    downsample: false,
                },
            ],
            norm: true,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let kernels = std::iter::once(self.stem.kernel).chain(self.blocks.iter().map(|b| b.kernel));
        if kernels.clone().any(|k| k % 2 == 0) {
            return Err(Error::InvalidParams("every kernel must be odd".into()));
        }
        if self.in_channels == 0 || self.length == 0 || self.stem.out == 0 || self.stem.stride == 0 {
            return Err(Error::InvalidParams("architecture sizes must be positive".into()));
        }
        if self.blocks.iter().any(|b| b.out == 0) {
            return Err(Error::InvalidParams("block widths must be positive".into()));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        Net::build(self).n_params
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSlot {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    /// Subject to decoupled weight decay.
    pub decay: bool,
}

#[derive(Debug, Clone)]
struct ConvP {
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
}

impl ConvP {
    fn pad(&self) -> usize {
        (self.k - 1) / 2
    }

    fn out_len(&self, l: usize) -> usize {
        (l + 2 * self.pad() - self.k) / self.stride + 1
    }
}

#[derive(Debug, Clone)]
struct BnP {
    gamma: usize,
    beta: usize,
    stat: usize,
    c: usize,
}

#[derive(Debug, Clone)]
struct BlockP {
    conv1: ConvP,
    bn1: Option<BnP>,
    conv2: ConvP,
    bn2: Option<BnP>,
    proj: Option<(ConvP, Option<BnP>)>,
}

#[derive(Debug, Clone)]
struct Net {
    stem: ConvP,
    stem_bn: Option<BnP>,
    blocks: Vec<BlockP>,
    head_w: usize,
    head_b: usize,
    head_in: usize,
    n_params: usize,
    n_stats: usize,
    slots: Vec<ParamSlot>,
}

struct Layout<'a> {
    arch: &'a ArchSpec,
    offset: usize,
    stats: usize,
    slots: Vec<ParamSlot>,
}

impl Layout<'_> {
    fn take(&mut self, name: String, len: usize, decay: bool) -> usize {
        let off = self.offset;
        self.slots.push(ParamSlot {
            name,
            offset: off,
            len,
            decay,
        });
        self.offset += len;
        off
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> ConvP {
        let w = self.take(format!("{name}.w"), cout * cin * k, true);
        ConvP {
            w,
            cin,
            cout,
            k,
            stride,
        }
    }

    fn bn(&mut self, name: &str, c: usize) -> Option<BnP> {
        if !self.arch.norm {
            return None;
        }
        let gamma = self.take(format!("{name}.gamma"), c, false);
        let beta = self.take(format!("{name}.beta"), c, false);
        let stat = self.stats;
        self.stats += c;
        Some(BnP { gamma, beta, stat, c })
    }
}

impl Net {
    fn build(arch: &ArchSpec) -> Net {
        let mut lay = Layout {
            arch,
            offset: 0,
            stats: 0,
            slots: Vec::new(),
        };
        let stem = lay.conv(
            "stem.conv",
            arch.in_channels,
            arch.stem.out,
            arch.stem.kernel,
            arch.stem.stride,
        );
        let stem_bn = lay.bn("stem.bn", arch.stem.out);
        let mut c = arch.stem.out;
        let mut blocks = Vec::new();
        for (i, b) in arch.blocks.iter().enumerate() {
            let stride = if b.downsample { 2 } else { 1 };
            let conv1 = lay.conv(&format!("block{i}.conv1"), c, b.out, b.kernel, stride);
            let bn1 = lay.bn(&format!("block{i}.bn1"), b.out);
            let conv2 = lay.conv(&format!("block{i}.conv2"), b.out, b.out, b.kernel, 1);
            let bn2 = lay.bn(&format!("block{i}.bn2"), b.out);
            let proj = (stride != 1 || c != b.out).then(|| {
                let pc = lay.conv(&format!("block{i}.proj"), c, b.out, 1, stride);
                (pc, lay.bn(&format!("block{i}.proj_bn"), b.out))
            });
            blocks.push(BlockP {
                conv1,
                bn1,
                conv2,
                bn2,
                proj,
            });
            c = b.out;
        }
        let head_w = lay.take("head.w".into(), 2 * c, true);
        let head_b = lay.take("head.b".into(), 2, false);
        Net {
            stem,
            stem_bn,
            blocks,
            head_w,
            head_b,
            head_in: c,
            n_params: lay.offset,
            n_stats: lay.stats,
            slots: lay.slots,
        }
    }
}

/// Input batch laid out `B x F x L`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub b: usize,
    pub f: usize,
    pub l: usize,
    pub data: Vec<f64>,
}

impl Batch {
    pub fn new(b: usize, f: usize, l: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != b * f * l || b == 0 {
            return Err(Error::ShapeMismatch(format!(
                "batch data of {} values is not {b}x{f}x{l}",
                data.len()
            )));
        }
        Ok(Batch { b, f, l, data })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct Act {
    c: usize,
    b: usize,
    l: usize,
    data: Vec<f64>,
}

impl Act {
    fn from_batch(x: &Batch) -> Act {
        let mut data = vec![0.0; x.data.len()];
        for b in 0..x.b {
            for f in 0..x.f {
                let src = &x.data[(b * x.f + f) * x.l..][..x.l];
                data[(f * x.b + b) * x.l..][..x.l].copy_from_slice(src);
            }
        }
        Act {
            c: x.f,
            b: x.b,
            l: x.l,
            data,
        }
    }
}

struct ConvCache {
    col: Vec<f64>,
    in_l: usize,
}

struct BnCache {
    xhat: Vec<f64>,
    inv: Vec<f64>,
}

struct BlockCache {
    c1: ConvCache,
    n1: Option<BnCache>,
    r1: Act,
    c2: ConvCache,
    n2: Option<BnCache>,
    pc: Option<ConvCache>,
    pn: Option<BnCache>,
    out: Act,
}

struct Tape {
    stem_c: ConvCache,
    stem_n: Option<BnCache>,
    stem_out: Act,
    blocks: Vec<BlockCache>,
    pooled: Vec<f64>,
    last_l: usize,
}

/// Per-layer batch moments from a train-mode pass, in running-stat order.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: Vec<usize>,
}

/// Network parameters plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: ArchSpec,
    pub params: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

fn relu(mut x: Act) -> Act {
    for v in &mut x.data {
        *v = v.max(0.0);
    }
    x
}

fn relu_back(dy: &mut Act, out: &Act) {
    for (d, o) in dy.data.iter_mut().zip(&out.data) {
        if *o <= 0.0 {
            *d = 0.0;
        }
    }
}

impl Model {
    /// Fan-in scaled normal kernels, zero biases, unit norm scales.
    pub fn init(arch: &ArchSpec, seed: u64) -> Result<Model> {
        arch.validate()?;
        let net = Net::build(arch);
        let mut rng = rng::stream(seed, Purpose::Init, 0);
        let mut params = vec![0.0; net.n_params];
        for slot in &net.slots {
            let fan_in = if slot.name == "head.w" {
                Some(net.head_in)
            } else if slot.name.ends_with(".w") {
                let conv = net_conv(&net, &slot.name);
                Some(conv.cin * conv.k)
            } else {
                None
            };
            let dst = &mut params[slot.offset..slot.offset + slot.len];
            match fan_in {
                Some(n) => {
                    let gain = if slot.name == "head.w" { 1.0 } else { 2.0 };
                    let sd = (gain / n as f64).sqrt();
                    for v in dst {
                        *v = sd * rng.sample::<f64, _>(StandardNormal);
                    }
                }
                None if slot.name.ends_with(".gamma") => dst.fill(1.0),
                None => dst.fill(0.0),
            }
        }
        Ok(Model {
            arch: arch.clone(),
            params,
            running_mean: vec![0.0; net.n_stats],
            running_var: vec![1.0; net.n_stats],
        })
    }

    pub fn zeros(arch: &ArchSpec) -> Result<Model> {
        arch.validate()?;
        let net = Net::build(arch);
        Ok(Model {
            arch: arch.clone(),
            params: vec![0.0; net.n_params],
            running_mean: vec![0.0; net.n_stats],
            running_var: vec![1.0; net.n_stats],
        })
    }

    pub fn slots(&self) -> Vec<ParamSlot> {
        Net::build(&self.arch).slots
    }

    /// Per-parameter decay flags.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.params.len()];
        for s in self.slots() {
            mask[s.offset..s.offset + s.len].fill(s.decay);
        }
        mask
    }

    fn check(&self, x: &Batch) -> Result<Net> {
        let net = Net::build(&self.arch);
        if x.f != self.arch.in_channels || x.l != self.arch.length {
            return Err(Error::ShapeMismatch(format!(
                "input {}x{} but architecture expects {}x{}",
                x.f, x.l, self.arch.in_channels, self.arch.length
            )));
        }
        if self.params.len() != net.n_params
            || self.running_mean.len() != net.n_stats
            || self.running_var.len() != net.n_stats
        {
            return Err(Error::ShapeMismatch(
                "parameter vector does not match architecture".into(),
            ));
        }
        Ok(net)
    }

    /// Logits `(normal, warning)` per sample.
    pub fn forward(&self, x: &Batch, mode: Mode) -> Result<Vec<[f64; 2]>> {
        let net = self.check(x)?;
        let (logits, _, _) = self.run(&net, x, mode);
        Ok(logits)
    }

    /// Global-average-pooled activations feeding the head, `B x C`.
    pub fn pooled(&self, x: &Batch, mode: Mode) -> Result<Vec<f64>> {
        let net = self.check(x)?;
        let (_, tape, _) = self.run(&net, x, mode);
        Ok(tape.pooled)
    }

    /// Which rectifier units are active, over every ReLU layer in order.
    pub fn activation_pattern(&self, x: &Batch, mode: Mode) -> Result<Vec<bool>> {
        let net = self.check(x)?;
        let (_, tape, _) = self.run(&net, x, mode);
        let acts = std::iter::once(&tape.stem_out).chain(tape.blocks.iter().flat_map(|b| [&b.r1, &b.out]));
        Ok(acts.flat_map(|a| a.data.iter().map(|v| *v > 0.0)).collect())
    }

    /// Positive-class probability per sample in eval mode.
    pub fn predict_proba(&self, x: &Batch) -> Result<Vec<f64>> {
        Ok(self.forward(x, Mode::Eval)?.iter().map(softmax_pos).collect())
    }

    /// Weighted cross-entropy and its gradient for a train-mode pass.
    pub fn loss_and_grad(&self, x: &Batch, labels: &[u8], lambda_pos: f64) -> Result<(f64, Vec<f64>, BatchStats)> {
        let net = self.check(x)?;
        if labels.len() != x.b {
            return Err(Error::ShapeMismatch("labels do not match batch size".into()));
        }
        let (logits, tape, stats) = self.run(&net, x, Mode::Train);
        let (loss, dlogits) = optim::weighted_ce_grad(&logits, labels, lambda_pos);
        let grad = self.backward(&net, &tape, &dlogits);
        Ok((loss, grad, stats))
    }

    /// Fold batch moments into the running statistics.
    pub fn update_running(&mut self, s: &BatchStats) {
        let m = self.arch.bn_momentum;
        for i in 0..self.running_mean.len() {
            let n = s.count[i] as f64;
            let unbiased = if n > 1.0 { s.var[i] * n / (n - 1.0) } else { s.var[i] };
            self.running_mean[i] = (1.0 - m) * self.running_mean[i] + m * s.mean[i];
            self.running_var[i] = (1.0 - m) * self.running_var[i] + m * unbiased;
        }
    }

    fn conv_fwd(&self, p: &ConvP, x: &Act) -> (Act, ConvCache) {
        let lout = p.out_len(x.l);
        let pad = p.pad() as isize;
        let bl = x.b * lout;
        let rows = p.cin * p.k;
        let mut col = vec![0.0; rows * bl];
        for ci in 0..p.cin {
            for kk in 0..p.k {
                let row = &mut col[(ci * p.k + kk) * bl..][..bl];
                for b in 0..x.b {
                    let src = &x.data[(ci * x.b + b) * x.l..][..x.l];
                    for lo in 0..lout {
                        let idx = (lo * p.stride + kk) as isize - pad;
                        if idx >= 0 && (idx as usize) < x.l {
                            row[b * lout + lo] = src[idx as usize];
                        }
                    }
                }
            }
        }
        let mut y = vec![0.0; p.cout * bl];
        let w = &self.params[p.w..p.w + p.cout * rows];
        gemm(p.cout, rows, bl, w, false, &col, false, &mut y, 0.0);
        (
            Act {
                c: p.cout,
                b: x.b,
                l: lout,
                data: y,
            },
            ConvCache { col, in_l: x.l },
        )
    }

    fn conv_bwd(&self, p: &ConvP, cache: &ConvCache, dy: &Act, grad: &mut [f64]) -> Act {
        let rows = p.cin * p.k;
        let bl = dy.b * dy.l;
        gemm(
            p.cout,
            bl,
            rows,
            &dy.data,
            false,
            &cache.col,
            true,
            &mut grad[p.w..p.w + p.cout * rows],
            1.0,
        );
        let mut dcol = vec![0.0; rows * bl];
        let w = &self.params[p.w..p.w + p.cout * rows];
        gemm(rows, p.cout, bl, w, true, &dy.data, false, &mut dcol, 0.0);
        let in_l = cache.in_l;
        let mut dx = vec![0.0; p.cin * dy.b * in_l];
        let pad = p.pad() as isize;
        for ci in 0..p.cin {
            for kk in 0..p.k {
                let row = &dcol[(ci * p.k + kk) * bl..][..bl];
                for b in 0..dy.b {
                    let dst = &mut dx[(ci * dy.b + b) * in_l..][..in_l];
                    for lo in 0..dy.l {
                        let idx = (lo * p.stride + kk) as isize - pad;
                        if idx >= 0 && (idx as usize) < in_l {
                            dst[idx as usize] += row[b * dy.l + lo];
                        }
                    }
                }
            }
        }
        Act {
            c: p.cin,
            b: dy.b,
            l: in_l,
            data: dx,
        }
    }

    fn bn_fwd(&self, p: &Option<BnP>, mut x: Act, mode: Mode, stats: &mut BatchStats) -> (Act, Option<BnCache>) {
        let Some(p) = p else { return (x, None) };
        let n = x.b * x.l;
        let eps = self.arch.bn_eps;
        match mode {
            Mode::Eval => {
                for c in 0..p.c {
                    let inv = 1.0 / (self.running_var[p.stat + c] + eps).sqrt();
                    let (g, b, m) = (
                        self.params[p.gamma + c],
                        self.params[p.beta + c],
                        self.running_mean[p.stat + c],
                    );
                    for v in &mut x.data[c * n..(c + 1) * n] {
                        *v = g * (*v - m) * inv + b;
                    }
                }
                (x, None)
            }
            Mode::Train => {
                let mut xhat = vec![0.0; x.data.len()];
                let mut invs = vec![0.0; p.c];
                for c in 0..p.c {
                    let s = &mut x.data[c * n..(c + 1) * n];
                    let mean = s.iter().sum::<f64>() / n as f64;
                    let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let (g, b) = (self.params[p.gamma + c], self.params[p.beta + c]);
                    for (v, h) in s.iter_mut().zip(&mut xhat[c * n..(c + 1) * n]) {
                        *h = (*v - mean) * inv;
                        *v = g * *h + b;
                    }
                    invs[c] = inv;
                    stats.mean[p.stat + c] = mean;
                    stats.var[p.stat + c] = var;
                    stats.count[p.stat + c] = n;
                }
                (x, Some(BnCache { xhat, inv: invs }))
            }
        }
    }

    fn bn_bwd(&self, p: &Option<BnP>, cache: &Option<BnCache>, mut dy: Act, grad: &mut [f64]) -> Act {
        let (Some(p), Some(cache)) = (p, cache) else { return dy };
        let n = dy.b * dy.l;
        let nf = n as f64;
        for c in 0..p.c {
            let d = &mut dy.data[c * n..(c + 1) * n];
            let xh = &cache.xhat[c * n..(c + 1) * n];
            let dbeta: f64 = d.iter().sum();
            let dgamma: f64 = d.iter().zip(xh).map(|(a, b)| a * b).sum();
            grad[p.gamma + c] += dgamma;
            grad[p.beta + c] += dbeta;
            let k = self.params[p.gamma + c] * cache.inv[c] / nf;
            for (v, h) in d.iter_mut().zip(xh) {
                *v = k * (nf * *v - dbeta - h * dgamma);
            }
        }
        dy
    }

    fn run(&self, net: &Net, x: &Batch, mode: Mode) -> (Vec<[f64; 2]>, Tape, BatchStats) {
        let mut stats = BatchStats {
            mean: vec![0.0; net.n_stats],
            var: vec![0.0; net.n_stats],
            count: vec![0; net.n_stats],
        };
        let input = Act::from_batch(x);
        let (h, stem_c) = self.conv_fwd(&net.stem, &input);
        let (h, stem_n) = self.bn_fwd(&net.stem_bn, h, mode, &mut stats);
        let stem_out = relu(h);
        let mut cur = stem_out.clone();
        let mut blocks = Vec::with_capacity(net.blocks.len());
        for bp in &net.blocks {
            let (h, c1) = self.conv_fwd(&bp.conv1, &cur);
            let (h, n1) = self.bn_fwd(&bp.bn1, h, mode, &mut stats);
            let r1 = relu(h);
            let (h, c2) = self.conv_fwd(&bp.conv2, &r1);
            let (mut h, n2) = self.bn_fwd(&bp.bn2, h, mode, &mut stats);
            let (pc, pn) = match &bp.proj {
                Some((pconv, pbn)) => {
                    let (s, pc) = self.conv_fwd(pconv, &cur);
                    let (s, pn) = self.bn_fwd(pbn, s, mode, &mut stats);
                    for (a, b) in h.data.iter_mut().zip(&s.data) {
                        *a += b;
                    }
                    (Some(pc), pn)
                }
                None => {
                    for (a, b) in h.data.iter_mut().zip(&cur.data) {
                        *a += b;
                    }
                    (None, None)
                }
            };
            let out = relu(h);
            cur = out.clone();
            blocks.push(BlockCache {
                c1,
                n1,
                r1,
                c2,
                n2,
                pc,
                pn,
                out,
            });
        }
        let c = cur.c;
        let mut pooled = vec![0.0; x.b * c];
        for ch in 0..c {
            for b in 0..x.b {
                let s = &cur.data[(ch * x.b + b) * cur.l..][..cur.l];
                pooled[b * c + ch] = s.iter().sum::<f64>() / cur.l as f64;
            }
        }
        let hw = &self.params[net.head_w..net.head_w + 2 * c];
        let hb = &self.params[net.head_b..net.head_b + 2];
        let logits = (0..x.b)
            .map(|b| {
                let h = &pooled[b * c..(b + 1) * c];
                let mut out = [hb[0], hb[1]];
                for (j, o) in out.iter_mut().enumerate() {
                    *o += hw[j * c..(j + 1) * c].iter().zip(h).map(|(w, v)| w * v).sum::<f64>();
                }
                out
            })
            .collect();
        let tape = Tape {
            stem_c,
            stem_n,
            stem_out,
            blocks,
            pooled,
            last_l: cur.l,
        };
        (logits, tape, stats)
    }

    fn backward(&self, net: &Net, tape: &Tape, dlogits: &[[f64; 2]]) -> Vec<f64> {
        let mut grad = vec![0.0; self.params.len()];
        let b = dlogits.len();
        let c = net.head_in;
        let l = tape.last_l;
        let mut dcur = Act {
            c,
            b,
            l,
            data: vec![0.0; c * b * l],
        };
        for (bi, dl) in dlogits.iter().enumerate() {
            let h = &tape.pooled[bi * c..(bi + 1) * c];
            for j in 0..2 {
                grad[net.head_b + j] += dl[j];
                for ch in 0..c {
                    grad[net.head_w + j * c + ch] += dl[j] * h[ch];
                }
            }
            for ch in 0..c {
                let dh = (dl[0] * self.params[net.head_w + ch] + dl[1] * self.params[net.head_w + c + ch]) / l as f64;
                dcur.data[(ch * b + bi) * l..][..l].fill(dh);
            }
        }
        for (bp, bc) in net.blocks.iter().zip(&tape.blocks).rev() {
            relu_back(&mut dcur, &bc.out);
            let dsum = dcur;
            let d = self.bn_bwd(&bp.bn2, &bc.n2, dsum.clone(), &mut grad);
            let mut d = self.conv_bwd(&bp.conv2, &bc.c2, &d, &mut grad);
            relu_back(&mut d, &bc.r1);
            let d = self.bn_bwd(&bp.bn1, &bc.n1, d, &mut grad);
            let mut dx = self.conv_bwd(&bp.conv1, &bc.c1, &d, &mut grad);
            match (&bp.proj, &bc.pc) {
                (Some((pconv, pbn)), Some(pc)) => {
                    let ds = self.bn_bwd(pbn, &bc.pn, dsum, &mut grad);
                    let ds = self.conv_bwd(pconv, pc, &ds, &mut grad);
                    for (a, v) in dx.data.iter_mut().zip(&ds.data) {
                        *a += v;
                    }
                }
                _ => {
                    for (a, v) in dx.data.iter_mut().zip(&dsum.data) {
                        *a += v;
                    }
                }
            }
            dcur = dx;
        }
        relu_back(&mut dcur, &tape.stem_out);
        let d = self.bn_bwd(&net.stem_bn, &tape.stem_n, dcur, &mut grad);
        let _ = self.conv_bwd(&net.stem, &tape.stem_c, &d, &mut grad);
        grad
    }
}

fn net_conv<'a>(net: &'a Net, name: &str) -> &'a ConvP {
    let prefix = name.trim_end_matches(".w");
    if prefix == "stem.conv" {
        return &net.stem;
    }
    let (block, layer) = prefix.split_once('.').expect("conv slot names are block.layer");
    let i: usize = block.trim_start_matches("block").parse().expect("block index");
    let bp = &net.blocks[i];
    match layer {
        "conv1" => &bp.conv1,
        "conv2" => &bp.conv2,
        _ => &bp.proj.as_ref().expect("projection conv").0,
    }
}

#[cfg(test)]
mod tests;
