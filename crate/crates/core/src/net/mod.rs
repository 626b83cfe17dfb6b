//! Dual-head segmentation network with hand-rolled reverse-mode
//! differentiation.
//!
//! The architecture is a 3-D encoder/decoder. A stem convolution (no
//! normalization, so the net stays sensitive to global intensity scale)
//! feeds `levels` encoder stages of residual blocks joined by stride-2
//! convolutions; the coarsest stage is the bottleneck and carries
//! inverted dropout. The decoder mirrors the encoder with trilinear
//! upsampling, skip concatenation, and a fused convolution per stage.
//! Four heads read the result: a voxel segmentation head (logistic), a
//! voxel signed-distance head (linear), a per-slice presence head
//! (in-plane pooling + logistic), and a projection head on the
//! bottleneck for contrastive features.
//!
//! `forward` returns the outputs together with a [`Tape`] holding every
//! cache `backward` needs; `backward` accumulates parameter gradients,
//! so repeated calls sum and [`Network::zero_grads`] resets.

pub mod tensor;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{Dims, Volume};
use crate::sampling::FeatureMap;
use crate::sdt::DistanceMap;
use tensor::{
    concat, concat_backward, dropout_backward, dropout_forward, param_rng, relu, relu_backward,
    sigmoid, upsample2, upsample2_backward, Conv, ConvCache, Norm, NormCache, SliceCache,
    SliceHead, Tensor,
};

/// Structural hyperparameters; `seed` drives weight init and dropout.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub blocks_per_level: usize,
    pub head_width: usize,
    pub proj_dim: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl NetworkConfig {
    /// Small configuration that trains in seconds on one core.
    pub fn desk_default(seed: u64) -> Self {
        NetworkConfig {
            levels: 2,
            base_channels: 8,
            blocks_per_level: 1,
            head_width: 8,
            proj_dim: 16,
            dropout: 0.1,
            seed,
        }
    }

    /// Full-size configuration matching the reference architecture.
    pub fn full_scale(seed: u64) -> Self {
        NetworkConfig {
            levels: 4,
            base_channels: 32,
            blocks_per_level: 4,
            head_width: 32,
            proj_dim: 128,
            dropout: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.levels > 6 {
            return Err(Error::ConfigError(format!("levels = {} out of [1, 6]", self.levels)));
        }
        for (k, v) in [
            ("base_channels", self.base_channels),
            ("blocks_per_level", self.blocks_per_level),
            ("head_width", self.head_width),
            ("proj_dim", self.proj_dim),
        ] {
            if v == 0 {
                return Err(Error::ConfigError(format!("{k} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::ConfigError(format!("dropout = {} out of [0, 1)", self.dropout)));
        }
        if self.levels == 1 && self.head_width != self.base_channels {
            return Err(Error::ConfigError(
                "with a single level the heads read the encoder directly, so \
                 head_width must equal base_channels"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Channels of encoder level `l`.
    fn ch(&self, l: usize) -> usize {
        self.base_channels << l
    }

    /// Voxels per coarse cell along each axis.
    pub fn factor(&self) -> usize {
        1 << (self.levels - 1)
    }
}

/// Closed-form number of learnable scalars for a configuration:
/// stem `27*C0 + C0`; per encoder level `R` blocks of
/// `2*(27*C^2 + C) + 4*C`; per transition `27*C_l*C_{l+1} + 3*C_{l+1}`;
/// per decoder stage `27*(C_{l+1}+C_l)*C_out + 3*C_out`; plus
/// `3*(H + 1)` for the voxel/slice heads and `C_bot*P + P` for the
/// projection.
pub fn param_count(cfg: &NetworkConfig) -> usize {
    let conv3 = |cin: usize, cout: usize| 27 * cin * cout + cout;
    let conv1 = |cin: usize, cout: usize| cin * cout + cout;
    let norm = |c: usize| 2 * c;
    let block = |c: usize| 2 * conv3(c, c) + 2 * norm(c);
    let mut n = conv3(1, cfg.ch(0));
    for l in 0..cfg.levels {
        n += cfg.blocks_per_level * block(cfg.ch(l));
    }
    for l in 0..cfg.levels - 1 {
        n += conv3(cfg.ch(l), cfg.ch(l + 1)) + norm(cfg.ch(l + 1));
    }
    for d in 0..cfg.levels - 1 {
        let tl = cfg.levels - 2 - d;
        let cin = cfg.ch(tl + 1) + cfg.ch(tl);
        let cout = if tl == 0 { cfg.head_width } else { cfg.ch(tl) };
        n += conv3(cin, cout) + norm(cout);
    }
    n += 3 * (cfg.head_width + 1); // seg + dist + slice heads
    n += conv1(cfg.ch(cfg.levels - 1), cfg.proj_dim);
    n
}

/// Whether dropout draws masks (`Train`) or is the identity (`Eval`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct ResBlock {
    c1: Conv,
    n1: Norm,
    c2: Conv,
    n2: Norm,
}

#[derive(Debug, Clone)]
struct BlockTape {
    cc1: ConvCache,
    nc1: NormCache,
    rm1: Vec<bool>,
    cc2: ConvCache,
    nc2: NormCache,
    rm2: Vec<bool>,
}

impl ResBlock {
    fn new(c: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut c1 = Conv::new(c, c, 3, 1);
        c1.init(rng);
        let n1 = Norm::new(c);
        let mut c2 = Conv::new(c, c, 3, 1);
        c2.init(rng);
        let n2 = Norm::new(c);
        ResBlock { c1, n1, c2, n2 }
    }

    fn forward(&self, x: &Tensor) -> (Tensor, BlockTape) {
        let (h1, cc1) = self.c1.forward(x);
        let (n1o, nc1) = self.n1.forward(&h1);
        let (r1, rm1) = relu(&n1o);
        let (h2, cc2) = self.c2.forward(&r1);
        let (n2o, nc2) = self.n2.forward(&h2);
        let mut sum = n2o;
        for (s, xv) in sum.data.iter_mut().zip(&x.data) {
            *s += xv;
        }
        let (out, rm2) = relu(&sum);
        (out, BlockTape { cc1, nc1, rm1, cc2, nc2, rm2 })
    }

    fn backward(&mut self, t: &BlockTape, g_out: &Tensor) -> Tensor {
        let g_sum = relu_backward(&t.rm2, g_out);
        let g_h2 = self.n2.backward(&t.nc2, &g_sum);
        let g_r1 = self.c2.backward(&t.cc2, &g_h2);
        let g_n1o = relu_backward(&t.rm1, &g_r1);
        let g_h1 = self.n1.backward(&t.nc1, &g_n1o);
        let mut g_x = self.c1.backward(&t.cc1, &g_h1);
        for (g, s) in g_x.data.iter_mut().zip(&g_sum.data) {
            *g += s; // skip connection
        }
        g_x
    }
}

#[derive(Debug, Clone)]
struct DownTape {
    cc: ConvCache,
    nc: NormCache,
    rm: Vec<bool>,
}

#[derive(Debug, Clone)]
struct DecTape {
    up_in_dims: Dims,
    up_c: usize,
    cc: ConvCache,
    nc: NormCache,
    rm: Vec<bool>,
}

/// Everything `backward` needs from one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    in_dims: Dims,
    stem_cc: ConvCache,
    stem_rm: Vec<bool>,
    enc: Vec<Vec<BlockTape>>,
    downs: Vec<DownTape>,
    drop_mask: Option<Vec<f64>>,
    proj_cc: ConvCache,
    dec: Vec<DecTape>,
    seg_cc: ConvCache,
    seg_prob: Vec<f64>,
    dist_cc: ConvCache,
    slice_cache: SliceCache,
}

/// Outputs of one branch on one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutputs {
    /// Voxelwise tumor probability.
    pub seg_prob: Volume,
    /// Voxelwise signed-distance prediction. Predictions are unbounded,
    /// so the map's cap is the observed max magnitude.
    pub dist_pred: DistanceMap,
    /// Per-slice tumor presence probability.
    pub slice_prob: Vec<f64>,
    /// Projected bottleneck features for contrastive sampling.
    pub features: FeatureMap,
}

/// Gradients of a scalar loss w.r.t. each [`BranchOutputs`] field, in
/// the same layouts.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrads {
    pub seg: Vec<f64>,
    pub dist: Vec<f64>,
    pub slice: Vec<f64>,
    pub features: Vec<f64>,
}

impl OutputGrads {
    pub fn zeros_like(out: &BranchOutputs) -> Self {
        OutputGrads {
            seg: vec![0.0; out.seg_prob.data().len()],
            dist: vec![0.0; out.dist_pred.data().len()],
            slice: vec![0.0; out.slice_prob.len()],
            features: vec![0.0; out.features.data().len()],
        }
    }
}

/// The network itself: parameters plus dropout state.
#[derive(Debug, Clone)]
pub struct Network {
    cfg: NetworkConfig,
    stem: Conv,
    enc: Vec<Vec<ResBlock>>,
    downs: Vec<(Conv, Norm)>,
    dec: Vec<(Conv, Norm)>,
    seg: Conv,
    dist: Conv,
    slice: SliceHead,
    proj: Conv,
    mode: Mode,
    dropout_rng: ChaCha8Rng,
}

impl Network {
    /// Build and He-initialize from the config seed. Identical configs
    /// produce identical parameters.
    pub fn build(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = param_rng(cfg.seed);
        let mut stem = Conv::new(1, cfg.ch(0), 3, 1);
        stem.init(&mut rng);
        let mut enc = Vec::new();
        let mut downs = Vec::new();
        for l in 0..cfg.levels {
            let blocks: Vec<ResBlock> =
                (0..cfg.blocks_per_level).map(|_| ResBlock::new(cfg.ch(l), &mut rng)).collect();
            enc.push(blocks);
            if l + 1 < cfg.levels {
                let mut dc = Conv::new(cfg.ch(l), cfg.ch(l + 1), 3, 2);
                dc.init(&mut rng);
                downs.push((dc, Norm::new(cfg.ch(l + 1))));
            }
        }
        let mut dec = Vec::new();
        for d in 0..cfg.levels - 1 {
            let tl = cfg.levels - 2 - d;
            let cin = cfg.ch(tl + 1) + cfg.ch(tl);
            let cout = if tl == 0 { cfg.head_width } else { cfg.ch(tl) };
            let mut fc = Conv::new(cin, cout, 3, 1);
            fc.init(&mut rng);
            dec.push((fc, Norm::new(cout)));
        }
        let mut seg = Conv::new(cfg.head_width, 1, 1, 1);
        seg.init(&mut rng);
        let mut dist = Conv::new(cfg.head_width, 1, 1, 1);
        dist.init(&mut rng);
        let mut slice = SliceHead::new(cfg.head_width);
        slice.init(&mut rng);
        let mut proj = Conv::new(cfg.ch(cfg.levels - 1), cfg.proj_dim, 1, 1);
        proj.init(&mut rng);
        // Dropout draws from an independent stream so parameter init
        // stays fixed across mode changes.
        let dropout_rng = param_rng(cfg.seed ^ 0x9e3779b97f4a7c15);
        Ok(Network {
            cfg: cfg.clone(),
            stem,
            enc,
            downs,
            dec,
            seg,
            dist,
            slice,
            proj,
            mode: Mode::Eval,
            dropout_rng,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Run one patch through the network.
    ///
    /// Input dims must be divisible by `2^(levels-1)` along every axis.
    /// In `Train` mode dropout advances the internal mask stream; in
    /// `Eval` mode the pass is a pure function of (params, input).
    pub fn forward(&mut self, x: &Volume) -> Result<(BranchOutputs, Tape)> {
        let dims = x.dims();
        let f = self.cfg.factor();
        if dims.z % f != 0 || dims.y % f != 0 || dims.x % f != 0 {
            return Err(Error::ShapeError {
                context: format!("network input must be divisible by {f} per axis"),
                expected: Dims::new(
                    (dims.z / f).max(1) * f,
                    (dims.y / f).max(1) * f,
                    (dims.x / f).max(1) * f,
                ),
                got: dims,
            });
        }
        let t = Tensor::from_data(1, dims, x.data().to_vec());
        let (s_pre, stem_cc) = self.stem.forward(&t);
        let (mut cur, stem_rm) = relu(&s_pre);

        let levels = self.cfg.levels;
        let mut enc_tapes = Vec::with_capacity(levels);
        let mut down_tapes = Vec::with_capacity(levels - 1);
        let mut skips: Vec<Tensor> = Vec::with_capacity(levels.saturating_sub(1));
        for l in 0..levels {
            let mut level_tapes = Vec::with_capacity(self.enc[l].len());
            for block in &self.enc[l] {
                let (next, bt) = block.forward(&cur);
                cur = next;
                level_tapes.push(bt);
            }
            enc_tapes.push(level_tapes);
            if l + 1 < levels {
                skips.push(cur.clone());
                let (dc, dn) = &self.downs[l];
                let (h, cc) = dc.forward(&cur);
                let (n, nc) = dn.forward(&h);
                let (next, rm) = relu(&n);
                cur = next;
                down_tapes.push(DownTape { cc, nc, rm });
            }
        }

        let rng = match self.mode {
            Mode::Train => Some(&mut self.dropout_rng),
            Mode::Eval => None,
        };
        let (bot, drop_mask) = dropout_forward(&cur, self.cfg.dropout, rng);

        let (proj_out, proj_cc) = self.proj.forward(&bot);

        let mut dec_tapes = Vec::with_capacity(levels - 1);
        let mut head_in = bot.clone();
        for d in 0..levels - 1 {
            let tl = levels - 2 - d;
            let up_in_dims = head_in.dims;
            let up_c = head_in.c;
            let up = upsample2(&head_in);
            let cat = concat(&up, &skips[tl]);
            let (fc, fnm) = &self.dec[d];
            let (h, cc) = fc.forward(&cat);
            let (n, nc) = fnm.forward(&h);
            let (out, rm) = relu(&n);
            head_in = out;
            dec_tapes.push(DecTape { up_in_dims, up_c, cc, nc, rm });
        }

        let (seg_logit, seg_cc) = self.seg.forward(&head_in);
        let seg_prob: Vec<f64> = seg_logit.data.iter().map(|&v| sigmoid(v)).collect();
        let (dist_out, dist_cc) = self.dist.forward(&head_in);
        let (slice_prob, slice_cache) = self.slice.forward(&head_in);

        let cap = dist_out
            .data
            .iter()
            .fold(0.0f64, |a, v| a.max(v.abs()))
            .max(f64::MIN_POSITIVE);
        let outputs = BranchOutputs {
            seg_prob: Volume::new(dims, x.spacing(), seg_prob.clone())?,
            dist_pred: DistanceMap::new(dims, x.spacing(), dist_out.data.clone(), cap)?,
            slice_prob: slice_prob.clone(),
            features: FeatureMap::new(self.cfg.proj_dim, bot.dims, f, proj_out.data.clone())?,
        };
        let tape = Tape {
            in_dims: dims,
            stem_cc,
            stem_rm,
            enc: enc_tapes,
            downs: down_tapes,
            drop_mask,
            proj_cc,
            dec: dec_tapes,
            seg_cc,
            seg_prob,
            dist_cc,
            slice_cache,
        };
        Ok((outputs, tape))
    }

    /// Accumulate parameter gradients for one branch pass.
    pub fn backward(&mut self, tape: &Tape, g: &OutputGrads) -> Result<()> {
        let n = tape.in_dims.len();
        let bot_dims = tape.proj_cc.x.dims;
        let checks = [
            ("seg", g.seg.len(), n),
            ("dist", g.dist.len(), n),
            ("slice", g.slice.len(), tape.in_dims.z),
            ("features", g.features.len(), self.cfg.proj_dim * bot_dims.len()),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::ConfigError(format!(
                    "output grad {name} has {got} values, expected {want}"
                )));
            }
        }

        // Heads back to the decoder output.
        let g_seg_logit: Vec<f64> = g
            .seg
            .iter()
            .zip(&tape.seg_prob)
            .map(|(gp, p)| gp * p * (1.0 - p))
            .collect();
        let mut g_head = self
            .seg
            .backward(&tape.seg_cc, &Tensor::from_data(1, tape.in_dims, g_seg_logit));
        let g_dist = self
            .dist
            .backward(&tape.dist_cc, &Tensor::from_data(1, tape.in_dims, g.dist.clone()));
        add_into(&mut g_head, &g_dist);
        let g_slice = self.slice.backward(&tape.slice_cache, &g.slice);
        add_into(&mut g_head, &g_slice);

        // Projection head back to the bottleneck.
        let g_feat = Tensor::from_data(self.cfg.proj_dim, bot_dims, g.features.clone());
        let mut g_bot = self.proj.backward(&tape.proj_cc, &g_feat);

        // Decoder in reverse; skip grads are parked per encoder level.
        let levels = self.cfg.levels;
        let mut g_skip: Vec<Option<Tensor>> = (0..levels).map(|_| None).collect();
        if levels == 1 {
            add_into(&mut g_bot, &g_head);
        } else {
            let mut g_cur = g_head;
            for d in (0..levels - 1).rev() {
                let tl = levels - 2 - d;
                let dt = &tape.dec[d];
                let (fc, fnm) = &mut self.dec[d];
                let g_n = relu_backward(&dt.rm, &g_cur);
                let g_h = fnm.backward(&dt.nc, &g_n);
                let g_cat = fc.backward(&dt.cc, &g_h);
                let (g_up, g_sk) = concat_backward(dt.up_c, &g_cat);
                g_skip[tl] = Some(g_sk);
                let g_prev = upsample2_backward(dt.up_c, dt.up_in_dims, &g_up);
                if d == 0 {
                    add_into(&mut g_bot, &g_prev);
                } else {
                    g_cur = g_prev;
                }
            }
        }

        // Dropout, then the encoder in reverse.
        let mut g_cur = dropout_backward(&tape.drop_mask, &g_bot);
        for l in (0..levels).rev() {
            for (block, bt) in self.enc[l].iter_mut().zip(&tape.enc[l]).rev() {
                g_cur = block.backward(bt, &g_cur);
            }
            if l > 0 {
                let dt = &tape.downs[l - 1];
                let (dc, dn) = &mut self.downs[l - 1];
                let g_n = relu_backward(&dt.rm, &g_cur);
                let g_h = dn.backward(&dt.nc, &g_n);
                g_cur = dc.backward(&dt.cc, &g_h);
                if let Some(sk) = g_skip[l - 1].take() {
                    add_into(&mut g_cur, &sk);
                }
            }
        }
        let g_spre = relu_backward(&tape.stem_rm, &g_cur);
        let _ = self.stem.backward(&tape.stem_cc, &g_spre);
        Ok(())
    }

    /// Reset all accumulated parameter gradients to zero.
    pub fn zero_grads(&mut self) {
        self.for_each_param(&mut |_name, _p, g| {
            for v in g.iter_mut() {
                *v = 0.0;
            }
        });
    }

    /// Visit every (name, params, grads) triple in the fixed
    /// construction order used for init, checkpoints, and the optimizer.
    pub fn for_each_param(
        &mut self,
        f: &mut dyn FnMut(&str, &mut Vec<f64>, &mut Vec<f64>),
    ) {
        let conv = |name: String, c: &mut Conv, f: &mut dyn FnMut(&str, &mut Vec<f64>, &mut Vec<f64>)| {
            f(&format!("{name}.w"), &mut c.w, &mut c.gw);
            f(&format!("{name}.b"), &mut c.b, &mut c.gb);
        };
        let norm = |name: String, n: &mut Norm, f: &mut dyn FnMut(&str, &mut Vec<f64>, &mut Vec<f64>)| {
            f(&format!("{name}.gamma"), &mut n.gamma, &mut n.g_gamma);
            f(&format!("{name}.beta"), &mut n.beta, &mut n.g_beta);
        };
        conv("stem.conv".into(), &mut self.stem, f);
        for (l, level) in self.enc.iter_mut().enumerate() {
            for (b, block) in level.iter_mut().enumerate() {
                conv(format!("enc{l}.block{b}.conv1"), &mut block.c1, f);
                norm(format!("enc{l}.block{b}.norm1"), &mut block.n1, f);
                conv(format!("enc{l}.block{b}.conv2"), &mut block.c2, f);
                norm(format!("enc{l}.block{b}.norm2"), &mut block.n2, f);
            }
            if l < self.downs.len() {
                let (dc, dn) = &mut self.downs[l];
                conv(format!("down{l}.conv"), dc, f);
                norm(format!("down{l}.norm"), dn, f);
            }
        }
        for (d, (fc, fnm)) in self.dec.iter_mut().enumerate() {
            conv(format!("dec{d}.fuse"), fc, f);
            norm(format!("dec{d}.norm"), fnm, f);
        }
        conv("head.seg".into(), &mut self.seg, f);
        conv("head.dist".into(), &mut self.dist, f);
        f("head.slice.w", &mut self.slice.w, &mut self.slice.gw);
        f("head.slice.b", &mut self.slice.b, &mut self.slice.gb);
        conv("head.proj".into(), &mut self.proj, f);
    }

    /// Snapshot all parameters as (name, values) in visitation order.
    pub fn export_params(&mut self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        self.for_each_param(&mut |name, p, _| out.push((name.to_string(), p.clone())));
        out
    }

    /// Load parameters exported by [`Network::export_params`] from a net
    /// of the same configuration.
    pub fn import_params(&mut self, params: &[(String, Vec<f64>)]) -> Result<()> {
        let mut idx = 0usize;
        let mut err = None;
        self.for_each_param(&mut |name, p, _| {
            if err.is_some() {
                return;
            }
            match params.get(idx) {
                None => err = Some(format!("missing tensor {name}")),
                Some((got_name, data)) => {
                    if got_name != name {
                        err = Some(format!("tensor {idx} is {got_name}, expected {name}"));
                    } else if data.len() != p.len() {
                        err = Some(format!(
                            "tensor {name} has {} values, expected {}",
                            data.len(),
                            p.len()
                        ));
                    } else {
                        p.copy_from_slice(data);
                    }
                }
            }
            idx += 1;
        });
        if let Some(e) = err {
            return Err(Error::ConfigError(format!("parameter import: {e}")));
        }
        if idx != params.len() {
            return Err(Error::ConfigError(format!(
                "parameter import: {} tensors provided, {} expected",
                params.len(),
                idx
            )));
        }
        Ok(())
    }

    /// Total learnable scalars; matches [`param_count`] by construction.
    pub fn actual_param_count(&mut self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, p, _| n += p.len());
        n
    }
}

fn add_into(dst: &mut Tensor, src: &Tensor) {
    debug_assert_eq!(dst.data.len(), src.data.len());
    for (d, s) in dst.data.iter_mut().zip(&src.data) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Spacing;
    use rand::{Rng, SeedableRng};

    fn tiny_cfg() -> NetworkConfig {
        NetworkConfig {
            levels: 2,
            base_channels: 2,
            blocks_per_level: 1,
            head_width: 2,
            proj_dim: 2,
            dropout: 0.0,
            seed: 3,
        }
    }

    fn rand_volume(dims: Dims, seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..dims.len()).map(|_| rng.random_range(0.0..1.0)).collect();
        Volume::new(dims, Spacing::isotropic(1.0).unwrap(), data).unwrap()
    }

    #[test]
    fn param_count_formula_matches_reality() {
        for cfg in [
            tiny_cfg(),
            NetworkConfig::desk_default(1),
            NetworkConfig {
                levels: 3,
                base_channels: 4,
                blocks_per_level: 2,
                head_width: 6,
                proj_dim: 5,
                dropout: 0.1,
                seed: 0,
            },
        ] {
            let mut net = Network::build(&cfg).unwrap();
            assert_eq!(net.actual_param_count(), param_count(&cfg), "{cfg:?}");
        }
    }

    #[test]
    fn desk_default_size_is_documented() {
        assert_eq!(param_count(&NetworkConfig::desk_default(0)), 26659);
    }

    #[test]
    fn build_is_deterministic_and_eval_forward_is_pure() {
        let cfg = NetworkConfig::desk_default(11);
        let mut a = Network::build(&cfg).unwrap();
        let mut b = Network::build(&cfg).unwrap();
        assert_eq!(a.export_params(), b.export_params());
        let x = rand_volume(Dims::new(4, 8, 8), 2);
        let (o1, _) = a.forward(&x).unwrap();
        let (o2, _) = a.forward(&x).unwrap();
        assert_eq!(o1, o2);
        let (o3, _) = b.forward(&x).unwrap();
        assert_eq!(o1, o3);
    }

    #[test]
    fn output_shapes_and_ranges() {
        let cfg = NetworkConfig::desk_default(4);
        let mut net = Network::build(&cfg).unwrap();
        let dims = Dims::new(4, 8, 8);
        let (o, _) = net.forward(&rand_volume(dims, 1)).unwrap();
        assert_eq!(o.seg_prob.dims(), dims);
        assert!(o.seg_prob.data().iter().all(|p| (0.0..=1.0).contains(p)));
        assert_eq!(o.dist_pred.dims(), dims);
        assert_eq!(o.slice_prob.len(), dims.z);
        assert!(o.slice_prob.iter().all(|p| (0.0..=1.0).contains(p)));
        assert_eq!(o.features.dims(), Dims::new(2, 4, 4));
        assert_eq!(o.features.channels(), cfg.proj_dim);
        assert_eq!(o.features.factor(), 2);
    }

    #[test]
    fn indivisible_input_dims_rejected() {
        let mut net = Network::build(&NetworkConfig::desk_default(0)).unwrap();
        let r = net.forward(&rand_volume(Dims::new(3, 8, 8), 0));
        assert!(matches!(r, Err(Error::ShapeError { .. })));
    }

    #[test]
    fn zero_params_give_maximal_uncertainty()
    {
        let mut net = Network::build(&NetworkConfig::desk_default(9)).unwrap();
        net.for_each_param(&mut |_, p, _| p.iter_mut().for_each(|v| *v = 0.0));
        let (o, _) = net.forward(&rand_volume(Dims::new(4, 8, 8), 5)).unwrap();
        assert!(o.seg_prob.data().iter().all(|p| *p == 0.5));
        assert!(o.slice_prob.iter().all(|p| *p == 0.5));
        assert!(o.dist_pred.data().iter().all(|v| *v == 0.0));
        assert!(o.features.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn doubling_the_input_changes_outputs() {
        let mut net = Network::build(&NetworkConfig::desk_default(7)).unwrap();
        let x = rand_volume(Dims::new(4, 8, 8), 3);
        let x2 = Volume::new(
            x.dims(),
            x.spacing(),
            x.data().iter().map(|v| 2.0 * v).collect(),
        )
        .unwrap();
        let (o1, _) = net.forward(&x).unwrap();
        let (o2, _) = net.forward(&x2).unwrap();
        let max_diff = o1
            .seg_prob
            .data()
            .iter()
            .zip(o2.seg_prob.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff > 1e-9, "outputs invariant to input scale");
    }

    #[test]
    fn backward_accumulates_linearly() {
        let mut net = Network::build(&tiny_cfg()).unwrap();
        let x = rand_volume(Dims::new(4, 4, 4), 8);
        let (o, tape) = net.forward(&x).unwrap();
        let mut g = OutputGrads::zeros_like(&o);
        g.seg.iter_mut().for_each(|v| *v = 0.3);
        g.dist.iter_mut().for_each(|v| *v = -0.2);
        net.zero_grads();
        net.backward(&tape, &g).unwrap();
        let mut once = Vec::new();
        net.for_each_param(&mut |_, _, gr| once.push(gr.clone()));
        net.backward(&tape, &g).unwrap();
        let mut twice = Vec::new();
        net.for_each_param(&mut |_, _, gr| twice.push(gr.clone()));
        for (a, b) in once.iter().zip(&twice) {
            for (x1, x2) in a.iter().zip(b) {
                assert!((x2 - 2.0 * x1).abs() <= 1e-12 * (1.0 + x1.abs()));
            }
        }
    }

    #[test]
    fn train_mode_dropout_draws_masks_eval_does_not() {
        let mut cfg = tiny_cfg();
        cfg.dropout = 0.5;
        let mut net = Network::build(&cfg).unwrap();
        let x = rand_volume(Dims::new(4, 4, 4), 1);
        net.set_mode(Mode::Train);
        let (a, ta) = net.forward(&x).unwrap();
        let (b, _) = net.forward(&x).unwrap();
        assert!(ta.drop_mask.is_some());
        assert_ne!(a, b, "distinct masks should change outputs");
        net.set_mode(Mode::Eval);
        let (c, tc) = net.forward(&x).unwrap();
        let (d, _) = net.forward(&x).unwrap();
        assert!(tc.drop_mask.is_none());
        assert_eq!(c, d);
    }

    #[test]
    fn import_export_roundtrip_and_mismatch() {
        let mut a = Network::build(&NetworkConfig::desk_default(1)).unwrap();
        let mut b = Network::build(&NetworkConfig::desk_default(2)).unwrap();
        let pa = a.export_params();
        b.import_params(&pa).unwrap();
        assert_eq!(b.export_params(), pa);
        let r = b.import_params(&pa[..pa.len() - 1]);
        assert!(matches!(r, Err(Error::ConfigError(_))));
    }

    /// End-to-end gradient check on a tiny net: the loss is a fixed
    /// random linear functional of all four outputs, so output grads are
    /// constants and finite differences probe the whole graph.
    #[test]
    fn end_to_end_grads_match_finite_differences() {
        let cfg = tiny_cfg();
        let mut net = Network::build(&cfg).unwrap();
        let x = rand_volume(Dims::new(4, 4, 4), 13);
        let mut wrng = ChaCha8Rng::seed_from_u64(99);
        let (o0, _) = net.forward(&x).unwrap();
        let lin = OutputGrads {
            seg: (0..o0.seg_prob.data().len()).map(|_| wrng.random_range(-1.0..1.0)).collect(),
            dist: (0..o0.dist_pred.data().len()).map(|_| wrng.random_range(-1.0..1.0)).collect(),
            slice: (0..o0.slice_prob.len()).map(|_| wrng.random_range(-1.0..1.0)).collect(),
            features: (0..o0.features.data().len()).map(|_| wrng.random_range(-1.0..1.0)).collect(),
        };
        let loss = |net: &mut Network| -> f64 {
            let (o, _) = net.forward(&x).unwrap();
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
            dot(o.seg_prob.data(), &lin.seg)
                + dot(o.dist_pred.data(), &lin.dist)
                + dot(&o.slice_prob, &lin.slice)
                + dot(o.features.data(), &lin.features)
        };
        let (_, tape) = net.forward(&x).unwrap();
        net.zero_grads();
        net.backward(&tape, &lin).unwrap();
        let mut grads = Vec::new();
        net.for_each_param(&mut |name, _, g| grads.push((name.to_string(), g.clone())));
        let names: Vec<String> = grads.iter().map(|(n, _)| n.clone()).collect();

        // Probe a few entries of every tensor.
        let h = 1e-5;
        let mut checked = 0usize;
        for (ti, name) in names.iter().enumerate() {
            let len = grads[ti].1.len();
            let picks: Vec<usize> = if len <= 2 { (0..len).collect() } else { vec![0, len / 2] };
            for pi in picks {
                let analytic = grads[ti].1[pi];
                let set = |delta: f64, net: &mut Network| {
                    let mut k = 0usize;
                    net.for_each_param(&mut |_, p, _| {
                        if k == ti {
                            p[pi] += delta;
                        }
                        k += 1;
                    });
                };
                set(h, &mut net);
                let lp = loss(&mut net);
                set(-2.0 * h, &mut net);
                let lm = loss(&mut net);
                set(h, &mut net);
                let fd = (lp - lm) / (2.0 * h);
                let tol = 5e-3 * (1.0 + fd.abs().max(analytic.abs()));
                assert!(
                    (fd - analytic).abs() <= tol,
                    "{name}[{pi}]: fd {fd} vs analytic {analytic}"
                );
                checked += 1;
            }
        }
        assert!(checked >= 30, "checked only {checked} parameters");
    }
}
