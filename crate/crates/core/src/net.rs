//! Displacement-estimation network: a four-level 3-D U-Net over
//! (moving, reference) pairs, optionally with a recurrent cell.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::activation::{Activation, LEAKY_SLOPE};
use crate::autodiff::{Tape, Var};
use crate::convlstm::{ConvLstmParams, ConvLstmVars, DenseLstmParams, DenseLstmVars, LstmInit};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamSet};
use crate::tensor::Tensor;
use crate::warp::DisplacementField;

/// Spatial reduction of the encoder.
pub const DEPTH_FACTOR: usize = 16;

const ENC: [(usize, usize); 4] = [(2, 16), (16, 32), (32, 32), (32, 32)];
const DEC: [(usize, usize); 4] = [(32, 32), (64, 32), (64, 32), (64, 32)];
const FIN: [(usize, usize); 3] = [(48, 32), (32, 16), (16, 16)];
const LSTM_HIDDEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetVariant {
    Pairwise,
    MultiFrame,
    BLstm,
    SConvLstm,
    BConvLstm,
}

impl NetVariant {
    pub const ALL: [NetVariant; 5] = [
        NetVariant::Pairwise,
        NetVariant::MultiFrame,
        NetVariant::BLstm,
        NetVariant::SConvLstm,
        NetVariant::BConvLstm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NetVariant::Pairwise => "pairwise",
            NetVariant::MultiFrame => "multi-frame",
            NetVariant::BLstm => "b-lstm",
            NetVariant::SConvLstm => "s-convlstm",
            NetVariant::BConvLstm => "b-convlstm",
        }
    }

    pub fn is_recurrent(self) -> bool {
        matches!(self, NetVariant::BLstm | NetVariant::SConvLstm | NetVariant::BConvLstm)
    }
}

impl fmt::Display for NetVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NetVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NetVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown network variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub variant: NetVariant,
    /// Working-grid extents; each must be a multiple of 16.
    pub extents: [usize; 3],
    pub leaky_slope: f64,
    pub flow_init_std: f64,
    pub lstm: LstmInit,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            variant: NetVariant::BConvLstm,
            extents: [16, 16, 16],
            leaky_slope: LEAKY_SLOPE,
            flow_init_std: 1e-5,
            lstm: LstmInit::default(),
        }
    }
}

impl NetConfig {
    pub fn new(variant: NetVariant, extents: [usize; 3]) -> Self {
        Self {
            variant,
            extents,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.extents.iter().any(|&e| e == 0 || e % DEPTH_FACTOR != 0) {
            return Err(Error::dim(format!(
                "network extents {:?} must be positive multiples of {DEPTH_FACTOR}",
                self.extents
            )));
        }
        if !(self.leaky_slope.is_finite() && self.flow_init_std >= 0.0 && self.flow_init_std.is_finite()) {
            return Err(Error::config("leaky slope and flow init std must be finite, std ≥ 0"));
        }
        Ok(())
    }

    fn bottleneck_voxels(&self) -> usize {
        self.extents.iter().map(|e| e / DEPTH_FACTOR).product()
    }

    fn flow_in(&self) -> usize {
        if self.variant == NetVariant::SConvLstm {
            LSTM_HIDDEN
        } else {
            FIN[2].1
        }
    }

    /// Parameter names and shapes in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |name: &str, cin: usize, cout: usize| {
            out.push((format!("{name}.w"), vec![cout, cin, 3, 3, 3]));
            out.push((format!("{name}.b"), vec![cout]));
        };
        for (l, &(i, o)) in ENC.iter().enumerate() {
            conv(&format!("enc{l}"), i, o);
        }
        match self.variant {
            NetVariant::BLstm => conv("lstm_proj", 1, 32),
            NetVariant::SConvLstm => conv("pre_lstm", FIN[2].1, FIN[2].1),
            _ => {}
        }
        for (l, &(i, o)) in DEC.iter().enumerate() {
            conv(&format!("dec{l}"), i, o);
        }
        for (l, &(i, o)) in FIN.iter().enumerate() {
            conv(&format!("fin{l}"), i, o);
        }
        conv("flow", self.flow_in(), 3);
        let lstm = match self.variant {
            NetVariant::BConvLstm => Some(ConvLstmParams::shapes(32, LSTM_HIDDEN, 3)),
            NetVariant::SConvLstm => Some(ConvLstmParams::shapes(FIN[2].1, LSTM_HIDDEN, 3)),
            NetVariant::BLstm => {
                let v = self.bottleneck_voxels();
                Some(DenseLstmParams::shapes(32 * v, v))
            }
            _ => None,
        };
        if let Some([w, u, b]) = lstm {
            out.push(("lstm.w".into(), w));
            out.push(("lstm.u".into(), u));
            out.push(("lstm.b".into(), b));
        }
        out
    }
}

/// Number of scalar learnables, computed from shapes alone.
pub fn count_params(cfg: &NetConfig) -> usize {
    cfg.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
}

/// A fixed reference and an ordered window of moving frames, all `[D,H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePairSequence {
    pub reference: Tensor,
    pub moving: Vec<Tensor>,
}

impl FramePairSequence {
    pub fn new(reference: Tensor, moving: Vec<Tensor>) -> Result<Self> {
        reference.vol_dims()?;
        if moving.is_empty() {
            return Err(Error::dim("no moving frames"));
        }
        if moving.iter().any(|m| m.shape() != reference.shape()) {
            return Err(Error::dim("moving and reference frames differ in shape"));
        }
        Ok(Self { reference, moving })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.reference.vol_dims().expect("validated")
    }

    /// `[2,D,H,W]` network input for slot `j`.
    pub fn pair(&self, j: usize) -> Tensor {
        Tensor::stack(&[&self.moving[j], &self.reference]).expect("validated")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionNet {
    config: NetConfig,
    params: ParamSet,
}

impl MotionNet {
    /// Random initialization; He-normal convolutions, near-zero flow head.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape) in config.layout() {
            if name.starts_with("lstm.") {
                continue;
            }
            let t = if name.ends_with(".b") {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let std = if name == "flow.w" {
                    config.flow_init_std
                } else {
                    (2.0 / fan_in as f64).sqrt()
                };
                normal(&shape, std, &mut rng)?
            };
            params.push(name, t);
        }
        if config.variant.is_recurrent() {
            let v = config.bottleneck_voxels();
            let (w, u, b) = match config.variant {
                NetVariant::BLstm => {
                    let p = DenseLstmParams::init(32 * v, v, config.lstm, &mut rng);
                    (p.w, p.u, p.b)
                }
                NetVariant::SConvLstm => {
                    let p = ConvLstmParams::init(FIN[2].1, LSTM_HIDDEN, 3, config.lstm, &mut rng);
                    (p.w, p.u, p.b)
                }
                _ => {
                    let p = ConvLstmParams::init(32, LSTM_HIDDEN, 3, config.lstm, &mut rng);
                    (p.w, p.u, p.b)
                }
            };
            params.push("lstm.w", w);
            params.push("lstm.u", u);
            params.push("lstm.b", b);
        }
        Self::from_params(config, params)
    }

    pub fn from_params(config: NetConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let ok = layout.len() == params.len()
            && layout
                .iter()
                .zip(params.iter())
                .all(|((n, s), (pn, pt))| n == pn && s.as_slice() == pt.shape());
        if !ok {
            return Err(Error::Config(format!(
                "parameters do not match the {} layout",
                config.variant
            )));
        }
        for (n, t) in params.iter() {
            t.check_finite(n)?;
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn variant(&self) -> NetVariant {
        self.config.variant
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn count_params(&self) -> usize {
        self.params.count()
    }

    /// Zero the flow head so every output field is zero.
    pub fn zero_flow_head(&mut self) {
        for name in ["flow.w", "flow.b"] {
            if let Ok(t) = self.params.get_mut(name) {
                t.data_mut().fill(0.0);
            }
        }
    }

    /// Record the forward pass for a window of `[2,D,H,W]` inputs and
    /// return one `[3,D,H,W]` field node per input.
    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, inputs: &[Var]) -> Result<Vec<Var>> {
        if inputs.is_empty() {
            return Err(Error::dim("empty input window"));
        }
        for &x in inputs {
            let (c, dims) = tape.value(x).map_dims()?;
            if c != 2 || dims != self.config.extents {
                return Err(Error::dim(format!(
                    "network input {:?}, expected [2, {:?}]",
                    tape.value(x).shape(),
                    self.config.extents
                )));
            }
        }
        let act = Activation::LeakyRelu(self.config.leaky_slope);
        let conv = |tape: &mut Tape, x: Var, name: &str, activate: bool| -> Result<Var> {
            let y = tape.conv3d(x, p.var(&format!("{name}.w"))?, Some(p.var(&format!("{name}.b"))?), 1, 1)?;
            if activate {
                tape.act(y, act)
            } else {
                Ok(y)
            }
        };

        let mut skips = Vec::with_capacity(inputs.len());
        let mut bottom = Vec::with_capacity(inputs.len());
        for &x in inputs {
            let mut h = x;
            let mut s = Vec::with_capacity(4);
            for l in 0..4 {
                let e = conv(tape, h, &format!("enc{l}"), true)?;
                s.push(e);
                h = tape.max_pool2(e)?;
            }
            skips.push(s);
            bottom.push(h);
        }

        match self.config.variant {
            NetVariant::BConvLstm => {
                let cell = Self::conv_cell(p)?;
                bottom = self.unroll(tape, &cell, &bottom)?;
            }
            NetVariant::BLstm => {
                let cell = DenseLstmVars {
                    w: p.var("lstm.w")?,
                    u: p.var("lstm.u")?,
                    b: p.var("lstm.b")?,
                    hidden: self.config.bottleneck_voxels(),
                };
                let bd = tape.value(bottom[0]).shape().to_vec();
                let v = cell.hidden;
                let mut h = tape.leaf(Tensor::zeros(&[v]), false);
                let mut c = tape.leaf(Tensor::zeros(&[v]), false);
                for b in bottom.iter_mut() {
                    let flat = tape.reshape(*b, &[32 * v])?;
                    let s = cell.step(tape, flat, h, c)?;
                    h = s.h;
                    c = s.c;
                    let map = tape.reshape(h, &[1, bd[1], bd[2], bd[3]])?;
                    *b = conv(tape, map, "lstm_proj", true)?;
                }
            }
            _ => {}
        }

        let mut feats = Vec::with_capacity(inputs.len());
        for (b, s) in bottom.into_iter().zip(&skips) {
            let mut h = b;
            for l in 0..4 {
                h = conv(tape, h, &format!("dec{l}"), true)?;
                h = tape.upsample2(h)?;
                h = tape.concat(&[h, s[3 - l]])?;
            }
            for l in 0..3 {
                h = conv(tape, h, &format!("fin{l}"), true)?;
            }
            if self.config.variant == NetVariant::SConvLstm {
                h = conv(tape, h, "pre_lstm", true)?;
            }
            feats.push(h);
        }

        if self.config.variant == NetVariant::SConvLstm {
            let cell = Self::conv_cell(p)?;
            feats = self.unroll(tape, &cell, &feats)?;
        }

        feats.into_iter().map(|h| conv(tape, h, "flow", false)).collect()
    }

    fn conv_cell(p: &BoundParams) -> Result<ConvLstmVars> {
        Ok(ConvLstmVars {
            w: p.var("lstm.w")?,
            u: p.var("lstm.u")?,
            b: p.var("lstm.b")?,
            hidden: LSTM_HIDDEN,
            kernel: 3,
        })
    }

    /// Zero-initialized single pass over the window.
    fn unroll(&self, tape: &mut Tape, cell: &ConvLstmVars, xs: &[Var]) -> Result<Vec<Var>> {
        let (_, dims) = tape.value(xs[0]).map_dims()?;
        let shape = [cell.hidden, dims[0], dims[1], dims[2]];
        let mut h = tape.leaf(Tensor::zeros(&shape), false);
        let mut c = tape.leaf(Tensor::zeros(&shape), false);
        let mut out = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = cell.step(tape, x, h, c)?;
            h = s.h;
            c = s.c;
            out.push(h);
        }
        Ok(out)
    }

    /// One displacement field (voxels of the working grid) per moving frame.
    pub fn estimate_displacements(&self, input: &FramePairSequence) -> Result<Vec<DisplacementField>> {
        if input.dims() != self.config.extents {
            return Err(Error::dim(format!(
                "input extents {:?} differ from network extents {:?}",
                input.dims(),
                self.config.extents
            )));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind_constant(&mut tape);
        let xs: Vec<Var> = (0..input.moving.len()).map(|j| tape.leaf(input.pair(j), false)).collect();
        let fields = self.forward(&mut tape, &bound, &xs)?;
        fields
            .into_iter()
            .map(|f| DisplacementField::new(tape.value(f).clone(), [1.0; 3]))
            .collect()
    }
}

fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if std == 0.0 {
        return Ok(Tensor::zeros(shape));
    }
    let d = Normal::new(0.0, std).map_err(|e| Error::Config(format!("normal init: {e}")))?;
    Ok(Tensor::from_fn(shape, |_| d.sample(rng)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Branches;
    use crate::gradcheck::{check_tape, sample_coords};
    use rand::Rng;

    fn rand_vol(dims: [usize; 3], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(&dims, |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn counts_at_full_extents() {
        let ext = [128, 128, 256];
        let c = |v| count_params(&NetConfig::new(v, ext));
        assert_eq!(c(NetVariant::Pairwise), 327_331);
        assert_eq!(c(NetVariant::MultiFrame), 327_331);
        assert_eq!(c(NetVariant::SConvLstm), 501_571);
        assert_eq!(c(NetVariant::BConvLstm), 548_643);
        assert_eq!(c(NetVariant::BLstm), 138_744_355);
    }

    #[test]
    fn constructed_count_matches_layout() {
        for v in NetVariant::ALL {
            let cfg = NetConfig::new(v, [16, 16, 32]);
            let net = MotionNet::new(cfg.clone(), 1).unwrap();
            assert_eq!(net.count_params(), count_params(&cfg));
        }
    }

    #[test]
    fn indivisible_extents_and_mismatched_params_fail() {
        let cfg = NetConfig::new(NetVariant::Pairwise, [16, 16, 24]);
        assert!(matches!(MotionNet::new(cfg, 0), Err(Error::Dimension(_))));
        let a = MotionNet::new(NetConfig::new(NetVariant::Pairwise, [16; 3]), 0).unwrap();
        let r = MotionNet::from_params(NetConfig::new(NetVariant::BConvLstm, [16; 3]), a.params().clone());
        assert!(matches!(r, Err(Error::Config(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seq = FramePairSequence::new(rand_vol([16, 16, 32], &mut rng), vec![rand_vol([16, 16, 32], &mut rng)]).unwrap();
        assert!(matches!(a.estimate_displacements(&seq), Err(Error::Dimension(_))));
        assert!("convlstm".parse::<NetVariant>().is_err());
        assert_eq!("b-convlstm".parse::<NetVariant>().unwrap(), NetVariant::BConvLstm);
    }

    #[test]
    fn zero_flow_head_gives_zero_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for v in [NetVariant::MultiFrame, NetVariant::SConvLstm] {
            let mut net = MotionNet::new(NetConfig::new(v, [16; 3]), 2).unwrap();
            net.zero_flow_head();
            let r = rand_vol([16; 3], &mut rng);
            let seq = FramePairSequence::new(r.clone(), vec![rand_vol([16; 3], &mut rng), r]).unwrap();
            let f = net.estimate_displacements(&seq).unwrap();
            assert_eq!(f.len(), 2);
            for fi in f {
                assert_eq!(fi.tensor().shape(), &[3, 16, 16, 16]);
                assert!(fi.tensor().data().iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn pairwise_equals_multiframe_on_repeated_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cfg = NetConfig::new(NetVariant::Pairwise, [16; 3]);
        cfg.flow_init_std = 0.1;
        let pw = MotionNet::new(cfg.clone(), 5).unwrap();
        cfg.variant = NetVariant::MultiFrame;
        let mf = MotionNet::from_params(cfg, pw.params().clone()).unwrap();
        let r = rand_vol([16; 3], &mut rng);
        let m = rand_vol([16; 3], &mut rng);
        let one = pw.estimate_displacements(&FramePairSequence::new(r.clone(), vec![m.clone()]).unwrap()).unwrap();
        let five = mf.estimate_displacements(&FramePairSequence::new(r, vec![m; 5]).unwrap()).unwrap();
        assert!(one[0].tensor().max_abs() > 0.0);
        for f in &five {
            assert_eq!(f, &one[0]);
        }
    }

    #[test]
    fn multiframe_is_permutation_equivariant_recurrent_is_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let r = rand_vol([16; 3], &mut rng);
        let ms: Vec<Tensor> = (0..3).map(|_| rand_vol([16; 3], &mut rng)).collect();
        let perm = [2, 0, 1];
        let permuted: Vec<Tensor> = perm.iter().map(|&i| ms[i].clone()).collect();
        for v in [NetVariant::MultiFrame, NetVariant::BConvLstm] {
            let mut cfg = NetConfig::new(v, [16; 3]);
            cfg.flow_init_std = 0.1;
            let net = MotionNet::new(cfg, 8).unwrap();
            let a = net.estimate_displacements(&FramePairSequence::new(r.clone(), ms.clone()).unwrap()).unwrap();
            let b = net.estimate_displacements(&FramePairSequence::new(r.clone(), permuted.clone()).unwrap()).unwrap();
            let equivariant = perm.iter().enumerate().all(|(k, &i)| b[k] == a[i]);
            assert_eq!(equivariant, v == NetVariant::MultiFrame, "{v}");
        }
    }

    #[test]
    fn end_to_end_gradient_on_small_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut cfg = NetConfig::new(NetVariant::BConvLstm, [16, 16, 32]);
        cfg.flow_init_std = 0.05;
        let net = MotionNet::new(cfg, 13).unwrap();
        let mut tape = Tape::new();
        let bound = net.params().bind(&mut tape);
        let r = rand_vol([16, 16, 32], &mut rng);
        let rv = tape.leaf(r.clone(), false);
        let mut loss_terms = Vec::new();
        let movings: Vec<Tensor> = (0..2).map(|_| rand_vol([16, 16, 32], &mut rng)).collect();
        let seq = FramePairSequence::new(r, movings.clone()).unwrap();
        let xs: Vec<Var> = (0..2).map(|j| tape.leaf(seq.pair(j), false)).collect();
        let fields = net.forward(&mut tape, &bound, &xs).unwrap();
        for (m, f) in movings.into_iter().zip(fields) {
            let mv = tape.leaf(m, false);
            let w = tape.warp(mv, f).unwrap();
            let ncc = tape.local_ncc(rv, w, 9, 1e-5).unwrap();
            let sm = tape.smoothness(f).unwrap();
            loss_terms.push((ncc, -1.0));
            loss_terms.push((sm, 1.0));
        }
        let loss = tape.linear(&loss_terms).unwrap();
        let g = tape.backward(loss).unwrap();
        let leaves = bound.vars().to_vec();
        let sizes: Vec<usize> = leaves.iter().map(|&v| tape.value(v).len()).collect();
        let coords = sample_coords(&sizes, 60, 3);
        let rep = check_tape(&tape, loss, &leaves, &g, &coords, 1e-4, Branches::Frozen).unwrap();
        assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
    }
}
