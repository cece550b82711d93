//! Versioned binary checkpoint of a [`TrainState`].
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic "CBPCKPT\0" | u32 version | str config echo
//! training config | u32 n_layers | per layer: shape, activation, quant
//! config, weights, bias, grid | multiplier state | optimizer state |
//! g | epoch | initialized
//! ```
//!
//! Strings and arrays carry a u64 length prefix. Floats are stored as 64-bit
//! so a resumed run continues bit-for-bit. The batch order is a pure function
//! of the seed and the epoch number, so no generator state is stored beyond
//! those two values.

use std::path::Path;

use crate::cbp::{
    CbpConfig, GSchedule, MultiplierOptimizer, MultiplierState, TrainState, TrainingMode,
    WeightOptimizerState,
};
use crate::constraint::{ConstraintKind, QuantGrid};
use crate::error::{Error, Result};
use crate::ndcore::Matrix;
use crate::network::{Activation, Layer, Network};
use crate::quantizer::{LayerQuantConfig, ScalePolicy};

pub const MAGIC: &[u8; 8] = b"CBPCKPT\0";
pub const VERSION: u32 = 1;

/// A training state plus the text of the experiment configuration that
/// produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_echo: String,
    pub state: TrainState,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bool(&mut self, v: bool) {
        self.u8(v as u8);
    }
    fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        for &x in v {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated: needed {n} more bytes")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.err(format!("length {v} does not fit")))
    }
    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(elem) > self.buf.len() - self.pos {
            return Err(self.err(format!("length {n} exceeds remaining data")));
        }
        Ok(n)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(self.err(format!("invalid flag byte {b}"))),
        }
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len(1)?;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.err("invalid utf-8"))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
}

fn put_kind(w: &mut Writer, k: &ConstraintKind) {
    match k {
        ConstraintKind::Binary => w.u8(0),
        ConstraintKind::Ternary => w.u8(1),
        ConstraintKind::OneBitShift => w.u8(2),
        ConstraintKind::TwoBitShift => w.u8(3),
        ConstraintKind::Custom(levels) => {
            w.u8(4);
            w.f64s(levels);
        }
    }
}

fn get_kind(r: &mut Reader) -> Result<ConstraintKind> {
    Ok(match r.u8()? {
        0 => ConstraintKind::Binary,
        1 => ConstraintKind::Ternary,
        2 => ConstraintKind::OneBitShift,
        3 => ConstraintKind::TwoBitShift,
        4 => ConstraintKind::Custom(r.f64s()?),
        t => return Err(r.err(format!("unknown constraint tag {t}"))),
    })
}

fn put_policy(w: &mut Writer, p: ScalePolicy) {
    w.u8(match p {
        ScalePolicy::FrozenAtStart => 0,
        ScalePolicy::RecomputeEachEpoch => 1,
    });
}

fn get_policy(r: &mut Reader) -> Result<ScalePolicy> {
    match r.u8()? {
        0 => Ok(ScalePolicy::FrozenAtStart),
        1 => Ok(ScalePolicy::RecomputeEachEpoch),
        t => Err(r.err(format!("unknown scale policy tag {t}"))),
    }
}

fn put_mopt(w: &mut Writer, o: MultiplierOptimizer) {
    match o {
        MultiplierOptimizer::Adam { beta1, beta2, eps } => {
            w.u8(0);
            w.f64(beta1);
            w.f64(beta2);
            w.f64(eps);
        }
        MultiplierOptimizer::RawAscent => w.u8(1),
    }
}

fn get_mopt(r: &mut Reader) -> Result<MultiplierOptimizer> {
    match r.u8()? {
        0 => Ok(MultiplierOptimizer::Adam {
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
        }),
        1 => Ok(MultiplierOptimizer::RawAscent),
        t => Err(r.err(format!("unknown multiplier optimizer tag {t}"))),
    }
}

fn put_config(w: &mut Writer, c: &CbpConfig) {
    w.u8(match c.mode {
        TrainingMode::Cbp => 0,
        TrainingMode::CbpNoWindow => 1,
        TrainingMode::SteOnly => 2,
        TrainingMode::FullPrecision => 3,
    });
    w.f64(c.lr_w);
    w.f64(c.momentum);
    w.f64(c.weight_decay);
    w.usize(c.batch_size);
    w.usize(c.epochs);
    w.f64(c.lr_lambda);
    w.usize(c.p_max);
    put_mopt(w, c.multiplier_optimizer);
    w.u8(match c.g_schedule {
        GSchedule::ThreeTier => 0,
        GSchedule::TwoTier => 1,
    });
    w.f64(c.lr_decay_trigger);
    w.f64(c.lr_decay_factor);
    put_policy(w, c.scale_policy);
    w.u64(c.seed);
}

fn get_config(r: &mut Reader) -> Result<CbpConfig> {
    let mode = match r.u8()? {
        0 => TrainingMode::Cbp,
        1 => TrainingMode::CbpNoWindow,
        2 => TrainingMode::SteOnly,
        3 => TrainingMode::FullPrecision,
        t => return Err(r.err(format!("unknown mode tag {t}"))),
    };
    Ok(CbpConfig {
        mode,
        lr_w: r.f64()?,
        momentum: r.f64()?,
        weight_decay: r.f64()?,
        batch_size: r.usize()?,
        epochs: r.usize()?,
        lr_lambda: r.f64()?,
        p_max: r.usize()?,
        multiplier_optimizer: get_mopt(r)?,
        g_schedule: match r.u8()? {
            0 => GSchedule::ThreeTier,
            1 => GSchedule::TwoTier,
            t => return Err(r.err(format!("unknown g schedule tag {t}"))),
        },
        lr_decay_trigger: r.f64()?,
        lr_decay_factor: r.f64()?,
        scale_policy: get_policy(r)?,
        seed: r.u64()?,
    })
}

fn get_matrix(r: &mut Reader, rows: usize, cols: usize) -> Result<Matrix> {
    let data = r.f64s()?;
    if data.len() != rows * cols {
        return Err(r.err(format!("expected {}x{} values, found {}", rows, cols, data.len())));
    }
    Matrix::from_vec(rows, cols, data)
}

/// Serializes a checkpoint to bytes.
pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let s = &ck.state;
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.str(&ck.config_echo);
    put_config(&mut w, &s.config);

    let layers = s.network.layers();
    w.usize(layers.len());
    w.u64(s.network.generation());
    for (i, l) in layers.iter().enumerate() {
        w.usize(l.out_dim());
        w.usize(l.in_dim());
        w.u8(match l.activation {
            Activation::Relu => 0,
            Activation::Identity => 1,
        });
        w.bool(l.quant.exempt);
        put_kind(&mut w, &l.quant.kind);
        put_policy(&mut w, l.quant.scale_policy);
        w.f64s(l.weights.as_slice());
        w.f64s(&l.bias);
        match s.grids.get(i).and_then(Option::as_ref) {
            Some(grid) => {
                w.bool(true);
                w.f64s(grid.levels());
                w.f64(grid.g());
            }
            None => w.bool(false),
        }
        w.f64s(s.optimizer.velocity_w[i].as_slice());
        w.f64s(&s.optimizer.velocity_b[i]);
    }

    let m = &s.multipliers;
    w.f64s(&m.lambda);
    w.f64s(&m.first_moment);
    w.f64s(&m.second_moment);
    w.u64(m.steps);
    w.f64(m.eta_lambda);
    put_mopt(&mut w, m.optimizer);
    w.usize(m.p);
    w.usize(m.p_max);
    w.f64(m.l_sum_prev);

    let o = &s.optimizer;
    w.f64(o.eta_w);
    w.f64(o.momentum);
    w.f64(o.weight_decay);
    w.f64(o.decay_trigger);
    w.f64(o.decay_factor);
    w.bool(o.decayed);

    w.f64(s.g);
    w.usize(s.epoch);
    w.bool(s.initialized);
    w.buf
}

/// Parses bytes produced by [`encode`]. Newer format versions are refused.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: "not a checkpoint (bad magic)".into(),
        });
    }
    let version = r.u32()?;
    if version > VERSION {
        return Err(Error::Version {
            found: version,
            supported: VERSION,
        });
    }
    if version == 0 {
        return Err(r.err("checkpoint version 0 is invalid"));
    }
    let config_echo = r.str()?;
    let config = get_config(&mut r)?;

    let n_layers = r.len(1)?;
    let generation = r.u64()?;
    let mut layers = Vec::with_capacity(n_layers);
    let mut grids = Vec::with_capacity(n_layers);
    let mut velocity_w = Vec::with_capacity(n_layers);
    let mut velocity_b = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let rows = r.usize()?;
        let cols = r.usize()?;
        let activation = match r.u8()? {
            0 => Activation::Relu,
            1 => Activation::Identity,
            t => return Err(r.err(format!("unknown activation tag {t}"))),
        };
        let exempt = r.bool()?;
        let kind = get_kind(&mut r)?;
        let scale_policy = get_policy(&mut r)?;
        let weights = get_matrix(&mut r, rows, cols)?;
        let bias = r.f64s()?;
        let grid = if r.bool()? {
            let levels = r.f64s()?;
            let g = r.f64()?;
            Some(QuantGrid::new(levels)?.with_window(g)?)
        } else {
            None
        };
        velocity_w.push(get_matrix(&mut r, rows, cols)?);
        velocity_b.push(r.f64s()?);
        grids.push(grid);
        layers.push(Layer {
            weights,
            bias,
            activation,
            quant: LayerQuantConfig {
                exempt,
                kind,
                scale_policy,
            },
        });
    }
    let mut network = Network::from_layers(layers)?;
    network.set_generation(generation);

    let multipliers = MultiplierState {
        lambda: r.f64s()?,
        first_moment: r.f64s()?,
        second_moment: r.f64s()?,
        steps: r.u64()?,
        eta_lambda: r.f64()?,
        optimizer: get_mopt(&mut r)?,
        p: r.usize()?,
        p_max: r.usize()?,
        l_sum_prev: r.f64()?,
    };
    let optimizer = WeightOptimizerState {
        velocity_w,
        velocity_b,
        eta_w: r.f64()?,
        momentum: r.f64()?,
        weight_decay: r.f64()?,
        decay_trigger: r.f64()?,
        decay_factor: r.f64()?,
        decayed: r.bool()?,
    };
    let g = r.f64()?;
    let epoch = r.usize()?;
    let initialized = r.bool()?;
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after checkpoint"));
    }
    let state = TrainState {
        network,
        grids,
        multipliers,
        optimizer,
        g,
        epoch,
        config,
        initialized,
        mid_epoch: false,
    };
    Ok(Checkpoint { config_echo, state })
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    if ck.state.mid_epoch {
        return Err(Error::Contract("checkpoints are taken at epoch boundaries".into()));
    }
    std::fs::write(path, encode(ck)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cbp::TrainState;

    fn sample() -> Checkpoint {
        let net = Network::mlp(&[3, 5, 4, 2], ConstraintKind::Custom(vec![-1.0, 0.25, 1.0]), 11).unwrap();
        let mut state = TrainState::new(net, CbpConfig::default()).unwrap();
        state.multipliers.lambda[2] = 0.125;
        state.multiplier_step().unwrap();
        Checkpoint {
            config_echo: "mode = cbp\n".into(),
            state,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let back = decode(&encode(&ck)).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.state.multipliers.l_sum_prev, f64::INFINITY);
    }

    #[test]
    fn newer_version_is_refused() {
        let mut bytes = encode(&sample());
        bytes[8..12].copy_from_slice(&(VERSION + 1).to_le_bytes());
        match decode(&bytes) {
            Err(Error::Version { found, supported }) => {
                assert_eq!((found, supported), (VERSION + 1, VERSION))
            }
            other => panic!("expected version error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = encode(&sample());
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Parse { .. })));
        assert!(matches!(decode(b"NOTACKPT\x01\0\0\0"), Err(Error::Parse { offset: 0, .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
