//! Little-endian binary checkpoints.
//!
//! Layout: magic `ALMA`, `u32` version, config hash, arrival index, the
//! learner (settings as JSON, then per component its flags, gate trees in
//! preorder, parameters and optimizer slots) and the ledger so far.
//! Strings are `u32` length + UTF-8; tensors are name, `u32` rank, `u64`
//! dims, then `f64` payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::gmoe::{gate_weight, Gating, GateTree, MoeLayer, MoeNet, NetLayer, PreorderRecord};
use crate::learners::{Component, LearnerConfig, LearnerHandle, LearnerKind};
use crate::metrics::{ArrivalRecord, MetricsLedger};
use crate::numkit::{AdadeltaState, MlpConfig, OptState, ParamSet, SgdState, Tensor};

pub const MAGIC: &[u8; 4] = b"ALMA";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_hash: String,
    /// Arrivals already processed.
    pub t: u64,
    pub learner: LearnerHandle,
    pub ledger: MetricsLedger,
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len32(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("collection fits in u32"));
    }
    fn str(&mut self, s: &str) {
        self.len32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn params(&mut self, p: &ParamSet) {
        self.len32(p.len());
        for (name, t) in p.iter() {
            self.str(name);
            self.len32(t.shape().len());
            for &d in t.shape() {
                self.u64(d as u64);
            }
            for &v in t.data() {
                self.f64(v);
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| self.err(format!("checkpoint truncated, wanted {n} more bytes")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
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
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.err(format!("{v} does not fit in usize")))
    }
    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(self.err(format!("flag byte {v}"))),
        }
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format {
            offset: at as u64,
            msg: "invalid UTF-8".into(),
        })
    }
    fn params(&mut self) -> Result<ParamSet> {
        let n = self.u32()?;
        let mut p = ParamSet::new();
        for _ in 0..n {
            let name = self.str()?;
            let rank = self.u32()? as usize;
            let shape = (0..rank).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&l| l <= self.bytes.len() / 8)
                .ok_or_else(|| self.err(format!("implausible tensor shape {shape:?}")))?;
            let data = (0..len).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
            let at = self.pos as u64;
            p.insert(name, Tensor::new(shape, data)?).map_err(|e| Error::Format {
                offset: at,
                msg: e.to_string(),
            })?;
        }
        Ok(p)
    }
}

fn kind_code(k: LearnerKind) -> u8 {
    match k {
        LearnerKind::Sm => 0,
        LearnerKind::Ens => 1,
        LearnerKind::Umix => 2,
        LearnerKind::Gens => 3,
        LearnerKind::Gmoe => 4,
    }
}

fn write_component(w: &mut Writer, c: &Component) {
    w.u64(c.seed);
    w.u8(u8::from(c.frozen));
    w.u64(c.rounds);
    let moe: Vec<&MoeLayer> = c.net.moe_layers().collect();
    w.len32(moe.len());
    for m in moe {
        w.str(m.name());
        w.u64(m.d_in() as u64);
        w.u64(m.d_out() as u64);
        w.u8(match m.gating() {
            Gating::Soft => 0,
            Gating::Hard => 1,
        });
        w.u64(m.version());
        let recs = m.tree().preorder();
        w.len32(recs.len());
        for r in recs {
            match r {
                PreorderRecord::Leaf { expert } => {
                    w.u8(0);
                    w.u64(expert as u64);
                }
                PreorderRecord::Internal { gate } => {
                    w.u8(1);
                    let block = gate_weight(m.name(), gate);
                    w.str(block.strip_suffix(".w").expect("gate weight names end in .w"));
                }
            }
        }
    }
    w.params(&c.params);
    let (code, slots) = match &c.opt {
        OptState::Sgd(_) => (0, c.opt.slots()),
        OptState::Adadelta(_) => (1, c.opt.slots()),
    };
    w.u8(code);
    w.len32(slots.len());
    for (name, p) in slots {
        w.str(name);
        w.params(p);
    }
}

fn read_moe_layer(r: &mut Reader<'_>) -> Result<MoeLayer> {
    let name = r.str()?;
    let d_in = r.usize()?;
    let d_out = r.usize()?;
    let gating = match r.u8()? {
        0 => Gating::Soft,
        1 => Gating::Hard,
        v => return Err(r.err(format!("gating code {v}"))),
    };
    let version = r.u64()?;
    let n = r.u32()?;
    let prefix = format!("{name}.g");
    let mut recs = Vec::new();
    for _ in 0..n {
        recs.push(match r.u8()? {
            0 => PreorderRecord::Leaf { expert: r.usize()? },
            1 => {
                let block = r.str()?;
                let gate = block
                    .strip_prefix(&prefix)
                    .and_then(|g| g.parse().ok())
                    .ok_or_else(|| r.err(format!("gate block {block:?} does not belong to layer {name}")))?;
                PreorderRecord::Internal { gate }
            }
            v => return Err(r.err(format!("tree node type {v}"))),
        });
    }
    let at = r.pos as u64;
    let tree = GateTree::from_preorder(&recs).map_err(|e| Error::Format {
        offset: at,
        msg: e.to_string(),
    })?;
    Ok(MoeLayer::from_parts(name, d_in, d_out, gating, tree, version))
}

fn read_component(r: &mut Reader<'_>, cfg: &LearnerConfig) -> Result<Component> {
    let seed = r.u64()?;
    let frozen = r.flag()?;
    let rounds = r.u64()?;
    let n_moe = r.u32()?;
    let mut loaded = Vec::new();
    for _ in 0..n_moe {
        loaded.push(read_moe_layer(r)?);
    }
    let params = r.params()?;
    let code = r.u8()?;
    let n_slots = r.u32()?;
    let mut slots = Vec::new();
    for _ in 0..n_slots {
        slots.push((r.str()?, r.params()?));
    }
    let opt = match (code, slots.as_slice()) {
        (0, [(a, v)]) if a == "velocity" => OptState::Sgd(SgdState { velocity: v.clone() }),
        (1, [(a, g), (b, d)]) if a == "sq_grad" && b == "sq_delta" => OptState::Adadelta(AdadeltaState {
            sq_grad: g.clone(),
            sq_delta: d.clone(),
        }),
        _ => return Err(r.err(format!("unrecognised optimizer state (code {code})"))),
    };

    let mlp = MlpConfig {
        seed,
        ..cfg.mlp.clone()
    };
    let moe_idx: &[usize] = if cfg.kind == LearnerKind::Gmoe { &cfg.moe_layers } else { &[] };
    let template = MoeNet::new(&mlp, moe_idx, cfg.gating)?;
    let mut loaded = loaded.into_iter();
    let layers = template
        .layers()
        .iter()
        .map(|l| match l {
            NetLayer::Moe(t) => {
                let m = loaded
                    .next()
                    .ok_or_else(|| r.err(format!("missing MoE layer {}", t.name())))?;
                if m.name() != t.name() || m.d_in() != t.d_in() || m.d_out() != t.d_out() {
                    return Err(r.err(format!("MoE layer {} does not match the architecture", m.name())));
                }
                Ok(NetLayer::Moe(m))
            }
            dense => Ok(dense.clone()),
        })
        .collect::<Result<Vec<_>>>()?;
    if loaded.next().is_some() {
        return Err(r.err("more MoE layers than the architecture has"));
    }
    let net = MoeNet::from_layers(&mlp, layers);
    if net.param_count() != params.param_count() {
        return Err(r.err(format!(
            "{} parameters stored, architecture needs {}",
            params.param_count(),
            net.param_count()
        )));
    }
    Ok(Component {
        seed,
        net,
        params,
        opt,
        frozen,
        rounds,
    })
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    w.str(&ck.config_hash);
    w.u64(ck.t);
    let h = &ck.learner;
    w.u8(kind_code(h.kind()));
    w.str(&serde_json::to_string(&h.config).expect("config serialises"));
    w.u64(h.growths);
    w.len32(h.components.len());
    for c in &h.components {
        write_component(&mut w, c);
    }
    let l = &ck.ledger;
    w.u64(l.num_arrivals() as u64);
    w.u64(l.t0_param_count() as u64);
    w.len32(l.records().len());
    for rec in l.records() {
        w.u64(rec.t as u64);
        w.f64(rec.error_rate);
        w.u64(rec.param_count as u64);
        w.f64(rec.flops);
        w.u8(u8::from(rec.trained));
    }
    w.0
}

/// Decodes a checkpoint, refusing it when `expected_hash` is given and
/// differs from the stored configuration hash.
pub fn decode_checkpoint(bytes: &[u8], expected_hash: Option<&str>) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "not an ALMA checkpoint (bad magic)".into(),
        });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::State(format!(
            "checkpoint format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let config_hash = r.str()?;
    if let Some(expect) = expected_hash {
        if expect != config_hash {
            return Err(Error::State(format!(
                "checkpoint was written for config {config_hash}, not {expect}"
            )));
        }
    }
    let t = r.u64()?;
    let code = r.u8()?;
    let json = r.str()?;
    let config: LearnerConfig =
        serde_json::from_str(&json).map_err(|e| r.err(format!("learner settings: {e}")))?;
    if kind_code(config.kind) != code {
        return Err(r.err("learner kind does not match its settings"));
    }
    let growths = r.u64()?;
    let n = r.u32()?;
    let mut components = Vec::new();
    for _ in 0..n {
        components.push(read_component(&mut r, &config)?);
    }
    let num_arrivals = r.usize()?;
    let t0 = r.usize()?;
    let rows = r.u32()?;
    let mut ledger = MetricsLedger::new(num_arrivals, t0);
    for _ in 0..rows {
        let rec = ArrivalRecord {
            t: r.usize()?,
            error_rate: r.f64()?,
            param_count: r.usize()?,
            flops: r.f64()?,
            trained: r.flag()?,
        };
        let at = r.pos as u64;
        ledger.append(rec).map_err(|e| Error::Format {
            offset: at,
            msg: e.to_string(),
        })?;
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after checkpoint"));
    }
    Ok(Checkpoint {
        config_hash,
        t,
        learner: LearnerHandle {
            config,
            components,
            growths,
        },
        ledger,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode_checkpoint(ck))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, expected_hash: Option<&str>) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?, expected_hash)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::LearnerConfig;
    use crate::numkit::Matrix;
    use crate::stream::{Dataset, TrainSet, ValSet};

    fn trained(kind: LearnerKind, gating: Gating) -> Checkpoint {
        let x = Matrix::new(30, 2, (0..60).map(|i| ((i * 7 % 13) as f64) / 6.0 - 1.0).collect()).unwrap();
        let y = (0..30).map(|i| i % 3).collect();
        let data = Dataset::new(x, y, 3).unwrap();
        let mut cfg = LearnerConfig::new(kind, MlpConfig::two_layer(2, 4, 3, 5));
        cfg.components = 2;
        cfg.gating = gating;
        cfg.minibatch_size = 8;
        let mut h = LearnerHandle::new(cfg).unwrap();
        let train = TrainSet::new(&data, (0..24).collect());
        let val = ValSet::new(&data, (24..30).collect());
        let mut ledger = MetricsLedger::new(4, h.param_count());
        for t in 1..=2 {
            let r = h.train_event(&train, &val, 1).unwrap();
            ledger
                .append(ArrivalRecord {
                    t,
                    error_rate: 0.5,
                    param_count: h.param_count(),
                    flops: r.flops_used,
                    trained: true,
                })
                .unwrap();
        }
        Checkpoint {
            config_hash: "abc".into(),
            t: 2,
            learner: h,
            ledger,
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        for (kind, gating) in [
            (LearnerKind::Sm, Gating::Soft),
            (LearnerKind::Ens, Gating::Soft),
            (LearnerKind::Umix, Gating::Soft),
            (LearnerKind::Gens, Gating::Soft),
            (LearnerKind::Gmoe, Gating::Soft),
            (LearnerKind::Gmoe, Gating::Hard),
        ] {
            let ck = trained(kind, gating);
            let bytes = encode_checkpoint(&ck);
            let back = decode_checkpoint(&bytes, Some("abc")).unwrap();
            assert_eq!(encode_checkpoint(&back), bytes, "{kind:?}");
            assert_eq!(back.ledger, ck.ledger);
            assert_eq!(back.learner.param_count(), ck.learner.param_count());
            for (a, b) in back.learner.components.iter().zip(&ck.learner.components) {
                assert!(a.params.bit_eq(&b.params));
                assert_eq!(a.opt, b.opt);
            }
        }
    }

    #[test]
    fn refuses_other_configs_and_bad_bytes() {
        let bytes = encode_checkpoint(&trained(LearnerKind::Sm, Gating::Soft));
        assert!(matches!(decode_checkpoint(&bytes, Some("xyz")), Err(Error::State(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad, None), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3], None),
            Err(Error::Format { .. })
        ));
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(matches!(decode_checkpoint(&v2, None), Err(Error::State(_))));
    }
}
