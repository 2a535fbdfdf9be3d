//! Binary checkpoints: a 16-byte header then little-endian fields in a fixed order.

use std::path::Path;

use super::train::{Model, TrainState};
use crate::colorspace::ViewColorMatrix;
use crate::error::{Error, Result};
use crate::generators::{GeneratorWeights, Head};
use crate::optim::{AdamState, Moments};
use crate::refine::GradAccumulator;
use crate::render::RenderConfig;
use crate::scene::GaussianCloud;
use crate::tonecurve::GlobalCurve;

pub const MAGIC: &[u8; 8] = b"LUMIGSCK";
pub const VERSION: u32 = 1;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.f64(x);
        }
    }
    fn u32s(&mut self, v: &[u32]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.u32(x);
        }
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Data("checkpoint is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.checked_mul(elem).map_or(true, |b| b > self.buf.len() - self.pos) {
            return Err(Error::Data("checkpoint length field out of range".into()));
        }
        Ok(n)
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn u32s(&mut self) -> Result<Vec<u32>> {
        let n = self.len(4)?;
        (0..n).map(|_| self.u32()).collect()
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len(1)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Data("checkpoint string is not UTF-8".into()))
    }
}

fn write_generator(w: &mut Writer, g: &GeneratorWeights) {
    w.u32(match g.head {
        Head::CurveBias => 0,
        Head::PriorParams => 1,
    });
    for (_, t) in g.tensors() {
        w.f64s(t);
    }
}

fn read_generator(r: &mut Reader) -> Result<GeneratorWeights> {
    let head = match r.u32()? {
        0 => Head::CurveBias,
        1 => Head::PriorParams,
        h => return Err(Error::Data(format!("checkpoint: unknown generator head {h}"))),
    };
    let mut g = GeneratorWeights::zeros(head);
    for t in g.tensors_mut() {
        let v = r.f64s()?;
        if v.len() != t.len() {
            return Err(Error::Data("checkpoint: generator tensor has the wrong size".into()));
        }
        *t = v;
    }
    Ok(g)
}

pub fn to_bytes(s: &TrainState) -> Vec<u8> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u32(0);
    w.u64(s.iteration);
    let rc = &s.render;
    for v in [rc.blur_floor, rc.near, rc.truncation_sigma, rc.min_transmittance] {
        w.f64(v);
    }
    for v in rc.background {
        w.f64(v);
    }
    let c = &s.model.cloud;
    for field in [
        &c.positions,
        &c.log_scales,
        &c.rotations,
        &c.opacity_logits,
        &c.color_logits,
        &c.color_gains,
        &c.color_offsets,
    ] {
        w.f64s(field);
    }
    w.f64s(&s.model.global_curve.values);
    w.u64(s.model.matrices.len() as u64);
    for m in &s.model.matrices {
        for v in m.m {
            w.f64(v);
        }
    }
    write_generator(&mut w, &s.model.curve_gen);
    write_generator(&mut w, &s.model.param_gen);
    w.f64(s.adam.beta1);
    w.f64(s.adam.beta2);
    w.f64(s.adam.eps);
    w.u64(s.adam.slots.len() as u64);
    for (name, m) in &s.adam.slots {
        w.str(name);
        w.u64(m.step);
        w.f64s(&m.m);
        w.f64s(&m.v);
    }
    w.f64s(&s.acc.sum);
    w.u32s(&s.acc.count);
    w.buf
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Data("not a checkpoint file".into()));
    }
    let mut r = Reader { buf: bytes, pos: 8 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    r.u32()?;
    let iteration = r.u64()?;
    let render = RenderConfig {
        blur_floor: r.f64()?,
        near: r.f64()?,
        truncation_sigma: r.f64()?,
        min_transmittance: r.f64()?,
        background: [r.f64()?, r.f64()?, r.f64()?],
    };
    let cloud = GaussianCloud {
        positions: r.f64s()?,
        log_scales: r.f64s()?,
        rotations: r.f64s()?,
        opacity_logits: r.f64s()?,
        color_logits: r.f64s()?,
        color_gains: r.f64s()?,
        color_offsets: r.f64s()?,
    };
    let n = cloud.count();
    let sizes = [
        cloud.positions.len(),
        cloud.log_scales.len(),
        cloud.rotations.len() * 3 / 4,
        cloud.color_logits.len(),
        cloud.color_gains.len(),
        cloud.color_offsets.len(),
    ];
    if sizes.iter().any(|&s| s != 3 * n) || cloud.rotations.len() != 4 * n {
        return Err(Error::Data("checkpoint: inconsistent Gaussian field sizes".into()));
    }
    let global_curve = GlobalCurve { values: r.f64s()? };
    let nm = r.len(72)?;
    let mut matrices = Vec::with_capacity(nm);
    for _ in 0..nm {
        let mut m = [0.0; 9];
        for v in m.iter_mut() {
            *v = r.f64()?;
        }
        matrices.push(ViewColorMatrix { m });
    }
    let curve_gen = read_generator(&mut r)?;
    let param_gen = read_generator(&mut r)?;
    let mut adam = AdamState {
        beta1: r.f64()?,
        beta2: r.f64()?,
        eps: r.f64()?,
        ..Default::default()
    };
    let slots = r.len(1)?;
    for _ in 0..slots {
        let name = r.str()?;
        let step = r.u64()?;
        let m = r.f64s()?;
        let v = r.f64s()?;
        adam.slots.insert(name, Moments { m, v, step });
    }
    let acc = GradAccumulator {
        sum: r.f64s()?,
        count: r.u32s()?,
    };
    if r.pos != bytes.len() {
        return Err(Error::Data("checkpoint has trailing bytes".into()));
    }
    Ok(TrainState {
        iteration,
        render,
        model: Model {
            cloud,
            global_curve,
            matrices,
            curve_gen,
            param_gen,
        },
        adam,
        acc,
    })
}

/// Writes through a temporary file so an interrupted save keeps the old checkpoint.
pub fn save_checkpoint(path: &Path, s: &TrainState) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, to_bytes(s)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Data(format!("missing checkpoint {}", path.display()))
        } else {
            Error::io(path, e)
        }
    })?;
    from_bytes(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{new_cloud_random, Aabb};

    fn state() -> TrainState {
        let mut adam = AdamState::new();
        adam.slots.insert(
            "positions".into(),
            Moments {
                m: vec![0.1, -0.2, 0.3],
                v: vec![1e-3, 2e-3, 3e-3],
                step: 7,
            },
        );
        let mut acc = GradAccumulator::new(3);
        acc.add(&[0.5, 0.0, 1.5]);
        let mut global_curve = GlobalCurve::identity();
        global_curve.values[10] = 0.5;
        TrainState {
            iteration: 1234,
            render: RenderConfig::default(),
            model: Model {
                cloud: new_cloud_random(3, Aabb::unit(), 5).unwrap(),
                global_curve,
                matrices: vec![ViewColorMatrix::identity(), ViewColorMatrix::diagonal([1.1, 0.9, 1.0])],
                curve_gen: GeneratorWeights::random(Head::CurveBias, 1, 0.5),
                param_gen: GeneratorWeights::random(Head::PriorParams, 2, 0.5),
            },
            adam,
            acc,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let s = state();
        let bytes = to_bytes(&s);
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), VERSION);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn file_round_trip() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("c.bin");
        save_checkpoint(&p, &state()).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), state());
        assert!(!p.with_extension("tmp").exists());
    }

    #[test]
    fn rejects_damage() {
        let bytes = to_bytes(&state());
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Data(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(from_bytes(&extra), Err(Error::Data(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Data(_))));
        let mut ver = bytes;
        ver[8] = 99;
        assert!(matches!(from_bytes(&ver), Err(Error::Data(_))));
        let d = tempfile::tempdir().unwrap();
        assert!(matches!(load_checkpoint(&d.path().join("none.bin")), Err(Error::Data(_))));
    }
}
