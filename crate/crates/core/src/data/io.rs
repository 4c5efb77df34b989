//! Dataset files.
//!
//! CSV is for inspection and plotting. Trajectory CSVs have one row per
//! observation with columns `split,series_id,t0,t,x0..x{d-1},target0..`,
//! event CSVs have `sequence_id,event_index,t` and density CSVs `x,y,component`.
//!
//! The binary container is what the tools read back:
//!
//! ```text
//! magic    8 bytes  "NFLOWDS\0"
//! version  u32      FORMAT_VERSION
//! kind     u8       1 trajectories, 2 events, 3 density
//! length   u64      payload bytes
//! payload  ...      little-endian, layout per kind (see `encode`)
//! sha256   32 bytes digest of the payload
//! ```

use std::io::Write;

use sha2::{Digest, Sha256};

use super::{DensityDataset2D, EventSequenceDataset, Split, TppKind, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"NFLOWDS\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Trajectories(Vec<TrajectoryDataset>),
    Events(EventSequenceDataset),
    Density(DensityDataset2D),
}

impl Dataset {
    fn code(&self) -> u8 {
        match self {
            Dataset::Trajectories(_) => 1,
            Dataset::Events(_) => 2,
            Dataset::Density(_) => 3,
        }
    }

    /// Number of CSV data rows.
    pub fn row_count(&self) -> usize {
        match self {
            Dataset::Trajectories(v) => v.iter().map(|d| d.targets.rows()).sum(),
            Dataset::Events(e) => e.num_events(),
            Dataset::Density(d) => d.len(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_csv<W: Write>(ds: &Dataset, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    match ds {
        Dataset::Trajectories(sets) => {
            let d = sets.first().map_or(0, |s| s.dim);
            let mut header = vec!["split".to_string(), "series_id".into(), "t0".into(), "t".into()];
            header.extend((0..d).map(|k| format!("x{k}")));
            header.extend((0..d).map(|k| format!("target{k}")));
            out.write_record(&header).map_err(csv_err)?;
            for set in sets {
                if set.dim != d {
                    return Err(Error::Invalid("all splits must share one dimension".into()));
                }
                for i in 0..set.len() {
                    for j in 0..set.m() {
                        let mut row = vec![
                            set.split.as_str().to_string(),
                            i.to_string(),
                            set.start[i].to_string(),
                            set.times.get(i, j).to_string(),
                        ];
                        row.extend(set.x0.row_slice(i).iter().map(f64::to_string));
                        row.extend(set.targets.row_slice(i * set.m() + j).iter().map(f64::to_string));
                        out.write_record(&row).map_err(csv_err)?;
                    }
                }
            }
        }
        Dataset::Events(ev) => {
            out.write_record(["sequence_id", "event_index", "t"]).map_err(csv_err)?;
            for (i, seq) in ev.sequences.iter().enumerate() {
                for (j, t) in seq.iter().enumerate() {
                    out.write_record([i.to_string(), j.to_string(), t.to_string()]).map_err(csv_err)?;
                }
            }
        }
        Dataset::Density(dd) => {
            out.write_record(["x", "y", "component"]).map_err(csv_err)?;
            for i in 0..dd.len() {
                let r = dd.samples.row_slice(i);
                out.write_record([r[0].to_string(), r[1].to_string(), dd.component[i].to_string()])
                    .map_err(csv_err)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Invalid("dataset container is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Invalid("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Invalid("bad utf-8 in container".into()))
    }
}

/// Serializes `ds` into the checksummed binary container.
pub fn encode(ds: &Dataset) -> Vec<u8> {
    // Payload layouts (all counts u32):
    //   trajectories: count, then per split name, split code u8, dim, n, m,
    //                 start[n], x0[n·d], times[n·m], targets[n·m·d]
    //   events:       kind as JSON, n_seq, has_nll u8, per sequence len and
    //                 times, then nll[n_seq] when present
    //   density:      gaussian_std, radius, noise, weight, n, samples[2n],
    //                 component[n] as bytes
    let mut p = Enc(Vec::new());
    match ds {
        Dataset::Trajectories(sets) => {
            p.u32(sets.len());
            for s in sets {
                p.str(&s.name);
                p.u8(s.split.code());
                p.u32(s.dim);
                p.u32(s.len());
                p.u32(s.m());
                p.f64s(&s.start);
                p.f64s(s.x0.data());
                p.f64s(s.times.data());
                p.f64s(s.targets.data());
            }
        }
        Dataset::Events(ev) => {
            p.str(&serde_json::to_string(&ev.kind).expect("kind serializes"));
            p.u32(ev.sequences.len());
            p.u8(ev.nll.is_some() as u8);
            for seq in &ev.sequences {
                p.u32(seq.len());
                p.f64s(seq);
            }
            if let Some(nll) = &ev.nll {
                p.f64s(nll);
            }
        }
        Dataset::Density(d) => {
            p.f64s(&[d.gaussian_std, d.circle_radius, d.circle_noise, d.weight]);
            p.u32(d.len());
            p.f64s(d.samples.data());
            p.0.extend_from_slice(&d.component);
        }
    }
    let payload = p.0;
    let mut out = Vec::with_capacity(payload.len() + 53);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(ds.code());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&Sha256::digest(&payload));
    out
}

pub fn decode(bytes: &[u8]) -> Result<Dataset> {
    let bad = |m: &str| Error::Invalid(format!("dataset container: {m}"));
    if bytes.len() < 21 + 32 || &bytes[..8] != MAGIC {
        return Err(bad("missing header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let kind = bytes[12];
    let len = u64::from_le_bytes(bytes[13..21].try_into().expect("8 bytes")) as usize;
    if bytes.len() != 21 + len + 32 {
        return Err(bad("length does not match header"));
    }
    let payload = &bytes[21..21 + len];
    if Sha256::digest(payload).as_slice() != &bytes[21 + len..] {
        return Err(bad("checksum mismatch"));
    }
    let mut r = Dec { buf: payload, pos: 0 };
    let ds = match kind {
        1 => {
            let count = r.u32()?;
            let mut sets = Vec::with_capacity(count.min(16));
            for _ in 0..count {
                let name = r.str()?;
                let split = Split::from_code(r.u8()?).ok_or_else(|| bad("unknown split"))?;
                let (dim, n, m) = (r.u32()?, r.u32()?, r.u32()?);
                let start = r.f64s(n)?;
                let x0 = Tensor::raw(n, dim, r.f64s(n * dim)?);
                let times = Tensor::raw(n, m, r.f64s(n * m)?);
                let targets = Tensor::raw(n * m, dim, r.f64s(n * m * dim)?);
                let s = TrajectoryDataset { name, split, dim, start, x0, times, targets };
                s.validate()?;
                sets.push(s);
            }
            Dataset::Trajectories(sets)
        }
        2 => {
            let kind: TppKind = serde_json::from_str(&r.str()?)?;
            let n = r.u32()?;
            let has_nll = r.u8()? != 0;
            let mut sequences = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                let k = r.u32()?;
                sequences.push(r.f64s(k)?);
            }
            let nll = if has_nll { Some(r.f64s(n)?) } else { None };
            let ev = EventSequenceDataset { kind, sequences, nll };
            ev.validate()?;
            Dataset::Events(ev)
        }
        3 => {
            let p = r.f64s(4)?;
            let n = r.u32()?;
            let samples = Tensor::raw(n, 2, r.f64s(2 * n)?);
            let component = r.take(n)?.to_vec();
            Dataset::Density(DensityDataset2D {
                samples,
                component,
                gaussian_std: p[0],
                circle_radius: p[1],
                circle_noise: p[2],
                weight: p[3],
            })
        }
        k => return Err(bad(&format!("unknown kind {k}"))),
    };
    if r.pos != payload.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(ds)
}

pub fn save(ds: &Dataset, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, encode(ds))?;
    Ok(())
}

pub fn load(path: &std::path::Path) -> Result<Dataset> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_density2d, gen_periodic, gen_stiff, gen_tpp, PeriodicKind};

    fn samples() -> Vec<Dataset> {
        let p = gen_periodic(PeriodicKind::Square, 10, 3, 1, (-2.0, 2.0), (0.0, 10.0)).unwrap();
        let s = gen_stiff(0.125, 15.0, 10, 1).unwrap();
        vec![
            Dataset::Trajectories(p.iter().cloned().collect()),
            Dataset::Trajectories(s.iter().cloned().collect()),
            Dataset::Events(gen_tpp(&TppKind::hawkes2(), 4, 7, 1).unwrap()),
            Dataset::Density(gen_density2d(25, 1).unwrap()),
        ]
    }

    #[test]
    fn binary_round_trip_is_exact() {
        for ds in samples() {
            let bytes = encode(&ds);
            assert_eq!(decode(&bytes).unwrap(), ds);
            assert_eq!(sha256_hex(&bytes), sha256_hex(&encode(&ds)));
        }
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode(&samples()[0]);
        let mut flipped = bytes.clone();
        flipped[30] ^= 1;
        assert!(decode(&flipped).unwrap_err().to_string().contains("checksum"));
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut version = bytes.clone();
        version[8] = 9;
        assert!(decode(&version).unwrap_err().to_string().contains("version"));
        assert!(decode(b"nope").is_err());
    }

    #[test]
    fn csv_headers_and_row_counts() {
        for ds in samples() {
            let mut buf = Vec::new();
            write_csv(&ds, &mut buf).unwrap();
            let text = String::from_utf8(buf).unwrap();
            let mut lines = text.lines();
            let header = lines.next().unwrap();
            match &ds {
                Dataset::Trajectories(_) => assert_eq!(header, "split,series_id,t0,t,x0,target0"),
                Dataset::Events(_) => assert_eq!(header, "sequence_id,event_index,t"),
                Dataset::Density(_) => assert_eq!(header, "x,y,component"),
            }
            assert_eq!(lines.count(), ds.row_count());
        }
    }

    #[test]
    fn sha256_known_value() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
