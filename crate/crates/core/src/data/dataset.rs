//! Binary dataset container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic   b"FPDS"
//! version u32 (= 1)
//! count   u64
//! count × {
//!     length  u64            byte length of the record that follows
//!     T, J, N, B  u32 each
//!     fps, s, tx, ty  f64 each
//!     beta       B f64
//!     theta      T·J·3 f64   axis-angle
//!     joints3d   T·J·3 f64
//!     vertices   T·N·3 f64
//!     clean_kp   T·J·2 f64
//!     kp         T·J·2 f64
//!     conf       T·J f64
//! }
//! ```

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::camera::CameraParams;
use crate::data::generator::SyntheticSequence;
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"FPDS";
pub const DATASET_VERSION: u32 = 1;

fn record_len(t: usize, j: usize, n: usize, b: usize) -> usize {
    16 + 32 + 8 * (b + t * j * 3 * 2 + t * n * 3 + t * j * 2 * 2 + t * j)
}

fn put3(out: &mut Vec<u8>, rows: &[Vec<[f64; 3]>]) {
    for v in rows.iter().flatten().flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put2(out: &mut Vec<u8>, rows: &[Vec<[f64; 2]>]) {
    for v in rows.iter().flatten().flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode(seq: &SyntheticSequence) -> Result<Vec<u8>> {
    let t = seq.frames();
    let j = seq.joints();
    let n = seq.vertices.first().map_or(0, |v| v.len());
    let b = seq.beta.len();
    let consistent = seq.joints3d.len() == t
        && seq.vertices.len() == t
        && seq.clean_keypoints.len() == t
        && seq.keypoints.len() == t
        && seq.confidence.len() == t
        && (0..t).all(|f| {
            seq.theta[f].len() == j
                && seq.joints3d[f].len() == j
                && seq.vertices[f].len() == n
                && seq.clean_keypoints[f].len() == j
                && seq.keypoints[f].len() == j
                && seq.confidence[f].len() == j
        });
    if !consistent {
        return Err(Error::Parse("sequence arrays have inconsistent extents".into()));
    }
    let mut out = Vec::with_capacity(record_len(t, j, n, b));
    for x in [t, j, n, b] {
        out.extend_from_slice(&(x as u32).to_le_bytes());
    }
    for x in [seq.fps, seq.cam.s, seq.cam.t[0], seq.cam.t[1]] {
        out.extend_from_slice(&x.to_le_bytes());
    }
    for x in &seq.beta {
        out.extend_from_slice(&x.to_le_bytes());
    }
    put3(&mut out, &seq.theta);
    put3(&mut out, &seq.joints3d);
    put3(&mut out, &seq.vertices);
    put2(&mut out, &seq.clean_keypoints);
    put2(&mut out, &seq.keypoints);
    for v in seq.confidence.iter().flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    debug_assert_eq!(out.len(), record_len(t, j, n, b));
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> &[u8] {
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        s
    }

    fn u32(&mut self) -> usize {
        u32::from_le_bytes(self.take(4).try_into().expect("4 bytes")) as usize
    }

    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take(8).try_into().expect("8 bytes"))
    }

    fn rows<const K: usize>(&mut self, t: usize, per: usize) -> Vec<Vec<[f64; K]>> {
        (0..t)
            .map(|_| {
                (0..per)
                    .map(|_| {
                        let mut v = [0.0; K];
                        for x in v.iter_mut() {
                            *x = self.f64();
                        }
                        v
                    })
                    .collect()
            })
            .collect()
    }
}

fn decode(buf: &[u8], index: usize) -> Result<SyntheticSequence> {
    if buf.len() < 16 {
        return Err(Error::Truncated(format!("record {index} is shorter than its header")));
    }
    let mut c = Cursor { buf, pos: 0 };
    let (t, j, n, b) = (c.u32(), c.u32(), c.u32(), c.u32());
    if t == 0 || j == 0 || n == 0 {
        return Err(Error::Parse(format!("record {index} has an empty extent")));
    }
    if buf.len() != record_len(t, j, n, b) {
        return Err(Error::Truncated(format!(
            "record {index} holds {} bytes, its header implies {}",
            buf.len(),
            record_len(t, j, n, b)
        )));
    }
    let fps = c.f64();
    let (s, tx, ty) = (c.f64(), c.f64(), c.f64());
    let beta = (0..b).map(|_| c.f64()).collect();
    let theta = c.rows::<3>(t, j);
    let joints3d = c.rows::<3>(t, j);
    let vertices = c.rows::<3>(t, n);
    let clean_keypoints = c.rows::<2>(t, j);
    let keypoints = c.rows::<2>(t, j);
    let confidence = (0..t).map(|_| (0..j).map(|_| c.f64()).collect()).collect();
    Ok(SyntheticSequence {
        fps,
        theta,
        beta,
        cam: CameraParams::new(s, [tx, ty])?,
        joints3d,
        vertices,
        clean_keypoints,
        keypoints,
        confidence,
    })
}

pub fn write_dataset_to(seqs: &[SyntheticSequence], mut w: impl Write) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(seqs.len() as u64).to_le_bytes())?;
    for s in seqs {
        let rec = encode(s)?;
        w.write_all(&(rec.len() as u64).to_le_bytes())?;
        w.write_all(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset(seqs: &[SyntheticSequence], path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_dataset_to(seqs, BufWriter::new(f))
}

fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated(format!("unexpected end of file in {what}")),
        _ => Error::Io(e),
    })
}

pub fn read_dataset_from(mut r: impl Read) -> Result<Vec<SyntheticSequence>> {
    let mut head = [0u8; 16];
    read_exact_or_truncated(&mut r, &mut head, "file header")?;
    if &head[..4] != DATASET_MAGIC {
        return Err(Error::Parse("not a dataset file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
    if version != DATASET_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let count = u64::from_le_bytes(head[8..16].try_into().expect("8 bytes"));
    let mut out = Vec::new();
    for i in 0..count as usize {
        let mut len = [0u8; 8];
        read_exact_or_truncated(&mut r, &mut len, &format!("length of record {i}"))?;
        let len = u64::from_le_bytes(len) as usize;
        // The record header tells how large the record must be; check it
        // before trusting `len` with an allocation.
        let mut hdr = [0u8; 16];
        if len < 16 {
            return Err(Error::Truncated(format!("record {i} declares {len} bytes")));
        }
        read_exact_or_truncated(&mut r, &mut hdr, &format!("record {i}"))?;
        let dims: Vec<usize> = hdr
            .chunks(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect();
        let expect = record_len(dims[0], dims[1], dims[2], dims[3]);
        if len != expect {
            return Err(Error::Truncated(format!(
                "record {i} declares {len} bytes, its header implies {expect}"
            )));
        }
        let mut rec = vec![0u8; len];
        rec[..16].copy_from_slice(&hdr);
        read_exact_or_truncated(&mut r, &mut rec[16..], &format!("record {i}"))?;
        out.push(decode(&rec, i)?);
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Parse("trailing bytes after the last record".into()));
    }
    Ok(out)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<SyntheticSequence>> {
    let f = std::fs::File::open(path)?;
    read_dataset_from(BufReader::new(f))
}
