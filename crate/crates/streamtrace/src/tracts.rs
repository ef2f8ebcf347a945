//! Tractogram container, TCK binary format read/write, the seed-index
//! sidecar, and reproducible subsampling.
//!
//! TCK layout: a text header starting with the line `mrtrix tracks`,
//! `key: value` lines until `END`, binary section at the byte offset named by
//! `file: . <offset>` holding consecutive little-endian float32 (x, y, z)
//! triplets. A triplet of three NaNs ends a streamline; a triplet of three
//! +Inf ends the file. Only `datatype: Float32LE` is supported.
//!
//! TCK stores no seed information, so seed indices live in a plain-text
//! sidecar (one nonnegative integer per line, line i = seed index of
//! streamline i). Without a sidecar every seed index defaults to 0.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Point3, Streamline};
use crate::rng::Xoshiro256StarStar;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Tractogram {
    pub streamlines: Vec<Streamline>,
    /// Free-text provenance, e.g. "2mm MNI".
    pub space_note: String,
}

impl Tractogram {
    pub fn new(streamlines: Vec<Streamline>) -> Self {
        Tractogram {
            streamlines,
            space_note: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.streamlines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streamlines.is_empty()
    }
}

/// Read a TCK track file.
pub fn read_tck(path: impl AsRef<Path>) -> Result<Tractogram> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_tck(&bytes, path)
}

/// Parse TCK bytes; `path` is only used for error reporting.
pub fn parse_tck(bytes: &[u8], path: &Path) -> Result<Tractogram> {
    const MAGIC: &[u8] = b"mrtrix tracks";
    if !bytes.starts_with(MAGIC) {
        return Err(Error::BadMagic {
            path: path.into(),
            format: "TCK",
        });
    }

    // Header is ASCII lines up to and including "END". Scan raw bytes so a
    // malformed file cannot drag non-UTF-8 into the parse.
    let mut offset: Option<u64> = None;
    let mut datatype: Option<String> = None;
    let mut saw_end = false;
    let mut pos = 0usize;
    while pos < bytes.len() {
        let line_end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| pos + i)
            .unwrap_or(bytes.len());
        let line = String::from_utf8_lossy(&bytes[pos..line_end]);
        let line = line.trim();
        if line == "END" {
            saw_end = true;
            break;
        }
        if let Some((key, value)) = line.split_once(':') {
            let key = key.trim();
            let value = value.trim();
            match key {
                "datatype" => datatype = Some(value.to_string()),
                "file" => {
                    // "file: . <offset>"
                    let mut it = value.split_whitespace();
                    let dot = it.next();
                    let off = it.next();
                    if dot != Some(".") {
                        return Err(Error::MalformedHeader {
                            path: path.into(),
                            reason: format!("unsupported file field {value:?}"),
                        });
                    }
                    offset = off.and_then(|s| s.parse().ok());
                    if offset.is_none() {
                        return Err(Error::MalformedHeader {
                            path: path.into(),
                            reason: format!("bad offset in file field {value:?}"),
                        });
                    }
                }
                _ => {}
            }
        }
        pos = line_end + 1;
        // Guard: header must end before the binary section would plausibly
        // start; a missing END otherwise scans the whole binary body.
        if pos > 1 << 20 {
            break;
        }
    }

    if !saw_end {
        return Err(Error::MalformedHeader {
            path: path.into(),
            reason: "missing END line".into(),
        });
    }
    let datatype = datatype.ok_or_else(|| Error::MalformedHeader {
        path: path.into(),
        reason: "missing datatype field".into(),
    })?;
    if datatype != "Float32LE" {
        return Err(Error::UnsupportedDatatype {
            path: path.into(),
            datatype,
        });
    }
    let offset = offset.ok_or_else(|| Error::MalformedHeader {
        path: path.into(),
        reason: "missing file field".into(),
    })? as usize;

    if offset > bytes.len() {
        return Err(Error::Truncated {
            path: path.into(),
            expected: offset,
            actual: bytes.len(),
        });
    }

    let body = &bytes[offset..];
    let mut streamlines = Vec::new();
    let mut current: Vec<Point3> = Vec::new();
    let mut terminated = false;
    let mut i = 0usize;
    while i + 12 <= body.len() {
        let x = f32::from_le_bytes(body[i..i + 4].try_into().unwrap());
        let y = f32::from_le_bytes(body[i + 4..i + 8].try_into().unwrap());
        let z = f32::from_le_bytes(body[i + 8..i + 12].try_into().unwrap());
        i += 12;
        if x.is_nan() && y.is_nan() && z.is_nan() {
            finish_streamline(&mut current, &mut streamlines, path)?;
            continue;
        }
        if x == f32::INFINITY && y == f32::INFINITY && z == f32::INFINITY {
            terminated = true;
            break;
        }
        if !x.is_finite() || !y.is_finite() || !z.is_finite() {
            return Err(Error::NonFiniteStreamline {
                index: streamlines.len(),
            });
        }
        current.push(Point3::new(x as f64, y as f64, z as f64));
    }
    if !terminated {
        return Err(Error::Truncated {
            path: path.into(),
            expected: bytes.len() + 12,
            actual: bytes.len(),
        });
    }

    Ok(Tractogram::new(streamlines))
}

fn finish_streamline(
    current: &mut Vec<Point3>,
    streamlines: &mut Vec<Streamline>,
    path: &Path,
) -> Result<()> {
    if current.is_empty() {
        return Ok(());
    }
    let pts = std::mem::take(current);
    match Streamline::from_raw(pts, 0) {
        Some(s) => {
            streamlines.push(s);
            Ok(())
        }
        None => Err(Error::MalformedHeader {
            path: path.into(),
            reason: format!(
                "streamline {} has fewer than 2 distinct points",
                streamlines.len()
            ),
        }),
    }
}

/// Write a TCK track file (header + Float32LE triplets, NaN separators, Inf
/// terminator).
pub fn write_tck(t: &Tractogram, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();

    let mut body = Vec::new();
    for s in &t.streamlines {
        for p in s.points() {
            body.extend_from_slice(&(p.x as f32).to_le_bytes());
            body.extend_from_slice(&(p.y as f32).to_le_bytes());
            body.extend_from_slice(&(p.z as f32).to_le_bytes());
        }
        for _ in 0..3 {
            body.extend_from_slice(&f32::NAN.to_le_bytes());
        }
    }
    for _ in 0..3 {
        body.extend_from_slice(&f32::INFINITY.to_le_bytes());
    }

    // The offset depends on the header length which depends on the offset;
    // pad the offset field to a fixed width instead of iterating.
    let mut header = String::new();
    header.push_str("mrtrix tracks\n");
    header.push_str("datatype: Float32LE\n");
    header.push_str(&format!("count: {}\n", t.streamlines.len()));
    if !t.space_note.is_empty() {
        header.push_str(&format!("space_note: {}\n", t.space_note));
    }
    // Fixed 10-digit offset field sidesteps the header-length/offset cycle.
    let offset = header.len() + "file: . ".len() + 10 + "\nEND\n".len();
    header.push_str(&format!("file: . {offset:010}\nEND\n"));

    let mut out = header.into_bytes();
    debug_assert_eq!(out.len(), offset);
    out.extend_from_slice(&body);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read a seed-index sidecar: one nonnegative integer per line.
pub fn read_seeds(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_seeds(&bytes, path)
}

/// Parse seed-sidecar bytes; `path` is only used for error reporting.
pub fn parse_seeds(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let text = String::from_utf8_lossy(bytes);
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: usize = line.parse().map_err(|_| Error::MalformedHeader {
            path: path.into(),
            reason: format!("line {}: not a nonnegative integer: {line:?}", lineno + 1),
        })?;
        out.push(v);
    }
    Ok(out)
}

/// Write a seed-index sidecar.
pub fn write_seeds(seeds: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for s in seeds {
        text.push_str(&format!("{s}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Attach seed indices from a sidecar to a tractogram, validating counts and
/// ranges.
pub fn attach_seeds(t: &Tractogram, seeds: &[usize]) -> Result<Tractogram> {
    if seeds.len() != t.len() {
        return Err(Error::SeedCountMismatch {
            seeds: seeds.len(),
            streamlines: t.len(),
        });
    }
    let mut streamlines = Vec::with_capacity(t.len());
    for (i, (s, &seed)) in t.streamlines.iter().zip(seeds).enumerate() {
        let sl = Streamline::new(s.points().to_vec(), seed).map_err(|e| {
            Error::InvalidStreamline(format!("streamline {i}: {e}"))
        })?;
        streamlines.push(sl);
    }
    Ok(Tractogram {
        streamlines,
        space_note: t.space_note.clone(),
    })
}

/// Uniform sample of `k` streamlines without replacement, preserving the
/// original relative order. Deterministic for a fixed `rng_seed`.
pub fn sample(t: &Tractogram, k: usize, rng_seed: u64) -> Result<Tractogram> {
    if k > t.len() {
        return Err(Error::SampleTooLarge {
            requested: k,
            available: t.len(),
        });
    }
    let mut rng = Xoshiro256StarStar::seed_from_u64(rng_seed);
    let chosen = rng.sample_indices(t.len(), k);
    let streamlines = chosen.iter().map(|&i| t.streamlines[i].clone()).collect();
    Ok(Tractogram {
        streamlines,
        space_note: t.space_note.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn toy_tractogram() -> Tractogram {
        let s1 = Streamline::new(
            vec![Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 0.5, -0.25)],
            0,
        )
        .unwrap();
        let s2 = Streamline::new(
            vec![
                Point3::new(5.0, 5.0, 5.0),
                Point3::new(6.0, 5.0, 5.0),
                Point3::new(7.0, 5.5, 5.0),
            ],
            1,
        )
        .unwrap();
        Tractogram::new(vec![s1, s2])
    }

    #[test]
    fn tck_roundtrip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("t.tck");
        let t = toy_tractogram();
        write_tck(&t, &p).unwrap();
        let r = read_tck(&p).unwrap();
        assert_eq!(r.len(), 2);
        for (a, b) in r.streamlines.iter().zip(&t.streamlines) {
            assert_eq!(a.len(), b.len());
            for (pa, pb) in a.points().iter().zip(b.points()) {
                // written as f32: compare against the f32 rounding
                assert_eq!(pa.x, pb.x as f32 as f64);
                assert_eq!(pa.y, pb.y as f32 as f64);
                assert_eq!(pa.z, pb.z as f32 as f64);
            }
        }
    }

    #[test]
    fn tck_empty_roundtrip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("e.tck");
        write_tck(&Tractogram::default(), &p).unwrap();
        let r = read_tck(&p).unwrap();
        assert!(r.is_empty());
    }

    #[test]
    fn tck_count_field_matches() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("c.tck");
        write_tck(&toy_tractogram(), &p).unwrap();
        let text = fs::read(&p).unwrap();
        let head = String::from_utf8_lossy(&text[..text.len().min(200)]);
        assert!(head.contains("count: 2\n"));
    }

    #[test]
    fn tck_hand_built_two_streamlines() {
        // Author the bytes manually: 2-point and 3-point streamlines.
        let dir = tempdir().unwrap();
        let p = dir.path().join("hand.tck");
        let header = "mrtrix tracks\ndatatype: Float32LE\nfile: . 60\nEND\n";
        assert!(header.len() <= 60);
        let mut bytes = header.as_bytes().to_vec();
        bytes.resize(60, b'\n');
        let coords: [[f32; 3]; 5] = [
            [1.0, 2.0, 3.0],
            [4.0, 5.0, 6.0],
            [10.0, 10.0, 10.0],
            [11.0, 10.0, 10.0],
            [12.0, 11.0, 10.0],
        ];
        for (i, c) in coords.iter().enumerate() {
            for v in c {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            if i == 1 {
                for _ in 0..3 {
                    bytes.extend_from_slice(&f32::NAN.to_le_bytes());
                }
            }
        }
        for _ in 0..3 {
            bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        }
        for _ in 0..3 {
            bytes.extend_from_slice(&f32::INFINITY.to_le_bytes());
        }
        fs::write(&p, &bytes).unwrap();
        let t = read_tck(&p).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.streamlines[0].len(), 2);
        assert_eq!(t.streamlines[1].len(), 3);
        assert_eq!(t.streamlines[0].points()[0], Point3::new(1.0, 2.0, 3.0));
        assert_eq!(t.streamlines[1].points()[2], Point3::new(12.0, 11.0, 10.0));
    }

    #[test]
    fn tck_inf_only_body_is_empty() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("inf.tck");
        let header = "mrtrix tracks\ndatatype: Float32LE\nfile: . 50\nEND\n";
        let mut bytes = header.as_bytes().to_vec();
        bytes.resize(50, b'\n');
        for _ in 0..3 {
            bytes.extend_from_slice(&f32::INFINITY.to_le_bytes());
        }
        fs::write(&p, &bytes).unwrap();
        let t = read_tck(&p).unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn tck_missing_magic() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.tck");
        fs::write(&p, b"not tracks\nEND\n").unwrap();
        assert!(matches!(read_tck(&p), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn tck_unsupported_datatype() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("dt.tck");
        fs::write(&p, b"mrtrix tracks\ndatatype: Float64BE\nfile: . 60\nEND\n").unwrap();
        assert!(matches!(
            read_tck(&p),
            Err(Error::UnsupportedDatatype { .. })
        ));
    }

    #[test]
    fn tck_missing_end() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("noend.tck");
        fs::write(&p, b"mrtrix tracks\ndatatype: Float32LE\nfile: . 60\n").unwrap();
        assert!(matches!(read_tck(&p), Err(Error::MalformedHeader { .. })));
    }

    #[test]
    fn tck_truncated_binary() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("trunc.tck");
        write_tck(&toy_tractogram(), &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 12]).unwrap(); // drop Inf triplet
        assert!(matches!(read_tck(&p), Err(Error::Truncated { .. })));
    }

    #[test]
    fn seeds_roundtrip_and_mismatch() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("t.seeds.txt");
        write_seeds(&[0, 1], &p).unwrap();
        assert_eq!(read_seeds(&p).unwrap(), vec![0, 1]);

        let t = toy_tractogram();
        let attached = attach_seeds(&t, &[1, 2]).unwrap();
        assert_eq!(attached.streamlines[0].seed_index(), 1);
        assert_eq!(attached.streamlines[1].seed_index(), 2);
        assert!(matches!(
            attach_seeds(&t, &[0]),
            Err(Error::SeedCountMismatch { .. })
        ));
    }

    #[test]
    fn seeds_all_zero() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("z.seeds.txt");
        write_seeds(&[0, 0], &p).unwrap();
        let t = attach_seeds(&toy_tractogram(), &read_seeds(&p).unwrap()).unwrap();
        assert!(t.streamlines.iter().all(|s| s.seed_index() == 0));
    }

    fn random_tractogram(n: usize, seed: u64) -> Tractogram {
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let streamlines = (0..n)
            .map(|_| {
                let a = Point3::new(rng.uniform(0.0, 20.0), rng.uniform(0.0, 20.0), 0.0);
                let b = Point3::new(a.x + rng.uniform(1.0, 5.0), a.y, a.z);
                Streamline::new(vec![a, b], 0).unwrap()
            })
            .collect();
        Tractogram::new(streamlines)
    }

    #[test]
    fn sample_identity_and_empty() {
        let t = random_tractogram(10, 1);
        let all = sample(&t, 10, 99).unwrap();
        for (a, b) in all.streamlines.iter().zip(&t.streamlines) {
            assert_eq!(a, b);
        }
        assert!(sample(&t, 0, 99).unwrap().is_empty());
        assert!(matches!(
            sample(&t, 11, 99),
            Err(Error::SampleTooLarge { .. })
        ));
    }

    #[test]
    fn sample_deterministic_and_seed_sensitive() {
        let t = random_tractogram(1000, 2);
        let a = sample(&t, 100, 7).unwrap();
        let b = sample(&t, 100, 7).unwrap();
        for (x, y) in a.streamlines.iter().zip(&b.streamlines) {
            assert_eq!(x, y);
        }
        let mut distinct = 0;
        for pair in 0..20u64 {
            let s1 = sample(&t, 100, 1000 + 2 * pair).unwrap();
            let s2 = sample(&t, 100, 1001 + 2 * pair).unwrap();
            if s1.streamlines != s2.streamlines {
                distinct += 1;
            }
        }
        assert_eq!(distinct, 20);
    }

    #[test]
    fn sample_preserves_relative_order() {
        let t = random_tractogram(200, 3);
        let s = sample(&t, 50, 11).unwrap();
        // every sampled streamline appears in the original, in order
        let mut pos = 0usize;
        for sl in &s.streamlines {
            while pos < t.len() && &t.streamlines[pos] != sl {
                pos += 1;
            }
            assert!(pos < t.len());
            pos += 1;
        }
    }

    #[test]
    fn sample_uniformity() {
        // sampling 1 from 10 over 10_000 trials: each index within 5 sigma
        let t = random_tractogram(10, 4);
        let mut counts = [0usize; 10];
        for trial in 0..10_000u64 {
            let s = sample(&t, 1, trial).unwrap();
            let idx = t
                .streamlines
                .iter()
                .position(|x| x == &s.streamlines[0])
                .unwrap();
            counts[idx] += 1;
        }
        let expected = 1000.0;
        let sigma = (10_000.0 * 0.1 * 0.9f64).sqrt();
        for &c in &counts {
            assert!((c as f64 - expected).abs() < 5.0 * sigma, "counts {counts:?}");
        }
    }
}
