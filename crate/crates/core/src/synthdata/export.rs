//! On-disk form of a split: one binary record per sample plus `index.txt`.
//!
//! Record layout (little-endian):
//! ```text
//! magic   "MMOESMPL"
//! version u32 (= 1)
//! seed    u64
//! grid    u32
//! arrays  6 x { dtype u8, ndim u8, dims u32[ndim], data }
//!         image f64 [3,H,W] | semseg u32 [N] | depth f64 [N,1]
//!         normals f64 [N,3] | saliency u8 [N] | instances u8 [N]
//! ```
//! dtype codes: 1 = f64, 2 = u32, 3 = u8.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{SceneSample, Split};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"MMOESMPL";
const VERSION: u32 = 1;
const INDEX_HEADER: &str = "MMOESMPL-INDEX 1";

const F64: u8 = 1;
const U32: u8 = 2;
const U8: u8 = 3;

fn header<W: Write>(w: &mut Writer<W>, dtype: u8, dims: &[usize]) -> Result<()> {
    w.u8(dtype)?;
    w.u8(dims.len() as u8)?;
    for &d in dims {
        w.u32(d as u32)?;
    }
    Ok(())
}

fn write_sample<W: Write>(w: &mut Writer<W>, s: &SceneSample) -> Result<()> {
    let n = s.tokens();
    w.bytes(MAGIC)?;
    w.u32(VERSION)?;
    w.u64(s.seed)?;
    w.u32(s.grid as u32)?;
    header(w, F64, s.image.shape())?;
    s.image.data().iter().try_for_each(|&v| w.f64(v))?;
    header(w, U32, &[n])?;
    s.semseg.iter().try_for_each(|&c| w.u32(c as u32))?;
    header(w, F64, s.depth.shape())?;
    s.depth.data().iter().try_for_each(|&v| w.f64(v))?;
    header(w, F64, s.normals.shape())?;
    s.normals.data().iter().try_for_each(|&v| w.f64(v))?;
    header(w, U8, &[n])?;
    s.saliency.iter().try_for_each(|&b| w.u8(u8::from(b)))?;
    header(w, U8, &[n])?;
    w.bytes(&s.instances)
}

fn read_header<R: Read>(r: &mut Reader<R>, dtype: u8) -> Result<Vec<usize>> {
    let got = r.u8()?;
    if got != dtype {
        return Err(r.err(format!("dtype code {got}, expected {dtype}")));
    }
    let ndim = r.u8()?;
    (0..ndim).map(|_| Ok(r.u32()? as usize)).collect()
}

fn read_f64s<R: Read>(r: &mut Reader<R>) -> Result<Tensor> {
    let dims = read_header(r, F64)?;
    let n = dims.iter().product();
    let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    Tensor::new(dims, data).map_err(|e| r.err(e.to_string()))
}

fn read_sample(path: &Path) -> Result<SceneSample> {
    let mut r = Reader::new(BufReader::new(File::open(path)?), path);
    r.expect_magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let seed = r.u64()?;
    let grid = r.u32()? as usize;
    let n = grid * grid;
    let image = read_f64s(&mut r)?;
    let dims = read_header(&mut r, U32)?;
    if dims != [n] {
        return Err(r.err(format!("semseg dims {dims:?}")));
    }
    let semseg = (0..n).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
    let depth = read_f64s(&mut r)?;
    let normals = read_f64s(&mut r)?;
    if depth.shape() != [n, 1] || normals.shape() != [n, 3] {
        return Err(r.err("depth or normal dims do not match the grid"));
    }
    let bytes = |r: &mut Reader<_>| -> Result<Vec<u8>> {
        let dims = read_header(r, U8)?;
        if dims != [n] {
            return Err(r.err(format!("byte array dims {dims:?}")));
        }
        r.bytes(n)
    };
    let saliency = bytes(&mut r)?.into_iter().map(|b| b != 0).collect();
    let instances = bytes(&mut r)?;
    r.finish()?;
    Ok(SceneSample {
        seed,
        image,
        grid,
        semseg,
        depth,
        normals,
        saliency,
        instances,
    })
}

/// Writes `dir/<split>/` with one record per sample and an index.
pub fn export_split(dir: &Path, split: Split, samples: &[SceneSample]) -> Result<()> {
    let root = dir.join(split.name());
    fs::create_dir_all(&root)?;
    let mut index = format!("{INDEX_HEADER}\nsplit {split}\ncount {}\n", samples.len());
    for (i, s) in samples.iter().enumerate() {
        let name = format!("{i:06}.bin");
        let mut w = Writer::new(BufWriter::new(File::create(root.join(&name))?));
        write_sample(&mut w, s)?;
        w.into_inner().flush()?;
        index.push_str(&format!("{name} {}\n", s.seed));
    }
    fs::write(root.join("index.txt"), index)?;
    Ok(())
}

pub fn import_split(dir: &Path, split: Split) -> Result<Vec<SceneSample>> {
    let root = dir.join(split.name());
    let index_path = root.join("index.txt");
    let text = fs::read_to_string(&index_path)?;
    let bad = |reason: &str| Error::format(&index_path, reason);
    let mut lines = text.lines();
    if lines.next() != Some(INDEX_HEADER) {
        return Err(bad("missing index header"));
    }
    if lines.next() != Some(&format!("split {split}")) {
        return Err(bad("split mismatch"));
    }
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("count "))
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| bad("missing count"))?;
    let mut samples = Vec::with_capacity(count);
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let (name, seed) = line.split_once(' ').ok_or_else(|| bad("malformed entry"))?;
        let seed: u64 = seed.parse().map_err(|_| bad("malformed seed"))?;
        let sample = read_sample(&root.join(name))?;
        if sample.seed != seed {
            return Err(Error::format(root.join(name), "seed disagrees with index"));
        }
        samples.push(sample);
    }
    if samples.len() != count {
        return Err(bad("entry count disagrees with header"));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{Dataset, DatasetConfig};

    #[test]
    fn export_import_is_bit_exact() {
        let cfg = DatasetConfig {
            train: 3,
            val: 2,
            ..Default::default()
        };
        let ds = Dataset::generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_split(dir.path(), Split::Val, &ds.val).unwrap();
        let back = import_split(dir.path(), Split::Val).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in ds.val.iter().zip(&back) {
            assert!(a.image.bit_eq(&b.image) && a.depth.bit_eq(&b.depth) && a.normals.bit_eq(&b.normals));
            assert_eq!(a, b);
        }
        assert!(import_split(dir.path(), Split::Train).is_err());
    }

    #[test]
    fn corrupt_record_is_a_format_error() {
        let cfg = DatasetConfig {
            train: 1,
            val: 1,
            ..Default::default()
        };
        let ds = Dataset::generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_split(dir.path(), Split::Train, &ds.train).unwrap();
        let rec = dir.path().join("train/000000.bin");
        let bytes = fs::read(&rec).unwrap();
        fs::write(&rec, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(import_split(dir.path(), Split::Train), Err(Error::Format { .. })));
    }
}
