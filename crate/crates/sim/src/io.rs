//! On-disk layout:
//!
//! ```text
//! root/dataset.json
//! root/{train,val}/seq_####/spec.json
//! root/{train,val}/seq_####/annotations.jsonl
//! root/{train,val}/seq_####/frame_####.pgm
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{io_err, Result, SimError};
use crate::{Dataset, DatasetSpec, Frame, FrameAnnotation, Sequence, SequenceMeta};

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", width, height).into_bytes();
    bytes.extend_from_slice(pixels);
    std::fs::write(path, bytes).map_err(io_err(path))
}

/// Binary 8-bit PGM; returns `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let bad = |msg: &str| SimError::Parse { path: path.to_path_buf(), line: 1, msg: msg.to_string() };
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxv) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxv != 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let data = &bytes[(i + 1).min(bytes.len())..];
    if data.len() < w * h {
        return Err(bad("pixel data shorter than header"));
    }
    Ok((w, h, data[..w * h].to_vec()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| SimError::Parse { path: path.to_path_buf(), line: e.line(), msg: e.to_string() })
}

pub fn write_sequence(dir: &Path, seq: &Sequence) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_json(&dir.join("spec.json"), &seq.meta)?;
    let mut lines = Vec::new();
    for a in &seq.annotations {
        writeln!(lines, "{}", serde_json::to_string(a).expect("serializable")).expect("in-memory write");
    }
    let p = dir.join("annotations.jsonl");
    std::fs::write(&p, lines).map_err(io_err(&p))?;
    for (t, f) in seq.frames.iter().enumerate() {
        write_pgm(&dir.join(format!("frame_{:04}.pgm", t)), f.width, f.height, &f.pixels)?;
    }
    Ok(())
}

pub fn read_sequence(dir: &Path) -> Result<Sequence> {
    let meta: SequenceMeta = read_json(&dir.join("spec.json"))?;
    let ap = dir.join("annotations.jsonl");
    let text = std::fs::read_to_string(&ap).map_err(io_err(&ap))?;
    let mut annotations = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let a: FrameAnnotation = serde_json::from_str(line)
            .map_err(|e| SimError::Parse { path: ap.clone(), line: n + 1, msg: e.to_string() })?;
        if a.frame != annotations.len() {
            return Err(SimError::Parse { path: ap.clone(), line: n + 1, msg: format!("expected frame {}, found {}", annotations.len(), a.frame) });
        }
        annotations.push(a);
    }
    let mut frames = Vec::with_capacity(annotations.len());
    for t in 0..annotations.len() {
        let p = dir.join(format!("frame_{:04}.pgm", t));
        if !p.exists() {
            return Err(SimError::MissingFrame(p));
        }
        let (width, height, pixels) = read_pgm(&p)?;
        frames.push(Frame { width, height, pixels });
    }
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(Sequence { name, meta, frames, annotations })
}

pub fn write_dataset(root: &Path, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(root).map_err(io_err(root))?;
    write_json(&root.join("dataset.json"), &ds.spec)?;
    for (split, seqs) in [("train", &ds.train), ("val", &ds.val)] {
        for s in seqs.iter() {
            write_sequence(&root.join(split).join(&s.name), s)?;
        }
    }
    Ok(())
}

fn sequence_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("seq_")))
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn read_split(dir: &Path) -> Result<Vec<Sequence>> {
    sequence_dirs(dir)?.iter().map(|d| read_sequence(d)).collect()
}

pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let train = read_split(&root.join("train"))?;
    let val = read_split(&root.join("val"))?;
    if train.is_empty() && val.is_empty() {
        return Err(SimError::NoSequences(root.to_path_buf()));
    }
    let sp = root.join("dataset.json");
    let spec = if sp.exists() {
        read_json(&sp)?
    } else {
        let first = train.first().or(val.first()).expect("non-empty");
        DatasetSpec { train: train.len(), val: val.len(), sequence: first.meta.spec.clone() }
    };
    Ok(Dataset { spec, train, val })
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for e in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let p = e.map_err(io_err(dir))?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// SHA-256 over every file under `root`, visited in path order, hashing
/// each relative path and its bytes.
pub fn dataset_checksum(root: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(root, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(root).unwrap_or(&f).to_string_lossy().replace('\\', "/");
        h.update(rel.as_bytes());
        h.update([0u8]);
        let bytes = std::fs::read(&f).map_err(io_err(&f))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{:02x}", b)).collect())
}
