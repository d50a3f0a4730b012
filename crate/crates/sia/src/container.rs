//! On-disk tensor container used for both MFCC caches and checkpoints.
//!
//! Layout: a UTF-8 text header followed by raw little-endian `f32` data.
//!
//! ```text
//! SIAC1
//! meta <key> <value...>
//! tensor <name> <d0> <d1> ...
//! end
//! <f32 blobs in tensor declaration order>
//! ```
//!
//! Writes go to a sibling temp file and are renamed into place, so readers
//! never observe a partial file.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};

const MAGIC: &str = "SIAC1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub meta: BTreeMap<String, String>,
    tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Container {
    pub fn new() -> Self {
        Container::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        assert!(!key.contains(char::is_whitespace), "meta key {key:?}");
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .with_context(|| format!("container missing meta key {key}"))
    }

    pub fn push_tensor(&mut self, name: &str, shape: &[usize], data: Vec<f32>) {
        assert!(!name.contains(char::is_whitespace), "tensor name {name:?}");
        assert_eq!(shape.iter().product::<usize>(), data.len(), "{name}");
        self.tensors.push((name.to_string(), shape.to_vec(), data));
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &[usize], &[f32])> {
        self.tensors
            .iter()
            .map(|(n, s, d)| (n.as_str(), s.as_slice(), d.as_slice()))
    }

    pub fn tensor(&self, name: &str) -> Result<(&[usize], &[f32])> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
            .with_context(|| format!("container missing tensor {name}"))
    }

    /// Atomic write: temp file in the same directory, then rename.
    pub fn write(&self, path: &Path) -> Result<()> {
        let dir = path.parent().with_context(|| format!("{} has no parent", path.display()))?;
        fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(
            ".{}.tmp",
            path.file_name().and_then(|n| n.to_str()).unwrap_or("container")
        ));
        {
            let mut f = fs::File::create(&tmp)
                .with_context(|| format!("creating {}", tmp.display()))?;
            let mut header = String::new();
            header.push_str(MAGIC);
            header.push('\n');
            for (k, v) in &self.meta {
                header.push_str(&format!("meta {k} {v}\n"));
            }
            for (name, shape, _) in &self.tensors {
                header.push_str(&format!("tensor {name}"));
                for d in shape {
                    header.push_str(&format!(" {d}"));
                }
                header.push('\n');
            }
            header.push_str("end\n");
            f.write_all(header.as_bytes())?;
            for (_, _, data) in &self.tensors {
                let mut bytes = Vec::with_capacity(data.len() * 4);
                for v in data {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                f.write_all(&bytes)?;
            }
            f.sync_all()?;
        }
        fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut f =
            fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)?;
        let header_end = find_header_end(&bytes)
            .with_context(|| format!("{}: missing header terminator", path.display()))?;
        let header = std::str::from_utf8(&bytes[..header_end])
            .with_context(|| format!("{}: header is not UTF-8", path.display()))?;
        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            bail!("{}: bad magic", path.display());
        }
        let mut out = Container::new();
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        for line in lines {
            if line == "end" {
                break;
            }
            let mut parts = line.split(' ');
            match parts.next() {
                Some("meta") => {
                    let key = parts
                        .next()
                        .with_context(|| format!("{}: meta line without key", path.display()))?;
                    let value: Vec<&str> = parts.collect();
                    out.meta.insert(key.to_string(), value.join(" "));
                }
                Some("tensor") => {
                    let name = parts
                        .next()
                        .with_context(|| format!("{}: tensor line without name", path.display()))?;
                    let shape = parts
                        .map(|p| p.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .with_context(|| format!("{}: bad tensor shape", path.display()))?;
                    shapes.push((name.to_string(), shape));
                }
                other => bail!("{}: unknown header line {other:?}", path.display()),
            }
        }
        let mut offset = header_end;
        for (name, shape) in shapes {
            let numel: usize = shape.iter().product();
            let end = offset + numel * 4;
            if end > bytes.len() {
                bail!("{}: truncated tensor {name}", path.display());
            }
            let data: Vec<f32> = bytes[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            out.tensors.push((name, shape, data));
            offset = end;
        }
        if offset != bytes.len() {
            bail!("{}: {} trailing bytes", path.display(), bytes.len() - offset);
        }
        Ok(out)
    }
}

fn find_header_end(bytes: &[u8]) -> Option<usize> {
    let needle = b"\nend\n";
    bytes
        .windows(needle.len())
        .position(|w| w == needle)
        .map(|p| p + needle.len())
}

/// FNV-1a over a canonical description string; ties checkpoints and caches
/// to the configuration that produced them.
pub fn fingerprint(description: &str) -> String {
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in description.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    format!("{hash:016x}")
}
