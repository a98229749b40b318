//! Named-tensor file format shared by model checkpoints and exported
//! feature-extractor weights.
//!
//! ```text
//! LTCF-CHECKPOINT
//! version 1
//! kind model
//! config {"base_width":16,...}
//! tensors 2
//! lab.lum.entry.weight 3,3,1,16
//! lab.lum.entry.bias 16
//! end
//! <little-endian f32 values of every tensor, in header order>
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &str = "LTCF-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;

/// Decoded contents of a tensor file.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub kind: String,
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

fn header(kind: &str, config: &str, tensors: &[(&str, &Tensor)]) -> Result<String> {
    if config.contains('\n') || kind.contains(char::is_whitespace) {
        return Err(Error::Usage(
            "checkpoint kind and config must be single-line".into(),
        ));
    }
    let mut h = format!(
        "{MAGIC}\nversion {FORMAT_VERSION}\nkind {kind}\nconfig {config}\ntensors {}\n",
        tensors.len()
    );
    for (name, t) in tensors {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Usage(format!("invalid tensor name `{name}`")));
        }
        let dims: Vec<String> = t.shape().iter().map(ToString::to_string).collect();
        h.push_str(&format!("{name} {}\n", dims.join(",")));
    }
    h.push_str("end\n");
    Ok(h)
}

pub fn encode(kind: &str, config: &str, tensors: &[(&str, &Tensor)]) -> Result<Vec<u8>> {
    let mut bytes = header(kind, config, tensors)?.into_bytes();
    for (_, t) in tensors {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(bytes)
}

pub fn write(path: &Path, kind: &str, config: &str, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let bytes = encode(kind, config, tensors)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<TensorFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Corrupt("header ends unexpectedly".into()))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::Corrupt("header is not UTF-8".into()))
    }

    fn field(&mut self, key: &str) -> Result<&'a str> {
        let line = self.line()?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| Error::Corrupt(format!("expected `{key}` line, found `{line}`")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<TensorFile> {
    let mut c = Cursor { bytes, pos: 0 };
    if !bytes.starts_with(MAGIC.as_bytes()) || c.line()? != MAGIC {
        return Err(Error::Corrupt("missing checkpoint signature".into()));
    }
    let version: u32 = c
        .field("version")?
        .parse()
        .map_err(|_| Error::Corrupt("unreadable version".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let kind = c.field("kind")?.to_string();
    let config = c.field("config")?.to_string();
    let count: usize = c
        .field("tensors")?
        .parse()
        .map_err(|_| Error::Corrupt("unreadable tensor count".into()))?;
    let mut specs = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let line = c.line()?;
        let (name, dims) = line
            .split_once(' ')
            .ok_or_else(|| Error::Corrupt(format!("bad tensor line `{line}`")))?;
        let shape: Vec<usize> = dims
            .split(',')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Corrupt(format!("bad shape in `{line}`")))?;
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Corrupt(format!("bad shape in `{line}`")));
        }
        specs.push((name.to_string(), shape));
    }
    if c.line()? != "end" {
        return Err(Error::Corrupt("missing header terminator".into()));
    }
    let mut data = &bytes[c.pos..];
    let needed: usize = specs
        .iter()
        .map(|(_, s)| s.iter().product::<usize>() * 4)
        .sum();
    if data.len() != needed {
        return Err(Error::Corrupt(format!(
            "expected {needed} data bytes, found {}",
            data.len()
        )));
    }
    let mut tensors = Vec::with_capacity(specs.len());
    for (name, shape) in specs {
        let n: usize = shape.iter().product();
        let values = data[..4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        data = &data[4 * n..];
        tensors.push((name, Tensor::new(&shape, values)?));
    }
    Ok(TensorFile {
        kind,
        config,
        tensors,
    })
}
