//! Weight files: a text header followed by little-endian `f64` blobs.
//!
//! ```text
//! IRPATCH-DET/1
//! variant base
//! channels 8,16,24,32
//! extra 0
//! seed 42
//! tensor conv0.weight 8,1,3,3
//! ...
//! end
//! <blobs in tensor order>
//! ```

use std::path::Path;

use irpatch_diffcore::Tensor;

use super::{DetectorWeights, Variant};
use crate::pattern::write_all;
use crate::{Error, Result};

const MAGIC: &str = "IRPATCH-DET/1";

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn encode_weights(w: &DetectorWeights) -> Vec<u8> {
    let mut header = format!(
        "{MAGIC}\nvariant {}\nchannels {}\nextra {}\nseed {}\n",
        w.variant.name,
        join(&w.variant.channels),
        w.variant.extra,
        w.seed
    );
    for ((name, _), t) in w.variant.param_specs().iter().zip(&w.params) {
        header.push_str(&format!("tensor {name} {}\n", join(t.shape())));
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    for t in &w.params {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_weights(w: &DetectorWeights, path: &Path) -> Result<()> {
    w.validate()?;
    write_all(path, &encode_weights(w))
}

pub fn decode_weights(bytes: &[u8], path: &Path) -> Result<DetectorWeights> {
    let bad = |d: String| Error::format(path, d);
    let mut pos = 0;
    let mut next_line = || -> Result<String> {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header".into()))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end])
            .map_err(|_| bad("header is not UTF-8".into()))?
            .to_string();
        pos += end + 1;
        Ok(line)
    };
    if next_line()? != MAGIC {
        return Err(bad(format!("missing {MAGIC} magic")));
    }
    let mut field = |key: &str| -> Result<String> {
        let line = next_line()?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| bad(format!("expected `{key}`, found {line:?}")))
    };
    let name = field("variant")?;
    let channels_text = field("channels")?;
    let extra_text = field("extra")?;
    let seed_text = field("seed")?;
    let parse_list = |s: &str| -> Result<Vec<usize>> {
        s.split(',')
            .map(|x| x.parse::<usize>().map_err(|_| bad(format!("bad integer list {s:?}"))))
            .collect()
    };
    let channels = parse_list(&channels_text)?;
    let channels: [usize; 4] = channels
        .try_into()
        .map_err(|_| bad(format!("expected 4 channel widths, found {channels_text:?}")))?;
    let extra = extra_text
        .parse()
        .map_err(|_| bad(format!("bad extra {extra_text:?}")))?;
    let seed = seed_text.parse().map_err(|_| bad(format!("bad seed {seed_text:?}")))?;
    let variant = Variant { name, channels, extra };

    let mut shapes = Vec::new();
    loop {
        let line = next_line()?;
        if line == "end" {
            break;
        }
        let (tname, shape) = line
            .strip_prefix("tensor ")
            .and_then(|r| r.split_once(' '))
            .ok_or_else(|| bad(format!("expected tensor entry, found {line:?}")))?;
        shapes.push((tname.to_string(), parse_list(shape)?));
    }
    let specs = variant.param_specs();
    if shapes != specs {
        return Err(bad(format!(
            "tensor index does not match topology {variant}: {shapes:?}"
        )));
    }
    let mut params = Vec::with_capacity(specs.len());
    let mut offset = pos;
    for (tname, shape) in &shapes {
        let n: usize = shape.iter().product();
        let chunk = bytes
            .get(offset..offset + 8 * n)
            .ok_or_else(|| bad(format!("truncated blob for {tname}")))?;
        let data = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.push(Tensor::new(shape.clone(), data).map_err(|e| bad(e.to_string()))?);
        offset += 8 * n;
    }
    if offset != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - offset)));
    }
    let w = DetectorWeights { variant, seed, params };
    w.validate().map_err(|e| bad(e.to_string()))?;
    Ok(w)
}

pub fn read_weights(path: &Path) -> Result<DetectorWeights> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        for name in ["base", "deep"] {
            let w = DetectorWeights::init(Variant::by_name(name).unwrap(), 11);
            let back = decode_weights(&encode_weights(&w), Path::new("w")).unwrap();
            assert_eq!(back, w);
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let w = DetectorWeights::init(Variant::by_name("base").unwrap(), 1);
        let bytes = encode_weights(&w);
        assert!(decode_weights(&bytes[..bytes.len() - 3], Path::new("w")).is_err());
        assert!(decode_weights(b"NOPE\n", Path::new("w")).is_err());
        let text = String::from_utf8_lossy(&bytes[..200]).replace("8,1,3,3", "8,1,3,2");
        let mut edited = text.into_bytes();
        edited.extend_from_slice(&bytes[200..]);
        assert!(decode_weights(&edited, Path::new("w")).is_err());
    }
}
