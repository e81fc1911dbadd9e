//! Reader and writer for the `.npy` array container (versions 1.0 and 2.0).

use std::io::Read;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};

const MAGIC: &[u8] = b"\x93NUMPY";
const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

/// A dense little-endian array, always held as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dtype {
    F4,
    F8,
}

/// Decompresses `bytes` when they start with the gzip magic.
pub fn maybe_gunzip(bytes: &[u8]) -> Result<Vec<u8>> {
    if bytes.len() >= 2 && bytes[..2] == GZIP_MAGIC {
        let mut out = Vec::new();
        GzDecoder::new(bytes).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(bytes.to_vec())
    }
}

/// Parses an array container, transparently un-gzipping it first.
///
/// Accepts `<f4` and `<f8` payloads in C order; `<f8` values are narrowed to `f32`.
pub fn parse_npy(bytes: &[u8]) -> Result<NpyArray> {
    let bytes = maybe_gunzip(bytes)?;
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(Error::format(0, "missing array-container magic"));
    }
    let major = bytes[6];
    let (header_len, header_start) = match major {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => {
            if bytes.len() < 12 {
                return Err(Error::format(8, "truncated header length"));
            }
            (u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize, 12)
        }
        v => return Err(Error::format(6, format!("unsupported version {v}"))),
    };
    let header_end = header_start + header_len;
    if bytes.len() < header_end {
        return Err(Error::format(header_start, "truncated header"));
    }
    let header = std::str::from_utf8(&bytes[header_start..header_end])
        .map_err(|_| Error::format(header_start, "header is not UTF-8"))?;
    let (dtype, fortran, shape) = parse_header(header, header_start)?;
    if fortran {
        return Err(Error::format(header_start, "Fortran-ordered arrays are not supported"));
    }
    let n: usize = shape.iter().product();
    let width = match dtype {
        Dtype::F4 => 4,
        Dtype::F8 => 8,
    };
    let body = &bytes[header_end..];
    if body.len() != n * width {
        return Err(Error::format(
            header_end,
            format!("payload has {} bytes, shape {:?} needs {}", body.len(), shape, n * width),
        ));
    }
    let data = match dtype {
        Dtype::F4 => body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
        Dtype::F8 => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32)
            .collect(),
    };
    Ok(NpyArray { shape, data })
}

fn dict_value<'a>(header: &'a str, key: &str, offset: usize) -> Result<&'a str> {
    let pat = format!("'{key}'");
    let at = header
        .find(&pat)
        .ok_or_else(|| Error::format(offset, format!("header lacks {key}")))?;
    let rest = header[at + pat.len()..].trim_start();
    rest.strip_prefix(':')
        .map(str::trim_start)
        .ok_or_else(|| Error::format(offset + at, format!("malformed {key} entry")))
}

fn parse_header(header: &str, offset: usize) -> Result<(Dtype, bool, Vec<usize>)> {
    let descr = dict_value(header, "descr", offset)?;
    let quote = descr.chars().next().filter(|c| *c == '\'' || *c == '"');
    let descr = quote
        .and_then(|q| descr[1..].split(q).next())
        .ok_or_else(|| Error::format(offset, "malformed descr"))?;
    let dtype = match descr {
        "<f4" => Dtype::F4,
        "<f8" => Dtype::F8,
        other => return Err(Error::format(offset, format!("unsupported dtype {other}"))),
    };
    let fortran = dict_value(header, "fortran_order", offset)?.starts_with("True");
    let shape_text = dict_value(header, "shape", offset)?;
    let close = shape_text
        .find(')')
        .filter(|_| shape_text.starts_with('('))
        .ok_or_else(|| Error::format(offset, "malformed shape"))?;
    let shape = shape_text[1..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| Error::format(offset, format!("bad dimension {s}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok((dtype, fortran, shape))
}

/// Serializes a `<f4` C-order array in version 1.0 format.
pub fn write_npy(shape: &[usize], data: &[f32]) -> Vec<u8> {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    let shape_text = if dims.len() == 1 {
        format!("({},)", dims[0])
    } else {
        format!("({})", dims.join(", "))
    };
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {shape_text}, }}");
    // magic + version + length field + header + newline must be a multiple of 64
    let unpadded = 10 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');
    let mut out = Vec::with_capacity(10 + header.len() + data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use std::io::Write;

    #[test]
    fn round_trip() {
        let bytes = write_npy(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.5]);
        assert_eq!((bytes.len() - 24) % 64, 0);
        let a = parse_npy(&bytes).unwrap();
        assert_eq!(a.shape, vec![2, 3]);
        assert_eq!(a.data[5], 6.5);
    }

    #[test]
    fn gzip_detected() {
        let raw = write_npy(&[4], &[1.0, 2.0, 3.0, 4.0]);
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&raw).unwrap();
        let a = parse_npy(&enc.finish().unwrap()).unwrap();
        assert_eq!(a.data, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn wrong_magic_names_offset_zero() {
        let mut bytes = write_npy(&[1], &[0.0]);
        bytes[1] = b'X';
        match parse_npy(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn f8_is_narrowed() {
        let header = "{'descr': '<f8', 'fortran_order': False, 'shape': (2,), }";
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&[1, 0]);
        bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
        bytes.extend_from_slice(header.as_bytes());
        bytes.extend_from_slice(&1.5f64.to_le_bytes());
        bytes.extend_from_slice(&(-2.0f64).to_le_bytes());
        assert_eq!(parse_npy(&bytes).unwrap().data, vec![1.5, -2.0]);
    }

    #[test]
    fn rejects_int_dtype_and_fortran() {
        for header in [
            "{'descr': '<i4', 'fortran_order': False, 'shape': (1,), }",
            "{'descr': '<f4', 'fortran_order': True, 'shape': (1,), }",
        ] {
            let mut bytes = MAGIC.to_vec();
            bytes.extend_from_slice(&[1, 0]);
            bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
            bytes.extend_from_slice(header.as_bytes());
            bytes.extend_from_slice(&[0; 4]);
            assert!(matches!(parse_npy(&bytes), Err(Error::Format { .. })));
        }
    }

    #[test]
    fn truncated_payload() {
        let mut bytes = write_npy(&[3], &[1.0, 2.0, 3.0]);
        bytes.pop();
        assert!(matches!(parse_npy(&bytes), Err(Error::Format { .. })));
    }
}
