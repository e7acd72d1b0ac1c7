//! Per-frame feature files.
//!
//! Binary layout, all little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 4 | magic `DXFT` |
//! | 4 | version, `1` |
//! | 4 | `T` (u32) |
//! | 4 | `D` (u32) |
//! | 4·T·D | f32 values, frame-major |
//!
//! Files ending in `.csv` are read as `T` rows of `D` comma-separated numbers.

use std::path::Path;

use super::bytes::{put_f32s, put_u32, read_file, to_u32, write_file, Reader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"DXFT";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_BYTES: usize = 16;

/// Reads a feature file as a `[D × T]` tensor.
pub fn read_feature_file(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
    {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        return parse_csv(path, &text);
    }
    decode(path, &read_file(path)?)
}

fn decode(path: &Path, bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut r = Reader::new(path, bytes);
    r.magic(FEATURE_MAGIC)?;
    let version = r.u32()?;
    if version != FEATURE_VERSION {
        return Err(r.format_error(4, format!("unsupported version {version}")));
    }
    let t = r.u32()? as usize;
    let d = r.u32()? as usize;
    if t == 0 || d == 0 {
        return Err(r.format_error(8, format!("empty feature map T={t} D={d}")));
    }
    let expected = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_BYTES))
        .ok_or_else(|| r.format_error(8, "payload size overflows"))?;
    if bytes.len() < expected {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    let frames = r.f32s(t * d)?;
    r.finish()?;
    Ok(Tensor::new(vec![t, d], frames)?.transposed())
}

fn parse_csv(path: &Path, text: &str) -> Result<Tensor<f32>> {
    let mut rows: Vec<Vec<f32>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|cell| {
                cell.trim().parse::<f32>().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    msg: format!("not a number: {:?}", cell.trim()),
                })
            })
            .collect::<Result<Vec<f32>>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    msg: format!("{} columns, expected {}", row.len(), first.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: "no frames".into(),
        });
    }
    Ok(Tensor::from_rows(&rows).transposed())
}

/// Encodes a `[D × T]` tensor in the binary format.
pub fn encode_features(path: &Path, features: &Tensor<f32>) -> Result<Vec<u8>> {
    if features.rank() != 2 {
        return Err(Error::Shape {
            op: "write_feature_file",
            msg: format!("features must be [D × T], got {:?}", features.shape()),
        });
    }
    let (d, t) = (features.shape()[0], features.shape()[1]);
    let mut out = Vec::with_capacity(HEADER_BYTES + 4 * d * t);
    out.extend_from_slice(FEATURE_MAGIC);
    put_u32(&mut out, FEATURE_VERSION);
    put_u32(&mut out, to_u32(path, "T", t)?);
    put_u32(&mut out, to_u32(path, "D", d)?);
    put_f32s(&mut out, features.transposed().data());
    Ok(out)
}

pub fn write_feature_file(path: impl AsRef<Path>, features: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    write_file(path, &encode_features(path, features)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(t: u32, d: u32) -> Vec<u8> {
        let mut b = FEATURE_MAGIC.to_vec();
        for v in [1, t, d] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    #[test]
    fn truncated_payload_reports_both_sizes() {
        let mut b = header(3, 2);
        b.extend(std::iter::repeat_n(0u8, 20));
        match decode(Path::new("x.bin"), &b) {
            Err(Error::Length {
                expected, actual, ..
            }) => {
                assert_eq!(expected, 40);
                assert_eq!(actual, 36);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut b = header(1, 1);
        b.extend_from_slice(&1f32.to_le_bytes());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode(Path::new("x"), &bad),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut bad = b.clone();
        bad[4] = 2;
        assert!(matches!(
            decode(Path::new("x"), &bad),
            Err(Error::Format { offset: 4, .. })
        ));
        assert!(decode(Path::new("x"), &b).is_ok());
        b.push(0);
        assert!(matches!(
            decode(Path::new("x"), &b),
            Err(Error::Format { offset: 20, .. })
        ));
    }

    #[test]
    fn csv_is_frame_major() {
        let t = parse_csv(Path::new("x.csv"), "1,2\n3,4\n").unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        // row 0 is feature 0 across frames
        assert_eq!(t.row(0), &[1.0, 3.0]);
        assert_eq!(t.row(1), &[2.0, 4.0]);
    }

    #[test]
    fn csv_errors_cite_lines() {
        let err = parse_csv(Path::new("x.csv"), "1,2\n3\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_csv(Path::new("x.csv"), "1,2\n3,abc\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }
}
