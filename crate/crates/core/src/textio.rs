//! On-disk formats: 16-bit depth PGM, 8-bit HHA PPM, and the small text
//! files exchanged between tools.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::hha::HhaImage;
use crate::model::{FaceParams, MorphableModel};
use crate::render::{DepthImage, SENTINEL};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("netpbm header: {0}")]
    Header(String),
    #[error("netpbm payload: expected {expected} bytes, found {found}")]
    Payload { expected: usize, found: usize },
    #[error("depth {0} mm is outside the 16-bit file range")]
    DepthRange(f64),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("expected {expected} values, found {found}")]
    Length { expected: usize, found: usize },
    #[error("invalid content: {0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes through a temporary sibling file and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "no file name"))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    atomic_write(path, bytes).map_err(io_err(path))
}

pub fn read_text(path: &Path) -> Result<String, FormatError> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Splits a netpbm header into `count` whitespace tokens, honoring `#`
/// comments, and returns them with the offset of the payload.
fn header_tokens(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize), FormatError> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() && bytes[i] != b'#' {
            i += 1;
        }
        if start == i {
            return Err(FormatError::Header(format!(
                "header ended after {} of {count} fields",
                tokens.len()
            )));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the payload.
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return Err(FormatError::Header("missing whitespace after maxval".into()));
    }
    Ok((tokens, i + 1))
}

fn parse_dim(token: &str, what: &str) -> Result<usize, FormatError> {
    match token.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(FormatError::Header(format!("invalid {what} {token:?}"))),
    }
}

/// Encodes a depth image as a big-endian 16-bit PGM with values in
/// tenths of a millimeter.
pub fn encode_depth_pgm(img: &DepthImage) -> Result<Vec<u8>, FormatError> {
    let header = format!("P5\n{} {}\n65535\n", img.width(), img.height());
    let mut out = Vec::with_capacity(header.len() + 2 * img.data().len());
    out.extend_from_slice(header.as_bytes());
    for &d in img.data() {
        let v = if d == SENTINEL { 0.0 } else { (d * 10.0).round() };
        if !(0.0..=65535.0).contains(&v) || (d != SENTINEL && v == 0.0) {
            return Err(FormatError::DepthRange(d));
        }
        out.extend_from_slice(&(v as u16).to_be_bytes());
    }
    Ok(out)
}

pub fn decode_depth_pgm(bytes: &[u8]) -> Result<DepthImage, FormatError> {
    let (tokens, offset) = header_tokens(bytes, 4)?;
    if tokens[0] != "P5" {
        return Err(FormatError::Header(format!("magic {:?}, expected P5", tokens[0])));
    }
    let width = parse_dim(&tokens[1], "width")?;
    let height = parse_dim(&tokens[2], "height")?;
    if tokens[3] != "65535" {
        return Err(FormatError::Header(format!(
            "maxval {}, expected 65535",
            tokens[3]
        )));
    }
    let expected = 2 * width * height;
    let payload = &bytes[offset..];
    if payload.len() != expected {
        return Err(FormatError::Payload {
            expected,
            found: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 10.0)
        .collect();
    DepthImage::new(width, height, data).map_err(|e| FormatError::Invalid(e.to_string()))
}

pub fn save_depth(img: &DepthImage, path: &Path) -> Result<(), FormatError> {
    write_file(path, &encode_depth_pgm(img)?)
}

pub fn load_depth(path: &Path) -> Result<DepthImage, FormatError> {
    decode_depth_pgm(&fs::read(path).map_err(io_err(path))?)
}

/// 8-bit binary PPM with channels (disparity, height, angle) as (R, G, B).
pub fn encode_hha_ppm(img: &HhaImage) -> Vec<u8> {
    let header = format!("P6\n{} {}\n255\n", img.width(), img.height());
    let mut out = Vec::with_capacity(header.len() + 3 * img.width() * img.height());
    out.extend_from_slice(header.as_bytes());
    for i in 0..img.width() * img.height() {
        out.extend_from_slice(&[img.disparity()[i], img.height_above()[i], img.angle()[i]]);
    }
    out
}

pub fn decode_hha_ppm(bytes: &[u8]) -> Result<HhaImage, FormatError> {
    let (tokens, offset) = header_tokens(bytes, 4)?;
    if tokens[0] != "P6" {
        return Err(FormatError::Header(format!("magic {:?}, expected P6", tokens[0])));
    }
    let width = parse_dim(&tokens[1], "width")?;
    let height = parse_dim(&tokens[2], "height")?;
    if tokens[3] != "255" {
        return Err(FormatError::Header(format!("maxval {}, expected 255", tokens[3])));
    }
    let payload = &bytes[offset..];
    if payload.len() != 3 * width * height {
        return Err(FormatError::Payload {
            expected: 3 * width * height,
            found: payload.len(),
        });
    }
    let mut channels = [Vec::new(), Vec::new(), Vec::new()];
    for px in payload.chunks_exact(3) {
        for (c, v) in channels.iter_mut().zip(px) {
            c.push(*v);
        }
    }
    let [d, h, a] = channels;
    HhaImage::new(width, height, d, h, a).map_err(|e| FormatError::Invalid(e.to_string()))
}

fn parse_numbers(text: &str) -> Result<Vec<Vec<f64>>, FormatError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| FormatError::Parse {
                            line: i + 1,
                            reason: format!("not a finite number: {t:?}"),
                        })
                })
                .collect()
        })
        .collect()
}

/// One `u v depth` triple per line.
pub fn parse_landmarks(text: &str) -> Result<Vec<[f64; 3]>, FormatError> {
    parse_numbers(text)?
        .into_iter()
        .enumerate()
        .map(|(i, row)| match row.as_slice() {
            [u, v, d] => Ok([*u, *v, *d]),
            _ => Err(FormatError::Parse {
                line: i + 1,
                reason: format!("expected 3 values, found {}", row.len()),
            }),
        })
        .collect()
}

pub fn format_landmarks(landmarks: &[[f64; 3]]) -> String {
    landmarks
        .iter()
        .map(|[u, v, d]| format!("{u} {v} {d}\n"))
        .collect()
}

/// One decimal per line in pose, shape, expression order. Blank lines are
/// not allowed; a single trailing newline is.
pub fn parse_param_values(text: &str) -> Result<Vec<f64>, FormatError> {
    let body = text.strip_suffix('\n').unwrap_or(text);
    if body.is_empty() {
        return Ok(Vec::new());
    }
    body.split('\n')
        .enumerate()
        .map(|(i, line)| {
            let token = line.trim();
            token
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| FormatError::Parse {
                    line: i + 1,
                    reason: format!("not a finite number: {token:?}"),
                })
        })
        .collect()
}

pub fn parse_params(text: &str, model: &MorphableModel) -> Result<FaceParams, FormatError> {
    let values = parse_param_values(text)?;
    if values.len() != model.param_len() {
        return Err(FormatError::Length {
            expected: model.param_len(),
            found: values.len(),
        });
    }
    FaceParams::from_slice(&values, model).map_err(|e| FormatError::Invalid(e.to_string()))
}

pub fn format_params(params: &FaceParams) -> String {
    params.to_vec().iter().map(|v| format!("{v}\n")).collect()
}

/// One value per line; the feature hook format.
pub fn parse_feature(text: &str) -> Result<Vec<f64>, FormatError> {
    parse_param_values(text)
}

/// `identity<TAB>path` lines. Relative paths resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<(String, PathBuf)>, FormatError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let (id, path) = l.split_once('\t').ok_or_else(|| FormatError::Parse {
                line: i + 1,
                reason: "expected identity<TAB>path".into(),
            })?;
            if id.is_empty() || path.is_empty() {
                return Err(FormatError::Parse {
                    line: i + 1,
                    reason: "empty identity or path".into(),
                });
            }
            Ok((id.to_string(), base.join(path)))
        })
        .collect()
}

pub fn format_manifest(entries: &[(String, String)]) -> String {
    entries
        .iter()
        .map(|(id, path)| format!("{id}\t{path}\n"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_toy_model;

    #[test]
    fn depth_pgm_round_trip_is_bit_exact() {
        let data: Vec<f64> = (0..48)
            .map(|i| if i % 7 == 0 { 0.0 } else { 400.0 + i as f64 * 1.37 })
            .collect();
        let img = DepthImage::new(8, 6, data).unwrap();
        let bytes = encode_depth_pgm(&img).unwrap();
        assert!(bytes.starts_with(b"P5\n8 6\n65535\n"));
        let back = decode_depth_pgm(&bytes).unwrap();
        assert_eq!(encode_depth_pgm(&back).unwrap(), bytes);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.05 + 1e-9);
            assert_eq!(*a == 0.0, *b == 0.0);
        }
        // Big-endian value 4000 = 400.0 mm.
        let one = DepthImage::new(1, 1, vec![400.0]).unwrap();
        assert_eq!(&encode_depth_pgm(&one).unwrap()[13..], &[0x0f, 0xa0]);
    }

    #[test]
    fn depth_pgm_rejects_bad_files() {
        assert!(matches!(decode_depth_pgm(b""), Err(FormatError::Header(_))));
        assert!(matches!(decode_depth_pgm(b"P2\n1 1\n65535\n"), Err(FormatError::Header(_))));
        assert!(matches!(decode_depth_pgm(b"P5\n1 1\n255\n\0"), Err(FormatError::Header(_))));
        assert!(matches!(
            decode_depth_pgm(b"P5\n2 1\n65535\n\0\x01"),
            Err(FormatError::Payload { expected: 4, found: 2 })
        ));
        assert!(decode_depth_pgm(b"P5\n# comment\n1 1\n65535\n\0\x01").is_ok());
        let far = DepthImage::new(1, 1, vec![7000.0]).unwrap();
        assert!(matches!(encode_depth_pgm(&far), Err(FormatError::DepthRange(_))));
    }

    #[test]
    fn param_file_errors_carry_positions() {
        let model = make_toy_model(1, 100, 199, 29).unwrap();
        let ok: String = (0..235).map(|i| if i == 0 { "1\n".to_string() } else { "0\n".into() }).collect();
        assert!(parse_params(&ok, &model).is_ok());

        let short: String = ok.lines().take(234).map(|l| format!("{l}\n")).collect();
        match parse_params(&short, &model) {
            Err(FormatError::Length { expected, found }) => assert_eq!((expected, found), (235, 234)),
            other => panic!("{other:?}"),
        }
        let mut lines: Vec<&str> = ok.lines().collect();
        lines[11] = "abc";
        match parse_params(&lines.join("\n"), &model) {
            Err(FormatError::Parse { line, .. }) => assert_eq!(line, 12),
            other => panic!("{other:?}"),
        }
        let err = parse_params(&short, &model).unwrap_err().to_string();
        assert!(err.contains("235"), "{err}");
    }

    #[test]
    fn landmark_and_manifest_text() {
        let lms = vec![[1.5, 2.0, 600.25], [3.0, -4.0, 590.0]];
        assert_eq!(parse_landmarks(&format_landmarks(&lms)).unwrap(), lms);
        assert!(parse_landmarks("1 2\n").is_err());
        let m = parse_manifest("alice\ta.pgm\nbob\t/abs/b.pgm\n", Path::new("/base")).unwrap();
        assert_eq!(m[0], ("alice".into(), PathBuf::from("/base/a.pgm")));
        assert_eq!(m[1].1, PathBuf::from("/abs/b.pgm"));
        assert!(parse_manifest("no-tab-here\n", Path::new(".")).is_err());
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.txt");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
