//! Binary 8-bit PGM (P5) and PPM (P6).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        kind: "pnm",
        detail: detail.into(),
    }
}

struct Header {
    channels: usize,
    w: usize,
    h: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(format_err("missing P5/P6 magic")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(format_err("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(format!("malformed header near byte {start}")));
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| format_err("header value out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_err("header must end with one whitespace byte"));
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(format_err("zero image extent"));
    }
    if maxval != 255 {
        return Err(format_err(format!("only 8-bit images (maxval 255) are supported, got {maxval}")));
    }
    Ok(Header {
        channels,
        w,
        h,
        offset: pos + 1,
    })
}

/// Raw samples: `(channels, height, width, row-major interleaved bytes)`.
pub fn decode(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let hd = parse_header(bytes)?;
    let n = hd.channels * hd.w * hd.h;
    let body = &bytes[hd.offset..];
    if body.len() < n {
        return Err(format_err(format!("truncated pixel data: {} of {n} bytes", body.len())));
    }
    Ok((hd.channels, hd.h, hd.w, body[..n].to_vec()))
}

pub fn encode(channels: usize, h: usize, w: usize, samples: &[u8]) -> Result<Vec<u8>> {
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::invalid(format!("cannot write {c}-channel image"))),
    };
    if samples.len() != channels * h * w {
        return Err(Error::shape("pnm", format!("{} samples for {channels}x{h}x{w}", samples.len())));
    }
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(samples);
    Ok(out)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Image scaled to `[0, 1]`, channel-major `[C, H, W]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let (c, h, w, raw) = decode(&read(path)?)?;
    let mut data = vec![0.0; c * h * w];
    for (i, &v) in raw.iter().enumerate() {
        let (px, ch) = (i / c, i % c);
        data[ch * h * w + px] = v as f64 / 255.0;
    }
    Tensor::new(vec![c, h, w], data)
}

/// Quantizes `[C, H, W]` (C = 1 or 3) from `[0, 1]`, clamping.
pub fn image_bytes(image: &Tensor) -> Result<(usize, usize, usize, Vec<u8>)> {
    let (c, h, w) = match *image.shape() {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::shape("save_image", format!("expected [C, H, W], got {s:?}"))),
    };
    let d = image.data();
    let mut out = vec![0u8; c * h * w];
    for ch in 0..c {
        for px in 0..h * w {
            out[px * c + ch] = (d[ch * h * w + px].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Ok((c, h, w, out))
}

pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w, b) = image_bytes(image)?;
    write(path, &encode(c, h, w, &b)?)
}

/// P5 label map: pixel value is the class id, no scaling.
pub fn load_labels(path: &Path) -> Result<(usize, usize, Vec<usize>)> {
    let (c, h, w, raw) = decode(&read(path)?)?;
    if c != 1 {
        return Err(format_err("label maps must be P5"));
    }
    Ok((h, w, raw.into_iter().map(usize::from).collect()))
}

pub fn save_labels(path: &Path, h: usize, w: usize, labels: &[usize]) -> Result<()> {
    let bytes = labels
        .iter()
        .map(|&v| u8::try_from(v).map_err(|_| Error::invalid(format!("label {v} does not fit a byte"))))
        .collect::<Result<Vec<u8>>>()?;
    write(path, &encode(1, h, w, &bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_with_comment() {
        let mut b = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        b.extend_from_slice(&[7, 9]);
        let (c, h, w, raw) = decode(&b).unwrap();
        assert_eq!((c, h, w, raw), (1, 1, 2, vec![7, 9]));
        assert!(decode(&b[..b.len() - 1]).is_err());
        assert!(decode(b"P3\n1 1\n255\n0").is_err());
        assert!(decode(b"P5\n1 1\n65535\n00").is_err());
    }
}
