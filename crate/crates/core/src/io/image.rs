//! Binary PGM (P5) / PPM (P6) export.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Value range of the tensor being exported.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceRange {
    /// `[0, 1]`, e.g. dataset images.
    Unit,
    /// `[-1, 1]`, e.g. raw generator output.
    Signed,
}

impl SourceRange {
    fn bounds(self) -> (f32, f32) {
        match self {
            SourceRange::Unit => (0.0, 1.0),
            SourceRange::Signed => (-1.0, 1.0),
        }
    }

    /// Linear map onto `0..=255`, rounding half up.
    pub fn to_byte(self, value: f32) -> u8 {
        let (lo, hi) = self.bounds();
        let scaled = (value - lo) / (hi - lo) * 255.0;
        (scaled + 0.5).floor().clamp(0.0, 255.0) as u8
    }
}

/// Encodes a `[1, H, W]` tensor as P5 or a `[3, H, W]` tensor as P6.
pub fn encode_pnm(image: &Tensor, range: SourceRange) -> Result<Vec<u8>> {
    let shape = image.shape();
    if shape.len() != 3 || !(shape[0] == 1 || shape[0] == 3) {
        return Err(Error::UnsupportedFormat(format!(
            "need a [1|3, H, W] tensor, got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let data = image.data();
    let plane = h * w;
    for px in 0..plane {
        for ch in 0..c {
            out.push(range.to_byte(data[ch * plane + px]));
        }
    }
    Ok(out)
}

pub fn write_image(image: &Tensor, path: impl AsRef<Path>, range: SourceRange) -> Result<()> {
    let bytes = encode_pnm(image, range)?;
    let path = path.as_ref();
    fs::write(path, bytes).map_err(|source| Error::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// Decodes a P5/P6 file written by [`encode_pnm`] back into `[0, 1]`.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::CorruptFile("truncated PNM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the payload
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::Format(format!("unsupported PNM magic {other}"))),
    };
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PNM header field `{s}`")))
    };
    let (w, h, max) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if max != 255 {
        return Err(Error::Format(format!("max value {max}, only 255 supported")));
    }
    let payload = bytes.get(pos..).unwrap_or(&[]);
    if payload.len() != channels * w * h {
        return Err(Error::CorruptFile(format!(
            "PNM payload has {} bytes, expected {}",
            payload.len(),
            channels * w * h
        )));
    }
    let plane = w * h;
    let mut data = vec![0.0f32; channels * plane];
    for (i, &b) in payload.iter().enumerate() {
        data[(i % channels) * plane + i / channels] = b as f32 / 255.0;
    }
    Tensor::new(&[channels, h, w], data)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_pnm(&fs::read(path)?)
}

/// Lays `[C, H, W]` images out on a grid with `columns` columns and `gap`
/// pixels of `fill` between tiles.
pub fn tile(images: &[Tensor], columns: usize, gap: usize, fill: f32) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidShape("nothing to tile".into()))?;
    if columns == 0 {
        return Err(Error::InvalidShape("tile needs at least one column".into()));
    }
    let shape = first.shape().to_vec();
    if shape.len() != 3 || images.iter().any(|i| i.shape() != shape.as_slice()) {
        return Err(Error::ShapeMismatch("tiles must share one [C, H, W] shape".into()));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let rows = images.len().div_ceil(columns);
    let cols = columns.min(images.len());
    let (out_h, out_w) = (rows * h + (rows - 1) * gap, cols * w + (cols - 1) * gap);
    let mut out = vec![fill; c * out_h * out_w];
    for (n, img) in images.iter().enumerate() {
        let (r, q) = (n / columns, n % columns);
        let (top, left) = (r * (h + gap), q * (w + gap));
        for ch in 0..c {
            for i in 0..h {
                let src = &img.data()[(ch * h + i) * w..(ch * h + i + 1) * w];
                let dst = (ch * out_h + top + i) * out_w + left;
                out[dst..dst + w].copy_from_slice(src);
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_encode_to_zero_bytes() {
        let t = Tensor::zeros(&[1, 2, 2]).unwrap();
        let bytes = encode_pnm(&t, SourceRange::Unit).unwrap();
        assert_eq!(bytes, b"P5\n2 2\n255\n\0\0\0\0");
    }

    #[test]
    fn endpoints_map_exactly() {
        assert_eq!(SourceRange::Signed.to_byte(-1.0), 0);
        assert_eq!(SourceRange::Signed.to_byte(1.0), 255);
        assert_eq!(SourceRange::Unit.to_byte(0.0), 0);
        assert_eq!(SourceRange::Unit.to_byte(1.0), 255);
        // 0.5 * 255 = 127.5 rounds up
        assert_eq!(SourceRange::Unit.to_byte(0.5), 128);
    }

    #[test]
    fn color_roundtrip_and_layout() {
        let t = Tensor::random_uniform(&[3, 4, 5], 3, 0.0, 1.0).unwrap();
        let bytes = encode_pnm(&t, SourceRange::Unit).unwrap();
        assert!(bytes.starts_with(b"P6\n5 4\n255\n"));
        let back = decode_pnm(&bytes).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn two_channels_are_unsupported() {
        let t = Tensor::zeros(&[2, 2, 2]).unwrap();
        assert!(matches!(
            encode_pnm(&t, SourceRange::Unit),
            Err(Error::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn tiles_grid() {
        let a = Tensor::full(&[1, 2, 2], 1.0).unwrap();
        let g = tile(&[a.clone(), a.clone(), a], 2, 1, 0.0).unwrap();
        assert_eq!(g.shape(), &[1, 5, 5]);
        assert_eq!(g.data()[2], 0.0);
        assert_eq!(g.data()[3], 1.0);
    }
}
