//! Binary PGM (P5) images, 8- or 16-bit. 16-bit samples are big-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

impl Pgm {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval < 256 {
            out.extend(self.samples.iter().map(|&s| s as u8));
        } else {
            out.extend(self.samples.iter().flat_map(|s| s.to_be_bytes()));
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::format(path, "truncated PGM header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P5" {
            return Err(Error::format(path, format!("expected P5 magic, found {:?}", fields[0])));
        }
        let parse = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::format(path, format!("bad PGM {what}: {s:?}")))
        };
        let width = parse(&fields[1], "width")?;
        let height = parse(&fields[2], "height")?;
        let maxval = parse(&fields[3], "maxval")?;
        if maxval == 0 || maxval > 65535 {
            return Err(Error::format(path, format!("PGM maxval {maxval} out of range")));
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let bytes_per = if maxval < 256 { 1 } else { 2 };
        let expected = width * height * bytes_per;
        let raster = bytes.get(pos..).unwrap_or(&[]);
        if raster.len() != expected {
            return Err(Error::PayloadSize {
                path: path.to_path_buf(),
                expected,
                actual: raster.len(),
            });
        }
        let samples = if bytes_per == 1 {
            raster.iter().map(|&b| b as u16).collect()
        } else {
            raster.chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
        };
        Ok(Pgm {
            width,
            height,
            maxval: maxval as u16,
            samples,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_both_depths() {
        let p = Path::new("mem.pgm");
        for maxval in [255u16, 65535] {
            let img = Pgm {
                width: 3,
                height: 2,
                maxval,
                samples: vec![0, 1, 2, 250, 255, maxval],
            };
            assert_eq!(Pgm::decode(&img.encode(), p).unwrap(), img);
        }
    }

    #[test]
    fn header_comments_and_truncation() {
        let p = Path::new("mem.pgm");
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x00\xff";
        assert_eq!(Pgm::decode(bytes, p).unwrap().samples, vec![0, 255]);
        assert!(matches!(
            Pgm::decode(b"P5\n2 2\n255\n\x00", p),
            Err(Error::PayloadSize { expected: 4, actual: 1, .. })
        ));
        assert!(Pgm::decode(b"P2\n1 1\n255\n0", p).is_err());
    }
}
