use std::path::Path;

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::token_ops::BlockRecord;

/// An 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl Rgb {
    /// Converts an HWC image in `[0, 1]`; one channel is replicated to gray.
    pub fn from_image(image: &Tensor) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || !(s[2] == 1 || s[2] == 3) {
            return Err(Error::shape("render", format!("{s:?}, expected [h, w, 1 | 3]")));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let pixels = (0..h * w)
            .map(|i| {
                let px = &image.data()[i * c..(i + 1) * c];
                if c == 1 {
                    [byte(px[0]); 3]
                } else {
                    [byte(px[0]), byte(px[1]), byte(px[2])]
                }
            })
            .collect();
        Ok(Self {
            width: w,
            height: h,
            pixels,
        })
    }

    /// Binary PPM (P6).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut buf = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for p in &self.pixels {
            buf.extend_from_slice(p);
        }
        buf
    }

    pub fn from_ppm(buf: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::Format {
            what: "PPM image",
            detail: d.to_string(),
        };
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < buf.len() && buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Truncated(pos));
            }
            fields.push(std::str::from_utf8(&buf[start..pos]).map_err(|_| bad("non-ASCII header"))?);
        }
        if fields[0] != "P6" || fields[3] != "255" {
            return Err(bad("expected P6 with maxval 255"));
        }
        let width: usize = fields[1].parse().map_err(|_| bad("width"))?;
        let height: usize = fields[2].parse().map_err(|_| bad("height"))?;
        pos += 1;
        let need = width * height * 3;
        if buf.len() < pos + need {
            return Err(Error::Truncated(buf.len()));
        }
        let pixels = buf[pos..pos + need].chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        Ok(Self { width, height, pixels })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm())?;
        Ok(())
    }
}

/// Border colour of a merge group, a deterministic function of the
/// destination token position.
pub fn group_color(destination: usize) -> [u8; 3] {
    let mut z = (destination as u64).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    // Keep every channel away from black so borders never read as pruned.
    [64 + (z & 0xbf) as u8, 64 + ((z >> 8) & 0xbf) as u8, 64 + ((z >> 16) & 0xbf) as u8]
}

/// Token map after `block`: patches removed by pruning so far are black;
/// each merge group is filled with its members' mean colour and outlined
/// with the group's border colour; untouched patches are copied.
pub fn render_token_map(image: &Tensor, patch_size: usize, records: &[BlockRecord], block: usize) -> Result<Rgb> {
    if block >= records.len() {
        return Err(Error::Config(format!("block {block} out of range for {} recorded blocks", records.len())));
    }
    let src = Rgb::from_image(image)?;
    if patch_size == 0 || src.width % patch_size != 0 || src.height % patch_size != 0 {
        return Err(Error::Config(format!("patch size {patch_size} does not tile {}x{}", src.width, src.height)));
    }
    let gw = src.width / patch_size;
    let patches = gw * (src.height / patch_size);
    // rep[t] = token currently holding original token t, None once dropped.
    let mut rep: Vec<Option<usize>> = (0..=patches).map(Some).collect();
    for rec in &records[..=block] {
        for e in &rec.merges {
            for r in rep.iter_mut().flatten() {
                if *r == e.source {
                    *r = e.destination;
                }
            }
        }
        for &p in &rec.pruned {
            for r in rep.iter_mut() {
                if *r == Some(p) {
                    *r = None;
                }
            }
        }
    }
    let mut out = src.clone();
    let patch_pixels = |patch: usize| {
        let (pr, pc) = (patch / gw, patch % gw);
        (0..patch_size).flat_map(move |r| {
            (0..patch_size).map(move |c| ((pr * patch_size + r) * gw * patch_size + pc * patch_size + c, r, c))
        })
    };
    for token in 1..=patches {
        match rep[token] {
            None => {
                for (i, _, _) in patch_pixels(token - 1) {
                    out.pixels[i] = [0, 0, 0];
                }
            }
            Some(r) => {
                let members: Vec<usize> = (1..=patches).filter(|&t| rep[t] == Some(r)).collect();
                if members.len() < 2 {
                    continue;
                }
                let mut sum = [0u64; 3];
                let mut count = 0u64;
                for &m in &members {
                    for (i, _, _) in patch_pixels(m - 1) {
                        for ch in 0..3 {
                            sum[ch] += src.pixels[i][ch] as u64;
                        }
                        count += 1;
                    }
                }
                let mean = sum.map(|s| ((s as f64) / count as f64).round() as u8);
                let border = group_color(r);
                let last = patch_size - 1;
                for (i, row, col) in patch_pixels(token - 1) {
                    let edge = row == 0 || col == 0 || row == last || col == last;
                    out.pixels[i] = if edge { border } else { mean };
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::token_ops::MergeEntry;

    fn image() -> Tensor {
        let data = (0..8 * 8 * 3).map(|i| ((i * 37) % 256) as f64 / 255.0).collect();
        Tensor::new(vec![8, 8, 3], data).unwrap()
    }

    fn rec(pruned: Vec<usize>, merges: Vec<MergeEntry>) -> BlockRecord {
        BlockRecord {
            pruned,
            merges,
            ..BlockRecord::default()
        }
    }

    #[test]
    fn untouched_image_is_identical() {
        let img = image();
        let out = render_token_map(&img, 4, &[rec(vec![], vec![])], 0).unwrap();
        assert_eq!(out, Rgb::from_image(&img).unwrap());
    }

    #[test]
    fn all_pruned_is_black() {
        let out = render_token_map(&image(), 4, &[rec(vec![1, 2, 3, 4], vec![])], 0).unwrap();
        assert!(out.pixels.iter().all(|p| *p == [0, 0, 0]));
    }

    #[test]
    fn one_pair_shares_border() {
        let m = MergeEntry {
            source: 4,
            destination: 2,
            group_size: 2,
        };
        let out = render_token_map(&image(), 4, &[rec(vec![], vec![m])], 0).unwrap();
        let c = group_color(2);
        let corner = |patch: usize| {
            let (pr, pc) = (patch / 2, patch % 2);
            out.pixels[pr * 4 * 8 + pc * 4]
        };
        let with_border: Vec<usize> = (0..4).filter(|&p| corner(p) == c).collect();
        assert_eq!(with_border, vec![1, 3]);
    }

    #[test]
    fn ppm_round_trip_and_bounds() {
        let img = Rgb::from_image(&image()).unwrap();
        assert_eq!(Rgb::from_ppm(&img.to_ppm()).unwrap(), img);
        assert!(render_token_map(&image(), 4, &[], 0).is_err());
    }
}
