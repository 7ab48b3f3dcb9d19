//! Class-agnostic proposal masks and their run-length file format.
//!
//! File layout (little endian):
//! `"CAPR" | version u16 | N u16 | H u16 | W u16`, then per mask
//! `valid u8 | rle_len u32 | rle_len bytes`. The RLE payload is a sequence
//! of LEB128 varints giving alternating run lengths over the row-major
//! bits, starting with a (possibly empty) run of zeros. Runs after the
//! first are non-empty and the runs sum to `H * W`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{LabelMap, Mask};
use crate::protocol::{BACKGROUND, IGNORE};

const MAGIC: &[u8; 4] = b"CAPR";
const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ProposalSet {
    pub height: usize,
    pub width: usize,
    pub masks: Vec<Mask>,
    /// `false` for padding entries, which pooling and aggregation skip.
    pub valid: Vec<bool>,
}

impl ProposalSet {
    pub fn new(height: usize, width: usize, masks: Vec<Mask>, valid: Vec<bool>) -> Result<Self> {
        if masks.len() != valid.len() {
            return Err(Error::shape("one validity flag per mask"));
        }
        if masks.iter().any(|m| m.dims() != (height, width)) {
            return Err(Error::shape(format!("all masks must be {height}x{width}")));
        }
        Ok(Self { height, width, masks, valid })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Appends invalid empty masks until there are `n` entries.
    pub fn pad_to(&mut self, n: usize) {
        while self.masks.len() < n {
            self.masks.push(Mask::filled(self.height, self.width, 0));
            self.valid.push(false);
        }
    }

    pub fn area(&self, j: usize) -> usize {
        self.masks[j].data.iter().filter(|&&v| v != 0).count()
    }
}

/// One mask per 4-connected component of every class region plus one mask
/// for all background pixels, padded with invalid empty masks to `pad_to`.
pub fn oracle_proposals(label: &LabelMap, pad_to: usize) -> Result<ProposalSet> {
    let (h, w) = label.dims();
    let mut masks = Vec::new();
    if label.data.iter().any(|&v| v == BACKGROUND) {
        let data = label.data.iter().map(|&v| u8::from(v == BACKGROUND)).collect();
        masks.push(Mask { height: h, width: w, data });
    }
    let mut visited = vec![false; h * w];
    let mut stack = Vec::new();
    for start in 0..h * w {
        let class = label.data[start];
        if visited[start] || class == BACKGROUND || class == IGNORE {
            continue;
        }
        let mut mask = Mask::filled(h, w, 0);
        visited[start] = true;
        stack.push(start);
        while let Some(p) = stack.pop() {
            mask.data[p] = 1;
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if !visited[q] && label.data[q] == class {
                    visited[q] = true;
                    stack.push(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        masks.push(mask);
    }
    if masks.len() > pad_to {
        return Err(Error::contract(format!(
            "{} connected components exceed the proposal budget {pad_to}",
            masks.len()
        )));
    }
    let n = masks.len();
    let mut set = ProposalSet::new(h, w, masks, vec![true; n])?;
    set.pad_to(pad_to);
    Ok(set)
}

fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

fn encode_rle(mask: &Mask) -> Vec<u8> {
    let mut out = Vec::new();
    let mut current = 0u8;
    let mut run = 0u64;
    for &v in &mask.data {
        let bit = u8::from(v != 0);
        if bit == current {
            run += 1;
        } else {
            put_varint(&mut out, run);
            current = bit;
            run = 1;
        }
    }
    put_varint(&mut out, run);
    out
}

pub fn encode_proposals(set: &ProposalSet) -> Result<Vec<u8>> {
    let dims = [set.len(), set.height, set.width];
    if dims.iter().any(|&d| d > u16::MAX as usize) {
        return Err(Error::shape("proposal file dimensions must fit in u16"));
    }
    let mut out = Vec::with_capacity(12 + set.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u16).to_le_bytes());
    }
    for (mask, &valid) in set.masks.iter().zip(&set.valid) {
        let rle = encode_rle(mask);
        out.push(u8::from(valid));
        out.extend_from_slice(&(rle.len() as u32).to_le_bytes());
        out.extend_from_slice(&rle);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Parse { offset: self.pos, msg: format!("truncated {what}") });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn decode_rle(payload: &[u8], base: usize, h: usize, w: usize) -> Result<Mask> {
    let total = h * w;
    let mut data = Vec::with_capacity(total);
    let mut pos = 0;
    let mut bit = 0u8;
    let mut first = true;
    while pos < payload.len() {
        let start = pos;
        let mut v: u64 = 0;
        let mut shift = 0;
        loop {
            let Some(&b) = payload.get(pos) else {
                return Err(Error::Parse { offset: base + start, msg: "truncated varint".into() });
            };
            pos += 1;
            if shift > 56 {
                return Err(Error::Parse { offset: base + start, msg: "varint overflow".into() });
            }
            v |= ((b & 0x7f) as u64) << shift;
            shift += 7;
            if b & 0x80 == 0 {
                break;
            }
        }
        if v == 0 && !first {
            return Err(Error::Parse { offset: base + start, msg: "empty run after the first".into() });
        }
        if data.len() as u64 + v > total as u64 {
            return Err(Error::Parse { offset: base + start, msg: format!("runs exceed {total} pixels") });
        }
        data.resize(data.len() + v as usize, bit);
        bit ^= 1;
        first = false;
    }
    if data.len() != total {
        return Err(Error::Parse {
            offset: base + payload.len(),
            msg: format!("runs cover {} of {total} pixels", data.len()),
        });
    }
    Ok(Mask { height: h, width: w, data })
}

pub fn decode_proposals(bytes: &[u8]) -> Result<ProposalSet> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Parse { offset: 0, msg: "bad magic".into() });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Parse { offset: 4, msg: format!("unsupported version {version}") });
    }
    let n = r.u16("mask count")? as usize;
    let h = r.u16("height")? as usize;
    let w = r.u16("width")? as usize;
    if h == 0 || w == 0 {
        return Err(Error::Parse { offset: 8, msg: "zero-sized masks".into() });
    }
    let mut masks = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    for _ in 0..n {
        let flag_at = r.pos;
        let flag = r.take(1, "valid flag")?[0];
        if flag > 1 {
            return Err(Error::Parse { offset: flag_at, msg: format!("valid flag {flag}") });
        }
        let len = r.u32("rle length")? as usize;
        let base = r.pos;
        let payload = r.take(len, "rle payload")?;
        masks.push(decode_rle(payload, base, h, w)?);
        valid.push(flag == 1);
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse { offset: r.pos, msg: "trailing bytes".into() });
    }
    ProposalSet::new(h, w, masks, valid)
}

pub fn load_proposals(path: &Path) -> Result<ProposalSet> {
    decode_proposals(&std::fs::read(path)?)
}

pub fn save_proposals(set: &ProposalSet, path: &Path) -> Result<()> {
    std::fs::write(path, encode_proposals(set)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square_label() -> LabelMap {
        let mut l = LabelMap::filled(8, 8, 0);
        for y in 2..6 {
            for x in 2..6 {
                l.set(y, x, 1);
            }
        }
        l
    }

    #[test]
    fn single_square_gives_two_masks() {
        let p = oracle_proposals(&square_label(), 100).unwrap();
        assert_eq!(p.len(), 100);
        assert_eq!(p.num_valid(), 2);
        assert_eq!(p.area(0), 48);
        assert_eq!(p.area(1), 16);
        assert!(p.valid[2..].iter().all(|v| !v));
    }

    #[test]
    fn all_background_gives_one_mask() {
        let p = oracle_proposals(&LabelMap::filled(4, 4, 0), 3).unwrap();
        assert_eq!(p.num_valid(), 1);
        assert_eq!(p.area(0), 16);
    }

    #[test]
    fn same_class_components_are_separate() {
        let l = LabelMap::from_vec(1, 5, vec![2, 0, 2, 2, 255]).unwrap();
        let p = oracle_proposals(&l, 4).unwrap();
        assert_eq!(p.num_valid(), 3);
        assert!(oracle_proposals(&l, 2).is_err());
    }

    #[test]
    fn real_masks_cover_image() {
        let d = crate::data::generate_synthetic_dataset(1, 6, 10, 48).unwrap();
        for id in d.ids() {
            let s = d.load(&id).unwrap();
            let p = oracle_proposals(&s.label, 100).unwrap();
            let mut cover = vec![0u32; s.label.data.len()];
            for (m, &v) in p.masks.iter().zip(&p.valid) {
                if v {
                    for (c, &b) in cover.iter_mut().zip(&m.data) {
                        *c += b as u32;
                    }
                }
            }
            assert!(cover.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn empty_mask_decodes_to_zeros() {
        let mut p = oracle_proposals(&square_label(), 2).unwrap();
        p.pad_to(4);
        let back = decode_proposals(&encode_proposals(&p).unwrap()).unwrap();
        assert!(back.masks[3].data.iter().all(|&v| v == 0));
        assert_eq!(back, p);
    }

    #[test]
    fn malformed_input_reports_offset() {
        let p = oracle_proposals(&square_label(), 2).unwrap();
        let bytes = encode_proposals(&p).unwrap();
        match decode_proposals(&bytes[..bytes.len() - 1]) {
            Err(Error::Parse { offset, .. }) => assert!(offset >= 12),
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_proposals(&bad), Err(Error::Parse { offset: 0, .. })));
        // first mask payload starts at 12 + 5; corrupt its first run length
        let mut bad = bytes.clone();
        bad[17] = 0x7f;
        assert!(matches!(decode_proposals(&bad), Err(Error::Parse { .. })));
    }

    #[test]
    fn decode_large_file_quickly() {
        let mut masks = Vec::new();
        for i in 0..100usize {
            let mut m = Mask::filled(512, 512, 0);
            for y in (i * 5)..(i * 5 + 12).min(512) {
                for x in 0..512 {
                    if (x + i) % 7 < 3 {
                        m.set(y, x, 1);
                    }
                }
            }
            masks.push(m);
        }
        let set = ProposalSet::new(512, 512, masks, vec![true; 100]).unwrap();
        let bytes = encode_proposals(&set).unwrap();
        let t = std::time::Instant::now();
        let back = decode_proposals(&bytes).unwrap();
        let elapsed = t.elapsed();
        assert_eq!(back.len(), 100);
        assert!(elapsed.as_millis() < 50, "decode took {elapsed:?}");
    }

    proptest! {
        #[test]
        fn decode_encode_roundtrip(h in 1usize..12, w in 1usize..12, bits in proptest::collection::vec(0u8..2, 144 * 3), n in 1usize..4) {
            let masks: Vec<Mask> = (0..n)
                .map(|k| Mask::from_vec(h, w, bits[k * 144..k * 144 + h * w].to_vec()).unwrap())
                .collect();
            let valid = (0..n).map(|k| k % 2 == 0).collect();
            let set = ProposalSet::new(h, w, masks, valid).unwrap();
            let bytes = encode_proposals(&set).unwrap();
            let back = decode_proposals(&bytes).unwrap();
            prop_assert_eq!(&back, &set);
            prop_assert_eq!(encode_proposals(&back).unwrap(), bytes);
        }
    }
}
