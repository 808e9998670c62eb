//! Unit streams, fixed-width bit packing, frame-rate resampling and data-size
//! accounting.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_file, write_file, Reader, Writer};

pub const UNIT_MAGIC: &[u8; 4] = b"USEQ";
pub const UNIT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Audio,
    Visual,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::Audio => 0,
            Modality::Visual => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Modality::Audio),
            1 => Some(Modality::Visual),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Visual => "visual",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "audio" => Ok(Modality::Audio),
            "visual" => Ok(Modality::Visual),
            _ => Err(Error::config(format!("unknown modality {s:?} (audio|visual)"))),
        }
    }
}

/// Frame-synchronous discrete unit IDs.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitStream {
    pub units: Vec<u32>,
    pub fps: f32,
    pub modality: Modality,
    pub language: String,
    pub speaker: String,
}

impl UnitStream {
    pub fn new(units: Vec<u32>, fps: f32, modality: Modality) -> Self {
        UnitStream {
            units,
            fps,
            modality,
            language: String::new(),
            speaker: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }
}

/// `⌈log2 k⌉`, the fixed width of one unit.
pub fn bits_for(k: u32) -> u32 {
    assert!(k >= 1, "codebook size must be >= 1");
    if k == 1 {
        0
    } else {
        32 - (k - 1).leading_zeros()
    }
}

/// Bit-packed unit IDs, most significant bit first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedUnits {
    pub bits: Vec<u8>,
    pub count: usize,
    pub bits_per_unit: u32,
}

/// Bytes needed for `count` units of `bits_per_unit` bits.
pub fn packed_len(count: usize, bits_per_unit: u32) -> usize {
    (count * bits_per_unit as usize).div_ceil(8)
}

pub fn pack(units: &[u32], k: u32) -> Result<PackedUnits> {
    let width = bits_for(k);
    if let Some((i, &u)) = units.iter().enumerate().find(|(_, &u)| u >= k) {
        return Err(Error::input(format!("unit {u} at position {i} is >= k={k}")));
    }
    let mut bits = Vec::with_capacity(packed_len(units.len(), width));
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    for &u in units {
        acc = (acc << width) | u64::from(u);
        filled += width;
        while filled >= 8 {
            filled -= 8;
            bits.push((acc >> filled) as u8);
        }
        acc &= (1u64 << filled) - 1;
    }
    if filled > 0 {
        bits.push((acc << (8 - filled)) as u8);
    }
    debug_assert_eq!(bits.len(), packed_len(units.len(), width));
    Ok(PackedUnits {
        bits,
        count: units.len(),
        bits_per_unit: width,
    })
}

pub fn unpack(p: &PackedUnits) -> Result<Vec<u32>> {
    let width = p.bits_per_unit;
    if width > 32 {
        return Err(Error::input(format!("{width} bits per unit is unsupported")));
    }
    let need = packed_len(p.count, width);
    if p.bits.len() < need {
        return Err(Error::input(format!(
            "truncated unit buffer: {} bytes, {need} needed for {} units",
            p.bits.len(),
            p.count
        )));
    }
    let mut out = Vec::with_capacity(p.count);
    let mut acc: u64 = 0;
    let mut avail = 0u32;
    let mut bytes = p.bits.iter();
    let mask = if width == 0 { 0 } else { (1u64 << width) - 1 };
    for _ in 0..p.count {
        while avail < width {
            acc = (acc << 8) | u64::from(*bytes.next().expect("length checked"));
            avail += 8;
        }
        avail -= width;
        out.push(((acc >> avail) & mask) as u32);
        acc &= (1u64 << avail) - 1;
    }
    Ok(out)
}

/// Nearest-frame resampling: `out[i] = in[round(i · fps / to_fps)]`, clamped.
pub fn resample(s: &UnitStream, to_fps: f32) -> Result<UnitStream> {
    if !(s.fps > 0.0) || !(to_fps > 0.0) {
        return Err(Error::input(format!(
            "frame rates must be positive (from {} to {to_fps})",
            s.fps
        )));
    }
    let ratio = f64::from(s.fps) / f64::from(to_fps);
    let n = (s.len() as f64 / ratio).round() as usize;
    let last = s.len().saturating_sub(1);
    let units = (0..n)
        .map(|i| s.units[((i as f64 * ratio).round() as usize).min(last)])
        .collect();
    Ok(UnitStream {
        units,
        fps: to_fps,
        ..s.clone()
    })
}

/// Data-size comparison of one raw frame against one unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub frame_bits: u64,
    pub unit_bits: u32,
    /// `unit_bits / frame_bits`.
    pub ratio: f64,
    pub percent: f64,
    pub frame_bytes: f64,
    pub unit_bytes: f64,
}

pub fn compression_stats(
    frame_h: u32,
    frame_w: u32,
    bit_depth: u32,
    bits_per_unit: u32,
) -> Result<CompressionReport> {
    if frame_h == 0 || frame_w == 0 || bit_depth == 0 || bits_per_unit == 0 {
        return Err(Error::input("frame dimensions and bit widths must be positive"));
    }
    let frame_bits = u64::from(frame_h) * u64::from(frame_w) * u64::from(bit_depth);
    let ratio = f64::from(bits_per_unit) / frame_bits as f64;
    Ok(CompressionReport {
        frame_bits,
        unit_bits: bits_per_unit,
        ratio,
        percent: ratio * 100.0,
        frame_bytes: frame_bits as f64 / 8.0,
        unit_bytes: f64::from(bits_per_unit) / 8.0,
    })
}

impl fmt::Display for CompressionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "frame {} bits ({} bytes), unit {} bits ({} bytes): ratio {:.4e} = {:.5}%",
            self.frame_bits,
            self.frame_bytes,
            self.unit_bits,
            self.unit_bytes,
            self.ratio,
            self.percent
        )
    }
}

/// Serializes a stream into the `USEQ` unit file layout.
pub fn encode_unit_file(s: &UnitStream, k: u32) -> Result<Vec<u8>> {
    let packed = pack(&s.units, k)?;
    let mut w = Writer::new();
    w.bytes(UNIT_MAGIC)
        .u16(UNIT_VERSION)
        .u32(k)
        .f32(s.fps)
        .u8(s.modality.code());
    w.u16(s.language.len() as u16).bytes(s.language.as_bytes());
    w.u64(packed.count as u64).bytes(&packed.bits);
    Ok(w.finish())
}

pub fn decode_unit_file(bytes: &[u8], path: &Path) -> Result<(UnitStream, u32)> {
    let mut r = Reader::new(bytes, path);
    r.header(UNIT_MAGIC, "unit", UNIT_VERSION)?;
    let k = r.u32()?;
    if k == 0 {
        return Err(r.err("k must be >= 1"));
    }
    let fps = r.f32()?;
    let modality = Modality::from_code(r.u8()?).ok_or_else(|| r.err("unknown modality code"))?;
    let lang_len = r.u16()? as usize;
    let language = String::from_utf8(r.take(lang_len)?.to_vec())
        .map_err(|_| r.err("language tag is not UTF-8"))?;
    let count = r.u64()? as usize;
    let width = bits_for(k);
    let payload = r.take(packed_len(count, width))?.to_vec();
    r.expect_end()?;
    let units = unpack(&PackedUnits {
        bits: payload,
        count,
        bits_per_unit: width,
    })?;
    if let Some(bad) = units.iter().find(|&&u| u >= k) {
        return Err(r.err(format!("unit {bad} >= k={k}")));
    }
    Ok((
        UnitStream {
            units,
            fps,
            modality,
            language,
            speaker: String::new(),
        },
        k,
    ))
}

pub fn save_units(path: &Path, s: &UnitStream, k: u32) -> Result<()> {
    write_file(path, &encode_unit_file(s, k)?)
}

pub fn load_units(path: &Path) -> Result<(UnitStream, u32)> {
    decode_unit_file(&read_file(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn four_zero_units_fill_five_bytes() {
        let p = pack(&[0, 0, 0, 0], 1024).unwrap();
        assert_eq!(p.bits, vec![0u8; 5]);
        assert_eq!(p.bits_per_unit, 10);
    }

    #[test]
    fn max_unit_sets_leading_ten_bits() {
        let p = pack(&[1023], 1024).unwrap();
        assert_eq!(p.bits, vec![0xFF, 0b1100_0000]);
    }

    #[test]
    fn bit_layout_of_512() {
        let p = pack(&[512], 1024).unwrap();
        assert_eq!(p.bits, vec![0b1000_0000, 0]);
        assert_eq!(unpack(&p).unwrap(), vec![512]);
    }

    #[test]
    fn full_enumeration_and_empty() {
        let all: Vec<u32> = (0..1024).collect();
        assert_eq!(unpack(&pack(&all, 1024).unwrap()).unwrap(), all);
        let e = pack(&[], 1024).unwrap();
        assert!(e.bits.is_empty());
        assert!(unpack(&e).unwrap().is_empty());
    }

    #[test]
    fn rejects_out_of_range_and_truncation() {
        assert!(pack(&[3, 1024], 1024).is_err());
        let mut p = pack(&[1, 2, 3], 1000).unwrap();
        p.bits.pop();
        assert!(unpack(&p).is_err());
    }

    #[test]
    fn bits_for_matches_ceil_log2() {
        assert_eq!(bits_for(1), 0);
        assert_eq!(bits_for(2), 1);
        assert_eq!(bits_for(1000), 10);
        assert_eq!(bits_for(1024), 10);
        assert_eq!(bits_for(1025), 11);
        assert_eq!(bits_for(65536), 16);
    }

    fn stream(units: &[u32], fps: f32) -> UnitStream {
        UnitStream::new(units.to_vec(), fps, Modality::Visual)
    }

    #[test]
    fn resample_examples() {
        let s = stream(&[1, 2, 3, 4], 50.0);
        assert_eq!(resample(&s, 50.0).unwrap(), s);
        assert_eq!(resample(&s, 25.0).unwrap().units, vec![1, 3]);
        let up = resample(&stream(&[1, 2, 3, 4], 25.0), 50.0).unwrap();
        assert_eq!(up.len(), 8);
        for u in 1..=4 {
            assert!(up.units.contains(&u));
        }
        assert!(resample(&s, 0.0).is_err());
    }

    #[test]
    fn compression_examples() {
        let r = compression_stats(88, 88, 8, 10).unwrap();
        assert_eq!(r.frame_bits, 61_952);
        assert!((r.percent - 0.016).abs() < 0.0005);
        assert!((r.ratio - 1.614e-4).abs() < 1e-7);
        assert_eq!(compression_stats(1, 1, 1, 1).unwrap().ratio, 1.0);
        assert_eq!(compression_stats(96, 96, 8, 10).unwrap().ratio, 10.0 / 73_728.0);
    }

    #[test]
    fn unit_file_round_trip() {
        let mut s = stream(&[0, 999, 5, 17], 25.0);
        s.language = "es".into();
        let bytes = encode_unit_file(&s, 1000).unwrap();
        let (back, k) = decode_unit_file(&bytes, Path::new("mem")).unwrap();
        assert_eq!(k, 1000);
        assert_eq!(back, s);
        assert!(decode_unit_file(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
    }

    proptest! {
        #[test]
        fn pack_round_trip_and_size(k in 2u32..=65536, seed in any::<u64>(), n in 0usize..300) {
            let mut x = seed;
            let units: Vec<u32> = (0..n).map(|_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((x >> 33) % u64::from(k)) as u32
            }).collect();
            let p = pack(&units, k).unwrap();
            prop_assert_eq!(p.bits.len(), (n * bits_for(k) as usize).div_ceil(8));
            prop_assert_eq!(unpack(&p).unwrap(), units);
        }

        #[test]
        fn resample_there_and_back_keeps_length(len in 0usize..200, factor in 1u32..5) {
            // up to a multiple of the rate and back down is exact
            let f = 25.0 * factor as f32;
            let units: Vec<u32> = (0..len as u32).collect();
            let s = stream(&units, 25.0);
            let up = resample(&s, f).unwrap();
            let back = resample(&up, 25.0).unwrap();
            prop_assert_eq!(&back.units, &units);

            // down and up again keeps the length when it divides evenly
            let whole = stream(&vec![1; len - len % factor as usize], f);
            let down = resample(&whole, 25.0).unwrap();
            prop_assert_eq!(resample(&down, f).unwrap().len(), whole.len());
        }
    }
}
