//! Compression codecs and the stored-payload container shared by every model.
//!
//! Container layout (little endian): codec id `u8`, raw length `u32`, stored
//! length `u32`, CRC32 of the raw payload `u32`, then `stored_len` bytes.

use std::io::{Read, Write};

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::error::{FsError, FsResult};

pub const CONTAINER_HEADER_LEN: usize = 13;

/// Deflate wins under [`Codec::FavorFast`] only if it beats the fast codec by
/// more than this fraction of the fast codec's output.
pub const FAVOR_MARGIN: f64 = 0.20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Codec {
    None,
    /// LZ4 block format (stands in for LZO).
    LzFast,
    /// Raw deflate (stands in for zlib).
    Deflate,
    /// Fast codec unless deflate is clearly smaller.
    FavorFast,
}

impl Codec {
    pub const ALL: [Codec; 4] = [Codec::None, Codec::LzFast, Codec::Deflate, Codec::FavorFast];

    pub fn id(self) -> u8 {
        match self {
            Codec::None => 0,
            Codec::LzFast => 1,
            Codec::Deflate => 2,
            Codec::FavorFast => 3,
        }
    }

    pub fn from_id(id: u8) -> FsResult<Self> {
        Ok(match id {
            0 => Codec::None,
            1 => Codec::LzFast,
            2 => Codec::Deflate,
            3 => Codec::FavorFast,
            _ => return Err(FsError::Codec(format!("unknown codec id {id}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Codec::None => "none",
            Codec::LzFast => "lzfast",
            Codec::Deflate => "deflate",
            Codec::FavorFast => "favorfast",
        }
    }

    pub fn parse(s: &str) -> FsResult<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "none" => Codec::None,
            "lzfast" | "lzo" | "lz" => Codec::LzFast,
            "deflate" | "zlib" => Codec::Deflate,
            "favorfast" | "favor_lzo" | "favor-lzo" => Codec::FavorFast,
            other => return Err(FsError::Config(format!("unknown codec {other:?}"))),
        })
    }

    /// Runs the codec. Returns the concrete codec that produced the output
    /// (never `FavorFast`) and the compressed bytes, which may be larger than
    /// the input.
    pub fn compress(self, payload: &[u8]) -> (Codec, Vec<u8>) {
        match self {
            Codec::None => (Codec::None, payload.to_vec()),
            Codec::LzFast => (Codec::LzFast, lz4_flex::block::compress(payload)),
            Codec::Deflate => (Codec::Deflate, deflate(payload)),
            Codec::FavorFast => {
                let fast = lz4_flex::block::compress(payload);
                let slow = deflate(payload);
                if (slow.len() as f64) < fast.len() as f64 * (1.0 - FAVOR_MARGIN) {
                    (Codec::Deflate, slow)
                } else {
                    (Codec::LzFast, fast)
                }
            }
        }
    }

    pub fn decompress(self, stored: &[u8], raw_len: usize) -> FsResult<Vec<u8>> {
        let out = match self {
            Codec::None => stored.to_vec(),
            Codec::LzFast => lz4_flex::block::decompress(stored, raw_len)
                .map_err(|e| FsError::Codec(e.to_string()))?,
            Codec::Deflate => {
                let mut out = Vec::with_capacity(raw_len);
                DeflateDecoder::new(stored)
                    .read_to_end(&mut out)
                    .map_err(|e| FsError::Codec(e.to_string()))?;
                out
            }
            Codec::FavorFast => {
                return Err(FsError::Codec("favorfast is not a stored codec".into()))
            }
        };
        if out.len() != raw_len {
            return Err(FsError::Codec(format!(
                "decoded {} bytes, expected {raw_len}",
                out.len()
            )));
        }
        Ok(out)
    }
}

fn deflate(payload: &[u8]) -> Vec<u8> {
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::default());
    enc.write_all(payload).expect("in-memory deflate");
    enc.finish().expect("in-memory deflate")
}

/// Compresses `payload` into a container, falling back to the raw bytes when
/// compression does not shrink them.
pub fn encode_container(codec: Codec, payload: &[u8]) -> Vec<u8> {
    let (mut used, mut stored) = codec.compress(payload);
    if stored.len() >= payload.len() {
        used = Codec::None;
        stored = payload.to_vec();
    }
    let mut out = Vec::with_capacity(CONTAINER_HEADER_LEN + stored.len());
    out.push(used.id());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&(stored.len() as u32).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    out.extend_from_slice(&stored);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContainerHeader {
    pub codec: Codec,
    pub raw_len: u32,
    pub stored_len: u32,
    pub crc: u32,
}

impl ContainerHeader {
    pub fn parse(bytes: &[u8]) -> FsResult<Self> {
        if bytes.len() < CONTAINER_HEADER_LEN {
            return Err(FsError::Codec("truncated container header".into()));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        Ok(Self {
            codec: Codec::from_id(bytes[0])?,
            raw_len: u32_at(1),
            stored_len: u32_at(5),
            crc: u32_at(9),
        })
    }

    pub fn total_len(&self) -> usize {
        CONTAINER_HEADER_LEN + self.stored_len as usize
    }
}

/// Decodes a container at the start of `bytes`; returns the payload and the
/// number of bytes consumed.
pub fn decode_container(bytes: &[u8]) -> FsResult<(Vec<u8>, usize)> {
    let hdr = ContainerHeader::parse(bytes)?;
    let end = hdr.total_len();
    if bytes.len() < end {
        return Err(FsError::Codec("truncated container body".into()));
    }
    let raw = hdr
        .codec
        .decompress(&bytes[CONTAINER_HEADER_LEN..end], hdr.raw_len as usize)?;
    if crc32fast::hash(&raw) != hdr.crc {
        return Err(FsError::Codec("payload CRC mismatch".into()));
    }
    Ok((raw, end))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn none_is_identity() {
        let payload = b"hello flash".to_vec();
        assert_eq!(Codec::None.compress(&payload), (Codec::None, payload.clone()));
        let c = encode_container(Codec::None, &payload);
        assert_eq!(&c[CONTAINER_HEADER_LEN..], &payload[..]);
    }

    #[test]
    fn zero_block_deflates_below_256_bytes() {
        let (_, out) = Codec::Deflate.compress(&[0u8; 4096]);
        assert!(out.len() < 256, "{} bytes", out.len());
    }

    #[test]
    fn seeded_random_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..1000 {
            let len = rng.random_range(0..6000);
            // Mix of random and repetitive payloads.
            let payload: Vec<u8> = if i % 2 == 0 {
                (0..len).map(|_| rng.random()).collect()
            } else {
                (0..len).map(|j| b"flash file system "[j % 18]).collect()
            };
            for codec in Codec::ALL {
                let c = encode_container(codec, &payload);
                let (back, used) = decode_container(&c).unwrap();
                assert_eq!(back, payload);
                assert_eq!(used, c.len());
            }
        }
    }

    #[test]
    fn incompressible_falls_back_to_raw() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let payload: Vec<u8> = (0..2048).map(|_| rng.random()).collect();
        for codec in Codec::ALL {
            let c = encode_container(codec, &payload);
            let hdr = ContainerHeader::parse(&c).unwrap();
            assert_eq!(hdr.codec, Codec::None);
            assert_eq!(c.len(), payload.len() + CONTAINER_HEADER_LEN);
        }
    }

    #[test]
    fn favor_fast_prefers_lz_unless_deflate_is_much_smaller() {
        // Highly repetitive text: both shrink a lot, deflate far more.
        let text: Vec<u8> = b"abcdefgh".iter().cycle().take(8192).copied().collect();
        let (used, out) = Codec::FavorFast.compress(&text);
        let fast = Codec::LzFast.compress(&text).1;
        let slow = Codec::Deflate.compress(&text).1;
        let expect = if (slow.len() as f64) < fast.len() as f64 * 0.8 {
            Codec::Deflate
        } else {
            Codec::LzFast
        };
        assert_eq!(used, expect);
        assert_eq!(out.len(), if used == Codec::Deflate { slow.len() } else { fast.len() });
        let hdr = ContainerHeader::parse(&encode_container(Codec::FavorFast, &text)).unwrap();
        assert_eq!(hdr.codec, expect);
    }

    #[test]
    fn corrupt_container_is_detected() {
        let mut c = encode_container(Codec::Deflate, &[7u8; 500]);
        let last = c.len() - 1;
        c[last] ^= 0xFF;
        assert!(decode_container(&c).is_err());
        assert!(decode_container(&c[..5]).is_err());
    }

    proptest! {
        #[test]
        fn container_never_exceeds_raw_plus_header(payload in proptest::collection::vec(any::<u8>(), 0..4096), id in 0u8..4) {
            let codec = Codec::from_id(id).unwrap();
            let c = encode_container(codec, &payload);
            prop_assert!(c.len() <= payload.len() + CONTAINER_HEADER_LEN);
            prop_assert_eq!(decode_container(&c).unwrap().0, payload);
        }
    }
}
