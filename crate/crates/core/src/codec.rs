//! Lossless block codecs with an optional byte-shuffle pre-filter.
//!
//! Bodies are standard frames (lz4 frame, zstd frame, zlib stream) so any
//! foreign reader with the matching library can decode them. The "Blosc-style"
//! configuration is `shuffle = true` with `lz4`.

use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Codec {
    None,
    Lz4,
    Zstd,
    Zlib,
}

impl Codec {
    pub const ALL: [Codec; 4] = [Codec::None, Codec::Lz4, Codec::Zstd, Codec::Zlib];

    pub fn name(self) -> &'static str {
        match self {
            Codec::None => "none",
            Codec::Lz4 => "lz4",
            Codec::Zstd => "zstd",
            Codec::Zlib => "zlib",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Codec::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::config(format!("unknown codec {s:?}")))
    }

    pub fn level_range(self) -> std::ops::RangeInclusive<i32> {
        match self {
            Codec::None => 0..=0,
            Codec::Lz4 => 0..=12,
            Codec::Zstd => 1..=22,
            Codec::Zlib => 0..=9,
        }
    }

    pub fn default_level(self) -> i32 {
        match self {
            Codec::None => 0,
            Codec::Lz4 => 1,
            Codec::Zstd => 3,
            Codec::Zlib => 6,
        }
    }
}

impl fmt::Display for Codec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CodecSpec {
    pub codec: Codec,
    #[serde(default)]
    pub level: i32,
    #[serde(default)]
    pub shuffle: bool,
}

impl Default for CodecSpec {
    fn default() -> Self {
        Self::none()
    }
}

impl CodecSpec {
    pub const fn none() -> Self {
        Self {
            codec: Codec::None,
            level: 0,
            shuffle: false,
        }
    }

    /// zstd level 3 with byte shuffle, the default once compression is on.
    pub const fn default_compressed() -> Self {
        Self {
            codec: Codec::Zstd,
            level: 3,
            shuffle: true,
        }
    }

    pub fn new(codec: Codec, level: i32, shuffle: bool) -> Self {
        Self { codec, level, shuffle }.normalized()
    }

    pub fn with_default_level(codec: Codec, shuffle: bool) -> Self {
        Self::new(codec, codec.default_level(), shuffle)
    }

    /// `none` ignores level and shuffle.
    pub fn normalized(self) -> Self {
        if self.codec == Codec::None {
            Self::none()
        } else {
            self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.codec == Codec::None {
            return Ok(());
        }
        let range = self.codec.level_range();
        if !range.contains(&self.level) {
            return Err(Error::config(format!(
                "{} level {} outside {}..={}",
                self.codec,
                self.level,
                range.start(),
                range.end()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayloadHeader {
    pub raw_nbytes: u64,
    pub codec: Codec,
    pub level: i32,
    pub shuffle: bool,
    pub elem_size: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoredPayload {
    pub header: PayloadHeader,
    pub body: Vec<u8>,
}

impl StoredPayload {
    pub fn spec(&self) -> CodecSpec {
        CodecSpec {
            codec: self.header.codec,
            level: self.header.level,
            shuffle: self.header.shuffle,
        }
    }
}

pub fn shuffle_bytes(raw: &[u8], elem_size: usize) -> Result<Vec<u8>> {
    check_divisible(raw.len(), elem_size)?;
    if elem_size <= 1 {
        return Ok(raw.to_vec());
    }
    let n = raw.len() / elem_size;
    let mut out = vec![0u8; raw.len()];
    for (j, elem) in raw.chunks_exact(elem_size).enumerate() {
        for (i, &b) in elem.iter().enumerate() {
            out[i * n + j] = b;
        }
    }
    Ok(out)
}

pub fn unshuffle_bytes(shuffled: &[u8], elem_size: usize) -> Result<Vec<u8>> {
    check_divisible(shuffled.len(), elem_size)?;
    if elem_size <= 1 {
        return Ok(shuffled.to_vec());
    }
    let n = shuffled.len() / elem_size;
    let mut out = vec![0u8; shuffled.len()];
    for (j, elem) in out.chunks_exact_mut(elem_size).enumerate() {
        for (i, b) in elem.iter_mut().enumerate() {
            *b = shuffled[i * n + j];
        }
    }
    Ok(out)
}

fn check_divisible(len: usize, elem_size: usize) -> Result<()> {
    if elem_size == 0 || len % elem_size != 0 {
        return Err(Error::Shape(format!(
            "length {len} not divisible by element size {elem_size}"
        )));
    }
    Ok(())
}

thread_local! {
    // context setup dominates for block-sized inputs
    static ZSTD: std::cell::RefCell<Option<(i32, zstd::bulk::Compressor<'static>)>> =
        const { std::cell::RefCell::new(None) };
}

fn compress(codec: Codec, level: i32, data: &[u8]) -> Result<Vec<u8>> {
    let codec_err = |e: std::io::Error| Error::Codec(format!("{codec} compress: {e}"));
    match codec {
        Codec::None => Ok(data.to_vec()),
        Codec::Zstd => ZSTD.with(|cell| {
            let mut slot = cell.borrow_mut();
            if slot.as_ref().map_or(true, |(l, _)| *l != level) {
                *slot = Some((level, zstd::bulk::Compressor::new(level).map_err(codec_err)?));
            }
            let (_, c) = slot.as_mut().unwrap();
            c.compress(data).map_err(codec_err)
        }),
        Codec::Lz4 => {
            let mut enc = lz4::EncoderBuilder::new()
                .level(level as u32)
                .build(Vec::with_capacity(data.len() / 2))
                .map_err(codec_err)?;
            enc.write_all(data).map_err(codec_err)?;
            let (out, res) = enc.finish();
            res.map_err(codec_err)?;
            Ok(out)
        }
        Codec::Zlib => {
            let mut enc = flate2::write::ZlibEncoder::new(
                Vec::with_capacity(data.len() / 2),
                flate2::Compression::new(level as u32),
            );
            enc.write_all(data).map_err(codec_err)?;
            enc.finish().map_err(codec_err)
        }
    }
}

fn decompress(codec: Codec, body: &[u8], raw_nbytes: usize) -> Result<Vec<u8>> {
    let codec_err = |e: std::io::Error| Error::Codec(format!("{codec} decompress: {e}"));
    let limit = raw_nbytes as u64 + 1;
    let mut out = Vec::with_capacity(raw_nbytes);
    match codec {
        Codec::None => out.extend_from_slice(body),
        Codec::Zstd => {
            let mut dec = zstd::stream::read::Decoder::new(body).map_err(codec_err)?;
            (&mut dec).take(limit).read_to_end(&mut out).map_err(codec_err)?;
        }
        Codec::Lz4 => {
            let mut dec = lz4::Decoder::new(body).map_err(codec_err)?;
            (&mut dec).take(limit).read_to_end(&mut out).map_err(codec_err)?;
            // a frame missing its end mark decodes silently otherwise
            dec.finish().1.map_err(codec_err)?;
        }
        Codec::Zlib => {
            let mut dec = flate2::read::ZlibDecoder::new(body);
            (&mut dec).take(limit).read_to_end(&mut out).map_err(codec_err)?;
            if dec.total_in() != body.len() as u64 {
                return Err(Error::Codec("zlib: trailing bytes after stream".into()));
            }
        }
    }
    if out.len() != raw_nbytes {
        return Err(Error::format(format!(
            "{codec} body decodes to {} bytes, header says {raw_nbytes}",
            out.len()
        )));
    }
    Ok(out)
}

/// Encodes one block. Falls back to storing raw bytes (recorded as codec
/// `none`) when compression does not shrink the block.
pub fn encode(raw: &[u8], elem_size: usize, spec: CodecSpec) -> Result<StoredPayload> {
    let spec = spec.normalized();
    spec.validate()?;
    let stored_raw = |raw: &[u8]| StoredPayload {
        header: PayloadHeader {
            raw_nbytes: raw.len() as u64,
            codec: Codec::None,
            level: 0,
            shuffle: false,
            elem_size: elem_size as u32,
        },
        body: raw.to_vec(),
    };
    if spec.codec == Codec::None {
        return Ok(stored_raw(raw));
    }
    let body = if spec.shuffle {
        compress(spec.codec, spec.level, &shuffle_bytes(raw, elem_size)?)?
    } else {
        compress(spec.codec, spec.level, raw)?
    };
    if body.len() >= raw.len() {
        return Ok(stored_raw(raw));
    }
    Ok(StoredPayload {
        header: PayloadHeader {
            raw_nbytes: raw.len() as u64,
            codec: spec.codec,
            level: spec.level,
            shuffle: spec.shuffle,
            elem_size: elem_size as u32,
        },
        body,
    })
}

pub fn decode(p: &StoredPayload) -> Result<Vec<u8>> {
    let h = &p.header;
    let raw_nbytes = usize::try_from(h.raw_nbytes)
        .map_err(|_| Error::format("raw_nbytes does not fit in memory"))?;
    if h.codec == Codec::None {
        if p.body.len() != raw_nbytes {
            return Err(Error::format(format!(
                "uncompressed body has {} bytes, header says {raw_nbytes}",
                p.body.len()
            )));
        }
        return Ok(p.body.clone());
    }
    let out = decompress(h.codec, &p.body, raw_nbytes)?;
    if h.shuffle {
        unshuffle_bytes(&out, h.elem_size as usize)
    } else {
        Ok(out)
    }
}

/// Wire form used by the staging DATA frame and shm segments:
/// u32 LE header length, header JSON, body.
pub fn payload_to_wire(p: &StoredPayload) -> Vec<u8> {
    let header = serde_json::to_vec(&p.header).expect("header serializes");
    let mut out = Vec::with_capacity(4 + header.len() + p.body.len());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&p.body);
    out
}

/// Parses a wire payload; `body_len` bounds the body when the record is
/// embedded in a larger buffer.
pub fn payload_from_wire(bytes: &[u8], body_len: Option<usize>) -> Result<StoredPayload> {
    if bytes.len() < 4 {
        return Err(Error::format("payload shorter than its length prefix"));
    }
    let hlen = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let rest = &bytes[4..];
    if rest.len() < hlen {
        return Err(Error::format("payload header truncated"));
    }
    let header: PayloadHeader = serde_json::from_slice(&rest[..hlen])?;
    let body = &rest[hlen..];
    let body = match body_len {
        Some(n) if n > body.len() => return Err(Error::format("payload body truncated")),
        Some(n) => &body[..n],
        None => body,
    };
    Ok(StoredPayload {
        header,
        body: body.to_vec(),
    })
}
