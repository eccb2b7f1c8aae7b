//! Binary weight shard: one file per layer.
//!
//! Layout (24-byte header, then payload):
//!
//! | offset | size | field                                  |
//! |--------|------|----------------------------------------|
//! | 0      | 4    | magic `0x43494341`, big-endian ("CICA") |
//! | 4      | 2    | version = 1 (LE)                       |
//! | 6      | 2    | dtype, 0 = F32 (LE)                    |
//! | 8      | 4    | layer_index (LE)                       |
//! | 12     | 8    | element_count (LE)                     |
//! | 20     | 4    | crc32 (IEEE) of the payload (LE)       |
//! | 24     | 4·n  | payload, little-endian f32             |

use serde::{Deserialize, Serialize};

use super::CatalogError;

pub const SHARD_MAGIC: u32 = 0x4349_4341;
pub const SHARD_VERSION: u16 = 1;
pub const SHARD_HEADER_BYTES: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    F32,
}

impl DType {
    pub fn code(self) -> u16 {
        match self {
            DType::F32 => 0,
        }
    }

    pub fn from_code(code: u16) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightShard {
    pub layer_index: u32,
    pub dtype: DType,
    pub element_count: u64,
    pub payload: Vec<u8>,
    pub checksum: u32,
}

impl WeightShard {
    pub fn from_values(layer_index: u32, values: &[f32]) -> Self {
        let payload: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        let checksum = crc32fast::hash(&payload);
        Self { layer_index, dtype: DType::F32, element_count: values.len() as u64, payload, checksum }
    }

    /// Recomputes the payload CRC and compares with the stored checksum.
    pub fn verify(&self) -> Result<(), CatalogError> {
        let expected_len = self.element_count as usize * self.dtype.size();
        if self.payload.len() != expected_len {
            return Err(CatalogError::Format(format!(
                "payload is {} bytes, element_count implies {expected_len}",
                self.payload.len()
            )));
        }
        let actual = crc32fast::hash(&self.payload);
        if actual != self.checksum {
            return Err(CatalogError::CorruptShard { expected: self.checksum, actual });
        }
        Ok(())
    }

    pub fn values(&self) -> impl ExactSizeIterator<Item = f32> + '_ {
        self.payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn encoded_len(&self) -> usize {
        SHARD_HEADER_BYTES + self.payload.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&SHARD_MAGIC.to_be_bytes());
        out.extend_from_slice(&SHARD_VERSION.to_le_bytes());
        out.extend_from_slice(&self.dtype.code().to_le_bytes());
        out.extend_from_slice(&self.layer_index.to_le_bytes());
        out.extend_from_slice(&self.element_count.to_le_bytes());
        out.extend_from_slice(&self.checksum.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }
}

/// Parses and verifies one encoded shard.
pub fn parse_weight_shard(bytes: &[u8]) -> Result<WeightShard, CatalogError> {
    if bytes.len() < SHARD_HEADER_BYTES {
        // a recognisably wrong prefix is a format error even when short
        if bytes.len() >= 4 && bytes[..4] != SHARD_MAGIC.to_be_bytes() {
            return Err(CatalogError::Format("bad magic".into()));
        }
        return Err(CatalogError::Truncated { needed: SHARD_HEADER_BYTES, got: bytes.len() });
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());

    let magic = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
    if magic != SHARD_MAGIC {
        return Err(CatalogError::Format(format!("bad magic {magic:#010x}")));
    }
    let version = u16_at(4);
    if version != SHARD_VERSION {
        return Err(CatalogError::Format(format!("unsupported version {version}")));
    }
    let dtype =
        DType::from_code(u16_at(6)).ok_or_else(|| CatalogError::Format(format!("unknown dtype {}", u16_at(6))))?;
    let layer_index = u32_at(8);
    let element_count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let checksum = u32_at(20);

    let payload_len = usize::try_from(element_count)
        .ok()
        .and_then(|n| n.checked_mul(dtype.size()))
        .ok_or_else(|| CatalogError::Format(format!("element_count {element_count} overflows")))?;
    let needed = SHARD_HEADER_BYTES + payload_len;
    if bytes.len() < needed {
        return Err(CatalogError::Truncated { needed, got: bytes.len() });
    }
    if bytes.len() > needed {
        return Err(CatalogError::Format(format!("{} trailing bytes", bytes.len() - needed)));
    }
    let shard =
        WeightShard { layer_index, dtype, element_count, payload: bytes[SHARD_HEADER_BYTES..].to_vec(), checksum };
    shard.verify()?;
    Ok(shard)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_two_elements() {
        let shard = WeightShard::from_values(3, &[1.5, -2.25]);
        assert_eq!(parse_weight_shard(&shard.to_bytes()).unwrap(), shard);
    }

    #[test]
    fn header_layout_is_bit_exact() {
        let shard = WeightShard::from_values(0x0102_0304, &[1.0]);
        let b = shard.to_bytes();
        assert_eq!(&b[0..4], b"CICA");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(&b[6..8], &[0, 0]);
        assert_eq!(&b[8..12], &[4, 3, 2, 1]);
        assert_eq!(&b[12..20], &[1, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&b[24..28], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 28);
    }

    #[test]
    fn flipped_payload_bit_is_corrupt() {
        let mut b = WeightShard::from_values(0, &[1.0, 2.0]).to_bytes();
        b[SHARD_HEADER_BYTES + 5] ^= 0x10;
        assert!(matches!(parse_weight_shard(&b), Err(CatalogError::CorruptShard { .. })));
    }

    #[test]
    fn header_only_is_truncated() {
        let b = WeightShard::from_values(0, &[1.0, 2.0]).to_bytes();
        assert!(matches!(
            parse_weight_shard(&b[..SHARD_HEADER_BYTES]),
            Err(CatalogError::Truncated { needed: 32, got: 24 })
        ));
        assert!(matches!(parse_weight_shard(&[]), Err(CatalogError::Truncated { .. })));
    }

    #[test]
    fn bad_magic_and_trailing_bytes() {
        let mut b = WeightShard::from_values(0, &[1.0]).to_bytes();
        b[0] = b'X';
        assert!(matches!(parse_weight_shard(&b), Err(CatalogError::Format(_))));
        let mut b = WeightShard::from_values(0, &[1.0]).to_bytes();
        b.push(0);
        assert!(matches!(parse_weight_shard(&b), Err(CatalogError::Format(_))));
    }
}
