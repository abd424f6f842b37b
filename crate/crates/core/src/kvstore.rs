//! Per-layer contiguous KV buffers.
//!
//! Each layer owns one flat buffer laid out as `[2, n_blocks, block_size,
//! n_kv_heads, head_dim]`: the key side (`k = 0`) for every block, then the
//! value side (`k = 1`). Buffers are sized once at construction and never
//! reallocated, so a block's address is a pure function of its id.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bf16::Bf16Pattern;

#[derive(Debug, Error)]
pub enum KvError {
    #[error("geometry field `{0}` must be positive")]
    ZeroDimension(&'static str),
    #[error("coordinate {coord:?} out of range for {geometry:?}")]
    OutOfRange { coord: Coord, geometry: KvGeometry },
    #[error("block {block} out of range ({n_blocks} blocks)")]
    BlockOutOfRange { block: usize, n_blocks: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("geometry descriptor: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KvGeometry {
    pub n_layers: usize,
    pub n_blocks: usize,
    pub block_size: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
}

impl KvGeometry {
    pub fn new(
        n_layers: usize,
        n_blocks: usize,
        block_size: usize,
        n_kv_heads: usize,
        head_dim: usize,
    ) -> Result<Self, KvError> {
        let g = Self {
            n_layers,
            n_blocks,
            block_size,
            n_kv_heads,
            head_dim,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), KvError> {
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("n_blocks", self.n_blocks),
            ("block_size", self.block_size),
            ("n_kv_heads", self.n_kv_heads),
            ("head_dim", self.head_dim),
        ] {
            if v == 0 {
                return Err(KvError::ZeroDimension(name));
            }
        }
        Ok(())
    }

    /// Elements of one token on one side: `H * D`.
    pub fn token_stride(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    /// Elements of one block on one side: `B * H * D`.
    pub fn block_stride(&self) -> usize {
        self.block_size * self.token_stride()
    }

    /// Elements of one side of a layer: `N_blocks * B * H * D`.
    pub fn side_stride(&self) -> usize {
        self.n_blocks * self.block_stride()
    }

    /// Key plus value elements of one block in one layer: `2 * B * H * D`.
    pub fn page_size_elements(&self) -> usize {
        2 * self.block_stride()
    }

    pub fn layer_len(&self) -> usize {
        2 * self.side_stride()
    }

    /// Bytes of one block across every layer, both sides.
    pub fn block_byte_len(&self) -> usize {
        self.n_layers * self.page_size_elements() * 2
    }

    pub fn contains(&self, c: &Coord) -> bool {
        c.layer < self.n_layers
            && c.block < self.n_blocks
            && c.slot < self.block_size
            && c.head < self.n_kv_heads
            && c.channel < self.head_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KvSide {
    Key = 0,
    Value = 1,
}

impl KvSide {
    pub const BOTH: [KvSide; 2] = [KvSide::Key, KvSide::Value];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Address of one element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Coord {
    pub layer: usize,
    pub side: KvSide,
    pub block: usize,
    pub slot: usize,
    pub head: usize,
    pub channel: usize,
}

/// Offset of `c` inside its layer buffer.
///
/// Panics in debug builds when `c` is out of range; use [`checked_offset`]
/// for untrusted coordinates.
#[inline]
pub fn linear_offset(g: &KvGeometry, c: &Coord) -> usize {
    debug_assert!(g.contains(c), "coordinate {c:?} outside {g:?}");
    c.side.index() * g.side_stride()
        + c.block * g.block_stride()
        + c.slot * g.token_stride()
        + c.head * g.head_dim
        + c.channel
}

pub fn checked_offset(g: &KvGeometry, c: &Coord) -> Result<usize, KvError> {
    if g.contains(c) {
        Ok(linear_offset(g, c))
    } else {
        Err(KvError::OutOfRange {
            coord: *c,
            geometry: *g,
        })
    }
}

#[derive(Clone)]
pub struct KvStore {
    geometry: KvGeometry,
    layers: Vec<Box<[Bf16Pattern]>>,
}

impl std::fmt::Debug for KvStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KvStore")
            .field("geometry", &self.geometry)
            .finish_non_exhaustive()
    }
}

impl KvStore {
    /// Zero-filled store.
    pub fn new(geometry: KvGeometry) -> Result<Self, KvError> {
        geometry.validate()?;
        let layers = (0..geometry.n_layers)
            .map(|_| vec![Bf16Pattern::ZERO; geometry.layer_len()].into_boxed_slice())
            .collect();
        Ok(Self { geometry, layers })
    }

    pub fn geometry(&self) -> &KvGeometry {
        &self.geometry
    }

    pub fn read(&self, c: &Coord) -> Result<Bf16Pattern, KvError> {
        let off = checked_offset(&self.geometry, c)?;
        Ok(self.layers[c.layer][off])
    }

    pub fn write(&mut self, c: &Coord, b: Bf16Pattern) -> Result<(), KvError> {
        let off = checked_offset(&self.geometry, c)?;
        self.layers[c.layer][off] = b;
        Ok(())
    }

    /// All heads of one token on one side, `H * D` elements.
    #[inline]
    pub fn token(&self, layer: usize, side: KvSide, block: usize, slot: usize) -> &[Bf16Pattern] {
        let start = self.token_start(side, block, slot);
        &self.layers[layer][start..start + self.geometry.token_stride()]
    }

    #[inline]
    pub fn token_mut(
        &mut self,
        layer: usize,
        side: KvSide,
        block: usize,
        slot: usize,
    ) -> &mut [Bf16Pattern] {
        let start = self.token_start(side, block, slot);
        let len = self.geometry.token_stride();
        &mut self.layers[layer][start..start + len]
    }

    #[inline]
    fn token_start(&self, side: KvSide, block: usize, slot: usize) -> usize {
        let g = &self.geometry;
        assert!(block < g.n_blocks && slot < g.block_size);
        side.index() * g.side_stride() + block * g.block_stride() + slot * g.token_stride()
    }

    /// One block's elements on one side of one layer.
    pub fn block_side(&self, layer: usize, side: KvSide, block: usize) -> &[Bf16Pattern] {
        let start = self.token_start(side, block, 0);
        &self.layers[layer][start..start + self.geometry.block_stride()]
    }

    pub fn layer(&self, layer: usize) -> &[Bf16Pattern] {
        &self.layers[layer]
    }

    /// Canonical byte image of a block: layers ascending, key side then
    /// value side, slot-major then head then channel, little-endian words.
    pub fn block_bytes(&self, block: usize) -> Result<Vec<u8>, KvError> {
        let mut out = Vec::with_capacity(self.geometry.block_byte_len());
        self.block_bytes_into(block, &mut out)?;
        Ok(out)
    }

    pub fn block_bytes_into(&self, block: usize, out: &mut Vec<u8>) -> Result<(), KvError> {
        let g = &self.geometry;
        if block >= g.n_blocks {
            return Err(KvError::BlockOutOfRange {
                block,
                n_blocks: g.n_blocks,
            });
        }
        out.clear();
        for layer in 0..g.n_layers {
            for side in KvSide::BOTH {
                for w in self.block_side(layer, side, block) {
                    out.extend_from_slice(&w.to_le_bytes());
                }
            }
        }
        Ok(())
    }

    /// Raw dump: `geometry.json` plus one `layer_<i>.bin` of little-endian words per layer.
    pub fn dump(&self, dir: &Path) -> Result<(), KvError> {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("geometry.json"),
            serde_json::to_vec_pretty(&self.geometry)?,
        )?;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut f = fs::File::create(dir.join(format!("layer_{i}.bin")))?;
            let bytes: Vec<u8> = layer.iter().flat_map(|w| w.to_le_bytes()).collect();
            f.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, KvError> {
        let geometry: KvGeometry = serde_json::from_slice(&fs::read(dir.join("geometry.json"))?)?;
        let mut store = Self::new(geometry)?;
        for i in 0..geometry.n_layers {
            let bytes = fs::read(dir.join(format!("layer_{i}.bin")))?;
            if bytes.len() != geometry.layer_len() * 2 {
                return Err(KvError::Io(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("layer_{i}.bin has {} bytes", bytes.len()),
                )));
            }
            for (dst, src) in store.layers[i].iter_mut().zip(bytes.chunks_exact(2)) {
                *dst = Bf16Pattern::from_le_bytes([src[0], src[1]]);
            }
        }
        Ok(store)
    }
}
