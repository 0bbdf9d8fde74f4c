//! DRAM geometry and the physical address <-> DRAM coordinate bijection.
//!
//! Every geometry count is a power of two, so a map is pure bit slicing:
//! the intra-burst offset occupies the lowest bits and the remaining fields
//! follow in `field_order`, least significant first.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    Channel,
    Rank,
    Bank,
    Row,
    Column,
}

impl Field {
    pub const ALL: [Field; 5] = [Field::Channel, Field::Rank, Field::Bank, Field::Row, Field::Column];

    pub fn name(self) -> &'static str {
        match self {
            Field::Channel => "channel",
            Field::Rank => "rank",
            Field::Bank => "bank",
            Field::Row => "row",
            Field::Column => "column",
        }
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MapError {
    #[error("geometry: {what} must be >= 1")]
    ZeroCount { what: &'static str },
    #[error("geometry: {what} = {value} is not a power of two")]
    NonPowerOfTwo { what: &'static str, value: u64 },
    #[error("geometry: burst_bytes {burst} is not a multiple of element_bytes {element}")]
    BurstElementMismatch { burst: u64, element: u64 },
    #[error("duplicate field `{0}` in field order")]
    DuplicateField(Field),
    #[error("field coverage: `{0}` missing from field order")]
    MissingField(Field),
    #[error("width mismatch for `{field}`: {width} bits given, geometry needs {expected}")]
    WidthMismatch { field: Field, width: u32, expected: u32 },
    #[error("address {addr:#x} out of range (capacity {capacity:#x})")]
    AddressOutOfRange { addr: u64, capacity: u64 },
    #[error("coordinate out of range: {field} = {value} (bound {bound})")]
    CoordOutOfRange { field: &'static str, value: u64, bound: u64 },
}

/// Physical organisation of the DRAM behind one memory controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DramGeometry {
    pub channels: u64,
    pub ranks_per_channel: u64,
    pub banks_per_rank: u64,
    pub rows_per_bank: u64,
    pub columns_per_row: u64,
    #[serde(default = "default_burst_bytes")]
    pub burst_bytes: u64,
    #[serde(default = "default_element_bytes")]
    pub element_bytes: u64,
}

fn default_burst_bytes() -> u64 {
    32
}

fn default_element_bytes() -> u64 {
    2
}

impl Default for DramGeometry {
    /// Desk-scale geometry: one channel, one rank, 16 banks, 64 rows of 32
    /// columns, 256-bit bursts of BF16 elements.
    fn default() -> Self {
        Self {
            channels: 1,
            ranks_per_channel: 1,
            banks_per_rank: 16,
            rows_per_bank: 64,
            columns_per_row: 32,
            burst_bytes: 32,
            element_bytes: 2,
        }
    }
}

impl DramGeometry {
    pub fn validate(&self) -> Result<(), MapError> {
        let counts = [
            ("channels", self.channels),
            ("ranks_per_channel", self.ranks_per_channel),
            ("banks_per_rank", self.banks_per_rank),
            ("rows_per_bank", self.rows_per_bank),
            ("columns_per_row", self.columns_per_row),
            ("burst_bytes", self.burst_bytes),
            ("element_bytes", self.element_bytes),
        ];
        for (what, value) in counts {
            if value == 0 {
                return Err(MapError::ZeroCount { what });
            }
            if !value.is_power_of_two() {
                return Err(MapError::NonPowerOfTwo { what, value });
            }
        }
        if !self.burst_bytes.is_multiple_of(self.element_bytes) {
            return Err(MapError::BurstElementMismatch { burst: self.burst_bytes, element: self.element_bytes });
        }
        Ok(())
    }

    pub fn elements_per_burst(&self) -> u64 {
        self.burst_bytes / self.element_bytes
    }

    pub fn total_capacity(&self) -> u64 {
        self.channels
            * self.ranks_per_channel
            * self.banks_per_rank
            * self.rows_per_bank
            * self.columns_per_row
            * self.burst_bytes
    }

    pub fn count(&self, field: Field) -> u64 {
        match field {
            Field::Channel => self.channels,
            Field::Rank => self.ranks_per_channel,
            Field::Bank => self.banks_per_rank,
            Field::Row => self.rows_per_bank,
            Field::Column => self.columns_per_row,
        }
    }

    pub fn bits(&self, field: Field) -> u32 {
        self.count(field).trailing_zeros()
    }

    pub fn row_bytes(&self) -> u64 {
        self.columns_per_row * self.burst_bytes
    }
}

/// A DRAM location down to the byte within a burst.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct DramCoord {
    pub channel: u64,
    pub rank: u64,
    pub bank: u64,
    pub row: u64,
    pub column: u64,
    pub burst_offset: u64,
}

impl DramCoord {
    pub fn get(&self, field: Field) -> u64 {
        match field {
            Field::Channel => self.channel,
            Field::Rank => self.rank,
            Field::Bank => self.bank,
            Field::Row => self.row,
            Field::Column => self.column,
        }
    }

    fn set(&mut self, field: Field, value: u64) {
        match field {
            Field::Channel => self.channel = value,
            Field::Rank => self.rank = value,
            Field::Bank => self.bank = value,
            Field::Row => self.row = value,
            Field::Column => self.column = value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddressMap {
    geometry: DramGeometry,
    /// (field, bit-width), least significant first, above the burst offset.
    field_order: Vec<(Field, u32)>,
}

impl AddressMap {
    /// Builds a map with widths derived from the geometry and validates it.
    pub fn new(geometry: DramGeometry, order: &[Field]) -> Result<Self, MapError> {
        geometry.validate()?;
        let field_order = order.iter().map(|&f| (f, geometry.bits(f))).collect();
        Self::with_widths(geometry, field_order)
    }

    /// Builds a map from explicit widths, validating them against the geometry.
    pub fn with_widths(geometry: DramGeometry, field_order: Vec<(Field, u32)>) -> Result<Self, MapError> {
        let map = Self { geometry, field_order };
        map.validate()?;
        Ok(map)
    }

    /// Channel and bank bits lowest, so consecutive bursts interleave across
    /// banks and channels, then columns, rank and row.
    pub fn host_interleaved(geometry: DramGeometry) -> Result<Self, MapError> {
        Self::new(geometry, &[Field::Channel, Field::Bank, Field::Column, Field::Rank, Field::Row])
    }

    pub fn geometry(&self) -> &DramGeometry {
        &self.geometry
    }

    pub fn field_order(&self) -> &[(Field, u32)] {
        &self.field_order
    }

    /// Accepts iff the map is a bijection over the geometry; reports the
    /// first violated constraint.
    pub fn validate(&self) -> Result<(), MapError> {
        self.geometry.validate()?;
        let mut seen = Vec::with_capacity(5);
        for &(field, width) in &self.field_order {
            if seen.contains(&field) {
                return Err(MapError::DuplicateField(field));
            }
            seen.push(field);
            let expected = self.geometry.bits(field);
            if width != expected {
                return Err(MapError::WidthMismatch { field, width, expected });
            }
        }
        if let Some(&missing) = Field::ALL.iter().find(|f| !seen.contains(f)) {
            return Err(MapError::MissingField(missing));
        }
        Ok(())
    }

    fn offset_bits(&self) -> u32 {
        self.geometry.burst_bytes.trailing_zeros()
    }

    pub fn decode(&self, addr: u64) -> Result<DramCoord, MapError> {
        let capacity = self.geometry.total_capacity();
        if addr >= capacity {
            return Err(MapError::AddressOutOfRange { addr, capacity });
        }
        let mut coord = DramCoord { burst_offset: addr & (self.geometry.burst_bytes - 1), ..Default::default() };
        let mut rest = addr >> self.offset_bits();
        for &(field, width) in &self.field_order {
            coord.set(field, rest & ((1u64 << width) - 1));
            rest >>= width;
        }
        Ok(coord)
    }

    pub fn encode(&self, coord: &DramCoord) -> Result<u64, MapError> {
        if coord.burst_offset >= self.geometry.burst_bytes {
            return Err(MapError::CoordOutOfRange {
                field: "burst_offset",
                value: coord.burst_offset,
                bound: self.geometry.burst_bytes,
            });
        }
        let mut addr = 0u64;
        let mut shift = self.offset_bits();
        for &(field, width) in &self.field_order {
            let value = coord.get(field);
            let bound = self.geometry.count(field);
            if value >= bound {
                return Err(MapError::CoordOutOfRange { field: field.name(), value, bound });
            }
            addr |= value << shift;
            shift += width;
        }
        Ok(addr | coord.burst_offset)
    }

    /// True when `row` occupies the most significant bits, i.e. each DRAM row
    /// index selects one contiguous physical address band.
    pub fn row_is_most_significant(&self) -> bool {
        self.field_order
            .iter()
            .rev()
            .find(|(_, w)| *w > 0)
            .is_none_or(|(f, _)| *f == Field::Row)
            || self.geometry.rows_per_bank == 1
    }

    /// Bytes spanned by one row index across all other fields.
    pub fn row_stride(&self) -> u64 {
        self.geometry.total_capacity() / self.geometry.rows_per_bank
    }
}
