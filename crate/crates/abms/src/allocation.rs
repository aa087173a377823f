//! Bandwidth arithmetic: the per-user floor and the adaptive allocation.
//!
//! The floor is the institution's total bandwidth divided evenly across its
//! estimated users. A user's allocation then scales with the educational
//! share of their browsing, from the floor up to exactly twice the floor.
//! All values are integer Kbps; the intermediate ratio is exact.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AllocationError {
    #[error("bandwidth floor must be at least 1 Kbps")]
    ZeroFloor,
    #[error("{tbi} Kbps across {enu} users leaves no whole Kbps per user")]
    InvalidPolicy { tbi: u64, enu: u64 },
    #[error("educational count {nes} exceeds total count {tsa}")]
    CountsOutOfRange { nes: u64, tsa: u64 },
}

/// The floor, its optional derivation inputs, and the implied 2x ceiling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocationPolicy {
    bw_min: u64,
    tbi: Option<u64>,
    enu: Option<u64>,
}

impl AllocationPolicy {
    /// Policy from an explicit floor.
    pub fn from_bw_min(bw_min: u64) -> Result<Self, AllocationError> {
        if bw_min == 0 {
            return Err(AllocationError::ZeroFloor);
        }
        Ok(Self {
            bw_min,
            tbi: None,
            enu: None,
        })
    }

    /// Policy with the floor derived from total capacity and user count.
    pub fn from_capacity(tbi: u64, enu: u64) -> Result<Self, AllocationError> {
        let bw_min = minimum_bandwidth(tbi, enu)?;
        Ok(Self {
            bw_min,
            tbi: Some(tbi),
            enu: Some(enu),
        })
    }

    pub fn bw_min(&self) -> u64 {
        self.bw_min
    }

    /// Hard cap on any allocation: twice the floor.
    pub fn ceiling(&self) -> u64 {
        2 * self.bw_min
    }

    pub fn tbi(&self) -> Option<u64> {
        self.tbi
    }

    pub fn enu(&self) -> Option<u64> {
        self.enu
    }

    pub fn allocation_for(&self, nes: u64, tsa: u64) -> Result<u64, AllocationError> {
        compute_allocation(self.bw_min, nes, tsa)
    }
}

/// Per-user floor in Kbps: total institutional bandwidth split across the
/// estimated user count, rounded down so the floor never oversubscribes.
pub fn minimum_bandwidth(tbi: u64, enu: u64) -> Result<u64, AllocationError> {
    if enu == 0 {
        return Err(AllocationError::InvalidPolicy { tbi, enu });
    }
    let bw_min = tbi / enu;
    if bw_min == 0 {
        return Err(AllocationError::InvalidPolicy { tbi, enu });
    }
    Ok(bw_min)
}

/// Adaptive allocation in Kbps: `bw_min + (nes/tsa) * bw_min`, rounded half
/// away from zero. With no views yet (`tsa = 0`) the result is the floor.
///
/// The result always lies in `[bw_min, 2 * bw_min]`.
pub fn compute_allocation(bw_min: u64, nes: u64, tsa: u64) -> Result<u64, AllocationError> {
    if nes > tsa {
        return Err(AllocationError::CountsOutOfRange { nes, tsa });
    }
    if tsa == 0 {
        return Ok(bw_min);
    }
    // round(bw_min * (tsa + nes) / tsa) in exact integer arithmetic:
    // floor((2 * bw_min * (tsa + nes) + tsa) / (2 * tsa)).
    let bw = bw_min as u128;
    let numerator = 2 * bw * (tsa as u128 + nes as u128) + tsa as u128;
    Ok((numerator / (2 * tsa as u128)) as u64)
}
