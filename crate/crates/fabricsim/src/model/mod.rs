//! Shared identifier, address, packet, and control-message vocabulary.
//!
//! All value types here are immutable and plain data; they are safe to
//! move between execution contexts and carry no interior mutability.
//! Width invariants (24-bit virtual network ids, 16-bit group tags) are
//! enforced at construction so no out-of-range identifier can exist in a
//! running simulation.

mod addr;
mod message;
mod packet;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use addr::{AddrFamily, OverlayAddr, UnderlayAddr};
pub use message::{
    AuthOutcome, AuthReply, AuthRequestKind, AuthResult, ConnectivityRule, ControlDest,
    ControlMessage, EndpointRecord, FibUpdate, MapQuery, MappingEntry, MappingKey, Outbound,
    RuleAction,
};
pub use packet::{encapsulate, decapsulate, DecapError, EncapPacket, INITIAL_TTL};

/// Construction errors for the core value types.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("virtual network id {0} does not fit in 24 bits")]
    VnOutOfRange(u32),
    #[error("group id {0} does not fit in 16 bits")]
    GroupOutOfRange(u32),
    #[error("prefix length {prefix_len} exceeds {family} width")]
    PrefixTooLong { prefix_len: u8, family: AddrFamily },
    #[error("address value does not fit in {family} width")]
    AddrOutOfRange { family: AddrFamily },
}

/// 24-bit virtual network identifier. Macro-segmentation domain; routing
/// state never crosses virtual networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct Vn(u32);

impl Vn {
    pub const MAX: u32 = (1 << 24) - 1;

    pub fn new(value: u32) -> Result<Self, ModelError> {
        if value > Self::MAX {
            Err(ModelError::VnOutOfRange(value))
        } else {
            Ok(Self(value))
        }
    }

    pub fn value(&self) -> u32 {
        self.0
    }
}

impl TryFrom<u32> for Vn {
    type Error = ModelError;
    fn try_from(value: u32) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<Vn> for u32 {
    fn from(vn: Vn) -> u32 {
        vn.0
    }
}

impl fmt::Display for Vn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "vn{}", self.0)
    }
}

/// 16-bit group tag carried in the data plane and matched by group ACLs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct GroupId(u16);

impl GroupId {
    pub const fn new(value: u16) -> Self {
        Self(value)
    }

    pub fn value(&self) -> u16 {
        self.0
    }
}

impl TryFrom<u32> for GroupId {
    type Error = ModelError;
    fn try_from(value: u32) -> Result<Self, Self::Error> {
        u16::try_from(value)
            .map(Self)
            .map_err(|_| ModelError::GroupOutOfRange(value))
    }
}

impl From<GroupId> for u32 {
    fn from(g: GroupId) -> u32 {
        g.0 as u32
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "g{}", self.0)
    }
}

/// Opaque endpoint identifier (roster index in scenario files).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EndpointId(pub u32);

impl fmt::Display for EndpointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ep{}", self.0)
    }
}

/// Opaque authentication credential; compared by equality only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AuthToken(pub u64);

/// Switch port on an edge router.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PortId(pub u32);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vn_width_bound() {
        assert!(Vn::new(0).is_ok());
        assert!(Vn::new(Vn::MAX).is_ok());
        assert_eq!(Vn::new(1 << 24), Err(ModelError::VnOutOfRange(1 << 24)));
    }

    #[test]
    fn group_width_bound() {
        assert_eq!(GroupId::try_from(65535u32).unwrap().value(), 65535);
        assert_eq!(
            GroupId::try_from(65536u32),
            Err(ModelError::GroupOutOfRange(65536))
        );
    }
}
