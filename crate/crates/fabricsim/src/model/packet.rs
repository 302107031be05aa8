//! Encapsulated packet record and the encap/decap pair.
//!
//! Packets are logical records, not byte buffers. The outer header names
//! underlay routers, the shim carries the 24-bit virtual network and the
//! 16-bit source group tag, and the inner header names overlay endpoints.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{GroupId, OverlayAddr, UnderlayAddr, Vn};

/// Hop budget given to every freshly encapsulated packet. Fabric
/// diameters are small; this bounds transient forwarding loops.
pub const INITIAL_TTL: u8 = 16;

/// An encapsulated overlay packet in flight on the underlay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncapPacket {
    pub outer_src: UnderlayAddr,
    pub outer_dst: UnderlayAddr,
    pub vn: Vn,
    pub group: GroupId,
    pub inner_src: OverlayAddr,
    pub inner_dst: OverlayAddr,
    pub payload_len: u32,
    pub ttl: u8,
}

impl EncapPacket {
    /// Copy of this packet re-encapsulated toward a new underlay
    /// destination, spending one hop of the TTL budget. Returns `None`
    /// when the budget is exhausted.
    pub fn reencap(&self, from: UnderlayAddr, to: UnderlayAddr) -> Option<Self> {
        if self.ttl <= 1 {
            return None;
        }
        Some(Self {
            outer_src: from,
            outer_dst: to,
            ttl: self.ttl - 1,
            ..*self
        })
    }
}

/// Build an encapsulated packet toward `locator`, stamping the virtual
/// network and source group into the shim header verbatim.
pub fn encapsulate(
    inner_dst: OverlayAddr,
    inner_src: OverlayAddr,
    vn: Vn,
    group: GroupId,
    locator: UnderlayAddr,
    self_locator: UnderlayAddr,
    payload_len: u32,
) -> EncapPacket {
    EncapPacket {
        outer_src: self_locator,
        outer_dst: locator,
        vn,
        group,
        inner_src,
        inner_dst,
        payload_len,
        ttl: INITIAL_TTL,
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecapError {
    #[error("ttl exhausted")]
    TtlExpired,
}

/// Strip the outer header, returning the shim and inner fields. Packets
/// that arrive with no remaining hop budget are a drop signal.
pub fn decapsulate(
    pkt: &EncapPacket,
) -> Result<(Vn, GroupId, OverlayAddr, OverlayAddr), DecapError> {
    if pkt.ttl == 0 {
        return Err(DecapError::TtlExpired);
    }
    Ok((pkt.vn, pkt.group, pkt.inner_dst, pkt.inner_src))
}

// Required for serde only on types embedded in exported records.
impl Serialize for EncapPacket {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut s = serializer.serialize_struct("EncapPacket", 8)?;
        s.serialize_field("outer_src", &self.outer_src)?;
        s.serialize_field("outer_dst", &self.outer_dst)?;
        s.serialize_field("vn", &self.vn)?;
        s.serialize_field("group", &self.group)?;
        s.serialize_field("inner_src", &self.inner_src)?;
        s.serialize_field("inner_dst", &self.inner_dst)?;
        s.serialize_field("payload_len", &self.payload_len)?;
        s.serialize_field("ttl", &self.ttl)?;
        s.end()
    }
}

impl<'de> Deserialize<'de> for EncapPacket {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            outer_src: UnderlayAddr,
            outer_dst: UnderlayAddr,
            vn: Vn,
            group: GroupId,
            inner_src: OverlayAddr,
            inner_dst: OverlayAddr,
            payload_len: u32,
            ttl: u8,
        }
        let r = Raw::deserialize(deserializer)?;
        Ok(EncapPacket {
            outer_src: r.outer_src,
            outer_dst: r.outer_dst,
            vn: r.vn,
            group: r.group,
            inner_src: r.inner_src,
            inner_dst: r.inner_dst,
            payload_len: r.payload_len,
            ttl: r.ttl,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::Ipv4Addr;

    fn ul(a: [u8; 4]) -> UnderlayAddr {
        UnderlayAddr::new(Ipv4Addr::new(a[0], a[1], a[2], a[3]))
    }

    #[test]
    fn encapsulate_copies_fields() {
        let pkt = encapsulate(
            OverlayAddr::ipv4(Ipv4Addr::new(10, 0, 1, 5)),
            OverlayAddr::ipv4(Ipv4Addr::new(10, 0, 2, 9)),
            Vn::new(100).unwrap(),
            GroupId::new(20),
            ul([192, 0, 2, 7]),
            ul([192, 0, 2, 1]),
            1500,
        );
        assert_eq!(pkt.outer_dst, ul([192, 0, 2, 7]));
        assert_eq!(pkt.outer_src, ul([192, 0, 2, 1]));
        assert_eq!(pkt.vn.value(), 100);
        assert_eq!(pkt.group.value(), 20);
        assert_eq!(pkt.ttl, INITIAL_TTL);
    }

    #[test]
    fn boundary_identifiers_accepted() {
        let pkt = encapsulate(
            OverlayAddr::ipv4(Ipv4Addr::new(10, 0, 1, 5)),
            OverlayAddr::ipv4(Ipv4Addr::new(10, 0, 2, 9)),
            Vn::new(16_777_215).unwrap(),
            GroupId::new(65_535),
            ul([192, 0, 2, 7]),
            ul([192, 0, 2, 1]),
            64,
        );
        assert_eq!(pkt.vn.value(), 16_777_215);
        assert_eq!(pkt.group.value(), 65_535);
    }

    #[test]
    fn decap_round_trip() {
        let dst = OverlayAddr::ipv4(Ipv4Addr::new(10, 0, 1, 5));
        let src = OverlayAddr::ipv4(Ipv4Addr::new(10, 0, 2, 9));
        let pkt = encapsulate(
            dst,
            src,
            Vn::new(100).unwrap(),
            GroupId::new(20),
            ul([192, 0, 2, 7]),
            ul([192, 0, 2, 1]),
            1500,
        );
        let (vn, group, inner_dst, inner_src) = decapsulate(&pkt).unwrap();
        assert_eq!(vn.value(), 100);
        assert_eq!(group.value(), 20);
        assert_eq!(inner_dst, dst);
        assert_eq!(inner_src, src);
    }

    #[test]
    fn ttl_zero_is_drop_signal() {
        let mut pkt = encapsulate(
            OverlayAddr::ipv4(Ipv4Addr::new(10, 0, 1, 5)),
            OverlayAddr::ipv4(Ipv4Addr::new(10, 0, 2, 9)),
            Vn::new(1).unwrap(),
            GroupId::new(1),
            ul([192, 0, 2, 7]),
            ul([192, 0, 2, 1]),
            64,
        );
        pkt.ttl = 0;
        assert_eq!(decapsulate(&pkt), Err(DecapError::TtlExpired));
    }

    #[test]
    fn reencap_spends_hops() {
        let mut pkt = encapsulate(
            OverlayAddr::ipv4(Ipv4Addr::new(10, 0, 1, 5)),
            OverlayAddr::ipv4(Ipv4Addr::new(10, 0, 2, 9)),
            Vn::new(1).unwrap(),
            GroupId::new(1),
            ul([192, 0, 2, 7]),
            ul([192, 0, 2, 1]),
            64,
        );
        pkt.ttl = 2;
        let hop = pkt.reencap(ul([192, 0, 2, 7]), ul([192, 0, 2, 9])).unwrap();
        assert_eq!(hop.ttl, 1);
        assert!(hop.reencap(ul([192, 0, 2, 9]), ul([192, 0, 2, 7])).is_none());
    }
}
