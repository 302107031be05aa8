//! Overlay and underlay address types.
//!
//! Overlay addresses cover three families (IPv4, IPv6, MAC) in a single
//! prefix framework so the mapping store can index all of them the same
//! way. Bits beyond the prefix length are always zero; constructors
//! normalize on entry so equality and ordering are well defined.

use std::fmt;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Address family of an overlay address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AddrFamily {
    Ipv4,
    Ipv6,
    Mac,
}

impl AddrFamily {
    /// Bit width of addresses in this family.
    pub const fn bit_width(self) -> u8 {
        match self {
            AddrFamily::Ipv4 => 32,
            AddrFamily::Ipv6 => 128,
            AddrFamily::Mac => 48,
        }
    }
}

impl fmt::Display for AddrFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AddrFamily::Ipv4 => write!(f, "ipv4"),
            AddrFamily::Ipv6 => write!(f, "ipv6"),
            AddrFamily::Mac => write!(f, "mac"),
        }
    }
}

/// An overlay address or prefix: family, value bits, prefix length.
///
/// The value is stored right-aligned in `bits` (numeric value of the
/// address). Bits below the prefix boundary are zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OverlayAddr {
    family: AddrFamily,
    bits: u128,
    prefix_len: u8,
}

impl OverlayAddr {
    /// Build a prefix in the given family, masking bits beyond `prefix_len`.
    pub fn new(family: AddrFamily, bits: u128, prefix_len: u8) -> Result<Self, ModelError> {
        let width = family.bit_width();
        if prefix_len > width {
            return Err(ModelError::PrefixTooLong { prefix_len, family });
        }
        if width < 128 && bits >> width != 0 {
            return Err(ModelError::AddrOutOfRange { family });
        }
        Ok(Self { family, bits: mask_bits(bits, width, prefix_len), prefix_len })
    }

    /// IPv4 host address (/32).
    pub fn ipv4(addr: Ipv4Addr) -> Self {
        Self { family: AddrFamily::Ipv4, bits: u32::from(addr) as u128, prefix_len: 32 }
    }

    /// IPv4 prefix.
    pub fn ipv4_prefix(addr: Ipv4Addr, prefix_len: u8) -> Result<Self, ModelError> {
        Self::new(AddrFamily::Ipv4, u32::from(addr) as u128, prefix_len)
    }

    /// IPv6 host address (/128).
    pub fn ipv6(bits: u128) -> Self {
        Self { family: AddrFamily::Ipv6, bits, prefix_len: 128 }
    }

    /// MAC address. MAC entries are always full length (/48).
    pub fn mac(octets: [u8; 6]) -> Self {
        let mut bits = 0u128;
        for b in octets {
            bits = (bits << 8) | b as u128;
        }
        Self { family: AddrFamily::Mac, bits, prefix_len: 48 }
    }

    pub fn family(&self) -> AddrFamily {
        self.family
    }

    pub fn bits(&self) -> u128 {
        self.bits
    }

    pub fn prefix_len(&self) -> u8 {
        self.prefix_len
    }

    /// True when the prefix covers exactly one address.
    pub fn is_host(&self) -> bool {
        self.prefix_len == self.family.bit_width()
    }

    /// Re-apply the mask. Normalizing twice is a no-op.
    pub fn normalized(self) -> Self {
        Self {
            bits: mask_bits(self.bits, self.family.bit_width(), self.prefix_len),
            ..self
        }
    }

    /// Bit at position `i` counting from the most significant bit of the
    /// family width (bit 0 is the MSB).
    pub fn bit(&self, i: u8) -> bool {
        debug_assert!(i < self.family.bit_width());
        let width = self.family.bit_width();
        (self.bits >> (width - 1 - i)) & 1 == 1
    }

    /// True when `self` (as a prefix) covers `addr`.
    pub fn covers(&self, addr: &OverlayAddr) -> bool {
        self.family == addr.family
            && self.prefix_len <= addr.prefix_len
            && mask_bits(addr.bits, self.family.bit_width(), self.prefix_len) == self.bits
    }
}

impl fmt::Display for OverlayAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.family {
            AddrFamily::Ipv4 => {
                let v4 = Ipv4Addr::from(self.bits as u32);
                if self.is_host() {
                    write!(f, "{v4}")
                } else {
                    write!(f, "{v4}/{}", self.prefix_len)
                }
            }
            AddrFamily::Ipv6 => {
                let v6 = std::net::Ipv6Addr::from(self.bits);
                if self.is_host() {
                    write!(f, "{v6}")
                } else {
                    write!(f, "{v6}/{}", self.prefix_len)
                }
            }
            AddrFamily::Mac => {
                let b = self.bits;
                write!(
                    f,
                    "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
                    (b >> 40) as u8,
                    (b >> 32) as u8,
                    (b >> 24) as u8,
                    (b >> 16) as u8,
                    (b >> 8) as u8,
                    b as u8
                )
            }
        }
    }
}

fn mask_bits(bits: u128, width: u8, prefix_len: u8) -> u128 {
    if prefix_len == 0 {
        return 0;
    }
    let host_bits = (width - prefix_len) as u32;
    (bits >> host_bits) << host_bits
}

/// Underlay locator of an edge or border router. Unique per router.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UnderlayAddr(Ipv4Addr);

impl UnderlayAddr {
    pub fn new(addr: Ipv4Addr) -> Self {
        Self(addr)
    }

    pub fn addr(&self) -> Ipv4Addr {
        self.0
    }
}

impl fmt::Display for UnderlayAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_masking() {
        let p = OverlayAddr::ipv4_prefix(Ipv4Addr::new(10, 1, 255, 255), 16).unwrap();
        assert_eq!(p.bits(), u32::from(Ipv4Addr::new(10, 1, 0, 0)) as u128);
        assert_eq!(p.normalized(), p);
    }

    #[test]
    fn prefix_len_bound() {
        assert!(OverlayAddr::new(AddrFamily::Ipv4, 0, 33).is_err());
        assert!(OverlayAddr::new(AddrFamily::Mac, 0, 49).is_err());
        assert!(OverlayAddr::new(AddrFamily::Ipv6, 0, 128).is_ok());
    }

    #[test]
    fn msb_bit_order() {
        let a = OverlayAddr::ipv4(Ipv4Addr::new(128, 0, 0, 1));
        assert!(a.bit(0));
        assert!(!a.bit(1));
        assert!(a.bit(31));
    }

    #[test]
    fn covers_checks_family_and_mask() {
        let p = OverlayAddr::ipv4_prefix(Ipv4Addr::new(10, 0, 0, 0), 8).unwrap();
        assert!(p.covers(&OverlayAddr::ipv4(Ipv4Addr::new(10, 9, 8, 7))));
        assert!(!p.covers(&OverlayAddr::ipv4(Ipv4Addr::new(11, 0, 0, 1))));
        assert!(!p.covers(&OverlayAddr::mac([0x0a, 0, 0, 0, 0, 1])));
    }
}
