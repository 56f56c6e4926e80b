//! IPv4 addresses and prefixes.
//!
//! Controller priority is derived from [`Address`] ordering, so the type's
//! `Ord` is plain numeric order of the 32-bit value.

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AddrError {
    #[error("invalid IPv4 address `{0}`")]
    BadAddress(String),
    #[error("invalid prefix `{0}`")]
    BadPrefix(String),
    #[error("mask length {0} out of range 0..=32")]
    BadMask(u8),
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Address(u32);

impl Address {
    pub const UNSPECIFIED: Address = Address(0);

    pub const fn new(a: u8, b: u8, c: u8, d: u8) -> Self {
        Address(u32::from_be_bytes([a, b, c, d]))
    }

    pub const fn from_bits(bits: u32) -> Self {
        Address(bits)
    }

    pub const fn bits(self) -> u32 {
        self.0
    }

    /// The /32 host prefix for this address.
    pub fn host_prefix(self) -> Prefix {
        Prefix { network: self, len: 32 }
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        Ipv4Addr::from(self.0).fmt(f)
    }
}

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for Address {
    type Err = AddrError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.trim()
            .parse::<Ipv4Addr>()
            .map(|ip| Address(u32::from(ip)))
            .map_err(|_| AddrError::BadAddress(s.to_string()))
    }
}

fn mask(len: u8) -> u32 {
    if len == 0 {
        0
    } else {
        u32::MAX << (32 - u32::from(len))
    }
}

/// A network prefix. The network address is always stored masked.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Prefix {
    network: Address,
    len: u8,
}

impl Prefix {
    pub const DEFAULT_ROUTE: Prefix = Prefix {
        network: Address::UNSPECIFIED,
        len: 0,
    };

    pub fn new(addr: Address, len: u8) -> Result<Self, AddrError> {
        if len > 32 {
            return Err(AddrError::BadMask(len));
        }
        Ok(Prefix {
            network: Address(addr.0 & mask(len)),
            len,
        })
    }

    pub fn network(self) -> Address {
        self.network
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(self) -> u8 {
        self.len
    }

    pub fn is_default(self) -> bool {
        self.len == 0
    }

    pub fn contains(self, addr: Address) -> bool {
        addr.0 & mask(self.len) == self.network.0
    }

    /// True if every address in `other` is also in `self`.
    pub fn covers(self, other: Prefix) -> bool {
        self.len <= other.len && self.contains(other.network)
    }

    /// Highest address of the prefix.
    pub fn broadcast(self) -> Address {
        Address(self.network.0 | !mask(self.len))
    }
}

impl fmt::Display for Prefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.network, self.len)
    }
}

impl fmt::Debug for Prefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for Prefix {
    type Err = AddrError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (addr, len) = s.split_once('/').ok_or_else(|| AddrError::BadPrefix(s.to_string()))?;
        let addr: Address = addr.parse().map_err(|_| AddrError::BadPrefix(s.to_string()))?;
        let len: u8 = len.trim().parse().map_err(|_| AddrError::BadPrefix(s.to_string()))?;
        Prefix::new(addr, len)
    }
}

/// Parses `a.b.c.d/len` keeping the host part, e.g. an interface address
/// together with the subnet it sits in.
pub fn parse_interface(s: &str) -> Result<(Address, Prefix), AddrError> {
    let (addr, _) = s.split_once('/').ok_or_else(|| AddrError::BadPrefix(s.to_string()))?;
    let addr: Address = addr.parse()?;
    let prefix: Prefix = s.parse()?;
    Ok((addr, prefix))
}

macro_rules! string_serde {
    ($t:ty) => {
        impl Serialize for $t {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

string_serde!(Address);
string_serde!(Prefix);
