use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PrefixError {
    #[error("bad prefix syntax {0:?}")]
    Syntax(String),
    #[error("prefix {0} has host bits set")]
    HostBits(Ipv4Prefix),
}

/// An IPv4 network `a.b.c.d/len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Ipv4Prefix {
    addr: Ipv4Addr,
    len: u8,
}

impl Ipv4Prefix {
    pub fn new(addr: Ipv4Addr, len: u8) -> Result<Self, PrefixError> {
        if len > 32 {
            return Err(PrefixError::Syntax(format!("{addr}/{len}")));
        }
        Ok(Self { addr, len })
    }

    pub fn addr(&self) -> Ipv4Addr {
        self.addr
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> u8 {
        self.len
    }

    fn mask(&self) -> u32 {
        if self.len == 0 {
            0
        } else {
            u32::MAX << (32 - u32::from(self.len))
        }
    }

    /// True when no host bits are set.
    pub fn is_canonical(&self) -> bool {
        u32::from(self.addr) & !self.mask() == 0
    }

    pub fn contains(&self, ip: Ipv4Addr) -> bool {
        u32::from(ip) & self.mask() == u32::from(self.addr) & self.mask()
    }
}

impl fmt::Display for Ipv4Prefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.addr, self.len)
    }
}

impl FromStr for Ipv4Prefix {
    type Err = PrefixError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || PrefixError::Syntax(s.to_string());
        let (addr, len) = s.split_once('/').ok_or_else(err)?;
        let addr: Ipv4Addr = addr.parse().map_err(|_| err())?;
        let len: u8 = len.parse().map_err(|_| err())?;
        Ipv4Prefix::new(addr, len)
    }
}

impl Serialize for Ipv4Prefix {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Ipv4Prefix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Destination prefix to local proxy UDP port, longest prefix wins.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitTable {
    routes: Vec<(Ipv4Prefix, u16)>,
}

impl SplitTable {
    pub fn new(routes: impl IntoIterator<Item = (Ipv4Prefix, u16)>) -> Result<Self, PrefixError> {
        let routes: Vec<_> = routes.into_iter().collect();
        if let Some((p, _)) = routes.iter().find(|(p, _)| !p.is_canonical()) {
            return Err(PrefixError::HostBits(*p));
        }
        Ok(Self { routes })
    }

    pub fn routes(&self) -> &[(Ipv4Prefix, u16)] {
        &self.routes
    }

    /// Port for `dst`, or `None` when the packet bypasses the overlay.
    /// Equal-length matches resolve to the earlier entry.
    pub fn classify(&self, dst: Ipv4Addr) -> Option<u16> {
        let mut best: Option<(u8, u16)> = None;
        for (prefix, port) in &self.routes {
            if prefix.contains(dst) && best.is_none_or(|(len, _)| prefix.len() > len) {
                best = Some((prefix.len(), *port));
            }
        }
        best.map(|(_, port)| port)
    }
}
