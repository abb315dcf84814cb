use std::ops::Range;

use thiserror::Error;

use super::Channel;

/// Code points reserved for vendor RwD opcodes (13 of them).
pub const RWD_CUSTOM_RANGE: Range<u8> = 0x10..0x1D;
/// Code points reserved for vendor BISnp opcodes (10 of them).
pub const BISNP_CUSTOM_RANGE: Range<u8> = 0x20..0x2A;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RegistryError {
    #[error("no custom opcode space left on {0:?}")]
    Exhausted(Channel),
    #[error("channel {0:?} has no custom opcode space")]
    NoCustomSpace(Channel),
    #[error("opcode `{0}` is already registered")]
    Duplicate(String),
}

/// Allocates vendor-defined opcodes within the budget each channel leaves
/// free. A fresh registry already holds `MemRdPC` and `BISnpData`.
#[derive(Clone, Debug)]
pub struct OpcodeRegistry {
    rwd: Vec<String>,
    bisnp: Vec<String>,
}

impl Default for OpcodeRegistry {
    fn default() -> Self {
        OpcodeRegistry { rwd: vec!["MemRdPC".into()], bisnp: vec!["BISnpData".into()] }
    }
}

impl OpcodeRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, channel: Channel, name: &str) -> Result<u8, RegistryError> {
        let (names, range) = match channel {
            Channel::RwD => (&mut self.rwd, RWD_CUSTOM_RANGE),
            Channel::BISnp => (&mut self.bisnp, BISNP_CUSTOM_RANGE),
            other => return Err(RegistryError::NoCustomSpace(other)),
        };
        if names.iter().any(|n| n == name) {
            return Err(RegistryError::Duplicate(name.to_string()));
        }
        if names.len() >= range.len() {
            return Err(RegistryError::Exhausted(channel));
        }
        names.push(name.to_string());
        Ok(range.start + names.len() as u8 - 1)
    }

    pub fn lookup(&self, channel: Channel, name: &str) -> Option<u8> {
        let (names, range) = match channel {
            Channel::RwD => (&self.rwd, RWD_CUSTOM_RANGE),
            Channel::BISnp => (&self.bisnp, BISNP_CUSTOM_RANGE),
            _ => return None,
        };
        names.iter().position(|n| n == name).map(|i| range.start + i as u8)
    }

    pub fn used(&self, channel: Channel) -> usize {
        match channel {
            Channel::RwD => self.rwd.len(),
            Channel::BISnp => self.bisnp.len(),
            _ => 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::Opcode;

    #[test]
    fn budgets() {
        let mut r = OpcodeRegistry::new();
        assert_eq!(r.lookup(Channel::RwD, "MemRdPC"), Some(Opcode::MemRdPC.code()));
        assert_eq!(r.lookup(Channel::BISnp, "BISnpData"), Some(Opcode::BISnpData.code()));
        for i in 2..=13 {
            let code = r.register(Channel::RwD, &format!("rwd{i}")).unwrap();
            assert!(RWD_CUSTOM_RANGE.contains(&code));
        }
        assert_eq!(r.register(Channel::RwD, "rwd14"), Err(RegistryError::Exhausted(Channel::RwD)));
        for i in 2..=10 {
            r.register(Channel::BISnp, &format!("snp{i}")).unwrap();
        }
        assert_eq!(r.register(Channel::BISnp, "snp11"), Err(RegistryError::Exhausted(Channel::BISnp)));
        assert_eq!(r.used(Channel::RwD), 13);
        assert_eq!(r.used(Channel::BISnp), 10);
    }

    #[test]
    fn other_channels_and_duplicates() {
        let mut r = OpcodeRegistry::new();
        assert_eq!(r.register(Channel::Req, "x"), Err(RegistryError::NoCustomSpace(Channel::Req)));
        assert_eq!(r.register(Channel::RwD, "MemRdPC"), Err(RegistryError::Duplicate("MemRdPC".into())));
    }
}
