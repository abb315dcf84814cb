use super::config::{MemoryConfig, MemoryMode};

/// Where a host line lives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Home {
    Local,
    /// Index into the endpoint list and the device-local byte address.
    Cxl { endpoint: usize, local: u64 },
}

/// Host physical address map: local DRAM first, then the endpoints
/// interleaved at a fixed granularity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AddressMap {
    mode: MemoryMode,
    local_bytes: u64,
    granule: u64,
    endpoints: usize,
}

impl AddressMap {
    pub fn new(cfg: &MemoryConfig, endpoints: usize) -> Self {
        AddressMap { mode: cfg.mode, local_bytes: cfg.local_dram_bytes, granule: cfg.interleave_bytes, endpoints }
    }

    pub fn endpoints(&self) -> usize {
        self.endpoints
    }

    pub fn home(&self, addr: u64) -> Home {
        if self.mode == MemoryMode::LocalDram || addr < self.local_bytes || self.endpoints == 0 {
            return Home::Local;
        }
        let a = addr - self.local_bytes;
        let n = self.endpoints as u64;
        let block = a / self.granule;
        Home::Cxl { endpoint: (block % n) as usize, local: (block / n) * self.granule + a % self.granule }
    }

    /// Inverse of [`AddressMap::home`] for CXL addresses.
    pub fn host_addr(&self, endpoint: usize, local: u64) -> Option<u64> {
        let n = self.endpoints as u64;
        let g = self.granule;
        ((local / g).checked_mul(g)?.checked_mul(n)?)
            .checked_add(endpoint as u64 * g)?
            .checked_add(local % g)?
            .checked_add(self.local_bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interleaving_round_trips() {
        let cfg = MemoryConfig { local_dram_bytes: 1 << 20, interleave_bytes: 4096, ..MemoryConfig::default() };
        let m = AddressMap::new(&cfg, 3);
        assert_eq!(m.home(100), Home::Local);
        assert_eq!(m.home((1 << 20) + 5), Home::Cxl { endpoint: 0, local: 5 });
        assert_eq!(m.home((1 << 20) + 4096 + 5), Home::Cxl { endpoint: 1, local: 5 });
        assert_eq!(m.home((1 << 20) + 3 * 4096 + 7), Home::Cxl { endpoint: 0, local: 4096 + 7 });
        for addr in [(1u64 << 20), (1 << 20) + 12345, (1 << 20) + 999_999] {
            let Home::Cxl { endpoint, local } = m.home(addr) else { panic!() };
            assert_eq!(m.host_addr(endpoint, local), Some(addr));
        }
    }

    #[test]
    fn local_mode_has_no_devices() {
        let cfg = MemoryConfig { mode: MemoryMode::LocalDram, ..MemoryConfig::default() };
        assert_eq!(AddressMap::new(&cfg, 2).home(1 << 40), Home::Local);
    }
}
