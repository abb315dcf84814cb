use serde::{Deserialize, Deserializer, Serialize};

use crate::units::Latency;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MediaKind {
    Znand,
    Pmem,
    Dram,
}

impl MediaKind {
    pub const ALL: [MediaKind; 3] = [MediaKind::Dram, MediaKind::Pmem, MediaKind::Znand];

    pub fn name(self) -> &'static str {
        match self {
            MediaKind::Znand => "znand",
            MediaKind::Pmem => "pmem",
            MediaKind::Dram => "dram",
        }
    }
}

/// Backend media timing behind the device's internal DRAM cache.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct MediaProfile {
    pub name: MediaKind,
    pub read_latency_ns: Latency,
    pub write_latency_ns: Latency,
}

impl MediaProfile {
    pub fn of(kind: MediaKind) -> Self {
        let (r, w) = match kind {
            MediaKind::Znand => (3_000.0, 100_000.0),
            // Z-NAND reads are roughly six times slower than PMEM.
            MediaKind::Pmem => (500.0, 1_000.0),
            // tRP + tRCD + tCAS at 22 ns each.
            MediaKind::Dram => (66.0, 66.0),
        };
        MediaProfile { name: kind, read_latency_ns: Latency::from_ns(r), write_latency_ns: Latency::from_ns(w) }
    }

    pub fn znand() -> Self {
        Self::of(MediaKind::Znand)
    }

    pub fn pmem() -> Self {
        Self::of(MediaKind::Pmem)
    }

    pub fn dram() -> Self {
        Self::of(MediaKind::Dram)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.read_latency_ns.is_zero() || self.write_latency_ns.is_zero() {
            return Err(format!("media profile {} needs non-zero latencies", self.name.name()));
        }
        Ok(())
    }
}

impl Default for MediaProfile {
    fn default() -> Self {
        Self::znand()
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ProfileRepr {
    Name(MediaKind),
    Full {
        name: MediaKind,
        read_latency_ns: Option<Latency>,
        write_latency_ns: Option<Latency>,
    },
}

// Either `"znand"` or `{"name": "znand", "read_latency_ns": ...}` with any
// latency left out falling back to the named profile.
impl<'de> Deserialize<'de> for MediaProfile {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let p = match ProfileRepr::deserialize(d)? {
            ProfileRepr::Name(kind) => MediaProfile::of(kind),
            ProfileRepr::Full { name, read_latency_ns, write_latency_ns } => {
                let base = MediaProfile::of(name);
                MediaProfile {
                    name,
                    read_latency_ns: read_latency_ns.unwrap_or(base.read_latency_ns),
                    write_latency_ns: write_latency_ns.unwrap_or(base.write_latency_ns),
                }
            }
        };
        p.validate().map_err(serde::de::Error::custom)?;
        Ok(p)
    }
}
