//! Structural overhead model: `PO = 3·Θ + 2·Φ + ζ`, where Θ counts API calls,
//! Φ counts session-key derivations and ζ counts signature verifications.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub fn compute_po(theta: u64, phi: u64, zeta: u64) -> u64 {
    theta
        .saturating_mul(3)
        .saturating_add(phi.saturating_mul(2))
        .saturating_add(zeta)
}

/// Counters for one flow. `po` is never stored; it is recomputed from the
/// counters on every read and on serialization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct FlowMetrics {
    pub theta: u64,
    pub phi: u64,
    pub zeta: u64,
}

impl FlowMetrics {
    pub fn new(theta: u64, phi: u64, zeta: u64) -> Self {
        FlowMetrics { theta, phi, zeta }
    }

    pub fn po(&self) -> u64 {
        compute_po(self.theta, self.phi, self.zeta)
    }

    pub fn merged(self, other: FlowMetrics) -> FlowMetrics {
        FlowMetrics {
            theta: self.theta + other.theta,
            phi: self.phi + other.phi,
            zeta: self.zeta + other.zeta,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Wire {
    theta: u64,
    phi: u64,
    zeta: u64,
    #[serde(default)]
    po: Option<u64>,
}

impl Serialize for FlowMetrics {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        Wire {
            theta: self.theta,
            phi: self.phi,
            zeta: self.zeta,
            po: Some(self.po()),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for FlowMetrics {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        // A serialized `po` is informational; the counters are authoritative.
        let wire = Wire::deserialize(deserializer)?;
        Ok(FlowMetrics::new(wire.theta, wire.phi, wire.zeta))
    }
}
