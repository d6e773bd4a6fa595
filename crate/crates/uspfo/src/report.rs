//! Flow transcripts and the metrics derived from them.

use serde::{Deserialize, Serialize};
use thiserror::Error;
use uspfo_core::FlowMetrics;

use crate::authz::TokenResponse;
use crate::http::{HttpRequest, HttpResponse, BACKCHANNEL_HEADER, VERIFICATIONS_HEADER};

/// Protocol steps, in flow order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Step {
    A,
    B,
    C,
    D,
    E,
    F,
}

impl std::fmt::Display for Step {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

/// One request and the response it received.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub step: Step,
    pub label: String,
    pub request: HttpRequest,
    pub response: HttpResponse,
}

impl Exchange {
    fn counter(&self, header: &str) -> Option<u64> {
        self.response.header(header)?.parse().ok()
    }

    pub fn verifications(&self) -> Option<u64> {
        self.counter(VERIFICATIONS_HEADER)
    }

    pub fn backchannel(&self) -> Option<u64> {
        self.counter(BACKCHANNEL_HEADER)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceEntry {
    Exchange(Exchange),
    DeriveSessionKey { step: Step },
    GeneratePkce { step: Step },
}

/// Failure of a flow step, tagged with the step letter.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Error)]
#[error("step {step} failed with {code}: {message}")]
pub struct FlowError {
    pub step: Step,
    pub code: String,
    pub message: String,
}

impl FlowError {
    pub fn new(step: Step, code: &str, message: impl Into<String>) -> Self {
        FlowError {
            step,
            code: code.to_string(),
            message: message.into(),
        }
    }
}

/// Intermediate values kept for inspection.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowArtifacts {
    pub state: Option<String>,
    pub code_verifier: Option<String>,
    pub code_challenge: Option<String>,
    pub client_assertion: Option<String>,
    pub consent_handle: Option<String>,
    pub redirect_location: Option<String>,
    pub authorization_code: Option<String>,
    pub token_proof: Option<String>,
    pub resource_proof: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowReport {
    pub client_id: String,
    pub success: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<FlowError>,
    pub artifacts: FlowArtifacts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_response: Option<TokenResponse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resource_content: Option<String>,
    pub trace: Vec<TraceEntry>,
    pub metrics: FlowMetrics,
}

impl FlowReport {
    pub fn exchanges(&self) -> impl Iterator<Item = &Exchange> {
        self.trace.iter().filter_map(|e| match e {
            TraceEntry::Exchange(x) => Some(x),
            _ => None,
        })
    }

    pub fn exchange(&self, label: &str) -> Option<&Exchange> {
        self.exchanges().find(|e| e.label == label)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ReportError {
    #[error("report is incomplete: {0}")]
    IncompleteReport(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub theta: u64,
    pub phi: u64,
    pub zeta: u64,
    pub po: u64,
    /// Server-to-server calls made while handling the client's requests.
    /// Not part of theta.
    pub backchannel: u64,
    pub exchanges: Vec<String>,
}

impl MetricsReport {
    pub fn metrics(&self) -> FlowMetrics {
        FlowMetrics::new(self.theta, self.phi, self.zeta)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (name, value) in [
            ("theta (API calls)", self.theta),
            ("phi (session-key derivations)", self.phi),
            ("zeta (signature verifications)", self.zeta),
            ("po = 3*theta + 2*phi + zeta", self.po),
            ("backchannel (not in theta)", self.backchannel),
        ] {
            out.push_str(&format!("{name:<32}{value:>8}\n"));
        }
        out.push_str("exchanges:\n");
        for (i, label) in self.exchanges.iter().enumerate() {
            out.push_str(&format!("  {:>2}. {label}\n", i + 1));
        }
        out
    }
}

/// Recounts the overhead inputs from a transcript: theta is the number of
/// client exchanges, phi the number of client-side session-key derivations,
/// zeta the signature verifications the services reported.
pub fn instrument_flow(report: &FlowReport) -> Result<MetricsReport, ReportError> {
    if report.success && (report.token_response.is_none() || report.resource_content.is_none()) {
        return Err(ReportError::IncompleteReport(
            "successful flow lacks its token response or resource".into(),
        ));
    }
    let (mut theta, mut phi, mut zeta, mut backchannel) = (0, 0, 0, 0);
    let mut exchanges = Vec::new();
    for entry in &report.trace {
        match entry {
            TraceEntry::Exchange(x) => {
                theta += 1;
                zeta += x.verifications().ok_or_else(|| {
                    ReportError::IncompleteReport(format!("exchange `{}` has no verification count", x.label))
                })?;
                backchannel += x.backchannel().unwrap_or(0);
                exchanges.push(format!("{} {}", x.request.method, x.request.path()));
            }
            TraceEntry::DeriveSessionKey { .. } => phi += 1,
            TraceEntry::GeneratePkce { .. } => {}
        }
    }
    let metrics = FlowMetrics::new(theta, phi, zeta);
    Ok(MetricsReport {
        theta,
        phi,
        zeta,
        po: metrics.po(),
        backchannel,
        exchanges,
    })
}
