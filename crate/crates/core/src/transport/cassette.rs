use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{HttpRequest, HttpResponse, Transport, TransportError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "outcome")]
pub enum RecordedOutcome {
    Response(HttpResponse),
    Failure(TransportError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub request: HttpRequest,
    /// sha256 over the request's canonical JSON.
    pub request_hash: String,
    pub outcome: RecordedOutcome,
}

/// Ordered request/outcome pairs captured for one test case.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Cassette {
    pub case: String,
    pub interactions: Vec<Interaction>,
}

pub(crate) fn request_hash(request: &HttpRequest) -> String {
    let canonical = serde_json::to_vec(request).unwrap_or_default();
    hex::encode(Sha256::digest(&canonical))
}

/// Forwards to an inner transport and records every exchange.
pub struct RecordingTransport<T> {
    inner: T,
    cassette: Mutex<Cassette>,
}

impl<T: Transport> RecordingTransport<T> {
    pub fn new(inner: T, case: impl Into<String>) -> Self {
        Self {
            inner,
            cassette: Mutex::new(Cassette {
                case: case.into(),
                interactions: Vec::new(),
            }),
        }
    }

    pub fn cassette(&self) -> Cassette {
        self.cassette.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl<T: Transport> Transport for RecordingTransport<T> {
    fn post_json(
        &self,
        request: &HttpRequest,
        headers: &[(String, String)],
        timeout: Duration,
    ) -> Result<HttpResponse, TransportError> {
        let result = self.inner.post_json(request, headers, timeout);
        let outcome = match &result {
            Ok(resp) => RecordedOutcome::Response(resp.clone()),
            Err(e) => RecordedOutcome::Failure(e.clone()),
        };
        self.cassette
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .interactions
            .push(Interaction {
                request: request.clone(),
                request_hash: request_hash(request),
                outcome,
            });
        result
    }
}

/// Serves a cassette back. Each request is answered by the earliest unused
/// interaction with the same request hash, so concurrent callers may arrive in
/// any order; a request with no recorded match is a cassette error, never a
/// silent substitution.
pub struct ReplayTransport {
    case: String,
    remaining: Mutex<Vec<Interaction>>,
}

impl ReplayTransport {
    pub fn new(cassette: Cassette) -> Self {
        Self {
            case: cassette.case,
            remaining: Mutex::new(cassette.interactions),
        }
    }

    pub fn remaining(&self) -> usize {
        self.remaining.lock().unwrap_or_else(|e| e.into_inner()).len()
    }
}

impl Transport for ReplayTransport {
    fn post_json(
        &self,
        request: &HttpRequest,
        _headers: &[(String, String)],
        _timeout: Duration,
    ) -> Result<HttpResponse, TransportError> {
        let hash = request_hash(request);
        let mut remaining = self.remaining.lock().unwrap_or_else(|e| e.into_inner());
        let Some(at) = remaining.iter().position(|i| i.request_hash == hash) else {
            return Err(TransportError::Cassette(format!(
                "case {:?}: no recorded interaction matches the request to {} (hash {hash}, {} left)",
                self.case,
                request.url,
                remaining.len()
            )));
        };
        match remaining.remove(at).outcome {
            RecordedOutcome::Response(resp) => Ok(resp),
            RecordedOutcome::Failure(e) => Err(e),
        }
    }
}
