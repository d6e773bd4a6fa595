//! Per-request counters reported back to the caller in response headers.
//!
//! Services bump these from whatever code path does the work; the HTTP layer
//! opens a scope around each request and stamps the totals onto the response.
//! Scopes nest, so a service calling another in-process does not clobber its
//! caller's counts.

use std::cell::Cell;

use crate::http::{HttpResponse, BACKCHANNEL_HEADER, VERIFICATIONS_HEADER};

thread_local! {
    static VERIFICATIONS: Cell<u64> = const { Cell::new(0) };
    static BACKCHANNEL: Cell<u64> = const { Cell::new(0) };
}

pub fn record_verification() {
    VERIFICATIONS.with(|c| c.set(c.get() + 1));
}

pub fn record_backchannel() {
    BACKCHANNEL.with(|c| c.set(c.get() + 1));
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub verifications: u64,
    pub backchannel: u64,
}

/// Runs `f` with fresh counters and returns what it recorded.
pub fn scoped<R>(f: impl FnOnce() -> R) -> (R, Counts) {
    let saved_v = VERIFICATIONS.with(|c| c.replace(0));
    let saved_b = BACKCHANNEL.with(|c| c.replace(0));
    let out = f();
    let counts = Counts {
        verifications: VERIFICATIONS.with(|c| c.replace(saved_v)),
        backchannel: BACKCHANNEL.with(|c| c.replace(saved_b)),
    };
    (out, counts)
}

/// Runs a request handler inside a scope and stamps the counts on the response.
pub fn metered(f: impl FnOnce() -> HttpResponse) -> HttpResponse {
    let (resp, counts) = scoped(f);
    resp.with_header(VERIFICATIONS_HEADER, counts.verifications.to_string())
        .with_header(BACKCHANNEL_HEADER, counts.backchannel.to_string())
}
