//! Exit-code contract shared by every subcommand.

use labpipe_core::transport::TransportError;

pub const OK: i32 = 0;
/// The server (or local validation) rejected the request.
pub const REJECTED: i32 = 1;
/// No usable reply from the server.
pub const NETWORK: i32 = 2;
/// Missing, invalid or insufficient credentials.
pub const AUTHZ: i32 = 3;

pub fn for_transport(e: &TransportError) -> i32 {
    match e {
        TransportError::Network(_) => NETWORK,
        TransportError::Rejected { status: 401 | 403, .. } => AUTHZ,
        TransportError::Rejected { .. } => REJECTED,
    }
}

/// Worst of several outcomes: network beats authz beats rejection.
pub fn worst(a: i32, b: i32) -> i32 {
    let rank = |c: i32| match c {
        NETWORK => 3,
        AUTHZ => 2,
        REJECTED => 1,
        _ => 0,
    };
    if rank(b) > rank(a) {
        b
    } else {
        a
    }
}
