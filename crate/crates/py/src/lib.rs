//! Python bindings; see `api` for the exported surface.

mod api;

pub use api::*;
