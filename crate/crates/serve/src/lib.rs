//! HTTP service and CLI over the gliopipe models.

pub mod api;
pub mod bundle;
pub mod cli;
pub mod study;
