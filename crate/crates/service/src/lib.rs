//! Project store, HTTP API and configuration for the protoflow engine.

pub mod api;
pub mod config;
pub mod engine;
pub mod store;
