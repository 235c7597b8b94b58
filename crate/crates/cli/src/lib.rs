//! Service, client and command-line front end for microstudy campaigns.

pub mod client;
pub mod commands;
pub mod server;

pub use client::HttpCampaign;
pub use server::{AppState, BackgroundServer};
