//! Course knowledge platform: private course material is ingested into
//! hybrid BM25 + embedding indices, learners chat with it through fixed
//! prompt templates, and instructors get quiz and engagement analytics.

pub mod analytics;
pub mod api;
pub mod chat;
pub mod chunker;
pub mod cli;
pub mod config;
pub mod courses;
pub mod db;
pub mod error;
pub mod index;
pub mod ingest;
pub mod llm;
pub mod retrieve;
pub mod service;
pub mod text;

pub use error::{Error, Result};
