//! Frequency-adaptive dynamic graph transformer for multichannel biosignal
//! emotion classification, plus a synthetic-cohort training and verification
//! harness.
//!
//! The model pipeline: relative power spectral density features per channel
//! and time window, frequency-adaptive band reweighting, dynamic graph
//! learning over channels with spectral propagation, multi-scale temporal
//! attention, and an adversarially trained subject/emotion disentanglement
//! head. The harness generates deterministic synthetic cohorts with planted
//! band-power class signatures and subject-specific channel mixing, then
//! trains and evaluates the model leave-one-subject-out.

pub mod adgl;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod disentangle;
pub mod fap;
pub mod features;
pub mod harness;
pub mod model;
pub mod mstt;
pub mod nn;
pub mod synth;
