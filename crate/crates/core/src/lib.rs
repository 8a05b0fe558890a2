//! Scaling-law laboratory for deep regression on simulated magnetic domain images.
//!
//! The pipeline runs bottom-up:
//!
//! - [`lattice`] builds commensurate twisted-bilayer honeycomb superlattices.
//! - [`spinsim`] finds classical ground states of the bilayer spin Hamiltonian
//!   and rasterizes them into 100×100 out-of-plane magnetization images.
//! - [`datagen`] samples Hamiltonian parameters, generates and persists
//!   labeled image pairs, standardizes pixels and carves train/validation
//!   splits.
//! - [`mlp`] is a from-scratch fully-connected regression network with
//!   Adam, a decaying learning rate and early stopping.
//! - [`scalestats`] holds the ensemble statistics (geometric mean and
//!   friends) and the power-law / logarithmic fits.
//! - [`harness`] runs manifest-driven grids of (architecture × dataset size ×
//!   seed), ingests external loss tables and emits report tables.

pub mod datagen;
pub mod harness;
pub mod lattice;
pub mod mlp;
pub mod scalestats;
pub mod seeds;
pub mod spinsim;
