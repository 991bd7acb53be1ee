//! Desk-scale toolkit for production-taxonomy-conditioned video generation
//! math: the four-axis production taxonomy and structured caption schema,
//! dual-channel tag/text conditioning with AdaLN modulation, dual
//! classifier-free guidance, curriculum and rebalancing schedules,
//! preference-pair construction with a DPO objective, distribution-matching
//! distillation mechanics, and evaluation aggregation. Everything runs on a
//! small deterministic 64-bit tensor substrate with seeded randomness.

pub mod numerics;

pub mod taxonomy;

pub mod caption;

pub mod tag_encoder;

pub mod dit;

pub mod guidance;

pub mod datapipe;

pub mod alignment;

pub mod distill;

pub mod evalkit;

pub mod checkpoint;

pub mod config;

pub mod train;
