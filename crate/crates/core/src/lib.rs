//! Stress detection from wrist blood-volume-pulse (BVP) recordings.
//!
//! The pipeline runs, per subject:
//!
//! ```text
//! SubjectRecord (64 Hz BVP + condition codes)
//!   ├─ dsp::design_bandpass / filter_zero_phase   Butterworth 0.7-3.7 Hz, order 3
//!   ├─ dsp::segment_stream                         60 s windows, 5 s stride
//!   ├─ features::extract_features                  19 HRV features per window
//!   └─ train::zscore_segment                       per-window standardization
//! ```
//!
//! and then trains the hybrid CNN ([`nn`]) under leave-one-subject-out
//! evaluation ([`train::run_loso`]).

pub mod dsp;
pub mod features;
pub mod ingest;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod train;
