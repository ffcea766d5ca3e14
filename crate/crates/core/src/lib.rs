//! Locating the layers where a transformer switches between local,
//! intermediate and global processing.
//!
//! The pipeline starts from an activation dump written by an extractor
//! ([`dataio`]). Three change signals are computed between adjacent layers
//! ([`signals`]), fused into one evidence curve, and the two most prominent
//! peaks are taken as the boundaries. Sentence-level bootstrap gives their
//! confidence intervals. [`interventions`] scores text generated under
//! scale-targeted noise, [`report`] gathers models into family tables and
//! prediction verdicts, and [`synth`] builds models with known answers.
//!
//! ```
//! use scalebound::dataio::read_dump;
//! use scalebound::signals::{detect, DetectConfig};
//! use scalebound::synth::{generate_dump, SyntheticModelSpec};
//!
//! let dir = tempfile::tempdir()?;
//! generate_dump(&SyntheticModelSpec::default(), dir.path())?;
//! let mut cfg = DetectConfig::default();
//! cfg.fusion.bootstrap_iterations = 50;
//! let b = detect(&read_dump(dir.path())?, &cfg)?.result?;
//! assert_eq!((b.li_layer, b.ig_layer), (5, 11));
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

pub mod dataio;
pub mod signals;
pub mod synth;
pub mod interventions;
pub mod report;
