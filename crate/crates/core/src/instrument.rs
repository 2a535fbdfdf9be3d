//! Process-wide call counters for the training-only stages.
//!
//! Test-time rendering must never touch tone curves, color matrices or the
//! generators; these counters let callers check that.

use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Probe {
    ToneCurve,
    ColorMatrix,
    Generator,
}

static TONE_CURVE: AtomicU64 = AtomicU64::new(0);
static COLOR_MATRIX: AtomicU64 = AtomicU64::new(0);
static GENERATOR: AtomicU64 = AtomicU64::new(0);

fn counter(p: Probe) -> &'static AtomicU64 {
    match p {
        Probe::ToneCurve => &TONE_CURVE,
        Probe::ColorMatrix => &COLOR_MATRIX,
        Probe::Generator => &GENERATOR,
    }
}

#[inline]
pub fn record(p: Probe) {
    counter(p).fetch_add(1, Ordering::Relaxed);
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tone_curve: u64,
    pub color_matrix: u64,
    pub generator: u64,
}

impl Counts {
    pub fn since(&self, earlier: &Counts) -> Counts {
        Counts {
            tone_curve: self.tone_curve - earlier.tone_curve,
            color_matrix: self.color_matrix - earlier.color_matrix,
            generator: self.generator - earlier.generator,
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == Counts::default()
    }
}

pub fn snapshot() -> Counts {
    Counts {
        tone_curve: TONE_CURVE.load(Ordering::Relaxed),
        color_matrix: COLOR_MATRIX.load(Ordering::Relaxed),
        generator: GENERATOR.load(Ordering::Relaxed),
    }
}
