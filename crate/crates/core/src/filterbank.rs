//! Octave-band split and merge.
//!
//! By default bands are a disjoint partition of the DFT bins of the whole
//! buffer, so the split is linear, merge is a plain sum, and band energies add
//! up to the signal energy. The smooth design trades the exact energy split for
//! short band ringing that does not wrap around the buffer.

use std::f64::consts::SQRT_2;
use std::sync::Arc;

use realfft::num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result, RirError};
use crate::forward_ops::fast_len;
use crate::signal::SignalBuffer;

pub const DEFAULT_CENTERS_HZ: [f64; 5] = [125.0, 250.0, 500.0, 1000.0, 2000.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandPlan {
    pub centers: Vec<f64>,
    /// `centers.len() + 1` edges from 0 Hz to Nyquist.
    pub edges: Vec<f64>,
    pub bandwidth_fractions: Vec<f64>,
}

impl BandPlan {
    /// Octave bands with edges at `center/√2` and `center·√2`; the outermost
    /// bands are stretched to 0 Hz and to Nyquist.
    pub fn octave(centers: &[f64], sample_rate: u32) -> Result<Self> {
        if centers.is_empty() {
            return Err(RirError::config("band plan needs at least one center"));
        }
        if centers.windows(2).any(|w| !(w[1] > w[0])) || centers[0] <= 0.0 {
            return Err(RirError::config("band centers must be positive and increasing"));
        }
        let nyquist = sample_rate as f64 / 2.0;
        let mut edges = vec![0.0];
        for w in centers.windows(2) {
            // octave spacing puts w[0]·√2 == w[1]/√2; use the geometric mean in general
            edges.push((w[0] * w[1]).sqrt());
        }
        edges.push(nyquist);
        if let Some(c) = centers.iter().find(|&&c| c * SQRT_2.recip() >= nyquist) {
            return Err(RirError::config(format!(
                "band center {c} Hz lies above Nyquist {nyquist} Hz"
            )));
        }
        Self::from_edges(centers.to_vec(), edges)
    }

    pub fn octave_default(sample_rate: u32) -> Result<Self> {
        Self::octave(&DEFAULT_CENTERS_HZ, sample_rate)
    }

    /// One band covering the whole spectrum.
    pub fn all_pass(sample_rate: u32) -> Self {
        let nyquist = sample_rate as f64 / 2.0;
        Self {
            centers: vec![nyquist / 2.0],
            edges: vec![0.0, nyquist],
            bandwidth_fractions: vec![1.0],
        }
    }

    pub fn from_edges(centers: Vec<f64>, edges: Vec<f64>) -> Result<Self> {
        if edges.len() != centers.len() + 1 {
            return Err(RirError::config("need exactly one more edge than centers"));
        }
        if edges[0] != 0.0 {
            return Err(RirError::config("first band edge must be 0 Hz"));
        }
        if edges.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(RirError::config("band edges must be strictly increasing"));
        }
        let nyquist = *edges.last().unwrap();
        let bandwidth_fractions = edges.windows(2).map(|w| (w[1] - w[0]) / nyquist).collect();
        Ok(Self {
            centers,
            edges,
            bandwidth_fractions,
        })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn nyquist(&self) -> f64 {
        *self.edges.last().unwrap()
    }

    pub fn check_sample_rate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        let top = self.nyquist();
        if top > nyquist * (1.0 + 1e-12) {
            return Err(RirError::config(format!(
                "band edge {top} Hz exceeds Nyquist {nyquist} Hz"
            )));
        }
        if top < nyquist * (1.0 - 1e-12) {
            return Err(RirError::config(format!(
                "band plan stops at {top} Hz but Nyquist is {nyquist} Hz"
            )));
        }
        Ok(())
    }

    fn band_of(&self, freq: f64) -> usize {
        let b = self.edges[1..].partition_point(|&e| e <= freq);
        b.min(self.len() - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandSet {
    bands: Vec<SignalBuffer>,
    plan: BandPlan,
}

impl BandSet {
    pub fn new(bands: Vec<SignalBuffer>, plan: BandPlan) -> Result<Self> {
        if bands.is_empty() {
            return Err(RirError::invalid("band set is empty"));
        }
        if bands.len() != plan.len() {
            return Err(RirError::invalid(format!(
                "{} bands for a {}-band plan",
                bands.len(),
                plan.len()
            )));
        }
        let (n, fs) = (bands[0].len(), bands[0].sample_rate());
        for b in &bands {
            check_len(n, b.len())?;
            if b.sample_rate() != fs {
                return Err(RirError::invalid("bands have different sample rates"));
            }
        }
        Ok(Self { bands, plan })
    }

    pub fn bands(&self) -> &[SignalBuffer] {
        &self.bands
    }

    pub fn band(&self, b: usize) -> &SignalBuffer {
        &self.bands[b]
    }

    pub fn plan(&self) -> &BandPlan {
        &self.plan
    }

    pub fn into_bands(self) -> Vec<SignalBuffer> {
        self.bands
    }
}

/// How band gains are laid out over the DFT grid.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FilterDesign {
    /// Disjoint bins of the unpadded buffer: exact energy partition, but the
    /// sinc ringing of each band wraps around the buffer.
    #[default]
    BrickWall,
    /// Raised-cosine crossovers `width_octaves` wide, on a grid zero-padded to
    /// at least twice the length. Gains still sum to one at every bin.
    Smooth { width_octaves: f64 },
}

impl FilterDesign {
    pub fn smooth_default() -> Self {
        FilterDesign::Smooth { width_octaves: 0.5 }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            FilterDesign::BrickWall => Ok(()),
            FilterDesign::Smooth { width_octaves } if width_octaves > 0.0 && width_octaves <= 2.0 => Ok(()),
            FilterDesign::Smooth { .. } => Err(RirError::config("crossover width must lie in (0, 2] octaves")),
        }
    }
}

/// Weight of everything below `edge` at frequency `f`.
fn below_edge(f: f64, edge: f64, design: FilterDesign) -> f64 {
    match design {
        FilterDesign::BrickWall => {
            if f < edge {
                1.0
            } else {
                0.0
            }
        }
        FilterDesign::Smooth { width_octaves } => {
            if f <= 0.0 {
                return 1.0;
            }
            let u = (f / edge).log2() / width_octaves + 0.5;
            if u <= 0.0 {
                1.0
            } else if u >= 1.0 {
                0.0
            } else {
                0.5 * (1.0 + (std::f64::consts::PI * u).cos())
            }
        }
    }
}

/// A band plan bound to a buffer length, with FFT plans ready for reuse.
#[derive(Clone)]
pub struct Filterbank {
    plan: BandPlan,
    design: FilterDesign,
    n: usize,
    fft_len: usize,
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
    /// per band, gain of every non-negative frequency bin `0..=fft_len/2`
    gains: Vec<Vec<f64>>,
}

impl std::fmt::Debug for Filterbank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Filterbank")
            .field("plan", &self.plan)
            .field("design", &self.design)
            .field("n", &self.n)
            .field("fft_len", &self.fft_len)
            .finish()
    }
}

impl Filterbank {
    /// Brick-wall bank over the unpadded buffer.
    pub fn new(plan: &BandPlan, n: usize, sample_rate: u32) -> Result<Self> {
        Self::with_design(plan, n, sample_rate, FilterDesign::BrickWall)
    }

    pub fn with_design(plan: &BandPlan, n: usize, sample_rate: u32, design: FilterDesign) -> Result<Self> {
        if n < 2 {
            return Err(RirError::invalid("band split needs at least two samples"));
        }
        plan.check_sample_rate(sample_rate)?;
        design.validate()?;
        let fft_len = match design {
            FilterDesign::BrickWall => n,
            FilterDesign::Smooth { .. } => fast_len(2 * n),
        };
        let mut planner = RealFftPlanner::new();
        let forward = planner.plan_fft_forward(fft_len);
        let inverse = planner.plan_fft_inverse(fft_len);
        let fs = sample_rate as f64;
        let nb = plan.len();
        let bins = fft_len / 2 + 1;
        let mut gains = vec![vec![0.0; bins]; nb];
        for k in 0..bins {
            let f = k as f64 * fs / fft_len as f64;
            match design {
                FilterDesign::BrickWall => gains[plan.band_of(f)][k] = 1.0,
                FilterDesign::Smooth { .. } => {
                    let mut lower = 0.0;
                    for (b, g) in gains.iter_mut().enumerate() {
                        let upper = if b + 1 == nb {
                            1.0
                        } else {
                            below_edge(f, plan.edges[b + 1], design)
                        };
                        g[k] = upper - lower;
                        lower = upper;
                    }
                }
            }
        }
        Ok(Self {
            plan: plan.clone(),
            design,
            n,
            fft_len,
            forward,
            inverse,
            gains,
        })
    }

    pub fn plan(&self) -> &BandPlan {
        &self.plan
    }

    pub fn design(&self) -> FilterDesign {
        self.design
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Fraction of white-noise energy each band passes at this length. For
    /// brick-wall bands this is the share of bins, close to the bandwidth fraction.
    pub fn bin_fractions(&self) -> Vec<f64> {
        // bins other than DC and Nyquist stand for a mirrored pair
        let weight = |k: usize| {
            if k == 0 || 2 * k == self.fft_len {
                1.0
            } else {
                2.0
            }
        };
        self.gains
            .iter()
            .map(|g| {
                g.iter()
                    .enumerate()
                    .map(|(k, v)| weight(k) * v * v)
                    .sum::<f64>()
                    / self.fft_len as f64
            })
            .collect()
    }

    pub fn split(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        check_len(self.n, x.len())?;
        let mut input = vec![0.0; self.fft_len];
        input[..self.n].copy_from_slice(x);
        let mut spectrum = self.forward.make_output_vec();
        self.forward
            .process(&mut input, &mut spectrum)
            .expect("buffer lengths come from the plan");
        let scale = 1.0 / self.fft_len as f64;
        let mut out = Vec::with_capacity(self.plan.len());
        let mut buf = self.inverse.make_input_vec();
        let mut time = self.inverse.make_output_vec();
        for gains in &self.gains {
            for ((dst, src), &g) in buf.iter_mut().zip(&spectrum).zip(gains) {
                *dst = if g == 0.0 { Complex64::new(0.0, 0.0) } else { src * g };
            }
            // real signals have real DC and Nyquist bins; clear round-off
            buf[0].im = 0.0;
            if self.fft_len % 2 == 0 {
                buf[self.fft_len / 2].im = 0.0;
            }
            self.inverse
                .process(&mut buf, &mut time)
                .expect("buffer lengths come from the plan");
            out.push(time[..self.n].iter().map(|v| v * scale).collect());
        }
        Ok(out)
    }

    pub fn merge(&self, bands: &[Vec<f64>]) -> Result<Vec<f64>> {
        if bands.is_empty() {
            return Err(RirError::invalid("nothing to merge"));
        }
        let mut out = vec![0.0; self.n];
        for band in bands {
            check_len(self.n, band.len())?;
            for (o, v) in out.iter_mut().zip(band) {
                *o += v;
            }
        }
        Ok(out)
    }
}

pub fn band_split(x: &SignalBuffer, plan: &BandPlan) -> Result<BandSet> {
    let fb = Filterbank::new(plan, x.len(), x.sample_rate())?;
    let bands = fb
        .split(x.samples())?
        .into_iter()
        .map(|b| SignalBuffer::new(b, x.sample_rate()))
        .collect::<Result<Vec<_>>>()?;
    BandSet::new(bands, plan.clone())
}

pub fn band_merge(bands: &BandSet) -> Result<SignalBuffer> {
    let first = &bands.bands[0];
    let mut out = vec![0.0; first.len()];
    for b in &bands.bands {
        check_len(out.len(), b.len())?;
        for (o, v) in out.iter_mut().zip(b.samples()) {
            *o += v;
        }
    }
    SignalBuffer::new(out, first.sample_rate())
}
