//! Per-DoF Kalman prediction over a bounded action context, and the
//! kinematic-variability metric.
//!
//! Each DoF runs an independent constant-velocity filter with state
//! `(position, velocity)`. The filter state is always the result of
//! replaying the DoF's cache through a freshly initialized filter, so the
//! action context (AC) bounds how far back the estimate looks. While the
//! cache is filling the replay is done incrementally; once it is full each
//! push evicts the oldest value and the window is replayed.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::codec::{ActionSlice, DOF};
use crate::error::{Error, Result};

pub const DEFAULT_AC: usize = 10;
pub const DEFAULT_PL: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KfParams {
    /// Spectral density of the white-noise acceleration.
    pub process_noise: f64,
    pub measurement_noise: f64,
    /// Diagonal of the covariance at initialization.
    pub initial_variance: f64,
    /// Interval between slices.
    pub dt: f64,
}

impl Default for KfParams {
    fn default() -> Self {
        KfParams {
            process_noise: 1e-4,
            measurement_noise: 1e-2,
            initial_variance: 1.0,
            dt: 1.0,
        }
    }
}

impl KfParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("process_noise", self.process_noise),
            ("measurement_noise", self.measurement_noise),
            ("initial_variance", self.initial_variance),
            ("dt", self.dt),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InputDomain(format!(
                    "kf.{name} must be finite and > 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Position/velocity estimate with its symmetric covariance
/// `[[p00, p01], [p01, p11]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterState {
    pub position: f64,
    pub velocity: f64,
    pub p00: f64,
    pub p01: f64,
    pub p11: f64,
}

impl FilterState {
    fn init(z: f64, params: &KfParams) -> Self {
        FilterState {
            position: z,
            velocity: 0.0,
            p00: params.initial_variance,
            p01: 0.0,
            p11: params.initial_variance,
        }
    }

    fn predict(&mut self, params: &KfParams) {
        let dt = params.dt;
        let q = params.process_noise;
        self.position += dt * self.velocity;
        let p00 = self.p00 + 2.0 * dt * self.p01 + dt * dt * self.p11 + q * dt.powi(3) / 3.0;
        let p01 = self.p01 + dt * self.p11 + q * dt * dt / 2.0;
        let p11 = self.p11 + q * dt;
        self.p00 = p00;
        self.p01 = p01;
        self.p11 = p11;
    }

    // Joseph-form correction keeps the covariance PSD.
    fn correct(&mut self, z: f64, params: &KfParams) {
        let r = params.measurement_noise;
        let s = self.p00 + r;
        let k0 = self.p00 / s;
        let k1 = self.p01 / s;
        let innovation = z - self.position;
        self.position += k0 * innovation;
        self.velocity += k1 * innovation;

        let ap00 = (1.0 - k0) * self.p00;
        let ap01 = (1.0 - k0) * self.p01;
        let ap10 = self.p01 - k1 * self.p00;
        let ap11 = self.p11 - k1 * self.p01;
        let p00 = ap00 * (1.0 - k0) + k0 * k0 * r;
        let p01 = -ap00 * k1 + ap01 + k0 * k1 * r;
        let p11 = -ap10 * k1 + ap11 + k1 * k1 * r;
        self.p00 = p00;
        self.p01 = p01;
        self.p11 = p11;
    }

    fn observe(state: Option<Self>, z: f64, params: &KfParams) -> Self {
        match state {
            None => Self::init(z, params),
            Some(mut s) => {
                s.predict(params);
                s.correct(z, params);
                s
            }
        }
    }

    /// Position `steps` intervals ahead with no further measurements.
    pub fn extrapolate(&self, steps: usize, dt: f64) -> f64 {
        self.position + self.velocity * dt * steps as f64
    }

    pub fn is_psd(&self, tol: f64) -> bool {
        self.p00 >= -tol && self.p11 >= -tol && self.p00 * self.p11 - self.p01 * self.p01 >= -tol
    }
}

/// Most recent action values for one DoF, oldest evicted first.
#[derive(Debug, Clone, PartialEq)]
pub struct DofCache {
    buf: VecDeque<f64>,
    capacity: usize,
}

impl DofCache {
    pub fn new(capacity: usize) -> Self {
        DofCache {
            buf: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    /// Appends `v`, returning the evicted value if the cache was full.
    pub fn push(&mut self, v: f64) -> Option<f64> {
        let evicted = if self.buf.len() == self.capacity {
            self.buf.pop_front()
        } else {
            None
        };
        self.buf.push_back(v);
        evicted
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.buf.iter().copied()
    }

    pub fn clear(&mut self) {
        self.buf.clear();
    }
}

/// Seven independent filters plus their action caches.
#[derive(Debug, Clone)]
pub struct KfBank {
    params: KfParams,
    filters: [Option<FilterState>; DOF],
    caches: [DofCache; DOF],
}

impl KfBank {
    pub fn new(params: KfParams, ac: usize) -> Result<Self> {
        params.validate()?;
        if ac == 0 {
            return Err(Error::InputDomain("action context must be at least 1".into()));
        }
        Ok(KfBank {
            params,
            filters: [None; DOF],
            caches: std::array::from_fn(|_| DofCache::new(ac)),
        })
    }

    pub fn params(&self) -> &KfParams {
        &self.params
    }

    pub fn action_context(&self) -> usize {
        self.caches[0].capacity()
    }

    pub fn cache(&self, dof: usize) -> &DofCache {
        &self.caches[dof]
    }

    pub fn filter(&self, dof: usize) -> Option<&FilterState> {
        self.filters[dof].as_ref()
    }

    pub fn is_empty(&self) -> bool {
        self.caches.iter().any(DofCache::is_empty)
    }

    /// Records an executed slice and advances every filter by one cycle.
    pub fn push_slice(&mut self, slice: &ActionSlice) -> Result<()> {
        slice.ensure_finite()?;
        for dof in 0..DOF {
            let z = slice.0[dof];
            if self.caches[dof].push(z).is_some() {
                self.filters[dof] = replay(self.caches[dof].iter(), &self.params);
            } else {
                self.filters[dof] = Some(FilterState::observe(self.filters[dof], z, &self.params));
            }
        }
        Ok(())
    }

    /// Rebuilds every filter from its cache contents.
    pub fn rebuild(&mut self) {
        for dof in 0..DOF {
            self.filters[dof] = replay(self.caches[dof].iter(), &self.params);
        }
    }

    pub fn reset(&mut self) {
        self.filters = [None; DOF];
        self.caches.iter_mut().for_each(DofCache::clear);
    }

    /// Predicts the next `pl` slices without touching the bank.
    pub fn kf_predict(&self, pl: usize) -> Result<Vec<ActionSlice>> {
        if pl == 0 {
            return Err(Error::InputDomain("prediction length must be at least 1".into()));
        }
        let mut states = [FilterState::init(0.0, &self.params); DOF];
        for (dof, slot) in states.iter_mut().enumerate() {
            *slot = self.filters[dof]
                .ok_or_else(|| Error::State(format!("no action context for dof {dof}")))?;
        }
        Ok((1..=pl)
            .map(|k| ActionSlice(std::array::from_fn(|d| states[d].extrapolate(k, self.params.dt))))
            .collect())
    }
}

fn replay(values: impl Iterator<Item = f64>, params: &KfParams) -> Option<FilterState> {
    values.fold(None, |s, z| Some(FilterState::observe(s, z, params)))
}

/// L1 discrepancy between a correct slice and one carrying accepted errors.
pub fn kin_variability(correct: &ActionSlice, erroneous: &ActionSlice) -> f64 {
    correct
        .0
        .iter()
        .zip(&erroneous.0)
        .map(|(a, b)| (a - b).abs())
        .sum()
}

/// Kinematic variability of the latest step and its running total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KinVar {
    pub per_step: f64,
    pub cumulative: f64,
}

impl KinVar {
    pub fn accumulate(&mut self, step_value: f64) -> Result<()> {
        if !(step_value >= 0.0 && step_value.is_finite()) {
            return Err(Error::InputDomain(format!(
                "K_var step must be finite and >= 0, got {step_value}"
            )));
        }
        self.per_step = step_value;
        self.cumulative += step_value;
        Ok(())
    }
}
