//! Request streams: arrival processes, service-time distributions and the
//! named workload presets.
//!
//! Every random draw goes through a seeded ChaCha8 generator. Each purpose
//! (arrivals, service demands, class labels) gets its own stream of the same
//! seed so changing one knob never perturbs the others.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Timestamp;
use crate::units;

#[derive(Debug, Error, PartialEq)]
pub enum WorkloadError {
    #[error("probability {0} outside [0, 1]")]
    Probability(f64),
    #[error("durations must be positive")]
    NonPositiveDuration,
    #[error("rates must be positive")]
    NonPositiveRate,
    #[error("spike width must be shorter than the spike period")]
    SpikeWidth,
    #[error("switch time must be positive")]
    SwitchTime,
    #[error("unknown workload preset {0:?}")]
    UnknownPreset(String),
}

/// Service-demand distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ServiceDistribution {
    Bimodal {
        p_short: f64,
        #[serde(with = "units::duration")]
        short: u64,
        #[serde(with = "units::duration")]
        long: u64,
    },
    Exponential {
        #[serde(with = "units::duration")]
        mean: u64,
    },
    Constant {
        #[serde(with = "units::duration")]
        value: u64,
    },
    /// `first` before `switch_at`, `second` from then on.
    Shift {
        first: Box<ServiceDistribution>,
        second: Box<ServiceDistribution>,
        switch_at: Timestamp,
    },
}

impl ServiceDistribution {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        match self {
            Self::Bimodal {
                p_short,
                short,
                long,
            } => {
                if !(0.0..=1.0).contains(p_short) {
                    return Err(WorkloadError::Probability(*p_short));
                }
                if *short == 0 || *long == 0 {
                    return Err(WorkloadError::NonPositiveDuration);
                }
            }
            Self::Exponential { mean } if *mean == 0 => {
                return Err(WorkloadError::NonPositiveDuration)
            }
            Self::Constant { value } if *value == 0 => {
                return Err(WorkloadError::NonPositiveDuration)
            }
            Self::Shift {
                first,
                second,
                switch_at,
            } => {
                if switch_at.0 == 0 {
                    return Err(WorkloadError::SwitchTime);
                }
                first.validate()?;
                second.validate()?;
            }
            _ => {}
        }
        Ok(())
    }

    /// Expected service demand in nanoseconds.
    ///
    /// For `Shift` this is the larger of the two phases, so a load fraction
    /// of 1 never overloads either phase.
    pub fn mean_ns(&self) -> f64 {
        match self {
            Self::Bimodal {
                p_short,
                short,
                long,
            } => p_short * *short as f64 + (1.0 - p_short) * *long as f64,
            Self::Exponential { mean } => *mean as f64,
            Self::Constant { value } => *value as f64,
            Self::Shift { first, second, .. } => first.mean_ns().max(second.mean_ns()),
        }
    }
}

/// Draws one service demand (ns, always >= 1).
pub fn sample_service<R: Rng + ?Sized>(
    dist: &ServiceDistribution,
    now: Timestamp,
    rng: &mut R,
) -> u64 {
    match dist {
        ServiceDistribution::Bimodal {
            p_short,
            short,
            long,
        } => {
            if rng.random::<f64>() < *p_short {
                *short
            } else {
                *long
            }
        }
        ServiceDistribution::Exponential { mean } => {
            let x = exp_unit(rng) * *mean as f64;
            (x.round() as u64).max(1)
        }
        ServiceDistribution::Constant { value } => *value,
        ServiceDistribution::Shift {
            first,
            second,
            switch_at,
        } => {
            if now < *switch_at {
                sample_service(first, now, rng)
            } else {
                sample_service(second, now, rng)
            }
        }
    }
}

/// Unit-mean exponential variate by inversion.
fn exp_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    -(1.0 - u).ln()
}

/// Arrival process. Rates are in requests per second.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArrivalProcess {
    Poisson {
        rate: f64,
    },
    /// Poisson at `spike_rate` inside every `[k*period, k*period + width)`
    /// window and at `base_rate` elsewhere.
    Bursty {
        base_rate: f64,
        spike_rate: f64,
        #[serde(with = "units::duration")]
        spike_period: u64,
        #[serde(with = "units::duration")]
        spike_width: u64,
    },
}

impl ArrivalProcess {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        match self {
            Self::Poisson { rate } => {
                if !(rate.is_finite() && *rate > 0.0) {
                    return Err(WorkloadError::NonPositiveRate);
                }
            }
            Self::Bursty {
                base_rate,
                spike_rate,
                spike_period,
                spike_width,
            } => {
                if !(*base_rate > 0.0 && *spike_rate > 0.0) {
                    return Err(WorkloadError::NonPositiveRate);
                }
                if *spike_period == 0 || spike_width >= spike_period {
                    return Err(WorkloadError::SpikeWidth);
                }
            }
        }
        Ok(())
    }

    /// Instantaneous rate at `t` (requests per second).
    pub fn rate_at(&self, t: Timestamp) -> f64 {
        match self {
            Self::Poisson { rate } => *rate,
            Self::Bursty {
                base_rate,
                spike_rate,
                spike_period,
                spike_width,
            } => {
                if t.0 % spike_period < *spike_width {
                    *spike_rate
                } else {
                    *base_rate
                }
            }
        }
    }

    /// Long-run average rate.
    pub fn mean_rate(&self) -> f64 {
        match self {
            Self::Poisson { rate } => *rate,
            Self::Bursty {
                base_rate,
                spike_rate,
                spike_period,
                spike_width,
            } => {
                let f = *spike_width as f64 / *spike_period as f64;
                f * spike_rate + (1.0 - f) * base_rate
            }
        }
    }

    /// Next instant at which the current rate may change.
    fn next_boundary(&self, t: Timestamp) -> Option<Timestamp> {
        match self {
            Self::Poisson { .. } => None,
            Self::Bursty {
                spike_period,
                spike_width,
                ..
            } => {
                let base = t.0 - t.0 % spike_period;
                let edge = if t.0 - base < *spike_width {
                    base + spike_width
                } else {
                    base + spike_period
                };
                Some(Timestamp(edge))
            }
        }
    }
}

/// Next arrival time, strictly after `now`.
///
/// Piecewise-constant rates are handled exactly: an exponential gap that
/// overshoots a rate boundary is discarded and redrawn from the boundary,
/// which is valid by memorylessness.
pub fn next_arrival<R: Rng + ?Sized>(
    process: &ArrivalProcess,
    now: Timestamp,
    rng: &mut R,
) -> Timestamp {
    let mut t = now;
    loop {
        let rate = process.rate_at(t);
        let gap = (exp_unit(rng) * 1e9 / rate).round() as u64;
        let candidate = t + gap.max(1);
        match process.next_boundary(t) {
            Some(edge) if candidate >= edge => t = edge,
            _ => return candidate.max(now + 1),
        }
    }
}

/// Request class for co-location runs.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Class {
    /// Latency-critical.
    LC,
    /// Best-effort.
    BE,
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Class::LC => "LC",
            Class::BE => "BE",
        })
    }
}

/// Fraction of best-effort requests in the co-location mix.
pub const COLOCATION_BE_FRACTION: f64 = 0.02;

/// Labels a request BE with probability `be_fraction`, LC otherwise.
pub fn colocation_mix<R: Rng + ?Sized>(rng: &mut R, be_fraction: f64) -> Class {
    if rng.random::<f64>() < be_fraction {
        Class::BE
    } else {
        Class::LC
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum RequestState {
    Queued,
    Running,
    Preempted,
    Completed,
}

/// One unit of work.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Request {
    pub id: u64,
    pub arrival: Timestamp,
    pub service_demand: u64,
    pub remaining: u64,
    pub class: Class,
    pub dispatched_at: Option<Timestamp>,
    pub completed_at: Option<Timestamp>,
    pub preempt_count: u32,
}

impl Request {
    pub fn new(id: u64, arrival: Timestamp, service_demand: u64, class: Class) -> Self {
        Request {
            id,
            arrival,
            service_demand,
            remaining: service_demand,
            class,
            dispatched_at: None,
            completed_at: None,
            preempt_count: 0,
        }
    }

    pub fn state(&self) -> RequestState {
        if self.completed_at.is_some() {
            RequestState::Completed
        } else if self.dispatched_at.is_none() {
            RequestState::Queued
        } else if self.remaining < self.service_demand && self.preempt_count > 0 {
            RequestState::Preempted
        } else {
            RequestState::Running
        }
    }
}

/// How service demands are assigned to requests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ServiceModel {
    /// Every request is LC with demand from one distribution.
    Single { service: ServiceDistribution },
    /// Two classes with their own distributions.
    Colocated {
        lc: ServiceDistribution,
        be: ServiceDistribution,
        be_fraction: f64,
    },
}

impl ServiceModel {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        match self {
            Self::Single { service } => service.validate(),
            Self::Colocated {
                lc,
                be,
                be_fraction,
            } => {
                if !(0.0..=1.0).contains(be_fraction) {
                    return Err(WorkloadError::Probability(*be_fraction));
                }
                lc.validate()?;
                be.validate()
            }
        }
    }

    pub fn mean_ns(&self) -> f64 {
        match self {
            Self::Single { service } => service.mean_ns(),
            Self::Colocated {
                lc,
                be,
                be_fraction,
            } => (1.0 - be_fraction) * lc.mean_ns() + be_fraction * be.mean_ns(),
        }
    }
}

/// Named workloads.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    /// Bimodal 99.5% 0.5us / 0.5% 500us.
    A1,
    /// Bimodal 99.5% 5us / 0.5% 500us.
    A2,
    /// Exponential, mean 5us.
    B,
    /// A1 for the first half of the horizon, B for the second.
    C,
    /// Bimodal 99.5% 10us / 0.5% 1000us.
    Fig2Bimodal,
    /// Exponential, mean 10us.
    Fig2Exp,
    /// LC exponential 1us mixed with 2% BE constant 100us.
    Coloc,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::A1,
        Preset::A2,
        Preset::B,
        Preset::C,
        Preset::Fig2Bimodal,
        Preset::Fig2Exp,
        Preset::Coloc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::A1 => "A1",
            Preset::A2 => "A2",
            Preset::B => "B",
            Preset::C => "C",
            Preset::Fig2Bimodal => "FIG2-BIMODAL",
            Preset::Fig2Exp => "FIG2-EXP",
            Preset::Coloc => "COLOC",
        }
    }

    /// Resolves the preset. `horizon` places the switch point of `C`.
    pub fn service_model(self, horizon: Timestamp) -> ServiceModel {
        use ServiceDistribution::*;
        let single = |service| ServiceModel::Single { service };
        let a1 = Bimodal {
            p_short: 0.995,
            short: 500,
            long: 500_000,
        };
        let b = Exponential { mean: 5_000 };
        match self {
            Preset::A1 => single(a1),
            Preset::A2 => single(Bimodal {
                p_short: 0.995,
                short: 5_000,
                long: 500_000,
            }),
            Preset::B => single(b),
            Preset::C => single(Shift {
                first: Box::new(a1),
                second: Box::new(b),
                switch_at: Timestamp((horizon.0 / 2).max(1)),
            }),
            Preset::Fig2Bimodal => single(Bimodal {
                p_short: 0.995,
                short: 10_000,
                long: 1_000_000,
            }),
            Preset::Fig2Exp => single(Exponential { mean: 10_000 }),
            Preset::Coloc => ServiceModel::Colocated {
                lc: Exponential { mean: 1_000 },
                be: Constant { value: 100_000 },
                be_fraction: COLOCATION_BE_FRACTION,
            },
        }
    }
}

impl FromStr for Preset {
    type Err = WorkloadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| WorkloadError::UnknownPreset(s.to_string()))
    }
}

impl Serialize for Preset {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Preset {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Stream identifiers; each selects an independent ChaCha8 stream.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamPurpose {
    Arrivals = 1,
    Services = 2,
    Classes = 3,
    Reservoir = 4,
}

/// Builds the generator for one purpose from the run seed.
pub fn stream_rng(seed: u64, purpose: StreamPurpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}

/// Endless, seed-deterministic request source.
pub struct RequestGenerator {
    model: ServiceModel,
    arrivals: ArrivalProcess,
    arrival_rng: ChaCha8Rng,
    service_rng: ChaCha8Rng,
    class_rng: ChaCha8Rng,
    last_arrival: Timestamp,
    next_id: u64,
}

impl RequestGenerator {
    pub fn new(model: ServiceModel, arrivals: ArrivalProcess, seed: u64) -> Self {
        RequestGenerator {
            model,
            arrivals,
            arrival_rng: stream_rng(seed, StreamPurpose::Arrivals),
            service_rng: stream_rng(seed, StreamPurpose::Services),
            class_rng: stream_rng(seed, StreamPurpose::Classes),
            last_arrival: Timestamp::ZERO,
            next_id: 0,
        }
    }

    pub fn arrivals(&self) -> &ArrivalProcess {
        &self.arrivals
    }
}

impl Iterator for RequestGenerator {
    type Item = Request;

    fn next(&mut self) -> Option<Request> {
        let arrival = next_arrival(&self.arrivals, self.last_arrival, &mut self.arrival_rng);
        self.last_arrival = arrival;
        let (class, demand) = match &self.model {
            ServiceModel::Single { service } => (
                Class::LC,
                sample_service(service, arrival, &mut self.service_rng),
            ),
            ServiceModel::Colocated {
                lc,
                be,
                be_fraction,
            } => {
                let class = colocation_mix(&mut self.class_rng, *be_fraction);
                let dist = if class == Class::BE { be } else { lc };
                (class, sample_service(dist, arrival, &mut self.service_rng))
            }
        };
        let id = self.next_id;
        self.next_id += 1;
        Some(Request::new(id, arrival, demand, class))
    }
}
