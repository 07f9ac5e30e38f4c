//! Quantile-driven PRB allocation and its efficiency/risk decomposition.
//!
//! Everything is in integer PRB·hours: allocations are ceiled, demand is
//! rounded to the nearest PRB, and allocations are capped at the static
//! budget `M`. With those conventions `saved + overprovisioned + served`
//! equals `M · T` exactly.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::Forecast;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AllocationError {
    #[error("{forecasts} forecasts but {truths} truths")]
    LengthMismatch { forecasts: usize, truths: usize },
    #[error("static budget must be positive")]
    ZeroBudget,
    #[error("quantile level {0} must lie strictly inside (0, 1)")]
    InvalidLevel(f64),
    #[error("step {step}: {policy} policy needs a predictive distribution")]
    NeedsDistribution { step: usize, policy: &'static str },
    #[error("step {step}: demand {value} is negative or non-finite")]
    InvalidTruth { step: usize, value: f64 },
    #[error("training demand is empty or non-finite")]
    InvalidTraining,
}

pub type Result<T> = std::result::Result<T, AllocationError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    StaticMax,
    DynamicQuantile,
    Point,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub kind: PolicyKind,
    /// Used by the dynamic policy only.
    pub quantile: f64,
}

impl ThresholdPolicy {
    pub const DEFAULT_QUANTILE: f64 = 0.99;

    pub fn static_max() -> Self {
        Self {
            kind: PolicyKind::StaticMax,
            quantile: Self::DEFAULT_QUANTILE,
        }
    }

    pub fn dynamic(p: f64) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(AllocationError::InvalidLevel(p));
        }
        Ok(Self {
            kind: PolicyKind::DynamicQuantile,
            quantile: p,
        })
    }

    pub fn point() -> Self {
        Self {
            kind: PolicyKind::Point,
            quantile: Self::DEFAULT_QUANTILE,
        }
    }

    pub fn label(&self) -> String {
        match self.kind {
            PolicyKind::StaticMax => "static".into(),
            PolicyKind::Point => "point".into(),
            PolicyKind::DynamicQuantile => format!("p{}", self.quantile * 100.0),
        }
    }
}

/// `M`: the training-period peak, rounded up to whole PRBs.
pub fn static_budget(train: &[f64]) -> Result<u64> {
    if train.is_empty() || train.iter().any(|v| !v.is_finite()) {
        return Err(AllocationError::InvalidTraining);
    }
    let peak = train.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let m = peak.ceil().max(0.0) as u64;
    if m == 0 {
        return Err(AllocationError::ZeroBudget);
    }
    Ok(m)
}

/// Summed decomposition; pooled reports add these field by field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AllocationTotals {
    pub steps: u64,
    /// `Σ M` over steps, i.e. `M · T` for a single beam.
    pub budget_mass: u64,
    pub demand: u64,
    pub saved: u64,
    pub overprovisioned: u64,
    pub served: u64,
    pub underprovisioned: u64,
    pub underprov_events: u64,
}

impl AllocationTotals {
    fn ratio(a: u64, b: u64) -> f64 {
        if b == 0 {
            0.0
        } else {
            a as f64 / b as f64
        }
    }

    pub fn savings_frac(&self) -> f64 {
        Self::ratio(self.saved, self.budget_mass)
    }

    pub fn overprov_frac(&self) -> f64 {
        Self::ratio(self.overprovisioned, self.budget_mass)
    }

    pub fn served_frac(&self) -> f64 {
        Self::ratio(self.served, self.budget_mass)
    }

    pub fn underprov_frac(&self) -> f64 {
        Self::ratio(self.underprovisioned, self.demand)
    }

    pub fn underprov_event_rate(&self) -> f64 {
        Self::ratio(self.underprov_events, self.steps)
    }

    /// Savings normalized by total demand instead of the budget.
    pub fn savings_over_demand(&self) -> f64 {
        Self::ratio(self.saved, self.demand)
    }

    pub fn identity_holds(&self) -> bool {
        self.saved + self.overprovisioned + self.served == self.budget_mass
    }

    pub fn add(&mut self, other: &AllocationTotals) {
        self.steps += other.steps;
        self.budget_mass += other.budget_mass;
        self.demand += other.demand;
        self.saved += other.saved;
        self.overprovisioned += other.overprovisioned;
        self.served += other.served;
        self.underprovisioned += other.underprovisioned;
        self.underprov_events += other.underprov_events;
    }

    pub fn pooled<'a>(parts: impl IntoIterator<Item = &'a AllocationTotals>) -> AllocationTotals {
        let mut acc = AllocationTotals::default();
        for p in parts {
            acc.add(p);
        }
        acc
    }

    pub fn summary(&self) -> AllocationSummary {
        AllocationSummary {
            totals: *self,
            savings_frac: self.savings_frac(),
            overprov_frac: self.overprov_frac(),
            served_frac: self.served_frac(),
            underprov_frac: self.underprov_frac(),
            underprov_event_rate: self.underprov_event_rate(),
            savings_over_demand: self.savings_over_demand(),
        }
    }
}

/// Totals plus every derived rate, for serialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocationSummary {
    #[serde(flatten)]
    pub totals: AllocationTotals,
    pub savings_frac: f64,
    pub overprov_frac: f64,
    pub served_frac: f64,
    pub underprov_frac: f64,
    pub underprov_event_rate: f64,
    pub savings_over_demand: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepAllocation {
    pub demand: u64,
    pub allocation: u64,
    pub saved: u64,
    pub overprovisioned: u64,
    pub served: u64,
    pub underprovisioned: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationReport {
    pub policy: ThresholdPolicy,
    pub budget: u64,
    pub steps: Vec<StepAllocation>,
    pub totals: AllocationTotals,
}

impl AllocationReport {
    pub fn allocations(&self) -> impl Iterator<Item = u64> + '_ {
        self.steps.iter().map(|s| s.allocation)
    }

    /// `step,y,allocation,saved,overprov,underprov`
    pub fn write_steps_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "step,y,allocation,saved,overprov,underprov")?;
        for (i, s) in self.steps.iter().enumerate() {
            writeln!(
                w,
                "{i},{},{},{},{},{}",
                s.demand, s.allocation, s.saved, s.overprovisioned, s.underprovisioned
            )?;
        }
        Ok(())
    }
}

fn threshold(policy: &ThresholdPolicy, forecast: &Forecast, budget: u64, step: usize) -> Result<u64> {
    let raw = match (policy.kind, forecast) {
        (PolicyKind::StaticMax, _) => return Ok(budget),
        (PolicyKind::Point, f) => f.center(),
        (PolicyKind::DynamicQuantile, Forecast::Distribution(d)) => d
            .quantile(policy.quantile)
            .map_err(|_| AllocationError::InvalidLevel(policy.quantile))?,
        (PolicyKind::DynamicQuantile, Forecast::Point(_)) => {
            return Err(AllocationError::NeedsDistribution {
                step,
                policy: "dynamic quantile",
            })
        }
    };
    // NaN forecasts fall back to the full budget.
    if raw.is_nan() {
        return Ok(budget);
    }
    let a = raw.ceil();
    Ok(if a <= 0.0 {
        0
    } else if a >= budget as f64 {
        budget
    } else {
        a as u64
    })
}

/// Applies `policy` to aligned forecasts and realised demand.
pub fn allocate(policy: &ThresholdPolicy, forecasts: &[Forecast], truths: &[f64], budget: u64) -> Result<AllocationReport> {
    if forecasts.len() != truths.len() {
        return Err(AllocationError::LengthMismatch {
            forecasts: forecasts.len(),
            truths: truths.len(),
        });
    }
    if budget == 0 {
        return Err(AllocationError::ZeroBudget);
    }
    if policy.kind == PolicyKind::DynamicQuantile && !(policy.quantile > 0.0 && policy.quantile < 1.0) {
        return Err(AllocationError::InvalidLevel(policy.quantile));
    }
    let mut totals = AllocationTotals::default();
    let mut steps = Vec::with_capacity(truths.len());
    for (i, (f, &y)) in forecasts.iter().zip(truths).enumerate() {
        if !(y >= 0.0 && y.is_finite()) {
            return Err(AllocationError::InvalidTruth { step: i, value: y });
        }
        let demand = y.round() as u64;
        let a = threshold(policy, f, budget, i)?;
        let s = StepAllocation {
            demand,
            allocation: a,
            saved: budget - a,
            overprovisioned: a.saturating_sub(demand),
            served: a.min(demand),
            underprovisioned: demand.saturating_sub(a),
        };
        totals.steps += 1;
        totals.budget_mass += budget;
        totals.demand += demand;
        totals.saved += s.saved;
        totals.overprovisioned += s.overprovisioned;
        totals.served += s.served;
        totals.underprovisioned += s.underprovisioned;
        totals.underprov_events += u64::from(s.underprovisioned > 0);
        steps.push(s);
    }
    Ok(AllocationReport {
        policy: *policy,
        budget,
        steps,
        totals,
    })
}

/// Which underprovisioning measure the Pareto analysis trades against savings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskAxis {
    #[default]
    EventRate,
    MassFraction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub label: String,
    pub savings_frac: f64,
    pub underprov_frac: f64,
    pub underprov_event_rate: f64,
    pub dominated: bool,
}

impl ParetoPoint {
    pub fn new(label: impl Into<String>, totals: &AllocationTotals) -> Self {
        Self {
            label: label.into(),
            savings_frac: totals.savings_frac(),
            underprov_frac: totals.underprov_frac(),
            underprov_event_rate: totals.underprov_event_rate(),
            dominated: false,
        }
    }

    pub fn risk(&self, axis: RiskAxis) -> f64 {
        match axis {
            RiskAxis::EventRate => self.underprov_event_rate,
            RiskAxis::MassFraction => self.underprov_frac,
        }
    }
}

/// Flags dominated points and sorts by savings (descending), then label.
///
/// `a` dominates `b` when it saves at least as much with no more risk and
/// is strictly better on one of the two.
pub fn pareto(mut points: Vec<ParetoPoint>, axis: RiskAxis) -> Vec<ParetoPoint> {
    // Sorting by savings desc, risk asc lets one sweep find the front:
    // a point is dominated iff some earlier point is at least as good on
    // both axes and not identical to it.
    points.sort_by(|a, b| {
        b.savings_frac
            .total_cmp(&a.savings_frac)
            .then(a.risk(axis).total_cmp(&b.risk(axis)))
            .then_with(|| a.label.cmp(&b.label))
    });
    let mut best_risk = f64::INFINITY;
    let mut best_savings = f64::NAN;
    for p in points.iter_mut() {
        let r = p.risk(axis);
        p.dominated = r > best_risk || (r == best_risk && p.savings_frac < best_savings);
        if r < best_risk {
            best_risk = r;
            best_savings = p.savings_frac;
        }
    }
    points.sort_by(|a, b| b.savings_frac.total_cmp(&a.savings_frac).then_with(|| a.label.cmp(&b.label)));
    points
}

pub fn write_pareto_csv(points: &[ParetoPoint], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "label,savings_frac,underprov_frac,underprov_event_rate,dominated")?;
    for p in points {
        writeln!(
            w,
            "{},{},{},{},{}",
            p.label, p.savings_frac, p.underprov_frac, p.underprov_event_rate, p.dominated
        )?;
    }
    Ok(())
}
