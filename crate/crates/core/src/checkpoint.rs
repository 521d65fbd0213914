//! Checkpoint storage policies and the binomial (Revolve-type) schedule for
//! reversing a fixed number of time steps under a slot budget.
//!
//! A slot holds a full step record (start state plus stage states). Having the
//! record of step `c` means step `c` can be reversed without recomputation and
//! the state after it is available, so advancing from slot `c` starts at step
//! `c + 1`. Under this convention the minimal number of steps recomputed in
//! the reverse pass is
//!
//! ```text
//! p(nt, nc) = (t - 1) nt - C(nc + t, t - 1) + 1,
//!     with t such that C(nc + t - 1, t - 1) < nt <= C(nc + t, t).
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::VectorField;
use crate::integrate::{Counters, Integrator, StepRecord};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CheckpointPolicy {
    /// Keep every step's state and stage vectors.
    StoreAll,
    /// Keep only step-start states; stages are recomputed on reversal.
    StoreSolutions,
    /// Binomial schedule with at most `capacity` full-record slots.
    Revolve { capacity: usize },
}

impl CheckpointPolicy {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Revolve { capacity: 0 } => Err(Error::InvalidConfig(
                "revolve needs at least one checkpoint slot".into(),
            )),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for CheckpointPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::StoreAll => f.write_str("store-all"),
            Self::StoreSolutions => f.write_str("store-solutions"),
            Self::Revolve { capacity } => write!(f, "revolve:{capacity}"),
        }
    }
}

impl FromStr for CheckpointPolicy {
    type Err = Error;

    /// Accepts `store-all`, `store-solutions` and `revolve:<slots>`
    /// (underscores are accepted in place of dashes).
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('_', "-");
        match norm.as_str() {
            "store-all" => Ok(Self::StoreAll),
            "store-solutions" => Ok(Self::StoreSolutions),
            other => {
                let cap = other
                    .strip_prefix("revolve:")
                    .and_then(|c| c.parse::<usize>().ok())
                    .ok_or_else(|| Error::UnknownPolicy(s.to_string()))?;
                let p = Self::Revolve { capacity: cap };
                p.validate()?;
                Ok(p)
            }
        }
    }
}

/// `C(n, k)`, zero for `k < 0` or `k > n`; saturates instead of overflowing.
pub fn binomial(n: i64, k: i64) -> u128 {
    if k < 0 || n < 0 || k > n {
        return 0;
    }
    let k = k.min(n - k) as u128;
    let n = n as u128;
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul(n - i) {
            Some(v) => v / (i + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// Minimal number of recomputed steps for reversing `nt` steps with `nc`
/// checkpoint slots (closed form).
pub fn revolve_count(nt: usize, nc: usize) -> u64 {
    assert!(nt >= 1 && nc >= 1, "revolve_count needs nt >= 1 and nc >= 1");
    let (nt_i, nc_i) = (nt as i64, nc as i64);
    let mut t: i64 = 0;
    loop {
        let lo = binomial(nc_i + t - 1, t - 1);
        let hi = binomial(nc_i + t, t);
        if lo < nt as u128 && nt as u128 <= hi {
            break;
        }
        t += 1;
    }
    let p = (t - 1) as i128 * nt_i as i128 - binomial(nc_i + t, t - 1) as i128 + 1;
    debug_assert!(p >= 0);
    p as u64
}

/// Total forward steps (initial sweep and recomputations) of the classical
/// reversal of `l` steps with `s` snapshots.
fn total_advances(l: usize, s: usize) -> u64 {
    revolve_count(l, s) + l as u64 - 1
}

/// Minimal recomputation count by exhaustive dynamic programming over the
/// split recurrence `T(l, s) = min_j [ j + T(l - j, s - 1) + T(j, s) ]`.
pub fn dp_optimal_count(nt: usize, nc: usize) -> u64 {
    assert!(nt >= 1 && nc >= 1);
    // table[s][l] = T(l, s)
    let mut table = vec![vec![0u64; nt + 1]; nc + 1];
    for l in 1..=nt {
        table[1][l] = (l as u64) * (l as u64 - 1) / 2;
    }
    for s in 2..=nc {
        for l in 2..=nt {
            table[s][l] = (1..l)
                .map(|j| j as u64 + table[s - 1][l - j] + table[s][j])
                .min()
                .expect("non-empty split range");
        }
    }
    table[nc][nt] - (nt as u64 - 1)
}

/// One instruction of a checkpointing schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "action")]
pub enum ScheduleAction {
    /// Compute steps `from..to` starting from the state at index `from`.
    Advance { from: usize, to: usize },
    /// Put the record of step `step` (the last computed step) into a slot.
    Store { step: usize },
    /// Make the record in slot `step` current (state index becomes `step + 1`).
    Restore { step: usize },
    /// Run the adjoint of step `step`; a slot holding it is released.
    Reverse { step: usize },
}

/// First split offset for reversing `l` steps with `s` snapshots, taken from
/// the binomial optimality range and checked against the closed-form cost.
fn split_offset(l: usize, s: usize) -> usize {
    debug_assert!(l >= 2 && s >= 2);
    let beta = |s: i64, r: i64| -> i64 { binomial(s + r, s).min(i64::MAX as u128) as i64 };
    let (li, si) = (l as i64, s as i64);
    let mut r = 0i64;
    while beta(si, r) < li {
        r += 1;
    }
    let lo = beta(si, r - 2).max(li - beta(si - 1, r));
    let hi = beta(si, r - 1).min(li - beta(si - 1, r - 1));
    let optimal = total_advances(l, s);
    let cost = |j: usize| j as u64 + total_advances(l - j, s - 1) + total_advances(j, s);
    let cand = lo.max(1).min(li - 1) as usize;
    if lo <= hi && cost(cand) == optimal {
        return cand;
    }
    (1..l).find(|&j| cost(j) == optimal).expect("an optimal split exists")
}

fn emit_reversal(start: usize, end: usize, s: usize, out: &mut Vec<ScheduleAction>) {
    let l = end - start;
    if l == 1 {
        out.push(ScheduleAction::Reverse { step: start });
        return;
    }
    if s == 1 {
        for n in (start + 1..end).rev() {
            out.push(ScheduleAction::Restore { step: start });
            out.push(ScheduleAction::Advance { from: start + 1, to: n + 1 });
            out.push(ScheduleAction::Reverse { step: n });
        }
        out.push(ScheduleAction::Reverse { step: start });
        return;
    }
    let m = start + split_offset(l, s);
    out.push(ScheduleAction::Restore { step: start });
    out.push(ScheduleAction::Advance { from: start + 1, to: m + 1 });
    out.push(ScheduleAction::Store { step: m });
    emit_reversal(m, end, s - 1, out);
    emit_reversal(start, m, s, out);
}

/// Binomial schedule reversing `nt` steps with at most `nc` occupied slots.
/// The schedule starts from the initial state and includes the first
/// forward sweep.
pub fn revolve_schedule(nt: usize, nc: usize) -> Vec<ScheduleAction> {
    assert!(nt >= 1 && nc >= 1);
    let mut out = vec![
        ScheduleAction::Advance { from: 0, to: 1 },
        ScheduleAction::Store { step: 0 },
    ];
    emit_reversal(0, nt, nc, &mut out);
    // Restores of the slot that is already current are no-ops; drop them.
    let mut cleaned: Vec<ScheduleAction> = Vec::with_capacity(out.len());
    let mut last_computed: Option<usize> = None;
    for a in out {
        match a {
            ScheduleAction::Restore { step } if last_computed == Some(step) => {}
            ScheduleAction::Advance { to, .. } => {
                last_computed = Some(to - 1);
                cleaned.push(a);
            }
            ScheduleAction::Restore { step } => {
                last_computed = Some(step);
                cleaned.push(a);
            }
            ScheduleAction::Reverse { .. } => {
                last_computed = None;
                cleaned.push(a);
            }
            ScheduleAction::Store { .. } => cleaned.push(a),
        }
    }
    cleaned
}

/// Summary of a dry run of a schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ScheduleAudit {
    pub initial_sweep: u64,
    pub recomputed_steps: u64,
    pub max_slots: usize,
}

/// Simulates a schedule without numerics and checks its validity: steps are
/// reversed exactly once in descending order, advances start at available
/// states, and slot usage never exceeds `nc`.
pub fn audit_schedule(nt: usize, nc: usize, actions: &[ScheduleAction]) -> Result<ScheduleAudit> {
    let bad = |msg: String| Err(Error::InvalidConfig(format!("invalid schedule: {msg}")));
    let mut slots = std::collections::BTreeSet::new();
    let mut cursor: usize = 0; // index of the state currently held
    let mut live: Option<usize> = None;
    let mut next_reverse = nt as i64 - 1;
    let mut first_reverse_seen = false;
    let (mut initial, mut extra, mut max_slots) = (0u64, 0u64, 0usize);
    for &a in actions {
        match a {
            ScheduleAction::Advance { from, to } => {
                if from != cursor || to <= from || to > nt {
                    return bad(format!("advance {from}->{to} from state {cursor}"));
                }
                let d = (to - from) as u64;
                if first_reverse_seen {
                    extra += d;
                } else {
                    initial += d;
                }
                cursor = to;
                live = Some(to - 1);
            }
            ScheduleAction::Store { step } => {
                if live != Some(step) {
                    return bad(format!("store of step {step} that is not current"));
                }
                slots.insert(step);
                max_slots = max_slots.max(slots.len());
                if slots.len() > nc {
                    return Err(Error::CheckpointCapacity { capacity: nc });
                }
            }
            ScheduleAction::Restore { step } => {
                if !slots.contains(&step) {
                    return bad(format!("restore of empty slot {step}"));
                }
                live = Some(step);
                cursor = step + 1;
            }
            ScheduleAction::Reverse { step } => {
                if step as i64 != next_reverse {
                    return bad(format!("reverse of step {step}, expected {next_reverse}"));
                }
                if !slots.remove(&step) && live != Some(step) {
                    return bad(format!("reverse of step {step} without its record"));
                }
                if live == Some(step) {
                    live = None;
                }
                next_reverse -= 1;
                first_reverse_seen = true;
            }
        }
    }
    if next_reverse != -1 {
        return bad(format!("steps 0..={next_reverse} were never reversed"));
    }
    Ok(ScheduleAudit {
        initial_sweep: initial,
        recomputed_steps: extra,
        max_slots,
    })
}

#[derive(Debug, Clone)]
enum Slot<T> {
    Full(StepRecord<T>),
    State { t: T, h: T, u: Vec<T> },
}

/// Storage statistics of a checkpoint store.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreStats {
    /// Number of state vectors written to the store.
    pub stored_states: u64,
    /// Number of stage vectors written to the store.
    pub stored_stage_vectors: u64,
    pub recomputed_steps: u64,
    /// Peak number of occupied slots.
    pub max_slots: usize,
    /// Peak number of state-sized vectors held.
    pub peak_vectors: usize,
}

/// Deep-copied checkpoints keyed by step index.
#[derive(Debug, Clone)]
pub struct CheckpointStore<T> {
    capacity: Option<usize>,
    slots: BTreeMap<usize, Slot<T>>,
    vectors: usize,
    pub stats: StoreStats,
}

impl<T: Real> CheckpointStore<T> {
    pub fn new(capacity: Option<usize>) -> Self {
        Self {
            capacity,
            slots: BTreeMap::new(),
            vectors: 0,
            stats: StoreStats::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    fn insert(&mut self, n: usize, slot: Slot<T>) -> Result<()> {
        if let Some(cap) = self.capacity {
            if self.slots.len() >= cap && !self.slots.contains_key(&n) {
                return Err(Error::CheckpointCapacity { capacity: cap });
            }
        }
        let vecs = match &slot {
            Slot::Full(r) => {
                self.stats.stored_stage_vectors += r.stages.len() as u64;
                r.vector_count()
            }
            Slot::State { .. } => 1,
        };
        self.stats.stored_states += 1;
        if let Some(old) = self.slots.insert(n, slot) {
            self.vectors -= Self::slot_vectors(&old);
        }
        self.vectors += vecs;
        self.stats.max_slots = self.stats.max_slots.max(self.slots.len());
        self.stats.peak_vectors = self.stats.peak_vectors.max(self.vectors);
        Ok(())
    }

    fn slot_vectors(s: &Slot<T>) -> usize {
        match s {
            Slot::Full(r) => r.vector_count(),
            Slot::State { .. } => 1,
        }
    }

    /// Stores a full record (state and stages).
    pub fn store_record(&mut self, rec: &StepRecord<T>) -> Result<()> {
        self.insert(rec.n, Slot::Full(rec.clone()))
    }

    /// Stores only the step-start state of a record.
    pub fn store_state(&mut self, rec: &StepRecord<T>) -> Result<()> {
        self.insert(
            rec.n,
            Slot::State {
                t: rec.t,
                h: rec.h,
                u: rec.u.clone(),
            },
        )
    }

    pub fn contains(&self, n: usize) -> bool {
        self.slots.contains_key(&n)
    }

    /// Returns the record of step `n`, replaying the step when only its state
    /// was kept. With `release`, the slot is freed.
    pub fn restore<F: VectorField<T>>(
        &mut self,
        n: usize,
        release: bool,
        integrator: &Integrator<T>,
        field: &F,
        counters: &mut Counters,
    ) -> Result<StepRecord<T>> {
        let slot = if release {
            let s = self.slots.remove(&n).ok_or(Error::CheckpointMissing(n))?;
            self.vectors -= Self::slot_vectors(&s);
            s
        } else {
            self.slots.get(&n).cloned().ok_or(Error::CheckpointMissing(n))?
        };
        match slot {
            Slot::Full(rec) => Ok(rec),
            Slot::State { t, h, u } => {
                self.stats.recomputed_steps += 1;
                counters.steps_recomputed += 1;
                integrator.step(field, n, &u, t, h, counters)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Quadratic;
    use crate::integrate::StepController;
    use crate::tableau::{tableau_catalog, Scheme};

    #[test]
    fn binomials() {
        assert_eq!(binomial(5, 2), 10);
        assert_eq!(binomial(4, -1), 0);
        assert_eq!(binomial(3, 0), 1);
        assert_eq!(binomial(2, 3), 0);
        assert_eq!(binomial(200, 100), u128::MAX);
    }

    #[test]
    fn closed_form_spot_values() {
        assert_eq!(revolve_count(10, 3), 6);
        assert_eq!(revolve_count(4, 1), 3);
        assert_eq!(revolve_count(2, 1), 0);
        assert_eq!(revolve_count(1, 1), 0);
        for nt in 2..30 {
            assert_eq!(revolve_count(nt, nt - 1), 0);
        }
    }

    #[test]
    fn dp_spot_values() {
        assert_eq!(dp_optimal_count(10, 3), 6);
        assert_eq!(dp_optimal_count(4, 1), 3);
        assert_eq!(dp_optimal_count(2, 1), 0);
        for nt in 2..20 {
            assert_eq!(dp_optimal_count(nt, nt - 1), 0);
        }
    }

    #[test]
    fn small_schedules() {
        let s = revolve_schedule(4, 1);
        let a = audit_schedule(4, 1, &s).unwrap();
        assert_eq!((a.initial_sweep, a.recomputed_steps, a.max_slots), (4, 3, 1));
        let s = revolve_schedule(3, 2);
        assert_eq!(audit_schedule(3, 2, &s).unwrap().recomputed_steps, 0);
        let s = revolve_schedule(10, 3);
        let a = audit_schedule(10, 3, &s).unwrap();
        assert_eq!(a.recomputed_steps, 6);
        assert!(a.max_slots <= 3);
    }

    #[test]
    fn audit_rejects_broken_schedules() {
        let mut s = revolve_schedule(5, 2);
        s.pop();
        assert!(audit_schedule(5, 2, &s).is_err());
        let s = revolve_schedule(6, 3);
        assert!(matches!(audit_schedule(6, 1, &s), Err(Error::CheckpointCapacity { .. })));
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("store-all".parse::<CheckpointPolicy>().unwrap(), CheckpointPolicy::StoreAll);
        assert_eq!("store_solutions".parse::<CheckpointPolicy>().unwrap(), CheckpointPolicy::StoreSolutions);
        assert_eq!(
            "revolve:3".parse::<CheckpointPolicy>().unwrap(),
            CheckpointPolicy::Revolve { capacity: 3 }
        );
        assert!("revolve:0".parse::<CheckpointPolicy>().is_err());
        assert!("revolve".parse::<CheckpointPolicy>().is_err());
    }

    #[test]
    fn store_restore_semantics() {
        let integ = Integrator::new(tableau_catalog::<f64>(Scheme::Rk4), StepController::fixed(4));
        let field = Quadratic::new(vec![0.7]);
        let mut recs = Vec::new();
        let mut c = Counters::default();
        integ
            .integrate(&field, &[0.4], 0.0, 1.0, &mut c, |r| {
                recs.push(r);
                Ok(())
            })
            .unwrap();

        let mut all = CheckpointStore::new(None);
        let mut sol = CheckpointStore::new(None);
        for r in &recs {
            all.store_record(r).unwrap();
            sol.store_state(r).unwrap();
        }
        for r in &recs {
            assert_eq!(&all.restore(r.n, false, &integ, &field, &mut c).unwrap(), r);
            assert_eq!(&sol.restore(r.n, true, &integ, &field, &mut c).unwrap(), r);
        }
        assert_eq!(all.stats.recomputed_steps, 0);
        assert_eq!(sol.stats.recomputed_steps, 4);
        assert_eq!(all.stats.peak_vectors, 4 * 5);
        assert!(sol.is_empty());

        let mut capped = CheckpointStore::new(Some(1));
        capped.store_record(&recs[0]).unwrap();
        assert!(matches!(capped.store_record(&recs[1]), Err(Error::CheckpointCapacity { .. })));
        assert!(matches!(
            capped.restore(3, false, &integ, &field, &mut c),
            Err(Error::CheckpointMissing(3))
        ));
    }
}
