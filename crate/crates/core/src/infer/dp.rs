//! Offline planning when the whole arrival trace is known in advance.
//!
//! Forward dynamic programming over decision epochs `(t, pending)`, where
//! the transmitter is free at slot `t` and `pending` is the set of arrived,
//! unserved tasks that can still meet their deadline. With a common relative
//! deadline `D` and at most one arrival per slot, a pending task is
//! identified by its remaining slots, so `pending` is a bitmask (bit `j`
//! means `j + 1` slots remain).

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::levels::LevelTable;
use super::trace::Arrival;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedTx {
    pub level: usize,
    pub start: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpPlan {
    /// Per trace entry: the planned transmission, or `None` if skipped.
    pub assignments: Vec<Option<PlannedTx>>,
    /// Sum of level accuracies over served tasks.
    pub value: f64,
    /// False if beam truncation discarded any state.
    pub exact: bool,
}

impl DpPlan {
    /// Planned tasks in transmission order.
    pub fn order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.assignments.len()).filter(|&i| self.assignments[i].is_some()).collect();
        idx.sort_by_key(|&i| (self.assignments[i].unwrap().start, i));
        idx
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Step {
    Start,
    Serve { remaining: u32, level: usize },
    Idle,
    Jump,
}

type Key = (u64, u64);

#[derive(Debug, Clone, Copy)]
struct Node {
    value: f64,
    parent: Option<Key>,
    step: Step,
}

struct Planner<'a> {
    trace: &'a [Arrival],
    deadline: u32,
    drop_below: u64,
}

impl Planner<'_> {
    fn normalize(&self, mask: u64) -> u64 {
        mask & !self.drop_below
    }

    /// Transmitter busy for `s` slots from `t`; returns the next epoch.
    fn advance(&self, t: u64, mask: u64, s: u32) -> Key {
        let t2 = t + u64::from(s);
        let mut m = if s >= 64 { 0 } else { mask >> s };
        let from = self.trace.partition_point(|a| a.slot <= t);
        for a in &self.trace[from..] {
            if a.slot > t2 {
                break;
            }
            let due = a.slot + u64::from(self.deadline);
            if due > t2 {
                m |= 1 << (due - t2 - 1);
            }
        }
        (t2, self.normalize(m))
    }

    fn next_arrival(&self, t: u64) -> Option<u64> {
        let i = self.trace.partition_point(|a| a.slot <= t);
        self.trace.get(i).map(|a| a.slot)
    }

    fn arrival_mask(&self) -> u64 {
        self.normalize(1 << (self.deadline - 1))
    }
}

fn relax(frontier: &mut BTreeMap<u64, BTreeMap<u64, Node>>, key: Key, node: Node) {
    let slot = frontier.entry(key.0).or_default();
    match slot.get(&key.1) {
        Some(old) if old.value >= node.value => {}
        _ => {
            slot.insert(key.1, node);
        }
    }
}

/// Maximize the summed accuracy of served tasks on a lossless channel.
/// `beam` caps the states kept per decision slot.
pub fn offline_dp_plan(trace: &[Arrival], table: &LevelTable, deadline: u32, beam: usize) -> Result<DpPlan> {
    if deadline == 0 || deadline > 63 {
        return Err(Error::param(format!("offline plan supports deadlines 1..=63 slots, got {deadline}")));
    }
    if beam == 0 {
        return Err(Error::param("beam width must be >= 1"));
    }
    if trace.windows(2).any(|w| w[1].slot <= w[0].slot) {
        return Err(Error::param("offline plan needs at most one arrival per slot, in slot order"));
    }
    let mut plan = DpPlan {
        assignments: vec![None; trace.len()],
        value: 0.0,
        exact: true,
    };
    let Some(first) = trace.first() else {
        return Ok(plan);
    };
    let min_slots = table.min_slots();
    let planner = Planner {
        trace,
        deadline,
        drop_below: (1u64 << (min_slots.min(64) - 1)) - 1,
    };
    let levels = table.undominated();

    let mut frontier: BTreeMap<u64, BTreeMap<u64, Node>> = BTreeMap::new();
    let start = (first.slot, planner.arrival_mask());
    relax(
        &mut frontier,
        start,
        Node {
            value: 0.0,
            parent: None,
            step: Step::Start,
        },
    );
    let mut archive: HashMap<Key, Node> = HashMap::new();
    let mut best: Option<(f64, Key)> = None;

    while let Some((t, states)) = frontier.pop_first() {
        let mut states: Vec<(u64, Node)> = states.into_iter().collect();
        if states.len() > beam {
            states.sort_by(|a, b| b.1.value.total_cmp(&a.1.value).then(a.0.cmp(&b.0)));
            states.truncate(beam);
            plan.exact = false;
        }
        for (mask, node) in states {
            let key = (t, mask);
            archive.insert(key, node);
            if mask == 0 {
                match planner.next_arrival(t) {
                    Some(a) => relax(
                        &mut frontier,
                        (a, planner.arrival_mask()),
                        Node {
                            value: node.value,
                            parent: Some(key),
                            step: Step::Jump,
                        },
                    ),
                    None => {
                        if best.is_none_or(|(v, _)| node.value > v) {
                            best = Some((node.value, key));
                        }
                    }
                }
                continue;
            }
            let mut bits = mask;
            while bits != 0 {
                let j = bits.trailing_zeros();
                bits &= bits - 1;
                let remaining = j + 1;
                for &l in &levels {
                    let s = table.slots(l);
                    if s > remaining {
                        continue;
                    }
                    let next = planner.advance(t, mask & !(1 << j), s);
                    relax(
                        &mut frontier,
                        next,
                        Node {
                            value: node.value + table.accuracy(l),
                            parent: Some(key),
                            step: Step::Serve { remaining, level: l },
                        },
                    );
                }
            }
            relax(
                &mut frontier,
                planner.advance(t, mask, 1),
                Node {
                    value: node.value,
                    parent: Some(key),
                    step: Step::Idle,
                },
            );
        }
    }

    let (value, mut key) = best.expect("every path ends in an empty terminal state");
    plan.value = value;
    loop {
        let node = archive[&key];
        if let Step::Serve { remaining, level } = node.step {
            let parent = node.parent.expect("served from a parent state");
            let deadline_slot = parent.0 + u64::from(remaining);
            let arrival = deadline_slot - u64::from(deadline);
            let task = trace.partition_point(|a| a.slot < arrival);
            plan.assignments[task] = Some(PlannedTx {
                level,
                start: parent.0,
            });
        }
        match node.parent {
            Some(p) => key = p,
            None => break,
        }
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arrivals(slots: &[u64]) -> Vec<Arrival> {
        slots
            .iter()
            .enumerate()
            .map(|(id, &slot)| Arrival { id, slot, sample: 0 })
            .collect()
    }

    fn default_table() -> LevelTable {
        LevelTable::from_pairs(&[(4, 0.93), (2, 0.92), (1, 0.90), (1, 0.88), (1, 0.85)]).unwrap()
    }

    #[test]
    fn lone_task_gets_lossless() {
        let plan = offline_dp_plan(&arrivals(&[3]), &default_table(), 12, 100).unwrap();
        assert_eq!(plan.assignments[0], Some(PlannedTx { level: 0, start: 3 }));
        assert!((plan.value - 0.93).abs() < 1e-12);
        assert!(plan.exact);
    }

    #[test]
    fn contention_prefers_two_cheap_tasks() {
        // Two arrivals one slot apart, deadline 2.
        let plan = offline_dp_plan(&arrivals(&[0, 1]), &default_table(), 2, 100).unwrap();
        assert!((plan.value - 1.82).abs() < 1e-12, "{}", plan.value);
        assert!(plan.assignments.iter().all(Option::is_some));
    }

    #[test]
    fn schedule_respects_channel_and_deadlines() {
        let slots: Vec<u64> = (0..60).filter(|s| s % 3 != 1).collect();
        let trace = arrivals(&slots);
        let table = default_table();
        let plan = offline_dp_plan(&trace, &table, 5, 10_000).unwrap();
        let mut busy = Vec::new();
        for (i, a) in plan.assignments.iter().enumerate() {
            if let Some(tx) = a {
                let end = tx.start + u64::from(table.slots(tx.level));
                assert!(tx.start >= trace[i].slot && end <= trace[i].slot + 5);
                busy.extend(tx.start..end);
            }
        }
        let n = busy.len();
        busy.sort_unstable();
        busy.dedup();
        assert_eq!(busy.len(), n);
        let recomputed: f64 = plan.assignments.iter().flatten().map(|tx| table.accuracy(tx.level)).sum();
        assert!((recomputed - plan.value).abs() < 1e-9);
    }

    #[test]
    fn empty_trace_and_bad_input() {
        let plan = offline_dp_plan(&[], &default_table(), 12, 10).unwrap();
        assert_eq!(plan.value, 0.0);
        assert!(offline_dp_plan(&arrivals(&[2, 2]), &default_table(), 12, 10).is_err());
        assert!(offline_dp_plan(&arrivals(&[2]), &default_table(), 64, 10).is_err());
    }

    #[test]
    fn tiny_beam_is_flagged() {
        let trace = arrivals(&(0..40).collect::<Vec<_>>());
        let plan = offline_dp_plan(&trace, &default_table(), 12, 2).unwrap();
        assert!(!plan.exact);
    }
}
