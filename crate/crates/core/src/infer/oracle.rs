//! Exhaustive reference solvers for small instances.

use std::collections::HashMap;

use super::levels::LevelTable;
use super::trace::Arrival;

/// Best summed accuracy over every subset, level choice and service order,
/// each order started as early as possible.
pub fn brute_force_plan_value(trace: &[Arrival], table: &LevelTable, deadline: u32) -> f64 {
    fn go(trace: &[Arrival], table: &LevelTable, deadline: u64, used: &mut [bool], free_at: u64, value: f64) -> f64 {
        let mut best = value;
        for i in 0..trace.len() {
            if used[i] {
                continue;
            }
            for l in 0..table.len() {
                let start = free_at.max(trace[i].slot);
                let end = start + u64::from(table.slots(l));
                if end > trace[i].slot + deadline {
                    continue;
                }
                used[i] = true;
                best = best.max(go(trace, table, deadline, used, end, value + table.accuracy(l)));
                used[i] = false;
            }
        }
        best
    }
    go(trace, table, u64::from(deadline), &mut vec![false; trace.len()], 0, 0.0)
}

/// Discounted expectimax over the arrival event tree, expanded one slot at a
/// time, with the same queue dynamics as the online policy.
pub struct Expectimax<'a> {
    table: &'a LevelTable,
    lambda: f64,
    deadline: u32,
    q_max: usize,
    gamma: f64,
    memo: HashMap<(Vec<u32>, u32), f64>,
}

impl<'a> Expectimax<'a> {
    pub fn new(table: &'a LevelTable, lambda: f64, deadline: u32, q_max: usize, gamma: f64) -> Self {
        Self {
            table,
            lambda,
            deadline,
            q_max,
            gamma,
            memo: HashMap::new(),
        }
    }

    /// Value of a decision epoch with sorted `queue` and `horizon` slots left.
    pub fn value(&mut self, queue: &[u32], horizon: u32) -> f64 {
        let mut q = queue.to_vec();
        q.sort_unstable();
        self.decide(q, horizon)
    }

    fn decide(&mut self, queue: Vec<u32>, horizon: u32) -> f64 {
        if horizon == 0 {
            return 0.0;
        }
        if let Some(&v) = self.memo.get(&(queue.clone(), horizon)) {
            return v;
        }
        let v = match queue.first() {
            None => self.gamma * self.elapse(Vec::new(), 1, horizon - 1),
            Some(&head) => {
                let mut best = f64::NEG_INFINITY;
                for l in 0..self.table.len() {
                    let s = self.table.slots(l);
                    if s > head || s > horizon {
                        continue;
                    }
                    let future = self.gamma.powi(s as i32) * self.elapse(queue[1..].to_vec(), s, horizon - s);
                    best = best.max(self.table.accuracy(l) + future);
                }
                best
            }
        };
        self.memo.insert((queue, horizon), v);
        v
    }

    fn elapse(&mut self, queue: Vec<u32>, busy: u32, horizon: u32) -> f64 {
        if busy == 0 {
            let mut q = queue;
            q.sort_unstable();
            return self.decide(q, horizon);
        }
        let min = self.table.min_slots();
        let aged: Vec<u32> = queue.iter().filter(|&&r| r > min).map(|&r| r - 1).collect();
        if aged.len() >= self.q_max {
            return self.elapse(aged, busy - 1, horizon);
        }
        let mut with = aged.clone();
        with.push(self.deadline);
        self.lambda * self.elapse(with, busy - 1, horizon) + (1.0 - self.lambda) * self.elapse(aged, busy - 1, horizon)
    }
}
