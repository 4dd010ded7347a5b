//! Online compression-level selection as a discounted MDP over queue
//! states. A decision is taken whenever the transmitter is idle: serve the
//! earliest-deadline task at some level, or idle if the queue is empty.
//!
//! One slot of dynamics: every queued task loses a slot of slack, tasks that
//! no level can fit any more leave, then a task arrives with probability
//! `lambda` (dropped if the queue is full).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::levels::{LevelInfo, LevelTable};
use crate::error::{Error, Result};

/// Sorted remaining-slot counts of the queued tasks.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QueueState(Vec<u32>);

impl QueueState {
    pub fn new(mut remaining: Vec<u32>) -> Self {
        remaining.sort_unstable();
        Self(remaining)
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn remaining(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Earliest-deadline task's remaining slots.
    pub fn head(&self) -> Option<u32> {
        self.0.first().copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Level(usize),
    Idle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MdpConfig {
    pub lambda: f64,
    pub deadline: u32,
    /// Channel capacity the level table was built with; recorded in the
    /// policy header.
    pub capacity_bits: u64,
    pub q_max: usize,
    pub gamma: f64,
    pub tolerance: f64,
    pub max_states: usize,
}

impl Default for MdpConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            deadline: 12,
            capacity_bits: 1600,
            q_max: 4,
            gamma: 0.99,
            tolerance: 1e-6,
            max_states: 200_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdpPolicy {
    pub config: MdpConfig,
    pub table: LevelTable,
    pub ladder_hash: String,
    /// `max |T V − V|` of the stored value map.
    pub residual: f64,
    states: Vec<QueueState>,
    values: Vec<f64>,
    actions: Vec<Action>,
    index: HashMap<QueueState, usize>,
}

/// Outcome of [`online_act`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decision {
    pub action: Action,
    /// The state was outside the policy's truncation.
    pub fallback: bool,
}

fn enumerate_states(values: &[u32], q_max: usize) -> Vec<QueueState> {
    let mut out = vec![QueueState::empty()];
    let mut layer: Vec<Vec<u32>> = vec![Vec::new()];
    for _ in 0..q_max {
        let mut next = Vec::new();
        for s in &layer {
            let lo = s.last().copied().unwrap_or(values[0]);
            for &v in values.iter().filter(|&&v| v >= lo) {
                let mut t = s.clone();
                t.push(v);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned().map(QueueState));
        layer = next;
    }
    out
}

fn binomial(n: u128, k: u128) -> u128 {
    (0..k).fold(1u128, |acc, i| acc * (n - i) / (i + 1))
}

struct Dynamics<'a> {
    config: &'a MdpConfig,
    min_slots: u32,
}

impl Dynamics<'_> {
    /// Distribution after `slots` slots starting from `queue`.
    fn evolve(&self, queue: Vec<u32>, slots: u32) -> Vec<(Vec<u32>, f64)> {
        let lambda = self.config.lambda;
        let mut dist: Vec<(Vec<u32>, f64)> = vec![(queue, 1.0)];
        for _ in 0..slots {
            let mut next: Vec<(Vec<u32>, f64)> = Vec::with_capacity(dist.len() * 2);
            let mut push = |q: Vec<u32>, p: f64| {
                if p == 0.0 {
                    return;
                }
                match next.iter_mut().find(|(s, _)| *s == q) {
                    Some(e) => e.1 += p,
                    None => next.push((q, p)),
                }
            };
            for (q, p) in dist {
                let aged: Vec<u32> = q.iter().filter(|&&r| r > self.min_slots).map(|&r| r - 1).collect();
                if aged.len() < self.config.q_max {
                    let mut with = aged.clone();
                    with.push(self.config.deadline);
                    push(with, p * lambda);
                    push(aged, p * (1.0 - lambda));
                } else {
                    push(aged, p);
                }
            }
            dist = next;
        }
        dist
    }
}

struct Choice {
    action: Action,
    reward: f64,
    discount: f64,
    next: Vec<(usize, f64)>,
}

/// Value iteration over every queue state with at most `q_max` tasks.
pub fn build_mdp(config: &MdpConfig, table: &LevelTable) -> Result<MdpPolicy> {
    if !(0.0..=1.0).contains(&config.lambda) {
        return Err(Error::param(format!("arrival rate {} outside [0, 1]", config.lambda)));
    }
    if !(config.gamma > 0.0 && config.gamma < 1.0) || !(config.tolerance > 0.0) {
        return Err(Error::param("need 0 < gamma < 1 and tolerance > 0"));
    }
    let min_slots = table.min_slots();
    if config.deadline < min_slots {
        return Err(Error::param(format!(
            "deadline {} shorter than the cheapest level ({min_slots} slots)",
            config.deadline
        )));
    }
    let span = u128::from(config.deadline - min_slots + 1);
    let bound: u128 = (0..=config.q_max as u128).map(|k| binomial(span + k - 1, k)).sum();
    if bound > config.max_states as u128 {
        return Err(Error::Config(format!(
            "MDP state space has {bound} states (deadline {}, q_max {}), above the limit of {} (max_states)",
            config.deadline, config.q_max, config.max_states
        )));
    }
    let values_range: Vec<u32> = (min_slots..=config.deadline).collect();
    let states = enumerate_states(&values_range, config.q_max);
    let index: HashMap<QueueState, usize> = states.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
    let dynamics = Dynamics { config, min_slots };

    let choices: Vec<Vec<Choice>> = states
        .iter()
        .map(|s| {
            let to_index = |dist: Vec<(Vec<u32>, f64)>| -> Vec<(usize, f64)> {
                dist.into_iter().map(|(q, p)| (index[&QueueState::new(q)], p)).collect()
            };
            match s.head() {
                None => vec![Choice {
                    action: Action::Idle,
                    reward: 0.0,
                    discount: config.gamma,
                    next: to_index(dynamics.evolve(Vec::new(), 1)),
                }],
                Some(head) => table
                    .feasible(head)
                    .map(|&LevelInfo { level_id, slots, accuracy }| Choice {
                        action: Action::Level(level_id),
                        reward: accuracy,
                        discount: config.gamma.powi(slots as i32),
                        next: to_index(dynamics.evolve(s.0[1..].to_vec(), slots)),
                    })
                    .collect(),
            }
        })
        .collect();

    let backup = |v: &[f64], c: &Choice| c.reward + c.discount * c.next.iter().map(|&(j, p)| p * v[j]).sum::<f64>();
    let greedy = |v: &[f64], cs: &[Choice]| -> (f64, Action) {
        let mut best = (f64::NEG_INFINITY, Action::Idle);
        for c in cs {
            let q = backup(v, c);
            if q > best.0 {
                best = (q, c.action);
            }
        }
        best
    };

    let mut v = vec![0.0; states.len()];
    let residual = loop {
        let next: Vec<f64> = choices.iter().map(|cs| greedy(&v, cs).0).collect();
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if delta * config.gamma < config.tolerance * (1.0 - config.gamma) || delta == 0.0 {
            let check = choices
                .iter()
                .zip(&v)
                .map(|(cs, &x)| (greedy(&v, cs).0 - x).abs())
                .fold(0.0, f64::max);
            if check < config.tolerance {
                break check;
            }
        }
    };
    let actions = choices.iter().map(|cs| greedy(&v, cs).1).collect();
    Ok(MdpPolicy {
        config: *config,
        ladder_hash: table.hash(),
        table: table.clone(),
        residual,
        states,
        values: v,
        actions,
        index,
    })
}

impl MdpPolicy {
    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[QueueState] {
        &self.states
    }

    pub fn value(&self, state: &QueueState) -> Option<f64> {
        self.index.get(state).map(|&i| self.values[i])
    }

    pub fn action(&self, state: &QueueState) -> Option<Action> {
        self.index.get(state).map(|&i| self.actions[i])
    }

    /// Recompute `max |T V − V|` and whether every stored action is greedy.
    pub fn verify(&self) -> (f64, bool) {
        let min_slots = self.table.min_slots();
        let dynamics = Dynamics {
            config: &self.config,
            min_slots,
        };
        let mut residual = 0.0f64;
        let mut consistent = true;
        for (i, s) in self.states.iter().enumerate() {
            let options: Vec<(Action, f64)> = match s.head() {
                None => {
                    let ev: f64 = dynamics
                        .evolve(Vec::new(), 1)
                        .into_iter()
                        .map(|(q, p)| p * self.values[self.index[&QueueState::new(q)]])
                        .sum();
                    vec![(Action::Idle, self.config.gamma * ev)]
                }
                Some(head) => self
                    .table
                    .feasible(head)
                    .map(|l| {
                        let ev: f64 = dynamics
                            .evolve(s.0[1..].to_vec(), l.slots)
                            .into_iter()
                            .map(|(q, p)| p * self.values[self.index[&QueueState::new(q)]])
                            .sum();
                        (Action::Level(l.level_id), l.accuracy + self.config.gamma.powi(l.slots as i32) * ev)
                    })
                    .collect(),
            };
            let best = options.iter().map(|o| o.1).fold(f64::NEG_INFINITY, f64::max);
            residual = residual.max((best - self.values[i]).abs());
            let chosen = options.iter().find(|o| o.0 == self.actions[i]).map(|o| o.1);
            if chosen.is_none_or(|c| c < best - 1e-9) {
                consistent = false;
            }
        }
        (residual, consistent)
    }

    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut out = String::new();
        let _ = writeln!(out, "tes-mdp-policy 1");
        let _ = writeln!(out, "lambda {}", c.lambda);
        let _ = writeln!(out, "deadline {}", c.deadline);
        let _ = writeln!(out, "capacity_bits {}", c.capacity_bits);
        let _ = writeln!(out, "q_max {}", c.q_max);
        let _ = writeln!(out, "gamma {}", c.gamma);
        let _ = writeln!(out, "tolerance {}", c.tolerance);
        let _ = writeln!(out, "ladder_hash {}", self.ladder_hash);
        let _ = writeln!(out, "residual {}", self.residual);
        let _ = writeln!(out, "levels {}", self.table.len());
        for l in &self.table.levels {
            let _ = writeln!(out, "level {} {} {}", l.level_id, l.slots, l.accuracy);
        }
        let _ = writeln!(out, "states {}", self.states.len());
        for (i, s) in self.states.iter().enumerate() {
            let key = if s.is_empty() {
                "-".to_string()
            } else {
                s.0.iter().map(u32::to_string).collect::<Vec<_>>().join(",")
            };
            let action = match self.actions[i] {
                Action::Level(l) => format!("L{l}"),
                Action::Idle => "idle".to_string(),
            };
            let _ = writeln!(out, "{key} {} {action}", self.values[i]);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut r = Lines {
            inner: text.lines().enumerate(),
            at: 0,
        };
        if r.row("header")? != ["tes-mdp-policy", "1"] {
            return Err(r.bad("magic (expected `tes-mdp-policy 1`)"));
        }
        let lambda = r.field("lambda")?;
        let deadline = r.field("deadline")?;
        let capacity_bits = r.field("capacity_bits")?;
        let q_max = r.field("q_max")?;
        let gamma = r.field("gamma")?;
        let tolerance = r.field("tolerance")?;
        let ladder_hash: String = r.field("ladder_hash")?;
        let residual = r.field("residual")?;
        let n_levels: usize = r.field("levels")?;
        let mut pairs = Vec::with_capacity(n_levels);
        for _ in 0..n_levels {
            let row = r.row("level")?;
            let pair = match row.as_slice() {
                ["level", _, s, a] => s.parse().ok().zip(a.parse().ok()),
                _ => None,
            };
            pairs.push(pair.ok_or_else(|| r.bad("level"))?);
        }
        let table = LevelTable::from_pairs(&pairs)?;
        if table.hash() != ladder_hash {
            return Err(Error::Config("policy ladder_hash does not match its level table".into()));
        }
        let n_states: usize = r.field("states")?;
        let mut states = Vec::with_capacity(n_states);
        let mut values = Vec::with_capacity(n_states);
        let mut actions = Vec::with_capacity(n_states);
        for _ in 0..n_states {
            let row = r.row("state")?;
            let [key, value, action] = row.as_slice() else {
                return Err(r.bad("state row"));
            };
            let remaining = if *key == "-" {
                Some(Vec::new())
            } else {
                key.split(',').map(|v| v.parse::<u32>().ok()).collect::<Option<Vec<_>>>()
            };
            states.push(QueueState::new(remaining.ok_or_else(|| r.bad("state key"))?));
            values.push(value.parse::<f64>().map_err(|_| r.bad("value"))?);
            actions.push(match *action {
                "idle" => Action::Idle,
                a => Action::Level(
                    a.strip_prefix('L')
                        .and_then(|l| l.parse().ok())
                        .ok_or_else(|| r.bad("action"))?,
                ),
            });
        }
        let index = states.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
        Ok(Self {
            config: MdpConfig {
                lambda,
                deadline,
                capacity_bits,
                q_max,
                gamma,
                tolerance,
                max_states: n_states.max(1),
            },
            table,
            ladder_hash,
            residual,
            states,
            values,
            actions,
            index,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

struct Lines<'a, I: Iterator<Item = (usize, &'a str)>> {
    inner: I,
    at: usize,
}

impl<'a, I: Iterator<Item = (usize, &'a str)>> Lines<'a, I> {
    fn row(&mut self, what: &str) -> Result<Vec<&'a str>> {
        let (n, line) = self
            .inner
            .next()
            .ok_or_else(|| Error::Config(format!("policy file ends before {what}")))?;
        self.at = n + 1;
        Ok(line.split_whitespace().collect())
    }

    fn field<T: std::str::FromStr>(&mut self, name: &str) -> Result<T> {
        match self.row(name)?.as_slice() {
            [k, v] if *k == name => v.parse().map_err(|_| self.bad(name)),
            _ => Err(self.bad(name)),
        }
    }

    fn bad(&self, what: &str) -> Error {
        Error::Config(format!("policy file line {}: bad {what}", self.at))
    }
}

/// Greedy action for `state`; outside the truncation, fall back to the
/// most accurate level that fits the earliest-deadline task.
pub fn online_act(policy: &MdpPolicy, state: &QueueState) -> Decision {
    let Some(head) = state.head() else {
        return Decision {
            action: Action::Idle,
            fallback: false,
        };
    };
    if let Some(action) = policy.action(state) {
        return Decision {
            action,
            fallback: false,
        };
    }
    Decision {
        action: policy.table.best_fit(head).map_or(Action::Idle, Action::Level),
        fallback: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> LevelTable {
        LevelTable::from_pairs(&[(4, 0.93), (2, 0.92), (1, 0.90), (1, 0.88), (1, 0.85)]).unwrap()
    }

    fn small() -> MdpConfig {
        MdpConfig {
            lambda: 0.5,
            deadline: 6,
            q_max: 3,
            ..MdpConfig::default()
        }
    }

    #[test]
    fn lone_task_without_arrivals_goes_lossless() {
        let cfg = MdpConfig {
            lambda: 0.0,
            ..small()
        };
        let p = build_mdp(&cfg, &table()).unwrap();
        assert_eq!(online_act(&p, &QueueState::new(vec![5])).action, Action::Level(0));
        assert_eq!(online_act(&p, &QueueState::new(vec![3])).action, Action::Level(1));
    }

    #[test]
    fn feasibility_and_idle() {
        let p = build_mdp(&small(), &table()).unwrap();
        assert_eq!(online_act(&p, &QueueState::empty()).action, Action::Idle);
        for s in p.states().iter().filter(|s| !s.is_empty()) {
            let Action::Level(l) = online_act(&p, s).action else { panic!("idle with tasks queued") };
            assert!(p.table.slots(l) <= s.head().unwrap());
        }
        assert_eq!(online_act(&p, &QueueState::new(vec![1, 4])).action, Action::Level(2));
    }

    #[test]
    fn residual_and_greedy_consistency() {
        let p = build_mdp(&small(), &table()).unwrap();
        assert!(p.residual < 1e-6);
        let (r, ok) = p.verify();
        assert!(r < 1e-6, "{r}");
        assert!(ok);
    }

    #[test]
    fn fallback_outside_truncation() {
        let p = build_mdp(&small(), &table()).unwrap();
        let d = online_act(&p, &QueueState::new(vec![2, 3, 4, 5, 6]));
        assert!(d.fallback);
        assert_eq!(d.action, Action::Level(1));
    }

    #[test]
    fn state_limit_names_bound() {
        let cfg = MdpConfig {
            max_states: 10,
            ..small()
        };
        let err = build_mdp(&cfg, &table()).unwrap_err().to_string();
        assert!(err.contains("max_states"), "{err}");
    }

    #[test]
    fn text_round_trip() {
        let p = build_mdp(&small(), &table()).unwrap();
        let q = MdpPolicy::from_text(&p.to_text()).unwrap();
        assert_eq!(q.ladder_hash, p.ladder_hash);
        for s in p.states() {
            assert_eq!(p.value(s), q.value(s));
            assert_eq!(p.action(s), q.action(s));
        }
        let tampered = p.to_text().replace("level 0 4 0.93", "level 0 4 0.5");
        assert!(MdpPolicy::from_text(&tampered).is_err());
    }
}
