//! Slot-by-slot replay of an arrival trace over the lossy uplink.
//!
//! Each slot, in order: tasks that can no longer be served expire, the slot's
//! arrival joins the queue, an idle transmitter picks the next task and level,
//! and one packet goes out. A task's last packet yields an inference result,
//! after which augmentation may ask for the same sample again at a less
//! compressed level.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::dp::{offline_dp_plan, DpPlan};
use super::levels::{LevelPredictions, LevelTable, Outcome};
use super::mdp::{online_act, Action, MdpPolicy, QueueState};
use super::trace::Arrival;
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// When to ask for a less compressed copy after a result comes back.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Augment {
    #[default]
    Off,
    /// The server knows whether the result is right.
    Oracle,
    /// Retry when `1 − max prob` exceeds `tau`.
    Uncertainty {
        #[serde(default = "default_tau")]
        tau: f64,
    },
}

/// Uncertainty threshold used when a config names the mode alone.
pub const DEFAULT_TAU: f64 = 0.5;

fn default_tau() -> f64 {
    DEFAULT_TAU
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentDecision {
    Retransmit(usize),
    Stop,
}

/// Retry at the least compressed level that still fits `remaining` slots,
/// provided it is less compressed than `current` and the mode calls for it.
pub fn augment_decide(
    mode: Augment,
    outcome: Outcome,
    current: usize,
    remaining: u32,
    table: &LevelTable,
) -> AugmentDecision {
    let doubt = match mode {
        Augment::Off => false,
        Augment::Oracle => !outcome.correct,
        Augment::Uncertainty { tau } => outcome.uncertainty > tau,
    };
    if !doubt {
        return AugmentDecision::Stop;
    }
    table
        .levels
        .iter()
        .take(current)
        .find(|l| l.slots <= remaining)
        .map_or(AugmentDecision::Stop, |l| AugmentDecision::Retransmit(l.level_id))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimOptions {
    /// Relative deadline in slots.
    pub deadline: u32,
    pub loss_p: f64,
    /// Resend lost packets; otherwise a loss silently corrupts the task.
    pub retransmit: bool,
    pub augment: Augment,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            deadline: 12,
            loss_p: 0.0,
            retransmit: true,
            augment: Augment::Off,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum InferScheduler<'a> {
    /// Always the lossless level 0.
    NoCompression,
    Fixed(usize),
    /// Follow a plan computed with the whole trace in hand.
    OfflineDp { beam: usize },
    Mdp(&'a MdpPolicy),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskStatus {
    Queued,
    Transmitting,
    AwaitingAugment,
    DoneCorrect,
    DoneWrong,
    Expired,
}

impl TaskStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::DoneCorrect | Self::DoneWrong | Self::Expired)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub id: usize,
    pub arrival_slot: u64,
    pub deadline_slot: u64,
    pub sample: usize,
    pub status: TaskStatus,
    /// Correctness of the newest completed result, if any.
    pub last_result: Option<bool>,
}

impl Task {
    fn finish(&mut self, status: TaskStatus) {
        debug_assert!(!self.status.is_terminal(), "task {} finished twice", self.id);
        self.status = status;
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CompletionStats {
    pub tasks_total: u64,
    pub completed_correct: u64,
    pub wrong: u64,
    pub expired: u64,
    /// Transmissions started per level, augmentation retries included.
    pub level_usage: Vec<u64>,
    /// Packets sent again after a loss.
    pub retransmissions: u64,
    pub augmentations: u64,
    /// MDP decisions taken outside the policy's state truncation.
    pub fallbacks: u64,
    /// Arrivals turned away by a full MDP queue (also counted expired).
    pub overflow: u64,
    /// Sum of table accuracy over uncorrupted completed transmissions.
    pub reward: f64,
    /// Task occupying the channel in each slot.
    #[serde(skip)]
    pub channel: Vec<Option<usize>>,
}

impl CompletionStats {
    pub fn completion_ratio(&self) -> f64 {
        if self.tasks_total == 0 {
            0.0
        } else {
            self.completed_correct as f64 / self.tasks_total as f64
        }
    }
}

struct InFlight {
    task: usize,
    level: usize,
    packets_left: u32,
    corrupted: bool,
}

/// Replay `trace`; `rng` drives packet losses, one draw per sent packet.
pub fn simulate(
    scheduler: InferScheduler<'_>,
    options: &SimOptions,
    trace: &[Arrival],
    predictions: &LevelPredictions,
    table: &LevelTable,
    rng: &mut RngStream,
) -> Result<CompletionStats> {
    if options.deadline == 0 {
        return Err(Error::param("deadline must be at least one slot"));
    }
    if !(0.0..=1.0).contains(&options.loss_p) {
        return Err(Error::param(format!("packet loss {} outside [0, 1]", options.loss_p)));
    }
    if let Augment::Uncertainty { tau } = options.augment {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::param(format!("uncertainty threshold {tau} outside [0, 1]")));
        }
    }
    if predictions.n_levels() != table.len() {
        return Err(Error::param("predictions and level table disagree on the ladder"));
    }
    if let Some(a) = trace.iter().find(|a| a.sample >= predictions.n_samples()) {
        return Err(Error::param(format!("task {} refers to sample {} beyond the test set", a.id, a.sample)));
    }
    let plan: Option<DpPlan> = match scheduler {
        InferScheduler::OfflineDp { beam } => Some(offline_dp_plan(trace, table, options.deadline, beam)?),
        _ => None,
    };
    let (need, q_cap) = match scheduler {
        InferScheduler::NoCompression => (table.slots(0), usize::MAX),
        InferScheduler::Fixed(l) => {
            if l >= table.len() {
                return Err(Error::param(format!("fixed level {l} not in a {}-level ladder", table.len())));
            }
            (table.slots(l), usize::MAX)
        }
        InferScheduler::OfflineDp { .. } => (table.min_slots(), usize::MAX),
        InferScheduler::Mdp(p) => {
            if p.config.deadline != options.deadline || p.ladder_hash != table.hash() {
                return Err(Error::Config("MDP policy was built for another deadline or ladder".into()));
            }
            (table.min_slots(), p.config.q_max)
        }
    };

    let mut tasks: Vec<Task> = trace
        .iter()
        .map(|a| Task {
            id: a.id,
            arrival_slot: a.slot,
            deadline_slot: a.slot + u64::from(options.deadline),
            sample: a.sample,
            status: TaskStatus::Queued,
            last_result: None,
        })
        .collect();
    let mut stats = CompletionStats {
        tasks_total: tasks.len() as u64,
        level_usage: vec![0; table.len()],
        ..CompletionStats::default()
    };
    let end = tasks.iter().map(|t| t.deadline_slot).max().unwrap_or(0);
    let mut queue: VecDeque<usize> = VecDeque::new();
    let mut next_arrival = 0usize;
    let mut flight: Option<InFlight> = None;

    for slot in 0..end {
        // Expiry.
        queue.retain(|&i| {
            let keep = tasks[i].deadline_slot - slot >= u64::from(need);
            if !keep {
                tasks[i].finish(TaskStatus::Expired);
            }
            keep
        });
        if let Some(f) = &flight {
            if u64::from(f.packets_left) > tasks[f.task].deadline_slot - slot {
                let t = &mut tasks[f.task];
                t.finish(match t.last_result {
                    Some(true) => TaskStatus::DoneCorrect,
                    Some(false) => TaskStatus::DoneWrong,
                    None => TaskStatus::Expired,
                });
                flight = None;
            }
        }

        // Arrivals.
        while next_arrival < tasks.len() && tasks[next_arrival].arrival_slot == slot {
            if queue.len() < q_cap {
                queue.push_back(next_arrival);
            } else {
                tasks[next_arrival].finish(TaskStatus::Expired);
                stats.overflow += 1;
            }
            next_arrival += 1;
        }

        // Scheduling.
        if flight.is_none() {
            if let Some((task, level)) = pick(scheduler, plan.as_ref(), &mut queue, &tasks, table, slot, &mut stats) {
                tasks[task].status = TaskStatus::Transmitting;
                stats.level_usage[level] += 1;
                flight = Some(InFlight {
                    task,
                    level,
                    packets_left: table.slots(level),
                    corrupted: false,
                });
            }
        }

        // One packet.
        let Some(f) = flight.as_mut() else {
            stats.channel.push(None);
            continue;
        };
        stats.channel.push(Some(f.task));
        let lost = rng.next_f64() < options.loss_p;
        if lost && options.retransmit {
            stats.retransmissions += 1;
        } else {
            f.corrupted |= lost;
            f.packets_left -= 1;
        }
        if f.packets_left > 0 {
            continue;
        }
        let f = flight.take().expect("in flight");
        let task = &mut tasks[f.task];
        if f.corrupted {
            task.finish(TaskStatus::DoneWrong);
            continue;
        }
        stats.reward += table.accuracy(f.level);
        let outcome = predictions.outcome(f.level, task.sample);
        task.last_result = Some(outcome.correct);
        let remaining = (task.deadline_slot - (slot + 1)) as u32;
        match augment_decide(options.augment, outcome, f.level, remaining, table) {
            AugmentDecision::Retransmit(level) => {
                stats.augmentations += 1;
                stats.level_usage[level] += 1;
                task.status = TaskStatus::Transmitting;
                flight = Some(InFlight {
                    task: f.task,
                    level,
                    packets_left: table.slots(level),
                    corrupted: false,
                });
            }
            AugmentDecision::Stop => task.finish(if outcome.correct {
                TaskStatus::DoneCorrect
            } else {
                TaskStatus::DoneWrong
            }),
        }
    }
    if let Some(f) = flight {
        tasks[f.task].finish(TaskStatus::Expired);
    }
    for t in tasks.iter_mut().filter(|t| !t.status.is_terminal()) {
        t.finish(TaskStatus::Expired);
    }
    for t in &tasks {
        match t.status {
            TaskStatus::DoneCorrect => stats.completed_correct += 1,
            TaskStatus::DoneWrong => stats.wrong += 1,
            _ => stats.expired += 1,
        }
    }
    Ok(stats)
}

/// Choose the next task and its level; skipped tasks stay queued until they
/// expire.
fn pick(
    scheduler: InferScheduler<'_>,
    plan: Option<&DpPlan>,
    queue: &mut VecDeque<usize>,
    tasks: &[Task],
    table: &LevelTable,
    slot: u64,
    stats: &mut CompletionStats,
) -> Option<(usize, usize)> {
    let remaining = |i: usize| (tasks[i].deadline_slot - slot) as u32;
    match scheduler {
        InferScheduler::NoCompression => queue.pop_front().map(|i| (i, 0)),
        InferScheduler::Fixed(l) => queue.pop_front().map(|i| (i, l)),
        InferScheduler::OfflineDp { .. } => {
            let plan = plan.expect("plan computed for the offline scheduler");
            let (pos, tx) = queue
                .iter()
                .enumerate()
                .filter_map(|(pos, &i)| plan.assignments[i].map(|tx| (pos, tx)))
                .min_by_key(|&(pos, tx)| (tx.start, pos))?;
            let task = queue.remove(pos).expect("position in queue");
            let level = if table.slots(tx.level) <= remaining(task) {
                tx.level
            } else {
                table.best_fit(remaining(task))?
            };
            Some((task, level))
        }
        InferScheduler::Mdp(policy) => {
            let head = *queue.front()?;
            let state = QueueState::new(queue.iter().map(|&i| remaining(i)).collect());
            let decision = online_act(policy, &state);
            stats.fallbacks += u64::from(decision.fallback);
            match decision.action {
                Action::Level(level) => {
                    debug_assert!(table.slots(level) <= remaining(head));
                    queue.pop_front();
                    Some((head, level))
                }
                Action::Idle => None,
            }
        }
    }
}
