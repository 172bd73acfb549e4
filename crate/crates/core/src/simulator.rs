//! Rule-based conversation simulation: ask the maximum-entropy attribute,
//! recommend with probability `10 / max(|V|, 10)`.

use rand::Rng as _;

use crate::dataset::{Catalog, ConversationRecord, InteractionLog};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimulatorConfig {
    /// Questions asked before a recommendation is forced.
    pub max_asks: usize,
    /// Also drop candidates carrying a rejected attribute.
    pub filter_rejected: bool,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            max_asks: 15,
            filter_rejected: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Ask(u32),
    Recommend,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SessionState {
    pub target: u32,
    pub confirmed: Vec<u32>,
    pub rejected: Vec<u32>,
    /// Candidate items, ascending.
    pub candidates: Vec<u32>,
    pub asks: usize,
    pub finished: bool,
}

impl SessionState {
    /// Session for `target` with nothing confirmed yet.
    pub fn new(target: u32, catalog: &Catalog) -> Self {
        Self {
            target,
            confirmed: Vec::new(),
            rejected: Vec::new(),
            candidates: catalog.items().collect(),
            asks: 0,
            finished: false,
        }
    }

    fn asked(&self, a: u32) -> bool {
        self.confirmed.contains(&a) || self.rejected.contains(&a)
    }

    pub fn confirm(&mut self, a: u32, catalog: &Catalog) {
        self.confirmed.push(a);
        let with = catalog.items_with_attribute(a);
        self.candidates.retain(|i| with.binary_search(i).is_ok());
    }

    pub fn reject(&mut self, a: u32, catalog: &Catalog, filter: bool) {
        self.rejected.push(a);
        if filter {
            let with = catalog.items_with_attribute(a);
            self.candidates.retain(|i| with.binary_search(i).is_err());
        }
    }
}

/// Binary entropy (bits) of "item carries `a`" over the candidates.
pub fn attribute_entropy(a: u32, candidates: &[u32], catalog: &Catalog) -> f64 {
    if candidates.is_empty() {
        return 0.0;
    }
    let with = candidates
        .iter()
        .filter(|&&i| catalog.item_has_attribute(i, a))
        .count();
    binary_entropy(with as f64 / candidates.len() as f64)
}

fn binary_entropy(p: f64) -> f64 {
    let h = |x: f64| if x <= 0.0 { 0.0 } else { -x * x.log2() };
    h(p) + h(1.0 - p)
}

/// Unasked attribute of maximum entropy, smallest id on ties; `None` when
/// nothing informative is left.
pub fn choose_question(state: &SessionState, catalog: &Catalog) -> Option<u32> {
    let n = state.candidates.len();
    if n == 0 {
        return None;
    }
    let mut counts = vec![0usize; catalog.attribute_vocab_size()];
    for &i in &state.candidates {
        for &a in catalog.item_attributes(i) {
            counts[a as usize] += 1;
        }
    }
    let mut best: Option<(u32, f64)> = None;
    for a in catalog.attributes() {
        if state.asked(a) {
            continue;
        }
        let h = binary_entropy(counts[a as usize] as f64 / n as f64);
        if h > 0.0 && best.is_none_or(|(_, b)| h > b) {
            best = Some((a, h));
        }
    }
    best.map(|(a, _)| a)
}

pub fn recommend_probability(candidates: usize) -> f64 {
    10.0 / candidates.max(10) as f64
}

/// One system turn. The simulated user answers from the target's attributes.
pub fn step_session(
    state: &mut SessionState,
    catalog: &Catalog,
    cfg: &SimulatorConfig,
    rng: &mut Rng,
) -> Action {
    let p = recommend_probability(state.candidates.len());
    let question = if rng.random::<f64>() < p || state.asks >= cfg.max_asks {
        None
    } else {
        choose_question(state, catalog)
    };
    match question {
        None => {
            state.finished = true;
            Action::Recommend
        }
        Some(a) => {
            state.asks += 1;
            if catalog.item_has_attribute(state.target, a) {
                state.confirm(a, catalog);
            } else {
                state.reject(a, catalog, cfg.filter_rejected);
            }
            Action::Ask(a)
        }
    }
}

/// Candidate-set size and action of one turn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Turn {
    pub candidates: usize,
    pub target_in_candidates: bool,
    pub action: Action,
}

/// Runs one session to its recommendation. The opening attribute is drawn
/// uniformly from the target's set.
pub fn simulate_session(
    target: u32,
    catalog: &Catalog,
    cfg: &SimulatorConfig,
    rng: &mut Rng,
) -> (SessionState, Vec<Turn>) {
    let mut state = SessionState::new(target, catalog);
    let oracle = catalog.item_attributes(target);
    let first = oracle[rng.random_range(0..oracle.len())];
    state.confirm(first, catalog);
    let mut turns = Vec::new();
    while !state.finished {
        let candidates = state.candidates.len();
        let target_in_candidates = state.candidates.binary_search(&target).is_ok();
        let action = step_session(&mut state, catalog, cfg, rng);
        turns.push(Turn {
            candidates,
            target_in_candidates,
            action,
        });
    }
    (state, turns)
}

/// One conversation record per logged interaction. Each session draws from
/// its own stream derived from `(seed, user, position)`.
pub fn simulate_dataset(
    log: &InteractionLog,
    catalog: &Catalog,
    cfg: &SimulatorConfig,
    seed: u64,
) -> Vec<ConversationRecord> {
    let mut out = Vec::with_capacity(log.interaction_count());
    for (u, h) in log.users.iter().enumerate() {
        for (k, &item) in h.items.iter().enumerate() {
            let mut r = rng::derived(seed, &[u as u64, k as u64]);
            let (state, _) = simulate_session(item, catalog, cfg, &mut r);
            out.push(ConversationRecord {
                user: u as u32,
                attributes: state.confirmed,
                target: item,
                history_cutoff: k,
            });
        }
    }
    out
}
