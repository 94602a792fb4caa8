//! System model: sources, query chains, the CMDP state/action spaces, the
//! slot-level transition kernels, and the per-slot cost functions.
//!
//! A status-update system has one transmitter serving a set of sources over
//! a lossy channel (success probability `p`) to a monitor. Each source is
//! either *random-arrival* (updates arrive Bernoulli(`mu`) per slot, outside
//! the scheduler's control) or *generate-at-will* (the transmitter samples it
//! on demand). The monitor's interest in source `i` is a two-state Markov
//! query flag `r_i`; freshness only costs in queried slots.
//!
//! Per source the state is `(r, theta, delta)`:
//!
//! ```text
//! r      query flag, 0/1
//! theta  age of the newest update held at the transmitter
//! delta  age of the newest update held at the monitor
//! ```
//!
//! Both ages are capped at `N` (`clamp_age`). One joint action is taken per
//! slot: stay idle, transmit the buffered packet of a random-arrival source,
//! retransmit the buffered packet of a generate-at-will source, or sample a
//! generate-at-will source and transmit the fresh sample in the same slot.
//! The age-pair kernel, per source and per action role (delivery succeeds
//! with probability `p`, an arrival occurs with probability `mu`):
//!
//! ```text
//! random-arrival, not scheduled:   (0,       delta+1)  w.p. mu
//!                                  (theta+1, delta+1)  w.p. 1-mu
//! random-arrival, transmit:        (0,       theta+1)  w.p. mu*p
//!                                  (0,       delta+1)  w.p. mu*(1-p)
//!                                  (theta+1, theta+1)  w.p. (1-mu)*p
//!                                  (theta+1, delta+1)  w.p. (1-mu)*(1-p)
//! generate-at-will, not scheduled: (theta+1, delta+1)  w.p. 1
//! generate-at-will, retransmit:    (theta+1, theta+1)  w.p. p
//!                                  (theta+1, delta+1)  w.p. 1-p
//! generate-at-will, sample+tx:     (1, 1)              w.p. p
//!                                  (1, delta+1)        w.p. 1-p
//! ```
//!
//! (ages clamped at `N` throughout; a delivered fresh sample leaves age 1 in
//! the next slot, since sampling and transmission occupy the whole slot).
//! Query flags evolve independently: from 1 stay at 1 w.p. `rho`, from 0 stay
//! at 0 w.p. `rho_bar`. The joint kernel is the product over sources.

use thiserror::Error;

/// Hard default on joint state-space enumeration, see [`StateSpace::enumerate`].
pub const DEFAULT_STATE_LIMIT: usize = 2_000_000;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid probability for {name}: {value}")]
    InvalidProbability { name: &'static str, value: f64 },
    #[error("discount factor must lie strictly inside (0,1), got {0}")]
    InvalidDiscount(f64),
    #[error("age cap must be at least 1")]
    InvalidAgeCap,
    #[error("budget {name} must lie in (0,1], got {value}")]
    InvalidBudget { name: &'static str, value: f64 },
    #[error("a system needs at least one source")]
    NoSources,
    #[error("query chain with rho = rho_bar = 1 has no unique steady state")]
    DegenerateQueryChain,
    #[error("action {action:?} does not match source {index} of kind {kind:?}")]
    ActionKindMismatch {
        action: Action,
        index: usize,
        kind: SourceKind,
    },
    #[error("action references source {0}, but the system has {1} sources")]
    SourceOutOfRange(usize, usize),
    #[error("state space has {size} states, above the limit of {limit}")]
    StateSpaceTooLarge { size: usize, limit: usize },
}

/// Two-state Markov chain driving one source's query flag.
///
/// `rho` is the self-transition probability of the queried state (flag 1),
/// `rho_bar` the self-transition probability of the unqueried state (flag 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryChain {
    rho: f64,
    rho_bar: f64,
}

impl QueryChain {
    pub fn new(rho: f64, rho_bar: f64) -> Result<Self, ModelError> {
        check_prob("rho", rho)?;
        check_prob("rho_bar", rho_bar)?;
        Ok(Self { rho, rho_bar })
    }

    /// Chain that queries in every slot (flag pinned at 1).
    pub fn always_on() -> Self {
        Self { rho: 1.0, rho_bar: 0.0 }
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn rho_bar(&self) -> f64 {
        self.rho_bar
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SourceKind {
    /// Updates arrive exogenously, Bernoulli(`mu`) per slot.
    RandomArrival { mu: f64 },
    /// The transmitter samples the source on demand.
    GenerateAtWill,
}

impl SourceKind {
    pub fn is_random_arrival(&self) -> bool {
        matches!(self, SourceKind::RandomArrival { .. })
    }

    pub fn is_generate_at_will(&self) -> bool {
        matches!(self, SourceKind::GenerateAtWill)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceSpec {
    pub kind: SourceKind,
    pub query: QueryChain,
}

impl SourceSpec {
    pub fn random_arrival(mu: f64, query: QueryChain) -> Result<Self, ModelError> {
        if !(mu > 0.0 && mu <= 1.0) || !mu.is_finite() {
            return Err(ModelError::InvalidProbability { name: "mu", value: mu });
        }
        Ok(Self { kind: SourceKind::RandomArrival { mu }, query })
    }

    pub fn generate_at_will(query: QueryChain) -> Result<Self, ModelError> {
        Ok(Self { kind: SourceKind::GenerateAtWill, query })
    }
}

/// A full problem instance.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemSpec {
    sources: Vec<SourceSpec>,
    p: f64,
    age_cap: u16,
    lambda: f64,
    gamma_tr: f64,
    gamma_sm: f64,
}

impl SystemSpec {
    pub fn new(
        sources: Vec<SourceSpec>,
        p: f64,
        age_cap: u16,
        lambda: f64,
        gamma_tr: f64,
        gamma_sm: f64,
    ) -> Result<Self, ModelError> {
        if sources.is_empty() {
            return Err(ModelError::NoSources);
        }
        if !(p > 0.0 && p <= 1.0) || !p.is_finite() {
            return Err(ModelError::InvalidProbability { name: "p", value: p });
        }
        if age_cap < 1 {
            return Err(ModelError::InvalidAgeCap);
        }
        if !(lambda > 0.0 && lambda < 1.0) || !lambda.is_finite() {
            return Err(ModelError::InvalidDiscount(lambda));
        }
        check_budget("gamma_tr", gamma_tr)?;
        check_budget("gamma_sm", gamma_sm)?;
        Ok(Self { sources, p, age_cap, lambda, gamma_tr, gamma_sm })
    }

    pub fn sources(&self) -> &[SourceSpec] {
        &self.sources
    }

    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    /// Channel success probability.
    pub fn p(&self) -> f64 {
        self.p
    }

    /// Age cap `N`.
    pub fn age_cap(&self) -> u16 {
        self.age_cap
    }

    /// Discount factor.
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Normalization factor `1 - lambda`; derived, never stored.
    pub fn lambda_bar(&self) -> f64 {
        1.0 - self.lambda
    }

    /// Discounted-average transmission budget.
    pub fn gamma_tr(&self) -> f64 {
        self.gamma_tr
    }

    /// Discounted-average sampling budget.
    pub fn gamma_sm(&self) -> f64 {
        self.gamma_sm
    }

    /// Largest possible per-slot QAoI cost, `num_sources * N`.
    pub fn max_slot_cost(&self) -> f64 {
        self.sources.len() as f64 * self.age_cap as f64
    }

    /// All joint actions valid for this system, idle first, then per source
    /// in source order. The numbering defines the action ids used by
    /// occupation measures, policies and policy files.
    pub fn actions(&self) -> Vec<Action> {
        let mut out = vec![Action::Idle];
        for (i, src) in self.sources.iter().enumerate() {
            match src.kind {
                SourceKind::RandomArrival { .. } => out.push(Action::Transmit(i)),
                SourceKind::GenerateAtWill => {
                    out.push(Action::Retransmit(i));
                    out.push(Action::SampleAndTransmit(i));
                }
            }
        }
        out
    }

    /// Stable hex digest of the instance, used to bind policy files to the
    /// spec they were solved for.
    pub fn stable_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        let mut feed = |tag: &str, v: f64| {
            h.update(tag.as_bytes());
            h.update(v.to_bits().to_le_bytes());
        };
        feed("p", self.p);
        feed("N", self.age_cap as f64);
        feed("lambda", self.lambda);
        feed("gamma_tr", self.gamma_tr);
        feed("gamma_sm", self.gamma_sm);
        for src in &self.sources {
            match src.kind {
                SourceKind::RandomArrival { mu } => feed("ra", mu),
                SourceKind::GenerateAtWill => feed("gaw", 0.0),
            }
            feed("rho", src.query.rho);
            feed("rho_bar", src.query.rho_bar);
        }
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn check_prob(name: &'static str, v: f64) -> Result<(), ModelError> {
    if !(0.0..=1.0).contains(&v) || !v.is_finite() {
        return Err(ModelError::InvalidProbability { name, value: v });
    }
    Ok(())
}

fn check_budget(name: &'static str, v: f64) -> Result<(), ModelError> {
    if !(v > 0.0 && v <= 1.0) || !v.is_finite() {
        return Err(ModelError::InvalidBudget { name, value: v });
    }
    Ok(())
}

/// One source's slice of the CMDP state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SourceState {
    /// Query flag: the monitor wants this source's data in the current slot.
    pub queried: bool,
    /// Age of the freshest update at the transmitter.
    pub tx_age: u16,
    /// Age of the freshest update at the monitor.
    pub mon_age: u16,
}

impl SourceState {
    pub const fn new(queried: bool, tx_age: u16, mon_age: u16) -> Self {
        Self { queried, tx_age, mon_age }
    }
}

/// Full CMDP state: one [`SourceState`] per source, in spec order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct JointState {
    pub per_source: Vec<SourceState>,
}

impl JointState {
    pub fn new(per_source: Vec<SourceState>) -> Self {
        Self { per_source }
    }
}

/// Joint per-slot decision. At most one packet on the air per slot; sampling
/// a generate-at-will source implies transmitting the fresh sample in the
/// same slot, so both per-slot constraints are built into the action set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Idle,
    /// Send the buffered packet of a random-arrival source.
    Transmit(usize),
    /// Resend the buffered packet of a generate-at-will source.
    Retransmit(usize),
    /// Take a fresh sample of a generate-at-will source and send it.
    SampleAndTransmit(usize),
}

impl Action {
    pub fn target(&self) -> Option<usize> {
        match *self {
            Action::Idle => None,
            Action::Transmit(i) | Action::Retransmit(i) | Action::SampleAndTransmit(i) => Some(i),
        }
    }

    pub fn is_idle(&self) -> bool {
        matches!(self, Action::Idle)
    }

    /// Checks the action against the spec's source list and kinds.
    pub fn validate(&self, spec: &SystemSpec) -> Result<(), ModelError> {
        let Some(i) = self.target() else { return Ok(()) };
        let Some(src) = spec.sources().get(i) else {
            return Err(ModelError::SourceOutOfRange(i, spec.num_sources()));
        };
        let ok = match self {
            Action::Idle => true,
            Action::Transmit(_) => src.kind.is_random_arrival(),
            Action::Retransmit(_) | Action::SampleAndTransmit(_) => src.kind.is_generate_at_will(),
        };
        if ok {
            Ok(())
        } else {
            Err(ModelError::ActionKindMismatch { action: *self, index: i, kind: src.kind })
        }
    }

    /// The role this joint action plays for one particular source.
    pub fn effect_on(&self, source: usize) -> ActionEffect {
        match *self {
            Action::Transmit(i) if i == source => ActionEffect::Transmit,
            Action::Retransmit(i) if i == source => ActionEffect::Retransmit,
            Action::SampleAndTransmit(i) if i == source => ActionEffect::SampleAndTransmit,
            _ => ActionEffect::Untargeted,
        }
    }
}

/// A joint action seen from a single source: either the source is scheduled
/// (in one of the kind-specific ways) or it is left alone this slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionEffect {
    Untargeted,
    Transmit,
    Retransmit,
    SampleAndTransmit,
}

impl ActionEffect {
    pub fn is_transmission(&self) -> bool {
        !matches!(self, ActionEffect::Untargeted)
    }

    pub fn is_sampling(&self) -> bool {
        matches!(self, ActionEffect::SampleAndTransmit)
    }
}

/// `min(v, cap)`: ages saturate at the cap instead of growing without bound.
pub fn clamp_age(v: u16, cap: u16) -> u16 {
    v.min(cap)
}

/// One-step distribution of a query flag. Entries with probability zero are
/// dropped, so the support is 1 or 2 flags.
pub fn query_transition(chain: &QueryChain, queried: bool) -> Vec<(bool, f64)> {
    let (stay, flip) = if queried {
        ((true, chain.rho), (false, 1.0 - chain.rho))
    } else {
        ((false, chain.rho_bar), (true, 1.0 - chain.rho_bar))
    };
    let mut out = Vec::with_capacity(2);
    if stay.1 > 0.0 {
        out.push(stay);
    }
    if flip.1 > 0.0 {
        out.push(flip);
    }
    out
}

/// Stationary probability of the queried state, `(1-rho_bar)/(2-rho-rho_bar)`.
///
/// Errors when both states are absorbing (`rho = rho_bar = 1`), where no
/// unique steady state exists.
pub fn query_steady_state(chain: &QueryChain) -> Result<f64, ModelError> {
    if chain.rho == 1.0 && chain.rho_bar == 1.0 {
        return Err(ModelError::DegenerateQueryChain);
    }
    Ok((1.0 - chain.rho_bar) / (2.0 - chain.rho - chain.rho_bar))
}

fn merge_push(out: &mut Vec<(SourceState, f64)>, s: SourceState, p: f64) {
    if p <= 0.0 {
        return;
    }
    for e in out.iter_mut() {
        if e.0 == s {
            e.1 += p;
            return;
        }
    }
    out.push((s, p));
}

/// One-step distribution of one source's `(r, theta, delta)` under the given
/// action role: the product of the age-pair kernel and the query kernel.
/// Duplicate next states produced by age clamping are merged, so the support
/// has at most 8 entries and the probabilities sum to 1.
pub fn source_transition(
    src: &SourceSpec,
    p: f64,
    cap: u16,
    state: SourceState,
    effect: ActionEffect,
) -> Result<Vec<(SourceState, f64)>, ModelError> {
    let ages = source_age_transition(src, p, cap, state.tx_age, state.mon_age, effect)?;
    let flags = query_transition(&src.query, state.queried);
    let mut out = Vec::with_capacity(ages.len() * flags.len());
    for &(tx, mon, pa) in &ages {
        for &(r, pr) in &flags {
            merge_push(&mut out, SourceState::new(r, tx, mon), pa * pr);
        }
    }
    Ok(out)
}

/// Age-pair part of the per-source kernel (see the module table).
pub fn source_age_transition(
    src: &SourceSpec,
    p: f64,
    cap: u16,
    tx_age: u16,
    mon_age: u16,
    effect: ActionEffect,
) -> Result<Vec<(u16, u16, f64)>, ModelError> {
    let tx1 = clamp_age(tx_age + 1, cap);
    let mon1 = clamp_age(mon_age + 1, cap);
    let mut out: Vec<(u16, u16, f64)> = Vec::with_capacity(4);
    let mut push = |t: u16, d: u16, pr: f64| {
        if pr <= 0.0 {
            return;
        }
        for e in out.iter_mut() {
            if e.0 == t && e.1 == d {
                e.2 += pr;
                return;
            }
        }
        out.push((t, d, pr));
    };
    match (src.kind, effect) {
        (SourceKind::RandomArrival { mu }, ActionEffect::Untargeted) => {
            push(0, mon1, mu);
            push(tx1, mon1, 1.0 - mu);
        }
        (SourceKind::RandomArrival { mu }, ActionEffect::Transmit) => {
            push(0, tx1, mu * p);
            push(0, mon1, mu * (1.0 - p));
            push(tx1, tx1, (1.0 - mu) * p);
            push(tx1, mon1, (1.0 - mu) * (1.0 - p));
        }
        (SourceKind::GenerateAtWill, ActionEffect::Untargeted) => {
            push(tx1, mon1, 1.0);
        }
        (SourceKind::GenerateAtWill, ActionEffect::Retransmit) => {
            push(tx1, tx1, p);
            push(tx1, mon1, 1.0 - p);
        }
        (SourceKind::GenerateAtWill, ActionEffect::SampleAndTransmit) => {
            push(1, 1, p);
            push(1, mon1, 1.0 - p);
        }
        (kind, _) => {
            return Err(ModelError::ActionKindMismatch {
                action: Action::Idle,
                index: usize::MAX,
                kind,
            })
        }
    }
    Ok(out)
}

/// One-step distribution of the joint state: the product over sources of
/// [`source_transition`]. Per-source supports are already merged and joint
/// states from distinct per-source combinations are distinct, so no further
/// merging is needed.
pub fn joint_transition(
    spec: &SystemSpec,
    state: &JointState,
    action: Action,
) -> Result<Vec<(JointState, f64)>, ModelError> {
    action.validate(spec)?;
    let mut acc: Vec<(Vec<SourceState>, f64)> = vec![(Vec::with_capacity(spec.num_sources()), 1.0)];
    for (i, src) in spec.sources().iter().enumerate() {
        let dist = source_transition(src, spec.p(), spec.age_cap(), state.per_source[i], action.effect_on(i))?;
        let mut next = Vec::with_capacity(acc.len() * dist.len());
        for (prefix, pp) in &acc {
            for &(s, ps) in &dist {
                let mut v = prefix.clone();
                v.push(s);
                next.push((v, pp * ps));
            }
        }
        acc = next;
    }
    Ok(acc.into_iter().map(|(v, p)| (JointState::new(v), p)).collect())
}

/// Per-slot QAoI cost: sum over sources of `r * delta`.
pub fn qaoi_cost(state: &JointState) -> u32 {
    state
        .per_source
        .iter()
        .map(|s| if s.queried { s.mon_age as u32 } else { 0 })
        .sum()
}

/// Transmission cost: 1 unless idle.
pub fn tr_cost(action: Action) -> u8 {
    u8::from(!action.is_idle())
}

/// Sampling cost: 1 only for sample-and-transmit.
pub fn sm_cost(action: Action) -> u8 {
    u8::from(matches!(action, Action::SampleAndTransmit(_)))
}

/// Dense indexing of one source's `(r, theta, delta)` states:
/// `r` outermost, then `theta`, then `delta`, each age in `0..=N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SourceStateSpace {
    cap: u16,
}

impl SourceStateSpace {
    pub fn new(cap: u16) -> Self {
        Self { cap }
    }

    pub fn len(&self) -> usize {
        let d = self.cap as usize + 1;
        2 * d * d
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index_of(&self, s: SourceState) -> usize {
        let d = self.cap as usize + 1;
        (usize::from(s.queried) * d + s.tx_age as usize) * d + s.mon_age as usize
    }

    pub fn state(&self, idx: usize) -> SourceState {
        let d = self.cap as usize + 1;
        debug_assert!(idx < self.len());
        SourceState::new(idx / (d * d) == 1, ((idx / d) % d) as u16, (idx % d) as u16)
    }

    pub fn states(&self) -> impl Iterator<Item = SourceState> + '_ {
        (0..self.len()).map(|i| self.state(i))
    }
}

/// Dense lexicographic enumeration of the joint state space: source 0 is the
/// outermost digit, and within a source the order is `r`, `theta`, `delta`.
/// Index/state conversion is arithmetic (mixed radix), nothing is stored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateSpace {
    source_space: SourceStateSpace,
    num_sources: usize,
    len: usize,
}

impl StateSpace {
    /// Enumerates `prod_i 2(N+1)^2` joint states, refusing above `limit`.
    pub fn enumerate(spec: &SystemSpec, limit: usize) -> Result<Self, ModelError> {
        let source_space = SourceStateSpace::new(spec.age_cap());
        let per = source_space.len();
        let mut len: usize = 1;
        for _ in 0..spec.num_sources() {
            len = len
                .checked_mul(per)
                .filter(|&l| l <= limit)
                .ok_or(ModelError::StateSpaceTooLarge { size: usize::MAX, limit })?;
        }
        Ok(Self { source_space, num_sources: spec.num_sources(), len })
    }

    /// Size the enumeration would have, without building it (saturating).
    pub fn size_of(spec: &SystemSpec) -> usize {
        let per = SourceStateSpace::new(spec.age_cap()).len();
        let mut len: usize = 1;
        for _ in 0..spec.num_sources() {
            len = len.saturating_mul(per);
        }
        len
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_sources(&self) -> usize {
        self.num_sources
    }

    pub fn source_space(&self) -> SourceStateSpace {
        self.source_space
    }

    pub fn index_of(&self, state: &JointState) -> usize {
        debug_assert_eq!(state.per_source.len(), self.num_sources);
        let per = self.source_space.len();
        state
            .per_source
            .iter()
            .fold(0usize, |acc, &s| acc * per + self.source_space.index_of(s))
    }

    pub fn state(&self, idx: usize) -> JointState {
        debug_assert!(idx < self.len);
        let per = self.source_space.len();
        let mut rem = idx;
        let mut codes = vec![0usize; self.num_sources];
        for slot in codes.iter_mut().rev() {
            *slot = rem % per;
            rem /= per;
        }
        JointState::new(codes.into_iter().map(|c| self.source_space.state(c)).collect())
    }

    pub fn states(&self) -> impl Iterator<Item = JointState> + '_ {
        (0..self.len).map(|i| self.state(i))
    }
}

/// Distribution of one source's state in the setup slot: both ages zero,
/// query flag at its steady state. Dense over [`SourceStateSpace`].
pub fn source_initial_distribution(src: &SourceSpec, cap: u16) -> Result<Vec<f64>, ModelError> {
    let space = SourceStateSpace::new(cap);
    let on = query_steady_state(&src.query)?;
    let mut eta = vec![0.0; space.len()];
    eta[space.index_of(SourceState::new(true, 0, 0))] = on;
    eta[space.index_of(SourceState::new(false, 0, 0))] = 1.0 - on;
    Ok(eta)
}

/// Distribution of one source's state in the first decision slot, i.e. the
/// setup state pushed one slot forward. From an all-zero age pair every
/// action role yields the same age law, so this is policy-free: a
/// generate-at-will source starts at ages `(1,1)`; a random-arrival source
/// starts at `(0,1)` with probability `mu` (an arrival in the first slot)
/// and `(1,1)` otherwise. The flag stays at its steady state.
pub fn source_first_decision_distribution(src: &SourceSpec, cap: u16) -> Result<Vec<f64>, ModelError> {
    let space = SourceStateSpace::new(cap);
    let on = query_steady_state(&src.query)?;
    let mut eta = vec![0.0; space.len()];
    let mut put = |tx: u16, mon: u16, pr: f64| {
        eta[space.index_of(SourceState::new(true, tx, mon))] += on * pr;
        eta[space.index_of(SourceState::new(false, tx, mon))] += (1.0 - on) * pr;
    };
    match src.kind {
        SourceKind::RandomArrival { mu } => {
            put(0, 1, mu);
            put(1, 1, 1.0 - mu);
        }
        SourceKind::GenerateAtWill => put(1, 1, 1.0),
    }
    Ok(eta)
}

fn joint_product_distribution(
    spec: &SystemSpec,
    space: &StateSpace,
    per_source: impl Fn(&SourceSpec, u16) -> Result<Vec<f64>, ModelError>,
) -> Result<Vec<f64>, ModelError> {
    let per = space.source_space().len();
    let marginals = spec
        .sources()
        .iter()
        .map(|src| per_source(src, spec.age_cap()))
        .collect::<Result<Vec<_>, _>>()?;
    let mut eta = vec![0.0; space.len()];
    // Walk only the product of the marginal supports.
    let supports: Vec<Vec<(usize, f64)>> = marginals
        .iter()
        .map(|m| m.iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(i, &v)| (i, v)).collect())
        .collect();
    let mut stack: Vec<(usize, f64)> = vec![(0, 1.0)];
    for sup in &supports {
        let mut next = Vec::with_capacity(stack.len() * sup.len());
        for &(idx, pr) in &stack {
            for &(code, q) in sup {
                next.push((idx * per + code, pr * q));
            }
        }
        stack = next;
    }
    for (idx, pr) in stack {
        eta[idx] += pr;
    }
    Ok(eta)
}

/// Joint setup-slot distribution: all ages zero, independent steady-state
/// query flags. Dense over the joint [`StateSpace`].
pub fn initial_distribution(spec: &SystemSpec, space: &StateSpace) -> Result<Vec<f64>, ModelError> {
    joint_product_distribution(spec, space, source_initial_distribution)
}

/// Joint distribution of the first decision slot: the product of
/// [`source_first_decision_distribution`] marginals. This is the default
/// initial distribution for the occupation-measure programs, the exact
/// policy evaluator and the simulator, which all score the process from the
/// first decision slot onward.
pub fn first_decision_distribution(
    spec: &SystemSpec,
    space: &StateSpace,
) -> Result<Vec<f64>, ModelError> {
    joint_product_distribution(spec, space, source_first_decision_distribution)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(rho: f64, rho_bar: f64) -> QueryChain {
        QueryChain::new(rho, rho_bar).unwrap()
    }

    fn two_source_spec(mu: f64, p: f64, cap: u16) -> SystemSpec {
        let q = chain(0.7, 0.4);
        SystemSpec::new(
            vec![
                SourceSpec::random_arrival(mu, q).unwrap(),
                SourceSpec::generate_at_will(q).unwrap(),
            ],
            p,
            cap,
            0.95,
            0.5,
            0.3,
        )
        .unwrap()
    }

    #[test]
    fn clamp_age_cases() {
        assert_eq!(clamp_age(5, 20), 5);
        assert_eq!(clamp_age(21, 20), 20);
        assert_eq!(clamp_age(20, 20), 20);
    }

    #[test]
    fn query_transition_branches() {
        let c = chain(0.7, 0.4);
        let d1 = query_transition(&c, true);
        assert_eq!(d1.len(), 2);
        assert_eq!((d1[0].0, d1[1].0), (true, false));
        assert!((d1[0].1 - 0.7).abs() < 1e-12 && (d1[1].1 - 0.3).abs() < 1e-12);
        let d0 = query_transition(&c, false);
        assert_eq!((d0[0].0, d0[1].0), (false, true));
        assert!((d0[0].1 - 0.4).abs() < 1e-12 && (d0[1].1 - 0.6).abs() < 1e-12);
        let abs = query_transition(&chain(1.0, 0.0), true);
        assert_eq!(abs, vec![(true, 1.0)]);
    }

    #[test]
    fn steady_state_values() {
        assert!((query_steady_state(&chain(0.7, 0.4)).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((query_steady_state(&chain(0.7, 0.7)).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(query_steady_state(&chain(1.0, 0.0)).unwrap(), 1.0);
        assert_eq!(query_steady_state(&chain(0.0, 1.0)).unwrap(), 0.0);
        assert!(query_steady_state(&chain(1.0, 1.0)).is_err());
    }

    #[test]
    fn random_arrival_transmit_branches() {
        // mu=0.6, p=0.5, transmit from (theta=2, delta=5), N=20
        let src = SourceSpec::random_arrival(0.6, chain(0.7, 0.4)).unwrap();
        let ages = source_age_transition(&src, 0.5, 20, 2, 5, ActionEffect::Transmit).unwrap();
        let mut got: Vec<(u16, u16, f64)> = ages;
        got.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let want = vec![(0, 3, 0.30), (0, 6, 0.30), (3, 3, 0.20), (3, 6, 0.20)];
        assert_eq!(got.len(), want.len());
        for ((t, d, p), (wt, wd, wp)) in got.into_iter().zip(want) {
            assert_eq!((t, d), (wt, wd));
            assert!((p - wp).abs() < 1e-12);
        }
    }

    #[test]
    fn generate_at_will_sample_branches() {
        let src = SourceSpec::generate_at_will(chain(0.7, 0.4)).unwrap();
        let ages =
            source_age_transition(&src, 0.5, 20, 9, 7, ActionEffect::SampleAndTransmit).unwrap();
        let mut got = ages;
        got.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        assert_eq!(got.len(), 2);
        assert_eq!((got[0].0, got[0].1), (1, 1));
        assert!((got[0].2 - 0.5).abs() < 1e-12);
        assert_eq!((got[1].0, got[1].1), (1, 8));
        assert!((got[1].2 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn idle_at_cap_is_deterministic() {
        let src = SourceSpec::generate_at_will(chain(0.7, 0.4)).unwrap();
        let ages = source_age_transition(&src, 0.5, 20, 20, 20, ActionEffect::Untargeted).unwrap();
        assert_eq!(ages, vec![(20, 20, 1.0)]);
    }

    #[test]
    fn kind_mismatch_rejected() {
        let spec = two_source_spec(0.6, 0.5, 4);
        let s = JointState::new(vec![SourceState::new(true, 0, 0); 2]);
        assert!(joint_transition(&spec, &s, Action::SampleAndTransmit(0)).is_err());
        assert!(joint_transition(&spec, &s, Action::Transmit(1)).is_err());
        assert!(joint_transition(&spec, &s, Action::Transmit(5)).is_err());
        assert!(joint_transition(&spec, &s, Action::Transmit(0)).is_ok());
    }

    #[test]
    fn joint_transition_uniform_16_branches() {
        // N=3, mu=0.5, p=0.5, rho=rho_bar=0.5: transmit source 0 away from
        // clamp collisions gives 16 equally likely next states.
        let q = chain(0.5, 0.5);
        let spec = SystemSpec::new(
            vec![
                SourceSpec::random_arrival(0.5, q).unwrap(),
                SourceSpec::generate_at_will(q).unwrap(),
            ],
            0.5,
            3,
            0.9,
            0.5,
            0.5,
        )
        .unwrap();
        let s = JointState::new(vec![SourceState::new(true, 0, 1), SourceState::new(false, 1, 2)]);
        let dist = joint_transition(&spec, &s, Action::Transmit(0)).unwrap();
        assert_eq!(dist.len(), 16);
        for (_, p) in &dist {
            assert!((p - 1.0 / 16.0).abs() < 1e-12);
        }
    }

    #[test]
    fn costs() {
        let s = JointState::new(vec![SourceState::new(true, 2, 5), SourceState::new(false, 1, 9)]);
        assert_eq!(qaoi_cost(&s), 5);
        let z = JointState::new(vec![SourceState::new(false, 2, 5), SourceState::new(false, 1, 9)]);
        assert_eq!(qaoi_cost(&z), 0);
        let b = JointState::new(vec![SourceState::new(true, 0, 3), SourceState::new(true, 0, 4)]);
        assert_eq!(qaoi_cost(&b), 7);
        assert_eq!((tr_cost(Action::Idle), sm_cost(Action::Idle)), (0, 0));
        assert_eq!((tr_cost(Action::Retransmit(1)), sm_cost(Action::Retransmit(1))), (1, 0));
        assert_eq!(
            (tr_cost(Action::SampleAndTransmit(1)), sm_cost(Action::SampleAndTransmit(1))),
            (1, 1)
        );
    }

    #[test]
    fn enumeration_counts() {
        let spec = two_source_spec(0.6, 0.5, 3);
        let space = StateSpace::enumerate(&spec, DEFAULT_STATE_LIMIT).unwrap();
        assert_eq!(space.len(), 1024);

        let one = SystemSpec::new(
            vec![SourceSpec::generate_at_will(chain(0.7, 0.4)).unwrap()],
            0.5,
            1,
            0.9,
            0.5,
            0.5,
        )
        .unwrap();
        assert_eq!(StateSpace::enumerate(&one, DEFAULT_STATE_LIMIT).unwrap().len(), 8);

        let big = two_source_spec(0.6, 0.5, 20);
        assert_eq!(StateSpace::enumerate(&big, DEFAULT_STATE_LIMIT).unwrap().len(), 777_924);
        assert!(matches!(
            StateSpace::enumerate(&big, 1000),
            Err(ModelError::StateSpaceTooLarge { .. })
        ));
    }

    #[test]
    fn index_roundtrip() {
        let spec = two_source_spec(0.6, 0.5, 2);
        let space = StateSpace::enumerate(&spec, DEFAULT_STATE_LIMIT).unwrap();
        for idx in 0..space.len() {
            assert_eq!(space.index_of(&space.state(idx)), idx);
        }
    }

    #[test]
    fn initial_distribution_masses() {
        let spec = two_source_spec(0.6, 0.5, 2);
        let space = StateSpace::enumerate(&spec, DEFAULT_STATE_LIMIT).unwrap();
        let eta = initial_distribution(&spec, &space).unwrap();
        assert!((eta.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let zero = |q0: bool, q1: bool| {
            let s = JointState::new(vec![SourceState::new(q0, 0, 0), SourceState::new(q1, 0, 0)]);
            eta[space.index_of(&s)]
        };
        assert!((zero(true, true) - 4.0 / 9.0).abs() < 1e-12);
        assert!((zero(true, false) - 2.0 / 9.0).abs() < 1e-12);
        assert!((zero(false, true) - 2.0 / 9.0).abs() < 1e-12);
        assert!((zero(false, false) - 1.0 / 9.0).abs() < 1e-12);

        // always-query chain: all mass on r=(1,1)
        let q = QueryChain::always_on();
        let spec2 = SystemSpec::new(
            vec![
                SourceSpec::random_arrival(0.6, q).unwrap(),
                SourceSpec::generate_at_will(q).unwrap(),
            ],
            0.5,
            2,
            0.5,
            0.5,
            0.3,
        )
        .unwrap();
        let eta2 = initial_distribution(&spec2, &space).unwrap();
        let s11 = JointState::new(vec![SourceState::new(true, 0, 0), SourceState::new(true, 0, 0)]);
        assert!((eta2[space.index_of(&s11)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn first_decision_distribution_is_one_step_pushforward() {
        // Pushing the setup distribution through the kernel under any fixed
        // action must reproduce the closed form.
        let spec = two_source_spec(0.6, 0.5, 3);
        let space = StateSpace::enumerate(&spec, DEFAULT_STATE_LIMIT).unwrap();
        let eta0 = initial_distribution(&spec, &space).unwrap();
        let closed = first_decision_distribution(&spec, &space).unwrap();
        for action in spec.actions() {
            let mut pushed = vec![0.0; space.len()];
            for (idx, &pr) in eta0.iter().enumerate() {
                if pr == 0.0 {
                    continue;
                }
                for (next, q) in joint_transition(&spec, &space.state(idx), action).unwrap() {
                    pushed[space.index_of(&next)] += pr * q;
                }
            }
            for (a, b) in pushed.iter().zip(closed.iter()) {
                assert!((a - b).abs() < 1e-12, "pushforward differs under {action:?}");
            }
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_spec() -> impl Strategy<Value = SystemSpec> {
            (
                0.05f64..=1.0,
                0.05f64..=1.0,
                1u16..=6,
                proptest::collection::vec((any::<bool>(), 0.0f64..=1.0, 0.0f64..=1.0), 1..4),
            )
                .prop_map(|(mu, p, cap, srcs)| {
                    let sources = srcs
                        .into_iter()
                        .map(|(ra, rho, rho_bar)| {
                            let q = QueryChain::new(rho, rho_bar).unwrap();
                            if ra {
                                SourceSpec::random_arrival(mu, q).unwrap()
                            } else {
                                SourceSpec::generate_at_will(q).unwrap()
                            }
                        })
                        .collect();
                    SystemSpec::new(sources, p, cap, 0.9, 0.5, 0.5).unwrap()
                })
        }

        proptest! {
            #[test]
            fn joint_rows_are_distributions(spec in arb_spec(), seed in any::<u64>()) {
                let space = StateSpace::enumerate(&spec, DEFAULT_STATE_LIMIT).unwrap();
                let idx = (seed as usize) % space.len();
                let state = space.state(idx);
                for action in spec.actions() {
                    let dist = joint_transition(&spec, &state, action).unwrap();
                    let total: f64 = dist.iter().map(|(_, p)| *p).sum();
                    prop_assert!((total - 1.0).abs() < 1e-12);
                    for (next, p) in &dist {
                        prop_assert!(*p >= 0.0);
                        for s in &next.per_source {
                            prop_assert!(s.tx_age <= spec.age_cap());
                            prop_assert!(s.mon_age <= spec.age_cap());
                        }
                    }
                }
            }

            #[test]
            fn gaw_tx_age_advances_deterministically(
                theta in 0u16..=6, delta in 0u16..=6, retransmit in any::<bool>()
            ) {
                let src = SourceSpec::generate_at_will(QueryChain::new(0.7, 0.4).unwrap()).unwrap();
                let effect = if retransmit { ActionEffect::Retransmit } else { ActionEffect::Untargeted };
                let ages = source_age_transition(&src, 0.3, 6, theta, delta, effect).unwrap();
                for (t, _, _) in ages {
                    prop_assert_eq!(t, clamp_age(theta + 1, 6));
                }
            }
        }
    }
}
