use serde::{Deserialize, Serialize};

use super::TrainError;

/// When masks are binarized during search.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binarization {
    /// Each mask is binarized and frozen the epoch its budget is met.
    Early,
    /// Masks are binarized together once both counts are within budget.
    Late,
}

/// Condition under which a penalty coefficient is multiplied by κ.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IncrementRule {
    /// `lowest − current < improve_min`.
    InsufficientDecrease,
    /// The active count did not go down since the previous epoch.
    CountIncrease,
}

/// The five penalty-scheduling strategies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Strategy {
    S1,
    S2,
    S3,
    S4,
    #[default]
    S5,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [Self::S1, Self::S2, Self::S3, Self::S4, Self::S5];

    pub fn finetune_epochs(self) -> usize {
        match self {
            Self::S5 => 50,
            _ => 10,
        }
    }

    pub fn binarization(self) -> Binarization {
        match self {
            Self::S1 | Self::S2 | Self::S3 => Binarization::Late,
            Self::S4 | Self::S5 => Binarization::Early,
        }
    }

    pub fn increment_rule(self) -> IncrementRule {
        match self {
            Self::S1 | Self::S5 => IncrementRule::InsufficientDecrease,
            Self::S2 | Self::S3 | Self::S4 => IncrementRule::CountIncrease,
        }
    }

    /// λ_s / λ_g at the start of search.
    pub fn penalty_ratio(self) -> f64 {
        match self {
            Self::S3 => 20.0,
            _ => 1.0,
        }
    }
}

impl TryFrom<u8> for Strategy {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            1..=5 => Ok(Self::ALL[v as usize - 1]),
            _ => Err(format!("strategy must be 1..5, got {v}")),
        }
    }
}

impl From<Strategy> for u8 {
    fn from(s: Strategy) -> u8 {
        Strategy::ALL.iter().position(|&x| x == s).unwrap() as u8 + 1
    }
}

/// Hyperparameters of the switch search and the finetuning that follows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub lambda_g: f64,
    pub lambda_s: f64,
    /// Multiplicative penalty growth, > 1.
    pub kappa: f64,
    pub gelu_budget: usize,
    pub softmax_budget: usize,
    pub epsilon: f64,
    pub gelu_improve_min: usize,
    pub softmax_improve_min: usize,
    pub strategy: Strategy,
    pub kd_enabled: bool,
    pub kd_temperature: f64,
    pub warmup_epochs: usize,
    pub max_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    /// Adam learning rate for weights during search.
    pub lr: f64,
    /// Adam learning rate for switches during search.
    pub switch_lr: f64,
    pub finetune_lr: f64,
    pub weight_decay: f64,
    /// Clamp switch values to [0, 1] after every search step.
    pub project_switches: bool,
}

impl Default for SearchConfig {
    /// Desk-scale settings for the default 2-layer model at 25% budgets.
    fn default() -> Self {
        Self {
            lambda_g: 1e-3,
            lambda_s: 1e-3,
            kappa: 1.1,
            gelu_budget: 8,
            softmax_budget: 17,
            epsilon: 0.001,
            gelu_improve_min: 2,
            softmax_improve_min: 2,
            strategy: Strategy::S5,
            kd_enabled: true,
            kd_temperature: 4.0,
            warmup_epochs: 5,
            max_epochs: 300,
            finetune_epochs: 50,
            batch_size: 32,
            lr: 1e-3,
            switch_lr: 3e-3,
            finetune_lr: 1e-3,
            weight_decay: 1e-4,
            project_switches: true,
        }
    }
}

impl SearchConfig {
    /// Published hyperparameters. Budgets are left at zero for the caller.
    pub fn full_scale() -> Self {
        Self {
            lambda_g: 3e-5,
            lambda_s: 3e-5,
            kappa: 1.1,
            gelu_budget: 0,
            softmax_budget: 0,
            epsilon: 0.001,
            gelu_improve_min: 2,
            softmax_improve_min: 200,
            strategy: Strategy::S5,
            kd_enabled: true,
            kd_temperature: 4.0,
            warmup_epochs: 5,
            max_epochs: 300,
            finetune_epochs: 50,
            batch_size: 64,
            lr: 1e-4,
            switch_lr: 1e-4,
            finetune_lr: 1e-4,
            weight_decay: 1e-4,
            project_switches: false,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if !(self.kappa > 1.0) {
            return bad(format!("kappa must exceed 1, got {}", self.kappa));
        }
        if !(self.kd_temperature > 0.0) {
            return bad(format!(
                "kd_temperature must be positive, got {}",
                self.kd_temperature
            ));
        }
        if !(self.epsilon >= 0.0) {
            return bad(format!(
                "epsilon must be non-negative, got {}",
                self.epsilon
            ));
        }
        for (name, v) in [
            ("lambda_g", self.lambda_g),
            ("lambda_s", self.lambda_s),
            ("lr", self.lr),
            ("switch_lr", self.switch_lr),
            ("finetune_lr", self.finetune_lr),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }
}

/// Sets the strategy together with its finetune length and starting
/// penalty ratio (λ_s = ratio·λ_g).
pub fn apply_strategy(cfg: &SearchConfig, strategy: Strategy) -> SearchConfig {
    SearchConfig {
        strategy,
        finetune_epochs: strategy.finetune_epochs(),
        lambda_s: cfg.lambda_g * strategy.penalty_ratio(),
        ..cfg.clone()
    }
}

/// Mutable state of the search loop.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchState {
    pub lambda_g: f64,
    pub lambda_s: f64,
    pub lowest_gelu_count: usize,
    pub lowest_softmax_count: usize,
    pub prev_gelu_count: usize,
    pub prev_softmax_count: usize,
    pub c_budget_met: bool,
    pub s_budget_met: bool,
    pub epoch: usize,
}

impl SearchState {
    pub fn new(cfg: &SearchConfig, gelu_count: usize, softmax_count: usize) -> Self {
        Self {
            lambda_g: cfg.lambda_g,
            lambda_s: cfg.lambda_s,
            lowest_gelu_count: gelu_count,
            lowest_softmax_count: softmax_count,
            prev_gelu_count: gelu_count,
            prev_softmax_count: softmax_count,
            c_budget_met: false,
            s_budget_met: false,
            epoch: 0,
        }
    }

    /// Tracks counts without touching the penalties.
    pub fn record_counts(&mut self, gelu_count: usize, softmax_count: usize) {
        self.lowest_gelu_count = self.lowest_gelu_count.min(gelu_count);
        self.lowest_softmax_count = self.lowest_softmax_count.min(softmax_count);
        self.prev_gelu_count = gelu_count;
        self.prev_softmax_count = softmax_count;
    }
}

/// One end-of-epoch penalty update. A coefficient whose mask has met its
/// budget never grows again.
pub fn schedule_penalties(
    state: &SearchState,
    gelu_count: usize,
    softmax_count: usize,
    cfg: &SearchConfig,
) -> SearchState {
    let rule = cfg.strategy.increment_rule();
    let stalled = |lowest: usize, prev: usize, current: usize, min: usize| match rule {
        IncrementRule::InsufficientDecrease => (lowest as i64 - current as i64) < min as i64,
        IncrementRule::CountIncrease => current >= prev,
    };
    let mut next = state.clone();
    if !state.c_budget_met
        && stalled(
            state.lowest_gelu_count,
            state.prev_gelu_count,
            gelu_count,
            cfg.gelu_improve_min,
        )
    {
        next.lambda_g *= cfg.kappa;
    }
    if !state.s_budget_met
        && stalled(
            state.lowest_softmax_count,
            state.prev_softmax_count,
            softmax_count,
            cfg.softmax_improve_min,
        )
    {
        next.lambda_s *= cfg.kappa;
    }
    next.record_counts(gelu_count, softmax_count);
    next
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(lowest_g: usize, lowest_s: usize) -> SearchState {
        let cfg = SearchConfig::full_scale();
        let mut s = SearchState::new(&cfg, lowest_g, lowest_s);
        s.lambda_g = 1.0;
        s.lambda_s = 1.0;
        s
    }

    #[test]
    fn small_improvement_grows_lambda_g() {
        let next = schedule_penalties(&state(100, 1000), 99, 0, &SearchConfig::full_scale());
        assert_eq!(next.lambda_g, 1.1);
        assert_eq!(next.lowest_gelu_count, 99);
    }

    #[test]
    fn large_improvement_keeps_lambda_g() {
        let next = schedule_penalties(&state(100, 1000), 90, 0, &SearchConfig::full_scale());
        assert_eq!(next.lambda_g, 1.0);
        assert_eq!(next.lowest_gelu_count, 90);
    }

    #[test]
    fn softmax_threshold_is_two_hundred() {
        let cfg = SearchConfig::full_scale();
        assert_eq!(
            schedule_penalties(&state(0, 1000), 0, 801, &cfg).lambda_s,
            1.1
        );
        assert_eq!(
            schedule_penalties(&state(0, 1000), 0, 800, &cfg).lambda_s,
            1.0
        );
    }

    #[test]
    fn met_budgets_freeze_lambdas() {
        let cfg = SearchConfig::full_scale();
        let mut s = state(100, 1000);
        s.s_budget_met = true;
        s.c_budget_met = true;
        for count in [1000, 2000, 999] {
            s = schedule_penalties(&s, count, count, &cfg);
            assert_eq!((s.lambda_g, s.lambda_s), (1.0, 1.0));
        }
    }

    #[test]
    fn lowest_counts_never_rise() {
        let s = schedule_penalties(&state(50, 50), 70, 70, &SearchConfig::full_scale());
        assert_eq!((s.lowest_gelu_count, s.lowest_softmax_count), (50, 50));
        assert_eq!((s.prev_gelu_count, s.prev_softmax_count), (70, 70));
    }

    #[test]
    fn count_increase_rule_compares_with_previous_epoch() {
        let cfg = apply_strategy(&SearchConfig::full_scale(), Strategy::S2);
        let mut s = state(100, 100);
        s.prev_gelu_count = 60;
        s.prev_softmax_count = 60;
        let next = schedule_penalties(&s, 59, 61, &cfg);
        assert_eq!((next.lambda_g, next.lambda_s), (1.0, 1.1));
    }

    #[test]
    fn strategy_table() {
        let base = SearchConfig::full_scale();
        let s5 = apply_strategy(&base, Strategy::S5);
        assert_eq!(s5.finetune_epochs, 50);
        assert_eq!(Strategy::S5.binarization(), Binarization::Early);
        assert_eq!(
            Strategy::S5.increment_rule(),
            IncrementRule::InsufficientDecrease
        );
        assert_eq!(s5.lambda_s, s5.lambda_g);

        let s3 = apply_strategy(&base, Strategy::S3);
        assert_eq!(s3.lambda_s, 20.0 * base.lambda_g);

        let s1 = apply_strategy(&base, Strategy::S1);
        assert_eq!(s1.finetune_epochs, 10);
        assert_eq!(Strategy::S1.binarization(), Binarization::Late);
        assert_eq!(Strategy::S4.binarization(), Binarization::Early);
        assert_eq!(Strategy::S2.increment_rule(), IncrementRule::CountIncrease);
    }

    #[test]
    fn strategy_numbers_round_trip() {
        for (i, s) in Strategy::ALL.iter().enumerate() {
            assert_eq!(u8::from(*s), i as u8 + 1);
            assert_eq!(Strategy::try_from(i as u8 + 1).unwrap(), *s);
        }
        assert!(Strategy::try_from(0).is_err());
        assert!(Strategy::try_from(6).is_err());
    }

    #[test]
    fn validation() {
        assert!(SearchConfig::default().validate().is_ok());
        assert!(SearchConfig::full_scale().validate().is_ok());
        let bad = SearchConfig {
            kappa: 1.0,
            ..SearchConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SearchConfig {
            kd_temperature: 0.0,
            ..SearchConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
