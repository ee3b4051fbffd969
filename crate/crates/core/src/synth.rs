//! Seeded synthetic trip streams with planted communities and daily rate profiles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{NodeCatalog, TransactionEvent};
use crate::matrix::Matrix;
use crate::training::Splits;

const HOUR: f64 = 3600.0;

/// A time-of-day interval `[start, end)` with a `K×K` multiplier per community pair
/// (row = origin community).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSegment {
    pub start: f64,
    pub end: f64,
    pub multipliers: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n: usize,
    pub k: usize,
    pub day_length: f64,
    pub train_days: u32,
    pub val_days: u32,
    pub test_days: u32,
    /// Events per second for a pair at multiplier 1.
    pub base_rate: f64,
    /// Segments cover parts of `[0, day_length)`; uncovered times have rate 0.
    pub profile: Vec<ProfileSegment>,
    /// Standard deviation of the log of each origin community's daily activity level.
    /// Levels are mean-one lognormal; 0 makes every day identical in expectation.
    pub day_level_spread: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let k = 3;
        Self {
            n: 24,
            k,
            day_length: 86_400.0,
            train_days: 14,
            val_days: 2,
            test_days: 2,
            base_rate: 1.0 / HOUR,
            profile: commuter_profile(k),
            day_level_spread: 0.0,
            seed: 0,
        }
    }
}

/// Even communities are residential, odd ones business. Quiet nights, a residential to
/// business morning peak, the reverse in the evening, and more trips inside a community
/// than across.
pub fn commuter_profile(k: usize) -> Vec<ProfileSegment> {
    let residential = |c: usize| c % 2 == 0;
    let seg = |start: f64, end: f64, f: &dyn Fn(usize, usize) -> f64| ProfileSegment {
        start: start * HOUR,
        end: end * HOUR,
        multipliers: (0..k).map(|o| (0..k).map(|d| f(o, d)).collect()).collect(),
    };
    let within = |same: f64, across: f64| move |o: usize, d: usize| if o == d { same } else { across };
    vec![
        seg(0.0, 6.0, &|_, _| 0.05),
        seg(6.0, 7.0, &within(0.5, 0.25)),
        seg(7.0, 10.0, &|o, d| {
            if residential(o) && !residential(d) {
                4.0
            } else if o == d {
                1.0
            } else {
                0.5
            }
        }),
        seg(10.0, 17.0, &within(1.0, 0.5)),
        seg(17.0, 20.0, &|o, d| {
            if !residential(o) && residential(d) {
                4.0
            } else if o == d {
                1.0
            } else {
                0.5
            }
        }),
        seg(20.0, 24.0, &within(0.5, 0.25)),
    ]
}

impl SynthConfig {
    pub fn days(&self) -> u32 {
        self.train_days + self.val_days + self.test_days
    }

    pub fn horizon(&self) -> f64 {
        self.day_length * f64::from(self.days())
    }

    pub fn splits(&self) -> Splits {
        Splits::by_days(0.0, self.day_length, self.train_days, self.val_days, self.test_days)
    }

    /// Community of node `i`: contiguous, near-equal blocks.
    pub fn community(&self, i: usize) -> usize {
        i * self.k / self.n
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n == 0 || self.k == 0 || self.k > self.n {
            return bad(format!("need 1 <= k <= n, got n={} k={}", self.n, self.k));
        }
        if !(self.day_length > 0.0 && self.day_length.is_finite()) || self.days() == 0 {
            return bad("day_length and the day counts must be positive".into());
        }
        if !(self.base_rate >= 0.0 && self.base_rate.is_finite()) {
            return bad(format!("base_rate must be nonnegative, got {}", self.base_rate));
        }
        if !(self.day_level_spread >= 0.0 && self.day_level_spread.is_finite()) {
            return bad(format!("day_level_spread must be nonnegative, got {}", self.day_level_spread));
        }
        let mut segs: Vec<&ProfileSegment> = self.profile.iter().collect();
        segs.sort_by(|a, b| a.start.total_cmp(&b.start));
        for (i, s) in segs.iter().enumerate() {
            if !(0.0 <= s.start && s.start < s.end && s.end <= self.day_length) {
                return bad(format!("profile segment [{}, {}) is outside the day", s.start, s.end));
            }
            if i > 0 && s.start < segs[i - 1].end {
                return bad(format!("profile segments overlap at {}", s.start));
            }
            if s.multipliers.len() != self.k || s.multipliers.iter().any(|r| r.len() != self.k) {
                return bad(format!("profile multipliers must be {k}x{k}", k = self.k));
            }
            if s.multipliers.iter().flatten().any(|&m| !(m >= 0.0 && m.is_finite())) {
                return bad("profile multipliers must be nonnegative".into());
            }
        }
        Ok(())
    }
}

/// The exact intensity of every pair, including the drawn daily levels.
#[derive(Debug, Clone)]
pub struct RateFunction {
    pub cfg: SynthConfig,
    /// `days × K` activity level of each origin community.
    pub day_levels: Vec<Vec<f64>>,
}

impl RateFunction {
    fn new(cfg: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let s = cfg.day_level_spread;
        let day_levels = (0..cfg.days())
            .map(|_| {
                (0..cfg.k)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        if s > 0.0 {
                            (s * z - 0.5 * s * s).exp()
                        } else {
                            1.0
                        }
                    })
                    .collect()
            })
            .collect();
        Self { cfg: cfg.clone(), day_levels }
    }

    fn multiplier(&self, co: usize, cd: usize, tod: f64) -> f64 {
        self.cfg
            .profile
            .iter()
            .find(|s| s.start <= tod && tod < s.end)
            .map_or(0.0, |s| s.multipliers[co][cd])
    }

    /// Intensity of trips `i -> j` at time `t` (events per second).
    pub fn rate(&self, i: usize, j: usize, t: f64) -> f64 {
        if t < 0.0 || t >= self.cfg.horizon() {
            return 0.0;
        }
        let day = (t / self.cfg.day_length).floor() as usize;
        let tod = t - day as f64 * self.cfg.day_length;
        let (co, cd) = (self.cfg.community(i), self.cfg.community(j));
        self.cfg.base_rate * self.day_levels[day][co] * self.multiplier(co, cd, tod)
    }

    /// Upper bound of [`RateFunction::rate`] for the pair over the whole horizon.
    pub fn max_rate(&self, i: usize, j: usize) -> f64 {
        let (co, cd) = (self.cfg.community(i), self.cfg.community(j));
        let level = self.day_levels.iter().map(|d| d[co]).fold(0.0, f64::max);
        let mult = self.cfg.profile.iter().map(|s| s.multipliers[co][cd]).fold(0.0, f64::max);
        self.cfg.base_rate * level * mult
    }

    /// Expected number of trips `i -> j` in `[start, end)`: the exact integral of the rate.
    pub fn true_window_mean(&self, i: usize, j: usize, start: f64, end: f64) -> f64 {
        let (start, end) = (start.max(0.0), end.min(self.cfg.horizon()));
        if end <= start {
            return 0.0;
        }
        let len = self.cfg.day_length;
        let (co, cd) = (self.cfg.community(i), self.cfg.community(j));
        let first = (start / len).floor() as usize;
        let last = ((end / len).ceil() as usize).min(self.day_levels.len());
        let mut total = 0.0;
        for day in first..last {
            let origin = day as f64 * len;
            let mut day_total = 0.0;
            for s in &self.cfg.profile {
                let lo = (origin + s.start).max(start);
                let hi = (origin + s.end).min(end);
                if hi > lo {
                    day_total += (hi - lo) * s.multipliers[co][cd];
                }
            }
            total += day_total * self.day_levels[day][co];
        }
        total * self.cfg.base_rate
    }

    /// Expected OD matrix of `[start, end)`.
    pub fn window_matrix(&self, start: f64, end: f64) -> Matrix {
        let n = self.cfg.n;
        Matrix::from_fn(n, n, |i, j| self.true_window_mean(i, j, start, end))
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub events: Vec<TransactionEvent>,
    pub catalog: NodeCatalog,
    pub rates: RateFunction,
}

/// Draws every ordered pair's inhomogeneous Poisson process by thinning, each pair from
/// its own stream of the seeded generator, and merges them by timestamp.
pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let rates = RateFunction::new(cfg);
    let horizon = cfg.horizon();
    let mut events = Vec::new();
    for i in 0..cfg.n {
        for j in 0..cfg.n {
            let bound = rates.max_rate(i, j);
            if bound <= 0.0 {
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(1 + (i * cfg.n + j) as u64);
            let gap = Exp::new(bound).map_err(|e| Error::InvalidConfig(format!("rate bound {bound}: {e}")))?;
            let mut t = 0.0;
            loop {
                t += gap.sample(&mut rng);
                if t >= horizon {
                    break;
                }
                let u: f64 = rng.random();
                if u * bound < rates.rate(i, j, t) {
                    events.push(TransactionEvent::new(i, j, t));
                }
            }
        }
    }
    events.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    let names = (0..cfg.n).map(|i| format!("s{i:02}")).collect();
    Ok(SynthData { events, catalog: NodeCatalog::named(names), rates })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_pair(rate_per_s: f64, seconds: f64, seed: u64) -> SynthConfig {
        SynthConfig {
            n: 1,
            k: 1,
            day_length: seconds,
            train_days: 1,
            val_days: 0,
            test_days: 0,
            base_rate: rate_per_s,
            profile: vec![ProfileSegment { start: 0.0, end: seconds, multipliers: vec![vec![1.0]] }],
            day_level_spread: 0.0,
            seed,
        }
    }

    #[test]
    fn zero_rate_is_empty() {
        let cfg = SynthConfig { base_rate: 0.0, ..SynthConfig::default() };
        assert!(generate(&cfg).unwrap().events.is_empty());
    }

    #[test]
    fn deterministic_sorted_and_inside_horizon() {
        let cfg = SynthConfig { n: 6, k: 2, profile: commuter_profile(2), train_days: 2, val_days: 0, test_days: 0, seed: 3, ..SynthConfig::default() };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.events, b.events);
        assert!(!a.events.is_empty());
        assert!(a.events.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        assert!(a.events.iter().all(|e| e.timestamp > 0.0 && e.timestamp < cfg.horizon()));
        let c = generate(&SynthConfig { seed: 4, ..cfg }).unwrap();
        assert_ne!(a.events, c.events);
    }

    #[test]
    fn constant_rate_monte_carlo() {
        let total: usize = (0..1000).map(|s| generate(&single_pair(2.0 / 60.0, 600.0, s)).unwrap().events.len()).sum();
        let mean = total as f64 / 1000.0;
        assert!((mean - 20.0).abs() <= 1.0, "mean count {mean}");
    }

    #[test]
    fn constant_and_zero_window_means() {
        let r = generate(&single_pair(0.01, 1000.0, 0)).unwrap().rates;
        assert!((r.true_window_mean(0, 0, 100.0, 400.0) - 3.0).abs() < 1e-12);
        let z = generate(&SynthConfig { base_rate: 0.0, ..single_pair(0.01, 1000.0, 0) }).unwrap().rates;
        assert_eq!(z.true_window_mean(0, 0, 0.0, 1000.0), 0.0);
    }

    #[test]
    fn two_piece_integral_matches_quadrature() {
        let mut cfg = single_pair(0.002, 3600.0, 0);
        cfg.profile = vec![
            ProfileSegment { start: 0.0, end: 1800.0, multipliers: vec![vec![1.5]] },
            ProfileSegment { start: 1800.0, end: 3600.0, multipliers: vec![vec![0.25]] },
        ];
        let r = generate(&cfg).unwrap().rates;
        let (a, b) = (600.0, 3000.0);
        let h = 0.5;
        let steps = ((b - a) / h) as usize;
        let numeric: f64 = (0..steps).map(|k| r.rate(0, 0, a + (k as f64 + 0.5) * h) * h).sum();
        assert!((r.true_window_mean(0, 0, a, b) - numeric).abs() < 1e-9);
    }

    #[test]
    fn window_counts_converge_to_means() {
        let cfg = SynthConfig { n: 4, k: 2, profile: commuter_profile(2), train_days: 1, val_days: 0, test_days: 0, day_level_spread: 0.3, ..SynthConfig::default() };
        let (start, end) = (8.0 * HOUR, 9.0 * HOUR);
        let seeds = 300;
        let mut sums = vec![0.0; 16];
        let mut means = vec![0.0; 16];
        for s in 0..seeds {
            let data = generate(&SynthConfig { seed: s, ..cfg.clone() }).unwrap();
            for e in data.events.iter().filter(|e| e.timestamp >= start && e.timestamp < end) {
                sums[e.origin * 4 + e.destination] += 1.0;
            }
            for p in 0..16 {
                means[p] += data.rates.true_window_mean(p / 4, p % 4, start, end);
            }
        }
        for p in 0..16 {
            // Given the drawn levels the total is Poisson with the summed mean.
            assert!((sums[p] - means[p]).abs() <= 3.0 * means[p].sqrt(), "pair {p}: {} vs {}", sums[p], means[p]);
        }
    }

    #[test]
    fn communities_are_contiguous() {
        let cfg = SynthConfig::default();
        let c: Vec<usize> = (0..cfg.n).map(|i| cfg.community(i)).collect();
        assert!(c.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!((c[0], c[23]), (0, 2));
        assert_eq!(c.iter().filter(|&&x| x == 1).count(), 8);
    }

    #[test]
    fn invalid_profiles_are_rejected() {
        let mut cfg = SynthConfig::default();
        cfg.profile[0].multipliers[0].pop();
        assert!(cfg.validate().is_err());
        let mut cfg = SynthConfig::default();
        cfg.profile[1].start = 0.0;
        assert!(cfg.validate().is_err());
    }
}
