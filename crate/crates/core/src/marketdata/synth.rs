use chrono::{Datelike, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Bar, MarketDataError, MarketTable, Result};
use crate::metrics::TRADING_DAYS_PER_YEAR;

const INITIAL_PRICE: f64 = 100.0;
const BASE_VOLUME: f64 = 1.0e6;
const BASE_SHARES: f64 = 1.0e8;
/// Intraday noise draws are clamped to this many standard deviations.
const NOISE_CLAMP: f64 = 3.0;

/// From `start_day` onward, drift and volatility are multiplied by the given
/// factors (the latest applicable regime wins).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub start_day: usize,
    pub drift_multiplier: f64,
    pub vol_multiplier: f64,
}

/// Parameters of the correlated geometric-Brownian market generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_assets: usize,
    pub n_days: usize,
    /// Annualized drift per asset.
    pub drift: Vec<f64>,
    /// Annualized volatility per asset.
    pub vol: Vec<f64>,
    /// Row-major `n_assets x n_assets` correlation matrix.
    pub correlation: Vec<Vec<f64>>,
    #[serde(default)]
    pub regimes: Vec<Regime>,
    pub seed: u64,
    /// First trading day; weekdays only. Defaults to 2010-01-04.
    #[serde(default = "default_start")]
    pub start_date: NaiveDate,
}

fn default_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2010, 1, 4).expect("valid date")
}

impl SynthConfig {
    /// Uniform-correlation config with identical drift and vol for every asset.
    pub fn equicorrelated(
        n_assets: usize,
        n_days: usize,
        drift: f64,
        vol: f64,
        rho: f64,
        seed: u64,
    ) -> Self {
        let correlation = (0..n_assets)
            .map(|i| {
                (0..n_assets)
                    .map(|j| if i == j { 1.0 } else { rho })
                    .collect()
            })
            .collect();
        Self {
            n_assets,
            n_days,
            drift: vec![drift; n_assets],
            vol: vec![vol; n_assets],
            correlation,
            regimes: Vec::new(),
            seed,
            start_date: default_start(),
        }
    }

    pub fn from_toml(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| {
            Err(MarketDataError::InvalidConfig {
                field: field.to_string(),
                reason,
            })
        };
        let n = self.n_assets;
        if n == 0 {
            return bad("n_assets", "must be at least 1".into());
        }
        if self.n_days < 2 {
            return bad("n_days", "must be at least 2".into());
        }
        if self.drift.len() != n {
            return bad("drift", format!("expected {n} entries, got {}", self.drift.len()));
        }
        if self.drift.iter().any(|d| !d.is_finite()) {
            return bad("drift", "entries must be finite".into());
        }
        if self.vol.len() != n {
            return bad("vol", format!("expected {n} entries, got {}", self.vol.len()));
        }
        if self.vol.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return bad("vol", "entries must be finite and non-negative".into());
        }
        if self.correlation.len() != n || self.correlation.iter().any(|r| r.len() != n) {
            return bad("correlation", format!("expected a {n}x{n} matrix"));
        }
        for i in 0..n {
            if self.correlation[i][i] != 1.0 {
                return bad("correlation", format!("diagonal entry {i} is not 1"));
            }
            for j in 0..i {
                let (a, b) = (self.correlation[i][j], self.correlation[j][i]);
                if a != b || !(-1.0..=1.0).contains(&a) {
                    return bad(
                        "correlation",
                        format!("entries ({i},{j}) must be symmetric and within [-1, 1]"),
                    );
                }
            }
        }
        for (k, r) in self.regimes.iter().enumerate() {
            if !(r.vol_multiplier >= 0.0) || !r.drift_multiplier.is_finite() {
                return bad("regimes", format!("regime {k} has invalid multipliers"));
            }
        }
        Ok(())
    }
}

/// Lower-triangular factor of a positive semi-definite matrix. Zero pivots
/// (rank deficiency) are allowed; negative ones are not.
fn cholesky_psd(m: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = m.len();
    let mut l = vec![vec![0.0; n]; n];
    for j in 0..n {
        let diag = m[j][j] - (0..j).map(|k| l[j][k] * l[j][k]).sum::<f64>();
        if diag < -1e-10 {
            return Err(MarketDataError::NonPsdCorrelation);
        }
        let pivot = diag.max(0.0).sqrt();
        l[j][j] = pivot;
        for i in (j + 1)..n {
            let s = m[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            if pivot > 1e-12 {
                l[i][j] = s / pivot;
            } else if s.abs() > 1e-8 {
                return Err(MarketDataError::NonPsdCorrelation);
            }
        }
    }
    Ok(l)
}

fn weekday_calendar(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d.succ_opt().expect("calendar overflow");
    }
    out
}

/// Generates a correlated geometric-Brownian market. Identical configs give
/// bit-identical tables.
pub fn generate_synthetic_market(cfg: &SynthConfig) -> Result<MarketTable> {
    cfg.validate()?;
    let chol = cholesky_psd(&cfg.correlation)?;
    let n = cfg.n_assets;
    let dt = 1.0 / TRADING_DAYS_PER_YEAR;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut normal = || -> f64 { rng.sample(StandardNormal) };

    let shares: Vec<f64> = (0..n)
        .map(|_| BASE_SHARES * (0.5 * normal()).exp())
        .collect();
    let calendar = weekday_calendar(cfg.start_date, cfg.n_days);
    let assets: Vec<String> = (0..n).map(|i| format!("S{i:02}")).collect();
    let mut bars = Vec::with_capacity(cfg.n_days * n);
    let mut caps = Vec::with_capacity(cfg.n_days * n);
    let mut log_price = vec![INITIAL_PRICE.ln(); n];
    let mut prev_close = vec![INITIAL_PRICE; n];
    let mut eps = vec![0.0; n];

    for (t, date) in calendar.iter().enumerate() {
        let (drift_mult, vol_mult) = cfg
            .regimes
            .iter()
            .filter(|r| r.start_day <= t)
            .max_by_key(|r| r.start_day)
            .map(|r| (r.drift_multiplier, r.vol_multiplier))
            .unwrap_or((1.0, 1.0));
        if t > 0 {
            eps.iter_mut().for_each(|e| *e = normal());
            for i in 0..n {
                let z: f64 = (0..=i).map(|k| chol[i][k] * eps[k]).sum();
                let mu = cfg.drift[i] * drift_mult;
                let sigma = cfg.vol[i] * vol_mult;
                log_price[i] += (mu - 0.5 * sigma * sigma) * dt + sigma * dt.sqrt() * z;
            }
        }
        for i in 0..n {
            let close = log_price[i].exp();
            let daily_sigma = cfg.vol[i] * vol_mult * dt.sqrt();
            let mut clamped = || normal().clamp(-NOISE_CLAMP, NOISE_CLAMP);
            let open = if t == 0 {
                close
            } else {
                prev_close[i] * (0.25 * daily_sigma * clamped()).exp()
            };
            let high = open.max(close) * (0.5 * daily_sigma * clamped().abs()).exp();
            let low = open.min(close) * (-0.5 * daily_sigma * clamped().abs()).exp();
            let volume = BASE_VOLUME * (0.25 * clamped()).exp();
            bars.push(Some(Bar {
                date: *date,
                open,
                high,
                low,
                close,
                volume,
            }));
            caps.push(Some(shares[i] * close));
            prev_close[i] = close;
        }
    }
    MarketTable::new(calendar, assets, bars, Some(caps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::sample_std;
    use proptest::prelude::*;

    #[test]
    fn deterministic() {
        let cfg = SynthConfig::equicorrelated(3, 200, 0.05, 0.2, 0.3, 7);
        assert_eq!(
            generate_synthetic_market(&cfg).unwrap(),
            generate_synthetic_market(&cfg).unwrap()
        );
        let mut other = cfg.clone();
        other.seed = 8;
        assert_ne!(
            generate_synthetic_market(&cfg).unwrap(),
            generate_synthetic_market(&other).unwrap()
        );
    }

    #[test]
    fn zero_vol_is_pure_drift() {
        let mu = 0.08;
        let cfg = SynthConfig::equicorrelated(2, 300, mu, 0.0, 0.0, 1);
        let t = generate_synthetic_market(&cfg).unwrap();
        let c0 = t.close(0, 0).unwrap();
        for day in 0..t.n_days() {
            let expected = c0 * (mu * day as f64 / 252.0).exp();
            let got = t.close(day, 1).unwrap();
            assert!((got - expected).abs() <= 1e-12 * expected, "day {day}");
        }
    }

    #[test]
    fn sample_correlation_matches_target() {
        let cfg = SynthConfig::equicorrelated(2, 50_000, 0.05, 0.25, 0.9, 11);
        let t = generate_synthetic_market(&cfg).unwrap();
        let lr = |a: usize| -> Vec<f64> {
            (1..t.n_days())
                .map(|d| (t.close(d, a).unwrap() / t.close(d - 1, a).unwrap()).ln())
                .collect()
        };
        let (x, y) = (lr(0), lr(1));
        let mx = x.iter().sum::<f64>() / x.len() as f64;
        let my = y.iter().sum::<f64>() / y.len() as f64;
        let cov: f64 =
            x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (x.len() - 1) as f64;
        let rho = cov / (sample_std(&x) * sample_std(&y));
        assert!((rho - 0.9).abs() < 0.02, "rho = {rho}");
    }

    #[test]
    fn non_psd_correlation_rejected() {
        let mut cfg = SynthConfig::equicorrelated(3, 10, 0.0, 0.1, 0.0, 1);
        cfg.correlation = vec![
            vec![1.0, 0.9, -0.9],
            vec![0.9, 1.0, 0.9],
            vec![-0.9, 0.9, 1.0],
        ];
        assert!(matches!(
            generate_synthetic_market(&cfg),
            Err(MarketDataError::NonPsdCorrelation)
        ));
    }

    #[test]
    fn perfectly_correlated_is_accepted() {
        let cfg = SynthConfig::equicorrelated(3, 10, 0.0, 0.1, 1.0, 1);
        assert!(generate_synthetic_market(&cfg).is_ok());
    }

    #[test]
    fn config_errors_name_the_field() {
        let mut cfg = SynthConfig::equicorrelated(2, 10, 0.0, 0.1, 0.0, 1);
        cfg.vol = vec![0.1, -0.2];
        match cfg.validate() {
            Err(MarketDataError::InvalidConfig { field, .. }) => assert_eq!(field, "vol"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = SynthConfig::equicorrelated(2, 10, 0.05, 0.1, 0.2, 3);
        cfg.regimes.push(Regime {
            start_day: 5,
            drift_multiplier: -1.0,
            vol_multiplier: 2.0,
        });
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(SynthConfig::from_toml(&text).unwrap(), cfg);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn bars_always_valid(
            n in 1usize..4,
            rho in -0.3f64..0.95,
            vol in 0.0f64..1.5,
            drift in -0.5f64..0.5,
            seed in any::<u64>(),
        ) {
            let rho = if n > 2 { rho.max(0.0) } else { rho };
            let mut cfg = SynthConfig::equicorrelated(n, 120, drift, vol, rho, seed);
            cfg.regimes.push(Regime { start_day: 60, drift_multiplier: -2.0, vol_multiplier: 3.0 });
            // MarketTable::new validates every bar.
            let t = generate_synthetic_market(&cfg).unwrap();
            prop_assert_eq!(t.n_days(), 120);
        }
    }
}
