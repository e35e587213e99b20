use chrono::NaiveDate;

use dyncov::backtest::{compound, run_backtest, BacktestConfig, INITIAL_BALANCE};
use dyncov::data::{load_french_csv, Dataset, FrenchLayout};
use dyncov::pipeline::Strategy;

mod common;

fn dataset() -> Dataset {
    let dir = common::fixture_dir();
    Dataset::load(dir.join(common::INDUSTRY_FILE), dir.join(common::FACTORS_FILE)).unwrap()
}

#[test]
fn fixture_files_parse() {
    let dir = common::fixture_dir();
    let ind = load_french_csv(dir.join(common::INDUSTRY_FILE), FrenchLayout::Industry49).unwrap();
    assert_eq!(ind.columns.len(), 49);
    assert_eq!(ind.columns[0], "Agric");
    assert_eq!(ind.columns[48], "Other");
    assert_eq!(ind.dropped, 1);
    let fac = load_french_csv(dir.join(common::FACTORS_FILE), FrenchLayout::Factors3).unwrap();
    assert_eq!(fac.columns, ["Mkt-RF", "SMB", "HML", "RF"]);
    assert_eq!(fac.len(), ind.len() + 1);
    assert_eq!(fac.dates[0], NaiveDate::from_ymd_opt(2019, 1, 2).unwrap());
}

#[test]
fn dataset_joins_on_dates_and_subtracts_risk_free() {
    let dir = common::fixture_dir();
    let ind = load_french_csv(dir.join(common::INDUSTRY_FILE), FrenchLayout::Industry49).unwrap();
    let data = dataset();
    assert_eq!(data.n_obs(), ind.len());
    assert_eq!(data.returns.n_assets(), 49);
    assert_eq!(data.factors.n_factors(), 3);
    let t = 10;
    assert_eq!(data.dates[t], ind.dates[t]);
    assert!((data.returns.data()[(t, 4)] - (ind.values[t][4] - data.risk_free[t])).abs() < 1e-15);
}

#[test]
fn ledger_conserves_balance_and_market_compounds_exactly() {
    let data = dataset();
    let cfg = BacktestConfig {
        strategies: vec![Strategy::Sam, Strategy::Fan, Strategy::Market],
        ..BacktestConfig::default()
    };
    let ledger = run_backtest(&data, &cfg).unwrap();
    assert_eq!(ledger.summaries.len(), 2 * 3);
    for s in &ledger.summaries {
        let days: Vec<_> = ledger
            .records
            .iter()
            .filter(|r| r.strategy == s.strategy && chrono::Datelike::year(&r.date) == s.year)
            .collect();
        assert_eq!(days.len(), s.trading_days);
        let rets: Vec<f64> = days.iter().map(|r| r.portfolio_return).collect();
        assert_eq!(compound(&rets), s.final_balance);
        assert_eq!(days.last().unwrap().balance, s.final_balance);
        if s.strategy == Strategy::Market {
            let mut b = INITIAL_BALANCE;
            for r in &days {
                let t = data.dates.iter().position(|d| *d == r.date).unwrap();
                b *= 1.0 + (data.factors.data()[(t, 0)] + data.risk_free[t]) / 100.0;
            }
            assert_eq!(b, s.final_balance);
        }
    }
    let first = ledger.records.iter().map(|r| r.date).min().unwrap();
    assert_eq!(first, data.dates[cfg.lookback]);
}

#[test]
fn year_without_history_is_rejected() {
    let data = dataset();
    let cfg = BacktestConfig {
        strategies: vec![Strategy::Sam],
        years: Some(vec![2019]),
        ..BacktestConfig::default()
    };
    assert!(run_backtest(&data, &cfg).is_err());
}
