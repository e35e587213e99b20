//! Regenerates the synthetic two-year fixture in `tests/fixtures/french/`.
//!
//! Factors are Gaussian, industry returns follow a single-index model whose
//! market loading drifts with the lagged index, plus GARCH(1,1) noise. One
//! industry row carries the -99.99 missing-value sentinel.
//!
//!     cargo run --example make_french_fixture

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use chrono::{Datelike, NaiveDate, Weekday};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use dyncov::data::write_french_csv;
use dyncov::garch::{simulate, GarchParams};

const INDUSTRIES: [&str; 49] = [
    "Agric", "Food", "Soda", "Beer", "Smoke", "Toys", "Fun", "Books", "Hshld", "Clths", "Hlth", "MedEq", "Drugs",
    "Chems", "Rubbr", "Txtls", "BldMt", "Cnstr", "Steel", "FabPr", "Mach", "ElcEq", "Autos", "Aero", "Ships", "Guns",
    "Gold", "Mines", "Coal", "Oil", "Util", "Telcm", "PerSv", "BusSv", "Hardw", "Softw", "Chips", "LabEq", "Paper",
    "Boxes", "Trans", "Whlsl", "Rtail", "Meals", "Banks", "Insur", "RlEst", "Fin", "Other",
];

const SENTINEL_ROW: usize = 250;

fn trading_days(from: NaiveDate, to: NaiveDate) -> Vec<NaiveDate> {
    from.iter_days()
        .take_while(|d| *d <= to)
        .filter(|d| !matches!(d.weekday(), Weekday::Sat | Weekday::Sun))
        .collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dates = trading_days(
        NaiveDate::from_ymd_opt(2019, 1, 2).unwrap(),
        NaiveDate::from_ymd_opt(2020, 12, 31).unwrap(),
    );
    let n = dates.len();
    let p = INDUSTRIES.len();
    let mut rng = ChaCha8Rng::seed_from_u64(49);

    let scales: [f64; 3] = [1.0, 0.5, 0.5];
    let drifts: [f64; 3] = [0.04, 0.0, 0.01];
    let mut factors = DMatrix::<f64>::zeros(n, 4);
    for t in 0..n {
        for j in 0..3 {
            let v = Normal::new(drifts[j], scales[j])?.sample(&mut rng);
            factors[(t, j)] = (v * 100.0).round() / 100.0;
        }
        factors[(t, 3)] = 0.008;
    }

    let beta = DVector::from_vec(vec![0.8, 0.36, 0.48]);
    let base: Vec<[f64; 3]> = (0..p)
        .map(|_| [rng.random_range(0.6..1.4), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)])
        .collect();
    let alpha: Vec<f64> = (0..p).map(|_| rng.random_range(-0.01..0.03)).collect();
    let garch = GarchParams::new(0.1, vec![0.1], vec![0.8])?;
    let noise: Vec<Vec<f64>> = (0..p).map(|_| simulate(&garch, n, &mut rng).0).collect();

    let mut industry = DMatrix::zeros(n, p);
    for t in 0..n {
        let u = if t == 0 { 0.0 } else { factors.fixed_view::<1, 3>(t - 1, 0).transpose().dot(&beta) };
        for k in 0..p {
            let load = [base[k][0] + 0.3 * u.tanh(), base[k][1], base[k][2]];
            let systematic: f64 = (0..3).map(|j| load[j] * factors[(t, j)]).sum();
            industry[(t, k)] = factors[(t, 3)] + alpha[k] + systematic + noise[k][t];
        }
    }
    industry[(SENTINEL_ROW, 17)] = -99.99;

    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/french");
    std::fs::create_dir_all(&dir)?;
    let names: Vec<String> = INDUSTRIES.iter().map(|s| s.to_string()).collect();
    write_french_csv(
        BufWriter::new(File::create(dir.join("49_Industry_Portfolios_Daily.csv"))?),
        "Synthetic daily returns for 49 industry portfolios (average value weighted)",
        &names,
        &dates,
        &industry,
        2,
    )?;
    let fnames: Vec<String> = ["Mkt-RF", "SMB", "HML", "RF"].iter().map(|s| s.to_string()).collect();
    write_french_csv(
        BufWriter::new(File::create(dir.join("F-F_Research_Data_Factors_daily.csv"))?),
        "Synthetic daily three-factor returns",
        &fnames,
        &dates,
        &factors,
        3,
    )?;
    println!("wrote {n} rows to {}", dir.display());
    Ok(())
}
