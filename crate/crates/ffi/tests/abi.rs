//! Exercises the C ABI end to end: load panels from disk, forecast,
//! score, and clean up through the exported functions only.

use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::path::Path;

use approx::assert_relative_eq;

use covcast::panel::{save_cov_binary, save_returns_binary};
use covcast::synth::{generate_synthetic, SynthConfig};
use covcast_ffi::*;

fn write_fixture(dir: &Path) -> (CString, CString, CString) {
    let cfg = SynthConfig {
        n_assets: 12,
        n_days: 140,
        seed: 42,
        ..SynthConfig::default()
    };
    let data = generate_synthetic(&cfg).unwrap();
    let cov = dir.join("cov.bin");
    let ret = dir.join("ret.bin");
    let weights = dir.join("weights.csv");
    let sectors = dir.join("sectors.csv");
    save_cov_binary(&data.covariances, &cov).unwrap();
    save_returns_binary(&data.returns, &ret).unwrap();
    covcast::factor::save_factor_spec_csv(&data.factor_spec, &weights).unwrap();
    covcast::factor::save_sectors_csv(&data.sectors, &sectors).unwrap();
    (
        CString::new(cov.to_str().unwrap()).unwrap(),
        CString::new(weights.to_str().unwrap()).unwrap(),
        CString::new(ret.to_str().unwrap()).unwrap(),
    )
}

fn last_error() -> String {
    unsafe {
        CStr::from_ptr(covcast_last_error_message())
            .to_string_lossy()
            .into_owned()
    }
}

#[test]
fn version_is_a_static_string() {
    let v = unsafe { CStr::from_ptr(covcast_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn load_inspect_and_free_a_panel() {
    let dir = tempfile::tempdir().unwrap();
    let (cov, _, _) = write_fixture(dir.path());
    let mut panel: *mut CovcastPanel = std::ptr::null_mut();
    let status = unsafe { covcast_panel_load(cov.as_ptr(), &mut panel) };
    assert_eq!(status, CovcastStatus::Ok, "{}", last_error());
    assert_eq!(covcast_panel_n_days(panel), 140);
    assert_eq!(covcast_panel_n_assets(panel), 12);

    let (mut y, mut m, mut d) = (0i32, 0u32, 0u32);
    let status = unsafe { covcast_panel_date(panel, 0, &mut y, &mut m, &mut d) };
    assert_eq!(status, CovcastStatus::Ok);
    assert_eq!((y, m, d), (2006, 1, 2));

    let mut buf = vec![0.0f64; 12 * 12];
    let status = unsafe { covcast_panel_covariance(panel, 5, buf.as_mut_ptr(), buf.len()) };
    assert_eq!(status, CovcastStatus::Ok);
    // Row-major symmetric with positive diagonal.
    for i in 0..12 {
        assert!(buf[i * 12 + i] > 0.0);
        for j in 0..12 {
            assert_relative_eq!(buf[i * 12 + j], buf[j * 12 + i], max_relative = 1e-12);
        }
    }

    let mut name = [0 as c_char; 16];
    let status = unsafe { covcast_panel_asset_name(panel, 3, name.as_mut_ptr(), name.len()) };
    assert_eq!(status, CovcastStatus::Ok);
    let name = unsafe { CStr::from_ptr(name.as_ptr()) }.to_str().unwrap();
    assert_eq!(name, "A0004");

    unsafe { covcast_panel_free(panel) };
}

#[test]
fn null_and_bad_arguments_report_invalid() {
    let mut panel: *mut CovcastPanel = std::ptr::null_mut();
    let status = unsafe { covcast_panel_load(std::ptr::null(), &mut panel) };
    assert_eq!(status, CovcastStatus::Invalid);
    assert!(last_error().contains("null"));

    let missing = CString::new("/nonexistent/panel.bin").unwrap();
    let status = unsafe { covcast_panel_load(missing.as_ptr(), &mut panel) };
    assert_eq!(status, CovcastStatus::Io);

    // Out-of-range day on a real panel.
    let dir = tempfile::tempdir().unwrap();
    let (cov, _, _) = write_fixture(dir.path());
    let status = unsafe { covcast_panel_load(cov.as_ptr(), &mut panel) };
    assert_eq!(status, CovcastStatus::Ok);
    let mut buf = vec![0.0f64; 12 * 12];
    let status = unsafe { covcast_panel_covariance(panel, 999, buf.as_mut_ptr(), buf.len()) };
    assert_eq!(status, CovcastStatus::Invalid);
    assert!(last_error().contains("out of range"));
    // Undersized buffer.
    let status = unsafe { covcast_panel_covariance(panel, 0, buf.as_mut_ptr(), 10) };
    assert_eq!(status, CovcastStatus::Invalid);
    unsafe { covcast_panel_free(panel) };

    // Getters degrade to zero on null handles instead of crashing.
    assert_eq!(covcast_panel_n_days(std::ptr::null()), 0);
    assert_eq!(covcast_returns_n_assets(std::ptr::null()), 0);
    unsafe {
        covcast_panel_free(std::ptr::null_mut());
        covcast_returns_free(std::ptr::null_mut());
    }
}

#[test]
fn clean_produces_an_independent_panel() {
    let dir = tempfile::tempdir().unwrap();
    let (cov, _, _) = write_fixture(dir.path());
    let mut panel: *mut CovcastPanel = std::ptr::null_mut();
    unsafe { covcast_panel_load(cov.as_ptr(), &mut panel) };
    let mut cleaned: *mut CovcastPanel = std::ptr::null_mut();
    let mut flagged = usize::MAX;
    let status = unsafe { covcast_panel_clean(panel, 4.0, 0.25, 10, &mut cleaned, &mut flagged) };
    assert_eq!(status, CovcastStatus::Ok, "{}", last_error());
    assert!(flagged < 140, "flag count was written");
    assert_eq!(covcast_panel_n_days(cleaned), 140);
    // Freeing the source must leave the cleaned panel alive.
    unsafe { covcast_panel_free(panel) };
    assert_eq!(covcast_panel_n_assets(cleaned), 12);
    unsafe { covcast_panel_free(cleaned) };
}

#[test]
fn forecast_and_score_through_the_abi() {
    let dir = tempfile::tempdir().unwrap();
    let (cov, weights, ret) = write_fixture(dir.path());
    let sectors = CString::new(dir.path().join("sectors.csv").to_str().unwrap()).unwrap();

    let mut panel: *mut CovcastPanel = std::ptr::null_mut();
    unsafe { covcast_panel_load(cov.as_ptr(), &mut panel) };
    let mut returns: *mut CovcastReturns = std::ptr::null_mut();
    let status = unsafe { covcast_returns_load(ret.as_ptr(), &mut returns) };
    assert_eq!(status, CovcastStatus::Ok, "{}", last_error());
    assert_eq!(covcast_returns_n_days(returns), 140);

    let mut rw: *mut CovcastPanel = std::ptr::null_mut();
    let status = unsafe { covcast_forecast_random_walk(panel, 100, &mut rw) };
    assert_eq!(status, CovcastStatus::Ok, "{}", last_error());
    assert_eq!(covcast_panel_n_days(rw), 140 - 100 - 22);

    let mut ew: *mut CovcastPanel = std::ptr::null_mut();
    let status = unsafe { covcast_forecast_ewma(panel, returns, 0.96, 100, &mut ew) };
    assert_eq!(status, CovcastStatus::Ok, "{}", last_error());

    let mut factor: *mut CovcastPanel = std::ptr::null_mut();
    let mut repairs = usize::MAX;
    let status = unsafe {
        covcast_forecast_factor(
            panel,
            weights.as_ptr(),
            sectors.as_ptr(),
            100,
            3,
            CovcastEstimator::AdaLasso,
            true,
            &mut factor,
            &mut repairs,
        )
    };
    assert_eq!(status, CovcastStatus::Ok, "{}", last_error());
    assert_eq!(covcast_panel_n_days(factor), covcast_panel_n_days(rw));
    assert!(repairs != usize::MAX, "repair count was written");

    // A forecaster against itself scores exactly 1.
    let mut ratio = 0.0;
    let status = unsafe { covcast_l2_ratio(rw, rw, panel, &mut ratio) };
    assert_eq!(status, CovcastStatus::Ok, "{}", last_error());
    assert_eq!(ratio, 1.0);
    let status = unsafe { covcast_l2_ratio(factor, rw, panel, &mut ratio) };
    assert_eq!(status, CovcastStatus::Ok, "{}", last_error());
    assert!(ratio.is_finite() && ratio > 0.0);

    unsafe {
        covcast_panel_free(factor);
        covcast_panel_free(ew);
        covcast_panel_free(rw);
        covcast_returns_free(returns);
        covcast_panel_free(panel);
    }
}

#[test]
fn min_variance_weights_on_a_raw_buffer() {
    // 6x6 SPD matrix, row-major: diagonal-dominant with mild correlation.
    // Six assets so the 20% box cap leaves the budget feasible.
    let n = 6;
    let mut cov = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            cov[i * n + j] = if i == j { 2.0 + i as f64 * 0.3 } else { 0.3 };
        }
    }
    let mut w = vec![0.0f64; n];
    let status = unsafe {
        covcast_min_variance_weights(
            cov.as_ptr(),
            n,
            CovcastConstraints::LongOnly,
            w.as_mut_ptr(),
        )
    };
    assert_eq!(status, CovcastStatus::Ok, "{}", last_error());
    assert_relative_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-6);
    assert!(w.iter().all(|&x| x >= -1e-8 && x <= 0.2 + 1e-8));

    // A box cap that cannot reach the budget is rejected.
    let status = unsafe {
        covcast_min_variance_weights(
            cov.as_ptr(),
            3,
            CovcastConstraints::LongOnly,
            w.as_mut_ptr(),
        )
    };
    assert_eq!(status, CovcastStatus::Invalid);
    assert!(last_error().contains("cannot sum to 1"));

    // Singular matrix reports a numeric failure, not a crash.
    let bad = vec![1.0f64; n * n];
    let status = unsafe {
        covcast_min_variance_weights(bad.as_ptr(), n, CovcastConstraints::Global, w.as_mut_ptr())
    };
    assert_eq!(status, CovcastStatus::Numeric);
}

#[test]
fn long_memory_estimates_on_a_raw_series() {
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let series: Vec<f64> = (0..512).map(|_| rng.random::<f64>() - 0.5).collect();
    let mut d = f64::NAN;
    let mut bw = 0usize;
    let status = unsafe {
        covcast_long_memory_d(
            series.as_ptr(),
            series.len(),
            0,
            CovcastMemoryMethod::LogPeriodogram,
            &mut d,
            &mut bw,
        )
    };
    assert_eq!(status, CovcastStatus::Ok, "{}", last_error());
    assert_eq!(bw, 22, "default bandwidth is floor(sqrt(512))");
    assert!(d.abs() < 0.5, "white noise memory near zero, got {d}");

    let status = unsafe {
        covcast_long_memory_d(
            series.as_ptr(),
            8,
            0,
            CovcastMemoryMethod::LocalWhittle,
            &mut d,
            std::ptr::null_mut(),
        )
    };
    assert_eq!(status, CovcastStatus::Invalid, "series too short");
}

#[test]
fn header_stays_in_sync_with_the_source() {
    // build.rs regenerates include/covcast.h on every compile of this
    // crate; here we only pin the ABI essentials so accidental edits to
    // the committed header fail loudly.
    let header =
        std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/covcast.h"))
            .unwrap();
    for needle in [
        "typedef struct CovcastPanel CovcastPanel;",
        "typedef struct CovcastReturns CovcastReturns;",
        "COVCAST_STATUS_OK = 0",
        "COVCAST_STATUS_INTERNAL = 4",
        "covcast_panel_load",
        "covcast_forecast_factor",
        "covcast_min_variance_weights",
        "covcast_long_memory_d",
        "covcast_last_error_message",
    ] {
        assert!(header.contains(needle), "header lost {needle:?}");
    }
}
