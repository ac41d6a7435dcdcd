#ifndef COVCAST_H
#define COVCAST_H

/* Generated by cbindgen from covcast-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result of a library call.
typedef enum {
  // The call succeeded.
  COVCAST_STATUS_OK = 0,
  // Invalid arguments or malformed input data.
  COVCAST_STATUS_INVALID = 1,
  // The computation failed numerically.
  COVCAST_STATUS_NUMERIC = 2,
  // A file could not be read or written.
  COVCAST_STATUS_IO = 3,
  // The library panicked; treat the handle states as unspecified.
  COVCAST_STATUS_INTERNAL = 4,
} CovcastStatus;

// Coefficient estimator for the factor forecaster.
typedef enum {
  COVCAST_ESTIMATOR_OLS = 0,
  COVCAST_ESTIMATOR_LASSO = 1,
  COVCAST_ESTIMATOR_ADA_LASSO = 2,
} CovcastEstimator;

// Weight constraint presets for minimum-variance portfolios.
typedef enum {
  // Fully unconstrained aside from the budget.
  COVCAST_CONSTRAINTS_GLOBAL = 0,
  // Shorts capped at 30% total, single names within [-20%, 20%].
  COVCAST_CONSTRAINTS_RESTRICTED = 1,
  // No shorts, single names capped at 20%.
  COVCAST_CONSTRAINTS_LONG_ONLY = 2,
} CovcastConstraints;

// Long-memory estimator selector.
typedef enum {
  // Log-periodogram regression.
  COVCAST_MEMORY_METHOD_LOG_PERIODOGRAM = 0,
  // Local Whittle likelihood.
  COVCAST_MEMORY_METHOD_LOCAL_WHITTLE = 1,
} CovcastMemoryMethod;

// Opaque daily covariance panel (dates x assets, one matrix per day).
typedef struct CovcastPanel CovcastPanel;

// Opaque daily returns panel.
typedef struct CovcastReturns CovcastReturns;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the most recent failure on this thread.
//
// The pointer stays valid until the next library call from the same
// thread. Never free it.
const char *covcast_last_error_message(void);

// Library version as a static string; never free it.
const char *covcast_version(void);

// Loads a covariance panel from `path` (binary or CSV, sniffed).
//
// # Safety
// `path` must be NUL-terminated; `out` must point to writable storage.
CovcastStatus covcast_panel_load(const char *path, CovcastPanel **out);

// Releases a panel handle; `panel` may be null.
//
// # Safety
// `panel` must have come from this library and not been freed before.
void covcast_panel_free(CovcastPanel *panel);

// Number of days in the panel; zero if `panel` is null.
uintptr_t covcast_panel_n_days(const CovcastPanel *panel);

// Number of assets in the panel; zero if `panel` is null.
uintptr_t covcast_panel_n_assets(const CovcastPanel *panel);

// Calendar date of `day` as year/month/day-of-month.
//
// # Safety
// Out-pointers must be writable; `panel` must be a live handle.
CovcastStatus covcast_panel_date(const CovcastPanel *panel,
                                 uintptr_t day,
                                 int32_t *out_year,
                                 uint32_t *out_month,
                                 uint32_t *out_day);

// Copies the covariance matrix of `day` into `out` (row-major `n * n`).
//
// # Safety
// `out` must point to at least `len` writable doubles.
CovcastStatus covcast_panel_covariance(const CovcastPanel *panel,
                                       uintptr_t day,
                                       double *out,
                                       uintptr_t len);

// Copies the NUL-terminated name of asset `index` into `buf`.
//
// # Safety
// `buf` must point to at least `buf_len` writable bytes.
CovcastStatus covcast_panel_asset_name(const CovcastPanel *panel,
                                       uintptr_t index,
                                       char *buf,
                                       uintptr_t buf_len);

// Flags and replaces data-error days, producing a new panel handle.
//
// `out_flagged` (optional, may be null) receives the number of replaced
// days.
//
// # Safety
// `panel` must be a live handle; `out` must be writable.
CovcastStatus covcast_panel_clean(const CovcastPanel *panel,
                                  double sd_threshold,
                                  double flag_fraction,
                                  uintptr_t replace_count,
                                  CovcastPanel **out,
                                  uintptr_t *out_flagged);

// Loads a returns panel from `path` (binary or CSV, sniffed).
//
// # Safety
// `path` must be NUL-terminated; `out` must be writable.
CovcastStatus covcast_returns_load(const char *path, CovcastReturns **out);

// Releases a returns handle; `returns` may be null.
//
// # Safety
// `returns` must have come from this library and not been freed before.
void covcast_returns_free(CovcastReturns *returns);

// Number of days in the returns panel; zero if `returns` is null.
uintptr_t covcast_returns_n_days(const CovcastReturns *returns);

// Number of assets in the returns panel; zero if `returns` is null.
uintptr_t covcast_returns_n_assets(const CovcastReturns *returns);

// Rolling random-walk forecasts: each day's forecast is the previous
// day's matrix. Produces a new panel of one-day-ahead forecasts.
//
// # Safety
// `panel` must be a live handle; `out` must be writable.
CovcastStatus covcast_forecast_random_walk(const CovcastPanel *panel,
                                           uintptr_t window,
                                           CovcastPanel **out);

// Rolling exponentially weighted forecasts built from daily returns.
//
// # Safety
// `panel` and `returns` must be live handles; `out` must be writable.
CovcastStatus covcast_forecast_ewma(const CovcastPanel *panel,
                                    const CovcastReturns *returns,
                                    double lambda,
                                    uintptr_t window,
                                    CovcastPanel **out);

// Rolling factor-model forecasts with persistence-regression dynamics on
// the factor covariance and sector-block residuals.
//
// `weights_path` and `sectors_path` name CSV files describing factor
// weights and sector labels. `out_repairs` (optional, may be null)
// receives the number of forecasts adjusted to restore positive
// semidefiniteness.
//
// # Safety
// Paths must be NUL-terminated; `panel` must be a live handle; `out`
// must be writable.
CovcastStatus covcast_forecast_factor(const CovcastPanel *panel,
                                      const char *weights_path,
                                      const char *sectors_path,
                                      uintptr_t window,
                                      uintptr_t n_factors,
                                      CovcastEstimator estimator,
                                      bool use_log_matrix,
                                      CovcastPanel **out,
                                      uintptr_t *out_repairs);

// Mean squared-error ratio of two forecast panels against realized
// matrices, matched by date. Below 1 means `model` beats `baseline`.
//
// # Safety
// All three handles must be live; `out_ratio` must be writable.
CovcastStatus covcast_l2_ratio(const CovcastPanel *model,
                               const CovcastPanel *baseline,
                               const CovcastPanel *realized,
                               double *out_ratio);

// Minimum-variance weights for one covariance matrix under a constraint
// preset. `cov` is row-major `n * n`; `out_weights` receives `n` values
// summing to one.
//
// # Safety
// `cov` must hold `n * n` readable doubles and `out_weights` `n`
// writable doubles.
CovcastStatus covcast_min_variance_weights(const double *cov,
                                           uintptr_t n,
                                           CovcastConstraints constraints,
                                           double *out_weights);

// Long-memory parameter of a series by log-periodogram regression or
// local Whittle likelihood. `bandwidth` zero picks `floor(sqrt(len))`.
// `out_bandwidth` (optional, may be null) receives the bandwidth used.
//
// # Safety
// `series` must hold `len` readable doubles; `out_d` must be writable.
CovcastStatus covcast_long_memory_d(const double *series,
                                    uintptr_t len,
                                    uintptr_t bandwidth,
                                    CovcastMemoryMethod method,
                                    double *out_d,
                                    uintptr_t *out_bandwidth);

// Forces a status value through the C ABI; used by binding smoke tests.
int covcast_status_ok(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COVCAST_H */
