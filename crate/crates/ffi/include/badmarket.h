#ifndef BADMARKET_H
#define BADMARKET_H

/* Generated by cbindgen from badmarket-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every API call.
 */
typedef enum BmStatus {
  BmStatus_Ok = 0,
  BmStatus_NullArgument = 1,
  BmStatus_InvalidUtf8 = 2,
  BmStatus_ParseError = 3,
  BmStatus_ValidationError = 4,
  BmStatus_NoConvergence = 5,
  BmStatus_VerificationFailed = 6,
  BmStatus_DomainError = 7,
  BmStatus_InternalError = 8,
} BmStatus;

/**
 * Opaque equilibrium-certificate handle.
 */
typedef struct BmCertificate BmCertificate;

/**
 * Opaque economy handle.
 */
typedef struct BmEconomy BmEconomy;

/**
 * Opaque quota-certificate handle.
 */
typedef struct BmQuotaCertificate BmQuotaCertificate;

/**
 * Solver configuration passed by value across the boundary.
 */
typedef struct BmSolverConfig {
  double clearing_tol;
  double optimality_tol;
  double damping;
  uint64_t max_outer_iters;
  uint64_t max_inner_iters;
  uint64_t restarts;
  uint64_t seed;
} BmSolverConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent error on this thread, or null. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *bm_last_error_message(void);

/**
 * Releases a string returned by any `*_to_json` call.
 *
 * # Safety
 * `ptr` must come from this library and not be freed twice.
 */
void bm_string_free(char *ptr);

/**
 * Parses an economy document.
 *
 * # Safety
 * `json` must be a valid NUL-terminated string, `out` a valid pointer.
 */
enum BmStatus bm_economy_from_json(const char *json, struct BmEconomy **out);

/**
 * # Safety
 * `out` must be a valid pointer.
 */
enum BmStatus bm_economy_build_hara(uint64_t n, struct BmEconomy **out);

/**
 * # Safety
 * `out` must be a valid pointer.
 */
enum BmStatus bm_economy_build_garbage(uint64_t n, struct BmEconomy **out);

/**
 * # Safety
 * `out` must be a valid pointer.
 */
enum BmStatus bm_economy_build_one_agent(struct BmEconomy **out);

/**
 * Serializes the economy document; release with `bm_string_free`.
 *
 * # Safety
 * `econ` must be a live handle from this library.
 */
char *bm_economy_to_json(const struct BmEconomy *econ);

/**
 * Runs the assumption validators; writes 1 into `out_passed` when no
 * error-severity finding exists.
 *
 * # Safety
 * `econ` must be a live handle, `out_passed` a valid pointer.
 */
enum BmStatus bm_economy_validate(const struct BmEconomy *econ, int32_t *out_passed);

/**
 * Validation report as JSON; release with `bm_string_free`.
 *
 * # Safety
 * `econ` must be a live handle from this library.
 */
char *bm_economy_validation_json(const struct BmEconomy *econ);

/**
 * # Safety
 * `econ` must come from this library and not be freed twice.
 */
void bm_economy_free(struct BmEconomy *econ);

struct BmSolverConfig bm_solver_config_default(void);

/**
 * Solves for a non-free-disposal equilibrium.
 *
 * # Safety
 * `econ` must be a live handle, `out` a valid pointer.
 */
enum BmStatus bm_solve(const struct BmEconomy *econ,
                       struct BmSolverConfig config,
                       struct BmCertificate **out);

/**
 * Verifies a certificate; writes 1 into `out_passed` when every condition
 * holds at tolerance `tol`.
 *
 * # Safety
 * `econ` and `cert` must be live handles, `out_passed` a valid pointer.
 */
enum BmStatus bm_verify(const struct BmEconomy *econ,
                        const struct BmCertificate *cert,
                        double tol,
                        int32_t *out_passed);

/**
 * Verification report as JSON; release with `bm_string_free`.
 *
 * # Safety
 * `econ` and `cert` must be live handles from this library.
 */
char *bm_verify_report_json(const struct BmEconomy *econ,
                            const struct BmCertificate *cert,
                            double tol);

/**
 * # Safety
 * `cert` must be a live handle from this library.
 */
char *bm_certificate_to_json(const struct BmCertificate *cert);

/**
 * # Safety
 * `json` must be a valid NUL-terminated string, `out` a valid pointer.
 */
enum BmStatus bm_certificate_from_json(const char *json, struct BmCertificate **out);

/**
 * Number of commodities in the certificate price.
 *
 * # Safety
 * `cert` must be a live handle from this library.
 */
uintptr_t bm_certificate_price_len(const struct BmCertificate *cert);

/**
 * Copies the certificate price into a caller buffer of length `len`.
 *
 * # Safety
 * `cert` must be a live handle, `buffer` valid for `len` doubles.
 */
enum BmStatus bm_certificate_price(const struct BmCertificate *cert, double *buffer, uintptr_t len);

/**
 * # Safety
 * `cert` must come from this library and not be freed twice.
 */
void bm_certificate_free(struct BmCertificate *cert);

/**
 * Solves under an emission-quota scheme given as a quota document.
 *
 * # Safety
 * `econ` must be a live handle, `quota_json` a valid string, `out` valid.
 */
enum BmStatus bm_solve_quota(const struct BmEconomy *econ,
                             const char *quota_json,
                             struct BmSolverConfig config,
                             struct BmQuotaCertificate **out);

/**
 * Verifies a quota certificate against its scheme.
 *
 * # Safety
 * `econ` and `cert` must be live handles, other pointers valid.
 */
enum BmStatus bm_verify_quota(const struct BmEconomy *econ,
                              const char *quota_json,
                              const struct BmQuotaCertificate *cert,
                              double tol,
                              int32_t *out_passed);

/**
 * # Safety
 * `cert` must be a live handle from this library.
 */
char *bm_quota_certificate_to_json(const struct BmQuotaCertificate *cert);

/**
 * # Safety
 * `cert` must come from this library and not be freed twice.
 */
void bm_quota_certificate_free(struct BmQuotaCertificate *cert);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BADMARKET_H */
