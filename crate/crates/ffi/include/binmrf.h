#ifndef BINMRF_H
#define BINMRF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
typedef enum BmrfStatus {
  BMRF_STATUS_OK = 0,
  /**
   * Invalid inputs: bad dimensions, constraints or parse failures.
   */
  BMRF_STATUS_VALIDATION = 2,
  /**
   * A size cap was exceeded.
   */
  BMRF_STATUS_CAP = 3,
  /**
   * An I/O error occurred.
   */
  BMRF_STATUS_IO = 4,
  /**
   * A required pointer was null or a buffer too small.
   */
  BMRF_STATUS_NULL_POINTER = 5,
  /**
   * A panic was caught at the boundary.
   */
  BMRF_STATUS_PANIC = 6,
} BmrfStatus;

/**
 * Opaque catalog of configuration classes for one template.
 */
typedef struct BmrfCatalog BmrfCatalog;

/**
 * Opaque posterior chain over partition states.
 */
typedef struct BmrfChain BmrfChain;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the most recent error message of this thread into `buffer`
 * (NUL-terminated, truncated to `capacity`). Returns the full message
 * length in bytes, excluding the terminator.
 *
 * # Safety
 * `buffer` must point to at least `capacity` writable bytes, or be null
 * (in which case only the length is returned).
 */
size_t bmrf_last_error_message(char *buffer, size_t capacity);

/**
 * Builds the catalog for a k-by-l block template.
 *
 * # Safety
 * `out` must be a valid pointer; the handle must be released with
 * `bmrf_catalog_free`.
 */
enum BmrfStatus bmrf_catalog_new_block(size_t k, size_t l, struct BmrfCatalog **out);

/**
 * # Safety
 * `catalog` must come from `bmrf_catalog_new_block` and not already be
 * freed.
 */
void bmrf_catalog_free(struct BmrfCatalog *catalog);

/**
 * Number of configuration classes; 0 if the handle is null.
 *
 * # Safety
 * `catalog` must be a live handle or null.
 */
size_t bmrf_catalog_class_count(const struct BmrfCatalog *catalog);

/**
 * Multiplicity (number of template subsets) of one class.
 *
 * # Safety
 * `catalog` must be a live handle; `out` must be valid.
 */
enum BmrfStatus bmrf_catalog_class_multiplicity(const struct BmrfCatalog *catalog,
                                                size_t class_,
                                                size_t *out);

/**
 * Potential vector of the Ising embedding with interaction `omega`
 * (2x2 catalog only). `out` receives one value per class.
 *
 * # Safety
 * `catalog` must be live; `out` must hold `len` doubles.
 */
enum BmrfStatus bmrf_ising_phi(const struct BmrfCatalog *catalog,
                               double omega,
                               double *out,
                               size_t len);

/**
 * Potential vector of the i.i.d. Bernoulli(p) embedding (2x2 catalog).
 *
 * # Safety
 * As for `bmrf_ising_phi`.
 */
enum BmrfStatus bmrf_independence_phi(const struct BmrfCatalog *catalog,
                                      double p,
                                      double *out,
                                      size_t len);

/**
 * Converts a per-class potential vector to interaction coefficients on
 * an n-by-m torus.
 *
 * # Safety
 * `input` and `output` must each hold `len` doubles.
 */
enum BmrfStatus bmrf_phi_to_beta(const struct BmrfCatalog *catalog,
                                 size_t n,
                                 size_t m,
                                 const double *input,
                                 double *output,
                                 size_t len);

/**
 * Converts interaction coefficients to the per-class potential vector.
 *
 * # Safety
 * As for `bmrf_phi_to_beta`.
 */
enum BmrfStatus bmrf_beta_to_phi(const struct BmrfCatalog *catalog,
                                 size_t n,
                                 size_t m,
                                 const double *input,
                                 double *output,
                                 size_t len);

/**
 * Simulates an image by systematic-scan Gibbs sampling and writes the
 * 0/1 sites row-major into `out_image`.
 *
 * # Safety
 * `phi` must hold `phi_len` doubles and `out_image` n*m bytes.
 */
enum BmrfStatus bmrf_simulate(const struct BmrfCatalog *catalog,
                              size_t n,
                              size_t m,
                              uint32_t boundary,
                              const double *phi,
                              size_t phi_len,
                              size_t sweeps,
                              uint64_t seed,
                              uint8_t *out_image);

/**
 * Creates a posterior chain for an observed image. The image is `n*m`
 * row-major 0/1 bytes. Starts from the single-group state.
 *
 * # Safety
 * Pointers must be valid; the handle must be released with
 * `bmrf_chain_free`.
 */
enum BmrfStatus bmrf_chain_new(const struct BmrfCatalog *catalog,
                               size_t n,
                               size_t m,
                               uint32_t boundary,
                               const uint8_t *image,
                               uint32_t engine,
                               size_t exchange_sweeps,
                               double gamma,
                               double sigma_phi,
                               double sigma,
                               uint64_t seed,
                               size_t tree_depth,
                               struct BmrfChain **out);

/**
 * # Safety
 * `chain` must come from `bmrf_chain_new` and not already be freed.
 */
void bmrf_chain_free(struct BmrfChain *chain);

/**
 * Advances the chain by `iterations` full sweeps (one proposal of each
 * kernel per iteration), through the proposal tree when the chain was
 * created with tree_depth > 1.
 *
 * # Safety
 * `chain` must be a live handle.
 */
enum BmrfStatus bmrf_chain_run(struct BmrfChain *chain, uint64_t iterations);

/**
 * Number of groups in the current state; 0 on a null handle.
 *
 * # Safety
 * `chain` must be a live handle or null.
 */
size_t bmrf_chain_r(const struct BmrfChain *chain);

/**
 * Copies the group index of every configuration class (length must be
 * the class count) and the group values (length must be at least the
 * current r; `values_written` receives r).
 *
 * # Safety
 * Buffers must be valid for the stated lengths.
 */
enum BmrfStatus bmrf_chain_state(const struct BmrfChain *chain,
                                 size_t *class_to_group,
                                 size_t class_len,
                                 double *values,
                                 size_t values_capacity,
                                 size_t *values_written);

/**
 * Acceptance rate of one kernel (0 value walk, 1 move, 2 split/merge).
 *
 * # Safety
 * `chain` and `out` must be valid.
 */
enum BmrfStatus bmrf_chain_acceptance_rate(const struct BmrfChain *chain,
                                           size_t kernel,
                                           double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BINMRF_H */
