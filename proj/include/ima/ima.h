#ifndef IMA_H
#define IMA_H

/* C interface to the contrast/flow library. Every entry point returns a
 * status code; on failure, ima_last_error() describes what went wrong in the
 * calling thread. Strings returned through char** outputs are owned by the
 * caller and released with ima_string_free(). */

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum ima_status {
  IMA_OK = 0,
  IMA_ERR_CONFIG = 1,         /* malformed configuration or input file */
  IMA_ERR_DOMAIN = 2,         /* argument outside the operation's domain */
  IMA_ERR_SINGULAR = 3,       /* degenerate Jacobian encountered */
  IMA_ERR_NO_CONVERGENCE = 4, /* iteration failed to converge */
  IMA_ERR_INTERNAL = 5
} ima_status;

/* Message for the most recent failure in this thread; never NULL. */
const char* ima_last_error(void);

void ima_string_free(char* s);

/* Version string hashed into run manifests. Static storage; do not free. */
const char* ima_code_version(void);

/* ---- ground-truth mixing functions ----------------------------------- */

typedef struct ima_mixing ima_mixing;

/* init_kind: "orthogonal" | "uniform". */
ima_status ima_mixing_generate(int n, int L, const char* init_kind, uint64_t seed,
                               ima_mixing** out);
ima_status ima_mixing_load(const char* path, ima_mixing** out);
ima_status ima_mixing_save(const ima_mixing* m, const char* path);
void ima_mixing_free(ima_mixing* m);

int ima_mixing_dim(const ima_mixing* m);
int ima_mixing_depth(const ima_mixing* m);

/* s and x point at ima_mixing_dim(m) doubles. */
ima_status ima_mixing_forward(const ima_mixing* m, const double* s, double* x_out);
ima_status ima_mixing_inverse(const ima_mixing* m, const double* x, double* s_out);

/* Monte-Carlo contrast of the mixing over `count` samples of the named
 * prior ("standard_normal" | "uniform01"). */
ima_status ima_mixing_contrast(const ima_mixing* m, const char* prior, int count,
                               uint64_t seed, double* value_out, double* std_error_out);

/* Samples sources, mixes them, writes columns s1..sn,x1..xn. */
ima_status ima_mixing_dataset_csv(const ima_mixing* m, const char* prior, int count,
                                  uint64_t seed, const char* csv_path);

/* Exact conditional-CDF transform (2-dimensional mixings only): samples
 * `count` observations and writes columns x1,x2,u1,u2 with u uniform on the
 * unit square. */
ima_status ima_darmois2d_csv(const ima_mixing* m, const char* prior, int count,
                             uint64_t seed, const char* csv_path);

/* ---- flow models ------------------------------------------------------ */

typedef struct ima_flow ima_flow;

ima_status ima_flow_load(const char* path, ima_flow** out);
ima_status ima_flow_save(const ima_flow* f, const char* path);
void ima_flow_free(ima_flow* f);

int ima_flow_dim(const ima_flow* f);

/* x and y point at ima_flow_dim(f) doubles. */
ima_status ima_flow_forward(const ima_flow* f, const double* x, double* y_out);
ima_status ima_flow_inverse(const ima_flow* f, const double* y, double* x_out);
ima_status ima_flow_log_likelihood(const ima_flow* f, const double* x, double* out);
ima_status ima_flow_contrast_term(const ima_flow* f, const double* x, double* out);

/* Mean contrast term of the flow over the observation columns of a dataset
 * CSV (schema s1..sn,x1..xn). */
ima_status ima_flow_contrast_csv(const ima_flow* f, const char* dataset_csv,
                                 double* value_out, double* std_error_out);

/* ---- training ---------------------------------------------------------- */

/* Trains a fresh flow against observations of `m` under the named prior.
 *   flow_json:  {"blocks": int, "hidden_width": int, "kind": "full"|"triangular",
 *                "base": "gaussian"|"logistic", "seed": u64}  (all optional)
 *   train_json: trainer configuration (same schema as the config files)
 *   reg_json:   {"kind": "none"|"cima"|"l1"|"l2", "strength": double}
 * Writes <out_dir>/model.flow.json and <out_dir>/trajectory.csv. When the
 * run aborts, the last finite state is still written and the status is
 * IMA_ERR_NO_CONVERGENCE with the reason in ima_last_error(). */
ima_status ima_train_run(const ima_mixing* m, const char* prior, const char* flow_json,
                         const char* train_json, const char* reg_json, const char* out_dir);

/* ---- evaluation -------------------------------------------------------- */

/* Header for rows produced by ima_metrics_eval. Static storage; do not free. */
const char* ima_metrics_header(void);

/* Scores a flow against the ground truth on `count` fresh draws; writes one
 * CSV row (matching ima_metrics_header()) to *row_out. */
ima_status ima_metrics_eval(const ima_mixing* m, const char* prior, const ima_flow* f,
                            int count, uint64_t seed, char** row_out);

/* ---- experiment suites ------------------------------------------------- */

typedef void (*ima_progress_fn)(const char* message, void* user);

/* JSON for a named preset; caller frees. */
ima_status ima_suite_default_config(const char* name, char** json_out);

/* Runs a suite. Exactly one of `name` (preset) or `config_json` must be
 * non-NULL; out_dir overrides the config's output directory when non-NULL.
 * With check != 0, the suite's assertions are evaluated afterwards: the
 * report gains one line per assertion and *failed_out counts failures (the
 * status stays IMA_OK; assertion failures are data, not errors). */
ima_status ima_suite_run(const char* name, const char* config_json, const char* out_dir,
                         int threads, int check, ima_progress_fn progress, void* user,
                         int* failed_out, char** report_out);

/* Acceptance criteria. `fast` covers the deterministic property checks;
 * `deep` additionally runs the desk-scale suites under out_dir (cached cells
 * are reused). One report line per criterion; *failed_out counts failures. */
ima_status ima_check_run(int fast, int deep, const char* out_dir, int threads,
                         ima_progress_fn progress, void* user, int* failed_out,
                         char** report_out);

#ifdef __cplusplus
}
#endif

#endif /* IMA_H */
