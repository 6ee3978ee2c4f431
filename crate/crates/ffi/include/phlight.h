#ifndef PHLIGHT_H
#define PHLIGHT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every fallible call.
 */
typedef enum PhStatus {
  PH_STATUS_OK = 0,
  PH_STATUS_NULL_POINTER = 1,
  PH_STATUS_INVALID_ARGUMENT = 2,
  PH_STATUS_IO = 3,
  PH_STATUS_PARSE = 4,
  PH_STATUS_SIMULATION = 5,
  PH_STATUS_PANIC = 6,
} PhStatus;

/*
 Baselines available to [`ph_evaluate_baseline`].
 */
typedef enum PhBaseline {
  PH_BASELINE_FIXED_TIME = 0,
  PH_BASELINE_MAX_PRESSURE = 1,
  PH_BASELINE_RANDOM = 2,
} PhBaseline;

/*
 Opaque trained agent handle.
 */
typedef struct PhAgent PhAgent;

/*
 Opaque scenario handle.
 */
typedef struct PhScenario PhScenario;

/*
 Episode metrics. `datt` is NaN when no vehicle arrived.
 */
typedef struct PhMetrics {
  double att;
  double datt;
  double dar;
  size_t vehicles;
} PhMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread; empty after a success.
 The pointer stays valid until the next call on the same thread.
 */
const char *ph_last_error(void);

/*
 Synthetic grid with Poisson arrivals; `demand` is vehicles per hour in total.

 # Safety
 `out` must be a valid pointer to writable storage for one handle.
 */
enum PhStatus ph_scenario_generate_grid(size_t rows,
                                        size_t cols,
                                        double link_length,
                                        double demand,
                                        uint64_t seed,
                                        struct PhScenario **out);

/*
 Loads a roadnet/flow JSON pair.

 # Safety
 Paths must be NUL-terminated strings; `out` must be writable.
 */
enum PhStatus ph_scenario_load(const char *roadnet, const char *flow, struct PhScenario **out);

/*
 # Safety
 `s` must come from this library and not be freed twice. Null is ignored.
 */
void ph_scenario_free(struct PhScenario *s);

/*
 Number of signalized intersections, 0 for a null handle.

 # Safety
 `s` must be null or a live handle.
 */
size_t ph_scenario_num_intersections(const struct PhScenario *s);

/*
 Number of scheduled trips, 0 for a null handle.

 # Safety
 `s` must be null or a live handle.
 */
size_t ph_scenario_num_trips(const struct PhScenario *s);

/*
 Loads a checkpoint written by the training commands.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum PhStatus ph_agent_load(const char *path, struct PhAgent **out);

/*
 # Safety
 `a` must come from this library and not be freed twice. Null is ignored.
 */
void ph_agent_free(struct PhAgent *a);

/*
 Phases per intersection the agent was built for, 0 for a null handle.

 # Safety
 `a` must be null or a live handle.
 */
size_t ph_agent_num_phases(const struct PhAgent *a);

/*
 Length of the observation vector expected by [`ph_agent_select_action`].

 # Safety
 `a` must be null or a live handle.
 */
size_t ph_agent_observation_len(const struct PhAgent *a);

/*
 Greedy phase and duration for one observation: 72 lane features in
 approach-major slot order, a one-hot active phase, and the elapsed green.

 # Safety
 `obs` must point to `len` readable doubles; `phase` and `duration` must be writable.
 */
enum PhStatus ph_agent_select_action(const struct PhAgent *a,
                                     const double *obs,
                                     size_t len,
                                     size_t *phase,
                                     double *duration);

/*
 Runs one baseline episode of `horizon` seconds.

 # Safety
 `s` must be a live handle and `out` writable.
 */
enum PhStatus ph_evaluate_baseline(const struct PhScenario *s,
                                   enum PhBaseline baseline,
                                   uint32_t horizon,
                                   uint64_t seed,
                                   struct PhMetrics *out);

/*
 Runs one frozen-policy episode of `horizon` seconds.

 # Safety
 `s` and `a` must be live handles and `out` writable.
 */
enum PhStatus ph_evaluate_agent(const struct PhScenario *s,
                                const struct PhAgent *a,
                                uint32_t horizon,
                                struct PhMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PHLIGHT_H */
