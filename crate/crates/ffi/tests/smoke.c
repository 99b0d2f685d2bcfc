#include <math.h>
#include <stdio.h>
#include <string.h>

#include "blindcs.h"

#define CHECK(call)                                                        \
  do {                                                                     \
    enum BcsStatus s_ = (call);                                            \
    if (s_ != BCS_STATUS_OK) {                                             \
      fprintf(stderr, "%s -> %d: %s\n", #call, (int)s_,                    \
              bcs_last_error_message());                                   \
      return 1;                                                            \
    }                                                                      \
  } while (0)

int main(int argc, char **argv) {
  const double lines[2][4] = {{1, 2, 3, 4}, {1, -1, 1, -1}};
  const size_t all[4] = {0, 1, 2, 3};
  struct BcsMeasurementSet *set = NULL;
  struct BcsModel *model = NULL, *loaded = NULL;
  double x[4], energy = 0.0;
  size_t labels[12], i, j;

  if (bcs_version() == NULL || strlen(bcs_version()) == 0) return 1;
  if (bcs_measurements_new(4, NULL) != BCS_STATUS_NULL_POINTER) return 1;
  if (strlen(bcs_last_error_message()) == 0) return 1;

  CHECK(bcs_measurements_new(4, &set));
  for (i = 0; i < 12; i++) {
    double a = 0.5 + (double)i / 4.0;
    for (j = 0; j < 4; j++) {
      x[j] = a * lines[i % 2][j];
      energy += x[j] * x[j];
    }
    CHECK(bcs_measurements_push_pixels(set, all, x, 4));
  }

  struct BcsLearnerConfig cfg = bcs_learner_config_default();
  cfg.k_max = 1;
  cfg.r = 2;
  cfg.max_outer_iters = 20;
  cfg.restarts = 3;
  cfg.seed = 1;
  CHECK(bcs_learn(set, &cfg, &model));
  if (!(bcs_model_objective(model) <= 1e-12 * energy)) {
    fprintf(stderr, "objective %g\n", bcs_model_objective(model));
    return 1;
  }
  CHECK(bcs_model_assignment(model, labels));
  for (i = 2; i < 12; i++)
    if (labels[i] != labels[i % 2]) return 1;
  if (labels[0] == labels[1]) return 1;

  if (argc > 1) {
    double y[4];
    CHECK(bcs_model_save(model, argv[1]));
    CHECK(bcs_model_load(argv[1], &loaded));
    CHECK(bcs_model_reconstruct(loaded, 3, y));
    for (j = 0; j < 4; j++)
      if (fabs(y[j] - 1.25 * lines[1][j]) > 1e-9) return 1;
    bcs_model_free(loaded);
  }

  bcs_model_free(model);
  bcs_measurements_free(set);
  printf("ok %s\n", bcs_version());
  return 0;
}
