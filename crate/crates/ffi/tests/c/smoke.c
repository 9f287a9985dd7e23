#include <stdio.h>
#include <string.h>
#include "concrete_dropout.h"

#define CHECK(call)                                                          \
  do {                                                                       \
    CdStatus s_ = (call);                                                    \
    if (s_ != CD_STATUS_OK) {                                                \
      fprintf(stderr, "%s failed: %d %s\n", #call, (int)s_,                  \
              cd_last_error_message());                                      \
      return 1;                                                              \
    }                                                                        \
  } while (0)

int main(int argc, char **argv) {
  if (argc < 2) return 2;
  double z = 0.0;
  CHECK(cd_concrete_drop_prob(0.5, 0.9, 0.1, &z));
  printf("drop_prob %.15f\n", z);

  size_t hidden[2] = {8, 8};
  CdModel *model = NULL;
  CHECK(cd_model_new(1, hidden, 2, 1, 0, 7, &model));

  double x[64], y[64];
  for (int i = 0; i < 64; i++) {
    x[i] = -1.0 + 2.0 * i / 63.0;
    y[i] = 2.0 * x[i] + 8.0;
  }
  double loss = 0.0;
  CHECK(cd_model_train(model, x, y, 64, 0.01, CD_PRECISION_MODE_MAPEM, 5, 16, 1e-3, 1, &loss));

  double mean[4], epi[4], alea[4];
  CHECK(cd_model_predict_mc(model, x, 4, 10, 3, mean, epi, alea));
  CHECK(cd_model_save(model, argv[1]));

  CdModel *loaded = NULL;
  CHECK(cd_model_load(argv[1], &loaded));
  double mean2[4], epi2[4], alea2[4];
  CHECK(cd_model_predict_mc(loaded, x, 4, 10, 3, mean2, epi2, alea2));
  if (memcmp(mean, mean2, sizeof mean) != 0) return 3;

  CdStatus bad = cd_model_predict_mc(loaded, x, 4, 1, 3, mean2, epi2, alea2);
  printf("single_sample_status %d\n", (int)bad);
  printf("message %s\n", cd_last_error_message());

  cd_model_free(model);
  cd_model_free(loaded);
  printf("ok\n");
  return 0;
}
