#include <math.h>
#include <stdio.h>

#include "markov_icl.h"

#define CHECK(call)                                                            \
  do {                                                                         \
    MicStatus s_ = (call);                                                     \
    if (s_ != MIC_STATUS_OK) {                                                 \
      fprintf(stderr, "%s failed (%d): %s\n", #call, (int)s_, mic_last_error()); \
      return 1;                                                                \
    }                                                                          \
  } while (0)

int main(void) {
  MicPromptBatch *batch = NULL;
  MicModel *model = NULL;
  double x[3], b[2], a[2], disc, loss0, loss1, dev;

  CHECK(mic_xstar_len2_iid(0.5, 100, x));
  CHECK(mic_recover_pq_len2(x, b, a, &disc));
  if (fabs(b[0] * a[0] - x[0]) > 1e-9) return 1;

  CHECK(mic_prompt_batch_sample_binary(0.3, 1, 10, 100, 1, &batch));
  CHECK(mic_model_random(MIC_PARAM_FORM_RESTRICTED, 1, 10, 2, 0.1, 2, &model));
  CHECK(mic_forward_equiv_check(model, batch, &dev));
  if (dev > 1e-10) return 1;
  CHECK(mic_model_loss(model, batch, &loss0));
  CHECK(mic_model_train(model, batch, 0.01, 100, 1, NULL, 0));
  CHECK(mic_model_loss(model, batch, &loss1));
  if (!(loss1 < loss0)) return 1;

  if (mic_model_loss(NULL, batch, &loss1) != MIC_STATUS_NULL_POINTER) return 1;

  mic_model_free(model);
  mic_prompt_batch_free(batch);
  printf("ok %s\n", mic_version());
  return 0;
}
