// Smallest end-to-end use of the library: a short base training on fold 0,
// PAMs at layers 7-12, a brief fine-tune, and baseline vs adapted mIoU.
// Step counts are far below the benchmark defaults so this finishes quickly.
#include <cstdio>

#include "afss/afss.hpp"

int main() {
  using namespace afss;
  enable_flush_to_zero();

  const SyntheticDataset ds(DatasetConfig::standard());
  const std::size_t fold = 0;

  Model model(ModelConfig{}, /*seed=*/1);
  BaseTrainOptions base;
  base.steps = 300;
  base_train(model, ds, fold, base, /*seed=*/7);

  PamConfig pc;
  pc.n_classes = ds.config().classes.size();
  pc.insert_positions = model.layout().parse_scheme("7-12");
  Pams pams = insert_pams<float>(model, pc, /*seed=*/1);
  std::printf("trainable PAM parameters: %zu of %zu\n", pams.trainable_parameter_count(),
              pams.trainable_parameter_count() + model.parameter_count());

  FinetuneBudget budget = FinetuneBudget::for_shots(1);
  budget.iterations = 50;
  const FinetuneResult ft = finetune(model, pams, ds, fold, budget, /*seed=*/1);

  EvalOptions eval;
  eval.episodes = 60;
  eval.seed = 1;
  const double before = evaluate(model, nullptr, ds, fold, eval, &ft.set).miou;
  const double after = evaluate(model, &pams, ds, fold, eval, &ft.set).miou;
  std::printf("novel mIoU: frozen %.3f, with PAMs %.3f\n", before, after);
}
