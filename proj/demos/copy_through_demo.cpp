// Trains a tiny decoder on a synthetic Markov corpus, then rebuilds it layer
// by layer from the teacher's hidden states. A teacher-initialised direct
// permutation reproduces the teacher exactly; random initialisation and a
// shallower permutation give looser reference losses.

#include <cstdio>

#include "yesbound/yesbound.hpp"

using namespace yesbound;

int main() {
  harness::LmRunConfig rc;
  rc.model.style = lm::Style::Llama;
  rc.model.vocab_size = 64;
  rc.model.context_len = 16;
  rc.model.d_model = 32;
  rc.model.n_heads = 2;
  rc.model.d_ff = 64;
  rc.model.n_layers = 3;
  rc.optimizer.kind = optim::Kind::AdamW;
  rc.optimizer.lr = 2e-3;
  rc.epochs = 3;

  data::TokenCorpus corpus;
  corpus.vocab_size = 64;
  corpus.context_len = 16;
  corpus.train = synth::markov_corpus(8000, 64, 1);

  const auto teacher = harness::train_lm(corpus, rc, nullptr).state;
  const auto& cfg = rc.model;
  const auto split = data::sequential_batches(corpus.train, 8, cfg.context_len, 64);
  const auto cache = yes::cache_teacher(teacher, cfg, data::batches(corpus.train, 8, cfg.context_len, 0).front());
  std::printf("teacher CE %.6f\n", lm::mean_loss(teacher, cfg, split));

  struct Variant {
    const char* label;
    yes::PermutationSpec perm;
    yes::YesInit init;
  };
  const Variant variants[] = {
      {"direct, teacher copy", yes::PermutationSpec::direct(3), yes::YesInit::TeacherCopy},
      {"direct, random", yes::PermutationSpec::direct(3), yes::YesInit::Random},
      {"[2,3], random", {"short", {2, 3}}, yes::YesInit::Random},
  };
  for (const auto& v : variants) {
    yes::YesConfig yc;
    yc.init = v.init;
    yc.layer_iterations = 50;
    yc.head_iterations = v.init == yes::YesInit::TeacherCopy ? 0 : 50;
    Rng rng(7);
    const auto c = yes::construct_yes(teacher, cfg, v.perm, cache, yc, rng);
    std::printf("%-22s CE %.6f  layer losses", v.label, yes::evaluate_yes_solution(c.model, split));
    for (const auto& t : c.layers) std::printf(" %.2e", t.loss);
    std::printf("\n");
  }
  return 0;
}
