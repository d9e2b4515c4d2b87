// SPDX-License-Identifier: Apache-2.0
//
// Library walk-through: train a small model on synthetic data, attack it with
// MIM and TGR, and print the white-box success rates.

#include <iostream>

#include "tgr/tgr.hpp"

int main() {
    using namespace tgr;
    ViTConfig cfg;
    cfg.image_size = 16;
    cfg.depth = 2;

    const Dataset train_set = generate_synthetic(10, 40, cfg.image_size, 1);
    const Dataset eval_set = generate_synthetic(10, 5, cfg.image_size, 1, Split::Eval);

    TrainConfig tc;
    tc.epochs = 4;
    const TrainResult trained = train(ViTModel::random(cfg, 11), train_set, tc, &eval_set);
    std::cout << "eval accuracy " << trained.history.back().eval_accuracy.value_or(0.0) << "%\n";

    Zoo zoo{{"quick", trained.model}};
    HarnessOptions opt;
    opt.min_clean_accuracy = 0.0;  // a 4-epoch toy model is not gated
    for (const auto& r : transfer_matrix(zoo, "quick", {tgr_attack_config()}, eval_set, opt))
        std::cout << r.attack_name << " white-box ASR " << r.white_box_asr() << "% over " << r.sample_count
                  << " samples\n";
}
