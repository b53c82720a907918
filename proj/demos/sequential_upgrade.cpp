// SPDX-License-Identifier: Apache-2.0
// Two successive upgrades over nested data fractions, BCT against DMU.

#include <iostream>

#include "dmu/dmu.hpp"

int main() {
    using namespace dmu;

    ExperimentConfig cfg;
    cfg.seed = 11;
    cfg.dataset.per_class = 120;
    cfg.test_per_class = 40;
    cfg.query_per_class = 8;
    cfg.train.epochs = 12;
    cfg.train.encoder.hidden = {128, 128};
    cfg.train.adapter.hidden_dim = 256;
    cfg.fractions = {0.25, 0.5, 0.75};

    const PreparedData data = prepare_data(cfg);
    const SequenceResult seq = sequential_upgrade(data.train, data.bench, cfg.fractions, cfg.methods, cfg);

    std::cout << io::sequence_summary(seq.reports) << "\n";
    for (std::size_t i = 0; i < cfg.methods.size(); ++i) {
        const EmbeddingStore& g = seq.final_galleries[i];
        std::cout << to_string(cfg.methods[i]) << ": deployed gallery '" << g.model_tag << "' at generation "
                  << g.generation << "\n";
    }
    return 0;
}
