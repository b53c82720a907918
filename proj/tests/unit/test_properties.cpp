// SPDX-License-Identifier: Apache-2.0
// Randomized invariants over seeded generators.
#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "dmu/data.hpp"
#include "dmu/eval.hpp"
#include "dmu/io/files.hpp"
#include "dmu/losses.hpp"
#include "dmu/models.hpp"
#include "support/generators.hpp"

namespace {

using namespace dmu;
using dmu::testing::iota_labels;
using dmu::testing::random_labels;
using dmu::testing::random_matrix;
using dmu::testing::random_size;
using dmu::testing::random_unit_rows;
using dmu::testing::random_vector;

constexpr int kBatches = 10000;

/// A nonzero output bias keeps pre-normalization rows away from zero, as in trained models.
template <class Model>
Model with_output_bias(Model m, Rng& rng) {
    for (Parameter* p : m.net().parameters())
        if (p->name == "out.bias") p->value = random_matrix(rng, 1, p->value.cols(), 0.5);
    return m;
}

TEST(SelectiveWeightProperties, SumToOneAndReverseRanks) {
    Rng rng(derive_seed(1, "selective"));
    for (int trial = 0; trial < kBatches; ++trial) {
        const std::size_t b = random_size(rng, 2, 64);
        std::vector<double> h = random_vector(rng, b, 0.0, std::log(static_cast<double>(random_size(rng, 2, 100))));
        const std::vector<double> w = selective_weights(h);
        EXPECT_NEAR(std::accumulate(w.begin(), w.end(), 0.0), 1.0, 1e-9);
        for (std::size_t i = 0; i < b; ++i) {
            ASSERT_GT(w[i], 0.0);
            for (std::size_t j = 0; j < b; ++j)
                if (h[i] < h[j]) {
                    ASSERT_GT(w[i], w[j]) << "trial " << trial;
                }
        }
    }
}

TEST(SelectiveWeightProperties, EntropyWeightsFromEmbeddings) {
    Rng rng(derive_seed(2, "selective"));
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t b = random_size(rng, 2, 64);
        const std::size_t c = random_size(rng, 2, 12);
        const Matrix emb = random_unit_rows(rng, b, 6);
        const ClassifierPrototypes p(random_matrix(rng, c, 6), iota_labels(c));
        const std::vector<double> w = selective_weights(entropy_discriminativeness(emb, p));
        EXPECT_NEAR(std::accumulate(w.begin(), w.end(), 0.0), 1.0, 1e-9);
        const std::vector<double> lc = least_confidence_weights(emb, p, random_labels(rng, b, c));
        EXPECT_NEAR(std::accumulate(lc.begin(), lc.end(), 0.0), 1.0, 1e-9);
        for (double v : lc) EXPECT_GT(v, 0.0);
    }
}

TEST(EntropyProperties, BoundsAttained) {
    Rng rng(3);
    for (std::size_t c = 2; c <= 64; ++c) {
        Matrix uniform(1, c, 1.0 / static_cast<double>(c));
        EXPECT_NEAR(posterior_entropy(uniform).front(), std::log(static_cast<double>(c)), 1e-14);
        Matrix one_hot(1, c);
        one_hot(0, rng.below(c)) = 1.0;
        EXPECT_EQ(posterior_entropy(one_hot).front(), 0.0);
    }
    for (int trial = 0; trial < 2000; ++trial) {
        const std::size_t c = random_size(rng, 2, 20);
        const ClassifierPrototypes p(random_matrix(rng, c, 5), iota_labels(c));
        for (double h : entropy_discriminativeness(random_unit_rows(rng, 4, 5), p)) {
            EXPECT_GE(h, 0.0);
            EXPECT_LE(h, std::log(static_cast<double>(c)) + 1e-12);
        }
    }
}

TEST(ArcFaceProperties, ZeroMarginIsCosineCrossEntropy) {
    Rng rng(4);
    for (int trial = 0; trial < 2000; ++trial) {
        const std::size_t n = random_size(rng, 1, 16);
        const std::size_t c = random_size(rng, 2, 16);
        const std::size_t d = random_size(rng, 2, 8);
        const Matrix emb = random_unit_rows(rng, n, d);
        const ClassifierPrototypes p(random_matrix(rng, c, d), iota_labels(c));
        const std::vector<int> y = random_labels(rng, n, c);
        const double s = rng.uniform(1.0, 64.0);
        const std::vector<double> loss = arcface_loss(emb, y, p, {s, 0.0});
        const Matrix cos = cosine_logits(emb, p);
        for (std::size_t i = 0; i < n; ++i) {
            // log-sum-exp shifted by the largest logit.
            double mx = -std::numeric_limits<double>::infinity();
            for (double v : cos.row(i)) mx = std::max(mx, s * v);
            double z = 0.0;
            for (double v : cos.row(i)) z += std::exp(s * v - mx);
            const double ce = mx + std::log(z) - s * cos(i, static_cast<std::size_t>(y[i]));
            EXPECT_NEAR(loss[i], ce, 1e-12);
        }
    }
}

TEST(RegressionProperties, CanonicalPairsAndWeightedBounds) {
    Rng rng(5);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t d = random_size(rng, 2, 10);
        const Matrix a = random_unit_rows(rng, 1, d);
        Matrix anti = a;
        for (double& v : anti.data()) v = -v;
        // Orthogonal partner by one Gram-Schmidt step.
        Matrix o = random_unit_rows(rng, 1, d);
        const double p = dot(o.row(0), a.row(0));
        for (std::size_t k = 0; k < d; ++k) o(0, k) -= p * a(0, k);
        o = l2_normalize(o);
        EXPECT_NEAR(regression_regularizer(a, a).front(), 0.0, 1e-12);
        EXPECT_NEAR(regression_regularizer(a, o).front(), 1.0, 1e-12);
        EXPECT_NEAR(regression_regularizer(a, anti).front(), 2.0, 1e-12);

        const std::size_t b = random_size(rng, 2, 64);
        const std::vector<double> r = regression_regularizer(random_unit_rows(rng, b, d), random_unit_rows(rng, b, d));
        const std::vector<double> w = selective_weights(random_vector(rng, b, 0.0, 3.0));
        double v = 0.0;
        for (std::size_t i = 0; i < b; ++i) v += w[i] * r[i];
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 2.0 + 1e-12);
    }
}

TEST(NumericsProperties, SoftmaxAndNormalize) {
    Rng rng(6);
    for (int trial = 0; trial < 2000; ++trial) {
        const Matrix x = random_matrix(rng, random_size(rng, 1, 8), random_size(rng, 1, 12), 10.0);
        const Matrix p = softmax_rows(x);
        Matrix shifted = x;
        for (std::size_t r = 0; r < x.rows(); ++r) {
            const double k = rng.uniform(-50.0, 50.0);
            for (double& v : shifted.row(r)) v += k;
        }
        EXPECT_LT(max_abs_diff(softmax_rows(shifted), p), 1e-9);
        for (std::size_t r = 0; r < p.rows(); ++r) {
            double s = 0.0;
            for (double v : p.row(r)) s += v;
            EXPECT_NEAR(s, 1.0, 1e-9);
        }
        const Matrix n = l2_normalize(x);
        EXPECT_LT(max_abs_diff(l2_normalize(n), n), 1e-9);
    }
}

TEST(ModelProperties, OutputsUnitNormAndRescaleInvariance) {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t in = random_size(rng, 2, 10);
        const std::size_t d = random_size(rng, 2, 8);
        EncoderModel m = with_output_bias(EncoderModel::init({in, {random_size(rng, 4, 24)}, d}, rng.next_u64()), rng);
        const AdapterModel a = with_output_bias(AdapterModel::init({d, random_size(rng, 4, 24)}, rng.next_u64()), rng);
        const Matrix x = random_matrix(rng, random_size(rng, 2, 20), in);
        for (const Matrix& e : {encode(m, x, Mode::train), encode(std::as_const(m), x)}) {
            for (std::size_t r = 0; r < e.rows(); ++r) EXPECT_NEAR(norm(e.row(r)), 1.0, 1e-6);
            const Matrix y = adapt(a, e);
            for (std::size_t r = 0; r < y.rows(); ++r) EXPECT_NEAR(norm(y.row(r)), 1.0, 1e-6);
        }
        const std::size_t c = random_size(rng, 2, 6);
        Matrix w = random_matrix(rng, c, d);
        const Matrix emb = encode(std::as_const(m), x);
        const Matrix base = cosine_logits(emb, ClassifierPrototypes(w, iota_labels(c)));
        for (std::size_t j = 0; j < c; ++j) {
            const double k = std::exp(rng.uniform(-5.0, 5.0));
            for (double& v : w.row(j)) v *= k;
        }
        EXPECT_LT(max_abs_diff(cosine_logits(emb, ClassifierPrototypes(w, iota_labels(c))), base), 1e-12);
    }
}

TEST(ModelProperties, CheckpointRoundTripPreservesOutputs) {
    Rng rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        EncoderModel m = with_output_bias(
            EncoderModel::init({5, {random_size(rng, 3, 12), random_size(rng, 3, 12)}, 4}, rng.next_u64()), rng);
        encode(m, random_matrix(rng, 8, 5), Mode::train);
        io::Checkpoint c;
        c.encoder = m;
        std::stringstream ss;
        io::write_checkpoint(ss, c);
        const io::Checkpoint r = io::read_checkpoint(ss);
        const Matrix x = random_matrix(rng, 6, 5);
        EXPECT_EQ(encode(*r.encoder, x), encode(std::as_const(m), x));
    }
}

TEST(SplitProperties, KindInvariantsForRandomSeeds) {
    Rng rng(9);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t classes = random_size(rng, 3, 12);
        const LabeledVectorSet d =
            generate_synthetic({classes, random_size(rng, 4, 30), 3, 0.2, 0.3, rng.next_u64()});
        const double f = rng.uniform(0.3, 0.7);
        const std::uint64_t seed = rng.next_u64();
        const std::set<std::uint64_t> all(d.ids.begin(), d.ids.end());
        {
            const ScenarioSplit s = make_split(d, SplitKind::extended_data, f, seed);
            const std::set<std::uint64_t> o(s.old_set.ids.begin(), s.old_set.ids.end());
            const std::set<std::uint64_t> n(s.new_set.ids.begin(), s.new_set.ids.end());
            EXPECT_TRUE(std::includes(n.begin(), n.end(), o.begin(), o.end()));
            EXPECT_EQ(s.old_set.present_labels().size(), classes);
            EXPECT_EQ(s.new_set.present_labels().size(), classes);
        }
        {
            const ScenarioSplit s = make_split(d, SplitKind::open_data, f, seed);
            std::set<std::uint64_t> u(s.old_set.ids.begin(), s.old_set.ids.end());
            for (std::uint64_t id : s.new_set.ids) EXPECT_TRUE(u.insert(id).second);
            EXPECT_EQ(u, all);
            EXPECT_EQ(s.old_set.present_labels(), s.new_set.present_labels());
        }
        {
            const ScenarioSplit s = make_split(d, SplitKind::extended_class, f, seed);
            const auto old_labels = s.old_set.present_labels();
            EXPECT_LT(old_labels.size(), classes);
            EXPECT_GT(old_labels.size(), 0U);
            // Old classes are complete.
            for (int l : old_labels)
                EXPECT_EQ(s.old_set.by_class().at(l).size(), d.by_class().at(l).size());
        }
        EXPECT_EQ(make_split(d, SplitKind::open_data, f, seed).old_set.ids,
                  make_split(d, SplitKind::open_data, f, seed).old_set.ids);
    }
}

TEST(BatchProperties, EveryBatchHasAtLeastTwoSamples) {
    Rng rng(10);
    for (int trial = 0; trial < 100; ++trial) {
        const LabeledVectorSet d = generate_synthetic({3, random_size(rng, 1, 20), 2, 0.2, 0.3, rng.next_u64()});
        const std::size_t bs = random_size(rng, 2, 70);
        const auto bs_list = batches(d, bs, 0.1, rng.next_u64(), trial);
        EXPECT_EQ(bs_list.size(), d.size() / bs);
        for (const Batch& b : bs_list) EXPECT_EQ(b.size(), bs);
    }
}

TEST(MetricProperties, PercentRange) {
    Rng rng(11);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t d = random_size(rng, 2, 6);
        const std::size_t c = random_size(rng, 2, 4);
        EmbeddingStore g{"g", "t", 0, random_unit_rows(rng, 20, d), {}, random_labels(rng, 20, c)};
        for (std::size_t i = 0; i < 20; ++i) g.ids.push_back(100 + i);
        for (std::size_t k = 0; k < c; ++k) g.labels[k] = static_cast<int>(k);
        EmbeddingStore q{"q", "t", 0, random_unit_rows(rng, 5, d), {0, 1, 2, 3, 4}, random_labels(rng, 5, c)};
        for (MetricKind kind : {MetricKind::map, MetricKind::tar}) {
            const double v = store_metric(q, g, {kind, random_size(rng, 1, 30), rng.uniform(0.0, 1.0)});
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 100.0);
        }
    }
}

}  // namespace
