// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>

#include "fixtures.hpp"
#include "r2f/error.hpp"
#include "r2f/finite_diff.hpp"
#include "r2f/gradients.hpp"
#include "r2f/random.hpp"

using namespace r2f;
using r2f::testing::small_world;
using r2f::testing::uniform_over;

namespace {

// The f32 forward leaves ~1e-7 relative noise in the loss, which a central
// difference at 1e-3 amplifies past the 1e-4 tolerance. A wider step with the
// five-point stencil keeps both noise and truncation under it.
constexpr double kEps = 1e-2;

AdapterSet random_adapters(const ModelParams& p, std::size_t rank, std::uint64_t seed) {
    AdapterSet a = attach_lora(p, rank, {"wq", "wv"}, seed);
    Rng rng(seed + 100);
    for (auto& ad : a) fill_normal(ad.B, rng, 0.05F);
    return a;
}

Tensor label(const ModelParams& p) { return uniform_over(small_world().corpus.answer_vocabulary(), p.config.vocab_size); }

LoraGradient make_lora(std::initializer_list<float> a_vals) {
    LoraGradient g;
    g.entries.push_back({0, "wq", Tensor({1, static_cast<std::size_t>(a_vals.size())}, a_vals), Tensor({1, 1}, {2.0F})});
    return g;
}

}  // namespace

TEST(LoraGradient, FreshAdaptersGiveExactlyZeroGradA) {
    const auto& w = small_world();
    const AdapterSet a = attach_lora(w.proxy, 8, {"wq", "wv"}, 3);
    const Fact& f = w.corpus.facts[w.corpus.target[0]];
    const LoraGradient g = lora_gradient(w.proxy, a, f.prompt, label(w.proxy));
    ASSERT_EQ(g.entries.size(), 4U);
    double b_norm = 0.0;
    for (const auto& e : g.entries) {
        for (float v : e.grad_A.data()) ASSERT_EQ(v, 0.0F);
        b_norm += l2_norm(e.grad_B.data());
    }
    EXPECT_GT(b_norm, 0.0);
}

TEST(LoraGradient, FreshGradBMatchesFiniteDifference) {
    const auto& w = small_world();
    AdapterSet a = attach_lora(w.proxy, 4, {"wq", "wv"}, 3);
    const Fact& f = w.corpus.facts[w.corpus.target[1]];
    const Tensor y = label(w.proxy);
    const LoraGradient g = lora_gradient(w.proxy, a, f.prompt, y);
    std::size_t checked = 0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        auto loss_fn = [&](const Tensor& b) {
            AdapterSet moved = a;
            moved[k].B = b;
            return loss_ce(w.proxy, &moved, f.prompt, y);
        };
        const Tensor fd = finite_diff_grad(loss_fn, a[k].B, kEps, {}, Stencil::five_point);
        for (std::size_t i = 0; i < fd.size(); ++i, ++checked) {
            EXPECT_TRUE(grad_close(g.entries[k].grad_B[i], fd[i])) << k << ":" << i << " " << g.entries[k].grad_B[i] << " vs " << fd[i];
        }
    }
    EXPECT_GE(checked, 200U);
}

TEST(LoraGradient, AllCoordinatesMatchFiniteDifference) {
    const auto& w = small_world();
    AdapterSet a = random_adapters(w.proxy, 4, 9);
    const Fact& f = w.corpus.facts[17];
    const Tensor y = label(w.proxy);
    const LoraGradient g = lora_gradient(w.proxy, a, f.prompt, y);
    const LoraGradient shape_only = g;
    auto loss_fn = [&](const Tensor& flat) {
        const LoraGradient v = LoraGradient::unflatten(shape_only, flat);
        AdapterSet moved = a;
        for (std::size_t k = 0; k < a.size(); ++k) {
            moved[k].A = v.entries[k].grad_A;
            moved[k].B = v.entries[k].grad_B;
        }
        return loss_ce(w.proxy, &moved, f.prompt, y);
    };
    // pack the current adapter values in the gradient layout
    LoraGradient cur = g;
    for (std::size_t k = 0; k < a.size(); ++k) {
        cur.entries[k].grad_A = a[k].A;
        cur.entries[k].grad_B = a[k].B;
    }
    const Tensor fd = finite_diff_grad(loss_fn, cur.flatten(), kEps, {}, Stencil::five_point);
    const Tensor an = g.flatten();
    ASSERT_EQ(fd.size(), an.size());
    std::size_t bad = 0;
    for (std::size_t i = 0; i < fd.size(); ++i) bad += grad_close(an[i], fd[i]) ? 0 : 1;
    EXPECT_EQ(bad, 0U) << "of " << fd.size();
}

TEST(FullGradient, SampledCoordinatesMatchFiniteDifference) {
    const auto& w = small_world();
    const Fact& f = w.corpus.facts[40];
    const Tensor y = label(w.proxy);
    const FullGradient g = full_gradient(w.proxy, {"wv", "wq"}, f.prompt, y);
    ASSERT_EQ(g.entries.size(), 4U);
    EXPECT_EQ(g.entries[0].projection, "wq");
    Rng rng(4);
    std::size_t checked = 0;
    for (const auto& e : g.entries) {
        std::vector<std::size_t> coords(64);
        for (auto& c : coords) c = rng() % e.grad_W.size();
        auto loss_fn = [&](const Tensor& wt) {
            ModelParams moved = w.proxy;
            moved.weight(e.layer, e.projection) = wt;
            return loss_ce(moved, nullptr, f.prompt, y);
        };
        const Tensor fd = finite_diff_grad(loss_fn, w.proxy.weight(e.layer, e.projection), kEps, coords, Stencil::five_point);
        for (auto c : coords) {
            EXPECT_TRUE(grad_close(e.grad_W[c], fd[c])) << weight_name(e.layer, e.projection) << "[" << c << "] "
                                                      << e.grad_W[c] << " vs " << fd[c];
            ++checked;
        }
    }
    EXPECT_GE(checked, 200U);
}

TEST(FullGradient, OwnOutputAsTargetGivesNearZeroGradient) {
    const auto& w = small_world();
    const Tokens& x = w.corpus.facts[5].prompt;
    const std::vector<Tokens> one{x};
    Tensor p = last_token_distributions(w.proxy, nullptr, one);
    // renormalize in double so the label is a distribution to f32 precision
    double s = 0.0;
    for (float v : p.data()) s += v;
    Tensor y({p.size()});
    for (std::size_t i = 0; i < p.size(); ++i) y[i] = static_cast<float>(p[i] / s);
    const FullGradient g = full_gradient(w.proxy, {"wq", "wv"}, x, y);
    EXPECT_LT(l2_norm(g.flatten().data()), 1e-4);
}

TEST(FullGradient, ScalingTheLossScalesTheGradient) {
    const auto& w = small_world();
    const Tokens& x = w.corpus.facts[8].prompt;
    const Tensor y = label(w.proxy);
    const FullGradient g = full_gradient(w.proxy, {"wq"}, x, y);
    const float alpha = 2.5F;
    const std::vector<Tokens> one{x};
    const Tensor targets({1, y.size()}, y.vec());
    LmGraph graph = build_lm_graph(w.proxy.config, nullptr, one, &targets);
    const NodeId scaled = graph.tape.scale(graph.loss, alpha);
    const std::set<std::string> wrt{"layer0.wq", "layer1.wq"};
    const TensorMap gs = backward_grad(graph.tape, forward_eval(graph.tape, w.proxy.tensors), scaled, &wrt);
    for (const auto& e : g.entries) {
        const Tensor& other = gs.at(weight_name(e.layer, e.projection));
        for (std::size_t i = 0; i < other.size(); ++i) EXPECT_NEAR(other[i], alpha * e.grad_W[i], 1e-5);
    }
}

TEST(GradientPair, MatchesSeparateComputationsBitwise) {
    const auto& w = small_world();
    const AdapterSet a = attach_lora(w.proxy, 8, {"wq", "wv"}, 1);
    const Fact& f = w.corpus.facts[77];
    const Tensor y = label(w.proxy);
    const GradientPair p = gradient_pair(w.proxy, a, f.prompt, y, 77);
    EXPECT_EQ(p.lora.flatten(), lora_gradient(w.proxy, a, f.prompt, y).flatten());
    EXPECT_EQ(p.full.flatten(), full_gradient(w.proxy, {"wq", "wv"}, f.prompt, y).flatten());
}

TEST(GradientFlatten, RoundTripsBitwise) {
    const auto& w = small_world();
    const AdapterSet a = random_adapters(w.proxy, 8, 2);
    const GradientPair p = gradient_pair(w.proxy, a, w.corpus.facts[3].prompt, label(w.proxy));
    const Tensor lf = p.lora.flatten();
    const Tensor ff = p.full.flatten();
    EXPECT_EQ(LoraGradient::unflatten(p.lora, lf).flatten(), lf);
    EXPECT_EQ(FullGradient::unflatten(p.full, ff).flatten(), ff);
    // canonical order: layer 0 wq A, layer 0 wq B, layer 0 wv A, ...
    EXPECT_EQ(lf[0], p.lora.entries[0].grad_A[0]);
    EXPECT_EQ(lf[32 * 8], p.lora.entries[0].grad_B[0]);
    EXPECT_EQ(p.lora.entries[1].projection, "wv");
    EXPECT_EQ(p.lora.entries[2].layer, 1U);
    EXPECT_THROW(LoraGradient::unflatten(p.lora, Tensor({3})), Error);
}

TEST(AverageViews, SingleGradientIsUnchanged) {
    const LoraGradient g = make_lora({1.5F, -2.0F});
    const LoraGradient m = average_views({g});
    EXPECT_EQ(m.flatten(), g.flatten());
    EXPECT_EQ(m.views, 1U);
}

TEST(AverageViews, OppositeGradientsCancel) {
    const LoraGradient g = make_lora({1.5F, -2.0F, 0.25F});
    const LoraGradient neg = LoraGradient::unflatten(g, [&] {
        Tensor f = g.flatten();
        for (auto& v : f.data()) v = -v;
        return f;
    }());
    const Tensor m = average_views({g, neg}).flatten();
    for (float v : m.data()) EXPECT_EQ(v, 0.0F);
}

TEST(AverageViews, MeanOfThree) {
    const LoraGradient m = average_views({make_lora({1.0F}), make_lora({3.0F}), make_lora({5.0F})});
    EXPECT_EQ(m.entries[0].grad_A[0], 3.0F);
    EXPECT_EQ(m.views, 3U);
}

TEST(AverageViews, PermutationInvariantAndScaleEquivariant) {
    const auto& w = small_world();
    const AdapterSet a = random_adapters(w.proxy, 4, 5);
    const Tensor y = label(w.proxy);
    const ParaphraseSet views = generate_paraphrases(w.corpus, w.corpus.facts[60], 5, 0);
    std::vector<LoraGradient> gs;
    for (const auto& x : views.prompts) gs.push_back(lora_gradient(w.proxy, a, x, y));
    const Tensor base = average_views(gs).flatten();
    std::vector<LoraGradient> rev(gs.rbegin(), gs.rend());
    const Tensor permuted = average_views(rev).flatten();
    for (std::size_t i = 0; i < base.size(); ++i) EXPECT_NEAR(permuted[i], base[i], 1e-6);
    const float alpha = -3.0F;
    std::vector<LoraGradient> scaled;
    for (const auto& g : gs) {
        Tensor f = g.flatten();
        for (auto& v : f.data()) v *= alpha;
        scaled.push_back(LoraGradient::unflatten(g, f));
    }
    const Tensor s = average_views(scaled).flatten();
    for (std::size_t i = 0; i < base.size(); ++i) EXPECT_NEAR(s[i], alpha * base[i], 1e-6);
}

TEST(AverageViews, LayoutMismatchRejected) {
    EXPECT_THROW(average_views({make_lora({1.0F}), make_lora({1.0F, 2.0F})}), Error);
    EXPECT_THROW(average_views({}), Error);
}

class CollectPairs : public ::testing::Test {
protected:
    static std::vector<PairExample> pool(std::size_t n) {
        const auto& w = small_world();
        const Tensor y = label(w.proxy);
        std::vector<PairExample> out;
        const auto prompts = paraphrase_pool(w.corpus, w.corpus.retain, n);
        for (std::size_t i = 0; i < prompts.size(); ++i) out.push_back({i, prompts[i].prompt, y});
        return out;
    }
};

TEST_F(CollectPairs, LimitZeroGivesEmptyDatasetWithHeader) {
    const auto& w = small_world();
    const AdapterSet a = attach_lora(w.proxy, 8, {"wq", "wv"}, 1);
    const GradientPairDataset ds = collect_pairs(w.proxy, a, 1, pool(10), 0);
    EXPECT_EQ(ds.size(), 0U);
    const GradientPairDataset back = dataset_from_container(decode_container(encode_container(dataset_to_container(ds))));
    EXPECT_EQ(back.size(), 0U);
    EXPECT_EQ(back.adapter_spec, "d_model=32;rank=8;proj=wq,wv;a_seed=1");
    EXPECT_EQ(back.flatten_version, kFlattenVersion);
}

TEST_F(CollectPairs, ThousandOfTwelveHundred) {
    const auto& w = small_world();
    const AdapterSet a = attach_lora(w.proxy, 8, {"wq", "wv"}, 1);
    const auto examples = pool(1200);
    ASSERT_EQ(examples.size(), 1200U);
    const GradientPairDataset ds = collect_pairs(w.proxy, a, 1, examples, 1000);
    EXPECT_EQ(ds.size(), 1000U);
    EXPECT_EQ(ds.lora.shape(), (Shape{1000, 2 * 2 * 2 * 32 * 8}));
    EXPECT_EQ(ds.full.shape(), (Shape{1000, 2 * 2 * 32 * 32}));
    EXPECT_THROW(collect_pairs(w.proxy, a, 1, examples, 1201), Error);
}

TEST_F(CollectPairs, RerunIsBitIdenticalAndRoundTrips) {
    const auto& w = small_world();
    const AdapterSet a = attach_lora(w.proxy, 8, {"wq", "wv"}, 1);
    const auto examples = pool(30);
    const std::string b1 = encode_container(dataset_to_container(collect_pairs(w.proxy, a, 1, examples, 30)));
    const std::string b2 = encode_container(dataset_to_container(collect_pairs(w.proxy, a, 1, examples, 30)));
    EXPECT_EQ(b1, b2);
    const GradientPairDataset back = dataset_from_container(decode_container(b1));
    EXPECT_EQ(encode_container(dataset_to_container(back)), b1);
    EXPECT_EQ(back.example_ids.size(), 30U);
    EXPECT_EQ(back.example_ids[29], 29U);
}

TEST_F(CollectPairs, NonFiniteGradientNamesTheExample) {
    const auto& w = small_world();
    ModelParams broken = w.proxy;
    broken.weight(0, "wq")[0] = std::numeric_limits<float>::quiet_NaN();
    const AdapterSet a = attach_lora(broken, 8, {"wq", "wv"}, 1);
    auto examples = pool(3);
    examples[0].id = 4242;
    try {
        (void)collect_pairs(broken, a, 1, examples, 3);
        FAIL() << "expected a numerical error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::numerical);
        EXPECT_NE(std::string(e.what()).find("4242"), std::string::npos);
    }
}
