// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "fixtures.hpp"
#include "r2f/error.hpp"
#include "r2f/eval.hpp"
#include "r2f/random.hpp"
#include "r2f/unlearn.hpp"

using namespace r2f;
using r2f::testing::small_world;

namespace {

constexpr std::uint64_t kAdapterSeed = 21;

struct Setup {
    AdapterSet adapters;
    DecoderParams decoder;  // trained on proxy pairs
};

const Setup& setup() {
    static const Setup s = [] {
        const auto& w = small_world();
        Setup out;
        out.adapters = attach_lora(w.target, 4, {"wq", "wv"}, kAdapterSeed);
        const AdapterSet pa = attach_lora(w.proxy, 4, {"wq", "wv"}, kAdapterSeed);
        const Tensor y = unlearning_label(w.corpus, {}, w.proxy.config.vocab_size);
        auto pool = paraphrase_pool(w.corpus, w.corpus.retain, 0);
        Rng rng(1);
        std::shuffle(pool.begin(), pool.end(), rng);
        std::vector<PairExample> ex;
        for (std::size_t i = 0; i < 300; ++i) ex.push_back({i, pool[i].prompt, y});
        DecoderHyper h;
        h.epochs = 10;
        out.decoder = train_decoder(collect_pairs(w.proxy, pa, kAdapterSeed, ex, 300), h).params;
        return out;
    }();
    return s;
}

UnlearnContext context(const DecoderParams* dec = &setup().decoder) {
    const auto& w = small_world();
    return {&w.corpus, &w.target, &setup().adapters, kAdapterSeed, dec};
}

UnlearnRequest request(Method m, double eta, std::vector<std::size_t> facts = {}) {
    UnlearnRequest r;
    r.method = m;
    r.eta = eta;
    r.facts = facts.empty() ? std::vector<std::size_t>(small_world().corpus.target.begin(),
                                                       small_world().corpus.target.begin() + 3)
                            : std::move(facts);
    return r;
}

bool is_adapted(const std::string& name) {
    const auto& w = small_world();
    for (std::size_t l = 0; l < w.target.config.n_layers; ++l) {
        if (name == weight_name(l, "wq") || name == weight_name(l, "wv")) return true;
    }
    return false;
}

}  // namespace

TEST(UnlearnContract, EtaZeroIsBitwiseNoOpForEveryMethod) {
    for (Method m : all_methods()) {
        const UnlearnOutcome o = unlearn(context(), request(m, 0.0));
        EXPECT_EQ(o.params.tensors, small_world().target.tensors) << method_name(m);
        if (updates_adapters(m)) EXPECT_EQ(o.adapters, setup().adapters) << method_name(m);
        EXPECT_EQ(o.facts.size(), 3U);
    }
}

TEST(UnlearnContract, ZeroDecoderIsNoOp) {
    const auto& w = small_world();
    const AdapterSet pa = attach_lora(w.proxy, 4, {"wq", "wv"}, kAdapterSeed);
    GradientPairDataset header;
    header.adapter_spec = adapter_spec(pa, 32, kAdapterSeed);
    header.d_model = 32;
    header.rank = 4;
    header.n_layers = 2;
    header.projections = {"wq", "wv"};
    const DecoderParams zero = zero_decoder(header, {});
    const UnlearnOutcome o = unlearn(context(&zero), request(Method::r2f, 5.0));
    EXPECT_EQ(o.params.tensors, w.target.tensors);
    EXPECT_EQ(o.grad_norm, 0.0);
}

TEST(UnlearnContract, LocusOfEachMethod) {
    const auto& w = small_world();
    for (Method m : all_methods()) {
        const UnlearnOutcome o = unlearn(context(), request(m, 0.5));
        bool any_change = false;
        for (const auto& [name, t] : w.target.tensors) {
            const bool same = o.params.tensors.at(name) == t;
            if (updates_adapters(m) || !is_adapted(name)) {
                EXPECT_TRUE(same) << method_name(m) << " touched " << name;
            }
            any_change |= !same;
        }
        if (updates_adapters(m)) {
            EXPECT_TRUE(o.adapters != setup().adapters) << method_name(m);
            EXPECT_FALSE(any_change);
        } else {
            EXPECT_TRUE(o.adapters.empty()) << method_name(m);
            EXPECT_TRUE(any_change) << method_name(m);
        }
    }
}

TEST(UnlearnContract, LoraMultiWithOneViewEqualsLoraSingle) {
    UnlearnRequest multi = request(Method::lora_multi, 0.3);
    multi.views = 1;
    UnlearnRequest single = request(Method::lora_single, 0.3);
    single.views = 1;
    const UnlearnOutcome a = unlearn(context(), multi);
    const UnlearnOutcome b = unlearn(context(), single);
    EXPECT_EQ(a.adapters, b.adapters);
    EXPECT_EQ(a.grad_norm, b.grad_norm);
}

TEST(UnlearnContract, GradAscentIsFullGradientStepOnCanonicalLabelNegated) {
    const auto& w = small_world();
    const std::size_t fact = w.corpus.target[0];
    const UnlearnOutcome o = unlearn(context(), request(Method::grad_ascent, 0.7, {fact}));
    ModelParams manual = w.target;
    const Fact& f = w.corpus.facts[fact];
    apply_full_gradient_step(manual, {"wq", "wv"}, f.prompt, one_hot(f.answer, 128), -0.7);
    EXPECT_EQ(o.params.tensors, manual.tensors);
}

TEST(UnlearnContract, FullGradUsesTheOracleGradient) {
    const auto& w = small_world();
    const std::size_t fact = w.corpus.target[1];
    const UnlearnOutcome o = unlearn(context(), request(Method::full_grad, 0.2, {fact}));
    const Tensor y = unlearning_label(w.corpus, {}, 128);
    const FullGradient g = full_gradient(w.target, {"wq", "wv"}, w.corpus.facts[fact].prompt, y);
    for (const auto& e : g.entries) {
        const Tensor& before = w.target.weight(e.layer, e.projection);
        const Tensor& after = o.params.weight(e.layer, e.projection);
        for (std::size_t i = 0; i < before.size(); ++i) {
            EXPECT_EQ(after[i], static_cast<float>(static_cast<double>(before[i]) - 0.2 * e.grad_W[i]));
        }
    }
}

TEST(UnlearnContract, DoublingEtaDoublesTheDelta) {
    const auto& w = small_world();
    for (Method m : {Method::r2f, Method::full_grad, Method::lora_single}) {
        const std::vector<std::size_t> one{w.corpus.target[2]};
        const UnlearnOutcome a = unlearn(context(), request(m, 0.25, one));
        const UnlearnOutcome b = unlearn(context(), request(m, 0.5, one));
        const Tensor base = updates_adapters(m) ? flatten_adapters(setup().adapters) : w.target.flatten();
        const Tensor ta = updates_adapters(m) ? flatten_adapters(a.adapters) : a.params.flatten();
        const Tensor tb = updates_adapters(m) ? flatten_adapters(b.adapters) : b.params.flatten();
        double worst = 0.0;
        for (std::size_t i = 0; i < base.size(); ++i) {
            const double da = static_cast<double>(ta[i]) - base[i];
            const double db = static_cast<double>(tb[i]) - base[i];
            // one f32 rounding per stored value
            const double ulp = 4.0 * std::numeric_limits<float>::epsilon() * (std::abs(base[i]) + std::abs(db));
            worst = std::max(worst, std::abs(db - 2.0 * da) / std::max(ulp, 1e-30));
        }
        EXPECT_LE(worst, 1.0) << method_name(m);
        EXPECT_NEAR(b.grad_norm, a.grad_norm, 1e-12 * a.grad_norm) << "the gradient does not depend on eta";
    }
}

TEST(UnlearnContract, SameRequestTwiceIsBitIdentical) {
    const UnlearnOutcome a = unlearn(context(), request(Method::r2f, 0.4));
    const UnlearnOutcome b = unlearn(context(), request(Method::r2f, 0.4));
    EXPECT_EQ(a.params.tensors, b.params.tensors);
    ASSERT_EQ(a.facts.size(), b.facts.size());
    for (std::size_t i = 0; i < a.facts.size(); ++i) {
        EXPECT_EQ(a.facts[i].p_after, b.facts[i].p_after);
        EXPECT_EQ(a.facts[i].views_used, b.facts[i].views_used);
        EXPECT_GE(a.facts[i].views_used, 1U);
        EXPECT_LE(a.facts[i].views_used, 5U);
    }
}

TEST(UnlearnEffect, CanonicalProbabilityDecreases) {
    const auto& w = small_world();
    const std::vector<std::size_t> one{w.corpus.target[0]};
    for (Method m : all_methods()) {
        const double eta = m == Method::grad_ascent ? 50.0 : m == Method::r2f ? 1.0 : 0.05;
        const UnlearnOutcome o = unlearn(context(), request(m, eta, one));
        ASSERT_EQ(o.facts.size(), 1U);
        EXPECT_LT(o.facts[0].p_after, o.facts[0].p_before) << method_name(m);
        EXPECT_GT(o.grad_norm, 0.0) << method_name(m);
    }
}

TEST(UnlearnErrors, IncompatibleDecoderRejected) {
    const auto& w = small_world();
    const AdapterSet other = attach_lora(w.target, 4, {"wq", "wv"}, kAdapterSeed + 1);
    UnlearnContext ctx = context();
    ctx.adapters = &other;
    ctx.adapter_seed = kAdapterSeed + 1;
    try {
        unlearn(ctx, request(Method::r2f, 0.1));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::incompatible);
    }
    ctx = context(nullptr);
    EXPECT_THROW(unlearn(ctx, request(Method::r2f, 0.1)), Error);
}

TEST(UnlearnErrors, BadRequestsRejected) {
    const auto& w = small_world();
    EXPECT_THROW(unlearn(context(), request(Method::full_grad, -1.0)), Error);
    UnlearnRequest r = request(Method::full_grad, 0.1);
    r.views = 0;
    EXPECT_THROW(unlearn(context(), r), Error);
    r = request(Method::full_grad, 0.1, {w.corpus.facts.size()});
    EXPECT_THROW(unlearn(context(), r), Error);
    r = request(Method::full_grad, 0.1, {w.corpus.target[0]});
    r.label = {UnlearnLabel::Kind::counterfactual, w.corpus.facts[w.corpus.target[0]].answer};
    EXPECT_THROW(unlearn(context(), r), Error);
}

TEST(UnlearnLabelTest, UniformOverAnswersAndCounterfactualOneHot) {
    const auto& w = small_world();
    const Tensor u = unlearning_label(w.corpus, {}, 128);
    const auto answers = w.corpus.answer_vocabulary();
    double total = 0.0;
    for (std::size_t i = 0; i < 128; ++i) {
        total += u[i];
        const bool in = std::find(answers.begin(), answers.end(), i) != answers.end();
        EXPECT_EQ(u[i], in ? 1.0F / static_cast<float>(answers.size()) : 0.0F);
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
    EXPECT_EQ(unlearning_label(w.corpus, {UnlearnLabel::Kind::counterfactual, 7}, 128), one_hot(7, 128));
}

TEST(MethodNames, RoundTrip) {
    for (Method m : all_methods()) EXPECT_EQ(parse_method(method_name(m)), m);
    EXPECT_THROW(parse_method("scrub"), Error);
}

TEST(EtaSweep, GridOfZeroSelectsZeroAndChangesNothing) {
    const auto& w = small_world();
    const EtaSweep s = eta_sweep(context(), request(Method::r2f, 0.0), {0.0}, w.corpus.target, w.corpus.retain, 2.0);
    ASSERT_EQ(s.rows.size(), 1U);
    EXPECT_EQ(s.selected, 0.0);
    EXPECT_EQ(s.rows[0].usr, 0.0);
    EXPECT_EQ(s.rows[0].gur_drop, 0.0);
    EXPECT_TRUE(s.budget_met);
}

TEST(EtaSweep, SingletonGridSelectsItsValue) {
    const auto& w = small_world();
    const EtaSweep s = eta_sweep(context(), request(Method::full_grad, 0.0), {0.03}, w.corpus.target, w.corpus.retain, 100.0);
    EXPECT_EQ(s.selected, 0.03);
}

TEST(EtaSweep, PicksLargestEtaWithinBudgetElseSmallestDrop) {
    const auto& w = small_world();
    const std::vector<double> grid{0.0, 1e-4, 100.0};
    const EtaSweep s = eta_sweep(context(), request(Method::full_grad, 0.0), grid, w.corpus.target, w.corpus.retain, 2.0);
    ASSERT_EQ(s.rows.size(), 3U);
    EXPECT_GT(s.rows[2].gur_drop, 2.0) << "a huge step should wreck the retain set";
    EXPECT_EQ(s.selected, 1e-4);
    EXPECT_TRUE(s.budget_met);

    const EtaSweep miss = eta_sweep(context(), request(Method::full_grad, 0.0), {100.0, 300.0}, w.corpus.target,
                                    w.corpus.retain, -1.0);
    EXPECT_FALSE(miss.budget_met);
    const auto best = std::min_element(miss.rows.begin(), miss.rows.end(),
                                       [](const EtaRow& a, const EtaRow& b) { return a.gur_drop < b.gur_drop; });
    EXPECT_EQ(miss.selected, best->eta);
}

TEST(EtaSweep, RejectsBadGrids) {
    const auto& w = small_world();
    EXPECT_THROW(eta_sweep(context(), request(Method::r2f, 0.0), {}, w.corpus.target, w.corpus.retain, 2.0), Error);
    EXPECT_THROW(eta_sweep(context(), request(Method::r2f, 0.0), {-1.0}, w.corpus.target, w.corpus.retain, 2.0), Error);
}

TEST(LogGrid, EndpointsAndSpacing) {
    const auto g = log_grid(1e-3, 1.0, 4);
    ASSERT_EQ(g.size(), 4U);
    EXPECT_DOUBLE_EQ(g[0], 1e-3);
    EXPECT_DOUBLE_EQ(g[1], 1e-2);
    EXPECT_DOUBLE_EQ(g[2], 1e-1);
    EXPECT_DOUBLE_EQ(g[3], 1.0);
    EXPECT_EQ(log_grid(0.5, 0.5, 1), std::vector<double>{0.5});
    EXPECT_THROW(log_grid(0.0, 1.0, 3), Error);
}
