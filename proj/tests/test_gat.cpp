#include <gtest/gtest.h>

#include <random>

#include "dipt/diffcore/grad_check.hpp"
#include "dipt/gat.hpp"
#include "oracles.hpp"

using namespace dipt;

namespace {

BasicTensor<double> random_vec(Shape s, Rng& rng, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    std::vector<double> v(numel(s));
    for (auto& x : v) x = n(rng);
    return BasicTensor<double>(std::move(s), std::move(v));
}

std::vector<double> vec(const BasicTensor<double>& t) { return {t.data().begin(), t.data().end()}; }

BackboneConfig tiny_config() {
    BackboneConfig c;
    c.image_size = 8;
    c.patch_size = 4;
    c.embed_dim = 8;
    c.depth = 3;
    c.heads = 2;
    c.mlp_ratio = 2;
    c.dip_layers = {1};
    c.dsp_layers = {2};
    return c;
}

}  // namespace

TEST(Gat, InitIsNearIdentityWithZeroAttention) {
    Rng rng(1);
    const auto p = init_gat<double>(6, rng);
    EXPECT_EQ(p.W.shape(), (Shape{6, 6}));
    EXPECT_EQ(p.a.shape(), (Shape{12}));
    for (std::size_t r = 0; r < 6; ++r)
        for (std::size_t c = 0; c < 6; ++c) EXPECT_NEAR(p.W.at(r * 6 + c), r == c ? 1.0 : 0.0, 0.06);
    for (double v : p.a.data()) EXPECT_EQ(v, 0.0);
    EXPECT_THROW(init_gat<double>(0, rng), std::invalid_argument);
}

class GatOracle : public ::testing::TestWithParam<int> {};

TEST_P(GatOracle, MatchesScalarLoops) {
    Rng rng(100 + GetParam());
    const std::size_t L = 3 + GetParam() % 5, t = 1 + GetParam() % 4;
    GATParams<double> p{random_vec({L, L}, rng, 0.5), random_vec({2 * L}, rng), 0.2};
    PromptGraph<double> g{random_vec({L}, rng), {}};
    for (std::size_t j = 0; j < t; ++j) g.dsp.push_back(random_vec({L}, rng));
    std::vector<std::vector<double>> dsp;
    for (const auto& d : g.dsp) dsp.push_back(vec(d));
    const auto want = oracle::gat(vec(p.W), vec(p.a), vec(g.dip), dsp, 0.2);

    const auto e = coefficients(p, g);
    ASSERT_EQ(e.shape(), (Shape{t + 1}));
    const auto alpha = normalize(e);
    double total = 0;
    for (std::size_t i = 0; i <= t; ++i) {
        EXPECT_NEAR(e.at(i), want.e[i], 1e-10);
        EXPECT_NEAR(alpha.at(i), want.alpha[i], 1e-12);
        EXPECT_GT(alpha.at(i), 0.0);
        total += alpha.at(i);
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
    const auto refined = refine(p, g);
    ASSERT_EQ(refined.shape(), (Shape{L}));
    for (std::size_t i = 0; i < L; ++i) EXPECT_NEAR(refined.at(i), want.refined[i], 1e-10);
}

INSTANTIATE_TEST_SUITE_P(Random, GatOracle, ::testing::Range(0, 12));

TEST(Gat, ZeroAttentionAveragesTransformedNodes) {
    Rng rng(2);
    const std::size_t L = 4;
    auto p = init_gat<double>(L, rng);
    PromptGraph<double> g{random_vec({L}, rng), {random_vec({L}, rng), random_vec({L}, rng)}};
    const auto alpha = normalize(coefficients(p, g));
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(alpha.at(i), 1.0 / 3.0, 1e-12);
}

TEST(Gat, GradientsMatchFiniteDifferences) {
    Rng rng(3);
    const std::size_t L = 5;
    const auto W0 = random_vec({L, L}, rng, 0.5), a0 = random_vec({2 * L}, rng);
    PromptGraph<double> g{random_vec({L}, rng), {random_vec({L}, rng), random_vec({L}, rng)}};
    const auto weights = random_vec({L}, rng);
    const std::function<BasicTensor<double>(const BasicTensor<double>&)> by_w = [&](const BasicTensor<double>& W) {
        return sum(mul(refine(GATParams<double>{W, a0, 0.2}, g), weights));
    };
    const std::function<BasicTensor<double>(const BasicTensor<double>&)> by_a = [&](const BasicTensor<double>& a) {
        return sum(mul(refine(GATParams<double>{W0, a, 0.2}, g), weights));
    };
    EXPECT_LT(grad_check<double>(by_w, W0, 1e-5), 1e-5);
    EXPECT_LT(grad_check<double>(by_a, a0, 1e-5), 1e-5);
}

TEST(Gat, NonFiniteCoefficientsRejected) {
    const BasicTensor<double> e({2}, {1.0, std::numeric_limits<double>::quiet_NaN()});
    EXPECT_THROW(normalize(e), std::domain_error);
}

TEST(Gat, GraphShapeMismatchRejected) {
    Rng rng(4);
    auto p = init_gat<double>(4, rng);
    PromptGraph<double> g{random_vec({4}, rng), {random_vec({5}, rng)}};
    EXPECT_THROW(refine(p, g), ShapeError);
    PromptGraph<double> empty{random_vec({4}, rng), {}};
    EXPECT_THROW(refine(p, empty), std::invalid_argument);
}

TEST(Gat, TrainingLeavesBankAndModelUntouched) {
    const auto c = tiny_config();
    Rng rng(5);
    VisionTransformer<float> model(c, rng);
    model.freeze_trunk();
    model.freeze_head();
    PromptBank<float> bank(c, 2);
    Dataset data;
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (int i = 0; i < 16; ++i) {
        Image img(8, 8, 3);
        for (auto& v : img.pixels) v = u(rng);
        data.push_back(std::move(img), i % 2);
    }
    const auto key = average_amplitude(data.images, 1);
    bank.append_entry(key, init_prompt(PromptKind::dsp, c, 2, rng));
    const auto prev_dip = init_prompt(PromptKind::dip, c, 2, rng);
    bank.set_dip(prev_dip);
    bank.append_entry(key, init_prompt(PromptKind::dsp, c, 2, rng));

    const auto sums = std::vector<std::uint64_t>{bank.entry_checksum(0), bank.entry_checksum(1)};
    const auto dip_sum = prompt_checksum(*bank.dip());
    const auto trunk = model.trunk_checksum(), head = model.head_checksum();

    auto params = init_gat<float>(flat_length(c.dip_layers.size(), 2, c.embed_dim), rng);
    const auto graph = make_graph(*bank.dip(), bank);
    EXPECT_EQ(graph.size(), 2u);
    const auto before = gat_loss(params, graph, bank, model, data);
    const auto result = train_gat<float>(params, graph, bank, model, [&](std::size_t) { return data; },
                                         GatTrainOptions{20, 16, 1e-2}, rng);
    EXPECT_EQ(result.epoch_loss.size(), 20u);
    EXPECT_LT(gat_loss(params, graph, bank, model, data), before);
    EXPECT_EQ(bank.entry_checksum(0), sums[0]);
    EXPECT_EQ(bank.entry_checksum(1), sums[1]);
    EXPECT_EQ(prompt_checksum(*bank.dip()), dip_sum);
    EXPECT_EQ(model.trunk_checksum(), trunk);
    EXPECT_EQ(model.head_checksum(), head);
    EXPECT_EQ(result.dip.blocks.size(), c.dip_layers.size());

    // Zero epochs returns the refine output of the initial parameters.
    auto fresh = init_gat<float>(params.length(), rng);
    const auto expected = prompt_checksum(refine_prompt(fresh, graph, bank));
    const auto untrained = train_gat<float>(fresh, graph, bank, model, [&](std::size_t) { return data; },
                                            GatTrainOptions{0, 8, 1e-2}, rng);
    EXPECT_EQ(prompt_checksum(untrained.dip), expected);
}

TEST(Gat, HandEvaluatedCases) {
    const std::size_t L = 4;
    auto eye = BasicTensor<double>({L, L}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
    const BasicTensor<double> u({L}, {1, 0, 0, 0}), w({L}, {0, 2, 0, 4});
    GATParams<double> p{eye, BasicTensor<double>({2 * L}, {1, 1, 1, 1, 0, 0, 0, 0}), 0.2};
    EXPECT_DOUBLE_EQ(coefficients(p, PromptGraph<double>{u, {w}}).at(0), 1.0);
    // identical nodes share a coefficient
    const auto same = coefficients(p, PromptGraph<double>{u, {u}});
    EXPECT_EQ(same.at(0), same.at(1));
    // a = 0: uniform weights, refine averages the nodes
    GATParams<double> flat{eye, BasicTensor<double>::zeros({2 * L}), 0.2};
    const auto zero = coefficients(flat, PromptGraph<double>{u, {w, w}});
    for (double e : zero.data()) EXPECT_EQ(e, 0.0);
    const auto avg = refine(flat, PromptGraph<double>{u, {w}});
    for (std::size_t i = 0; i < L; ++i) EXPECT_DOUBLE_EQ(avg.at(i), (u.at(i) + w.at(i)) / 2);
    const auto equal = refine(p, PromptGraph<double>{w, {w, w}});
    for (std::size_t i = 0; i < L; ++i) EXPECT_NEAR(equal.at(i), w.at(i), 1e-12);
    // saturation and uniform softmax
    EXPECT_GT(normalize(BasicTensor<double>({3}, {20, 0, 0})).at(0), 0.999);
    const auto uniform = normalize(BasicTensor<double>({4}, {0.3, 0.3, 0.3, 0.3}));
    for (double a : uniform.data()) EXPECT_NEAR(a, 0.25, 1e-12);
}
