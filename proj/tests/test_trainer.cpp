#include <gtest/gtest.h>

#include "dipt/config.hpp"
#include "dipt/datagen.hpp"
#include "dipt/trainer.hpp"

using namespace dipt;

namespace {

BackboneConfig tiny_backbone() {
    BackboneConfig c;
    c.image_size = 16;
    c.patch_size = 4;
    c.embed_dim = 16;
    c.depth = 4;
    c.heads = 2;
    c.mlp_ratio = 2;
    c.dip_layers = {1, 2};
    c.dsp_layers = {3, 4};
    return c;
}

SyntheticStreamConfig tiny_stream() {
    SyntheticStreamConfig s;
    s.num_train_domains = 3;
    s.num_heldout = 1;
    s.counts = {24, 8, 16};
    s.image_size = 16;
    s.rule.cluster_radius = 2.0;
    s.rule.distractor_gap = 4.0;
    s.seed = 5;
    return s;
}

TrainConfig tiny_train() {
    TrainConfig t;
    t.epochs_step1 = 1;
    t.epochs_dsp = 1;
    t.epochs_gat = 1;
    t.batch_size = 8;
    t.l_half = 2;
    t.seed = 3;
    return t;
}

VisionTransformer<float> fresh_model() {
    Rng rng(1);
    VisionTransformer<float> m(tiny_backbone(), rng);
    m.freeze_trunk();
    return m;
}

// Shared across tests; the stream is cheap but the run is not.
struct TinyRun {
    DomainStream stream = make_stream(tiny_stream());
    VisionTransformer<float> model = fresh_model();
    DilResult<float> result = run_dil(model, stream, tiny_train());
};

const TinyRun& tiny_run() {
    static const TinyRun run;
    return run;
}

}  // namespace

TEST(RunDil, BankGrowsOneEntryPerStep) {
    const auto& r = tiny_run().result;
    EXPECT_EQ(r.bank.time_step(), 3u);
    ASSERT_EQ(r.audit.entries.size(), 3u);
    for (std::size_t t = 0; t < 3; ++t) EXPECT_EQ(r.audit.entries[t].size(), t + 1);
    ASSERT_EQ(r.theta.size(), 3u);
    const double step = r.theta[1] - r.theta[0];
    EXPECT_GT(step, 0.0);
    EXPECT_DOUBLE_EQ(r.theta[2] - r.theta[1], step);
    EXPECT_TRUE(r.bank.dip().has_value());
}

TEST(RunDil, FrozenPartsNeverChange) {
    const auto& r = tiny_run().result;
    for (auto sum : r.audit.trunk) EXPECT_EQ(sum, r.audit.trunk_before);
    for (auto sum : r.audit.head) EXPECT_EQ(sum, r.audit.head.front());
    for (std::size_t t = 1; t < r.audit.entries.size(); ++t)
        for (std::size_t j = 0; j < t; ++j) EXPECT_EQ(r.audit.entries[t][j], r.audit.entries[t - 1][j]) << "entry " << j;
}

TEST(RunDil, RespectsIsolation) {
    const auto& run = tiny_run();
    EXPECT_EQ(run.result.audit.isolation_violations, 0u);
    for (const auto& a : run.stream.train_reads()) EXPECT_EQ(a.step, a.domain);
}

TEST(RunDil, AccuracyMatrixIsWellFormed) {
    const auto& R = tiny_run().result.R;
    EXPECT_EQ(R.steps, 3u);
    EXPECT_EQ(R.domains, 4u);
    EXPECT_NO_THROW(R.validate());
}

TEST(RunDil, DeterministicForSeed) {
    auto stream = make_stream(tiny_stream());
    auto model = fresh_model();
    const auto again = run_dil(model, stream, tiny_train(), RunOptions{3, {}});
    const auto& first = tiny_run().result;
    EXPECT_EQ(again.R.values, first.R.values);
    EXPECT_EQ(again.audit.entries, first.audit.entries);
    EXPECT_EQ(prompt_checksum(*again.bank.dip()), prompt_checksum(*first.bank.dip()));
}

TEST(Inference, BatchedMatchesSingleAndThreadCount) {
    const auto& run = tiny_run();
    const auto& test = run.stream.test(1);
    const auto one = infer_all(run.model, run.result.bank, test, 1, 5);
    EXPECT_EQ(infer_all(run.model, run.result.bank, test, 4, 5), one);
    EXPECT_EQ(infer_all(run.model, run.result.bank, test, 2, 64), one);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(infer(run.model, run.result.bank, test.images[i]), one[i]);
}

TEST(Inference, EmptyBankRejected) {
    const auto model = fresh_model();
    PromptBank<float> bank(model.config(), 2);
    EXPECT_THROW(infer(model, bank, Image(16, 16, 3)), BankError);
}

TEST(RunDil, FailureNamesTheStep) {
    auto cfg = tiny_stream();
    auto good = make_stream(cfg);
    std::vector<DomainData> domains;
    for (std::size_t d = 0; d < good.num_domains(); ++d) {
        DomainData dd{good.spec(d), {}, good.val(d), good.test(d), good.heldout(d)};
        if (d < good.num_train()) {
            good.restart();
            for (std::size_t k = 0; k <= d; ++k) good.begin_step(k);
            dd.train = good.train(d);
        }
        domains.push_back(std::move(dd));
    }
    domains[1].train = Dataset{};
    DomainStream broken(std::move(domains), cfg.num_train_domains);
    auto model = fresh_model();
    try {
        run_dil(model, broken, tiny_train());
        FAIL() << "expected StepError";
    } catch (const StepError& e) {
        EXPECT_EQ(e.step(), 2u);
    }
}

TEST(Baseline, FixedMemoryAndWellFormed) {
    auto stream = make_stream(tiny_stream());
    auto model = fresh_model();
    const auto trunk = model.trunk_checksum();
    const auto r = baseline_seq_finetune(model, stream, tiny_train());
    ASSERT_EQ(r.theta.size(), 3u);
    EXPECT_EQ(r.theta.front(), r.theta.back());
    EXPECT_NO_THROW(r.R.validate());
    EXPECT_EQ(model.trunk_checksum(), trunk);
    EXPECT_EQ(stream.violations(), 0u);
}

TEST(Augment, DoublesDataAndKeepsLabels) {
    auto stream = make_stream(tiny_stream());
    stream.begin_step(0);
    const auto& data = stream.train(0);
    const std::vector<AmplitudeKey> keys{average_amplitude(data.images, 1)};
    Rng rng(2);
    const auto aug = with_style_augmented(data, keys, rng);
    ASSERT_EQ(aug.size(), 2 * data.size());
    for (std::size_t i = 0; i < data.size(); ++i) EXPECT_EQ(aug.labels[data.size() + i], data.labels[i]);
}

TEST(Config, ParsesRoundTripAndRejectsUnknownKeys) {
    ExperimentConfig c;
    c.train.epochs_gat = 3;
    c.stream.counts.train = 100;
    const auto parsed = parse_config(config_json(c));
    EXPECT_EQ(parsed.train.epochs_gat, 3u);
    EXPECT_EQ(parsed.stream.counts.train, 100u);
    EXPECT_EQ(config_json(parsed), config_json(c));
    auto j = config_json(c);
    j["train"]["epochs"] = 5;
    EXPECT_THROW(parse_config(j), ConfigError);
    j = config_json(c);
    j["train"]["lr_step1"] = "fast";
    EXPECT_THROW(parse_config(j), ConfigError);
    j = config_json(c);
    j["stream"]["image_size"] = 24;
    EXPECT_THROW(parse_config(j), ConfigError);
    EXPECT_THROW(load_config("/nonexistent/config.json"), ConfigError);
}
