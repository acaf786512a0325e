#include <gtest/gtest.h>
#include <png.h>

#include <filesystem>

#include "dipt/datagen.hpp"
#include "dipt/prompts.hpp"

using namespace dipt;
namespace fs = std::filesystem;

namespace {

SyntheticStreamConfig small_stream() {
    SyntheticStreamConfig cfg;
    cfg.counts = {64, 16, 48};
    cfg.source_samples = 64;
    cfg.seed = 11;
    return cfg;
}

fs::path temp_dir(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("dipt_test_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void write_gray_png(const fs::path& path, std::size_t size) {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(size);
    img.height = static_cast<png_uint_32>(size);
    img.format = PNG_FORMAT_GRAY;
    std::vector<png_byte> buf(size * size, 128);
    ASSERT_TRUE(png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr));
}

}  // namespace

TEST(Generate, DeterministicForSeed) {
    const auto cfg = small_stream();
    const auto a = make_stream(cfg), b = make_stream(cfg);
    for (std::size_t d = 0; d < a.num_domains(); ++d) EXPECT_EQ(a.test(d), b.test(d));
    auto other = cfg;
    other.seed = 12;
    EXPECT_NE(make_stream(other).test(0), a.test(0));
    EXPECT_EQ(make_source(cfg), make_source(cfg));
}

TEST(Generate, ShapesRangesAndBalance) {
    const auto cfg = small_stream();
    const auto stream = make_stream(cfg);
    EXPECT_EQ(stream.num_train(), 4u);
    EXPECT_EQ(stream.num_heldout(), 1u);
    for (std::size_t d = 0; d < stream.num_domains(); ++d) {
        const auto& test = stream.test(d);
        ASSERT_EQ(test.size(), cfg.counts.test);
        std::size_t ones = 0;
        for (std::size_t i = 0; i < test.size(); ++i) {
            const auto& img = test.images[i];
            ASSERT_EQ(img.height, 32u);
            ASSERT_EQ(img.channels, 3u);
            for (float p : img.pixels) {
                ASSERT_GE(p, 0.0f);
                ASSERT_LE(p, 1.0f);
            }
            ones += test.labels[i] == 1;
        }
        const double frac = double(ones) / double(test.size());
        EXPECT_GE(frac, 0.4);
        EXPECT_LE(frac, 0.6);
        EXPECT_EQ(stream.heldout(d), d >= 4);
    }
    EXPECT_TRUE(stream.val(4).empty());
}

TEST(Generate, SplitsAreDisjoint) {
    const auto stream = make_stream(small_stream());
    auto s = stream;
    s.begin_step(0);
    const auto& train = s.train(0);
    for (const auto& t : stream.test(0).images)
        for (const auto& x : train.images) ASSERT_FALSE(t == x);
}

TEST(Generate, DomainsAreStyleSeparable) {
    // Each domain's test images retrieve that domain's training key most of the time.
    auto cfg = small_stream();
    auto stream = make_stream(cfg);
    BackboneConfig bc;
    PromptBank<float> bank(bc, 1);
    Rng rng(1);
    for (std::size_t d = 0; d < stream.num_train(); ++d) {
        stream.begin_step(d);
        bank.append_entry(average_amplitude(stream.train(d).images, int(d + 1)), init_prompt(PromptKind::dsp, bc, 1, rng));
    }
    for (std::size_t d = 0; d < stream.num_train(); ++d) {
        std::size_t hit = 0;
        for (const auto& img : stream.test(d).images) hit += select_dsp(bank, fft2(img).amplitude) == d;
        EXPECT_GE(double(hit) / double(stream.test(d).size()), 0.9) << "domain " << d;
    }
}

TEST(Generate, RejectsBadInputs) {
    Rng rng(2);
    EXPECT_THROW(gen_domain(style_at(0.5, "x", 1), ContentRule{}, 8, 30, rng), DataError);
    auto spec = style_at(0.5, "x", 1);
    spec.noise_std = -1;
    EXPECT_THROW(gen_domain(spec, ContentRule{}, 8, 32, rng), DataError);
    SyntheticStreamConfig cfg;
    cfg.num_train_domains = 0;
    EXPECT_THROW(make_stream(cfg), DataError);
}

TEST(Isolation, TrainingSplitReadableOnlyWhileActive) {
    auto stream = make_stream(small_stream());
    EXPECT_THROW(stream.train(0), IsolationError);
    EXPECT_THROW(stream.begin_step(1), IsolationError);
    stream.begin_step(0);
    EXPECT_NO_THROW(stream.train(0));
    EXPECT_THROW(stream.train(1), IsolationError);
    stream.begin_step(1);
    EXPECT_THROW(stream.train(0), IsolationError);
    EXPECT_NO_THROW(stream.test(0));
    EXPECT_NO_THROW(stream.val(0));
    EXPECT_NO_THROW(stream.test(4));
    EXPECT_THROW(stream.begin_step(3), IsolationError);
    EXPECT_THROW(stream.begin_step(4), IsolationError);
    EXPECT_EQ(stream.violations(), 3u);
    ASSERT_EQ(stream.train_reads().size(), 1u);
    EXPECT_EQ(stream.train_reads()[0].domain, 0u);
    stream.restart();
    EXPECT_NO_THROW(stream.begin_step(0));
}

TEST(Png, RoundTripQuantizes) {
    const auto dir = temp_dir("png");
    Rng rng(3);
    Image img(8, 12, 3);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (auto& p : img.pixels) p = u(rng);
    write_png(dir / "a.png", img);
    const auto back = read_png(dir / "a.png");
    ASSERT_EQ(back.height, 8u);
    ASSERT_EQ(back.width, 12u);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) EXPECT_NEAR(back.pixels[i], img.pixels[i], 0.5 / 255 + 1e-6);
    fs::remove_all(dir);
}

TEST(Png, GrayscaleAndMissingRejected) {
    const auto dir = temp_dir("gray");
    write_gray_png(dir / "g.png", 8);
    EXPECT_THROW(read_png(dir / "g.png"), ImageIoError);
    EXPECT_THROW(read_png(dir / "none.png"), ImageIoError);
    fs::remove_all(dir);
}

TEST(Png, ResizeCropKeepsConstantImages) {
    Image img(20, 40, 3, 0.25f);
    const auto out = resize_crop(img, 16);
    EXPECT_EQ(out.height, 16u);
    EXPECT_EQ(out.width, 16u);
    for (float p : out.pixels) EXPECT_NEAR(p, 0.25f, 1e-6);
}

TEST(Folder, ExportIngestRoundTrip) {
    const auto dir = temp_dir("folder");
    Rng rng(4);
    const auto data = gen_domain(style_at(0.25, "x", 5), ContentRule{}, 12, 32, rng);
    export_png_tree(data, dir, {"absent", "present"});
    const auto loaded = ingest_folder(dir, 32);
    EXPECT_EQ(loaded.classes, (std::vector<std::string>{"absent", "present"}));
    ASSERT_EQ(loaded.data.size(), data.size());
    std::size_t ones = 0, want = 0;
    for (auto l : loaded.data.labels) ones += l == 1;
    for (auto l : data.labels) want += l == 1;
    EXPECT_EQ(ones, want);
    EXPECT_THROW(ingest_folder(dir / "absent" / "missing", 32), DataError);
    fs::remove_all(dir);
}
