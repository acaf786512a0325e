#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dipt/backbone.hpp"
#include "dipt/datagen.hpp"
#include "dipt/trainer.hpp"

namespace dipt {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ExperimentConfig {
    BackboneConfig backbone;
    PretrainOptions pretrain;
    std::uint64_t pretrain_seed = 0;
    TrainConfig train;
    SyntheticStreamConfig stream;
    std::vector<std::uint64_t> seeds{0, 1, 2};
    std::string out = "runs/default";

    void validate() const {
        try {
            backbone.validate();
            train.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
        if (backbone.image_size != stream.image_size) throw ConfigError("backbone.image_size must equal stream.image_size");
        if (backbone.channels != 3) throw ConfigError("backbone.channels must be 3 (RGB)");
        if (!detail::is_power_of_two(stream.image_size)) throw ConfigError("stream.image_size must be a power of two");
        if (stream.num_train_domains == 0) throw ConfigError("stream.num_train_domains must be positive");
        if (seeds.empty()) throw ConfigError("seeds must not be empty");
        if (pretrain.batch_size == 0 || !(pretrain.learning_rate > 0)) throw ConfigError("pretrain batch_size and lr must be positive");
        if (!(pretrain.warmup_fraction >= 0 && pretrain.warmup_fraction <= 1)) throw ConfigError("pretrain warmup_fraction must lie in [0, 1]");
    }
};

namespace detail {

// Reads known keys from an object and rejects anything else.
class StrictObject {
public:
    StrictObject(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
    }

    template <class V>
    void get(const char* key, V& target) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            target = j_.at(key).get<V>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError(path_ + "." + key + ": wrong type");
        }
    }

    StrictObject child(const char* key) {
        seen_.insert(key);
        static const nlohmann::json empty = nlohmann::json::object();
        return StrictObject(j_.contains(key) ? j_.at(key) : empty, path_ + "." + key);
    }

    void finish() const {
        for (const auto& [key, value] : j_.items()) {
            if (!seen_.count(key)) throw ConfigError(path_ + ": unknown key '" + key + "'");
        }
    }

private:
    const nlohmann::json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

}  // namespace detail

inline ExperimentConfig parse_config(const nlohmann::json& j) {
    ExperimentConfig c;
    detail::StrictObject root(j, "config");
    {
        auto b = root.child("backbone");
        b.get("image_size", c.backbone.image_size);
        b.get("patch_size", c.backbone.patch_size);
        b.get("channels", c.backbone.channels);
        b.get("embed_dim", c.backbone.embed_dim);
        b.get("depth", c.backbone.depth);
        b.get("heads", c.backbone.heads);
        b.get("mlp_ratio", c.backbone.mlp_ratio);
        b.get("num_classes", c.backbone.num_classes);
        b.get("dip_layers", c.backbone.dip_layers);
        b.get("dsp_layers", c.backbone.dsp_layers);
        b.finish();
    }
    {
        auto p = root.child("pretrain");
        p.get("epochs", c.pretrain.epochs);
        p.get("batch_size", c.pretrain.batch_size);
        p.get("lr", c.pretrain.learning_rate);
        p.get("warmup_fraction", c.pretrain.warmup_fraction);
        p.get("seed", c.pretrain_seed);
        p.finish();
    }
    {
        auto t = root.child("train");
        t.get("epochs_step1", c.train.epochs_step1);
        t.get("epochs_dsp", c.train.epochs_dsp);
        t.get("epochs_gat", c.train.epochs_gat);
        t.get("batch_size", c.train.batch_size);
        t.get("lr_step1", c.train.lr_step1);
        t.get("lr_later", c.train.lr_later);
        t.get("lr_dsp", c.train.lr_dsp);
        t.get("l_half", c.train.l_half);
        t.finish();
    }
    {
        auto s = root.child("stream");
        s.get("num_train_domains", c.stream.num_train_domains);
        s.get("num_heldout", c.stream.num_heldout);
        s.get("train", c.stream.counts.train);
        s.get("val", c.stream.counts.val);
        s.get("test", c.stream.counts.test);
        s.get("image_size", c.stream.image_size);
        s.get("source_samples", c.stream.source_samples);
        s.get("seed", c.stream.seed);
        auto r = s.child("rule");
        r.get("cluster_blobs", c.stream.rule.cluster_blobs);
        r.get("cluster_radius", c.stream.rule.cluster_radius);
        r.get("distractors_min", c.stream.rule.distractors_min);
        r.get("distractors_max", c.stream.rule.distractors_max);
        r.get("blob_radius_min", c.stream.rule.blob_radius_min);
        r.get("blob_radius_max", c.stream.rule.blob_radius_max);
        r.get("distractor_gap", c.stream.rule.distractor_gap);
        r.get("background", c.stream.rule.background);
        r.get("blob_intensity", c.stream.rule.blob_intensity);
        r.finish();
        s.finish();
    }
    root.get("seeds", c.seeds);
    root.get("out", c.out);
    root.finish();
    c.validate();
    return c;
}

inline nlohmann::json config_json(const ExperimentConfig& c) {
    const auto& r = c.stream.rule;
    return {
        {"backbone",
         {{"image_size", c.backbone.image_size}, {"patch_size", c.backbone.patch_size}, {"channels", c.backbone.channels},
          {"embed_dim", c.backbone.embed_dim}, {"depth", c.backbone.depth}, {"heads", c.backbone.heads},
          {"mlp_ratio", c.backbone.mlp_ratio}, {"num_classes", c.backbone.num_classes},
          {"dip_layers", c.backbone.dip_layers}, {"dsp_layers", c.backbone.dsp_layers}}},
        {"pretrain",
         {{"epochs", c.pretrain.epochs}, {"batch_size", c.pretrain.batch_size}, {"lr", c.pretrain.learning_rate},
          {"warmup_fraction", c.pretrain.warmup_fraction}, {"seed", c.pretrain_seed}}},
        {"train",
         {{"epochs_step1", c.train.epochs_step1}, {"epochs_dsp", c.train.epochs_dsp}, {"epochs_gat", c.train.epochs_gat},
          {"batch_size", c.train.batch_size}, {"lr_step1", c.train.lr_step1}, {"lr_later", c.train.lr_later},
          {"lr_dsp", c.train.lr_dsp}, {"l_half", c.train.l_half}}},
        {"stream",
         {{"num_train_domains", c.stream.num_train_domains}, {"num_heldout", c.stream.num_heldout},
          {"train", c.stream.counts.train}, {"val", c.stream.counts.val}, {"test", c.stream.counts.test},
          {"image_size", c.stream.image_size}, {"source_samples", c.stream.source_samples},
          {"seed", c.stream.seed},
          {"rule",
           {{"cluster_blobs", r.cluster_blobs}, {"cluster_radius", r.cluster_radius},
            {"distractors_min", r.distractors_min}, {"distractors_max", r.distractors_max},
            {"blob_radius_min", r.blob_radius_min}, {"blob_radius_max", r.blob_radius_max},
            {"distractor_gap", r.distractor_gap}, {"background", r.background}, {"blob_intensity", r.blob_intensity}}}}},
        {"seeds", c.seeds},
        {"out", c.out}};
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return parse_config(j);
}

/// The stream used by run seed `seed`: same styles family, data drawn per seed.
inline SyntheticStreamConfig stream_for_seed(const SyntheticStreamConfig& base, std::uint64_t seed) {
    auto s = base;
    s.seed = mix_seed(base.seed, 1000 + seed);
    return s;
}

}  // namespace dipt
