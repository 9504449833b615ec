#pragma once

#include <array>
#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "dtu/data.hpp"
#include "dtu/losses.hpp"
#include "dtu/model.hpp"

namespace dtu {

// Flat sectioned key = value configuration ([model] / [train] / [data]).
// '#' starts a comment; keys are case-sensitive; later duplicates win.
using KVSection = std::map<std::string, std::string>;
using KVSections = std::map<std::string, KVSection>;

KVSections parse_kv(std::istream& is);
KVSections parse_kv_file(const std::string& path);
void write_kv(std::ostream& os, const KVSections& sections);

// Merge overrides into base (section by section, key by key).
KVSections merge_kv(KVSections base, const KVSections& overrides);

bool parse_bool(const std::string& v);
std::vector<int64_t> parse_int_list(const std::string& v);
std::array<bool, 3> parse_bool3(const std::string& v);
Palette parse_palette(const std::string& v, double tolerance);

enum class OptKind { kSgd, kAdam };

struct TrainConfig {
    OptKind optimizer = OptKind::kAdam;
    double learning_rate = 1e-3;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int64_t batch_size = 4;
    int64_t epochs = 10;
    int64_t eval_every = 0;  // 0: evaluate only at the end
    uint64_t seed = 1;
    LossMode loss_mode = LossMode::kBinary;
    bool deterministic = true;
    double clip_norm = 0.0;  // 0: off
    double dice_smooth = 1.0;
    bool augment = false;  // random flip/rotate on training samples

    void validate() const {
        if (learning_rate < 0) throw ConfigError("learning_rate must be >= 0");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (epochs < 0) throw ConfigError("epochs must be >= 0");
        if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must be in [0,1)");
    }
};

struct DataConfig {
    std::string images_dir;
    std::string masks_dir;
    std::string palette = "0,0,0:0;255,255,255:1";
    double palette_tolerance = 32.0;
    int64_t synthetic_count = 0;  // > 0: generate instead of loading
    int64_t synthetic_size = 64;
    int64_t synthetic_classes = 2;
    uint64_t seed = 7;
    double train_fraction = 0.75;
};

struct Precision {
    bool use_f64 = false;
};

// Section (de)serialization; unknown keys raise ConfigError.
ModelConfig model_config_from_kv(const KVSection& kv);
KVSection model_config_to_kv(const ModelConfig& cfg, bool use_f64);
TrainConfig train_config_from_kv(const KVSection& kv);
KVSection train_config_to_kv(const TrainConfig& cfg);
DataConfig data_config_from_kv(const KVSection& kv);
KVSection data_config_to_kv(const DataConfig& cfg);
bool precision_from_kv(const KVSection& model_kv);  // true = f64

}  // namespace dtu
