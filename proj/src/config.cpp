#include "dtu/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace dtu {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace

KVSections parse_kv(std::istream& is) {
    KVSections out;
    std::string line, section = "";
    size_t lineno = 0;
    while (std::getline(is, line)) {
        lineno++;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') {
                throw ConfigError("config line " + std::to_string(lineno) +
                                  ": unterminated section header");
            }
            section = trim(line.substr(1, line.size() - 2));
            out[section];
            continue;
        }
        const size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        }
        out[section][trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return out;
}

KVSections parse_kv_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    return parse_kv(f);
}

void write_kv(std::ostream& os, const KVSections& sections) {
    for (const auto& [name, kv] : sections) {
        os << "[" << name << "]\n";
        for (const auto& [k, v] : kv) os << k << " = " << v << "\n";
        os << "\n";
    }
}

KVSections merge_kv(KVSections base, const KVSections& overrides) {
    for (const auto& [sec, kv] : overrides)
        for (const auto& [k, v] : kv) base[sec][k] = v;
    return base;
}

bool parse_bool(const std::string& v) {
    std::string s = v;
    std::transform(s.begin(), s.end(), s.begin(), ::tolower);
    if (s == "1" || s == "true" || s == "yes" || s == "on") return true;
    if (s == "0" || s == "false" || s == "no" || s == "off") return false;
    throw ConfigError("not a boolean: " + v);
}

std::vector<int64_t> parse_int_list(const std::string& v) {
    std::vector<int64_t> out;
    std::istringstream is(v);
    std::string tok;
    while (std::getline(is, tok, ',')) {
        tok = trim(tok);
        if (tok.empty()) continue;
        out.push_back(std::stoll(tok));
    }
    return out;
}

std::array<bool, 3> parse_bool3(const std::string& v) {
    std::array<bool, 3> out{};
    std::istringstream is(v);
    std::string tok;
    size_t i = 0;
    while (std::getline(is, tok, ',')) {
        if (i >= 3) throw ConfigError("expected exactly 3 booleans: " + v);
        out[i++] = parse_bool(trim(tok));
    }
    if (i != 3) throw ConfigError("expected exactly 3 booleans: " + v);
    return out;
}

// "r,g,b:cls;r,g,b:cls" or shorthand "gray:cls;..." for replicated channels.
Palette parse_palette(const std::string& v, double tolerance) {
    Palette pal;
    pal.tolerance = tolerance;
    std::istringstream is(v);
    std::string entry;
    while (std::getline(is, entry, ';')) {
        entry = trim(entry);
        if (entry.empty()) continue;
        const size_t colon = entry.find(':');
        if (colon == std::string::npos) throw ConfigError("palette entry needs color:class, got " + entry);
        const auto nums = parse_int_list(entry.substr(0, colon));
        const int64_t cls = std::stoll(trim(entry.substr(colon + 1)));
        PaletteEntry pe;
        pe.cls = static_cast<int32_t>(cls);
        if (nums.size() == 1) {
            pe.color = {static_cast<uint8_t>(nums[0]), static_cast<uint8_t>(nums[0]),
                        static_cast<uint8_t>(nums[0])};
        } else if (nums.size() == 3) {
            pe.color = {static_cast<uint8_t>(nums[0]), static_cast<uint8_t>(nums[1]),
                        static_cast<uint8_t>(nums[2])};
        } else {
            throw ConfigError("palette color needs 1 or 3 components: " + entry);
        }
        pal.entries.push_back(pe);
    }
    if (pal.entries.empty()) throw ConfigError("empty palette: " + v);
    return pal;
}

namespace {

template <typename F>
void take(KVSection& kv, const std::string& key, F apply) {
    auto it = kv.find(key);
    if (it == kv.end()) return;
    apply(it->second);
    kv.erase(it);
}

void reject_leftovers(const KVSection& kv, const std::string& section) {
    if (!kv.empty()) {
        throw ConfigError("unknown key '" + kv.begin()->first + "' in [" + section + "]");
    }
}

}  // namespace

ModelConfig model_config_from_kv(const KVSection& in) {
    KVSection kv = in;
    ModelConfig c;
    take(kv, "precision", [&](const std::string&) {});  // handled by precision_from_kv
    take(kv, "in_channels", [&](const std::string& v) { c.in_channels = std::stoll(v); });
    take(kv, "num_classes", [&](const std::string& v) { c.num_classes = std::stoll(v); });
    take(kv, "input_size", [&](const std::string& v) { c.input_size = std::stoll(v); });
    take(kv, "stem_channels", [&](const std::string& v) {
        auto l = parse_int_list(v);
        if (l.size() != 4) throw ConfigError("stem_channels needs 4 entries");
        std::copy(l.begin(), l.end(), c.stem_channels.begin());
    });
    take(kv, "transformer_hidden", [&](const std::string& v) { c.transformer_hidden = std::stoll(v); });
    take(kv, "transformer_layers", [&](const std::string& v) { c.transformer_layers = std::stoll(v); });
    take(kv, "transformer_heads", [&](const std::string& v) { c.transformer_heads = std::stoll(v); });
    take(kv, "mlp_dim", [&](const std::string& v) { c.mlp_dim = std::stoll(v); });
    take(kv, "da_reduction", [&](const std::string& v) { c.da_reduction = std::stoll(v); });
    take(kv, "pam_qk_reduction", [&](const std::string& v) { c.pam_qk_reduction = std::stoll(v); });
    take(kv, "enable_encoder_da", [&](const std::string& v) { c.enable_encoder_da = parse_bool(v); });
    take(kv, "enable_skip_da", [&](const std::string& v) { c.enable_skip_da = parse_bool3(v); });
    take(kv, "decoder_channels", [&](const std::string& v) {
        auto l = parse_int_list(v);
        if (l.size() != 3) throw ConfigError("decoder_channels needs 3 entries");
        std::copy(l.begin(), l.end(), c.decoder_channels.begin());
    });
    take(kv, "neck_channels", [&](const std::string& v) { c.neck_channels = std::stoll(v); });
    take(kv, "dropout", [&](const std::string& v) { c.dropout = std::stod(v); });
    take(kv, "seed", [&](const std::string& v) { c.seed = std::stoull(v); });
    reject_leftovers(kv, "model");
    return c;
}

KVSection model_config_to_kv(const ModelConfig& c, bool use_f64) {
    KVSection kv;
    auto list4 = [](const std::array<int64_t, 4>& a) {
        return std::to_string(a[0]) + "," + std::to_string(a[1]) + "," + std::to_string(a[2]) +
               "," + std::to_string(a[3]);
    };
    auto list3 = [](const std::array<int64_t, 3>& a) {
        return std::to_string(a[0]) + "," + std::to_string(a[1]) + "," + std::to_string(a[2]);
    };
    auto bool3 = [](const std::array<bool, 3>& a) {
        auto b = [](bool v) { return v ? std::string("true") : std::string("false"); };
        return b(a[0]) + "," + b(a[1]) + "," + b(a[2]);
    };
    kv["precision"] = use_f64 ? "f64" : "f32";
    kv["in_channels"] = std::to_string(c.in_channels);
    kv["num_classes"] = std::to_string(c.num_classes);
    kv["input_size"] = std::to_string(c.input_size);
    kv["stem_channels"] = list4(c.stem_channels);
    kv["transformer_hidden"] = std::to_string(c.transformer_hidden);
    kv["transformer_layers"] = std::to_string(c.transformer_layers);
    kv["transformer_heads"] = std::to_string(c.transformer_heads);
    kv["mlp_dim"] = std::to_string(c.mlp_dim);
    kv["da_reduction"] = std::to_string(c.da_reduction);
    kv["pam_qk_reduction"] = std::to_string(c.pam_qk_reduction);
    kv["enable_encoder_da"] = c.enable_encoder_da ? "true" : "false";
    kv["enable_skip_da"] = bool3(c.enable_skip_da);
    kv["decoder_channels"] = list3(c.decoder_channels);
    kv["neck_channels"] = std::to_string(c.neck_channels);
    kv["dropout"] = std::to_string(c.dropout);
    kv["seed"] = std::to_string(c.seed);
    return kv;
}

TrainConfig train_config_from_kv(const KVSection& in) {
    KVSection kv = in;
    TrainConfig c;
    take(kv, "optimizer", [&](const std::string& v) {
        if (v == "sgd") c.optimizer = OptKind::kSgd;
        else if (v == "adam") c.optimizer = OptKind::kAdam;
        else throw ConfigError("optimizer must be sgd or adam, got " + v);
    });
    take(kv, "learning_rate", [&](const std::string& v) { c.learning_rate = std::stod(v); });
    take(kv, "momentum", [&](const std::string& v) { c.momentum = std::stod(v); });
    take(kv, "weight_decay", [&](const std::string& v) { c.weight_decay = std::stod(v); });
    take(kv, "batch_size", [&](const std::string& v) { c.batch_size = std::stoll(v); });
    take(kv, "epochs", [&](const std::string& v) { c.epochs = std::stoll(v); });
    take(kv, "eval_every", [&](const std::string& v) { c.eval_every = std::stoll(v); });
    take(kv, "seed", [&](const std::string& v) { c.seed = std::stoull(v); });
    take(kv, "loss", [&](const std::string& v) {
        if (v == "binary") c.loss_mode = LossMode::kBinary;
        else if (v == "multiclass") c.loss_mode = LossMode::kMulticlass;
        else throw ConfigError("loss must be binary or multiclass, got " + v);
    });
    take(kv, "deterministic", [&](const std::string& v) { c.deterministic = parse_bool(v); });
    take(kv, "clip_norm", [&](const std::string& v) { c.clip_norm = std::stod(v); });
    take(kv, "dice_smooth", [&](const std::string& v) { c.dice_smooth = std::stod(v); });
    take(kv, "augment", [&](const std::string& v) { c.augment = parse_bool(v); });
    reject_leftovers(kv, "train");
    return c;
}

KVSection train_config_to_kv(const TrainConfig& c) {
    KVSection kv;
    kv["optimizer"] = c.optimizer == OptKind::kSgd ? "sgd" : "adam";
    kv["learning_rate"] = std::to_string(c.learning_rate);
    kv["momentum"] = std::to_string(c.momentum);
    kv["weight_decay"] = std::to_string(c.weight_decay);
    kv["batch_size"] = std::to_string(c.batch_size);
    kv["epochs"] = std::to_string(c.epochs);
    kv["eval_every"] = std::to_string(c.eval_every);
    kv["seed"] = std::to_string(c.seed);
    kv["loss"] = loss_mode_name(c.loss_mode);
    kv["deterministic"] = c.deterministic ? "true" : "false";
    kv["clip_norm"] = std::to_string(c.clip_norm);
    kv["dice_smooth"] = std::to_string(c.dice_smooth);
    kv["augment"] = c.augment ? "true" : "false";
    return kv;
}

DataConfig data_config_from_kv(const KVSection& in) {
    KVSection kv = in;
    DataConfig c;
    take(kv, "images", [&](const std::string& v) { c.images_dir = v; });
    take(kv, "masks", [&](const std::string& v) { c.masks_dir = v; });
    take(kv, "palette", [&](const std::string& v) { c.palette = v; });
    take(kv, "palette_tolerance", [&](const std::string& v) { c.palette_tolerance = std::stod(v); });
    take(kv, "synthetic_count", [&](const std::string& v) { c.synthetic_count = std::stoll(v); });
    take(kv, "synthetic_size", [&](const std::string& v) { c.synthetic_size = std::stoll(v); });
    take(kv, "synthetic_classes", [&](const std::string& v) { c.synthetic_classes = std::stoll(v); });
    take(kv, "seed", [&](const std::string& v) { c.seed = std::stoull(v); });
    take(kv, "train_fraction", [&](const std::string& v) { c.train_fraction = std::stod(v); });
    reject_leftovers(kv, "data");
    return c;
}

KVSection data_config_to_kv(const DataConfig& c) {
    KVSection kv;
    if (!c.images_dir.empty()) kv["images"] = c.images_dir;
    if (!c.masks_dir.empty()) kv["masks"] = c.masks_dir;
    kv["palette"] = c.palette;
    kv["palette_tolerance"] = std::to_string(c.palette_tolerance);
    kv["synthetic_count"] = std::to_string(c.synthetic_count);
    kv["synthetic_size"] = std::to_string(c.synthetic_size);
    kv["synthetic_classes"] = std::to_string(c.synthetic_classes);
    kv["seed"] = std::to_string(c.seed);
    kv["train_fraction"] = std::to_string(c.train_fraction);
    return kv;
}

bool precision_from_kv(const KVSection& model_kv) {
    auto it = model_kv.find("precision");
    if (it == model_kv.end()) return false;
    if (it->second == "f64") return true;
    if (it->second == "f32") return false;
    throw ConfigError("precision must be f32 or f64, got " + it->second);
}

}  // namespace dtu
