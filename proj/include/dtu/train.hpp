#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dtu/config.hpp"
#include "dtu/data.hpp"
#include "dtu/losses.hpp"
#include "dtu/metrics.hpp"
#include "dtu/model.hpp"
#include "dtu/serialize.hpp"

namespace dtu {

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

template <typename T>
struct OptimizerState {
    OptKind kind = OptKind::kAdam;
    std::map<std::string, Tensor<T>> m;  // velocity (SGD) / first moment (Adam)
    std::map<std::string, Tensor<T>> v;  // second moment (Adam)
    int64_t step = 0;
};

// v <- mu*v + g + lambda*theta;  theta <- theta - eta*v
template <typename T>
void sgd_step(const std::vector<Parameter<T>*>& params, OptimizerState<T>& state,
              const TrainConfig& cfg) {
    state.step++;
    const T eta = static_cast<T>(cfg.learning_rate);
    const T mu = static_cast<T>(cfg.momentum);
    const T lambda = static_cast<T>(cfg.weight_decay);
    for (auto* p : params) {
        auto [it, fresh] = state.m.try_emplace(p->name, Tensor<T>(p->value.shape()));
        if (!same_shape(it->second, p->value)) {
            throw ShapeError("sgd_step: state shape " + shape_str(it->second.shape()) +
                             " does not match parameter " + p->name);
        }
        T* vel = it->second.data();
        T* theta = p->value.data();
        const T* g = p->grad.data();
        for (int64_t i = 0; i < p->value.numel(); ++i) {
            vel[i] = mu * vel[i] + g[i] + lambda * theta[i];
            theta[i] -= eta * vel[i];
        }
    }
}

// Standard biased-moment Adam with bias correction; beta1 is the configured
// momentum, beta2 = 0.999, eps = 1e-8; weight decay folded into the gradient.
template <typename T>
void adam_step(const std::vector<Parameter<T>*>& params, OptimizerState<T>& state,
               const TrainConfig& cfg) {
    state.step++;
    const T eta = static_cast<T>(cfg.learning_rate);
    const T beta1 = static_cast<T>(cfg.momentum);
    const T beta2 = T(0.999);
    const T eps = T(1e-8);
    const T lambda = static_cast<T>(cfg.weight_decay);
    const T bc1 = T(1) - std::pow(beta1, static_cast<T>(state.step));
    const T bc2 = T(1) - std::pow(beta2, static_cast<T>(state.step));
    for (auto* p : params) {
        auto [mit, f1] = state.m.try_emplace(p->name, Tensor<T>(p->value.shape()));
        auto [vit, f2] = state.v.try_emplace(p->name, Tensor<T>(p->value.shape()));
        T* m = mit->second.data();
        T* v = vit->second.data();
        T* theta = p->value.data();
        const T* g = p->grad.data();
        for (int64_t i = 0; i < p->value.numel(); ++i) {
            const T gi = g[i] + lambda * theta[i];
            m[i] = beta1 * m[i] + (T(1) - beta1) * gi;
            v[i] = beta2 * v[i] + (T(1) - beta2) * gi * gi;
            const T mhat = m[i] / bc1;
            const T vhat = v[i] / bc2;
            theta[i] -= eta * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

template <typename T>
void optimizer_step(const std::vector<Parameter<T>*>& params, OptimizerState<T>& state,
                    const TrainConfig& cfg) {
    if (cfg.optimizer == OptKind::kSgd) sgd_step(params, state, cfg);
    else adam_step(params, state, cfg);
}

template <typename T>
double global_grad_norm(const std::vector<Parameter<T>*>& params) {
    double acc = 0;
    for (auto* p : params)
        for (int64_t i = 0; i < p->grad.numel(); ++i)
            acc += static_cast<double>(p->grad[i]) * static_cast<double>(p->grad[i]);
    return std::sqrt(acc);
}

template <typename T>
void clip_gradients(const std::vector<Parameter<T>*>& params, double max_norm) {
    if (max_norm <= 0) return;
    const double norm = global_grad_norm(params);
    if (norm <= max_norm) return;
    const T s = static_cast<T>(max_norm / norm);
    for (auto* p : params)
        for (int64_t i = 0; i < p->grad.numel(); ++i) p->grad[i] *= s;
}

// ---------------------------------------------------------------------------
// Checkpoints: config header + named-tensor blob (parameters, buffers,
// optimizer moments). Round-trips are bitwise.
// ---------------------------------------------------------------------------

template <typename T>
void save_checkpoint(const std::string& path, DATransUNet<T>& model,
                     const TrainConfig& train_cfg, const OptimizerState<T>& opt,
                     int64_t epoch) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open checkpoint for writing: " + path);
    os << "DTU-CKPT v1\n";
    KVSections head;
    head["model"] = model_config_to_kv(model.cfg, sizeof(T) == 8);
    head["train"] = train_config_to_kv(train_cfg);
    head["state"]["step"] = std::to_string(opt.step);
    head["state"]["epoch"] = std::to_string(epoch);
    write_kv(os, head);
    os << "[tensors]\n";

    Registry<T> reg = model.registry();
    std::vector<std::pair<std::string, const Tensor<T>*>> tensors;
    for (const auto& e : reg.entries()) tensors.emplace_back(e.name, e.value);
    for (const auto& [name, t] : opt.m) tensors.emplace_back("opt.m." + name, &t);
    for (const auto& [name, t] : opt.v) tensors.emplace_back("opt.v." + name, &t);
    save_tensors(os, tensors);
}

struct CheckpointHeader {
    KVSections sections;
    std::streampos tensor_start = 0;
};

inline CheckpointHeader read_checkpoint_header(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line != "DTU-CKPT v1") {
        throw CheckpointError("bad checkpoint magic: " + line);
    }
    std::ostringstream head;
    while (std::getline(is, line)) {
        if (line == "[tensors]") {
            std::istringstream hs(head.str());
            return {parse_kv(hs), is.tellg()};
        }
        head << line << "\n";
    }
    throw CheckpointError("checkpoint has no [tensors] section");
}

// Loads tensors into the model (and optimizer state when present). Every
// model tensor must be present with a matching shape.
template <typename T>
void load_checkpoint(const std::string& path, DATransUNet<T>& model, TrainConfig* train_cfg,
                     OptimizerState<T>* opt, int64_t* epoch) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint: " + path);
    CheckpointHeader head = read_checkpoint_header(is);

    const ModelConfig stored = model_config_from_kv(head.sections.at("model"));
    // Anything that changes parameter shapes or meaning must match.
    auto stored_kv = model_config_to_kv(stored, sizeof(T) == 8);
    auto current_kv = model_config_to_kv(model.cfg, sizeof(T) == 8);
    for (const auto& [k, v] : stored_kv) {
        if (k == "seed" || k == "dropout") continue;
        if (current_kv.at(k) != v) {
            throw CheckpointError("checkpoint model." + k + " = " + v +
                                  " is incompatible with current " + k + " = " + current_kv.at(k));
        }
    }
    if (train_cfg) *train_cfg = train_config_from_kv(head.sections.at("train"));
    if (epoch) *epoch = std::stoll(head.sections.at("state").at("epoch"));

    auto tensors = load_tensors<T>(is);
    Registry<T> reg = model.registry();
    for (const auto& e : reg.entries()) {
        auto it = tensors.find(e.name);
        if (it == tensors.end()) throw CheckpointError("checkpoint is missing tensor " + e.name);
        if (it->second.shape() != e.value->shape()) {
            throw CheckpointError("checkpoint tensor " + e.name + " has shape " +
                                  shape_str(it->second.shape()) + ", model expects " +
                                  shape_str(e.value->shape()));
        }
        std::copy(it->second.data(), it->second.data() + it->second.numel(), e.value->data());
    }
    if (opt) {
        opt->step = std::stoll(head.sections.at("state").at("step"));
        opt->m.clear();
        opt->v.clear();
        for (auto& [name, t] : tensors) {
            if (name.rfind("opt.m.", 0) == 0) opt->m.emplace(name.substr(6), t);
            else if (name.rfind("opt.v.", 0) == 0) opt->v.emplace(name.substr(6), t);
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EvalSnapshot {
    int64_t epoch = 0;
    MetricsReport report;
};

struct RunRecord {
    std::vector<double> epoch_loss;
    std::vector<double> epoch_primary;
    std::vector<double> epoch_dice_loss;
    std::vector<double> epoch_seconds;
    std::vector<EvalSnapshot> evals;
    std::string checkpoint_path;
    uint64_t train_hash = 0;
    uint64_t eval_hash = 0;
};

template <typename T>
MetricsReport evaluate_dataset(DATransUNet<T>& model, const Dataset& data, int64_t batch_size) {
    std::vector<MetricsReport> reports;
    for (size_t start = 0; start < data.size(); start += static_cast<size_t>(batch_size)) {
        const size_t count = std::min(static_cast<size_t>(batch_size), data.size() - start);
        auto batch = resize_batch<T>(data.data() + start, count, model.cfg.input_size);
        Tape<T> tape(/*grad_enabled=*/false);
        Var<T> image = tape.input(batch.images);
        Var<T> logits = model.forward(tape, image, Mode::eval());
        reports.push_back(
            evaluate_batch(logits.value(), batch.masks, model.cfg.num_classes));
    }
    return merge_reports(reports);
}

// Minibatch gradient descent with the combined objective. Deterministic:
// shuffling and dropout derive from cfg.seed only.
template <typename T>
RunRecord fit(DATransUNet<T>& model, const Dataset& train_set, const Dataset& eval_set,
              const TrainConfig& cfg, OptimizerState<T>* opt_in = nullptr,
              int64_t start_epoch = 0) {
    cfg.validate();
    if (train_set.empty()) throw DataError("fit: empty training set");
    Registry<T> reg = model.registry();
    auto params = reg.parameters();
    OptimizerState<T> local_opt;
    OptimizerState<T>& opt = opt_in ? *opt_in : local_opt;
    opt.kind = cfg.optimizer;

    RunRecord rec;
    rec.train_hash = dataset_hash(train_set);
    rec.eval_hash = dataset_hash(eval_set);

    // Shuffle draws are replayed for completed epochs; dropout and
    // augmentation streams are re-seeded per epoch. Both make a resumed run
    // continue the uninterrupted trajectory exactly.
    std::mt19937_64 shuffle_rng(cfg.seed);
    for (int64_t e = 0; e < start_epoch; ++e) {
        std::vector<size_t> idx(train_set.size());
        std::iota(idx.begin(), idx.end(), size_t{0});
        std::shuffle(idx.begin(), idx.end(), shuffle_rng);
    }

    for (int64_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<size_t> idx(train_set.size());
        std::iota(idx.begin(), idx.end(), size_t{0});
        std::shuffle(idx.begin(), idx.end(), shuffle_rng);
        std::mt19937_64 aug_rng(cfg.seed ^ (0xa5a5ull + static_cast<uint64_t>(epoch)));
        std::mt19937_64 dropout_rng(cfg.seed ^
                                    (0x9e3779b97f4a7c15ull + static_cast<uint64_t>(epoch)));

        double loss_sum = 0, primary_sum = 0, dice_sum = 0;
        int64_t batches = 0;
        for (size_t start = 0; start < idx.size(); start += static_cast<size_t>(cfg.batch_size)) {
            const size_t count = std::min(static_cast<size_t>(cfg.batch_size), idx.size() - start);
            std::vector<SegmentationSample> samples;
            samples.reserve(count);
            for (size_t i = 0; i < count; ++i) {
                const SegmentationSample& s = train_set[idx[start + i]];
                samples.push_back(cfg.augment ? augment_flip_rotate(s, aug_rng) : s);
            }
            auto batch = resize_batch<T>(samples.data(), count, model.cfg.input_size);

            Tape<T> tape;
            Var<T> image = tape.input(batch.images);
            Mode mode = Mode::train(&dropout_rng);
            Var<T> logits = model.forward(tape, image, mode);
            LossParts<T> loss =
                combined_loss(tape, logits, batch.masks, cfg.loss_mode,
                              static_cast<T>(cfg.dice_smooth));
            const double lv = static_cast<double>(loss.total.value()[0]);
            if (!std::isfinite(lv)) {
                std::ostringstream os;
                os << "non-finite loss " << lv << " at epoch " << epoch << ", batch " << batches
                   << " (grad norm " << global_grad_norm(params) << ")";
                throw NumericError(os.str());
            }
            loss_sum += lv;
            primary_sum += static_cast<double>(loss.primary.value()[0]);
            dice_sum += static_cast<double>(loss.dice.value()[0]);

            reg.zero_grad();
            tape.backward(loss.total);
            clip_gradients(params, cfg.clip_norm);
            optimizer_step(params, opt, cfg);
            batches++;
        }
        rec.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
        rec.epoch_primary.push_back(primary_sum / static_cast<double>(batches));
        rec.epoch_dice_loss.push_back(dice_sum / static_cast<double>(batches));
        rec.epoch_seconds.push_back(
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());

        const bool last = epoch + 1 == cfg.epochs;
        if (!eval_set.empty() &&
            ((cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0) || last)) {
            rec.evals.push_back({epoch + 1, evaluate_dataset(model, eval_set, cfg.batch_size)});
        }
    }
    return rec;
}

inline void write_curves_csv(const std::string& path, const RunRecord& rec) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write curves: " + path);
    os << "epoch,loss,primary,dice_loss,seconds,eval_mean_dice,eval_mean_iou,eval_mean_hd95\n";
    for (size_t i = 0; i < rec.epoch_loss.size(); ++i) {
        os << (i + 1) << "," << rec.epoch_loss[i] << "," << rec.epoch_primary[i] << ","
           << rec.epoch_dice_loss[i] << "," << rec.epoch_seconds[i];
        const EvalSnapshot* snap = nullptr;
        for (const auto& e : rec.evals)
            if (e.epoch == static_cast<int64_t>(i + 1)) snap = &e;
        if (snap) {
            os << "," << snap->report.mean_dice << "," << snap->report.mean_iou << ","
               << snap->report.mean_hd95;
        } else {
            os << ",,,";
        }
        os << "\n";
    }
}

inline void write_metrics_csv(const std::string& path,
                              const std::vector<std::pair<std::string, MetricsReport>>& cases,
                              const MetricsReport& summary) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write metrics: " + path);
    os << "case,class,iou,dice,hd,hd95,tp,fp,fn,hd_sentinels,both_empty\n";
    for (const auto& [id, rep] : cases) {
        for (const auto& c : rep.per_class) {
            os << id << "," << c.cls << "," << c.iou << "," << c.dice << "," << c.hd << ","
               << c.hd95 << "," << c.tp << "," << c.fp << "," << c.fn << ","
               << c.sentinel_slices << "," << c.both_empty_slices << "\n";
        }
    }
    for (const auto& c : summary.per_class) {
        os << "ALL," << c.cls << "," << c.iou << "," << c.dice << "," << c.hd << "," << c.hd95
           << "," << c.tp << "," << c.fp << "," << c.fn << "," << c.sentinel_slices << ","
           << c.both_empty_slices << "\n";
    }
    os << "MEAN,-," << summary.mean_iou << "," << summary.mean_dice << "," << summary.mean_hd
       << "," << summary.mean_hd95 << ",-,-,-,-,-\n";
}

// ---------------------------------------------------------------------------
// Ablation runner (the encoder/skip configuration matrices)
// ---------------------------------------------------------------------------

enum class AblationAxes { kEncoderAndSkips, kSkipLayers };

struct AblationRow {
    std::string label;
    bool encoder_da = false;
    std::array<bool, 3> skip_da{false, false, false};
    double dsc = 0.0;
    double hd95 = 0.0;
    double final_loss = 0.0;
};

struct AblationResult {
    AblationAxes axes = AblationAxes::kEncoderAndSkips;
    std::vector<AblationRow> rows;
    uint64_t train_hash = 0;
    uint64_t eval_hash = 0;
    uint64_t seed = 0;
};

// Trains/evaluates one configuration per row under a shared seed and split.
template <typename T>
AblationResult run_ablation(const ModelConfig& base, const TrainConfig& tcfg,
                            const Dataset& data, AblationAxes axes) {
    std::vector<AblationRow> rows;
    if (axes == AblationAxes::kEncoderAndSkips) {
        rows = {{"baseline", false, {false, false, false}},
                {"skip_da", false, {true, true, true}},
                {"encoder_da", true, {false, false, false}},
                {"encoder_and_skip_da", true, {true, true, true}}};
    } else {
        const bool enc = base.enable_encoder_da;
        rows = {{"none", enc, {false, false, false}},
                {"layer1", enc, {true, false, false}},
                {"layer2", enc, {false, true, false}},
                {"layer3", enc, {false, false, true}},
                {"all_layers", enc, {true, true, true}}};
    }

    auto [train_set, eval_set] = split(data, {0.75, tcfg.seed});
    AblationResult result;
    result.axes = axes;
    result.train_hash = dataset_hash(train_set);
    result.eval_hash = dataset_hash(eval_set);
    result.seed = tcfg.seed;

    for (auto& row : rows) {
        ModelConfig cfg = base;
        cfg.enable_encoder_da = row.encoder_da;
        cfg.enable_skip_da = row.skip_da;
        DATransUNet<T> model(cfg);
        RunRecord rec = fit(model, train_set, eval_set, tcfg);
        if (!rec.evals.empty()) {
            row.dsc = rec.evals.back().report.mean_dice;
            row.hd95 = rec.evals.back().report.mean_hd95;
        }
        if (!rec.epoch_loss.empty()) row.final_loss = rec.epoch_loss.back();
        result.rows.push_back(row);
    }
    return result;
}

inline void write_ablation_csv(const std::string& path, const AblationResult& result) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write ablation table: " + path);
    auto onoff = [](bool b) { return b ? "yes" : "no"; };
    if (result.axes == AblationAxes::kEncoderAndSkips) {
        os << "row,encoder_da,skip_da,DSC,HD\n";
        for (const auto& r : result.rows) {
            os << r.label << "," << onoff(r.encoder_da) << ","
               << onoff(r.skip_da[0] && r.skip_da[1] && r.skip_da[2]) << "," << r.dsc << ","
               << r.hd95 << "\n";
        }
    } else {
        os << "row,layer1,layer2,layer3,DSC,HD\n";
        for (const auto& r : result.rows) {
            os << r.label << "," << onoff(r.skip_da[0]) << "," << onoff(r.skip_da[1]) << ","
               << onoff(r.skip_da[2]) << "," << r.dsc << "," << r.hd95 << "\n";
        }
    }
    os << "# train_hash=" << result.train_hash << " eval_hash=" << result.eval_hash
       << " seed=" << result.seed << "\n";
}

}  // namespace dtu
