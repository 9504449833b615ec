#include "dtu/cli.hpp"

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "dtu/config.hpp"
#include "dtu/data.hpp"
#include "dtu/gradcheck_suite.hpp"
#include "dtu/image_io.hpp"
#include "dtu/metrics.hpp"
#include "dtu/model.hpp"
#include "dtu/train.hpp"

namespace dtu {

namespace fs = std::filesystem;

namespace {

struct CommonOpts {
    std::string config_path;
    std::string out_dir;
    std::vector<std::string> overrides;  // section.key=value
};

std::string timestamp_dir() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", &tm);
    return std::string("runs/") + buf;
}

KVSections overrides_to_kv(const std::vector<std::string>& overrides) {
    KVSections out;
    for (const auto& o : overrides) {
        const size_t dot = o.find('.');
        const size_t eq = o.find('=');
        if (dot == std::string::npos || eq == std::string::npos || dot > eq) {
            throw ConfigError("override must look like section.key=value, got " + o);
        }
        out[o.substr(0, dot)][o.substr(dot + 1, eq - dot - 1)] = o.substr(eq + 1);
    }
    return out;
}

KVSections resolve_sections(const CommonOpts& opts) {
    KVSections kv;
    if (!opts.config_path.empty()) kv = parse_kv_file(opts.config_path);
    return merge_kv(std::move(kv), overrides_to_kv(opts.overrides));
}

void write_manifest(const std::string& dir, const KVSections& sections,
                    const std::vector<std::string>& args) {
    KVSections full = sections;
    std::ostringstream cmd;
    for (size_t i = 0; i < args.size(); ++i) {
        if (i) cmd << " ";
        cmd << args[i];
    }
    full["meta"]["tool_version"] = kToolVersion;
    full["meta"]["command"] = cmd.str();
    std::ofstream os(fs::path(dir) / "manifest.txt");
    if (!os) throw DataError("cannot write manifest in " + dir);
    write_kv(os, full);
}

Dataset load_dataset(const DataConfig& dcfg) {
    if (dcfg.synthetic_count > 0) {
        return generate_synthetic(dcfg.synthetic_count, dcfg.synthetic_size,
                                  dcfg.synthetic_classes, dcfg.seed);
    }
    if (dcfg.images_dir.empty() || dcfg.masks_dir.empty()) {
        throw ConfigError("no data source: set [data] images/masks or synthetic_count");
    }
    LoadReport report;
    Dataset data = load_directory(dcfg.images_dir, dcfg.masks_dir,
                                  parse_palette(dcfg.palette, dcfg.palette_tolerance), &report);
    if (!report.missing_masks.empty() || !report.missing_images.empty()) {
        std::cerr << report.to_string();
    }
    if (data.empty()) throw DataError("no samples loaded from " + dcfg.images_dir);
    return data;
}

// --------------------------------------------------------------------------
// train
// --------------------------------------------------------------------------

template <typename T>
int run_train(const KVSections& kv, const CommonOpts& opts,
              const std::vector<std::string>& args) {
    ModelConfig mcfg = model_config_from_kv(kv.count("model") ? kv.at("model") : KVSection{});
    TrainConfig tcfg = train_config_from_kv(kv.count("train") ? kv.at("train") : KVSection{});
    DataConfig dcfg = data_config_from_kv(kv.count("data") ? kv.at("data") : KVSection{});
    mcfg.validate();
    tcfg.validate();

    const std::string out = opts.out_dir.empty() ? timestamp_dir() : opts.out_dir;
    fs::create_directories(out);
    write_manifest(out, kv, args);

    Dataset data = load_dataset(dcfg);
    auto [train_set, eval_set] = split(data, {dcfg.train_fraction, dcfg.seed});
    std::cout << "train " << train_set.size() << " samples, eval " << eval_set.size()
              << " samples (split hash " << dataset_hash(train_set) << "/"
              << dataset_hash(eval_set) << ")\n";

    DATransUNet<T> model(mcfg);
    std::cout << "model parameters: " << model.registry().parameter_count() << "\n";
    OptimizerState<T> opt;
    RunRecord rec = fit(model, train_set, eval_set, tcfg, &opt);

    const std::string ckpt = (fs::path(out) / "checkpoint.ckpt").string();
    save_checkpoint(ckpt, model, tcfg, opt, tcfg.epochs);
    rec.checkpoint_path = ckpt;
    write_curves_csv((fs::path(out) / "curves.csv").string(), rec);

    std::ofstream rs(fs::path(out) / "record.txt");
    rs << "epochs " << rec.epoch_loss.size() << "\n";
    for (size_t i = 0; i < rec.epoch_loss.size(); ++i) {
        rs << "epoch " << (i + 1) << " loss " << rec.epoch_loss[i] << " seconds "
           << rec.epoch_seconds[i] << "\n";
    }
    if (!rec.evals.empty()) {
        const auto& last = rec.evals.back().report;
        rs << "final mean_dice " << last.mean_dice << " mean_hd95 " << last.mean_hd95 << "\n";
        std::cout << "final eval mean_dice " << last.mean_dice << " mean_hd95 "
                  << last.mean_hd95 << "\n";
        std::vector<std::pair<std::string, MetricsReport>> cases;
        write_metrics_csv((fs::path(out) / "metrics.csv").string(), cases, last);
    }
    std::cout << "wrote " << ckpt << "\n";
    return 0;
}

// --------------------------------------------------------------------------
// eval / predict
// --------------------------------------------------------------------------

template <typename T>
int run_eval(const std::string& ckpt_path, const KVSections& file_kv, const CommonOpts& opts,
             const std::vector<std::string>& args) {
    std::ifstream is(ckpt_path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint: " + ckpt_path);
    CheckpointHeader head = read_checkpoint_header(is);
    is.close();

    ModelConfig mcfg = model_config_from_kv(head.sections.at("model"));
    DATransUNet<T> model(mcfg);
    TrainConfig tcfg;
    load_checkpoint(ckpt_path, model, &tcfg, static_cast<OptimizerState<T>*>(nullptr), nullptr);

    KVSections kv = merge_kv(head.sections, file_kv);
    DataConfig dcfg = data_config_from_kv(kv.count("data") ? kv.at("data") : KVSection{});
    Dataset data = load_dataset(dcfg);

    const std::string out = opts.out_dir.empty() ? timestamp_dir() : opts.out_dir;
    fs::create_directories(out);
    write_manifest(out, kv, args);

    std::vector<std::pair<std::string, MetricsReport>> cases;
    std::vector<MetricsReport> reports;
    for (const auto& sample : data) {
        auto batch = resize_batch<T>(&sample, 1, mcfg.input_size);
        Tape<T> tape(false);
        Var<T> logits = model.forward(tape, tape.input(batch.images), Mode::eval());
        MetricsReport rep = evaluate_batch(logits.value(), batch.masks, mcfg.num_classes);
        cases.emplace_back(sample.id, rep);
        reports.push_back(std::move(rep));
    }
    MetricsReport summary = merge_reports(reports);
    write_metrics_csv((fs::path(out) / "metrics.csv").string(), cases, summary);
    std::cout << "evaluated " << data.size() << " cases: mean_dice " << summary.mean_dice
              << " mean_iou " << summary.mean_iou << " mean_hd95 " << summary.mean_hd95 << "\n";
    std::cout << "wrote " << (fs::path(out) / "metrics.csv").string() << "\n";
    return 0;
}

template <typename T>
int run_predict(const std::string& ckpt_path, const std::string& images_dir,
                const CommonOpts& opts, const std::vector<std::string>& args) {
    std::ifstream is(ckpt_path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint: " + ckpt_path);
    CheckpointHeader head = read_checkpoint_header(is);
    is.close();

    ModelConfig mcfg = model_config_from_kv(head.sections.at("model"));
    DATransUNet<T> model(mcfg);
    load_checkpoint(ckpt_path, model, static_cast<TrainConfig*>(nullptr),
                    static_cast<OptimizerState<T>*>(nullptr), nullptr);

    const std::string out = opts.out_dir.empty() ? timestamp_dir() : opts.out_dir;
    fs::create_directories(fs::path(out) / "masks");
    write_manifest(out, head.sections, args);

    size_t count = 0;
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(images_dir)) {
        if (!entry.is_regular_file()) continue;
        std::string ext = entry.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
        if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& file : files) {
        Tensor<float> image = read_image_rgb01(file.string());
        SegmentationSample sample{image, Tensor<int32_t>({image.dim(1), image.dim(2)}),
                                  file.stem().string()};
        auto batch = resize_batch<T>(&sample, 1, mcfg.input_size);
        Tape<T> tape(false);
        Var<T> logits = model.forward(tape, tape.input(batch.images), Mode::eval());
        Tensor<T> one({mcfg.num_classes, mcfg.input_size, mcfg.input_size});
        std::copy(logits.value().data(), logits.value().data() + one.numel(), one.data());
        Tensor<int32_t> mask = predict_mask(one);

        Tensor<float> resized({3, mcfg.input_size, mcfg.input_size});
        for (int64_t i = 0; i < resized.numel(); ++i)
            resized[i] = static_cast<float>(batch.images[i]);
        write_mask_png((fs::path(out) / "masks" / (sample.id + ".png")).string(), mask);
        write_overlay_png((fs::path(out) / "masks" / (sample.id + "_overlay.png")).string(),
                          resized, mask);
        count++;
    }
    if (count == 0) throw DataError("no images found in " + images_dir);
    std::cout << "wrote " << count << " mask/overlay pairs under " << out << "/masks\n";
    return 0;
}

// --------------------------------------------------------------------------
// synth / gradcheck / ablate
// --------------------------------------------------------------------------

int run_synth(int64_t count, int64_t size, int64_t classes, uint64_t seed,
              const CommonOpts& opts, const std::vector<std::string>& args) {
    const std::string out = opts.out_dir.empty() ? "synthetic" : opts.out_dir;
    fs::create_directories(fs::path(out) / "images");
    fs::create_directories(fs::path(out) / "masks");
    Dataset data = generate_synthetic(count, size, classes, seed);
    for (const auto& s : data) {
        write_image_png((fs::path(out) / "images" / (s.id + ".png")).string(), s.image);
        write_mask_png((fs::path(out) / "masks" / (s.id + ".png")).string(), s.mask);
    }
    // Matching palette: class ids are stored as gray levels.
    std::ostringstream pal;
    for (int64_t c = 0; c < classes; ++c) {
        if (c) pal << ";";
        pal << c << ":" << c;
    }
    KVSections kv;
    kv["data"]["images"] = (fs::path(out) / "images").string();
    kv["data"]["masks"] = (fs::path(out) / "masks").string();
    kv["data"]["palette"] = pal.str();
    kv["data"]["palette_tolerance"] = "0.5";
    kv["data"]["seed"] = std::to_string(seed);
    std::ofstream cfg(fs::path(out) / "dataset.cfg");
    write_kv(cfg, kv);
    write_manifest(out, kv, args);
    std::cout << "wrote " << data.size() << " samples under " << out << "\n";
    return 0;
}

int run_gradcheck(uint64_t seed) {
    GradSuiteResult result = run_gradcheck_suite(seed);
    std::cout << "check                    max_rel_err   tolerance   elements\n";
    for (const auto& c : result.checks) {
        std::cout.width(24);
        std::cout << std::left << c.name;
        std::cout << " " << std::scientific << c.max_rel_err << "  " << c.tolerance << "  "
                  << c.checked << (c.ok() ? "  ok" : "  FAIL") << "\n";
    }
    std::cout << "worst relative error: " << result.worst() << "\n";
    if (!result.ok()) {
        std::cerr << "gradient check breach\n";
        return 3;
    }
    return 0;
}

template <typename T>
int run_ablate_cmd(const std::string& axes_arg, const KVSections& kv, const CommonOpts& opts,
                   const std::vector<std::string>& args) {
    AblationAxes axes;
    if (axes_arg == "encoder,skip" || axes_arg == "encoder_skip") {
        axes = AblationAxes::kEncoderAndSkips;
    } else if (axes_arg == "skip-layers" || axes_arg == "skip_layers") {
        axes = AblationAxes::kSkipLayers;
    } else {
        throw ConfigError("--axes must be 'encoder,skip' or 'skip-layers', got " + axes_arg);
    }
    ModelConfig mcfg = model_config_from_kv(kv.count("model") ? kv.at("model") : KVSection{});
    TrainConfig tcfg = train_config_from_kv(kv.count("train") ? kv.at("train") : KVSection{});
    DataConfig dcfg = data_config_from_kv(kv.count("data") ? kv.at("data") : KVSection{});
    mcfg.validate();
    tcfg.validate();

    const std::string out = opts.out_dir.empty() ? timestamp_dir() : opts.out_dir;
    fs::create_directories(out);
    write_manifest(out, kv, args);

    Dataset data = load_dataset(dcfg);
    AblationResult result = run_ablation<T>(mcfg, tcfg, data, axes);
    const std::string csv = (fs::path(out) / "ablation.csv").string();
    write_ablation_csv(csv, result);
    std::cout << "ablation rows: " << result.rows.size() << " (split hash "
              << result.train_hash << "/" << result.eval_hash << ")\n";
    for (const auto& r : result.rows) {
        std::cout << "  " << r.label << ": DSC " << r.dsc << " HD " << r.hd95 << "\n";
    }
    std::cout << "wrote " << csv << "\n";
    return 0;
}

}  // namespace

int dispatch(const std::vector<std::string>& args) {
    CLI::App app{"DA-TransUNet: dual-attention transformer U-Net for image segmentation"};
    app.require_subcommand(1);

    CommonOpts opts;
    std::string ckpt_path, images_dir, axes_arg = "encoder,skip";
    int64_t synth_count = 16, synth_size = 64, synth_classes = 2;
    uint64_t seed = 7;

    auto add_common = [&](CLI::App* cmd, bool with_config = true) {
        if (with_config) cmd->add_option("--config", opts.config_path, "config file (key = value sections)");
        cmd->add_option("--out", opts.out_dir, "output directory (default runs/<timestamp>)");
        cmd->add_option("--set", opts.overrides, "override: section.key=value")->take_all();
    };

    CLI::App* train = app.add_subcommand("train", "train a model and write a checkpoint");
    add_common(train);
    CLI::App* evalc = app.add_subcommand("eval", "evaluate a checkpoint, write metrics CSV");
    add_common(evalc);
    evalc->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
    CLI::App* predict = app.add_subcommand("predict", "write mask/overlay PNGs for a directory");
    add_common(predict, false);
    predict->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
    predict->add_option("--images", images_dir, "directory of input images")->required();
    CLI::App* gradcheck = app.add_subcommand("gradcheck", "run the 64-bit finite-difference suite");
    gradcheck->add_option("--seed", seed, "RNG seed");
    // The suite pins its own toy shapes; a config is accepted (and validated)
    // so the same invocation form works across subcommands.
    gradcheck->add_option("--config", opts.config_path, "config file (validated, suite shapes are fixed)");
    CLI::App* ablate = app.add_subcommand("ablate", "run the DA on/off configuration matrix");
    add_common(ablate);
    ablate->add_option("--axes", axes_arg, "'encoder,skip' (4 rows) or 'skip-layers' (5 rows)");
    CLI::App* synth = app.add_subcommand("synth", "materialize a synthetic dataset");
    synth->add_option("--count", synth_count, "sample count");
    synth->add_option("--size", synth_size, "image size (multiple of 16)");
    synth->add_option("--classes", synth_classes, "class count including background");
    synth->add_option("--seed", seed, "RNG seed");
    synth->add_option("--out", opts.out_dir, "output directory");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {  // --help
            app.exit(e);
            return 0;
        }
        std::cerr << e.what() << "\n";
        return 1;
    }

    try {
        KVSections kv = resolve_sections(opts);
        const bool f64 =
            kv.count("model") ? precision_from_kv(kv.at("model")) : false;
        if (train->parsed()) {
            return f64 ? run_train<double>(kv, opts, args) : run_train<float>(kv, opts, args);
        }
        if (evalc->parsed()) {
            // Precision comes from the checkpoint header.
            std::ifstream is(ckpt_path, std::ios::binary);
            if (!is) throw DataError("cannot open checkpoint: " + ckpt_path);
            const bool ck64 = precision_from_kv(read_checkpoint_header(is).sections.at("model"));
            is.close();
            return ck64 ? run_eval<double>(ckpt_path, kv, opts, args)
                        : run_eval<float>(ckpt_path, kv, opts, args);
        }
        if (predict->parsed()) {
            std::ifstream is(ckpt_path, std::ios::binary);
            if (!is) throw DataError("cannot open checkpoint: " + ckpt_path);
            const bool ck64 = precision_from_kv(read_checkpoint_header(is).sections.at("model"));
            is.close();
            return ck64 ? run_predict<double>(ckpt_path, images_dir, opts, args)
                        : run_predict<float>(ckpt_path, images_dir, opts, args);
        }
        if (gradcheck->parsed()) return run_gradcheck(seed);
        if (ablate->parsed()) {
            return f64 ? run_ablate_cmd<double>(axes_arg, kv, opts, args)
                       : run_ablate_cmd<float>(axes_arg, kv, opts, args);
        }
        if (synth->parsed()) {
            return run_synth(synth_count, synth_size, synth_classes, seed, opts, args);
        }
        std::cerr << "no subcommand\n";
        return 1;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << "\n";
        return 2;
    } catch (const ShapeError& e) {
        std::cerr << "shape error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const ContractError& e) {
        std::cerr << "contract error: " << e.what() << "\n";
        return 3;
    }
}

}  // namespace dtu
