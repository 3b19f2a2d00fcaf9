#include "focalconv/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include <CLI11.hpp>
#include <json.hpp>

#include "focalconv/data.hpp"
#include "focalconv/engine.hpp"
#include "focalconv/gradcheck.hpp"
#include "focalconv/model.hpp"
#include "focalconv/profiler.hpp"

namespace focalconv::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";

struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

const std::vector<std::string> kEngineSetKeys = {"lr", "momentum", "epochs", "batch_size"};

bool is_model_key(const std::string& key) {
    static const std::vector<std::string> keys = {
        "stage_depths", "stage_channels", "stem_channels", "focal_levels",   "focal_kernels",
        "num_classes",  "input_size",     "expansion_ratio", "se_ratio",
        "gates_per_channel", "use_residual", "use_pre_norm", "use_out_proj", "stem_norm_act"};
    return std::find(keys.begin(), keys.end(), key) != keys.end();
}

json parse_set_value(const std::string& raw) {
    try {
        return json::parse(raw);
    } catch (const json::exception&) {
        return json(raw);  // unquoted strings stay strings
    }
}

// Precedence: flag > file > default.
struct ResolvedConfig {
    ModelConfig model;
    json engine_overrides = json::object();
};

ResolvedConfig resolve_config(const std::string& config_path,
                              const std::vector<std::string>& sets) {
    json merged = json::parse(ModelConfig().to_json());
    if (!config_path.empty()) {
        std::ifstream is(config_path);
        if (!is) throw ConfigError("config: cannot open " + config_path);
        json file;
        try {
            file = json::parse(is);
        } catch (const json::exception& e) {
            throw ConfigError(config_path + ": invalid JSON: " + e.what());
        }
        if (!file.is_object()) throw ConfigError(config_path + ": top level must be an object");
        for (const auto& [key, value] : file.items()) {
            if (!is_model_key(key)) throw ConfigError(config_path + ": unknown key \"" + key + "\"");
            merged[key] = value;
        }
    }

    ResolvedConfig out;
    for (const auto& kv : sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos || eq == 0) {
            throw UsageError("--set expects key=value, got \"" + kv + "\"");
        }
        const std::string key = kv.substr(0, eq);
        const json value = parse_set_value(kv.substr(eq + 1));
        if (is_model_key(key)) {
            merged[key] = value;
        } else if (std::find(kEngineSetKeys.begin(), kEngineSetKeys.end(), key) !=
                   kEngineSetKeys.end()) {
            out.engine_overrides[key] = value;
        } else {
            throw UsageError("--set: \"" + key + "\" is not a model or engine field");
        }
    }
    out.model = ModelConfig::from_json(merged.dump());
    return out;
}

void write_run_json(const std::string& output_dir, const std::string& command,
                    const std::vector<std::string>& argv, const ModelConfig& config,
                    std::uint64_t seed) {
    if (output_dir.empty()) return;
    fs::create_directories(output_dir);
    json j;
    j["command"] = command;
    j["argv"] = argv;
    j["config"] = json::parse(config.to_json());
    j["seed"] = seed;
    j["versions"] = {{"focalconv", kVersion}, {"tensor_file", 1}, {"checkpoint", 1}};
    j["flag_precedence"] = "flag > file > default";
    std::ofstream os(fs::path(output_dir) / "run.json");
    os << j.dump(2) << "\n";
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path);
    os << text;
}

// ---- subcommand payloads -----------------------------------------------------

struct TrainArgs {
    std::string config_path, train_manifest, test_manifest, output_dir;
    std::vector<std::string> sets;
    int epochs = 10;
    int batch_size = 6;
    double lr = 0.001;
    double momentum = 0.9;
    std::uint64_t seed = 0;
    bool augment = false;
    double rotation_deg = 15.0;
};

int cmd_train(const TrainArgs& a, const std::vector<std::string>& argv,
              const std::map<std::string, bool>& explicit_flags) {
    ResolvedConfig rc = resolve_config(a.config_path, a.sets);
    TrainOptions opts;
    opts.epochs = a.epochs;
    opts.batch_size = a.batch_size;
    opts.lr = a.lr;
    opts.momentum = a.momentum;
    opts.seed = a.seed;
    opts.augment = a.augment;
    opts.augment_config.max_rotation_deg = a.rotation_deg;
    opts.output_dir = a.output_dir;
    for (const auto& [key, value] : rc.engine_overrides.items()) {
        if (explicit_flags.count(key) && explicit_flags.at(key)) {
            throw UsageError("--set " + key + " conflicts with its dedicated flag");
        }
        if (key == "lr") opts.lr = value.get<double>();
        if (key == "momentum") opts.momentum = value.get<double>();
        if (key == "epochs") opts.epochs = value.get<int>();
        if (key == "batch_size") opts.batch_size = value.get<int>();
    }

    Manifest train_m = Manifest::load(a.train_manifest);
    std::optional<Manifest> val_m;
    if (!a.test_manifest.empty()) val_m = Manifest::load(a.test_manifest);

    write_run_json(a.output_dir, "train", argv, rc.model, a.seed);
    FocalConvNet net = build(rc.model, a.seed);
    TrainResult result = train(net, train_m, val_m ? &*val_m : nullptr, opts);

    const auto& last = result.history.back();
    std::cout << "epochs: " << opts.epochs << "  final loss: " << last.loss
              << "  acc: " << last.accuracy << "  weighted_f1: " << last.weighted_f1
              << "  mcc: " << last.mcc << "\n";
    std::cout << "best epoch " << result.best_epoch << " (weighted F1 "
              << result.best_weighted_f1 << "); outputs in " << a.output_dir << "\n";
    return 0;
}

struct EvalArgs {
    std::string checkpoint, test_manifest, config_path, output_dir;
    int batch_size = 6;
};

int cmd_eval(const EvalArgs& a, const std::vector<std::string>& argv) {
    Checkpoint ckpt = load_checkpoint(a.checkpoint);
    ModelConfig config;
    if (!a.config_path.empty()) {
        config = ModelConfig::from_json_file(a.config_path);
    } else if (ckpt.meta.count("config")) {
        config = ModelConfig::from_json(ckpt.meta.at("config"));
    } else {
        throw ConfigError("eval: checkpoint has no embedded config; pass --config");
    }
    Manifest manifest = Manifest::load(a.test_manifest);

    write_run_json(a.output_dir, "eval", argv, config, 0);
    FocalConvNet net = build(config, 0);
    load_params(net, ckpt.params);
    EvalResult ev = evaluate(net, manifest, a.batch_size, class_weights(manifest));

    const std::string table = metrics_table(ev.confusion);
    std::cout << table;
    if (!a.output_dir.empty()) {
        write_text(fs::path(a.output_dir) / "metrics.txt", table);
        write_text(fs::path(a.output_dir) / "metrics.json", metrics_json(ev.confusion));
    }
    return 0;
}

struct BenchArgs {
    std::string config_path, output_dir;
    std::vector<std::string> sets;
    int batch = 6;
    int warmup = 1;
    int iters = 3;
    std::uint64_t seed = 0;
};

int cmd_bench(const BenchArgs& a, const std::vector<std::string>& argv) {
    ResolvedConfig rc = resolve_config(a.config_path, a.sets);
    write_run_json(a.output_dir, "bench", argv, rc.model, a.seed);
    FocalConvNet net = build(rc.model, a.seed);
    const double ips = measure_throughput(net, a.batch, a.warmup, a.iters, steady_clock_fn());
    std::cout << "throughput: " << ips << " images/s (batch " << a.batch << ", "
              << hardware_string() << ")\n";
    if (!a.output_dir.empty()) {
        json j{{"images_per_second", ips},
               {"batch", a.batch},
               {"warmup_iters", a.warmup},
               {"timed_iters", a.iters},
               {"hardware", hardware_string()}};
        write_text(fs::path(a.output_dir) / "bench.json", j.dump(2) + "\n");
    }
    return 0;
}

struct ProfileArgs {
    std::string config_path, output_dir, points_csv;
    std::vector<std::string> sets;
    bool with_throughput = false;
    int batch = 6;
    int warmup = 1;
    int iters = 3;
    double f1 = -1.0;
};

int cmd_profile(const ProfileArgs& a, const std::vector<std::string>& argv) {
    ResolvedConfig rc = resolve_config(a.config_path, a.sets);
    write_run_json(a.output_dir, "profile", argv, rc.model, 0);
    ProfileReport report = profile_model(rc.model, rc.model.input_size);
    if (a.with_throughput) {
        FocalConvNet net = build(rc.model, 0);
        report.throughput_ips =
            measure_throughput(net, a.batch, a.warmup, a.iters, steady_clock_fn());
        report.throughput_batch = a.batch;
    }
    std::cout << report_row(report);
    std::cout << "params: " << report.total_params << "  gflops(2*MAC): " << report.gflops_2mac
              << "  gflops(1*MAC): " << report.gflops_1mac << "\n";
    std::cout << "receptive fields:";
    for (int r : report.receptive_fields) std::cout << " " << r;
    std::cout << "\n";
    if (!a.output_dir.empty()) {
        write_text(fs::path(a.output_dir) / "profile.json", report_json(report) + "\n");
        write_text(fs::path(a.output_dir) / "profile_row.txt", report_row(report));
    }
    if (!a.points_csv.empty()) {
        std::ostringstream os;
        os << "method,f1,throughput\n";
        os << "FocalConvNet," << (a.f1 >= 0 ? std::to_string(a.f1) : "") << ","
           << (report.throughput_ips > 0 ? std::to_string(report.throughput_ips) : "") << "\n";
        write_text(a.points_csv, os.str());
    }
    return 0;
}

struct SynthArgs {
    std::string output_dir;
    int classes = 4;
    int per_class = 16;
    int size = 32;
    std::uint64_t seed = 0;
};

int cmd_synth(const SynthArgs& a, const std::vector<std::string>& argv) {
    write_run_json(a.output_dir, "synth", argv, ModelConfig(), a.seed);
    Manifest m = synth_dataset(a.classes, a.per_class, a.size, a.seed, a.output_dir);
    std::cout << "wrote " << m.size() << " samples across " << m.num_classes() << " classes to "
              << a.output_dir << "\n";
    return 0;
}

int cmd_gradcheck(std::uint64_t seed, const std::string& output_dir,
                  const std::vector<std::string>& argv) {
    write_run_json(output_dir, "gradcheck", argv, ModelConfig(), seed);
    const auto entries = gradcheck_battery(seed);
    bool all_pass = true;
    for (const auto& e : entries) {
        std::cout << (e.pass ? "[pass] " : "[FAIL] ") << e.name << "  max_rel=" << e.max_rel
                  << "\n";
        all_pass = all_pass && e.pass;
    }
    std::cout << (all_pass ? "gradcheck: all passed\n" : "gradcheck: FAILURES\n");
    return all_pass ? 0 : 1;
}

}  // namespace

int run(const std::vector<std::string>& args) {
    CLI::App app{"FocalConvNet tooling: train, evaluate, benchmark and profile"};
    app.require_subcommand(1);

    TrainArgs train_args;
    auto* train_cmd = app.add_subcommand("train", "train on a manifest");
    train_cmd->add_option("--config", train_args.config_path, "model config JSON");
    train_cmd->add_option("--train-manifest", train_args.train_manifest, "training CSV")
        ->required();
    train_cmd->add_option("--test-manifest", train_args.test_manifest,
                          "evaluation CSV (defaults to the training manifest)");
    auto* epochs_opt = train_cmd->add_option("--epochs", train_args.epochs, "training epochs");
    auto* bs_opt = train_cmd->add_option("--batch-size", train_args.batch_size, "batch size");
    auto* lr_opt = train_cmd->add_option("--lr", train_args.lr, "learning rate");
    auto* mom_opt = train_cmd->add_option("--momentum", train_args.momentum, "SGD momentum");
    train_cmd->add_option("--seed", train_args.seed, "rng seed");
    train_cmd->add_flag("--augment", train_args.augment, "random flips and rotation");
    train_cmd->add_option("--rotation-deg", train_args.rotation_deg,
                          "max augmentation rotation in degrees");
    train_cmd->add_option("--set", train_args.sets, "key=value config override");
    train_cmd->add_option("--output-dir", train_args.output_dir, "output directory")->required();

    EvalArgs eval_args;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "checkpoint file")->required();
    eval_cmd->add_option("--test-manifest", eval_args.test_manifest, "evaluation CSV")->required();
    eval_cmd->add_option("--config", eval_args.config_path, "override embedded config");
    eval_cmd->add_option("--batch-size", eval_args.batch_size, "batch size");
    eval_cmd->add_option("--output-dir", eval_args.output_dir, "output directory");

    BenchArgs bench_args;
    auto* bench_cmd = app.add_subcommand("bench", "forward-only throughput");
    bench_cmd->add_option("--config", bench_args.config_path, "model config JSON");
    bench_cmd->add_option("--batch", bench_args.batch, "batch size");
    bench_cmd->add_option("--warmup", bench_args.warmup, "warmup iterations");
    bench_cmd->add_option("--iters", bench_args.iters, "timed iterations");
    bench_cmd->add_option("--seed", bench_args.seed, "rng seed");
    bench_cmd->add_option("--set", bench_args.sets, "key=value config override");
    bench_cmd->add_option("--output-dir", bench_args.output_dir, "output directory");

    ProfileArgs profile_args;
    auto* profile_cmd = app.add_subcommand("profile", "parameter/FLOP accounting");
    profile_cmd->add_option("--config", profile_args.config_path, "model config JSON");
    profile_cmd->add_option("--set", profile_args.sets, "key=value config override");
    profile_cmd->add_flag("--with-throughput", profile_args.with_throughput,
                          "also measure images/s");
    profile_cmd->add_option("--batch", profile_args.batch, "throughput batch size");
    profile_cmd->add_option("--warmup", profile_args.warmup, "throughput warmup iterations");
    profile_cmd->add_option("--iters", profile_args.iters, "throughput timed iterations");
    profile_cmd->add_option("--points-csv", profile_args.points_csv,
                            "write a (method,f1,throughput) point");
    profile_cmd->add_option("--f1", profile_args.f1, "f1 value for --points-csv");
    profile_cmd->add_option("--output-dir", profile_args.output_dir, "output directory");

    SynthArgs synth_args;
    auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic dataset");
    synth_cmd->add_option("--classes", synth_args.classes, "number of classes");
    synth_cmd->add_option("--per-class", synth_args.per_class, "samples per class");
    synth_cmd->add_option("--size", synth_args.size, "image side length");
    synth_cmd->add_option("--seed", synth_args.seed, "rng seed");
    synth_cmd->add_option("--output-dir", synth_args.output_dir, "output directory")->required();

    std::uint64_t gradcheck_seed = 0;
    std::string gradcheck_out;
    auto* gradcheck_cmd = app.add_subcommand("gradcheck", "finite-difference gradient checks");
    gradcheck_cmd->add_option("--seed", gradcheck_seed, "rng seed");
    gradcheck_cmd->add_option("--output-dir", gradcheck_out, "output directory");

    // CLI11 wants argv including the program name.
    std::vector<std::string> argv_full;
    argv_full.push_back("focalconv");
    argv_full.insert(argv_full.end(), args.begin(), args.end());
    std::vector<const char*> argv_c;
    argv_c.reserve(argv_full.size());
    for (const auto& s : argv_full) argv_c.push_back(s.c_str());

    try {
        app.parse(static_cast<int>(argv_c.size()), argv_c.data());
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {  // --help
            std::cout << app.help();
            return 0;
        }
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    }

    try {
        if (train_cmd->parsed()) {
            std::map<std::string, bool> explicit_flags{{"epochs", epochs_opt->count() > 0},
                                                       {"batch_size", bs_opt->count() > 0},
                                                       {"lr", lr_opt->count() > 0},
                                                       {"momentum", mom_opt->count() > 0}};
            return cmd_train(train_args, args, explicit_flags);
        }
        if (eval_cmd->parsed()) return cmd_eval(eval_args, args);
        if (bench_cmd->parsed()) return cmd_bench(bench_args, args);
        if (profile_cmd->parsed()) return cmd_profile(profile_args, args);
        if (synth_cmd->parsed()) return cmd_synth(synth_args, args);
        if (gradcheck_cmd->parsed()) return cmd_gradcheck(gradcheck_seed, gradcheck_out, args);
        std::cerr << "usage error: no subcommand\n";
        return 2;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

int run(int argc, char** argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run(args);
}

}  // namespace focalconv::cli
