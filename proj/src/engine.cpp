#include "focalconv/engine.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "focalconv/serialize.hpp"

namespace focalconv {

namespace fs = std::filesystem;

// ---- weighted cross-entropy -----------------------------------------------------

Tensor weighted_ce(const Tensor& logits, const std::vector<int>& labels, const Tensor& weights) {
    if (logits.rank() != 2) {
        throw DimensionError("weighted_ce: logits must be (N,K), got " +
                             shape_str(logits.shape()));
    }
    const std::int64_t n = logits.dim(0);
    const std::int64_t k = logits.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != n) {
        throw DimensionError("weighted_ce: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(n) + " rows");
    }
    if (weights.rank() != 1 || weights.dim(0) != k) {
        throw DimensionError("weighted_ce: weights " + shape_str(weights.shape()) +
                             " must be (" + std::to_string(k) + ")");
    }
    for (int y : labels) {
        if (y < 0 || y >= k) {
            throw DataError("weighted_ce: label " + std::to_string(y) + " outside [0," +
                            std::to_string(k) + ")");
        }
    }
    for (double w : weights.data()) {
        if (!(w > 0.0)) throw ConfigError("weighted_ce: class weights must be positive");
    }
    for (double v : logits.data()) {
        if (!std::isfinite(v)) throw NumericError("weighted_ce: non-finite logits");
    }

    const double* z = logits.data().data();
    double weight_total = 0.0;
    double loss = 0.0;
    std::vector<double> softmax_cache(logits.data().size());
    for (std::int64_t r = 0; r < n; ++r) {
        const double* row = z + r * k;
        double mx = row[0];
        for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::int64_t j = 0; j < k; ++j) {
            const double e = std::exp(row[j] - mx);
            softmax_cache[static_cast<std::size_t>(r * k + j)] = e;
            sum += e;
        }
        for (std::int64_t j = 0; j < k; ++j) {
            softmax_cache[static_cast<std::size_t>(r * k + j)] /= sum;
        }
        const double lse = mx + std::log(sum);
        const double w = weights.data()[static_cast<std::size_t>(labels[static_cast<std::size_t>(r)])];
        loss += w * (lse - row[labels[static_cast<std::size_t>(r)]]);
        weight_total += w;
    }
    loss /= weight_total;

    Tensor tl = logits;
    std::vector<double> weight_values = weights.data();
    return make_op(Shape{}, {loss}, {logits},
                   [tl, labels, n, k, weight_total, weight_values = std::move(weight_values),
                    softmax_cache = std::move(softmax_cache)](detail::Node& o) {
        const double g = o.grad[0];
        std::vector<double> gx(tl.data().size());
        // per row: (w_y / W_total) * (softmax - onehot(y))
        for (std::int64_t r = 0; r < n; ++r) {
            const int y = labels[static_cast<std::size_t>(r)];
            const double row_scale =
                g * weight_values[static_cast<std::size_t>(y)] / weight_total;
            for (std::int64_t j = 0; j < k; ++j) {
                const auto idx = static_cast<std::size_t>(r * k + j);
                double v = softmax_cache[idx];
                if (j == y) v -= 1.0;
                gx[idx] = row_scale * v;
            }
        }
        tl.node()->accumulate(gx);
    });
}

// ---- optimizer ---------------------------------------------------------------------

OptimizerState OptimizerState::create(const ParamStore& params, double lr, double momentum) {
    OptimizerState st;
    st.lr = lr;
    st.momentum = momentum;
    st.velocity.reserve(params.size());
    for (const auto& [name, t] : params.items()) {
        st.velocity.push_back(Tensor::zeros(t.shape()));
    }
    return st;
}

void sgd_step(ParamStore& params, OptimizerState& state) {
    if (state.velocity.size() != params.size()) {
        throw ConfigError("sgd_step: optimizer state does not mirror the parameter store");
    }
    std::size_t i = 0;
    for (const auto& [name, t] : params.items()) {
        Tensor param = t;
        Tensor& v = state.velocity[i++];
        auto& vd = v.data();
        auto& wd = param.data();
        if (param.has_grad()) {
            const auto& g = param.grad();
            for (std::size_t j = 0; j < wd.size(); ++j) {
                vd[j] = state.momentum * vd[j] + g[j];
                wd[j] -= state.lr * vd[j];
            }
        } else {
            for (std::size_t j = 0; j < wd.size(); ++j) {
                vd[j] = state.momentum * vd[j];
                wd[j] -= state.lr * vd[j];
            }
        }
    }
}

// ---- checkpoints ----------------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[4] = {'F', 'C', 'C', 'K'};

void write_name(std::ostream& os, const std::string& name) {
    write_u32_le(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
}

std::string read_name(std::istream& is, const std::string& context) {
    const std::uint32_t len = read_u32_le(is, context);
    if (len > 4096) throw FormatError(context + ": implausible name length");
    std::string name(len, '\0');
    is.read(name.data(), static_cast<std::streamsize>(len));
    if (is.gcount() != static_cast<std::streamsize>(len)) {
        throw FormatError(context + ": truncated checkpoint");
    }
    return name;
}

}  // namespace

void save_checkpoint(const ParamStore& params, const OptimizerState* optimizer,
                     const std::string& path, const std::map<std::string, std::string>& meta) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open for writing: " + path);

    std::uint32_t count = static_cast<std::uint32_t>(params.size() + meta.size());
    if (optimizer) count += static_cast<std::uint32_t>(optimizer->velocity.size()) + 2;

    os.write(kCheckpointMagic, 4);
    const std::uint8_t version = 1;
    os.write(reinterpret_cast<const char*>(&version), 1);
    write_u32_le(os, count);

    for (const auto& [name, t] : params.items()) {
        write_name(os, "param/" + name);
        write_tensor_record(os, t);
    }
    if (optimizer) {
        write_name(os, "opt/lr");
        write_tensor_record(os, Tensor::scalar(optimizer->lr));
        write_name(os, "opt/momentum");
        write_tensor_record(os, Tensor::scalar(optimizer->momentum));
        std::size_t i = 0;
        for (const auto& [name, t] : params.items()) {
            write_name(os, "opt/velocity/" + name);
            write_tensor_record(os, optimizer->velocity[i++]);
        }
    }
    for (const auto& [key, value] : meta) {
        write_name(os, "meta/" + key);
        write_bytes_record(os, std::vector<std::uint8_t>(value.begin(), value.end()));
    }
    if (!os) throw DataError("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open: " + path);

    char magic[4];
    is.read(magic, 4);
    if (is.gcount() != 4 || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
        throw FormatError(path + ": bad magic, expected FCCK");
    }
    std::uint8_t version = 0;
    is.read(reinterpret_cast<char*>(&version), 1);
    if (is.gcount() != 1 || version != 1) {
        throw FormatError(path + ": unsupported checkpoint version");
    }
    const std::uint32_t count = read_u32_le(is, path);

    Checkpoint ckpt;
    std::vector<std::pair<std::string, Tensor>> velocities;
    double lr = 0.0;
    double momentum = 0.0;
    bool has_opt = false;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = read_name(is, path);
        Record rec = read_record(is, path + " [" + name + "]");
        if (name.rfind("param/", 0) == 0) {
            ckpt.params.add(name.substr(6), rec.tensor);
        } else if (name == "opt/lr") {
            lr = rec.tensor.item();
            has_opt = true;
        } else if (name == "opt/momentum") {
            momentum = rec.tensor.item();
            has_opt = true;
        } else if (name.rfind("opt/velocity/", 0) == 0) {
            velocities.emplace_back(name.substr(13), rec.tensor);
            has_opt = true;
        } else if (name.rfind("meta/", 0) == 0) {
            if (!rec.is_bytes) throw FormatError(path + ": meta entry must be a byte record");
            ckpt.meta[name.substr(5)] = std::string(rec.bytes.begin(), rec.bytes.end());
        } else {
            throw FormatError(path + ": unknown checkpoint entry \"" + name + "\"");
        }
    }
    if (has_opt) {
        OptimizerState st;
        st.lr = lr;
        st.momentum = momentum;
        // order velocities to match the parameter store
        for (const auto& [name, t] : ckpt.params.items()) {
            auto it = std::find_if(velocities.begin(), velocities.end(),
                                   [&](const auto& kv) { return kv.first == name; });
            if (it == velocities.end()) {
                throw FormatError(path + ": missing velocity for parameter " + name);
            }
            st.velocity.push_back(it->second);
        }
        ckpt.optimizer = std::move(st);
    }
    return ckpt;
}

// ---- evaluation -------------------------------------------------------------------------

namespace {

std::vector<int> argmax_rows(const Tensor& logits) {
    const std::int64_t n = logits.dim(0);
    const std::int64_t k = logits.dim(1);
    std::vector<int> out(static_cast<std::size_t>(n));
    for (std::int64_t r = 0; r < n; ++r) {
        const double* row = logits.data().data() + r * k;
        int best = 0;
        for (std::int64_t j = 1; j < k; ++j) {
            if (row[j] > row[best]) best = static_cast<int>(j);
        }
        out[static_cast<std::size_t>(r)] = best;
    }
    return out;
}

}  // namespace

EvalResult evaluate(const FocalConvNet& net, const Manifest& manifest, int batch_size,
                    const std::vector<double>& loss_weights) {
    NoGradGuard guard;
    SampleLoader loader(manifest, net.config.input_size[0], net.config.input_size[1]);
    ConfusionMatrix cm(manifest.class_names);
    Tensor weights = Tensor::from_data({static_cast<std::int64_t>(loss_weights.size())},
                                       loss_weights);
    double loss_sum = 0.0;
    std::int64_t seen = 0;
    for (std::size_t start = 0; start < manifest.size();
         start += static_cast<std::size_t>(batch_size)) {
        const std::size_t end =
            std::min(manifest.size(), start + static_cast<std::size_t>(batch_size));
        std::vector<Sample> samples;
        std::vector<int> labels;
        for (std::size_t i = start; i < end; ++i) {
            samples.push_back(loader.load(i));
            labels.push_back(samples.back().label);
        }
        Tensor batch = loader.batch_images(samples);
        Tensor logits = forward(net, batch);
        loss_sum += weighted_ce(logits, labels, weights).item() *
                    static_cast<double>(labels.size());
        const auto preds = argmax_rows(logits);
        for (std::size_t i = 0; i < preds.size(); ++i) cm.accumulate(labels[i], preds[i]);
        seen += static_cast<std::int64_t>(labels.size());
    }
    EvalResult res{std::move(cm), seen > 0 ? loss_sum / static_cast<double>(seen) : 0.0};
    return res;
}

// ---- training ---------------------------------------------------------------------------

namespace {

std::uint64_t mix3(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    std::uint64_t z = a;
    z = z * 0x9e3779b97f4a7c15ULL + b + 1;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = z + c + 1;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

EpochRecord make_record(int epoch, double loss, const EvalResult& eval) {
    return EpochRecord{epoch, loss, accuracy(eval.confusion),
                       averaged(eval.confusion, Average::Weighted).f1, mcc(eval.confusion)};
}

}  // namespace

TrainResult train(FocalConvNet& net, const Manifest& train_m, const Manifest* val_m,
                  const TrainOptions& options) {
    if (options.epochs < 0) throw ConfigError("train: epochs must be >= 0");
    if (options.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (static_cast<int>(train_m.class_names.size()) != net.config.num_classes) {
        throw ConfigError("train: manifest has " + std::to_string(train_m.class_names.size()) +
                          " classes but the model predicts " +
                          std::to_string(net.config.num_classes));
    }
    const Manifest& eval_m = val_m ? *val_m : train_m;

    const std::vector<double> weights_v = class_weights(train_m);
    Tensor weights = Tensor::from_data({static_cast<std::int64_t>(weights_v.size())}, weights_v);
    OptimizerState opt = OptimizerState::create(net.params, options.lr, options.momentum);
    SampleLoader loader(train_m, net.config.input_size[0], net.config.input_size[1]);

    TrainResult result;
    result.best_weighted_f1 = -1.0;

    const bool writing = !options.output_dir.empty();
    if (writing) fs::create_directories(options.output_dir);
    auto checkpoint_meta = [&](const EpochRecord& rec) {
        std::map<std::string, std::string> meta;
        meta["config"] = net.config.to_json();
        nlohmann::json j{{"epoch", rec.epoch},
                         {"loss", rec.loss},
                         {"accuracy", rec.accuracy},
                         {"weighted_f1", rec.weighted_f1},
                         {"mcc", rec.mcc}};
        meta["metrics"] = j.dump();
        return meta;
    };

    if (options.epochs == 0) {
        const EvalResult ev = evaluate(net, eval_m, options.batch_size, weights_v);
        const EpochRecord rec = make_record(0, ev.loss, ev);
        result.history.push_back(rec);
        result.best_epoch = 0;
        result.best_weighted_f1 = rec.weighted_f1;
        if (writing) {
            save_checkpoint(net.params, &opt, (fs::path(options.output_dir) / "best.ckpt").string(),
                            checkpoint_meta(rec));
            save_checkpoint(net.params, &opt, (fs::path(options.output_dir) / "last.ckpt").string(),
                            checkpoint_meta(rec));
        }
    }

    for (int epoch = 1; epoch <= options.epochs; ++epoch) {
        const auto schedule =
            batch_schedule(train_m.size(), options.batch_size, options.seed, epoch);
        double loss_sum = 0.0;
        std::int64_t seen = 0;
        for (std::size_t b = 0; b < schedule.size(); ++b) {
            std::vector<Sample> samples;
            std::vector<int> labels;
            for (std::size_t idx : schedule[b]) {
                Sample s = loader.load(idx);
                if (options.augment) {
                    std::mt19937_64 rng(
                        mix3(options.seed, static_cast<std::uint64_t>(epoch), idx));
                    s = augment(s, options.augment_config, rng);
                }
                labels.push_back(s.label);
                samples.push_back(std::move(s));
            }
            Tensor batch = loader.batch_images(samples);
            Tensor loss;
            try {
                Tensor logits = forward(net, batch);
                loss = weighted_ce(logits, labels, weights);
            } catch (const NumericError& e) {
                throw NumericError("train: diverged at epoch " + std::to_string(epoch) +
                                   ", batch " + std::to_string(b) + ": " + e.what());
            }
            const double loss_value = loss.item();
            if (!std::isfinite(loss_value)) {
                throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) +
                                   ", batch " + std::to_string(b));
            }
            net.params.zero_grads();
            backward(loss);
            sgd_step(net.params, opt);
            loss_sum += loss_value * static_cast<double>(labels.size());
            seen += static_cast<std::int64_t>(labels.size());
        }
        const double train_loss = seen > 0 ? loss_sum / static_cast<double>(seen) : 0.0;

        const EvalResult ev = evaluate(net, eval_m, options.batch_size, weights_v);
        const EpochRecord rec = make_record(epoch, train_loss, ev);
        result.history.push_back(rec);

        if (rec.weighted_f1 > result.best_weighted_f1) {
            result.best_weighted_f1 = rec.weighted_f1;
            result.best_epoch = epoch;
            if (writing) {
                save_checkpoint(net.params, &opt,
                                (fs::path(options.output_dir) / "best.ckpt").string(),
                                checkpoint_meta(rec));
            }
        }
        if (writing && epoch == options.epochs) {
            save_checkpoint(net.params, &opt, (fs::path(options.output_dir) / "last.ckpt").string(),
                            checkpoint_meta(rec));
        }
    }

    if (writing) {
        std::ofstream csv(fs::path(options.output_dir) / "history.csv");
        csv << history_csv(result.history);
        std::ofstream js(fs::path(options.output_dir) / "history.json");
        js << history_json(result.history);
    }
    return result;
}

std::string history_csv(const std::vector<EpochRecord>& history) {
    std::ostringstream os;
    os << "epoch,loss,acc,weighted_f1,mcc\n";
    char buf[160];
    for (const auto& r : history) {
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g\n", r.epoch, r.loss,
                      r.accuracy, r.weighted_f1, r.mcc);
        os << buf;
    }
    return os.str();
}

std::string history_json(const std::vector<EpochRecord>& history) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : history) {
        arr.push_back({{"epoch", r.epoch},
                       {"loss", r.loss},
                       {"acc", r.accuracy},
                       {"weighted_f1", r.weighted_f1},
                       {"mcc", r.mcc}});
    }
    return arr.dump(2);
}

}  // namespace focalconv
