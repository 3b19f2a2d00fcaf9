#ifndef FOCALCONV_ENGINE_HPP
#define FOCALCONV_ENGINE_HPP

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "focalconv/data.hpp"
#include "focalconv/metrics.hpp"
#include "focalconv/model.hpp"
#include "focalconv/param_store.hpp"
#include "focalconv/tensor.hpp"

namespace focalconv {

// loss = sum_n w_{y_n} * (-log softmax(logits_n)[y_n]) / sum_n w_{y_n},
// log-sum-exp stabilized. Weights are treated as constants.
Tensor weighted_ce(const Tensor& logits, const std::vector<int>& labels, const Tensor& weights);

// Classical momentum: v <- mu*v + g; w <- w - lr*v.
struct OptimizerState {
    double lr = 0.001;
    double momentum = 0.9;
    std::vector<Tensor> velocity;  // mirrors ParamStore order and shapes

    static OptimizerState create(const ParamStore& params, double lr, double momentum);
};

void sgd_step(ParamStore& params, OptimizerState& state);

// ---- checkpoints (FCTN container with a name table) --------------------------

struct Checkpoint {
    ParamStore params;
    std::optional<OptimizerState> optimizer;
    std::map<std::string, std::string> meta;
};

void save_checkpoint(const ParamStore& params, const OptimizerState* optimizer,
                     const std::string& path,
                     const std::map<std::string, std::string>& meta = {});
Checkpoint load_checkpoint(const std::string& path);

// ---- train / eval --------------------------------------------------------------

struct TrainOptions {
    int epochs = 10;
    int batch_size = 6;
    double lr = 0.001;
    double momentum = 0.9;
    std::uint64_t seed = 0;
    bool augment = false;
    AugmentConfig augment_config;
    std::string output_dir;  // when set: history.csv/.json, best.ckpt, last.ckpt
};

struct EpochRecord {
    int epoch;
    double loss;  // mean train loss; evaluation loss for the epoch-0 record
    double accuracy;
    double weighted_f1;
    double mcc;
};

struct EvalResult {
    ConfusionMatrix confusion;
    double loss = 0.0;
};

struct TrainResult {
    std::vector<EpochRecord> history;
    int best_epoch = 0;
    double best_weighted_f1 = 0.0;
};

EvalResult evaluate(const FocalConvNet& net, const Manifest& manifest, int batch_size,
                    const std::vector<double>& loss_weights);

// Trains on train_m, evaluating each epoch on val_m (train_m itself when
// val_m is null). Deterministic for a fixed seed; a non-finite loss aborts
// with a diagnostic naming the batch.
TrainResult train(FocalConvNet& net, const Manifest& train_m, const Manifest* val_m,
                  const TrainOptions& options);

std::string history_csv(const std::vector<EpochRecord>& history);
std::string history_json(const std::vector<EpochRecord>& history);

}  // namespace focalconv

#endif
