#include "focalconv/metrics.hpp"

#include <cmath>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <json.hpp>

namespace focalconv {

ConfusionMatrix::ConfusionMatrix(std::vector<std::string> class_names)
    : names_(std::move(class_names)),
      counts_(names_.size() * names_.size(), 0) {
    if (names_.empty()) throw ConfigError("confusion matrix needs at least one class");
}

ConfusionMatrix::ConfusionMatrix(int num_classes)
    : ConfusionMatrix([num_classes] {
          if (num_classes < 1) throw ConfigError("confusion matrix needs at least one class");
          std::vector<std::string> names;
          names.reserve(static_cast<std::size_t>(num_classes));
          for (int i = 0; i < num_classes; ++i) names.push_back("class_" + std::to_string(i));
          return names;
      }()) {}

void ConfusionMatrix::accumulate(int true_label, int pred_label) {
    const int k = num_classes();
    if (true_label < 0 || true_label >= k || pred_label < 0 || pred_label >= k) {
        throw DataError("confusion matrix: label out of range [0," + std::to_string(k) +
                        "): true=" + std::to_string(true_label) +
                        " pred=" + std::to_string(pred_label));
    }
    ++counts_[static_cast<std::size_t>(true_label) * static_cast<std::size_t>(k) +
              static_cast<std::size_t>(pred_label)];
    ++total_;
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
    if (other.num_classes() != num_classes()) {
        throw DataError("confusion matrix merge: class count mismatch");
    }
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
    total_ += other.total_;
}

std::int64_t ConfusionMatrix::count(int true_label, int pred_label) const {
    return counts_[static_cast<std::size_t>(true_label) * names_.size() +
                   static_cast<std::size_t>(pred_label)];
}

std::int64_t ConfusionMatrix::row_sum(int true_label) const {
    std::int64_t s = 0;
    for (int j = 0; j < num_classes(); ++j) s += count(true_label, j);
    return s;
}

std::int64_t ConfusionMatrix::col_sum(int pred_label) const {
    std::int64_t s = 0;
    for (int i = 0; i < num_classes(); ++i) s += count(i, pred_label);
    return s;
}

std::vector<Prf> per_class_prf(const ConfusionMatrix& cm) {
    const int k = cm.num_classes();
    std::vector<Prf> out(static_cast<std::size_t>(k));
    int degenerate = 0;
    for (int c = 0; c < k; ++c) {
        const double tp = static_cast<double>(cm.count(c, c));
        const double pred = static_cast<double>(cm.col_sum(c));  // tp + fp
        const double truth = static_cast<double>(cm.row_sum(c));  // tp + fn
        Prf& p = out[static_cast<std::size_t>(c)];
        if (pred > 0) {
            p.precision = tp / pred;
        } else {
            ++degenerate;
        }
        if (truth > 0) {
            p.recall = tp / truth;
        } else {
            ++degenerate;
        }
        if (p.precision + p.recall > 0) {
            p.f1 = 2.0 * p.precision * p.recall / (p.precision + p.recall);
        }
    }
    if (degenerate > 0) {
        std::cerr << "warning: " << degenerate
                  << " precision/recall value(s) were 0/0 and resolved to 0\n";
    }
    return out;
}

Prf averaged(const ConfusionMatrix& cm, Average mode) {
    const auto scores = per_class_prf(cm);
    const int k = cm.num_classes();
    Prf out;
    if (mode == Average::Macro) {
        for (const auto& s : scores) {
            out.precision += s.precision;
            out.recall += s.recall;
            out.f1 += s.f1;
        }
        out.precision /= k;
        out.recall /= k;
        out.f1 /= k;
    } else {
        const double total = static_cast<double>(cm.total());
        if (total == 0) throw DataError("averaged: empty confusion matrix");
        for (int c = 0; c < k; ++c) {
            const double w = static_cast<double>(cm.row_sum(c)) / total;
            out.precision += w * scores[static_cast<std::size_t>(c)].precision;
            out.recall += w * scores[static_cast<std::size_t>(c)].recall;
            out.f1 += w * scores[static_cast<std::size_t>(c)].f1;
        }
    }
    return out;
}

double accuracy(const ConfusionMatrix& cm) {
    if (cm.total() == 0) throw DataError("accuracy: empty confusion matrix");
    std::int64_t trace = 0;
    for (int c = 0; c < cm.num_classes(); ++c) trace += cm.count(c, c);
    return static_cast<double>(trace) / static_cast<double>(cm.total());
}

double mcc(const ConfusionMatrix& cm) {
    // R_K statistic: (c*s - sum_k p_k t_k) / sqrt((s^2 - sum p^2)(s^2 - sum t^2))
    const int k = cm.num_classes();
    const double s = static_cast<double>(cm.total());
    double trace = 0.0;
    double pt = 0.0;
    double pp = 0.0;
    double tt = 0.0;
    for (int c = 0; c < k; ++c) {
        trace += static_cast<double>(cm.count(c, c));
        const double p = static_cast<double>(cm.col_sum(c));
        const double t = static_cast<double>(cm.row_sum(c));
        pt += p * t;
        pp += p * p;
        tt += t * t;
    }
    const double denom = (s * s - pp) * (s * s - tt);
    if (denom <= 0.0) return 0.0;
    return (trace * s - pt) / std::sqrt(denom);
}

std::string metrics_table(const ConfusionMatrix& cm) {
    const auto scores = per_class_prf(cm);
    const Prf macro = averaged(cm, Average::Macro);
    const Prf weighted = averaged(cm, Average::Weighted);
    const double acc = accuracy(cm);
    const double m = mcc(cm);

    std::size_t name_w = 8;
    for (const auto& n : cm.class_names()) name_w = std::max(name_w, n.size());

    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << std::left << std::setw(static_cast<int>(name_w) + 2) << "Class" << std::right
       << std::setw(10) << "Precision" << std::setw(10) << "Recall" << std::setw(10) << "F1-Score"
       << std::setw(10) << "Support" << "\n";
    for (int c = 0; c < cm.num_classes(); ++c) {
        const auto& s = scores[static_cast<std::size_t>(c)];
        os << std::left << std::setw(static_cast<int>(name_w) + 2)
           << cm.class_names()[static_cast<std::size_t>(c)] << std::right << std::setw(10)
           << s.precision << std::setw(10) << s.recall << std::setw(10) << s.f1 << std::setw(10)
           << cm.row_sum(c) << "\n";
    }
    os << std::left << std::setw(static_cast<int>(name_w) + 2) << "Macro Average" << std::right
       << std::setw(10) << macro.precision << std::setw(10) << macro.recall << std::setw(10)
       << macro.f1 << "\n";
    os << std::left << std::setw(static_cast<int>(name_w) + 2) << "Weighted Average" << std::right
       << std::setw(10) << weighted.precision << std::setw(10) << weighted.recall << std::setw(10)
       << weighted.f1 << "\n";
    os << "Macro P/R/F1 | Weighted P/R/F1 | Accuracy | MCC: " << macro.precision << " "
       << macro.recall << " " << macro.f1 << " | " << weighted.precision << " " << weighted.recall
       << " " << weighted.f1 << " | " << acc << " | " << m << "\n";
    return os.str();
}

std::string metrics_json(const ConfusionMatrix& cm) {
    const auto scores = per_class_prf(cm);
    const Prf macro = averaged(cm, Average::Macro);
    const Prf weighted = averaged(cm, Average::Weighted);

    nlohmann::json j;
    j["num_samples"] = cm.total();
    j["accuracy"] = accuracy(cm);
    j["mcc"] = mcc(cm);
    j["macro"] = {{"precision", macro.precision}, {"recall", macro.recall}, {"f1", macro.f1}};
    j["weighted"] = {
        {"precision", weighted.precision}, {"recall", weighted.recall}, {"f1", weighted.f1}};
    nlohmann::json per_class = nlohmann::json::array();
    for (int c = 0; c < cm.num_classes(); ++c) {
        const auto& s = scores[static_cast<std::size_t>(c)];
        per_class.push_back({{"class", cm.class_names()[static_cast<std::size_t>(c)]},
                             {"precision", s.precision},
                             {"recall", s.recall},
                             {"f1", s.f1},
                             {"support", cm.row_sum(c)}});
    }
    j["per_class"] = per_class;
    nlohmann::json rows = nlohmann::json::array();
    for (int t = 0; t < cm.num_classes(); ++t) {
        nlohmann::json row = nlohmann::json::array();
        for (int p = 0; p < cm.num_classes(); ++p) row.push_back(cm.count(t, p));
        rows.push_back(row);
    }
    j["confusion"] = rows;
    return j.dump(2);
}

}  // namespace focalconv
