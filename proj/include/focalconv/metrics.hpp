#ifndef FOCALCONV_METRICS_HPP
#define FOCALCONV_METRICS_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "focalconv/errors.hpp"

namespace focalconv {

// KxK integer counts, rows = true class, cols = predicted class; the sole
// input to every classification metric.
class ConfusionMatrix {
  public:
    explicit ConfusionMatrix(std::vector<std::string> class_names);
    explicit ConfusionMatrix(int num_classes);

    void accumulate(int true_label, int pred_label);
    // Elementwise addition for parallel evaluation shards.
    void merge(const ConfusionMatrix& other);

    int num_classes() const { return static_cast<int>(names_.size()); }
    std::int64_t total() const { return total_; }
    std::int64_t count(int true_label, int pred_label) const;
    std::int64_t row_sum(int true_label) const;  // support of a true class
    std::int64_t col_sum(int pred_label) const;
    const std::vector<std::string>& class_names() const { return names_; }

  private:
    std::vector<std::string> names_;
    std::vector<std::int64_t> counts_;
    std::int64_t total_ = 0;
};

struct Prf {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

enum class Average { Macro, Weighted };

// 0/0 resolves to 0 (degenerate classes); a warning goes to stderr.
std::vector<Prf> per_class_prf(const ConfusionMatrix& cm);
Prf averaged(const ConfusionMatrix& cm, Average mode);

double accuracy(const ConfusionMatrix& cm);  // trace/total; empty matrix -> DataError

// Generalized multiclass Matthews correlation (R_K statistic); 0 when the
// denominator degenerates.
double mcc(const ConfusionMatrix& cm);

// Aligned text report mirroring the usual comparison-table column order:
// macro P/R/F1, weighted P/R/F1, accuracy, MCC (plus a per-class table).
std::string metrics_table(const ConfusionMatrix& cm);
std::string metrics_json(const ConfusionMatrix& cm);

}  // namespace focalconv

#endif
