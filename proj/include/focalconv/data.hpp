#ifndef FOCALCONV_DATA_HPP
#define FOCALCONV_DATA_HPP

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "focalconv/tensor.hpp"

namespace focalconv {

struct ManifestEntry {
    std::string path;  // relative to root
    int label = 0;
};

// Entries come from a CSV with header "path,label"; the class list comes from
// a sidecar "classes.txt" next to the CSV when present, otherwise from the
// sorted set of label names seen.
struct Manifest {
    std::string root;
    std::vector<ManifestEntry> entries;
    std::vector<std::string> class_names;
    std::vector<std::int64_t> class_counts;

    int num_classes() const { return static_cast<int>(class_names.size()); }
    std::size_t size() const { return entries.size(); }

    static Manifest load(const std::string& csv_path);
    static Manifest from_rows(const std::vector<std::pair<std::string, std::string>>& rows,
                              std::vector<std::string> class_names, std::string root);
};

// 3xHxW image in [0,1] plus its class index.
struct Sample {
    Tensor image;
    int label = 0;
};

// Decode (PNG/JPEG bytes) + bilinear resize + scale to [0,1].
Tensor decode_and_preprocess(const std::vector<std::uint8_t>& bytes, int out_h, int out_w,
                             const std::string& context);
// Accepts FCTN tensor files wherever images are.
Tensor load_image_file(const std::string& path, int out_h, int out_w);

// Half-pixel source mapping with edge clamping; identity when sizes match.
Tensor resize_bilinear(const Tensor& img, int out_h, int out_w);

Tensor hflip(const Tensor& img);
Tensor vflip(const Tensor& img);
// Rotation about the image center, bilinear resampling, zero fill.
Tensor rotate_bilinear(const Tensor& img, double degrees);

struct AugmentConfig {
    double p_hflip = 0.5;
    double p_vflip = 0.5;
    double max_rotation_deg = 15.0;
};

// Independent coin flips for the two mirrors, then a rotation with angle
// uniform in [-max, +max]. Draw order is fixed: hflip, vflip, angle.
Sample augment(const Sample& s, const AugmentConfig& cfg, std::mt19937_64& rng);

// w_k = total / (K * count_k); a zero-count class is a config error.
std::vector<double> class_weights(const Manifest& m);

// Class-conditional color/shape patterns written as FCTN files, plus
// manifest.csv and classes.txt, under out_dir.
Manifest synth_dataset(int num_classes, int per_class, int size, std::uint64_t seed,
                       const std::string& out_dir);

// Deterministic per-epoch shuffle; the last partial batch is retained.
std::vector<std::vector<std::size_t>> batch_schedule(std::size_t count, int batch_size,
                                                     std::uint64_t seed, int epoch);

// Loads manifest entries as model-ready samples.
class SampleLoader {
  public:
    SampleLoader(const Manifest& manifest, int out_h, int out_w)
        : manifest_(&manifest), out_h_(out_h), out_w_(out_w) {}
    Sample load(std::size_t index) const;
    // Stacks samples into (N,3,H,W).
    Tensor batch_images(const std::vector<Sample>& samples) const;

  private:
    const Manifest* manifest_;
    int out_h_, out_w_;
};

}  // namespace focalconv

#endif
