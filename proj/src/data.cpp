#include "focalconv/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "focalconv/image_io.hpp"
#include "focalconv/serialize.hpp"

namespace focalconv {

namespace fs = std::filesystem;

// ---- manifest -----------------------------------------------------------------

namespace {

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                    std::istreambuf_iterator<char>());
    return bytes;
}

std::string strip_cr(std::string s) {
    if (!s.empty() && s.back() == '\r') s.pop_back();
    return s;
}

Manifest manifest_from_labeled_rows(const std::vector<std::pair<std::string, std::string>>& rows,
                                    std::vector<std::string> class_names, std::string root,
                                    const std::string& origin, bool rows_have_lines) {
    Manifest m;
    m.root = std::move(root);
    m.class_names = std::move(class_names);
    m.class_counts.assign(m.class_names.size(), 0);
    std::map<std::string, int> index;
    for (std::size_t i = 0; i < m.class_names.size(); ++i) {
        index[m.class_names[i]] = static_cast<int>(i);
    }
    m.entries.reserve(rows.size());
    std::size_t line = 1;  // header was line 1
    for (const auto& [path, label] : rows) {
        ++line;
        auto it = index.find(label);
        if (it == index.end()) {
            std::string where = rows_have_lines ? (origin + ":" + std::to_string(line) + ": ")
                                                : (origin + ": ");
            throw DataError(where + "unknown label \"" + label + "\"");
        }
        m.entries.push_back({path, it->second});
        ++m.class_counts[static_cast<std::size_t>(it->second)];
    }
    return m;
}

}  // namespace

Manifest Manifest::from_rows(const std::vector<std::pair<std::string, std::string>>& rows,
                             std::vector<std::string> class_names, std::string root) {
    return manifest_from_labeled_rows(rows, std::move(class_names), std::move(root), "manifest",
                                      false);
}

Manifest Manifest::load(const std::string& csv_path) {
    std::ifstream is(csv_path);
    if (!is) throw DataError("cannot open manifest: " + csv_path);

    std::string header;
    if (!std::getline(is, header) || strip_cr(header) != "path,label") {
        throw DataError(csv_path + ":1: expected header \"path,label\"");
    }

    std::vector<std::pair<std::string, std::string>> rows;
    std::string line;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        line = strip_cr(line);
        if (line.empty()) continue;
        const auto comma = line.rfind(',');
        if (comma == std::string::npos || comma == 0 || comma + 1 == line.size()) {
            throw DataError(csv_path + ":" + std::to_string(lineno) + ": malformed row \"" + line +
                            "\"");
        }
        rows.emplace_back(line.substr(0, comma), line.substr(comma + 1));
    }

    const fs::path dir = fs::path(csv_path).parent_path();
    const fs::path sidecar = dir / "classes.txt";
    std::vector<std::string> names;
    if (fs::exists(sidecar)) {
        std::ifstream cs(sidecar);
        std::string n;
        while (std::getline(cs, n)) {
            n = strip_cr(n);
            if (!n.empty()) names.push_back(n);
        }
        if (names.empty()) throw DataError(sidecar.string() + ": empty class list");
    } else {
        for (const auto& [p, label] : rows) names.push_back(label);
        std::sort(names.begin(), names.end());
        names.erase(std::unique(names.begin(), names.end()), names.end());
        if (names.empty()) throw DataError(csv_path + ": no entries and no classes.txt");
    }
    return manifest_from_labeled_rows(rows, std::move(names), dir.string(), csv_path, true);
}

// ---- preprocessing --------------------------------------------------------------

Tensor resize_bilinear(const Tensor& img, int out_h, int out_w) {
    if (img.rank() != 3) {
        throw DimensionError("resize: expected (C,H,W), got " + shape_str(img.shape()));
    }
    const std::int64_t c = img.dim(0);
    const std::int64_t h = img.dim(1);
    const std::int64_t w = img.dim(2);
    if (h == out_h && w == out_w) return img.detached();

    std::vector<double> out(static_cast<std::size_t>(c * out_h * out_w));
    const double sy = static_cast<double>(h) / out_h;
    const double sx = static_cast<double>(w) / out_w;
    const double* src = img.data().data();
    for (std::int64_t ch = 0; ch < c; ++ch) {
        const double* plane = src + ch * h * w;
        double* dst = out.data() + ch * out_h * out_w;
        for (int y = 0; y < out_h; ++y) {
            const double fy = (y + 0.5) * sy - 0.5;
            const std::int64_t y0 = static_cast<std::int64_t>(std::floor(fy));
            const double wy = fy - static_cast<double>(y0);
            const std::int64_t ya = std::clamp<std::int64_t>(y0, 0, h - 1);
            const std::int64_t yb = std::clamp<std::int64_t>(y0 + 1, 0, h - 1);
            for (int x = 0; x < out_w; ++x) {
                const double fx = (x + 0.5) * sx - 0.5;
                const std::int64_t x0 = static_cast<std::int64_t>(std::floor(fx));
                const double wx = fx - static_cast<double>(x0);
                const std::int64_t xa = std::clamp<std::int64_t>(x0, 0, w - 1);
                const std::int64_t xb = std::clamp<std::int64_t>(x0 + 1, 0, w - 1);
                const double top = plane[ya * w + xa] * (1.0 - wx) + plane[ya * w + xb] * wx;
                const double bot = plane[yb * w + xa] * (1.0 - wx) + plane[yb * w + xb] * wx;
                dst[y * out_w + x] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    return Tensor::from_data({c, out_h, out_w}, std::move(out));
}

Tensor decode_and_preprocess(const std::vector<std::uint8_t>& bytes, int out_h, int out_w,
                             const std::string& context) {
    const DecodedImage raw = decode_image(bytes, context);
    const std::int64_t h = raw.height;
    const std::int64_t w = raw.width;
    std::vector<double> planar(static_cast<std::size_t>(3 * h * w));
    for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
            const std::size_t px = static_cast<std::size_t>((y * w + x) * 3);
            for (int ch = 0; ch < 3; ++ch) {
                planar[static_cast<std::size_t>(ch * h * w + y * w + x)] =
                    static_cast<double>(raw.rgb[px + static_cast<std::size_t>(ch)]) / 255.0;
            }
        }
    }
    return resize_bilinear(Tensor::from_data({3, h, w}, std::move(planar)), out_h, out_w);
}

namespace {
bool has_fctn_magic(const std::vector<std::uint8_t>& bytes) {
    return bytes.size() >= 4 && bytes[0] == 'F' && bytes[1] == 'C' && bytes[2] == 'T' &&
           bytes[3] == 'N';
}
}  // namespace

Tensor load_image_file(const std::string& path, int out_h, int out_w) {
    const auto bytes = read_file_bytes(path);
    if (has_fctn_magic(bytes)) {
        std::stringstream ss(std::string(reinterpret_cast<const char*>(bytes.data()), bytes.size()),
                             std::ios::in | std::ios::binary);
        Tensor t = read_tensor_record(ss, path);
        if (t.rank() != 3 || t.dim(0) != 3) {
            throw DataError(path + ": image tensor must be (3,H,W), got " + shape_str(t.shape()));
        }
        return resize_bilinear(t, out_h, out_w);
    }
    return decode_and_preprocess(bytes, out_h, out_w, path);
}

// ---- augmentation ----------------------------------------------------------------

Tensor hflip(const Tensor& img) {
    const std::int64_t c = img.dim(0);
    const std::int64_t h = img.dim(1);
    const std::int64_t w = img.dim(2);
    std::vector<double> out(img.data().size());
    const double* src = img.data().data();
    for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x)
                out[static_cast<std::size_t>((ch * h + y) * w + x)] =
                    src[(ch * h + y) * w + (w - 1 - x)];
    return Tensor::from_data(img.shape(), std::move(out));
}

Tensor vflip(const Tensor& img) {
    const std::int64_t c = img.dim(0);
    const std::int64_t h = img.dim(1);
    const std::int64_t w = img.dim(2);
    std::vector<double> out(img.data().size());
    const double* src = img.data().data();
    for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x)
                out[static_cast<std::size_t>((ch * h + y) * w + x)] =
                    src[(ch * h + (h - 1 - y)) * w + x];
    return Tensor::from_data(img.shape(), std::move(out));
}

Tensor rotate_bilinear(const Tensor& img, double degrees) {
    const std::int64_t c = img.dim(0);
    const std::int64_t h = img.dim(1);
    const std::int64_t w = img.dim(2);
    const double rad = degrees * std::numbers::pi / 180.0;
    const double cs = std::cos(rad);
    const double sn = std::sin(rad);
    const double cy = (static_cast<double>(h) - 1.0) / 2.0;
    const double cx = (static_cast<double>(w) - 1.0) / 2.0;

    std::vector<double> out(img.data().size(), 0.0);
    const double* src = img.data().data();
    for (std::int64_t ch = 0; ch < c; ++ch) {
        const double* plane = src + ch * h * w;
        double* dst = out.data() + ch * h * w;
        for (std::int64_t y = 0; y < h; ++y) {
            for (std::int64_t x = 0; x < w; ++x) {
                // inverse rotation: where this destination pixel comes from
                const double dx = static_cast<double>(x) - cx;
                const double dy = static_cast<double>(y) - cy;
                const double sx = cs * dx + sn * dy + cx;
                const double sy = -sn * dx + cs * dy + cy;
                const std::int64_t x0 = static_cast<std::int64_t>(std::floor(sx));
                const std::int64_t y0 = static_cast<std::int64_t>(std::floor(sy));
                const double fx = sx - static_cast<double>(x0);
                const double fy = sy - static_cast<double>(y0);
                auto tap = [&](std::int64_t yy, std::int64_t xx) -> double {
                    if (yy < 0 || yy >= h || xx < 0 || xx >= w) return 0.0;  // zero fill
                    return plane[yy * w + xx];
                };
                const double top = tap(y0, x0) * (1.0 - fx) + tap(y0, x0 + 1) * fx;
                const double bot = tap(y0 + 1, x0) * (1.0 - fx) + tap(y0 + 1, x0 + 1) * fx;
                dst[y * w + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    return Tensor::from_data(img.shape(), std::move(out));
}

Sample augment(const Sample& s, const AugmentConfig& cfg, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double u_h = unit(rng);
    const double u_v = unit(rng);
    Sample out{s.image, s.label};
    if (u_h < cfg.p_hflip) out.image = hflip(out.image);
    if (u_v < cfg.p_vflip) out.image = vflip(out.image);
    if (cfg.max_rotation_deg > 0.0) {
        std::uniform_real_distribution<double> ang(-cfg.max_rotation_deg, cfg.max_rotation_deg);
        out.image = rotate_bilinear(out.image, ang(rng));
    }
    return out;
}

// ---- class weights ------------------------------------------------------------------

std::vector<double> class_weights(const Manifest& m) {
    const int k = m.num_classes();
    if (k == 0) throw ConfigError("class_weights: manifest has no classes");
    std::int64_t total = 0;
    for (auto c : m.class_counts) total += c;
    std::vector<double> w(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) {
        const std::int64_t count = m.class_counts[static_cast<std::size_t>(i)];
        if (count == 0) {
            throw ConfigError("class_weights: class \"" + m.class_names[static_cast<std::size_t>(i)] +
                              "\" has zero samples");
        }
        w[static_cast<std::size_t>(i)] =
            static_cast<double>(total) / (static_cast<double>(k) * static_cast<double>(count));
    }
    return w;
}

// ---- synthetic dataset ----------------------------------------------------------------

namespace {

void hsv_to_rgb(double hue, double sat, double val, double rgb[3]) {
    const double h6 = hue * 6.0;
    const int sector = static_cast<int>(h6) % 6;
    const double f = h6 - std::floor(h6);
    const double p = val * (1.0 - sat);
    const double q = val * (1.0 - sat * f);
    const double t = val * (1.0 - sat * (1.0 - f));
    switch (sector) {
        case 0: rgb[0] = val; rgb[1] = t; rgb[2] = p; break;
        case 1: rgb[0] = q; rgb[1] = val; rgb[2] = p; break;
        case 2: rgb[0] = p; rgb[1] = val; rgb[2] = t; break;
        case 3: rgb[0] = p; rgb[1] = q; rgb[2] = val; break;
        case 4: rgb[0] = t; rgb[1] = p; rgb[2] = val; break;
        default: rgb[0] = val; rgb[1] = p; rgb[2] = q; break;
    }
}

}  // namespace

Manifest synth_dataset(int num_classes, int per_class, int size, std::uint64_t seed,
                       const std::string& out_dir) {
    if (num_classes < 2 || per_class < 1 || size < 8) {
        throw ConfigError("synth_dataset: need >=2 classes, >=1 per class, size >=8");
    }
    fs::create_directories(fs::path(out_dir) / "images");

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    std::vector<std::string> names;
    for (int k = 0; k < num_classes; ++k) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "class_%02d", k);
        names.emplace_back(buf);
    }

    std::vector<std::pair<std::string, std::string>> rows;
    for (int k = 0; k < num_classes; ++k) {
        double color[3];
        hsv_to_rgb(static_cast<double>(k) / num_classes, 0.95, 0.95, color);
        for (int i = 0; i < per_class; ++i) {
            std::vector<double> img(static_cast<std::size_t>(3 * size * size));
            // dim noisy background
            for (auto& v : img) v = 0.08 + 0.06 * unit(rng);

            const double jx = (unit(rng) - 0.5) * 0.2 * size;
            const double jy = (unit(rng) - 0.5) * 0.2 * size;
            const double cxp = size / 2.0 + jx;
            const double cyp = size / 2.0 + jy;
            const double radius = size * (0.26 + 0.08 * unit(rng));
            const double bright = 0.85 + 0.15 * unit(rng);
            const int stripe = 2 + static_cast<int>(unit(rng) * 2.0);

            auto inside = [&](int y, int x) -> bool {
                switch (k % 4) {
                    case 0: {  // disc
                        const double dx = x - cxp;
                        const double dy = y - cyp;
                        return dx * dx + dy * dy <= radius * radius;
                    }
                    case 1:  // square
                        return std::abs(x - cxp) <= radius && std::abs(y - cyp) <= radius;
                    case 2:  // horizontal stripes
                        return (y / stripe) % 2 == 0;
                    default: {  // diagonal cross
                        const double t = size * 0.12;
                        return std::abs((x - cxp) - (y - cyp)) < t ||
                               std::abs((x - cxp) + (y - cyp)) < t;
                    }
                }
            };
            for (int y = 0; y < size; ++y) {
                for (int x = 0; x < size; ++x) {
                    if (!inside(y, x)) continue;
                    for (int ch = 0; ch < 3; ++ch) {
                        img[static_cast<std::size_t>((ch * size + y) * size + x)] =
                            std::min(1.0, color[ch] * bright);
                    }
                }
            }

            char fname[64];
            std::snprintf(fname, sizeof(fname), "images/class_%02d_%03d.fctn", k, i);
            save_tensor((fs::path(out_dir) / fname).string(),
                        Tensor::from_data({3, size, size}, std::move(img)));
            rows.emplace_back(fname, names[static_cast<std::size_t>(k)]);
        }
    }

    {
        std::ofstream cs(fs::path(out_dir) / "classes.txt");
        for (const auto& n : names) cs << n << "\n";
        std::ofstream csv(fs::path(out_dir) / "manifest.csv");
        csv << "path,label\n";
        for (const auto& [p, l] : rows) csv << p << "," << l << "\n";
    }
    return Manifest::from_rows(rows, names, out_dir);
}

// ---- batching -----------------------------------------------------------------------

namespace {
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}
}  // namespace

std::vector<std::vector<std::size_t>> batch_schedule(std::size_t count, int batch_size,
                                                     std::uint64_t seed, int epoch) {
    if (batch_size < 1) throw ConfigError("batch_schedule: batch_size must be >= 1");
    std::vector<std::size_t> order(count);
    for (std::size_t i = 0; i < count; ++i) order[i] = i;
    std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = count; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % i);
        std::swap(order[i - 1], order[j]);
    }
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < count; start += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(count, start + static_cast<std::size_t>(batch_size));
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;
}

Sample SampleLoader::load(std::size_t index) const {
    const auto& entry = manifest_->entries.at(index);
    const std::string path = manifest_->root.empty()
                                 ? entry.path
                                 : (fs::path(manifest_->root) / entry.path).string();
    return Sample{load_image_file(path, out_h_, out_w_), entry.label};
}

Tensor SampleLoader::batch_images(const std::vector<Sample>& samples) const {
    if (samples.empty()) throw DataError("batch_images: empty batch");
    const std::int64_t n = static_cast<std::int64_t>(samples.size());
    const Shape& s0 = samples.front().image.shape();
    std::vector<double> data;
    data.reserve(static_cast<std::size_t>(n * numel(s0)));
    for (const auto& s : samples) {
        if (s.image.shape() != s0) {
            throw DimensionError("batch_images: inconsistent sample shapes " + shape_str(s0) +
                                 " vs " + shape_str(s.image.shape()));
        }
        data.insert(data.end(), s.image.data().begin(), s.image.data().end());
    }
    return Tensor::from_data({n, s0[0], s0[1], s0[2]}, std::move(data));
}

}  // namespace focalconv
