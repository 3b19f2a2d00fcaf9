#ifndef FOCALCONV_PARAM_STORE_HPP
#define FOCALCONV_PARAM_STORE_HPP

#include <string>
#include <unordered_map>
#include <vector>

#include "focalconv/tensor.hpp"

namespace focalconv {

// Named, ordered collection of learnable tensors. Names are stable
// hierarchical paths ("stage2.block3.focal.proj_in.w"); iteration follows
// insertion order deterministically.
class ParamStore {
  public:
    void add(const std::string& name, Tensor t) {
        if (index_.count(name)) throw ConfigError("parameter registered twice: " + name);
        index_[name] = entries_.size();
        entries_.emplace_back(name, std::move(t));
    }

    bool contains(const std::string& name) const { return index_.count(name) > 0; }

    Tensor& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
        return entries_[it->second].second;
    }
    const Tensor& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
        return entries_[it->second].second;
    }

    std::size_t size() const { return entries_.size(); }
    const std::vector<std::pair<std::string, Tensor>>& items() const { return entries_; }

    std::int64_t total_scalars() const {
        std::int64_t total = 0;
        for (const auto& [name, t] : entries_) total += t.size();
        return total;
    }

    void zero_grads() {
        for (auto& [name, t] : entries_) t.zero_grad();
    }

  private:
    std::vector<std::pair<std::string, Tensor>> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace focalconv

#endif
