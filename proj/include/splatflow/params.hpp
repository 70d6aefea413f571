#pragma once

// Named parameter storage for trainable models: flat f64 arrays with shape
// metadata plus a gradient buffer of identical shape. Iteration order is the
// insertion order, which makes optimizer sweeps and checkpoints deterministic.

#include <cstddef>
#include <deque>
#include <string>
#include <unordered_map>
#include <vector>

#include "splatflow/core.hpp"

namespace splatflow::ad {

class ParameterSet {
  public:
    struct Entry {
        std::string name;
        int rows = 0, cols = 0;
        std::vector<double> value;
        std::vector<double> grad;
    };

    // Adds a zero-initialized parameter and returns its entry. Entries live
    // in a deque so the returned reference stays valid as more are added.
    Entry &add(const std::string &name, int rows, int cols) {
        if (rows <= 0 || cols <= 0)
            throw ShapeError("parameter '" + name + "' must have positive dims");
        if (index_.count(name))
            throw ArgumentError("duplicate parameter name '" + name + "'");
        index_[name] = entries_.size();
        entries_.push_back(Entry{name, rows, cols,
                                 std::vector<double>(size_t(rows) * cols, 0.0),
                                 std::vector<double>(size_t(rows) * cols, 0.0)});
        return entries_.back();
    }

    bool has(const std::string &name) const { return index_.count(name) > 0; }

    Entry &entry(const std::string &name) {
        auto it = index_.find(name);
        if (it == index_.end())
            throw ArgumentError("unknown parameter '" + name + "'");
        return entries_[it->second];
    }
    const Entry &entry(const std::string &name) const {
        return const_cast<ParameterSet *>(this)->entry(name);
    }

    std::deque<Entry> &entries() { return entries_; }
    const std::deque<Entry> &entries() const { return entries_; }
    size_t count() const { return entries_.size(); }

    size_t total_values() const {
        size_t n = 0;
        for (const auto &e : entries_) n += e.value.size();
        return n;
    }

    void zero_grads() {
        for (auto &e : entries_)
            std::fill(e.grad.begin(), e.grad.end(), 0.0);
    }

  private:
    std::deque<Entry> entries_;
    std::unordered_map<std::string, size_t> index_;
};

}  // namespace splatflow::ad
