#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "stitch/params.hpp"
#include "stitch/tensor.hpp"

namespace stitch {

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NamedTensor {
    std::string name;
    Shape shape;
    std::vector<float> data;
};

// Single-file named-tensor container: fixed magic, a JSON manifest listing
// (name, shape, byte offset) per tensor, then a raw little-endian float32
// payload. Save -> load round-trips bit-exactly.
struct Checkpoint {
    int format_version = 1;
    std::string config_hash;
    std::map<std::string, std::string> meta;
    std::vector<NamedTensor> tensors;

    const NamedTensor* find(const std::string& name) const {
        for (auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }

    void add(const std::string& name, Shape shape, std::vector<float> data) {
        tensors.push_back(NamedTensor{name, std::move(shape), std::move(data)});
    }

    void add_store(const ParamStore<float>& ps, const std::string& prefix = "") {
        for (auto& p : ps) add(prefix + p.name, p.value.shape(), p.value.vec());
    }

    // Copies values into matching parameters; throws on missing names or
    // shape mismatches.
    void load_store(ParamStore<float>& ps, const std::string& prefix = "") const {
        for (auto& p : ps) {
            const NamedTensor* t = find(prefix + p.name);
            if (!t) throw CheckpointError("checkpoint missing tensor: " + prefix + p.name);
            if (t->shape != p.value.shape())
                throw CheckpointError("shape mismatch for " + t->name + ": file " +
                                      shape_str(t->shape) + " vs model " + shape_str(p.value.shape()));
            p.value.vec() = t->data;
        }
    }

    double meta_number(const std::string& key, double fallback) const;

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);
};

}  // namespace stitch
