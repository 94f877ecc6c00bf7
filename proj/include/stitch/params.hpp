#pragma once

#include <cstdint>
#include <deque>
#include <stdexcept>
#include <string>
#include <unordered_map>

#include "stitch/tensor.hpp"

namespace stitch {

template <typename S>
struct Parameter {
    std::string name;
    Tensor<S> value;

    bool trainable() const { return value.requires_grad(); }
    std::vector<S>& grad() {
        value.node()->ensure_grad();
        return value.grad();
    }
};

// Ordered, name-unique parameter registry. Insertion order is the canonical
// order for checkpoints and optimizer state.
template <typename S>
class ParamStore {
public:
    Parameter<S>& add(const std::string& name, Tensor<S> init) {
        if (index_.count(name)) throw std::runtime_error("duplicate parameter name: " + name);
        init.set_requires_grad(true);
        params_.push_back(Parameter<S>{name, std::move(init)});
        index_[name] = params_.size() - 1;
        return params_.back();
    }

    Parameter<S>* find(const std::string& name) {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &params_[it->second];
    }
    const Parameter<S>* find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &params_[it->second];
    }

    size_t size() const { return params_.size(); }
    Parameter<S>& operator[](size_t i) { return params_[i]; }
    const Parameter<S>& operator[](size_t i) const { return params_[i]; }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    std::vector<Parameter<S>*> all() {
        std::vector<Parameter<S>*> v;
        for (auto& p : params_) v.push_back(&p);
        return v;
    }

    void zero_grad() {
        for (auto& p : params_) p.value.zero_grad();
    }

    void freeze() {
        for (auto& p : params_) p.value.set_requires_grad(false);
    }

    int64_t total_elements() const {
        int64_t n = 0;
        for (auto& p : params_) n += p.value.numel();
        return n;
    }

    // FNV-1a over raw parameter bytes in registry order; detects any drift.
    uint64_t content_hash() const {
        uint64_t h = 0xcbf29ce484222325ULL;
        auto mix = [&](const void* data, size_t len) {
            const unsigned char* b = (const unsigned char*)data;
            for (size_t i = 0; i < len; ++i) {
                h ^= b[i];
                h *= 0x100000001b3ULL;
            }
        };
        for (auto& p : params_) {
            mix(p.name.data(), p.name.size());
            mix(p.value.data(), (size_t)p.value.numel() * sizeof(S));
        }
        return h;
    }

private:
    std::deque<Parameter<S>> params_;
    std::unordered_map<std::string, size_t> index_;
};

}  // namespace stitch
