#include "fedseg/params.hpp"

namespace fedseg {

void ParamSet::add(std::string name, Tensor value) {
    if (!value.defined()) throw TensorError("ParamSet::add: undefined tensor for '" + name + "'");
    if (index_.count(name)) throw TensorError("ParamSet::add: duplicate name '" + name + "'");
    index_[name] = items_.size();
    items_.emplace_back(std::move(name), std::move(value));
}

const Tensor& ParamSet::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw TensorError("ParamSet: no parameter named '" + name + "'");
    return items_[it->second].second;
}

bool ParamSet::same_signature(const ParamSet& other, std::string* why) const {
    if (items_.size() != other.items_.size()) {
        if (why)
            *why = "parameter count " + std::to_string(items_.size()) + " vs " +
                   std::to_string(other.items_.size());
        return false;
    }
    for (std::size_t i = 0; i < items_.size(); ++i) {
        if (items_[i].first != other.items_[i].first) {
            if (why)
                *why = "name mismatch at position " + std::to_string(i) + ": '" +
                       items_[i].first + "' vs '" + other.items_[i].first + "'";
            return false;
        }
        if (items_[i].second.shape() != other.items_[i].second.shape()) {
            if (why)
                *why = "shape mismatch for '" + items_[i].first + "': " +
                       shape_str(items_[i].second.shape()) + " vs " +
                       shape_str(other.items_[i].second.shape());
            return false;
        }
    }
    return true;
}

ParamSet ParamSet::clone() const {
    ParamSet out;
    for (const auto& [name, t] : items_) out.add(name, t.clone());
    return out;
}

bool ParamSet::bitwise_equal(const ParamSet& other) const {
    if (!same_signature(other)) return false;
    for (std::size_t i = 0; i < items_.size(); ++i) {
        const auto& a = items_[i].second.array();
        const auto& b = other.items_[i].second.array();
        if (std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) != 0) return false;
    }
    return true;
}

}  // namespace fedseg
