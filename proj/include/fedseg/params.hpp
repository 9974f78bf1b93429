#pragma once

#include "fedseg/tensor.hpp"

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace fedseg {

// Ordered, named collection of parameter tensors. The (name, shape) list in
// order is the model signature; two sets are combinable iff signatures match
// exactly. Holds data only — no gradients, no graph.
class ParamSet {
public:
    void add(std::string name, Tensor value);

    bool has(const std::string& name) const { return index_.count(name) > 0; }
    const Tensor& at(const std::string& name) const;
    std::size_t size() const { return items_.size(); }
    bool empty() const { return items_.empty(); }

    const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }

    // true iff names, order and shapes all match; on mismatch *why names the
    // first offending entry
    bool same_signature(const ParamSet& other, std::string* why = nullptr) const;

    ParamSet clone() const;

    bool bitwise_equal(const ParamSet& other) const;

private:
    std::vector<std::pair<std::string, Tensor>> items_;
    std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace fedseg
