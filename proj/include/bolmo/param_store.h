#pragma once

#include "bolmo/tensor.h"

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace bolmo {

// Named parameter tensors. Ordered by name so iteration (and therefore
// serialization and optimizer updates) is deterministic.
class ParamStore {
public:
    using Map = std::map<std::string, Tensor>;

    void set(const std::string & name, Tensor value);
    const Tensor & get(const std::string & name) const;
    Tensor & get_mut(const std::string & name);
    bool contains(const std::string & name) const { return tensors_.count(name) != 0; }
    void erase(const std::string & name) { tensors_.erase(name); }

    size_t size() const { return tensors_.size(); }
    Map::const_iterator begin() const { return tensors_.begin(); }
    Map::const_iterator end() const { return tensors_.end(); }
    Map::iterator begin() { return tensors_.begin(); }
    Map::iterator end() { return tensors_.end(); }

    std::vector<std::string> names() const;
    int64_t numel(const std::function<bool(const std::string &)> & filter = {}) const;

    // Sub-store of tensors whose names start with `prefix`.
    ParamStore with_prefix(const std::string & prefix) const;

    bool operator==(const ParamStore & other) const;

private:
    Map tensors_;
};

bool starts_with(const std::string & s, const std::string & prefix);

} // namespace bolmo
