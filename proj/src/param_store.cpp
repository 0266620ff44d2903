#include "bolmo/param_store.h"

#include "bolmo/errors.h"

namespace bolmo {

bool starts_with(const std::string & s, const std::string & prefix) { return s.rfind(prefix, 0) == 0; }

void ParamStore::set(const std::string & name, Tensor value) { tensors_[name] = std::move(value); }

const Tensor & ParamStore::get(const std::string & name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw InputError("parameter not found: " + name);
    return it->second;
}

Tensor & ParamStore::get_mut(const std::string & name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw InputError("parameter not found: " + name);
    return it->second;
}

std::vector<std::string> ParamStore::names() const {
    std::vector<std::string> out;
    out.reserve(tensors_.size());
    for (const auto & [name, _] : tensors_) out.push_back(name);
    return out;
}

int64_t ParamStore::numel(const std::function<bool(const std::string &)> & filter) const {
    int64_t n = 0;
    for (const auto & [name, t] : tensors_) {
        if (!filter || filter(name)) n += t.numel();
    }
    return n;
}

ParamStore ParamStore::with_prefix(const std::string & prefix) const {
    ParamStore out;
    for (const auto & [name, t] : tensors_) {
        if (starts_with(name, prefix)) out.set(name, t);
    }
    return out;
}

bool ParamStore::operator==(const ParamStore & other) const {
    if (tensors_.size() != other.tensors_.size()) return false;
    auto a = tensors_.begin();
    auto b = other.tensors_.begin();
    for (; a != tensors_.end(); ++a, ++b) {
        if (a->first != b->first || !bit_equal(a->second, b->second)) return false;
    }
    return true;
}

} // namespace bolmo
