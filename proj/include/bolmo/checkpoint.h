#pragma once

#include "bolmo/kv.h"
#include "bolmo/model.h"
#include "bolmo/param_store.h"
#include "bolmo/tokenizer.h"

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace bolmo {

constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    ModelConfig config;
    KvMap meta; // free-form metadata, stored under "meta." in the header
    ParamStore params;
    std::optional<SubwordVocab> vocab;
};

// Layout is documented in docs/checkpoint_format.md.
std::string serialize_checkpoint(const Checkpoint & ck);
// Throws FormatError (truncated or malformed), VersionError or ChecksumError.
Checkpoint deserialize_checkpoint(std::string_view data);

void save_checkpoint(const std::string & path, const Checkpoint & ck);
// Throws NotFoundError when the file cannot be opened.
Checkpoint load_checkpoint(const std::string & path);

uint64_t fnv1a64(std::string_view data);

} // namespace bolmo
