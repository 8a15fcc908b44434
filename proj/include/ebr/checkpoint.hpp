#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "ebr/common.hpp"

namespace ebr {

struct NamedTensor {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::vector<float> data;
};

// "EBRCK1" container: magic, JSON config block (u32 length + UTF-8), u32
// tensor count, then per tensor: name (u32 length + bytes), u32 ndims, u32
// dims, float32 payload. Little-endian throughout.
struct Checkpoint {
    nlohmann::json meta = nlohmann::json::object();
    std::vector<NamedTensor> tensors;

    void add(const std::string& name, const MatrixF& m);
    bool has(const std::string& name) const;
    const NamedTensor& get(const std::string& name) const;
    MatrixF matrix(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

} // namespace ebr
