#include "ebr/checkpoint.hpp"

#include <fstream>

#include "ebr/binary_io.hpp"

namespace ebr {

namespace {
constexpr std::string_view kCheckpointMagic = "EBRCK1";
}

void Checkpoint::add(const std::string& name, const MatrixF& m) {
    NamedTensor t;
    t.name = name;
    t.dims = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
    t.data.assign(m.data(), m.data() + m.size());
    tensors.push_back(std::move(t));
}

bool Checkpoint::has(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return true;
    return false;
}

const NamedTensor& Checkpoint::get(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return t;
    throw InputError("checkpoint has no tensor \"" + name + "\"");
}

MatrixF Checkpoint::matrix(const std::string& name) const {
    const auto& t = get(name);
    if (t.dims.size() != 2) throw InputError("tensor \"" + name + "\" is not 2-D");
    MatrixF m(t.dims[0], t.dims[1]);
    std::copy(t.data.begin(), t.data.end(), m.data());
    return m;
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write " + path.string());
    io::Writer w(out);
    w.bytes(kCheckpointMagic);
    w.string(ck.meta.dump());
    w.u32(static_cast<std::uint32_t>(ck.tensors.size()));
    for (const auto& t : ck.tensors) {
        w.string(t.name);
        w.u32(static_cast<std::uint32_t>(t.dims.size()));
        for (auto d : t.dims) w.u32(d);
        w.f32s(t.data);
    }
    if (!out) throw InputError("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open " + path.string());
    io::Reader r(in, path.string());
    r.expect_magic(kCheckpointMagic);
    Checkpoint ck;
    try {
        ck.meta = nlohmann::json::parse(r.string());
    } catch (const nlohmann::json::exception& e) {
        throw InputError(path.string() + ": bad config block: " + e.what());
    }
    std::uint32_t n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
        NamedTensor t;
        t.name = r.string();
        std::uint32_t nd = r.u32();
        std::size_t count = 1;
        for (std::uint32_t k = 0; k < nd; ++k) {
            t.dims.push_back(r.u32());
            count *= t.dims.back();
        }
        t.data.resize(count);
        r.f32s(t.data);
        ck.tensors.push_back(std::move(t));
    }
    return ck;
}

} // namespace ebr
