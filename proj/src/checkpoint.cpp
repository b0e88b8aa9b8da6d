#include "subseg/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are written as raw little-endian scalars");

namespace subseg {

namespace {

constexpr char kMagic[4] = {'B', 'A', 'S', 'C'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t get_u32(std::istream& is, const std::string& what) {
    std::uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) {
        throw std::runtime_error("checkpoint: truncated while reading " + what);
    }
    return v;
}

}  // namespace

void write_checkpoint(const std::string& path, const ArrayMap& entries) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    os.write(kMagic, 4);
    put_u32(os, kVersion);
    put_u32(os, static_cast<std::uint32_t>(entries.size()));
    for (const auto& [name, arr] : entries) {
        put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        put_u32(os, static_cast<std::uint32_t>(arr.shape.size()));
        std::size_t numel = 1;
        for (int e : arr.shape) {
            put_u32(os, static_cast<std::uint32_t>(e));
            numel *= static_cast<std::size_t>(e);
        }
        if (numel != arr.data.size()) {
            throw std::runtime_error("checkpoint: entry " + name + " has inconsistent shape");
        }
        os.write(reinterpret_cast<const char*>(arr.data.data()),
                 static_cast<std::streamsize>(arr.data.size() * sizeof(double)));
    }
    if (!os) throw std::runtime_error("checkpoint: write to " + path + " failed");
}

ArrayMap read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
        throw std::runtime_error("checkpoint: " + path + " is not a BASC file");
    }
    std::uint32_t version = get_u32(is, "version");
    if (version != kVersion) {
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    }
    std::uint32_t count = get_u32(is, "entry count");
    ArrayMap out;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint32_t name_len = get_u32(is, "name length");
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) {
            throw std::runtime_error("checkpoint: truncated entry name");
        }
        std::uint32_t rank = get_u32(is, "rank of " + name);
        NamedArray arr;
        std::size_t numel = 1;
        for (std::uint32_t r = 0; r < rank; ++r) {
            std::uint32_t e = get_u32(is, "extent of " + name);
            arr.shape.push_back(static_cast<int>(e));
            numel *= e;
        }
        arr.data.resize(numel);
        if (!is.read(reinterpret_cast<char*>(arr.data.data()),
                     static_cast<std::streamsize>(numel * sizeof(double)))) {
            throw std::runtime_error("checkpoint: truncated payload of " + name);
        }
        out.emplace(std::move(name), std::move(arr));
    }
    return out;
}

void pack_params(const Params& p, const std::string& prefix, ArrayMap& into) {
    for (const auto& [name, t] : p.weights) {
        into[prefix + name] = NamedArray{t.shape, t.data};
    }
    for (const auto& [name, rs] : p.stats) {
        into[prefix + "stats/" + name + "/mean"] =
            NamedArray{{static_cast<int>(rs.mean.size())}, rs.mean};
        into[prefix + "stats/" + name + "/var"] =
            NamedArray{{static_cast<int>(rs.var.size())}, rs.var};
        into[prefix + "stats/" + name + "/count"] = NamedArray{{1}, {rs.count}};
    }
}

void unpack_params(const ArrayMap& entries, const std::string& prefix, Params& into) {
    auto fetch = [&](const std::string& name) -> const NamedArray& {
        auto it = entries.find(name);
        if (it == entries.end()) {
            throw std::runtime_error("checkpoint: missing entry " + name);
        }
        return it->second;
    };
    for (auto& [name, t] : into.weights) {
        const NamedArray& arr = fetch(prefix + name);
        if (arr.shape != t.shape) {
            throw std::runtime_error("checkpoint: entry " + prefix + name + " has shape " +
                                     shape_str(arr.shape) + ", model expects " +
                                     shape_str(t.shape));
        }
        t.data = arr.data;
    }
    for (auto& [name, rs] : into.stats) {
        const NamedArray& mean = fetch(prefix + "stats/" + name + "/mean");
        const NamedArray& var = fetch(prefix + "stats/" + name + "/var");
        const NamedArray& count = fetch(prefix + "stats/" + name + "/count");
        if (mean.data.size() != rs.mean.size() || var.data.size() != rs.var.size()) {
            throw std::runtime_error("checkpoint: stats entry " + name + " has wrong extent");
        }
        rs.mean = mean.data;
        rs.var = var.data;
        rs.count = count.data.at(0);
    }
}

ArrayMap pack_model(const ModelState& state) {
    ArrayMap out;
    pack_params(state.student, "student/", out);
    pack_params(state.teacher, "teacher/", out);
    out["meta/step"] = NamedArray{{1}, {static_cast<double>(state.step)}};
    return out;
}

ModelState unpack_model(const ArrayMap& entries, const NetConfig& config) {
    ModelState state = build(config, 0);
    unpack_params(entries, "student/", state.student);
    unpack_params(entries, "teacher/", state.teacher);
    auto it = entries.find("meta/step");
    state.step = it == entries.end() ? 0 : static_cast<std::int64_t>(it->second.data.at(0));
    return state;
}

}  // namespace subseg
