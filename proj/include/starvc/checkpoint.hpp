#pragma once

#include <cstdio>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "starvc/nn.hpp"
#include "starvc/numerics/serialize.hpp"

// Checkpoint container: "SVCK", version, component manifest (name, frozen
// flag, tensor count), tensor records, then CRC32 over everything before it.
namespace starvc::ckpt {

using num::Tensor;

inline constexpr std::uint32_t kVersion = 1;

struct NamedTensor {
    std::string name;
    Tensor value;
};

struct Component {
    std::string name;
    bool frozen = false;
    std::vector<NamedTensor> tensors;

    const Tensor* find(const std::string& n) const {
        for (const auto& t : tensors)
            if (t.name == n) return &t.value;
        return nullptr;
    }
};

struct Checkpoint {
    std::vector<Component> components;

    const Component& component(const std::string& name) const {
        for (const auto& c : components)
            if (c.name == name) return c;
        throw FormatError("checkpoint has no component '" + name + "'");
    }
    bool has(const std::string& name) const {
        for (const auto& c : components)
            if (c.name == name) return true;
        return false;
    }
};

inline Component from_params(const std::string& name, const nn::ParamSet<float>& ps) {
    Component c{name, ps.frozen(), {}};
    for (const auto* p : ps.all()) c.tensors.push_back({p->name, p->value});
    return c;
}

/// Copy tensors into a parameter set; every parameter must be present with
/// a matching shape.
inline void load_params(const Component& c, nn::ParamSet<float>& ps) {
    for (auto* p : ps.all()) {
        const Tensor* t = c.find(p->name);
        if (!t) throw FormatError("component '" + c.name + "' lacks tensor '" + p->name + "'");
        if (t->shape() != p->value.shape())
            throw FormatError("tensor '" + p->name + "' has shape " + num::shape_str(t->shape()) + ", expected " +
                              num::shape_str(p->value.shape()));
        p->value = *t;
    }
}

inline std::vector<char> serialize(const Checkpoint& ck) {
    num::ByteWriter w;
    w.raw("SVCK", 4);
    w.u32(kVersion);
    w.u32(static_cast<std::uint32_t>(ck.components.size()));
    for (const auto& c : ck.components) {
        w.str(c.name);
        w.u32(c.frozen ? 1u : 0u);
        w.u32(static_cast<std::uint32_t>(c.tensors.size()));
    }
    for (const auto& c : ck.components)
        for (const auto& t : c.tensors) w.tensor(t.name, t.value);
    const auto crc = num::crc32_of(w.bytes().data(), w.bytes().size());
    w.u32(crc);
    return std::move(w.bytes());
}

inline Checkpoint deserialize(const std::vector<char>& bytes) {
    if (bytes.size() < 16) throw FormatError("checkpoint: file too short");
    const std::size_t body = bytes.size() - 4;
    num::ByteReader tail(bytes.data() + body, 4);
    if (tail.u32() != num::crc32_of(bytes.data(), body)) throw FormatError("checkpoint: CRC mismatch, refusing to load");
    num::ByteReader r(bytes.data(), body);
    if (r.raw(4) != "SVCK") throw FormatError("checkpoint: bad magic");
    if (const auto v = r.u32(); v != kVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(v));
    const auto n = r.u32();
    Checkpoint ck;
    std::vector<std::uint32_t> counts;
    for (std::uint32_t i = 0; i < n; ++i) {
        Component c;
        c.name = r.str();
        c.frozen = r.u32() != 0;
        counts.push_back(r.u32());
        ck.components.push_back(std::move(c));
    }
    for (std::uint32_t i = 0; i < n; ++i)
        for (std::uint32_t k = 0; k < counts[i]; ++k) {
            NamedTensor t;
            t.value = r.tensor(t.name);
            ck.components[i].tensors.push_back(std::move(t));
        }
    if (!r.done()) throw FormatError("checkpoint: trailing bytes before CRC");
    return ck;
}

inline void save(const Checkpoint& ck, const std::string& path) {
    const auto bytes = serialize(ck);
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw DataError("cannot write " + path);
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!os) throw DataError("short write to " + path);
    }
    std::rename(tmp.c_str(), path.c_str());
}

inline std::vector<char> read_file(const std::string& path, const std::string& producer) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ArtifactMissingError(path + " not found (run `" + producer + "`)");
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline Checkpoint load(const std::string& path, const std::string& producer) { return deserialize(read_file(path, producer)); }

}  // namespace starvc::ckpt
