#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "i3css/corpus.hpp"
#include "i3css/errors.hpp"
#include "i3css/model.hpp"

// Binary layout (all integers little-endian):
//   "I3CK" | u32 version | u64 header length | header JSON
//   u32 tensor count | per tensor:
//     u32 name length | name | u8 dtype (1 = f32, 2 = f64) | u32 rank |
//     u64 dims[rank] | payload
// The header JSON holds the model config, the step and normalization stats.

namespace i3css {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

inline constexpr char kCheckpointMagic[4] = {'I', '3', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointTensor {
    std::string name;
    Shape shape;
    Precision dtype = Precision::F32;
    std::vector<double> values;  // exact for either dtype

    bool operator==(const CheckpointTensor&) const = default;
};

struct Checkpoint {
    ModelConfig config;
    std::uint64_t step = 0;
    NormStats norm;
    std::vector<CheckpointTensor> tensors;
};

template <typename T>
constexpr Precision precision_of() {
    return sizeof(T) == 4 ? Precision::F32 : Precision::F64;
}

template <typename T>
Checkpoint to_checkpoint(const Model<T>& model, std::uint64_t step = 0, const NormStats& norm = {}) {
    Checkpoint c;
    c.config = model.config;
    c.config.precision = precision_of<T>();
    c.step = step;
    c.norm = norm;
    for (auto& [name, t] : model.named())
        c.tensors.push_back({name, t.shape(), precision_of<T>(), std::vector<double>(t.data().begin(), t.data().end())});
    return c;
}

// Checks every tensor name and shape against the layout the config implies.
inline void validate_checkpoint(const Checkpoint& c) {
    auto ref = Model<float>::init(c.config).named();
    if (ref.size() != c.tensors.size())
        throw ValidationError("checkpoint holds " + std::to_string(c.tensors.size()) + " tensors, config implies " +
                              std::to_string(ref.size()));
    for (std::size_t i = 0; i < ref.size(); ++i) {
        const auto& t = c.tensors[i];
        if (t.name != ref[i].first)
            throw ValidationError("checkpoint tensor " + std::to_string(i) + " is '" + t.name + "', expected '" +
                                  ref[i].first + "'");
        if (t.shape != ref[i].second.shape())
            throw ValidationError("checkpoint tensor '" + t.name + "' has shape " + shape_str(t.shape) +
                                  ", config implies " + shape_str(ref[i].second.shape()));
    }
}

template <typename T>
Model<T> model_from_checkpoint(const Checkpoint& c) {
    validate_checkpoint(c);
    auto m = Model<T>::init(c.config);
    m.config.precision = precision_of<T>();
    auto slots = parameter_slots(m);
    for (std::size_t i = 0; i < slots.size(); ++i) {
        auto data = slots[i]->data();
        for (std::size_t k = 0; k < data.size(); ++k) data[k] = static_cast<T>(c.tensors[i].values[k]);
    }
    return m;
}

namespace detail {

template <typename U>
void put(std::string& out, U v) {
    char b[sizeof(U)];
    std::memcpy(b, &v, sizeof(U));
    out.append(b, sizeof(U));
}

class ByteReader {
  public:
    explicit ByteReader(const std::string& bytes) : s_(bytes) {}

    template <typename U>
    U get(const char* what) {
        need(sizeof(U), what);
        U v;
        std::memcpy(&v, s_.data() + pos_, sizeof(U));
        pos_ += sizeof(U);
        return v;
    }

    std::string take(std::size_t n, const char* what) {
        need(n, what);
        std::string r = s_.substr(pos_, n);
        pos_ += n;
        return r;
    }

    std::size_t pos() const { return pos_; }
    bool done() const { return pos_ == s_.size(); }

  private:
    void need(std::size_t n, const char* what) const {
        if (s_.size() - pos_ < n) throw IoError(std::string("truncated checkpoint while reading ") + what, pos_);
    }
    const std::string& s_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& c) {
    std::string out(kCheckpointMagic, 4);
    detail::put<std::uint32_t>(out, kCheckpointVersion);
    nlohmann::json header = {{"config", c.config},
                             {"step", c.step},
                             {"norm_stats",
                              {{"pitch_mean", c.norm.pitch_mean},
                               {"pitch_std", c.norm.pitch_std},
                               {"energy_mean", c.norm.energy_mean},
                               {"energy_std", c.norm.energy_std}}}};
    const std::string h = header.dump();
    detail::put<std::uint64_t>(out, h.size());
    out += h;
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(c.tensors.size()));
    for (auto& t : c.tensors) {
        detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
        out += t.name;
        detail::put<std::uint8_t>(out, t.dtype == Precision::F32 ? 1 : 2);
        detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
        for (auto d : t.shape) detail::put<std::uint64_t>(out, d);
        for (double v : t.values) {
            if (t.dtype == Precision::F32)
                detail::put<float>(out, static_cast<float>(v));
            else
                detail::put<double>(out, v);
        }
    }
    return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
    detail::ByteReader r(bytes);
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
        throw FormatError("not a checkpoint: bad magic");
    r.take(4, "magic");
    const auto version = r.get<std::uint32_t>("version");
    if (version != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    const auto hlen = r.get<std::uint64_t>("header length");
    const std::string h = r.take(static_cast<std::size_t>(hlen), "header");

    Checkpoint c;
    try {
        auto header = nlohmann::json::parse(h);
        c.config = header.at("config").get<ModelConfig>();
        c.step = header.at("step").get<std::uint64_t>();
        const auto& ns = header.at("norm_stats");
        c.norm = {ns.at("pitch_mean").get<double>(), ns.at("pitch_std").get<double>(),
                  ns.at("energy_mean").get<double>(), ns.at("energy_std").get<double>()};
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint header is invalid: ") + e.what());
    }

    const auto count = r.get<std::uint32_t>("tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
        CheckpointTensor t;
        t.name = r.take(r.get<std::uint32_t>("name length"), "tensor name");
        const auto dtype = r.get<std::uint8_t>("dtype");
        if (dtype != 1 && dtype != 2)
            throw FormatError("tensor '" + t.name + "' has unknown dtype code " + std::to_string(dtype));
        t.dtype = dtype == 1 ? Precision::F32 : Precision::F64;
        const auto rank = r.get<std::uint32_t>("rank");
        for (std::uint32_t k = 0; k < rank; ++k) t.shape.push_back(r.get<std::uint64_t>("dims"));
        const std::size_t n = shape_numel(t.shape);
        t.values.reserve(n);
        for (std::size_t k = 0; k < n; ++k)
            t.values.push_back(dtype == 1 ? static_cast<double>(r.get<float>("payload")) : r.get<double>("payload"));
        c.tensors.push_back(std::move(t));
    }
    if (!r.done()) throw FormatError("trailing bytes after checkpoint at offset " + std::to_string(r.pos()));
    validate_checkpoint(c);
    return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
    const std::string bytes = serialize_checkpoint(c);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("cannot write " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return deserialize_checkpoint(ss.str());
}

}  // namespace i3css
