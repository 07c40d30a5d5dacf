#pragma once

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "i3css/errors.hpp"

namespace i3css {

struct Utterance {
    std::size_t speaker = 0;
    std::vector<double> semantic;
    std::vector<double> prosodic;

    bool operator==(const Utterance&) const = default;
};

// One dialogue: utterances 1..N (the last one is the target) and the
// phoneme-level prosody of the target.
struct DialogueRecord {
    std::vector<Utterance> utterances;
    std::vector<std::size_t> phonemes;
    std::vector<double> pitch;
    std::vector<double> energy;
    std::vector<int> duration;

    bool operator==(const DialogueRecord&) const = default;
};

using Corpus = std::vector<DialogueRecord>;

struct GeneratorConfig {
    std::size_t num_dialogues = 2000;
    std::size_t turns_min = 2;
    std::size_t turns_max = 6;
    std::size_t d_z = 16;
    std::size_t d_t = 32;
    std::size_t d_s = 48;
    double noise_sigma = 0.05;
    std::size_t vocab = 64;
    std::size_t phonemes_min = 4;
    std::size_t phonemes_max = 12;
    std::size_t num_speakers = 2;
    std::uint64_t seed = 0;
    // Multiplies the cross-modal maps A_ps and A_sp; 0 gives an uncoupled corpus.
    double coupling = 1.0;

    void validate() const {
        if (turns_min < 2) throw ContractError("turns_min must be at least 2, got " + std::to_string(turns_min));
        if (turns_max < turns_min) throw ContractError("turns_max must be >= turns_min");
        if (d_z < 1 || d_t < 1 || d_s < 1) throw ContractError("d_z, d_t, d_s must be at least 1");
        if (!(noise_sigma >= 0)) throw ContractError("noise_sigma must be >= 0");
        if (vocab < 1) throw ContractError("vocab must be at least 1");
        if (phonemes_min < 1 || phonemes_max < phonemes_min)
            throw ContractError("phoneme count range must satisfy 1 <= phonemes_min <= phonemes_max");
        if (num_speakers < 1) throw ContractError("num_speakers must be at least 1");
    }
};

inline void to_json(nlohmann::json& j, const GeneratorConfig& c) {
    j = {{"num_dialogues", c.num_dialogues}, {"turns_min", c.turns_min},     {"turns_max", c.turns_max},
         {"d_z", c.d_z},                     {"d_t", c.d_t},                 {"d_s", c.d_s},
         {"noise_sigma", c.noise_sigma},     {"vocab", c.vocab},             {"phonemes_min", c.phonemes_min},
         {"phonemes_max", c.phonemes_max},   {"num_speakers", c.num_speakers}, {"seed", c.seed},
         {"coupling", c.coupling}};
}

// Missing keys keep their defaults; unknown keys are rejected.
inline void from_json(const nlohmann::json& j, GeneratorConfig& c) {
    if (!j.is_object()) throw ValidationError("generator config must be a JSON object");
    for (auto& [key, val] : j.items()) {
        auto num = [&](auto& field) {
            if (!val.is_number()) throw ValidationError("generator config: " + key + " must be a number");
            if constexpr (std::is_integral_v<std::decay_t<decltype(field)>>) {
                if (!val.is_number_integer() || val.get<long long>() < 0)
                    throw ValidationError("generator config: " + key + " must be a nonnegative integer");
            }
            field = val.get<std::decay_t<decltype(field)>>();
        };
        if (key == "num_dialogues") num(c.num_dialogues);
        else if (key == "turns_min") num(c.turns_min);
        else if (key == "turns_max") num(c.turns_max);
        else if (key == "d_z") num(c.d_z);
        else if (key == "d_t") num(c.d_t);
        else if (key == "d_s") num(c.d_s);
        else if (key == "noise_sigma") num(c.noise_sigma);
        else if (key == "vocab") num(c.vocab);
        else if (key == "phonemes_min") num(c.phonemes_min);
        else if (key == "phonemes_max") num(c.phonemes_max);
        else if (key == "num_speakers") num(c.num_speakers);
        else if (key == "seed") num(c.seed);
        else if (key == "coupling") num(c.coupling);
        else throw ValidationError("generator config: unknown key '" + key + "'");
    }
}

// Row-major dense matrix used only by the generator.
struct DenseMatrix {
    std::size_t rows = 0, cols = 0;
    std::vector<double> v;

    DenseMatrix() = default;
    DenseMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0) {}
    double& operator()(std::size_t i, std::size_t j) { return v[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return v[i * cols + j]; }

    std::vector<double> apply(const std::vector<double>& x) const {
        std::vector<double> y(rows, 0.0);
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) y[i] += v[i * cols + j] * x[j];
        return y;
    }
};

// Largest singular value by power iteration on A^T A.
inline double spectral_norm(const DenseMatrix& a, int iters = 200) {
    std::vector<double> x(a.cols, 1.0);
    double sigma = 0.0;
    for (int it = 0; it < iters; ++it) {
        auto y = a.apply(x);
        std::vector<double> z(a.cols, 0.0);
        for (std::size_t i = 0; i < a.rows; ++i)
            for (std::size_t j = 0; j < a.cols; ++j) z[j] += a(i, j) * y[i];
        double nz = 0.0;
        for (double e : z) nz += e * e;
        nz = std::sqrt(nz);
        if (nz == 0.0) return 0.0;
        double nx = 0.0;
        for (double e : x) nx += e * e;
        sigma = std::sqrt(nz / std::sqrt(nx));
        for (std::size_t j = 0; j < a.cols; ++j) x[j] = z[j] / nz;
    }
    return sigma;
}

// The fixed per-corpus maps of the latent dynamics.
struct LatentMaps {
    DenseMatrix A_ss, A_sp, A_ps, A_pp;  // [d_z x d_z]
    DenseMatrix W_t;                     // [d_t x d_z]
    DenseMatrix W_s;                     // [d_s x d_z]
    std::vector<double> w_p, w_e, w_d;   // [d_z]
    std::vector<double> c, e, d;         // per-phoneme offsets [vocab]

    static LatentMaps zeros(const GeneratorConfig& cfg) {
        LatentMaps m;
        m.A_ss = m.A_sp = m.A_ps = m.A_pp = DenseMatrix(cfg.d_z, cfg.d_z);
        m.W_t = DenseMatrix(cfg.d_t, cfg.d_z);
        m.W_s = DenseMatrix(cfg.d_s, cfg.d_z);
        m.w_p = m.w_e = m.w_d = std::vector<double>(cfg.d_z, 0.0);
        m.c = m.e = m.d = std::vector<double>(cfg.vocab, 0.0);
        return m;
    }
};

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

// Per-dialogue stream: seed xor index, mixed.
inline std::mt19937_64 dialogue_rng(std::uint64_t seed, std::size_t index) {
    return std::mt19937_64(splitmix64(seed ^ static_cast<std::uint64_t>(index)));
}

inline LatentMaps draw_latent_maps(const GeneratorConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(splitmix64(~cfg.seed));
    std::normal_distribution<double> normal(0.0, 1.0);
    auto draw = [&](std::size_t r, std::size_t c, double sd) {
        DenseMatrix m(r, c);
        for (auto& x : m.v) x = sd * normal(rng);
        return m;
    };
    auto contract = [&](DenseMatrix m) {
        double s = spectral_norm(m);
        if (s > 0)
            for (auto& x : m.v) x *= 0.9 / s;
        return m;
    };
    auto vec = [&](std::size_t n, double sd) {
        std::vector<double> v(n);
        for (auto& x : v) x = sd * normal(rng);
        return v;
    };
    const double dz = static_cast<double>(cfg.d_z);
    LatentMaps m;
    m.A_ss = contract(draw(cfg.d_z, cfg.d_z, 1.0));
    m.A_sp = contract(draw(cfg.d_z, cfg.d_z, 1.0));
    m.A_ps = contract(draw(cfg.d_z, cfg.d_z, 1.0));
    m.A_pp = contract(draw(cfg.d_z, cfg.d_z, 1.0));
    for (auto& x : m.A_sp.v) x *= cfg.coupling;
    for (auto& x : m.A_ps.v) x *= cfg.coupling;
    m.W_t = draw(cfg.d_t, cfg.d_z, 1.5 / std::sqrt(dz));
    m.W_s = draw(cfg.d_s, cfg.d_z, 1.5 / std::sqrt(dz));
    m.w_p = vec(cfg.d_z, 2.0 / std::sqrt(dz));
    m.w_e = vec(cfg.d_z, 2.0 / std::sqrt(dz));
    m.w_d = vec(cfg.d_z, 1.0 / std::sqrt(dz));
    m.c = vec(cfg.vocab, 0.5);
    m.e = vec(cfg.vocab, 0.5);
    m.d = vec(cfg.vocab, 0.5);
    return m;
}

struct NormStats {
    double pitch_mean = 0.0, pitch_std = 1.0;
    double energy_mean = 0.0, energy_std = 1.0;
};

struct GeneratedCorpus {
    Corpus records;
    NormStats stats;
    // Per dialogue, w_p . z^p_N: the history-explained part of the pitch target.
    std::vector<double> pitch_latent;
};

inline GeneratedCorpus generate_corpus(const GeneratorConfig& cfg, const LatentMaps& maps) {
    cfg.validate();
    GeneratedCorpus out;
    out.records.reserve(cfg.num_dialogues);
    const std::size_t dz = cfg.d_z;

    auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
        return s;
    };

    for (std::size_t idx = 0; idx < cfg.num_dialogues; ++idx) {
        auto rng = dialogue_rng(cfg.seed, idx);
        std::normal_distribution<double> normal(0.0, 1.0);
        std::uniform_int_distribution<std::size_t> turns(cfg.turns_min, cfg.turns_max);
        std::uniform_int_distribution<std::size_t> length(cfg.phonemes_min, cfg.phonemes_max);
        std::uniform_int_distribution<std::size_t> phone(0, cfg.vocab - 1);
        auto noise = [&]() { return cfg.noise_sigma * normal(rng); };

        const std::size_t n = turns(rng);
        std::vector<double> zs(dz), zp(dz);
        for (auto& x : zs) x = normal(rng);
        for (auto& x : zp) x = normal(rng);

        DialogueRecord rec;
        for (std::size_t i = 0; i < n; ++i) {
            if (i > 0) {
                auto a = maps.A_ss.apply(zs);
                auto b = maps.A_ps.apply(zp);
                auto c = maps.A_pp.apply(zp);
                auto d = maps.A_sp.apply(zs);
                for (std::size_t k = 0; k < dz; ++k) {
                    zs[k] = std::tanh(a[k] + b[k]) + noise();
                    zp[k] = std::tanh(c[k] + d[k]) + noise();
                }
            }
            Utterance u;
            u.speaker = i % cfg.num_speakers;
            for (double x : maps.W_t.apply(zs)) u.semantic.push_back(std::tanh(x) + noise());
            for (double x : maps.W_s.apply(zp)) u.prosodic.push_back(std::tanh(x) + noise());
            rec.utterances.push_back(std::move(u));
        }

        const double lp = dot(maps.w_p, zp), le = dot(maps.w_e, zp), ld = dot(maps.w_d, zp);
        const std::size_t len = length(rng);
        for (std::size_t j = 0; j < len; ++j) {
            std::size_t ph = phone(rng);
            rec.phonemes.push_back(ph);
            rec.pitch.push_back(lp + maps.c[ph]);
            rec.energy.push_back(le + maps.e[ph]);
            double dur = std::round(4.0 + 2.0 * ld + maps.d[ph]);
            rec.duration.push_back(static_cast<int>(std::clamp(dur, 1.0, 8.0)));
        }
        out.pitch_latent.push_back(lp);
        out.records.push_back(std::move(rec));
    }

    // z-normalize pitch and energy over every phoneme position in the corpus.
    auto normalize = [&](auto member, double& mean, double& sd) {
        double s = 0.0, ss = 0.0;
        std::size_t cnt = 0;
        for (auto& r : out.records)
            for (double x : r.*member) {
                s += x;
                ++cnt;
            }
        mean = cnt ? s / static_cast<double>(cnt) : 0.0;
        for (auto& r : out.records)
            for (double x : r.*member) ss += (x - mean) * (x - mean);
        sd = cnt ? std::sqrt(ss / static_cast<double>(cnt)) : 1.0;
        if (!(sd > 0)) sd = 1.0;
        for (auto& r : out.records)
            for (double& x : r.*member) x = (x - mean) / sd;
    };
    normalize(&DialogueRecord::pitch, out.stats.pitch_mean, out.stats.pitch_std);
    normalize(&DialogueRecord::energy, out.stats.energy_mean, out.stats.energy_std);
    return out;
}

inline GeneratedCorpus generate_corpus(const GeneratorConfig& cfg) {
    return generate_corpus(cfg, draw_latent_maps(cfg));
}

// ---------------------------------------------------------------------------
// JSON Lines format.

namespace detail {

inline void write_number(std::string& out, double x) {
    if (!std::isfinite(x)) throw ValidationError("cannot serialize non-finite value");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    out += buf;
}

template <typename V>
void write_array(std::string& out, const V& v) {
    out += '[';
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ',';
        if constexpr (std::is_floating_point_v<typename V::value_type>)
            write_number(out, v[i]);
        else
            out += std::to_string(v[i]);
    }
    out += ']';
}

inline bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

inline std::string read_file_text(const std::string& path) {
    if (ends_with(path, ".gz")) {
        gzFile f = gzopen(path.c_str(), "rb");
        if (!f) throw IoError("cannot open " + path);
        std::string out;
        char buf[1 << 16];
        int n;
        while ((n = gzread(f, buf, sizeof buf)) > 0) out.append(buf, static_cast<std::size_t>(n));
        int err = 0;
        const char* msg = gzerror(f, &err);
        gzclose(f);
        if (n < 0 || (err != Z_OK && err != Z_STREAM_END)) throw IoError("cannot decompress " + path + ": " + msg);
        return out;
    }
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file_text(const std::string& path, const std::string& text) {
    if (ends_with(path, ".gz")) {
        gzFile f = gzopen(path.c_str(), "wb9");
        if (!f) throw IoError("cannot open " + path + " for writing");
        if (!text.empty() && gzwrite(f, text.data(), static_cast<unsigned>(text.size())) == 0) {
            gzclose(f);
            throw IoError("cannot write " + path);
        }
        if (gzclose(f) != Z_OK) throw IoError("cannot finish " + path);
        return;
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw IoError("cannot write " + path);
}

class FieldReader {
  public:
    FieldReader(std::size_t line) : line_(line) {}

    [[noreturn]] void fail(const std::string& field, const std::string& why) const {
        throw ValidationError("line " + std::to_string(line_) + ": field '" + field + "' " + why);
    }

    const nlohmann::json& member(const nlohmann::json& obj, const std::string& key, const std::string& path) const {
        if (!obj.is_object()) fail(path, "must be an object");
        auto it = obj.find(key);
        if (it == obj.end()) fail(path.empty() ? key : path + "." + key, "is missing");
        return *it;
    }

    std::vector<double> reals(const nlohmann::json& j, const std::string& field) const {
        if (!j.is_array()) fail(field, "must be an array of numbers");
        std::vector<double> v;
        v.reserve(j.size());
        for (auto& e : j) {
            if (!e.is_number()) fail(field, "must contain only numbers");
            v.push_back(e.get<double>());
        }
        return v;
    }

    template <typename I>
    std::vector<I> ints(const nlohmann::json& j, const std::string& field, long long min) const {
        if (!j.is_array()) fail(field, "must be an array of integers");
        std::vector<I> v;
        for (auto& e : j) {
            if (!e.is_number_integer()) fail(field, "must contain only integers");
            auto x = e.get<long long>();
            if (x < min) fail(field, "contains " + std::to_string(x) + ", below minimum " + std::to_string(min));
            v.push_back(static_cast<I>(x));
        }
        return v;
    }

    std::size_t line() const { return line_; }

  private:
    std::size_t line_;
};

inline std::vector<Utterance> parse_utterances(const nlohmann::json& j, const FieldReader& r) {
    const auto& us = r.member(j, "utterances", "");
    if (!us.is_array()) r.fail("utterances", "must be an array");
    std::vector<Utterance> out;
    for (std::size_t i = 0; i < us.size(); ++i) {
        const std::string base = "utterances[" + std::to_string(i) + "]";
        const auto& u = us[i];
        if (!u.is_object()) r.fail(base, "must be an object");
        Utterance utt;
        const auto& sp = r.member(u, "speaker", base);
        if (!sp.is_number_integer() || sp.get<long long>() < 0) r.fail(base + ".speaker", "must be a nonnegative integer");
        utt.speaker = sp.get<std::size_t>();
        utt.semantic = r.reals(r.member(u, "semantic", base), base + ".semantic");
        utt.prosodic = r.reals(r.member(u, "prosodic", base), base + ".prosodic");
        if (utt.semantic.empty()) r.fail(base + ".semantic", "must not be empty");
        if (utt.prosodic.empty()) r.fail(base + ".prosodic", "must not be empty");
        if (!out.empty()) {
            if (utt.semantic.size() != out[0].semantic.size())
                r.fail(base + ".semantic", "has dimension " + std::to_string(utt.semantic.size()) + ", expected " +
                                               std::to_string(out[0].semantic.size()));
            if (utt.prosodic.size() != out[0].prosodic.size())
                r.fail(base + ".prosodic", "has dimension " + std::to_string(utt.prosodic.size()) + ", expected " +
                                               std::to_string(out[0].prosodic.size()));
        }
        out.push_back(std::move(utt));
    }
    return out;
}

inline nlohmann::json parse_line(const std::string& text, std::size_t line) {
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(line, std::string("malformed JSON: ") + e.what());
    }
}

}  // namespace detail

inline std::string record_to_json_line(const DialogueRecord& r) {
    std::string out = "{\"utterances\":[";
    for (std::size_t i = 0; i < r.utterances.size(); ++i) {
        const auto& u = r.utterances[i];
        if (i) out += ',';
        out += "{\"speaker\":" + std::to_string(u.speaker) + ",\"semantic\":";
        detail::write_array(out, u.semantic);
        out += ",\"prosodic\":";
        detail::write_array(out, u.prosodic);
        out += '}';
    }
    out += "],\"target\":{\"phonemes\":";
    detail::write_array(out, r.phonemes);
    out += ",\"pitch\":";
    detail::write_array(out, r.pitch);
    out += ",\"energy\":";
    detail::write_array(out, r.energy);
    out += ",\"duration\":";
    detail::write_array(out, r.duration);
    out += "}}";
    return out;
}

// Full validation of one corpus line (N >= 2, complete target block).
inline DialogueRecord record_from_json(const nlohmann::json& j, std::size_t line) {
    detail::FieldReader r(line);
    if (!j.is_object()) r.fail("<root>", "must be an object");
    DialogueRecord rec;
    rec.utterances = detail::parse_utterances(j, r);
    if (rec.utterances.size() < 2)
        r.fail("utterances", "must hold at least 2 utterances, got " + std::to_string(rec.utterances.size()));
    const auto& t = r.member(j, "target", "");
    rec.phonemes = r.ints<std::size_t>(r.member(t, "phonemes", "target"), "target.phonemes", 0);
    rec.pitch = r.reals(r.member(t, "pitch", "target"), "target.pitch");
    rec.energy = r.reals(r.member(t, "energy", "target"), "target.energy");
    rec.duration = r.ints<int>(r.member(t, "duration", "target"), "target.duration", 1);
    const std::size_t len = rec.phonemes.size();
    if (len == 0) r.fail("target.phonemes", "must not be empty");
    if (rec.pitch.size() != len) r.fail("target.pitch", "length differs from target.phonemes");
    if (rec.energy.size() != len) r.fail("target.energy", "length differs from target.phonemes");
    if (rec.duration.size() != len) r.fail("target.duration", "length differs from target.phonemes");
    return rec;
}

struct IngestResult {
    Corpus records;
    std::size_t d_t = 0;
    std::size_t d_s = 0;
};

// Reads a corpus file and checks that feature dimensions agree across lines.
inline IngestResult ingest_external(const std::string& path) {
    const std::string text = detail::read_file_text(path);
    IngestResult out;
    std::size_t line_no = 0, first_line = 0;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        auto rec = record_from_json(detail::parse_line(line, line_no), line_no);
        const std::size_t dt = rec.utterances[0].semantic.size(), ds = rec.utterances[0].prosodic.size();
        if (out.records.empty()) {
            out.d_t = dt;
            out.d_s = ds;
            first_line = line_no;
        } else {
            if (dt != out.d_t)
                throw ValidationError("line " + std::to_string(line_no) + ": field 'semantic' has dimension " +
                                      std::to_string(dt) + " but line " + std::to_string(first_line) + " has " +
                                      std::to_string(out.d_t));
            if (ds != out.d_s)
                throw ValidationError("line " + std::to_string(line_no) + ": field 'prosodic' has dimension " +
                                      std::to_string(ds) + " but line " + std::to_string(first_line) + " has " +
                                      std::to_string(out.d_s));
        }
        out.records.push_back(std::move(rec));
    }
    return out;
}

inline Corpus read_corpus(const std::string& path) { return ingest_external(path).records; }

inline void write_corpus(const Corpus& records, const std::string& path) {
    std::string text;
    for (auto& r : records) {
        text += record_to_json_line(r);
        text += '\n';
    }
    detail::write_file_text(path, text);
}

// History-only input for inference: utterances are all history; prosody
// targets, if present, are ignored.
struct InferenceInput {
    std::vector<Utterance> history;
    std::vector<std::size_t> phonemes;
};

inline InferenceInput inference_input_from_json(const nlohmann::json& j) {
    detail::FieldReader r(1);
    if (!j.is_object()) r.fail("<root>", "must be an object");
    InferenceInput in;
    in.history = detail::parse_utterances(j, r);
    if (in.history.empty()) r.fail("utterances", "must hold at least 1 history utterance");
    auto t = j.find("target");
    if (t == j.end() || !t->is_object() || !t->contains("phonemes")) r.fail("target.phonemes", "is missing");
    in.phonemes = r.ints<std::size_t>((*t)["phonemes"], "target.phonemes", 0);
    if (in.phonemes.empty()) r.fail("target.phonemes", "must not be empty");
    return in;
}

inline InferenceInput read_inference_input(const std::string& path) {
    const std::string text = detail::read_file_text(path);
    return inference_input_from_json(detail::parse_line(text, 1));
}

}  // namespace i3css
