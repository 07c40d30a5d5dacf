// Command-line front end: gen-data, train, eval, infer, gradcheck, replay.
//
// Exit codes: 0 success, 1 runtime or check failure, 2 usage or configuration
// error.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "i3css/checkpoint.hpp"
#include "i3css/corpus.hpp"
#include "i3css/gradcheck_suite.hpp"
#include "i3css/model.hpp"
#include "i3css/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace i3css;

namespace {

struct UsageError : Error {
    using Error::Error;
};

std::string now_utc() {
    auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// 64-bit FNV-1a, hex encoded.
std::string fnv1a(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void write_atomic(const std::string& path, const std::string& text) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp + " for writing");
        out << text;
        if (!out) throw IoError("cannot write " + tmp);
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename " + tmp + " to " + path + ": " + ec.message());
}

json read_json_file(const std::string& path) {
    const std::string text = read_bytes(path);
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

// Everything a command records about itself.
class Manifest {
  public:
    Manifest(std::string command, std::vector<std::string> argv) {
        j_["command"] = std::move(command);
        j_["argv"] = std::move(argv);
        j_["started"] = now_utc();
        j_["artifacts"] = json::object();
        j_["inputs"] = json::object();
    }
    void set(const std::string& key, json v) { j_[key] = std::move(v); }
    void input(const std::string& role, const std::string& path) {
        j_["inputs"][role] = {{"path", path}, {"fnv1a", fnv1a(read_bytes(path))}};
    }
    void artifact(const std::string& role, const std::string& path) {
        j_["artifacts"][role] = {{"path", path}, {"fnv1a", fnv1a(read_bytes(path))}};
    }
    void write(const std::string& path) {
        j_["finished"] = now_utc();
        write_atomic(path, j_.dump(2) + "\n");
    }

  private:
    json j_;
};

std::optional<Precision> precision_override() {
    const char* env = std::getenv("I3_PRECISION");
    if (!env || !*env) return std::nullopt;
    return parse_precision(env);
}

// The corpus generator leaves its normalization statistics in its manifest.
NormStats norm_stats_near(const std::string& corpus_path) {
    const std::string m = corpus_path + ".manifest.json";
    if (!fs::exists(m)) return {};
    auto j = read_json_file(m);
    if (!j.contains("norm_stats")) return {};
    const auto& n = j["norm_stats"];
    return {n.at("pitch_mean").get<double>(), n.at("pitch_std").get<double>(), n.at("energy_mean").get<double>(),
            n.at("energy_std").get<double>()};
}

json norm_json(const NormStats& n) {
    return {{"pitch_mean", n.pitch_mean},
            {"pitch_std", n.pitch_std},
            {"energy_mean", n.energy_mean},
            {"energy_std", n.energy_std}};
}

json prediction_json(const ProsodyPrediction& p) {
    return {{"pitch", p.pitch},
            {"energy", p.energy},
            {"log_duration", p.log_duration},
            {"regulated_length", p.regulated_length}};
}

// ---------------------------------------------------------------------------

struct GenArgs {
    std::string config, out;
    std::optional<std::uint64_t> seed;
};

int cmd_gen_data(const GenArgs& a, const std::vector<std::string>& argv) {
    Manifest man("gen-data", argv);
    GeneratorConfig cfg;
    if (!a.config.empty()) {
        auto j = read_json_file(a.config);
        try {
            cfg = j.get<GeneratorConfig>();
        } catch (const ValidationError& e) {
            throw ConfigError(e.what());
        } catch (const json::exception& e) {
            throw ConfigError(a.config + ": " + e.what());
        }
        man.input("config", a.config);
    }
    if (a.seed) cfg.seed = *a.seed;
    cfg.validate();
    auto g = generate_corpus(cfg);
    write_corpus(g.records, a.out);
    man.set("config", cfg);
    man.set("seed", cfg.seed);
    man.set("norm_stats", norm_json(g.stats));
    man.artifact("corpus", a.out);
    man.write(a.out + ".manifest.json");
    std::cout << "wrote " << g.records.size() << " dialogues to " << a.out << " (d_t=" << cfg.d_t
              << ", d_s=" << cfg.d_s << ", vocab=" << cfg.vocab << ")\n";
    return 0;
}

struct TrainArgs {
    std::string config, corpus, out;
    std::optional<std::string> ablation;
    bool no_ie = false;
    std::optional<std::size_t> steps;
    std::optional<std::uint64_t> seed;
};

template <typename T>
void run_training(const ModelConfig& cfg, const Corpus& corpus, const TrainArgs& a, Manifest& man) {
    fs::create_directories(a.out);
    const std::string log_path = (fs::path(a.out) / "metrics.jsonl").string();
    std::string log_text;
    TrainOptions opts;
    opts.on_log = [&](const json& e) {
        log_text += e.dump() + "\n";
        std::cerr << "step " << e["step"] << "  val_loss " << e["val_loss"] << "  mae_p " << e["mae_p"] << "  mae_e "
                  << e["mae_e"] << "  mae_d " << e["mae_d"] << "\n";
    };
    auto res = train<T>(cfg, corpus, opts);
    write_atomic(log_path, log_text);

    const NormStats norm = norm_stats_near(a.corpus);
    const std::string final_path = (fs::path(a.out) / "final.i3ck").string();
    const std::string best_path = (fs::path(a.out) / "best.i3ck").string();
    save_checkpoint(to_checkpoint(res.final_model, cfg.steps, norm), final_path);
    save_checkpoint(to_checkpoint(res.best_model, res.best_step, norm), best_path);
    man.artifact("metrics", log_path);
    man.artifact("final_checkpoint", final_path);
    man.artifact("best_checkpoint", best_path);
    man.set("best_step", res.best_step);
    std::cout << "trained " << cfg.steps << " steps; initial val loss " << res.initial_val_loss << ", best "
              << res.best_val_loss << " at step " << res.best_step << "\n"
              << "checkpoints: " << final_path << ", " << best_path << "\n";
}

int cmd_train(const TrainArgs& a, const std::vector<std::string>& argv) {
    Manifest man("train", argv);
    ModelConfig cfg;
    if (!a.config.empty()) {
        auto j = read_json_file(a.config);
        try {
            cfg = j.get<ModelConfig>();
        } catch (const json::exception& e) {
            throw ConfigError(a.config + ": " + e.what());
        }
        man.input("config", a.config);
    }
    if (a.ablation) {
        cfg.modules = ModuleFlags::none();
        std::stringstream ss(*a.ablation);
        std::string item;
        while (std::getline(ss, item, ',')) {
            if (item.empty()) continue;
            auto k = parse_module(item);
            if (!k) throw UsageError("unknown module '" + item + "'; valid names: ht-nt, hs-ns, ht-ns, hs-nt");
            cfg.modules[*k] = true;
        }
    }
    if (a.no_ie) cfg.ie_enabled = false;
    if (a.steps) cfg.steps = *a.steps;
    if (a.seed) cfg.seed = *a.seed;
    if (auto p = precision_override()) cfg.precision = *p;
    cfg.validate();

    auto ingest = ingest_external(a.corpus);
    man.input("corpus", a.corpus);
    man.set("config", cfg);
    man.set("seed", cfg.seed);
    if (cfg.precision == Precision::F32)
        run_training<float>(cfg, ingest.records, a, man);
    else
        run_training<double>(cfg, ingest.records, a, man);
    man.write((fs::path(a.out) / "manifest.json").string());
    return 0;
}

struct EvalArgs {
    std::string checkpoint, corpus, split = "test";
    bool as_json = false;
};

template <typename T>
EvalReport evaluate_checkpoint(const Checkpoint& ck, const Corpus& records) {
    auto model = model_from_checkpoint<T>(ck);
    return evaluate(model, records);
}

int cmd_eval(const EvalArgs& a, const std::vector<std::string>& argv) {
    Manifest man("eval", argv);
    auto ck = load_checkpoint(a.checkpoint);
    auto corpus = read_corpus(a.corpus);
    check_corpus_against_config(ck.config, corpus);
    const auto split = split_dialogues(corpus.size(), ck.config.seed);
    const auto& idx = a.split == "val" ? split.val : split.test;
    if (idx.empty()) throw ConfigError("the " + a.split + " split of " + a.corpus + " is empty");
    auto records = select(corpus, idx);
    const Precision prec = precision_override().value_or(ck.config.precision);
    auto rep = prec == Precision::F32 ? evaluate_checkpoint<float>(ck, records) : evaluate_checkpoint<double>(ck, records);

    man.input("checkpoint", a.checkpoint);
    man.input("corpus", a.corpus);
    man.set("config", ck.config);
    man.set("seed", ck.config.seed);
    man.set("split", a.split);
    man.set("report", rep.to_json());
    man.write(a.checkpoint + "." + a.split + ".eval.manifest.json");

    if (a.as_json) {
        std::cout << rep.to_json().dump() << "\n";
        return 0;
    }
    std::printf("split        %s (%zu dialogues)\n", a.split.c_str(), rep.dialogues);
    std::printf("MAE-P        %.4f\n", rep.mae_p);
    std::printf("MAE-E        %.4f\n", rep.mae_e);
    std::printf("MAE-D        %.4f\n", rep.mae_d);
    std::printf("loss         %.4f\n", rep.loss_total);
    for (auto& [k, v] : rep.retrieval_acc)
        std::printf("retrieval    %-6s %.4f  (chance %.4f)\n", k.c_str(), v, rep.chance);
    return 0;
}

struct InferArgs {
    std::string checkpoint, dialogue;
};

int cmd_infer(const InferArgs& a, const std::vector<std::string>& argv) {
    Manifest man("infer", argv);
    auto ck = load_checkpoint(a.checkpoint);
    InferenceInput in;
    try {
        in = read_inference_input(a.dialogue);
    } catch (const ValidationError& e) {
        throw UsageError(e.what());
    }
    for (auto& u : in.history) {
        if (u.semantic.size() != ck.config.d_t || u.prosodic.size() != ck.config.d_s)
            throw ConfigError("dialogue feature dims do not match the checkpoint (d_t=" +
                              std::to_string(ck.config.d_t) + ", d_s=" + std::to_string(ck.config.d_s) + ")");
        if (u.speaker >= ck.config.num_speakers) throw ConfigError("speaker id outside the checkpoint's speakers");
    }
    for (auto p : in.phonemes)
        if (p >= ck.config.vocab) throw ConfigError("phoneme id " + std::to_string(p) + " outside vocab");
    const Precision prec = precision_override().value_or(ck.config.precision);
    ProsodyPrediction pred = prec == Precision::F32 ? infer(in.history, in.phonemes, model_from_checkpoint<float>(ck))
                                                    : infer(in.history, in.phonemes, model_from_checkpoint<double>(ck));
    const std::string out = prediction_json(pred).dump();
    man.input("checkpoint", a.checkpoint);
    man.input("dialogue", a.dialogue);
    man.set("config", ck.config);
    man.set("seed", ck.config.seed);
    man.set("prediction_fnv1a", fnv1a(out));
    man.write(a.dialogue + ".infer.manifest.json");
    std::cout << out << "\n";
    return 0;
}

struct GradArgs {
    std::string module = "all", dims = "small";
    std::string manifest = "gradcheck.manifest.json";
};

int cmd_gradcheck(const GradArgs& a, const std::vector<std::string>& argv) {
    if (a.dims != "small" && a.dims != "default") throw UsageError("--dims must be 'small' or 'default'");
    Manifest man("gradcheck", argv);
    std::vector<GradCheckEntry> entries;
    try {
        entries = run_gradcheck_suite(a.module, a.dims == "small");
    } catch (const ContractError& e) {
        throw UsageError(e.what());
    }
    bool ok = true;
    json rows = json::array();
    std::printf("%-12s %-34s %12s %10s  %s\n", "module", "op", "max_rel_err", "seconds", "status");
    for (auto& e : entries) {
        ok = ok && e.passed();
        std::printf("%-12s %-34s %12.3e %10.3f  %s", e.module.c_str(), e.op.c_str(), e.result.max_rel_error, e.seconds,
                    e.passed() ? "ok" : "FAIL");
        if (!e.passed())
            std::printf("  worst %s[%zu] analytic %.10g numeric %.10g", e.result.worst_param.c_str(),
                        e.result.worst_index, e.result.analytic, e.result.numeric);
        std::printf("\n");
        rows.push_back({{"module", e.module},
                        {"op", e.op},
                        {"max_rel_error", e.result.max_rel_error},
                        {"worst", e.result.worst_param + "[" + std::to_string(e.result.worst_index) + "]"},
                        {"passed", e.passed()}});
    }
    man.set("results", rows);
    man.set("tolerance", kGradCheckTolerance);
    man.write(a.manifest);
    return ok ? 0 : 1;
}

int dispatch(const std::vector<std::string>& args);

// Re-runs the command recorded in a manifest and compares artifact hashes.
int cmd_replay(const std::string& manifest_path) {
    auto m = read_json_file(manifest_path);
    if (!m.contains("argv") || !m["argv"].is_array()) throw ConfigError(manifest_path + " has no argv");
    auto args = m["argv"].get<std::vector<std::string>>();
    if (!args.empty() && args[0] == "replay") throw UsageError("refusing to replay a replay");
    std::map<std::string, std::string> before;
    if (m.contains("artifacts"))
        for (auto& [role, art] : m["artifacts"].items()) before[art["path"]] = art["fnv1a"];
    const int rc = dispatch(args);
    if (rc != 0) return rc;
    bool same = true;
    for (auto& [path, hash] : before) {
        const std::string now = fnv1a(read_bytes(path));
        const bool eq = now == hash;
        same = same && eq;
        std::cout << (eq ? "identical  " : "DIFFERENT  ") << path << "\n";
    }
    return same ? 0 : 1;
}

int run_app(CLI::App& app, const std::vector<std::string>& args) {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }
    return -1;
}

int dispatch(const std::vector<std::string>& args) {
    CLI::App app{"i3css: multimodal dialogue-context prosody model"};
    app.require_subcommand(1);

    GenArgs gen;
    auto* g = app.add_subcommand("gen-data", "generate a synthetic dialogue corpus");
    g->add_option("--config", gen.config, "generator config (JSON)");
    g->add_option("--out", gen.out, "output corpus path (.jsonl or .jsonl.gz)")->required();
    g->add_option("--seed", gen.seed, "overrides the config seed");

    TrainArgs tr;
    auto* t = app.add_subcommand("train", "train a model");
    t->add_option("--config", tr.config, "model config (JSON)");
    t->add_option("--corpus", tr.corpus, "training corpus")->required();
    t->add_option("--out", tr.out, "output directory")->required();
    t->add_option("--ablation", tr.ablation, "comma list of modules to keep (ht-nt,hs-ns,ht-ns,hs-nt)");
    t->add_flag("--no-ie", tr.no_ie, "replace interaction enhancement with prefix means");
    t->add_option("--steps", tr.steps, "overrides the config step count");
    t->add_option("--seed", tr.seed, "overrides the config seed");

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "evaluate a checkpoint");
    e->add_option("--checkpoint", ev.checkpoint)->required();
    e->add_option("--corpus", ev.corpus)->required();
    e->add_option("--split", ev.split)->check(CLI::IsMember({"test", "val"}));
    e->add_flag("--json", ev.as_json, "print the report as JSON");

    InferArgs in;
    auto* i = app.add_subcommand("infer", "predict prosody for one dialogue");
    i->add_option("--checkpoint", in.checkpoint)->required();
    i->add_option("--dialogue", in.dialogue, "history utterances plus target phonemes (JSON)")->required();

    GradArgs gc;
    auto* c = app.add_subcommand("gradcheck", "finite-difference gradient checks (64-bit)");
    c->add_option("--module", gc.module, "all, numerics, encoders, interaction or synthesizer");
    c->add_option("--dims", gc.dims, "small or default");
    c->add_option("--manifest", gc.manifest, "where to write the run manifest");

    std::string replay_path;
    auto* r = app.add_subcommand("replay", "re-run a recorded command and compare artifacts");
    r->add_option("--manifest", replay_path)->required();

    if (int rc = run_app(app, args); rc >= 0) return rc;

    std::vector<std::string> recorded(args.begin(), args.end());
    if (g->parsed()) return cmd_gen_data(gen, recorded);
    if (t->parsed()) return cmd_train(tr, recorded);
    if (e->parsed()) return cmd_eval(ev, recorded);
    if (i->parsed()) return cmd_infer(in, recorded);
    if (c->parsed()) return cmd_gradcheck(gc, recorded);
    return cmd_replay(replay_path);
}

}  // namespace

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    try {
        return dispatch(args);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return 2;
    } catch (const ContractError& e) {
        std::cerr << "invalid input: " << e.what() << "\n";
        return 2;
    } catch (const ValidationError& e) {
        std::cerr << "invalid input: " << e.what() << "\n";
        return 2;
    } catch (const ParseError& e) {
        std::cerr << "parse error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
