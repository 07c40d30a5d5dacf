#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "i3css/corpus.hpp"
#include "i3css/model.hpp"
#include "i3css/numerics/adam.hpp"

namespace i3css {

struct Split {
    std::vector<std::size_t> train, val, test;
};

// 8:1:1 by dialogue index after a seeded shuffle.
inline Split split_dialogues(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(splitmix64(seed ^ 0x5B117ULL));
    std::shuffle(idx.begin(), idx.end(), rng);
    const std::size_t n_train = n * 8 / 10, n_val = n / 10;
    Split s;
    s.train.assign(idx.begin(), idx.begin() + n_train);
    s.val.assign(idx.begin() + n_train, idx.begin() + n_train + n_val);
    s.test.assign(idx.begin() + n_train + n_val, idx.end());
    return s;
}

inline Corpus select(const Corpus& corpus, const std::vector<std::size_t>& idx) {
    Corpus out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(corpus.at(i));
    return out;
}

// Every dialogue must fit the model's dimensions, speakers and vocabulary.
inline void check_corpus_against_config(const ModelConfig& cfg, std::span<const DialogueRecord> corpus) {
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const auto& d = corpus[i];
        const std::string where = "dialogue " + std::to_string(i) + ": ";
        if (d.utterances.size() < 2) throw ConfigError(where + "fewer than 2 utterances");
        for (auto& u : d.utterances) {
            if (u.semantic.size() != cfg.d_t)
                throw ConfigError(where + "semantic dim " + std::to_string(u.semantic.size()) + " but model d_t is " +
                                  std::to_string(cfg.d_t));
            if (u.prosodic.size() != cfg.d_s)
                throw ConfigError(where + "prosodic dim " + std::to_string(u.prosodic.size()) + " but model d_s is " +
                                  std::to_string(cfg.d_s));
            if (u.speaker >= cfg.num_speakers)
                throw ConfigError(where + "speaker " + std::to_string(u.speaker) + " but model has " +
                                  std::to_string(cfg.num_speakers) + " speakers");
        }
        for (auto p : d.phonemes)
            if (p >= cfg.vocab)
                throw ConfigError(where + "phoneme " + std::to_string(p) + " outside vocab " + std::to_string(cfg.vocab));
    }
}

struct EvalReport {
    double mae_p = 0, mae_e = 0, mae_d = 0;
    std::map<std::string, double> retrieval_acc;  // enabled modules only
    double chance = 0;                            // mean of 1/(N-1)
    double loss_total = 0, loss_pitch = 0, loss_energy = 0, loss_log_duration = 0;
    std::map<std::string, double> loss_contrastive;
    std::size_t dialogues = 0;

    nlohmann::json to_json() const {
        return {{"mae_p", mae_p},
                {"mae_e", mae_e},
                {"mae_d", mae_d},
                {"retrieval_acc", retrieval_acc},
                {"chance", chance},
                {"loss", loss_total},
                {"loss_pitch", loss_pitch},
                {"loss_energy", loss_energy},
                {"loss_log_duration", loss_log_duration},
                {"loss_contrastive", loss_contrastive},
                {"dialogues", dialogues}};
    }
};

// Prosody predictions for each dialogue; reads only history and phonemes.
template <typename T>
std::vector<ProsodyPrediction> predict_split(const Model<T>& model, std::span<const DialogueRecord> records) {
    std::vector<ProsodyPrediction> out;
    out.reserve(records.size());
    for (auto& d : records) {
        require_dialogue(d);
        std::span<const Utterance> all(d.utterances);
        out.push_back(infer(all.first(all.size() - 1), d.phonemes, model));
    }
    return out;
}

template <typename T>
EvalReport evaluate(const Model<T>& model, std::span<const DialogueRecord> records) {
    if (records.empty()) throw ContractError("evaluate: empty split");
    NoGradGuard ng;
    EvalReport rep;
    rep.dialogues = records.size();
    std::size_t positions = 0;
    std::array<double, 4> retrieval{}, contrastive{};
    const double lambda = model.config.lambda_cl;

    for (auto& d : records) {
        require_dialogue(d);
        std::span<const Utterance> all(d.utterances);
        auto history = all.first(all.size() - 1);

        // Prosody path: history and phonemes only.
        auto feats = history_features(history, model);
        auto pred = to_prediction(predict_from_features(feats, d.phonemes, model));
        double vp = 0, ve = 0, vd = 0;
        for (std::size_t j = 0; j < d.phonemes.size(); ++j) {
            const double ep = pred.pitch[j] - d.pitch[j];
            const double ee = pred.energy[j] - d.energy[j];
            const double ed = pred.log_duration[j] - std::log(static_cast<double>(d.duration[j]));
            rep.mae_p += std::abs(ep);
            rep.mae_e += std::abs(ee);
            rep.mae_d += std::abs(ed);
            vp += ep * ep;
            ve += ee * ee;
            vd += ed * ed;
        }
        const double len = static_cast<double>(d.phonemes.size());
        positions += d.phonemes.size();
        rep.loss_pitch += vp / len;
        rep.loss_energy += ve / len;
        rep.loss_log_duration += vd / len;
        double dialogue_loss = (vp + ve + vd) / len;

        // Alignment path: compares against the next-utterance features.
        for (auto k : kAllModules) {
            if (!model.config.modules[k]) continue;
            auto r = contrast_with_next(feats[k], all.subspan(1), k, model);
            contrastive[index_of(k)] += r.loss.item();
            dialogue_loss += lambda * r.loss.item();
            retrieval[index_of(k)] += retrieval_accuracy(r.features, r.next);
        }
        rep.loss_total += dialogue_loss;
        rep.chance += 1.0 / static_cast<double>(all.size() - 1);
    }

    const double n = static_cast<double>(records.size());
    rep.mae_p /= static_cast<double>(positions);
    rep.mae_e /= static_cast<double>(positions);
    rep.mae_d /= static_cast<double>(positions);
    rep.loss_total /= n;
    rep.loss_pitch /= n;
    rep.loss_energy /= n;
    rep.loss_log_duration /= n;
    rep.chance /= n;
    for (auto k : kAllModules) {
        if (!model.config.modules[k]) continue;
        rep.retrieval_acc[std::string(module_name(k))] = retrieval[index_of(k)] / n;
        rep.loss_contrastive[std::string(module_name(k))] = contrastive[index_of(k)] / n;
    }
    return rep;
}

template <typename T>
struct TrainResult {
    Model<T> final_model;
    Model<T> best_model;
    std::size_t best_step = 0;
    double initial_val_loss = 0;
    double best_val_loss = 0;
    std::vector<nlohmann::json> log;
};

struct TrainOptions {
    // Called with every metrics log entry as it is produced.
    std::function<void(const nlohmann::json&)> on_log;
    // Caps the validation subset used for periodic evaluation (0 = whole split).
    std::size_t max_val_dialogues = 0;
};

// Names the first parameter or gradient holding a non-finite value.
template <typename T>
std::string first_non_finite(const Model<T>& model) {
    for (auto& [name, t] : model.named()) {
        if (!all_finite(t)) return name;
        if (t.has_grad())
            for (auto g : t.grad())
                if (!std::isfinite(g)) return name + ".grad";
    }
    return "";
}

template <typename T>
TrainResult<T> train(const ModelConfig& cfg, const Corpus& corpus, const TrainOptions& opts = {}) {
    cfg.validate();
    if (corpus.empty()) throw ConfigError("train: empty corpus");
    check_corpus_against_config(cfg, corpus);
    const auto split = split_dialogues(corpus.size(), cfg.seed);
    const Corpus train_set = select(corpus, split.train);
    Corpus val_set = select(corpus, split.val.empty() ? split.train : split.val);
    if (opts.max_val_dialogues && val_set.size() > opts.max_val_dialogues) val_set.resize(opts.max_val_dialogues);
    if (train_set.empty()) throw ConfigError("train: corpus too small for an 8:1:1 split");

    auto model = Model<T>::init(cfg);
    Adam<T> opt(model.parameters(), {cfg.lr, 0.9, 0.98, 1e-9});
    std::mt19937_64 rng(splitmix64(cfg.seed ^ 0xBA7C4ULL));
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t cursor = 0;

    TrainResult<T> res;
    auto log_eval = [&](std::size_t step, std::optional<double> train_loss) {
        auto rep = evaluate(model, val_set);
        nlohmann::json entry = {{"step", step}};
        entry["loss"] = train_loss ? nlohmann::json(*train_loss) : nlohmann::json(nullptr);
        entry["val_loss"] = rep.loss_total;
        entry["mae_p"] = rep.mae_p;
        entry["mae_e"] = rep.mae_e;
        entry["mae_d"] = rep.mae_d;
        entry["retrieval_acc"] = rep.retrieval_acc;
        entry["loss_contrastive"] = rep.loss_contrastive;
        res.log.push_back(entry);
        if (opts.on_log) opts.on_log(entry);
        if (step == 0) {
            res.initial_val_loss = rep.loss_total;
            res.best_val_loss = rep.loss_total;
            res.best_model = model.clone();
        } else if (rep.loss_total < res.best_val_loss) {
            res.best_val_loss = rep.loss_total;
            res.best_step = step;
            res.best_model = model.clone();
        }
    };

    log_eval(0, std::nullopt);
    double running = 0;
    std::size_t since = 0;
    Corpus batch;
    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        batch.clear();
        for (std::size_t b = 0; b < cfg.batch_size; ++b) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            batch.push_back(train_set[order[cursor++]]);
        }
        opt.zero_grad();
        auto loss = total_loss<T>(batch, model);
        const double lv = loss.total.item();
        if (!std::isfinite(lv)) {
            // Backpropagate anyway so the gradients can point at the culprit.
            backward(loss.total);
            auto culprit = first_non_finite(model);
            throw NumericError("non-finite loss at step " + std::to_string(step) +
                               (culprit.empty() ? std::string("; all parameters finite")
                                                : "; first non-finite tensor: " + culprit));
        }
        backward(loss.total);
        opt.step();
        running += lv;
        ++since;
        if (step % cfg.eval_every == 0 || step == cfg.steps) {
            log_eval(step, running / static_cast<double>(since));
            running = 0;
            since = 0;
        }
    }
    res.final_model = model;
    return res;
}

}  // namespace i3css
