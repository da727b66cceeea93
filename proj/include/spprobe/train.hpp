// Copyright (c) 2026 spprobe contributors.
// Licensed under the Apache License 2.0.

#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "spprobe/dataset.hpp"
#include "spprobe/network.hpp"
#include "spprobe/optim.hpp"
#include "spprobe/scf.hpp"

namespace spprobe {

struct TrainConfig {
    Architecture arch;
    int epochs = 30;
    int batch_size = 32;
    double learning_rate = 0.01;
    double momentum = 0.9;
    double weight_decay = 0.0;  // not stated by the architecture reference; off by default
    double val_fraction = 0.1;
    int plateau_patience = 5; // stop after this many epochs without val improvement
};

struct Provenance {
    std::uint64_t dataset_hash = 0;
    std::uint64_t seed = 0;
    int epochs_run = 0;
    std::vector<double> train_loss;
    std::vector<double> train_accuracy;
    std::vector<double> val_accuracy;

    double final_train_accuracy() const {
        return train_accuracy.empty() ? 0.0 : train_accuracy.back();
    }
    double final_val_accuracy() const {
        return val_accuracy.empty() ? 0.0 : val_accuracy.back();
    }
    bool populated() const { return epochs_run > 0 && !train_accuracy.empty(); }
};

struct SpuriousScore {
    double score = 0.0;
    int n_eligible = 0;
};

struct ModelCondition {
    enum class Kind { kNormal, kSpurious, kIndeterminate };
    Kind kind = Kind::kIndeterminate;
    std::string signal;      // set for spurious models
    int aligned_class = -1;  // set for spurious models

    std::string str() const {
        switch (kind) {
            case Kind::kNormal: return "normal";
            case Kind::kSpurious:
                return "spurious(" + signal + "," + std::to_string(aligned_class) + ")";
            case Kind::kIndeterminate: return "indeterminate";
        }
        return "?";
    }
};

constexpr double kSpuriousThreshold = 0.85;
constexpr double kNormalThreshold = 0.1;
constexpr int kScoreMinCount = 50;

struct TrainedModel {
    Network net;
    Provenance provenance;
    std::map<std::pair<std::string, int>, SpuriousScore> spurious_scores;
    std::optional<ModelCondition> condition;
};

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

/// Argmax with ties broken toward the lowest class index.
inline int argmax_class(const double* logits, int k) {
    int best = 0;
    for (int i = 1; i < k; ++i)
        if (logits[i] > logits[best]) best = i;
    return best;
}

/// Eval-mode batched predictions. Returns one logits row per image.
inline std::vector<std::vector<double>> predict_logits(TrainedModel& model,
                                                       const std::vector<const double*>& images,
                                                       int batch_size = 64) {
    std::vector<std::vector<double>> out;
    out.reserve(images.size());
    const int k = model.net.arch.num_classes;
    for (std::size_t start = 0; start < images.size();) {
        const std::size_t end = std::min(images.size(), start + static_cast<std::size_t>(batch_size));
        std::vector<const double*> chunk(images.begin() + static_cast<std::ptrdiff_t>(start),
                                         images.begin() + static_cast<std::ptrdiff_t>(end));
        Tape tape;
        Tensor* x = make_input(tape, model.net.arch, chunk);
        ForwardResult fr = forward(model.net, tape, x, false);
        for (std::size_t n = 0; n < chunk.size(); ++n)
            out.emplace_back(fr.logits->data.begin() + static_cast<std::ptrdiff_t>(n) * k,
                             fr.logits->data.begin() + static_cast<std::ptrdiff_t>(n + 1) * k);
        start = end;
    }
    return out;
}

struct Prediction {
    int cls = 0;
    std::vector<double> logits;
};

inline Prediction predict(TrainedModel& model, const Image& image) {
    auto rows = predict_logits(model, {image.pix.data()});
    Prediction p;
    p.logits = std::move(rows[0]);
    p.cls = argmax_class(p.logits.data(), model.net.arch.num_classes);
    return p;
}

inline Prediction predict(TrainedModel& model, const ImageSample& sample) {
    return predict(model, sample.pixels);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Trains the classifier with SGD + momentum and the step-decay schedule.
/// Deterministic per seed. Throws TrainingError on divergence.
inline TrainedModel train(const Dataset& dataset, const TrainConfig& config,
                          std::uint64_t seed) {
    if (dataset.samples.empty()) throw ParameterError("train: empty dataset");
    {
        const std::vector<int> hist = dataset.label_histogram();
        for (int c = 0; c < dataset.num_classes; ++c)
            if (hist[static_cast<std::size_t>(c)] == 0)
                throw ParameterError("train: class " + std::to_string(c) +
                                     " has no samples");
    }
    TrainConfig cfg = config;
    cfg.arch.image_size = dataset.image_size;
    cfg.arch.num_classes = dataset.num_classes;

    TrainedModel model;
    model.net = build_network(cfg.arch, derive_seed(seed, "weights"));
    model.provenance.dataset_hash = dataset_hash(dataset);
    model.provenance.seed = seed;

    // deterministic split
    std::vector<std::size_t> idx(dataset.samples.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng split_rng(derive_seed(seed, "split"));
    split_rng.shuffle(idx);
    const auto n_val = static_cast<std::size_t>(cfg.val_fraction * static_cast<double>(idx.size()));
    std::vector<std::size_t> val_idx(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::vector<std::size_t> train_idx(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
    if (train_idx.empty()) throw ParameterError("train: validation split leaves no training data");

    std::vector<Tensor*> params = trainable_params(model.net);
    SgdState sgd;
    double best_val = -1.0;
    int stale_epochs = 0;

    auto accuracy_of = [&](const std::vector<std::size_t>& subset) {
        if (subset.empty()) return 0.0;
        std::vector<const double*> imgs;
        imgs.reserve(subset.size());
        for (std::size_t i : subset) imgs.push_back(dataset.samples[i].pixels.pix.data());
        const auto rows = predict_logits(model, imgs, cfg.batch_size);
        std::size_t hit = 0;
        for (std::size_t i = 0; i < subset.size(); ++i)
            if (argmax_class(rows[i].data(), cfg.arch.num_classes) ==
                dataset.samples[subset[i]].label)
                ++hit;
        return static_cast<double>(hit) / static_cast<double>(subset.size());
    };

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng epoch_rng(derive_seed(seed, "epoch", static_cast<std::uint64_t>(epoch)));
        epoch_rng.shuffle(train_idx);
        const double lr = lr_schedule(epoch, cfg.learning_rate);

        double loss_sum = 0.0;
        std::size_t correct = 0;
        try {
            for (std::size_t start = 0; start < train_idx.size();) {
                const std::size_t end =
                    std::min(train_idx.size(), start + static_cast<std::size_t>(cfg.batch_size));
                std::vector<const double*> imgs;
                std::vector<int> labels;
                for (std::size_t i = start; i < end; ++i) {
                    imgs.push_back(dataset.samples[train_idx[i]].pixels.pix.data());
                    labels.push_back(dataset.samples[train_idx[i]].label);
                }
                Tape tape;
                Tensor* x = make_input(tape, cfg.arch, imgs);
                ForwardResult fr = forward(model.net, tape, x, true);
                Tensor* loss = softmax_cross_entropy(tape, fr.logits, labels);
                loss_sum += loss->data[0] * static_cast<double>(labels.size());
                for (std::size_t n = 0; n < labels.size(); ++n)
                    if (argmax_class(fr.logits->data.data() +
                                         static_cast<std::ptrdiff_t>(n) * cfg.arch.num_classes,
                                     cfg.arch.num_classes) == labels[n])
                        ++correct;
                zero_grads(params);
                tape.backward(loss, std::vector<double>{1.0});
                if (cfg.weight_decay > 0.0)
                    for (Tensor* p : params)
                        for (std::size_t j = 0; j < p->numel(); ++j)
                            p->grad[j] += cfg.weight_decay * p->data[j];
                sgd_step(params, lr, cfg.momentum, sgd);
                start = end;
            }
        } catch (const NumericError& e) {
            throw TrainingError("training diverged at epoch " + std::to_string(epoch) + ": " +
                                    e.what(),
                                epoch - 1);
        }
        const double mean_loss = loss_sum / static_cast<double>(train_idx.size());
        if (!std::isfinite(mean_loss))
            throw TrainingError("training diverged at epoch " + std::to_string(epoch) +
                                    ": loss is not finite",
                                epoch - 1);
        model.provenance.train_loss.push_back(mean_loss);
        model.provenance.train_accuracy.push_back(static_cast<double>(correct) /
                                                  static_cast<double>(train_idx.size()));
        model.provenance.epochs_run = epoch + 1;

        if (!val_idx.empty()) {
            const double val_acc = accuracy_of(val_idx);
            model.provenance.val_accuracy.push_back(val_acc);
            if (val_acc > best_val + 1e-12) {
                best_val = val_acc;
                stale_epochs = 0;
            } else if (++stale_epochs >= cfg.plateau_patience && cfg.plateau_patience > 0) {
                break;
            }
        }
    }
    return model;
}

// ---------------------------------------------------------------------------
// Spurious score and model conditions
// ---------------------------------------------------------------------------

/// Definition-1 estimator: among evaluation inputs the model does not
/// already assign to class j, the fraction whose prediction flips to j
/// when the signal is added.
inline SpuriousScore spurious_score(TrainedModel& model,
                                    const std::vector<ImageSample>& eval_set,
                                    const SpuriousSignal& signal, int j,
                                    int min_count = kScoreMinCount) {
    const int k = model.net.arch.num_classes;
    if (j < 0 || j >= k) throw ParameterError("spurious_score: class out of range");
    for (const ImageSample& s : eval_set)
        if (s.contaminated_with)
            throw ProtocolError("spurious_score: evaluation set must be uncontaminated, sample " +
                                s.id + " is not");

    std::vector<const double*> base_imgs;
    base_imgs.reserve(eval_set.size());
    for (const ImageSample& s : eval_set) base_imgs.push_back(s.pixels.pix.data());
    const auto base_rows = predict_logits(model, base_imgs);

    std::vector<std::size_t> eligible;
    for (std::size_t i = 0; i < eval_set.size(); ++i)
        if (argmax_class(base_rows[i].data(), k) != j) eligible.push_back(i);
    if (static_cast<int>(eligible.size()) < min_count)
        throw InsufficientDataError(
            "spurious_score: only " + std::to_string(eligible.size()) +
            " eligible samples (need " + std::to_string(min_count) +
            ") for signal " + signal.id() + ", class " + std::to_string(j));

    std::vector<ImageSample> flipped;
    flipped.reserve(eligible.size());
    for (std::size_t i : eligible) flipped.push_back(apply_scf(eval_set[i], signal));
    std::vector<const double*> scf_imgs;
    scf_imgs.reserve(flipped.size());
    for (const ImageSample& s : flipped) scf_imgs.push_back(s.pixels.pix.data());
    const auto scf_rows = predict_logits(model, scf_imgs);

    std::size_t hits = 0;
    for (const auto& row : scf_rows)
        if (argmax_class(row.data(), k) == j) ++hits;
    SpuriousScore out;
    out.n_eligible = static_cast<int>(eligible.size());
    out.score = static_cast<double>(hits) / static_cast<double>(eligible.size());
    return out;
}

/// Evaluates every (signal, class) pair, stores the scores on the model and
/// classifies it as Normal / Spurious / Indeterminate per the fixed
/// thresholds (>= 0.85 spurious, all < 0.1 normal). Predictions are shared
/// across classes: one clean pass plus one pass per signal, which yields
/// the same estimates as per-pair spurious_score calls.
inline ModelCondition classify_condition(TrainedModel& model,
                                         const std::vector<SpuriousSignal>& signals,
                                         const std::vector<ImageSample>& eval_set,
                                         int min_count = kScoreMinCount) {
    const int k = model.net.arch.num_classes;
    for (const ImageSample& s : eval_set)
        if (s.contaminated_with)
            throw ProtocolError("classify_condition: evaluation set must be uncontaminated");

    std::vector<const double*> base_imgs;
    base_imgs.reserve(eval_set.size());
    for (const ImageSample& s : eval_set) base_imgs.push_back(s.pixels.pix.data());
    const auto base_rows = predict_logits(model, base_imgs);
    std::vector<int> base_pred(eval_set.size());
    for (std::size_t i = 0; i < eval_set.size(); ++i)
        base_pred[i] = argmax_class(base_rows[i].data(), k);

    ModelCondition cond;
    double best = -1.0;
    bool all_normal = true;
    for (const SpuriousSignal& sig : signals) {
        std::vector<ImageSample> flipped;
        flipped.reserve(eval_set.size());
        for (const ImageSample& s : eval_set) flipped.push_back(apply_scf(s, sig));
        std::vector<const double*> scf_imgs;
        scf_imgs.reserve(flipped.size());
        for (const ImageSample& s : flipped) scf_imgs.push_back(s.pixels.pix.data());
        const auto scf_rows = predict_logits(model, scf_imgs);
        std::vector<int> scf_pred(eval_set.size());
        for (std::size_t i = 0; i < eval_set.size(); ++i)
            scf_pred[i] = argmax_class(scf_rows[i].data(), k);

        for (int j = 0; j < k; ++j) {
            int eligible = 0, hits = 0;
            for (std::size_t i = 0; i < eval_set.size(); ++i) {
                if (base_pred[i] == j) continue;
                ++eligible;
                if (scf_pred[i] == j) ++hits;
            }
            if (eligible < min_count)
                throw InsufficientDataError("classify_condition: only " +
                                            std::to_string(eligible) +
                                            " eligible samples for signal " + sig.id() +
                                            ", class " + std::to_string(j));
            SpuriousScore sc;
            sc.n_eligible = eligible;
            sc.score = static_cast<double>(hits) / static_cast<double>(eligible);
            model.spurious_scores[{sig.id(), j}] = sc;
            if (sc.score >= kNormalThreshold) all_normal = false;
            if (sc.score >= kSpuriousThreshold && sc.score > best) {
                best = sc.score;
                cond.kind = ModelCondition::Kind::kSpurious;
                cond.signal = sig.id();
                cond.aligned_class = j;
            }
        }
    }
    if (cond.kind != ModelCondition::Kind::kSpurious)
        cond.kind = all_normal ? ModelCondition::Kind::kNormal
                               : ModelCondition::Kind::kIndeterminate;
    model.condition = cond;
    return cond;
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic "SPPROBE1", little-endian u32 header length, a
// JSON header (architecture, provenance, scores, condition), then raw
// little-endian float64 parameter blocks in layer order.
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json arch_to_json(const Architecture& a) {
    return nlohmann::json{{"image_size", a.image_size},
                          {"in_channels", a.in_channels},
                          {"conv_channels", a.conv_channels},
                          {"dense_dims", a.dense_dims},
                          {"num_classes", a.num_classes},
                          {"kernel_size", a.kernel_size}};
}

inline Architecture arch_from_json(const nlohmann::json& j) {
    Architecture a;
    a.image_size = j.at("image_size").get<int>();
    a.in_channels = j.at("in_channels").get<int>();
    a.conv_channels = j.at("conv_channels").get<std::vector<int>>();
    a.dense_dims = j.at("dense_dims").get<std::vector<int>>();
    a.num_classes = j.at("num_classes").get<int>();
    a.kernel_size = j.at("kernel_size").get<int>();
    return a;
}

inline std::vector<Tensor*> checkpoint_blocks(Network& net) {
    std::vector<Tensor*> blocks;
    for (LayerParams& l : net.layers) {
        blocks.push_back(&l.weight);
        blocks.push_back(&l.bias);
        if (l.kind == LayerParams::Kind::kBatchNorm) {
            blocks.push_back(&l.running_mean);
            blocks.push_back(&l.running_var);
        }
    }
    return blocks;
}

} // namespace detail

constexpr char kCheckpointMagic[9] = "SPPROBE1";

inline void save_model(const TrainedModel& model, const std::filesystem::path& path) {
    if (!model.provenance.populated())
        throw UsageError("save_model: provenance must be populated before persistence");
    nlohmann::json header;
    header["format_version"] = 1;
    header["arch"] = detail::arch_to_json(model.net.arch);
    header["provenance"] = {{"dataset_hash", model.provenance.dataset_hash},
                            {"seed", model.provenance.seed},
                            {"epochs_run", model.provenance.epochs_run},
                            {"train_loss", model.provenance.train_loss},
                            {"train_accuracy", model.provenance.train_accuracy},
                            {"val_accuracy", model.provenance.val_accuracy}};
    header["spurious_scores"] = nlohmann::json::array();
    for (const auto& [key, sc] : model.spurious_scores)
        header["spurious_scores"].push_back({{"signal", key.first},
                                             {"class", key.second},
                                             {"score", sc.score},
                                             {"n_eligible", sc.n_eligible}});
    if (model.condition) {
        const ModelCondition& c = *model.condition;
        header["condition"] = {{"kind", c.kind == ModelCondition::Kind::kNormal     ? "normal"
                                        : c.kind == ModelCondition::Kind::kSpurious ? "spurious"
                                                                                    : "indeterminate"},
                               {"signal", c.signal},
                               {"aligned_class", c.aligned_class}};
    } else {
        header["condition"] = nullptr;
    }
    const std::string hdr = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out.write(kCheckpointMagic, 8);
    const auto len = static_cast<std::uint32_t>(hdr.size());
    unsigned char lenb[4] = {static_cast<unsigned char>(len & 0xff),
                             static_cast<unsigned char>((len >> 8) & 0xff),
                             static_cast<unsigned char>((len >> 16) & 0xff),
                             static_cast<unsigned char>((len >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(lenb), 4);
    out.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
    Network& net = const_cast<Network&>(model.net);
    for (Tensor* block : detail::checkpoint_blocks(net))
        out.write(reinterpret_cast<const char*>(block->data.data()),
                  static_cast<std::streamsize>(block->numel() * sizeof(double)));
    if (!out) throw IoError("short write: " + path.string());
}

inline TrainedModel load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw IoError("bad checkpoint header in " + path.string());
    unsigned char lenb[4];
    in.read(reinterpret_cast<char*>(lenb), 4);
    if (!in) throw IoError("truncated checkpoint header in " + path.string());
    const std::uint32_t len = static_cast<std::uint32_t>(lenb[0]) |
                              (static_cast<std::uint32_t>(lenb[1]) << 8) |
                              (static_cast<std::uint32_t>(lenb[2]) << 16) |
                              (static_cast<std::uint32_t>(lenb[3]) << 24);
    std::string hdr(len, '\0');
    in.read(hdr.data(), len);
    if (!in) throw IoError("truncated checkpoint header in " + path.string());
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hdr);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("bad checkpoint header in " + path.string() + ": " + e.what());
    }

    TrainedModel model;
    model.net = build_network(detail::arch_from_json(header.at("arch")), 0);
    const auto& prov = header.at("provenance");
    model.provenance.dataset_hash = prov.at("dataset_hash").get<std::uint64_t>();
    model.provenance.seed = prov.at("seed").get<std::uint64_t>();
    model.provenance.epochs_run = prov.at("epochs_run").get<int>();
    model.provenance.train_loss = prov.at("train_loss").get<std::vector<double>>();
    model.provenance.train_accuracy = prov.at("train_accuracy").get<std::vector<double>>();
    model.provenance.val_accuracy = prov.at("val_accuracy").get<std::vector<double>>();
    for (const auto& e : header.at("spurious_scores"))
        model.spurious_scores[{e.at("signal").get<std::string>(), e.at("class").get<int>()}] =
            SpuriousScore{e.at("score").get<double>(), e.at("n_eligible").get<int>()};
    if (!header.at("condition").is_null()) {
        const auto& c = header.at("condition");
        ModelCondition cond;
        const std::string kind = c.at("kind").get<std::string>();
        cond.kind = kind == "normal"     ? ModelCondition::Kind::kNormal
                    : kind == "spurious" ? ModelCondition::Kind::kSpurious
                                         : ModelCondition::Kind::kIndeterminate;
        cond.signal = c.at("signal").get<std::string>();
        cond.aligned_class = c.at("aligned_class").get<int>();
        model.condition = cond;
    }

    for (Tensor* block : detail::checkpoint_blocks(model.net)) {
        in.read(reinterpret_cast<char*>(block->data.data()),
                static_cast<std::streamsize>(block->numel() * sizeof(double)));
        if (!in)
            throw IoError("checkpoint truncated: parameter block missing in " + path.string());
        if (!block->all_finite())
            throw IoError("checkpoint contains non-finite parameters: " + path.string());
    }
    for (const LayerParams& l : model.net.layers)
        if (l.kind == LayerParams::Kind::kBatchNorm)
            for (double v : l.running_var.data)
                if (!(v > 0.0))
                    throw IoError("checkpoint has non-positive running variance: " +
                                  path.string());
    return model;
}

} // namespace spprobe
