#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "starvc/nn.hpp"
#include "starvc/synthworld.hpp"

// Frozen feature extractors (semantic content, speaker identity) and the
// trainable adapters that map their outputs into the LM embedding space.
namespace starvc::enc {

using num::BasicTensor;
using num::Tape;
using num::Var;

inline constexpr int kSemanticDim = 48;
inline constexpr int kSpeakerDim = 32;
inline constexpr int kModelDim = 64;
inline constexpr int kSemanticClasses = world::kContentSymbols + 1;  // + silence

/// Strided conv (kernel 3, stride 2) + two bidirectional transformer blocks.
template <class T>
class SemanticEncoder {
public:
    explicit SemanticEncoder(std::uint64_t seed) {
        Rng rng(derive_seed(seed, 0x5e3a));
        conv_ = nn::Linear<T>(ps_, "semantic.conv", 3 * world::kFeatureDim, kSemanticDim, rng);
        for (int i = 0; i < 2; ++i)
            blocks_.emplace_back(ps_, "semantic.block" + std::to_string(i), kSemanticDim, 4, 2 * kSemanticDim, rng, 2);
        norm_ = nn::RmsNorm<T>(ps_, "semantic.out_norm", kSemanticDim);
    }

    /// frames [T x F] -> [ceil(T/2) x kSemanticDim]
    Var<T> operator()(Tape<T>& t, Var<T> frames) const {
        if (frames.cols() != world::kFeatureDim)
            throw ConfigError("semantic encoder: expected " + std::to_string(world::kFeatureDim) + " features, got " +
                              std::to_string(frames.cols()));
        auto x = num::silu(conv_(t, num::unfold_time(frames, 3, 2)));
        const auto pos = nn::iota_positions(x.rows());
        for (const auto& b : blocks_) x = b(t, x, false, pos);
        return norm_(t, x);
    }
    Var<T> operator()(Tape<T>& t, const BasicTensor<T>& frames) const { return (*this)(t, t.constant(frames)); }

    nn::ParamSet<T>& params() noexcept { return ps_; }
    const nn::ParamSet<T>& params() const noexcept { return ps_; }
    bool frozen() const { return ps_.frozen(); }
    void freeze() { ps_.set_frozen(true); }

private:
    nn::ParamSet<T> ps_;
    nn::Linear<T> conv_;
    std::vector<nn::Block<T>> blocks_;
    nn::RmsNorm<T> norm_;
};

/// Two kernel-3 conv layers, first- and second-moment temporal pooling,
/// projection to kSpeakerDim, RMS-normalized: only the direction is trained
/// (angular head), so the scale is fixed rather than left arbitrary.
template <class T>
class SpeakerEncoder {
public:
    static constexpr int kWidth = 64;

    explicit SpeakerEncoder(std::uint64_t seed) {
        Rng rng(derive_seed(seed, 0x5bea));
        conv0_ = nn::Linear<T>(ps_, "speaker.conv0", 3 * world::kFeatureDim, kWidth, rng);
        conv1_ = nn::Linear<T>(ps_, "speaker.conv1", 3 * kWidth, kWidth, rng);
        proj_ = nn::Linear<T>(ps_, "speaker.proj", kWidth, kSpeakerDim, rng);
        proj_sq_ = nn::Linear<T>(ps_, "speaker.proj_sq", kWidth, kSpeakerDim, rng, false);
    }

    /// frames [T x F] -> [1 x kSpeakerDim], any T >= 1
    Var<T> operator()(Tape<T>& t, Var<T> frames) const {
        if (frames.cols() != world::kFeatureDim)
            throw ConfigError("speaker encoder: expected " + std::to_string(world::kFeatureDim) + " features, got " +
                              std::to_string(frames.cols()));
        auto h = num::silu(conv0_(t, num::unfold_time(frames, 3, 1)));
        h = num::silu(conv1_(t, num::unfold_time(h, 3, 1)));
        const auto pooled = num::add(proj_(t, num::mean_rows(h)), proj_sq_(t, num::mean_rows(num::mul(h, h))));
        return num::rms_norm(pooled, t.constant(BasicTensor<T>({kSpeakerDim}, T(1))));
    }
    Var<T> operator()(Tape<T>& t, const BasicTensor<T>& frames) const { return (*this)(t, t.constant(frames)); }

    nn::ParamSet<T>& params() noexcept { return ps_; }
    const nn::ParamSet<T>& params() const noexcept { return ps_; }
    bool frozen() const { return ps_.frozen(); }
    void freeze() { ps_.set_frozen(true); }

private:
    nn::ParamSet<T> ps_;
    nn::Linear<T> conv0_, conv1_, proj_, proj_sq_;
};

/// affine -> SiLU -> affine into the LM width.
template <class T>
struct Adapter : nn::Mlp<T> {
    Adapter() = default;
    Adapter(nn::ParamSet<T>& ps, const std::string& name, int in, Rng& rng, int dim = kModelDim)
        : nn::Mlp<T>(ps, name, in, dim, dim, rng) {}
};

/// S: semantic features in LM space, [ceil(T/2) x dim]. Only the adapter
/// receives gradient.
template <class T>
Var<T> extract_semantic(Tape<T>& t, const SemanticEncoder<T>& encoder, const Adapter<T>& adapter, const BasicTensor<T>& frames) {
    if (!encoder.frozen()) throw StateError("extract_semantic: encoder must be frozen");
    if (frames.rank() != 2 || frames.cols() != world::kFeatureDim)
        throw ConfigError("extract_semantic: frames must be [T x " + std::to_string(world::kFeatureDim) + "], got " +
                          num::shape_str(frames.shape()));
    return adapter(t, encoder(t, frames));
}

/// S': one speaker row in LM space, [1 x dim].
template <class T>
Var<T> extract_speaker(Tape<T>& t, const SpeakerEncoder<T>& encoder, const Adapter<T>& adapter, const BasicTensor<T>& frames) {
    if (!encoder.frozen()) throw StateError("extract_speaker: encoder must be frozen");
    if (frames.rank() != 2 || frames.cols() != world::kFeatureDim)
        throw ConfigError("extract_speaker: frames must be [T x " + std::to_string(world::kFeatureDim) + "], got " +
                          num::shape_str(frames.shape()));
    return adapter(t, encoder(t, frames));
}

// ---- pretraining ---------------------------------------------------------

struct PretrainConfig {
    int steps = 1200;
    int batch = 8;
    double lr = 2e-3;
    double degraded_prob = 0.3;
    std::uint64_t seed = 11;
    bool shuffle_labels = false;  // control experiment
    bool angular_head = false;    // speaker pretraining: angular-margin head (else a linear softmax head)
    double head_scale = 16.0;     // speaker pretraining: angular head cosine scale
    double head_margin = 0.2;     // speaker pretraining: angular head margin

    static PretrainConfig semantic_defaults() { return {}; }
    static PretrainConfig speaker_defaults() {
        PretrainConfig c;
        c.steps = 3000;
        c.lr = 1e-3;
        c.seed = 12;
        return c;
    }
};

/// A random training-split rendering (train text x train speaker).
inline world::Rendering sample_training_rendering(const world::World& w, Rng& rng, double degraded_prob) {
    const auto& sp = w.splits();
    const auto& text = sp.train_texts[static_cast<std::size_t>(rng.index(static_cast<int>(sp.train_texts.size())))];
    const int spk = sp.train_speakers[static_cast<std::size_t>(rng.index(static_cast<int>(sp.train_speakers.size())))];
    const auto ch = rng.bernoulli(degraded_prob) ? world::Channel::degraded : world::Channel::pristine;
    return w.render(text, spk, ch, rng.next_u64());
}

/// Label of downsampled frame i is the label of input frame 2i.
inline std::vector<int> downsampled_labels(const world::Transcript& text) {
    const auto full = world::frame_labels(text);
    std::vector<int> out;
    for (std::size_t i = 0; i < full.size(); i += 2) out.push_back(full[i]);
    return out;
}

struct SemanticPretrainResult {
    SemanticEncoder<float> encoder;
    double heldout_accuracy = 0.0;
    std::vector<double> losses;
};

/// Frame accuracy of `logits_fn(tape, frames) -> [T' x classes]` on held-out pristine utterances.
template <class LogitsFn>
double heldout_frame_accuracy(const world::World& w, LogitsFn&& logits_fn) {
    long hit = 0, total = 0;
    for (const auto& u : w.splits().heldout_utterances) {
        const auto r = w.render(u);
        Tape<float> t;
        const auto pred = nn::argmax_rows(logits_fn(t, r.frames).value());
        const auto lab = downsampled_labels(u.transcript);
        for (std::size_t i = 0; i < lab.size(); ++i) hit += pred[i] == lab[i];
        total += static_cast<long>(lab.size());
    }
    return static_cast<double>(hit) / static_cast<double>(total);
}

inline SemanticPretrainResult pretrain_semantic_encoder(const world::World& w, const PretrainConfig& cfg) {
    SemanticPretrainResult res{SemanticEncoder<float>(cfg.seed), 0.0, {}};
    auto& ps = res.encoder.params();
    Rng init(derive_seed(cfg.seed, 0x4ead));
    nn::Linear<float> head(ps, "semantic.head", kSemanticDim, kSemanticClasses, init);
    Rng rng(derive_seed(cfg.seed, 0xda7a));
    nn::FitOptions opt;
    opt.steps = cfg.steps;
    opt.adam.lr = cfg.lr;
    opt.what = "semantic encoder pretraining";
    res.losses = nn::fit(ps, opt, [&](Tape<float>& t, int) {
        std::vector<Var<float>> losses;
        for (int b = 0; b < cfg.batch; ++b) {
            const auto r = sample_training_rendering(w, rng, cfg.degraded_prob);
            auto labels = downsampled_labels(r.transcript);
            if (cfg.shuffle_labels) rng.shuffle(labels);
            const std::vector<std::uint8_t> mask(labels.size(), 1);
            losses.push_back(num::cross_entropy(head(t, res.encoder(t, r.frames)), labels, mask));
        }
        return nn::mean_of(losses);
    });
    res.heldout_accuracy = heldout_frame_accuracy(w, [&](Tape<float>& t, const num::Tensor& f) { return head(t, res.encoder(t, f)); });
    res.encoder.freeze();
    // the classification head is discarded with this scope; its parameters
    // live in the encoder's set only during pretraining
    auto kept = SemanticEncoder<float>(cfg.seed);
    for (auto* p : kept.params().all()) p->value = ps.find(p->name)->value;
    kept.freeze();
    res.encoder = std::move(kept);
    return res;
}

struct SpeakerPretrainResult {
    SpeakerEncoder<float> encoder;
    double heldout_accuracy = 0.0;  // held-out utterances of train speakers
    std::vector<double> losses;
};

/// Fresh renderings of held-out texts by every train speaker.
inline std::vector<world::Rendering> speaker_probe_set(const world::World& w, int per_speaker, std::uint64_t seed) {
    std::vector<world::Rendering> out;
    const auto& sp = w.splits();
    for (int s : sp.train_speakers)
        for (int i = 0; i < per_speaker; ++i) {
            const auto& text = sp.heldout_texts[static_cast<std::size_t>(i) % sp.heldout_texts.size()];
            out.push_back(w.render(text, s, world::Channel::pristine, derive_seed(seed, 0x9b0be, s, i)));
        }
    return out;
}

inline SpeakerPretrainResult pretrain_speaker_encoder(const world::World& w, const PretrainConfig& cfg) {
    SpeakerPretrainResult res{SpeakerEncoder<float>(cfg.seed), 0.0, {}};
    auto& ps = res.encoder.params();
    const auto& train_spk = w.splits().train_speakers;
    std::vector<int> class_of(static_cast<std::size_t>(w.n_speakers()), -1);
    for (std::size_t i = 0; i < train_spk.size(); ++i) class_of[static_cast<std::size_t>(train_spk[i])] = static_cast<int>(i);
    Rng init(derive_seed(cfg.seed, 0x4eae));
    const int classes = static_cast<int>(train_spk.size());
    nn::AngularHead<float> angular;
    nn::Linear<float> linear;
    if (cfg.angular_head)
        angular = nn::AngularHead<float>(ps, "speaker.head", kSpeakerDim, classes, init, cfg.head_scale, cfg.head_margin);
    else
        linear = nn::Linear<float>(ps, "speaker.head", kSpeakerDim, classes, init);
    auto scores = [&](Tape<float>& t, Var<float> x) { return cfg.angular_head ? angular.cosines(t, x) : linear(t, x); };
    auto head_loss = [&](Tape<float>& t, Var<float> x, const std::vector<int>& labels) {
        if (cfg.angular_head) return angular.loss(t, x, labels);
        const std::vector<std::uint8_t> mask(labels.size(), 1);
        return num::cross_entropy(linear(t, x), labels, mask);
    };
    Rng rng(derive_seed(cfg.seed, 0xda7b));
    nn::FitOptions opt;
    opt.steps = cfg.steps;
    opt.adam.lr = cfg.lr;
    opt.what = "speaker encoder pretraining";
    res.losses = nn::fit(ps, opt, [&](Tape<float>& t, int) {
        std::vector<Var<float>> rows;
        std::vector<int> labels;
        for (int b = 0; b < cfg.batch; ++b) {
            const auto r = sample_training_rendering(w, rng, cfg.degraded_prob);
            rows.push_back(res.encoder(t, r.frames));
            labels.push_back(class_of[static_cast<std::size_t>(r.speaker_id)]);
        }
        if (cfg.shuffle_labels) rng.shuffle(labels);
        return head_loss(t, num::concat_rows(rows), labels);
    });
    long hit = 0;
    const auto probe = speaker_probe_set(w, 5, cfg.seed);
    for (const auto& r : probe) {
        Tape<float> t;
        hit += nn::argmax_rows(scores(t, res.encoder(t, r.frames)).value())[0] == class_of[static_cast<std::size_t>(r.speaker_id)];
    }
    res.heldout_accuracy = static_cast<double>(hit) / static_cast<double>(probe.size());
    auto kept = SpeakerEncoder<float>(cfg.seed);
    for (auto* p : kept.params().all()) p->value = ps.find(p->name)->value;
    kept.freeze();
    res.encoder = std::move(kept);
    return res;
}

inline double cosine(std::span<const float> a, std::span<const float> b) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += static_cast<double>(a[i]) * b[i];
        aa += static_cast<double>(a[i]) * a[i];
        bb += static_cast<double>(b[i]) * b[i];
    }
    if (aa == 0.0 || bb == 0.0) return 0.0;
    return ab / std::sqrt(aa * bb);
}

}  // namespace starvc::enc
