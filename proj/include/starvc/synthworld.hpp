#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "starvc/error.hpp"
#include "starvc/numerics/tensor.hpp"
#include "starvc/rng.hpp"

// Synthetic speech world: symbol sequences rendered into speaker-conditioned
// frame matrices. Stands in for real audio features throughout the pipeline.
namespace starvc::world {

using num::Tensor;

inline constexpr int kFeatureDim = 16;
inline constexpr int kFramesPerSymbol = 3;
inline constexpr int kSilenceFrames = 2;
inline constexpr int kContentSymbols = 32;
inline constexpr int kPitchChannel = kFeatureDim - 1;
inline constexpr double kPitchAmplitude = 1.0;
inline constexpr double kPristineNoise = 0.01;
inline constexpr double kDegradedNoise = 0.05;

using Transcript = std::vector<int>;

enum class Channel { pristine, degraded };

inline const char* channel_name(Channel c) { return c == Channel::pristine ? "pristine" : "degraded"; }

inline Channel parse_channel(const std::string& s) {
    if (s == "pristine") return Channel::pristine;
    if (s == "degraded") return Channel::degraded;
    throw FormatError("unknown channel '" + s + "'");
}

inline int frames_for_length(int symbols) { return kFramesPerSymbol * symbols + 2 * kSilenceFrames; }

/// Content symbols 0..31 plus the specials PAD, BOS, EOS. Each content symbol
/// owns a fixed 3-frame template drawn from the vocabulary seed.
class SymbolVocab {
public:
    static constexpr int pad = kContentSymbols;
    static constexpr int bos = kContentSymbols + 1;
    static constexpr int eos = kContentSymbols + 2;
    static constexpr int size = kContentSymbols + 3;

    explicit SymbolVocab(std::uint64_t seed = 0x5eed) {
        Rng rng(derive_seed(seed, 0x70c4b));
        templates_.reserve(kContentSymbols);
        for (int s = 0; s < kContentSymbols; ++s) {
            Tensor t({kFramesPerSymbol, kFeatureDim});
            for (int f = 0; f < kFramesPerSymbol; ++f)
                for (int c = 0; c < kFeatureDim; ++c) t(f, c) = c == kPitchChannel ? 0.0f : static_cast<float>(rng.normal());
            // Zero mean over the span (per channel), rescaled to unit variance:
            // an utterance's mean frame then carries the speaker, not the text.
            for (int c = 0; c < kFeatureDim; ++c) {
                double m = 0.0;
                for (int f = 0; f < kFramesPerSymbol; ++f) m += t(f, c);
                m /= kFramesPerSymbol;
                for (int f = 0; f < kFramesPerSymbol; ++f)
                    t(f, c) = static_cast<float>((t(f, c) - m) * std::sqrt(kFramesPerSymbol / (kFramesPerSymbol - 1.0)));
            }
            templates_.push_back(std::move(t));
        }
        min_distance_ = std::numeric_limits<double>::infinity();
        for (int a = 0; a < kContentSymbols; ++a)
            for (int b = a + 1; b < kContentSymbols; ++b) {
                double d = 0.0;
                for (std::size_t i = 0; i < templates_[a].size(); ++i) {
                    const double e = templates_[a][i] - templates_[b][i];
                    d += e * e;
                }
                min_distance_ = std::min(min_distance_, std::sqrt(d));
            }
        if (!(min_distance_ > 0.0)) throw DataError("symbol templates are not pairwise distinguishable");
    }

    const Tensor& templ(int symbol) const {
        check_content(symbol);
        return templates_[static_cast<std::size_t>(symbol)];
    }

    double min_pairwise_distance() const noexcept { return min_distance_; }

    static bool is_content(int id) { return id >= 0 && id < kContentSymbols; }

    static void check_content(int id) {
        if (!is_content(id)) throw InputError("symbol id " + std::to_string(id) + " is not a content symbol");
    }

    /// Two-letter syllable names: consonant + vowel.
    static std::string name(int id) {
        static constexpr char cons[] = "bdgkmnst";
        static constexpr char vow[] = "aeio";
        if (id == pad) return "<pad>";
        if (id == bos) return "<bos>";
        if (id == eos) return "<eos>";
        check_content(id);
        return std::string{cons[id / 4], vow[id % 4]};
    }

    static int id_of(const std::string& n) {
        for (int i = 0; i < size; ++i)
            if (name(i) == n) return i;
        throw FormatError("unknown symbol name '" + n + "'");
    }

    static std::string to_text(const Transcript& t) {
        std::string out;
        for (std::size_t i = 0; i < t.size(); ++i) {
            if (i) out += ' ';
            out += name(t[i]);
        }
        return out;
    }

    static Transcript from_text(const std::string& s) {
        Transcript t;
        std::istringstream is(s);
        std::string w;
        while (is >> w) t.push_back(id_of(w));
        return t;
    }

private:
    std::vector<Tensor> templates_;
    double min_distance_ = 0.0;
};

/// Generative speaker parameters. Gains follow a smooth log-linear spectral
/// tilt, offsets a smooth cosine shape; both are functions of a handful of
/// latent draws so that held-out speakers lie inside the training manifold.
struct SpeakerProfile {
    int id = 0;
    std::array<float, kFeatureDim> gain{};
    std::array<float, kFeatureDim> offset{};
    float pitch_rate = 0.25f;

    static SpeakerProfile identity(float pitch_rate = 0.25f) {
        SpeakerProfile p;
        p.id = -1;
        p.gain.fill(1.0f);
        p.offset.fill(0.0f);
        p.pitch_rate = pitch_rate;
        return p;
    }

    static SpeakerProfile generate(int id, std::uint64_t corpus_seed) {
        Rng rng(derive_seed(corpus_seed, 0x5bea4e7, static_cast<std::uint64_t>(id)));
        SpeakerProfile p;
        p.id = id;
        const double level = rng.uniform(-0.35, 0.35);
        const double tilt = rng.uniform(-0.7, 0.7);
        const double base = rng.uniform(-0.25, 0.25);
        const double shape = rng.uniform(-0.25, 0.25);
        for (int c = 0; c < kFeatureDim; ++c) {
            const double u = static_cast<double>(c) / (kFeatureDim - 1);
            p.gain[static_cast<std::size_t>(c)] = static_cast<float>(std::clamp(std::exp(level + tilt * (u - 0.5)), 0.5, 2.0));
            p.offset[static_cast<std::size_t>(c)] =
                static_cast<float>(std::clamp(base + shape * std::cos(std::numbers::pi * u), -0.5, 0.5));
        }
        p.pitch_rate = static_cast<float>(rng.uniform(0.05, 0.45));
        return p;
    }

    bool within_bounds() const {
        for (int c = 0; c < kFeatureDim; ++c) {
            const auto i = static_cast<std::size_t>(c);
            if (gain[i] < 0.5f || gain[i] > 2.0f || offset[i] < -0.5f || offset[i] > 0.5f) return false;
        }
        return pitch_rate >= 0.05f && pitch_rate <= 0.45f;
    }
};

struct Rendering {
    Tensor frames;  // T x F
    Channel channel = Channel::pristine;
    Transcript transcript;
    int speaker_id = 0;
    std::uint64_t seed = 0;
};

struct RenderOptions {
    std::optional<double> noise_override;
};

/// Render a transcript for one speaker. Pure function of its arguments.
inline Rendering render(const SymbolVocab& vocab, const Transcript& transcript, const SpeakerProfile& speaker,
                        Channel channel, std::uint64_t seed, const RenderOptions& opts = {}) {
    if (transcript.empty()) throw InputError("render: empty transcript");
    for (int s : transcript) SymbolVocab::check_content(s);
    const int T = frames_for_length(static_cast<int>(transcript.size()));
    Tensor clean({T, kFeatureDim});
    for (int t = 0; t < T; ++t) {
        const int k = t - kSilenceFrames;
        const bool speech = k >= 0 && k < kFramesPerSymbol * static_cast<int>(transcript.size());
        for (int c = 0; c < kFeatureDim; ++c) {
            const auto ci = static_cast<std::size_t>(c);
            const double base = speech ? vocab.templ(transcript[static_cast<std::size_t>(k / kFramesPerSymbol)])(k % kFramesPerSymbol, c) : 0.0;
            double v = base * speaker.gain[ci] + speaker.offset[ci];
            if (c == kPitchChannel) v += kPitchAmplitude * std::sin(2.0 * std::numbers::pi * speaker.pitch_rate * t);
            clean(t, c) = static_cast<float>(v);
        }
    }
    Tensor frames = clean;
    if (channel == Channel::degraded) {
        for (int t = 0; t < T; ++t)
            for (int c = 0; c < kFeatureDim; ++c) {
                const float prev = clean(std::max(t - 1, 0), c);
                const float next = clean(std::min(t + 1, T - 1), c);
                frames(t, c) = 0.25f * prev + 0.5f * clean(t, c) + 0.25f * next;
            }
    }
    const double sigma = opts.noise_override.value_or(channel == Channel::pristine ? kPristineNoise : kDegradedNoise);
    if (sigma > 0.0) {
        Rng rng(derive_seed(seed, 0x4015e));
        for (auto& v : frames.values()) v = static_cast<float>(v + sigma * rng.normal());
    }
    return Rendering{std::move(frames), channel, transcript, speaker.id, seed};
}

/// Same transcript re-rendered under another speaker.
inline Rendering parallel_pair(const SymbolVocab& vocab, const Rendering& source, const SpeakerProfile& target,
                               Channel channel, std::uint64_t seed) {
    if (!target.within_bounds()) throw InputError("parallel_pair: target speaker profile out of bounds");
    return render(vocab, source.transcript, target, channel, seed);
}

/// Frame-level labels: symbol id for speech frames, `silence_label` elsewhere.
inline std::vector<int> frame_labels(const Transcript& t, int silence_label = kContentSymbols) {
    std::vector<int> out(static_cast<std::size_t>(frames_for_length(static_cast<int>(t.size()))), silence_label);
    for (std::size_t k = 0; k < t.size(); ++k)
        for (int f = 0; f < kFramesPerSymbol; ++f) out[kSilenceFrames + k * kFramesPerSymbol + static_cast<std::size_t>(f)] = t[k];
    return out;
}

/// Decode each 3-frame symbol span to the content symbol whose template has
/// the smallest summed per-frame distance.
inline Transcript nearest_template_decode(const SymbolVocab& vocab, const Tensor& frames, int n_symbols) {
    Transcript out;
    for (int k = 0; k < n_symbols; ++k) {
        int best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (int s = 0; s < kContentSymbols; ++s) {
            double d = 0.0;
            for (int f = 0; f < kFramesPerSymbol; ++f) {
                const int t = kSilenceFrames + k * kFramesPerSymbol + f;
                for (int c = 0; c < kFeatureDim; ++c) {
                    if (c == kPitchChannel) continue;
                    const double e = frames(t, c) - vocab.templ(s)(f, c);
                    d += e * e;
                }
            }
            if (d < best_d) {
                best_d = d;
                best = s;
            }
        }
        out.push_back(best);
    }
    return out;
}

struct Utterance {
    std::string id;
    int speaker = 0;
    Channel channel = Channel::pristine;
    Transcript transcript;
    std::uint64_t seed = 0;
};

struct CorpusSplits {
    std::vector<int> train_speakers;
    std::vector<int> heldout_speakers;
    std::vector<Transcript> train_texts;
    std::vector<Transcript> heldout_texts;
    std::vector<Utterance> train_utterances;
    std::vector<Utterance> heldout_utterances;
    std::uint64_t seed = 0;
    int n_speakers = 0;
};

struct CorpusConfig {
    int n_speakers = 24;
    int n_texts = 400;
    int min_len = 4;
    int max_len = 12;
    int renders_per_text = 2;
    std::uint64_t seed = 1234;
};

inline CorpusSplits make_corpus(const CorpusConfig& cfg) {
    if (cfg.n_speakers < 4) throw ConfigError("make_corpus: n_speakers must be >= 4");
    if (cfg.n_texts < 20) throw ConfigError("make_corpus: n_texts must be >= 20");
    if (cfg.min_len < 1 || cfg.max_len < cfg.min_len) throw ConfigError("make_corpus: invalid text length range");
    if (cfg.renders_per_text < 1) throw ConfigError("make_corpus: renders_per_text must be >= 1");
    Rng rng(derive_seed(cfg.seed, 0xc0a905));
    CorpusSplits out;
    out.seed = cfg.seed;
    out.n_speakers = cfg.n_speakers;

    std::vector<int> spk(static_cast<std::size_t>(cfg.n_speakers));
    for (int i = 0; i < cfg.n_speakers; ++i) spk[static_cast<std::size_t>(i)] = i;
    rng.shuffle(spk);
    const int n_held_spk = std::max(1, cfg.n_speakers / 6);
    out.heldout_speakers.assign(spk.begin(), spk.begin() + n_held_spk);
    out.train_speakers.assign(spk.begin() + n_held_spk, spk.end());
    std::sort(out.heldout_speakers.begin(), out.heldout_speakers.end());
    std::sort(out.train_speakers.begin(), out.train_speakers.end());
    if (static_cast<int>(out.train_speakers.size()) < cfg.renders_per_text)
        throw ConfigError("make_corpus: fewer train speakers than renders_per_text");

    std::set<Transcript> seen;
    std::vector<Transcript> texts;
    while (static_cast<int>(texts.size()) < cfg.n_texts) {
        const int len = cfg.min_len + rng.index(cfg.max_len - cfg.min_len + 1);
        Transcript t(static_cast<std::size_t>(len));
        for (auto& s : t) s = rng.index(kContentSymbols);
        if (seen.insert(t).second) texts.push_back(std::move(t));
    }
    const int n_held_txt = std::max(2, cfg.n_texts / 10);
    out.heldout_texts.assign(texts.begin(), texts.begin() + n_held_txt);
    out.train_texts.assign(texts.begin() + n_held_txt, texts.end());

    auto emit = [&](std::vector<Utterance>& dst, const std::vector<Transcript>& txts, const std::vector<int>& speakers,
                    const char* prefix) {
        for (std::size_t i = 0; i < txts.size(); ++i) {
            std::vector<int> pool = speakers;
            rng.shuffle(pool);
            for (int r = 0; r < cfg.renders_per_text && r < static_cast<int>(pool.size()); ++r) {
                Utterance u;
                u.id = std::string(prefix) + std::to_string(i) + "_" + std::to_string(r);
                u.speaker = pool[static_cast<std::size_t>(r)];
                u.channel = Channel::pristine;
                u.transcript = txts[i];
                u.seed = derive_seed(cfg.seed, 0x077e2, dst.size(), prefix[0]);
                dst.push_back(std::move(u));
            }
        }
    };
    emit(out.train_utterances, out.train_texts, out.train_speakers, "tr");
    emit(out.heldout_utterances, out.heldout_texts, out.heldout_speakers, "ho");
    return out;
}

/// One evaluation pair: convert `source` toward the voice of `target_ref`.
struct EvalPair {
    Utterance source;
    Utterance target_ref;
};

/// Held-out-only evaluation manifest: n_pairs sources and n_pairs target
/// references, each target speaker different from its source speaker.
inline std::vector<EvalPair> make_test_manifest(const CorpusSplits& c, int n_pairs, std::uint64_t seed) {
    if (c.heldout_speakers.size() < 2) throw ConfigError("test manifest needs at least two held-out speakers");
    if (n_pairs < 1) throw ConfigError("test manifest needs at least one pair");
    Rng rng(derive_seed(seed, 0x7e57));
    const int ns = static_cast<int>(c.heldout_speakers.size());
    const int nt = static_cast<int>(c.heldout_texts.size());
    std::vector<EvalPair> out;
    for (int i = 0; i < n_pairs; ++i) {
        const int s = i % ns;
        const int tgt = (s + 1 + rng.index(ns - 1)) % ns;
        EvalPair p;
        p.source.id = "src" + std::to_string(i);
        p.source.speaker = c.heldout_speakers[static_cast<std::size_t>(s)];
        p.source.transcript = c.heldout_texts[static_cast<std::size_t>(i % nt)];
        p.source.seed = derive_seed(seed, 0x5ace, static_cast<std::uint64_t>(i));
        p.target_ref.id = "tgt" + std::to_string(i);
        p.target_ref.speaker = c.heldout_speakers[static_cast<std::size_t>(tgt)];
        int text_idx = rng.index(nt);
        if (text_idx == i % nt) text_idx = (text_idx + 1) % nt;
        p.target_ref.transcript = c.heldout_texts[static_cast<std::size_t>(text_idx)];
        p.target_ref.seed = derive_seed(seed, 0x7a6e7, static_cast<std::uint64_t>(i));
        out.push_back(std::move(p));
    }
    return out;
}

/// Vocabulary, speaker profiles and splits bundled together.
class World {
public:
    World(CorpusConfig cfg, std::uint64_t vocab_seed = 0x5eed)
        : cfg_(cfg), vocab_(vocab_seed), splits_(make_corpus(cfg)) {
        for (int i = 0; i < cfg.n_speakers; ++i) speakers_.push_back(SpeakerProfile::generate(i, cfg.seed));
    }

    const CorpusConfig& config() const noexcept { return cfg_; }
    const SymbolVocab& vocab() const noexcept { return vocab_; }
    const CorpusSplits& splits() const noexcept { return splits_; }
    const SpeakerProfile& speaker(int id) const { return speakers_.at(static_cast<std::size_t>(id)); }
    int n_speakers() const noexcept { return static_cast<int>(speakers_.size()); }

    Rendering render(const Transcript& t, int speaker, Channel ch, std::uint64_t seed) const {
        return world::render(vocab_, t, this->speaker(speaker), ch, seed);
    }
    Rendering render(const Utterance& u) const { return render(u.transcript, u.speaker, u.channel, u.seed); }

private:
    CorpusConfig cfg_;
    SymbolVocab vocab_;
    CorpusSplits splits_;
    std::vector<SpeakerProfile> speakers_;
};

// Manifest: one tab-separated record per utterance
//   utterance_id  speaker_id  channel  transcript  seed
inline void write_manifest(std::ostream& os, const std::vector<Utterance>& utts) {
    for (const auto& u : utts)
        os << u.id << '\t' << u.speaker << '\t' << channel_name(u.channel) << '\t' << SymbolVocab::to_text(u.transcript)
           << '\t' << u.seed << '\n';
}

inline std::vector<Utterance> read_manifest(std::istream& is) {
    std::vector<Utterance> out;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::size_t start = 0;
        for (;;) {
            const auto tab = line.find('\t', start);
            f.push_back(line.substr(start, tab - start));
            if (tab == std::string::npos) break;
            start = tab + 1;
        }
        if (f.size() != 5) throw FormatError("manifest line " + std::to_string(lineno) + ": expected 5 fields");
        Utterance u;
        u.id = f[0];
        try {
            u.speaker = std::stoi(f[1]);
            u.seed = std::stoull(f[4]);
        } catch (const std::exception&) {
            throw FormatError("manifest line " + std::to_string(lineno) + ": bad number");
        }
        u.channel = parse_channel(f[2]);
        u.transcript = SymbolVocab::from_text(f[3]);
        out.push_back(std::move(u));
    }
    return out;
}

}  // namespace starvc::world
