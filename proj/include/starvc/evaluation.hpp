#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "starvc/checkpoint.hpp"
#include "starvc/model.hpp"

// Objective metrics: edit-distance error rates, and two independently
// trained judges (a frame-level transcriber and a speaker verifier) used to
// score converted frames.
namespace starvc::eval {

using num::Tape;
using num::Tensor;
using num::Var;
using world::Transcript;

// ---- edit distance ----------------------------------------------------------

struct EditOps {
    int distance = 0;
    int substitutions = 0;
    int deletions = 0;
    int insertions = 0;
};

/// Unit-cost Levenshtein alignment. Operation counts follow a backtrace that
/// prefers substitution, then deletion, then insertion.
template <class Seq>
EditOps edit_distance(const Seq& ref, const Seq& hyp) {
    const std::size_t n = ref.size(), m = hyp.size();
    std::vector<int> dp((n + 1) * (m + 1));
    auto at = [&](std::size_t i, std::size_t j) -> int& { return dp[i * (m + 1) + j]; };
    for (std::size_t i = 0; i <= n; ++i) at(i, 0) = static_cast<int>(i);
    for (std::size_t j = 0; j <= m; ++j) at(0, j) = static_cast<int>(j);
    for (std::size_t i = 1; i <= n; ++i)
        for (std::size_t j = 1; j <= m; ++j)
            at(i, j) = std::min({at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1), at(i - 1, j) + 1, at(i, j - 1) + 1});
    EditOps ops;
    ops.distance = at(n, m);
    std::size_t i = n, j = m;
    while (i > 0 || j > 0) {
        if (i > 0 && j > 0 && at(i, j) == at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
            ops.substitutions += ref[i - 1] == hyp[j - 1] ? 0 : 1;
            --i;
            --j;
        } else if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
            ++ops.deletions;
            --i;
        } else {
            ++ops.insertions;
            --j;
        }
    }
    return ops;
}

inline std::vector<std::string> words_of(const Transcript& t) {
    std::vector<std::string> w;
    for (int s : t) w.push_back(world::SymbolVocab::name(s));
    return w;
}

/// Characters of the symbol names, spaces dropped.
inline std::string chars_of(const Transcript& t) {
    std::string c;
    for (int s : t) c += world::SymbolVocab::name(s);
    return c;
}

inline std::vector<std::string> split_words(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    std::string w;
    while (is >> w) out.push_back(w);
    return out;
}

inline double wer(const std::vector<std::string>& ref, const std::vector<std::string>& hyp) {
    if (ref.empty()) throw MetricError("wer: empty reference");
    return static_cast<double>(edit_distance(ref, hyp).distance) / static_cast<double>(ref.size());
}
inline double wer(const std::string& ref, const std::string& hyp) { return wer(split_words(ref), split_words(hyp)); }

inline double cer(const std::string& ref, const std::string& hyp) {
    std::string r, h;
    for (char c : ref)
        if (c != ' ') r += c;
    for (char c : hyp)
        if (c != ' ') h += c;
    if (r.empty()) throw MetricError("cer: empty reference");
    return static_cast<double>(edit_distance(r, h).distance) / static_cast<double>(r.size());
}

/// Corpus-level rate: total edits over total reference length.
struct RateAccumulator {
    long edits = 0;
    long length = 0;
    template <class Seq>
    void add(const Seq& ref, const Seq& hyp) {
        if (ref.empty()) throw MetricError("error rate: empty reference");
        edits += edit_distance(ref, hyp).distance;
        length += static_cast<long>(ref.size());
    }
    double rate() const {
        if (length == 0) throw MetricError("error rate: no references");
        return static_cast<double>(edits) / static_cast<double>(length);
    }
};

// ---- oracle transcriber ----------------------------------------------------

/// Per-frame symbol classifier over a 5-frame context window, no
/// downsampling; shares nothing with the pipeline's semantic encoder.
class OracleTranscriber {
public:
    static constexpr int kContext = 5;
    static constexpr int kWidth = 96;

    explicit OracleTranscriber(std::uint64_t seed) {
        Rng rng(derive_seed(seed, 0x0a5c));
        l0_ = nn::Linear<float>(ps_, "oracle_asr.l0", kContext * world::kFeatureDim, kWidth, rng);
        l1_ = nn::Linear<float>(ps_, "oracle_asr.l1", kWidth, kWidth, rng);
        out_ = nn::Linear<float>(ps_, "oracle_asr.out", kWidth, world::kContentSymbols + 1, rng);
    }

    Var<float> logits(Tape<float>& t, const Tensor& frames) const {
        if (frames.cols() != world::kFeatureDim) throw ConfigError("oracle transcriber: wrong feature width");
        auto h = num::silu(l0_(t, num::unfold_time(t.constant(frames), kContext, 1)));
        h = num::silu(l1_(t, h));
        return out_(t, h);
    }

    std::vector<int> frame_labels(const Tensor& frames) const {
        Tape<float> t;
        return nn::argmax_rows(logits(t, frames).value());
    }

    /// Width-3 majority filter: an isolated frame whose two neighbours agree
    /// takes their label. Identity on clean label sequences, where every run
    /// is at least two frames long.
    static std::vector<int> smooth(std::vector<int> labels) {
        const auto orig = labels;
        for (std::size_t i = 1; i + 1 < orig.size(); ++i)
            if (orig[i - 1] == orig[i + 1] && orig[i] != orig[i - 1]) labels[i] = orig[i - 1];
        return labels;
    }

    /// Collapse runs of equal labels: a run of r speech frames stands for
    /// round(r / 3) symbols (at least one); silence runs are dropped.
    static Transcript collapse(const std::vector<int>& labels) {
        Transcript out;
        std::size_t i = 0;
        while (i < labels.size()) {
            std::size_t j = i;
            while (j < labels.size() && labels[j] == labels[i]) ++j;
            if (labels[i] < world::kContentSymbols) {
                const int copies = std::max(1, static_cast<int>(std::lround(static_cast<double>(j - i) / world::kFramesPerSymbol)));
                for (int c = 0; c < copies; ++c) out.push_back(labels[i]);
            }
            i = j;
        }
        return out;
    }

    Transcript transcribe(const Tensor& frames) const { return collapse(smooth(frame_labels(frames))); }

    nn::ParamSet<float>& params() noexcept { return ps_; }
    const nn::ParamSet<float>& params() const noexcept { return ps_; }

private:
    nn::ParamSet<float> ps_;
    nn::Linear<float> l0_, l1_, out_;
};

// ---- oracle verifier ---------------------------------------------------------

/// Speaker embedding from a kernel-5 conv stack with moment pooling; width
/// and depth differ from the pipeline's speaker encoder.
class OracleVerifier {
public:
    static constexpr int kContext = 5;
    static constexpr int kWidth = 48;
    static constexpr int kEmbed = 24;
    static_assert(kWidth != enc::SpeakerEncoder<float>::kWidth && kEmbed != enc::kSpeakerDim);

    explicit OracleVerifier(std::uint64_t seed) {
        Rng rng(derive_seed(seed, 0x0e21f));
        l0_ = nn::Linear<float>(ps_, "oracle_spk.l0", kContext * world::kFeatureDim, kWidth, rng);
        l1_ = nn::Linear<float>(ps_, "oracle_spk.l1", kWidth, kWidth, rng);
        mean_ = nn::Linear<float>(ps_, "oracle_spk.mean", kWidth, kEmbed, rng);
        sq_ = nn::Linear<float>(ps_, "oracle_spk.sq", kWidth, kEmbed, rng, false);
    }

    Var<float> forward(Tape<float>& t, const Tensor& frames) const {
        if (frames.cols() != world::kFeatureDim) throw ConfigError("oracle verifier: wrong feature width");
        auto h = num::silu(l0_(t, num::unfold_time(t.constant(frames), kContext, 1)));
        h = num::silu(l1_(t, h));
        return num::add(mean_(t, num::mean_rows(h)), sq_(t, num::mean_rows(num::mul(h, h))));
    }

    std::vector<float> embed(const Tensor& frames) const {
        Tape<float> t;
        const auto v = forward(t, frames).value().values();
        return {v.begin(), v.end()};
    }

    nn::ParamSet<float>& params() noexcept { return ps_; }
    const nn::ParamSet<float>& params() const noexcept { return ps_; }

private:
    nn::ParamSet<float> ps_;
    nn::Linear<float> l0_, l1_, mean_, sq_;
};

/// Oracles must not share any tensor with the pipeline encoders.
inline void assert_independent(const nn::ParamSet<float>& oracle, const nn::ParamSet<float>& pipeline) {
    for (const auto* a : oracle.all())
        for (const auto* b : pipeline.all()) {
            if (a == b || a->name == b->name) throw ContractError("oracle shares tensor '" + a->name + "' with the pipeline");
            const auto v = a->value.values();
            const bool constant = std::all_of(v.begin(), v.end(), [&](float x) { return x == v[0]; });
            if (!constant && a->value.shape() == b->value.shape() && a->value.same_bits(b->value))
                throw ContractError("oracle tensor '" + a->name + "' duplicates pipeline tensor '" + b->name + "'");
        }
}

struct OracleConfig {
    int transcriber_steps = 1500;
    int verifier_steps = 3000;
    int batch = 8;
    double transcriber_lr = 2e-3;
    double verifier_lr = 1e-3;
    double verifier_scale = 16.0;  // cosine-logit scale of the temporary angular head
    double verifier_margin = 0.2;  // additive margin on the true-class cosine
    double degraded_prob = 0.5;
    std::uint64_t seed = 0x0AC1E;
    double max_eer = 0.10;
};

struct TranscriberResult {
    OracleTranscriber oracle;
    double pristine_exact = 0.0;  // held-out pristine renderings transcribed exactly
    double degraded_cer = 0.0;    // held-out degraded renderings
};

inline TranscriberResult train_oracle_transcriber(const world::World& w, const OracleConfig& cfg) {
    TranscriberResult res{OracleTranscriber(derive_seed(cfg.seed, 1)), 0.0, 0.0};
    Rng rng(derive_seed(cfg.seed, 0xa5a5));
    nn::FitOptions opt;
    opt.steps = cfg.transcriber_steps;
    opt.adam.lr = cfg.transcriber_lr;
    opt.what = "oracle transcriber training";
    nn::fit(res.oracle.params(), opt, [&](Tape<float>& t, int) {
        std::vector<Var<float>> losses;
        for (int b = 0; b < cfg.batch; ++b) {
            const auto r = enc::sample_training_rendering(w, rng, cfg.degraded_prob);
            const auto labels = world::frame_labels(r.transcript);
            const std::vector<std::uint8_t> mask(labels.size(), 1);
            losses.push_back(num::cross_entropy(res.oracle.logits(t, r.frames), labels, mask));
        }
        return nn::mean_of(losses);
    });
    res.oracle.params().set_frozen(true);
    int exact = 0;
    RateAccumulator deg;
    const auto& held = w.splits().heldout_utterances;
    for (const auto& u : held) {
        exact += res.oracle.transcribe(w.render(u).frames) == u.transcript;
        const auto d = w.render(u.transcript, u.speaker, world::Channel::degraded, derive_seed(u.seed, 0xdeb));
        deg.add(chars_of(u.transcript), chars_of(res.oracle.transcribe(d.frames)));
    }
    res.pristine_exact = static_cast<double>(exact) / static_cast<double>(held.size());
    res.degraded_cer = deg.rate();
    return res;
}

/// Equal error rate of same/different-speaker cosine scores.
inline double equal_error_rate(std::vector<double> same, std::vector<double> diff) {
    if (same.empty() || diff.empty()) throw MetricError("eer: need both same- and different-speaker trials");
    std::vector<double> thresholds = same;
    thresholds.insert(thresholds.end(), diff.begin(), diff.end());
    std::sort(thresholds.begin(), thresholds.end());
    std::sort(same.begin(), same.end());
    std::sort(diff.begin(), diff.end());
    double best = 1.0;
    for (double th : thresholds) {
        // accept if score >= th
        const double frr = static_cast<double>(std::lower_bound(same.begin(), same.end(), th) - same.begin()) / same.size();
        const double far = static_cast<double>(diff.end() - std::lower_bound(diff.begin(), diff.end(), th)) / diff.size();
        best = std::min(best, std::max(frr, far));
    }
    return best;
}

struct VerifierResult {
    OracleVerifier oracle;
    double eer = 1.0;  // held-out speakers
};

inline VerifierResult train_oracle_verifier(const world::World& w, const OracleConfig& cfg) {
    VerifierResult res{OracleVerifier(derive_seed(cfg.seed, 2)), 1.0};
    auto& ps = res.oracle.params();
    const auto& train_spk = w.splits().train_speakers;
    std::map<int, int> class_of;
    for (std::size_t i = 0; i < train_spk.size(); ++i) class_of[train_spk[i]] = static_cast<int>(i);
    nn::ParamSet<float> head_ps;
    Rng init(derive_seed(cfg.seed, 0x4e0d));
    const nn::AngularHead<float> head(head_ps, "oracle_spk.head", OracleVerifier::kEmbed, static_cast<int>(train_spk.size()), init,
                                      cfg.verifier_scale, cfg.verifier_margin);
    Rng rng(derive_seed(cfg.seed, 0x5a5a));
    std::vector<num::Param<float>*> all = ps.all();
    for (auto* p : head_ps.all()) all.push_back(p);
    num::AdamConfig ac;
    ac.lr = cfg.verifier_lr;
    num::Adam adam(all, ac);
    for (int step = 0; step < cfg.verifier_steps; ++step) {
        Tape<float> t;
        ps.zero_grad();
        head_ps.zero_grad();
        std::vector<Var<float>> rows;
        std::vector<int> labels;
        for (int b = 0; b < cfg.batch; ++b) {
            const auto r = enc::sample_training_rendering(w, rng, cfg.degraded_prob);
            rows.push_back(res.oracle.forward(t, r.frames));
            labels.push_back(class_of.at(r.speaker_id));
        }
        auto loss = head.loss(t, num::concat_rows(rows), labels);
        try {
            t.backward(loss);
            adam.step();
        } catch (const NumericError& e) {
            throw TrainingError("oracle verifier training diverged at step " + std::to_string(step) + ": " + e.what());
        }
    }
    ps.set_frozen(true);
    // EER over all pairs of held-out-speaker renderings
    std::vector<std::pair<int, std::vector<float>>> embs;
    for (const auto& u : w.splits().heldout_utterances) embs.emplace_back(u.speaker, res.oracle.embed(w.render(u).frames));
    std::vector<double> same, diff;
    for (std::size_t a = 0; a < embs.size(); ++a)
        for (std::size_t b = a + 1; b < embs.size(); ++b)
            (embs[a].first == embs[b].first ? same : diff).push_back(enc::cosine(embs[a].second, embs[b].second));
    res.eer = equal_error_rate(same, diff);
    if (res.eer > cfg.max_eer)
        throw CalibrationError("oracle verifier EER " + std::to_string(res.eer) + " exceeds gate " + std::to_string(cfg.max_eer));
    return res;
}

struct Oracles {
    OracleTranscriber transcriber;
    OracleVerifier verifier;
};

// ---- conversion metrics ----------------------------------------------------

struct MetricsReport {
    double wer = 0.0;
    double cer = 0.0;
    double wer_text = 0.0;
    double cer_text = 0.0;
    double secs_oracle = 0.0;  // mean cosine(converted, target reference)
    double top1 = 0.0;         // nearest held-out speaker centroid is the target
    int pairs = 0;
    int truncated = 0;
    double secs_source = 0.0;    // mean cosine(converted, source)
    double target_closer = 0.0;  // fraction of pairs closer to target than source

    bool operator==(const MetricsReport&) const = default;
};

inline nlohmann::ordered_json to_json(const MetricsReport& r) {
    nlohmann::ordered_json j;
    j["wer"] = r.wer;
    j["cer"] = r.cer;
    j["wer_text"] = r.wer_text;
    j["cer_text"] = r.cer_text;
    j["secs_oracle"] = r.secs_oracle;
    j["top1"] = r.top1;
    j["pairs"] = r.pairs;
    j["truncated"] = r.truncated;
    j["secs_source"] = r.secs_source;
    j["target_closer"] = r.target_closer;
    return j;
}

inline MetricsReport report_from_json(const nlohmann::json& j) {
    try {
        MetricsReport r;
        r.wer = j.at("wer").get<double>();
        r.cer = j.at("cer").get<double>();
        r.wer_text = j.at("wer_text").get<double>();
        r.cer_text = j.at("cer_text").get<double>();
        r.secs_oracle = j.at("secs_oracle").get<double>();
        r.top1 = j.at("top1").get<double>();
        r.pairs = j.at("pairs").get<int>();
        r.truncated = j.at("truncated").get<int>();
        r.secs_source = j.value("secs_source", 0.0);
        r.target_closer = j.value("target_closer", 0.0);
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("metrics report: ") + e.what());
    }
}

/// Per-speaker centroid of oracle embeddings over a few fresh renderings.
inline std::map<int, std::vector<float>> speaker_centroids(const world::World& w, const OracleVerifier& v, const std::vector<int>& speakers,
                                                           int per_speaker, std::uint64_t seed) {
    std::map<int, std::vector<float>> out;
    const auto& texts = w.splits().heldout_texts;
    for (int s : speakers) {
        std::vector<float> c(OracleVerifier::kEmbed, 0.0f);
        for (int i = 0; i < per_speaker; ++i) {
            const auto r = w.render(texts[static_cast<std::size_t>(i) % texts.size()], s, world::Channel::pristine, derive_seed(seed, 0xce47, s, i));
            auto e = v.embed(r.frames);
            double n = 0.0;
            for (float x : e) n += static_cast<double>(x) * x;
            n = std::sqrt(n);
            for (std::size_t k = 0; k < c.size(); ++k) c[k] += static_cast<float>(e[k] / n / per_speaker);
        }
        out[s] = std::move(c);
    }
    return out;
}

struct EvalOptions {
    lm::GenerateOptions generation{};
    int enrollment_per_speaker = 4;
    std::uint64_t seed = 0xe7a1;
};

/// Convert every manifest pair and score it with the oracles.
inline MetricsReport evaluate_conversion(const model::VcModel<float>& m, const model::FrozenStack& frozen, const Oracles& oracles,
                                         const world::World& w, const std::vector<world::EvalPair>& manifest,
                                         const EvalOptions& opt = {}) {
    if (manifest.empty()) throw MetricError("evaluate_conversion: empty manifest");
    const auto centroids = speaker_centroids(w, oracles.verifier, w.splits().heldout_speakers, opt.enrollment_per_speaker, opt.seed);
    RateAccumulator wer_acc, cer_acc, wer_text_acc, cer_text_acc;
    double secs = 0.0, secs_src = 0.0;
    int top1 = 0, closer = 0, truncated = 0;
    for (const auto& p : manifest) {
        const auto src = w.render(p.source);
        const auto ref = w.render(p.target_ref);
        const auto conv = model::convert(m, frozen, src.frames, ref.frames, opt.generation);
        truncated += conv.truncated;
        const auto heard = oracles.transcriber.transcribe(conv.frames);
        wer_acc.add(words_of(p.source.transcript), words_of(heard));
        cer_acc.add(chars_of(p.source.transcript), chars_of(heard));
        wer_text_acc.add(words_of(p.source.transcript), words_of(conv.text));
        cer_text_acc.add(chars_of(p.source.transcript), chars_of(conv.text));
        const auto e = oracles.verifier.embed(conv.frames);
        const double to_target = enc::cosine(e, oracles.verifier.embed(ref.frames));
        const double to_source = enc::cosine(e, oracles.verifier.embed(src.frames));
        secs += to_target;
        secs_src += to_source;
        closer += to_target > to_source;
        int best = -1;
        double best_c = -2.0;
        for (const auto& [spk, c] : centroids) {
            const double cs = enc::cosine(e, c);
            if (cs > best_c) {
                best_c = cs;
                best = spk;
            }
        }
        top1 += best == p.target_ref.speaker;
    }
    const double n = static_cast<double>(manifest.size());
    MetricsReport r;
    r.wer = wer_acc.rate();
    r.cer = cer_acc.rate();
    r.wer_text = wer_text_acc.rate();
    r.cer_text = cer_text_acc.rate();
    r.secs_oracle = secs / n;
    r.secs_source = secs_src / n;
    r.top1 = top1 / n;
    r.target_closer = closer / n;
    r.pairs = static_cast<int>(manifest.size());
    r.truncated = truncated;
    return r;
}

}  // namespace starvc::eval
