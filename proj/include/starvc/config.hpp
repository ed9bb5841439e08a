#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "starvc/codec.hpp"
#include "starvc/encoders.hpp"
#include "starvc/evaluation.hpp"
#include "starvc/streamlm.hpp"
#include "starvc/synthworld.hpp"
#include "starvc/trainer.hpp"

// Flat `key = value` run configuration. Every key has a default; unknown
// keys are rejected; the resolved document is echoed into the run directory.
namespace starvc::cfg {

struct RunConfig {
    std::string run_dir = "run";

    world::CorpusConfig corpus{};
    std::uint64_t vocab_seed = 0x5eed;

    codec::FitConfig codec{};

    enc::PretrainConfig semantic = enc::PretrainConfig::semantic_defaults();
    enc::PretrainConfig speaker = enc::PretrainConfig::speaker_defaults();
    eval::OracleConfig oracle{};

    lm::LmConfig lm{};
    std::uint64_t model_seed = 1;

    train::StageConfig asr = train::StageConfig::defaults(train::Stage::asr);
    train::StageConfig vc = train::StageConfig::defaults(train::Stage::vc);
    train::StageConfig joint = train::StageConfig::defaults(train::Stage::joint);

    int eval_pairs = 32;
    std::uint64_t manifest_seed = 77;
    int eval_max_steps = 96;
    int eval_enrollment = 4;

    std::vector<train::StageConfig> schedule() const { return {asr, vc, joint}; }
    eval::EvalOptions eval_options() const {
        eval::EvalOptions o;
        o.generation.max_steps = eval_max_steps;
        o.enrollment_per_speaker = eval_enrollment;
        return o;
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
    std::istringstream is(v);
    T out{};
    is >> out;
    if (!is || !(is >> std::ws).eof()) throw ConfigError("config key '" + key + "': cannot parse '" + v + "'");
    return out;
}

/// Shortest text that parses back to exactly `v`.
inline std::string fmt_double(double v) {
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

inline std::vector<double> parse_list(const std::string& key, const std::string& v) {
    std::vector<double> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_number<double>(key, trim(item)));
    if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
    return out;
}

inline std::string fmt_list(const std::vector<double>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt_double(v[i]);
    return s;
}

}  // namespace detail

/// One documented key: how to read and write it on a RunConfig.
struct Key {
    std::string name;
    std::string doc;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

#define STARVC_INT_KEY(NAME, FIELD, DOC)                                                     \
    Key {                                                                                    \
        NAME, DOC, [](const RunConfig& c) { return std::to_string(c.FIELD); },               \
            [](RunConfig& c, const std::string& v) { c.FIELD = detail::parse_number<decltype(c.FIELD)>(NAME, v); } \
    }
#define STARVC_REAL_KEY(NAME, FIELD, DOC)                                                    \
    Key {                                                                                    \
        NAME, DOC, [](const RunConfig& c) { return detail::fmt_double(c.FIELD); },           \
            [](RunConfig& c, const std::string& v) { c.FIELD = detail::parse_number<double>(NAME, v); } \
    }

inline const std::vector<Key>& keys() {
    static const std::vector<Key> k = [] {
        std::vector<Key> out{
            Key{"run_dir", "run directory root", [](const RunConfig& c) { return c.run_dir; },
                [](RunConfig& c, const std::string& v) { c.run_dir = v; }},
            STARVC_INT_KEY("corpus.seed", corpus.seed, "corpus split/speaker seed"),
            STARVC_INT_KEY("corpus.speakers", corpus.n_speakers, "number of synthetic speakers"),
            STARVC_INT_KEY("corpus.texts", corpus.n_texts, "number of distinct texts"),
            STARVC_INT_KEY("corpus.min_len", corpus.min_len, "shortest text, in symbols"),
            STARVC_INT_KEY("corpus.max_len", corpus.max_len, "longest text, in symbols"),
            STARVC_INT_KEY("corpus.renders_per_text", corpus.renders_per_text, "speakers rendering each text"),
            STARVC_INT_KEY("corpus.vocab_seed", vocab_seed, "symbol template seed"),
            STARVC_INT_KEY("codec.layers", codec.layers, "residual quantizer layers"),
            STARVC_INT_KEY("codec.codes", codec.codes, "codes per layer (code 0 is the zero vector)"),
            STARVC_INT_KEY("codec.iters", codec.iters, "Lloyd iterations per layer"),
            STARVC_INT_KEY("codec.seed", codec.seed, "k-means++ seed"),
            STARVC_INT_KEY("semantic.steps", semantic.steps, "semantic encoder pretraining steps"),
            STARVC_INT_KEY("semantic.batch", semantic.batch, "semantic encoder batch"),
            STARVC_REAL_KEY("semantic.lr", semantic.lr, "semantic encoder learning rate"),
            STARVC_REAL_KEY("semantic.degraded_prob", semantic.degraded_prob, "degraded-channel share"),
            STARVC_INT_KEY("semantic.seed", semantic.seed, "semantic encoder seed"),
            STARVC_INT_KEY("speaker.steps", speaker.steps, "speaker encoder pretraining steps"),
            STARVC_INT_KEY("speaker.batch", speaker.batch, "speaker encoder batch"),
            STARVC_REAL_KEY("speaker.lr", speaker.lr, "speaker encoder learning rate"),
            STARVC_REAL_KEY("speaker.degraded_prob", speaker.degraded_prob, "degraded-channel share"),
            STARVC_INT_KEY("speaker.seed", speaker.seed, "speaker encoder seed"),
            STARVC_INT_KEY("speaker.angular_head", speaker.angular_head, "1: angular-margin pretraining head, 0: linear softmax head"),
            STARVC_INT_KEY("oracle.transcriber_steps", oracle.transcriber_steps, "oracle transcriber steps"),
            STARVC_INT_KEY("oracle.verifier_steps", oracle.verifier_steps, "oracle verifier steps"),
            STARVC_REAL_KEY("oracle.degraded_prob", oracle.degraded_prob, "oracle degraded-channel share"),
            STARVC_INT_KEY("oracle.seed", oracle.seed, "oracle seed (independent of the pipeline)"),
            STARVC_REAL_KEY("oracle.max_eer", oracle.max_eer, "verifier EER gate"),
            STARVC_INT_KEY("lm.dim", lm.dim, "model width"),
            STARVC_INT_KEY("lm.heads", lm.heads, "attention heads"),
            STARVC_INT_KEY("lm.blocks", lm.blocks, "transformer blocks"),
            STARVC_INT_KEY("lm.ffn", lm.ffn, "feed-forward width"),
            STARVC_INT_KEY("lm.max_steps", lm.max_steps, "longest sequence the LM accepts"),
            STARVC_INT_KEY("model.seed", model_seed, "adapter/LM initialization seed"),
            STARVC_INT_KEY("eval.pairs", eval_pairs, "test manifest pairs"),
            STARVC_INT_KEY("eval.manifest_seed", manifest_seed, "test manifest seed"),
            STARVC_INT_KEY("eval.max_steps", eval_max_steps, "generation step limit"),
            STARVC_INT_KEY("eval.enrollment", eval_enrollment, "renderings per held-out speaker centroid"),
        };
        // per-stage training keys
        const std::pair<const char*, train::StageConfig RunConfig::*> stages[] = {
            {"asr", &RunConfig::asr}, {"vc", &RunConfig::vc}, {"joint", &RunConfig::joint}};
        for (const auto& [name, member] : stages) {
            const std::string p = std::string("train.") + name + ".";
            auto real = [&](const std::string& k, double train::StageConfig::*f, const std::string& doc) {
                out.push_back(Key{p + k, doc, [member, f](const RunConfig& c) { return detail::fmt_double(c.*member.*f); },
                                  [member, f, key = p + k](RunConfig& c, const std::string& v) { c.*member.*f = detail::parse_number<double>(key, v); }});
            };
            auto integer = [&](const std::string& k, int train::StageConfig::*f, const std::string& doc) {
                out.push_back(Key{p + k, doc, [member, f](const RunConfig& c) { return std::to_string(c.*member.*f); },
                                  [member, f, key = p + k](RunConfig& c, const std::string& v) { c.*member.*f = detail::parse_number<int>(key, v); }});
            };
            integer("steps", &train::StageConfig::steps, "optimizer steps");
            integer("batch", &train::StageConfig::batch, "instances per step");
            real("lr", &train::StageConfig::lr, "peak learning rate");
            real("w", &train::StageConfig::w, "text weight in the VC loss");
            real("w_joint", &train::StageConfig::w_joint, "ASR weight in the joint loss");
            real("asr_fraction", &train::StageConfig::asr_fraction, "joint-stage ASR instance share");
            real("aug_real_prob", &train::StageConfig::aug_real_prob, "pristine parallel-target share");
            real("speaker_noise", &train::StageConfig::speaker_noise, "std of training noise on the speaker feature");
            integer("eval_every", &train::StageConfig::eval_every, "metrics log interval");
            integer("eval_instances", &train::StageConfig::eval_instances, "held-out monitoring instances");
            out.push_back(Key{p + "lambda", "per-layer acoustic weights", [member](const RunConfig& c) { return detail::fmt_list((c.*member).lambda); },
                              [member, key = p + "lambda"](RunConfig& c, const std::string& v) { (c.*member).lambda = detail::parse_list(key, v); }});
            out.push_back(Key{p + "seed", "data stream seed", [member](const RunConfig& c) { return std::to_string((c.*member).seed); },
                              [member, key = p + "seed"](RunConfig& c, const std::string& v) {
                                  (c.*member).seed = detail::parse_number<std::uint64_t>(key, v);
                              }});
        }
        return out;
    }();
    return k;
}

#undef STARVC_INT_KEY
#undef STARVC_REAL_KEY

inline void set(RunConfig& c, const std::string& key, const std::string& value) {
    for (const auto& k : keys())
        if (k.name == key) return k.set(c, value);
    throw ConfigError("unknown config key '" + key + "'");
}

inline void validate(const RunConfig& c) {
    if (c.codec.layers != c.lm.layout.layers || c.codec.codes != c.lm.layout.codes)
        throw ConfigError("codec layers/codes must match the LM stream layout");
    if (c.lm.dim % c.lm.heads != 0 || (c.lm.dim / c.lm.heads) % 2 != 0) throw ConfigError("lm.dim must split into even-width heads");
    for (const auto& s : c.schedule()) s.validate(c.codec.layers);
    if (c.eval_pairs < 1 || c.eval_max_steps < c.codec.layers + 2) throw ConfigError("invalid evaluation settings");
}

/// Parse a `key = value` document ('#' starts a comment) over the defaults.
inline RunConfig parse(std::istream& is) {
    RunConfig c;
    std::string line;
    int lineno = 0;
    std::map<std::string, int> seen;
    while (std::getline(is, line)) {
        ++lineno;
        if (const auto h = line.find('#'); h != std::string::npos) line.erase(h);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        const auto key = detail::trim(line.substr(0, eq));
        if (seen.count(key)) throw ConfigError("config key '" + key + "' repeated on line " + std::to_string(lineno));
        seen[key] = lineno;
        set(c, key, detail::trim(line.substr(eq + 1)));
    }
    // keep the LM layout in step with the codec
    c.lm.layout.layers = c.codec.layers;
    c.lm.layout.codes = c.codec.codes;
    validate(c);
    return c;
}

inline RunConfig load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file " + path);
    return parse(is);
}

/// Fully resolved document, one documented key per line.
inline std::string render(const RunConfig& c) {
    std::ostringstream os;
    for (const auto& k : keys()) os << "# " << k.doc << '\n' << k.name << " = " << k.get(c) << '\n';
    return os.str();
}

/// FNV-1a over the resolved document, excluding the run directory.
inline std::string hash(const RunConfig& c) {
    RunConfig h = c;
    h.run_dir.clear();
    std::uint64_t x = 0xcbf29ce484222325ull;
    for (unsigned char ch : render(h)) {
        x ^= ch;
        x *= 0x100000001b3ull;
    }
    std::ostringstream os;
    os << std::hex << x;
    return os.str();
}

}  // namespace starvc::cfg
