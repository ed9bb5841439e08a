#pragma once

#include <algorithm>
#include <limits>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "starvc/codec.hpp"
#include "starvc/nn.hpp"
#include "starvc/synthworld.hpp"

// Multi-stream autoregressive LM. One text stream and n acoustic streams are
// laid out on a shared step axis with per-stream delays (text first), and one
// transformer predicts every stream's next token from the summed embeddings
// of the previous column, conditioned on a [speaker row, semantic rows] prefix.
namespace starvc::lm {

using num::BasicTensor;
using num::Tape;
using num::Var;
using world::Transcript;

/// Text stream ids: content symbols, PAD, BOS, EOS, then a few reserved ids.
inline constexpr int kTextPad = world::SymbolVocab::pad;
inline constexpr int kTextBos = world::SymbolVocab::bos;
inline constexpr int kTextEos = world::SymbolVocab::eos;
inline constexpr int kTextVocab = 40;

struct StreamLayout {
    int layers = 4;  // acoustic streams
    int codes = 64;  // acoustic codebook size K

    int streams() const noexcept { return 1 + layers; }
    /// Delay of stream s (0 = text, 1..n = acoustic layer s-1).
    int delay(int s) const noexcept { return s; }
    int ac_pad() const noexcept { return codes; }
    int ac_bos() const noexcept { return codes + 1; }
    int vocab(int s) const noexcept { return s == 0 ? kTextVocab : codes + 2; }
    int pad(int s) const noexcept { return s == 0 ? kTextPad : ac_pad(); }
    int bos(int s) const noexcept { return s == 0 ? kTextBos : ac_bos(); }
    /// Grid length for a text of `text_len` symbols and `frames` acoustic steps.
    int grid_length(int text_len, int frames) const noexcept { return std::max(text_len + 1, delay(layers) + frames) + 1; }
};

/// (1+n) x L token matrix plus masks.
struct DelayedGrid {
    StreamLayout layout;
    std::vector<std::vector<int>> tokens;              // [stream][step]
    std::vector<std::vector<std::uint8_t>> valid;      // real (non-structural) tokens
    std::vector<std::vector<std::uint8_t>> supervise;  // valid + text EOS + first PAD after each acoustic stream

    int length() const { return tokens.empty() ? 0 : static_cast<int>(tokens[0].size()); }
    int streams() const { return static_cast<int>(tokens.size()); }
    bool operator==(const DelayedGrid& o) const { return tokens == o.tokens; }
};

inline DelayedGrid build_delayed_grid(const Transcript& text, const codec::CodeGrid& codes, const StreamLayout& layout) {
    if (text.empty()) throw InputError("build_delayed_grid: empty text");
    if (codes.length() < 1) throw InputError("build_delayed_grid: empty code grid");
    if (codes.layers() != layout.layers)
        throw DimensionError("build_delayed_grid: code grid has " + std::to_string(codes.layers()) + " layers, layout " +
                             std::to_string(layout.layers));
    for (int sym : text)
        if (!world::SymbolVocab::is_content(sym)) throw InputError("build_delayed_grid: non-content text token " + std::to_string(sym));
    const int Lt = static_cast<int>(text.size()), Ta = codes.length();
    const int L = layout.grid_length(Lt, Ta);
    DelayedGrid g;
    g.layout = layout;
    g.tokens.assign(static_cast<std::size_t>(layout.streams()), std::vector<int>(static_cast<std::size_t>(L)));
    g.valid.assign(g.tokens.size(), std::vector<std::uint8_t>(static_cast<std::size_t>(L), 0));
    g.supervise = g.valid;
    for (int j = 0; j < L; ++j) {
        auto& row = g.tokens[0];
        if (j < Lt) {
            row[static_cast<std::size_t>(j)] = text[static_cast<std::size_t>(j)];
            g.valid[0][static_cast<std::size_t>(j)] = g.supervise[0][static_cast<std::size_t>(j)] = 1;
        } else if (j == Lt) {
            row[static_cast<std::size_t>(j)] = kTextEos;
            g.supervise[0][static_cast<std::size_t>(j)] = 1;
        } else {
            row[static_cast<std::size_t>(j)] = kTextPad;
        }
    }
    for (int s = 1; s < layout.streams(); ++s) {
        const int d = layout.delay(s);
        auto& row = g.tokens[static_cast<std::size_t>(s)];
        for (int j = 0; j < L; ++j) {
            const auto sj = static_cast<std::size_t>(j);
            if (j < d) {
                row[sj] = layout.ac_bos();
            } else if (j < d + Ta) {
                const int c = codes.at(s - 1, j - d);
                if (c < 0 || c >= layout.codes) throw InputError("build_delayed_grid: code " + std::to_string(c) + " out of range");
                row[sj] = c;
                g.valid[static_cast<std::size_t>(s)][sj] = g.supervise[static_cast<std::size_t>(s)][sj] = 1;
            } else {
                row[sj] = layout.ac_pad();
                if (j == d + Ta) g.supervise[static_cast<std::size_t>(s)][sj] = 1;
            }
        }
    }
    return g;
}

struct GridContents {
    Transcript text;
    codec::CodeGrid codes;
};

inline GridContents invert_delayed_grid(const DelayedGrid& g) {
    const auto& layout = g.layout;
    if (g.streams() != layout.streams())
        throw GridFormatError("grid has " + std::to_string(g.streams()) + " streams, layout expects " + std::to_string(layout.streams()));
    const int L = g.length();
    for (const auto& row : g.tokens)
        if (static_cast<int>(row.size()) != L) throw GridFormatError("grid streams have unequal lengths");
    auto fail = [](int s, int j, const std::string& what) {
        return GridFormatError("stream " + std::to_string(s) + " step " + std::to_string(j) + ": " + what);
    };
    GridContents out;
    // text: content*, EOS, PAD*
    {
        bool ended = false;
        for (int j = 0; j < L; ++j) {
            const int tok = g.tokens[0][static_cast<std::size_t>(j)];
            if (ended) {
                if (tok != kTextPad) throw fail(0, j, "token after end of text");
            } else if (world::SymbolVocab::is_content(tok)) {
                out.text.push_back(tok);
            } else if (tok == kTextEos) {
                ended = true;
            } else if (tok == kTextPad) {
                if (out.text.empty()) throw fail(0, j, "empty text");
                throw fail(0, j, "PAD before EOS");
            } else {
                throw fail(0, j, "unexpected token " + std::to_string(tok));
            }
        }
        if (!ended) throw fail(0, L, "text stream has no EOS");
        if (out.text.empty()) throw fail(0, 0, "empty text");
    }
    // acoustic: BOS* (exactly delay), code*, PAD+
    std::vector<std::vector<int>> layers;
    for (int s = 1; s < layout.streams(); ++s) {
        const int d = layout.delay(s);
        std::vector<int> codes;
        bool ended = false;
        for (int j = 0; j < L; ++j) {
            const int tok = g.tokens[static_cast<std::size_t>(s)][static_cast<std::size_t>(j)];
            if (j < d) {
                if (tok != layout.ac_bos()) throw fail(s, j, "expected BOS before stream delay " + std::to_string(d));
            } else if (ended) {
                if (tok != layout.ac_pad()) throw fail(s, j, "token after PAD");
            } else if (tok >= 0 && tok < layout.codes) {
                codes.push_back(tok);
            } else if (tok == layout.ac_pad()) {
                ended = true;
            } else {
                throw fail(s, j, "unexpected token " + std::to_string(tok));
            }
        }
        if (!ended) throw fail(s, L, "acoustic stream never ends with PAD");
        if (codes.empty()) throw fail(s, d, "empty acoustic stream");
        if (!layers.empty() && codes.size() != layers.front().size())
            throw fail(s, d + static_cast<int>(std::min(codes.size(), layers.front().size())), "acoustic stream length differs from layer 0");
        layers.push_back(std::move(codes));
    }
    const int Ta = static_cast<int>(layers.front().size());
    out.codes = codec::CodeGrid(layout.layers, Ta);
    for (int l = 0; l < layout.layers; ++l)
        for (int t = 0; t < Ta; ++t) out.codes.at(l, t) = layers[static_cast<std::size_t>(l)][static_cast<std::size_t>(t)];
    if (L != layout.grid_length(static_cast<int>(out.text.size()), Ta))
        throw GridFormatError("grid length " + std::to_string(L) + " does not match its contents");
    return out;
}

// ---- grid dump -------------------------------------------------------------

inline std::string token_name(const StreamLayout& layout, int s, int tok) {
    if (tok == layout.bos(s)) return "<bos>";
    if (tok == layout.pad(s)) return "<pad>";
    if (s == 0) {
        if (tok == kTextEos) return "<eos>";
        if (world::SymbolVocab::is_content(tok)) return world::SymbolVocab::name(tok);
        return "<r" + std::to_string(tok) + ">";
    }
    return std::to_string(tok);
}

inline int parse_token(const StreamLayout& layout, int s, const std::string& w) {
    if (w == "<bos>") return layout.bos(s);
    if (w == "<pad>") return layout.pad(s);
    if (s == 0) {
        if (w == "<eos>") return kTextEos;
        return world::SymbolVocab::id_of(w);
    }
    try {
        std::size_t used = 0;
        const int v = std::stoi(w, &used);
        if (used != w.size()) throw FormatError("");
        return v;
    } catch (const std::exception&) {
        throw FormatError("grid dump: bad acoustic token '" + w + "'");
    }
}

/// One stream per line, tokens space-separated.
inline void write_grid(std::ostream& os, const DelayedGrid& g) {
    for (int s = 0; s < g.streams(); ++s) {
        for (int j = 0; j < g.length(); ++j) os << (j ? " " : "") << token_name(g.layout, s, g.tokens[static_cast<std::size_t>(s)][static_cast<std::size_t>(j)]);
        os << '\n';
    }
}

/// Parses a dump; masks are recomputed from the decoded contents.
inline DelayedGrid read_grid(std::istream& is, int codes = 64) {
    std::vector<std::vector<std::string>> lines;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::vector<std::string> words;
        std::string w;
        while (ls >> w) words.push_back(w);
        lines.push_back(std::move(words));
    }
    if (lines.size() < 2) throw FormatError("grid dump: need a text line and at least one acoustic line");
    StreamLayout layout{static_cast<int>(lines.size()) - 1, codes};
    DelayedGrid g;
    g.layout = layout;
    for (int s = 0; s < layout.streams(); ++s) {
        std::vector<int> row;
        for (const auto& w : lines[static_cast<std::size_t>(s)]) row.push_back(parse_token(layout, s, w));
        g.tokens.push_back(std::move(row));
    }
    const auto contents = invert_delayed_grid(g);
    return build_delayed_grid(contents.text, contents.codes, layout);
}

// ---- model -----------------------------------------------------------------

struct LmConfig {
    int dim = 64;
    int heads = 4;
    int blocks = 4;
    int ffn = 256;
    int max_steps = 512;
    StreamLayout layout{};
};

template <class T>
struct LmOutput {
    std::vector<Var<T>> logits;  // per stream, [steps x vocab_s]
};

/// Position tracks for the whole sequence [S', S rows, steps]. Half the heads
/// count in acoustic time (step j sits where frame j-1 does), the other half
/// in text time (text step k sits at the centre frame of symbol k). Semantic
/// row i covers input frame 2i in both.
inline std::vector<std::vector<int>> position_tracks(int heads, int semantic_rows, int steps) {
    std::vector<int> acoustic, text;
    acoustic.push_back(0);
    text.push_back(0);
    for (int i = 0; i < semantic_rows; ++i) {
        acoustic.push_back(2 * i + 1);
        text.push_back(2 * i + 1);
    }
    for (int j = 0; j < steps; ++j) {
        acoustic.push_back(j);
        // centre frame of symbol j is 3j + silence + 1; position = frame + 1
        text.push_back(world::kFramesPerSymbol * j + world::kSilenceFrames + 2);
    }
    std::vector<std::vector<int>> out;
    for (int h = 0; h < heads; ++h) out.push_back(h < heads / 2 ? acoustic : text);
    return out;
}

template <class T>
class StreamLM {
public:
    StreamLM() = default;
    StreamLM(nn::ParamSet<T>& ps, const LmConfig& cfg, Rng& rng) : cfg_(cfg) {
        const auto& lay = cfg.layout;
        for (int s = 0; s < lay.streams(); ++s)
            embed_.push_back(ps.add("lm.embed." + std::to_string(s), BasicTensor<T>::randn({lay.vocab(s), cfg.dim}, rng, 0.5)));
        for (int b = 0; b < cfg.blocks; ++b)
            blocks_.emplace_back(ps, "lm.block" + std::to_string(b), cfg.dim, cfg.heads, cfg.ffn, rng, cfg.blocks);
        norm_ = nn::RmsNorm<T>(ps, "lm.out_norm", cfg.dim);
        for (int s = 0; s < lay.streams(); ++s) heads_.emplace_back(ps, "lm.head." + std::to_string(s), cfg.dim, lay.vocab(s), rng);
    }

    const LmConfig& config() const noexcept { return cfg_; }
    const StreamLayout& layout() const noexcept { return cfg_.layout; }

    /// inputs[s][j] is the stream-s token fed at step j (the previous column's
    /// token, BOS at step 0). Returns logits for every step.
    LmOutput<T> forward_inputs(Tape<T>& t, Var<T> semantic, Var<T> speaker, const std::vector<std::vector<int>>& inputs) const {
        const auto& lay = cfg_.layout;
        if (static_cast<int>(inputs.size()) != lay.streams())
            throw DimensionError("lm forward: " + std::to_string(inputs.size()) + " input streams, expected " + std::to_string(lay.streams()));
        const int steps = static_cast<int>(inputs[0].size());
        if (steps > cfg_.max_steps)
            throw CapacityError("lm forward: " + std::to_string(steps) + " steps exceeds the configured maximum of " + std::to_string(cfg_.max_steps));
        if (steps < 1) throw DimensionError("lm forward: no steps");
        if (speaker.rows() != 1 || speaker.cols() != cfg_.dim || semantic.cols() != cfg_.dim)
            throw DimensionError("lm forward: prefix must be [1 x " + std::to_string(cfg_.dim) + "] + [T' x " + std::to_string(cfg_.dim) +
                                 "], got " + num::shape_str(speaker.shape()) + " + " + num::shape_str(semantic.shape()));
        Var<T> x;
        for (int s = 0; s < lay.streams(); ++s) {
            if (static_cast<int>(inputs[static_cast<std::size_t>(s)].size()) != steps) throw DimensionError("lm forward: ragged input streams");
            auto e = num::embedding_lookup(t.param(*embed_[static_cast<std::size_t>(s)]), std::span<const int>(inputs[static_cast<std::size_t>(s)]));
            x = s == 0 ? e : num::add(x, e);
        }
        const int P = 1 + semantic.rows();
        auto h = num::concat_rows(std::vector<Var<T>>{speaker, semantic, x});
        const auto pos = position_tracks(cfg_.heads, semantic.rows(), steps);
        for (const auto& b : blocks_) h = b(t, h, true, pos);
        h = norm_(t, num::slice_rows(h, P, steps));
        LmOutput<T> out;
        for (int s = 0; s < lay.streams(); ++s) out.logits.push_back(heads_[static_cast<std::size_t>(s)](t, h));
        return out;
    }

    /// Teacher forcing: logits at step j predict grid column j from columns < j.
    LmOutput<T> forward(Tape<T>& t, Var<T> semantic, Var<T> speaker, const DelayedGrid& grid) const {
        return forward_inputs(t, semantic, speaker, shifted_inputs(grid));
    }

    std::vector<std::vector<int>> shifted_inputs(const DelayedGrid& grid) const {
        const auto& lay = cfg_.layout;
        if (grid.streams() != lay.streams()) throw DimensionError("lm forward: grid stream count does not match layout");
        std::vector<std::vector<int>> in;
        for (int s = 0; s < lay.streams(); ++s) {
            std::vector<int> row{lay.bos(s)};
            const auto& g = grid.tokens[static_cast<std::size_t>(s)];
            row.insert(row.end(), g.begin(), g.end() - 1);
            in.push_back(std::move(row));
        }
        return in;
    }

private:
    LmConfig cfg_;
    std::vector<num::Param<T>*> embed_;
    std::vector<nn::Block<T>> blocks_;
    nn::RmsNorm<T> norm_;
    std::vector<nn::Linear<T>> heads_;
};

// ---- generation -------------------------------------------------------------

struct GenerateOptions {
    int max_steps = 96;
    double temperature = 0.0;  // 0 = greedy
    int top_k = 0;
    std::uint64_t seed = 0;
};

struct Generation {
    DelayedGrid grid;
    GridContents contents;
    bool truncated = false;
};

namespace detail {

/// Pick among `allowed` token ids from one logits row.
template <class T>
int pick(const BasicTensor<T>& logits, int row, const std::vector<int>& allowed, const GenerateOptions& opt, Rng& rng) {
    int best = allowed.front();
    for (int id : allowed)
        if (logits(row, id) > logits(row, best)) best = id;
    if (opt.temperature <= 0.0) return best;
    std::vector<std::pair<double, int>> cand;
    for (int id : allowed) cand.emplace_back(static_cast<double>(logits(row, id)) / opt.temperature, id);
    std::stable_sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    if (opt.top_k > 0 && static_cast<int>(cand.size()) > opt.top_k) cand.resize(static_cast<std::size_t>(opt.top_k));
    double z = 0.0;
    for (auto& c : cand) z += std::exp(c.first - cand.front().first);
    double u = rng.uniform() * z;
    for (auto& c : cand) {
        u -= std::exp(c.first - cand.front().first);
        if (u < 0.0) return c.second;
    }
    return cand.back().second;
}

}  // namespace detail

/// Autoregressive decoding with the layout imposed: BOS before each delay,
/// text PAD after EOS (EOS not allowed first), acoustic layer 0 decides the
/// frame count and deeper layers end with it. Stops once the grid is
/// complete or after `max_steps` (then flagged truncated and the partial
/// content is re-laid out).
template <class T>
Generation generate(const StreamLM<T>& model, const BasicTensor<T>& semantic, const BasicTensor<T>& speaker,
                    const GenerateOptions& opt = {}) {
    const auto& lay = model.layout();
    if (opt.max_steps < lay.layers + 2) throw ConfigError("generate: max_steps must be at least " + std::to_string(lay.layers + 2));
    const int max_steps = std::min(opt.max_steps, model.config().max_steps);
    Rng rng(opt.seed);
    std::vector<std::vector<int>> cols(static_cast<std::size_t>(lay.streams()));
    int text_end = -1, frames = -1;
    std::vector<int> text_allowed, first_allowed, code_allowed;
    for (int i = 0; i < world::kContentSymbols; ++i) text_allowed.push_back(i);
    for (int i = 0; i < lay.codes; ++i) code_allowed.push_back(i);
    first_allowed = code_allowed;
    first_allowed.push_back(lay.ac_pad());
    auto with_eos = text_allowed;
    with_eos.push_back(kTextEos);

    bool complete = false;
    int j = 0;
    for (; j < max_steps; ++j) {
        std::vector<std::vector<int>> inputs;
        for (int s = 0; s < lay.streams(); ++s) {
            std::vector<int> row{lay.bos(s)};
            row.insert(row.end(), cols[static_cast<std::size_t>(s)].begin(), cols[static_cast<std::size_t>(s)].end());
            inputs.push_back(std::move(row));
        }
        Tape<T> t;
        const auto out = model.forward_inputs(t, t.constant(semantic), t.constant(speaker), inputs);
        // text
        int tok;
        if (text_end >= 0) {
            tok = kTextPad;
        } else {
            tok = detail::pick(out.logits[0].value(), j, j == 0 ? text_allowed : with_eos, opt, rng);
            if (tok == kTextEos) text_end = j;
        }
        cols[0].push_back(tok);
        for (int s = 1; s < lay.streams(); ++s) {
            const int d = lay.delay(s);
            const auto& lg = out.logits[static_cast<std::size_t>(s)].value();
            if (j < d) {
                tok = lay.ac_bos();
            } else if (s == 1) {
                if (frames >= 0) {
                    tok = lay.ac_pad();
                } else {
                    tok = detail::pick(lg, j, j == d ? code_allowed : first_allowed, opt, rng);
                    if (tok == lay.ac_pad()) frames = j - d;
                }
            } else {
                tok = frames >= 0 && j >= d + frames ? lay.ac_pad() : detail::pick(lg, j, code_allowed, opt, rng);
            }
            cols[static_cast<std::size_t>(s)].push_back(tok);
        }
        if (text_end >= 0 && frames >= 0 && j + 1 == lay.grid_length(text_end, frames)) {
            complete = true;
            ++j;
            break;
        }
    }
    Generation g;
    g.truncated = !complete;
    if (complete) {
        g.grid.layout = lay;
        g.grid.tokens = std::move(cols);
        g.contents = invert_delayed_grid(g.grid);
        g.grid = build_delayed_grid(g.contents.text, g.contents.codes, lay);
        return g;
    }
    // truncated: keep the text emitted so far and every frame all layers reached
    Transcript text;
    for (int tok : cols[0])
        if (world::SymbolVocab::is_content(tok)) text.push_back(tok);
    int ta = frames >= 0 ? frames : std::numeric_limits<int>::max();
    for (int s = 1; s < lay.streams(); ++s) {
        int n = 0;
        for (int tok : cols[static_cast<std::size_t>(s)]) n += tok >= 0 && tok < lay.codes;
        ta = std::min(ta, n);
    }
    codec::CodeGrid codes(lay.layers, ta);
    for (int s = 1; s < lay.streams(); ++s)
        for (int f = 0; f < ta; ++f) codes.at(s - 1, f) = cols[static_cast<std::size_t>(s)][static_cast<std::size_t>(lay.delay(s) + f)];
    g.contents = GridContents{text, codes};
    g.grid = build_delayed_grid(text, codes, lay);
    return g;
}

}  // namespace starvc::lm
