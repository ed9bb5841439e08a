#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "starvc/error.hpp"
#include "starvc/numerics/serialize.hpp"
#include "starvc/numerics/tensor.hpp"
#include "starvc/rng.hpp"

// Residual vector quantization codec. Each layer quantizes the residual left
// by the layers before it; code 0 of every codebook is the zero vector, so a
// layer can always decline to change the residual.
namespace starvc::codec {

using num::Tensor;

struct Codebook {
    int layer = 0;
    Tensor centroids;  // K x F, row 0 == 0

    int size() const { return centroids.rows(); }
    int dim() const { return centroids.cols(); }
};

/// n layers x T frames of code ids, row-major.
class CodeGrid {
public:
    CodeGrid() = default;
    CodeGrid(int layers, int length) : layers_(layers), length_(length), codes_(static_cast<std::size_t>(layers) * length, 0) {
        if (layers < 1 || length < 0) throw DimensionError("CodeGrid: invalid size");
    }

    int layers() const noexcept { return layers_; }
    int length() const noexcept { return length_; }
    int& at(int layer, int t) { return codes_[static_cast<std::size_t>(layer) * length_ + t]; }
    int at(int layer, int t) const { return codes_[static_cast<std::size_t>(layer) * length_ + t]; }
    std::vector<int> layer(int l) const {
        return {codes_.begin() + static_cast<std::ptrdiff_t>(l) * length_, codes_.begin() + static_cast<std::ptrdiff_t>(l + 1) * length_};
    }
    const std::vector<int>& codes() const noexcept { return codes_; }

    bool operator==(const CodeGrid&) const = default;

private:
    int layers_ = 0;
    int length_ = 0;
    std::vector<int> codes_;
};

struct Codec {
    std::vector<Codebook> books;
    float fit_snr_db = 0.0f;

    bool fitted() const noexcept { return !books.empty(); }
    int layers() const noexcept { return static_cast<int>(books.size()); }
    int codes() const { return books.at(0).size(); }
    int dim() const { return books.at(0).dim(); }
};

struct FitConfig {
    int layers = 4;
    int codes = 64;
    int iters = 25;
    std::uint64_t seed = 7;
};

namespace detail {

inline double sqdist(const float* a, const float* b, int n) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
        const double d = static_cast<double>(a[i]) - b[i];
        s += d * d;
    }
    return s;
}

inline double sqnorm(const float* a, int n) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += static_cast<double>(a[i]) * a[i];
    return s;
}

/// Lowest-index nearest centroid.
inline int nearest(const Tensor& cents, const float* x, double* best_d = nullptr) {
    const int K = cents.rows(), F = cents.cols();
    int best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (int k = 0; k < K; ++k) {
        const double d = sqdist(cents.data() + static_cast<std::size_t>(k) * F, x, F);
        if (d < bd) {
            bd = d;
            best = k;
        }
    }
    if (best_d) *best_d = bd;
    return best;
}

/// Batch Lloyd k-means with k-means++ seeding; row 0 pinned at zero.
inline Tensor kmeans(const Tensor& points, int K, int iters, Rng& rng) {
    const int N = points.rows(), F = points.cols();
    Tensor cents({K, F});
    std::vector<double> d2(static_cast<std::size_t>(N));
    for (int i = 0; i < N; ++i) d2[static_cast<std::size_t>(i)] = sqnorm(points.data() + static_cast<std::size_t>(i) * F, F);
    for (int k = 1; k < K; ++k) {
        const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
        int pick = 0;
        if (total > 0.0) {
            double u = rng.uniform() * total;
            for (pick = 0; pick < N - 1; ++pick) {
                u -= d2[static_cast<std::size_t>(pick)];
                if (u < 0.0) break;
            }
        } else {
            pick = rng.index(N);
        }
        std::copy_n(points.data() + static_cast<std::size_t>(pick) * F, F, cents.data() + static_cast<std::size_t>(k) * F);
        for (int i = 0; i < N; ++i) {
            const double d = sqdist(points.data() + static_cast<std::size_t>(i) * F, cents.data() + static_cast<std::size_t>(k) * F, F);
            d2[static_cast<std::size_t>(i)] = std::min(d2[static_cast<std::size_t>(i)], d);
        }
    }
    std::vector<int> assign(static_cast<std::size_t>(N));
    std::vector<double> dist(static_cast<std::size_t>(N));
    for (int it = 0; it < iters; ++it) {
        for (int i = 0; i < N; ++i)
            assign[static_cast<std::size_t>(i)] = nearest(cents, points.data() + static_cast<std::size_t>(i) * F, &dist[static_cast<std::size_t>(i)]);
        std::vector<double> acc(static_cast<std::size_t>(K) * F, 0.0);
        std::vector<int> count(static_cast<std::size_t>(K), 0);
        for (int i = 0; i < N; ++i) {
            const int a = assign[static_cast<std::size_t>(i)];
            ++count[static_cast<std::size_t>(a)];
            for (int c = 0; c < F; ++c) acc[static_cast<std::size_t>(a) * F + c] += points(i, c);
        }
        // Highest-distortion points re-seed empty clusters.
        std::vector<int> order(static_cast<std::size_t>(N));
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return dist[static_cast<std::size_t>(a)] > dist[static_cast<std::size_t>(b)]; });
        std::size_t next_seed = 0;
        for (int k = 1; k < K; ++k) {
            float* row = cents.data() + static_cast<std::size_t>(k) * F;
            if (count[static_cast<std::size_t>(k)] > 0) {
                for (int c = 0; c < F; ++c)
                    row[c] = static_cast<float>(acc[static_cast<std::size_t>(k) * F + c] / count[static_cast<std::size_t>(k)]);
            } else if (next_seed < order.size()) {
                std::copy_n(points.data() + static_cast<std::size_t>(order[next_seed++]) * F, F, row);
            }
        }
    }
    return cents;
}

}  // namespace detail

/// Quantize one frame through every layer. Returns per-layer codes and
/// writes the residual norm before each layer and after the last one into
/// `residual_norms` (size layers + 1) when given.
inline std::vector<int> encode_frame(const Codec& codec, const float* frame, std::vector<double>* residual_norms = nullptr) {
    const int F = codec.dim();
    std::vector<float> r(frame, frame + F), cand(static_cast<std::size_t>(F));
    std::vector<int> out;
    double norm = detail::sqnorm(r.data(), F);
    if (residual_norms) residual_norms->assign(1, std::sqrt(norm));
    for (const auto& b : codec.books) {
        int k = detail::nearest(b.centroids, r.data());
        for (int c = 0; c < F; ++c) cand[static_cast<std::size_t>(c)] = r[static_cast<std::size_t>(c)] - b.centroids(k, c);
        double cn = detail::sqnorm(cand.data(), F);
        if (cn > norm) {  // float rounding on a near-tie; code 0 keeps the residual
            k = 0;
            cand = r;
            cn = norm;
        }
        out.push_back(k);
        r.swap(cand);
        norm = cn;
        if (residual_norms) residual_norms->push_back(std::sqrt(norm));
    }
    return out;
}

inline CodeGrid encode(const Tensor& frames, const Codec& codec) {
    if (!codec.fitted()) throw StateError("encode: codec has no fitted codebooks");
    if (frames.cols() != codec.dim())
        throw DimensionError("encode: frame width " + std::to_string(frames.cols()) + " != codec dim " + std::to_string(codec.dim()));
    if (!frames.all_finite()) throw NumericError("encode: non-finite frames");
    const int T = frames.rows();
    CodeGrid g(codec.layers(), T);
    for (int t = 0; t < T; ++t) {
        auto codes = encode_frame(codec, frames.data() + static_cast<std::size_t>(t) * frames.cols());
        for (int l = 0; l < codec.layers(); ++l) g.at(l, t) = codes[static_cast<std::size_t>(l)];
    }
    return g;
}

/// Sum of selected centroids over the first `use_layers` layers (all when < 0).
inline Tensor decode(const CodeGrid& grid, const Codec& codec, int use_layers = -1) {
    if (!codec.fitted()) throw StateError("decode: codec has no fitted codebooks");
    if (grid.layers() != codec.layers())
        throw DimensionError("decode: grid has " + std::to_string(grid.layers()) + " layers, codec " + std::to_string(codec.layers()));
    const int L = use_layers < 0 ? codec.layers() : std::min(use_layers, codec.layers());
    const int F = codec.dim();
    if (grid.length() == 0) throw DimensionError("decode: empty grid");
    Tensor out({grid.length(), F});
    for (int t = 0; t < grid.length(); ++t)
        for (int l = 0; l < L; ++l) {
            const int k = grid.at(l, t);
            if (k < 0 || k >= codec.books[static_cast<std::size_t>(l)].size())
                throw IndexError("decode: code " + std::to_string(k) + " at layer " + std::to_string(l) + " step " +
                                 std::to_string(t) + " outside [0, " + std::to_string(codec.books[static_cast<std::size_t>(l)].size()) + ")");
            for (int c = 0; c < F; ++c) out(t, c) += codec.books[static_cast<std::size_t>(l)].centroids(k, c);
        }
    return out;
}

inline double snr_db(double signal_energy, double error_energy) {
    if (error_energy <= 0.0) return 200.0;
    return 10.0 * std::log10(signal_energy / error_energy);
}

/// Reconstruction SNR (dB) of a set of frame matrices.
inline double reconstruction_snr(const std::vector<Tensor>& utts, const Codec& codec, int use_layers = -1) {
    double sig = 0.0, err = 0.0;
    for (const auto& f : utts) {
        auto rec = decode(encode(f, codec), codec, use_layers);
        for (std::size_t i = 0; i < f.size(); ++i) {
            sig += static_cast<double>(f[i]) * f[i];
            err += std::pow(static_cast<double>(f[i]) - rec[i], 2);
        }
    }
    return snr_db(sig, err);
}

/// Mean squared distortion per frame when only the first `use_layers` layers are used.
inline double mean_distortion(const std::vector<Tensor>& utts, const Codec& codec, int use_layers) {
    double err = 0.0;
    std::size_t n = 0;
    for (const auto& f : utts) {
        auto rec = decode(encode(f, codec), codec, use_layers);
        for (std::size_t i = 0; i < f.size(); ++i) err += std::pow(static_cast<double>(f[i]) - rec[i], 2);
        n += static_cast<std::size_t>(f.rows());
    }
    return err / static_cast<double>(n);
}

/// Fit all layers on a frame corpus. Layer l is fit on the residuals left by
/// greedy encoding with layers < l. Records the fit-set SNR.
inline Codec fit_codebooks(const std::vector<Tensor>& corpus, const FitConfig& cfg,
                           std::vector<double>* layer_distortion = nullptr) {
    if (cfg.layers < 1 || cfg.codes < 2 || cfg.iters < 0) throw ConfigError("fit_codebooks: invalid configuration");
    if (corpus.empty()) throw DataError("fit_codebooks: empty corpus");
    const int F = corpus.front().cols();
    int N = 0;
    for (const auto& f : corpus) {
        if (f.cols() != F) throw DimensionError("fit_codebooks: inconsistent frame width");
        N += f.rows();
    }
    if (N < cfg.codes)
        throw DataError("fit_codebooks: corpus has " + std::to_string(N) + " frames, need at least " + std::to_string(cfg.codes));
    Tensor residual({N, F});
    {
        std::size_t off = 0;
        for (const auto& f : corpus) {
            std::copy(f.values().begin(), f.values().end(), residual.data() + off);
            off += f.size();
        }
    }
    Rng rng(derive_seed(cfg.seed, 0xc0dec));
    Codec codec;
    if (layer_distortion) layer_distortion->clear();
    for (int l = 0; l < cfg.layers; ++l) {
        Codebook b{l, detail::kmeans(residual, cfg.codes, cfg.iters, rng)};
        // advance residuals exactly as encode_frame would
        Codec partial;
        partial.books = {b};
        double dist = 0.0;
        for (int i = 0; i < N; ++i) {
            float* row = residual.data() + static_cast<std::size_t>(i) * F;
            const int k = encode_frame(partial, row)[0];
            for (int c = 0; c < F; ++c) row[c] -= b.centroids(k, c);
            dist += detail::sqnorm(row, F);
        }
        if (layer_distortion) layer_distortion->push_back(dist / N);
        codec.books.push_back(std::move(b));
    }
    codec.fit_snr_db = static_cast<float>(reconstruction_snr(corpus, codec));
    return codec;
}

// Artifact: "RVQ1", n, K, F (u32), n centroid tensor records, fit SNR (f32).
inline std::vector<char> serialize(const Codec& c) {
    if (!c.fitted()) throw StateError("serialize: codec not fitted");
    num::ByteWriter w;
    w.raw("RVQ1", 4);
    w.u32(static_cast<std::uint32_t>(c.layers()));
    w.u32(static_cast<std::uint32_t>(c.codes()));
    w.u32(static_cast<std::uint32_t>(c.dim()));
    for (const auto& b : c.books) w.tensor("codebook." + std::to_string(b.layer), b.centroids);
    w.f32(c.fit_snr_db);
    return std::move(w.bytes());
}

inline Codec deserialize(const std::vector<char>& bytes) {
    num::ByteReader r(bytes);
    if (r.raw(4) != "RVQ1") throw FormatError("codec artifact: bad magic");
    const auto n = r.u32(), K = r.u32(), F = r.u32();
    Codec c;
    for (std::uint32_t l = 0; l < n; ++l) {
        std::string name;
        Tensor t = r.tensor(name);
        if (t.rank() != 2 || t.rows() != static_cast<int>(K) || t.cols() != static_cast<int>(F))
            throw FormatError("codec artifact: codebook " + name + " has shape " + num::shape_str(t.shape()));
        for (int j = 0; j < t.cols(); ++j)
            if (t(0, j) != 0.0f) throw FormatError("codec artifact: reserved zero centroid is not zero");
        c.books.push_back(Codebook{static_cast<int>(l), std::move(t)});
    }
    c.fit_snr_db = r.f32();
    if (!r.done()) throw FormatError("codec artifact: trailing bytes");
    return c;
}

inline void save(const Codec& c, const std::string& path) {
    auto bytes = serialize(c);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write " + path);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Codec load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ArtifactMissingError("codec artifact " + path + " not found (run `fit-codec`)");
    std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
}

}  // namespace starvc::codec
