#include <gtest/gtest.h>

#include <sstream>

#include "starvc/synthworld.hpp"

using namespace starvc;
using namespace starvc::world;

namespace {

const World& default_world() {
    static const World w(CorpusConfig{});
    return w;
}

double mean_frame_distance(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (int t = 0; t < a.rows(); ++t) {
        double d = 0.0;
        for (int c = 0; c < a.cols(); ++c) d += std::pow(a(t, c) - b(t, c), 2);
        s += std::sqrt(d);
    }
    return s / a.rows();
}

Tensor mean_frame(const Tensor& f) {
    Tensor m({kFeatureDim});
    for (int t = 0; t < f.rows(); ++t)
        for (int c = 0; c < kFeatureDim; ++c) m[static_cast<std::size_t>(c)] += f(t, c) / f.rows();
    return m;
}

}  // namespace

TEST(SymbolVocab, TemplatesDistinguishableAndNamed) {
    SymbolVocab v;
    EXPECT_GT(v.min_pairwise_distance(), 0.0);
    for (int i = 0; i < SymbolVocab::size; ++i) EXPECT_EQ(SymbolVocab::id_of(SymbolVocab::name(i)), i);
    EXPECT_EQ(SymbolVocab::name(SymbolVocab::bos), "<bos>");
}

TEST(Render, IdentitySpeakerWithoutNoiseIsTemplatePlusPitch) {
    SymbolVocab v;
    const auto spk = SpeakerProfile::identity(0.2f);
    Transcript t{3, 17};
    auto r = render(v, t, spk, Channel::pristine, 1, RenderOptions{.noise_override = 0.0});
    ASSERT_EQ(r.frames.rows(), frames_for_length(2));
    for (int k = 0; k < 6; ++k) {
        const int frame = kSilenceFrames + k;
        for (int c = 0; c < kPitchChannel; ++c)
            EXPECT_FLOAT_EQ(r.frames(frame, c), v.templ(t[static_cast<std::size_t>(k / 3)])(k % 3, c));
        EXPECT_NEAR(r.frames(frame, kPitchChannel), std::sin(2 * std::numbers::pi * 0.2 * frame), 1e-6);
    }
}

TEST(Render, DeterministicAndRejectsSpecials) {
    const auto& w = default_world();
    auto a = w.render({1, 2, 3, 4}, 0, Channel::degraded, 99);
    auto b = w.render({1, 2, 3, 4}, 0, Channel::degraded, 99);
    EXPECT_TRUE(a.frames.same_bits(b.frames));
    EXPECT_THROW(w.render({1, SymbolVocab::eos}, 0, Channel::pristine, 1), InputError);
}

TEST(Render, SpeakersDifferMoreThanRerenders) {
    const auto& w = default_world();
    Rng rng(5);
    double cross = 0.0, same = 0.0;
    for (int i = 0; i < 100; ++i) {
        const auto& txt = w.splits().train_texts[static_cast<std::size_t>(rng.index(300))];
        const int a = rng.index(w.n_speakers());
        const int b = (a + 1 + rng.index(w.n_speakers() - 1)) % w.n_speakers();
        auto ra = w.render(txt, a, Channel::pristine, rng.next_u64());
        auto ra2 = w.render(txt, a, Channel::pristine, rng.next_u64());
        auto rb = w.render(txt, b, Channel::pristine, rng.next_u64());
        cross += mean_frame_distance(ra.frames, rb.frames);
        same += mean_frame_distance(ra.frames, ra2.frames);
    }
    EXPECT_GT(cross, same);
}

TEST(Speaker, ProfilesWithinBoundsAndPure) {
    for (int id = 0; id < 50; ++id) {
        auto p = SpeakerProfile::generate(id, 77);
        EXPECT_TRUE(p.within_bounds()) << id;
        auto q = SpeakerProfile::generate(id, 77);
        EXPECT_EQ(p.gain, q.gain);
        EXPECT_EQ(p.offset, q.offset);
        EXPECT_EQ(p.pitch_rate, q.pitch_rate);
    }
}

TEST(Corpus, SplitsDisjointDeterministicAndCovered) {
    CorpusConfig cfg;
    auto a = make_corpus(cfg);
    auto b = make_corpus(cfg);
    EXPECT_EQ(a.train_speakers, b.train_speakers);
    EXPECT_EQ(a.train_texts, b.train_texts);
    EXPECT_EQ(a.train_speakers.size(), 20u);
    EXPECT_EQ(a.heldout_speakers.size(), 4u);
    EXPECT_EQ(a.train_texts.size(), 360u);
    EXPECT_EQ(a.heldout_texts.size(), 40u);
    for (int s : a.heldout_speakers)
        EXPECT_EQ(std::count(a.train_speakers.begin(), a.train_speakers.end(), s), 0);
    std::set<Transcript> train(a.train_texts.begin(), a.train_texts.end());
    for (const auto& t : a.heldout_texts) EXPECT_EQ(train.count(t), 0u);
    std::map<int, int> per_speaker;
    for (const auto& u : a.train_utterances) ++per_speaker[u.speaker];
    for (int s : a.train_speakers) EXPECT_GE(per_speaker[s], 10) << "speaker " << s;
    for (const auto& u : a.heldout_utterances)
        EXPECT_TRUE(std::count(a.heldout_speakers.begin(), a.heldout_speakers.end(), u.speaker));
}

TEST(Corpus, ConfigBounds) {
    EXPECT_THROW(make_corpus(CorpusConfig{.n_speakers = 3}), ConfigError);
    EXPECT_THROW(make_corpus(CorpusConfig{.n_texts = 19}), ConfigError);
}

TEST(Corpus, ManifestRoundTrip) {
    auto c = make_corpus(CorpusConfig{});
    std::ostringstream os;
    write_manifest(os, c.train_utterances);
    std::istringstream is(os.str());
    auto back = read_manifest(is);
    ASSERT_EQ(back.size(), c.train_utterances.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        EXPECT_EQ(back[i].id, c.train_utterances[i].id);
        EXPECT_EQ(back[i].transcript, c.train_utterances[i].transcript);
        EXPECT_EQ(back[i].seed, c.train_utterances[i].seed);
    }
    std::istringstream bad("x\t1\tloud\tka\t3\n");
    EXPECT_THROW(read_manifest(bad), FormatError);
}

TEST(TestManifest, HeldOutOnlyAndCrossSpeaker) {
    const auto& w = default_world();
    auto m = make_test_manifest(w.splits(), 32, 4);
    ASSERT_EQ(m.size(), 32u);
    const auto& ho = w.splits().heldout_speakers;
    for (const auto& p : m) {
        EXPECT_NE(p.source.speaker, p.target_ref.speaker);
        EXPECT_TRUE(std::count(ho.begin(), ho.end(), p.source.speaker));
        EXPECT_TRUE(std::count(ho.begin(), ho.end(), p.target_ref.speaker));
    }
}

TEST(ParallelPair, SameSpeakerAndTranscript) {
    const auto& w = default_world();
    auto src = w.render({5, 6, 7, 8}, 2, Channel::pristine, 42);
    auto same = parallel_pair(w.vocab(), src, w.speaker(2), Channel::pristine, 42);
    EXPECT_TRUE(same.frames.same_bits(src.frames));
    auto other = parallel_pair(w.vocab(), src, w.speaker(3), Channel::degraded, 43);
    EXPECT_EQ(other.transcript, src.transcript);
}

TEST(ParallelPair, DegradedDiffersAboveNoiseFloor) {
    const auto& w = default_world();
    Rng rng(8);
    for (int i = 0; i < 20; ++i) {
        auto src = w.render(w.splits().train_texts[static_cast<std::size_t>(i)], 0, Channel::pristine, rng.next_u64());
        auto p = parallel_pair(w.vocab(), src, w.speaker(1), Channel::pristine, 7);
        auto d = parallel_pair(w.vocab(), src, w.speaker(1), Channel::degraded, 7);
        double rms = 0.0;
        for (std::size_t k = 0; k < p.frames.size(); ++k) rms += std::pow(p.frames[k] - d.frames[k], 2);
        rms = std::sqrt(rms / static_cast<double>(p.frames.size()));
        EXPECT_GT(rms, kDegradedNoise);
    }
}

// Calibration gates on the world's difficulty.
TEST(WorldCalibration, SpeakersSeparableByMeanFrame) {
    const auto& w = default_world();
    const auto& texts = w.splits().train_texts;
    std::map<int, Tensor> centroid;
    Rng rng(12);
    for (int s : w.splits().train_speakers) {
        Tensor acc({kFeatureDim});
        for (int k = 0; k < 10; ++k) {
            auto r = w.render(texts[static_cast<std::size_t>(rng.index(static_cast<int>(texts.size())))], s, Channel::pristine, rng.next_u64());
            auto m = mean_frame(r.frames);
            for (int c = 0; c < kFeatureDim; ++c) acc[static_cast<std::size_t>(c)] += m[static_cast<std::size_t>(c)] / 10;
        }
        centroid[s] = acc;
    }
    int correct = 0, total = 0;
    for (int s : w.splits().train_speakers)
        for (int k = 0; k < 10; ++k) {
            auto r = w.render(texts[static_cast<std::size_t>(rng.index(static_cast<int>(texts.size())))], s, Channel::pristine, rng.next_u64());
            auto m = mean_frame(r.frames);
            int best = -1;
            double bd = 1e300;
            for (auto& [id, c] : centroid) {
                double d = 0;
                for (int j = 0; j < kFeatureDim; ++j) d += std::pow(m[static_cast<std::size_t>(j)] - c[static_cast<std::size_t>(j)], 2);
                if (d < bd) {
                    bd = d;
                    best = id;
                }
            }
            correct += best == s;
            ++total;
        }
    EXPECT_GE(static_cast<double>(correct) / total, 0.95);
}

TEST(WorldCalibration, TranscriptsRecoverableByNearestTemplate) {
    const auto& w = default_world();
    int ok = 0, total = 0;
    for (const auto& u : w.splits().train_utterances) {
        auto r = w.render(u);
        auto dec = nearest_template_decode(w.vocab(), r.frames, static_cast<int>(u.transcript.size()));
        for (std::size_t k = 0; k < dec.size(); ++k) ok += dec[k] == u.transcript[k];
        total += static_cast<int>(dec.size());
    }
    EXPECT_GE(static_cast<double>(ok) / total, 0.99);
}
