#include <gtest/gtest.h>

#include <functional>

#include "starvc/evaluation.hpp"

using namespace starvc;
using namespace starvc::eval;
using num::Tensor;

namespace {

const world::World& corpus() {
    static const world::World w(world::CorpusConfig{});
    return w;
}

const TranscriberResult& transcriber() {
    static const auto r = train_oracle_transcriber(corpus(), OracleConfig{});
    return r;
}

const VerifierResult& verifier() {
    static const auto r = train_oracle_verifier(corpus(), OracleConfig{});
    return r;
}

int brute_distance(const std::string& a, const std::string& b) {
    std::function<int(std::size_t, std::size_t)> go = [&](std::size_t i, std::size_t j) -> int {
        if (i == a.size()) return static_cast<int>(b.size() - j);
        if (j == b.size()) return static_cast<int>(a.size() - i);
        return std::min({go(i + 1, j + 1) + (a[i] == b[j] ? 0 : 1), go(i + 1, j) + 1, go(i, j + 1) + 1});
    };
    return go(0, 0);
}

std::string random_string(Rng& rng, int max_len) {
    std::string s(static_cast<std::size_t>(rng.index(max_len + 1)), 'a');
    for (auto& c : s) c = static_cast<char>('a' + rng.index(3));
    return s;
}

}  // namespace

TEST(EditDistance, KittenSitting) {
    const auto ops = edit_distance(std::string("kitten"), std::string("sitting"));
    EXPECT_EQ(ops.distance, 3);
    EXPECT_EQ(ops.substitutions, 2);
    EXPECT_EQ(ops.insertions, 1);
    EXPECT_EQ(ops.deletions, 0);
}

TEST(EditDistance, MatchesExhaustiveRecursion) {
    Rng rng(5);
    for (int i = 0; i < 1000; ++i) {
        const auto a = random_string(rng, 6), b = random_string(rng, 6);
        const auto ops = edit_distance(a, b);
        ASSERT_EQ(ops.distance, brute_distance(a, b)) << a << " / " << b;
        ASSERT_EQ(ops.substitutions + ops.deletions + ops.insertions, ops.distance);
        ASSERT_EQ(static_cast<int>(a.size()) - ops.deletions + ops.insertions, static_cast<int>(b.size()));
    }
}

TEST(EditDistance, MetricAxioms) {
    Rng rng(6);
    for (int i = 0; i < 1000; ++i) {
        const auto a = random_string(rng, 8), b = random_string(rng, 8), c = random_string(rng, 8);
        const int ab = edit_distance(a, b).distance;
        ASSERT_EQ(edit_distance(a, a).distance, 0);
        ASSERT_EQ(ab, edit_distance(b, a).distance);
        ASSERT_EQ(ab == 0, a == b);
        ASSERT_LE(edit_distance(a, c).distance, ab + edit_distance(b, c).distance);
    }
}

TEST(ErrorRates, WordAndCharacterExamples) {
    EXPECT_DOUBLE_EQ(wer("a b c", "a x c"), 1.0 / 3.0);
    EXPECT_DOUBLE_EQ(wer("a b", "a b c d"), 1.0);
    EXPECT_DOUBLE_EQ(wer("a b c", "a b c"), 0.0);
    EXPECT_DOUBLE_EQ(cer("ab cd", "abcd"), 0.0);
    EXPECT_DOUBLE_EQ(cer("ab cd", "ab ce"), 0.25);
    EXPECT_THROW(wer("", "a"), MetricError);
    EXPECT_THROW(cer("  ", "a"), MetricError);
    RateAccumulator acc;
    EXPECT_THROW(acc.rate(), MetricError);
    acc.add(std::string("abc"), std::string("abd"));
    acc.add(std::string("a"), std::string("a"));
    EXPECT_DOUBLE_EQ(acc.rate(), 0.25);
}

TEST(OracleTranscriber, CollapseInvertsFrameLabels) {
    Rng rng(8);
    for (int i = 0; i < 500; ++i) {
        world::Transcript t(static_cast<std::size_t>(1 + rng.index(10)));
        for (auto& s : t) s = rng.index(world::kContentSymbols);
        const auto labels = world::frame_labels(t);
        ASSERT_EQ(OracleTranscriber::smooth(labels), labels);
        ASSERT_EQ(OracleTranscriber::collapse(labels), t);
    }
    EXPECT_EQ(OracleTranscriber::smooth({32, 32, 7, 25, 7, 32, 32}), (std::vector<int>{32, 32, 7, 7, 7, 32, 32}));
    EXPECT_EQ(OracleTranscriber::collapse({32, 4, 32, 32, 7, 7, 7, 7, 7, 32}), (world::Transcript{4, 7, 7}));
}

TEST(OracleTranscriber, MeetsAccuracyGates) {
    const auto& r = transcriber();
    EXPECT_GE(r.pristine_exact, 0.99);
    EXPECT_LE(r.degraded_cer, 0.05);
}

TEST(OracleTranscriber, ReadsCodecReconstructions) {
    const auto& w = corpus();
    std::vector<Tensor> train;
    for (const auto& u : w.splits().train_utterances) train.push_back(w.render(u).frames);
    const auto codec = codec::fit_codebooks(train, codec::FitConfig{});
    RateAccumulator acc;
    for (const auto& u : w.splits().heldout_utterances) {
        const auto rec = codec::decode(codec::encode(w.render(u).frames, codec), codec);
        acc.add(chars_of(u.transcript), chars_of(transcriber().oracle.transcribe(rec)));
    }
    EXPECT_LE(acc.rate(), 0.05);
}

TEST(OracleVerifier, MeetsEerGate) {
    EXPECT_LE(verifier().eer, 0.10);
    const auto r = corpus().render(corpus().splits().heldout_utterances.front());
    const auto e = verifier().oracle.embed(r.frames);
    ASSERT_EQ(e.size(), static_cast<std::size_t>(OracleVerifier::kEmbed));
    EXPECT_NEAR(enc::cosine(e, e), 1.0, 1e-6);
}

TEST(OracleVerifier, GateFailureRaisesCalibrationError) {
    OracleConfig cfg;
    cfg.verifier_steps = 1;
    cfg.max_eer = 0.0;
    EXPECT_THROW(train_oracle_verifier(corpus(), cfg), CalibrationError);
}

TEST(Oracles, IndependentOfPipelineEncoders) {
    const OracleTranscriber t(1);
    const OracleVerifier v(2);
    const enc::SpeakerEncoder<float> spk(12);
    const enc::SemanticEncoder<float> sem(11);
    EXPECT_NO_THROW(assert_independent(v.params(), spk.params()));
    EXPECT_NO_THROW(assert_independent(t.params(), sem.params()));
    EXPECT_THROW(assert_independent(v.params(), v.params()), ContractError);
}

TEST(EqualErrorRate, Examples) {
    EXPECT_DOUBLE_EQ(equal_error_rate({0.9, 0.8}, {0.1, 0.2}), 0.0);
    EXPECT_DOUBLE_EQ(equal_error_rate({0.1, 0.2}, {0.9, 0.8}), 1.0);
    EXPECT_DOUBLE_EQ(equal_error_rate({0.9, 0.3}, {0.1, 0.5}), 0.5);
    EXPECT_THROW(equal_error_rate({}, {0.1}), MetricError);
}

TEST(MetricsReport, JsonRoundTrip) {
    MetricsReport r;
    r.wer = 0.125;
    r.cer = 0.0625;
    r.wer_text = 0.5;
    r.cer_text = 0.25;
    r.secs_oracle = 0.75;
    r.top1 = 0.875;
    r.pairs = 32;
    r.truncated = 1;
    r.secs_source = 0.1;
    r.target_closer = 0.9;
    const auto j = to_json(r);
    for (const char* k : {"wer", "cer", "wer_text", "cer_text", "secs_oracle", "top1", "pairs", "truncated"}) EXPECT_TRUE(j.contains(k)) << k;
    EXPECT_EQ(report_from_json(nlohmann::json::parse(j.dump())), r);
    EXPECT_THROW(report_from_json(nlohmann::json::parse("{\"wer\": 1}")), FormatError);
}
