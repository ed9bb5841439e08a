#include <gtest/gtest.h>

#include "starvc/encoders.hpp"

using namespace starvc;
using namespace starvc::enc;
using num::Tensor;

namespace {

const world::World& corpus() {
    static const world::World w(world::CorpusConfig{});
    return w;
}

const SemanticPretrainResult& semantic() {
    static const auto r = pretrain_semantic_encoder(corpus(), PretrainConfig::semantic_defaults());
    return r;
}

const SpeakerPretrainResult& speaker() {
    static const auto r = pretrain_speaker_encoder(corpus(), PretrainConfig::speaker_defaults());
    return r;
}

std::vector<float> embed(const SpeakerEncoder<float>& e, const Tensor& frames) {
    Tape<float> t;
    auto v = e(t, frames).value().values();
    return {v.begin(), v.end()};
}

template <class Encoder>
std::vector<std::uint32_t> bits_of(const Encoder& e) {
    std::vector<std::uint32_t> out;
    for (auto* p : e.params().all())
        for (float v : p->value.values()) out.push_back(std::bit_cast<std::uint32_t>(v));
    return out;
}

}  // namespace

TEST(SemanticEncoder, HeldOutFrameAccuracyGate) {
    EXPECT_GE(semantic().heldout_accuracy, 0.90);
    EXPECT_TRUE(semantic().encoder.frozen());
    EXPECT_EQ(semantic().encoder.params().find("semantic.head.w"), nullptr);
}

TEST(SemanticEncoder, FrozenForwardBitIdentical) {
    const auto& w = corpus();
    const auto r = w.render(w.splits().heldout_utterances[0]);
    Tape<float> a, b;
    EXPECT_TRUE(semantic().encoder(a, r.frames).value().same_bits(semantic().encoder(b, r.frames).value()));
}

TEST(SemanticEncoder, ShuffledLabelControlNearChance) {
    auto cfg = PretrainConfig::semantic_defaults();
    cfg.steps = 300;
    cfg.shuffle_labels = true;
    const auto ctl = pretrain_semantic_encoder(corpus(), cfg);
    // majority (silence) share of downsampled frames is about 1/8
    EXPECT_LT(ctl.heldout_accuracy, 0.25) << "control accuracy";
    EXPECT_GT(semantic().heldout_accuracy, ctl.heldout_accuracy + 0.5);
}

TEST(SpeakerEncoder, HeldOutUtteranceAccuracyGate) {
    EXPECT_GE(speaker().heldout_accuracy, 0.95);
    EXPECT_TRUE(speaker().encoder.frozen());
    for (const auto* p : speaker().encoder.params().all()) EXPECT_NE(p->name.rfind("speaker.head", 0), 0u) << p->name;
}

TEST(SpeakerEncoder, OneVectorForAnyLength) {
    Rng rng(4);
    for (int T : {1, 2, 7, 40}) {
        Tape<float> t;
        auto e = speaker().encoder(t, Tensor::randn({T, world::kFeatureDim}, rng));
        EXPECT_EQ(e.shape(), (num::Shape{1, kSpeakerDim}));
    }
}

TEST(SpeakerEncoder, OutputHasUnitRms) {
    Rng rng(5);
    for (int T : {3, 30}) {
        Tape<float> t;
        const auto e = speaker().encoder(t, Tensor::randn({T, world::kFeatureDim}, rng)).value();
        double ss = 0;
        for (float v : e.values()) ss += static_cast<double>(v) * v;
        EXPECT_NEAR(std::sqrt(ss / kSpeakerDim), 1.0, 1e-3);
    }
}

TEST(SpeakerEncoder, SameSpeakerMoreSimilarThanDifferent) {
    const auto& w = corpus();
    const auto& sp = w.splits();
    Rng rng(8);
    double same = 0, diff = 0;
    const int pairs = 200;
    for (int i = 0; i < pairs; ++i) {
        const int a = sp.train_speakers[static_cast<std::size_t>(rng.index(20))];
        int b = sp.train_speakers[static_cast<std::size_t>(rng.index(20))];
        if (b == a) b = sp.train_speakers[static_cast<std::size_t>((rng.index(19) + 1 + a) % 20)];
        const auto& t1 = sp.heldout_texts[static_cast<std::size_t>(rng.index(static_cast<int>(sp.heldout_texts.size())))];
        const auto& t2 = sp.heldout_texts[static_cast<std::size_t>(rng.index(static_cast<int>(sp.heldout_texts.size())))];
        const auto ea = embed(speaker().encoder, w.render(t1, a, world::Channel::pristine, rng.next_u64()).frames);
        const auto ea2 = embed(speaker().encoder, w.render(t2, a, world::Channel::pristine, rng.next_u64()).frames);
        const auto eb = embed(speaker().encoder, w.render(t2, b, world::Channel::pristine, rng.next_u64()).frames);
        same += cosine(ea, ea2) / pairs;
        diff += cosine(ea, eb) / pairs;
    }
    EXPECT_GT(same, diff);
}

TEST(Extract, SemanticShapeFreezingAndDeterminism) {
    nn::ParamSet<float> ps;
    Rng rng(3);
    Adapter<float> adapter(ps, "semantic_adapter", kSemanticDim, rng);
    const auto frames = Tensor::randn({10, world::kFeatureDim}, rng);
    const auto before = bits_of(semantic().encoder);
    Tape<float> t;
    auto s = extract_semantic(t, semantic().encoder, adapter, frames);
    EXPECT_EQ(s.shape(), (num::Shape{5, kModelDim}));
    t.backward(num::sum(num::mul(s, s)));
    EXPECT_EQ(semantic().encoder.params().grad_norm(), 0.0);
    EXPECT_GT(ps.grad_norm(), 0.0);
    Tape<float> t2;
    EXPECT_TRUE(extract_semantic(t2, semantic().encoder, adapter, frames).value().same_bits(s.value()));
    EXPECT_EQ(bits_of(semantic().encoder), before);
}

TEST(Extract, SpeakerSingleRowAndFreezing) {
    nn::ParamSet<float> ps;
    Rng rng(5);
    Adapter<float> adapter(ps, "speaker_adapter", kSpeakerDim, rng);
    for (int T : {3, 17, 50}) {
        Tape<float> t;
        auto s = extract_speaker(t, speaker().encoder, adapter, Tensor::randn({T, world::kFeatureDim}, rng));
        EXPECT_EQ(s.shape(), (num::Shape{1, kModelDim}));
        t.backward(num::sum(num::mul(s, s)));
        EXPECT_EQ(speaker().encoder.params().grad_norm(), 0.0);
    }
}

TEST(Extract, AdapterSpaceSpeakerSimilarityOnHeldOutSpeakers) {
    const auto& w = corpus();
    const auto& sp = w.splits();
    nn::ParamSet<float> ps;
    Rng rng(9);
    Adapter<float> adapter(ps, "speaker_adapter", kSpeakerDim, rng);
    auto s_prime = [&](int spk, const world::Transcript& text) {
        Tape<float> t;
        auto v = extract_speaker(t, speaker().encoder, adapter, w.render(text, spk, world::Channel::pristine, rng.next_u64()).frames)
                     .value()
                     .values();
        return std::vector<float>(v.begin(), v.end());
    };
    const int n = static_cast<int>(sp.heldout_speakers.size());
    double same = 0, diff = 0;
    for (int i = 0; i < 100; ++i) {
        const int a = sp.heldout_speakers[static_cast<std::size_t>(i % n)];
        const int b = sp.heldout_speakers[static_cast<std::size_t>((i + 1 + rng.index(n - 1)) % n)];
        const auto& t1 = sp.heldout_texts[static_cast<std::size_t>(i % sp.heldout_texts.size())];
        const auto& t2 = sp.heldout_texts[static_cast<std::size_t>((i + 1) % sp.heldout_texts.size())];
        const auto ea = s_prime(a, t1);
        same += cosine(ea, s_prime(a, t2)) / 100;
        diff += cosine(ea, s_prime(b, t2)) / 100;
    }
    EXPECT_GT(same, diff);
}

TEST(Extract, LinearProbeRecoversFrameLabels) {
    const auto& w = corpus();
    nn::ParamSet<float> adapter_ps;
    Rng rng(13);
    Adapter<float> adapter(adapter_ps, "semantic_adapter", kSemanticDim, rng);
    adapter_ps.set_frozen(true);
    nn::ParamSet<float> probe_ps;
    nn::Linear<float> probe(probe_ps, "probe", kModelDim, kSemanticClasses, rng);
    Rng data(14);
    nn::FitOptions opt;
    opt.steps = 600;
    opt.adam.lr = 1e-2;
    nn::fit(probe_ps, opt, [&](Tape<float>& t, int) {
        std::vector<Var<float>> losses;
        for (int b = 0; b < 8; ++b) {
            const auto r = sample_training_rendering(w, data, 0.0);
            const auto labels = downsampled_labels(r.transcript);
            const std::vector<std::uint8_t> mask(labels.size(), 1);
            losses.push_back(num::cross_entropy(probe(t, extract_semantic(t, semantic().encoder, adapter, r.frames)), labels, mask));
        }
        return nn::mean_of(losses);
    });
    const double acc = heldout_frame_accuracy(
        w, [&](Tape<float>& t, const Tensor& f) { return probe(t, extract_semantic(t, semantic().encoder, adapter, f)); });
    EXPECT_GE(acc, 0.85);
}

TEST(Extract, Errors) {
    nn::ParamSet<float> ps;
    Rng rng(1);
    Adapter<float> adapter(ps, "a", kSemanticDim, rng);
    Tape<float> t;
    EXPECT_THROW(extract_semantic(t, semantic().encoder, adapter, Tensor({10, 7})), ConfigError);
    SemanticEncoder<float> unfrozen(1);
    EXPECT_THROW(extract_semantic(t, unfrozen, adapter, Tensor({10, world::kFeatureDim})), StateError);
}
