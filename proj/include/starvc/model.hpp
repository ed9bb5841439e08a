#pragma once

#include <string>
#include <vector>

#include "starvc/codec.hpp"
#include "starvc/encoders.hpp"
#include "starvc/streamlm.hpp"

// The trainable conversion model (adapters + null-speaker row + stream LM)
// and the frozen stack it sits on (encoders + codec).
namespace starvc::model {

using num::BasicTensor;
using num::Tape;
using num::Tensor;
using num::Var;

template <class T>
struct VcModel {
    nn::ParamSet<T> params;
    enc::Adapter<T> semantic_adapter;
    enc::Adapter<T> speaker_adapter;
    num::Param<T>* null_speaker = nullptr;  // replaces S' in ASR instances
    lm::StreamLM<T> lm;

    VcModel(const lm::LmConfig& cfg, std::uint64_t seed) {
        Rng rng(derive_seed(seed, 0x30de1));
        semantic_adapter = enc::Adapter<T>(params, "semantic_adapter", enc::kSemanticDim, rng, cfg.dim);
        speaker_adapter = enc::Adapter<T>(params, "speaker_adapter", enc::kSpeakerDim, rng, cfg.dim);
        null_speaker = params.add("null_speaker", BasicTensor<T>::randn({1, cfg.dim}, rng, 0.5));
        lm = lm::StreamLM<T>(params, cfg, rng);
    }
    VcModel(VcModel&&) noexcept = default;
    VcModel& operator=(VcModel&&) noexcept = default;

    const lm::StreamLayout& layout() const { return lm.layout(); }

    std::vector<num::Param<T>*> group(const std::string& prefix) const {
        std::vector<num::Param<T>*> out;
        for (auto* p : params.all())
            if (p->name.rfind(prefix, 0) == 0) out.push_back(p);
        return out;
    }
};

/// Frozen encoder outputs for one instance, computed off-tape.
struct Features {
    Tensor semantic;  // [T' x d_sem]
    Tensor speaker;   // [1 x d_spk]
};

struct FrozenStack {
    enc::SemanticEncoder<float> semantic;
    enc::SpeakerEncoder<float> speaker;
    codec::Codec codec;

    Tensor semantic_features(const Tensor& frames) const {
        if (!semantic.frozen()) throw StateError("semantic encoder must be frozen");
        Tape<float> t;
        return semantic(t, frames).value();
    }
    Tensor speaker_features(const Tensor& frames) const {
        if (!speaker.frozen()) throw StateError("speaker encoder must be frozen");
        Tape<float> t;
        return speaker(t, frames).value();
    }
};

struct Conversion {
    Tensor frames;
    world::Transcript text;
    lm::DelayedGrid grid;
    bool truncated = false;
};

/// Source content + target-speaker reference -> generated grid -> frames.
inline Conversion convert(const VcModel<float>& m, const FrozenStack& frozen, const Tensor& source_frames,
                          const Tensor& target_reference, const lm::GenerateOptions& opt = {}) {
    Tensor s, sp;
    {
        Tape<float> t;
        s = m.semantic_adapter(t, t.constant(frozen.semantic_features(source_frames))).value();
        sp = m.speaker_adapter(t, t.constant(frozen.speaker_features(target_reference))).value();
    }
    auto gen = lm::generate(m.lm, s, sp, opt);
    Conversion c;
    c.frames = codec::decode(gen.contents.codes, frozen.codec);
    c.text = gen.contents.text;
    c.grid = std::move(gen.grid);
    c.truncated = gen.truncated;
    return c;
}

}  // namespace starvc::model
