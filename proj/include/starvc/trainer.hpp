#pragma once

#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "starvc/checkpoint.hpp"
#include "starvc/evaluation.hpp"
#include "starvc/model.hpp"

// Three-stage optimization: ASR pretraining, VC training, joint ASR+VC.
namespace starvc::train {

using num::Tape;
using num::Tensor;
using num::Var;

enum class Stage { asr = 0, vc = 1, joint = 2 };
enum class Task { asr, vc };

inline const char* stage_name(Stage s) {
    switch (s) {
        case Stage::asr: return "asr";
        case Stage::vc: return "vc";
        case Stage::joint: return "joint";
    }
    return "?";
}

inline Stage parse_stage(const std::string& s) {
    if (s == "asr") return Stage::asr;
    if (s == "vc") return Stage::vc;
    if (s == "joint") return Stage::joint;
    throw ConfigError("unknown stage '" + s + "' (expected asr, vc or joint)");
}

struct StageConfig {
    Stage stage = Stage::asr;
    double w = 0.5;                                   // text vs acoustic balance in the VC loss
    std::vector<double> lambda{1.0, 0.9, 0.8, 0.7};   // per-layer acoustic weights
    double w_joint = 0.2;                             // ASR vs VC balance in the joint loss
    double asr_fraction = 0.2;                        // joint stage: share of ASR instances
    double aug_real_prob = 0.5;                       // pristine (vs degraded) parallel target
    double speaker_noise = 0.0;                       // std of Gaussian noise on the speaker feature (VC instances)
    double lr = 3e-4;
    int steps = 2000;
    int batch = 6;
    std::uint64_t seed = 2024;
    int eval_every = 250;
    int eval_instances = 16;

    static StageConfig defaults(Stage s) {
        StageConfig c;
        c.stage = s;
        c.steps = s == Stage::asr ? 2000 : 4000;
        c.aug_real_prob = s == Stage::joint ? 0.8 : 0.5;
        c.speaker_noise = s == Stage::asr ? 0.0 : 0.3;
        return c;
    }

    void validate(int layers) const {
        auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
        if (!unit(w) || !unit(w_joint) || !unit(asr_fraction) || !unit(aug_real_prob))
            throw ConfigError("stage weights and probabilities must lie in [0, 1]");
        if (speaker_noise < 0.0) throw ConfigError("speaker_noise must be non-negative");
        if (static_cast<int>(lambda.size()) != layers)
            throw ConfigError("lambda has " + std::to_string(lambda.size()) + " entries, codec has " + std::to_string(layers) + " layers");
        for (double l : lambda)
            if (l < 0.0) throw ConfigError("lambda entries must be non-negative");
        if (steps < 0 || batch < 1 || lr < 0.0 || eval_every < 1 || eval_instances < 1)
            throw ConfigError("invalid stage budget (steps, batch, lr, eval interval)");
    }
};

/// Default three-stage schedule; the ablation zeroes every text-loss weight.
inline std::vector<StageConfig> default_schedule(std::uint64_t seed, bool text_ablation = false) {
    std::vector<StageConfig> out;
    for (Stage s : {Stage::asr, Stage::vc, Stage::joint}) {
        auto c = StageConfig::defaults(s);
        c.seed = seed;
        if (text_ablation) {
            c.w = 0.0;
            c.w_joint = 0.0;
            if (s == Stage::asr) c.steps = 0;
        }
        out.push_back(c);
    }
    return out;
}

// ---- instances --------------------------------------------------------------

/// One training example with the frozen-encoder outputs already computed.
struct Instance {
    Task task = Task::vc;
    Tensor semantic;  // frozen semantic features of the source
    Tensor speaker;   // frozen speaker feature of the target reference (VC only)
    lm::DelayedGrid grid;
    int source_speaker = -1;
    int target_speaker = -1;
};

/// ASR target grid: the transcript then EOS on the text stream; acoustic
/// streams carry only their structural BOS/PAD tokens and are never scored.
inline lm::DelayedGrid asr_grid(const world::Transcript& text, const lm::StreamLayout& layout) {
    if (text.empty()) throw InputError("asr_grid: empty transcript");
    const int L = static_cast<int>(text.size()) + 1;
    lm::DelayedGrid g;
    g.layout = layout;
    g.tokens.assign(static_cast<std::size_t>(layout.streams()), std::vector<int>(static_cast<std::size_t>(L)));
    g.valid.assign(g.tokens.size(), std::vector<std::uint8_t>(static_cast<std::size_t>(L), 0));
    g.supervise = g.valid;
    for (int j = 0; j < L; ++j) {
        const auto sj = static_cast<std::size_t>(j);
        g.tokens[0][sj] = j < L - 1 ? text[sj] : lm::kTextEos;
        g.valid[0][sj] = j < L - 1;
        g.supervise[0][sj] = 1;
        for (int s = 1; s < layout.streams(); ++s) g.tokens[static_cast<std::size_t>(s)][sj] = j < layout.delay(s) ? layout.ac_bos() : layout.ac_pad();
    }
    return g;
}

/// Parallel target rendering: pristine with probability `aug_real_prob`,
/// otherwise the degraded channel. Always the source transcript.
inline world::Rendering select_target(const world::World& w, const world::Rendering& source, int target_speaker, double aug_real_prob,
                                      Rng& rng) {
    const auto ch = rng.bernoulli(aug_real_prob) ? world::Channel::pristine : world::Channel::degraded;
    return world::parallel_pair(w.vocab(), source, w.speaker(target_speaker), ch, rng.next_u64());
}

/// Which corpus half an instance is drawn from.
struct Pool {
    const std::vector<world::Transcript>* texts;
    const std::vector<int>* speakers;

    static Pool train(const world::World& w) { return {&w.splits().train_texts, &w.splits().train_speakers}; }
    static Pool heldout(const world::World& w) { return {&w.splits().heldout_texts, &w.splits().heldout_speakers}; }

    const world::Transcript& text(Rng& rng) const { return (*texts)[static_cast<std::size_t>(rng.index(static_cast<int>(texts->size())))]; }
    int speaker(Rng& rng) const { return (*speakers)[static_cast<std::size_t>(rng.index(static_cast<int>(speakers->size())))]; }
    int other_speaker(Rng& rng, int not_this) const {
        if (speakers->size() < 2) throw ConfigError("need at least two speakers for conversion pairs");
        int s;
        do s = speaker(rng);
        while (s == not_this);
        return s;
    }
};

inline Instance make_asr_instance(const world::World& w, const model::FrozenStack& frozen, const lm::StreamLayout& layout, const Pool& pool,
                                  Rng& rng) {
    const auto& text = pool.text(rng);
    const int spk = pool.speaker(rng);
    const auto src = w.render(text, spk, world::Channel::pristine, rng.next_u64());
    Instance in;
    in.task = Task::asr;
    in.semantic = frozen.semantic_features(src.frames);
    in.grid = asr_grid(text, layout);
    in.source_speaker = spk;
    return in;
}

inline Instance make_vc_instance(const world::World& w, const model::FrozenStack& frozen, const lm::StreamLayout& layout, const Pool& pool,
                                 double aug_real_prob, Rng& rng, double speaker_noise = 0.0) {
    const auto& text = pool.text(rng);
    const int src_spk = pool.speaker(rng);
    const int tgt_spk = pool.other_speaker(rng, src_spk);
    const auto src = w.render(text, src_spk, world::Channel::pristine, rng.next_u64());
    const auto target = select_target(w, src, tgt_spk, aug_real_prob, rng);
    const auto ref = w.render(pool.text(rng), tgt_spk, world::Channel::pristine, rng.next_u64());
    Instance in;
    in.task = Task::vc;
    in.semantic = frozen.semantic_features(src.frames);
    in.speaker = frozen.speaker_features(ref.frames);
    if (speaker_noise > 0.0) {
        Rng noise(rng.next_u64());
        for (auto& v : in.speaker.values()) v += static_cast<float>(noise.normal(0.0, speaker_noise));
    }
    in.grid = lm::build_delayed_grid(text, codec::encode(target.frames, frozen.codec), layout);
    in.source_speaker = src_spk;
    in.target_speaker = tgt_spk;
    return in;
}

/// Per-instance task draws: ASR only in the ASR stage, VC only in the VC
/// stage, a Bernoulli(asr_fraction) coin per instance in the joint stage.
inline std::vector<Task> draw_tasks(const StageConfig& cfg, Rng& rng) {
    std::vector<Task> out;
    for (int b = 0; b < cfg.batch; ++b) {
        switch (cfg.stage) {
            case Stage::asr: out.push_back(Task::asr); break;
            case Stage::vc: out.push_back(Task::vc); break;
            case Stage::joint: out.push_back(rng.bernoulli(cfg.asr_fraction) ? Task::asr : Task::vc); break;
        }
    }
    return out;
}

/// The data stream is a pure function of (seed, stage, step).
inline Rng batch_rng(const StageConfig& cfg, int step) { return Rng(derive_seed(cfg.seed, 0xba7c4, static_cast<int>(cfg.stage), step)); }

inline std::vector<Instance> make_batch(const world::World& w, const model::FrozenStack& frozen, const lm::StreamLayout& layout,
                                        const StageConfig& cfg, int step) {
    auto rng = batch_rng(cfg, step);
    const auto tasks = draw_tasks(cfg, rng);
    const auto pool = Pool::train(w);
    std::vector<Instance> out;
    for (Task t : tasks)
        out.push_back(t == Task::asr ? make_asr_instance(w, frozen, layout, pool, rng) : make_vc_instance(w, frozen, layout, pool, cfg.aug_real_prob, rng, cfg.speaker_noise));
    return out;
}

// ---- losses -------------------------------------------------------------------

/// Cross-entropy terms of one instance, kept for logging and for checking the
/// loss algebra independently.
template <class T>
struct LossParts {
    Var<T> total;
    Var<T> text;
    std::vector<Var<T>> acoustic;  // empty for ASR instances
};

template <class T>
lm::LmOutput<T> instance_forward(const model::VcModel<T>& m, Tape<T>& t, const Instance& in) {
    auto s = m.semantic_adapter(t, t.constant(in.semantic.template cast<T>()));
    auto sp = in.task == Task::asr ? t.param(*m.null_speaker) : m.speaker_adapter(t, t.constant(in.speaker.template cast<T>()));
    return m.lm.forward(t, s, sp, in.grid);
}

template <class T>
Var<T> stream_ce(const lm::LmOutput<T>& out, const lm::DelayedGrid& g, int s) {
    const auto su = static_cast<std::size_t>(s);
    return num::cross_entropy(out.logits[su], std::span<const int>(g.tokens[su]), std::span<const std::uint8_t>(g.supervise[su]));
}

/// L_ASR = CE(text stream).
template <class T>
LossParts<T> asr_loss(const model::VcModel<T>& m, Tape<T>& t, const Instance& in) {
    if (in.task != Task::asr) throw ContractError("asr_loss on a VC instance");
    const auto out = instance_forward(m, t, in);
    LossParts<T> p;
    p.text = stream_ce(out, in.grid, 0);
    p.total = p.text;
    return p;
}

/// L_VC = w * CE_text + (1 - w) * sum_i lambda_i * CE_i.
template <class T>
Var<T> vc_combination(Var<T> text_ce, const std::vector<Var<T>>& acoustic_ce, double w, const std::vector<double>& lambda) {
    if (acoustic_ce.empty() || acoustic_ce.size() != lambda.size())
        throw DimensionError("vc loss: " + std::to_string(acoustic_ce.size()) + " acoustic terms for " + std::to_string(lambda.size()) + " weights");
    Var<T> ac = num::scale(acoustic_ce[0], lambda[0]);
    for (std::size_t l = 1; l < acoustic_ce.size(); ++l) ac = num::add(ac, num::scale(acoustic_ce[l], lambda[l]));
    return num::add(num::scale(text_ce, w), num::scale(ac, 1.0 - w));
}

template <class T>
LossParts<T> vc_loss(const model::VcModel<T>& m, Tape<T>& t, const Instance& in, const StageConfig& cfg) {
    if (in.task != Task::vc) throw ContractError("vc_loss on an ASR instance");
    const auto out = instance_forward(m, t, in);
    LossParts<T> p;
    p.text = stream_ce(out, in.grid, 0);
    for (int l = 0; l < m.layout().layers; ++l) p.acoustic.push_back(stream_ce(out, in.grid, l + 1));
    p.total = vc_combination(p.text, p.acoustic, cfg.w, cfg.lambda);
    return p;
}

template <class T>
struct BatchLoss {
    Var<T> total;
    std::vector<LossParts<T>> parts;  // per instance, in batch order
    int asr_count = 0;
    int vc_count = 0;
};

/// ASR stage: mean L_ASR. VC stage: mean L_VC. Joint stage:
/// w' * mean(ASR pool) + (1 - w') * mean(VC pool); an empty pool adds nothing.
template <class T>
BatchLoss<T> batch_loss(const model::VcModel<T>& m, Tape<T>& t, const std::vector<Instance>& batch, const StageConfig& cfg) {
    if (batch.empty()) throw DegenerateBatchError("empty batch");
    BatchLoss<T> b;
    std::vector<Var<T>> asr, vc;
    for (const auto& in : batch) {
        if (in.task == Task::asr) {
            if (cfg.stage == Stage::vc) throw ContractError("ASR instance in a VC-stage batch");
            b.parts.push_back(asr_loss(m, t, in));
            asr.push_back(b.parts.back().total);
        } else {
            if (cfg.stage == Stage::asr) throw ContractError("VC instance in an ASR-stage batch");
            b.parts.push_back(vc_loss(m, t, in, cfg));
            vc.push_back(b.parts.back().total);
        }
    }
    b.asr_count = static_cast<int>(asr.size());
    b.vc_count = static_cast<int>(vc.size());
    if (cfg.stage != Stage::joint) {
        b.total = nn::mean_of(asr.empty() ? vc : asr);
        return b;
    }
    if (!asr.empty()) b.total = num::scale(nn::mean_of(asr), cfg.w_joint);
    if (!vc.empty()) {
        auto v = num::scale(nn::mean_of(vc), 1.0 - cfg.w_joint);
        b.total = asr.empty() ? v : num::add(b.total, v);
    }
    return b;
}

// ---- held-out monitoring ----------------------------------------------------

struct HeldoutMetrics {
    double text_accuracy = 0.0;  // teacher-forced, supervised text positions incl. EOS
    double acoustic_ce = 0.0;    // mean over layers, VC instances
};

struct HeldoutSet {
    std::vector<Instance> asr, vc;
};

inline HeldoutSet make_heldout_set(const world::World& w, const model::FrozenStack& frozen, const lm::StreamLayout& layout, int n,
                                   std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0x4e1d));
    const auto pool = Pool::heldout(w);
    HeldoutSet h;
    for (int i = 0; i < n; ++i) h.asr.push_back(make_asr_instance(w, frozen, layout, pool, rng));
    for (int i = 0; i < n; ++i) h.vc.push_back(make_vc_instance(w, frozen, layout, pool, 1.0, rng));
    return h;
}

/// Text accuracy is measured in the stage's own mode (null speaker for ASR).
inline HeldoutMetrics heldout_metrics(const model::VcModel<float>& m, const HeldoutSet& h, Stage stage) {
    HeldoutMetrics r;
    long hit = 0, total = 0;
    for (const auto& in : stage == Stage::asr ? h.asr : h.vc) {
        Tape<float> t;
        const auto out = instance_forward(m, t, in);
        const auto pred = nn::argmax_rows(out.logits[0].value());
        for (std::size_t j = 0; j < pred.size(); ++j)
            if (in.grid.supervise[0][j]) {
                hit += pred[j] == in.grid.tokens[0][j];
                ++total;
            }
    }
    r.text_accuracy = total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
    double ce = 0.0;
    for (const auto& in : h.vc) {
        Tape<float> t;
        const auto out = instance_forward(m, t, in);
        for (int l = 1; l <= m.layout().layers; ++l) ce += stream_ce(out, in.grid, l).value().item();
    }
    r.acoustic_ce = ce / static_cast<double>(h.vc.size() * static_cast<std::size_t>(m.layout().layers));
    return r;
}

// ---- stage loop ---------------------------------------------------------------

struct StepRecord {
    double loss = 0.0;
    double text_ce = 0.0;      // mean over instances
    double acoustic_ce = 0.0;  // mean over VC instances and layers (0 if none)
    bool clipped = false;
};

struct EvalRow {
    int step = 0;
    double train_loss = 0.0;  // mean since the previous row
    HeldoutMetrics heldout;
};

struct StageResult {
    StageConfig config;
    std::vector<StepRecord> steps;
    std::vector<EvalRow> evals;
    int clipped_steps = 0;
};

inline void write_metrics_header(std::ostream& os) { os << "step\tstage\ttrain_loss\theldout_text_acc\theldout_acoustic_ce\n"; }

/// Per-step training record: step, stage, loss, text CE, acoustic CE, clipped.
inline void write_steps_header(std::ostream& os) { os << "step\tstage\tloss\ttext_ce\tacoustic_ce\tclipped\n"; }

inline void write_steps(std::ostream& os, const StageResult& r) {
    for (std::size_t i = 0; i < r.steps.size(); ++i) {
        const auto& s = r.steps[i];
        os << i + 1 << '\t' << stage_name(r.config.stage) << '\t' << s.loss << '\t' << s.text_ce << '\t' << s.acoustic_ce << '\t' << s.clipped << '\n';
    }
}

inline void write_metrics_row(std::ostream& os, Stage s, const EvalRow& r) {
    os << r.step << '\t' << stage_name(s) << '\t' << r.train_loss << '\t' << r.heldout.text_accuracy << '\t' << r.heldout.acoustic_ce << '\n';
}

/// Parameters a stage may update: the ASR stage never sees the speaker path.
inline std::vector<num::Param<float>*> stage_trainables(const model::VcModel<float>& m, Stage s) {
    std::vector<num::Param<float>*> out;
    for (auto* p : m.params.all()) {
        if (p->frozen) continue;
        if (s == Stage::asr && p->name.rfind("speaker_adapter", 0) == 0) continue;
        out.push_back(p);
    }
    return out;
}

inline StageResult run_stage(model::VcModel<float>& m, const model::FrozenStack& frozen, const world::World& w, const StageConfig& cfg,
                             std::ostream* metrics_log = nullptr) {
    cfg.validate(m.layout().layers);
    StageResult res;
    res.config = cfg;
    num::AdamConfig ac;
    ac.lr = cfg.lr;
    num::Adam adam(stage_trainables(m, cfg.stage), ac);
    const auto held = make_heldout_set(w, frozen, m.layout(), cfg.eval_instances, cfg.seed);
    double window = 0.0;
    int window_n = 0;
    auto emit = [&](int step) {
        EvalRow row{step, window_n ? window / window_n : 0.0, heldout_metrics(m, held, cfg.stage)};
        res.evals.push_back(row);
        if (metrics_log) {
            write_metrics_row(*metrics_log, cfg.stage, row);
            metrics_log->flush();
        }
        window = 0.0;
        window_n = 0;
    };
    for (int step = 0; step < cfg.steps; ++step) {
        const auto batch = make_batch(w, frozen, m.layout(), cfg, step);
        Tape<float> t;
        m.params.zero_grad();
        StepRecord rec;
        try {
            const auto bl = batch_loss(m, t, batch, cfg);
            rec.loss = bl.total.value().item();
            if (!std::isfinite(rec.loss)) throw NumericError("non-finite loss " + std::to_string(rec.loss));
            int vc_n = 0;
            for (const auto& p : bl.parts) {
                rec.text_ce += p.text.value().item() / static_cast<double>(bl.parts.size());
                for (const auto& a : p.acoustic) rec.acoustic_ce += a.value().item();
                vc_n += p.acoustic.empty() ? 0 : 1;
            }
            if (vc_n) rec.acoustic_ce /= static_cast<double>(vc_n * m.layout().layers);
            t.backward(bl.total);
            rec.clipped = adam.step().clipped;
        } catch (const NumericError& e) {
            throw TrainingError(std::string("stage ") + stage_name(cfg.stage) + " diverged at step " + std::to_string(step) + " (batch id " +
                                std::to_string(derive_seed(cfg.seed, 0xba7c4, static_cast<int>(cfg.stage), step)) + "): " + e.what());
        }
        res.clipped_steps += rec.clipped;
        res.steps.push_back(rec);
        window += rec.loss;
        ++window_n;
        if ((step + 1) % cfg.eval_every == 0) emit(step + 1);
    }
    if (res.evals.empty() || res.evals.back().step != cfg.steps) emit(cfg.steps);
    return res;
}

// ---- persistence -------------------------------------------------------------

inline const std::vector<std::string>& model_groups() {
    static const std::vector<std::string> g{"semantic_adapter", "speaker_adapter", "null_speaker", "lm"};
    return g;
}

inline ckpt::Checkpoint to_checkpoint(const model::VcModel<float>& m) {
    ckpt::Checkpoint ck;
    for (const auto& g : model_groups()) {
        ckpt::Component c{g, false, {}};
        for (const auto* p : m.group(g)) c.tensors.push_back({p->name, p->value});
        ck.components.push_back(std::move(c));
    }
    return ck;
}

inline void load_checkpoint(const ckpt::Checkpoint& ck, model::VcModel<float>& m) {
    for (const auto& g : model_groups()) {
        const auto& c = ck.component(g);
        for (auto* p : m.group(g)) {
            const Tensor* t = c.find(p->name);
            if (!t) throw FormatError("checkpoint component '" + g + "' lacks tensor '" + p->name + "'");
            if (t->shape() != p->value.shape()) throw FormatError("checkpoint tensor '" + p->name + "' has the wrong shape");
            p->value = *t;
        }
    }
}

// ---- pipeline -----------------------------------------------------------------

struct StageOutcome {
    StageResult result;
    eval::MetricsReport report;
};

using StageHook = std::function<void(const StageOutcome&, const model::VcModel<float>&)>;

/// Runs the stages in order on one model; after each stage the held-out
/// manifest is scored and `on_stage_end` is called (checkpointing etc.).
inline std::vector<StageOutcome> run_pipeline(model::VcModel<float>& m, const model::FrozenStack& frozen, const world::World& w,
                                              const std::vector<StageConfig>& stages, const eval::Oracles& oracles,
                                              const std::vector<world::EvalPair>& manifest, std::ostream* metrics_log = nullptr,
                                              const StageHook& on_stage_end = {}, const eval::EvalOptions& eval_opt = {}) {
    for (std::size_t i = 1; i < stages.size(); ++i)
        if (static_cast<int>(stages[i].stage) <= static_cast<int>(stages[i - 1].stage))
            throw ContractError("stages must run in the order asr, vc, joint");
    std::vector<StageOutcome> out;
    for (const auto& cfg : stages) {
        StageOutcome o;
        o.result = run_stage(m, frozen, w, cfg, metrics_log);
        o.report = eval::evaluate_conversion(m, frozen, oracles, w, manifest, eval_opt);
        if (on_stage_end) on_stage_end(o, m);
        out.push_back(std::move(o));
    }
    return out;
}

}  // namespace starvc::train
