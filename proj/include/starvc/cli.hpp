#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "starvc/checkpoint.hpp"
#include "starvc/config.hpp"
#include "starvc/evaluation.hpp"
#include "starvc/model.hpp"
#include "starvc/trainer.hpp"

// Command implementations behind the `starvc` tool. Each command works on a
// run directory with fixed subdirectories so upstream artifacts are found
// without extra flags.
namespace starvc::cli {

namespace fs = std::filesystem;

struct RunDir {
    fs::path root;

    fs::path corpus() const { return root / "corpus"; }
    fs::path codec_dir() const { return root / "codec"; }
    fs::path encoders() const { return root / "encoders"; }
    fs::path checkpoints() const { return root / "checkpoints"; }
    fs::path reports() const { return root / "reports"; }
    fs::path logs() const { return root / "logs"; }

    fs::path codec_file() const { return codec_dir() / "codec.rvq"; }
    fs::path semantic_file() const { return encoders() / "semantic.svck"; }
    fs::path speaker_file() const { return encoders() / "speaker.svck"; }
    fs::path oracles_file() const { return encoders() / "oracles.svck"; }
    fs::path test_manifest() const { return corpus() / "test_manifest.tsv"; }
    fs::path checkpoint(train::Stage s) const { return checkpoints() / (std::string(train::stage_name(s)) + ".svck"); }
    fs::path stage_hash(train::Stage s) const { return checkpoints() / (std::string(train::stage_name(s)) + ".config_hash"); }
    fs::path report(const std::string& name) const { return reports() / (name + ".json"); }

    void ensure() const {
        for (const auto& d : {root, corpus(), codec_dir(), encoders(), checkpoints(), reports(), logs()}) fs::create_directories(d);
    }
};

/// Advisory lock: `.runlock` is created exclusively and removed on exit.
class RunLock {
public:
    explicit RunLock(const fs::path& root) : path_(root / ".runlock") {
        fs::create_directories(root);
        const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd < 0) throw StateError("run directory " + root.string() + " is locked by another command (remove " + path_.string() + " if stale)");
        const auto pid = std::to_string(::getpid()) + "\n";
        [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
        ::close(fd);
    }
    ~RunLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    fs::path path_;
};

/// Appends `command, config hash, seed, seconds, status` to logs/run.tsv.
inline void log_run(const RunDir& rd, const std::string& command, const std::string& config_hash, std::uint64_t seed, double seconds,
                    const std::string& status) {
    fs::create_directories(rd.logs());
    const auto path = rd.logs() / "run.tsv";
    const bool fresh = !fs::exists(path);
    std::ofstream os(path, std::ios::app);
    if (fresh) os << "command\tconfig_hash\tseed\tseconds\tstatus\n";
    os << command << '\t' << config_hash << '\t' << seed << '\t' << seconds << '\t' << status << '\n';
}

inline void echo_config(const RunDir& rd, const cfg::RunConfig& c) {
    fs::create_directories(rd.root);
    std::ofstream os(rd.root / "config.resolved");
    os << cfg::render(c);
}

inline void write_text(const fs::path& p, const std::string& s) {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw DataError("cannot write " + p.string());
    os << s;
}

inline std::string read_text(const fs::path& p, const std::string& producer) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw ArtifactMissingError(p.string() + " not found (run `" + producer + "`)");
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// ---- test manifest: two manifest records per pair (source, target ref) -------

inline void write_pairs(std::ostream& os, const std::vector<world::EvalPair>& pairs) {
    std::vector<world::Utterance> flat;
    for (const auto& p : pairs) {
        flat.push_back(p.source);
        flat.push_back(p.target_ref);
    }
    world::write_manifest(os, flat);
}

inline std::vector<world::EvalPair> read_pairs(std::istream& is) {
    const auto flat = world::read_manifest(is);
    if (flat.empty() || flat.size() % 2) throw FormatError("test manifest must hold source/target-reference record pairs");
    std::vector<world::EvalPair> out;
    for (std::size_t i = 0; i < flat.size(); i += 2) out.push_back({flat[i], flat[i + 1]});
    return out;
}

inline std::vector<world::EvalPair> load_pairs(const fs::path& p) {
    std::istringstream is(read_text(p, "synth-data"));
    return read_pairs(is);
}

// ---- artifact loading ----------------------------------------------------------

inline world::World make_world(const cfg::RunConfig& c) { return world::World(c.corpus, c.vocab_seed); }

inline void require_corpus(const RunDir& rd) {
    for (const char* f : {"train.tsv", "heldout.tsv", "splits.tsv", "frames.svck", "test_manifest.tsv"})
        if (!fs::exists(rd.corpus() / f)) throw ArtifactMissingError((rd.corpus() / f).string() + " not found (run `synth-data`)");
}

inline codec::Codec load_codec(const RunDir& rd) {
    return codec::deserialize(ckpt::read_file(rd.codec_file().string(), "fit-codec"));
}

template <class Encoder>
void load_encoder(const fs::path& p, const std::string& name, Encoder& e) {
    const auto ck = ckpt::load(p.string(), "pretrain-encoders");
    const auto& comp = ck.component(name);
    if (!comp.frozen) throw FormatError(p.string() + ": encoder component is not marked frozen");
    ckpt::load_params(comp, e.params());
    e.freeze();
}

inline model::FrozenStack load_frozen(const RunDir& rd, const cfg::RunConfig& c) {
    model::FrozenStack f{enc::SemanticEncoder<float>(c.semantic.seed), enc::SpeakerEncoder<float>(c.speaker.seed), load_codec(rd)};
    load_encoder(rd.semantic_file(), "semantic_encoder", f.semantic);
    load_encoder(rd.speaker_file(), "speaker_encoder", f.speaker);
    if (f.codec.layers() != c.codec.layers || static_cast<int>(f.codec.books.front().centroids.rows()) != c.codec.codes)
        throw ConfigError("codec artifact does not match codec.layers/codec.codes");
    return f;
}

inline eval::Oracles load_oracles(const RunDir& rd, const cfg::RunConfig& c) {
    const auto ck = ckpt::load(rd.oracles_file().string(), "pretrain-encoders");
    eval::Oracles o{eval::OracleTranscriber(derive_seed(c.oracle.seed, 1)), eval::OracleVerifier(derive_seed(c.oracle.seed, 2))};
    ckpt::load_params(ck.component("oracle_transcriber"), o.transcriber.params());
    ckpt::load_params(ck.component("oracle_verifier"), o.verifier.params());
    o.transcriber.params().set_frozen(true);
    o.verifier.params().set_frozen(true);
    return o;
}

inline train::Stage previous(train::Stage s) { return static_cast<train::Stage>(static_cast<int>(s) - 1); }

/// `--checkpoint` value: a stage name, a path, or empty for the latest stage.
inline fs::path resolve_checkpoint(const RunDir& rd, const std::string& which) {
    if (!which.empty()) {
        for (auto s : {train::Stage::asr, train::Stage::vc, train::Stage::joint})
            if (which == train::stage_name(s)) return rd.checkpoint(s);
        return which;
    }
    for (auto s : {train::Stage::joint, train::Stage::vc, train::Stage::asr})
        if (fs::exists(rd.checkpoint(s))) return rd.checkpoint(s);
    throw ArtifactMissingError("no trained checkpoint in " + rd.checkpoints().string() + " (run `train --stage asr`)");
}

inline model::VcModel<float> load_model(const fs::path& p, const cfg::RunConfig& c) {
    model::VcModel<float> m(c.lm, c.model_seed);
    train::load_checkpoint(ckpt::load(p.string(), "train --stage asr"), m);
    return m;
}

// ---- commands ---------------------------------------------------------------------

struct Context {
    cfg::RunConfig config;
    RunDir rd;
    std::ostream* out = &std::cout;
    std::ostream* err = &std::cerr;
};

inline Context make_context(const cfg::RunConfig& c, const std::string& run_dir_override = "") {
    Context ctx{c, RunDir{run_dir_override.empty() ? fs::path(c.run_dir) : fs::path(run_dir_override)}};
    return ctx;
}

/// Writes the corpus: per-split manifests, the speaker/text split, every
/// rendered frame matrix and the held-out test manifest.
inline void synth_data(const Context& ctx, bool force) {
    const auto out_dir = ctx.rd.corpus();
    if (fs::exists(out_dir) && !fs::is_empty(out_dir) && !force)
        throw DataError(out_dir.string() + " exists and is not empty (pass --force to overwrite)");
    if (fs::exists(out_dir)) fs::remove_all(out_dir);
    fs::create_directories(out_dir);
    const auto w = make_world(ctx.config);
    const auto& sp = w.splits();
    {
        std::ofstream os(out_dir / "train.tsv");
        world::write_manifest(os, sp.train_utterances);
    }
    {
        std::ofstream os(out_dir / "heldout.tsv");
        world::write_manifest(os, sp.heldout_utterances);
    }
    {
        std::ofstream os(out_dir / "splits.tsv");
        auto ids = [&](const char* name, const std::vector<int>& v) {
            os << name;
            for (int x : v) os << '\t' << x;
            os << '\n';
        };
        ids("train_speakers", sp.train_speakers);
        ids("heldout_speakers", sp.heldout_speakers);
        for (const auto& t : sp.train_texts) os << "train_text\t" << world::SymbolVocab::to_text(t) << '\n';
        for (const auto& t : sp.heldout_texts) os << "heldout_text\t" << world::SymbolVocab::to_text(t) << '\n';
    }
    {
        ckpt::Checkpoint frames;
        for (const auto& [name, utts] : {std::pair{"train", &sp.train_utterances}, std::pair{"heldout", &sp.heldout_utterances}}) {
            ckpt::Component comp{name, true, {}};
            for (const auto& u : *utts) comp.tensors.push_back({u.id, w.render(u).frames});
            frames.components.push_back(std::move(comp));
        }
        ckpt::save(frames, (out_dir / "frames.svck").string());
    }
    {
        std::ofstream os(out_dir / "test_manifest.tsv");
        write_pairs(os, world::make_test_manifest(sp, ctx.config.eval_pairs, ctx.config.manifest_seed));
    }
    *ctx.out << "speakers: " << sp.train_speakers.size() << " train, " << sp.heldout_speakers.size() << " held-out\n"
             << "texts: " << sp.train_texts.size() << " train, " << sp.heldout_texts.size() << " held-out\n"
             << "utterances: " << sp.train_utterances.size() << " train, " << sp.heldout_utterances.size() << " held-out\n"
             << "test pairs: " << ctx.config.eval_pairs << '\n';
}

inline std::vector<num::Tensor> train_frames(const RunDir& rd) {
    const auto ck = ckpt::load((rd.corpus() / "frames.svck").string(), "synth-data");
    std::vector<num::Tensor> out;
    for (const auto& t : ck.component("train").tensors) out.push_back(t.value);
    return out;
}

inline void fit_codec(const Context& ctx) {
    require_corpus(ctx.rd);
    const auto frames = train_frames(ctx.rd);
    std::vector<double> dist;
    const auto c = codec::fit_codebooks(frames, ctx.config.codec, &dist);
    fs::create_directories(ctx.rd.codec_dir());
    codec::save(c, ctx.rd.codec_file().string());
    *ctx.out << "codec: " << c.layers() << " layers x " << ctx.config.codec.codes << " codes, train SNR " << c.fit_snr_db << " dB\n";
    for (std::size_t l = 0; l < dist.size(); ++l) *ctx.out << "  distortion after layer " << l + 1 << ": " << dist[l] << '\n';
}

struct PretrainGates {
    double semantic_min = 0.90;
    double speaker_min = 0.95;
    double transcriber_exact_min = 0.99;
    double transcriber_degraded_cer_max = 0.05;
};

/// Pretrains and freezes both pipeline encoders, then trains the two
/// independent evaluation oracles. Any missed gate is a calibration error.
inline void pretrain_encoders(const Context& ctx, const PretrainGates& gates = {}) {
    require_corpus(ctx.rd);
    const auto w = make_world(ctx.config);
    auto sem = enc::pretrain_semantic_encoder(w, ctx.config.semantic);
    *ctx.out << "semantic encoder: held-out frame accuracy " << sem.heldout_accuracy << '\n';
    if (sem.heldout_accuracy < gates.semantic_min)
        throw CalibrationError("semantic encoder accuracy " + std::to_string(sem.heldout_accuracy) + " below gate");
    auto spk = enc::pretrain_speaker_encoder(w, ctx.config.speaker);
    *ctx.out << "speaker encoder: held-out utterance speaker accuracy " << spk.heldout_accuracy << '\n';
    if (spk.heldout_accuracy < gates.speaker_min)
        throw CalibrationError("speaker encoder accuracy " + std::to_string(spk.heldout_accuracy) + " below gate");
    auto tr = eval::train_oracle_transcriber(w, ctx.config.oracle);
    *ctx.out << "oracle transcriber: held-out exact " << tr.pristine_exact << ", degraded CER " << tr.degraded_cer << '\n';
    if (tr.pristine_exact < gates.transcriber_exact_min || tr.degraded_cer > gates.transcriber_degraded_cer_max)
        throw CalibrationError("oracle transcriber missed its gates");
    auto ver = eval::train_oracle_verifier(w, ctx.config.oracle);
    *ctx.out << "oracle verifier: held-out EER " << ver.eer << '\n';
    eval::assert_independent(ver.oracle.params(), spk.encoder.params());
    eval::assert_independent(tr.oracle.params(), sem.encoder.params());

    fs::create_directories(ctx.rd.encoders());
    ckpt::save({{ckpt::from_params("semantic_encoder", sem.encoder.params())}}, ctx.rd.semantic_file().string());
    ckpt::save({{ckpt::from_params("speaker_encoder", spk.encoder.params())}}, ctx.rd.speaker_file().string());
    ckpt::save({{ckpt::from_params("oracle_transcriber", tr.oracle.params()), ckpt::from_params("oracle_verifier", ver.oracle.params())}},
               ctx.rd.oracles_file().string());
}

/// One training stage, resuming from the previous stage's checkpoint; writes
/// the stage checkpoint, its config hash, and the held-out report.
inline eval::MetricsReport train_stage(const Context& ctx, train::Stage stage, bool allow_drift) {
    require_corpus(ctx.rd);
    const auto& c = ctx.config;
    const auto hash = cfg::hash(c);
    model::VcModel<float> m(c.lm, c.model_seed);
    if (stage != train::Stage::asr) {
        const auto prev = previous(stage);
        const std::string producer = std::string("train --stage ") + train::stage_name(prev);
        train::load_checkpoint(ckpt::load(ctx.rd.checkpoint(prev).string(), producer), m);
        const auto prev_hash = read_text(ctx.rd.stage_hash(prev), producer);
        if (prev_hash != hash) {
            const std::string msg = std::string("config changed since stage ") + train::stage_name(prev) + " (hash " + prev_hash + " -> " + hash + ")";
            if (!allow_drift) throw ConfigError(msg + "; pass --allow-config-drift to continue");
            *ctx.err << "warning: " << msg << '\n';
        }
    }
    const auto frozen = load_frozen(ctx.rd, c);
    const auto oracles = load_oracles(ctx.rd, c);
    const auto w = make_world(c);
    const auto pairs = load_pairs(ctx.rd.test_manifest());

    fs::create_directories(ctx.rd.logs());
    const auto metrics_path = ctx.rd.logs() / "metrics.tsv";
    const bool fresh = !fs::exists(metrics_path);
    std::ofstream metrics(metrics_path, std::ios::app);
    if (fresh) train::write_metrics_header(metrics);

    const auto sc = c.schedule()[static_cast<std::size_t>(stage)];
    const auto res = train::run_stage(m, frozen, w, sc, &metrics);
    {
        const auto steps_path = ctx.rd.logs() / "steps.tsv";
        const bool fresh_steps = !fs::exists(steps_path);
        std::ofstream steps(steps_path, std::ios::app);
        if (fresh_steps) train::write_steps_header(steps);
        train::write_steps(steps, res);
    }
    if (res.clipped_steps) *ctx.out << "gradient clipping active on " << res.clipped_steps << " of " << sc.steps << " steps\n";
    const auto report = eval::evaluate_conversion(m, frozen, oracles, w, pairs, c.eval_options());

    fs::create_directories(ctx.rd.checkpoints());
    ckpt::save(train::to_checkpoint(m), ctx.rd.checkpoint(stage).string());
    write_text(ctx.rd.stage_hash(stage), hash);
    fs::create_directories(ctx.rd.reports());
    write_text(ctx.rd.report(train::stage_name(stage)), eval::to_json(report).dump(2) + "\n");
    *ctx.out << "stage " << train::stage_name(stage) << ": " << eval::to_json(report).dump() << '\n';
    return report;
}

inline std::vector<eval::MetricsReport> train_all(const Context& ctx, bool allow_drift) {
    std::vector<eval::MetricsReport> out;
    for (auto s : {train::Stage::asr, train::Stage::vc, train::Stage::joint}) out.push_back(train_stage(ctx, s, allow_drift));
    return out;
}

/// Looks an utterance id up in the corpus and test manifests.
inline world::Utterance find_utterance(const RunDir& rd, const std::string& id) {
    for (const char* f : {"train.tsv", "heldout.tsv"}) {
        std::istringstream is(read_text(rd.corpus() / f, "synth-data"));
        for (const auto& u : world::read_manifest(is))
            if (u.id == id) return u;
    }
    for (const auto& p : load_pairs(rd.test_manifest())) {
        if (p.source.id == id) return p.source;
        if (p.target_ref.id == id) return p.target_ref;
    }
    throw InputError("unknown utterance id '" + id + "'");
}

/// Writes `<out>.frames.svck`, `<out>.txt` and `<out>.grid`.
inline model::Conversion convert(const Context& ctx, const std::string& source_id, const std::string& target_id, const fs::path& out,
                                 const std::string& checkpoint = "") {
    require_corpus(ctx.rd);
    const auto m = load_model(resolve_checkpoint(ctx.rd, checkpoint), ctx.config);
    const auto frozen = load_frozen(ctx.rd, ctx.config);
    const auto w = make_world(ctx.config);
    const auto src = w.render(find_utterance(ctx.rd, source_id));
    const auto ref = w.render(find_utterance(ctx.rd, target_id));
    auto conv = model::convert(m, frozen, src.frames, ref.frames, ctx.config.eval_options().generation);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    ckpt::save({{ckpt::Component{"converted", true, {{"frames", conv.frames}}}}}, out.string() + ".frames.svck");
    write_text(out.string() + ".txt", world::SymbolVocab::to_text(conv.text) + "\n");
    std::ostringstream grid;
    lm::write_grid(grid, conv.grid);
    write_text(out.string() + ".grid", grid.str());
    *ctx.out << "text: " << world::SymbolVocab::to_text(conv.text) << "\nframes: " << conv.frames.rows()
             << (conv.truncated ? "\nwarning: generation hit the step limit (truncated)" : "") << '\n';
    return conv;
}

inline eval::MetricsReport evaluate(const Context& ctx, const fs::path& manifest, const std::string& checkpoint = "",
                                    const fs::path& report_out = {}) {
    require_corpus(ctx.rd);
    const auto m = load_model(resolve_checkpoint(ctx.rd, checkpoint), ctx.config);
    const auto frozen = load_frozen(ctx.rd, ctx.config);
    const auto oracles = load_oracles(ctx.rd, ctx.config);
    const auto w = make_world(ctx.config);
    const auto report = eval::evaluate_conversion(m, frozen, oracles, w, load_pairs(manifest), ctx.config.eval_options());
    const auto text = eval::to_json(report).dump(2) + "\n";
    fs::create_directories(ctx.rd.reports());
    write_text(report_out.empty() ? ctx.rd.report("evaluate") : report_out, text);
    *ctx.out << text;
    return report;
}

inline void inspect_grid(const Context& ctx, const fs::path& in) {
    std::istringstream is(read_text(in, "convert"));
    const auto g = lm::read_grid(is, ctx.config.codec.codes);
    const auto contents = lm::invert_delayed_grid(g);
    *ctx.out << "streams: " << g.streams() << "\nsteps: " << g.length() << "\ntext symbols: " << contents.text.size()
             << "\nacoustic frames: " << contents.codes.length() << "\ntext: " << world::SymbolVocab::to_text(contents.text) << '\n';
}

}  // namespace starvc::cli
