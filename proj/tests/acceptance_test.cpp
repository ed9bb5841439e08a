// Acceptance suite: one PASS/FAIL line per criterion. Criteria 9, 10 and 12
// drive the `starvc` tool end to end with the default configuration (two
// identical runs plus a run with the text-loss weights zeroed).

#include <gtest/gtest.h>
#include <sys/resource.h>
#include <sys/wait.h>

#include <array>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>

#include "starvc/cli.hpp"
#include "starvc/numerics/grad_check.hpp"
#include "test_util.hpp"

using namespace starvc;
using num::BasicTensor;
using num::Tape;
using num::Tensor;
using num::Var;
namespace fs = std::filesystem;

namespace {

void verdict(int criterion, bool ok, const std::string& detail) {
    std::cout << "CRITERION " << std::setw(2) << criterion << ": " << (ok ? "PASS" : "FAIL") << "  " << detail << std::endl;
    EXPECT_TRUE(ok) << "criterion " << criterion << ": " << detail;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int prec = 4) {
    std::ostringstream os;
    os << std::setprecision(prec) << v;
    return os.str();
}

const world::World& corpus() {
    static const world::World w(world::CorpusConfig{});
    return w;
}

std::vector<Tensor> training_frames() {
    std::vector<Tensor> out;
    for (const auto& u : corpus().splits().train_utterances) out.push_back(corpus().render(u).frames);
    return out;
}

const codec::Codec& default_codec() {
    static const codec::Codec c = codec::fit_codebooks(training_frames(), codec::FitConfig{});
    return c;
}

/// Untrained but frozen encoders with the default codec: the structural
/// contracts below do not depend on encoder quality.
const model::FrozenStack& frozen() {
    static const model::FrozenStack f = [] {
        model::FrozenStack s{enc::SemanticEncoder<float>(11), enc::SpeakerEncoder<float>(12), default_codec()};
        s.semantic.freeze();
        s.speaker.freeze();
        return s;
    }();
    return f;
}

lm::LmConfig small_lm() {
    lm::LmConfig c;
    c.dim = 32;
    c.heads = 4;
    c.blocks = 1;
    c.ffn = 64;
    return c;
}

std::pair<world::Transcript, codec::CodeGrid> random_pair(Rng& rng, const lm::StreamLayout& lay, int max_text, int max_frames) {
    world::Transcript text(static_cast<std::size_t>(1 + rng.index(max_text)));
    for (auto& s : text) s = rng.index(world::kContentSymbols);
    codec::CodeGrid codes(lay.layers, 1 + rng.index(max_frames));
    for (int l = 0; l < lay.layers; ++l)
        for (int t = 0; t < codes.length(); ++t) codes.at(l, t) = rng.index(lay.codes);
    return {text, codes};
}

template <class T>
std::vector<std::uint32_t> bits_of(const std::vector<num::Param<T>*>& ps) {
    std::vector<std::uint32_t> out;
    for (auto* p : ps)
        for (float v : p->value.values()) out.push_back(std::bit_cast<std::uint32_t>(v));
    return out;
}

std::vector<std::uint32_t> frozen_bits(const model::FrozenStack& f) {
    auto out = bits_of(f.semantic.params().all());
    const auto b = bits_of(f.speaker.params().all());
    out.insert(out.end(), b.begin(), b.end());
    for (const auto& book : f.codec.books)
        for (float v : book.centroids.values()) out.push_back(std::bit_cast<std::uint32_t>(v));
    return out;
}

double reference_ce(const Tensor& logits, const std::vector<int>& targets, const std::vector<std::uint8_t>& mask) {
    double total = 0.0;
    int n = 0;
    for (int r = 0; r < logits.rows(); ++r) {
        if (!mask[static_cast<std::size_t>(r)]) continue;
        double mx = -1e300;
        for (int c = 0; c < logits.cols(); ++c) mx = std::max(mx, static_cast<double>(logits(r, c)));
        double z = 0.0;
        for (int c = 0; c < logits.cols(); ++c) z += std::exp(static_cast<double>(logits(r, c)) - mx);
        total += mx + std::log(z) - logits(r, targets[static_cast<std::size_t>(r)]);
        ++n;
    }
    return total / n;
}

// ---- end-to-end runs through the command-line tool -----------------------------

struct Command {
    int exit_code = -1;
    std::string output;
    double cpu_seconds = 0.0;
    double wall_seconds = 0.0;
};

double children_cpu() {
    rusage ru{};
    ::getrusage(RUSAGE_CHILDREN, &ru);
    auto s = [](const timeval& t) { return static_cast<double>(t.tv_sec) + 1e-6 * static_cast<double>(t.tv_usec); };
    return s(ru.ru_utime) + s(ru.ru_stime);
}

Command tool(const std::string& args) {
    Command c;
    const auto cpu0 = children_cpu();
    const auto t0 = std::chrono::steady_clock::now();
    FILE* p = ::popen((std::string(STARVC_CLI_PATH) + " " + args + " 2>&1").c_str(), "r");
    if (!p) return c;
    std::array<char, 4096> buf{};
    while (std::fgets(buf.data(), static_cast<int>(buf.size()), p)) c.output += buf.data();
    const int status = ::pclose(p);
    c.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    c.cpu_seconds = children_cpu() - cpu0;
    c.wall_seconds = seconds_since(t0);
    std::cout << "[starvc " << args << "] exit " << c.exit_code << ", " << fmt(c.wall_seconds, 5) << " s\n" << c.output << std::flush;
    return c;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

struct Run {
    fs::path dir;
    bool ok = false;
    double train_cpu = 0.0, train_wall = 0.0;
    std::string failure;

    eval::MetricsReport report(const std::string& stage) const {
        return eval::report_from_json(nlohmann::json::parse(slurp(dir / "reports" / (stage + ".json"))));
    }
};

Run full_run(const std::string& name, const std::string& config_text, const Run* reuse_upstream) {
    Run r;
    r.dir = starvc::testing::scratch_dir("acceptance_" + name);
    std::string cfg;
    if (!config_text.empty()) {
        const auto path = r.dir.parent_path() / ("starvc_acceptance_" + name + ".cfg");
        std::ofstream(path) << config_text;
        cfg = "--config " + path.string() + " ";
    }
    const auto rd = " --run-dir " + r.dir.string();
    std::vector<std::string> steps;
    if (reuse_upstream) {
        for (const char* d : {"corpus", "codec", "encoders"})
            fs::copy(reuse_upstream->dir / d, r.dir / d, fs::copy_options::recursive);
    } else {
        steps = {"synth-data --out " + r.dir.string(), "fit-codec" + rd, "pretrain-encoders" + rd};
    }
    for (const auto& s : steps) {
        const auto c = tool(cfg + s);
        if (c.exit_code != 0) {
            r.failure = s + " exited " + std::to_string(c.exit_code);
            return r;
        }
    }
    const auto c = tool(cfg + "train --stage all" + rd);
    r.train_cpu = c.cpu_seconds;
    r.train_wall = c.wall_seconds;
    if (c.exit_code != 0) {
        r.failure = "train --stage all exited " + std::to_string(c.exit_code);
        return r;
    }
    r.ok = true;
    return r;
}

const Run& default_run() {
    static const Run r = full_run("default", "", nullptr);
    return r;
}

const Run& repeat_run() {
    static const Run r = full_run("repeat", "", nullptr);
    return r;
}

/// Text stream's loss weight zeroed everywhere: no ASR stage, w = 0 in VC
/// and joint training, and the joint ASR pool weighted by zero.
const char* kTextAblation = R"(train.asr.steps = 0
train.vc.w = 0
train.joint.w = 0
train.joint.w_joint = 0
)";

const Run& ablation_run() {
    static const Run r = full_run("text_ablation", kTextAblation, &default_run());
    return r;
}

struct StepRow {
    std::string stage;
    double acoustic_ce = 0.0;
};

std::vector<StepRow> step_log(const Run& r) {
    std::ifstream is(r.dir / "logs" / "steps.tsv");
    std::string line;
    std::getline(is, line);  // header
    std::vector<StepRow> out;
    while (std::getline(is, line)) {
        std::istringstream ls(line);
        std::string step, stage, loss, text, ac;
        std::getline(ls, step, '\t');
        std::getline(ls, stage, '\t');
        std::getline(ls, loss, '\t');
        std::getline(ls, text, '\t');
        std::getline(ls, ac, '\t');
        out.push_back({stage, std::stod(ac)});
    }
    return out;
}

struct MetricsRow {
    int step = 0;
    std::string stage;
    double text_acc = 0.0;
};

std::vector<MetricsRow> metrics_log(const Run& r) {
    std::ifstream is(r.dir / "logs" / "metrics.tsv");
    std::string line;
    std::getline(is, line);
    std::vector<MetricsRow> out;
    while (std::getline(is, line)) {
        std::istringstream ls(line);
        MetricsRow m;
        std::string loss;
        ls >> m.step >> m.stage >> loss >> m.text_acc;
        out.push_back(m);
    }
    return out;
}

}  // namespace

TEST(Acceptance, C01_GridRoundTrip) {
    Rng rng(101);
    const auto t0 = std::chrono::steady_clock::now();
    int exact = 0;
    for (int i = 0; i < 1000; ++i) {
        const lm::StreamLayout lay{1 + rng.index(6), 64};
        auto [text, codes] = random_pair(rng, lay, 12, 40);
        const auto back = lm::invert_delayed_grid(lm::build_delayed_grid(text, codes, lay));
        exact += back.text == text && back.codes == codes;
    }
    const double secs = seconds_since(t0);
    verdict(1, exact == 1000 && secs < 5.0, std::to_string(exact) + "/1000 exact in " + fmt(secs) + " s");
}

TEST(Acceptance, C02_DelayLayout) {
    Rng rng(102);
    const lm::StreamLayout lay{};
    int good = 0;
    const int n = 1000;
    for (int i = 0; i < n; ++i) {
        world::Transcript text(static_cast<std::size_t>(4 + rng.index(9)));
        for (auto& s : text) s = rng.index(world::kContentSymbols);
        codec::CodeGrid codes(lay.layers, world::frames_for_length(static_cast<int>(text.size())));
        const auto g = lm::build_delayed_grid(text, codes, lay);
        int eos = -1, last_real = -1;
        for (int j = 0; j < g.length(); ++j) {
            if (g.tokens[0][static_cast<std::size_t>(j)] == lm::kTextEos) eos = j;
            if (g.valid[1][static_cast<std::size_t>(j)]) last_real = j;
        }
        bool ok = eos >= 0 && eos < last_real;
        for (int k = 1; k <= lay.layers; ++k) {
            int first = -1;
            for (int j = 0; j < g.length() && first < 0; ++j)
                if (g.valid[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)]) first = j;
            ok = ok && first == k;
        }
        good += ok;
    }
    verdict(2, good == n, std::to_string(good) + "/" + std::to_string(n) + " grids: EOS before last layer-1 token, layer k starts at step k");
}

TEST(Acceptance, C03_Causality) {
    nn::ParamSet<float> ps;
    Rng rng(103);
    const lm::StreamLM<float> model(ps, lm::LmConfig{}, rng);
    const auto semantic = Tensor::randn({9, 64}, rng), speaker = Tensor::randn({1, 64}, rng);
    const lm::StreamLayout lay{};
    auto logits = [&](const lm::DelayedGrid& g) {
        Tape<float> t;
        const auto out = model.forward(t, t.constant(semantic), t.constant(speaker), g);
        std::vector<Tensor> r;
        for (const auto& v : out.logits) r.push_back(v.value());
        return r;
    };
    int identical = 0;
    for (int probe = 0; probe < 20; ++probe) {
        auto [text, codes] = random_pair(rng, lay, 8, 20);
        const auto g = lm::build_delayed_grid(text, codes, lay);
        const int j = rng.index(g.length() - 1);  // perturb column j + 1; steps 0..j must not change
        auto h = g;
        for (int s = 0; s < lay.streams(); ++s) h.tokens[static_cast<std::size_t>(s)][static_cast<std::size_t>(j + 1)] = rng.index(lay.vocab(s));
        const auto a = logits(g), b = logits(h);
        bool same = true;
        for (int s = 0; s < lay.streams(); ++s) {
            const auto& x = a[static_cast<std::size_t>(s)];
            same = same && std::memcmp(x.data(), b[static_cast<std::size_t>(s)].data(), sizeof(float) * static_cast<std::size_t>((j + 1) * x.cols())) == 0;
        }
        identical += same;
    }
    verdict(3, identical == 20, std::to_string(identical) + "/20 perturbation probes bit-identical before the perturbed column");
}

TEST(Acceptance, C04_GradientChecks) {
    using BT = BasicTensor<double>;
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(104);
    const auto x46 = BT::randn({4, 6}, rng), other = BT::randn({4, 6}, rng), w = BT::randn({6, 3}, rng);
    const auto bias = BT::randn({6}, rng), gain = BT::uniform({6}, rng, 0.5, 1.5), mix = BT::randn({6, 6}, rng);
    const auto kk = BT::randn({4, 6}, rng), vv = BT::randn({4, 6}, rng);
    const std::vector<int> tg{0, 5, 3, 1}, ids{3, 0, 3, 1, 4};
    const std::vector<std::uint8_t> mask{1, 1, 0, 1};
    const std::vector<std::vector<int>> pos{{0, 1, 2, 3}, {5, 9, 2, 0}, {7, 7, 8, 30}};
    auto ws = [](Var<double> y) { return starvc::testing::weighted_sum(y, 7); };
    std::vector<std::tuple<std::string, num::ScalarFn, BT>> ops = {
        {"matmul", [&](Tape<double>& t, Var<double> x) { return ws(num::matmul(x, t.constant(w))); }, x46},
        {"matmul_rhs", [&](Tape<double>& t, Var<double> x) { return ws(num::matmul(t.constant(x46), x)); }, w},
        {"add", [&](Tape<double>& t, Var<double> x) { return ws(num::add(x, t.constant(other))); }, x46},
        {"add_bias", [&](Tape<double>& t, Var<double> b) { return ws(num::add_bias(t.constant(x46), b)); }, bias},
        {"mul", [&](Tape<double>& t, Var<double> x) { return ws(num::mul(x, t.constant(other))); }, x46},
        {"scale", [&](Tape<double>&, Var<double> x) { return ws(num::scale(x, -1.7)); }, x46},
        {"silu", [&](Tape<double>&, Var<double> x) { return ws(num::silu(x)); }, x46},
        {"softmax", [&](Tape<double>&, Var<double> x) { return ws(num::softmax(x)); }, x46},
        {"cross_entropy", [&](Tape<double>&, Var<double> x) { return num::cross_entropy(x, tg, mask); }, x46},
        {"softmax_ce_composite", [&](Tape<double>& t, Var<double> x) { return num::cross_entropy(num::matmul(num::softmax(x), t.constant(mix)), tg, mask); }, x46},
        {"rms_norm", [&](Tape<double>& t, Var<double> x) { return ws(num::rms_norm(x, t.constant(gain))); }, x46},
        {"rms_norm_gain", [&](Tape<double>& t, Var<double> g) { return ws(num::rms_norm(t.constant(x46), g)); }, gain},
        {"rope", [&](Tape<double>&, Var<double> x) { return ws(num::rope_apply(x, 3, pos)); }, x46},
        {"embedding", [&](Tape<double>&, Var<double> tab) { return ws(num::embedding_lookup(tab, ids)); }, x46.reshaped({6, 4})},
        {"concat_rows", [&](Tape<double>& t, Var<double> x) { return ws(num::concat_rows(std::vector{x, t.constant(other), x})); }, x46},
        {"slice_rows", [&](Tape<double>&, Var<double> x) { return ws(num::slice_rows(x, 1, 2)); }, x46},
        {"mean_rows", [&](Tape<double>&, Var<double> x) { return ws(num::mean_rows(x)); }, x46},
        {"transpose", [&](Tape<double>&, Var<double> x) { return ws(num::transpose(x)); }, x46},
        {"sum", [&](Tape<double>&, Var<double> x) { return num::scale(num::sum(x), 0.3); }, x46},
        {"mean", [&](Tape<double>&, Var<double> x) { return num::mul(num::mean(x), num::mean(x)); }, x46},
        {"unfold_time", [&](Tape<double>&, Var<double> x) { return ws(num::unfold_time(x, 3, 2)); }, BT::randn({5, 2}, rng)},
        {"attention_q", [&](Tape<double>& t, Var<double> x) { return ws(num::attention(x, t.constant(kk), t.constant(vv), 3, true)); }, x46},
        {"attention_k", [&](Tape<double>& t, Var<double> x) { return ws(num::attention(t.constant(x46), x, t.constant(vv), 3, true)); }, kk},
        {"attention_v", [&](Tape<double>& t, Var<double> x) { return ws(num::attention(t.constant(x46), t.constant(kk), x, 3, false)); }, vv},
    };
    double worst = 0.0;
    std::string worst_op;
    for (const auto& [name, f, at] : ops) {
        const double e = num::grad_check(f, at);
        if (e > worst) {
            worst = e;
            worst_op = name;
        }
    }
    // one full composite VC-loss graph through adapters, transformer and heads
    lm::LmConfig cfg;
    cfg.dim = 8;
    cfg.heads = 2;
    cfg.blocks = 1;
    cfg.ffn = 8;
    model::VcModel<double> m(cfg, 15);
    Rng irng(4);
    const auto in = train::make_vc_instance(corpus(), frozen(), m.layout(), train::Pool::train(corpus()), 1.0, irng);
    auto sc = train::StageConfig::defaults(train::Stage::vc);
    sc.w = 0.3;
    Rng pick(5);
    const double composite = num::grad_check_params([&](Tape<double>& t) { return train::vc_loss(m, t, in, sc).total; }, m.params.all(), pick, 3);
    const double secs = seconds_since(t0);
    verdict(4, worst < 1e-3 && composite < 1e-3 && secs < 60.0,
            std::to_string(ops.size()) + " ops, worst rel err " + fmt(worst) + " (" + worst_op + "); composite VC loss " + fmt(composite) + "; " +
                fmt(secs) + " s");
}

TEST(Acceptance, C05_ResidualQuantization) {
    const auto& c = default_codec();
    const auto frames = training_frames();
    int checked = 0, monotone = 0;
    for (const auto& f : frames) {
        for (int t = 0; t < f.rows() && checked < 10000; ++t, ++checked) {
            std::vector<double> norms;
            codec::encode_frame(c, f.data() + static_cast<std::size_t>(t) * f.cols(), &norms);
            bool ok = true;
            for (std::size_t l = 1; l < norms.size(); ++l) ok = ok && norms[l] <= norms[l - 1];
            monotone += ok;
        }
        if (checked >= 10000) break;
    }
    std::vector<double> dist;
    bool decreasing = true;
    for (int l = 1; l <= c.layers(); ++l) {
        dist.push_back(codec::mean_distortion(frames, c, l));
        if (l > 1) decreasing = decreasing && dist.back() < dist[dist.size() - 2];
    }
    std::string curve;
    for (double d : dist) curve += (curve.empty() ? "" : " > ") + fmt(d);
    verdict(5, checked == 10000 && monotone == checked && decreasing,
            std::to_string(monotone) + "/" + std::to_string(checked) + " frames with non-increasing residual norms; distortion by layers " + curve);
}

TEST(Acceptance, C06_LossAlgebra) {
    model::VcModel<float> m(small_lm(), 13);
    auto cfg = train::StageConfig::defaults(train::Stage::vc);
    cfg.batch = 1;
    double worst = 0.0;
    for (int b = 0; b < 100; ++b) {
        cfg.w = 0.05 + 0.9 * (b % 10) / 9.0;
        const auto batch = train::make_batch(corpus(), frozen(), m.layout(), cfg, b);
        Tape<float> t;
        const auto bl = train::batch_loss(m, t, batch, cfg);
        Tape<float> t2;
        const auto out = train::instance_forward(m, t2, batch[0]);
        const auto& g = batch[0].grid;
        double expect = cfg.w * reference_ce(out.logits[0].value(), g.tokens[0], g.supervise[0]);
        for (int l = 0; l < m.layout().layers; ++l)
            expect += (1.0 - cfg.w) * cfg.lambda[static_cast<std::size_t>(l)] *
                      reference_ce(out.logits[static_cast<std::size_t>(l + 1)].value(), g.tokens[static_cast<std::size_t>(l + 1)],
                                   g.supervise[static_cast<std::size_t>(l + 1)]);
        worst = std::max(worst, std::abs(bl.total.value().item() - expect) / std::max(1.0, std::abs(expect)));
    }
    cfg.w = 1.0;
    const auto one = train::make_batch(corpus(), frozen(), m.layout(), cfg, 1000);
    Tape<float> t;
    const auto p = train::vc_loss(m, t, one[0], cfg);
    const bool exact = std::bit_cast<std::uint32_t>(static_cast<float>(p.total.value().item())) ==
                       std::bit_cast<std::uint32_t>(static_cast<float>(p.text.value().item()));
    verdict(6, worst <= 1e-6 && exact, "max deviation from independent recomputation " + fmt(worst) + " over 100 batches; w=1 reduction " + (exact ? "bit-exact" : "differs"));
}

TEST(Acceptance, C07_RoutingAndFreezing) {
    model::VcModel<float> m(small_lm(), 16);
    const auto before = frozen_bits(frozen());
    // complete (shortened) stages in order
    for (auto s : {train::Stage::asr, train::Stage::vc, train::Stage::joint}) {
        auto c = train::StageConfig::defaults(s);
        c.steps = 20;
        c.eval_every = 10;
        c.eval_instances = 2;
        train::run_stage(m, frozen(), corpus(), c);
    }
    const bool frozen_same = frozen_bits(frozen()) == before;
    // ASR-mode speaker-adapter gradients
    auto cfg = train::StageConfig::defaults(train::Stage::joint);
    cfg.asr_fraction = 1.0;
    double max_grad = 0.0;
    for (int step = 0; step < 10; ++step) {
        const auto batch = train::make_batch(corpus(), frozen(), m.layout(), cfg, step);
        m.params.zero_grad();
        Tape<float> t;
        t.backward(train::batch_loss(m, t, batch, cfg).total);
        for (auto* p : m.group("speaker_adapter"))
            for (float g : p->grad.values()) max_grad = std::max(max_grad, static_cast<double>(std::abs(g)));
    }
    // a whole ASR stage leaves the speaker adapter bit-identical
    const auto adapter = bits_of(m.group("speaker_adapter"));
    auto asr = train::StageConfig::defaults(train::Stage::asr);
    asr.steps = 20;
    asr.eval_instances = 2;
    train::run_stage(m, frozen(), corpus(), asr);
    const bool adapter_same = bits_of(m.group("speaker_adapter")) == adapter;
    verdict(7, frozen_same && max_grad == 0.0 && adapter_same,
            std::string("frozen encoder+codec bits ") + (frozen_same ? "identical" : "CHANGED") + " across asr/vc/joint stages; max ASR speaker-adapter |grad| " +
                fmt(max_grad) + "; adapter bits across an ASR stage " + (adapter_same ? "identical" : "CHANGED"));
}

TEST(Acceptance, C08_MixingRatios) {
    const auto cfg = train::StageConfig::defaults(train::Stage::joint);
    long asr = 0, draws = 0;
    for (int step = 0; draws < 10000; ++step) {
        auto rng = train::batch_rng(cfg, step);
        for (auto t : train::draw_tasks(cfg, rng)) {
            if (draws == 10000) break;
            asr += t == train::Task::asr;
            ++draws;
        }
    }
    const auto& w = corpus();
    const auto src = w.render(w.splits().train_utterances.front());
    Rng rng(derive_seed(cfg.seed, 0x5e1ec7));
    int pristine = 0;
    for (int i = 0; i < 10000; ++i)
        pristine += train::select_target(w, src, w.splits().train_speakers.back(), cfg.aug_real_prob, rng).channel == world::Channel::pristine;
    const double f_asr = asr / 10000.0, f_pristine = pristine / 10000.0;
    verdict(8, std::abs(f_asr - 0.20) <= 0.02 && std::abs(f_pristine - 0.80) <= 0.02,
            "joint ASR fraction " + fmt(f_asr) + ", pristine-target fraction " + fmt(f_pristine) + " over 10000 draws");
}

TEST(Acceptance, C11_MetricSuite) {
    std::function<int(const std::string&, const std::string&, std::size_t, std::size_t)> brute = [&](const std::string& a, const std::string& b,
                                                                                                    std::size_t i, std::size_t j) -> int {
        if (i == a.size()) return static_cast<int>(b.size() - j);
        if (j == b.size()) return static_cast<int>(a.size() - i);
        return std::min({brute(a, b, i + 1, j + 1) + (a[i] == b[j] ? 0 : 1), brute(a, b, i + 1, j) + 1, brute(a, b, i, j + 1) + 1});
    };
    Rng rng(111);
    auto rnd = [&](int max_len) {
        std::string s(static_cast<std::size_t>(rng.index(max_len + 1)), 'a');
        for (auto& ch : s) ch = static_cast<char>('a' + rng.index(3));
        return s;
    };
    int match = 0, axioms = 0;
    for (int i = 0; i < 1000; ++i) {
        const auto a = rnd(6), b = rnd(6);
        match += eval::edit_distance(a, b).distance == brute(a, b, 0, 0);
    }
    for (int i = 0; i < 1000; ++i) {
        const auto a = rnd(8), b = rnd(8), c = rnd(8);
        const int ab = eval::edit_distance(a, b).distance;
        axioms += eval::edit_distance(a, a).distance == 0 && ab == eval::edit_distance(b, a).distance && (ab == 0) == (a == b) &&
                  eval::edit_distance(a, c).distance <= ab + eval::edit_distance(b, c).distance;
    }
    const int kitten = eval::edit_distance(std::string("kitten"), std::string("sitting")).distance;
    verdict(11, match == 1000 && kitten == 3 && axioms == 1000,
            std::to_string(match) + "/1000 match brute force; kitten/sitting = " + std::to_string(kitten) + "; axioms hold on " + std::to_string(axioms) +
                "/1000 triples");
}

TEST(Acceptance, C09_ScaledEndToEnd) {
    const auto& r = default_run();
    if (!r.ok) {
        verdict(9, false, "default run failed: " + r.failure);
        return;
    }
    const auto rep = r.report("joint");
    const bool ok = rep.cer_text <= 0.05 && rep.cer <= 0.10 && rep.target_closer >= 0.90 && rep.top1 >= 0.90 && rep.pairs == 32 &&
                    r.train_cpu < 30 * 60.0;
    verdict(9, ok,
            "CER-Text " + fmt(rep.cer_text) + " (<= 0.05), CER " + fmt(rep.cer) + " (<= 0.10), SECS target>source " + fmt(rep.target_closer) +
                " (>= 0.90), top-1 " + fmt(rep.top1) + " (>= 0.90), " + std::to_string(rep.pairs) + " pairs; train --stage all " +
                fmt(r.train_cpu / 60.0) + " CPU min (< 30)");
}

TEST(Acceptance, Stage1HeldoutTextAccuracy) {
    const auto& r = default_run();
    ASSERT_TRUE(r.ok) << r.failure;
    const auto rows = metrics_log(r);
    double last = -1.0;
    for (const auto& m : rows)
        if (m.stage == "asr") last = m.text_acc;
    std::cout << "STAGE 1 GATE: " << (last >= 0.95 ? "PASS" : "FAIL") << "  held-out text accuracy after ASR stage " << fmt(last) << " (>= 0.95)" << std::endl;
    EXPECT_GE(last, 0.95);
}

TEST(Acceptance, Stage2AcousticCeFalls) {
    const auto& r = default_run();
    ASSERT_TRUE(r.ok) << r.failure;
    std::vector<double> ce;
    for (const auto& s : step_log(r))
        if (s.stage == "vc") ce.push_back(s.acoustic_ce);
    ASSERT_GE(ce.size(), 400u);
    const double first = std::accumulate(ce.begin(), ce.begin() + 200, 0.0) / 200.0;
    const double last = std::accumulate(ce.end() - 200, ce.end(), 0.0) / 200.0;
    std::cout << "STAGE 2 GATE: " << (last < first ? "PASS" : "FAIL") << "  acoustic CE mean over first 200 steps " << fmt(first)
              << ", last 200 steps " << fmt(last) << std::endl;
    EXPECT_LT(last, first);
}

TEST(Acceptance, C10_TextAblationIsWorse) {
    const auto& base = default_run();
    const auto& abl = ablation_run();
    if (!base.ok || !abl.ok) {
        verdict(10, false, "run failed: " + base.failure + abl.failure);
        return;
    }
    const auto a = base.report("joint"), b = abl.report("joint");
    verdict(10, b.secs_oracle < a.secs_oracle && b.cer > a.cer,
            "SECS " + fmt(b.secs_oracle) + " (ablated) vs " + fmt(a.secs_oracle) + " (default); CER " + fmt(b.cer) + " (ablated) vs " + fmt(a.cer) +
                " (default)");
}

TEST(Acceptance, C12_Determinism) {
    const auto& a = default_run();
    const auto& b = repeat_run();
    if (!a.ok || !b.ok) {
        verdict(12, false, "run failed: " + a.failure + b.failure);
        return;
    }
    int same = 0, total = 0;
    std::string diffs;
    for (const char* f : {"checkpoints/asr.svck", "checkpoints/vc.svck", "checkpoints/joint.svck", "reports/asr.json", "reports/vc.json",
                          "reports/joint.json", "codec/codec.rvq", "encoders/semantic.svck", "encoders/speaker.svck", "encoders/oracles.svck",
                          "logs/metrics.tsv"}) {
        ++total;
        const auto x = slurp(a.dir / f), y = slurp(b.dir / f);
        if (!x.empty() && x == y)
            ++same;
        else
            diffs += std::string(" ") + f;
    }
    verdict(12, same == total, std::to_string(same) + "/" + std::to_string(total) + " artifacts bit-identical across two runs" + (diffs.empty() ? "" : "; differ:" + diffs));
}
