#pragma once

// Command implementations behind the `advshield` executable. Each command
// writes to the given streams and returns the process exit status:
//   0 success, 1 usage or configuration error, 2 numeric failure.

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "advshield/config.hpp"
#include "advshield/digest.hpp"
#include "advshield/gradcheck.hpp"
#include "advshield/image_io.hpp"
#include "advshield/losses.hpp"
#include "advshield/metrics.hpp"
#include "advshield/models.hpp"
#include "advshield/noise_update.hpp"
#include "advshield/purification.hpp"
#include "advshield/synthetic.hpp"

namespace advshield::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kUsage = 1, kNumeric = 2 };

// ---------------------------------------------------------------------------
// gen-weights

inline std::string weights_digest(const ToyModelBundle& b) {
    std::string bytes = serialize_weights(b);
    return sha256_hex(bytes);
}

inline int cmd_gen_weights(std::uint64_t seed, const std::string& out_path, std::ostream& out, std::ostream& err) {
    ToyModelBundle b = init_models(seed);
    try {
        save_weights(b, out_path);
    } catch (const std::exception& e) {
        err << "gen-weights: " << e.what() << "\n";
        return kUsage;
    }
    out << "sha256 " << weights_digest(b) << "\n";
    return kOk;
}

// ---------------------------------------------------------------------------
// protect

struct ProtectOptions {
    std::string config_path;  // optional
    std::string input;        // image file or directory of .ppm/.png files
    std::string weights;      // optional; without it the bundle is synthesized from the seed
    std::string out_dir;
    std::size_t jobs = 1;
    const char* seed_env = nullptr;  // value of ADVSHIELD_SEED, if set
};

inline std::vector<fs::path> collect_inputs(const fs::path& in) {
    if (!fs::is_directory(in)) return {in};
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(in)) {
        if (!e.is_regular_file()) continue;
        auto ext = e.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
        if (ext == ".ppm" || ext == ".png") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    return files;
}

struct ProtectOutputs {
    fs::path image, trace;
};

inline ProtectOutputs protect_output_paths(const fs::path& input, const fs::path& out_dir) {
    std::string stem = input.stem().string(), ext = input.extension().string();
    return {out_dir / (stem + "_protected" + ext), out_dir / (stem + "_trace.csv")};
}

inline ToyModelBundle bundle_for(const std::string& weights, std::uint64_t seed) {
    return weights.empty() ? init_models(seed) : load_weights(weights);
}

inline void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ImageError("cannot write '" + path.string() + "'");
    f << text;
}

inline std::string trace_text(const std::vector<TraceRow>& rows) {
    std::ostringstream os;
    write_trace(os, rows);
    return os.str();
}

inline int cmd_protect(const ProtectOptions& opt, std::ostream& out, std::ostream& err) {
    RunConfig cfg;
    std::vector<fs::path> inputs;
    ToyModelBundle bundle;
    try {
        if (!opt.config_path.empty()) cfg = load_config(opt.config_path);
        if (!opt.input.empty()) cfg.input = opt.input;
        if (!opt.weights.empty()) cfg.weights = opt.weights;
        if (!opt.out_dir.empty()) cfg.output = opt.out_dir;
        apply_seed_override(cfg, opt.seed_env);
        validate_run_config(cfg);
        if (cfg.input.empty()) throw ConfigError("no input image given");
        if (cfg.output.empty()) throw ConfigError("no output directory given");
        if (!fs::exists(cfg.input)) throw ConfigError("input '" + cfg.input + "' does not exist");
        if (!cfg.weights.empty() && !fs::exists(cfg.weights))
            throw ConfigError("weights '" + cfg.weights + "' do not exist");
        if (opt.jobs == 0) throw ConfigError("--jobs must be at least 1");
        inputs = collect_inputs(cfg.input);
        if (inputs.empty()) throw ConfigError("no .ppm or .png images in '" + cfg.input + "'");
        fs::create_directories(cfg.output);
        bundle = bundle_for(cfg.weights, cfg.attack.seed);
    } catch (const std::exception& e) {
        err << "protect: " << e.what() << "\n";
        return kUsage;
    }
    out << "# effective configuration\n" << echo_config(cfg);

    // One result slot per input; workers never share anything mutable.
    struct Outcome {
        int code = kOk;
        std::string message;
    };
    std::vector<Outcome> outcomes(inputs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < inputs.size(); i = next++) {
            const auto paths = protect_output_paths(inputs[i], cfg.output);
            Outcome& o = outcomes[i];
            Tensor x;
            try {
                x = read_image(inputs[i].string());
            } catch (const std::exception& e) {
                o = {kUsage, e.what()};
                continue;
            }
            try {
                ProtectResult r = protect(x, bundle, cfg.attack);
                write_image(paths.image.string(), r.protected_image);
                write_text(paths.trace, trace_text(r.trace));
                std::ostringstream msg;
                msg << inputs[i].string() << " -> " << paths.image.string() << " (linf " << linf_norm(r.delta) * 255.0
                    << "/255)";
                for (const auto& w : r.warnings) msg << "\n  warning: " << w;
                o.message = msg.str();
            } catch (const AttackAborted& e) {
                try {
                    write_text(paths.trace, trace_text(e.trace()));
                } catch (const std::exception&) {
                }
                o = {kNumeric, inputs[i].string() + ": " + e.what()};
            } catch (const NumericError& e) {
                o = {kNumeric, inputs[i].string() + ": " + e.what()};
            } catch (const std::invalid_argument& e) {
                o = {kUsage, inputs[i].string() + ": " + e.what()};
            } catch (const std::exception& e) {
                o = {kUsage, inputs[i].string() + ": " + e.what()};
            }
        }
    };
    std::size_t n_workers = std::min(opt.jobs, inputs.size());
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < n_workers; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();

    int code = kOk;
    for (const auto& o : outcomes) {
        if (o.code == kOk)
            out << o.message << "\n";
        else
            err << "protect: " << o.message << "\n";
        code = std::max(code, o.code);
    }
    return code;
}

// ---------------------------------------------------------------------------
// evaluate

inline constexpr const char* kMetricHeader = "l2,psnr,ssim,fr,ism_toy";

inline std::string format_metrics(const MetricReport& m) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.6f,%.12g,%.6f", m.l2, m.psnr, m.ssim, m.fr, m.ism_toy);
    return buf;
}

struct EvaluateOptions {
    std::string clean, protected_img, weights, purifiers;
    std::uint64_t seed = 0;  // used when no weight file is given
};

inline int cmd_evaluate(const EvaluateOptions& opt, std::ostream& out, std::ostream& err) {
    Tensor clean, prot;
    ToyModelBundle bundle;
    std::vector<Purifier> purifiers;
    try {
        clean = read_image(opt.clean);
        prot = read_image(opt.protected_img);
        require_same_shape(clean, prot, "evaluate");
        bundle = bundle_for(opt.weights, opt.seed);
        purifiers = opt.purifiers.empty() ? default_purifier_grid() : parse_purifier_list(opt.purifiers);
    } catch (const std::exception& e) {
        err << "evaluate: " << e.what() << "\n";
        return kUsage;
    }
    try {
        MetricReport m = compute_metrics(bundle, clean, prot);
        out << "# metrics\n" << kMetricHeader << "\n" << format_metrics(m) << "\n";
        out << "# robustness\n" << format_robustness_report(evaluate_robustness(clean, prot, bundle, purifiers));
    } catch (const std::invalid_argument& e) {
        err << "evaluate: " << e.what() << "\n";
        return kUsage;
    } catch (const std::exception& e) {
        err << "evaluate: " << e.what() << "\n";
        return kNumeric;
    }
    return kOk;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradCheckItem {
    std::string name;
    std::function<Tensor(const Tensor&)> f;
    Tensor x;
};

// Identity in the forward pass; multiplies the incoming gradient by `factor`
// on the way back. Used to plant a wrong analytic gradient on purpose.
inline Tensor scale_grad(const Tensor& a, double factor) {
    return make_result(a.shape(), a.values(), {a}, [a, factor](detail::Node& self) {
        auto& g = a.node().grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
    });
}

inline Tensor seeded_tensor(std::uint64_t seed, const Shape& shape, double lo, double hi) {
    WeightRng rng(seed);
    std::vector<double> v(shape_numel(shape));
    for (auto& e : v) e = lo + (hi - lo) * rng.uniform01();
    return Tensor(shape, std::move(v));
}

// A fixed weighting so that vector-valued ops reduce to a scalar with a
// non-degenerate gradient.
inline Tensor probe_sum(const Tensor& y, std::uint64_t seed) {
    return sum(mul(y, seeded_tensor(seed, y.shape(), -1.0, 1.0)));
}

inline std::vector<GradCheckItem> gradcheck_items(const ToyModelBundle& b, std::size_t side = 32) {
    std::vector<GradCheckItem> items;
    auto op = [&](std::string name, Shape shape, double lo, double hi, std::function<Tensor(const Tensor&)> f) {
        std::uint64_t seed = 1000 + items.size();
        items.push_back({std::move(name), [f, seed](const Tensor& x) { return probe_sum(f(x), seed + 1); },
                         seeded_tensor(seed, shape, lo, hi)});
    };
    Tensor other = seeded_tensor(77, {3, 4}, 0.5, 1.5);
    op("add", {3, 4}, -1, 1, [other](const Tensor& x) { return add(x, other); });
    op("sub", {3, 4}, -1, 1, [other](const Tensor& x) { return sub(other, x); });
    op("mul", {3, 4}, -1, 1, [other](const Tensor& x) { return mul(x, other); });
    op("div", {3, 4}, 0.5, 1.5, [other](const Tensor& x) { return div(other, x); });
    op("neg", {3, 4}, -1, 1, [](const Tensor& x) { return neg(x); });
    Tensor signs({3, 4}, {1, -1, 1, -1, -1, 1, -1, 1, 1, 1, -1, -1});
    op("abs", {3, 4}, 0.1, 1, [signs](const Tensor& x) { return abs(mul(x, signs)); });
    op("sign", {3, 4}, 0.1, 1, [](const Tensor& x) { return mul(sign(x), x); });
    op("square", {3, 4}, -1, 1, [](const Tensor& x) { return square(x); });
    op("sqrt", {3, 4}, 0.5, 2, [](const Tensor& x) { return sqrt(x); });
    op("tanh", {3, 4}, -2, 2, [](const Tensor& x) { return tanh(x); });
    op("exp", {3, 4}, -1, 1, [](const Tensor& x) { return exp(x); });
    op("clamp", {3, 4}, -0.45, 0.45, [](const Tensor& x) { return clamp(mul(x, 2.0), -0.5, 0.5); });
    op("sum", {3, 4}, -1, 1, [](const Tensor& x) { return mul(sum(x), sum(x)); });
    op("mean", {3, 4}, -1, 1, [](const Tensor& x) { return square(mean(x)); });
    op("reshape", {3, 4}, -1, 1, [](const Tensor& x) { return square(reshape(x, {2, 6})); });
    op("flatten", {2, 3, 2}, -1, 1, [](const Tensor& x) { return square(flatten(x)); });
    op("dot", {6}, -1, 1, [](const Tensor& x) { return mul(dot(x, x), 0.5); });
    op("transpose", {2, 3, 4}, -1, 1, [](const Tensor& x) { return square(transpose(x)); });
    op("select", {3, 4}, -1, 1, [](const Tensor& x) { return square(select(x, 1)); });
    op("softmax", {3, 5}, -2, 2, [](const Tensor& x) { return softmax(x, 1); });
    op("variance", {3, 5}, -1, 1, [](const Tensor& x) { return variance(x, 1); });
    Tensor mb = seeded_tensor(78, {4, 5}, -1, 1);
    op("matmul", {3, 4}, -1, 1, [mb](const Tensor& x) { return matmul(x, mb); });
    Tensor lw = seeded_tensor(79, {4, 3}, -1, 1), lb = seeded_tensor(80, {3}, -1, 1);
    op("linear", {2, 4}, -1, 1, [lw, lb](const Tensor& x) { return linear(x, lw, lb); });
    Tensor cw = seeded_tensor(81, {4, 3, 3, 3}, -0.5, 0.5), cb = seeded_tensor(82, {4}, -0.5, 0.5);
    op("conv2d", {3, 7, 6}, -1, 1, [cw, cb](const Tensor& x) { return conv2d(x, cw, cb, 2, 1); });
    op("pad2d", {2, 3, 3}, -1, 1, [](const Tensor& x) { return square(pad2d(x, {1, 0, 2, 1})); });
    op("pool_avg", {2, 6, 6}, -1, 1, [](const Tensor& x) { return pool_avg(x, {2, 3}, {2, 3}); });
    op("resize_nearest", {2, 5, 4}, -1, 1, [](const Tensor& x) { return resize(x, {7, 3}, ResizeMode::nearest); });
    op("resize_bilinear", {2, 5, 4}, -1, 1, [](const Tensor& x) { return resize(x, {7, 3}, ResizeMode::bilinear); });
    op("resize_area", {2, 6, 5}, -1, 1, [](const Tensor& x) { return resize(x, {4, 3}, ResizeMode::area); });
    op("robust_resize", {3, 12, 12}, 0, 1, [](const Tensor& x) { return robust_resize(x, 0.709); });
    op("cosine_similarity", {8}, -1, 1, [](const Tensor& x) {
        return cosine_similarity(x, seeded_tensor(83, {8}, -1, 1));
    });

    // The four attack losses on a seeded face at `side` x `side`, each
    // differentiated with respect to the perturbation.
    Tensor x = synthetic_face(3, side);
    LossConfig lc;
    AttackObjective obj(b, x, lc);
    Tensor d0 = seeded_tensor(84, x.shape(), -4.0 / 255.0, 4.0 / 255.0);
    // Every detector cell is switched on and held fixed, so the checked
    // function is smooth and never trivially zero.
    auto masks = std::make_shared<std::vector<Tensor>>();
    for (const auto& m : obj.evaluate(d0).detector.masks) masks->push_back(Tensor::full(m.shape(), 1.0));
    auto det = std::make_shared<DetectorAttackState>(obj.detector_state());
    auto attn = std::make_shared<AttentionAttackState>(obj.attention_state());
    auto bundle = std::make_shared<ToyModelBundle>(b);
    // Clean-image features are computed once, as in the attack loop.
    Tensor clean_tokens = b.projector.forward(x), clean_emb = b.identity.forward(x);
    items.push_back({"L_proj",
                     [bundle, x, clean_tokens](const Tensor& d) {
                         return proj_divergence(bundle->projector.forward(add(x, d)), clean_tokens);
                     },
                     d0});
    items.push_back({"L_attn", [bundle, attn, x](const Tensor& d) { return loss_attn(*attn, *bundle, x, d); }, d0});
    items.push_back({"L_mtcnn",
                     [bundle, det, masks, x](const Tensor& d) {
                         return loss_mtcnn(*det, *bundle, x, d, masks.get()).value;
                     },
                     d0});
    items.push_back({"L_id",
                     [bundle, x, clean_emb](const Tensor& d) {
                         return id_loss_from_embeddings(bundle->identity.forward(add(x, d)), clean_emb);
                     },
                     d0});
    return items;
}

inline constexpr double kGradTolerance = 1e-4;

struct GradCheckRow {
    std::string name;
    double max_rel_err = 0;
    bool pass = false;
};

inline std::vector<GradCheckRow> run_gradcheck(const std::vector<GradCheckItem>& items,
                                               const std::string& corrupt = "") {
    std::vector<GradCheckRow> rows;
    for (const auto& it : items) {
        auto f = it.f;
        if (it.name == corrupt) f = [g = it.f](const Tensor& x) { return g(scale_grad(x, 1.01)); };
        GradCheckResult r = grad_check(f, it.x);
        rows.push_back({it.name, r.max_rel_err, r.max_rel_err < kGradTolerance});
    }
    return rows;
}

inline int cmd_gradcheck(std::ostream& out, std::ostream& err, const std::string& corrupt = "",
                         std::uint64_t seed = 7) {
    ToyModelBundle b = init_models(seed);
    auto items = gradcheck_items(b);
    if (!corrupt.empty() && std::none_of(items.begin(), items.end(), [&](const auto& i) { return i.name == corrupt; })) {
        err << "gradcheck: no item named '" << corrupt << "'\n";
        return kUsage;
    }
    std::vector<GradCheckRow> rows;
    try {
        rows = run_gradcheck(items, corrupt);
    } catch (const std::exception& e) {
        err << "gradcheck: " << e.what() << "\n";
        return kNumeric;
    }
    out << "item,max_rel_err,status\n";
    bool ok = true;
    for (const auto& r : rows) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "%s,%.3e,%s\n", r.name.c_str(), r.max_rel_err, r.pass ? "PASS" : "FAIL");
        out << buf;
        ok = ok && r.pass;
    }
    if (!ok) {
        for (const auto& r : rows)
            if (!r.pass) err << "gradcheck: " << r.name << " exceeds " << kGradTolerance << "\n";
        return kNumeric;
    }
    return kOk;
}

// ---------------------------------------------------------------------------
// grid

inline constexpr std::size_t kMaxGridCombos = 81;

struct LambdaGrid {
    std::vector<double> proj, attn, mtcnn, id;
    std::size_t size() const { return proj.size() * attn.size() * mtcnn.size() * id.size(); }
};

// "proj=-1,-0.5;attn=1;mtcnn=0.5,1;id=-1". Omitted losses keep the base weight.
inline LambdaGrid parse_lambda_grid(const std::string& spec, const LossWeights& base) {
    LambdaGrid g{{base.proj}, {base.attn}, {base.mtcnn}, {base.id}};
    std::vector<std::string> seen;
    for (const auto& part : advshield::detail::split(spec, ';')) {
        std::string p = advshield::detail::trim(part);
        if (p.empty()) continue;
        auto eq = p.find('=');
        if (eq == std::string::npos) throw ConfigError("lambda grid: expected name=v1,v2,... in '" + p + "'");
        std::string name = advshield::detail::trim(p.substr(0, eq));
        if (std::find(seen.begin(), seen.end(), name) != seen.end())
            throw ConfigError("lambda grid: '" + name + "' given twice");
        seen.push_back(name);
        std::vector<double> vals;
        for (const auto& v : advshield::detail::split(p.substr(eq + 1), ','))
            vals.push_back(advshield::detail::parse_real(advshield::detail::trim(v), "lambda grid " + name));
        if (vals.empty()) throw ConfigError("lambda grid: no values for '" + name + "'");
        if (name == "proj")
            g.proj = vals;
        else if (name == "attn")
            g.attn = vals;
        else if (name == "mtcnn")
            g.mtcnn = vals;
        else if (name == "id")
            g.id = vals;
        else
            throw ConfigError("lambda grid: unknown loss '" + name + "' (proj, attn, mtcnn, id)");
    }
    if (g.size() > kMaxGridCombos)
        throw ConfigError("lambda grid has " + std::to_string(g.size()) + " combinations; the limit is " +
                          std::to_string(kMaxGridCombos));
    return g;
}

struct GridRow {
    std::size_t index = 0;  // position in the enumeration order
    LossWeights weights;
    LossValues initial, final;
    double score = 0;
};

// Sum over enabled losses of (L0 - LT) / (|L0| + |LT| + 1e-12). All four losses
// improve by decreasing, so every term is positive when its loss improved.
inline double grid_score(const LossValues& l0, const LossValues& lt, const LossToggles& on) {
    auto term = [](double a, double b) { return (a - b) / (std::fabs(a) + std::fabs(b) + 1e-12); };
    double s = 0;
    if (on.proj) s += term(l0.proj, lt.proj);
    if (on.attn) s += term(l0.attn, lt.attn);
    if (on.mtcnn) s += term(l0.mtcnn, lt.mtcnn);
    if (on.id) s += term(l0.id, lt.id);
    return s;
}

// Runs protect once per combination and ranks by score, best first; ties
// keep enumeration order.
inline std::vector<GridRow> run_grid(const Tensor& x, const ToyModelBundle& b, const AttackConfig& base,
                                     const LambdaGrid& g) {
    std::vector<AttackConfig> configs;
    for (double p : g.proj)
        for (double a : g.attn)
            for (double m : g.mtcnn)
                for (double i : g.id) {
                    AttackConfig c = base;
                    c.losses.weights = {p, a, m, i};
                    c.validate();
                    configs.push_back(c);
                }
    std::vector<GridRow> rows;
    for (std::size_t k = 0; k < configs.size(); ++k) {
        ProtectResult r = protect(x, b, configs[k]);
        rows.push_back({k, configs[k].losses.weights, r.initial, r.final,
                        grid_score(r.initial, r.final, configs[k].losses.enabled)});
    }
    std::stable_sort(rows.begin(), rows.end(), [](const GridRow& a, const GridRow& b) { return a.score > b.score; });
    return rows;
}

inline constexpr const char* kGridHeader =
    "rank,combo,lambda_proj,lambda_attn,lambda_mtcnn,lambda_id,score,l_proj,l_attn,l_mtcnn,l_id";

inline std::string format_grid(const std::vector<GridRow>& rows) {
    std::string s = std::string(kGridHeader) + "\n";
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto& g = rows[r];
        char buf[512];
        std::snprintf(buf, sizeof buf, "%zu,%zu,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g\n", r + 1,
                      g.index, g.weights.proj, g.weights.attn, g.weights.mtcnn, g.weights.id, g.score, g.final.proj,
                      g.final.attn, g.final.mtcnn, g.final.id);
        s += buf;
    }
    return s;
}

struct GridOptions {
    std::string config_path, lambda_grid, input, weights;
    const char* seed_env = nullptr;
};

inline int cmd_grid(const GridOptions& opt, std::ostream& out, std::ostream& err) {
    RunConfig cfg;
    LambdaGrid grid;
    Tensor x;
    ToyModelBundle bundle;
    try {
        if (!opt.config_path.empty()) cfg = load_config(opt.config_path);
        if (!opt.input.empty()) cfg.input = opt.input;
        if (!opt.weights.empty()) cfg.weights = opt.weights;
        apply_seed_override(cfg, opt.seed_env);
        validate_run_config(cfg);
        grid = parse_lambda_grid(opt.lambda_grid, cfg.attack.losses.weights);
        for (double p : grid.proj)
            for (double a : grid.attn)
                for (double m : grid.mtcnn)
                    for (double i : grid.id) {
                        AttackConfig c = cfg.attack;
                        c.losses.weights = {p, a, m, i};
                        c.validate();
                    }
        if (cfg.input.empty()) throw ConfigError("no input image given (--in or `input` in the config)");
        x = read_image(cfg.input);
        bundle = bundle_for(cfg.weights, cfg.attack.seed);
    } catch (const std::exception& e) {
        err << "grid: " << e.what() << "\n";
        return kUsage;
    }
    try {
        out << format_grid(run_grid(x, bundle, cfg.attack, grid));
    } catch (const NumericError& e) {
        err << "grid: " << e.what() << "\n";
        return kNumeric;
    } catch (const std::exception& e) {
        err << "grid: " << e.what() << "\n";
        return kUsage;
    }
    return kOk;
}

}  // namespace advshield::cli
