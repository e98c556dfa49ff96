#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "advshield/config.hpp"
#include "advshield/image_io.hpp"
#include "advshield/synthetic.hpp"
#include "commands.hpp"

using namespace advshield;
using namespace advshield::cli;
namespace fs = std::filesystem;

namespace {

class TempDir {
   public:
    TempDir() {
        path_ = fs::temp_directory_path() /
                ("advshield_cli_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
                 ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    fs::path operator/(const std::string& s) const { return path_ / s; }
    const fs::path& path() const { return path_; }

   private:
    fs::path path_;
};

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

void spit(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

RunConfig parse(const std::string& text) {
    std::istringstream in(text);
    return parse_config(in, "test.cfg");
}

std::string sample() { return std::string(ADVSHIELD_DATA_DIR) + "/sample64.ppm"; }

// Runs the CLI binary; returns its exit status and captures stdout.
int run_cli(const std::string& args, const fs::path& out_file) {
    std::string cmd = std::string(ADVSHIELD_CLI) + " " + args + " > " + out_file.string() + " 2>&1";
    int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST(Config, ParsesFractionsCommentsAndBooleans) {
    RunConfig c = parse("# header\neta = 8/255  # budget\nsteps=5\nblur = off\n\nlambda_id = -0.5\n");
    EXPECT_DOUBLE_EQ(c.attack.eta, 8.0 / 255.0);
    EXPECT_EQ(c.attack.steps, 5u);
    EXPECT_FALSE(c.attack.blur.enabled);
    EXPECT_EQ(c.attack.losses.weights.id, -0.5);
    EXPECT_EQ(c.attack.step, AttackConfig{}.step);
}

TEST(Config, ErrorsNameTheFileAndLine) {
    auto message = [](const std::string& text) {
        try {
            parse(text);
        } catch (const ConfigError& e) {
            return std::string(e.what());
        }
        return std::string();
    };
    EXPECT_NE(message("steps = 3\nbogus = 1\n").find("test.cfg:2"), std::string::npos);
    EXPECT_NE(message("steps = 3\nsteps = 4\n").find("duplicate"), std::string::npos);
    EXPECT_NE(message("eta = 1/0\n").find("test.cfg:1"), std::string::npos);
    EXPECT_NE(message("steps = -1\n").find("steps"), std::string::npos);
    EXPECT_NE(message("blur = maybe\n").find("blur"), std::string::npos);
    EXPECT_NE(message("\n\njust words\n").find("test.cfg:3"), std::string::npos);
    EXPECT_THROW(load_config("/nonexistent/advshield.cfg"), ConfigError);
}

TEST(Config, EchoRoundTrips) {
    RunConfig c = parse("eta = 10/255\nseed = 9\nlambda_proj = -0.25\nid = false\npurifiers = jpeg:50\n");
    std::string echoed = echo_config(c);
    RunConfig d = parse(echoed);
    EXPECT_EQ(echo_config(d), echoed);
    EXPECT_EQ(d.attack.eta, c.attack.eta);
    EXPECT_EQ(d.purifiers, "jpeg:50");
}

TEST(Config, SeedOverrideReplacesConfiguredSeed) {
    RunConfig c = parse("seed = 3\n");
    apply_seed_override(c, nullptr);
    EXPECT_EQ(c.attack.seed, 3u);
    apply_seed_override(c, "42");
    EXPECT_EQ(c.attack.seed, 42u);
    EXPECT_THROW(apply_seed_override(c, "x"), ConfigError);
}

TEST(Config, ValidationCatchesSemanticErrors) {
    EXPECT_THROW(validate_run_config(parse("lambda_attn = -1\n")), ConfigError);
    EXPECT_THROW(validate_run_config(parse("purifiers = jpeg:0\n")), ConfigError);
    EXPECT_THROW(validate_run_config(parse("lowpass_patch = 16\n")), ConfigError);
    EXPECT_NO_THROW(validate_run_config(RunConfig{}));
}

TEST(Images, PpmAndPngRoundTripEightBitValues) {
    TempDir dir;
    Tensor x = synthetic_face(3, 16);
    for (const char* name : {"a.ppm", "a.png"}) {
        write_image((dir / name).string(), x);
        Tensor y = read_image((dir / name).string());
        ASSERT_EQ(y.shape(), x.shape());
        for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y[i], x[i], 0.5 / 255 + 1e-12);
        // A second pass is exact: values are already on the 8-bit grid.
        write_image((dir / name).string(), y);
        EXPECT_EQ(read_image((dir / name).string()).values(), y.values());
    }
}

TEST(Images, MalformedFilesAreRejected) {
    TempDir dir;
    spit(dir / "bad.ppm", "P3\n2 2\n255\n");
    EXPECT_THROW(read_image((dir / "bad.ppm").string()), ImageError);
    spit(dir / "short.ppm", "P6\n4 4\n255\nabc");
    EXPECT_THROW(read_image((dir / "short.ppm").string()), ImageError);
    spit(dir / "bad.png", "not a png");
    EXPECT_THROW(read_image((dir / "bad.png").string()), ImageError);
    EXPECT_THROW(read_image((dir / "x.jpg").string()), ImageError);
}

TEST(GenWeights, DigestMatchesFileBytes) {
    TempDir dir;
    std::ostringstream out, err;
    ASSERT_EQ(cmd_gen_weights(7, (dir / "w.bin").string(), out, err), kOk);
    EXPECT_EQ(out.str(), "sha256 " + sha256_hex(slurp(dir / "w.bin")) + "\n");
    EXPECT_EQ(cmd_gen_weights(7, (dir / "missing" / "w.bin").string(), out, err), kUsage);
}

TEST(GenWeights, BinaryIsReproducibleAcrossRuns) {
    TempDir dir;
    ASSERT_EQ(run_cli("gen-weights --seed 5 --out " + (dir / "a.bin").string(), dir / "o1.txt"), 0);
    ASSERT_EQ(run_cli("gen-weights --seed 5 --out " + (dir / "b.bin").string(), dir / "o2.txt"), 0);
    EXPECT_EQ(slurp(dir / "a.bin"), slurp(dir / "b.bin"));
    EXPECT_EQ(slurp(dir / "o1.txt"), slurp(dir / "o2.txt"));
    EXPECT_EQ(slurp(dir / "o1.txt"), "sha256 " + weights_digest(init_models(5)) + "\n");
    EXPECT_EQ(run_cli("gen-weights --out " + (dir / "c.bin").string(), dir / "o3.txt"), kUsage);
    EXPECT_EQ(run_cli("no-such-command", dir / "o4.txt"), kUsage);
}

TEST(Protect, RerunsAreByteIdenticalAndJobsDoNotMatter) {
    TempDir dir;
    fs::create_directories(dir / "in");
    fs::copy_file(sample(), dir / "in" / "a.ppm");
    write_image((dir / "in" / "b.png").string(), synthetic_face(4));
    spit(dir / "in" / "notes.txt", "ignored");
    spit(dir / "run.cfg", "steps = 2\nseed = 7\n");

    auto run = [&](const std::string& out, std::size_t jobs) {
        ProtectOptions o;
        o.config_path = (dir / "run.cfg").string();
        o.input = (dir / "in").string();
        o.out_dir = (dir / out).string();
        o.jobs = jobs;
        std::ostringstream os, es;
        EXPECT_EQ(cmd_protect(o, os, es), kOk) << es.str();
        return os.str();
    };
    std::string log1 = run("o1", 1);
    run("o2", 1);
    run("o3", 2);
    EXPECT_NE(log1.find("steps = 2"), std::string::npos);
    for (const char* f : {"a_protected.ppm", "a_trace.csv", "b_protected.png", "b_trace.csv"}) {
        ASSERT_TRUE(fs::exists(dir / "o1" / f)) << f;
        EXPECT_EQ(slurp(dir / "o1" / f), slurp(dir / "o2" / f)) << f;
        EXPECT_EQ(slurp(dir / "o1" / f), slurp(dir / "o3" / f)) << f;
    }
    EXPECT_FALSE(fs::exists(dir / "o1" / "notes_protected.txt"));
    std::string trace = slurp(dir / "o1" / "a_trace.csv");
    EXPECT_EQ(trace.substr(0, trace.find('\n')), kTraceHeader);
    EXPECT_EQ(std::count(trace.begin(), trace.end(), '\n'), 3);
}

TEST(Protect, UsageErrorsExitWithOne) {
    TempDir dir;
    std::ostringstream os, es;
    ProtectOptions o;
    o.input = (dir / "missing.ppm").string();
    o.out_dir = (dir / "out").string();
    EXPECT_EQ(cmd_protect(o, os, es), kUsage);
    spit(dir / "bad.cfg", "eta = 2\n");
    o.input = sample();
    o.config_path = (dir / "bad.cfg").string();
    EXPECT_EQ(cmd_protect(o, os, es), kUsage);
    spit(dir / "zero.cfg", "lambda_proj = 0\nlambda_attn = 0\nlambda_mtcnn = 0\nlambda_id = 0\n");
    o.config_path = (dir / "zero.cfg").string();
    EXPECT_EQ(cmd_protect(o, os, es), kUsage);
    o.config_path.clear();
    o.jobs = 0;
    EXPECT_EQ(cmd_protect(o, os, es), kUsage);
}

TEST(Protect, SeedEnvironmentChangesTheRandomStart) {
    TempDir dir;
    spit(dir / "run.cfg", "steps = 1\nrandom_start = true\nseed = 1\n");
    auto run = [&](const std::string& out, const char* env) {
        ProtectOptions o;
        o.config_path = (dir / "run.cfg").string();
        o.input = sample();
        o.out_dir = (dir / out).string();
        o.seed_env = env;
        std::ostringstream os, es;
        EXPECT_EQ(cmd_protect(o, os, es), kOk) << es.str();
        return os.str();
    };
    EXPECT_NE(run("a", nullptr).find("seed = 1\n"), std::string::npos);
    EXPECT_NE(run("b", "2").find("seed = 2\n"), std::string::npos);
    EXPECT_NE(slurp(dir / "a" / "sample64_protected.ppm"), slurp(dir / "b" / "sample64_protected.ppm"));
}

TEST(Evaluate, PrintsMetricsAndOneRowPerPurifier) {
    TempDir dir;
    Tensor x = read_image(sample());
    Tensor xp = clamp(add(x, seeded_tensor(3, x.shape(), -0.03, 0.03)), 0, 1);
    write_image((dir / "p.ppm").string(), xp);
    EvaluateOptions o{sample(), (dir / "p.ppm").string(), "", "jpeg:75,bits:3", 7};
    std::ostringstream os, es;
    ASSERT_EQ(cmd_evaluate(o, os, es), kOk) << es.str();
    std::vector<std::string> lines;
    std::istringstream in(os.str());
    for (std::string l; std::getline(in, l);) lines.push_back(l);
    ASSERT_EQ(lines.size(), 7u);
    EXPECT_EQ(lines[0], "# metrics");
    EXPECT_EQ(lines[1], kMetricHeader);
    EXPECT_EQ(lines[2], format_metrics(compute_metrics(init_models(7), x, read_image((dir / "p.ppm").string()))));
    EXPECT_EQ(lines[3], "# robustness");
    EXPECT_EQ(lines[4], kRobustnessHeader);
    EXPECT_EQ(lines[5].substr(0, 8), "jpeg:75,");
    EXPECT_EQ(lines[6].substr(0, 7), "bits:3,");
}

TEST(Evaluate, ShapeMismatchAndBadPurifiersAreUsageErrors) {
    TempDir dir;
    write_image((dir / "small.ppm").string(), synthetic_face(1, 32));
    std::ostringstream os, es;
    EXPECT_EQ(cmd_evaluate({sample(), (dir / "small.ppm").string(), "", "", 7}, os, es), kUsage);
    EXPECT_NE(es.str().find("shapes differ"), std::string::npos);
    EXPECT_EQ(cmd_evaluate({sample(), sample(), "", "jpeg:200", 7}, os, es), kUsage);
}

TEST(GradCheck, CorruptedItemFailsAndOthersPass) {
    ToyModelBundle b = init_models(7);
    auto items = gradcheck_items(b);
    std::vector<GradCheckItem> subset;
    for (auto& it : items)
        if (it.name == "mul" || it.name == "softmax" || it.name == "matmul") subset.push_back(it);
    ASSERT_EQ(subset.size(), 3u);
    auto rows = run_gradcheck(subset, "softmax");
    for (const auto& r : rows) EXPECT_EQ(r.pass, r.name != "softmax") << r.name << " " << r.max_rel_err;
    std::ostringstream os, es;
    EXPECT_EQ(cmd_gradcheck(os, es, "no_such_item"), kUsage);
}

TEST(Grid, ParsesAndLimitsCombinations) {
    LossWeights base;
    LambdaGrid g = parse_lambda_grid("proj=-1,-0.5; attn = 1,2", base);
    EXPECT_EQ(g.size(), 4u);
    EXPECT_EQ(g.mtcnn, std::vector<double>{base.mtcnn});
    EXPECT_THROW(parse_lambda_grid("proj=-1,-2,-3;attn=1,2,3;mtcnn=1,2,3;id=-1,-2,-3,-4", base), ConfigError);
    EXPECT_NO_THROW(parse_lambda_grid("proj=-1,-2,-3;attn=1,2,3;mtcnn=1,2,3;id=-1,-2,-3", base));
    EXPECT_THROW(parse_lambda_grid("foo=1", base), ConfigError);
    EXPECT_THROW(parse_lambda_grid("attn=1;attn=2", base), ConfigError);
    EXPECT_THROW(parse_lambda_grid("attn", base), ConfigError);
}

TEST(Grid, RejectsAllZeroWeightsAndWrongSigns) {
    std::ostringstream os, es;
    GridOptions o{"", "proj=0;attn=0;mtcnn=0;id=0", sample(), "", nullptr};
    EXPECT_EQ(cmd_grid(o, os, es), kUsage);
    o.lambda_grid = "attn=-1";
    EXPECT_EQ(cmd_grid(o, os, es), kUsage);
}

TEST(Grid, RowsAreRankedByScore) {
    EXPECT_NEAR(grid_score({-1, 2, 3, -0.5, 0}, {-2, 1, 3, -1, 0}, LossToggles{}),
                1.0 / 3 + 1.0 / 3 + 0 + 0.5 / 1.5, 1e-9);
    Tensor x = synthetic_face(2, 32);
    AttackConfig base;
    base.steps = 2;
    auto rows = run_grid(x, init_models(7), base, parse_lambda_grid("attn=0.5,1;mtcnn=0,1", base.losses.weights));
    ASSERT_EQ(rows.size(), 4u);
    for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_GE(rows[i - 1].score, rows[i].score);
    std::string text = format_grid(rows);
    EXPECT_EQ(text.substr(0, text.find('\n')), kGridHeader);
    EXPECT_EQ(text.substr(text.find('\n') + 1, 2), "1,");
}
