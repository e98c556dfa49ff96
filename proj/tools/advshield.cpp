#include <cstdlib>
#include <iostream>

#include "CLI11.hpp"
#include "commands.hpp"

using namespace advshield::cli;

int main(int argc, char** argv) {
    CLI::App app{"advshield: protective perturbations against toy face-personalization models"};
    app.require_subcommand(1);

    std::uint64_t gw_seed = 0;
    std::string gw_out;
    auto* gen = app.add_subcommand("gen-weights", "write a seeded toy-model weight file and print its SHA-256");
    gen->add_option("--seed", gw_seed, "weight seed")->required();
    gen->add_option("--out", gw_out, "output weight file")->required();

    ProtectOptions po;
    auto* prot = app.add_subcommand("protect", "perturb one image or every .ppm/.png in a directory");
    prot->add_option("--config", po.config_path, "key = value configuration file");
    prot->add_option("--in", po.input, "input image or directory (overrides `input`)");
    prot->add_option("--weights", po.weights, "weight file (overrides `weights`; default: synthesize from seed)");
    prot->add_option("--out", po.out_dir, "output directory (overrides `output`)");
    prot->add_option("--jobs", po.jobs, "images processed in parallel")->capture_default_str();

    EvaluateOptions eo;
    auto* eval = app.add_subcommand("evaluate", "image metrics and purification robustness");
    eval->add_option("--clean", eo.clean, "clean image")->required();
    eval->add_option("--protected", eo.protected_img, "protected image")->required();
    eval->add_option("--weights", eo.weights, "weight file (default: synthesize from --seed)");
    eval->add_option("--seed", eo.seed, "weight seed when no weight file is given")->capture_default_str();
    eval->add_option("--purifiers", eo.purifiers, "comma-separated list, e.g. jpeg:75,bits:3,resize:0.5:area");

    std::string corrupt;
    auto* gc = app.add_subcommand("gradcheck", "analytic vs finite-difference gradients for every op and loss");
    gc->add_option("--corrupt", corrupt, "scale the analytic gradient of one item (negative control)");

    GridOptions go;
    auto* grid = app.add_subcommand("grid", "rank loss-weight combinations on one image");
    grid->add_option("--config", go.config_path, "key = value configuration file");
    grid->add_option("--lambda-grid", go.lambda_grid, "e.g. \"proj=-1,-0.5;attn=1;mtcnn=0.5,1;id=-1\"")->required();
    grid->add_option("--in", go.input, "input image (overrides `input`)");
    grid->add_option("--weights", go.weights, "weight file (overrides `weights`)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    const char* seed_env = std::getenv("ADVSHIELD_SEED");
    if (*gen) return cmd_gen_weights(gw_seed, gw_out, std::cout, std::cerr);
    if (*prot) {
        po.seed_env = seed_env;
        return cmd_protect(po, std::cout, std::cerr);
    }
    if (*eval) return cmd_evaluate(eo, std::cout, std::cerr);
    if (*gc) return cmd_gradcheck(std::cout, std::cerr, corrupt);
    go.seed_env = seed_env;
    return cmd_grid(go, std::cout, std::cerr);
}
