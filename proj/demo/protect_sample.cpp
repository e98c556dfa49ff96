// Protects one image with the default configuration and reports what the
// perturbation costs in image quality and how much survives JPEG at Q=75.
//
//   demo_protect [input.ppm|png] [output.ppm|png]
// Without an input a seeded synthetic face is used.

#include <cstdio>
#include <string>

#include "advshield/image_io.hpp"
#include "advshield/metrics.hpp"
#include "advshield/noise_update.hpp"
#include "advshield/purification.hpp"
#include "advshield/synthetic.hpp"

using namespace advshield;

int main(int argc, char** argv) {
    try {
        Tensor x = argc > 1 ? read_image(argv[1]) : synthetic_face(0);
        ToyModelBundle models = init_models(7);
        AttackConfig cfg;

        ProtectResult r = protect(x, models, cfg);
        MetricReport m = compute_metrics(models, x, r.protected_image);
        std::printf("linf      %.4f (budget %.4f)\n", linf_norm(r.delta), cfg.eta);
        std::printf("psnr      %.2f dB\nssim      %.4f\nfr        %.3g\nism_toy   %.4f\n", m.psnr, m.ssim, m.fr,
                    m.ism_toy);
        std::printf("L_proj    %.4g -> %.4g\nL_attn    %.4g -> %.4g\nL_mtcnn   %.4g -> %.4g\nL_id      %.4g -> %.4g\n",
                    r.initial.proj + 0.0, r.final.proj, r.initial.attn, r.final.attn, r.initial.mtcnn, r.final.mtcnn,
                    r.initial.id + 0.0, r.final.id);  // + 0.0 prints a negated zero as 0
        std::printf("kept after jpeg:75  %.3f\n", residual_energy_fraction(parse_purifier("jpeg:75"), x, r.protected_image));
        if (argc > 2) write_image(argv[2], r.protected_image);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "demo_protect: %s\n", e.what());
        return 1;
    }
    return 0;
}
