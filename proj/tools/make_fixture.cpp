// Writes a seeded random model fixture: model.json, weights.toast,
// inputs.toast and calib.toast.

#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "commands.hpp"

int main(int argc, char** argv) {
    using namespace toast;
    CLI::App app{"toast-fixture: seeded random ViT fixtures"};
    std::string out_dir;
    std::string shape = "deit-tiny";
    std::uint64_t seed = 0;
    std::size_t batches = 2;
    app.add_option("out_dir", out_dir, "Output directory")->required();
    app.add_option("--shape", shape, "deit-tiny | deit-small | deit-base | toy")
        ->check(CLI::IsMember({"deit-tiny", "deit-small", "deit-base", "toy"}));
    app.add_option("--seed", seed, "Seed");
    app.add_option("--batches", batches, "Token batches per archive");
    CLI11_PARSE(app, argc, argv);

    ModelConfig config;
    if (shape == "deit-tiny") config = ModelConfig::deit_tiny();
    else if (shape == "deit-small") config = ModelConfig::deit_small();
    else if (shape == "deit-base") config = ModelConfig::deit_base();
    else config = ModelConfig::make(2, 17, 32, 4, 64);

    std::filesystem::create_directories(out_dir);
    const std::filesystem::path dir(out_dir);
    cli::write_json((dir / "model.json").string(), to_json(config));
    write_archive(dir / "weights.toast", weights_to_tensors(random_weights(config, mix_seed(seed, 0))));
    std::vector<NamedTensor> inputs, calib;
    for (std::size_t b = 0; b < batches; ++b) {
        inputs.push_back({"batch" + std::to_string(b), Tensor::from(random_tokens(config, mix_seed(seed, 100 + b)))});
        calib.push_back({"calib" + std::to_string(b), Tensor::from(random_tokens(config, mix_seed(seed, 200 + b)))});
    }
    write_archive(dir / "inputs.toast", inputs);
    write_archive(dir / "calib.toast", calib);
    std::cerr << "wrote " << shape << " fixture to " << out_dir << "\n";
    return 0;
}
